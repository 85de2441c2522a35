//! Boxes, overlap measures and spatial membership predicates.
//!
//! Boxes are corner-form `(x1, y1, x2, y2)` in continuous image coordinates.
//! Areas are `(x2 - x1) * (y2 - y1)` with no `+1` term.

use serde::{Deserialize, Serialize};

/// Axis-aligned rectangle, `x1 <= x2` and `y1 <= y2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        debug_assert!(x1 <= x2 && y1 <= y2, "corners out of order");
        BBox { x1, y1, x2, y2 }
    }

    /// Builds a box from COCO-style `[x, y, width, height]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2 - self.x1, self.y2 - self.y1]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// A box is degenerate when it has zero width or zero height.
    pub fn is_degenerate(&self) -> bool {
        self.x1 == self.x2 || self.y1 == self.y2
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Inclusive containment test.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    /// Smallest box enclosing both operands.
    pub fn hull(&self, other: &BBox) -> BBox {
        BBox::new(
            self.x1.min(other.x1),
            self.y1.min(other.y1),
            self.x2.max(other.x2),
            self.y2.max(other.y2),
        )
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }
}

fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

/// Intersection over union. Total: returns 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU in `[-1, 1]`: IoU minus the hull slack ratio.
///
/// Falls back to plain IoU when the hull itself is empty.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    let hull = a.hull(b).area();
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    if hull <= 0.0 {
        iou
    } else {
        iou - (hull - union) / hull
    }
}

/// Center-sampling membership: `point` lies within a square of half-side
/// `radius_cells * stride` around the box center, clipped to the box itself.
///
/// With an infinite radius this degrades to the inside-box test.
pub fn in_center_region(px: f64, py: f64, gt: &BBox, radius_cells: f64, stride: f64) -> bool {
    debug_assert!(stride > 0.0, "stride must be positive");
    let (cx, cy) = gt.center();
    let half = radius_cells * stride;
    (px - cx).abs() <= half && (py - cy).abs() <= half && gt.contains(px, py)
}

/// Annotated object instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Contiguous class index in `[0, num_classes)`.
    pub category: usize,
    pub bbox: BBox,
    /// Stable key, preserved through dataset round trips.
    pub id: i64,
}

/// Per-location detector output.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Per-class probabilities in `[0, 1]`.
    pub scores: Vec<f64>,
    pub bbox: BBox,
    /// Pyramid level index.
    pub level: usize,
    /// `(row, col)` grid index on that level.
    pub cell: (usize, usize),
    /// Canonical anchor box, required by anchor-based rules.
    pub anchor: Option<BBox>,
}

impl Prediction {
    /// Image-plane location of the cell center for the given stride.
    pub fn location(&self, stride: f64) -> (f64, f64) {
        (
            (self.cell.1 as f64 + 0.5) * stride,
            (self.cell.0 as f64 + 0.5) * stride,
        )
    }

    /// Highest-scoring class and its score.
    pub fn top_class(&self) -> (usize, f64) {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (c, &s) in self.scores.iter().enumerate() {
            if s > best_score {
                best = c;
                best_score = s;
            }
        }
        (best, best_score)
    }
}

/// Final scored detection fed to NMS and evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub category: usize,
    pub level: usize,
    pub cell: (usize, usize),
}
