//! Matching quality between ground truths and predictions: a spatial prior
//! gate combined with classification score and box IoU.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{in_center_region, iou, GroundTruth, Prediction};

/// Candidate region restricting which predictions may serve a ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpatialPrior {
    /// Square of half-side `radius * stride` around the instance center,
    /// clipped to the box.
    CenterSampling,
    /// Cell center inside the ground-truth box.
    InsideBox,
    /// No restriction.
    Global,
}

impl FromStr for SpatialPrior {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "center_sampling" => Ok(SpatialPrior::CenterSampling),
            "inside_box" => Ok(SpatialPrior::InsideBox),
            "global" => Ok(SpatialPrior::Global),
            other => Err(Error::invalid(format!("unknown spatial prior `{other}`"))),
        }
    }
}

impl SpatialPrior {
    pub fn as_str(&self) -> &'static str {
        match self {
            SpatialPrior::CenterSampling => "center_sampling",
            SpatialPrior::InsideBox => "inside_box",
            SpatialPrior::Global => "global",
        }
    }
}

/// How classification score and IoU are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    /// Weighted geometric mean `p^(1-alpha) * iou^alpha`.
    Mul,
    /// Weighted arithmetic mean `(1-alpha) * p + alpha * iou`.
    Add,
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mul" => Ok(Fusion::Mul),
            "add" => Ok(Fusion::Add),
            other => Err(Error::invalid(format!("unknown fusion `{other}`"))),
        }
    }
}

impl Fusion {
    pub fn as_str(&self) -> &'static str {
        match self {
            Fusion::Mul => "mul",
            Fusion::Add => "add",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct QualityParams {
    /// Balance between classification (0) and regression (1).
    pub alpha: f64,
    pub prior: SpatialPrior,
    pub fusion: Fusion,
    /// Center-sampling radius in cells.
    pub radius: f64,
}

impl Default for QualityParams {
    fn default() -> Self {
        QualityParams {
            alpha: 0.8,
            prior: SpatialPrior::CenterSampling,
            fusion: Fusion::Mul,
            radius: 1.5,
        }
    }
}

/// Dense G x N matrix of match qualities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QualityMatrix {
    g: usize,
    n: usize,
    values: Vec<f64>,
}

impl QualityMatrix {
    pub fn new(g: usize, n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != g * n {
            return Err(Error::shape(format!(
                "quality matrix wants {} values, got {}",
                g * n,
                values.len()
            )));
        }
        Ok(QualityMatrix { g, n, values })
    }

    pub fn zeros(g: usize, n: usize) -> Self {
        QualityMatrix {
            g,
            n,
            values: vec![0.0; g * n],
        }
    }

    pub fn rows(&self) -> usize {
        self.g
    }

    pub fn cols(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn scaled(&self, factor: f64) -> QualityMatrix {
        QualityMatrix {
            g: self.g,
            n: self.n,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }
}

/// G x N admissibility mask: prediction j's cell center lies in the prior
/// region of ground truth i.
pub fn spatial_prior_mask(
    gts: &[GroundTruth],
    preds: &[Prediction],
    prior: SpatialPrior,
    radius: f64,
    strides: &[f64],
) -> Vec<Vec<bool>> {
    gts.iter()
        .map(|gt| {
            preds
                .iter()
                .map(|p| {
                    let stride = strides.get(p.level).copied().unwrap_or(1.0);
                    let (px, py) = p.location(stride);
                    match prior {
                        SpatialPrior::Global => true,
                        SpatialPrior::InsideBox => gt.bbox.contains(px, py),
                        SpatialPrior::CenterSampling => {
                            in_center_region(px, py, &gt.bbox, radius, stride)
                        }
                    }
                })
                .collect()
        })
        .collect()
}

/// Quality of a single pair given its admissibility.
///
/// Uses the convention `0^0 = 1` so the alpha endpoints stay total.
pub fn pair_quality(score: f64, iou_val: f64, params: &QualityParams) -> f64 {
    match params.fusion {
        Fusion::Mul => score.powf(1.0 - params.alpha) * iou_val.powf(params.alpha),
        Fusion::Add => (1.0 - params.alpha) * score + params.alpha * iou_val,
    }
}

/// Match quality for every (ground truth, prediction) pair.
///
/// The score entering the quality is the prediction's probability for the
/// ground-truth class, not its best class.
pub fn quality_matrix(
    gts: &[GroundTruth],
    preds: &[Prediction],
    params: &QualityParams,
    strides: &[f64],
) -> QualityMatrix {
    let mask = spatial_prior_mask(gts, preds, params.prior, params.radius, strides);
    let mut q = QualityMatrix::zeros(gts.len(), preds.len());
    for (i, gt) in gts.iter().enumerate() {
        for (j, p) in preds.iter().enumerate() {
            if !mask[i][j] {
                continue;
            }
            let score = p.scores.get(gt.category).copied().unwrap_or(0.0);
            let overlap = iou(&gt.bbox, &p.bbox);
            q.set(i, j, pair_quality(score, overlap, params));
        }
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn gt(b: BBox) -> GroundTruth {
        GroundTruth {
            category: 0,
            bbox: b,
            id: 0,
        }
    }

    fn pred_at(level: usize, cell: (usize, usize), score: f64, b: BBox) -> Prediction {
        Prediction {
            scores: vec![score],
            bbox: b,
            level,
            cell,
            anchor: None,
        }
    }

    #[test]
    fn global_prior_admits_everything() {
        let gts = vec![gt(BBox::new(0.0, 0.0, 10.0, 10.0))];
        let preds = vec![
            pred_at(0, (0, 0), 0.5, BBox::new(0.0, 0.0, 1.0, 1.0)),
            pred_at(0, (50, 50), 0.5, BBox::new(0.0, 0.0, 1.0, 1.0)),
        ];
        let mask = spatial_prior_mask(&gts, &preds, SpatialPrior::Global, 1.5, &[8.0]);
        assert!(mask[0].iter().all(|&m| m));
    }

    #[test]
    fn inside_box_prior_uses_cell_center() {
        let gts = vec![gt(BBox::new(0.0, 0.0, 10.0, 10.0))];
        // stride 8: cell (0,0) centers at (4,4) inside; cell (0,2) at (20,4) outside
        let preds = vec![
            pred_at(0, (0, 0), 0.5, BBox::new(0.0, 0.0, 1.0, 1.0)),
            pred_at(0, (0, 2), 0.5, BBox::new(0.0, 0.0, 1.0, 1.0)),
        ];
        let mask = spatial_prior_mask(&gts, &preds, SpatialPrior::InsideBox, 1.5, &[8.0]);
        assert_eq!(mask[0], vec![true, false]);
    }

    #[test]
    fn center_sampling_radius_cutoff() {
        // gt center (50, 50); stride 8, radius 1.5 -> half-side 12
        let gts = vec![gt(BBox::new(0.0, 0.0, 100.0, 100.0))];
        // cell (6, 8) centers at (68, 52): |68-50| = 18 > 12 -> out
        // cell (6, 7) centers at (60, 52): 10 <= 12 and 2 <= 12 -> in
        let preds = vec![
            pred_at(0, (6, 7), 0.5, BBox::new(0.0, 0.0, 1.0, 1.0)),
            pred_at(0, (6, 8), 0.5, BBox::new(0.0, 0.0, 1.0, 1.0)),
        ];
        let mask = spatial_prior_mask(&gts, &preds, SpatialPrior::CenterSampling, 1.5, &[8.0]);
        assert_eq!(mask[0], vec![true, false]);
    }

    #[test]
    fn perfect_pair_has_unit_quality() {
        let b = BBox::new(0.0, 0.0, 16.0, 16.0);
        let gts = vec![gt(b)];
        let preds = vec![pred_at(0, (1, 1), 1.0, b)];
        for alpha in [0.0, 0.3, 0.8, 1.0] {
            let params = QualityParams {
                alpha,
                ..QualityParams::default()
            };
            let q = quality_matrix(&gts, &preds, &params, &[8.0]);
            assert_eq!(q.get(0, 0), 1.0);
        }
    }

    #[test]
    fn mul_fusion_geometric_mean() {
        let params = QualityParams {
            alpha: 0.8,
            ..QualityParams::default()
        };
        // 0.5^0.2 * 0.5^0.8 = 0.5
        assert!((pair_quality(0.5, 0.5, &params) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn outside_prior_is_zero() {
        let gts = vec![gt(BBox::new(0.0, 0.0, 10.0, 10.0))];
        // cell far away, but a perfect box and score
        let preds = vec![pred_at(0, (40, 40), 1.0, BBox::new(0.0, 0.0, 10.0, 10.0))];
        let q = quality_matrix(&gts, &preds, &QualityParams::default(), &[8.0]);
        assert_eq!(q.get(0, 0), 0.0);
    }

    #[test]
    fn alpha_endpoints_reduce_to_single_factor() {
        let b = BBox::new(0.0, 0.0, 16.0, 16.0);
        let gts = vec![gt(b)];
        let shifted = BBox::new(4.0, 0.0, 20.0, 16.0);
        let preds = vec![pred_at(0, (1, 1), 0.37, shifted)];
        let expect_iou = iou(&b, &shifted);

        let q0 = quality_matrix(
            &gts,
            &preds,
            &QualityParams {
                alpha: 0.0,
                ..QualityParams::default()
            },
            &[8.0],
        );
        assert!((q0.get(0, 0) - 0.37).abs() < 1e-12);

        let q1 = quality_matrix(
            &gts,
            &preds,
            &QualityParams {
                alpha: 1.0,
                ..QualityParams::default()
            },
            &[8.0],
        );
        assert!((q1.get(0, 0) - expect_iou).abs() < 1e-12);
    }

    #[test]
    fn zero_power_zero_is_one() {
        // score 0 with alpha 1 must not poison the regression-only quality
        let params = QualityParams {
            alpha: 1.0,
            ..QualityParams::default()
        };
        assert_eq!(pair_quality(0.0, 0.5, &params), 0.5);
        let params0 = QualityParams {
            alpha: 0.0,
            ..QualityParams::default()
        };
        assert_eq!(pair_quality(0.5, 0.0, &params0), 0.5);
    }

    #[test]
    fn add_fusion_between_operands() {
        let params = QualityParams {
            alpha: 0.3,
            fusion: Fusion::Add,
            ..QualityParams::default()
        };
        let q = pair_quality(0.2, 0.9, &params);
        assert!(q >= 0.2 && q <= 0.9);
        assert!((q - (0.7 * 0.2 + 0.3 * 0.9)).abs() < 1e-12);
    }
}
