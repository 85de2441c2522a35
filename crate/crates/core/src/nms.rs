//! Greedy non-maximum suppression and its restricted variants: per-scale
//! suppression and windowed suppression in cell space.

use std::fmt;
use std::str::FromStr;

use crate::error::Error;
use crate::geometry::{iou, Detection};
use crate::metrics::{evaluate, ImageSample};

/// Cell-space window limiting which pairs may suppress each other.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpatialRange {
    /// Odd window width in cells, centered on the survivor.
    Window(usize),
    Infinite,
}

impl SpatialRange {
    pub fn is_infinite(&self) -> bool {
        matches!(self, SpatialRange::Infinite)
    }
}

impl fmt::Display for SpatialRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpatialRange::Window(k) => write!(f, "{k}x{k}"),
            SpatialRange::Infinite => write!(f, "inf"),
        }
    }
}

impl FromStr for SpatialRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        if s == "inf" || s == "infinite" {
            return Ok(SpatialRange::Infinite);
        }
        let k: usize = s
            .parse()
            .map_err(|_| Error::invalid(format!("bad spatial range `{s}`")))?;
        if k % 2 == 0 {
            return Err(Error::invalid("spatial range must be odd or `inf`"));
        }
        Ok(SpatialRange::Window(k))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NmsConfig {
    /// Overlap beyond this threshold suppresses (strict comparison).
    pub iou_threshold: f64,
    /// Allow suppression across pyramid levels.
    pub across_scales: bool,
    pub spatial_range: SpatialRange,
    /// Detections below this score are dropped before suppression.
    pub score_floor: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig {
            iou_threshold: 0.6,
            across_scales: true,
            spatial_range: SpatialRange::Infinite,
            score_floor: 0.05,
        }
    }
}

impl NmsConfig {
    pub fn id(&self) -> String {
        format!(
            "across={};range={};iou={}",
            self.across_scales, self.spatial_range, self.iou_threshold
        )
    }
}

/// Projects a cell index at `from_level` onto `to_level`, using the strictly
/// doubling stride invariant (one level up halves the resolution).
fn project_cell(cell: (usize, usize), from_level: usize, to_level: usize) -> (isize, isize) {
    let ratio = 2f64.powi(from_level as i32 - to_level as i32);
    let row = ((cell.0 as f64 + 0.5) * ratio).floor() as isize;
    let col = ((cell.1 as f64 + 0.5) * ratio).floor() as isize;
    (row, col)
}

fn may_suppress(survivor: &Detection, candidate: &Detection, cfg: &NmsConfig) -> bool {
    if candidate.category != survivor.category {
        return false;
    }
    if !cfg.across_scales && candidate.level != survivor.level {
        return false;
    }
    if let SpatialRange::Window(k) = cfg.spatial_range {
        let half = ((k - 1) / 2) as isize;
        let (cr, cc) = project_cell(candidate.cell, candidate.level, survivor.level);
        let dr = cr - survivor.cell.0 as isize;
        let dc = cc - survivor.cell.1 as isize;
        if dr.abs() > half || dc.abs() > half {
            return false;
        }
    }
    iou(&survivor.bbox, &candidate.bbox) > cfg.iou_threshold
}

/// Classic per-class greedy suppression, restricted by the config.
///
/// Returns kept indices into `dets` in processing order (descending score,
/// ties broken by level then cell).
pub fn greedy_nms(dets: &[Detection], cfg: &NmsConfig) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].score >= cfg.score_floor)
        .collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(dets[a].level.cmp(&dets[b].level))
            .then(dets[a].cell.cmp(&dets[b].cell))
    });

    let mut alive = vec![true; dets.len()];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if !alive[i] {
            continue;
        }
        kept.push(i);
        for &j in &order[pos + 1..] {
            if alive[j] && may_suppress(&dets[i], &dets[j], cfg) {
                alive[j] = false;
            }
        }
    }
    kept
}

/// Applies NMS per image and keeps only surviving detections.
pub fn apply_nms(samples: &[ImageSample], cfg: &NmsConfig) -> Vec<ImageSample> {
    samples
        .iter()
        .map(|s| {
            let kept = greedy_nms(&s.dets, cfg);
            ImageSample {
                dets: kept.into_iter().map(|i| s.dets[i].clone()).collect(),
                gts: s.gts.clone(),
            }
        })
        .collect()
}

/// One evaluated NMS configuration.
#[derive(Clone, Debug)]
pub struct NmsStudyRow {
    pub config_id: String,
    pub across_scales: bool,
    pub spatial_range: SpatialRange,
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar: f64,
}

/// Evaluates each configuration on a fixed dataset.
pub fn nms_study(samples: &[ImageSample], configs: &[NmsConfig]) -> Vec<NmsStudyRow> {
    configs
        .iter()
        .map(|cfg| {
            let filtered = apply_nms(samples, cfg);
            let result = evaluate(&filtered);
            NmsStudyRow {
                config_id: cfg.id(),
                across_scales: cfg.across_scales,
                spatial_range: cfg.spatial_range,
                map: result.map,
                ap50: result.ap50,
                ap75: result.ap75,
                ar: result.ar,
            }
        })
        .collect()
}

pub fn study_csv(rows: &[NmsStudyRow]) -> String {
    let mut out = String::from("config_id,across_scales,spatial_range,AP,AP50,AP75,AR\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.config_id, r.across_scales, r.spatial_range, r.map, r.ap50, r.ap75, r.ar
        ));
    }
    out
}
