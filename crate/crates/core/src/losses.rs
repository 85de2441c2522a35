//! Classification and regression losses: the training objective and the
//! pairwise matching cost.

use crate::error::{Error, Result};
use crate::geometry::{giou, BBox, GroundTruth, Prediction};
use crate::matching::Assignment;

const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug)]
pub struct LossParams {
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub regression_weight: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            regression_weight: 2.0,
        }
    }
}

/// Focal loss for a single binary target.
///
/// `FL = -alpha_t * (1 - p_t)^gamma * ln(p_t)` with `p_t = p` for positive
/// targets and `1 - p` otherwise; `alpha_t` is `alpha` for positives and
/// `1 - alpha` for negatives. `p` is clamped to `[1e-7, 1 - 1e-7]`.
pub fn focal_loss(p: f64, target: bool, params: &LossParams) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let (p_t, alpha_t) = if target {
        (p, params.focal_alpha)
    } else {
        (1.0 - p, 1.0 - params.focal_alpha)
    };
    -alpha_t * (1.0 - p_t).powf(params.focal_gamma) * p_t.ln()
}

/// Regression loss `1 - giou`, in `[0, 2]`.
pub fn giou_loss(a: &BBox, b: &BBox) -> f64 {
    1.0 - giou(a, b)
}

/// Foreground loss of one (ground truth, prediction) pair: focal on the
/// ground-truth class plus weighted GIoU loss on the box.
pub fn foreground_loss(gt: &GroundTruth, pred: &Prediction, params: &LossParams) -> f64 {
    let score = pred.scores.get(gt.category).copied().unwrap_or(0.0);
    focal_loss(score, true, params) + params.regression_weight * giou_loss(&gt.bbox, &pred.bbox)
}

/// Background loss of one prediction: focal with a negative target on every
/// class, summed.
pub fn background_loss(pred: &Prediction, params: &LossParams) -> f64 {
    pred.scores
        .iter()
        .map(|&s| focal_loss(s, false, params))
        .sum()
}

/// Total objective: foreground loss over assigned pairs plus background loss
/// over every unassigned prediction.
pub fn total_loss(
    gts: &[GroundTruth],
    preds: &[Prediction],
    assignment: &Assignment,
    params: &LossParams,
) -> Result<f64> {
    let mut taken = vec![false; preds.len()];
    for &(gi, pj) in &assignment.pairs {
        if gi >= gts.len() || pj >= preds.len() {
            return Err(Error::invalid(format!(
                "assignment pair ({gi}, {pj}) out of range"
            )));
        }
        if taken[pj] {
            return Err(Error::invalid(format!(
                "assignment not injective: prediction {pj} used twice"
            )));
        }
        taken[pj] = true;
    }

    let mut total = 0.0;
    for &(gi, pj) in &assignment.pairs {
        total += foreground_loss(&gts[gi], &preds[pj], params);
    }
    for (j, pred) in preds.iter().enumerate() {
        if !taken[j] {
            total += background_loss(pred, params);
        }
    }
    Ok(total)
}
