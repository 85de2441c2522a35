//! Label-assignment rules: each maps (ground truths, predictions) to
//! per-prediction training targets.
//!
//! One-to-one rules produce at most one foreground sample per ground truth
//! and carry the underlying [`Assignment`]; one-to-many rules may mark many.
//! A prediction claimed by several ground truths always goes to the one with
//! the smallest area (ties to the smaller index).

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{in_center_region, iou, BBox, GroundTruth, Prediction};
use crate::losses::LossParams;
use crate::matching::{hungarian_max, loss_cost_match, Assignment};
use crate::quality::{quality_matrix, QualityParams};

/// Training target of a single prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Background,
    /// Foreground for the ground truth at this index.
    Foreground(usize),
}

/// Per-prediction targets plus bookkeeping about the assignment.
#[derive(Clone, Debug)]
pub struct TargetSet {
    pub targets: Vec<Target>,
    /// Present for one-to-one rules.
    pub assignment: Option<Assignment>,
    /// Ground truths that received no foreground sample.
    pub unmatched_gts: Vec<usize>,
}

impl TargetSet {
    fn all_background(n: usize) -> Self {
        TargetSet {
            targets: vec![Target::Background; n],
            assignment: None,
            unmatched_gts: vec![],
        }
    }

    pub fn foreground_count(&self) -> usize {
        self.targets
            .iter()
            .filter(|t| matches!(t, Target::Foreground(_)))
            .count()
    }

    /// `(gt, pred)` pairs in prediction order.
    pub fn foreground_pairs(&self) -> Vec<(usize, usize)> {
        self.targets
            .iter()
            .enumerate()
            .filter_map(|(j, t)| match t {
                Target::Foreground(i) => Some((*i, j)),
                Target::Background => None,
            })
            .collect()
    }
}

fn from_assignment(n_preds: usize, assignment: Assignment) -> TargetSet {
    let mut targets = vec![Target::Background; n_preds];
    for &(gi, pj) in &assignment.pairs {
        targets[pj] = Target::Foreground(gi);
    }
    let unmatched = assignment.unmatched.clone();
    TargetSet {
        targets,
        assignment: Some(assignment),
        unmatched_gts: unmatched,
    }
}

/// Resolves cross-gt contention for one-to-many rules: smallest area wins.
fn resolve_one_to_many(
    gts: &[GroundTruth],
    n_preds: usize,
    claims: &[(usize, usize)],
) -> TargetSet {
    let mut winner: Vec<Option<usize>> = vec![None; n_preds];
    for &(gi, pj) in claims {
        winner[pj] = Some(match winner[pj] {
            None => gi,
            Some(current) => {
                let (a, b) = (gts[gi].bbox.area(), gts[current].bbox.area());
                if a < b || (a == b && gi < current) {
                    gi
                } else {
                    current
                }
            }
        });
    }
    let mut targets = vec![Target::Background; n_preds];
    let mut has_sample = vec![false; gts.len()];
    for (pj, w) in winner.iter().enumerate() {
        if let Some(gi) = w {
            targets[pj] = Target::Foreground(*gi);
            has_sample[*gi] = true;
        }
    }
    let unmatched = has_sample
        .iter()
        .enumerate()
        .filter(|(_, &m)| !m)
        .map(|(i, _)| i)
        .collect();
    TargetSet {
        targets,
        assignment: None,
        unmatched_gts: unmatched,
    }
}

/// FCOS-style scale intervals, `(lo, hi]` per level.
pub fn default_level_ranges() -> Vec<(f64, f64)> {
    vec![
        (0.0, 64.0),
        (64.0, 128.0),
        (128.0, 256.0),
        (256.0, 512.0),
        (512.0, f64::INFINITY),
    ]
}

pub fn default_strides() -> Vec<f64> {
    vec![8.0, 16.0, 32.0, 64.0, 128.0]
}

fn gt_scale(gt: &GroundTruth) -> f64 {
    gt.bbox.width().max(gt.bbox.height())
}

fn level_for_scale(scale: f64, ranges: &[(f64, f64)]) -> Option<usize> {
    ranges
        .iter()
        .position(|&(lo, hi)| scale > lo && scale <= hi)
}

/// Largest distance from a location to the four box sides.
fn max_regression_target(px: f64, py: f64, bbox: &BBox) -> f64 {
    let l = px - bbox.x1;
    let t = py - bbox.y1;
    let r = bbox.x2 - px;
    let b = bbox.y2 - py;
    l.max(t).max(r).max(b)
}

fn stride_of(strides: &[f64], level: usize) -> f64 {
    strides.get(level).copied().unwrap_or(1.0)
}

/// Prediction-aware one-to-one assignment: quality matrix maximized by the
/// Hungarian solver, foreground at matched predictions.
pub fn poto_assign(
    gts: &[GroundTruth],
    preds: &[Prediction],
    params: &QualityParams,
    strides: &[f64],
) -> Result<TargetSet> {
    if gts.is_empty() || preds.is_empty() {
        return Ok(TargetSet {
            unmatched_gts: (0..gts.len()).collect(),
            ..TargetSet::all_background(preds.len())
        });
    }
    let q = quality_matrix(gts, preds, params, strides);
    let assignment = hungarian_max(&q)?;
    Ok(from_assignment(preds.len(), assignment))
}

/// One-to-one assignment minimizing the foreground loss.
pub fn loss_cost_assign(
    gts: &[GroundTruth],
    preds: &[Prediction],
    params: &LossParams,
) -> Result<TargetSet> {
    if gts.is_empty() || preds.is_empty() {
        return Ok(TargetSet {
            unmatched_gts: (0..gts.len()).collect(),
            ..TargetSet::all_background(preds.len())
        });
    }
    let assignment = loss_cost_match(gts, preds, params)?;
    Ok(from_assignment(preds.len(), assignment))
}

/// Each ground truth takes the anchor of maximum IoU; a contested anchor goes
/// to the higher-IoU ground truth and the loser falls back to its next best.
pub fn anchor_rule(gts: &[GroundTruth], preds: &[Prediction]) -> Result<TargetSet> {
    if gts.is_empty() {
        return Ok(TargetSet::all_background(preds.len()));
    }
    let anchors: Vec<&BBox> = preds
        .iter()
        .map(|p| {
            p.anchor
                .as_ref()
                .ok_or_else(|| Error::invalid("anchor rule needs anchors on every prediction"))
        })
        .collect::<Result<_>>()?;

    // Greedy over all pairs by descending IoU realizes the winner/runner-up
    // recursion directly.
    let mut edges: Vec<(f64, usize, usize)> = Vec::new();
    for (gi, gt) in gts.iter().enumerate() {
        for (pj, anchor) in anchors.iter().enumerate() {
            let overlap = iou(&gt.bbox, anchor);
            if overlap > 0.0 {
                edges.push((overlap, gi, pj));
            }
        }
    }
    edges.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut gt_done = vec![false; gts.len()];
    let mut pred_taken = vec![false; preds.len()];
    let mut pairs = Vec::new();
    let mut objective = 0.0;
    for (overlap, gi, pj) in edges {
        if gt_done[gi] || pred_taken[pj] {
            continue;
        }
        gt_done[gi] = true;
        pred_taken[pj] = true;
        pairs.push((gi, pj));
        objective += overlap;
    }
    pairs.sort();
    let unmatched = gt_done
        .iter()
        .enumerate()
        .filter(|(_, &d)| !d)
        .map(|(i, _)| i)
        .collect();
    Ok(from_assignment(
        preds.len(),
        Assignment {
            pairs,
            objective,
            unmatched,
        },
    ))
}

/// Each ground truth takes the cell nearest its center on its scale level.
/// The level is the one whose `(lo, hi]` range contains `max(width, height)`.
/// A contested cell goes to the earlier ground truth; the loser is reported
/// unmatched.
pub fn center_rule(
    gts: &[GroundTruth],
    preds: &[Prediction],
    level_ranges: &[(f64, f64)],
    strides: &[f64],
) -> Result<TargetSet> {
    if gts.is_empty() {
        return Ok(TargetSet::all_background(preds.len()));
    }
    let mut pred_taken = vec![false; preds.len()];
    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    let mut objective = 0.0;
    for (gi, gt) in gts.iter().enumerate() {
        let Some(level) = level_for_scale(gt_scale(gt), level_ranges) else {
            unmatched.push(gi);
            continue;
        };
        let (cx, cy) = gt.bbox.center();
        let mut best: Option<(f64, (usize, usize), usize)> = None;
        for (pj, p) in preds.iter().enumerate() {
            if p.level != level {
                continue;
            }
            let (px, py) = p.location(stride_of(strides, level));
            let d2 = (px - cx) * (px - cx) + (py - cy) * (py - cy);
            let key = (d2, p.cell, pj);
            if best.map_or(true, |(bd, bc, bj)| key < (bd, bc, bj)) {
                best = Some(key);
            }
        }
        match best {
            Some((d2, _, pj)) if !pred_taken[pj] => {
                pred_taken[pj] = true;
                pairs.push((gi, pj));
                objective += d2.sqrt();
            }
            _ => unmatched.push(gi),
        }
    }
    Ok(from_assignment(
        preds.len(),
        Assignment {
            pairs,
            objective,
            unmatched,
        },
    ))
}

/// FCOS one-to-many: every cell passing center sampling and the per-level
/// scale-range test is foreground.
pub fn fcos_o2m(
    gts: &[GroundTruth],
    preds: &[Prediction],
    level_ranges: &[(f64, f64)],
    radius: f64,
    strides: &[f64],
) -> TargetSet {
    let mut claims = Vec::new();
    for (pj, p) in preds.iter().enumerate() {
        let Some(&(lo, hi)) = level_ranges.get(p.level) else {
            continue;
        };
        let (px, py) = p.location(stride_of(strides, p.level));
        for (gi, gt) in gts.iter().enumerate() {
            if !in_center_region(px, py, &gt.bbox, radius, stride_of(strides, p.level)) {
                continue;
            }
            let m = max_regression_target(px, py, &gt.bbox);
            if m > lo && m <= hi {
                claims.push((gi, pj));
            }
        }
    }
    resolve_one_to_many(gts, preds.len(), &claims)
}

fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt()
}

/// ATSS one-to-many: per ground truth, the top-k nearest cells per level are
/// candidates; candidates with anchor IoU at or above mean + std whose cell
/// center lies inside the box are foreground.
pub fn atss_o2m(
    gts: &[GroundTruth],
    preds: &[Prediction],
    k: usize,
    strides: &[f64],
) -> Result<TargetSet> {
    for p in preds {
        if p.anchor.is_none() {
            return Err(Error::invalid("atss rule needs anchors on every prediction"));
        }
    }
    let num_levels = preds.iter().map(|p| p.level + 1).max().unwrap_or(0);
    let mut claims = Vec::new();
    for (gi, gt) in gts.iter().enumerate() {
        let (cx, cy) = gt.bbox.center();
        let mut candidates: Vec<usize> = Vec::new();
        for level in 0..num_levels {
            let mut level_preds: Vec<(f64, usize)> = preds
                .iter()
                .enumerate()
                .filter(|(_, p)| p.level == level)
                .map(|(pj, p)| {
                    let (px, py) = p.location(stride_of(strides, level));
                    let d2 = (px - cx) * (px - cx) + (py - cy) * (py - cy);
                    (d2, pj)
                })
                .collect();
            level_preds.sort_by(|a, b| {
                a.0.partial_cmp(&b.0)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(preds[a.1].cell.cmp(&preds[b.1].cell))
                    .then(a.1.cmp(&b.1))
            });
            candidates.extend(level_preds.into_iter().take(k).map(|(_, pj)| pj));
        }
        if candidates.is_empty() {
            continue;
        }
        let ious: Vec<f64> = candidates
            .iter()
            .map(|&pj| iou(&gt.bbox, preds[pj].anchor.as_ref().unwrap()))
            .collect();
        let threshold = ious.iter().sum::<f64>() / ious.len() as f64 + population_std(&ious);
        for (&pj, &overlap) in candidates.iter().zip(&ious) {
            let (px, py) = p_location(preds, pj, strides);
            if overlap >= threshold && gt.bbox.contains(px, py) {
                claims.push((gi, pj));
            }
        }
    }
    Ok(resolve_one_to_many(gts, preds.len(), &claims))
}

fn p_location(preds: &[Prediction], pj: usize, strides: &[f64]) -> (f64, f64) {
    preds[pj].location(stride_of(strides, preds[pj].level))
}

/// Quality-driven ATSS: candidates are the top-k predictions per level by
/// match quality; the pooled candidates are thresholded at mean + std of
/// their qualities. Zero-quality predictions are never candidates.
pub fn quality_atss(
    gts: &[GroundTruth],
    preds: &[Prediction],
    params: &QualityParams,
    k: usize,
    strides: &[f64],
) -> TargetSet {
    let q = quality_matrix(gts, preds, params, strides);
    let num_levels = preds.iter().map(|p| p.level + 1).max().unwrap_or(0);
    let mut claims = Vec::new();
    for gi in 0..gts.len() {
        let mut candidates: Vec<usize> = Vec::new();
        for level in 0..num_levels {
            let mut level_preds: Vec<(f64, usize)> = preds
                .iter()
                .enumerate()
                .filter(|(pj, p)| p.level == level && q.get(gi, *pj) > 0.0)
                .map(|(pj, _)| (q.get(gi, pj), pj))
                .collect();
            level_preds.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.1.cmp(&b.1))
            });
            candidates.extend(level_preds.into_iter().take(k).map(|(_, pj)| pj));
        }
        if candidates.is_empty() {
            continue;
        }
        let qualities: Vec<f64> = candidates.iter().map(|&pj| q.get(gi, pj)).collect();
        let threshold =
            qualities.iter().sum::<f64>() / qualities.len() as f64 + population_std(&qualities);
        for (&pj, &qv) in candidates.iter().zip(&qualities) {
            if qv >= threshold {
                claims.push((gi, pj));
            }
        }
    }
    resolve_one_to_many(gts, preds.len(), &claims)
}

/// FCOS one-to-many with the level chosen by best quality instead of the
/// scale ranges; ties go to the lower level.
pub fn quality_fcos(
    gts: &[GroundTruth],
    preds: &[Prediction],
    params: &QualityParams,
    radius: f64,
    strides: &[f64],
) -> TargetSet {
    let q = quality_matrix(gts, preds, params, strides);
    let num_levels = preds.iter().map(|p| p.level + 1).max().unwrap_or(0);
    let mut claims = Vec::new();
    for (gi, gt) in gts.iter().enumerate() {
        let mut best_level: Option<(f64, usize)> = None;
        for level in 0..num_levels {
            let best_q = preds
                .iter()
                .enumerate()
                .filter(|(_, p)| p.level == level)
                .map(|(pj, _)| q.get(gi, pj))
                .fold(f64::NEG_INFINITY, f64::max);
            if best_q.is_finite() && best_level.map_or(true, |(bq, _)| best_q > bq) {
                best_level = Some((best_q, level));
            }
        }
        let Some((_, level)) = best_level else {
            continue;
        };
        for (pj, p) in preds.iter().enumerate() {
            if p.level != level {
                continue;
            }
            let stride = stride_of(strides, level);
            let (px, py) = p.location(stride);
            if in_center_region(px, py, &gt.bbox, radius, stride) {
                claims.push((gi, pj));
            }
        }
    }
    resolve_one_to_many(gts, preds.len(), &claims)
}

/// Each ground truth takes its k highest-quality predictions over all levels.
pub fn quality_topk(
    gts: &[GroundTruth],
    preds: &[Prediction],
    params: &QualityParams,
    k: usize,
    strides: &[f64],
) -> TargetSet {
    let q = quality_matrix(gts, preds, params, strides);
    let mut claims = Vec::new();
    for gi in 0..gts.len() {
        let mut ranked: Vec<(f64, usize)> = (0..preds.len())
            .filter(|&pj| q.get(gi, pj) > 0.0)
            .map(|pj| (q.get(gi, pj), pj))
            .collect();
        ranked.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
        });
        claims.extend(ranked.into_iter().take(k).map(|(_, pj)| (gi, pj)));
    }
    resolve_one_to_many(gts, preds.len(), &claims)
}

/// Parameters shared by the rule dispatcher.
#[derive(Clone, Debug)]
pub struct RuleParams {
    pub quality: QualityParams,
    pub loss: LossParams,
    pub strides: Vec<f64>,
    pub level_ranges: Vec<(f64, f64)>,
    pub top_k: usize,
}

impl Default for RuleParams {
    fn default() -> Self {
        RuleParams {
            quality: QualityParams::default(),
            loss: LossParams::default(),
            strides: default_strides(),
            level_ranges: default_level_ranges(),
            top_k: 9,
        }
    }
}

/// The rule family selectable by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rule {
    Poto,
    Anchor,
    Center,
    Fcos,
    Atss,
    QualityAtss,
    QualityFcos,
    QualityTopk,
    LossCost,
}

pub const ALL_RULES: [Rule; 9] = [
    Rule::Poto,
    Rule::Anchor,
    Rule::Center,
    Rule::Fcos,
    Rule::Atss,
    Rule::QualityAtss,
    Rule::QualityFcos,
    Rule::QualityTopk,
    Rule::LossCost,
];

impl Rule {
    pub fn as_str(&self) -> &'static str {
        match self {
            Rule::Poto => "poto",
            Rule::Anchor => "anchor",
            Rule::Center => "center",
            Rule::Fcos => "fcos",
            Rule::Atss => "atss",
            Rule::QualityAtss => "quality_atss",
            Rule::QualityFcos => "quality_fcos",
            Rule::QualityTopk => "quality_topk",
            Rule::LossCost => "loss_cost",
        }
    }

    /// Whether the rule emits at most one foreground sample per ground truth.
    pub fn is_one_to_one(&self) -> bool {
        matches!(
            self,
            Rule::Poto | Rule::Anchor | Rule::Center | Rule::LossCost
        )
    }
}

impl FromStr for Rule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ALL_RULES
            .iter()
            .find(|r| r.as_str() == s)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown rule `{s}`")))
    }
}

impl std::fmt::Display for Rule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn apply_rule(
    rule: Rule,
    gts: &[GroundTruth],
    preds: &[Prediction],
    params: &RuleParams,
) -> Result<TargetSet> {
    let radius = params.quality.radius;
    match rule {
        Rule::Poto => poto_assign(gts, preds, &params.quality, &params.strides),
        Rule::LossCost => loss_cost_assign(gts, preds, &params.loss),
        Rule::Anchor => anchor_rule(gts, preds),
        Rule::Center => center_rule(gts, preds, &params.level_ranges, &params.strides),
        Rule::Fcos => Ok(fcos_o2m(
            gts,
            preds,
            &params.level_ranges,
            radius,
            &params.strides,
        )),
        Rule::Atss => atss_o2m(gts, preds, params.top_k, &params.strides),
        Rule::QualityAtss => Ok(quality_atss(
            gts,
            preds,
            &params.quality,
            params.top_k,
            &params.strides,
        )),
        Rule::QualityFcos => Ok(quality_fcos(
            gts,
            preds,
            &params.quality,
            radius,
            &params.strides,
        )),
        Rule::QualityTopk => Ok(quality_topk(
            gts,
            preds,
            &params.quality,
            params.top_k,
            &params.strides,
        )),
    }
}
