//! COCO-protocol average precision / recall and duplicate diagnostics.
//!
//! AP uses 101-point interpolation per class, averaged over the classes that
//! have ground truth. mAP additionally averages over IoU thresholds
//! 0.50:0.05:0.95. Area ranges are not split.

use std::collections::BTreeSet;

use crate::geometry::{iou, Detection, GroundTruth};

/// One image's detections and ground truths.
#[derive(Clone, Debug, Default)]
pub struct ImageSample {
    pub dets: Vec<Detection>,
    pub gts: Vec<GroundTruth>,
}

/// IoU thresholds 0.50:0.05:0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Per-detection match outcome of the greedy COCO-style matching.
#[derive(Clone, Debug)]
pub struct MatchOutcome {
    /// For each detection (input order): matched ground-truth index.
    pub det_matches: Vec<Option<usize>>,
    /// Ground truths no detection claimed.
    pub false_negatives: usize,
}

/// Greedy matching: detections in descending score order each claim the
/// unmatched same-class ground truth of highest IoU at or above the
/// threshold. One ground truth per detection.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_thr: f64) -> MatchOutcome {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut gt_taken = vec![false; gts.len()];
    let mut det_matches = vec![None; dets.len()];
    for &di in &order {
        let det = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_taken[gi] || gt.category != det.category {
                continue;
            }
            let overlap = iou(&det.bbox, &gt.bbox);
            if overlap < iou_thr {
                continue;
            }
            if best.map_or(true, |(_, b)| overlap > b) {
                best = Some((gi, overlap));
            }
        }
        if let Some((gi, _)) = best {
            gt_taken[gi] = true;
            det_matches[di] = Some(gi);
        }
    }
    let false_negatives = gt_taken.iter().filter(|&&t| !t).count();
    MatchOutcome {
        det_matches,
        false_negatives,
    }
}

fn classes_with_gt(samples: &[ImageSample]) -> BTreeSet<usize> {
    samples
        .iter()
        .flat_map(|s| s.gts.iter().map(|g| g.category))
        .collect()
}

/// 101-point interpolated AP for one class at one threshold.
fn class_ap(samples: &[ImageSample], class: usize, iou_thr: f64) -> f64 {
    let mut flags: Vec<(f64, bool)> = Vec::new(); // (score, is_tp)
    let mut total_gts = 0usize;
    for sample in samples {
        total_gts += sample.gts.iter().filter(|g| g.category == class).count();
        let outcome = match_detections(&sample.dets, &sample.gts, iou_thr);
        for (det, matched) in sample.dets.iter().zip(&outcome.det_matches) {
            if det.category == class {
                flags.push((det.score, matched.is_some()));
            }
        }
    }
    if total_gts == 0 {
        return 0.0;
    }
    flags.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));

    let mut precisions = Vec::with_capacity(flags.len());
    let mut recalls = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    let mut fp = 0usize;
    for &(_, is_tp) in &flags {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precisions.push(tp as f64 / (tp + fp) as f64);
        recalls.push(tp as f64 / total_gts as f64);
    }
    // monotone precision envelope from the right
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        if precisions[i] < precisions[i + 1] {
            precisions[i] = precisions[i + 1];
        }
    }
    // sample the envelope at 101 evenly spaced recall points
    let mut total = 0.0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        let idx = recalls.partition_point(|&rc| rc < r);
        if idx < precisions.len() {
            total += precisions[idx];
        }
    }
    total / 101.0
}

/// AP at a single IoU threshold, averaged over classes with ground truth.
pub fn average_precision(samples: &[ImageSample], iou_thr: f64) -> f64 {
    let classes = classes_with_gt(samples);
    if classes.is_empty() {
        return 0.0;
    }
    let sum: f64 = classes.iter().map(|&c| class_ap(samples, c, iou_thr)).sum();
    sum / classes.len() as f64
}

fn top_dets_per_image(sample: &ImageSample, max_dets: usize) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..sample.dets.len()).collect();
    order.sort_by(|&a, &b| {
        sample.dets[b]
            .score
            .partial_cmp(&sample.dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
        .into_iter()
        .take(max_dets)
        .map(|i| sample.dets[i].clone())
        .collect()
}

/// Recall averaged over classes and IoU thresholds, with at most `max_dets`
/// detections per image (over all classes).
pub fn average_recall(samples: &[ImageSample], iou_thrs: &[f64], max_dets: usize) -> f64 {
    let classes = classes_with_gt(samples);
    if classes.is_empty() || iou_thrs.is_empty() {
        return 0.0;
    }
    let capped: Vec<ImageSample> = samples
        .iter()
        .map(|s| ImageSample {
            dets: top_dets_per_image(s, max_dets),
            gts: s.gts.clone(),
        })
        .collect();

    let mut total = 0.0;
    for &class in &classes {
        for &thr in iou_thrs {
            let mut matched = 0usize;
            let mut gts = 0usize;
            for sample in &capped {
                let outcome = match_detections(&sample.dets, &sample.gts, thr);
                for (det, m) in sample.dets.iter().zip(&outcome.det_matches) {
                    if det.category == class && m.is_some() {
                        matched += 1;
                    }
                }
                gts += sample.gts.iter().filter(|g| g.category == class).count();
            }
            if gts > 0 {
                total += matched as f64 / gts as f64;
            }
        }
    }
    total / (classes.len() * iou_thrs.len()) as f64
}

/// Number of false-positive detections that overlap an already-matched
/// same-class ground truth beyond the threshold.
pub fn duplicate_count(dets: &[Detection], gts: &[GroundTruth], iou_thr: f64) -> usize {
    let outcome = match_detections(dets, gts, iou_thr);
    let matched: Vec<bool> = {
        let mut m = vec![false; gts.len()];
        for mi in outcome.det_matches.iter().flatten() {
            m[*mi] = true;
        }
        m
    };
    dets.iter()
        .zip(&outcome.det_matches)
        .filter(|(det, m)| {
            m.is_none()
                && gts.iter().enumerate().any(|(gi, gt)| {
                    matched[gi] && gt.category == det.category && iou(&det.bbox, &gt.bbox) > iou_thr
                })
        })
        .count()
}

/// Per-class mAP entry.
#[derive(Clone, Debug)]
pub struct ClassAp {
    pub category: usize,
    pub ap: f64,
}

/// Summary of a full COCO-protocol evaluation.
#[derive(Clone, Debug)]
pub struct EvalResult {
    /// Mean AP over IoU 0.50:0.05:0.95.
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Mean recall over the same thresholds, max 100 detections per image.
    pub ar: f64,
    pub per_class: Vec<ClassAp>,
    /// Duplicate false positives at IoU 0.5, summed over images.
    pub duplicates: usize,
}

pub const EVAL_MAX_DETS: usize = 100;

pub fn evaluate(samples: &[ImageSample]) -> EvalResult {
    let thrs = iou_thresholds();
    let classes = classes_with_gt(samples);

    let mut per_class = Vec::new();
    for &c in &classes {
        let ap: f64 = thrs.iter().map(|&t| class_ap(samples, c, t)).sum::<f64>() / thrs.len() as f64;
        per_class.push(ClassAp { category: c, ap });
    }
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64
    };
    let duplicates = samples
        .iter()
        .map(|s| duplicate_count(&s.dets, &s.gts, 0.5))
        .sum();

    EvalResult {
        map,
        ap50: average_precision(samples, 0.5),
        ap75: average_precision(samples, 0.75),
        ar: average_recall(samples, &thrs, EVAL_MAX_DETS),
        per_class,
        duplicates,
    }
}

impl EvalResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("mAP,{:.6}\n", self.map));
        out.push_str(&format!("AP50,{:.6}\n", self.ap50));
        out.push_str(&format!("AP75,{:.6}\n", self.ap75));
        out.push_str(&format!("AR,{:.6}\n", self.ar));
        out.push_str(&format!("duplicates,{}\n", self.duplicates));
        for c in &self.per_class {
            out.push_str(&format!("AP_class_{},{:.6}\n", c.category, c.ap));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>8}\n",
            "metric", "value"
        ));
        out.push_str(&format!("{:<12} {:>8.4}\n", "mAP", self.map));
        out.push_str(&format!("{:<12} {:>8.4}\n", "AP50", self.ap50));
        out.push_str(&format!("{:<12} {:>8.4}\n", "AP75", self.ap75));
        out.push_str(&format!("{:<12} {:>8.4}\n", "AR", self.ar));
        out.push_str(&format!("{:<12} {:>8}\n", "duplicates", self.duplicates));
        out
    }
}
