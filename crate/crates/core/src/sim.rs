//! Seeded synthetic scenes and a duplicate-emitting oracle predictor.
//!
//! The oracle plants one near-perfect prediction per instance at its
//! center-rule cell and `k - 1` decayed copies in the surrounding cells and
//! adjacent levels, which is exactly the failure mode duplicate-removal
//! machinery exists for. Everything is driven by ChaCha8 streams so a seed
//! reproduces a run bit for bit, across thread counts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::assign::{apply_rule, Rule, RuleParams, Target};
use crate::error::Result;
use crate::geometry::{BBox, Detection, GroundTruth, Prediction};
use crate::metrics::{evaluate, ImageSample};
use crate::nms::{apply_nms, NmsConfig};
use crate::pyramid::{hard_max_filter, FeaturePyramid, FilterParams, Grid};

#[derive(Clone, Debug)]
pub struct SceneConfig {
    pub image_width: f64,
    pub image_height: f64,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Instance sizes are log-uniform over this range, spanning the level
    /// ranges.
    pub size_range: (f64, f64),
    /// Target pairwise IoU for chained placement; 0 disables crowding.
    pub crowding: f64,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_width: 512.0,
            image_height: 512.0,
            min_instances: 2,
            max_instances: 6,
            size_range: (24.0, 256.0),
            crowding: 0.0,
            num_classes: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OracleConfig {
    /// Predictions emitted per ground truth, k >= 1.
    pub duplicates: usize,
    /// Geometric score decay per duplicate, in (0, 1].
    pub score_decay: f64,
    /// Duplicate box jitter as a fraction of the box size.
    pub box_jitter: f64,
    /// Probability that a duplicate lands on an adjacent level.
    pub cross_level_leak: f64,
    /// Localization noise on the top box, fraction of the box size.
    pub loc_noise: f64,
    /// Spread of per-instance base scores below 1.0.
    pub score_jitter: f64,
    /// Odd cell window for duplicate placement around the top cell.
    pub spread: usize,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            duplicates: 3,
            score_decay: 0.85,
            box_jitter: 0.04,
            cross_level_leak: 0.25,
            loc_noise: 0.0,
            score_jitter: 0.5,
            spread: 3,
            seed: 0,
        }
    }
}

/// Grid geometry shared by the oracle and the pyramid consumers.
#[derive(Clone, Debug)]
pub struct PyramidSpec {
    pub width: f64,
    pub height: f64,
    pub strides: Vec<f64>,
    pub level_ranges: Vec<(f64, f64)>,
    pub num_classes: usize,
}

impl PyramidSpec {
    pub fn standard(width: f64, height: f64, num_classes: usize) -> Self {
        PyramidSpec {
            width,
            height,
            strides: crate::assign::default_strides(),
            level_ranges: crate::assign::default_level_ranges(),
            num_classes,
        }
    }

    pub fn grid_size(&self, level: usize) -> (usize, usize) {
        let s = self.strides[level];
        (
            (self.height / s).ceil().max(1.0) as usize,
            (self.width / s).ceil().max(1.0) as usize,
        )
    }

    /// Center-rule placement: scale level by `(lo, hi]` range lookup, then
    /// the grid cell nearest the instance center.
    pub fn center_cell(&self, gt: &GroundTruth) -> (usize, usize, usize) {
        let scale = gt.bbox.width().max(gt.bbox.height());
        let level = self
            .level_ranges
            .iter()
            .position(|&(lo, hi)| scale > lo && scale <= hi)
            .unwrap_or(self.level_ranges.len() - 1)
            .min(self.strides.len() - 1);
        let (rows, cols) = self.grid_size(level);
        let s = self.strides[level];
        let (cx, cy) = gt.bbox.center();
        let row = ((cy / s - 0.5).round().max(0.0) as usize).min(rows - 1);
        let col = ((cx / s - 0.5).round().max(0.0) as usize).min(cols - 1);
        (level, row, col)
    }

    /// Canonical anchor of a cell: a square of side `8 * stride` centered on
    /// the cell center.
    pub fn anchor(&self, level: usize, cell: (usize, usize)) -> BBox {
        let s = self.strides[level];
        let cx = (cell.1 as f64 + 0.5) * s;
        let cy = (cell.0 as f64 + 0.5) * s;
        let half = 4.0 * s;
        BBox::new(cx - half, cy - half, cx + half, cy + half)
    }
}

fn sample_box(
    rng: &mut ChaCha8Rng,
    cfg: &SceneConfig,
    previous: &[GroundTruth],
) -> BBox {
    let (lo, hi) = cfg.size_range;
    let size = (rng.random_range(lo.ln()..hi.ln())).exp();
    let aspect = rng.random_range(-0.3f64..0.3).exp();
    let w = (size * aspect).min(cfg.image_width - 2.0);
    let h = (size / aspect).min(cfg.image_height - 2.0);

    if cfg.crowding > 0.0 && !previous.is_empty() {
        // chain placement: same-size box shifted so the pair IoU is close to
        // the crowding target (exact for an axis shift of equal boxes)
        let anchor = &previous[rng.random_range(0..previous.len())];
        let t = cfg.crowding.clamp(0.05, 0.95);
        let along_x = rng.random_bool(0.5);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let jitter = 1.0 + rng.random_range(-0.05f64..0.05);
        let (dx, dy) = if along_x {
            (sign * anchor.bbox.width() * (1.0 - t) / (1.0 + t) * jitter, 0.0)
        } else {
            (0.0, sign * anchor.bbox.height() * (1.0 - t) / (1.0 + t) * jitter)
        };
        let shifted = anchor.bbox.translate(dx, dy);
        return clamp_box(&shifted, cfg.image_width, cfg.image_height);
    }

    let cx = rng.random_range(w / 2.0..(cfg.image_width - w / 2.0).max(w / 2.0 + 1e-9));
    let cy = rng.random_range(h / 2.0..(cfg.image_height - h / 2.0).max(h / 2.0 + 1e-9));
    BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

fn clamp_box(b: &BBox, width: f64, height: f64) -> BBox {
    let x1 = b.x1.clamp(0.0, width - 1.0);
    let y1 = b.y1.clamp(0.0, height - 1.0);
    let x2 = b.x2.clamp(x1 + 1.0, width);
    let y2 = b.y2.clamp(y1 + 1.0, height);
    BBox::new(x1, y1, x2, y2)
}

/// Generates `n` deterministic scenes; image `i` draws from stream `i` of the
/// seeded generator, so scenes are independent of iteration order.
pub fn gen_scenes(cfg: &SceneConfig, n: usize) -> Vec<Vec<GroundTruth>> {
    (0..n)
        .into_par_iter()
        .map(|image_idx| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(image_idx as u64 + 1);
            let count = rng.random_range(cfg.min_instances..=cfg.max_instances);
            let mut gts: Vec<GroundTruth> = Vec::with_capacity(count);
            for j in 0..count {
                let bbox = sample_box(&mut rng, cfg, &gts);
                gts.push(GroundTruth {
                    category: rng.random_range(0..cfg.num_classes),
                    bbox,
                    id: image_idx as i64 * 1_000_000 + j as i64,
                });
            }
            gts
        })
        .collect()
}

fn jittered(rng: &mut ChaCha8Rng, b: &BBox, fraction: f64) -> BBox {
    if fraction <= 0.0 {
        return *b;
    }
    let jw = b.width() * fraction;
    let jh = b.height() * fraction;
    let x1 = b.x1 + rng.random_range(-jw..jw);
    let y1 = b.y1 + rng.random_range(-jh..jh);
    let x2 = b.x2 + rng.random_range(-jw..jw);
    let y2 = b.y2 + rng.random_range(-jh..jh);
    BBox::new(x1.min(x2), y1.min(y2), x1.max(x2), y1.max(y2))
}

/// Emits `k` predictions per ground truth (one near-perfect, `k - 1` decayed
/// duplicates nearby and on adjacent levels) and renders the per-level score
/// grids.
pub fn oracle_predict(
    gts: &[GroundTruth],
    spec: &PyramidSpec,
    cfg: &OracleConfig,
) -> (Vec<Prediction>, FeaturePyramid) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut preds = Vec::new();
    let half_spread = (cfg.spread / 2) as isize;

    for gt in gts {
        let (level, row, col) = spec.center_cell(gt);
        let base_score = (1.0 - rng.random_range(0.0..=cfg.score_jitter)).max(0.05);
        let top_box = jittered(&mut rng, &gt.bbox, cfg.loc_noise);
        let mut scores = vec![0.0; spec.num_classes];
        scores[gt.category] = base_score;
        preds.push(Prediction {
            scores,
            bbox: top_box,
            level,
            cell: (row, col),
            anchor: Some(spec.anchor(level, (row, col))),
        });

        for d in 1..cfg.duplicates {
            let score = base_score * cfg.score_decay.powi(d as i32);
            let (dup_level, dup_cell) = if rng.random_bool(cfg.cross_level_leak) {
                // co-located cell on an adjacent level
                let up = rng.random_bool(0.5);
                let l = if up && level + 1 < spec.strides.len() {
                    level + 1
                } else {
                    level.saturating_sub(1)
                };
                let (rows, cols) = spec.grid_size(l);
                let s = spec.strides[l];
                let (cx, cy) = gt.bbox.center();
                let r = ((cy / s - 0.5).round().max(0.0) as usize).min(rows - 1);
                let c = ((cx / s - 0.5).round().max(0.0) as usize).min(cols - 1);
                (l, (r, c))
            } else {
                // neighbouring cell within the spread window, same level
                let (rows, cols) = spec.grid_size(level);
                let mut cell = (row, col);
                for _ in 0..8 {
                    let dr = rng.random_range(-(half_spread as i64)..=half_spread as i64) as isize;
                    let dc = rng.random_range(-(half_spread as i64)..=half_spread as i64) as isize;
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let r = (row as isize + dr).clamp(0, rows as isize - 1) as usize;
                    let c = (col as isize + dc).clamp(0, cols as isize - 1) as usize;
                    if (r, c) != (row, col) {
                        cell = (r, c);
                        break;
                    }
                }
                (level, cell)
            };
            let dup_box = jittered(&mut rng, &gt.bbox, cfg.box_jitter);
            let mut scores = vec![0.0; spec.num_classes];
            scores[gt.category] = score;
            preds.push(Prediction {
                scores,
                bbox: dup_box,
                level: dup_level,
                cell: dup_cell,
                anchor: Some(spec.anchor(dup_level, dup_cell)),
            });
        }
    }

    let pyramid = render_score_pyramid(&preds, spec);
    (preds, pyramid)
}

/// Per-level score grids: each cell/class takes the max score of the
/// predictions sitting there.
pub fn render_score_pyramid(preds: &[Prediction], spec: &PyramidSpec) -> FeaturePyramid {
    let mut grids: Vec<Grid> = (0..spec.strides.len())
        .map(|l| {
            let (rows, cols) = spec.grid_size(l);
            Grid::zeros(spec.num_classes, rows, cols)
        })
        .collect();
    for p in preds {
        let (row, col) = p.cell;
        for (c, &s) in p.scores.iter().enumerate() {
            if s > grids[p.level].get(c, row, col) {
                grids[p.level].set(c, row, col, s);
            }
        }
    }
    FeaturePyramid::new(grids, spec.strides.clone()).expect("spec strides are valid")
}

/// Detection view of a prediction: best class and score.
pub fn to_detection(p: &Prediction) -> Detection {
    let (category, score) = p.top_class();
    Detection {
        bbox: p.bbox,
        score,
        category,
        level: p.level,
        cell: p.cell,
    }
}

/// The detector output a converged model trained under `targets` would keep:
/// foreground predictions for one-to-one rules, everything for one-to-many.
pub fn keep_set(preds: &[Prediction], targets: &crate::assign::TargetSet, one_to_one: bool) -> Vec<Detection> {
    if one_to_one {
        preds
            .iter()
            .zip(&targets.targets)
            .filter(|(_, t)| matches!(t, Target::Foreground(_)))
            .map(|(p, _)| to_detection(p))
            .collect()
    } else {
        preds.iter().map(to_detection).collect()
    }
}

/// Keep-set of the hard max filter used as post-processing: a prediction
/// survives when its score owns the 3D tube max of its class channel.
/// Same-cell score ties keep only the first prediction.
pub fn hard_filter_keep(
    preds: &[Prediction],
    score_pyramid: &FeaturePyramid,
    params: &FilterParams,
) -> Vec<Detection> {
    let filtered = hard_max_filter(score_pyramid, params);
    let mut claimed: Vec<(usize, usize, usize, usize)> = Vec::new();
    let mut kept = Vec::new();
    for p in preds {
        let (category, score) = p.top_class();
        let survivor = filtered.level(p.level).get(category, p.cell.0, p.cell.1);
        if survivor != 0.0 && score == survivor {
            let key = (p.level, category, p.cell.0, p.cell.1);
            if !claimed.contains(&key) {
                claimed.push(key);
                kept.push(to_detection(p));
            }
        }
    }
    kept
}

/// One evaluated (rule, NMS) combination.
#[derive(Clone, Debug)]
pub struct StudyRow {
    pub rule: Rule,
    /// `None` is the raw keep-set without suppression.
    pub nms: Option<NmsConfig>,
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar: f64,
    pub duplicates: usize,
    /// mAP difference against the no-NMS row of the same rule.
    pub delta_map: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct StudyReport {
    pub images: usize,
    pub rows: Vec<StudyRow>,
}

impl StudyReport {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("rule,nms,across_scales,spatial_range,mAP,AP50,AP75,AR,duplicates,delta_mAP\n");
        for r in &self.rows {
            let (nms, across, range) = match &r.nms {
                Some(cfg) => (
                    cfg.id(),
                    cfg.across_scales.to_string(),
                    cfg.spatial_range.to_string(),
                ),
                None => ("none".into(), String::new(), String::new()),
            };
            let delta = r
                .delta_map
                .map(|d| format!("{d:.6}"))
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{}\n",
                r.rule, nms, across, range, r.map, r.ap50, r.ap75, r.ar, r.duplicates, delta
            ));
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = format!("study over {} images\n", self.images);
        out.push_str(&format!(
            "{:<14} {:<30} {:>8} {:>8} {:>10} {:>10}\n",
            "rule", "nms", "mAP", "AR", "duplicates", "delta_mAP"
        ));
        for r in &self.rows {
            let nms = r
                .nms
                .as_ref()
                .map(|c| c.id())
                .unwrap_or_else(|| "none".into());
            let delta = r
                .delta_map
                .map(|d| format!("{d:+.4}"))
                .unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "{:<14} {:<30} {:>8.4} {:>8.4} {:>10} {:>10}\n",
                r.rule.to_string(),
                nms,
                r.map,
                r.ar,
                r.duplicates,
                delta
            ));
        }
        out
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Per-image oracle configuration with a derived seed.
pub fn oracle_for_image(cfg: &OracleConfig, image_idx: usize) -> OracleConfig {
    OracleConfig {
        seed: splitmix64(cfg.seed ^ (image_idx as u64 + 1)),
        ..cfg.clone()
    }
}

/// Simulated scenes and oracle predictions for `n` images.
pub fn simulate_images(
    scene_cfg: &SceneConfig,
    oracle_cfg: &OracleConfig,
    spec: &PyramidSpec,
    n: usize,
) -> Vec<(Vec<GroundTruth>, Vec<Prediction>, FeaturePyramid)> {
    let scenes = gen_scenes(scene_cfg, n);
    scenes
        .into_par_iter()
        .enumerate()
        .map(|(i, gts)| {
            let cfg = oracle_for_image(oracle_cfg, i);
            let (preds, pyramid) = oracle_predict(&gts, spec, &cfg);
            (gts, preds, pyramid)
        })
        .collect()
}

/// Runs every rule against every NMS configuration (plus the raw keep-set)
/// and reports AP/AR with deltas.
pub fn run_study(
    scene_cfg: &SceneConfig,
    oracle_cfg: &OracleConfig,
    n_images: usize,
    rules: &[Rule],
    nms_cfgs: &[NmsConfig],
    rule_params: &RuleParams,
) -> Result<StudyReport> {
    let spec = PyramidSpec::standard(
        scene_cfg.image_width,
        scene_cfg.image_height,
        scene_cfg.num_classes,
    );
    let images = simulate_images(scene_cfg, oracle_cfg, &spec, n_images);

    let mut rows = Vec::new();
    for &rule in rules {
        let samples: Vec<ImageSample> = images
            .par_iter()
            .map(|(gts, preds, _)| {
                let targets = apply_rule(rule, gts, preds, rule_params)?;
                Ok(ImageSample {
                    dets: keep_set(preds, &targets, rule.is_one_to_one()),
                    gts: gts.clone(),
                })
            })
            .collect::<Result<_>>()?;

        let raw = evaluate(&samples);
        let raw_map = raw.map;
        rows.push(StudyRow {
            rule,
            nms: None,
            map: raw.map,
            ap50: raw.ap50,
            ap75: raw.ap75,
            ar: raw.ar,
            duplicates: raw.duplicates,
            delta_map: None,
        });
        for cfg in nms_cfgs {
            let suppressed = apply_nms(&samples, cfg);
            let r = evaluate(&suppressed);
            rows.push(StudyRow {
                rule,
                nms: Some(*cfg),
                map: r.map,
                ap50: r.ap50,
                ap75: r.ap75,
                ar: r.ar,
                duplicates: r.duplicates,
                delta_map: Some(r.map - raw_map),
            });
        }
    }
    Ok(StudyReport {
        images: n_images,
        rows,
    })
}
