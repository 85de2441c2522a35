//! Implementations of the six subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use detlab_core::assign::{apply_rule, Rule, RuleParams};
use detlab_core::coco::{self, Dataset, DetectionRecord};
use detlab_core::dump;
use detlab_core::geometry::{Detection, Prediction};
use detlab_core::losses::LossParams;
use detlab_core::metrics::{evaluate, ImageSample};
use detlab_core::nms::{apply_nms, nms_study, study_csv, NmsConfig, SpatialRange};
use detlab_core::pyramid::{hard_max_filter, max_filter_3d, FeaturePyramid, FilterParams, Grid};
use detlab_core::quality::QualityParams;
use detlab_core::refine::{finite_diff_check, forward_diagnostics, RefineWeights};
use detlab_core::sim::{
    run_study, simulate_images, OracleConfig, PyramidSpec, SceneConfig,
};

use crate::config::{resolve, to_flat, FileConfig};
use crate::{
    AssignArgs, CliError, EvalArgs, FilterArgs, GradcheckArgs, NmsStudyArgs, SceneFlags,
    SimulateArgs,
};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn load_config(path: &Option<PathBuf>) -> Result<FileConfig, CliError> {
    match path {
        Some(p) => FileConfig::load(p),
        None => Ok(FileConfig::default()),
    }
}

fn ensure_out_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    let bytes = read_bytes(path)?;
    let raw: coco::CocoDataset = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    Ok(coco::ingest(&raw)?)
}

fn load_records(path: &Path) -> Result<Vec<DetectionRecord>, CliError> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

fn resolve_quality(
    alpha: Option<f64>,
    prior: Option<String>,
    fusion: Option<String>,
    radius: Option<f64>,
    file: &FileConfig,
) -> Result<QualityParams, CliError> {
    let defaults = QualityParams::default();
    let alpha = resolve(alpha, file, "alpha", defaults.alpha)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CliError::validation(format!(
            "alpha must be in [0, 1], got {alpha}"
        )));
    }
    let prior = resolve(prior, file, "prior", defaults.prior.as_str().to_string())?
        .parse()
        .map_err(CliError::from)?;
    let fusion = resolve(fusion, file, "fusion", defaults.fusion.as_str().to_string())?
        .parse()
        .map_err(CliError::from)?;
    let radius = resolve(radius, file, "radius", defaults.radius)?;
    if radius <= 0.0 {
        return Err(CliError::validation("radius must be positive"));
    }
    Ok(QualityParams {
        alpha,
        prior,
        fusion,
        radius,
    })
}

fn resolve_nms(
    iou_threshold: Option<f64>,
    across_scales: Option<bool>,
    spatial_range: Option<String>,
    score_floor: Option<f64>,
    file: &FileConfig,
) -> Result<NmsConfig, CliError> {
    let defaults = NmsConfig::default();
    let iou_threshold = resolve(iou_threshold, file, "iou_threshold", defaults.iou_threshold)?;
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(CliError::validation(format!(
            "iou_threshold must be in (0, 1], got {iou_threshold}"
        )));
    }
    let across_scales = resolve(across_scales, file, "across_scales", defaults.across_scales)?;
    let spatial_range: SpatialRange =
        resolve(spatial_range, file, "spatial_range", "inf".to_string())?
            .parse()
            .map_err(CliError::from)?;
    let score_floor = resolve(score_floor, file, "score_floor", defaults.score_floor)?;
    Ok(NmsConfig {
        iou_threshold,
        across_scales,
        spatial_range,
        score_floor,
    })
}

struct SimSettings {
    scene: SceneConfig,
    oracle: OracleConfig,
    images: usize,
}

fn resolve_sim(
    flags: &SceneFlags,
    file: &FileConfig,
    default_spread: usize,
) -> Result<SimSettings, CliError> {
    let sd = SceneConfig::default();
    let od = OracleConfig::default();
    let image_size = resolve(flags.image_size, file, "image_size", sd.image_width)?;
    if image_size < 32.0 {
        return Err(CliError::validation("image_size must be at least 32"));
    }
    let scene = SceneConfig {
        image_width: image_size,
        image_height: image_size,
        min_instances: resolve(flags.min_instances, file, "min_instances", sd.min_instances)?,
        max_instances: resolve(flags.max_instances, file, "max_instances", sd.max_instances)?,
        size_range: (
            resolve(flags.size_min, file, "size_min", sd.size_range.0)?,
            resolve(flags.size_max, file, "size_max", sd.size_range.1)?,
        ),
        crowding: resolve(flags.crowding, file, "crowding", sd.crowding)?,
        num_classes: resolve(flags.classes, file, "classes", sd.num_classes)?,
        seed: resolve(flags.seed, file, "seed", sd.seed)?,
    };
    if scene.min_instances > scene.max_instances {
        return Err(CliError::validation("min_instances exceeds max_instances"));
    }
    if scene.num_classes == 0 {
        return Err(CliError::validation("classes must be at least 1"));
    }
    if !(scene.size_range.0 > 0.0 && scene.size_range.0 < scene.size_range.1) {
        return Err(CliError::validation("size range must satisfy 0 < min < max"));
    }
    if !(0.0..1.0).contains(&scene.crowding) {
        return Err(CliError::validation("crowding must be in [0, 1)"));
    }

    let oracle = OracleConfig {
        duplicates: resolve(flags.duplicates, file, "duplicates", od.duplicates)?,
        score_decay: resolve(flags.score_decay, file, "score_decay", od.score_decay)?,
        box_jitter: resolve(flags.box_jitter, file, "box_jitter", od.box_jitter)?,
        cross_level_leak: resolve(
            flags.cross_level_leak,
            file,
            "cross_level_leak",
            od.cross_level_leak,
        )?,
        loc_noise: resolve(flags.loc_noise, file, "loc_noise", od.loc_noise)?,
        score_jitter: resolve(flags.score_jitter, file, "score_jitter", od.score_jitter)?,
        spread: resolve(flags.spread, file, "spread", default_spread)?,
        seed: scene.seed,
    };
    if oracle.duplicates == 0 {
        return Err(CliError::validation("duplicates must be at least 1"));
    }
    if !(oracle.score_decay > 0.0 && oracle.score_decay <= 1.0) {
        return Err(CliError::validation("score_decay must be in (0, 1]"));
    }
    if oracle.spread % 2 == 0 {
        return Err(CliError::validation("spread must be odd"));
    }
    if !(0.0..=1.0).contains(&oracle.cross_level_leak) {
        return Err(CliError::validation("cross_level_leak must be in [0, 1]"));
    }

    let images = resolve(flags.images, file, "images", 50usize)?;
    Ok(SimSettings {
        scene,
        oracle,
        images,
    })
}

/// Places a detection record on the pyramid: explicit level/cell if present,
/// otherwise the center-rule projection of its box.
fn place_record(
    record: &DetectionRecord,
    spec: &PyramidSpec,
) -> (usize, (usize, usize)) {
    match (record.level, record.cell) {
        (Some(level), Some(cell)) => (level.min(spec.strides.len() - 1), cell),
        _ => {
            let [x, y, w, h] = record.bbox;
            let gt = detlab_core::GroundTruth {
                category: 0,
                bbox: detlab_core::BBox::from_xywh(x, y, w.max(0.0), h.max(0.0)),
                id: 0,
            };
            let (level, row, col) = spec.center_cell(&gt);
            (level, (row, col))
        }
    }
}

/// Groups detection records per dataset image, in file order.
fn records_per_image<'a>(
    records: &'a [DetectionRecord],
    dataset: &Dataset,
) -> Result<BTreeMap<i64, Vec<&'a DetectionRecord>>, CliError> {
    let mut by_image: BTreeMap<i64, Vec<&DetectionRecord>> = BTreeMap::new();
    for im in &dataset.images {
        by_image.insert(im.id, Vec::new());
    }
    for r in records {
        by_image
            .get_mut(&r.image_id)
            .ok_or_else(|| {
                CliError::validation(format!("detection references unknown image {}", r.image_id))
            })?
            .push(r);
    }
    Ok(by_image)
}

fn record_to_prediction(
    record: &DetectionRecord,
    dataset: &Dataset,
    spec: &PyramidSpec,
) -> Result<Prediction, CliError> {
    let category = dataset.category_index(record.category_id).ok_or_else(|| {
        CliError::validation(format!(
            "detection references unknown category {}",
            record.category_id
        ))
    })?;
    if !(0.0..=1.0).contains(&record.score) {
        return Err(CliError::validation(format!(
            "score {} outside [0, 1]",
            record.score
        )));
    }
    let (level, cell) = place_record(record, spec);
    let [x, y, w, h] = record.bbox;
    if w < 0.0 || h < 0.0 {
        return Err(CliError::validation("detection bbox has negative size"));
    }
    let mut scores = vec![0.0; dataset.num_classes()];
    scores[category] = record.score;
    Ok(Prediction {
        scores,
        bbox: detlab_core::BBox::from_xywh(x, y, w, h),
        level,
        cell,
        anchor: Some(spec.anchor(level, cell)),
    })
}

#[derive(Serialize)]
struct PairDump {
    gt_id: i64,
    pred_index: usize,
}

#[derive(Serialize)]
struct ImageAssignmentDump {
    image_id: i64,
    foreground: usize,
    pairs: Vec<PairDump>,
    unmatched_gt_ids: Vec<i64>,
}

#[derive(Serialize)]
struct AssignmentDump {
    rule: String,
    images: Vec<ImageAssignmentDump>,
}

pub fn cmd_assign(args: AssignArgs) -> Result<(), CliError> {
    let file = load_config(&args.config)?;
    let rule: Rule = args.rule.parse().map_err(CliError::from)?;
    let dataset = load_dataset(&args.annotations)?;
    let records = load_records(&args.predictions)?;
    if records.is_empty() {
        eprintln!(
            "warning: {} holds no predictions; every ground truth stays unmatched",
            args.predictions.display()
        );
    }

    let quality = resolve_quality(args.alpha, args.prior, args.fusion, args.radius, &file)?;
    let loss_defaults = LossParams::default();
    let loss = LossParams {
        focal_gamma: resolve(args.gamma, &file, "gamma", loss_defaults.focal_gamma)?,
        focal_alpha: resolve(args.focal_alpha, &file, "focal_alpha", loss_defaults.focal_alpha)?,
        regression_weight: resolve(
            args.regression_weight,
            &file,
            "regression_weight",
            loss_defaults.regression_weight,
        )?,
    };
    let params = RuleParams {
        quality,
        loss,
        top_k: resolve(args.topk, &file, "topk", 9usize)?,
        ..RuleParams::default()
    };

    let by_image = records_per_image(&records, &dataset)?;
    let mut dump_images = Vec::new();
    let mut total_fg = 0usize;
    let mut total_unmatched = 0usize;
    for im in &dataset.images {
        let spec = PyramidSpec::standard(im.width, im.height, dataset.num_classes());
        let preds: Vec<Prediction> = by_image[&im.id]
            .iter()
            .map(|r| record_to_prediction(r, &dataset, &spec))
            .collect::<Result<_, _>>()?;
        let targets = apply_rule(rule, &im.gts, &preds, &params)?;
        let pairs: Vec<PairDump> = targets
            .foreground_pairs()
            .into_iter()
            .map(|(gi, pj)| PairDump {
                gt_id: im.gts[gi].id,
                pred_index: pj,
            })
            .collect();
        total_fg += pairs.len();
        total_unmatched += targets.unmatched_gts.len();
        dump_images.push(ImageAssignmentDump {
            image_id: im.id,
            foreground: pairs.len(),
            pairs,
            unmatched_gt_ids: targets
                .unmatched_gts
                .iter()
                .map(|&gi| im.gts[gi].id)
                .collect(),
        });
    }

    ensure_out_dir(&args.out)?;
    let dump = AssignmentDump {
        rule: rule.as_str().to_string(),
        images: dump_images,
    };
    let json = serde_json::to_string_pretty(&dump)
        .map_err(|e| CliError::validation(e.to_string()))?;
    write_file(&args.out.join("assignments.json"), json.as_bytes())?;

    println!(
        "rule {}: {} foreground samples, {} unmatched ground truths over {} images",
        rule,
        total_fg,
        total_unmatched,
        dataset.images.len()
    );
    println!("wrote {}", args.out.join("assignments.json").display());
    Ok(())
}

fn records_to_samples(
    records: &[DetectionRecord],
    dataset: &Dataset,
) -> Result<Vec<ImageSample>, CliError> {
    let by_image = records_per_image(records, dataset)?;
    dataset
        .images
        .iter()
        .map(|im| {
            let spec = PyramidSpec::standard(im.width, im.height, dataset.num_classes());
            let dets: Vec<Detection> = by_image[&im.id]
                .iter()
                .map(|r| {
                    let category = dataset.category_index(r.category_id).ok_or_else(|| {
                        CliError::validation(format!(
                            "detection references unknown category {}",
                            r.category_id
                        ))
                    })?;
                    let (level, cell) = place_record(r, &spec);
                    let [x, y, w, h] = r.bbox;
                    if w < 0.0 || h < 0.0 {
                        return Err(CliError::validation("detection bbox has negative size"));
                    }
                    Ok(Detection {
                        bbox: detlab_core::BBox::from_xywh(x, y, w, h),
                        score: r.score,
                        category,
                        level,
                        cell,
                    })
                })
                .collect::<Result<_, _>>()?;
            Ok(ImageSample {
                dets,
                gts: im.gts.clone(),
            })
        })
        .collect()
}

pub fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let file = load_config(&args.config)?;
    let dataset = load_dataset(&args.annotations)?;
    let records = load_records(&args.detections)?;
    let mut samples = records_to_samples(&records, &dataset)?;

    if args.nms {
        let cfg = resolve_nms(
            args.iou_threshold,
            args.across_scales,
            args.spatial_range,
            args.score_floor,
            &file,
        )?;
        samples = apply_nms(&samples, &cfg);
        println!("applied nms: {}", cfg.id());
    }

    let result = evaluate(&samples);
    ensure_out_dir(&args.out)?;
    write_file(&args.out.join("eval.csv"), result.to_csv().as_bytes())?;
    print!("{}", result.to_table());
    println!("wrote {}", args.out.join("eval.csv").display());
    Ok(())
}

pub fn cmd_filter(args: FilterArgs) -> Result<(), CliError> {
    let file = load_config(&args.config)?;
    let tau = resolve(args.tau, &file, "tau", FilterParams::default().tau)?;
    let phi = resolve(args.phi, &file, "phi", FilterParams::default().phi)?;
    let params = FilterParams::new(tau, phi).map_err(CliError::from)?;

    let bytes = read_bytes(&args.input)?;
    let pyramid = dump::read_pyramid(&bytes).map_err(CliError::from)?;

    let filtered = match args.mode.as_str() {
        "soft" => max_filter_3d(&pyramid, &params),
        "hard" => hard_max_filter(&pyramid, &params),
        other => {
            return Err(CliError::validation(format!(
                "mode must be `soft` or `hard`, got `{other}`"
            )))
        }
    };

    ensure_out_dir(&args.out)?;
    let out_path = args.out.join("filtered.dfp");
    write_file(&out_path, &dump::write_pyramid(&filtered))?;
    dump::save_heatmaps(&args.out, "input", &pyramid).map_err(CliError::from)?;
    dump::save_heatmaps(&args.out, "filtered", &filtered).map_err(CliError::from)?;
    println!(
        "filtered {} levels (tau={tau}, phi={phi}, mode={}), wrote {}",
        pyramid.len(),
        args.mode,
        out_path.display()
    );
    Ok(())
}

fn parse_rules(text: &str) -> Result<Vec<Rule>, CliError> {
    text.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<Rule>().map_err(CliError::from))
        .collect()
}

/// Exports generated scenes in the COCO annotation format.
fn scenes_to_coco(
    scenes: &[Vec<detlab_core::GroundTruth>],
    scene_cfg: &SceneConfig,
) -> coco::CocoDataset {
    let images = (0..scenes.len())
        .map(|i| coco::CocoImage {
            id: i as i64 + 1,
            width: scene_cfg.image_width,
            height: scene_cfg.image_height,
        })
        .collect();
    let mut annotations = Vec::new();
    for (i, gts) in scenes.iter().enumerate() {
        for gt in gts {
            let [x, y, w, h] = gt.bbox.to_xywh();
            annotations.push(coco::CocoAnnotation {
                id: gt.id,
                image_id: i as i64 + 1,
                category_id: gt.category as i64 + 1,
                bbox: [x, y, w, h],
            });
        }
    }
    let categories = (0..scene_cfg.num_classes)
        .map(|c| coco::CocoCategory {
            id: c as i64 + 1,
            name: format!("class_{c}"),
        })
        .collect();
    coco::CocoDataset {
        images,
        annotations,
        categories,
    }
}

pub fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let file = load_config(&args.config)?;
    let sim = resolve_sim(&args.scene, &file, OracleConfig::default().spread)?;
    let rules = parse_rules(&resolve(
        args.rules.clone(),
        &file,
        "rules",
        "poto,fcos".to_string(),
    )?)?;
    if rules.is_empty() {
        return Err(CliError::validation("no rules selected"));
    }
    let quality = resolve_quality(args.alpha, args.prior, args.fusion, args.radius, &file)?;
    let nms_cfg = resolve_nms(args.iou_threshold, None, None, None, &file)?;
    let rule_params = RuleParams {
        quality,
        top_k: resolve(args.topk, &file, "topk", 9usize)?,
        ..RuleParams::default()
    };

    let report = run_study(
        &sim.scene,
        &sim.oracle,
        sim.images,
        &rules,
        &[nms_cfg],
        &rule_params,
    )
    .map_err(CliError::from)?;

    ensure_out_dir(&args.out)?;
    write_file(&args.out.join("study.csv"), report.to_csv().as_bytes())?;
    write_file(&args.out.join("summary.txt"), report.summary().as_bytes())?;

    // score heatmaps of the first simulated image, raw and hard-filtered
    let spec = PyramidSpec::standard(
        sim.scene.image_width,
        sim.scene.image_height,
        sim.scene.num_classes,
    );
    let first = simulate_images(&sim.scene, &sim.oracle, &spec, 1);
    if let Some((_, _, pyramid)) = first.first() {
        dump::save_heatmaps(&args.out, "scores", pyramid).map_err(CliError::from)?;
        let hard = hard_max_filter(pyramid, &FilterParams::default());
        dump::save_heatmaps(&args.out, "scores_hard", &hard).map_err(CliError::from)?;
    }

    // scenes in COCO form plus the resolved run configuration
    let scenes = detlab_core::sim::gen_scenes(&sim.scene, sim.images);
    let coco_json = serde_json::to_string_pretty(&scenes_to_coco(&scenes, &sim.scene))
        .map_err(|e| CliError::validation(e.to_string()))?;
    write_file(&args.out.join("scenes.json"), coco_json.as_bytes())?;

    let rules_text = rules
        .iter()
        .map(|r| r.as_str())
        .collect::<Vec<_>>()
        .join(",");
    let flat = to_flat(&[
        ("seed", sim.scene.seed.to_string()),
        ("images", sim.images.to_string()),
        ("image_size", sim.scene.image_width.to_string()),
        ("min_instances", sim.scene.min_instances.to_string()),
        ("max_instances", sim.scene.max_instances.to_string()),
        ("size_min", sim.scene.size_range.0.to_string()),
        ("size_max", sim.scene.size_range.1.to_string()),
        ("crowding", sim.scene.crowding.to_string()),
        ("classes", sim.scene.num_classes.to_string()),
        ("duplicates", sim.oracle.duplicates.to_string()),
        ("score_decay", sim.oracle.score_decay.to_string()),
        ("box_jitter", sim.oracle.box_jitter.to_string()),
        ("cross_level_leak", sim.oracle.cross_level_leak.to_string()),
        ("loc_noise", sim.oracle.loc_noise.to_string()),
        ("score_jitter", sim.oracle.score_jitter.to_string()),
        ("spread", sim.oracle.spread.to_string()),
        ("rules", rules_text),
        ("iou_threshold", nms_cfg.iou_threshold.to_string()),
        ("alpha", rule_params.quality.alpha.to_string()),
        ("prior", rule_params.quality.prior.as_str().to_string()),
        ("fusion", rule_params.quality.fusion.as_str().to_string()),
        ("radius", rule_params.quality.radius.to_string()),
        ("topk", rule_params.top_k.to_string()),
    ]);
    write_file(&args.out.join("run_config.txt"), flat.as_bytes())?;

    print!("{}", report.summary());
    println!("wrote study.csv, summary.txt, scenes.json, heatmaps to {}", args.out.display());
    Ok(())
}

pub fn cmd_nms_study(args: NmsStudyArgs) -> Result<(), CliError> {
    let file = load_config(&args.config)?;
    // wider duplicate spread by default so finite windows bite
    let sim = resolve_sim(&args.scene, &file, 5)?;
    let iou = resolve(args.iou_threshold, &file, "iou_threshold", 0.6)?;

    let spec = PyramidSpec::standard(
        sim.scene.image_width,
        sim.scene.image_height,
        sim.scene.num_classes,
    );
    let images = simulate_images(&sim.scene, &sim.oracle, &spec, sim.images);
    let samples: Vec<ImageSample> = images
        .iter()
        .map(|(gts, preds, _)| ImageSample {
            dets: preds.iter().map(detlab_core::sim::to_detection).collect(),
            gts: gts.clone(),
        })
        .collect();

    let base = NmsConfig {
        iou_threshold: iou,
        ..NmsConfig::default()
    };
    let configs = vec![
        NmsConfig {
            across_scales: true,
            spatial_range: SpatialRange::Infinite,
            ..base
        },
        NmsConfig {
            across_scales: false,
            spatial_range: SpatialRange::Infinite,
            ..base
        },
        NmsConfig {
            across_scales: false,
            spatial_range: SpatialRange::Window(5),
            ..base
        },
        NmsConfig {
            across_scales: false,
            spatial_range: SpatialRange::Window(3),
            ..base
        },
        NmsConfig {
            across_scales: false,
            spatial_range: SpatialRange::Window(1),
            ..base
        },
    ];
    let rows = nms_study(&samples, &configs);
    let csv = study_csv(&rows);

    ensure_out_dir(&args.out)?;
    write_file(&args.out.join("nms_study.csv"), csv.as_bytes())?;
    print!("{csv}");
    println!("wrote {}", args.out.join("nms_study.csv").display());
    Ok(())
}

pub fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let file = load_config(&args.config)?;
    let seed = resolve(args.seed, &file, "seed", 7u64)?;
    let trials = resolve(args.trials, &file, "trials", 3usize)?;
    let levels = resolve(args.levels, &file, "levels", 2usize)?;
    let channels = resolve(args.channels, &file, "channels", 2usize)?;
    let height = resolve(args.height, &file, "height", 6usize)?;
    let width = resolve(args.width, &file, "width", 5usize)?;
    let tau = resolve(args.tau, &file, "tau", 2usize)?;
    let phi = resolve(args.phi, &file, "phi", 3usize)?;
    let groups = resolve(
        args.groups,
        &file,
        "groups",
        detlab_core::refine::default_groups(channels),
    )?;
    let step = resolve(args.step, &file, "step", 1e-3)?;
    if levels == 0 || height == 0 || width == 0 {
        return Err(CliError::validation("sizes must be positive"));
    }
    let filter = FilterParams::new(tau, phi).map_err(CliError::from)?;

    let mut failed = 0usize;
    let mut skipped = 0usize;
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64 + 1);

        let mut grids = Vec::new();
        let mut strides = Vec::new();
        for l in 0..levels {
            let h = (height >> l).max(1);
            let w = (width >> l).max(1);
            let vals: Vec<f64> = (0..channels * h * w)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            grids.push(Grid::new(channels, h, w, vals).map_err(CliError::from)?);
            strides.push(8.0 * (1u64 << l) as f64);
        }
        let pyramid = FeaturePyramid::new(grids, strides).map_err(CliError::from)?;
        let weights = RefineWeights::seeded(channels, groups, filter, seed ^ (trial as u64 + 101))
            .map_err(CliError::from)?;
        let mut upstream = pyramid.zeros_like();
        for s in 0..upstream.len() {
            for v in upstream.level_mut(s).values_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }

        let (_, gap) = forward_diagnostics(&pyramid, &weights).map_err(CliError::from)?;
        // a single +-step probe shifts any tube value by well under step/2,
        // so a gap of a few steps cannot flip an argmax
        if gap < 5.0 * step {
            skipped += 1;
            println!("trial {trial}: tie-adversarial input (max-filter gap {gap:.2e}), skipped");
            continue;
        }
        let report =
            finite_diff_check(&pyramid, &weights, &upstream, step).map_err(CliError::from)?;
        let err = report.max_rel_err();
        worst = worst.max(err);
        let verdict = if err < GRADCHECK_TOLERANCE { "ok" } else { "FAIL" };
        if err >= GRADCHECK_TOLERANCE {
            failed += 1;
        }
        println!(
            "trial {trial}: {} coords, max rel err features {:.3e}, weights {:.3e} -> {verdict}",
            report.coords_checked, report.max_rel_err_features, report.max_rel_err_weights
        );
    }

    println!(
        "gradcheck: {} trials, {} skipped, {} failed, max relative error {:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})",
        trials, skipped, failed, worst
    );
    if failed > 0 {
        return Err(CliError::validation(format!(
            "{failed} gradcheck trial(s) exceeded tolerance"
        )));
    }
    println!("PASS");
    Ok(())
}
