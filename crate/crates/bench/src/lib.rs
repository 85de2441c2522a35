//! Seeded fixture builders shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use detlab_core::geometry::{BBox, Detection};
use detlab_core::metrics::ImageSample;
use detlab_core::pyramid::{FeaturePyramid, Grid};
use detlab_core::sim::{simulate_images, to_detection, OracleConfig, PyramidSpec, SceneConfig};
use detlab_core::QualityMatrix;

pub fn random_quality(g: usize, n: usize, seed: u64) -> QualityMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    QualityMatrix::new(g, n, (0..g * n).map(|_| rng.random::<f64>()).collect()).unwrap()
}

pub fn random_pyramid(levels: usize, channels: usize, base: usize, seed: u64) -> FeaturePyramid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grids = Vec::new();
    let mut strides = Vec::new();
    for l in 0..levels {
        let hw = (base >> l).max(1);
        let vals: Vec<f64> = (0..channels * hw * hw).map(|_| rng.random::<f64>()).collect();
        grids.push(Grid::new(channels, hw, hw, vals).unwrap());
        strides.push(8.0 * (1u64 << l) as f64);
    }
    FeaturePyramid::new(grids, strides).unwrap()
}

pub fn random_detections(n: usize, seed: u64) -> Vec<Detection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x = rng.random_range(0.0..450.0);
            let y = rng.random_range(0.0..450.0);
            let w = rng.random_range(10.0..60.0);
            let h = rng.random_range(10.0..60.0);
            Detection {
                bbox: BBox::new(x, y, x + w, y + h),
                score: rng.random_range(0.05..1.0),
                category: rng.random_range(0..3),
                level: rng.random_range(0..5),
                cell: (rng.random_range(0..64), rng.random_range(0..64)),
            }
        })
        .collect()
}

pub fn oracle_samples(images: usize, seed: u64) -> Vec<ImageSample> {
    let scene = SceneConfig {
        seed,
        ..SceneConfig::default()
    };
    let oracle = OracleConfig::default();
    let spec = PyramidSpec::standard(scene.image_width, scene.image_height, scene.num_classes);
    simulate_images(&scene, &oracle, &spec, images)
        .into_iter()
        .map(|(gts, preds, _)| ImageSample {
            dets: preds.iter().map(to_detection).collect(),
            gts,
        })
        .collect()
}
