#![allow(dead_code)]

use std::path::Path;

use protoseg::dataset::{generate_shapes_dataset, ClassDataset};
use protoseg::network::{FeatureMap, Model, ModelConfig, Tensor};
use protoseg::objectives::{joint_gradients, SegmentationTask};
use protoseg::surrogate::corrupt_batch;
use protoseg::{BinaryMask, Fusion, Image};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    protoseg::seed::rng(seed)
}

pub fn random_image(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> Image {
    let data = (0..c * h * w).map(|_| rng.random::<f32>()).collect();
    Image::new(c, h, w, data).unwrap()
}

pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize, p: f64) -> BinaryMask {
    let data = (0..h * w).map(|_| rng.random_bool(p) as u8).collect();
    BinaryMask::new(h, w, data).unwrap()
}

pub fn random_nonempty_mask(rng: &mut impl Rng, h: usize, w: usize) -> BinaryMask {
    let mut m = random_mask(rng, h, w, 0.4);
    if m.count() == 0 {
        let (y, x) = (rng.random_range(0..h), rng.random_range(0..w));
        m.set(y, x, true);
    }
    m
}

pub fn random_features(rng: &mut impl Rng, m: usize, h: usize, w: usize) -> FeatureMap<f64> {
    let data = (0..m * h * w)
        .map(|_| rng.random_range(-3.0..3.0))
        .collect();
    FeatureMap {
        data: Tensor::from_vec([1, m, h, w], data),
        stride: 4,
    }
}

/// Explicit double loop over locations and channels.
pub fn pool_oracle(f: &FeatureMap<f64>, mask: &BinaryMask) -> Vec<f64> {
    let (m, h, w) = (f.dim(), f.height(), f.width());
    let mut sum = vec![0.0; m];
    let mut count = 0.0;
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) == 1 {
                count += 1.0;
                for (c, s) in sum.iter_mut().enumerate() {
                    *s += f.data.data[(c * h + y) * w + x];
                }
            }
        }
    }
    sum.into_iter().map(|s| s / count).collect()
}

/// Counts true positives, false positives and false negatives separately.
pub fn dsc_oracle(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
    for y in 0..a.height {
        for x in 0..a.width {
            match (a.get(y, x), b.get(y, x)) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fneg += 1,
                _ => {}
            }
        }
    }
    if tp + fp + fneg == 0 {
        1.0
    } else {
        (2 * tp) as f64 / (2 * tp + fp + fneg) as f64
    }
}

pub fn bce_oracle(pred: &[f32], target: &[f32]) -> f64 {
    let eps = 1e-7;
    let mut total = 0.0;
    for i in 0..pred.len() {
        let p = (pred[i] as f64).max(eps).min(1.0 - eps);
        let y = target[i] as f64;
        total += -(y * p.ln()) - (1.0 - y) * (1.0 - p).ln();
    }
    total / pred.len() as f64
}

/// Tiny double-precision model for finite-difference checks.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        in_channels: 3,
        input_size: [8, 8],
        encoder_channels: [4, 4, 4, 4],
        convs_per_block: [1, 1, 1, 1],
        decoder_channels: [4, 4],
        denoise_channels: [4, 4],
        fusion: Fusion::Concat,
    }
}

pub struct GradcheckStats {
    pub coordinates: usize,
    pub within_tight: usize,
    pub worst: f64,
    pub groups_checked: [bool; 3],
}

impl GradcheckStats {
    pub fn fraction_within(&self) -> f64 {
        self.within_tight as f64 / self.coordinates as f64
    }
}

/// Instance used by the gradient checks.
pub const GRADCHECK_SEED: u64 = 0;

/// Relative-error floor for coordinates whose gradient is essentially zero.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Central finite differences (step 1e-5) of the joint loss against the
/// analytic gradient for every trainable coordinate.
pub fn gradcheck(seed: u64) -> GradcheckStats {
    let config = gradcheck_config();
    let mut model = Model::<f64>::init(&config, seed).unwrap();
    let mut r = rng(seed ^ 0xabcdef);
    // Generic evaluation point: positive conv biases keep units active (no
    // pre-activation exactly on a ReLU kink, healthy batch-norm variance).
    let names: Vec<(String, bool)> = model
        .arrays()
        .iter()
        .map(|a| (a.name.clone(), a.trainable))
        .collect();
    for (values, (name, trainable)) in model.arrays_mut().into_iter().zip(names) {
        if !trainable {
            continue;
        }
        let conv_bias = name.ends_with("conv0.bias") || name.ends_with("conv.bias");
        for v in values.iter_mut() {
            *v += if conv_bias {
                r.random_range(0.05..0.25)
            } else {
                r.random_range(-0.05..0.05)
            };
        }
    }
    let n_tasks = 3;
    let images: Vec<Image> = (0..2 * n_tasks)
        .map(|_| random_image(&mut r, 3, 8, 8))
        .collect();
    let mut support_masks: Vec<BinaryMask> = (0..n_tasks)
        .map(|_| random_mask(&mut r, 8, 8, 0.5))
        .collect();
    for m in &mut support_masks {
        m.set(0, 0, true);
        m.set(4, 4, true);
    }
    let targets: Vec<BinaryMask> = (0..n_tasks)
        .map(|_| random_mask(&mut r, 8, 8, 0.5))
        .collect();
    let unlabeled: Vec<Image> = (0..4).map(|_| random_image(&mut r, 3, 8, 8)).collect();
    let refs: Vec<&Image> = unlabeled.iter().collect();
    let batch = corrupt_batch(&refs, 1, 0.1, seed).unwrap();
    let supports: Vec<[(&Image, &BinaryMask); 1]> = (0..n_tasks)
        .map(|t| [(&images[2 * t], &support_masks[t])])
        .collect();
    let tasks: Vec<SegmentationTask<'_>> = (0..n_tasks)
        .map(|t| SegmentationTask {
            supports: &supports[t],
            query: &images[2 * t + 1],
            target: &targets[t],
        })
        .collect();
    let full = joint_gradients(&model, &tasks, Some(&batch), 1.0).unwrap();
    let analytic = full.grads;
    let listing: Vec<(String, bool, Vec<f64>)> = analytic
        .arrays()
        .into_iter()
        .map(|a| (a.name, a.trainable, a.values.to_vec()))
        .collect();
    let h = 1e-5;
    let mut stats = GradcheckStats {
        coordinates: 0,
        within_tight: 0,
        worst: 0.0,
        groups_checked: [false; 3],
    };
    for (i, (name, trainable, grad)) in listing.iter().enumerate() {
        if !trainable {
            continue;
        }
        for (j, &a) in grad.iter().enumerate() {
            let orig = model.arrays_mut()[i][j];
            model.arrays_mut()[i][j] = orig + h;
            let up = joint_gradients(&model, &tasks, Some(&batch), 1.0)
                .unwrap()
                .report
                .total;
            model.arrays_mut()[i][j] = orig - h;
            let down = joint_gradients(&model, &tasks, Some(&batch), 1.0)
                .unwrap()
                .report
                .total;
            model.arrays_mut()[i][j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
            stats.coordinates += 1;
            if rel <= 1e-4 {
                stats.within_tight += 1;
            }
            stats.worst = stats.worst.max(rel);
        }
        let group = if name.starts_with("encoder") {
            0
        } else if name.starts_with("decoder") {
            1
        } else {
            2
        };
        stats.groups_checked[group] = true;
    }
    stats
}

pub fn shapes_corpus(
    dir: &Path,
    classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
) -> ClassDataset {
    generate_shapes_dataset(classes, per_class, (size, size), seed, dir).unwrap()
}
