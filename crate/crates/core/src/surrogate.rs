//! Denoising pretext task: unlabeled images are corrupted with additive
//! Gaussian noise and paired with their clean originals.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;
use crate::seed;

pub const DEFAULT_SIGMA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub sigma: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledBatch {
    pub clean: Vec<Image>,
    pub corrupted: Vec<Image>,
    pub noise_meta: Vec<NoiseRecord>,
}

impl UnlabeledBatch {
    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }
}

/// Adds i.i.d. `N(0, sigma²)` noise to every value and clamps to `[0, 1]`.
pub fn corrupt_image(image: &Image, sigma: f64, seed: u64) -> Result<Image> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(Error::NegativeSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    let mut rng = seed::rng(seed);
    let data = image
        .data
        .iter()
        .map(|&v| (v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32)
        .collect();
    Ok(Image { data, ..*image })
}

/// Corrupts each image `copies` times with independent noise. Copy `c` of
/// image `i` uses seed `derive(seed, STREAM_NOISE, i · copies + c)`.
pub fn corrupt_batch(
    images: &[&Image],
    copies: usize,
    sigma: f64,
    seed: u64,
) -> Result<UnlabeledBatch> {
    if copies == 0 {
        return Err(Error::config("surrogate.copies", "must be at least 1"));
    }
    let mut batch = UnlabeledBatch {
        clean: Vec::with_capacity(images.len() * copies),
        corrupted: Vec::with_capacity(images.len() * copies),
        noise_meta: Vec::with_capacity(images.len() * copies),
    };
    for (i, img) in images.iter().enumerate() {
        for c in 0..copies {
            let s = seed::derive(seed, seed::STREAM_NOISE, (i * copies + c) as u64);
            batch.corrupted.push(corrupt_image(img, sigma, s)?);
            batch.clean.push((*img).clone());
            batch.noise_meta.push(NoiseRecord { sigma, seed: s });
        }
    }
    Ok(batch)
}

/// Draws `u` images from `pool` (without replacement when the pool is large
/// enough) and emits `u × copies` (clean, corrupted) pairs.
pub fn make_unlabeled_batch(
    pool: &[Image],
    u: usize,
    copies: usize,
    sigma: f64,
    seed: u64,
) -> Result<UnlabeledBatch> {
    if pool.is_empty() {
        return Err(Error::EmptyUnlabeledPool);
    }
    if u == 0 {
        return Err(Error::config("u", "must be at least 1"));
    }
    let mut rng = seed::rng(seed);
    let picks: Vec<usize> = if pool.len() >= u {
        index::sample(&mut rng, pool.len(), u).into_vec()
    } else {
        (0..u).map(|_| rng.random_range(0..pool.len())).collect()
    };
    let chosen: Vec<&Image> = picks.iter().map(|&i| &pool[i]).collect();
    corrupt_batch(&chosen, copies, sigma, seed)
}
