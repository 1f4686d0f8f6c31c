//! One-way k-shot episode construction.
//!
//! An episode is fully determined by its seed: pick a class uniformly from
//! the allowed set, then `k + 1` distinct samples of it (`k` supports and one
//! query), then `u` unlabeled images from the pool.

use std::collections::BTreeSet;
use std::io::Write;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassDataset, Sample, UnlabeledPool};
use crate::error::{Error, Result};
use crate::raster::{BinaryMask, Image};
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub seed: u64,
    pub class_id: String,
    pub support: Vec<Arc<Sample>>,
    /// The query image together with its ground-truth mask.
    pub query: Arc<Sample>,
    /// `(stem, image)` pairs drawn from the unlabeled pool.
    pub unlabeled: Vec<(String, Arc<Image>)>,
}

impl Episode {
    pub fn k(&self) -> usize {
        self.support.len()
    }

    pub fn query_image(&self) -> &Image {
        &self.query.image
    }

    pub fn query_mask(&self) -> &BinaryMask {
        &self.query.mask
    }

    pub fn manifest(&self, index: u64) -> EpisodeManifest {
        EpisodeManifest {
            index,
            seed: self.seed,
            class_id: self.class_id.clone(),
            support: self.support.iter().map(|s| s.stem.clone()).collect(),
            query: self.query.stem.clone(),
            unlabeled: self.unlabeled.iter().map(|(s, _)| s.clone()).collect(),
        }
    }
}

/// Audit record of one episode, written one JSON object per line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeManifest {
    pub index: u64,
    pub seed: u64,
    pub class_id: String,
    pub support: Vec<String>,
    pub query: String,
    pub unlabeled: Vec<String>,
}

pub fn write_manifests<'a>(
    records: impl IntoIterator<Item = &'a EpisodeManifest>,
    mut out: impl Write,
) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn check_classes(
    dataset: &ClassDataset,
    allowed: &BTreeSet<String>,
    k: usize,
) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::config("k", "at least one support shot is required"));
    }
    if allowed.is_empty() {
        return Err(Error::config(
            "classes",
            "no classes allowed for episode sampling",
        ));
    }
    allowed
        .iter()
        .map(|class| {
            let idx = dataset
                .class_index(class)
                .ok_or_else(|| Error::InsufficientEntries {
                    class: class.clone(),
                    available: 0,
                    required: k + 1,
                })?;
            let available = dataset.entries[idx].len();
            if available < k + 1 {
                return Err(Error::InsufficientEntries {
                    class: class.clone(),
                    available,
                    required: k + 1,
                });
            }
            Ok(idx)
        })
        .collect()
}

fn draw(
    dataset: &ClassDataset,
    classes: &[usize],
    k: usize,
    u: usize,
    pool: Option<&UnlabeledPool>,
    rng_seed: u64,
) -> Result<Episode> {
    let mut rng = seed::rng(rng_seed);
    let class = classes[rng.random_range(0..classes.len())];
    let samples = &dataset.entries[class];
    let picks = index::sample(&mut rng, samples.len(), k + 1).into_vec();
    let support = picks[..k]
        .iter()
        .map(|&i| Arc::clone(&samples[i]))
        .collect();
    let query = Arc::clone(&samples[picks[k]]);
    let unlabeled = if u == 0 {
        Vec::new()
    } else {
        let pool = pool
            .filter(|p| !p.is_empty())
            .ok_or(Error::EmptyUnlabeledPool)?;
        let chosen: Vec<usize> = if pool.len() >= u {
            index::sample(&mut rng, pool.len(), u).into_vec()
        } else {
            (0..u).map(|_| rng.random_range(0..pool.len())).collect()
        };
        chosen
            .into_iter()
            .map(|i| (pool.entries[i].0.clone(), Arc::clone(&pool.entries[i].1)))
            .collect()
    };
    Ok(Episode {
        seed: rng_seed,
        class_id: dataset.classes[class].clone(),
        support,
        query,
        unlabeled,
    })
}

/// Samples one episode; the result depends only on the arguments.
pub fn sample_episode(
    dataset: &ClassDataset,
    allowed_classes: &BTreeSet<String>,
    k: usize,
    u: usize,
    pool: Option<&UnlabeledPool>,
    rng_seed: u64,
) -> Result<Episode> {
    let classes = check_classes(dataset, allowed_classes, k)?;
    draw(dataset, &classes, k, u, pool, rng_seed)
}

/// Indexable, reproducible sequence of episodes. Episode `i` is sampled with
/// seed `seed::derive(base_seed, STREAM_EPISODE, i)`.
pub struct EpisodeStream<'a> {
    dataset: &'a ClassDataset,
    classes: Vec<usize>,
    k: usize,
    u: usize,
    pool: Option<&'a UnlabeledPool>,
    base_seed: u64,
}

impl<'a> EpisodeStream<'a> {
    pub fn seed_for(&self, index: u64) -> u64 {
        seed::derive(self.base_seed, seed::STREAM_EPISODE, index)
    }

    pub fn get(&self, index: u64) -> Result<Episode> {
        draw(
            self.dataset,
            &self.classes,
            self.k,
            self.u,
            self.pool,
            self.seed_for(index),
        )
    }

    /// Replacement draw number `attempt` for episode `index`, used when the
    /// original is unusable.
    pub fn resample(&self, index: u64, attempt: u64) -> Result<Episode> {
        let s = seed::derive(self.seed_for(index), seed::STREAM_RESAMPLE, attempt);
        draw(self.dataset, &self.classes, self.k, self.u, self.pool, s)
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<Episode>> + '_ {
        (0..).map(move |i| self.get(i))
    }
}

pub fn episode_stream<'a>(
    dataset: &'a ClassDataset,
    allowed_classes: &BTreeSet<String>,
    k: usize,
    u: usize,
    pool: Option<&'a UnlabeledPool>,
    base_seed: u64,
) -> Result<EpisodeStream<'a>> {
    let classes = check_classes(dataset, allowed_classes, k)?;
    if u > 0 && pool.is_none_or(|p| p.is_empty()) {
        return Err(Error::EmptyUnlabeledPool);
    }
    Ok(EpisodeStream {
        dataset,
        classes,
        k,
        u,
        pool,
        base_seed,
    })
}

/// Nearest-neighbour downsampling: output pixel `(y, x)` copies source pixel
/// `(floor(y·H/H'), floor(x·W/W'))`.
pub fn downsample_mask(mask: &BinaryMask, target: (usize, usize)) -> Result<BinaryMask> {
    let (th, tw) = target;
    if th == 0 || tw == 0 || th > mask.height || tw > mask.width {
        return Err(Error::DimensionMismatch(format!(
            "cannot downsample {}x{} to {th}x{tw}",
            mask.height, mask.width
        )));
    }
    let mut data = Vec::with_capacity(th * tw);
    for y in 0..th {
        let sy = y * mask.height / th;
        for x in 0..tw {
            data.push(mask.get(sy, x * mask.width / tw));
        }
    }
    let out = BinaryMask::new(th, tw, data)?;
    if out.count() == 0 && mask.count() > 0 {
        return Err(Error::EmptyAfterDownsample {
            height: th,
            width: tw,
        });
    }
    Ok(out)
}
