//! Dice scoring and the episodic evaluation protocol.

use std::collections::BTreeSet;
use std::fs;
use std::hash::{DefaultHasher, Hasher};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ClassDataset;
use crate::episodes::{episode_stream, Episode};
use crate::error::{Error, Result};
use crate::network::{aggregate_prototypes, masked_average_pool, Model, Prototype, STRIDE};
use crate::objectives::feature_masks;
use crate::raster::{BinaryMask, Image, ProbabilityMask};

/// Probability at or above which a pixel is predicted foreground.
pub const THRESHOLD: f32 = 0.5;

/// `2|A ∩ B| / (|A| + |B|)`, with two empty masks scoring 1.
pub fn dsc(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    if !a.is_binary() || !b.is_binary() {
        return Err(Error::NonBinaryInput);
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x & y) as usize;
        total += (x + y) as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Class prototype from k labelled supports. Supports whose mask vanishes at
/// feature resolution are skipped; `EmptyMask` if all of them do.
pub fn support_prototype(
    model: &Model<f32>,
    supports: &[(&Image, &BinaryMask)],
) -> Result<Prototype<f32>> {
    let first = supports.first().ok_or(Error::EmptyMask)?.0;
    let size = (first.height / STRIDE, first.width / STRIDE);
    let masks = feature_masks(supports, size)?;
    let protos = supports
        .iter()
        .zip(&masks)
        .filter_map(|((img, _), m)| m.as_ref().map(|m| (img, m)))
        .map(|(img, m)| masked_average_pool(&model.encode(img)?, m))
        .collect::<Result<Vec<_>>>()?;
    aggregate_prototypes(&protos)
}

/// Foreground probabilities for `query` given labelled supports.
pub fn predict(
    model: &Model<f32>,
    supports: &[(&Image, &BinaryMask)],
    query: &Image,
) -> Result<ProbabilityMask> {
    let proto = support_prototype(model, supports)?;
    model.fuse_and_decode(&proto, &model.encode(query)?)
}

/// Thresholded prediction for an episode's query.
pub fn predict_episode(model: &Model<f32>, episode: &Episode) -> Result<BinaryMask> {
    let supports: Vec<(&Image, &BinaryMask)> = episode
        .support
        .iter()
        .map(|s| (&s.image, &s.mask))
        .collect();
    Ok(predict(model, &supports, episode.query_image())?.threshold(THRESHOLD))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeScore {
    pub index: u64,
    pub class_id: String,
    /// `None` when every support mask vanished at feature resolution.
    pub dsc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_episode: Vec<EpisodeScore>,
    /// Mean over scorable episodes.
    pub mean_dsc: f64,
    /// Population standard deviation over scorable episodes.
    pub std_dsc: f64,
    pub k: usize,
    pub n_episodes: usize,
    pub n_unscorable: usize,
    pub checkpoint: Option<String>,
    pub seed: u64,
}

impl EvalReport {
    fn from_scores(per_episode: Vec<EpisodeScore>, k: usize, seed: u64) -> Self {
        let scores: Vec<f64> = per_episode.iter().filter_map(|e| e.dsc).collect();
        let n = scores.len();
        let (mean, std) = if n == 0 {
            (0.0, 0.0)
        } else {
            let mean = scores.iter().sum::<f64>() / n as f64;
            let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
            (mean, var.sqrt())
        };
        Self {
            n_episodes: per_episode.len(),
            n_unscorable: per_episode.len() - n,
            per_episode,
            mean_dsc: mean,
            std_dsc: std,
            k,
            checkpoint: None,
            seed,
        }
    }

    pub fn with_checkpoint(mut self, id: impl Into<String>) -> Self {
        self.checkpoint = Some(id.into());
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Scores `n_episodes` episodes of `allowed` classes. Episodes are scored in
/// parallel; the report is ordered by episode index.
pub fn evaluate(
    model: &Model<f32>,
    dataset: &ClassDataset,
    allowed: &BTreeSet<String>,
    k: usize,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    let stream = episode_stream(dataset, allowed, k, 0, None, seed)?;
    let per_episode = (0..n_episodes as u64)
        .into_par_iter()
        .map(|i| {
            let episode = stream.get(i)?;
            let dsc = match predict_episode(model, &episode) {
                Ok(pred) => Some(dsc(&pred, episode.query_mask())?),
                Err(Error::EmptyMask) => None,
                Err(e) => return Err(e),
            };
            Ok(EpisodeScore {
                index: i,
                class_id: episode.class_id.clone(),
                dsc,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_scores(per_episode, k, seed))
}

/// One row of the summary table.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub model: String,
    pub additional_samples: String,
    pub mean_dsc: f64,
}

/// Plain-text table with columns model, additional samples and mean DSC (%).
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let w0 = rows
        .iter()
        .map(|r| r.model.len())
        .max()
        .unwrap_or(0)
        .max("Model".len());
    let w1 = rows
        .iter()
        .map(|r| r.additional_samples.len())
        .max()
        .unwrap_or(0)
        .max("Additional samples".len());
    let mut out = format!(
        "{:<w0$} | {:<w1$} | DSC (%)\n",
        "Model", "Additional samples"
    );
    out.push_str(&format!(
        "{}-+-{}-+--------\n",
        "-".repeat(w0),
        "-".repeat(w1)
    ));
    for r in rows {
        out.push_str(&format!(
            "{:<w0$} | {:<w1$} | {:.2}\n",
            r.model,
            r.additional_samples,
            100.0 * r.mean_dsc
        ));
    }
    out
}

/// Writes `image | ground truth | prediction` side by side as an RGB PNG.
pub fn write_overlay(
    path: &Path,
    image: &Image,
    truth: &BinaryMask,
    pred: &BinaryMask,
) -> Result<()> {
    let (h, w) = (image.height, image.width);
    if truth.height != h || truth.width != w || pred.height != h || pred.width != w {
        return Err(Error::ShapeMismatch("overlay inputs differ in size".into()));
    }
    let mut canvas = image::RgbImage::new(3 * w as u32, h as u32);
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for y in 0..h {
        for x in 0..w {
            let px: [u8; 3] =
                std::array::from_fn(|c| to_u8(image.get(c.min(image.channels - 1), y, x)));
            canvas.put_pixel(x as u32, y as u32, image::Rgb(px));
            let g = 255 * truth.get(y, x);
            canvas.put_pixel((w + x) as u32, y as u32, image::Rgb([g, g, g]));
            let p = 255 * pred.get(y, x);
            canvas.put_pixel((2 * w + x) as u32, y as u32, image::Rgb([p, p, p]));
        }
    }
    canvas.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other)),
    })
}

/// Stable fingerprint of every stored value of `model`.
pub fn parameter_checksum(model: &Model<f32>) -> u64 {
    let mut h = DefaultHasher::new();
    for a in model.arrays() {
        h.write(a.name.as_bytes());
        for v in a.values {
            h.write_u32(v.to_bits());
        }
    }
    h.finish()
}
