//! Loss functions and the gradient of the joint objective
//! `L = L_few + λ · L_sur`.
//!
//! Both terms are pixel-mean binary cross-entropies with predictions clipped
//! to `[ε, 1 − ε]`. The reconstruction term uses both cross-entropy terms,
//! `−[x·log ŷ + (1 − x)·log(1 − ŷ)]`; the single-term form is minimised by
//! `ŷ ≡ 1` regardless of the target.

use serde::{Deserialize, Serialize};

use crate::episodes::downsample_mask;
use crate::error::{Error, Result};
use crate::network::layers::{BatchStats, Mode};
use crate::network::{
    aggregate_prototypes, fuse_item, fuse_item_backward, pool_item, pool_item_backward, Float,
    Model, Prototype, Tensor,
};
use crate::raster::{BinaryMask, Image, ProbabilityMask};
use crate::surrogate::UnlabeledBatch;

pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub few_shot: f64,
    pub surrogate: f64,
    pub total: f64,
    pub lambda: f64,
}

fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Mean binary cross-entropy between foreground probabilities and a mask.
pub fn few_shot_loss(pred: &ProbabilityMask, target: &BinaryMask) -> Result<f64> {
    if (pred.height, pred.width) != (target.height, target.width) {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs target {}x{}",
            pred.height, pred.width, target.height, target.width
        )));
    }
    let sum: f64 = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(&p, &y)| bce(p as f64, y as f64))
        .sum();
    Ok(sum / pred.data.len() as f64)
}

/// Mean binary cross-entropy of a reconstruction against the clean image.
pub fn surrogate_loss(reconstruction: &Image, clean: &Image) -> Result<f64> {
    if reconstruction.dims() != clean.dims() {
        return Err(Error::ShapeMismatch(format!(
            "reconstruction {:?} vs clean {:?}",
            reconstruction.dims(),
            clean.dims()
        )));
    }
    if !clean.is_unit_range() {
        return Err(Error::RangeViolation("clean image".into()));
    }
    let sum: f64 = reconstruction
        .data
        .iter()
        .zip(&clean.data)
        .map(|(&p, &x)| bce(p as f64, x as f64))
        .sum();
    Ok(sum / clean.data.len() as f64)
}

pub fn joint_loss(few: f64, sur: f64, lambda: f64) -> Result<f64> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::NegativeLambda(lambda));
    }
    Ok(few + lambda * sur)
}

/// Mean clipped BCE and its gradient w.r.t. the (unclipped) predictions.
fn bce_with_grad<T: Float>(pred: &[T], target: &[T], scale: T) -> (f64, Vec<T>) {
    let eps = T::lit(PROB_EPS);
    let hi = T::one() - eps;
    let n = T::lit(pred.len() as f64);
    let mut loss = T::zero();
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let pc = p.max(eps).min(hi);
            loss -= y * pc.ln() + (T::one() - y) * (T::one() - pc).ln();
            if p > eps && p < hi {
                scale * ((T::one() - y) / (T::one() - p) - y / p) / n
            } else {
                T::zero()
            }
        })
        .collect();
    ((loss / n).as_f64(), grad)
}

/// One segmentation problem inside a training step. Without supports the
/// prototype is the zero vector, which is how batch-wise ("regular")
/// training feeds the decoder.
#[derive(Clone, Copy, Debug)]
pub struct SegmentationTask<'a> {
    pub supports: &'a [(&'a Image, &'a BinaryMask)],
    pub query: &'a Image,
    pub target: &'a BinaryMask,
}

pub struct JointGradients<T> {
    pub report: LossReport,
    /// Same structure as the model; batch-norm buffers stay zero.
    pub grads: Model<T>,
    pub decoder_stats: Vec<Option<BatchStats<T>>>,
    pub denoise_stats: Option<Vec<Option<BatchStats<T>>>>,
}

/// Support masks at feature resolution, dropping those that vanish.
/// Fails with `EmptyMask` when every support mask vanishes.
pub fn feature_masks(
    supports: &[(&Image, &BinaryMask)],
    feature_size: (usize, usize),
) -> Result<Vec<Option<BinaryMask>>> {
    let masks: Vec<Option<BinaryMask>> = supports
        .iter()
        .map(|(_, m)| match downsample_mask(m, feature_size) {
            Ok(d) if d.count() > 0 => Ok(Some(d)),
            Ok(_) | Err(Error::EmptyAfterDownsample { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    if !supports.is_empty() && masks.iter().all(Option::is_none) {
        return Err(Error::EmptyMask);
    }
    Ok(masks)
}

/// Forward and backward pass of the joint objective in training mode.
///
/// The surrogate branch runs only when `lambda > 0` and a batch is given.
pub fn joint_gradients<T: Float>(
    model: &Model<T>,
    tasks: &[SegmentationTask<'_>],
    surrogate: Option<&UnlabeledBatch>,
    lambda: f64,
) -> Result<JointGradients<T>> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::NegativeLambda(lambda));
    }
    if tasks.is_empty() {
        return Err(Error::DimensionMismatch(
            "no segmentation tasks in step".into(),
        ));
    }
    let surrogate = surrogate.filter(|b| lambda > 0.0 && !b.is_empty());

    // One encoder pass over supports, queries and corrupted images.
    let mut images: Vec<&Image> = Vec::new();
    let mut slots = Vec::with_capacity(tasks.len());
    for t in tasks {
        let first = images.len();
        images.extend(t.supports.iter().map(|(img, _)| *img));
        slots.push((first, images.len()));
        images.push(t.query);
    }
    let sur_first = images.len();
    if let Some(b) = surrogate {
        images.extend(b.corrupted.iter());
    }
    let x = model.batch(&images)?;
    let (feats, enc_cache) = model.encode_batch(&x);
    let (dim, fh, fw) = (feats.c(), feats.h(), feats.w());
    let hw = fh * fw;
    let fusion = model.config.fusion;

    let mut protos = Vec::with_capacity(tasks.len());
    let mut used_masks = Vec::with_capacity(tasks.len());
    for (t, &(first, _)) in tasks.iter().zip(&slots) {
        let masks = feature_masks(t.supports, (fh, fw))?;
        let mut pooled = Vec::new();
        for (j, m) in masks.iter().enumerate() {
            if let Some(m) = m {
                pooled.push(Prototype {
                    values: pool_item(feats.item(first + j), dim, m)?,
                    class_id: None,
                });
            }
        }
        protos.push(if pooled.is_empty() {
            vec![T::zero(); dim]
        } else {
            aggregate_prototypes(&pooled)?.values
        });
        used_masks.push(masks);
    }

    let dec_in = model.config.decoder_in_channels();
    let mut fused = Vec::with_capacity(tasks.len() * dec_in * hw);
    for (p, &(_, q)) in protos.iter().zip(&slots) {
        fused.extend(fuse_item(fusion, p, feats.item(q), hw));
    }
    let fused = Tensor::from_vec([tasks.len(), dec_in, fh, fw], fused);
    let dec_cache = model.decoder.forward(&fused, Mode::Train);
    let out = &dec_cache.output;
    let mut target = Vec::with_capacity(out.data.len());
    for t in tasks {
        if (t.target.height, t.target.width) != (out.h(), out.w()) {
            return Err(Error::ShapeMismatch(
                "query mask does not match query image".into(),
            ));
        }
        target.extend(t.target.data.iter().map(|&v| T::lit(v as f64)));
    }
    let (few, dout) = bce_with_grad(&out.data, &target, T::one());

    let mut grads = model.zeros_like();
    let mut dfeat = Tensor::zeros(feats.shape);
    let dfused = model.decoder.backward(
        &dec_cache,
        &Tensor::from_vec(out.shape, dout),
        &mut grads.decoder,
    );
    for (i, t) in tasks.iter().enumerate() {
        let (first, q) = slots[i];
        let mut dproto = vec![T::zero(); dim];
        let mut dquery = vec![T::zero(); dim * hw];
        fuse_item_backward(
            fusion,
            &protos[i],
            feats.item(q),
            hw,
            dfused.item(i),
            &mut dquery,
            &mut dproto,
        );
        for (d, g) in dfeat.item_mut(q).iter_mut().zip(&dquery) {
            *d += *g;
        }
        let used: Vec<(usize, &BinaryMask)> = used_masks[i]
            .iter()
            .enumerate()
            .filter_map(|(j, m)| m.as_ref().map(|m| (j, m)))
            .collect();
        if used.is_empty() || t.supports.is_empty() {
            continue;
        }
        let share = T::one() / T::lit(used.len() as f64);
        let dshare: Vec<T> = dproto.iter().map(|&g| g * share).collect();
        for (j, m) in used {
            pool_item_backward(&dshare, m, dfeat.item_mut(first + j));
        }
    }

    let (sur, denoise_stats) = match surrogate {
        Some(batch) => {
            let idx: Vec<usize> = (sur_first..images.len()).collect();
            let sur_feats = feats.gather(&idx);
            let cache = model.denoise.forward(&sur_feats, Mode::Train);
            let clean: Vec<T> = batch
                .clean
                .iter()
                .flat_map(|img| img.data.iter().map(|&v| T::lit(v as f64)))
                .collect();
            if clean.len() != cache.output.data.len() {
                return Err(Error::ShapeMismatch(
                    "clean and corrupted batches differ".into(),
                ));
            }
            let (sur, drec) = bce_with_grad(&cache.output.data, &clean, T::lit(lambda));
            let dsf = model.denoise.backward(
                &cache,
                &Tensor::from_vec(cache.output.shape, drec),
                &mut grads.denoise,
            );
            for (k, &i) in idx.iter().enumerate() {
                for (d, g) in dfeat.item_mut(i).iter_mut().zip(dsf.item(k)) {
                    *d += *g;
                }
            }
            (sur, Some(cache.batch_stats()))
        }
        None => (0.0, None),
    };

    model
        .encoder
        .backward(&enc_cache, dfeat, &mut grads.encoder);
    Ok(JointGradients {
        report: LossReport {
            few_shot: few,
            surrogate: sur,
            total: joint_loss(few, sur, lambda)?,
            lambda,
        },
        grads,
        decoder_stats: dec_cache.batch_stats(),
        denoise_stats,
    })
}
