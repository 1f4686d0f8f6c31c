//! The segmentation model: a shared convolutional encoder, a prototype
//! fusion step, a segmentation decoder and a denoising reconstruction head.
//!
//! Feature maps are stored channel-first (`M × H' × W'`) even though the
//! conventional notation is `H' × W' × M`.

pub mod checkpoint;
pub mod layers;
pub mod tensor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, Image, ProbabilityMask};
use crate::seed;
use layers::{
    max_pool2, max_pool2_backward, relu, relu_backward, sigmoid, sigmoid_backward, upsample2,
    upsample2_backward, BatchNorm2d, BatchNormCache, BatchStats, Conv2d, Mode,
};
pub use tensor::{Float, Tensor};

/// Input-to-feature downscale factor of the encoder.
pub const STRIDE: usize = 4;

/// How the class prototype is combined with the query features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Broadcast the prototype and concatenate it with the query features
    /// (`2M` decoder input channels).
    #[default]
    Concat,
    /// Per-location cosine similarity between prototype and query features
    /// (one decoder input channel).
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Nominal `(H, W)` the model is trained at. The network itself accepts
    /// any size divisible by [`STRIDE`].
    pub input_size: [usize; 2],
    /// Output widths of the four encoder blocks; the last one is `M`.
    pub encoder_channels: [usize; 4],
    pub convs_per_block: [usize; 4],
    pub decoder_channels: [usize; 2],
    pub denoise_channels: [usize; 2],
    #[serde(default)]
    pub fusion: Fusion,
}

impl ModelConfig {
    /// CPU-sized variant used by the tests and the tiny preset.
    pub fn tiny() -> Self {
        Self {
            in_channels: 3,
            input_size: [32, 32],
            encoder_channels: [8, 16, 32, 32],
            convs_per_block: [1, 1, 1, 1],
            decoder_channels: [8, 8],
            denoise_channels: [8, 8],
            fusion: Fusion::Concat,
        }
    }

    /// VGG-16 widths for the first four blocks at 224×224.
    pub fn paper() -> Self {
        Self {
            in_channels: 3,
            input_size: [224, 224],
            encoder_channels: [64, 128, 256, 512],
            convs_per_block: [2, 2, 3, 3],
            decoder_channels: [256, 64],
            denoise_channels: [256, 64],
            fusion: Fusion::Concat,
        }
    }

    /// Feature dimensionality `M`.
    pub fn feature_dim(&self) -> usize {
        self.encoder_channels[3]
    }

    pub fn decoder_in_channels(&self) -> usize {
        match self.fusion {
            Fusion::Concat => 2 * self.feature_dim(),
            Fusion::Cosine => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("model.in_channels", "must be positive"));
        }
        if self.encoder_channels.contains(&0) {
            return Err(Error::config(
                "model.encoder_channels",
                "widths must be positive",
            ));
        }
        if self.convs_per_block.contains(&0) {
            return Err(Error::config(
                "model.convs_per_block",
                "every block needs a convolution",
            ));
        }
        if self.decoder_channels.contains(&0) {
            return Err(Error::config(
                "model.decoder_channels",
                "widths must be positive",
            ));
        }
        if self.denoise_channels.contains(&0) {
            return Err(Error::config(
                "model.denoise_channels",
                "widths must be positive",
            ));
        }
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || h % STRIDE != 0 || w % STRIDE != 0 {
            return Err(Error::config(
                "model.input_size",
                format!("{h}x{w} must be positive and divisible by {STRIDE}"),
            ));
        }
        Ok(())
    }
}

/// Encoded representation of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    /// Shape `[1, M, H', W']`.
    pub data: Tensor<T>,
    pub stride: usize,
}

impl<T: Float> FeatureMap<T> {
    pub fn dim(&self) -> usize {
        self.data.c()
    }
    pub fn height(&self) -> usize {
        self.data.h()
    }
    pub fn width(&self) -> usize {
        self.data.w()
    }
    /// Feature vector at spatial location `(y, x)`.
    pub fn at(&self, y: usize, x: usize) -> Vec<T> {
        let (h, w) = (self.height(), self.width());
        (0..self.dim())
            .map(|m| self.data.data[(m * h + y) * w + x])
            .collect()
    }
}

/// `M`-dimensional class summary.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototype<T> {
    pub values: Vec<T>,
    pub class_id: Option<String>,
}

impl<T: Float> Prototype<T> {
    pub fn with_class(mut self, class_id: impl Into<String>) -> Self {
        self.class_id = Some(class_id.into());
        self
    }
}

/// Mean feature vector over the foreground locations of `mask`.
pub fn masked_average_pool<T: Float>(
    features: &FeatureMap<T>,
    mask: &BinaryMask,
) -> Result<Prototype<T>> {
    if mask.height != features.height() || mask.width != features.width() {
        return Err(Error::DimensionMismatch(format!(
            "mask {}x{} vs features {}x{}",
            mask.height,
            mask.width,
            features.height(),
            features.width()
        )));
    }
    Ok(Prototype {
        values: pool_item(features.data.item(0), features.dim(), mask)?,
        class_id: None,
    })
}

/// Masked average pooling over one `M × H' × W'` slice.
pub(crate) fn pool_item<T: Float>(features: &[T], dim: usize, mask: &BinaryMask) -> Result<Vec<T>> {
    let hw = mask.height * mask.width;
    let count = mask.count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let inv = T::one() / T::lit(count as f64);
    Ok((0..dim)
        .map(|m| {
            let plane = &features[m * hw..(m + 1) * hw];
            let sum: T = plane
                .iter()
                .zip(&mask.data)
                .filter(|(_, &on)| on == 1)
                .map(|(&v, _)| v)
                .sum();
            sum * inv
        })
        .collect())
}

/// Scatters a prototype gradient back onto the pooled feature locations.
pub(crate) fn pool_item_backward<T: Float>(dproto: &[T], mask: &BinaryMask, dfeatures: &mut [T]) {
    let hw = mask.height * mask.width;
    let inv = T::one() / T::lit(mask.count() as f64);
    for (m, &g) in dproto.iter().enumerate() {
        let plane = &mut dfeatures[m * hw..(m + 1) * hw];
        for (d, &on) in plane.iter_mut().zip(&mask.data) {
            if on == 1 {
                *d += g * inv;
            }
        }
    }
}

/// Elementwise mean of k prototypes of the same class.
pub fn aggregate_prototypes<T: Float>(protos: &[Prototype<T>]) -> Result<Prototype<T>> {
    let first = protos
        .first()
        .ok_or_else(|| Error::DimensionMismatch("no prototypes to aggregate".into()))?;
    let dim = first.values.len();
    let mut sum = vec![T::zero(); dim];
    for p in protos {
        if p.class_id != first.class_id {
            return Err(Error::MixedClasses);
        }
        if p.values.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "prototype lengths {} and {dim}",
                p.values.len()
            )));
        }
        for (s, &v) in sum.iter_mut().zip(&p.values) {
            *s += v;
        }
    }
    let inv = T::one() / T::lit(protos.len() as f64);
    Ok(Prototype {
        values: sum.into_iter().map(|s| s * inv).collect(),
        class_id: first.class_id.clone(),
    })
}

/// Builds the decoder input for one query from its features and prototype.
pub(crate) fn fuse_item<T: Float>(fusion: Fusion, proto: &[T], query: &[T], hw: usize) -> Vec<T> {
    let dim = proto.len();
    match fusion {
        Fusion::Concat => {
            let mut out = Vec::with_capacity(2 * dim * hw);
            out.extend_from_slice(query);
            for &p in proto {
                out.extend(std::iter::repeat_n(p, hw));
            }
            out
        }
        Fusion::Cosine => {
            let pnorm = proto.iter().map(|&v| v * v).sum::<T>().sqrt();
            (0..hw)
                .map(|i| {
                    let (mut dot, mut fnorm) = (T::zero(), T::zero());
                    for m in 0..dim {
                        let f = query[m * hw + i];
                        dot += f * proto[m];
                        fnorm += f * f;
                    }
                    let denom = fnorm.sqrt() * pnorm;
                    if denom > T::zero() {
                        dot / denom
                    } else {
                        T::zero()
                    }
                })
                .collect()
        }
    }
}

/// Splits the fused-input gradient into query-feature and prototype parts.
pub(crate) fn fuse_item_backward<T: Float>(
    fusion: Fusion,
    proto: &[T],
    query: &[T],
    hw: usize,
    dfused: &[T],
    dquery: &mut [T],
    dproto: &mut [T],
) {
    let dim = proto.len();
    match fusion {
        Fusion::Concat => {
            for (d, &g) in dquery.iter_mut().zip(&dfused[..dim * hw]) {
                *d += g;
            }
            for (m, dp) in dproto.iter_mut().enumerate() {
                *dp += dfused[(dim + m) * hw..(dim + m + 1) * hw]
                    .iter()
                    .copied()
                    .sum::<T>();
            }
        }
        Fusion::Cosine => {
            let pnorm2 = proto.iter().map(|&v| v * v).sum::<T>();
            let pnorm = pnorm2.sqrt();
            for (i, &g) in dfused.iter().enumerate().take(hw) {
                let (mut dot, mut fnorm2) = (T::zero(), T::zero());
                for m in 0..dim {
                    let f = query[m * hw + i];
                    dot += f * proto[m];
                    fnorm2 += f * f;
                }
                let fnorm = fnorm2.sqrt();
                let denom = fnorm * pnorm;
                if denom <= T::zero() {
                    continue;
                }
                let s = dot / denom;
                for m in 0..dim {
                    let f = query[m * hw + i];
                    dquery[m * hw + i] += g * (proto[m] / denom - s * f / fnorm2);
                    dproto[m] += g * (f / denom - s * proto[m] / pnorm2);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock<T> {
    pub convs: Vec<Conv2d<T>>,
    pub pool: bool,
}

/// VGG-style encoder: blocks 1–2 end in 2×2 max pooling, blocks 3–4 use
/// dilation-2 convolutions without pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub blocks: Vec<EncoderBlock<T>>,
}

pub(crate) struct EncoderBlockCache<T> {
    inputs: Vec<Tensor<T>>,
    outputs: Vec<Tensor<T>>,
    pool: Option<([usize; 4], Vec<u32>)>,
}

pub(crate) struct EncoderCache<T> {
    blocks: Vec<EncoderBlockCache<T>>,
}

impl<T: Float> Encoder<T> {
    fn init(config: &ModelConfig, rng: &mut impl rand::Rng) -> Self {
        let mut in_ch = config.in_channels;
        let blocks = (0..4)
            .map(|b| {
                let out = config.encoder_channels[b];
                let dilation = if b < 2 { 1 } else { 2 };
                let convs = (0..config.convs_per_block[b])
                    .map(|j| Conv2d::init(if j == 0 { in_ch } else { out }, out, 3, dilation, rng))
                    .collect();
                in_ch = out;
                EncoderBlock { convs, pool: b < 2 }
            })
            .collect();
        Self { blocks }
    }

    fn zeros_like(&self) -> Self {
        Self {
            blocks: self
                .blocks
                .iter()
                .map(|b| EncoderBlock {
                    convs: b.convs.iter().map(Conv2d::zeros_like).collect(),
                    pool: b.pool,
                })
                .collect(),
        }
    }

    pub(crate) fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, EncoderCache<T>) {
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let mut cache = EncoderBlockCache {
                inputs: Vec::new(),
                outputs: Vec::new(),
                pool: None,
            };
            for conv in &block.convs {
                let y = relu(&conv.forward(&cur));
                cache.inputs.push(std::mem::replace(&mut cur, y.clone()));
                cache.outputs.push(y);
            }
            if block.pool {
                let (y, arg) = max_pool2(&cur);
                cache.pool = Some((cur.shape, arg));
                cur = y;
            }
            caches.push(cache);
        }
        (cur, EncoderCache { blocks: caches })
    }

    pub(crate) fn backward(&self, cache: &EncoderCache<T>, dy: Tensor<T>, grad: &mut Self) {
        let mut d = dy;
        for (b, (block, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            if let Some((shape, arg)) = &bc.pool {
                d = max_pool2_backward(*shape, arg, &d);
            }
            for (j, conv) in block.convs.iter().enumerate().rev() {
                d = relu_backward(&bc.outputs[j], &d);
                let need_dx = !(b == 0 && j == 0);
                match conv.backward(&bc.inputs[j], &d, &mut grad.blocks[b].convs[j], need_dx) {
                    Some(dx) => d = dx,
                    None => return,
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeBlock<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

/// Two ×2 upsample → conv3×3 → batch-norm → ReLU blocks followed by a 1×1
/// convolution and a sigmoid. Used for both the segmentation decoder and
/// the denoising head.
#[derive(Clone, Debug, PartialEq)]
pub struct UpDecoder<T> {
    pub blocks: Vec<DecodeBlock<T>>,
    pub head: Conv2d<T>,
}

pub(crate) struct UpDecoderCache<T> {
    conv_inputs: Vec<Tensor<T>>,
    bn: Vec<BatchNormCache<T>>,
    relu_out: Vec<Tensor<T>>,
    head_input: Tensor<T>,
    pub(crate) output: Tensor<T>,
}

impl<T: Float> UpDecoderCache<T> {
    pub(crate) fn batch_stats(&self) -> Vec<Option<BatchStats<T>>> {
        self.bn.iter().map(|c| c.stats.clone()).collect()
    }
}

impl<T: Float> UpDecoder<T> {
    fn init(in_ch: usize, widths: [usize; 2], out_ch: usize, rng: &mut impl rand::Rng) -> Self {
        let mut c = in_ch;
        let blocks = widths
            .iter()
            .map(|&w| {
                let block = DecodeBlock {
                    conv: Conv2d::init(c, w, 3, 1, rng),
                    bn: BatchNorm2d::new(w),
                };
                c = w;
                block
            })
            .collect();
        Self {
            blocks,
            head: Conv2d::init(c, out_ch, 1, 1, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            blocks: self
                .blocks
                .iter()
                .map(|b| DecodeBlock {
                    conv: b.conv.zeros_like(),
                    bn: b.bn.zeros_like(),
                })
                .collect(),
            head: self.head.zeros_like(),
        }
    }

    /// Returns sigmoid outputs at 4× the input resolution.
    pub(crate) fn forward(&self, x: &Tensor<T>, mode: Mode) -> UpDecoderCache<T> {
        let mut cur = x.clone();
        let mut cache = UpDecoderCache {
            conv_inputs: Vec::new(),
            bn: Vec::new(),
            relu_out: Vec::new(),
            head_input: Tensor::zeros([0, 0, 0, 0]),
            output: Tensor::zeros([0, 0, 0, 0]),
        };
        for block in &self.blocks {
            let up = upsample2(&cur);
            let z = block.conv.forward(&up);
            let (n, bc) = block.bn.forward(&z, mode);
            let a = relu(&n);
            cache.conv_inputs.push(up);
            cache.bn.push(bc);
            cache.relu_out.push(a.clone());
            cur = a;
        }
        cache.output = sigmoid(&self.head.forward(&cur));
        cache.head_input = cur;
        cache
    }

    /// Backpropagates a gradient w.r.t. the sigmoid output to the input.
    pub(crate) fn backward(
        &self,
        cache: &UpDecoderCache<T>,
        dout: &Tensor<T>,
        grad: &mut Self,
    ) -> Tensor<T> {
        let dlogit = sigmoid_backward(&cache.output, dout);
        let mut d = self
            .head
            .backward(&cache.head_input, &dlogit, &mut grad.head, true)
            .expect("input gradient requested");
        for (i, block) in self.blocks.iter().enumerate().rev() {
            d = relu_backward(&cache.relu_out[i], &d);
            d = block.bn.backward(&cache.bn[i], &d, &mut grad.blocks[i].bn);
            d = block
                .conv
                .backward(&cache.conv_inputs[i], &d, &mut grad.blocks[i].conv, true)
                .expect("input gradient requested");
            d = upsample2_backward(&d);
        }
        d
    }

    pub(crate) fn update_running(&mut self, stats: &[Option<BatchStats<T>>]) {
        for (block, s) in self.blocks.iter_mut().zip(stats) {
            if let Some(s) = s {
                block.bn.update_running(s);
            }
        }
    }
}

/// Named reference to one parameter or buffer array.
pub struct NamedArray<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: &'a [T],
    /// Batch-norm running statistics are buffers, not trainable.
    pub trainable: bool,
}

fn push_conv<'a, T: Float>(out: &mut Vec<NamedArray<'a, T>>, prefix: String, c: &'a Conv2d<T>) {
    out.push(NamedArray {
        name: format!("{prefix}.weight"),
        shape: vec![c.out_ch, c.in_ch, c.kernel, c.kernel],
        values: &c.weight,
        trainable: true,
    });
    out.push(NamedArray {
        name: format!("{prefix}.bias"),
        shape: vec![c.out_ch],
        values: &c.bias,
        trainable: true,
    });
}

/// Encoder (θ), segmentation decoder (ψ) and denoising head (φ).
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub encoder: Encoder<T>,
    pub decoder: UpDecoder<T>,
    pub denoise: UpDecoder<T>,
}

impl<T: Float> Model<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed::derive(seed, seed::STREAM_INIT, 0));
        let encoder = Encoder::init(config, &mut rng);
        let decoder = UpDecoder::init(
            config.decoder_in_channels(),
            config.decoder_channels,
            1,
            &mut rng,
        );
        let denoise = UpDecoder::init(
            config.feature_dim(),
            config.denoise_channels,
            config.in_channels,
            &mut rng,
        );
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
            denoise,
        })
    }

    /// Same structure with every array zeroed; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
            denoise: self.denoise.zeros_like(),
        }
    }

    /// Every parameter and buffer in a fixed order.
    pub fn arrays(&self) -> Vec<NamedArray<'_, T>> {
        let mut out = Vec::new();
        for (b, block) in self.encoder.blocks.iter().enumerate() {
            for (j, c) in block.convs.iter().enumerate() {
                push_conv(&mut out, format!("encoder.block{b}.conv{j}"), c);
            }
        }
        for (prefix, dec) in [("decoder", &self.decoder), ("denoise", &self.denoise)] {
            for (i, block) in dec.blocks.iter().enumerate() {
                push_conv(&mut out, format!("{prefix}.block{i}.conv"), &block.conv);
                let ch = vec![block.bn.gamma.len()];
                for (name, values, trainable) in [
                    ("gamma", &block.bn.gamma, true),
                    ("beta", &block.bn.beta, true),
                    ("running_mean", &block.bn.running_mean, false),
                    ("running_var", &block.bn.running_var, false),
                ] {
                    out.push(NamedArray {
                        name: format!("{prefix}.block{i}.bn.{name}"),
                        shape: ch.clone(),
                        values,
                        trainable,
                    });
                }
            }
            push_conv(&mut out, format!("{prefix}.head"), &dec.head);
        }
        out
    }

    /// Mutable views in the same order as [`Model::arrays`].
    pub fn arrays_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out: Vec<&mut Vec<T>> = Vec::new();
        for block in &mut self.encoder.blocks {
            for c in &mut block.convs {
                out.push(&mut c.weight);
                out.push(&mut c.bias);
            }
        }
        for dec in [&mut self.decoder, &mut self.denoise] {
            for block in &mut dec.blocks {
                out.push(&mut block.conv.weight);
                out.push(&mut block.conv.bias);
                out.push(&mut block.bn.gamma);
                out.push(&mut block.bn.beta);
                out.push(&mut block.bn.running_mean);
                out.push(&mut block.bn.running_var);
            }
            out.push(&mut dec.head.weight);
            out.push(&mut dec.head.bias);
        }
        out
    }

    /// Number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.arrays()
            .iter()
            .filter(|a| a.trainable)
            .map(|a| a.values.len())
            .sum()
    }

    fn check_input(&self, channels: usize, height: usize, width: usize) -> Result<()> {
        if !height.is_multiple_of(STRIDE) || !width.is_multiple_of(STRIDE) || height == 0 || width == 0 {
            return Err(Error::IndivisibleInput {
                height,
                width,
                stride: STRIDE,
            });
        }
        if channels != self.config.in_channels {
            return Err(Error::DimensionMismatch(format!(
                "image has {channels} channels, model expects {}",
                self.config.in_channels
            )));
        }
        Ok(())
    }

    /// Stacks images into a batch tensor after validating their shapes.
    pub fn batch(&self, images: &[&Image]) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| Error::DimensionMismatch("empty image batch".into()))?;
        let (c, h, w) = first.dims();
        self.check_input(c, h, w)?;
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for img in images {
            if img.dims() != (c, h, w) {
                return Err(Error::DimensionMismatch(
                    "images in a batch differ in shape".into(),
                ));
            }
            data.extend(img.data.iter().map(|&v| T::lit(v as f64)));
        }
        Ok(Tensor::from_vec([images.len(), c, h, w], data))
    }

    pub(crate) fn encode_batch(&self, x: &Tensor<T>) -> (Tensor<T>, EncoderCache<T>) {
        self.encoder.forward(x)
    }

    pub fn encode(&self, image: &Image) -> Result<FeatureMap<T>> {
        let x = self.batch(&[image])?;
        let (data, _) = self.encode_batch(&x);
        Ok(FeatureMap {
            data,
            stride: STRIDE,
        })
    }

    /// Fuses a prototype with query features and decodes a full-resolution
    /// foreground probability map (evaluation mode).
    pub fn fuse_and_decode(
        &self,
        prototype: &Prototype<T>,
        query: &FeatureMap<T>,
    ) -> Result<ProbabilityMask> {
        if prototype.values.len() != query.dim() || query.dim() != self.config.feature_dim() {
            return Err(Error::DimensionMismatch(format!(
                "prototype has {} channels, query features {}, model {}",
                prototype.values.len(),
                query.dim(),
                self.config.feature_dim()
            )));
        }
        let (h, w) = (query.height(), query.width());
        let fused = fuse_item(
            self.config.fusion,
            &prototype.values,
            query.data.item(0),
            h * w,
        );
        let x = Tensor::from_vec([1, self.config.decoder_in_channels(), h, w], fused);
        let out = self.decoder.forward(&x, Mode::Eval).output;
        Ok(ProbabilityMask {
            height: out.h(),
            width: out.w(),
            data: out.data.iter().map(|v| v.as_f64() as f32).collect(),
        })
    }

    /// Reconstructs a clean image from a corrupted one (evaluation mode).
    pub fn denoise_forward(&self, corrupted: &Image) -> Result<Image> {
        let x = self.batch(&[corrupted])?;
        let (f, _) = self.encode_batch(&x);
        let out = self.denoise.forward(&f, Mode::Eval).output;
        Image::new(
            out.c(),
            out.h(),
            out.w(),
            out.data.iter().map(|v| v.as_f64() as f32).collect(),
        )
    }

    pub(crate) fn update_running(
        &mut self,
        decoder: &[Option<BatchStats<T>>],
        denoise: Option<&[Option<BatchStats<T>>]>,
    ) {
        self.decoder.update_running(decoder);
        if let Some(stats) = denoise {
            self.denoise.update_running(stats);
        }
    }
}
