//! Layers with explicit forward and backward passes.
//!
//! Layers never mutate themselves during a forward pass. Gradients are
//! accumulated into a zero-initialised layer of the same shape, and batch
//! norm returns its batch statistics so the caller decides when to fold them
//! into the running averages.

use rand::Rng;

use super::tensor::{matmul, Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch-norm uses batch statistics.
    Train,
    /// Batch-norm uses its frozen running statistics.
    Eval,
}

/// Square "same" convolution with optional dilation.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub dilation: usize,
    /// `out_ch × (in_ch · kernel²)`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Float> Conv2d<T> {
    /// He-uniform weights, `U(-b, b)` with `b = sqrt(6 / fan_in)`; zero bias.
    pub fn init(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = (0..out_ch * fan_in)
            .map(|_| T::lit(rng.random_range(-bound..bound)))
            .collect();
        Self {
            in_ch,
            out_ch,
            kernel,
            dilation,
            weight,
            bias: vec![T::zero(); out_ch],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: vec![T::zero(); self.weight.len()],
            bias: vec![T::zero(); self.bias.len()],
            ..*self
        }
    }

    fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c(), self.in_ch, "conv input channels");
        let (n, h, w) = (x.n(), x.h(), x.w());
        let hw = h * w;
        let mut y = Tensor::zeros([n, self.out_ch, h, w]);
        let mut cols = Vec::new();
        for i in 0..n {
            let src = if self.kernel == 1 {
                x.item(i)
            } else {
                im2col(x.item(i), self, h, w, &mut cols);
                &cols
            };
            let out = y.item_mut(i);
            for (o, b) in self.bias.iter().enumerate() {
                out[o * hw..(o + 1) * hw].fill(*b);
            }
            matmul(
                &self.weight,
                false,
                src,
                false,
                out,
                self.out_ch,
                self.patch_len(),
                hw,
                true,
            );
        }
        y
    }

    /// Accumulates parameter gradients into `grad`; returns the input
    /// gradient when `need_dx`.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grad: &mut Conv2d<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let (n, h, w) = (x.n(), x.h(), x.w());
        let hw = h * w;
        let k = self.patch_len();
        let mut dx = need_dx.then(|| Tensor::zeros(x.shape));
        let mut cols = Vec::new();
        let mut dcols = vec![T::zero(); k * hw];
        for i in 0..n {
            let dyi = dy.item(i);
            for o in 0..self.out_ch {
                grad.bias[o] += dyi[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
            }
            let src = if self.kernel == 1 {
                x.item(i)
            } else {
                im2col(x.item(i), self, h, w, &mut cols);
                &cols
            };
            matmul(
                dyi,
                false,
                src,
                true,
                &mut grad.weight,
                self.out_ch,
                hw,
                k,
                true,
            );
            if let Some(dx) = dx.as_mut() {
                if self.kernel == 1 {
                    matmul(
                        &self.weight,
                        true,
                        dyi,
                        false,
                        dx.item_mut(i),
                        k,
                        self.out_ch,
                        hw,
                        false,
                    );
                } else {
                    matmul(
                        &self.weight,
                        true,
                        dyi,
                        false,
                        &mut dcols,
                        k,
                        self.out_ch,
                        hw,
                        false,
                    );
                    col2im(&dcols, self, h, w, dx.item_mut(i));
                }
            }
        }
        dx
    }
}

fn im2col<T: Float>(x: &[T], conv: &Conv2d<T>, h: usize, w: usize, cols: &mut Vec<T>) {
    let (k, d, pad) = (conv.kernel, conv.dilation, conv.padding() as isize);
    cols.clear();
    cols.resize(conv.patch_len() * h * w, T::zero());
    for c in 0..conv.in_ch {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * h * w..(row + 1) * h * w];
                let oy_shift = (ky * d) as isize - pad;
                let ox_shift = (kx * d) as isize - pad;
                for oy in 0..h {
                    let iy = oy as isize + oy_shift;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * w..(oy + 1) * w];
                    let lo = (-ox_shift).max(0) as usize;
                    let hi = (w as isize - ox_shift).min(w as isize).max(0) as usize;
                    for ox in lo..hi {
                        dst_row[ox] = src_row[(ox as isize + ox_shift) as usize];
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(cols: &[T], conv: &Conv2d<T>, h: usize, w: usize, dx: &mut [T]) {
    let (k, d, pad) = (conv.kernel, conv.dilation, conv.padding() as isize);
    for c in 0..conv.in_ch {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * h * w..(row + 1) * h * w];
                let oy_shift = (ky * d) as isize - pad;
                let ox_shift = (kx * d) as isize - pad;
                for oy in 0..h {
                    let iy = oy as isize + oy_shift;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let lo = (-ox_shift).max(0) as usize;
                    let hi = (w as isize - ox_shift).min(w as isize).max(0) as usize;
                    for ox in lo..hi {
                        plane[iy as usize * w + (ox as isize + ox_shift) as usize] +=
                            src[oy * w + ox];
                    }
                }
            }
        }
    }
}

/// Batch statistics of one batch-norm forward pass in training mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance (the one used for normalisation).
    pub var: Vec<T>,
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    pub stats: Option<BatchStats<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl<T: Float> BatchNorm2d<T> {
    pub fn new(ch: usize) -> Self {
        Self {
            gamma: vec![T::one(); ch],
            beta: vec![T::zero(); ch],
            running_mean: vec![T::zero(); ch],
            running_var: vec![T::one(); ch],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let ch = self.gamma.len();
        Self {
            gamma: vec![T::zero(); ch],
            beta: vec![T::zero(); ch],
            running_mean: vec![T::zero(); ch],
            running_var: vec![T::zero(); ch],
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, BatchNormCache<T>) {
        let (n, ch, hw) = (x.n(), x.c(), x.h() * x.w());
        let count = n * hw;
        let eps = T::lit(BN_EPS);
        let (mean, var, stats) = match mode {
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone(), None),
            Mode::Train => {
                let inv_count = T::one() / T::lit(count as f64);
                let mut mean = vec![T::zero(); ch];
                let mut var = vec![T::zero(); ch];
                for c in 0..ch {
                    let mut s = T::zero();
                    for i in 0..n {
                        s += x.item(i)[c * hw..(c + 1) * hw].iter().copied().sum::<T>();
                    }
                    mean[c] = s * inv_count;
                    let mut v = T::zero();
                    for i in 0..n {
                        for &val in &x.item(i)[c * hw..(c + 1) * hw] {
                            let d = val - mean[c];
                            v += d * d;
                        }
                    }
                    var[c] = v * inv_count;
                }
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape);
        let mut y = Tensor::zeros(x.shape);
        for i in 0..n {
            let (xi, xh, yi) = (
                x.item(i),
                xhat.item_mut(i),
                &mut y.data[i * ch * hw..(i + 1) * ch * hw],
            );
            for c in 0..ch {
                for p in c * hw..(c + 1) * hw {
                    let v = (xi[p] - mean[c]) * inv_std[c];
                    xh[p] = v;
                    yi[p] = self.gamma[c] * v + self.beta[c];
                }
            }
        }
        (
            y,
            BatchNormCache {
                xhat,
                inv_std,
                stats,
            },
        )
    }

    /// Backward pass through the training-mode normalisation.
    pub fn backward(
        &self,
        cache: &BatchNormCache<T>,
        dy: &Tensor<T>,
        grad: &mut Self,
    ) -> Tensor<T> {
        let (n, ch, hw) = (dy.n(), dy.c(), dy.h() * dy.w());
        let m = T::lit((n * hw) as f64);
        let mut dx = Tensor::zeros(dy.shape);
        for c in 0..ch {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for i in 0..n {
                let (dyi, xh) = (dy.item(i), cache.xhat.item(i));
                for p in c * hw..(c + 1) * hw {
                    sum_dy += dyi[p];
                    sum_dy_xhat += dyi[p] * xh[p];
                }
            }
            grad.gamma[c] += sum_dy_xhat;
            grad.beta[c] += sum_dy;
            let g = self.gamma[c];
            let frozen = cache.stats.is_none();
            for i in 0..n {
                let (dyi, xh) = (dy.item(i), cache.xhat.item(i));
                let dxi = &mut dx.data[i * ch * hw..(i + 1) * ch * hw];
                for p in c * hw..(c + 1) * hw {
                    dxi[p] = if frozen {
                        g * cache.inv_std[c] * dyi[p]
                    } else {
                        g * cache.inv_std[c] / m * (m * dyi[p] - sum_dy - xh[p] * sum_dy_xhat)
                    };
                }
            }
        }
        dx
    }

    /// Folds batch statistics into the running averages (unbiased variance).
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let momentum = T::lit(BN_MOMENTUM);
        let keep = T::one() - momentum;
        let correction = if stats.count > 1 {
            T::lit(stats.count as f64 / (stats.count - 1) as f64)
        } else {
            T::one()
        };
        for c in 0..self.gamma.len() {
            self.running_mean[c] = keep * self.running_mean[c] + momentum * stats.mean[c];
            self.running_var[c] = keep * self.running_var[c] + momentum * stats.var[c] * correction;
        }
    }
}

pub fn relu<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given its output.
pub fn relu_backward<T: Float>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: dy.shape,
        data: y
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
            .collect(),
    }
}

pub fn sigmoid<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Gradient of the logistic sigmoid given its output.
pub fn sigmoid_backward<T: Float>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: dy.shape,
        data: y
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&o, &g)| g * o * (T::one() - o))
            .collect(),
    }
}

/// 2×2 max pooling with stride 2. Returns the flat argmax index per output.
pub fn max_pool2<T: Float>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (n, c, h, w) = (x.n(), x.c(), x.h(), x.w());
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros([n, c, oh, ow]);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let src = &x.data[plane * h * w..(plane + 1) * h * w];
        let dst = &mut y.data[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * oy + dy) * w + 2 * ox + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                dst[oy * ow + ox] = src[best];
                arg.push((plane * h * w + best) as u32);
            }
        }
    }
    (y, arg)
}

pub fn max_pool2_backward<T: Float>(
    in_shape: [usize; 4],
    arg: &[u32],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(in_shape);
    for (&a, &g) in arg.iter().zip(&dy.data) {
        dx.data[a as usize] += g;
    }
    dx
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (x.n(), x.c(), x.h(), x.w());
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = Tensor::zeros([n, c, oh, ow]);
    for plane in 0..n * c {
        let src = &x.data[plane * h * w..(plane + 1) * h * w];
        let dst = &mut y.data[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[oy * ow + ox] = src[(oy / 2) * w + ox / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Float>(dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, oh, ow) = (dy.n(), dy.c(), dy.h(), dy.w());
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = Tensor::zeros([n, c, h, w]);
    for plane in 0..n * c {
        let src = &dy.data[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut dx.data[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / 2) * w + ox / 2] += src[oy * ow + ox];
            }
        }
    }
    dx
}
