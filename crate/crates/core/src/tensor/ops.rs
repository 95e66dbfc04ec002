//! Forward and backward kernels on flat row-major buffers.
//!
//! The tape calls into these; they know nothing about graph bookkeeping.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Resolved dimensions of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        const OP: &str = "conv2d";
        let [batch, in_channels, height, width] = *input else {
            return Err(Error::shape(OP, format!("input must be rank 4 (N,C,H,W), got {input:?}")));
        };
        let [out_channels, per_group, kernel_h, kernel_w] = *weight else {
            return Err(Error::shape(OP, format!("weight must be rank 4, got {weight:?}")));
        };
        if stride == 0 {
            return Err(Error::invalid(OP, "stride must be positive"));
        }
        if groups == 0 {
            return Err(Error::invalid(OP, "groups must be positive"));
        }
        if in_channels % groups != 0 {
            return Err(Error::shape(
                OP,
                format!("input channels C_in={in_channels} not divisible by groups={groups}"),
            ));
        }
        if out_channels % groups != 0 {
            return Err(Error::shape(
                OP,
                format!("output channels C_out={out_channels} not divisible by groups={groups}"),
            ));
        }
        if per_group != in_channels / groups {
            return Err(Error::shape(
                OP,
                format!(
                    "weight input-channel dim is {per_group}, expected C_in/groups = {}",
                    in_channels / groups
                ),
            ));
        }
        if height + 2 * padding < kernel_h {
            return Err(Error::shape(
                OP,
                format!("height H={height} with padding {padding} is smaller than kernel kH={kernel_h}"),
            ));
        }
        if width + 2 * padding < kernel_w {
            return Err(Error::shape(
                OP,
                format!("width W={width} with padding {padding} is smaller than kernel kW={kernel_w}"),
            ));
        }
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            groups,
            out_h: (height + 2 * padding - kernel_h) / stride + 1,
            out_w: (width + 2 * padding - kernel_w) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Rows of the unfolded patch matrix for one group.
    fn patch_len(&self) -> usize {
        self.in_per_group() * self.kernel_h * self.kernel_w
    }

    fn out_area(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds channels `[c0, c0+cg)` of one sample into a `(cg·kh·kw) × (oh·ow)` matrix.
fn im2col<T: Scalar>(g: &ConvGeometry, sample: &[T], c0: usize, cols: &mut [T]) {
    let (h, w, oh, ow) = (g.height, g.width, g.out_h, g.out_w);
    let pad = g.padding as isize;
    let mut row = 0;
    for c in c0..c0 + g.in_per_group() {
        let plane = &sample[c * h * w..(c + 1) * h * w];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        *out = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the sample.
fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], c0: usize, sample: &mut [T]) {
    let (h, w, oh, ow) = (g.height, g.width, g.out_h, g.out_w);
    let pad = g.padding as isize;
    let mut row = 0;
    for c in c0..c0 + g.in_per_group() {
        let plane = &mut sample[c * h * w..(c + 1) * h * w];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            plane[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (k, area, cog) = (g.patch_len(), g.out_area(), g.out_per_group());
    let sample_len = g.in_channels * g.height * g.width;
    let mut out = vec![T::zero(); g.batch * g.out_channels * area];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * area]
    };
    for n in 0..g.batch {
        let sample = &input[n * sample_len..(n + 1) * sample_len];
        for grp in 0..g.groups {
            let c0 = grp * g.in_per_group();
            let patches: &[T] = if g.is_pointwise() {
                &sample[c0 * area..(c0 + g.in_per_group()) * area]
            } else {
                im2col(g, sample, c0, &mut cols);
                &cols
            };
            let w = &weight[grp * cog * k..(grp + 1) * cog * k];
            let o0 = (n * g.out_channels + grp * cog) * area;
            let dst = &mut out[o0..o0 + cog * area];
            T::gemm(cog, k, area, T::one(), w, (k, 1), patches, (area, 1), T::zero(), dst, (area, 1));
        }
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                let o0 = (n * g.out_channels + co) * area;
                out[o0..o0 + area].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Returns `(d_input, d_weight)`; each is computed only when requested.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    d_out: &[T],
    want_input: bool,
    want_weight: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (k, area, cog) = (g.patch_len(), g.out_area(), g.out_per_group());
    let sample_len = g.in_channels * g.height * g.width;
    let mut d_input = want_input.then(|| vec![T::zero(); input.len()]);
    let mut d_weight = want_weight.then(|| vec![T::zero(); weight.len()]);
    let mut cols = vec![T::zero(); k * area];
    let mut d_cols = vec![T::zero(); k * area];
    for n in 0..g.batch {
        let sample = &input[n * sample_len..(n + 1) * sample_len];
        for grp in 0..g.groups {
            let c0 = grp * g.in_per_group();
            let o0 = (n * g.out_channels + grp * cog) * area;
            let dy = &d_out[o0..o0 + cog * area];
            let w = &weight[grp * cog * k..(grp + 1) * cog * k];
            if let Some(dw) = d_weight.as_mut() {
                let patches: &[T] = if g.is_pointwise() {
                    &sample[c0 * area..(c0 + g.in_per_group()) * area]
                } else {
                    im2col(g, sample, c0, &mut cols);
                    &cols
                };
                let dst = &mut dw[grp * cog * k..(grp + 1) * cog * k];
                T::gemm(cog, area, k, T::one(), dy, (area, 1), patches, (1, area), T::one(), dst, (k, 1));
            }
            if let Some(dx) = d_input.as_mut() {
                let dsample = &mut dx[n * sample_len..(n + 1) * sample_len];
                if g.is_pointwise() {
                    let dst = &mut dsample[c0 * area..(c0 + g.in_per_group()) * area];
                    T::gemm(k, cog, area, T::one(), w, (1, k), dy, (area, 1), T::one(), dst, (area, 1));
                } else {
                    T::gemm(k, cog, area, T::one(), w, (1, k), dy, (area, 1), T::zero(), &mut d_cols, (area, 1));
                    col2im(g, &d_cols, c0, dsample);
                }
            }
        }
    }
    (d_input, d_weight)
}

/// Per-channel sums over N,H,W of an (N,C,area) buffer.
pub(crate) fn channel_sums<T: Scalar>(data: &[T], n: usize, c: usize, area: usize) -> Vec<T> {
    let mut sums = vec![T::zero(); c];
    for b in 0..n {
        for (ch, s) in sums.iter_mut().enumerate() {
            let o = (b * c + ch) * area;
            *s += data[o..o + area].iter().copied().sum::<T>();
        }
    }
    sums
}

/// Batch-normalization output plus what backward needs.
pub(crate) struct BatchNormForward<T> {
    pub output: Vec<T>,
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance, used for the running estimate.
    pub batch_var: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_forward<T: Scalar>(
    shape: [usize; 4],
    input: &[T],
    gamma: &[T],
    beta: &[T],
    stats: Option<(&[T], &[T])>,
    eps: T,
) -> BatchNormForward<T> {
    let [n, c, h, w] = shape;
    let area = h * w;
    let count = T::from_usize(n * area).expect("count");
    let (mean, var_biased, var_unbiased) = match stats {
        Some((m, v)) => (m.to_vec(), v.to_vec(), v.to_vec()),
        None => {
            let mean: Vec<T> = channel_sums(input, n, c, area)
                .into_iter()
                .map(|s| s / count)
                .collect();
            let mut sq = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let o = (b * c + ch) * area;
                    let m = mean[ch];
                    sq[ch] += input[o..o + area].iter().map(|&x| (x - m) * (x - m)).sum::<T>();
                }
            }
            let biased = sq.iter().map(|&s| s / count).collect();
            let denom = T::from_usize((n * area).saturating_sub(1).max(1)).expect("count");
            let unbiased = sq.iter().map(|&s| s / denom).collect();
            (mean, biased, unbiased)
        }
    };
    let inv_std: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut normalized = vec![T::zero(); input.len()];
    let mut output = vec![T::zero(); input.len()];
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * area;
            let (m, s, gm, bt) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for i in o..o + area {
                let xh = (input[i] - m) * s;
                normalized[i] = xh;
                output[i] = gm * xh + bt;
            }
        }
    }
    BatchNormForward {
        output,
        normalized,
        inv_std,
        batch_mean: mean,
        batch_var: var_unbiased,
    }
}

/// Gradients `(d_input, d_gamma, d_beta)`. `batch_stats` selects the
/// training-mode formula where mean and variance depend on the input.
pub(crate) fn batchnorm_backward<T: Scalar>(
    shape: [usize; 4],
    d_out: &[T],
    normalized: &[T],
    inv_std: &[T],
    gamma: &[T],
    batch_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = shape;
    let area = h * w;
    let count = T::from_usize(n * area).expect("count");
    let d_beta = channel_sums(d_out, n, c, area);
    let mut d_gamma = vec![T::zero(); c];
    for b in 0..n {
        for (ch, g) in d_gamma.iter_mut().enumerate() {
            let o = (b * c + ch) * area;
            *g += (o..o + area).map(|i| d_out[i] * normalized[i]).sum::<T>();
        }
    }
    let mut d_input = vec![T::zero(); d_out.len()];
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * area;
            let scale = gamma[ch] * inv_std[ch];
            if batch_stats {
                let mean_dy = d_beta[ch] / count;
                let mean_dy_xhat = d_gamma[ch] / count;
                for i in o..o + area {
                    d_input[i] = scale * (d_out[i] - mean_dy - normalized[i] * mean_dy_xhat);
                }
            } else {
                for i in o..o + area {
                    d_input[i] = scale * d_out[i];
                }
            }
        }
    }
    (d_input, d_gamma, d_beta)
}

/// Pooling flavours.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
    GlobalAvg,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeometry {
    pub fn new(shape: &[usize], kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        const OP: &str = "pool2d";
        let [batch, channels, height, width] = *shape else {
            return Err(Error::shape(OP, format!("input must be rank 4, got {shape:?}")));
        };
        if kernel == 0 || stride == 0 {
            return Err(Error::invalid(OP, "kernel and stride must be positive"));
        }
        if 2 * padding > kernel && padding > 0 {
            return Err(Error::invalid(OP, format!("padding {padding} too large for kernel {kernel}")));
        }
        if kernel > height + 2 * padding || kernel > width + 2 * padding {
            return Err(Error::shape(
                OP,
                format!("kernel {kernel} exceeds spatial extent {height}x{width}"),
            ));
        }
        Ok(Self {
            batch,
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_h: (height + 2 * padding - kernel) / stride + 1,
            out_w: (width + 2 * padding - kernel) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.channels, self.out_h, self.out_w]
    }
}

/// Max pooling; also returns the flat input index chosen for every output.
pub(crate) fn max_pool_forward<T: Scalar>(g: &PoolGeometry, input: &[T]) -> (Vec<T>, Vec<usize>) {
    let planes = g.batch * g.channels;
    let (h, w) = (g.height, g.width);
    let mut out = Vec::with_capacity(planes * g.out_h * g.out_w);
    let mut arg = Vec::with_capacity(out.capacity());
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if best_i == usize::MAX || input[i] > best {
                            best = input[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

pub(crate) fn avg_pool_forward<T: Scalar>(g: &PoolGeometry, input: &[T]) -> Vec<T> {
    let planes = g.batch * g.channels;
    let (h, w) = (g.height, g.width);
    let norm = T::from_usize(g.kernel * g.kernel).expect("kernel");
    let mut out = Vec::with_capacity(planes * g.out_h * g.out_w);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = T::zero();
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            acc += input[base + iy as usize * w + ix as usize];
                        }
                    }
                }
                out.push(acc / norm);
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Scalar>(g: &PoolGeometry, d_out: &[T]) -> Vec<T> {
    let planes = g.batch * g.channels;
    let (h, w) = (g.height, g.width);
    let norm = T::from_usize(g.kernel * g.kernel).expect("kernel");
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let d = d_out[(p * g.out_h + oy) * g.out_w + ox] / norm;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + iy as usize * w + ix as usize] += d;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Row-wise numerically stable softmax of an (rows × classes) buffer.
pub(crate) fn softmax_rows<T: Scalar>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&z| (z - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    out
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
