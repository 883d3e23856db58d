//! Forward and backward kernels for the fixed operator set.
//!
//! Layout is `[batch, channel, depth, height, width]` for 3-D data and
//! `[batch, channel, height, width]` for 2-D data. Convolutions are lowered
//! to im2col + GEMM; the column buffer is rebuilt from the recorded input in
//! the backward pass instead of being cached.

use alloc::vec;
use alloc::vec::Vec;

use crate::compression::output_dim;
use crate::error::{Error, Result};
use crate::tensor::GradTensor;

const AXES: [&str; 3] = ["depth", "height", "width"];

/// Stride and zero padding for the `(depth, height, width)` axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dConfig {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dConfig {
    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self { stride, padding }
    }
}

impl Default for Conv3dConfig {
    /// Unit stride, no padding.
    fn default() -> Self {
        Self::new([1; 3], [0; 3])
    }
}

/// Stride and zero padding for the `(height, width)` axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dConfig {
    pub stride: [usize; 2],
    pub padding: [usize; 2],
}

impl Conv2dConfig {
    pub fn new(stride: [usize; 2], padding: [usize; 2]) -> Self {
        Self { stride, padding }
    }
}

impl Default for Conv2dConfig {
    fn default() -> Self {
        Self::new([1; 2], [0; 2])
    }
}

/// Resolved convolution geometry (2-D convolutions use depth = kernel depth = 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    pub fn resolve(
        input_shape: &[usize],
        weight_shape: &[usize],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Self> {
        debug_assert_eq!(input_shape.len(), 5);
        debug_assert_eq!(weight_shape.len(), 5);
        if input_shape[1] != weight_shape[1] {
            return Err(Error::ShapeMismatch { axis: "channels", expected: weight_shape[1], found: input_shape[1] });
        }
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = output_dim(AXES[a], input_shape[2 + a], weight_shape[2 + a], padding[a], stride[a])?;
        }
        Ok(Self {
            batch: input_shape[0],
            in_channels: input_shape[1],
            out_channels: weight_shape[0],
            input: [input_shape[2], input_shape[3], input_shape[4]],
            kernel: [weight_shape[2], weight_shape[3], weight_shape[4]],
            stride,
            padding,
            output,
        })
    }

    /// Rows of the column matrix: `C_in * kd * kh * kw`.
    #[inline]
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    /// Columns of the column matrix: `D_o * H_o * W_o`.
    #[inline]
    pub fn out_positions(&self) -> usize {
        self.output.iter().product()
    }

    #[inline]
    pub fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    pub fn output_shape(&self) -> [usize; 5] {
        [self.batch, self.out_channels, self.output[0], self.output[1], self.output[2]]
    }

    /// Valid `(output index, input index)` pairs per kernel offset on one axis;
    /// taps landing in the padding are left out.
    fn axis_taps(&self, axis: usize) -> Vec<Vec<(usize, usize)>> {
        let pad = self.padding[axis];
        (0..self.kernel[axis])
            .map(|k| {
                (0..self.output[axis])
                    .filter_map(|o| {
                        let pos = o * self.stride[axis] + k;
                        (pos >= pad && pos - pad < self.input[axis]).then(|| (o, pos - pad))
                    })
                    .collect()
            })
            .collect()
    }

    /// Visits every (row, column, input offset) triple of the im2col matrix for one
    /// sample whose source is inside the unpadded input.
    #[inline]
    pub(crate) fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [kd, kh, kw] = self.kernel;
        let [_, oh, ow] = self.output;
        let [_, ih, iw] = self.input;
        let in_vol = self.in_volume();
        let (td, th, tw) = (self.axis_taps(0), self.axis_taps(1), self.axis_taps(2));
        for c in 0..self.in_channels {
            for (a, taps_d) in td.iter().enumerate() {
                for (b, taps_h) in th.iter().enumerate() {
                    for (e, taps_w) in tw.iter().enumerate() {
                        let row = ((c * kd + a) * kh + b) * kw + e;
                        for &(z, sz) in taps_d {
                            for &(y, sy) in taps_h {
                                let base = c * in_vol + (sz * ih + sy) * iw;
                                let col = (z * oh + y) * ow;
                                for &(x, sx) in taps_w {
                                    f(row, col + x, base + sx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Column matrix `[patch_len, batch · positions]` of the whole batch; sample `n`
    /// occupies columns `n·P .. (n+1)·P`.
    fn im2col_batch(&self, input: &[f64]) -> Vec<f64> {
        let p = self.out_positions();
        let width = self.batch * p;
        let in_len = self.in_channels * self.in_volume();
        let mut col = vec![0.0; self.patch_len() * width];
        for n in 0..self.batch {
            let sample = &input[n * in_len..(n + 1) * in_len];
            self.for_each_tap(|row, c, src| col[row * width + n * p + c] = sample[src]);
        }
        col
    }

    fn col2im_batch(&self, col: &[f64], grad: &mut [f64]) {
        let p = self.out_positions();
        let width = self.batch * p;
        let in_len = self.in_channels * self.in_volume();
        for n in 0..self.batch {
            let sample = &mut grad[n * in_len..(n + 1) * in_len];
            self.for_each_tap(|row, c, src| sample[src] += col[row * width + n * p + c]);
        }
    }
}

/// `c[m×n] = alpha * a[m×k] · b[k×n] + beta * c`, all row-major unless strides say otherwise.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    // SAFETY: the caller passes slices covering every strided index; checked in debug.
    debug_assert!(a.len() > (m - 1) * rsa as usize + (k - 1) * csa as usize);
    debug_assert!(b.len() > (k - 1) * rsb as usize + (n - 1) * csb as usize);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Recorded state for [`conv3d_backward`].
#[derive(Debug, Clone)]
pub struct ConvContext {
    geometry: ConvGeometry,
    input: GradTensor,
    weights: GradTensor,
}

impl ConvContext {
    pub fn geometry(&self) -> &ConvGeometry {
        &self.geometry
    }
}

/// Gradients of a convolution (or linear) layer.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub input: GradTensor,
    pub weights: GradTensor,
    pub bias: GradTensor,
}

fn check_bias(bias: &GradTensor, out_channels: usize) -> Result<()> {
    if bias.len() != out_channels {
        return Err(Error::ShapeMismatch { axis: "bias", expected: out_channels, found: bias.len() });
    }
    Ok(())
}

fn conv_forward_impl(geometry: &ConvGeometry, input: &[f64], weights: &[f64], bias: &[f64]) -> Vec<f64> {
    let k = geometry.patch_len();
    let p = geometry.out_positions();
    let co = geometry.out_channels;
    let width = geometry.batch * p;
    let col = geometry.im2col_batch(input);
    let mut prod = vec![0.0; co * width];
    gemm(co, k, width, weights, (k as isize, 1), &col, (width as isize, 1), 0.0, &mut prod);
    // [C_o, N·P] -> [N, C_o, P]
    let mut out = vec![0.0; geometry.batch * co * p];
    for (c, row) in prod.chunks_exact(width.max(1)).enumerate() {
        for n in 0..geometry.batch {
            let dst = &mut out[(n * co + c) * p..(n * co + c + 1) * p];
            for (d, s) in dst.iter_mut().zip(&row[n * p..(n + 1) * p]) {
                *d = s + bias[c];
            }
        }
    }
    out
}

/// 3-D convolution with bias. Shapes: input `[N, C_i, D, H, W]`, weights
/// `[C_o, C_i, k_d, k_h, k_w]`, bias `[C_o]`.
pub fn conv3d_forward(
    input: &GradTensor,
    weights: &GradTensor,
    bias: &GradTensor,
    config: Conv3dConfig,
) -> Result<GradTensor> {
    conv3d_record(input, weights, bias, config).map(|(out, _)| out)
}

/// [`conv3d_forward`] that also returns the context needed for the backward pass.
pub fn conv3d_record(
    input: &GradTensor,
    weights: &GradTensor,
    bias: &GradTensor,
    config: Conv3dConfig,
) -> Result<(GradTensor, ConvContext)> {
    input.expect_rank("conv3d input", 5)?;
    weights.expect_rank("conv3d weights", 5)?;
    let geometry = ConvGeometry::resolve(input.shape(), weights.shape(), config.stride, config.padding)?;
    check_bias(bias, geometry.out_channels)?;
    let out = conv_forward_impl(&geometry, input.values(), weights.values(), bias.values());
    let out = GradTensor::from_vec(&geometry.output_shape(), out)?;
    out.debug_check_finite("conv3d");
    let ctx = ConvContext { geometry, input: input.clone(), weights: weights.clone() };
    Ok((out, ctx))
}

fn conv_backward_impl(ctx: &ConvContext, upstream: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let g = &ctx.geometry;
    let k = g.patch_len();
    let p = g.out_positions();
    let co = g.out_channels;
    let width = g.batch * p;
    // [N, C_o, P] -> [C_o, N·P]
    let mut up = vec![0.0; co * width];
    let mut d_bias = vec![0.0; co];
    for n in 0..g.batch {
        for c in 0..co {
            let src = &upstream[(n * co + c) * p..(n * co + c + 1) * p];
            d_bias[c] += src.iter().sum::<f64>();
            up[c * width + n * p..c * width + (n + 1) * p].copy_from_slice(src);
        }
    }
    let col = g.im2col_batch(ctx.input.values());
    let mut d_weights = vec![0.0; co * k];
    // dW = up · colᵀ
    gemm(co, width, k, &up, (width as isize, 1), &col, (1, width as isize), 0.0, &mut d_weights);
    drop(col);
    // dcol = Wᵀ · up
    let mut d_col = vec![0.0; k * width];
    gemm(k, co, width, ctx.weights.values(), (1, k as isize), &up, (width as isize, 1), 0.0, &mut d_col);
    let mut d_input = vec![0.0; ctx.input.len()];
    g.col2im_batch(&d_col, &mut d_input);
    (d_input, d_weights, d_bias)
}

fn check_upstream(upstream: &GradTensor, expected: &[usize]) -> Result<()> {
    if upstream.shape() != expected {
        return Err(Error::ShapeMismatch {
            axis: "upstream",
            expected: expected.iter().product(),
            found: upstream.len(),
        });
    }
    Ok(())
}

/// Gradients of [`conv3d_forward`] with respect to input, weights and bias.
pub fn conv3d_backward(ctx: &ConvContext, upstream: &GradTensor) -> Result<LayerGrads> {
    check_upstream(upstream, &ctx.geometry.output_shape())?;
    let (di, dw, db) = conv_backward_impl(ctx, upstream.values());
    Ok(LayerGrads {
        input: GradTensor::from_vec(ctx.input.shape(), di)?,
        weights: GradTensor::from_vec(ctx.weights.shape(), dw)?,
        bias: GradTensor::from_vec(&[ctx.geometry.out_channels], db)?,
    })
}

/// Context for [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct Conv2dContext {
    inner: ConvContext,
    input_shape: [usize; 4],
    weight_shape: [usize; 4],
}

fn lift4(shape: &[usize]) -> [usize; 5] {
    [shape[0], shape[1], 1, shape[2], shape[3]]
}

/// 2-D convolution with bias. Shapes: input `[N, C_i, H, W]`, weights `[C_o, C_i, k_h, k_w]`.
pub fn conv2d_forward(
    input: &GradTensor,
    weights: &GradTensor,
    bias: &GradTensor,
    config: Conv2dConfig,
) -> Result<GradTensor> {
    conv2d_record(input, weights, bias, config).map(|(out, _)| out)
}

pub fn conv2d_record(
    input: &GradTensor,
    weights: &GradTensor,
    bias: &GradTensor,
    config: Conv2dConfig,
) -> Result<(GradTensor, Conv2dContext)> {
    input.expect_rank("conv2d input", 4)?;
    weights.expect_rank("conv2d weights", 4)?;
    let in5 = input.clone().reshape(&lift4(input.shape()))?;
    let w5 = weights.clone().reshape(&lift4(weights.shape()))?;
    let cfg = Conv3dConfig::new([1, config.stride[0], config.stride[1]], [0, config.padding[0], config.padding[1]]);
    let (out, inner) = conv3d_record(&in5, &w5, bias, cfg)?;
    let [n, c, _, h, w] = inner.geometry.output_shape();
    let out = out.reshape(&[n, c, h, w])?;
    let mut input_shape = [0; 4];
    input_shape.copy_from_slice(input.shape());
    let mut weight_shape = [0; 4];
    weight_shape.copy_from_slice(weights.shape());
    Ok((out, Conv2dContext { inner, input_shape, weight_shape }))
}

pub fn conv2d_backward(ctx: &Conv2dContext, upstream: &GradTensor) -> Result<LayerGrads> {
    let [n, c, _, h, w] = ctx.inner.geometry.output_shape();
    check_upstream(upstream, &[n, c, h, w])?;
    let (di, dw, db) = conv_backward_impl(&ctx.inner, upstream.values());
    Ok(LayerGrads {
        input: GradTensor::from_vec(&ctx.input_shape, di)?,
        weights: GradTensor::from_vec(&ctx.weight_shape, dw)?,
        bias: GradTensor::from_vec(&[c], db)?,
    })
}

pub fn relu(x: &GradTensor) -> GradTensor {
    let mut out = x.clone();
    out.zero_grad();
    for v in out.values_mut() {
        *v = v.max(0.0);
    }
    out
}

/// Gradient of [`relu`]; the subgradient at 0 is taken as 0.
pub fn relu_backward(x: &GradTensor, upstream: &GradTensor) -> Result<GradTensor> {
    check_upstream(upstream, x.shape())?;
    let g = x.values().iter().zip(upstream.values()).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
    GradTensor::from_vec(x.shape(), g)
}

/// Global average pooling over every axis after `[N, C]`.
pub fn gap(x: &GradTensor) -> Result<GradTensor> {
    if x.rank() < 2 {
        return Err(Error::Rank { op: "gap", expected: 3, found: x.rank() });
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let spatial: usize = x.shape()[2..].iter().product();
    if spatial == 0 {
        return Err(Error::Empty("gap spatial extent"));
    }
    let out = x.values().chunks_exact(spatial).map(|s| s.iter().sum::<f64>() / spatial as f64).collect();
    GradTensor::from_vec(&[n, c], out)
}

pub fn gap_backward(input_shape: &[usize], upstream: &GradTensor) -> Result<GradTensor> {
    check_upstream(upstream, &input_shape[..2])?;
    let spatial: usize = input_shape[2..].iter().product();
    let scale = 1.0 / spatial as f64;
    let mut out = Vec::with_capacity(upstream.len() * spatial);
    for &g in upstream.values() {
        out.extend(core::iter::repeat_n(g * scale, spatial));
    }
    GradTensor::from_vec(input_shape, out)
}

/// Context for [`linear_backward`].
#[derive(Debug, Clone)]
pub struct LinearContext {
    input: GradTensor,
    weights: GradTensor,
}

/// `y = x · Wᵀ + b` with `x: [N, I]`, `W: [O, I]`, `b: [O]`.
pub fn linear(x: &GradTensor, weights: &GradTensor, bias: &GradTensor) -> Result<GradTensor> {
    linear_record(x, weights, bias).map(|(y, _)| y)
}

pub fn linear_record(x: &GradTensor, weights: &GradTensor, bias: &GradTensor) -> Result<(GradTensor, LinearContext)> {
    x.expect_rank("linear input", 2)?;
    weights.expect_rank("linear weights", 2)?;
    let (n, i) = (x.shape()[0], x.shape()[1]);
    let o = weights.shape()[0];
    if weights.shape()[1] != i {
        return Err(Error::ShapeMismatch { axis: "features", expected: weights.shape()[1], found: i });
    }
    check_bias(bias, o)?;
    let mut y = Vec::with_capacity(n * o);
    for _ in 0..n {
        y.extend_from_slice(bias.values());
    }
    gemm(n, i, o, x.values(), (i as isize, 1), weights.values(), (1, i as isize), 1.0, &mut y);
    let y = GradTensor::from_vec(&[n, o], y)?;
    y.debug_check_finite("linear");
    Ok((y, LinearContext { input: x.clone(), weights: weights.clone() }))
}

pub fn linear_backward(ctx: &LinearContext, upstream: &GradTensor) -> Result<LayerGrads> {
    let (n, i) = (ctx.input.shape()[0], ctx.input.shape()[1]);
    let o = ctx.weights.shape()[0];
    check_upstream(upstream, &[n, o])?;
    let g = upstream.values();
    let mut dx = vec![0.0; n * i];
    gemm(n, o, i, g, (o as isize, 1), ctx.weights.values(), (i as isize, 1), 0.0, &mut dx);
    let mut dw = vec![0.0; o * i];
    gemm(o, n, i, g, (1, o as isize), ctx.input.values(), (i as isize, 1), 0.0, &mut dw);
    let mut db = vec![0.0; o];
    for row in g.chunks_exact(o) {
        for (d, v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    Ok(LayerGrads {
        input: GradTensor::from_vec(&[n, i], dx)?,
        weights: GradTensor::from_vec(&[o, i], dw)?,
        bias: GradTensor::from_vec(&[o], db)?,
    })
}

/// Mean softmax cross-entropy over the batch and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &GradTensor, labels: &[usize]) -> Result<(f64, GradTensor)> {
    logits.expect_rank("softmax_cross_entropy", 2)?;
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::ShapeMismatch { axis: "batch", expected: n, found: labels.len() });
    }
    if n == 0 {
        return Err(Error::Empty("softmax_cross_entropy batch"));
    }
    let mut grad = vec![0.0; n * k];
    let mut loss = 0.0;
    for ((row, g), &label) in logits.values().chunks_exact(k).zip(grad.chunks_exact_mut(k)).zip(labels) {
        if label >= k {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (gi, &z) in g.iter_mut().zip(row) {
            *gi = libm::exp(z - max);
            sum += *gi;
        }
        loss += libm::log(sum) + max - row[label];
        for gi in g.iter_mut() {
            *gi /= sum * n as f64;
        }
        g[label] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, GradTensor::from_vec(&[n, k], grad)?))
}

/// Row-wise argmax.
pub fn argmax_rows(logits: &GradTensor) -> Vec<usize> {
    let k = logits.shape().last().copied().unwrap_or(1).max(1);
    logits
        .values()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
