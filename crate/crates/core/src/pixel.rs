//! Behavioral model of the in-pixel analog front end, least-squares fitting of
//! the element-wise transfer function, and the convolution that uses it in
//! place of multiplication.
//!
//! The behavioral model `v_sat · tanh(gamma · w · x · (1 + alpha · x))` is a
//! swappable stand-in for circuit-simulation data: it saturates, is odd in the
//! weight, and has a conductance that grows with the photodiode input.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops::{Conv3dConfig, ConvGeometry, LayerGrads};
use crate::tensor::GradTensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelBehavioralModel {
    /// Output saturation level in volts.
    pub v_sat: f64,
    /// Small-signal gain per unit `w · x`.
    pub gamma: f64,
    /// Input-dependent conductance growth.
    pub alpha: f64,
    /// Standard deviation of additive sample noise.
    pub noise_sigma: f64,
}

impl Default for PixelBehavioralModel {
    fn default() -> Self {
        Self { v_sat: 1.0, gamma: 1.5, alpha: 0.2, noise_sigma: 0.0 }
    }
}

impl PixelBehavioralModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_sat > 0.0 && self.gamma > 0.0 && self.alpha >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "pixel model needs v_sat > 0, gamma > 0, alpha >= 0, noise_sigma >= 0: {self:?}"
            )));
        }
        Ok(())
    }

    /// Noiseless response.
    #[inline]
    pub fn ideal_response(&self, w: f64, x: f64) -> f64 {
        self.v_sat * libm::tanh(self.gamma * w * x * (1.0 + self.alpha * x))
    }
}

/// Pixel output voltage for weight `w` and photodiode input `x >= 0`.
/// The noise draw is a pure function of `seed`.
pub fn simulate_pixel_response(model: &PixelBehavioralModel, w: f64, x: f64, seed: u64) -> Result<f64> {
    if x < 0.0 {
        return Err(Error::NegativeInput(x));
    }
    let v = model.ideal_response(w, x);
    if model.noise_sigma == 0.0 {
        return Ok(v);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(v + gaussian(&mut rng, model.noise_sigma))
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    // sigma is validated nonnegative and finite by callers
    Normal::new(0.0, sigma).map(|n| n.sample(rng)).unwrap_or(0.0)
}

/// One `(weight, input, voltage)` observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferSample {
    pub w: f64,
    pub x: f64,
    pub v: f64,
}

/// Samples the behavioral model on a uniform `n_w × n_x` grid spanning `domain`.
pub fn sample_grid(
    model: &PixelBehavioralModel,
    domain: FitDomain,
    n_w: usize,
    n_x: usize,
    seed: u64,
) -> Result<Vec<TransferSample>> {
    model.validate()?;
    if domain.x_min < 0.0 {
        return Err(Error::NegativeInput(domain.x_min));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lerp = |lo: f64, hi: f64, i: usize, n: usize| {
        if n <= 1 {
            lo
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(n_w * n_x);
    for i in 0..n_w {
        let w = lerp(domain.w_min, domain.w_max, i, n_w);
        for j in 0..n_x {
            let x = lerp(domain.x_min, domain.x_max, j, n_x);
            let mut v = model.ideal_response(w, x);
            if model.noise_sigma > 0.0 {
                v += gaussian(&mut rng, model.noise_sigma);
            }
            out.push(TransferSample { w, x, v });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitDomain {
    pub w_min: f64,
    pub w_max: f64,
    pub x_min: f64,
    pub x_max: f64,
}

impl FitDomain {
    pub const UNBOUNDED: Self =
        Self { w_min: f64::NEG_INFINITY, w_max: f64::INFINITY, x_min: f64::NEG_INFINITY, x_max: f64::INFINITY };

    pub fn new(w_min: f64, w_max: f64, x_min: f64, x_max: f64) -> Self {
        Self { w_min, w_max, x_min, x_max }
    }

    fn spanning(samples: &[TransferSample]) -> Self {
        samples.iter().fold(Self::new(f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY), |d, s| {
            Self::new(d.w_min.min(s.w), d.w_max.max(s.w), d.x_min.min(s.x), d.x_max.max(s.x))
        })
    }

    #[inline]
    pub fn contains(&self, w: f64, x: f64) -> bool {
        (self.w_min..=self.w_max).contains(&w) && (self.x_min..=self.x_max).contains(&x)
    }
}

/// Functional form of a fitted transfer model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferBasis {
    /// `sum_{i,j=1..=degree} c[(i-1)·degree + (j-1)] · w^i · x^j`.
    SeparablePolynomial { degree: usize },
    /// `a · tanh(b · w · x · (1 + c · x))` with coefficients `[a, b, c]`.
    TanhGain,
}

impl TransferBasis {
    pub fn coefficient_count(&self) -> usize {
        match *self {
            TransferBasis::SeparablePolynomial { degree } => degree * degree,
            TransferBasis::TanhGain => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TransferBasis::SeparablePolynomial { .. } => "separable-polynomial",
            TransferBasis::TanhGain => "tanh-gain",
        }
    }
}

/// A fitted element-wise replacement for `w · x`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelTransferModel {
    pub basis: TransferBasis,
    pub coefficients: Vec<f64>,
    pub domain: FitDomain,
    pub rmse: f64,
}

impl PixelTransferModel {
    /// Exact multiplication over an unbounded domain.
    pub fn exact_product() -> Self {
        Self {
            basis: TransferBasis::SeparablePolynomial { degree: 1 },
            coefficients: vec![1.0],
            domain: FitDomain::UNBOUNDED,
            rmse: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.coefficients.len() != self.basis.coefficient_count() {
            return Err(Error::ShapeMismatch {
                axis: "coefficients",
                expected: self.basis.coefficient_count(),
                found: self.coefficients.len(),
            });
        }
        let d = &self.domain;
        if !(d.w_min <= d.w_max && d.x_min <= d.x_max) {
            return Err(Error::InvalidConfig(format!("empty fit domain {d:?}")));
        }
        Ok(())
    }

    /// Value at `(w, x)` with both arguments clamped into the fit domain.
    #[inline]
    pub fn evaluate(&self, w: f64, x: f64) -> f64 {
        let (w, x) = self.clamp(w, x);
        self.eval_raw(w, x).0
    }

    /// `(f, df/dw, df/dx)` of the clamped function. The derivative with respect to
    /// a clamped argument is zero.
    #[inline]
    pub fn evaluate_with_grad(&self, w: f64, x: f64) -> (f64, f64, f64) {
        let (wc, xc) = self.clamp(w, x);
        let (f, dw, dx) = self.eval_raw(wc, xc);
        (f, if wc == w { dw } else { 0.0 }, if xc == x { dx } else { 0.0 })
    }

    #[inline]
    fn clamp(&self, w: f64, x: f64) -> (f64, f64) {
        (w.clamp(self.domain.w_min, self.domain.w_max), x.clamp(self.domain.x_min, self.domain.x_max))
    }

    fn eval_raw(&self, w: f64, x: f64) -> (f64, f64, f64) {
        let c = &self.coefficients;
        match self.basis {
            TransferBasis::SeparablePolynomial { degree } => {
                // inner(i) = sum_j c_ij x^j, inner'(i) = sum_j j c_ij x^(j-1)
                let mut f = 0.0;
                let mut dfdw = 0.0;
                let mut dfdx = 0.0;
                let mut w_pow_prev = 1.0; // w^(i-1)
                for i in 1..=degree {
                    let row = &c[(i - 1) * degree..i * degree];
                    let mut inner = 0.0;
                    let mut inner_dx = 0.0;
                    let mut x_pow_prev = 1.0; // x^(j-1)
                    for (j, &cij) in row.iter().enumerate() {
                        inner_dx += cij * (j + 1) as f64 * x_pow_prev;
                        x_pow_prev *= x;
                        inner += cij * x_pow_prev;
                    }
                    let w_pow = w_pow_prev * w;
                    f += w_pow * inner;
                    dfdx += w_pow * inner_dx;
                    dfdw += i as f64 * w_pow_prev * inner;
                    w_pow_prev = w_pow;
                }
                (f, dfdw, dfdx)
            }
            TransferBasis::TanhGain => {
                let (a, b, g) = (c[0], c[1], c[2]);
                let t = libm::tanh(b * w * x * (1.0 + g * x));
                let sech2 = 1.0 - t * t;
                (a * t, a * sech2 * b * x * (1.0 + g * x), a * sech2 * b * w * (1.0 + 2.0 * g * x))
            }
        }
    }

    /// Root-mean-square residual over `samples`.
    pub fn rmse_on(&self, samples: &[TransferSample]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        let sse: f64 = samples
            .iter()
            .map(|s| {
                let r = self.evaluate(s.w, s.x) - s.v;
                r * r
            })
            .sum();
        libm::sqrt(sse / samples.len() as f64)
    }
}

/// Stopping rule for the damped Gauss-Newton fit of [`TransferBasis::TanhGain`].
pub const GN_GRADIENT_TOLERANCE: f64 = 1e-10;
pub const GN_MAX_ITERATIONS: usize = 200;

/// Least-squares fit of `basis` to `samples`.
///
/// The polynomial basis is linear in its coefficients and is solved through an
/// SVD of the design matrix. The tanh-gain basis is fitted by Levenberg-damped
/// Gauss-Newton, stopping when `‖Jᵀr‖ < 1e-10` or after 200 iterations.
pub fn fit_transfer_function(samples: &[TransferSample], basis: TransferBasis) -> Result<PixelTransferModel> {
    let n_coef = basis.coefficient_count();
    if n_coef == 0 {
        return Err(Error::InvalidConfig("basis has no coefficients".into()));
    }
    let required = 10 * n_coef;
    if samples.len() < required {
        return Err(Error::InsufficientSamples { required, coefficients: n_coef, found: samples.len() });
    }
    let domain = FitDomain::spanning(samples);
    let coefficients = match basis {
        TransferBasis::SeparablePolynomial { degree } => fit_polynomial(samples, degree)?,
        TransferBasis::TanhGain => return fit_tanh_gain(samples, domain),
    };
    let mut model = PixelTransferModel { basis, coefficients, domain, rmse: 0.0 };
    model.rmse = model.rmse_on(samples);
    Ok(model)
}

fn rank_tolerance(svd: &nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>, rows: usize, cols: usize) -> f64 {
    let max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    max * rows.max(cols) as f64 * f64::EPSILON
}

fn solve_least_squares(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let (rows, cols) = a.shape();
    let svd = a.svd(true, true);
    let tol = rank_tolerance(&svd, rows, cols);
    let rank = svd.rank(tol);
    if rank < cols {
        return Err(Error::RankDeficient { rank, columns: cols });
    }
    svd.solve(b, tol).map_err(|e| Error::InvalidConfig(e.into()))
}

fn fit_polynomial(samples: &[TransferSample], degree: usize) -> Result<Vec<f64>> {
    let cols = degree * degree;
    let a = DMatrix::from_fn(samples.len(), cols, |r, c| {
        let (i, j) = (c / degree + 1, c % degree + 1);
        libm::pow(samples[r].w, i as f64) * libm::pow(samples[r].x, j as f64)
    });
    let b = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.v));
    Ok(solve_least_squares(a, &b)?.iter().copied().collect())
}

fn tanh_residuals_and_jacobian(samples: &[TransferSample], p: &[f64; 3]) -> (DVector<f64>, DMatrix<f64>) {
    let (a, b, g) = (p[0], p[1], p[2]);
    let mut r = DVector::zeros(samples.len());
    let mut j = DMatrix::zeros(samples.len(), 3);
    for (i, s) in samples.iter().enumerate() {
        let t = libm::tanh(b * s.w * s.x * (1.0 + g * s.x));
        let sech2 = 1.0 - t * t;
        r[i] = a * t - s.v;
        j[(i, 0)] = t;
        j[(i, 1)] = a * sech2 * s.w * s.x * (1.0 + g * s.x);
        j[(i, 2)] = a * sech2 * b * s.w * s.x * s.x;
    }
    (r, j)
}

fn fit_tanh_gain(samples: &[TransferSample], domain: FitDomain) -> Result<PixelTransferModel> {
    // Initial guess: amplitude just above the largest observed voltage, then
    // atanh(v / a) = b·wx + (b·c)·wx² is linear in (b, b·c).
    let v_max = samples.iter().map(|s| s.v.abs()).fold(0.0, f64::max);
    if v_max == 0.0 {
        return Err(Error::RankDeficient { rank: 0, columns: 3 });
    }
    let a0 = 1.05 * v_max;
    let design = DMatrix::from_fn(samples.len(), 2, |r, c| {
        let wx = samples[r].w * samples[r].x;
        if c == 0 {
            wx
        } else {
            wx * samples[r].x
        }
    });
    let target = DVector::from_iterator(samples.len(), samples.iter().map(|s| libm::atanh(s.v / a0)));
    let lin = solve_least_squares(design, &target)?;
    let b0 = if lin[0] != 0.0 { lin[0] } else { 1.0 };
    let mut params = [a0, b0, lin[1] / b0];

    let (mut r, mut jac) = tanh_residuals_and_jacobian(samples, &params);
    {
        let (rows, cols) = jac.shape();
        let svd = jac.clone().svd(false, false);
        let tol = rank_tolerance(&svd, rows, cols);
        let rank = svd.rank(tol);
        if rank < cols {
            return Err(Error::RankDeficient { rank, columns: cols });
        }
    }
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    let mut grad_norm = (jac.transpose() * &r).norm();
    let mut iterations = 0;
    while grad_norm >= GN_GRADIENT_TOLERANCE && iterations < GN_MAX_ITERATIONS {
        iterations += 1;
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &r;
        let mut accepted = false;
        for _ in 0..30 {
            let mut damped = jtj.clone();
            for k in 0..3 {
                damped[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = damped.lu().solve(&(-&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let trial = [params[0] + step[0], params[1] + step[1], params[2] + step[2]];
            let (r_t, j_t) = tanh_residuals_and_jacobian(samples, &trial);
            let cost_t = r_t.norm_squared();
            if cost_t.is_finite() && cost_t <= cost {
                params = trial;
                r = r_t;
                jac = j_t;
                cost = cost_t;
                lambda = (lambda * 0.1).max(1e-15);
                accepted = true;
                break;
            }
            lambda *= 10.0;
        }
        grad_norm = (jac.transpose() * &r).norm();
        if !accepted {
            break;
        }
    }
    let mut model =
        PixelTransferModel { basis: TransferBasis::TanhGain, coefficients: params.to_vec(), domain, rmse: 0.0 };
    model.rmse = model.rmse_on(samples);
    if grad_norm >= GN_GRADIENT_TOLERANCE {
        return Err(Error::NotConverged { iterations, grad_norm, best: Box::new(model) });
    }
    Ok(model)
}

/// Recorded state for [`custom_conv3d_backward`].
#[derive(Debug, Clone)]
pub struct CustomConvContext {
    geometry: ConvGeometry,
    input: GradTensor,
    weights: GradTensor,
    transfer: PixelTransferModel,
}

/// Output of [`custom_conv3d`] with the number of element evaluations that had to
/// be clamped into the transfer model's domain.
#[derive(Debug, Clone)]
pub struct CustomConvOutput {
    pub output: GradTensor,
    pub clamped: usize,
    pub context: CustomConvContext,
}

/// Per-weight factors of a separable polynomial: `f(w, x) = Σ_j a_j(w) · x^j`.
/// Computing `a_j(w)` and `a_j'(w)` once per weight leaves `degree` products
/// per tap instead of `degree²`.
struct Prepared {
    degree: usize,
    a: Vec<f64>,
    da: Vec<f64>,
}

impl Prepared {
    fn new(t: &PixelTransferModel, weights: &[f64]) -> Option<Self> {
        let TransferBasis::SeparablePolynomial { degree } = t.basis else {
            return None;
        };
        let d = degree;
        let mut a = vec![0.0; weights.len() * d];
        let mut da = vec![0.0; weights.len() * d];
        for (idx, &w_raw) in weights.iter().enumerate() {
            let w = w_raw.clamp(t.domain.w_min, t.domain.w_max);
            let live = w == w_raw;
            let (a_row, da_row) = (&mut a[idx * d..(idx + 1) * d], &mut da[idx * d..(idx + 1) * d]);
            let mut w_prev = 1.0; // w^(i-1)
            for i in 1..=d {
                let w_pow = w_prev * w;
                for j in 0..d {
                    let c = t.coefficients[(i - 1) * d + j];
                    a_row[j] += c * w_pow;
                    if live {
                        da_row[j] += c * i as f64 * w_prev;
                    }
                }
                w_prev = w_pow;
            }
        }
        Some(Self { degree, a, da })
    }

    /// Fills `pow[j] = x^(j+1)` and `dpow[j] = (j+1)·x^j` for the clamped `x`.
    fn powers(&self, t: &PixelTransferModel, x_raw: f64, pow: &mut [f64], dpow: &mut [f64]) {
        let x = x_raw.clamp(t.domain.x_min, t.domain.x_max);
        let live = x == x_raw;
        let mut prev = 1.0;
        for j in 0..self.degree {
            dpow[j] = if live { (j + 1) as f64 * prev } else { 0.0 };
            prev *= x;
            pow[j] = prev;
        }
    }
}

/// 3-D convolution in which every product `w · x` is replaced by
/// `transfer.evaluate(w, x)`; the per-tap results are summed exactly and the
/// bias is added. Padding taps contribute nothing.
pub fn custom_conv3d(
    input: &GradTensor,
    weights: &GradTensor,
    bias: &GradTensor,
    transfer: &PixelTransferModel,
    config: Conv3dConfig,
) -> Result<CustomConvOutput> {
    input.expect_rank("custom_conv3d input", 5)?;
    weights.expect_rank("custom_conv3d weights", 5)?;
    transfer.validate()?;
    let g = ConvGeometry::resolve(input.shape(), weights.shape(), config.stride, config.padding)?;
    if bias.len() != g.out_channels {
        return Err(Error::ShapeMismatch { axis: "bias", expected: g.out_channels, found: bias.len() });
    }
    let k = g.patch_len();
    let p = g.out_positions();
    let in_len = g.in_channels * g.in_volume();
    let w = weights.values();
    let x = input.values();
    let co_n = g.out_channels;
    let w_outside = w.iter().filter(|&&wv| wv < transfer.domain.w_min || wv > transfer.domain.w_max).count();
    let prepared = Prepared::new(transfer, w);
    let degree = prepared.as_ref().map_or(0, |pr| pr.degree);
    let (mut pow, mut dpow) = (vec![0.0; degree], vec![0.0; degree]);
    let mut clamped = 0;
    let mut out = vec![0.0; g.batch * co_n * p];
    for n in 0..g.batch {
        let sample = &x[n * in_len..(n + 1) * in_len];
        let dst = &mut out[n * co_n * p..(n + 1) * co_n * p];
        for (co, row) in dst.chunks_exact_mut(p).enumerate() {
            row.fill(bias.values()[co]);
        }
        g.for_each_tap(|row, col, src| {
            let xv = sample[src];
            let x_outside = xv < transfer.domain.x_min || xv > transfer.domain.x_max;
            if x_outside {
                clamped += co_n;
            } else if w_outside > 0 {
                clamped += (0..co_n).filter(|co| !transfer.domain.contains(w[co * k + row], xv)).count();
            }
            match &prepared {
                Some(pr) => {
                    pr.powers(transfer, xv, &mut pow, &mut dpow);
                    for co in 0..co_n {
                        let a = &pr.a[(co * k + row) * degree..(co * k + row + 1) * degree];
                        dst[co * p + col] += a.iter().zip(&pow).map(|(a, x)| a * x).sum::<f64>();
                    }
                }
                None => {
                    for co in 0..co_n {
                        dst[co * p + col] += transfer.evaluate(w[co * k + row], xv);
                    }
                }
            }
        });
    }
    if clamped > 0 {
        log::warn!("custom_conv3d: {clamped} evaluations clamped into the transfer domain");
    }
    let output = GradTensor::from_vec(&g.output_shape(), out)?;
    output.debug_check_finite("custom_conv3d");
    Ok(CustomConvOutput {
        output,
        clamped,
        context: CustomConvContext {
            geometry: g,
            input: input.clone(),
            weights: weights.clone(),
            transfer: transfer.clone(),
        },
    })
}

/// Gradients of [`custom_conv3d`] through the analytic transfer function.
pub fn custom_conv3d_backward(ctx: &CustomConvContext, upstream: &GradTensor) -> Result<LayerGrads> {
    let g = &ctx.geometry;
    if upstream.shape() != g.output_shape() {
        return Err(Error::ShapeMismatch {
            axis: "upstream",
            expected: g.output_shape().iter().product(),
            found: upstream.len(),
        });
    }
    let k = g.patch_len();
    let p = g.out_positions();
    let co_n = g.out_channels;
    let in_len = g.in_channels * g.in_volume();
    let t = &ctx.transfer;
    let w = ctx.weights.values();
    let x = ctx.input.values();
    let up = upstream.values();
    let prepared = Prepared::new(t, w);
    let degree = prepared.as_ref().map_or(0, |pr| pr.degree);
    let (mut pow, mut dpow) = (vec![0.0; degree], vec![0.0; degree]);
    let mut d_input = vec![0.0; x.len()];
    let mut d_weights = vec![0.0; w.len()];
    let mut d_bias = vec![0.0; co_n];
    for n in 0..g.batch {
        let sample = &x[n * in_len..(n + 1) * in_len];
        let u = &up[n * co_n * p..(n + 1) * co_n * p];
        for (co, row) in u.chunks_exact(p).enumerate() {
            d_bias[co] += row.iter().sum::<f64>();
        }
        let d_sample = &mut d_input[n * in_len..(n + 1) * in_len];
        g.for_each_tap(|row, col, src| {
            let xv = sample[src];
            match &prepared {
                Some(pr) => {
                    pr.powers(t, xv, &mut pow, &mut dpow);
                    for co in 0..co_n {
                        let gu = u[co * p + col];
                        let i = (co * k + row) * degree;
                        let (a, da) = (&pr.a[i..i + degree], &pr.da[i..i + degree]);
                        d_weights[co * k + row] += gu * da.iter().zip(&pow).map(|(d, x)| d * x).sum::<f64>();
                        d_sample[src] += gu * a.iter().zip(&dpow).map(|(a, d)| a * d).sum::<f64>();
                    }
                }
                None => {
                    for co in 0..co_n {
                        let gu = u[co * p + col];
                        let (_, dw, dx) = t.evaluate_with_grad(w[co * k + row], xv);
                        d_weights[co * k + row] += gu * dw;
                        d_sample[src] += gu * dx;
                    }
                }
            }
        });
    }
    Ok(LayerGrads {
        input: GradTensor::from_vec(ctx.input.shape(), d_input)?,
        weights: GradTensor::from_vec(ctx.weights.shape(), d_weights)?,
        bias: GradTensor::from_vec(&[co_n], d_bias)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn product_samples() -> Vec<TransferSample> {
        let mut s = Vec::new();
        for i in 0..21 {
            for j in 0..21 {
                let w = -1.0 + 0.1 * i as f64;
                let x = 0.05 * j as f64;
                s.push(TransferSample { w, x, v: w * x });
            }
        }
        s
    }

    #[test]
    fn zero_weight_gives_zero() {
        let m = PixelBehavioralModel::default();
        for x in [0.0, 0.3, 1.0, 7.5] {
            assert_eq!(simulate_pixel_response(&m, 0.0, x, 1).unwrap(), 0.0);
        }
    }

    #[test]
    fn odd_in_weight() {
        let m = PixelBehavioralModel::default();
        for (w, x) in [(0.3, 0.2), (0.9, 1.0), (0.01, 0.5)] {
            let a = simulate_pixel_response(&m, w, x, 3).unwrap();
            let b = simulate_pixel_response(&m, -w, x, 3).unwrap();
            assert_eq!(a, -b);
        }
    }

    #[test]
    fn linear_regime_slope() {
        let m = PixelBehavioralModel { alpha: 0.0, ..Default::default() };
        let x = 1e-4;
        let slope = simulate_pixel_response(&m, 0.1, x, 0).unwrap() / x;
        let expected = m.v_sat * m.gamma * 0.1;
        assert!((slope - expected).abs() / expected < 0.01);
    }

    #[test]
    fn negative_input_rejected() {
        let m = PixelBehavioralModel::default();
        assert_eq!(simulate_pixel_response(&m, 0.5, -0.1, 0), Err(Error::NegativeInput(-0.1)));
    }

    #[test]
    fn noise_is_seeded() {
        let m = PixelBehavioralModel { noise_sigma: 0.01, ..Default::default() };
        let a = simulate_pixel_response(&m, 0.5, 0.5, 42).unwrap();
        assert_eq!(a, simulate_pixel_response(&m, 0.5, 0.5, 42).unwrap());
        assert_ne!(a, simulate_pixel_response(&m, 0.5, 0.5, 43).unwrap());
    }

    #[test]
    fn exact_product_recovery() {
        let samples = product_samples();
        for degree in 1..=4 {
            let fit = fit_transfer_function(&samples, TransferBasis::SeparablePolynomial { degree }).unwrap();
            assert!((fit.coefficients[0] - 1.0).abs() <= 1e-9);
            assert!(fit.coefficients[1..].iter().all(|c| c.abs() <= 1e-9));
            assert!(fit.rmse <= 1e-12, "rmse {}", fit.rmse);
        }
    }

    #[test]
    fn duplicate_samples_are_rank_deficient() {
        let samples = vec![TransferSample { w: 0.5, x: 0.5, v: 0.25 }; 100];
        let err = fit_transfer_function(&samples, TransferBasis::SeparablePolynomial { degree: 2 }).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { rank: 1, columns: 4 }));
        assert!(matches!(fit_transfer_function(&samples, TransferBasis::TanhGain), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn too_few_samples() {
        let samples = product_samples();
        assert!(matches!(
            fit_transfer_function(&samples[..30], TransferBasis::SeparablePolynomial { degree: 2 }),
            Err(Error::InsufficientSamples { required: 40, .. })
        ));
    }

    #[test]
    fn tanh_gain_recovers_generator() {
        let m = PixelBehavioralModel::default();
        let samples = sample_grid(&m, FitDomain::new(-1.0, 1.0, 0.0, 1.0), 25, 25, 0).unwrap();
        let fit = fit_transfer_function(&samples, TransferBasis::TanhGain).unwrap();
        assert!((fit.coefficients[0] - m.v_sat).abs() < 1e-8);
        assert!((fit.coefficients[1] - m.gamma).abs() < 1e-8);
        assert!((fit.coefficients[2] - m.alpha).abs() < 1e-8);
        assert!(fit.rmse < 1e-12);
    }

    #[test]
    fn clamping_zeroes_clamped_derivative() {
        let t =
            PixelTransferModel { domain: FitDomain::new(-1.0, 1.0, 0.0, 1.0), ..PixelTransferModel::exact_product() };
        assert_eq!(t.evaluate(2.0, 0.5), 0.5);
        let (f, dw, dx) = t.evaluate_with_grad(2.0, 0.5);
        assert_eq!((f, dw, dx), (0.5, 0.0, 1.0));
    }

    #[test]
    fn polynomial_gradients_match_finite_differences() {
        let t = PixelTransferModel {
            basis: TransferBasis::SeparablePolynomial { degree: 3 },
            coefficients: vec![0.3, -1.2, 0.5, 2.0, 0.1, -0.7, 0.25, 0.9, -0.4],
            domain: FitDomain::UNBOUNDED,
            rmse: 0.0,
        };
        let h = 1e-6;
        for (w, x) in [(0.3, 0.7), (-0.8, 0.2), (0.55, 0.95)] {
            let (_, dw, dx) = t.evaluate_with_grad(w, x);
            let fdw = (t.evaluate(w + h, x) - t.evaluate(w - h, x)) / (2.0 * h);
            let fdx = (t.evaluate(w, x + h) - t.evaluate(w, x - h)) / (2.0 * h);
            assert!((dw - fdw).abs() < 1e-8 && (dx - fdx).abs() < 1e-8);
        }
    }
}
