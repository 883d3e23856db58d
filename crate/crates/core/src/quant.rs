//! Uniform fake quantization with straight-through gradients.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::GradTensor;

/// Uniform quantizer over `[clip_lo, clip_hi]` with `2^n_bits` endpoint-inclusive levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantSpec {
    pub n_bits: u32,
    pub clip_lo: f64,
    pub clip_hi: f64,
    /// When set, `clip_hi` is calibrated from the first training epoch and then frozen.
    pub learned_range: bool,
}

impl QuantSpec {
    pub fn new(n_bits: u32, clip_lo: f64, clip_hi: f64) -> Result<Self> {
        let q = Self { n_bits, clip_lo, clip_hi, learned_range: false };
        q.validate()?;
        Ok(q)
    }

    /// Post-ReLU quantizer whose upper clip is calibrated during training.
    pub fn calibrated(n_bits: u32) -> Self {
        Self { n_bits, clip_lo: 0.0, clip_hi: 1.0, learned_range: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=32).contains(&self.n_bits) {
            return Err(Error::InvalidConfig(format!("n_bits must be in 1..=32, got {}", self.n_bits)));
        }
        if !(self.clip_lo.is_finite() && self.clip_hi.is_finite() && self.clip_hi > self.clip_lo) {
            return Err(Error::InvalidConfig(format!("invalid clip range [{}, {}]", self.clip_lo, self.clip_hi)));
        }
        Ok(())
    }

    pub fn levels(&self) -> u64 {
        1u64 << self.n_bits
    }

    pub fn step(&self) -> f64 {
        (self.clip_hi - self.clip_lo) / (self.levels() - 1) as f64
    }

    /// Integer level index of `x` (clamped, nearest level, ties to even).
    #[inline]
    pub fn code(&self, x: f64) -> u64 {
        let c = x.clamp(self.clip_lo, self.clip_hi);
        let i = libm::rint((c - self.clip_lo) / self.step());
        (i.max(0.0) as u64).min(self.levels() - 1)
    }

    #[inline]
    pub fn dequantize(&self, code: u64) -> f64 {
        (self.clip_lo + code as f64 * self.step()).min(self.clip_hi)
    }

    #[inline]
    pub fn quantize(&self, x: f64) -> f64 {
        self.dequantize(self.code(x))
    }
}

/// Forward fake quantization; the result stays real-valued.
pub fn fake_quantize(x: &GradTensor, q: &QuantSpec) -> GradTensor {
    let mut out = x.clone();
    out.zero_grad();
    for v in out.values_mut() {
        *v = q.quantize(*v);
    }
    out
}

/// Straight-through estimator variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SteMode {
    /// Derivative 1 everywhere.
    #[default]
    PassThrough,
    /// Derivative 1 inside `[clip_lo, clip_hi]`, 0 outside.
    Clipped,
}

pub fn ste_backward(upstream: &GradTensor, x: &GradTensor, q: &QuantSpec, mode: SteMode) -> Result<GradTensor> {
    if upstream.shape() != x.shape() {
        return Err(Error::ShapeMismatch { axis: "upstream", expected: x.len(), found: upstream.len() });
    }
    match mode {
        SteMode::PassThrough => GradTensor::from_vec(x.shape(), upstream.values().to_vec()),
        SteMode::Clipped => {
            let g = upstream
                .values()
                .iter()
                .zip(x.values())
                .map(|(&g, &v)| if v < q.clip_lo || v > q.clip_hi { 0.0 } else { g })
                .collect();
            GradTensor::from_vec(x.shape(), g)
        }
    }
}

/// Packs the level codes of `values` as `n_bits`-wide fields, LSB first.
/// Output length is `ceil(len · n_bits / 8)` bytes.
pub fn pack_codes(values: &[f64], q: &QuantSpec) -> Vec<u8> {
    let bits = q.n_bits as usize;
    let mut out = alloc::vec![0u8; (values.len() * bits).div_ceil(8)];
    let mut pos = 0usize;
    for &v in values {
        let code = q.code(v);
        for b in 0..bits {
            if (code >> b) & 1 == 1 {
                out[pos / 8] |= 1 << (pos % 8);
            }
            pos += 1;
        }
    }
    out
}

/// Inverse of [`pack_codes`].
pub fn unpack_codes(bytes: &[u8], count: usize, q: &QuantSpec) -> Vec<f64> {
    let bits = q.n_bits as usize;
    let mut pos = 0usize;
    (0..count)
        .map(|_| {
            let mut code = 0u64;
            for b in 0..bits {
                if (bytes[pos / 8] >> (pos % 8)) & 1 == 1 {
                    code |= 1 << b;
                }
                pos += 1;
            }
            q.dequantize(code)
        })
        .collect()
}

/// Value at quantile `p` (0..=1) using the nearest-rank rule.
pub fn percentile(values: &mut [f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let rank = libm::ceil(p * values.len() as f64) as usize;
    Some(values[rank.clamp(1, values.len()) - 1])
}
