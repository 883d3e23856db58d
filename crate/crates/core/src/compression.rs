//! Layer output geometry and the sensor bandwidth compression factor.
//!
//! The compression factor is reported in reduction orientation: raw sensor
//! bits entering the first layer divided by the quantized activation bits
//! leaving it. The product-orientation value (output over input, scaled by
//! `sensor_depth / n_bits`) is exposed as [`Compression::as_printed`].

use num_rational::Ratio;

use crate::error::{Error, Result};
use crate::ops::{conv3d_forward, Conv3dConfig};
use crate::tensor::GradTensor;

/// Raw pixel bit depth of a conventional image sensor.
pub const SENSOR_DEPTH_BITS: u32 = 12;

/// `floor((z_i - k + 2p) / s) + 1`.
pub fn output_dim(axis: &'static str, input: usize, kernel: usize, padding: usize, stride: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::NonPositive { axis, what: "stride" });
    }
    if kernel == 0 {
        return Err(Error::NonPositive { axis, what: "kernel" });
    }
    if input == 0 {
        return Err(Error::NonPositive { axis, what: "input size" });
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::KernelTooLarge { axis, input, kernel, padding });
    }
    Ok((padded - kernel) / stride + 1)
}

/// Per-axis triple in `(height, width, depth)` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hwd {
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

impl Hwd {
    pub const fn new(h: usize, w: usize, d: usize) -> Self {
        Self { h, w, d }
    }

    pub const fn splat(v: usize) -> Self {
        Self { h: v, w: v, d: v }
    }

    pub fn product(&self) -> usize {
        self.h * self.w * self.d
    }
}

/// Geometry of the first (in-pixel) layer and its output precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerGeometry {
    pub h_i: usize,
    pub w_i: usize,
    pub c_i: usize,
    pub d_i: usize,
    pub kernel: Hwd,
    pub padding: Hwd,
    pub stride: Hwd,
    pub c_o: usize,
    pub n_bits: u32,
    pub sensor_depth: u32,
}

/// Output dimensions `(h_o, w_o, c_o, d_o)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutputDims {
    pub h_o: usize,
    pub w_o: usize,
    pub c_o: usize,
    pub d_o: usize,
}

impl OutputDims {
    pub fn elements(&self) -> usize {
        self.h_o * self.w_o * self.c_o * self.d_o
    }
}

impl LayerGeometry {
    /// Cubic kernel `k`, uniform padding `p`, 12-bit sensor.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        h_i: usize,
        w_i: usize,
        c_i: usize,
        d_i: usize,
        k: usize,
        p: usize,
        stride: Hwd,
        c_o: usize,
        n_bits: u32,
    ) -> Self {
        Self {
            h_i,
            w_i,
            c_i,
            d_i,
            kernel: Hwd::splat(k),
            padding: Hwd::splat(p),
            stride,
            c_o,
            n_bits,
            sensor_depth: SENSOR_DEPTH_BITS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (axis, v) in [
            ("height", self.h_i),
            ("width", self.w_i),
            ("channels", self.c_i),
            ("depth", self.d_i),
            ("out channels", self.c_o),
        ] {
            if v == 0 {
                return Err(Error::NonPositive { axis, what: "size" });
            }
        }
        if self.n_bits == 0 {
            return Err(Error::NonPositive { axis: "n_bits", what: "bit width" });
        }
        if self.sensor_depth == 0 {
            return Err(Error::NonPositive { axis: "sensor_depth", what: "bit width" });
        }
        Ok(())
    }

    pub fn output_dims(&self) -> Result<OutputDims> {
        self.validate()?;
        // Same axis order as the convolution kernels so errors agree.
        let d_o = output_dim("depth", self.d_i, self.kernel.d, self.padding.d, self.stride.d)?;
        let h_o = output_dim("height", self.h_i, self.kernel.h, self.padding.h, self.stride.h)?;
        let w_o = output_dim("width", self.w_i, self.kernel.w, self.padding.w, self.stride.w)?;
        Ok(OutputDims { h_o, w_o, c_o: self.c_o, d_o })
    }

    pub fn input_elements(&self) -> usize {
        self.h_i * self.w_i * self.c_i * self.d_i
    }
}

/// Result of [`compression_factor`], held as exact rationals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Compression {
    pub output: OutputDims,
    pub input_bits: u64,
    pub output_bits: u64,
    /// `input_bits / output_bits`.
    pub factor: Ratio<u64>,
    /// `(output elements / input elements) · sensor_depth / n_bits`.
    pub as_printed: Ratio<u64>,
}

impl Compression {
    pub fn value(&self) -> f64 {
        ratio_to_f64(self.factor)
    }

    pub fn as_printed_value(&self) -> f64 {
        ratio_to_f64(self.as_printed)
    }
}

fn ratio_to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Raw sensor bits over first-activation bits for one geometry.
pub fn compression_factor(g: &LayerGeometry) -> Result<Compression> {
    let output = g.output_dims()?;
    let in_elems = g.input_elements() as u64;
    let out_elems = output.elements() as u64;
    let input_bits = in_elems * u64::from(g.sensor_depth);
    let output_bits = out_elems * u64::from(g.n_bits);
    Ok(Compression {
        output,
        input_bits,
        output_bits,
        factor: Ratio::new(input_bits, output_bits),
        as_printed: Ratio::new(out_elems * u64::from(g.sensor_depth), in_elems * u64::from(g.n_bits)),
    })
}

/// Runs a real 3-D convolution over a zero tensor shaped by `g` and returns the
/// dimensions it produced.
pub fn shape_oracle(g: &LayerGeometry) -> Result<OutputDims> {
    g.validate()?;
    let input = GradTensor::zeros(&[1, g.c_i, g.d_i, g.h_i, g.w_i]);
    let weights = GradTensor::zeros(&[g.c_o, g.c_i, g.kernel.d, g.kernel.h, g.kernel.w]);
    let bias = GradTensor::zeros(&[g.c_o]);
    let cfg = Conv3dConfig::new([g.stride.d, g.stride.h, g.stride.w], [g.padding.d, g.padding.h, g.padding.w]);
    let out = conv3d_forward(&input, &weights, &bias, cfg)?;
    let s = out.shape();
    Ok(OutputDims { h_o: s[3], w_o: s[4], c_o: s[1], d_o: s[2] })
}
