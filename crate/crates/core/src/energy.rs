//! Analytical MAC count, peak activation memory, and energy breakdown for the
//! baseline (all digital), POP (compressed model, processed outside the pixel
//! array) and PIP (first layer executed in-pixel) pipelines.
//!
//! Per compute layer: `energy = C_i·C_o·K·e_read + C_i·C_o·K·P·e_mac`, with `K`
//! the kernel volume (`k³` for 3-D, `k²` for 2-D, 1 for linear) and `P` the
//! number of output positions. Bias terms are not counted.
//!
//! All energy constants are configuration inputs. [`EnergyParams::unit`] gives
//! unit-scale placeholders that only support relative comparisons.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::model::{LayerSpec, ModelSpec};

/// Per-conversion ADC energy as a function of resolution.
pub trait AdcEnergy {
    fn per_conversion(&self, bits: u32) -> f64;
}

/// Successive-approximation scaling: `unit · base^bits`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SarAdc {
    pub unit: f64,
    pub base: f64,
}

impl AdcEnergy for SarAdc {
    fn per_conversion(&self, bits: u32) -> f64 {
        self.unit * libm::pow(self.base, f64::from(bits))
    }
}

/// Energy constants, in joules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyParams {
    pub e_read: f64,
    pub e_mac: f64,
    pub e_pixel_readout: f64,
    pub e_pixel_conv: f64,
    pub adc: SarAdc,
    pub e_comm_bit: f64,
}

impl EnergyParams {
    /// Unit-scale placeholders (ADC scales as `4^bits`).
    pub fn unit() -> Self {
        Self {
            e_read: 1.0,
            e_mac: 1.0,
            e_pixel_readout: 1.0,
            e_pixel_conv: 1.0,
            adc: SarAdc { unit: 1.0, base: 4.0 },
            e_comm_bit: 1.0,
        }
    }

    pub fn zero() -> Self {
        Self {
            e_read: 0.0,
            e_mac: 0.0,
            e_pixel_readout: 0.0,
            e_pixel_conv: 0.0,
            adc: SarAdc { unit: 0.0, base: 4.0 },
            e_comm_bit: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("e_read", self.e_read),
            ("e_mac", self.e_mac),
            ("e_pixel_readout", self.e_pixel_readout),
            ("e_pixel_conv", self.e_pixel_conv),
            ("adc.unit", self.adc.unit),
            ("adc.base", self.adc.base),
            ("e_comm_bit", self.e_comm_bit),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self::unit()
    }
}

/// Component labels of an energy breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostLabel {
    /// Sensing: pixel array plus ADC.
    Sensing,
    /// Sensor-to-SoC communication.
    Communication,
    /// n-th convolution layer, 1-based.
    Conv(usize),
    /// n-th linear layer, 1-based.
    Linear(usize),
}

impl fmt::Display for CostLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CostLabel::Sensing => f.write_str("S1"),
            CostLabel::Communication => f.write_str("S2"),
            CostLabel::Conv(n) => write!(f, "C{n}"),
            CostLabel::Linear(n) => write!(f, "L{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerCost {
    pub label: CostLabel,
    pub macs: u64,
    pub read_elems: u64,
    pub energy: f64,
    pub activation_bytes_in: u64,
    pub activation_bytes_out: u64,
}

/// Shape terms of a 3-D convolution with cubic kernel `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dCost {
    pub c_i: usize,
    pub c_o: usize,
    pub k: usize,
    pub h_o: usize,
    pub w_o: usize,
    pub d_o: usize,
}

/// Shape terms of a 2-D convolution with square kernel `k`. A linear layer is
/// `k = h_o = w_o = 1` with `c_i`, `c_o` the neuron counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dCost {
    pub c_i: usize,
    pub c_o: usize,
    pub k: usize,
    pub h_o: usize,
    pub w_o: usize,
}

fn compute_cost(
    label: CostLabel,
    c_i: usize,
    c_o: usize,
    kernel_volume: usize,
    positions: usize,
    p: &EnergyParams,
) -> LayerCost {
    let read_elems = (c_i * c_o * kernel_volume) as u64;
    let macs = read_elems * positions as u64;
    LayerCost {
        label,
        macs,
        read_elems,
        energy: read_elems as f64 * p.e_read + macs as f64 * p.e_mac,
        activation_bytes_in: 0,
        activation_bytes_out: 0,
    }
}

pub fn energy_conv3d(g: &Conv3dCost, p: &EnergyParams, label: CostLabel) -> LayerCost {
    compute_cost(label, g.c_i, g.c_o, g.k * g.k * g.k, g.h_o * g.w_o * g.d_o, p)
}

pub fn energy_conv2d(g: &Conv2dCost, p: &EnergyParams, label: CostLabel) -> LayerCost {
    compute_cost(label, g.c_i, g.c_o, g.k * g.k, g.h_o * g.w_o, p)
}

pub fn energy_linear(inputs: usize, outputs: usize, p: &EnergyParams, label: CostLabel) -> LayerCost {
    energy_conv2d(&Conv2dCost { c_i: inputs, c_o: outputs, k: 1, h_o: 1, w_o: 1 }, p, label)
}

/// Where the first layer is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecutionMode {
    /// Baseline model, fully digital.
    Baseline,
    /// Compressed model processed outside the pixel array.
    Pop,
    /// Compressed model with the first layer inside the pixel array.
    Pip,
}

impl ExecutionMode {
    pub fn in_pixel(self) -> bool {
        self == ExecutionMode::Pip
    }

    pub fn name(self) -> &'static str {
        match self {
            ExecutionMode::Baseline => "baseline",
            ExecutionMode::Pop => "pop",
            ExecutionMode::Pip => "pip",
        }
    }
}

/// A compute layer resolved from a model spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComputeLayer {
    pub label: CostLabel,
    pub c_i: usize,
    pub c_o: usize,
    pub kernel_volume: usize,
    pub positions: usize,
    pub input_elements: usize,
    pub output_elements: usize,
    /// Bit width of the output when a quantizer directly follows the layer.
    pub quant_bits: Option<u32>,
}

/// Compute layers of `spec` in execution order, labeled C1.. and L1...
pub fn compute_layers(spec: &ModelSpec) -> Result<Vec<ComputeLayer>> {
    let plan = spec.plan()?;
    let mut out = Vec::new();
    let (mut convs, mut linears) = (0, 0);
    for (i, (layer, p)) in spec.layers.iter().zip(&plan).enumerate() {
        let quant_bits = spec.layers[i + 1..].iter().take_while(|l| !l.is_compute()).find_map(|l| match l {
            LayerSpec::FakeQuant(q) => Some(q.n_bits),
            _ => None,
        });
        let (label, c_i, kernel_volume) = match layer {
            LayerSpec::Conv3d(c) | LayerSpec::CustomConv3d(c) => {
                convs += 1;
                (CostLabel::Conv(convs), p.input[0], c.kernel.iter().product())
            }
            LayerSpec::Conv2d(c) => {
                convs += 1;
                let c_i = if p.input.len() == 4 { p.input[0] * p.input[1] } else { p.input[0] };
                (CostLabel::Conv(convs), c_i, c.kernel[0] * c.kernel[1])
            }
            LayerSpec::Linear { .. } => {
                linears += 1;
                (CostLabel::Linear(linears), p.input_elements(), 1)
            }
            _ => continue,
        };
        out.push(ComputeLayer {
            label,
            c_i,
            c_o: p.output[0],
            kernel_volume,
            positions: p.output[1..].iter().product(),
            input_elements: p.input_elements(),
            output_elements: p.output_elements(),
            quant_bits,
        });
    }
    Ok(out)
}

/// Total MACs over conv and linear layers. In PIP mode the first layer runs
/// in the pixel array and contributes none.
pub fn flops_count(spec: &ModelSpec, mode: ExecutionMode) -> Result<u64> {
    let unit = EnergyParams::unit();
    Ok(compute_layers(spec)?
        .iter()
        .enumerate()
        .filter(|(i, _)| !(mode.in_pixel() && *i == 0))
        .map(|(_, l)| compute_cost(l.label, l.c_i, l.c_o, l.kernel_volume, l.positions, &unit).macs)
        .sum())
}

/// Activation precisions used by [`peak_memory`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActivationBits {
    /// Bits per raw input element.
    pub input: u32,
    /// Bits per activation element unless a quantizer sets the width.
    pub activation: u32,
}

impl Default for ActivationBits {
    fn default() -> Self {
        Self { input: 12, activation: 8 }
    }
}

fn packed_bytes(elements: usize, bits: u32) -> u64 {
    (elements as u64 * u64::from(bits)).div_ceil(8)
}

/// Peak over executed layers of input plus output activation bytes (weights
/// excluded), per sample. In PIP mode the first layer is not executed on the
/// processor.
pub fn peak_memory(spec: &ModelSpec, bits: ActivationBits, mode: ExecutionMode) -> Result<u64> {
    Ok(activation_bytes(spec, bits)?
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !(mode.in_pixel() && *i == 0))
        .map(|(_, (a, b))| a + b)
        .max()
        .unwrap_or(0))
}

fn activation_bytes(spec: &ModelSpec, bits: ActivationBits) -> Result<Vec<(u64, u64)>> {
    let layers = compute_layers(spec)?;
    let mut in_bits = bits.input;
    Ok(layers
        .iter()
        .map(|l| {
            let out_bits = l.quant_bits.unwrap_or(bits.activation);
            let pair = (packed_bytes(l.input_elements, in_bits), packed_bytes(l.output_elements, out_bits));
            in_bits = out_bits;
            pair
        })
        .collect())
}

/// Component-wise energy of one pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub mode: ExecutionMode,
    pub components: Vec<LayerCost>,
    pub total: f64,
    /// Bits leaving the sensor per classified pixel.
    pub transmitted_bits: u64,
}

impl EnergyReport {
    pub fn component(&self, label: CostLabel) -> Option<&LayerCost> {
        self.components.iter().find(|c| c.label == label)
    }

    pub fn compute_energy(&self) -> f64 {
        self.components
            .iter()
            .filter(|c| matches!(c.label, CostLabel::Conv(_) | CostLabel::Linear(_)))
            .map(|c| c.energy)
            .sum()
    }
}

/// Sensing, communication and per-layer compute energy for one classified pixel.
///
/// - Baseline / POP: every raw element is read out and digitized at the sensor
///   depth, then transmitted at that depth.
/// - PIP: the pixel array emits the first layer's output elements, digitized and
///   transmitted at the first activation's bit width; the first layer's compute
///   term is zero.
pub fn pipeline_energy(spec: &ModelSpec, params: &EnergyParams, mode: ExecutionMode) -> Result<EnergyReport> {
    pipeline_energy_with_adc(spec, params, mode, &params.adc)
}

pub fn pipeline_energy_with_adc(
    spec: &ModelSpec,
    params: &EnergyParams,
    mode: ExecutionMode,
    adc: &dyn AdcEnergy,
) -> Result<EnergyReport> {
    params.validate()?;
    let geometry = spec.first_layer_geometry()?;
    let layers = compute_layers(spec)?;
    let bytes = activation_bytes(spec, ActivationBits::default())?;
    let (elements, bits, pixel_energy) = if mode.in_pixel() {
        let out = geometry.output_dims()?.elements();
        (out, geometry.n_bits, params.e_pixel_conv)
    } else {
        (geometry.input_elements(), geometry.sensor_depth, params.e_pixel_readout)
    };
    let transmitted_bits = elements as u64 * u64::from(bits);
    let sensor = |label, energy| LayerCost {
        label,
        macs: 0,
        read_elems: 0,
        energy,
        activation_bytes_in: 0,
        activation_bytes_out: 0,
    };
    let mut components = alloc::vec![
        sensor(CostLabel::Sensing, elements as f64 * pixel_energy + elements as f64 * adc.per_conversion(bits),),
        sensor(CostLabel::Communication, transmitted_bits as f64 * params.e_comm_bit),
    ];
    for (i, (l, (b_in, b_out))) in layers.iter().zip(bytes).enumerate() {
        let mut cost = if mode.in_pixel() && i == 0 {
            compute_cost(l.label, 0, 0, 0, 0, params)
        } else {
            compute_cost(l.label, l.c_i, l.c_o, l.kernel_volume, l.positions, params)
        };
        cost.activation_bytes_in = b_in;
        cost.activation_bytes_out = b_out;
        components.push(cost);
    }
    let total = components.iter().map(|c| c.energy).sum();
    Ok(EnergyReport { mode, components, total, transmitted_bits })
}
