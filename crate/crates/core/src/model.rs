//! Layer-list model specifications, shape planning, and an executable model
//! with a per-layer backward tape.
//!
//! Reference architectures:
//!
//! - CNN-3D: six 3-D convolutions (first one on the raw `5 × 5` patch, the rest
//!   with unit spatial padding and spectral stride 2) and one linear classifier.
//! - CNN-32H: one 3-D convolution on a `3 × 3` patch, two 2-D convolutions over
//!   the folded `channel × band` axis, global average pooling, linear classifier.
//!
//! Baseline and custom variants differ only in the first layer: its mode
//! (digital or in-pixel), output channels, spectral stride and output quantization.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compression::{output_dim, Hwd, LayerGeometry, SENSOR_DEPTH_BITS};
use crate::error::{Error, Result};
use crate::ops::{self, Conv2dConfig, Conv3dConfig};
use crate::pixel::{self, PixelTransferModel};
use crate::quant::{self, QuantSpec, SteMode};
use crate::tensor::GradTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FirstLayerMode {
    #[default]
    Digital,
    Pip,
}

/// 3-D convolution hyperparameters, axes ordered `(depth, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

/// 2-D convolution hyperparameters, axes ordered `(height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub out_channels: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: [usize; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Conv3d(Conv3dSpec),
    CustomConv3d(Conv3dSpec),
    /// A rank-4 `[C, D, H, W]` input is folded to `[C·D, H, W]` first.
    Conv2d(Conv2dSpec),
    Relu,
    FakeQuant(QuantSpec),
    Gap,
    /// Flattens its input.
    Linear {
        out_features: usize,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv3d(_) => "conv3d",
            LayerSpec::CustomConv3d(_) => "custom_conv3d",
            LayerSpec::Conv2d(_) => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::FakeQuant(_) => "fake_quant",
            LayerSpec::Gap => "gap",
            LayerSpec::Linear { .. } => "linear",
        }
    }

    pub fn is_compute(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv3d(_) | LayerSpec::CustomConv3d(_) | LayerSpec::Conv2d(_) | LayerSpec::Linear { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub patch_size: usize,
    pub bands: usize,
    pub n_classes: usize,
    pub first_layer_mode: FirstLayerMode,
    pub layers: Vec<LayerSpec>,
}

/// Per-sample input and output shape of one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPlan {
    pub index: usize,
    pub kind: &'static str,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
}

impl LayerPlan {
    pub fn input_elements(&self) -> usize {
        self.input.iter().product()
    }

    pub fn output_elements(&self) -> usize {
        self.output.iter().product()
    }
}

impl ModelSpec {
    pub fn input_shape(&self) -> [usize; 4] {
        [1, self.bands, self.patch_size, self.patch_size]
    }

    pub fn first_compute(&self) -> Option<(usize, &LayerSpec)> {
        self.layers.iter().enumerate().find(|(_, l)| l.is_compute())
    }

    /// Quantizer applied to the first compute layer's activation, if any: the
    /// first `FakeQuant` before the second compute layer.
    pub fn first_activation_quant(&self) -> Option<QuantSpec> {
        let (first, _) = self.first_compute()?;
        self.layers[first + 1..].iter().take_while(|l| !l.is_compute()).find_map(|l| match l {
            LayerSpec::FakeQuant(q) => Some(*q),
            _ => None,
        })
    }

    /// Geometry of the first layer in the form used by the compression model.
    pub fn first_layer_geometry(&self) -> Result<LayerGeometry> {
        let (index, layer) = self.first_compute().ok_or(Error::Empty("model has no compute layer"))?;
        let (LayerSpec::Conv3d(c) | LayerSpec::CustomConv3d(c)) = layer else {
            return Err(Error::ShapeChain {
                layer: index,
                reason: "first compute layer is not a 3-D convolution".into(),
            });
        };
        Ok(LayerGeometry {
            h_i: self.patch_size,
            w_i: self.patch_size,
            c_i: 1,
            d_i: self.bands,
            kernel: Hwd::new(c.kernel[1], c.kernel[2], c.kernel[0]),
            padding: Hwd::new(c.padding[1], c.padding[2], c.padding[0]),
            stride: Hwd::new(c.stride[1], c.stride[2], c.stride[0]),
            c_o: c.out_channels,
            n_bits: self.first_activation_quant().map_or(SENSOR_DEPTH_BITS, |q| q.n_bits),
            sensor_depth: SENSOR_DEPTH_BITS,
        })
    }

    /// Resolves every layer's shape, checking the chain and structural rules.
    pub fn plan(&self) -> Result<Vec<LayerPlan>> {
        let chain = |layer: usize, reason: String| Error::ShapeChain { layer, reason };
        if self.patch_size == 0 || self.patch_size.is_multiple_of(2) {
            return Err(chain(0, format!("patch size {} must be odd", self.patch_size)));
        }
        let first_compute = self.first_compute().map(|(i, _)| i);
        let mut shape: Vec<usize> = self.input_shape().to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = shape.clone();
            shape = match layer {
                LayerSpec::Conv3d(c) | LayerSpec::CustomConv3d(c) => {
                    if shape.len() != 4 {
                        return Err(chain(i, format!("3-D convolution needs [C, D, H, W], got {shape:?}")));
                    }
                    if matches!(layer, LayerSpec::CustomConv3d(_)) {
                        if Some(i) != first_compute {
                            return Err(chain(i, "custom_conv3d must be the first compute layer".into()));
                        }
                        if shape[0] != 1 {
                            return Err(chain(i, "custom_conv3d needs a single input channel".into()));
                        }
                    }
                    let mut s = vec![c.out_channels];
                    for (a, name) in ["depth", "height", "width"].into_iter().enumerate() {
                        s.push(
                            output_dim(name, shape[1 + a], c.kernel[a], c.padding[a], c.stride[a])
                                .map_err(|e| chain(i, e.to_string()))?,
                        );
                    }
                    s
                }
                LayerSpec::Conv2d(c) => {
                    let (ch, h, w) = match shape.len() {
                        4 => (shape[0] * shape[1], shape[2], shape[3]),
                        3 => (shape[0], shape[1], shape[2]),
                        _ => return Err(chain(i, format!("2-D convolution needs rank 3 or 4 input, got {shape:?}"))),
                    };
                    let _ = ch;
                    let mut s = vec![c.out_channels];
                    for (a, (name, z)) in [("height", h), ("width", w)].into_iter().enumerate() {
                        s.push(
                            output_dim(name, z, c.kernel[a], c.padding[a], c.stride[a])
                                .map_err(|e| chain(i, e.to_string()))?,
                        );
                    }
                    s
                }
                LayerSpec::Relu => shape,
                LayerSpec::FakeQuant(q) => {
                    q.validate().map_err(|e| chain(i, e.to_string()))?;
                    shape
                }
                LayerSpec::Gap => {
                    if shape.len() < 2 {
                        return Err(chain(i, "global average pooling needs a spatial extent".into()));
                    }
                    vec![shape[0]]
                }
                LayerSpec::Linear { out_features } => vec![*out_features],
            };
            if shape.contains(&0) {
                return Err(chain(i, format!("empty output shape {shape:?}")));
            }
            out.push(LayerPlan { index: i, kind: layer.kind(), input, output: shape.clone() });
        }
        if shape != [self.n_classes] {
            return Err(chain(
                self.layers.len().saturating_sub(1),
                format!("model output {shape:?} does not match {} classes", self.n_classes),
            ));
        }
        let pip_first = matches!(first_compute.map(|i| &self.layers[i]), Some(LayerSpec::CustomConv3d(_)));
        if pip_first != (self.first_layer_mode == FirstLayerMode::Pip) {
            return Err(chain(
                first_compute.unwrap_or(0),
                "first_layer_mode must be pip exactly when the first layer is custom_conv3d".into(),
            ));
        }
        Ok(out)
    }
}

/// A structural difference between two model specs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SpecDifference {
    FirstLayerMode,
    FirstLayerChannels,
    FirstLayerStride,
    FirstLayerQuantization,
    Input,
    Layer(usize),
}

/// Differences between `a` and `b`, with first-layer changes classified. Layers
/// are aligned after removing each spec's first-activation quantizer.
pub fn spec_diff(a: &ModelSpec, b: &ModelSpec) -> Vec<SpecDifference> {
    let mut diffs = Vec::new();
    if (a.patch_size, a.bands, a.n_classes) != (b.patch_size, b.bands, b.n_classes) {
        diffs.push(SpecDifference::Input);
    }
    if a.first_layer_mode != b.first_layer_mode {
        diffs.push(SpecDifference::FirstLayerMode);
    }
    if a.first_activation_quant() != b.first_activation_quant() {
        diffs.push(SpecDifference::FirstLayerQuantization);
    }
    let strip = |s: &ModelSpec| -> Vec<LayerSpec> {
        let first = s.first_compute().map(|(i, _)| i).unwrap_or(0);
        let next = s.layers[first + 1..].iter().position(|l| l.is_compute()).map_or(s.layers.len(), |p| first + 1 + p);
        s.layers
            .iter()
            .enumerate()
            .filter(|(i, l)| !(matches!(l, LayerSpec::FakeQuant(_)) && *i > first && *i < next))
            .map(|(_, l)| *l)
            .collect()
    };
    let (la, lb) = (strip(a), strip(b));
    if la.len() != lb.len() {
        diffs.push(SpecDifference::Layer(la.len().min(lb.len())));
        return diffs;
    }
    let mut seen_first = false;
    for (i, (x, y)) in la.iter().zip(&lb).enumerate() {
        let first = !seen_first && x.is_compute();
        seen_first |= x.is_compute();
        match (x, y) {
            (LayerSpec::Conv3d(p) | LayerSpec::CustomConv3d(p), LayerSpec::Conv3d(q) | LayerSpec::CustomConv3d(q))
                if first =>
            {
                if p.out_channels != q.out_channels {
                    diffs.push(SpecDifference::FirstLayerChannels);
                }
                if p.stride != q.stride {
                    diffs.push(SpecDifference::FirstLayerStride);
                }
                if (p.kernel, p.padding) != (q.kernel, q.padding) {
                    diffs.push(SpecDifference::Layer(i));
                }
            }
            _ if x != y => diffs.push(SpecDifference::Layer(i)),
            _ => {}
        }
    }
    diffs
}

/// Options for the CNN-3D reference architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Cnn3dOptions {
    pub first_channels: usize,
    pub spectral_stride: usize,
    pub quant_bits: Option<u32>,
    pub pip: bool,
    /// Output channels of layers 2..=6.
    pub hidden: Vec<usize>,
    pub patch_size: usize,
}

impl Cnn3dOptions {
    pub fn baseline() -> Self {
        Self {
            first_channels: 20,
            spectral_stride: 1,
            quant_bits: None,
            pip: false,
            hidden: vec![4, 8, 16, 32, 64],
            patch_size: 5,
        }
    }

    /// In-pixel variant: 2 channels, spectral stride 3, `n_bits` activations.
    pub fn custom(n_bits: u32) -> Self {
        Self { first_channels: 2, spectral_stride: 3, quant_bits: Some(n_bits), pip: true, ..Self::baseline() }
    }

    pub fn build(&self, bands: usize, n_classes: usize) -> ModelSpec {
        let mut layers = Vec::new();
        let first = Conv3dSpec {
            out_channels: self.first_channels,
            kernel: [3; 3],
            stride: [self.spectral_stride, 1, 1],
            padding: [0; 3],
        };
        layers.push(if self.pip { LayerSpec::CustomConv3d(first) } else { LayerSpec::Conv3d(first) });
        layers.push(LayerSpec::Relu);
        if let Some(bits) = self.quant_bits {
            layers.push(LayerSpec::FakeQuant(QuantSpec::calibrated(bits)));
        }
        for &c in &self.hidden {
            layers.push(LayerSpec::Conv3d(Conv3dSpec {
                out_channels: c,
                kernel: [3; 3],
                stride: [2, 1, 1],
                padding: [1; 3],
            }));
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Linear { out_features: n_classes });
        ModelSpec {
            name: "cnn3d".into(),
            patch_size: self.patch_size,
            bands,
            n_classes,
            first_layer_mode: if self.pip { FirstLayerMode::Pip } else { FirstLayerMode::Digital },
            layers,
        }
    }
}

/// Options for the CNN-32H reference architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Cnn32hOptions {
    pub first_channels: usize,
    pub spectral_stride: usize,
    pub quant_bits: Option<u32>,
    pub pip: bool,
    /// Output channels of the two 2-D layers.
    pub hidden: [usize; 2],
    pub patch_size: usize,
}

impl Cnn32hOptions {
    pub fn baseline() -> Self {
        Self { first_channels: 16, spectral_stride: 1, quant_bits: None, pip: false, hidden: [32, 32], patch_size: 3 }
    }

    /// In-pixel variant: 4 channels, spectral stride 3, `n_bits` activations.
    pub fn custom(n_bits: u32) -> Self {
        Self { first_channels: 4, spectral_stride: 3, quant_bits: Some(n_bits), pip: true, ..Self::baseline() }
    }

    pub fn build(&self, bands: usize, n_classes: usize) -> ModelSpec {
        let first = Conv3dSpec {
            out_channels: self.first_channels,
            kernel: [3; 3],
            stride: [self.spectral_stride, 1, 1],
            padding: [0; 3],
        };
        let mut layers =
            vec![if self.pip { LayerSpec::CustomConv3d(first) } else { LayerSpec::Conv3d(first) }, LayerSpec::Relu];
        if let Some(bits) = self.quant_bits {
            layers.push(LayerSpec::FakeQuant(QuantSpec::calibrated(bits)));
        }
        for c in self.hidden {
            layers.push(LayerSpec::Conv2d(Conv2dSpec {
                out_channels: c,
                kernel: [3, 3],
                stride: [1, 1],
                padding: [1, 1],
            }));
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Gap);
        layers.push(LayerSpec::Linear { out_features: n_classes });
        ModelSpec {
            name: "cnn32h".into(),
            patch_size: self.patch_size,
            bands,
            n_classes,
            first_layer_mode: if self.pip { FirstLayerMode::Pip } else { FirstLayerMode::Digital },
            layers,
        }
    }
}

#[derive(Debug, Clone)]
struct Params {
    weights: GradTensor,
    bias: GradTensor,
}

/// Runtime state of a fake-quantization layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantState {
    pub spec: QuantSpec,
    /// `false` while a learned range still awaits calibration; the layer is then
    /// the identity.
    pub calibrated: bool,
}

#[derive(Debug, Clone)]
enum Layer {
    Conv3d(Params, Conv3dConfig),
    Custom(Params, Conv3dConfig),
    Conv2d(Params, Conv2dConfig),
    Relu,
    FakeQuant(QuantState),
    Gap,
    Linear(Params),
}

#[derive(Debug)]
enum Saved {
    Conv3d(ops::ConvContext),
    Custom(pixel::CustomConvContext),
    Conv2d(ops::Conv2dContext, Vec<usize>),
    Relu(GradTensor),
    FakeQuant(GradTensor),
    Gap(Vec<usize>),
    Linear(ops::LinearContext, Vec<usize>),
}

/// Layer contexts recorded by [`Model::forward`] for [`Model::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    saved: Vec<Saved>,
    clamped: usize,
}

impl Tape {
    /// Element evaluations clamped into the transfer domain during the forward pass.
    pub fn clamped(&self) -> usize {
        self.clamped
    }

    /// Inputs of fake-quantization layers that are still awaiting calibration.
    pub fn calibration_inputs(&self) -> impl Iterator<Item = (usize, &GradTensor)> {
        self.saved.iter().enumerate().filter_map(|(i, s)| match s {
            Saved::FakeQuant(x) => Some((i, x)),
            _ => None,
        })
    }
}

/// Executable model built from a [`ModelSpec`].
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    plan: Vec<LayerPlan>,
    layers: Vec<Layer>,
    transfer: Option<PixelTransferModel>,
    /// Gradient rule of the fake-quantization layers. Defaults to
    /// [`SteMode::Clipped`]: with pass-through gradients the frozen range
    /// saturates during training.
    pub ste_mode: SteMode,
}

/// He-uniform: `U(±sqrt(6 / fan_in))`, fan counted over the full kernel volume.
fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> GradTensor {
    let limit = libm::sqrt(6.0 / fan_in as f64);
    let len = shape.iter().product();
    let v = (0..len).map(|_| rng.random_range(-limit..=limit)).collect();
    GradTensor::from_vec(shape, v).expect("shape product matches")
}

/// Builds an executable model; weights are drawn from `seed`.
pub fn build_model(spec: &ModelSpec, transfer: Option<PixelTransferModel>, seed: u64) -> Result<Model> {
    let plan = spec.plan()?;
    if spec.first_layer_mode == FirstLayerMode::Pip && transfer.is_none() {
        return Err(Error::MissingTransfer);
    }
    if let Some(t) = &transfer {
        t.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (layer, p) in spec.layers.iter().zip(&plan) {
        let built = match layer {
            LayerSpec::Conv3d(c) | LayerSpec::CustomConv3d(c) => {
                let c_in = p.input[0];
                let vol: usize = c.kernel.iter().product();
                let shape = [c.out_channels, c_in, c.kernel[0], c.kernel[1], c.kernel[2]];
                let params = Params {
                    weights: he_uniform(&mut rng, &shape, c_in * vol),
                    bias: GradTensor::zeros(&[c.out_channels]),
                };
                let cfg = Conv3dConfig::new(c.stride, c.padding);
                if matches!(layer, LayerSpec::CustomConv3d(_)) {
                    Layer::Custom(params, cfg)
                } else {
                    Layer::Conv3d(params, cfg)
                }
            }
            LayerSpec::Conv2d(c) => {
                let c_in = if p.input.len() == 4 { p.input[0] * p.input[1] } else { p.input[0] };
                let vol = c.kernel[0] * c.kernel[1];
                let shape = [c.out_channels, c_in, c.kernel[0], c.kernel[1]];
                Layer::Conv2d(
                    Params {
                        weights: he_uniform(&mut rng, &shape, c_in * vol),
                        bias: GradTensor::zeros(&[c.out_channels]),
                    },
                    Conv2dConfig::new(c.stride, c.padding),
                )
            }
            LayerSpec::Linear { out_features } => {
                let fan_in = p.input_elements();
                Layer::Linear(Params {
                    weights: he_uniform(&mut rng, &[*out_features, fan_in], fan_in),
                    bias: GradTensor::zeros(&[*out_features]),
                })
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::FakeQuant(q) => Layer::FakeQuant(QuantState { spec: *q, calibrated: !q.learned_range }),
            LayerSpec::Gap => Layer::Gap,
        };
        layers.push(built);
    }
    Ok(Model { spec: spec.clone(), plan, layers, transfer, ste_mode: SteMode::Clipped })
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn plan(&self) -> &[LayerPlan] {
        &self.plan
    }

    pub fn transfer(&self) -> Option<&PixelTransferModel> {
        self.transfer.as_ref()
    }

    fn params_of(layer: &Layer) -> Option<&Params> {
        match layer {
            Layer::Conv3d(p, _) | Layer::Custom(p, _) | Layer::Conv2d(p, _) | Layer::Linear(p) => Some(p),
            _ => None,
        }
    }

    /// Trainable tensors in layer order, weights before bias.
    pub fn parameters(&self) -> Vec<&GradTensor> {
        self.layers.iter().filter_map(Self::params_of).flat_map(|p| [&p.weights, &p.bias]).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut GradTensor> {
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::Conv3d(p, _) | Layer::Custom(p, _) | Layer::Conv2d(p, _) | Layer::Linear(p) => Some(p),
                _ => None,
            })
            .flat_map(|p| [&mut p.weights, &mut p.bias])
            .collect()
    }

    /// Replaces parameter values; shapes must match [`Model::parameters`].
    pub fn load_parameters(&mut self, values: &[Vec<f64>]) -> Result<()> {
        let mut params = self.parameters_mut();
        if params.len() != values.len() {
            return Err(Error::ShapeMismatch { axis: "parameter list", expected: params.len(), found: values.len() });
        }
        for (p, v) in params.iter_mut().zip(values) {
            if p.len() != v.len() {
                return Err(Error::ShapeMismatch { axis: "parameter", expected: p.len(), found: v.len() });
            }
            p.values_mut().copy_from_slice(v);
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    /// Fake-quantization states by layer index.
    pub fn quant_states(&self) -> Vec<(usize, QuantState)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                Layer::FakeQuant(q) => Some((i, *q)),
                _ => None,
            })
            .collect()
    }

    pub fn set_quant_state(&mut self, layer: usize, state: QuantState) -> Result<()> {
        match self.layers.get_mut(layer) {
            Some(Layer::FakeQuant(q)) => {
                state.spec.validate()?;
                *q = state;
                Ok(())
            }
            _ => Err(Error::InvalidConfig(format!("layer {layer} is not a fake-quantization layer"))),
        }
    }

    pub fn needs_calibration(&self) -> bool {
        self.quant_states().iter().any(|(_, q)| !q.calibrated)
    }

    /// Forward pass over a `[N, 1, D, n, n]` batch, returning logits `[N, classes]`
    /// and the tape for [`Model::backward`].
    pub fn forward(&self, input: &GradTensor) -> Result<(GradTensor, Tape)> {
        let expected = self.spec.input_shape();
        if input.rank() != 5 || input.shape()[1..] != expected {
            return Err(Error::ShapeMismatch {
                axis: "model input",
                expected: expected.iter().product(),
                found: input.shape().get(1..).map_or(0, |s| s.iter().product()),
            });
        }
        let batch = input.shape()[0];
        let mut x = input.clone();
        let mut tape = Tape::default();
        for layer in &self.layers {
            let (y, saved) = match layer {
                Layer::Conv3d(p, cfg) => {
                    let (y, ctx) = ops::conv3d_record(&x, &p.weights, &p.bias, *cfg)?;
                    (y, Saved::Conv3d(ctx))
                }
                Layer::Custom(p, cfg) => {
                    let transfer = self.transfer.as_ref().ok_or(Error::MissingTransfer)?;
                    let out = pixel::custom_conv3d(&x, &p.weights, &p.bias, transfer, *cfg)?;
                    tape.clamped += out.clamped;
                    (out.output, Saved::Custom(out.context))
                }
                Layer::Conv2d(p, cfg) => {
                    let shape = x.shape().to_vec();
                    let folded = if shape.len() == 5 {
                        x.reshape(&[shape[0], shape[1] * shape[2], shape[3], shape[4]])?
                    } else {
                        x
                    };
                    let (y, ctx) = ops::conv2d_record(&folded, &p.weights, &p.bias, *cfg)?;
                    (y, Saved::Conv2d(ctx, shape))
                }
                Layer::Relu => (ops::relu(&x), Saved::Relu(x)),
                Layer::FakeQuant(q) => {
                    let y = if q.calibrated { quant::fake_quantize(&x, &q.spec) } else { x.clone() };
                    (y, Saved::FakeQuant(x))
                }
                Layer::Gap => {
                    let shape = x.shape().to_vec();
                    (ops::gap(&x)?, Saved::Gap(shape))
                }
                Layer::Linear(p) => {
                    let shape = x.shape().to_vec();
                    let features = x.len() / batch.max(1);
                    let flat = x.reshape(&[batch, features])?;
                    let (y, ctx) = ops::linear_record(&flat, &p.weights, &p.bias)?;
                    (y, Saved::Linear(ctx, shape))
                }
            };
            tape.saved.push(saved);
            x = y;
        }
        Ok((x, tape))
    }

    /// Logits only.
    pub fn predict_logits(&self, input: &GradTensor) -> Result<GradTensor> {
        self.forward(input).map(|(y, _)| y)
    }

    /// Backpropagates `upstream` (gradient of the loss w.r.t. the logits) through
    /// the tape, accumulating into parameter gradients.
    pub fn backward(&mut self, tape: Tape, upstream: GradTensor) -> Result<()> {
        if tape.saved.len() != self.layers.len() {
            return Err(Error::MissingContext);
        }
        let mut g = upstream;
        for (layer, saved) in self.layers.iter_mut().zip(tape.saved).rev() {
            g = match (layer, saved) {
                (Layer::Conv3d(p, _), Saved::Conv3d(ctx)) => {
                    let grads = ops::conv3d_backward(&ctx, &g)?;
                    p.weights.accumulate_grad(grads.weights.values())?;
                    p.bias.accumulate_grad(grads.bias.values())?;
                    grads.input
                }
                (Layer::Custom(p, _), Saved::Custom(ctx)) => {
                    let grads = pixel::custom_conv3d_backward(&ctx, &g)?;
                    p.weights.accumulate_grad(grads.weights.values())?;
                    p.bias.accumulate_grad(grads.bias.values())?;
                    grads.input
                }
                (Layer::Conv2d(p, _), Saved::Conv2d(ctx, shape)) => {
                    let grads = ops::conv2d_backward(&ctx, &g)?;
                    p.weights.accumulate_grad(grads.weights.values())?;
                    p.bias.accumulate_grad(grads.bias.values())?;
                    grads.input.reshape(&shape)?
                }
                (Layer::Relu, Saved::Relu(x)) => ops::relu_backward(&x, &g)?,
                (Layer::FakeQuant(q), Saved::FakeQuant(x)) => quant::ste_backward(&g, &x, &q.spec, self.ste_mode)?,
                (Layer::Gap, Saved::Gap(shape)) => ops::gap_backward(&shape, &g)?,
                (Layer::Linear(p), Saved::Linear(ctx, shape)) => {
                    let grads = ops::linear_backward(&ctx, &g)?;
                    p.weights.accumulate_grad(grads.weights.values())?;
                    p.bias.accumulate_grad(grads.bias.values())?;
                    grads.input.reshape(&shape)?
                }
                _ => return Err(Error::MissingContext),
            };
        }
        Ok(())
    }

    /// Output of the first compute layer's activation block (through its ReLU and
    /// quantizer), i.e. the tensor an in-pixel front end would transmit.
    pub fn first_activation(&self, input: &GradTensor) -> Result<GradTensor> {
        let (first, _) = self.spec.first_compute().ok_or(Error::Empty("model has no compute layer"))?;
        let end = self.spec.layers[first + 1..]
            .iter()
            .position(|l| l.is_compute())
            .map_or(self.layers.len(), |p| first + 1 + p);
        let mut truncated = self.clone();
        truncated.layers.truncate(end);
        let mut x = input.clone();
        for layer in &truncated.layers {
            x = match layer {
                Layer::Conv3d(p, cfg) => ops::conv3d_forward(&x, &p.weights, &p.bias, *cfg)?,
                Layer::Custom(p, cfg) => {
                    let t = self.transfer.as_ref().ok_or(Error::MissingTransfer)?;
                    pixel::custom_conv3d(&x, &p.weights, &p.bias, t, *cfg)?.output
                }
                Layer::Relu => ops::relu(&x),
                Layer::FakeQuant(q) if q.calibrated => quant::fake_quantize(&x, &q.spec),
                Layer::FakeQuant(_) => x,
                _ => return Err(Error::InvalidConfig("unexpected layer in first block".into())),
            };
        }
        Ok(x)
    }
}
