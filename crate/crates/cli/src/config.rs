//! Run configuration: a TOML file of flat `[section]` tables.
//!
//! The schema, with every key and default, is documented in `docs/config.md`.
//! Relative paths are resolved against the directory holding the config file.

use std::fs;
use std::path::{Path, PathBuf};

use pip_hsi_core::data::PadMode;
use pip_hsi_core::energy::{ActivationBits, EnergyParams, SarAdc};
use pip_hsi_core::model::{Cnn32hOptions, Cnn3dOptions, ModelSpec};
use pip_hsi_core::optim::TrainConfig;
use pip_hsi_core::pixel::{FitDomain, PixelBehavioralModel, TransferBasis};
use pip_hsi_core::quant::SteMode;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialization, mini-batch order, the random split, the
    /// synthetic scene and sample noise unless a section overrides it.
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub energy: EnergySection,
    #[serde(default)]
    pub transfer: TransferSection,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic,
    Cube,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PadChoice {
    #[default]
    Mirror,
    Zero,
    Edge,
}

impl From<PadChoice> for PadMode {
    fn from(p: PadChoice) -> Self {
        match p {
            PadChoice::Mirror => PadMode::Mirror,
            PadChoice::Zero => PadMode::Zero,
            PadChoice::Edge => PadMode::Edge,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default = "defaults::classes")]
    pub classes: usize,
    #[serde(default = "defaults::bands")]
    pub bands: usize,
    #[serde(default = "defaults::size")]
    pub size: usize,
    #[serde(default = "defaults::separation")]
    pub separation: f64,
    #[serde(default = "defaults::noise")]
    pub noise: f64,
    #[serde(default)]
    pub synth_seed: Option<u64>,
    #[serde(default)]
    pub cube: Option<PathBuf>,
    /// Second scene used as the test set; switches to a by-scene split.
    #[serde(default)]
    pub test_cube: Option<PathBuf>,
    #[serde(default = "defaults::yes")]
    pub normalize: bool,
    #[serde(default)]
    pub drop_bands: Vec<usize>,
    #[serde(default)]
    pub pad: PadChoice,
    #[serde(default = "defaults::train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub split_seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    Cnn3d,
    Cnn32h,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Baseline,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SteChoice {
    #[default]
    Clipped,
    PassThrough,
}

impl SteChoice {
    pub fn mode(self) -> SteMode {
        match self {
            SteChoice::Clipped => SteMode::Clipped,
            SteChoice::PassThrough => SteMode::PassThrough,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SteChoice::Clipped => "clipped",
            SteChoice::PassThrough => "pass-through",
        }
    }

    pub fn parse(raw: &str) -> Option<Self> {
        match raw {
            "clipped" => Some(SteChoice::Clipped),
            "pass-through" => Some(SteChoice::PassThrough),
            _ => None,
        }
    }
}

/// Architecture plus optional overrides of the variant's defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub first_channels: Option<usize>,
    #[serde(default)]
    pub spectral_stride: Option<usize>,
    /// Activation bits after the first layer; 0 disables quantization.
    #[serde(default)]
    pub quant_bits: Option<u32>,
    #[serde(default)]
    pub pip: Option<bool>,
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
    #[serde(default)]
    pub patch_size: Option<usize>,
    #[serde(default)]
    pub ste: SteChoice,
}

/// Fully resolved architecture options.
#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    Cnn3d(Cnn3dOptions),
    Cnn32h(Cnn32hOptions),
}

impl Architecture {
    pub fn build(&self, bands: usize, n_classes: usize) -> ModelSpec {
        match self {
            Architecture::Cnn3d(o) => o.build(bands, n_classes),
            Architecture::Cnn32h(o) => o.build(bands, n_classes),
        }
    }

    pub fn pip(&self) -> bool {
        match self {
            Architecture::Cnn3d(o) => o.pip,
            Architecture::Cnn32h(o) => o.pip,
        }
    }

    pub fn arch(&self) -> Arch {
        match self {
            Architecture::Cnn3d(_) => Arch::Cnn3d,
            Architecture::Cnn32h(_) => Arch::Cnn32h,
        }
    }

    pub fn patch_size(&self) -> usize {
        match self {
            Architecture::Cnn3d(o) => o.patch_size,
            Architecture::Cnn32h(o) => o.patch_size,
        }
    }
}

/// Default activation precision of the custom variants.
pub fn default_custom_bits(arch: Arch) -> u32 {
    match arch {
        Arch::Cnn3d => 6,
        Arch::Cnn32h => 5,
    }
}

impl ModelConfig {
    pub fn new(arch: Arch, variant: Variant) -> Self {
        Self {
            arch,
            variant,
            first_channels: None,
            spectral_stride: None,
            quant_bits: None,
            pip: None,
            hidden: None,
            patch_size: None,
            ste: SteChoice::default(),
        }
    }

    pub fn resolve(&self) -> Result<Architecture> {
        let quant = |default: Option<u32>| match self.quant_bits {
            Some(0) => None,
            Some(n) => Some(n),
            None => default,
        };
        let bad = |m: String| CliError::Usage(format!("[model] {m}"));
        Ok(match self.arch {
            Arch::Cnn3d => {
                let base = match self.variant {
                    Variant::Baseline => Cnn3dOptions::baseline(),
                    Variant::Custom => Cnn3dOptions::custom(default_custom_bits(Arch::Cnn3d)),
                };
                Architecture::Cnn3d(Cnn3dOptions {
                    first_channels: self.first_channels.unwrap_or(base.first_channels),
                    spectral_stride: self.spectral_stride.unwrap_or(base.spectral_stride),
                    quant_bits: quant(base.quant_bits),
                    pip: self.pip.unwrap_or(base.pip),
                    hidden: self.hidden.clone().unwrap_or(base.hidden),
                    patch_size: self.patch_size.unwrap_or(base.patch_size),
                })
            }
            Arch::Cnn32h => {
                let base = match self.variant {
                    Variant::Baseline => Cnn32hOptions::baseline(),
                    Variant::Custom => Cnn32hOptions::custom(default_custom_bits(Arch::Cnn32h)),
                };
                let hidden = match &self.hidden {
                    None => base.hidden,
                    Some(h) => <[usize; 2]>::try_from(h.as_slice())
                        .map_err(|_| bad(format!("cnn32h needs exactly two hidden widths, got {h:?}")))?,
                };
                Architecture::Cnn32h(Cnn32hOptions {
                    first_channels: self.first_channels.unwrap_or(base.first_channels),
                    spectral_stride: self.spectral_stride.unwrap_or(base.spectral_stride),
                    quant_bits: quant(base.quant_bits),
                    pip: self.pip.unwrap_or(base.pip),
                    hidden,
                    patch_size: self.patch_size.unwrap_or(base.patch_size),
                })
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::lr0")]
    pub lr0: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::decay_factor")]
    pub decay_factor: f64,
    /// Explicit milestones; when absent they sit at 60 %, 80 % and 90 % of `epochs`.
    #[serde(default)]
    pub decay_epochs: Option<Vec<usize>>,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    #[serde(default = "defaults::grad_clip")]
    pub grad_clip: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        toml::from_str("").expect("all train fields have defaults")
    }
}

impl TrainSection {
    pub fn to_config(&self, seed: u64, epochs_override: Option<usize>) -> TrainConfig {
        let epochs = epochs_override.unwrap_or(self.epochs);
        let scheduled = TrainConfig::default().with_scaled_schedule(epochs);
        TrainConfig {
            epochs,
            lr0: self.lr0,
            momentum: self.momentum,
            decay_factor: self.decay_factor,
            decay_epochs: self.decay_epochs.clone().unwrap_or(scheduled.decay_epochs),
            seed,
            batch_size: self.batch_size,
            grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergySection {
    #[serde(default = "defaults::one")]
    pub e_read: f64,
    #[serde(default = "defaults::one")]
    pub e_mac: f64,
    #[serde(default = "defaults::one")]
    pub e_pixel_readout: f64,
    #[serde(default = "defaults::one")]
    pub e_pixel_conv: f64,
    #[serde(default = "defaults::one")]
    pub adc_unit: f64,
    #[serde(default = "defaults::adc_base")]
    pub adc_base: f64,
    #[serde(default = "defaults::one")]
    pub e_comm_bit: f64,
    #[serde(default = "defaults::input_bits")]
    pub input_bits: u32,
    #[serde(default = "defaults::activation_bits")]
    pub activation_bits: u32,
}

impl Default for EnergySection {
    fn default() -> Self {
        toml::from_str("").expect("all energy fields have defaults")
    }
}

impl EnergySection {
    pub fn params(&self) -> EnergyParams {
        EnergyParams {
            e_read: self.e_read,
            e_mac: self.e_mac,
            e_pixel_readout: self.e_pixel_readout,
            e_pixel_conv: self.e_pixel_conv,
            adc: SarAdc { unit: self.adc_unit, base: self.adc_base },
            e_comm_bit: self.e_comm_bit,
        }
    }

    pub fn bits(&self) -> ActivationBits {
        ActivationBits { input: self.input_bits, activation: self.activation_bits }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisChoice {
    #[default]
    Polynomial,
    Tanh,
}

/// Pixel behavioral model, sampling grid and fitted form. `path` loads an
/// already fitted model instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSection {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "defaults::one")]
    pub v_sat: f64,
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default = "defaults::minus_one")]
    pub w_min: f64,
    #[serde(default = "defaults::one")]
    pub w_max: f64,
    #[serde(default)]
    pub x_min: f64,
    #[serde(default = "defaults::one")]
    pub x_max: f64,
    #[serde(default = "defaults::grid")]
    pub n_w: usize,
    #[serde(default = "defaults::grid")]
    pub n_x: usize,
    #[serde(default)]
    pub basis: BasisChoice,
    #[serde(default = "defaults::degree")]
    pub degree: usize,
}

impl Default for TransferSection {
    fn default() -> Self {
        toml::from_str("").expect("all transfer fields have defaults")
    }
}

impl TransferSection {
    pub fn pixel(&self) -> PixelBehavioralModel {
        PixelBehavioralModel { v_sat: self.v_sat, gamma: self.gamma, alpha: self.alpha, noise_sigma: self.noise_sigma }
    }

    pub fn domain(&self) -> FitDomain {
        FitDomain::new(self.w_min, self.w_max, self.x_min, self.x_max)
    }

    pub fn basis(&self) -> TransferBasis {
        match self.basis {
            BasisChoice::Polynomial => TransferBasis::SeparablePolynomial { degree: self.degree },
            BasisChoice::Tanh => TransferBasis::TanhGain,
        }
    }
}

mod defaults {
    pub fn classes() -> usize {
        3
    }
    pub fn bands() -> usize {
        60
    }
    pub fn size() -> usize {
        40
    }
    pub fn separation() -> f64 {
        0.5
    }
    pub fn noise() -> f64 {
        0.05
    }
    pub fn yes() -> bool {
        true
    }
    pub fn train_fraction() -> f64 {
        0.5
    }
    pub fn epochs() -> usize {
        100
    }
    pub fn lr0() -> f64 {
        0.01
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn decay_factor() -> f64 {
        10.0
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn grad_clip() -> f64 {
        1.0
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn minus_one() -> f64 {
        -1.0
    }
    pub fn adc_base() -> f64 {
        4.0
    }
    pub fn input_bits() -> u32 {
        12
    }
    pub fn activation_bits() -> u32 {
        8
    }
    pub fn gamma() -> f64 {
        1.5
    }
    pub fn alpha() -> f64 {
        0.2
    }
    pub fn grid() -> usize {
        40
    }
    pub fn degree() -> usize {
        7
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config { path: path.to_path_buf(), message: e.to_string() })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate(path)?;
        Ok(cfg)
    }

    /// `p` relative to the config file's directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let err = |message: String| CliError::Config { path: path.to_path_buf(), message };
        match self.data.source {
            DataSource::Cube => {
                let cube =
                    self.data.cube.as_ref().ok_or_else(|| err("[data] source = \"cube\" needs `cube`".into()))?;
                for p in std::iter::once(cube).chain(self.data.test_cube.as_ref()) {
                    if !self.resolve(p).is_file() {
                        return Err(err(format!("referenced file {} does not exist", self.resolve(p).display())));
                    }
                }
            }
            DataSource::Synthetic => {
                if self.data.cube.is_some() || self.data.test_cube.is_some() {
                    return Err(err("[data] cube paths are only used with source = \"cube\"".into()));
                }
            }
        }
        if let Some(p) = &self.transfer.path {
            if !self.resolve(p).is_file() {
                return Err(err(format!("referenced file {} does not exist", self.resolve(p).display())));
            }
        }
        if !(0.0..=1.0).contains(&self.data.train_fraction) {
            return Err(err(format!("[data] train_fraction {} not in [0, 1]", self.data.train_fraction)));
        }
        self.model.resolve()?;
        self.train.to_config(self.seed, None).validate()?;
        self.energy.params().validate()?;
        Ok(())
    }
}
