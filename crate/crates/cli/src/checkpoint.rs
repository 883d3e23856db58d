//! Versioned model checkpoints: a text header describing the architecture,
//! quantizer state and (for in-pixel models) the transfer model, followed by
//! every parameter tensor as little-endian `f64`.

use std::fs;
use std::path::Path;

use pip_hsi_core::model::{build_model, Cnn32hOptions, Cnn3dOptions, Model, QuantState};
use pip_hsi_core::quant::QuantSpec;

use crate::config::{Architecture, SteChoice};
use crate::error::{CliError, Result};
use crate::header::{join, split_list, Header};
use crate::transfer_io::{parse_transfer, push_transfer};

pub const CHECKPOINT_MAGIC: &str = "PIPHSI-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, model: &Model, arch: &Architecture, ste: SteChoice) -> Result<()> {
    let spec = model.spec();
    let mut h = Header::new(CHECKPOINT_MAGIC);
    h.push("version", CHECKPOINT_VERSION).push("byte_order", "little");
    match arch {
        Architecture::Cnn3d(o) => {
            h.push("arch", "cnn3d")
                .push("first_channels", o.first_channels)
                .push("spectral_stride", o.spectral_stride)
                .push("quant_bits", o.quant_bits.unwrap_or(0))
                .push("pip", o.pip)
                .push("hidden", join(&o.hidden))
                .push("patch_size", o.patch_size);
        }
        Architecture::Cnn32h(o) => {
            h.push("arch", "cnn32h")
                .push("first_channels", o.first_channels)
                .push("spectral_stride", o.spectral_stride)
                .push("quant_bits", o.quant_bits.unwrap_or(0))
                .push("pip", o.pip)
                .push("hidden", join(o.hidden))
                .push("patch_size", o.patch_size);
        }
    }
    h.push("ste", ste.name()).push("bands", spec.bands).push("classes", spec.n_classes);
    for (layer, q) in model.quant_states() {
        h.push(
            &format!("quant.{layer}"),
            format!(
                "{},{:?},{:?},{},{}",
                q.spec.n_bits, q.spec.clip_lo, q.spec.clip_hi, q.spec.learned_range, q.calibrated
            ),
        );
    }
    if let Some(t) = model.transfer() {
        push_transfer(&mut h, "transfer.", t);
    }
    let params = model.parameters();
    h.push("tensors", params.len());
    for (i, p) in params.iter().enumerate() {
        h.push(&format!("tensor.{i}"), join(p.shape()));
    }
    let mut out = h.render().into_bytes();
    for p in &params {
        for v in p.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(CliError::io(path))
}

/// Loaded model plus the options and gradient rule it was built with.
pub struct LoadedCheckpoint {
    pub model: Model,
    pub architecture: Architecture,
    pub ste: SteChoice,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    let (h, payload) = Header::split(&bytes, CHECKPOINT_MAGIC, path)?;
    let version: u32 = h.parse("version", path)?;
    if version != CHECKPOINT_VERSION {
        return Err(CliError::format(path, format!("unsupported checkpoint version {version}")));
    }
    if h.get("byte_order") != Some("little") {
        return Err(CliError::format(path, "checkpoint payload must be little-endian"));
    }
    let quant_bits: u32 = h.parse("quant_bits", path)?;
    let quant_bits = (quant_bits > 0).then_some(quant_bits);
    let first_channels = h.parse("first_channels", path)?;
    let spectral_stride = h.parse("spectral_stride", path)?;
    let pip = h.parse("pip", path)?;
    let patch_size = h.parse("patch_size", path)?;
    let hidden: Vec<usize> = split_list(h.require("hidden", path)?, "hidden", path)?;
    let architecture = match h.require("arch", path)? {
        "cnn3d" => {
            Architecture::Cnn3d(Cnn3dOptions { first_channels, spectral_stride, quant_bits, pip, hidden, patch_size })
        }
        "cnn32h" => Architecture::Cnn32h(Cnn32hOptions {
            first_channels,
            spectral_stride,
            quant_bits,
            pip,
            hidden: hidden
                .as_slice()
                .try_into()
                .map_err(|_| CliError::format(path, "cnn32h checkpoint needs two hidden widths"))?,
            patch_size,
        }),
        other => return Err(CliError::format(path, format!("unknown architecture `{other}`"))),
    };
    let ste = SteChoice::parse(h.require("ste", path)?).ok_or_else(|| CliError::format(path, "unknown `ste` value"))?;
    let spec = architecture.build(h.parse("bands", path)?, h.parse("classes", path)?);
    let transfer = match h.get("transfer.basis") {
        Some(_) => Some(parse_transfer(&h, "transfer.", path)?),
        None => None,
    };
    let mut model = build_model(&spec, transfer, 0)?;
    model.ste_mode = ste.mode();

    let count: usize = h.parse("tensors", path)?;
    let mut values = Vec::with_capacity(count);
    let mut floats = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut expected = 0usize;
    for i in 0..count {
        let shape: Vec<usize> = split_list(h.require(&format!("tensor.{i}"), path)?, "tensor shape", path)?;
        let len: usize = shape.iter().product();
        expected += len;
        values.push(floats.by_ref().take(len).collect::<Vec<f64>>());
    }
    if payload.len() != expected * 8 {
        return Err(CliError::format(
            path,
            format!("payload holds {} bytes, header implies {}", payload.len(), expected * 8),
        ));
    }
    model.load_parameters(&values)?;

    for (layer, raw) in h.keys_with_prefix("quant.") {
        let layer: usize = layer.parse().map_err(|_| CliError::format(path, format!("bad quant layer `{layer}`")))?;
        let f: Vec<&str> = raw.split(',').map(str::trim).collect();
        let parse_err = || CliError::format(path, format!("bad quantizer entry `{raw}`"));
        if f.len() != 5 {
            return Err(parse_err());
        }
        let state = QuantState {
            spec: QuantSpec {
                n_bits: f[0].parse().map_err(|_| parse_err())?,
                clip_lo: f[1].parse().map_err(|_| parse_err())?,
                clip_hi: f[2].parse().map_err(|_| parse_err())?,
                learned_range: f[3].parse().map_err(|_| parse_err())?,
            },
            calibrated: f[4].parse().map_err(|_| parse_err())?,
        };
        model.set_quant_state(layer, state)?;
    }
    Ok(LoadedCheckpoint { model, architecture, ste })
}
