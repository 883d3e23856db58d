//! Fitted transfer models as key-value text, and raw samples as CSV.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a saved
//! model reloads bit for bit.

use std::fs;
use std::path::Path;

use pip_hsi_core::pixel::{FitDomain, PixelTransferModel, TransferBasis, TransferSample};

use crate::error::{CliError, Result};
use crate::header::{join, split_list, Header};

pub const TRANSFER_MAGIC: &str = "PIPHSI-TRANSFER";
pub const TRANSFER_VERSION: u32 = 1;

/// Appends the model's fields under `prefix` (e.g. `""` or `"transfer."`).
pub fn push_transfer(h: &mut Header, prefix: &str, t: &PixelTransferModel) {
    let key = |k: &str| format!("{prefix}{k}");
    h.push(&key("basis"), t.basis.name());
    if let TransferBasis::SeparablePolynomial { degree } = t.basis {
        h.push(&key("degree"), degree);
    }
    h.push(&key("w_min"), format!("{:?}", t.domain.w_min))
        .push(&key("w_max"), format!("{:?}", t.domain.w_max))
        .push(&key("x_min"), format!("{:?}", t.domain.x_min))
        .push(&key("x_max"), format!("{:?}", t.domain.x_max))
        .push(&key("rmse"), format!("{:?}", t.rmse))
        .push(&key("coefficients"), join(t.coefficients.iter().map(|c| format!("{c:?}"))));
}

pub fn parse_transfer(h: &Header, prefix: &str, path: &Path) -> Result<PixelTransferModel> {
    let key = |k: &str| format!("{prefix}{k}");
    let basis = match h.require(&key("basis"), path)? {
        "separable-polynomial" => TransferBasis::SeparablePolynomial { degree: h.parse(&key("degree"), path)? },
        "tanh-gain" => TransferBasis::TanhGain,
        other => return Err(CliError::format(path, format!("unknown transfer basis `{other}`"))),
    };
    let coefficients: Vec<f64> = split_list(h.require(&key("coefficients"), path)?, "coefficients", path)?;
    let model = PixelTransferModel {
        basis,
        coefficients,
        domain: FitDomain::new(
            h.parse(&key("w_min"), path)?,
            h.parse(&key("w_max"), path)?,
            h.parse(&key("x_min"), path)?,
            h.parse(&key("x_max"), path)?,
        ),
        rmse: h.parse(&key("rmse"), path)?,
    };
    model.validate().map_err(|e| CliError::format(path, e.to_string()))?;
    Ok(model)
}

pub fn write_transfer(path: &Path, t: &PixelTransferModel) -> Result<()> {
    let mut h = Header::new(TRANSFER_MAGIC);
    h.push("version", TRANSFER_VERSION);
    push_transfer(&mut h, "", t);
    fs::write(path, h.render()).map_err(CliError::io(path))
}

pub fn read_transfer(path: &Path) -> Result<PixelTransferModel> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    let (h, rest) = Header::split(&bytes, TRANSFER_MAGIC, path)?;
    if !rest.iter().all(u8::is_ascii_whitespace) {
        return Err(CliError::format(path, "unexpected data after `end`"));
    }
    let version: u32 = h.parse("version", path)?;
    if version != TRANSFER_VERSION {
        return Err(CliError::format(path, format!("unsupported transfer version {version}")));
    }
    parse_transfer(&h, "", path)
}

/// `w,x,v` with a header row.
pub fn write_samples(path: &Path, samples: &[TransferSample]) -> Result<()> {
    let to_err = |e: csv::Error| CliError::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    w.write_record(["w", "x", "v"]).map_err(to_err)?;
    for s in samples {
        w.write_record([format!("{:?}", s.w), format!("{:?}", s.x), format!("{:?}", s.v)]).map_err(to_err)?;
    }
    w.flush().map_err(CliError::io(path))
}

pub fn read_samples(path: &Path) -> Result<Vec<TransferSample>> {
    let to_err = |e: csv::Error| CliError::format(path, e.to_string());
    let mut r = csv::Reader::from_path(path).map_err(to_err)?;
    let mut out = Vec::new();
    for record in r.records() {
        let record = record.map_err(to_err)?;
        let field = |i: usize| -> Result<f64> {
            let raw = record.get(i).ok_or_else(|| CliError::format(path, "sample row needs 3 fields"))?;
            raw.trim().parse().map_err(|e| CliError::format(path, format!("sample `{raw}`: {e}")))
        };
        out.push(TransferSample { w: field(0)?, x: field(1)?, v: field(2)? });
    }
    Ok(out)
}
