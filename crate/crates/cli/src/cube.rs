//! Hyperspectral cube files and their label sidecars.
//!
//! The byte-level layout is documented in `docs/formats.md`. Reflectance is
//! stored band-interleaved by pixel, rows first; labels are one unsigned class
//! index per pixel with 0 meaning unlabeled.

use std::fs;
use std::path::{Path, PathBuf};

use pip_hsi_core::data::HsiCube;

use crate::error::{CliError, Result};
use crate::header::{join, split_list, Header};

pub const CUBE_MAGIC: &str = "PIPHSI-CUBE";
pub const LABELS_MAGIC: &str = "PIPHSI-LABELS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Encoding {
    /// Raw little- or big-endian elements.
    #[default]
    Binary,
    /// One comma-separated line per pixel (cube) or per row (labels).
    Text,
}

impl Encoding {
    fn name(self) -> &'static str {
        match self {
            Encoding::Binary => "binary",
            Encoding::Text => "text",
        }
    }

    fn parse(raw: &str, path: &Path) -> Result<Self> {
        match raw {
            "binary" => Ok(Encoding::Binary),
            "text" => Ok(Encoding::Text),
            other => Err(CliError::format(path, format!("unknown encoding `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dtype {
    U8,
    U16,
    F32,
    #[default]
    F64,
}

impl Dtype {
    fn name(self) -> &'static str {
        match self {
            Dtype::U8 => "u8",
            Dtype::U16 => "u16",
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::U16 => 2,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn parse(raw: &str, path: &Path) -> Result<Self> {
        match raw {
            "u8" => Ok(Dtype::U8),
            "u16" => Ok(Dtype::U16),
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(CliError::format(path, format!("unknown element type `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ByteOrder {
    #[default]
    Little,
    Big,
}

impl ByteOrder {
    fn name(self) -> &'static str {
        match self {
            ByteOrder::Little => "little",
            ByteOrder::Big => "big",
        }
    }

    fn parse(raw: &str, path: &Path) -> Result<Self> {
        match raw {
            "little" => Ok(ByteOrder::Little),
            "big" => Ok(ByteOrder::Big),
            other => Err(CliError::format(path, format!("unknown byte order `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WriteOptions {
    pub encoding: Encoding,
    pub dtype: Dtype,
    pub byte_order: ByteOrder,
}

/// Sidecar written next to `cube_path`: same stem, `.labels` extension.
pub fn labels_path_for(cube_path: &Path) -> PathBuf {
    cube_path.with_extension("labels")
}

fn decode(bytes: &[u8], dtype: Dtype, order: ByteOrder) -> f64 {
    macro_rules! read {
        ($t:ty) => {{
            let arr = bytes.try_into().expect("chunk has element size");
            match order {
                ByteOrder::Little => <$t>::from_le_bytes(arr) as f64,
                ByteOrder::Big => <$t>::from_be_bytes(arr) as f64,
            }
        }};
    }
    match dtype {
        Dtype::U8 => bytes[0] as f64,
        Dtype::U16 => read!(u16),
        Dtype::F32 => read!(f32),
        Dtype::F64 => read!(f64),
    }
}

fn encode(v: f64, dtype: Dtype, order: ByteOrder, out: &mut Vec<u8>, path: &Path) -> Result<()> {
    macro_rules! write {
        ($x:expr) => {
            match order {
                ByteOrder::Little => out.extend_from_slice(&$x.to_le_bytes()),
                ByteOrder::Big => out.extend_from_slice(&$x.to_be_bytes()),
            }
        };
    }
    let integral = |max: f64| {
        if v.fract() == 0.0 && (0.0..=max).contains(&v) {
            Ok(())
        } else {
            Err(CliError::format(path, format!("value {v} does not fit element type {}", dtype.name())))
        }
    };
    match dtype {
        Dtype::U8 => {
            integral(u8::MAX as f64)?;
            out.push(v as u8);
        }
        Dtype::U16 => {
            integral(u16::MAX as f64)?;
            write!(v as u16);
        }
        Dtype::F32 => write!(v as f32),
        Dtype::F64 => write!(v),
    }
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(CliError::io(path))
}

fn text_values<'a>(payload: &'a [u8], path: &Path) -> Result<Vec<&'a str>> {
    let text = std::str::from_utf8(payload).map_err(|_| CliError::format(path, "text payload is not UTF-8"))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).flat_map(|l| l.split(',')).map(str::trim).collect())
}

fn payload_mismatch(path: &Path, expected: usize, found: usize, unit: &str) -> CliError {
    CliError::format(path, format!("payload holds {found} {unit}, header implies {expected}"))
}

/// Reads a cube and, when its header names one, the label sidecar. Without a
/// sidecar every pixel is unlabeled.
pub fn read_cube(path: &Path) -> Result<HsiCube> {
    let bytes = read_file(path)?;
    let (h, payload) = Header::split(&bytes, CUBE_MAGIC, path)?;
    let version: u32 = h.parse("version", path)?;
    if version != FORMAT_VERSION {
        return Err(CliError::format(path, format!("unsupported cube version {version}")));
    }
    let height: usize = h.parse("height", path)?;
    let width: usize = h.parse("width", path)?;
    let bands: usize = h.parse("bands", path)?;
    let interleave = h.get("interleave").unwrap_or("bip");
    if interleave != "bip" {
        return Err(CliError::format(path, format!("unsupported interleave `{interleave}`")));
    }
    let dtype = Dtype::parse(h.get("dtype").unwrap_or("f64"), path)?;
    let order = ByteOrder::parse(h.get("byte_order").unwrap_or("little"), path)?;
    let encoding = Encoding::parse(h.get("encoding").unwrap_or("binary"), path)?;
    let count = height * width * bands;
    let reflectance = match encoding {
        Encoding::Binary => {
            if payload.len() != count * dtype.size() {
                return Err(payload_mismatch(path, count * dtype.size(), payload.len(), "bytes"));
            }
            payload.chunks_exact(dtype.size()).map(|c| decode(c, dtype, order)).collect()
        }
        Encoding::Text => {
            let values = text_values(payload, path)?;
            if values.len() != count {
                return Err(payload_mismatch(path, count, values.len(), "values"));
            }
            values
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| CliError::format(path, format!("value `{s}`: {e}"))))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let (labels, class_names) = match h.get("labels") {
        Some(rel) => {
            let lpath = path.parent().unwrap_or(Path::new(".")).join(rel);
            read_labels(&lpath, height, width)?
        }
        None => (vec![0; height * width], Vec::new()),
    };
    Ok(HsiCube::new(height, width, bands, reflectance, labels, class_names)?)
}

/// Reads a label sidecar and checks it against the cube's spatial size.
pub fn read_labels(path: &Path, height: usize, width: usize) -> Result<(Vec<u32>, Vec<String>)> {
    let bytes = read_file(path)?;
    let (h, payload) = Header::split(&bytes, LABELS_MAGIC, path)?;
    let version: u32 = h.parse("version", path)?;
    if version != FORMAT_VERSION {
        return Err(CliError::format(path, format!("unsupported labels version {version}")));
    }
    let (lh, lw): (usize, usize) = (h.parse("height", path)?, h.parse("width", path)?);
    if (lh, lw) != (height, width) {
        return Err(CliError::format(path, format!("labels are {lh}x{lw}, cube is {height}x{width}")));
    }
    let classes: usize = h.parse("classes", path)?;
    let names: Vec<String> = match h.get("class_names") {
        Some(raw) => split_list(raw, "class_names", path)?,
        None => (1..=classes).map(|c| format!("class{c}")).collect(),
    };
    if names.len() != classes {
        return Err(CliError::format(path, format!("{} class names for {classes} classes", names.len())));
    }
    let order = ByteOrder::parse(h.get("byte_order").unwrap_or("little"), path)?;
    let count = height * width;
    let labels: Vec<u32> = match Encoding::parse(h.get("encoding").unwrap_or("binary"), path)? {
        Encoding::Binary => {
            if payload.len() != count * 4 {
                return Err(payload_mismatch(path, count * 4, payload.len(), "bytes"));
            }
            payload
                .chunks_exact(4)
                .map(|c| {
                    let arr = c.try_into().expect("4-byte chunk");
                    match order {
                        ByteOrder::Little => u32::from_le_bytes(arr),
                        ByteOrder::Big => u32::from_be_bytes(arr),
                    }
                })
                .collect()
        }
        Encoding::Text => {
            let values = text_values(payload, path)?;
            if values.len() != count {
                return Err(payload_mismatch(path, count, values.len(), "values"));
            }
            values
                .iter()
                .map(|s| s.parse::<u32>().map_err(|e| CliError::format(path, format!("label `{s}`: {e}"))))
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok((labels, names))
}

/// Writes `cube` to `path` and its labels to [`labels_path_for`]`(path)`.
pub fn write_cube(path: &Path, cube: &HsiCube, opts: WriteOptions) -> Result<()> {
    let lpath = labels_path_for(path);
    let lname = lpath
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| CliError::format(path, "cube path needs a UTF-8 file name"))?;
    let mut h = Header::new(CUBE_MAGIC);
    h.push("version", FORMAT_VERSION)
        .push("height", cube.height)
        .push("width", cube.width)
        .push("bands", cube.bands)
        .push("interleave", "bip")
        .push("dtype", opts.dtype.name())
        .push("byte_order", opts.byte_order.name())
        .push("encoding", opts.encoding.name())
        .push("labels", lname);
    let mut out = h.render().into_bytes();
    match opts.encoding {
        Encoding::Binary => {
            for &v in &cube.reflectance {
                encode(v, opts.dtype, opts.byte_order, &mut out, path)?;
            }
        }
        Encoding::Text => {
            for px in cube.reflectance.chunks(cube.bands.max(1)) {
                out.extend_from_slice(join(px.iter().map(|v| format!("{v:?}"))).as_bytes());
                out.push(b'\n');
            }
        }
    }
    fs::write(path, out).map_err(CliError::io(path))?;
    write_labels(&lpath, cube, opts)
}

fn write_labels(path: &Path, cube: &HsiCube, opts: WriteOptions) -> Result<()> {
    let mut h = Header::new(LABELS_MAGIC);
    h.push("version", FORMAT_VERSION)
        .push("height", cube.height)
        .push("width", cube.width)
        .push("classes", cube.n_classes())
        .push("byte_order", opts.byte_order.name())
        .push("encoding", opts.encoding.name());
    if cube.class_names.iter().all(|n| !n.contains(',') && n.trim() == n && !n.is_empty()) {
        h.push("class_names", join(&cube.class_names));
    }
    let mut out = h.render().into_bytes();
    match opts.encoding {
        Encoding::Binary => {
            for &l in &cube.labels {
                match opts.byte_order {
                    ByteOrder::Little => out.extend_from_slice(&l.to_le_bytes()),
                    ByteOrder::Big => out.extend_from_slice(&l.to_be_bytes()),
                }
            }
        }
        Encoding::Text => {
            for row in cube.labels.chunks(cube.width.max(1)) {
                out.extend_from_slice(join(row).as_bytes());
                out.push(b'\n');
            }
        }
    }
    fs::write(path, out).map_err(CliError::io(path))
}
