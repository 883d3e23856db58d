//! Text headers shared by the cube, label, transfer and checkpoint files.
//!
//! A header is ASCII text: a magic line, then `key = value` lines (blank lines
//! and `#` comments are ignored), then a line reading `end`. Any binary payload
//! starts right after the newline that terminates `end`.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub magic: String,
    entries: Vec<(String, String)>,
}

impl Header {
    pub fn new(magic: &str) -> Self {
        Self { magic: magic.to_string(), entries: Vec::new() }
    }

    pub fn push(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.entries.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn keys_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a str)> + 'a {
        self.entries.iter().filter_map(move |(k, v)| k.strip_prefix(prefix).map(|rest| (rest, v.as_str())))
    }

    pub fn require(&self, key: &str, path: &Path) -> Result<&str> {
        self.get(key).ok_or_else(|| CliError::format(path, format!("header is missing `{key}`")))
    }

    pub fn parse<T: FromStr>(&self, key: &str, path: &Path) -> Result<T>
    where
        T::Err: Display,
    {
        let raw = self.require(key, path)?;
        raw.parse().map_err(|e| CliError::format(path, format!("header field `{key} = {raw}`: {e}")))
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T, path: &Path) -> Result<T>
    where
        T::Err: Display,
    {
        match self.get(key) {
            Some(_) => self.parse(key, path),
            None => Ok(default),
        }
    }

    pub fn render(&self) -> String {
        let mut out = format!("{}\n", self.magic);
        for (k, v) in &self.entries {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out.push_str("end\n");
        out
    }

    /// Splits `bytes` into the header and the payload that follows it.
    pub fn split<'a>(bytes: &'a [u8], magic: &str, path: &Path) -> Result<(Header, &'a [u8])> {
        let mut offset = 0;
        let mut header: Option<Header> = None;
        while offset < bytes.len() {
            let end = bytes[offset..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |p| offset + p);
            let line = std::str::from_utf8(&bytes[offset..end])
                .map_err(|_| CliError::format(path, "header is not valid UTF-8"))?
                .trim();
            offset = (end + 1).min(bytes.len());
            match header.as_mut() {
                None => {
                    if line != magic {
                        return Err(CliError::format(path, format!("expected `{magic}` on the first line")));
                    }
                    header = Some(Header::new(magic));
                }
                Some(h) => {
                    if line == "end" {
                        return Ok((header.take().expect("header started"), &bytes[offset..]));
                    }
                    if line.is_empty() || line.starts_with('#') {
                        continue;
                    }
                    let (k, v) = line
                        .split_once('=')
                        .ok_or_else(|| CliError::format(path, format!("malformed header line `{line}`")))?;
                    h.push(k.trim(), v.trim());
                }
            }
        }
        Err(CliError::format(path, "header has no `end` line"))
    }
}

/// Comma-separated values, empty string for an empty list.
pub fn join<T: Display>(values: impl IntoIterator<Item = T>) -> String {
    values.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

pub fn split_list<T: FromStr>(raw: &str, key: &str, path: &Path) -> Result<Vec<T>>
where
    T::Err: Display,
{
    if raw.trim().is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|s| s.trim().parse().map_err(|e| CliError::format(path, format!("`{key}` entry `{s}`: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_payload() {
        let mut h = Header::new("MAGIC");
        h.push("a", 1).push("b", "x y");
        let mut bytes = h.render().into_bytes();
        bytes.extend_from_slice(&[0, 10, 255]);
        let (back, payload) = Header::split(&bytes, "MAGIC", Path::new("t")).unwrap();
        assert_eq!(back, h);
        assert_eq!(payload, &[0, 10, 255]);
    }

    #[test]
    fn wrong_magic_and_missing_end() {
        assert!(Header::split(b"OTHER\nend\n", "MAGIC", Path::new("t")).is_err());
        assert!(Header::split(b"MAGIC\na = 1\n", "MAGIC", Path::new("t")).is_err());
        assert!(Header::split(b"MAGIC\nnot a pair\nend\n", "MAGIC", Path::new("t")).is_err());
    }
}
