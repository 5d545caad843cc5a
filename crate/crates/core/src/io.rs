//! Raw float volumes and stacks, key=value sidecars and 16-bit PGM images.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: expected {expected} bytes, found {found}")]
    Size {
        path: String,
        expected: usize,
        found: usize,
    },
    #[error("{path}: missing key {key}")]
    MissingKey { path: String, key: String },
    #[error("{path}: bad value for {key}: {value}")]
    BadValue { path: String, key: String, value: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Little-endian 32-bit floats.
pub fn write_raw_f32<I>(path: &Path, values: I) -> Result<(), IoError>
where
    I: IntoIterator<Item = f32>,
{
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for v in values {
        w.write_all(&v.to_le_bytes()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_raw_f32(path: &Path, count: usize) -> Result<Vec<f32>, IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() != count * 4 {
        return Err(IoError::Size {
            path: path.display().to_string(),
            expected: count * 4,
            found: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Sidecar metadata: sorted `key=value` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Meta(pub BTreeMap<String, String>);

impl Meta {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.0.insert(key.to_string(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse(text: &str) -> Self {
        Self(
            text.lines()
                .filter_map(|l| l.split_once('='))
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .collect(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        Ok(Self::parse(&fs::read_to_string(path).map_err(io_err(path))?))
    }

    /// Typed lookup; `path` only labels errors.
    pub fn parsed<T: std::str::FromStr>(&self, key: &str, path: &Path) -> Result<T, IoError> {
        let value = self.get(key).ok_or_else(|| IoError::MissingKey {
            path: path.display().to_string(),
            key: key.to_string(),
        })?;
        value.parse().map_err(|_| IoError::BadValue {
            path: path.display().to_string(),
            key: key.to_string(),
            value: value.to_string(),
        })
    }
}

/// Binary 16-bit PGM. `pixels` is row-major with row 0 at the top; values
/// are mapped linearly from `[lo, hi]` onto `[0, 65535]` and clamped.
pub fn write_pgm16(path: &Path, width: usize, height: usize, pixels: &[f64], lo: f64, hi: f64) -> Result<(), IoError> {
    assert_eq!(pixels.len(), width * height, "pixel count");
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    let scale = if hi > lo { 65535.0 / (hi - lo) } else { 0.0 };
    for &p in pixels {
        let q = ((p - lo) * scale).round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Reads a binary 16-bit PGM written by [`write_pgm16`].
pub fn read_pgm16(path: &Path) -> Result<(usize, usize, Vec<u16>), IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = |v: &str| IoError::BadValue {
        path: path.display().to_string(),
        key: "header".into(),
        value: v.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "65535" {
        return Err(bad(&fields.join(" ")));
    }
    let w: usize = fields[1].parse().map_err(|_| bad(&fields[1]))?;
    let h: usize = fields[2].parse().map_err(|_| bad(&fields[2]))?;
    let data = &bytes[pos.min(bytes.len())..];
    if data.len() != w * h * 2 {
        return Err(IoError::Size {
            path: path.display().to_string(),
            expected: w * h * 2,
            found: data.len(),
        });
    }
    Ok((w, h, data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()))
}
