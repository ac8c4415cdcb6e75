//! Single-band rasters stored as a one-line `rows cols dtype` text header
//! followed by little-endian row-major samples.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("malformed raster {path}: {reason}")]
    Format { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RasterDType {
    U8,
    I16,
    F32,
}

impl RasterDType {
    pub fn width(self) -> usize {
        match self {
            Self::U8 => 1,
            Self::I16 => 2,
            Self::F32 => 4,
        }
    }
}

impl fmt::Display for RasterDType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::U8 => "u8",
            Self::I16 => "i16",
            Self::F32 => "f32",
        })
    }
}

impl FromStr for RasterDType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "u8" => Ok(Self::U8),
            "i16" => Ok(Self::I16),
            "f32" => Ok(Self::F32),
            other => Err(format!("unknown dtype {other:?}")),
        }
    }
}

/// Raster values widened to `f64`. No-data sentinels (u8 255, i16 −32768,
/// f32 NaN) are stored as NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub rows: usize,
    pub cols: usize,
    pub dtype: RasterDType,
    pub values: Vec<f64>,
}

impl Raster {
    pub fn new(rows: usize, cols: usize, dtype: RasterDType, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), rows * cols, "raster value count");
        Self {
            rows,
            cols,
            dtype,
            values,
        }
    }

    /// `None` for no-data cells and out-of-range coordinates.
    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        if row >= self.rows || col >= self.cols {
            return None;
        }
        let v = self.values[row * self.cols + col];
        (!v.is_nan()).then_some(v)
    }

    pub fn read(path: &Path) -> Result<Self, RasterError> {
        let bytes = fs::read(path).map_err(|source| RasterError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&bytes).map_err(|reason| RasterError::Format {
            path: path.display().to_string(),
            reason,
        })
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, String> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or("missing header line")?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| "non-utf8 header")?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(format!("header must be `rows cols dtype`, got {header:?}"));
        }
        let rows: usize = parts[0]
            .parse()
            .map_err(|_| format!("bad row count {:?}", parts[0]))?;
        let cols: usize = parts[1]
            .parse()
            .map_err(|_| format!("bad column count {:?}", parts[1]))?;
        let dtype: RasterDType = parts[2].parse()?;
        let body = &bytes[nl + 1..];
        let need = rows * cols * dtype.width();
        if body.len() != need {
            return Err(format!(
                "expected {need} data bytes for {rows}×{cols} {dtype}, found {}",
                body.len()
            ));
        }
        let values = match dtype {
            RasterDType::U8 => body
                .iter()
                .map(|&b| if b == u8::MAX { f64::NAN } else { b as f64 })
                .collect(),
            RasterDType::I16 => body
                .chunks_exact(2)
                .map(|c| {
                    let v = i16::from_le_bytes([c[0], c[1]]);
                    if v == i16::MIN {
                        f64::NAN
                    } else {
                        v as f64
                    }
                })
                .collect(),
            RasterDType::F32 => body
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
        };
        Ok(Self {
            rows,
            cols,
            dtype,
            values,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{} {} {}\n", self.rows, self.cols, self.dtype).into_bytes();
        for &v in &self.values {
            match self.dtype {
                RasterDType::U8 => out.push(if v.is_nan() { u8::MAX } else { v as u8 }),
                RasterDType::I16 => {
                    out.extend((if v.is_nan() { i16::MIN } else { v as i16 }).to_le_bytes())
                }
                RasterDType::F32 => out.extend((v as f32).to_le_bytes()),
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), RasterError> {
        let io_err = |source| RasterError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io_err)?;
        f.write_all(&self.to_bytes()).map_err(io_err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_each_dtype() {
        for (dtype, vals) in [
            (RasterDType::U8, vec![0.0, 6.0, f64::NAN, 3.0]),
            (RasterDType::I16, vec![-2000.0, 8000.0, f64::NAN, 12.0]),
            (RasterDType::F32, vec![0.5, -1.25, f64::NAN, 1e4]),
        ] {
            let r = Raster::new(2, 2, dtype, vals.clone());
            let back = Raster::parse(&r.to_bytes()).unwrap();
            assert_eq!(back.dtype, dtype);
            for (a, b) in back.values.iter().zip(&vals) {
                assert!(a == b || (a.is_nan() && b.is_nan()));
            }
            assert_eq!(back.get(1, 0), None);
        }
    }

    #[test]
    fn header_is_text_line() {
        let r = Raster::new(1, 3, RasterDType::U8, vec![1.0, 2.0, 3.0]);
        assert!(r.to_bytes().starts_with(b"1 3 u8\n"));
        assert!(Raster::parse(b"1 3 u8\n\x01\x02").is_err());
        assert!(Raster::parse(b"1 3 u16\n\x01\x02\x03").is_err());
    }
}
