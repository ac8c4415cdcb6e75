//! RGB images with values in `[0, 1]`, bilinear resampling and PPM (P6) I/O.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("malformed PPM {path}: {reason}")]
    Format { path: String, reason: String },
}

/// Height × width × 3, row-major, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Self {
        let mut img = Self::new(height, width);
        for y in 0..height {
            for x in 0..width {
                img.set(y, x, f(y, x));
            }
        }
        img
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, px: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn channel_means(&self) -> [f32; 3] {
        let mut acc = [0.0f64; 3];
        for px in self.data.chunks(3) {
            for c in 0..3 {
                acc[c] += px[c] as f64;
            }
        }
        let n = (self.height * self.width).max(1) as f64;
        [
            (acc[0] / n) as f32,
            (acc[1] / n) as f32,
            (acc[2] / n) as f32,
        ]
    }

    /// Copies the rectangle `[top, top+h) × [left, left+w)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |y, x| self.get(top + y, left + x))
    }

    /// Bilinear resize with half-pixel centers (edge-clamped).
    pub fn resize(&self, out_h: usize, out_w: usize) -> Image {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / out_h as f64;
        let sx = self.width as f64 / out_w as f64;
        let taps = |o: usize, scale: f64, n: usize| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, (src - i0 as f64) as f32)
        };
        let cols: Vec<_> = (0..out_w).map(|x| taps(x, sx, self.width)).collect();
        Image::from_fn(out_h, out_w, |y, x| {
            let (y0, y1, fy) = taps(y, sy, self.height);
            let (x0, x1, fx) = cols[x];
            let (a, b, c, d) = (
                self.get(y0, x0),
                self.get(y0, x1),
                self.get(y1, x0),
                self.get(y1, x1),
            );
            let mut px = [0.0; 3];
            for k in 0..3 {
                let top = a[k] + (b[k] - a[k]) * fx;
                let bot = c[k] + (d[k] - c[k]) * fx;
                px[k] = top + (bot - top) * fy;
            }
            px
        })
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.height, self.width, |y, x| {
            self.get(y, self.width - 1 - x)
        })
    }

    pub fn flip_vertical(&self) -> Image {
        Image::from_fn(self.height, self.width, |y, x| {
            self.get(self.height - 1 - y, x)
        })
    }

    /// 8-bit quantization used by the PPM writer.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Image {
        Image {
            height,
            width,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    pub fn write_ppm(&self, path: &Path) -> Result<(), ImageError> {
        write_ppm_bytes(path, self.height, self.width, &self.to_rgb8())
    }

    pub fn read_ppm(path: &Path) -> Result<Image, ImageError> {
        let bytes = fs::read(path).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let (h, w, pixels) = parse_ppm(&bytes).map_err(|reason| ImageError::Format {
            path: path.display().to_string(),
            reason,
        })?;
        Ok(Image::from_rgb8(h, w, pixels))
    }
}

pub fn write_ppm_bytes(
    path: &Path,
    height: usize,
    width: usize,
    rgb: &[u8],
) -> Result<(), ImageError> {
    let io_err = |source| ImageError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
    write!(f, "P6\n{width} {height}\n255\n").map_err(io_err)?;
    f.write_all(rgb).map_err(io_err)?;
    f.flush().map_err(io_err)
}

/// Parses a binary P6 file with maxval 255; `#` comments in the header are skipped.
pub fn parse_ppm(bytes: &[u8]) -> Result<(usize, usize, &[u8]), String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| "non-ascii header")?
                .to_string(),
        );
    }
    if fields[0] != "P6" {
        return Err(format!("expected P6 magic, found {:?}", fields[0]));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| format!("bad header number {s:?}"))
    };
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(format!("only maxval 255 is supported, found {maxval}"));
    }
    pos += 1; // single whitespace after maxval
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(format!(
            "expected {need} pixel bytes, found {}",
            bytes.len().saturating_sub(pos)
        ));
    }
    Ok((h, w, &bytes[pos..pos + need]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_constant() {
        let img = Image::from_fn(6, 6, |y, x| [y as f32 / 6.0, x as f32 / 6.0, 0.5]);
        assert_eq!(img.resize(6, 6), img);
        let flat = Image::from_fn(5, 7, |_, _| [0.25, 0.5, 0.75]);
        let r = flat.resize(13, 3);
        assert!(r
            .data
            .chunks(3)
            .all(|p| (p[0] - 0.25).abs() < 1e-6 && (p[2] - 0.75).abs() < 1e-6));
    }

    #[test]
    fn ppm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let img = Image::from_fn(3, 4, |y, x| [(y * 4 + x) as f32 / 11.0, 0.0, 1.0]);
        img.write_ppm(&path).unwrap();
        let back = Image::read_ppm(&path).unwrap();
        assert_eq!(back.to_rgb8(), img.to_rgb8());
        assert_eq!((back.height, back.width), (3, 4));
    }

    #[test]
    fn ppm_rejects_other_formats() {
        assert!(parse_ppm(b"P3\n1 1\n255\n000").is_err());
        assert!(parse_ppm(b"P6\n2 2\n255\n\x00").is_err());
    }
}
