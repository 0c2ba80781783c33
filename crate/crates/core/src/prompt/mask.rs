//! Binary rasters and the netpbm formats they travel in.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("mask dimensions must be positive, got {width}x{height}")));
        }
        if bits.len() != width * height {
            return Err(Error::invalid(format!(
                "mask {width}x{height} needs {} pixels, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![false; width * height])
    }

    /// Builds a mask from a predicate on `(x, y)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let bits = (0..width * height).map(|i| f(i % width.max(1), i / width.max(1))).collect();
        Self::new(width, height, bits)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn complement(&self) -> Self {
        Self { bits: self.bits.iter().map(|b| !b).collect(), ..self.clone() }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Binary PGM (P5, maxval 255, foreground 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.bits.iter().map(|&b| if b { 255u8 } else { 0 }));
        out
    }

    /// Plain PBM (P1, 1 = foreground).
    pub fn to_pbm(&self) -> String {
        let mut out = format!("P1\n{} {}\n", self.width, self.height);
        for row in self.bits.chunks(self.width) {
            let line: Vec<&str> = row.iter().map(|&b| if b { "1" } else { "0" }).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    /// Parses P1, P2 or P5. Graymap pixels above half of maxval are foreground.
    pub fn parse(bytes: &[u8]) -> std::result::Result<Self, String> {
        let img = Graymap::parse(bytes)?;
        let bits = if img.maxval == 1 && img.magic == *b"P1" {
            img.values.iter().map(|&v| v != 0).collect()
        } else {
            img.values.iter().map(|&v| 2 * v as u32 > img.maxval as u32).collect()
        };
        Self::new(img.width, img.height, bits).map_err(|e| e.to_string())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes).map_err(|d| Error::format(path, d))
    }

    /// Writes PBM when the extension is `.pbm`, PGM otherwise.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = match path.extension().and_then(|e| e.to_str()) {
            Some("pbm") => self.to_pbm().into_bytes(),
            _ => self.to_pgm(),
        };
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Raw netpbm raster with samples in `0..=maxval`.
#[derive(Clone, Debug, PartialEq)]
pub struct Graymap {
    pub magic: [u8; 2],
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub values: Vec<u16>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> std::result::Result<usize, String> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("expected {what} at byte {start}"))
    }

    /// Plain-format single pixel; P1 allows digits without separators.
    fn plain_bit(&mut self) -> std::result::Result<u16, String> {
        self.skip_space();
        match self.bytes.get(self.pos) {
            Some(b'0') => {
                self.pos += 1;
                Ok(0)
            }
            Some(b'1') => {
                self.pos += 1;
                Ok(1)
            }
            _ => Err(format!("expected 0 or 1 at byte {}", self.pos)),
        }
    }
}

impl Graymap {
    pub fn parse(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 2 {
            return Err("truncated header".into());
        }
        let magic = [bytes[0], bytes[1]];
        let mut h = Header { bytes, pos: 2 };
        let width = h.number("width")?;
        let height = h.number("height")?;
        if width == 0 || height == 0 {
            return Err(format!("dimensions must be positive, got {width}x{height}"));
        }
        let n = width
            .checked_mul(height)
            .ok_or_else(|| "dimensions overflow".to_string())?;
        let (maxval, values) = match &magic {
            b"P1" => (1, (0..n).map(|_| h.plain_bit()).collect::<std::result::Result<_, _>>()?),
            b"P2" | b"P5" => {
                let maxval = h.number("maxval")?;
                if !(1..=65535).contains(&maxval) {
                    return Err(format!("maxval {maxval} out of range"));
                }
                let values = if magic == *b"P2" {
                    (0..n).map(|_| h.number("sample").map(|v| v as u16)).collect::<std::result::Result<Vec<_>, _>>()?
                } else {
                    let start = h.pos + 1;
                    let wide = maxval > 255;
                    let need = n * if wide { 2 } else { 1 };
                    let raw = bytes
                        .get(start..start + need)
                        .ok_or_else(|| format!("expected {need} raster bytes, found {}", bytes.len().saturating_sub(start)))?;
                    if wide {
                        raw.chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
                    } else {
                        raw.iter().map(|&b| b as u16).collect()
                    }
                };
                if let Some(v) = values.iter().find(|&&v| v as usize > maxval) {
                    return Err(format!("sample {v} exceeds maxval {maxval}"));
                }
                (maxval as u16, values)
            }
            _ => return Err(format!("unsupported magic {:?}", String::from_utf8_lossy(&magic))),
        };
        Ok(Self { magic, width, height, maxval, values })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes).map_err(|d| Error::format(path, d))
    }

    /// Samples scaled to `[0, 1]`. Bitmaps map 1 (black ink) to 1.0.
    pub fn unit_values(&self) -> Vec<f64> {
        let m = self.maxval as f64;
        self.values.iter().map(|&v| v as f64 / m).collect()
    }
}

/// Writes an 8-bit graymap of `[0, 1]` values, rounding to the nearest level.
pub fn write_gray(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn plain_bitmap() {
        let m = BinaryMask::parse(b"P1\n# comment\n3 2\n1 0 0\n011\n").unwrap();
        assert_eq!(m.bits(), &[true, false, false, false, true, true]);
        assert_eq!(BinaryMask::parse(m.to_pbm().as_bytes()).unwrap(), m);
    }

    #[test]
    fn graymap_threshold() {
        let mut bytes = b"P5 2 2 255\n".to_vec();
        bytes.extend([0, 127, 128, 255]);
        let m = BinaryMask::parse(&bytes).unwrap();
        assert_eq!(m.bits(), &[false, false, true, true]);
        let g = Graymap::parse(&bytes).unwrap();
        assert_eq!(g.unit_values()[3], 1.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(BinaryMask::parse(b"P6\n1 1\n255\n\0\0\0").is_err());
        assert!(BinaryMask::parse(b"P5\n2 2\n255\n\0").is_err());
        assert!(BinaryMask::parse(b"P1\n2 1\n1 2\n").is_err());
        assert!(BinaryMask::parse(b"P2\n1 1\n3\n7\n").is_err());
        assert!(BinaryMask::new(2, 2, vec![true]).is_err());
        assert!(BinaryMask::empty(0, 3).is_err());
    }

    proptest! {
        #[test]
        fn pgm_roundtrip(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
            let m = BinaryMask::from_fn(w, h, |x, y| (seed >> ((x * 7 + y * 3) % 64)) & 1 == 1).unwrap();
            prop_assert_eq!(&BinaryMask::parse(&m.to_pgm()).unwrap(), &m);
            prop_assert_eq!(&BinaryMask::parse(m.to_pbm().as_bytes()).unwrap(), &m);
        }
    }
}
