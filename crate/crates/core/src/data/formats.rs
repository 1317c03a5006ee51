//! On-disk rasters: binary PPM for RGB, binary PGM for label maps (and
//! 16-bit PGM for disparity import), and the DMAP container for depth.
//!
//! All three formats round-trip bit-exactly for data on their native grid
//! (8-bit color, integer labels, 32-bit float depth).

use std::fs;
use std::path::Path;

use crate::error::{config_err, data_err, Error, Result};
use crate::raster::LabelMap;
use crate::tensor::Tensor;

/// DMAP container: magic, version byte, extents, then row-major 32-bit
/// little-endian floats with 0 marking invalid pixels.
const DMAP_MAGIC: &[u8; 4] = b"DMAP";
const DMAP_VERSION: u8 = 1;

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

/// Byte cursor that reports the offset of every decoding failure.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Cursor<'a> {
        Cursor { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(format_err(
                self.bytes.len(),
                format!("truncated while reading {what} ({n} bytes needed at offset {})", self.pos),
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn skip_pnm_whitespace(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn pnm_number(&mut self, what: &str) -> Result<usize> {
        self.skip_pnm_whitespace();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(format_err(start, format!("expected a decimal {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(start, format!("unparseable {what}")))
    }
}

/// Writes a `3×H×W` tensor with values in [0,1] as binary PPM (P6,
/// maxval 255). Channels are quantized to `round(v·255)`.
pub fn write_ppm(path: &Path, rgb: &Tensor) -> Result<()> {
    let dims = rgb.dims();
    let (h, w) = match dims {
        [3, h, w] => (*h, *w),
        _ => return Err(data_err!("PPM writer expects a 3×H×W tensor, got {:?}", dims)),
    };
    let plane = h * w;
    let data = rgb.data();
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.reserve(3 * plane);
    for px in 0..plane {
        for c in 0..3 {
            let v = data[c * plane + px];
            if !(0.0..=1.0).contains(&v) {
                return Err(data_err!("PPM value {v} outside [0,1] at pixel {px}"));
            }
            bytes.push((v * 255.0).round() as u8);
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a binary PPM into a `3×H×W` tensor with values `byte/255`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor::new(&bytes);
    let magic = cur.take(2, "PPM magic")?;
    if magic != b"P6" {
        return Err(format_err(0, "bad PPM magic, expected P6"));
    }
    let w = cur.pnm_number("width")?;
    let h = cur.pnm_number("height")?;
    let maxval = cur.pnm_number("maxval")?;
    if maxval != 255 {
        return Err(format_err(cur.pos, format!("unsupported PPM maxval {maxval}, expected 255")));
    }
    cur.take(1, "header terminator")?;
    let plane = h * w;
    let raster = cur.take(3 * plane, "pixel data")?;
    let mut data = vec![0.0; 3 * plane];
    for px in 0..plane {
        for c in 0..3 {
            data[c * plane + px] = raster[px * 3 + c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Writes a label map as binary PGM (P5, maxval 255). Labels above 255
/// do not fit the format and are rejected.
pub fn write_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    let (h, w) = (labels.height(), labels.width());
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.reserve(h * w);
    for &label in labels.data() {
        if label > 255 {
            return Err(data_err!("label {label} does not fit 8-bit PGM"));
        }
        bytes.push(label as u8);
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor::new(&bytes);
    let magic = cur.take(2, "PGM magic")?;
    if magic != b"P5" {
        return Err(format_err(0, "bad PGM magic, expected P5"));
    }
    let w = cur.pnm_number("width")?;
    let h = cur.pnm_number("height")?;
    let maxval = cur.pnm_number("maxval")?;
    if maxval != 255 {
        return Err(format_err(cur.pos, format!("unsupported PGM maxval {maxval}, expected 255")));
    }
    cur.take(1, "header terminator")?;
    let raster = cur.take(h * w, "pixel data")?;
    LabelMap::new(h, w, raster.iter().map(|&b| b as u32).collect())
}

/// Reads a 16-bit binary PGM (P5, maxval above 255; big-endian samples),
/// the container Cityscapes-style disparity rasters arrive in.
pub fn read_pgm16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor::new(&bytes);
    let magic = cur.take(2, "PGM magic")?;
    if magic != b"P5" {
        return Err(format_err(0, "bad PGM magic, expected P5"));
    }
    let w = cur.pnm_number("width")?;
    let h = cur.pnm_number("height")?;
    let maxval = cur.pnm_number("maxval")?;
    if !(256..=65535).contains(&maxval) {
        return Err(format_err(
            cur.pos,
            format!("expected a 16-bit PGM (maxval in 256..=65535), got {maxval}"),
        ));
    }
    cur.take(1, "header terminator")?;
    let raster = cur.take(2 * h * w, "pixel data")?;
    let samples = raster
        .chunks_exact(2)
        .map(|pair| u16::from_be_bytes([pair[0], pair[1]]))
        .collect();
    Ok((h, w, samples))
}

/// Writes 16-bit disparity samples as big-endian P5 (test and import
/// tooling counterpart of [`read_pgm16`]).
pub fn write_pgm16(path: &Path, h: usize, w: usize, samples: &[u16]) -> Result<()> {
    if samples.len() != h * w {
        return Err(data_err!("16-bit PGM sample count does not match {h}×{w}"));
    }
    let mut bytes = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &s in samples {
        bytes.extend_from_slice(&s.to_be_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Writes a `1×H×W` depth map as DMAP. Values are stored as 32-bit floats;
/// 0 marks an invalid pixel.
pub fn write_dmap(path: &Path, depth: &Tensor) -> Result<()> {
    let dims = depth.dims();
    let (h, w) = match dims {
        [1, h, w] => (*h, *w),
        _ => return Err(data_err!("DMAP writer expects a 1×H×W tensor, got {:?}", dims)),
    };
    let mut bytes = Vec::with_capacity(4 + 1 + 8 + 4 * h * w);
    bytes.extend_from_slice(DMAP_MAGIC);
    bytes.push(DMAP_VERSION);
    bytes.extend_from_slice(&(h as u32).to_le_bytes());
    bytes.extend_from_slice(&(w as u32).to_le_bytes());
    for &v in depth.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_dmap(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor::new(&bytes);
    let magic = cur.take(4, "DMAP magic")?;
    if magic != DMAP_MAGIC {
        return Err(format_err(0, "bad DMAP magic"));
    }
    let version = cur.take(1, "DMAP version")?[0];
    if version != DMAP_VERSION {
        return Err(format_err(4, format!("unsupported DMAP version {version}")));
    }
    let h = u32::from_le_bytes(cur.take(4, "height")?.try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(cur.take(4, "width")?.try_into().unwrap()) as usize;
    let raster = cur.take(4 * h * w, "depth data")?;
    let value_offset = cur.pos - 4 * h * w;
    let mut data = Vec::with_capacity(h * w);
    for (i, quad) in raster.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(quad.try_into().unwrap()) as f64;
        if !v.is_finite() {
            return Err(format_err(value_offset + 4 * i, "non-finite depth value"));
        }
        data.push(v);
    }
    Tensor::new(vec![1, h, w], data)
}

/// Converts a raw 16-bit disparity raster to a depth map. A raw value
/// `p > 0` encodes disparity `d = (p - 1) / 256`; depth is
/// `focal · baseline / d`. Raw zeros (and zero disparities) become
/// invalid pixels (depth 0).
pub fn disparity_to_depth(
    raw: &[u16],
    h: usize,
    w: usize,
    baseline: f64,
    focal: f64,
) -> Result<Tensor> {
    if baseline <= 0.0 || focal <= 0.0 {
        return Err(config_err!(
            "disparity conversion needs positive baseline and focal length"
        ));
    }
    if raw.len() != h * w {
        return Err(data_err!("disparity raster length does not match {h}×{w}"));
    }
    let data = raw
        .iter()
        .map(|&p| {
            if p == 0 {
                return 0.0;
            }
            let d = (p as f64 - 1.0) / 256.0;
            if d <= 0.0 {
                0.0
            } else {
                focal * baseline / d
            }
        })
        .collect();
    Tensor::new(vec![1, h, w], data)
}
