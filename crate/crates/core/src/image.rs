//! Grayscale images and their on-disk formats.
//!
//! PGM (P2 ASCII and P5 binary, 8 or 16 bit) is read and written; baseline
//! grayscale TIFF is read. Intensities are widened to `f64` without any
//! rescaling, so a 16-bit pixel of 65535 loads as `65535.0`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{DicError, Result};

/// A 2D grid of gray levels stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
    source_depth: u8,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>, source_depth: u8) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(DicError::InvalidParameter(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(DicError::DimensionMismatch(format!(
                "{} pixels supplied for a {width}x{height} image",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(DicError::InvalidParameter(format!(
                "intensities must be finite and non-negative, found {bad}"
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
            source_depth,
        })
    }

    /// Image filled with a constant gray level.
    pub fn filled(width: usize, height: usize, value: f64, source_depth: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width * height], source_depth)
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        source_depth: u8,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels, source_depth)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn source_depth(&self) -> u8 {
        self.source_depth
    }

    /// Largest value representable at the source bit depth.
    pub fn max_value(&self) -> f64 {
        ((1u32 << self.source_depth) - 1) as f64
    }

    #[inline]
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn row(&self, y: usize) -> &[f64] {
        &self.pixels[y * self.width..(y + 1) * self.width]
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    /// Used by generators that produce values already validated by construction.
    pub(crate) fn from_raw(width: usize, height: usize, pixels: Vec<f64>, source_depth: u8) -> Self {
        debug_assert_eq!(pixels.len(), width * height);
        Self {
            width,
            height,
            pixels,
            source_depth,
        }
    }
}

/// Load an 8/16-bit PGM or grayscale TIFF. The format is sniffed from the
/// leading bytes, not the extension.
pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| DicError::io(path, e))?;
    decode_image(&bytes)
}

/// Decode an in-memory PGM or TIFF.
pub fn decode_image(bytes: &[u8]) -> Result<GrayImage> {
    match bytes {
        [b'P', b'2', ..] | [b'P', b'5', ..] => decode_pgm(bytes),
        [b'I', b'I', 42, 0, ..] | [b'M', b'M', 0, 42, ..] => decode_tiff(bytes),
        [b'P', b'3', ..] | [b'P', b'6', ..] => Err(DicError::UnsupportedFormat(
            "colour PNM (P3/P6) images are not supported".into(),
        )),
        [0x89, b'P', b'N', b'G', ..] => Err(DicError::UnsupportedFormat(
            "PNG input is not supported; convert to PGM or grayscale TIFF".into(),
        )),
        _ => Err(DicError::UnsupportedFormat(
            "unrecognised file signature (expected PGM or TIFF)".into(),
        )),
    }
}

struct PgmHeader {
    binary: bool,
    width: usize,
    height: usize,
    maxval: u32,
    data_offset: usize,
}

fn parse_pgm_header(bytes: &[u8]) -> Result<PgmHeader> {
    let binary = bytes[1] == b'5';
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(DicError::MalformedImage("truncated PGM header".into())),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(DicError::MalformedImage("non-numeric PGM header field".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DicError::MalformedImage("PGM header field overflow".into()))?;
    }
    // exactly one whitespace byte separates the header from binary data
    if pos >= bytes.len() && binary {
        return Err(DicError::MalformedImage("PGM header not terminated".into()));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(DicError::MalformedImage("PGM has zero dimension".into()));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(DicError::MalformedImage(format!("PGM maxval {maxval} out of range")));
    }
    Ok(PgmHeader {
        binary,
        width,
        height,
        maxval: maxval as u32,
        data_offset: pos + 1,
    })
}

fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let header = parse_pgm_header(bytes)?;
    let n = header.width * header.height;
    let depth: u8 = if header.maxval > 255 { 16 } else { 8 };
    let pixels: Vec<f64> = if header.binary {
        let data = &bytes[header.data_offset.min(bytes.len())..];
        if depth == 8 {
            if data.len() < n {
                return Err(DicError::MalformedImage("PGM pixel data truncated".into()));
            }
            data[..n].iter().map(|&b| b as f64).collect()
        } else {
            if data.len() < 2 * n {
                return Err(DicError::MalformedImage("PGM pixel data truncated".into()));
            }
            data[..2 * n]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64)
                .collect()
        }
    } else {
        let text = std::str::from_utf8(&bytes[header.data_offset.min(bytes.len())..])
            .map_err(|_| DicError::MalformedImage("ASCII PGM contains non-UTF8 data".into()))?;
        let values: Vec<f64> = text
            .split_ascii_whitespace()
            .take(n)
            .map(|t| {
                t.parse::<u32>()
                    .map(|v| v as f64)
                    .map_err(|_| DicError::MalformedImage(format!("bad ASCII PGM sample {t:?}")))
            })
            .collect::<Result<_>>()?;
        if values.len() < n {
            return Err(DicError::MalformedImage("PGM pixel data truncated".into()));
        }
        values
    };
    if let Some(v) = pixels.iter().find(|&&v| v > header.maxval as f64) {
        return Err(DicError::MalformedImage(format!(
            "sample {v} exceeds maxval {}",
            header.maxval
        )));
    }
    Ok(GrayImage::from_raw(header.width, header.height, pixels, depth))
}

fn decode_tiff(bytes: &[u8]) -> Result<GrayImage> {
    use tiff::decoder::{Decoder, DecodingResult};
    use tiff::ColorType;

    let tiff_err = |e: tiff::TiffError| DicError::MalformedImage(format!("TIFF: {e}"));
    let mut decoder = Decoder::new(std::io::Cursor::new(bytes)).map_err(tiff_err)?;
    let (width, height) = decoder.dimensions().map_err(tiff_err)?;
    let colortype = decoder.colortype().map_err(tiff_err)?;
    let depth = match colortype {
        ColorType::Gray(8) => 8,
        ColorType::Gray(16) => 16,
        other => {
            return Err(DicError::UnsupportedFormat(format!(
                "TIFF colour type {other:?} (only 8/16-bit single-channel integer data)"
            )))
        }
    };
    let pixels: Vec<f64> = match decoder.read_image().map_err(tiff_err)? {
        DecodingResult::U8(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(f64::from).collect(),
        _ => {
            return Err(DicError::UnsupportedFormat(
                "floating-point or signed TIFF samples".into(),
            ))
        }
    };
    GrayImage::new(width as usize, height as usize, pixels, depth)
}

/// Write a binary (P5) PGM. Values are rounded and clamped to the image's
/// source depth.
pub fn write_pgm(image: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| DicError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_pgm_to(image, &mut w).map_err(|e| DicError::io(path, e))?;
    w.flush().map_err(|e| DicError::io(path, e))
}

pub fn write_pgm_to(image: &GrayImage, w: &mut impl Write) -> std::io::Result<()> {
    let depth = if image.source_depth > 8 { 16 } else { 8 };
    let maxval: u32 = if depth == 16 { 65535 } else { 255 };
    write!(w, "P5\n{} {}\n{}\n", image.width, image.height, maxval)?;
    let clamp = |v: f64| v.round().clamp(0.0, maxval as f64) as u32;
    if depth == 8 {
        let row: Vec<u8> = image.pixels.iter().map(|&v| clamp(v) as u8).collect();
        w.write_all(&row)
    } else {
        let mut buf = Vec::with_capacity(image.pixels.len() * 2);
        for &v in &image.pixels {
            buf.extend_from_slice(&(clamp(v) as u16).to_be_bytes());
        }
        w.write_all(&buf)
    }
}
