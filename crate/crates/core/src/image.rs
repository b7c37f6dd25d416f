//! 8-bit grayscale rasters and the Netpbm graymap (PGM) codec.
//!
//! Both the binary (`P5`) and plain (`P2`) variants are read; images are
//! always written as `P5`.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("malformed PGM header: {0}")]
    MalformedHeader(String),
    #[error("truncated PGM data: expected {expected} pixels, found {found}")]
    TruncatedData { expected: usize, found: usize },
    #[error("unsupported PGM maxval {0} (must be 1..=255)")]
    UnsupportedMaxval(u32),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, PgmError> {
        if width == 0 || height == 0 {
            return Err(PgmError::InvalidImage(format!(
                "dimensions must be nonzero, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(PgmError::InvalidImage(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be nonzero");
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be nonzero");
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| f64::from(p)).collect()
    }
}

/// Reads a PGM file from disk.
pub fn load_pgm(path: impl AsRef<Path>) -> Result<GrayImage, PgmError> {
    let bytes = std::fs::read(path)?;
    decode_pgm(&bytes)
}

/// Writes `img` as a binary `P5` graymap with maxval 255.
pub fn write_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<(), PgmError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(&encode_pgm(img))?;
    file.flush()?;
    Ok(())
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, PgmError> {
    let mut cursor = HeaderCursor { bytes, pos: 0 };
    let magic = bytes
        .get(..2)
        .ok_or_else(|| PgmError::MalformedHeader("file shorter than the magic number".into()))?;
    let binary = match magic {
        b"P5" => true,
        b"P2" => false,
        other => {
            return Err(PgmError::MalformedHeader(format!(
                "unsupported magic {:?}",
                String::from_utf8_lossy(other)
            )))
        }
    };
    cursor.pos = 2;
    if !cursor.peek_is_whitespace_or_comment() {
        return Err(PgmError::MalformedHeader(
            "magic number not followed by whitespace".into(),
        ));
    }

    let width = cursor.next_number("width")?;
    let height = cursor.next_number("height")?;
    let maxval = cursor.next_number("maxval")?;
    if width == 0 || height == 0 {
        return Err(PgmError::MalformedHeader(format!(
            "zero dimension {width}x{height}"
        )));
    }
    if maxval == 0 || maxval > 255 {
        return Err(PgmError::UnsupportedMaxval(maxval));
    }
    let (width, height) = (width as usize, height as usize);
    let expected = width
        .checked_mul(height)
        .ok_or_else(|| PgmError::MalformedHeader("dimensions overflow".into()))?;

    let pixels = if binary {
        // exactly one whitespace byte separates maxval from the raster
        match bytes.get(cursor.pos) {
            Some(b) if b.is_ascii_whitespace() => cursor.pos += 1,
            _ => {
                return Err(PgmError::MalformedHeader(
                    "missing whitespace after maxval".into(),
                ))
            }
        }
        let data = &bytes[cursor.pos..];
        if data.len() < expected {
            return Err(PgmError::TruncatedData {
                expected,
                found: data.len(),
            });
        }
        data[..expected].to_vec()
    } else {
        let mut pixels = Vec::with_capacity(expected);
        while pixels.len() < expected {
            match cursor.try_next_number()? {
                Some(v) if v <= maxval => pixels.push(v as u8),
                Some(v) => {
                    return Err(PgmError::MalformedHeader(format!(
                        "sample {v} exceeds maxval {maxval}"
                    )))
                }
                None => {
                    return Err(PgmError::TruncatedData {
                        expected,
                        found: pixels.len(),
                    })
                }
            }
        }
        pixels
    };
    if binary && pixels.iter().any(|&p| u32::from(p) > maxval) {
        return Err(PgmError::MalformedHeader(format!(
            "sample exceeds maxval {maxval}"
        )));
    }
    GrayImage::new(width, height, pixels)
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn peek_is_whitespace_or_comment(&self) -> bool {
        matches!(self.bytes.get(self.pos), Some(b) if b.is_ascii_whitespace() || *b == b'#')
    }

    fn skip_whitespace_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn try_next_number(&mut self) -> Result<Option<u32>, PgmError> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while matches!(self.bytes.get(self.pos), Some(b) if b.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            return match self.bytes.get(self.pos) {
                None => Ok(None),
                Some(&b) => Err(PgmError::MalformedHeader(format!(
                    "unexpected byte 0x{b:02x} at offset {}",
                    self.pos
                ))),
            };
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        text.parse::<u32>()
            .map(Some)
            .map_err(|_| PgmError::MalformedHeader(format!("number {text} out of range")))
    }

    fn next_number(&mut self, what: &str) -> Result<u32, PgmError> {
        self.try_next_number()?
            .ok_or_else(|| PgmError::MalformedHeader(format!("missing {what}")))
    }
}
