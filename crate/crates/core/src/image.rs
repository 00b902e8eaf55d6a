//! 8-bit images and binary portable-pixmap I/O (P6 for RGB, P5 for gray).
//!
//! Only maxval 255 is accepted, which keeps reads and writes byte-exact.

use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("unsupported maxval {0}: only 255 is accepted")]
    UnsupportedMaxval(u64),
    #[error("short pixel data: expected {expected} bytes, found {found}")]
    ShortData { expected: usize, found: usize },
    #[error("invalid image: {0}")]
    Invalid(String),
}

/// Interleaved 8-bit image with 1 (gray) or 3 (RGB) channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        pixels: Vec<u8>,
    ) -> Result<Self, ImageError> {
        if channels != 1 && channels != 3 {
            return Err(ImageError::Invalid(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(ImageError::Invalid("zero-sized image".into()));
        }
        let expected = width * height * channels;
        if pixels.len() != expected {
            return Err(ImageError::Invalid(format!(
                "pixel count {} does not match {width}x{height}x{channels}",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Self::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
        )
        .expect("invalid image dimensions")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    /// Samples at (x, y), `channels` bytes long.
    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.pixels[i..i + self.channels]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, value: &[u8]) {
        debug_assert_eq!(value.len(), self.channels);
        let i = (y * self.width + x) * self.channels;
        self.pixels[i..i + self.channels].copy_from_slice(value);
    }

    pub fn write(&self, path: &Path) -> Result<(), ImageError> {
        fs::write(path, self.to_pnm_bytes())?;
        Ok(())
    }

    pub fn to_pnm_bytes(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let header = format!("{magic}\n{} {}\n255\n", self.width, self.height);
        let mut buf = Vec::with_capacity(header.len() + self.pixels.len());
        buf.extend_from_slice(header.as_bytes());
        buf.extend_from_slice(&self.pixels);
        buf
    }

    pub fn read(path: &Path) -> Result<Self, ImageError> {
        let bytes = fs::read(path)?;
        Self::from_pnm_bytes(&bytes)
    }

    pub fn from_pnm_bytes(bytes: &[u8]) -> Result<Self, ImageError> {
        let mut cursor = 0usize;
        let magic = next_token(bytes, &mut cursor)
            .ok_or_else(|| ImageError::BadHeader("missing magic".into()))?;
        let channels = match magic.as_str() {
            "P6" => 3,
            "P5" => 1,
            other => {
                return Err(ImageError::BadHeader(format!(
                    "expected P5 or P6, got {other:?}"
                )))
            }
        };
        let width = next_int(bytes, &mut cursor, "width")?;
        let height = next_int(bytes, &mut cursor, "height")?;
        let maxval = next_int(bytes, &mut cursor, "maxval")? as u64;
        if maxval != 255 {
            return Err(ImageError::UnsupportedMaxval(maxval));
        }
        // Exactly one whitespace byte separates the header from the raster.
        if cursor >= bytes.len() || !bytes[cursor].is_ascii_whitespace() {
            return Err(ImageError::BadHeader(
                "missing whitespace after maxval".into(),
            ));
        }
        cursor += 1;
        let expected = width * height * channels;
        let raster = &bytes[cursor..];
        if raster.len() < expected {
            return Err(ImageError::ShortData {
                expected,
                found: raster.len(),
            });
        }
        Self::new(width, height, channels, raster[..expected].to_vec())
    }
}

fn next_token(bytes: &[u8], cursor: &mut usize) -> Option<String> {
    // Skip whitespace and '#' comments between header fields.
    loop {
        while *cursor < bytes.len() && bytes[*cursor].is_ascii_whitespace() {
            *cursor += 1;
        }
        if *cursor < bytes.len() && bytes[*cursor] == b'#' {
            while *cursor < bytes.len() && bytes[*cursor] != b'\n' {
                *cursor += 1;
            }
            continue;
        }
        break;
    }
    let start = *cursor;
    while *cursor < bytes.len() && !bytes[*cursor].is_ascii_whitespace() {
        *cursor += 1;
    }
    if start == *cursor {
        None
    } else {
        Some(String::from_utf8_lossy(&bytes[start..*cursor]).into_owned())
    }
}

fn next_int(bytes: &[u8], cursor: &mut usize, field: &str) -> Result<usize, ImageError> {
    let tok = next_token(bytes, cursor)
        .ok_or_else(|| ImageError::BadHeader(format!("missing {field}")))?;
    tok.parse::<usize>()
        .map_err(|_| ImageError::BadHeader(format!("non-numeric {field}: {tok:?}")))
}
