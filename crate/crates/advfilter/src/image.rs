//! Unit-interval raster images and binary netpbm (PPM/PGM) I/O.
//!
//! Pixels live in `[0, 1]` as `f64` and are laid out row-major by
//! `(row, column, channel)` — the same layout the classifier consumes.
//! Files are written in a canonical form (`P6\n{w} {h}\n255\n` + payload)
//! so that saving the same image twice yields identical bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A height x width x channels image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image, validating dimensions, channel count (1 or 3), data
    /// length, and that every intensity is finite and within `[0, 1]`.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Parameter(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Parameter(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Parameter(format!(
                "image data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Parameter(format!(
                "image intensity at index {pos} is {} (must be finite in [0, 1])",
                data[pos]
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)` in one tuple, handy for shape checks.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Intensity at `(row, col, channel)`.
    pub fn at(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    /// Copies the pixels into a `[height, width, channels]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, self.channels], self.data.clone())
            .expect("image data is always a valid tensor")
    }
}

/// Quantizes a unit-interval intensity to a byte: round(v * 255), clamped.
fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Reads one whitespace-delimited ASCII header token, skipping `#` comments.
fn next_token<'a>(bytes: &'a [u8], pos: &mut usize, what: &str) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format(format!("missing {what} in netpbm header")));
    }
    Ok(&bytes[start..*pos])
}

fn parse_header_number(token: &[u8], what: &str) -> Result<usize> {
    std::str::from_utf8(token)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| {
            Error::Format(format!(
                "bad {what} in netpbm header: {:?}",
                String::from_utf8_lossy(token)
            ))
        })
}

/// Loads a binary PPM (`P6`) or PGM (`P5`) file with maxval 255.
pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let magic = next_token(&bytes, &mut pos, "magic")?;
    let channels = match magic {
        b"P6" => 3,
        b"P5" => 1,
        other => {
            return Err(Error::Format(format!(
                "unsupported netpbm magic {:?} (expected P5 or P6)",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let width = parse_header_number(next_token(&bytes, &mut pos, "width")?, "width")?;
    let height = parse_header_number(next_token(&bytes, &mut pos, "height")?, "height")?;
    let maxval = parse_header_number(next_token(&bytes, &mut pos, "maxval")?, "maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("degenerate image size {width}x{height}")));
    }
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval} (expected 255)")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("missing separator before pixel payload".into()));
    }
    pos += 1;
    let expected = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "pixel payload has {} bytes, expected {expected} for {width}x{height}x{channels}",
            payload.len()
        )));
    }
    let data = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    Image::new(height, width, channels, data)
}

/// Writes `P6` for 3-channel images or `P5` for single-channel, maxval 255.
///
/// The header is canonical (`magic\n{w} {h}\n255\n`), so identical images
/// produce byte-identical files.
pub fn save_image(image: &Image, path: &Path) -> Result<()> {
    let magic = if image.channels() == 3 { "P6" } else { "P5" };
    let mut bytes =
        format!("{magic}\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    bytes.extend(image.data().iter().map(|&v| quantize(v)));
    fs::write(path, bytes)?;
    Ok(())
}
