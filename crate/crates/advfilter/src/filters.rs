//! Input-side defenses: Gaussian blur and median filtering.
//!
//! Both filters run per channel with edge-replicate padding, so filtered
//! images keep their shape and pick up no artificial dark frame. The
//! Gaussian path is separable (two 1-D passes); the median path selects the
//! middle of each kernel_size² window.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Tensor;

/// Filter family, in the order used for sorting and CSV labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FilterKind {
    None,
    Gaussian,
    Median,
}

impl FilterKind {
    /// Lowercase token used in CSV columns.
    pub fn label(self) -> &'static str {
        match self {
            FilterKind::None => "none",
            FilterKind::Gaussian => "gaussian",
            FilterKind::Median => "median",
        }
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A concrete filter configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterSpec {
    /// No-op; the "unfiltered" column of result tables.
    Identity,
    Gaussian { kernel_size: usize, sigma: f64 },
    Median { kernel_size: usize },
}

/// Kernel-size-to-sigma convention: 0.8 for 3x3, 1.1 for 5x5.
pub fn default_sigma(kernel_size: usize) -> f64 {
    0.3 * ((kernel_size as f64 - 1.0) / 2.0 - 1.0) + 0.8
}

fn check_kernel_size(kernel_size: usize) -> Result<()> {
    if kernel_size != 3 && kernel_size != 5 {
        return Err(Error::Parameter(format!(
            "filter kernel size must be 3 or 5, got {kernel_size}"
        )));
    }
    Ok(())
}

impl FilterSpec {
    /// Gaussian filter with an explicit sigma.
    pub fn gaussian(kernel_size: usize, sigma: f64) -> Result<Self> {
        check_kernel_size(kernel_size)?;
        if !sigma.is_finite() || sigma <= 0.0 {
            return Err(Error::Parameter(format!(
                "gaussian sigma must be a positive real, got {sigma}"
            )));
        }
        Ok(FilterSpec::Gaussian { kernel_size, sigma })
    }

    /// Gaussian filter with the default sigma for its kernel size.
    pub fn gaussian_default(kernel_size: usize) -> Result<Self> {
        Self::gaussian(kernel_size, default_sigma(kernel_size))
    }

    pub fn median(kernel_size: usize) -> Result<Self> {
        check_kernel_size(kernel_size)?;
        Ok(FilterSpec::Median { kernel_size })
    }

    pub fn kind(&self) -> FilterKind {
        match self {
            FilterSpec::Identity => FilterKind::None,
            FilterSpec::Gaussian { .. } => FilterKind::Gaussian,
            FilterSpec::Median { .. } => FilterKind::Median,
        }
    }

    /// Kernel size, with 0 for the identity filter.
    pub fn kernel_size(&self) -> usize {
        match self {
            FilterSpec::Identity => 0,
            FilterSpec::Gaussian { kernel_size, .. } | FilterSpec::Median { kernel_size } => {
                *kernel_size
            }
        }
    }
}

impl FromStr for FilterSpec {
    type Err = Error;

    /// Parses the compact tokens used on the command line:
    /// `none`, `gaussian3`, `gaussian5`, `median3`, `median5`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(FilterSpec::Identity);
        }
        if let Some(size) = s.strip_prefix("gaussian") {
            let size = size.parse::<usize>().map_err(|_| bad_filter_token(s))?;
            return FilterSpec::gaussian_default(size);
        }
        if let Some(size) = s.strip_prefix("median") {
            let size = size.parse::<usize>().map_err(|_| bad_filter_token(s))?;
            return FilterSpec::median(size);
        }
        Err(bad_filter_token(s))
    }
}

fn bad_filter_token(s: &str) -> Error {
    Error::Parameter(format!(
        "unknown filter {s:?} (expected none, gaussian3, gaussian5, median3, or median5)"
    ))
}

/// Normalized 1-D Gaussian taps, the separable factor of the 2-D kernel.
fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size - 1) as f64 / 2.0;
    let mut taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// The full 2-D Gaussian kernel: K(i,j) ∝ exp(−((i−c)² + (j−c)²) / 2σ²)
/// with c = (size−1)/2, normalized to sum exactly to 1.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Tensor> {
    if size == 0 || size % 2 == 0 {
        return Err(Error::Parameter(format!(
            "gaussian kernel size must be odd and positive, got {size}"
        )));
    }
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::Parameter(format!(
            "gaussian sigma must be a positive real, got {sigma}"
        )));
    }
    let c = (size - 1) as f64 / 2.0;
    let mut data = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let di = i as f64 - c;
            let dj = j as f64 - c;
            data.push((-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp());
        }
    }
    let sum: f64 = data.iter().sum();
    for v in &mut data {
        *v /= sum;
    }
    Tensor::new(vec![size, size], data)
}

/// Runs the configured filter over the image, returning a new image of the
/// same shape. The input is never modified.
pub fn apply_filter(x: &Image, spec: &FilterSpec) -> Image {
    match *spec {
        FilterSpec::Identity => x.clone(),
        FilterSpec::Gaussian { kernel_size, sigma } => gaussian_blur(x, kernel_size, sigma),
        FilterSpec::Median { kernel_size } => median_filter(x, kernel_size),
    }
}

/// Replicates edge pixels: clamps a possibly-out-of-range coordinate.
fn clamp_coord(candidate: isize, upper: usize) -> usize {
    candidate.clamp(0, upper as isize - 1) as usize
}

fn gaussian_blur(img: &Image, size: usize, sigma: f64) -> Image {
    let taps = gaussian_taps(size, sigma);
    let r = (size / 2) as isize;
    let (h, w, c) = img.shape();

    // Horizontal pass.
    let mut tmp = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &t) in taps.iter().enumerate() {
                    let sx = clamp_coord(x as isize + k as isize - r, w);
                    acc += t * img.at(y, sx, ch);
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    // Vertical pass, clamping away sub-epsilon drift outside [0, 1].
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &t) in taps.iter().enumerate() {
                    let sy = clamp_coord(y as isize + k as isize - r, h);
                    acc += t * tmp[(sy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc.clamp(0.0, 1.0);
            }
        }
    }
    Image::new(h, w, c, out).expect("blurred intensities stay in [0, 1]")
}

fn median_filter(img: &Image, size: usize) -> Image {
    let r = (size / 2) as isize;
    let (h, w, c) = img.shape();
    let mut out = vec![0.0; h * w * c];
    let mut window = Vec::with_capacity(size * size);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                window.clear();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let sy = clamp_coord(y as isize + dy, h);
                        let sx = clamp_coord(x as isize + dx, w);
                        window.push(img.at(sy, sx, ch));
                    }
                }
                // Odd window count: the middle of the sorted values is the
                // unique median; a selection pass avoids the full sort.
                let mid = window.len() / 2;
                let (_, median, _) = window.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
                out[(y * w + x) * c + ch] = *median;
            }
        }
    }
    Image::new(h, w, c, out).expect("median output reuses input intensities")
}
