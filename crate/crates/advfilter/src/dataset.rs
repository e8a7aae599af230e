//! Labeled image datasets: IDX file loading and a synthetic shape corpus.
//!
//! The synthetic corpus renders four easily separable grayscale classes —
//! filled disk, filled square, hollow ring, and cross — at random positions,
//! sizes, and intensities over a noisy background. It exists so the whole
//! pipeline (train, attack, defend) runs self-contained and reproducibly
//! from a single seed.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::SplitMix64;

/// Images paired with class labels in `0..num_classes`.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    items: Vec<(Image, usize)>,
    num_classes: usize,
}

impl LabeledDataset {
    /// Builds a dataset, checking labels are in range and shapes homogeneous.
    pub fn new(items: Vec<(Image, usize)>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Parameter(format!(
                "dataset needs at least 2 classes, got {num_classes}"
            )));
        }
        if let Some((_, label)) = items.iter().find(|(_, label)| *label >= num_classes) {
            return Err(Error::Parameter(format!(
                "label {label} out of range for {num_classes} classes"
            )));
        }
        if let Some(first) = items.first() {
            let shape = first.0.shape();
            if let Some((img, _)) = items.iter().find(|(img, _)| img.shape() != shape) {
                return Err(Error::Parameter(format!(
                    "dataset images have mixed shapes: {:?} vs {:?}",
                    shape,
                    img.shape()
                )));
            }
        }
        Ok(Self { items, num_classes })
    }

    pub fn items(&self) -> &[(Image, usize)] {
        &self.items
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Cursor over a big-endian IDX byte buffer with contextual errors.
struct IdxReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    name: &'a str,
}

impl<'a> IdxReader<'a> {
    fn new(bytes: &'a [u8], name: &'a str) -> Self {
        Self { bytes, pos: 0, name }
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        if self.pos + 4 > self.bytes.len() {
            return Err(Error::Format(format!(
                "{} ends before {what} (offset {})",
                self.name, self.pos
            )));
        }
        let mut buf = [0u8; 4];
        buf.copy_from_slice(&self.bytes[self.pos..self.pos + 4]);
        self.pos += 4;
        Ok(u32::from_be_bytes(buf))
    }

    fn read_payload(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos != len {
            return Err(Error::Format(format!(
                "{} payload has {} bytes, expected {len}",
                self.name,
                self.bytes.len() - self.pos
            )));
        }
        Ok(&self.bytes[self.pos..])
    }
}

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Loads a paired IDX image file and IDX label file into a dataset.
///
/// Images come back single-channel with intensities `byte / 255`. The class
/// count is `max(label) + 1` (at least 2).
pub fn load_idx_dataset(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let image_bytes = fs::read(images_path)?;
    let label_bytes = fs::read(labels_path)?;

    let mut img = IdxReader::new(&image_bytes, "idx image file");
    let magic = img.read_u32("magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "idx image file has magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}"
        )));
    }
    let count = img.read_u32("image count")? as usize;
    let rows = img.read_u32("row count")? as usize;
    let cols = img.read_u32("column count")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Format(format!("idx image file has degenerate size {rows}x{cols}")));
    }
    let pixels = img.read_payload(count * rows * cols)?;

    let mut lbl = IdxReader::new(&label_bytes, "idx label file");
    let magic = lbl.read_u32("magic")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Format(format!(
            "idx label file has magic {magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}"
        )));
    }
    let label_count = lbl.read_u32("label count")? as usize;
    if label_count != count {
        return Err(Error::Format(format!(
            "idx image count {count} does not match label count {label_count}"
        )));
    }
    let labels = lbl.read_payload(count)?;

    let num_classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1).max(2);
    let mut items = Vec::with_capacity(count);
    for i in 0..count {
        let start = i * rows * cols;
        let data = pixels[start..start + rows * cols]
            .iter()
            .map(|&b| f64::from(b) / 255.0)
            .collect();
        let image = Image::new(rows, cols, 1, data)
            .map_err(|e| Error::Format(format!("idx image {i}: {e}")))?;
        items.push((image, labels[i] as usize));
    }
    LabeledDataset::new(items, num_classes)
}

/// Number of classes the synthetic generator renders.
pub const SHAPE_CLASSES: usize = 4;

/// Generates `num_per_class` images of each of the four shape classes on a
/// `side x side` single-channel canvas, deterministically from `seed`.
///
/// Classes: 0 = filled disk, 1 = filled square, 2 = hollow ring, 3 = cross.
/// Labels are interleaved (0, 1, 2, 3, 0, 1, ...). Shapes vary in center,
/// radius, and intensity; the background carries low-amplitude noise.
pub fn generate_shape_dataset(num_per_class: usize, side: usize, seed: u64) -> Result<LabeledDataset> {
    if num_per_class == 0 {
        return Err(Error::Parameter("num_per_class must be at least 1".into()));
    }
    if side < 16 {
        return Err(Error::Parameter(format!(
            "canvas side must be at least 16 to render shapes, got {side}"
        )));
    }
    let mut rng = SplitMix64::new(seed);
    let mut items = Vec::with_capacity(num_per_class * SHAPE_CLASSES);
    for _ in 0..num_per_class {
        for class in 0..SHAPE_CLASSES {
            items.push((render_shape(class, side, &mut rng), class));
        }
    }
    LabeledDataset::new(items, SHAPE_CLASSES)
}

fn render_shape(class: usize, side: usize, rng: &mut SplitMix64) -> Image {
    let s = side as f64;
    // Background noise first, so the draw order of random values is fixed.
    let mut data: Vec<f64> = (0..side * side).map(|_| rng.gen_range(0.0, 0.09)).collect();
    let intensity = rng.gen_range(0.33, 0.55);
    let radius = rng.gen_range(s * 0.30, s * 0.38);
    let cx = rng.gen_range(radius + 1.0, s - 1.0 - radius);
    let cy = rng.gen_range(radius + 1.0, s - 1.0 - radius);
    // Per-image geometry wobble; the ranges overlap neighbouring classes a
    // little (thin rings look like disks, fat crosses look like squares) so
    // the rendered classes stay statistically hard.
    let morph = rng.next_f64();

    for y in 0..side {
        for x in 0..side {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let d2 = dx * dx + dy * dy;
            let inside = match class {
                0 => d2 <= radius * radius,
                1 => {
                    let half = radius * (0.95 + 0.05 * morph);
                    dx.abs() <= half && dy.abs() <= half
                }
                2 => {
                    let inner = radius * (0.38 + 0.22 * morph);
                    d2 <= radius * radius && d2 >= inner * inner
                }
                _ => {
                    let bar = (radius * (0.28 + 0.08 * morph)).max(1.0);
                    (dx.abs() <= bar && dy.abs() <= radius)
                        || (dy.abs() <= bar && dx.abs() <= radius)
                }
            };
            if inside {
                // Per-pixel texture keeps the foreground statistics broadband,
                // the way photographic surfaces are, instead of flat patches.
                data[y * side + x] = intensity + rng.gen_range(-0.21, 0.21);
            }
        }
    }
    Image::new(side, side, 1, data).expect("rendered intensities stay in [0, 1]")
}
