//! IDX-format MNIST reader.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

/// Environment variable that overrides the configured dataset directory.
pub const DATA_DIR_ENV: &str = "MNIST_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn file_names(self) -> (&'static str, &'static str) {
        match self {
            Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }
}

/// Images normalized to [0, 1], row-major, one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pixels: Vec<f32>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(
        height: usize,
        width: usize,
        classes: usize,
        pixels: Vec<f32>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        if height * width == 0 || pixels.len() != labels.len() * height * width {
            return Err(Error::domain(format!(
                "{} pixels do not form {} images of {height}x{width}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| usize::from(l) >= classes) {
            return Err(Error::domain(format!("label {l} outside 0..{classes}")));
        }
        Ok(Dataset {
            height,
            width,
            classes,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.features();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// First `n` samples (or all, if fewer).
    pub fn truncated(mut self, n: usize) -> Self {
        let n = n.min(self.len());
        self.labels.truncate(n);
        self.pixels.truncate(n * self.features());
        self
    }

    /// Area-averaging resample to `height x width`. Each target pixel is the
    /// mean of the source pixels it covers, weighted by fractional overlap.
    pub fn resampled(&self, height: usize, width: usize) -> Self {
        let wy = overlap_weights(self.height, height);
        let wx = overlap_weights(self.width, width);
        let norm = (self.height as f64 / height as f64) * (self.width as f64 / width as f64);
        let mut pixels = Vec::with_capacity(self.len() * height * width);
        for i in 0..self.len() {
            let src = self.image(i);
            for row_w in &wy {
                for col_w in &wx {
                    let mut acc = 0.0f64;
                    for &(sy, fy) in row_w {
                        for &(sx, fx) in col_w {
                            acc += fy * fx * f64::from(src[sy * self.width + sx]);
                        }
                    }
                    pixels.push((acc / norm) as f32);
                }
            }
        }
        Dataset {
            height,
            width,
            classes: self.classes,
            pixels,
            labels: self.labels.clone(),
        }
    }
}

/// For each target index, the source indices it overlaps with their overlap length.
fn overlap_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let lo = d as f64 * ratio;
            let hi = (d + 1) as f64 * ratio;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|s| {
                    let overlap = hi.min((s + 1) as f64) - lo.max(s as f64);
                    (overlap > 1e-12).then_some((s, overlap))
                })
                .collect()
        })
        .collect()
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX3 image file into `(count, rows, cols, pixels in [0,1])`.
pub fn parse_idx_images(bytes: &[u8], origin: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    if bytes.len() < 16 {
        return Err(Error::format(origin, "file shorter than the IDX3 header"));
    }
    let magic = be_u32(bytes, 0);
    if magic != IMAGE_MAGIC {
        return Err(Error::format(
            origin,
            format!("bad image magic {magic}, expected {IMAGE_MAGIC}"),
        ));
    }
    let count = be_u32(bytes, 4) as usize;
    let rows = be_u32(bytes, 8) as usize;
    let cols = be_u32(bytes, 12) as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() != expected {
        return Err(Error::format(
            origin,
            format!(
                "expected {expected} bytes for {count} images of {rows}x{cols}, found {}",
                bytes.len()
            ),
        ));
    }
    let pixels = bytes[16..].iter().map(|&b| f32::from(b) / 255.0).collect();
    Ok((count, rows, cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8], origin: &Path) -> Result<Vec<u8>> {
    if bytes.len() < 8 {
        return Err(Error::format(origin, "file shorter than the IDX1 header"));
    }
    let magic = be_u32(bytes, 0);
    if magic != LABEL_MAGIC {
        return Err(Error::format(
            origin,
            format!("bad label magic {magic}, expected {LABEL_MAGIC}"),
        ));
    }
    let count = be_u32(bytes, 4) as usize;
    if bytes.len() != 8 + count {
        return Err(Error::format(
            origin,
            format!(
                "expected {} bytes for {count} labels, found {}",
                8 + count,
                bytes.len()
            ),
        ));
    }
    Ok(bytes[8..].to_vec())
}

/// Writes an IDX pair; used to produce small fixture datasets.
pub fn write_idx(
    dir: &Path,
    split: Split,
    height: usize,
    width: usize,
    images: &[u8],
    labels: &[u8],
) -> Result<()> {
    let (img_name, lbl_name) = split.file_names();
    let mut img = Vec::with_capacity(16 + images.len());
    for v in [
        IMAGE_MAGIC,
        labels.len() as u32,
        height as u32,
        width as u32,
    ] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(images);
    let mut lbl = Vec::with_capacity(8 + labels.len());
    for v in [LABEL_MAGIC, labels.len() as u32] {
        lbl.extend_from_slice(&v.to_be_bytes());
    }
    lbl.extend_from_slice(labels);
    let img_path = dir.join(img_name);
    std::fs::write(&img_path, img).map_err(|e| Error::io(&img_path, e))?;
    let lbl_path = dir.join(lbl_name);
    std::fs::write(&lbl_path, lbl).map_err(|e| Error::io(&lbl_path, e))
}

/// Loads one MNIST split from `dir`, optionally keeping only the first `limit` samples.
pub fn load_mnist(dir: &Path, split: Split, limit: Option<usize>) -> Result<Dataset> {
    let (img_name, lbl_name) = split.file_names();
    let img_path = dir.join(img_name);
    let lbl_path = dir.join(lbl_name);
    let (count, rows, cols, pixels) = parse_idx_images(&read_file(&img_path)?, &img_path)?;
    let labels = parse_idx_labels(&read_file(&lbl_path)?, &lbl_path)?;
    if labels.len() != count {
        return Err(Error::format(
            &lbl_path,
            format!("{} labels for {count} images", labels.len()),
        ));
    }
    let ds = Dataset::new(rows, cols, 10, pixels, labels)
        .map_err(|e| Error::format(&lbl_path, e.to_string()))?;
    Ok(match limit {
        Some(n) => ds.truncated(n),
        None => ds,
    })
}

/// Dataset directory: `$MNIST_DIR` if set, else `configured`.
pub fn resolve_data_dir(configured: &Path) -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| configured.to_path_buf())
}
