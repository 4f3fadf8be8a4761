//! Datasets: a seeded synthetic prototype task and IDX image files.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bnn::Shape;
use crate::error::{invalid, Error, Result};
use crate::seed::derive_seed_tagged;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    /// Flattened `(channels, height, width)` values, each -1 or +1.
    pub pixels: Vec<i8>,
    pub label: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub shape: Shape,
    pub classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_len(&self) -> usize {
        self.shape.iter().product()
    }

    /// Consecutive slice `start..end` as its own dataset.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        Dataset {
            name: format!("{}[{start}..{end}]", self.name),
            shape: self.shape,
            classes: self.classes,
            samples: self.samples[start..end].to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticDatasetSpec {
    pub classes: usize,
    pub image_side: usize,
    pub noise_flip_prob: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            image_side: 16,
            noise_flip_prob: 0.1,
            n_train: 2000,
            n_test: 1000,
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=32).contains(&self.classes) {
            return Err(invalid(format!("classes must lie in [2, 32], got {}", self.classes)));
        }
        if self.image_side == 0 {
            return Err(invalid("image side must be positive"));
        }
        if !(0.0..0.5).contains(&self.noise_flip_prob) {
            return Err(invalid(format!(
                "flip probability must lie in [0, 0.5), got {}",
                self.noise_flip_prob
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticData {
    pub prototypes: Vec<Vec<i8>>,
    pub train: Dataset,
    pub test: Dataset,
}

/// One fixed random -1/+1 prototype per class; each sample is its class
/// prototype with every pixel flipped independently with `noise_flip_prob`.
/// Labels cycle through the classes.
pub fn generate_synthetic(spec: &SyntheticDatasetSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let n = spec.image_side * spec.image_side;
    let mut proto_rng = ChaCha8Rng::seed_from_u64(derive_seed_tagged(spec.seed, "prototypes", 0));
    let prototypes: Vec<Vec<i8>> = (0..spec.classes)
        .map(|_| (0..n).map(|_| if proto_rng.random::<bool>() { 1 } else { -1 }).collect())
        .collect();
    let make = |tag: &str, count: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_tagged(spec.seed, tag, 0));
        let samples = (0..count)
            .map(|i| {
                let label = (i % spec.classes) as u32;
                let pixels = prototypes[label as usize]
                    .iter()
                    .map(|&p| if rng.random::<f64>() < spec.noise_flip_prob { -p } else { p })
                    .collect();
                Sample { pixels, label }
            })
            .collect();
        Dataset {
            name: format!("synthetic-{tag}"),
            shape: [1, spec.image_side, spec.image_side],
            classes: spec.classes,
            samples,
        }
    };
    Ok(SyntheticData {
        train: make("train", spec.n_train),
        test: make("test", spec.n_test),
        prototypes,
    })
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Unsigned-byte images from an IDX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledImages {
    pub images: IdxImages,
    pub labels: Vec<u8>,
}

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            offset: bytes.len(),
            message: format!("truncated header: need 4 bytes at offset {offset}"),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != expected {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad magic number {magic:#010x}, expected {expected:#010x}"),
        });
    }
    Ok(())
}

fn body(bytes: &[u8], header: usize, len: usize) -> Result<&[u8]> {
    let end = header + len;
    if bytes.len() < end {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!("truncated data: expected {end} bytes, found {}", bytes.len()),
        });
    }
    if bytes.len() > end {
        return Err(Error::Parse {
            offset: end,
            message: format!("{} trailing bytes", bytes.len() - end),
        });
    }
    Ok(&bytes[header..end])
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let count = read_u32_be(bytes, 4)? as usize;
    let rows = read_u32_be(bytes, 8)? as usize;
    let cols = read_u32_be(bytes, 12)? as usize;
    let pixels = body(bytes, 16, count * rows * cols)?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let count = read_u32_be(bytes, 4)? as usize;
    Ok(body(bytes, 8, count)?.to_vec())
}

/// Reads an IDX image file and its label file.
pub fn load_idx(images: &Path, labels: &Path) -> Result<LabeledImages> {
    let images = parse_idx_images(&fs::read(images)?)?;
    let labels = parse_idx_labels(&fs::read(labels)?)?;
    if images.count != labels.len() {
        return Err(invalid(format!(
            "{} images but {} labels",
            images.count,
            labels.len()
        )));
    }
    Ok(LabeledImages { images, labels })
}

/// Pixel `> threshold_fraction * 255` becomes +1, anything else -1.
pub fn binarize(data: &LabeledImages, threshold_fraction: f64, name: &str) -> Result<Dataset> {
    let cut = threshold_fraction * u8::MAX as f64;
    let classes = data.labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    let samples = (0..data.images.count)
        .map(|i| Sample {
            pixels: data
                .images
                .image(i)
                .iter()
                .map(|&p| if p as f64 > cut { 1 } else { -1 })
                .collect(),
            label: data.labels[i] as u32,
        })
        .collect();
    Ok(Dataset {
        name: name.to_string(),
        shape: [1, data.images.rows, data.images.cols],
        classes,
        samples,
    })
}
