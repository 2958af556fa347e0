use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::read_jsonl;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const INLINE_ENCODING: &str = "u8-base64";

/// Square 8-bit grayscale grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub size: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(size: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != size * size {
            return Err(Error::Shape(format!(
                "image of size {size} needs {} pixels, got {}",
                size * size,
                pixels.len()
            )));
        }
        Ok(Self { size, pixels })
    }

    pub fn filled(size: usize, value: u8) -> Self {
        Self {
            size,
            pixels: vec![value; size * size],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.pixels[r * self.size + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        self.pixels[r * self.size + c] = v;
    }

    /// Pixel values scaled to `[0, 1]` as a `size x size` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(
            self.size,
            self.size,
            self.pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
        )
    }

    /// Nonzero pixels as a boolean mask.
    pub fn to_mask(&self) -> Vec<bool> {
        self.pixels.iter().map(|&p| p > 0).collect()
    }
}

/// Image reference stored in a dataset line: inline bytes or a raw file of
/// `size * size` bytes relative to the dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageRef {
    Inline {
        size: usize,
        encoding: String,
        data: String,
    },
    File {
        size: usize,
        path: String,
    },
}

impl ImageRef {
    pub fn inline(image: &GrayImage) -> Self {
        ImageRef::Inline {
            size: image.size,
            encoding: INLINE_ENCODING.into(),
            data: STANDARD.encode(&image.pixels),
        }
    }

    pub fn decode(&self, base_dir: &Path) -> Result<GrayImage> {
        match self {
            ImageRef::Inline {
                size,
                encoding,
                data,
            } => {
                if encoding != INLINE_ENCODING {
                    return Err(Error::InvalidArgument(format!(
                        "unsupported image encoding `{encoding}`"
                    )));
                }
                let bytes = STANDARD
                    .decode(data)
                    .map_err(|e| Error::InvalidArgument(format!("bad base64 image: {e}")))?;
                GrayImage::new(*size, bytes)
            }
            ImageRef::File { size, path } => {
                let bytes = std::fs::read(base_dir.join(path))?;
                GrayImage::new(*size, bytes)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub image: ImageRef,
    pub report: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub masks: BTreeMap<String, ImageRef>,
}

/// Decoded dataset record.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub report: String,
    pub masks: BTreeMap<String, GrayImage>,
}

impl Sample {
    pub fn to_record(&self) -> DatasetRecord {
        DatasetRecord {
            id: self.id.clone(),
            image: ImageRef::inline(&self.image),
            report: self.report.clone(),
            masks: self
                .masks
                .iter()
                .map(|(k, m)| (k.clone(), ImageRef::inline(m)))
                .collect(),
        }
    }
}

/// Loads and decodes every record, checking that reports are nonempty and
/// that all images share `expected_size` when given.
pub fn load_dataset(path: &Path, expected_size: Option<usize>) -> Result<Vec<Sample>> {
    let records: Vec<DatasetRecord> = read_jsonl(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let fail = |reason: String| Error::Format {
        path: path.display().to_string(),
        reason,
    };
    records
        .into_iter()
        .map(|r| {
            if r.report.trim().is_empty() {
                return Err(fail(format!("record `{}` has an empty report", r.id)));
            }
            let image = r
                .image
                .decode(base)
                .map_err(|e| fail(format!("record `{}`: {e}", r.id)))?;
            if let Some(size) = expected_size {
                if image.size != size {
                    return Err(fail(format!(
                        "record `{}` has image size {}, expected {size}",
                        r.id, image.size
                    )));
                }
            }
            let mut masks = BTreeMap::new();
            for (entity, m) in &r.masks {
                let mask = m
                    .decode(base)
                    .map_err(|e| fail(format!("record `{}` mask `{entity}`: {e}", r.id)))?;
                if mask.size != image.size {
                    return Err(fail(format!("record `{}` mask `{entity}` size mismatch", r.id)));
                }
                masks.insert(entity.clone(), mask);
            }
            Ok(Sample {
                id: r.id,
                image,
                report: r.report,
                masks,
            })
        })
        .collect()
}

/// One line of a zero-shot scores file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub image_id: String,
    pub entity: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unknown_query: bool,
}

/// One line of a ground-truth labels file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub image_id: String,
    pub entity: String,
    pub label: u8,
}
