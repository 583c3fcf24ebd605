//! Labelled image datasets: in-memory container, on-disk ingestion and a
//! procedural glyph generator.
//!
//! Three on-disk layouts are understood (see [`DatasetFormat`]). Ingestion
//! normalises pixels to `[0, 1]`, validates labels and can write a JSON
//! manifest whose `content_hash` only depends on the decoded pixels and
//! labels, so re-ingesting unchanged files reproduces the same manifest.

mod cifar;
mod idx;
mod imagedir;
mod synthetic;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Image, Shape};

pub use cifar::{read_cifar_binary, write_cifar_binary};
pub use idx::{read_idx_images, read_idx_labels, write_idx_images, write_idx_labels};
pub use imagedir::{read_image_directory, write_image_directory};
pub use synthetic::{synthetic_digits, write_synthetic_idx, GlyphStyle, SyntheticConfig};

/// Environment variable naming the default data root.
pub const DATA_ROOT_ENV: &str = "CERTSPOOF_DATA";

pub fn default_data_root() -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    shape: Shape,
    num_classes: usize,
    images: Vec<Image>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(shape: Shape, num_classes: usize, images: Vec<Image>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::shape(format!("{} labels", images.len()), labels.len()));
        }
        for (i, x) in images.iter().enumerate() {
            x.ensure_shape(shape)?;
            if x.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Domain(format!("image {i} has pixels outside [0, 1]")));
            }
        }
        if let Some(y) = labels.iter().find(|y| **y >= num_classes) {
            return Err(Error::Domain(format!("label {y} out of range for {num_classes} classes")));
        }
        Ok(Self {
            shape,
            num_classes,
            images,
            labels,
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &Image {
        &self.images[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Image, usize)> {
        self.images.iter().zip(self.labels.iter().copied())
    }

    /// The first `n` examples (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            shape: self.shape,
            num_classes: self.num_classes,
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// SHA-256 over shape, class count, labels and pixel bit patterns.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{} {}\n", self.shape, self.num_classes).as_bytes());
        for (x, y) in self.iter() {
            h.update((y as u64).to_le_bytes());
            for v in x.as_slice() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    /// `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
    /// `t10k-images-idx3-ubyte`, `t10k-labels-idx1-ubyte`.
    Idx,
    /// `data_batch_*.bin` for training and `test_batch.bin` for testing;
    /// records of one label byte and 3072 planar RGB bytes.
    CifarBinary,
    /// `train/<label>/*.png` and `test/<label>/*.png`.
    ImageDirectory,
}

impl std::str::FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "idx" => Ok(Self::Idx),
            "cifar-binary" => Ok(Self::CifarBinary),
            "image-directory" => Ok(Self::ImageDirectory),
            other => Err(Error::Config(format!("unknown dataset format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub count: usize,
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: DatasetFormat,
    pub shape: Shape,
    pub num_classes: usize,
    pub train: SplitManifest,
    pub test: SplitManifest,
}

impl Manifest {
    pub fn describe(splits: &DatasetSplits, format: DatasetFormat) -> Self {
        let split = |d: &Dataset| SplitManifest {
            count: d.len(),
            content_hash: d.content_hash(),
        };
        Self {
            format,
            shape: splits.train.shape(),
            num_classes: splits.train.num_classes(),
            train: split(&splits.train),
            test: split(&splits.test),
        }
    }

    /// Hash of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("manifest serialises");
        hex::encode(Sha256::digest(&json))
    }
}

/// Reads a dataset in `format` from `path`.
pub fn ingest_dataset(path: &Path, format: DatasetFormat) -> Result<DatasetSplits> {
    let mut splits = match format {
        DatasetFormat::Idx => idx::read_idx_splits(path)?,
        DatasetFormat::CifarBinary => cifar::read_cifar_splits(path)?,
        DatasetFormat::ImageDirectory => imagedir::read_image_directory(path)?,
    };
    // both splits share one label space
    let classes = splits.train.num_classes().max(splits.test.num_classes());
    splits.train.num_classes = classes;
    splits.test.num_classes = classes;
    if splits.train.shape() != splits.test.shape() {
        return Err(Error::shape(splits.train.shape(), splits.test.shape()));
    }
    if splits.train.is_empty() {
        return Err(Error::Empty(format!("training split in {}", path.display())));
    }
    Ok(splits)
}

/// Ingests `path` and writes `manifest.json` into `out_dir`.
pub fn ingest_with_manifest(path: &Path, format: DatasetFormat, out_dir: &Path) -> Result<(DatasetSplits, Manifest)> {
    let splits = ingest_dataset(path, format)?;
    let manifest = Manifest::describe(&splits, format);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let file = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&file, json + "\n").map_err(|e| Error::io(&file, e))?;
    Ok((splits, manifest))
}

pub(crate) fn labels_class_count(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |m| m + 1)
}

pub(crate) fn quantise(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
