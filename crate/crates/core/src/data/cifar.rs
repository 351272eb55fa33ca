//! CIFAR-10 / CIFAR-100 binary batches.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::{Scalar, Tensor};

/// Pixel bytes per record: three 32×32 planes.
pub const CIFAR_IMAGE_BYTES: usize = 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    C10,
    C100,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarSplit {
    Train,
    Test,
}

impl CifarVariant {
    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::C10 => 1,
            CifarVariant::C100 => 2,
        }
    }

    pub fn record_size(self) -> usize {
        self.label_bytes() + CIFAR_IMAGE_BYTES
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::C10 => 10,
            CifarVariant::C100 => 100,
        }
    }

    pub fn normalization(self) -> Normalization {
        match self {
            CifarVariant::C10 => Normalization::cifar10(),
            CifarVariant::C100 => Normalization::cifar100(),
        }
    }

    fn files(self, split: CifarSplit) -> (&'static str, Vec<String>) {
        match (self, split) {
            (CifarVariant::C10, CifarSplit::Train) => (
                "cifar-10-batches-bin",
                (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            ),
            (CifarVariant::C10, CifarSplit::Test) => {
                ("cifar-10-batches-bin", vec!["test_batch.bin".into()])
            }
            (CifarVariant::C100, CifarSplit::Train) => {
                ("cifar-100-binary", vec!["train.bin".into()])
            }
            (CifarVariant::C100, CifarSplit::Test) => ("cifar-100-binary", vec!["test.bin".into()]),
        }
    }
}

/// Splits a batch file into pixel bytes and labels (the fine label for
/// CIFAR-100).
pub fn parse_cifar(bytes: &[u8], variant: CifarVariant) -> Result<(Vec<u8>, Vec<usize>)> {
    let rec = variant.record_size();
    if bytes.is_empty() || !bytes.len().is_multiple_of(rec) {
        let whole = bytes.len() / rec * rec;
        return Err(Error::Format {
            offset: whole as u64,
            message: format!(
                "{} bytes is not a positive multiple of the {rec}-byte record",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / rec;
    let lb = variant.label_bytes();
    let mut pixels = Vec::with_capacity(n * CIFAR_IMAGE_BYTES);
    let mut labels = Vec::with_capacity(n);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let y = r[lb - 1] as usize;
        if y >= variant.num_classes() {
            return Err(Error::Format {
                offset: (i * rec + lb - 1) as u64,
                message: format!("label {y} outside [0, {})", variant.num_classes()),
            });
        }
        labels.push(y);
        pixels.extend_from_slice(&r[lb..]);
    }
    Ok((pixels, labels))
}

fn resolve(dir: &Path, sub: &str, file: &str) -> PathBuf {
    let direct = dir.join(file);
    if direct.exists() {
        direct
    } else {
        dir.join(sub).join(file)
    }
}

/// Loads a split from `dir` (or its standard extracted subdirectory),
/// normalized with the variant's per-channel statistics.
pub fn load_cifar<S: Scalar>(
    dir: impl AsRef<Path>,
    variant: CifarVariant,
    split: CifarSplit,
) -> Result<Dataset<S>> {
    let (sub, files) = variant.files(split);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let path = resolve(dir.as_ref(), sub, &f);
        let bytes = std::fs::read(&path)?;
        let (p, l) = parse_cifar(&bytes, variant).map_err(|e| match e {
            Error::Format { offset, message } => Error::Format {
                offset,
                message: format!("{}: {message}", path.display()),
            },
            e => e,
        })?;
        pixels.extend(p);
        labels.extend(l);
    }
    let n = labels.len();
    let mut data: Vec<S> = pixels.iter().map(|&p| S::c(p as f64 / 255.0)).collect();
    variant.normalization().normalize(&mut data, 3, 32 * 32)?;
    let tag = match split {
        CifarSplit::Train => "train",
        CifarSplit::Test => "test",
    };
    Dataset::new(
        Tensor::new(data, &[n, 3, 32, 32])?,
        labels,
        variant.num_classes(),
        tag,
    )
}
