//! Datasets: binary decoders, normalization, synthetic generators, batching.

mod cifar;
mod idx;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{RngStream, Site};
use crate::{Scalar, Tensor};

pub use cifar::{load_cifar, parse_cifar, CifarSplit, CifarVariant, CIFAR_IMAGE_BYTES};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels, IdxImages};
pub use synth::{synth_dataset, SynthKind, SynthSpec};

/// Per-channel affine normalization `(x − mean) / std` applied to `[0, 1]` pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn mnist() -> Self {
        Self {
            mean: vec![0.1307],
            std: vec![0.3081],
        }
    }

    pub fn fmnist() -> Self {
        Self {
            mean: vec![0.2860],
            std: vec![0.3530],
        }
    }

    pub fn cifar10() -> Self {
        Self {
            mean: vec![0.4914, 0.4822, 0.4465],
            std: vec![0.2470, 0.2435, 0.2616],
        }
    }

    pub fn cifar100() -> Self {
        Self {
            mean: vec![0.5071, 0.4865, 0.4409],
            std: vec![0.2673, 0.2564, 0.2762],
        }
    }

    /// No-op normalization for `channels` channels.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    fn check(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels
            || self.std.len() != channels
            || self.std.iter().any(|&s| !(s > 0.0))
        {
            return Err(Error::Config(format!(
                "normalization needs {channels} means and positive stds, got {:?} / {:?}",
                self.mean, self.std
            )));
        }
        Ok(())
    }

    /// Normalizes `[N×C×H×W]` values in place.
    pub fn normalize<S: Scalar>(
        &self,
        data: &mut [S],
        channels: usize,
        plane: usize,
    ) -> Result<()> {
        self.check(channels)?;
        for (i, v) in data.iter_mut().enumerate() {
            let c = (i / plane) % channels;
            *v = S::c((v.f64() - self.mean[c]) / self.std[c]);
        }
        Ok(())
    }

    /// Inverse of [`Normalization::normalize`].
    pub fn denormalize<S: Scalar>(
        &self,
        data: &mut [S],
        channels: usize,
        plane: usize,
    ) -> Result<()> {
        self.check(channels)?;
        for (i, v) in data.iter_mut().enumerate() {
            let c = (i / plane) % channels;
            *v = S::c(v.f64() * self.std[c] + self.mean[c]);
        }
        Ok(())
    }
}

/// Images `[N×C×H×W]` with integer labels.
#[derive(Debug, Clone)]
pub struct Dataset<S: Scalar> {
    pub images: Tensor<S>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: String,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(
        images: Tensor<S>,
        labels: Vec<usize>,
        num_classes: usize,
        split: impl Into<String>,
    ) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} labels for images of shape {s:?}",
                labels.len()
            )));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(Error::Data(format!(
                "label {y} at index {i} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Images and labels at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor<S>, Vec<usize>)> {
        let (c, h, w) = self.image_shape();
        let per = c * h * w;
        let src = self.images.data();
        let mut out = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!(
                    "index {i} outside dataset of {}",
                    self.len()
                )));
            }
            out.extend_from_slice(&src[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(out, &[indices.len(), c, h, w])?, labels))
    }

    pub fn subset(&self, indices: &[usize], split: impl Into<String>) -> Result<Self> {
        let (images, labels) = self.gather(indices)?;
        Self::new(images, labels, self.num_classes, split)
    }
}

/// Minibatch schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub drop_last: bool,
}

impl BatchPlan {
    /// Number of batches per epoch over `n` examples.
    pub fn batches_per_epoch(&self, n: usize) -> usize {
        if self.drop_last {
            n / self.batch_size.max(1)
        } else {
            n.div_ceil(self.batch_size.max(1))
        }
    }
}

/// Example order of one epoch: a Fisher-Yates shuffle drawn from the stream
/// `(plan.seed, Shuffle, epoch)`.
pub fn epoch_order(n: usize, plan: &BatchPlan, epoch: u64) -> Vec<usize> {
    let mut rng = RngStream::new(plan.seed, Site::Shuffle, epoch);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.below(i + 1));
    }
    order
}

/// The minibatches `(x, labels)` of one epoch.
pub fn batches<'a, S: Scalar>(
    ds: &'a Dataset<S>,
    plan: &BatchPlan,
    epoch: u64,
) -> Result<impl Iterator<Item = Result<(Tensor<S>, Vec<usize>)>> + 'a> {
    if plan.batch_size == 0 {
        return Err(Error::Parameter("batch_size must be >= 1".into()));
    }
    let order = epoch_order(ds.len(), plan, epoch);
    let count = plan.batches_per_epoch(ds.len());
    let bs = plan.batch_size;
    Ok((0..count).map(move |b| {
        let end = ((b + 1) * bs).min(order.len());
        ds.gather(&order[b * bs..end])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset<f32> {
        let images = Tensor::new((0..n * 4).map(|v| v as f32).collect(), &[n, 1, 2, 2]).unwrap();
        Dataset::new(images, (0..n).map(|i| i % 3).collect(), 3, "toy").unwrap()
    }

    #[test]
    fn epoch_covers_every_example_once() {
        let ds = toy(103);
        let plan = BatchPlan {
            batch_size: 10,
            seed: 1,
            drop_last: false,
        };
        let mut seen: Vec<usize> = Vec::new();
        let mut labels = Vec::new();
        for b in batches(&ds, &plan, 0).unwrap() {
            let (x, y) = b.unwrap();
            assert_eq!(x.shape()[0], y.len());
            seen.extend(x.data().chunks(4).map(|c| c[0] as usize / 4));
            labels.extend(y);
        }
        let mut sorted = seen.clone();
        sorted.sort();
        assert_eq!(sorted, (0..103).collect::<Vec<_>>());
        let mut l1 = labels.clone();
        let mut l2 = ds.labels.clone();
        l1.sort();
        l2.sort();
        assert_eq!(l1, l2);

        let dropped = BatchPlan {
            drop_last: true,
            ..plan
        };
        assert_eq!(batches(&ds, &dropped, 0).unwrap().count(), 10);
    }

    #[test]
    fn order_is_a_function_of_seed_and_epoch() {
        let plan = BatchPlan {
            batch_size: 7,
            seed: 5,
            drop_last: false,
        };
        assert_eq!(epoch_order(1000, &plan, 3), epoch_order(1000, &plan, 3));
        assert_ne!(epoch_order(1000, &plan, 3), epoch_order(1000, &plan, 4));
        let other = BatchPlan { seed: 6, ..plan };
        assert_ne!(epoch_order(1000, &plan, 3), epoch_order(1000, &other, 3));
    }

    #[test]
    fn normalization_round_trip() {
        let mut rng = RngStream::from_seed(1);
        let orig: Vec<f32> = (0..2 * 3 * 16).map(|_| rng.uniform(0.0, 1.0)).collect();
        let mut v = orig.clone();
        let n = Normalization::cifar10();
        n.normalize(&mut v, 3, 16).unwrap();
        assert_ne!(v, orig);
        n.denormalize(&mut v, 3, 16).unwrap();
        for (a, b) in v.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(Normalization::mnist().normalize(&mut v, 3, 16).is_err());
    }

    #[test]
    fn dataset_rejects_bad_labels() {
        let images = Tensor::<f32>::zeros(&[2, 1, 2, 2]);
        assert!(matches!(
            Dataset::new(images.clone(), vec![0, 3], 3, "x"),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            Dataset::new(images, vec![0], 3, "x"),
            Err(Error::Data(_))
        ));
    }
}
