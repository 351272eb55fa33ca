//! Synthetic image classification tasks.

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{RngStream, Site};
use crate::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Class `k` has mean `(separation / √2)·e_k`, with `e_k` the unit
    /// indicator of the k-th contiguous pixel block, so every pair of class
    /// means is `separation` apart. Isotropic Gaussian pixel noise.
    GaussianBlobs,
    /// Square-wave stripes whose orientation and width encode the class.
    Striped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub n: usize,
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Per-pixel noise standard deviation.
    pub noise: f64,
    /// Distance between class means (blobs) or stripe amplitude (striped).
    pub separation: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn blobs(n: usize, classes: usize, shape: (usize, usize, usize), seed: u64) -> Self {
        Self {
            kind: SynthKind::GaussianBlobs,
            n,
            classes,
            channels: shape.0,
            height: shape.1,
            width: shape.2,
            noise: 1.0,
            separation: 8.0,
            seed,
        }
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Noise-free image of class `k`.
    pub fn class_mean(&self, k: usize) -> Vec<f64> {
        let p = self.pixels();
        match self.kind {
            SynthKind::GaussianBlobs => {
                let block = p / self.classes;
                let v = self.separation / (2.0 * block as f64).sqrt();
                let mut m = vec![0.0; p];
                m[k * block..(k + 1) * block]
                    .iter_mut()
                    .for_each(|x| *x = v);
                m
            }
            SynthKind::Striped => {
                let half = 1 + k / 2;
                let amp = self.separation / 2.0;
                (0..p)
                    .map(|i| {
                        let (r, c) = ((i / self.width) % self.height, i % self.width);
                        let coord = if k.is_multiple_of(2) { r } else { c };
                        if (coord / half).is_multiple_of(2) {
                            amp
                        } else {
                            -amp
                        }
                    })
                    .collect()
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.pixels() < self.classes {
            return Err(Error::Parameter(format!(
                "synthetic task needs 2 <= classes <= pixels, got {} classes over {} pixels",
                self.classes,
                self.pixels()
            )));
        }
        if !(self.noise >= 0.0) || !self.separation.is_finite() {
            return Err(Error::Parameter(format!(
                "noise {} / separation {}",
                self.noise, self.separation
            )));
        }
        Ok(())
    }
}

/// Draws `spec.n` labelled images, labels cycling through the classes, from
/// the stream `(spec.seed, Synth, 0)`.
pub fn synth_dataset<S: Scalar>(spec: &SynthSpec) -> Result<Dataset<S>> {
    spec.validate()?;
    let means: Vec<Vec<f64>> = (0..spec.classes).map(|k| spec.class_mean(k)).collect();
    let mut rng = RngStream::new(spec.seed, Site::Synth, 0);
    let mut data = Vec::with_capacity(spec.n * spec.pixels());
    let labels: Vec<usize> = (0..spec.n).map(|i| i % spec.classes).collect();
    for &y in &labels {
        data.extend(
            means[y]
                .iter()
                .map(|&m| S::c(m + spec.noise * rng.normal::<f64>())),
        );
    }
    let x = Tensor::new(data, &[spec.n, spec.channels, spec.height, spec.width])?;
    Dataset::new(x, labels, spec.classes, "synth")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nearest_mean_accuracy(spec: &SynthSpec, ds: &Dataset<f64>) -> f64 {
        let means: Vec<_> = (0..spec.classes).map(|k| spec.class_mean(k)).collect();
        let p = spec.pixels();
        let hits = ds
            .images
            .data()
            .chunks(p)
            .zip(&ds.labels)
            .filter(|(x, &y)| {
                let d = |m: &Vec<f64>| x.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                (0..spec.classes)
                    .min_by(|&a, &b| d(&means[a]).total_cmp(&d(&means[b])))
                    .unwrap()
                    == y
            })
            .count();
        hits as f64 / ds.len() as f64
    }

    #[test]
    fn noiseless_tasks_are_perfectly_separable() {
        for kind in [SynthKind::GaussianBlobs, SynthKind::Striped] {
            let spec = SynthSpec {
                kind,
                noise: 0.0,
                ..SynthSpec::blobs(200, 10, (1, 12, 12), 3)
            };
            let ds = synth_dataset::<f64>(&spec).unwrap();
            assert_eq!(nearest_mean_accuracy(&spec, &ds), 1.0, "{kind:?}");
        }
    }

    #[test]
    fn class_means_are_equidistant() {
        let spec = SynthSpec {
            separation: 2.0,
            ..SynthSpec::blobs(1, 5, (2, 5, 7), 0)
        };
        for a in 0..5 {
            for b in 0..a {
                let (ma, mb) = (spec.class_mean(a), spec.class_mean(b));
                let d: f64 = ma
                    .iter()
                    .zip(&mb)
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!((d - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fixed_seed_reproduces() {
        let spec = SynthSpec::blobs(30, 3, (1, 4, 4), 11);
        let a = synth_dataset::<f32>(&spec).unwrap();
        let b = synth_dataset::<f32>(&spec).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        let c = synth_dataset::<f32>(&SynthSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(a.images.data(), c.images.data());
    }
}
