use std::sync::Mutex;

use super::Tensor;
use crate::error::{dim_err, Error, Result};
use crate::rng::RngStream;
use crate::Scalar;

/// Running statistics of a batch-norm layer.
#[derive(Debug)]
pub struct BatchNormStats<S: Scalar> {
    inner: Mutex<(Vec<S>, Vec<S>)>,
}

impl<S: Scalar> BatchNormStats<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            inner: Mutex::new((vec![S::zero(); channels], vec![S::one(); channels])),
        }
    }

    pub fn channels(&self) -> usize {
        self.inner.lock().expect("bn lock").0.len()
    }

    pub fn running_mean(&self) -> Vec<S> {
        self.inner.lock().expect("bn lock").0.clone()
    }

    pub fn running_var(&self) -> Vec<S> {
        self.inner.lock().expect("bn lock").1.clone()
    }

    pub fn set(&self, mean: Vec<S>, var: Vec<S>) -> Result<()> {
        let mut g = self.inner.lock().expect("bn lock");
        if mean.len() != g.0.len() || var.len() != g.1.len() {
            return dim_err("batch-norm statistics length mismatch");
        }
        *g = (mean, var);
        Ok(())
    }
}

impl<S: Scalar> Clone for BatchNormStats<S> {
    fn clone(&self) -> Self {
        let g = self.inner.lock().expect("bn lock");
        Self {
            inner: Mutex::new(g.clone()),
        }
    }
}

/// Per-channel batch normalization over `[N×C(×H×W)]`.
///
/// In training mode, normalizes with batch statistics (biased variance) and
/// updates the running estimates (unbiased variance) with `momentum`. In
/// evaluation mode, uses the running estimates.
pub fn batch_norm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    stats: &BatchNormStats<S>,
    train: bool,
    momentum: S,
    eps: S,
) -> Result<Tensor<S>> {
    let s = x.shape();
    if s.len() < 2 || gamma.numel() != s[1] || beta.numel() != s[1] || stats.channels() != s[1] {
        return dim_err(format!(
            "batch_norm: input {s:?} incompatible with gamma {:?} / beta {:?}",
            gamma.shape(),
            beta.shape()
        ));
    }
    let (n, c) = (s[0], s[1]);
    let hw: usize = s[2..].iter().product();
    let m = n * hw;
    let xd = x.data();
    let at = move |b: usize, ch: usize, i: usize| (b * c + ch) * hw + i;

    let (mean, var) = if train {
        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        for ch in 0..c {
            let mut acc = S::zero();
            for b in 0..n {
                for i in 0..hw {
                    acc = acc + xd[at(b, ch, i)];
                }
            }
            let mu = acc / S::c(m as f64);
            let mut sq = S::zero();
            for b in 0..n {
                for i in 0..hw {
                    let d = xd[at(b, ch, i)] - mu;
                    sq = sq + d * d;
                }
            }
            mean[ch] = mu;
            var[ch] = sq / S::c(m as f64);
        }
        let mut g = stats.inner.lock().expect("bn lock");
        let unbias = if m > 1 {
            S::c(m as f64 / (m - 1) as f64)
        } else {
            S::one()
        };
        for ch in 0..c {
            g.0[ch] = (S::one() - momentum) * g.0[ch] + momentum * mean[ch];
            g.1[ch] = (S::one() - momentum) * g.1[ch] + momentum * var[ch] * unbias;
        }
        (mean, var)
    } else {
        let g = stats.inner.lock().expect("bn lock");
        (g.0.clone(), g.1.clone())
    };

    let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![S::zero(); xd.len()];
    let mut out = vec![S::zero(); xd.len()];
    let (gd, bd) = (gamma.data(), beta.data());
    for b in 0..n {
        for ch in 0..c {
            for i in 0..hw {
                let j = at(b, ch, i);
                xhat[j] = (xd[j] - mean[ch]) * inv_std[ch];
                out[j] = gd[ch] * xhat[j] + bd[ch];
            }
        }
    }

    let gamma_d = gamma.data_arc();
    Ok(Tensor::from_op(
        "batch_norm",
        s.to_vec(),
        out,
        &[x, gamma, beta],
        move |g| {
            let mut dgamma = vec![S::zero(); c];
            let mut dbeta = vec![S::zero(); c];
            let mut dx = vec![S::zero(); g.len()];
            for ch in 0..c {
                let (mut sum_g, mut sum_gx) = (S::zero(), S::zero());
                for b in 0..n {
                    for i in 0..hw {
                        let j = at(b, ch, i);
                        sum_g = sum_g + g[j];
                        sum_gx = sum_gx + g[j] * xhat[j];
                    }
                }
                dgamma[ch] = sum_gx;
                dbeta[ch] = sum_g;
                let scale = gamma_d[ch] * inv_std[ch];
                if train {
                    let mf = S::c(m as f64);
                    for b in 0..n {
                        for i in 0..hw {
                            let j = at(b, ch, i);
                            dx[j] = scale / mf * (mf * g[j] - sum_g - xhat[j] * sum_gx);
                        }
                    }
                } else {
                    for b in 0..n {
                        for i in 0..hw {
                            let j = at(b, ch, i);
                            dx[j] = scale * g[j];
                        }
                    }
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        },
    ))
}

/// Inverted dropout: zeroes each entry with probability `rate` and scales
/// survivors by `1/(1 - rate)`. Inactive or zero-rate dropout returns `x`
/// unchanged.
pub fn dropout<S: Scalar>(
    x: &Tensor<S>,
    rate: f64,
    active: bool,
    rng: &mut RngStream,
) -> Result<Tensor<S>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    if !active || rate == 0.0 {
        return Ok(x.clone());
    }
    let keep = S::c(1.0 / (1.0 - rate));
    let mask: Vec<S> = (0..x.numel())
        .map(|_| {
            if rng.unit_f64() >= rate {
                keep
            } else {
                S::zero()
            }
        })
        .collect();
    let out = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok(Tensor::from_op(
        "dropout",
        x.shape().to_vec(),
        out,
        &[x],
        move |g| vec![Some(g.iter().zip(&mask).map(|(&g, &m)| g * m).collect())],
    ))
}

impl<S: Scalar> Tensor<S> {
    /// Row-wise log-softmax of `[N×C]` logits.
    pub fn log_softmax(&self) -> Result<Tensor<S>> {
        let s = self.shape();
        if s.len() != 2 {
            return dim_err(format!("log_softmax: expected [N×C], got {s:?}"));
        }
        let c = s[1];
        let mut out = Vec::with_capacity(self.numel());
        for row in self.data().chunks(c) {
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<S>().ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        let y = std::sync::Arc::new(out);
        let yc = std::sync::Arc::clone(&y);
        Ok(Tensor::from_op_shared(
            "log_softmax",
            s.to_vec(),
            y,
            &[self],
            move |g| {
                let mut gx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(c).zip(yc.chunks(c)) {
                    let total: S = gr.iter().copied().sum();
                    gx.extend(gr.iter().zip(yr).map(|(&g, &y)| g - y.exp() * total));
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Row-wise softmax probabilities (untracked).
    pub fn softmax(&self) -> Result<Tensor<S>> {
        let lp = super::no_grad(|| self.log_softmax())?;
        Tensor::new(lp.data().iter().map(|v| v.exp()).collect(), lp.shape())
    }

    /// Mean negative log-likelihood of `labels` under row log-probabilities.
    pub fn nll_loss(&self, labels: &[usize]) -> Result<Tensor<S>> {
        let s = self.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return dim_err(format!(
                "nll_loss: log-probs {s:?} vs {} labels",
                labels.len()
            ));
        }
        let (n, c) = (s[0], s[1]);
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= c) {
            return Err(Error::Data(format!(
                "label {y} at index {i} outside [0, {c})"
            )));
        }
        let d = self.data();
        let total: S = labels.iter().enumerate().map(|(i, &y)| d[i * c + y]).sum();
        let inv = S::one() / S::c(n as f64);
        let labels = labels.to_vec();
        Ok(Tensor::from_op(
            "nll_loss",
            vec![1],
            vec![-total * inv],
            &[self],
            move |g| {
                let mut gx = vec![S::zero(); n * c];
                for (i, &y) in labels.iter().enumerate() {
                    gx[i * c + y] = -g[0] * inv;
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Mean cross-entropy of `[N×C]` logits against `labels`.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor<S>> {
        self.log_softmax()?.nll_loss(labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients;

    #[test]
    fn log_softmax_and_nll() {
        let x = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0], &[2, 3]).unwrap();
        let lp = x.log_softmax().unwrap();
        let p0: f64 = lp.data()[..3].iter().map(|v| v.exp()).sum();
        assert!((p0 - 1.0).abs() < 1e-14);
        assert!((lp.data()[3] + 3f64.ln()).abs() < 1e-14);
        let loss = lp.nll_loss(&[2, 0]).unwrap();
        let expect = -(lp.data()[2] + lp.data()[3]) / 2.0;
        assert!((loss.item() - expect).abs() < 1e-14);
        assert!(matches!(lp.nll_loss(&[3, 0]), Err(Error::Data(_))));
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = RngStream::from_seed(14);
        let x = Tensor::<f64>::uniform(&[4, 5], 3.0, &mut rng).detach_param();
        let r = check_gradients(&[x], 1e-6, |p| p[0].cross_entropy(&[0, 4, 2, 2])).unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn batch_norm_train_and_eval_gradients() {
        let mut rng = RngStream::from_seed(15);
        let x = Tensor::<f64>::uniform(&[3, 2, 3, 3], 2.0, &mut rng).detach_param();
        let gamma = Tensor::<f64>::uniform(&[2], 1.0, &mut rng)
            .add_scalar(1.5)
            .detach_param();
        let beta = Tensor::<f64>::uniform(&[2], 1.0, &mut rng).detach_param();
        let w = Tensor::<f64>::uniform(&[3, 2, 3, 3], 1.0, &mut rng);
        for train in [true, false] {
            let stats = BatchNormStats::new(2);
            stats.set(vec![0.1, -0.2], vec![1.3, 0.7]).unwrap();
            let r = check_gradients(&[x.clone(), gamma.clone(), beta.clone()], 1e-6, |p| {
                Ok(batch_norm(&p[0], &p[1], &p[2], &stats, train, 0.1, 1e-5)?
                    .mul(&w)?
                    .sum())
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-5, "train={train} {r:?}");
        }
    }

    #[test]
    fn batch_norm_normalizes_and_tracks_running_stats() {
        let x = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0], &[2, 2, 2])
            .unwrap();
        let gamma = Tensor::full(&[2], 1.0);
        let beta = Tensor::full(&[2], 0.0);
        let stats = BatchNormStats::new(2);
        let y = batch_norm(&x, &gamma, &beta, &stats, true, 0.1, 0.0).unwrap();
        // channel 0 values {1,2,10,20}
        let ch0 = [y.data()[0], y.data()[1], y.data()[4], y.data()[5]];
        let mean: f64 = ch0.iter().sum::<f64>() / 4.0;
        let var: f64 = ch0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        let rm = stats.running_mean();
        assert!((rm[0] - 0.1 * 8.25).abs() < 1e-12);
        let rv = stats.running_var();
        let unbiased = [1.0f64, 2.0, 10.0, 20.0]
            .iter()
            .map(|v| (v - 8.25f64).powi(2))
            .sum::<f64>()
            / 3.0;
        assert!((rv[0] - (0.9 + 0.1 * unbiased)).abs() < 1e-12);
    }

    #[test]
    fn dropout_rate_zero_and_inactive_are_identity() {
        let mut rng = RngStream::from_seed(1);
        let x = Tensor::<f32>::uniform(&[10], 1.0, &mut rng);
        assert_eq!(dropout(&x, 0.0, true, &mut rng).unwrap().data(), x.data());
        assert_eq!(dropout(&x, 0.5, false, &mut rng).unwrap().data(), x.data());
        assert!(matches!(
            dropout(&x, 1.0, true, &mut rng),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn dropout_mask_mean() {
        let mut rng = RngStream::from_seed(77);
        let rate = 0.1;
        let x = Tensor::<f64>::full(&[1_000_000], 1.0);
        let y = dropout(&x, rate, true, &mut rng).unwrap();
        let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e6;
        assert!((kept - (1.0 - rate)).abs() < 0.01 * (1.0 - rate));
        let scaled_mean = y.data().iter().sum::<f64>() / 1e6;
        assert!((scaled_mean - 1.0).abs() < 0.01);
    }
}
