//! Variational objective: scale-mixture prior, diagonal Gaussian posterior
//! density and the minibatch ELBO.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::LayerMode;
use crate::models::{ForwardCtx, Model};
use crate::rng::{RngStream, Site};
use crate::tensor::optim::Optimizer;
use crate::{Scalar, Tensor};

pub use crate::models::mc_dropout_forward;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Two-component zero-mean Gaussian mixture
/// `pi·N(0, exp(log_var1)) + (1 − pi)·N(0, exp(log_var2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleMixturePrior {
    pub pi: f64,
    pub log_var1: f64,
    pub log_var2: f64,
}

impl Default for ScaleMixturePrior {
    fn default() -> Self {
        Self {
            pi: 0.25,
            log_var1: 0.0,
            log_var2: -6.0,
        }
    }
}

impl ScaleMixturePrior {
    pub fn validate(&self) -> Result<()> {
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return Err(Error::Parameter(format!(
                "prior pi {} outside (0, 1)",
                self.pi
            )));
        }
        if !self.log_var1.is_finite() || !self.log_var2.is_finite() {
            return Err(Error::Parameter(
                "prior log-variances must be finite".into(),
            ));
        }
        Ok(())
    }

    /// Log density of one coordinate and its derivative.
    pub fn log_density(&self, w: f64) -> (f64, f64) {
        let (v1, v2) = (self.log_var1.exp(), self.log_var2.exp());
        let a = self.pi.ln() - HALF_LN_2PI - 0.5 * self.log_var1 - w * w / (2.0 * v1);
        let b = (1.0 - self.pi).ln() - HALF_LN_2PI - 0.5 * self.log_var2 - w * w / (2.0 * v2);
        let m = a.max(b);
        let (ea, eb) = ((a - m).exp(), (b - m).exp());
        let lse = m + (ea + eb).ln();
        // responsibilities of each component
        let (ra, rb) = (ea / (ea + eb), eb / (ea + eb));
        (lse, -w * (ra / v1 + rb / v2))
    }
}

/// Sum over elements of the prior log density, differentiable in `w`.
pub fn prior_log_prob<S: Scalar>(w: &Tensor<S>, prior: &ScaleMixturePrior) -> Tensor<S> {
    let mut total = 0.0;
    let mut dw = Vec::with_capacity(w.numel());
    for &v in w.data() {
        let (lp, d) = prior.log_density(v.f64());
        total += lp;
        dw.push(S::c(d));
    }
    Tensor::from_op(
        "prior_log_prob",
        vec![1],
        vec![S::c(total)],
        &[w],
        move |g| vec![Some(dw.iter().map(|&d| d * g[0]).collect())],
    )
}

/// One sampled weight tensor with the Gaussian it was drawn from.
#[derive(Debug, Clone)]
pub struct SampleRecord<S: Scalar> {
    pub w: Tensor<S>,
    pub mu: Tensor<S>,
    pub sigma: Tensor<S>,
}

impl<S: Scalar> SampleRecord<S> {
    pub fn numel(&self) -> usize {
        self.w.numel()
    }
}

/// `Σ −½log(2π) − log σ − (w − μ)²/(2σ²)` over every record, differentiable
/// in `w`, `mu` and `sigma`.
pub fn posterior_log_prob<S: Scalar>(records: &[SampleRecord<S>]) -> Result<Tensor<S>> {
    let mut total: Option<Tensor<S>> = None;
    for (r, rec) in records.iter().enumerate() {
        let shape = rec.w.shape();
        if rec.mu.shape() != shape || rec.sigma.shape() != shape {
            return Err(Error::Dimension(format!(
                "sample record {r}: w {:?}, mu {:?}, sigma {:?} differ",
                shape,
                rec.mu.shape(),
                rec.sigma.shape()
            )));
        }
        if let Some(i) = rec.sigma.data().iter().position(|&s| !(s > S::zero())) {
            return Err(Error::Contract(format!(
                "sample record {r}: sigma[{i}] = {} is not positive",
                rec.sigma.data()[i]
            )));
        }
        let n = rec.numel();
        let (mut acc, mut dw, mut ds) = (0.0, Vec::with_capacity(n), Vec::with_capacity(n));
        for ((&w, &m), &s) in rec.w.data().iter().zip(rec.mu.data()).zip(rec.sigma.data()) {
            let (w, m, s) = (w.f64(), m.f64(), s.f64());
            let z = (w - m) / s;
            acc += -HALF_LN_2PI - s.ln() - 0.5 * z * z;
            dw.push(-z / s);
            ds.push((z * z - 1.0) / s);
        }
        let term = Tensor::from_op(
            "posterior_log_prob",
            vec![1],
            vec![S::c(acc)],
            &[&rec.w, &rec.mu, &rec.sigma],
            move |g| {
                let gw: Vec<S> = dw.iter().map(|&d| S::c(d) * g[0]).collect();
                let gm = gw.iter().map(|&v| -v).collect();
                let gs = ds.iter().map(|&d| S::c(d) * g[0]).collect();
                vec![Some(gw), Some(gm), Some(gs)]
            },
        );
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term)?,
        });
    }
    Ok(total.unwrap_or_else(|| Tensor::zeros(&[1])))
}

/// Scalar components of one ELBO evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub log_q: f64,
    pub log_prior: f64,
    pub nll: f64,
    pub kl_weight: f64,
    pub total: f64,
}

/// Minibatch objective `kl_weight·(log q − log prior) + mean cross-entropy`.
///
/// With `kl_weight == 0` or no records the total is the cross-entropy tensor
/// itself.
pub fn elbo_loss<S: Scalar>(
    logits: &Tensor<S>,
    labels: &[usize],
    records: &[SampleRecord<S>],
    prior: &ScaleMixturePrior,
    kl_weight: f64,
) -> Result<(Tensor<S>, ElboBreakdown)> {
    if !(kl_weight >= 0.0 && kl_weight.is_finite()) {
        return Err(Error::Parameter(format!(
            "kl_weight {kl_weight} must be finite and >= 0"
        )));
    }
    let nll = logits.cross_entropy(labels)?;
    let nll_v = nll.item().f64();
    if kl_weight == 0.0 || records.is_empty() {
        let (log_q, log_prior) = if records.is_empty() {
            (0.0, 0.0)
        } else {
            (
                posterior_log_prob(records)?.item().f64(),
                records
                    .iter()
                    .map(|r| prior_log_prob(&r.w.detach(), prior).item().f64())
                    .sum(),
            )
        };
        let b = ElboBreakdown {
            log_q,
            log_prior,
            nll: nll_v,
            kl_weight,
            total: nll_v,
        };
        return Ok((nll, b));
    }
    let log_q = posterior_log_prob(records)?;
    let mut log_prior = prior_log_prob(&records[0].w, prior);
    for r in &records[1..] {
        log_prior = log_prior.add(&prior_log_prob(&r.w, prior))?;
    }
    let kl = log_q.sub(&log_prior)?.scale(S::c(kl_weight));
    let total = kl.add(&nll)?;
    let b = ElboBreakdown {
        log_q: log_q.item().f64(),
        log_prior: log_prior.item().f64(),
        nll: nll_v,
        kl_weight,
        total: total.item().f64(),
    };
    Ok((total, b))
}

/// Settings of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOptions {
    pub prior: ScaleMixturePrior,
    pub kl_weight: f64,
    /// Weight draws averaged per step.
    pub mc_samples: usize,
    /// Forces a layer mode instead of the model's training default.
    pub layer_mode: Option<LayerMode>,
}

impl StepOptions {
    pub fn new(kl_weight: f64) -> Self {
        Self {
            prior: ScaleMixturePrior::default(),
            kl_weight,
            mc_samples: 1,
            layer_mode: None,
        }
    }
}

/// Forward, backward and one optimizer update on a minibatch.
///
/// Weight noise for step `step` comes from the stream `(seed, WeightNoise,
/// step)` and dropout masks from `(seed, Dropout, step)`, so a step is fully
/// determined by the parameters, the batch and `(seed, step)`.
#[allow(clippy::too_many_arguments)]
pub fn train_step<S: Scalar>(
    model: &mut Model<S>,
    x: &Tensor<S>,
    labels: &[usize],
    opt: &mut Optimizer<S>,
    opts: &StepOptions,
    seed: u64,
    step: u64,
) -> Result<ElboBreakdown> {
    if opts.mc_samples == 0 {
        return Err(Error::Parameter("mc_samples must be >= 1".into()));
    }
    model.zero_grads();
    let mut weight_rng = RngStream::new(seed, Site::WeightNoise, step);
    let mut drop_rng = RngStream::new(seed, Site::Dropout, step);
    let k = opts.mc_samples as f64;
    let mut loss: Option<Tensor<S>> = None;
    let mut acc = ElboBreakdown {
        log_q: 0.0,
        log_prior: 0.0,
        nll: 0.0,
        kl_weight: opts.kl_weight,
        total: 0.0,
    };
    for _ in 0..opts.mc_samples {
        let mut ctx = ForwardCtx::training(&model.config, &mut weight_rng, &mut drop_rng);
        if let Some(mode) = opts.layer_mode {
            ctx.mode = mode;
        }
        let (logits, records) = model.forward(x, &mut ctx)?;
        let (total, b) = elbo_loss(&logits, labels, &records, &opts.prior, opts.kl_weight)?;
        let total = if opts.mc_samples == 1 {
            total
        } else {
            total.scale(S::c(1.0 / k))
        };
        loss = Some(match loss {
            None => total,
            Some(l) => l.add(&total)?,
        });
        acc.log_q += b.log_q / k;
        acc.log_prior += b.log_prior / k;
        acc.nll += b.nll / k;
    }
    let loss = loss.expect("mc_samples >= 1");
    acc.total = if opts.mc_samples == 1 {
        loss.item().f64()
    } else {
        acc.kl_weight * (acc.log_q - acc.log_prior) + acc.nll
    };
    loss.backward()?;
    model.apply_optimizer(opt)?;
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients;
    use crate::RngStream;

    /// Direct mixture density, no log-sum-exp.
    fn mixture_density(w: f64) -> f64 {
        let phi = |x: f64, s: f64| {
            (-(x * x) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
        };
        0.25 * phi(w, 1.0) + 0.75 * phi(w, (-3.0f64).exp())
    }

    #[test]
    fn prior_at_zero() {
        let p = ScaleMixturePrior::default();
        let v = prior_log_prob(&Tensor::<f64>::zeros(&[1]), &p).item();
        assert!((v - mixture_density(0.0).ln()).abs() < 1e-12);
        // 0.25/√(2π) + 0.75·e³/√(2π), evaluated at 30 digits
        assert!((v - 1.809_838_880_207_789_9).abs() < 1e-12);
        let many = prior_log_prob(&Tensor::<f64>::zeros(&[1000]), &p).item();
        assert!((many - 1000.0 * v).abs() < 1e-9);
    }

    #[test]
    fn prior_probe_points_match_direct_density() {
        let p = ScaleMixturePrior::default();
        for w in [0.0, 0.05, -0.05, 1.0, -1.0, 3.0, -3.0] {
            let got = prior_log_prob(&Tensor::<f64>::full(&[1], w), &p).item();
            let want = mixture_density(w).ln();
            assert!(
                ((got - want) / want).abs() < 1e-12,
                "w={w}: {got} vs {want}"
            );
        }
        // 30-digit references
        for (w, want) in [
            (0.05, 1.316_168_406_364_057_6),
            (1.0, -2.805_232_894_324_563_4),
            (3.0, -6.805_232_894_324_563_4),
        ] {
            let got = prior_log_prob(&Tensor::<f64>::full(&[1], w), &p).item();
            assert!(((got - want) / want).abs() < 1e-12);
        }
        // far tail where the direct density underflows, log-sum-exp stays finite
        assert!(prior_log_prob(&Tensor::<f64>::full(&[1], 100.0), &p)
            .item()
            .is_finite());
    }

    #[test]
    fn degenerate_mixture_is_single_gaussian() {
        let p = ScaleMixturePrior {
            pi: 0.3,
            log_var1: 0.7,
            log_var2: 0.7,
        };
        let s2 = 0.7f64.exp();
        for w in [-2.0, 0.0, 0.4, 5.0] {
            let got = prior_log_prob(&Tensor::<f64>::full(&[1], w), &p).item();
            let want = -HALF_LN_2PI - 0.35 - w * w / (2.0 * s2);
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn prior_symmetric_and_peaked_at_zero() {
        let p = ScaleMixturePrior::default();
        let at0 = p.log_density(0.0).0;
        let mut rng = RngStream::from_seed(1);
        for _ in 0..200 {
            let w = rng.uniform(-5.0, 5.0);
            assert_eq!(p.log_density(w).0, p.log_density(-w).0);
            assert!(p.log_density(w).0 <= at0);
        }
    }

    #[test]
    fn prior_gradient() {
        let p = ScaleMixturePrior::default();
        let w = Tensor::<f64>::new(vec![0.0, 0.03, -0.1, 0.5, -2.0], &[5]).unwrap();
        let r = check_gradients(&[w], 1e-6, |t| Ok(prior_log_prob(&t[0], &p))).unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }

    fn record(w: Vec<f64>, mu: Vec<f64>, sigma: Vec<f64>) -> SampleRecord<f64> {
        let n = w.len();
        SampleRecord {
            w: Tensor::new(w, &[n]).unwrap(),
            mu: Tensor::new(mu, &[n]).unwrap(),
            sigma: Tensor::new(sigma, &[n]).unwrap(),
        }
    }

    #[test]
    fn posterior_standard_cases() {
        let r = record(vec![0.3; 7], vec![0.3; 7], vec![1.0; 7]);
        let v = posterior_log_prob(&[r]).unwrap().item();
        assert!((v + 7.0 * HALF_LN_2PI).abs() < 1e-12);
        let s = 0.2;
        let r = record(vec![1.0 + s], vec![1.0], vec![s]);
        let v = posterior_log_prob(&[r]).unwrap().item();
        assert!((v - (-HALF_LN_2PI - s.ln() - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn posterior_matches_loop_and_peaks_at_mu() {
        let mut rng = RngStream::from_seed(2);
        let mut recs = Vec::new();
        let mut want = 0.0;
        for n in [3, 5] {
            let w: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let mu: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let s: Vec<f64> = (0..n).map(|_| rng.uniform(0.1, 2.0)).collect();
            for i in 0..n {
                let d = (-(w[i] - mu[i]).powi(2) / (2.0 * s[i] * s[i])).exp()
                    / (s[i] * (2.0 * std::f64::consts::PI).sqrt());
                want += d.ln();
            }
            recs.push(record(w, mu, s));
        }
        let got = posterior_log_prob(&recs).unwrap().item();
        assert!(((got - want) / want).abs() < 1e-10);

        let at_mu: Vec<_> = recs
            .iter()
            .map(|r| record(r.mu.to_vec(), r.mu.to_vec(), r.sigma.to_vec()))
            .collect();
        assert!(posterior_log_prob(&at_mu).unwrap().item() >= got);
    }

    #[test]
    fn posterior_rejects_nonpositive_sigma() {
        let r = record(vec![0.0, 0.0], vec![0.0, 0.0], vec![1.0, 0.0]);
        assert!(matches!(posterior_log_prob(&[r]), Err(Error::Contract(_))));
    }

    #[test]
    fn posterior_gradient() {
        let mut rng = RngStream::from_seed(3);
        let w = Tensor::<f64>::uniform(&[6], 1.0, &mut rng);
        let mu = Tensor::<f64>::uniform(&[6], 1.0, &mut rng);
        let sigma = Tensor::<f64>::uniform(&[6], 0.3, &mut rng).add_scalar(0.5);
        let r = check_gradients(&[w, mu, sigma], 1e-6, |t| {
            posterior_log_prob(&[SampleRecord {
                w: t[0].clone(),
                mu: t[1].clone(),
                sigma: t[2].clone(),
            }])
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn zero_kl_weight_is_pure_cross_entropy() {
        let logits = Tensor::<f64>::new(vec![1.0, -1.0, 0.5, 0.2], &[2, 2]).unwrap();
        let rec = record(vec![0.1], vec![0.0], vec![0.5]);
        let p = ScaleMixturePrior::default();
        let (t, b) = elbo_loss(&logits, &[0, 1], &[rec], &p, 0.0).unwrap();
        let ce = logits.cross_entropy(&[0, 1]).unwrap().item();
        assert_eq!(t.item(), ce);
        assert_eq!(b.total, b.nll);
    }

    #[test]
    fn hand_built_batch() {
        // 4 samples, 2 classes; logits chosen so log-softmax is easy to write out
        let logits =
            Tensor::<f64>::new(vec![2.0, 0.0, 0.0, 1.0, 1.0, 1.0, -1.0, 0.5], &[4, 2]).unwrap();
        let labels = [0, 1, 0, 0];
        let rec = record(vec![0.2, -0.1], vec![0.1, 0.0], vec![0.5, 0.25]);
        let p = ScaleMixturePrior::default();
        let (t, b) = elbo_loss(&logits, &labels, &[rec], &p, 0.1).unwrap();

        let lse = |a: f64, b: f64| (a.exp() + b.exp()).ln();
        let nll = ((lse(2.0, 0.0) - 2.0)
            + (lse(0.0, 1.0) - 1.0)
            + (lse(1.0, 1.0) - 1.0)
            + (lse(-1.0, 0.5) + 1.0))
            / 4.0;
        let log_q = (-HALF_LN_2PI - 0.5f64.ln() - 0.5 * 0.1f64.powi(2) / 0.25)
            + (-HALF_LN_2PI - 0.25f64.ln() - 0.5 * 0.1f64.powi(2) / 0.0625);
        let log_prior = mixture_density(0.2).ln() + mixture_density(-0.1).ln();
        let want = 0.1 * (log_q - log_prior) + nll;
        assert!((b.nll - nll).abs() < 1e-12);
        assert!((b.log_q - log_q).abs() < 1e-12);
        assert!((b.log_prior - log_prior).abs() < 1e-12);
        assert!((t.item() - want).abs() < 1e-5);
        assert!((b.total - want).abs() < 1e-5);
        assert!((b.total - (b.kl_weight * (b.log_q - b.log_prior) + b.nll)).abs() < 1e-12);
    }

    #[test]
    fn shrinking_sigma_inflates_the_objective() {
        let logits = Tensor::<f64>::new(vec![0.0, 0.0], &[1, 2]).unwrap();
        let p = ScaleMixturePrior::default();
        let mut prev = f64::NEG_INFINITY;
        for e in [1.0_f64, 5.0, 10.0, 20.0, 25.0] {
            let s = (-e).exp();
            let rec = record(vec![0.1; 4], vec![0.1; 4], vec![s; 4]);
            let (_, b) = elbo_loss(&logits, &[0], &[rec], &p, 1.0).unwrap();
            assert!(b.total > prev);
            prev = b.total;
        }
    }

    #[test]
    fn label_out_of_range_is_data_error() {
        let logits = Tensor::<f32>::zeros(&[2, 3]);
        let r = elbo_loss(&logits, &[0, 3], &[], &ScaleMixturePrior::default(), 1.0);
        assert!(matches!(r, Err(Error::Data(_))));
    }
}
