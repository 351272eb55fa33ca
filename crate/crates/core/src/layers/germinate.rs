//! Germination (1×1 decoding of seeds into weight-distribution maps) and
//! the variational sampler.

use serde::{Deserialize, Serialize};

use super::seed::{KernelSeed, SeedSpec};
use crate::bayes::SampleRecord;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::channel_map_1x1;
use crate::{Scalar, Tensor};

/// Initial value of every learnable `rho` offset and of directly
/// parameterized `rho` tensors: `softplus(-5) ≈ 0.0067`.
pub const RHO_INIT: f64 = -5.0;

/// Decoded `rho` is clamped to at least this value before the softplus.
pub const RHO_FLOOR: f64 = -20.0;

/// How a stochastic layer turns `(mu, rho)` into weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMode {
    /// Fresh `eps ~ N(0, 1)` on every forward.
    Variational,
    /// Mean path only; the `rho` path is not evaluated.
    FixedPoint,
    /// `eps = 0`: weights equal the decoded mean.
    PosteriorMean,
}

/// Source of the unit Gaussian noise `eps`.
pub enum Noise<'a> {
    Gaussian(&'a mut RngStream),
    Zeros,
}

impl Noise<'_> {
    pub fn draw<S: Scalar>(&mut self, shape: &[usize]) -> Tensor<S> {
        match self {
            Noise::Gaussian(rng) => Tensor::gaussian_sample(shape, rng),
            Noise::Zeros => Tensor::zeros(shape),
        }
    }

    /// The underlying stream, if any (dropout masks share it).
    pub fn rng(&mut self) -> Option<&mut RngStream> {
        match self {
            Noise::Gaussian(rng) => Some(rng),
            Noise::Zeros => None,
        }
    }
}

/// The pair of 1×1 decoders owned by a seeded layer. No bias terms.
#[derive(Debug, Clone)]
pub struct Germinator<S: Scalar> {
    /// `[c_f × c_pip]`
    pub g_mu: Tensor<S>,
    /// `[c_f × c_pip]`; absent in fixed-point (FKSN) layers.
    pub g_rho: Option<Tensor<S>>,
    /// Learnable scalar added to the decoded `rho` map.
    pub rho_offset: Option<Tensor<S>>,
}

impl<S: Scalar> Germinator<S> {
    /// Glorot-uniform decoders (fan_in = c_pip, fan_out = c_f) and
    /// `rho_offset = RHO_INIT`. `with_rho = false` builds the FKSN variant.
    pub fn init(spec: &SeedSpec, with_rho: bool, rng: &mut RngStream) -> Self {
        let a = S::c((6.0 / (spec.c_pip + spec.c_f) as f64).sqrt());
        let shape = [spec.c_f, spec.c_pip];
        let g_mu = Tensor::uniform(&shape, a, rng).detach_param();
        let (g_rho, rho_offset) = if with_rho {
            (
                Some(Tensor::uniform(&shape, a, rng).detach_param()),
                Some(Tensor::full(&[1], S::c(RHO_INIT)).detach_param()),
            )
        } else {
            (None, None)
        };
        Self {
            g_mu,
            g_rho,
            rho_offset,
        }
    }

    fn check(&self, spec: &SeedSpec) -> Result<()> {
        let want = [spec.c_f, spec.c_pip];
        let ok_mu = self.g_mu.shape() == want;
        let ok_rho = self.g_rho.as_ref().is_none_or(|g| g.shape() == want);
        if !ok_mu || !ok_rho {
            return Err(Error::Dimension(format!(
                "germinator shapes {:?}/{:?} do not match [c_f × c_pip] = {want:?}",
                self.g_mu.shape(),
                self.g_rho.as_ref().map(|g| g.shape().to_vec())
            )));
        }
        if self.g_rho.is_some() && self.rho_offset.as_ref().is_none_or(|o| o.numel() != 1) {
            return Err(Error::Dimension(
                "rho decoder present without a scalar rho_offset".into(),
            ));
        }
        Ok(())
    }
}

fn decode<S: Scalar>(seed: &KernelSeed<S>, mixer: &Tensor<S>) -> Result<Tensor<S>> {
    let spec = &seed.spec;
    let positions = seed.psi.numel() / spec.c_pip;
    let flat = seed.psi.reshape(&[spec.c_pip, positions])?;
    // [c_f × c_big·k·k]
    let mixed = channel_map_1x1(&flat, mixer)?;
    let mut shape = seed.psi.shape().to_vec();
    shape[0] = spec.c_f;
    let decoded = mixed.reshape(&shape)?;
    // decoded is [c_f × c_big (× k × k)]; orient it to [c_in × c_out (× k × k)]
    if spec.oriented_transpose {
        Ok(decoded)
    } else {
        decoded.swap_axes01()
    }
}

/// Decodes `W_mu` (and `W_rho` when the germinator has a rho decoder),
/// both shaped `[c_in × c_out (× k × k)]`.
pub fn germinate<S: Scalar>(
    seed: &KernelSeed<S>,
    germ: &Germinator<S>,
) -> Result<(Tensor<S>, Option<Tensor<S>>)> {
    germ.check(&seed.spec)?;
    let w_mu = decode(seed, &germ.g_mu)?;
    let w_rho = match (&germ.g_rho, &germ.rho_offset) {
        (Some(g), Some(off)) => Some(decode(seed, g)?.add_broadcast_scalar(off)?),
        _ => None,
    };
    Ok((w_mu, w_rho))
}

/// `sigma = softplus(max(rho, RHO_FLOOR))`.
pub fn sigma_from_rho<S: Scalar>(rho: &Tensor<S>) -> Tensor<S> {
    rho.clamp_min(S::c(RHO_FLOOR)).softplus()
}

/// Reparameterized draw `w = mu + sigma ⊙ eps`.
///
/// `PosteriorMean` returns `mu` itself (eps = 0). `FixedPoint` has no rho
/// path and is rejected here.
pub fn sample_weights<S: Scalar>(
    w_mu: &Tensor<S>,
    w_rho: &Tensor<S>,
    mode: LayerMode,
    noise: &mut Noise<'_>,
) -> Result<SampleRecord<S>> {
    if w_mu.shape() != w_rho.shape() {
        return Err(Error::Dimension(format!(
            "sample_weights: mu {:?} and rho {:?} differ",
            w_mu.shape(),
            w_rho.shape()
        )));
    }
    let sigma = sigma_from_rho(w_rho);
    let w = match mode {
        LayerMode::Variational => {
            let eps = noise.draw::<S>(w_mu.shape());
            w_mu.add(&sigma.mul(&eps)?)?
        }
        LayerMode::PosteriorMean => w_mu.clone(),
        LayerMode::FixedPoint => {
            return Err(Error::Mode(
                "sample_weights called in FixedPoint mode".into(),
            ));
        }
    };
    Ok(SampleRecord {
        w,
        mu: w_mu.clone(),
        sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::seed::{init_seed, make_seed_spec, SeedKind};

    fn eye(n: usize) -> Tensor<f64> {
        let mut d = vec![0.0; n * n];
        (0..n).for_each(|i| d[i * n + i] = 1.0);
        Tensor::new(d, &[n, n]).unwrap().detach_param()
    }

    /// Loop decoder: W[i][o][a][b] built by explicit index arithmetic.
    fn loop_decode(spec: &SeedSpec, psi: &[f64], g: &[f64], kk: usize) -> Vec<f64> {
        let mut out = vec![0.0; spec.c_in * spec.c_out * kk];
        for i in 0..spec.c_in {
            for o in 0..spec.c_out {
                // decoded channel index f ∈ c_f, position index p ∈ c_big
                let (f, p) = if spec.c_out >= spec.c_in {
                    (i, o)
                } else {
                    (o, i)
                };
                for t in 0..kk {
                    let mut acc = 0.0;
                    for q in 0..spec.c_pip {
                        acc += g[f * spec.c_pip + q] * psi[(q * spec.c_big + p) * kk + t];
                    }
                    out[(i * spec.c_out + o) * kk + t] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_germination_is_reorientation() {
        let spec = make_seed_spec(4, 4, 3, 1.0).unwrap();
        let seed = init_seed::<f64>(spec, SeedKind::Conv, &mut RngStream::from_seed(1));
        let germ = Germinator {
            g_mu: eye(4),
            g_rho: None,
            rho_offset: None,
        };
        let (w, rho) = germinate(&seed, &germ).unwrap();
        assert!(rho.is_none());
        assert_eq!(w.shape(), &[4, 4, 3, 3]);
        assert_eq!(w.data(), seed.psi.data());
    }

    #[test]
    fn linear_hand_example() {
        let spec = make_seed_spec(3, 1, 1, 1.0).unwrap();
        assert_eq!(
            (spec.c_f, spec.c_big, spec.c_pip, spec.oriented_transpose),
            (1, 3, 1, false)
        );
        let psi = Tensor::<f64>::param(vec![1.0, 2.0, 3.0], &[1, 3]).unwrap();
        let seed = KernelSeed::from_tensor(spec, SeedKind::Linear, psi).unwrap();
        let germ = Germinator {
            g_mu: Tensor::param(vec![2.0], &[1, 1]).unwrap(),
            g_rho: None,
            rho_offset: None,
        };
        let (w, _) = germinate(&seed, &germ).unwrap();
        assert_eq!(w.shape(), &[3, 1]);
        assert_eq!(w.data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn random_germination_matches_loop_oracle() {
        let mut rng = RngStream::from_seed(42);
        for _ in 0..20 {
            let c_in = 1 + rng.below(9);
            let c_out = 1 + rng.below(9);
            let k = 1 + rng.below(3);
            let delta = [0.25, 0.5, 0.75, 1.0][rng.below(4)];
            let spec = make_seed_spec(c_in, c_out, k, delta).unwrap();
            let seed = init_seed::<f64>(spec, SeedKind::Conv, &mut rng);
            let germ = Germinator::<f64>::init(&spec, true, &mut rng);
            let (mu, rho) = germinate(&seed, &germ).unwrap();
            let rho = rho.unwrap();
            assert_eq!(mu.shape(), &[c_in, c_out, k, k]);
            assert_eq!(rho.shape(), &[c_in, c_out, k, k]);
            let want_mu = loop_decode(&spec, seed.psi.data(), germ.g_mu.data(), k * k);
            let off = germ.rho_offset.as_ref().unwrap().item();
            let want_rho = loop_decode(
                &spec,
                seed.psi.data(),
                germ.g_rho.as_ref().unwrap().data(),
                k * k,
            );
            for (a, b) in mu.data().iter().zip(&want_mu) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in rho.data().iter().zip(&want_rho) {
                assert!((a - (b + off)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_germinator_rejected() {
        let spec = make_seed_spec(4, 6, 3, 0.5).unwrap();
        let seed = init_seed::<f64>(spec, SeedKind::Conv, &mut RngStream::from_seed(1));
        let germ = Germinator {
            g_mu: eye(3),
            g_rho: None,
            rho_offset: None,
        };
        assert!(matches!(germinate(&seed, &germ), Err(Error::Dimension(_))));
    }

    #[test]
    fn posterior_mean_is_mu_bitwise() {
        let mut rng = RngStream::from_seed(5);
        let mu = Tensor::<f32>::uniform(&[3, 4], 1.0, &mut rng);
        let rho = Tensor::<f32>::uniform(&[3, 4], 1.0, &mut rng).add_scalar(-3.0);
        let rec = sample_weights(
            &mu,
            &rho,
            LayerMode::PosteriorMean,
            &mut Noise::Gaussian(&mut rng),
        )
        .unwrap();
        assert_eq!(rec.w.data(), mu.data());
        let zero = sample_weights(&mu, &rho, LayerMode::Variational, &mut Noise::Zeros).unwrap();
        assert_eq!(zero.w.data(), mu.data());
        assert!(sample_weights(&mu, &rho, LayerMode::FixedPoint, &mut Noise::Zeros).is_err());
        let bad = Tensor::<f32>::zeros(&[4, 3]);
        assert!(matches!(
            sample_weights(&mu, &bad, LayerMode::Variational, &mut Noise::Zeros),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn vanishing_sigma_pins_weights_to_mu() {
        let mut rng = RngStream::from_seed(6);
        let mu = Tensor::<f32>::uniform(&[50], 1.0, &mut rng);
        let rho = Tensor::<f32>::full(&[50], -50.0);
        let rec = sample_weights(
            &mu,
            &rho,
            LayerMode::Variational,
            &mut Noise::Gaussian(&mut rng),
        )
        .unwrap();
        for (w, m) in rec.w.data().iter().zip(mu.data()) {
            assert!((w - m).abs() < 1e-6);
        }
        assert!(rec.sigma.data().iter().all(|&s| s > 0.0));
    }

    #[test]
    fn sample_statistics_at_rho_zero() {
        let mut rng = RngStream::from_seed(2024);
        let n = 100_000;
        let mu = Tensor::<f64>::zeros(&[n]);
        let rho = Tensor::<f64>::zeros(&[n]);
        let rec = sample_weights(
            &mu,
            &rho,
            LayerMode::Variational,
            &mut Noise::Gaussian(&mut rng),
        )
        .unwrap();
        let ln2 = std::f64::consts::LN_2;
        let d = rec.w.data();
        let mean = d.iter().sum::<f64>() / n as f64;
        let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!(mean.abs() < 3.0 * ln2 / (n as f64).sqrt(), "mean {mean}");
        assert!((std - ln2).abs() < 0.02 * ln2, "std {std}");
    }
}
