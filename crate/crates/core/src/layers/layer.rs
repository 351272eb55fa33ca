//! Linear and convolutional layers over the four weight parameterizations.

use serde::{Deserialize, Serialize};

use super::germinate::{germinate, sample_weights, Germinator, LayerMode, Noise, RHO_INIT};
use super::seed::{init_seed, make_seed_spec, KernelSeed, SeedKind, SeedSpec};
use crate::bayes::SampleRecord;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::conv2d;
use crate::{Scalar, Tensor};

/// How a layer's weights are parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamMode {
    /// Point-estimate weights.
    Baseline,
    /// Directly parameterized `(mu, rho)` clone of every weight.
    Bnn,
    /// Seed plus `mu` and `rho` germinators.
    Ksn,
    /// Seed plus `mu` germinator only.
    Fksn,
}

/// Trainable weight count of one layer, bias excluded.
pub fn param_count(spec: &SeedSpec, mode: ParamMode) -> usize {
    let kk = spec.k * spec.k;
    let seed = spec.c_pip * spec.c_big * kk;
    let germ = spec.c_f * spec.c_pip;
    match mode {
        ParamMode::Ksn => seed + 2 * germ + 1,
        ParamMode::Fksn => seed + germ,
        ParamMode::Bnn => 2 * spec.c_in * spec.c_out * kk,
        ParamMode::Baseline => spec.c_in * spec.c_out * kk,
    }
}

/// Weight storage. `Point` and `Gaussian` tensors are kept in the layout the
/// layer consumes directly (`[c_in × c_out]` for linear, `[c_out × c_in × k × k]`
/// for conv); seeded layers germinate `[c_in × c_out (× k × k)]` maps.
#[derive(Debug, Clone)]
pub enum LayerWeights<S: Scalar> {
    Point(Tensor<S>),
    Gaussian {
        mu: Tensor<S>,
        rho: Tensor<S>,
    },
    Seeded {
        seed: KernelSeed<S>,
        germ: Germinator<S>,
    },
}

fn native_shape(spec: &SeedSpec, kind: SeedKind) -> Vec<usize> {
    match kind {
        SeedKind::Linear => vec![spec.c_in, spec.c_out],
        SeedKind::Conv => vec![spec.c_out, spec.c_in, spec.k, spec.k],
    }
}

fn glorot_dense<S: Scalar>(spec: &SeedSpec, kind: SeedKind, rng: &mut RngStream) -> Tensor<S> {
    let kk = (spec.k * spec.k) as f64;
    let a = (6.0 / ((spec.c_in + spec.c_out) as f64 * kk)).sqrt();
    Tensor::uniform(&native_shape(spec, kind), S::c(a), rng).detach_param()
}

impl<S: Scalar> LayerWeights<S> {
    pub fn init(mode: ParamMode, spec: &SeedSpec, kind: SeedKind, rng: &mut RngStream) -> Self {
        match mode {
            ParamMode::Baseline => LayerWeights::Point(glorot_dense(spec, kind, rng)),
            ParamMode::Bnn => LayerWeights::Gaussian {
                mu: glorot_dense(spec, kind, rng),
                rho: Tensor::full(&native_shape(spec, kind), S::c(RHO_INIT)).detach_param(),
            },
            ParamMode::Ksn | ParamMode::Fksn => {
                let seed = init_seed(*spec, kind, rng);
                let germ = Germinator::init(spec, mode == ParamMode::Ksn, rng);
                LayerWeights::Seeded { seed, germ }
            }
        }
    }

    pub fn param_mode(&self) -> ParamMode {
        match self {
            LayerWeights::Point(_) => ParamMode::Baseline,
            LayerWeights::Gaussian { .. } => ParamMode::Bnn,
            LayerWeights::Seeded { germ, .. } if germ.g_rho.is_some() => ParamMode::Ksn,
            LayerWeights::Seeded { .. } => ParamMode::Fksn,
        }
    }

    /// Whether forwards can draw random weights.
    pub fn is_variational(&self) -> bool {
        matches!(self.param_mode(), ParamMode::Bnn | ParamMode::Ksn)
    }

    /// Produces the weights for one forward in the layer's native layout,
    /// plus a sample record when a `(mu, sigma)` pair was sampled.
    fn draw(
        &self,
        kind: SeedKind,
        mode: LayerMode,
        noise: &mut Noise<'_>,
    ) -> Result<(Tensor<S>, Option<SampleRecord<S>>)> {
        let (w, rec) = match self {
            LayerWeights::Point(w) => return Ok((w.clone(), None)),
            LayerWeights::Gaussian { mu, rho } => return draw_pair(mu, Some(rho), mode, noise),
            LayerWeights::Seeded { seed, germ } => {
                let (w_mu, w_rho) = germinate(seed, germ)?;
                draw_pair(&w_mu, w_rho.as_ref(), mode, noise)?
            }
        };
        match kind {
            SeedKind::Linear => Ok((w, rec)),
            SeedKind::Conv => Ok((w.swap_axes01()?, rec)),
        }
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor<S>)> {
        match self {
            LayerWeights::Point(w) => vec![("weight", w)],
            LayerWeights::Gaussian { mu, rho } => vec![("mu", mu), ("rho", rho)],
            LayerWeights::Seeded { seed, germ } => {
                let mut v = vec![("psi", &seed.psi), ("g_mu", &germ.g_mu)];
                if let (Some(g), Some(o)) = (&germ.g_rho, &germ.rho_offset) {
                    v.push(("g_rho", g));
                    v.push(("rho_offset", o));
                }
                v
            }
        }
    }

    pub fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<S>)> {
        match self {
            LayerWeights::Point(w) => vec![("weight", w)],
            LayerWeights::Gaussian { mu, rho } => vec![("mu", mu), ("rho", rho)],
            LayerWeights::Seeded { seed, germ } => {
                let mut v = vec![("psi", &mut seed.psi), ("g_mu", &mut germ.g_mu)];
                if let (Some(g), Some(o)) = (&mut germ.g_rho, &mut germ.rho_offset) {
                    v.push(("g_rho", g));
                    v.push(("rho_offset", o));
                }
                v
            }
        }
    }
}

fn draw_pair<S: Scalar>(
    mu: &Tensor<S>,
    rho: Option<&Tensor<S>>,
    mode: LayerMode,
    noise: &mut Noise<'_>,
) -> Result<(Tensor<S>, Option<SampleRecord<S>>)> {
    match (rho, mode) {
        (None, _) | (Some(_), LayerMode::FixedPoint) => Ok((mu.clone(), None)),
        (Some(rho), _) => {
            let rec = sample_weights(mu, rho, mode, noise)?;
            Ok((rec.w.clone(), Some(rec)))
        }
    }
}

/// Optional additive bias of a linear layer.
#[derive(Debug, Clone)]
pub enum LayerBias<S: Scalar> {
    None,
    Point(Tensor<S>),
    Gaussian { mu: Tensor<S>, rho: Tensor<S> },
}

impl<S: Scalar> LayerBias<S> {
    /// Zero-initialized bias; variational modes get a `(mu, rho = RHO_INIT)` pair.
    pub fn init(mode: ParamMode, c_out: usize) -> Self {
        let zeros = || Tensor::zeros(&[c_out]).detach_param();
        match mode {
            ParamMode::Bnn | ParamMode::Ksn => LayerBias::Gaussian {
                mu: zeros(),
                rho: Tensor::full(&[c_out], S::c(RHO_INIT)).detach_param(),
            },
            ParamMode::Baseline | ParamMode::Fksn => LayerBias::Point(zeros()),
        }
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor<S>)> {
        match self {
            LayerBias::None => vec![],
            LayerBias::Point(b) => vec![("bias", b)],
            LayerBias::Gaussian { mu, rho } => vec![("bias_mu", mu), ("bias_rho", rho)],
        }
    }

    pub fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<S>)> {
        match self {
            LayerBias::None => vec![],
            LayerBias::Point(b) => vec![("bias", b)],
            LayerBias::Gaussian { mu, rho } => vec![("bias_mu", mu), ("bias_rho", rho)],
        }
    }

    fn draw(
        &self,
        mode: LayerMode,
        noise: &mut Noise<'_>,
    ) -> Result<Option<(Tensor<S>, Option<SampleRecord<S>>)>> {
        match self {
            LayerBias::None => Ok(None),
            LayerBias::Point(b) => Ok(Some((b.clone(), None))),
            LayerBias::Gaussian { mu, rho } => draw_pair(mu, Some(rho), mode, noise).map(Some),
        }
    }
}

/// Output of a layer forward: activations plus the sample records drawn.
pub struct LayerOutput<S: Scalar> {
    pub y: Tensor<S>,
    pub records: Vec<SampleRecord<S>>,
}

fn total_numel<S: Scalar>(params: &[(&'static str, &Tensor<S>)]) -> usize {
    params.iter().map(|(_, t)| t.numel()).sum()
}

/// Fully connected layer, `y = x · w + b` with `w: [c_in × c_out]`.
#[derive(Debug, Clone)]
pub struct Linear<S: Scalar> {
    pub spec: SeedSpec,
    pub weights: LayerWeights<S>,
    pub bias: LayerBias<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        mode: ParamMode,
        delta: f64,
        bias: bool,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let spec = make_seed_spec(c_in, c_out, 1, delta)?;
        let weights = LayerWeights::init(mode, &spec, SeedKind::Linear, rng);
        let bias = if bias {
            LayerBias::init(mode, c_out)
        } else {
            LayerBias::None
        };
        Ok(Self {
            spec,
            weights,
            bias,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor<S>,
        mode: LayerMode,
        noise: &mut Noise<'_>,
    ) -> Result<LayerOutput<S>> {
        if x.shape().len() != 2 || x.shape()[1] != self.spec.c_in {
            return Err(Error::Dimension(format!(
                "linear layer expects [N × {}], got {:?}",
                self.spec.c_in,
                x.shape()
            )));
        }
        let (w, rec) = self.weights.draw(SeedKind::Linear, mode, noise)?;
        let mut records: Vec<_> = rec.into_iter().collect();
        let mut y = x.matmul(&w)?;
        if let Some((b, rec)) = self.bias.draw(mode, noise)? {
            y = y.add_row_bias(&b)?;
            records.extend(rec);
        }
        Ok(LayerOutput { y, records })
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor<S>)> {
        let mut v = self.weights.named_params();
        v.extend(self.bias.named_params());
        v
    }

    pub fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<S>)> {
        let mut v = self.weights.named_params_mut();
        v.extend(self.bias.named_params_mut());
        v
    }

    pub fn num_params(&self) -> usize {
        total_numel(&self.named_params())
    }
}

/// Bias-free 2-D convolution.
#[derive(Debug, Clone)]
pub struct Conv2d<S: Scalar> {
    pub spec: SeedSpec,
    pub stride: usize,
    pub padding: usize,
    pub weights: LayerWeights<S>,
}

impl<S: Scalar> Conv2d<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        mode: ParamMode,
        delta: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let spec = make_seed_spec(c_in, c_out, k, delta)?;
        let weights = LayerWeights::init(mode, &spec, SeedKind::Conv, rng);
        Ok(Self {
            spec,
            stride,
            padding,
            weights,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor<S>,
        mode: LayerMode,
        noise: &mut Noise<'_>,
    ) -> Result<LayerOutput<S>> {
        let (kernel, rec) = self.weights.draw(SeedKind::Conv, mode, noise)?;
        let y = conv2d(x, &kernel, self.stride, self.padding)?;
        Ok(LayerOutput {
            y,
            records: rec.into_iter().collect(),
        })
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor<S>)> {
        self.weights.named_params()
    }

    pub fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<S>)> {
        self.weights.named_params_mut()
    }

    pub fn num_params(&self) -> usize {
        total_numel(&self.named_params())
    }
}
