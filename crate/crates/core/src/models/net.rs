use serde::Serialize;

use super::{layer_plan, ModelConfig, PlanKind};
use crate::bayes::SampleRecord;
use crate::error::{Error, Result};
use crate::layers::{Conv2d, LayerMode, Linear, Noise};
use crate::rng::{RngStream, Site};
use crate::tensor::optim::Optimizer;
use crate::tensor::{batch_norm, dropout, BatchNormStats};
use crate::{Scalar, Tensor};

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

/// Deterministic batch-norm affine pair plus running statistics.
#[derive(Debug, Clone)]
pub(crate) struct BatchNorm<S: Scalar> {
    gamma: Tensor<S>,
    beta: Tensor<S>,
    stats: BatchNormStats<S>,
}

impl<S: Scalar> BatchNorm<S> {
    fn new(c: usize) -> Self {
        Self {
            gamma: Tensor::full(&[c], S::one()).detach_param(),
            beta: Tensor::zeros(&[c]).detach_param(),
            stats: BatchNormStats::new(c),
        }
    }

    fn forward(&self, x: &Tensor<S>, train: bool) -> Result<Tensor<S>> {
        batch_norm(
            x,
            &self.gamma,
            &self.beta,
            &self.stats,
            train,
            S::c(BN_MOMENTUM),
            S::c(BN_EPS),
        )
    }
}

#[derive(Debug, Clone)]
enum Unit<S: Scalar> {
    Conv(Conv2d<S>),
    Linear(Linear<S>),
    Bn(BatchNorm<S>),
}

impl<S: Scalar> Unit<S> {
    fn named_params(&self) -> Vec<(&'static str, &Tensor<S>)> {
        match self {
            Unit::Conv(c) => c.named_params(),
            Unit::Linear(l) => l.named_params(),
            Unit::Bn(b) => vec![("gamma", &b.gamma), ("beta", &b.beta)],
        }
    }

    fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<S>)> {
        match self {
            Unit::Conv(c) => c.named_params_mut(),
            Unit::Linear(l) => l.named_params_mut(),
            Unit::Bn(b) => vec![("gamma", &mut b.gamma), ("beta", &mut b.beta)],
        }
    }
}

/// One row of the per-layer parameter table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerRow {
    pub name: String,
    pub kind: &'static str,
    /// Weight parameterization tag, or `deterministic` for batch-norm.
    pub mode: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub params: usize,
}

/// Per-forward settings and randomness.
pub struct ForwardCtx<'a> {
    pub mode: LayerMode,
    /// Batch statistics in batch-norm (and running-stat updates).
    pub train: bool,
    /// Active dropout rate; 0 disables dropout.
    pub dropout_rate: f64,
    pub noise: Noise<'a>,
    pub dropout_rng: Option<&'a mut RngStream>,
}

impl<'a> ForwardCtx<'a> {
    /// Mean weights, running statistics, no dropout.
    pub fn deterministic() -> Self {
        Self {
            mode: LayerMode::FixedPoint,
            train: false,
            dropout_rate: 0.0,
            noise: Noise::Zeros,
            dropout_rng: None,
        }
    }

    pub fn posterior_mean() -> Self {
        Self {
            mode: LayerMode::PosteriorMean,
            ..Self::deterministic()
        }
    }

    /// Training forward for `cfg`: sampled weights for variational models,
    /// the factory's dropout rate, batch statistics.
    pub fn training(
        cfg: &ModelConfig,
        weight_rng: &'a mut RngStream,
        dropout_rng: &'a mut RngStream,
    ) -> Self {
        Self {
            mode: if cfg.factory.is_variational() {
                LayerMode::Variational
            } else {
                LayerMode::FixedPoint
            },
            train: true,
            dropout_rate: cfg.factory.dropout_rate(),
            noise: Noise::Gaussian(weight_rng),
            dropout_rng: Some(dropout_rng),
        }
    }

    fn apply_dropout<S: Scalar>(&mut self, x: Tensor<S>) -> Result<Tensor<S>> {
        if self.dropout_rate == 0.0 {
            return Ok(x);
        }
        let rng = self.dropout_rng.as_deref_mut().ok_or_else(|| {
            Error::Contract("dropout is active but no dropout stream was given".into())
        })?;
        dropout(&x, self.dropout_rate, true, rng)
    }
}

/// A built network. Layers are stored in forward order under stable names.
#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    units: Vec<(String, Unit<S>)>,
}

impl<S: Scalar> Model<S> {
    /// Builds and initializes every layer. Layer `i` draws its initial
    /// values from the stream `(seed, Init, i)`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mode = config.factory.param_mode();
        let delta = config.factory.delta();
        let mut units = Vec::new();
        for (i, e) in layer_plan(&config).into_iter().enumerate() {
            let mut rng = RngStream::new(seed, Site::Init, i as u64);
            let unit = match e.kind {
                PlanKind::Conv { k, stride, padding } => Unit::Conv(Conv2d::new(
                    e.c_in, e.c_out, k, stride, padding, mode, delta, &mut rng,
                )?),
                PlanKind::Linear { bias } => {
                    Unit::Linear(Linear::new(e.c_in, e.c_out, mode, delta, bias, &mut rng)?)
                }
                PlanKind::BatchNorm => Unit::Bn(BatchNorm::new(e.c_out)),
            };
            units.push((e.name, unit));
        }
        Ok(Self { config, units })
    }

    /// Logits `[N × num_classes]` plus the sample records of every
    /// variational layer.
    pub fn forward(
        &self,
        x: &Tensor<S>,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<(Tensor<S>, Vec<SampleRecord<S>>)> {
        let s = x.shape();
        let c = self.config.input_channels;
        if s.len() != 4 || s[1] != c {
            return Err(Error::Dimension(format!(
                "model expects [N × {c} × H × W] input, got {s:?}"
            )));
        }
        let mut records = Vec::new();
        let mut cursor = 0;
        let logits = match self.config.architecture {
            super::Architecture::ResNet18 => {
                self.resnet_forward(x, ctx, &mut cursor, &mut records)?
            }
            super::Architecture::SmallCnn => {
                self.small_forward(x, ctx, &mut cursor, &mut records)?
            }
        };
        debug_assert_eq!(cursor, self.units.len());
        Ok((logits, records))
    }

    fn apply(
        &self,
        cursor: &mut usize,
        x: &Tensor<S>,
        ctx: &mut ForwardCtx<'_>,
        records: &mut Vec<SampleRecord<S>>,
    ) -> Result<Tensor<S>> {
        let (_, unit) = &self.units[*cursor];
        *cursor += 1;
        let out = match unit {
            Unit::Conv(c) => c.forward(x, ctx.mode, &mut ctx.noise)?,
            Unit::Linear(l) => l.forward(x, ctx.mode, &mut ctx.noise)?,
            Unit::Bn(b) => return b.forward(x, ctx.train),
        };
        records.extend(out.records);
        Ok(out.y)
    }

    fn next_is(&self, cursor: usize, suffix: &str) -> bool {
        self.units
            .get(cursor)
            .is_some_and(|(n, _)| n.ends_with(suffix))
    }

    fn resnet_forward(
        &self,
        x: &Tensor<S>,
        ctx: &mut ForwardCtx<'_>,
        cursor: &mut usize,
        records: &mut Vec<SampleRecord<S>>,
    ) -> Result<Tensor<S>> {
        let h = self.apply(cursor, x, ctx, records)?;
        let mut h = self.apply(cursor, &h, ctx, records)?.relu();
        while self.next_is(*cursor, ".conv1") {
            let y = self.apply(cursor, &h, ctx, records)?;
            let y = self.apply(cursor, &y, ctx, records)?.relu();
            let y = self.apply(cursor, &y, ctx, records)?;
            let y = self.apply(cursor, &y, ctx, records)?;
            let skip = if self.next_is(*cursor, "shortcut.conv") {
                let s = self.apply(cursor, &h, ctx, records)?;
                self.apply(cursor, &s, ctx, records)?
            } else {
                h.clone()
            };
            h = y.add(&skip)?.relu();
        }
        let pooled = ctx.apply_dropout(h.global_avg_pool()?)?;
        self.apply(cursor, &pooled, ctx, records)
    }

    fn small_forward(
        &self,
        x: &Tensor<S>,
        ctx: &mut ForwardCtx<'_>,
        cursor: &mut usize,
        records: &mut Vec<SampleRecord<S>>,
    ) -> Result<Tensor<S>> {
        let h = self.apply(cursor, x, ctx, records)?.relu().max_pool2x2()?;
        let h = ctx.apply_dropout(h)?;
        let h = self.apply(cursor, &h, ctx, records)?.relu().max_pool2x2()?;
        let h = ctx.apply_dropout(h)?.flatten_batch()?;
        self.apply(cursor, &h, ctx, records)
    }

    /// Every trainable tensor as `layer.param`.
    pub fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        self.units
            .iter()
            .flat_map(|(n, u)| {
                u.named_params()
                    .into_iter()
                    .map(move |(p, t)| (format!("{n}.{p}"), t))
            })
            .collect()
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        self.units
            .iter_mut()
            .flat_map(|(n, u)| {
                let n = n.clone();
                u.named_params_mut()
                    .into_iter()
                    .map(move |(p, t)| (format!("{n}.{p}"), t))
            })
            .collect()
    }

    /// Batch-norm running statistics by layer name.
    pub fn bn_stats(&self) -> Vec<(String, &BatchNormStats<S>)> {
        self.units
            .iter()
            .filter_map(|(n, u)| match u {
                Unit::Bn(b) => Some((n.clone(), &b.stats)),
                _ => None,
            })
            .collect()
    }

    /// One optimizer update over every trainable tensor that received a
    /// gradient. Tensors outside this step's graph (the `rho` path under
    /// fixed-point or posterior-mean forwards) are left untouched, as is
    /// their optimizer state.
    pub fn apply_optimizer(&mut self, opt: &mut Optimizer<S>) -> Result<()> {
        let mut params = self.named_params_mut();
        params.retain(|(_, t)| t.grad().is_some());
        if params.is_empty() {
            return Err(Error::Contract("no parameter received a gradient".into()));
        }
        opt.step(params.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)))
    }

    pub fn zero_grads(&self) {
        self.named_params().iter().for_each(|(_, t)| t.zero_grad());
    }

    /// Total trainable elements and the per-layer table.
    pub fn count_params(&self) -> (usize, Vec<LayerRow>) {
        let rows: Vec<LayerRow> = self
            .units
            .iter()
            .map(|(name, u)| {
                let params = u.named_params().iter().map(|(_, t)| t.numel()).sum();
                let (kind, mode, c_in, c_out, k) = match u {
                    Unit::Conv(c) => (
                        "conv",
                        format!("{:?}", c.weights.param_mode()),
                        c.spec.c_in,
                        c.spec.c_out,
                        c.spec.k,
                    ),
                    Unit::Linear(l) => (
                        "linear",
                        format!("{:?}", l.weights.param_mode()),
                        l.spec.c_in,
                        l.spec.c_out,
                        1,
                    ),
                    Unit::Bn(b) => (
                        "batch_norm",
                        "deterministic".into(),
                        b.gamma.numel(),
                        b.gamma.numel(),
                        1,
                    ),
                };
                LayerRow {
                    name: name.clone(),
                    kind,
                    mode: mode.to_lowercase(),
                    c_in,
                    c_out,
                    k,
                    params,
                }
            })
            .collect();
        (rows.iter().map(|r| r.params).sum(), rows)
    }

    /// Number of layers whose forward draws random weights.
    pub fn variational_layers(&self) -> usize {
        self.units
            .iter()
            .filter(|(_, u)| match u {
                Unit::Conv(c) => c.weights.is_variational(),
                Unit::Linear(l) => l.weights.is_variational(),
                Unit::Bn(_) => false,
            })
            .count()
    }
}
