//! Inference protocols.

use serde::{Deserialize, Serialize};

use super::net::{ForwardCtx, Model};
use super::FactoryMode;
use crate::error::{Error, Result};
use crate::layers::{LayerMode, Noise};
use crate::rng::{RngStream, Site};
use crate::tensor::no_grad;
use crate::{Scalar, Tensor};

/// How predictive probabilities are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Inference {
    /// Mean weights, no dropout.
    Deterministic,
    /// `eps = 0` in every variational layer.
    PosteriorMean,
    /// Average of softmax outputs over independent weight draws.
    Ensemble { samples: usize },
    /// Average over dropout masks kept active at inference.
    McDrop { samples: usize },
}

impl Inference {
    pub fn label(&self) -> String {
        match self {
            Inference::Deterministic => "deterministic".into(),
            Inference::PosteriorMean => "posterior_mean".into(),
            Inference::Ensemble { samples } => format!("ensemble({samples})"),
            Inference::McDrop { samples } => format!("mcdrop({samples})"),
        }
    }
}

fn softmax_rows<S: Scalar>(logits: &Tensor<S>) -> Result<Vec<S>> {
    Ok(logits.softmax()?.to_vec())
}

fn require_variational<S: Scalar>(model: &Model<S>) -> Result<()> {
    if !model.config.factory.is_variational() {
        return Err(Error::Mode(format!(
            "{} model has no variational layers",
            model.config.factory.label()
        )));
    }
    Ok(())
}

/// Softmax of a single forward with `eps = 0` everywhere.
pub fn predict_posterior_mean<S: Scalar>(model: &Model<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    require_variational(model)?;
    no_grad(|| {
        model
            .forward(x, &mut ForwardCtx::posterior_mean())?
            .0
            .softmax()
    })
}

/// Logits of one forward with dropout active at `rate`, whatever the phase.
pub fn mc_dropout_forward<S: Scalar>(
    model: &Model<S>,
    x: &Tensor<S>,
    rate: f64,
    rng: &mut RngStream,
) -> Result<Tensor<S>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    let mut ctx = ForwardCtx {
        dropout_rate: rate,
        dropout_rng: Some(rng),
        ..ForwardCtx::deterministic()
    };
    Ok(model.forward(x, &mut ctx)?.0)
}

/// Mean of softmax outputs over one member per stream. Variational models
/// draw weights from the stream; MC-Drop models draw dropout masks from it.
pub fn predict_ensemble_streams<S: Scalar>(
    model: &Model<S>,
    x: &Tensor<S>,
    streams: &mut [RngStream],
) -> Result<Tensor<S>> {
    if streams.is_empty() {
        return Err(Error::Parameter(
            "ensemble needs at least one member".into(),
        ));
    }
    let mc_rate = match model.config.factory {
        FactoryMode::McDrop { rate } => Some(rate),
        _ if model.config.factory.is_variational() => None,
        f => {
            return Err(Error::Mode(format!(
                "ensemble inference needs a variational or MC-Drop model, got {}",
                f.label()
            )))
        }
    };
    no_grad(|| {
        let mut acc: Option<Vec<f64>> = None;
        let mut shape = vec![];
        for rng in streams.iter_mut() {
            let logits = match mc_rate {
                Some(rate) => mc_dropout_forward(model, x, rate, rng)?,
                None => {
                    let mut ctx = ForwardCtx {
                        mode: LayerMode::Variational,
                        noise: Noise::Gaussian(rng),
                        ..ForwardCtx::deterministic()
                    };
                    model.forward(x, &mut ctx)?.0
                }
            };
            shape = logits.shape().to_vec();
            let p = softmax_rows(&logits)?;
            match &mut acc {
                None => acc = Some(p.iter().map(|v| v.f64()).collect()),
                Some(a) => a.iter_mut().zip(&p).for_each(|(a, v)| *a += v.f64()),
            }
        }
        let inv = 1.0 / streams.len() as f64;
        let mean = acc
            .expect("non-empty")
            .into_iter()
            .map(|v| S::c(v * inv))
            .collect();
        Tensor::new(mean, &shape)
    })
}

/// Ensemble prediction with member `s` drawing from the stream `(seed, Eval, s)`.
pub fn predict_ensemble<S: Scalar>(
    model: &Model<S>,
    x: &Tensor<S>,
    samples: usize,
    seed: u64,
) -> Result<Tensor<S>> {
    let mut streams = member_streams(seed, samples, 0, false);
    predict_ensemble_streams(model, x, &mut streams)
}

/// Weight draws depend only on the member index, so every chunk of a large
/// input sees the same ensemble of networks. Dropout masks are per example
/// and take fresh streams for every chunk after the first.
fn member_streams(seed: u64, samples: usize, chunk: u64, per_chunk: bool) -> Vec<RngStream> {
    (0..samples as u64)
        .map(|s| {
            let step = if chunk == 0 || !per_chunk {
                s
            } else {
                (1 << 63) | (s << 32) | chunk
            };
            RngStream::new(seed, Site::Eval, step)
        })
        .collect()
}

/// Class probabilities `[N × C]` for `x`, evaluated in chunks of `batch_size`.
pub fn predict<S: Scalar>(
    model: &Model<S>,
    x: &Tensor<S>,
    inference: Inference,
    seed: u64,
    batch_size: usize,
) -> Result<Tensor<S>> {
    let s = x.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::Dimension(format!(
            "predict expects [N × C × H × W], got {s:?}"
        )));
    }
    let (n, per) = (s[0], s[1] * s[2] * s[3]);
    let bs = batch_size.max(1);
    if let Inference::McDrop { .. } = inference {
        if !matches!(model.config.factory, FactoryMode::McDrop { .. }) {
            return Err(Error::Mode(format!(
                "mcdrop inference needs an MC-Drop model, got {}",
                model.config.factory.label()
            )));
        }
    }
    let mut out = Vec::with_capacity(n * model.config.num_classes);
    for (c, start) in (0..n).step_by(bs).enumerate() {
        let end = (start + bs).min(n);
        let mut shape = s.clone();
        shape[0] = end - start;
        let chunk = Tensor::new(x.data()[start * per..end * per].to_vec(), &shape)?;
        let probs = match inference {
            Inference::Deterministic => no_grad(|| {
                model
                    .forward(&chunk, &mut ForwardCtx::deterministic())?
                    .0
                    .softmax()
            })?,
            Inference::PosteriorMean => predict_posterior_mean(model, &chunk)?,
            Inference::Ensemble { samples } | Inference::McDrop { samples } => {
                let per_chunk = matches!(model.config.factory, FactoryMode::McDrop { .. });
                let mut streams = member_streams(seed, samples, c as u64, per_chunk);
                predict_ensemble_streams(model, &chunk, &mut streams)?
            }
        };
        out.extend_from_slice(probs.data());
    }
    Tensor::new(out, &[n, model.config.num_classes])
}
