//! Run configuration: TOML file, manifest echo and command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ksn_core::bayes::ScaleMixturePrior;
use ksn_core::data::SynthKind;
use ksn_core::models::{Architecture, FactoryMode, Inference, ModelConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub architecture: Architecture,
    pub factory: FactoryMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            architecture: Architecture::SmallCnn,
            factory: FactoryMode::Ksn { delta: 0.5 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synth,
    Mnist,
    Fmnist,
    Cifar10,
    Cifar100,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dataset: DatasetKind,
    /// Directory holding the dataset files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Keep only the first `n` training examples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_subset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_subset: Option<usize>,
    #[serde(default)]
    pub synth: SynthSection,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Synth,
            root: None,
            train_subset: None,
            test_subset: None,
            synth: SynthSection::default(),
        }
    }
}

impl DataSection {
    /// `(classes, channels, side)` of the configured images.
    pub fn shape(&self) -> (usize, usize, usize) {
        match self.dataset {
            DatasetKind::Synth => (self.synth.classes, self.synth.channels, self.synth.size),
            DatasetKind::Mnist | DatasetKind::Fmnist => (10, 1, 28),
            DatasetKind::Cifar10 => (10, 3, 32),
            DatasetKind::Cifar100 => (100, 3, 32),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub kind: SynthKind,
    pub train_n: usize,
    pub test_n: usize,
    pub classes: usize,
    pub channels: usize,
    pub size: usize,
    pub noise: f64,
    pub separation: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            kind: SynthKind::GaussianBlobs,
            train_n: 4000,
            test_n: 500,
            classes: 10,
            channels: 1,
            size: 28,
            noise: 1.0,
            separation: 8.0,
        }
    }
}

/// How the KL term is scaled against the mean cross-entropy of a minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum KlPolicy {
    /// `1 / M` with `M` minibatches per epoch.
    PerMinibatch,
    /// `1 / N` with `N` training examples.
    PerExample,
    Fixed {
        value: f64,
    },
}

impl KlPolicy {
    pub fn weight(&self, minibatches: usize, examples: usize) -> f64 {
        match *self {
            KlPolicy::PerMinibatch => 1.0 / minibatches.max(1) as f64,
            KlPolicy::PerExample => 1.0 / examples.max(1) as f64,
            KlPolicy::Fixed { value } => value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub kl: KlPolicy,
    pub mc_samples: usize,
    pub prior: ScaleMixturePrior,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 64,
            lr: 1e-3,
            kl: KlPolicy::PerExample,
            mc_samples: 1,
            prior: ScaleMixturePrior::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Defaults by factory: ensemble(10) for variational models, mcdrop(10)
    /// for MC-Drop, deterministic otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inference: Option<Inference>,
    pub batch_size: usize,
    pub ece_bins: usize,
    pub ace_bins: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            inference: None,
            batch_size: 256,
            ece_bins: 15,
            ace_bins: 15,
        }
    }
}

pub fn default_inference(factory: &FactoryMode) -> Inference {
    match factory {
        FactoryMode::McDrop { .. } => Inference::McDrop { samples: 10 },
        f if f.is_variational() => Inference::Ensemble { samples: 10 },
        _ => Inference::Deterministic,
    }
}

/// Parses `deterministic`, `posterior_mean`, `ensemble:S` or `mcdrop:S`
/// (also `ensemble(S)`).
pub fn parse_inference(s: &str) -> Result<Inference> {
    let s = s.trim().to_ascii_lowercase().replace('-', "_");
    let (name, arg) = match s.split_once([':', '(']) {
        Some((n, a)) => (n.to_string(), Some(a.trim_end_matches(')').to_string())),
        None => (s.clone(), None),
    };
    let samples = |a: Option<String>| -> Result<usize> {
        let n: usize = a
            .unwrap_or_else(|| "10".into())
            .parse()
            .with_context(|| format!("sample count in `{s}`"))?;
        if n == 0 {
            bail!("inference `{s}` needs at least one sample");
        }
        Ok(n)
    };
    Ok(match name.as_str() {
        "deterministic" => Inference::Deterministic,
        "posterior_mean" | "p" => Inference::PosteriorMean,
        "ensemble" | "e" => Inference::Ensemble {
            samples: samples(arg)?,
        },
        "mcdrop" | "mc_drop" => Inference::McDrop {
            samples: samples(arg)?,
        },
        _ => bail!(
            "unknown inference `{s}` (deterministic | posterior_mean | ensemble:S | mcdrop:S)"
        ),
    })
}

impl RunConfig {
    /// Reads a TOML config, or the `config` entry of a run manifest when the
    /// file ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            let v: serde_json::Value = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
            let c = v.get("config").cloned().unwrap_or(v);
            serde_json::from_value(c).with_context(|| format!("config in {}", path.display()))?
        } else {
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        };
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn model_config(&self) -> ModelConfig {
        let (classes, channels, size) = self.data.shape();
        ModelConfig {
            architecture: self.model.architecture,
            num_classes: classes,
            input_channels: channels,
            image_size: size,
            factory: self.model.factory,
        }
    }

    pub fn inference(&self) -> Inference {
        self.eval
            .inference
            .unwrap_or_else(|| default_inference(&self.model.factory))
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate().context("model")?;
        let t = &self.train;
        if t.batch_size == 0 {
            bail!("train.batch_size must be >= 1");
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            bail!("train.lr = {} must be positive", t.lr);
        }
        if t.mc_samples == 0 {
            bail!("train.mc_samples must be >= 1");
        }
        if let KlPolicy::Fixed { value } = t.kl {
            if !(value >= 0.0 && value.is_finite()) {
                bail!("train.kl.value = {value} must be finite and >= 0");
            }
        }
        t.prior.validate().context("train.prior")?;
        let e = &self.eval;
        if e.batch_size == 0 || e.ece_bins == 0 || e.ace_bins == 0 {
            bail!("eval.batch_size, eval.ece_bins and eval.ace_bins must be >= 1");
        }
        match self.inference() {
            Inference::Ensemble { samples: 0 } | Inference::McDrop { samples: 0 } => {
                bail!("eval.inference needs at least one sample")
            }
            _ => {}
        }
        let s = &self.data.synth;
        if self.data.dataset == DatasetKind::Synth && (s.train_n == 0 || s.test_n == 0) {
            bail!("data.synth.train_n and data.synth.test_n must be >= 1");
        }
        if self.data.dataset != DatasetKind::Synth && self.data.root.is_none() {
            bail!("data.root is required for dataset {:?}", self.data.dataset);
        }
        if self.data.train_subset == Some(0) || self.data.test_subset == Some(0) {
            bail!("data.train_subset and data.test_subset must be >= 1 when set");
        }
        Ok(())
    }
}
