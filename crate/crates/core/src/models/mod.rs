//! Network assembly, parameter accounting, inference and checkpoints.

mod checkpoint;
mod net;
mod predict;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{make_seed_spec, param_count, ParamMode};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint, CheckpointInfo,
    CHECKPOINT_VERSION,
};
pub use net::{ForwardCtx, LayerRow, Model};
pub use predict::{
    mc_dropout_forward, predict, predict_ensemble, predict_ensemble_streams,
    predict_posterior_mean, Inference,
};

/// Layer factory selecting the weight parameterization of every conv and
/// linear layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FactoryMode {
    Baseline,
    /// Point weights with dropout during training only.
    BaselineDropout {
        rate: f64,
    },
    /// Point weights with dropout kept on at inference.
    McDrop {
        rate: f64,
    },
    Bnn,
    Ksn {
        delta: f64,
    },
    Fksn {
        delta: f64,
    },
}

impl FactoryMode {
    pub fn param_mode(&self) -> ParamMode {
        match self {
            FactoryMode::Baseline
            | FactoryMode::BaselineDropout { .. }
            | FactoryMode::McDrop { .. } => ParamMode::Baseline,
            FactoryMode::Bnn => ParamMode::Bnn,
            FactoryMode::Ksn { .. } => ParamMode::Ksn,
            FactoryMode::Fksn { .. } => ParamMode::Fksn,
        }
    }

    /// Seed compression factor; 1 for unseeded modes.
    pub fn delta(&self) -> f64 {
        match *self {
            FactoryMode::Ksn { delta } | FactoryMode::Fksn { delta } => delta,
            _ => 1.0,
        }
    }

    pub fn dropout_rate(&self) -> f64 {
        match *self {
            FactoryMode::BaselineDropout { rate } | FactoryMode::McDrop { rate } => rate,
            _ => 0.0,
        }
    }

    pub fn is_variational(&self) -> bool {
        matches!(self, FactoryMode::Bnn | FactoryMode::Ksn { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            FactoryMode::Ksn { delta } | FactoryMode::Fksn { delta }
                if !(delta > 0.0 && delta <= 1.0) =>
            {
                Err(Error::Config(format!(
                    "factory.delta = {delta} outside (0, 1]"
                )))
            }
            FactoryMode::BaselineDropout { rate } | FactoryMode::McDrop { rate }
                if !(0.0..1.0).contains(&rate) =>
            {
                Err(Error::Config(format!(
                    "factory.rate = {rate} outside [0, 1)"
                )))
            }
            _ => Ok(()),
        }
    }

    /// Short label, e.g. `ksn(0.5)`.
    pub fn label(&self) -> String {
        match *self {
            FactoryMode::Baseline => "baseline".into(),
            FactoryMode::BaselineDropout { rate } => format!("baseline_dropout({rate})"),
            FactoryMode::McDrop { rate } => format!("mc_drop({rate})"),
            FactoryMode::Bnn => "bnn".into(),
            FactoryMode::Ksn { delta } => format!("ksn({delta})"),
            FactoryMode::Fksn { delta } => format!("fksn({delta})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    #[serde(rename = "resnet18")]
    ResNet18,
    SmallCnn,
}

/// Everything needed to rebuild a network's shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub num_classes: usize,
    pub input_channels: usize,
    /// Square input side length; only the SmallCNN head depends on it.
    pub image_size: usize,
    pub factory: FactoryMode,
}

impl ModelConfig {
    pub fn resnet18(num_classes: usize, input_channels: usize, factory: FactoryMode) -> Self {
        Self {
            architecture: Architecture::ResNet18,
            num_classes,
            input_channels,
            image_size: 32,
            factory,
        }
    }

    pub fn small_cnn(
        num_classes: usize,
        input_channels: usize,
        image_size: usize,
        factory: FactoryMode,
    ) -> Self {
        Self {
            architecture: Architecture::SmallCnn,
            num_classes,
            input_channels,
            image_size,
            factory,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes = {} must be >= 2",
                self.num_classes
            )));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be >= 1".into()));
        }
        let min_size = match self.architecture {
            Architecture::SmallCnn => 4,
            Architecture::ResNet18 => 1,
        };
        if self.image_size < min_size {
            return Err(Error::Config(format!(
                "image_size = {} too small for {:?} (minimum {min_size})",
                self.image_size, self.architecture
            )));
        }
        self.factory.validate()
    }

    /// Same architecture with the plain point-estimate factory.
    pub fn baseline(&self) -> Self {
        Self {
            factory: FactoryMode::Baseline,
            ..*self
        }
    }
}

/// Shape-only description of one trainable layer.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum PlanKind {
    Conv {
        k: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        bias: bool,
    },
    BatchNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct PlanEntry {
    pub name: String,
    pub kind: PlanKind,
    pub c_in: usize,
    pub c_out: usize,
}

/// Trainable layers of an architecture, in forward order.
pub(crate) fn layer_plan(cfg: &ModelConfig) -> Vec<PlanEntry> {
    let conv = |name: String, c_in, c_out, k, stride, padding| PlanEntry {
        name,
        kind: PlanKind::Conv { k, stride, padding },
        c_in,
        c_out,
    };
    let bn = |name: String, c| PlanEntry {
        name,
        kind: PlanKind::BatchNorm,
        c_in: c,
        c_out: c,
    };
    let mut plan = Vec::new();
    match cfg.architecture {
        Architecture::ResNet18 => {
            plan.push(conv("stem.conv".into(), cfg.input_channels, 64, 3, 1, 1));
            plan.push(bn("stem.bn".into(), 64));
            let mut c_in = 64;
            for (i, &c) in [64, 128, 256, 512].iter().enumerate() {
                for j in 0..2 {
                    let stride = if i > 0 && j == 0 { 2 } else { 1 };
                    let p = format!("stage{}.block{}", i + 1, j + 1);
                    plan.push(conv(format!("{p}.conv1"), c_in, c, 3, stride, 1));
                    plan.push(bn(format!("{p}.bn1"), c));
                    plan.push(conv(format!("{p}.conv2"), c, c, 3, 1, 1));
                    plan.push(bn(format!("{p}.bn2"), c));
                    if stride != 1 || c_in != c {
                        plan.push(conv(format!("{p}.shortcut.conv"), c_in, c, 1, stride, 0));
                        plan.push(bn(format!("{p}.shortcut.bn"), c));
                    }
                    c_in = c;
                }
            }
            plan.push(PlanEntry {
                name: "fc".into(),
                kind: PlanKind::Linear { bias: true },
                c_in: 512,
                c_out: cfg.num_classes,
            });
        }
        Architecture::SmallCnn => {
            plan.push(conv("conv1".into(), cfg.input_channels, 32, 3, 1, 1));
            plan.push(conv("conv2".into(), 32, 64, 3, 1, 1));
            let side = cfg.image_size / 4;
            plan.push(PlanEntry {
                name: "fc".into(),
                kind: PlanKind::Linear { bias: true },
                c_in: 64 * side * side,
                c_out: cfg.num_classes,
            });
        }
    }
    plan
}

/// Trainable parameter count of one plan entry under `cfg`'s factory.
pub(crate) fn plan_entry_params(entry: &PlanEntry, factory: &FactoryMode) -> Result<usize> {
    let mode = factory.param_mode();
    Ok(match entry.kind {
        PlanKind::BatchNorm => 2 * entry.c_out,
        PlanKind::Conv { k, .. } => param_count(
            &make_seed_spec(entry.c_in, entry.c_out, k, factory.delta())?,
            mode,
        ),
        PlanKind::Linear { bias } => {
            let w = param_count(
                &make_seed_spec(entry.c_in, entry.c_out, 1, factory.delta())?,
                mode,
            );
            let b = match (bias, mode) {
                (false, _) => 0,
                (true, ParamMode::Bnn | ParamMode::Ksn) => 2 * entry.c_out,
                (true, _) => entry.c_out,
            };
            w + b
        }
    })
}

/// Parameter total of a configuration, computed from shapes alone.
pub fn config_param_count(cfg: &ModelConfig) -> Result<usize> {
    cfg.validate()?;
    layer_plan(cfg)
        .iter()
        .map(|e| plan_entry_params(e, &cfg.factory))
        .sum()
}

/// Per-layer parameter rows of a configuration without allocating weights.
pub fn param_table(cfg: &ModelConfig) -> Result<Vec<LayerRow>> {
    cfg.validate()?;
    let mode = format!("{:?}", cfg.factory.param_mode()).to_lowercase();
    layer_plan(cfg)
        .iter()
        .map(|e| {
            let (kind, mode, k) = match e.kind {
                PlanKind::Conv { k, .. } => ("conv", mode.clone(), k),
                PlanKind::Linear { .. } => ("linear", mode.clone(), 1),
                PlanKind::BatchNorm => ("batch_norm", "deterministic".to_string(), 1),
            };
            Ok(LayerRow {
                name: e.name.clone(),
                kind,
                mode,
                c_in: e.c_in,
                c_out: e.c_out,
                k,
                params: plan_entry_params(e, &cfg.factory)?,
            })
        })
        .collect()
}

/// `RS`: parameter total relative to the point-estimate model of the same
/// architecture, class count and input shape.
pub fn relative_size(cfg: &ModelConfig) -> Result<f64> {
    Ok(config_param_count(cfg)? as f64 / config_param_count(&cfg.baseline())? as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resnet_baseline_total_is_standard() {
        let cfg = ModelConfig::resnet18(10, 3, FactoryMode::Baseline);
        assert_eq!(config_param_count(&cfg).unwrap(), 11_173_962);
    }

    #[test]
    fn shape_table_matches_built_model() {
        for f in [
            FactoryMode::Baseline,
            FactoryMode::Bnn,
            FactoryMode::Ksn { delta: 0.5 },
            FactoryMode::Fksn { delta: 0.25 },
        ] {
            let cfg = ModelConfig::small_cnn(10, 1, 28, f);
            let (total, rows) = Model::<f32>::build(cfg, 0).unwrap().count_params();
            assert_eq!(param_table(&cfg).unwrap(), rows);
            assert_eq!(config_param_count(&cfg).unwrap(), total);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = ModelConfig::small_cnn(1, 1, 28, FactoryMode::Baseline);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.num_classes = 10;
        cfg.factory = FactoryMode::Ksn { delta: 1.5 };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.factory = FactoryMode::McDrop { rate: 1.0 };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.factory = FactoryMode::McDrop { rate: 0.1 };
        cfg.image_size = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn factory_mode_serde_round_trip() {
        for f in [
            FactoryMode::Baseline,
            FactoryMode::BaselineDropout { rate: 0.1 },
            FactoryMode::McDrop { rate: 0.1 },
            FactoryMode::Bnn,
            FactoryMode::Ksn { delta: 0.5 },
            FactoryMode::Fksn { delta: 0.25 },
        ] {
            let s = serde_json::to_string(&f).unwrap();
            assert_eq!(serde_json::from_str::<FactoryMode>(&s).unwrap(), f);
        }
    }
}
