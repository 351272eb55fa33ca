use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ksn_core::models::{
    config_param_count, param_table, relative_size, Architecture, FactoryMode, ModelConfig,
};

use crate::config::{parse_inference, DatasetKind, KlPolicy, RunConfig};
use crate::run::{self, with_delta};

#[derive(Debug, Parser)]
#[command(
    name = "ksn",
    version,
    about = "Train and evaluate kernel seed networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-layer parameter table, total and size relative to the point-estimate model.
    Params(ParamsArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Re-evaluate a finished run.
    Eval(EvalArgs),
    /// Train one run per delta and write accuracy against parameter count.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Baseline,
    BaselineDropout,
    McDrop,
    Bnn,
    Ksn,
    Fksn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ArchArg {
    Resnet18,
    SmallCnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetArg {
    Synth,
    Mnist,
    Fmnist,
    Cifar10,
    Cifar100,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KlArg {
    PerMinibatch,
    PerExample,
    Fixed,
}

/// Settings shared by the commands that build a configuration.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// TOML config, or a run's manifest.json to repeat that run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub arch: Option<ArchArg>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Seed compression factor for ksn / fksn.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Dropout rate for baseline-dropout / mc-drop.
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetArg>,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub train_subset: Option<usize>,
    #[arg(long)]
    pub test_subset: Option<usize>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub kl_policy: Option<KlArg>,
    /// Weight for `--kl-policy fixed`.
    #[arg(long)]
    pub kl_weight: Option<f64>,
    #[arg(long)]
    pub mc_samples: Option<usize>,
    /// deterministic | posterior_mean | ensemble:S | mcdrop:S
    #[arg(long)]
    pub inference: Option<String>,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Number of classes; taken from the dataset section otherwise.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub input_channels: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Comma-separated deltas: print one total per delta instead of the layer table.
    #[arg(long, value_delimiter = ',')]
    pub deltas: Vec<f64>,
    /// Write the table as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue the run in `--out` from its checkpoint.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub inference: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for report.json and reliability.csv; defaults to the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long, value_delimiter = ',', required = true)]
    pub deltas: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

fn factory_for(mode: ModeArg, delta: Option<f64>, rate: Option<f64>) -> FactoryMode {
    let delta = delta.unwrap_or(0.5);
    let rate = rate.unwrap_or(0.1);
    match mode {
        ModeArg::Baseline => FactoryMode::Baseline,
        ModeArg::BaselineDropout => FactoryMode::BaselineDropout { rate },
        ModeArg::McDrop => FactoryMode::McDrop { rate },
        ModeArg::Bnn => FactoryMode::Bnn,
        ModeArg::Ksn => FactoryMode::Ksn { delta },
        ModeArg::Fksn => FactoryMode::Fksn { delta },
    }
}

impl Overrides {
    /// The config file (or defaults) with every given flag applied.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(a) = self.arch {
            cfg.model.architecture = match a {
                ArchArg::Resnet18 => Architecture::ResNet18,
                ArchArg::SmallCnn => Architecture::SmallCnn,
            };
        }
        match self.mode {
            Some(m) => cfg.model.factory = factory_for(m, self.delta, self.rate),
            None => {
                if let Some(d) = self.delta {
                    cfg.model.factory = with_delta(cfg.model.factory, d)?;
                }
                if let Some(r) = self.rate {
                    cfg.model.factory = match cfg.model.factory {
                        FactoryMode::BaselineDropout { .. } => {
                            FactoryMode::BaselineDropout { rate: r }
                        }
                        FactoryMode::McDrop { .. } => FactoryMode::McDrop { rate: r },
                        f => bail!("--rate applies to dropout factories, not {}", f.label()),
                    };
                }
            }
        }
        if let Some(d) = self.dataset {
            cfg.data.dataset = match d {
                DatasetArg::Synth => DatasetKind::Synth,
                DatasetArg::Mnist => DatasetKind::Mnist,
                DatasetArg::Fmnist => DatasetKind::Fmnist,
                DatasetArg::Cifar10 => DatasetKind::Cifar10,
                DatasetArg::Cifar100 => DatasetKind::Cifar100,
            };
        }
        if let Some(r) = &self.data_root {
            cfg.data.root = Some(r.clone());
        }
        if self.train_subset.is_some() {
            cfg.data.train_subset = self.train_subset;
        }
        if self.test_subset.is_some() {
            cfg.data.test_subset = self.test_subset;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
        }
        if let Some(lr) = self.lr {
            cfg.train.lr = lr;
        }
        match (self.kl_policy, self.kl_weight) {
            (Some(KlArg::PerMinibatch), None) => cfg.train.kl = KlPolicy::PerMinibatch,
            (Some(KlArg::PerExample), None) => cfg.train.kl = KlPolicy::PerExample,
            (Some(KlArg::Fixed) | None, Some(value)) => cfg.train.kl = KlPolicy::Fixed { value },
            (Some(KlArg::Fixed), None) => bail!("--kl-policy fixed needs --kl-weight"),
            (Some(_), Some(_)) => bail!("--kl-weight only applies to --kl-policy fixed"),
            (None, None) => {}
        }
        if let Some(m) = self.mc_samples {
            cfg.train.mc_samples = m;
        }
        if let Some(i) = &self.inference {
            cfg.eval.inference = Some(parse_inference(i)?);
        }
        Ok(cfg)
    }
}

/// Parameter table for a resolved model configuration, as CSV.
pub fn params_csv(cfg: &ModelConfig) -> Result<String> {
    let rows = param_table(cfg)?;
    let mut s = String::from("name,kind,mode,c_in,c_out,k,params\n");
    for r in &rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.name, r.kind, r.mode, r.c_in, r.c_out, r.k, r.params
        );
    }
    let total: usize = rows.iter().map(|r| r.params).sum();
    let _ = writeln!(s, "total,,,,,,{total}");
    Ok(s)
}

/// `delta,params,rs` rows for a ksn/fksn configuration.
pub fn params_sweep_csv(cfg: &ModelConfig, deltas: &[f64]) -> Result<String> {
    let mut s = String::from("delta,params,rs\n");
    for &d in deltas {
        let c = ModelConfig {
            factory: with_delta(cfg.factory, d)?,
            ..*cfg
        };
        let _ = writeln!(s, "{d},{},{}", config_param_count(&c)?, relative_size(&c)?);
    }
    Ok(s)
}

fn params_model_config(args: &ParamsArgs) -> Result<ModelConfig> {
    let cfg = args.overrides.resolve()?;
    let mut m = cfg.model_config();
    // Without a config file the command describes the CIFAR-style ResNet head.
    if args.overrides.config.is_none() && args.overrides.dataset.is_none() {
        m.num_classes = 10;
        m.input_channels = 3;
        m.image_size = 32;
    }
    if let Some(c) = args.classes {
        m.num_classes = c;
    }
    if let Some(c) = args.input_channels {
        m.input_channels = c;
    }
    if let Some(s) = args.image_size {
        m.image_size = s;
    }
    m.validate().context("model")?;
    Ok(m)
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Runs one command, returning what it prints on stdout.
pub fn execute(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Params(args) => {
            let m = params_model_config(&args)?;
            let csv = if args.deltas.is_empty() {
                params_csv(&m)?
            } else {
                params_sweep_csv(&m, &args.deltas)?
            };
            if let Some(out) = &args.out {
                write_out(out, &csv)?;
            }
            let mut text = csv;
            if args.deltas.is_empty() {
                let _ = writeln!(text, "rs,{:.4}", relative_size(&m)?);
            }
            Ok(text)
        }
        Command::Train(args) => {
            let cfg = if args.resume && args.overrides.config.is_none() {
                let mut o = args.overrides;
                o.config = Some(args.out.join(run::MANIFEST));
                o.resolve()?
            } else {
                args.overrides.resolve()?
            };
            let m = run::train(&cfg, &args.out, args.resume)?;
            Ok(format!(
                "{} epochs, test {} acc {:.4} nll {:.4} ece {:.4}, train acc {:.4}\n",
                m.epochs.len(),
                m.inference,
                m.report.acc,
                m.report.nll,
                m.report.ece,
                m.train_metrics.acc
            ))
        }
        Command::Eval(args) => {
            let inference = args.inference.as_deref().map(parse_inference).transpose()?;
            let r = run::evaluate_run(&args.run, inference, args.seed, args.out.as_deref())?;
            Ok(serde_json::to_string_pretty(&r.summary)? + "\n")
        }
        Command::Sweep(args) => {
            let cfg = args.overrides.resolve()?;
            let rows = run::sweep(&cfg, &args.deltas, &args.out)?;
            Ok(run::sweep_csv(&rows))
        }
    }
}
