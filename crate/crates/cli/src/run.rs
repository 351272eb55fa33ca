//! Training runs, evaluation and sweeps. Every run directory holds exactly
//! `manifest.json`, `epochs.csv`, `report.json`, `reliability.csv` and
//! `checkpoint.ksn`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use ksn_core::bayes::{train_step, StepOptions};
use ksn_core::data::{
    batches, load_cifar, load_idx, synth_dataset, BatchPlan, CifarSplit, CifarVariant, Dataset,
    Normalization, SynthSpec,
};
use ksn_core::metrics::{bins_to_csv, evaluate_with, Bin, MetricsSummary, PredictionSet};
use ksn_core::models::{
    config_param_count, predict, read_checkpoint, save_checkpoint, CheckpointInfo, FactoryMode,
    Inference, Model,
};
use ksn_core::tensor::optim::{Optimizer, OptimizerConfig};
use serde::{Deserialize, Serialize};

use crate::config::{DatasetKind, RunConfig};

pub const MANIFEST: &str = "manifest.json";
pub const EPOCHS: &str = "epochs.csv";
pub const REPORT: &str = "report.json";
pub const RELIABILITY: &str = "reliability.csv";
pub const CHECKPOINT: &str = "checkpoint.ksn";
pub const EPOCHS_HEADER: &str = "epoch,total,log_q,log_prior,nll";

/// Train and held-out splits.
pub struct Splits {
    pub train: Dataset<f32>,
    pub test: Dataset<f32>,
    pub normalization: Option<Normalization>,
}

fn find(root: &Path, name: &str) -> Result<PathBuf> {
    for cand in [name.to_string(), format!("{name}.gz")] {
        let p = root.join(&cand);
        if p.exists() {
            return Ok(p);
        }
    }
    bail!("{name} (or {name}.gz) not found under {}", root.display())
}

fn take_first(ds: Dataset<f32>, n: Option<usize>) -> Result<Dataset<f32>> {
    match n {
        Some(n) if n < ds.len() => {
            let idx: Vec<usize> = (0..n).collect();
            Ok(ds.subset(&idx, ds.split.clone())?)
        }
        _ => Ok(ds),
    }
}

pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let d = &cfg.data;
    let (train, test, normalization) = match d.dataset {
        DatasetKind::Synth => {
            let s = &d.synth;
            let spec = SynthSpec {
                kind: s.kind,
                n: s.train_n,
                classes: s.classes,
                channels: s.channels,
                height: s.size,
                width: s.size,
                noise: s.noise,
                separation: s.separation,
                seed: cfg.seed,
            };
            let train = synth_dataset(&spec)?;
            let mut test = synth_dataset(&SynthSpec {
                n: s.test_n,
                seed: cfg.seed.wrapping_add(1),
                ..spec
            })?;
            test.split = "test".into();
            (train, test, None)
        }
        DatasetKind::Mnist | DatasetKind::Fmnist => {
            let root = d.root.as_deref().context("data.root")?;
            let norm = if d.dataset == DatasetKind::Mnist {
                Normalization::mnist()
            } else {
                Normalization::fmnist()
            };
            let train = load_idx(
                find(root, "train-images-idx3-ubyte")?,
                find(root, "train-labels-idx1-ubyte")?,
                &norm,
                "train",
            )?;
            let test = load_idx(
                find(root, "t10k-images-idx3-ubyte")?,
                find(root, "t10k-labels-idx1-ubyte")?,
                &norm,
                "test",
            )?;
            (train, test, Some(norm))
        }
        DatasetKind::Cifar10 | DatasetKind::Cifar100 => {
            let root = d.root.as_deref().context("data.root")?;
            let v = if d.dataset == DatasetKind::Cifar10 {
                CifarVariant::C10
            } else {
                CifarVariant::C100
            };
            (
                load_cifar(root, v, CifarSplit::Train)?,
                load_cifar(root, v, CifarSplit::Test)?,
                Some(v.normalization()),
            )
        }
    };
    Ok(Splits {
        train: take_first(train, d.train_subset)?,
        test: take_first(test, d.test_subset)?,
        normalization,
    })
}

/// Mean loss terms of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: u64,
    pub total: f64,
    pub log_q: f64,
    pub log_prior: f64,
    pub nll: f64,
}

impl EpochRow {
    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.total, self.log_q, self.log_prior, self.nll
        )
    }
}

pub fn epochs_csv(rows: &[EpochRow]) -> String {
    let mut s = format!("{EPOCHS_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.csv());
    }
    s
}

pub fn parse_epochs_csv(text: &str) -> Result<Vec<EpochRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(EPOCHS_HEADER) {
        bail!("{EPOCHS} has an unexpected header");
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                bail!("{EPOCHS} row `{l}` has {} fields", f.len());
            }
            Ok(EpochRow {
                epoch: f[0].parse()?,
                total: f[1].parse()?,
                log_q: f[2].parse()?,
                log_prior: f[3].parse()?,
                nll: f[4].parse()?,
            })
        })
        .collect()
}

/// Evaluation output written to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub inference: String,
    pub split: String,
    #[serde(flatten)]
    pub summary: MetricsSummary,
    pub ece_bins: usize,
    pub ace_bins: usize,
    pub equal_width: Vec<Bin>,
    pub equal_frequency: Vec<Bin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub params: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
    pub train_examples: usize,
    pub test_examples: usize,
    pub kl_weight: f64,
    pub steps: u64,
    pub epochs: Vec<EpochRow>,
    /// Posterior-mean (or deterministic) metrics on the training split.
    pub train_metrics: MetricsSummary,
    pub report: MetricsSummary,
    pub inference: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resumed_from_epoch: Option<u64>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn read(run_dir: &Path) -> Result<Self> {
        let p = run_dir.join(MANIFEST);
        let text =
            std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
    }
}

/// Class probabilities of `model` on `ds` and their report. `seed` drives the
/// inference-time draws only.
pub fn evaluate_model(
    model: &Model<f32>,
    ds: &Dataset<f32>,
    cfg: &RunConfig,
    inference: Inference,
    seed: u64,
) -> Result<Report> {
    let probs = predict(model, &ds.images, inference, seed, cfg.eval.batch_size)?;
    let preds = PredictionSet::from_tensor(&probs, &ds.labels)?;
    let r = evaluate_with(&preds, cfg.eval.ece_bins, cfg.eval.ace_bins)?;
    Ok(Report {
        inference: inference.label(),
        split: ds.split.clone(),
        summary: r.summary,
        ece_bins: cfg.eval.ece_bins,
        ace_bins: cfg.eval.ace_bins,
        equal_width: r.equal_width,
        equal_frequency: r.equal_frequency,
    })
}

fn train_inference(factory: &FactoryMode) -> Inference {
    if factory.is_variational() {
        Inference::PosteriorMean
    } else {
        Inference::Deterministic
    }
}

fn write_report(dir: &Path, report: &Report) -> Result<()> {
    std::fs::write(
        dir.join(REPORT),
        serde_json::to_string_pretty(report)? + "\n",
    )?;
    std::fs::write(dir.join(RELIABILITY), bins_to_csv(&report.equal_width))?;
    Ok(())
}

/// Trains `cfg` into `out`. With `resume`, continues from the checkpoint and
/// epoch rows already in `out` up to `cfg.train.epochs`.
pub fn train(cfg: &RunConfig, out: &Path, resume: bool) -> Result<RunManifest> {
    cfg.validate()?;
    let started = Instant::now();
    let splits = load_splits(cfg)?;
    let model_cfg = cfg.model_config();
    let (c, h, w) = splits.train.image_shape();
    if (splits.train.num_classes, c, h)
        != (
            model_cfg.num_classes,
            model_cfg.input_channels,
            model_cfg.image_size,
        )
        || h != w
    {
        bail!(
            "dataset shape {c}x{h}x{w} with {} classes does not match the model configuration",
            splits.train.num_classes
        );
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let ckpt_path = out.join(CHECKPOINT);
    let (mut model, mut opt, mut rows, mut step, resumed_from) = if resume {
        let ck = read_checkpoint::<f32>(&ckpt_path)
            .with_context(|| format!("resuming from {}", ckpt_path.display()))?;
        if ck.model.config != model_cfg {
            bail!(
                "checkpoint model {:?} does not match the configuration {:?}",
                ck.model.config,
                model_cfg
            );
        }
        if ck.info.seed != cfg.seed {
            bail!(
                "checkpoint seed {} differs from --seed {}",
                ck.info.seed,
                cfg.seed
            );
        }
        let mut rows = parse_epochs_csv(&std::fs::read_to_string(out.join(EPOCHS))?)?;
        if rows.len() < ck.info.epoch as usize {
            bail!(
                "{EPOCHS} has {} rows but the checkpoint is at epoch {}",
                rows.len(),
                ck.info.epoch
            );
        }
        rows.truncate(ck.info.epoch as usize);
        let opt = ck.optimizer.context("checkpoint has no optimizer state")?;
        (ck.model, opt, rows, ck.info.step, Some(ck.info.epoch))
    } else {
        let model = Model::<f32>::build(model_cfg, cfg.seed)?;
        (
            model,
            Optimizer::new(OptimizerConfig::adam(cfg.train.lr)),
            Vec::new(),
            0,
            None,
        )
    };

    let plan = BatchPlan {
        batch_size: cfg.train.batch_size,
        seed: cfg.seed,
        drop_last: false,
    };
    let n = splits.train.len();
    let kl_weight = cfg.train.kl.weight(plan.batches_per_epoch(n), n);
    let opts = StepOptions {
        prior: cfg.train.prior,
        kl_weight,
        mc_samples: cfg.train.mc_samples,
        layer_mode: None,
    };
    let first = rows.len() as u64;
    for epoch in first..cfg.train.epochs {
        let mut sums = [0.0f64; 4];
        let mut count = 0usize;
        for batch in batches(&splits.train, &plan, epoch)? {
            let (x, y) = batch?;
            let b = train_step(&mut model, &x, &y, &mut opt, &opts, cfg.seed, step)?;
            step += 1;
            for (s, v) in sums.iter_mut().zip([b.total, b.log_q, b.log_prior, b.nll]) {
                *s += v;
            }
            count += 1;
        }
        let m = |i: usize| sums[i] / count.max(1) as f64;
        let row = EpochRow {
            epoch: epoch + 1,
            total: m(0),
            log_q: m(1),
            log_prior: m(2),
            nll: m(3),
        };
        log::info!(
            "epoch {} total {:.6} nll {:.6}",
            row.epoch,
            row.total,
            row.nll
        );
        rows.push(row);
        std::fs::write(out.join(EPOCHS), epochs_csv(&rows))?;
        let info = CheckpointInfo {
            epoch: epoch + 1,
            seed: cfg.seed,
            step,
            meta: serde_json::Value::Null,
        };
        save_checkpoint(&ckpt_path, &model, Some(&opt), &info)?;
    }
    if rows.is_empty() {
        std::fs::write(out.join(EPOCHS), epochs_csv(&rows))?;
        let info = CheckpointInfo {
            seed: cfg.seed,
            ..Default::default()
        };
        save_checkpoint(&ckpt_path, &model, Some(&opt), &info)?;
    }

    let inference = cfg.inference();
    let report = evaluate_model(&model, &splits.test, cfg, inference, cfg.seed)?;
    let train_report = evaluate_model(
        &model,
        &splits.train,
        cfg,
        train_inference(&cfg.model.factory),
        cfg.seed,
    )?;
    write_report(out, &report)?;
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        config: cfg.clone(),
        params: config_param_count(&model_cfg)?,
        normalization: splits.normalization,
        train_examples: n,
        test_examples: splits.test.len(),
        kl_weight,
        steps: step,
        epochs: rows,
        train_metrics: train_report.summary,
        report: report.summary,
        inference: inference.label(),
        resumed_from_epoch: resumed_from,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    std::fs::write(
        out.join(MANIFEST),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}

/// Re-evaluates a finished run. Writes `report.json` and `reliability.csv`
/// into `out` (the run directory when `None`). `seed` replaces the run seed
/// for inference draws; the data splits keep the run's own seed.
pub fn evaluate_run(
    run_dir: &Path,
    inference: Option<Inference>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<Report> {
    let manifest = RunManifest::read(run_dir)?;
    let cfg = manifest.config;
    let model = read_checkpoint::<f32>(&run_dir.join(CHECKPOINT))?.model;
    if model.config != cfg.model_config() {
        bail!("checkpoint model does not match the manifest configuration");
    }
    let splits = load_splits(&cfg)?;
    let inference = inference.unwrap_or_else(|| cfg.inference());
    let report = evaluate_model(
        &model,
        &splits.test,
        &cfg,
        inference,
        seed.unwrap_or(cfg.seed),
    )?;
    let dir = out.unwrap_or(run_dir);
    std::fs::create_dir_all(dir)?;
    write_report(dir, &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    pub params: usize,
    pub accuracy: f64,
}

pub const SWEEP_CSV: &str = "sweep.csv";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("delta,params,accuracy\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.delta, r.params, r.accuracy);
    }
    s
}

/// Trains one run per δ under `out/delta_<δ>` and writes `out/sweep.csv`.
pub fn sweep(cfg: &RunConfig, deltas: &[f64], out: &Path) -> Result<Vec<SweepRow>> {
    if deltas.is_empty() {
        bail!("sweep needs at least one delta");
    }
    let mut rows = Vec::new();
    for &delta in deltas {
        let mut c = cfg.clone();
        c.model.factory = with_delta(c.model.factory, delta)?;
        let m = train(&c, &out.join(format!("delta_{delta}")), false)?;
        rows.push(SweepRow {
            delta,
            params: m.params,
            accuracy: m.report.acc,
        });
    }
    std::fs::write(out.join(SWEEP_CSV), sweep_csv(&rows))?;
    Ok(rows)
}

pub fn with_delta(f: FactoryMode, delta: f64) -> Result<FactoryMode> {
    Ok(match f {
        FactoryMode::Ksn { .. } => FactoryMode::Ksn { delta },
        FactoryMode::Fksn { .. } => FactoryMode::Fksn { delta },
        other => bail!(
            "delta applies to ksn and fksn factories, not {}",
            other.label()
        ),
    })
}
