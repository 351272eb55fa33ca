//! Accuracy, NLL and calibration errors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Scalar, Tensor};

/// Lower clamp on the true-class probability inside the NLL.
pub const NLL_FLOOR: f64 = 1e-12;
/// Tolerance on row sums of a probability matrix.
pub const SIMPLEX_TOL: f64 = 1e-4;
pub const DEFAULT_BINS: usize = 15;

/// Predicted class probabilities `[N × C]` with true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    probs: Vec<f64>,
    num_classes: usize,
    labels: Vec<usize>,
}

impl PredictionSet {
    pub fn new(probs: Vec<f64>, num_classes: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data("empty prediction set".into()));
        }
        if num_classes == 0 || probs.len() != labels.len() * num_classes {
            return Err(Error::Data(format!(
                "{} probabilities for {} labels and {num_classes} classes",
                probs.len(),
                labels.len()
            )));
        }
        for (i, row) in probs.chunks(num_classes).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !p.is_finite() || *p < -SIMPLEX_TOL)
                || (sum - 1.0).abs() > SIMPLEX_TOL
            {
                return Err(Error::Data(format!(
                    "row {i} is not on the simplex: {row:?}"
                )));
            }
            if labels[i] >= num_classes {
                return Err(Error::Data(format!(
                    "label {} at row {i} outside [0, {num_classes})",
                    labels[i]
                )));
            }
        }
        Ok(Self {
            probs,
            num_classes,
            labels,
        })
    }

    pub fn from_tensor<S: Scalar>(probs: &Tensor<S>, labels: &[usize]) -> Result<Self> {
        let s = probs.shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!(
                "probabilities must be [N × C], got {s:?}"
            )));
        }
        Self::new(
            probs.data().iter().map(|v| v.f64()).collect(),
            s[1],
            labels.to_vec(),
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.num_classes..(i + 1) * self.num_classes]
    }

    /// Argmax class of each row; ties go to the lowest index.
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.len())
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (c, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    /// `(confidence, correct)` per row.
    pub fn confidences(&self) -> Vec<(f64, bool)> {
        self.predictions()
            .into_iter()
            .enumerate()
            .map(|(i, c)| (self.row(i)[c], c == self.labels[i]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinScheme {
    EqualWidth,
    EqualFrequency,
}

/// One reliability-diagram bin. Empty bins report zero confidence and accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub conf: f64,
    pub acc: f64,
}

impl Bin {
    pub fn gap(&self) -> f64 {
        (self.acc - self.conf).abs()
    }
}

/// Index of the equal-width bin `(b/B, (b+1)/B]` holding `conf`; confidences
/// at or below zero land in the first bin.
pub fn width_bin(conf: f64, bins: usize) -> usize {
    let edge = |b: usize| b as f64 / bins as f64;
    let mut b = ((conf * bins as f64).ceil() as isize - 1).clamp(0, bins as isize - 1) as usize;
    while b > 0 && conf <= edge(b) {
        b -= 1;
    }
    while b + 1 < bins && conf > edge(b + 1) {
        b += 1;
    }
    b
}

fn summarize(items: &[(f64, bool)], lo: f64, hi: f64) -> Bin {
    let n = items.len();
    let (conf, acc) = if n == 0 {
        (0.0, 0.0)
    } else {
        let c: f64 = items.iter().map(|x| x.0).sum();
        let a = items.iter().filter(|x| x.1).count() as f64;
        (c / n as f64, a / n as f64)
    };
    Bin {
        lo,
        hi,
        count: n,
        conf,
        acc,
    }
}

fn bins_of(items: &[(f64, bool)], bins: usize, scheme: BinScheme) -> Result<Vec<Bin>> {
    if bins < 1 {
        return Err(Error::Parameter("bins must be >= 1".into()));
    }
    Ok(match scheme {
        BinScheme::EqualWidth => {
            let mut groups: Vec<Vec<(f64, bool)>> = vec![Vec::new(); bins];
            for &it in items {
                groups[width_bin(it.0, bins)].push(it);
            }
            groups
                .iter()
                .enumerate()
                .map(|(b, g)| summarize(g, b as f64 / bins as f64, (b + 1) as f64 / bins as f64))
                .collect()
        }
        BinScheme::EqualFrequency => {
            let mut sorted = items.to_vec();
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let (q, r) = (sorted.len() / bins, sorted.len() % bins);
            let mut start = 0;
            (0..bins)
                .map(|b| {
                    let g = &sorted[start..start + q + usize::from(b < r)];
                    start += g.len();
                    match (g.first(), g.last()) {
                        (Some(f), Some(l)) => summarize(g, f.0, l.0),
                        _ => summarize(g, f64::NAN, f64::NAN),
                    }
                })
                .collect()
        }
    })
}

/// Reliability table of `preds` under `scheme`. Equal-frequency bins are
/// contiguous runs of the confidence-sorted predictions, the first `N mod B`
/// one longer than the rest; their `lo`/`hi` are the extreme confidences
/// inside (NaN when empty).
pub fn reliability_data(preds: &PredictionSet, bins: usize, scheme: BinScheme) -> Result<Vec<Bin>> {
    bins_of(&preds.confidences(), bins, scheme)
}

/// Writes a reliability table as CSV.
pub fn bins_to_csv(bins: &[Bin]) -> String {
    let mut s = String::from("bin_lo,bin_hi,count,conf,acc\n");
    for b in bins {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            b.lo, b.hi, b.count, b.conf, b.acc
        ));
    }
    s
}

/// Flat summary of an evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub n: usize,
    pub acc: f64,
    pub nll: f64,
    pub ece: f64,
    pub ace: f64,
    pub mce: f64,
}

impl MetricsSummary {
    pub const CSV_HEADER: &'static str = "n,acc,nll,ece,ace,mce";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.n, self.acc, self.nll, self.ece, self.ace, self.mce
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    #[serde(flatten)]
    pub summary: MetricsSummary,
    pub equal_width: Vec<Bin>,
    pub equal_frequency: Vec<Bin>,
}

/// Evaluates with `ece_bins` equal-width bins for ECE/MCE and
/// [`DEFAULT_BINS`] equal-frequency bins for ACE.
pub fn evaluate(preds: &PredictionSet, ece_bins: usize) -> Result<CalibrationReport> {
    evaluate_with(preds, ece_bins, DEFAULT_BINS)
}

pub fn evaluate_with(
    preds: &PredictionSet,
    ece_bins: usize,
    ace_bins: usize,
) -> Result<CalibrationReport> {
    let items = preds.confidences();
    let n = items.len() as f64;
    let acc = items.iter().filter(|x| x.1).count() as f64 / n;
    let nll = (0..preds.len())
        .map(|i| -preds.row(i)[preds.labels[i]].max(NLL_FLOOR).ln())
        .sum::<f64>()
        / n;
    let equal_width = bins_of(&items, ece_bins, BinScheme::EqualWidth)?;
    let equal_frequency = bins_of(&items, ace_bins, BinScheme::EqualFrequency)?;
    let ece = equal_width
        .iter()
        .map(|b| b.count as f64 / n * b.gap())
        .sum();
    let mce = equal_width
        .iter()
        .filter(|b| b.count > 0)
        .map(Bin::gap)
        .fold(0.0, f64::max);
    let filled: Vec<&Bin> = equal_frequency.iter().filter(|b| b.count > 0).collect();
    let ace = filled.iter().map(|b| b.gap()).sum::<f64>() / filled.len() as f64;
    Ok(CalibrationReport {
        summary: MetricsSummary {
            n: preds.len(),
            acc,
            nll,
            ece,
            ace,
            mce,
        },
        equal_width,
        equal_frequency,
    })
}
