//! Kernel seeds and their shape algebra.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::{Scalar, Tensor};

/// Derived channel dimensions of a seeded layer.
///
/// `c_f = min(c_in, c_out)`, `c_big = max(c_in, c_out)` and
/// `c_pip = max(1, round_half_up(delta · c_f))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedSpec {
    pub c_in: usize,
    pub c_out: usize,
    /// Kernel extent; 1 for linear layers.
    pub k: usize,
    pub delta: f64,
    pub c_f: usize,
    pub c_big: usize,
    pub c_pip: usize,
    /// True when `c_big == c_out` (ties included): the decoded `[c_f × c_big]`
    /// map is already `[c_in × c_out]` and is used as is. Otherwise the first
    /// two axes are swapped.
    pub oriented_transpose: bool,
}

/// Builds a [`SeedSpec`]; `delta` must lie in `(0, 1]`.
pub fn make_seed_spec(c_in: usize, c_out: usize, k: usize, delta: f64) -> Result<SeedSpec> {
    if c_in == 0 || c_out == 0 || k == 0 {
        return Err(Error::Parameter(format!(
            "seed dimensions must be >= 1, got c_in={c_in} c_out={c_out} k={k}"
        )));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::Parameter(format!("delta {delta} outside (0, 1]")));
    }
    let c_f = c_in.min(c_out);
    let c_big = c_in.max(c_out);
    let c_pip = ((delta * c_f as f64 + 0.5).floor() as usize).clamp(1, c_f);
    Ok(SeedSpec {
        c_in,
        c_out,
        k,
        delta,
        c_f,
        c_big,
        c_pip,
        oriented_transpose: c_big == c_out,
    })
}

/// Whether a seed feeds a linear or a convolutional layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedKind {
    Linear,
    Conv,
}

impl SeedSpec {
    /// Shape of `psi`: `[c_pip × c_big]` or `[c_pip × c_big × k × k]`.
    pub fn psi_shape(&self, kind: SeedKind) -> Vec<usize> {
        match kind {
            SeedKind::Linear => vec![self.c_pip, self.c_big],
            SeedKind::Conv => vec![self.c_pip, self.c_big, self.k, self.k],
        }
    }

    /// Shape of a germinated weight map: `[c_in × c_out (× k × k)]`.
    pub fn weight_shape(&self, kind: SeedKind) -> Vec<usize> {
        match kind {
            SeedKind::Linear => vec![self.c_in, self.c_out],
            SeedKind::Conv => vec![self.c_in, self.c_out, self.k, self.k],
        }
    }

    /// Half-width of the Glorot uniform range for the seed tensor, with fans
    /// read off its own `[c_pip × c_big × k × k]` shape: `c_big·k²` in,
    /// `c_pip·k²` out.
    pub fn glorot_bound(&self) -> f64 {
        let kk = (self.k * self.k) as f64;
        let (fan_in, fan_out) = (self.c_big as f64 * kk, self.c_pip as f64 * kk);
        (6.0 / (fan_in + fan_out)).sqrt()
    }
}

/// Compressed latent tensor `psi` of one layer.
#[derive(Debug, Clone)]
pub struct KernelSeed<S: Scalar> {
    pub spec: SeedSpec,
    pub kind: SeedKind,
    pub psi: Tensor<S>,
}

/// Glorot-uniform seed initialization.
pub fn init_seed<S: Scalar>(spec: SeedSpec, kind: SeedKind, rng: &mut RngStream) -> KernelSeed<S> {
    let a = S::c(spec.glorot_bound());
    let psi = Tensor::uniform(&spec.psi_shape(kind), a, rng).detach_param();
    KernelSeed { spec, kind, psi }
}

impl<S: Scalar> KernelSeed<S> {
    /// Wraps an existing tensor, checking its shape against `spec`.
    pub fn from_tensor(spec: SeedSpec, kind: SeedKind, psi: Tensor<S>) -> Result<Self> {
        if psi.shape() != spec.psi_shape(kind) {
            return Err(Error::Dimension(format!(
                "seed tensor {:?} does not match spec shape {:?}",
                psi.shape(),
                spec.psi_shape(kind)
            )));
        }
        Ok(Self { spec, kind, psi })
    }
}
