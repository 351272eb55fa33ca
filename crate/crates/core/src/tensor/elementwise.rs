use std::sync::Arc;

use super::Tensor;
use crate::error::{dim_err, Result};
use crate::Scalar;

fn same_shape<S: Scalar>(op: &str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

/// Numerically stable `log(1 + exp(x))`, floored at the smallest positive
/// normal so the result stays strictly positive where `exp(x)` underflows.
#[inline]
pub(crate) fn softplus_scalar<S: Scalar>(x: S) -> S {
    (x.max(S::zero()) + (-x.abs()).exp().ln_1p()).max(S::min_positive_value())
}

#[inline]
pub(crate) fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("add", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            "add",
            self.shape().to_vec(),
            data,
            &[self, other],
            |g| vec![Some(g.to_vec()), Some(g.to_vec())],
        ))
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("sub", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            data,
            &[self, other],
            |g| vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())],
        ))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("mul", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let (a, b) = (self.data_arc(), other.data_arc());
        Ok(Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            &[self, other],
            move |g| {
                let ga = g.iter().zip(b.iter()).map(|(&g, &b)| g * b).collect();
                let gb = g.iter().zip(a.iter()).map(|(&g, &a)| g * a).collect();
                vec![Some(ga), Some(gb)]
            },
        ))
    }

    pub fn scale(&self, s: S) -> Tensor<S> {
        let data = self.data().iter().map(|&a| a * s).collect();
        Tensor::from_op("scale", self.shape().to_vec(), data, &[self], move |g| {
            vec![Some(g.iter().map(|&v| v * s).collect())]
        })
    }

    pub fn add_scalar(&self, s: S) -> Tensor<S> {
        let data = self.data().iter().map(|&a| a + s).collect();
        Tensor::from_op("add_scalar", self.shape().to_vec(), data, &[self], |g| {
            vec![Some(g.to_vec())]
        })
    }

    /// Adds a one-element tensor to every entry (learnable offsets).
    pub fn add_broadcast_scalar(&self, s: &Tensor<S>) -> Result<Tensor<S>> {
        if s.numel() != 1 {
            return dim_err(format!(
                "add_broadcast_scalar: expected one element, got {:?}",
                s.shape()
            ));
        }
        let v = s.item();
        let data = self.data().iter().map(|&a| a + v).collect();
        Ok(Tensor::from_op(
            "add_broadcast_scalar",
            self.shape().to_vec(),
            data,
            &[self, s],
            |g| vec![Some(g.to_vec()), Some(vec![g.iter().copied().sum()])],
        ))
    }

    /// `x[N×C] + b[C]` broadcast over rows.
    pub fn add_row_bias(&self, bias: &Tensor<S>) -> Result<Tensor<S>> {
        if self.shape().len() != 2 || bias.numel() != self.shape()[1] {
            return dim_err(format!(
                "add_row_bias: input {:?} incompatible with bias {:?}",
                self.shape(),
                bias.shape()
            ));
        }
        let c = self.shape()[1];
        let b = bias.data();
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[i % c])
            .collect();
        Ok(Tensor::from_op(
            "add_row_bias",
            self.shape().to_vec(),
            data,
            &[self, bias],
            move |g| {
                let mut gb = vec![S::zero(); c];
                for row in g.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                }
                vec![Some(g.to_vec()), Some(gb)]
            },
        ))
    }

    pub fn sum(&self) -> Tensor<S> {
        let total: S = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op("sum", vec![1], vec![total], &[self], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor<S> {
        let n = self.numel();
        self.sum().scale(S::one() / S::c(n as f64))
    }

    pub fn relu(&self) -> Tensor<S> {
        let x = self.data_arc();
        let data = x.iter().map(|&v| v.max(S::zero())).collect();
        Tensor::from_op("relu", self.shape().to_vec(), data, &[self], move |g| {
            let gx = g
                .iter()
                .zip(x.iter())
                .map(|(&g, &v)| if v > S::zero() { g } else { S::zero() })
                .collect();
            vec![Some(gx)]
        })
    }

    /// Elementwise `log(1 + exp(x))`, strictly positive for finite input.
    pub fn softplus(&self) -> Tensor<S> {
        let x = self.data_arc();
        let data = x.iter().map(|&v| softplus_scalar(v)).collect();
        Tensor::from_op("softplus", self.shape().to_vec(), data, &[self], move |g| {
            vec![Some(
                g.iter()
                    .zip(x.iter())
                    .map(|(&g, &v)| g * sigmoid_scalar(v))
                    .collect(),
            )]
        })
    }

    /// `max(x, lo)`; gradient passes only where `x > lo`.
    pub fn clamp_min(&self, lo: S) -> Tensor<S> {
        let x = self.data_arc();
        let data = x.iter().map(|&v| v.max(lo)).collect();
        Tensor::from_op(
            "clamp_min",
            self.shape().to_vec(),
            data,
            &[self],
            move |g| {
                let gx = g
                    .iter()
                    .zip(x.iter())
                    .map(|(&g, &v)| if v >= lo { g } else { S::zero() })
                    .collect();
                vec![Some(gx)]
            },
        )
    }

    pub fn exp(&self) -> Tensor<S> {
        let out: Arc<Vec<S>> = Arc::new(self.data().iter().map(|v| v.exp()).collect());
        let y = Arc::clone(&out);
        Tensor::from_op_shared("exp", self.shape().to_vec(), out, &[self], move |g| {
            vec![Some(g.iter().zip(y.iter()).map(|(&g, &y)| g * y).collect())]
        })
    }

    /// Natural log.
    pub fn ln(&self) -> Tensor<S> {
        let x = self.data_arc();
        let data = x.iter().map(|v| v.ln()).collect();
        Tensor::from_op("ln", self.shape().to_vec(), data, &[self], move |g| {
            vec![Some(g.iter().zip(x.iter()).map(|(&g, &v)| g / v).collect())]
        })
    }

    /// Same data, new shape. Shares storage with `self`.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.contains(&0) {
            return dim_err(format!(
                "reshape: cannot view {:?} as {shape:?}",
                self.shape()
            ));
        }
        Ok(Tensor::from_op_shared(
            "reshape",
            shape.to_vec(),
            self.data_arc(),
            &[self],
            |g| vec![Some(g.to_vec())],
        ))
    }

    /// Flattens all but the first axis.
    pub fn flatten_batch(&self) -> Result<Tensor<S>> {
        let n = self.shape()[0];
        self.reshape(&[n, self.numel() / n])
    }
}
