use super::Tensor;
use crate::error::{dim_err, Result};
use crate::scalar::gemm;
use crate::Scalar;

impl<S: Scalar> Tensor<S> {
    /// Matrix product `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return dim_err(format!("matmul: cannot multiply {a:?} by {b:?}"));
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![S::zero(); m * n];
        gemm(
            false,
            false,
            m,
            n,
            k,
            S::one(),
            self.data(),
            other.data(),
            S::zero(),
            &mut out,
        );
        let (ad, bd) = (self.data_arc(), other.data_arc());
        let (ta, tb) = (self.requires_grad(), other.requires_grad());
        Ok(Tensor::from_op(
            "matmul",
            vec![m, n],
            out,
            &[self, other],
            move |g| {
                // dA = G · Bᵀ, dB = Aᵀ · G
                let ga = ta.then(|| {
                    let mut ga = vec![S::zero(); m * k];
                    gemm(false, true, m, k, n, S::one(), g, &bd, S::zero(), &mut ga);
                    ga
                });
                let gb = tb.then(|| {
                    let mut gb = vec![S::zero(); k * n];
                    gemm(true, false, k, n, m, S::one(), &ad, g, S::zero(), &mut gb);
                    gb
                });
                vec![ga, gb]
            },
        ))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose2d(&self) -> Result<Tensor<S>> {
        if self.shape().len() != 2 {
            return dim_err(format!("transpose2d: expected 2-D, got {:?}", self.shape()));
        }
        self.swap_axes01()
    }

    /// Swaps the first two axes, keeping any trailing axes contiguous:
    /// `[a×b×rest] → [b×a×rest]`.
    pub fn swap_axes01(&self) -> Result<Tensor<S>> {
        let shape = self.shape();
        if shape.len() < 2 {
            return dim_err(format!("swap_axes01: need at least 2 axes, got {shape:?}"));
        }
        let (a, b) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape.swap(0, 1);
        let out = permute01(self.data(), a, b, inner);
        Ok(Tensor::from_op(
            "swap_axes01",
            out_shape,
            out,
            &[self],
            move |g| vec![Some(permute01(g, b, a, inner))],
        ))
    }
}

/// `[a×b×inner] → [b×a×inner]`.
fn permute01<S: Scalar>(src: &[S], a: usize, b: usize, inner: usize) -> Vec<S> {
    let mut out = vec![S::zero(); src.len()];
    for i in 0..a {
        for j in 0..b {
            let s = (i * b + j) * inner;
            let d = (j * a + i) * inner;
            out[d..d + inner].copy_from_slice(&src[s..s + inner]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients;
    use crate::RngStream;

    #[test]
    fn identity_times_a_is_a() {
        let eye =
            Tensor::<f32>::new(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]).unwrap();
        let a = Tensor::<f32>::uniform(&[3, 3], 5.0, &mut RngStream::from_seed(1));
        assert_eq!(eye.matmul(&a).unwrap().data(), a.data());
    }

    #[test]
    fn hand_product() {
        let a = Tensor::<f32>::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::<f32>::new(vec![1.0, 1.0], &[2, 1]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(
            msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2,
            "{msg}"
        );
    }

    #[test]
    fn matmul_gradient_f32_within_1e_3() {
        let mut rng = RngStream::from_seed(5);
        let a = Tensor::<f32>::uniform(&[5, 4], 1.0, &mut rng).detach_param();
        let b = Tensor::<f32>::uniform(&[4, 3], 1.0, &mut rng).detach_param();
        let w = Tensor::<f32>::uniform(&[5, 3], 1.0, &mut rng);
        let r = check_gradients(&[a, b], 0.5, |p| Ok(p[0].matmul(&p[1])?.mul(&w)?.sum())).unwrap();
        assert!(r.max_rel_err < 1e-3, "{r:?}");
    }

    #[test]
    fn swap_axes_round_trip_and_gradient() {
        let mut rng = RngStream::from_seed(9);
        let x = Tensor::<f64>::uniform(&[2, 3, 2, 2], 1.0, &mut rng).detach_param();
        let y = x.swap_axes01().unwrap();
        assert_eq!(y.shape(), &[3, 2, 2, 2]);
        assert_eq!(y.swap_axes01().unwrap().data(), x.data());
        // element [i=1, j=2, 1, 0] moves to [2, 1, 1, 0]
        assert_eq!(
            x.data()[((3 + 2) * 2 + 1) * 2],
            y.data()[((2 * 2 + 1) * 2 + 1) * 2]
        );
        let w = Tensor::<f64>::uniform(&[3, 2, 2, 2], 1.0, &mut rng);
        let r = check_gradients(&[x], 1e-6, |p| Ok(p[0].swap_axes01()?.mul(&w)?.sum())).unwrap();
        assert!(r.max_rel_err < 1e-8);
    }
}
