//! Convolution (im2col + GEMM), 1×1 channel mixing and pooling.

use super::Tensor;
use crate::error::{dim_err, Result};
use crate::scalar::gemm;
use crate::Scalar;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_output_size(input: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || k > input + 2 * padding {
        return None;
    }
    Some((input + 2 * padding - k) / stride + 1)
}

fn im2col<S: Scalar>(img: &[S], g: &Geometry, col: &mut [S]) {
    let p = g.col_cols();
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        dst[oy * g.ow + ox] =
                            if iy >= 0 && (iy as usize) < g.h && ix >= 0 && (ix as usize) < g.w {
                                img[(ci * g.h + iy as usize) * g.w + ix as usize]
                            } else {
                                S::zero()
                            };
                    }
                }
            }
        }
    }
}

fn col2im_add<S: Scalar>(col: &[S], g: &Geometry, img: &mut [S]) {
    let p = g.col_cols();
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        let d = (ci * g.h + iy as usize) * g.w + ix as usize;
                        img[d] = img[d] + src[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation: `[N×C_in×H×W] ⊛ [C_out×C_in×kh×kw] → [N×C_out×H'×W']`.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>> {
    let (is, ks) = (input.shape(), kernel.shape());
    if is.len() != 4 || ks.len() != 4 {
        return dim_err(format!(
            "conv2d: expected 4-D input and kernel, got {is:?} and {ks:?}"
        ));
    }
    if is[1] != ks[1] {
        return dim_err(format!(
            "conv2d: input {is:?} has {} channels, kernel {ks:?} expects {}",
            is[1], ks[1]
        ));
    }
    let (n, c, h, w) = (is[0], is[1], is[2], is[3]);
    let (o, kh, kw) = (ks[0], ks[2], ks[3]);
    let (Some(oh), Some(ow)) = (
        conv_output_size(h, kh, stride, padding),
        conv_output_size(w, kw, stride, padding),
    ) else {
        return dim_err(format!(
            "conv2d: kernel {ks:?} with stride {stride} padding {padding} does not fit input {is:?}"
        ));
    };
    let g = Geometry {
        c,
        h,
        w,
        kh,
        kw,
        stride,
        pad: padding,
        oh,
        ow,
    };
    let (rows, p) = (g.col_rows(), g.col_cols());
    let img_len = c * h * w;

    let mut out = vec![S::zero(); n * o * p];
    let mut col = vec![S::zero(); rows * p];
    for b in 0..n {
        im2col(&input.data()[b * img_len..(b + 1) * img_len], &g, &mut col);
        gemm(
            false,
            false,
            o,
            p,
            rows,
            S::one(),
            kernel.data(),
            &col,
            S::zero(),
            &mut out[b * o * p..(b + 1) * o * p],
        );
    }

    let (xd, kd) = (input.data_arc(), kernel.data_arc());
    let (tx, tk) = (input.requires_grad(), kernel.requires_grad());
    Ok(Tensor::from_op(
        "conv2d",
        vec![n, o, oh, ow],
        out,
        &[input, kernel],
        move |gout| {
            let mut gk = tk.then(|| vec![S::zero(); o * rows]);
            let mut gx = tx.then(|| vec![S::zero(); n * img_len]);
            let mut col = vec![S::zero(); rows * p];
            let mut dcol = vec![S::zero(); rows * p];
            for b in 0..n {
                let gb = &gout[b * o * p..(b + 1) * o * p];
                if let Some(gk) = gk.as_mut() {
                    im2col(&xd[b * img_len..(b + 1) * img_len], &g, &mut col);
                    // dK += G_b · colᵀ
                    gemm(false, true, o, rows, p, S::one(), gb, &col, S::one(), gk);
                }
                if let Some(gx) = gx.as_mut() {
                    // dcol = Kᵀ · G_b
                    gemm(
                        true,
                        false,
                        rows,
                        p,
                        o,
                        S::one(),
                        &kd,
                        gb,
                        S::zero(),
                        &mut dcol,
                    );
                    col2im_add(&dcol, &g, &mut gx[b * img_len..(b + 1) * img_len]);
                }
            }
            vec![gx, gk]
        },
    ))
}

/// 1×1 channel mixing shared by linear and convolutional germination:
/// `out[:, ℓ] = mixer · seed[:, ℓ]` for every position `ℓ`.
pub fn channel_map_1x1<S: Scalar>(seed: &Tensor<S>, mixer: &Tensor<S>) -> Result<Tensor<S>> {
    let (ss, ms) = (seed.shape(), mixer.shape());
    if ss.len() != 2 || ms.len() != 2 || ms[1] != ss[0] {
        return dim_err(format!(
            "channel_map_1x1: mixer {ms:?} cannot mix seed {ss:?} (mixer columns must equal seed channels)"
        ));
    }
    mixer.matmul(seed)
}

impl<S: Scalar> Tensor<S> {
    /// 2×2 max pooling with stride 2 (odd trailing rows/columns dropped).
    pub fn max_pool2x2(&self) -> Result<Tensor<S>> {
        let s = self.shape();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return dim_err(format!(
                "max_pool2x2: need [N×C×H×W] with H, W >= 2, got {s:?}"
            ));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let x = self.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut arg = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    arg.push(best);
                }
            }
        }
        let len = self.numel();
        Ok(Tensor::from_op(
            "max_pool2x2",
            vec![n, c, oh, ow],
            out,
            &[self],
            move |g| {
                let mut gx = vec![S::zero(); len];
                for (&i, &v) in arg.iter().zip(g) {
                    gx[i] = gx[i] + v;
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Mean over spatial axes: `[N×C×H×W] → [N×C]`.
    pub fn global_avg_pool(&self) -> Result<Tensor<S>> {
        let s = self.shape();
        if s.len() != 4 {
            return dim_err(format!("global_avg_pool: need [N×C×H×W], got {s:?}"));
        }
        let (nc, hw) = (s[0] * s[1], s[2] * s[3]);
        let inv = S::one() / S::c(hw as f64);
        let out = self
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<S>() * inv)
            .collect();
        Ok(Tensor::from_op(
            "global_avg_pool",
            vec![s[0], s[1]],
            out,
            &[self],
            move |g| {
                let mut gx = Vec::with_capacity(nc * hw);
                for &v in g {
                    gx.extend(std::iter::repeat_n(v * inv, hw));
                }
                vec![Some(gx)]
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients;
    use crate::RngStream;

    /// Direct quadruple-loop cross-correlation.
    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
        let (is, ks) = (x.shape(), k.shape());
        let (n, c, h, w) = (is[0], is[1], is[2], is[3]);
        let (o, kh, kw) = (ks[0], ks[2], ks[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * o * oh * ow];
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (oy * stride + i) as isize - pad as isize;
                                    let ix = (ox * stride + j) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                        continue;
                                    }
                                    acc += x.data()
                                        [((b * c + ic) * h + iy as usize) * w + ix as usize]
                                        * k.data()[((oc * c + ic) * kh + i) * kw + j];
                                }
                            }
                        }
                        out[((b * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn unit_1x1_kernel_is_identity() {
        let x = Tensor::<f32>::new((0..9).map(|v| v as f32).collect(), &[1, 1, 3, 3]).unwrap();
        let k = Tensor::<f32>::new(vec![1.0], &[1, 1, 1, 1]).unwrap();
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap().data(), x.data());
    }

    #[test]
    fn all_ones_3x3_sums_to_nine() {
        let x = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn identity_channel_kernel_is_identity_map() {
        let mut rng = RngStream::from_seed(3);
        let x = Tensor::<f32>::uniform(&[2, 3, 4, 5], 1.0, &mut rng);
        let mut eye = vec![0.0f32; 9];
        (0..3).for_each(|i| eye[i * 3 + i] = 1.0);
        let k = Tensor::new(eye, &[3, 3, 1, 1]).unwrap();
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap().data(), x.data());
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = RngStream::from_seed(4);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let x = Tensor::<f64>::uniform(&[2, 3, 7, 6], 1.0, &mut rng);
            let k = Tensor::<f64>::uniform(&[4, 3, 3, 3], 1.0, &mut rng);
            let y = conv2d(&x, &k, stride, pad).unwrap();
            let r = naive_conv(&x, &k, stride, pad);
            assert_eq!(y.numel(), r.len());
            for (a, b) in y.data().iter().zip(&r) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_geometry_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let k = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        assert!(conv2d(&x, &k, 1, 0).is_err());
        assert!(conv2d(&x, &k, 1, 1).is_ok());
        assert!(conv2d(&x, &k, 0, 1).is_err());
        let k2 = Tensor::<f32>::zeros(&[1, 2, 1, 1]);
        assert!(conv2d(&x, &k2, 1, 0).is_err());
    }

    #[test]
    fn conv_gradient_f32_within_1e_3() {
        let mut rng = RngStream::from_seed(21);
        let x = Tensor::<f32>::uniform(&[2, 3, 8, 8], 1.0, &mut rng).detach_param();
        let k = Tensor::<f32>::uniform(&[4, 3, 3, 3], 1.0, &mut rng).detach_param();
        let w = Tensor::<f32>::uniform(&[2, 4, 8, 8], 1.0, &mut rng);
        // the loss is linear in each single entry, so a large step has no
        // truncation error and keeps f32 rounding out of the quotient
        let r = check_gradients(&[x, k], 0.5, |p| {
            Ok(conv2d(&p[0], &p[1], 1, 1)?.mul(&w)?.sum())
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-3, "{r:?}");
    }

    #[test]
    fn strided_conv_gradient_f64() {
        let mut rng = RngStream::from_seed(22);
        let x = Tensor::<f64>::uniform(&[2, 2, 7, 7], 1.0, &mut rng).detach_param();
        let k = Tensor::<f64>::uniform(&[3, 2, 3, 3], 1.0, &mut rng).detach_param();
        let w = Tensor::<f64>::uniform(&[2, 3, 4, 4], 1.0, &mut rng);
        let r = check_gradients(&[x, k], 1e-6, |p| {
            Ok(conv2d(&p[0], &p[1], 2, 1)?.mul(&w)?.sum())
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn channel_map_examples() {
        let seed = Tensor::<f32>::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let mixer = Tensor::<f32>::new(vec![1.0, 1.0], &[1, 2]).unwrap();
        assert_eq!(
            channel_map_1x1(&seed, &mixer).unwrap().data(),
            &[5.0, 7.0, 9.0]
        );

        let eye = Tensor::<f32>::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        assert_eq!(channel_map_1x1(&seed, &eye).unwrap().data(), seed.data());

        let bad = Tensor::<f32>::zeros(&[2, 3]);
        assert!(channel_map_1x1(&seed, &bad).is_err());
    }

    #[test]
    fn channel_map_bitwise_equals_1x1_conv() {
        let mut rng = RngStream::from_seed(8);
        let (c_pip, c_f, c_big, k) = (5, 7, 12, 3);
        let seed = Tensor::<f32>::uniform(&[c_pip, c_big * k * k], 1.0, &mut rng);
        let mixer = Tensor::<f32>::uniform(&[c_f, c_pip], 1.0, &mut rng);
        let via_map = channel_map_1x1(&seed, &mixer).unwrap();
        let img = seed.reshape(&[1, c_pip, c_big * k * k, 1]).unwrap();
        let kern = mixer.reshape(&[c_f, c_pip, 1, 1]).unwrap();
        let via_conv = conv2d(&img, &kern, 1, 0).unwrap();
        let a: Vec<u32> = via_map.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = via_conv.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn pooling_values_and_gradients() {
        let x = Tensor::<f64>::new(
            (0..16).map(|v| ((v * 7) % 16) as f64).collect(),
            &[1, 1, 4, 4],
        )
        .unwrap();
        let y = x.max_pool2x2().unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        // rows: [0,7,14,5],[12,3,10,1],[8,15,6,13],[4,11,2,9]
        assert_eq!(y.data(), &[12.0, 14.0, 15.0, 13.0]);
        let a = x.global_avg_pool().unwrap();
        assert_eq!(a.data(), &[7.5]);

        let mut rng = RngStream::from_seed(2);
        let xp = Tensor::<f64>::uniform(&[2, 3, 5, 4], 1.0, &mut rng).detach_param();
        let r = check_gradients(&[xp], 1e-6, |p| {
            Ok(p[0]
                .max_pool2x2()?
                .global_avg_pool()?
                .mul(&Tensor::full(&[2, 3], 0.3))?
                .sum())
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }
}
