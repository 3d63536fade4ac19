//! Dense arrays, convolution kernels and the reverse-mode tape.

mod array;
mod kernels;
mod tape;

pub use array::RealArray;
pub use kernels::{Conv2dSpec, HeightPadding};
pub use tape::{Gradients, Tape, Var, GATHER_ZERO};

use crate::error::{Error, Result};
use kernels::{conv2d_forward, ConvGeom};

/// `[Ci,h,w] ⊛ [Co,Ci,kh,kw] → [Co,h,w]` without recording a tape.
pub fn conv2d(
    input: &RealArray,
    kernel: &RealArray,
    bias: Option<&RealArray>,
    spec: Conv2dSpec,
) -> Result<RealArray> {
    let geom = ConvGeom::new(input.shape(), kernel.shape(), spec)?;
    if bias.is_some_and(|b| b.len() != geom.c_out) {
        return Err(Error::config("conv2d bias length mismatch"));
    }
    let out = conv2d_forward(&geom, input.data(), kernel.data(), bias.map(|b| b.data()));
    RealArray::new(vec![geom.c_out, geom.h, geom.w], out)
}

/// `tanh(pre[:C]) ⊙ σ(pre[C:])` along the leading axis.
pub fn gated_activation(pre: &RealArray) -> Result<RealArray> {
    let mut tape = Tape::new();
    let x = tape.leaf(pre.clone())?;
    let y = tape.gated_activation(x)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> RealArray {
        RealArray::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Nested-loop reference, written independently of the im2col path.
    fn conv_reference(x: &RealArray, w: &RealArray, spec: Conv2dSpec) -> RealArray {
        let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let off = match spec.height {
            HeightPadding::Causal => kh as isize - 1,
            HeightPadding::Strict => kh as isize,
            HeightPadding::Symmetric => (kh as isize - 1) / 2,
        };
        let d = spec.width_dilation as isize;
        let mut out = RealArray::zeros(&[co, h, wd]);
        for o in 0..co {
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for r in 0..kh {
                            for q in 0..kw {
                                let ii = i as isize + r as isize - off;
                                let jj = j as isize + (q as isize - (kw as isize - 1) / 2) * d;
                                if ii >= 0 && ii < h as isize && jj >= 0 && jj < wd as isize {
                                    acc += w.data()[((o * ci + c) * kh + r) * kw + q]
                                        * x.data()[(c * h + ii as usize) * wd + jj as usize];
                                }
                            }
                        }
                    }
                    out.data_mut()[(o * h + i) * wd + j] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[3, 4, 5], &mut rng);
        let w = RealArray::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let y = conv2d(&x, &w, None, Conv2dSpec::causal(1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_kernel_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 3, 3], &mut rng);
        let w = RealArray::zeros(&[4, 2, 3, 3]);
        let y = conv2d(&x, &w, None, Conv2dSpec::causal(2)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_nested_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for spec in [
            Conv2dSpec::causal(1),
            Conv2dSpec::strict(1),
            Conv2dSpec::symmetric(1),
            Conv2dSpec::causal(2),
            Conv2dSpec::strict(3),
        ] {
            let x = random(&[3, 5, 7], &mut rng);
            let w = random(&[2, 3, 3, 3], &mut rng);
            let y = conv2d(&x, &w, None, spec).unwrap();
            let r = conv_reference(&x, &w, spec);
            assert!(y.max_abs_diff(&r) <= 1e-12, "{spec:?}");
        }
    }

    #[test]
    fn conv_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[3, 6, 8], &mut rng);
        let y = random(&[3, 6, 8], &mut rng);
        let w = random(&[4, 3, 3, 3], &mut rng);
        let (a, b) = (0.7, -1.3);
        let mix = RealArray::from_fn(&[3, 6, 8], |i| a * x.data()[i] + b * y.data()[i]);
        let spec = Conv2dSpec::causal(2);
        let lhs = conv2d(&mix, &w, None, spec).unwrap();
        let cx = conv2d(&x, &w, None, spec).unwrap();
        let cy = conv2d(&y, &w, None, spec).unwrap();
        let rhs = RealArray::from_fn(&[4, 6, 8], |i| a * cx.data()[i] + b * cy.data()[i]);
        assert!(lhs.max_abs_diff(&rhs) <= 1e-10);
    }

    #[test]
    fn height_causality() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, w) = (6, 5);
        let x = random(&[2, h, w], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        for strict in [false, true] {
            let spec = if strict { Conv2dSpec::strict(1) } else { Conv2dSpec::causal(1) };
            let base = conv2d(&x, &k, None, spec).unwrap();
            for i in 0..h {
                // change rows >= i
                let mut x2 = x.clone();
                for c in 0..2 {
                    for r in i..h {
                        for j in 0..w {
                            x2.data_mut()[(c * h + r) * w + j] += 1.0;
                        }
                    }
                }
                let y = conv2d(&x2, &k, None, spec).unwrap();
                let unchanged_upto = if strict { i + 1 } else { i };
                for c in 0..3 {
                    for r in 0..unchanged_upto.min(h) {
                        for j in 0..w {
                            let idx = (c * h + r) * w + j;
                            assert_eq!(y.data()[idx], base.data()[idx]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn shape_errors() {
        let x = RealArray::zeros(&[2, 3, 3]);
        let w = RealArray::zeros(&[2, 3, 3, 3]);
        assert!(matches!(
            conv2d(&x, &w, None, Conv2dSpec::causal(1)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            gated_activation(&RealArray::zeros(&[3, 2, 2])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gated_zero_and_saturation() {
        let y = gated_activation(&RealArray::zeros(&[4, 2, 3])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(y.shape(), &[2, 2, 3]);
        let y = gated_activation(&RealArray::filled(&[2, 1, 1], 40.0)).unwrap();
        assert!((y.item() - 1.0).abs() < 1e-15);
    }

    /// Central-difference check of d(Σ c·f(θ))/dθ for every entry of every param.
    fn check_grad(
        params: Vec<RealArray>,
        f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
        tol: f64,
    ) {
        let loss_of = |ps: &[RealArray]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ps.iter().map(|p| t.param(p.clone()).unwrap()).collect();
            let l = f(&mut t, &vs).unwrap();
            t.value(l).item()
        };
        let mut t = Tape::new();
        let vs: Vec<Var> = params.iter().map(|p| t.param(p.clone()).unwrap()).collect();
        let l = f(&mut t, &vs).unwrap();
        let grads = t.backward(l).unwrap();
        let h = 1e-5;
        for (pi, p) in params.iter().enumerate() {
            let g = grads.wrt(vs[pi]);
            for e in 0..p.len() {
                let mut plus = params.clone();
                plus[pi].data_mut()[e] += h;
                let mut minus = params.clone();
                minus[pi].data_mut()[e] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let an = g.data()[e];
                assert!(
                    (an - fd).abs() / fd.abs().max(1.0) <= tol,
                    "param {pi}[{e}]: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    /// Random projection so every output element contributes to the scalar.
    fn project(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
        let n = t.value(y).len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = RealArray::from_fn(&[n], |_| rng.random_range(-1.0..1.0));
        let flat = t.reshape(y, &[n])?;
        let cw = t.leaf(c.reshaped(&[1, n])?)?;
        let s = t.matvec(cw, flat)?;
        Ok(s)
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut t = Tape::new();
        let p = t.param(RealArray::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let ones = t.leaf(RealArray::filled(&[1, 3], 1.0)).unwrap();
        let s = t.matvec(ones, p).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(p).data(), &[1.0, 1.0, 1.0]);

        // sum(p²)/2 via -gaussian_log_prob minus its constant
        let mut t = Tape::new();
        let p = t.param(RealArray::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let lp = t.gaussian_log_prob(p, None).unwrap();
        let l = t.scale(lp, -1.0).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(p).data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn unused_parameter_gets_zero() {
        let mut t = Tape::new();
        let p = t.param(RealArray::filled(&[2], 1.0)).unwrap();
        let q = t.param(RealArray::filled(&[2], 3.0)).unwrap();
        let l = t.gaussian_log_prob(p, None).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g.get(q).is_none());
        assert_eq!(g.wrt(q).data(), &[0.0, 0.0]);
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for spec in [Conv2dSpec::causal(2), Conv2dSpec::strict(1), Conv2dSpec::symmetric(1)] {
            let params = vec![
                random(&[2, 4, 5], &mut rng),
                random(&[3, 2, 3, 3], &mut rng),
                random(&[3], &mut rng),
            ];
            check_grad(
                params,
                |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), spec)?;
                    project(t, y, 1)
                },
                1e-6,
            );
        }
        // pointwise path
        let params = vec![random(&[3, 2, 4], &mut rng), random(&[2, 3, 1, 1], &mut rng)];
        check_grad(
            params,
            |t, v| {
                let y = t.conv2d(v[0], v[1], None, Conv2dSpec::causal(1))?;
                project(t, y, 2)
            },
            1e-6,
        );
    }

    #[test]
    fn conv_transpose_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = vec![
            random(&[1, 3, 4], &mut rng),
            random(&[1, 2, 3, 6], &mut rng),
            random(&[2], &mut rng),
        ];
        check_grad(
            params,
            |t, v| {
                let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), 3, 2)?;
                project(t, y, 3)
            },
            1e-6,
        );
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = vec![
            random(&[4, 2, 3], &mut rng),
            random(&[2], &mut rng),
            random(&[2], &mut rng),
            random(&[2, 5], &mut rng),
            random(&[5], &mut rng),
        ];
        check_grad(
            params,
            |t, v| {
                let g = t.gated_activation(v[0])?;
                let g = t.add_channel_bias(g, v[1])?;
                let g = t.channel_scale(g, v[2])?;
                let g = t.leaky_relu(g, 0.4)?;
                let idx: std::sync::Arc<[usize]> =
                    (0..12).rev().map(|i| if i == 3 { GATHER_ZERO } else { i }).collect();
                let g = t.gather(g, idx, &[2, 6])?;
                let mv = t.matvec(v[3], v[4])?;
                let a = project(t, g, 4)?;
                let b = project(t, mv, 5)?;
                let s = t.sum(&[a, b])?;
                let two = t.add(s, s)?;
                t.scale(two, 0.5)
            },
            1e-6,
        );
    }

    #[test]
    fn coupling_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = 3;
        let n = 6;
        let params = vec![
            random(&[1, 2, 3], &mut rng),
            RealArray::from_fn(&[2 + 3 * m, 2, 3], |_| rng.random_range(-1.5..1.5)),
        ];
        let mask: std::sync::Arc<[bool]> = (0..n).map(|i| i != 4).collect();
        check_grad(
            params,
            move |t, v| {
                let z = t.coupling(v[0], v[1], m)?;
                let ld = t.coupling_logdet(v[0], v[1], m, Some(mask.clone()))?;
                let lp = t.gaussian_log_prob(z, None)?;
                t.sum(&[ld, lp])
            },
            1e-6,
        );
    }

    #[test]
    fn non_finite_forward_names_primitive() {
        let mut t = Tape::new();
        let x = t.leaf(RealArray::filled(&[1], 1e300)).unwrap();
        let err = t.scale(x, 1e300).unwrap_err();
        match err {
            Error::Numeric { op, .. } => assert_eq!(op, "scale"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn deterministic_results() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random(&[4, 8, 16], &mut rng);
        let w = random(&[8, 4, 3, 3], &mut rng);
        let a = conv2d(&x, &w, None, Conv2dSpec::causal(2)).unwrap();
        let b = conv2d(&x, &w, None, Conv2dSpec::causal(2)).unwrap();
        assert_eq!(a, b);
    }
}
