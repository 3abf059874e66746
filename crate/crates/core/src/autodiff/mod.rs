//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is built fresh for each evaluation (define-by-run). Every
//! primitive checks its output for NaN/Inf and reports
//! [`Error::NonFinite`](crate::Error::NonFinite) instead of propagating it.

mod check;
mod primitive;
mod tape;
mod tensor;

pub use check::{finite_diff_check, relative_error, FiniteDiffReport};
pub use primitive::Primitive;
pub use tape::{Gradients, NodeId, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Row-wise softmax of a plain tensor (no tape).
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    Primitive::Softmax.forward(&[logits])
}

/// Records `kind` on `tape` and returns the resulting node.
pub fn apply_primitive(tape: &mut Tape, kind: Primitive, inputs: &[Var]) -> Result<Var> {
    tape.apply(kind, inputs)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::Error;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn relu_and_ln_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let one = tape.constant(Tensor::vector(vec![1.0]));
        let l = tape.ln(one).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0]);
    }

    #[test]
    fn matmul_matches_row_dot_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_tensor(&mut rng, &[2, 3]);
        let b = random_tensor(&mut rng, &[3, 1]);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        for i in 0..2 {
            let expected: f64 = (0..3).map(|k| a.get(i, k) * b.get(k, 0)).sum();
            assert!((tape.value(c).get(i, 0) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_names_primitive_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0]));
        assert!(matches!(tape.ln(x), Err(Error::NonFinite { primitive: "ln" })));
        let big = tape.constant(Tensor::vector(vec![1000.0]));
        assert!(matches!(tape.exp(big), Err(Error::NonFinite { primitive: "exp" })));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::from_rows(&[[0.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::from_rows(&[[1000.0, 1000.0]]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::from_rows(&[[1f64.ln(), 3f64.ln()]]).unwrap()).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
        assert!(softmax(&Tensor::zeros(&[3, 0])).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_are_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let rows = rng.random_range(1..6);
            let cols = rng.random_range(1..8);
            let x = random_tensor(&mut rng, &[rows, cols]).map(|v| v * 20.0);
            let s = softmax(&x).unwrap();
            for r in 0..rows {
                let total: f64 = s.row(r).iter().sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
            let c = rng.random_range(-50.0..50.0);
            let shifted = softmax(&x.map(|v| v + c)).unwrap();
            assert!(s.max_abs_diff(&shifted) < 1e-12);
        }
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::zeros(&[3, 4]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::full(&[3, 4], 1.0));
    }

    #[test]
    fn backward_of_mean_relu() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![-1.0, 2.0]));
        let r = tape.relu(x).unwrap();
        let m = tape.mean(r).unwrap();
        let g = tape.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.5]);
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::scalar(3.0));
        let y = tape.add(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot { .. })));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn backward_wrt_skips_unrelated_leaves() {
        let mut tape = Tape::new();
        let w = tape.var(Tensor::from_rows(&[[2.0], [3.0]]).unwrap());
        let u = tape.var(Tensor::from_rows(&[[1.0, 1.0]]).unwrap());
        let y = tape.matmul(u, w).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward_wrt(s, &[u]).unwrap();
        assert_eq!(g[0].data(), &[2.0, 3.0]);
    }

    fn kl_of_softmaxes(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        let p = tape.softmax(a)?;
        let q = tape.softmax(b)?;
        let pc = tape.clamp(p, 1e-30, f64::INFINITY)?;
        let qc = tape.clamp(q, 1e-30, f64::INFINITY)?;
        let lp = tape.ln(pc)?;
        let lq = tape.ln(qc)?;
        let d = tape.sub(lp, lq)?;
        let t = tape.mul(p, d)?;
        tape.sum(t)
    }

    #[test]
    fn kl_of_softmaxes_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_tensor(&mut rng, &[1, 5]);
        let b = random_tensor(&mut rng, &[1, 5]);
        let report = finite_diff_check(|t, v| kl_of_softmaxes(t, v[0], v[1]), &[a, b], 1e-5, 1e-4).unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn finite_diff_of_square_and_constant() {
        let report = finite_diff_check(
            |t, v| t.mul(v[0], v[0]),
            &[Tensor::scalar(3.0)],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!((report.analytic[0].data()[0] - 6.0).abs() < 1e-12);
        assert!((report.numeric[0].data()[0] - 6.0).abs() < 1e-6);

        let report = finite_diff_check(
            |t, v| {
                let z = t.scale(v[0], 0.0)?;
                let s = t.sum(z)?;
                t.shift(s, 4.0)
            },
            &[Tensor::vector(vec![1.0, -2.0])],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed());
        assert!(report.numeric[0].data().iter().all(|&v| v == 0.0));
        assert!(report.analytic[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_diff_reports_non_finite_probe() {
        // ln(x) at x = 1e-6 probed with step 1e-5 crosses zero.
        let err = finite_diff_check(
            |t, v| {
                let l = t.ln(v[0])?;
                t.sum(l)
            },
            &[Tensor::vector(vec![1.0, 1e-6])],
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(err.to_string().contains("(0, 1)"), "{err}");
    }

    /// Every primitive's backward rule against central differences over
    /// random shapes and values.
    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for case in 0..100 {
            let rows = rng.random_range(1..5);
            let cols = rng.random_range(1..5);
            let inner = rng.random_range(1..5);
            let shape = [rows, cols];
            let perm: Vec<usize> = (0..rows).map(|_| rng.random_range(0..rows)).collect();
            let (points, f): (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>) = match case % 17 {
                0 => (
                    vec![random_tensor(&mut rng, &[rows, inner]), random_tensor(&mut rng, &[inner, cols])],
                    Box::new(|t, v| {
                        let m = t.matmul(v[0], v[1])?;
                        let s = t.mul(m, m)?;
                        t.sum(s)
                    }),
                ),
                1 => (
                    vec![random_tensor(&mut rng, &shape), random_tensor(&mut rng, &shape)],
                    Box::new(|t, v| {
                        let a = t.add(v[0], v[1])?;
                        let s = t.mul(a, a)?;
                        t.sum(s)
                    }),
                ),
                2 => (
                    vec![random_tensor(&mut rng, &shape), random_tensor(&mut rng, &[cols])],
                    Box::new(|t, v| {
                        let a = t.add_bias(v[0], v[1])?;
                        let s = t.mul(a, a)?;
                        t.sum(s)
                    }),
                ),
                3 => (
                    vec![random_tensor(&mut rng, &shape), random_tensor(&mut rng, &shape)],
                    Box::new(|t, v| {
                        let a = t.mul(v[0], v[1])?;
                        t.sum(a)
                    }),
                ),
                4 => (
                    // keep away from the kink at 0
                    vec![random_tensor(&mut rng, &shape).map(|x| if x.abs() < 0.1 { x + 0.3 } else { x })],
                    Box::new(|t, v| {
                        let a = t.relu(v[0])?;
                        let s = t.mul(a, a)?;
                        t.sum(s)
                    }),
                ),
                5 => (
                    vec![random_tensor(&mut rng, &shape)],
                    Box::new(|t, v| {
                        let a = t.exp(v[0])?;
                        t.sum(a)
                    }),
                ),
                6 => (
                    vec![random_tensor(&mut rng, &shape).map(|x| x.abs() + 0.5)],
                    Box::new(|t, v| {
                        let a = t.ln(v[0])?;
                        t.sum(a)
                    }),
                ),
                7 => (
                    vec![random_tensor(&mut rng, &shape)],
                    Box::new(|t, v| {
                        let a = t.neg(v[0])?;
                        let s = t.mul(a, v[0])?;
                        t.sum(s)
                    }),
                ),
                8 => (
                    vec![random_tensor(&mut rng, &shape)],
                    Box::new(|t, v| {
                        let a = t.mul(v[0], v[0])?;
                        t.mean(a)
                    }),
                ),
                9 => (
                    vec![random_tensor(&mut rng, &shape)],
                    Box::new(|t, v| {
                        let a = t.scale(v[0], -1.7)?;
                        let b = t.shift(a, 0.3)?;
                        let s = t.mul(b, b)?;
                        t.sum(s)
                    }),
                ),
                10 => (
                    vec![random_tensor(&mut rng, &shape), random_tensor(&mut rng, &shape)],
                    Box::new(|t, v| {
                        let a = t.softmax(v[0])?;
                        let s = t.mul(a, v[1])?;
                        t.sum(s)
                    }),
                ),
                11 => (
                    vec![random_tensor(&mut rng, &shape), random_tensor(&mut rng, &shape)],
                    Box::new(|t, v| {
                        let a = t.sigmoid(v[0])?;
                        let s = t.mul(a, v[1])?;
                        t.sum(s)
                    }),
                ),
                12 => (
                    vec![random_tensor(&mut rng, &shape).map(|x| if (x.abs() - 1.0).abs() < 0.1 { x * 0.5 } else { x })],
                    Box::new(|t, v| {
                        let a = t.clamp(v[0], -1.0, 1.0)?;
                        let s = t.mul(a, a)?;
                        t.sum(s)
                    }),
                ),
                13 => {
                    let perm = perm.clone();
                    (
                        vec![random_tensor(&mut rng, &shape), random_tensor(&mut rng, &shape)],
                        Box::new(move |t, v| {
                            let a = t.gather_rows(v[0], &perm)?;
                            let s = t.mul(a, v[1])?;
                            t.sum(s)
                        }),
                    )
                }
                14 => {
                    let end = rng.random_range(1..=rows);
                    (
                        vec![random_tensor(&mut rng, &shape)],
                        Box::new(move |t, v| {
                            let a = t.slice_rows(v[0], 0, end)?;
                            let s = t.mul(a, a)?;
                            t.sum(s)
                        }),
                    )
                }
                15 => (
                    vec![random_tensor(&mut rng, &shape), random_tensor(&mut rng, &[inner, cols])],
                    Box::new(|t, v| {
                        let a = t.concat_rows(&[v[0], v[1]])?;
                        let s = t.mul(a, a)?;
                        let e = t.exp(s)?;
                        t.sum(e)
                    }),
                ),
                _ => (
                    vec![random_tensor(&mut rng, &shape), random_tensor(&mut rng, &shape)],
                    Box::new(|t, v| kl_of_softmaxes(t, v[0], v[1])),
                ),
            };
            let report = finite_diff_check(f, &points, 1e-5, 1e-4).unwrap();
            assert!(
                report.passed(),
                "case {case}: max rel error {} at {:?}",
                report.max_rel_error,
                report.worst
            );
        }
    }

    #[test]
    fn replay_is_bitwise_deterministic() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let x = random_tensor(&mut rng, &[4, 3]);
            let w = random_tensor(&mut rng, &[3, 2]);
            let mut tape = Tape::new();
            let (vx, vw) = (tape.var(x), tape.var(w));
            let h = tape.matmul(vx, vw).unwrap();
            let p = tape.softmax(h).unwrap();
            tape.value(p).clone()
        };
        assert_eq!(build().data(), build().data());
    }
}
