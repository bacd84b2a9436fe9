//! Reverse-mode differentiable dense-array engine.
//!
//! Everything the other modules compute with lives here: [`DiffArray`]
//! holds values (and, after extraction, gradients), [`Tape`] records ops
//! and replays them backwards, and [`check_gradients`] verifies the whole
//! thing against central finite differences.

mod array;
mod gradcheck;
mod kernels;
mod tape;

pub use array::{strides_of, DiffArray, Dtype, Scalar};
pub use gradcheck::{check_gradients, rel_err, GradCheckReport};
pub use tape::{Tape, Var};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Result;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> DiffArray<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DiffArray::randn(shape.to_vec(), 1.0, &mut rng).with_grad(true)
    }

    /// FD oracle for a single-input op: builds `sum(op(x))` and compares.
    fn fd_check_unary<F>(x: DiffArray<f64>, f: F) -> f64
    where
        F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
    {
        let params = vec![("x".to_string(), x)];
        let report = check_gradients(
            &params,
            |tape, vars| {
                let y = f(tape, vars[0])?;
                tape.sum(y, None)
            },
            1e-5,
            None,
        )
        .unwrap();
        report.max_rel_err
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f64>::new();
        let i = tape
            .constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])
            .unwrap();
        let v = tape.constant(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let out = tape.matmul(i, v).unwrap();
        assert_eq!(tape.value(out), &[3.0, 4.0]);
        assert_eq!(tape.shape(out), &[2, 1]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = tape.constant(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![4, 2], vec![0.0; 8]).unwrap();
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn matmul_grad_matches_fd() {
        let params = vec![
            ("a".to_string(), randn(&[3, 4], 1)),
            ("b".to_string(), randn(&[4, 2], 2)),
        ];
        let report = check_gradients(
            &params,
            |tape, vars| {
                let c = tape.matmul(vars[0], vars[1])?;
                tape.sum(c, None)
            },
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{:?}", report);
    }

    #[test]
    fn batched_matmul_grad_matches_fd() {
        // batched lhs against shared rhs, and fully batched pair
        let params = vec![
            ("a".to_string(), randn(&[2, 3, 4], 3)),
            ("b".to_string(), randn(&[4, 5], 4)),
            ("c".to_string(), randn(&[2, 5, 3], 5)),
        ];
        let report = check_gradients(
            &params,
            |tape, vars| {
                let ab = tape.matmul(vars[0], vars[1])?;
                let abc = tape.matmul(vars[2], ab)?;
                tape.sum(abc, None)
            },
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{:?}", report);
    }

    #[test]
    fn softmax_uniform_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap();
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_bias() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![1, 4], vec![7.0; 4]).unwrap();
        let gain = tape.constant(vec![4], vec![2.0; 4]).unwrap();
        let bias = tape.constant(vec![4], vec![0.5; 4]).unwrap();
        let y = tape.layer_norm(x, gain, bias).unwrap();
        for &v in tape.value(y) {
            assert!((v - 0.5).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn elementwise_suite_grads_match_fd() {
        // shared random 2x3x4 input through each op
        let x = randn(&[2, 3, 4], 10);
        let checks: Vec<(&str, f64)> = vec![
            ("silu", fd_check_unary(x.clone(), |t, v| Ok(t.silu(v)))),
            ("softmax", fd_check_unary(x.clone(), |t, v| t.softmax(v))),
            ("scale", fd_check_unary(x.clone(), |t, v| Ok(t.scale(v, -1.7)))),
            ("mean_axis", {
                fd_check_unary(x.clone(), |t, v| t.mean(v, Some(1)))
            }),
            ("sum_axis", fd_check_unary(x.clone(), |t, v| t.sum(v, Some(2)))),
            ("slice", fd_check_unary(x.clone(), |t, v| t.slice(v, 2, 1, 2))),
            ("permute", {
                fd_check_unary(x.clone(), |t, v| t.permute(v, &[2, 0, 1]))
            }),
            ("reshape", {
                fd_check_unary(x.clone(), |t, v| t.reshape(v, vec![6, 4]))
            }),
        ];
        for (name, err) in checks {
            assert!(err < 1e-5, "{name}: rel err {err}");
        }
    }

    #[test]
    fn binary_and_norm_grads_match_fd() {
        let params = vec![
            ("x".to_string(), randn(&[2, 3, 4], 20)),
            ("y".to_string(), randn(&[2, 3, 4], 21)),
            ("b".to_string(), randn(&[4], 22)),
            ("gain".to_string(), randn(&[4], 23)),
            ("bias".to_string(), randn(&[4], 24)),
        ];
        let report = check_gradients(
            &params,
            |t, v| {
                let s = t.add(v[0], v[1])?;
                let s = t.sub(s, v[0])?;
                let m = t.mul(s, v[2])?; // suffix broadcast
                let n = t.layer_norm(m, v[3], v[4])?;
                let c = t.concat(&[n, s], 2)?;
                t.mean(c, None)
            },
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{:?}", report.per_param);
    }

    #[test]
    fn embedding_lookup_grads_accumulate() {
        let params = vec![("table".to_string(), randn(&[5, 3], 30))];
        let report = check_gradients(
            &params,
            |t, v| {
                // id 2 used twice: scatter-add must accumulate
                let e = t.embedding_lookup(v[0], &[2, 0, 2, 4])?;
                let sq = t.mul(e, e)?;
                t.sum(sq, None)
            },
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{:?}", report);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(vec![3, 7], vec![0.4; 21]).unwrap();
        let loss = tape.cross_entropy(logits, &[0, 3, 6], -1).unwrap();
        let expect = (7.0f64).ln();
        assert!((tape.scalar_value(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_peaked_is_tiny() {
        let mut tape = Tape::<f64>::new();
        let mut row = vec![0.0; 7];
        row[2] = 20.0;
        let logits = tape.constant(vec![1, 7], row).unwrap();
        let loss = tape.cross_entropy(logits, &[2], -1).unwrap();
        assert!(tape.scalar_value(loss) < 1e-8);
    }

    #[test]
    fn cross_entropy_vs_log_sum_exp_oracle() {
        // independent oracle: loss = logsumexp(row) - row[target]
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let logits = DiffArray::<f64>::randn(vec![5, 11], 2.0, &mut rng);
        let targets: Vec<i64> = vec![3, 0, 10, 7, 1];
        let mut expect = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &logits.data()[r * 11..(r + 1) * 11];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
            expect += lse - row[t as usize];
        }
        expect /= 5.0;

        let mut tape = Tape::new();
        let l = tape.leaf(&logits);
        let loss = tape.cross_entropy(l, &targets, -1).unwrap();
        assert!((tape.scalar_value(loss) - expect).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_all_ignored_is_zero_with_zero_grad() {
        let x = randn(&[3, 4], 50);
        let params = vec![("x".to_string(), x)];
        let mut tape = Tape::new();
        let v = tape.leaf(&params[0].1);
        let loss = tape.cross_entropy(v, &[-1, -1, -1], -1).unwrap();
        assert_eq!(tape.scalar_value(loss), 0.0);
        tape.backward(loss).unwrap();
        assert!(tape.grad(v).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn cross_entropy_grad_matches_fd() {
        let params = vec![("logits".to_string(), randn(&[4, 6], 60))];
        let report = check_gradients(
            &params,
            |t, v| t.cross_entropy(v[0], &[1, -1, 5, 0], -1),
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "{:?}", report);
    }

    #[test]
    fn mse_trivial_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let same = tape.mse(a, a).unwrap();
        assert_eq!(tape.scalar_value(same), 0.0);

        let b = tape.constant(vec![2, 2], vec![2.0, 3.0, 4.0, 5.0]).unwrap();
        let one = tape.mse(a, b).unwrap();
        assert!((tape.scalar_value(one) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mse_vs_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = DiffArray::<f64>::randn(vec![3, 5], 1.0, &mut rng);
        let q = DiffArray::<f64>::randn(vec![3, 5], 1.0, &mut rng);
        let mut expect = 0.0;
        for (a, b) in p.data().iter().zip(q.data()) {
            expect += (a - b) * (a - b);
        }
        expect /= 15.0;
        let mut tape = Tape::new();
        let pv = tape.leaf(&p);
        let qv = tape.leaf(&q);
        let loss = tape.mse(pv, qv).unwrap();
        assert!((tape.scalar_value(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn shared_subexpression_grad_accumulates() {
        // f(x) = sum(x + x): grad must be 2, not 1
        let x = DiffArray::<f64>::from_vec(vec![3], vec![1.0, -2.0, 0.5])
            .unwrap()
            .with_grad(true);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let s = tape.add(v, v).unwrap();
        let root = tape.sum(s, None).unwrap();
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn quadratic_gradcheck_is_exact() {
        let params = vec![("w".to_string(), randn(&[6], 70))];
        let report = check_gradients(
            &params,
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq, None)
            },
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "{:?}", report);
    }

    #[test]
    fn constant_function_has_zero_grad() {
        let params = vec![("w".to_string(), randn(&[4], 80))];
        let report = check_gradients(
            &params,
            |t, v| {
                let z = t.scale(v[0], 0.0);
                t.sum(z, None)
            },
            1e-5,
            None,
        )
        .unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || -> Vec<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let x = DiffArray::<f64>::randn(vec![4, 4], 1.0, &mut rng);
            let w = DiffArray::<f64>::randn(vec![4, 4], 1.0, &mut rng);
            let mut tape = Tape::new();
            let xv = tape.leaf(&x);
            let wv = tape.leaf(&w);
            let h = tape.matmul(xv, wv).unwrap();
            let s = tape.silu(h);
            let y = tape.softmax(s).unwrap();
            tape.value(y).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn axis_out_of_range_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        assert!(tape.sum(x, Some(2)).is_err());
        assert!(tape.mean(x, Some(5)).is_err());
        assert!(tape.slice(x, 3, 0, 1).is_err());
        assert!(tape.concat(&[x], 2).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn softmax_rows_are_distributions(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
                let mut tape = Tape::new();
                let x = tape.constant(vec![3, 4], vals).unwrap();
                let y = tape.softmax(x).unwrap();
                let out = tape.value(y);
                for r in 0..3 {
                    let row = &out[r * 4..(r + 1) * 4];
                    prop_assert!(row.iter().all(|&v| v >= 0.0));
                    let s: f64 = row.iter().sum();
                    prop_assert!((s - 1.0).abs() < 1e-6);
                }
            }

            #[test]
            fn add_then_sub_is_identity(vals in proptest::collection::vec(-10.0f64..10.0, 8),
                                        other in proptest::collection::vec(-10.0f64..10.0, 8)) {
                let mut tape = Tape::new();
                let x = tape.constant(vec![2, 4], vals.clone()).unwrap();
                let y = tape.constant(vec![2, 4], other).unwrap();
                let s = tape.add(x, y).unwrap();
                let back = tape.sub(s, y).unwrap();
                let got = tape.value(back);
                for (g, v) in got.iter().zip(&vals) {
                    prop_assert!((g - v).abs() < 1e-12);
                }
            }
        }
    }
}
