//! Reverse-mode differentiation over dense `f64` arrays.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, GRADIENT_FLOOR};
pub use tape::{softmax_rows, Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn affine_identity_weight() {
        let mut t = Tape::new();
        let x = t.constant(t2(1, 2, &[1.0, 2.0]));
        let w = t.constant(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let b = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = t.affine(x, w, b).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn affine_hand_multiply() {
        let mut t = Tape::new();
        let x = t.constant(t2(1, 2, &[1.0, 1.0]));
        let w = t.constant(t2(2, 2, &[2.0, 3.0, 4.0, 5.0]));
        let b = t.constant(Tensor::vector(vec![1.0, 1.0]));
        let y = t.affine(x, w, b).unwrap();
        assert_eq!(t.value(y).data(), &[7.0, 9.0]);
    }

    #[test]
    fn affine_bias_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.constant(t2(3, 2, &[1.0, -2.0, 0.5, 4.0, 3.0, 1.0]));
        let w = t.param(t2(2, 4, &[0.1; 8]));
        let b = t.param(Tensor::vector(vec![0.0; 4]));
        let y = t.affine(x, w, b).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        // one contribution per batch row
        assert_eq!(g.get(b).unwrap().data(), &[3.0; 4]);

        let mut t = Tape::new();
        let x = t.constant(t2(1, 2, &[1.0, -2.0]));
        let w = t.param(t2(2, 4, &[0.1; 8]));
        let b = t.param(Tensor::vector(vec![0.0; 4]));
        let y = t.affine(x, w, b).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn affine_shape_error_names_axis() {
        let mut t = Tape::new();
        let x = t.constant(t2(1, 3, &[1.0, 2.0, 3.0]));
        let w = t.constant(t2(2, 2, &[1.0; 4]));
        let b = t.constant(Tensor::vector(vec![0.0; 2]));
        let err = t.affine(x, w, b).unwrap_err();
        assert!(matches!(
            err,
            Error::Dimension { op: "matmul", axis: 0, expected: 3, found: 2 }
        ));
        let w = t.constant(t2(3, 2, &[1.0; 6]));
        let b = t.constant(Tensor::vector(vec![0.0; 5]));
        assert!(matches!(
            t.affine(x, w, b),
            Err(Error::Dimension { op: "add_bias", axis: 1, .. })
        ));
    }

    #[test]
    fn softmax_uniform_and_beta() {
        let mut t = Tape::new();
        let x = t.constant(t2(1, 3, &[0.0, 0.0, 0.0]));
        let y = t.scaled_softmax(x, 1.0).unwrap();
        for &v in t.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = t.constant(t2(1, 2, &[1.0, 0.0]));
        let y = t.scaled_softmax(x, 3.0).unwrap();
        let e3 = 3f64.exp();
        assert!((t.value(y).data()[0] - e3 / (e3 + 1.0)).abs() < 1e-15);
        assert!((t.value(y).data()[0] - 0.9526).abs() < 1e-4);
        assert!((t.value(y).data()[1] - 0.0474).abs() < 1e-4);
    }

    #[test]
    fn softmax_rejects_nonpositive_beta() {
        let mut t = Tape::new();
        let x = t.constant(t2(1, 2, &[1.0, 0.0]));
        assert!(matches!(t.scaled_softmax(x, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(t.scaled_softmax(x, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn square_derivative() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.param(t2(2, 3, &[0.3, -1.0, 2.0, 0.0, 5.0, -2.0]));
        let y = t.scaled_softmax(x, 1.0).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        for &v in g.get(x).unwrap().data() {
            assert!(v.abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        let y = t.tanh(x);
        assert!(matches!(t.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_gradients_sum() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(2.0));
        let a = t.scale(x, 3.0);
        let b = t.mul(x, x).unwrap();
        let c = t.add(a, b).unwrap();
        let g = t.backward(c).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 3.0 + 4.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(2.0));
        let k = t.constant(Tensor::scalar(5.0));
        let y = t.mul(x, k).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(k).is_none());
        assert_eq!(g.get(x).unwrap().item(), 5.0);
    }

    #[test]
    fn l1_subgradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let a = t.param(t2(1, 2, &[1.0, 2.0]));
        let b = t.param(t2(1, 2, &[1.0, 3.0]));
        let d = t.grouped_l1(a, b, 1, 2, 1).unwrap();
        assert_eq!(t.value(d).data(), &[1.0]);
        let s = t.sum(d);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.0, -1.0]);
        assert_eq!(g.get(b).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn straight_through_forwards_hard_value() {
        let mut t = Tape::new();
        let logits = t.param(t2(1, 3, &[0.1, 0.5, -0.2]));
        let soft = t.scaled_softmax(logits, 1.0).unwrap();
        let st = t.straight_through(t2(1, 3, &[0.0, 1.0, 0.0]), soft).unwrap();
        assert_eq!(t.value(st).data(), &[0.0, 1.0, 0.0]);
        let w = t.constant(t2(3, 1, &[1.0, 2.0, 3.0]));
        let y = t.matmul(st, w).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert!(g.get(logits).unwrap().data().iter().any(|v| v.abs() > 1e-6));
    }

    #[test]
    fn l2_norm_at_origin_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![0.0, 0.0]));
        let n = t.l2_norm(x);
        assert_eq!(t.value(n).item(), 0.0);
        let g = t.backward(n).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, &[4, 5]);
        let w = random(&mut rng, &[5, 3]);
        let mut t = Tape::new();
        let xv = t.constant(x);
        let wv = t.param(w);
        let h = t.matmul(xv, wv).unwrap();
        let h = t.tanh(h);
        let y = t.scaled_softmax(h, 2.0).unwrap();
        let l = t.log(y);
        let s = t.mean(l);
        let g1 = t.backward(s).unwrap();
        let g2 = t.backward(s).unwrap();
        let bits = |g: &Gradients| -> Vec<u64> {
            g.get(wv).unwrap().data().iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(bits(&g1), bits(&g2));
    }

    type Prim = fn(&mut Tape, &[Var]) -> crate::error::Result<Var>;

    /// Every differentiable primitive on random small shapes, 20 seeds each.
    #[test]
    fn primitives_pass_finite_differences() {
        let cases: Vec<(&str, Prim, usize)> = vec![
            ("affine", |t, v| {
                let y = t.affine(v[0], v[1], v[2])?;
                let y = t.tanh(y);
                Ok(t.sum(y))
            }, 3),
            ("tanh", |t, v| { let y = t.tanh(v[0]); Ok(t.sum(y)) }, 1),
            ("sigmoid", |t, v| { let y = t.sigmoid(v[0]); Ok(t.sum(y)) }, 1),
            ("exp", |t, v| { let y = t.exp(v[0]); Ok(t.sum(y)) }, 1),
            ("scaled_softmax", |t, v| {
                let y = t.scaled_softmax(v[0], 1.7)?;
                let w = t.mul(y, v[1])?;
                Ok(t.sum(w))
            }, 2),
            ("log_scaled_softmax", |t, v| {
                let y = t.log_scaled_softmax(v[0], 0.6)?;
                let w = t.mul(y, v[1])?;
                Ok(t.sum(w))
            }, 2),
            ("l1", |t, v| {
                let d = t.grouped_l1(v[0], v[1], 1, 1, v_cols(t, v[0]))?;
                let e = t.scale(d, -1.0);
                let e = t.exp(e);
                Ok(t.sum(e))
            }, 2),
            ("concat", |t, v| {
                let c = t.concat_cols(&[v[0], v[1]])?;
                let c = t.tanh(c);
                let c2 = t.mul(c, c)?;
                Ok(t.sum(c2))
            }, 2),
            ("mean", |t, v| {
                let m = t.mean_axis(v[0], 0)?;
                let m = t.exp(m);
                Ok(t.mean(m))
            }, 1),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0xA11CE);
        for (name, f, arity) in cases {
            for seed in 0..20 {
                let rows = rng.random_range(1..=8);
                let cols = rng.random_range(1..=8);
                let inner = rng.random_range(1..=8);
                let params: Vec<Tensor> = match (name, arity) {
                    ("affine", _) => vec![
                        random(&mut rng, &[rows, inner]),
                        random(&mut rng, &[inner, cols]),
                        random(&mut rng, &[cols]),
                    ],
                    (_, 1) => vec![random(&mut rng, &[rows, cols])],
                    ("concat", _) => vec![
                        random(&mut rng, &[rows, cols]),
                        random(&mut rng, &[rows, inner]),
                    ],
                    ("l1", _) => vec![
                        random(&mut rng, &[rows, cols]),
                        random(&mut rng, &[inner, cols]),
                    ],
                    _ => vec![random(&mut rng, &[rows, cols]), random(&mut rng, &[rows, cols])],
                };
                let err = finite_difference_check(f, &params, 1e-5).unwrap();
                assert!(err < 1e-4, "{name} seed {seed}: rel err {err}");
            }
        }
    }

    fn v_cols(t: &Tape, v: Var) -> usize {
        t.value(v).cols()
    }

    #[test]
    fn log_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = random(&mut rng, &[3, 4]).map(|v| v.abs() + 0.5);
            let err = finite_difference_check(
                |t, v| {
                    let y = t.log(v[0]);
                    Ok(t.sum(y))
                },
                &[x],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4);
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            rows in 1usize..5,
            data in proptest::collection::vec(-50.0f64..50.0, 1..40),
            beta in 0.01f64..10.0,
        ) {
            let cols = data.len().div_ceil(rows).max(1);
            let mut d = data.clone();
            d.resize(rows * cols, 0.3);
            let x = Tensor::new(vec![rows, cols], d).unwrap();
            let y = softmax_rows(&x, beta);
            for r in 0..rows {
                let s: f64 = y.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn softmax_shift_invariant(
            data in proptest::collection::vec(-5.0f64..5.0, 2..10),
            shift in -20.0f64..20.0,
        ) {
            let n = data.len();
            let x = Tensor::new(vec![1, n], data.clone()).unwrap();
            let xs = x.map(|v| v + shift);
            let a = softmax_rows(&x, 1.3);
            let b = softmax_rows(&xs, 1.3);
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }

        #[test]
        fn softmax_is_monotone(data in proptest::collection::vec(-5.0f64..5.0, 2..10)) {
            let n = data.len();
            let x = Tensor::new(vec![1, n], data.clone()).unwrap();
            let y = softmax_rows(&x, 3.0);
            for i in 0..n {
                for j in 0..n {
                    if data[i] > data[j] {
                        prop_assert!(y.data()[i] >= y.data()[j]);
                    }
                }
            }
        }
    }
}
