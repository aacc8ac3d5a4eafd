//! Dense tensors, reverse-mode differentiation and seeded randomness.
//!
//! The free functions here evaluate single ops on plain tensors without
//! recording gradients; models build on [`Graph`] directly.

mod gradcheck;
mod graph;
mod params;
mod real;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, Var, LAYER_NORM_EPS};
pub use params::Params;
pub use real::{gemm, MatMut, MatRef, Real};
pub use rng::{RngSnapshot, RngState};
pub use tensor::Tensor;

use crate::error::Result;

pub fn matmul<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = g.matmul(va, vb)?;
    Ok(g.value(out).clone())
}

pub fn softmax_lastaxis<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = g.softmax(v);
    g.value(out).clone()
}

pub fn layer_norm<R: Real>(x: &Tensor<R>, gain: &Tensor<R>, bias: &Tensor<R>) -> Result<Tensor<R>> {
    let mut g = Graph::new();
    let (vx, vg, vb) = (g.constant(x.clone()), g.constant(gain.clone()), g.constant(bias.clone()));
    let out = g.layer_norm(vx, vg, vb)?;
    Ok(g.value(out).clone())
}

/// Single-head attention `softmax(q kᵀ/√d + mask) v`.
pub fn attention<R: Real>(q: &Tensor<R>, k: &Tensor<R>, v: &Tensor<R>, mask: Option<&Tensor<R>>) -> Result<Tensor<R>> {
    let mut g = Graph::new();
    let (vq, vk, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = g.attention(vq, vk, vv, mask, 1)?;
    Ok(g.value(out).clone())
}

/// Uniform `±sqrt(6 / (fan_in + fan_out))` initialization for a `[fan_in × fan_out]` weight.
pub fn xavier<R: Real>(rng: &mut RngState, fan_in: usize, fan_out: usize) -> Tensor<R> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    rng.uniform_tensor(vec![fan_in, fan_out], -a, a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_selection() {
        let eye = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let m = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&eye, &m).unwrap(), m);
        let sel = matmul(&t(&[&[1.0, 0.0]]), &t(&[&[5.0], &[7.0]])).unwrap();
        assert_eq!(sel.data(), &[5.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::<f64>::zeros(vec![2, 3]), &Tensor::zeros(vec![2, 3])).unwrap_err();
        match err {
            Error::Shape { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err_msg_has_shapes());
    }

    fn err_msg_has_shapes() -> bool {
        let e = matmul(&Tensor::<f64>::zeros(vec![1, 4]), &Tensor::zeros(vec![3, 2])).unwrap_err();
        let s = e.to_string();
        s.contains("[1, 4]") && s.contains("[3, 2]")
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = RngState::new(11);
        let mut p = Params::<f64>::new();
        p.insert("a", rng.normal_tensor(vec![3, 4]));
        p.insert("b", rng.normal_tensor(vec![4, 2]));
        let w = rng.normal_tensor::<f64>(vec![3, 2]);
        let rep = grad_check(&p, 1e-5, None, |g, p| {
            let a = g.param(p, "a")?;
            let b = g.param(p, "b")?;
            let y = g.matmul(a, b)?;
            g.weighted_sum(y, w.data())
        })
        .unwrap();
        assert!(rep.max_rel_err <= 1e-5, "{rep:?}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_lastaxis(&t(&[&[0.0, 0.0]]));
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_lastaxis(&t(&[&[1000.0, 1000.0]]));
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_lastaxis(&t(&[&[0.0, 3f64.ln()]]));
        assert!((s.data()[0] - 0.25).abs() < 1e-12);
        assert!((s.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::<f64>::ones(vec![3]);
        let zero = Tensor::<f64>::zeros(vec![3]);
        let c = layer_norm(&t(&[&[0.1, 0.1, 0.1]]), &one, &zero).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0, 0.0]);

        let y = layer_norm(&t(&[&[1.0, -1.0]]), &Tensor::ones(vec![2]), &Tensor::zeros(vec![2])).unwrap();
        // var = 1, so only the epsilon perturbs the unit result.
        let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((y.data()[0] - expect).abs() < 1e-12 && (y.data()[1] + expect).abs() < 1e-12);
        assert!((y.data()[0] - 1.0).abs() < 1e-5);

        let b = Tensor::from_rows(&[&[0.3, -2.0, 7.0]]).unwrap();
        let y = layer_norm(&t(&[&[4.0, -9.0, 2.5], &[1.0, 1.5, 0.0]]), &zero, &b.clone().reshape(vec![3]).unwrap()).unwrap();
        assert_eq!(y.row(0), b.data());
        assert_eq!(y.row(1), b.data());
    }

    #[test]
    fn layer_norm_rejects_mismatched_gain() {
        assert!(layer_norm(&Tensor::<f64>::zeros(vec![2, 3]), &Tensor::ones(vec![2]), &Tensor::zeros(vec![3])).is_err());
    }

    #[test]
    fn attention_single_key_returns_value_row() {
        let mut rng = RngState::new(3);
        let q = rng.normal_tensor::<f64>(vec![5, 4]);
        let k = rng.normal_tensor::<f64>(vec![1, 4]);
        let v = rng.normal_tensor::<f64>(vec![1, 4]);
        let out = attention(&q, &k, &v, None).unwrap();
        for r in 0..5 {
            for (a, b) in out.row(r).iter().zip(v.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_mask_selects_one_key() {
        let mut rng = RngState::new(4);
        let q = rng.normal_tensor::<f64>(vec![2, 3]);
        let k = rng.normal_tensor::<f64>(vec![4, 3]);
        let v = rng.normal_tensor::<f64>(vec![4, 3]);
        let mut mask = Tensor::full(vec![2, 4], f64::NEG_INFINITY);
        mask.data_mut()[2] = 0.0;
        mask.data_mut()[4 + 2] = 0.0;
        let out = attention(&q, &k, &v, Some(&mask)).unwrap();
        assert_eq!(out.row(0), v.row(2));
        assert_eq!(out.row(1), v.row(2));
    }

    #[test]
    fn attention_two_by_two_matches_hand_evaluation() {
        let q = t(&[&[1.0, 0.0], &[0.0, 2.0]]);
        let k = t(&[&[1.0, 1.0], &[0.0, -1.0]]);
        let v = t(&[&[1.0, 2.0], &[3.0, 5.0]]);
        let out = attention(&q, &k, &v, None).unwrap();
        let s = 1.0 / 2f64.sqrt();
        // Row 0 scores: [1, 0]·s; row 1: [2, -2]·s.
        for (r, scores) in [[s, 0.0], [2.0 * s, -2.0 * s]].iter().enumerate() {
            let e0 = scores[0].exp();
            let e1 = scores[1].exp();
            let (w0, w1) = (e0 / (e0 + e1), e1 / (e0 + e1));
            let expect = [w0 * 1.0 + w1 * 3.0, w0 * 2.0 + w1 * 5.0];
            assert!((out.row(r)[0] - expect[0]).abs() < 1e-12);
            assert!((out.row(r)[1] - expect[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_all_masked_row_is_an_error() {
        let q = Tensor::<f64>::zeros(vec![2, 2]);
        let k = Tensor::<f64>::zeros(vec![3, 2]);
        let mut mask = Tensor::zeros(vec![2, 3]);
        for j in 0..3 {
            mask.data_mut()[3 + j] = f64::NEG_INFINITY;
        }
        assert!(matches!(
            attention(&q, &k, &k, Some(&mask)),
            Err(Error::DegenerateAttention { row: 1 })
        ));
    }

    #[test]
    fn grad_check_quadratic_and_constant() {
        let mut p = Params::<f64>::new();
        p.insert("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let mut g = Graph::new();
        let x = g.param(&p, "x").unwrap();
        let sq = g.square(x);
        let l = g.sum(sq);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
        let rep = grad_check(&p, 1e-4, None, |g, p| {
            let x = g.param(p, "x")?;
            let sq = g.square(x);
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(rep.max_rel_err <= 1e-7, "{rep:?}");

        let mut g = Graph::new();
        let x = g.param(&p, "x").unwrap();
        let c = g.constant(Tensor::full(vec![1], 3.0));
        g.backward(c).unwrap();
        assert_eq!(g.param_grads()["x"].data(), &[0.0, 0.0]);
        assert!(g.grad(x).is_none());
        let rep = grad_check(&p, 1e-4, None, |g, p| {
            g.param(p, "x")?;
            Ok(g.constant(Tensor::full(vec![1], 3.0)))
        })
        .unwrap();
        assert_eq!(rep.max_rel_err, 0.0);
    }

    #[test]
    fn grad_check_rejects_bad_step_and_non_finite() {
        let mut p = Params::<f64>::new();
        p.insert("x", Tensor::new(vec![1], vec![0.0]).unwrap());
        let f = |g: &mut Graph<f64>, p: &Params<f64>| {
            let x = g.param(p, "x")?;
            Ok(g.sum(x))
        };
        assert!(matches!(grad_check(&p, 1e-2, None, f), Err(Error::Config(_))));
        p.insert("x", Tensor::new(vec![1], vec![f64::NAN]).unwrap());
        match grad_check(&p, 1e-4, None, f) {
            Err(Error::NonFinite { name }) => assert_eq!(name, "loss"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shared_parameter_gradients_accumulate() {
        let mut p = Params::<f64>::new();
        p.insert("w", Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let mut g = Graph::new();
        let a = g.param(&p, "w").unwrap();
        let b = g.param(&p, "w").unwrap();
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[6.0]);
    }

    /// Builds a random composite of every op and returns its FD check.
    fn all_ops_check(seed: u64) -> GradCheckReport {
        let mut rng = RngState::new(seed);
        let (m, c) = (2 + rng.below(3), 2 + 2 * rng.below(2));
        let mut p = Params::<f64>::new();
        p.insert("x", rng.normal_tensor(vec![m, c]));
        p.insert("w", rng.normal_tensor(vec![c, c]));
        p.insert("row", rng.normal_tensor(vec![c]));
        p.insert("gain", rng.normal_tensor(vec![c]));
        p.insert("bias", rng.normal_tensor(vec![c]));
        p.insert("kv", rng.normal_tensor(vec![3, c]));
        let mut mask = Tensor::<f64>::zeros(vec![m, 3]);
        mask.data_mut()[0] = f64::NEG_INFINITY;
        let weights = rng.normal_tensor::<f64>(vec![m * c]);
        grad_check(&p, 1e-5, None, |g, p| {
            let x = g.param(p, "x")?;
            let w = g.param(p, "w")?;
            let row = g.param(p, "row")?;
            let kv = g.param(p, "kv")?;
            let h = g.matmul(x, w)?;
            let h = g.add_row(h, row)?;
            let h = g.silu(h);
            let gain = g.param(p, "gain")?;
            let bias = g.param(p, "bias")?;
            let ln = g.layer_norm(h, gain, bias)?;
            let mr = g.mul_row(ln, row)?;
            let sm = g.softmax(mr);
            let prod = g.mul(sm, h)?;
            let diff = g.sub(prod, x)?;
            let att = g.attention(diff, kv, kv, Some(&mask), 2)?;
            let nt = g.matmul_nt(att, kv)?;
            let both = g.concat_cols(&[att, nt])?;
            let back = g.slice_cols(both, 1, c)?;
            let stacked = g.concat_rows(&[back, x])?;
            let top = g.slice_rows(stacked, 0, m)?;
            let rep = g.repeat_rows(top, 2)?;
            let pooled = g.mean_rows(rep);
            let r = g.reshape(pooled, &[c])?;
            let scaled = g.scale(r, 0.7);
            let shifted = g.add_scalar(scaled, 0.2);
            let sq = g.square(shifted);
            let s1 = g.sum(sq);
            let s2 = g.weighted_sum(top, weights.data())?;
            let both = g.add(s1, s2)?;
            Ok(g.mean(both))
        })
        .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn every_op_backward_matches_finite_differences(seed in 0u64..10_000) {
            let rep = all_ops_check(seed);
            prop_assert!(rep.max_rel_err <= 1e-4, "{:?}", rep);
        }

        #[test]
        fn softmax_rows_sum_to_one(xs in proptest::collection::vec(-1e4f64..1e4, 1..40)) {
            let n = xs.len();
            let x32 = Tensor::<f32>::new(vec![1, n], xs.iter().map(|&v| v as f32).collect()).unwrap();
            let s = softmax_lastaxis(&x32);
            let total: f64 = s.data().iter().map(|&v| v as f64).sum();
            prop_assert!((total - 1.0).abs() <= 1e-6);
            prop_assert!(s.data().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn ops_are_deterministic(seed in 0u64..1000) {
            let a = all_ops_check(seed);
            let b = all_ops_check(seed);
            prop_assert_eq!(a.max_rel_err.to_bits(), b.max_rel_err.to_bits());
        }
    }
}
