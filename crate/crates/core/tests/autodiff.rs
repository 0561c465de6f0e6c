mod common;

use causaladv::autodiff::{finite_diff_grad, relative_error};
use causaladv::{Error, Graph, Tensor};
use common::*;
use proptest::prelude::*;

fn vec_tensor(n: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-3.0f64..3.0, n).prop_map(Tensor::from_vec)
}

#[test]
fn every_op_matches_finite_differences() {
    for case in op_cases() {
        let err = check_op(&case, 5, 101).unwrap();
        if case.blocked {
            assert_eq!(err, 0.0, "{} must have a zero pullback", case.name);
        } else {
            assert!(err < 1e-4, "{}: relative error {err:.3e}", case.name);
        }
    }
}

#[test]
fn backward_needs_scalar_and_is_single_use() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
    let e = g.exp(x).unwrap();
    assert!(matches!(g.backward(e), Err(Error::NotScalar(_))));
    let s = g.sum(e).unwrap();
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::TapeConsumed)));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
    let c = g.constant(Tensor::from_vec(vec![3.0, 4.0]));
    let p = g.mul(x, c).unwrap();
    let s = g.sum(p).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_is_linear_in_the_loss(x in vec_tensor(6), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let grad = |wa: f64, wb: f64| {
            let mut g = Graph::new();
            let xn = g.leaf(x.clone());
            let e = g.exp(xn).unwrap();
            let f = g.sum(e).unwrap();
            let sq = g.mul(xn, xn).unwrap();
            let h = g.mean(sq).unwrap();
            let fa = g.scalar_mul(f, wa).unwrap();
            let hb = g.scalar_mul(h, wb).unwrap();
            let l = g.add(fa, hb).unwrap();
            g.backward(l).unwrap().take(xn).unwrap()
        };
        let combined = grad(a, b);
        let (ga, gb) = (grad(1.0, 0.0), grad(0.0, 1.0));
        for i in 0..6 {
            let expect = a * ga.data()[i] + b * gb.data()[i];
            prop_assert!((combined.data()[i] - expect).abs() < 1e-9 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn log_softmax_rows_normalize(x in vec_tensor(12)) {
        let mut g = Graph::new();
        let xn = g.constant(x.reshape([3, 4]).unwrap());
        let lp = g.log_softmax(xn).unwrap();
        for row in g.value(lp).data().chunks(4) {
            let total: f64 = row.iter().map(|v| v.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_shift_invariant(x in vec_tensor(4), c in -50.0f64..50.0) {
        let run = |t: Tensor<f64>| {
            let mut g = Graph::new();
            let xn = g.constant(t.reshape([1, 4]).unwrap());
            let lp = g.log_softmax(xn).unwrap();
            g.value(lp).clone()
        };
        let shifted = run(x.map(|v| v + c));
        prop_assert!(run(x).max_abs_diff(&shifted) < 1e-10);
    }

    #[test]
    fn composite_gradient_matches_fd(x in vec_tensor(8)) {
        let x = x.reshape([2, 4]).unwrap();
        let f = |t: &Tensor<f64>, g: &mut Graph<f64>, leaf: bool| {
            let xn = if leaf { g.leaf(t.clone()) } else { g.constant(t.clone()) };
            let m = xn;
            let lp = g.log_softmax(m).unwrap();
            let p = g.exp(lp).unwrap();
            let q = g.mul(p, m).unwrap();
            let s = g.sum(q).unwrap();
            (xn, s)
        };
        let mut g = Graph::new();
        let (xn, s) = f(&x, &mut g, true);
        let analytic = g.backward(s).unwrap().take(xn).unwrap();
        let numeric = finite_diff_grad(|t| {
            let mut g = Graph::new();
            let (_, s) = f(t, &mut g, false);
            Ok(g.value(s).item())
        }, &x, 1e-6).unwrap();
        prop_assert!(relative_error(&analytic, &numeric) < 1e-6);
    }
}
