use causaladv::causal_align::{
    gaussian_softmax_all, mc_style_ce, orthogonal_style_map, orthogonality_residual, realign_style_map,
    style_ce_upper_bound, CovarianceEstimate, StyleDistribution,
};
use causaladv::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn instance() -> impl Strategy<Value = (Vec<f64>, Tensor<f64>, usize)> {
    (2usize..6, 1usize..5).prop_flat_map(|(k, ds)| {
        (
            prop::collection::vec(-2.0f64..2.0, ds),
            prop::collection::vec(-1.5f64..1.5, k * ds).prop_map(move |w| Tensor::new([k, ds], w).unwrap()),
            0..k,
        )
    })
}

/// Plain softmax cross-entropy of `W_g mu` for class `y`.
fn exact_ce(mu: &[f64], wg: &Tensor<f64>, y: usize) -> f64 {
    let ds = mu.len();
    let z: Vec<f64> = wg.data().chunks(ds).map(|r| r.iter().zip(mu).map(|(a, b)| a * b).sum()).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() - z[y]
}

#[test]
fn bound_dominates_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..10 {
        let wg = Tensor::uniform([4, 3], -1.0, 1.0, &mut rng);
        let dist = StyleDistribution::new(vec![0.3, -0.2, 1.0], 0.2 * i as f64).unwrap();
        let mc = mc_style_ce(&dist, &wg, 1, 20_000, i).unwrap();
        assert!(mc.mean <= style_ce_upper_bound(&dist, &wg, 1).unwrap() + 3.0 * mc.stderr);
    }
}

#[test]
fn fused_graph_op_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mu = Tensor::uniform([3, 5], -1.0, 1.0, &mut rng);
    let wg = Tensor::uniform([4, 5], -1.0, 1.0, &mut rng);
    let y = [0, 3, 2];
    let mut g = Graph::new();
    let (m, w) = (g.constant(mu.clone()), g.constant(wg.clone()));
    let rows = g.gaussian_style_ce(m, w, &y, 0.7).unwrap();
    for (i, v) in g.value(rows).data().iter().enumerate() {
        let dist = StyleDistribution::new(mu.data()[i * 5..(i + 1) * 5].to_vec(), 0.7).unwrap();
        assert!((v - style_ce_upper_bound(&dist, &wg, y[i]).unwrap()).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn zero_noise_bound_is_exact_ce((mu, wg, y) in instance()) {
        let b = style_ce_upper_bound(&StyleDistribution::new(mu.clone(), 0.0).unwrap(), &wg, y).unwrap();
        prop_assert!((b - exact_ce(&mu, &wg, y)).abs() < 1e-12);
    }

    #[test]
    fn bound_grows_with_noise((mu, wg, y) in instance(), s1 in 0.0f64..2.0, s2 in 0.0f64..2.0) {
        let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
        let b = |s| style_ce_upper_bound(&StyleDistribution::new(mu.clone(), s).unwrap(), &wg, y).unwrap();
        prop_assert!(b(lo) <= b(hi) + 1e-12);
        prop_assert!(b(lo) >= exact_ce(&mu, &wg, y) - 1e-12);
    }

    #[test]
    fn class_permutation_equivariance((mu, wg, y) in instance(), shift in 0usize..5, sigma in 0.0f64..2.0) {
        let k = wg.shape()[0];
        let ds = wg.shape()[1];
        let perm: Vec<usize> = (0..k).map(|j| (j + shift) % k).collect();
        let mut permuted = vec![0.0; k * ds];
        for (new, &old) in perm.iter().enumerate() {
            permuted[new * ds..(new + 1) * ds].copy_from_slice(&wg.data()[old * ds..(old + 1) * ds]);
        }
        let wp = Tensor::new([k, ds], permuted).unwrap();
        let new_y = perm.iter().position(|&o| o == y).unwrap();
        let dist = StyleDistribution::new(mu, sigma).unwrap();
        let a = style_ce_upper_bound(&dist, &wg, y).unwrap();
        let b = style_ce_upper_bound(&dist, &wp, new_y).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn raw_values_sum_to_at_most_one((mu, wg, _y) in instance(), sigma in 0.0f64..2.0) {
        let s = gaussian_softmax_all(&mu, &wg, sigma).unwrap();
        let raw: f64 = s.raw.iter().sum();
        let norm: f64 = s.normalized.iter().sum();
        prop_assert!(raw <= 1.0 + 1e-12);
        prop_assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn style_map_is_orthogonal(seed in 0u64..1000, d in 5usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 2;
        let wc = Tensor::uniform([k, d], -1.0, 1.0, &mut rng);
        let mut est = CovarianceEstimate::identity(d, 0.5, 0.1).unwrap();
        for _ in 0..3 {
            est.update(&Tensor::<f64>::uniform([16, d], -2.0, 2.0, &mut rng)).unwrap();
        }
        let ws = orthogonal_style_map(&wc, &est, d - k).unwrap();
        prop_assert!(orthogonality_residual(&ws, &wc, &est.cov) < 1e-9);
        prop_assert!(orthogonal_style_map(&wc, &est, d - k + 1).is_err());
    }

    #[test]
    fn realigned_map_is_orthonormal_and_orthogonal(seed in 0u64..1000, d in 5usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 2;
        let ds = d - k - 1;
        let est = CovarianceEstimate::identity(d, 0.5, 0.1).unwrap();
        let prev = orthogonal_style_map(&Tensor::uniform([k, d], -1.0, 1.0, &mut rng), &est, ds).unwrap();
        let wc = Tensor::uniform([k, d], -1.0, 1.0, &mut rng);
        let mut est2 = est.clone();
        est2.update(&Tensor::<f64>::uniform([16, d], -2.0, 2.0, &mut rng)).unwrap();
        let ws = realign_style_map(&prev, &wc, &est2).unwrap();
        prop_assert!(orthogonality_residual(&ws, &wc, &est2.cov) < 1e-9);
        let m = nalgebra::DMatrix::from_row_slice(ds, d, ws.data());
        prop_assert!((&m * m.transpose() - nalgebra::DMatrix::<f64>::identity(ds, ds)).abs().max() < 1e-9);
        // already valid maps are fixed points
        let again = realign_style_map(&ws, &wc, &est2).unwrap();
        prop_assert!(again.data().iter().zip(ws.data()).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn covariance_stays_symmetric_positive(seed in 0u64..1000, n in 2usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let mut est = CovarianceEstimate::identity(d, 0.9, 0.1).unwrap();
        est.update(&Tensor::<f64>::uniform([n, d], -1.0, 1.0, &mut rng)).unwrap();
        let c = est.cov.data();
        for i in 0..d {
            prop_assert!(c[i * d + i] > 0.0);
            for j in 0..d {
                prop_assert_eq!(c[i * d + j], c[j * d + i]);
            }
        }
        let m = nalgebra::DMatrix::from_row_slice(d, d, c);
        prop_assert!(m.symmetric_eigenvalues().min() > 0.0);
    }
}
