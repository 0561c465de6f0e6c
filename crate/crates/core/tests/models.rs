use causaladv::models::{build_classifier, Classifier, NetworkSpec};
use causaladv::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn desk_network_shapes() {
    let m: Classifier<f32> = build_classifier(NetworkSpec::mnist_desk(), 0).unwrap();
    let x = Tensor::<f32>::uniform([2, 1, 28, 28], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    let (repr, logits) = m.eval(&x).unwrap();
    assert_eq!(repr.shape(), &[2, 128]);
    assert_eq!(logits.shape(), &[2, 10]);
    assert_eq!(m.style_map().shape(), &[64, 128]);
}

#[test]
fn precision_cast_is_close() {
    let m: Classifier<f64> = build_classifier(NetworkSpec::mlp(5, vec![7], 3), 2).unwrap();
    let x = Tensor::uniform([4, 5], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let a = m.logits(&x).unwrap();
    let b = m.cast::<f32>().logits(&x.cast()).unwrap().cast::<f64>();
    assert!(a.max_abs_diff(&b) < 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn batch_permutation_equivariance(seed in 0u64..500, n in 2usize..8, shift in 1usize..7) {
        let m: Classifier<f64> = build_classifier(NetworkSpec::mlp(5, vec![9, 6], 3), seed).unwrap();
        let x = Tensor::uniform([n, 5], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let a = m.logits(&x).unwrap().select_rows(&perm);
        let b = m.logits(&x.select_rows(&perm)).unwrap();
        prop_assert!(a.max_abs_diff(&b) == 0.0);
    }

    #[test]
    fn rows_are_independent(seed in 0u64..500) {
        let m: Classifier<f64> = build_classifier(NetworkSpec::mlp(4, vec![8], 3), seed).unwrap();
        let x = Tensor::uniform([5, 4], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 1));
        let full = m.logits(&x).unwrap();
        for i in 0..5 {
            let one = m.logits(&x.slice_rows(i, i + 1)).unwrap();
            prop_assert!(one.max_abs_diff(&full.slice_rows(i, i + 1)) < 1e-12);
        }
    }

    #[test]
    fn construction_is_deterministic(seed in 0u64..500) {
        let a: Classifier<f64> = build_classifier(NetworkSpec::mlp(4, vec![8], 3), seed).unwrap();
        let b: Classifier<f64> = build_classifier(NetworkSpec::mlp(4, vec![8], 3), seed).unwrap();
        prop_assert_eq!(a, b);
    }
}
