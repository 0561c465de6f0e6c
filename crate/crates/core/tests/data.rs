use causaladv::checkpoint::{load_synth, save_synth};
use causaladv::data::{
    encode_pixels, flip_association, load_idx, mutual_information, synth_generate, write_idx_images, write_idx_labels,
    SyntheticCausalConfig,
};
use proptest::prelude::*;

fn bucket_agreement(rho: f64, n: usize) -> f64 {
    let ds = synth_generate(&SyntheticCausalConfig::default().with_rho(rho), n, 3).unwrap();
    let s = ds.data.styles.unwrap();
    s.iter().zip(&ds.data.y).filter(|(a, b)| a == b).count() as f64 / n as f64
}

#[test]
fn association_strength_follows_rho() {
    // with probability rho the style bucket is pinned to the label, otherwise it
    // is one of 4 equiprobable buckets: agreement = rho + (1 - rho) / 4
    for rho in [0.0, 0.5, 0.9] {
        let expect = rho + (1.0 - rho) / 4.0;
        assert!((bucket_agreement(rho, 8000) - expect).abs() < 0.02, "rho {rho}");
    }
}

#[test]
fn synthetic_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_generate(&SyntheticCausalConfig::default(), 50, 4).unwrap();
    let path = dir.path().join("s.cadv");
    save_synth(&path, &ds).unwrap();
    assert_eq!(load_synth(&path).unwrap(), ds);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn idx_round_trip(pixels in prop::collection::vec(any::<u8>(), 2 * 3 * 4), labels in prop::collection::vec(0u8..10, 2)) {
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = (dir.path().join("i"), dir.path().join("l"));
        write_idx_images(&i, &pixels, 2, 3, 4).unwrap();
        write_idx_labels(&l, &labels).unwrap();
        let d = load_idx(&i, &l).unwrap();
        prop_assert_eq!(d.x.shape(), &[2, 1, 3, 4]);
        prop_assert_eq!(encode_pixels(&d.x), pixels);
        prop_assert_eq!(d.y, labels.iter().map(|&v| v as usize).collect::<Vec<_>>());
    }

    #[test]
    fn generation_is_seeded_and_bounded(seed in 0u64..10_000, rho in -1.0f64..1.0) {
        let cfg = SyntheticCausalConfig::default().with_rho(rho);
        let a = synth_generate(&cfg, 40, seed).unwrap();
        prop_assert_eq!(&a, &synth_generate(&cfg, 40, seed).unwrap());
        prop_assert!(a.data.x.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(a.data.y.iter().all(|&y| y < cfg.classes));
    }

    #[test]
    fn flip_keeps_content(seed in 0u64..10_000) {
        let a = synth_generate(&SyntheticCausalConfig::default(), 30, seed).unwrap();
        let f = flip_association(&a).unwrap();
        prop_assert_eq!(&f.content, &a.content);
        prop_assert_eq!(&f.data.y, &a.data.y);
        prop_assert_eq!(f.cfg.rho, -a.cfg.rho);
    }

    #[test]
    fn mutual_information_bounds(a in prop::collection::vec(0usize..4, 50), b in prop::collection::vec(0usize..4, 50)) {
        let mi = mutual_information(&a, &b);
        prop_assert!(mi >= -1e-12);
        prop_assert!(mi <= mutual_information(&a, &a) + 1e-12);
    }
}
