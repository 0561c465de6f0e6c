//! Builds a style map orthogonal to the content head under an estimated
//! representation covariance.

use causaladv::causal_align::{orthogonal_style_map, orthogonality_residual, CovarianceEstimate};
use causaladv::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> Result<()> {
    let (d, k, ds) = (12, 3, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let wc = Tensor::uniform([k, d], -1.0, 1.0, &mut rng);

    // correlated representations: r = A z
    let a = Tensor::<f64>::uniform([d, d], -1.0, 1.0, &mut rng);
    let normal = Normal::new(0.0, 1.0).expect("valid");
    let mut est = CovarianceEstimate::identity(d, 0.9, 0.1)?;
    for _ in 0..50 {
        let z: Vec<f64> = (0..64 * d).map(|_| normal.sample(&mut rng)).collect();
        let batch: Vec<f64> = z
            .chunks(d)
            .flat_map(|zi| a.data().chunks(d).map(move |row| row.iter().zip(zi).map(|(p, q)| p * q).sum::<f64>()))
            .collect();
        est.update(&Tensor::new([64, d], batch)?)?;
    }

    let ws = orthogonal_style_map(&wc, &est, ds)?;
    println!("W_s shape {:?}", ws.shape());
    println!("max |W_s M W_c^T| = {:.3e}", orthogonality_residual(&ws, &wc, &est.cov));
    Ok(())
}
