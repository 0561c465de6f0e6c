//! Monte Carlo style cross-entropy against its closed-form upper bound as the
//! style noise grows.

use causaladv::causal_align::{mc_style_ce, style_ce_upper_bound, StyleDistribution};
use causaladv::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let wg = Tensor::uniform([4, 6], -1.0, 1.0, &mut rng);
    let mean = vec![0.5, -1.0, 0.2, 0.0, 1.5, -0.3];
    println!("{:>6} {:>10} {:>10} {:>10}", "sigma", "mc", "stderr", "bound");
    for sigma in [0.0, 0.1, 0.5, 1.0, 2.0] {
        let dist = StyleDistribution::new(mean.clone(), sigma)?;
        let mc = mc_style_ce(&dist, &wg, 2, 100_000, 3)?;
        let bound = style_ce_upper_bound(&dist, &wg, 2)?;
        println!("{sigma:>6.1} {:>10.5} {:>10.5} {bound:>10.5}", mc.mean, mc.stderr);
    }
    Ok(())
}
