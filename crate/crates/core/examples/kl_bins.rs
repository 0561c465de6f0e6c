//! Robust accuracy per bin of natural-vs-adversarial KL divergence.

use causaladv::attacks::AttackConfig;
use causaladv::config::RunConfig;
use causaladv::data::{synth_generate, SyntheticCausalConfig};
use causaladv::harness::{kl_bin_analysis, spearman, train, EvalOptions};
use causaladv::objectives::Variant;
use causaladv::Result;

fn main() -> Result<()> {
    let synth = SyntheticCausalConfig::default();
    let data = synth_generate(&synth, 3000, 1)?.data;
    let (tr, va) = data.split_tail(500)?;
    let model = train(&RunConfig::synthetic(Variant::Madry, synth.clone()), &tr, &va)?.best;

    let test = synth_generate(&synth, 2000, 2)?.data;
    let bins = kl_bin_analysis(&model, &test, &AttackConfig::pgd(0.1, 0.01, 20), 10, &EvalOptions::default())?;
    let (mut centers, mut accs) = (Vec::new(), Vec::new());
    for b in &bins {
        let acc = b.robust_accuracy.map_or("-".to_string(), |a| format!("{a:.3}"));
        println!("[{:.4}, {:.4}] n={:4} robust {acc}", b.lo, b.hi, b.count);
        if let Some(a) = b.robust_accuracy {
            centers.push(0.5 * (b.lo + b.hi));
            accs.push(a);
        }
    }
    println!("spearman(KL, robust accuracy) = {:.3}", spearman(&centers, &accs));
    Ok(())
}
