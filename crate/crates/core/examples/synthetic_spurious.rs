//! A naturally trained classifier picks up the style/label association of the
//! synthetic data; flipping the association at test time exposes it.

use causaladv::attacks::AttackConfig;
use causaladv::config::RunConfig;
use causaladv::data::{flip_association, mutual_information, synth_generate, SyntheticCausalConfig};
use causaladv::harness::{natural_accuracy, train, EvalOptions};
use causaladv::objectives::{conditional_association_gap, Variant};
use causaladv::Result;

fn main() -> Result<()> {
    let synth = SyntheticCausalConfig::default();
    let train_ds = synth_generate(&synth, 4000, 1)?;
    let test = synth_generate(&synth, 2000, 2)?;
    let flipped = flip_association(&test)?;
    let styles = test.data.styles.clone().expect("synthetic data has styles");
    println!("I(style; label) = {:.3} nats", mutual_information(&styles, &test.data.y));

    let mut cfg = RunConfig::synthetic(Variant::Madry, synth);
    cfg.train_attack = AttackConfig::fgsm(0.0);
    cfg.val_attack = AttackConfig::fgsm(0.0);
    let (tr, va) = train_ds.data.split_tail(500)?;
    let model = train(&cfg, &tr, &va)?.best;

    let opts = EvalOptions::default();
    println!("accuracy            {:.3}", natural_accuracy(&model, &test.data, &opts)?);
    println!("accuracy (flipped)  {:.3}", natural_accuracy(&model, &flipped.data, &opts)?);

    let attack = AttackConfig::pgd(0.1, 0.025, 20);
    for b in conditional_association_gap(&model, &test.data.x, &test.data.y, Some(&styles), &attack)? {
        println!(
            "style bucket {}: n={:4} natural CE {:.3} adversarial CE {:.3} gap {:.3}",
            b.bucket, b.count, b.natural_ce, b.adversarial_ce, b.gap()
        );
    }
    Ok(())
}
