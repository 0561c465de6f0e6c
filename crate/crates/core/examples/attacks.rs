//! FGSM, PGD and CW-margin PGD against a model trained on synthetic data.

use causaladv::attacks::{accuracy, fgsm, pgd, AttackConfig, LossKind};
use causaladv::config::RunConfig;
use causaladv::data::{synth_generate, SyntheticCausalConfig};
use causaladv::harness::train;
use causaladv::objectives::Variant;
use causaladv::Result;

fn main() -> Result<()> {
    let synth = SyntheticCausalConfig::default();
    let mut cfg = RunConfig::synthetic(Variant::Madry, synth.clone());
    cfg.epochs = 5;
    let data = synth_generate(&synth, 2000, 1)?.data;
    let (tr, va) = data.split_tail(500)?;
    let model = train(&cfg, &tr, &va)?.best;

    let test = synth_generate(&synth, 1000, 2)?.data;
    let (x, y) = (&test.x, &test.y[..]);
    println!("natural  {:.3}", accuracy(&model, x, y)?);
    for eps in [0.05, 0.1, 0.2] {
        let f = fgsm(&model, x, y, eps)?;
        let p = pgd(&model, x, y, &AttackConfig::pgd(eps, eps / 4.0, 20))?;
        let c = pgd(&model, x, y, &AttackConfig::pgd(eps, eps / 4.0, 20).with_loss(LossKind::CwMargin))?;
        println!(
            "eps {eps:.2}: fgsm {:.3}  pgd-20 {:.3}  cw-20 {:.3}  (max |delta| {:.3})",
            accuracy(&model, &f.x_adv, y)?,
            accuracy(&model, &p.x_adv, y)?,
            accuracy(&model, &c.x_adv, y)?,
            p.linf(x)
        );
    }
    Ok(())
}
