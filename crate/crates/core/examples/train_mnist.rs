//! Desk-scale MNIST adversarial training.
//!
//! `cargo run --release --example train_mnist -- causaladv_m epochs=3`
//! Extra arguments are dotted-key overrides of the run configuration.

use causaladv::attacks::AttackConfig;
use causaladv::config::RunConfig;
use causaladv::harness::{load_splits, natural_accuracy, robust_accuracy, train_with, EvalOptions};
use causaladv::objectives::Variant;
use causaladv::Result;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let variant = args
        .first()
        .and_then(|name| Variant::ALL.into_iter().find(|v| v.name() == name))
        .unwrap_or(Variant::CausaladvM);
    let overrides: Vec<String> = args.iter().filter(|a| a.contains('=')).cloned().collect();
    let cfg = RunConfig::mnist(variant).with_overrides(&overrides)?;
    let splits = load_splits(&cfg)?;
    let out = train_with(&cfg, &splits.train.cast::<f32>(), &splits.val.cast::<f32>(), |r| {
        println!(
            "epoch {:>2} loss {:.3} natural {:.3} robust {:.3} ({:.0}s)",
            r.epoch, r.total_loss, r.nat_val_acc, r.rob_val_acc, r.seconds
        )
    })?;
    let test = splits.test.cast::<f32>();
    let opts = EvalOptions::default();
    for (name, model) in [("best", &out.best), ("last", &out.last)] {
        println!(
            "{name}: test natural {:.4}  pgd-40 {:.4}",
            natural_accuracy(model, &test, &opts)?,
            robust_accuracy(model, &test, &AttackConfig::mnist_pgd40(), &opts)?
        );
    }
    Ok(())
}
