//! Best-versus-final robust validation accuracy of a long synthetic run.

use causaladv::config::RunConfig;
use causaladv::data::{synth_generate, SyntheticCausalConfig};
use causaladv::harness::{overfitting_curve, train};
use causaladv::objectives::Variant;
use causaladv::Result;

fn main() -> Result<()> {
    let synth = SyntheticCausalConfig::default();
    let data = synth_generate(&synth, 1500, 1)?.data;
    let (tr, va) = data.split_tail(500)?;
    for variant in [Variant::Madry, Variant::CausaladvM] {
        let mut cfg = RunConfig::synthetic(variant, synth.clone());
        cfg.epochs = 40;
        let out = train(&cfg, &tr, &va)?;
        let s = overfitting_curve(&out.log)?;
        println!(
            "{:<12} best epoch {:>2}  best robust {:.3}  final robust {:.3}  gap {:.3}",
            variant.name(),
            s.best_epoch,
            s.best_robust,
            s.final_robust,
            s.gap
        );
    }
    Ok(())
}
