//! Gradient-masking checklist on adversarially trained synthetic-data models,
//! with an independently seeded surrogate for the transfer check.

use causaladv::config::RunConfig;
use causaladv::data::{synth_generate, SyntheticCausalConfig};
use causaladv::harness::{obfuscation_checklist, train, ChecklistConfig, EvalOptions};
use causaladv::objectives::Variant;
use causaladv::Result;

fn main() -> Result<()> {
    let synth = SyntheticCausalConfig::default();
    let data = synth_generate(&synth, 3000, 1)?.data;
    let (tr, va) = data.split_tail(500)?;
    let mut cfg = RunConfig::synthetic(Variant::CausaladvM, synth.clone());
    let model = train(&cfg, &tr, &va)?.best;
    cfg.seed = 1;
    let surrogate = train(&cfg, &tr, &va)?.best;

    let test = synth_generate(&synth, 1000, 2)?.data;
    let check = ChecklistConfig {
        epsilon: 0.1,
        step_size: 0.01,
        steps: 20,
        strong_steps: 100,
        seed: 0,
    };
    let report = obfuscation_checklist(&model, &surrogate, &test, &check, &EvalOptions::default())?;
    for line in report.lines() {
        println!("{line}");
    }
    Ok(())
}
