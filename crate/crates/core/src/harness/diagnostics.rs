use serde::{Deserialize, Serialize};

use super::eval::{batch_seed, map_batches, robust_accuracy, EvalOptions};
use super::metrics::MetricLog;
use crate::attacks::{correct_count, pgd, transfer_attack, AttackConfig, LossKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::objectives::kl_per_row;
use crate::real::Real;

/// Attack settings of the gradient-masking checklist.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChecklistConfig {
    pub epsilon: f64,
    pub step_size: f64,
    /// Steps of the reference iterative attack.
    pub steps: usize,
    /// Steps of the stronger attack.
    pub strong_steps: usize,
    pub seed: u64,
}

impl ChecklistConfig {
    /// PGD-20 against PGD-100 with step `2.5 epsilon / 20`.
    pub fn for_epsilon(epsilon: f64) -> Self {
        ChecklistConfig {
            epsilon,
            step_size: 2.5 * epsilon / 20.0,
            steps: 20,
            strong_steps: 100,
            seed: 0,
        }
    }

    pub fn mnist() -> Self {
        Self::for_epsilon(0.3)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub pass: bool,
    /// All compared accuracies equal because the attack budget is zero.
    pub degenerate: bool,
    pub evidence: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChecklistReport {
    pub natural: f64,
    pub fgsm: f64,
    pub pgd: f64,
    pub cw: f64,
    pub pgd_strong: f64,
    pub transfer: f64,
    /// Single-step attack weaker than the iterative one.
    pub single_step_weaker: CriterionResult,
    /// Black-box transfer weaker than white-box.
    pub black_box_weaker: CriterionResult,
    /// More iterations give lower accuracy.
    pub more_steps_stronger: CriterionResult,
}

impl ChecklistReport {
    pub fn all_pass(&self) -> bool {
        self.single_step_weaker.pass && self.black_box_weaker.pass && self.more_steps_stronger.pass
    }

    /// Three `name: PASS|FAIL (evidence)` lines.
    pub fn lines(&self) -> Vec<String> {
        [
            ("(a) fgsm > iterative", &self.single_step_weaker),
            ("(b) black-box > white-box", &self.black_box_weaker),
            ("(c) more steps < fewer steps", &self.more_steps_stronger),
        ]
        .into_iter()
        .map(|(name, c)| {
            let verdict = match (c.pass, c.degenerate) {
                (true, true) => "PASS (degenerate)",
                (true, false) => "PASS",
                (false, _) => "FAIL",
            };
            format!("{name}: {verdict} [{}]", c.evidence)
        })
        .collect()
    }
}

fn strictly_greater(a: f64, b: f64, zero_budget: bool, evidence: String) -> CriterionResult {
    if zero_budget {
        return CriterionResult {
            pass: true,
            degenerate: true,
            evidence,
        };
    }
    CriterionResult {
        pass: a > b,
        degenerate: false,
        evidence,
    }
}

/// Gradient-masking checks: (a) FGSM accuracy above iterative PGD, (b)
/// transfer from an independently trained surrogate above white-box PGD, (c)
/// PGD with more steps below PGD with fewer.
pub fn obfuscation_checklist<T: Real>(
    model: &Classifier<T>,
    surrogate: &Classifier<T>,
    data: &Dataset<T>,
    cfg: &ChecklistConfig,
    opts: &EvalOptions,
) -> Result<ChecklistReport> {
    let pgd_cfg = AttackConfig::pgd(cfg.epsilon, cfg.step_size, cfg.steps).with_seed(cfg.seed);
    let natural = super::eval::natural_accuracy(model, data, opts)?;
    let fgsm = robust_accuracy(model, data, &AttackConfig::fgsm(cfg.epsilon), opts)?;
    let pgd_acc = robust_accuracy(model, data, &pgd_cfg, opts)?;
    let cw = robust_accuracy(model, data, &pgd_cfg.clone().with_loss(LossKind::CwMargin), opts)?;
    let strong = robust_accuracy(model, data, &pgd_cfg.clone().with_steps(cfg.strong_steps), opts)?;
    let hits = map_batches(data.len(), opts.batch_size, opts.threads, |i, r| {
        let b = data.slice(r.start, r.end);
        let c = pgd_cfg.clone().with_seed(batch_seed(pgd_cfg.seed, i));
        Ok(transfer_attack(surrogate, model, &b.x, &b.y, &c)? * b.len() as f64)
    })?;
    let transfer = hits.iter().sum::<f64>() / data.len() as f64;
    let zero = cfg.epsilon == 0.0;
    let (k, ks) = (cfg.steps, cfg.strong_steps);
    Ok(ChecklistReport {
        natural,
        fgsm,
        pgd: pgd_acc,
        cw,
        pgd_strong: strong,
        transfer,
        single_step_weaker: strictly_greater(
            fgsm,
            pgd_acc,
            zero,
            format!("fgsm {:.2}% vs pgd-{k} {:.2}% vs cw-{k} {:.2}%", 100.0 * fgsm, 100.0 * pgd_acc, 100.0 * cw),
        ),
        black_box_weaker: strictly_greater(
            transfer,
            pgd_acc,
            zero,
            format!("black-box pgd-{k} {:.2}% vs white-box {:.2}%", 100.0 * transfer, 100.0 * pgd_acc),
        ),
        more_steps_stronger: strictly_greater(
            pgd_acc,
            strong,
            zero,
            format!("pgd-{ks} {:.2}% vs pgd-{k} {:.2}%", 100.0 * strong, 100.0 * pgd_acc),
        ),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Robust accuracy within the bin; `None` when empty.
    pub robust_accuracy: Option<f64>,
}

/// Splits samples into `n_bins` equal-width bins of `KL(h(x) || h(x_adv))`
/// over the observed range and reports robust accuracy per bin.
pub fn kl_bin_analysis<T: Real>(
    model: &Classifier<T>,
    data: &Dataset<T>,
    attack: &AttackConfig,
    n_bins: usize,
    opts: &EvalOptions,
) -> Result<Vec<KlBin>> {
    if data.is_empty() {
        return Err(Error::Invalid("empty dataset".into()));
    }
    if n_bins == 0 {
        return Err(Error::Invalid("need at least one bin".into()));
    }
    let per_batch = map_batches(data.len(), opts.batch_size, opts.threads, |i, r| {
        let b = data.slice(r.start, r.end);
        let adv = pgd(model, &b.x, &b.y, &attack.clone().with_seed(batch_seed(attack.seed, i)))?;
        let nat = model.logits(&b.x)?;
        let advz = model.logits(&adv.x_adv)?;
        let kl = kl_per_row(&nat, &advz)?;
        let hit: Vec<bool> = crate::models::argmax_rows(&advz).iter().zip(&b.y).map(|(p, y)| p == y).collect();
        Ok(kl.into_iter().zip(hit).collect::<Vec<_>>())
    })?;
    let rows: Vec<(f64, bool)> = per_batch.into_iter().flatten().collect();
    let lo = rows.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
    let hi = rows.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / n_bins as f64;
    let mut counts = vec![(0usize, 0usize); n_bins];
    for &(kl, hit) in &rows {
        let idx = if width > 0.0 {
            (((kl - lo) / width) as usize).min(n_bins - 1)
        } else {
            0
        };
        counts[idx].0 += 1;
        counts[idx].1 += usize::from(hit);
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, (count, hits))| KlBin {
            lo: lo + width * i as f64,
            hi: if i + 1 == n_bins { hi } else { lo + width * (i + 1) as f64 },
            count,
            robust_accuracy: (count > 0).then(|| hits as f64 / count as f64),
        })
        .collect())
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut out = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let r = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                out[k] = r;
            }
            i = j + 1;
        }
        out
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverfitSummary {
    pub best_epoch: usize,
    pub best_robust: f64,
    pub final_robust: f64,
    /// `best - final` robust validation accuracy.
    pub gap: f64,
}

pub fn overfitting_curve(log: &MetricLog) -> Result<OverfitSummary> {
    let rows = log.rows();
    let last = rows.last().ok_or_else(|| Error::Invalid("empty metric log".into()))?;
    let best = rows
        .iter()
        .fold(&rows[0], |b, r| if r.rob_val_acc > b.rob_val_acc { r } else { b });
    Ok(OverfitSummary {
        best_epoch: best.epoch,
        best_robust: best.rob_val_acc,
        final_robust: last.rob_val_acc,
        gap: best.rob_val_acc - last.rob_val_acc,
    })
}

/// Count of correct predictions on natural inputs, per batch helper for callers.
pub fn natural_hits<T: Real>(model: &Classifier<T>, data: &Dataset<T>) -> Result<usize> {
    Ok(correct_count(&model.logits(&data.x)?, &data.y))
}
