use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::{adaptive_pgd, correct_count, pgd, AttackConfig, LossKind};
use crate::config::NamedAttack;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::objectives::ObjectiveSpec;
use crate::real::Real;

/// Seed of batch `index` derived from an attack seed.
pub fn batch_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Applies `f` to consecutive batches, fanned out over `threads` scoped
/// workers. Results come back in batch order whatever the thread count.
pub fn map_batches<R, F>(n: usize, batch_size: usize, threads: usize, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(usize, Range<usize>) -> Result<R> + Sync,
{
    let batch_size = batch_size.max(1);
    let batches: Vec<Range<usize>> = (0..n).step_by(batch_size).map(|s| s..(s + batch_size).min(n)).collect();
    let threads = threads.clamp(1, batches.len().max(1));
    if threads == 1 {
        return batches.into_iter().enumerate().map(|(i, r)| f(i, r)).collect();
    }
    let mut slots: Vec<Option<Result<R>>> = (0..batches.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let (f, batches) = (&f, &batches);
                s.spawn(move || {
                    (t..batches.len())
                        .step_by(threads)
                        .map(|i| (i, f(i, batches[i].clone())))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("evaluation worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every batch evaluated")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub name: String,
    pub config: AttackConfig,
    pub accuracy: f64,
}

/// Natural and per-attack accuracy of one checkpoint on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    /// `best` or `last` (or a free label).
    pub checkpoint: String,
    pub samples: usize,
    pub natural_accuracy: f64,
    pub attacks: Vec<AttackResult>,
}

impl RobustnessReport {
    pub fn accuracy(&self, name: &str) -> Option<f64> {
        self.attacks.iter().find(|a| a.name == name).map(|a| a.accuracy)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub batch_size: usize,
    pub threads: usize,
    /// Objective ascended by `adaptive_full` attacks.
    pub objective: Option<ObjectiveSpec>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            batch_size: 200,
            threads: 1,
            objective: None,
        }
    }
}

pub fn natural_accuracy<T: Real>(model: &Classifier<T>, data: &Dataset<T>, opts: &EvalOptions) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Invalid("empty evaluation split".into()));
    }
    let counts = map_batches(data.len(), opts.batch_size, opts.threads, |_, r| {
        let b = data.slice(r.start, r.end);
        Ok(correct_count(&model.logits(&b.x)?, &b.y))
    })?;
    Ok(counts.iter().sum::<usize>() as f64 / data.len() as f64)
}

/// Accuracy on adversarial examples from `cfg`, one derived seed per batch.
pub fn robust_accuracy<T: Real>(model: &Classifier<T>, data: &Dataset<T>, cfg: &AttackConfig, opts: &EvalOptions) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Invalid("empty evaluation split".into()));
    }
    let counts = map_batches(data.len(), opts.batch_size, opts.threads, |i, r| {
        let b = data.slice(r.start, r.end);
        let cfg = cfg.clone().with_seed(batch_seed(cfg.seed, i));
        let adv = if cfg.loss_kind == LossKind::AdaptiveFull {
            let spec = opts
                .objective
                .as_ref()
                .ok_or_else(|| Error::Invalid("adaptive attack needs the training objective".into()))?;
            adaptive_pgd(model, &b.x, &b.y, &cfg, spec)?
        } else {
            pgd(model, &b.x, &b.y, &cfg)?
        };
        Ok(correct_count(&model.logits(&adv.x_adv)?, &b.y))
    })?;
    Ok(counts.iter().sum::<usize>() as f64 / data.len() as f64)
}

pub fn evaluate_robustness<T: Real>(
    model: &Classifier<T>,
    data: &Dataset<T>,
    attacks: &[NamedAttack],
    checkpoint: &str,
    opts: &EvalOptions,
) -> Result<RobustnessReport> {
    let natural = natural_accuracy(model, data, opts)?;
    let attacks = attacks
        .iter()
        .map(|a| {
            Ok(AttackResult {
                name: a.name.clone(),
                config: a.config.clone(),
                accuracy: robust_accuracy(model, data, &a.config, opts)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RobustnessReport {
        checkpoint: checkpoint.to_string(),
        samples: data.len(),
        natural_accuracy: natural,
        attacks,
    })
}
