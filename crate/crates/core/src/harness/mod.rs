//! Training loop, robustness evaluation and diagnostics.

pub mod diagnostics;
pub mod eval;
pub mod metrics;
pub mod optim;
pub mod train;

pub use diagnostics::{
    kl_bin_analysis, obfuscation_checklist, overfitting_curve, spearman, ChecklistConfig, ChecklistReport, KlBin,
    OverfitSummary,
};
pub use eval::{
    batch_seed, evaluate_robustness, map_batches, natural_accuracy, robust_accuracy, AttackResult, EvalOptions,
    RobustnessReport,
};
pub use metrics::{MetricLog, MetricRow, CSV_HEADER};
pub use optim::{lr_at, Sgd};
pub use train::{train, train_with, TrainOutput};

use crate::config::{DatasetId, RunConfig};
use crate::data::{data_root, load_mnist, synth_generate, Dataset};
use crate::error::{Error, Result};

/// Seed offset of the synthetic evaluation split.
pub const SYNTH_TEST_STREAM: u64 = 0x7e57;

/// Train, validation and test splits in 64-bit precision. Training takes the
/// first `train_samples` rows of the training split and validation the
/// `validation_size` rows after them; test is the head of the test split.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset<f64>,
    pub val: Dataset<f64>,
    pub test: Dataset<f64>,
}

pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let (full_train, full_test) = match cfg.dataset.id {
        DatasetId::Mnist => {
            let root = data_root();
            (load_mnist(&root, true)?, load_mnist(&root, false)?)
        }
        DatasetId::Synthetic => {
            let synth = cfg
                .dataset
                .synthetic
                .as_ref()
                .ok_or_else(|| Error::Config("synthetic dataset needs a [dataset.synthetic] table".into()))?;
            let n_train = cfg.dataset.train_samples.unwrap_or(4000);
            let n_test = cfg.dataset.test_samples.unwrap_or(2000);
            (
                synth_generate(synth, n_train + cfg.validation_size, cfg.seed)?.data,
                synth_generate(synth, n_test, cfg.seed ^ SYNTH_TEST_STREAM)?.data,
            )
        }
    };
    let head = |d: Dataset<f64>, n: Option<usize>| match n {
        Some(n) if n < d.len() => d.slice(0, n),
        _ => d,
    };
    let all = head(full_train, cfg.dataset.train_samples.map(|n| n + cfg.validation_size));
    let (train, val) = all.split_tail(cfg.validation_size)?;
    Ok(Splits {
        train,
        val,
        test: head(full_test, cfg.dataset.test_samples),
    })
}
