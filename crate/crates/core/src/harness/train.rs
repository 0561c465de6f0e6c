use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::eval::{batch_seed, natural_accuracy, robust_accuracy, EvalOptions};
use super::metrics::{MetricLog, MetricRow};
use super::optim::{lr_at, Sgd};
use crate::attacks::{pgd, AttackConfig};
use crate::autodiff::Graph;
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{build_classifier, Classifier};
use crate::objectives::{record, LossBreakdown};
use crate::real::Real;
use crate::tensor::Tensor;

const SHUFFLE_STREAM: u64 = 0x5eed_5eed_0000_0001;
const ATTACK_STREAM: u64 = 0x5eed_5eed_0000_0002;
const NOISE_STREAM: u64 = 0x5eed_5eed_0000_0003;

#[derive(Clone, Debug)]
pub struct TrainOutput<T: Real> {
    /// Model with the highest robust validation accuracy (earliest on ties).
    pub best: Classifier<T>,
    pub last: Classifier<T>,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub log: MetricLog,
}

impl<T: Real> TrainOutput<T> {
    pub fn best_row(&self) -> Option<&MetricRow> {
        self.log.rows().iter().find(|r| r.epoch == self.best_epoch)
    }
}

/// Trains from the configured seed. Prints nothing; `on_epoch` sees each row.
pub fn train<T: Real>(cfg: &RunConfig, train: &Dataset<T>, val: &Dataset<T>) -> Result<TrainOutput<T>> {
    train_with(cfg, train, val, |_| {})
}

pub fn train_with<T: Real>(
    cfg: &RunConfig,
    train: &Dataset<T>,
    val: &Dataset<T>,
    mut on_epoch: impl FnMut(&MetricRow),
) -> Result<TrainOutput<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let mut model: Classifier<T> = build_classifier(cfg.network.clone(), cfg.seed)?;
    let mut sgd = Sgd::new(&cfg.optimizer);
    let mut log = MetricLog::new();
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_robust = f64::NEG_INFINITY;
    let style = cfg.objective.effective_lambda() != 0.0;
    let attack = cfg.train_attack.clone().with_loss(cfg.objective.variant.inner_loss());
    let eval_opts = EvalOptions {
        batch_size: 200,
        threads: cfg.threads,
        objective: None,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        sgd.lr = lr_at(&cfg.optimizer, epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(batch_seed(cfg.seed ^ SHUFFLE_STREAM, epoch));
        order.shuffle(&mut rng);
        let attack = warmup_attack(&attack, cfg.epsilon_warmup, epoch);
        let mut sum = LossBreakdown::default();
        let mut batches = 0usize;
        for (i, rows) in order.chunks(cfg.batch_size).enumerate() {
            let batch = train.select(rows);
            let seed = batch_seed(cfg.seed ^ ATTACK_STREAM, step);
            let diverged = |e: Error| match e {
                Error::NonFinite { .. } => Error::Diverged { epoch: epoch + 1, step: i },
                e => e,
            };
            let adv = pgd(&model, &batch.x, &batch.y, &attack.clone().with_seed(attack.seed ^ seed)).map_err(diverged)?;
            if style {
                model.reproject_style()?;
            }
            let mut spec = cfg.objective.clone();
            spec.style_noise_seed = batch_seed(spec.style_noise_seed ^ NOISE_STREAM, step);
            let mut g = Graph::new();
            let p = model.bind(&mut g, true);
            let xn = g.constant(batch.x.clone());
            let xa = g.constant(adv.x_adv);
            let rec = record(&mut g, &model, &p, xn, xa, &batch.y, &spec).map_err(diverged)?;
            let b = rec.breakdown(&g);
            if !b.total.is_finite() {
                return Err(Error::Diverged { epoch: epoch + 1, step: i });
            }
            if style && batch.len() >= 2 {
                let repr = rec.nat_forward.unwrap_or(rec.adv_forward).repr;
                model.update_covariance(g.value(repr))?;
            }
            let mut grads = g.backward(rec.total).map_err(diverged)?;
            let grads: Vec<Tensor<T>> = p
                .ids
                .iter()
                .zip(model.params())
                .map(|(&id, t)| grads.take(id).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
                .collect();
            sgd.step(model.params_mut(), &grads)?;
            sum.accumulate(&b);
            batches += 1;
            step += 1;
        }
        if style {
            model.reproject_style()?;
        }
        let nat_val = natural_accuracy(&model, val, &eval_opts)?;
        let rob_val = robust_accuracy(&model, val, &cfg.val_attack, &eval_opts)?;
        let mean = sum.scaled(1.0 / batches as f64);
        let row = MetricRow {
            epoch: epoch + 1,
            total_loss: mean.total,
            adv_ce: mean.adv_ce,
            nat_ce: mean.nat_ce,
            style_adv: mean.style_adv,
            style_nat: mean.style_nat,
            nat_val_acc: nat_val,
            rob_val_acc: rob_val,
            lr: sgd.lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&row);
        log.push(row)?;
        if rob_val > best_robust {
            best_robust = rob_val;
            best_epoch = epoch + 1;
            best = model.clone();
        }
    }
    Ok(TrainOutput {
        best,
        last: model,
        best_epoch,
        log,
    })
}

/// Training attack at `epoch` (0-based): radius and step size scaled by
/// `(epoch + 1) / (warmup + 1)` until the ramp completes.
pub fn warmup_attack(attack: &AttackConfig, warmup: usize, epoch: usize) -> AttackConfig {
    let scale = ((epoch + 1) as f64 / (warmup + 1) as f64).min(1.0);
    let mut a = attack.clone();
    a.epsilon *= scale;
    a.step_size *= scale;
    a
}
