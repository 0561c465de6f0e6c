//! l-infinity attacks: FGSM, PGD over several losses, the adaptive attack on
//! the full training objective, and surrogate transfer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::models::{argmax_rows, Classifier};
use crate::objectives::{self, ObjectiveSpec};
use crate::real::Real;
use crate::tensor::Tensor;

/// Loss ascended by the attack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    /// `KL(h(x) || h(x_adv))` against the natural prediction.
    KlToNatural,
    CwMargin,
    /// The complete training objective at `x_adv`.
    AdaptiveFull,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::KlToNatural => "kl_to_natural",
            LossKind::CwMargin => "cw_margin",
            LossKind::AdaptiveFull => "adaptive_full",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub random_start: bool,
    pub loss_kind: LossKind,
    #[serde(default)]
    pub kappa: f64,
    #[serde(default = "unit_range")]
    pub clamp: (f64, f64),
    #[serde(default)]
    pub seed: u64,
}

fn unit_range() -> (f64, f64) {
    (0.0, 1.0)
}

impl AttackConfig {
    /// PGD with cross-entropy and a random start.
    pub fn pgd(epsilon: f64, step_size: f64, steps: usize) -> Self {
        AttackConfig {
            epsilon,
            step_size,
            steps,
            random_start: true,
            loss_kind: LossKind::Ce,
            kappa: 0.0,
            clamp: unit_range(),
            seed: 0,
        }
    }

    /// Single step of size `epsilon` from the clean point.
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig {
            random_start: false,
            ..Self::pgd(epsilon, epsilon, 1)
        }
    }

    /// Evaluation attack: `epsilon = 0.3`, `eta = 0.01`, `K = 40`.
    pub fn mnist_pgd40() -> Self {
        Self::pgd(0.3, 0.01, 40)
    }

    pub fn with_loss(mut self, kind: LossKind) -> Self {
        self.loss_kind = kind;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.clamp;
        if !(self.epsilon >= 0.0) || !(self.step_size >= 0.0) || self.steps == 0 || !(lo < hi) || !(self.kappa >= 0.0) {
            return Err(Error::Invalid(format!(
                "attack needs epsilon >= 0, step size >= 0, steps >= 1, kappa >= 0 and lo < hi; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Adversarial inputs with their perturbation and per-iteration loss.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialBatch<T: Real = f64> {
    pub x_adv: Tensor<T>,
    pub delta: Tensor<T>,
    /// Mean per-sample attack loss at the start of each iteration.
    pub loss_trace: Vec<f64>,
    pub loss_kind: LossKind,
}

impl<T: Real> AdversarialBatch<T> {
    /// `max |x_adv - x|`.
    pub fn linf(&self, x: &Tensor<T>) -> f64 {
        self.x_adv.max_abs_diff(x)
    }
}

/// Per-coordinate projection bounds: the epsilon ball around `x` intersected
/// with the clamp range, rounded inward so the bound holds in `T`.
struct Ball<T: Real> {
    lo: Vec<T>,
    hi: Vec<T>,
}

impl<T: Real> Ball<T> {
    fn new(x: &Tensor<T>, eps: f64, (cmin, cmax): (f64, f64)) -> Self {
        let slack = 2.0 * T::epsilon().as_f64();
        let inward = |v: f64, toward: f64| {
            let t = T::of(v);
            if (t.as_f64() - toward).abs() > eps {
                T::of(v - slack * (v - toward).signum())
            } else {
                t
            }
        };
        let (lo, hi) = x
            .data()
            .iter()
            .map(|&xi| {
                let xf = xi.as_f64();
                let lo = inward(xf - eps, xf).max(T::of(cmin)).min(xi.max(T::of(cmin)));
                let hi = inward(xf + eps, xf).min(T::of(cmax)).max(lo);
                (lo, hi)
            })
            .unzip();
        Ball { lo, hi }
    }

    fn project(&self, v: &mut [T]) {
        for ((v, &lo), &hi) in v.iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = v.max(lo).min(hi);
        }
    }
}

/// Fixed data the attack loss needs besides `x_adv`.
struct LossContext<'a, T: Real> {
    model: &'a Classifier<T>,
    x: &'a Tensor<T>,
    y: &'a [usize],
    kind: LossKind,
    kappa: f64,
    natural_logits: Option<Tensor<T>>,
    objective: Option<&'a ObjectiveSpec>,
}

impl<'a, T: Real> LossContext<'a, T> {
    fn new(
        model: &'a Classifier<T>,
        x: &'a Tensor<T>,
        y: &'a [usize],
        cfg: &AttackConfig,
        objective: Option<&'a ObjectiveSpec>,
    ) -> Result<Self> {
        if x.shape().first() != Some(&y.len()) {
            return Err(Error::shape("attack", format!("{} labels for input {:?}", y.len(), x.shape())));
        }
        let natural_logits = match cfg.loss_kind {
            LossKind::KlToNatural => Some(model.logits(x)?),
            _ => None,
        };
        Ok(LossContext {
            model,
            x,
            y,
            kind: cfg.loss_kind,
            kappa: cfg.kappa,
            natural_logits,
            objective,
        })
    }

    /// Mean per-sample loss and its gradient with respect to `x_adv`.
    fn loss_and_grad(&self, x_adv: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
        let n = self.y.len();
        let mut g = Graph::new();
        let p = self.model.bind(&mut g, false);
        let xa = g.leaf(x_adv.clone());
        let loss = match self.kind {
            LossKind::AdaptiveFull => {
                let spec = self
                    .objective
                    .ok_or_else(|| Error::Invalid("adaptive attack needs an objective".into()))?;
                let xn = g.constant(self.x.clone());
                objectives::record(&mut g, self.model, &p, xn, xa, self.y, spec)?.total
            }
            kind => {
                let f = self.model.forward(&mut g, &p, xa)?;
                let per_sample = match kind {
                    LossKind::Ce => objectives::ce_rows(&mut g, f.logits, self.y)?,
                    LossKind::KlToNatural => {
                        let nat = g.constant(self.natural_logits.clone().expect("computed for kl"));
                        objectives::kl_rows(&mut g, nat, f.logits)?
                    }
                    LossKind::CwMargin => g.cw_margin(f.logits, self.y, T::of(self.kappa))?,
                    LossKind::AdaptiveFull => unreachable!(),
                };
                g.sum(per_sample)?
            }
        };
        let value = g.value(loss).item().as_f64();
        let mut grads = g.backward(loss)?;
        let grad = grads.take(xa).expect("input is a leaf");
        if !grad.all_finite() {
            return Err(Error::NonFinite { op: "attack gradient" });
        }
        let mean = if self.kind == LossKind::AdaptiveFull { value } else { value / n as f64 };
        Ok((mean, grad))
    }
}

fn finish<T: Real>(x: &Tensor<T>, x_adv: Tensor<T>, loss_trace: Vec<f64>, loss_kind: LossKind) -> Result<AdversarialBatch<T>> {
    let delta = x_adv
        .data()
        .iter()
        .zip(x.data())
        .map(|(&a, &b)| a - b)
        .collect();
    Ok(AdversarialBatch {
        delta: Tensor::new(x.shape().to_vec(), delta)?,
        x_adv,
        loss_trace,
        loss_kind,
    })
}

fn check_inputs<T: Real>(x: &Tensor<T>, clamp: (f64, f64)) -> Result<()> {
    if x.data().iter().any(|v| v.as_f64() < clamp.0 || v.as_f64() > clamp.1) {
        return Err(Error::Invalid(format!("attack input outside the clamp range {clamp:?}")));
    }
    Ok(())
}

/// `x + epsilon * sign(grad_x CE)`, clamped to `[0, 1]`.
pub fn fgsm<T: Real>(model: &Classifier<T>, x: &Tensor<T>, y: &[usize], epsilon: f64) -> Result<AdversarialBatch<T>> {
    let cfg = AttackConfig::fgsm(epsilon);
    cfg.validate()?;
    check_inputs(x, cfg.clamp)?;
    let ctx = LossContext::new(model, x, y, &cfg, None)?;
    let (loss, grad) = ctx.loss_and_grad(x)?;
    let step = T::of(epsilon);
    let mut x_adv: Vec<T> = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| v + step * crate::autodiff::sign(g))
        .collect();
    Ball::new(x, epsilon, cfg.clamp).project(&mut x_adv);
    finish(x, Tensor::new(x.shape().to_vec(), x_adv)?, vec![loss], LossKind::Ce)
}

fn run_pgd<T: Real>(ctx: &LossContext<'_, T>, cfg: &AttackConfig) -> Result<AdversarialBatch<T>> {
    cfg.validate()?;
    let x = ctx.x;
    check_inputs(x, cfg.clamp)?;
    let ball = Ball::new(x, cfg.epsilon, cfg.clamp);
    let mut cur = x.clone();
    if cfg.random_start && cfg.epsilon > 0.0 {
        let noise = Tensor::<T>::uniform(x.shape().to_vec(), -cfg.epsilon, cfg.epsilon, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
        for (v, n) in cur.data_mut().iter_mut().zip(noise.data()) {
            *v = *v + *n;
        }
        ball.project(cur.data_mut());
    }
    let step = T::of(cfg.step_size);
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let (loss, grad) = ctx.loss_and_grad(&cur)?;
        trace.push(loss);
        for (v, &g) in cur.data_mut().iter_mut().zip(grad.data()) {
            *v = *v + step * crate::autodiff::sign(g);
        }
        ball.project(cur.data_mut());
    }
    finish(x, cur, trace, cfg.loss_kind)
}

/// Projected signed-gradient ascent on `cfg.loss_kind`.
pub fn pgd<T: Real>(model: &Classifier<T>, x: &Tensor<T>, y: &[usize], cfg: &AttackConfig) -> Result<AdversarialBatch<T>> {
    if cfg.loss_kind == LossKind::AdaptiveFull {
        return Err(Error::Invalid("adaptive_full needs an objective; use adaptive_pgd".into()));
    }
    let ctx = LossContext::new(model, x, y, cfg, None)?;
    run_pgd(&ctx, cfg)
}

/// PGD ascending the complete training objective at `x_adv`, natural terms held at `x`.
pub fn adaptive_pgd<T: Real>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    y: &[usize],
    cfg: &AttackConfig,
    objective: &ObjectiveSpec,
) -> Result<AdversarialBatch<T>> {
    objective.validate()?;
    let cfg = AttackConfig {
        loss_kind: LossKind::AdaptiveFull,
        ..cfg.clone()
    };
    let ctx = LossContext::new(model, x, y, &cfg, Some(objective))?;
    run_pgd(&ctx, &cfg)
}

/// Mean per-sample `max(max_{j != y} z_j - z_y, -kappa)`.
pub fn cw_margin_loss<T: Real>(logits: &Tensor<T>, y: &[usize], kappa: f64) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let m = g.cw_margin(z, y, T::of(kappa))?;
    let mean = g.mean(m)?;
    Ok(g.value(mean).item().as_f64())
}

/// Fraction of rows whose arg-max equals the label.
pub fn accuracy<T: Real>(model: &Classifier<T>, x: &Tensor<T>, y: &[usize]) -> Result<f64> {
    let pred = model.predict(x)?;
    Ok(pred.iter().zip(y).filter(|(p, t)| p == t).count() as f64 / y.len().max(1) as f64)
}

/// Accuracy of `target` on PGD examples crafted against `surrogate`.
pub fn transfer_attack<T: Real>(
    surrogate: &Classifier<T>,
    target: &Classifier<T>,
    x: &Tensor<T>,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<f64> {
    if surrogate.spec().input != target.spec().input {
        return Err(Error::shape(
            "transfer_attack",
            format!("surrogate input {:?} vs target {:?}", surrogate.spec().input, target.spec().input),
        ));
    }
    let adv = pgd(surrogate, x, y, cfg)?;
    accuracy(target, &adv.x_adv, y)
}

/// Number of rows whose arg-max equals the label.
pub fn correct_count<T: Real>(logits: &Tensor<T>, y: &[usize]) -> usize {
    argmax_rows(logits).iter().zip(y).filter(|(p, t)| p == t).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_classifier, NetworkSpec};

    fn tiny() -> (Classifier<f64>, Tensor<f64>, Vec<usize>) {
        let c = build_classifier::<f64>(NetworkSpec::mlp(6, vec![8], 3).with_style_dim(2), 3).unwrap();
        let x = Tensor::uniform([5, 6], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        (c, x, vec![0, 1, 2, 1, 0])
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let (c, x, y) = tiny();
        assert_eq!(fgsm(&c, &x, &y, 0.0).unwrap().x_adv, x);
        let adv = pgd(&c, &x, &y, &AttackConfig::pgd(0.0, 0.01, 5)).unwrap();
        assert_eq!(adv.x_adv, x);
    }

    #[test]
    fn ball_and_clamp_hold() {
        let (c, x, y) = tiny();
        for kind in [LossKind::Ce, LossKind::KlToNatural, LossKind::CwMargin] {
            let cfg = AttackConfig::pgd(0.3, 0.1, 7).with_loss(kind);
            let adv = pgd(&c, &x, &y, &cfg).unwrap();
            assert!(adv.linf(&x) <= 0.3 + 1e-9);
            assert!(adv.x_adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(adv.loss_trace.len(), 7);
        }
    }

    #[test]
    fn ball_holds_in_single_precision() {
        let (c, x, y) = tiny();
        let (c, x) = (c.cast::<f32>(), x.cast::<f32>());
        let adv = pgd(&c, &x, &y, &AttackConfig::pgd(0.3, 0.05, 10)).unwrap();
        assert!(adv.linf(&x) <= 0.3 + 1e-9);
    }

    #[test]
    fn fgsm_equals_single_step_pgd() {
        let (c, x, y) = tiny();
        let a = fgsm(&c, &x, &y, 0.2).unwrap();
        let b = pgd(&c, &x, &y, &AttackConfig::fgsm(0.2)).unwrap();
        assert_eq!(a.x_adv, b.x_adv);
    }

    #[test]
    fn rejects_out_of_range_input() {
        let (c, _, y) = tiny();
        let x = Tensor::full([5, 6], 1.5);
        assert!(fgsm(&c, &x, &y, 0.1).is_err());
    }

    #[test]
    fn cw_values() {
        let z = Tensor::new([1, 3], vec![5.0, 1.0, 0.0]).unwrap();
        assert_eq!(cw_margin_loss(&z, &[0], 0.0).unwrap(), 0.0);
        let z = Tensor::new([1, 3], vec![1.0, 5.0, 0.0]).unwrap();
        assert_eq!(cw_margin_loss(&z, &[0], 0.0).unwrap(), 4.0);
    }

    #[test]
    fn self_transfer_equals_white_box() {
        let (c, x, y) = tiny();
        let cfg = AttackConfig::pgd(0.2, 0.05, 5).with_seed(4);
        let white = accuracy(&c, &pgd(&c, &x, &y, &cfg).unwrap().x_adv, &y).unwrap();
        assert_eq!(transfer_attack(&c, &c, &x, &y, &cfg).unwrap(), white);
    }
}
