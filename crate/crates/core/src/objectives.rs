//! Training objectives: Madry, TRADES, CausalAdv in its CE and soft-target
//! forms, and the square-root (Pinsker) variants.
//!
//! Every variant is a weighted sum
//! `total = adv_term + gamma * nat_term + lambda * (style_adv + beta * style_nat)`
//! where the style terms are the closed-form Gaussian-style cross-entropy of the
//! style mean at the adversarial and natural inputs. The square-root variants
//! replace each batch-mean term `m` with `sqrt(m / 2)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd, AdversarialBatch, AttackConfig, LossKind};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::models::{BoundParams, Classifier, Forward};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Madry,
    Trades,
    CausaladvM,
    CausaladvT,
    CausaladvMSqrt,
    CausaladvTSqrt,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Madry,
        Variant::Trades,
        Variant::CausaladvM,
        Variant::CausaladvT,
        Variant::CausaladvMSqrt,
        Variant::CausaladvTSqrt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Madry => "madry",
            Variant::Trades => "trades",
            Variant::CausaladvM => "causaladv_m",
            Variant::CausaladvT => "causaladv_t",
            Variant::CausaladvMSqrt => "causaladv_m_sqrt",
            Variant::CausaladvTSqrt => "causaladv_t_sqrt",
        }
    }

    /// Soft-target (TRADES-style) family.
    pub fn soft_target(self) -> bool {
        matches!(self, Variant::Trades | Variant::CausaladvT | Variant::CausaladvTSqrt)
    }

    pub fn sqrt(self) -> bool {
        matches!(self, Variant::CausaladvMSqrt | Variant::CausaladvTSqrt)
    }

    /// Whether the style-alignment terms are part of the objective.
    pub fn has_style(self) -> bool {
        !matches!(self, Variant::Madry | Variant::Trades)
    }

    /// Loss the inner maximization ascends.
    pub fn inner_loss(self) -> LossKind {
        if self.soft_target() {
            LossKind::KlToNatural
        } else {
            LossKind::Ce
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub variant: Variant,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "six")]
    pub trades_beta: f64,
    /// Seed of the reparameterized noise used by a non-linear style classifier.
    #[serde(default)]
    pub style_noise_seed: u64,
}

fn one() -> f64 {
    1.0
}

fn six() -> f64 {
    6.0
}

impl ObjectiveSpec {
    pub fn new(variant: Variant) -> Self {
        let lambda = match variant {
            Variant::Madry | Variant::Trades => 0.0,
            Variant::CausaladvM | Variant::CausaladvMSqrt => 1.0,
            Variant::CausaladvT | Variant::CausaladvTSqrt => 0.5,
        };
        ObjectiveSpec {
            variant,
            gamma: 0.0,
            lambda,
            beta: 1.0,
            trades_beta: 6.0,
            style_noise_seed: 0,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [self.gamma, self.lambda, self.beta];
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || !(self.trades_beta > 0.0) {
            return Err(Error::Invalid(format!("objective weights must be non-negative (trades_beta > 0): {self:?}")));
        }
        if matches!(self.variant, Variant::CausaladvM | Variant::CausaladvMSqrt) && self.gamma != 0.0 {
            return Err(Error::Invalid(format!("{} requires gamma = 0", self.variant.name())));
        }
        Ok(())
    }

    /// Weight on the natural term actually applied.
    pub fn effective_gamma(&self) -> f64 {
        if self.variant.soft_target() {
            1.0
        } else {
            self.gamma
        }
    }

    /// Weight on the style terms actually applied.
    pub fn effective_lambda(&self) -> f64 {
        if self.variant.has_style() {
            self.lambda
        } else {
            0.0
        }
    }

    fn needs_natural(&self) -> bool {
        self.variant.soft_target()
            || self.effective_gamma() != 0.0
            || (self.effective_lambda() != 0.0 && self.beta != 0.0)
    }
}

/// Scalar values of each objective term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Adversarial term as weighted in the objective (for soft-target variants
    /// this is the weighted KL).
    pub adv_ce: f64,
    pub nat_ce: f64,
    pub style_adv: f64,
    pub style_nat: f64,
}

impl LossBreakdown {
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.adv_ce += other.adv_ce;
        self.nat_ce += other.nat_ce;
        self.style_adv += other.style_adv;
        self.style_nat += other.style_nat;
    }

    pub fn scaled(&self, c: f64) -> LossBreakdown {
        LossBreakdown {
            total: c * self.total,
            adv_ce: c * self.adv_ce,
            nat_ce: c * self.nat_ce,
            style_adv: c * self.style_adv,
            style_nat: c * self.style_nat,
        }
    }

    /// `adv + gamma * nat + lambda * (style_adv + beta * style_nat)`.
    pub fn reconstruct(&self, spec: &ObjectiveSpec) -> f64 {
        self.adv_ce + spec.effective_gamma() * self.nat_ce + spec.effective_lambda() * (self.style_adv + spec.beta * self.style_nat)
    }
}

/// Graph nodes of a recorded objective.
#[derive(Clone, Copy, Debug)]
pub struct RecordedObjective {
    pub total: NodeId,
    pub adv: NodeId,
    pub nat: Option<NodeId>,
    pub style_adv: Option<NodeId>,
    pub style_nat: Option<NodeId>,
    pub adv_forward: Forward,
    pub nat_forward: Option<Forward>,
}

impl RecordedObjective {
    pub fn breakdown<T: Real>(&self, g: &Graph<T>) -> LossBreakdown {
        let v = |id: Option<NodeId>| id.map_or(0.0, |id| g.value(id).item().as_f64());
        LossBreakdown {
            total: v(Some(self.total)),
            adv_ce: v(Some(self.adv)),
            nat_ce: v(self.nat),
            style_adv: v(self.style_adv),
            style_nat: v(self.style_nat),
        }
    }
}

/// Per-row cross-entropy `-log softmax(z)_y`.
pub fn ce_rows<T: Real>(g: &mut Graph<T>, logits: NodeId, y: &[usize]) -> Result<NodeId> {
    let lp = g.log_softmax(logits)?;
    let picked = g.gather(lp, y)?;
    g.scalar_mul(picked, -T::one())
}

/// Per-row `KL(softmax(p) || softmax(q))`.
pub fn kl_rows<T: Real>(g: &mut Graph<T>, p_logits: NodeId, q_logits: NodeId) -> Result<NodeId> {
    let lp = g.log_softmax(p_logits)?;
    let lq = g.log_softmax(q_logits)?;
    let p = g.exp(lp)?;
    let diff = g.sub(lp, lq)?;
    let terms = g.mul(p, diff)?;
    g.sum_rows(terms)
}

/// Floor added before the square root so its derivative stays finite at zero.
pub const SQRT_FLOOR: f64 = 1e-12;

fn sqrt_half<T: Real>(g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
    let half = g.scalar_mul(x, T::of(0.5))?;
    let floor = g.constant(Tensor::scalar(T::of(SQRT_FLOOR)));
    let shifted = g.add(half, floor)?;
    g.sqrt(shifted)
}

fn style_term<T: Real>(
    g: &mut Graph<T>,
    model: &Classifier<T>,
    p: &BoundParams,
    repr: NodeId,
    y: &[usize],
    noise_seed: u64,
) -> Result<NodeId> {
    let mu = model.style_mean(g, p, repr)?;
    let sigma = T::of(model.sigma());
    let rows = match &model.style_hidden {
        None => g.gaussian_style_ce(mu, p.style_cls(), y, sigma)?,
        Some(_) => {
            // one reparameterized sample per row
            let shape = g.value(mu).shape().to_vec();
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            let noise = (0..shape.iter().product::<usize>())
                .map(|_| sigma * T::of(StandardNormal.sample(&mut rng)))
                .collect();
            let n = g.constant(Tensor::new(shape, noise)?);
            let s = g.add(mu, n)?;
            let k = p.ids.len();
            let (wh, bh) = (p.ids[k - 3], p.ids[k - 2]);
            let h = g.linear(s, wh, Some(bh))?;
            let h = g.relu(h)?;
            let z = g.linear(h, p.style_cls(), None)?;
            ce_rows(g, z, y)?
        }
    };
    g.mean(rows)
}

/// Records the objective for natural input `x` and adversarial input `x_adv`.
pub fn record<T: Real>(
    g: &mut Graph<T>,
    model: &Classifier<T>,
    p: &BoundParams,
    x: NodeId,
    x_adv: NodeId,
    y: &[usize],
    spec: &ObjectiveSpec,
) -> Result<RecordedObjective> {
    spec.validate()?;
    let v = spec.variant;
    let adv_forward = model.forward(g, p, x_adv)?;
    let nat_forward = if spec.needs_natural() {
        Some(model.forward(g, p, x)?)
    } else {
        None
    };
    let nat_rows = match nat_forward {
        Some(f) if v.soft_target() || spec.effective_gamma() != 0.0 => Some(ce_rows(g, f.logits, y)?),
        _ => None,
    };
    let nat = match nat_rows {
        Some(r) => {
            let m = g.mean(r)?;
            Some(if v.sqrt() { sqrt_half(g, m)? } else { m })
        }
        None => None,
    };
    let adv = if v.soft_target() {
        let nat_logits = nat_forward.expect("soft target needs the natural pass").logits;
        let kl = kl_rows(g, nat_logits, adv_forward.logits)?;
        let m = g.mean(kl)?;
        let m = if v.sqrt() { sqrt_half(g, m)? } else { m };
        g.scalar_mul(m, T::of(spec.trades_beta))?
    } else {
        let rows = ce_rows(g, adv_forward.logits, y)?;
        let m = g.mean(rows)?;
        if v.sqrt() {
            sqrt_half(g, m)?
        } else {
            m
        }
    };
    let mut total = adv;
    if let Some(nat) = nat {
        let gamma = spec.effective_gamma();
        if gamma != 0.0 {
            let w = g.scalar_mul(nat, T::of(gamma))?;
            total = g.add(total, w)?;
        }
    }
    let (mut style_adv, mut style_nat) = (None, None);
    let lambda = spec.effective_lambda();
    if lambda != 0.0 {
        let sa = style_term(g, model, p, adv_forward.repr, y, spec.style_noise_seed)?;
        let sa = if v.sqrt() { sqrt_half(g, sa)? } else { sa };
        let mut style = sa;
        style_adv = Some(sa);
        if spec.beta != 0.0 {
            let f = nat_forward.expect("natural pass recorded when beta > 0");
            let sn = style_term(g, model, p, f.repr, y, spec.style_noise_seed ^ 0x9e37_79b9_7f4a_7c15)?;
            let sn = if v.sqrt() { sqrt_half(g, sn)? } else { sn };
            style_nat = Some(sn);
            let w = g.scalar_mul(sn, T::of(spec.beta))?;
            style = g.add(style, w)?;
        }
        let w = g.scalar_mul(style, T::of(lambda))?;
        total = g.add(total, w)?;
    }
    Ok(RecordedObjective {
        total,
        adv,
        nat,
        style_adv,
        style_nat,
        adv_forward,
        nat_forward,
    })
}

/// Evaluates the objective at an adversarial batch crafted for its variant.
pub fn causaladv_objective<T: Real>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    adv: &AdversarialBatch<T>,
    y: &[usize],
    spec: &ObjectiveSpec,
) -> Result<LossBreakdown> {
    let expected = spec.variant.inner_loss();
    if adv.loss_kind != expected && adv.loss_kind != LossKind::AdaptiveFull {
        return Err(Error::VariantMismatch {
            variant: spec.variant.name(),
            expected: expected.name(),
            found: adv.loss_kind.name(),
        });
    }
    objective_value(model, x, &adv.x_adv, y, spec)
}

/// Objective value at given natural and adversarial inputs.
pub fn objective_value<T: Real>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    x_adv: &Tensor<T>,
    y: &[usize],
    spec: &ObjectiveSpec,
) -> Result<LossBreakdown> {
    if x.shape() != x_adv.shape() {
        return Err(Error::shape("objective", format!("{:?} vs {:?}", x.shape(), x_adv.shape())));
    }
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let xn = g.constant(x.clone());
    let xa = g.constant(x_adv.clone());
    Ok(record(&mut g, model, &p, xn, xa, y, spec)?.breakdown(&g))
}

/// Mean row-wise `KL(softmax(p) || softmax(q))`.
pub fn kl_divergence<T: Real>(p_logits: &Tensor<T>, q_logits: &Tensor<T>) -> Result<f64> {
    if p_logits.shape() != q_logits.shape() {
        return Err(Error::shape("kl_divergence", format!("{:?} vs {:?}", p_logits.shape(), q_logits.shape())));
    }
    let as_matrix = |t: &Tensor<T>| -> Result<Tensor<T>> {
        let k = *t.shape().last().ok_or_else(|| Error::shape("kl_divergence", "scalar logits"))?;
        t.clone().reshape([t.numel() / k, k])
    };
    let mut g = Graph::new();
    let p = g.constant(as_matrix(p_logits)?);
    let q = g.constant(as_matrix(q_logits)?);
    let rows = kl_rows(&mut g, p, q)?;
    let m = g.mean(rows)?;
    Ok(g.value(m).item().as_f64().max(0.0))
}

/// Per-row KL values.
pub fn kl_per_row<T: Real>(p_logits: &Tensor<T>, q_logits: &Tensor<T>) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = g.constant(p_logits.clone());
    let q = g.constant(q_logits.clone());
    let rows = kl_rows(&mut g, p, q)?;
    Ok(g.value(rows).data().iter().map(|v| v.as_f64().max(0.0)).collect())
}

/// Natural and adversarial cross-entropy within one ground-truth style bucket.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketGap {
    pub bucket: usize,
    pub count: usize,
    pub natural_ce: f64,
    pub adversarial_ce: f64,
}

impl BucketGap {
    pub fn gap(&self) -> f64 {
        self.adversarial_ce - self.natural_ce
    }
}

/// Per-style-bucket mean CE of natural and adversarial predictions.
///
/// `styles` are the ground-truth style buckets of the rows of `x`.
pub fn conditional_association_gap<T: Real>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    y: &[usize],
    styles: Option<&[usize]>,
    attack: &AttackConfig,
) -> Result<Vec<BucketGap>> {
    let styles = styles.ok_or(Error::MissingStyles)?;
    if styles.len() != y.len() {
        return Err(Error::shape("conditional_association_gap", format!("{} styles, {} labels", styles.len(), y.len())));
    }
    let adv = pgd(model, x, y, attack)?;
    let per_row = |input: &Tensor<T>| -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let z = g.constant(model.logits(input)?);
        let r = ce_rows(&mut g, z, y)?;
        Ok(g.value(r).data().iter().map(|v| v.as_f64()).collect())
    };
    let (nat, advce) = (per_row(x)?, per_row(&adv.x_adv)?);
    let buckets = styles.iter().copied().max().map_or(0, |m| m + 1);
    let mut out: Vec<BucketGap> = (0..buckets)
        .map(|bucket| BucketGap {
            bucket,
            count: 0,
            natural_ce: 0.0,
            adversarial_ce: 0.0,
        })
        .collect();
    for ((&s, a), b) in styles.iter().zip(&nat).zip(&advce) {
        let slot = &mut out[s];
        slot.count += 1;
        slot.natural_ce += a;
        slot.adversarial_ce += b;
    }
    out.retain(|b| b.count > 0);
    for b in &mut out {
        b.natural_ce /= b.count as f64;
        b.adversarial_ce /= b.count as f64;
    }
    Ok(out)
}
