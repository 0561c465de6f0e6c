use crate::config::OptimizerConfig;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v <- momentum * v + (g + wd * p)`, `p <- p - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd<T: Real> {
    pub lr: f64,
    momentum: f64,
    weight_decay: f64,
    grad_clip: Option<f64>,
    velocity: Vec<Tensor<T>>,
    last_norm: f64,
}

impl<T: Real> Sgd<T> {
    pub fn new(cfg: &OptimizerConfig) -> Self {
        Sgd {
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            grad_clip: cfg.grad_clip,
            velocity: Vec::new(),
            last_norm: 0.0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Invalid(format!("{} parameters, {} gradients", params.len(), grads.len())));
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape().to_vec())).collect();
        }
        self.last_norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v.as_f64().powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = match self.grad_clip {
            Some(c) if self.last_norm > c => T::of(c / self.last_norm),
            _ => T::one(),
        };
        let (lr, mom, wd) = (T::of(self.lr), T::of(self.momentum), T::of(self.weight_decay));
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() {
                return Err(Error::shape("sgd", format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = mom * *vv + scale * gv + wd * *pv;
                *pv = *pv - lr * *vv;
            }
        }
        Ok(())
    }

    /// L2 norm of the gradient passed to the last `step`, before clipping.
    pub fn last_grad_norm(&self) -> f64 {
        self.last_norm
    }
}

/// Learning rate at `epoch` (0-based) under step decay at the milestones.
pub fn lr_at(cfg: &OptimizerConfig, epoch: usize) -> f64 {
    let passed = cfg.milestones.iter().filter(|&&m| epoch >= m).count();
    cfg.lr * cfg.lr_decay.powi(passed as i32)
}
