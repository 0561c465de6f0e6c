//! Oracles and suites shared by the integration tests.
#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::PathBuf;

use causaladv::autodiff::{finite_diff_grad, relative_error};
use causaladv::checkpoint::{load_classifier, save_classifier, CheckpointMeta};
use causaladv::config::RunConfig;
use causaladv::harness::{load_splits, train, MetricLog, Splits};
use causaladv::models::{build_classifier, Classifier, NetworkSpec};
use causaladv::objectives::{objective_value, record, ObjectiveSpec, Variant};
use causaladv::{Graph, NodeId, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), lo, hi, r)
}

/// Values bounded away from zero so kinks at 0 stay outside the FD stencil.
pub fn away_from_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    uniform(shape, -2.0, 2.0, r).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

pub fn labels(n: usize, k: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..k)).collect()
}

pub struct Instance {
    pub inputs: Vec<Tensor<f64>>,
    pub labels: Vec<usize>,
    pub scalar: f64,
}

impl Instance {
    fn new(inputs: Vec<Tensor<f64>>) -> Self {
        Instance {
            inputs,
            labels: Vec::new(),
            scalar: 0.0,
        }
    }
}

type Gen = fn(&mut ChaCha8Rng) -> Instance;
type Build = fn(&mut Graph<f64>, &[NodeId], &Instance) -> Result<NodeId>;

pub struct OpCase {
    pub name: &'static str,
    pub gen: Gen,
    pub build: Build,
    /// Pullback is zero by construction.
    pub blocked: bool,
}

fn two(r: &mut ChaCha8Rng) -> Instance {
    Instance::new(vec![uniform(&[3, 4], -2.0, 2.0, r), uniform(&[3, 4], -2.0, 2.0, r)])
}

fn one(r: &mut ChaCha8Rng) -> Instance {
    Instance::new(vec![uniform(&[3, 4], -2.0, 2.0, r)])
}

fn logits_labels(r: &mut ChaCha8Rng) -> Instance {
    let mut i = Instance::new(vec![uniform(&[4, 5], -3.0, 3.0, r)]);
    i.labels = labels(4, 5, r);
    i.scalar = r.random_range(0.0..2.0);
    i
}

fn conv_inputs(r: &mut ChaCha8Rng) -> Instance {
    Instance::new(vec![
        uniform(&[2, 2, 5, 5], -1.0, 1.0, r),
        uniform(&[3, 2, 3, 3], -1.0, 1.0, r),
        uniform(&[3], -1.0, 1.0, r),
    ])
}

/// Every tape op, each with a random-instance generator.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase { name: "add", gen: two, build: |g, x, _| g.add(x[0], x[1]), blocked: false },
        OpCase { name: "sub", gen: two, build: |g, x, _| g.sub(x[0], x[1]), blocked: false },
        OpCase { name: "mul", gen: two, build: |g, x, _| g.mul(x[0], x[1]), blocked: false },
        OpCase {
            name: "matmul",
            gen: |r| Instance::new(vec![uniform(&[3, 4], -1.0, 1.0, r), uniform(&[4, 5], -1.0, 1.0, r)]),
            build: |g, x, _| g.matmul(x[0], x[1]),
            blocked: false,
        },
        OpCase {
            name: "linear",
            gen: |r| {
                Instance::new(vec![
                    uniform(&[3, 4], -1.0, 1.0, r),
                    uniform(&[5, 4], -1.0, 1.0, r),
                    uniform(&[5], -1.0, 1.0, r),
                ])
            },
            build: |g, x, _| g.linear(x[0], x[1], Some(x[2])),
            blocked: false,
        },
        OpCase {
            name: "linear_no_bias",
            gen: |r| Instance::new(vec![uniform(&[3, 4], -1.0, 1.0, r), uniform(&[5, 4], -1.0, 1.0, r)]),
            build: |g, x, _| g.linear(x[0], x[1], None),
            blocked: false,
        },
        OpCase { name: "conv2d", gen: conv_inputs, build: |g, x, _| g.conv2d(x[0], x[1], Some(x[2]), 0), blocked: false },
        OpCase {
            name: "conv2d_pad1",
            gen: conv_inputs,
            build: |g, x, _| g.conv2d(x[0], x[1], Some(x[2]), 1),
            blocked: false,
        },
        OpCase {
            name: "maxpool2x2",
            gen: |r| Instance::new(vec![uniform(&[2, 2, 4, 4], -1.0, 1.0, r)]),
            build: |g, x, _| g.maxpool2x2(x[0]),
            blocked: false,
        },
        OpCase {
            name: "relu",
            gen: |r| Instance::new(vec![away_from_zero(&[4, 5], r)]),
            build: |g, x, _| g.relu(x[0]),
            blocked: false,
        },
        OpCase {
            name: "flatten",
            gen: |r| Instance::new(vec![uniform(&[2, 3, 2, 2], -1.0, 1.0, r)]),
            build: |g, x, _| g.flatten(x[0]),
            blocked: false,
        },
        OpCase { name: "log_softmax", gen: logits_labels, build: |g, x, _| g.log_softmax(x[0]), blocked: false },
        OpCase { name: "gather", gen: logits_labels, build: |g, x, i| g.gather(x[0], &i.labels), blocked: false },
        OpCase { name: "sum", gen: one, build: |g, x, _| g.sum(x[0]), blocked: false },
        OpCase { name: "mean", gen: one, build: |g, x, _| g.mean(x[0]), blocked: false },
        OpCase { name: "sum_rows", gen: one, build: |g, x, _| g.sum_rows(x[0]), blocked: false },
        OpCase {
            name: "scalar_mul",
            gen: |r| {
                let mut i = one(r);
                i.scalar = r.random_range(-3.0..3.0);
                i
            },
            build: |g, x, i| g.scalar_mul(x[0], i.scalar),
            blocked: false,
        },
        OpCase { name: "exp", gen: one, build: |g, x, _| g.exp(x[0]), blocked: false },
        OpCase {
            name: "sqrt",
            gen: |r| Instance::new(vec![uniform(&[3, 4], 0.2, 3.0, r)]),
            build: |g, x, _| g.sqrt(x[0]),
            blocked: false,
        },
        OpCase { name: "clamp", gen: one, build: |g, x, _| g.clamp(x[0], -0.5, 0.5), blocked: true },
        OpCase {
            name: "sign",
            gen: |r| Instance::new(vec![away_from_zero(&[3, 4], r)]),
            build: |g, x, _| g.sign(x[0]),
            blocked: true,
        },
        OpCase {
            name: "gaussian_style_ce",
            gen: |r| {
                let mut i = Instance::new(vec![uniform(&[4, 6], -2.0, 2.0, r), uniform(&[5, 6], -1.0, 1.0, r)]);
                i.labels = labels(4, 5, r);
                i.scalar = r.random_range(0.0..2.0);
                i
            },
            build: |g, x, i| g.gaussian_style_ce(x[0], x[1], &i.labels, i.scalar),
            blocked: false,
        },
        OpCase { name: "cw_margin", gen: logits_labels, build: |g, x, i| g.cw_margin(x[0], &i.labels, i.scalar), blocked: false },
    ]
}

fn weighted_output(case: &OpCase, inst: &Instance, inputs: &[Tensor<f64>], weight: &Tensor<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = (case.build)(&mut g, &ids, inst)?;
    let w = g.constant(weight.clone());
    let prod = g.mul(out, w)?;
    let s = g.sum(prod)?;
    Ok(g.value(s).item())
}

fn concat(ts: &[Tensor<f64>]) -> Tensor<f64> {
    Tensor::from_vec(ts.iter().flat_map(|t| t.data().iter().copied()).collect())
}

/// Worst relative error (or, for blocked ops, worst absolute pullback) over
/// `instances` random draws of one op.
pub fn check_op(case: &OpCase, instances: usize, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let inst = (case.gen)(&mut r);
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inst.inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = (case.build)(&mut g, &ids, &inst)?;
        let weight = uniform(g.value(out).shape(), -1.0, 1.0, &mut r);
        let w = g.constant(weight.clone());
        let prod = g.mul(out, w)?;
        let loss = g.sum(prod)?;
        let mut grads = g.backward(loss)?;
        let analytic: Vec<Tensor<f64>> = ids
            .iter()
            .zip(&inst.inputs)
            .map(|(&id, t)| grads.take(id).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect();
        if case.blocked {
            worst = worst.max(concat(&analytic).max_abs());
            continue;
        }
        let mut numeric = Vec::new();
        for j in 0..inst.inputs.len() {
            let mut inputs = inst.inputs.clone();
            numeric.push(finite_diff_grad(
                |t| {
                    inputs[j] = t.clone();
                    weighted_output(case, &inst, &inputs, &weight)
                },
                &inst.inputs[j],
                FD_STEP,
            )?);
        }
        worst = worst.max(relative_error(&concat(&analytic), &concat(&numeric)));
    }
    Ok(worst)
}

fn flatten_params(m: &Classifier<f64>) -> Tensor<f64> {
    concat(&m.params().into_iter().cloned().collect::<Vec<_>>())
}

fn with_params(m: &Classifier<f64>, theta: &Tensor<f64>) -> Classifier<f64> {
    let mut out = m.clone();
    let mut off = 0;
    for p in out.params_mut() {
        let n = p.numel();
        p.data_mut().copy_from_slice(&theta.data()[off..off + n]);
        off += n;
    }
    out
}

/// Small MLP for objective gradient checks.
pub fn tiny_spec(style_hidden: Option<usize>, sigma: f64) -> NetworkSpec {
    let mut s = NetworkSpec::mlp(6, vec![8], 3).with_style_dim(4).with_sigma(sigma);
    s.style_hidden = style_hidden;
    s
}

/// Worst relative error of the objective gradient w.r.t. all parameters.
pub fn check_objective(spec: &ObjectiveSpec, style_hidden: Option<usize>, instances: usize, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let sigma = r.random_range(0.1..2.0);
        let model: Classifier<f64> = build_classifier(tiny_spec(style_hidden, sigma), seed ^ i as u64)?;
        let x = uniform(&[5, 6], 0.0, 1.0, &mut r);
        let x_adv = uniform(&[5, 6], 0.0, 1.0, &mut r);
        let y = labels(5, 3, &mut r);
        let mut g = Graph::new();
        let p = model.bind(&mut g, true);
        let (xn, xa) = (g.constant(x.clone()), g.constant(x_adv.clone()));
        let rec = record(&mut g, &model, &p, xn, xa, &y, spec)?;
        let mut grads = g.backward(rec.total)?;
        let analytic: Vec<Tensor<f64>> = p
            .ids
            .iter()
            .zip(model.params())
            .map(|(&id, t)| grads.take(id).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect();
        let numeric = finite_diff_grad(
            |theta| Ok(objective_value(&with_params(&model, theta), &x, &x_adv, &y, spec)?.total),
            &flatten_params(&model),
            FD_STEP,
        )?;
        worst = worst.max(relative_error(&concat(&analytic), &numeric));
    }
    Ok(worst)
}

/// Objective configurations covered by the gradient suite.
pub fn objective_cases() -> Vec<(String, ObjectiveSpec, Option<usize>)> {
    let mut v: Vec<(String, ObjectiveSpec, Option<usize>)> = Variant::ALL
        .into_iter()
        .map(|v| (v.name().to_string(), ObjectiveSpec::new(v), None))
        .collect();
    v.push(("madry_gamma".into(), ObjectiveSpec::new(Variant::Madry).with_gamma(0.7), None));
    v.push(("causaladv_m_beta0".into(), ObjectiveSpec::new(Variant::CausaladvM).with_beta(0.0), None));
    v.push(("causaladv_m_nonlinear_g".into(), ObjectiveSpec::new(Variant::CausaladvM), Some(5)));
    v.push(("causaladv_t_nonlinear_g".into(), ObjectiveSpec::new(Variant::CausaladvT), Some(5)));
    v
}

/// Exact equality of everything in two logs except wall time.
pub fn same_trace(a: &MetricLog, b: &MetricLog) -> bool {
    a.len() == b.len()
        && a.rows().iter().zip(b.rows()).all(|(p, q)| {
            let mut q = q.clone();
            q.seconds = p.seconds;
            *p == q
        })
}

pub fn cache_dir() -> PathBuf {
    std::env::var_os("CADV_CACHE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("model-cache"))
}

pub struct TrainedRun {
    pub cfg: RunConfig,
    pub best: Classifier<f32>,
    pub last: Classifier<f32>,
    pub log: MetricLog,
    pub cached: bool,
}

/// Trains `cfg` in f32 or loads the result from the cache keyed by the
/// config's TOML text.
pub fn trained(cfg: &RunConfig, splits: &Splits) -> Result<TrainedRun> {
    let text = cfg.to_toml()?;
    let mut h = DefaultHasher::new();
    text.hash(&mut h);
    let dir = cache_dir().join(format!("{}-{:016x}", cfg.objective.variant.name(), h.finish()));
    let (best_p, last_p, log_p) = (dir.join("best.cadv"), dir.join("last.cadv"), dir.join("metrics.csv"));
    if best_p.is_file() && last_p.is_file() && log_p.is_file() {
        return Ok(TrainedRun {
            cfg: cfg.clone(),
            best: load_classifier(&best_p)?.0,
            last: load_classifier(&last_p)?.0,
            log: MetricLog::read_csv(&log_p)?,
            cached: true,
        });
    }
    let out = train::<f32>(cfg, &splits.train.cast(), &splits.val.cast())?;
    std::fs::create_dir_all(&dir).map_err(|e| causaladv::Error::Invalid(format!("{}: {e}", dir.display())))?;
    std::fs::write(dir.join("resolved.toml"), &text).map_err(|e| causaladv::Error::Invalid(e.to_string()))?;
    let meta = |kind: &str| CheckpointMeta {
        kind: kind.into(),
        epoch: 0,
        robust_val_acc: None,
        natural_val_acc: None,
        precision: "f32".into(),
    };
    save_classifier(&best_p, &out.best, &meta("best"))?;
    save_classifier(&last_p, &out.last, &meta("last"))?;
    out.log.write_csv(&log_p)?;
    Ok(TrainedRun {
        cfg: cfg.clone(),
        best: out.best,
        last: out.last,
        log: out.log,
        cached: false,
    })
}

/// MNIST splits for the desk configuration, or `None` when the IDX files are absent.
pub fn mnist_splits() -> Option<Splits> {
    let cfg = RunConfig::mnist(Variant::Madry);
    load_splits(&cfg).ok()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
