//! Synthetic data with independent content and style variables.
//!
//! `C` and `S` are drawn independently. The label is a fixed linear rule of
//! `C`. An association between the label and the style bucket is induced by
//! selection: with probability `|rho|` the style is redrawn until its bucket
//! equals the label (`rho > 0`) or the next class (`rho < 0`). There is no edge
//! from `S` to `Y`; the input is `[mix(C), mix(S)]` plus noise, squashed into
//! `[0, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCausalConfig {
    pub content_dim: usize,
    pub style_dim: usize,
    pub classes: usize,
    /// Input features produced from the content block.
    pub content_features: usize,
    /// Input features produced from the style block.
    pub style_features: usize,
    /// Style/label association in `[-1, 1]`.
    pub rho: f64,
    /// Observation noise on every input feature (latent units).
    pub noise: f64,
    /// Extra observation noise on the content features.
    pub content_noise: f64,
    /// Seed of the fixed mechanisms (label rule, mixing maps, style score).
    pub mechanism_seed: u64,
}

impl Default for SyntheticCausalConfig {
    fn default() -> Self {
        SyntheticCausalConfig {
            content_dim: 4,
            style_dim: 4,
            classes: 4,
            content_features: 8,
            style_features: 8,
            rho: 0.9,
            noise: 0.05,
            content_noise: 1.0,
            mechanism_seed: 17,
        }
    }
}

/// Latent-to-input scale before clamping into `[0, 1]`.
const SQUASH: f64 = 0.15;

impl SyntheticCausalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.rho) {
            return Err(Error::Invalid(format!("rho must be in [-1, 1], got {}", self.rho)));
        }
        if self.classes < 2
            || self.content_dim == 0
            || self.style_dim == 0
            || self.content_features == 0
            || self.style_features == 0
        {
            return Err(Error::Invalid("synthetic dimensions must be positive with >= 2 classes".into()));
        }
        if !(self.noise >= 0.0) || !(self.content_noise >= 0.0) {
            return Err(Error::Invalid("noise scales must be >= 0".into()));
        }
        Ok(())
    }

    pub fn features(&self) -> usize {
        self.content_features + self.style_features
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }
}

/// Fixed linear maps shared by every draw from one configuration.
struct Mechanisms {
    label: Vec<f64>,
    content_mix: Vec<f64>,
    style_mix: Vec<f64>,
    style_score: Vec<f64>,
    thresholds: Vec<f64>,
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let scale = 1.0 / (cols as f64).sqrt();
    (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

impl Mechanisms {
    fn new(cfg: &SyntheticCausalConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.mechanism_seed);
        let label = gaussian_matrix(cfg.classes, cfg.content_dim, &mut rng);
        let content_mix = gaussian_matrix(cfg.content_features, cfg.content_dim, &mut rng);
        let style_mix = gaussian_matrix(cfg.style_features, cfg.style_dim, &mut rng);
        let mut style_score: Vec<f64> = (0..cfg.style_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = style_score.iter().map(|v| v * v).sum::<f64>().sqrt();
        style_score.iter_mut().for_each(|v| *v /= norm);
        let normal = Normal::standard();
        let thresholds = (1..cfg.classes)
            .map(|j| normal.inverse_cdf(j as f64 / cfg.classes as f64))
            .collect();
        Mechanisms {
            label,
            content_mix,
            style_mix,
            style_score,
            thresholds,
        }
    }

    fn label_of(&self, c: &[f64]) -> usize {
        self.label
            .chunks(c.len())
            .map(|row| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>())
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc })
            .0
    }

    /// Equiprobable bucket of the standard-normal style score.
    fn bucket_of(&self, s: &[f64]) -> usize {
        let score: f64 = self.style_score.iter().zip(s).map(|(a, b)| a * b).sum();
        self.thresholds.iter().filter(|&&t| score > t).count()
    }
}

fn mix<'a>(map: &'a [f64], v: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
    map.chunks(v.len()).map(move |row| row.iter().zip(v).map(|(a, b)| a * b).sum())
}

/// A generated dataset with its latent draws.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub data: Dataset<f64>,
    /// `[n, content_dim]`.
    pub content: Tensor<f64>,
    /// Style draws before selection, `[n, style_dim]`.
    pub style_raw: Tensor<f64>,
    /// Style after selection, `[n, style_dim]`.
    pub style: Tensor<f64>,
    pub cfg: SyntheticCausalConfig,
    pub seed: u64,
}

fn normal_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn synth_generate(cfg: &SyntheticCausalConfig, n: usize, seed: u64) -> Result<SynthDataset> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Invalid("need at least one sample".into()));
    }
    let mech = Mechanisms::new(cfg);
    // Independent streams, so changing rho never moves content draws.
    let stream = |k: u64| ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ k);
    let (mut c_rng, mut s_rng, mut sel_rng, mut noise_rng, mut redraw_rng) =
        (stream(1), stream(2), stream(3), stream(4), stream(5));
    let (dc, ds, k) = (cfg.content_dim, cfg.style_dim, cfg.classes);
    let mut content = Vec::with_capacity(n * dc);
    let mut style_raw = Vec::with_capacity(n * ds);
    let mut style = Vec::with_capacity(n * ds);
    let mut x = Vec::with_capacity(n * cfg.features());
    let (mut y, mut buckets) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let c = normal_vec(dc, &mut c_rng);
        let s0 = normal_vec(ds, &mut s_rng);
        let label = mech.label_of(&c);
        let forced = sel_rng.random::<f64>() < cfg.rho.abs();
        let mut s = s0.clone();
        if forced {
            let target = if cfg.rho > 0.0 { label } else { (label + 1) % k };
            // Draws come from a per-sample stream so rho only changes which
            // bucket is accepted, never how many draws later samples see.
            let mut local = ChaCha8Rng::seed_from_u64(redraw_rng.random());
            while mech.bucket_of(&s) != target {
                s = normal_vec(ds, &mut local);
            }
        } else {
            redraw_rng.random::<u64>();
        }
        let cn: Vec<f64> = normal_vec(cfg.content_features, &mut noise_rng);
        let sn: Vec<f64> = normal_vec(cfg.style_features, &mut noise_rng);
        let content_noise = (cfg.noise * cfg.noise + cfg.content_noise * cfg.content_noise).sqrt();
        x.extend(mix(&mech.content_mix, &c).zip(&cn).map(|(v, e)| v + content_noise * e));
        x.extend(mix(&mech.style_mix, &s).zip(&sn).map(|(v, e)| v + cfg.noise * e));
        buckets.push(mech.bucket_of(&s));
        y.push(label);
        content.extend(c);
        style_raw.extend(s0);
        style.extend(s);
    }
    x.iter_mut().for_each(|v| *v = (0.5 + SQUASH * *v).clamp(0.0, 1.0));
    Ok(SynthDataset {
        data: Dataset::new(Tensor::new([n, cfg.features()], x)?, y, Some(buckets), k)?,
        content: Tensor::new([n, dc], content)?,
        style_raw: Tensor::new([n, ds], style_raw)?,
        style: Tensor::new([n, ds], style)?,
        cfg: cfg.clone(),
        seed,
    })
}

/// Regenerates with `rho -> -rho`, keeping every content draw.
pub fn flip_association(ds: &SynthDataset) -> Result<SynthDataset> {
    let cfg = ds.cfg.clone().with_rho(-ds.cfg.rho);
    synth_generate(&cfg, ds.data.len(), ds.seed)
}

/// Plug-in mutual information (nats) between two discrete sequences.
pub fn mutual_information(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    let ka = a.iter().copied().max().unwrap_or(0) + 1;
    let kb = b.iter().copied().max().unwrap_or(0) + 1;
    let mut joint = vec![0usize; ka * kb];
    for (&i, &j) in a.iter().zip(b) {
        joint[i * kb + j] += 1;
    }
    let pa: Vec<f64> = (0..ka).map(|i| (0..kb).map(|j| joint[i * kb + j]).sum::<usize>() as f64 / n as f64).collect();
    let pb: Vec<f64> = (0..kb).map(|j| (0..ka).map(|i| joint[i * kb + j]).sum::<usize>() as f64 / n as f64).collect();
    let mut mi = 0.0;
    for i in 0..ka {
        for j in 0..kb {
            let p = joint[i * kb + j] as f64 / n as f64;
            if p > 0.0 {
                mi += p * (p / (pa[i] * pb[j])).ln();
            }
        }
    }
    mi.max(0.0)
}
