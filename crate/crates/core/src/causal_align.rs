//! Style-side mathematics of distribution alignment.
//!
//! The style representation is modelled as `s ~ N(mu(x), sigma^2 I)` with
//! `mu(x) = W_s r(x)`. Its expected cross-entropy under a linear style
//! classifier `W_g` is bounded above in closed form by the Gaussian-style
//! softmax, whose denominator carries a `sigma^2/2 |W_g,j - W_g,i|^2` term per
//! class pair. The Monte-Carlo estimator here is the independent check on that
//! bound.
//!
//! `W_s` is never trained: [`orthogonal_style_map`] rebuilds it from the
//! content head `W_c` and the representation covariance `M`, choosing rows in
//! the null space of `W_c M` so that content and style logits are uncorrelated
//! whenever the representation is Gaussian with covariance `M`.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Style representation distribution `N(mean, sigma^2 I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleDistribution {
    pub mean: Vec<f64>,
    pub sigma: f64,
}

impl StyleDistribution {
    pub fn new(mean: Vec<f64>, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) {
            return Err(Error::Invalid(format!("style noise scale must be >= 0, got {sigma}")));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("style mean must be finite".into()));
        }
        Ok(StyleDistribution { mean, sigma })
    }
}

/// Per-class values of the Gaussian-style softmax.
///
/// `raw[i]` is the bound object used in the loss; the raw values do not sum to
/// one when `sigma > 0`. `normalized` rescales them to a distribution.
#[derive(Clone, Debug)]
pub struct GaussianSoftmax {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

fn style_logits(mu: &[f64], wg: &Tensor<f64>) -> Result<Vec<f64>> {
    let [k, ds] = wg.shape() else {
        return Err(Error::shape("gaussian_softmax", format!("W_g must be a matrix, got {:?}", wg.shape())));
    };
    if *ds != mu.len() || *k < 1 {
        return Err(Error::shape("gaussian_softmax", format!("mu has {} dims, W_g is {k}x{ds}", mu.len())));
    }
    Ok(wg
        .data()
        .chunks(*ds)
        .map(|row| row.iter().zip(mu).map(|(w, m)| w * m).sum())
        .collect())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `log` of the Gaussian-style softmax value for class `i`.
pub fn log_gaussian_softmax(mu: &[f64], wg: &Tensor<f64>, sigma: f64, i: usize) -> Result<f64> {
    if !(sigma >= 0.0) {
        return Err(Error::Invalid(format!("style noise scale must be >= 0, got {sigma}")));
    }
    let z = style_logits(mu, wg)?;
    let k = z.len();
    if i >= k {
        return Err(Error::LabelOutOfRange { label: i, classes: k });
    }
    let ds = mu.len();
    let w = wg.data();
    let wi = &w[i * ds..(i + 1) * ds];
    let half_var = sigma * sigma / 2.0;
    let terms = (0..k).map(|j| {
        let wj = &w[j * ds..(j + 1) * ds];
        let d2: f64 = wj.iter().zip(wi).map(|(a, b)| (a - b).powi(2)).sum();
        z[j] + half_var * d2
    });
    Ok(z[i] - log_sum_exp(terms))
}

/// Gaussian-style softmax value for class `i`:
/// `exp(W_i.mu) / sum_j exp(W_j.mu + sigma^2/2 |W_j - W_i|^2)`.
pub fn gaussian_softmax(mu: &[f64], wg: &Tensor<f64>, sigma: f64, i: usize) -> Result<f64> {
    Ok(log_gaussian_softmax(mu, wg, sigma, i)?.exp())
}

/// All `k` per-class values, raw and renormalized.
pub fn gaussian_softmax_all(mu: &[f64], wg: &Tensor<f64>, sigma: f64) -> Result<GaussianSoftmax> {
    let k = wg.shape().first().copied().unwrap_or(0);
    let logs = (0..k)
        .map(|i| log_gaussian_softmax(mu, wg, sigma, i))
        .collect::<Result<Vec<_>>>()?;
    let lse = log_sum_exp(logs.iter().copied());
    Ok(GaussianSoftmax {
        raw: logs.iter().map(|l| l.exp()).collect(),
        normalized: logs.iter().map(|l| (l - lse).exp()).collect(),
    })
}

/// Closed-form upper bound on `E_s CE(softmax(W_g s), y)` for
/// `s ~ N(mu, sigma^2 I)`.
pub fn style_ce_upper_bound(dist: &StyleDistribution, wg: &Tensor<f64>, y: usize) -> Result<f64> {
    Ok(-log_gaussian_softmax(&dist.mean, wg, dist.sigma, y)?)
}

/// Monte-Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
}

/// Monte-Carlo estimate of `E_s CE(logits(s), y)` for `s ~ N(mean, sigma^2 I)`
/// and an arbitrary (possibly non-linear) logit map.
pub fn mc_expected_ce<F>(dist: &StyleDistribution, logits: F, y: usize, n_samples: usize, seed: u64) -> Result<McEstimate>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if n_samples < 2 {
        return Err(Error::Invalid(format!("need at least 2 samples, got {n_samples}")));
    }
    let ce = |s: &[f64]| -> Result<f64> {
        let z = logits(s);
        if y >= z.len() {
            return Err(Error::LabelOutOfRange { label: y, classes: z.len() });
        }
        Ok(log_sum_exp(z.iter().copied()) - z[y])
    };
    if dist.sigma == 0.0 {
        return Ok(McEstimate {
            mean: ce(&dist.mean)?,
            stderr: 0.0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = vec![0.0; dist.mean.len()];
    // Welford
    let (mut mean, mut m2) = (0.0, 0.0);
    for t in 0..n_samples {
        for (v, &m) in s.iter_mut().zip(&dist.mean) {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v = m + dist.sigma * n;
        }
        let x = ce(&s)?;
        let delta = x - mean;
        mean += delta / (t + 1) as f64;
        m2 += delta * (x - mean);
    }
    let var = m2 / (n_samples - 1) as f64;
    Ok(McEstimate {
        mean,
        stderr: (var / n_samples as f64).sqrt(),
    })
}

/// Monte-Carlo estimate of the expected style cross-entropy under a linear
/// style classifier `W_g` (`k x d_s`).
pub fn mc_style_ce(dist: &StyleDistribution, wg: &Tensor<f64>, y: usize, n_samples: usize, seed: u64) -> Result<McEstimate> {
    style_logits(&dist.mean, wg)?;
    mc_expected_ce(dist, |s| style_logits(s, wg).expect("shape checked"), y, n_samples, seed)
}

/// Running estimate of the representation mean `m` and covariance `M`.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceEstimate {
    pub mean: Vec<f64>,
    /// `d x d`, symmetric positive semi-definite.
    pub cov: Tensor<f64>,
    pub ema_decay: f64,
    pub shrinkage: f64,
}

impl CovarianceEstimate {
    /// `M = I`, `m = 0`.
    pub fn identity(dim: usize, ema_decay: f64, shrinkage: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&ema_decay) || !(0.0..=1.0).contains(&shrinkage) {
            return Err(Error::Invalid(format!(
                "ema decay must be in [0,1) and shrinkage in [0,1], got {ema_decay}, {shrinkage}"
            )));
        }
        Ok(CovarianceEstimate {
            mean: vec![0.0; dim],
            cov: Tensor::eye(dim),
            ema_decay,
            shrinkage,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// EMA update from a `[n, d]` batch (unbiased batch covariance), then
    /// shrinkage toward `tr(M)/d * I`.
    pub fn update<T: Real>(&mut self, batch: &Tensor<T>) -> Result<()> {
        let d = self.dim();
        let [n, bd] = batch.shape() else {
            return Err(Error::shape("update_covariance", format!("batch must be [n, d], got {:?}", batch.shape())));
        };
        let n = *n;
        if *bd != d {
            return Err(Error::shape("update_covariance", format!("batch width {bd} vs estimate {d}")));
        }
        if n < 2 {
            return Err(Error::Invalid(format!("covariance update needs >= 2 samples, got {n}")));
        }
        let x: Vec<f64> = batch.data().iter().map(|v| v.as_f64()).collect();
        let mut bmean = vec![0.0; d];
        for row in x.chunks(d) {
            for (m, v) in bmean.iter_mut().zip(row) {
                *m += v;
            }
        }
        bmean.iter_mut().for_each(|m| *m /= n as f64);
        let centered: Vec<f64> = x
            .chunks(d)
            .flat_map(|row| row.iter().zip(&bmean).map(|(v, m)| v - m))
            .collect();
        let mut bcov = vec![0.0; d * d];
        f64::gemm(
            d,
            n,
            d,
            1.0 / (n - 1) as f64,
            &centered,
            (1, d as isize),
            &centered,
            (d as isize, 1),
            0.0,
            &mut bcov,
            (d as isize, 1),
        );
        let rho = self.ema_decay;
        for (m, b) in self.mean.iter_mut().zip(&bmean) {
            *m = rho * *m + (1.0 - rho) * b;
        }
        let cov = self.cov.data_mut();
        for (c, b) in cov.iter_mut().zip(&bcov) {
            *c = rho * *c + (1.0 - rho) * b;
        }
        // exact symmetry
        for i in 0..d {
            for j in i + 1..d {
                let s = 0.5 * (cov[i * d + j] + cov[j * d + i]);
                cov[i * d + j] = s;
                cov[j * d + i] = s;
            }
        }
        let shr = self.shrinkage;
        if shr > 0.0 {
            let trace_avg = (0..d).map(|i| cov[i * d + i]).sum::<f64>() / d as f64;
            cov.iter_mut().for_each(|c| *c *= 1.0 - shr);
            for i in 0..d {
                cov[i * d + i] += shr * trace_avg;
            }
        }
        Ok(())
    }
}

/// Functional form of [`CovarianceEstimate::update`].
pub fn update_covariance<T: Real>(est: &CovarianceEstimate, batch: &Tensor<T>) -> Result<CovarianceEstimate> {
    let mut next = est.clone();
    next.update(batch)?;
    Ok(next)
}

/// Singular values below this fraction of the largest count as zero.
pub const NULL_SPACE_RTOL: f64 = 1e-8;

/// Right singular vectors of `W_c M` with singular value below
/// `NULL_SPACE_RTOL * sigma_max`, ordered by ascending singular value (ties by
/// index) and sign-fixed so the first non-negligible entry is positive.
fn null_basis(wc: &Tensor<f64>, est: &CovarianceEstimate) -> Result<DMatrix<f64>> {
    let [k, d] = wc.shape() else {
        return Err(Error::shape("orthogonal_style_map", format!("W_c must be a matrix, got {:?}", wc.shape())));
    };
    let (k, d) = (*k, *d);
    if est.dim() != d {
        return Err(Error::shape("orthogonal_style_map", format!("W_c has {d} columns, M is {}x{}", est.dim(), est.dim())));
    }
    let wc_m = DMatrix::from_row_slice(k, d, wc.data()) * DMatrix::from_row_slice(d, d, est.cov.data());
    // Square zero-padded copy so the SVD returns a full set of right vectors.
    let mut square = DMatrix::<f64>::zeros(d.max(k), d);
    square.view_mut((0, 0), (k, d)).copy_from(&wc_m);
    let svd = square.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Invalid("SVD did not return right singular vectors".into()))?;
    let values = &svd.singular_values;
    let sigma_max = values.iter().copied().fold(0.0, f64::max);
    let tol = NULL_SPACE_RTOL * sigma_max;
    let mut null: Vec<(f64, usize)> = values
        .iter()
        .enumerate()
        .filter(|(_, &s)| sigma_max == 0.0 || s < tol)
        .map(|(i, &s)| (s, i))
        .collect();
    null.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut basis = DMatrix::<f64>::zeros(null.len(), d);
    for (r, &(_, i)) in null.iter().enumerate() {
        let lead = v_t.row(i).iter().copied().find(|v| v.abs() > 1e-12).unwrap_or(1.0);
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        basis.row_mut(r).copy_from(&(v_t.row(i) * sign));
    }
    Ok(basis)
}

fn to_tensor(m: &DMatrix<f64>) -> Result<Tensor<f64>> {
    let data = (0..m.nrows()).flat_map(|r| m.row(r).iter().copied().collect::<Vec<_>>()).collect();
    Tensor::new([m.nrows(), m.ncols()], data)
}

/// Rows spanning part of the null space of `W_c M`, so `W_s M W_c^T = 0`.
///
/// Rows are the first `style_dim` vectors of the null basis: right singular
/// vectors of `W_c M` with (numerically) zero singular value, ordered by
/// ascending singular value (ties by index), sign-fixed so the first
/// non-negligible entry is positive.
pub fn orthogonal_style_map(wc: &Tensor<f64>, est: &CovarianceEstimate, style_dim: usize) -> Result<Tensor<f64>> {
    if style_dim == 0 {
        return Err(Error::Invalid("style dimension must be >= 1".into()));
    }
    let basis = null_basis(wc, est)?;
    if style_dim > basis.nrows() {
        return Err(Error::StyleDim {
            requested: style_dim,
            available: basis.nrows(),
        });
    }
    to_tensor(&basis.rows(0, style_dim).into_owned())
}

/// Re-projection that keeps the style coordinates continuous.
///
/// With many (numerically) zero singular values the ordering inside the null
/// space is arbitrary, so [`orthogonal_style_map`] can return a different
/// subspace after a tiny change of `W_c` or `M`. This returns instead the
/// matrix with orthonormal rows in `null(W_c M)` closest to `prev`: with `N`
/// the null basis and `prev N^T = U S V^T`, the map is `U V^T N`. Falls back
/// to [`orthogonal_style_map`] when `prev` has (nearly) lost rank against the
/// new null space.
pub fn realign_style_map(prev: &Tensor<f64>, wc: &Tensor<f64>, est: &CovarianceEstimate) -> Result<Tensor<f64>> {
    let [style_dim, d] = prev.shape() else {
        return Err(Error::shape("realign_style_map", format!("W_s must be a matrix, got {:?}", prev.shape())));
    };
    let (style_dim, d) = (*style_dim, *d);
    let basis = null_basis(wc, est)?;
    if style_dim == 0 || basis.ncols() != d {
        return Err(Error::shape("realign_style_map", format!("W_s {:?} vs W_c {:?}", prev.shape(), wc.shape())));
    }
    if style_dim > basis.nrows() {
        return Err(Error::StyleDim {
            requested: style_dim,
            available: basis.nrows(),
        });
    }
    let overlap = DMatrix::from_row_slice(style_dim, d, prev.data()) * basis.transpose();
    let svd = overlap.svd(true, true);
    let smallest = svd.singular_values.iter().copied().fold(f64::INFINITY, f64::min);
    match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) if smallest > 1e-6 => to_tensor(&(u * v_t * basis)),
        _ => orthogonal_style_map(wc, est, style_dim),
    }
}

/// `max |W_s M W_c^T|`.
pub fn orthogonality_residual(ws: &Tensor<f64>, wc: &Tensor<f64>, cov: &Tensor<f64>) -> f64 {
    let (ds, d) = (ws.shape()[0], ws.shape()[1]);
    let k = wc.shape()[0];
    let prod = DMatrix::from_row_slice(ds, d, ws.data())
        * DMatrix::from_row_slice(d, d, cov.data())
        * DMatrix::from_row_slice(k, d, wc.data()).transpose();
    prod.iter().map(|v| v.abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Tensor<f64> {
        Tensor::uniform([rows, cols], -scale, scale, rng)
    }

    #[test]
    fn zero_sigma_is_plain_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let wg = rand_matrix(4, 3, 1.0, &mut rng);
        let mu = vec![0.3, -1.2, 0.7];
        let z = style_logits(&mu, &wg).unwrap();
        let lse = log_sum_exp(z.iter().copied());
        for i in 0..4 {
            let p = gaussian_softmax(&mu, &wg, 0.0, i).unwrap();
            assert!((p - (z[i] - lse).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_give_uniform() {
        let wg = Tensor::zeros([5, 3]);
        for i in 0..5 {
            let p = gaussian_softmax(&[1.0, 2.0, 3.0], &wg, 0.7, i).unwrap();
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn bound_value_for_known_logits() {
        // logits [ln 9, 0] via W_g = [[ln 9], [0]], mu = [1]
        let wg = Tensor::new([2, 1], vec![9f64.ln(), 0.0]).unwrap();
        let dist = StyleDistribution::new(vec![1.0], 0.0).unwrap();
        let loss = style_ce_upper_bound(&dist, &wg, 0).unwrap();
        assert!((loss - (-(0.9f64).ln())).abs() < 1e-12);
        assert!((loss - 0.10536).abs() < 1e-5);
    }

    #[test]
    fn negative_sigma_rejected() {
        let wg = Tensor::zeros([2, 1]);
        assert!(gaussian_softmax(&[0.0], &wg, -0.1, 0).is_err());
        assert!(StyleDistribution::new(vec![0.0], -1.0).is_err());
    }

    #[test]
    fn label_out_of_range() {
        let wg = Tensor::zeros([2, 1]);
        let dist = StyleDistribution::new(vec![0.0], 1.0).unwrap();
        assert!(matches!(style_ce_upper_bound(&dist, &wg, 2), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn raw_values_do_not_sum_to_one_but_view_does() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let wg = rand_matrix(3, 2, 1.0, &mut rng);
        let g = gaussian_softmax_all(&[0.5, -0.5], &wg, 1.0).unwrap();
        let raw: f64 = g.raw.iter().sum();
        let norm: f64 = g.normalized.iter().sum();
        assert!(raw < 1.0);
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mc_degenerate_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let wg = rand_matrix(4, 3, 1.0, &mut rng);
        let dist0 = StyleDistribution::new(vec![0.1, 0.2, 0.3], 0.0).unwrap();
        let est = mc_style_ce(&dist0, &wg, 2, 1000, 9).unwrap();
        assert_eq!(est.stderr, 0.0);
        assert!((est.mean - style_ce_upper_bound(&dist0, &wg, 2).unwrap()).abs() < 1e-12);

        let dist = StyleDistribution::new(vec![0.1, 0.2, 0.3], 0.5).unwrap();
        let a = mc_style_ce(&dist, &wg, 1, 100_000, 42).unwrap();
        let b = mc_style_ce(&dist, &wg, 1, 100_000, 42).unwrap();
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert!(mc_style_ce(&dist, &wg, 1, 1, 42).is_err());
    }

    #[test]
    fn covariance_no_decay_equals_shrunk_batch_covariance() {
        let batch = Tensor::new([3, 2], vec![1.0, 2.0, 3.0, 0.0, 5.0, 4.0]).unwrap();
        let mut est = CovarianceEstimate::identity(2, 0.0, 0.1).unwrap();
        est.update(&batch).unwrap();
        // unbiased covariance of the columns
        let (c00, c11, c01) = (4.0, 4.0, 2.0);
        let tr = (c00 + c11) / 2.0;
        let expect = [0.9 * c00 + 0.1 * tr, 0.9 * c01, 0.9 * c01, 0.9 * c11 + 0.1 * tr];
        for (got, want) in est.cov.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(est.mean, vec![3.0, 2.0]);
    }

    #[test]
    fn constant_batches_leave_isotropic_component() {
        let mut est = CovarianceEstimate::identity(3, 0.5, 0.1).unwrap();
        est.cov = Tensor::new([3, 3], vec![2.0, 0.5, 0.1, 0.5, 1.0, 0.3, 0.1, 0.3, 0.5]).unwrap();
        let batch = Tensor::new([4, 3], [1.0, 2.0, 3.0].repeat(4)).unwrap();
        for _ in 0..200 {
            est.update(&batch).unwrap();
        }
        let c = est.cov.data();
        let diag = c[0];
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { diag } else { 0.0 };
                assert!((c[i * 3 + j] - want).abs() <= 1e-6 * diag.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn covariance_rejects_tiny_batch() {
        let mut est = CovarianceEstimate::identity(2, 0.9, 0.1).unwrap();
        assert!(est.update(&Tensor::<f64>::zeros([1, 2])).is_err());
        assert!(CovarianceEstimate::identity(2, 1.0, 0.1).is_err());
    }

    #[test]
    fn axis_aligned_style_map() {
        let wc = Tensor::new([1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let est = CovarianceEstimate::identity(3, 0.99, 0.0).unwrap();
        let ws = orthogonal_style_map(&wc, &est, 2).unwrap();
        assert_eq!(ws.shape(), &[2, 3]);
        for row in ws.data().chunks(3) {
            assert!(row[0].abs() < 1e-12);
            let norm: f64 = row.iter().map(|v| v * v).sum();
            assert!((norm - 1.0).abs() < 1e-12);
        }
        let r = ws.data();
        let dot: f64 = (0..3).map(|t| r[t] * r[3 + t]).sum();
        assert!(dot.abs() < 1e-12);
        assert!(orthogonality_residual(&ws, &wc, &est.cov) < 1e-12);
    }

    #[test]
    fn style_map_is_deterministic_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let wc = rand_matrix(3, 8, 1.0, &mut rng);
        let est = CovarianceEstimate::identity(8, 0.99, 0.1).unwrap();
        let a = orthogonal_style_map(&wc, &est, 5).unwrap();
        let b = orthogonal_style_map(&wc, &est, 5).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            orthogonal_style_map(&wc, &est, 6),
            Err(Error::StyleDim { requested: 6, available: 5 })
        ));
    }

    fn max_gram_error(ws: &Tensor<f64>) -> f64 {
        let (r, d) = (ws.shape()[0], ws.shape()[1]);
        let m = DMatrix::from_row_slice(r, d, ws.data());
        (&m * m.transpose() - DMatrix::<f64>::identity(r, r)).abs().max()
    }

    #[test]
    fn realign_keeps_valid_map_and_moves_little() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let wc = rand_matrix(3, 40, 1.0, &mut rng);
        let est = CovarianceEstimate::identity(40, 0.99, 0.1).unwrap();
        let ws = orthogonal_style_map(&wc, &est, 16).unwrap();
        let same = realign_style_map(&ws, &wc, &est).unwrap();
        let diff = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff(&same, &ws) < 1e-9);

        let nudge = rand_matrix(3, 40, 1e-5, &mut rng);
        let wc2 = Tensor::new([3, 40], wc.data().iter().zip(nudge.data()).map(|(a, b)| a + b).collect()).unwrap();
        let moved = realign_style_map(&ws, &wc2, &est).unwrap();
        assert!(diff(&moved, &ws) < 1e-3);
        assert!(orthogonality_residual(&moved, &wc2, &est.cov) < 1e-9);
        assert!(max_gram_error(&moved) < 1e-9);
    }
}
