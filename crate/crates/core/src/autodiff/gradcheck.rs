use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// `|a - b| / max(|a| + |b|, floor)` in the Euclidean norm.
///
/// The floor keeps all-zero gradients from dividing by zero; below it the
/// absolute difference is what gets reported.
pub fn relative_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-8)
}
