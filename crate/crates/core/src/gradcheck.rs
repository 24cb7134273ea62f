//! Central finite differences for checking analytic gradients.
//!
//! Only forward evaluations are used here, so the results are independent
//! of the backward rules they are compared against.

use crate::error::Result;

/// Default perturbation for `f64` central differences.
pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` at `point` (a list of flat blocks).
pub fn numeric_gradient<F>(f: F, point: &[Vec<f64>], step: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[Vec<f64>]) -> Result<f64>,
{
    let mut work = point.to_vec();
    let mut grads = Vec::with_capacity(point.len());
    for b in 0..point.len() {
        let mut g = vec![0.0; point[b].len()];
        for i in 0..point[b].len() {
            let orig = work[b][i];
            work[b][i] = orig + step;
            let plus = f(&work)?;
            work[b][i] = orig - step;
            let minus = f(&work)?;
            work[b][i] = orig;
            g[i] = (plus - minus) / (2.0 * step);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Central difference of `f` along coordinate `index` of block `block` only.
pub fn numeric_partial<F>(f: F, point: &[Vec<f64>], block: usize, index: usize, step: f64) -> Result<f64>
where
    F: Fn(&[Vec<f64>]) -> Result<f64>,
{
    let mut work = point.to_vec();
    let orig = work[block][index];
    work[block][index] = orig + step;
    let plus = f(&work)?;
    work[block][index] = orig - step;
    let minus = f(&work)?;
    Ok((plus - minus) / (2.0 * step))
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm, with an absolute floor
/// so that two vanishing vectors compare equal.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error: length mismatch");
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// Largest elementwise `|a - b| / max(|a|, |b|, floor)`.
pub fn max_elementwise_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "max_elementwise_relative_error: length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
