//! Similarity metrics (MSE, batch-global NCC), the bending-energy baseline
//! regularizer, and the convex total-loss combination.

use thiserror::Error;

use crate::tensor::{rank3_zero, Rank3};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("beta = {beta} outside [0, 1]")]
    InvalidBeta { beta: f64 },
}

const EPS_VAR: f64 = 1e-12;

/// Mean squared error over a batch, with the gradient w.r.t. the moving
/// values: loss = (1/n) sum (m - f)^2, dloss/dm_p = 2 (m_p - f_p) / n.
pub fn mse_batch(f: &[f64], m: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(f.len(), m.len());
    assert!(!f.is_empty());
    let n = f.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(f.len());
    for (&fv, &mv) in f.iter().zip(m) {
        let d = mv - fv;
        loss += d * d;
        grad.push(2.0 * d / n);
    }
    (loss / n, grad)
}

/// One minus the batch-global normalized cross-correlation, with the exact
/// gradient w.r.t. the moving values. Affinely rescaling m with positive
/// slope leaves the loss unchanged.
pub fn ncc_batch(f: &[f64], m: &[f64]) -> Result<(f64, Vec<f64>), LossError> {
    assert_eq!(f.len(), m.len());
    let n = f.len();
    if n < 2 {
        return Err(LossError::DegenerateBatch(format!(
            "NCC needs at least 2 samples, got {n}"
        )));
    }
    let nf = n as f64;
    let f_mean = f.iter().sum::<f64>() / nf;
    let m_mean = m.iter().sum::<f64>() / nf;
    let mut s_ff = 0.0;
    let mut s_mm = 0.0;
    let mut s_fm = 0.0;
    for (&fv, &mv) in f.iter().zip(m) {
        let df = fv - f_mean;
        let dm = mv - m_mean;
        s_ff += df * df;
        s_mm += dm * dm;
        s_fm += df * dm;
    }
    let sigma_f = (s_ff / nf).sqrt();
    let sigma_m = (s_mm / nf).sqrt();
    if sigma_f <= EPS_VAR || sigma_m <= EPS_VAR {
        return Err(LossError::DegenerateBatch(format!(
            "batch standard deviation too small (sigma_f = {sigma_f:.3e}, sigma_m = {sigma_m:.3e})"
        )));
    }
    let denom = (s_ff * s_mm).sqrt();
    let r = s_fm / denom;
    // d r / d m_p = [ (f_p - fbar) - (S_fm / S_mm)(m_p - mbar) ] / sqrt(S_ff S_mm)
    let ratio = s_fm / s_mm;
    let mut grad = Vec::with_capacity(n);
    for (&fv, &mv) in f.iter().zip(m) {
        let dr = ((fv - f_mean) - ratio * (mv - m_mean)) / denom;
        grad.push(-dr);
    }
    Ok((1.0 - r, grad))
}

/// Thin-plate bending energy density at a point: the full double sum
/// sum_ijk H\[i\]\[j\]\[k\]^2 (mixed partials counted twice), with its
/// gradient 2H.
pub fn bending_energy_point<const D: usize>(hess: &Rank3<f64, D>) -> (f64, Rank3<f64, D>) {
    let mut value = 0.0;
    let mut grad = rank3_zero::<f64, D>();
    for i in 0..D {
        for j in 0..D {
            for k in 0..D {
                let h = hess[i][j][k];
                value += h * h;
                grad[i][j][k] = 2.0 * h;
            }
        }
    }
    (value, grad)
}

/// Convex combination (1 - beta) sim + beta reg.
pub fn total_loss(sim: f64, reg: f64, beta: f64) -> Result<f64, LossError> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(LossError::InvalidBeta { beta });
    }
    Ok((1.0 - beta) * sim + beta * reg)
}
