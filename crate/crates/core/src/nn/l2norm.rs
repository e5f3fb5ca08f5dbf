//! Projection of the embedding onto the unit sphere, `y = x / ||x||`.

use crate::error::{Error, Result};

fn norm_checked(x: &[f64], epsilon: f64) -> Result<f64> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite("l2 normalization input".into()));
    }
    if norm <= epsilon {
        return Err(Error::Degenerate { norm, epsilon });
    }
    Ok(norm)
}

pub fn l2_normalize(x: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    let norm = norm_checked(x, epsilon)?;
    Ok(x.iter().map(|v| v / norm).collect())
}

/// Vector-Jacobian product of [`l2_normalize`]: `(g - y (y·g)) / ||x||`.
pub fn l2_normalize_backward(x: &[f64], out_grad: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if x.len() != out_grad.len() {
        return Err(Error::shape(format!(
            "normalization gradient length {}, expected {}",
            out_grad.len(),
            x.len()
        )));
    }
    let norm = norm_checked(x, epsilon)?;
    let y: Vec<f64> = x.iter().map(|v| v / norm).collect();
    let proj: f64 = y.iter().zip(out_grad).map(|(a, b)| a * b).sum();
    Ok(out_grad
        .iter()
        .zip(&y)
        .map(|(g, yi)| (g - yi * proj) / norm)
        .collect())
}
