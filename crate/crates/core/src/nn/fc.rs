//! Fully-connected layer `y = W x + b` on a flattened input.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct FcGrads {
    pub weight: Tensor,
    pub bias: Tensor,
    pub input: Vec<f64>,
}

fn check(input: &[f64], weights: &Tensor) -> Result<(usize, usize)> {
    let (rows, cols) = match weights.shape()[..] {
        [r, c] => (r, c),
        _ => {
            return Err(Error::shape(format!(
                "fc weights must be rank 2, got {:?}",
                weights.shape()
            )))
        }
    };
    if input.len() != cols {
        return Err(Error::shape(format!(
            "fc input length {}, weights expect {cols}",
            input.len()
        )));
    }
    Ok((rows, cols))
}

pub fn fc_forward(input: &[f64], weights: &Tensor, bias: &Tensor) -> Result<Vec<f64>> {
    let (rows, cols) = check(input, weights)?;
    if bias.shape() != [rows] {
        return Err(Error::shape(format!(
            "fc bias shape {:?}, expected [{rows}]",
            bias.shape()
        )));
    }
    let w = weights.data();
    Ok((0..rows)
        .map(|r| {
            let row = &w[r * cols..(r + 1) * cols];
            bias.data()[r] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect())
}

/// `weight = out_grad ⊗ input`, `bias = out_grad`, `input = Wᵀ out_grad`.
pub fn fc_backward(input: &[f64], weights: &Tensor, out_grad: &[f64]) -> Result<FcGrads> {
    let (rows, cols) = check(input, weights)?;
    if out_grad.len() != rows {
        return Err(Error::shape(format!(
            "fc output gradient length {}, expected {rows}",
            out_grad.len()
        )));
    }
    let w = weights.data();
    let mut dw = vec![0.0; rows * cols];
    let mut dx = vec![0.0; cols];
    for (r, &g) in out_grad.iter().enumerate() {
        let w_row = &w[r * cols..(r + 1) * cols];
        let dw_row = &mut dw[r * cols..(r + 1) * cols];
        for ((dwv, &x), (dxv, &wv)) in dw_row.iter_mut().zip(input).zip(dx.iter_mut().zip(w_row)) {
            *dwv = g * x;
            *dxv += g * wv;
        }
    }
    Ok(FcGrads {
        weight: Tensor::from_vec(vec![rows, cols], dw)?,
        bias: Tensor::from_vec(vec![rows], out_grad.to_vec())?,
        input: dx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights() {
        let w = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let x = [0.5, -2.0, 3.0];
        assert_eq!(fc_forward(&x, &w, &Tensor::zeros(&[3])).unwrap(), x);
    }

    #[test]
    fn zero_weights_return_bias() {
        let b = Tensor::from_vec(vec![2], vec![1.5, -0.5]).unwrap();
        let out = fc_forward(&[9.0, 8.0, 7.0], &Tensor::zeros(&[2, 3]), &b).unwrap();
        assert_eq!(out, vec![1.5, -0.5]);
    }

    #[test]
    fn length_mismatch() {
        let w = Tensor::zeros(&[2, 3]);
        assert!(fc_forward(&[1.0; 4], &w, &Tensor::zeros(&[2])).is_err());
        assert!(fc_forward(&[1.0; 3], &w, &Tensor::zeros(&[3])).is_err());
        assert!(fc_backward(&[1.0; 3], &w, &[1.0; 3]).is_err());
    }

    #[test]
    fn backward_closed_forms() {
        let w = Tensor::from_fn(&[2, 3], |i| i as f64);
        let x = [1.0, 2.0, 3.0];
        let g = fc_backward(&x, &w, &[1.0, -1.0]).unwrap();
        assert_eq!(g.weight.data(), &[1.0, 2.0, 3.0, -1.0, -2.0, -3.0]);
        assert_eq!(g.bias.data(), &[1.0, -1.0]);
        assert_eq!(g.input, vec![-3.0, -3.0, -3.0]);
    }
}
