//! Overlapping max pooling with argmax routing.

use crate::error::{Error, Result};
use crate::nn::conv::output_extent;
use crate::tensor::Tensor;

/// Flat input index of the maximum of each pooling window, from a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolIndices {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    argmax: Vec<usize>,
}

impl PoolIndices {
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }
}

/// Max over each `window × window` region spaced `stride` apart. Ties go to the
/// first maximal element in row-major window order.
pub fn maxpool_forward(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, PoolIndices)> {
    let (c, h, w) = input.dims3()?;
    let out_h = output_extent(h, window, stride)?;
    let out_w = output_extent(w, window, stride)?;
    let x = input.data();

    let mut out = Vec::with_capacity(c * out_h * out_w);
    let mut argmax = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut best_idx = base + oy * stride * w + ox * stride;
                let mut best = x[best_idx];
                for dy in 0..window {
                    let row = base + (oy * stride + dy) * w + ox * stride;
                    for (dx, &v) in x[row..row + window].iter().enumerate() {
                        if v > best {
                            best = v;
                            best_idx = row + dx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }

    let output = Tensor::from_vec(vec![c, out_h, out_w], out)?;
    let indices = PoolIndices {
        input_shape: input.shape().to_vec(),
        output_shape: output.shape().to_vec(),
        argmax,
    };
    Ok((output, indices))
}

/// Routes each output gradient to its recorded argmax. Overlapping windows accumulate.
pub fn maxpool_backward(indices: &PoolIndices, out_grad: &Tensor) -> Result<Tensor> {
    if out_grad.shape() != indices.output_shape.as_slice() {
        return Err(Error::shape(format!(
            "pool output gradient shape {:?}, expected {:?}",
            out_grad.shape(),
            indices.output_shape
        )));
    }
    let mut grad = Tensor::zeros(&indices.input_shape);
    let dx = grad.data_mut();
    for (&src, &g) in indices.argmax.iter().zip(out_grad.data()) {
        dx[src] += g;
    }
    Ok(grad)
}
