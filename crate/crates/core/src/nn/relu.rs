use crate::error::Result;
use crate::tensor::Tensor;

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Passes `out_grad` where the forward input was strictly positive. The subgradient at 0 is 0.
pub fn relu_backward(input: &Tensor, out_grad: &Tensor) -> Result<Tensor> {
    input.ensure_same_shape(out_grad, "relu gradient")?;
    let mut grad = out_grad.clone();
    for (g, &x) in grad.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(grad)
}
