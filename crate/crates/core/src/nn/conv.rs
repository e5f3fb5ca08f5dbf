//! Valid (unpadded) 2-D convolution over `(channel, height, width)` maps.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spatial output extent of a valid window sweep: `floor((input - window) / stride) + 1`.
pub fn output_extent(input: usize, window: usize, stride: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::shape("stride must be at least 1"));
    }
    if window == 0 || window > input {
        return Err(Error::shape(format!(
            "window {window} does not fit extent {input}"
        )));
    }
    Ok((input - window) / stride + 1)
}

/// Gradients of a convolution with respect to its weights, bias and input.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub weight: Tensor,
    pub bias: Tensor,
    pub input: Tensor,
}

struct Geometry {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
}

fn geometry(input: &Tensor, weights: &Tensor, stride: usize) -> Result<Geometry> {
    let (in_c, in_h, in_w) = input.dims3()?;
    let (out_c, k_c, kh, kw) = weights.dims4()?;
    if k_c != in_c {
        return Err(Error::shape(format!(
            "kernel has {k_c} channels, input has {in_c}"
        )));
    }
    let out_h = output_extent(in_h, kh, stride)?;
    let out_w = output_extent(in_w, kw, stride)?;
    Ok(Geometry {
        in_c,
        in_h,
        in_w,
        out_c,
        kh,
        kw,
        out_h,
        out_w,
    })
}

/// Each output is `bias[o] + <kernel[o], receptive field>`.
pub fn conv2d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
) -> Result<Tensor> {
    let g = geometry(input, weights, stride)?;
    if bias.shape() != [g.out_c] {
        return Err(Error::shape(format!(
            "bias shape {:?}, expected [{}]",
            bias.shape(),
            g.out_c
        )));
    }
    input.ensure_finite("convolution input")?;

    let x = input.data();
    let w = weights.data();
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.out_c * plane];
    for o in 0..g.out_c {
        let out_plane = &mut out[o * plane..(o + 1) * plane];
        out_plane.fill(bias.data()[o]);
        for c in 0..g.in_c {
            let x_plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = w[((o * g.in_c + c) * g.kh + ky) * g.kw + kx];
                    for oy in 0..g.out_h {
                        let row = (oy * stride + ky) * g.in_w + kx;
                        let out_row = &mut out_plane[oy * g.out_w..(oy + 1) * g.out_w];
                        for (ox, ov) in out_row.iter_mut().enumerate() {
                            *ov += wv * x_plane[row + ox * stride];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![g.out_c, g.out_h, g.out_w], out)
}

pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    stride: usize,
    out_grad: &Tensor,
) -> Result<ConvGrads> {
    let g = geometry(input, weights, stride)?;
    if out_grad.shape() != [g.out_c, g.out_h, g.out_w] {
        return Err(Error::shape(format!(
            "output gradient shape {:?}, expected [{}, {}, {}]",
            out_grad.shape(),
            g.out_c,
            g.out_h,
            g.out_w
        )));
    }

    let x = input.data();
    let w = weights.data();
    let dy = out_grad.data();
    let plane = g.out_h * g.out_w;
    let in_plane = g.in_h * g.in_w;
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.out_c];
    let mut dx = vec![0.0; x.len()];

    for o in 0..g.out_c {
        let dy_plane = &dy[o * plane..(o + 1) * plane];
        db[o] = dy_plane.iter().sum();
        for c in 0..g.in_c {
            let x_plane = &x[c * in_plane..(c + 1) * in_plane];
            let dx_plane = &mut dx[c * in_plane..(c + 1) * in_plane];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wi = ((o * g.in_c + c) * g.kh + ky) * g.kw + kx;
                    let wv = w[wi];
                    let mut acc = 0.0;
                    for oy in 0..g.out_h {
                        let row = (oy * stride + ky) * g.in_w + kx;
                        let dy_row = &dy_plane[oy * g.out_w..(oy + 1) * g.out_w];
                        for (ox, &d) in dy_row.iter().enumerate() {
                            let xi = row + ox * stride;
                            acc += d * x_plane[xi];
                            dx_plane[xi] += d * wv;
                        }
                    }
                    dw[wi] = acc;
                }
            }
        }
    }

    Ok(ConvGrads {
        weight: Tensor::from_vec(weights.shape().to_vec(), dw)?,
        bias: Tensor::from_vec(vec![g.out_c], db)?,
        input: Tensor::from_vec(input.shape().to_vec(), dx)?,
    })
}
