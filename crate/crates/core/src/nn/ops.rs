//! Parameter-free layers: activations, nearest-neighbour upsampling,
//! cropping, and residual addition.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn forward(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Relu => x.map(|v| v.max(0.0)),
            Activation::Tanh => x.map(f64::tanh),
        }
    }

    /// Backward pass expressed in terms of the forward output. The ReLU
    /// derivative at 0 is 0.
    pub fn backward(self, grad_out: &Tensor, output: &Tensor) -> Result<Tensor> {
        ensure_shape(output.shape(), grad_out.shape())?;
        let mut g = grad_out.clone();
        for (gv, &y) in g.data_mut().iter_mut().zip(output.data()) {
            *gv *= match self {
                Activation::Relu => {
                    if y > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                Activation::Tanh => 1.0 - y * y,
            };
        }
        Ok(g)
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        s[a] = s[a + 1] * shape[a + 1];
    }
    s
}

/// For every output element, the flat offset of the input element it copies.
/// Output axis `a` of extent `out[a]` maps output coordinate `o` to
/// input coordinate `map(a, o)`.
fn gather_offsets(input: &[usize], output: &[usize], map: impl Fn(usize, usize) -> usize) -> Vec<usize> {
    let in_strides = strides(input);
    let total: usize = output.iter().product();
    let mut offsets = Vec::with_capacity(total);
    let mut coord = vec![0usize; output.len()];
    for _ in 0..total {
        let off = coord
            .iter()
            .enumerate()
            .map(|(a, &o)| map(a, o) * in_strides[a])
            .sum();
        offsets.push(off);
        for a in (0..coord.len()).rev() {
            coord[a] += 1;
            if coord[a] < output[a] {
                break;
            }
            coord[a] = 0;
        }
    }
    offsets
}

/// Nearest-neighbour upsampling by integer `factors`, one per axis.
pub fn upsample_nearest_forward(x: &Tensor, factors: &[usize]) -> Result<Tensor> {
    check_factors(x, factors)?;
    let out_shape: Vec<usize> = x.shape().iter().zip(factors).map(|(d, f)| d * f).collect();
    let offsets = gather_offsets(x.shape(), &out_shape, |a, o| o / factors[a]);
    let data = offsets.iter().map(|&i| x.data()[i]).collect();
    Tensor::from_vec(&out_shape, data)
}

/// Sums the gradient over each repetition block.
pub fn upsample_nearest_backward(grad_out: &Tensor, factors: &[usize]) -> Result<Tensor> {
    if factors.len() != grad_out.ndim() || factors.iter().any(|&f| f == 0) {
        return Err(Error::InvalidArgument(format!("bad upsampling factors {factors:?}")));
    }
    let mut in_shape = Vec::with_capacity(factors.len());
    for (&d, &f) in grad_out.shape().iter().zip(factors) {
        if d % f != 0 {
            return Err(Error::InvalidArgument(format!(
                "gradient extent {d} is not a multiple of factor {f}"
            )));
        }
        in_shape.push(d / f);
    }
    let offsets = gather_offsets(&in_shape, grad_out.shape(), |a, o| o / factors[a]);
    let mut g = Tensor::zeros(&in_shape);
    let gd = g.data_mut();
    for (&i, &v) in offsets.iter().zip(grad_out.data()) {
        gd[i] += v;
    }
    Ok(g)
}

fn check_factors(x: &Tensor, factors: &[usize]) -> Result<()> {
    if factors.len() != x.ndim() || factors.iter().any(|&f| f == 0) {
        return Err(Error::InvalidArgument(format!(
            "need one positive factor per axis of {:?}, got {factors:?}",
            x.shape()
        )));
    }
    Ok(())
}

/// Keeps the leading `shape[a]` entries along each axis.
pub fn crop_forward(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if shape.len() != x.ndim() || shape.iter().zip(x.shape()).any(|(s, d)| s > d) {
        return Err(Error::InvalidArgument(format!(
            "cannot crop {:?} to {shape:?}",
            x.shape()
        )));
    }
    if shape == x.shape() {
        return Ok(x.clone());
    }
    let offsets = gather_offsets(x.shape(), shape, |_, o| o);
    let data = offsets.iter().map(|&i| x.data()[i]).collect();
    Tensor::from_vec(shape, data)
}

/// Zero-pads the gradient back to the pre-crop shape.
pub fn crop_backward(grad_out: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    if input_shape == grad_out.shape() {
        return Ok(grad_out.clone());
    }
    let offsets = gather_offsets(input_shape, grad_out.shape(), |_, o| o);
    let mut g = Tensor::zeros(input_shape);
    let gd = g.data_mut();
    for (&i, &v) in offsets.iter().zip(grad_out.data()) {
        gd[i] = v;
    }
    Ok(g)
}

pub fn residual_add_forward(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let mut out = x.clone();
    out.add_scaled(y, 1.0)?;
    Ok(out)
}

/// Routes the gradient unchanged to both summands.
pub fn residual_add_backward(grad_out: &Tensor) -> (Tensor, Tensor) {
    (grad_out.clone(), grad_out.clone())
}
