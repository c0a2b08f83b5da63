use rand::Rng;

use crate::error::{ensure_shape, Error, Result};
use crate::tensor::Tensor;

/// Default epsilon for weight standardization.
pub const WS_EPS: f64 = 1e-5;

/// Strided 3D cross-correlation over `(C, D1, D2, D3)` tensors with
/// symmetric zero padding `k / 2`, giving output extent `ceil(D / s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: [usize; 3],
    pub weight_standardization: bool,
    pub ws_eps: f64,
}

/// State saved by [`Conv3d::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    input_shape: Vec<usize>,
    // Input and effective weights with the first spatial axis moved last.
    input_rot: Vec<f64>,
    weight_rot: Vec<f64>,
    effective_weight: Tensor,
    ws_inv_std: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv3d {
    pub fn new(
        weight: Tensor,
        bias: Tensor,
        stride: [usize; 3],
        weight_standardization: bool,
    ) -> Result<Self> {
        if weight.ndim() != 5 {
            return Err(Error::InvalidArgument(format!(
                "conv weight must be 5D, got {:?}",
                weight.shape()
            )));
        }
        let ws = weight.shape();
        if ws[2..].iter().any(|&k| k % 2 == 0) {
            return Err(Error::InvalidArgument(format!("kernel dims must be odd, got {:?}", &ws[2..])));
        }
        ensure_shape(&[ws[0]], bias.shape())?;
        if stride.iter().any(|&s| s < 1) {
            return Err(Error::InvalidArgument(format!("stride must be >= 1, got {stride:?}")));
        }
        Ok(Self {
            weight,
            bias,
            stride,
            weight_standardization,
            ws_eps: WS_EPS,
        })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        weight_standardization: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let k: usize = kernel.iter().product();
        let limit = (6.0 / ((in_channels + out_channels) * k) as f64).sqrt();
        let shape = [out_channels, in_channels, kernel[0], kernel[1], kernel[2]];
        let weight = Tensor::uniform(&shape, -limit, limit, rng);
        Self::new(weight, Tensor::zeros(&[out_channels]), stride, weight_standardization)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> [usize; 3] {
        let s = self.weight.shape();
        [s[2], s[3], s[4]]
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 4 || input[0] != self.in_channels() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.in_channels(), 0, 0, 0],
                actual: input.to_vec(),
            });
        }
        let mut out = vec![self.out_channels()];
        out.extend((0..3).map(|a| input[a + 1].div_ceil(self.stride[a])));
        Ok(out)
    }

    /// The weights actually used by the forward pass.
    pub fn effective_weight(&self) -> Tensor {
        if self.weight_standardization {
            standardize_weights(&self.weight, self.ws_eps).0
        } else {
            self.weight.clone()
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ConvCache)> {
        let out_shape = self.output_shape(x.shape())?;
        let (effective_weight, ws_inv_std) = if self.weight_standardization {
            let (w, inv) = standardize_weights(&self.weight, self.ws_eps);
            (w, Some(inv))
        } else {
            (self.weight.clone(), None)
        };
        let geom = Geometry::rotated(x.shape(), &out_shape, self.kernel(), self.stride);
        let input_rot = rotate_axes(x.data(), x.shape()[0], x.shape()[1..].try_into().unwrap());
        let weight_rot = rotate_weights(effective_weight.data(), self.weight.shape());
        let mut out_rot = vec![0.0; geom.c_out * geom.out_len];
        for (co, &b) in self.bias.data().iter().enumerate() {
            out_rot[co * geom.out_len..(co + 1) * geom.out_len].fill(b);
        }
        correlate(&geom, &weight_rot, &input_rot, &mut out_rot);
        let out = Tensor::from_vec(&out_shape, unrotate_axes(&out_rot, geom.c_out, out_spatial(&out_shape)))?;
        Ok((
            out,
            ConvCache {
                input_shape: x.shape().to_vec(),
                input_rot,
                weight_rot,
                effective_weight,
                ws_inv_std,
            },
        ))
    }

    pub fn backward(&self, grad_out: &Tensor, cache: &ConvCache) -> Result<ConvGrads> {
        let out_shape = self.output_shape(&cache.input_shape)?;
        ensure_shape(&out_shape, grad_out.shape())?;
        let geom = Geometry::rotated(&cache.input_shape, &out_shape, self.kernel(), self.stride);
        let grad_out_rot = rotate_axes(grad_out.data(), geom.c_out, out_spatial(&out_shape));

        let mut grad_in_rot = vec![0.0; geom.c_in * geom.in_len];
        correlate_transpose(&geom, &cache.weight_rot, &grad_out_rot, &mut grad_in_rot);
        let grad_input = Tensor::from_vec(
            &cache.input_shape,
            unrotate_axes(&grad_in_rot, geom.c_in, out_spatial(&cache.input_shape)),
        )?;

        let mut grad_w_rot = vec![0.0; self.weight.len()];
        weight_gradient(&geom, &cache.input_rot, &grad_out_rot, &mut grad_w_rot);
        let grad_eff = Tensor::from_vec(self.weight.shape(), unrotate_weights(&grad_w_rot, self.weight.shape()))?;
        let grad_weight = match &cache.ws_inv_std {
            Some(inv) => standardize_backward(&grad_eff, &cache.effective_weight, inv),
            None => grad_eff,
        };

        let g = grad_out.data();
        let bias = (0..geom.c_out)
            .map(|co| g[co * geom.out_len..(co + 1) * geom.out_len].iter().sum())
            .collect();
        Ok(ConvGrads {
            input: grad_input,
            weight: grad_weight,
            bias: Tensor::from_vec(&[geom.c_out], bias)?,
        })
    }
}

/// Per-output-channel standardization `(w - mean) / sqrt(var + eps)`.
/// Returns the standardized weights and `1 / sqrt(var + eps)` per channel.
pub fn standardize_weights(w: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let c_out = w.shape()[0];
    let fan = w.len() / c_out;
    let mut out = w.clone();
    let mut inv_std = Vec::with_capacity(c_out);
    for chunk in out.data_mut().chunks_mut(fan) {
        let mean = chunk.iter().sum::<f64>() / fan as f64;
        let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / fan as f64;
        let inv = 1.0 / (var + eps).sqrt();
        chunk.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        inv_std.push(inv);
    }
    (out, inv_std)
}

/// Gradient through [`standardize_weights`] given the gradient w.r.t. its output.
pub fn standardize_backward(grad_hat: &Tensor, w_hat: &Tensor, inv_std: &[f64]) -> Tensor {
    let c_out = inv_std.len();
    let fan = w_hat.len() / c_out;
    let mut out = Tensor::zeros(w_hat.shape());
    for (((g_out, g), wh), &inv) in out
        .data_mut()
        .chunks_mut(fan)
        .zip(grad_hat.data().chunks(fan))
        .zip(w_hat.data().chunks(fan))
        .zip(inv_std)
    {
        normalize_backward(g, wh, inv, g_out);
    }
    out
}

/// `dx = inv_std * (g - mean(g) - x_hat * mean(g * x_hat))` over one normalized group.
pub(crate) fn normalize_backward(g: &[f64], x_hat: &[f64], inv_std: f64, dx: &mut [f64]) {
    let n = g.len() as f64;
    let mean_g = g.iter().sum::<f64>() / n;
    let mean_gx = g.iter().zip(x_hat).map(|(a, b)| a * b).sum::<f64>() / n;
    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(x_hat) {
        *d = inv_std * (gi - mean_g - xi * mean_gx);
    }
}

struct Geometry {
    c_in: usize,
    c_out: usize,
    din: [usize; 3],
    dout: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    in_len: usize,
    out_len: usize,
}

impl Geometry {
    fn new(input: &[usize], output: &[usize], kernel: [usize; 3], stride: [usize; 3]) -> Self {
        let din = [input[1], input[2], input[3]];
        let dout = [output[1], output[2], output[3]];
        Self {
            c_in: input[0],
            c_out: output[0],
            din,
            dout,
            kernel,
            stride,
            in_len: din.iter().product(),
            out_len: dout.iter().product(),
        }
    }

    /// Geometry of the same convolution on tensors whose spatial axes are
    /// stored as `(d1, d2, d0)`. The first axis (time, the longest) then
    /// becomes the contiguous one, which keeps the inner loops long.
    fn rotated(input: &[usize], output: &[usize], kernel: [usize; 3], stride: [usize; 3]) -> Self {
        let rot = |s: &[usize]| [s[0], s[2], s[3], s[1]];
        Self::new(
            &rot(input),
            &rot(output),
            [kernel[1], kernel[2], kernel[0]],
            [stride[1], stride[2], stride[0]],
        )
    }

    /// Output positions `[lo, hi)` along `axis` whose input tap at kernel
    /// offset `k` falls inside the unpadded input.
    fn range(&self, axis: usize, k: usize) -> (usize, usize) {
        let pad = self.kernel[axis] / 2;
        let s = self.stride[axis];
        let lo = if pad > k { (pad - k).div_ceil(s) } else { 0 };
        let top = self.din[axis] - 1 + pad;
        if top < k {
            return (0, 0);
        }
        let hi = ((top - k) / s + 1).min(self.dout[axis]);
        (lo, hi.max(lo))
    }

    /// Calls `f(w_index, out_start, in_start, n, in_step)` for every weight tap
    /// and every contiguous run of `n` output positions along the last axis.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let [k0, k1, k2] = self.kernel;
        let [p0, p1, p2] = [k0 / 2, k1 / 2, k2 / 2];
        let [s0, s1, s2] = self.stride;
        let [_, di1, di2] = self.din;
        let [_, do1, do2] = self.dout;
        for co in 0..self.c_out {
            for ci in 0..self.c_in {
                let w_base = (co * self.c_in + ci) * k0 * k1 * k2;
                for a in 0..k0 {
                    let (lo0, hi0) = self.range(0, a);
                    for b in 0..k1 {
                        let (lo1, hi1) = self.range(1, b);
                        for c in 0..k2 {
                            let (lo2, hi2) = self.range(2, c);
                            if lo2 >= hi2 {
                                continue;
                            }
                            let wi = w_base + (a * k1 + b) * k2 + c;
                            for o0 in lo0..hi0 {
                                let i0 = o0 * s0 + a - p0;
                                for o1 in lo1..hi1 {
                                    let i1 = o1 * s1 + b - p1;
                                    let out_row = co * self.out_len + (o0 * do1 + o1) * do2;
                                    let in_row = ci * self.in_len + (i0 * di1 + i1) * di2;
                                    f(wi, out_row + lo2, in_row + lo2 * s2 + c - p2, hi2 - lo2, s2);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn out_spatial(shape: &[usize]) -> [usize; 3] {
    [shape[1], shape[2], shape[3]]
}

/// `(c, d0, d1, d2)` to `(c, d1, d2, d0)`.
fn rotate_axes(x: &[f64], channels: usize, [d0, d1, d2]: [usize; 3]) -> Vec<f64> {
    let plane = d1 * d2;
    let mut out = vec![0.0; x.len()];
    for c in 0..channels {
        let base = c * d0 * plane;
        for i0 in 0..d0 {
            for j in 0..plane {
                out[base + j * d0 + i0] = x[base + i0 * plane + j];
            }
        }
    }
    out
}

/// Inverse of [`rotate_axes`]; `dims` are the original `(d0, d1, d2)`.
fn unrotate_axes(x: &[f64], channels: usize, [d0, d1, d2]: [usize; 3]) -> Vec<f64> {
    let plane = d1 * d2;
    let mut out = vec![0.0; x.len()];
    for c in 0..channels {
        let base = c * d0 * plane;
        for i0 in 0..d0 {
            for j in 0..plane {
                out[base + i0 * plane + j] = x[base + j * d0 + i0];
            }
        }
    }
    out
}

fn rotate_weights(w: &[f64], shape: &[usize]) -> Vec<f64> {
    rotate_axes(w, shape[0] * shape[1], [shape[2], shape[3], shape[4]])
}

fn unrotate_weights(w: &[f64], shape: &[usize]) -> Vec<f64> {
    unrotate_axes(w, shape[0] * shape[1], [shape[2], shape[3], shape[4]])
}

fn correlate(g: &Geometry, w: &[f64], x: &[f64], out: &mut [f64]) {
    g.for_each_run(|wi, ob, ib, n, step| {
        let wv = w[wi];
        if wv == 0.0 {
            return;
        }
        let dst = &mut out[ob..ob + n];
        if step == 1 {
            for (d, &v) in dst.iter_mut().zip(&x[ib..ib + n]) {
                *d += wv * v;
            }
        } else {
            for (d, v) in dst.iter_mut().zip(x[ib..ib + (n - 1) * step + 1].chunks(step)) {
                *d += wv * v[0];
            }
        }
    });
}

fn correlate_transpose(g: &Geometry, w: &[f64], grad_out: &[f64], grad_in: &mut [f64]) {
    g.for_each_run(|wi, ob, ib, n, step| {
        let wv = w[wi];
        if wv == 0.0 {
            return;
        }
        let src = &grad_out[ob..ob + n];
        if step == 1 {
            for (d, &gv) in grad_in[ib..ib + n].iter_mut().zip(src) {
                *d += wv * gv;
            }
        } else {
            for (d, &gv) in grad_in[ib..ib + (n - 1) * step + 1].chunks_mut(step).zip(src) {
                d[0] += wv * gv;
            }
        }
    });
}

fn weight_gradient(g: &Geometry, x: &[f64], grad_out: &[f64], grad_w: &mut [f64]) {
    g.for_each_run(|wi, ob, ib, n, step| {
        let src = &grad_out[ob..ob + n];
        let acc: f64 = if step == 1 {
            src.iter().zip(&x[ib..ib + n]).map(|(&gv, &xv)| gv * xv).sum()
        } else {
            src.iter()
                .zip(x[ib..ib + (n - 1) * step + 1].chunks(step))
                .map(|(&gv, xv)| gv * xv[0])
                .sum()
        };
        grad_w[wi] += acc;
    });
}
