use crate::error::{ensure_shape, Error, Result};
use crate::nn::conv::normalize_backward;
use crate::tensor::Tensor;

pub const GN_EPS: f64 = 1e-5;

/// Group normalization over `(C, ...)` tensors followed by a per-channel affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupNorm {
    pub num_groups: usize,
    pub eps: f64,
    pub scale: Tensor,
    pub shift: Tensor,
}

#[derive(Debug, Clone)]
pub struct GroupNormCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GroupNormGrads {
    pub input: Tensor,
    pub scale: Tensor,
    pub shift: Tensor,
}

impl GroupNorm {
    /// Unit scale, zero shift.
    pub fn new(channels: usize, num_groups: usize) -> Result<Self> {
        Self::with_affine(num_groups, GN_EPS, Tensor::full(&[channels], 1.0), Tensor::zeros(&[channels]))
    }

    pub fn with_affine(num_groups: usize, eps: f64, scale: Tensor, shift: Tensor) -> Result<Self> {
        let channels = scale.len();
        if scale.ndim() != 1 {
            return Err(Error::InvalidArgument("group norm scale must be 1D".into()));
        }
        ensure_shape(scale.shape(), shift.shape())?;
        if num_groups == 0 || channels % num_groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "{num_groups} groups do not divide {channels} channels"
            )));
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument("group norm eps must be positive".into()));
        }
        Ok(Self {
            num_groups,
            eps,
            scale,
            shift,
        })
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    fn check(&self, x: &Tensor) -> Result<usize> {
        if x.ndim() < 1 || x.shape()[0] != self.channels() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.channels()],
                actual: x.shape().to_vec(),
            });
        }
        Ok(x.len() / self.channels())
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, GroupNormCache)> {
        let spatial = self.check(x)?;
        let group_len = spatial * self.channels() / self.num_groups;
        let mut x_hat = x.clone();
        let mut inv_std = Vec::with_capacity(self.num_groups);
        for chunk in x_hat.data_mut().chunks_mut(group_len) {
            let mean = chunk.iter().sum::<f64>() / group_len as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / group_len as f64;
            let inv = 1.0 / (var + self.eps).sqrt();
            chunk.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let mut y = x_hat.clone();
        for ((chunk, &g), &b) in y
            .data_mut()
            .chunks_mut(spatial)
            .zip(self.scale.data())
            .zip(self.shift.data())
        {
            chunk.iter_mut().for_each(|v| *v = g * *v + b);
        }
        Ok((y, GroupNormCache { x_hat, inv_std }))
    }

    pub fn backward(&self, grad_out: &Tensor, cache: &GroupNormCache) -> Result<GroupNormGrads> {
        ensure_shape(cache.x_hat.shape(), grad_out.shape())?;
        let spatial = self.check(grad_out)?;
        let c = self.channels();
        let mut grad_scale = vec![0.0; c];
        let mut grad_shift = vec![0.0; c];
        let mut grad_xhat = grad_out.clone();
        for (ch, (gchunk, xchunk)) in grad_xhat
            .data_mut()
            .chunks_mut(spatial)
            .zip(cache.x_hat.data().chunks(spatial))
            .enumerate()
        {
            grad_shift[ch] = gchunk.iter().sum();
            grad_scale[ch] = gchunk.iter().zip(xchunk).map(|(g, x)| g * x).sum();
            let gamma = self.scale.data()[ch];
            gchunk.iter_mut().for_each(|g| *g *= gamma);
        }
        let group_len = spatial * c / self.num_groups;
        let mut grad_input = Tensor::zeros(grad_out.shape());
        for (((dx, g), xh), &inv) in grad_input
            .data_mut()
            .chunks_mut(group_len)
            .zip(grad_xhat.data().chunks(group_len))
            .zip(cache.x_hat.data().chunks(group_len))
            .zip(&cache.inv_std)
        {
            normalize_backward(g, xh, inv, dx);
        }
        Ok(GroupNormGrads {
            input: grad_input,
            scale: Tensor::from_vec(&[c], grad_scale)?,
            shift: Tensor::from_vec(&[c], grad_shift)?,
        })
    }
}
