//! Encoder, vector-quantization bottleneck, and decoder.
//!
//! The encoder is a stack of strided convolution blocks
//! (`conv -> group norm -> relu`). The decoder mirrors it in reverse: each
//! block upsamples by the stride of the encoder block it mirrors, crops back
//! to that block's input extent, and applies a stride-1 convolution. The
//! final decoder block has a single output channel and a `tanh` activation.
//! Blocks whose input and output shapes agree carry a residual connection;
//! no connection crosses the bottleneck.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::das::{das_forward, DelayTable};
use crate::error::{ensure_shape, Error, Result};
use crate::nn::{
    crop_backward, crop_forward, upsample_nearest_backward, upsample_nearest_forward, Activation,
    Conv3d, ConvCache, GroupNorm, GroupNormCache,
};
use crate::tensor::Tensor;
use crate::vq::{dequantize, quantize, Codebook, IndexGrid};

/// One encoder block; the decoder block mirroring it is derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub filters: usize,
    pub stride: [usize; 3],
    #[serde(default = "default_true")]
    pub weight_standardization: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Raw data shape `(n_t, n_s, n_r)`.
    pub data_shape: [usize; 3],
    /// Encoder blocks; the last block's filter count is the bottleneck width `D`.
    pub encoder: Vec<LayerSpec>,
    #[serde(default = "default_kernel")]
    pub kernel: [usize; 3],
    /// Number of codebook entries `L`.
    pub codebook_size: usize,
    pub groupnorm_groups: usize,
    #[serde(default = "default_true")]
    pub residual: bool,
}

fn default_kernel() -> [usize; 3] {
    [5, 5, 5]
}

impl ModelConfig {
    /// Small configuration used for desk-scale experiments: three encoder
    /// blocks of 8, 8 and 16 filters with strides 2, 2, 1 and 32 codes.
    pub fn desk(data_shape: [usize; 3]) -> Self {
        Self {
            data_shape,
            encoder: vec![
                LayerSpec {
                    filters: 8,
                    stride: [2, 2, 2],
                    weight_standardization: true,
                },
                LayerSpec {
                    filters: 8,
                    stride: [2, 2, 2],
                    weight_standardization: true,
                },
                LayerSpec {
                    filters: 16,
                    stride: [1, 1, 1],
                    weight_standardization: true,
                },
            ],
            kernel: [5, 5, 5],
            codebook_size: 32,
            groupnorm_groups: 4,
            residual: true,
        }
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.encoder.last().map_or(0, |l| l.filters)
    }

    /// Validates the configuration and derives every intermediate shape.
    pub fn plan(&self) -> Result<Plan> {
        if self.encoder.is_empty() {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.data_shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("data shape {:?} has a zero extent", self.data_shape)));
        }
        if self.kernel.iter().any(|&k| k % 2 == 0) {
            return Err(Error::Config(format!("kernel {:?} must be odd", self.kernel)));
        }
        if self.codebook_size == 0 || self.codebook_size > crate::vq::MAX_CODES {
            return Err(Error::Config(format!("codebook size {} out of range", self.codebook_size)));
        }
        let groups = self.groupnorm_groups;
        for (i, l) in self.encoder.iter().enumerate() {
            if l.filters == 0 {
                return Err(Error::Config(format!("encoder layer {i} has zero filters")));
            }
            if l.stride.iter().any(|&s| s == 0) {
                return Err(Error::Config(format!("encoder layer {i} has a zero stride")));
            }
            if groups == 0 || l.filters % groups != 0 {
                return Err(Error::Config(format!(
                    "{groups} groups do not divide {} filters of encoder layer {i}",
                    l.filters
                )));
            }
        }
        let mut spatial = vec![self.data_shape];
        for l in &self.encoder {
            let s = spatial.last().unwrap();
            spatial.push([
                s[0].div_ceil(l.stride[0]),
                s[1].div_ceil(l.stride[1]),
                s[2].div_ceil(l.stride[2]),
            ]);
        }
        let n = self.encoder.len();
        let channels = |i: isize| -> usize {
            if i < 0 {
                1
            } else {
                self.encoder[i as usize].filters
            }
        };
        let encoder = (0..n)
            .map(|i| {
                let c_in = channels(i as isize - 1);
                let c_out = channels(i as isize);
                BlockPlan {
                    in_channels: c_in,
                    out_channels: c_out,
                    stride: self.encoder[i].stride,
                    upsample: [1, 1, 1],
                    crop: None,
                    normalize: true,
                    activation: Activation::Relu,
                    residual: self.residual && self.encoder[i].stride == [1, 1, 1] && c_in == c_out,
                    weight_standardization: self.encoder[i].weight_standardization,
                }
            })
            .collect();
        let mut crops = Vec::new();
        let decoder = (0..n)
            .map(|j| {
                let i = n - 1 - j;
                let last = j == n - 1;
                let stride = self.encoder[i].stride;
                let from = spatial[i + 1];
                let up = [from[0] * stride[0], from[1] * stride[1], from[2] * stride[2]];
                let target = spatial[i];
                let crop = if up != target {
                    crops.push(CropRecord {
                        decoder_layer: j,
                        from: up,
                        to: target,
                    });
                    Some(target)
                } else {
                    None
                };
                let c_in = channels(i as isize);
                let c_out = channels(i as isize - 1);
                BlockPlan {
                    in_channels: c_in,
                    out_channels: c_out,
                    stride: [1, 1, 1],
                    upsample: stride,
                    crop,
                    normalize: !last,
                    activation: if last { Activation::Tanh } else { Activation::Relu },
                    residual: self.residual && !last && stride == [1, 1, 1] && c_in == c_out,
                    // The output block has no normalization after it, so
                    // standardized weights would fix its pre-tanh scale.
                    weight_standardization: !last && self.encoder[i].weight_standardization,
                }
            })
            .collect();
        Ok(Plan {
            spatial,
            encoder,
            decoder,
            crops,
        })
    }

    /// Latent grid shape `(n1, n2, n3)`.
    pub fn code_shape(&self) -> Result<[usize; 3]> {
        Ok(*self.plan()?.spatial.last().unwrap())
    }
}

/// Crop applied after upsampling in a decoder block, when ceil-division in
/// the encoder makes the upsampled extent overshoot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRecord {
    pub decoder_layer: usize,
    pub from: [usize; 3],
    pub to: [usize; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockPlan {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: [usize; 3],
    pub upsample: [usize; 3],
    pub crop: Option<[usize; 3]>,
    pub normalize: bool,
    pub activation: Activation,
    pub residual: bool,
    pub weight_standardization: bool,
}

/// Derived shapes: `spatial[i]` is the input extent of encoder block `i`;
/// the last entry is the latent grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub spatial: Vec<[usize; 3]>,
    pub encoder: Vec<BlockPlan>,
    pub decoder: Vec<BlockPlan>,
    pub crops: Vec<CropRecord>,
}

/// Element-count compression rate `(n_t n_s n_r) / (n1 n2 n3)`.
pub fn compression_rate(data_shape: [usize; 3], code_shape: [usize; 3]) -> Result<f64> {
    if data_shape.iter().chain(&code_shape).any(|&d| d == 0) {
        return Err(Error::InvalidArgument("all dimensions must be positive".into()));
    }
    let data: usize = data_shape.iter().product();
    let code: usize = code_shape.iter().product();
    Ok(data as f64 / code as f64)
}

/// A convolution block with its trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub plan: BlockPlan,
    pub conv: Conv3d,
    pub norm: Option<GroupNorm>,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    input_shape: Vec<usize>,
    upsampled_shape: Vec<usize>,
    conv: ConvCache,
    norm: Option<GroupNormCache>,
    activated: Tensor,
}

impl Block {
    fn init(plan: BlockPlan, kernel: [usize; 3], groups: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let conv = Conv3d::init(
            plan.in_channels,
            plan.out_channels,
            kernel,
            plan.stride,
            plan.weight_standardization,
            rng,
        )?;
        let norm = if plan.normalize {
            Some(GroupNorm::new(plan.out_channels, groups)?)
        } else {
            None
        };
        Ok(Self { plan, conv, norm })
    }

    fn n_params(&self) -> usize {
        if self.norm.is_some() {
            4
        } else {
            2
        }
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut p = vec![&self.conv.weight, &self.conv.bias];
        if let Some(n) = &self.norm {
            p.push(&n.scale);
            p.push(&n.shift);
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = vec![&mut self.conv.weight, &mut self.conv.bias];
        if let Some(n) = &mut self.norm {
            p.push(&mut n.scale);
            p.push(&mut n.shift);
        }
        p
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, BlockCache)> {
        let mut h = if self.plan.upsample != [1, 1, 1] {
            let u = self.plan.upsample;
            upsample_nearest_forward(x, &[1, u[0], u[1], u[2]])?
        } else {
            x.clone()
        };
        let upsampled_shape = h.shape().to_vec();
        if let Some(c) = self.plan.crop {
            h = crop_forward(&h, &[h.shape()[0], c[0], c[1], c[2]])?;
        }
        let skip = if self.plan.residual { Some(h.clone()) } else { None };
        let (y, conv_cache) = self.conv.forward(&h)?;
        let (y, norm_cache) = match &self.norm {
            Some(n) => {
                let (y, c) = n.forward(&y)?;
                (y, Some(c))
            }
            None => (y, None),
        };
        let activated = self.plan.activation.forward(&y);
        let mut out = activated.clone();
        if let Some(s) = skip {
            out.add_scaled(&s, 1.0)?;
        }
        Ok((
            out,
            BlockCache {
                input_shape: x.shape().to_vec(),
                upsampled_shape,
                conv: conv_cache,
                norm: norm_cache,
                activated,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` (in [`Block::params`]
    /// order) and returns the gradient w.r.t. the block input.
    pub fn backward(&self, grad_out: &Tensor, cache: &BlockCache, grads: &mut [Tensor]) -> Result<Tensor> {
        let g = self.plan.activation.backward(grad_out, &cache.activated)?;
        let g = match (&self.norm, &cache.norm) {
            (Some(n), Some(c)) => {
                let ng = n.backward(&g, c)?;
                grads[2].add_scaled(&ng.scale, 1.0)?;
                grads[3].add_scaled(&ng.shift, 1.0)?;
                ng.input
            }
            _ => g,
        };
        let cg = self.conv.backward(&g, &cache.conv)?;
        grads[0].add_scaled(&cg.weight, 1.0)?;
        grads[1].add_scaled(&cg.bias, 1.0)?;
        let mut gh = cg.input;
        if self.plan.residual {
            gh.add_scaled(grad_out, 1.0)?;
        }
        if self.plan.crop.is_some() {
            gh = crop_backward(&gh, &cache.upsampled_shape)?;
        }
        if self.plan.upsample != [1, 1, 1] {
            let u = self.plan.upsample;
            gh = upsample_nearest_backward(&gh, &[1, u[0], u[1], u[2]])?;
        }
        ensure_shape(&cache.input_shape, gh.shape())?;
        Ok(gh)
    }
}

/// How the latent passes from encoder to decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bottleneck {
    /// Nearest-code quantization.
    Quantize,
    /// Feed the encoder output straight to the decoder.
    Bypass,
}

/// Trainable parameters plus the data scale and seed they were built with.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Vec<Block>,
    pub decoder: Vec<Block>,
    pub codebook: Codebook,
    /// Raw data are divided by this before encoding and decoder output is
    /// multiplied by it, so normalized data lie in `[-1, 1]`.
    pub data_scale: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    blocks: Vec<BlockCache>,
    output_shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct DecoderCache {
    blocks: Vec<BlockCache>,
}

/// Everything a forward pass through the full pipeline produces.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Encoder output, channel-last `(n1, n2, n3, D)`.
    pub e: Tensor,
    /// Latent indices (present when the bottleneck quantizes).
    pub q: Option<IndexGrid>,
    /// Decoder input, channel-last.
    pub e_tilde: Tensor,
    /// Decoder output in data units, `(n_t, n_s, n_r)`.
    pub f_tilde: Tensor,
    /// DAS image of `f_tilde` (present when a delay table was supplied).
    pub u_hat: Option<Tensor>,
    pub encoder_cache: EncoderCache,
    pub decoder_cache: DecoderCache,
}

impl Model {
    /// Initializes all parameters from `seed`: convolution weights are
    /// Glorot-uniform, biases and shifts zero, scales one, and codebook
    /// entries uniform on `[-1/L, 1/L]`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let plan = config.plan()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = config.groupnorm_groups;
        let encoder = plan
            .encoder
            .into_iter()
            .map(|p| Block::init(p, config.kernel, groups, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let decoder = plan
            .decoder
            .into_iter()
            .map(|p| Block::init(p, config.kernel, groups, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let codebook = Codebook::init(config.bottleneck_channels(), config.codebook_size, &mut rng)?;
        Ok(Self {
            config,
            encoder,
            decoder,
            codebook,
            data_scale: 1.0,
            seed,
        })
    }

    pub fn data_shape(&self) -> [usize; 3] {
        self.config.data_shape
    }

    pub fn code_shape(&self) -> [usize; 3] {
        self.config
            .code_shape()
            .expect("model configuration was validated at construction")
    }

    pub fn compression_rate(&self) -> f64 {
        compression_rate(self.data_shape(), self.code_shape()).expect("validated shapes")
    }

    /// Parameter names in canonical order; the codebook (as `(L, D)` rows) is last.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (prefix, blocks) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            for (i, b) in blocks.iter().enumerate() {
                names.push(format!("{prefix}.{i}.weight"));
                names.push(format!("{prefix}.{i}.bias"));
                if b.norm.is_some() {
                    names.push(format!("{prefix}.{i}.gn_scale"));
                    names.push(format!("{prefix}.{i}.gn_shift"));
                }
            }
        }
        names.push("codebook".into());
        names
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p: Vec<&Tensor> = Vec::new();
        for b in self.encoder.iter().chain(&self.decoder) {
            p.extend(b.params());
        }
        p.push(self.codebook.rows());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = Vec::new();
        for b in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            p.extend(b.params_mut());
        }
        p.push(self.codebook.rows_mut());
        p
    }

    /// Zero gradient buffers matching [`Model::params`].
    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.params().iter().map(|t| Tensor::zeros(t.shape())).collect()
    }

    pub fn n_parameters(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    fn encoder_param_count(&self) -> usize {
        self.encoder.iter().map(Block::n_params).sum()
    }

    /// Index of the codebook in the parameter list.
    pub fn codebook_param_index(&self) -> usize {
        self.params().len() - 1
    }

    /// Range of parameter indices owned by the decoder.
    pub fn decoder_param_range(&self) -> std::ops::Range<usize> {
        let start = self.encoder_param_count();
        start..start + self.decoder.iter().map(Block::n_params).sum::<usize>()
    }

    /// Runs the encoder on raw data, returning the channel-last latent `e`.
    pub fn encode(&self, f: &Tensor) -> Result<(Tensor, EncoderCache)> {
        ensure_shape(&self.config.data_shape, f.shape())?;
        let [a, b, c] = self.config.data_shape;
        let mut x = f.clone().reshape(&[1, a, b, c])?;
        x.scale(1.0 / self.data_scale);
        let mut caches = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            let (y, cache) = block.forward(&x)?;
            caches.push(cache);
            x = y;
        }
        let output_shape = x.shape().to_vec();
        Ok((
            x.channels_last(),
            EncoderCache {
                blocks: caches,
                output_shape,
            },
        ))
    }

    /// Accumulates encoder parameter gradients given `dL/de` (channel-last).
    pub fn encoder_backward(&self, grad_e: &Tensor, cache: &EncoderCache, grads: &mut [Tensor]) -> Result<Tensor> {
        let mut g = grad_e.channels_first();
        ensure_shape(&cache.output_shape, g.shape())?;
        let offsets = block_offsets(&self.encoder, 0);
        for ((block, bc), &off) in self.encoder.iter().zip(&cache.blocks).zip(&offsets).rev() {
            g = block.backward(&g, bc, &mut grads[off..off + block.n_params()])?;
        }
        let [a, b, c] = self.config.data_shape;
        g.scale(1.0 / self.data_scale);
        g.reshape(&[a, b, c])
    }

    /// Runs the decoder on a channel-last latent; output is in normalized
    /// units, strictly inside `(-1, 1)`.
    pub fn decode(&self, e_tilde: &Tensor) -> Result<(Tensor, DecoderCache)> {
        let mut code = self.code_shape().to_vec();
        code.push(self.config.bottleneck_channels());
        ensure_shape(&code, e_tilde.shape())?;
        let mut x = e_tilde.channels_first();
        let mut caches = Vec::with_capacity(self.decoder.len());
        for block in &self.decoder {
            let (y, cache) = block.forward(&x)?;
            caches.push(cache);
            x = y;
        }
        let [a, b, c] = self.config.data_shape;
        Ok((x.reshape(&[a, b, c])?, DecoderCache { blocks: caches }))
    }

    /// Accumulates decoder parameter gradients given `dL/d decode(...)` and
    /// returns `dL/d e_tilde` (channel-last).
    pub fn decoder_backward(&self, grad_out: &Tensor, cache: &DecoderCache, grads: &mut [Tensor]) -> Result<Tensor> {
        ensure_shape(&self.config.data_shape, grad_out.shape())?;
        let [a, b, c] = self.config.data_shape;
        let mut g = grad_out.clone().reshape(&[1, a, b, c])?;
        let offsets = block_offsets(&self.decoder, self.encoder_param_count());
        for ((block, bc), &off) in self.decoder.iter().zip(&cache.blocks).zip(&offsets).rev() {
            g = block.backward(&g, bc, &mut grads[off..off + block.n_params()])?;
        }
        Ok(g.channels_last())
    }

    /// Encoder followed by quantization: the transmitted code.
    pub fn compress(&self, f: &Tensor) -> Result<IndexGrid> {
        let (e, _) = self.encode(f)?;
        quantize(&e, &self.codebook)
    }

    /// Decoded data in data units from transmitted indices.
    pub fn decompress_data(&self, q: &IndexGrid) -> Result<Tensor> {
        ensure_shape(&self.code_shape(), q.shape())?;
        let e_tilde = dequantize(q, &self.codebook)?;
        let (mut f, _) = self.decode(&e_tilde)?;
        f.scale(self.data_scale);
        Ok(f)
    }

    /// DAS image formed from transmitted indices.
    pub fn decompress_image(&self, q: &IndexGrid, table: &DelayTable) -> Result<Tensor> {
        das_forward(&self.decompress_data(q)?, table)
    }

    /// Full pipeline `B D(Q_up(Q_down(E(f))))`, caching everything needed
    /// for the backward pass. Without a delay table the DAS layer is skipped.
    pub fn forward(&self, f: &Tensor, bottleneck: Bottleneck, table: Option<&DelayTable>) -> Result<ForwardPass> {
        let (e, encoder_cache) = self.encode(f)?;
        let (q, e_tilde) = match bottleneck {
            Bottleneck::Quantize => {
                let q = quantize(&e, &self.codebook)?;
                let e_tilde = dequantize(&q, &self.codebook)?;
                (Some(q), e_tilde)
            }
            Bottleneck::Bypass => (None, e.clone()),
        };
        let (mut f_tilde, decoder_cache) = self.decode(&e_tilde)?;
        f_tilde.scale(self.data_scale);
        let u_hat = table.map(|t| das_forward(&f_tilde, t)).transpose()?;
        Ok(ForwardPass {
            e,
            q,
            e_tilde,
            f_tilde,
            u_hat,
            encoder_cache,
            decoder_cache,
        })
    }

    /// `u_hat = B D(Q_up(Q_down(E(f))))`.
    pub fn forward_data_to_image(&self, f: &Tensor, table: &DelayTable) -> Result<ForwardPass> {
        self.forward(f, Bottleneck::Quantize, Some(table))
    }
}

fn block_offsets(blocks: &[Block], start: usize) -> Vec<usize> {
    let mut off = start;
    blocks
        .iter()
        .map(|b| {
            let o = off;
            off += b.n_params();
            o
        })
        .collect()
}
