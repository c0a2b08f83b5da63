//! Central finite-difference checks of every hand-written backward pass.
//!
//! Each check builds a small random instance, reduces the layer output to a
//! scalar with a fixed random linear functional (or uses the loss itself),
//! and compares the analytic gradient against `(L(x + h) - L(x - h)) / 2h`
//! coordinate by coordinate.
//!
//! The relative error of a coordinate is `|a - n| / max(|a|, |n|, floor)`
//! where `floor = 1e-3 * max |a|` over all coordinates of the check, so that
//! coordinates whose true gradient is (near) zero are judged against the
//! check's gradient scale rather than against rounding noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::das::{das_adjoint, das_forward, DelayTable};
use crate::error::Result;
use crate::model::{LayerSpec, Model, ModelConfig};
use crate::nn::{
    crop_backward, crop_forward, upsample_nearest_backward, upsample_nearest_forward, Activation,
    Conv3d, GroupNorm,
};
use crate::tensor::Tensor;
use crate::training::{loss_and_grads, LossEval, Objective, VqWeights};
use crate::vq::{quantize, vq_loss_terms, Codebook, IndexGrid};

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdSettings {
    pub step: f64,
    pub tolerance: f64,
}

impl Default for FdSettings {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

/// Outcome of one named gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<40} coords={:<6} max_rel_err={:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.coordinates,
            self.max_rel_error
        )
    }
}

/// Accumulates per-tensor comparisons into one result.
struct Checker {
    name: String,
    settings: FdSettings,
    // (analytic, numeric) pairs; errors are scored in `finish` so the
    // relative-error floor can use the scale of the whole check.
    pairs: Vec<(f64, f64)>,
}

impl Checker {
    fn new(name: impl Into<String>, settings: FdSettings) -> Self {
        Self {
            name: name.into(),
            settings,
            pairs: Vec::new(),
        }
    }

    /// Compares `analytic` against central differences of `loss` with
    /// respect to every coordinate of `x`.
    fn tensor(&mut self, x: &Tensor, analytic: &Tensor, mut loss: impl FnMut(&Tensor) -> f64) {
        let coords: Vec<usize> = (0..x.len()).collect();
        self.tensor_at(x, analytic, &coords, &mut loss);
    }

    fn tensor_at(&mut self, x: &Tensor, analytic: &Tensor, coords: &[usize], loss: &mut impl FnMut(&Tensor) -> f64) {
        let h = self.settings.step;
        let mut probe = x.clone();
        for &k in coords {
            let orig = probe.data()[k];
            probe.data_mut()[k] = orig + h;
            let plus = loss(&probe);
            probe.data_mut()[k] = orig - h;
            let minus = loss(&probe);
            probe.data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            self.pairs.push((analytic.data()[k], numeric));
        }
    }

    /// Relative error `|a - n| / max(|a|, |n|, 1e-3 max|a|)`, the floor taken
    /// over every analytic coordinate of the check, so entries that are
    /// structurally zero (e.g. a bias feeding a normalization) are compared
    /// against the check's gradient scale rather than against roundoff.
    fn finish(self) -> CheckResult {
        let floor = 1e-3 * self.pairs.iter().fold(0.0f64, |m, &(a, _)| m.max(a.abs()));
        let mut max_rel_error = 0.0f64;
        for &(a, n) in &self.pairs {
            let denom = a.abs().max(n.abs()).max(floor);
            let err = if denom > 0.0 { (a - n).abs() / denom } else { 0.0 };
            max_rel_error = max_rel_error.max(if err.is_nan() { f64::INFINITY } else { err });
        }
        CheckResult {
            passed: max_rel_error <= self.settings.tolerance,
            name: self.name,
            coordinates: self.pairs.len(),
            max_rel_error,
        }
    }
}

fn functional(y: &Tensor, g: &Tensor) -> f64 {
    y.dot(g).expect("matching shapes")
}

pub fn check_conv3d(weight_standardization: bool, seed: u64, settings: FdSettings) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv = Conv3d::new(
        Tensor::uniform(&[3, 2, 3, 3, 3], -1.0, 1.0, &mut rng),
        Tensor::uniform(&[3], -1.0, 1.0, &mut rng),
        [2, 1, 2],
        weight_standardization,
    )?;
    let x = Tensor::uniform(&[2, 5, 4, 5], -1.0, 1.0, &mut rng);
    let (y, cache) = conv.forward(&x)?;
    let g = Tensor::uniform(y.shape(), -1.0, 1.0, &mut rng);
    let grads = conv.backward(&g, &cache)?;
    let name = if weight_standardization {
        "conv3d + weight standardization"
    } else {
        "conv3d"
    };
    let mut c = Checker::new(name, settings);
    c.tensor(&x, &grads.input, |xp| functional(&conv.forward(xp).unwrap().0, &g));
    c.tensor(&conv.weight, &grads.weight, |wp| {
        let mut l = conv.clone();
        l.weight = wp.clone();
        functional(&l.forward(&x).unwrap().0, &g)
    });
    c.tensor(&conv.bias, &grads.bias, |bp| {
        let mut l = conv.clone();
        l.bias = bp.clone();
        functional(&l.forward(&x).unwrap().0, &g)
    });
    Ok(c.finish())
}

pub fn check_group_norm(seed: u64, settings: FdSettings) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gn = GroupNorm::with_affine(
        2,
        crate::nn::GN_EPS,
        Tensor::uniform(&[4], 0.5, 1.5, &mut rng),
        Tensor::uniform(&[4], -0.5, 0.5, &mut rng),
    )?;
    let x = Tensor::uniform(&[4, 3, 2, 2], -2.0, 2.0, &mut rng);
    let (y, cache) = gn.forward(&x)?;
    let g = Tensor::uniform(y.shape(), -1.0, 1.0, &mut rng);
    let grads = gn.backward(&g, &cache)?;
    let mut c = Checker::new("group norm", settings);
    c.tensor(&x, &grads.input, |xp| functional(&gn.forward(xp).unwrap().0, &g));
    c.tensor(&gn.scale, &grads.scale, |sp| {
        let mut l = gn.clone();
        l.scale = sp.clone();
        functional(&l.forward(&x).unwrap().0, &g)
    });
    c.tensor(&gn.shift, &grads.shift, |sp| {
        let mut l = gn.clone();
        l.shift = sp.clone();
        functional(&l.forward(&x).unwrap().0, &g)
    });
    Ok(c.finish())
}

pub fn check_activation(kind: Activation, seed: u64, settings: FdSettings) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Keep ReLU inputs away from the kink.
    let x = Tensor::uniform(&[40], 0.05, 2.0, &mut rng)
        .map(|v| if rng.gen_bool(0.5) { v } else { -v });
    let x = match kind {
        Activation::Relu => x,
        Activation::Tanh => x.map(|v| v * 1.5),
    };
    let y = kind.forward(&x);
    let g = Tensor::uniform(y.shape(), -1.0, 1.0, &mut rng);
    let analytic = kind.backward(&g, &y)?;
    let name = match kind {
        Activation::Relu => "relu",
        Activation::Tanh => "tanh",
    };
    let mut c = Checker::new(name, settings);
    c.tensor(&x, &analytic, |xp| functional(&kind.forward(xp), &g));
    Ok(c.finish())
}

pub fn check_upsample_crop(seed: u64, settings: FdSettings) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors = [1, 2, 3, 2];
    let x = Tensor::uniform(&[2, 3, 2, 3], -1.0, 1.0, &mut rng);
    let target = [2, 5, 6, 5];
    let run = |xp: &Tensor| crop_forward(&upsample_nearest_forward(xp, &factors).unwrap(), &target).unwrap();
    let y = run(&x);
    let g = Tensor::uniform(y.shape(), -1.0, 1.0, &mut rng);
    let up_shape = [2, 6, 6, 6];
    let analytic = upsample_nearest_backward(&crop_backward(&g, &up_shape)?, &factors)?;
    let mut c = Checker::new("upsample + crop", settings);
    c.tensor(&x, &analytic, |xp| functional(&run(xp), &g));
    Ok(c.finish())
}

/// Two stacked residual blocks `x + relu(gn(conv(x)))`, checked end to end.
pub fn check_residual_blocks(seed: u64, settings: FdSettings) -> Result<CheckResult> {
    let cfg = ModelConfig {
        data_shape: [4, 3, 3],
        encoder: vec![
            LayerSpec {
                filters: 1,
                stride: [1, 1, 1],
                weight_standardization: false,
            },
            LayerSpec {
                filters: 1,
                stride: [1, 1, 1],
                weight_standardization: true,
            },
        ],
        kernel: [3, 3, 3],
        codebook_size: 2,
        groupnorm_groups: 1,
        residual: true,
    };
    let model = Model::init(cfg, seed)?;
    debug_assert!(model.encoder.iter().all(|b| b.plan.residual));
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let f = Tensor::uniform(&[4, 3, 3], -1.0, 1.0, &mut rng);
    let (e, cache) = model.encode(&f)?;
    let g = Tensor::uniform(e.shape(), -1.0, 1.0, &mut rng);
    let mut grads = model.zero_grads();
    let grad_f = model.encoder_backward(&g, &cache, &mut grads)?;
    let mut c = Checker::new("residual blocks (2 layers)", settings);
    c.tensor(&f, &grad_f, |fp| functional(&model.encode(fp).unwrap().0, &g));
    let n_enc = model.decoder_param_range().start;
    for p in 0..n_enc {
        let base = model.params()[p].clone();
        c.tensor(&base, &grads[p], |pp| {
            let mut m = model.clone();
            *m.params_mut()[p] = pp.clone();
            functional(&m.encode(&f).unwrap().0, &g)
        });
    }
    Ok(c.finish())
}

/// Codebook term w.r.t. the codes and commitment term w.r.t. `e`, each
/// against an independently written loss expression.
pub fn check_vq_terms(seed: u64, settings: FdSettings) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cb = Codebook::from_rows(Tensor::uniform(&[5, 3], -1.0, 1.0, &mut rng))?;
    let e = Tensor::uniform(&[2, 2, 1, 3], -1.0, 1.0, &mut rng);
    let q = quantize(&e, &cb)?;
    let terms = vq_loss_terms(&e, &cb, &q)?;
    let reference = |e: &Tensor, rows: &Tensor, q: &IndexGrid| -> f64 {
        let mut total = 0.0;
        for (n, &qi) in q.indices().iter().enumerate() {
            for k in 0..3 {
                let d = e.data()[n * 3 + k] - rows.data()[qi as usize * 3 + k];
                total += d * d;
            }
        }
        total
    };
    let mut c = Checker::new("vq codebook + commitment terms", settings);
    let rows = cb.rows().clone();
    c.tensor(&rows, &terms.grad_codebook, |rp| reference(&e, rp, &q));
    c.tensor(&e, &terms.grad_e, |ep| reference(ep, &rows, &q));
    let value = reference(&e, &rows, &q);
    let mut result = c.finish();
    let value_err = (terms.codebook_loss - value).abs().max((terms.commitment_loss - value).abs());
    result.max_rel_error = result.max_rel_error.max(value_err / value.abs().max(f64::MIN_POSITIVE));
    result.passed = result.max_rel_error <= settings.tolerance;
    Ok(result)
}

fn random_table(rng: &mut ChaCha8Rng, image: [usize; 2], data: [usize; 3]) -> Result<DelayTable> {
    let n = image[0] * image[1] * data[1] * data[2];
    let hi = data[0] as f64 + 1.0;
    DelayTable::from_indices(image, data, (0..n).map(|_| rng.gen_range(-1.0..hi)).collect())
}

/// The DAS layer's backward pass is its adjoint; checked through the
/// misfit `||u - B f||^2`, whose gradient is `-2 B^T (u - B f)`.
pub fn check_das_layer(seed: u64, settings: FdSettings) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = random_table(&mut rng, [3, 4], [12, 3, 2])?;
    let f = Tensor::uniform(&[12, 3, 2], -1.0, 1.0, &mut rng);
    let u = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
    let r = u.sub(&das_forward(&f, &table)?)?;
    let mut analytic = das_adjoint(&r, &table)?;
    analytic.scale(-2.0);
    let mut c = Checker::new("das layer", settings);
    c.tensor(&f, &analytic, |fp| u.sub(&das_forward(fp, &table).unwrap()).unwrap().norm_sq());
    Ok(c.finish())
}

/// Small model exercising weight standardization, group norm, residual
/// blocks on both sides of the bottleneck, striding and upsampling.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        data_shape: [8, 4, 4],
        encoder: vec![
            LayerSpec {
                filters: 2,
                stride: [2, 2, 2],
                weight_standardization: true,
            },
            LayerSpec {
                filters: 2,
                stride: [1, 1, 1],
                weight_standardization: true,
            },
            LayerSpec {
                filters: 4,
                stride: [1, 1, 1],
                weight_standardization: false,
            },
        ],
        kernel: [3, 3, 3],
        codebook_size: 4,
        groupnorm_groups: 2,
        residual: true,
    }
}

/// Loss in which every stop-gradient is frozen at the base parameters:
/// the decoder sees `E(f) + (c_q0 - e0)`, the codebook term uses `e0`, and
/// the commitment term uses the base codebook. Its exact gradient at the
/// base point is what backpropagation with the straight-through rule computes.
fn frozen_surrogate(
    model: &Model,
    base: &Model,
    f: &Tensor,
    target: Option<(&Tensor, &DelayTable)>,
    weights: VqWeights,
) -> f64 {
    let (e0, _) = base.encode(f).unwrap();
    let q0 = quantize(&e0, &base.codebook).unwrap();
    let d = base.codebook.dim();
    let (e, _) = model.encode(f).unwrap();
    let mut e_tilde = e.clone();
    let mut codebook_term = 0.0;
    let mut commitment_term = 0.0;
    for (n, &qi) in q0.indices().iter().enumerate() {
        let qi = qi as usize;
        for k in 0..d {
            let idx = n * d + k;
            let base_code = base.codebook.code(qi)[k];
            e_tilde.data_mut()[idx] += base_code - e0.data()[idx];
            codebook_term += (e0.data()[idx] - model.codebook.code(qi)[k]).powi(2);
            commitment_term += (e.data()[idx] - base_code).powi(2);
        }
    }
    let (mut f_tilde, _) = model.decode(&e_tilde).unwrap();
    f_tilde.scale(model.data_scale);
    let misfit = match target {
        Some((u, table)) => u.sub(&das_forward(&f_tilde, table).unwrap()).unwrap().norm_sq(),
        None => f.sub(&f_tilde).unwrap().norm_sq(),
    };
    misfit + weights.codebook * codebook_term + weights.commitment * commitment_term
}

/// End-to-end check of the composed loss (data-to-image when a target is
/// given, data-to-data otherwise) over all parameters and the input.
pub fn check_composed_loss(data_to_image: bool, seed: u64, settings: FdSettings) -> Result<CheckResult> {
    let model = Model::init(tiny_model_config(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let f = Tensor::uniform(&[8, 4, 4], -1.0, 1.0, &mut rng);
    let table = random_table(&mut rng, [3, 3], [8, 4, 4])?;
    let u = das_forward(&Tensor::uniform(&[8, 4, 4], -1.0, 1.0, &mut rng), &table)?;
    let weights = VqWeights {
        codebook: 0.7,
        commitment: 0.3,
    };
    let (objective, target) = if data_to_image {
        (Objective::DataToImage { target: &u, table: &table }, Some((&u, &table)))
    } else {
        (Objective::DataToData, None)
    };
    let LossEval { grads, .. } = loss_and_grads(&model, &f, objective, weights, crate::model::Bottleneck::Quantize)?;
    let name = if data_to_image {
        "data-to-image loss (all parameters)"
    } else {
        "data-to-data loss (all parameters)"
    };
    let mut c = Checker::new(name, settings);
    for (p, grad) in grads.iter().enumerate() {
        let base_param = model.params()[p].clone();
        c.tensor(&base_param, grad, |pp| {
            let mut m = model.clone();
            *m.params_mut()[p] = pp.clone();
            frozen_surrogate(&m, &model, &f, target, weights)
        });
    }
    Ok(c.finish())
}

/// Every check in the suite, in a fixed order.
pub fn run_all(seed: u64, settings: FdSettings) -> Result<Vec<CheckResult>> {
    Ok(vec![
        check_conv3d(false, seed, settings)?,
        check_conv3d(true, seed + 1, settings)?,
        check_group_norm(seed + 2, settings)?,
        check_activation(Activation::Relu, seed + 3, settings)?,
        check_activation(Activation::Tanh, seed + 4, settings)?,
        check_upsample_crop(seed + 5, settings)?,
        check_residual_blocks(seed + 6, settings)?,
        check_vq_terms(seed + 7, settings)?,
        check_das_layer(seed + 8, settings)?,
        check_composed_loss(true, seed + 9, settings)?,
        check_composed_loss(false, seed + 10, settings)?,
    ])
}
