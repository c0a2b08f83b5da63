//! Loss functions and the optimization loop.
//!
//! Both variants share the vector-quantization terms
//! `w_cb * sum ||sg(e) - c_q||^2 + w_commit * sum ||e - sg(c_q)||^2`
//! and differ in the misfit:
//!
//! * data-to-image: `||u - B D(e_tilde)||^2`, with the misfit gradient
//!   entering the decoder through the DAS adjoint;
//! * data-to-data: `||f - D(e_tilde)||^2`, with no imaging operator in the graph.
//!
//! At the bottleneck the decoder-input gradient is copied to the encoder
//! output (straight-through), so the codebook only ever receives the
//! gradient of its own loss term.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::das::{das_adjoint, DelayTable};
use crate::error::{Error, Result};
use crate::metrics::{ssim, SsimConfig};
use crate::model::{Bottleneck, Model, ModelConfig};
use crate::tensor::Tensor;
use crate::vq::{codebook_utilization, straight_through_backward, vq_loss_terms, IndexGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    DataToImage,
    DataToData,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::DataToImage => "data_to_image",
            Variant::DataToData => "data_to_data",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub variant: Variant,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub codebook_weight: f64,
    pub commitment_weight: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 disables checkpoints.
    pub checkpoint_every: usize,
    /// Skip quantization and feed the encoder output to the decoder directly.
    #[serde(default)]
    pub bypass_quantizer: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            variant: Variant::DataToImage,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 1,
            epochs: 10,
            codebook_weight: 1.0,
            commitment_weight: 1.0,
            seed: 0,
            checkpoint_every: 0,
            bypass_quantizer: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam eps must be positive".into()));
        }
        Ok(())
    }

    pub fn bottleneck(&self) -> Bottleneck {
        if self.bypass_quantizer {
            Bottleneck::Bypass
        } else {
            Bottleneck::Quantize
        }
    }
}

/// What the misfit term compares against.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    /// Target image `u`, formed through the given delay table.
    DataToImage { target: &'a Tensor, table: &'a DelayTable },
    DataToData,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VqWeights {
    pub codebook: f64,
    pub commitment: f64,
}

impl Default for VqWeights {
    fn default() -> Self {
        Self {
            codebook: 1.0,
            commitment: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub misfit: f64,
    pub codebook: f64,
    pub commitment: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.misfit + self.codebook + self.commitment
    }
}

/// Loss value, parameter gradients, and the bottleneck gradient buffers.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: LossBreakdown,
    /// Gradients in [`Model::params`] order.
    pub grads: Vec<Tensor>,
    /// Misfit gradient w.r.t. the decoder input `e_tilde`.
    pub grad_decoder_input: Tensor,
    /// Misfit gradient delivered to the encoder output `e` by the straight-through rule.
    pub grad_encoder_output: Tensor,
    pub q: Option<IndexGrid>,
    /// Image produced by the forward pass, when one was formed.
    pub u_hat: Option<Tensor>,
}

/// Evaluates the loss for one item and backpropagates it through the model.
pub fn loss_and_grads(
    model: &Model,
    f: &Tensor,
    objective: Objective<'_>,
    weights: VqWeights,
    bottleneck: Bottleneck,
) -> Result<LossEval> {
    let table = match objective {
        Objective::DataToImage { table, .. } => Some(table),
        Objective::DataToData => None,
    };
    let pass = model.forward(f, bottleneck, table)?;

    let (misfit, grad_f_tilde) = match objective {
        Objective::DataToImage { target, table } => {
            let u_hat = pass.u_hat.as_ref().expect("table supplied");
            let r = u_hat.sub(target)?;
            let mut g = das_adjoint(&r, table)?;
            g.scale(2.0);
            (r.norm_sq(), g)
        }
        Objective::DataToData => {
            let mut r = pass.f_tilde.sub(f)?;
            let misfit = r.norm_sq();
            r.scale(2.0);
            (misfit, r)
        }
    };

    let mut grads = model.zero_grads();
    let mut grad_decode = grad_f_tilde;
    grad_decode.scale(model.data_scale);
    let grad_decoder_input = model.decoder_backward(&grad_decode, &pass.decoder_cache, &mut grads)?;
    let grad_encoder_output = straight_through_backward(&grad_decoder_input, pass.e.shape())?;

    let mut loss = LossBreakdown {
        misfit,
        ..LossBreakdown::default()
    };
    let mut grad_e = grad_encoder_output.clone();
    if let Some(q) = &pass.q {
        let vq = vq_loss_terms(&pass.e, &model.codebook, q)?;
        loss.codebook = weights.codebook * vq.codebook_loss;
        loss.commitment = weights.commitment * vq.commitment_loss;
        grad_e.add_scaled(&vq.grad_e, weights.commitment)?;
        let cb = model.codebook_param_index();
        grads[cb].add_scaled(&vq.grad_codebook, weights.codebook)?;
    }
    model.encoder_backward(&grad_e, &pass.encoder_cache, &mut grads)?;

    Ok(LossEval {
        loss,
        grads,
        grad_decoder_input,
        grad_encoder_output,
        q: pass.q,
        u_hat: pass.u_hat,
    })
}

/// `||u - B D(e_tilde)||^2` plus the VQ terms, with gradients.
pub fn loss_data_to_image(
    model: &Model,
    f: &Tensor,
    u: &Tensor,
    table: &DelayTable,
    weights: VqWeights,
) -> Result<LossEval> {
    loss_and_grads(
        model,
        f,
        Objective::DataToImage { target: u, table },
        weights,
        Bottleneck::Quantize,
    )
}

/// `||f - D(e_tilde)||^2` plus the VQ terms, with gradients.
pub fn loss_data_to_data(model: &Model, f: &Tensor, weights: VqWeights) -> Result<LossEval> {
    loss_and_grads(model, f, Objective::DataToData, weights, Bottleneck::Quantize)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[&Tensor], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// One `(f, u)` pair: raw data and its DAS image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub data: Tensor,
    pub image: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    /// Checks that every item shares one `(data, image)` shape pair.
    pub fn validate(&self, data_shape: [usize; 3], image_shape: [usize; 2]) -> Result<()> {
        for s in self.train.iter().chain(&self.test) {
            crate::error::ensure_shape(&data_shape, s.data.shape())?;
            crate::error::ensure_shape(&image_shape, s.image.shape())?;
        }
        Ok(())
    }

    /// Largest absolute raw-data value over the training split (1 if all zero).
    pub fn data_scale(&self) -> f64 {
        let m = self.train.iter().fold(0.0, |m: f64, s| m.max(s.data.max_abs()));
        if m > 0.0 {
            m
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_ssim_mean: f64,
    pub codebook_used_fraction: f64,
}

impl EpochMetrics {
    /// One line of the metrics log.
    pub fn to_record(&self) -> String {
        format!(
            "epoch={} train_loss={:.9e} test_loss={:.9e} test_ssim_mean={:.6} codebook_used_fraction={:.6}",
            self.epoch, self.train_loss, self.test_loss, self.test_ssim_mean, self.codebook_used_fraction
        )
    }
}

fn check_finite(loss: &LossBreakdown, epoch: usize, step: usize) -> Result<()> {
    for (term, v) in [
        ("misfit", loss.misfit),
        ("codebook", loss.codebook),
        ("commitment", loss.commitment),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term, epoch, step });
        }
    }
    Ok(())
}

fn objective<'a>(variant: Variant, s: &'a Sample, table: &'a DelayTable) -> Objective<'a> {
    match variant {
        Variant::DataToImage => Objective::DataToImage {
            target: &s.image,
            table,
        },
        Variant::DataToData => Objective::DataToData,
    }
}

/// Loss and SSIM of the model on a set of samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub ssim_mean: f64,
}

/// Mean total loss and mean image SSIM (decoded image against the target
/// image) over `samples`. Both variants are scored in the image domain.
pub fn evaluate(
    model: &Model,
    samples: &[Sample],
    table: &DelayTable,
    variant: Variant,
    weights: VqWeights,
    bottleneck: Bottleneck,
    ssim_cfg: &SsimConfig,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Ok(Evaluation {
            loss: f64::NAN,
            ssim_mean: f64::NAN,
        });
    }
    let mut loss = 0.0;
    let mut score = 0.0;
    for s in samples {
        let pass = model.forward(&s.data, bottleneck, Some(table))?;
        let u_hat = pass.u_hat.as_ref().expect("table supplied");
        let misfit = match variant {
            Variant::DataToImage => u_hat.sub(&s.image)?.norm_sq(),
            Variant::DataToData => pass.f_tilde.sub(&s.data)?.norm_sq(),
        };
        let vq = match &pass.q {
            Some(q) => {
                let t = vq_loss_terms(&pass.e, &model.codebook, q)?;
                weights.codebook * t.codebook_loss + weights.commitment * t.commitment_loss
            }
            None => 0.0,
        };
        loss += misfit + vq;
        score += ssim(&s.image, u_hat, ssim_cfg)?;
    }
    let n = samples.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        ssim_mean: score / n,
    })
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochMetrics>,
}

/// Trains a freshly initialized model. `on_epoch` is called after every
/// epoch with the current model and that epoch's metrics.
pub fn train(
    dataset: &Dataset,
    model_config: &ModelConfig,
    cfg: &TrainingConfig,
    table: &DelayTable,
    ssim_cfg: &SsimConfig,
    on_epoch: impl FnMut(&Model, &EpochMetrics) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut model = Model::init(model_config.clone(), cfg.seed)?;
    model.data_scale = dataset.data_scale();
    train_model(model, dataset, cfg, table, ssim_cfg, on_epoch)
}

/// Continues training an existing model.
pub fn train_model(
    mut model: Model,
    dataset: &Dataset,
    cfg: &TrainingConfig,
    table: &DelayTable,
    ssim_cfg: &SsimConfig,
    mut on_epoch: impl FnMut(&Model, &EpochMetrics) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    dataset.validate(model.data_shape(), table.image_shape())?;
    crate::error::ensure_shape(&model.data_shape(), &table.data_shape())?;
    if dataset.train.is_empty() && cfg.epochs > 0 {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let weights = VqWeights {
        codebook: cfg.codebook_weight,
        commitment: cfg.commitment_weight,
    };
    let bottleneck = cfg.bottleneck();
    let mut adam = Adam::new(&model.params(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed_5eed_5eed);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut grids = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = model.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let s = &dataset.train[i];
                let eval = loss_and_grads(&model, &s.data, objective(cfg.variant, s, table), weights, bottleneck)?;
                check_finite(&eval.loss, epoch, step)?;
                epoch_loss += eval.loss.total();
                for (acc, g) in grads.iter_mut().zip(&eval.grads) {
                    acc.add_scaled(g, scale)?;
                }
                grids.extend(eval.q);
            }
            adam.step(model.params_mut(), &grads);
            step += 1;
        }
        let test = evaluate(&model, &dataset.test, table, cfg.variant, weights, bottleneck, ssim_cfg)?;
        let metrics = EpochMetrics {
            epoch,
            train_loss: epoch_loss / dataset.train.len() as f64,
            test_loss: test.loss,
            test_ssim_mean: test.ssim_mean,
            codebook_used_fraction: codebook_utilization(&grids, model.codebook.size()),
        };
        on_epoch(&model, &metrics)?;
        log.push(metrics);
    }
    Ok(TrainOutcome { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerSpec;

    fn tiny() -> ModelConfig {
        ModelConfig {
            data_shape: [8, 4, 4],
            encoder: vec![
                LayerSpec {
                    filters: 2,
                    stride: [2, 2, 2],
                    weight_standardization: false,
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

    fn table() -> DelayTable {
        let idx = (0..3 * 2 * 16).map(|i| (i % 7) as f64 + 0.3).collect();
        DelayTable::from_indices([3, 2], [8, 4, 4], idx).unwrap()
    }

    #[test]
    fn zero_model_misfit_is_target_norm() {
        let mut m = Model::init(tiny(), 1).unwrap();
        for b in &mut m.decoder {
            b.conv.weight.fill(0.0);
        }
        let f = Tensor::full(&[8, 4, 4], 0.5);
        let u = Tensor::from_vec(&[3, 2], vec![1.0, -2.0, 0.5, 0.0, 3.0, 1.0]).unwrap();
        let t = table();
        let eval = loss_data_to_image(&m, &f, &u, &t, VqWeights::default()).unwrap();
        assert_eq!(eval.loss.misfit, u.norm_sq());
        let eval = loss_data_to_data(&m, &f, VqWeights::default()).unwrap();
        assert_eq!(eval.loss.misfit, f.norm_sq());
    }

    #[test]
    fn straight_through_buffers_agree() {
        let m = Model::init(tiny(), 2).unwrap();
        let f = Tensor::full(&[8, 4, 4], 0.25);
        let u = Tensor::full(&[3, 2], 1.0);
        let eval = loss_data_to_image(&m, &f, &u, &table(), VqWeights::default()).unwrap();
        assert_eq!(eval.grad_encoder_output.data(), eval.grad_decoder_input.data());
    }

    #[test]
    fn codebook_only_sees_its_own_term() {
        let m = Model::init(tiny(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = Tensor::uniform(&[8, 4, 4], -1.0, 1.0, &mut rng);
        let u = Tensor::uniform(&[3, 2], -1.0, 1.0, &mut rng);
        let w = VqWeights {
            codebook: 0.0,
            commitment: 1.0,
        };
        for eval in [
            loss_data_to_image(&m, &f, &u, &table(), w).unwrap(),
            loss_data_to_data(&m, &f, w).unwrap(),
        ] {
            let cb = &eval.grads[m.codebook_param_index()];
            assert!(cb.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let ds = Dataset {
            train: vec![Sample {
                data: Tensor::full(&[8, 4, 4], 0.5),
                image: Tensor::zeros(&[3, 2]),
            }],
            test: vec![],
        };
        let cfg = TrainingConfig {
            epochs: 0,
            ..TrainingConfig::default()
        };
        let out = train(&ds, &tiny(), &cfg, &table(), &SsimConfig::default(), |_, _| Ok(())).unwrap();
        assert!(out.log.is_empty());
        let mut expected = Model::init(tiny(), cfg.seed).unwrap();
        expected.data_scale = 0.5;
        assert_eq!(out.model, expected);
    }

    #[test]
    fn config_validation() {
        let bad = TrainingConfig {
            learning_rate: 0.0,
            ..TrainingConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainingConfig {
            batch_size: 0,
            ..TrainingConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn non_finite_loss_names_the_term() {
        let loss = LossBreakdown {
            misfit: 1.0,
            codebook: f64::NAN,
            commitment: 0.0,
        };
        let err = check_finite(&loss, 3, 17).unwrap_err();
        assert!(err.to_string().contains("codebook"));
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::from_vec(&[2], vec![0.5, -3.0]).unwrap();
        let mut adam = Adam::new(&[&p], 0.1, 0.9, 0.999, 1e-8);
        adam.step(vec![&mut p], &[g]);
        // First bias-corrected step has magnitude ~lr in each coordinate.
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
    }
}
