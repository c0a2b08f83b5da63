//! Image-quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SsimWindow {
    Uniform { size: usize },
    Gaussian { size: usize, sigma: f64 },
}

impl SsimWindow {
    fn size(&self) -> usize {
        match *self {
            SsimWindow::Uniform { size } | SsimWindow::Gaussian { size, .. } => size,
        }
    }

    /// Separable 1D weights summing to one.
    fn weights(&self) -> Vec<f64> {
        let w: Vec<f64> = match *self {
            SsimWindow::Uniform { size } => vec![1.0; size],
            SsimWindow::Gaussian { size, sigma } => {
                let c = (size as f64 - 1.0) / 2.0;
                (0..size)
                    .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
                    .collect()
            }
        };
        let total: f64 = w.iter().sum();
        w.into_iter().map(|v| v / total).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicRange {
    /// `max - min` of the first (reference) image.
    FromReference,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: SsimWindow,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: DynamicRange,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: SsimWindow::Gaussian { size: 11, sigma: 1.5 },
            k1: 0.01,
            k2: 0.03,
            dynamic_range: DynamicRange::FromReference,
        }
    }
}

impl SsimConfig {
    pub fn describe(&self) -> String {
        let window = match self.window {
            SsimWindow::Uniform { size } => format!("uniform{size}x{size}"),
            SsimWindow::Gaussian { size, sigma } => format!("gaussian{size}x{size}(sigma={sigma})"),
        };
        let range = match self.dynamic_range {
            DynamicRange::FromReference => "reference".to_string(),
            DynamicRange::Fixed(v) => format!("{v}"),
        };
        format!("window={window} k1={} k2={} dynamic_range={range}", self.k1, self.k2)
    }
}

/// Mean structural similarity over all window positions fully inside the
/// images. A constant reference image with `FromReference` range uses a
/// dynamic range of 1.
pub fn ssim(a: &Tensor, b: &Tensor, cfg: &SsimConfig) -> Result<f64> {
    ensure_shape(a.shape(), b.shape())?;
    if a.ndim() != 2 {
        return Err(Error::InvalidArgument(format!("ssim needs 2D images, got {:?}", a.shape())));
    }
    let [h, w] = [a.shape()[0], a.shape()[1]];
    let size = cfg.window.size();
    if size == 0 || size > h || size > w {
        return Err(Error::InvalidArgument(format!(
            "{size}x{size} window does not fit a {h}x{w} image"
        )));
    }
    if !(cfg.k1 > 0.0 && cfg.k2 > 0.0) {
        return Err(Error::InvalidArgument("ssim constants must be positive".into()));
    }
    let range = match cfg.dynamic_range {
        DynamicRange::Fixed(r) if r > 0.0 => r,
        DynamicRange::Fixed(r) => {
            return Err(Error::InvalidArgument(format!("dynamic range must be positive, got {r}")))
        }
        DynamicRange::FromReference => {
            let (lo, hi) = a
                .data()
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            if hi > lo {
                hi - lo
            } else {
                1.0
            }
        }
    };
    let c1 = (cfg.k1 * range).powi(2);
    let c2 = (cfg.k2 * range).powi(2);
    let wts = cfg.window.weights();
    let (ad, bd) = (a.data(), b.data());
    let mut total = 0.0;
    let positions = (h - size + 1) * (w - size + 1);
    for i in 0..=h - size {
        for j in 0..=w - size {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (p, wp) in wts.iter().enumerate() {
                let row = (i + p) * w + j;
                for (q, wq) in wts.iter().enumerate() {
                    let wt = wp * wq;
                    let (x, y) = (ad[row + q], bd[row + q]);
                    ma += wt * x;
                    mb += wt * y;
                    saa += wt * x * x;
                    sbb += wt * y * y;
                    sab += wt * x * y;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / positions as f64)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    ensure_shape(a.shape(), b.shape())?;
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.sub(b)?.norm_sq() / a.len() as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn fixed(size: usize, range: f64) -> SsimConfig {
        SsimConfig {
            window: SsimWindow::Uniform { size },
            dynamic_range: DynamicRange::Fixed(range),
            ..SsimConfig::default()
        }
    }

    #[test]
    fn identical_images_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::uniform(&[16, 20], -1.0, 1.0, &mut rng);
        let s = ssim(&a, &a, &SsimConfig::default()).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn negated_zero_mean_image_scores_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut a = Tensor::uniform(&[12, 12], -1.0, 1.0, &mut rng);
        let mean = a.data().iter().sum::<f64>() / a.len() as f64;
        a.data_mut().iter_mut().for_each(|v| *v -= mean);
        let neg = a.map(|v| -v);
        assert!(ssim(&a, &neg, &fixed(12, 2.0)).unwrap() < 0.0);
    }

    #[test]
    fn constant_images_reduce_to_luminance_term() {
        let (v, delta, range) = (0.3, 0.25, 1.0);
        let a = Tensor::full(&[4, 4], v);
        let b = Tensor::full(&[4, 4], v + delta);
        let c1: f64 = (0.01 * range) * (0.01 * range);
        let expected = (2.0 * v * (v + delta) + c1) / (v * v + (v + delta) * (v + delta) + c1);
        let s = ssim(&a, &b, &fixed(4, range)).unwrap();
        assert!((s - expected).abs() < 1e-12);
    }

    #[test]
    fn window_must_fit() {
        let a = Tensor::zeros(&[8, 8]);
        assert!(ssim(&a, &a, &SsimConfig::default()).is_err());
        assert!(ssim(&a, &Tensor::zeros(&[8, 9]), &fixed(4, 1.0)).is_err());
    }

    #[test]
    fn mse_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::uniform(&[5, 7], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[5, 7], -1.0, 1.0, &mut rng);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&Tensor::zeros(&[3, 2]), &Tensor::full(&[3, 2], 1.0)).unwrap(), 1.0);
        let mut acc = 0.0;
        for i in 0..5 {
            for j in 0..7 {
                acc += (a.get(&[i, j]) - b.get(&[i, j])).powi(2);
            }
        }
        assert!((mse(&a, &b).unwrap() - acc / 35.0).abs() < 1e-12);
        assert!(mse(&a, &Tensor::zeros(&[7, 5])).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn symmetric_and_bounded(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = Tensor::uniform(&[14, 13], -1.0, 1.0, &mut rng);
                let b = Tensor::uniform(&[14, 13], -1.0, 1.0, &mut rng);
                let cfg = SsimConfig { dynamic_range: DynamicRange::Fixed(2.0), ..SsimConfig::default() };
                let ab = ssim(&a, &b, &cfg).unwrap();
                let ba = ssim(&b, &a, &cfg).unwrap();
                prop_assert!((ab - ba).abs() < 1e-12);
                prop_assert!(ab <= 1.0);
            }

            #[test]
            fn any_perturbation_lowers_score(seed in any::<u64>(), i in 0usize..10, j in 0usize..10, d in 0.01f64..1.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = Tensor::uniform(&[10, 10], -1.0, 1.0, &mut rng);
                let mut b = a.clone();
                b.set(&[i, j], a.get(&[i, j]) + d);
                let s = ssim(&a, &b, &fixed(5, 2.0)).unwrap();
                prop_assert!(s < 1.0);
            }
        }
    }
}
