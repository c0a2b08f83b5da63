//! Synthetic full-matrix-capture data from point scatterers.
//!
//! Each scatterer contributes a delayed copy of a Gaussian-windowed cosine
//! pulse to every `(source, receiver)` trace (single scattering, no
//! attenuation unless enabled), which keeps the data exactly within the
//! delay-and-sum model.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::das::{build_delay_table, das_forward};
use crate::error::{Error, Result};
use crate::geometry::{travel_time, AcquisitionGeometry, ImagingGrid, Point};
use crate::tensor::Tensor;
use crate::training::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scatterer {
    pub position: Point,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phantom {
    pub scatterers: Vec<Scatterer>,
    pub sound_speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseWaveform {
    pub center_frequency: f64,
    /// Full-width-at-half-maximum bandwidth as a fraction of the centre frequency.
    pub fractional_bandwidth: f64,
    /// The pulse is truncated to zero beyond this many samples from its peak.
    pub half_width_samples: usize,
}

impl Default for PulseWaveform {
    fn default() -> Self {
        Self {
            center_frequency: 5e6,
            fractional_bandwidth: 0.6,
            half_width_samples: 32,
        }
    }
}

impl PulseWaveform {
    pub fn validate(&self, sampling_frequency: f64) -> Result<()> {
        if !(self.center_frequency > 0.0 && self.center_frequency < sampling_frequency / 2.0) {
            return Err(Error::InvalidArgument(format!(
                "centre frequency {} Hz must lie in (0, {} Hz)",
                self.center_frequency,
                sampling_frequency / 2.0
            )));
        }
        if !(self.fractional_bandwidth > 0.0) {
            return Err(Error::InvalidArgument("fractional bandwidth must be positive".into()));
        }
        Ok(())
    }

    /// Standard deviation of the Gaussian envelope in seconds.
    pub fn envelope_sigma(&self) -> f64 {
        // Amplitude spectrum exp(-2 pi^2 sigma^2 f^2) falls to one half at
        // f = FWHM / 2.
        (2.0 * std::f64::consts::LN_2).sqrt() / (PI * self.fractional_bandwidth * self.center_frequency)
    }

    /// Pulse value at time `t` (seconds) relative to its peak.
    pub fn eval(&self, t: f64, sampling_frequency: f64) -> f64 {
        if (t * sampling_frequency).abs() > self.half_width_samples as f64 {
            return 0.0;
        }
        let s = self.envelope_sigma();
        (-(t * t) / (2.0 * s * s)).exp() * (2.0 * PI * self.center_frequency * t).cos()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub min_scatterers: usize,
    pub max_scatterers: usize,
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    /// Scatterers keep at least this distance (m) from the imaging-region border.
    pub margin: f64,
    /// Scale each trace by `1 / (r_s r_m)` path spreading.
    #[serde(default)]
    pub geometric_spreading: bool,
    /// Amplitude attenuation in nepers per meter of total path length.
    #[serde(default)]
    pub attenuation: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            min_scatterers: 1,
            max_scatterers: 3,
            amplitude_min: 0.5,
            amplitude_max: 1.0,
            margin: 0.5e-3,
            geometric_spreading: false,
            attenuation: 0.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_scatterers > self.max_scatterers {
            return Err(Error::InvalidArgument("min_scatterers exceeds max_scatterers".into()));
        }
        if !(-1.0..=1.0).contains(&self.amplitude_min)
            || !(-1.0..=1.0).contains(&self.amplitude_max)
            || self.amplitude_min > self.amplitude_max
        {
            return Err(Error::InvalidArgument("amplitudes must satisfy -1 <= min <= max <= 1".into()));
        }
        if self.margin < 0.0 || self.attenuation < 0.0 {
            return Err(Error::InvalidArgument("margin and attenuation must be non-negative".into()));
        }
        Ok(())
    }
}

/// Draws a random phantom inside the grid extent shrunk by the margin.
pub fn sample_phantom<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &ScenarioConfig,
    grid: &ImagingGrid,
    sound_speed: f64,
) -> Result<Phantom> {
    cfg.validate()?;
    let [x0, x1, z0, z1] = grid.extent();
    let (x0, x1, z0, z1) = (x0 + cfg.margin, x1 - cfg.margin, z0 + cfg.margin, z1 - cfg.margin);
    if cfg.max_scatterers > 0 && (x0 > x1 || z0 > z1) {
        return Err(Error::InvalidArgument(
            "margin leaves no feasible region for scatterers".into(),
        ));
    }
    let count = rng.gen_range(cfg.min_scatterers..=cfg.max_scatterers);
    let scatterers = (0..count)
        .map(|_| {
            let x = if x1 > x0 { rng.gen_range(x0..=x1) } else { x0 };
            let z = if z1 > z0 { rng.gen_range(z0..=z1) } else { z0 };
            let amplitude = if cfg.amplitude_max > cfg.amplitude_min {
                rng.gen_range(cfg.amplitude_min..=cfg.amplitude_max)
            } else {
                cfg.amplitude_min
            };
            Scatterer {
                position: [x, z],
                amplitude,
            }
        })
        .collect();
    Ok(Phantom {
        scatterers,
        sound_speed,
    })
}

/// Un-normalized echo data `f(t, s, m) = sum_k a_k w(t - tau_k(s, m))`.
pub fn synthesize_raw(
    phantom: &Phantom,
    geom: &AcquisitionGeometry,
    pulse: &PulseWaveform,
    scenario: &ScenarioConfig,
) -> Result<Tensor> {
    let fs = geom.sampling_frequency();
    pulse.validate(fs)?;
    let [n_t, n_s, n_r] = geom.data_shape();
    let elements = geom.element_positions();
    let mut f = Tensor::zeros(&[n_t, n_s, n_r]);
    let half = pulse.half_width_samples as f64;
    let data = f.data_mut();
    for sc in &phantom.scatterers {
        for (s, &rs) in elements.iter().enumerate() {
            for (m, &rm) in elements.iter().enumerate() {
                let tau = travel_time(sc.position, rs, rm, phantom.sound_speed)?;
                let mut amp = sc.amplitude;
                if scenario.geometric_spreading {
                    let ds = (sc.position[0] - rs[0]).hypot(sc.position[1] - rs[1]);
                    let dm = (sc.position[0] - rm[0]).hypot(sc.position[1] - rm[1]);
                    amp /= (ds * dm).max(f64::MIN_POSITIVE);
                }
                if scenario.attenuation > 0.0 {
                    amp *= (-scenario.attenuation * tau * phantom.sound_speed).exp();
                }
                let centre = (tau - geom.time_offset()) * fs;
                let lo = (centre - half).ceil().max(0.0) as usize;
                let hi = ((centre + half).floor() as isize).min(n_t as isize - 1);
                if hi < lo as isize {
                    continue;
                }
                for t in lo..=hi as usize {
                    let dt = t as f64 / fs + geom.time_offset() - tau;
                    data[(t * n_s + s) * n_r + m] += amp * pulse.eval(dt, fs);
                }
            }
        }
    }
    Ok(f)
}

/// Echo data normalized to `[-1, 1]`, with the scale that was divided out
/// (1 for all-zero data).
pub fn synthesize_fmc(
    phantom: &Phantom,
    geom: &AcquisitionGeometry,
    pulse: &PulseWaveform,
    scenario: &ScenarioConfig,
) -> Result<(Tensor, f64)> {
    let mut f = synthesize_raw(phantom, geom, pulse, scenario)?;
    let m = f.max_abs();
    let scale = if m > 0.0 { m } else { 1.0 };
    f.scale(1.0 / scale);
    Ok((f, scale))
}

/// A generated scenario: phantom, normalized data, its DAS image, and the data scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub phantom: Phantom,
    pub sample: Sample,
    pub data_scale: f64,
}

/// Generates `count` scenarios. Scenario `i` uses its own ChaCha stream of
/// `seed`, so scenarios are independent of how many are generated.
pub fn generate_scenarios(
    seed: u64,
    stream_offset: u64,
    count: usize,
    geom: &AcquisitionGeometry,
    grid: &ImagingGrid,
    pulse: &PulseWaveform,
    scenario: &ScenarioConfig,
) -> Result<Vec<Scenario>> {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let table = build_delay_table(geom, grid)?;
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream_offset + i as u64);
            let phantom = sample_phantom(&mut rng, scenario, grid, geom.sound_speed())?;
            let (data, data_scale) = synthesize_fmc(&phantom, geom, pulse, scenario)?;
            let image = das_forward(&data, &table)?;
            Ok(Scenario {
                phantom,
                sample: Sample { data, image },
                data_scale,
            })
        })
        .collect()
}
