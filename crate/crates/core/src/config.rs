//! Run configuration: everything a pipeline run depends on, in one TOML file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::das::{build_delay_table, DelayTable};
use crate::error::{Error, Result};
use crate::geometry::{AcquisitionGeometry, ImagingGrid};
use crate::io::write_atomic;
use crate::metrics::SsimConfig;
use crate::model::{LayerSpec, ModelConfig};
use crate::simulate::{PulseWaveform, ScenarioConfig};
use crate::training::TrainingConfig;

/// Linear array recording full-matrix capture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayConfig {
    pub n_elements: usize,
    /// Element spacing (m).
    pub pitch: f64,
    /// Sampling frequency (Hz).
    pub sampling_frequency: f64,
    /// Background sound speed (m/s).
    pub sound_speed: f64,
    pub n_time_samples: usize,
    /// Time of the first sample (s).
    #[serde(default)]
    pub time_offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Centre of pixel `(0, 0)`, `[x, z]` in meters.
    pub origin: [f64; 2],
    pub pixel_pitch_x: f64,
    pub pixel_pitch_z: f64,
    pub n_x: usize,
    pub n_z: usize,
}

/// Model architecture; the data shape is taken from the array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub encoder: Vec<LayerSpec>,
    pub kernel: [usize; 3],
    pub codebook_size: usize,
    pub groupnorm_groups: usize,
    pub residual: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Seed for scenario generation.
    pub seed: u64,
    pub array: ArrayConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub pulse: PulseWaveform,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    pub dataset: DatasetConfig,
    pub model: ArchitectureConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub ssim: SsimConfig,
}

impl RunConfig {
    /// Desk-scale setup: 8 elements at 0.8 mm pitch sampled at 25 MHz in
    /// steel (5920 m/s), 128 samples per trace, and a 24 x 32 image at
    /// 0.25 mm below the array.
    pub fn desk() -> Self {
        let array = ArrayConfig {
            n_elements: 8,
            pitch: 0.8e-3,
            sampling_frequency: 25e6,
            sound_speed: 5920.0,
            n_time_samples: 128,
            time_offset: 0.0,
        };
        let desk = ModelConfig::desk([128, 8, 8]);
        Self {
            seed: 1,
            array,
            grid: GridConfig {
                origin: [-2.875e-3, 2e-3],
                pixel_pitch_x: 0.25e-3,
                pixel_pitch_z: 0.25e-3,
                n_x: 24,
                n_z: 32,
            },
            pulse: PulseWaveform::default(),
            scenario: ScenarioConfig::default(),
            dataset: DatasetConfig { n_train: 64, n_test: 16 },
            model: ArchitectureConfig {
                encoder: desk.encoder,
                kernel: desk.kernel,
                codebook_size: desk.codebook_size,
                groupnorm_groups: desk.groupnorm_groups,
                residual: desk.residual,
            },
            training: TrainingConfig::default(),
            ssim: SsimConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the fully resolved configuration.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.to_toml_string()?.as_bytes())
    }

    /// Checks every section by constructing the objects it describes.
    pub fn validate(&self) -> Result<()> {
        let geom = self.geometry()?;
        self.imaging_grid()?;
        self.pulse.validate(geom.sampling_frequency())?;
        self.scenario.validate()?;
        self.model_config().plan()?;
        self.training.validate()
    }

    pub fn geometry(&self) -> Result<AcquisitionGeometry> {
        let a = &self.array;
        AcquisitionGeometry::linear_array(
            a.n_elements,
            a.pitch,
            a.sampling_frequency,
            a.sound_speed,
            a.n_time_samples,
            a.time_offset,
        )
    }

    pub fn imaging_grid(&self) -> Result<ImagingGrid> {
        let g = &self.grid;
        ImagingGrid::new(g.origin, g.pixel_pitch_x, g.pixel_pitch_z, g.n_x, g.n_z)
    }

    pub fn delay_table(&self) -> Result<DelayTable> {
        build_delay_table(&self.geometry()?, &self.imaging_grid()?)
    }

    pub fn data_shape(&self) -> [usize; 3] {
        let a = &self.array;
        [a.n_time_samples, a.n_elements, a.n_elements]
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            data_shape: self.data_shape(),
            encoder: m.encoder.clone(),
            kernel: m.kernel,
            codebook_size: m.codebook_size,
            groupnorm_groups: m.groupnorm_groups,
            residual: m.residual,
        }
    }
}
