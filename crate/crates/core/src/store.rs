//! Model and scenario files, both stored as containers.
//!
//! A model file holds a TOML `manifest` (configuration, data scale, crop
//! records, seed, code shape), one `f64` tensor entry per parameter named
//! `param/<name>`, and the codebook as its `D x L` matrix under `codebook`.
//! A scenario file holds the raw data `f`, the target image `u`, and a TOML
//! `phantom` entry.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure_shape, Error, Result};
use crate::io::{write_atomic, Container, TensorFile};
use crate::model::{CropRecord, Model, ModelConfig};
use crate::simulate::{Phantom, Scenario};
use crate::training::Sample;
use crate::vq::Codebook;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub data_scale: f64,
    pub seed: u64,
    pub code_shape: [usize; 3],
    #[serde(default)]
    pub crops: Vec<CropRecord>,
}

fn to_toml<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    toml::to_string(value)
        .map(String::into_bytes)
        .map_err(|e| Error::InvalidArgument(format!("cannot serialize manifest: {e}")))
}

fn from_toml<T: for<'de> Deserialize<'de>>(bytes: &[u8], what: &str) -> Result<T> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::Malformed(format!("{what} is not UTF-8")))?;
    toml::from_str(text).map_err(|e| Error::Malformed(format!("{what}: {e}")))
}

fn tensor_entry(c: &Container, name: &str) -> Result<crate::Tensor> {
    TensorFile::from_bytes(c.require(name)?)?.into_tensor()
}

/// Serialized model file contents.
pub fn model_to_bytes(model: &Model) -> Result<Vec<u8>> {
    let plan = model.config.plan()?;
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        data_scale: model.data_scale,
        seed: model.seed,
        code_shape: model.code_shape(),
        crops: plan.crops,
    };
    let mut c = Container::new();
    c.insert("manifest", to_toml(&manifest)?)?;
    let names = model.param_names();
    let params = model.params();
    for (name, p) in names.iter().zip(&params).take(names.len() - 1) {
        c.insert(format!("param/{name}"), TensorFile::from_tensor(p).to_bytes())?;
    }
    c.insert("codebook", TensorFile::from_tensor(&model.codebook.to_matrix()).to_bytes())?;
    Ok(c.to_bytes())
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    let c = Container::from_bytes(bytes)?;
    let manifest: ModelManifest = from_toml(c.require("manifest")?, "model manifest")?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Malformed(format!(
            "unsupported model format version {}",
            manifest.format_version
        )));
    }
    let plan = manifest.config.plan()?;
    if plan.crops != manifest.crops || Some(&manifest.code_shape) != plan.spatial.last() {
        return Err(Error::Malformed(
            "manifest crop records or code shape disagree with its configuration".into(),
        ));
    }
    let mut model = Model::init(manifest.config, manifest.seed)?;
    model.data_scale = manifest.data_scale;
    let names = model.param_names();
    let n = names.len() - 1;
    for (name, slot) in names.iter().zip(model.params_mut()).take(n) {
        let t = tensor_entry(&c, &format!("param/{name}"))?;
        ensure_shape(slot.shape(), t.shape())?;
        *slot = t;
    }
    let codebook = Codebook::from_matrix(&tensor_entry(&c, "codebook")?)?;
    ensure_shape(model.codebook.rows().shape(), codebook.rows().shape())?;
    model.codebook = codebook;
    Ok(model)
}

/// SHA-256 of the model file bytes.
pub fn fingerprint(model_file_bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(model_file_bytes).into()
}

pub fn fingerprint_hex(fp: &[u8; 32]) -> String {
    fp.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes a model file and returns its fingerprint.
pub fn save_model(path: impl AsRef<Path>, model: &Model) -> Result<[u8; 32]> {
    let bytes = model_to_bytes(model)?;
    write_atomic(path, &bytes)?;
    Ok(fingerprint(&bytes))
}

/// Reads a model file, returning the model and its fingerprint.
pub fn load_model(path: impl AsRef<Path>) -> Result<(Model, [u8; 32])> {
    let bytes = fs::read(path)?;
    Ok((model_from_bytes(&bytes)?, fingerprint(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PhantomManifest {
    data_scale: f64,
    phantom: Phantom,
}

pub fn scenario_to_bytes(s: &Scenario) -> Result<Vec<u8>> {
    let mut c = Container::new();
    c.insert("f", TensorFile::from_tensor(&s.sample.data).to_bytes())?;
    c.insert("u", TensorFile::from_tensor(&s.sample.image).to_bytes())?;
    c.insert(
        "phantom",
        to_toml(&PhantomManifest {
            data_scale: s.data_scale,
            phantom: s.phantom.clone(),
        })?,
    )?;
    Ok(c.to_bytes())
}

pub fn scenario_from_bytes(bytes: &[u8]) -> Result<Scenario> {
    let c = Container::from_bytes(bytes)?;
    let m: PhantomManifest = from_toml(c.require("phantom")?, "phantom manifest")?;
    Ok(Scenario {
        phantom: m.phantom,
        sample: Sample {
            data: tensor_entry(&c, "f")?,
            image: tensor_entry(&c, "u")?,
        },
        data_scale: m.data_scale,
    })
}

pub fn save_scenario(path: impl AsRef<Path>, s: &Scenario) -> Result<()> {
    write_atomic(path, &scenario_to_bytes(s)?)
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    scenario_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerSpec;
    use crate::simulate::Scatterer;
    use crate::Tensor;

    fn small_model() -> Model {
        let cfg = ModelConfig {
            data_shape: [9, 4, 4],
            encoder: vec![
                LayerSpec {
                    filters: 2,
                    stride: [2, 2, 2],
                    weight_standardization: true,
                },
                LayerSpec {
                    filters: 4,
                    stride: [1, 1, 1],
                    weight_standardization: false,
                },
            ],
            kernel: [3, 3, 3],
            codebook_size: 5,
            groupnorm_groups: 2,
            residual: true,
        };
        let mut m = Model::init(cfg, 11).unwrap();
        m.data_scale = 0.123456789;
        m
    }

    #[test]
    fn model_round_trips_bitwise() {
        let m = small_model();
        let bytes = model_to_bytes(&m).unwrap();
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(model_to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn manifest_records_crops() {
        let m = small_model();
        let c = Container::from_bytes(&model_to_bytes(&m).unwrap()).unwrap();
        let manifest: ModelManifest = from_toml(c.require("manifest").unwrap(), "manifest").unwrap();
        // 9 -> 5 by ceil division; upsampling gives 10 and is cropped back to 9.
        assert_eq!(
            manifest.crops,
            vec![CropRecord {
                decoder_layer: 1,
                from: [10, 4, 4],
                to: [9, 4, 4],
            }]
        );
        assert_eq!(manifest.code_shape, [5, 2, 2]);
    }

    #[test]
    fn wrong_parameter_shape_is_rejected() {
        let m = small_model();
        let mut c = Container::from_bytes(&model_to_bytes(&m).unwrap()).unwrap();
        let mut rebuilt = Container::new();
        for name in c.names().map(str::to_string).collect::<Vec<_>>() {
            let payload = if name == "param/encoder.0.bias" {
                TensorFile::from_tensor(&Tensor::zeros(&[3])).to_bytes()
            } else {
                c.require(&name).unwrap().to_vec()
            };
            rebuilt.insert(name, payload).unwrap();
        }
        c = rebuilt;
        assert!(matches!(
            model_from_bytes(&c.to_bytes()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn fingerprint_changes_with_any_parameter() {
        let m = small_model();
        let a = fingerprint(&model_to_bytes(&m).unwrap());
        let mut m2 = m.clone();
        m2.params_mut()[0].data_mut()[0] += 1e-12;
        assert_ne!(a, fingerprint(&model_to_bytes(&m2).unwrap()));
        assert_eq!(fingerprint_hex(&a).len(), 64);
    }

    #[test]
    fn scenario_round_trips() {
        let s = Scenario {
            phantom: Phantom {
                scatterers: vec![Scatterer {
                    position: [1e-3, 4.5e-3],
                    amplitude: -0.7,
                }],
                sound_speed: 5920.0,
            },
            sample: Sample {
                data: Tensor::from_vec(&[2, 1, 1], vec![0.25, -1.0]).unwrap(),
                image: Tensor::from_vec(&[1, 2], vec![3.0, 0.1]).unwrap(),
            },
            data_scale: 3.5e-2,
        };
        let bytes = scenario_to_bytes(&s).unwrap();
        assert_eq!(scenario_from_bytes(&bytes).unwrap(), s);
    }
}
