//! Versioned JSON checkpoints of a trained model.
//!
//! A checkpoint stores the layer shapes, every parameter tensor as a flat
//! array, both Adam moment estimates, the seed and the training
//! configuration, and the feature scaler fitted on the training partition.
//! Floats are written in shortest round-trip form, so saving and loading is
//! bit exact.

use std::fs;
use std::path::Path;

use cellhealth_core::nn::{AdamState, ModelVariant, NetworkParams, NetworkShape};
use cellhealth_core::seed::rng_from;
use cellhealth_core::train::{Scaler, TrainConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT: &str = "cellhealth-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("not a checkpoint (format `{0}`)")]
    WrongFormat(String),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("tensor {index}: expected `{expected}` {expected_shape:?}, found `{found}` {found_shape:?}")]
    TensorMismatch {
        index: usize,
        expected: String,
        expected_shape: Vec<usize>,
        found: String,
        found_shape: Vec<usize>,
    },
    #[error("expected {expected} tensors, found {found}")]
    TensorCount { expected: usize, found: usize },
    #[error("tensor `{0}` holds a non-finite value")]
    NonFinite(String),
    #[error("layer sizes are inconsistent: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MomentsRecord {
    step: u64,
    m: Vec<TensorRecord>,
    v: Vec<TensorRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    format_version: u32,
    label: String,
    variant: ModelVariant,
    shape: NetworkShape,
    dropout_rate: f64,
    seed: u64,
    config: TrainConfig,
    scaler: Scaler,
    params: Vec<TensorRecord>,
    adam: MomentsRecord,
}

/// Everything needed to resume or evaluate one trained regime.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub label: String,
    /// Seed of the regime's training run.
    pub seed: u64,
    pub config: TrainConfig,
    pub scaler: Scaler,
    pub params: NetworkParams,
    pub adam: AdamState,
}

fn records(p: &NetworkParams) -> Result<Vec<TensorRecord>, CheckpointError> {
    p.tensor_names()
        .into_iter()
        .zip(p.tensors())
        .map(|(name, t)| {
            if t.data().iter().any(|x| !x.is_finite()) {
                return Err(CheckpointError::NonFinite(name.to_string()));
            }
            Ok(TensorRecord {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
        })
        .collect()
}

fn fill(target: &mut NetworkParams, stored: &[TensorRecord]) -> Result<(), CheckpointError> {
    let names = target.tensor_names();
    let mut tensors = target.tensors_mut();
    if tensors.len() != stored.len() {
        return Err(CheckpointError::TensorCount {
            expected: tensors.len(),
            found: stored.len(),
        });
    }
    for (index, ((t, name), rec)) in tensors.iter_mut().zip(names).zip(stored).enumerate() {
        if rec.name != name || rec.shape != t.shape() || rec.data.len() != t.len() {
            return Err(CheckpointError::TensorMismatch {
                index,
                expected: name.to_string(),
                expected_shape: t.shape().to_vec(),
                found: rec.name.clone(),
                found_shape: rec.shape.clone(),
            });
        }
        if rec.data.iter().any(|x| !x.is_finite()) {
            return Err(CheckpointError::NonFinite(rec.name.clone()));
        }
        t.data_mut().copy_from_slice(&rec.data);
    }
    Ok(())
}

fn shape_of(p: &NetworkParams, window_len: usize) -> NetworkShape {
    let hidden = p.lstm.as_ref().map_or([1, 1], |s| [s.first.hidden(), s.second.hidden()]);
    NetworkShape {
        features: p.features(),
        window_len,
        filters: p.conv.filters(),
        kernel: p.conv.kernel(),
        pool: p.pool,
        hidden,
    }
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String, CheckpointError> {
        let file = CheckpointFile {
            format: FORMAT.to_string(),
            format_version: FORMAT_VERSION,
            label: self.label.clone(),
            variant: self.params.variant(),
            shape: shape_of(&self.params, self.config.window_len),
            dropout_rate: self.params.dropout_rate,
            seed: self.seed,
            config: self.config.clone(),
            scaler: self.scaler.clone(),
            params: records(&self.params)?,
            adam: MomentsRecord {
                step: self.adam.step,
                m: records(&self.adam.m)?,
                v: records(&self.adam.v)?,
            },
        };
        let mut text = serde_json::to_string_pretty(&file).map_err(|source| CheckpointError::Json {
            path: String::new(),
            source,
        })?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let file: CheckpointFile = serde_json::from_str(text).map_err(|source| CheckpointError::Json {
            path: String::new(),
            source,
        })?;
        if file.format != FORMAT {
            return Err(CheckpointError::WrongFormat(file.format));
        }
        if file.format_version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(file.format_version));
        }
        let mut params = NetworkParams::init(file.variant, file.shape, file.dropout_rate, &mut rng_from(0))
            .map_err(|e| CheckpointError::Shape(e.to_string()))?;
        fill(&mut params, &file.params)?;
        let mut adam = AdamState::new(&params);
        adam.step = file.adam.step;
        fill(&mut adam.m, &file.adam.m)?;
        fill(&mut adam.v, &file.adam.v)?;
        Ok(Checkpoint {
            label: file.label,
            seed: file.seed,
            config: file.config,
            scaler: file.scaler,
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let text = self.to_json()?;
        fs::write(path, text).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let name = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: name.clone(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| match e {
            CheckpointError::Json { source, .. } => CheckpointError::Json { path: name, source },
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cellhealth_core::train::NormalizerStats;
    use rand::Rng;

    fn scaler() -> Scaler {
        Scaler {
            features: NormalizerStats {
                min: vec![0.0, 0.0, -2.0, 3.0, 0.0],
                max: vec![9.0, 1e5, 2.0, 4.2, 2.2],
            },
            target: NormalizerStats {
                min: vec![0.0],
                max: vec![2.2],
            },
        }
    }

    fn sample(variant: ModelVariant, seed: u64) -> Checkpoint {
        let config = TrainConfig {
            model_variant: variant,
            filters: 4,
            hidden: [3, 2],
            ..TrainConfig::default()
        };
        let mut rng = rng_from(seed);
        let params = NetworkParams::init(variant, config.shape(), config.dropout_rate, &mut rng).unwrap();
        let mut adam = AdamState::new(&params);
        adam.step = 17;
        for t in adam.m.tensors_mut().into_iter().chain(adam.v.tensors_mut()) {
            for x in t.data_mut() {
                *x = rng.random_range(-1.0..1.0) * 1e-7 / 3.0;
            }
        }
        Checkpoint {
            label: "B".into(),
            seed,
            config,
            scaler: scaler(),
            params,
            adam,
        }
    }

    fn bits(p: &NetworkParams) -> Vec<u64> {
        p.tensors().iter().flat_map(|t| t.data().iter().map(|x| x.to_bits())).collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for variant in [ModelVariant::EkfCnnLstm, ModelVariant::EkfCnn] {
            let ck = sample(variant, 3);
            let text = ck.to_json().unwrap();
            let back = Checkpoint::from_json(&text).unwrap();
            assert_eq!(bits(&back.params), bits(&ck.params));
            assert_eq!(bits(&back.adam.m), bits(&ck.adam.m));
            assert_eq!(bits(&back.adam.v), bits(&ck.adam.v));
            assert_eq!(back, ck);
            assert_eq!(back.to_json().unwrap(), text);
        }
    }

    #[test]
    fn rejects_other_versions_and_shapes() {
        let text = sample(ModelVariant::EkfCnn, 1).to_json().unwrap();
        let bumped = text.replace("\"format_version\": 1", "\"format_version\": 2");
        assert!(matches!(
            Checkpoint::from_json(&bumped),
            Err(CheckpointError::UnsupportedVersion(2))
        ));
        let renamed = text.replacen("\"conv.b\"", "\"conv.x\"", 1);
        assert!(matches!(
            Checkpoint::from_json(&renamed),
            Err(CheckpointError::TensorMismatch { index: 1, .. })
        ));
        let wrong = text.replace(FORMAT, "something-else");
        assert!(matches!(Checkpoint::from_json(&wrong), Err(CheckpointError::WrongFormat(_))));
    }

    #[test]
    fn saves_and_loads_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        let ck = sample(ModelVariant::EkfCnnLstm, 9);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        let err = Checkpoint::load(&dir.path().join("missing.json")).unwrap_err();
        assert!(err.to_string().contains("missing.json"));
    }
}
