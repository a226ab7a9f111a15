//! Run configuration: one TOML file per run, overridden by command-line flags.
//!
//! ```toml
//! seed = 7
//! out = "runs/nca"
//! chemistry = "nca"
//!
//! [synth]
//! cycles = 10
//!
//! [train]
//! epochs = 100
//! batch_size = 32
//! learning_rate = 0.001
//! compare = true
//!
//! [dca]
//! window = 11
//!
//! [peaks]
//! threshold = 0.3
//! ```
//!
//! Every module draws its randomness from a child of the global `seed`; see
//! [`RunConfig::synth_seed`] and [`RunConfig::train_seed`].

use std::path::{Path, PathBuf};

use cellhealth_core::dca::DcaConfig;
use cellhealth_core::peaks::{DEFAULT_MATCH_GATE_V, DEFAULT_THRESHOLD_FRACTION, DISCHARGE_MATCH_GATE_V};
use cellhealth_core::seed::child_seed;
use cellhealth_core::train::{TrainConfig, TrainGrid};
use cellhealth_core::{CellSpec, Chemistry, StepKind};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: toml::de::Error,
    },
    #[error("unknown chemistry `{0}` (expected nca or lifepo4)")]
    UnknownChemistry(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub cycles: u32,
    pub noiseless: bool,
    /// Overrides the calibration's decimation of the 10 Hz base rate.
    pub decimation: Option<usize>,
    pub fade_per_cycle: Option<f64>,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            cycles: 10,
            noiseless: false,
            decimation: None,
            fade_per_cycle: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, try_from = "toml::Table")]
pub struct TrainSection {
    /// Also train the convolution-only variant and emit a comparison.
    pub compare: bool,
    #[serde(flatten)]
    pub config: TrainConfig,
}

impl TryFrom<toml::Table> for TrainSection {
    type Error = toml::de::Error;

    fn try_from(mut table: toml::Table) -> Result<Self, Self::Error> {
        let compare = match table.remove("compare") {
            Some(v) => v.try_into()?,
            None => false,
        };
        let config = toml::Value::Table(table).try_into()?;
        Ok(TrainSection { compare, config })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeaksSection {
    pub threshold: f64,
    pub charge_gate_v: f64,
    pub discharge_gate_v: f64,
    /// Cycle whose curves feed the C-rate trends; the earliest cycle of each
    /// cell when unset.
    pub cycle: Option<u32>,
}

impl Default for PeaksSection {
    fn default() -> Self {
        PeaksSection {
            threshold: DEFAULT_THRESHOLD_FRACTION,
            charge_gate_v: DEFAULT_MATCH_GATE_V,
            discharge_gate_v: DISCHARGE_MATCH_GATE_V,
            cycle: None,
        }
    }
}

impl PeaksSection {
    pub fn gate(&self, step: StepKind) -> f64 {
        match step {
            StepKind::Discharge => self.discharge_gate_v,
            _ => self.charge_gate_v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub chemistry: String,
    pub synth: SynthSection,
    pub train: TrainSection,
    pub grid: TrainGrid,
    pub dca: DcaConfig,
    pub peaks: PeaksSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            chemistry: Chemistry::LiNiCoAlO2.slug().to_string(),
            synth: SynthSection::default(),
            train: TrainSection::default(),
            grid: TrainGrid::default(),
            dca: DcaConfig::default(),
            peaks: PeaksSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn chemistry(&self) -> Result<Chemistry, ConfigError> {
        Chemistry::from_slug(&self.chemistry).ok_or_else(|| ConfigError::UnknownChemistry(self.chemistry.clone()))
    }

    pub fn cell_spec(&self) -> Result<CellSpec, ConfigError> {
        self.chemistry().map(CellSpec::for_chemistry)
    }

    /// `child_seed(seed, "synth")`.
    pub fn synth_seed(&self) -> u64 {
        child_seed(self.seed, "synth")
    }

    /// `child_seed(seed, "train")`. Each regime then splits this by its label.
    pub fn train_seed(&self) -> u64 {
        child_seed(self.seed, "train")
    }

    /// The training configuration with the derived seed filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.train_seed(),
            ..self.train.config.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.chemistry()?;
        self.train_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.peaks.threshold > 0.0 && self.peaks.threshold <= 1.0) {
            return Err(ConfigError::Invalid("peaks.threshold must lie in (0, 1]".into()));
        }
        if !(self.peaks.charge_gate_v > 0.0 && self.peaks.discharge_gate_v > 0.0) {
            return Err(ConfigError::Invalid("peak matching gates must be positive".into()));
        }
        let d = &self.dca;
        if d.n_points < 2 {
            return Err(ConfigError::Invalid("dca.n_points must be at least 2".into()));
        }
        if d.smooth && (d.window < 3 || d.window.is_multiple_of(2) || d.poly_order >= d.window) {
            return Err(ConfigError::Invalid(
                "dca.window must be odd, >= 3 and larger than dca.poly_order".into(),
            ));
        }
        if self.synth.cycles == 0 {
            return Err(ConfigError::Invalid("synth.cycles must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        let c = RunConfig::from_toml("", Path::new("run.toml")).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.config, TrainConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn sections_override_fields() {
        let text = r#"
seed = 7
chemistry = "lifepo4"
[synth]
cycles = 5
[train]
epochs = 3
compare = true
model_variant = "EkfCnn"
[grid]
learning_rates = [0.001]
[dca]
window = 7
[peaks]
threshold = 0.25
"#;
        let c = RunConfig::from_toml(text, Path::new("run.toml")).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.chemistry().unwrap(), Chemistry::LiFePO4);
        assert_eq!(c.synth.cycles, 5);
        assert_eq!(c.train.config.epochs, 3);
        assert!(c.train.compare);
        assert_eq!(c.grid.learning_rates, [0.001]);
        assert_eq!(c.grid.batch_sizes, [32, 64]);
        assert_eq!(c.dca.window, 7);
        assert_eq!(c.dca.n_points, 100);
        assert_eq!(c.peaks.threshold, 0.25);
        assert_eq!(c.train_config().seed, child_seed(7, "train"));
    }

    #[test]
    fn typos_are_rejected() {
        assert!(RunConfig::from_toml("sed = 1", Path::new("x.toml")).is_err());
        assert!(RunConfig::from_toml("[peaks]\nthreshhold = 0.2", Path::new("x.toml")).is_err());
        for section in ["train", "dca", "grid"] {
            assert!(
                RunConfig::from_toml(&format!("[{section}]\nbogus = 1"), Path::new("x.toml")).is_err(),
                "{section}"
            );
        }
        let c = RunConfig::from_toml("[train]\ncompare = true\nepochs = 3", Path::new("x.toml")).unwrap();
        assert!(c.train.compare);
        assert_eq!(c.train.config.epochs, 3);
        let c = RunConfig {
            chemistry: "lead-acid".into(),
            ..RunConfig::default()
        };
        assert!(matches!(c.validate(), Err(ConfigError::UnknownChemistry(_))));
    }
}
