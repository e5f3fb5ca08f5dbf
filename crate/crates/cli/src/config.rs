use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use trimetric::{ArchitectureConfig, AugmentConfig, SynthSpec, TrainConfig};

/// Architecture given either as a preset name or as a full layer description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchSpec {
    Preset(String),
    Custom(ArchitectureConfig),
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec::Preset("desk".into())
    }
}

impl ArchSpec {
    pub fn resolve(&self) -> Result<ArchitectureConfig> {
        let arch = match self {
            ArchSpec::Preset(name) => match name.as_str() {
                "desk" => ArchitectureConfig::desk(),
                "full" => ArchitectureConfig::full(),
                "full_crop" => ArchitectureConfig::full_crop(),
                other => bail!(trimetric::Error::Config(format!(
                    "unknown architecture preset {other:?} (expected desk, full or full_crop)"
                ))),
            },
            ArchSpec::Custom(a) => a.clone(),
        };
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub trials: usize,
    pub max_rank: usize,
    /// Fraction of persons used for training; the rest are held out for evaluation.
    pub train_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            trials: trimetric::eval::DEFAULT_TRIALS,
            max_rank: trimetric::eval::DEFAULT_MAX_RANK,
            train_fraction: 0.6,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Root of a `<person>/<image>` tree.
    pub path: Option<PathBuf>,
    /// Generate the dataset instead of loading it.
    pub synthetic: Option<SynthSpec>,
    /// Size images are resized to on load; defaults to the network input size.
    pub image_height: Option<usize>,
    pub image_width: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub arch: ArchSpec,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
    pub out: PathBuf,
    /// Iterations between checkpoints during training.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: ArchSpec::default(),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            eval: EvalConfig::default(),
            data: DataConfig::default(),
            out: PathBuf::from("out"),
            checkpoint_every: 100,
        }
    }
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    trimetric::Error::Config(msg.into()).into()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| config_error(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.resolve()?;
        self.train.validate()?;
        if self.eval.trials == 0 {
            return Err(config_error("eval.trials must be at least 1"));
        }
        if self.eval.max_rank < 30 {
            return Err(config_error("eval.max_rank must be at least 30 to fill the summary"));
        }
        if !(self.eval.train_fraction > 0.0 && self.eval.train_fraction < 1.0) {
            return Err(config_error("eval.train_fraction must lie strictly between 0 and 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(config_error("checkpoint_every must be at least 1"));
        }
        match (&self.data.path, &self.data.synthetic) {
            (Some(_), Some(_)) => Err(config_error("data.path and data.synthetic are mutually exclusive")),
            (None, None) => Err(config_error("no dataset: set data.path or data.synthetic")),
            (None, Some(spec)) => Ok(spec.validate()?),
            (Some(_), None) => Ok(()),
        }
        .context("invalid configuration")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve_by_name() {
        let spec: ArchSpec = serde_json::from_str(r#""full""#).unwrap();
        assert_eq!(spec.resolve().unwrap(), ArchitectureConfig::full());
        let spec: ArchSpec = serde_json::from_str(r#""tiny""#).unwrap();
        assert!(spec.resolve().is_err());
    }

    #[test]
    fn custom_architecture_round_trips() {
        let text = serde_json::to_string(&ArchSpec::Custom(ArchitectureConfig::desk())).unwrap();
        let back: ArchSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back.resolve().unwrap(), ArchitectureConfig::desk());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"train": {"max_iterations": 7}, "data": {"synthetic": {}}}"#).unwrap();
        assert_eq!(cfg.train.max_iterations, 7);
        assert_eq!(cfg.train.classes_per_iteration, 40);
        assert_eq!(cfg.eval.trials, 10);
        cfg.validate().unwrap();
    }

    #[test]
    fn data_source_must_be_unique() {
        let mut cfg = RunConfig::default();
        assert!(cfg.validate().is_err());
        cfg.data.path = Some("x".into());
        cfg.data.synthetic = Some(SynthSpec::default());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn small_max_rank_is_rejected() {
        let mut cfg = RunConfig::default();
        cfg.data.synthetic = Some(SynthSpec::default());
        cfg.eval.max_rank = 10;
        assert!(cfg.validate().is_err());
    }
}
