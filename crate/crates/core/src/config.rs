//! Run configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Regime;
use crate::synth::Split;
use crate::trainer::TrainConfig;

fn default_regime() -> Regime {
    Regime::WithA
}

fn default_split() -> String {
    Split::Test.name().to_string()
}

/// Evaluation run after training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    #[serde(default = "default_split")]
    pub split: String,
    #[serde(default = "default_regime")]
    pub regime: Regime,
    #[serde(default)]
    pub panels: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { split: default_split(), regime: default_regime(), panels: false }
    }
}

/// Top-level JSON document for `polarapp train`. Unknown keys are rejected
/// at every level. Relative paths resolve against the file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    pub train: TrainConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.dataset.is_relative() {
            cfg.dataset = base.join(&cfg.dataset);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.metrics.split.parse::<Split>()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(extra: &str) -> String {
        format!(
            r#"{{"dataset": "d", "output_dir": "o", "train": {{"task": "sfp", "seed": 1, "epochs": 1, "meta_iters": 1,
            "batch_size": 2, "lr_inner_d": 1e-3, "lr_inner_t": 1e-3, "lr_ft": 1e-3, "lr_d": 1e-3, "lr_t": 1e-3,
            "lambda_t": 1, "lambda_fa": 1{extra}}}}}"#
        )
    }

    #[test]
    fn accepts_minimal_document() {
        let c = RunConfig::parse(&doc("")).unwrap();
        assert_eq!(c.train.lambda_eit, 1.0);
        assert_eq!(c.metrics.regime, Regime::WithA);
    }

    #[test]
    fn rejects_unknown_key() {
        assert!(RunConfig::parse(&doc(r#", "lamda_fa": 2"#)).unwrap_err().is_config());
    }

    #[test]
    fn learning_rates_are_required() {
        let text = doc("").replace(r#""lr_t": 1e-3,"#, "");
        assert!(RunConfig::parse(&text).unwrap_err().is_config());
    }

    #[test]
    fn shipped_desk_config_matches_the_desk_preset() {
        let c = RunConfig::parse(include_str!("../../../configs/sfp_desk.json")).unwrap();
        assert_eq!(c.train, TrainConfig::desk_sfp(1));
        assert_eq!(c.metrics, MetricsConfig::default());
    }
}
