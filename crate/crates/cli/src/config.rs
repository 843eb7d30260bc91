use std::path::Path;

use serde::{Deserialize, Serialize};
use tagbert::model::ModelConfig;
use tagbert::querydata::SynthConfig;
use tagbert::taggraph::MinSupport;
use tagbert::traineval::{TrainConfig, Variant};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Everything a pipeline run needs besides file paths. Every section is
/// optional in the JSON file; a section that is present replaces the
/// default (except `model` and `train`, whose missing keys keep defaults).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub split: [u32; 3],
    pub min_support: MinSupport,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            split: [6, 2, 2],
            min_support: MinSupport::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            variants: Variant::defaults(),
            seeds: vec![0, 1, 2],
            precision: Precision::F32,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::usage(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::usage(e.to_string()).at(format!("config {}", p.display())))?;
                Self::from_json(&text).map_err(|e| e.at(format!("config {}", p.display())))
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.split.iter().sum::<u32>() == 0 {
            return Err(CliError::usage("split ratio sums to zero"));
        }
        if self.variants.is_empty() || self.seeds.is_empty() {
            return Err(CliError::usage("need at least one variant and one seed"));
        }
        self.min_support.resolve(1)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = RunConfig::from_json(r#"{"model": {"d_model": 32, "n_heads": 2}, "seeds": [4]}"#).unwrap();
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.model.d_ff, ModelConfig::default().d_ff);
        assert_eq!(cfg.seeds, [4]);
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"modle": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"learning_rate": 0.1}}"#).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_json(r#"{"model": {"d_model": 30, "n_heads": 4}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"variants": ["static-avg"]}"#).is_err());
        assert!(RunConfig::from_json(r#"{"min_support": {"fraction": 2.0}}"#).is_err());
    }

    #[test]
    fn reference_config_parses() {
        let cfg = RunConfig::from_json(include_str!("../../../configs/reference.json")).unwrap();
        assert_eq!(cfg.variants, Variant::defaults());
        assert_eq!(cfg.seeds.len(), 3);
    }
}
