//! Run configuration files: a `[model]` table mirroring [`ModelConfig`] and
//! an optional `[train]` table. Unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{preset, ModelConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_preset(name: &str) -> Result<Self> {
        Ok(Self {
            model: preset(name)?,
            train: TrainConfig::default(),
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }
}

/// SHA-256 of the canonical text form of a model configuration.
pub fn config_digest(model: &ModelConfig) -> Result<[u8; 32]> {
    let text = toml::to_string(model).map_err(|e| Error::config(e.to_string()))?;
    Ok(Sha256::digest(text.as_bytes()).into())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::model::Preset;

    #[test]
    fn every_preset_round_trips() {
        for p in Preset::ALL {
            let cfg = RunConfig::from_preset(p.name()).unwrap();
            let text = cfg.to_toml().unwrap();
            let back = RunConfig::parse(&text).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.to_toml().unwrap(), text);
        }
    }

    #[test]
    fn unknown_keys_are_errors() {
        let text = RunConfig::from_preset("desk").unwrap().to_toml().unwrap();
        let typo = text.replacen("ffn_ratio", "ffn_raito", 1);
        assert!(matches!(RunConfig::parse(&typo), Err(Error::Config(_))));
        let extra = format!("{text}\n[extra]\nx = 1\n");
        assert!(RunConfig::parse(&extra).is_err());
    }

    #[test]
    fn invalid_values_are_errors() {
        let text = RunConfig::from_preset("desk").unwrap().to_toml().unwrap();
        assert!(RunConfig::parse(&text.replace("input_resolution = 32", "input_resolution = 30")).is_err());
    }

    #[test]
    fn digest_tracks_the_model_section() {
        let a = preset("desk").unwrap();
        let mut b = a.clone();
        assert_eq!(config_digest(&a).unwrap(), config_digest(&b).unwrap());
        b.ffn_ratio = 4.0;
        assert_ne!(config_digest(&a).unwrap(), config_digest(&b).unwrap());
    }

    proptest! {
        #[test]
        fn parse_emit_parse_is_a_fixed_point(
            ffn in 0.5f64..8.0,
            nll in 0.5f64..4.0,
            lr in 1e-5f64..1e-1,
            drop in 0.0f64..0.5,
            epochs in 1usize..100,
        ) {
            let mut cfg = RunConfig::from_preset("desk").unwrap();
            cfg.model.ffn_ratio = ffn;
            cfg.model.nll_ratio = nll;
            cfg.model.drop_path = drop;
            cfg.train.base_lr = lr;
            cfg.train.epochs = epochs;
            cfg.train.warmup_epochs = 0.0;
            let once = RunConfig::parse(&cfg.to_toml().unwrap()).unwrap();
            let twice = RunConfig::parse(&once.to_toml().unwrap()).unwrap();
            prop_assert_eq!(&once, &cfg);
            prop_assert_eq!(once, twice);
        }
    }
}
