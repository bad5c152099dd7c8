use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::OptimConfig;
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::metrics::DEFAULT_THRESHOLD;
use crate::model::ModelConfig;

/// Everything a run needs, serialized as one flat JSON object. Model fields
/// keep their names (`seed` is the model/training seed), synthetic-data
/// fields too except `synth_seed`, and `size` is the synthetic canvas while
/// `image_size` is the model input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(flatten)]
    pub optim: OptimConfig,
    #[serde(flatten)]
    pub loss: LossConfig,
    #[serde(flatten)]
    pub synth: SynthConfig,
    /// Dataset directory; synthetic data is generated when absent.
    pub data_dir: Option<PathBuf>,
    /// Synthetic dataset size.
    pub n_samples: usize,
    pub split_fractions: [f64; 3],
    pub threshold: f64,
    /// Non-finite checks after every stage of every forward pass.
    pub checked: bool,
}

impl Default for RunConfig {
    /// Desk-scale run: 64×64 inputs, base width 16, 60 epochs. The step
    /// decay shape and every other optimizer setting follow the full-scale
    /// [`OptimConfig`] defaults; only `lr0` and `epochs` are rescaled for the
    /// few hundred steps a desk run takes.
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optim: OptimConfig {
                lr0: DESK_LR0,
                epochs: 60,
                ..OptimConfig::default()
            },
            loss: LossConfig::default(),
            synth: SynthConfig::default(),
            data_dir: None,
            n_samples: 20,
            split_fractions: [0.8, 0.1, 0.1],
            threshold: DEFAULT_THRESHOLD,
            checked: false,
        }
    }
}

pub const DESK_LR0: f64 = 0.01;

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.loss.validate()?;
        if self.data_dir.is_none() {
            self.synth.validate()?;
            if self.n_samples == 0 {
                return Err(Error::Config("n_samples must be positive".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }

    /// Parses flat JSON; keys that are not config fields are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        // merge onto the serialized defaults: flattened sections would
        // otherwise fall back to their own defaults rather than the run's
        let mut merged = serde_json::to_value(Self::default())?;
        let known = merged.as_object_mut().expect("struct serializes to an object");
        let unknown: Vec<&str> = obj
            .keys()
            .filter(|k| !known.contains_key(*k))
            .map(|k| k.as_str())
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        known.extend(obj.clone());
        Ok(serde_json::from_value(merged)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_round_trip() {
        let cfg = RunConfig::default();
        let json = cfg.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(v.get("lr0").is_some() && v.get("synth_seed").is_some() && v.get("alpha").is_some());
        assert_eq!(RunConfig::from_json(&json).unwrap(), cfg);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"epochs": 3, "msc_mode": "dense", "synth_seed": 5}"#).unwrap();
        assert_eq!(cfg.optim.epochs, 3);
        assert_eq!(cfg.synth.seed, 5);
        assert_eq!(cfg.model.seed, 0);
        assert_eq!(cfg.loss, LossConfig::default());
        assert_eq!(cfg.optim.lr0, DESK_LR0);
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = RunConfig::from_json(r#"{"epocs": 3}"#).unwrap_err().to_string();
        assert!(e.contains("epocs"), "{e}");
        assert!(RunConfig::from_json("[1]").is_err());
    }

    #[test]
    fn equal_loss_weights_are_default() {
        let l = RunConfig::default().loss;
        assert_eq!((l.alpha, l.beta, l.epsilon), (0.5, 0.5, 1e-6));
    }
}
