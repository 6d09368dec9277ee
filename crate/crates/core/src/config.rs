//! Run configuration: every tunable of the pipeline in one JSON document.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoise::DenoiseParams;
use crate::error::{Error, Result};
use crate::features::FeatureParams;
use crate::filtering::FilterParams;
use crate::mfps::MfpsParams;
use crate::refine::TrainParams;
use crate::synth::SynthShape;

/// Missing keys take their defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub synth: SynthShape,
    pub mfps: MfpsParams,
    /// Neighbors for the plain PCA estimator.
    pub pca_k: usize,
    pub filter: FilterParams,
    pub features: FeatureParams,
    pub train: TrainParams,
    pub denoise: DenoiseParams,
    /// PGP thresholds in degrees.
    pub alphas: Vec<f64>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthShape::default(),
            mfps: MfpsParams::default(),
            pca_k: 100,
            filter: FilterParams::default(),
            features: FeatureParams::default(),
            train: TrainParams::default(),
            denoise: DenoiseParams::default(),
            alphas: vec![5.0, 10.0],
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Config = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.mfps.validate()?;
        self.filter.validate()?;
        self.features.validate()?;
        self.train.validate()?;
        self.denoise.validate()?;
        if self.pca_k < 3 {
            return Err(Error::InvalidParams("pca_k must be at least 3".into()));
        }
        if self.alphas.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::InvalidParams("alphas must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(Config::from_json("{}").unwrap(), Config::default());
    }

    #[test]
    fn round_trips_through_json() {
        let mut c = Config::default();
        c.seed = 42;
        c.train = TrainParams::desk();
        c.filter.range = vec![0.2, 0.5];
        assert_eq!(Config::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_ranges() {
        assert!(Config::from_json(r#"{"sed": 1}"#).is_err());
        assert!(Config::from_json(r#"{"mfps": {"beta": 0.9, "bogus": 1}}"#).is_err());
        assert!(Config::from_json(r#"{"alphas": [5, -1]}"#).is_err());
        assert!(Config::from_json(r#"{"pca_k": 2}"#).is_err());
        assert!(Config::from_json(r#"{"denoise": {"sigma": 0}}"#).is_err());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = Config::from_json(r#"{"train": {"epochs": 3}, "synth": {"kind": {"type": "sphere"}, "samples": 10, "noise_frac": 0.01, "seed": 1}}"#).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch, TrainParams::default().batch);
        assert_eq!(c.synth.samples, 10);
    }
}
