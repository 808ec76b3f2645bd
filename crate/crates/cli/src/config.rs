use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bsm_core::codebook::ModelParams;
use bsm_core::detector::DetectorParams;
use bsm_core::segmenter::SegmentParams;
use bsm_core::synth::SynthParams;
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub format_version: u32,
    /// Stored in trained models and reported by `eval`.
    pub class_name: String,
    pub model: ModelParams,
    pub detector: DetectorParams,
    pub segment: SegmentParams,
    pub folds: FoldParams,
    pub synth: SynthSection,
    pub paths: Paths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoldParams {
    pub n_folds: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub params: SynthParams,
    pub n_images: usize,
    pub seed: u64,
}

/// Fallbacks for command arguments left off the command line.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            format_version: CONFIG_VERSION,
            class_name: "object".into(),
            model: ModelParams::default(),
            detector: DetectorParams::default(),
            segment: SegmentParams::default(),
            folds: FoldParams::default(),
            synth: SynthSection::default(),
            paths: Paths::default(),
        }
    }
}

impl Default for FoldParams {
    fn default() -> Self {
        Self { n_folds: 3, seed: 0 }
    }
}

impl Default for SynthSection {
    fn default() -> Self {
        Self { params: SynthParams::default(), n_images: 30, seed: 7 }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_VERSION {
            bail!("unsupported config format_version {} (expected {CONFIG_VERSION})", self.format_version);
        }
        if self.class_name.trim().is_empty() {
            bail!("class_name must not be empty");
        }
        self.model.validate().context("model")?;
        self.detector.validate().context("detector")?;
        self.segment.crf.validate().context("segment.crf")?;
        self.synth.params.validate().context("synth.params")?;
        if self.folds.n_folds < 2 {
            bail!("folds.n_folds must be >= 2, got {}", self.folds.n_folds);
        }
        if self.synth.n_images == 0 {
            bail!("synth.n_images must be >= 1");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Config = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).with_context(|| format!("cannot write {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = Config::default();
        c.validate().unwrap();
        assert_eq!(Config::from_json(&c.to_json().unwrap()).unwrap(), c);
    }

    #[test]
    fn partial_files_take_defaults() {
        let c = Config::from_json(r#"{"model": {"t": 0.8}}"#).unwrap();
        assert_eq!(c.model.t, 0.8);
        assert_eq!(c.detector, DetectorParams::default());
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(Config::from_json(r#"{"model": {"beta": 1.5}}"#).is_err());
        assert!(Config::from_json(r#"{"folds": {"n_folds": 1}}"#).is_err());
        assert!(Config::from_json(r#"{"format_version": 2}"#).is_err());
        assert!(Config::from_json(r#"{"detector": {"nope": 1}}"#).is_err());
    }
}
