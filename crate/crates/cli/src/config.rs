//! Experiment file: one TOML document drives every stage.
//!
//! ```toml
//! seed = 7                      # dataset seed, required
//! output_dir = "runs/default"   # relative paths resolve under $CAPTUNE_OUT
//!
//! [dataset]    # synthetic corpus settings
//! [model]      # hidden, init_seed
//! [ce]         # CE pretraining
//! [rl]         # SCST; [rl.scst] for sampling
//! [joint]      # lambda for --stage joint
//! [finetune]   # method, grids, loss settings; [finetune.decode] for sweep scoring
//! [decode]     # decoding for the decode command
//! [analysis]   # histogram bins, samples per image
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use captune::corpus::SyntheticConfig;
use captune::decode::DecodeConfig;
use captune::finetune::FinetuneConfig;
use captune::metrics::DEFAULT_KS;
use captune::rl::{CeConfig, RlConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const OUT_ENV: &str = "CAPTUNE_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: 32,
            init_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointSection {
    pub lambda: f64,
}

impl Default for JointSection {
    fn default() -> Self {
        Self { lambda: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub bins: usize,
    pub samples_per_image: usize,
    pub seed: u64,
    pub ks: Vec<usize>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            bins: 200,
            samples_per_image: 5,
            seed: 5,
            ks: DEFAULT_KS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dataset: SyntheticConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub ce: CeConfig,
    #[serde(default)]
    pub rl: RlConfig,
    #[serde(default)]
    pub joint: JointSection,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(captune::Error::from)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.dataset.validate()?;
        self.decode.validate()?;
        self.finetune.validate()?;
        self.rl.scst.validate()?;
        if self.model.hidden == 0 {
            return Err(CliError::Usage("invalid model.hidden: must be at least 1".into()));
        }
        if self.analysis.bins == 0 {
            return Err(CliError::Usage("invalid analysis.bins: must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.joint.lambda) {
            return Err(CliError::Usage("invalid joint.lambda: must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical TOML serialization.
    pub fn hash(&self) -> String {
        let canon = toml::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canon.as_bytes()))
    }

    pub fn root(&self) -> PathBuf {
        match std::env::var_os(OUT_ENV) {
            Some(base) if self.output_dir.is_relative() => PathBuf::from(base).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_fills_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 3\noutput_dir = \"x\"\n").unwrap();
        assert_eq!(cfg.model.hidden, 32);
        assert_eq!(cfg.decode.beam_size, 5);
        assert_eq!(cfg.analysis.bins, 200);
        cfg.validate().unwrap();
    }

    #[test]
    fn shipped_config_spells_out_the_defaults() {
        let text = include_str!("../../../configs/default.toml");
        let cfg: RunConfig = toml::from_str(text).unwrap();
        let minimal: RunConfig = toml::from_str("seed = 7\noutput_dir = \"runs/default\"\n").unwrap();
        assert_eq!(cfg, minimal);
    }

    #[test]
    fn seed_is_required() {
        assert!(toml::from_str::<RunConfig>("output_dir = \"x\"\n").is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(toml::from_str::<RunConfig>("seed = 1\noutput_dir = \"x\"\n[model]\nhiden = 3\n").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a: RunConfig = toml::from_str("seed = 3\noutput_dir = \"x\"\n").unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.ce.epochs += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn round_trips_through_toml() {
        let a: RunConfig = toml::from_str("seed = 3\noutput_dir = \"x\"\n[finetune]\nmethod = \"wft\"\n").unwrap();
        let b: RunConfig = toml::from_str(&toml::to_string(&a).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}
