//! Layered run configuration: command-line flags over a TOML file over defaults.

use std::fs;
use std::path::{Path, PathBuf};

use schanger_core::evaluation::{DEFAULT_THRESHOLD, DEFAULT_TILE};
use schanger_core::networks::Variant;
use schanger_core::training::{AugmentationConfig, LossConfig, TrainConfig, TrainSetup};
use schanger_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const DEFAULT_OUT: &str = "runs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub tile: usize,
    pub threshold: f32,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tile: DEFAULT_TILE,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    /// Training pairs.
    pub n: usize,
    /// Held-out pairs.
    pub holdout: usize,
    pub size: usize,
    pub density: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            n: 200,
            holdout: 50,
            size: 64,
            density: 0.1,
        }
    }
}

/// The file layer. Every field is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub variant: Option<Variant>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub augment: AugmentationConfig,
    pub eval: EvalOptions,
    pub synth: SynthOptions,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Fully resolved settings, echoed into the output directory.
#[derive(Debug, Clone, Serialize)]
pub struct Resolved {
    #[serde(skip)]
    pub command: String,
    pub seed: u64,
    pub variant: Variant,
    pub out: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip)]
    pub variant_flag: Option<Variant>,
    #[serde(flatten)]
    pub setup: TrainSetup,
    pub eval: EvalOptions,
    pub synth: SynthOptions,
}

impl Resolved {
    pub fn new(command: &str, file: FileConfig, seed: Option<u64>, variant: Option<Variant>, out: Option<PathBuf>) -> Self {
        let variant_flag = variant.or(file.variant);
        let seed = seed.or(file.seed).unwrap_or(0);
        let mut setup = TrainSetup {
            train: file.train,
            loss: file.loss,
            augment: file.augment,
        };
        setup.train.seed = seed;
        Resolved {
            command: command.to_string(),
            seed,
            variant: variant_flag.unwrap_or(Variant::Small),
            out: out.or(file.out).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
            data: file.data,
            variant_flag,
            setup,
            eval: file.eval,
            synth: file.synth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.setup.train.validate()?;
        self.setup.loss.validate()?;
        self.setup.augment.validate()?;
        if self.eval.tile == 0 || self.eval.tile % 16 != 0 {
            return Err(Error::Config(format!("tile {} must be a positive multiple of 16", self.eval.tile)));
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.eval.threshold)));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        let body = toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))?;
        Ok(format!("# resolved settings for `schanger {}`\n{body}", self.command))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beats_default() {
        let file: FileConfig = toml::from_str("seed = 7\nvariant = \"base\"\n[train]\nbase_lr = 0.001\n").unwrap();
        let r = Resolved::new("train", file.clone(), None, None, None);
        assert_eq!((r.seed, r.variant, r.setup.train.base_lr), (7, Variant::Base, 0.001));
        assert_eq!(r.setup.train.total_epochs, 30);
        assert_eq!(r.out, PathBuf::from(DEFAULT_OUT));
        let r = Resolved::new("train", file, Some(3), Some(Variant::Small), Some("x".into()));
        assert_eq!((r.seed, r.variant, r.setup.train.seed), (3, Variant::Small, 3));
        assert_eq!(r.out, PathBuf::from("x"));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<FileConfig>("sed = 1").is_err());
        assert!(toml::from_str::<FileConfig>("[train]\nlr = 1").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let r = Resolved::new("eval", FileConfig::default(), Some(1), None, None);
        let text = r.to_toml().unwrap();
        let back: FileConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.seed, Some(1));
        assert_eq!(back.train, r.setup.train);
    }
}
