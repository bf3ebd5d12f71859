//! Run configuration: defaults, overlaid by a JSON config file, overlaid by
//! command-line flags. The resolved config is written next to every output.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use solobot_core::decoder::DecodeParams;
use solobot_core::model::{ModelConfig, TrainConfig};
use solobot_core::synth::SynthConfig;
use solobot_core::teaching::TeachConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub command: String,
    pub corpus: Vec<PathBuf>,
    /// Validation corpora; when empty a slice of the training corpus is held out.
    pub valid_corpus: Vec<PathBuf>,
    /// Held-out corpus the teaching service evaluates on.
    pub heldout: Option<PathBuf>,
    pub db: Vec<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub dump_text: Option<PathBuf>,
    pub transcript: Option<PathBuf>,
    pub seed: u64,
    /// Serialized sequence budget in tokens.
    pub max_len: usize,
    pub vocab_size: usize,
    pub valid_frac: f64,
    pub host: String,
    pub port: u16,
    pub ui_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeParams,
    pub synth: SynthConfig,
    pub teach: TeachConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            corpus: Vec::new(),
            valid_corpus: Vec::new(),
            heldout: None,
            db: Vec::new(),
            vocab: None,
            checkpoint: None,
            out: None,
            report: None,
            dump_text: None,
            transcript: None,
            seed: 0,
            max_len: 512,
            vocab_size: 1000,
            valid_frac: 0.1,
            host: "127.0.0.1".into(),
            port: 8080,
            ui_dir: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeParams::default(),
            synth: SynthConfig::default(),
            teach: TeachConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Invalid(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Invalid(format!("bad config {}: {e}", path.display())))
    }

    /// One seed for every stochastic component.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.decode.seed = seed;
        self.synth.seed = seed;
        self.teach.seed = seed;
        self.teach.decode.seed = seed;
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Write the resolved config as `<anchor>.config.json`.
    pub fn dump_next_to(&self, anchor: &Path) -> Result<PathBuf, CliError> {
        let mut name = anchor.as_os_str().to_owned();
        name.push(".config.json");
        let path = PathBuf::from(name);
        fs::write(&path, self.to_json())
            .map_err(|e| CliError::Runtime(anyhow::anyhow!("writing {}: {e}", path.display())))?;
        Ok(path)
    }
}
