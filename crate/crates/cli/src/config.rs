use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sista_core::corpus::CorpusSpec;
use sista_core::instance::InstanceLossConfig;
use sista_core::sta::StaConfig;
use sista_core::train::TrainConfig;
use sista_core::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Instance whose alignment map `export-heatmap` writes.
    pub heatmap_instance: usize,
    pub gradcheck_seeds: usize,
    pub gradcheck_batches: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            heatmap_instance: 0,
            gradcheck_seeds: 20,
            gradcheck_batches: 2,
        }
    }
}

/// Every setting of a run after defaults, file and flags are merged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub corpus: CorpusSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: InstanceLossConfig,
    #[serde(default)]
    pub sta: StaConfig,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub eval: EvalSection,
}


pub const DEFAULT_OUT_DIR: &str = "sista-out";

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn apply_paper_preset(&mut self) {
        let t = self.train_config().with_paper_preset();
        self.loss = t.loss;
        self.sta = t.sta;
        self.train = TrainConfig {
            seed: TrainConfig::default().seed,
            loss: InstanceLossConfig::default(),
            sta: StaConfig::default(),
            ..t
        };
    }

    /// Trainer settings with the shared sections and seed folded in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            loss: self.loss,
            sta: self.sta,
            ..self.train
        }
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            seed: self.seed,
            ..self.corpus
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus_spec().validate()?;
        self.train_config().validate()
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths
            .out_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.paths
            .corpus
            .clone()
            .unwrap_or_else(|| self.out_dir().join("corpus.txt"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir().join("checkpoint.json"))
    }

    /// TOML dump, optionally preceded by a generation-time comment.
    pub fn to_toml(&self, timestamp: Option<u64>) -> Result<String> {
        let body = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        Ok(match timestamp {
            Some(t) => format!("# resolved at unix time {t}\n{body}"),
            None => body,
        })
    }
}
