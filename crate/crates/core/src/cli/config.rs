//! Run configuration: one TOML file, every section optional.
//!
//! ```toml
//! seed = 0
//! run_id = "demo"
//!
//! [corpus]
//! languages = ["en", "es", "ar", "he"]
//! min_tokens = 10000
//! max_tokens = 200000
//!
//! [model]
//! n_layers = 2
//! model_dim = 64
//!
//! [prune]
//! algorithm = "l0-improved"
//! setting = "non-shared"
//! target = 0.5
//! ```
//!
//! Unknown keys are rejected. Command-line flags override file values.

use crate::analysis::BenchConfig;
use crate::corpus::{CorpusConfig, MaskConfig, DEFAULT_LANGUAGES};
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::grad_prune::Setting;
use crate::trainer::{Algorithm, ProbeConfig, TrainSchedule};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Encoder shape; the vocabulary size comes from the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    pub n_layers: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        let t = ModelConfig::toy(1);
        ModelShape {
            n_layers: t.n_layers,
            n_heads: t.n_heads,
            model_dim: t.model_dim,
            ffn_dim: t.ffn_dim,
            max_seq_len: t.max_seq_len,
            dropout: t.dropout,
        }
    }
}

impl ModelShape {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            model_dim: self.model_dim,
            ffn_dim: self.ffn_dim,
            vocab_size,
            max_seq_len: self.max_seq_len,
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// `id,family,size,seed` CSV; when set, `languages` and the token
    /// budgets are ignored
    pub specs: Option<PathBuf>,
    pub languages: Vec<String>,
    /// per-language token budgets; sizes are drawn log-uniformly between them
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub generator: CorpusConfig,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            specs: None,
            languages: DEFAULT_LANGUAGES.iter().map(|s| s.to_string()).collect(),
            min_tokens: 10_000,
            max_tokens: 200_000,
            generator: CorpusConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub run_id: String,
    /// root for `runs/<run_id>/`; the environment variable and `--out` win
    pub out_dir: Option<PathBuf>,
    pub corpus: CorpusSection,
    pub model: ModelShape,
    pub mask: MaskConfig,
    pub pretrain: TrainSchedule,
    pub prune: TrainSchedule,
    pub ds: TrainSchedule,
    pub probe: ProbeConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            run_id: "default".into(),
            out_dir: None,
            corpus: CorpusSection::default(),
            model: ModelShape::default(),
            mask: MaskConfig::default(),
            pretrain: TrainSchedule { steps: 2000, learning_rate: 3e-3, ..TrainSchedule::default() },
            prune: TrainSchedule { steps: 1000, learning_rate: 1e-3, ..TrainSchedule::default() },
            ds: TrainSchedule {
                steps: 2000,
                learning_rate: 1e-3,
                algorithm: Algorithm::DsGrad,
                lambda1: 128.0,
                ..TrainSchedule::default()
            },
            probe: ProbeConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    /// Keys in `text` override [`RunConfig::default`] one leaf at a time, so a
    /// partial `[ds]` table keeps the DS defaults rather than a bare schedule's.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let mut merged = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, user);
        merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Checked once, before any work.
    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id.starts_with('.') {
            return Err(Error::Config(format!("run id {:?} is not a plain directory name", self.run_id)));
        }
        self.corpus.generator.validate()?;
        if self.corpus.specs.is_none() && self.corpus.languages.is_empty() {
            return Err(Error::Config("no languages configured".into()));
        }
        self.model.with_vocab(1).validate()?;
        self.mask.validate()?;
        self.pretrain.validate()?;
        self.prune.validate()?;
        self.ds.validate()?;
        if !matches!(self.prune.algorithm, Algorithm::Grad | Algorithm::L0Vanilla | Algorithm::L0Improved) {
            return Err(Error::Config("[prune] algorithm must be grad, l0 or l0-improved".into()));
        }
        if !matches!(self.ds.algorithm, Algorithm::DsGrad | Algorithm::DsL0) {
            return Err(Error::Config("[ds] algorithm must be ds-grad or ds-l0".into()));
        }
        if self.prune.algorithm == Algorithm::L0Improved && self.prune.setting != Setting::NonShared {
            return Err(Error::Config("l0-improved needs the non-shared setting".into()));
        }
        if self.probe.lr_grid.is_empty() || self.probe.per_language < 10 {
            return Err(Error::Config("[probe] needs a learning-rate grid and at least 10 examples per language".into()));
        }
        if self.bench.reps < 3 {
            return Err(Error::Config("[bench] reps must be at least 3".into()));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("seeed = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[model]\nlayers = 3"), Err(Error::Config(_))));
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let c = RunConfig::from_toml("seed = 7\n[prune]\nalgorithm = \"l0-improved\"\nsetting = \"non-shared\"\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.prune.algorithm, Algorithm::L0Improved);
        assert_eq!(c.model, ModelShape::default());
        c.validate().unwrap();
    }

    #[test]
    fn partial_section_keeps_section_defaults() {
        let c = RunConfig::from_toml("[ds]\nsteps = 8\n[pretrain]\nbatch_size = 4\n").unwrap();
        let d = RunConfig::default();
        assert_eq!(c.ds.steps, 8);
        assert_eq!(c.ds.algorithm, Algorithm::DsGrad);
        assert_eq!(c.ds.lambda1, d.ds.lambda1);
        assert_eq!(c.pretrain.learning_rate, d.pretrain.learning_rate);
        assert_eq!(c.pretrain.batch_size, 4);
        c.validate().unwrap();
    }

    #[test]
    fn improved_shared_is_rejected() {
        let c = RunConfig::from_toml("[prune]\nalgorithm = \"l0-improved\"\n").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn toml_round_trip(seed in any::<u32>(), steps in 0usize..10_000, target in 0.01f64..1.0, layers in 1usize..6) {
            let mut c = RunConfig { seed: seed as u64, ..Default::default() };
            c.prune.steps = steps;
            c.prune.target = target;
            c.model.n_layers = layers;
            let text = c.to_toml().unwrap();
            let back = RunConfig::from_toml(&text).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.to_toml().unwrap(), text);
        }
    }
}
