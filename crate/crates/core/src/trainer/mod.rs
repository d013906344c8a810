//! Training: dense MLM pre-training, pruning-aware continued training for
//! every algorithm, and probe fine-tuning.

mod optim;
mod probe;
mod runs;

pub use optim::{lr_at, Adam, AdamConfig};
pub use probe::{finetune_probe, probe_features, GateSource, ProbeConfig, ProbeFeatures, ProbeResult};
pub use runs::{
    pretrain_baseline, run_ds_training, run_grad_pruning, run_l0_pruning, scoring_batches, DsRun, GradRun, L0Run,
};

use crate::dyn_sparse::SparsityGrid;
use crate::error::{Error, Result};
use crate::grad_prune::Setting;
use crate::l0::HardConcrete;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Grad,
    L0Vanilla,
    L0Improved,
    DsGrad,
    DsL0,
}

impl Algorithm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "grad" => Ok(Algorithm::Grad),
            "l0" | "l0-vanilla" => Ok(Algorithm::L0Vanilla),
            "l0-improved" => Ok(Algorithm::L0Improved),
            "ds-grad" => Ok(Algorithm::DsGrad),
            "ds-l0" => Ok(Algorithm::DsL0),
            other => Err(Error::Config(format!("unknown algorithm {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Grad => "grad",
            Algorithm::L0Vanilla => "l0-vanilla",
            Algorithm::L0Improved => "l0-improved",
            Algorithm::DsGrad => "ds-grad",
            Algorithm::DsL0 => "ds-l0",
        }
    }

    pub fn is_ds(self) -> bool {
        matches!(self, Algorithm::DsGrad | Algorithm::DsL0)
    }
}

/// Everything a training run needs besides the model shape and data.
///
/// Defaults are desk-scale. The large-scale recipe this stands in for ran
/// 150K steps at batch 2048 with learning rate 2e-4.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_warmup_fraction: f64,
    pub adam: AdamConfig,
    /// fraction of steps that update only the gate parameters
    pub alpha_warmup_fraction: f64,
    pub alpha_learning_rate: f64,
    pub alpha_init_std: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// target network size (1 − sparsity)
    pub target: f64,
    pub setting: Setting,
    pub algorithm: Algorithm,
    pub hard_concrete: HardConcrete,
    pub grid: SparsityGrid,
    /// held-out MLM samples per language for importance scoring
    pub scoring_samples: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            steps: 2000,
            batch_size: 32,
            learning_rate: 2e-3,
            lr_warmup_fraction: 0.05,
            adam: AdamConfig::default(),
            alpha_warmup_fraction: 0.1,
            alpha_learning_rate: 0.05,
            alpha_init_std: 0.1,
            lambda1: 8.0,
            lambda2: 1.0,
            target: 0.5,
            setting: Setting::Shared,
            algorithm: Algorithm::Grad,
            hard_concrete: HardConcrete::default(),
            grid: SparsityGrid::default(),
            scoring_samples: 256,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.alpha_learning_rate > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.alpha_warmup_fraction) || !(0.0..1.0).contains(&self.lr_warmup_fraction) {
            return Err(Error::Config("warmup fractions must lie in [0,1)".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("λ1 and λ2 must be nonnegative".into()));
        }
        if !(self.target > 0.0 && self.target <= 1.0) {
            return Err(Error::Config(format!("target size {} must lie in (0,1]", self.target)));
        }
        if self.scoring_samples == 0 {
            return Err(Error::Config("scoring_samples must be positive".into()));
        }
        self.hard_concrete.validate()
    }

    /// Number of initial steps that update only gate parameters.
    pub fn alpha_warmup_steps(&self) -> usize {
        (self.alpha_warmup_fraction * self.steps as f64).round() as usize
    }
}

/// One line of the metrics stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub l0: f64,
    pub diag: f64,
    pub sparsity: f64,
}

/// Per-step loss parts; `total` is what was differentiated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossParts {
    pub mlm: f64,
    pub l0: f64,
    pub diag: f64,
    pub total: f64,
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Command, seeds, schedule and source revision, written next to every
/// artifact a command produces.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub git_hash: String,
    pub schedule: Option<TrainSchedule>,
    pub model: Option<crate::encoder::ModelConfig>,
    /// the fully resolved run configuration
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// `git rev-parse HEAD`, or `unknown` outside a repository.
pub fn git_hash() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
