use crate::encoder::{encoder_sparsity, CompactEncoder, ComponentWeights, Encoder, GateSet, PAD_ID};
use crate::error::{Error, Result};
use crate::rng::rng_for;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::time::{Duration, Instant};

/// Shortest repetition we trust the wall clock for.
const MIN_REP: Duration = Duration::from_millis(2);

/// Compacted and gated logits must agree this closely before timing.
const COMPACTION_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub reps: usize,
    /// forward passes per repetition
    pub passes: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { reps: 5, passes: 200, batch_size: 1, seq_len: 16, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThroughputRecord {
    pub sparsity: f64,
    pub sentences_per_sec: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub reps: usize,
    pub hardware: String,
}

/// CPU model from `/proc/cpuinfo` where available, else the target triple bits.
pub fn hardware_descriptor() -> String {
    std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS))
}

fn inputs(enc: &Encoder, cfg: &BenchConfig) -> Vec<Vec<usize>> {
    let mut rng = rng_for(cfg.seed, "bench-inputs");
    let v = enc.config.vocab_size;
    (0..cfg.batch_size)
        .map(|_| (0..cfg.seq_len).map(|_| rng.gen_range(PAD_ID + 1..v.max(2))).collect())
        .collect()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn measure(enc: &Encoder, gates: &GateSet, cfg: &BenchConfig) -> Result<f64> {
    let model = CompactEncoder::from_gated(enc, gates)?;
    let seqs = inputs(enc, cfg);
    let diff = model.logits(&seqs)?.max_abs_diff(&enc.logits(Some(gates), &seqs)?);
    if diff > COMPACTION_TOL {
        return Err(Error::Contract(format!("compacted model deviates from the gated model by {diff:e}")));
    }
    let mut rates = Vec::with_capacity(cfg.reps);
    for _ in 0..cfg.reps {
        let start = Instant::now();
        for _ in 0..cfg.passes {
            std::hint::black_box(model.logits(std::hint::black_box(&seqs))?);
        }
        let el = start.elapsed();
        if el < MIN_REP {
            return Err(Error::Run(format!(
                "one repetition took {el:?}, too short to time reliably; raise passes per repetition"
            )));
        }
        rates.push((cfg.passes * cfg.batch_size) as f64 / el.as_secs_f64());
    }
    Ok(median(rates))
}

fn check(cfg: &BenchConfig) -> Result<()> {
    if cfg.reps < 3 {
        return Err(Error::Config(format!("throughput needs at least 3 repetitions, got {}", cfg.reps)));
    }
    if cfg.passes == 0 || cfg.batch_size == 0 || cfg.seq_len == 0 {
        return Err(Error::Config("passes, batch_size and seq_len must be positive".into()));
    }
    Ok(())
}

/// Median sentences/sec of the compacted model for each gate set, on the
/// calling thread.
pub fn throughput_bench(enc: &Encoder, levels: &[GateSet], cfg: &BenchConfig) -> Result<Vec<ThroughputRecord>> {
    check(cfg)?;
    let hw = hardware_descriptor();
    let weights = ComponentWeights::for_dims(enc.dims());
    levels
        .iter()
        .map(|g| {
            Ok(ThroughputRecord {
                sparsity: encoder_sparsity(g, &weights),
                sentences_per_sec: measure(enc, g, cfg)?,
                batch_size: cfg.batch_size,
                seq_len: cfg.seq_len,
                reps: cfg.reps,
                hardware: hw.clone(),
            })
        })
        .collect()
}

/// Throughput at the configured batch size and at twice that.
pub fn batch_scaling(enc: &Encoder, gates: &GateSet, cfg: &BenchConfig) -> Result<[ThroughputRecord; 2]> {
    let doubled = BenchConfig { batch_size: 2 * cfg.batch_size, ..cfg.clone() };
    let a = throughput_bench(enc, std::slice::from_ref(gates), cfg)?.remove(0);
    let b = throughput_bench(enc, std::slice::from_ref(gates), &doubled)?.remove(0);
    Ok([a, b])
}
