//! Reports over finished artifacts: sparsity profiles, Hamming distances
//! between subnetworks, parameter/size curves, correlations and CPU
//! throughput. Nothing here needs training state.

mod bench;
mod stats;

pub use bench::{batch_scaling, hardware_descriptor, throughput_bench, BenchConfig, ThroughputRecord};
pub use stats::{corr_accuracy_size, pearson, spearman, CorrPoint, CorrReport};

use crate::dyn_sparse::{init_ds, DsParams, SparsityGrid};
use crate::encoder::{
    count_params, encoder_sparsity, total_sparsity, ComponentKind, ComponentWeights, GateSet, ModelConfig,
};
use crate::error::{Error, Result};
use crate::grad_prune::{ImportanceTable, SHARED};
use crate::l0::HardConcrete;
use crate::rng::rng_for;
use rand::Rng;
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LayerRow {
    pub layer: usize,
    pub head_sparsity: f64,
    pub hidden_sparsity: f64,
}

fn dropped(g: &[f64]) -> f64 {
    g.iter().filter(|&&x| x == 0.0).count() as f64 / g.len() as f64
}

/// Fraction of heads and hidden units dropped in each layer.
pub fn layer_profile(gates: &GateSet) -> Result<Vec<LayerRow>> {
    gates.require_hard("layer profile")?;
    Ok((0..gates.dims().n_layers)
        .map(|l| LayerRow {
            layer: l,
            head_sparsity: dropped(gates.head_gates(l)),
            hidden_sparsity: dropped(gates.hidden_gates(l)),
        })
        .collect())
}

/// Per-kind sparsity of one gate set, against both overall sparsity axes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ComponentRow {
    /// heads and hidden units only
    pub encoder_sparsity: f64,
    /// embedding ranks included
    pub total_sparsity: f64,
    pub head: f64,
    pub hidden: f64,
    pub embed_rank: f64,
}

pub fn component_profile(gates: &GateSet, weights: &ComponentWeights) -> Result<ComponentRow> {
    gates.require_hard("component profile")?;
    let dims = gates.dims();
    let mut off = [0usize; 3];
    let mut all = [0usize; 3];
    for (id, &g) in dims.components().zip(gates.values()) {
        let k = match id.kind {
            ComponentKind::Head => 0,
            ComponentKind::HiddenUnit => 1,
            ComponentKind::EmbedRank => 2,
        };
        all[k] += 1;
        off[k] += usize::from(g == 0.0);
    }
    let frac = |k: usize| if all[k] == 0 { 0.0 } else { off[k] as f64 / all[k] as f64 };
    Ok(ComponentRow {
        encoder_sparsity: encoder_sparsity(gates, weights),
        total_sparsity: total_sparsity(gates, weights),
        head: frac(0),
        hidden: frac(1),
        embed_rank: frac(2),
    })
}

/// Normalized Hamming distance: fraction of gate bits that differ.
pub fn hamming(a: &GateSet, b: &GateSet) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Contract(format!("gate sets cover different components: {:?} vs {:?}", a.dims(), b.dims())));
    }
    a.require_hard("Hamming distance")?;
    b.require_hard("Hamming distance")?;
    let n = a.values().len();
    let diff = a.values().iter().zip(b.values()).filter(|(x, y)| x != y).count();
    Ok(diff as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HammingMatrix {
    pub languages: Vec<String>,
    /// row-major `l × l`
    pub values: Vec<f64>,
}

impl HammingMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.languages.len() + j]
    }

    /// Mean over unordered pairs `i < j`.
    pub fn mean_offdiag(&self) -> f64 {
        let n = self.languages.len();
        let pairs: Vec<f64> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| self.get(i, j)).collect();
        if pairs.is_empty() {
            0.0
        } else {
            pairs.iter().sum::<f64>() / pairs.len() as f64
        }
    }

    /// Mean distance over pairs the predicate selects, `None` if there are none.
    pub fn mean_where(&self, mut pick: impl FnMut(usize, usize) -> bool) -> Option<f64> {
        let n = self.languages.len();
        let (mut sum, mut k) = (0.0, 0usize);
        for i in 0..n {
            for j in i + 1..n {
                if pick(i, j) {
                    sum += self.get(i, j);
                    k += 1;
                }
            }
        }
        (k > 0).then(|| sum / k as f64)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["language".to_string()];
        header.extend(self.languages.iter().cloned());
        w.write_record(&header)?;
        let n = self.languages.len();
        for (i, lang) in self.languages.iter().enumerate() {
            let mut rec = vec![lang.clone()];
            rec.extend((0..n).map(|j| format!("{}", self.get(i, j))));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn hamming_matrix(profiles: &[(String, GateSet)]) -> Result<HammingMatrix> {
    let n = profiles.len();
    if let Some((_, first)) = profiles.first() {
        // a lone profile has no pairs but must still be hard
        first.require_hard("Hamming distance")?;
    }
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let h = hamming(&profiles[i].1, &profiles[j].1)?;
            values[i * n + j] = h;
            values[j * n + i] = h;
        }
    }
    Ok(HammingMatrix { languages: profiles.iter().map(|(l, _)| l.clone()).collect(), values })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SizeRow {
    pub sparsity: f64,
    pub encoder_sparsity: f64,
    pub embed_ranks: usize,
    pub embedding_params: usize,
    pub encoder_params: usize,
    pub total_params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SizeCurve {
    pub rows: Vec<SizeRow>,
    /// smallest sparsity at which embedding ranks start being dropped
    pub knee: Option<f64>,
}

/// Parameter count of the DS subnetwork at every grid sparsity.
pub fn size_curve(config: &ModelConfig, ds: &DsParams, language: Option<&str>) -> Result<SizeCurve> {
    let weights = ComponentWeights::for_dims(ds.dims);
    let full_rank = ds.dims.model_dim;
    let mut rows = Vec::with_capacity(ds.grid.levels().len());
    for &s in ds.grid.levels() {
        let gates = ds.subnetwork_at(1.0 - s, language)?;
        let p = count_params(config, &gates)?;
        rows.push(SizeRow {
            sparsity: s,
            encoder_sparsity: encoder_sparsity(&gates, &weights),
            embed_ranks: gates.embed_gates().iter().filter(|&&g| g == 1.0).count(),
            embedding_params: p.embedding,
            encoder_params: p.encoder,
            total_params: p.total,
        });
    }
    let knee = rows.iter().find(|r| r.embed_ranks < full_rank).map(|r| r.sparsity);
    Ok(SizeCurve { rows, knee })
}

/// Size curve of an untrained configuration under a seeded synthetic
/// ranking; no checkpoint needed.
pub fn size_curve_dry_run(config: &ModelConfig, grid: &SparsityGrid, seed: u64) -> Result<SizeCurve> {
    config.validate()?;
    let dims = config.gate_dims();
    let mut rng = rng_for(seed, "dry-run-ranking");
    let scores: Vec<f64> = (0..dims.n_gates()).map(|_| rng.gen::<f64>()).collect();
    let table = ImportanceTable::new(dims, scores, SHARED, 0)?;
    let ds = init_ds(&[table], &ComponentWeights::for_dims(dims), grid, &HardConcrete::default())?;
    size_curve(config, &ds, None)
}

/// `report_<figure>_<runid>.csv` inside `dir`.
pub fn report_path(dir: &Path, figure: &str, run_id: &str) -> PathBuf {
    dir.join(format!("report_{figure}_{run_id}.csv"))
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
