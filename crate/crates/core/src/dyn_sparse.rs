//! Dynamic Sparsification: every gate is `g = f(α + tθ)` for network size
//! `t`, so one set of weights serves any sparsity on the grid.
//!
//! `(α, θ)` are initialized in closed form from an importance ranking: a
//! component that the ranking activates at size `t̂` and whose own share of
//! the network is `δ` gets `f(α + t̂θ) = 1` and `f(α + (t̂ − δ)θ) = 0`.

use crate::encoder::{ComponentId, ComponentWeights, GateDims, GateSet};
use crate::error::{Error, Result};
use crate::grad_prune::{ImportanceTable, SHARED};
use crate::l0::HardConcrete;
use crate::tensor::{Tape, Var};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

/// Logit-space margin added beyond `f⁻¹(1)` and `f⁻¹(0)` so rounding in
/// `α + tθ` cannot leave a boundary gate just short of saturation.
pub const SATURATION_MARGIN: f64 = 1e-6;

/// Sorted sparsity levels `0 = s_0 < … < s_n = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SparsityGrid(Vec<f64>);

impl TryFrom<Vec<f64>> for SparsityGrid {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        SparsityGrid::new(v)
    }
}

impl From<SparsityGrid> for Vec<f64> {
    fn from(g: SparsityGrid) -> Self {
        g.0
    }
}

impl Default for SparsityGrid {
    /// `{0, 0.1, …, 1}`.
    fn default() -> Self {
        SparsityGrid::uniform(10)
    }
}

impl SparsityGrid {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.len() < 2 || levels[0] != 0.0 || *levels.last().unwrap() != 1.0 {
            return Err(Error::Config(format!("sparsity grid {levels:?} must start at 0 and end at 1")));
        }
        if levels.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config(format!("sparsity grid {levels:?} must be strictly increasing")));
        }
        Ok(SparsityGrid(levels))
    }

    /// `n + 1` evenly spaced levels.
    pub fn uniform(n: usize) -> Self {
        SparsityGrid((0..=n).map(|i| i as f64 / n as f64).collect())
    }

    pub fn levels(&self) -> &[f64] {
        &self.0
    }

    /// Network sizes `1 − s_i`, ascending.
    pub fn sizes(&self) -> Vec<f64> {
        self.0.iter().rev().map(|s| 1.0 - s).collect()
    }
}

/// `f(α + tθ)` with the deterministic gate chain.
pub fn ds_gate(hc: &HardConcrete, alpha: f64, theta: f64, t: f64) -> f64 {
    hc.inference_gate(alpha + t * theta)
}

/// `f(α + tθ)` on the tape; `noise` switches to the stochastic training gate.
pub fn ds_gate_tape(
    tape: &mut Tape,
    hc: &HardConcrete,
    alpha: Var,
    theta: Var,
    t: f64,
    noise: Option<&[f64]>,
) -> Result<Var> {
    let tt = tape.scale(theta, t)?;
    let pre = tape.add(alpha, tt)?;
    hc.gate_tape(tape, pre, noise)
}

/// Closed-form `(α, θ)` for boundary size `t̂` and share `δ`.
pub fn solve_ds_params(t_hat: f64, delta: f64, hc: &HardConcrete) -> Result<(f64, f64)> {
    if !(delta > 0.0 && delta <= t_hat && t_hat <= 1.0) {
        return Err(Error::Contract(format!("need 0 < δ ≤ t̂ ≤ 1, got δ = {delta}, t̂ = {t_hat}")));
    }
    let f1 = hc.one_threshold() + SATURATION_MARGIN;
    let f0 = hc.zero_threshold() - SATURATION_MARGIN;
    let ratio = t_hat / delta;
    Ok(((1.0 - ratio) * f1 + ratio * f0, (f1 - f0) / delta))
}

/// Boundary size and share for every component, flat order.
#[derive(Clone, Debug, PartialEq)]
pub struct BucketAssignment {
    pub t_hat: Vec<f64>,
    pub delta: Vec<f64>,
}

/// Walk the ranking by cumulative normalized weight and snap each
/// component's activation size up to the next grid size. A share wider than
/// its bucket is narrowed to the bucket so grid points stay saturated.
pub fn bucketize(table: &ImportanceTable, weights: &ComponentWeights, grid: &SparsityGrid) -> Result<BucketAssignment> {
    let dims = table.dims;
    let w = weights.flat(dims);
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(Error::Contract("component weights sum to zero".into()));
    }
    let sizes = grid.sizes();
    let mut t_hat = vec![0.0; w.len()];
    let mut delta = vec![0.0; w.len()];
    let mut cum = 0.0;
    for i in table.ranking() {
        let share = w[i] / total;
        cum += share;
        // smallest grid size covering the cumulative size
        let k = sizes.iter().position(|&s| s >= cum - 1e-9).unwrap_or(sizes.len() - 1).max(1);
        t_hat[i] = sizes[k];
        delta[i] = share.min(sizes[k] - sizes[k - 1]);
    }
    Ok(BucketAssignment { t_hat, delta })
}

/// `(α, θ)` tables, one per language (a single `shared` table when shared).
#[derive(Clone, Debug, PartialEq)]
pub struct DsParams {
    pub dims: GateDims,
    pub hc: HardConcrete,
    pub grid: SparsityGrid,
    pub languages: Vec<String>,
    pub alpha: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
    pub t_hat: Vec<Vec<f64>>,
    pub delta: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct DsRow {
    language: String,
    kind: String,
    layer: String,
    index: usize,
    alpha: f64,
    theta: f64,
    t_hat: f64,
    delta: f64,
}

/// Initialize from rankings: one table per language (or one shared table).
pub fn init_ds(
    tables: &[ImportanceTable],
    weights: &ComponentWeights,
    grid: &SparsityGrid,
    hc: &HardConcrete,
) -> Result<DsParams> {
    let first = tables.first().ok_or_else(|| Error::Input("no ranking given".into()))?;
    let mut p = DsParams {
        dims: first.dims,
        hc: *hc,
        grid: grid.clone(),
        languages: Vec::new(),
        alpha: Vec::new(),
        theta: Vec::new(),
        t_hat: Vec::new(),
        delta: Vec::new(),
    };
    for table in tables {
        if table.dims != first.dims {
            return Err(Error::Contract("rankings cover different component sets".into()));
        }
        let b = bucketize(table, weights, grid)?;
        let mut alpha = Vec::with_capacity(b.t_hat.len());
        let mut theta = Vec::with_capacity(b.t_hat.len());
        for (&th, &d) in b.t_hat.iter().zip(&b.delta) {
            let (a, t) = solve_ds_params(th, d, hc)?;
            alpha.push(a);
            theta.push(t);
        }
        p.languages.push(table.language.clone());
        p.alpha.push(alpha);
        p.theta.push(theta);
        p.t_hat.push(b.t_hat);
        p.delta.push(b.delta);
    }
    Ok(p)
}

impl DsParams {
    pub fn is_shared(&self) -> bool {
        self.languages.len() == 1 && self.languages[0] == SHARED
    }

    /// Table index for a language; shared tables answer for every language.
    pub fn table_index(&self, language: Option<&str>) -> Result<usize> {
        if self.is_shared() {
            return Ok(0);
        }
        let lang = language.ok_or_else(|| Error::Input("per-language DS tables need a language".into()))?;
        self.languages
            .iter()
            .position(|l| l == lang)
            .ok_or_else(|| Error::Input(format!("no DS table for language {lang}")))
    }

    pub fn gate_values(&self, table: usize, t: f64) -> Vec<f64> {
        self.alpha[table]
            .iter()
            .zip(&self.theta[table])
            .map(|(&a, &th)| ds_gate(&self.hc, a, th, t))
            .collect()
    }

    /// Gates at network size `t`. Exactly 0/1 on grid sizes; off-grid sizes
    /// may give fractional values (binarize at 0.5 for a hard mask).
    pub fn subnetwork_at(&self, t: f64, language: Option<&str>) -> Result<GateSet> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Contract(format!("network size {t} outside [0,1]")));
        }
        let i = self.table_index(language)?;
        GateSet::from_values(self.dims, self.gate_values(i, t))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        for (li, lang) in self.languages.iter().enumerate() {
            for (k, id) in self.dims.components().enumerate() {
                w.serialize(DsRow {
                    language: lang.clone(),
                    kind: id.kind.as_str().to_string(),
                    layer: id.layer.map(|l| l.to_string()).unwrap_or_default(),
                    index: id.index,
                    alpha: self.alpha[li][k],
                    theta: self.theta[li][k],
                    t_hat: self.t_hat[li][k],
                    delta: self.delta[li][k],
                })?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, dims: GateDims, grid: SparsityGrid, hc: HardConcrete) -> Result<Self> {
        let n = dims.n_gates();
        let mut p = DsParams {
            dims,
            hc,
            grid,
            languages: Vec::new(),
            alpha: Vec::new(),
            theta: Vec::new(),
            t_hat: Vec::new(),
            delta: Vec::new(),
        };
        let mut seen: Vec<Vec<bool>> = Vec::new();
        for row in csv::Reader::from_reader(r).deserialize() {
            let row: DsRow = row?;
            let li = match p.languages.iter().position(|l| *l == row.language) {
                Some(i) => i,
                None => {
                    p.languages.push(row.language.clone());
                    for v in [&mut p.alpha, &mut p.theta, &mut p.t_hat, &mut p.delta] {
                        v.push(vec![0.0; n]);
                    }
                    seen.push(vec![false; n]);
                    p.languages.len() - 1
                }
            };
            let k = dims.flat_index(ComponentId::parse_fields(&row.kind, &row.layer, &row.index.to_string())?)?;
            if !(row.theta > 0.0) {
                return Err(Error::Parse(format!("θ for {} must be positive", dims.component(k))));
            }
            p.alpha[li][k] = row.alpha;
            p.theta[li][k] = row.theta;
            p.t_hat[li][k] = row.t_hat;
            p.delta[li][k] = row.delta;
            seen[li][k] = true;
        }
        for (l, s) in p.languages.iter().zip(&seen) {
            if let Some(k) = s.iter().position(|x| !x) {
                return Err(Error::Parse(format!("language {l} lacks DS parameters for {}", dims.component(k))));
            }
        }
        if p.languages.is_empty() {
            return Err(Error::Parse("empty DS parameter file".into()));
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_example() {
        let hc = HardConcrete::default();
        let (a, th) = solve_ds_params(0.5, 0.1, &hc).unwrap();
        assert!((a + 21.581).abs() < 1e-3, "{a}");
        assert!((th - 47.958).abs() < 1e-3, "{th}");
        assert_eq!(ds_gate(&hc, a, th, 0.5), 1.0);
        assert_eq!(ds_gate(&hc, a, th, 0.4), 0.0);
    }

    #[test]
    fn t_hat_equal_delta() {
        let hc = HardConcrete::default();
        let (a, th) = solve_ds_params(0.3, 0.3, &hc).unwrap();
        assert!((a - hc.zero_threshold()).abs() < 1e-5);
        assert_eq!(ds_gate(&hc, a, th, 0.3), 1.0);
        assert_eq!(ds_gate(&hc, a, th, 0.0), 0.0);
        assert!(solve_ds_params(0.2, 0.3, &hc).is_err());
        assert!(solve_ds_params(0.2, 0.0, &hc).is_err());
    }

    #[test]
    fn ten_equal_components_two_buckets() {
        let dims = GateDims { n_layers: 1, n_heads: 10, ffn_dim: 0, model_dim: 0 };
        let scores: Vec<f64> = (0..10).map(|i| 10.0 - i as f64).collect();
        let table = ImportanceTable::new(dims, scores, SHARED, 1).unwrap();
        let grid = SparsityGrid::new(vec![0.0, 0.5, 1.0]).unwrap();
        let b = bucketize(&table, &ComponentWeights::uniform(), &grid).unwrap();
        assert_eq!(b.t_hat, [vec![0.5; 5], vec![1.0; 5]].concat());
        assert!(b.delta.iter().all(|&d| (d - 0.1).abs() < 1e-15));
    }

    #[test]
    fn grid_validation() {
        assert!(SparsityGrid::new(vec![0.0, 0.5]).is_err());
        assert!(SparsityGrid::new(vec![0.0, 0.5, 0.5, 1.0]).is_err());
        assert_eq!(SparsityGrid::default().levels().len(), 11);
    }

    #[test]
    fn endpoints_and_csv_round_trip() {
        let dims = GateDims { n_layers: 2, n_heads: 2, ffn_dim: 4, model_dim: 3 };
        let scores: Vec<f64> = (0..dims.n_gates()).map(|i| ((i * 37) % 11) as f64).collect();
        let table = ImportanceTable::new(dims, scores, SHARED, 1).unwrap();
        let hc = HardConcrete::default();
        let grid = SparsityGrid::default();
        let p = init_ds(&[table], &ComponentWeights::for_dims(dims), &grid, &hc).unwrap();
        assert_eq!(p.subnetwork_at(1.0, None).unwrap(), GateSet::ones(dims));
        assert_eq!(p.subnetwork_at(0.0, None).unwrap(), GateSet::zeros(dims));
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("language,kind,layer,index,alpha,theta,t_hat,delta\n"));
        assert_eq!(DsParams::read_csv(buf.as_slice(), dims, grid, hc).unwrap(), p);
    }
}
