//! Gradient-based importance scoring and threshold selection.
//!
//! The importance of a gated unit is `E_X |∂L_MLM/∂g|` at `g = 1`, which
//! equals `|unit_outputᵀ · ∂L/∂unit_output|` for the unit the gate scales.

use crate::corpus::MlmBatch;
use crate::encoder::{masked_lm_loss, ComponentKind, ComponentWeights, Encoder, GateDims, GateSet, GateVars};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Language label used for tables and profiles covering all languages.
pub const SHARED: &str = "shared";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    Shared,
    NonShared,
}

impl Setting {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(Setting::Shared),
            "non-shared" => Ok(Setting::NonShared),
            other => Err(Error::Config(format!("unknown setting {other:?} (expected shared or non-shared)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Shared => "shared",
            Setting::NonShared => "non-shared",
        }
    }
}

/// Per-component importance scores in flat component order.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceTable {
    pub dims: GateDims,
    pub scores: Vec<f64>,
    pub language: String,
    pub n_batches: usize,
}

#[derive(Serialize, Deserialize)]
struct ScoreRow {
    kind: String,
    layer: String,
    index: usize,
    score: f64,
}

impl ImportanceTable {
    pub fn new(dims: GateDims, scores: Vec<f64>, language: &str, n_batches: usize) -> Result<Self> {
        if scores.len() != dims.n_gates() {
            return Err(Error::Contract(format!("{} scores for {} components", scores.len(), dims.n_gates())));
        }
        if let Some(s) = scores.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::Contract(format!("importance score {s} is not a finite nonnegative value")));
        }
        Ok(ImportanceTable { dims, scores, language: language.to_string(), n_batches })
    }

    /// Flat indices sorted by score descending, ties in component order.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        order
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        for (id, &score) in self.dims.components().zip(&self.scores) {
            w.serialize(ScoreRow {
                kind: id.kind.as_str().to_string(),
                layer: id.layer.map(|l| l.to_string()).unwrap_or_default(),
                index: id.index,
                score,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, dims: GateDims, language: &str) -> Result<Self> {
        let mut scores = vec![f64::NAN; dims.n_gates()];
        for row in csv::Reader::from_reader(r).deserialize() {
            let row: ScoreRow = row?;
            let id = crate::encoder::ComponentId::parse_fields(&row.kind, &row.layer, &row.index.to_string())?;
            let i = dims.flat_index(id)?;
            if !scores[i].is_nan() {
                return Err(Error::Parse(format!("component {id} scored twice")));
            }
            scores[i] = row.score;
        }
        if let Some(i) = scores.iter().position(|s| s.is_nan()) {
            return Err(Error::Parse(format!("component {} has no score", dims.component(i))));
        }
        ImportanceTable::new(dims, scores, language, 0)
    }
}

/// Mean over batches of `|∂L_MLM/∂g|` at all-ones gates.
pub fn importance_scores(enc: &Encoder, batches: &[MlmBatch], language: &str) -> Result<ImportanceTable> {
    if batches.is_empty() {
        return Err(Error::Input(format!("no scoring batches for {language}")));
    }
    let dims = enc.dims();
    let mut acc = vec![0.0; dims.n_gates()];
    for b in batches {
        let mut tape = Tape::new();
        let vars = enc.register(&mut tape, false);
        let flat = tape.param(Tensor::full(&[dims.n_gates()], 1.0));
        let gates = GateVars::from_flat(&mut tape, flat, dims)?;
        let loss = masked_lm_loss(&mut tape, &enc.config, &vars, Some(&gates), &b.inputs, &b.masked, &b.gold, None)?;
        let grads = tape.backward(loss)?;
        let g = grads.get(flat).expect("gate vector requires grad");
        for (a, v) in acc.iter_mut().zip(g.data()) {
            *a += v.abs();
        }
    }
    let n = batches.len() as f64;
    ImportanceTable::new(dims, acc.into_iter().map(|a| a / n).collect(), language, batches.len())
}

/// Which components count toward the size budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SizeScope {
    /// heads and hidden units only; embedding ranks ride along
    Encoder,
    /// every gated component
    All,
}

/// Walk `order`, keeping components until the counted weight first reaches
/// `budget`. Uncounted components met before that point are kept as well.
pub fn retain_by_budget(order: &[usize], weights: &[f64], counted: &[bool], budget: f64) -> Vec<bool> {
    let mut keep = vec![false; weights.len()];
    let tol = 1e-9 * budget.abs().max(1.0);
    let mut cum = 0.0;
    for &i in order {
        if cum >= budget - tol {
            break;
        }
        keep[i] = true;
        if counted[i] {
            cum += weights[i];
        }
    }
    keep
}

/// Hard gates retaining a weighted encoder size of about `t`.
pub fn select_threshold(table: &ImportanceTable, weights: &ComponentWeights, t: f64) -> Result<GateSet> {
    select_threshold_scoped(table, weights, t, SizeScope::Encoder)
}

pub fn select_threshold_scoped(
    table: &ImportanceTable,
    weights: &ComponentWeights,
    t: f64,
    scope: SizeScope,
) -> Result<GateSet> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Contract(format!("target size {t} must lie in (0,1]")));
    }
    let dims = table.dims;
    if t >= 1.0 {
        return Ok(GateSet::ones(dims));
    }
    let w = weights.flat(dims);
    let counted: Vec<bool> = dims
        .components()
        .map(|id| scope == SizeScope::All || id.kind != ComponentKind::EmbedRank)
        .collect();
    let total: f64 = w.iter().zip(&counted).filter(|(_, &c)| c).map(|(w, _)| w).sum();
    let keep = retain_by_budget(&table.ranking(), &w, &counted, t * total);
    GateSet::from_mask(dims, &keep)
}

/// Hard gate sets per language (a single `shared` entry for the shared setting).
#[derive(Clone, Debug, PartialEq)]
pub struct PruningProfile {
    pub setting: Setting,
    pub target: f64,
    pub gates: Vec<(String, GateSet)>,
}

#[derive(Serialize, Deserialize)]
struct ProfileManifest {
    setting: Setting,
    target: f64,
    dims: GateDims,
    languages: Vec<String>,
    files: Vec<String>,
}

impl PruningProfile {
    pub fn new(setting: Setting, target: f64, gates: Vec<(String, GateSet)>) -> Result<Self> {
        match (setting, gates.len()) {
            (_, 0) => return Err(Error::Contract("profile without gate sets".into())),
            (Setting::Shared, n) if n != 1 => {
                return Err(Error::Contract(format!("shared profile needs exactly one gate set, got {n}")))
            }
            _ => {}
        }
        for (lang, g) in &gates {
            g.require_hard(&format!("pruning profile entry {lang}"))?;
        }
        Ok(PruningProfile { setting, target, gates })
    }

    /// Gates for `language`; shared profiles answer for every language.
    pub fn for_language(&self, language: &str) -> Result<&GateSet> {
        match self.setting {
            Setting::Shared => Ok(&self.gates[0].1),
            Setting::NonShared => self
                .gates
                .iter()
                .find(|(l, _)| l == language)
                .map(|(_, g)| g)
                .ok_or_else(|| Error::Input(format!("profile has no gates for language {language}"))),
        }
    }

    /// One `gates_<lang>.txt` per entry plus `profile.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        for (lang, g) in &self.gates {
            let name = format!("gates_{lang}.txt");
            g.write_text(std::io::BufWriter::new(std::fs::File::create(dir.join(&name))?))?;
            files.push(name);
        }
        let manifest = ProfileManifest {
            setting: self.setting,
            target: self.target,
            dims: self.gates[0].1.dims(),
            languages: self.gates.iter().map(|(l, _)| l.clone()).collect(),
            files,
        };
        std::fs::write(dir.join("profile.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let m: ProfileManifest = serde_json::from_str(&std::fs::read_to_string(dir.join("profile.json"))?)?;
        let mut gates = Vec::with_capacity(m.files.len());
        for (lang, file) in m.languages.iter().zip(&m.files) {
            let f = std::io::BufReader::new(std::fs::File::open(dir.join(file))?);
            gates.push((lang.clone(), GateSet::read_text(f, m.dims)?));
        }
        PruningProfile::new(m.setting, m.target, gates)
    }
}

/// Score and threshold. `per_language[i]` holds scoring batches for
/// `languages[i]`; the shared setting scores on all of them together.
pub fn build_profile(
    enc: &Encoder,
    languages: &[String],
    per_language: &[Vec<MlmBatch>],
    setting: Setting,
    t: f64,
    weights: &ComponentWeights,
) -> Result<(PruningProfile, Vec<ImportanceTable>)> {
    if languages.len() != per_language.len() {
        return Err(Error::Contract("one batch list per language required".into()));
    }
    for (lang, b) in languages.iter().zip(per_language) {
        if b.is_empty() {
            return Err(Error::Input(format!("no scoring data for language {lang}")));
        }
    }
    match setting {
        Setting::Shared => {
            let all: Vec<MlmBatch> = per_language.iter().flatten().cloned().collect();
            let table = importance_scores(enc, &all, SHARED)?;
            let g = select_threshold(&table, weights, t)?;
            Ok((PruningProfile::new(setting, t, vec![(SHARED.to_string(), g)])?, vec![table]))
        }
        Setting::NonShared => {
            let mut gates = Vec::with_capacity(languages.len());
            let mut tables = Vec::with_capacity(languages.len());
            for (lang, b) in languages.iter().zip(per_language) {
                let table = importance_scores(enc, b, lang)?;
                gates.push((lang.clone(), select_threshold(&table, weights, t)?));
                tables.push(table);
            }
            Ok((PruningProfile::new(setting, t, gates)?, tables))
        }
    }
}
