//! Hard-concrete gates and the L0-style regularizers built on them.

use crate::encoder::{ComponentId, GateDims, GateSet};
use crate::error::{Error, Result};
use crate::languages::{same_family, FamilyTable, LanguageSpec};
use crate::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

/// Uniform draws are kept this far from 0 and 1 so the logit stays finite.
const U_EPS: f64 = 1e-6;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Stretch interval `(l, r)` and temperature `β` of the hard-concrete gate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardConcrete {
    pub l: f64,
    pub r: f64,
    pub beta: f64,
}

impl Default for HardConcrete {
    fn default() -> Self {
        HardConcrete { l: -0.1, r: 1.1, beta: 2.0 / 3.0 }
    }
}

impl HardConcrete {
    pub fn validate(&self) -> Result<()> {
        if !(self.l < 0.0 && self.r > 1.0 && self.beta > 0.0) {
            return Err(Error::Config(format!("hard-concrete constants need l < 0 < 1 < r and β > 0, got {self:?}")));
        }
        Ok(())
    }

    fn stretch(&self, s: f64) -> f64 {
        (s * (self.r - self.l) + self.l).clamp(0.0, 1.0)
    }

    /// `α` at or below which the deterministic gate is exactly 0.
    pub fn zero_threshold(&self) -> f64 {
        logit(-self.l / (self.r - self.l))
    }

    /// `α` at or above which the deterministic gate is exactly 1.
    pub fn one_threshold(&self) -> f64 {
        logit((1.0 - self.l) / (self.r - self.l))
    }

    /// `ln(−l/r)`, the shift inside the expected-L0 term.
    pub fn log_ratio(&self) -> f64 {
        (-self.l / self.r).ln()
    }

    /// Noisy gate for a uniform draw `u ∈ (0,1)`.
    pub fn sample_gate(&self, alpha: f64, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::Contract(format!("uniform draw {u} must lie in (0,1)")));
        }
        Ok(self.stretch(sigmoid((logit(u) + alpha) / self.beta)))
    }

    /// Deterministic gate used at inference (`s = sigmoid(α)`).
    pub fn inference_gate(&self, alpha: f64) -> f64 {
        self.stretch(sigmoid(alpha))
    }

    /// Probability that the gate is nonzero, `sigmoid(α − ln(−l/r))`.
    pub fn l0_prob(&self, alpha: f64) -> f64 {
        sigmoid(alpha - self.log_ratio())
    }

    /// Gate chain on the tape. With `noise`, `((logit u + pre)/β)`; without,
    /// the deterministic `sigmoid(pre)`.
    pub fn gate_tape(&self, tape: &mut Tape, pre: Var, noise: Option<&[f64]>) -> Result<Var> {
        let x = match noise {
            Some(u) => {
                if u.len() != tape.value(pre).numel() {
                    return Err(Error::Contract(format!("{} noise draws for {} gates", u.len(), tape.value(pre).numel())));
                }
                let lu = tape.constant(Tensor::new(tape.shape(pre).to_vec(), u.iter().map(|&u| logit(u)).collect())?);
                let x = tape.add(pre, lu)?;
                tape.scale(x, 1.0 / self.beta)?
            }
            None => pre,
        };
        let s = tape.sigmoid(x)?;
        let s = tape.scale(s, self.r - self.l)?;
        let s = tape.add_scalar(s, self.l)?;
        tape.clamp(s, 0.0, 1.0)
    }

    /// `sigmoid(α − ln(−l/r))` elementwise on the tape.
    pub fn l0_prob_tape(&self, tape: &mut Tape, alpha: Var) -> Result<Var> {
        let x = tape.add_scalar(alpha, -self.log_ratio())?;
        tape.sigmoid(x)
    }
}

/// Uniform noise for one `(step, language)`: gate `i` reads the first word
/// of ChaCha stream `i`, so the draw does not depend on evaluation order.
pub fn uniform_noise(seed: u64, step: u64, lang: u64, n: usize) -> Vec<f64> {
    let key = crate::rng::derive_index(crate::rng::derive_index(seed, step), lang);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    (0..n)
        .map(|i| {
            rng.set_stream(i as u64);
            rng.set_word_pos(0);
            rng.gen::<f64>().clamp(U_EPS, 1.0 - U_EPS)
        })
        .collect()
}

/// Weighted expected L0 norm, `Σ w·sigmoid(α − ln(−l/r))`.
pub fn l0_penalty(hc: &HardConcrete, alphas: &[f64], weights: &[f64]) -> f64 {
    alphas.iter().zip(weights).map(|(&a, &w)| w * hc.l0_prob(a)).sum()
}

pub fn l0_penalty_tape(tape: &mut Tape, hc: &HardConcrete, alpha: Var, weights: &[f64]) -> Result<Var> {
    let p = hc.l0_prob_tape(tape, alpha)?;
    let w = tape.constant(Tensor::vector(weights.to_vec()));
    let wp = tape.mul(p, w)?;
    tape.sum(wp)
}

/// Weighted expected retained fraction over the components with `counted`.
pub fn expected_size(hc: &HardConcrete, alphas: &[f64], weights: &[f64], counted: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for ((&a, &w), &c) in alphas.iter().zip(weights).zip(counted) {
        if c {
            num += w * hc.l0_prob(a);
            den += w;
        }
    }
    num / den
}

/// Tape version of [`expected_size`]; `weights` are zero where not counted.
pub fn expected_size_tape(tape: &mut Tape, hc: &HardConcrete, alpha: Var, counted_weights: &[f64]) -> Result<Var> {
    let total: f64 = counted_weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Contract("expected size needs positive counted weight".into()));
    }
    let s = l0_penalty_tape(tape, hc, alpha, counted_weights)?;
    tape.scale(s, 1.0 / total)
}

/// `Σ_i |size_i − t|`.
pub fn sparsity_constraint_loss(sizes: &[f64], t: f64) -> f64 {
    sizes.iter().map(|s| (s - t).abs()).sum()
}

pub fn sparsity_constraint_tape(tape: &mut Tape, sizes: &[Var], t: f64) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &s in sizes {
        let d = tape.add_scalar(s, -t)?;
        let a = tape.abs(d)?;
        total = Some(match total {
            None => a,
            Some(acc) => tape.add(acc, a)?,
        });
    }
    total.ok_or_else(|| Error::Contract("sparsity constraint over zero languages".into()))
}

/// 0/1 prior: `P_ij = 0` when languages `i` and `j` share a family (or `i = j`).
#[derive(Clone, Debug, PartialEq)]
pub struct PriorMatrix {
    pub languages: Vec<String>,
    pub families: Vec<String>,
    values: Vec<f64>,
}

impl PriorMatrix {
    pub fn from_families(languages: &[String], families: &[String]) -> Result<Self> {
        if languages.len() != families.len() {
            return Err(Error::Contract("one family label per language required".into()));
        }
        let n = languages.len();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if !same_family(&languages[i], &families[i], &languages[j], &families[j]) {
                    values[i * n + j] = 1.0;
                }
            }
        }
        Ok(PriorMatrix { languages: languages.to_vec(), families: families.to_vec(), values })
    }

    pub fn from_specs(specs: &[LanguageSpec]) -> Result<Self> {
        let ids: Vec<String> = specs.iter().map(|s| s.id.clone()).collect();
        let fams: Vec<String> = specs.iter().map(|s| s.family.clone()).collect();
        PriorMatrix::from_families(&ids, &fams)
    }

    pub fn len(&self) -> usize {
        self.languages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.languages.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.len() + j]
    }

    /// `P ⊙ (1 − I)` as an `l×l` tensor (the diagonal of `P` is already 0).
    pub fn mask(&self) -> Tensor {
        let n = self.len();
        Tensor::new(vec![n, n], self.values.clone()).expect("square")
    }
}

/// Look languages up in a family table.
pub fn build_prior(languages: &[String], table: &FamilyTable) -> Result<PriorMatrix> {
    let fams = languages
        .iter()
        .map(|l| table.family(l).map(str::to_string))
        .collect::<Result<Vec<_>>>()?;
    PriorMatrix::from_families(languages, &fams)
}

/// `‖P ⊙ ḠḠᵀ ⊙ (1 − I)‖₁` for an `l×n` gate matrix.
pub fn diversity_loss(gates: &Tensor, prior: &PriorMatrix) -> Result<f64> {
    if gates.rank() != 2 || gates.rows() != prior.len() {
        return Err(Error::Contract(format!(
            "gate matrix {:?} does not match a prior over {} languages",
            gates.shape(),
            prior.len()
        )));
    }
    let (l, n) = (gates.rows(), gates.cols());
    let mut total = 0.0;
    for i in 0..l {
        for j in 0..l {
            if i != j && prior.get(i, j) != 0.0 {
                let dot: f64 = (0..n).map(|k| gates.at(i, k) * gates.at(j, k)).sum();
                total += (prior.get(i, j) * dot).abs();
            }
        }
    }
    Ok(total)
}

pub fn diversity_loss_tape(tape: &mut Tape, gates: Var, prior: &PriorMatrix) -> Result<Var> {
    let shape = tape.shape(gates).to_vec();
    if shape.len() != 2 || shape[0] != prior.len() {
        return Err(Error::Contract(format!(
            "gate matrix {:?} does not match a prior over {} languages",
            shape,
            prior.len()
        )));
    }
    let gram = tape.matmul_nt(gates, gates)?;
    let m = tape.constant(prior.mask());
    let masked = tape.mul(gram, m)?;
    let a = tape.abs(masked)?;
    tape.sum(a)
}

/// `L_MLM + λ1·L_L0 + λ2·L_diag`.
pub fn total_loss(mlm: f64, l0_term: f64, div_term: f64, lambda1: f64, lambda2: f64) -> f64 {
    mlm + lambda1 * l0_term + lambda2 * div_term
}

/// Learned `α` per language, flat component order.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaTable {
    pub dims: GateDims,
    pub languages: Vec<String>,
    pub alphas: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct AlphaRow {
    language: String,
    kind: String,
    layer: String,
    index: usize,
    alpha: f64,
}

impl AlphaTable {
    /// Independent `N(0, std²)` draws for every language and gate.
    pub fn init(dims: GateDims, languages: &[String], std: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("alpha init: {e}")))?;
        let alphas = languages.iter().map(|_| (0..dims.n_gates()).map(|_| normal.sample(rng)).collect()).collect();
        Ok(AlphaTable { dims, languages: languages.to_vec(), alphas })
    }

    /// Hard gates: a component survives when its deterministic gate is nonzero.
    pub fn finalize(&self, hc: &HardConcrete) -> Result<Vec<(String, GateSet)>> {
        let thr = hc.zero_threshold();
        self.languages
            .iter()
            .zip(&self.alphas)
            .map(|(l, a)| {
                let mask: Vec<bool> = a.iter().map(|&x| x > thr).collect();
                Ok((l.clone(), GateSet::from_mask(self.dims, &mask)?))
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        for (lang, alphas) in self.languages.iter().zip(&self.alphas) {
            for (id, &alpha) in self.dims.components().zip(alphas) {
                w.serialize(AlphaRow {
                    language: lang.clone(),
                    kind: id.kind.as_str().to_string(),
                    layer: id.layer.map(|l| l.to_string()).unwrap_or_default(),
                    index: id.index,
                    alpha,
                })?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, dims: GateDims) -> Result<Self> {
        let mut languages: Vec<String> = Vec::new();
        let mut alphas: Vec<Vec<f64>> = Vec::new();
        for row in csv::Reader::from_reader(r).deserialize() {
            let row: AlphaRow = row?;
            let li = match languages.iter().position(|l| *l == row.language) {
                Some(i) => i,
                None => {
                    languages.push(row.language.clone());
                    alphas.push(vec![f64::NAN; dims.n_gates()]);
                    languages.len() - 1
                }
            };
            let id = ComponentId::parse_fields(&row.kind, &row.layer, &row.index.to_string())?;
            alphas[li][dims.flat_index(id)?] = row.alpha;
        }
        for (l, a) in languages.iter().zip(&alphas) {
            if let Some(i) = a.iter().position(|x| x.is_nan()) {
                return Err(Error::Parse(format!("language {l} lacks alpha for {}", dims.component(i))));
            }
        }
        Ok(AlphaTable { dims, languages, alphas })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_draw_at_zero_alpha() {
        let hc = HardConcrete::default();
        assert!((hc.sample_gate(0.0, 0.5).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(hc.sample_gate(50.0, 0.5).unwrap(), 1.0);
        assert_eq!(hc.sample_gate(-50.0, 0.5).unwrap(), 0.0);
        assert!(matches!(hc.sample_gate(0.0, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn inference_thresholds() {
        let hc = HardConcrete::default();
        assert!((hc.zero_threshold() + 11f64.ln()).abs() < 1e-12);
        assert!((hc.one_threshold() - 11f64.ln()).abs() < 1e-12);
        assert!((hc.inference_gate(0.0) - 0.5).abs() < 1e-15);
        assert!(hc.inference_gate(hc.zero_threshold() - 1e-9) == 0.0);
        assert!(hc.inference_gate(hc.zero_threshold() + 1e-6) > 0.0);
    }

    #[test]
    fn penalty_at_zero_alpha() {
        let hc = HardConcrete::default();
        assert!((l0_penalty(&hc, &[0.0], &[1.0]) - 11.0 / 12.0).abs() < 1e-12);
        assert!(l0_penalty(&hc, &[-800.0], &[1.0]) < 1e-300);
    }

    #[test]
    fn constraint_examples() {
        assert_eq!(sparsity_constraint_loss(&[0.5], 0.5), 0.0);
        assert!((sparsity_constraint_loss(&[0.6, 0.4], 0.5) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn diversity_examples() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let cross = PriorMatrix::from_families(&ids, &["X".into(), "Y".into()]).unwrap();
        let same = PriorMatrix::from_families(&ids, &["X".into(), "X".into()]).unwrap();
        let g = Tensor::matrix(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(diversity_loss(&g, &cross).unwrap(), 4.0);
        assert_eq!(diversity_loss(&g, &same).unwrap(), 0.0);
        let one = PriorMatrix::from_families(&ids[..1], &["X".into()]).unwrap();
        assert_eq!(diversity_loss(&Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap(), &one).unwrap(), 0.0);
        assert!(diversity_loss(&g, &one).is_err());
    }

    #[test]
    fn prior_from_table() {
        let t = FamilyTable::builtin();
        let p = build_prior(&["en".into(), "es".into(), "th".into()], &t).unwrap();
        assert_eq!(p.get(0, 1), 0.0);
        assert_eq!(p.get(0, 2), 1.0);
        assert_eq!(p.get(2, 2), 0.0);
        assert!(matches!(build_prior(&["qq".into()], &t), Err(Error::Input(_))));
        assert_eq!(build_prior(&["en".into()], &t).unwrap().mask(), Tensor::zeros(&[1, 1]));
    }

    #[test]
    fn tape_versions_match_plain() {
        let hc = HardConcrete::default();
        let alphas = vec![0.3, -1.0, 2.5, -3.0];
        let w = vec![4.0, 2.0, 2.0, 1.0];
        let mut tape = Tape::new();
        let a = tape.param(Tensor::vector(alphas.clone()));
        let p = l0_penalty_tape(&mut tape, &hc, a, &w).unwrap();
        assert!((tape.value(p).item() - l0_penalty(&hc, &alphas, &w)).abs() < 1e-12);
        let u = uniform_noise(1, 2, 3, 4);
        let g = hc.gate_tape(&mut tape, a, Some(&u)).unwrap();
        for (i, (&al, &uu)) in alphas.iter().zip(&u).enumerate() {
            assert!((tape.value(g).data()[i] - hc.sample_gate(al, uu).unwrap()).abs() < 1e-12);
        }
        let gm = Tensor::matrix(2, 2, vec![0.2, 0.9, 0.4, 0.7]).unwrap();
        let prior = PriorMatrix::from_families(&["a".into(), "b".into()], &["X".into(), "Y".into()]).unwrap();
        let gv = tape.constant(gm.clone());
        let d = diversity_loss_tape(&mut tape, gv, &prior).unwrap();
        assert!((tape.value(d).item() - diversity_loss(&gm, &prior).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn noise_is_order_independent() {
        let a = uniform_noise(9, 4, 1, 10);
        let b = uniform_noise(9, 4, 1, 20);
        assert_eq!(a[..], b[..10]);
        assert_ne!(uniform_noise(9, 5, 1, 10), a);
    }

    #[test]
    fn alpha_csv_round_trip_and_finalize() {
        let dims = GateDims { n_layers: 1, n_heads: 2, ffn_dim: 3, model_dim: 2 };
        let mut rng = crate::rng::rng_for(4, "alpha");
        let mut t = AlphaTable::init(dims, &["en".into(), "es".into()], 0.1, &mut rng).unwrap();
        t.alphas[1][0] = -3.0;
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("language,kind,layer,index,alpha\nen,head,0,0,"));
        assert_eq!(AlphaTable::read_csv(buf.as_slice(), dims).unwrap(), t);
        let hard = t.finalize(&HardConcrete::default()).unwrap();
        assert_eq!(hard[0].1, GateSet::ones(dims));
        assert_eq!(hard[1].1.values()[0], 0.0);
    }
}
