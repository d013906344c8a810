//! Probe fine-tuning: a logistic-regression head on frozen encoder states.

use crate::corpus::{ProbeExample, ProbeSplit};
use crate::dyn_sparse::DsParams;
use crate::encoder::{CompactEncoder, Encoder, GateSet};
use crate::error::{Error, Result};
use crate::grad_prune::PruningProfile;
use crate::rng::rng_for;
use crate::tensor::tape::softmax_row;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Where per-language gates come from.
#[derive(Clone, Copy, Debug)]
pub enum GateSource<'a> {
    Dense,
    Profile(&'a PruningProfile),
    /// DS tables evaluated at network size `t`, binarized at 0.5
    Ds(&'a DsParams, f64),
}

impl GateSource<'_> {
    pub fn gates(&self, enc: &Encoder, language: &str) -> Result<GateSet> {
        match self {
            GateSource::Dense => Ok(GateSet::ones(enc.dims())),
            GateSource::Profile(p) => p.for_language(language).cloned(),
            GateSource::Ds(ds, t) => Ok(ds.subnetwork_at(*t, Some(language))?.binarize(0.5)),
        }
    }
}

/// What the linear head reads at the probed position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeFeatures {
    /// final hidden state
    Hidden,
    /// the model's predicted token distribution
    TokenProbs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub features: ProbeFeatures,
    pub per_language: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_grid: Vec<f64>,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            features: ProbeFeatures::TokenProbs,
            per_language: 1000, epochs: 30, batch_size: 32, lr_grid: vec![0.01, 0.03, 0.1], seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeResult {
    pub per_language: Vec<(String, f64)>,
    pub chosen_lr: Vec<f64>,
    pub mean: f64,
}

const FEATURE_CHUNK: usize = 64;

/// Feature vector at each example's probed position.
pub fn probe_features(model: &CompactEncoder, examples: &[ProbeExample], kind: ProbeFeatures) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(FEATURE_CHUNK) {
        let seqs: Vec<Vec<usize>> = chunk.iter().map(|e| e.tokens.clone()).collect();
        let seq_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let h = match kind {
            ProbeFeatures::Hidden => model.hidden(&seqs)?,
            ProbeFeatures::TokenProbs => model.logits(&seqs)?,
        };
        for (i, e) in chunk.iter().enumerate() {
            let row = h.row(i * seq_len + e.position);
            out.push(match kind {
                ProbeFeatures::Hidden => row.to_vec(),
                ProbeFeatures::TokenProbs => {
                    let mut p = vec![0.0; row.len()];
                    softmax_row(row, &mut p);
                    p
                }
            });
        }
    }
    Ok(out)
}

struct Standardizer {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &[Vec<f64>]) -> Self {
        let d = x[0].len();
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for row in x {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let inv_std = var.iter().map(|v| if *v > 1e-12 { 1.0 / v.sqrt() } else { 0.0 }).collect();
        Standardizer { mean, inv_std }
    }

    fn apply(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| row.iter().zip(&self.mean).zip(&self.inv_std).map(|((v, m), s)| (v - m) * s).collect())
            .collect()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Clone, Debug)]
struct Logistic {
    w: Vec<f64>,
    b: f64,
}

impl Logistic {
    fn score(&self, x: &[f64]) -> f64 {
        self.b + self.w.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    fn accuracy(&self, x: &[Vec<f64>], y: &[usize]) -> f64 {
        let hits = x.iter().zip(y).filter(|(xi, &yi)| usize::from(self.score(xi) > 0.0) == yi).count();
        hits as f64 / x.len() as f64
    }
}

fn train_logistic(x: &[Vec<f64>], y: &[usize], cfg: &ProbeConfig, lr: f64, seed: u64) -> Logistic {
    let d = x[0].len();
    let mut m = Logistic { w: vec![0.0; d], b: 0.0 };
    let mut order: Vec<usize> = (0..x.len()).collect();
    let mut rng = rng_for(seed, "probe-shuffle");
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for &i in batch {
                let err = sigmoid(m.score(&x[i])) - y[i] as f64;
                for (g, v) in gw.iter_mut().zip(&x[i]) {
                    *g += err * v;
                }
                gb += err;
            }
            let k = lr / batch.len() as f64;
            for (w, g) in m.w.iter_mut().zip(&gw) {
                *w -= k * g;
            }
            m.b -= k * gb;
        }
    }
    m
}

/// Train a linear head per language on frozen features, choose the learning
/// rate on the dev split and report test accuracy.
pub fn finetune_probe(enc: &Encoder, source: GateSource, splits: &[ProbeSplit], cfg: &ProbeConfig) -> Result<ProbeResult> {
    if cfg.lr_grid.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Config("probe needs a nonempty learning-rate grid and a positive batch size".into()));
    }
    let mut per_language = Vec::with_capacity(splits.len());
    let mut chosen_lr = Vec::with_capacity(splits.len());
    for split in splits {
        if split.train.is_empty() || split.dev.is_empty() || split.test.is_empty() {
            return Err(Error::Input(format!("probe split for {} has an empty part", split.language)));
        }
        let gates = source.gates(enc, &split.language)?;
        let model = CompactEncoder::from_gated(enc, &gates)?;
        let raw_train = probe_features(&model, &split.train, cfg.features)?;
        let norm = Standardizer::fit(&raw_train);
        let xtr = norm.apply(&raw_train);
        let xdev = norm.apply(&probe_features(&model, &split.dev, cfg.features)?);
        let xte = norm.apply(&probe_features(&model, &split.test, cfg.features)?);
        let label = |s: &[ProbeExample]| s.iter().map(|e| e.label).collect::<Vec<_>>();
        let (ytr, ydev, yte) = (label(&split.train), label(&split.dev), label(&split.test));
        let mut best: Option<(f64, f64, Logistic)> = None;
        for &lr in &cfg.lr_grid {
            let m = train_logistic(&xtr, &ytr, cfg, lr, cfg.seed);
            let dev = m.accuracy(&xdev, &ydev);
            if best.as_ref().is_none_or(|(b, _, _)| dev > *b) {
                best = Some((dev, lr, m));
            }
        }
        let (_, lr, m) = best.expect("grid is nonempty");
        per_language.push((split.language.clone(), m.accuracy(&xte, &yte)));
        chosen_lr.push(lr);
    }
    let mean = per_language.iter().map(|(_, a)| a).sum::<f64>() / per_language.len().max(1) as f64;
    Ok(ProbeResult { per_language, chosen_lr, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{default_specs, gen_corpus, probe_batches, CorpusConfig};
    use crate::encoder::ModelConfig;

    #[test]
    fn logistic_separates_separable_data() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64 - 19.5, ((i * 7) % 5) as f64]).collect();
        let y: Vec<usize> = (0..40).map(|i| usize::from(i >= 20)).collect();
        let norm = Standardizer::fit(&x);
        let xs = norm.apply(&x);
        let m = train_logistic(&xs, &y, &ProbeConfig::default(), 0.1, 0);
        assert_eq!(m.accuracy(&xs, &y), 1.0);
    }

    #[test]
    fn constant_features_do_not_blow_up() {
        let x = vec![vec![1.0, 2.0]; 4];
        let xs = Standardizer::fit(&x).apply(&x);
        assert!(xs.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn probe_reports_every_language() {
        let cc = CorpusConfig::default();
        let corpus = gen_corpus(&default_specs(&cc, 300, 600, 2).unwrap(), &cc, 2).unwrap();
        let cfg = ModelConfig { n_layers: 1, n_heads: 2, model_dim: 8, ffn_dim: 8, ..ModelConfig::toy(corpus.vocab.len()) };
        let enc = Encoder::init(&cfg, &mut rng_for(0, "p")).unwrap();
        let splits = probe_batches(&corpus, 200, 1).unwrap();
        let pc = ProbeConfig { epochs: 3, per_language: 200, ..Default::default() };
        let r = finetune_probe(&enc, GateSource::Dense, &splits, &pc).unwrap();
        assert_eq!(r.per_language.len(), corpus.n_languages());
        assert!(r.per_language.iter().all(|(_, a)| (0.0..=1.0).contains(a)));
        let zeros = GateSet::zeros(enc.dims());
        let profile = PruningProfile::new(crate::grad_prune::Setting::Shared, 0.5, vec![("shared".into(), zeros)]).unwrap();
        // with every gate off only positions reach the features, and labels
        // are balanced, so accuracy sits near chance (320 test examples)
        let r = finetune_probe(&enc, GateSource::Profile(&profile), &splits, &pc).unwrap();
        assert!((r.mean - 0.5).abs() < 0.1, "{r:?}");
        let bad = ProbeConfig { lr_grid: vec![], ..pc };
        assert!(matches!(finetune_probe(&enc, GateSource::Dense, &splits, &bad), Err(Error::Config(_))));
    }
}
