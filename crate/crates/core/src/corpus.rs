//! Synthetic multilingual corpus, MLM masking and the probe task.
//!
//! Each family owns a block of core tokens and a bigram grammar over them.
//! Languages in a family reuse that grammar with a few reshuffled rows and
//! add private tokens of their own, so same-family languages share most of
//! their inventory while different families share nothing.

use crate::error::{Error, Result};
use crate::languages::{validate_specs, FamilyTable, LanguageSpec, MISSING_FAMILY};
use crate::rng::{derive_seed, rng_for};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const CLS: usize = 2;
pub const N_SPECIAL: usize = 3;
const SPECIAL_NAMES: [&str; N_SPECIAL] = ["[PAD]", "[MASK]", "[CLS]"];

/// Transition probabilities of a token's ranked successors.
const SUCC_PROBS: [f64; 4] = [0.55, 0.25, 0.12, 0.08];

/// Language sampling exponent: p_i ∝ n_i^0.3.
pub const LANGUAGE_SAMPLING_EXPONENT: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub core_per_family: usize,
    pub private_per_language: usize,
    /// probability of emitting a private token instead of following the chain
    pub private_rate: f64,
    /// fraction of core tokens whose successor ranking a language reshuffles
    pub variation: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            core_per_family: 30,
            private_per_language: 10,
            private_rate: 0.25,
            variation: 0.3,
            min_len: 8,
            max_len: 16,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.core_per_family < SUCC_PROBS.len() {
            return Err(Error::Config(format!("core_per_family must be at least {}", SUCC_PROBS.len())));
        }
        if self.private_per_language == 0 {
            return Err(Error::Config("private_per_language must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.private_rate) || !(0.0..=1.0).contains(&self.variation) {
            return Err(Error::Config("private_rate must lie in [0,1) and variation in [0,1]".into()));
        }
        if self.min_len < 2 || self.max_len < self.min_len {
            return Err(Error::Config("need 2 <= min_len <= max_len".into()));
        }
        Ok(())
    }

    /// Jaccard overlap of two same-family inventories.
    pub fn family_jaccard(&self) -> f64 {
        let c = self.core_per_family as f64;
        c / (c + 2.0 * self.private_per_language as f64)
    }
}

/// The eight-language default: four families with two languages each.
pub const DEFAULT_LANGUAGES: [&str; 8] = ["en", "es", "ar", "he", "zh-Hans", "my", "id", "jv"];

/// Default specs with log-uniform sentence counts between the given token
/// budgets (average sentence length is taken from `config`).
pub fn default_specs(config: &CorpusConfig, min_tokens: usize, max_tokens: usize, seed: u64) -> Result<Vec<LanguageSpec>> {
    specs_for(&DEFAULT_LANGUAGES, &FamilyTable::builtin(), config, min_tokens, max_tokens, seed)
}

pub fn specs_for(
    ids: &[&str],
    table: &FamilyTable,
    config: &CorpusConfig,
    min_tokens: usize,
    max_tokens: usize,
    seed: u64,
) -> Result<Vec<LanguageSpec>> {
    if min_tokens == 0 || max_tokens < min_tokens {
        return Err(Error::Config("need 0 < min_tokens <= max_tokens".into()));
    }
    let mut rng = rng_for(seed, "corpus-sizes");
    let avg_len = (config.min_len + config.max_len) as f64 / 2.0;
    let (lo, hi) = ((min_tokens as f64).ln(), (max_tokens as f64).ln());
    ids.iter()
        .map(|&id| {
            let tokens = (lo + (hi - lo) * rng.gen::<f64>()).exp();
            Ok(LanguageSpec {
                id: id.to_string(),
                family: table.family(id)?.to_string(),
                size: ((tokens / avg_len).round() as usize).max(1),
                seed: derive_seed(seed, id),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Parse(format!("duplicate vocabulary token {t}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(w, "{t}\t{i}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in BufReader::new(std::fs::File::open(path)?).lines().enumerate() {
            let line = line?;
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::Parse(format!("vocab line {} lacks a tab", n + 1)))?;
            let id: usize = id.trim().parse().map_err(|_| Error::Parse(format!("bad id on vocab line {}", n + 1)))?;
            pairs.push((id, tok.to_string()));
        }
        pairs.sort();
        if pairs.iter().enumerate().any(|(i, (id, _))| *id != i) {
            return Err(Error::Parse("vocabulary ids are not 0..n".into()));
        }
        Vocab::from_tokens(pairs.into_iter().map(|(_, t)| t).collect())
    }
}

#[derive(Clone, Debug)]
struct LangGrammar {
    core: Vec<usize>,
    private: Vec<usize>,
    successors: HashMap<usize, Vec<usize>>,
}

impl LangGrammar {
    fn next(&self, cur: usize, rng: &mut ChaCha8Rng, private_rate: f64) -> usize {
        if rng.gen::<f64>() < private_rate {
            return self.private[rng.gen_range(0..self.private.len())];
        }
        let succ = &self.successors[&cur];
        let mut r = rng.gen::<f64>();
        for (&s, &p) in succ.iter().zip(&SUCC_PROBS) {
            if r < p {
                return s;
            }
            r -= p;
        }
        succ[succ.len() - 1]
    }

    fn sentence(&self, cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        let mut cur = self.core[rng.gen_range(0..self.core.len())];
        let mut out = Vec::with_capacity(len);
        out.push(cur);
        while out.len() < len {
            cur = self.next(cur, rng, cfg.private_rate);
            out.push(cur);
        }
        out
    }
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect()
}

/// Family key: `Missing` languages each get their own.
fn family_key(spec: &LanguageSpec) -> String {
    if spec.family == MISSING_FAMILY {
        format!("missing-{}", spec.id)
    } else {
        slug(&spec.family)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CorpusMeta {
    seed: u64,
    config: CorpusConfig,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub seed: u64,
    pub config: CorpusConfig,
    pub specs: Vec<LanguageSpec>,
    pub vocab: Vocab,
    grammars: Vec<LangGrammar>,
    /// sentences per language, in spec order
    pub sentences: Vec<Vec<Vec<usize>>>,
}

fn build_grammars(specs: &[LanguageSpec], cfg: &CorpusConfig, seed: u64) -> Result<(Vocab, Vec<LangGrammar>)> {
    let mut tokens: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
    let mut families: Vec<String> = Vec::new();
    for s in specs {
        let key = family_key(s);
        if !families.contains(&key) {
            families.push(key);
        }
    }
    let mut family_core: HashMap<String, (Vec<usize>, HashMap<usize, Vec<usize>>)> = HashMap::new();
    for fam in &families {
        let ids: Vec<usize> = (0..cfg.core_per_family).map(|k| tokens.len() + k).collect();
        tokens.extend((0..cfg.core_per_family).map(|k| format!("{fam}#{k}")));
        let mut rng = rng_for(seed, &format!("family:{fam}"));
        let succ = ids
            .iter()
            .map(|&t| {
                let pick = rand::seq::index::sample(&mut rng, ids.len(), SUCC_PROBS.len());
                (t, pick.into_iter().map(|i| ids[i]).collect())
            })
            .collect();
        family_core.insert(fam.clone(), (ids, succ));
    }
    let mut grammars = Vec::with_capacity(specs.len());
    for s in specs {
        let (core, fam_succ) = &family_core[&family_key(s)];
        let private: Vec<usize> = (0..cfg.private_per_language).map(|k| tokens.len() + k).collect();
        tokens.extend((0..cfg.private_per_language).map(|k| format!("{}#{k}", s.id)));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s.seed, "grammar"));
        let mut successors = HashMap::with_capacity(core.len() + private.len());
        for &t in core {
            let mut row = fam_succ[&t].clone();
            if rng.gen::<f64>() < cfg.variation {
                row.shuffle(&mut rng);
            }
            successors.insert(t, row);
        }
        for &t in &private {
            let pick = rand::seq::index::sample(&mut rng, core.len(), SUCC_PROBS.len());
            successors.insert(t, pick.into_iter().map(|i| core[i]).collect());
        }
        grammars.push(LangGrammar { core: core.clone(), private, successors });
    }
    Ok((Vocab::from_tokens(tokens)?, grammars))
}

/// Generate sentence files' content for every language.
pub fn gen_corpus(specs: &[LanguageSpec], config: &CorpusConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    validate_specs(specs, &FamilyTable::builtin())?;
    let (vocab, grammars) = build_grammars(specs, config, seed)?;
    let sentences = specs
        .iter()
        .zip(&grammars)
        .map(|(s, g)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s.seed, "sentences"));
            (0..s.size).map(|_| g.sentence(config, &mut rng)).collect()
        })
        .collect();
    Ok(Corpus { seed, config: config.clone(), specs: specs.to_vec(), vocab, grammars, sentences })
}

impl Corpus {
    pub fn n_languages(&self) -> usize {
        self.specs.len()
    }

    pub fn language_ids(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.id.clone()).collect()
    }

    pub fn lang_index(&self, id: &str) -> Result<usize> {
        self.specs
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| Error::Input(format!("language {id} is not in the corpus")))
    }

    /// Token ids a language can emit.
    pub fn inventory(&self, lang: usize) -> BTreeSet<usize> {
        let g = &self.grammars[lang];
        g.core.iter().chain(&g.private).copied().collect()
    }

    /// Language sampling distribution, p_i ∝ n_i^exponent.
    pub fn sampling_probs(&self, exponent: f64) -> Vec<f64> {
        let w: Vec<f64> = self.sentences.iter().map(|s| (s.len() as f64).powf(exponent)).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|x| x / z).collect()
    }

    /// Draw a fresh sentence from a language's grammar (not from the files).
    pub fn fresh_sentence(&self, lang: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        self.grammars[lang].sentence(&self.config, rng)
    }

    /// Write `<lang>.txt`, `vocab.tsv`, `languages.csv` and `corpus.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (s, sents) in self.specs.iter().zip(&self.sentences) {
            let mut w = BufWriter::new(std::fs::File::create(dir.join(format!("{}.txt", s.id)))?);
            for sent in sents {
                let line: Vec<&str> = sent.iter().map(|&t| self.vocab.token(t)).collect();
                writeln!(w, "{}", line.join(" "))?;
            }
            w.flush()?;
        }
        self.vocab.write(&dir.join("vocab.tsv"))?;
        crate::languages::write_specs(&dir.join("languages.csv"), &self.specs)?;
        let meta = CorpusMeta { seed: self.seed, config: self.config.clone() };
        std::fs::write(dir.join("corpus.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let meta: CorpusMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("corpus.json"))?)?;
        let specs = crate::languages::read_specs(&dir.join("languages.csv"))?;
        meta.config.validate()?;
        validate_specs(&specs, &FamilyTable::builtin())?;
        let (vocab, grammars) = build_grammars(&specs, &meta.config, meta.seed)?;
        let stored = Vocab::read(&dir.join("vocab.tsv"))?;
        if stored != vocab {
            return Err(Error::Parse("vocab.tsv does not match the corpus grammar".into()));
        }
        let mut sentences = Vec::with_capacity(specs.len());
        for s in &specs {
            let f = BufReader::new(std::fs::File::open(dir.join(format!("{}.txt", s.id)))?);
            let mut sents = Vec::new();
            for (n, line) in f.lines().enumerate() {
                let line = line?;
                let sent = line
                    .split_whitespace()
                    .map(|t| {
                        vocab
                            .id(t)
                            .ok_or_else(|| Error::Parse(format!("{}.txt line {}: unknown token {t}", s.id, n + 1)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                sents.push(sent);
            }
            sentences.push(sents);
        }
        Ok(Corpus { seed: meta.seed, config: meta.config, specs, vocab, grammars, sentences })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub rate: f64,
    /// share of masked positions replaced by the mask token
    pub mask_token: f64,
    /// share replaced by a random token; the rest stay unchanged
    pub random_token: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { rate: 0.15, mask_token: 0.8, random_token: 0.1 }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return Err(Error::Config(format!("mask rate {} must lie in (0,1)", self.rate)));
        }
        if self.mask_token < 0.0 || self.random_token < 0.0 || self.mask_token + self.random_token > 1.0 {
            return Err(Error::Config("mask/random shares must be nonnegative and sum to at most 1".into()));
        }
        Ok(())
    }
}

/// Choose masked positions and corrupt them. Returns the model input, the
/// masked positions and the original ids. At least one position is masked.
pub fn mask_sentence(
    sentence: &[usize],
    cfg: &MaskConfig,
    vocab_size: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut positions: Vec<usize> = (0..sentence.len()).filter(|_| rng.gen::<f64>() < cfg.rate).collect();
    if positions.is_empty() && !sentence.is_empty() {
        positions.push(rng.gen_range(0..sentence.len()));
    }
    let mut input = sentence.to_vec();
    let mut gold = Vec::with_capacity(positions.len());
    for &p in &positions {
        gold.push(sentence[p]);
        let r = rng.gen::<f64>();
        if r < cfg.mask_token {
            input[p] = MASK;
        } else if r < cfg.mask_token + cfg.random_token {
            input[p] = rng.gen_range(N_SPECIAL..vocab_size);
        }
    }
    (input, positions, gold)
}

/// A masked-LM batch. `masked[k] = (row, position)` with gold id `gold[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlmBatch {
    pub inputs: Vec<Vec<usize>>,
    pub masked: Vec<(usize, usize)>,
    pub gold: Vec<usize>,
    pub langs: Vec<usize>,
}

impl MlmBatch {
    /// Row indices into the stacked, right-padded `(B·S)` layout.
    pub fn flat_positions(&self) -> Vec<usize> {
        let s = self.inputs.iter().map(Vec::len).max().unwrap_or(0);
        self.masked.iter().map(|&(r, p)| r * s + p).collect()
    }
}

/// Seeded stream of MLM batches over a corpus.
pub struct MlmSampler<'a> {
    corpus: &'a Corpus,
    cfg: MaskConfig,
    rng: ChaCha8Rng,
    lang_cdf: Vec<f64>,
    eligible: Vec<Vec<usize>>,
    /// sentences excluded for being shorter than two tokens or all padding
    pub skipped: usize,
}

impl<'a> MlmSampler<'a> {
    pub fn new(corpus: &'a Corpus, cfg: &MaskConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut skipped = 0;
        let eligible: Vec<Vec<usize>> = corpus
            .sentences
            .iter()
            .map(|sents| {
                sents
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| {
                        let ok = s.len() >= 2 && s.iter().any(|&t| t != PAD);
                        skipped += usize::from(!ok);
                        ok
                    })
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect();
        if let Some(l) = eligible.iter().position(Vec::is_empty) {
            return Err(Error::Input(format!("language {} has no usable sentences", corpus.specs[l].id)));
        }
        let mut acc = 0.0;
        let lang_cdf = corpus
            .sampling_probs(LANGUAGE_SAMPLING_EXPONENT)
            .into_iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(MlmSampler { corpus, cfg: cfg.clone(), rng: ChaCha8Rng::seed_from_u64(seed), lang_cdf, eligible, skipped })
    }

    /// Draw a language index from the smoothed size distribution.
    pub fn sample_language(&mut self) -> usize {
        let r = self.rng.gen::<f64>();
        self.lang_cdf.iter().position(|&c| r < c).unwrap_or(self.lang_cdf.len() - 1)
    }

    /// A batch from one language, or mixed across languages when `lang` is `None`.
    pub fn batch(&mut self, lang: Option<usize>, size: usize) -> Result<MlmBatch> {
        if size == 0 {
            return Err(Error::Input("batch size must be positive".into()));
        }
        if let Some(l) = lang {
            if l >= self.corpus.n_languages() {
                return Err(Error::Input(format!("language index {l} out of range")));
            }
        }
        let mut out = MlmBatch { inputs: Vec::new(), masked: Vec::new(), gold: Vec::new(), langs: Vec::new() };
        for row in 0..size {
            let l = lang.unwrap_or_else(|| self.sample_language());
            let pool = &self.eligible[l];
            let sent = &self.corpus.sentences[l][pool[self.rng.gen_range(0..pool.len())]];
            let (input, pos, gold) = mask_sentence(sent, &self.cfg, self.corpus.vocab.len(), &mut self.rng);
            out.inputs.push(input);
            out.masked.extend(pos.into_iter().map(|p| (row, p)));
            out.gold.extend(gold);
            out.langs.push(l);
        }
        Ok(out)
    }
}

impl Corpus {
    /// Probe label: parity of the most likely continuation of the token just
    /// before the probed position, under the language's grammar. The label is
    /// a function of visible context, so a model that learned the grammar can
    /// in principle reach perfect accuracy.
    pub fn probe_label(&self, lang: usize, sentence: &[usize], position: usize) -> usize {
        self.grammars[lang].successors[&sentence[position - 1]][0] % 2
    }
}

/// Probed position: the middle token (never the first, for `len >= 2`).
pub fn probe_position(len: usize) -> usize {
    len / 2
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeExample {
    /// input with the probed token replaced by the mask token
    pub tokens: Vec<usize>,
    pub position: usize,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSplit {
    pub language: String,
    pub train: Vec<ProbeExample>,
    pub dev: Vec<ProbeExample>,
    pub test: Vec<ProbeExample>,
}

/// Class-balanced probe examples per language, split 60/20/20.
///
/// The classifier sees only the encoder state at the masked position, so the
/// representation has to carry what the grammar predicts there.
pub fn probe_batches(corpus: &Corpus, per_language: usize, seed: u64) -> Result<Vec<ProbeSplit>> {
    if per_language < 10 {
        return Err(Error::Input("probe needs at least 10 examples per language".into()));
    }
    let half = per_language / 2;
    let mut out = Vec::with_capacity(corpus.n_languages());
    for (l, spec) in corpus.specs.iter().enumerate() {
        let mut rng = rng_for(seed, &format!("probe:{}", spec.id));
        let mut by_class: [Vec<ProbeExample>; 2] = [Vec::new(), Vec::new()];
        let mut attempts = 0;
        while by_class.iter().any(|c| c.len() < half) {
            attempts += 1;
            if attempts > 1000 * per_language {
                return Err(Error::Run(format!("language {} cannot produce a balanced probe set", spec.id)));
            }
            let sent = corpus.fresh_sentence(l, &mut rng);
            let position = probe_position(sent.len());
            let label = corpus.probe_label(l, &sent, position);
            if by_class[label].len() < half {
                let mut tokens = sent;
                tokens[position] = MASK;
                by_class[label].push(ProbeExample { tokens, position, label });
            }
        }
        let [zeros, ones] = by_class;
        let mut all: Vec<ProbeExample> = zeros.into_iter().zip(ones).flat_map(|(a, b)| [a, b]).collect();
        all.shuffle(&mut rng);
        let n_train = all.len() * 3 / 5;
        let n_dev = all.len() / 5;
        let test = all.split_off(n_train + n_dev);
        let dev = all.split_off(n_train);
        out.push(ProbeSplit { language: spec.id.clone(), train: all, dev, test });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Corpus {
        let cfg = CorpusConfig::default();
        let specs = default_specs(&cfg, 600, 2400, 5).unwrap();
        gen_corpus(&specs, &cfg, 5).unwrap()
    }

    #[test]
    fn same_family_overlap_meets_floor() {
        let c = small();
        let en = c.inventory(c.lang_index("en").unwrap());
        let es = c.inventory(c.lang_index("es").unwrap());
        let ar = c.inventory(c.lang_index("ar").unwrap());
        let jac = |a: &BTreeSet<usize>, b: &BTreeSet<usize>| {
            a.intersection(b).count() as f64 / a.union(b).count() as f64
        };
        assert!(jac(&en, &es) >= 0.5);
        assert!((jac(&en, &es) - c.config.family_jaccard()).abs() < 1e-12);
        assert_eq!(jac(&en, &ar), 0.0);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let a = small();
        let b = small();
        assert_eq!(a.sentences, b.sentences);
        assert_eq!(a.vocab, b.vocab);
    }

    #[test]
    fn files_round_trip() {
        let c = small();
        let dir = tempfile::tempdir().unwrap();
        c.write(dir.path()).unwrap();
        let back = Corpus::read(dir.path()).unwrap();
        assert_eq!(back.sentences, c.sentences);
        assert_eq!(back.specs, c.specs);
        let first = std::fs::read_to_string(dir.path().join("en.txt")).unwrap();
        assert!(first.lines().next().unwrap().split(' ').all(|t| t.contains('#')));
    }

    #[test]
    fn duplicate_language_ids_rejected() {
        let cfg = CorpusConfig::default();
        let mut specs = default_specs(&cfg, 100, 200, 1).unwrap();
        specs[1].id = specs[0].id.clone();
        assert!(matches!(gen_corpus(&specs, &cfg, 1), Err(Error::Input(_))));
    }

    #[test]
    fn masking_keeps_at_least_one_position() {
        let cfg = MaskConfig { rate: 1e-9, ..MaskConfig::default() };
        let mut rng = rng_for(1, "m");
        let (_, pos, gold) = mask_sentence(&[5, 6, 7], &cfg, 10, &mut rng);
        assert_eq!(pos.len(), 1);
        assert_eq!(gold.len(), 1);
    }

    #[test]
    fn short_sentences_are_skipped() {
        let mut c = small();
        c.sentences[0].push(vec![4]);
        c.sentences[0].push(vec![PAD, PAD]);
        let s = MlmSampler::new(&c, &MaskConfig::default(), 3).unwrap();
        assert_eq!(s.skipped, 2);
    }

    #[test]
    fn probe_sets_are_balanced_and_masked() {
        let c = small();
        let sets = probe_batches(&c, 40, 9).unwrap();
        assert_eq!(sets.len(), 8);
        for s in &sets {
            let all: Vec<&ProbeExample> = s.train.iter().chain(&s.dev).chain(&s.test).collect();
            assert_eq!(all.len(), 40);
            assert_eq!(all.iter().filter(|e| e.label == 1).count(), 20);
            assert!(all.iter().all(|e| e.tokens[e.position] == MASK));
            assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (24, 8, 8));
        }
    }
}
