use super::config::RunConfig;
use super::{BenchArgs, Cli, DsArgs, Figure, GenCorpusArgs, ProbeArgs, PruneArgs, ReportArgs, SweepArgs, TrainArgs, OUT_ENV};
use crate::analysis::{
    batch_scaling, component_profile, corr_accuracy_size, hamming_matrix, layer_profile, report_path, size_curve,
    size_curve_dry_run, spearman, throughput_bench, write_rows, BenchConfig, ThroughputRecord,
};
use crate::corpus::{gen_corpus, probe_batches, specs_for, Corpus};
use crate::dyn_sparse::{init_ds, DsParams, SparsityGrid};
use crate::encoder::{count_params, encoder_sparsity, ComponentWeights, Encoder, GateSet, ModelConfig};
use crate::error::{Error, Result};
use crate::grad_prune::{ImportanceTable, PruningProfile, Setting, SHARED};
use crate::languages::{read_specs, FamilyTable};
use crate::rng::{derive_seed, rng_for};
use crate::trainer::{
    finetune_probe, git_hash, pretrain_baseline, run_ds_training, run_grad_pruning, run_l0_pruning, write_metrics,
    Algorithm, GateSource, ProbeResult, RunManifest, TrainSchedule,
};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

const CORPUS_DIR: &str = "corpus";
const BASELINE: &str = "baseline";
const MODEL_FILE: &str = "model.ckpt";
const MANIFEST: &str = "manifest.json";
const PROFILE_DIR: &str = "profile";
const DS_FILE: &str = "ds.csv";

/// Directory name for the artifacts of a pruning or DS schedule.
pub fn stage_name(s: &TrainSchedule) -> String {
    if s.algorithm.is_ds() {
        format!("{}-{}", s.algorithm.as_str(), s.setting.as_str())
    } else {
        format!("prune-{}-{}-t{}", s.algorithm.as_str(), s.setting.as_str(), s.target)
    }
}

/// `start:end:step` (inclusive, rounded to 1e-9) or a comma-separated list.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("cannot parse sparsity list {spec:?}"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    let round = |x: f64| (x * 1e9).round() / 1e9;
    let out: Vec<f64> = if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        let [a, b, step] = parts.as_slice() else { return Err(bad()) };
        let (a, b, step) = (num(a)?, num(b)?, num(step)?);
        if !(step > 0.0) || b < a {
            return Err(bad());
        }
        let n = ((b - a) / step + 1e-9).floor() as usize;
        (0..=n).map(|i| round(a + i as f64 * step)).collect()
    } else {
        spec.split(',').map(num).collect::<Result<_>>()?
    };
    if out.is_empty() || out.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(Error::Config(format!("sparsities in {spec:?} must lie in [0,1]")));
    }
    Ok(out)
}

/// Trained artifacts of one stage directory.
pub struct Stage {
    pub name: String,
    pub dir: PathBuf,
    pub encoder: Encoder,
    pub manifest: RunManifest,
    pub profile: Option<PruningProfile>,
    pub ds: Option<DsParams>,
}

impl Stage {
    pub fn load(run_dir: &Path, name: &str) -> Result<Stage> {
        let dir = run_dir.join(name);
        if !dir.join(MODEL_FILE).exists() {
            return Err(Error::Run(format!("no checkpoint in {}; run the command that produces it first", dir.display())));
        }
        let encoder = Encoder::load(&dir.join(MODEL_FILE))?;
        let manifest = RunManifest::read(&dir.join(MANIFEST))?;
        let profile = dir.join(PROFILE_DIR).exists().then(|| PruningProfile::read(&dir.join(PROFILE_DIR))).transpose()?;
        let ds = if dir.join(DS_FILE).exists() {
            let s = manifest.schedule.clone().ok_or_else(|| Error::Parse("DS manifest lacks its schedule".into()))?;
            let f = std::fs::File::open(dir.join(DS_FILE))?;
            Some(DsParams::read_csv(f, encoder.dims(), s.grid, s.hard_concrete)?)
        } else {
            None
        };
        Ok(Stage { name: name.to_string(), dir, encoder, manifest, profile, ds })
    }

    pub fn gate_source(&self, sparsity: Option<f64>) -> Result<GateSource<'_>> {
        match (&self.profile, &self.ds, sparsity) {
            (Some(p), _, None) => Ok(GateSource::Profile(p)),
            (_, Some(ds), Some(s)) => Ok(GateSource::Ds(ds, 1.0 - s)),
            (_, Some(_), None) => Err(Error::Config(format!("stage {} is a DS model; pass --sparsity", self.name))),
            (_, None, Some(_)) => Err(Error::Config(format!("stage {} has no DS parameters; drop --sparsity", self.name))),
            (None, None, None) => Ok(GateSource::Dense),
        }
    }

    /// Hard gates per language for the given source.
    fn gates(&self, source: GateSource, languages: &[String]) -> Result<Vec<(String, GateSet)>> {
        languages.iter().map(|l| Ok((l.clone(), source.gates(&self.encoder, l)?))).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct ProbeRow {
    language: String,
    accuracy: f64,
    learning_rate: f64,
}

#[derive(Serialize)]
struct SizeRecord {
    language: String,
    retained_size: f64,
    encoder_sparsity: f64,
}

#[derive(Serialize)]
struct SweepRow {
    sparsity: f64,
    size: f64,
    encoder_sparsity: f64,
    total_params: usize,
    accuracy: f64,
    sentences_per_sec: Option<f64>,
}

#[derive(Serialize)]
struct LanguageLayerRow {
    sparsity: Option<f64>,
    language: String,
    layer: usize,
    head_sparsity: f64,
    hidden_sparsity: f64,
}

#[derive(Serialize)]
struct LanguageComponentRow {
    sparsity: Option<f64>,
    language: String,
    encoder_sparsity: f64,
    total_sparsity: f64,
    head: f64,
    hidden: f64,
    embed_rank: f64,
}

pub(super) struct Context {
    cfg: RunConfig,
    run_dir: PathBuf,
    argv: Vec<String>,
}

fn apply_train(s: &mut TrainSchedule, a: &TrainArgs) {
    if let Some(v) = a.steps {
        s.steps = v;
    }
    if let Some(v) = a.lr {
        s.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        s.batch_size = v;
    }
}

fn write_probe(path: &Path, r: &ProbeResult) -> Result<()> {
    let rows: Vec<ProbeRow> = r
        .per_language
        .iter()
        .zip(&r.chosen_lr)
        .map(|((l, a), lr)| ProbeRow { language: l.clone(), accuracy: *a, learning_rate: *lr })
        .collect();
    write_rows(path, &rows)
}

fn read_probe(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|_| Error::Run(format!("{} is missing; run eval-probe first", path.display())))?;
    r.deserialize::<ProbeRow>().map(|row| Ok(row.map(|p| (p.language, p.accuracy))?)).collect()
}

impl Context {
    pub(super) fn new(cli: &Cli, argv: Vec<String>) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        if let Some(id) = &cli.run_id {
            cfg.run_id = id.clone();
        }
        cfg.validate()?;
        let root = cli
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .or_else(|| cfg.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("runs"));
        let run_dir = root.join(&cfg.run_id);
        Ok(Context { cfg, run_dir, argv })
    }

    fn manifest(&self, command: &str, schedule: Option<&TrainSchedule>, model: Option<&ModelConfig>, extra: serde_json::Value) -> Result<RunManifest> {
        Ok(RunManifest {
            command: command.to_string(),
            argv: self.argv.clone(),
            seed: self.cfg.seed,
            git_hash: git_hash(),
            schedule: schedule.cloned(),
            model: model.cloned(),
            config: serde_json::to_value(&self.cfg)?,
            extra,
        })
    }

    fn corpus(&self) -> Result<Corpus> {
        let dir = self.run_dir.join(CORPUS_DIR);
        if !dir.exists() {
            return Err(Error::Run(format!("no corpus at {}; run gen-corpus first", dir.display())));
        }
        Corpus::read(&dir)
    }

    /// Schedule with the root seed, after flag overrides; validated.
    fn schedule(&self, base: &TrainSchedule, a: &TrainArgs) -> Result<TrainSchedule> {
        let mut s = base.clone();
        apply_train(&mut s, a);
        s.seed = self.cfg.seed;
        s.validate()?;
        Ok(s)
    }

    fn probe(&self, stage: &Stage, source: GateSource, corpus: &Corpus) -> Result<ProbeResult> {
        let splits = probe_batches(corpus, self.cfg.probe.per_language, derive_seed(self.cfg.seed, "probe"))?;
        let pc = crate::trainer::ProbeConfig { seed: self.cfg.seed, ..self.cfg.probe.clone() };
        finetune_probe(&stage.encoder, source, &splits, &pc)
    }

    pub(super) fn gen_corpus(&self, a: &GenCorpusArgs) -> Result<()> {
        let mut sec = self.cfg.corpus.clone();
        if let Some(l) = &a.languages {
            sec.languages = l.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
            sec.specs = None;
        }
        if let Some(p) = &a.specs {
            sec.specs = Some(p.clone());
        }
        if let Some(v) = a.min_tokens {
            sec.min_tokens = v;
        }
        if let Some(v) = a.max_tokens {
            sec.max_tokens = v;
        }
        let specs = match &sec.specs {
            Some(p) => read_specs(p)?,
            None => {
                let ids: Vec<&str> = sec.languages.iter().map(String::as_str).collect();
                specs_for(&ids, &FamilyTable::builtin(), &sec.generator, sec.min_tokens, sec.max_tokens, self.cfg.seed)?
            }
        };
        let corpus = gen_corpus(&specs, &sec.generator, self.cfg.seed)?;
        let dir = self.run_dir.join(CORPUS_DIR);
        corpus.write(&dir)?;
        let extra = serde_json::json!({ "languages": corpus.language_ids(), "vocab_size": corpus.vocab.len() });
        self.manifest("gen-corpus", None, None, extra)?.write(&dir.join(MANIFEST))?;
        eprintln!("wrote {} languages, vocabulary of {} to {}", corpus.n_languages(), corpus.vocab.len(), dir.display());
        Ok(())
    }

    pub(super) fn pretrain(&self, a: &TrainArgs) -> Result<()> {
        let corpus = self.corpus()?;
        let s = self.schedule(&self.cfg.pretrain, a)?;
        let model = self.cfg.model.with_vocab(corpus.vocab.len());
        let (enc, metrics) = pretrain_baseline(&model, &corpus, &s, &self.cfg.mask)?;
        let dir = self.run_dir.join(BASELINE);
        std::fs::create_dir_all(&dir)?;
        enc.save(&dir.join(MODEL_FILE))?;
        write_metrics(&dir.join("metrics.csv"), &metrics)?;
        let last = metrics.iter().rev().take(50).map(|m| m.loss).collect::<Vec<_>>();
        let tail = if last.is_empty() { f64::NAN } else { last.iter().sum::<f64>() / last.len() as f64 };
        let extra = serde_json::json!({ "final_loss": tail, "uniform_loss": (model.vocab_size as f64).ln() });
        self.manifest("pretrain", Some(&s), Some(&model), extra)?.write(&dir.join(MANIFEST))?;
        eprintln!("baseline trained for {} steps, final loss {tail:.4}", s.steps);
        Ok(())
    }

    pub(super) fn prune(&self, a: &PruneArgs) -> Result<()> {
        let mut s = self.schedule(&self.cfg.prune, &a.train)?;
        if let Some(x) = &a.algo {
            s.algorithm = Algorithm::parse(x)?;
        }
        if let Some(x) = &a.setting {
            s.setting = Setting::parse(x)?;
        }
        if let Some(t) = a.target_size {
            s.target = t;
        }
        if let Some(v) = a.lambda1 {
            s.lambda1 = v;
        }
        if let Some(v) = a.lambda2 {
            s.lambda2 = v;
        }
        if s.algorithm.is_ds() {
            return Err(Error::Config("prune runs grad, l0 or l0-improved; use ds-train for DS".into()));
        }
        if s.algorithm == Algorithm::L0Improved && s.setting != Setting::NonShared {
            return Err(Error::Config("l0-improved needs the non-shared setting".into()));
        }
        s.validate()?;
        let corpus = self.corpus()?;
        let base = Stage::load(&self.run_dir, BASELINE)?;
        let dir = self.run_dir.join(stage_name(&s));
        std::fs::create_dir_all(&dir)?;
        let weights = ComponentWeights::for_dims(base.encoder.dims());
        let (enc, profile, metrics) = match s.algorithm {
            Algorithm::Grad => {
                let run = run_grad_pruning(&base.encoder, &corpus, &s, &self.cfg.mask)?;
                for t in &run.tables {
                    t.write_csv(std::fs::File::create(dir.join(format!("importance_{}.csv", t.language)))?)?;
                }
                (run.encoder, run.profile, run.metrics)
            }
            _ => {
                let run = run_l0_pruning(&base.encoder, &corpus, &s, &self.cfg.mask)?;
                run.alphas.write_csv(std::fs::File::create(dir.join("alphas.csv"))?)?;
                write_rows(&dir.join("losses.csv"), &run.losses)?;
                (run.encoder, run.profile, run.metrics)
            }
        };
        enc.save(&dir.join(MODEL_FILE))?;
        profile.write(&dir.join(PROFILE_DIR))?;
        write_metrics(&dir.join("metrics.csv"), &metrics)?;
        let sizes: Vec<SizeRecord> = profile
            .gates
            .iter()
            .map(|(l, g)| {
                let sp = encoder_sparsity(g, &weights);
                SizeRecord { language: l.clone(), retained_size: 1.0 - sp, encoder_sparsity: sp }
            })
            .collect();
        write_rows(&dir.join("sizes.csv"), &sizes)?;
        let mean = sizes.iter().map(|r| r.encoder_sparsity).sum::<f64>() / sizes.len() as f64;
        let extra = serde_json::json!({ "mean_encoder_sparsity": mean });
        self.manifest("prune", Some(&s), Some(&enc.config), extra)?.write(&dir.join(MANIFEST))?;
        eprintln!("{}: mean encoder sparsity {mean:.4} -> {}", s.algorithm.as_str(), dir.display());
        Ok(())
    }

    pub(super) fn ds_train(&self, a: &DsArgs) -> Result<()> {
        let mut s = self.schedule(&self.cfg.ds, &a.train)?;
        if let Some(x) = &a.algo {
            s.algorithm = Algorithm::parse(x)?;
        }
        if let Some(x) = &a.setting {
            s.setting = Setting::parse(x)?;
        }
        if let Some(v) = a.lambda1 {
            s.lambda1 = v;
        }
        if !s.algorithm.is_ds() {
            return Err(Error::Config("ds-train runs ds-grad or ds-l0".into()));
        }
        s.validate()?;
        let corpus = self.corpus()?;
        let base = Stage::load(&self.run_dir, BASELINE)?;
        let run = run_ds_training(&base.encoder, &corpus, &s, &self.cfg.mask)?;
        let dir = self.run_dir.join(stage_name(&s));
        std::fs::create_dir_all(&dir)?;
        run.encoder.save(&dir.join(MODEL_FILE))?;
        run.ds.write_csv(std::fs::File::create(dir.join(DS_FILE))?)?;
        run.ds_init.write_csv(std::fs::File::create(dir.join("ds_init.csv"))?)?;
        write_metrics(&dir.join("metrics.csv"), &run.metrics)?;
        self.manifest("ds-train", Some(&s), Some(&run.encoder.config), serde_json::Value::Null)?
            .write(&dir.join(MANIFEST))?;
        eprintln!("DS model for {} grid sizes -> {}", s.grid.levels().len(), dir.display());
        Ok(())
    }

    pub(super) fn eval_probe(&self, a: &ProbeArgs) -> Result<()> {
        let name = a.model.clone().unwrap_or_else(|| BASELINE.to_string());
        let corpus = self.corpus()?;
        let stage = Stage::load(&self.run_dir, &name)?;
        let source = stage.gate_source(a.sparsity)?;
        let r = self.probe(&stage, source, &corpus)?;
        let file = match a.sparsity {
            Some(sp) => format!("probe_s{sp}.csv"),
            None => "probe.csv".to_string(),
        };
        write_probe(&stage.dir.join(&file), &r)?;
        let extra = serde_json::json!({ "mean_accuracy": r.mean, "sparsity": a.sparsity });
        self.manifest("eval-probe", None, Some(&stage.encoder.config), extra)?
            .write(&stage.dir.join("manifest_eval-probe.json"))?;
        eprintln!("{name}: mean probe accuracy {:.4}", r.mean);
        Ok(())
    }

    pub(super) fn sweep(&self, a: &SweepArgs) -> Result<()> {
        let name = a.model.clone().unwrap_or_else(|| stage_name(&self.cfg.ds));
        let levels = parse_grid(&a.grid)?;
        let corpus = self.corpus()?;
        let stage = Stage::load(&self.run_dir, &name)?;
        if stage.ds.is_none() {
            return Err(Error::Config(format!("stage {name} is not a DS model")));
        }
        let langs = corpus.language_ids();
        let weights = ComponentWeights::for_dims(stage.encoder.dims());
        let mut rows = Vec::with_capacity(levels.len());
        for &sp in &levels {
            let source = stage.gate_source(Some(sp))?;
            let gates = stage.gates(source, &langs)?;
            let r = self.probe(&stage, source, &corpus)?;
            let n = gates.len() as f64;
            let enc_sp = gates.iter().map(|(_, g)| encoder_sparsity(g, &weights)).sum::<f64>() / n;
            let params = gates
                .iter()
                .map(|(_, g)| Ok(count_params(&stage.encoder.config, g)?.total))
                .collect::<Result<Vec<_>>>()?;
            let speed = if a.no_bench {
                None
            } else {
                let rec = throughput_bench(&stage.encoder, std::slice::from_ref(&gates[0].1), &self.cfg.bench)?;
                Some(rec[0].sentences_per_sec)
            };
            eprintln!("sparsity {sp}: accuracy {:.4}, encoder sparsity {enc_sp:.4}", r.mean);
            rows.push(SweepRow {
                sparsity: sp,
                size: 1.0 - sp,
                encoder_sparsity: enc_sp,
                total_params: params.iter().sum::<usize>() / params.len(),
                accuracy: r.mean,
                sentences_per_sec: speed,
            });
        }
        write_rows(&stage.dir.join("sweep.csv"), &rows)?;
        let sizes: Vec<f64> = rows.iter().map(|r| r.size).collect();
        let acc: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
        let rho = spearman(&sizes, &acc).ok();
        let extra = serde_json::json!({ "grid": levels, "spearman_size_accuracy": rho });
        self.manifest("sweep", stage.manifest.schedule.as_ref(), Some(&stage.encoder.config), extra)?
            .write(&stage.dir.join("manifest_sweep.json"))?;
        if let Some(r) = rho {
            eprintln!("Spearman(size, accuracy) = {r:.4}");
        }
        Ok(())
    }

    pub(super) fn bench(&self, a: &BenchArgs) -> Result<()> {
        let name = a.model.clone().unwrap_or_else(|| BASELINE.to_string());
        let levels = parse_grid(&a.sparsities)?;
        let stage = Stage::load(&self.run_dir, &name)?;
        let mut cfg = BenchConfig { seed: self.cfg.seed, ..self.cfg.bench.clone() };
        if let Some(v) = a.reps {
            cfg.reps = v;
        }
        if let Some(v) = a.passes {
            cfg.passes = v;
        }
        if let Some(v) = a.batch_size {
            cfg.batch_size = v;
        }
        let dims = stage.encoder.dims();
        let gates: Vec<GateSet> = match (&stage.ds, &stage.profile) {
            (Some(ds), _) => {
                let lang = (!ds.is_shared()).then(|| ds.languages[0].as_str());
                levels.iter().map(|s| Ok(ds.subnetwork_at(1.0 - s, lang)?.binarize(0.5))).collect::<Result<_>>()?
            }
            (None, Some(p)) => vec![p.gates[0].1.clone()],
            (None, None) => {
                // no ranking on disk: nest subnetworks along a seeded random one
                let mut rng = rng_for(self.cfg.seed, "bench-ranking");
                let scores = (0..dims.n_gates()).map(|_| rng.gen::<f64>()).collect();
                let table = ImportanceTable::new(dims, scores, SHARED, 0)?;
                let ds = init_ds(&[table], &ComponentWeights::for_dims(dims), &SparsityGrid::default(), &Default::default())?;
                levels.iter().map(|s| Ok(ds.subnetwork_at(1.0 - s, None)?.binarize(0.5))).collect::<Result<_>>()?
            }
        };
        let mut records: Vec<ThroughputRecord> = throughput_bench(&stage.encoder, &gates, &cfg)?;
        if a.batch_doubling {
            for g in &gates {
                let [_, doubled] = batch_scaling(&stage.encoder, g, &cfg)?;
                records.push(doubled);
            }
        }
        for r in &records {
            eprintln!("sparsity {:.3}, batch {}: {:.1} sent/s", r.sparsity, r.batch_size, r.sentences_per_sec);
        }
        write_rows(&stage.dir.join("bench.csv"), &records)?;
        self.manifest("bench", None, Some(&stage.encoder.config), serde_json::to_value(&cfg)?)?
            .write(&stage.dir.join("manifest_bench.json"))?;
        Ok(())
    }

    pub(super) fn report(&self, a: &ReportArgs) -> Result<()> {
        std::fs::create_dir_all(&self.run_dir)?;
        let out = report_path(&self.run_dir, a.figure.as_str(), &self.cfg.run_id);
        if a.figure == Figure::SizeCurve && a.dry_run {
            let curve = size_curve_dry_run(&ModelConfig::xlmr_base(), &SparsityGrid::default(), self.cfg.seed)?;
            write_rows(&out, &curve.rows)?;
            return self.finish_report(a, &out, serde_json::json!({ "knee": curve.knee }));
        }
        let name = a.model.clone().ok_or_else(|| Error::Config("report needs --model <stage>".into()))?;
        let stage = Stage::load(&self.run_dir, &name)?;
        let languages: Vec<String> = match (&stage.profile, &stage.ds) {
            (Some(p), _) => p.gates.iter().map(|(l, _)| l.clone()).collect(),
            (None, Some(ds)) => ds.languages.clone(),
            (None, None) => vec![SHARED.to_string()],
        };
        // DS stages report at one sparsity if given, else across the whole grid
        let levels: Vec<Option<f64>> = match (&stage.ds, a.sparsity) {
            (Some(_), Some(s)) => vec![Some(s)],
            (Some(ds), None) => ds.grid.levels().iter().map(|&s| Some(s)).collect(),
            (None, _) => vec![None],
        };
        let weights = ComponentWeights::for_dims(stage.encoder.dims());
        let mut extra = serde_json::Value::Null;
        match a.figure {
            Figure::LayerProfile => {
                let mut rows = Vec::new();
                for &sp in &levels {
                    for (l, g) in stage.gates(stage.gate_source(sp)?, &languages)? {
                        rows.extend(layer_profile(&g)?.into_iter().map(|r| LanguageLayerRow {
                            sparsity: sp,
                            language: l.clone(),
                            layer: r.layer,
                            head_sparsity: r.head_sparsity,
                            hidden_sparsity: r.hidden_sparsity,
                        }));
                    }
                }
                write_rows(&out, &rows)?;
            }
            Figure::ComponentProfile => {
                let mut rows = Vec::new();
                for &sp in &levels {
                    for (l, g) in stage.gates(stage.gate_source(sp)?, &languages)? {
                        let c = component_profile(&g, &weights)?;
                        rows.push(LanguageComponentRow {
                            sparsity: sp,
                            language: l,
                            encoder_sparsity: c.encoder_sparsity,
                            total_sparsity: c.total_sparsity,
                            head: c.head,
                            hidden: c.hidden,
                            embed_rank: c.embed_rank,
                        });
                    }
                }
                write_rows(&out, &rows)?;
            }
            Figure::SizeCurve => {
                let ds = stage.ds.as_ref().ok_or_else(|| Error::Config("size-curve needs a DS stage or --dry-run".into()))?;
                let lang = (!ds.is_shared()).then(|| ds.languages[0].as_str());
                let curve = size_curve(&stage.encoder.config, ds, lang)?;
                write_rows(&out, &curve.rows)?;
                extra = serde_json::json!({ "knee": curve.knee });
            }
            Figure::Hamming => {
                let sp = match levels.as_slice() {
                    [one] => *one,
                    _ => return Err(Error::Config("hamming on a DS stage needs --sparsity".into())),
                };
                let m = hamming_matrix(&stage.gates(stage.gate_source(sp)?, &languages)?)?;
                m.write_csv(&out)?;
                extra = serde_json::json!({ "mean_distance": m.mean_offdiag() });
            }
            Figure::Corr => {
                let corpus = self.corpus()?;
                let file = match a.sparsity {
                    Some(sp) => format!("probe_s{sp}.csv"),
                    None => "probe.csv".to_string(),
                };
                let dense = read_probe(&self.run_dir.join(BASELINE).join("probe.csv"))?;
                let pruned = read_probe(&stage.dir.join(file))?;
                let losses = pruned
                    .iter()
                    .map(|(l, acc)| {
                        let base = dense.iter().find(|(d, _)| d == l).map(|(_, a)| *a);
                        base.map(|b| (l.clone(), b - acc))
                            .ok_or_else(|| Error::Run(format!("no dense probe accuracy for {l}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let sizes: Vec<(String, usize)> = corpus.specs.iter().map(|s| (s.id.clone(), s.size)).collect();
                let r = corr_accuracy_size(&losses, &sizes)?;
                write_rows(&out, &r.points)?;
                extra = serde_json::json!({ "pearson": r.pearson });
                eprintln!("Pearson(accuracy loss, log2 size) = {:.4}", r.pearson);
            }
            Figure::Throughput => {
                let src = stage.dir.join("bench.csv");
                if !src.exists() {
                    return Err(Error::Run(format!("{} is missing; run bench first", src.display())));
                }
                std::fs::copy(&src, &out)?;
            }
        }
        self.finish_report(a, &out, extra)
    }

    fn finish_report(&self, a: &ReportArgs, out: &Path, extra: serde_json::Value) -> Result<()> {
        let name = format!("manifest_report_{}.json", a.figure.as_str());
        self.manifest("report", None, None, extra)?.write(&self.run_dir.join(name))?;
        eprintln!("wrote {}", out.display());
        Ok(())
    }
}
