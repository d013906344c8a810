use super::{lr_at, Adam, Algorithm, LossParts, MetricRow, TrainSchedule};
use crate::corpus::{Corpus, MaskConfig, MlmBatch, MlmSampler};
use crate::dyn_sparse::{ds_gate_tape, init_ds, DsParams};
use crate::encoder::{
    encoder_sparsity, masked_lm_loss, ComponentKind, ComponentWeights, Dropout, Encoder, EncoderVars, GateSet,
    GateVars, ModelConfig,
};
use crate::error::{Error, Result};
use crate::grad_prune::{build_profile, importance_scores, ImportanceTable, PruningProfile, Setting, SHARED};
use crate::l0::{
    diversity_loss_tape, expected_size, expected_size_tape, l0_penalty_tape, sparsity_constraint_tape,
    uniform_noise, AlphaTable, PriorMatrix,
};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::{Gradients, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Smallest θ kept during joint DS training, so gates stay nondecreasing in t.
const MIN_THETA: f64 = 1e-6;

fn at_step(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => Error::Run(format!("training diverged at step {step}: non-finite value in {op}")),
        other => other,
    }
}

fn check_vocab(cfg: &ModelConfig, corpus: &Corpus) -> Result<()> {
    if cfg.vocab_size != corpus.vocab.len() {
        return Err(Error::Config(format!(
            "model vocab_size {} does not match corpus vocabulary of {}",
            cfg.vocab_size,
            corpus.vocab.len()
        )));
    }
    Ok(())
}

fn weight_optimizer(enc: &Encoder, sched: &TrainSchedule) -> Adam {
    let sizes: Vec<usize> = enc.named().iter().map(|(_, t)| t.numel()).collect();
    Adam::new(sched.adam, &sizes)
}

fn apply_weight_grads(enc: &mut Encoder, opt: &mut Adam, vars: &EncoderVars, grads: &mut Gradients, lr: f64) -> Result<()> {
    let gs = vars
        .all
        .iter()
        .map(|&v| grads.take(v).ok_or_else(|| Error::Contract("weight gradient missing".into())))
        .collect::<Result<Vec<Tensor>>>()?;
    let mut params: Vec<&mut [f64]> = enc.tensors_mut().into_iter().map(|t| t.data_mut()).collect();
    let g: Vec<&[f64]> = gs.iter().map(Tensor::data).collect();
    opt.update(&mut params, &g, lr)
}

fn dropout_for<'a>(cfg: &ModelConfig, rng: &'a mut ChaCha8Rng) -> Option<Dropout<'a>> {
    (cfg.dropout > 0.0).then(|| Dropout { rate: cfg.dropout, rng })
}

/// One MLM step on the weights with fixed (constant) gates.
#[allow(clippy::too_many_arguments)]
fn weight_step(
    enc: &mut Encoder,
    opt: &mut Adam,
    lr: f64,
    batch: &MlmBatch,
    gates: Option<&GateSet>,
    drop_rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = enc.register(&mut tape, true);
    let gv = gates.map(|g| GateVars::constant(&mut tape, g)).transpose()?;
    let cfg = enc.config.clone();
    let mut drop = dropout_for(&cfg, drop_rng);
    let loss = masked_lm_loss(&mut tape, &cfg, &vars, gv.as_ref(), &batch.inputs, &batch.masked, &batch.gold, drop.as_mut())
        .map_err(at_step(step))?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    apply_weight_grads(enc, opt, &vars, &mut grads, lr)?;
    Ok(value)
}

/// Dense MLM pre-training from a seeded initialization.
pub fn pretrain_baseline(
    cfg: &ModelConfig,
    corpus: &Corpus,
    sched: &TrainSchedule,
    mask: &MaskConfig,
) -> Result<(Encoder, Vec<MetricRow>)> {
    sched.validate()?;
    check_vocab(cfg, corpus)?;
    let mut enc = Encoder::init(cfg, &mut rng_for(sched.seed, "init"))?;
    let mut sampler = MlmSampler::new(corpus, mask, derive_seed(sched.seed, "pretrain-batches"))?;
    let mut drop_rng = rng_for(sched.seed, "pretrain-dropout");
    let mut opt = weight_optimizer(&enc, sched);
    let mut metrics = Vec::with_capacity(sched.steps);
    for step in 0..sched.steps {
        let batch = sampler.batch(None, sched.batch_size)?;
        let lr = lr_at(step, sched.steps, sched.learning_rate, sched.lr_warmup_fraction);
        let loss = weight_step(&mut enc, &mut opt, lr, &batch, None, &mut drop_rng, step)?;
        metrics.push(MetricRow { step, loss, l0: 0.0, diag: 0.0, sparsity: 0.0 });
    }
    Ok((enc, metrics))
}

/// Held-out scoring batches per language, drawn from their own stream.
pub fn scoring_batches(corpus: &Corpus, sched: &TrainSchedule, mask: &MaskConfig) -> Result<Vec<Vec<MlmBatch>>> {
    let mut sampler = MlmSampler::new(corpus, mask, derive_seed(sched.seed, "scoring-batches"))?;
    let n = sched.scoring_samples.div_ceil(sched.batch_size);
    (0..corpus.n_languages())
        .map(|l| (0..n).map(|_| sampler.batch(Some(l), sched.batch_size)).collect())
        .collect()
}

fn rankings(baseline: &Encoder, corpus: &Corpus, sched: &TrainSchedule, mask: &MaskConfig) -> Result<Vec<ImportanceTable>> {
    let per_lang = scoring_batches(corpus, sched, mask)?;
    match sched.setting {
        Setting::Shared => {
            let all: Vec<MlmBatch> = per_lang.into_iter().flatten().collect();
            Ok(vec![importance_scores(baseline, &all, SHARED)?])
        }
        Setting::NonShared => corpus
            .specs
            .iter()
            .zip(&per_lang)
            .map(|(s, b)| importance_scores(baseline, b, &s.id))
            .collect(),
    }
}

pub struct GradRun {
    pub encoder: Encoder,
    pub profile: PruningProfile,
    pub tables: Vec<ImportanceTable>,
    pub metrics: Vec<MetricRow>,
}

/// Score, threshold, freeze gates, then continue MLM training of the weights.
pub fn run_grad_pruning(baseline: &Encoder, corpus: &Corpus, sched: &TrainSchedule, mask: &MaskConfig) -> Result<GradRun> {
    sched.validate()?;
    check_vocab(&baseline.config, corpus)?;
    let weights = ComponentWeights::for_dims(baseline.dims());
    let per_lang = scoring_batches(corpus, sched, mask)?;
    let (profile, tables) =
        build_profile(baseline, &corpus.language_ids(), &per_lang, sched.setting, sched.target, &weights)?;
    let mut enc = baseline.clone();
    let mut sampler = MlmSampler::new(corpus, mask, derive_seed(sched.seed, "grad-batches"))?;
    let mut drop_rng = rng_for(sched.seed, "grad-dropout");
    let mut opt = weight_optimizer(&enc, sched);
    let lang_gates: Vec<&GateSet> = corpus
        .specs
        .iter()
        .map(|s| profile.for_language(&s.id))
        .collect::<Result<_>>()?;
    let sparsity: f64 =
        lang_gates.iter().map(|g| encoder_sparsity(g, &weights)).sum::<f64>() / lang_gates.len() as f64;
    let mut metrics = Vec::with_capacity(sched.steps);
    for step in 0..sched.steps {
        let (batch, gates) = match sched.setting {
            Setting::Shared => (sampler.batch(None, sched.batch_size)?, &profile.gates[0].1),
            Setting::NonShared => {
                let l = sampler.sample_language();
                (sampler.batch(Some(l), sched.batch_size)?, lang_gates[l])
            }
        };
        let lr = lr_at(step, sched.steps, sched.learning_rate, sched.lr_warmup_fraction);
        let loss = weight_step(&mut enc, &mut opt, lr, &batch, Some(gates), &mut drop_rng, step)?;
        metrics.push(MetricRow { step, loss, l0: 0.0, diag: 0.0, sparsity });
    }
    Ok(GradRun { encoder: enc, profile, tables, metrics })
}

pub struct L0Run {
    pub encoder: Encoder,
    pub profile: PruningProfile,
    pub alphas: AlphaTable,
    pub metrics: Vec<MetricRow>,
    pub losses: Vec<LossParts>,
    /// retained encoder size of each finalized gate set
    pub sizes: Vec<(String, f64)>,
}

fn encoder_weights(dims: crate::encoder::GateDims, w: &ComponentWeights) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let flat = w.flat(dims);
    let counted: Vec<bool> = dims.components().map(|id| id.kind != ComponentKind::EmbedRank).collect();
    let cw = flat.iter().zip(&counted).map(|(&x, &c)| if c { x } else { 0.0 }).collect();
    (flat, cw, counted)
}

fn add_scaled(tape: &mut Tape, acc: Var, x: Var, c: f64) -> Result<Var> {
    let s = tape.scale(x, c)?;
    tape.add(acc, s)
}

/// Hard-concrete gate training: α-only warmup, then joint updates; gates
/// are hardened at the end by the deterministic zero threshold.
pub fn run_l0_pruning(baseline: &Encoder, corpus: &Corpus, sched: &TrainSchedule, mask: &MaskConfig) -> Result<L0Run> {
    sched.validate()?;
    check_vocab(&baseline.config, corpus)?;
    let improved = match sched.algorithm {
        Algorithm::L0Vanilla => false,
        Algorithm::L0Improved => true,
        other => return Err(Error::Config(format!("run_l0_pruning cannot run {other:?}"))),
    };
    if improved && (sched.setting != Setting::NonShared || corpus.n_languages() < 2) {
        return Err(Error::Config(
            "improved L0 needs the non-shared setting and at least two languages (the diversity term compares languages)"
                .into(),
        ));
    }
    let hc = sched.hard_concrete;
    let dims = baseline.dims();
    let n = dims.n_gates();
    let weights = ComponentWeights::for_dims(dims);
    let (w, cw, counted) = encoder_weights(dims, &weights);
    let w_total: f64 = w.iter().sum();
    let row_scale: Vec<f64> = w.iter().map(|x| (x / w_total).sqrt()).collect();
    let langs: Vec<String> = match sched.setting {
        Setting::Shared => vec![SHARED.to_string()],
        Setting::NonShared => corpus.language_ids(),
    };
    let prior = PriorMatrix::from_specs(&corpus.specs)?;
    let mut alphas = AlphaTable::init(dims, &langs, sched.alpha_init_std, &mut rng_for(sched.seed, "alpha-init"))?;
    let mut alpha_opt = Adam::new(sched.adam, &vec![n; langs.len()]);
    let mut enc = baseline.clone();
    let mut opt = weight_optimizer(&enc, sched);
    let mut sampler = MlmSampler::new(corpus, mask, derive_seed(sched.seed, "l0-batches"))?;
    let mut drop_rng = rng_for(sched.seed, "l0-dropout");
    let noise_seed = derive_seed(sched.seed, "l0-noise");
    let warm = sched.alpha_warmup_steps();
    let mut metrics = Vec::with_capacity(sched.steps);
    let mut losses = Vec::with_capacity(sched.steps);
    for step in 0..sched.steps {
        let (l, batch) = match sched.setting {
            Setting::Shared => (0, sampler.batch(None, sched.batch_size)?),
            Setting::NonShared => {
                let l = sampler.sample_language();
                (l, sampler.batch(Some(l), sched.batch_size)?)
            }
        };
        let train_weights = step >= warm;
        let mut tape = Tape::new();
        let vars = enc.register(&mut tape, train_weights);
        let avars: Vec<Var> = alphas.alphas.iter().map(|a| tape.param(Tensor::vector(a.clone()))).collect();
        let u = uniform_noise(noise_seed, step as u64, l as u64, n);
        let g = hc.gate_tape(&mut tape, avars[l], Some(&u)).map_err(at_step(step))?;
        let gv = GateVars::from_flat(&mut tape, g, dims)?;
        let cfg = enc.config.clone();
        let mut drop = dropout_for(&cfg, &mut drop_rng);
        let mlm = masked_lm_loss(&mut tape, &cfg, &vars, Some(&gv), &batch.inputs, &batch.masked, &batch.gold, drop.as_mut())
            .map_err(at_step(step))?;
        let l0 = if improved {
            let sizes = avars
                .iter()
                .map(|&a| expected_size_tape(&mut tape, &hc, a, &cw))
                .collect::<Result<Vec<_>>>()?;
            sparsity_constraint_tape(&mut tape, &sizes, sched.target)?
        } else {
            let mut acc = l0_penalty_tape(&mut tape, &hc, avars[0], &w)?;
            for &a in &avars[1..] {
                let p = l0_penalty_tape(&mut tape, &hc, a, &w)?;
                acc = tape.add(acc, p)?;
            }
            acc
        };
        let diag = if improved {
            let scale = tape.constant(Tensor::vector(row_scale.clone()));
            let mut rows = Vec::with_capacity(avars.len());
            for &a in &avars {
                let p = hc.l0_prob_tape(&mut tape, a)?;
                let r = tape.mul(p, scale)?;
                rows.push(tape.reshape(r, &[1, n])?);
            }
            let gbar = tape.concat(&rows, 0)?;
            Some(diversity_loss_tape(&mut tape, gbar, &prior)?)
        } else {
            None
        };
        let mut total = add_scaled(&mut tape, mlm, l0, sched.lambda1)?;
        if let Some(d) = diag {
            total = add_scaled(&mut tape, total, d, sched.lambda2)?;
        }
        let parts = LossParts {
            mlm: tape.value(mlm).item(),
            l0: tape.value(l0).item(),
            diag: diag.map(|d| tape.value(d).item()).unwrap_or(0.0),
            total: tape.value(total).item(),
        };
        if !parts.total.is_finite() {
            return Err(Error::Run(format!("training diverged at step {step}")));
        }
        let mut grads = tape.backward(total)?;
        {
            let ga: Vec<Tensor> = avars.iter().map(|&a| grads.take(a).expect("alpha grad")).collect();
            let mut params: Vec<&mut [f64]> = alphas.alphas.iter_mut().map(|a| a.as_mut_slice()).collect();
            let g: Vec<&[f64]> = ga.iter().map(Tensor::data).collect();
            alpha_opt.update(&mut params, &g, sched.alpha_learning_rate)?;
        }
        if train_weights {
            let lr = lr_at(step - warm, sched.steps - warm, sched.learning_rate, sched.lr_warmup_fraction);
            apply_weight_grads(&mut enc, &mut opt, &vars, &mut grads, lr)?;
        }
        let mean_size =
            alphas.alphas.iter().map(|a| expected_size(&hc, a, &w, &counted)).sum::<f64>() / langs.len() as f64;
        metrics.push(MetricRow { step, loss: parts.total, l0: parts.l0, diag: parts.diag, sparsity: 1.0 - mean_size });
        losses.push(parts);
    }
    let hard = alphas.finalize(&hc)?;
    let sizes = hard.iter().map(|(l, g)| (l.clone(), 1.0 - encoder_sparsity(g, &weights))).collect();
    let profile = PruningProfile::new(sched.setting, sched.target, hard)?;
    Ok(L0Run { encoder: enc, profile, alphas, metrics, losses, sizes })
}

pub struct DsRun {
    pub encoder: Encoder,
    pub ds: DsParams,
    /// parameters right after closed-form initialization
    pub ds_init: DsParams,
    pub metrics: Vec<MetricRow>,
}

/// Train one model for every grid size: each step samples a size `t` and
/// trains the subnetwork `f(α + tθ)` selects.
pub fn run_ds_training(baseline: &Encoder, corpus: &Corpus, sched: &TrainSchedule, mask: &MaskConfig) -> Result<DsRun> {
    sched.validate()?;
    check_vocab(&baseline.config, corpus)?;
    let joint = match sched.algorithm {
        Algorithm::DsGrad => false,
        Algorithm::DsL0 => true,
        other => return Err(Error::Config(format!("run_ds_training cannot run {other:?}"))),
    };
    let hc = sched.hard_concrete;
    let dims = baseline.dims();
    let n = dims.n_gates();
    let weights = ComponentWeights::for_dims(dims);
    let (_, cw, _) = encoder_weights(dims, &weights);
    let tables = rankings(baseline, corpus, sched, mask)?;
    let ds_init = init_ds(&tables, &weights, &sched.grid, &hc)?;
    let mut ds = ds_init.clone();
    let sizes: Vec<f64> = sched.grid.sizes().into_iter().filter(|&s| s > 0.0).collect();
    let mut enc = baseline.clone();
    let mut opt = weight_optimizer(&enc, sched);
    let mut gate_opts: Vec<Adam> = ds.languages.iter().map(|_| Adam::new(sched.adam, &[n, n])).collect();
    let mut sampler = MlmSampler::new(corpus, mask, derive_seed(sched.seed, "ds-batches"))?;
    let mut t_rng = rng_for(sched.seed, "ds-sizes");
    let mut drop_rng = rng_for(sched.seed, "ds-dropout");
    let noise_seed = derive_seed(sched.seed, "ds-noise");
    let warm = if joint { sched.alpha_warmup_steps() } else { 0 };
    let mut metrics = Vec::with_capacity(sched.steps);
    for step in 0..sched.steps {
        let t = sizes[t_rng.gen_range(0..sizes.len())];
        let (lang, batch) = match sched.setting {
            Setting::Shared => (None, sampler.batch(None, sched.batch_size)?),
            Setting::NonShared => {
                let l = sampler.sample_language();
                (Some(corpus.specs[l].id.as_str()), sampler.batch(Some(l), sched.batch_size)?)
            }
        };
        let ti = ds.table_index(lang)?;
        if !joint {
            let gates = ds.subnetwork_at(t, lang)?;
            let lr = lr_at(step, sched.steps, sched.learning_rate, sched.lr_warmup_fraction);
            let loss = weight_step(&mut enc, &mut opt, lr, &batch, Some(&gates), &mut drop_rng, step)?;
            let sparsity = encoder_sparsity(&gates, &weights);
            metrics.push(MetricRow { step, loss, l0: 0.0, diag: 0.0, sparsity });
            continue;
        }
        let train_weights = step >= warm;
        let mut tape = Tape::new();
        let vars = enc.register(&mut tape, train_weights);
        let a = tape.param(Tensor::vector(ds.alpha[ti].clone()));
        let th = tape.param(Tensor::vector(ds.theta[ti].clone()));
        let u = uniform_noise(noise_seed, step as u64, ti as u64, n);
        let g = ds_gate_tape(&mut tape, &hc, a, th, t, Some(&u)).map_err(at_step(step))?;
        let gv = GateVars::from_flat(&mut tape, g, dims)?;
        let cfg = enc.config.clone();
        let mut drop = dropout_for(&cfg, &mut drop_rng);
        let mlm = masked_lm_loss(&mut tape, &cfg, &vars, Some(&gv), &batch.inputs, &batch.masked, &batch.gold, drop.as_mut())
            .map_err(at_step(step))?;
        let tt = tape.scale(th, t)?;
        let pre = tape.add(a, tt)?;
        let size = expected_size_tape(&mut tape, &hc, pre, &cw)?;
        let l0 = sparsity_constraint_tape(&mut tape, &[size], t)?;
        let total = add_scaled(&mut tape, mlm, l0, sched.lambda1)?;
        let loss = tape.value(total).item();
        let l0v = tape.value(l0).item();
        let mut grads = tape.backward(total)?;
        {
            let ga = grads.take(a).expect("alpha grad");
            let gt = grads.take(th).expect("theta grad");
            let (alpha, theta) = (&mut ds.alpha[ti], &mut ds.theta[ti]);
            gate_opts[ti].update(&mut [alpha.as_mut_slice(), theta.as_mut_slice()], &[ga.data(), gt.data()], sched.alpha_learning_rate)?;
        }
        for x in ds.theta[ti].iter_mut() {
            *x = x.max(MIN_THETA);
        }
        if train_weights {
            let lr = lr_at(step - warm, sched.steps - warm, sched.learning_rate, sched.lr_warmup_fraction);
            apply_weight_grads(&mut enc, &mut opt, &vars, &mut grads, lr)?;
        }
        metrics.push(MetricRow { step, loss, l0: l0v, diag: 0.0, sparsity: 1.0 - t });
    }
    Ok(DsRun { encoder: enc, ds, ds_init, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{default_specs, gen_corpus, CorpusConfig};
    use crate::rng::rng_for;

    fn corpus() -> Corpus {
        let cc = CorpusConfig::default();
        gen_corpus(&default_specs(&cc, 300, 900, 4).unwrap(), &cc, 4).unwrap()
    }

    fn tiny(corpus: &Corpus) -> ModelConfig {
        ModelConfig { n_layers: 2, n_heads: 2, model_dim: 8, ffn_dim: 12, vocab_size: corpus.vocab.len(), max_seq_len: 16, dropout: 0.0 }
    }

    fn sched(steps: usize) -> TrainSchedule {
        TrainSchedule { steps, batch_size: 4, scoring_samples: 8, ..Default::default() }
    }

    fn same_weights(a: &Encoder, b: &Encoder) -> bool {
        a.named().iter().zip(b.named()).all(|((_, x), (_, y))| x.data() == y.data())
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let c = corpus();
        let cfg = tiny(&c);
        let (enc, m) = pretrain_baseline(&cfg, &c, &sched(0), &MaskConfig::default()).unwrap();
        let init = Encoder::init(&cfg, &mut rng_for(0, "init")).unwrap();
        assert!(m.is_empty());
        assert!(same_weights(&enc, &init));
    }

    #[test]
    fn pretraining_is_reproducible_and_moves_weights() {
        let c = corpus();
        let cfg = tiny(&c);
        let (a, ma) = pretrain_baseline(&cfg, &c, &sched(6), &MaskConfig::default()).unwrap();
        let (b, mb) = pretrain_baseline(&cfg, &c, &sched(6), &MaskConfig::default()).unwrap();
        assert!(same_weights(&a, &b));
        assert_eq!(ma, mb);
        let init = Encoder::init(&cfg, &mut rng_for(0, "init")).unwrap();
        assert!(!same_weights(&a, &init));
    }

    #[test]
    fn vocab_mismatch_is_a_config_error() {
        let c = corpus();
        let cfg = ModelConfig { vocab_size: 5, ..tiny(&c) };
        assert!(matches!(pretrain_baseline(&cfg, &c, &sched(1), &MaskConfig::default()), Err(Error::Config(_))));
    }

    /// Every weight slice owned by a gate that is off must be bitwise unchanged.
    fn assert_pruned_untouched(before: &Encoder, after: &Encoder, gates: &GateSet) {
        let d = before.config.model_dim;
        let dh = before.config.head_dim();
        let f = before.config.ffn_dim;
        for (l, (lb, la)) in before.layers.iter().zip(&after.layers).enumerate() {
            for (h, &g) in gates.head_gates(l).iter().enumerate() {
                if g != 0.0 {
                    continue;
                }
                for c in h * dh..(h + 1) * dh {
                    for r in 0..d {
                        for (wb, wa) in [(&lb.wq, &la.wq), (&lb.wk, &la.wk), (&lb.wv, &la.wv)] {
                            assert_eq!(wb.data()[r * d + c], wa.data()[r * d + c]);
                        }
                        assert_eq!(lb.wo.data()[c * d + r], la.wo.data()[c * d + r]);
                    }
                    for (bb, ba) in [(&lb.bq, &la.bq), (&lb.bk, &la.bk), (&lb.bv, &la.bv)] {
                        assert_eq!(bb.data()[c], ba.data()[c]);
                    }
                }
            }
            for (j, &g) in gates.hidden_gates(l).iter().enumerate() {
                if g != 0.0 {
                    continue;
                }
                for r in 0..d {
                    assert_eq!(lb.w1.data()[r * f + j], la.w1.data()[r * f + j]);
                    assert_eq!(lb.w2.data()[j * d + r], la.w2.data()[j * d + r]);
                }
                assert_eq!(lb.b1.data()[j], la.b1.data()[j]);
            }
        }
        for (k, &g) in gates.embed_gates().iter().enumerate() {
            if g != 0.0 {
                continue;
            }
            for r in 0..before.tokens.rows() {
                assert_eq!(before.tokens.data()[r * d + k], after.tokens.data()[r * d + k]);
            }
            assert_eq!(before.proj.row(k), after.proj.row(k));
        }
    }

    #[test]
    fn grad_pruning_freezes_gates_and_pruned_weights() {
        let c = corpus();
        let cfg = tiny(&c);
        let mask = MaskConfig::default();
        let (base, _) = pretrain_baseline(&cfg, &c, &sched(3), &mask).unwrap();
        let s = TrainSchedule { target: 0.5, setting: Setting::NonShared, ..sched(5) };
        let run = run_grad_pruning(&base, &c, &s, &mask).unwrap();
        assert_eq!(run.profile.gates.len(), c.n_languages());
        assert!(!same_weights(&base, &run.encoder));
        // a weight is untouched if it is pruned in every language's subnetwork
        let dims = base.dims();
        let mut union = vec![false; dims.n_gates()];
        for (_, g) in &run.profile.gates {
            for (u, &v) in union.iter_mut().zip(g.values()) {
                *u |= v == 1.0;
            }
        }
        let off_everywhere = GateSet::from_mask(dims, &union).unwrap();
        assert_pruned_untouched(&base, &run.encoder, &off_everywhere);
        let again = run_grad_pruning(&base, &c, &s, &mask).unwrap();
        assert_eq!(run.profile, again.profile);
    }

    #[test]
    fn shared_grad_pruning_at_full_size_keeps_everything() {
        let c = corpus();
        let cfg = tiny(&c);
        let mask = MaskConfig::default();
        let (base, _) = pretrain_baseline(&cfg, &c, &sched(2), &mask).unwrap();
        let run = run_grad_pruning(&base, &c, &TrainSchedule { target: 1.0, ..sched(2) }, &mask).unwrap();
        assert_eq!(run.profile.gates[0].1, GateSet::ones(base.dims()));
    }

    #[test]
    fn l0_losses_compose_exactly() {
        let c = corpus();
        let cfg = tiny(&c);
        let mask = MaskConfig::default();
        let (base, _) = pretrain_baseline(&cfg, &c, &sched(2), &mask).unwrap();
        let s = TrainSchedule {
            algorithm: Algorithm::L0Improved,
            setting: Setting::NonShared,
            lambda1: 8.0,
            lambda2: 1.0,
            ..sched(6)
        };
        let run = run_l0_pruning(&base, &c, &s, &mask).unwrap();
        assert_eq!(run.losses.len(), 6);
        for p in &run.losses {
            assert!((p.total - (p.mlm + 8.0 * p.l0 + 1.0 * p.diag)).abs() < 1e-12, "{p:?}");
            assert!(p.diag > 0.0);
        }
        assert_eq!(run.sizes.len(), c.n_languages());
        // α-only warmup leaves the weights alone
        let warm = TrainSchedule { alpha_warmup_fraction: 0.5, ..s.clone() };
        let short = TrainSchedule { steps: 3, alpha_warmup_fraction: 0.9, ..warm };
        let run = run_l0_pruning(&base, &c, &short, &mask).unwrap();
        assert!(same_weights(&base, &run.encoder));
    }

    #[test]
    fn improved_l0_needs_per_language_gates() {
        let c = corpus();
        let cfg = tiny(&c);
        let base = Encoder::init(&cfg, &mut rng_for(0, "x")).unwrap();
        let s = TrainSchedule { algorithm: Algorithm::L0Improved, setting: Setting::Shared, ..sched(1) };
        assert!(matches!(run_l0_pruning(&base, &c, &s, &MaskConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn vanilla_l0_has_no_diversity_term() {
        let c = corpus();
        let cfg = tiny(&c);
        let base = Encoder::init(&cfg, &mut rng_for(0, "x")).unwrap();
        let s = TrainSchedule { algorithm: Algorithm::L0Vanilla, lambda1: 0.5, ..sched(3) };
        let run = run_l0_pruning(&base, &c, &s, &MaskConfig::default()).unwrap();
        for p in &run.losses {
            assert_eq!(p.diag, 0.0);
            assert!((p.total - (p.mlm + 0.5 * p.l0)).abs() < 1e-12);
        }
    }

    #[test]
    fn ds_grad_leaves_gate_parameters_bitwise_unchanged() {
        let c = corpus();
        let cfg = tiny(&c);
        let mask = MaskConfig::default();
        let (base, _) = pretrain_baseline(&cfg, &c, &sched(2), &mask).unwrap();
        let s = TrainSchedule { algorithm: Algorithm::DsGrad, ..sched(5) };
        let run = run_ds_training(&base, &c, &s, &mask).unwrap();
        assert_eq!(run.ds, run.ds_init);
        assert!(!same_weights(&base, &run.encoder));
    }

    #[test]
    fn ds_l0_moves_gate_parameters_and_keeps_theta_positive() {
        let c = corpus();
        let cfg = tiny(&c);
        let mask = MaskConfig::default();
        let (base, _) = pretrain_baseline(&cfg, &c, &sched(2), &mask).unwrap();
        let s = TrainSchedule { algorithm: Algorithm::DsL0, lambda1: 128.0, ..sched(4) };
        let run = run_ds_training(&base, &c, &s, &mask).unwrap();
        assert_ne!(run.ds.alpha, run.ds_init.alpha);
        assert!(run.ds.theta.iter().flatten().all(|&t| t >= MIN_THETA));
    }
}
