//! Shared helpers for the integration and acceptance targets.
#![allow(dead_code)]

use polyprune::corpus::{default_specs, gen_corpus, Corpus, CorpusConfig, MaskConfig};
use polyprune::dyn_sparse::ds_gate_tape;
use polyprune::encoder::{masked_lm_loss, Encoder, GateDims, GateSet, GateVars, ModelConfig};
use polyprune::l0::{diversity_loss_tape, expected_size, expected_size_tape, sparsity_constraint_tape, HardConcrete, PriorMatrix};
use polyprune::rng::rng_for;
use polyprune::tensor::{Tape, Tensor, Var};
use polyprune::trainer::{pretrain_baseline, TrainSchedule};
use polyprune::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::sync::OnceLock;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, 1e-4)`. The floor keeps gradients that are zero
/// up to rounding (≈1e-10 here) from being judged on their noise.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * normal(rng)).collect()).unwrap()
}

/// Numbers drawn until none lies within `margin` of a kink.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64, kinks: &[f64], margin: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let x: f64 = scale * normal(rng);
            if kinks.iter().all(|k| (x - k).abs() > margin) {
                break x;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn weighted_sum(tape: &mut Tape, out: Var, w: &Tensor) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let p = tape.mul(out, wv)?;
    tape.sum(p)
}

/// Compare reverse-mode gradients of `Σ w ⊙ build(inputs)` with central
/// differences for every input entry. Returns (max relative error, entries).
pub fn check_case(inputs: &[Tensor], build: &Build, rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let w = randn(rng, tape.shape(out), 1.0);
    let loss = weighted_sum(&mut tape, out, &w)?;
    let grads = tape.backward(loss)?;
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
        let o = build(&mut t, &vs)?;
        let l = weighted_sum(&mut t, o, &w)?;
        Ok(t.value(l).item())
    };
    let mut worst = 0.0f64;
    let mut n = 0;
    for (k, x) in inputs.iter().enumerate() {
        for i in 0..x.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            let analytic = grads.get(vars[k]).map(|g| g.data()[i]).unwrap_or(0.0);
            worst = worst.max(rel_err(analytic, numeric));
            n += 1;
        }
    }
    Ok((worst, n))
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub op: &'static str,
    pub cases: usize,
    pub entries: usize,
    pub max_rel_err: f64,
}

type Gen = fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Build);

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=4)
}

fn binary_cases() -> Vec<(&'static str, Gen)> {
    fn shapes(rng: &mut ChaCha8Rng, kind: usize) -> (Vec<usize>, Vec<usize>) {
        let (r, c) = (dim(rng), dim(rng));
        match kind {
            0 => (vec![r, c], vec![r, c]),
            1 => (vec![r, c], vec![c]),
            _ => (vec![r, c], vec![1]),
        }
    }
    macro_rules! bin {
        ($name:literal, $op:ident, $kind:expr) => {
            ($name, |rng: &mut ChaCha8Rng| {
                let (sa, sb) = shapes(rng, $kind);
                let ins = vec![randn(rng, &sa, 1.0), randn(rng, &sb, 1.0)];
                (ins, Box::new(|t: &mut Tape, v: &[Var]| t.$op(v[0], v[1])) as Build)
            })
        };
    }
    vec![
        bin!("add", add, 0),
        bin!("add_row", add, 1),
        bin!("add_scalar_tensor", add, 2),
        bin!("sub", sub, 0),
        bin!("sub_row", sub, 1),
        bin!("sub_scalar_tensor", sub, 2),
        bin!("mul", mul, 0),
        bin!("mul_row", mul, 1),
        bin!("mul_scalar_tensor", mul, 2),
    ]
}

/// Every tape primitive plus the composite gate and loss chains.
pub fn op_generators() -> Vec<(&'static str, Gen)> {
    let mut v: Vec<(&'static str, Gen)> = vec![
        ("matmul", |rng| {
            let (m, k, n) = (dim(rng), dim(rng), dim(rng));
            (vec![randn(rng, &[m, k], 1.0), randn(rng, &[k, n], 1.0)], Box::new(|t, v| t.matmul(v[0], v[1])))
        }),
        ("matmul_nt", |rng| {
            let (m, k, n) = (dim(rng), dim(rng), dim(rng));
            (vec![randn(rng, &[m, k], 1.0), randn(rng, &[n, k], 1.0)], Box::new(|t, v| t.matmul_nt(v[0], v[1])))
        }),
        ("scale", |rng| {
            let c: f64 = rng.gen_range(-3.0..3.0);
            let s = [dim(rng), dim(rng)];
            (vec![randn(rng, &s, 1.0)], Box::new(move |t, v| t.scale(v[0], c)))
        }),
        ("add_scalar", |rng| {
            let c: f64 = rng.gen_range(-3.0..3.0);
            let s = [dim(rng), dim(rng)];
            (vec![randn(rng, &s, 1.0)], Box::new(move |t, v| t.add_scalar(v[0], c)))
        }),
        ("gelu", |rng| {
            let s = [dim(rng), dim(rng)];
            (vec![randn(rng, &s, 2.0)], Box::new(|t, v| t.gelu(v[0])))
        }),
        ("sigmoid", |rng| {
            let s = [dim(rng), dim(rng)];
            (vec![randn(rng, &s, 3.0)], Box::new(|t, v| t.sigmoid(v[0])))
        }),
        ("abs", |rng| {
            let s = [dim(rng), dim(rng)];
            (vec![away_from(rng, &s, 1.0, &[0.0], 1e-3)], Box::new(|t, v| t.abs(v[0])))
        }),
        ("log", |rng| {
            let n = dim(rng) * dim(rng);
            let data = (0..n).map(|_| rng.gen_range(0.1..3.0)).collect();
            (vec![Tensor::vector(data)], Box::new(|t, v| t.log(v[0])))
        }),
        ("clamp", |rng| {
            let s = [dim(rng), dim(rng)];
            (vec![away_from(rng, &s, 1.0, &[-0.5, 0.7], 1e-3)], Box::new(|t, v| t.clamp(v[0], -0.5, 0.7)))
        }),
        ("softmax", |rng| {
            let s = [dim(rng), dim(rng) + 1];
            (vec![randn(rng, &s, 2.0)], Box::new(|t, v| t.softmax(v[0])))
        }),
        ("log_softmax", |rng| {
            let s = [dim(rng), dim(rng) + 1];
            (vec![randn(rng, &s, 2.0)], Box::new(|t, v| t.log_softmax(v[0])))
        }),
        ("layer_norm", |rng| {
            let (r, c) = (dim(rng), dim(rng) + 1);
            let ins = vec![randn(rng, &[r, c], 1.5), randn(rng, &[c], 1.0), randn(rng, &[c], 1.0)];
            (ins, Box::new(|t, v| t.layer_norm(v[0], v[1], v[2])))
        }),
        ("gather_rows", |rng| {
            let (r, c) = (dim(rng), dim(rng));
            let ids: Vec<usize> = (0..dim(rng) + 1).map(|_| rng.gen_range(0..r)).collect();
            (vec![randn(rng, &[r, c], 1.0)], Box::new(move |t, v| t.gather_rows(v[0], &ids)))
        }),
        ("select", |rng| {
            let (r, c) = (dim(rng), dim(rng));
            let idx: Vec<(usize, usize)> = (0..dim(rng) + 1).map(|_| (rng.gen_range(0..r), rng.gen_range(0..c))).collect();
            (vec![randn(rng, &[r, c], 1.0)], Box::new(move |t, v| t.select(v[0], &idx)))
        }),
        ("sum", |rng| {
            let s = [dim(rng), dim(rng)];
            (vec![randn(rng, &s, 1.0)], Box::new(|t, v| t.sum(v[0])))
        }),
        ("mean", |rng| {
            let s = [dim(rng), dim(rng)];
            (vec![randn(rng, &s, 1.0)], Box::new(|t, v| t.mean(v[0])))
        }),
        ("concat_rows", |rng| {
            let (a, b, c) = (dim(rng), dim(rng), dim(rng));
            let ins = vec![randn(rng, &[a, c], 1.0), randn(rng, &[b, c], 1.0)];
            (ins, Box::new(|t, v| t.concat(v, 0)))
        }),
        ("concat_cols", |rng| {
            let (r, a, b) = (dim(rng), dim(rng), dim(rng));
            let ins = vec![randn(rng, &[r, a], 1.0), randn(rng, &[r, b], 1.0), randn(rng, &[r, 1], 1.0)];
            (ins, Box::new(|t, v| t.concat(v, 1)))
        }),
        ("concat_vectors", |rng| {
            let (a, b) = (dim(rng), dim(rng));
            let ins = vec![randn(rng, &[a], 1.0), randn(rng, &[b], 1.0)];
            (ins, Box::new(|t, v| t.concat(v, 0)))
        }),
        ("narrow", |rng| {
            let (r, c) = (dim(rng) + 1, dim(rng) + 1);
            let axis = rng.gen_range(0..2);
            let n = if axis == 0 { r } else { c };
            let start = rng.gen_range(0..n);
            let len = rng.gen_range(1..=n - start);
            (vec![randn(rng, &[r, c], 1.0)], Box::new(move |t, v| t.narrow(v[0], axis, start, len)))
        }),
        ("reshape", |rng| {
            let (r, c) = (dim(rng), dim(rng));
            (vec![randn(rng, &[r, c], 1.0)], Box::new(move |t, v| t.reshape(v[0], &[c * r])))
        }),
        ("transpose", |rng| {
            let s = [dim(rng), dim(rng)];
            (vec![randn(rng, &s, 1.0)], Box::new(|t, v| t.transpose(v[0])))
        }),
        ("hard_concrete_gate", |rng| {
            let hc = HardConcrete::default();
            let n = dim(rng) * 2;
            // keep the stretched sample clear of the clamp corners at 0 and 1
            let (mut alpha, mut u) = (Vec::new(), Vec::new());
            while alpha.len() < n {
                let a: f64 = 2.0 * normal(rng);
                let x: f64 = rng.gen_range(0.01..0.99);
                let s = 1.0 / (1.0 + (-((x / (1.0 - x)).ln() + a) / hc.beta).exp());
                let g = s * (hc.r - hc.l) + hc.l;
                if g.abs() > 1e-3 && (g - 1.0).abs() > 1e-3 {
                    alpha.push(a);
                    u.push(x);
                }
            }
            (vec![Tensor::vector(alpha)], Box::new(move |t, v| hc.gate_tape(t, v[0], Some(&u))))
        }),
        ("l0_probability", |rng| {
            let hc = HardConcrete::default();
            let n = dim(rng) * 2;
            (vec![randn(rng, &[n], 2.0)], Box::new(move |t, v| hc.l0_prob_tape(t, v[0])))
        }),
        ("expected_size_constraint", |rng| {
            let hc = HardConcrete::default();
            let n = dim(rng) * 2;
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..4.0)).collect();
            let target = rng.gen_range(0.2..0.8);
            // the constraint has a kink where a size equals the target
            let ins = loop {
                let ins = vec![randn(rng, &[n], 2.0), randn(rng, &[n], 2.0)];
                let clear = ins.iter().all(|a| (expected_size(&hc, a.data(), &w, &vec![true; n]) - target).abs() > 1e-3);
                if clear {
                    break ins;
                }
            };
            let build: Build = Box::new(move |t, v| {
                let a = expected_size_tape(t, &hc, v[0], &w)?;
                let b = expected_size_tape(t, &hc, v[1], &w)?;
                sparsity_constraint_tape(t, &[a, b], target)
            });
            (ins, build)
        }),
        ("diversity_loss", |rng| {
            let (l, n) = (dim(rng) + 1, dim(rng) + 1);
            let langs: Vec<String> = (0..l).map(|i| format!("l{i}")).collect();
            let fams: Vec<String> = (0..l).map(|_| format!("f{}", rng.gen_range(0..2))).collect();
            let prior = PriorMatrix::from_families(&langs, &fams).unwrap();
            // gate-like rows in (0,1) keep the gram entries away from the |·| kink
            let data = (0..l * n).map(|_| rng.gen_range(0.05..1.0)).collect();
            (vec![Tensor::matrix(l, n, data).unwrap()], Box::new(move |t, v| diversity_loss_tape(t, v[0], &prior)))
        }),
        ("ds_gate", |rng| {
            let hc = HardConcrete::default();
            let n = dim(rng) * 2;
            let size = rng.gen_range(0.05..1.0);
            let (mut a, mut th, mut u) = (Vec::new(), Vec::new(), Vec::new());
            while a.len() < n {
                let x: f64 = 2.0 * normal(rng);
                let y: f64 = rng.gen_range(0.1..3.0);
                let z: f64 = rng.gen_range(0.01..0.99);
                let s = 1.0 / (1.0 + (-((z / (1.0 - z)).ln() + x + size * y) / hc.beta).exp());
                let g = s * (hc.r - hc.l) + hc.l;
                if g.abs() > 1e-3 && (g - 1.0).abs() > 1e-3 {
                    a.push(x);
                    th.push(y);
                    u.push(z);
                }
            }
            let ins = vec![Tensor::vector(a), Tensor::vector(th)];
            (ins, Box::new(move |t, v| ds_gate_tape(t, &hc, v[0], v[1], size, Some(&u))))
        }),
    ];
    v.extend(binary_cases());
    v
}

/// Run `cases` seeded cases of every generator.
pub fn op_suite(cases: usize, seed: u64) -> Vec<GradReport> {
    op_generators()
        .into_iter()
        .map(|(name, gen)| run_op(name, gen, cases, seed))
        .collect()
}

pub fn run_op(name: &'static str, gen: Gen, cases: usize, seed: u64) -> GradReport {
    let mut rng = rng_for(seed, name);
    let mut worst = 0.0f64;
    let mut entries = 0;
    for _ in 0..cases {
        let (ins, build) = gen(&mut rng);
        let (e, n) = check_case(&ins, &build, &mut rng).unwrap_or_else(|e| panic!("{name}: {e}"));
        worst = worst.max(e);
        entries += n;
    }
    GradReport { op: name, cases, entries, max_rel_err: worst }
}

/// Gradient of the full gated MLM loss for a handful of random weights.
pub fn encoder_case(seed: u64) -> (f64, usize) {
    let cfg = ModelConfig { n_layers: 2, n_heads: 2, model_dim: 4, ffn_dim: 6, vocab_size: 9, max_seq_len: 6, dropout: 0.0 };
    let mut rng = rng_for(seed, "encoder-gradcheck");
    let enc = Encoder::init(&cfg, &mut rng).unwrap();
    let dims = enc.dims();
    let gates: Vec<f64> = (0..dims.n_gates()).map(|_| rng.gen_range(0.2..1.0)).collect();
    let inputs: Vec<Vec<usize>> = (0..2).map(|_| (0..rng.gen_range(3..=6)).map(|_| rng.gen_range(1..9)).collect()).collect();
    let masked: Vec<(usize, usize)> = inputs.iter().enumerate().map(|(r, s)| (r, rng.gen_range(0..s.len()))).collect();
    let gold: Vec<usize> = masked.iter().map(|_| rng.gen_range(1..9)).collect();
    let loss_of = |e: &Encoder, g: &[f64], grad: bool| -> (f64, Option<(Vec<Tensor>, Tensor)>) {
        let mut tape = Tape::new();
        let vars = e.register(&mut tape, grad);
        let gv = if grad { tape.param(Tensor::vector(g.to_vec())) } else { tape.constant(Tensor::vector(g.to_vec())) };
        let gvars = GateVars::from_flat(&mut tape, gv, dims).unwrap();
        let loss = masked_lm_loss(&mut tape, &cfg, &vars, Some(&gvars), &inputs, &masked, &gold, None).unwrap();
        let v = tape.value(loss).item();
        if !grad {
            return (v, None);
        }
        let mut gr = tape.backward(loss).unwrap();
        let ws = vars.all.iter().map(|&x| gr.take(x).unwrap()).collect();
        (v, Some((ws, gr.take(gv).unwrap())))
    };
    let (_, Some((wgrads, ggrad))) = loss_of(&enc, &gates, true) else { unreachable!() };
    let mut worst = 0.0f64;
    let mut n = 0;
    // a sample of weight entries from every tensor
    for (ti, g) in wgrads.iter().enumerate() {
        for _ in 0..3 {
            let i = rng.gen_range(0..g.numel());
            let perturbed = |delta: f64| {
                let mut e = enc.clone();
                e.tensors_mut()[ti].data_mut()[i] += delta;
                loss_of(&e, &gates, false).0
            };
            let numeric = (perturbed(FD_STEP) - perturbed(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.data()[i], numeric));
            n += 1;
        }
    }
    for i in 0..gates.len() {
        let perturbed = |delta: f64| {
            let mut g = gates.clone();
            g[i] += delta;
            loss_of(&enc, &g, false).0
        };
        let numeric = (perturbed(FD_STEP) - perturbed(-FD_STEP)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(ggrad.data()[i], numeric));
        n += 1;
    }
    (worst, n)
}

/// A random hard gate set.
pub fn random_hard(dims: GateDims, rng: &mut ChaCha8Rng, p_on: f64) -> GateSet {
    let mask: Vec<bool> = (0..dims.n_gates()).map(|_| rng.gen::<f64>() < p_on).collect();
    GateSet::from_mask(dims, &mask).unwrap()
}

/// Eight-language desk corpus shared by the heavier checks.
pub fn desk_corpus() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| {
        let cc = CorpusConfig::default();
        gen_corpus(&default_specs(&cc, 10_000, 200_000, 1).unwrap(), &cc, 1).unwrap()
    })
}

pub fn desk_pretrain_schedule() -> TrainSchedule {
    TrainSchedule { steps: 2000, learning_rate: 3e-3, ..TrainSchedule::default() }
}

/// Dense baseline on the desk corpus, trained once per test binary.
pub fn desk_baseline() -> &'static Encoder {
    static B: OnceLock<Encoder> = OnceLock::new();
    B.get_or_init(|| {
        let corpus = desk_corpus();
        let cfg = ModelConfig::toy(corpus.vocab.len());
        pretrain_baseline(&cfg, corpus, &desk_pretrain_schedule(), &MaskConfig::default()).unwrap().0
    })
}
