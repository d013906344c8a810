//! Encoder weights and the gated forward pass.
//!
//! Post-norm layers: `x = LN(x + MHA(x))`, `x = LN(x + FFN(x))`.
//! The token embedding is factorized as `Ê · diag(G_e) · P` and the MLM
//! head reuses that same effective matrix (tied output projection).

use super::config::ModelConfig;
use super::gates::{GateDims, GateSet};
use crate::error::{Error, Result};
use crate::tensor::{read_checkpoint, write_checkpoint, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;

/// Token id reserved for padding.
pub const PAD_ID: usize = 0;

const MASK_NEG: f64 = -1e9;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

const LAYER_FIELDS: [&str; 16] = [
    "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
    "ln1.gamma", "ln1.beta", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2", "ln2.gamma", "ln2.beta",
];

impl LayerWeights {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.model_dim;
        let f = cfg.ffn_dim;
        let sd = 1.0 / (d as f64).sqrt();
        let sf = 1.0 / (f as f64).sqrt();
        LayerWeights {
            wq: Tensor::randn(&[d, d], sd, rng),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::randn(&[d, d], sd, rng),
            bk: Tensor::zeros(&[d]),
            wv: Tensor::randn(&[d, d], sd, rng),
            bv: Tensor::zeros(&[d]),
            wo: Tensor::randn(&[d, d], sd, rng),
            bo: Tensor::zeros(&[d]),
            ln1_gamma: Tensor::full(&[d], 1.0),
            ln1_beta: Tensor::zeros(&[d]),
            w1: Tensor::randn(&[d, f], sd, rng),
            b1: Tensor::zeros(&[f]),
            w2: Tensor::randn(&[f, d], sf, rng),
            b2: Tensor::zeros(&[d]),
            ln2_gamma: Tensor::full(&[d], 1.0),
            ln2_beta: Tensor::zeros(&[d]),
        }
    }

    fn fields(&self) -> [&Tensor; 16] {
        [
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo,
            &self.ln1_gamma, &self.ln1_beta, &self.w1, &self.b1, &self.w2, &self.b2,
            &self.ln2_gamma, &self.ln2_beta,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.wq, &mut self.bq, &mut self.wk, &mut self.bk, &mut self.wv, &mut self.bv,
            &mut self.wo, &mut self.bo, &mut self.ln1_gamma, &mut self.ln1_beta, &mut self.w1,
            &mut self.b1, &mut self.w2, &mut self.b2, &mut self.ln2_gamma, &mut self.ln2_beta,
        ]
    }
}

/// A gated encoder: weights plus shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: ModelConfig,
    /// Ê, `v×d`
    pub tokens: Tensor,
    /// P, `d×d`
    pub proj: Tensor,
    /// learned positions, `max_seq_len×d`
    pub pos: Tensor,
    pub layers: Vec<LayerWeights>,
}

impl Encoder {
    pub fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let tokens = Tensor::randn(&[config.vocab_size, d], 0.1, rng);
        let proj = Tensor::randn(&[d, d], 1.0 / (d as f64).sqrt(), rng);
        let pos = Tensor::randn(&[config.max_seq_len, d], 0.1, rng);
        let layers = (0..config.n_layers).map(|_| LayerWeights::init(config, rng)).collect();
        Ok(Encoder { config: config.clone(), tokens, proj, pos, layers })
    }

    pub fn dims(&self) -> GateDims {
        self.config.gate_dims()
    }

    /// Parameter tensors with stable names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("embed.tokens".to_string(), &self.tokens),
            ("embed.proj".to_string(), &self.proj),
            ("embed.pos".to_string(), &self.pos),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_FIELDS.iter().zip(layer.fields()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out
    }

    /// Mutable parameter tensors, same order as [`Encoder::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tokens, &mut self.proj, &mut self.pos];
        for layer in self.layers.iter_mut() {
            out.extend(layer.fields_mut());
        }
        out
    }

    pub fn n_tensors(&self) -> usize {
        3 + 16 * self.layers.len()
    }

    fn config_tensor(&self) -> Tensor {
        let c = &self.config;
        Tensor::vector(vec![
            c.n_layers as f64,
            c.n_heads as f64,
            c.model_dim as f64,
            c.ffn_dim as f64,
            c.vocab_size as f64,
            c.max_seq_len as f64,
            c.dropout,
        ])
    }

    /// Write a self-describing checkpoint (the shape is stored as `meta.config`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = self.config_tensor();
        let mut entries = vec![("meta.config".to_string(), &meta)];
        entries.extend(self.named());
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_checkpoint(f, &entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Encoder::from_entries(read_checkpoint(f)?)
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut map: BTreeMap<String, Tensor> = entries.into_iter().collect();
        let meta = map
            .remove("meta.config")
            .ok_or_else(|| Error::Parse("checkpoint lacks meta.config".into()))?;
        let m = meta.data();
        if m.len() != 7 {
            return Err(Error::Parse("malformed meta.config".into()));
        }
        let config = ModelConfig {
            n_layers: m[0] as usize,
            n_heads: m[1] as usize,
            model_dim: m[2] as usize,
            ffn_dim: m[3] as usize,
            vocab_size: m[4] as usize,
            max_seq_len: m[5] as usize,
            dropout: m[6],
        };
        config.validate()?;
        // build a template to learn names and shapes, then move tensors in
        let mut rng = crate::rng::rng_for(0, "template");
        let mut enc = Encoder::init(&config, &mut rng)?;
        let names: Vec<String> = enc.named().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(enc.tensors_mut()) {
            let t = map
                .remove(name)
                .ok_or_else(|| Error::Parse(format!("checkpoint lacks tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Parse(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::Parse(format!("unexpected tensor {extra} in checkpoint")));
        }
        Ok(enc)
    }

    /// Place every parameter on the tape.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        let all: Vec<Var> = self.named().into_iter().map(|(_, t)| tape.leaf(t.clone(), trainable)).collect();
        let layers = (0..self.layers.len())
            .map(|l| {
                let v = &all[3 + 16 * l..3 + 16 * (l + 1)];
                LayerVars {
                    wq: v[0],
                    bq: v[1],
                    wk: v[2],
                    bk: v[3],
                    wv: v[4],
                    bv: v[5],
                    wo: v[6],
                    bo: v[7],
                    ln1_gamma: v[8],
                    ln1_beta: v[9],
                    w1: v[10],
                    b1: v[11],
                    w2: v[12],
                    b2: v[13],
                    ln2_gamma: v[14],
                    ln2_beta: v[15],
                }
            })
            .collect();
        EncoderVars { tokens: all[0], proj: all[1], pos: all[2], layers, all }
    }

    /// Final hidden states (`(B·S)×d`, padded) for the given gates.
    pub fn hidden(&self, gates: Option<&GateSet>, seqs: &[Vec<usize>]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let gv = gates.map(|g| GateVars::constant(&mut tape, g)).transpose()?;
        let enc = encode(&mut tape, &self.config, &vars, gv.as_ref(), seqs, None)?;
        Ok(tape.value(enc.hidden).clone())
    }

    /// Vocabulary logits for every (padded) position.
    pub fn logits(&self, gates: Option<&GateSet>, seqs: &[Vec<usize>]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let gv = gates.map(|g| GateVars::constant(&mut tape, g)).transpose()?;
        let logits = encoder_forward(&mut tape, &self.config, &vars, gv.as_ref(), seqs, None)?;
        Ok(tape.value(logits).clone())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
}

/// Tape handles of an [`Encoder`]'s parameters.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub tokens: Var,
    pub proj: Var,
    pub pos: Var,
    pub layers: Vec<LayerVars>,
    /// same order as [`Encoder::named`]
    pub all: Vec<Var>,
}

/// Tape handles for one gate configuration.
#[derive(Clone, Debug)]
pub struct GateVars {
    pub heads: Vec<Var>,
    pub hidden: Vec<Var>,
    pub embed: Var,
}

impl GateVars {
    /// Slice a flat gate vector (flat component order) into per-layer handles.
    pub fn from_flat(tape: &mut Tape, flat: Var, dims: GateDims) -> Result<Self> {
        if tape.shape(flat) != [dims.n_gates()] {
            return Err(Error::Contract(format!(
                "flat gate vector has shape {:?}, expected [{}]",
                tape.shape(flat),
                dims.n_gates()
            )));
        }
        let mut heads = Vec::with_capacity(dims.n_layers);
        let mut hidden = Vec::with_capacity(dims.n_layers);
        for l in 0..dims.n_layers {
            heads.push(tape.narrow(flat, 0, dims.head_offset(l), dims.n_heads)?);
        }
        for l in 0..dims.n_layers {
            hidden.push(tape.narrow(flat, 0, dims.hidden_offset(l), dims.ffn_dim)?);
        }
        let embed = tape.narrow(flat, 0, dims.embed_offset(), dims.model_dim)?;
        Ok(GateVars { heads, hidden, embed })
    }

    pub fn constant(tape: &mut Tape, gates: &GateSet) -> Result<Self> {
        let flat = tape.constant(Tensor::vector(gates.values().to_vec()));
        GateVars::from_flat(tape, flat, gates.dims())
    }
}

/// Inverted dropout applied to sublayer outputs during training.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let n = tape.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = tape.constant(Tensor::new(tape.shape(x).to_vec(), mask)?);
        tape.mul(x, m)
    }
}

/// Output of [`encode`]: stacked hidden rows plus the padded geometry.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub hidden: Var,
    pub n_seqs: usize,
    pub seq_len: usize,
    /// true length of each sequence
    pub lengths: Vec<usize>,
}

impl Encoded {
    /// Row index of `(sequence, position)` in the stacked hidden matrix.
    pub fn row(&self, seq: usize, pos: usize) -> usize {
        seq * self.seq_len + pos
    }
}

fn check_tokens(cfg: &ModelConfig, seqs: &[Vec<usize>]) -> Result<usize> {
    if seqs.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let seq_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
    if seq_len == 0 {
        return Err(Error::Input("batch holds only empty sequences".into()));
    }
    if seq_len > cfg.max_seq_len {
        return Err(Error::Input(format!(
            "sequence length {seq_len} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    for s in seqs {
        if let Some(&t) = s.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Input(format!("token id {t} out of range for vocab {}", cfg.vocab_size)));
        }
    }
    Ok(seq_len)
}

/// Token rows of `Ê`, scaled columnwise by `G_e`, projected through `P`,
/// plus (ungated) positions. Sequences are right-padded to the batch maximum.
pub fn embed_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &EncoderVars,
    embed_gates: Option<Var>,
    seqs: &[Vec<usize>],
) -> Result<(Var, usize)> {
    let seq_len = check_tokens(cfg, seqs)?;
    let mut ids = Vec::with_capacity(seqs.len() * seq_len);
    let mut positions = Vec::with_capacity(seqs.len() * seq_len);
    for s in seqs {
        for p in 0..seq_len {
            ids.push(s.get(p).copied().unwrap_or(PAD_ID));
            positions.push(p);
        }
    }
    let mut tok = tape.gather_rows(vars.tokens, &ids)?;
    if let Some(g) = embed_gates {
        tok = tape.mul(tok, g)?;
    }
    let tok = tape.matmul(tok, vars.proj)?;
    let pos = tape.gather_rows(vars.pos, &positions)?;
    Ok((tape.add(tok, pos)?, seq_len))
}

/// Multihead attention over `n_seqs` stacked sequences of `seq_len` rows.
///
/// Returns `Σ_i G_{h,i} · head_i + b_o`, where `head_i` already includes the
/// head's slice of the output projection. With `head_gates = None` the
/// heads are summed ungated.
#[allow(clippy::too_many_arguments)]
pub fn mha_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    layer: &LayerVars,
    x: Var,
    head_gates: Option<Var>,
    n_seqs: usize,
    seq_len: usize,
    key_masks: &[Option<Var>],
) -> Result<Var> {
    if let Some(g) = head_gates {
        if tape.shape(g) != [cfg.n_heads] {
            return Err(Error::Contract(format!(
                "head gates have shape {:?}, expected [{}]",
                tape.shape(g),
                cfg.n_heads
            )));
        }
    }
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let q = tape.matmul(x, layer.wq)?;
    let q = tape.add(q, layer.bq)?;
    let k = tape.matmul(x, layer.wk)?;
    let k = tape.add(k, layer.bk)?;
    let v = tape.matmul(x, layer.wv)?;
    let v = tape.add(v, layer.bv)?;

    let mut total: Option<Var> = None;
    for h in 0..cfg.n_heads {
        let qh = tape.narrow(q, 1, h * dh, dh)?;
        let kh = tape.narrow(k, 1, h * dh, dh)?;
        let vh = tape.narrow(v, 1, h * dh, dh)?;
        let mut ctx = Vec::with_capacity(n_seqs);
        for b in 0..n_seqs {
            let qb = tape.narrow(qh, 0, b * seq_len, seq_len)?;
            let kb = tape.narrow(kh, 0, b * seq_len, seq_len)?;
            let vb = tape.narrow(vh, 0, b * seq_len, seq_len)?;
            let scores = tape.matmul_nt(qb, kb)?;
            let mut scores = tape.scale(scores, scale)?;
            if let Some(m) = key_masks[b] {
                scores = tape.add(scores, m)?;
            }
            let attn = tape.softmax(scores)?;
            ctx.push(tape.matmul(attn, vb)?);
        }
        let ctx = if ctx.len() == 1 { ctx[0] } else { tape.concat(&ctx, 0)? };
        let wo_h = tape.narrow(layer.wo, 0, h * dh, dh)?;
        let mut head = tape.matmul(ctx, wo_h)?;
        if let Some(g) = head_gates {
            let gh = tape.narrow(g, 0, h, 1)?;
            head = tape.mul(head, gh)?;
        }
        total = Some(match total {
            None => head,
            Some(t) => tape.add(t, head)?,
        });
    }
    let total = total.expect("at least one head");
    tape.add(total, layer.bo)
}

/// `(GeLU(X·W1 + b1) ⊙ G_f) · W2 + b2`.
pub fn ffn_forward(tape: &mut Tape, cfg: &ModelConfig, layer: &LayerVars, x: Var, hidden_gates: Option<Var>) -> Result<Var> {
    if let Some(g) = hidden_gates {
        if tape.shape(g) != [cfg.ffn_dim] {
            return Err(Error::Contract(format!(
                "hidden gates have shape {:?}, expected [{}]",
                tape.shape(g),
                cfg.ffn_dim
            )));
        }
    }
    let h = tape.matmul(x, layer.w1)?;
    let h = tape.add(h, layer.b1)?;
    let mut h = tape.gelu(h)?;
    if let Some(g) = hidden_gates {
        h = tape.mul(h, g)?;
    }
    let out = tape.matmul(h, layer.w2)?;
    tape.add(out, layer.b2)
}

/// Embedding plus all encoder layers.
pub fn encode(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &EncoderVars,
    gates: Option<&GateVars>,
    seqs: &[Vec<usize>],
    mut dropout: Option<&mut Dropout>,
) -> Result<Encoded> {
    let (mut x, seq_len) = embed_forward(tape, cfg, vars, gates.map(|g| g.embed), seqs)?;
    let lengths: Vec<usize> = seqs.iter().map(Vec::len).collect();
    let key_masks: Vec<Option<Var>> = lengths
        .iter()
        .map(|&len| {
            (len < seq_len).then(|| {
                let m = (0..seq_len).map(|p| if p < len { 0.0 } else { MASK_NEG }).collect();
                tape.constant(Tensor::vector(m))
            })
        })
        .collect();
    for (l, layer) in vars.layers.iter().enumerate() {
        let hg = gates.map(|g| g.heads[l]);
        let mut a = mha_forward(tape, cfg, layer, x, hg, seqs.len(), seq_len, &key_masks)?;
        if let Some(d) = dropout.as_deref_mut() {
            a = d.apply(tape, a)?;
        }
        let r = tape.add(x, a)?;
        x = tape.layer_norm(r, layer.ln1_gamma, layer.ln1_beta)?;
        let fg = gates.map(|g| g.hidden[l]);
        let mut f = ffn_forward(tape, cfg, layer, x, fg)?;
        if let Some(d) = dropout.as_deref_mut() {
            f = d.apply(tape, f)?;
        }
        let r = tape.add(x, f)?;
        x = tape.layer_norm(r, layer.ln2_gamma, layer.ln2_beta)?;
    }
    Ok(Encoded { hidden: x, n_seqs: seqs.len(), seq_len, lengths })
}

/// `Ê · diag(G_e) · P`, the `v×d` effective embedding.
pub fn effective_embedding(tape: &mut Tape, vars: &EncoderVars, embed_gates: Option<Var>) -> Result<Var> {
    let e = match embed_gates {
        Some(g) => tape.mul(vars.tokens, g)?,
        None => vars.tokens,
    };
    tape.matmul(e, vars.proj)
}

/// Tied MLM projection of hidden rows onto the vocabulary.
pub fn mlm_logits(tape: &mut Tape, vars: &EncoderVars, gates: Option<&GateVars>, rows: Var) -> Result<Var> {
    let e = effective_embedding(tape, vars, gates.map(|g| g.embed))?;
    tape.matmul_nt(rows, e)
}

/// Full stack to vocabulary logits for every padded position.
pub fn encoder_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &EncoderVars,
    gates: Option<&GateVars>,
    seqs: &[Vec<usize>],
    dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let enc = encode(tape, cfg, vars, gates, seqs, dropout)?;
    mlm_logits(tape, vars, gates, enc.hidden)
}

/// MLM loss computed only at the masked positions: the hidden rows at
/// `masked` (`(sequence, position)` pairs) are projected onto the vocabulary.
#[allow(clippy::too_many_arguments)]
pub fn masked_lm_loss(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &EncoderVars,
    gates: Option<&GateVars>,
    inputs: &[Vec<usize>],
    masked: &[(usize, usize)],
    gold: &[usize],
    dropout: Option<&mut Dropout>,
) -> Result<Var> {
    if masked.is_empty() {
        return Err(Error::Input("MLM loss needs at least one masked position".into()));
    }
    let enc = encode(tape, cfg, vars, gates, inputs, dropout)?;
    let mut rows = Vec::with_capacity(masked.len());
    for &(r, p) in masked {
        if r >= enc.n_seqs || p >= enc.lengths[r] {
            return Err(Error::Input(format!("masked position ({r}, {p}) lies outside the batch")));
        }
        rows.push(enc.row(r, p));
    }
    let h = tape.gather_rows(enc.hidden, &rows)?;
    let logits = mlm_logits(tape, vars, gates, h)?;
    let idx: Vec<usize> = (0..rows.len()).collect();
    mlm_loss(tape, logits, &idx, gold)
}

/// Mean cross-entropy over the masked rows of `logits`.
pub fn mlm_loss(tape: &mut Tape, logits: Var, positions: &[usize], gold: &[usize]) -> Result<Var> {
    if positions.is_empty() {
        return Err(Error::Input("MLM loss needs at least one masked position".into()));
    }
    if positions.len() != gold.len() {
        return Err(Error::Contract(format!(
            "{} masked positions but {} gold ids",
            positions.len(),
            gold.len()
        )));
    }
    let rows = tape.gather_rows(logits, positions)?;
    let logp = tape.log_softmax(rows)?;
    let idx: Vec<(usize, usize)> = gold.iter().enumerate().map(|(i, &g)| (i, g)).collect();
    let picked = tape.select(logp, &idx)?;
    let m = tape.mean(picked)?;
    tape.scale(m, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::gates::ComponentId;
    use crate::rng::rng_for;

    fn toy() -> Encoder {
        Encoder::init(&ModelConfig::toy(24), &mut rng_for(11, "model")).unwrap()
    }

    #[test]
    fn all_ones_gates_equal_ungated() {
        let enc = toy();
        let seqs = vec![vec![3, 4, 5, 6, 7], vec![8, 9]];
        let gated = enc.logits(Some(&GateSet::ones(enc.dims())), &seqs).unwrap();
        let plain = enc.logits(None, &seqs).unwrap();
        assert!(gated.max_abs_diff(&plain) <= 1e-12);
    }

    #[test]
    fn head_gate_equals_zeroed_output_slice() {
        let enc = toy();
        let mut gates = GateSet::ones(enc.dims());
        gates.set(ComponentId::head(0, 2), 0.0).unwrap();
        let mut cut = enc.clone();
        let dh = enc.config.head_dim();
        let d = enc.config.model_dim;
        for r in 2 * dh..3 * dh {
            for c in 0..d {
                cut.layers[0].wo.data_mut()[r * d + c] = 0.0;
            }
        }
        let seqs = vec![vec![1, 2, 3, 4]];
        let a = enc.logits(Some(&gates), &seqs).unwrap();
        let b = cut.logits(None, &seqs).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-10);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[3, 16]));
        let l = mlm_loss(&mut tape, logits, &[0, 2], &[5, 7]).unwrap();
        assert!((tape.value(l).item() - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mlm_loss_needs_a_position() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[3, 16]));
        assert!(matches!(mlm_loss(&mut tape, logits, &[], &[]), Err(Error::Input(_))));
    }

    #[test]
    fn padding_does_not_change_real_positions() {
        let enc = toy();
        let alone = enc.hidden(None, &[vec![5, 6, 7]]).unwrap();
        let batched = enc.hidden(None, &[vec![5, 6, 7], vec![1, 2, 3, 4, 5, 6]]).unwrap();
        let d = enc.config.model_dim;
        for p in 0..3 {
            for j in 0..d {
                assert!((alone.at(p, j) - batched.at(p, j)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn bad_tokens_and_lengths_are_input_errors() {
        let enc = toy();
        assert!(matches!(enc.logits(None, &[vec![99]]), Err(Error::Input(_))));
        assert!(matches!(enc.logits(None, &[vec![1; 17]]), Err(Error::Input(_))));
        assert!(matches!(enc.logits(None, &[]), Err(Error::Input(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let enc = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        enc.save(&path).unwrap();
        assert_eq!(Encoder::load(&path).unwrap(), enc);
    }

    #[test]
    fn gradients_reach_every_parameter() {
        let enc = toy();
        let mut tape = Tape::new();
        let vars = enc.register(&mut tape, true);
        let logits = encoder_forward(&mut tape, &enc.config, &vars, None, &[vec![3, 4, 5]], None).unwrap();
        let loss = mlm_loss(&mut tape, logits, &[1], &[9]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let touched = vars.all.iter().filter(|&&v| grads.get(v).unwrap().data().iter().any(|&g| g != 0.0)).count();
        // every tensor gets at least one nonzero entry
        assert_eq!(touched, vars.all.len());
    }
}
