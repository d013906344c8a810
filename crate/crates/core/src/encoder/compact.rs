//! Physically pruned encoder with a plain (tape-free) forward pass.
//!
//! Pruned heads, hidden units and embedding ranks are sliced out of the
//! weight matrices, so the cost of a forward pass tracks the retained size.

use super::config::ModelConfig;
use super::gates::GateSet;
use super::model::{Encoder, PAD_ID};
use crate::error::{Error, Result};
use crate::tensor::tape::{gelu_value, layer_norm_row, softmax_row};
use crate::tensor::{gemm, Tensor};

const MASK_NEG: f64 = -1e9;

#[derive(Clone, Debug)]
struct CompactLayer {
    n_heads: usize,
    /// `d × (k·dh)` each
    wq: Tensor,
    bq: Vec<f64>,
    wk: Tensor,
    bk: Vec<f64>,
    wv: Tensor,
    bv: Vec<f64>,
    /// `(k·dh) × d`
    wo: Tensor,
    bo: Vec<f64>,
    ln1_gamma: Vec<f64>,
    ln1_beta: Vec<f64>,
    /// `d × m`
    w1: Tensor,
    b1: Vec<f64>,
    /// `m × d`
    w2: Tensor,
    b2: Vec<f64>,
    ln2_gamma: Vec<f64>,
    ln2_beta: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct CompactEncoder {
    pub config: ModelConfig,
    /// `v × r`
    tokens: Tensor,
    /// `r × d`
    proj: Tensor,
    pos: Tensor,
    /// `Ê_r · P_r`, cached for lookup and the tied output layer
    effective: Tensor,
    layers: Vec<CompactLayer>,
}

fn kept(gates: &[f64]) -> Vec<usize> {
    gates.iter().enumerate().filter(|(_, &g)| g == 1.0).map(|(i, _)| i).collect()
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut out);
    Tensor::new(vec![m, n], out).expect("shape matches")
}

fn add_row(x: &mut Tensor, b: &[f64]) {
    if b.is_empty() {
        return;
    }
    for row in x.data_mut().chunks_mut(b.len()) {
        for (v, &bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

fn layer_norm(x: &Tensor, gamma: &[f64], beta: &[f64]) -> Tensor {
    let d = gamma.len();
    let mut out = vec![0.0; x.numel()];
    for (src, dst) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        layer_norm_row(src, gamma, beta, dst);
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

impl CompactEncoder {
    /// Slice the retained components out of `enc`. `gates` must be hard.
    pub fn from_gated(enc: &Encoder, gates: &GateSet) -> Result<Self> {
        gates.require_hard("compaction")?;
        if gates.dims() != enc.dims() {
            return Err(Error::Contract(format!(
                "gate dims {:?} do not match model dims {:?}",
                gates.dims(),
                enc.dims()
            )));
        }
        let dh = enc.config.head_dim();
        let ranks = kept(gates.embed_gates());
        let tokens = enc.tokens.select_cols(&ranks);
        let proj = enc.proj.select_rows(&ranks);
        let effective = matmul(&tokens, &proj);
        let mut layers = Vec::with_capacity(enc.layers.len());
        for (l, lw) in enc.layers.iter().enumerate() {
            let heads = kept(gates.head_gates(l));
            let cols: Vec<usize> = heads.iter().flat_map(|&h| h * dh..(h + 1) * dh).collect();
            let units = kept(gates.hidden_gates(l));
            layers.push(CompactLayer {
                n_heads: heads.len(),
                wq: lw.wq.select_cols(&cols),
                bq: lw.bq.select_entries(&cols).into_data(),
                wk: lw.wk.select_cols(&cols),
                bk: lw.bk.select_entries(&cols).into_data(),
                wv: lw.wv.select_cols(&cols),
                bv: lw.bv.select_entries(&cols).into_data(),
                wo: lw.wo.select_rows(&cols),
                bo: lw.bo.data().to_vec(),
                ln1_gamma: lw.ln1_gamma.data().to_vec(),
                ln1_beta: lw.ln1_beta.data().to_vec(),
                w1: lw.w1.select_cols(&units),
                b1: lw.b1.select_entries(&units).into_data(),
                w2: lw.w2.select_rows(&units),
                b2: lw.b2.data().to_vec(),
                ln2_gamma: lw.ln2_gamma.data().to_vec(),
                ln2_beta: lw.ln2_beta.data().to_vec(),
            });
        }
        Ok(CompactEncoder { config: enc.config.clone(), tokens, proj, pos: enc.pos.clone(), effective, layers })
    }

    /// Stored parameters of the compact model.
    pub fn param_count(&self) -> usize {
        let mut n = self.tokens.numel() + self.proj.numel() + self.pos.numel();
        for l in &self.layers {
            n += l.wq.numel() + l.bq.len() + l.wk.numel() + l.bk.len() + l.wv.numel() + l.bv.len();
            n += l.wo.numel() + l.bo.len() + l.ln1_gamma.len() + l.ln1_beta.len();
            n += l.w1.numel() + l.b1.len() + l.w2.numel() + l.b2.len();
            n += l.ln2_gamma.len() + l.ln2_beta.len();
        }
        n
    }

    pub fn embed_rank(&self) -> usize {
        self.proj.rows()
    }

    pub fn heads_per_layer(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.n_heads).collect()
    }

    pub fn hidden_per_layer(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.b1.len()).collect()
    }

    /// Final hidden states, `(B·S) × d`, sequences right-padded to the longest.
    pub fn hidden(&self, seqs: &[Vec<usize>]) -> Result<Tensor> {
        let cfg = &self.config;
        let d = cfg.model_dim;
        let dh = cfg.head_dim();
        let seq_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if seqs.is_empty() || seq_len == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        if seq_len > cfg.max_seq_len {
            return Err(Error::Input(format!("sequence length {seq_len} exceeds max_seq_len {}", cfg.max_seq_len)));
        }
        let rows = seqs.len() * seq_len;
        let mut x = vec![0.0; rows * d];
        for (b, s) in seqs.iter().enumerate() {
            for p in 0..seq_len {
                let id = s.get(p).copied().unwrap_or(PAD_ID);
                if id >= cfg.vocab_size {
                    return Err(Error::Input(format!("token id {id} out of range for vocab {}", cfg.vocab_size)));
                }
                let dst = &mut x[(b * seq_len + p) * d..(b * seq_len + p + 1) * d];
                for ((o, &e), &q) in dst.iter_mut().zip(self.effective.row(id)).zip(self.pos.row(p)) {
                    *o = e + q;
                }
            }
        }
        let mut x = Tensor::new(vec![rows, d], x)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut scores = vec![0.0; seq_len * seq_len];
        let mut probs = vec![0.0; seq_len];
        for layer in &self.layers {
            let kd = layer.n_heads * dh;
            // attention
            let mut attn = Tensor::zeros(&[rows, d]);
            if kd > 0 {
                let mut q = matmul(&x, &layer.wq);
                add_row(&mut q, &layer.bq);
                let mut k = matmul(&x, &layer.wk);
                add_row(&mut k, &layer.bk);
                let mut v = matmul(&x, &layer.wv);
                add_row(&mut v, &layer.bv);
                let mut ctx = vec![0.0; rows * kd];
                for (b, s) in seqs.iter().enumerate() {
                    let base = b * seq_len * kd;
                    for h in 0..layer.n_heads {
                        let off = base + h * dh;
                        gemm_strided(seq_len, dh, seq_len, &q.data()[off..], kd, &k.data()[off..], kd, &mut scores);
                        for i in 0..seq_len {
                            let row = &mut scores[i * seq_len..(i + 1) * seq_len];
                            for (j, r) in row.iter_mut().enumerate() {
                                *r *= scale;
                                if j >= s.len() {
                                    *r += MASK_NEG;
                                }
                            }
                            softmax_row(row, &mut probs);
                            row.copy_from_slice(&probs);
                        }
                        // ctx_h = A · V_h
                        for i in 0..seq_len {
                            let out = &mut ctx[off + i * kd..off + i * kd + dh];
                            for j in 0..seq_len {
                                let a = scores[i * seq_len + j];
                                let vrow = &v.data()[off + j * kd..off + j * kd + dh];
                                for (o, &vv) in out.iter_mut().zip(vrow) {
                                    *o += a * vv;
                                }
                            }
                        }
                    }
                }
                let ctx = Tensor::new(vec![rows, kd], ctx)?;
                attn = matmul(&ctx, &layer.wo);
            }
            add_row(&mut attn, &layer.bo);
            for (a, &xv) in attn.data_mut().iter_mut().zip(x.data()) {
                *a += xv;
            }
            x = layer_norm(&attn, &layer.ln1_gamma, &layer.ln1_beta);
            // feed-forward
            let mut f = if layer.b1.is_empty() {
                Tensor::zeros(&[rows, d])
            } else {
                let mut h = matmul(&x, &layer.w1);
                add_row(&mut h, &layer.b1);
                for v in h.data_mut() {
                    *v = gelu_value(*v);
                }
                matmul(&h, &layer.w2)
            };
            add_row(&mut f, &layer.b2);
            for (a, &xv) in f.data_mut().iter_mut().zip(x.data()) {
                *a += xv;
            }
            x = layer_norm(&f, &layer.ln2_gamma, &layer.ln2_beta);
        }
        Ok(x)
    }

    /// Tied-output logits for every padded position.
    pub fn logits(&self, seqs: &[Vec<usize>]) -> Result<Tensor> {
        let h = self.hidden(seqs)?;
        let (m, d, v) = (h.rows(), h.cols(), self.effective.rows());
        let mut out = vec![0.0; m * v];
        gemm(m, d, v, h.data(), false, self.effective.data(), true, 0.0, &mut out);
        Tensor::new(vec![m, v], out)
    }
}

/// `out = A · Bᵀ` where `A` is `m×k` and `B` is `n×k`, both with row stride `ld`.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(m: usize, k: usize, n: usize, a: &[f64], lda: usize, b: &[f64], ldb: usize, out: &mut [f64]) {
    for i in 0..m {
        let ar = &a[i * lda..i * lda + k];
        for j in 0..n {
            let br = &b[j * ldb..j * ldb + k];
            out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::gates::ComponentId;
    use crate::rng::rng_for;

    fn toy() -> Encoder {
        Encoder::init(&ModelConfig::toy(20), &mut rng_for(3, "compact")).unwrap()
    }

    #[test]
    fn full_gates_match_gated_forward() {
        let enc = toy();
        let gates = GateSet::ones(enc.dims());
        let seqs = vec![vec![3, 4, 5, 6], vec![7, 8]];
        let a = enc.logits(Some(&gates), &seqs).unwrap();
        let b = CompactEncoder::from_gated(&enc, &gates).unwrap().logits(&seqs).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9, "{}", a.max_abs_diff(&b));
    }

    #[test]
    fn pruned_gates_match_gated_forward() {
        let enc = toy();
        let dims = enc.dims();
        let mut gates = GateSet::ones(dims);
        gates.set(ComponentId::head(0, 1), 0.0).unwrap();
        for h in 0..dims.n_heads {
            gates.set(ComponentId::head(1, h), 0.0).unwrap();
        }
        for i in (0..dims.ffn_dim).step_by(3) {
            gates.set(ComponentId::hidden(0, i), 0.0).unwrap();
        }
        for i in 0..dims.ffn_dim {
            gates.set(ComponentId::hidden(1, i), 0.0).unwrap();
        }
        for i in 0..5 {
            gates.set(ComponentId::embed(i * 2), 0.0).unwrap();
        }
        let seqs = vec![vec![3, 4, 5], vec![9, 10, 11, 12, 13]];
        let a = enc.logits(Some(&gates), &seqs).unwrap();
        let c = CompactEncoder::from_gated(&enc, &gates).unwrap();
        assert_eq!(c.heads_per_layer(), vec![3, 0]);
        assert_eq!(c.hidden_per_layer()[1], 0);
        assert_eq!(c.embed_rank(), dims.model_dim - 5);
        let b = c.logits(&seqs).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9, "{}", a.max_abs_diff(&b));
    }

    #[test]
    fn soft_gates_are_rejected() {
        let enc = toy();
        let mut values = vec![1.0; enc.dims().n_gates()];
        values[0] = 0.5;
        let gates = GateSet::from_values(enc.dims(), values).unwrap();
        assert!(matches!(CompactEncoder::from_gated(&enc, &gates), Err(Error::Contract(_))));
    }
}
