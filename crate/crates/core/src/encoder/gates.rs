//! Prunable components and the gate values attached to them.
//!
//! Every gate has a flat index. The flat order is the [`ComponentId`] order:
//! all heads (layer-major), then all hidden units (layer-major), then the
//! embedding ranks. Encoder gates therefore occupy a contiguous prefix.

use crate::error::{input, Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{BufRead, Read, Write};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ComponentKind {
    Head,
    HiddenUnit,
    EmbedRank,
}

impl ComponentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ComponentKind::Head => "head",
            ComponentKind::HiddenUnit => "hidden",
            ComponentKind::EmbedRank => "embed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "head" => Ok(ComponentKind::Head),
            "hidden" => Ok(ComponentKind::HiddenUnit),
            "embed" => Ok(ComponentKind::EmbedRank),
            other => Err(Error::Parse(format!("unknown component kind {other:?}"))),
        }
    }

    pub fn is_encoder(self) -> bool {
        !matches!(self, ComponentKind::EmbedRank)
    }
}

/// An addressable prunable unit. `layer` is `None` for embedding ranks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ComponentId {
    pub kind: ComponentKind,
    pub layer: Option<usize>,
    pub index: usize,
}

impl ComponentId {
    pub fn head(layer: usize, index: usize) -> Self {
        ComponentId { kind: ComponentKind::Head, layer: Some(layer), index }
    }

    pub fn hidden(layer: usize, index: usize) -> Self {
        ComponentId { kind: ComponentKind::HiddenUnit, layer: Some(layer), index }
    }

    pub fn embed(index: usize) -> Self {
        ComponentId { kind: ComponentKind::EmbedRank, layer: None, index }
    }

    /// Parse the three leading CSV fields `kind,layer,index`.
    pub fn parse_fields(kind: &str, layer: &str, index: &str) -> Result<Self> {
        let kind = ComponentKind::parse(kind.trim())?;
        let index = index
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad component index {index:?}")))?;
        let layer = match (kind, layer.trim()) {
            (ComponentKind::EmbedRank, "") => None,
            (ComponentKind::EmbedRank, l) => {
                return Err(Error::Parse(format!("embedding rank carries a layer {l:?}")))
            }
            (_, l) => Some(l.parse().map_err(|_| Error::Parse(format!("bad layer {l:?}")))?),
        };
        Ok(ComponentId { kind, layer, index })
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(f, "{},{},{}", self.kind.as_str(), l, self.index),
            None => write!(f, "{},,{}", self.kind.as_str(), self.index),
        }
    }
}

/// The gate universe of a model shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateDims {
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub model_dim: usize,
}

impl GateDims {
    pub fn n_gates(&self) -> usize {
        self.n_encoder_gates() + self.model_dim
    }

    pub fn n_encoder_gates(&self) -> usize {
        self.n_layers * (self.n_heads + self.ffn_dim)
    }

    pub fn head_offset(&self, layer: usize) -> usize {
        layer * self.n_heads
    }

    pub fn hidden_offset(&self, layer: usize) -> usize {
        self.n_layers * self.n_heads + layer * self.ffn_dim
    }

    pub fn embed_offset(&self) -> usize {
        self.n_encoder_gates()
    }

    pub fn flat_index(&self, id: ComponentId) -> Result<usize> {
        let bad = || Error::Input(format!("component {id} outside model dims"));
        match (id.kind, id.layer) {
            (ComponentKind::Head, Some(l)) if l < self.n_layers && id.index < self.n_heads => {
                Ok(self.head_offset(l) + id.index)
            }
            (ComponentKind::HiddenUnit, Some(l)) if l < self.n_layers && id.index < self.ffn_dim => {
                Ok(self.hidden_offset(l) + id.index)
            }
            (ComponentKind::EmbedRank, None) if id.index < self.model_dim => {
                Ok(self.embed_offset() + id.index)
            }
            _ => Err(bad()),
        }
    }

    pub fn component(&self, flat: usize) -> ComponentId {
        let heads = self.n_layers * self.n_heads;
        if flat < heads {
            ComponentId::head(flat / self.n_heads, flat % self.n_heads)
        } else if flat < self.n_encoder_gates() {
            let r = flat - heads;
            ComponentId::hidden(r / self.ffn_dim, r % self.ffn_dim)
        } else {
            ComponentId::embed(flat - self.n_encoder_gates())
        }
    }

    pub fn components(&self) -> impl Iterator<Item = ComponentId> + '_ {
        (0..self.n_gates()).map(move |i| self.component(i))
    }
}

/// Per-kind regularization/size weights.
///
/// The default scheme charges each gate for the parameters it governs,
/// scaled down by the model width: a head owns four `d×(d/H)` slices
/// (weight `4·d/H`), a hidden unit one column and one row (weight 2), an
/// embedding rank one column (weight 1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentWeights {
    pub head: f64,
    pub hidden: f64,
    pub embed: f64,
}

impl ComponentWeights {
    pub fn for_dims(dims: GateDims) -> Self {
        ComponentWeights {
            head: 4.0 * (dims.model_dim / dims.n_heads) as f64,
            hidden: 2.0,
            embed: 1.0,
        }
    }

    pub fn uniform() -> Self {
        ComponentWeights { head: 1.0, hidden: 1.0, embed: 1.0 }
    }

    pub fn weight(&self, kind: ComponentKind) -> f64 {
        match kind {
            ComponentKind::Head => self.head,
            ComponentKind::HiddenUnit => self.hidden,
            ComponentKind::EmbedRank => self.embed,
        }
    }

    pub fn max_weight(&self) -> f64 {
        self.head.max(self.hidden).max(self.embed)
    }

    /// Weight of every gate, in flat order.
    pub fn flat(&self, dims: GateDims) -> Vec<f64> {
        dims.components().map(|c| self.weight(c.kind)).collect()
    }

    pub fn encoder_total(&self, dims: GateDims) -> f64 {
        dims.n_layers as f64 * (dims.n_heads as f64 * self.head + dims.ffn_dim as f64 * self.hidden)
    }

    pub fn total(&self, dims: GateDims) -> f64 {
        self.encoder_total(dims) + dims.model_dim as f64 * self.embed
    }
}

/// Gate values over the full component universe.
#[derive(Clone, Debug, PartialEq)]
pub struct GateSet {
    dims: GateDims,
    values: Vec<f64>,
    hard: bool,
}

impl GateSet {
    pub fn ones(dims: GateDims) -> Self {
        GateSet { dims, values: vec![1.0; dims.n_gates()], hard: true }
    }

    pub fn zeros(dims: GateDims) -> Self {
        GateSet { dims, values: vec![0.0; dims.n_gates()], hard: true }
    }

    pub fn from_values(dims: GateDims, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.n_gates() {
            return Err(Error::Contract(format!(
                "gate vector has {} entries, model has {} gates",
                values.len(),
                dims.n_gates()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("gate value {v} outside [0, 1]")));
        }
        let hard = values.iter().all(|&v| v == 0.0 || v == 1.0);
        Ok(GateSet { dims, values, hard })
    }

    /// Hard gates from an activity mask in flat order.
    pub fn from_mask(dims: GateDims, mask: &[bool]) -> Result<Self> {
        GateSet::from_values(dims, mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
    }

    pub fn dims(&self) -> GateDims {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_hard(&self) -> bool {
        self.hard
    }

    pub fn get(&self, id: ComponentId) -> Result<f64> {
        Ok(self.values[self.dims.flat_index(id)?])
    }

    pub fn set(&mut self, id: ComponentId, value: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Contract(format!("gate value {value} outside [0, 1]")));
        }
        let i = self.dims.flat_index(id)?;
        self.values[i] = value;
        self.hard = self.values.iter().all(|&v| v == 0.0 || v == 1.0);
        Ok(())
    }

    pub fn head_gates(&self, layer: usize) -> &[f64] {
        let o = self.dims.head_offset(layer);
        &self.values[o..o + self.dims.n_heads]
    }

    pub fn hidden_gates(&self, layer: usize) -> &[f64] {
        let o = self.dims.hidden_offset(layer);
        &self.values[o..o + self.dims.ffn_dim]
    }

    pub fn embed_gates(&self) -> &[f64] {
        &self.values[self.dims.embed_offset()..]
    }

    /// Binarize: values strictly above `threshold` become 1, the rest 0.
    pub fn binarize(&self, threshold: f64) -> GateSet {
        let values = self.values.iter().map(|&v| if v > threshold { 1.0 } else { 0.0 }).collect();
        GateSet { dims: self.dims, values, hard: true }
    }

    pub fn active_mask(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v > 0.0).collect()
    }

    pub fn require_hard(&self, what: &str) -> Result<()> {
        if self.hard {
            Ok(())
        } else {
            Err(Error::Contract(format!("{what} requires hard (0/1) gates")))
        }
    }

    /// True when every gate active here is also active in `other`.
    pub fn is_subset_of(&self, other: &GateSet) -> bool {
        self.dims == other.dims
            && self.values.iter().zip(&other.values).all(|(&a, &b)| a <= 0.0 || b > 0.0)
    }

    /// Text form: one `kind,layer,index,value` line per component.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        for (i, v) in self.values.iter().enumerate() {
            writeln!(w, "{},{}", self.dims.component(i), v)?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R, dims: GateDims) -> Result<Self> {
        let mut values = vec![f64::NAN; dims.n_gates()];
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::Parse(format!("line {}: expected 4 fields", lineno + 1)));
            }
            let id = ComponentId::parse_fields(f[0], f[1], f[2])?;
            let v: f64 = f[3]
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad value {:?}", lineno + 1, f[3])))?;
            let i = dims.flat_index(id)?;
            if !values[i].is_nan() {
                return input(format!("component {id} listed twice"));
            }
            values[i] = v;
        }
        if let Some(i) = values.iter().position(|v| v.is_nan()) {
            return input(format!("component {} missing from gate file", dims.component(i)));
        }
        GateSet::from_values(dims, values)
    }

    /// Compact bitset form for hard masks: `"GBIT"`, four `u32` dims
    /// (layers, heads, ffn, model), then the flat mask packed LSB-first.
    pub fn write_bitset<W: Write>(&self, mut w: W) -> Result<()> {
        self.require_hard("bitset export")?;
        w.write_all(b"GBIT")?;
        for d in [self.dims.n_layers, self.dims.n_heads, self.dims.ffn_dim, self.dims.model_dim] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut bytes = vec![0u8; self.values.len().div_ceil(8)];
        for (i, &v) in self.values.iter().enumerate() {
            if v > 0.0 {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_bitset<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"GBIT" {
            return Err(Error::Parse("bad bitset magic".into()));
        }
        let mut d = [0usize; 4];
        for slot in d.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *slot = u32::from_le_bytes(b) as usize;
        }
        let dims = GateDims { n_layers: d[0], n_heads: d[1], ffn_dim: d[2], model_dim: d[3] };
        let n = dims.n_gates();
        let mut bytes = vec![0u8; n.div_ceil(8)];
        r.read_exact(&mut bytes)?;
        let mask: Vec<bool> = (0..n).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect();
        GateSet::from_mask(dims, &mask)
    }
}
