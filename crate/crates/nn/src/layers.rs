//! Layers built on top of [`Graph`] ops. Each layer registers its
//! parameters in a [`ParamStore`] at construction and records ops on a graph
//! at forward time.

use rand::Rng;

use crate::error::{NnError, Result};
use crate::graph::{AttentionMask, Graph, Var};
use crate::init;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => g.relu(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

/// Fully connected layer `x W + b`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init::glorot_uniform(&[inputs, outputs], inputs, outputs, rng),
            ParamKind::Weight,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]), ParamKind::Bias);
        Self { weight, bias, activation }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        let y = g.add_bias(y, b)?;
        self.activation.apply(g, y)
    }
}

/// Token embedding table `[vocab x dim]`.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
    /// When set, row 0 (padding) never receives gradient.
    pub freeze_pad: bool,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut R) -> Self {
        let table = store.add(format!("{name}.table"), init::uniform(&[vocab, dim], -0.05, 0.05, rng), ParamKind::Embedding);
        Self { table, vocab, dim, freeze_pad: false }
    }

    /// Gathers one row per id: `[ids.len() x dim]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(NnError::IdOutOfRange { id: bad, size: self.vocab });
        }
        let t = g.param(store, self.table);
        g.gather_rows(t, ids, self.freeze_pad.then_some(0))
    }
}

/// Token embedding plus a learned position table.
#[derive(Debug, Clone)]
pub struct PositionalEmbedding {
    pub tokens: Embedding,
    pub positions: Embedding,
}

impl PositionalEmbedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        max_len: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let tokens = Embedding::new(store, &format!("{name}.token"), vocab, dim, rng);
        let positions = Embedding::new(store, &format!("{name}.position"), max_len, dim, rng);
        Self { tokens, positions }
    }

    /// `ids` holds `batch` sequences of `len` ids, batch-major.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ids: &[usize], len: usize) -> Result<Var> {
        if len == 0 {
            return Ok(g.constant(Tensor::zeros(&[0, self.tokens.dim])));
        }
        if len > self.positions.vocab {
            return Err(NnError::IdOutOfRange { id: len - 1, size: self.positions.vocab });
        }
        let tok = self.tokens.forward(g, store, ids)?;
        let pos_ids: Vec<usize> = (0..ids.len()).map(|i| i % len).collect();
        let pos = self.positions.forward(g, store, &pos_ids)?;
        g.add(tok, pos)
    }
}

/// Position table on its own: rows `0..len` of a learned `[max_len x dim]` table.
pub fn positional_embedding(g: &mut Graph, store: &ParamStore, table: &Embedding, len: usize) -> Result<Var> {
    if len == 0 {
        return Ok(g.constant(Tensor::zeros(&[0, table.dim])));
    }
    let ids: Vec<usize> = (0..len).collect();
    table.forward(g, store, &ids)
}

/// Valid 1-D convolution over the time axis with filters `[kernel x channels x filters]`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub filters: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub channels: usize,
    pub out_channels: usize,
    pub activation: Activation,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        out_channels: usize,
        kernel: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * channels;
        let fan_out = kernel * out_channels;
        let filters = store.add(
            format!("{name}.filters"),
            init::glorot_uniform(&[kernel, channels, out_channels], fan_in, fan_out, rng),
            ParamKind::Weight,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]), ParamKind::Bias);
        Self { filters, bias, kernel, channels, out_channels, activation }
    }

    /// `x` is `[batch*len x channels]`; output is `[batch*(len-k+1) x filters]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, len: usize) -> Result<Var> {
        if len < self.kernel {
            return Err(NnError::InputTooShort { len, needed: self.kernel });
        }
        let cols = g.unfold(x, len, self.kernel)?;
        let f = g.param(store, self.filters);
        let f = g.reshape(f, &[self.kernel * self.channels, self.out_channels])?;
        let b = g.param(store, self.bias);
        let y = g.matmul(cols, f)?;
        let y = g.add_bias(y, b)?;
        self.activation.apply(g, y)
    }
}

/// Single-direction LSTM with gate order input, forget, candidate, output.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub kernel: ParamId,
    pub recurrent: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub units: usize,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, inputs: usize, units: usize, rng: &mut R) -> Self {
        let kernel = store.add(
            format!("{name}.kernel"),
            init::glorot_uniform(&[inputs, 4 * units], inputs, 4 * units, rng),
            ParamKind::Weight,
        );
        let recurrent = store.add(
            format!("{name}.recurrent"),
            init::glorot_uniform(&[units, 4 * units], units, 4 * units, rng),
            ParamKind::Weight,
        );
        let mut b = Tensor::zeros(&[4 * units]);
        b.data_mut()[units..2 * units].fill(1.0);
        let bias = store.add(format!("{name}.bias"), b, ParamKind::Bias);
        Self { kernel, recurrent, bias, inputs, units }
    }

    /// Runs over `x` (`[batch*len x inputs]`, batch-major). With `reverse` the
    /// sequence is consumed back to front; returned sequences are always
    /// aligned with the original time positions. Returns `[batch*len x units]`
    /// or the last processed state `[batch x units]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        len: usize,
        reverse: bool,
        return_sequences: bool,
    ) -> Result<Var> {
        let rows = g.value(x).rows();
        if len == 0 || rows % len != 0 || g.value(x).cols() != self.inputs {
            return Err(NnError::ShapeMismatch { op: "lstm", lhs: g.shape(x).to_vec(), rhs: vec![len, self.inputs] });
        }
        let batch = rows / len;
        let u = self.units;
        let w = g.param(store, self.kernel);
        let rw = g.param(store, self.recurrent);
        let b = g.param(store, self.bias);
        let xw = g.matmul(x, w)?;
        let xw = g.add_bias(xw, b)?;

        let mut h: Option<Var> = None;
        let mut c: Option<Var> = None;
        let mut outputs: Vec<Var> = Vec::with_capacity(len);
        let order: Vec<usize> = if reverse { (0..len).rev().collect() } else { (0..len).collect() };
        for &t in &order {
            let rows_t: Vec<usize> = (0..batch).map(|bi| bi * len + t).collect();
            let mut z = g.gather_rows(xw, &rows_t, None)?;
            if let Some(hp) = h {
                let hr = g.matmul(hp, rw)?;
                z = g.add(z, hr)?;
            }
            let i = g.slice_cols(z, 0, u)?;
            let i = g.sigmoid(i)?;
            let f = g.slice_cols(z, u, 2 * u)?;
            let f = g.sigmoid(f)?;
            let cand = g.slice_cols(z, 2 * u, 3 * u)?;
            let cand = g.tanh(cand)?;
            let o = g.slice_cols(z, 3 * u, 4 * u)?;
            let o = g.sigmoid(o)?;
            let ic = g.mul(i, cand)?;
            let new_c = match c {
                Some(cp) => {
                    let fc = g.mul(f, cp)?;
                    g.add(fc, ic)?
                }
                None => ic,
            };
            let tc = g.tanh(new_c)?;
            let new_h = g.mul(o, tc)?;
            c = Some(new_c);
            h = Some(new_h);
            outputs.push(new_h);
        }
        if !return_sequences {
            return Ok(h.expect("len >= 1"));
        }
        if reverse {
            outputs.reverse();
        }
        // time-major [len*batch x u] -> batch-major [batch*len x u]
        let stacked = g.concat_rows(&outputs)?;
        let perm: Vec<usize> = (0..batch * len).map(|r| (r % len) * batch + r / len).collect();
        g.gather_rows(stacked, &perm, None)
    }
}

/// Forward and reversed LSTMs with concatenated outputs (`2 * units` wide).
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub forward: Lstm,
    pub backward: Lstm,
}

impl BiLstm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, inputs: usize, units: usize, rng: &mut R) -> Self {
        let forward = Lstm::new(store, &format!("{name}.forward"), inputs, units, rng);
        let backward = Lstm::new(store, &format!("{name}.backward"), inputs, units, rng);
        Self { forward, backward }
    }

    pub fn units(&self) -> usize {
        self.forward.units
    }

    pub fn run(&self, g: &mut Graph, store: &ParamStore, x: Var, len: usize, return_sequences: bool) -> Result<Var> {
        let f = self.forward.forward(g, store, x, len, false, return_sequences)?;
        let b = self.backward.forward(g, store, x, len, true, return_sequences)?;
        g.concat_cols(&[f, b])
    }
}

/// Per-row layer normalisation with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(&[dim], 1.0), ParamKind::Norm);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), ParamKind::Norm);
        Self { gamma, beta, eps: Self::EPS }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gm = g.param(store, self.gamma);
        let bt = g.param(store, self.beta);
        g.layer_norm(x, gm, bt, self.eps)
    }
}

/// Multi-head attention with query/key/value/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub output: Dense,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(NnError::DimNotDivisible { dim, heads });
        }
        let query = Dense::new(store, &format!("{name}.query"), dim, dim, Activation::Identity, rng);
        let key = Dense::new(store, &format!("{name}.key"), dim, dim, Activation::Identity, rng);
        let value = Dense::new(store, &format!("{name}.value"), dim, dim, Activation::Identity, rng);
        let output = Dense::new(store, &format!("{name}.output"), dim, dim, Activation::Identity, rng);
        Ok(Self { query, key, value, output, heads, dim })
    }

    /// `x_q` is `[batch*len_q x dim]`, `x_kv` is `[batch*len_k x dim]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_q: Var,
        x_kv: Var,
        batch: usize,
        mask: &AttentionMask,
    ) -> Result<Var> {
        let q = self.query.forward(g, store, x_q)?;
        let k = self.key.forward(g, store, x_kv)?;
        let v = self.value.forward(g, store, x_kv)?;
        let a = g.attention(q, k, v, self.heads, batch, mask)?;
        self.output.forward(g, store, a)
    }
}
