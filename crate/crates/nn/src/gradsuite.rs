//! Finite-difference checks for every differentiable op and layer, over
//! randomly drawn shapes. Used by the test suites and available to callers
//! that want to self-check the engine.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::grad_check_with_params;
use crate::graph::{AttentionMask, Graph, Var};
use crate::init;
use crate::layers::{Activation, BiLstm, Conv1d, Dense, Embedding, LayerNorm, Lstm, MultiHeadAttention};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Worst relative error seen for one layer over all its random cases.
#[derive(Debug, Clone)]
pub struct LayerCheck {
    pub layer: &'static str,
    pub cases: usize,
    pub max_rel_error: f64,
}

pub const LAYERS: &[&str] = &[
    "dense",
    "conv1d",
    "maxpool",
    "global_maxpool",
    "embedding",
    "lstm",
    "bilstm",
    "attention",
    "layer_norm",
    "softmax",
    "bce",
    "bce_with_logits",
    "masked_cross_entropy",
    "l2_penalty",
    "dropout",
];

/// Contracts `out` against fixed pseudo-random weights to a scalar.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = init::uniform(g.shape(out), -1.0, 1.0, &mut rng);
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn input(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    init::uniform(&[rows, cols], -1.0, 1.0, rng)
}

/// Random case `seed` for `layer`; returns the max relative error.
pub fn check_case(layer: &str, seed: u64, eps: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919).wrapping_add(layer.len() as u64));
    let mut store = ParamStore::new();
    match layer {
        "dense" => {
            let (m, n, o) = (rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..5));
            let act = [Activation::Identity, Activation::Relu, Activation::Sigmoid, Activation::Tanh][rng.gen_range(0..4)];
            let dense = Dense::new(&mut store, "d", n, o, act, &mut rng);
            for id in [dense.bias] {
                store.get_mut(id).value = init::uniform(&[o], -0.5, 0.5, &mut rng);
            }
            let x = input(&mut rng, m, n);
            grad_check_with_params(&mut store, &x, eps, |g, s, x| {
                let y = dense.forward(g, s, x)?;
                project(g, y, seed)
            })
        }
        "conv1d" => {
            let k = rng.gen_range(1..4);
            let (batch, len, ch, f) = (rng.gen_range(1..3), k + rng.gen_range(0..3), rng.gen_range(1..3), rng.gen_range(1..4));
            let conv = Conv1d::new(&mut store, "c", ch, f, k, Activation::Relu, &mut rng);
            store.get_mut(conv.bias).value = init::uniform(&[f], -0.3, 0.3, &mut rng);
            let x = input(&mut rng, batch * len, ch);
            grad_check_with_params(&mut store, &x, eps, |g, s, x| {
                let y = conv.forward(g, s, x, len)?;
                project(g, y, seed)
            })
        }
        "maxpool" => {
            let pool = rng.gen_range(1..4);
            let (batch, len, c) = (rng.gen_range(1..3), pool + rng.gen_range(0..4), rng.gen_range(1..4));
            let x = input(&mut rng, batch * len, c);
            grad_check_with_params(&mut store, &x, eps, |g, _, x| {
                let y = g.max_pool(x, len, pool)?;
                project(g, y, seed)
            })
        }
        "global_maxpool" => {
            let (batch, len, c) = (rng.gen_range(1..3), rng.gen_range(1..6), rng.gen_range(1..4));
            let x = input(&mut rng, batch * len, c);
            grad_check_with_params(&mut store, &x, eps, |g, _, x| {
                let y = g.global_max_pool(x, len)?;
                project(g, y, seed)
            })
        }
        "embedding" => {
            let (vocab, dim, n) = (rng.gen_range(2..6), rng.gen_range(1..4), rng.gen_range(1..6));
            let emb = Embedding::new(&mut store, "e", vocab, dim, &mut rng);
            let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..vocab)).collect();
            let table = input(&mut rng, vocab, dim);
            // gradient into a table given as input, and into the layer's own table
            grad_check_with_params(&mut store, &table, eps, |g, s, t| {
                let a = g.gather_rows(t, &ids, None)?;
                let b = emb.forward(g, s, &ids)?;
                let y = g.mul(a, b)?;
                project(g, y, seed)
            })
        }
        "lstm" => {
            let (batch, len, d, u) = (rng.gen_range(1..3), rng.gen_range(1..5), rng.gen_range(1..4), rng.gen_range(1..4));
            let reverse = rng.gen_bool(0.5);
            let seqs = rng.gen_bool(0.5);
            let lstm = Lstm::new(&mut store, "l", d, u, &mut rng);
            let x = input(&mut rng, batch * len, d);
            grad_check_with_params(&mut store, &x, eps, |g, s, x| {
                let y = lstm.forward(g, s, x, len, reverse, seqs)?;
                project(g, y, seed)
            })
        }
        "bilstm" => {
            let (batch, len, d, u) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..3), rng.gen_range(1..3));
            let seqs = rng.gen_bool(0.5);
            let bi = BiLstm::new(&mut store, "b", d, u, &mut rng);
            let x = input(&mut rng, batch * len, d);
            grad_check_with_params(&mut store, &x, eps, |g, s, x| {
                let y = bi.run(g, s, x, len, seqs)?;
                project(g, y, seed)
            })
        }
        "attention" => {
            let heads = rng.gen_range(1..3);
            let dim = heads * rng.gen_range(1..3);
            let (batch, lq, lk) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
            let self_attn = rng.gen_bool(0.5);
            let lk = if self_attn { lq } else { lk };
            let causal = self_attn && rng.gen_bool(0.5);
            let key_valid: Option<Vec<bool>> = rng
                .gen_bool(0.5)
                .then(|| (0..batch * lk).map(|j| j % lk == 0 || rng.gen_bool(0.6)).collect());
            let mask = AttentionMask { causal, key_valid };
            let mha = MultiHeadAttention::new(&mut store, "a", dim, heads, &mut rng)?;
            let biases: Vec<_> = store.iter().filter(|(_, p)| p.kind == ParamKind::Bias).map(|(id, _)| id).collect();
            for id in biases {
                let n = store.value(id).numel();
                store.get_mut(id).value = init::uniform(&[n], -0.3, 0.3, &mut rng);
            }
            let x = input(&mut rng, batch * lq, dim);
            let kv = input(&mut rng, batch * lk, dim);
            grad_check_with_params(&mut store, &x, eps, |g, s, x| {
                let src = if self_attn { x } else { g.constant(kv.clone()) };
                let y = mha.forward(g, s, x, src, batch, &mask)?;
                project(g, y, seed)
            })
        }
        "layer_norm" => {
            let (rows, n) = (rng.gen_range(1..4), rng.gen_range(2..6));
            let ln = LayerNorm::new(&mut store, "n", n);
            store.get_mut(ln.gamma).value = init::uniform(&[n], 0.5, 1.5, &mut rng);
            store.get_mut(ln.beta).value = init::uniform(&[n], -0.5, 0.5, &mut rng);
            let x = input(&mut rng, rows, n);
            grad_check_with_params(&mut store, &x, eps, |g, s, x| {
                let y = ln.forward(g, s, x)?;
                project(g, y, seed)
            })
        }
        "softmax" => {
            let (rows, cols) = (rng.gen_range(1..4), rng.gen_range(1..6));
            let x = input(&mut rng, rows, cols);
            grad_check_with_params(&mut store, &x, eps, |g, _, x| {
                let y = g.softmax(x)?;
                project(g, y, seed)
            })
        }
        "bce" => {
            let n = rng.gen_range(1..6);
            let targets: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            let x = input(&mut rng, n, 1);
            grad_check_with_params(&mut store, &x, eps, |g, _, x| {
                let p = g.sigmoid(x)?;
                g.bce(p, &targets)
            })
        }
        "bce_with_logits" => {
            let n = rng.gen_range(1..6);
            let targets: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            let x = init::uniform(&[n, 1], -4.0, 4.0, &mut rng);
            grad_check_with_params(&mut store, &x, eps, |g, _, x| g.bce_with_logits(x, &targets))
        }
        "masked_cross_entropy" => {
            let (rows, v) = (rng.gen_range(1..5), rng.gen_range(2..6));
            let targets: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..v)).collect();
            let mut valid: Vec<bool> = (0..rows).map(|_| rng.gen_bool(0.7)).collect();
            valid[0] = true;
            let x = init::uniform(&[rows, v], -3.0, 3.0, &mut rng);
            grad_check_with_params(&mut store, &x, eps, |g, _, x| g.masked_cross_entropy(x, &targets, &valid))
        }
        "l2_penalty" => {
            let (i, o) = (rng.gen_range(1..4), rng.gen_range(1..4));
            Dense::new(&mut store, "d", i, o, Activation::Identity, &mut rng);
            let lambda = rng.gen_range(0.01..2.0);
            let x = input(&mut rng, 1, 2);
            grad_check_with_params(&mut store, &x, eps, |g, s, x| {
                let pen = g.l2_penalty(s, lambda)?;
                let sx = g.sum_squares(x)?;
                g.add(pen, sx)
            })
        }
        "dropout" => {
            let (rows, cols) = (rng.gen_range(1..4), rng.gen_range(1..5));
            let rate = rng.gen_range(0.1..0.7);
            let x = input(&mut rng, rows, cols);
            grad_check_with_params(&mut store, &x, eps, |g, _, x| {
                let mut mask_rng = ChaCha8Rng::seed_from_u64(seed);
                let y = g.dropout(x, rate, true, &mut mask_rng)?;
                project(g, y, seed)
            })
        }
        other => panic!("unknown layer {other}"),
    }
}

/// Runs `cases` random cases for every entry of [`LAYERS`].
pub fn layer_gradient_suite(cases: usize, eps: f64) -> Result<Vec<LayerCheck>> {
    LAYERS
        .iter()
        .map(|&layer| {
            let mut worst = 0.0f64;
            for seed in 0..cases as u64 {
                worst = worst.max(check_case(layer, seed, eps)?);
            }
            Ok(LayerCheck { layer, cases, max_rel_error: worst })
        })
        .collect()
}
