//! Permutation-equivariant network over the bid matrix `b` (n×k) and its
//! item projection `b'` (m×k).
//!
//! Each matrix is lifted to `d` channels by an exchangeable layer, then
//! attended along both of its axes (agents and bundles for `b`, items and
//! bundles for `b'`). The two attended views are concatenated and mapped
//! to one logit per position by a dense head.

use caforge_tensor::nn::{linear, multi_head_self_attention, AttentionWeights};
use caforge_tensor::{glorot_uniform, Graph, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Bound, Heads};
use crate::auction::AuctionConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionalMode {
    /// No encodings: the network is equivariant to bidder and item
    /// relabeling.
    #[default]
    None,
    /// Sinusoidal encodings of agent and bundle positions, for asymmetric
    /// bidders.
    AgentBundle,
}

impl std::str::FromStr for PositionalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PositionalMode::None),
            "agent-bundle" => Ok(PositionalMode::AgentBundle),
            other => Err(Error::config(format!("unknown positional mode {other:?}"))),
        }
    }
}

/// Which axis of an `[batch, rows, cols, d]` tensor attention runs along.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

const ATTENTION_BLOCKS: [&str; 4] = ["agent", "bundle", "item", "item_bundle"];

pub(super) fn init(d: usize, rng: &mut impl Rng) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for name in ["bids", "items"] {
        for part in ["element", "row", "column", "global"] {
            store.insert(format!("{name}.exchange.{part}"), glorot_uniform(&[1, d], rng))?;
        }
        store.insert(format!("{name}.exchange.bias"), Tensor::zeros(vec![d]))?;
    }
    for block in ATTENTION_BLOCKS {
        for proj in ["query", "key", "value", "output"] {
            store.insert(format!("{block}.attention.{proj}"), glorot_uniform(&[d, d], rng))?;
            store.insert(format!("{block}.attention.{proj}_bias"), Tensor::zeros(vec![d]))?;
        }
    }
    for (head, width) in [("agent", 2 * d), ("bundle", 2 * d), ("item", 2 * d), ("price", d)] {
        store.insert(format!("head.{head}.weight"), glorot_uniform(&[width, 1], rng))?;
        store.insert(format!("head.{head}.bias"), Tensor::zeros(vec![1]))?;
    }
    Ok(store)
}

/// `b' = (bᵀ · b_item)ᵀ` where `b_item` holds the singleton-bundle bids:
/// `b'[j][S] = Σ_i b[i][{j}] · b[i][S]`. Input `[batch, n, k]`, output
/// `[batch, m, k]`.
pub fn item_projection(g: &mut Graph, bids: Var, config: &AuctionConfig) -> Result<Var> {
    let singletons: Vec<usize> = (0..config.items()).map(|j| config.singleton(j)).collect();
    let item_bids = g.select(bids, 2, &singletons)?;
    let item_bids = g.transpose(item_bids, 1, 2)?;
    Ok(g.matmul(item_bids, bids)?)
}

fn normalize_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let total = g.sum_axis(x, 2, true)?;
    let total = g.add_scalar(total, 1e-9);
    let log = g.log(total);
    let neg = g.neg(log);
    let inv = g.exp(neg);
    Ok(g.mul(x, inv)?)
}

/// Lifts `[batch, r, c]` to `[batch, r, c, d]`:
/// `tanh(x·w_e + rowmean·w_r + colmean·w_c + mean·w_g + bias)` per channel.
pub fn exchangeable_layer(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let [batch, r, c] = shape[..] else {
        return Err(Error::config(format!(
            "exchangeable input must be [batch, r, c], got {shape:?}"
        )));
    };
    let x4 = g.reshape(x, &[batch, r, c, 1])?;
    let row = g.mean_axis(x4, 2, true)?;
    let col = g.mean_axis(x4, 1, true)?;
    let all = g.mean_axis(row, 1, true)?;
    let mut acc = g.mul(x4, p.get(&format!("{name}.exchange.element")))?;
    for (stat, part) in [(row, "row"), (col, "column"), (all, "global")] {
        let term = g.mul(stat, p.get(&format!("{name}.exchange.{part}")))?;
        acc = g.add(acc, term)?;
    }
    let acc = g.add(acc, p.get(&format!("{name}.exchange.bias")))?;
    Ok(g.tanh(acc))
}

fn attention_weights(p: &Bound, block: &str) -> AttentionWeights {
    let w = |proj: &str| p.get(&format!("{block}.attention.{proj}"));
    AttentionWeights {
        query: w("query"),
        key: w("key"),
        value: w("value"),
        output: w("output"),
        query_bias: w("query_bias"),
        key_bias: w("key_bias"),
        value_bias: w("value_bias"),
        output_bias: w("output_bias"),
    }
}

/// Self-attention along one axis of `[batch, r, c, d]`, the other axis
/// folded into the batch, plus a residual connection.
pub fn axis_attention(g: &mut Graph, x: Var, weights: &AttentionWeights, axis: Axis, heads: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let [batch, r, c, d] = shape[..] else {
        return Err(Error::config(format!(
            "axis attention input must be rank 4, got {shape:?}"
        )));
    };
    let attended = match axis {
        Axis::Cols => {
            let seq = g.reshape(x, &[batch * r, c, d])?;
            let out = multi_head_self_attention(g, seq, weights, heads)?.output;
            g.reshape(out, &[batch, r, c, d])?
        }
        Axis::Rows => {
            let t = g.permute(x, &[0, 2, 1, 3])?;
            let seq = g.reshape(t, &[batch * c, r, d])?;
            let out = multi_head_self_attention(g, seq, weights, heads)?.output;
            let out = g.reshape(out, &[batch, c, r, d])?;
            g.permute(out, &[0, 2, 1, 3])?
        }
    };
    Ok(g.add(x, attended)?)
}

/// Classic transformer encoding, `[positions, d]`.
pub fn sinusoidal_encoding(positions: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(positions * d);
    for pos in 0..positions {
        for c in 0..d {
            let rate = 10000f64.powf((2 * (c / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data.push(if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![positions, d], data).expect("encoding shape")
}

fn dense_head(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("head.{name}.weight"));
    let b = p.get(&format!("head.{name}.bias"));
    let out = linear(g, x, w, Some(b))?;
    let mut shape = g.shape(out).to_vec();
    shape.pop();
    Ok(g.reshape(out, &shape)?)
}

pub(super) struct Options {
    pub d: usize,
    pub heads: usize,
    pub positional: PositionalMode,
    pub normalize_items: bool,
}

pub(super) fn forward(g: &mut Graph, p: &Bound, config: &AuctionConfig, opts: &Options, bids: Var) -> Result<Heads> {
    let (n, k) = (config.bidders(), config.bundles());
    let d = opts.d;

    let mut projected = item_projection(g, bids, config)?;
    if opts.normalize_items {
        projected = normalize_rows(g, projected)?;
    }
    let mut b_ex = exchangeable_layer(g, p, "bids", bids)?;
    let mut items_ex = exchangeable_layer(g, p, "items", projected)?;
    if opts.positional == PositionalMode::AgentBundle {
        let agents = g.constant(sinusoidal_encoding(n, d).reshape(vec![1, n, 1, d])?);
        let bundles = g.constant(sinusoidal_encoding(k, d).reshape(vec![1, 1, k, d])?);
        b_ex = g.add(b_ex, agents)?;
        b_ex = g.add(b_ex, bundles)?;
        items_ex = g.add(items_ex, bundles)?;
    }

    let by_agent = axis_attention(g, b_ex, &attention_weights(p, "agent"), Axis::Rows, opts.heads)?;
    let by_bundle = axis_attention(g, b_ex, &attention_weights(p, "bundle"), Axis::Cols, opts.heads)?;
    let by_item = axis_attention(g, items_ex, &attention_weights(p, "item"), Axis::Rows, opts.heads)?;
    let by_item_bundle = axis_attention(
        g,
        items_ex,
        &attention_weights(p, "item_bundle"),
        Axis::Cols,
        opts.heads,
    )?;

    let bid_view = g.concat(&[by_agent, by_bundle], 3)?;
    let item_view = g.concat(&[by_item, by_item_bundle], 3)?;
    let agent = dense_head(g, p, "agent", bid_view)?;
    let bundle = dense_head(g, p, "bundle", bid_view)?;
    let item = dense_head(g, p, "item", item_view)?;

    let pooled = g.mean_axis(by_agent, 2, false)?;
    let price = dense_head(g, p, "price", pooled)?;
    let fractions = g.sigmoid(price);
    Ok(Heads {
        agent,
        bundle,
        item,
        fractions,
    })
}
