//! Layers composed from graph primitives.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};

/// `x · w + b` over the last axis of `x`, for `w` of shape `[in, out]`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let ws = g.shape(w).to_vec();
    if ws.len() != 2 || xs.last() != Some(&ws[0]) {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            lhs: xs,
            rhs: ws,
        });
    }
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add(y, b),
        None => Ok(y),
    }
}

/// Projection weights of one multi-head self-attention layer. Each is
/// `[d, d]`; biases are `[d]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub output: Var,
    pub query_bias: Var,
    pub key_bias: Var,
    pub value_bias: Var,
    pub output_bias: Var,
}

/// Output of [`multi_head_self_attention`].
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    /// `[batch, len, d]`, before any residual connection.
    pub output: Var,
    /// `[batch, heads, len, len]`; each query row sums to one.
    pub weights: Var,
}

/// Scaled dot-product self-attention over axis 1 of `x: [batch, len, d]`.
pub fn multi_head_self_attention(g: &mut Graph, x: Var, w: &AttentionWeights, heads: usize) -> Result<Attended> {
    let shape = g.shape(x).to_vec();
    let [batch, len, d] = shape[..] else {
        return Err(TensorError::invalid(
            "attention",
            format!("expected [batch, len, d], got {shape:?}"),
        ));
    };
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::invalid(
            "attention",
            format!("feature size {d} not divisible by {heads} heads"),
        ));
    }
    let dh = d / heads;
    let split = |g: &mut Graph, t: Var| -> Result<Var> {
        let t = g.reshape(t, &[batch, len, heads, dh])?;
        let t = g.permute(t, &[0, 2, 1, 3])?;
        g.reshape(t, &[batch * heads, len, dh])
    };
    let q = linear(g, x, w.query, Some(w.query_bias))?;
    let k = linear(g, x, w.key, Some(w.key_bias))?;
    let v = linear(g, x, w.value, Some(w.value_bias))?;
    let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
    let kt = g.transpose(k, 1, 2)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let weights = g.softmax(scores, 2, 1.0)?;
    let ctx = g.matmul(weights, v)?;
    let ctx = g.reshape(ctx, &[batch, heads, len, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[batch, len, d])?;
    let output = linear(g, ctx, w.output, Some(w.output_bias))?;
    let weights = g.reshape(weights, &[batch, heads, len, len])?;
    Ok(Attended { output, weights })
}
