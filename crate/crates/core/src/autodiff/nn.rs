//! Composite ops built from graph primitives.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Graph handles for the four projections of multi-head self-attention.
/// Weights are `[D, D]`, biases `[D]`.
#[derive(Debug, Clone, Copy)]
pub struct MhsaNodes {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

/// Scaled dot-product self-attention over `x: [N, T, D]` with `heads`
/// heads; softmax runs over keys.
pub fn mhsa<T: Real>(g: &mut Graph<T>, x: NodeId, p: &MhsaNodes, heads: usize) -> Result<NodeId> {
    let (n, t, d) = match g.shape(x) {
        [n, t, d] => (*n, *t, *d),
        s => return Err(Error::shape(format!("mhsa expects [N,T,D], got {s:?}"))),
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape(format!("width {d} is not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let flat = g.reshape(x, &[n * t, d])?;
    let split = |g: &mut Graph<T>, w: NodeId, b: NodeId| -> Result<NodeId> {
        let y = g.linear(flat, w, Some(b))?;
        let y = g.reshape(y, &[n, t, heads, dh])?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        g.reshape(y, &[n * heads, t, dh])
    };
    let q = split(g, p.wq, p.bq)?;
    let k = split(g, p.wk, p.bk)?;
    let v = split(g, p.wv, p.bv)?;
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, T::of(1.0 / (dh as f64).sqrt()))?;
    let weights = g.softmax(scores)?;
    let ctx = g.bmm(weights, v, false)?;
    let ctx = g.reshape(ctx, &[n, heads, t, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[n * t, d])?;
    let out = g.linear(ctx, p.wo, Some(p.bo))?;
    g.reshape(out, &[n, t, d])
}

/// Applies a `[Dout, Din]` linear map token-wise to `[N, T, Din]`.
pub fn token_linear<T: Real>(g: &mut Graph<T>, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
    let (n, t, d) = match g.shape(x) {
        [n, t, d] => (*n, *t, *d),
        s => return Err(Error::shape(format!("token_linear expects [N,T,D], got {s:?}"))),
    };
    let flat = g.reshape(x, &[n * t, d])?;
    let y = g.linear(flat, w, b)?;
    let dout = g.shape(y)[1];
    g.reshape(y, &[n, t, dout])
}

/// Layer norm of `[N, T, D]` over `D`.
pub fn layer_norm<T: Real>(g: &mut Graph<T>, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
    g.layer_norm(x, gamma, beta, T::of(1e-5))
}
