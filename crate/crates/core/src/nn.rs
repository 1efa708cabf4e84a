//! Small layer helpers shared by the aggregator and the projectors.

use imitate_autodiff::{Graph, Var};

use crate::error::Result;
use crate::params::Bound;

/// `x·W + b` with `W: [in, out]`, `b: [out]`; `x` may be `[n, in]` or `[b, n, in]`.
pub fn linear(g: &mut Graph, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let y = g.matmul(x, p.var(&format!("{prefix}.weight")))?;
    Ok(g.add(y, p.var(&format!("{prefix}.bias")))?)
}

/// Layer normalisation over the last axis with learned gain and shift.
pub fn layer_norm(g: &mut Graph, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let n = g.layer_norm(x, 1e-5);
    let s = g.mul(n, p.var(&format!("{prefix}.gamma")))?;
    Ok(g.add(s, p.var(&format!("{prefix}.beta")))?)
}

/// Multi-head self-attention over `[n, t, d]`. Returns the projected
/// output `[n, t, d]` and the attention weights `[n·heads, t, t]`.
pub fn self_attention(g: &mut Graph, p: &Bound, x: Var, heads: usize, prefix: &str) -> Result<(Var, Var)> {
    let shape = g.shape(x).to_vec();
    let (n, t, d) = (shape[0], shape[1], shape[2]);
    let dh = d / heads;
    let split = |g: &mut Graph, name: &str| -> Result<Var> {
        let y = if name == "k" {
            // a key bias only shifts each score row by a constant, which softmax ignores
            g.matmul(x, p.var(&format!("{prefix}.k.weight")))?
        } else {
            linear(g, p, x, &format!("{prefix}.{name}"))?
        };
        let y = g.reshape(y, &[n, t, heads, dh])?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        Ok(g.reshape(y, &[n * heads, t, dh])?)
    };
    let q = split(g, "q")?;
    let k = split(g, "k")?;
    let v = split(g, "v")?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = g.softmax(scores);
    let o = g.matmul(attn, v)?;
    let o = g.reshape(o, &[n, heads, t, dh])?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let o = g.reshape(o, &[n, t, d])?;
    let out = linear(g, p, o, &format!("{prefix}.o"))?;
    Ok((out, attn))
}
