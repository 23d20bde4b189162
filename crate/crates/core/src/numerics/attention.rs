use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::params::{Bound, Parameters};
use super::scalar::{cst, Scalar};

/// Graph handles for one multi-head attention block: query/key/value/output
/// projections, each `[D, D]` with a `[D]` bias.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

const PROJ: [&str; 4] = ["q", "k", "v", "o"];

pub fn init_attention<T: Scalar>(params: &mut Parameters<T>, prefix: &str, dim: usize) -> Result<()> {
    for p in PROJ {
        params.kaiming(&format!("{prefix}.{p}.w"), &[dim, dim])?;
        params.zeros(&format!("{prefix}.{p}.b"), &[dim])?;
    }
    Ok(())
}

impl AttentionVars {
    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        let get = |p: &str, s: &str| bound.get(&format!("{prefix}.{p}.{s}"));
        Ok(Self {
            wq: get("q", "w")?,
            bq: get("q", "b")?,
            wk: get("k", "w")?,
            bk: get("k", "b")?,
            wv: get("v", "w")?,
            bv: get("v", "b")?,
            wo: get("o", "w")?,
            bo: get("o", "b")?,
        })
    }
}

/// Scaled dot-product attention over `heads` column groups, concatenated and
/// output-projected. `query: [Nq,D]`, `key`/`value: [Nk,D]`.
///
/// The score matmuls are counted under the `attention_scores` FLOP label.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    query: Var,
    key: Var,
    value: Var,
    p: &AttentionVars,
    heads: usize,
) -> Result<Var> {
    let d = *g.shape(query).last().unwrap();
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidArgument(format!("feature dim {d} not divisible by {heads} heads")));
    }
    if g.shape(key)[0] == 0 {
        return Err(Error::InvalidArgument("attention needs at least one key".into()));
    }
    let dh = d / heads;
    let q = g.linear(query, p.wq, p.bq)?;
    let k = g.linear(key, p.wk, p.bk)?;
    let v = g.linear(value, p.wv, p.bv)?;
    let scale = cst::<T>(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let scores = g.matmul_labeled(qh, kh, true, "attention_scores")?;
        let scores = g.scale(scores, scale)?;
        let attn = g.softmax(scores)?;
        outs.push(g.matmul_labeled(attn, vh, false, "attention_values")?);
    }
    let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
    g.linear(cat, p.wo, p.bo)
}

/// Exact multiply-accumulate count of the score matrices: `Nq·Nk·D`.
pub fn score_macs(nq: usize, nk: usize, dim: usize) -> u64 {
    (nq * nk * dim) as u64
}
