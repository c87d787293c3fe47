//! Transformer building blocks shared by the encoder and the perceiver.

use crate::error::Result;
use crate::params::{linear, norm, Bound, Initializer, LinearIds, NormIds};
use crate::tensor::{Activation, Rng, Scalar, Tape, Tensor, Var};

/// Everything a forward pass threads through: the tape, the bound
/// parameters and (in training only) a dropout generator.
pub struct Ctx<'a, S: Scalar> {
    pub tape: &'a mut Tape<S>,
    pub bound: &'a Bound,
    pub dropout: Option<(f64, &'a mut Rng)>,
}

impl<'a, S: Scalar> Ctx<'a, S> {
    pub fn new(tape: &'a mut Tape<S>, bound: &'a Bound) -> Self {
        Self {
            tape,
            bound,
            dropout: None,
        }
    }

    pub fn linear(&mut self, ids: LinearIds, x: Var) -> Result<Var> {
        linear(self.tape, self.bound, ids, x)
    }

    pub fn norm(&mut self, ids: NormIds, x: Var, eps: f64) -> Result<Var> {
        norm(self.tape, self.bound, ids, x, eps)
    }

    pub fn drop(&mut self, x: Var) -> Result<Var> {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        if *rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - *rate);
        let shape = self.tape.shape(x).to_vec();
        let mask = Tensor::from_fn(&shape, |_| {
            S::from_f64(if rng.bernoulli(*rate) { 0.0 } else { keep })
        });
        let mask = self.tape.constant(mask)?;
        Ok(self.tape.mul(x, mask)?)
    }
}

/// `[L, D] -> [heads, L, D/heads]`
pub fn split_heads<S: Scalar>(tape: &mut Tape<S>, x: Var, heads: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (l, d) = (shape[0], shape[1]);
    let x = tape.reshape(x, &[l, heads, d / heads])?;
    Ok(tape.permute(x, &[1, 0, 2])?)
}

/// `[heads, L, dh] -> [L, heads * dh]`
pub fn merge_heads<S: Scalar>(tape: &mut Tape<S>, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (h, l, dh) = (shape[0], shape[1], shape[2]);
    let x = tape.permute(x, &[1, 0, 2])?;
    Ok(tape.reshape(x, &[l, h * dh])?)
}

/// Scaled dot-product attention per head; returns output and weights.
pub fn attend<S: Scalar>(tape: &mut Tape<S>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let dh = tape.shape(q)[2];
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let weights = tape.softmax(scores)?;
    let out = tape.bmm(weights, v, false)?;
    Ok((out, weights))
}

#[derive(Clone, Copy, Debug)]
pub struct MlpIds {
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

impl MlpIds {
    pub fn init(init: &mut Initializer<'_>, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: init.linear(&format!("{name}.fc1"), dim, hidden)?,
            fc2: init.linear(&format!("{name}.fc2"), hidden, dim)?,
        })
    }
}

pub fn mlp<S: Scalar>(ctx: &mut Ctx<'_, S>, ids: MlpIds, x: Var) -> Result<Var> {
    let h = ctx.linear(ids.fc1, x)?;
    let h = ctx.tape.gelu(h)?;
    ctx.linear(ids.fc2, h)
}

/// Token counts of the joint `[references | search | token]` sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segments {
    pub refs: usize,
    pub search: usize,
    pub token: usize,
}

impl Segments {
    pub fn total(&self) -> usize {
        self.refs + self.search + self.token
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerIds {
    pub norm1: NormIds,
    pub qkv: LinearIds,
    pub proj: LinearIds,
    pub norm2: NormIds,
    pub mlp: MlpIds,
}

impl EncoderLayerIds {
    pub fn init(init: &mut Initializer<'_>, name: &str, dim: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            norm1: init.norm(&format!("{name}.norm1"), dim)?,
            qkv: init.linear(&format!("{name}.qkv"), dim, 3 * dim)?,
            proj: init.linear(&format!("{name}.proj"), dim, dim)?,
            norm2: init.norm(&format!("{name}.norm2"), dim)?,
            mlp: MlpIds::init(init, &format!("{name}.mlp"), dim, dim * mlp_ratio)?,
        })
    }
}

/// Shared projections for one layer: per-head `q`, `k`, `v` over the whole sequence.
fn project_qkv<S: Scalar>(
    ctx: &mut Ctx<'_, S>,
    ids: &EncoderLayerIds,
    x: Var,
    heads: usize,
    eps: f64,
) -> Result<[Var; 3]> {
    let h = ctx.norm(ids.norm1, x, eps)?;
    let qkv = ctx.linear(ids.qkv, h)?;
    let d = ctx.tape.shape(x)[1];
    let mut out = [x; 3];
    for (i, slot) in out.iter_mut().enumerate() {
        let part = ctx.tape.narrow(qkv, 1, i * d, d)?;
        *slot = split_heads(ctx.tape, part, heads)?;
    }
    Ok(out)
}

/// Full joint attention: every position attends to every position.
pub fn concat_attention<S: Scalar>(
    ctx: &mut Ctx<'_, S>,
    ids: &EncoderLayerIds,
    x: Var,
    heads: usize,
    eps: f64,
) -> Result<Var> {
    let [q, k, v] = project_qkv(ctx, ids, x, heads, eps)?;
    let (o, _) = attend(ctx.tape, q, k, v)?;
    merge_heads(ctx.tape, o)
}

/// Three sub-passes with shared projections: references attend among
/// themselves, search attends to references and search, the token attends
/// to everything.
pub fn separated_attention<S: Scalar>(
    ctx: &mut Ctx<'_, S>,
    ids: &EncoderLayerIds,
    x: Var,
    seg: Segments,
    heads: usize,
    eps: f64,
) -> Result<Var> {
    let [q, k, v] = project_qkv(ctx, ids, x, heads, eps)?;
    let t = &mut *ctx.tape;
    let mut parts = Vec::with_capacity(3);
    let passes = [
        (0, seg.refs, seg.refs),
        (seg.refs, seg.search, seg.refs + seg.search),
        (seg.refs + seg.search, seg.token, seg.total()),
    ];
    for (q_start, q_len, kv_len) in passes {
        if q_len == 0 {
            continue;
        }
        let qs = t.narrow(q, 1, q_start, q_len)?;
        let ks = t.narrow(k, 1, 0, kv_len)?;
        let vs = t.narrow(v, 1, 0, kv_len)?;
        parts.push(attend(t, qs, ks, vs)?.0);
    }
    let o = t.concat(&parts, 1)?;
    merge_heads(t, o)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Concat,
    Separate(Segments),
}

/// Pre-norm layer: `x + Attn(LN(x))`, then `+ MLP(LN(.))`.
pub fn encoder_layer<S: Scalar>(
    ctx: &mut Ctx<'_, S>,
    ids: &EncoderLayerIds,
    x: Var,
    variant: Variant,
    heads: usize,
    eps: f64,
) -> Result<Var> {
    let a = match variant {
        Variant::Concat => concat_attention(ctx, ids, x, heads, eps)?,
        Variant::Separate(seg) => separated_attention(ctx, ids, x, seg, heads, eps)?,
    };
    let a = ctx.linear(ids.proj, a)?;
    let a = ctx.drop(a)?;
    let x = ctx.tape.add(x, a)?;
    let h = ctx.norm(ids.norm2, x, eps)?;
    let h = mlp(ctx, ids.mlp, h)?;
    let h = ctx.drop(h)?;
    Ok(ctx.tape.add(x, h)?)
}

/// Zero-initialized gated residual branch: `act(g) * fc2(gelu(fc1(x)))`.
#[derive(Clone, Copy, Debug)]
pub struct GateIds {
    pub fc1: LinearIds,
    pub fc2: LinearIds,
    pub gain: crate::params::ParamId,
}

impl GateIds {
    pub fn init(init: &mut Initializer<'_>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: init.linear(&format!("{name}.fc1"), dim, dim)?,
            fc2: init.zero_linear(&format!("{name}.fc2"), dim, dim)?,
            gain: init.add(&format!("{name}.gain"), Tensor::full(&[dim], 1.0))?,
        })
    }
}

pub fn gate_branch<S: Scalar>(
    ctx: &mut Ctx<'_, S>,
    ids: &GateIds,
    x: Var,
    act: Activation,
) -> Result<Var> {
    let h = ctx.linear(ids.fc1, x)?;
    let h = ctx.tape.gelu(h)?;
    let h = ctx.linear(ids.fc2, h)?;
    let g = ctx.tape.activation(ctx.bound.var(ids.gain), act)?;
    Ok(ctx.tape.mul(h, g)?)
}

/// Conditional gate between the RGB and auxiliary streams.
#[derive(Clone, Copy, Debug)]
pub struct ConditionalGateIds {
    pub embed: LinearIds,
    pub branch: GateIds,
}

impl ConditionalGateIds {
    pub fn init(init: &mut Initializer<'_>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            embed: init.linear(&format!("{name}.embed"), 2 * dim, dim)?,
            branch: GateIds::init(init, &format!("{name}.branch"), dim)?,
        })
    }
}

/// `u = gate(embed([rgb, aux]))`, added to both streams.
pub fn conditional_gate<S: Scalar>(
    ctx: &mut Ctx<'_, S>,
    ids: &ConditionalGateIds,
    rgb: Var,
    aux: Var,
    act: Activation,
) -> Result<(Var, Var)> {
    let joint = ctx.tape.concat(&[rgb, aux], 1)?;
    let e = ctx.linear(ids.embed, joint)?;
    let u = gate_branch(ctx, &ids.branch, e, act)?;
    Ok((ctx.tape.add(rgb, u)?, ctx.tape.add(aux, u)?))
}
