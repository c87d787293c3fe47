//! Gated perceiver: fused search features cross-attend to both streams'
//! temporal tokens.

use super::layers::{attend, gate_branch, merge_heads, mlp, split_heads, Ctx, GateIds, MlpIds};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Initializer, LinearIds, NormIds};
use crate::tensor::{Scalar, Var};

#[derive(Clone, Copy, Debug)]
pub struct GmpLayerIds {
    pub q_norm: NormIds,
    pub kv_norm: NormIds,
    pub q: LinearIds,
    pub kv: LinearIds,
    pub proj: LinearIds,
    pub gate: GateIds,
    pub mlp_norm: NormIds,
    pub mlp: MlpIds,
}

#[derive(Clone, Debug)]
pub struct GmpIds {
    pub embed: LinearIds,
    pub layers: Vec<GmpLayerIds>,
}

impl GmpIds {
    pub fn init(init: &mut Initializer<'_>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.dim;
        let embed = init.linear("gmp.embed", 2 * d, d)?;
        let mut layers = Vec::with_capacity(cfg.gmp_layers);
        for l in 0..cfg.gmp_layers {
            let n = format!("gmp.layer{l}");
            layers.push(GmpLayerIds {
                q_norm: init.norm(&format!("{n}.q_norm"), d)?,
                kv_norm: init.norm(&format!("{n}.kv_norm"), d)?,
                q: init.linear(&format!("{n}.q"), d, d)?,
                kv: init.linear(&format!("{n}.kv"), d, 2 * d)?,
                proj: init.linear(&format!("{n}.proj"), d, d)?,
                gate: GateIds::init(init, &format!("{n}.gate"), d)?,
                mlp_norm: init.norm(&format!("{n}.mlp_norm"), d)?,
                mlp: MlpIds::init(init, &format!("{n}.mlp"), d, d * cfg.mlp_ratio)?,
            });
        }
        Ok(Self { embed, layers })
    }
}

#[derive(Clone, Debug)]
pub struct GmpOutput {
    pub out: Var,
    /// Per layer `[heads, N_s, keys]` attention weights.
    pub attention: Vec<Var>,
    /// Per layer cross-attention result before the gate.
    pub attended: Vec<Var>,
    /// Per layer gated result before the feed-forward block.
    pub gated: Vec<Var>,
}

/// Multi-head cross-attention of `x` over `keys` with a residual.
pub fn token_attention<S: Scalar>(
    ctx: &mut Ctx<'_, S>,
    ids: &GmpLayerIds,
    cfg: &ModelConfig,
    x: Var,
    keys: Var,
) -> Result<(Var, Var)> {
    let d = cfg.dim;
    let qn = ctx.norm(ids.q_norm, x, cfg.ln_eps)?;
    let q = ctx.linear(ids.q, qn)?;
    let kn = ctx.norm(ids.kv_norm, keys, cfg.ln_eps)?;
    let kv = ctx.linear(ids.kv, kn)?;
    let t = &mut *ctx.tape;
    let k = t.narrow(kv, 1, 0, d)?;
    let v = t.narrow(kv, 1, d, d)?;
    let q = split_heads(t, q, cfg.heads)?;
    let k = split_heads(t, k, cfg.heads)?;
    let v = split_heads(t, v, cfg.heads)?;
    let (o, weights) = attend(t, q, k, v)?;
    let o = merge_heads(t, o)?;
    let o = ctx.linear(ids.proj, o)?;
    Ok((ctx.tape.add(x, o)?, weights))
}

pub fn gmp_forward<S: Scalar>(
    ctx: &mut Ctx<'_, S>,
    ids: &GmpIds,
    cfg: &ModelConfig,
    f_rgb: Var,
    f_aux: Var,
    tok_rgb: Var,
    tok_aux: Var,
) -> Result<GmpOutput> {
    if ctx.tape.shape(f_rgb) != ctx.tape.shape(f_aux) || ctx.tape.shape(tok_rgb) != ctx.tape.shape(tok_aux) {
        return Err(Error::Model("perceiver streams differ in shape".into()));
    }
    let joint = ctx.tape.concat(&[f_rgb, f_aux], 1)?;
    let mut x = ctx.linear(ids.embed, joint)?;
    let keys = ctx.tape.concat(&[tok_rgb, tok_aux], 0)?;
    let mut out = GmpOutput {
        out: x,
        attention: Vec::new(),
        attended: Vec::new(),
        gated: Vec::new(),
    };
    for layer in &ids.layers {
        let (fp, weights) = token_attention(ctx, layer, cfg, x, keys)?;
        let g = gate_branch(ctx, &layer.gate, fp, cfg.gate_activation)?;
        let gated = ctx.tape.add(fp, g)?;
        let h = ctx.norm(layer.mlp_norm, gated, cfg.ln_eps)?;
        let h = mlp(ctx, layer.mlp, h)?;
        let h = ctx.drop(h)?;
        x = ctx.tape.add(gated, h)?;
        out.attention.push(weights);
        out.attended.push(fp);
        out.gated.push(gated);
    }
    out.out = x;
    Ok(out)
}
