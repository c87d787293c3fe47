//! Patch embedders, positional tables and role embeddings.

use super::layers::Ctx;
use super::{ModelConfig, Modality};
use crate::error::{Error, Result};
use crate::frame::FrameTensor;
use crate::params::{normal, Initializer, LinearIds, ParamId};
use crate::tensor::{Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Reference,
    Search,
}

#[derive(Clone, Debug)]
pub struct TokenizerIds {
    pub rgb_embed: LinearIds,
    pub aux_embed: LinearIds,
    pub pos_ref: ParamId,
    pub pos_search: ParamId,
    pub role_ref: ParamId,
    pub role_search: ParamId,
    pub role_token: ParamId,
    pub frame_embed: Option<ParamId>,
}

impl TokenizerIds {
    pub fn init(init: &mut Initializer<'_>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.dim;
        let c = FrameTensor::CHANNELS;
        let rgb_embed = init.conv("tokenizer.rgb", c, d, cfg.patch)?;
        let aux_embed = init.conv("tokenizer.aux", c, d, cfg.patch)?;
        let table = |init: &mut Initializer<'_>, name: &str, shape: &[usize]| {
            let t = normal(shape, 0.02, init.rng);
            init.add(name, t)
        };
        Ok(Self {
            rgb_embed,
            aux_embed,
            pos_ref: table(init, "tokenizer.pos_ref", &[cfg.ref_tokens(), d])?,
            pos_search: table(init, "tokenizer.pos_search", &[cfg.search_tokens(), d])?,
            role_ref: table(init, "tokenizer.role_ref", &[d])?,
            role_search: table(init, "tokenizer.role_search", &[d])?,
            role_token: table(init, "tokenizer.role_token", &[d])?,
            frame_embed: if cfg.frame_embedding {
                Some(table(init, "tokenizer.frame", &[cfg.num_refs, d])?)
            } else {
                None
            },
        })
    }
}

/// Patchify `frame` into `[H·W/p², D]` tokens with positional and role
/// embeddings. `frame_index` selects the reference-frame embedding row.
pub fn tokenize_frame<S: Scalar>(
    ctx: &mut Ctx<'_, S>,
    ids: &TokenizerIds,
    cfg: &ModelConfig,
    frame: &FrameTensor,
    role: Role,
    frame_index: usize,
) -> Result<Var> {
    let p = cfg.patch;
    let expected = match role {
        Role::Reference => cfg.ref_size,
        Role::Search => cfg.search_size,
    };
    if frame.height % p != 0 || frame.width % p != 0 {
        return Err(Error::Model(format!(
            "frame {}x{} not divisible by patch {p}",
            frame.height, frame.width
        )));
    }
    if frame.height != expected || frame.width != expected {
        return Err(Error::Model(format!(
            "{role:?} frame is {}x{}, positional table expects {expected}x{expected}",
            frame.height, frame.width
        )));
    }
    let embed = match frame.modality {
        Modality::Rgb => ids.rgb_embed,
        _ => ids.aux_embed,
    };
    let b = ctx.bound;
    let t = &mut *ctx.tape;
    let x = t.constant(frame.to_tensor())?;
    let y = t.conv2d(x, b.var(embed.w), Some(b.var(embed.b)), p, 0)?;
    let n = (frame.height / p) * (frame.width / p);
    let y = t.reshape(y, &[cfg.dim, n])?;
    let y = t.transpose(y)?;
    let (pos, role_id) = match role {
        Role::Reference => (ids.pos_ref, ids.role_ref),
        Role::Search => (ids.pos_search, ids.role_search),
    };
    let y = t.add(y, b.var(pos))?;
    let mut y = t.add(y, b.var(role_id))?;
    if let (Role::Reference, Some(fe)) = (role, ids.frame_embed) {
        if frame_index >= cfg.num_refs {
            return Err(Error::Model(format!(
                "reference index {frame_index} outside frame-embedding table of {}",
                cfg.num_refs
            )));
        }
        let row = t.narrow(b.var(fe), 0, frame_index, 1)?;
        let row = t.reshape(row, &[cfg.dim])?;
        y = t.add(y, row)?;
    }
    Ok(y)
}

/// The empty temporal token: zero content plus the token-role embedding.
pub fn make_temporal_token<S: Scalar>(
    ctx: &mut Ctx<'_, S>,
    ids: &TokenizerIds,
    cfg: &ModelConfig,
) -> Result<Var> {
    let zeros = ctx.tape.constant(Tensor::zeros(&[cfg.token_len, cfg.dim]))?;
    Ok(ctx.tape.add(zeros, ctx.bound.var(ids.role_token))?)
}
