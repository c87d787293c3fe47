//! Shared multi-layer encoder with inter-stream conditional gates.

use super::layers::{conditional_gate, encoder_layer, ConditionalGateIds, Ctx, EncoderLayerIds, Segments, Variant};
use super::{AttentionVariant, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{Initializer, NormIds, ParamGroup};
use crate::tensor::{Scalar, Var};

#[derive(Clone, Debug)]
pub struct EncoderIds {
    pub layers: Vec<EncoderLayerIds>,
    /// One entry per layer; `Some` where a gate follows that layer.
    pub gates: Vec<Option<ConditionalGateIds>>,
    pub final_norm: NormIds,
}

impl EncoderIds {
    pub fn init(init: &mut Initializer<'_>, cfg: &ModelConfig) -> Result<Self> {
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            layers.push(EncoderLayerIds::init(init, &format!("encoder.layer{l}"), cfg.dim, cfg.mlp_ratio)?);
        }
        let final_norm = init.norm("encoder.norm", cfg.dim)?;
        let group = std::mem::replace(&mut init.group, ParamGroup::Rest);
        let mut gates = vec![None; cfg.layers];
        for &l in &cfg.gate_layers {
            gates[l] = Some(ConditionalGateIds::init(init, &format!("gate{l}"), cfg.dim)?);
        }
        init.group = group;
        Ok(Self {
            layers,
            gates,
            final_norm,
        })
    }
}

/// Per-layer record of an encoder run, kept for inspection.
#[derive(Clone, Debug)]
pub struct EncoderTrace {
    /// Stream outputs after each layer (and its gate, when present).
    pub layers: Vec<Vec<Var>>,
    pub gates_invoked: usize,
}

/// Run one or two joint sequences through the shared layers.
///
/// With two streams a conditional gate mixes them after every gated layer.
/// Outputs are final-normalized.
pub fn encode<S: Scalar>(
    ctx: &mut Ctx<'_, S>,
    ids: &EncoderIds,
    cfg: &ModelConfig,
    streams: &[Var],
    seg: Segments,
) -> Result<(Vec<Var>, EncoderTrace)> {
    if streams.is_empty() || streams.len() > 2 {
        return Err(Error::Model(format!("encoder takes 1 or 2 streams, got {}", streams.len())));
    }
    for &s in streams {
        let shape = ctx.tape.shape(s);
        if shape != [seg.total(), cfg.dim] {
            return Err(Error::Model(format!(
                "stream shape {shape:?} does not match [{}, {}]",
                seg.total(),
                cfg.dim
            )));
        }
    }
    let variant = match cfg.attention {
        AttentionVariant::Concat => Variant::Concat,
        AttentionVariant::Separate => Variant::Separate(seg),
    };
    let mut xs = streams.to_vec();
    let mut trace = EncoderTrace {
        layers: Vec::with_capacity(cfg.layers),
        gates_invoked: 0,
    };
    for (layer, gate) in ids.layers.iter().zip(&ids.gates) {
        for x in xs.iter_mut() {
            *x = encoder_layer(ctx, layer, *x, variant, cfg.heads, cfg.ln_eps)?;
        }
        if let (Some(gate), [rgb, aux]) = (gate, xs.as_mut_slice()) {
            let (r, a) = conditional_gate(ctx, gate, *rgb, *aux, cfg.gate_activation)?;
            *rgb = r;
            *aux = a;
            trace.gates_invoked += 1;
        }
        trace.layers.push(xs.clone());
    }
    for x in xs.iter_mut() {
        *x = ctx.norm(ids.final_norm, *x, cfg.ln_eps)?;
    }
    Ok((xs, trace))
}
