//! The tracking network: tokenizers, shared encoder, gated perceiver, head.

mod config;
pub mod encoder;
pub mod gmp;
pub mod head;
pub mod layers;
pub mod loss;
pub mod tokenizer;

pub use config::{AttentionVariant, Modality, ModelConfig, Task};
pub use head::{HeadMaps, MapVars};
pub use layers::{Ctx, Segments};
pub use loss::{FrameTarget, LossTerms, LossValues};
pub use tokenizer::Role;

use crate::checkpoint::{Checkpoint, ScalarWidth};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::frame::FrameTensor;
use crate::params::{Initializer, ParamGroup, ParamStore};
use crate::tensor::{Rng, Scalar, Var};
use encoder::{EncoderIds, EncoderTrace};
use gmp::{GmpIds, GmpOutput};
use head::HeadIds;
use tokenizer::TokenizerIds;

/// RGB frame plus the optional auxiliary frame captured with it.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePair {
    pub rgb: FrameTensor,
    pub aux: Option<FrameTensor>,
}

#[derive(Clone, Debug)]
pub struct ModelIds {
    pub tokenizer: TokenizerIds,
    pub encoder: EncoderIds,
    pub gmp: GmpIds,
    pub head: HeadIds,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub ids: ModelIds,
}

/// Reference tokens per stream, `[k·N_r, D]` each.
#[derive(Clone, Copy, Debug)]
pub struct RefTokens {
    pub rgb: Var,
    pub aux: Option<Var>,
}

/// Temporal tokens per stream, `[n_tok, D]` each.
#[derive(Clone, Copy, Debug)]
pub struct Tokens {
    pub rgb: Var,
    pub aux: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub maps: MapVars,
    /// Output temporal tokens (final-normalized encoder outputs).
    pub tokens: Tokens,
    /// What the head consumed.
    pub head_input: Var,
    /// Final-normalized search features per stream.
    pub search: Vec<Var>,
    pub encoder: EncoderTrace,
    pub gmp: Option<GmpOutput>,
}

#[derive(Clone, Debug)]
pub struct ClipOutput {
    pub loss: Var,
    pub values: LossValues,
    pub steps: Vec<StepOutput>,
    /// Tokens fed to each search step.
    pub tokens_in: Vec<Tokens>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(config.init_seed);
        let mut init = Initializer {
            store: &mut store,
            rng: &mut rng,
            group: ParamGroup::Backbone,
        };
        let tokenizer = TokenizerIds::init(&mut init, &config)?;
        let encoder = EncoderIds::init(&mut init, &config)?;
        init.group = ParamGroup::Rest;
        let gmp = GmpIds::init(&mut init, &config)?;
        let head = HeadIds::init(&mut init, &config)?;
        Ok(Self {
            config,
            store,
            ids: ModelIds {
                tokenizer,
                encoder,
                gmp,
                head,
            },
        })
    }

    /// Checkpoint holding the parameters and `config` plus any `extra` keys.
    pub fn to_checkpoint(&self, width: ScalarWidth, extra: Option<&KeyValues>) -> Checkpoint {
        let mut kv = self.config.to_key_values();
        if let Some(extra) = extra {
            kv.merge(extra.clone());
        }
        Checkpoint {
            width,
            config: kv.to_text(),
            params: self.store.named(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut kv = KeyValues::parse(&ckpt.config)?;
        let config = ModelConfig::take_from(&mut kv)?;
        let mut model = Self::new(config)?;
        model.store.load_named(&ckpt.params)?;
        Ok(model)
    }

    pub fn segments(&self) -> Segments {
        let c = &self.config;
        Segments {
            refs: c.num_refs * c.ref_tokens(),
            search: c.search_tokens(),
            token: c.token_len,
        }
    }

    pub fn embed_refs<S: Scalar>(&self, ctx: &mut Ctx<'_, S>, refs: &[FramePair]) -> Result<RefTokens> {
        let cfg = &self.config;
        if refs.len() != cfg.num_refs {
            return Err(Error::Model(format!(
                "expected {} reference frames, got {}",
                cfg.num_refs,
                refs.len()
            )));
        }
        let dual = refs[0].aux.is_some();
        let mut rgb = Vec::with_capacity(refs.len());
        let mut aux = Vec::with_capacity(refs.len());
        for (i, r) in refs.iter().enumerate() {
            rgb.push(tokenizer::tokenize_frame(ctx, &self.ids.tokenizer, cfg, &r.rgb, Role::Reference, i)?);
            match (&r.aux, dual) {
                (Some(a), true) => aux.push(tokenizer::tokenize_frame(ctx, &self.ids.tokenizer, cfg, a, Role::Reference, i)?),
                (None, false) => {}
                _ => return Err(Error::Model("references mix single- and dual-stream frames".into())),
            }
        }
        Ok(RefTokens {
            rgb: ctx.tape.concat(&rgb, 0)?,
            aux: if dual { Some(ctx.tape.concat(&aux, 0)?) } else { None },
        })
    }

    pub fn empty_tokens<S: Scalar>(&self, ctx: &mut Ctx<'_, S>, dual: bool) -> Result<Tokens> {
        let rgb = tokenizer::make_temporal_token(ctx, &self.ids.tokenizer, &self.config)?;
        let aux = if dual {
            Some(tokenizer::make_temporal_token(ctx, &self.ids.tokenizer, &self.config)?)
        } else {
            None
        };
        Ok(Tokens { rgb, aux })
    }

    /// Next step's input tokens: previous output plus the empty token.
    pub fn propagate<S: Scalar>(&self, ctx: &mut Ctx<'_, S>, prev: &Tokens) -> Result<Tokens> {
        let empty = self.empty_tokens(ctx, prev.aux.is_some())?;
        let rgb = ctx.tape.add(prev.rgb, empty.rgb)?;
        let aux = match (prev.aux, empty.aux) {
            (Some(p), Some(e)) => Some(ctx.tape.add(p, e)?),
            _ => None,
        };
        Ok(Tokens { rgb, aux })
    }

    /// One search frame through encoder, perceiver (dual-stream) and head.
    pub fn step<S: Scalar>(
        &self,
        ctx: &mut Ctx<'_, S>,
        refs: &RefTokens,
        search: &FramePair,
        tokens: &Tokens,
    ) -> Result<StepOutput> {
        let cfg = &self.config;
        let dual = refs.aux.is_some();
        if dual != search.aux.is_some() || dual != tokens.aux.is_some() {
            return Err(Error::Model("stream count differs between references, search and tokens".into()));
        }
        let seg = self.segments();
        let s_rgb = tokenizer::tokenize_frame(ctx, &self.ids.tokenizer, cfg, &search.rgb, Role::Search, 0)?;
        let mut streams = vec![ctx.tape.concat(&[refs.rgb, s_rgb, tokens.rgb], 0)?];
        if let (Some(r), Some(s), Some(t)) = (refs.aux, &search.aux, tokens.aux) {
            let s_aux = tokenizer::tokenize_frame(ctx, &self.ids.tokenizer, cfg, s, Role::Search, 0)?;
            streams.push(ctx.tape.concat(&[r, s_aux, t], 0)?);
        }
        let (outs, trace) = encoder::encode(ctx, &self.ids.encoder, cfg, &streams, seg)?;
        let mut search_feats = Vec::with_capacity(outs.len());
        let mut out_tokens = Vec::with_capacity(outs.len());
        for &o in &outs {
            search_feats.push(ctx.tape.narrow(o, 0, seg.refs, seg.search)?);
            out_tokens.push(ctx.tape.narrow(o, 0, seg.refs + seg.search, seg.token)?);
        }
        let gmp = if dual {
            Some(gmp::gmp_forward(
                ctx,
                &self.ids.gmp,
                cfg,
                search_feats[0],
                search_feats[1],
                out_tokens[0],
                out_tokens[1],
            )?)
        } else {
            None
        };
        let head_input = head_input(&search_feats, gmp.as_ref())?;
        let maps = head::predict_maps(ctx, &self.ids.head, cfg, head_input)?;
        Ok(StepOutput {
            maps,
            tokens: Tokens {
                rgb: out_tokens[0],
                aux: out_tokens.get(1).copied(),
            },
            head_input,
            search: search_feats,
            encoder: trace,
            gmp,
        })
    }

    /// Run a training clip: every search frame in order with the token
    /// chain (or always the empty token when `propagate` is off), then the
    /// frame-averaged loss.
    pub fn forward_clip<S: Scalar>(
        &self,
        ctx: &mut Ctx<'_, S>,
        refs: &[FramePair],
        searches: &[FramePair],
        targets: &[FrameTarget],
        propagate: bool,
    ) -> Result<ClipOutput> {
        if searches.len() != targets.len() {
            return Err(Error::Model(format!(
                "{} search frames but {} targets",
                searches.len(),
                targets.len()
            )));
        }
        let ref_tokens = self.embed_refs(ctx, refs)?;
        let dual = ref_tokens.aux.is_some();
        let mut steps: Vec<StepOutput> = Vec::with_capacity(searches.len());
        let mut tokens_in = Vec::with_capacity(searches.len());
        let mut terms = Vec::with_capacity(searches.len());
        for (search, target) in searches.iter().zip(targets) {
            let tokens = match steps.last() {
                Some(prev) if propagate => self.propagate(ctx, &prev.tokens)?,
                _ => self.empty_tokens(ctx, dual)?,
            };
            let out = self.step(ctx, &ref_tokens, search, &tokens)?;
            terms.push(loss::frame_terms(ctx.tape, &out.maps, target)?);
            tokens_in.push(tokens);
            steps.push(out);
        }
        let (loss, values) = loss::total_loss(ctx.tape, &terms)?;
        Ok(ClipOutput {
            loss,
            values,
            steps,
            tokens_in,
        })
    }
}

/// Single stream: the encoder's search features. Two streams: the perceiver output.
pub fn head_input(search: &[Var], gmp: Option<&GmpOutput>) -> Result<Var> {
    match (search.len(), gmp) {
        (1, _) => Ok(search[0]),
        (2, Some(g)) => Ok(g.out),
        (2, None) => Err(Error::Model("dual-stream head input requires the perceiver output".into())),
        (n, _) => Err(Error::Model(format!("unexpected stream count {n}"))),
    }
}
