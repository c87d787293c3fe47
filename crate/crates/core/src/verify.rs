//! Reference computations backing the `oracle-attn`, `bench` and
//! `gradcheck` subcommands: a loop-based dense attention layer, closed-form
//! multiply counts, and per-family finite-difference checks.

use crate::error::Result;
use crate::model::layers::{encoder_layer, Ctx, EncoderLayerIds, MlpIds, Segments, Variant};
use crate::model::{AttentionVariant, FramePair, FrameTarget, Model};
use crate::params::{Initializer, ParamGroup, ParamId, ParamStore};
use crate::tensor::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::tensor::{multiply_count, reset_multiply_count, Rng, Tape, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn rows_layer_norm(x: &[Vec<f64>], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

/// `x · W + b` with `W` stored `[in, out]`.
fn rows_linear(x: &[Vec<f64>], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (fin, fout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..fout)
                .map(|o| {
                    let mut acc = b.data()[o];
                    for i in 0..fin {
                        acc += row[i] * w.data()[i * fout + o];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Which key positions each query may see.
pub type Visibility<'a> = &'a dyn Fn(usize, usize) -> bool;

/// Loop-based pre-norm layer: multi-head attention restricted by `visible`,
/// residual, then the gelu MLP with residual.
pub fn dense_layer_oracle(
    store: &ParamStore,
    ids: &EncoderLayerIds,
    x: &[Vec<f64>],
    heads: usize,
    eps: f64,
    visible: Visibility<'_>,
) -> Vec<Vec<f64>> {
    let p = |id: ParamId| store.get(id);
    let l = x.len();
    let d = x[0].len();
    let dh = d / heads;
    let h = rows_layer_norm(x, p(ids.norm1.gamma).data(), p(ids.norm1.beta).data(), eps);
    let qkv = rows_linear(&h, p(ids.qkv.w), p(ids.qkv.b));
    let mut attn = vec![vec![0.0; d]; l];
    for head in 0..heads {
        let off = head * dh;
        for i in 0..l {
            let keys: Vec<usize> = (0..l).filter(|&j| visible(i, j)).collect();
            let scores: Vec<f64> = keys
                .iter()
                .map(|&j| {
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += qkv[i][off + c] * qkv[j][d + off + c];
                    }
                    s / (dh as f64).sqrt()
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (e, &j) in exps.iter().zip(&keys) {
                for c in 0..dh {
                    attn[i][off + c] += e / z * qkv[j][2 * d + off + c];
                }
            }
        }
    }
    let a = rows_linear(&attn, p(ids.proj.w), p(ids.proj.b));
    let x1: Vec<Vec<f64>> = x
        .iter()
        .zip(&a)
        .map(|(r, s)| r.iter().zip(s).map(|(u, v)| u + v).collect())
        .collect();
    let h2 = rows_layer_norm(&x1, p(ids.norm2.gamma).data(), p(ids.norm2.beta).data(), eps);
    let MlpIds { fc1, fc2 } = ids.mlp;
    let m = rows_linear(&h2, p(fc1.w), p(fc1.b));
    let m: Vec<Vec<f64>> = m.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    let m = rows_linear(&m, p(fc2.w), p(fc2.b));
    x1.iter()
        .zip(&m)
        .map(|(r, s)| r.iter().zip(s).map(|(u, v)| u + v).collect())
        .collect()
}

/// Block visibility of the separated variant.
pub fn separated_visibility(seg: Segments) -> impl Fn(usize, usize) -> bool {
    move |i, j| {
        if i < seg.refs {
            j < seg.refs
        } else if i < seg.refs + seg.search {
            j < seg.refs + seg.search
        } else {
            true
        }
    }
}

fn to_rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect()
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(u, v)| (u - v).abs())
        .fold(0.0, f64::max)
}

/// A randomly sized single layer with random weights and input.
pub struct OracleCase {
    pub store: ParamStore,
    pub ids: EncoderLayerIds,
    pub heads: usize,
    pub seg: Segments,
    pub x: Tensor<f64>,
}

impl OracleCase {
    pub fn random(rng: &mut Rng, max_len: usize) -> Result<Self> {
        let heads = 1 + rng.below(4);
        let dim = heads * (2 + rng.below(5));
        let refs = 1 + rng.below(max_len / 3);
        let search = 1 + rng.below(max_len / 2);
        let token = 1 + rng.below((max_len - refs - search).clamp(1, 2));
        let seg = Segments { refs, search, token };
        let ratio = 1 + rng.below(4);
        let mut store = ParamStore::new();
        let ids = {
            let mut init = Initializer {
                store: &mut store,
                rng,
                group: ParamGroup::Backbone,
            };
            EncoderLayerIds::init(&mut init, "layer", dim, ratio)?
        };
        // Move layer-norm affine terms off their identity defaults.
        for id in [ids.norm1.gamma, ids.norm1.beta, ids.norm2.gamma, ids.norm2.beta] {
            for v in store.get_mut(id).data_mut() {
                *v += rng.normal(0.0, 0.3);
            }
        }
        let x = Tensor::from_fn(&[seg.total(), dim], |_| rng.normal(0.0, 1.0));
        Ok(Self {
            store,
            ids,
            heads,
            seg,
            x,
        })
    }

    pub fn run(&self, variant: Variant) -> Result<Tensor<f64>> {
        let mut tape = Tape::<f64>::new();
        let bound = self.store.bind(&mut tape, false)?;
        let x = tape.constant(self.x.clone())?;
        let mut ctx = Ctx::new(&mut tape, &bound);
        let y = encoder_layer(&mut ctx, &self.ids, x, variant, self.heads, 1e-5)?;
        Ok(tape.value(y).clone())
    }

    /// Max |tape − oracle| for the concatenated and separated variants.
    pub fn diffs(&self) -> Result<(f64, f64)> {
        let rows = to_rows(&self.x);
        let all = |_: usize, _: usize| true;
        let dense = dense_layer_oracle(&self.store, &self.ids, &rows, self.heads, 1e-5, &all);
        let concat = max_diff(&to_rows(&self.run(Variant::Concat)?), &dense);
        let vis = separated_visibility(self.seg);
        let masked = dense_layer_oracle(&self.store, &self.ids, &rows, self.heads, 1e-5, &vis);
        let sep = max_diff(&to_rows(&self.run(Variant::Separate(self.seg))?), &masked);
        Ok((concat, sep))
    }

    /// With a single reference frame, the separated layer's reference rows
    /// against plain self-attention over that frame alone.
    pub fn reference_subpass_diff(&self) -> Result<f64> {
        let full = to_rows(&self.run(Variant::Separate(self.seg))?);
        let refs: Vec<Vec<f64>> = to_rows(&self.x)[..self.seg.refs].to_vec();
        let all = |_: usize, _: usize| true;
        let alone = dense_layer_oracle(&self.store, &self.ids, &refs, self.heads, 1e-5, &all);
        Ok(max_diff(&full[..self.seg.refs], &alone))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleSummary {
    pub cases: usize,
    pub max_concat: f64,
    pub max_separate: f64,
    pub max_subpass: f64,
}

/// `cases` random layers with sequence length at most `max_len`.
pub fn attention_oracle_suite(cases: usize, max_len: usize, seed: u64) -> Result<OracleSummary> {
    let root = Rng::new(seed);
    let mut s = OracleSummary {
        cases,
        max_concat: 0.0,
        max_separate: 0.0,
        max_subpass: 0.0,
    };
    for c in 0..cases {
        let mut rng = root.fork(c as u64);
        let case = OracleCase::random(&mut rng, max_len)?;
        let (a, b) = case.diffs()?;
        s.max_concat = s.max_concat.max(a);
        s.max_separate = s.max_separate.max(b);
        s.max_subpass = s.max_subpass.max(case.reference_subpass_diff()?);
    }
    Ok(s)
}

/// Closed-form multiplies of one encoder layer's matrix products.
pub fn layer_multiplies(dim: usize, mlp_ratio: usize, seg: Segments, variant: AttentionVariant) -> u64 {
    let (d, r) = (dim as u64, mlp_ratio as u64);
    let (rf, s, t) = (seg.refs as u64, seg.search as u64, seg.token as u64);
    let l = rf + s + t;
    let projections = 4 * l * d * d + 2 * r * l * d * d;
    let attention = match variant {
        AttentionVariant::Concat => 2 * l * l * d,
        AttentionVariant::Separate => 2 * d * (rf * rf + s * (rf + s) + t * l),
    };
    projections + attention
}

/// Multiplies counted while running one layer forward on random input.
pub fn measured_layer_multiplies(model: &Model, variant: AttentionVariant, seed: u64) -> Result<u64> {
    let cfg = &model.config;
    let seg = model.segments();
    let mut rng = Rng::new(seed);
    let x = Tensor::from_fn(&[seg.total(), cfg.dim], |_| rng.normal(0.0, 1.0));
    let mut tape = Tape::<f64>::new();
    let bound = model.store.bind(&mut tape, false)?;
    let xv = tape.constant(x)?;
    let mut ctx = Ctx::new(&mut tape, &bound);
    let v = match variant {
        AttentionVariant::Concat => Variant::Concat,
        AttentionVariant::Separate => Variant::Separate(seg),
    };
    reset_multiply_count();
    encoder_layer(&mut ctx, &model.ids.encoder.layers[0], xv, v, cfg.heads, cfg.ln_eps)?;
    Ok(multiply_count())
}

/// Parameter families checked independently.
pub const FAMILIES: [(&str, &[&str]); 5] = [
    ("tokenizers", &["tokenizer."]),
    ("encoder", &["encoder."]),
    ("gates", &["gate"]),
    ("perceiver", &["gmp."]),
    ("head", &["head."]),
];

/// Give zero-initialized and identity-initialized parameters generic
/// values so every path carries gradient.
pub fn randomize_for_check(model: &mut Model, seed: u64) {
    let mut rng = Rng::new(seed);
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        let t = model.store.get_mut(id);
        let scale = t.data().iter().map(|v| v.abs()).fold(0.0, f64::max).max(0.05);
        for v in t.data_mut() {
            *v += rng.normal(0.0, 0.1 * scale);
        }
    }
}

/// Finite-difference check of the clip loss over the parameters whose
/// names start with any of `prefixes`.
pub fn gradcheck_family(
    model: &Model,
    prefixes: &[&str],
    refs: &[FramePair],
    searches: &[FramePair],
    targets: &[FrameTarget],
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let family: Vec<ParamId> = model
        .store
        .ids()
        .filter(|&id| prefixes.iter().any(|p| model.store.name(id).starts_with(p)))
        .collect();
    let values: Vec<Tensor<f64>> = family.iter().map(|&id| model.store.get(id).clone()).collect();
    let report = grad_check(
        |tape, vars| {
            let bound = model
                .store
                .bind_with(tape, |id| family.iter().position(|&f| f == id).map(|k| vars[k]))
                .map_err(|e| match e {
                    crate::Error::Tensor(t) => t,
                    other => crate::TensorError::InvalidArgument(other.to_string()),
                })?;
            let mut ctx = Ctx::new(tape, &bound);
            let out = model
                .forward_clip(&mut ctx, refs, searches, targets, true)
                .map_err(|e| match e {
                    crate::Error::Tensor(t) => t,
                    other => crate::TensorError::InvalidArgument(other.to_string()),
                })?;
            Ok(out.loss)
        },
        &values,
        opts,
    )?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct FamilyCheck {
    pub family: &'static str,
    pub report: GradCheckReport,
}

/// Check every parameter family on a dual-stream clip cut from a
/// synthetic sequence, after [`randomize_for_check`].
pub fn gradcheck_model(
    config: &crate::model::ModelConfig,
    seed: u64,
    samples: usize,
    eps: f64,
) -> Result<Vec<FamilyCheck>> {
    use crate::data::clip::{build_training_clip, Jitter, SearchAnchor};
    use crate::data::synth::{generate_sequence, SequenceSpec};

    let mut model = Model::new(config.clone())?;
    randomize_for_check(&mut model, seed);
    let spec = SequenceSpec {
        width: config.search_size,
        height: config.search_size,
        length: config.num_refs + config.num_search + 4,
        patch: config.patch,
        aux: Some(crate::model::Modality::Thermal),
        distractors: 1,
        target_size: (config.search_size as f64 / 8.0, config.search_size as f64 / 4.0),
        ..SequenceSpec::default()
    };
    let seq = generate_sequence(&spec, seed)?;
    let mut rng = Rng::new(seed);
    let clip = build_training_clip(&seq, config, usize::MAX, Jitter::default(), SearchAnchor::Own, true, &mut rng)?;
    FAMILIES
        .iter()
        .enumerate()
        .map(|(k, (family, prefixes))| {
            let opts = GradCheckOptions {
                eps,
                samples,
                seed: seed.wrapping_add(k as u64),
            };
            let report = gradcheck_family(&model, prefixes, &clip.refs, &clip.searches, &clip.targets, opts)?;
            Ok(FamilyCheck { family, report })
        })
        .collect()
}
