//! One-shot multi-task training with AdamW.

use crate::config::{join, KeyValues};
use crate::data::clip::{build_training_clip, Jitter, SearchAnchor};
use crate::data::synth::SyntheticSequence;
use crate::error::{Error, Result};
use crate::model::{Ctx, Model, ModelConfig, Task};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::{Rng, Scalar, Tape, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            _ => Err(format!("unknown precision `{s}` (expected f32|f64)")),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub tasks: Vec<Task>,
    pub epochs: usize,
    pub clips_per_epoch: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_rest: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub drop_epoch: usize,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    pub sample_range: usize,
    pub jitter_center: f64,
    pub search_anchor: SearchAnchor,
    pub jitter_scale: f64,
    pub precision: Precision,
    pub token_propagation: bool,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tasks: vec![Task::Rgb],
            epochs: 10,
            clips_per_epoch: 2000,
            batch_size: 4,
            lr_backbone: 2e-4,
            lr_rest: 2e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            drop_epoch: 7,
            warmup_steps: 100,
            grad_clip: 1.0,
            sample_range: 400,
            jitter_center: 1.0,
            search_anchor: SearchAnchor::Own,
            jitter_scale: 0.25,
            precision: Precision::F32,
            token_propagation: true,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.tasks.is_empty() {
            return fail("task list must not be empty");
        }
        if !(self.lr_backbone > 0.0 && self.lr_rest > 0.0) {
            return fail("learning rates must be positive");
        }
        if self.epochs == 0 || self.clips_per_epoch == 0 || self.batch_size == 0 {
            return fail("epochs, clips_per_epoch and batch_size must be positive");
        }
        if self.weight_decay < 0.0 || self.grad_clip <= 0.0 {
            return fail("weight_decay must be >= 0 and grad_clip > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("adam betas must lie in [0, 1)");
        }
        self.model.validate()
    }

    /// Pull training keys (and model keys) from `kv`.
    pub fn take_from(kv: &mut KeyValues) -> Result<Self> {
        let mut c = Self {
            model: ModelConfig::take_from(kv)?,
            ..Self::default()
        };
        kv.take_list("tasks", &mut c.tasks)?;
        kv.take("epochs", &mut c.epochs)?;
        kv.take("clips_per_epoch", &mut c.clips_per_epoch)?;
        kv.take("batch_size", &mut c.batch_size)?;
        kv.take("lr_backbone", &mut c.lr_backbone)?;
        kv.take("lr_rest", &mut c.lr_rest)?;
        kv.take("weight_decay", &mut c.weight_decay)?;
        kv.take("beta1", &mut c.beta1)?;
        kv.take("beta2", &mut c.beta2)?;
        kv.take("adam_eps", &mut c.adam_eps)?;
        kv.take("drop_epoch", &mut c.drop_epoch)?;
        kv.take("warmup_steps", &mut c.warmup_steps)?;
        kv.take("grad_clip", &mut c.grad_clip)?;
        kv.take("sample_range", &mut c.sample_range)?;
        kv.take("jitter_center", &mut c.jitter_center)?;
        kv.take("search_anchor", &mut c.search_anchor)?;
        kv.take("jitter_scale", &mut c.jitter_scale)?;
        kv.take("precision", &mut c.precision)?;
        kv.take("token_propagation", &mut c.token_propagation)?;
        kv.take("seed", &mut c.seed)?;
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let c = Self::take_from(&mut kv)?;
        kv.finish()?;
        Ok(c)
    }

    /// Training keys only; model keys come from [`ModelConfig::to_key_values`].
    pub fn train_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("tasks", join(&self.tasks));
        kv.set("epochs", self.epochs);
        kv.set("clips_per_epoch", self.clips_per_epoch);
        kv.set("batch_size", self.batch_size);
        kv.set("lr_backbone", self.lr_backbone);
        kv.set("lr_rest", self.lr_rest);
        kv.set("weight_decay", self.weight_decay);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("adam_eps", self.adam_eps);
        kv.set("drop_epoch", self.drop_epoch);
        kv.set("warmup_steps", self.warmup_steps);
        kv.set("grad_clip", self.grad_clip);
        kv.set("sample_range", self.sample_range);
        kv.set("jitter_center", self.jitter_center);
        kv.set("search_anchor", self.search_anchor);
        kv.set("jitter_scale", self.jitter_scale);
        kv.set("precision", self.precision);
        kv.set("token_propagation", self.token_propagation);
        kv.set("seed", self.seed);
        kv
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.clips_per_epoch.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch()
    }

    /// Rate multiplier: linear warmup, then ×0.1 from the drop epoch on.
    pub fn lr_factor(&self, step: usize) -> f64 {
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        };
        let epoch = step / self.steps_per_epoch();
        let drop = if epoch >= self.drop_epoch { 0.1 } else { 1.0 };
        warm * drop
    }
}

/// Adaptive moments with decoupled weight decay on matrix-shaped parameters.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, e)| vec![0.0; e.value.numel()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update; `lr(group)` gives the rate per parameter group.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: impl Fn(ParamGroup) -> f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let rate = lr(store.group(id));
            let decay = if store.get(id).rank() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= rate * decay * p[i];
                p[i] -= rate * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Scale `grads` so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Training sequences for one task.
pub struct TaskData<'a> {
    pub task: Task,
    pub sequences: Vec<&'a SyntheticSequence>,
}

/// Group `sequences` by task: RGB uses everything, dual tasks need a matching auxiliary stream.
pub fn datasets_for<'a>(tasks: &[Task], sequences: &'a [SyntheticSequence]) -> Result<Vec<TaskData<'a>>> {
    tasks
        .iter()
        .map(|&task| {
            let seqs: Vec<&SyntheticSequence> = sequences
                .iter()
                .filter(|s| task == Task::Rgb || s.aux == task.aux())
                .collect();
            if seqs.is_empty() {
                return Err(Error::Train(format!("no training sequences for task {task}")));
            }
            Ok(TaskData { task, sequences: seqs })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub total_steps: usize,
    pub loss: f64,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub grad_norm: f64,
    pub lr_factor: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<StepLog>,
}

fn clip_grads<S: Scalar>(
    model: &Model,
    cfg: &TrainConfig,
    data: &TaskData<'_>,
    rng: &mut Rng,
) -> Result<(Vec<Vec<f64>>, crate::model::LossValues)> {
    let seq = data.sequences[rng.below(data.sequences.len())];
    let jitter = Jitter {
        center: cfg.jitter_center,
        scale: cfg.jitter_scale,
    };
    let clip = build_training_clip(seq, &model.config, cfg.sample_range, jitter, cfg.search_anchor, data.task.is_dual(), rng)?;
    let mut tape = Tape::<S>::new();
    let bound = model.store.bind(&mut tape, true)?;
    let mut drop_rng = rng.fork(u64::MAX);
    let mut ctx = Ctx::new(&mut tape, &bound);
    if model.config.dropout > 0.0 {
        ctx.dropout = Some((model.config.dropout, &mut drop_rng));
    }
    let out = model.forward_clip(&mut ctx, &clip.refs, &clip.searches, &clip.targets, cfg.token_propagation)?;
    tape.backward(out.loss)?;
    Ok((bound.grads(&tape, &model.store), out.values))
}

/// Optimize one parameter set over round-robin task clips.
pub fn train_one_shot(
    cfg: &TrainConfig,
    sequences: &[SyntheticSequence],
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = datasets_for(&cfg.tasks, sequences)?;
    let mut model = Model::new(cfg.model.clone())?;
    let mut opt = AdamW::new(&model.store, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    let root = Rng::new(cfg.seed);
    let total_steps = cfg.total_steps();
    let mut history = Vec::with_capacity(total_steps);
    let mut clip_index = 0u64;
    for step in 0..total_steps {
        let mut acc: Vec<Vec<f64>> = model
            .store
            .iter()
            .map(|(_, _, e)| vec![0.0; e.value.numel()])
            .collect();
        let mut sums = [0.0; 4];
        for _ in 0..cfg.batch_size {
            let task_data = &data[clip_index as usize % data.len()];
            let mut rng = root.fork(clip_index);
            let result = match cfg.precision {
                Precision::F32 => clip_grads::<f32>(&model, cfg, task_data, &mut rng),
                Precision::F64 => clip_grads::<f64>(&model, cfg, task_data, &mut rng),
            };
            let (grads, values) = result.map_err(|e| match e {
                Error::Tensor(TensorError::NonFinite { op }) => Error::Train(format!(
                    "non-finite value in `{op}` at step {step}, clip {clip_index} (seed {}, stream {clip_index}, task {})",
                    cfg.seed, task_data.task
                )),
                other => other,
            })?;
            for (a, g) in acc.iter_mut().zip(&grads) {
                a.iter_mut().zip(g).for_each(|(a, g)| *a += g);
            }
            sums[0] += values.total;
            sums[1] += values.cls;
            sums[2] += values.l1;
            sums[3] += values.giou;
            clip_index += 1;
        }
        let inv = 1.0 / cfg.batch_size as f64;
        acc.iter_mut().flatten().for_each(|g| *g *= inv);
        let grad_norm = clip_grad_norm(&mut acc, cfg.grad_clip);
        let factor = cfg.lr_factor(step);
        opt.update(&mut model.store, &acc, |g| {
            factor
                * match g {
                    ParamGroup::Backbone => cfg.lr_backbone,
                    ParamGroup::Rest => cfg.lr_rest,
                }
        });
        let log = StepLog {
            step,
            total_steps,
            loss: sums[0] * inv,
            cls: sums[1] * inv,
            l1: sums[2] * inv,
            giou: sums[3] * inv,
            grad_norm,
            lr_factor: factor,
        };
        on_step(&log);
        history.push(log);
    }
    Ok(TrainOutcome { model, history })
}
