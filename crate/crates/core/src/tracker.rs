//! Auto-regressive per-frame inference with a reference memory and
//! temporal token propagation.

use crate::bbox::BoundingBox;
use crate::data::clip::crop_pair_from;
use crate::data::synth::SequenceFrame;
use crate::error::{Error, Result};
use crate::model::head::{cosine_window, decode_box};
use crate::model::{Ctx, FramePair, Model, Modality, Task, Tokens};
use crate::tensor::{Scalar, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerOptions {
    pub memory_capacity: usize,
    pub token_propagation: bool,
    pub cosine_window: bool,
}

impl Default for TrackerOptions {
    fn default() -> Self {
        Self {
            memory_capacity: 16,
            token_propagation: true,
            cosine_window: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MemoryEntry {
    pub frame: usize,
    pub crop: FramePair,
}

/// Output tokens of the previous step, per stream.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenState<S: Scalar> {
    pub rgb: Tensor<S>,
    pub aux: Option<Tensor<S>>,
}

#[derive(Clone, Debug)]
pub struct TrackState<S: Scalar> {
    pub memory: Vec<MemoryEntry>,
    pub tokens: Option<TokenState<S>>,
    pub last_box: BoundingBox,
    /// Index of the next frame to process.
    pub frame: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord<S: Scalar> {
    pub frame: usize,
    pub bbox: BoundingBox,
    pub score: f64,
    pub token_in: TokenState<S>,
    pub token_out: TokenState<S>,
}

/// Indices `round(i·(m−1)/(k−1))`, or every entry padded with the first
/// when the memory holds at most `k`.
pub fn select_references(memory_len: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Track("reference count must be at least 1".into()));
    }
    if memory_len == 0 {
        return Err(Error::Track("reference memory is empty".into()));
    }
    if memory_len <= k {
        let mut idx = vec![0; k - memory_len];
        idx.extend(0..memory_len);
        return Ok(idx);
    }
    if k == 1 {
        return Ok(vec![memory_len - 1]);
    }
    Ok((0..k)
        .map(|i| ((i * (memory_len - 1)) as f64 / (k - 1) as f64).round() as usize)
        .collect())
}

pub struct Tracker<'m, S: Scalar> {
    model: &'m Model,
    task: Task,
    options: TrackerOptions,
    state: Option<TrackState<S>>,
    frame_size: (f64, f64),
}

impl<'m, S: Scalar> Tracker<'m, S> {
    pub fn new(model: &'m Model, task: Task, options: TrackerOptions) -> Result<Self> {
        if options.memory_capacity < 1 {
            return Err(Error::Track("memory capacity must be at least 1".into()));
        }
        Ok(Self {
            model,
            task,
            options,
            state: None,
            frame_size: (0.0, 0.0),
        })
    }

    pub fn state(&self) -> Option<&TrackState<S>> {
        self.state.as_ref()
    }

    fn check_frame(&self, frame: &SequenceFrame, aux: Option<Modality>) -> Result<()> {
        if self.task.is_dual() && frame.aux.is_none() {
            return Err(Error::Track(format!("task {} needs auxiliary frames", self.task)));
        }
        if self.task.is_dual() && aux != self.task.aux() {
            return Err(Error::Track(format!(
                "task {} does not match auxiliary modality {:?}",
                self.task, aux
            )));
        }
        Ok(())
    }

    pub fn init(&mut self, frame: &SequenceFrame, aux: Option<Modality>, gt: BoundingBox) -> Result<()> {
        self.check_frame(frame, aux)?;
        let (w, h) = (frame.rgb.width as f64, frame.rgb.height as f64);
        if !gt.is_valid() || gt.area() <= 0.0 || gt.clip(w, h) != gt {
            return Err(Error::Track(format!("initial box {gt:?} is not inside the {w}x{h} frame")));
        }
        let cfg = &self.model.config;
        let (crop, _) = crop_pair_from(frame, aux, &gt, cfg.ref_factor, cfg.ref_size, self.task.is_dual())?;
        self.frame_size = (w, h);
        self.state = Some(TrackState {
            memory: vec![MemoryEntry { frame: 0, crop }],
            tokens: None,
            last_box: gt,
            frame: 1,
        });
        Ok(())
    }

    /// Keep predictions usable as crop centers: inside the frame, at least 2 px wide.
    fn sanitize(&self, b: BoundingBox, fallback: &BoundingBox) -> BoundingBox {
        let (w, h) = self.frame_size;
        if !b.is_valid() {
            return *fallback;
        }
        let (cx, cy) = b.center();
        let bw = b.width().clamp(2.0, w);
        let bh = b.height().clamp(2.0, h);
        BoundingBox::from_center(cx.clamp(0.0, w), cy.clamp(0.0, h), bw, bh).clip(w, h)
    }

    pub fn step(&mut self, frame: &SequenceFrame, aux: Option<Modality>) -> Result<StepRecord<S>> {
        self.check_frame(frame, aux)?;
        let model = self.model;
        let cfg = &model.config;
        let dual = self.task.is_dual();
        let state = self
            .state
            .as_ref()
            .ok_or_else(|| Error::Track("tracker used before init".into()))?;

        let mut tape = Tape::<S>::new();
        let bound = model.store.bind(&mut tape, false)?;
        let mut ctx = Ctx::new(&mut tape, &bound);

        let tokens = match (&state.tokens, self.options.token_propagation) {
            (Some(prev), true) => {
                let rgb = ctx.tape.constant(prev.rgb.clone())?;
                let aux = match &prev.aux {
                    Some(a) => Some(ctx.tape.constant(a.clone())?),
                    None => None,
                };
                model.propagate(&mut ctx, &Tokens { rgb, aux })?
            }
            _ => model.empty_tokens(&mut ctx, dual)?,
        };
        let (search, mapping) =
            crop_pair_from(frame, aux, &state.last_box, cfg.search_factor, cfg.search_size, dual)?;
        let picks = select_references(state.memory.len(), cfg.num_refs)?;
        let refs: Vec<FramePair> = picks.iter().map(|&i| state.memory[i].crop.clone()).collect();
        let ref_tokens = model.embed_refs(&mut ctx, &refs)?;
        let out = model.step(&mut ctx, &ref_tokens, &search, &tokens)?;

        let mut maps = out.maps.values(ctx.tape);
        if self.options.cosine_window {
            let win = cosine_window(maps.grid);
            maps.score.iter_mut().zip(&win).for_each(|(s, w)| *s *= w);
        }
        let extent = cfg.search_size as f64;
        let (crop_box, score) = decode_box(&maps, cfg.patch, extent);
        let predicted = mapping.to_frame(&crop_box);
        if !predicted.is_valid() {
            return Err(Error::Track(format!("non-finite prediction at frame {}", state.frame)));
        }
        let bbox = self.sanitize(predicted.clip(self.frame_size.0, self.frame_size.1), &state.last_box);

        let read = |v| ctx.tape.value(v).clone();
        let token_in = TokenState {
            rgb: read(tokens.rgb),
            aux: tokens.aux.map(read),
        };
        let token_out = TokenState {
            rgb: read(out.tokens.rgb),
            aux: out.tokens.aux.map(read),
        };

        let (crop, _) = crop_pair_from(frame, aux, &bbox, cfg.ref_factor, cfg.ref_size, dual)?;
        let capacity = self.options.memory_capacity;
        let state = self.state.as_mut().expect("checked above");
        let t = state.frame;
        state.memory.push(MemoryEntry { frame: t, crop });
        if state.memory.len() > capacity {
            state.memory.remove(if capacity > 1 { 1 } else { 0 });
        }
        state.tokens = Some(token_out.clone());
        state.last_box = bbox;
        state.frame += 1;
        Ok(StepRecord {
            frame: t,
            bbox,
            score,
            token_in,
            token_out,
        })
    }
}

/// One predicted box per frame; frame 0 carries the initial box with score 1.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackResult {
    pub boxes: Vec<BoundingBox>,
    pub scores: Vec<f64>,
}

impl TrackResult {
    /// `frame_idx x_min y_min width height score`, one line per frame.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (t, (b, sc)) in self.boxes.iter().zip(&self.scores).enumerate() {
            let [x, y, w, h] = b.to_xywh();
            s.push_str(&format!("{t} {x} {y} {w} {h} {sc}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<f64> = line
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Eval(format!("trackfile line {}: {e}", i + 1)))?;
            if f.len() != 6 || f[0] as usize != boxes.len() {
                return Err(Error::Eval(format!(
                    "trackfile line {}: expected `frame x y w h score` for frame {}",
                    i + 1,
                    boxes.len()
                )));
            }
            boxes.push(BoundingBox::from_xywh(f[1], f[2], f[3], f[4]));
            scores.push(f[5]);
        }
        Ok(Self { boxes, scores })
    }
}

/// Run one-pass tracking over a whole sequence.
pub fn track_sequence<S: Scalar>(
    model: &Model,
    task: Task,
    options: &TrackerOptions,
    frames: &[SequenceFrame],
    aux: Option<Modality>,
    init_box: BoundingBox,
) -> Result<TrackResult> {
    let mut tracker = Tracker::<S>::new(model, task, options.clone())?;
    let first = frames.first().ok_or_else(|| Error::Track("empty sequence".into()))?;
    tracker.init(first, aux, init_box)?;
    let mut boxes = vec![init_box];
    let mut scores = vec![1.0];
    for f in &frames[1..] {
        let r = tracker.step(f, aux)?;
        boxes.push(r.bbox);
        scores.push(r.score);
    }
    Ok(TrackResult { boxes, scores })
}
