//! Deterministic synthetic multi-modal tracking sequences.
//!
//! A textured static background, one patterned target, optional moving
//! distractors, occluders covering the target's path during occlusion
//! windows, and RGB dark windows. The auxiliary channel is rendered from the same scene.

use std::fmt;
use std::str::FromStr;

use crate::bbox::BoundingBox;
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::frame::Image;
use crate::model::Modality;
use crate::tensor::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Motion {
    /// Constant velocity with reflection at the frame border.
    Linear,
    /// Independent sinusoids per axis.
    Sinusoidal,
    /// Damped velocity with random kicks.
    RandomWalk,
}

impl FromStr for Motion {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(Self::Linear),
            "sinusoidal" => Ok(Self::Sinusoidal),
            "random_walk" => Ok(Self::RandomWalk),
            _ => Err(format!("unknown motion `{s}` (expected linear|sinusoidal|random_walk)")),
        }
    }
}

impl fmt::Display for Motion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Sinusoidal => "sinusoidal",
            Self::RandomWalk => "random_walk",
        })
    }
}

/// Recipe for one sequence. Ranges are inclusive `(min, max)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSpec {
    pub width: usize,
    pub height: usize,
    pub length: usize,
    pub patch: usize,
    pub motion: Motion,
    /// Fixed initial velocity (px/frame); drawn from `speed` when absent.
    pub velocity: Option<(f64, f64)>,
    pub speed: (f64, f64),
    pub target_size: (f64, f64),
    pub distractors: usize,
    pub occlusions: usize,
    pub occlusion_len: (usize, usize),
    pub corruptions: usize,
    pub corruption_len: (usize, usize),
    pub aux: Option<Modality>,
    pub noise: f64,
}

impl Default for SequenceSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            length: 100,
            patch: 8,
            motion: Motion::Linear,
            velocity: None,
            speed: (0.5, 2.0),
            target_size: (8.0, 16.0),
            distractors: 0,
            occlusions: 0,
            occlusion_len: (8, 14),
            corruptions: 0,
            corruption_len: (15, 30),
            aux: None,
            noise: 0.02,
        }
    }
}

impl SequenceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.width % self.patch != 0 || self.height % self.patch != 0 {
            return Err(Error::Data(format!(
                "frame {}x{} not divisible by patch {}",
                self.width, self.height, self.patch
            )));
        }
        if self.length < 2 {
            return Err(Error::Data("sequences need at least 2 frames".into()));
        }
        let max_side = self.width.min(self.height) as f64 / 2.0;
        if !(self.target_size.0 >= 2.0 && self.target_size.1 <= max_side && self.target_size.0 <= self.target_size.1) {
            return Err(Error::Data(format!("target size range {:?} invalid", self.target_size)));
        }
        if self.speed.0 < 0.0 || self.speed.0 > self.speed.1 {
            return Err(Error::Data(format!("speed range {:?} invalid", self.speed)));
        }
        if self.occlusion_len.0 == 0 || self.occlusion_len.0 > self.occlusion_len.1 {
            return Err(Error::Data("occlusion_len range invalid".into()));
        }
        if self.corruption_len.0 == 0 || self.corruption_len.0 > self.corruption_len.1 {
            return Err(Error::Data("corruption_len range invalid".into()));
        }
        if self.aux == Some(Modality::Rgb) {
            return Err(Error::Data("auxiliary modality cannot be rgb".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub motion: Motion,
    pub distractors: usize,
    /// Half-open frame ranges during which the target is behind an occluder.
    pub occlusions: Vec<(usize, usize)>,
    /// Half-open frame ranges with a dark RGB channel.
    pub corruptions: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceFrame {
    pub rgb: Image,
    pub aux: Option<Image>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    pub name: String,
    pub seed: u64,
    pub aux: Option<Modality>,
    pub frames: Vec<SequenceFrame>,
    pub boxes: Vec<BoundingBox>,
    pub scenario: Scenario,
}

impl SyntheticSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].rgb.width
    }

    pub fn height(&self) -> usize {
        self.frames[0].rgb.height
    }

    pub fn is_occluded(&self, t: usize) -> bool {
        self.scenario.occlusions.iter().any(|&(a, b)| (a..b).contains(&t))
    }

    pub fn is_corrupted(&self, t: usize) -> bool {
        self.scenario.corruptions.iter().any(|&(a, b)| (a..b).contains(&t))
    }
}

/// Axis-aligned rectangle with an optional inner pattern.
#[derive(Clone, Debug)]
struct Sprite {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    color: [f64; 3],
    /// Inner stripe color and its orientation.
    stripe: Option<([f64; 3], bool)>,
    depth: f64,
    heat: f64,
}

impl Sprite {
    fn bbox(&self) -> BoundingBox {
        BoundingBox::from_center(self.cx, self.cy, self.w, self.h)
    }
}

/// Fraction of pixel `(x, y)` covered by `b`.
fn coverage(b: &BoundingBox, x: usize, y: usize) -> f64 {
    let px = BoundingBox::new(x as f64, y as f64, x as f64 + 1.0, y as f64 + 1.0);
    px.intersection(b)
}

fn random_color(rng: &mut Rng) -> [f64; 3] {
    let mut c = [rng.uniform(), rng.uniform(), rng.uniform()];
    let k = rng.below(3);
    c[k] = 0.85 + 0.15 * rng.uniform();
    c[(k + 1 + rng.below(2)) % 3] *= 0.35;
    c
}

struct Background {
    rgb: Vec<[f64; 3]>,
    depth: Vec<f64>,
    heat: Vec<f64>,
}

fn background(w: usize, h: usize, rng: &mut Rng) -> Background {
    let base = [
        rng.uniform_range(0.25, 0.6),
        rng.uniform_range(0.25, 0.6),
        rng.uniform_range(0.25, 0.6),
    ];
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..4)
        .map(|_| {
            let fx = rng.uniform_range(-0.4, 0.4);
            let fy = rng.uniform_range(-0.4, 0.4);
            let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
            let amp = [
                rng.uniform_range(0.0, 0.08),
                rng.uniform_range(0.0, 0.08),
                rng.uniform_range(0.0, 0.08),
            ];
            (fx, fy, phase, amp)
        })
        .collect();
    let grain: Vec<f64> = (0..w * h).map(|_| rng.normal(0.0, 0.04)).collect();
    let mut out = Background {
        rgb: Vec::with_capacity(w * h),
        depth: Vec::with_capacity(w * h),
        heat: Vec::with_capacity(w * h),
    };
    for y in 0..h {
        for x in 0..w {
            let mut c = base;
            for &(fx, fy, phase, amp) in &waves {
                let s = (fx * x as f64 + fy * y as f64 + phase).sin();
                for k in 0..3 {
                    c[k] += amp[k] * s;
                }
            }
            let g = grain[y * w + x];
            out.rgb.push([c[0] + g, c[1] + g, c[2] + g]);
            out.depth.push(0.1 + 0.15 * y as f64 / h as f64);
            out.heat.push(0.15 + 0.5 * g.abs());
        }
    }
    out
}

fn reflect(pos: &mut f64, vel: &mut f64, lo: f64, hi: f64) {
    if hi <= lo {
        *pos = (lo + hi) / 2.0;
        return;
    }
    for _ in 0..4 {
        if *pos < lo {
            *pos = 2.0 * lo - *pos;
            *vel = -*vel;
        } else if *pos > hi {
            *pos = 2.0 * hi - *pos;
            *vel = -*vel;
        } else {
            break;
        }
    }
    *pos = pos.clamp(lo, hi);
}

/// Target centers for every frame.
fn trajectory(spec: &SequenceSpec, w: f64, h: f64, rng: &mut Rng) -> Vec<(f64, f64)> {
    let (fw, fh) = (spec.width as f64, spec.height as f64);
    let (lo_x, hi_x) = (w / 2.0, fw - w / 2.0);
    let (lo_y, hi_y) = (h / 2.0, fh - h / 2.0);
    let speed = rng.uniform_range(spec.speed.0, spec.speed.1);
    let angle = rng.uniform_range(0.0, std::f64::consts::TAU);
    let (mut vx, mut vy) = spec.velocity.unwrap_or((speed * angle.cos(), speed * angle.sin()));
    let mut x = rng.uniform_range(lo_x + 0.25 * (hi_x - lo_x), hi_x - 0.25 * (hi_x - lo_x));
    let mut y = rng.uniform_range(lo_y + 0.25 * (hi_y - lo_y), hi_y - 0.25 * (hi_y - lo_y));
    let mut out = Vec::with_capacity(spec.length);
    match spec.motion {
        Motion::Linear => {
            for _ in 0..spec.length {
                out.push((x, y));
                x += vx;
                y += vy;
                reflect(&mut x, &mut vx, lo_x, hi_x);
                reflect(&mut y, &mut vy, lo_y, hi_y);
            }
        }
        Motion::Sinusoidal => {
            let mid = ((lo_x + hi_x) / 2.0, (lo_y + hi_y) / 2.0);
            let amp = (
                rng.uniform_range(0.3, 0.9) * (hi_x - lo_x) / 2.0,
                rng.uniform_range(0.3, 0.9) * (hi_y - lo_y) / 2.0,
            );
            // Period chosen so the peak speed matches the drawn speed.
            let period = |a: f64| (std::f64::consts::TAU * a / speed.max(0.1)).max(8.0);
            let (px, py) = (period(amp.0), period(amp.1));
            let (ph_x, ph_y) = (
                rng.uniform_range(0.0, std::f64::consts::TAU),
                rng.uniform_range(0.0, std::f64::consts::TAU),
            );
            for t in 0..spec.length {
                let t = t as f64;
                out.push((
                    mid.0 + amp.0 * (std::f64::consts::TAU * t / px + ph_x).sin(),
                    mid.1 + amp.1 * (std::f64::consts::TAU * t / py + ph_y).sin(),
                ));
            }
        }
        Motion::RandomWalk => {
            for _ in 0..spec.length {
                out.push((x, y));
                vx = 0.9 * vx + rng.normal(0.0, 0.3 * speed.max(0.1));
                vy = 0.9 * vy + rng.normal(0.0, 0.3 * speed.max(0.1));
                x += vx;
                y += vy;
                reflect(&mut x, &mut vx, lo_x, hi_x);
                reflect(&mut y, &mut vy, lo_y, hi_y);
            }
        }
    }
    out
}

/// Non-overlapping half-open windows, none starting at frame 0.
fn windows(count: usize, len: (usize, usize), total: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for _ in 0..count {
        for _attempt in 0..20 {
            let l = len.0 + rng.below(len.1 - len.0 + 1);
            if l + 2 >= total {
                break;
            }
            let start = 1 + rng.below(total - l - 1);
            let end = start + l;
            if out.iter().all(|&(a, b)| end + 2 <= a || start >= b + 2) {
                out.push((start, end));
                break;
            }
        }
    }
    out.sort_unstable();
    out
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn generate_sequence(spec: &SequenceSpec, seed: u64) -> Result<SyntheticSequence> {
    spec.validate()?;
    let mut rng = Rng::new(seed);
    let (fw, fh) = (spec.width, spec.height);
    let bg = background(fw, fh, &mut rng);

    let tw = rng.uniform_range(spec.target_size.0, spec.target_size.1);
    let th = rng.uniform_range(spec.target_size.0, spec.target_size.1);
    let centers = trajectory(spec, tw, th, &mut rng);
    let color = random_color(&mut rng);
    let stripe_color = [1.0 - color[0], 1.0 - color[1], 1.0 - color[2]];
    let target_template = Sprite {
        cx: 0.0,
        cy: 0.0,
        w: tw,
        h: th,
        color,
        stripe: Some((stripe_color, rng.bernoulli(0.5))),
        depth: 0.75,
        heat: 0.9,
    };

    let mut distractor_paths = Vec::with_capacity(spec.distractors);
    for _ in 0..spec.distractors {
        let w = rng.uniform_range(spec.target_size.0, spec.target_size.1);
        let h = rng.uniform_range(spec.target_size.0, spec.target_size.1);
        let sub = SequenceSpec {
            motion: Motion::RandomWalk,
            velocity: None,
            ..spec.clone()
        };
        let path = trajectory(&sub, w, h, &mut rng);
        let sprite = Sprite {
            cx: 0.0,
            cy: 0.0,
            w,
            h,
            color: random_color(&mut rng),
            stripe: None,
            depth: 0.45,
            heat: 0.45,
        };
        distractor_paths.push((sprite, path));
    }

    let occlusions = windows(spec.occlusions, spec.occlusion_len, spec.length, &mut rng);
    let occluders: Vec<((usize, usize), BoundingBox, [f64; 3])> = occlusions
        .iter()
        .map(|&(a, b)| {
            let mut region = BoundingBox::from_center(centers[a].0, centers[a].1, tw, th);
            for c in &centers[a..b] {
                let bb = BoundingBox::from_center(c.0, c.1, tw, th);
                region = BoundingBox::new(
                    region.x_min.min(bb.x_min),
                    region.y_min.min(bb.y_min),
                    region.x_max.max(bb.x_max),
                    region.y_max.max(bb.y_max),
                );
            }
            let margin = 1.5;
            let region = BoundingBox::new(
                region.x_min.floor() - margin,
                region.y_min.floor() - margin,
                region.x_max.ceil() + margin,
                region.y_max.ceil() + margin,
            );
            let g = rng.uniform_range(0.3, 0.7);
            ((a, b), region, [g, g * rng.uniform_range(0.9, 1.1), g * rng.uniform_range(0.9, 1.1)])
        })
        .collect();
    let corruptions = windows(spec.corruptions, spec.corruption_len, spec.length, &mut rng);

    let mut frames = Vec::with_capacity(spec.length);
    let mut boxes = Vec::with_capacity(spec.length);
    let mut prev_gray: Option<Vec<f64>> = None;
    for t in 0..spec.length {
        let mut target = target_template.clone();
        target.cx = centers[t].0;
        target.cy = centers[t].1;
        boxes.push(target.bbox());

        let mut rgb = bg.rgb.clone();
        let mut depth = bg.depth.clone();
        let mut heat = bg.heat.clone();
        let paint = |sprite: &Sprite, rgb: &mut Vec<[f64; 3]>, depth: &mut Vec<f64>, heat: &mut Vec<f64>| {
            let b = sprite.bbox();
            let inner = match sprite.stripe {
                Some((_, true)) => BoundingBox::from_center(sprite.cx, sprite.cy, sprite.w, sprite.h / 3.0),
                Some((_, false)) => BoundingBox::from_center(sprite.cx, sprite.cy, sprite.w / 3.0, sprite.h),
                None => BoundingBox::new(0.0, 0.0, 0.0, 0.0),
            };
            let x0 = b.x_min.floor().max(0.0) as usize;
            let y0 = b.y_min.floor().max(0.0) as usize;
            let x1 = (b.x_max.ceil() as usize).min(fw);
            let y1 = (b.y_max.ceil() as usize).min(fh);
            for y in y0..y1 {
                for x in x0..x1 {
                    let a = coverage(&b, x, y);
                    if a <= 0.0 {
                        continue;
                    }
                    let i = y * fw + x;
                    let s = coverage(&inner, x, y);
                    let mut c = sprite.color;
                    if let Some((sc, _)) = sprite.stripe {
                        for k in 0..3 {
                            c[k] = (1.0 - s / a) * c[k] + (s / a) * sc[k];
                        }
                    }
                    for k in 0..3 {
                        rgb[i][k] = (1.0 - a) * rgb[i][k] + a * c[k];
                    }
                    let (dx, dy) = (
                        (x as f64 + 0.5 - sprite.cx) / (sprite.w / 2.0),
                        (y as f64 + 0.5 - sprite.cy) / (sprite.h / 2.0),
                    );
                    let shade = 1.0 - 0.25 * (dx * dx + dy * dy).min(1.0);
                    depth[i] = (1.0 - a) * depth[i] + a * sprite.depth * (0.8 + 0.2 * shade);
                    heat[i] = (1.0 - a) * heat[i] + a * sprite.heat * shade;
                }
            }
        };
        for (sprite, path) in &distractor_paths {
            let mut s = sprite.clone();
            s.cx = path[t].0;
            s.cy = path[t].1;
            paint(&s, &mut rgb, &mut depth, &mut heat);
        }
        paint(&target, &mut rgb, &mut depth, &mut heat);
        for (_, region, color) in occluders.iter().filter(|((a, b), _, _)| (*a..*b).contains(&t)) {
            let s = Sprite {
                cx: region.center().0,
                cy: region.center().1,
                w: region.width(),
                h: region.height(),
                color: *color,
                stripe: None,
                depth: 1.0,
                heat: 0.2,
            };
            paint(&s, &mut rgb, &mut depth, &mut heat);
        }

        let gray: Vec<f64> = rgb.iter().map(|c| (c[0] + c[1] + c[2]) / 3.0).collect();
        let dark = corruptions.iter().any(|&(a, b)| (a..b).contains(&t));
        let mut rgb_img = Image::new(3, fh, fw);
        for (i, c) in rgb.iter().enumerate() {
            for k in 0..3 {
                let v = if dark { 0.0 } else { c[k] };
                let n = if spec.noise > 0.0 { rng.normal(0.0, spec.noise) } else { 0.0 };
                rgb_img.data[k * fw * fh + i] = to_u8(v + n);
            }
        }
        let aux = spec.aux.map(|m| {
            let mut img = Image::new(1, fh, fw);
            for i in 0..fw * fh {
                let v = match m {
                    Modality::Depth => depth[i],
                    Modality::Thermal => heat[i],
                    Modality::Event => match &prev_gray {
                        Some(p) if (gray[i] - p[i]).abs() > 0.04 => 1.0,
                        _ => 0.0,
                    },
                    Modality::Rgb => 0.0,
                };
                let n = if spec.noise > 0.0 && m != Modality::Event {
                    rng.normal(0.0, spec.noise)
                } else {
                    0.0
                };
                img.data[i] = to_u8(v + n);
            }
            img
        });
        prev_gray = Some(gray);
        frames.push(SequenceFrame { rgb: rgb_img, aux });
    }

    Ok(SyntheticSequence {
        name: format!("seq_{seed:016x}"),
        seed,
        aux: spec.aux,
        frames,
        boxes,
        scenario: Scenario {
            motion: spec.motion,
            distractors: spec.distractors,
            occlusions,
            corruptions,
        },
    })
}

/// A family of sequences: motions and auxiliary modalities cycle over the index.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteSpec {
    pub count: usize,
    pub motions: Vec<Motion>,
    pub aux: Vec<Option<Modality>>,
    pub distractors: (usize, usize),
    pub base: SequenceSpec,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self {
            count: 20,
            motions: vec![Motion::Linear, Motion::Sinusoidal],
            aux: vec![None],
            distractors: (0, 0),
            base: SequenceSpec::default(),
        }
    }
}

fn parse_pair<T: FromStr + Copy>(raw: &str, key: &str) -> Result<(T, T)>
where
    T::Err: fmt::Display,
{
    let parts: Vec<&str> = raw.split(',').map(str::trim).collect();
    let parse = |s: &str| {
        s.parse::<T>()
            .map_err(|e| Error::Config(format!("key `{key}`: cannot parse `{s}`: {e}")))
    };
    match parts.as_slice() {
        [a] => {
            let v = parse(a)?;
            Ok((v, v))
        }
        [a, b] => Ok((parse(a)?, parse(b)?)),
        _ => Err(Error::Config(format!("key `{key}`: expected `min,max`"))),
    }
}

impl SuiteSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let mut s = Self::default();
        let b = &mut s.base;
        kv.take("count", &mut s.count)?;
        kv.take("length", &mut b.length)?;
        kv.take("width", &mut b.width)?;
        kv.take("height", &mut b.height)?;
        kv.take("patch", &mut b.patch)?;
        kv.take("noise", &mut b.noise)?;
        kv.take("occlusions", &mut b.occlusions)?;
        kv.take("corruptions", &mut b.corruptions)?;
        kv.take_list("motions", &mut s.motions)?;
        let mut raw = String::new();
        let mut pair_key = |kv: &mut KeyValues, key: &str| -> Result<Option<String>> {
            raw.clear();
            if !kv.contains(key) {
                return Ok(None);
            }
            kv.take(key, &mut raw)?;
            Ok(Some(raw.clone()))
        };
        if let Some(r) = pair_key(&mut kv, "speed")? {
            b.speed = parse_pair(&r, "speed")?;
        }
        if let Some(r) = pair_key(&mut kv, "target_size")? {
            b.target_size = parse_pair(&r, "target_size")?;
        }
        if let Some(r) = pair_key(&mut kv, "occlusion_len")? {
            b.occlusion_len = parse_pair(&r, "occlusion_len")?;
        }
        if let Some(r) = pair_key(&mut kv, "corruption_len")? {
            b.corruption_len = parse_pair(&r, "corruption_len")?;
        }
        if let Some(r) = pair_key(&mut kv, "distractors")? {
            s.distractors = parse_pair(&r, "distractors")?;
        }
        if let Some(r) = pair_key(&mut kv, "velocity")? {
            b.velocity = Some(parse_pair(&r, "velocity")?);
        }
        if let Some(r) = pair_key(&mut kv, "aux")? {
            s.aux = r
                .split(',')
                .map(str::trim)
                .map(|m| match m {
                    "none" => Ok(None),
                    _ => m.parse::<Modality>().map(Some).map_err(Error::Config),
                })
                .collect::<Result<_>>()?;
        }
        kv.finish()?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.motions.is_empty() || self.aux.is_empty() {
            return Err(Error::Config("motions and aux lists must be non-empty".into()));
        }
        if self.distractors.0 > self.distractors.1 {
            return Err(Error::Config("distractor range invalid".into()));
        }
        self.base.validate()
    }

    /// Spec of sequence `index`, its distractor count drawn from `rng`.
    pub fn sequence_spec(&self, index: usize, rng: &mut Rng) -> SequenceSpec {
        let span = self.distractors.1 - self.distractors.0 + 1;
        SequenceSpec {
            motion: self.motions[index % self.motions.len()],
            aux: self.aux[index % self.aux.len()],
            distractors: self.distractors.0 + rng.below(span),
            ..self.base.clone()
        }
    }

    pub fn generate(&self, seed: u64) -> Result<Vec<SyntheticSequence>> {
        let root = Rng::new(seed);
        (0..self.count)
            .map(|i| {
                let mut rng = root.fork(i as u64);
                let spec = self.sequence_spec(i, &mut rng);
                let mut seq = generate_sequence(&spec, rng.next_u64())?;
                seq.name = format!("seq_{i:04}");
                Ok(seq)
            })
            .collect()
    }
}
