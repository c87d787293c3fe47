//! Clip sampling and target-centered cropping.

use super::synth::{SequenceFrame, SyntheticSequence};
use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::frame::{FrameTensor, Image};
use crate::model::{FramePair, FrameTarget, Modality, ModelConfig};
use crate::tensor::Rng;

/// Frame indices of a sampled clip, both lists ascending and
/// every reference earlier than every search frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipIndices {
    pub refs: Vec<usize>,
    pub search: Vec<usize>,
}

/// Pick a window of `min(sample_range, len)` frames, draw `k + n` distinct
/// indices in it, sort, and split.
pub fn sample_video_clip(len: usize, k: usize, n: usize, sample_range: usize, rng: &mut Rng) -> Result<ClipIndices> {
    if k == 0 || n == 0 {
        return Err(Error::Data("clips need at least one reference and one search frame".into()));
    }
    if len < k + n || sample_range < k + n {
        return Err(Error::Data(format!(
            "cannot draw {} frames from a sequence of {len} with range {sample_range}",
            k + n
        )));
    }
    let window = sample_range.min(len);
    let start = rng.below(len - window + 1);
    let mut idx: Vec<usize> = rng
        .sample_distinct(window, k + n)
        .into_iter()
        .map(|i| start + i)
        .collect();
    idx.sort_unstable();
    let search = idx.split_off(k);
    Ok(ClipIndices { refs: idx, search })
}

/// Affine map from frame pixels to crop pixels: `crop = (frame - origin) * scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropMapping {
    pub origin_x: f64,
    pub origin_y: f64,
    pub scale: f64,
}

impl CropMapping {
    pub fn to_crop(&self, b: &BoundingBox) -> BoundingBox {
        BoundingBox::new(
            (b.x_min - self.origin_x) * self.scale,
            (b.y_min - self.origin_y) * self.scale,
            (b.x_max - self.origin_x) * self.scale,
            (b.y_max - self.origin_y) * self.scale,
        )
    }

    pub fn to_frame(&self, b: &BoundingBox) -> BoundingBox {
        BoundingBox::new(
            b.x_min / self.scale + self.origin_x,
            b.y_min / self.scale + self.origin_y,
            b.x_max / self.scale + self.origin_x,
            b.y_max / self.scale + self.origin_y,
        )
    }
}

/// Square crop of side `area_factor·sqrt(w·h)` centered on `b`, resampled
/// bilinearly to `out_size` with edge replication outside the frame.
pub fn crop_region(
    image: &Image,
    modality: Modality,
    b: &BoundingBox,
    area_factor: f64,
    out_size: usize,
) -> Result<(FrameTensor, CropMapping)> {
    if !(area_factor > 0.0) {
        return Err(Error::Data(format!("crop factor {area_factor} must be positive")));
    }
    if !b.is_valid() || b.area() <= 0.0 {
        return Err(Error::Data(format!("cannot crop around zero-area box {b:?}")));
    }
    let side = area_factor * b.area().sqrt();
    let (cx, cy) = b.center();
    let mapping = CropMapping {
        origin_x: cx - side / 2.0,
        origin_y: cy - side / 2.0,
        scale: out_size as f64 / side,
    };
    let (w, h) = (image.width, image.height);
    let plane = out_size * out_size;
    let mut planar = vec![0.0; image.channels * plane];
    let step = 1.0 / mapping.scale;
    for v in 0..out_size {
        let fy = mapping.origin_y + (v as f64 + 0.5) * step - 0.5;
        let y0 = fy.floor();
        let ty = fy - y0;
        let ya = (y0 as isize).clamp(0, h as isize - 1) as usize;
        let yb = (y0 as isize + 1).clamp(0, h as isize - 1) as usize;
        for u in 0..out_size {
            let fx = mapping.origin_x + (u as f64 + 0.5) * step - 0.5;
            let x0 = fx.floor();
            let tx = fx - x0;
            let xa = (x0 as isize).clamp(0, w as isize - 1) as usize;
            let xb = (x0 as isize + 1).clamp(0, w as isize - 1) as usize;
            for c in 0..image.channels {
                let p = |y, x| image.get(c, y, x) as f64 / 255.0;
                let top = p(ya, xa) * (1.0 - tx) + p(ya, xb) * tx;
                let bottom = p(yb, xa) * (1.0 - tx) + p(yb, xb) * tx;
                planar[c * plane + v * out_size + u] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    let frame = FrameTensor::from_planar(modality, image.channels, out_size, out_size, &planar)?;
    Ok((frame, mapping))
}

/// Crop the RGB frame (and auxiliary frame, when `with_aux`) around `b`.
pub fn crop_pair_from(
    frame: &SequenceFrame,
    aux: Option<Modality>,
    b: &BoundingBox,
    area_factor: f64,
    out_size: usize,
    with_aux: bool,
) -> Result<(FramePair, CropMapping)> {
    let (rgb, mapping) = crop_region(&frame.rgb, Modality::Rgb, b, area_factor, out_size)?;
    let aux = match (with_aux, aux, &frame.aux) {
        (false, _, _) => None,
        (true, Some(m), Some(img)) => Some(crop_region(img, m, b, area_factor, out_size)?.0),
        (true, _, _) => return Err(Error::Data("frame has no auxiliary channel".into())),
    };
    Ok((FramePair { rgb, aux }, mapping))
}

pub fn crop_pair(
    seq: &SyntheticSequence,
    t: usize,
    b: &BoundingBox,
    area_factor: f64,
    out_size: usize,
    with_aux: bool,
) -> Result<(FramePair, CropMapping)> {
    crop_pair_from(&seq.frames[t], seq.aux, b, area_factor, out_size, with_aux)
}

/// Search-crop perturbation used in training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    /// Center shift bound in units of `sqrt(w·h)`.
    pub center: f64,
    /// Log-scale bound.
    pub scale: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            center: 1.0,
            scale: 0.25,
        }
    }
}

impl Jitter {
    pub fn apply(&self, b: &BoundingBox, rng: &mut Rng) -> BoundingBox {
        let s = b.area().sqrt();
        let (cx, cy) = b.center();
        let dx = rng.uniform_range(-self.center, self.center) * s;
        let dy = rng.uniform_range(-self.center, self.center) * s;
        let k = rng.uniform_range(-self.scale, self.scale).exp();
        BoundingBox::from_center(cx + dx, cy + dy, b.width() * k, b.height() * k)
    }
}

/// Where a training search crop is centered before jitter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SearchAnchor {
    /// The frame's own ground truth.
    Own,
    /// The ground truth of the preceding clip frame, as at inference time
    /// where the crop follows the last estimate.
    Previous,
}

impl std::str::FromStr for SearchAnchor {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "own" => Ok(Self::Own),
            "previous" => Ok(Self::Previous),
            _ => Err(format!("unknown search anchor `{s}` (own|previous)")),
        }
    }
}

impl std::fmt::Display for SearchAnchor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Own => "own",
            Self::Previous => "previous",
        })
    }
}

/// Cropped, supervised training clip.
#[derive(Clone, Debug)]
pub struct TrainingClip {
    pub indices: ClipIndices,
    pub refs: Vec<FramePair>,
    pub searches: Vec<FramePair>,
    pub targets: Vec<FrameTarget>,
}

pub fn build_training_clip(
    seq: &SyntheticSequence,
    cfg: &ModelConfig,
    sample_range: usize,
    jitter: Jitter,
    anchor: SearchAnchor,
    with_aux: bool,
    rng: &mut Rng,
) -> Result<TrainingClip> {
    let indices = sample_video_clip(seq.len(), cfg.num_refs, cfg.num_search, sample_range, rng)?;
    let mut refs = Vec::with_capacity(indices.refs.len());
    for &t in &indices.refs {
        refs.push(crop_pair(seq, t, &seq.boxes[t], cfg.ref_factor, cfg.ref_size, with_aux)?.0);
    }
    let mut searches = Vec::with_capacity(indices.search.len());
    let mut targets = Vec::with_capacity(indices.search.len());
    let mut prev = *indices.refs.last().expect("k >= 1");
    for &t in &indices.search {
        let gt = seq.boxes[t];
        let center = match anchor {
            SearchAnchor::Own => jitter.apply(&gt, rng),
            SearchAnchor::Previous => jitter.apply(&seq.boxes[prev], rng),
        };
        prev = t;
        let (pair, mapping) = crop_pair(seq, t, &center, cfg.search_factor, cfg.search_size, with_aux)?;
        let extent = cfg.search_size as f64;
        let in_crop = mapping.to_crop(&gt).clip(extent, extent);
        targets.push(FrameTarget::new(&in_crop, cfg.search_grid(), extent)?);
        searches.push(pair);
    }
    Ok(TrainingClip {
        indices,
        refs,
        searches,
        targets,
    })
}
