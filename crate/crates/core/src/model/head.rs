//! Center-based prediction head and box decoding.

use super::layers::Ctx;
use super::ModelConfig;
use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::params::{Initializer, LinearIds};
use crate::tensor::{Scalar, Tape, Var};

#[derive(Clone, Debug)]
pub struct HeadIds {
    /// Score, size and offset branches, three convolutions each.
    pub branches: [[LinearIds; 3]; 3],
}

const BRANCH_NAMES: [&str; 3] = ["score", "size", "offset"];
const BRANCH_OUT: [usize; 3] = [1, 2, 2];

impl HeadIds {
    pub fn init(init: &mut Initializer<'_>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.dim;
        let widths = [d, d / 2, d / 4];
        let mut branch = |b: usize| -> Result<[LinearIds; 3]> {
            let conv = |c: usize, init: &mut Initializer<'_>| {
                let out = if c == 2 { BRANCH_OUT[b] } else { widths[c + 1] };
                init.conv(&format!("head.{}.conv{c}", BRANCH_NAMES[b]), widths[c], out, 3)
            };
            Ok([conv(0, init)?, conv(1, init)?, conv(2, init)?])
        };
        let branches = [branch(0)?, branch(1)?, branch(2)?];
        Ok(Self { branches })
    }
}

/// Head outputs on the tape: `[1,g,g]`, `[2,g,g]`, `[2,g,g]`.
#[derive(Clone, Copy, Debug)]
pub struct MapVars {
    pub score: Var,
    pub size: Var,
    pub offset: Var,
}

/// Head outputs as plain values, row-major over the `grid × grid` cells.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadMaps {
    pub grid: usize,
    pub score: Vec<f64>,
    /// Channel 0 is width, channel 1 height, as fractions of the search extent.
    pub size: Vec<f64>,
    /// Channel 0 is x, channel 1 y, as fractions of a cell.
    pub offset: Vec<f64>,
}

impl MapVars {
    pub fn values<S: Scalar>(&self, tape: &Tape<S>) -> HeadMaps {
        let get = |v: Var| -> Vec<f64> { tape.value(v).data().iter().map(|x| Scalar::to_f64(*x)).collect() };
        HeadMaps {
            grid: tape.shape(self.score)[1],
            score: get(self.score),
            size: get(self.size),
            offset: get(self.offset),
        }
    }
}

/// `features[N_s, D]` → three sigmoid maps on the `grid × grid` lattice.
pub fn predict_maps<S: Scalar>(
    ctx: &mut Ctx<'_, S>,
    ids: &HeadIds,
    cfg: &ModelConfig,
    features: Var,
) -> Result<MapVars> {
    let g = cfg.search_grid();
    let shape = ctx.tape.shape(features).to_vec();
    if shape != [g * g, cfg.dim] {
        return Err(Error::Model(format!(
            "head expects [{}, {}] features, got {shape:?}",
            g * g,
            cfg.dim
        )));
    }
    let t = &mut *ctx.tape;
    let x = t.transpose(features)?;
    let x = t.reshape(x, &[cfg.dim, g, g])?;
    let mut outs = [x; 3];
    for (b, branch) in ids.branches.iter().enumerate() {
        let mut h = x;
        for (c, conv) in branch.iter().enumerate() {
            h = t.conv2d(h, ctx.bound.var(conv.w), Some(ctx.bound.var(conv.b)), 1, 1)?;
            h = if c < 2 { t.relu(h)? } else { t.sigmoid(h)? };
        }
        outs[b] = h;
    }
    Ok(MapVars {
        score: outs[0],
        size: outs[1],
        offset: outs[2],
    })
}

/// Argmax cell of `score` (lowest flat index on ties).
pub fn argmax(score: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in score.iter().enumerate() {
        if v > score[best] {
            best = i;
        }
    }
    best
}

/// Box in search-crop pixels read from the maps at cell `index`.
pub fn box_at(maps: &HeadMaps, index: usize, patch: usize, extent: f64) -> BoundingBox {
    let g = maps.grid;
    let cells = g * g;
    let (i, j) = (index / g, index % g);
    let p = patch as f64;
    let cx = (j as f64 + maps.offset[index]) * p;
    let cy = (i as f64 + maps.offset[cells + index]) * p;
    let w = maps.size[index] * extent;
    let h = maps.size[cells + index] * extent;
    BoundingBox::from_center(cx, cy, w, h)
}

/// Decode the peak of the score map into a clipped box and its score.
pub fn decode_box(maps: &HeadMaps, patch: usize, extent: f64) -> (BoundingBox, f64) {
    let idx = argmax(&maps.score);
    let b = box_at(maps, idx, patch, extent).clip(extent, extent);
    (b, maps.score[idx])
}

/// Hann window over the grid, used to damp peaks far from the crop center.
pub fn cosine_window(grid: usize) -> Vec<f64> {
    let hann: Vec<f64> = (0..grid)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * (i as f64 + 0.5) / grid as f64).cos())
        .collect();
    (0..grid * grid).map(|k| hann[k / grid] * hann[k % grid]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spike_maps() -> HeadMaps {
        let g = 8;
        let mut maps = HeadMaps {
            grid: g,
            score: vec![0.1; g * g],
            size: vec![0.25; 2 * g * g],
            offset: vec![0.5; 2 * g * g],
        };
        maps.score[2 * g + 3] = 0.9;
        maps
    }

    #[test]
    fn decodes_spike() {
        let (b, s) = decode_box(&spike_maps(), 8, 64.0);
        assert_eq!(b, BoundingBox::new(20.0, 12.0, 36.0, 28.0));
        assert_eq!(s, 0.9);
    }

    #[test]
    fn ties_break_to_first_cell() {
        let mut maps = spike_maps();
        maps.score.iter_mut().for_each(|v| *v = 0.5);
        assert_eq!(argmax(&maps.score), 0);
    }

    #[test]
    fn window_peaks_in_middle() {
        let w = cosine_window(8);
        assert!(w[3 * 8 + 3] > w[0]);
        assert!(w.iter().all(|&v| v > 0.0 && v <= 1.0));
    }
}
