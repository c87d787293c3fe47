//! Training objective: focal classification, L1 and GIoU box terms.

use super::head::MapVars;
use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const L1_WEIGHT: f64 = 5.0;
pub const GIOU_WEIGHT: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 2.0;
pub const FOCAL_BETA: f64 = 4.0;
const PROB_CLAMP: f64 = 1e-4;

/// Supervision for one search frame, in search-crop coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTarget {
    pub grid: usize,
    /// Cell containing the box center.
    pub cell: (usize, usize),
    /// Box normalized by the crop extent: `[x_min, y_min, x_max, y_max]`.
    pub norm_box: [f64; 4],
    /// Gaussian heatmap with exactly one cell equal to 1.
    pub heatmap: Vec<f64>,
}

impl FrameTarget {
    pub fn new(gt: &BoundingBox, grid: usize, extent: f64) -> Result<Self> {
        if !gt.is_valid() || gt.area() <= 0.0 {
            return Err(Error::Model(format!("invalid target box {gt:?}")));
        }
        let cell_px = extent / grid as f64;
        let (cx, cy) = gt.center();
        let to_cell = |v: f64| ((v / cell_px).floor().max(0.0) as usize).min(grid - 1);
        let (i, j) = (to_cell(cy), to_cell(cx));
        let sigma = ((gt.width() / cell_px) * (gt.height() / cell_px)).sqrt() / 4.0;
        let sigma = sigma.max(0.5);
        let heatmap = (0..grid * grid)
            .map(|k| {
                let (di, dj) = ((k / grid) as f64 - i as f64, (k % grid) as f64 - j as f64);
                (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        Ok(Self {
            grid,
            cell: (i, j),
            norm_box: [
                gt.x_min / extent,
                gt.y_min / extent,
                gt.x_max / extent,
                gt.y_max / extent,
            ],
            heatmap,
        })
    }

    pub fn cell_index(&self) -> usize {
        self.cell.0 * self.grid + self.cell.1
    }
}

/// Penalty-reduced focal loss over a `[1, g, g]` sigmoid score map,
/// normalized by the number of positive cells.
pub fn focal_loss<S: Scalar>(tape: &mut Tape<S>, score: Var, heatmap: &[f64]) -> Result<Var> {
    let shape = tape.shape(score).to_vec();
    if shape.iter().product::<usize>() != heatmap.len() {
        return Err(Error::Model(format!(
            "score map {shape:?} does not match target of {} cells",
            heatmap.len()
        )));
    }
    let num_pos = heatmap.iter().filter(|&&y| y == 1.0).count();
    if num_pos == 0 {
        return Err(Error::Model("target heatmap has no positive cell".into()));
    }
    let pos = Tensor::from_fn(&shape, |k| S::from_f64(if heatmap[k] == 1.0 { 1.0 } else { 0.0 }));
    let neg = Tensor::from_fn(&shape, |k| {
        let y = heatmap[k];
        S::from_f64(if y == 1.0 { 0.0 } else { (1.0 - y).powf(FOCAL_BETA) })
    });
    let pos = tape.constant(pos)?;
    let neg = tape.constant(neg)?;
    let p = tape.clamp(score, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let q = tape.scale(p, -1.0)?;
    let q = tape.add_scalar(q, 1.0)?;
    let log_p = tape.log(p)?;
    let log_q = tape.log(q)?;
    let wq = tape.powf(q, FOCAL_ALPHA)?;
    let pos_term = tape.mul(wq, log_p)?;
    let pos_term = tape.mul(pos_term, pos)?;
    let wp = tape.powf(p, FOCAL_ALPHA)?;
    let neg_term = tape.mul(wp, log_q)?;
    let neg_term = tape.mul(neg_term, neg)?;
    let both = tape.add(pos_term, neg_term)?;
    let total = tape.sum(both)?;
    Ok(tape.scale(total, -1.0 / num_pos as f64)?)
}

/// Generalized IoU between a predicted box (four `[1]` vars) and a constant box.
pub fn giou_on_tape<S: Scalar>(tape: &mut Tape<S>, pred: [Var; 4], gt: [f64; 4]) -> Result<Var> {
    let c = |tape: &mut Tape<S>, v: f64| tape.constant(Tensor::new(vec![1], vec![S::from_f64(v)])?);
    let g: Vec<Var> = gt.iter().map(|&v| c(tape, v)).collect::<std::result::Result<_, _>>()?;
    let [x0, y0, x1, y1] = pred;
    let big = f64::MAX;

    let ix0 = tape.maximum(x0, g[0])?;
    let iy0 = tape.maximum(y0, g[1])?;
    let ix1 = tape.minimum(x1, g[2])?;
    let iy1 = tape.minimum(y1, g[3])?;
    let iw = tape.sub(ix1, ix0)?;
    let iw = tape.clamp(iw, 0.0, big)?;
    let ih = tape.sub(iy1, iy0)?;
    let ih = tape.clamp(ih, 0.0, big)?;
    let inter = tape.mul(iw, ih)?;

    let pw = tape.sub(x1, x0)?;
    let ph = tape.sub(y1, y0)?;
    let area_p = tape.mul(pw, ph)?;
    let area_g = (gt[2] - gt[0]) * (gt[3] - gt[1]);
    let union = tape.add_scalar(area_p, area_g)?;
    let union = tape.sub(union, inter)?;
    let iou = tape.div(inter, union)?;

    let ex0 = tape.minimum(x0, g[0])?;
    let ey0 = tape.minimum(y0, g[1])?;
    let ex1 = tape.maximum(x1, g[2])?;
    let ey1 = tape.maximum(y1, g[3])?;
    let ew = tape.sub(ex1, ex0)?;
    let eh = tape.sub(ey1, ey0)?;
    let enclosing = tape.mul(ew, eh)?;
    let gap = tape.sub(enclosing, union)?;
    let gap = tape.div(gap, enclosing)?;
    Ok(tape.sub(iou, gap)?)
}

/// Predicted normalized box read at the target's center cell.
pub fn box_at_cell<S: Scalar>(tape: &mut Tape<S>, maps: &MapVars, target: &FrameTarget) -> Result<[Var; 4]> {
    let g = target.grid;
    let idx = target.cell_index();
    let pick = |tape: &mut Tape<S>, map: Var, ch: usize| -> Result<Var> {
        let flat = tape.reshape(map, &[2, g * g])?;
        let row = tape.narrow(flat, 0, ch, 1)?;
        let v = tape.narrow(row, 1, idx, 1)?;
        Ok(tape.reshape(v, &[1])?)
    };
    let ox = pick(tape, maps.offset, 0)?;
    let oy = pick(tape, maps.offset, 1)?;
    let w = pick(tape, maps.size, 0)?;
    let h = pick(tape, maps.size, 1)?;
    let inv = 1.0 / g as f64;
    let cx = tape.scale(ox, inv)?;
    let cx = tape.add_scalar(cx, target.cell.1 as f64 * inv)?;
    let cy = tape.scale(oy, inv)?;
    let cy = tape.add_scalar(cy, target.cell.0 as f64 * inv)?;
    let hw = tape.scale(w, 0.5)?;
    let hh = tape.scale(h, 0.5)?;
    Ok([
        tape.sub(cx, hw)?,
        tape.sub(cy, hh)?,
        tape.add(cx, hw)?,
        tape.add(cy, hh)?,
    ])
}

/// Unweighted per-frame terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub cls: Var,
    pub l1: Var,
    pub giou: Var,
}

pub fn frame_terms<S: Scalar>(tape: &mut Tape<S>, maps: &MapVars, target: &FrameTarget) -> Result<LossTerms> {
    let cls = focal_loss(tape, maps.score, &target.heatmap)?;
    let pred = box_at_cell(tape, maps, target)?;
    let stacked = tape.concat(&pred, 0)?;
    let gt = tape.constant(Tensor::from_fn(&[4], |k| S::from_f64(target.norm_box[k])))?;
    let diff = tape.sub(stacked, gt)?;
    let diff = tape.abs(diff)?;
    let l1 = tape.mean(diff)?;
    let giou = giou_on_tape(tape, pred, target.norm_box)?;
    let giou = tape.reshape(giou, &[])?;
    Ok(LossTerms { cls, l1, giou })
}

/// Frame-averaged terms and their weighted sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

/// `mean(cls) + 5·mean(L1) + 2·mean(1 − GIoU)` over search frames.
pub fn total_loss<S: Scalar>(tape: &mut Tape<S>, terms: &[LossTerms]) -> Result<(Var, LossValues)> {
    if terms.is_empty() {
        return Err(Error::Model("no search frames to average".into()));
    }
    let inv = 1.0 / terms.len() as f64;
    let mean_of = |tape: &mut Tape<S>, pick: fn(&LossTerms) -> Var| -> Result<Var> {
        let parts: Vec<Var> = terms.iter().map(pick).collect();
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = tape.add(acc, p)?;
        }
        Ok(tape.scale(acc, inv)?)
    };
    let cls = mean_of(tape, |t| t.cls)?;
    let l1 = mean_of(tape, |t| t.l1)?;
    let giou = mean_of(tape, |t| t.giou)?;
    let giou_loss = tape.scale(giou, -1.0)?;
    let giou_loss = tape.add_scalar(giou_loss, 1.0)?;
    let a = tape.scale(l1, L1_WEIGHT)?;
    let b = tape.scale(giou_loss, GIOU_WEIGHT)?;
    let total = tape.add(cls, a)?;
    let total = tape.add(total, b)?;
    let v = |var: Var| Scalar::to_f64(tape.scalar_value(var));
    let values = LossValues {
        total: v(total),
        cls: v(cls),
        l1: v(l1),
        giou: v(giou),
    };
    Ok((total, values))
}
