//! One-pass evaluation: success curve, AUC and center-error precision.

use serde::Serialize;

use crate::bbox::BoundingBox;
use crate::error::{Error, Result};

pub const THRESHOLD_COUNT: usize = 21;
pub const PRECISION_PX: f64 = 20.0;
pub const NORM_PRECISION: f64 = 0.2;

/// IoU thresholds `0, 0.05, …, 1`.
pub fn thresholds() -> Vec<f64> {
    (0..THRESHOLD_COUNT).map(|i| i as f64 / (THRESHOLD_COUNT - 1) as f64).collect()
}

/// A frame counts at threshold `τ` when its IoU exceeds `τ`; at `τ = 1`
/// an exact overlap counts.
pub fn success_at(iou: f64, tau: f64) -> bool {
    if tau >= 1.0 {
        iou >= 1.0
    } else {
        iou > tau
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SequenceEval {
    pub name: String,
    pub ious: Vec<f64>,
    pub center_errors: Vec<f64>,
    pub success: Vec<f64>,
    pub auc: f64,
    pub precision: f64,
    pub norm_precision: f64,
    pub mean_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    /// Success curve averaged over sequences.
    pub success: Vec<f64>,
    pub auc: f64,
    pub precision: f64,
    pub norm_precision: f64,
    pub mean_iou: f64,
    pub sequences: Vec<SequenceEval>,
}

pub fn evaluate_sequence(name: &str, pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<SequenceEval> {
    if pred.len() != gt.len() {
        return Err(Error::Eval(format!(
            "{name}: {} predicted frames but {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::Eval(format!("{name}: no frames")));
    }
    let n = gt.len() as f64;
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.iou(g)).collect();
    let mut center_errors = Vec::with_capacity(gt.len());
    let mut norm_hits = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        let (px, py) = p.center();
        let (gx, gy) = g.center();
        let (dx, dy) = (px - gx, py - gy);
        center_errors.push((dx * dx + dy * dy).sqrt());
        let (nx, ny) = (dx / g.width().max(1e-12), dy / g.height().max(1e-12));
        if (nx * nx + ny * ny).sqrt() <= NORM_PRECISION {
            norm_hits += 1;
        }
    }
    let success: Vec<f64> = thresholds()
        .iter()
        .map(|&tau| ious.iter().filter(|&&iou| success_at(iou, tau)).count() as f64 / n)
        .collect();
    let auc = success.iter().sum::<f64>() / success.len() as f64;
    let precision = center_errors.iter().filter(|&&e| e <= PRECISION_PX).count() as f64 / n;
    let mean_iou = ious.iter().sum::<f64>() / n;
    Ok(SequenceEval {
        name: name.to_string(),
        ious,
        center_errors,
        success,
        auc,
        precision,
        norm_precision: norm_hits as f64 / n,
        mean_iou,
    })
}

/// Per-sequence metrics averaged with equal weight per sequence.
pub fn evaluate_ope(runs: &[(String, Vec<BoundingBox>, Vec<BoundingBox>)]) -> Result<EvalReport> {
    if runs.is_empty() {
        return Err(Error::Eval("nothing to evaluate".into()));
    }
    let sequences = runs
        .iter()
        .map(|(name, pred, gt)| evaluate_sequence(name, pred, gt))
        .collect::<Result<Vec<_>>>()?;
    let m = sequences.len() as f64;
    let avg = |f: fn(&SequenceEval) -> f64| sequences.iter().map(f).sum::<f64>() / m;
    let success = (0..THRESHOLD_COUNT)
        .map(|i| sequences.iter().map(|s| s.success[i]).sum::<f64>() / m)
        .collect();
    Ok(EvalReport {
        thresholds: thresholds(),
        success,
        auc: avg(|s| s.auc),
        precision: avg(|s| s.precision),
        norm_precision: avg(|s| s.norm_precision),
        mean_iou: avg(|s| s.mean_iou),
        sequences,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn curve_csv(&self) -> String {
        let mut s = String::from("threshold,success\n");
        for (t, v) in self.thresholds.iter().zip(&self.success) {
            s.push_str(&format!("{t:.2},{v:.6}\n"));
        }
        s
    }
}
