//! Registration quality metrics and qualitative artifacts.
//!
//! AEPE is the mean Euclidean distance between predicted and ground-truth
//! flow vectors over valid pixels. CMR(τ) is the percentage of samples whose
//! AEPE falls below τ — a per-sample statistic, deliberately not per-pixel.

use crate::error::{CrftError, Result};
use crate::flow::FlowField;
use crate::io;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Evaluation summary: per-sample errors plus the CMR curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_sample_aepe: Vec<f64>,
    pub mean_aepe: f64,
    pub thresholds: Vec<f64>,
    /// percentage (0..=100) of samples with AEPE below each threshold
    pub cmr: Vec<f64>,
}

/// The default threshold grid: 50 points from 0.1 to 5.0 px inclusive.
pub fn default_thresholds() -> Vec<f64> {
    (0..50).map(|i| 0.1 + i as f64 * (4.9 / 49.0)).collect()
}

/// Average end-point error over valid pixels.
pub fn aepe(pred: &FlowField, gt: &FlowField, valid: &[bool]) -> Result<f64> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(CrftError::ShapeMismatch {
            op: "aepe",
            detail: format!(
                "{}x{} vs {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            ),
        });
    }
    let n = pred.height() * pred.width();
    if valid.len() != n {
        return Err(CrftError::ShapeMismatch {
            op: "aepe",
            detail: format!("mask has {} entries for {} pixels", valid.len(), n),
        });
    }
    let pd = pred.tensor().data();
    let gd = gt.tensor().data();
    let mut acc = 0.0;
    let mut count = 0usize;
    for p in 0..n {
        if !valid[p] {
            continue;
        }
        let dx = pd[p] - gd[p];
        let dy = pd[n + p] - gd[n + p];
        acc += (dx * dx + dy * dy).sqrt();
        count += 1;
    }
    if count == 0 {
        return Err(CrftError::EmptyMask("aepe over empty valid set".into()));
    }
    Ok(acc / count as f64)
}

/// CMR over a sorted ascending threshold grid.
pub fn cmr_curve(per_sample_aepe: &[f64], thresholds: &[f64]) -> Result<EvalReport> {
    if per_sample_aepe.is_empty() {
        return Err(CrftError::InvalidArgument(
            "cmr_curve: no samples".into(),
        ));
    }
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(CrftError::InvalidArgument(
            "cmr_curve: thresholds must be sorted ascending".into(),
        ));
    }
    let n = per_sample_aepe.len() as f64;
    let cmr = thresholds
        .iter()
        .map(|tau| {
            100.0 * per_sample_aepe.iter().filter(|a| **a < *tau).count() as f64 / n
        })
        .collect();
    Ok(EvalReport {
        per_sample_aepe: per_sample_aepe.to_vec(),
        mean_aepe: per_sample_aepe.iter().sum::<f64>() / n,
        thresholds: thresholds.to_vec(),
        cmr,
    })
}

impl EvalReport {
    /// CSV with a threshold,cmr row per grid point.
    pub fn write_cmr_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::from("threshold,cmr\n");
        for (t, c) in self.thresholds.iter().zip(&self.cmr) {
            text.push_str(&format!("{t},{c}\n"));
        }
        std::fs::write(path, text).map_err(|e| CrftError::io(path.display().to_string(), e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }
}

/// Alternating tiles from two equally sized [1,1,H,W] intensity images.
/// Tiles with even (row-tile + col-tile) come from `a`, odd from `b`.
pub fn checkerboard_fuse(a: &Tensor, b: &Tensor, tile: usize) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(CrftError::ShapeMismatch {
            op: "checkerboard_fuse",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let s = a.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 1 {
        return Err(CrftError::ShapeMismatch {
            op: "checkerboard_fuse",
            detail: format!("need [1,1,H,W], got {:?}", s),
        });
    }
    let (h, w) = (s[2], s[3]);
    if tile == 0 || tile > h.min(w) {
        return Err(CrftError::InvalidArgument(format!(
            "checkerboard tile {} outside 1..={}",
            tile,
            h.min(w)
        )));
    }
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let from_a = ((y / tile) + (x / tile)) % 2 == 0;
            data[y * w + x] = if from_a {
                a.data()[y * w + x]
            } else {
                b.data()[y * w + x]
            };
        }
    }
    Tensor::new(vec![1, 1, h, w], data)
}
