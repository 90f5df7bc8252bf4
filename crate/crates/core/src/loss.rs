//! Hierarchical flow supervision.
//!
//! The coarse flow is compared against an average-pooled, magnitude-rescaled
//! ground truth at 1/8 with a masked per-pixel L1. Every refinement
//! iteration's full-resolution flow is supervised the same way, and the
//! per-iteration losses combine with geometrically decaying weights so later
//! iterations dominate. The total is a weighted sum of both parts.

use crate::error::{CrftError, Result};
use crate::flow::FlowField;
use crate::tensor::{self, Tape, Tensor, TensorId};
use serde::{Deserialize, Serialize};

/// Per-step loss breakdown, serialized into the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub coarse: f64,
    pub per_iteration: Vec<f64>,
    pub fine: f64,
    pub total: f64,
    pub valid_coarse: usize,
    pub valid: usize,
}

/// Masked mean of the per-pixel L1 norm (|dx| + |dy|) between a flow node
/// and a constant ground truth.
fn masked_l1_mean(
    tape: &mut Tape,
    pred: TensorId,
    gt: TensorId,
    mask2: TensorId,
    valid_count: usize,
) -> Result<TensorId> {
    let diff = tape.sub(pred, gt)?;
    let mag = tape.abs(diff)?;
    let masked = tape.mul(mag, mask2)?;
    let total = tape.sum(masked)?;
    tape.scalar_affine(total, 1.0 / valid_count as f64, 0.0)
}

/// Ground truth and mask prepared once per sample for the coarse scale:
/// average-pool the full-resolution flow by 8 with magnitudes divided by 8;
/// a coarse pixel is valid iff every pixel of its 8×8 block is valid.
pub struct CoarseTarget {
    pub flow: Tensor,
    pub mask: Vec<bool>,
    pub valid_count: usize,
}

pub fn downsample_ground_truth(gt: &FlowField, valid_mask: &Tensor) -> Result<CoarseTarget> {
    let pooled = tensor::avg_pool(gt.tensor(), 8)?;
    let scaled = Tensor::new(
        pooled.shape().to_vec(),
        pooled.data().iter().map(|v| v / 8.0).collect(),
    )?;
    let pooled_mask = tensor::avg_pool(valid_mask, 8)?;
    let mask: Vec<bool> = pooled_mask
        .data()
        .iter()
        .map(|v| *v > 1.0 - 1e-9)
        .collect();
    let valid_count = mask.iter().filter(|m| **m).count();
    Ok(CoarseTarget {
        flow: scaled,
        mask,
        valid_count,
    })
}

/// Build the 2-channel 0/1 mask constant matching a [1,2,H,W] flow node.
fn mask_constant(tape: &mut Tape, mask: &[bool], h: usize, w: usize) -> Result<TensorId> {
    debug_assert_eq!(mask.len(), h * w);
    let plane: Vec<f64> = mask.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect();
    let mut data = plane.clone();
    data.extend(plane);
    tape.constant(vec![1, 2, h, w], data)
}

/// Masked L1 between the 1/8 flow node and the pooled ground truth.
pub fn coarse_loss(
    tape: &mut Tape,
    coarse_flow: TensorId,
    target: &CoarseTarget,
) -> Result<TensorId> {
    if target.valid_count == 0 {
        return Err(CrftError::EmptyMask(
            "no valid coarse pixels; sample is degenerate".into(),
        ));
    }
    let s = tape.shape(coarse_flow).to_vec();
    let (h, w) = (s[2], s[3]);
    if target.flow.shape() != [1, 2, h, w] {
        return Err(CrftError::ShapeMismatch {
            op: "coarse_loss",
            detail: format!(
                "prediction {:?} vs target {:?}",
                s,
                target.flow.shape()
            ),
        });
    }
    let gt = tape.constant(target.flow.shape().to_vec(), target.flow.data().to_vec())?;
    let mask2 = mask_constant(tape, &target.mask, h, w)?;
    masked_l1_mean(tape, coarse_flow, gt, mask2, target.valid_count)
}

/// Independent masked L1 per iteration plus the geometrically weighted sum
/// with decay `gamma` (later iterations weigh more).
pub fn iterative_loss(
    tape: &mut Tape,
    flows: &[TensorId],
    gt: &FlowField,
    valid_mask: &[bool],
    gamma: f64,
) -> Result<(TensorId, Vec<TensorId>)> {
    if flows.is_empty() {
        return Err(CrftError::InvalidArgument(
            "iterative_loss: no iteration flows".into(),
        ));
    }
    let valid_count = valid_mask.iter().filter(|m| **m).count();
    if valid_count == 0 {
        return Err(CrftError::EmptyMask(
            "no valid pixels; sample is degenerate".into(),
        ));
    }
    let (h, w) = (gt.height(), gt.width());
    let gt_const = tape.constant(gt.tensor().shape().to_vec(), gt.tensor().data().to_vec())?;
    let mask2 = mask_constant(tape, valid_mask, h, w)?;

    let n = flows.len();
    let mut per_iteration = Vec::with_capacity(n);
    let mut weighted = Vec::with_capacity(n);
    for (i, &flow) in flows.iter().enumerate() {
        let li = masked_l1_mean(tape, flow, gt_const, mask2, valid_count)?;
        per_iteration.push(li);
        let weight = gamma.powi((n - 1 - i) as i32);
        weighted.push(tape.scalar_affine(li, weight, 0.0)?);
    }
    let mut total = weighted[0];
    for &wl in &weighted[1..] {
        total = tape.add(total, wl)?;
    }
    Ok((total, per_iteration))
}

/// Weighted combination of the coarse and iterative losses. A missing
/// coarse term (coarse supervision disabled) contributes zero.
pub fn total_loss(
    tape: &mut Tape,
    coarse: Option<TensorId>,
    fine: TensorId,
    lambda_coarse: f64,
    lambda_fine: f64,
) -> Result<TensorId> {
    let fine_term = tape.scalar_affine(fine, lambda_fine, 0.0)?;
    match coarse {
        Some(c) => {
            let coarse_term = tape.scalar_affine(c, lambda_coarse, 0.0)?;
            tape.add(coarse_term, fine_term)
        }
        None => Ok(fine_term),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::Resolution;
    use crate::rng::Rng;

    fn full_mask(n: usize) -> Vec<bool> {
        vec![true; n]
    }

    fn coarse_target_from(flow: Tensor, mask: Vec<bool>) -> CoarseTarget {
        let valid_count = mask.iter().filter(|m| **m).count();
        CoarseTarget {
            flow,
            mask,
            valid_count,
        }
    }

    #[test]
    fn equal_flows_give_zero_loss() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..32).map(|v| v as f64 * 0.1).collect();
        let pred = tape.constant(vec![1, 2, 4, 4], data.clone()).unwrap();
        let target = coarse_target_from(
            Tensor::new(vec![1, 2, 4, 4], data).unwrap(),
            full_mask(16),
        );
        let loss = coarse_loss(&mut tape, pred, &target).unwrap();
        assert_eq!(tape.data(loss)[0], 0.0);
    }

    #[test]
    fn uniform_unit_offset_gives_two() {
        let mut tape = Tape::new();
        let pred = tape.constant(vec![1, 2, 2, 2], vec![1.0; 8]).unwrap();
        let target = coarse_target_from(Tensor::zeros(vec![1, 2, 2, 2]), full_mask(4));
        let loss = coarse_loss(&mut tape, pred, &target).unwrap();
        assert!((tape.data(loss)[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn random_fields_match_scalar_oracle() {
        let mut rng = Rng::new(42);
        let pred_t = Tensor::uniform(vec![1, 2, 2, 2], 3.0, &mut rng);
        let gt_t = Tensor::uniform(vec![1, 2, 2, 2], 3.0, &mut rng);
        let mask = vec![true, false, true, true];
        let mut tape = Tape::new();
        let pred = tape.leaf(&pred_t);
        let target = coarse_target_from(gt_t.clone(), mask.clone());
        let loss = coarse_loss(&mut tape, pred, &target).unwrap();

        let mut expect = 0.0;
        for p in 0..4 {
            if !mask[p] {
                continue;
            }
            expect += (pred_t.data()[p] - gt_t.data()[p]).abs()
                + (pred_t.data()[4 + p] - gt_t.data()[4 + p]).abs();
        }
        expect /= 3.0;
        assert!((tape.data(loss)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn empty_valid_set_is_an_error() {
        let mut tape = Tape::new();
        let pred = tape.constant(vec![1, 2, 2, 2], vec![0.0; 8]).unwrap();
        let target = coarse_target_from(Tensor::zeros(vec![1, 2, 2, 2]), vec![false; 4]);
        assert!(matches!(
            coarse_loss(&mut tape, pred, &target),
            Err(CrftError::EmptyMask(_))
        ));
    }

    #[test]
    fn single_iteration_weight_is_one() {
        let mut tape = Tape::new();
        let pred = tape.constant(vec![1, 2, 8, 8], vec![0.5; 128]).unwrap();
        let gt = FlowField::zeros(8, 8, Resolution::Full);
        let (total, per) = iterative_loss(&mut tape, &[pred], &gt, &full_mask(64), 0.9).unwrap();
        assert_eq!(per.len(), 1);
        assert_eq!(tape.data(total)[0], tape.data(per[0])[0]);
    }

    #[test]
    fn unit_losses_with_decay_sum_to_2_71() {
        // three iterations, each with per-pixel L1 of exactly 1.0
        let mut tape = Tape::new();
        let mut flows = Vec::new();
        for _ in 0..3 {
            // dx = 0.5, dy = 0.5 everywhere -> |dx|+|dy| = 1 per pixel
            flows.push(tape.constant(vec![1, 2, 4, 4], vec![0.5; 32]).unwrap());
        }
        let gt = FlowField::zeros(4, 4, Resolution::Full);
        let (total, per) = iterative_loss(&mut tape, &flows, &gt, &full_mask(16), 0.9).unwrap();
        for &p in &per {
            assert!((tape.data(p)[0] - 1.0).abs() < 1e-12);
        }
        assert!((tape.data(total)[0] - 2.71).abs() < 1e-12);
    }

    #[test]
    fn random_two_iteration_case_matches_direct_evaluation() {
        let mut rng = Rng::new(7);
        let gt_t = Tensor::uniform(vec![1, 2, 4, 4], 2.0, &mut rng);
        let gt = FlowField::new(gt_t.clone(), Resolution::Full).unwrap();
        let f1 = Tensor::uniform(vec![1, 2, 4, 4], 2.0, &mut rng);
        let f2 = Tensor::uniform(vec![1, 2, 4, 4], 2.0, &mut rng);
        let mask: Vec<bool> = (0..16).map(|i| i % 3 != 0).collect();
        let count = mask.iter().filter(|m| **m).count();
        let gamma = 0.9;

        let mut tape = Tape::new();
        let id1 = tape.leaf(&f1);
        let id2 = tape.leaf(&f2);
        let (total, _) = iterative_loss(&mut tape, &[id1, id2], &gt, &mask, gamma).unwrap();

        let l1_of = |f: &Tensor| -> f64 {
            let mut acc = 0.0;
            for p in 0..16 {
                if !mask[p] {
                    continue;
                }
                acc += (f.data()[p] - gt_t.data()[p]).abs()
                    + (f.data()[16 + p] - gt_t.data()[16 + p]).abs();
            }
            acc / count as f64
        };
        let expect = gamma * l1_of(&f1) + l1_of(&f2);
        assert!((tape.data(total)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn decay_weights_increase_toward_later_iterations() {
        let gamma: f64 = 0.9;
        let n = 5i32;
        let weights: Vec<f64> = (0..n).map(|i| gamma.powi(n - 1 - i)).collect();
        for pair in weights.windows(2) {
            assert!(pair[0] < pair[1]);
        }
    }

    #[test]
    fn total_loss_weighting() {
        let mut tape = Tape::new();
        let lc = tape.constant(vec![1], vec![0.5]).unwrap();
        let lf = tape.constant(vec![1], vec![2.71]).unwrap();
        let both = total_loss(&mut tape, Some(lc), lf, 1.0, 1.0).unwrap();
        assert!((tape.data(both)[0] - 3.21).abs() < 1e-12);
        let fine_only = total_loss(&mut tape, Some(lc), lf, 0.0, 1.5).unwrap();
        assert!((tape.data(fine_only)[0] - 1.5 * 2.71).abs() < 1e-12);
        let skipped = total_loss(&mut tape, None, lf, 0.7, 1.0).unwrap();
        assert!((tape.data(skipped)[0] - 2.71).abs() < 1e-12);
    }

    #[test]
    fn total_gradient_is_linear_in_parts() {
        // d(total)/dw equals λc·d(Lc)/dw + λf·d(Lf)/dw, checked with separate
        // backward passes over a shared weight
        let w_t = Tensor::new(vec![1], vec![1.3]).unwrap().with_grad();
        let (lambda_c, lambda_f) = (0.5, 1.25);

        let grad_of = |mode: u8| -> f64 {
            let mut tape = Tape::new();
            let w = tape.leaf(&w_t);
            let sq = tape.mul(w, w).unwrap(); // "coarse": w²
            let lc = tape.sum(sq).unwrap();
            let cube0 = tape.mul(w, w).unwrap();
            let cube = tape.mul(cube0, w).unwrap(); // "fine": w³
            let lf = tape.sum(cube).unwrap();
            let loss = match mode {
                0 => total_loss(&mut tape, Some(lc), lf, lambda_c, lambda_f).unwrap(),
                1 => lc,
                _ => lf,
            };
            tape.backward(loss).unwrap();
            tape.grad(w).unwrap()[0]
        };
        let composed = grad_of(0);
        let dc = grad_of(1);
        let df = grad_of(2);
        assert!((composed - (lambda_c * dc + lambda_f * df)).abs() < 1e-12);
    }

    #[test]
    fn loss_is_permutation_invariant_over_pixels() {
        let mut rng = Rng::new(77);
        let pred_v: Vec<f64> = (0..32).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let gt_v: Vec<f64> = (0..32).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let perm: Vec<usize> = (0..16).map(|i| (i * 7 + 3) % 16).collect();

        let eval = |pred: &[f64], gt: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let p = tape.constant(vec![1, 2, 4, 4], pred.to_vec()).unwrap();
            let gt_f =
                FlowField::new(Tensor::new(vec![1, 2, 4, 4], gt.to_vec()).unwrap(), Resolution::Full)
                    .unwrap();
            let (total, _) = iterative_loss(&mut tape, &[p], &gt_f, &vec![true; 16], 0.9).unwrap();
            tape.data(total)[0]
        };
        let permute = |v: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; 32];
            for (i, &pi) in perm.iter().enumerate() {
                out[i] = v[pi];
                out[16 + i] = v[16 + pi];
            }
            out
        };
        let base = eval(&pred_v, &gt_v);
        let shuffled = eval(&permute(&pred_v), &permute(&gt_v));
        assert!((base - shuffled).abs() < 1e-12);
    }

    #[test]
    fn downsampling_pools_and_rescales() {
        // constant (8, -16) full-res flow on 16x16 -> coarse (1, -2)
        let mut data = vec![8.0; 256];
        data.extend(vec![-16.0; 256]);
        let gt = FlowField::new(Tensor::new(vec![1, 2, 16, 16], data).unwrap(), Resolution::Full)
            .unwrap();
        let mask = Tensor::filled(vec![1, 1, 16, 16], 1.0);
        let target = downsample_ground_truth(&gt, &mask).unwrap();
        assert_eq!(target.flow.shape(), &[1, 2, 2, 2]);
        assert!(target.flow.data()[0..4].iter().all(|v| (*v - 1.0).abs() < 1e-12));
        assert!(target.flow.data()[4..8].iter().all(|v| (*v + 2.0).abs() < 1e-12));
        assert_eq!(target.valid_count, 4);
    }

    #[test]
    fn coarse_mask_requires_every_child_pixel() {
        let gt = FlowField::zeros(16, 16, Resolution::Full);
        let mut mask = Tensor::filled(vec![1, 1, 16, 16], 1.0);
        mask.data_mut()[0] = 0.0; // one invalid pixel in the first 8x8 block
        let target = downsample_ground_truth(&gt, &mask).unwrap();
        assert!(!target.mask[0]);
        assert!(target.mask[1] && target.mask[2] && target.mask[3]);
        assert_eq!(target.valid_count, 3);
    }
}
