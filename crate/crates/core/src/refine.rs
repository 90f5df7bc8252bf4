//! Iterative discrepancy-guided flow refinement on the 1/2 lattice.
//!
//! Per-window flows start as the broadcast coarse flow (unit conversion
//! 1/8 -> 1/2 multiplies by 4). Each iteration projects the fused fine
//! features into a shared space with a two-layer GELU MLP, warps the target
//! features by the current flow, inverts the per-window min-max-normalized
//! feature discrepancy into an attention map, aggregates candidate flows
//! with that attention, adds a learned residual, estimates a confidence map,
//! and blends a confidence-weighted smoothed field with the raw field.
//!
//! Window bookkeeping: the K = Hc·Wc windows are laid out side by side on a
//! (5·Hc)×(5·Wc) lattice (window stride = window size, no overlap). The real
//! 1/2 lattice is the top-left (4·Hc)×(4·Wc) crop; the remainder is padding
//! that stays internal to the loop.

use crate::attention;
use crate::error::{CrftError, Result};
use crate::fine::WINDOW;
use crate::params::{ParamBinding, ParamSet};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, TensorId};

/// Flow values produced by each refinement iteration.
#[derive(Debug, Clone)]
pub struct IterationOutputs {
    /// full-resolution flow per iteration, in full-resolution pixels
    pub full_res_flows: Vec<TensorId>,
    /// final smoothed 1/2-resolution flow
    pub half_res_flow: TensorId,
    /// final confidence map on the 1/2 lattice
    pub confidence: TensorId,
}

/// Register refinement parameters under `refine.`.
///
/// The residual head's final conv and the confidence net's final conv are
/// zero-initialized, so the first update leaves the flow untouched and the
/// initial confidence is uniformly 0.5. The smoothing convs start as
/// identity kernels.
pub fn init_params(params: &mut ParamSet, fine_ch: usize, rng: &mut Rng) {
    let lin_bound = 1.0 / (fine_ch as f64).sqrt();
    for name in ["l1", "l2"] {
        params.insert(
            format!("refine.fsft.{name}.w"),
            Tensor::uniform(vec![fine_ch, fine_ch], lin_bound, rng),
        );
        params.insert(format!("refine.fsft.{name}.b"), Tensor::zeros(vec![fine_ch]));
    }
    // Eq-style attention projections carry no bias
    params.insert(
        "refine.attn.q.w",
        Tensor::uniform(vec![fine_ch, fine_ch], lin_bound, rng),
    );
    params.insert(
        "refine.attn.k.w",
        Tensor::uniform(vec![fine_ch, fine_ch], lin_bound, rng),
    );

    let conv_bound = |cin: usize| 1.0 / ((cin * 9) as f64).sqrt();
    let res_in = fine_ch + 2;
    params.insert(
        "refine.res.c1.w",
        Tensor::uniform(vec![fine_ch, res_in, 3, 3], conv_bound(res_in), rng),
    );
    params.insert("refine.res.c1.b", Tensor::zeros(vec![fine_ch]));
    params.insert("refine.res.c2.w", Tensor::zeros(vec![2, fine_ch, 3, 3]));
    params.insert("refine.res.c2.b", Tensor::zeros(vec![2]));

    let cen_in = 2 * fine_ch + 1;
    params.insert(
        "refine.cenet.c1.w",
        Tensor::uniform(vec![fine_ch, cen_in, 3, 3], conv_bound(cen_in), rng),
    );
    params.insert("refine.cenet.c1.b", Tensor::zeros(vec![fine_ch]));
    params.insert("refine.cenet.c2.w", Tensor::zeros(vec![1, fine_ch, 3, 3]));
    params.insert("refine.cenet.c2.b", Tensor::zeros(vec![1]));

    let mut identity = Tensor::zeros(vec![2, 2, 3, 3]);
    identity.data_mut()[4] = 1.0; // out 0 <- in 0 center
    identity.data_mut()[9 * 3 + 4] = 1.0; // out 1 <- in 1 center
    params.insert("refine.smooth.c1.w", identity.clone());
    params.insert("refine.smooth.c1.b", Tensor::zeros(vec![2]));
    params.insert("refine.smooth.c2.w", identity);
    params.insert("refine.smooth.c2.b", Tensor::zeros(vec![2]));

    // pre-sigmoid blend weight; sigmoid(0) = 0.5
    params.insert("refine.alpha", Tensor::zeros(vec![1]));
}

/// Two-layer per-position MLP (linear, GELU, linear) shared across windows
/// and positions, projecting both modalities into one feature space.
pub fn shared_space_mlp(
    tape: &mut Tape,
    binding: &ParamBinding,
    windows: TensorId,
) -> Result<TensorId> {
    let s = tape.shape(windows).to_vec();
    let (h, w) = (s[2], s[3]);
    let tokens = attention::windows_to_tokens(tape, windows)?;
    let x = tape.linear(
        tokens,
        binding.id("refine.fsft.l1.w"),
        binding.id("refine.fsft.l1.b"),
    )?;
    let x = tape.gelu(x)?;
    let x = tape.linear(
        x,
        binding.id("refine.fsft.l2.w"),
        binding.id("refine.fsft.l2.b"),
    )?;
    attention::tokens_to_windows(tape, x, h, w)
}

/// Inverted feature discrepancy. `delta` is the per-window min-max rescale
/// of the signed difference a − b_warped into [0,1] (zero-range windows
/// count as perfectly consistent); the attention cue is 1 − delta. Keeping
/// the sign matters: it is the only cue for the correction direction the
/// residual head can learn from.
pub fn feature_discrepancy(
    tape: &mut Tape,
    a: TensorId,
    b_warped: TensorId,
) -> Result<(TensorId, TensorId)> {
    let diff = tape.sub(a, b_warped)?;
    let delta = tape.minmax_norm_per_window(diff)?;
    let f_attn = tape.scalar_affine(delta, -1.0, 1.0)?;
    Ok((delta, f_attn))
}

/// Discrepancy-modulated flow aggregation: queries and keys are linear
/// projections of the inverted discrepancy, the flow is the value, and each
/// position takes the attention-weighted mean of all window flows.
pub fn discrepancy_attention(
    tape: &mut Tape,
    binding: &ParamBinding,
    f_attn: TensorId,
    flow_windows: TensorId,
) -> Result<TensorId> {
    let s = tape.shape(f_attn).to_vec();
    let (ch, h, w) = (s[1], s[2], s[3]);
    let tokens = attention::windows_to_tokens(tape, f_attn)?;
    let zero_b = tape.constant(vec![ch], vec![0.0; ch])?;
    let q = tape.linear(tokens, binding.id("refine.attn.q.w"), zero_b)?;
    let k = tape.linear(tokens, binding.id("refine.attn.k.w"), zero_b)?;
    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scalar_affine(scores, 1.0 / (ch as f64).sqrt(), 0.0)?;
    let attn = tape.softmax_lastdim(scores)?;
    let flow_tokens = attention::windows_to_tokens(tape, flow_windows)?;
    let aggregated = tape.batch_matmul(attn, flow_tokens, false)?;
    attention::tokens_to_windows(tape, aggregated, h, w)
}

/// Residual flow update: a small conv stack over [aggregated flow,
/// inverted discrepancy] predicts a correction added to the aggregate.
pub fn residual_update(
    tape: &mut Tape,
    binding: &ParamBinding,
    t_prime: TensorId,
    f_attn: TensorId,
) -> Result<TensorId> {
    let x = tape.concat_dim1(&[t_prime, f_attn])?;
    let h = tape.conv2d(x, binding.id("refine.res.c1.w"), 1, 1)?;
    let h = tape.bias_add_channel(h, binding.id("refine.res.c1.b"))?;
    let h = tape.relu(h)?;
    let d = tape.conv2d(h, binding.id("refine.res.c2.w"), 1, 1)?;
    let d = tape.bias_add_channel(d, binding.id("refine.res.c2.b"))?;
    tape.add(t_prime, d)
}

/// Per-position confidence from the shared-space features of both images
/// and the original image content, through a conv stack and a sigmoid.
pub fn confidence_net(
    tape: &mut Tape,
    binding: &ParamBinding,
    feat_a: TensorId,
    feat_b_warped: TensorId,
    image_windows: TensorId,
) -> Result<TensorId> {
    let x = tape.concat_dim1(&[feat_a, feat_b_warped, image_windows])?;
    let h = tape.conv2d(x, binding.id("refine.cenet.c1.w"), 1, 1)?;
    let h = tape.bias_add_channel(h, binding.id("refine.cenet.c1.b"))?;
    let h = tape.relu(h)?;
    let c = tape.conv2d(h, binding.id("refine.cenet.c2.w"), 1, 1)?;
    let c = tape.bias_add_channel(c, binding.id("refine.cenet.c2.b"))?;
    tape.sigmoid(c)
}

/// Assemble per-window maps onto the window-stride lattice and crop to the
/// real target dims. Windows tile; every cropped position carries its own
/// window's value.
pub fn aggregate_windows(
    tape: &mut Tape,
    windows: TensorId,
    grid: (usize, usize),
    target: (usize, usize),
) -> Result<TensorId> {
    let tiled = tape.tile_windows(windows, grid.0, grid.1)?;
    let s = tape.shape(tiled).to_vec();
    if target.0 > s[2] || target.1 > s[3] {
        return Err(CrftError::ShapeMismatch {
            op: "aggregate_windows",
            detail: format!("target {:?} exceeds tiled lattice {:?}", target, s),
        });
    }
    tape.crop2d(tiled, target.0, target.1)
}

/// Confidence-guided smoothing: alpha · conv(flow ⊙ confidence) +
/// (1 − alpha) · flow, with a depth-2 conv stack over the two flow channels.
/// `alpha` is a scalar node, normally sigmoid(refine.alpha).
pub fn confidence_smooth(
    tape: &mut Tape,
    binding: &ParamBinding,
    flow: TensorId,
    confidence: TensorId,
    alpha: TensorId,
) -> Result<TensorId> {
    let fs = tape.shape(flow).to_vec();
    let cs = tape.shape(confidence).to_vec();
    if fs[2] != cs[2] || fs[3] != cs[3] {
        return Err(CrftError::ShapeMismatch {
            op: "confidence_smooth",
            detail: format!("flow {:?} vs confidence {:?}", fs, cs),
        });
    }
    let c2 = tape.concat_dim1(&[confidence, confidence])?;
    let prod = tape.mul(flow, c2)?;
    let h = tape.conv2d(prod, binding.id("refine.smooth.c1.w"), 1, 1)?;
    let h = tape.bias_add_channel(h, binding.id("refine.smooth.c1.b"))?;
    let h = tape.conv2d(h, binding.id("refine.smooth.c2.w"), 1, 1)?;
    let smoothed = tape.bias_add_channel(h, binding.id("refine.smooth.c2.b"))?;
    let a_term = tape.mul_scalar(smoothed, alpha)?;
    let one_minus = tape.scalar_affine(alpha, -1.0, 1.0)?;
    let b_term = tape.mul_scalar(flow, one_minus)?;
    tape.add(a_term, b_term)
}

/// Bilinear upsampling from 1/2 to full resolution; displacement magnitudes
/// double with the unit change.
pub fn upsample_flow(
    tape: &mut Tape,
    flow_half: TensorId,
    target_h: usize,
    target_w: usize,
) -> Result<TensorId> {
    let s = tape.shape(flow_half).to_vec();
    if s[2] * 2 != target_h || s[3] * 2 != target_w {
        return Err(CrftError::InvalidArgument(format!(
            "upsample_flow: target {}x{} is not 2x the source {}x{}",
            target_h, target_w, s[2], s[3]
        )));
    }
    let up = tape.upsample_bilinear(flow_half, 2)?;
    tape.scalar_affine(up, 2.0, 0.0)
}

/// The full refinement loop.
///
/// `coarse_flow`: [1,2,Hc,Wc] in 1/8-resolution pixels. `fine_a`/`fine_b`:
/// fused windows [K, C_f, 5, 5]. `image_windows`: constant [K,1,5,5] window
/// content from the half-resolution source image. Returns every iteration's
/// full-resolution flow (all retained for the loss).
pub fn run_iterations(
    tape: &mut Tape,
    binding: &ParamBinding,
    coarse_flow: TensorId,
    fine_a: TensorId,
    fine_b: TensorId,
    image_windows: TensorId,
    target_window_shifts: Option<&[(i64, i64)]>,
    iterations: usize,
) -> Result<IterationOutputs> {
    if iterations == 0 {
        return Err(CrftError::InvalidArgument(
            "run_iterations: need at least one iteration".into(),
        ));
    }
    let cs = tape.shape(coarse_flow).to_vec();
    let (hc, wc) = (cs[2], cs[3]);
    let target_half = (4 * hc, 4 * wc);
    let target_full = (8 * hc, 8 * wc);

    // unit conversion 1/8 -> 1/2, then broadcast to windows
    let scaled = tape.scalar_affine(coarse_flow, 4.0, 0.0)?;
    let mut flow_windows = tape.expand_to_windows(scaled, WINDOW)?;

    // When the target windows were gathered at coarse-shifted anchors, the
    // warp must subtract that built-in displacement: flows stay absolute,
    // sampling happens in the shifted window's own frame.
    let shift_windows = match target_window_shifts {
        Some(shifts) => {
            let mut data = Vec::with_capacity(2 * shifts.len());
            for &(_, dx) in shifts {
                data.push(dx as f64);
            }
            for &(dy, _) in shifts {
                data.push(dy as f64);
            }
            let grid = tape.constant(vec![1, 2, hc, wc], data)?;
            Some(tape.expand_to_windows(grid, WINDOW)?)
        }
        None => None,
    };

    let alpha_raw = binding.id("refine.alpha");
    let alpha = tape.sigmoid(alpha_raw)?;

    let mut full_res_flows = Vec::with_capacity(iterations);
    let mut last_half = None;
    let mut last_conf = None;

    for _ in 0..iterations {
        let phi_a = shared_space_mlp(tape, binding, fine_a)?;
        let phi_b = shared_space_mlp(tape, binding, fine_b)?;
        let warp_flow = match shift_windows {
            Some(s) => tape.sub(flow_windows, s)?,
            None => flow_windows,
        };
        let (warped_b, _oob) = tape.bilinear_warp(phi_b, warp_flow)?;
        let (_delta, f_attn) = feature_discrepancy(tape, phi_a, warped_b)?;
        let aggregated = discrepancy_attention(tape, binding, f_attn, flow_windows)?;
        let updated = residual_update(tape, binding, aggregated, f_attn)?;
        let conf = confidence_net(tape, binding, phi_a, warped_b, image_windows)?;

        let flow_pad = tape.tile_windows(updated, hc, wc)?;
        let conf_pad = tape.tile_windows(conf, hc, wc)?;
        let smoothed = confidence_smooth(tape, binding, flow_pad, conf_pad, alpha)?;

        let half = tape.crop2d(smoothed, target_half.0, target_half.1)?;
        let full = upsample_flow(tape, half, target_full.0, target_full.1)?;
        full_res_flows.push(full);
        last_half = Some(half);
        last_conf = Some(tape.crop2d(conf_pad, target_half.0, target_half.1)?);

        flow_windows = tape.untile_windows(smoothed, WINDOW)?;
    }

    Ok(IterationOutputs {
        full_res_flows,
        half_res_flow: last_half.unwrap(),
        confidence: last_conf.unwrap(),
    })
}
