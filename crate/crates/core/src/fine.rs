//! Fine-scale feature preparation: per-coarse-pixel window gathering from
//! the 1/4 and 1/2 pyramid levels, and hierarchical windowed SA/CA fusion.
//!
//! Every coarse (1/8) pixel owns one window per level: a 5×5 window on the
//! 1/4 map centered at twice its coordinates, and 3×3 + 5×5 windows on the
//! 1/2 map centered at four times its coordinates. Border windows are
//! zero-padded and masked. Fusion refines the 1/4 and 3×3 windows with
//! windowed self-attention, exchanges mid-scale information across the two
//! images with cross-attention, and injects both into the 1/2 windows with
//! the same SA/CA pattern.

use crate::attention;
use crate::encoder::{ImageTag, PyramidFeatures};
use crate::error::{CrftError, Result};
use crate::params::{ParamBinding, ParamSet};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, TensorId};

/// Side of the square refinement window on the 1/2 lattice.
pub const WINDOW: usize = 5;
/// Side of the mid-scale exchange window.
pub const MID_WINDOW: usize = 3;

/// Per-coarse-pixel local feature windows for one image.
#[derive(Debug, Clone)]
pub struct WindowSet {
    /// [K, C4, 5, 5] windows from the 1/4 map
    pub quarter: TensorId,
    pub quarter_valid: Vec<bool>,
    /// [K, C2, 3, 3] mid-scale windows, sourced from the 1/2 map
    pub mid: TensorId,
    pub mid_valid: Vec<bool>,
    /// [K, C2, 5, 5] windows from the 1/2 map
    pub half: TensorId,
    pub half_valid: Vec<bool>,
    /// coarse (row, col) anchor per window
    pub anchors: Vec<(usize, usize)>,
    pub coarse_dims: (usize, usize),
    pub source: ImageTag,
}

/// Anchor centers on a map `scale`× finer than the coarse grid.
pub fn scaled_anchors(coarse_h: usize, coarse_w: usize, scale: usize) -> Vec<(i64, i64)> {
    let mut centers = Vec::with_capacity(coarse_h * coarse_w);
    for i in 0..coarse_h {
        for j in 0..coarse_w {
            centers.push(((i * scale) as i64, (j * scale) as i64));
        }
    }
    centers
}

/// Gather the three window tensors for one image's pyramid.
///
/// `half_shifts`, when present, offsets every window's center by a
/// per-window integer displacement in 1/2-lattice pixels (rounded coarse
/// flow for the target image): the gathered windows then hold the content
/// the coarse stage predicts to correspond, and the refinement only has to
/// resolve the sub-cell residual its 5×5 support can actually see.
pub fn gather_windows(
    tape: &mut Tape,
    pyr: &PyramidFeatures,
    half_shifts: Option<&[(i64, i64)]>,
) -> Result<WindowSet> {
    let es = tape.shape(pyr.eighth).to_vec();
    let (hc, wc) = (es[2], es[3]);
    let k = hc * wc;
    if let Some(s) = half_shifts {
        if s.len() != k {
            return Err(crate::error::CrftError::ShapeMismatch {
                op: "gather_windows",
                detail: format!("{} shifts for {} windows", s.len(), k),
            });
        }
    }
    let mut anchors_quarter = scaled_anchors(hc, wc, 2);
    let mut anchors_half = scaled_anchors(hc, wc, 4);
    if let Some(shifts) = half_shifts {
        for (i, &(dy, dx)) in shifts.iter().enumerate() {
            anchors_half[i].0 += dy;
            anchors_half[i].1 += dx;
            // the 1/4 lattice moves at half the 1/2-lattice rate
            anchors_quarter[i].0 += dy.div_euclid(2);
            anchors_quarter[i].1 += dx.div_euclid(2);
        }
    }

    let (quarter, quarter_valid) = tape.gather_windows(pyr.quarter, &anchors_quarter, WINDOW)?;
    let (mid, mid_valid) = tape.gather_windows(pyr.half, &anchors_half, MID_WINDOW)?;
    let (half, half_valid) = tape.gather_windows(pyr.half, &anchors_half, WINDOW)?;

    let mut anchors = Vec::with_capacity(k);
    for i in 0..hc {
        for j in 0..wc {
            anchors.push((i, j));
        }
    }
    Ok(WindowSet {
        quarter,
        quarter_valid,
        mid,
        mid_valid,
        half,
        half_valid,
        anchors,
        coarse_dims: (hc, wc),
        source: pyr.source,
    })
}

/// Plain-data window gather for constant inputs (image intensities feeding
/// the confidence net); no gradient path.
pub fn gather_windows_plain(map: &Tensor, centers: &[(i64, i64)], win: usize) -> Result<Tensor> {
    let s = map.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(CrftError::ShapeMismatch {
            op: "gather_windows_plain",
            detail: format!("need [1,C,H,W], got {:?}", s),
        });
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let k = centers.len();
    let half = (win / 2) as i64;
    let mut data = vec![0.0; k * c * win * win];
    for (ki, &(cy, cx)) in centers.iter().enumerate() {
        for i in 0..win {
            let sy = cy + i as i64 - half;
            for j in 0..win {
                let sx = cx + j as i64 - half;
                if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                    for ci in 0..c {
                        data[((ki * c + ci) * win + i) * win + j] =
                            map.data()[(ci * h + sy as usize) * w + sx as usize];
                    }
                }
            }
        }
    }
    Tensor::new(vec![k, c, win, win], data)
}

/// Register the fusion parameters under `fine.`: three level projections
/// into the fused channel width plus the five attention blocks.
pub fn init_params(
    params: &mut ParamSet,
    c2: usize,
    c4: usize,
    fine_ch: usize,
    rng: &mut Rng,
) {
    for (name, cin) in [("proj4", c4), ("proj3", c2), ("projh", c2)] {
        let bound = 1.0 / (cin as f64).sqrt();
        params.insert(
            format!("fine.{name}.w"),
            Tensor::uniform(vec![fine_ch, cin], bound, rng),
        );
        params.insert(format!("fine.{name}.b"), Tensor::zeros(vec![fine_ch]));
    }
    for block in ["sa_q", "sa_m", "ca_m", "sa_h", "ca_fuse"] {
        attention::init_block(params, &format!("fine.{block}"), fine_ch, rng);
    }
}

fn project_tokens(
    tape: &mut Tape,
    binding: &ParamBinding,
    name: &str,
    windows: TensorId,
) -> Result<TensorId> {
    let tokens = attention::windows_to_tokens(tape, windows)?;
    tape.linear(
        tokens,
        binding.id(&format!("fine.{name}.w")),
        binding.id(&format!("fine.{name}.b")),
    )
}

struct RefinedTokens {
    quarter: TensorId,
    mid: TensorId,
    half: TensorId,
}

fn per_image_self_attention(
    tape: &mut Tape,
    binding: &ParamBinding,
    ws: &WindowSet,
) -> Result<RefinedTokens> {
    let k = ws.anchors.len();
    let tq = WINDOW * WINDOW;
    let tm = MID_WINDOW * MID_WINDOW;

    let q_tok = project_tokens(tape, binding, "proj4", ws.quarter)?;
    let q_mask = attention::key_mask_bias(tape, k, tq, tq, &ws.quarter_valid)?;
    let quarter = attention::block(tape, binding, "fine.sa_q", q_tok, q_tok, q_mask)?;

    let m_tok = project_tokens(tape, binding, "proj3", ws.mid)?;
    let m_mask = attention::key_mask_bias(tape, k, tm, tm, &ws.mid_valid)?;
    let mid = attention::block(tape, binding, "fine.sa_m", m_tok, m_tok, m_mask)?;

    let h_tok = project_tokens(tape, binding, "projh", ws.half)?;
    let h_mask = attention::key_mask_bias(tape, k, tq, tq, &ws.half_valid)?;
    let half = attention::block(tape, binding, "fine.sa_h", h_tok, h_tok, h_mask)?;

    Ok(RefinedTokens { quarter, mid, half })
}

/// Hierarchical fusion of two images' window sets into fused fine windows
/// [K, fine_ch, 5, 5] each.
pub fn hierarchical_fuse(
    tape: &mut Tape,
    binding: &ParamBinding,
    ws_a: &WindowSet,
    ws_b: &WindowSet,
) -> Result<(TensorId, TensorId)> {
    let k = ws_a.anchors.len();
    if ws_b.anchors.len() != k {
        return Err(CrftError::ShapeMismatch {
            op: "hierarchical_fuse",
            detail: format!("window counts differ: {} vs {}", k, ws_b.anchors.len()),
        });
    }
    let tq = WINDOW * WINDOW;
    let tm = MID_WINDOW * MID_WINDOW;

    let ra = per_image_self_attention(tape, binding, ws_a)?;
    let rb = per_image_self_attention(tape, binding, ws_b)?;

    // cross-modal exchange on the mid-scale windows
    let mask_mb = attention::key_mask_bias(tape, k, tm, tm, &ws_b.mid_valid)?;
    let mask_ma = attention::key_mask_bias(tape, k, tm, tm, &ws_a.mid_valid)?;
    let mid_a = attention::block(tape, binding, "fine.ca_m", ra.mid, rb.mid, mask_mb)?;
    let mid_b = attention::block(tape, binding, "fine.ca_m", rb.mid, ra.mid, mask_ma)?;

    // fuse each image's refined quarter + mid tokens into its half windows
    let fuse = |tape: &mut Tape,
                half: TensorId,
                quarter: TensorId,
                mid: TensorId,
                q_valid: &[bool],
                m_valid: &[bool]|
     -> Result<TensorId> {
        let kv = tape.concat_dim1(&[quarter, mid])?;
        let mut kv_valid = Vec::with_capacity(k * (tq + tm));
        for ki in 0..k {
            kv_valid.extend_from_slice(&q_valid[ki * tq..(ki + 1) * tq]);
            kv_valid.extend_from_slice(&m_valid[ki * tm..(ki + 1) * tm]);
        }
        let mask = attention::key_mask_bias(tape, k, tq, tq + tm, &kv_valid)?;
        attention::block(tape, binding, "fine.ca_fuse", half, kv, mask)
    };
    let fused_a = fuse(
        tape,
        ra.half,
        ra.quarter,
        mid_a,
        &ws_a.quarter_valid,
        &ws_a.mid_valid,
    )?;
    let fused_b = fuse(
        tape,
        rb.half,
        rb.quarter,
        mid_b,
        &ws_b.quarter_valid,
        &ws_b.mid_valid,
    )?;

    let fine_a = attention::tokens_to_windows(tape, fused_a, WINDOW, WINDOW)?;
    let fine_b = attention::tokens_to_windows(tape, fused_b, WINDOW, WINDOW)?;
    Ok((fine_a, fine_b))
}
