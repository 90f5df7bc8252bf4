//! Single-head attention blocks over token sequences.
//!
//! One block = pre-norm attention with a residual connection, then a
//! pre-norm GELU feed-forward with a residual connection. All projections
//! are square in the shared channel width, so a block with zero value /
//! output / feed-forward weights is exactly the identity on its input.
//!
//! Blocks operate on batched token tensors [B, T, C]; self-attention passes
//! the same tokens as queries and keys, cross-attention passes the other
//! image's tokens as keys/values.

use crate::error::Result;
use crate::params::{ParamBinding, ParamSet};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, TensorId};

const LN_EPS: f64 = 1e-5;

/// Bias added to attention logits of masked keys. Large enough to zero the
/// weight after softmax, small enough to stay comfortably finite.
pub const MASK_BIAS: f64 = -1e30;

fn linear_init(cout: usize, cin: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (cin as f64).sqrt();
    Tensor::uniform(vec![cout, cin], bound, rng)
}

/// Register one attention block's parameters (q/k/v/o projections and the
/// two feed-forward layers, all `ch`×`ch`).
pub fn init_block(params: &mut ParamSet, prefix: &str, ch: usize, rng: &mut Rng) {
    for name in ["q", "k", "v", "o", "f1", "f2"] {
        params.insert(format!("{prefix}.{name}.w"), linear_init(ch, ch, rng));
        params.insert(format!("{prefix}.{name}.b"), Tensor::zeros(vec![ch]));
    }
}

fn proj(
    tape: &mut Tape,
    binding: &ParamBinding,
    prefix: &str,
    name: &str,
    x: TensorId,
) -> Result<TensorId> {
    tape.linear(
        x,
        binding.id(&format!("{prefix}.{name}.w")),
        binding.id(&format!("{prefix}.{name}.b")),
    )
}

/// One attention block on batched tokens.
///
/// `queries`: [B, Tq, C]; `keys_values`: [B, Tk, C]. `key_mask_bias`, when
/// present, is a constant [B, Tq, Tk] tensor of 0 / MASK_BIAS entries added
/// to the logits so masked keys receive zero attention weight.
pub fn block(
    tape: &mut Tape,
    binding: &ParamBinding,
    prefix: &str,
    queries: TensorId,
    keys_values: TensorId,
    key_mask_bias: Option<TensorId>,
) -> Result<TensorId> {
    let ch = *tape.shape(queries).last().unwrap();
    let qn = tape.layer_norm(queries, LN_EPS)?;
    let kn = if keys_values == queries {
        qn
    } else {
        tape.layer_norm(keys_values, LN_EPS)?
    };
    let q = proj(tape, binding, prefix, "q", qn)?;
    let k = proj(tape, binding, prefix, "k", kn)?;
    let v = proj(tape, binding, prefix, "v", kn)?;
    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scalar_affine(scores, 1.0 / (ch as f64).sqrt(), 0.0)?;
    let scores = match key_mask_bias {
        Some(m) => tape.add(scores, m)?,
        None => scores,
    };
    let attn = tape.softmax_lastdim(scores)?;
    let ctx = tape.batch_matmul(attn, v, false)?;
    let out = proj(tape, binding, prefix, "o", ctx)?;
    let x = tape.add(queries, out)?;

    let fnorm = tape.layer_norm(x, LN_EPS)?;
    let h = proj(tape, binding, prefix, "f1", fnorm)?;
    let h = tape.gelu(h)?;
    let h = proj(tape, binding, prefix, "f2", h)?;
    tape.add(x, h)
}

/// Build the constant logit-bias tensor for key masking: entry (b, tq, tk)
/// is MASK_BIAS where `key_valid[b·Tk + tk]` is false, else 0.
pub fn key_mask_bias(
    tape: &mut Tape,
    batch: usize,
    tq: usize,
    tk: usize,
    key_valid: &[bool],
) -> Result<Option<TensorId>> {
    debug_assert_eq!(key_valid.len(), batch * tk);
    if key_valid.iter().all(|&v| v) {
        return Ok(None);
    }
    let mut data = vec![0.0; batch * tq * tk];
    for b in 0..batch {
        for t in 0..tk {
            if !key_valid[b * tk + t] {
                for q in 0..tq {
                    data[(b * tq + q) * tk + t] = MASK_BIAS;
                }
            }
        }
    }
    Ok(Some(tape.constant(vec![batch, tq, tk], data)?))
}

/// Reshape a feature map [1,C,H,W] to tokens [1, H·W, C].
pub fn map_to_tokens(tape: &mut Tape, map: TensorId) -> Result<TensorId> {
    let s = tape.shape(map).to_vec();
    let (c, h, w) = (s[1], s[2], s[3]);
    let flat = tape.reshape(map, vec![1, c, h * w])?;
    tape.batch_transpose(flat)
}

/// Inverse of [`map_to_tokens`].
pub fn tokens_to_map(tape: &mut Tape, tokens: TensorId, h: usize, w: usize) -> Result<TensorId> {
    let s = tape.shape(tokens).to_vec();
    let c = s[2];
    let t = tape.batch_transpose(tokens)?;
    tape.reshape(t, vec![1, c, h, w])
}

/// Reshape windows [K,C,h,w] to per-window tokens [K, h·w, C].
pub fn windows_to_tokens(tape: &mut Tape, windows: TensorId) -> Result<TensorId> {
    let s = tape.shape(windows).to_vec();
    let (k, c, h, w) = (s[0], s[1], s[2], s[3]);
    let flat = tape.reshape(windows, vec![k, c, h * w])?;
    tape.batch_transpose(flat)
}

/// Inverse of [`windows_to_tokens`].
pub fn tokens_to_windows(
    tape: &mut Tape,
    tokens: TensorId,
    h: usize,
    w: usize,
) -> Result<TensorId> {
    let s = tape.shape(tokens).to_vec();
    let (k, c) = (s[0], s[2]);
    let t = tape.batch_transpose(tokens)?;
    tape.reshape(t, vec![k, c, h, w])
}
