//! Shared-weight convolutional encoder producing a three-level feature
//! pyramid (1/2, 1/4, 1/8 resolution) for both images of a pair.
//!
//! Layout: stem conv (stride 2) -> residual blocks -> strided conv ->
//! residual blocks -> strided conv -> residual blocks. Both images pass
//! through the same parameter set, so swapping the pair swaps the pyramids
//! exactly.

use crate::attention;
use crate::error::{CrftError, Result};
use crate::params::{ParamBinding, ParamSet};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, TensorId};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// channels at 1/2, 1/4, 1/8
    pub c2: usize,
    pub c4: usize,
    pub c8: usize,
    pub blocks_per_level: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 1,
            c2: 32,
            c4: 48,
            c8: 64,
            blocks_per_level: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c2 < 8 || self.c4 < 8 || self.c8 < 8 {
            return Err(CrftError::InvalidArgument(format!(
                "encoder channels must all be >= 8, got {}/{}/{}",
                self.c2, self.c4, self.c8
            )));
        }
        if !(self.c2 <= self.c4 && self.c4 <= self.c8) {
            return Err(CrftError::InvalidArgument(format!(
                "encoder channels must be non-decreasing, got {}/{}/{}",
                self.c2, self.c4, self.c8
            )));
        }
        if self.blocks_per_level < 1 {
            return Err(CrftError::InvalidArgument(
                "encoder needs at least one residual block per level".into(),
            ));
        }
        Ok(())
    }
}

/// Which image of the pair a pyramid came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageTag {
    A,
    B,
}

/// Per-image feature maps at 1/2, 1/4 and 1/8 resolution (tape nodes).
#[derive(Debug, Clone, Copy)]
pub struct PyramidFeatures {
    pub half: TensorId,
    pub quarter: TensorId,
    pub eighth: TensorId,
    pub source: ImageTag,
}

fn conv_init(cout: usize, cin: usize, k: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / ((cin * k * k) as f64).sqrt();
    Tensor::uniform(vec![cout, cin, k, k], bound, rng)
}

fn register_conv(params: &mut ParamSet, name: &str, cout: usize, cin: usize, rng: &mut Rng) {
    params.insert(format!("{name}.w"), conv_init(cout, cin, 3, rng));
    params.insert(format!("{name}.b"), Tensor::zeros(vec![cout]));
}

/// Register all encoder parameters under the `enc.` prefix.
pub fn init_params(cfg: &EncoderConfig, params: &mut ParamSet, rng: &mut Rng) {
    register_conv(params, "enc.stem", cfg.c2, cfg.in_channels, rng);
    for (level, ch) in [(1usize, cfg.c2), (2, cfg.c4), (3, cfg.c8)] {
        for b in 0..cfg.blocks_per_level {
            register_conv(params, &format!("enc.l{level}.rb{b}.c1"), ch, ch, rng);
            register_conv(params, &format!("enc.l{level}.rb{b}.c2"), ch, ch, rng);
        }
    }
    register_conv(params, "enc.down1", cfg.c4, cfg.c2, rng);
    register_conv(params, "enc.down2", cfg.c8, cfg.c4, rng);
}

fn conv_relu(
    tape: &mut Tape,
    binding: &ParamBinding,
    name: &str,
    x: TensorId,
    stride: usize,
) -> Result<TensorId> {
    let c = tape.conv2d(x, binding.id(&format!("{name}.w")), stride, 1)?;
    let c = tape.bias_add_channel(c, binding.id(&format!("{name}.b")))?;
    tape.relu(c)
}

fn residual_block(
    tape: &mut Tape,
    binding: &ParamBinding,
    name: &str,
    x: TensorId,
) -> Result<TensorId> {
    let h = conv_relu(tape, binding, &format!("{name}.c1"), x, 1)?;
    let h = tape.conv2d(h, binding.id(&format!("{name}.c2.w")), 1, 1)?;
    let h = tape.bias_add_channel(h, binding.id(&format!("{name}.c2.b")))?;
    let s = tape.add(x, h)?;
    tape.relu(s)
}

/// Per-position channel normalization of a level's output: descriptor
/// energy is standardized so correlations compare structure, not texture
/// contrast. Zero maps stay zero.
fn normalize_level(tape: &mut Tape, map: TensorId) -> Result<TensorId> {
    let s = tape.shape(map).to_vec();
    let (h, w) = (s[2], s[3]);
    let tokens = attention::map_to_tokens(tape, map)?;
    let normed = tape.layer_norm(tokens, 1e-5)?;
    attention::tokens_to_map(tape, normed, h, w)
}

/// Run the encoder on a [1,in_channels,H,W] image already on the tape.
/// H and W must be multiples of 8.
pub fn extract_pyramid(
    tape: &mut Tape,
    binding: &ParamBinding,
    cfg: &EncoderConfig,
    image: TensorId,
    source: ImageTag,
) -> Result<PyramidFeatures> {
    let shape = tape.shape(image).to_vec();
    if shape.len() != 4 || shape[1] != cfg.in_channels {
        return Err(CrftError::ShapeMismatch {
            op: "extract_pyramid",
            detail: format!(
                "expected [1,{},H,W], got {:?}",
                cfg.in_channels, shape
            ),
        });
    }
    let (h, w) = (shape[2], shape[3]);
    if h % 8 != 0 || w % 8 != 0 {
        return Err(CrftError::InvalidArgument(format!(
            "extract_pyramid: image dims {}x{} must be multiples of 8; pad the input first",
            h, w
        )));
    }

    let mut x = conv_relu(tape, binding, "enc.stem", image, 2)?;
    for b in 0..cfg.blocks_per_level {
        x = residual_block(tape, binding, &format!("enc.l1.rb{b}"), x)?;
    }
    let half_pre = x;
    let half = normalize_level(tape, half_pre)?;

    let mut x = conv_relu(tape, binding, "enc.down1", half_pre, 2)?;
    for b in 0..cfg.blocks_per_level {
        x = residual_block(tape, binding, &format!("enc.l2.rb{b}"), x)?;
    }
    let quarter_pre = x;
    let quarter = normalize_level(tape, quarter_pre)?;

    let mut x = conv_relu(tape, binding, "enc.down2", quarter_pre, 2)?;
    for b in 0..cfg.blocks_per_level {
        x = residual_block(tape, binding, &format!("enc.l3.rb{b}"), x)?;
    }
    let eighth = normalize_level(tape, x)?;

    Ok(PyramidFeatures {
        half,
        quarter,
        eighth,
        source,
    })
}
