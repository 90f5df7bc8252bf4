//! Interactive browser demo.
//!
//! One session owns a synthetic cross-modal pair and a small model. The
//! page can regenerate the pair (seed / preset / difficulty), run training
//! steps on it live, and inspect the predicted flow and the checkerboard
//! fusion against the ground truth.

use crft_core::metrics;
use crft_core::model::ModelConfig;
use crft_core::synth::{self, Preset, RegistrationSample};
use crft_core::tensor::Tape;
use crft_core::trainer::{TrainConfig, Trainer};
use wasm_bindgen::prelude::*;

fn grayscale_rgba(data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for &v in data {
        let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        out.extend_from_slice(&[g, g, g, 255]);
    }
    out
}

/// Optical-flow color wheel: hue from direction, saturation from magnitude.
fn flow_rgba(dx: &[f64], dy: &[f64], max_mag: f64) -> Vec<u8> {
    let mut out = Vec::with_capacity(dx.len() * 4);
    for (&u, &v) in dx.iter().zip(dy) {
        let mag = (u * u + v * v).sqrt();
        let sat = (mag / max_mag).clamp(0.0, 1.0);
        let hue = v.atan2(u); // -pi..pi
        let h6 = (hue / std::f64::consts::PI + 1.0) * 3.0; // 0..6
        let sector = (h6.floor() as i64).rem_euclid(6);
        let f = h6 - h6.floor();
        let (r, g, b) = match sector {
            0 => (1.0, f, 0.0),
            1 => (1.0 - f, 1.0, 0.0),
            2 => (0.0, 1.0, f),
            3 => (0.0, 1.0 - f, 1.0),
            4 => (f, 0.0, 1.0),
            _ => (1.0, 0.0, 1.0 - f),
        };
        // blend toward white at zero motion
        let mix = |c: f64| ((1.0 - sat) + sat * c).clamp(0.0, 1.0);
        out.extend_from_slice(&[
            (mix(r) * 255.0) as u8,
            (mix(g) * 255.0) as u8,
            (mix(b) * 255.0) as u8,
            255,
        ]);
    }
    out
}

#[wasm_bindgen]
pub struct DemoSession {
    sample: RegistrationSample,
    trainer: Trainer,
    losses: Vec<f64>,
}

#[wasm_bindgen]
impl DemoSession {
    /// Build a session: a seeded synthetic pair plus a fresh small model.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: u32, preset: &str) -> Result<DemoSession, JsValue> {
        let preset: Preset = preset.parse().map_err(err_to_js)?;
        let sample =
            synth::generate_pair(seed as u64, size as usize, preset).map_err(err_to_js)?;
        let config = TrainConfig {
            model: ModelConfig::tiny(),
            learning_rate: 2e-3,
            batch_size: 1,
            lanes: 1,
            seed: seed as u64,
            ..TrainConfig::default()
        };
        let trainer = Trainer::new(config).map_err(err_to_js)?;
        Ok(DemoSession {
            sample,
            trainer,
            losses: Vec::new(),
        })
    }

    pub fn width(&self) -> u32 {
        self.sample.width() as u32
    }

    pub fn height(&self) -> u32 {
        self.sample.height() as u32
    }

    /// RGBA pixels of the source image.
    pub fn image_a(&self) -> Vec<u8> {
        grayscale_rgba(self.sample.image_a.data())
    }

    /// RGBA pixels of the warped, intensity-remapped target image.
    pub fn image_b(&self) -> Vec<u8> {
        grayscale_rgba(self.sample.image_b.data())
    }

    /// Ground-truth flow as a color-wheel image.
    pub fn gt_flow(&self) -> Vec<u8> {
        let n = self.sample.width() * self.sample.height();
        let d = self.sample.gt_flow.tensor().data();
        flow_rgba(&d[..n], &d[n..], self.flow_scale())
    }

    /// JSON description of the generating transform.
    pub fn info(&self) -> String {
        serde_json::json!({
            "seed": self.sample.seed,
            "preset": self.sample.preset.to_string(),
            "scale": self.sample.affine.scale,
            "rotation_deg": self.sample.affine.rotation_deg,
            "translate": [self.sample.affine.translate.0, self.sample.affine.translate.1],
            "gamma": self.sample.modality.gamma,
            "steps_trained": self.losses.len(),
            "parameters": self.trainer.model.parameter_count(),
        })
        .to_string()
    }

    /// Run `steps` optimizer steps on this pair; returns the losses.
    pub fn train(&mut self, steps: u32) -> Result<Vec<f64>, JsValue> {
        let mut out = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let report = self
                .trainer
                .train_step(&[&self.sample])
                .map_err(err_to_js)?;
            out.push(report.total);
            self.losses.push(report.total);
        }
        Ok(out)
    }

    /// Predicted flow as a color-wheel image.
    pub fn predicted_flow(&self) -> Result<Vec<u8>, JsValue> {
        let pred = self
            .trainer
            .predict(&self.sample.image_a, &self.sample.image_b)
            .map_err(err_to_js)?;
        let n = self.sample.width() * self.sample.height();
        let d = pred.flow.tensor().data();
        Ok(flow_rgba(&d[..n], &d[n..], self.flow_scale()))
    }

    /// Mean end-point error of the current prediction on valid pixels.
    pub fn aepe(&self) -> Result<f64, JsValue> {
        let pred = self
            .trainer
            .predict(&self.sample.image_a, &self.sample.image_b)
            .map_err(err_to_js)?;
        metrics::aepe(&pred.flow, &self.sample.gt_flow, &self.sample.valid_bools())
            .map_err(err_to_js)
    }

    /// Checkerboard fusion of image A with image B warped into A's frame.
    /// `use_gt` selects the ground-truth flow instead of the prediction;
    /// `raw` skips warping entirely (shows the initial misalignment).
    pub fn checkerboard(&self, tile: u32, use_gt: bool, raw: bool) -> Result<Vec<u8>, JsValue> {
        let warped = if raw {
            self.sample.image_b.clone()
        } else {
            let flow = if use_gt {
                self.sample.gt_flow.clone()
            } else {
                self.trainer
                    .predict(&self.sample.image_a, &self.sample.image_b)
                    .map_err(err_to_js)?
                    .flow
            };
            let mut tape = Tape::new();
            let img = tape.leaf(&self.sample.image_b);
            let fl = tape.leaf(flow.tensor());
            let (w, _) = tape.bilinear_warp(img, fl).map_err(err_to_js)?;
            tape.tensor(w)
        };
        let fused = metrics::checkerboard_fuse(&self.sample.image_a, &warped, tile as usize)
            .map_err(err_to_js)?;
        Ok(grayscale_rgba(fused.data()))
    }

    /// Confidence of the final refinement iteration, upsampled as grayscale.
    pub fn confidence(&self) -> Result<Vec<u8>, JsValue> {
        let pred = self
            .trainer
            .predict(&self.sample.image_a, &self.sample.image_b)
            .map_err(err_to_js)?;
        match pred.confidence {
            Some(conf) => {
                // nearest-neighbor upsample of the 1/2 lattice for display
                let s = conf.shape().to_vec();
                let (h, w) = (s[2], s[3]);
                let mut full = vec![0.0; 4 * h * w];
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        full[y * 2 * w + x] = conf.data()[(y / 2) * w + x / 2];
                    }
                }
                Ok(grayscale_rgba(&full))
            }
            None => Err(JsValue::from_str("no confidence available")),
        }
    }

    fn flow_scale(&self) -> f64 {
        let d = self.sample.gt_flow.tensor().data();
        d.iter().fold(1.0f64, |m, v| m.max(v.abs())) * 1.2
    }
}

/// Flow field for arbitrary affine parameters, for the explorer view.
#[wasm_bindgen]
pub fn affine_flow_rgba(
    size: u32,
    scale: f64,
    rotation_deg: f64,
    tx: f64,
    ty: f64,
) -> Result<Vec<u8>, JsValue> {
    let params = synth::AffineParams {
        scale,
        rotation_deg,
        translate: (tx, ty),
    };
    if scale <= 0.0 {
        return Err(JsValue::from_str("scale must be positive"));
    }
    let flow = synth::affine_to_flow(&params, size as usize, size as usize);
    let n = (size * size) as usize;
    let d = flow.tensor().data();
    let max = d.iter().fold(1.0f64, |m, v| m.max(v.abs())) * 1.2;
    Ok(flow_rgba(&d[..n], &d[n..], max))
}

/// Valid-pixel mask for the same affine parameters, as RGBA.
#[wasm_bindgen]
pub fn affine_mask_rgba(
    size: u32,
    scale: f64,
    rotation_deg: f64,
    tx: f64,
    ty: f64,
) -> Result<Vec<u8>, JsValue> {
    let params = synth::AffineParams {
        scale,
        rotation_deg,
        translate: (tx, ty),
    };
    if scale <= 0.0 {
        return Err(JsValue::from_str("scale must be positive"));
    }
    let mask = synth::validity_mask(&params, size as usize, size as usize);
    Ok(grayscale_rgba(mask.data()))
}

fn err_to_js(e: crft_core::CrftError) -> JsValue {
    JsValue::from_str(&e.to_string())
}
