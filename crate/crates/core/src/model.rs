//! End-to-end registration model: encoder, coarse flow, fine fusion,
//! iterative refinement, assembled over one tape per forward pass.

use crate::coarse;
use crate::encoder::{self, EncoderConfig, ImageTag};
use crate::error::Result;
use crate::fine;
use crate::params::{ParamBinding, ParamSet};
use crate::refine;
use crate::rng::Rng;
use crate::synth::RegistrationSample;
use crate::tensor::{self, Tape, Tensor, TensorId};
use serde::{Deserialize, Serialize};

/// Architecture sizes. Ablation switches live in [`AblationFlags`] so one
/// parameter set serves every configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// SA/CA repetitions at 1/8 scale
    pub attention_layers: usize,
    /// channel width of the fused fine windows
    pub fine_channels: usize,
    /// refinement iterations N
    pub iterations: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            attention_layers: 2,
            fine_channels: 32,
            iterations: 3,
        }
    }
}

impl ModelConfig {
    /// A small configuration for fast-turnaround training and tests.
    pub fn compact() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                in_channels: 1,
                c2: 16,
                c4: 24,
                c8: 32,
                blocks_per_level: 1,
            },
            attention_layers: 1,
            fine_channels: 16,
            iterations: 3,
        }
    }

    /// Minimal legal sizes, for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                in_channels: 1,
                c2: 8,
                c4: 8,
                c8: 8,
                blocks_per_level: 1,
            },
            attention_layers: 1,
            fine_channels: 8,
            iterations: 2,
        }
    }
}

/// Forward-pass switches mirroring the ablation rows: coarse flow
/// estimation (fe) and iterative refinement (idgo).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub fe: bool,
    pub idgo: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags { fe: true, idgo: true }
    }
}

/// Node handles produced by one forward pass.
pub struct ForwardPass {
    pub binding: ParamBinding,
    /// 1/8-resolution coarse flow; None when coarse estimation is disabled
    pub coarse_flow: Option<TensorId>,
    /// one full-resolution flow per refinement iteration (a single entry
    /// when refinement is disabled)
    pub iteration_flows: Vec<TensorId>,
    /// final 1/2-resolution flow and confidence (refinement path only)
    pub half_flow: Option<TensorId>,
    pub confidence: Option<TensorId>,
}

/// The registration model: a configuration plus every learnable tensor.
#[derive(Debug, Clone)]
pub struct CrftModel {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl CrftModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.encoder.validate()?;
        let mut params = ParamSet::new();
        let mut rng = Rng::new(seed);
        encoder::init_params(&config.encoder, &mut params, &mut rng);
        coarse::init_params(
            &mut params,
            config.encoder.c8,
            config.attention_layers,
            &mut rng,
        );
        fine::init_params(
            &mut params,
            config.encoder.c2,
            config.encoder.c4,
            config.fine_channels,
            &mut rng,
        );
        refine::init_params(&mut params, config.fine_channels, &mut rng);
        Ok(CrftModel { config, params })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.total_elements()
    }

    /// Run the pipeline on an image pair already validated as [1,1,H,W]
    /// with H, W multiples of 8.
    pub fn forward(
        &self,
        tape: &mut Tape,
        image_a: &Tensor,
        image_b: &Tensor,
        flags: AblationFlags,
    ) -> Result<ForwardPass> {
        let binding = self.params.bind(tape);
        let (h, w) = (image_a.shape()[2], image_a.shape()[3]);

        let img_a = tape.leaf(image_a);
        let img_b = tape.leaf(image_b);
        let pyr_a = encoder::extract_pyramid(tape, &binding, &self.config.encoder, img_a, ImageTag::A)?;
        let pyr_b = encoder::extract_pyramid(tape, &binding, &self.config.encoder, img_b, ImageTag::B)?;

        let (hc, wc) = (h / 8, w / 8);
        let (coarse_node, coarse_flow) = if flags.fe {
            let (cf, _vol) = coarse::coarse_stage(
                tape,
                &binding,
                pyr_a.eighth,
                pyr_b.eighth,
                self.config.attention_layers,
            )?;
            (cf, Some(cf))
        } else {
            let zeros = tape.constant(vec![1, 2, hc, wc], vec![0.0; 2 * hc * wc])?;
            (zeros, None)
        };

        if !flags.idgo {
            // upsampled coarse flow is the final prediction
            let up = tape.upsample_bilinear(coarse_node, 8)?;
            let full = tape.scalar_affine(up, 8.0, 0.0)?;
            return Ok(ForwardPass {
                binding,
                coarse_flow,
                iteration_flows: vec![full],
                half_flow: None,
                confidence: None,
            });
        }

        // target windows gather at coarse-shifted anchors so the refinement
        // only carries the sub-cell residual its window support can see
        let shifts: Vec<(i64, i64)> = {
            let cd = tape.data(coarse_node);
            let k = hc * wc;
            (0..k)
                .map(|p| {
                    let dx = (cd[p] * 4.0).round() as i64;
                    let dy = (cd[k + p] * 4.0).round() as i64;
                    (dy, dx)
                })
                .collect()
        };
        let ws_a = fine::gather_windows(tape, &pyr_a, None)?;
        let ws_b = fine::gather_windows(tape, &pyr_b, Some(&shifts))?;
        let (fine_a, fine_b) = fine::hierarchical_fuse(tape, &binding, &ws_a, &ws_b)?;

        // constant image content windows for the confidence net
        let pooled = tensor::avg_pool(image_a, 2)?;
        let centers = fine::scaled_anchors(hc, wc, 4);
        let patches = fine::gather_windows_plain(&pooled, &centers, fine::WINDOW)?;
        let patches = tape.constant(patches.shape().to_vec(), patches.data().to_vec())?;

        let outputs = refine::run_iterations(
            tape,
            &binding,
            coarse_node,
            fine_a,
            fine_b,
            patches,
            Some(&shifts),
            self.config.iterations,
        )?;

        Ok(ForwardPass {
            binding,
            coarse_flow,
            iteration_flows: outputs.full_res_flows,
            half_flow: Some(outputs.half_res_flow),
            confidence: Some(outputs.confidence),
        })
    }

    /// Forward over a sample's image pair.
    pub fn forward_sample(
        &self,
        tape: &mut Tape,
        sample: &RegistrationSample,
        flags: AblationFlags,
    ) -> Result<ForwardPass> {
        self.forward(tape, &sample.image_a, &sample.image_b, flags)
    }
}
