//! Training loop: decoupled-weight-decay adaptive-moment updates over the
//! full pipeline, with deterministic seeding, JSON-lines logging,
//! checkpointing, and held-out evaluation.
//!
//! Determinism contract: a (seed, config, dataset) triple produces a
//! bit-identical loss trajectory. Sample order is a seeded permutation per
//! epoch, gradients accumulate in sample-index order, and checkpoints
//! quantize the live state to f32 as they are written, so a resumed run
//! continues the uninterrupted trajectory exactly.

use crate::error::{CrftError, Result};
use crate::flow::{FlowField, Resolution};
use crate::io;
use crate::loss::{self, LossReport};
use crate::metrics::{self, EvalReport};
use crate::model::{AblationFlags, CrftModel, ModelConfig};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::synth::{self, RegistrationSample};
use crate::tensor::{Tape, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dataset_dir: PathBuf,
    pub eval_dir: Option<PathBuf>,
    pub checkpoint_dir: PathBuf,
    pub epochs: usize,
    /// optional hard cap on optimizer steps
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// decay of the iterative loss weights
    pub gamma: f64,
    pub lambda_coarse: f64,
    pub lambda_fine: f64,
    pub model: ModelConfig,
    /// coarse flow estimation (off: refinement starts from zero flow and
    /// coarse supervision is skipped)
    pub enable_fe: bool,
    /// iterative refinement (off: the upsampled coarse flow is the output)
    pub enable_idgo: bool,
    /// iterative loss (off: only the final iteration is supervised)
    pub enable_il: bool,
    pub seed: u64,
    pub checkpoint_every: Option<usize>,
    pub eval_every: Option<usize>,
    /// worker lanes for per-sample forward/backward; accumulation order is
    /// fixed by sample index regardless
    pub lanes: usize,
    /// per-step seeded photometric jitter (gamma, gain, offset, noise) on
    /// both images; geometry and supervision are untouched. Stand-in for
    /// appearance variety the fixed sample set cannot provide.
    pub photometric_jitter: bool,
    /// per-step seeded pair swapping: present (B, A) with the exact
    /// inverse-affine ground truth. Doubles the geometric diversity of a
    /// fixed sample set and forces matching to work in both directions.
    pub augment_swap: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset_dir: PathBuf::from("data/train"),
            eval_dir: None,
            checkpoint_dir: PathBuf::from("runs/default"),
            epochs: 8,
            max_steps: None,
            batch_size: 4,
            learning_rate: 3e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            gamma: 0.9,
            lambda_coarse: 0.5,
            lambda_fine: 1.0,
            model: ModelConfig::default(),
            enable_fe: true,
            enable_idgo: true,
            enable_il: true,
            seed: 0,
            checkpoint_every: None,
            eval_every: None,
            lanes: 1,
            photometric_jitter: true,
            augment_swap: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(CrftError::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.model.iterations < 1 {
            return Err(CrftError::InvalidArgument("iterations must be >= 1".into()));
        }
        if self.learning_rate < 0.0 {
            return Err(CrftError::InvalidArgument(
                "learning_rate must be >= 0".into(),
            ));
        }
        self.model.encoder.validate()
    }

    pub fn flags(&self) -> AblationFlags {
        AblationFlags {
            fe: self.enable_fe,
            idgo: self.enable_idgo,
        }
    }
}

/// Worker lane count from the CRFT_THREADS environment variable (>= 1).
pub fn lanes_from_env() -> usize {
    std::env::var("CRFT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .map(|v| v.max(1))
        .unwrap_or(1)
}

#[derive(Debug, Clone, Default)]
struct AdamMoments {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: usize,
}

/// Steppable training session (the file-driven [`train`] loop and the
/// interactive demo both drive this).
pub struct Trainer {
    pub model: CrftModel,
    pub config: TrainConfig,
    moments: AdamMoments,
    pub step: usize,
}

/// One JSON-lines record of the training log.
#[derive(Debug, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: f64,
    pub checkpoint_dir: PathBuf,
    pub log_path: PathBuf,
}

/// Gradients and scalar diagnostics from one sample's forward/backward.
struct SampleResult {
    grads: BTreeMap<String, Vec<f64>>,
    report: LossReport,
}

/// Seeded photometric jitter: monotone gamma, gain/offset, light noise.
/// Geometry is untouched, so the flow supervision stays exact.
fn jitter_image(image: &Tensor, rng: &mut Rng) -> Tensor {
    let gamma = rng.uniform(0.7, 1.4);
    let gain = rng.uniform(0.9, 1.1);
    let offset = rng.uniform(-0.05, 0.05);
    let data = image
        .data()
        .iter()
        .map(|v| {
            let jittered = gain * v.max(0.0).powf(gamma) + offset
                + 0.005 * (2.0 * rng.next_f64() - 1.0);
            jittered.clamp(0.0, 1.0)
        })
        .collect();
    Tensor::new(image.shape().to_vec(), data).expect("jitter preserves shape")
}

/// One training view of a sample: possibly swapped, possibly jittered.
struct PreparedInput {
    image_a: Tensor,
    image_b: Tensor,
    gt_flow: FlowField,
    valid_mask: Tensor,
}

fn sample_pass(
    model: &CrftModel,
    config: &TrainConfig,
    input: &PreparedInput,
) -> Result<SampleResult> {
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, &input.image_a, &input.image_b, config.flags())?;

    let coarse_node = match pass.coarse_flow {
        Some(cf) => {
            let target = loss::downsample_ground_truth(&input.gt_flow, &input.valid_mask)?;
            Some(loss::coarse_loss(&mut tape, cf, &target)?)
        }
        None => None,
    };

    let supervised: Vec<_> = if config.enable_il {
        pass.iteration_flows.clone()
    } else {
        vec![*pass.iteration_flows.last().unwrap()]
    };
    let valid: Vec<bool> = input.valid_mask.data().iter().map(|v| *v > 0.5).collect();
    let (fine_node, per_iter_nodes) =
        loss::iterative_loss(&mut tape, &supervised, &input.gt_flow, &valid, config.gamma)?;
    let total_node = loss::total_loss(
        &mut tape,
        coarse_node,
        fine_node,
        config.lambda_coarse,
        config.lambda_fine,
    )?;

    let report = LossReport {
        coarse: coarse_node.map(|c| tape.data(c)[0]).unwrap_or(0.0),
        per_iteration: per_iter_nodes.iter().map(|&n| tape.data(n)[0]).collect(),
        fine: tape.data(fine_node)[0],
        total: tape.data(total_node)[0],
        valid_coarse: pass
            .coarse_flow
            .map(|_| {
                loss::downsample_ground_truth(&input.gt_flow, &input.valid_mask)
                    .map(|t| t.valid_count)
                    .unwrap_or(0)
            })
            .unwrap_or(0),
        valid: valid.iter().filter(|m| **m).count(),
    };

    tape.backward(total_node)?;
    let mut grads = BTreeMap::new();
    for (name, tensor) in model.params.iter() {
        let id = pass.binding.id(name);
        let g = match tape.grad(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tensor.numel()],
        };
        grads.insert(name.clone(), g);
    }
    Ok(SampleResult { grads, report })
}

/// Run per-sample passes on up to `lanes` worker threads, collecting
/// results in sample order. Inputs (possibly jittered) are prepared by the
/// caller so results do not depend on the lane count.
fn batch_passes(
    model: &CrftModel,
    config: &TrainConfig,
    batch: &[PreparedInput],
) -> Result<Vec<SampleResult>> {
    let lanes = config.lanes.max(1).min(batch.len());
    if lanes <= 1 {
        return batch.iter().map(|input| sample_pass(model, config, input)).collect();
    }
    let mut slots: Vec<Option<Result<SampleResult>>> = Vec::new();
    slots.resize_with(batch.len(), || None);
    std::thread::scope(|scope| {
        let slot_chunks: Vec<_> = slots.chunks_mut(batch.len().div_ceil(lanes)).collect();
        let sample_chunks: Vec<_> = batch.chunks(batch.len().div_ceil(lanes)).collect();
        for (slot_chunk, sample_chunk) in slot_chunks.into_iter().zip(sample_chunks) {
            scope.spawn(move || {
                for (slot, input) in slot_chunk.iter_mut().zip(sample_chunk) {
                    *slot = Some(sample_pass(model, config, input));
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("worker filled every slot"))
        .collect()
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = CrftModel::new(config.model.clone(), config.seed)?;
        Ok(Trainer {
            model,
            config,
            moments: AdamMoments::default(),
            step: 0,
        })
    }

    /// One optimizer step over a batch: mean of per-sample gradients
    /// (accumulated in index order), then the decoupled-weight-decay
    /// adaptive-moment update.
    pub fn train_step(&mut self, batch: &[&RegistrationSample]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(CrftError::InvalidArgument("empty batch".into()));
        }
        // inputs prepared sequentially so the augmentation stream is
        // independent of the lane count
        let aug_base = Rng::new(self.config.seed ^ 0x0b07_0a11).fork(self.step as u64);
        let prepared: Vec<PreparedInput> = batch
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut rng = aug_base.fork(i as u64);
                let swap = self.config.augment_swap && rng.next_u64() % 2 == 1;
                let (mut img_a, mut img_b, gt_flow, valid_mask) = if swap {
                    let inv = s.affine.inverse_params();
                    let (h, w) = (s.height(), s.width());
                    (
                        s.image_b.clone(),
                        s.image_a.clone(),
                        synth::affine_to_flow(&inv, h, w),
                        synth::validity_mask(&inv, h, w),
                    )
                } else {
                    (
                        s.image_a.clone(),
                        s.image_b.clone(),
                        s.gt_flow.clone(),
                        s.valid_mask.clone(),
                    )
                };
                if self.config.photometric_jitter {
                    img_a = jitter_image(&img_a, &mut rng);
                    img_b = jitter_image(&img_b, &mut rng);
                }
                PreparedInput {
                    image_a: img_a,
                    image_b: img_b,
                    gt_flow,
                    valid_mask,
                }
            })
            .collect();
        let results = batch_passes(&self.model, &self.config, &prepared)?;

        let inv_b = 1.0 / batch.len() as f64;
        let mut mean_grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for result in &results {
            for (name, g) in &result.grads {
                match mean_grads.get_mut(name) {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                    None => {
                        mean_grads.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        for g in mean_grads.values_mut() {
            for v in g.iter_mut() {
                *v *= inv_b;
            }
        }

        self.apply_update(&mean_grads)?;
        self.step += 1;

        // average the diagnostics over the batch
        let n_iters = results[0].report.per_iteration.len();
        let mut report = LossReport {
            coarse: 0.0,
            per_iteration: vec![0.0; n_iters],
            fine: 0.0,
            total: 0.0,
            valid_coarse: 0,
            valid: 0,
        };
        for r in &results {
            report.coarse += r.report.coarse * inv_b;
            report.fine += r.report.fine * inv_b;
            report.total += r.report.total * inv_b;
            for (acc, v) in report.per_iteration.iter_mut().zip(&r.report.per_iteration) {
                *acc += v * inv_b;
            }
            report.valid_coarse += r.report.valid_coarse;
            report.valid += r.report.valid;
        }
        if !report.total.is_finite() {
            return Err(CrftError::NonFinite { op: "train_step" });
        }
        Ok(report)
    }

    fn apply_update(&mut self, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        let cfg = &self.config;
        self.moments.t += 1;
        let t = self.moments.t as i32;
        let bias1 = 1.0 - cfg.beta1.powi(t);
        let bias2 = 1.0 - cfg.beta2.powi(t);
        for (name, tensor) in self.model.params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| CrftError::Autodiff(format!("missing gradient for {name}")))?;
            let m = self
                .moments
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .moments
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let data = tensor.data_mut();
            for i in 0..g.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                data[i] -= cfg.learning_rate
                    * (m_hat / (v_hat.sqrt() + cfg.epsilon) + cfg.weight_decay * data[i]);
            }
        }
        Ok(())
    }

    /// Registration for one image pair with the current weights.
    pub fn predict(&self, image_a: &Tensor, image_b: &Tensor) -> Result<Prediction> {
        predict_with(&self.model, image_a, image_b, self.config.flags())
    }

    // ---- persistence -------------------------------------------------------

    /// Write a checkpoint. The live state is quantized to f32 as part of the
    /// write, so the continuation of this run and a resume from disk follow
    /// the same trajectory.
    pub fn save_checkpoint(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CrftError::io(dir.display().to_string(), e))?;
        let quantize = |data: &mut [f64]| {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        };
        let mut names = Vec::new();
        for (name, tensor) in self.model.params.iter_mut() {
            quantize(tensor.data_mut());
            names.push(name.clone());
        }
        for store in [&mut self.moments.m, &mut self.moments.v] {
            for data in store.values_mut() {
                quantize(data);
            }
        }
        for name in &names {
            let tensor = self.model.params.get(name);
            io::write_crt1(&dir.join(format!("{name}.crt1")), tensor)?;
            let shape = tensor.shape().to_vec();
            let zero = vec![0.0; tensor.numel()];
            let m = self.moments.m.get(name).cloned().unwrap_or_else(|| zero.clone());
            let v = self.moments.v.get(name).cloned().unwrap_or(zero);
            io::write_crt1(&dir.join(format!("{name}.m.crt1")), &Tensor::new(shape.clone(), m)?)?;
            io::write_crt1(&dir.join(format!("{name}.v.crt1")), &Tensor::new(shape, v)?)?;
        }
        let files = names
            .iter()
            .map(|n| (n.clone(), format!("{n}.crt1")))
            .collect();
        io::write_json(
            &dir.join("manifest.json"),
            &CheckpointManifest {
                step: self.step,
                adam_t: self.moments.t,
                config: self.config.clone(),
                params: names,
                files,
            },
        )?;
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Trainer> {
        let manifest: CheckpointManifest = io::read_json(&dir.join("manifest.json"))?;
        let mut trainer = Trainer::new(manifest.config.clone())?;
        let mut params = ParamSet::new();
        let mut moments = AdamMoments {
            t: manifest.adam_t,
            ..AdamMoments::default()
        };
        for name in &manifest.params {
            let file = manifest
                .files
                .get(name)
                .cloned()
                .unwrap_or_else(|| format!("{name}.crt1"));
            let tensor = io::read_crt1(&dir.join(&file))?;
            params.insert(name.clone(), tensor);
            let m = io::read_crt1(&dir.join(format!("{name}.m.crt1")))?;
            let v = io::read_crt1(&dir.join(format!("{name}.v.crt1")))?;
            moments.m.insert(name.clone(), m.into_parts().1);
            moments.v.insert(name.clone(), v.into_parts().1);
        }
        if params.len() != trainer.model.params.len() {
            return Err(CrftError::format(
                dir.display().to_string(),
                format!(
                    "checkpoint has {} parameters, model expects {}",
                    params.len(),
                    trainer.model.params.len()
                ),
            ));
        }
        trainer.model.params = params;
        trainer.moments = moments;
        trainer.step = manifest.step;
        Ok(trainer)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    step: usize,
    adam_t: usize,
    config: TrainConfig,
    params: Vec<String>,
    /// parameter name -> tensor file, for readers that do not want to
    /// derive the naming scheme
    files: std::collections::BTreeMap<String, String>,
}

/// Inference output for one pair.
pub struct Prediction {
    pub flow: FlowField,
    /// final 1/2-lattice confidence (refinement path only)
    pub confidence: Option<Tensor>,
    pub coarse: Option<FlowField>,
}

pub fn predict_with(
    model: &CrftModel,
    image_a: &Tensor,
    image_b: &Tensor,
    flags: AblationFlags,
) -> Result<Prediction> {
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, image_a, image_b, flags)?;
    let final_flow = *pass.iteration_flows.last().unwrap();
    let flow = FlowField::new(tape.tensor(final_flow), Resolution::Full)?;
    let confidence = pass.confidence.map(|c| tape.tensor(c));
    let coarse = match pass.coarse_flow {
        Some(c) => Some(FlowField::new(tape.tensor(c), Resolution::Eighth)?),
        None => None,
    };
    Ok(Prediction {
        flow,
        confidence,
        coarse,
    })
}

// ---- full loop ----------------------------------------------------------------

/// File-driven training: loads the dataset, runs the step loop with
/// deterministic epoch shuffling, writes the JSON-lines log and checkpoints.
pub fn train(config: TrainConfig) -> Result<TrainSummary> {
    config.validate()?;
    let samples = synth::read_dataset(&config.dataset_dir)?;
    if samples.is_empty() {
        return Err(CrftError::InvalidArgument(format!(
            "dataset {} is empty",
            config.dataset_dir.display()
        )));
    }
    let eval_samples = match &config.eval_dir {
        Some(dir) => Some(synth::read_dataset(dir)?),
        None => None,
    };

    std::fs::create_dir_all(&config.checkpoint_dir)
        .map_err(|e| CrftError::io(config.checkpoint_dir.display().to_string(), e))?;
    let log_path = config.checkpoint_dir.join("train_log.jsonl");
    let mut log = std::io::BufWriter::new(
        std::fs::File::create(&log_path)
            .map_err(|e| CrftError::io(log_path.display().to_string(), e))?,
    );
    io::write_json(&config.checkpoint_dir.join("config.json"), &config)?;

    let steps_per_epoch = samples.len().div_ceil(config.batch_size);
    let planned = config
        .max_steps
        .unwrap_or(usize::MAX)
        .min(config.epochs.saturating_mul(steps_per_epoch));

    let mut trainer = Trainer::new(config.clone())?;
    // keep the shuffle stream independent of the init stream from the same seed
    let order_rng = Rng::new(config.seed ^ 0x05ee_d0de);
    let mut final_loss = f64::NAN;

    'outer: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        // Fisher-Yates with a per-epoch stream
        let mut rng = order_rng.fork(epoch as u64);
        for i in (1..order.len()).rev() {
            let j = rng.below(i + 1);
            order.swap(i, j);
        }
        for chunk in order.chunks(config.batch_size) {
            if trainer.step >= planned {
                break 'outer;
            }
            let batch: Vec<&RegistrationSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let report = trainer.train_step(&batch).map_err(|e| match e {
                CrftError::NonFinite { .. } => CrftError::Autodiff(format!(
                    "non-finite loss at step {}; aborting",
                    trainer.step
                )),
                other => other,
            })?;
            final_loss = report.total;
            let line = serde_json::to_string(&StepLog {
                step: trainer.step,
                loss: report,
            })?;
            writeln!(log, "{line}").map_err(|e| CrftError::io(log_path.display().to_string(), e))?;

            if let Some(every) = config.checkpoint_every {
                if trainer.step % every == 0 {
                    let dir = config.checkpoint_dir.join(format!("step{:06}", trainer.step));
                    trainer.save_checkpoint(&dir)?;
                }
            }
            if let (Some(every), Some(eval)) = (config.eval_every, eval_samples.as_ref()) {
                if trainer.step % every == 0 {
                    let outcome = evaluate(
                        &trainer.model,
                        eval,
                        config.flags(),
                        &metrics::default_thresholds(),
                        config.lanes,
                    )?;
                    let line = format!(
                        "{{\"step\":{},\"eval_mean_aepe\":{}}}",
                        trainer.step, outcome.report.mean_aepe
                    );
                    writeln!(log, "{line}")
                        .map_err(|e| CrftError::io(log_path.display().to_string(), e))?;
                }
            }
        }
    }
    log.flush()
        .map_err(|e| CrftError::io(log_path.display().to_string(), e))?;

    let final_dir = config.checkpoint_dir.join("final");
    trainer.save_checkpoint(&final_dir)?;

    Ok(TrainSummary {
        steps: trainer.step,
        final_loss,
        checkpoint_dir: final_dir,
        log_path,
    })
}

/// Evaluation over a sample set: AEPE per sample on the final flow, the CMR
/// curve, and (when coarse estimation ran) the same for the upsampled
/// coarse flow so refinement gains are visible.
pub struct EvalOutcome {
    pub report: EvalReport,
    pub coarse_report: Option<EvalReport>,
}

pub fn evaluate(
    model: &CrftModel,
    samples: &[RegistrationSample],
    flags: AblationFlags,
    thresholds: &[f64],
    lanes: usize,
) -> Result<EvalOutcome> {
    if samples.is_empty() {
        return Err(CrftError::InvalidArgument("empty evaluation set".into()));
    }
    let eval_one = |sample: &RegistrationSample| -> Result<(f64, Option<f64>)> {
        let mut tape = Tape::new();
        let pass = model.forward_sample(&mut tape, sample, flags)?;
        let valid = sample.valid_bools();
        let final_flow = FlowField::new(
            tape.tensor(*pass.iteration_flows.last().unwrap()),
            Resolution::Full,
        )?;
        let final_aepe = metrics::aepe(&final_flow, &sample.gt_flow, &valid)?;
        let coarse_aepe = match pass.coarse_flow {
            Some(cf) if flags.idgo => {
                let up = tape.upsample_bilinear(cf, 8)?;
                let full = tape.scalar_affine(up, 8.0, 0.0)?;
                let cflow = FlowField::new(tape.tensor(full), Resolution::Full)?;
                Some(metrics::aepe(&cflow, &sample.gt_flow, &valid)?)
            }
            // without refinement the final flow already is the coarse flow
            Some(_) => Some(final_aepe),
            None => None,
        };
        Ok((final_aepe, coarse_aepe))
    };

    let lanes = lanes.max(1).min(samples.len());
    let results: Vec<(f64, Option<f64>)> = if lanes <= 1 {
        samples.iter().map(eval_one).collect::<Result<_>>()?
    } else {
        let mut slots: Vec<Option<Result<(f64, Option<f64>)>>> = Vec::new();
        slots.resize_with(samples.len(), || None);
        std::thread::scope(|scope| {
            let chunk = samples.len().div_ceil(lanes);
            let slot_chunks: Vec<_> = slots.chunks_mut(chunk).collect();
            let sample_chunks: Vec<_> = samples.chunks(chunk).collect();
            for (slot_chunk, sample_chunk) in slot_chunks.into_iter().zip(sample_chunks) {
                scope.spawn(move || {
                    for (slot, sample) in slot_chunk.iter_mut().zip(sample_chunk) {
                        *slot = Some(eval_one(sample));
                    }
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.expect("worker filled every slot"))
            .collect::<Result<_>>()?
    };

    let finals: Vec<f64> = results.iter().map(|(f, _)| *f).collect();
    let report = metrics::cmr_curve(&finals, thresholds)?;
    let coarse_report = if results.iter().all(|(_, c)| c.is_some()) {
        let coarse: Vec<f64> = results.iter().map(|(_, c)| c.unwrap()).collect();
        Some(metrics::cmr_curve(&coarse, thresholds)?)
    } else {
        None
    };
    Ok(EvalOutcome {
        report,
        coarse_report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::Preset;

    fn tiny_config(seed: u64) -> TrainConfig {
        TrainConfig {
            model: ModelConfig::tiny(),
            batch_size: 1,
            seed,
            ..TrainConfig::default()
        }
    }

    fn sample(seed: u64) -> RegistrationSample {
        synth::generate_pair(seed, 16, Preset::Easy).unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut cfg = tiny_config(1);
        cfg.learning_rate = 0.0;
        cfg.weight_decay = 0.0;
        let mut trainer = Trainer::new(cfg).unwrap();
        let before: Vec<Vec<f64>> = trainer
            .model
            .params
            .iter()
            .map(|(_, t)| t.data().to_vec())
            .collect();
        let s = sample(2);
        for _ in 0..3 {
            trainer.train_step(&[&s]).unwrap();
        }
        let after: Vec<Vec<f64>> = trainer
            .model
            .params
            .iter()
            .map(|(_, t)| t.data().to_vec())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn loss_descends_when_overfitting_one_sample() {
        let mut cfg = tiny_config(3);
        cfg.learning_rate = 1e-3;
        let mut trainer = Trainer::new(cfg).unwrap();
        let s = sample(4);
        let first = trainer.train_step(&[&s]).unwrap().total;
        let mut last = first;
        for _ in 0..40 {
            last = trainer.train_step(&[&s]).unwrap().total;
        }
        assert!(
            last < first,
            "loss should descend on one sample: {first} -> {last}"
        );
    }

    #[test]
    fn checkpoint_resume_reproduces_trajectory() {
        let dir = std::env::temp_dir().join(format!("crft-trainer-ckpt-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();

        let s = sample(5);
        let mut a = Trainer::new(tiny_config(6)).unwrap();
        for _ in 0..2 {
            a.train_step(&[&s]).unwrap();
        }
        a.save_checkpoint(&dir).unwrap();
        // continue the original (its state was quantized by the save)
        let continued: Vec<f64> = (0..3).map(|_| a.train_step(&[&s]).unwrap().total).collect();

        let mut b = Trainer::load_checkpoint(&dir).unwrap();
        assert_eq!(b.step, 2);
        let resumed: Vec<f64> = (0..3).map(|_| b.train_step(&[&s]).unwrap().total).collect();
        assert_eq!(continued, resumed);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn identical_seeds_give_bit_identical_steps() {
        let s = sample(8);
        let run = || {
            let mut t = Trainer::new(tiny_config(7)).unwrap();
            (0..3)
                .map(|_| t.train_step(&[&s]).unwrap().total)
                .collect::<Vec<f64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn lanes_do_not_change_results() {
        let samples: Vec<RegistrationSample> = (0..3).map(|i| sample(20 + i)).collect();
        let batch: Vec<&RegistrationSample> = samples.iter().collect();
        let run = |lanes: usize| {
            let mut cfg = tiny_config(9);
            cfg.lanes = lanes;
            cfg.batch_size = 3;
            let mut t = Trainer::new(cfg).unwrap();
            let r = t.train_step(&batch).unwrap();
            (r.total, t.model.params.get("enc.stem.w").data().to_vec())
        };
        let (loss1, w1) = run(1);
        let (loss2, w2) = run(2);
        assert_eq!(loss1, loss2);
        assert_eq!(w1, w2);
    }

    #[test]
    fn evaluate_is_repeatable_and_rejects_empty_sets() {
        let trainer = Trainer::new(tiny_config(10)).unwrap();
        let samples = vec![sample(11), sample(12)];
        let thresholds = metrics::default_thresholds();
        let a = evaluate(&trainer.model, &samples, AblationFlags::default(), &thresholds, 1)
            .unwrap();
        let b = evaluate(&trainer.model, &samples, AblationFlags::default(), &thresholds, 2)
            .unwrap();
        assert_eq!(a.report.per_sample_aepe, b.report.per_sample_aepe);
        assert!(a.coarse_report.is_some());
        assert!(evaluate(&trainer.model, &[], AblationFlags::default(), &thresholds, 1).is_err());
    }

    #[test]
    fn overfit_model_beats_untrained_on_its_sample() {
        let mut cfg = tiny_config(15);
        cfg.learning_rate = 2e-3;
        let s = sample(16);
        let thresholds = metrics::default_thresholds();
        let untrained = Trainer::new(cfg.clone()).unwrap();
        let before = evaluate(
            &untrained.model,
            std::slice::from_ref(&s),
            AblationFlags::default(),
            &thresholds,
            1,
        )
        .unwrap()
        .report
        .mean_aepe;
        let mut trained = Trainer::new(cfg).unwrap();
        for _ in 0..60 {
            trained.train_step(&[&s]).unwrap();
        }
        let after = evaluate(
            &trained.model,
            std::slice::from_ref(&s),
            AblationFlags::default(),
            &thresholds,
            1,
        )
        .unwrap()
        .report
        .mean_aepe;
        assert!(after < before, "AEPE did not improve: {before} -> {after}");
    }

    #[test]
    fn il_off_supervises_only_the_final_iteration() {
        let mut cfg = tiny_config(13);
        cfg.enable_il = false;
        let mut trainer = Trainer::new(cfg).unwrap();
        let s = sample(14);
        let report = trainer.train_step(&[&s]).unwrap();
        assert_eq!(report.per_iteration.len(), 1);
        assert!((report.fine - report.per_iteration[0]).abs() < 1e-12);
    }
}
