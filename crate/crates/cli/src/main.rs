//! Command-line driver: dataset generation, training, evaluation,
//! prediction, checkerboard fusion, and report merging.
//!
//! Exit codes: 0 success, 2 usage error, 3 I/O or format error, 4 numeric
//! failure (non-finite loss, degenerate sample).

use clap::{Parser, Subcommand};
use crft_core::error::CrftError;
use crft_core::flow::FlowField;
use crft_core::io;
use crft_core::metrics::{self, EvalReport};
use crft_core::synth::{self, Preset};
use crft_core::tensor::{Tape, Tensor};
use crft_core::trainer::{self, TrainConfig, Trainer};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "crft", about = "cross-modal registration via coarse-to-fine feature flow")]
struct Cli {
    /// seed applied where a command uses randomness
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON file mirroring the training configuration; flags override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// generate a synthetic cross-modal dataset
    Gen {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value = "easy")]
        preset: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// train a model per the (file + flag) configuration
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        /// disable coarse flow estimation
        #[arg(long)]
        no_fe: bool,
        /// disable iterative refinement
        #[arg(long)]
        no_idgo: bool,
        /// disable the iterative loss (supervise only the final iteration)
        #[arg(long)]
        no_il: bool,
        #[arg(long)]
        lanes: Option<usize>,
    },
    /// evaluate a checkpoint on a dataset
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lanes: Option<usize>,
    },
    /// register one image pair and write flow, confidence, and a visual
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// optional ground-truth flow for an AEPE printout
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// checkerboard fusion of two images, optionally warping the second
    Fuse {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// flow used to warp image b into a's frame before fusing
        #[arg(long)]
        flow: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        tile: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// merge evaluation reports into one wide CMR csv
    Report {
        /// eval.json files, one column each
        #[arg(long = "eval-json", required = true, num_args = 1..)]
        eval_json: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code_for(err: &CrftError) -> u8 {
    match err {
        CrftError::InvalidArgument(_) | CrftError::ShapeMismatch { .. } => 2,
        CrftError::Io { .. } | CrftError::Format { .. } | CrftError::Json(_) => 3,
        CrftError::NonFinite { .. } | CrftError::Autodiff(_) | CrftError::EmptyMask(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn load_config(path: &Option<PathBuf>, seed: u64) -> Result<TrainConfig, CrftError> {
    let mut cfg: TrainConfig = match path {
        Some(p) => io::read_json(p)?,
        None => TrainConfig::default(),
    };
    cfg.seed = seed;
    Ok(cfg)
}

/// CRFT_THREADS caps the requested lane count.
fn effective_lanes(requested: usize) -> usize {
    let cap = trainer::lanes_from_env();
    if std::env::var("CRFT_THREADS").is_ok() {
        requested.max(1).min(cap)
    } else {
        requested.max(1)
    }
}

fn run(cli: Cli) -> Result<(), CrftError> {
    match cli.command {
        Command::Gen { n, size, preset, out } => {
            let preset: Preset = preset.parse()?;
            let manifest = synth::write_dataset(n, cli.seed, size, preset, &out)?;
            println!(
                "wrote {} samples ({}x{}, preset {}) to {}",
                manifest.count,
                size,
                size,
                manifest.preset,
                out.display()
            );
            Ok(())
        }
        Command::Train {
            data,
            eval_data,
            out,
            lr,
            epochs,
            max_steps,
            batch,
            iterations,
            no_fe,
            no_idgo,
            no_il,
            lanes,
        } => {
            let mut cfg = load_config(&cli.config, cli.seed)?;
            if let Some(d) = data {
                cfg.dataset_dir = d;
            }
            if let Some(d) = eval_data {
                cfg.eval_dir = Some(d);
            }
            if let Some(o) = out {
                cfg.checkpoint_dir = o;
            }
            if let Some(v) = lr {
                cfg.learning_rate = v;
            }
            if let Some(v) = epochs {
                cfg.epochs = v;
            }
            if let Some(v) = max_steps {
                cfg.max_steps = Some(v);
            }
            if let Some(v) = batch {
                cfg.batch_size = v;
            }
            if let Some(v) = iterations {
                cfg.model.iterations = v;
            }
            if no_fe {
                cfg.enable_fe = false;
            }
            if no_idgo {
                cfg.enable_idgo = false;
            }
            if no_il {
                cfg.enable_il = false;
            }
            if let Some(v) = lanes {
                cfg.lanes = v;
            }
            cfg.lanes = effective_lanes(cfg.lanes);
            let summary = trainer::train(cfg)?;
            println!(
                "trained {} steps, final loss {:.6}; checkpoint at {}",
                summary.steps,
                summary.final_loss,
                summary.checkpoint_dir.display()
            );
            Ok(())
        }
        Command::Eval { ckpt, data, out, lanes } => {
            let t = Trainer::load_checkpoint(&ckpt)?;
            let samples = synth::read_dataset(&data)?;
            let lanes = effective_lanes(lanes.unwrap_or(t.config.lanes));
            let outcome = trainer::evaluate(
                &t.model,
                &samples,
                t.config.flags(),
                &metrics::default_thresholds(),
                lanes,
            )?;
            std::fs::create_dir_all(&out)
                .map_err(|e| CrftError::io(out.display().to_string(), e))?;
            outcome.report.write_cmr_csv(&out.join("cmr.csv"))?;
            outcome.report.write_json(&out.join("eval.json"))?;
            if let Some(c) = &outcome.coarse_report {
                c.write_json(&out.join("eval_coarse.json"))?;
            }
            io::write_json(&out.join("config.json"), &t.config)?;
            println!(
                "mean AEPE {:.4} over {} samples{}",
                outcome.report.mean_aepe,
                outcome.report.per_sample_aepe.len(),
                outcome
                    .coarse_report
                    .as_ref()
                    .map(|c| format!(" (coarse-only {:.4})", c.mean_aepe))
                    .unwrap_or_default()
            );
            Ok(())
        }
        Command::Predict { ckpt, a, b, out, gt } => {
            let t = Trainer::load_checkpoint(&ckpt)?;
            let image_a = read_image(&a)?;
            let image_b = read_image(&b)?;
            let pred = t.predict(&image_a, &image_b)?;
            std::fs::create_dir_all(&out)
                .map_err(|e| CrftError::io(out.display().to_string(), e))?;
            let (h, w) = (image_a.shape()[2], image_a.shape()[3]);
            pred.flow.save(&out.join("flow.crt1"), (h, w))?;
            if let Some(conf) = &pred.confidence {
                let s = conf.shape();
                let disk = Tensor::new(vec![s[2], s[3]], conf.data().to_vec())?;
                io::write_crt1(&out.join("confidence.crt1"), &disk)?;
            }
            write_flow_magnitude_pgm(&out.join("flow_magnitude.pgm"), &pred.flow)?;
            io::write_json(&out.join("config.json"), &t.config)?;

            let gt_path = gt.or_else(|| {
                let sibling = a.parent().map(|p| p.join("flow.crt1"));
                sibling.filter(|p| p.exists())
            });
            if let Some(gt_path) = gt_path {
                let gt_flow = FlowField::load(&gt_path)?;
                let mask_path = gt_path.parent().map(|p| p.join("mask.crt1"));
                let valid: Vec<bool> = match mask_path.filter(|p| p.exists()) {
                    Some(mp) => io::read_crt1(&mp)?.data().iter().map(|v| *v > 0.5).collect(),
                    None => vec![true; h * w],
                };
                let aepe = metrics::aepe(&pred.flow, &gt_flow, &valid)?;
                println!("AEPE vs ground truth: {aepe:.4}");
            }
            println!("prediction written to {}", out.display());
            Ok(())
        }
        Command::Fuse { a, b, flow, tile, out } => {
            let image_a = read_image(&a)?;
            let image_b = read_image(&b)?;
            let fused_input = match flow {
                Some(fp) => {
                    let flow = FlowField::load(&fp)?;
                    let mut tape = Tape::new();
                    let bimg = tape.leaf(&image_b);
                    let fl = tape.leaf(flow.tensor());
                    let (warped, _) = tape.bilinear_warp(bimg, fl)?;
                    tape.tensor(warped)
                }
                None => image_b.clone(),
            };
            let fused = metrics::checkerboard_fuse(&image_a, &fused_input, tile)?;
            let s = fused.shape().to_vec();
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)
                        .map_err(|e| CrftError::io(parent.display().to_string(), e))?;
                }
            }
            io::write_pgm(&out, s[3], s[2], fused.data())?;
            println!("checkerboard written to {}", out.display());
            Ok(())
        }
        Command::Report { eval_json, out } => {
            let mut reports: Vec<(String, EvalReport)> = Vec::new();
            for path in &eval_json {
                let name = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| path.display().to_string());
                let report: EvalReport = io::read_json(path)?;
                reports.push((name, report));
            }
            let grid = reports[0].1.thresholds.clone();
            for (name, r) in &reports {
                if r.thresholds != grid {
                    return Err(CrftError::InvalidArgument(format!(
                        "threshold grid of {name} does not match the first report"
                    )));
                }
            }
            let mut text = String::from("threshold");
            for (name, _) in &reports {
                text.push(',');
                text.push_str(name);
            }
            text.push('\n');
            for (i, tau) in grid.iter().enumerate() {
                text.push_str(&format!("{tau}"));
                for (_, r) in &reports {
                    text.push_str(&format!(",{}", r.cmr[i]));
                }
                text.push('\n');
            }
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)
                        .map_err(|e| CrftError::io(parent.display().to_string(), e))?;
                }
            }
            std::fs::write(&out, text).map_err(|e| CrftError::io(out.display().to_string(), e))?;
            println!("merged {} reports into {}", reports.len(), out.display());
            Ok(())
        }
    }
}

/// Read an intensity image stored as CRT1, accepting [H,W] or [1,1,H,W].
fn read_image(path: &Path) -> Result<Tensor, CrftError> {
    let t = io::read_crt1(path)?;
    let s = t.shape().to_vec();
    match s.len() {
        2 => Tensor::new(vec![1, 1, s[0], s[1]], t.into_parts().1),
        4 if s[0] == 1 && s[1] == 1 => Ok(t),
        _ => Err(CrftError::format(
            path.display().to_string(),
            format!("expected a [H,W] or [1,1,H,W] intensity image, got {:?}", s),
        )),
    }
}

fn write_flow_magnitude_pgm(path: &Path, flow: &FlowField) -> Result<(), CrftError> {
    let (h, w) = (flow.height(), flow.width());
    let mut mags = Vec::with_capacity(h * w);
    let mut max = 1e-12f64;
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = flow.at(x, y);
            let m = (dx * dx + dy * dy).sqrt();
            max = max.max(m);
            mags.push(m);
        }
    }
    for m in &mut mags {
        *m /= max;
    }
    io::write_pgm(path, w, h, &mags)
}
