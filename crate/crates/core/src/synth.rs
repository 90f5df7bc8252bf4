//! Deterministic synthetic cross-modal registration pairs.
//!
//! Each sample starts from a seeded procedural texture (multi-octave value
//! noise plus filled polygons and line segments, so structure survives an
//! intensity remap). Image A is the texture; image B is the texture warped
//! by a random affine map and pushed through a seeded monotone gamma remap
//! with multiplicative speckle, standing in for a second imaging modality.
//! The ground-truth flow comes directly from the affine map, and the valid
//! mask marks pixels whose correspondence stays inside the image.
//!
//! Flow convention: `target = source + flow`, i.e. flow maps A coordinates
//! into B coordinates.

use crate::error::{CrftError, Result};
use crate::flow::{FlowField, Resolution};
use crate::io;
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// small offsets: |t| <= 6 px, rotation within ±10°, scale 0.95..1.05
    Easy,
    /// the evaluation envelope: |t| <= 30 px, ±45°, scale 0.9..1.1
    Paper,
    /// extreme geometry: ±90° rotations, scale 0.5..1.5
    Stress,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Preset::Easy => "easy",
            Preset::Paper => "paper",
            Preset::Stress => "stress",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Preset {
    type Err = CrftError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Preset::Easy),
            "paper" => Ok(Preset::Paper),
            "stress" => Ok(Preset::Stress),
            other => Err(CrftError::InvalidArgument(format!(
                "unknown preset '{other}' (expected easy|paper|stress)"
            ))),
        }
    }
}

/// Similarity transform about the image center plus translation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AffineParams {
    pub scale: f64,
    pub rotation_deg: f64,
    pub translate: (f64, f64),
}

impl AffineParams {
    pub fn identity() -> Self {
        AffineParams {
            scale: 1.0,
            rotation_deg: 0.0,
            translate: (0.0, 0.0),
        }
    }

    /// Map a point (x, y) with rotation/scale about `center`.
    pub fn apply(&self, x: f64, y: f64, center: (f64, f64)) -> (f64, f64) {
        let th = self.rotation_deg.to_radians();
        let (sin, cos) = th.sin_cos();
        let (dx, dy) = (x - center.0, y - center.1);
        let rx = self.scale * (cos * dx - sin * dy);
        let ry = self.scale * (sin * dx + cos * dy);
        (
            rx + center.0 + self.translate.0,
            ry + center.1 + self.translate.1,
        )
    }

    /// Inverse map (scale is positive, so always defined).
    pub fn invert(&self, x: f64, y: f64, center: (f64, f64)) -> (f64, f64) {
        let th = self.rotation_deg.to_radians();
        let (sin, cos) = th.sin_cos();
        let (dx, dy) = (x - self.translate.0 - center.0, y - self.translate.1 - center.1);
        let inv = 1.0 / self.scale;
        (
            inv * (cos * dx + sin * dy) + center.0,
            inv * (-sin * dx + cos * dy) + center.1,
        )
    }

    /// The inverse transform in the same parameter form.
    pub fn inverse_params(&self) -> AffineParams {
        let th = (-self.rotation_deg).to_radians();
        let (sin, cos) = th.sin_cos();
        let inv = 1.0 / self.scale;
        let (tx, ty) = self.translate;
        AffineParams {
            scale: inv,
            rotation_deg: -self.rotation_deg,
            translate: (
                -inv * (cos * tx - sin * ty),
                -inv * (sin * tx + cos * ty),
            ),
        }
    }
}

/// Seeded appearance change applied to image B: a monotone gamma remap plus
/// multiplicative speckle.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModalityParams {
    pub gamma: f64,
    pub speckle_sigma: f64,
}

/// One registration sample with exact ground truth.
#[derive(Debug, Clone)]
pub struct RegistrationSample {
    /// [1,1,H,W] intensities in [0,1]
    pub image_a: Tensor,
    pub image_b: Tensor,
    pub gt_flow: FlowField,
    /// [1,1,H,W] of 0/1
    pub valid_mask: Tensor,
    pub affine: AffineParams,
    pub modality: ModalityParams,
    pub seed: u64,
    pub preset: Preset,
}

impl RegistrationSample {
    pub fn height(&self) -> usize {
        self.image_a.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.image_a.shape()[3]
    }

    pub fn valid_bools(&self) -> Vec<bool> {
        self.valid_mask.data().iter().map(|v| *v > 0.5).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.valid_mask.data().iter().filter(|v| **v > 0.5).count()
    }
}

/// Metadata persisted with each sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub preset: Preset,
    pub size: usize,
    pub affine: AffineParams,
    pub modality: ModalityParams,
}

/// flow(p) = A(p) − p for every pixel, center of rotation at the image
/// center.
pub fn affine_to_flow(params: &AffineParams, h: usize, w: usize) -> FlowField {
    let center = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut flow = FlowField::zeros(h, w, Resolution::Full);
    for y in 0..h {
        for x in 0..w {
            let (tx, ty) = params.apply(x as f64, y as f64, center);
            flow.set(x, y, tx - x as f64, ty - y as f64);
        }
    }
    flow
}

/// Valid-pixel mask: A(p) inside [0, W−1] × [0, H−1].
pub fn validity_mask(params: &AffineParams, h: usize, w: usize) -> Tensor {
    let center = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (tx, ty) = params.apply(x as f64, y as f64, center);
            if tx >= 0.0 && tx <= (w - 1) as f64 && ty >= 0.0 && ty <= (h - 1) as f64 {
                data[y * w + x] = 1.0;
            }
        }
    }
    Tensor::new(vec![1, 1, h, w], data).expect("mask construction")
}

// ---- procedural texture ---------------------------------------------------

/// Bilinearly interpolated random lattice (value noise) with `cells` cells
/// per side, amplitude in [0, 1].
fn value_noise(rng: &mut Rng, size: usize, cells: usize) -> Vec<f64> {
    let grid = cells + 2;
    let lattice: Vec<f64> = (0..grid * grid).map(|_| rng.next_f64()).collect();
    let step = size as f64 / cells as f64;
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let gx = x as f64 / step;
            let gy = y as f64 / step;
            let x0 = gx.floor() as usize;
            let y0 = gy.floor() as usize;
            let fx = gx - x0 as f64;
            let fy = gy - y0 as f64;
            let v00 = lattice[y0 * grid + x0];
            let v01 = lattice[y0 * grid + x0 + 1];
            let v10 = lattice[(y0 + 1) * grid + x0];
            let v11 = lattice[(y0 + 1) * grid + x0 + 1];
            out[y * size + x] =
                (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
        }
    }
    out
}

fn fill_triangle(img: &mut [f64], size: usize, pts: [(f64, f64); 3], value: f64, blend: f64) {
    let (min_x, max_x) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |acc, p| {
            (acc.0.min(p.0), acc.1.max(p.0))
        });
    let (min_y, max_y) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |acc, p| {
            (acc.0.min(p.1), acc.1.max(p.1))
        });
    let edge = |a: (f64, f64), b: (f64, f64), p: (f64, f64)| -> f64 {
        (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
    };
    let lo_y = (min_y.max(0.0)) as usize;
    let hi_y = (max_y.min((size - 1) as f64)) as usize;
    let lo_x = (min_x.max(0.0)) as usize;
    let hi_x = (max_x.min((size - 1) as f64)) as usize;
    for y in lo_y..=hi_y {
        for x in lo_x..=hi_x {
            let p = (x as f64, y as f64);
            let e0 = edge(pts[0], pts[1], p);
            let e1 = edge(pts[1], pts[2], p);
            let e2 = edge(pts[2], pts[0], p);
            let inside = (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0)
                || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0);
            if inside {
                let v = &mut img[y * size + x];
                *v = (1.0 - blend) * *v + blend * value;
            }
        }
    }
}

fn draw_segment(img: &mut [f64], size: usize, a: (f64, f64), b: (f64, f64), value: f64, width: f64) {
    let len2 = (b.0 - a.0).powi(2) + (b.1 - a.1).powi(2);
    for y in 0..size {
        for x in 0..size {
            let p = (x as f64, y as f64);
            let t = if len2 == 0.0 {
                0.0
            } else {
                (((p.0 - a.0) * (b.0 - a.0) + (p.1 - a.1) * (b.1 - a.1)) / len2).clamp(0.0, 1.0)
            };
            let cx = a.0 + t * (b.0 - a.0);
            let cy = a.1 + t * (b.1 - a.1);
            let d = ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt();
            // soft one-pixel falloff so the stroke survives resampling
            let cover = ((width + 0.8 - d) / 0.8).clamp(0.0, 1.0);
            if cover > 0.0 {
                let v = &mut img[y * size + x];
                *v = (1.0 - cover) * *v + cover * value;
            }
        }
    }
}

/// Seeded base texture: multi-octave noise with randomized octave weights,
/// oriented gratings, polygonal regions, and segments — enough structural
/// variety that correlation features must generalize rather than memorize.
fn base_texture(rng: &mut Rng, size: usize) -> Vec<f64> {
    let coarse = value_noise(rng, size, 3.max(size / 16));
    let mid = value_noise(rng, size, 4.max(size / 10));
    let fines = value_noise(rng, size, 5.max(size / 6));
    let (wc, wm, wf) = (
        rng.uniform(0.3, 0.6),
        rng.uniform(0.15, 0.4),
        rng.uniform(0.06, 0.16),
    );
    let norm = wc + wm + wf;
    let mut img: Vec<f64> = (0..size * size)
        .map(|i| (wc * coarse[i] + wm * mid[i] + wf * fines[i]) / norm)
        .collect();

    // a couple of oriented gratings give sub-cell phase structure
    let n_gratings = 1 + rng.below(2);
    for _ in 0..n_gratings {
        let theta = rng.uniform(0.0, std::f64::consts::PI);
        let freq = rng.uniform(0.12, 0.4);
        let phase = rng.uniform(0.0, std::f64::consts::TAU);
        let amp = rng.uniform(0.04, 0.1);
        let (s, c) = theta.sin_cos();
        for y in 0..size {
            for x in 0..size {
                let u = c * x as f64 + s * y as f64;
                img[y * size + x] += amp * (freq * u + phase).sin();
            }
        }
    }

    // many small-to-medium patches: dense corner structure everywhere keeps
    // local descriptors unambiguous
    let n_tris = 12 + rng.below(8);
    for _ in 0..n_tris {
        let cx = rng.uniform(-4.0, size as f64 + 4.0);
        let cy = rng.uniform(-4.0, size as f64 + 4.0);
        let r = rng.uniform(4.0, 0.35 * size as f64);
        let mut vertex = || {
            (
                cx + rng.uniform(-r, r),
                cy + rng.uniform(-r, r),
            )
        };
        let pts = [vertex(), vertex(), vertex()];
        let value = rng.uniform(0.08, 0.92);
        fill_triangle(&mut img, size, pts, value, rng.uniform(0.55, 0.95));
    }
    let n_lines = 2 + rng.below(4);
    for _ in 0..n_lines {
        let a = (rng.uniform(0.0, size as f64), rng.uniform(0.0, size as f64));
        let b = (rng.uniform(0.0, size as f64), rng.uniform(0.0, size as f64));
        draw_segment(&mut img, size, a, b, rng.uniform(0.05, 0.95), rng.uniform(1.0, 1.8));
    }
    // percentile contrast stretch: flat draws would otherwise leave the
    // overlap region with too little signal to register
    let mut sorted = img.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = sorted[(sorted.len() as f64 * 0.02) as usize];
    let hi = sorted[((sorted.len() as f64 * 0.98) as usize).min(sorted.len() - 1)];
    let span = (hi - lo).max(1e-6);
    for v in &mut img {
        *v = 0.05 + 0.9 * ((*v - lo) / span);
    }

    // mild sensor noise so features cannot key on exact values
    for v in &mut img {
        *v = (*v + 0.004 * (2.0 * rng.next_f64() - 1.0)).clamp(0.02, 0.98);
    }
    img
}

fn sample_bilinear(img: &[f64], size: usize, x: f64, y: f64) -> Option<f64> {
    if x < 0.0 || y < 0.0 || x > (size - 1) as f64 || y > (size - 1) as f64 {
        return None;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(size - 1);
    let y1 = (y0 + 1).min(size - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    Some(
        (1.0 - fy) * ((1.0 - fx) * img[y0 * size + x0] + fx * img[y0 * size + x1])
            + fy * ((1.0 - fx) * img[y1 * size + x0] + fx * img[y1 * size + x1]),
    )
}

fn sample_affine(rng: &mut Rng, preset: Preset) -> AffineParams {
    match preset {
        Preset::Easy => AffineParams {
            scale: rng.uniform(0.95, 1.05),
            rotation_deg: rng.uniform(-10.0, 10.0),
            translate: (rng.uniform(-6.0, 6.0), rng.uniform(-6.0, 6.0)),
        },
        Preset::Paper => AffineParams {
            scale: rng.uniform(0.9, 1.1),
            rotation_deg: rng.uniform(-45.0, 45.0),
            translate: (rng.uniform(-30.0, 30.0), rng.uniform(-30.0, 30.0)),
        },
        Preset::Stress => AffineParams {
            scale: rng.uniform(0.5, 1.5),
            rotation_deg: if rng.next_u64() % 2 == 0 { 90.0 } else { -90.0 },
            translate: (rng.uniform(-30.0, 30.0), rng.uniform(-30.0, 30.0)),
        },
    }
}

/// Generate one sample. `size` must be a multiple of 8.
pub fn generate_pair(seed: u64, size: usize, preset: Preset) -> Result<RegistrationSample> {
    if size == 0 || size % 8 != 0 {
        return Err(CrftError::InvalidArgument(format!(
            "sample size {size} must be a positive multiple of 8"
        )));
    }
    let root = Rng::new(seed);
    let mut tex_rng = root.fork(1);
    let mut affine_rng = root.fork(2);
    let mut modality_rng = root.fork(3);

    let base = base_texture(&mut tex_rng, size);
    let affine = sample_affine(&mut affine_rng, preset);

    // B(q) = base(A⁻¹(q)); out-of-source pixels get low-amplitude noise so
    // no artificial structure correlates with A there
    let center = ((size as f64 - 1.0) / 2.0, (size as f64 - 1.0) / 2.0);
    let mut warped = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (sx, sy) = affine.invert(x as f64, y as f64, center);
            warped[y * size + x] = match sample_bilinear(&base, size, sx, sy) {
                Some(v) => v,
                None => 0.5 + 0.1 * (modality_rng.next_f64() - 0.5),
            };
        }
    }

    // monotone intensity remap away from identity, plus speckle
    let gamma = if modality_rng.next_u64() % 2 == 0 {
        modality_rng.uniform(0.62, 0.85)
    } else {
        modality_rng.uniform(1.2, 1.6)
    };
    let speckle_sigma = modality_rng.uniform(0.015, 0.035);
    let modality = ModalityParams {
        gamma,
        speckle_sigma,
    };
    let image_b_data: Vec<f64> = warped
        .iter()
        .map(|v| {
            let remapped = v.max(0.0).powf(gamma);
            let speckle = 1.0 + speckle_sigma * (2.0 * modality_rng.next_f64() - 1.0);
            (remapped * speckle).clamp(0.0, 1.0)
        })
        .collect();

    let gt_flow = affine_to_flow(&affine, size, size);
    let valid_mask = validity_mask(&affine, size, size);

    Ok(RegistrationSample {
        image_a: Tensor::new(vec![1, 1, size, size], base)?,
        image_b: Tensor::new(vec![1, 1, size, size], image_b_data)?,
        gt_flow,
        valid_mask,
        affine,
        modality,
        seed,
        preset,
    })
}

// ---- dataset persistence ----------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub count: usize,
    pub seed: u64,
    pub size: usize,
    pub preset: Preset,
    pub samples: Vec<String>,
}

pub fn sample_dir_name(index: usize) -> String {
    format!("{index:04}")
}

/// Write one sample into `dir` (created if needed): CRT1 tensors, PGM
/// previews, and the JSON metadata.
pub fn write_sample(dir: &Path, sample: &RegistrationSample) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CrftError::io(dir.display().to_string(), e))?;
    io::write_crt1(&dir.join("a.crt1"), &sample.image_a)?;
    io::write_crt1(&dir.join("b.crt1"), &sample.image_b)?;
    io::write_crt1(&dir.join("mask.crt1"), &sample.valid_mask)?;
    let (h, w) = (sample.height(), sample.width());
    sample.gt_flow.save(&dir.join("flow.crt1"), (h, w))?;
    io::write_pgm(&dir.join("a.pgm"), w, h, sample.image_a.data())?;
    io::write_pgm(&dir.join("b.pgm"), w, h, sample.image_b.data())?;
    io::write_json(
        &dir.join("meta.json"),
        &SampleMeta {
            seed: sample.seed,
            preset: sample.preset,
            size: w,
            affine: sample.affine,
            modality: sample.modality,
        },
    )?;
    Ok(())
}

pub fn read_sample(dir: &Path) -> Result<RegistrationSample> {
    let meta: SampleMeta = io::read_json(&dir.join("meta.json"))?;
    let image_a = io::read_crt1(&dir.join("a.crt1"))?;
    let image_b = io::read_crt1(&dir.join("b.crt1"))?;
    let valid_mask = io::read_crt1(&dir.join("mask.crt1"))?;
    let gt_flow = FlowField::load(&dir.join("flow.crt1"))?;
    Ok(RegistrationSample {
        image_a,
        image_b,
        gt_flow,
        valid_mask,
        affine: meta.affine,
        modality: meta.modality,
        seed: meta.seed,
        preset: meta.preset,
    })
}

/// Generate and persist `n` samples; sample i uses seed `seed + i`.
pub fn write_dataset(
    n: usize,
    seed: u64,
    size: usize,
    preset: Preset,
    dir: &Path,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).map_err(|e| CrftError::io(dir.display().to_string(), e))?;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let sample = generate_pair(seed + i as u64, size, preset)?;
        let name = sample_dir_name(i);
        write_sample(&dir.join(&name), &sample)?;
        samples.push(name);
    }
    let manifest = DatasetManifest {
        count: n,
        seed,
        size,
        preset,
        samples,
    };
    io::write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Load every sample listed in a dataset manifest, in manifest order.
pub fn read_dataset(dir: &Path) -> Result<Vec<RegistrationSample>> {
    let manifest: DatasetManifest = io::read_json(&dir.join("manifest.json"))?;
    let mut out = Vec::with_capacity(manifest.samples.len());
    for name in &manifest.samples {
        out.push(read_sample(&dir.join(name))?);
    }
    Ok(out)
}

pub fn dataset_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest: DatasetManifest = io::read_json(&dir.join("manifest.json"))?;
    Ok(manifest.samples.iter().map(|s| dir.join(s)).collect())
}
