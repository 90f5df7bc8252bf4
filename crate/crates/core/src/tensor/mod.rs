//! Dense f64 tensors and the reverse-mode autodiff tape.
//!
//! Every learnable computation in the pipeline is expressed over a fixed,
//! enumerable set of tape primitives (see [`tape`]); each primitive has a
//! hand-written backward rule, which keeps the whole gradient path
//! finite-difference checkable.

pub mod gradcheck;
mod tape;

pub use tape::{Op, Tape, TensorId};

use crate::error::{CrftError, Result};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

/// Dense N-dimensional array of f64 in row-major order, with an optional
/// gradient slot filled in by [`Tape::backward`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CrftError::ShapeMismatch {
                op: "Tensor::new",
                detail: format!(
                    "shape {:?} implies {} elements, data has {}",
                    shape,
                    numel,
                    data.len()
                ),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CrftError::NonFinite { op: "Tensor::new" });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    /// Uniform init in [-bound, bound], the usual fan-in scheme feeding it.
    pub fn uniform(shape: Vec<usize>, bound: f64, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.uniform(-bound, bound)).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<f64>) {
        (self.shape, self.data)
    }
}

/// Average-pool a [1,C,H,W] map by an integer factor (stride == kernel).
/// Plain data helper for constant inputs (ground truth, image content);
/// gradients never flow through it.
pub fn avg_pool(t: &Tensor, factor: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(CrftError::ShapeMismatch {
            op: "avg_pool",
            detail: format!("expected 4-d [N,C,H,W], got {:?}", s),
        });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h % factor != 0 || w % factor != 0 {
        return Err(CrftError::InvalidArgument(format!(
            "avg_pool: dims {}x{} not divisible by {}",
            h, w, factor
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0.0; n * c * oh * ow];
    let inv = 1.0 / (factor * factor) as f64;
    for ni in 0..n {
        for ci in 0..c {
            let src = &t.data()[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            let dst = &mut out[(ni * c + ci) * oh * ow..(ni * c + ci + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..factor {
                        for kx in 0..factor {
                            acc += src[(oy * factor + ky) * w + ox * factor + kx];
                        }
                    }
                    dst[oy * ow + ox] = acc * inv;
                }
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}
