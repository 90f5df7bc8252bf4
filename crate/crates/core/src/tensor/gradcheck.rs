//! Finite-difference gradient checking.
//!
//! Used by the test suites to validate every analytic backward rule against
//! central differences, and by the acceptance suite to validate the composed
//! pipeline. Kept in the library (not test-only code) so integration tests
//! can reuse it.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, TensorId};

/// Builds a scalar loss from leaf nodes previously entered on the tape.
pub type LossFn = dyn Fn(&mut Tape, &[TensorId]) -> Result<TensorId>;

/// Outcome of one gradient comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compare analytic gradients of `loss_fn` w.r.t. every element of every
/// input against central finite differences with step `h`.
///
/// The relative error uses an absolute floor so near-zero gradients do not
/// produce spurious huge ratios: err = |a − n| / max(|a|, |n|, floor).
pub fn check(
    inputs: &[Tensor],
    loss_fn: &LossFn,
    h: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    let eval = |tensors: &[Tensor]| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let loss = loss_fn(&mut tape, &ids)?;
        let value = tape.data(loss)[0];
        tape.backward(loss)?;
        let grads = ids.iter().map(|&id| tape.grad(id).map(|g| g.to_vec())).collect();
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs)?;

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (ti, t) in inputs.iter().enumerate() {
        if !t.requires_grad {
            continue;
        }
        let a_grad = analytic[ti]
            .clone()
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        for ei in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[ei] += h;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[ei] -= h;
            let (lp, _) = {
                let mut tape = Tape::new();
                let ids: Vec<TensorId> = plus.iter().map(|t| tape.leaf(t)).collect();
                let loss = loss_fn(&mut tape, &ids)?;
                (tape.data(loss)[0], ())
            };
            let (lm, _) = {
                let mut tape = Tape::new();
                let ids: Vec<TensorId> = minus.iter().map(|t| tape.leaf(t)).collect();
                let loss = loss_fn(&mut tape, &ids)?;
                (tape.data(loss)[0], ())
            };
            let numeric = (lp - lm) / (2.0 * h);
            let a = a_grad[ei];
            // absolute floor: differences below it are indistinguishable
            // from finite-difference roundoff
            if (a - numeric).abs() > floor {
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
                if rel > max_rel {
                    max_rel = rel;
                }
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        checked,
    })
}

/// Central finite difference of an arbitrary scalar function of flat params.
/// Used where the parameter set is too large to sweep exhaustively and only
/// a sampled subset is checked.
pub fn numeric_partial<F>(f: &mut F, params: &mut [f64], index: usize, h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let orig = params[index];
    params[index] = orig + h;
    let lp = f(params);
    params[index] = orig - h;
    let lm = f(params);
    params[index] = orig;
    (lp - lm) / (2.0 * h)
}

use crate::rng::Rng;

fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let numel = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.uniform(-1.0, 1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random values with |x| >= 0.1, for ops with a kink at zero (relu, abs)
/// where a finite difference straddling the kink is meaningless.
fn rand_tensor_off_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    let numel = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| {
            let u = rng.uniform(-1.0, 1.0);
            u.signum() * (0.1 + 0.9 * u.abs())
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// One gradcheck case: name + differentiable inputs + graph builder.
pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Box<LossBuilder>,
}

pub type LossBuilder = dyn Fn(&mut Tape, &[TensorId]) -> crate::error::Result<TensorId>;

/// Every primitive with a backward rule, each wrapped in a scalar loss.
/// Inputs stay at or below 64 elements.
pub fn primitive_grad_cases() -> Vec<GradCase> {
    let mut rng = Rng::new(0xC0FFEE);
    let mut cases: Vec<GradCase> = Vec::new();
    let rt = |shape: &[usize], rng: &mut Rng| rand_tensor(shape, rng).with_grad();

    cases.push(GradCase {
        name: "add",
        inputs: vec![rt(&[3, 4], &mut rng), rt(&[3, 4], &mut rng)],
        build: Box::new(|t, ids| {
            let y = t.add(ids[0], ids[1])?;
            t.sum(y)
        }),
    });
    cases.push(GradCase {
        name: "sub",
        inputs: vec![rt(&[3, 4], &mut rng), rt(&[3, 4], &mut rng)],
        build: Box::new(|t, ids| {
            let y = t.sub(ids[0], ids[1])?;
            let sq = t.mul(y, y)?;
            t.sum(sq)
        }),
    });
    cases.push(GradCase {
        name: "mul",
        inputs: vec![rt(&[3, 4], &mut rng), rt(&[3, 4], &mut rng)],
        build: Box::new(|t, ids| {
            let y = t.mul(ids[0], ids[1])?;
            t.sum(y)
        }),
    });
    cases.push(GradCase {
        name: "scalar_affine",
        inputs: vec![rt(&[5], &mut rng)],
        build: Box::new(|t, ids| {
            let y = t.scalar_affine(ids[0], -2.5, 0.75)?;
            let sq = t.mul(y, y)?;
            t.sum(sq)
        }),
    });
    cases.push(GradCase {
        name: "mul_scalar",
        inputs: vec![rt(&[4, 3], &mut rng), rt(&[1], &mut rng)],
        build: Box::new(|t, ids| {
            let y = t.mul_scalar(ids[0], ids[1])?;
            let sq = t.mul(y, y)?;
            t.sum(sq)
        }),
    });
    cases.push(GradCase {
        name: "abs",
        inputs: vec![rand_tensor_off_zero(&[7], &mut rng).with_grad()],
        build: Box::new(|t, ids| {
            let y = t.abs(ids[0])?;
            t.sum(y)
        }),
    });
    cases.push(GradCase {
        name: "relu",
        inputs: vec![rand_tensor_off_zero(&[7], &mut rng).with_grad()],
        build: Box::new(|t, ids| {
            let y = t.relu(ids[0])?;
            let sq = t.mul(y, y)?;
            t.sum(sq)
        }),
    });
    cases.push(GradCase {
        name: "gelu",
        inputs: vec![rt(&[7], &mut rng)],
        build: Box::new(|t, ids| {
            let y = t.gelu(ids[0])?;
            t.sum(y)
        }),
    });
    cases.push(GradCase {
        name: "sigmoid",
        inputs: vec![rt(&[7], &mut rng)],
        build: Box::new(|t, ids| {
            let y = t.sigmoid(ids[0])?;
            let sq = t.mul(y, y)?;
            t.sum(sq)
        }),
    });
    cases.push(GradCase {
        name: "layer_norm",
        inputs: vec![rt(&[3, 5], &mut rng)],
        build: Box::new(|t, ids| {
            let y = t.layer_norm(ids[0], 1e-5)?;
            let w = t.gelu(y)?;
            t.sum(w)
        }),
    });
    cases.push(GradCase {
        name: "softmax_lastdim",
        inputs: vec![rt(&[3, 5], &mut rng)],
        build: Box::new(|t, ids| {
            let y = t.softmax_lastdim(ids[0])?;
            let sq = t.mul(y, y)?;
            t.sum(sq)
        }),
    });
    cases.push(GradCase {
        name: "linear",
        inputs: vec![rt(&[4, 3], &mut rng), rt(&[5, 3], &mut rng), rt(&[5], &mut rng)],
        build: Box::new(|t, ids| {
            let y = t.linear(ids[0], ids[1], ids[2])?;
            let g = t.gelu(y)?;
            t.sum(g)
        }),
    });
    cases.push(GradCase {
        name: "matmul",
        inputs: vec![rt(&[3, 4], &mut rng), rt(&[4, 5], &mut rng)],
        build: Box::new(|t, ids| {
            let y = t.matmul(ids[0], ids[1], false)?;
            let sq = t.mul(y, y)?;
            t.sum(sq)
        }),
    });
    cases.push(GradCase {
        name: "matmul_tb",
        inputs: vec![rt(&[3, 4], &mut rng), rt(&[5, 4], &mut rng)],
        build: Box::new(|t, ids| {
            let y = t.matmul(ids[0], ids[1], true)?;
            let sq = t.mul(y, y)?;
            t.sum(sq)
        }),
    });
    cases.push(GradCase {
        name: "batch_matmul",
        inputs: vec![rt(&[2, 3, 2], &mut rng), rt(&[2, 2, 4], &mut rng)],
        build: Box::new(|t, ids| {
            let y = t.batch_matmul(ids[0], ids[1], false)?;
            let sq = t.mul(y, y)?;
            t.sum(sq)
        }),
    });
    cases.push(GradCase {
        name: "batch_matmul_tb",
        inputs: vec![rt(&[2, 3, 2], &mut rng), rt(&[2, 4, 2], &mut rng)],
        build: Box::new(|t, ids| {
            let y = t.batch_matmul(ids[0], ids[1], true)?;
            let sq = t.mul(y, y)?;
            t.sum(sq)
        }),
    });
    cases.push(GradCase {
        name: "transpose2d",
        inputs: vec![rt(&[3, 4], &mut rng)],
        build: Box::new(|t, ids| {
            let y = t.transpose2d(ids[0])?;
            let g = t.gelu(y)?;
            t.sum(g)
        }),
    });
    cases.push(GradCase {
        name: "batch_transpose",
        inputs: vec![rt(&[2, 3, 4], &mut rng)],
        build: Box::new(|t, ids| {
            let y = t.batch_transpose(ids[0])?;
            let g = t.gelu(y)?;
            t.sum(g)
        }),
    });
    cases.push(GradCase {
        name: "reshape",
        inputs: vec![rt(&[3, 4], &mut rng)],
        build: Box::new(|t, ids| {
            let y = t.reshape(ids[0], vec![2, 6])?;
            let g = t.gelu(y)?;
            t.sum(g)
        }),
    });
    cases.push(GradCase {
        name: "conv2d",
        inputs: vec![rt(&[1, 2, 4, 4], &mut rng), rt(&[2, 2, 3, 3], &mut rng)],
        build: Box::new(|t, ids| {
            let y = t.conv2d(ids[0], ids[1], 1, 1)?;
            let g = t.gelu(y)?;
            t.sum(g)
        }),
    });
    cases.push(GradCase {
        name: "conv2d_strided",
        inputs: vec![rt(&[1, 1, 6, 6], &mut rng), rt(&[2, 1, 3, 3], &mut rng)],
        build: Box::new(|t, ids| {
            let y = t.conv2d(ids[0], ids[1], 2, 1)?;
            let sq = t.mul(y, y)?;
            t.sum(sq)
        }),
    });
    cases.push(GradCase {
        name: "bias_add_channel",
        inputs: vec![rt(&[1, 3, 3, 3], &mut rng), rt(&[3], &mut rng)],
        build: Box::new(|t, ids| {
            let y = t.bias_add_channel(ids[0], ids[1])?;
            let g = t.gelu(y)?;
            t.sum(g)
        }),
    });
    cases.push(GradCase {
        name: "sum",
        inputs: vec![rt(&[6], &mut rng)],
        build: Box::new(|t, ids| t.sum(ids[0])),
    });
    cases.push(GradCase {
        name: "mean",
        inputs: vec![rt(&[6], &mut rng)],
        build: Box::new(|t, ids| {
            let m = t.mean(ids[0])?;
            let sq = t.mul(m, m)?;
            t.sum(sq)
        }),
    });
    cases.push(GradCase {
        name: "l1_norm",
        inputs: vec![rt(&[6], &mut rng)],
        build: Box::new(|t, ids| t.l1_norm(ids[0])),
    });
    cases.push(GradCase {
        name: "concat_dim1",
        inputs: vec![rt(&[2, 2, 2, 2], &mut rng), rt(&[2, 3, 2, 2], &mut rng)],
        build: Box::new(|t, ids| {
            let y = t.concat_dim1(&[ids[0], ids[1]])?;
            let g = t.gelu(y)?;
            t.sum(g)
        }),
    });
    cases.push(GradCase {
        name: "bilinear_warp",
        inputs: vec![rt(&[1, 2, 3, 3], &mut rng), {
            // keep flows fractional and interior so FD stays off kinks
            let mut rng2 = Rng::new(99);
            let data: Vec<f64> = (0..18).map(|_| rng2.uniform(-0.4, 0.4) + 0.23).collect();
            Tensor::new(vec![1, 2, 3, 3], data).unwrap().with_grad()
        }],
        build: Box::new(|t, ids| {
            let (y, _) = t.bilinear_warp(ids[0], ids[1])?;
            let sq = t.mul(y, y)?;
            t.sum(sq)
        }),
    });
    cases.push(GradCase {
        name: "upsample_bilinear",
        inputs: vec![rt(&[1, 2, 3, 3], &mut rng)],
        build: Box::new(|t, ids| {
            let y = t.upsample_bilinear(ids[0], 2)?;
            let sq = t.mul(y, y)?;
            t.sum(sq)
        }),
    });
    cases.push(GradCase {
        name: "gather_windows",
        inputs: vec![rt(&[1, 2, 4, 4], &mut rng)],
        build: Box::new(|t, ids| {
            let (y, _) = t.gather_windows(ids[0], &[(0, 0), (2, 2), (3, 1)], 3)?;
            let g = t.gelu(y)?;
            t.sum(g)
        }),
    });
    cases.push(GradCase {
        name: "expand_to_windows",
        inputs: vec![rt(&[1, 2, 2, 2], &mut rng)],
        build: Box::new(|t, ids| {
            let y = t.expand_to_windows(ids[0], 3)?;
            let g = t.gelu(y)?;
            t.sum(g)
        }),
    });
    cases.push(GradCase {
        name: "tile_windows",
        inputs: vec![rt(&[4, 1, 3, 3], &mut rng)],
        build: Box::new(|t, ids| {
            let y = t.tile_windows(ids[0], 2, 2)?;
            let g = t.gelu(y)?;
            t.sum(g)
        }),
    });
    cases.push(GradCase {
        name: "untile_windows",
        inputs: vec![rt(&[1, 1, 6, 6], &mut rng)],
        build: Box::new(|t, ids| {
            let y = t.untile_windows(ids[0], 3)?;
            let g = t.gelu(y)?;
            t.sum(g)
        }),
    });
    cases.push(GradCase {
        name: "crop2d",
        inputs: vec![rt(&[1, 2, 4, 4], &mut rng)],
        build: Box::new(|t, ids| {
            let y = t.crop2d(ids[0], 3, 2)?;
            let g = t.gelu(y)?;
            t.sum(g)
        }),
    });
    cases.push(GradCase {
        name: "minmax_norm_per_window",
        inputs: vec![rt(&[2, 8], &mut rng)],
        build: Box::new(|t, ids| {
            let a = t.abs(ids[0])?;
            let y = t.minmax_norm_per_window(a)?;
            let sq = t.mul(y, y)?;
            t.sum(sq)
        }),
    });
    cases
}

