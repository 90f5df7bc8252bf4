//! Reverse-mode autodiff over a fixed primitive set.
//!
//! A [`Tape`] records every executed primitive in order; [`Tape::backward`]
//! replays the record in reverse, visiting each node exactly once. Nodes are
//! immutable after the forward pass. All primitives check their outputs for
//! NaN/Inf and fail rather than propagate poison.

use crate::error::{CrftError, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

/// The recorded primitive behind a node.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    /// out = mul * x + add (compile-time constants, not nodes)
    ScalarAffine { x: TensorId, mul: f64, add: f64 },
    /// out = x * s where s is a scalar node (shape [1])
    MulScalar { x: TensorId, s: TensorId },
    Abs { x: TensorId },
    Relu { x: TensorId },
    Gelu { x: TensorId },
    Sigmoid { x: TensorId },
    /// normalize over the last dimension, no affine part
    LayerNorm { x: TensorId, eps: f64 },
    SoftmaxLastDim { x: TensorId },
    /// y = x·Wᵀ + b over the last dimension
    Linear { x: TensorId, w: TensorId, b: TensorId },
    /// 2-d matmul, optionally transposing b
    Matmul { a: TensorId, b: TensorId, tb: bool },
    /// batched 3-d matmul [B,M,K]·[B,K,N], optionally transposing b per batch
    BatchMatmul { a: TensorId, b: TensorId, tb: bool },
    Transpose2d { x: TensorId },
    BatchTranspose { x: TensorId },
    Reshape { x: TensorId },
    Conv2d { input: TensorId, kernel: TensorId, stride: usize, padding: usize },
    /// out[n,c,h,w] = x[n,c,h,w] + b[c]
    BiasAddChannel { x: TensorId, b: TensorId },
    Sum { x: TensorId },
    Mean { x: TensorId },
    /// concatenate along dimension 1 (channels of NCHW, tokens of [B,T,C])
    ConcatDim1 { xs: Vec<TensorId> },
    /// bilinear warp of f by flow on f's own lattice (border clamp)
    BilinearWarp { f: TensorId, flow: TensorId },
    UpsampleBilinear { x: TensorId, factor: usize },
    /// window extraction around integer centers, zero padded out of bounds
    GatherWindows { x: TensorId, centers: Vec<(i64, i64)>, win: usize },
    /// broadcast each source cell to a win×win window
    ExpandToWindows { x: TensorId, win: usize },
    /// lay [K,C,w,w] windows side by side on a (grid_h·w)×(grid_w·w) lattice
    TileWindows { x: TensorId, grid_h: usize, grid_w: usize },
    /// inverse of TileWindows
    UntileWindows { x: TensorId, win: usize },
    /// top-left crop of an NCHW map
    Crop2d { x: TensorId, h: usize, w: usize },
    /// per-window min-max rescale into [0,1]; zero-range windows map to zero.
    /// (imin, imax, range) per window is frozen at forward time for backward.
    MinMaxNormPerWindow { x: TensorId, stats: Vec<(usize, usize, f64)> },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed primitives with enough state to replay
/// gradients in reverse.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn ensure_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CrftError::NonFinite { op })
    }
}

/// General 2-d matmul into `out`: logical A is m×k, logical B is k×n;
/// `ta`/`tb` mark transposed storage.
pub(crate) fn mm(
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    out: &mut [f64],
) {
    debug_assert_eq!(out.len(), m * n);
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let out_row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let b_row = &b[p * n..(p + 1) * n];
                    for (o, &bv) in out_row.iter_mut().zip(b_row) {
                        *o += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            // B stored [n,k]; four independent dot accumulators per block
            // keep the FMA pipeline busy.
            for i in 0..m {
                let a_row = &a[i * k..(i + 1) * k];
                let out_row = &mut out[i * n..(i + 1) * n];
                let mut j = 0;
                while j + 4 <= n {
                    let b0 = &b[j * k..(j + 1) * k];
                    let b1 = &b[(j + 1) * k..(j + 2) * k];
                    let b2 = &b[(j + 2) * k..(j + 3) * k];
                    let b3 = &b[(j + 3) * k..(j + 4) * k];
                    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
                    for (p, &av) in a_row.iter().enumerate() {
                        s0 += av * b0[p];
                        s1 += av * b1[p];
                        s2 += av * b2[p];
                        s3 += av * b3[p];
                    }
                    out_row[j] += s0;
                    out_row[j + 1] += s1;
                    out_row[j + 2] += s2;
                    out_row[j + 3] += s3;
                    j += 4;
                }
                while j < n {
                    let b_row = &b[j * k..(j + 1) * k];
                    let mut acc = 0.0;
                    for (&x, &y) in a_row.iter().zip(b_row) {
                        acc += x * y;
                    }
                    out_row[j] += acc;
                    j += 1;
                }
            }
        }
        (true, false) => {
            // A stored [k,m].
            for p in 0..k {
                let a_row = &a[p * m..(p + 1) * m];
                let b_row = &b[p * n..(p + 1) * n];
                for (i, &av) in a_row.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let out_row = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in out_row.iter_mut().zip(b_row) {
                        *o += av * bv;
                    }
                }
            }
        }
        (true, true) => {
            // A stored [k,m], B stored [n,k].
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += a[p * m + i] * b[j * k + p];
                    }
                    out[i * n + j] += acc;
                }
            }
        }
    }
}

/// Output spatial size of a convolution along one axis.
fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Valid output-x range [lo, hi) such that ix = ox·stride + kx − pad stays
/// inside [0, w) — precomputed per kernel column so the inner loops carry no
/// bounds logic.
#[inline]
fn ox_range(ow: usize, w: usize, stride: usize, kx: usize, pad: usize) -> (usize, usize) {
    // smallest ox with ox·stride + kx ≥ pad
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    // largest exclusive ox with ox·stride + kx − pad < w
    let hi = if w + pad > kx {
        ((w + pad - kx - 1) / stride + 1).min(ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    input: &[f64],
    kernel: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut [f64],
) {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    for ni in 0..n {
        for co in 0..cout {
            let out_plane = &mut out[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow];
            for ci in 0..cin {
                let in_plane = &input[(ni * cin + ci) * h * w..(ni * cin + ci + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wgt = kernel[((co * cin + ci) * kh + ky) * kw + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        let (lo, hi) = ox_range(ow, w, stride, kx, pad);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as i64 - pad as i64;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            let in_row = &in_plane[iy as usize * w..(iy as usize + 1) * w];
                            let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                let shift = kx as i64 - pad as i64;
                                let src = &in_row[(lo as i64 + shift) as usize
                                    ..(hi as i64 + shift) as usize];
                                for (o, &iv) in out_row[lo..hi].iter_mut().zip(src) {
                                    *o += wgt * iv;
                                }
                            } else {
                                for ox in lo..hi {
                                    let ix = ox * stride + kx - pad;
                                    out_row[ox] += wgt * in_row[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear sample with border clamp; returns (value, corner data for grads).
#[inline]
fn bilinear_sample(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let yc = y.clamp(0.0, (h - 1) as f64);
    let xc = x.clamp(0.0, (w - 1) as f64);
    let y0 = yc.floor();
    let x0 = xc.floor();
    let dy = yc - y0;
    let dx = xc - x0;
    let y0i = y0 as usize;
    let x0i = x0 as usize;
    let y1i = (y0i + 1).min(h - 1);
    let x1i = (x0i + 1).min(w - 1);
    let f00 = plane[y0i * w + x0i];
    let f01 = plane[y0i * w + x1i];
    let f10 = plane[y1i * w + x0i];
    let f11 = plane[y1i * w + x1i];
    (1.0 - dy) * ((1.0 - dx) * f00 + dx * f01) + dy * ((1.0 - dx) * f10 + dx * f11)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        self.grads.push(None);
        id
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Enter an owned tensor as a leaf. Gradient tracking follows the
    /// tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad,
        )
    }

    /// Enter raw data as a non-differentiable constant.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CrftError::ShapeMismatch {
                op: "constant",
                detail: format!("shape {:?} vs {} values", shape, data.len()),
            });
        }
        ensure_finite(&data, "constant")?;
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Copy a node out into an owned tensor.
    pub fn tensor(&self, id: TensorId) -> Tensor {
        Tensor::new(self.shape(id).to_vec(), self.data(id).to_vec())
            .expect("tape nodes are well-formed")
    }

    // ---- elementwise ----------------------------------------------------

    fn binary_same_shape(
        &mut self,
        a: TensorId,
        b: TensorId,
        op_name: &'static str,
    ) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(CrftError::ShapeMismatch {
                op: op_name,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "add")?;
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        ensure_finite(&data, "add")?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "sub")?;
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        ensure_finite(&data, "sub")?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::Sub { a, b }, ng))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "mul")?;
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        ensure_finite(&data, "mul")?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::Mul { a, b }, ng))
    }

    pub fn scalar_affine(&mut self, x: TensorId, mul: f64, add: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.data(x).iter().map(|v| mul * v + add).collect();
        ensure_finite(&data, "scalar_affine")?;
        let ng = self.needs(x);
        Ok(self.push(
            self.nodes[x.0].shape.clone(),
            data,
            Op::ScalarAffine { x, mul, add },
            ng,
        ))
    }

    /// Multiply a tensor by a scalar node (shape [1]).
    pub fn mul_scalar(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        if self.shape(s) != [1] {
            return Err(CrftError::ShapeMismatch {
                op: "mul_scalar",
                detail: format!("scalar operand has shape {:?}", self.shape(s)),
            });
        }
        let sv = self.data(s)[0];
        let data: Vec<f64> = self.data(x).iter().map(|v| v * sv).collect();
        ensure_finite(&data, "mul_scalar")?;
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(self.nodes[x.0].shape.clone(), data, Op::MulScalar { x, s }, ng))
    }

    pub fn abs(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.abs()).collect();
        let ng = self.needs(x);
        Ok(self.push(self.nodes[x.0].shape.clone(), data, Op::Abs { x }, ng))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let ng = self.needs(x);
        Ok(self.push(self.nodes[x.0].shape.clone(), data, Op::Relu { x }, ng))
    }

    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.data(x).iter().map(|&v| gelu_tanh(v)).collect();
        ensure_finite(&data, "gelu")?;
        let ng = self.needs(x);
        Ok(self.push(self.nodes[x.0].shape.clone(), data, Op::Gelu { x }, ng))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        let ng = self.needs(x);
        Ok(self.push(self.nodes[x.0].shape.clone(), data, Op::Sigmoid { x }, ng))
    }

    pub fn layer_norm(&mut self, x: TensorId, eps: f64) -> Result<TensorId> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().ok_or_else(|| CrftError::ShapeMismatch {
            op: "layer_norm",
            detail: "zero-dimensional input".into(),
        })?;
        let xd = self.data(x);
        let mut data = vec![0.0; xd.len()];
        for (src, dst) in xd.chunks_exact(d).zip(data.chunks_exact_mut(d)) {
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = (v - mean) * inv;
            }
        }
        ensure_finite(&data, "layer_norm")?;
        let ng = self.needs(x);
        Ok(self.push(shape, data, Op::LayerNorm { x, eps }, ng))
    }

    /// Numerically stable softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().ok_or_else(|| CrftError::ShapeMismatch {
            op: "softmax_lastdim",
            detail: "zero-dimensional input".into(),
        })?;
        if d == 0 {
            return Err(CrftError::ShapeMismatch {
                op: "softmax_lastdim",
                detail: "empty last dimension".into(),
            });
        }
        let xd = self.data(x);
        let mut data = vec![0.0; xd.len()];
        for (src, dst) in xd.chunks_exact(d).zip(data.chunks_exact_mut(d)) {
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (o, &v) in dst.iter_mut().zip(src) {
                let e = (v - max).exp();
                *o = e;
                denom += e;
            }
            for o in dst.iter_mut() {
                *o /= denom;
            }
        }
        ensure_finite(&data, "softmax_lastdim")?;
        let ng = self.needs(x);
        Ok(self.push(shape, data, Op::SoftmaxLastDim { x }, ng))
    }

    // ---- linear algebra --------------------------------------------------

    /// y[..., o] = Σ_i x[..., i]·w[o, i] + b[o]
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        let bs = self.nodes[b.0].shape.clone();
        let cin = *xs.last().ok_or_else(|| CrftError::ShapeMismatch {
            op: "linear",
            detail: "input has no dimensions".into(),
        })?;
        if ws.len() != 2 || ws[1] != cin {
            return Err(CrftError::ShapeMismatch {
                op: "linear",
                detail: format!("weight {:?} incompatible with input inner dim {}", ws, cin),
            });
        }
        let cout = ws[0];
        if bs != [cout] {
            return Err(CrftError::ShapeMismatch {
                op: "linear",
                detail: format!("bias {:?} vs output dim {}", bs, cout),
            });
        }
        let rows = self.data(x).len() / cin;
        let mut data = vec![0.0; rows * cout];
        mm(self.data(x), self.data(w), rows, cin, cout, false, true, &mut data);
        let bd = self.data(b);
        for row in data.chunks_exact_mut(cout) {
            for (o, &bv) in row.iter_mut().zip(bd) {
                *o += bv;
            }
        }
        ensure_finite(&data, "linear")?;
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = cout;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out_shape, data, Op::Linear { x, w, b }, ng))
    }

    /// 2-d matmul a[M,K] · b[K,N] (or b[N,K] with `transpose_b`).
    pub fn matmul(&mut self, a: TensorId, b: TensorId, transpose_b: bool) -> Result<TensorId> {
        let as_ = self.nodes[a.0].shape.clone();
        let bs = self.nodes[b.0].shape.clone();
        if as_.len() != 2 || bs.len() != 2 {
            return Err(CrftError::ShapeMismatch {
                op: "matmul",
                detail: format!("need 2-d operands, got {:?} and {:?}", as_, bs),
            });
        }
        let (m, k) = (as_[0], as_[1]);
        let (n, check) = if transpose_b { (bs[0], bs[1]) } else { (bs[1], bs[0]) };
        if check != k {
            return Err(CrftError::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dims {} vs {}", k, check),
            });
        }
        let mut data = vec![0.0; m * n];
        mm(self.data(a), self.data(b), m, k, n, false, transpose_b, &mut data);
        ensure_finite(&data, "matmul")?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], data, Op::Matmul { a, b, tb: transpose_b }, ng))
    }

    /// Batched matmul a[B,M,K] · b[B,K,N] (or b[B,N,K] with `transpose_b`).
    pub fn batch_matmul(&mut self, a: TensorId, b: TensorId, transpose_b: bool) -> Result<TensorId> {
        let as_ = self.nodes[a.0].shape.clone();
        let bs = self.nodes[b.0].shape.clone();
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(CrftError::ShapeMismatch {
                op: "batch_matmul",
                detail: format!("need matching 3-d operands, got {:?} and {:?}", as_, bs),
            });
        }
        let (bt, m, k) = (as_[0], as_[1], as_[2]);
        let (n, check) = if transpose_b { (bs[1], bs[2]) } else { (bs[2], bs[1]) };
        if check != k {
            return Err(CrftError::ShapeMismatch {
                op: "batch_matmul",
                detail: format!("inner dims {} vs {}", k, check),
            });
        }
        let mut data = vec![0.0; bt * m * n];
        for i in 0..bt {
            mm(
                &self.data(a)[i * m * k..(i + 1) * m * k],
                &self.data(b)[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                false,
                transpose_b,
                &mut data[i * m * n..(i + 1) * m * n],
            );
        }
        ensure_finite(&data, "batch_matmul")?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            vec![bt, m, n],
            data,
            Op::BatchMatmul { a, b, tb: transpose_b },
            ng,
        ))
    }

    pub fn transpose2d(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 2 {
            return Err(CrftError::ShapeMismatch {
                op: "transpose2d",
                detail: format!("need 2-d input, got {:?}", xs),
            });
        }
        let (m, n) = (xs[0], xs[1]);
        let xd = self.data(x);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = xd[i * n + j];
            }
        }
        let ng = self.needs(x);
        Ok(self.push(vec![n, m], data, Op::Transpose2d { x }, ng))
    }

    pub fn batch_transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 3 {
            return Err(CrftError::ShapeMismatch {
                op: "batch_transpose",
                detail: format!("need 3-d input, got {:?}", xs),
            });
        }
        let (b, m, n) = (xs[0], xs[1], xs[2]);
        let xd = self.data(x);
        let mut data = vec![0.0; b * m * n];
        for bi in 0..b {
            let src = &xd[bi * m * n..(bi + 1) * m * n];
            let dst = &mut data[bi * m * n..(bi + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(vec![b, n, m], data, Op::BatchTranspose { x }, ng))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() {
            return Err(CrftError::ShapeMismatch {
                op: "reshape",
                detail: format!(
                    "cannot view {} elements as {:?}",
                    self.data(x).len(),
                    shape
                ),
            });
        }
        let data = self.data(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(shape, data, Op::Reshape { x }, ng))
    }

    // ---- convolution ------------------------------------------------------

    /// Cross-correlation conv2d: input[N,Cin,H,W] * kernel[Cout,Cin,kh,kw].
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let is = self.nodes[input.0].shape.clone();
        let ks = self.nodes[kernel.0].shape.clone();
        if is.len() != 4 {
            return Err(CrftError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input must be [N,Cin,H,W], got {:?}", is),
            });
        }
        if ks.len() != 4 {
            return Err(CrftError::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel must be [Cout,Cin,kh,kw], got {:?}", ks),
            });
        }
        let (n, cin, h, w) = (is[0], is[1], is[2], is[3]);
        let (cout, kcin, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kcin != cin {
            return Err(CrftError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input channels {} vs kernel channels {}", cin, kcin),
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(CrftError::InvalidArgument(format!(
                "conv2d: kernel dims must be odd, got {}x{}",
                kh, kw
            )));
        }
        if stride < 1 {
            return Err(CrftError::InvalidArgument("conv2d: stride must be >= 1".into()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(CrftError::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "padded input {}x{} smaller than kernel {}x{}",
                    h + 2 * padding,
                    w + 2 * padding,
                    kh,
                    kw
                ),
            });
        }
        let oh = conv_out_dim(h, kh, stride, padding);
        let ow = conv_out_dim(w, kw, stride, padding);
        let mut data = vec![0.0; n * cout * oh * ow];
        conv2d_forward(
            self.data(input),
            self.data(kernel),
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            padding,
            &mut data,
        );
        ensure_finite(&data, "conv2d")?;
        let ng = self.needs(input) || self.needs(kernel);
        Ok(self.push(
            vec![n, cout, oh, ow],
            data,
            Op::Conv2d { input, kernel, stride, padding },
            ng,
        ))
    }

    pub fn bias_add_channel(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let xs = self.nodes[x.0].shape.clone();
        let bs = self.nodes[b.0].shape.clone();
        if xs.len() != 4 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(CrftError::ShapeMismatch {
                op: "bias_add_channel",
                detail: format!("map {:?} vs bias {:?}", xs, bs),
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let mut data = self.data(x).to_vec();
        let bd = self.data(b).to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let bv = bd[ci];
                for v in &mut data[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w] {
                    *v += bv;
                }
            }
        }
        ensure_finite(&data, "bias_add_channel")?;
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(xs, data, Op::BiasAddChannel { x, b }, ng))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let s: f64 = self.data(x).iter().sum();
        ensure_finite(&[s], "sum")?;
        let ng = self.needs(x);
        Ok(self.push(vec![1], vec![s], Op::Sum { x }, ng))
    }

    pub fn mean(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.data(x).len();
        if n == 0 {
            return Err(CrftError::ShapeMismatch {
                op: "mean",
                detail: "empty input".into(),
            });
        }
        let s: f64 = self.data(x).iter().sum::<f64>() / n as f64;
        ensure_finite(&[s], "mean")?;
        let ng = self.needs(x);
        Ok(self.push(vec![1], vec![s], Op::Mean { x }, ng))
    }

    /// Σ|x|, composed from the abs and sum primitives.
    pub fn l1_norm(&mut self, x: TensorId) -> Result<TensorId> {
        let a = self.abs(x)?;
        self.sum(a)
    }

    pub fn concat_dim1(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(CrftError::InvalidArgument("concat_dim1: no inputs".into()));
        }
        let first = self.nodes[xs[0].0].shape.clone();
        if first.len() < 2 {
            return Err(CrftError::ShapeMismatch {
                op: "concat_dim1",
                detail: format!("need at least 2 dims, got {:?}", first),
            });
        }
        let outer = first[0];
        let inner: usize = first[2..].iter().product();
        let mut total_c = 0usize;
        for &x in xs {
            let s = &self.nodes[x.0].shape;
            if s.len() != first.len()
                || s[0] != outer
                || s[2..] != first[2..]
            {
                return Err(CrftError::ShapeMismatch {
                    op: "concat_dim1",
                    detail: format!("{:?} vs {:?}", s, first),
                });
            }
            total_c += s[1];
        }
        let mut data = vec![0.0; outer * total_c * inner];
        let out_stride = total_c * inner;
        let mut offset = 0usize;
        for &x in xs {
            let c = self.nodes[x.0].shape[1];
            let block = c * inner;
            let xd = self.data(x);
            for o in 0..outer {
                data[o * out_stride + offset..o * out_stride + offset + block]
                    .copy_from_slice(&xd[o * block..(o + 1) * block]);
            }
            offset += block;
        }
        let mut shape = first;
        shape[1] = total_c;
        let ng = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(shape, data, Op::ConcatDim1 { xs: xs.to_vec() }, ng))
    }

    // ---- geometric ----------------------------------------------------------

    /// Bilinear warp: out(p) = f sampled at p + flow(p), border-clamped.
    /// Also returns a validity mask, false where the unclamped sample point
    /// fell outside the lattice.
    pub fn bilinear_warp(&mut self, f: TensorId, flow: TensorId) -> Result<(TensorId, Vec<bool>)> {
        let fs = self.nodes[f.0].shape.clone();
        let ls = self.nodes[flow.0].shape.clone();
        if fs.len() != 4 || ls.len() != 4 {
            return Err(CrftError::ShapeMismatch {
                op: "bilinear_warp",
                detail: format!("need 4-d operands, got {:?} and {:?}", fs, ls),
            });
        }
        let (b, c, h, w) = (fs[0], fs[1], fs[2], fs[3]);
        if ls != [b, 2, h, w] {
            return Err(CrftError::ShapeMismatch {
                op: "bilinear_warp",
                detail: format!("flow {:?} vs expected [{},2,{},{}]", ls, b, h, w),
            });
        }
        let fd = self.data(f);
        let ld = self.data(flow);
        let mut data = vec![0.0; b * c * h * w];
        let mut mask = vec![true; b * h * w];
        for bi in 0..b {
            let u = &ld[bi * 2 * h * w..bi * 2 * h * w + h * w];
            let v = &ld[bi * 2 * h * w + h * w..(bi + 1) * 2 * h * w];
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let sx = x as f64 + u[p];
                    let sy = y as f64 + v[p];
                    if sx < 0.0 || sx > (w - 1) as f64 || sy < 0.0 || sy > (h - 1) as f64 {
                        mask[bi * h * w + p] = false;
                    }
                    for ci in 0..c {
                        let plane = &fd[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                        data[(bi * c + ci) * h * w + p] = bilinear_sample(plane, h, w, sy, sx);
                    }
                }
            }
        }
        ensure_finite(&data, "bilinear_warp")?;
        let ng = self.needs(f) || self.needs(flow);
        let id = self.push(fs, data, Op::BilinearWarp { f, flow }, ng);
        Ok((id, mask))
    }

    pub fn upsample_bilinear(&mut self, x: TensorId, factor: usize) -> Result<TensorId> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 {
            return Err(CrftError::ShapeMismatch {
                op: "upsample_bilinear",
                detail: format!("need [N,C,H,W], got {:?}", xs),
            });
        }
        if factor < 1 {
            return Err(CrftError::InvalidArgument(
                "upsample_bilinear: factor must be >= 1".into(),
            ));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h * factor, w * factor);
        let xd = self.data(x);
        let mut data = vec![0.0; n * c * oh * ow];
        let inv = 1.0 / factor as f64;
        for ni in 0..n {
            for ci in 0..c {
                let plane = &xd[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                let out_plane = &mut data[(ni * c + ci) * oh * ow..(ni * c + ci + 1) * oh * ow];
                for oy in 0..oh {
                    let sy = (oy as f64 + 0.5) * inv - 0.5;
                    for ox in 0..ow {
                        let sx = (ox as f64 + 0.5) * inv - 0.5;
                        out_plane[oy * ow + ox] = bilinear_sample(plane, h, w, sy, sx);
                    }
                }
            }
        }
        ensure_finite(&data, "upsample_bilinear")?;
        let ng = self.needs(x);
        Ok(self.push(
            vec![n, c, oh, ow],
            data,
            Op::UpsampleBilinear { x, factor },
            ng,
        ))
    }

    /// Extract win×win windows of x [1,C,H,W] centered at integer positions;
    /// out-of-bounds entries are zero and reported in the validity mask
    /// (len K·win·win).
    pub fn gather_windows(
        &mut self,
        x: TensorId,
        centers: &[(i64, i64)],
        win: usize,
    ) -> Result<(TensorId, Vec<bool>)> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 || xs[0] != 1 {
            return Err(CrftError::ShapeMismatch {
                op: "gather_windows",
                detail: format!("need [1,C,H,W], got {:?}", xs),
            });
        }
        if win % 2 == 0 {
            return Err(CrftError::InvalidArgument(
                "gather_windows: window size must be odd".into(),
            ));
        }
        let (c, h, w) = (xs[1], xs[2], xs[3]);
        let k = centers.len();
        let half = (win / 2) as i64;
        let xd = self.data(x);
        let mut data = vec![0.0; k * c * win * win];
        let mut mask = vec![false; k * win * win];
        for (ki, &(cy, cx)) in centers.iter().enumerate() {
            for i in 0..win {
                let sy = cy + i as i64 - half;
                for j in 0..win {
                    let sx = cx + j as i64 - half;
                    let inside = sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64;
                    mask[(ki * win + i) * win + j] = inside;
                    if inside {
                        for ci in 0..c {
                            data[((ki * c + ci) * win + i) * win + j] =
                                xd[(ci * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
            }
        }
        let ng = self.needs(x);
        let id = self.push(
            vec![k, c, win, win],
            data,
            Op::GatherWindows {
                x,
                centers: centers.to_vec(),
                win,
            },
            ng,
        );
        Ok((id, mask))
    }

    /// Broadcast each cell of x [1,C,Hc,Wc] into a win×win window:
    /// out [Hc·Wc, C, win, win].
    pub fn expand_to_windows(&mut self, x: TensorId, win: usize) -> Result<TensorId> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 || xs[0] != 1 {
            return Err(CrftError::ShapeMismatch {
                op: "expand_to_windows",
                detail: format!("need [1,C,Hc,Wc], got {:?}", xs),
            });
        }
        let (c, hc, wc) = (xs[1], xs[2], xs[3]);
        let k = hc * wc;
        let xd = self.data(x);
        let mut data = vec![0.0; k * c * win * win];
        for ki in 0..k {
            for ci in 0..c {
                let v = xd[ci * k + ki];
                data[(ki * c + ci) * win * win..(ki * c + ci + 1) * win * win].fill(v);
            }
        }
        let ng = self.needs(x);
        Ok(self.push(vec![k, c, win, win], data, Op::ExpandToWindows { x, win }, ng))
    }

    /// Lay windows [K,C,w,w] side by side: out [1,C,grid_h·w,grid_w·w],
    /// window k at tile (k / grid_w, k % grid_w).
    pub fn tile_windows(&mut self, x: TensorId, grid_h: usize, grid_w: usize) -> Result<TensorId> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 || xs[0] != grid_h * grid_w || xs[2] != xs[3] {
            return Err(CrftError::ShapeMismatch {
                op: "tile_windows",
                detail: format!("windows {:?} vs grid {}x{}", xs, grid_h, grid_w),
            });
        }
        let (k, c, win) = (xs[0], xs[1], xs[2]);
        let (oh, ow) = (grid_h * win, grid_w * win);
        let xd = self.data(x);
        let mut data = vec![0.0; c * oh * ow];
        for ki in 0..k {
            let (ty, tx) = (ki / grid_w, ki % grid_w);
            for ci in 0..c {
                for i in 0..win {
                    let dst = ((ci * oh) + ty * win + i) * ow + tx * win;
                    let src = ((ki * c + ci) * win + i) * win;
                    data[dst..dst + win].copy_from_slice(&xd[src..src + win]);
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(
            vec![1, c, oh, ow],
            data,
            Op::TileWindows { x, grid_h, grid_w },
            ng,
        ))
    }

    /// Inverse of [`Tape::tile_windows`].
    pub fn untile_windows(&mut self, x: TensorId, win: usize) -> Result<TensorId> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 || xs[0] != 1 || xs[2] % win != 0 || xs[3] % win != 0 {
            return Err(CrftError::ShapeMismatch {
                op: "untile_windows",
                detail: format!("map {:?} not tileable by {}", xs, win),
            });
        }
        let (c, h, w) = (xs[1], xs[2], xs[3]);
        let (gh, gw) = (h / win, w / win);
        let k = gh * gw;
        let xd = self.data(x);
        let mut data = vec![0.0; k * c * win * win];
        for ki in 0..k {
            let (ty, tx) = (ki / gw, ki % gw);
            for ci in 0..c {
                for i in 0..win {
                    let src = ((ci * h) + ty * win + i) * w + tx * win;
                    let dst = ((ki * c + ci) * win + i) * win;
                    data[dst..dst + win].copy_from_slice(&xd[src..src + win]);
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(vec![k, c, win, win], data, Op::UntileWindows { x, win }, ng))
    }

    pub fn crop2d(&mut self, x: TensorId, h: usize, w: usize) -> Result<TensorId> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 || xs[2] < h || xs[3] < w {
            return Err(CrftError::ShapeMismatch {
                op: "crop2d",
                detail: format!("cannot crop {:?} to {}x{}", xs, h, w),
            });
        }
        let (n, c, ih, iw) = (xs[0], xs[1], xs[2], xs[3]);
        let xd = self.data(x);
        let mut data = vec![0.0; n * c * h * w];
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    let src = ((ni * c + ci) * ih + y) * iw;
                    let dst = ((ni * c + ci) * h + y) * w;
                    data[dst..dst + w].copy_from_slice(&xd[src..src + w]);
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(vec![n, c, h, w], data, Op::Crop2d { x, h, w }, ng))
    }

    /// Per-window min-max rescale of x [K, ...] into [0,1]; windows with zero
    /// (or numerically vanishing) range map to all-zeros.
    pub fn minmax_norm_per_window(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.is_empty() {
            return Err(CrftError::ShapeMismatch {
                op: "minmax_norm_per_window",
                detail: "zero-dimensional input".into(),
            });
        }
        let k = xs[0];
        let per: usize = xs[1..].iter().product();
        let xd = self.data(x);
        let mut data = vec![0.0; xd.len()];
        let mut stats = Vec::with_capacity(k);
        for ki in 0..k {
            let src = &xd[ki * per..(ki + 1) * per];
            let mut imin = 0usize;
            let mut imax = 0usize;
            for (i, &v) in src.iter().enumerate() {
                if v < src[imin] {
                    imin = i;
                }
                if v > src[imax] {
                    imax = i;
                }
            }
            let range = src[imax] - src[imin];
            // vanishing range counts as perfect consistency
            if range < 1e-12 {
                stats.push((imin, imax, 0.0));
                continue;
            }
            let lo = src[imin];
            let inv = 1.0 / range;
            for (o, &v) in data[ki * per..(ki + 1) * per].iter_mut().zip(src) {
                *o = (v - lo) * inv;
            }
            stats.push((imin, imax, range));
        }
        let ng = self.needs(x);
        Ok(self.push(xs, data, Op::MinMaxNormPerWindow { x, stats }, ng))
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar loss; fills gradients for every node with
    /// `needs_grad` on the path. Consumes the tape: a second call without a
    /// fresh forward pass is an error.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.consumed {
            return Err(CrftError::Autodiff(
                "backward called twice on one tape; rebuild the graph first".into(),
            ));
        }
        if self.data(loss).len() != 1 {
            return Err(CrftError::Autodiff(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            let op = self.nodes[i].op.clone();
            self.apply_backward(i, &g, &op);
            // keep leaf/param grads readable after the sweep
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, id: TensorId, contribution: &[f64]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = &mut self.grads[id.0];
        match slot {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contribution) {
                    *a += b;
                }
            }
            None => {
                *slot = Some(contribution.to_vec());
            }
        }
    }

    fn acc_owned(&mut self, id: TensorId, contribution: Vec<f64>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = &mut self.grads[id.0];
        match slot {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contribution) {
                    *a += b;
                }
            }
            None => {
                *slot = Some(contribution);
            }
        }
    }

    fn apply_backward(&mut self, node: usize, g: &[f64], op: &Op) {
        match op {
            Op::Leaf => {}

            Op::Add { a, b } => {
                self.acc(*a, g);
                self.acc(*b, g);
            }
            Op::Sub { a, b } => {
                self.acc(*a, g);
                if self.needs(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.acc_owned(*b, neg);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let da: Vec<f64> = g.iter().zip(self.data(*b)).map(|(gv, bv)| gv * bv).collect();
                    self.acc_owned(*a, da);
                }
                if self.needs(*b) {
                    let db: Vec<f64> = g.iter().zip(self.data(*a)).map(|(gv, av)| gv * av).collect();
                    self.acc_owned(*b, db);
                }
            }
            Op::ScalarAffine { x, mul, .. } => {
                if self.needs(*x) {
                    let dx: Vec<f64> = g.iter().map(|gv| gv * mul).collect();
                    self.acc_owned(*x, dx);
                }
            }
            Op::MulScalar { x, s } => {
                let sv = self.data(*s)[0];
                if self.needs(*x) {
                    let dx: Vec<f64> = g.iter().map(|gv| gv * sv).collect();
                    self.acc_owned(*x, dx);
                }
                if self.needs(*s) {
                    let ds: f64 = g.iter().zip(self.data(*x)).map(|(gv, xv)| gv * xv).sum();
                    self.acc_owned(*s, vec![ds]);
                }
            }
            Op::Abs { x } => {
                if self.needs(*x) {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(self.data(*x))
                        .map(|(gv, xv)| gv * if *xv > 0.0 { 1.0 } else if *xv < 0.0 { -1.0 } else { 0.0 })
                        .collect();
                    self.acc_owned(*x, dx);
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(self.data(*x))
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    self.acc_owned(*x, dx);
                }
            }
            Op::Gelu { x } => {
                if self.needs(*x) {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(self.data(*x))
                        .map(|(gv, &xv)| gv * gelu_tanh_derivative(xv))
                        .collect();
                    self.acc_owned(*x, dx);
                }
            }
            Op::Sigmoid { x } => {
                if self.needs(*x) {
                    let out = &self.nodes[node].data;
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(out)
                        .map(|(gv, &s)| gv * s * (1.0 - s))
                        .collect();
                    self.acc_owned(*x, dx);
                }
            }
            Op::LayerNorm { x, eps } => {
                if self.needs(*x) {
                    let d = *self.nodes[node].shape.last().unwrap();
                    let xd = self.data(*x);
                    let mut dx = vec![0.0; xd.len()];
                    for (slice_idx, src) in xd.chunks_exact(d).enumerate() {
                        let gs = &g[slice_idx * d..(slice_idx + 1) * d];
                        let mean = src.iter().sum::<f64>() / d as f64;
                        let var =
                            src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = src.iter().map(|v| (v - mean) * inv).collect();
                        let g_mean = gs.iter().sum::<f64>() / d as f64;
                        let gx_mean =
                            gs.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[slice_idx * d + j] = inv * (gs[j] - g_mean - xhat[j] * gx_mean);
                        }
                    }
                    self.acc_owned(*x, dx);
                }
            }
            Op::SoftmaxLastDim { x } => {
                if self.needs(*x) {
                    let d = *self.nodes[node].shape.last().unwrap();
                    let out = &self.nodes[node].data;
                    let mut dx = vec![0.0; out.len()];
                    for si in 0..out.len() / d {
                        let s = &out[si * d..(si + 1) * d];
                        let gs = &g[si * d..(si + 1) * d];
                        let dot: f64 = s.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx[si * d + j] = s[j] * (gs[j] - dot);
                        }
                    }
                    self.acc_owned(*x, dx);
                }
            }
            Op::Linear { x, w, b } => {
                let cin = *self.nodes[x.0].shape.last().unwrap();
                let cout = self.nodes[w.0].shape[0];
                let rows = self.data(*x).len() / cin;
                if self.needs(*x) {
                    let mut dx = vec![0.0; rows * cin];
                    mm(g, self.data(*w), rows, cout, cin, false, false, &mut dx);
                    self.acc_owned(*x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; cout * cin];
                    mm(g, self.data(*x), cout, rows, cin, true, false, &mut dw);
                    self.acc_owned(*w, dw);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; cout];
                    for row in g.chunks_exact(cout) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    self.acc_owned(*b, db);
                }
            }
            Op::Matmul { a, b, tb } => {
                let m = self.nodes[a.0].shape[0];
                let k = self.nodes[a.0].shape[1];
                let n = self.nodes[node].shape[1];
                if !tb {
                    if self.needs(*a) {
                        let mut da = vec![0.0; m * k];
                        mm(g, self.data(*b), m, n, k, false, true, &mut da);
                        self.acc_owned(*a, da);
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; k * n];
                        mm(self.data(*a), g, k, m, n, true, false, &mut db);
                        self.acc_owned(*b, db);
                    }
                } else {
                    // out = A · Bᵀ with B stored [n,k]
                    if self.needs(*a) {
                        let mut da = vec![0.0; m * k];
                        mm(g, self.data(*b), m, n, k, false, false, &mut da);
                        self.acc_owned(*a, da);
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; n * k];
                        mm(g, self.data(*a), n, m, k, true, false, &mut db);
                        self.acc_owned(*b, db);
                    }
                }
            }
            Op::BatchMatmul { a, b, tb } => {
                let bt = self.nodes[a.0].shape[0];
                let m = self.nodes[a.0].shape[1];
                let k = self.nodes[a.0].shape[2];
                let n = self.nodes[node].shape[2];
                let need_a = self.needs(*a);
                let need_b = self.needs(*b);
                let mut da = if need_a { vec![0.0; bt * m * k] } else { Vec::new() };
                let mut db = if need_b {
                    vec![0.0; self.data(*b).len()]
                } else {
                    Vec::new()
                };
                for i in 0..bt {
                    let gs = &g[i * m * n..(i + 1) * m * n];
                    if !tb {
                        if need_a {
                            mm(
                                gs,
                                &self.data(*b)[i * k * n..(i + 1) * k * n],
                                m,
                                n,
                                k,
                                false,
                                true,
                                &mut da[i * m * k..(i + 1) * m * k],
                            );
                        }
                        if need_b {
                            mm(
                                &self.data(*a)[i * m * k..(i + 1) * m * k],
                                gs,
                                k,
                                m,
                                n,
                                true,
                                false,
                                &mut db[i * k * n..(i + 1) * k * n],
                            );
                        }
                    } else {
                        if need_a {
                            mm(
                                gs,
                                &self.data(*b)[i * n * k..(i + 1) * n * k],
                                m,
                                n,
                                k,
                                false,
                                false,
                                &mut da[i * m * k..(i + 1) * m * k],
                            );
                        }
                        if need_b {
                            mm(
                                gs,
                                &self.data(*a)[i * m * k..(i + 1) * m * k],
                                n,
                                m,
                                k,
                                true,
                                false,
                                &mut db[i * n * k..(i + 1) * n * k],
                            );
                        }
                    }
                }
                if need_a {
                    self.acc_owned(*a, da);
                }
                if need_b {
                    self.acc_owned(*b, db);
                }
            }
            Op::Transpose2d { x } => {
                if self.needs(*x) {
                    let n = self.nodes[node].shape[0];
                    let m = self.nodes[node].shape[1];
                    let mut dx = vec![0.0; m * n];
                    for i in 0..n {
                        for j in 0..m {
                            dx[j * n + i] = g[i * m + j];
                        }
                    }
                    self.acc_owned(*x, dx);
                }
            }
            Op::BatchTranspose { x } => {
                if self.needs(*x) {
                    let b = self.nodes[node].shape[0];
                    let n = self.nodes[node].shape[1];
                    let m = self.nodes[node].shape[2];
                    let mut dx = vec![0.0; b * m * n];
                    for bi in 0..b {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let ds = &mut dx[bi * m * n..(bi + 1) * m * n];
                        for i in 0..n {
                            for j in 0..m {
                                ds[j * n + i] = gs[i * m + j];
                            }
                        }
                    }
                    self.acc_owned(*x, dx);
                }
            }
            Op::Reshape { x } => {
                self.acc(*x, g);
            }
            Op::Conv2d { input, kernel, stride, padding } => {
                let is = self.nodes[input.0].shape.clone();
                let ks = self.nodes[kernel.0].shape.clone();
                let (n, cin, h, w) = (is[0], is[1], is[2], is[3]);
                let (cout, _, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
                let oh = self.nodes[node].shape[2];
                let ow = self.nodes[node].shape[3];
                let (stride, pad) = (*stride, *padding);

                if self.needs(*input) {
                    let kd = self.data(*kernel).to_vec();
                    let mut dinput = vec![0.0; n * cin * h * w];
                    for ni in 0..n {
                        for co in 0..cout {
                            let g_plane = &g[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow];
                            for ci in 0..cin {
                                let d_plane = &mut dinput
                                    [(ni * cin + ci) * h * w..(ni * cin + ci + 1) * h * w];
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let wgt = kd[((co * cin + ci) * kh + ky) * kw + kx];
                                        if wgt == 0.0 {
                                            continue;
                                        }
                                        let (lo, hi) = ox_range(ow, w, stride, kx, pad);
                                        if lo >= hi {
                                            continue;
                                        }
                                        for oy in 0..oh {
                                            let iy = (oy * stride + ky) as i64 - pad as i64;
                                            if iy < 0 || iy >= h as i64 {
                                                continue;
                                            }
                                            let d_row = &mut d_plane
                                                [iy as usize * w..(iy as usize + 1) * w];
                                            let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                                            if stride == 1 {
                                                let shift = kx as i64 - pad as i64;
                                                let dst = &mut d_row[(lo as i64 + shift) as usize
                                                    ..(hi as i64 + shift) as usize];
                                                for (d, &gv) in dst.iter_mut().zip(&g_row[lo..hi]) {
                                                    *d += wgt * gv;
                                                }
                                            } else {
                                                for ox in lo..hi {
                                                    let ix = ox * stride + kx - pad;
                                                    d_row[ix] += wgt * g_row[ox];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.acc_owned(*input, dinput);
                }
                if self.needs(*kernel) {
                    let id = self.data(*input).to_vec();
                    let mut dkernel = vec![0.0; cout * cin * kh * kw];
                    for ni in 0..n {
                        for co in 0..cout {
                            let g_plane = &g[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow];
                            for ci in 0..cin {
                                let in_plane =
                                    &id[(ni * cin + ci) * h * w..(ni * cin + ci + 1) * h * w];
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let (lo, hi) = ox_range(ow, w, stride, kx, pad);
                                        if lo >= hi {
                                            continue;
                                        }
                                        let mut acc = 0.0;
                                        for oy in 0..oh {
                                            let iy = (oy * stride + ky) as i64 - pad as i64;
                                            if iy < 0 || iy >= h as i64 {
                                                continue;
                                            }
                                            let in_row = &in_plane
                                                [iy as usize * w..(iy as usize + 1) * w];
                                            let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                                            if stride == 1 {
                                                let shift = kx as i64 - pad as i64;
                                                let src = &in_row[(lo as i64 + shift) as usize
                                                    ..(hi as i64 + shift) as usize];
                                                for (&iv, &gv) in src.iter().zip(&g_row[lo..hi]) {
                                                    acc += iv * gv;
                                                }
                                            } else {
                                                for ox in lo..hi {
                                                    let ix = ox * stride + kx - pad;
                                                    acc += in_row[ix] * g_row[ox];
                                                }
                                            }
                                        }
                                        dkernel[((co * cin + ci) * kh + ky) * kw + kx] += acc;
                                    }
                                }
                            }
                        }
                    }
                    self.acc_owned(*kernel, dkernel);
                }
            }
            Op::BiasAddChannel { x, b } => {
                self.acc(*x, g);
                if self.needs(*b) {
                    let s = &self.nodes[node].shape;
                    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let mut db = vec![0.0; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            db[ci] += g[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w]
                                .iter()
                                .sum::<f64>();
                        }
                    }
                    self.acc_owned(*b, db);
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    let dx = vec![g[0]; self.data(*x).len()];
                    self.acc_owned(*x, dx);
                }
            }
            Op::Mean { x } => {
                if self.needs(*x) {
                    let n = self.data(*x).len();
                    let dx = vec![g[0] / n as f64; n];
                    self.acc_owned(*x, dx);
                }
            }
            Op::ConcatDim1 { xs } => {
                let out_shape = self.nodes[node].shape.clone();
                let outer = out_shape[0];
                let inner: usize = out_shape[2..].iter().product();
                let out_stride = out_shape[1] * inner;
                let mut offset = 0usize;
                for &x in xs {
                    let c = self.nodes[x.0].shape[1];
                    let block = c * inner;
                    if self.needs(x) {
                        let mut dx = vec![0.0; outer * block];
                        for o in 0..outer {
                            dx[o * block..(o + 1) * block].copy_from_slice(
                                &g[o * out_stride + offset..o * out_stride + offset + block],
                            );
                        }
                        self.acc_owned(x, dx);
                    }
                    offset += block;
                }
            }
            Op::BilinearWarp { f, flow } => {
                let fs = self.nodes[f.0].shape.clone();
                let (b, c, h, w) = (fs[0], fs[1], fs[2], fs[3]);
                let fd = self.data(*f).to_vec();
                let ld = self.data(*flow).to_vec();
                let need_f = self.needs(*f);
                let need_flow = self.needs(*flow);
                let mut df = if need_f { vec![0.0; fd.len()] } else { Vec::new() };
                let mut dflow = if need_flow { vec![0.0; ld.len()] } else { Vec::new() };
                for bi in 0..b {
                    let u = &ld[bi * 2 * h * w..bi * 2 * h * w + h * w];
                    let v = &ld[bi * 2 * h * w + h * w..(bi + 1) * 2 * h * w];
                    for y in 0..h {
                        for x in 0..w {
                            let p = y * w + x;
                            let rx = x as f64 + u[p];
                            let ry = y as f64 + v[p];
                            let xc = rx.clamp(0.0, (w - 1) as f64);
                            let yc = ry.clamp(0.0, (h - 1) as f64);
                            let x0 = xc.floor();
                            let y0 = yc.floor();
                            let dx = xc - x0;
                            let dy = yc - y0;
                            let x0i = x0 as usize;
                            let y0i = y0 as usize;
                            let x1i = (x0i + 1).min(w - 1);
                            let y1i = (y0i + 1).min(h - 1);
                            let in_x = (0.0..=(w - 1) as f64).contains(&rx);
                            let in_y = (0.0..=(h - 1) as f64).contains(&ry);
                            let mut gu = 0.0;
                            let mut gv = 0.0;
                            for ci in 0..c {
                                let base = (bi * c + ci) * h * w;
                                let gl = g[base + p];
                                if gl == 0.0 {
                                    continue;
                                }
                                let f00 = fd[base + y0i * w + x0i];
                                let f01 = fd[base + y0i * w + x1i];
                                let f10 = fd[base + y1i * w + x0i];
                                let f11 = fd[base + y1i * w + x1i];
                                if need_f {
                                    df[base + y0i * w + x0i] += gl * (1.0 - dy) * (1.0 - dx);
                                    df[base + y0i * w + x1i] += gl * (1.0 - dy) * dx;
                                    df[base + y1i * w + x0i] += gl * dy * (1.0 - dx);
                                    df[base + y1i * w + x1i] += gl * dy * dx;
                                }
                                if need_flow {
                                    if in_x {
                                        gu += gl * ((1.0 - dy) * (f01 - f00) + dy * (f11 - f10));
                                    }
                                    if in_y {
                                        gv += gl * ((1.0 - dx) * (f10 - f00) + dx * (f11 - f01));
                                    }
                                }
                            }
                            if need_flow {
                                dflow[bi * 2 * h * w + p] += gu;
                                dflow[bi * 2 * h * w + h * w + p] += gv;
                            }
                        }
                    }
                }
                if need_f {
                    self.acc_owned(*f, df);
                }
                if need_flow {
                    self.acc_owned(*flow, dflow);
                }
            }
            Op::UpsampleBilinear { x, factor } => {
                if self.needs(*x) {
                    let xs = self.nodes[x.0].shape.clone();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let (oh, ow) = (h * factor, w * factor);
                    let inv = 1.0 / *factor as f64;
                    let mut dx = vec![0.0; n * c * h * w];
                    for ni in 0..n {
                        for ci in 0..c {
                            let g_plane = &g[(ni * c + ci) * oh * ow..(ni * c + ci + 1) * oh * ow];
                            let d_plane =
                                &mut dx[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                            for oy in 0..oh {
                                let sy = ((oy as f64 + 0.5) * inv - 0.5).clamp(0.0, (h - 1) as f64);
                                let y0 = sy.floor();
                                let dyf = sy - y0;
                                let y0i = y0 as usize;
                                let y1i = (y0i + 1).min(h - 1);
                                for ox in 0..ow {
                                    let sx =
                                        ((ox as f64 + 0.5) * inv - 0.5).clamp(0.0, (w - 1) as f64);
                                    let x0 = sx.floor();
                                    let dxf = sx - x0;
                                    let x0i = x0 as usize;
                                    let x1i = (x0i + 1).min(w - 1);
                                    let gv = g_plane[oy * ow + ox];
                                    d_plane[y0i * w + x0i] += gv * (1.0 - dyf) * (1.0 - dxf);
                                    d_plane[y0i * w + x1i] += gv * (1.0 - dyf) * dxf;
                                    d_plane[y1i * w + x0i] += gv * dyf * (1.0 - dxf);
                                    d_plane[y1i * w + x1i] += gv * dyf * dxf;
                                }
                            }
                        }
                    }
                    self.acc_owned(*x, dx);
                }
            }
            Op::GatherWindows { x, centers, win } => {
                if self.needs(*x) {
                    let xs = self.nodes[x.0].shape.clone();
                    let (c, h, w) = (xs[1], xs[2], xs[3]);
                    let half = (*win / 2) as i64;
                    let mut dx = vec![0.0; c * h * w];
                    for (ki, &(cy, cx)) in centers.iter().enumerate() {
                        for i in 0..*win {
                            let sy = cy + i as i64 - half;
                            if sy < 0 || sy >= h as i64 {
                                continue;
                            }
                            for j in 0..*win {
                                let sx = cx + j as i64 - half;
                                if sx < 0 || sx >= w as i64 {
                                    continue;
                                }
                                for ci in 0..c {
                                    dx[(ci * h + sy as usize) * w + sx as usize] +=
                                        g[((ki * c + ci) * win + i) * win + j];
                                }
                            }
                        }
                    }
                    self.acc_owned(*x, dx);
                }
            }
            Op::ExpandToWindows { x, win } => {
                if self.needs(*x) {
                    let xs = self.nodes[x.0].shape.clone();
                    let (c, hc, wc) = (xs[1], xs[2], xs[3]);
                    let k = hc * wc;
                    let per = win * win;
                    let mut dx = vec![0.0; c * k];
                    for ki in 0..k {
                        for ci in 0..c {
                            dx[ci * k + ki] +=
                                g[(ki * c + ci) * per..(ki * c + ci + 1) * per].iter().sum::<f64>();
                        }
                    }
                    self.acc_owned(*x, dx);
                }
            }
            Op::TileWindows { x, grid_h, grid_w } => {
                if self.needs(*x) {
                    let xs = self.nodes[x.0].shape.clone();
                    let (k, c, win) = (xs[0], xs[1], xs[2]);
                    let (oh, ow) = (grid_h * win, grid_w * win);
                    let mut dx = vec![0.0; k * c * win * win];
                    for ki in 0..k {
                        let (ty, tx) = (ki / grid_w, ki % grid_w);
                        for ci in 0..c {
                            for i in 0..win {
                                let src = ((ci * oh) + ty * win + i) * ow + tx * win;
                                let dst = ((ki * c + ci) * win + i) * win;
                                dx[dst..dst + win].copy_from_slice(&g[src..src + win]);
                            }
                        }
                    }
                    self.acc_owned(*x, dx);
                }
            }
            Op::UntileWindows { x, win } => {
                if self.needs(*x) {
                    let win = *win;
                    let xs = self.nodes[x.0].shape.clone();
                    let (c, h, w) = (xs[1], xs[2], xs[3]);
                    let gw = w / win;
                    let k = (h / win) * gw;
                    let mut dx = vec![0.0; c * h * w];
                    for ki in 0..k {
                        let (ty, tx) = (ki / gw, ki % gw);
                        for ci in 0..c {
                            for i in 0..win {
                                let dst = ((ci * h) + ty * win + i) * w + tx * win;
                                let src = ((ki * c + ci) * win + i) * win;
                                dx[dst..dst + win].copy_from_slice(&g[src..src + win]);
                            }
                        }
                    }
                    self.acc_owned(*x, dx);
                }
            }
            Op::Crop2d { x, h, w } => {
                if self.needs(*x) {
                    let xs = self.nodes[x.0].shape.clone();
                    let (n, c, ih, iw) = (xs[0], xs[1], xs[2], xs[3]);
                    let mut dx = vec![0.0; n * c * ih * iw];
                    for ni in 0..n {
                        for ci in 0..c {
                            for y in 0..*h {
                                let dst = ((ni * c + ci) * ih + y) * iw;
                                let src = ((ni * c + ci) * h + y) * w;
                                dx[dst..dst + w].copy_from_slice(&g[src..src + w]);
                            }
                        }
                    }
                    self.acc_owned(*x, dx);
                }
            }
            Op::MinMaxNormPerWindow { x, stats } => {
                if self.needs(*x) {
                    let xd = self.data(*x);
                    let out = &self.nodes[node].data;
                    let k = stats.len();
                    let per = xd.len() / k;
                    let mut dx = vec![0.0; xd.len()];
                    for (ki, &(imin, imax, range)) in stats.iter().enumerate() {
                        if range == 0.0 {
                            continue;
                        }
                        let inv = 1.0 / range;
                        let gs = &g[ki * per..(ki + 1) * per];
                        let os = &out[ki * per..(ki + 1) * per];
                        let ds = &mut dx[ki * per..(ki + 1) * per];
                        let g_sum: f64 = gs.iter().sum();
                        // Σ g_i·(x_i − min)/range², via the cached outputs
                        let g_dot: f64 = gs.iter().zip(os).map(|(a, b)| a * b).sum::<f64>() * inv;
                        for (d, &gv) in ds.iter_mut().zip(gs) {
                            *d += gv * inv;
                        }
                        ds[imin] += -g_sum * inv + g_dot;
                        ds[imax] -= g_dot;
                    }
                    self.acc_owned(*x, dx);
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// GELU, tanh approximation (fixed so golden values are stable).
fn gelu_tanh(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_tanh_derivative(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}
