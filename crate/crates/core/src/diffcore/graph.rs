//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to the tape, so node order is already a
//! topological order. [`Graph::backward`] walks the tape once in reverse and
//! sums the contributions of all consumers into each input's gradient.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use super::kernels::{self, ConvGeom, Mat};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Unknown {
                what: "activation",
                value: other.to_string(),
            }),
        }
    }
}

/// Per-residual penalty used by [`Graph::residual_loss`]; `derivative` is
/// taken with respect to the residual `target - prediction`.
pub trait Penalty: Send + Sync + fmt::Debug {
    fn value(&self, residual: f64) -> f64;
    fn derivative(&self, residual: f64) -> f64;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        /// Forward column matrix, reused for the kernel gradient.
        cols: Vec<f64>,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    Softmax {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddScalar {
        input: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    ConcatCols {
        inputs: Vec<Var>,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    RowDot {
        a: Var,
        b: Var,
    },
    ScaleRows {
        input: Var,
        weights: Var,
    },
    NormalizeRows {
        input: Var,
        inv_std: Vec<f64>,
    },
    Sum {
        input: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
    ResidualLoss {
        pred: Var,
        target: Vec<f64>,
        penalty: Arc<dyn Penalty>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::Upsample { .. } => "upsample_bilinear",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Dense { .. } => "dense",
            Op::MatMul { .. } => "matmul",
            Op::Activation { kind, .. } => match kind {
                Activation::Relu => "relu",
                Activation::Sigmoid => "sigmoid",
                Activation::Tanh => "tanh",
            },
            Op::Softmax { .. } => "softmax",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::AddScalar { .. } => "add_scalar",
            Op::Scale { .. } => "scale",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::RowDot { .. } => "row_dot",
            Op::ScaleRows { .. } => "scale_rows",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::Sum { .. } => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::ResidualLoss { .. } => "residual_loss",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, kernel, bias, .. } => vec![*input, *kernel, *bias],
            Op::Dense { input, weight, bias } => vec![*input, *weight, *bias],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } | Op::RowDot { a, b } => vec![*a, *b],
            Op::ScaleRows { input, weights } => vec![*input, *weights],
            Op::ConcatCols { inputs } => inputs.clone(),
            Op::MaxPool2d { input, .. }
            | Op::Upsample { input }
            | Op::GlobalAvgPool { input }
            | Op::Activation { input, .. }
            | Op::Softmax { input }
            | Op::AddScalar { input }
            | Op::Scale { input, .. }
            | Op::SliceCols { input, .. }
            | Op::NormalizeRows { input, .. }
            | Op::Sum { input } => vec![*input],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::ResidualLoss { pred, .. } => vec![*pred],
        }
    }
}

/// Column matrix `[patch, n*positions]` for a batch of `n` images.
fn batch_im2col(geom: &ConvGeom, images: &[f64], n: usize) -> Vec<f64> {
    let p = geom.positions();
    let image_len = geom.channels * geom.height * geom.width;
    let mut cols = vec![0.0; geom.patch_len() * n * p];
    for (i, image) in images.chunks(image_len).take(n).enumerate() {
        kernels::im2col_strided(geom, image, &mut cols, n * p, i * p);
    }
    cols
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single forward computation and its tape. One graph per forward/backward
/// pass; parameters enter as named leaves so their gradients can be collected.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient (data, labels, frozen values).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Named trainable leaf. Binding the same name twice returns the first node.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some((_, v)) = self.params.iter().find(|(n, _)| n == name) {
            return *v;
        }
        let v = self.leaf(value.clone());
        self.params.push((name.to_string(), v));
        v
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// Gradients of every bound parameter after [`Graph::backward`], in binding order.
    pub fn param_grads(&self) -> Vec<(&str, &[f64])> {
        self.params
            .iter()
            .filter_map(|(name, v)| self.grad(*v).map(|g| (name.as_str(), g)))
            .collect()
    }

    /// The earliest node holding a NaN or infinity, with the op that produced it.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite() {
            Some((node, op)) => Err(Error::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    // ---- operations -------------------------------------------------------

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let x = self.value(input);
        let k = self.value(kernel);
        x.expect_rank(OP, 4)?;
        k.expect_rank(OP, 4)?;
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (f, kc, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        if kc != c {
            return Err(Error::shape(OP, "kernel input channels", c, kc));
        }
        let b = self.value(bias);
        if b.shape() != [f] {
            return Err(Error::shape(OP, "bias length", f, b.len()));
        }
        if stride == 0 {
            return Err(Error::invalid(OP, "stride must be at least 1"));
        }
        if kh > h + 2 * padding {
            return Err(Error::shape(OP, "kernel height vs padded input height", h + 2 * padding, kh));
        }
        if kw > w + 2 * padding {
            return Err(Error::shape(OP, "kernel width vs padded input width", w + 2 * padding, kw));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let p = geom.positions();
        // one GEMM for the whole batch: [f, patch] x [patch, n*p]
        let cols = batch_im2col(&geom, x.data(), n);
        let mut wide = vec![0.0; f * n * p];
        kernels::gemm(
            Mat::new(k.data(), f, geom.patch_len()),
            Mat::new(&cols, geom.patch_len(), n * p),
            &mut wide,
            0.0,
        );
        let mut out = vec![0.0; n * f * p];
        for (fi, (row, bv)) in wide.chunks(n * p).zip(b.data()).enumerate() {
            for (i, src) in row.chunks(p).enumerate() {
                let dst = &mut out[(i * f + fi) * p..(i * f + fi + 1) * p];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d = s + bv);
            }
        }
        let value = Tensor::new(&[n, f, geom.out_h, geom.out_w], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        const OP: &str = "maxpool2d";
        let x = self.value(input);
        x.expect_rank(OP, 4)?;
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if window == 0 || stride == 0 {
            return Err(Error::invalid(OP, "window and stride must be at least 1"));
        }
        if window > h || window > w {
            return Err(Error::invalid(OP, format!("window {window} larger than input {h}x{w}")));
        }
        let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0; n * c * oh * ow];
        for plane in 0..n * c {
            kernels::maxpool_plane(
                &x.data()[plane * h * w..(plane + 1) * h * w],
                w,
                window,
                stride,
                oh,
                ow,
                &mut out[plane * oh * ow..(plane + 1) * oh * ow],
                &mut argmax[plane * oh * ow..(plane + 1) * oh * ow],
            );
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2d { input, argmax }))
    }

    /// Align-corners bilinear upsampling to `out_h x out_w`.
    pub fn upsample_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        const OP: &str = "upsample_bilinear";
        let x = self.value(input);
        x.expect_rank(OP, 4)?;
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if out_h < h || out_w < w {
            return Err(Error::invalid(
                OP,
                format!("cannot downsample {h}x{w} to {out_h}x{out_w}"),
            ));
        }
        let ty = kernels::align_corners_taps(out_h, h);
        let tx = kernels::align_corners_taps(out_w, w);
        let mut out = vec![0.0; n * c * out_h * out_w];
        for plane in 0..n * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let value = Tensor::new(&[n, c, out_h, out_w], out)?;
        Ok(self.push(value, Op::Upsample { input }))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        x.expect_rank("global_avg_pool", 4)?;
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let area = x.shape()[2] * x.shape()[3];
        let out = x
            .data()
            .chunks(area)
            .map(|plane| plane.iter().sum::<f64>() / area as f64)
            .collect();
        let value = Tensor::new(&[n, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool { input }))
    }

    /// Affine map `x·W + b` for `x: [N,d_in]`, `W: [d_in,d_out]`, `b: [d_out]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "dense";
        let x = self.value(input);
        let wt = self.value(weight);
        x.expect_rank(OP, 2)?;
        wt.expect_rank(OP, 2)?;
        let (n, d_in) = (x.shape()[0], x.shape()[1]);
        if wt.shape()[0] != d_in {
            return Err(Error::shape(OP, "weight rows (d_in)", d_in, wt.shape()[0]));
        }
        let d_out = wt.shape()[1];
        let b = self.value(bias);
        if b.shape() != [d_out] {
            return Err(Error::shape(OP, "bias length (d_out)", d_out, b.len()));
        }
        let mut out: Vec<f64> = (0..n).flat_map(|_| b.data().iter().copied()).collect();
        kernels::gemm(Mat::new(x.data(), n, d_in), Mat::new(wt.data(), d_in, d_out), &mut out, 1.0);
        let value = Tensor::new(&[n, d_out], out)?;
        Ok(self.push(value, Op::Dense { input, weight, bias }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "matmul";
        let (av, bv) = (self.value(a), self.value(b));
        av.expect_rank(OP, 2)?;
        bv.expect_rank(OP, 2)?;
        let (m, k) = (av.shape()[0], av.shape()[1]);
        if bv.shape()[0] != k {
            return Err(Error::shape(OP, "inner dimension", k, bv.shape()[0]));
        }
        let n = bv.shape()[1];
        let mut out = vec![0.0; m * n];
        kernels::gemm(Mat::new(av.data(), m, k), Mat::new(bv.data(), k, n), &mut out, 0.0);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let x = self.value(input);
        let f: fn(f64) -> f64 = match kind {
            Activation::Relu => |v| v.max(0.0),
            Activation::Sigmoid => sigmoid,
            Activation::Tanh => f64::tanh,
        };
        let out = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(x.shape(), out).expect("same shape");
        self.push(value, Op::Activation { input, kind })
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Tanh)
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let width = *x.shape().last().expect("rank >= 1");
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(width) {
            softmax_in_place(row);
        }
        let value = Tensor::new(x.shape(), out).expect("same shape");
        self.push(value, Op::Softmax { input })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same_shape("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same_shape("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn add_scalar(&mut self, input: Var, scalar: f64) -> Var {
        let x = self.value(input);
        let value = Tensor::new(x.shape(), x.data().iter().map(|v| v + scalar).collect()).expect("same shape");
        self.push(value, Op::AddScalar { input })
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input);
        let value = Tensor::new(x.shape(), x.data().iter().map(|v| v * factor).collect()).expect("same shape");
        self.push(value, Op::Scale { input, factor })
    }

    /// Concatenates rank-2 tensors `[N, w_i]` along the feature axis.
    pub fn concat_cols(&mut self, inputs: &[Var]) -> Result<Var> {
        const OP: &str = "concat_cols";
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid(OP, "nothing to concatenate"))?;
        let n = self.value(*first).dim(OP, 0)?;
        let mut total = 0;
        for v in inputs {
            let t = self.value(*v);
            t.expect_rank(OP, 2)?;
            if t.shape()[0] != n {
                return Err(Error::shape(OP, "batch", n, t.shape()[0]));
            }
            total += t.shape()[1];
        }
        let mut out = Vec::with_capacity(n * total);
        for row in 0..n {
            for v in inputs {
                let t = self.value(*v);
                let w = t.shape()[1];
                out.extend_from_slice(&t.data()[row * w..(row + 1) * w]);
            }
        }
        let value = Tensor::new(&[n, total], out)?;
        Ok(self.push(
            value,
            Op::ConcatCols {
                inputs: inputs.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        const OP: &str = "slice_cols";
        let x = self.value(input);
        x.expect_rank(OP, 2)?;
        let (n, w) = (x.shape()[0], x.shape()[1]);
        if len == 0 || start + len > w {
            return Err(Error::invalid(OP, format!("columns {start}..{} out of width {w}", start + len)));
        }
        let out = x
            .data()
            .chunks(w)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let value = Tensor::new(&[n, len], out)?;
        Ok(self.push(value, Op::SliceCols { input, start }))
    }

    /// Per-row inner product of two `[N,D]` tensors, giving `[N,1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "row_dot";
        let (av, bv) = (self.value(a), self.value(b));
        av.expect_rank(OP, 2)?;
        if av.shape() != bv.shape() {
            return Err(Error::shape(OP, "width", av.dim(OP, 1)?, bv.dim(OP, 1).unwrap_or(0)));
        }
        let (n, d) = (av.shape()[0], av.shape()[1]);
        let out = av
            .data()
            .chunks(d)
            .zip(bv.data().chunks(d))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        let value = Tensor::new(&[n, 1], out)?;
        Ok(self.push(value, Op::RowDot { a, b }))
    }

    /// Multiplies each row of `input: [N,D]` by the matching entry of `weights: [N,1]`.
    pub fn scale_rows(&mut self, input: Var, weights: Var) -> Result<Var> {
        const OP: &str = "scale_rows";
        let (x, wt) = (self.value(input), self.value(weights));
        x.expect_rank(OP, 2)?;
        let (n, d) = (x.shape()[0], x.shape()[1]);
        if wt.shape() != [n, 1] {
            return Err(Error::shape(OP, "row weights", n, wt.len()));
        }
        let out = x
            .data()
            .chunks(d)
            .zip(wt.data())
            .flat_map(|(row, s)| row.iter().map(move |v| v * s))
            .collect();
        let value = Tensor::new(&[n, d], out)?;
        Ok(self.push(value, Op::ScaleRows { input, weights }))
    }

    /// Standardizes each row of `input: [N,D]` to zero mean and unit variance:
    /// `(x - mean) / sqrt(var + eps)`. No learned scale or shift.
    pub fn normalize_rows(&mut self, input: Var, eps: f64) -> Result<Var> {
        const OP: &str = "normalize_rows";
        let x = self.value(input);
        x.expect_rank(OP, 2)?;
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let mut out = Vec::with_capacity(n * d);
        let mut inv_std = Vec::with_capacity(n);
        for row in x.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            out.extend(row.iter().map(|v| (v - mean) * inv));
            inv_std.push(inv);
        }
        let value = Tensor::new(&[n, d], out)?;
        Ok(self.push(value, Op::NormalizeRows { input, inv_std }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { input })
    }

    /// Mean softmax cross-entropy over the labeled rows of `logits: [N,K]`.
    /// Rows labeled `None` contribute nothing; with no labeled rows the loss is 0.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
        const OP: &str = "cross_entropy";
        let z = self.value(logits);
        z.expect_rank(OP, 2)?;
        let (n, k) = (z.shape()[0], z.shape()[1]);
        if labels.len() != n {
            return Err(Error::shape(OP, "label count", n, labels.len()));
        }
        let mut probs = z.data().to_vec();
        let mut total = 0.0;
        let mut count = 0usize;
        for (row, label) in probs.chunks_mut(k).zip(labels) {
            softmax_in_place(row);
            if let Some(cls) = *label {
                if cls >= k {
                    return Err(Error::invalid(OP, format!("label {cls} outside {k} classes")));
                }
                total -= row[cls].max(f64::MIN_POSITIVE).ln();
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean of `penalty(target_i - pred_i)` over all elements of `pred`.
    pub fn residual_loss(&mut self, pred: Var, target: &[f64], penalty: Arc<dyn Penalty>) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(Error::shape("residual_loss", "target length", p.len(), target.len()));
        }
        let loss = p
            .data()
            .iter()
            .zip(target)
            .map(|(yh, y)| penalty.value(y - yh))
            .sum::<f64>()
            / target.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::ResidualLoss {
                pred,
                target: target.to_vec(),
                penalty,
            },
        ))
    }

    fn zip_same_shape(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            let axis = av
                .shape()
                .iter()
                .zip(bv.shape())
                .position(|(x, y)| x != y)
                .unwrap_or(av.shape().len().min(bv.shape().len()));
            return Err(Error::shape(
                op,
                format!("axis {axis}"),
                av.shape().get(axis).copied().unwrap_or(0),
                bv.shape().get(axis).copied().unwrap_or(0),
            ));
        }
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape(), out)
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse pass from the scalar `loss`. Gradients land in the grad slot of
    /// every node that depends on a trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", "loss element count", 1, self.value(loss).len()));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(i, &gout, &mut grads);
            self.nodes[i].value.grad = Some(gout);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let x = self.value(*input);
                let k = self.value(*kernel);
                let (n, f) = (x.shape()[0], k.shape()[0]);
                let (p, patch) = (geom.positions(), geom.patch_len());
                let image_len = geom.channels * geom.height * geom.width;
                if let Some(db) = self.slot(grads, *bias) {
                    for sample in g.chunks(f * p) {
                        for (acc, row) in db.iter_mut().zip(sample.chunks(p)) {
                            *acc += row.iter().sum::<f64>();
                        }
                    }
                }
                // [n, f, p] -> [f, n*p]
                let mut wide = vec![0.0; f * n * p];
                for (i, sample) in g.chunks(f * p).enumerate() {
                    for (fi, row) in sample.chunks(p).enumerate() {
                        wide[fi * n * p + i * p..fi * n * p + (i + 1) * p].copy_from_slice(row);
                    }
                }
                let gmat = Mat::new(&wide, f, n * p);
                if self.nodes[kernel.0].needs_grad {
                    let dk = self.slot(grads, *kernel).expect("needs grad");
                    kernels::gemm(gmat, Mat::new(cols, patch, n * p).t(), dk, 1.0);
                }
                if let Some(dx) = self.slot(grads, *input) {
                    let mut dcols = vec![0.0; patch * n * p];
                    kernels::gemm(Mat::new(k.data(), f, patch).t(), gmat, &mut dcols, 0.0);
                    for s in 0..n {
                        kernels::col2im_strided(geom, &dcols, &mut dx[s * image_len..(s + 1) * image_len], n * p, s * p);
                    }
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let x = self.value(*input);
                let plane_in = x.shape()[2] * x.shape()[3];
                let plane_out = out.shape()[2] * out.shape()[3];
                if let Some(dx) = self.slot(grads, *input) {
                    for (j, (gv, at)) in g.iter().zip(argmax).enumerate() {
                        dx[(j / plane_out) * plane_in + at] += gv;
                    }
                }
            }
            Op::Upsample { input } => {
                let x = self.value(*input);
                let (h, w) = (x.shape()[2], x.shape()[3]);
                let (oh, ow) = (out.shape()[2], out.shape()[3]);
                let ty = kernels::align_corners_taps(oh, h);
                let tx = kernels::align_corners_taps(ow, w);
                if let Some(dx) = self.slot(grads, *input) {
                    for (plane, gp) in g.chunks(oh * ow).enumerate() {
                        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                                let gv = gp[oy * ow + ox];
                                dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                                dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                                dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                                dst[y1 * w + x1] += gv * fy * fx;
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool { input } => {
                let x = self.value(*input);
                let area = x.shape()[2] * x.shape()[3];
                if let Some(dx) = self.slot(grads, *input) {
                    for (plane, gv) in dx.chunks_mut(area).zip(g) {
                        let share = gv / area as f64;
                        plane.iter_mut().for_each(|d| *d += share);
                    }
                }
            }
            Op::Dense { input, weight, bias } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let (n, d_in, d_out) = (x.shape()[0], x.shape()[1], wt.shape()[1]);
                let gmat = Mat::new(g, n, d_out);
                if let Some(dx) = self.slot(grads, *input) {
                    kernels::gemm(gmat, Mat::new(wt.data(), d_in, d_out).t(), dx, 1.0);
                }
                if let Some(dw) = self.slot(grads, *weight) {
                    kernels::gemm(Mat::new(x.data(), n, d_in).t(), gmat, dw, 1.0);
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for row in g.chunks(d_out) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let gmat = Mat::new(g, m, n);
                if let Some(da) = self.slot(grads, *a) {
                    kernels::gemm(gmat, Mat::new(bv.data(), k, n).t(), da, 1.0);
                }
                if let Some(db) = self.slot(grads, *b) {
                    kernels::gemm(Mat::new(av.data(), m, k).t(), gmat, db, 1.0);
                }
            }
            Op::Activation { input, kind } => {
                let x = self.value(*input);
                if let Some(dx) = self.slot(grads, *input) {
                    for (((d, gv), xv), yv) in dx.iter_mut().zip(g).zip(x.data()).zip(out.data()) {
                        *d += gv
                            * match kind {
                                Activation::Relu => f64::from(u8::from(*xv > 0.0)),
                                Activation::Sigmoid => yv * (1.0 - yv),
                                Activation::Tanh => 1.0 - yv * yv,
                            };
                    }
                }
            }
            Op::Softmax { input } => {
                let width = *out.shape().last().expect("rank >= 1");
                if let Some(dx) = self.slot(grads, *input) {
                    for ((d, gr), y) in dx.chunks_mut(width).zip(g.chunks(width)).zip(out.data().chunks(width)) {
                        let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                        for ((dv, gv), yv) in d.iter_mut().zip(gr).zip(y) {
                            *dv += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(d) = self.slot(grads, *v) {
                        d.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, gv), o) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * o;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, gv), o) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * o;
                    }
                }
            }
            Op::AddScalar { input } => {
                if let Some(d) = self.slot(grads, *input) {
                    d.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
            }
            Op::Scale { input, factor } => {
                if let Some(d) = self.slot(grads, *input) {
                    d.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * factor);
                }
            }
            Op::ConcatCols { inputs } => {
                let total = out.shape()[1];
                let mut offset = 0;
                for v in inputs {
                    let w = self.value(*v).shape()[1];
                    if let Some(d) = self.slot(grads, *v) {
                        for (drow, grow) in d.chunks_mut(w).zip(g.chunks(total)) {
                            drow.iter_mut().zip(&grow[offset..offset + w]).for_each(|(d, gv)| *d += gv);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { input, start } => {
                let w = self.value(*input).shape()[1];
                let len = out.shape()[1];
                if let Some(d) = self.slot(grads, *input) {
                    for (drow, grow) in d.chunks_mut(w).zip(g.chunks(len)) {
                        drow[*start..start + len].iter_mut().zip(grow).for_each(|(d, gv)| *d += gv);
                    }
                }
            }
            Op::RowDot { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let d = av.shape()[1];
                for (target, other) in [(a, bv), (b, av)] {
                    if let Some(dt) = self.slot(grads, *target) {
                        for ((drow, orow), gv) in dt.chunks_mut(d).zip(other.data().chunks(d)).zip(g) {
                            drow.iter_mut().zip(orow).for_each(|(dv, o)| *dv += gv * o);
                        }
                    }
                }
            }
            Op::ScaleRows { input, weights } => {
                let x = self.value(*input);
                let wt = self.value(*weights);
                let d = x.shape()[1];
                if let Some(dx) = self.slot(grads, *input) {
                    for ((drow, grow), s) in dx.chunks_mut(d).zip(g.chunks(d)).zip(wt.data()) {
                        drow.iter_mut().zip(grow).for_each(|(dv, gv)| *dv += gv * s);
                    }
                }
                if let Some(dw) = self.slot(grads, *weights) {
                    for ((dv, grow), xrow) in dw.iter_mut().zip(g.chunks(d)).zip(x.data().chunks(d)) {
                        *dv += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::NormalizeRows { input, inv_std } => {
                let d = out.shape()[1];
                if let Some(dx) = self.slot(grads, *input) {
                    // dx = inv_std * (g - mean(g) - y * mean(g * y))
                    for (((dr, gr), yr), inv) in dx.chunks_mut(d).zip(g.chunks(d)).zip(out.data().chunks(d)).zip(inv_std) {
                        let g_mean = gr.iter().sum::<f64>() / d as f64;
                        let gy_mean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv += inv * (gv - g_mean - yv * gy_mean);
                        }
                    }
                }
            }
            Op::Sum { input } => {
                if let Some(d) = self.slot(grads, *input) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let count = labels.iter().flatten().count();
                if count == 0 {
                    return;
                }
                let k = self.value(*logits).shape()[1];
                let scale = g[0] / count as f64;
                if let Some(d) = self.slot(grads, *logits) {
                    for ((drow, prow), label) in d.chunks_mut(k).zip(probs.chunks(k)).zip(labels) {
                        if let Some(cls) = *label {
                            for (j, (dv, pv)) in drow.iter_mut().zip(prow).enumerate() {
                                *dv += scale * (pv - f64::from(u8::from(j == cls)));
                            }
                        }
                    }
                }
            }
            Op::ResidualLoss { pred, target, penalty } => {
                let p = self.value(*pred);
                let scale = g[0] / target.len() as f64;
                if let Some(d) = self.slot(grads, *pred) {
                    for ((dv, yh), y) in d.iter_mut().zip(p.data()).zip(target) {
                        *dv -= scale * penalty.derivative(y - yh);
                    }
                }
            }
        }
    }

    /// Gradient accumulator for `v`, allocated on first use; `None` when `v`
    /// does not lead to any trainable leaf.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }
}

/// Logistic function clamped to the open interval (0,1).
pub(crate) fn sigmoid(v: f64) -> f64 {
    const UPPER: f64 = 1.0 - f64::EPSILON / 2.0;
    let y = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, UPPER)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
