//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records every op applied during a forward pass as a node holding
//! its output value. [`Graph::backward`] walks the tape in reverse and returns
//! the gradient of a scalar node with respect to every node that requires one.

use std::fmt;

use crate::error::{shape_err, Error, Result};

use super::flops;
use super::kernels::{self, ResizePlan, RoiPlan};
use super::scalar::{cst, Scalar};
use super::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An op with a hand-written backward pass, for fused losses.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradient of the loss w.r.t. each input, given the gradient w.r.t. the output.
    /// Entries for inputs that do not need a gradient may be `None`.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_out: &[T]) -> Vec<Option<Vec<T>>>;
}

/// A scalar loss whose input gradients were computed together with its value.
struct PrecomputedLoss<T: Scalar> {
    name: &'static str,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> CustomOp<T> for PrecomputedLoss<T> {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad_out: &[T]) -> Vec<Option<Vec<T>>> {
        let s = grad_out[0];
        self.grads.iter().map(|g| g.as_ref().map(|g| g.iter().map(|&v| v * s).collect())).collect()
    }
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, pad: usize },
    Linear { x: Var, w: Var, b: Var },
    MatMul { a: Var, b: Var, trans_b: bool },
    Softmax { x: Var },
    Sigmoid { x: Var },
    Silu { x: Var },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: T },
    Sum { x: Var },
    Reshape { x: Var },
    Resize { x: Var, plan: ResizePlan<T> },
    AvgPool2 { x: Var },
    RoiAlign { x: Var, plan: RoiPlan<T> },
    CellsToRows { x: Var },
    ConcatRows { xs: Vec<Var> },
    IndexRows { x: Var, idx: Vec<usize> },
    ConcatCols { xs: Vec<Var> },
    SliceCols { x: Var, start: usize },
    SelectChannel { x: Var, idx: Vec<usize> },
    Custom { xs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::MatMul { .. } => "matmul",
            Op::Softmax { .. } => "softmax",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Silu { .. } => "silu",
            Op::Relu { .. } => "relu",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::Reshape { .. } => "reshape",
            Op::Resize { .. } => "bilinear_resize",
            Op::AvgPool2 { .. } => "avg_pool2",
            Op::RoiAlign { .. } => "roi_align",
            Op::CellsToRows { .. } => "cells_to_rows",
            Op::ConcatRows { .. } => "concat_rows",
            Op::IndexRows { .. } => "index_rows",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::SelectChannel { .. } => "select_channel",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Softmax { x }
            | Op::Sigmoid { x }
            | Op::Silu { x }
            | Op::Relu { x }
            | Op::Scale { x, .. }
            | Op::Sum { x }
            | Op::Reshape { x }
            | Op::Resize { x, .. }
            | Op::AvgPool2 { x }
            | Op::RoiAlign { x, .. }
            | Op::CellsToRows { x }
            | Op::IndexRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::SelectChannel { x, .. } => vec![*x],
            Op::ConcatRows { xs } | Op::ConcatCols { xs } | Op::Custom { xs, .. } => xs.clone(),
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

fn dims3(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    // [C,H,W] or [N,C,H,W] -> (N,C,H,W)
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(shape_err!("expected [C,H,W] or [N,C,H,W], got {shape:?}")),
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let c = *shape.last().unwrap();
    let r = if c == 0 { 0 } else { shape.iter().product::<usize>() / c };
    (r, c)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {}", op.name())));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Stride-1 cross-correlation. `x` is `[Cin,H,W]` or `[N,Cin,H,W]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (n, cin, h, wd) = dims3(self.shape(x))?;
        let ws = self.shape(w).to_vec();
        let [cout, wcin, kh, kw] = ws[..] else {
            return Err(shape_err!("conv2d kernel must be [Cout,Cin,kh,kw], got {ws:?}"));
        };
        if wcin != cin {
            return Err(shape_err!("conv2d kernel expects {wcin} input channels, input has {cin}"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(shape_err!("conv2d kernel must be odd-sized, got {kh}x{kw}"));
        }
        if self.shape(b) != [cout] {
            return Err(shape_err!("conv2d bias must be [{cout}], got {:?}", self.shape(b)));
        }
        let (ho, wo) = ((h + 2 * pad).checked_sub(kh).map(|v| v + 1), (wd + 2 * pad).checked_sub(kw).map(|v| v + 1));
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(shape_err!("conv2d output would be empty for {h}x{wd} input, {kh}x{kw} kernel, pad {pad}"));
        };
        let geom = kernels::ConvGeom { cin, h, w: wd, cout, kh, kw, pad, ho, wo };
        let out = kernels::conv2d_forward(&geom, n, self.data(x), self.data(w), self.data(b));
        flops::add("conv2d", (n * geom.macs()) as u64);
        let shape = if self.shape(x).len() == 3 { vec![cout, ho, wo] } else { vec![n, cout, ho, wo] };
        self.push(Tensor::from_parts(shape, out)?, Op::Conv2d { x, w, b, pad })
    }

    /// Affine map along the last dimension.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (r, din) = rows_cols(&xs);
        let ws = self.shape(w).to_vec();
        let [dout, wdin] = ws[..] else {
            return Err(shape_err!("linear weight must be [Dout,Din], got {ws:?}"));
        };
        if wdin != din {
            return Err(shape_err!("linear expects last dim {wdin}, got {din}"));
        }
        if self.shape(b) != [dout] {
            return Err(shape_err!("linear bias must be [{dout}], got {:?}", self.shape(b)));
        }
        let mut out = vec![T::zero(); r * dout];
        T::gemm(r, din, dout, self.data(x), false, self.data(w), true, &mut out, false);
        let bias = self.data(b);
        for row in out.chunks_mut(dout) {
            row.iter_mut().zip(bias).for_each(|(o, &bv)| *o += bv);
        }
        flops::add("linear", (r * din * dout) as u64);
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        self.push(Tensor::from_parts(shape, out)?, Op::Linear { x, w, b })
    }

    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        self.matmul_labeled(a, b, trans_b, "matmul")
    }

    /// `a · b` (or `a · bᵀ`), counting MACs under `label`.
    pub fn matmul_labeled(&mut self, a: Var, b: Var, trans_b: bool, label: &'static str) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (&[m, k], &[b0, b1]) = (&as_[..], &bs[..]) else {
            return Err(shape_err!("matmul needs rank-2 operands, got {as_:?} and {bs:?}"));
        };
        let (bk, n) = if trans_b { (b1, b0) } else { (b0, b1) };
        if bk != k {
            return Err(shape_err!("matmul inner dims differ: {as_:?} x {bs:?} (trans_b={trans_b})"));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.data(a), false, self.data(b), trans_b, &mut out, false);
        flops::add(label, (m * k * n) as u64);
        self.push(Tensor::from_parts(vec![m, n], out)?, Op::MatMul { a, b, trans_b })
    }

    /// Softmax over the last axis, stabilised by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, d) = rows_cols(self.shape(x));
        if d == 0 {
            return Err(shape_err!("softmax over an empty axis"));
        }
        let out = kernels::softmax_rows(self.data(x), d);
        self.push(Tensor::from_parts(self.shape(x).to_vec(), out)?, Op::Softmax { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| kernels::sigmoid(v)).collect();
        self.push(Tensor::from_parts(self.shape(x).to_vec(), out)?, Op::Sigmoid { x })
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| v * kernels::sigmoid(v)).collect();
        self.push(Tensor::from_parts(self.shape(x).to_vec(), out)?, Op::Silu { x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| v.max(T::zero())).collect();
        self.push(Tensor::from_parts(self.shape(x).to_vec(), out)?, Op::Relu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("add of {:?} and {:?}", self.shape(a), self.shape(b)));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(&p, &q)| p + q).collect();
        self.push(Tensor::from_parts(self.shape(a).to_vec(), out)?, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("mul of {:?} and {:?}", self.shape(a), self.shape(b)));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(&p, &q)| p * q).collect();
        self.push(Tensor::from_parts(self.shape(a).to_vec(), out)?, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| v * s).collect();
        self.push(Tensor::from_parts(self.shape(x).to_vec(), out)?, Op::Scale { x, s })
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().map(|v| v.as_f64()).sum::<f64>();
        self.push(Tensor::scalar(cst(s)), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(shape_err!("mean of an empty tensor"));
        }
        let s = self.sum(x)?;
        self.scale(s, cst(1.0 / n as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push(v, Op::Reshape { x })
    }

    /// Bilinear resize of the two trailing axes with half-pixel centres.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || out_h == 0 || out_w == 0 {
            return Err(shape_err!("bilinear_resize of {xs:?} to {out_h}x{out_w}"));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let plan = ResizePlan::new(h, w, out_h, out_w);
        let out = plan.forward(self.data(x));
        let planes = self.value(x).numel() / (h * w).max(1);
        flops::add("bilinear_resize", (planes * out_h * out_w * 4) as u64);
        let mut shape = xs;
        let r = shape.len();
        shape[r - 2] = out_h;
        shape[r - 1] = out_w;
        self.push(Tensor::from_parts(shape, out)?, Op::Resize { x, plan })
    }

    /// 2×2 average pooling with stride 2 over the two trailing axes.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let r = xs.len();
        if r < 2 || xs[r - 2] % 2 != 0 || xs[r - 1] % 2 != 0 {
            return Err(shape_err!("avg_pool2 needs even trailing dims, got {xs:?}"));
        }
        let out = kernels::avg_pool2_forward(self.data(x), xs[r - 2], xs[r - 1]);
        let mut shape = xs;
        shape[r - 2] /= 2;
        shape[r - 1] /= 2;
        self.push(Tensor::from_parts(shape, out)?, Op::AvgPool2 { x })
    }

    /// RoIAlign of `x: [C,H,W]` over each roi `[x1,y1,x2,y2]` (feature-map
    /// coordinates), giving `[N,C,out_h,out_w]`.
    pub fn roi_align(&mut self, x: Var, rois: &[[f64; 4]], out_h: usize, out_w: usize, samples: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [c, h, w] = xs[..] else {
            return Err(shape_err!("roi_align feature map must be [C,H,W], got {xs:?}"));
        };
        if out_h == 0 || out_w == 0 || samples == 0 {
            return Err(Error::InvalidArgument("roi_align needs positive output size and samples".into()));
        }
        for r in rois {
            if !(r[2] > r[0] && r[3] > r[1]) || r.iter().any(|v| !v.is_finite()) {
                return Err(Error::DegenerateBox { x1: r[0] as f32, y1: r[1] as f32, x2: r[2] as f32, y2: r[3] as f32 });
            }
        }
        let plan = RoiPlan::new(h, w, rois, out_h, out_w, samples);
        let out = plan.forward(self.data(x), c);
        flops::add("roi_align", (rois.len() * c * out_h * out_w * samples * samples * 4) as u64);
        self.push(Tensor::from_parts(vec![rois.len(), c, out_h, out_w], out)?, Op::RoiAlign { x, plan })
    }

    /// `[C,H,W]` → `[H·W, C]`: one row per spatial cell.
    pub fn cells_to_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [c, h, w] = xs[..] else {
            return Err(shape_err!("cells_to_rows needs [C,H,W], got {xs:?}"));
        };
        let out = kernels::transpose(self.data(x), c, h * w);
        self.push(Tensor::from_parts(vec![h * w, c], out)?, Op::CellsToRows { x })
    }

    /// Concatenation along the leading axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| shape_err!("concat_rows of nothing"))?).to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &v in xs {
            let s = self.shape(v);
            if s[1..] != first[1..] {
                return Err(shape_err!("concat_rows of {first:?} and {s:?}"));
            }
            rows += s[0];
            out.extend_from_slice(self.data(v));
        }
        let mut shape = first;
        shape[0] = rows;
        self.push(Tensor::from_parts(shape, out)?, Op::ConcatRows { xs: xs.to_vec() })
    }

    /// Gathers entries of the leading axis.
    pub fn index_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let stride: usize = xs[1..].iter().product();
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            if i >= xs[0] {
                return Err(shape_err!("index_rows index {i} out of range for {xs:?}"));
            }
            out.extend_from_slice(&src[i * stride..(i + 1) * stride]);
        }
        let mut shape = xs;
        shape[0] = idx.len();
        self.push(Tensor::from_parts(shape, out)?, Op::IndexRows { x, idx: idx.to_vec() })
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = self.shape(*xs.first().ok_or_else(|| shape_err!("concat_cols of nothing"))?)[0];
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.len() != 2 || s[0] != rows {
                return Err(shape_err!("concat_cols needs [{rows}, *] operands, got {s:?}"));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &wd) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.data(v)[r * wd..(r + 1) * wd]);
            }
        }
        self.push(Tensor::from_parts(vec![rows, total], out)?, Op::ConcatCols { xs: xs.to_vec() })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [rows, cols] = xs[..] else {
            return Err(shape_err!("slice_cols needs rank 2, got {xs:?}"));
        };
        if start + len > cols {
            return Err(shape_err!("slice_cols {start}..{} out of {cols}", start + len));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        self.push(Tensor::from_parts(vec![rows, len], out)?, Op::SliceCols { x, start })
    }

    /// `x: [N,C,H,W]`, `idx[i] < C` → `[N,H,W]` with plane `i` = `x[i, idx[i]]`.
    pub fn select_channel(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [n, c, h, w] = xs[..] else {
            return Err(shape_err!("select_channel needs [N,C,H,W], got {xs:?}"));
        };
        if idx.len() != n {
            return Err(shape_err!("select_channel got {} indices for N={n}", idx.len()));
        }
        let plane = h * w;
        let src = self.data(x);
        let mut out = Vec::with_capacity(n * plane);
        for (i, &ch) in idx.iter().enumerate() {
            if ch >= c {
                return Err(Error::InvalidArgument(format!("channel {ch} out of range [0, {c})")));
            }
            let off = (i * c + ch) * plane;
            out.extend_from_slice(&src[off..off + plane]);
        }
        self.push(Tensor::from_parts(vec![n, h, w], out)?, Op::SelectChannel { x, idx: idx.to_vec() })
    }

    /// Records a fused op whose forward value was computed by the caller.
    pub fn custom(&mut self, xs: &[Var], value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Result<Var> {
        self.push(value, Op::Custom { xs: xs.to_vec(), op })
    }

    /// Records a scalar loss given its value and its gradient w.r.t. each input.
    pub fn loss(&mut self, name: &'static str, xs: &[Var], value: T, grads: Vec<Option<Vec<T>>>) -> Result<Var> {
        if grads.len() != xs.len() {
            return Err(shape_err!("{name}: {} gradients for {} inputs", grads.len(), xs.len()));
        }
        for (&v, g) in xs.iter().zip(&grads) {
            if let Some(g) = g {
                if g.len() != self.value(v).numel() {
                    return Err(shape_err!("{name}: gradient length {} for input {:?}", g.len(), self.shape(v)));
                }
            }
        }
        self.custom(xs, Tensor::scalar(value), Box::new(PrecomputedLoss { name, grads }))
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err!("backward needs a scalar, got {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let Some(gout) = hi[0].as_deref() else { continue };
            self.backward_node(node, gout, lo);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        // zero-initialised accumulation buffer for an input
        fn buf<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], v: Var, n: usize) -> &'a mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
        }
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, pad } => {
                let (n, cin, h, wd) = dims3(val(*x).shape()).unwrap();
                let ws = val(*w).shape();
                let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
                let ho = h + 2 * pad - kh + 1;
                let wo = wd + 2 * pad - kw + 1;
                let geom = kernels::ConvGeom { cin, h, w: wd, cout, kh, kw, pad: *pad, ho, wo };
                let mut gx = needs(*x).then(|| vec![T::zero(); val(*x).numel()]);
                let mut gw = needs(*w).then(|| vec![T::zero(); val(*w).numel()]);
                let mut gb = needs(*b).then(|| vec![T::zero(); cout]);
                kernels::conv2d_backward(
                    &geom,
                    n,
                    val(*x).data(),
                    val(*w).data(),
                    gout,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                for (v, g) in [(*x, gx), (*w, gw), (*b, gb)] {
                    if let Some(g) = g {
                        let n = g.len();
                        kernels::axpy(buf(grads, v, n), &g);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (r, din) = rows_cols(val(*x).shape());
                let dout = val(*w).shape()[0];
                if needs(*x) {
                    let n = val(*x).numel();
                    T::gemm(r, dout, din, gout, false, val(*w).data(), false, buf(grads, *x, n), true);
                }
                if needs(*w) {
                    let n = val(*w).numel();
                    T::gemm(dout, r, din, gout, true, val(*x).data(), false, buf(grads, *w, n), true);
                }
                if needs(*b) {
                    let gb = buf(grads, *b, dout);
                    for row in gout.chunks(dout) {
                        gb.iter_mut().zip(row).for_each(|(g, &v)| *g += v);
                    }
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = gout.len() / m.max(1);
                if needs(*a) {
                    let len = m * k;
                    // dA = dOut · Bᵀ (B logical k×n)
                    T::gemm(m, n, k, gout, false, val(*b).data(), !*trans_b, buf(grads, *a, len), true);
                }
                if needs(*b) {
                    let len = k * n;
                    if *trans_b {
                        // B stored n×k: dB = dOutᵀ · A
                        T::gemm(n, m, k, gout, true, val(*a).data(), false, buf(grads, *b, len), true);
                    } else {
                        T::gemm(k, m, n, val(*a).data(), true, gout, false, buf(grads, *b, len), true);
                    }
                }
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                let g = buf(grads, *x, y.len());
                for ((yr, gr), dst) in y.chunks(d).zip(gout.chunks(d)).zip(g.chunks_mut(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
                        *o += yv * (gv - dot);
                    }
                }
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                let g = buf(grads, *x, y.len());
                for ((o, &yv), &gv) in g.iter_mut().zip(y).zip(gout) {
                    *o += gv * yv * (T::one() - yv);
                }
            }
            Op::Silu { x } => {
                let xv = val(*x).data();
                let g = buf(grads, *x, xv.len());
                for ((o, &v), &gv) in g.iter_mut().zip(xv).zip(gout) {
                    let s = kernels::sigmoid(v);
                    *o += gv * s * (T::one() + v * (T::one() - s));
                }
            }
            Op::Relu { x } => {
                let xv = val(*x).data();
                let g = buf(grads, *x, xv.len());
                for ((o, &v), &gv) in g.iter_mut().zip(xv).zip(gout) {
                    if v > T::zero() {
                        *o += gv;
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if needs(v) {
                        kernels::axpy(buf(grads, v, gout.len()), gout);
                    }
                }
            }
            Op::Mul { a, b } => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if needs(v) {
                        let o = val(other).data();
                        let g = buf(grads, v, gout.len());
                        g.iter_mut().zip(gout).zip(o).for_each(|((d, &gv), &ov)| *d += gv * ov);
                    }
                }
            }
            Op::Scale { x, s } => {
                let g = buf(grads, *x, gout.len());
                g.iter_mut().zip(gout).for_each(|(d, &gv)| *d += gv * *s);
            }
            Op::Sum { x } => {
                let n = val(*x).numel();
                let g = buf(grads, *x, n);
                g.iter_mut().for_each(|d| *d += gout[0]);
            }
            Op::Reshape { x } => kernels::axpy(buf(grads, *x, gout.len()), gout),
            Op::Resize { x, plan } => plan.backward(gout, buf(grads, *x, val(*x).numel())),
            Op::AvgPool2 { x } => {
                let s = val(*x).shape();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                kernels::avg_pool2_backward(gout, h, w, buf(grads, *x, val(*x).numel()));
            }
            Op::RoiAlign { x, plan } => {
                let c = val(*x).shape()[0];
                plan.backward(gout, c, buf(grads, *x, val(*x).numel()));
            }
            Op::CellsToRows { x } => {
                let s = val(*x).shape();
                let (c, hw) = (s[0], s[1] * s[2]);
                let t = kernels::transpose(gout, hw, c);
                kernels::axpy(buf(grads, *x, t.len()), &t);
            }
            Op::ConcatRows { xs } => {
                let mut off = 0;
                for &v in xs {
                    let n = val(v).numel();
                    if needs(v) {
                        kernels::axpy(buf(grads, v, n), &gout[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::IndexRows { x, idx } => {
                let s = val(*x).shape();
                let stride: usize = s[1..].iter().product();
                let g = buf(grads, *x, val(*x).numel());
                for (k, &i) in idx.iter().enumerate() {
                    kernels::axpy(&mut g[i * stride..(i + 1) * stride], &gout[k * stride..(k + 1) * stride]);
                }
            }
            Op::ConcatCols { xs } => {
                let rows = val(xs[0]).shape()[0];
                let total = gout.len() / rows.max(1);
                let mut col = 0;
                for &v in xs {
                    let wd = val(v).shape()[1];
                    if needs(v) {
                        let g = buf(grads, v, rows * wd);
                        for r in 0..rows {
                            kernels::axpy(&mut g[r * wd..(r + 1) * wd], &gout[r * total + col..r * total + col + wd]);
                        }
                    }
                    col += wd;
                }
            }
            Op::SliceCols { x, start } => {
                let s = val(*x).shape();
                let (rows, cols) = (s[0], s[1]);
                let len = gout.len() / rows.max(1);
                let g = buf(grads, *x, rows * cols);
                for r in 0..rows {
                    kernels::axpy(&mut g[r * cols + start..r * cols + start + len], &gout[r * len..(r + 1) * len]);
                }
            }
            Op::SelectChannel { x, idx } => {
                let s = val(*x).shape();
                let (c, plane) = (s[1], s[2] * s[3]);
                let g = buf(grads, *x, val(*x).numel());
                for (i, &ch) in idx.iter().enumerate() {
                    let off = (i * c + ch) * plane;
                    kernels::axpy(&mut g[off..off + plane], &gout[i * plane..(i + 1) * plane]);
                }
            }
            Op::Custom { xs, op } => {
                let inputs: Vec<&Tensor<T>> = xs.iter().map(|&v| val(v)).collect();
                let gs = op.backward(&inputs, &node.value, gout);
                for (&v, g) in xs.iter().zip(gs) {
                    if let (true, Some(g)) = (needs(v), g) {
                        kernels::axpy(buf(grads, v, g.len()), &g);
                    }
                }
            }
        }
    }
}
