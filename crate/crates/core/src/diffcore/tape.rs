//! Wengert-list reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends one node holding its forward value. Nodes are only ever
//! appended, so parents always precede children and a single reverse sweep
//! over the node list is a valid topological traversal.

use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicU32, Ordering};

use super::kernels::{self, ConvGeom};
use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{CsnError, Result};

/// Probability floor used by [`Tape::cross_entropy`].
pub const CE_EPS: f64 = 1e-12;
/// Norm floor in the cosine-similarity denominator.
pub const COSINE_EPS: f64 = 1e-8;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

thread_local! {
    static CORRUPTED_OP: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Deliberately corrupts the backward rule of one op kind on the current
/// thread (negative-control fixture for gradient checking). `None` restores
/// correct behaviour.
pub fn set_corrupted_backward(kind: Option<OpKind>) {
    CORRUPTED_OP.with(|c| c.set(kind));
}

fn corrupted_backward() -> Option<OpKind> {
    CORRUPTED_OP.with(Cell::get)
}

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

/// Op kinds, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Param,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale,
    AddBroadcast,
    Concat,
    Narrow,
    Reshape,
    Conv2d,
    MaxPool2,
    Sum,
    Mean,
    MeanLast,
    Tanh,
    Sigmoid,
    Relu,
    Softmax,
    Log,
    CrossEntropy,
    StopGrad,
    Embedding,
    Cosine,
    BatchOuter,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Param => "param",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddBroadcast => "add_broadcast",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::Reshape => "reshape",
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool2 => "maxpool2",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::MeanLast => "mean_last",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Softmax => "softmax",
            OpKind::Log => "log",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::StopGrad => "stop_grad",
            OpKind::Embedding => "embedding",
            OpKind::Cosine => "cosine",
            OpKind::BatchOuter => "batch_outer",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        OpKind::ALL.iter().copied().find(|k| k.name() == name)
    }

    pub const ALL: [OpKind; 27] = [
        OpKind::Leaf,
        OpKind::Param,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddBroadcast,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::Reshape,
        OpKind::Conv2d,
        OpKind::MaxPool2,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::MeanLast,
        OpKind::Tanh,
        OpKind::Sigmoid,
        OpKind::Relu,
        OpKind::Softmax,
        OpKind::Log,
        OpKind::CrossEntropy,
        OpKind::StopGrad,
        OpKind::Embedding,
        OpKind::Cosine,
        OpKind::BatchOuter,
    ];
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: usize, b: usize, b_t: bool },
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBroadcast { x: usize, y: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    Reshape(usize),
    Conv2d { x: usize, w: usize, geom: ConvGeom, cols: Vec<f64> },
    MaxPool2 { x: usize, argmax: Vec<usize> },
    Sum(usize),
    Mean(usize),
    MeanLast(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Softmax(usize),
    Log(usize),
    CrossEntropy { probs: usize, target: Tensor },
    StopGrad,
    Embedding { table: usize, ids: Vec<usize> },
    Cosine { q: usize, k: usize, qn: Vec<f64>, kn: Vec<f64> },
    BatchOuter { a: usize, b: usize },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param(_) => OpKind::Param,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddBroadcast { .. } => OpKind::AddBroadcast,
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::MeanLast(_) => OpKind::MeanLast,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Relu(_) => OpKind::Relu,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Log(_) => OpKind::Log,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::StopGrad => OpKind::StopGrad,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::Cosine { .. } => OpKind::Cosine,
            Op::BatchOuter { .. } => OpKind::BatchOuter,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Counters kept by a tape for instrumentation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TapeStats {
    pub nodes: usize,
    pub backward_passes: usize,
    pub ce_clamps: usize,
}

/// Gradients produced by one backward traversal, indexed by node.
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient at `var`, or `None` when the node received no gradient
    /// (it does not influence the root, or sits behind a stop-gradient).
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index()).and_then(Option::as_ref)
    }

    /// Gradient at `var`, zero-filled when absent.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    /// Adds every parameter-leaf gradient into the store's `grad` buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(pid, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                let dst = store.get_mut(pid).grad.data_mut();
                for (d, s) in dst.iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
        }
    }

    /// Summed gradient with respect to one parameter (a parameter may be
    /// entered on the tape more than once).
    pub fn param_grad(&self, pid: ParamId, shape: &[usize]) -> Tensor {
        let mut out = Tensor::zeros(shape);
        for &(p, node) in &self.params {
            if p == pid {
                if let Some(g) = &self.grads[node] {
                    for (d, s) in out.data_mut().iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
            }
        }
        out
    }
}

/// Operation record for one forward computation.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    grad_enabled: bool,
    stats: TapeStats,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grad_enabled: true,
            stats: TapeStats::default(),
        }
    }

    /// A tape that only evaluates: nothing requires a gradient and
    /// [`Tape::backward`] is refused.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn stats(&self) -> TapeStats {
        TapeStats {
            nodes: self.nodes.len(),
            ..self.stats
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        debug_assert_eq!(v.tape, self.id, "var from another tape");
        &self.nodes[v.index()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.index()].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index()].requires_grad
    }

    /// Op kinds present on the tape, in first-appearance order.
    pub fn op_kinds(&self) -> Vec<OpKind> {
        let mut out = Vec::new();
        for n in &self.nodes {
            let k = n.op.kind();
            if !out.contains(&k) {
                out.push(k);
            }
        }
        out
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(CsnError::Usage("variable does not belong to this tape".into()));
        }
        Ok(v.index())
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(CsnError::Numeric { op: op.kind().name() });
        }
        let requires_grad = self.grad_enabled
            && match op {
                Op::Param(_) => true,
                Op::Leaf | Op::StopGrad => false,
                _ => inputs.iter().any(|&i| self.nodes[i].requires_grad),
            };
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            idx: idx as u32,
        })
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    // ---------------------------------------------------------------- leaves

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, &[])
    }

    /// Enters the current value of a parameter on the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        self.push(store.value(id).clone(), Op::Param(id), &[])
    }

    // ------------------------------------------------------------ linear ops

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · bᵀ` with `b` stored `[n×k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.val(ia).shape(), self.val(ib).shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(CsnError::dim(
                "matmul",
                format!("expected 2-D operands, got {sa:?} and {sb:?}"),
            ));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if b_t { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(CsnError::dim(
                "matmul",
                format!("inner dimensions differ: {sa:?} x {sb:?}{}", if b_t { "ᵀ" } else { "" }),
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.val(ia).data(), false, self.val(ib).data(), b_t, &mut out, 0.0);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a: ia, b: ib, b_t }, &[ia, ib])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let s = self.val(ix).shape();
        if s.len() != 2 {
            return Err(CsnError::dim("transpose", format!("expected 2-D, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.val(ix).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(ix), &[ix])
    }

    // ----------------------------------------------------------- elementwise

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa != sb {
            return Err(CsnError::dim(op, format!("shape {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_map(&self, a: usize, b: usize, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.val(a), self.val(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape("add", ia, ib)?;
        let v = self.zip_map(ia, ib, |x, y| x + y);
        self.push(v, Op::Add(ia, ib), &[ia, ib])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape("sub", ia, ib)?;
        let v = self.zip_map(ia, ib, |x, y| x - y);
        self.push(v, Op::Sub(ia, ib), &[ia, ib])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape("mul", ia, ib)?;
        let v = self.zip_map(ia, ib, |x, y| x * y);
        self.push(v, Op::Mul(ia, ib), &[ia, ib])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let ix = self.check(x)?;
        let v = self.val(ix).map(|t| t * c);
        self.push(v, Op::Scale(ix, c), &[ix])
    }

    /// `x + y` where `y` has the rank of `x` and every axis of `y` is either
    /// equal to that of `x` or 1 (broadcast).
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (ix, iy) = (self.check(x)?, self.check(y)?);
        let (sx, sy) = (self.val(ix).shape(), self.val(iy).shape());
        if sx.len() != sy.len() || sx.iter().zip(sy).any(|(&a, &b)| b != a && b != 1) {
            return Err(CsnError::dim(
                "add_broadcast",
                format!("cannot broadcast {sy:?} onto {sx:?}"),
            ));
        }
        let map = broadcast_index(sx, sy);
        let yd = self.val(iy).data();
        let data = self
            .val(ix)
            .data()
            .iter()
            .zip(&map)
            .map(|(&a, &j)| a + yd[j])
            .collect();
        let v = Tensor::from_parts(sx.to_vec(), data);
        self.push(v, Op::AddBroadcast { x: ix, y: iy }, &[ix, iy])
    }

    // ------------------------------------------------------------- structure

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect::<Result<_>>()?;
        let first = idx
            .first()
            .map(|&i| self.val(i).shape().to_vec())
            .ok_or_else(|| CsnError::dim("concat", "no inputs"))?;
        if axis >= first.len() {
            return Err(CsnError::dim("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &i in &idx {
            let s = self.val(i).shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(CsnError::dim("concat", format!("{s:?} incompatible with {first:?}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &idx {
                let len = self.val(i).shape()[axis] * inner;
                data.extend_from_slice(&self.val(i).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(Tensor::from_parts(shape, data), Op::Concat { parts: idx.clone(), axis }, &idx)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let s = self.val(ix).shape().to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(CsnError::dim(
                "narrow",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.val(ix).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push(Tensor::from_parts(shape, data), Op::Narrow { x: ix, axis, start }, &[ix])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let v = self.val(ix).reshape(shape).map_err(|_| {
            CsnError::dim(
                "reshape",
                format!("{:?} -> {shape:?}", self.val(ix).shape()),
            )
        })?;
        self.push(v, Op::Reshape(ix), &[ix])
    }

    // ------------------------------------------------------------ vision ops

    /// Stride-1 convolution of `x[N, C, H, W]` with `w[O, C, k, k]` and
    /// zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let (sx, sw) = (self.val(ix).shape().to_vec(), self.val(iw).shape().to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] {
            return Err(CsnError::dim(
                "conv2d",
                format!("expected x[N,C,H,W] and square w[O,C,k,k], got {sx:?} and {sw:?}"),
            ));
        }
        if sx[1] != sw[1] {
            return Err(CsnError::dim(
                "conv2d",
                format!("input has {} channels, kernel expects {}", sx[1], sw[1]),
            ));
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            h: sx[2],
            w: sx[3],
            k: sw[2],
            pad,
        };
        if geom.h + 2 * pad < geom.k || geom.w + 2 * pad < geom.k {
            return Err(CsnError::dim("conv2d", "kernel larger than padded input"));
        }
        let out_ch = sw[0];
        let (ho, wo) = (geom.out_h(), geom.out_w());
        let cols = kernels::im2col(self.val(ix).data(), &geom);
        let npos = geom.positions();
        let mut mat = vec![0.0; out_ch * npos];
        kernels::gemm(out_ch, geom.patch_len(), npos, self.val(iw).data(), false, &cols, false, &mut mat, 0.0);
        let plane = ho * wo;
        let mut out = vec![0.0; out_ch * npos];
        for n in 0..geom.batch {
            for o in 0..out_ch {
                out[(n * out_ch + o) * plane..][..plane]
                    .copy_from_slice(&mat[o * npos + n * plane..][..plane]);
            }
        }
        let shape = vec![geom.batch, out_ch, ho, wo];
        let keep = self.grad_enabled
            && (self.nodes[ix].requires_grad || self.nodes[iw].requires_grad);
        let cols = if keep { cols } else { Vec::new() };
        self.push(
            Tensor::from_parts(shape, out),
            Op::Conv2d { x: ix, w: iw, geom, cols },
            &[ix, iw],
        )
    }

    /// 2×2 stride-2 max pooling over the last two axes (ceil-mode size).
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let s = self.val(ix).shape().to_vec();
        if s.len() < 2 {
            return Err(CsnError::dim("maxpool2", format!("expected rank >= 2, got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes: usize = s[..s.len() - 2].iter().product();
        let (out, argmax) = kernels::maxpool2(self.val(ix).data(), planes, h, w);
        let mut shape = s;
        let r = shape.len();
        shape[r - 2] = h.div_ceil(2);
        shape[r - 1] = w.div_ceil(2);
        self.push(Tensor::from_parts(shape, out), Op::MaxPool2 { x: ix, argmax }, &[ix])
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let v = Tensor::scalar(self.val(ix).sum());
        self.push(v, Op::Sum(ix), &[ix])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let t = self.val(ix);
        let v = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(v, Op::Mean(ix), &[ix])
    }

    /// Mean over the last axis.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let s = self.val(ix).shape().to_vec();
        if s.is_empty() {
            return Err(CsnError::dim("mean_last", "scalar input"));
        }
        let n = s[s.len() - 1];
        let data = self
            .val(ix)
            .data()
            .chunks(n)
            .map(|c| c.iter().sum::<f64>() / n as f64)
            .collect();
        let shape = s[..s.len() - 1].to_vec();
        self.push(Tensor::from_parts(shape, data), Op::MeanLast(ix), &[ix])
    }

    // ----------------------------------------------------------- activations

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let v = self.val(ix).map(f64::tanh);
        self.push(v, Op::Tanh(ix), &[ix])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let v = self.val(ix).map(sigmoid);
        self.push(v, Op::Sigmoid(ix), &[ix])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let v = self.val(ix).map(|t| if t > 0.0 { t } else { 0.0 });
        self.push(v, Op::Relu(ix), &[ix])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let v = self.val(ix).map(f64::ln);
        self.push(v, Op::Log(ix), &[ix])
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let t = self.val(ix);
        let n = *t
            .shape()
            .last()
            .ok_or_else(|| CsnError::dim("softmax", "scalar input"))?;
        let mut data = Vec::with_capacity(t.numel());
        for row in t.data().chunks(n) {
            softmax_into(row, &mut data);
        }
        let v = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(v, Op::Softmax(ix), &[ix])
    }

    /// `−Σ target · log(probs)` summed over all rows. Probabilities below
    /// [`CE_EPS`] at target mass are clamped and counted in the tape stats.
    /// When `probs` is a softmax node the backward rule is fused and hands
    /// `probs · Σtarget − target` straight to the logits.
    pub fn cross_entropy(&mut self, probs: Var, target: &Tensor) -> Result<Var> {
        let ip = self.check(probs)?;
        let p = self.val(ip);
        if p.shape() != target.shape() {
            return Err(CsnError::dim(
                "cross_entropy",
                format!("probs {:?} vs target {:?}", p.shape(), target.shape()),
            ));
        }
        let mut loss = 0.0;
        let mut clamps = 0;
        for (&pv, &y) in p.data().iter().zip(target.data()) {
            if y != 0.0 {
                if pv < CE_EPS {
                    clamps += 1;
                }
                loss -= y * pv.max(CE_EPS).ln();
            }
        }
        self.stats.ce_clamps += clamps;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs: ip,
                target: target.clone(),
            },
            &[ip],
        )
    }

    /// Identity forward, zero backward.
    pub fn stop_grad(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let v = self.val(ix).clone();
        self.push(v, Op::StopGrad, &[ix])
    }

    /// Row gather: `out[i] = table[ids[i]]`, shape `[ids.len(), E]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.check(table)?;
        let s = self.val(it).shape();
        if s.len() != 2 {
            return Err(CsnError::dim("embedding", format!("table must be 2-D, got {s:?}")));
        }
        let (vocab, e) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(CsnError::dim("embedding", format!("id {bad} outside vocabulary of {vocab}")));
        }
        if ids.is_empty() {
            return Err(CsnError::dim("embedding", "no ids"));
        }
        let src = self.val(it).data();
        let mut data = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            data.extend_from_slice(&src[i * e..(i + 1) * e]);
        }
        let v = Tensor::from_parts(vec![ids.len(), e], data);
        self.push(v, Op::Embedding { table: it, ids: ids.to_vec() }, &[it])
    }

    /// Pairwise cosine similarity of rows: `q[m, d]`, `k[n, d]` → `[m, n]`,
    /// with the norm product floored at [`COSINE_EPS`].
    pub fn cosine(&mut self, q: Var, k: Var) -> Result<Var> {
        let (iq, ik) = (self.check(q)?, self.check(k)?);
        let (sq, sk) = (self.val(iq).shape(), self.val(ik).shape());
        if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
            return Err(CsnError::dim("cosine", format!("{sq:?} vs {sk:?}")));
        }
        let (m, n, d) = (sq[0], sk[0], sq[1]);
        let qn = row_norms(self.val(iq).data(), d);
        let kn = row_norms(self.val(ik).data(), d);
        let mut dots = vec![0.0; m * n];
        kernels::gemm(m, d, n, self.val(iq).data(), false, self.val(ik).data(), true, &mut dots, 0.0);
        for j in 0..m {
            for i in 0..n {
                dots[j * n + i] /= (qn[j] * kn[i]).max(COSINE_EPS);
            }
        }
        let v = Tensor::from_parts(vec![m, n], dots);
        self.push(v, Op::Cosine { q: iq, k: ik, qn, kn }, &[iq, ik])
    }

    /// Per-row outer product: `a[n, L]`, `b[n, C]` → `[n, L, C]`.
    pub fn batch_outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.val(ia).shape(), self.val(ib).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(CsnError::dim("batch_outer", format!("{sa:?} vs {sb:?}")));
        }
        let (n, l, c) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.val(ia).data(), self.val(ib).data());
        let mut data = Vec::with_capacity(n * l * c);
        for r in 0..n {
            for i in 0..l {
                let av = ad[r * l + i];
                data.extend(bd[r * c..(r + 1) * c].iter().map(|&bv| av * bv));
            }
        }
        let v = Tensor::from_parts(vec![n, l, c], data);
        self.push(v, Op::BatchOuter { a: ia, b: ib }, &[ia, ib])
    }

    // -------------------------------------------------------------- backward

    /// Reverse sweep from a scalar root. Every node is visited at most once.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        let ir = self.check(root)?;
        if !self.grad_enabled {
            return Err(CsnError::Usage("backward called on a no-grad tape".into()));
        }
        if self.nodes[ir].value.numel() != 1 {
            return Err(CsnError::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[ir].value.shape()
            )));
        }
        self.stats.backward_passes += 1;
        let corrupt = corrupted_backward();
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(ir + 1);
        grads.resize_with(ir + 1, || None);
        if self.nodes[ir].requires_grad {
            grads[ir] = Some(Tensor::full(self.nodes[ir].value.shape(), 1.0));
        }
        let mut params = Vec::new();
        for i in (0..=ir).rev() {
            let node = &self.nodes[i];
            if let Op::Param(pid) = node.op {
                params.push((pid, i));
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            if !node.requires_grad {
                continue;
            }
            let scaled;
            let g = if corrupt == Some(node.op.kind()) {
                scaled = g.map(|v| 1.5 * v);
                &scaled
            } else {
                g
            };
            self.backward_node(i, g, lower);
        }
        params.reverse();
        Ok(Gradients {
            tape: self.id,
            grads,
            params,
        })
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let gd = g.data();
        match &nodes[i].op {
            Op::Leaf | Op::Param(_) | Op::StopGrad => {}
            Op::MatMul { a, b, b_t } => {
                let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
                let (m, k) = (sa[0], sa[1]);
                let n = out.shape()[1];
                if nodes[*a].requires_grad {
                    let da = slot(grads, nodes, *a);
                    // da[m×k] += g[m×n] · op(b)ᵀ
                    kernels::gemm(m, n, k, gd, false, nodes[*b].value.data(), !*b_t, da, 1.0);
                }
                if nodes[*b].requires_grad {
                    let db = slot(grads, nodes, *b);
                    if *b_t {
                        // db[n×k] += gᵀ · a
                        kernels::gemm(n, m, k, gd, true, nodes[*a].value.data(), false, db, 1.0);
                    } else {
                        // db[k×n] += aᵀ · g
                        kernels::gemm(k, m, n, nodes[*a].value.data(), true, gd, false, db, 1.0);
                    }
                    debug_assert_eq!(sb.iter().product::<usize>(), k * n);
                }
            }
            Op::Transpose(x) => {
                if nodes[*x].requires_grad {
                    let (r, c) = (nodes[*x].value.shape()[0], nodes[*x].value.shape()[1]);
                    let dx = slot(grads, nodes, *x);
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += gd[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(grads, nodes, *a, gd, |v| v);
                add_into(grads, nodes, *b, gd, |v| v);
            }
            Op::Sub(a, b) => {
                add_into(grads, nodes, *a, gd, |v| v);
                add_into(grads, nodes, *b, gd, |v| -v);
            }
            Op::Mul(a, b) => {
                if nodes[*a].requires_grad {
                    let bv = nodes[*b].value.data();
                    let da = slot(grads, nodes, *a);
                    for ((d, &gv), &y) in da.iter_mut().zip(gd).zip(bv) {
                        *d += gv * y;
                    }
                }
                if nodes[*b].requires_grad {
                    let av = nodes[*a].value.data();
                    let db = slot(grads, nodes, *b);
                    for ((d, &gv), &x) in db.iter_mut().zip(gd).zip(av) {
                        *d += gv * x;
                    }
                }
            }
            Op::Scale(x, c) => add_into(grads, nodes, *x, gd, |v| v * c),
            Op::AddBroadcast { x, y } => {
                add_into(grads, nodes, *x, gd, |v| v);
                if nodes[*y].requires_grad {
                    let map = broadcast_index(out.shape(), nodes[*y].value.shape());
                    let dy = slot(grads, nodes, *y);
                    for (&gv, &j) in gd.iter().zip(&map) {
                        dy[j] += gv;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let s = out.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p].value.shape()[*axis] * inner;
                    if nodes[p].requires_grad {
                        let dp = slot(grads, nodes, p);
                        for o in 0..outer {
                            let src = &gd[o * total + offset..][..len];
                            for (d, s) in dp[o * len..(o + 1) * len].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                if nodes[*x].requires_grad {
                    let s = nodes[*x].value.shape();
                    let outer: usize = s[..*axis].iter().product();
                    let inner: usize = s[axis + 1..].iter().product();
                    let len = out.shape()[*axis] * inner;
                    let full = s[*axis];
                    let dx = slot(grads, nodes, *x);
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        for (d, s) in dx[base..base + len].iter_mut().zip(&gd[o * len..(o + 1) * len]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Reshape(x) => add_into(grads, nodes, *x, gd, |v| v),
            Op::Conv2d { x, w, geom, cols } => {
                let out_ch = nodes[*w].value.shape()[0];
                let npos = geom.positions();
                let plane = geom.out_h() * geom.out_w();
                let mut gmat = vec![0.0; out_ch * npos];
                for n in 0..geom.batch {
                    for o in 0..out_ch {
                        gmat[o * npos + n * plane..][..plane]
                            .copy_from_slice(&gd[(n * out_ch + o) * plane..][..plane]);
                    }
                }
                let klen = geom.patch_len();
                if nodes[*w].requires_grad {
                    let dw = slot(grads, nodes, *w);
                    kernels::gemm(out_ch, npos, klen, &gmat, false, cols, true, dw, 1.0);
                }
                if nodes[*x].requires_grad {
                    let mut dcols = vec![0.0; klen * npos];
                    kernels::gemm(klen, out_ch, npos, nodes[*w].value.data(), true, &gmat, false, &mut dcols, 0.0);
                    let dx = slot(grads, nodes, *x);
                    kernels::col2im_add(&dcols, geom, dx);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if nodes[*x].requires_grad {
                    let dx = slot(grads, nodes, *x);
                    for (&gv, &j) in gd.iter().zip(argmax) {
                        dx[j] += gv;
                    }
                }
            }
            Op::Sum(x) => {
                let gv = gd[0];
                add_fill(grads, nodes, *x, gv);
            }
            Op::Mean(x) => {
                let gv = gd[0] / nodes[*x].value.numel() as f64;
                add_fill(grads, nodes, *x, gv);
            }
            Op::MeanLast(x) => {
                if nodes[*x].requires_grad {
                    let n = *nodes[*x].value.shape().last().unwrap_or(&1);
                    let dx = slot(grads, nodes, *x);
                    for (chunk, &gv) in dx.chunks_mut(n).zip(gd) {
                        chunk.iter_mut().for_each(|d| *d += gv / n as f64);
                    }
                }
            }
            Op::Tanh(x) => {
                if nodes[*x].requires_grad {
                    let dx = slot(grads, nodes, *x);
                    for ((d, &gv), &y) in dx.iter_mut().zip(gd).zip(out.data()) {
                        *d += gv * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if nodes[*x].requires_grad {
                    let dx = slot(grads, nodes, *x);
                    for ((d, &gv), &y) in dx.iter_mut().zip(gd).zip(out.data()) {
                        *d += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Relu(x) => {
                if nodes[*x].requires_grad {
                    let xv = nodes[*x].value.data();
                    let dx = slot(grads, nodes, *x);
                    for ((d, &gv), &a) in dx.iter_mut().zip(gd).zip(xv) {
                        if a > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Log(x) => {
                if nodes[*x].requires_grad {
                    let xv = nodes[*x].value.data();
                    let dx = slot(grads, nodes, *x);
                    for ((d, &gv), &a) in dx.iter_mut().zip(gd).zip(xv) {
                        *d += gv / a;
                    }
                }
            }
            Op::Softmax(x) => {
                if nodes[*x].requires_grad {
                    let n = *out.shape().last().unwrap_or(&1);
                    let dx = slot(grads, nodes, *x);
                    for ((drow, grow), prow) in dx.chunks_mut(n).zip(gd.chunks(n)).zip(out.data().chunks(n)) {
                        let dot: f64 = grow.iter().zip(prow).map(|(a, b)| a * b).sum();
                        for ((d, &gv), &p) in drow.iter_mut().zip(grow).zip(prow) {
                            *d += p * (gv - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy { probs, target } => {
                let gv = gd[0];
                let p = &nodes[*probs];
                if let Op::Softmax(z) = p.op {
                    if nodes[z].requires_grad {
                        let n = *p.value.shape().last().unwrap_or(&1);
                        let dz = slot(grads, nodes, z);
                        for ((drow, prow), yrow) in dz
                            .chunks_mut(n)
                            .zip(p.value.data().chunks(n))
                            .zip(target.data().chunks(n))
                        {
                            let mass: f64 = yrow.iter().sum();
                            for ((d, &pv), &y) in drow.iter_mut().zip(prow).zip(yrow) {
                                *d += gv * (pv * mass - y);
                            }
                        }
                    }
                } else if p.requires_grad {
                    let pv = p.value.data();
                    let dp = slot(grads, nodes, *probs);
                    for ((d, &pr), &y) in dp.iter_mut().zip(pv).zip(target.data()) {
                        if y != 0.0 {
                            *d -= gv * y / pr.max(CE_EPS);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if nodes[*table].requires_grad {
                    let e = nodes[*table].value.shape()[1];
                    let dt = slot(grads, nodes, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, s) in dt[id * e..(id + 1) * e].iter_mut().zip(&gd[r * e..(r + 1) * e]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Cosine { q, k, qn, kn } => {
                let d = nodes[*q].value.shape()[1];
                let (m, n) = (qn.len(), kn.len());
                let (qv, kv, c) = (nodes[*q].value.data(), nodes[*k].value.data(), out.data());
                if nodes[*q].requires_grad {
                    let dq = slot(grads, nodes, *q);
                    for j in 0..m {
                        for i in 0..n {
                            let gv = gd[j * n + i];
                            let denom = qn[j] * kn[i];
                            let (wk, wq) = if denom >= COSINE_EPS {
                                (gv / denom, -gv * c[j * n + i] / (qn[j] * qn[j]))
                            } else {
                                (gv / COSINE_EPS, 0.0)
                            };
                            for t in 0..d {
                                dq[j * d + t] += wk * kv[i * d + t] + wq * qv[j * d + t];
                            }
                        }
                    }
                }
                if nodes[*k].requires_grad {
                    let dk = slot(grads, nodes, *k);
                    for j in 0..m {
                        for i in 0..n {
                            let gv = gd[j * n + i];
                            let denom = qn[j] * kn[i];
                            let (wq, wk) = if denom >= COSINE_EPS {
                                (gv / denom, -gv * c[j * n + i] / (kn[i] * kn[i]))
                            } else {
                                (gv / COSINE_EPS, 0.0)
                            };
                            for t in 0..d {
                                dk[i * d + t] += wq * qv[j * d + t] + wk * kv[i * d + t];
                            }
                        }
                    }
                }
            }
            Op::BatchOuter { a, b } => {
                let (n, l) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                let c = nodes[*b].value.shape()[1];
                if nodes[*a].requires_grad {
                    let bv = nodes[*b].value.data();
                    let da = slot(grads, nodes, *a);
                    for r in 0..n {
                        for i in 0..l {
                            let g_row = &gd[(r * l + i) * c..][..c];
                            da[r * l + i] += g_row.iter().zip(&bv[r * c..][..c]).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if nodes[*b].requires_grad {
                    let av = nodes[*a].value.data();
                    let db = slot(grads, nodes, *b);
                    for r in 0..n {
                        for i in 0..l {
                            let w = av[r * l + i];
                            let g_row = &gd[(r * l + i) * c..][..c];
                            for (d, gv) in db[r * c..][..c].iter_mut().zip(g_row) {
                                *d += w * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], nodes: &[Node], i: usize) -> &'a mut [f64] {
    grads[i]
        .get_or_insert_with(|| Tensor::zeros(nodes[i].value.shape()))
        .data_mut()
}

fn add_into(grads: &mut [Option<Tensor>], nodes: &[Node], i: usize, g: &[f64], f: impl Fn(f64) -> f64) {
    if nodes[i].requires_grad {
        for (d, &v) in slot(grads, nodes, i).iter_mut().zip(g) {
            *d += f(v);
        }
    }
}

fn add_fill(grads: &mut [Option<Tensor>], nodes: &[Node], i: usize, v: f64) {
    if nodes[i].requires_grad {
        slot(grads, nodes, i).iter_mut().for_each(|d| *d += v);
    }
}

/// Flat index into `small` for every element of `big` under broadcasting.
fn broadcast_index(big: &[usize], small: &[usize]) -> Vec<usize> {
    let rank = big.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if small[d] == 1 { 0 } else { acc };
        acc *= small[d];
    }
    let numel: usize = big.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..numel {
        out.push(flat);
        for d in (0..rank).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < big[d] {
                break;
            }
            flat -= strides[d] * big[d];
            idx[d] = 0;
        }
    }
    out
}

fn row_norms(data: &[f64], d: usize) -> Vec<f64> {
    data.chunks(d)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Appends the max-subtracted softmax of `row` to `out`.
pub(crate) fn softmax_into(row: &[f64], out: &mut Vec<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let start = out.len();
    let mut total = 0.0;
    for &v in row {
        let e = (v - max).exp();
        total += e;
        out.push(e);
    }
    out[start..].iter_mut().for_each(|e| *e /= total);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let mut tape = Tape::new();
        let i3 = tape.constant(Tensor::identity(3)).unwrap();
        let a = tape
            .constant(t(&[3, 3], &[1.0, -2.0, 3.5, 0.25, 9.0, -1.0, 4.0, 4.0, 0.0]))
            .unwrap();
        let out = tape.matmul(i3, a).unwrap();
        assert_eq!(tape.value(out), tape.value(a));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[5])).unwrap();
        let p = tape.softmax(z).unwrap();
        for &v in tape.value(p).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn centre_tap_kernel_is_identity_convolution() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 5 * 4).map(|i| (i as f64 * 0.7).sin()).collect();
        let x = tape.constant(t(&[2, 1, 5, 4], &data)).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = tape.constant(t(&[1, 1, 3, 3], &k)).unwrap();
        let y = tape.conv2d(x, w, 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn sum_backward_is_all_ones() {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let id = store.add("x", t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let x = tape.param(&store, id).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn tanh_slope_at_zero_is_one() {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let id = store.add("a", Tensor::scalar(0.0)).unwrap();
        let a = tape.param(&store, id).unwrap();
        let y = tape.tanh(a).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(a).unwrap().item(), 1.0);
    }

    #[test]
    fn softmax_ce_gradient_is_prediction_minus_target() {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let id = store.add("z", t(&[4], &[0.3, -1.2, 2.0, 0.1])).unwrap();
        let z = tape.param(&store, id).unwrap();
        let p = tape.softmax(z).unwrap();
        let y = t(&[4], &[0.0, 0.0, 1.0, 0.0]);
        let loss = tape.cross_entropy(p, &y).unwrap();
        let g = tape.backward(loss).unwrap();
        let want: Vec<f64> = tape.value(p).data().iter().zip(y.data()).map(|(a, b)| a - b).collect();
        for (a, b) in g.get(z).unwrap().data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut tape = Tape::new();
        let uniform = tape.constant(Tensor::full(&[5], 0.2)).unwrap();
        let y = t(&[5], &[0.0, 1.0, 0.0, 0.0, 0.0]);
        let l = tape.cross_entropy(uniform, &y).unwrap();
        assert!((tape.value(l).item() - 5f64.ln()).abs() < 1e-12);
        assert!((tape.value(l).item() - 1.60944).abs() < 1e-5);

        let perfect = tape.constant(y.clone()).unwrap();
        let l = tape.cross_entropy(perfect, &y).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let half = tape.constant(t(&[2], &[0.5, 0.5])).unwrap();
        let l = tape.cross_entropy(half, &t(&[2], &[1.0, 0.0])).unwrap();
        assert!((tape.value(l).item() - 0.69315).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let mut tape = Tape::new();
        let p = tape.constant(t(&[2], &[0.0, 1.0])).unwrap();
        let l = tape.cross_entropy(p, &t(&[2], &[1.0, 0.0])).unwrap();
        assert!((tape.value(l).item() + CE_EPS.ln()).abs() < 1e-9);
        assert_eq!(tape.stats().ce_clamps, 1);
    }

    #[test]
    fn stop_grad_blocks_upstream() {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let id = store.add("x", t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let x = tape.param(&store, id).unwrap();
        let y = tape.tanh(x).unwrap();
        let blocked = tape.stop_grad(y).unwrap();
        let z = tape.mul(blocked, x).unwrap();
        let s = tape.sum(z).unwrap();
        let g = tape.backward(s).unwrap();
        // only the direct path through `x` contributes
        assert_eq!(g.get(x).unwrap(), tape.value(blocked));
        assert!(g.get(blocked).is_none() || !tape.requires_grad(blocked));
        let zero_path = g.get(y);
        assert!(zero_path.is_none());
    }

    #[test]
    fn foreign_var_is_a_usage_error() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.constant(Tensor::scalar(1.0)).unwrap();
        let _ = b.constant(Tensor::scalar(1.0)).unwrap();
        assert!(matches!(b.backward(x), Err(CsnError::Usage(_))));
        assert!(matches!(b.tanh(x), Err(CsnError::Usage(_))));
    }

    #[test]
    fn backward_needs_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(tape.backward(x), Err(CsnError::Usage(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        assert!(matches!(err, CsnError::Dimension { op: "matmul", .. }));
        let c = tape.constant(Tensor::zeros(&[3])).unwrap();
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn non_finite_output_names_the_op() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2])).unwrap();
        let err = tape.log(z).unwrap_err();
        assert!(matches!(err, CsnError::Numeric { op: "log" }));
    }

    #[test]
    fn broadcast_index_channel_pattern() {
        let map = broadcast_index(&[2, 3, 2, 2], &[1, 3, 1, 1]);
        assert_eq!(&map[..8], &[0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(map[12], 0);
        let map = broadcast_index(&[2, 3], &[1, 3]);
        assert_eq!(map, vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn corrupted_backward_changes_only_that_op() {
        let run = || {
            let mut tape = Tape::new();
            let mut store = ParamStore::new();
            let id = store.add("x", Tensor::scalar(0.3)).unwrap();
            let x = tape.param(&store, id).unwrap();
            let y = tape.tanh(x).unwrap();
            let g = tape.backward(y).unwrap();
            g.get(x).unwrap().item()
        };
        let clean = run();
        set_corrupted_backward(Some(OpKind::Sigmoid));
        assert_eq!(run(), clean);
        set_corrupted_backward(Some(OpKind::Tanh));
        assert!((run() - 1.5 * clean).abs() < 1e-15);
        set_corrupted_backward(None);
    }
}
