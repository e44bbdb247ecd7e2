//! Reverse-mode gradient tape.
//!
//! Every op appends a node holding its forward value and, when the tape is
//! recording, the parent indices and cached values its adjoint needs. Nodes
//! are appended in evaluation order, so walking indices downward visits them
//! in reverse topological order, each exactly once.
//!
//! A non-recording tape (see [`Tape::inference`]) runs the same code path but
//! stores no graph; calling [`Tape::backward`] on it is a usage error.

use super::{ops, Tensor};
use crate::error::{Error, Result};
use crate::flops::{MacCounter, Section};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    SoftmaxRows(usize),
    Reshape(usize),
    Pool(usize),
    DwConv(usize, usize),
    SliceCols { src: usize, start: usize },
    ConcatCols(Vec<usize>),
    LayerNorm { src: usize, rstd: Vec<f64> },
    Gelu(usize),
    GatherRow { table: usize, row: usize },
    Sum(usize),
    Mean(usize),
}

/// One recorded step: node id is its index on the tape.
#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    recording: bool,
    nodes: Vec<Node>,
    macs: MacCounter,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records the graph for [`Tape::backward`].
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    /// A tape that only evaluates; no backward pass is possible.
    pub fn inference() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(recording: bool) -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            recording,
            nodes: Vec::new(),
            macs: MacCounter::new(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node and zeroes the MAC counter. Outstanding `Var`s
    /// become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.macs = MacCounter::new();
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    pub fn macs(&self) -> &MacCounter {
        &self.macs
    }

    pub fn take_macs(&mut self) -> MacCounter {
        std::mem::take(&mut self.macs)
    }

    /// Charges subsequent matmul/pool/conv MACs to `section`.
    pub fn enter(&mut self, section: Section) {
        self.macs.enter(section);
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let op = if self.recording { Op::Leaf } else { Op::Constant };
        self.push_unchecked(value, op)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Constant)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "Var belongs to a different tape");
        &self.nodes[v.index].value
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op) -> Var {
        let op = if self.recording { op } else { Op::Constant };
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        Ok(self.push_unchecked(value, op))
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::usage("Var was not produced by this tape"));
        }
        Ok(v.index)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    /// Matrix product; charges `m·k·p` MACs to the current section.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = ops::matmul(self.val(ia), self.val(ib))?;
        let (m, k) = (self.val(ia).shape()[0], self.val(ia).shape()[1]);
        self.macs.add((m * k * out.shape()[1]) as u64);
        self.push(out, Op::MatMul(ia, ib), "matmul")
    }

    /// `a · bᵀ`; charges `m·k·p` MACs to the current section.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = ops::matmul_nt(self.val(ia), self.val(ib))?;
        let (m, k) = (self.val(ia).shape()[0], self.val(ia).shape()[1]);
        self.macs.add((m * k * out.shape()[1]) as u64);
        self.push(out, Op::MatMulNt(ia, ib), "matmul_nt")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.val(ia).zip_map(self.val(ib), |x, y| x + y)?;
        self.push(out, Op::Add(ia, ib), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.val(ia).zip_map(self.val(ib), |x, y| x - y)?;
        self.push(out, Op::Sub(ia, ib), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.val(ia).zip_map(self.val(ib), |x, y| x * y)?;
        self.push(out, Op::Mul(ia, ib), "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.val(ia).map(|x| x * factor);
        self.push(out, Op::Scale(ia, factor), "scale")
    }

    /// Adds a `[1×c]` (or `[c]`) row to every row of an `[r×c]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ia, ir) = (self.idx(a)?, self.idx(row)?);
        let (x, r) = (self.val(ia), self.val(ir));
        x.expect_rank(2, "add_row")?;
        let c = x.cols();
        if r.numel() != c {
            return Err(Error::dim(format!(
                "add_row: row {:?} does not match matrix {:?}",
                r.shape(),
                x.shape()
            )));
        }
        let mut data = x.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (o, &b) in chunk.iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        let out = Tensor::raw(x.shape().to_vec(), data);
        self.push(out, Op::AddRow(ia, ir), "add_row")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = ops::softmax_rows(self.val(ia))?;
        self.push(out, Op::SoftmaxRows(ia), "softmax_rows")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.val(ia).clone().reshape(shape)?;
        self.push(out, Op::Reshape(ia), "reshape")
    }

    /// Adaptive average pool of an `[H×W×d]` grid; charges the number of
    /// input additions to the current section.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, target: (usize, usize)) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = ops::adaptive_avg_pool2d(self.val(ix), target)?;
        let s = self.val(ix).shape();
        self.macs.add(ops::pool_add_count((s[0], s[1]), target, s[2]));
        self.push(out, Op::Pool(ix), "adaptive_avg_pool2d")
    }

    /// Depthwise 3×3 conv; charges `9·H·W·d` MACs to the current section.
    pub fn depthwise_conv3x3(&mut self, x: Var, kernels: Var) -> Result<Var> {
        let (ix, ik) = (self.idx(x)?, self.idx(kernels)?);
        let out = ops::depthwise_conv3x3(self.val(ix), self.val(ik))?;
        self.macs.add(9 * out.numel() as u64);
        self.push(out, Op::DwConv(ix, ik), "depthwise_conv3x3")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = ops::slice_cols(self.val(ia), start, len)?;
        self.push(out, Op::SliceCols { src: ia, start }, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = idx.iter().map(|&i| self.val(i)).collect();
        let out = ops::concat_cols(&refs)?;
        self.push(out, Op::ConcatCols(idx), "concat_cols")
    }

    /// Row standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let (out, rstd) = ops::layer_norm_rows(self.val(ia))?;
        self.push(out, Op::LayerNorm { src: ia, rstd }, "layer_norm")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.val(ia).map(ops::gelu);
        self.push(out, Op::Gelu(ia), "gelu")
    }

    /// Row `row` of a matrix as a `[1×c]` matrix.
    pub fn gather_row(&mut self, table: Var, row: usize) -> Result<Var> {
        let it = self.idx(table)?;
        let t = self.val(it);
        t.expect_rank(2, "gather_row")?;
        if row >= t.rows() {
            return Err(Error::dim(format!(
                "gather_row: row {row} out of range for {:?}",
                t.shape()
            )));
        }
        let out = Tensor::raw(vec![1, t.cols()], t.row(row).to_vec());
        self.push(out, Op::GatherRow { table: it, row }, "gather_row")
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = Tensor::scalar(self.val(ia).sum());
        self.push(out, Op::Sum(ia), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        if self.val(ia).numel() == 0 {
            return Err(Error::dim("mean of an empty tensor"));
        }
        let out = Tensor::scalar(self.val(ia).mean());
        self.push(out, Op::Mean(ia), "mean")
    }

    /// Vector-Jacobian products of `output` (seeded with `seed`) with respect
    /// to every differentiable leaf on the tape.
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        if !self.recording {
            return Err(Error::usage("backward on a tape that does not record"));
        }
        let out = self.idx(output)?;
        if let Op::Constant = self.nodes[out].op {
            return Err(Error::usage("backward through an unrecorded tensor"));
        }
        self.val(out).expect_same_shape(seed, "backward seed")?;

        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(out + 1);
        grads.resize_with(out + 1, || None);
        grads[out] = Some(seed.clone());
        let mut leaves = HashMap::new();

        for i in (0..=out).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Leaf => {
                    leaves.insert(i, g);
                }
                Op::MatMul(a, b) => {
                    let da = ops::matmul_nt(&g, self.val(*b))?;
                    let db = ops::matmul_tn(self.val(*a), &g)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulNt(a, b) => {
                    // y = a·bᵀ: da = g·b, db = gᵀ·a
                    let da = ops::matmul(&g, self.val(*b))?;
                    let db = ops::matmul_tn(&g, self.val(*a))?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|x| -x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.val(*b), |x, y| x * y)?;
                    let db = g.zip_map(self.val(*a), |x, y| x * y)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, g.map(|x| x * f)),
                Op::AddRow(a, r) => {
                    let row = self.val(*r);
                    let mut dr = vec![0.0; row.numel()];
                    for chunk in g.data().chunks(dr.len()) {
                        for (o, v) in dr.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *r, Tensor::raw(row.shape().to_vec(), dr));
                    accumulate(&mut grads, *a, g);
                }
                Op::SoftmaxRows(a) => {
                    accumulate(&mut grads, *a, ops::softmax_rows_backward(&node.value, &g));
                }
                Op::Reshape(a) => {
                    let shape = self.val(*a).shape().to_vec();
                    accumulate(&mut grads, *a, g.reshape(&shape)?);
                }
                Op::Pool(a) => {
                    let s = self.val(*a).shape();
                    accumulate(&mut grads, *a, ops::adaptive_avg_pool2d_backward(&g, (s[0], s[1])));
                }
                Op::DwConv(x, k) => {
                    let (dx, dk) = ops::depthwise_conv3x3_backward(self.val(*x), self.val(*k), &g);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *k, dk);
                }
                Op::SliceCols { src, start } => {
                    let s = self.val(*src);
                    let (c, len) = (s.cols(), g.cols());
                    let mut d = vec![0.0; s.numel()];
                    for (drow, grow) in d.chunks_mut(c).zip(g.data().chunks(len)) {
                        drow[*start..start + len].copy_from_slice(grow);
                    }
                    accumulate(&mut grads, *src, Tensor::raw(s.shape().to_vec(), d));
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.val(p).cols();
                        accumulate(&mut grads, p, ops::slice_cols(&g, offset, w)?);
                        offset += w;
                    }
                }
                Op::LayerNorm { src, rstd } => {
                    accumulate(
                        &mut grads,
                        *src,
                        ops::layer_norm_rows_backward(&node.value, rstd, &g),
                    );
                }
                Op::Gelu(a) => {
                    let d = g.zip_map(self.val(*a), |gv, x| gv * ops::gelu_grad(x))?;
                    accumulate(&mut grads, *a, d);
                }
                Op::GatherRow { table, row } => {
                    let t = self.val(*table);
                    let c = t.cols();
                    let mut d = vec![0.0; t.numel()];
                    d[row * c..(row + 1) * c].copy_from_slice(g.data());
                    accumulate(&mut grads, *table, Tensor::raw(t.shape().to_vec(), d));
                }
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    accumulate(&mut grads, *a, Tensor::filled(self.val(*a).shape(), gv));
                }
                Op::Mean(a) => {
                    let src = self.val(*a);
                    let gv = g.data()[0] / src.numel() as f64;
                    accumulate(&mut grads, *a, Tensor::filled(src.shape(), gv));
                }
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                leaves
                    .entry(i)
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: leaves,
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], index: usize, g: Tensor) {
    match &mut grads[index] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient for a differentiable leaf; `None` for constants, interior
    /// nodes or vars from another tape.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(&v.index)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
