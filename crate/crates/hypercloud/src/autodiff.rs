//! Tape-based reverse-mode automatic differentiation over dense f64 tensors.
//!
//! The tape records every primitive application in forward order; values are
//! computed eagerly. [`Tape::backward`] sweeps the records in reverse and
//! accumulates vector-Jacobian products into one gradient slot per node.
//!
//! Conventions that affect bit-exactness (and are pinned by tests):
//! - relu's subgradient at 0 is 0;
//! - max-over-rows breaks ties toward the lowest row index;
//! - every reduction runs in a fixed sequential order per output element,
//!   so results do not depend on thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit reals. Immutable once created.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                details: format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Scalar tensor (rank 0).
    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![v; numel] }
    }

    /// Row-major matrix from a slice of equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Shape { op: "tensor", details: "from_rows needs at least one row".into() });
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "tensor",
                    details: format!("row {} has {} entries, expected {}", i, r.len(), cols),
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Exactly one element, any rank.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }
}

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded primitive with its saved backward context.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    /// Same-shape addition, or a row bias broadcast over the rows of a matrix.
    Add { a: NodeId, b: NodeId, row_broadcast: bool },
    Mul { a: NodeId, b: NodeId },
    Relu { x: NodeId },
    Tanh { x: NodeId },
    Exp { x: NodeId },
    Log { x: NodeId },
    Neg { x: NodeId },
    SumAll { x: NodeId },
    /// Column-wise max over the set (row) dimension; argmax row per column
    /// saved for routing the gradient.
    MaxOverRows { x: NodeId, argmax: Vec<usize> },
    /// Contiguous range of the flattened input.
    Slice { x: NodeId, start: usize },
    Reshape { x: NodeId },
    /// Concatenation along axis 0; per-part row counts recovered from values.
    Concat { parts: Vec<NodeId> },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only record of primitive applications. Single-writer; the tensors
/// it owns are immutable once appended.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// One gradient slot per tape node, filled by [`Tape::backward`].
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the given node, if any path reached it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.slots[id.0].as_ref()
    }
}

// Below this many multiply-adds a matmul is not worth farming out to rayon.
const PAR_MATMUL_THRESHOLD: usize = 1 << 16;

/// out[m,n] += a[m,k] * b[k,n], row-parallel when large. Each output row is
/// produced by one thread in a fixed k-order, so values are thread-count
/// independent.
fn matmul_accumulate(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let body = |(i, out_row): (usize, &mut [f64])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_MATMUL_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    /// Register an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// [m,k] x [k,n] -> [m,n].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                details: format!("{:?} x {:?}", sa, sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_accumulate(ta.data(), tb.data(), &mut out, m, k, n);
        Ok(self.push(Op::MatMul { a, b }, Tensor { shape: vec![m, n], data: out }))
    }

    /// Elementwise addition when shapes match; otherwise `b` must be a rank-1
    /// (or [1,n]) bias added to every row of the 2-D tensor `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
            let shape = ta.shape().to_vec();
            return Ok(self.push(Op::Add { a, b, row_broadcast: false }, Tensor { shape, data }));
        }
        let bias_width = match tb.shape() {
            [n] => *n,
            [1, n] => *n,
            _ => 0,
        };
        if ta.shape().len() == 2 && bias_width == ta.shape()[1] {
            let n = ta.shape()[1];
            let mut data = ta.data().to_vec();
            for row in data.chunks_mut(n) {
                for (o, &bv) in row.iter_mut().zip(tb.data()) {
                    *o += bv;
                }
            }
            return Ok(self.push(Op::Add { a, b, row_broadcast: true }, Tensor { shape: ta.shape().to_vec(), data }));
        }
        Err(Error::Shape {
            op: "add",
            details: format!("{:?} + {:?}", ta.shape(), tb.shape()),
        })
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op: "mul",
                details: format!("{:?} * {:?}", ta.shape(), tb.shape()),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Op::Mul { a, b }, Tensor { shape, data }))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = t.shape().to_vec();
        Ok(self.push(Op::Relu { x }, Tensor { shape, data }))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.tanh()).collect();
        let shape = t.shape().to_vec();
        Ok(self.push(Op::Tanh { x }, Tensor { shape, data }))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let data: Vec<f64> = t.data().iter().map(|v| v.exp()).collect();
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "exp",
                details: format!("exp({}) at flat index {}", t.data()[pos], pos),
            });
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Op::Exp { x }, Tensor { shape, data }))
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let data: Vec<f64> = t.data().iter().map(|v| v.ln()).collect();
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "log",
                details: format!("log({}) at flat index {}", t.data()[pos], pos),
            });
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Op::Log { x }, Tensor { shape, data }))
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| -v).collect();
        let shape = t.shape().to_vec();
        Ok(self.push(Op::Neg { x }, Tensor { shape, data }))
    }

    /// Sum of all elements; returns a rank-0 scalar.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let s: f64 = t.data().iter().sum();
        Ok(self.push(Op::SumAll { x }, Tensor::scalar(s)))
    }

    /// Column-wise maximum over the rows of an [m,n] tensor (the set
    /// dimension); returns [n]. Ties go to the lowest row index; that choice
    /// routes the gradient.
    pub fn max_over_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::Shape {
                op: "max_over_rows",
                details: format!("need a nonempty [m,n] tensor, got {:?}", s),
            });
        }
        let (m, n) = (s[0], s[1]);
        let d = t.data();
        let mut out = d[..n].to_vec();
        let mut argmax = vec![0usize; n];
        for r in 1..m {
            let row = &d[r * n..(r + 1) * n];
            for (j, &v) in row.iter().enumerate() {
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = r;
                }
            }
        }
        Ok(self.push(Op::MaxOverRows { x, argmax }, Tensor { shape: vec![n], data: out }))
    }

    /// `len` consecutive elements of the flattened input starting at `start`;
    /// returns a rank-1 tensor.
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let t = self.value(x);
        if start + len > t.numel() {
            return Err(Error::Shape {
                op: "slice",
                details: format!("range {}..{} out of {} elements", start, start + len, t.numel()),
            });
        }
        let data = t.data()[start..start + len].to_vec();
        Ok(self.push(Op::Slice { x, start }, Tensor { shape: vec![len], data }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::Shape {
                op: "reshape",
                details: format!("{:?} -> {:?}", t.shape(), shape),
            });
        }
        let data = t.data().to_vec();
        Ok(self.push(Op::Reshape { x }, Tensor { shape, data }))
    }

    /// Concatenate along axis 0. Parts must share rank and trailing
    /// dimensions.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape { op: "concat", details: "no parts".into() });
        }
        let first = self.value(parts[0]).shape().to_vec();
        if first.is_empty() {
            return Err(Error::Shape { op: "concat", details: "cannot concat scalars".into() });
        }
        let mut rows = 0usize;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let s = t.shape();
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(Error::Shape {
                    op: "concat",
                    details: format!("{:?} vs {:?}", s, first),
                });
            }
            rows += s[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = first;
        shape[0] = rows;
        Ok(self.push(Op::Concat { parts: parts.to_vec() }, Tensor { shape, data }))
    }

    /// Reverse sweep from a one-element loss node. Returns the gradient per
    /// node; leaves (parameters, inputs) carry the accumulated result.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape {
                op: "backward",
                details: format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            });
        }
        let mut slots: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Tensor {
            shape: self.value(loss).shape().to_vec(),
            data: vec![1.0],
        });

        for idx in (0..=loss.0).rev() {
            let Some(grad) = slots[idx].take() else { continue };
            self.accumulate_inputs(idx, &grad, &mut slots);
            slots[idx] = Some(grad);
        }
        Ok(Gradients { slots })
    }

    fn accumulate_inputs(&self, idx: usize, grad: &Tensor, slots: &mut [Option<Tensor>]) {
        let g = grad.data();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                // dA[i,kk] = sum_j g[i,j] * B[kk,j]
                {
                    let da = Self::slot(slots, *a, ta.shape());
                    let (bd, len) = (tb.data(), k);
                    let body = |(i, da_row): (usize, &mut [f64])| {
                        let g_row = &g[i * n..(i + 1) * n];
                        for (kk, dv) in da_row.iter_mut().enumerate() {
                            let b_row = &bd[kk * n..(kk + 1) * n];
                            let mut acc = 0.0;
                            for (gv, bv) in g_row.iter().zip(b_row) {
                                acc += gv * bv;
                            }
                            *dv += acc;
                        }
                    };
                    if m * k * n >= PAR_MATMUL_THRESHOLD && m > 1 {
                        da.data.par_chunks_mut(len).enumerate().for_each(body);
                    } else {
                        da.data.chunks_mut(len).enumerate().for_each(body);
                    }
                }
                // dB[kk,j] = sum_i A[i,kk] * g[i,j]
                {
                    let db = Self::slot(slots, *b, tb.shape());
                    let ad = ta.data();
                    let body = |(kk, db_row): (usize, &mut [f64])| {
                        for i in 0..m {
                            let av = ad[i * k + kk];
                            if av == 0.0 {
                                continue;
                            }
                            let g_row = &g[i * n..(i + 1) * n];
                            for (dv, gv) in db_row.iter_mut().zip(g_row) {
                                *dv += av * gv;
                            }
                        }
                    };
                    if m * k * n >= PAR_MATMUL_THRESHOLD && k > 1 {
                        db.data.par_chunks_mut(n).enumerate().for_each(body);
                    } else {
                        db.data.chunks_mut(n).enumerate().for_each(body);
                    }
                }
            }
            Op::Add { a, b, row_broadcast } => {
                {
                    let da = Self::slot(slots, *a, self.value(*a).shape());
                    for (dv, gv) in da.data.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
                let db = Self::slot(slots, *b, self.value(*b).shape());
                if *row_broadcast {
                    let n = db.data.len();
                    for row in g.chunks(n) {
                        for (dv, gv) in db.data.iter_mut().zip(row) {
                            *dv += gv;
                        }
                    }
                } else {
                    for (dv, gv) in db.data.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.value(*a).data().to_vec(), self.value(*b).data().to_vec());
                {
                    let da = Self::slot(slots, *a, self.value(*a).shape());
                    for ((dv, gv), bv) in da.data.iter_mut().zip(g).zip(&bd) {
                        *dv += gv * bv;
                    }
                }
                let db = Self::slot(slots, *b, self.value(*b).shape());
                for ((dv, gv), av) in db.data.iter_mut().zip(g).zip(&ad) {
                    *dv += gv * av;
                }
            }
            Op::Relu { x } => {
                let xd = self.value(*x).data();
                let dx = Self::slot(slots, *x, self.value(*x).shape());
                for ((dv, gv), xv) in dx.data.iter_mut().zip(g).zip(xd) {
                    if *xv > 0.0 {
                        *dv += gv;
                    }
                }
            }
            Op::Tanh { x } => {
                let yd = self.nodes[idx].value.data();
                let dx = Self::slot(slots, *x, self.value(*x).shape());
                for ((dv, gv), yv) in dx.data.iter_mut().zip(g).zip(yd) {
                    *dv += gv * (1.0 - yv * yv);
                }
            }
            Op::Exp { x } => {
                let yd = self.nodes[idx].value.data();
                let dx = Self::slot(slots, *x, self.value(*x).shape());
                for ((dv, gv), yv) in dx.data.iter_mut().zip(g).zip(yd) {
                    *dv += gv * yv;
                }
            }
            Op::Log { x } => {
                let xd = self.value(*x).data();
                let dx = Self::slot(slots, *x, self.value(*x).shape());
                for ((dv, gv), xv) in dx.data.iter_mut().zip(g).zip(xd) {
                    *dv += gv / xv;
                }
            }
            Op::Neg { x } => {
                let dx = Self::slot(slots, *x, self.value(*x).shape());
                for (dv, gv) in dx.data.iter_mut().zip(g) {
                    *dv -= gv;
                }
            }
            Op::SumAll { x } => {
                let gs = g[0];
                let dx = Self::slot(slots, *x, self.value(*x).shape());
                for dv in dx.data.iter_mut() {
                    *dv += gs;
                }
            }
            Op::MaxOverRows { x, argmax } => {
                let n = argmax.len();
                let dx = Self::slot(slots, *x, self.value(*x).shape());
                for (j, &r) in argmax.iter().enumerate() {
                    dx.data[r * n + j] += g[j];
                }
            }
            Op::Slice { x, start } => {
                let dx = Self::slot(slots, *x, self.value(*x).shape());
                for (dv, gv) in dx.data[*start..*start + g.len()].iter_mut().zip(g) {
                    *dv += gv;
                }
            }
            Op::Reshape { x } => {
                let dx = Self::slot(slots, *x, self.value(*x).shape());
                for (dv, gv) in dx.data.iter_mut().zip(g) {
                    *dv += gv;
                }
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    let dp = Self::slot(slots, p, self.value(p).shape());
                    for (dv, gv) in dp.data.iter_mut().zip(&g[offset..offset + len]) {
                        *dv += gv;
                    }
                    offset += len;
                }
            }
        }
    }

    fn slot<'s>(slots: &'s mut [Option<Tensor>], id: NodeId, shape: &[usize]) -> &'s mut Tensor {
        slots[id.0].get_or_insert_with(|| Tensor::zeros(shape.to_vec()))
    }
}

/// Result of a finite-difference check of the tape gradient.
#[derive(Debug)]
pub struct GradCheck {
    /// Max relative error over the coordinates that were not excluded.
    pub max_rel_error: f64,
    /// Relative error per coordinate (NaN where excluded).
    pub per_coord: Vec<f64>,
    /// Coordinates flagged as non-differentiable (one-sided slopes disagree)
    /// and excluded from the max.
    pub excluded: Vec<usize>,
}

// One-sided difference quotients disagreeing by more than this relative
// amount mark a kink (e.g. relu evaluated exactly at 0).
const KINK_TOL: f64 = 1e-2;

/// Compare the tape gradient of a scalar function against central finite
/// differences at `point`.
///
/// `f` receives a fresh tape plus a rank-1 leaf holding the point and returns
/// the loss node. Relative error per coordinate is
/// `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`.
pub fn grad_check<F>(f: F, point: &[f64], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArg(format!("grad_check step h must be > 0, got {}", h)));
    }
    let eval = |x: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(Tensor::new(vec![x.len()], x.to_vec())?);
        let loss = f(&mut tape, leaf)?;
        if !tape.value(loss).is_scalar() {
            return Err(Error::Shape {
                op: "grad_check",
                details: format!("function must be scalar-valued, got {:?}", tape.value(loss).shape()),
            });
        }
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: "grad_check",
                details: format!("function evaluated to {}", v),
            });
        }
        Ok(v)
    };

    // Analytic gradient once at the point.
    let mut tape = Tape::new();
    let leaf = tape.leaf(Tensor::new(vec![point.len()], point.to_vec())?);
    let loss = f(&mut tape, leaf)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::Shape {
            op: "grad_check",
            details: format!("function must be scalar-valued, got {:?}", tape.value(loss).shape()),
        });
    }
    let f0 = tape.value(loss).item();
    if !f0.is_finite() {
        return Err(Error::NonFinite {
            op: "grad_check",
            details: format!("function evaluated to {}", f0),
        });
    }
    let grads = tape.backward(loss)?;
    let g_ad: Vec<f64> = match grads.get(leaf) {
        Some(t) => t.data().to_vec(),
        None => vec![0.0; point.len()],
    };

    let mut per_coord = Vec::with_capacity(point.len());
    let mut excluded = Vec::new();
    let mut max_rel = 0.0f64;
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        let x0 = probe[i];
        probe[i] = x0 + h;
        let fp = eval(&probe)?;
        probe[i] = x0 - h;
        let fm = eval(&probe)?;
        probe[i] = x0;

        let fwd = (fp - f0) / h;
        let bwd = (f0 - fm) / h;
        if (fwd - bwd).abs() > KINK_TOL * fwd.abs().max(bwd.abs()).max(1.0) {
            excluded.push(i);
            per_coord.push(f64::NAN);
            continue;
        }
        let g_fd = (fp - fm) / (2.0 * h);
        let rel = (g_ad[i] - g_fd).abs() / g_ad[i].abs().max(g_fd.abs()).max(1.0);
        per_coord.push(rel);
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheck { max_rel_error: max_rel, per_coord, excluded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        tape.leaf(Tensor::new(shape, data).unwrap())
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut tape, vec![2, 1], vec![1.0, 1.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
        assert_eq!(tape.value(c).shape(), &[2, 1]);
    }

    #[test]
    fn matmul_shape_error_names_primitive() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 3], vec![0.0; 6]);
        let b = leaf(&mut tape, vec![2, 2], vec![0.0; 4]);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{}", msg);
    }

    #[test]
    fn relu_forward() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![-1.0, 0.0, 2.0]);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn max_over_rows_forward_and_ties() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 2], vec![1.0, 5.0, 3.0, 2.0]);
        let y = tape.max_over_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 5.0]);

        // Tie: gradient must go to the lowest row index.
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 1], vec![4.0, 4.0]);
        let y = tape.max_over_rows(x).unwrap();
        let s = tape.sum_all(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn max_over_rows_permutation_invariant_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rows: Vec<Vec<f64>> = (0..17).map(|_| (0..5).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect()).collect();
        let forward = |rows: &[Vec<f64>]| {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::from_rows(rows).unwrap());
            let y = tape.max_over_rows(x).unwrap();
            tape.value(y).data().to_vec()
        };
        let base = forward(&rows);
        let mut rev = rows.clone();
        rev.reverse();
        assert_eq!(base, forward(&rev));
        let mut rotated = rows.clone();
        rotated.rotate_left(5);
        assert_eq!(base, forward(&rotated));
    }

    #[test]
    fn backward_square_sum() {
        // loss = sum(x*x), grad = 2x
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1], vec![3.0]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_relu_sum() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![-1.0, 2.0]);
        let y = tape.relu(x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn backward_linearity_over_independent_subgraphs() {
        // Gradient of sum of two independent subgraphs equals the two
        // per-subgraph gradients side by side.
        let xa = vec![0.3, -0.8, 1.7];
        let xb = vec![2.0, 0.5];
        let joint = {
            let mut tape = Tape::new();
            let a = leaf(&mut tape, vec![3], xa.clone());
            let b = leaf(&mut tape, vec![2], xb.clone());
            let ta = tape.tanh(a).unwrap();
            let sa = tape.sum_all(ta).unwrap();
            let mb = tape.mul(b, b).unwrap();
            let sb = tape.sum_all(mb).unwrap();
            let loss = tape.add(sa, sb).unwrap();
            let g = tape.backward(loss).unwrap();
            (g.get(a).unwrap().data().to_vec(), g.get(b).unwrap().data().to_vec())
        };
        let solo_a = {
            let mut tape = Tape::new();
            let a = leaf(&mut tape, vec![3], xa);
            let ta = tape.tanh(a).unwrap();
            let sa = tape.sum_all(ta).unwrap();
            tape.backward(sa).unwrap().get(a).unwrap().data().to_vec()
        };
        let solo_b = {
            let mut tape = Tape::new();
            let b = leaf(&mut tape, vec![2], xb);
            let mb = tape.mul(b, b).unwrap();
            let sb = tape.sum_all(mb).unwrap();
            tape.backward(sb).unwrap().get(b).unwrap().data().to_vec()
        };
        assert_eq!(joint.0, solo_a);
        assert_eq!(joint.1, solo_b);
    }

    #[test]
    fn slice_concat_reshape_roundtrip_gradient() {
        // y = concat(slice(x,3,3), slice(x,0,3)) sums to the same as x; the
        // gradient of sum(y*y) must scatter back to the right places.
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let hi = tape.slice(x, 3, 3).unwrap();
        let lo = tape.slice(x, 0, 3).unwrap();
        let y = tape.concat(&[hi, lo]).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 5.0, 6.0, 1.0, 2.0, 3.0]);
        let m = tape.reshape(y, vec![2, 3]).unwrap();
        let sq = tape.mul(m, m).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0, 8.0, 10.0, 12.0]);
    }

    #[test]
    fn log_domain_violation_errors() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, -1.0]);
        assert!(matches!(tape.log(x), Err(Error::NonFinite { op: "log", .. })));
    }

    #[test]
    fn exp_overflow_errors() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1], vec![1e4]);
        assert!(matches!(tape.exp(x), Err(Error::NonFinite { op: "exp", .. })));
    }

    #[test]
    fn add_row_broadcast_and_gradient() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut tape, vec![2], vec![10.0, 20.0]);
        let y = tape.add(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        let s = tape.sum_all(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_check_quadratic_is_exact() {
        let check = grad_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                tape.sum_all(sq)
            },
            &[1.0, 2.0, 3.0],
            1e-5,
        )
        .unwrap();
        assert!(check.excluded.is_empty());
        assert!(check.max_rel_error < 1e-8, "rel err {}", check.max_rel_error);
    }

    #[test]
    fn grad_check_flags_relu_kink() {
        let check = grad_check(
            |tape, x| {
                let y = tape.relu(x)?;
                tape.sum_all(y)
            },
            &[1.0, 0.0, -2.0],
            1e-5,
        )
        .unwrap();
        assert_eq!(check.excluded, vec![1]);
        assert!(check.per_coord[1].is_nan());
        assert!(check.max_rel_error < 1e-8);
    }

    #[test]
    fn grad_check_rejects_bad_h() {
        let r = grad_check(|tape, x| tape.sum_all(x), &[1.0], 0.0);
        assert!(matches!(r, Err(Error::InvalidArg(_))));
    }

    #[test]
    fn grad_check_two_layer_perceptron() {
        // Random 2-layer tanh perceptron; every parameter checked against
        // central differences through a single flattened leaf.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (din, dh) = (3usize, 4usize);
        let n_input = 2usize * din;
        let n_w1 = din * dh;
        let n_w2 = dh;
        let total = n_input + n_w1 + dh + n_w2 + 1;
        let point: Vec<f64> = (0..total).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();

        let f = move |tape: &mut Tape, x: NodeId| -> Result<NodeId> {
            let mut off = 0;
            let inp = tape.slice(x, off, n_input)?;
            let inp = tape.reshape(inp, vec![2, din])?;
            off += n_input;
            let w1 = tape.slice(x, off, n_w1)?;
            let w1 = tape.reshape(w1, vec![din, dh])?;
            off += n_w1;
            let b1 = tape.slice(x, off, dh)?;
            off += dh;
            let w2 = tape.slice(x, off, n_w2)?;
            let w2 = tape.reshape(w2, vec![dh, 1])?;
            off += n_w2;
            let b2 = tape.slice(x, off, 1)?;

            let h = tape.matmul(inp, w1)?;
            let h = tape.add(h, b1)?;
            let h = tape.tanh(h)?;
            let o = tape.matmul(h, w2)?;
            let o = tape.add(o, b2)?;
            tape.sum_all(o)
        };
        let check = grad_check(f, &point, 1e-5).unwrap();
        assert!(check.excluded.is_empty());
        assert!(check.max_rel_error < 1e-4, "rel err {}", check.max_rel_error);
    }

    #[test]
    fn parallel_matmul_matches_serial_bitwise() {
        // Large enough to cross the rayon threshold; values must not depend
        // on the execution path.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, k, n) = (64, 64, 64);
        let a: Vec<f64> = (0..m * k).map(|_| rng.random::<f64>() - 0.5).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.random::<f64>() - 0.5).collect();
        let mut par = vec![0.0; m * n];
        matmul_accumulate(&a, &b, &mut par, m, k, n);
        let mut serial = vec![0.0; m * n];
        for i in 0..m {
            for kk in 0..k {
                let av = a[i * k + kk];
                for j in 0..n {
                    serial[i * n + j] += av * b[kk * n + j];
                }
            }
        }
        assert_eq!(par, serial);
    }
}
