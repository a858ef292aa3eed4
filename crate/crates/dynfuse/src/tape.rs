//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records one forward computation as an append-only list of
//! nodes; [`Tape::backward`] replays it in reverse and accumulates gradients
//! for every parameter leaf. Tapes are build-then-backward, single use, and
//! confined to one thread for their whole lifetime. Parallelism, if any, runs
//! across independent tapes.
//!
//! Broadcasting is deliberately narrow: elementwise binaries accept equal
//! shapes, a scalar (numel 1) on either side, or a row vector `[n]`/`[1,n]`
//! against a matrix `[m,n]` (the missing/1-length leading axis is
//! duplicated).

use crate::error::{Error, Result};
use crate::params::{GradientMap, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::cell::RefCell;
use std::collections::HashMap;

enum Op<S> {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { a: usize },
    Reshape { a: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: S },
    Concat { a: usize, b: usize },
    SliceCols { a: usize, lo: usize, hi: usize },
    SelectRow { a: usize, idx: usize },
    Diag { a: usize },
    StackRows { rows: Vec<usize> },
    MeanAxis { a: usize, axis: usize },
    MaxAxis { a: usize, axis: usize, arg: Vec<usize> },
    SumAll { a: usize },
    MeanAll { a: usize },
    Relu { a: usize },
    Sigmoid { a: usize },
    Tanh { a: usize },
    Sqrt { a: usize },
    Softmax { a: usize, axis: usize },
    LogSoftmax { a: usize, axis: usize },
    LogSumExpRows { a: usize },
    L2NormalizeRows { a: usize, norms: Vec<S> },
    LayerNorm { x: usize, gain: usize, bias: usize, inv_std: Vec<S>, xhat: Vec<S> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
    param: Option<ParamId>,
}

pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
    param_nodes: RefCell<HashMap<usize, usize>>,
}

/// Handle to one node of a tape. Cheap to copy; all math goes through the
/// methods below, each of which appends a node.
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S: Scalar> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, needs_grad: bool, param: Option<ParamId>) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
            param,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Non-differentiable input (data, teacher signals, fixed masks).
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf, false, None)
    }

    /// Trainable leaf. The first call for a given parameter creates the node;
    /// later calls return the same node so gradient contributions from every
    /// use site accumulate in one place.
    pub fn param(&self, set: &ParamSet<S>, id: ParamId) -> Var<'_, S> {
        if let Some(&node) = self.param_nodes.borrow().get(&id.index()) {
            return Var { tape: self, id: node };
        }
        let var = self.push(set.get(id).clone(), Op::Leaf, true, Some(id));
        self.param_nodes.borrow_mut().insert(id.index(), var.id);
        var
    }

    /// Stacks rank-1 (or `[1,n]`) vars into an `[L,n]` matrix.
    pub fn stack_rows(&self, rows: &[Var<'_, S>]) -> Result<Var<'_, S>> {
        if rows.is_empty() {
            return Err(Error::shape("stack_rows", &[0], &[]));
        }
        let (mut data, mut needs, mut cols) = (Vec::new(), false, 0usize);
        {
            let nodes = self.nodes.borrow();
            for (i, r) in rows.iter().enumerate() {
                let v = &nodes[r.id].value;
                let (rr, cc) = v.rows_cols();
                if rr != 1 {
                    return Err(Error::shape("stack_rows", v.shape(), &[]));
                }
                if i == 0 {
                    cols = cc;
                    data.reserve(rows.len() * cols);
                } else if cc != cols {
                    return Err(Error::shape("stack_rows", &[cols], v.shape()));
                }
                data.extend_from_slice(v.data());
                needs |= nodes[r.id].needs_grad;
            }
        }
        let value = Tensor::new(vec![rows.len(), cols], data)?;
        Ok(self.push(
            value,
            Op::StackRows {
                rows: rows.iter().map(|r| r.id).collect(),
            },
            needs,
            None,
        ))
    }

    /// Runs the reverse pass from a scalar loss and collects gradients for
    /// every parameter in `set` (zeros for parameters the forward never
    /// touched).
    pub fn backward(&self, loss: Var<'_, S>, set: &ParamSet<S>) -> Result<GradientMap<S>> {
        {
            let nodes = self.nodes.borrow();
            let lv = &nodes[loss.id].value;
            if lv.numel() != 1 {
                return Err(Error::shape("backward", lv.shape(), &[1]));
            }
            if !lv.is_all_finite() {
                return Err(Error::Numerics("backward called on non-finite loss".into()));
            }
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![S::one()]);

        for id in (0..=loss.id).rev() {
            if !nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.param.is_some() {
                grads[id] = Some(g);
                continue;
            }
            backward_op(node, &g, &nodes, &mut grads);
        }

        let mut out = Vec::with_capacity(set.len());
        let param_nodes = self.param_nodes.borrow();
        for i in 0..set.len() {
            let shape = set.get(ParamId(i)).shape().to_vec();
            let g = param_nodes
                .get(&i)
                .and_then(|node| grads[*node].take())
                .map(|data| Tensor::new(shape.clone(), data))
                .transpose()?
                .unwrap_or_else(|| Tensor::zeros(shape));
            out.push(g);
        }
        Ok(GradientMap::from_vec(out))
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// Broadcasting plan for elementwise binaries
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq)]
enum Bc {
    Same,
    LhsScalar,
    RhsScalar,
    /// rhs is a row vector applied to every row of lhs
    RhsRow,
    /// lhs is a row vector applied to every row of rhs
    LhsRow,
}

fn broadcast_plan(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Bc, Vec<usize>)> {
    let numel = |s: &[usize]| s.iter().product::<usize>();
    if a == b {
        return Ok((Bc::Same, a.to_vec()));
    }
    if numel(b) == 1 {
        return Ok((Bc::RhsScalar, a.to_vec()));
    }
    if numel(a) == 1 {
        return Ok((Bc::LhsScalar, b.to_vec()));
    }
    let row_of = |m: &[usize], r: &[usize]| {
        m.len() == 2 && ((r.len() == 1 && r[0] == m[1]) || (r.len() == 2 && r[0] == 1 && r[1] == m[1]))
    };
    if row_of(a, b) {
        return Ok((Bc::RhsRow, a.to_vec()));
    }
    if row_of(b, a) {
        return Ok((Bc::LhsRow, b.to_vec()));
    }
    Err(Error::shape(op, a, b))
}

/// Sums a full-shape gradient down to a broadcast operand's shape.
fn reduce_to<S: Scalar>(g: &[S], full: &[usize], target: &[usize]) -> Vec<S> {
    let t_numel: usize = target.iter().product();
    if t_numel == g.len() {
        return g.to_vec();
    }
    if t_numel == 1 {
        let mut s = S::zero();
        for v in g {
            s = s + *v;
        }
        return vec![s];
    }
    // row case: sum over leading axis
    let cols = full[1];
    let mut out = vec![S::zero(); cols];
    for row in g.chunks_exact(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o = *o + *v;
        }
    }
    out
}

fn ew_forward<S: Scalar>(plan: Bc, out_shape: &[usize], a: &[S], b: &[S], f: impl Fn(S, S) -> S) -> Vec<S> {
    match plan {
        Bc::Same => a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect(),
        Bc::RhsScalar => {
            let s = b[0];
            a.iter().map(|x| f(*x, s)).collect()
        }
        Bc::LhsScalar => {
            let s = a[0];
            b.iter().map(|y| f(s, *y)).collect()
        }
        Bc::RhsRow => {
            let cols = out_shape[1];
            let mut out = Vec::with_capacity(a.len());
            for row in a.chunks_exact(cols) {
                for (x, y) in row.iter().zip(b) {
                    out.push(f(*x, *y));
                }
            }
            out
        }
        Bc::LhsRow => {
            let cols = out_shape[1];
            let mut out = Vec::with_capacity(b.len());
            for row in b.chunks_exact(cols) {
                for (y, x) in row.iter().zip(a) {
                    out.push(f(*x, *y));
                }
            }
            out
        }
    }
}

/// Expands a possibly-broadcast operand to the full output shape.
fn expand_to<S: Scalar>(v: &[S], v_shape: &[usize], full: &[usize]) -> Vec<S> {
    let full_numel: usize = full.iter().product();
    if v.len() == full_numel {
        return v.to_vec();
    }
    if v.len() == 1 {
        return vec![v[0]; full_numel];
    }
    let _ = v_shape;
    let cols = full[1];
    let mut out = Vec::with_capacity(full_numel);
    for _ in 0..full[0] {
        out.extend_from_slice(&v[..cols]);
    }
    out
}

// ---------------------------------------------------------------------------
// Raw kernels
// ---------------------------------------------------------------------------

fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, ap) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + *ap * *bv;
            }
        }
    }
    c
}

fn softmax_slice<S: Scalar>(x: &[S], out: &mut [S]) {
    let mut mx = x[0];
    for v in &x[1..] {
        if *v > mx {
            mx = *v;
        }
    }
    let mut sum = S::zero();
    for (o, v) in out.iter_mut().zip(x) {
        let e = (*v - mx).exp();
        *o = e;
        sum = sum + e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

fn log_softmax_slice<S: Scalar>(x: &[S], out: &mut [S]) {
    let mut mx = x[0];
    for v in &x[1..] {
        if *v > mx {
            mx = *v;
        }
    }
    let mut sum = S::zero();
    for v in x {
        sum = sum + (*v - mx).exp();
    }
    let lse = mx + sum.ln();
    for (o, v) in out.iter_mut().zip(x) {
        *o = *v - lse;
    }
}

/// Iterates the slices of a rank-1/rank-2 tensor along `axis` as
/// (start, stride, len) triples. `axis` is the axis the slice runs along.
fn axis_slices(shape: &[usize], axis: usize) -> Result<Vec<(usize, usize, usize)>> {
    match (shape.len(), axis) {
        (1, 0) => Ok(vec![(0, 1, shape[0])]),
        (2, 1) => Ok((0..shape[0]).map(|r| (r * shape[1], 1, shape[1])).collect()),
        (2, 0) => Ok((0..shape[1]).map(|c| (c, shape[1], shape[0])).collect()),
        _ => Err(Error::shape("axis", shape, &[axis])),
    }
}

fn gather_slice<S: Scalar>(data: &[S], (start, stride, len): (usize, usize, usize)) -> Vec<S> {
    (0..len).map(|i| data[start + i * stride]).collect()
}

fn scatter_slice<S: Scalar>(data: &mut [S], (start, stride, len): (usize, usize, usize), src: &[S]) {
    for i in 0..len {
        data[start + i * stride] = src[i];
    }
}

// ---------------------------------------------------------------------------
// Var: forward operations
// ---------------------------------------------------------------------------

impl<'t, S: Scalar> Var<'t, S> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor<S> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    /// Scalar readout; panics if the node is not a singleton.
    pub fn scalar_value(&self) -> S {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        assert_eq!(v.numel(), 1, "scalar_value on shape {:?}", v.shape());
        v.data()[0]
    }

    fn binary(
        &self,
        other: Var<'t, S>,
        opname: &'static str,
        make: impl FnOnce(usize, usize) -> Op<S>,
        f: impl Fn(S, S) -> S,
    ) -> Result<Var<'t, S>> {
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let (av, bv) = (&nodes[self.id].value, &nodes[other.id].value);
            let (plan, out_shape) = broadcast_plan(opname, av.shape(), bv.shape())?;
            let data = ew_forward(plan, &out_shape, av.data(), bv.data(), f);
            (
                Tensor::new(out_shape, data)?,
                nodes[self.id].needs_grad || nodes[other.id].needs_grad,
            )
        };
        Ok(self.tape.push(value, make(self.id, other.id), needs, None))
    }

    pub fn add(&self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, "add", |a, b| Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, "sub", |a, b| Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, "mul", |a, b| Op::Mul { a, b }, |x, y| x * y)
    }

    pub fn scale(&self, c: S) -> Result<Var<'t, S>> {
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            let data = v.data().iter().map(|x| *x * c).collect();
            (Tensor::new(v.shape().to_vec(), data)?, nodes[self.id].needs_grad)
        };
        Ok(self.tape.push(value, Op::Scale { a: self.id, c }, needs, None))
    }

    pub fn matmul(&self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let (av, bv) = (&nodes[self.id].value, &nodes[other.id].value);
            if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
                return Err(Error::shape("matmul", av.shape(), bv.shape()));
            }
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let data = matmul_raw(av.data(), bv.data(), m, k, n);
            (
                Tensor::new(vec![m, n], data)?,
                nodes[self.id].needs_grad || nodes[other.id].needs_grad,
            )
        };
        Ok(self
            .tape
            .push(value, Op::Matmul { a: self.id, b: other.id }, needs, None))
    }

    pub fn transpose(&self) -> Result<Var<'t, S>> {
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            if v.rank() != 2 {
                return Err(Error::shape("transpose", v.shape(), &[]));
            }
            let (m, n) = (v.shape()[0], v.shape()[1]);
            let mut data = vec![S::zero(); m * n];
            for i in 0..m {
                for j in 0..n {
                    data[j * m + i] = v.data()[i * n + j];
                }
            }
            (Tensor::new(vec![n, m], data)?, nodes[self.id].needs_grad)
        };
        Ok(self.tape.push(value, Op::Transpose { a: self.id }, needs, None))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'t, S>> {
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            if shape.iter().product::<usize>() != v.numel() || shape.iter().any(|&d| d == 0) {
                return Err(Error::shape("reshape", v.shape(), &shape));
            }
            (
                Tensor::new(shape, v.data().to_vec())?,
                nodes[self.id].needs_grad,
            )
        };
        Ok(self.tape.push(value, Op::Reshape { a: self.id }, needs, None))
    }

    /// Channel concatenation along the last axis. A rank-1 rhs against a
    /// rank-2 lhs is broadcast to every row.
    pub fn concat(&self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let (av, bv) = (&nodes[self.id].value, &nodes[other.id].value);
            let needs = nodes[self.id].needs_grad || nodes[other.id].needs_grad;
            let value = match (av.rank(), bv.rank()) {
                (1, 1) => {
                    let mut data = av.data().to_vec();
                    data.extend_from_slice(bv.data());
                    Tensor::new(vec![av.numel() + bv.numel()], data)?
                }
                (2, 2) if av.shape()[0] == bv.shape()[0] => {
                    let (r, ca, cb) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    let mut data = Vec::with_capacity(r * (ca + cb));
                    for i in 0..r {
                        data.extend_from_slice(&av.data()[i * ca..(i + 1) * ca]);
                        data.extend_from_slice(&bv.data()[i * cb..(i + 1) * cb]);
                    }
                    Tensor::new(vec![r, ca + cb], data)?
                }
                (2, 1) => {
                    let (r, ca, cb) = (av.shape()[0], av.shape()[1], bv.numel());
                    let mut data = Vec::with_capacity(r * (ca + cb));
                    for i in 0..r {
                        data.extend_from_slice(&av.data()[i * ca..(i + 1) * ca]);
                        data.extend_from_slice(bv.data());
                    }
                    Tensor::new(vec![r, ca + cb], data)?
                }
                _ => return Err(Error::shape("concat", av.shape(), bv.shape())),
            };
            (value, needs)
        };
        Ok(self
            .tape
            .push(value, Op::Concat { a: self.id, b: other.id }, needs, None))
    }

    /// Column range `[lo, hi)` of a matrix (or of a vector).
    pub fn slice_cols(&self, lo: usize, hi: usize) -> Result<Var<'t, S>> {
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            let (r, c) = v.rows_cols();
            if lo >= hi || hi > c {
                return Err(Error::shape("slice_cols", v.shape(), &[lo, hi]));
            }
            let mut data = Vec::with_capacity(r * (hi - lo));
            for i in 0..r {
                data.extend_from_slice(&v.data()[i * c + lo..i * c + hi]);
            }
            let shape = if v.rank() == 1 { vec![hi - lo] } else { vec![r, hi - lo] };
            (Tensor::new(shape, data)?, nodes[self.id].needs_grad)
        };
        Ok(self
            .tape
            .push(value, Op::SliceCols { a: self.id, lo, hi }, needs, None))
    }

    /// Row `idx` of a matrix as a vector; element `idx` of a vector as a
    /// singleton.
    pub fn select_row(&self, idx: usize) -> Result<Var<'t, S>> {
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            let value = match v.rank() {
                2 => {
                    let (r, c) = (v.shape()[0], v.shape()[1]);
                    if idx >= r {
                        return Err(Error::shape("select_row", v.shape(), &[idx]));
                    }
                    Tensor::new(vec![c], v.data()[idx * c..(idx + 1) * c].to_vec())?
                }
                1 => {
                    if idx >= v.numel() {
                        return Err(Error::shape("select_row", v.shape(), &[idx]));
                    }
                    Tensor::scalar(v.data()[idx])
                }
                _ => return Err(Error::shape("select_row", v.shape(), &[idx])),
            };
            (value, nodes[self.id].needs_grad)
        };
        Ok(self
            .tape
            .push(value, Op::SelectRow { a: self.id, idx }, needs, None))
    }

    /// Main diagonal of a square matrix.
    pub fn diag(&self) -> Result<Var<'t, S>> {
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            if v.rank() != 2 || v.shape()[0] != v.shape()[1] {
                return Err(Error::shape("diag", v.shape(), &[]));
            }
            let n = v.shape()[0];
            let data = (0..n).map(|i| v.data()[i * n + i]).collect();
            (Tensor::new(vec![n], data)?, nodes[self.id].needs_grad)
        };
        Ok(self.tape.push(value, Op::Diag { a: self.id }, needs, None))
    }

    /// Mean over `axis` of a matrix: axis 0 pools rows into a `[cols]`
    /// vector, axis 1 pools columns into a `[rows]` vector.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t, S>> {
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            if v.rank() != 2 || axis > 1 {
                return Err(Error::shape("mean_axis", v.shape(), &[axis]));
            }
            let (m, n) = (v.shape()[0], v.shape()[1]);
            let value = if axis == 0 {
                let inv = S::of(1.0 / m as f64);
                let mut out = vec![S::zero(); n];
                for row in v.data().chunks_exact(n) {
                    for (o, x) in out.iter_mut().zip(row) {
                        *o = *o + *x;
                    }
                }
                for o in out.iter_mut() {
                    *o = *o * inv;
                }
                Tensor::new(vec![n], out)?
            } else {
                let inv = S::of(1.0 / n as f64);
                let out = v
                    .data()
                    .chunks_exact(n)
                    .map(|row| {
                        let mut s = S::zero();
                        for x in row {
                            s = s + *x;
                        }
                        s * inv
                    })
                    .collect();
                Tensor::new(vec![m], out)?
            };
            (value, nodes[self.id].needs_grad)
        };
        Ok(self
            .tape
            .push(value, Op::MeanAxis { a: self.id, axis }, needs, None))
    }

    /// Elementwise max over `axis` of a matrix (ties resolve to the first
    /// occurrence).
    pub fn max_axis(&self, axis: usize) -> Result<Var<'t, S>> {
        let (value, arg, needs) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            if v.rank() != 2 || axis > 1 {
                return Err(Error::shape("max_axis", v.shape(), &[axis]));
            }
            let (m, n) = (v.shape()[0], v.shape()[1]);
            let (out_len, slice_len) = if axis == 0 { (n, m) } else { (m, n) };
            let mut out = vec![S::zero(); out_len];
            let mut arg = vec![0usize; out_len];
            for o in 0..out_len {
                let index = |i: usize| if axis == 0 { i * n + o } else { o * n + i };
                let mut best = v.data()[index(0)];
                let mut bi = 0usize;
                for i in 1..slice_len {
                    let x = v.data()[index(i)];
                    if x > best {
                        best = x;
                        bi = i;
                    }
                }
                out[o] = best;
                arg[o] = bi;
            }
            (
                Tensor::new(vec![out_len], out)?,
                arg,
                nodes[self.id].needs_grad,
            )
        };
        Ok(self
            .tape
            .push(value, Op::MaxAxis { a: self.id, axis, arg }, needs, None))
    }

    pub fn sum_all(&self) -> Result<Var<'t, S>> {
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            let mut s = S::zero();
            for x in v.data() {
                s = s + *x;
            }
            (Tensor::scalar(s), nodes[self.id].needs_grad)
        };
        Ok(self.tape.push(value, Op::SumAll { a: self.id }, needs, None))
    }

    pub fn mean_all(&self) -> Result<Var<'t, S>> {
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            let mut s = S::zero();
            for x in v.data() {
                s = s + *x;
            }
            (
                Tensor::scalar(s * S::of(1.0 / v.numel() as f64)),
                nodes[self.id].needs_grad,
            )
        };
        Ok(self.tape.push(value, Op::MeanAll { a: self.id }, needs, None))
    }

    fn unary(
        &self,
        make: impl FnOnce(usize) -> Op<S>,
        f: impl Fn(S) -> S,
    ) -> Var<'t, S> {
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            let data = v.data().iter().map(|x| f(*x)).collect();
            (
                Tensor::new(v.shape().to_vec(), data).expect("unary preserves shape"),
                nodes[self.id].needs_grad,
            )
        };
        self.tape.push(value, make(self.id), needs, None)
    }

    pub fn relu(&self) -> Var<'t, S> {
        self.unary(|a| Op::Relu { a }, |x| if x > S::zero() { x } else { S::zero() })
    }

    pub fn sigmoid(&self) -> Var<'t, S> {
        self.unary(
            |a| Op::Sigmoid { a },
            |x| S::one() / (S::one() + (-x).exp()),
        )
    }

    pub fn tanh(&self) -> Var<'t, S> {
        self.unary(|a| Op::Tanh { a }, |x| x.tanh())
    }

    pub fn sqrt(&self) -> Var<'t, S> {
        self.unary(|a| Op::Sqrt { a }, |x| x.sqrt())
    }

    /// Numerically stable softmax along `axis` (per-slice max subtraction).
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, S>> {
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            let slices = axis_slices(v.shape(), axis)?;
            let mut data = vec![S::zero(); v.numel()];
            for sl in &slices {
                let x = gather_slice(v.data(), *sl);
                let mut out = vec![S::zero(); x.len()];
                softmax_slice(&x, &mut out);
                scatter_slice(&mut data, *sl, &out);
            }
            (
                Tensor::new(v.shape().to_vec(), data)?,
                nodes[self.id].needs_grad,
            )
        };
        Ok(self
            .tape
            .push(value, Op::Softmax { a: self.id, axis }, needs, None))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t, S>> {
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            let slices = axis_slices(v.shape(), axis)?;
            let mut data = vec![S::zero(); v.numel()];
            for sl in &slices {
                let x = gather_slice(v.data(), *sl);
                let mut out = vec![S::zero(); x.len()];
                log_softmax_slice(&x, &mut out);
                scatter_slice(&mut data, *sl, &out);
            }
            (
                Tensor::new(v.shape().to_vec(), data)?,
                nodes[self.id].needs_grad,
            )
        };
        Ok(self
            .tape
            .push(value, Op::LogSoftmax { a: self.id, axis }, needs, None))
    }

    /// Per-row log(sum(exp(x))) of a matrix (a vector counts as one row),
    /// with max subtraction for stability.
    pub fn logsumexp_rows(&self) -> Result<Var<'t, S>> {
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            let (m, n) = v.rows_cols();
            let mut out = Vec::with_capacity(m);
            for row in v.data().chunks_exact(n) {
                let mut mx = row[0];
                for x in &row[1..] {
                    if *x > mx {
                        mx = *x;
                    }
                }
                let mut sum = S::zero();
                for x in row {
                    sum = sum + (*x - mx).exp();
                }
                out.push(mx + sum.ln());
            }
            (Tensor::new(vec![m], out)?, nodes[self.id].needs_grad)
        };
        Ok(self
            .tape
            .push(value, Op::LogSumExpRows { a: self.id }, needs, None))
    }

    /// Divides each row by its Euclidean norm. Errors on a zero-norm row.
    pub fn l2_normalize_rows(&self) -> Result<Var<'t, S>> {
        let (value, norms, needs) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            let (m, n) = v.rows_cols();
            let mut data = Vec::with_capacity(v.numel());
            let mut norms = Vec::with_capacity(m);
            for (i, row) in v.data().chunks_exact(n).enumerate() {
                let mut sq = S::zero();
                for x in row {
                    sq = sq + *x * *x;
                }
                let norm = sq.sqrt();
                if norm <= S::zero() {
                    return Err(Error::Numerics(format!(
                        "l2_normalize_rows: zero-norm row {i}"
                    )));
                }
                norms.push(norm);
                for x in row {
                    data.push(*x / norm);
                }
            }
            (
                Tensor::new(v.shape().to_vec(), data)?,
                norms,
                nodes[self.id].needs_grad,
            )
        };
        Ok(self
            .tape
            .push(value, Op::L2NormalizeRows { a: self.id, norms }, needs, None))
    }

    /// Layer normalization over the last axis with learnable gain and bias,
    /// population variance, and additive `eps` under the square root.
    pub fn layer_norm(&self, gain: Var<'t, S>, bias: Var<'t, S>, eps: S) -> Result<Var<'t, S>> {
        let (value, inv_std, xhat, needs) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            let gv = &nodes[gain.id].value;
            let bv = &nodes[bias.id].value;
            let (m, d) = v.rows_cols();
            if d == 0 || gv.shape() != [d] || bv.shape() != [d] {
                return Err(Error::shape("layer_norm", v.shape(), gv.shape()));
            }
            let inv_d = S::of(1.0 / d as f64);
            let mut data = Vec::with_capacity(v.numel());
            let mut inv_std = Vec::with_capacity(m);
            let mut xhat = Vec::with_capacity(v.numel());
            for row in v.data().chunks_exact(d) {
                let mut mu = S::zero();
                for x in row {
                    mu = mu + *x;
                }
                mu = mu * inv_d;
                let mut var = S::zero();
                for x in row {
                    let c = *x - mu;
                    var = var + c * c;
                }
                var = var * inv_d;
                let istd = S::one() / (var + eps).sqrt();
                inv_std.push(istd);
                for (j, x) in row.iter().enumerate() {
                    let xh = (*x - mu) * istd;
                    xhat.push(xh);
                    data.push(gv.data()[j] * xh + bv.data()[j]);
                }
            }
            let needs =
                nodes[self.id].needs_grad || nodes[gain.id].needs_grad || nodes[bias.id].needs_grad;
            (Tensor::new(v.shape().to_vec(), data)?, inv_std, xhat, needs)
        };
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                inv_std,
                xhat,
            },
            needs,
            None,
        ))
    }
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

fn acc<S: Scalar>(
    grads: &mut [Option<Vec<S>>],
    nodes: &[Node<S>],
    id: usize,
    f: impl FnOnce(&mut [S]),
) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![S::zero(); nodes[id].value.numel()]);
    f(slot);
}

fn add_assign<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

fn backward_op<S: Scalar>(
    node: &Node<S>,
    g: &[S],
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
) {
    match &node.op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            acc(grads, nodes, *a, |da| {
                // dA[i,p] = sum_j G[i,j] * B[p,j]
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    let darow = &mut da[i * k..(i + 1) * k];
                    for (p, dap) in darow.iter_mut().enumerate() {
                        let brow = &bv.data()[p * n..(p + 1) * n];
                        let mut s = S::zero();
                        for (gv, bvx) in grow.iter().zip(brow) {
                            s = s + *gv * *bvx;
                        }
                        *dap = *dap + s;
                    }
                }
            });
            acc(grads, nodes, *b, |db| {
                // dB[p,j] = sum_i A[i,p] * G[i,j]
                for i in 0..m {
                    let arow = &av.data()[i * k..(i + 1) * k];
                    let grow = &g[i * n..(i + 1) * n];
                    for (p, ap) in arow.iter().enumerate() {
                        let dbrow = &mut db[p * n..(p + 1) * n];
                        for (dbv, gv) in dbrow.iter_mut().zip(grow) {
                            *dbv = *dbv + *ap * *gv;
                        }
                    }
                }
            });
        }
        Op::Transpose { a } => {
            let v = &nodes[*a].value;
            let (m, n) = (v.shape()[0], v.shape()[1]);
            acc(grads, nodes, *a, |da| {
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = da[i * n + j] + g[j * m + i];
                    }
                }
            });
        }
        Op::Reshape { a } => {
            acc(grads, nodes, *a, |da| add_assign(da, g));
        }
        Op::Add { a, b } => {
            let full = node.value.shape();
            for id in [a, b] {
                let shape = nodes[*id].value.shape().to_vec();
                acc(grads, nodes, *id, |d| {
                    add_assign(d, &reduce_to(g, full, &shape))
                });
            }
        }
        Op::Sub { a, b } => {
            let full = node.value.shape();
            let ashape = nodes[*a].value.shape().to_vec();
            acc(grads, nodes, *a, |da| {
                add_assign(da, &reduce_to(g, full, &ashape))
            });
            let bshape = nodes[*b].value.shape().to_vec();
            acc(grads, nodes, *b, |db| {
                let r = reduce_to(g, full, &bshape);
                for (d, s) in db.iter_mut().zip(&r) {
                    *d = *d - *s;
                }
            });
        }
        Op::Mul { a, b } => {
            let full = node.value.shape();
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let b_full = expand_to(bv.data(), bv.shape(), full);
            let a_full = expand_to(av.data(), av.shape(), full);
            let ashape = av.shape().to_vec();
            acc(grads, nodes, *a, |da| {
                let prod: Vec<S> = g.iter().zip(&b_full).map(|(x, y)| *x * *y).collect();
                add_assign(da, &reduce_to(&prod, full, &ashape));
            });
            let bshape = bv.shape().to_vec();
            acc(grads, nodes, *b, |db| {
                let prod: Vec<S> = g.iter().zip(&a_full).map(|(x, y)| *x * *y).collect();
                add_assign(db, &reduce_to(&prod, full, &bshape));
            });
        }
        Op::Scale { a, c } => {
            acc(grads, nodes, *a, |da| {
                for (d, s) in da.iter_mut().zip(g) {
                    *d = *d + *s * *c;
                }
            });
        }
        Op::Concat { a, b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            match (av.rank(), bv.rank()) {
                (1, 1) => {
                    let ca = av.numel();
                    acc(grads, nodes, *a, |da| add_assign(da, &g[..ca]));
                    acc(grads, nodes, *b, |db| add_assign(db, &g[ca..]));
                }
                (2, 2) => {
                    let (r, ca, cb) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    acc(grads, nodes, *a, |da| {
                        for i in 0..r {
                            add_assign(
                                &mut da[i * ca..(i + 1) * ca],
                                &g[i * (ca + cb)..i * (ca + cb) + ca],
                            );
                        }
                    });
                    acc(grads, nodes, *b, |db| {
                        for i in 0..r {
                            add_assign(
                                &mut db[i * cb..(i + 1) * cb],
                                &g[i * (ca + cb) + ca..(i + 1) * (ca + cb)],
                            );
                        }
                    });
                }
                (2, 1) => {
                    let (r, ca, cb) = (av.shape()[0], av.shape()[1], bv.numel());
                    acc(grads, nodes, *a, |da| {
                        for i in 0..r {
                            add_assign(
                                &mut da[i * ca..(i + 1) * ca],
                                &g[i * (ca + cb)..i * (ca + cb) + ca],
                            );
                        }
                    });
                    acc(grads, nodes, *b, |db| {
                        for i in 0..r {
                            add_assign(db, &g[i * (ca + cb) + ca..(i + 1) * (ca + cb)]);
                        }
                    });
                }
                _ => unreachable!("concat forward rejected other ranks"),
            }
        }
        Op::SliceCols { a, lo, hi } => {
            let v = &nodes[*a].value;
            let (r, c) = v.rows_cols();
            let w = hi - lo;
            acc(grads, nodes, *a, |da| {
                for i in 0..r {
                    add_assign(&mut da[i * c + lo..i * c + hi], &g[i * w..(i + 1) * w]);
                }
            });
        }
        Op::SelectRow { a, idx } => {
            let v = &nodes[*a].value;
            match v.rank() {
                2 => {
                    let c = v.shape()[1];
                    acc(grads, nodes, *a, |da| {
                        add_assign(&mut da[idx * c..(idx + 1) * c], g)
                    });
                }
                _ => {
                    acc(grads, nodes, *a, |da| {
                        da[*idx] = da[*idx] + g[0];
                    });
                }
            }
        }
        Op::Diag { a } => {
            let n = nodes[*a].value.shape()[0];
            acc(grads, nodes, *a, |da| {
                for i in 0..n {
                    da[i * n + i] = da[i * n + i] + g[i];
                }
            });
        }
        Op::StackRows { rows } => {
            let cols = node.value.shape()[1];
            for (i, rid) in rows.iter().enumerate() {
                acc(grads, nodes, *rid, |dr| {
                    add_assign(dr, &g[i * cols..(i + 1) * cols])
                });
            }
        }
        Op::MeanAxis { a, axis } => {
            let v = &nodes[*a].value;
            let (m, n) = (v.shape()[0], v.shape()[1]);
            if *axis == 0 {
                let inv = S::of(1.0 / m as f64);
                acc(grads, nodes, *a, |da| {
                    for row in da.chunks_exact_mut(n) {
                        for (d, gv) in row.iter_mut().zip(g) {
                            *d = *d + *gv * inv;
                        }
                    }
                });
            } else {
                let inv = S::of(1.0 / n as f64);
                acc(grads, nodes, *a, |da| {
                    for (i, row) in da.chunks_exact_mut(n).enumerate() {
                        let gi = g[i] * inv;
                        for d in row {
                            *d = *d + gi;
                        }
                    }
                });
            }
        }
        Op::MaxAxis { a, axis, arg } => {
            let n = nodes[*a].value.shape()[1];
            acc(grads, nodes, *a, |da| {
                for (o, bi) in arg.iter().enumerate() {
                    let idx = if *axis == 0 { bi * n + o } else { o * n + bi };
                    da[idx] = da[idx] + g[o];
                }
            });
        }
        Op::SumAll { a } => {
            acc(grads, nodes, *a, |da| {
                for d in da.iter_mut() {
                    *d = *d + g[0];
                }
            });
        }
        Op::MeanAll { a } => {
            let inv = S::of(1.0 / nodes[*a].value.numel() as f64);
            acc(grads, nodes, *a, |da| {
                let gi = g[0] * inv;
                for d in da.iter_mut() {
                    *d = *d + gi;
                }
            });
        }
        Op::Relu { a } => {
            let x = &nodes[*a].value;
            acc(grads, nodes, *a, |da| {
                for ((d, gv), xv) in da.iter_mut().zip(g).zip(x.data()) {
                    if *xv > S::zero() {
                        *d = *d + *gv;
                    }
                }
            });
        }
        Op::Sigmoid { a } => {
            let y = &node.value;
            acc(grads, nodes, *a, |da| {
                for ((d, gv), yv) in da.iter_mut().zip(g).zip(y.data()) {
                    *d = *d + *gv * *yv * (S::one() - *yv);
                }
            });
        }
        Op::Tanh { a } => {
            let y = &node.value;
            acc(grads, nodes, *a, |da| {
                for ((d, gv), yv) in da.iter_mut().zip(g).zip(y.data()) {
                    *d = *d + *gv * (S::one() - *yv * *yv);
                }
            });
        }
        Op::Sqrt { a } => {
            let y = &node.value;
            let half = S::of(0.5);
            acc(grads, nodes, *a, |da| {
                for ((d, gv), yv) in da.iter_mut().zip(g).zip(y.data()) {
                    // subgradient 0 at exactly zero
                    if *yv > S::zero() {
                        *d = *d + *gv * half / *yv;
                    }
                }
            });
        }
        Op::Softmax { a, axis } => {
            let y = &node.value;
            let slices = axis_slices(y.shape(), *axis).expect("validated in forward");
            acc(grads, nodes, *a, |da| {
                for sl in &slices {
                    let ys = gather_slice(y.data(), *sl);
                    let gs = gather_slice(g, *sl);
                    let mut dot = S::zero();
                    for (yv, gv) in ys.iter().zip(&gs) {
                        dot = dot + *yv * *gv;
                    }
                    let dx: Vec<S> = ys
                        .iter()
                        .zip(&gs)
                        .map(|(yv, gv)| *yv * (*gv - dot))
                        .collect();
                    let (start, stride, len) = *sl;
                    for i in 0..len {
                        da[start + i * stride] = da[start + i * stride] + dx[i];
                    }
                }
            });
        }
        Op::LogSoftmax { a, axis } => {
            let y = &node.value;
            let slices = axis_slices(y.shape(), *axis).expect("validated in forward");
            acc(grads, nodes, *a, |da| {
                for sl in &slices {
                    let ys = gather_slice(y.data(), *sl);
                    let gs = gather_slice(g, *sl);
                    let mut gsum = S::zero();
                    for gv in &gs {
                        gsum = gsum + *gv;
                    }
                    let (start, stride, len) = *sl;
                    for i in 0..len {
                        let p = ys[i].exp();
                        da[start + i * stride] = da[start + i * stride] + gs[i] - p * gsum;
                    }
                }
            });
        }
        Op::LogSumExpRows { a } => {
            let x = &nodes[*a].value;
            let (m, n) = x.rows_cols();
            let out = &node.value;
            acc(grads, nodes, *a, |da| {
                for i in 0..m {
                    let lse = out.data()[i];
                    let gi = g[i];
                    for j in 0..n {
                        let p = (x.data()[i * n + j] - lse).exp();
                        da[i * n + j] = da[i * n + j] + gi * p;
                    }
                }
            });
        }
        Op::L2NormalizeRows { a, norms } => {
            let y = &node.value;
            let (m, n) = y.rows_cols();
            acc(grads, nodes, *a, |da| {
                for i in 0..m {
                    let yr = &y.data()[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let mut dot = S::zero();
                    for (yv, gv) in yr.iter().zip(gr) {
                        dot = dot + *yv * *gv;
                    }
                    let inv = S::one() / norms[i];
                    for j in 0..n {
                        da[i * n + j] = da[i * n + j] + (gr[j] - yr[j] * dot) * inv;
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            inv_std,
            xhat,
        } => {
            let (m, d) = nodes[*x].value.rows_cols();
            let gv = &nodes[*gain].value;
            acc(grads, nodes, *gain, |dg| {
                for i in 0..m {
                    for j in 0..d {
                        dg[j] = dg[j] + g[i * d + j] * xhat[i * d + j];
                    }
                }
            });
            acc(grads, nodes, *bias, |db| {
                for i in 0..m {
                    for j in 0..d {
                        db[j] = db[j] + g[i * d + j];
                    }
                }
            });
            let inv_d = S::of(1.0 / d as f64);
            acc(grads, nodes, *x, |dx| {
                for i in 0..m {
                    let xh = &xhat[i * d..(i + 1) * d];
                    let gr = &g[i * d..(i + 1) * d];
                    let mut s1 = S::zero();
                    let mut s2 = S::zero();
                    let h: Vec<S> = gr
                        .iter()
                        .zip(gv.data())
                        .map(|(gg, ga)| *gg * *ga)
                        .collect();
                    for (hv, xv) in h.iter().zip(xh) {
                        s1 = s1 + *hv;
                        s2 = s2 + *hv * *xv;
                    }
                    let istd = inv_std[i];
                    for j in 0..d {
                        let t = h[j] - s1 * inv_d - xh[j] * s2 * inv_d;
                        dx[i * d + j] = dx[i * d + j] + istd * t;
                    }
                }
            });
        }
    }
}
