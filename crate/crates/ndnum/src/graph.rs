//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation evaluates
//! eagerly, stores its output and whatever forward context its backward rule
//! needs, and returns a [`Var`] handle. Because a node can only refer to nodes
//! created before it, the arena order is already a topological order and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! There is no broadcasting. Shapes must line up exactly; tiling and slicing
//! are expressed with [`Graph::gather`].

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{matmul_a_bt, matmul_at_b, matmul_raw, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The catalog of differentiable operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    ScalarMul,
    Div,
    MatMul,
    Relu,
    Sigmoid,
    Softmax,
    Log,
    Square,
    Sum,
    Mean,
    Reshape,
    Concat,
    Gather,
    Sort,
    GradReverse,
}

/// Source indices that sort one row: `sorted[i] = row[perm[i]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SortPermutation {
    pub perm: Vec<usize>,
}

impl SortPermutation {
    /// Stable ascending argsort; equal values keep their original order.
    pub fn of(values: &[f64]) -> Self {
        let mut perm: Vec<usize> = (0..values.len()).collect();
        perm.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        Self { perm }
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        self.perm.iter().map(|&i| values[i]).collect()
    }

    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.perm.len()];
        for &p in &self.perm {
            if p >= seen.len() || seen[p] {
                return false;
            }
            seen[p] = true;
        }
        true
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    ScalarMul(Var, f64),
    MatMul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Gather { input: Var, index: Arc<[usize]> },
    Sort { input: Var, index: Arc<[usize]> },
    GradReverse { input: Var, factor: f64 },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::ScalarMul(..) => OpKind::ScalarMul,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Log(_) => OpKind::Log,
            Op::Square(_) => OpKind::Square,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::Gather { .. } => OpKind::Gather,
            Op::Sort { .. } => OpKind::Sort,
            Op::GradReverse { .. } => OpKind::GradReverse,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::ScalarMul(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a) => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Gather { input, .. } | Op::Sort { input, .. } | Op::GradReverse { input, .. } => {
                vec![*input]
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Recorded computation. See the module docs.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    branch_hash: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            branch_hash: FNV_OFFSET,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Hash of every discrete decision taken so far (ReLU activity patterns,
    /// sort permutations, and anything passed to [`Graph::mark_branch`]).
    /// Two evaluations with equal signatures ran through the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        self.branch_hash
    }

    /// Mixes an externally made discrete decision into the branch signature.
    pub fn mark_branch(&mut self, token: u64) {
        self.mix(token);
    }

    fn mix(&mut self, token: u64) {
        for byte in token.to_le_bytes() {
            self.branch_hash ^= u64::from(byte);
            self.branch_hash = self.branch_hash.wrapping_mul(FNV_PRIME);
        }
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op) -> Result<Var> {
        if let Some(index) = value.first_non_finite() {
            return Err(Error::NonFinite { op, index });
        }
        let needs_grad = node_op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op: node_op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownNode(v.0))
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shapes checked")
    }

    fn unary(&mut self, op: &'static str, a: Var, f: impl Fn(f64) -> f64, node: Op) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(f);
        self.push(op, out, node)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push("add", out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b))
    }

    /// Elementwise quotient. Division by zero surfaces as a non-finite error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let out = self.zip_with(a, b, |x, y| x / y);
        self.push("div", out, Op::Div(a, b))
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("scalar_mul", a, |x| s * x, Op::ScalarMul(a, s))
    }

    /// `(m×k)·(k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        self.push("matmul", out, Op::MatMul(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        // Activity pattern feeds the branch signature.
        let mut h = self.branch_hash;
        for &x in self.value(a).data() {
            h ^= u64::from(x > 0.0);
            h = h.wrapping_mul(FNV_PRIME);
        }
        self.branch_hash = h;
        self.unary("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Empty { op: "softmax" });
        }
        let w = t.last_dim();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(w) {
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push("softmax", out, Op::Softmax(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        if let Some((index, &value)) = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .find(|(_, &v)| v <= 0.0 || v.is_nan())
        {
            return Err(Error::NonPositiveLog { index, value });
        }
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Empty { op: "mean" });
        }
        let m = t.sum() / t.len() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(a))
    }

    /// Concatenates along `axis`; every other extent must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(Error::Empty { op: "concat" })?;
        for &v in inputs {
            self.check(v)?;
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::BadAxis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(out_shape, data)?;
        self.push(
            "concat",
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// `out.flat[i] = input.flat[index[i]]`, reshaped to `shape`.
    ///
    /// Slicing, tiling, transposition and selection are all instances.
    pub fn gather(&mut self, a: Var, index: impl Into<Arc<[usize]>>, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let index: Arc<[usize]> = index.into();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(index.len());
        for &i in index.iter() {
            let v = *src.get(i).ok_or(Error::IndexOutOfRange {
                op: "gather",
                index: i,
                len: src.len(),
            })?;
            data.push(v);
        }
        let out = Tensor::new(shape.to_vec(), data)?;
        self.push("gather", out, Op::Gather { input: a, index })
    }

    /// Sorts every row (last axis) ascending. Ties keep their original order.
    ///
    /// The returned permutations are frozen into the graph; backward routes
    /// each output gradient to the element it came from.
    pub fn sort_with_permutation(&mut self, a: Var) -> Result<(Var, Vec<SortPermutation>)> {
        self.check(a)?;
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Empty { op: "sort" });
        }
        let w = t.last_dim();
        let mut perms = Vec::with_capacity(t.len() / w);
        let mut flat = Vec::with_capacity(t.len());
        let mut data = Vec::with_capacity(t.len());
        for (r, row) in t.data().chunks(w).enumerate() {
            let p = SortPermutation::of(row);
            for &i in &p.perm {
                flat.push(r * w + i);
                data.push(row[i]);
            }
            perms.push(p);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        for &i in &flat {
            self.mix(i as u64);
        }
        let var = self.push(
            "sort",
            out,
            Op::Sort {
                input: a,
                index: flat.into(),
            },
        )?;
        Ok((var, perms))
    }

    /// Identity forward; backward multiplies the incoming gradient by `-factor`.
    pub fn grad_reverse(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).clone();
        self.push("grad_reverse", out, Op::GradReverse { input: a, factor })
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.check(root)?;
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            for input in node.op.inputs() {
                if input.0 >= id {
                    return Err(Error::Cycle { node: id, input: input.0 });
                }
            }
            self.backprop_node(node, &g, &mut grads);
        }

        let leaves = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match (&self.nodes[i].op, g) {
                (Op::Leaf, Some(g)) if self.nodes[i].needs_grad => Some(g),
                _ => None,
            })
            .collect();
        Ok(Gradients { leaves })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, || g.clone());
                self.accum(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, || g.clone());
                self.accum(grads, *b, || g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                self.accum(grads, *a, || self.zip_tensor(g, self.value(*b), |gv, bv| gv * bv));
                self.accum(grads, *b, || self.zip_tensor(g, self.value(*a), |gv, av| gv * av));
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                self.accum(grads, *a, || self.zip_tensor(g, bv, |gv, d| gv / d));
                self.accum(grads, *b, || {
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .zip(bv.data())
                        .map(|((gv, q), d)| -gv * q / d)
                        .collect();
                    Tensor::new(bv.shape().to_vec(), data).expect("shape")
                });
            }
            Op::ScalarMul(a, s) => self.accum(grads, *a, || g.map(|v| s * v)),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                self.accum(grads, *a, || {
                    Tensor::new(vec![m, k], matmul_a_bt(g.data(), tb.data(), m, k, n)).expect("shape")
                });
                self.accum(grads, *b, || {
                    Tensor::new(vec![k, n], matmul_at_b(ta.data(), g.data(), m, k, n)).expect("shape")
                });
            }
            Op::Relu(a) => {
                self.accum(grads, *a, || {
                    self.zip_tensor(g, self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })
                });
            }
            Op::Sigmoid(a) => self.accum(grads, *a, || self.zip_tensor(g, y, |gv, s| gv * s * (1.0 - s))),
            Op::Softmax(a) => self.accum(grads, *a, || {
                let w = y.last_dim();
                let mut data = Vec::with_capacity(y.len());
                for (grow, yrow) in g.data().chunks(w).zip(y.data().chunks(w)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    data.extend(grow.iter().zip(yrow).map(|(gv, yv)| yv * (gv - dot)));
                }
                Tensor::new(y.shape().to_vec(), data).expect("shape")
            }),
            Op::Log(a) => self.accum(grads, *a, || self.zip_tensor(g, self.value(*a), |gv, x| gv / x)),
            Op::Square(a) => {
                self.accum(grads, *a, || self.zip_tensor(g, self.value(*a), |gv, x| 2.0 * x * gv))
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accum(grads, *a, || Tensor::full(self.shape(*a), gv));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let gv = g.item() / n;
                self.accum(grads, *a, || Tensor::full(self.shape(*a), gv));
            }
            Op::Reshape(a) => self.accum(grads, *a, || {
                g.clone().reshaped(self.shape(*a).to_vec()).expect("shape")
            }),
            Op::Concat { inputs, axis } => {
                let shape = y.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let s = self.shape(v).to_vec();
                    let chunk = s[*axis] * inner;
                    let start = offset;
                    self.accum(grads, v, || {
                        let mut data = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * total + start;
                            data.extend_from_slice(&g.data()[base..base + chunk]);
                        }
                        Tensor::new(s.clone(), data).expect("shape")
                    });
                    offset += chunk;
                }
            }
            Op::Gather { input, index } | Op::Sort { input, index } => {
                self.accum(grads, *input, || {
                    let mut out = Tensor::zeros(self.shape(*input));
                    let buf = out.data_mut();
                    for (&i, &gv) in index.iter().zip(g.data()) {
                        buf[i] += gv;
                    }
                    out
                });
            }
            Op::GradReverse { input, factor } => self.accum(grads, *input, || g.map(|v| -factor * v)),
        }
    }

    fn zip_tensor(&self, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data).expect("shape")
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, contribution: impl FnOnce() -> Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let c = contribution();
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&c),
            slot @ None => *slot = Some(c),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradients of a root with respect to every leaf that requires them.
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `leaf`; `None` if the root does not depend on it or it
    /// was registered without `requires_grad`.
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        self.leaves.get(leaf.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, leaf: Var) -> Option<Tensor> {
        self.leaves.get_mut(leaf.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_param(g: &mut Graph, v: &[f64]) -> Var {
        g.param(Tensor::vector(v.to_vec()))
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0]));
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5]);
    }

    #[test]
    fn sort_returns_values_and_permutation() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![3.0, 1.0, 2.0]));
        let (y, perms) = g.sort_with_permutation(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
        assert_eq!(perms, vec![SortPermutation { perm: vec![1, 2, 0] }]);
    }

    #[test]
    fn sort_ties_keep_original_order() {
        let p = SortPermutation::of(&[2.0, 1.0, 2.0, 1.0]);
        assert_eq!(p.perm, vec![1, 3, 0, 2]);
    }

    #[test]
    fn matmul_by_hand() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[1, 1]);
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
        let m = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(m, m), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 0.0]));
        assert_eq!(g.log(a), Err(Error::NonPositiveLog { index: 1, value: 0.0 }));
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![]));
        assert!(matches!(g.mean(a), Err(Error::Empty { .. })));
        assert!(matches!(g.sort_with_permutation(a), Err(Error::Empty { .. })));
        assert!(matches!(g.concat(&[], 0), Err(Error::Empty { .. })));
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0]));
        let z = g.constant(Tensor::vector(vec![0.0]));
        assert!(matches!(g.div(a, z), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = vec_param(&mut g, &[1.0, 2.0, 3.0]);
        let xx = g.mul(x, x).unwrap();
        let s = g.sum(xx).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn grad_reverse_negates() {
        let mut g = Graph::new();
        let x = vec_param(&mut g, &[0.3, -1.0, 2.0]);
        let r = g.grad_reverse(x, 1.0).unwrap();
        assert_eq!(g.value(r), g.value(x));
        let s = g.sum(r).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[-1.0, -1.0, -1.0]);
    }

    #[test]
    fn grad_routes_through_sort_permutation() {
        let mut g = Graph::new();
        let x = vec_param(&mut g, &[3.0, 1.0]);
        let (sx, _) = g.sort_with_permutation(x).unwrap();
        let sq = g.square(sx).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0, 2.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = vec_param(&mut g, &[1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = vec_param(&mut g, &[1.0]);
        let c = g.constant(Tensor::vector(vec![2.0]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn concat_along_inner_axis_and_back() {
        let mut g = Graph::new();
        let a = g.param(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let b = g.param(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let p = g.mul(c, w).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 4.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn branch_signature_tracks_relu_pattern() {
        let sig = |v: f64| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::vector(vec![v]));
            g.relu(x).unwrap();
            g.branch_signature()
        };
        assert_eq!(sig(0.5), sig(0.7));
        assert_ne!(sig(0.5), sig(-0.5));
    }
}
