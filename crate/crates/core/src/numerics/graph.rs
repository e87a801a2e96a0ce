//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Parameter leaves borrow
//! their storage from a [`Tensor`] so that binding a large embedding matrix
//! costs nothing. [`Graph::backward`] returns a [`Gradients`] table keyed
//! by [`Var`]; [`Graph::grad_of`] builds the gradient itself as graph nodes
//! so that quantities such as gradient norms can be differentiated again.

use super::tensor::{numel, NumericsError, Result, Shape, Tensor};
use std::borrow::Cow;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    /// First operand has the full shape, second is broadcast.
    Add(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Sum(Var),
    Norm(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    PadSlice { x: Var, start: usize },
    Reshape(Var),
    Transpose { x: Var, rows: usize, cols: usize },
    ColMax { x: Var, argmax: Vec<usize> },
    ColPick { x: Var, argmax: Vec<usize> },
    ColPlace { x: Var, argmax: Vec<usize> },
    Unfold { x: Var, width: usize },
    Fold { x: Var, width: usize },
    Gather { table: Var, ids: Vec<usize>, frozen_row: Option<usize> },
    ScatterAdd { x: Var, index: Vec<usize> },
    PairwiseAdd { a: Var, b: Var },
    ReduceTo(Var),
    BroadcastTo(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softplus(_) => "softplus",
            Op::Sum(_) => "sum",
            Op::Norm(_) => "norm",
            Op::Softmax(_) => "softmax",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::PadSlice { .. } => "pad_slice",
            Op::Reshape(_) => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::ColMax { .. } => "col_max",
            Op::ColPick { .. } => "col_pick",
            Op::ColPlace { .. } => "col_place",
            Op::Unfold { .. } => "unfold",
            Op::Fold { .. } => "fold",
            Op::Gather { .. } => "gather",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::PairwiseAdd { .. } => "pairwise_add",
            Op::ReduceTo(_) => "reduce_to",
            Op::BroadcastTo(_) => "broadcast_to",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::PairwiseAdd { a, b } => vec![*a, *b],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Concat(parts) => parts.clone(),
            Op::Gather { table, .. } => vec![*table],
            Op::Affine { x, .. }
            | Op::Slice { x, .. }
            | Op::PadSlice { x, .. }
            | Op::Transpose { x, .. }
            | Op::ColMax { x, .. }
            | Op::ColPick { x, .. }
            | Op::ColPlace { x, .. }
            | Op::Unfold { x, .. }
            | Op::Fold { x, .. }
            | Op::ScatterAdd { x, .. } => vec![*x],
            Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Softplus(x)
            | Op::Sum(x)
            | Op::Norm(x)
            | Op::Softmax(x)
            | Op::Reshape(x)
            | Op::ReduceTo(x)
            | Op::BroadcastTo(x) => vec![*x],
        }
    }
}

struct Node<'p> {
    shape: Shape,
    value: Cow<'p, [f64]>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but returns zeros of length `len` when absent.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Cow<'_, [f64]> {
        match self.get(v) {
            Some(g) => Cow::Borrowed(g),
            None => Cow::Owned(vec![0.0; len]),
        }
    }
}

#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

fn broadcastable(small: &[usize], big: &[usize]) -> bool {
    small == big || numel(small) == 1 || (small.len() <= big.len() && big.ends_with(small))
}

fn reduce_into(src: &[f64], dst: &mut [f64]) {
    let n = dst.len();
    if n == src.len() {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    } else {
        for (i, s) in src.iter().enumerate() {
            dst[i % n] += s;
        }
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = dst.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
fn matmul_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
fn matmul_at_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Copies the value of `v` out as an owned tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shapes are valid")
    }

    fn push(&mut self, shape: Shape, value: Cow<'p, [f64]>, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, shape: Shape, value: Cow<'p, [f64]>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter tensor without copying; it is differentiable iff
    /// the tensor requires grad.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.push_leaf(
            t.shape().to_vec(),
            Cow::Borrowed(t.data()),
            t.requires_grad(),
        )
    }

    /// Binds a parameter tensor as a constant regardless of its flag.
    pub fn frozen(&mut self, t: &'p Tensor) -> Var {
        self.push_leaf(t.shape().to_vec(), Cow::Borrowed(t.data()), false)
    }

    pub fn leaf(&mut self, shape: impl Into<Shape>, data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) || numel(&shape) != data.len() {
            return Err(NumericsError::Shape {
                op: "leaf",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(self.push_leaf(shape, Cow::Owned(data), requires_grad))
    }

    pub fn constant(&mut self, shape: impl Into<Shape>, data: Vec<f64>) -> Result<Var> {
        self.leaf(shape, data, false)
    }

    pub fn zeros(&mut self, shape: impl Into<Shape>) -> Var {
        let shape = shape.into();
        let n = numel(&shape);
        self.push_leaf(shape, Cow::Owned(vec![0.0; n]), false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push_leaf(vec![1], Cow::Owned(vec![value]), false)
    }

    /// A constant copy of `v`; gradients do not flow through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, data) = (n.shape.clone(), n.value.to_vec());
        self.push_leaf(shape, Cow::Owned(data), false)
    }

    // ---- linear algebra -------------------------------------------------

    /// Matrix product. A 1-D left operand is a row vector and a 1-D right
    /// operand a column vector; the corresponding output axis is dropped.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (m, k) = match sa.len() {
            1 => (1, sa[0]),
            2 => (sa[0], sa[1]),
            _ => return Err(NumericsError::Shape { op: "matmul", left: sa, right: sb }),
        };
        let (k2, n) = match sb.len() {
            1 => (sb[0], 1),
            2 => (sb[0], sb[1]),
            _ => return Err(NumericsError::Shape { op: "matmul", left: sa, right: sb }),
        };
        if k != k2 {
            return Err(NumericsError::Shape { op: "matmul", left: sa, right: sb });
        }
        let shape = match (sa.len(), sb.len()) {
            (2, 2) => vec![m, n],
            (1, 2) => vec![n],
            (2, 1) => vec![m],
            _ => vec![1],
        };
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(shape, Cow::Owned(out), Op::MatMul { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(NumericsError::Shape { op: "transpose", left: s, right: vec![] });
        }
        let (rows, cols) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = v[r * cols + c];
            }
        }
        Ok(self.push(vec![cols, rows], Cow::Owned(out), Op::Transpose { x, rows, cols }))
    }

    // ---- element-wise -----------------------------------------------------

    fn order_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if broadcastable(sb, sa) {
            Ok((a, b))
        } else if broadcastable(sa, sb) {
            Ok((b, a))
        } else {
            Err(NumericsError::Shape { op, left: sa.to_vec(), right: sb.to_vec() })
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (big, small) = self.order_broadcast("add", a, b)?;
        let bv = self.value(small);
        let nb = bv.len();
        let out: Vec<f64> = self
            .value(big)
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % nb])
            .collect();
        let shape = self.shape(big).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Add(big, small)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (big, small) = self.order_broadcast("mul", a, b)?;
        let bv = self.value(small);
        let nb = bv.len();
        let out: Vec<f64> = self
            .value(big)
            .iter()
            .enumerate()
            .map(|(i, x)| x * bv[i % nb])
            .collect();
        let shape = self.shape(big).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Mul(big, small)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| scale * v + shift).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, Cow::Owned(out), Op::Affine { x, scale })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, Cow::Owned(out), op)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// `log(1 + exp(x))`, computed without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(&bad) = self.value(x).iter().find(|v| !(**v > 0.0)) {
            return Err(NumericsError::Domain { op: "log", value: bad });
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![1], Cow::Owned(vec![s]), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Euclidean norm of all entries.
    pub fn norm(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(vec![1], Cow::Owned(vec![s]), Op::Norm(x))
    }

    /// Sum of many scalars (or equal-shape tensors).
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = xs.split_first() else {
            return Err(NumericsError::Contract("add_all of an empty list".into()));
        };
        let mut acc = first;
        for &x in rest {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    /// Softmax over a vector; masked (`false`) positions receive exactly 0.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 1 {
            return Err(NumericsError::Shape { op: "softmax", left: s, right: vec![] });
        }
        let v = self.value(x);
        if let Some(m) = mask {
            if m.len() != v.len() {
                return Err(NumericsError::Shape { op: "softmax", left: s, right: vec![m.len()] });
            }
        }
        let keep = |i: usize| mask.map_or(true, |m| m[i]);
        let max = (0..v.len())
            .filter(|&i| keep(i))
            .map(|i| v[i])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(NumericsError::InvalidMask);
        }
        let mut out: Vec<f64> = (0..v.len())
            .map(|i| if keep(i) { (v[i] - max).exp() } else { 0.0 })
            .collect();
        let z: f64 = out.iter().sum();
        out.iter_mut().for_each(|o| *o /= z);
        Ok(self.push(s, Cow::Owned(out), Op::Softmax(x)))
    }

    // ---- structural -------------------------------------------------------

    fn concat_with_shape(&mut self, parts: &[Var], shape: Shape) -> Result<Var> {
        let total: usize = parts.iter().map(|p| self.value(*p).len()).sum();
        if parts.is_empty() || total != numel(&shape) {
            return Err(NumericsError::Shape { op: "concat", left: shape, right: vec![total] });
        }
        let mut out = Vec::with_capacity(total);
        for p in parts {
            out.extend_from_slice(self.value(*p));
        }
        Ok(self.push(shape, Cow::Owned(out), Op::Concat(parts.to_vec())))
    }

    /// Concatenation of vectors into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        for p in parts {
            if self.shape(*p).len() != 1 {
                return Err(NumericsError::Shape { op: "concat", left: self.shape(*p).to_vec(), right: vec![] });
            }
        }
        let total = parts.iter().map(|p| self.value(*p).len()).sum();
        self.concat_with_shape(parts, vec![total])
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(first) = rows.first() else {
            return Err(NumericsError::Contract("stack_rows of an empty list".into()));
        };
        let width = self.value(*first).len();
        for r in rows {
            if self.shape(*r) != [width] {
                return Err(NumericsError::Shape { op: "stack_rows", left: vec![width], right: self.shape(*r).to_vec() });
            }
        }
        self.concat_with_shape(rows, vec![rows.len(), width])
    }

    /// Concatenates matrices with equal column counts along the row axis.
    pub fn concat_rows(&mut self, mats: &[Var]) -> Result<Var> {
        let Some(first) = mats.first() else {
            return Err(NumericsError::Contract("concat_rows of an empty list".into()));
        };
        let cols = *self.shape(*first).last().unwrap_or(&0);
        let mut rows = 0;
        for m in mats {
            let s = self.shape(*m);
            match s.len() {
                2 if s[1] == cols => rows += s[0],
                1 if s[0] == cols => rows += 1,
                _ => return Err(NumericsError::Shape { op: "concat_rows", left: vec![cols], right: s.to_vec() }),
            }
        }
        self.concat_with_shape(mats, vec![rows, cols])
    }

    fn slice_flat(&mut self, x: Var, start: usize, shape: Shape) -> Result<Var> {
        let len = numel(&shape);
        let v = self.value(x);
        if start + len > v.len() {
            return Err(NumericsError::Shape { op: "slice", left: self.shape(x).to_vec(), right: vec![start, len] });
        }
        let out = v[start..start + len].to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Slice { x, start }))
    }

    /// Contiguous sub-vector `x[start..start+len]` of a vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        if self.shape(x).len() != 1 {
            return Err(NumericsError::Shape { op: "slice", left: self.shape(x).to_vec(), right: vec![start, len] });
        }
        self.slice_flat(x, start, vec![len])
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || i >= s[0] {
            return Err(NumericsError::Shape { op: "row", left: s, right: vec![i] });
        }
        self.slice_flat(x, i * s[1], vec![s[1]])
    }

    /// Rows `start..start+count` of a matrix.
    pub fn rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + count > s[0] || count == 0 {
            return Err(NumericsError::Shape { op: "rows", left: s, right: vec![start, count] });
        }
        self.slice_flat(x, start * s[1], vec![count, s[1]])
    }

    fn pad_slice(&mut self, x: Var, start: usize, shape: Shape) -> Var {
        let mut out = vec![0.0; numel(&shape)];
        let v = self.value(x);
        out[start..start + v.len()].copy_from_slice(v);
        self.push(shape, Cow::Owned(out), Op::PadSlice { x, start })
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Shape>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.value(x).len() || shape.contains(&0) {
            return Err(NumericsError::Shape { op: "reshape", left: self.shape(x).to_vec(), right: shape });
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Reshape(x)))
    }

    /// Column-wise maximum of a matrix; ties go to the lower row index.
    pub fn col_max(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(NumericsError::Shape { op: "col_max", left: s, right: vec![] });
        }
        let (rows, cols) = (s[0], s[1]);
        let v = self.value(x);
        let mut argmax = vec![0; cols];
        let mut out = v[..cols].to_vec();
        for r in 1..rows {
            for c in 0..cols {
                let cand = v[r * cols + c];
                if cand > out[c] {
                    out[c] = cand;
                    argmax[c] = r;
                }
            }
        }
        Ok(self.push(vec![cols], Cow::Owned(out), Op::ColMax { x, argmax }))
    }

    fn col_pick(&mut self, x: Var, argmax: Vec<usize>) -> Var {
        let cols = argmax.len();
        let v = self.value(x);
        let out: Vec<f64> = argmax.iter().enumerate().map(|(c, &r)| v[r * cols + c]).collect();
        self.push(vec![cols], Cow::Owned(out), Op::ColPick { x, argmax })
    }

    fn col_place(&mut self, x: Var, argmax: Vec<usize>, rows: usize) -> Var {
        let cols = argmax.len();
        let v = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for (c, &r) in argmax.iter().enumerate() {
            out[r * cols + c] = v[c];
        }
        self.push(vec![rows, cols], Cow::Owned(out), Op::ColPlace { x, argmax })
    }

    /// Sliding windows of `width` consecutive rows, each flattened into one
    /// output row: `[T×D] -> [(T-width+1) × width·D]`.
    pub fn unfold(&mut self, x: Var, width: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || width == 0 || width > s[0] {
            return Err(NumericsError::Shape { op: "unfold", left: s, right: vec![width] });
        }
        let (t, d) = (s[0], s[1]);
        let windows = t - width + 1;
        let v = self.value(x);
        let mut out = Vec::with_capacity(windows * width * d);
        for w in 0..windows {
            out.extend_from_slice(&v[w * d..(w + width) * d]);
        }
        Ok(self.push(vec![windows, width * d], Cow::Owned(out), Op::Unfold { x, width }))
    }

    fn fold(&mut self, x: Var, width: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (windows, wd) = (s[0], s[1]);
        let d = wd / width;
        let t = windows + width - 1;
        let v = self.value(x);
        let mut out = vec![0.0; t * d];
        for w in 0..windows {
            for (o, i) in out[w * d..(w + width) * d].iter_mut().zip(&v[w * wd..(w + 1) * wd]) {
                *o += i;
            }
        }
        self.push(vec![t, d], Cow::Owned(out), Op::Fold { x, width })
    }

    /// Row lookup `table[ids]`. Gradient never flows into `frozen_row`.
    pub fn gather(&mut self, table: Var, ids: &[usize], frozen_row: Option<usize>) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || ids.is_empty() {
            return Err(NumericsError::Shape { op: "gather", left: s, right: vec![ids.len()] });
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(NumericsError::Contract(format!("gather index {bad} out of range for {rows} rows")));
        }
        let v = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&v[i * cols..(i + 1) * cols]);
        }
        Ok(self.push(
            vec![ids.len(), cols],
            Cow::Owned(out),
            Op::Gather { table, ids: ids.to_vec(), frozen_row },
        ))
    }

    /// `out[index[i]] += x[i]` into a zero vector of length `len`.
    pub fn scatter_add(&mut self, x: Var, index: &[usize], len: usize) -> Result<Var> {
        let v = self.value(x);
        if v.len() != index.len() || index.iter().any(|&i| i >= len) {
            return Err(NumericsError::Shape { op: "scatter_add", left: self.shape(x).to_vec(), right: vec![len] });
        }
        let mut out = vec![0.0; len];
        for (&i, val) in index.iter().zip(v) {
            out[i] += val;
        }
        Ok(self.push(vec![len], Cow::Owned(out), Op::ScatterAdd { x, index: index.to_vec() }))
    }

    /// All pairwise row sums: `[m×h] ⊕ [n×h] -> [(m·n)×h]`, row `k·n + j` is `a_k + b_j`.
    pub fn pairwise_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(NumericsError::Shape { op: "pairwise_add", left: sa, right: sb });
        }
        let (m, n, h) = (sa[0], sb[0], sa[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(m * n * h);
        for k in 0..m {
            let ar = &av[k * h..(k + 1) * h];
            for j in 0..n {
                let br = &bv[j * h..(j + 1) * h];
                out.extend(ar.iter().zip(br).map(|(x, y)| x + y));
            }
        }
        Ok(self.push(vec![m * n, h], Cow::Owned(out), Op::PairwiseAdd { a, b }))
    }

    fn reduce_to(&mut self, x: Var, shape: Shape) -> Var {
        let mut out = vec![0.0; numel(&shape)];
        reduce_into(self.value(x), &mut out);
        self.push(shape, Cow::Owned(out), Op::ReduceTo(x))
    }

    fn broadcast_to(&mut self, x: Var, shape: Shape) -> Var {
        let v = self.value(x);
        let n = v.len();
        let out: Vec<f64> = (0..numel(&shape)).map(|i| v[i % n]).collect();
        self.push(shape, Cow::Owned(out), Op::BroadcastTo(x))
    }

    // ---- differentiation --------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                if let Some(g) = &grads[i] {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(NumericsError::Contract(format!("non-finite gradient at leaf {i}")));
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let want = |v: &Var| self.nodes[v.0].needs_grad;
        let len = |v: &Var| self.nodes[v.0].value.len();
        let val = |v: &Var| -> &[f64] { &self.nodes[v.0].value };
        let y: &[f64] = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                if want(a) {
                    add_into(&mut grads[a.0], len(a), |d| matmul_bt_acc(g, val(b), d, *m, *k, *n));
                }
                if want(b) {
                    add_into(&mut grads[b.0], len(b), |d| matmul_at_acc(val(a), g, d, *m, *k, *n));
                }
            }
            Op::Add(a, b) => {
                if want(a) {
                    add_into(&mut grads[a.0], len(a), |d| reduce_into(g, d));
                }
                if want(b) {
                    add_into(&mut grads[b.0], len(b), |d| reduce_into(g, d));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let nb = bv.len();
                if want(a) {
                    add_into(&mut grads[a.0], len(a), |d| {
                        for (idx, dd) in d.iter_mut().enumerate() {
                            *dd += g[idx] * bv[idx % nb];
                        }
                    });
                }
                if want(b) {
                    add_into(&mut grads[b.0], nb, |d| {
                        for (idx, gv) in g.iter().enumerate() {
                            d[idx % nb] += gv * av[idx];
                        }
                    });
                }
            }
            Op::Affine { x, scale } => {
                if want(x) {
                    add_into(&mut grads[x.0], len(x), |d| {
                        d.iter_mut().zip(g).for_each(|(dd, gv)| *dd += scale * gv)
                    });
                }
            }
            Op::Tanh(x) | Op::Sigmoid(x) | Op::Relu(x) | Op::Exp(x) | Op::Log(x) | Op::Softplus(x) => {
                if want(x) {
                    let xv = val(x);
                    let op = &node.op;
                    add_into(&mut grads[x.0], len(x), |d| {
                        for j in 0..d.len() {
                            let local = match op {
                                Op::Tanh(_) => 1.0 - y[j] * y[j],
                                Op::Sigmoid(_) => y[j] * (1.0 - y[j]),
                                Op::Relu(_) => {
                                    if xv[j] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Op::Exp(_) => y[j],
                                Op::Log(_) => 1.0 / xv[j],
                                _ => sigmoid(xv[j]),
                            };
                            d[j] += g[j] * local;
                        }
                    });
                }
            }
            Op::Sum(x) => {
                if want(x) {
                    add_into(&mut grads[x.0], len(x), |d| d.iter_mut().for_each(|dd| *dd += g[0]));
                }
            }
            Op::Norm(x) => {
                if want(x) && y[0] > 0.0 {
                    let xv = val(x);
                    add_into(&mut grads[x.0], len(x), |d| {
                        d.iter_mut().zip(xv).for_each(|(dd, xx)| *dd += g[0] * xx / y[0])
                    });
                }
            }
            Op::Softmax(x) => {
                if want(x) {
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    add_into(&mut grads[x.0], len(x), |d| {
                        for j in 0..d.len() {
                            d[j] += y[j] * (g[j] - dot);
                        }
                    });
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let l = len(p);
                    if want(p) {
                        add_into(&mut grads[p.0], l, |d| {
                            d.iter_mut().zip(&g[off..off + l]).for_each(|(dd, gv)| *dd += gv)
                        });
                    }
                    off += l;
                }
            }
            Op::Slice { x, start } => {
                if want(x) {
                    add_into(&mut grads[x.0], len(x), |d| {
                        d[*start..*start + g.len()].iter_mut().zip(g).for_each(|(dd, gv)| *dd += gv)
                    });
                }
            }
            Op::PadSlice { x, start } => {
                if want(x) {
                    let l = len(x);
                    add_into(&mut grads[x.0], l, |d| {
                        d.iter_mut().zip(&g[*start..*start + l]).for_each(|(dd, gv)| *dd += gv)
                    });
                }
            }
            Op::Reshape(x) | Op::BroadcastTo(x) => {
                if want(x) {
                    add_into(&mut grads[x.0], len(x), |d| reduce_into(g, d));
                }
            }
            Op::ReduceTo(x) => {
                if want(x) {
                    let n = g.len();
                    add_into(&mut grads[x.0], len(x), |d| {
                        d.iter_mut().enumerate().for_each(|(j, dd)| *dd += g[j % n])
                    });
                }
            }
            Op::Transpose { x, rows, cols } => {
                if want(x) {
                    add_into(&mut grads[x.0], len(x), |d| {
                        for r in 0..*rows {
                            for c in 0..*cols {
                                d[r * cols + c] += g[c * rows + r];
                            }
                        }
                    });
                }
            }
            Op::ColMax { x, argmax } | Op::ColPick { x, argmax } => {
                if want(x) {
                    let cols = argmax.len();
                    add_into(&mut grads[x.0], len(x), |d| {
                        for (c, &r) in argmax.iter().enumerate() {
                            d[r * cols + c] += g[c];
                        }
                    });
                }
            }
            Op::ColPlace { x, argmax } => {
                if want(x) {
                    let cols = argmax.len();
                    add_into(&mut grads[x.0], len(x), |d| {
                        for (c, &r) in argmax.iter().enumerate() {
                            d[c] += g[r * cols + c];
                        }
                    });
                }
            }
            Op::Unfold { x, width } => {
                if want(x) {
                    let wd = node.shape[1];
                    let d_cols = wd / width;
                    add_into(&mut grads[x.0], len(x), |d| {
                        for w in 0..node.shape[0] {
                            for (dd, gv) in d[w * d_cols..(w + width) * d_cols].iter_mut().zip(&g[w * wd..(w + 1) * wd]) {
                                *dd += gv;
                            }
                        }
                    });
                }
            }
            Op::Fold { x, width } => {
                if want(x) {
                    let xs = &self.nodes[x.0].shape;
                    let (windows, wd) = (xs[0], xs[1]);
                    let d_cols = wd / width;
                    add_into(&mut grads[x.0], len(x), |d| {
                        for w in 0..windows {
                            for (dd, gv) in d[w * wd..(w + 1) * wd].iter_mut().zip(&g[w * d_cols..(w + width) * d_cols]) {
                                *dd += gv;
                            }
                        }
                    });
                }
            }
            Op::Gather { table, ids, frozen_row } => {
                if want(table) {
                    let cols = node.shape[1];
                    add_into(&mut grads[table.0], len(table), |d| {
                        for (r, &id) in ids.iter().enumerate() {
                            if Some(id) == *frozen_row {
                                continue;
                            }
                            for (dd, gv) in d[id * cols..(id + 1) * cols].iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                                *dd += gv;
                            }
                        }
                    });
                }
            }
            Op::ScatterAdd { x, index } => {
                if want(x) {
                    add_into(&mut grads[x.0], len(x), |d| {
                        for (dd, &j) in d.iter_mut().zip(index) {
                            *dd += g[j];
                        }
                    });
                }
            }
            Op::PairwiseAdd { a, b } => {
                let h = node.shape[1];
                let m = self.nodes[a.0].shape[0];
                let n = self.nodes[b.0].shape[0];
                if want(a) {
                    add_into(&mut grads[a.0], len(a), |d| {
                        for k in 0..m {
                            for j in 0..n {
                                let row = &g[(k * n + j) * h..(k * n + j + 1) * h];
                                d[k * h..(k + 1) * h].iter_mut().zip(row).for_each(|(dd, gv)| *dd += gv);
                            }
                        }
                    });
                }
                if want(b) {
                    add_into(&mut grads[b.0], len(b), |d| {
                        for k in 0..m {
                            for j in 0..n {
                                let row = &g[(k * n + j) * h..(k * n + j + 1) * h];
                                d[j * h..(j + 1) * h].iter_mut().zip(row).for_each(|(dd, gv)| *dd += gv);
                            }
                        }
                    });
                }
            }
        }
    }

    /// Gradient of the scalar `output` with respect to `wrt`, built as graph
    /// nodes so that it can itself be differentiated.
    pub fn grad_of(&mut self, output: Var, wrt: Var) -> Result<Var> {
        if self.value(output).len() != 1 {
            return Err(NumericsError::Contract("grad_of requires a scalar output".into()));
        }
        if wrt.0 > output.0 {
            return Err(NumericsError::Contract("output is not reachable from wrt".into()));
        }
        let span = output.0 - wrt.0 + 1;
        let mut depends = vec![false; span];
        depends[0] = true;
        for i in wrt.0 + 1..=output.0 {
            depends[i - wrt.0] = self.nodes[i]
                .op
                .inputs()
                .iter()
                .any(|inp| inp.0 >= wrt.0 && depends[inp.0 - wrt.0]);
        }
        if !depends[span - 1] {
            return Err(NumericsError::Contract("output is not reachable from wrt".into()));
        }
        let mut grads: Vec<Option<Var>> = vec![None; span];
        grads[span - 1] = Some(self.scalar(1.0));
        for i in (wrt.0 + 1..=output.0).rev() {
            if !depends[i - wrt.0] {
                continue;
            }
            let Some(gi) = grads[i - wrt.0] else { continue };
            let op = self.nodes[i].op.clone();
            for (inp, gin) in self.vjp_graph(Var(i), &op, gi)? {
                if inp.0 < wrt.0 || !depends[inp.0 - wrt.0] {
                    continue;
                }
                let slot = &mut grads[inp.0 - wrt.0];
                *slot = Some(match *slot {
                    Some(prev) => self.add(prev, gin)?,
                    None => gin,
                });
            }
        }
        grads[0].ok_or_else(|| NumericsError::Contract("output is not reachable from wrt".into()))
    }

    /// L2 norm of `∂output/∂wrt`, differentiable with respect to everything
    /// else in the graph.
    pub fn grad_norm_of(&mut self, output: Var, wrt: Var) -> Result<Var> {
        let g = self.grad_of(output, wrt)?;
        Ok(self.norm(g))
    }

    /// Vector-Jacobian products of node `y` expressed with graph operations.
    fn vjp_graph(&mut self, y: Var, op: &Op, g: Var) -> Result<Vec<(Var, Var)>> {
        let shape_of = |s: &Self, v: Var| s.shape(v).to_vec();
        Ok(match op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, m, k, n } => {
                let (sa, sb) = (shape_of(self, *a), shape_of(self, *b));
                let a2 = self.reshape(*a, vec![*m, *k])?;
                let b2 = self.reshape(*b, vec![*k, *n])?;
                let g2 = self.reshape(g, vec![*m, *n])?;
                let bt = self.transpose(b2)?;
                let da = self.matmul(g2, bt)?;
                let da = self.reshape(da, sa)?;
                let at = self.transpose(a2)?;
                let db = self.matmul(at, g2)?;
                let db = self.reshape(db, sb)?;
                vec![(*a, da), (*b, db)]
            }
            Op::Add(a, b) => {
                let sb = shape_of(self, *b);
                let db = if sb == self.shape(*a) { g } else { self.reduce_to(g, sb) };
                vec![(*a, g), (*b, db)]
            }
            Op::Mul(a, b) => {
                let sb = shape_of(self, *b);
                let da = self.mul(g, *b)?;
                let ga = self.mul(g, *a)?;
                let db = if sb == self.shape(*a) { ga } else { self.reduce_to(ga, sb) };
                vec![(*a, da), (*b, db)]
            }
            Op::Affine { x, scale } => vec![(*x, self.affine(g, *scale, 0.0))],
            Op::Tanh(x) => {
                let yy = self.mul(y, y)?;
                let local = self.one_minus(yy);
                vec![(*x, self.mul(g, local)?)]
            }
            Op::Sigmoid(x) => {
                let om = self.one_minus(y);
                let local = self.mul(y, om)?;
                vec![(*x, self.mul(g, local)?)]
            }
            Op::Relu(x) => {
                let mask: Vec<f64> = self.value(*x).iter().map(|v| if *v > 0.0 { 1.0 } else { 0.0 }).collect();
                let m = self.constant(shape_of(self, *x), mask)?;
                vec![(*x, self.mul(g, m)?)]
            }
            Op::Exp(x) => vec![(*x, self.mul(g, y)?)],
            Op::Sum(x) => {
                let s = shape_of(self, *x);
                vec![(*x, self.broadcast_to(g, s))]
            }
            Op::Concat(parts) => {
                let mut out = Vec::with_capacity(parts.len());
                let mut off = 0;
                for p in parts {
                    let s = shape_of(self, *p);
                    let l = numel(&s);
                    let gp = self.slice_flat(g, off, s)?;
                    out.push((*p, gp));
                    off += l;
                }
                out
            }
            Op::Slice { x, start } => {
                let s = shape_of(self, *x);
                vec![(*x, self.pad_slice(g, *start, s))]
            }
            Op::PadSlice { x, start } => {
                let s = shape_of(self, *x);
                vec![(*x, self.slice_flat(g, *start, s)?)]
            }
            Op::Reshape(x) => {
                let s = shape_of(self, *x);
                vec![(*x, self.reshape(g, s)?)]
            }
            Op::Transpose { x, .. } => vec![(*x, self.transpose(g)?)],
            Op::ColMax { x, argmax } | Op::ColPick { x, argmax } => {
                let rows = self.shape(*x)[0];
                vec![(*x, self.col_place(g, argmax.clone(), rows))]
            }
            Op::ColPlace { x, argmax } => vec![(*x, self.col_pick(g, argmax.clone()))],
            Op::Unfold { x, width } => vec![(*x, self.fold(g, *width))],
            Op::Fold { x, width } => vec![(*x, self.unfold(g, *width)?)],
            Op::ReduceTo(x) => {
                let s = shape_of(self, *x);
                vec![(*x, self.broadcast_to(g, s))]
            }
            Op::BroadcastTo(x) => {
                let s = shape_of(self, *x);
                vec![(*x, self.reduce_to(g, s))]
            }
            other => return Err(NumericsError::Unsupported(other.name())),
        })
    }
}
