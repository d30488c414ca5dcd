//! Eager reverse-mode differentiation over dense matrices.
//!
//! Every operation computes its value immediately and appends a node to the
//! [`Tape`]. [`Tape::backward`] then walks the nodes in reverse insertion
//! order, which is a reverse topological order because parents always
//! precede their children. Nodes that do not depend on any leaf created
//! with [`Tape::leaf`] carry no adjoint and cost nothing on the way back.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::tensor::{matmul, Tensor};
use super::AdError;

type Result<T> = std::result::Result<T, AdError>;

/// How the right operand of a binary op is expanded to the left's shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    /// n x 1 repeated across columns.
    Col,
    /// 1 x c repeated across rows.
    Row,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Div(usize, usize, Bcast),
    Scale(usize, f64),
    Shift(usize),
    MatMul { a: usize, b: usize, transpose_b: bool },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Relu(usize),
    Tanh(usize),
    Square(usize),
    Sqrt(usize),
    Abs(usize),
    ClampMin(usize, f64),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    Gather(usize, Rc<[usize]>),
    MinAlongAxis(usize, Rc<[usize]>),
    MaxOverRows(usize, Rc<[usize]>),
    NormRows(usize),
    DotRows(usize, usize),
    CrossRows(usize, usize),
    RepeatRows(usize),
    SliceCols(usize, usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of one forward computation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Value<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Value<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Value#{} {:?}", self.id, self.value())
    }
}

/// Adjoints of every leaf reached by a backward pass.
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: &Value<'_>) -> Option<&Tensor> {
        self.adjoints.get(v.id).and_then(|a| a.as_ref())
    }

    /// Adjoint of `v`, or zeros of its shape when `v` did not influence the root.
    pub fn wrt(&self, v: &Value<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| {
            let s = v.shape();
            Tensor::zeros(s[0], s[1])
        })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Value<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Value {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Value<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// An input treated as a constant.
    pub fn constant(&self, value: Tensor) -> Value<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Value<'_> {
        self.constant(Tensor::scalar(v))
    }

    /// Concatenates along columns; all parts need the same row count.
    pub fn concat_cols<'t>(&'t self, parts: &[Value<'t>]) -> Result<Value<'t>> {
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let rows = vals
            .first()
            .map(|v| v.rows())
            .ok_or(AdError::EmptyOperands("concat_cols"))?;
        if let Some(bad) = vals.iter().find(|v| v.rows() != rows) {
            return Err(AdError::ShapeMismatch {
                op: "concat_cols",
                lhs: [rows, 0],
                rhs: bad.shape(),
            });
        }
        let cols: usize = vals.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for v in &vals {
                data.extend_from_slice(v.row(r));
            }
        }
        let rg = parts.iter().any(|p| self.grad_of(p.id));
        Ok(self.push(
            Tensor::from_vec(rows, cols, data)?,
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            rg,
        ))
    }

    /// Stacks along rows; all parts need the same column count.
    pub fn concat_rows<'t>(&'t self, parts: &[Value<'t>]) -> Result<Value<'t>> {
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let cols = vals
            .first()
            .map(|v| v.cols())
            .ok_or(AdError::EmptyOperands("concat_rows"))?;
        if let Some(bad) = vals.iter().find(|v| v.cols() != cols) {
            return Err(AdError::ShapeMismatch {
                op: "concat_rows",
                lhs: [0, cols],
                rhs: bad.shape(),
            });
        }
        let rows: usize = vals.iter().map(|v| v.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for v in &vals {
            data.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|p| self.grad_of(p.id));
        Ok(self.push(
            Tensor::from_vec(rows, cols, data)?,
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
            rg,
        ))
    }

    /// Propagates adjoints from the scalar `root` to every leaf.
    ///
    /// A tape supports a single backward pass; build a new tape per step.
    pub fn backward(&self, root: Value<'_>) -> Result<Gradients> {
        if !std::ptr::eq(root.tape, self) {
            return Err(AdError::ForeignValue);
        }
        if self.consumed.replace(true) {
            return Err(AdError::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.id].value.shape();
        if root_shape != [1, 1] {
            return Err(AdError::NonScalarRoot(root_shape));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=root.id).map(|_| None).collect();
        if nodes[root.id].requires_grad {
            adj[root.id] = Some(Tensor::scalar(1.0));
        }
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            propagate(&nodes, node, g, &mut adj);
        }
        Ok(Gradients { adjoints: adj })
    }
}

fn accumulate(adj: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut adj[id] {
        Some(a) => a.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Sums `g` down to the shape of a broadcast operand.
fn reduce(g: &Tensor, bc: Bcast) -> Tensor {
    match bc {
        Bcast::Same => g.clone(),
        Bcast::Scalar => Tensor::scalar(g.data().iter().sum()),
        Bcast::Col => Tensor::column((0..g.rows()).map(|r| g.row(r).iter().sum()).collect()),
        Bcast::Row => {
            let mut out = vec![0.0; g.cols()];
            for r in 0..g.rows() {
                for (o, x) in out.iter_mut().zip(g.row(r)) {
                    *o += x;
                }
            }
            Tensor::row_vector(out)
        }
    }
}

#[inline]
fn bidx(bc: Bcast, cols: usize, r: usize, c: usize) -> usize {
    match bc {
        Bcast::Same => r * cols + c,
        Bcast::Scalar => 0,
        Bcast::Col => r,
        Bcast::Row => c,
    }
}

fn zip_bcast(a: &Tensor, b: &Tensor, bc: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let cols = a.cols();
    let bd = b.data();
    let mut out = Vec::with_capacity(a.len());
    for r in 0..a.rows() {
        for (c, &x) in a.row(r).iter().enumerate() {
            out.push(f(x, bd[bidx(bc, cols, r, c)]));
        }
    }
    Tensor::from_vec(a.rows(), cols, out).expect("shape preserved")
}

fn zip3(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&g, &x)| f(g, x)).collect();
    Tensor::from_vec(g.rows(), g.cols(), data).expect("same shape")
}

fn propagate(nodes: &[Node], node: &Node, g: Tensor, adj: &mut [Option<Tensor>]) {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    match &node.op {
        Op::Leaf => {}
        &Op::Add(a, b, bc) => {
            if nodes[b].requires_grad {
                accumulate(adj, nodes, b, reduce(&g, bc));
            }
            accumulate(adj, nodes, a, g);
        }
        &Op::Sub(a, b, bc) => {
            if nodes[b].requires_grad {
                let mut gb = reduce(&g, bc);
                gb.scale_in_place(-1.0);
                accumulate(adj, nodes, b, gb);
            }
            accumulate(adj, nodes, a, g);
        }
        &Op::Mul(a, b, bc) => {
            if nodes[b].requires_grad {
                let gb = zip3(&g, val(a), |g, x| g * x);
                accumulate(adj, nodes, b, reduce(&gb, bc));
            }
            if nodes[a].requires_grad {
                accumulate(adj, nodes, a, zip_bcast(&g, val(b), bc, |g, y| g * y));
            }
        }
        &Op::Div(a, b, bc) => {
            if nodes[b].requires_grad {
                // d(x/y)/dy = -x/y^2 = -out/y
                let gy = zip3(&g, &node.value, |g, o| g * o);
                let gb = zip_bcast(&gy, val(b), bc, |t, y| -t / y);
                accumulate(adj, nodes, b, reduce(&gb, bc));
            }
            if nodes[a].requires_grad {
                accumulate(adj, nodes, a, zip_bcast(&g, val(b), bc, |g, y| g / y));
            }
        }
        &Op::Scale(a, s) => accumulate(adj, nodes, a, g.map(|x| x * s)),
        &Op::Shift(a) => accumulate(adj, nodes, a, g),
        &Op::MatMul { a, b, transpose_b } => {
            if nodes[a].requires_grad {
                // C = A B  -> dA = G B^T ;  C = A B^T -> dA = G B
                accumulate(adj, nodes, a, matmul(&g, val(b), false, !transpose_b));
            }
            if nodes[b].requires_grad {
                // C = A B  -> dB = A^T G ;  C = A B^T -> dB = G^T A
                let gb = if transpose_b {
                    matmul(&g, val(a), true, false)
                } else {
                    matmul(val(a), &g, true, false)
                };
                accumulate(adj, nodes, b, gb);
            }
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for &p in parts {
                let w = val(p).cols();
                if nodes[p].requires_grad {
                    let mut data = Vec::with_capacity(g.rows() * w);
                    for r in 0..g.rows() {
                        data.extend_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    accumulate(adj, nodes, p, Tensor::from_vec(g.rows(), w, data).expect("slice"));
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let cols = g.cols();
            let mut offset = 0;
            for &p in parts {
                let h = val(p).rows();
                if nodes[p].requires_grad {
                    let data = g.data()[offset * cols..(offset + h) * cols].to_vec();
                    accumulate(adj, nodes, p, Tensor::from_vec(h, cols, data).expect("slice"));
                }
                offset += h;
            }
        }
        &Op::Relu(a) => accumulate(
            adj,
            nodes,
            a,
            zip3(&g, &node.value, |g, y| if y > 0.0 { g } else { 0.0 }),
        ),
        &Op::Tanh(a) => accumulate(adj, nodes, a, zip3(&g, &node.value, |g, y| g * (1.0 - y * y))),
        &Op::Square(a) => accumulate(adj, nodes, a, zip3(&g, val(a), |g, x| 2.0 * x * g)),
        &Op::Sqrt(a) => accumulate(
            adj,
            nodes,
            a,
            zip3(&g, &node.value, |g, y| if y > 0.0 { g / (2.0 * y) } else { 0.0 }),
        ),
        &Op::Abs(a) => accumulate(adj, nodes, a, zip3(&g, val(a), |g, x| g * sign(x))),
        &Op::ClampMin(a, lo) => accumulate(adj, nodes, a, zip3(&g, val(a), |g, x| if x > lo { g } else { 0.0 })),
        &Op::Sum(a) => {
            let s = val(a).shape();
            accumulate(adj, nodes, a, Tensor::filled(s[0], s[1], g.item()));
        }
        &Op::Mean(a) => {
            let s = val(a).shape();
            let n = (s[0] * s[1]).max(1) as f64;
            accumulate(adj, nodes, a, Tensor::filled(s[0], s[1], g.item() / n));
        }
        &Op::SumRows(a) => {
            let cols = val(a).cols();
            let data = g.data().iter().flat_map(|&x| std::iter::repeat_n(x, cols)).collect();
            accumulate(adj, nodes, a, Tensor::from_vec(g.rows(), cols, data).expect("shape"));
        }
        Op::Gather(a, idx) => {
            let src = val(*a);
            let cols = src.cols();
            let mut out = Tensor::zeros(src.rows(), cols);
            let od = out.data_mut();
            for (r, &i) in idx.iter().enumerate() {
                for c in 0..cols {
                    od[i * cols + c] += g.get(r, c);
                }
            }
            accumulate(adj, nodes, *a, out);
        }
        Op::MinAlongAxis(a, arg) => {
            let src = val(*a);
            let mut out = Tensor::zeros(src.rows(), src.cols());
            for (r, &c) in arg.iter().enumerate() {
                out.set(r, c, g.get(r, 0));
            }
            accumulate(adj, nodes, *a, out);
        }
        Op::MaxOverRows(a, arg) => {
            let src = val(*a);
            let mut out = Tensor::zeros(src.rows(), src.cols());
            for (c, &r) in arg.iter().enumerate() {
                out.set(r, c, g.get(0, c));
            }
            accumulate(adj, nodes, *a, out);
        }
        &Op::NormRows(a) => {
            let x = val(a);
            let cols = x.cols();
            let mut out = Tensor::zeros(x.rows(), cols);
            for r in 0..x.rows() {
                let n = node.value.get(r, 0);
                if n > 0.0 {
                    let k = g.get(r, 0) / n;
                    for c in 0..cols {
                        out.set(r, c, k * x.get(r, c));
                    }
                }
            }
            accumulate(adj, nodes, a, out);
        }
        &Op::DotRows(a, b) => {
            let gc = |other: &Tensor| {
                let cols = other.cols();
                let data = (0..other.rows())
                    .flat_map(|r| {
                        let k = g.get(r, 0);
                        other.row(r).iter().map(move |&y| k * y).collect::<Vec<_>>()
                    })
                    .collect();
                Tensor::from_vec(other.rows(), cols, data).expect("shape")
            };
            if nodes[a].requires_grad {
                accumulate(adj, nodes, a, gc(val(b)));
            }
            if nodes[b].requires_grad {
                accumulate(adj, nodes, b, gc(val(a)));
            }
        }
        &Op::CrossRows(a, b) => {
            // d/da <g, a x b> = b x g ;  d/db <g, a x b> = g x a
            if nodes[a].requires_grad {
                accumulate(adj, nodes, a, cross_rows(val(b), &g));
            }
            if nodes[b].requires_grad {
                accumulate(adj, nodes, b, cross_rows(&g, val(a)));
            }
        }
        &Op::RepeatRows(a) => accumulate(adj, nodes, a, reduce(&g, Bcast::Row)),
        &Op::SliceCols(a, start) => {
            let src = val(a);
            let w = g.cols();
            let mut out = Tensor::zeros(src.rows(), src.cols());
            for r in 0..src.rows() {
                for c in 0..w {
                    out.set(r, start + c, g.get(r, c));
                }
            }
            accumulate(adj, nodes, a, out);
        }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn cross_rows(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Vec::with_capacity(a.len());
    for r in 0..a.rows() {
        let (x, y) = (a.row(r), b.row(r));
        out.push(x[1] * y[2] - x[2] * y[1]);
        out.push(x[2] * y[0] - x[0] * y[2]);
        out.push(x[0] * y[1] - x[1] * y[0]);
    }
    Tensor::from_vec(a.rows(), 3, out).expect("n x 3")
}

impl<'t> Value<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> [usize; 2] {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn rows(&self) -> usize {
        self.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.shape()[1]
    }

    /// Value of a 1x1 node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.grad_of(self.id)
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Value<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn check_tape(&self, other: &Value<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(AdError::ForeignValue)
        }
    }

    fn unary(&self, op: Op, out: Tensor) -> Value<'t> {
        self.tape.push(out, op, self.requires_grad())
    }

    fn broadcast_kind(&self, other: &Value<'t>, op: &'static str) -> Result<Bcast> {
        self.check_tape(other)?;
        let (l, r) = (self.shape(), other.shape());
        if l == r {
            Ok(Bcast::Same)
        } else if r == [1, 1] {
            Ok(Bcast::Scalar)
        } else if r[1] == 1 && r[0] == l[0] {
            Ok(Bcast::Col)
        } else if r[0] == 1 && r[1] == l[1] {
            Ok(Bcast::Row)
        } else {
            Err(AdError::ShapeMismatch { op, lhs: l, rhs: r })
        }
    }

    fn binary(
        &self,
        other: &Value<'t>,
        name: &'static str,
        make: fn(usize, usize, Bcast) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Value<'t>> {
        let bc = self.broadcast_kind(other, name)?;
        let out = zip_bcast(&self.value(), &other.value(), bc, f);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(out, make(self.id, other.id, bc), rg))
    }

    /// Elementwise sum. `other` may be the same shape, 1x1, n x 1 or 1 x c.
    pub fn add(&self, other: &Value<'t>) -> Result<Value<'t>> {
        self.binary(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Value<'t>) -> Result<Value<'t>> {
        self.binary(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Value<'t>) -> Result<Value<'t>> {
        self.binary(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Value<'t>) -> Result<Value<'t>> {
        self.binary(other, "div", Op::Div, |a, b| a / b)
    }

    pub fn scale(&self, s: f64) -> Value<'t> {
        self.unary(Op::Scale(self.id, s), self.value().map(|x| x * s))
    }

    /// Adds a constant to every entry.
    pub fn shift(&self, c: f64) -> Value<'t> {
        self.unary(Op::Shift(self.id), self.value().map(|x| x + c))
    }

    pub fn neg(&self) -> Value<'t> {
        self.scale(-1.0)
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Value<'t>) -> Result<Value<'t>> {
        self.check_tape(other)?;
        let (l, r) = (self.shape(), other.shape());
        if l[1] != r[0] {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                lhs: l,
                rhs: r,
            });
        }
        let out = matmul(&self.value(), &other.value(), false, false);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                transpose_b: false,
            },
            rg,
        ))
    }

    /// `self * other^T`, the natural product for `[out x in]` weight matrices.
    pub fn matmul_t(&self, other: &Value<'t>) -> Result<Value<'t>> {
        self.check_tape(other)?;
        let (l, r) = (self.shape(), other.shape());
        if l[1] != r[1] {
            return Err(AdError::ShapeMismatch {
                op: "matmul_t",
                lhs: l,
                rhs: r,
            });
        }
        let out = matmul(&self.value(), &other.value(), false, true);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                transpose_b: true,
            },
            rg,
        ))
    }

    pub fn relu(&self) -> Value<'t> {
        self.unary(Op::Relu(self.id), self.value().map(|x| x.max(0.0)))
    }

    pub fn tanh(&self) -> Value<'t> {
        self.unary(Op::Tanh(self.id), self.value().map(f64::tanh))
    }

    pub fn square(&self) -> Value<'t> {
        self.unary(Op::Square(self.id), self.value().map(|x| x * x))
    }

    /// Square root; the derivative at 0 is taken as 0.
    pub fn sqrt(&self) -> Value<'t> {
        self.unary(Op::Sqrt(self.id), self.value().map(f64::sqrt))
    }

    pub fn abs(&self) -> Value<'t> {
        self.unary(Op::Abs(self.id), self.value().map(f64::abs))
    }

    /// `max(x, lo)` elementwise; gradient flows only where `x > lo`.
    pub fn clamp_min(&self, lo: f64) -> Value<'t> {
        self.unary(Op::ClampMin(self.id, lo), self.value().map(|x| x.max(lo)))
    }

    pub fn sum(&self) -> Value<'t> {
        let s = self.value().data().iter().sum();
        self.unary(Op::Sum(self.id), Tensor::scalar(s))
    }

    pub fn mean(&self) -> Result<Value<'t>> {
        let v = self.value();
        if v.is_empty() {
            return Err(AdError::EmptyOperands("mean"));
        }
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        Ok(self.unary(Op::Mean(self.id), Tensor::scalar(m)))
    }

    /// Per-row sum, n x c -> n x 1.
    pub fn sum_rows(&self) -> Value<'t> {
        let v = self.value();
        let out = Tensor::column((0..v.rows()).map(|r| v.row(r).iter().sum()).collect());
        self.unary(Op::SumRows(self.id), out)
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather(&self, rows: &[usize]) -> Result<Value<'t>> {
        let v = self.value();
        if let Some(&bad) = rows.iter().find(|&&r| r >= v.rows()) {
            return Err(AdError::IndexOutOfRange {
                index: bad,
                len: v.rows(),
            });
        }
        let mut data = Vec::with_capacity(rows.len() * v.cols());
        for &r in rows {
            data.extend_from_slice(v.row(r));
        }
        let out = Tensor::from_vec(rows.len(), v.cols(), data)?;
        Ok(self.unary(Op::Gather(self.id, rows.into()), out))
    }

    /// Row-wise minimum (n x c -> n x 1) with its column index. Ties go to
    /// the lowest column, which is also the only entry that receives gradient.
    pub fn min_along_axis(&self) -> Result<(Value<'t>, Vec<usize>)> {
        let v = self.value();
        if v.cols() == 0 {
            return Err(AdError::EmptyOperands("min_along_axis"));
        }
        let mut mins = Vec::with_capacity(v.rows());
        let mut arg = Vec::with_capacity(v.rows());
        for r in 0..v.rows() {
            let (mut bi, mut bv) = (0, v.get(r, 0));
            for (c, &x) in v.row(r).iter().enumerate().skip(1) {
                if x < bv {
                    bi = c;
                    bv = x;
                }
            }
            mins.push(bv);
            arg.push(bi);
        }
        let out = self.unary(Op::MinAlongAxis(self.id, arg.clone().into()), Tensor::column(mins));
        Ok((out, arg))
    }

    /// Column-wise maximum over all rows (n x c -> 1 x c) with the winning
    /// row per column. Ties go to the lowest row.
    pub fn max_over_rows(&self) -> Result<(Value<'t>, Vec<usize>)> {
        let v = self.value();
        if v.rows() == 0 {
            return Err(AdError::EmptyOperands("max_over_rows"));
        }
        let mut best = v.row(0).to_vec();
        let mut arg = vec![0; v.cols()];
        for r in 1..v.rows() {
            for (c, &x) in v.row(r).iter().enumerate() {
                if x > best[c] {
                    best[c] = x;
                    arg[c] = r;
                }
            }
        }
        let out = self.unary(Op::MaxOverRows(self.id, arg.clone().into()), Tensor::row_vector(best));
        Ok((out, arg))
    }

    /// Euclidean norm of each row, n x c -> n x 1. The gradient at a zero row is 0.
    pub fn norm_rows(&self) -> Value<'t> {
        let v = self.value();
        let out = Tensor::column(
            (0..v.rows())
                .map(|r| v.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect(),
        );
        self.unary(Op::NormRows(self.id), out)
    }

    /// Row-wise inner product of equal-shape operands, n x c -> n x 1.
    pub fn dot_rows(&self, other: &Value<'t>) -> Result<Value<'t>> {
        self.check_tape(other)?;
        if self.shape() != other.shape() {
            return Err(AdError::ShapeMismatch {
                op: "dot_rows",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let (a, b) = (self.value(), other.value());
        let out = Tensor::column(
            (0..a.rows())
                .map(|r| a.row(r).iter().zip(b.row(r)).map(|(x, y)| x * y).sum())
                .collect(),
        );
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(out, Op::DotRows(self.id, other.id), rg))
    }

    /// Row-wise cross product of two n x 3 operands.
    pub fn cross_rows(&self, other: &Value<'t>) -> Result<Value<'t>> {
        self.check_tape(other)?;
        if self.shape() != other.shape() || self.cols() != 3 {
            return Err(AdError::ShapeMismatch {
                op: "cross_rows",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let out = cross_rows(&self.value(), &other.value());
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(out, Op::CrossRows(self.id, other.id), rg))
    }

    /// Tiles a 1 x c row `n` times.
    pub fn repeat_rows(&self, n: usize) -> Result<Value<'t>> {
        let v = self.value();
        if v.rows() != 1 {
            return Err(AdError::ShapeMismatch {
                op: "repeat_rows",
                lhs: v.shape(),
                rhs: [1, v.cols()],
            });
        }
        let mut data = Vec::with_capacity(n * v.cols());
        for _ in 0..n {
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_vec(n, v.cols(), data)?;
        Ok(self.unary(Op::RepeatRows(self.id), out))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Value<'t>> {
        let v = self.value();
        if start + len > v.cols() {
            return Err(AdError::IndexOutOfRange {
                index: start + len,
                len: v.cols(),
            });
        }
        let mut data = Vec::with_capacity(v.rows() * len);
        for r in 0..v.rows() {
            data.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let out = Tensor::from_vec(v.rows(), len, data)?;
        Ok(self.unary(Op::SliceCols(self.id, start), out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_at_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = x.tanh();
        assert_eq!(y.item(), 0.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(&x).item(), 1.0);
    }

    #[test]
    fn matmul_shape_rule() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(2, 3));
        let b = tape.leaf(Tensor::zeros(3, 1));
        assert_eq!(a.matmul(&b).unwrap().shape(), [2, 1]);
        assert!(matches!(b.matmul(&a), Err(AdError::ShapeMismatch { op: "matmul", .. })));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::column(vec![1.0, 2.0, 3.0]));
        let y = x.square().sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(&x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn broadcast_rules() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let col = tape.leaf(Tensor::column(vec![10.0, 20.0]));
        let row = tape.leaf(Tensor::row_vector(vec![1.0, -1.0]));
        let s = a.add(&col).unwrap().mul(&row).unwrap();
        assert_eq!(s.value().data(), &[11.0, -12.0, 23.0, -24.0]);
        let g = tape.backward(s.sum()).unwrap();
        assert_eq!(g.wrt(&col).data(), &[0.0, 0.0]);
        assert_eq!(g.wrt(&row).data(), &[34.0, 36.0]);
        assert_eq!(g.wrt(&a).data(), &[1.0, -1.0, 1.0, -1.0]);
        let bad = tape.leaf(Tensor::zeros(3, 1));
        assert!(a.add(&bad).is_err());
    }

    #[test]
    fn min_routes_to_lowest_tied_index() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(2, 3, vec![2.0, 1.0, 1.0, 0.5, 3.0, 0.5]).unwrap());
        let (m, arg) = x.min_along_axis().unwrap();
        assert_eq!(arg, vec![1, 0]);
        assert_eq!(m.value().data(), &[1.0, 0.5]);
        let g = tape.backward(m.sum()).unwrap();
        assert_eq!(g.wrt(&x).data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn max_over_rows_routes_to_winner() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(3, 2, vec![1.0, 4.0, 3.0, 4.0, 3.0, -1.0]).unwrap());
        let (m, arg) = x.max_over_rows().unwrap();
        assert_eq!(arg, vec![1, 0]);
        assert_eq!(m.value().data(), &[3.0, 4.0]);
        let g = tape.backward(m.sum()).unwrap();
        assert_eq!(g.wrt(&x).data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn tape_is_single_use() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = x.square();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(AdError::TapeConsumed)));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 1));
        assert!(matches!(tape.backward(x.relu()), Err(AdError::NonScalarRoot([2, 1]))));
    }

    #[test]
    fn constants_get_no_adjoint() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(3.0));
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = x.mul(&c).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(&c).is_none());
        assert_eq!(g.wrt(&x).item(), 3.0);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.mul(&x).unwrap().add(&x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(&x).item(), 7.0);
    }
}
