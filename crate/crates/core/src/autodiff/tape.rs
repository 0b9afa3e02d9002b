use std::cell::RefCell;
use std::rc::Rc;

use super::linalg::{self, Jitter};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Square(usize),
    Sqrt(usize),
    Relu(usize),
    LogNdtr(usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize),
    Broadcast(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Concat(Vec<usize>, Axis),
    Slice { src: usize, row0: usize, col0: usize },
    SelectRows { src: usize, index: Vec<usize> },
    SqDist(usize, usize),
    Diag(usize),
    LowerSoftplusDiag(usize),
    Cholesky(usize),
    TriSolve { l: usize, b: usize, transpose: bool },
    LogDetChol(usize),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) | SqDist(a, b) => {
                vec![*a, *b]
            }
            TriSolve { l, b, .. } => vec![*l, *b],
            Neg(a) | Scale(a, _) | Offset(a) | Exp(a) | Log(a) | Tanh(a) | Sigmoid(a)
            | Softplus(a) | Square(a) | Sqrt(a) | Relu(a) | LogNdtr(a) | Sum(a) | Mean(a)
            | SumAxis(a) | Broadcast(a) | Transpose(a) | Diag(a) | LowerSoftplusDiag(a)
            | Cholesky(a) | LogDetChol(a) => vec![*a],
            Slice { src, .. } | SelectRows { src, .. } => vec![*src],
            Concat(parts, _) => parts.clone(),
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Records operations in creation order, which is a topological order of
/// the computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    jitter: Jitter,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.dims())
    }
}

/// Gradients from one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    dims: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not reach the root.
    pub fn get(&self, v: Var<'_>) -> Tensor {
        self.grads[v.id].clone().unwrap_or_else(|| {
            let (r, c) = self.dims[v.id];
            Tensor::zeros(r, c)
        })
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn with_jitter(jitter: Jitter) -> Self {
        Tape {
            nodes: RefCell::default(),
            jitter,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// A constant: gradients are not tracked through it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push_unchecked(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var { tape: self, id }
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op) -> Result<Var<'_>> {
        let parents = op.parents();
        let needs_grad = {
            let nodes = self.nodes.borrow();
            if cfg!(debug_assertions)
                && !value.all_finite()
                && parents.iter().all(|&p| nodes[p].value.all_finite())
            {
                return Err(Error::domain(name, "non-finite output from finite inputs"));
            }
            parents.iter().any(|&p| nodes[p].needs_grad)
        };
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let dims: Vec<_> = nodes.iter().map(|n| n.value.dims()).collect();
        if dims[root.id] != (1, 1) {
            return Err(Error::Contract(format!(
                "backward: root must be scalar, got {:?}",
                dims[root.id]
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
        grads[root.id] = Some(Tensor::scalar(1.0));
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                grads[id] = Some(g);
                continue;
            }
            let contributions = backward_rule(&nodes, id, &g)?;
            for (parent, pg) in contributions {
                if !nodes[parent].needs_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[id] = Some(g);
        }
        grads.resize(nodes.len(), None);
        Ok(Gradients { grads, dims })
    }
}

fn broadcast_dims(
    op: &'static str,
    a: (usize, usize),
    b: (usize, usize),
) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::Shape { op, lhs: a, rhs: b }),
    }
}

#[inline]
fn bget(t: &Tensor, i: usize, j: usize) -> f64 {
    let (r, c) = t.dims();
    t.get(if r == 1 { 0 } else { i }, if c == 1 { 0 } else { j })
}

fn broadcast_zip(a: &Tensor, b: &Tensor, out: (usize, usize), f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.dims() == out && b.dims() == out {
        return a.zip_map(b, f);
    }
    Tensor::from_fn(out.0, out.1, |i, j| f(bget(a, i, j), bget(b, i, j)))
}

/// Sum `g` down to `target` dims, undoing a broadcast.
fn reduce_to(g: Tensor, target: (usize, usize)) -> Tensor {
    if g.dims() == target {
        return g;
    }
    let (r, c) = g.dims();
    let mut out = Tensor::zeros(target.0, target.1);
    for i in 0..r {
        for j in 0..c {
            let ti = if target.0 == 1 { 0 } else { i };
            let tj = if target.1 == 1 { 0 } else { j };
            let v = out.get(ti, tj) + g.get(i, j);
            out.set(ti, tj, v);
        }
    }
    out
}

fn backward_rule(nodes: &[Node], id: usize, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let out = &nodes[id].value;
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let unary = |a: usize, f: &dyn Fn(f64, f64, f64) -> f64| -> Vec<(usize, Tensor)> {
        // f(grad, input, output)
        let x = val(a);
        let data = g
            .data()
            .iter()
            .zip(x.data())
            .zip(out.data())
            .map(|((&g, &x), &y)| f(g, x, y))
            .collect();
        vec![(a, Tensor::new(x.rows(), x.cols(), data).expect("same shape"))]
    };
    let od = out.dims();
    Ok(match &nodes[id].op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![
            (*a, reduce_to(g.clone(), val(*a).dims())),
            (*b, reduce_to(g.clone(), val(*b).dims())),
        ],
        Op::Sub(a, b) => vec![
            (*a, reduce_to(g.clone(), val(*a).dims())),
            (*b, reduce_to(g.scale(-1.0), val(*b).dims())),
        ],
        Op::Mul(a, b) => {
            let (x, y) = (val(*a), val(*b));
            let ga = broadcast_zip(g, y, od, |g, y| g * y);
            let gb = broadcast_zip(g, x, od, |g, x| g * x);
            vec![(*a, reduce_to(ga, x.dims())), (*b, reduce_to(gb, y.dims()))]
        }
        Op::Div(a, b) => {
            let (x, y) = (val(*a), val(*b));
            let ga = broadcast_zip(g, y, od, |g, y| g / y);
            let gy = broadcast_zip(g, y, od, |g, y| g / y);
            let gb = Tensor::from_fn(od.0, od.1, |i, j| -gy.get(i, j) * out.get(i, j));
            vec![(*a, reduce_to(ga, x.dims())), (*b, reduce_to(gb, y.dims()))]
        }
        Op::Neg(a) => vec![(*a, g.scale(-1.0))],
        Op::Scale(a, s) => vec![(*a, g.scale(*s))],
        Op::Offset(a) => vec![(*a, g.clone())],
        Op::Exp(a) => unary(*a, &|g, _, y| g * y),
        Op::Log(a) => unary(*a, &|g, x, _| g / x),
        Op::Tanh(a) => unary(*a, &|g, _, y| g * (1.0 - y * y)),
        Op::Sigmoid(a) => unary(*a, &|g, _, y| g * y * (1.0 - y)),
        Op::Softplus(a) => unary(*a, &|g, x, _| g * stats::sigmoid(x)),
        Op::Square(a) => unary(*a, &|g, x, _| 2.0 * g * x),
        Op::Sqrt(a) => unary(*a, &|g, _, y| if y > 0.0 { g / (2.0 * y) } else { 0.0 }),
        Op::Relu(a) => unary(*a, &|g, x, _| if x > 0.0 { g } else { 0.0 }),
        Op::LogNdtr(a) => unary(*a, &|g, x, y| {
            g * (stats::log_normal_pdf(x) - y).exp()
        }),
        Op::Sum(a) => {
            let (r, c) = val(*a).dims();
            vec![(*a, Tensor::full(r, c, g.item()))]
        }
        Op::Mean(a) => {
            let (r, c) = val(*a).dims();
            vec![(*a, Tensor::full(r, c, g.item() / (r * c) as f64))]
        }
        Op::SumAxis(a) => {
            let (r, c) = val(*a).dims();
            vec![(*a, Tensor::from_fn(r, c, |i, j| bget(g, i, j)))]
        }
        Op::Broadcast(a) => vec![(*a, reduce_to(g.clone(), val(*a).dims()))],
        Op::MatMul(a, b) => {
            let (x, y) = (val(*a), val(*b));
            vec![
                (*a, g.matmul(&y.transpose())?),
                (*b, x.transpose().matmul(g)?),
            ]
        }
        Op::Transpose(a) => vec![(*a, g.transpose())],
        Op::Concat(parts, axis) => {
            let mut offset = 0;
            let mut res = Vec::with_capacity(parts.len());
            for &p in parts {
                let (r, c) = val(p).dims();
                let piece = match axis {
                    Axis::Rows => Tensor::from_fn(r, c, |i, j| g.get(offset + i, j)),
                    Axis::Cols => Tensor::from_fn(r, c, |i, j| g.get(i, offset + j)),
                };
                offset += if *axis == Axis::Rows { r } else { c };
                res.push((p, piece));
            }
            res
        }
        Op::Slice { src, row0, col0 } => {
            let (r, c) = val(*src).dims();
            let mut gs = Tensor::zeros(r, c);
            for i in 0..od.0 {
                for j in 0..od.1 {
                    gs.set(row0 + i, col0 + j, g.get(i, j));
                }
            }
            vec![(*src, gs)]
        }
        Op::SelectRows { src, index } => {
            let (r, c) = val(*src).dims();
            let mut gs = Tensor::zeros(r, c);
            for (k, &i) in index.iter().enumerate() {
                for j in 0..c {
                    let v = gs.get(i, j) + g.get(k, j);
                    gs.set(i, j, v);
                }
            }
            vec![(*src, gs)]
        }
        Op::SqDist(a, b) => {
            let (x, y) = (val(*a), val(*b));
            let d = x.cols();
            let mut gx = Tensor::zeros(x.rows(), d);
            let mut gy = Tensor::zeros(y.rows(), d);
            for i in 0..x.rows() {
                for j in 0..y.rows() {
                    let w = 2.0 * g.get(i, j);
                    if w == 0.0 {
                        continue;
                    }
                    for k in 0..d {
                        let diff = w * (x.get(i, k) - y.get(j, k));
                        gx.data_mut()[i * d + k] += diff;
                        gy.data_mut()[j * d + k] -= diff;
                    }
                }
            }
            vec![(*a, gx), (*b, gy)]
        }
        Op::Diag(a) => {
            let (r, c) = val(*a).dims();
            let mut gs = Tensor::zeros(r, c);
            for i in 0..od.0 {
                gs.set(i, i, g.get(i, 0));
            }
            vec![(*a, gs)]
        }
        Op::LowerSoftplusDiag(a) => {
            let x = val(*a);
            let (r, c) = x.dims();
            let gs = Tensor::from_fn(r, c, |i, j| match i.cmp(&j) {
                std::cmp::Ordering::Greater => g.get(i, j),
                std::cmp::Ordering::Equal => g.get(i, j) * stats::sigmoid(x.get(i, i)),
                std::cmp::Ordering::Less => 0.0,
            });
            vec![(*a, gs)]
        }
        Op::Cholesky(a) => vec![(*a, linalg::cholesky_backward(out, g)?)],
        Op::TriSolve { l, b, transpose } => {
            let lv = val(*l);
            let gb = linalg::solve_lower(lv, g, !*transpose)?;
            let mut gl = if *transpose {
                out.matmul(&gb.transpose())?
            } else {
                gb.matmul(&out.transpose())?
            };
            gl = gl.scale(-1.0);
            gl.tril_mut();
            vec![(*l, gl), (*b, gb)]
        }
        Op::LogDetChol(a) => {
            let x = val(*a);
            let n = x.rows();
            let mut gs = Tensor::zeros(n, n);
            for i in 0..n {
                gs.set(i, i, 2.0 * g.item() / x.get(i, i));
            }
            vec![(*a, gs)]
        }
    })
}

macro_rules! elementwise_binary {
    ($name:ident, $op:ident, $f:expr) => {
        pub fn $name(self, other: Var<'t>) -> Result<Var<'t>> {
            let (a, b) = (self.value(), other.value());
            let dims = broadcast_dims(stringify!($name), a.dims(), b.dims())?;
            let v = broadcast_zip(&a, &b, dims, $f);
            self.tape.push(stringify!($name), v, Op::$op(self.id, other.id))
        }
    };
}

macro_rules! elementwise_unary {
    ($name:ident, $op:ident, $f:expr) => {
        pub fn $name(self) -> Result<Var<'t>> {
            let v = self.value().map($f);
            self.tape.push(stringify!($name), v, Op::$op(self.id))
        }
    };
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.dims()
    }

    /// Value of a `1 x 1` node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    elementwise_binary!(add, Add, |a, b| a + b);
    elementwise_binary!(sub, Sub, |a, b| a - b);
    elementwise_binary!(mul, Mul, |a, b| a * b);
    elementwise_binary!(div, Div, |a, b| a / b);

    elementwise_unary!(neg, Neg, |x| -x);
    elementwise_unary!(exp, Exp, f64::exp);
    elementwise_unary!(tanh, Tanh, f64::tanh);
    elementwise_unary!(sigmoid, Sigmoid, stats::sigmoid);
    elementwise_unary!(softplus, Softplus, stats::softplus);
    elementwise_unary!(square, Square, |x| x * x);
    elementwise_unary!(relu, Relu, |x| x.max(0.0));
    elementwise_unary!(log_ndtr, LogNdtr, stats::log_ndtr);

    pub fn log(self) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(bad) = x.data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::domain("log", format!("requires positive input, got {bad}")));
        }
        self.tape.push("log", x.map(f64::ln), Op::Log(self.id))
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(bad) = x.data().iter().find(|&&v| v < 0.0) {
            return Err(Error::domain("sqrt", format!("requires non-negative input, got {bad}")));
        }
        self.tape.push("sqrt", x.map(f64::sqrt), Op::Sqrt(self.id))
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        let v = self.value().scale(s);
        self.tape.push("scale", v, Op::Scale(self.id, s))
    }

    pub fn offset(self, c: f64) -> Result<Var<'t>> {
        let v = self.value().map(|x| x + c);
        self.tape.push("offset", v, Op::Offset(self.id))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let v = Tensor::scalar(self.value().sum());
        self.tape.push("sum", v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.is_empty() {
            return Err(Error::domain("mean", "empty tensor"));
        }
        let v = Tensor::scalar(x.sum() / x.len() as f64);
        self.tape.push("mean", v, Op::Mean(self.id))
    }

    /// Reduce along `axis`: `Rows` collapses rows (`r x c -> 1 x c`),
    /// `Cols` collapses columns (`r x c -> r x 1`).
    pub fn sum_axis(self, axis: Axis) -> Result<Var<'t>> {
        let x = self.value();
        let (r, c) = x.dims();
        let v = match axis {
            Axis::Rows => Tensor::from_fn(1, c, |_, j| (0..r).map(|i| x.get(i, j)).sum()),
            Axis::Cols => Tensor::from_fn(r, 1, |i, _| x.row_slice(i).iter().sum()),
        };
        self.tape.push("sum_axis", v, Op::SumAxis(self.id))
    }

    pub fn broadcast(self, rows: usize, cols: usize) -> Result<Var<'t>> {
        let x = self.value();
        let dims = broadcast_dims("broadcast", x.dims(), (rows, cols))?;
        if dims != (rows, cols) {
            return Err(Error::Shape {
                op: "broadcast",
                lhs: x.dims(),
                rhs: (rows, cols),
            });
        }
        let v = Tensor::from_fn(rows, cols, |i, j| bget(&x, i, j));
        self.tape.push("broadcast", v, Op::Broadcast(self.id))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().matmul(&other.value())?;
        self.tape.push("matmul", v, Op::MatMul(self.id, other.id))
    }

    pub fn t(self) -> Result<Var<'t>> {
        let v = self.value().transpose();
        self.tape.push("transpose", v, Op::Transpose(self.id))
    }

    pub fn concat(parts: &[Var<'t>], axis: Axis) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat: no inputs".into()))?;
        let tape = first.tape;
        let values: Vec<_> = parts.iter().map(Var::value).collect();
        let (r0, c0) = values[0].dims();
        let mut data = Vec::new();
        let dims = match axis {
            Axis::Rows => {
                let mut rows = 0;
                for v in &values {
                    if v.cols() != c0 {
                        return Err(Error::Shape {
                            op: "concat",
                            lhs: (r0, c0),
                            rhs: v.dims(),
                        });
                    }
                    rows += v.rows();
                    data.extend_from_slice(v.data());
                }
                (rows, c0)
            }
            Axis::Cols => {
                for v in &values {
                    if v.rows() != r0 {
                        return Err(Error::Shape {
                            op: "concat",
                            lhs: (r0, c0),
                            rhs: v.dims(),
                        });
                    }
                }
                let cols = values.iter().map(|v| v.cols()).sum();
                for i in 0..r0 {
                    for v in &values {
                        data.extend_from_slice(v.row_slice(i));
                    }
                }
                (r0, cols)
            }
        };
        let v = Tensor::new(dims.0, dims.1, data)?;
        tape.push(
            "concat",
            v,
            Op::Concat(parts.iter().map(|p| p.id).collect(), axis),
        )
    }

    pub fn slice(
        self,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let (r, c) = x.dims();
        if rows.end > r || cols.end > c || rows.start > rows.end || cols.start > cols.end {
            return Err(Error::Shape {
                op: "slice",
                lhs: (r, c),
                rhs: (rows.end, cols.end),
            });
        }
        let v = Tensor::from_fn(rows.len(), cols.len(), |i, j| {
            x.get(rows.start + i, cols.start + j)
        });
        self.tape.push(
            "slice",
            v,
            Op::Slice {
                src: self.id,
                row0: rows.start,
                col0: cols.start,
            },
        )
    }

    pub fn select_rows(self, index: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (r, c) = x.dims();
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::Shape {
                op: "select_rows",
                lhs: (r, c),
                rhs: (bad + 1, c),
            });
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(x.row_slice(i));
        }
        let v = Tensor::new(index.len(), c, data)?;
        self.tape.push(
            "select_rows",
            v,
            Op::SelectRows {
                src: self.id,
                index: index.to_vec(),
            },
        )
    }

    /// Pairwise squared Euclidean distances between the rows of `self` and `other`.
    pub fn sq_dist(self, other: Var<'t>) -> Result<Var<'t>> {
        let (x, y) = (self.value(), other.value());
        if x.cols() != y.cols() {
            return Err(Error::Shape {
                op: "sq_dist",
                lhs: x.dims(),
                rhs: y.dims(),
            });
        }
        let v = Tensor::from_fn(x.rows(), y.rows(), |i, j| {
            x.row_slice(i)
                .iter()
                .zip(y.row_slice(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        });
        self.tape.push("sq_dist", v, Op::SqDist(self.id, other.id))
    }

    /// Diagonal of a square matrix as a column.
    pub fn diag(self) -> Result<Var<'t>> {
        let x = self.value();
        let (r, c) = x.dims();
        if r != c {
            return Err(Error::Shape {
                op: "diag",
                lhs: (r, c),
                rhs: (c, r),
            });
        }
        self.tape.push("diag", x.diag(), Op::Diag(self.id))
    }

    /// Lower-triangular factor from an unconstrained square matrix: strict
    /// lower part passes through, the diagonal goes through softplus.
    pub fn lower_softplus_diag(self) -> Result<Var<'t>> {
        let x = self.value();
        let (r, c) = x.dims();
        if r != c {
            return Err(Error::Shape {
                op: "lower_softplus_diag",
                lhs: (r, c),
                rhs: (c, r),
            });
        }
        let v = Tensor::from_fn(r, c, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => x.get(i, j),
            std::cmp::Ordering::Equal => stats::softplus(x.get(i, i)),
            std::cmp::Ordering::Less => 0.0,
        });
        self.tape
            .push("lower_softplus_diag", v, Op::LowerSoftplusDiag(self.id))
    }

    /// Cholesky factor of a symmetric matrix using the tape's jitter schedule.
    pub fn cholesky(self) -> Result<Var<'t>> {
        let (l, _) = linalg::cholesky(&self.value(), self.tape.jitter)?;
        self.tape.push("cholesky", l, Op::Cholesky(self.id))
    }

    /// Solve `L x = b` with `self` as lower-triangular `L`; `Lᵀ x = b` when `transpose`.
    pub fn tri_solve(self, b: Var<'t>, transpose: bool) -> Result<Var<'t>> {
        let v = linalg::solve_lower(&self.value(), &b.value(), transpose)?;
        self.tape.push(
            "tri_solve",
            v,
            Op::TriSolve {
                l: self.id,
                b: b.id,
                transpose,
            },
        )
    }

    /// `log|L Lᵀ| = 2 Σ log L_ii`.
    pub fn logdet_from_chol(self) -> Result<Var<'t>> {
        let l = self.value();
        let (r, c) = l.dims();
        if r != c {
            return Err(Error::Shape {
                op: "logdet_from_chol",
                lhs: (r, c),
                rhs: (c, r),
            });
        }
        let mut acc = 0.0;
        for i in 0..r {
            let d = l.get(i, i);
            if !(d > 0.0) {
                return Err(Error::domain(
                    "logdet_from_chol",
                    format!("non-positive diagonal {d} at {i}"),
                ));
            }
            acc += d.ln();
        }
        self.tape
            .push("logdet_from_chol", Tensor::scalar(2.0 * acc), Op::LogDetChol(self.id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_values() {
        let tape = Tape::new();
        let z = tape.scalar(0.0);
        assert_eq!(z.tanh().unwrap().item(), 0.0);
        assert!((z.softplus().unwrap().item() - 2f64.ln()).abs() < 1e-15);
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::ones(3, 4));
        let p = a.matmul(b).unwrap().value();
        assert_eq!(p.dims(), (2, 4));
        assert!(p.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.square().unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).item(), 6.0);
    }

    #[test]
    fn disconnected_leaf_gets_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let unused = tape.leaf(Tensor::ones(2, 2));
        let y = x.exp().unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(unused), Tensor::zeros(2, 2));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(2, 1));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_sum_gradient_is_ones_times_bt() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_fn(2, 3, |i, j| (i + 2 * j) as f64));
        let b = tape.leaf(Tensor::from_fn(3, 2, |i, j| 0.5 * i as f64 - j as f64));
        let root = a.matmul(b).unwrap().sum().unwrap();
        let g = tape.backward(root).unwrap();
        let want = Tensor::ones(2, 2).matmul(&b.value().transpose()).unwrap();
        assert_eq!(g.get(a), want);
    }

    #[test]
    fn shape_error_names_op() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("(2, 3)"), "{err}");
        let c = tape.constant(Tensor::zeros(3, 2));
        assert!(matches!(a.add(c), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn log_domain() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::column(&[1.0, 0.0]));
        assert!(matches!(x.log(), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn broadcast_reduces_gradient() {
        let tape = Tape::new();
        let m = tape.leaf(Tensor::ones(3, 2));
        let row = tape.leaf(Tensor::row(&[2.0, 3.0]));
        let s = tape.leaf(Tensor::scalar(0.5));
        let y = m.mul(row).unwrap().mul(s).unwrap().sum().unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(row).data(), &[1.5, 1.5]);
        assert_eq!(g.get(s).item(), 3.0 * 5.0);
    }

    #[test]
    fn logdet_examples() {
        let tape = Tape::new();
        let l = tape.constant(Tensor::from_rows(&[vec![2f64.sqrt(), 0.0], vec![0.0, 2f64.sqrt()]]).unwrap());
        assert!((l.logdet_from_chol().unwrap().item() - 4f64.ln()).abs() < 1e-12);
        let l1 = tape.constant(Tensor::scalar(3.0));
        assert!((l1.logdet_from_chol().unwrap().item() - 9f64.ln()).abs() < 1e-12);
        let id = tape.constant(Tensor::eye(3));
        assert_eq!(id.logdet_from_chol().unwrap().item(), 0.0);
        let bad = tape.constant(Tensor::scalar(-1.0));
        assert!(matches!(bad.logdet_from_chol(), Err(Error::Domain { .. })));
    }
}
