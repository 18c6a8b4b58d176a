//! Define-by-run reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Node ids grow
//! monotonically, so reverse id order is a valid topological order for the
//! backward sweep. Leaves created with [`Tape::param`] receive gradients;
//! [`Tape::constant`] and [`Var::detach`] produce values that block them.

use std::cell::RefCell;
use std::rc::Rc;

use super::matrix::{gemm_acc, Matrix};
use super::EPS;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Affine(usize, f64),
    Log(usize),
    Exp(usize),
    Sqrt(usize),
    ClampMin(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    SoftmaxRows(usize),
    L2NormalizeRows(usize, Vec<f64>),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    RowMean(usize),
    Transpose(usize),
    Column(usize, usize),
    ConcatCols(Vec<usize>),
    PairSqNorm(usize, Rc<Vec<(usize, usize)>>, f64),
}

struct Node {
    value: Rc<Matrix>,
    op: Op,
    tracked: bool,
}

/// Records a computation graph for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Matrix::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var { tape: self, id }
    }

    fn value_of(&self, id: usize) -> Rc<Matrix> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    fn unary(&self, a: usize, value: Matrix, op: Op) -> Var<'_> {
        let tracked = self.tracked(a);
        self.push(value, op, tracked)
    }

    /// Backpropagates from a scalar `root` and returns the gradient of every node.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.id].value.shape();
        if root_shape != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got {root_shape:?}"
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; root.id + 1];
        grads[root.id] = Some(Matrix::scalar(1.0));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let val = |i: usize| -> &Matrix { &nodes[i].value };
            let mut emit = |target: usize, contribution: Matrix| {
                if !nodes[target].tracked {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            };
            let out = &node.value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if nodes[*a].tracked {
                        let mut ga = Matrix::zeros(val(*a).rows(), val(*a).cols());
                        gemm_acc(&g, &val(*b).transpose(), &mut ga);
                        emit(*a, ga);
                    }
                    if nodes[*b].tracked {
                        let mut gb = Matrix::zeros(val(*b).rows(), val(*b).cols());
                        gemm_acc(&val(*a).transpose(), &g, &mut gb);
                        emit(*b, gb);
                    }
                }
                Op::Add(a, b) => {
                    emit(*a, reduce_to(&g, val(*a).shape()));
                    emit(*b, reduce_to(&g, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    emit(*a, reduce_to(&g, val(*a).shape()));
                    emit(*b, reduce_to(&g.map(|x| -x), val(*b).shape()));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let ga = Matrix::from_fn(g.rows(), g.cols(), |i, j| g[(i, j)] * bget(vb, i, j));
                    let gb = Matrix::from_fn(g.rows(), g.cols(), |i, j| g[(i, j)] * bget(va, i, j));
                    emit(*a, reduce_to(&ga, va.shape()));
                    emit(*b, reduce_to(&gb, vb.shape()));
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let ga = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                        g[(i, j)] / bget(vb, i, j).max(EPS)
                    });
                    let gb = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                        let d = bget(vb, i, j);
                        if d > EPS {
                            -g[(i, j)] * bget(va, i, j) / (d * d)
                        } else {
                            0.0
                        }
                    });
                    emit(*a, reduce_to(&ga, va.shape()));
                    emit(*b, reduce_to(&gb, vb.shape()));
                }
                Op::Affine(a, scale) => emit(*a, g.map(|x| x * scale)),
                Op::Log(a) => {
                    let ga = g
                        .zip_map(val(*a), |gi, x| if x > EPS { gi / x } else { 0.0 })
                        .expect("shape");
                    emit(*a, ga);
                }
                Op::Exp(a) => emit(*a, g.zip_map(out, |gi, y| gi * y).expect("shape")),
                Op::Sqrt(a) => {
                    let ga = g
                        .zip_map(out, |gi, y| if y > 0.0 { 0.5 * gi / y } else { 0.0 })
                        .expect("shape");
                    emit(*a, ga);
                }
                Op::ClampMin(a, t) => {
                    let ga = g
                        .zip_map(val(*a), |gi, x| if x > *t { gi } else { 0.0 })
                        .expect("shape");
                    emit(*a, ga);
                }
                Op::Relu(a) => {
                    let ga = g
                        .zip_map(val(*a), |gi, x| if x > 0.0 { gi } else { 0.0 })
                        .expect("shape");
                    emit(*a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g
                        .zip_map(out, |gi, y| {
                            if y > EPS && y < 1.0 - EPS {
                                gi * y * (1.0 - y)
                            } else {
                                0.0
                            }
                        })
                        .expect("shape");
                    emit(*a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let mut ga = Matrix::zeros(out.rows(), out.cols());
                    for i in 0..out.rows() {
                        let (y, gr) = (out.row(i), g.row(i));
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (o, (yj, gj)) in ga.row_mut(i).iter_mut().zip(y.iter().zip(gr)) {
                            *o = yj * (gj - dot);
                        }
                    }
                    emit(*a, ga);
                }
                Op::L2NormalizeRows(a, norms) => {
                    let mut ga = Matrix::zeros(out.rows(), out.cols());
                    for (i, &n) in norms.iter().enumerate() {
                        if n <= EPS {
                            continue;
                        }
                        let (y, gr) = (out.row(i), g.row(i));
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (o, (yj, gj)) in ga.row_mut(i).iter_mut().zip(y.iter().zip(gr)) {
                            *o = (gj - yj * dot) / n;
                        }
                    }
                    emit(*a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    emit(*a, Matrix::filled(r, c, g[(0, 0)]));
                }
                Op::Mean(a) => {
                    let (r, c) = val(*a).shape();
                    let n = (r * c).max(1) as f64;
                    emit(*a, Matrix::filled(r, c, g[(0, 0)] / n));
                }
                Op::RowSum(a) => {
                    let (r, c) = val(*a).shape();
                    emit(*a, Matrix::from_fn(r, c, |i, _| g[(i, 0)]));
                }
                Op::RowMean(a) => {
                    let (r, c) = val(*a).shape();
                    let n = c.max(1) as f64;
                    emit(*a, Matrix::from_fn(r, c, |i, _| g[(i, 0)] / n));
                }
                Op::Transpose(a) => emit(*a, g.transpose()),
                Op::Column(a, j) => {
                    let (r, c) = val(*a).shape();
                    emit(
                        *a,
                        Matrix::from_fn(r, c, |i, k| if k == *j { g[(i, 0)] } else { 0.0 }),
                    );
                }
                Op::PairSqNorm(a, pairs, sign) => {
                    let x = val(*a);
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    for (r, &(i, j)) in pairs.iter().enumerate() {
                        let scale = 2.0 * g[(r, 0)];
                        if scale == 0.0 {
                            continue;
                        }
                        for k in 0..x.cols() {
                            let d = scale * (x[(i, k)] + sign * x[(j, k)]);
                            ga[(i, k)] += d;
                            ga[(j, k)] += sign * d;
                        }
                    }
                    emit(*a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = val(p).shape();
                        let gp = Matrix::from_fn(r, c, |i, j| g[(i, offset + j)]);
                        offset += c;
                        emit(p, gp);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// `None` when the var did not influence the root (or is untracked).
    pub fn get(&self, var: Var<'_>) -> Option<&Matrix> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, with untouched vars reported as zeros of the right shape.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Matrix {
        match self.get(var) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = var.shape();
                Matrix::zeros(r, c)
            }
        }
    }
}

#[inline]
fn bget(m: &Matrix, i: usize, j: usize) -> f64 {
    let r = if m.rows() == 1 { 0 } else { i };
    let c = if m.cols() == 1 { 0 } else { j };
    m[(r, c)]
}

fn broadcast_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    match (dim(a.rows(), b.rows()), dim(a.cols(), b.cols())) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::Dimension {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        }),
    }
}

/// Sums `g` down to `shape` along broadcast axes.
fn reduce_to(g: &Matrix, shape: (usize, usize)) -> Matrix {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Matrix::zeros(shape.0, shape.1);
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let r = if shape.0 == 1 { 0 } else { i };
            let c = if shape.1 == 1 { 0 } else { j };
            out[(r, c)] += g[(i, j)];
        }
    }
    out
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Matrix> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    /// Value of a `1x1` var.
    pub fn item(&self) -> f64 {
        let v = self.value();
        debug_assert_eq!(v.shape(), (1, 1));
        v[(0, 0)]
    }

    /// Same value, cut off from the graph.
    pub fn detach(self) -> Var<'t> {
        let v = (*self.value()).clone();
        self.tape.constant(v)
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        let value = a.matmul(&b)?;
        let tracked = self.tape.tracked(self.id) || self.tape.tracked(rhs.id);
        Ok(self.tape.push(value, Op::MatMul(self.id, rhs.id), tracked))
    }

    fn binary(
        self,
        rhs: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        let (r, c) = broadcast_shape(name, &a, &b)?;
        let value = Matrix::from_fn(r, c, |i, j| f(bget(&a, i, j), bget(&b, i, j)));
        let tracked = self.tape.tracked(self.id) || self.tape.tracked(rhs.id);
        Ok(self.tape.push(value, op, tracked))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "add", |a, b| a + b, Op::Add(self.id, rhs.id))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "sub", |a, b| a - b, Op::Sub(self.id, rhs.id))
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "mul", |a, b| a * b, Op::Mul(self.id, rhs.id))
    }

    /// Division with the denominator clamped to at least [`EPS`].
    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "div", |a, b| a / b.max(EPS), Op::Div(self.id, rhs.id))
    }

    /// `scale * x + shift`.
    pub fn affine(self, scale: f64, shift: f64) -> Var<'t> {
        let value = self.value().map(|x| scale * x + shift);
        self.tape.unary(self.id, value, Op::Affine(self.id, scale))
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.affine(k, 0.0)
    }

    pub fn neg(self) -> Var<'t> {
        self.affine(-1.0, 0.0)
    }

    /// `1 - x`.
    pub fn one_minus(self) -> Var<'t> {
        self.affine(-1.0, 1.0)
    }

    /// Natural log of `max(x, EPS)`.
    pub fn log(self) -> Var<'t> {
        let value = self.value().map(|x| x.max(EPS).ln());
        self.tape.unary(self.id, value, Op::Log(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let value = self.value().map(f64::exp);
        self.tape.unary(self.id, value, Op::Exp(self.id))
    }

    pub fn sqrt(self) -> Var<'t> {
        let value = self.value().map(|x| x.max(0.0).sqrt());
        self.tape.unary(self.id, value, Op::Sqrt(self.id))
    }

    pub fn clamp_min(self, threshold: f64) -> Var<'t> {
        let value = self.value().map(|x| x.max(threshold));
        self.tape
            .unary(self.id, value, Op::ClampMin(self.id, threshold))
    }

    pub fn relu(self) -> Var<'t> {
        let value = self.value().map(|x| x.max(0.0));
        self.tape.unary(self.id, value, Op::Relu(self.id))
    }

    /// Logistic function, clamped into `[EPS, 1 - EPS]`.
    pub fn sigmoid(self) -> Var<'t> {
        let value = self.value().map(|x| {
            let s = if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            };
            s.clamp(EPS, 1.0 - EPS)
        });
        self.tape.unary(self.id, value, Op::Sigmoid(self.id))
    }

    pub fn softmax_rows(self) -> Var<'t> {
        let x = self.value();
        let mut value = (*x).clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.tape.unary(self.id, value, Op::SoftmaxRows(self.id))
    }

    /// Divides each row by its euclidean norm; rows with norm `<= EPS` become zero.
    pub fn l2_normalize_rows(self) -> Var<'t> {
        let x = self.value();
        let mut value = (*x).clone();
        let mut norms = Vec::with_capacity(x.rows());
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            for v in row.iter_mut() {
                *v = if n <= EPS { 0.0 } else { *v / n };
            }
        }
        self.tape
            .unary(self.id, value, Op::L2NormalizeRows(self.id, norms))
    }

    pub fn sum(self) -> Var<'t> {
        let value = Matrix::scalar(self.value().sum());
        self.tape.unary(self.id, value, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let x = self.value();
        let value = Matrix::scalar(if x.is_empty() {
            0.0
        } else {
            x.sum() / x.len() as f64
        });
        self.tape.unary(self.id, value, Op::Mean(self.id))
    }

    /// `rows x 1` column of row sums.
    pub fn row_sum(self) -> Var<'t> {
        let x = self.value();
        let value = Matrix::from_fn(x.rows(), 1, |i, _| x.row(i).iter().sum());
        self.tape.unary(self.id, value, Op::RowSum(self.id))
    }

    pub fn row_mean(self) -> Var<'t> {
        let x = self.value();
        let c = x.cols().max(1) as f64;
        let value = Matrix::from_fn(x.rows(), 1, |i, _| x.row(i).iter().sum::<f64>() / c);
        self.tape.unary(self.id, value, Op::RowMean(self.id))
    }

    pub fn transpose(self) -> Var<'t> {
        let value = self.value().transpose();
        self.tape.unary(self.id, value, Op::Transpose(self.id))
    }

    /// Column `j` as a `rows x 1` var.
    pub fn column(self, j: usize) -> Result<Var<'t>> {
        let x = self.value();
        if j >= x.cols() {
            return Err(Error::contract(format!(
                "column {j} out of range for {:?}",
                x.shape()
            )));
        }
        let value = x.column(j);
        Ok(self.tape.unary(self.id, value, Op::Column(self.id, j)))
    }

    /// `k x 1` column of `|x_i + sign * x_j|^2` for each row pair `(i, j)`.
    pub fn pair_sq_norms(self, pairs: Rc<Vec<(usize, usize)>>, sign: f64) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i.max(j) >= x.rows()) {
            return Err(Error::contract(format!(
                "pair ({i}, {j}) out of range for {} rows",
                x.rows()
            )));
        }
        let value = Matrix::from_fn(pairs.len(), 1, |r, _| {
            let (a, b) = (x.row(pairs[r].0), x.row(pairs[r].1));
            a.iter().zip(b).map(|(p, q)| (p + sign * q).powi(2)).sum()
        });
        Ok(self
            .tape
            .unary(self.id, value, Op::PairSqNorm(self.id, pairs, sign)))
    }

    /// Concatenates vars along the feature axis.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols needs at least one part"))?
            .tape;
        let values: Vec<Rc<Matrix>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Matrix> = values.iter().map(|v| v.as_ref()).collect();
        let value = Matrix::hstack(&refs)?;
        let tracked = parts.iter().any(|p| tape.tracked(p.id));
        Ok(tape.push(
            value,
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            tracked,
        ))
    }
}

/// Cosine similarity of two equal-length vectors, norms clamped to at least [`EPS`].
pub fn cosine_sim(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension {
            op: "cosine_sim",
            lhs: (1, x.len()),
            rhs: (1, y.len()),
        });
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt().max(EPS);
    let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt().max(EPS);
    Ok((dot / (nx * ny)).clamp(-1.0, 1.0))
}
