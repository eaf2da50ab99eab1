//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! A `Tape` records a DAG of matrix-valued operations; forward values are
//! computed eagerly at op creation and `backward` walks the tape in reverse,
//! accumulating adjoints additively (shared subexpressions sum). The tape is
//! rebuilt per training step: batch shapes are small and fixed, so rebuilding
//! is cheaper than caching graph structure.
//!
//! All tape tensors are 2-D (vectors are n x 1, scalars 1 x 1).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Matmul,
    Sqrt,
    Ln,
    Exp,
    Sigmoid,
    Silu,
    Clamp(f64, f64),
    SumAll,
    MeanAll,
    MeanCols,
    RepeatCols(usize),
    AddBcastCol,
    ScaleByScalar,
    Cumsum,
    SliceRows(usize, usize),
    ConcatRows,
    Transpose,
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Neg => "neg",
            OpKind::Scale(_) => "scale",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::Matmul => "matmul",
            OpKind::Sqrt => "sqrt",
            OpKind::Ln => "ln",
            OpKind::Exp => "exp",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Silu => "silu",
            OpKind::Clamp(_, _) => "clamp",
            OpKind::SumAll => "sum_all",
            OpKind::MeanAll => "mean_all",
            OpKind::MeanCols => "mean_cols",
            OpKind::RepeatCols(_) => "repeat_cols",
            OpKind::AddBcastCol => "add_bcast_col",
            OpKind::ScaleByScalar => "scale_by_scalar",
            OpKind::Cumsum => "cumsum",
            OpKind::SliceRows(_, _) => "slice_rows",
            OpKind::ConcatRows => "concat_rows",
            OpKind::Transpose => "transpose",
        }
    }
}

struct Node {
    op: OpKind,
    inputs: Vec<usize>,
    value: Tensor,
}

/// Handle into a tape. Cheap to copy; only valid for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: OpKind, inputs: Vec<usize>, value: Tensor) -> Var {
        self.nodes.push(Node { op, inputs, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(OpKind::Leaf, vec![], value)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(OpKind::Add, vec![a.0, b.0], v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(OpKind::Sub, vec![a.0, b.0], v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(OpKind::Mul, vec![a.0, b.0], v))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip(self.value(b), "div", |x, y| x / y)?;
        Ok(self.push(OpKind::Div, vec![a.0, b.0], v))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).scale(-1.0);
        self.push(OpKind::Neg, vec![a.0], v)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).scale(k);
        self.push(OpKind::Scale(k), vec![a.0], v)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.push(OpKind::AddScalar(k), vec![a.0], v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(OpKind::Matmul, vec![a.0, b.0], v))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.push(OpKind::Sqrt, vec![a.0], v)
    }

    /// Errors on non-positive input (numeric-failure contract).
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Numeric { op: "ln", detail: "non-positive input".into() });
        }
        let v = self.value(a).map(f64::ln);
        Ok(self.push(OpKind::Ln, vec![a.0], v))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(OpKind::Exp, vec![a.0], v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(OpKind::Sigmoid, vec![a.0], v)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(OpKind::Silu, vec![a.0], v)
    }

    /// Adjoint is zero outside the open interval (lo, hi).
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(OpKind::Clamp(lo, hi), vec![a.0], v)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(OpKind::SumAll, vec![a.0], v)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(OpKind::MeanAll, vec![a.0], v)
    }

    /// n x m -> n x 1, averaging across columns (channel average).
    pub fn mean_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (n, m) = (t.rows(), t.cols());
        let mut out = vec![0.0; n];
        for i in 0..n {
            for j in 0..m {
                out[i] += t.at(i, j);
            }
            out[i] /= m as f64;
        }
        let v = Tensor::matrix(n, 1, out).expect("consistent");
        self.push(OpKind::MeanCols, vec![a.0], v)
    }

    /// n x 1 -> n x m by repetition.
    pub fn repeat_cols(&mut self, a: Var, m: usize) -> Result<Var> {
        let t = self.value(a);
        if t.cols() != 1 {
            return Err(Error::ShapeMismatch { op: "repeat_cols", detail: format!("{:?}", t.shape()) });
        }
        let n = t.rows();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = t.at(i, 0);
            }
        }
        let v = Tensor::matrix(n, m, out).expect("consistent");
        Ok(self.push(OpKind::RepeatCols(m), vec![a.0], v))
    }

    /// a (n x m) + b (n x 1) broadcast across columns; the bias-add rule.
    pub fn add_bcast_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.cols() != 1 || ta.rows() != tb.rows() {
            return Err(Error::ShapeMismatch {
                op: "add_bcast_col",
                detail: format!("{:?} + {:?}", ta.shape(), tb.shape()),
            });
        }
        let (n, m) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let bias = tb.at(i, 0);
            for j in 0..m {
                out[i * m + j] = ta.at(i, j) + bias;
            }
        }
        let v = Tensor::matrix(n, m, out).expect("consistent");
        Ok(self.push(OpKind::AddBcastCol, vec![a.0, b.0], v))
    }

    /// a (n x m) * s (1 x 1).
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "scale_by_scalar",
                detail: format!("{:?}", self.value(s).shape()),
            });
        }
        let sv = self.value(s).scalar_value();
        let v = self.value(a).scale(sv);
        Ok(self.push(OpKind::ScaleByScalar, vec![a.0, s.0], v))
    }

    /// Cumulative sum down an n x 1 column.
    pub fn cumsum(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.cols() != 1 {
            return Err(Error::ShapeMismatch { op: "cumsum", detail: format!("{:?}", t.shape()) });
        }
        let mut acc = 0.0;
        let data: Vec<f64> = t
            .data()
            .iter()
            .map(|&x| {
                acc += x;
                acc
            })
            .collect();
        let v = Tensor::matrix(t.rows(), 1, data).expect("consistent");
        Ok(self.push(OpKind::Cumsum, vec![a.0], v))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (n, m) = (t.rows(), t.cols());
        if start + len > n {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                detail: format!("rows {}..{} of {}", start, start + len, n),
            });
        }
        let data = t.data()[start * m..(start + len) * m].to_vec();
        let v = Tensor::matrix(len, m, data).expect("consistent");
        Ok(self.push(OpKind::SliceRows(start, len), vec![a.0], v))
    }

    pub fn row(&mut self, a: Var, index: usize) -> Result<Var> {
        self.slice_rows(a, index, 1)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows needs at least one input"));
        }
        let m = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("column counts differ: {} vs {}", m, t.cols()),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let v = Tensor::matrix(rows, m, data).expect("consistent");
        Ok(self.push(OpKind::ConcatRows, parts.iter().map(|p| p.0).collect(), v))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(OpKind::Transpose, vec![a.0], v)
    }

    // Convenience compositions.

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same shape")
    }

    /// mean of squared entries, as a 1 x 1 scalar.
    pub fn mean_sq(&mut self, a: Var) -> Var {
        let s = self.square(a);
        self.mean_all(s)
    }

    /// W (m x k) * x (k x d) + b (m x 1), the standard linear layer.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let wx = self.matmul(w, x)?;
        self.add_bcast_col(wx, b)
    }

    /// Backward pass from a scalar root. Returns adjoints for every node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = self.value(root);
        if !root_val.is_scalar() {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                root_val.shape()
            )));
        }
        let mut adj: Vec<Tensor> =
            self.nodes.iter().map(|n| Tensor::zeros(n.value.shape())).collect();
        adj[root.0] = Tensor::scalar(1.0);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if node.inputs.is_empty() {
                continue;
            }
            let g = adj[idx].clone();
            if g.data().iter().all(|&x| x == 0.0) {
                continue;
            }
            if !g.all_finite() {
                return Err(Error::Numeric {
                    op: node.op.name(),
                    detail: "non-finite adjoint encountered during backward".into(),
                });
            }
            self.accumulate(node, &g, &mut adj)?;
        }
        Ok(Gradients { adjoints: adj })
    }

    fn accumulate(&self, node: &Node, g: &Tensor, adj: &mut [Tensor]) -> Result<()> {
        let input = |i: usize| &self.nodes[node.inputs[i]].value;
        let mut add_to = |slot: usize, t: Tensor| -> Result<()> {
            adj[node.inputs[slot]] = adj[node.inputs[slot]].add(&t)?;
            Ok(())
        };
        match node.op {
            OpKind::Leaf => {}
            OpKind::Add => {
                add_to(0, g.clone())?;
                add_to(1, g.clone())?;
            }
            OpKind::Sub => {
                add_to(0, g.clone())?;
                add_to(1, g.scale(-1.0))?;
            }
            OpKind::Mul => {
                let ga = g.mul(input(1))?;
                let gb = g.mul(input(0))?;
                add_to(0, ga)?;
                add_to(1, gb)?;
            }
            OpKind::Div => {
                let b = input(1);
                let ga = g.zip(b, "div_bwd", |gv, bv| gv / bv)?;
                let a = input(0);
                let gb = g
                    .zip(a, "div_bwd", |gv, av| gv * av)?
                    .zip(b, "div_bwd", |t, bv| -t / (bv * bv))?;
                add_to(0, ga)?;
                add_to(1, gb)?;
            }
            OpKind::Neg => add_to(0, g.scale(-1.0))?,
            OpKind::Scale(k) => add_to(0, g.scale(k))?,
            OpKind::AddScalar(_) => add_to(0, g.clone())?,
            OpKind::Matmul => {
                let bt = input(1).transpose();
                let at = input(0).transpose();
                add_to(0, g.matmul(&bt)?)?;
                add_to(1, at.matmul(g)?)?;
            }
            OpKind::Sqrt => {
                let y = &node.value;
                add_to(0, g.zip(y, "sqrt_bwd", |gv, yv| gv * 0.5 / yv)?)?;
            }
            OpKind::Ln => {
                add_to(0, g.zip(input(0), "ln_bwd", |gv, xv| gv / xv)?)?;
            }
            OpKind::Exp => {
                add_to(0, g.mul(&node.value)?)?;
            }
            OpKind::Sigmoid => {
                let y = &node.value;
                add_to(0, g.zip(y, "sigmoid_bwd", |gv, yv| gv * yv * (1.0 - yv))?)?;
            }
            OpKind::Silu => {
                let x = input(0);
                add_to(
                    0,
                    g.zip(x, "silu_bwd", |gv, xv| {
                        let s = sigmoid(xv);
                        gv * (s + xv * s * (1.0 - s))
                    })?,
                )?;
            }
            OpKind::Clamp(lo, hi) => {
                let x = input(0);
                add_to(
                    0,
                    g.zip(x, "clamp_bwd", |gv, xv| if xv > lo && xv < hi { gv } else { 0.0 })?,
                )?;
            }
            OpKind::SumAll => {
                let gv = g.scalar_value();
                add_to(0, Tensor::full(input(0).shape(), gv))?;
            }
            OpKind::MeanAll => {
                let x = input(0);
                let gv = g.scalar_value() / x.len() as f64;
                add_to(0, Tensor::full(x.shape(), gv))?;
            }
            OpKind::MeanCols => {
                let x = input(0);
                let (n, m) = (x.rows(), x.cols());
                let mut out = vec![0.0; n * m];
                for i in 0..n {
                    let gi = g.at(i, 0) / m as f64;
                    for j in 0..m {
                        out[i * m + j] = gi;
                    }
                }
                add_to(0, Tensor::matrix(n, m, out)?)?;
            }
            OpKind::RepeatCols(m) => {
                let n = input(0).rows();
                let mut out = vec![0.0; n];
                for i in 0..n {
                    for j in 0..m {
                        out[i] += g.at(i, j);
                    }
                }
                add_to(0, Tensor::matrix(n, 1, out)?)?;
            }
            OpKind::AddBcastCol => {
                add_to(0, g.clone())?;
                let (n, m) = (g.rows(), g.cols());
                let mut out = vec![0.0; n];
                for i in 0..n {
                    for j in 0..m {
                        out[i] += g.at(i, j);
                    }
                }
                add_to(1, Tensor::matrix(n, 1, out)?)?;
            }
            OpKind::ScaleByScalar => {
                let s = input(1).scalar_value();
                add_to(0, g.scale(s))?;
                let gs = g.mul(input(0))?.sum();
                add_to(1, Tensor::scalar(gs))?;
            }
            OpKind::Cumsum => {
                // adjoint of cumsum is reverse cumsum
                let mut acc = 0.0;
                let n = g.rows();
                let mut out = vec![0.0; n];
                for i in (0..n).rev() {
                    acc += g.at(i, 0);
                    out[i] = acc;
                }
                add_to(0, Tensor::matrix(n, 1, out)?)?;
            }
            OpKind::SliceRows(start, len) => {
                let x = input(0);
                let (n, m) = (x.rows(), x.cols());
                let mut out = vec![0.0; n * m];
                out[start * m..(start + len) * m].copy_from_slice(g.data());
                add_to(0, Tensor::matrix(n, m, out)?)?;
            }
            OpKind::Transpose => {
                add_to(0, g.transpose())?;
            }
            OpKind::ConcatRows => {
                let m = g.cols();
                let mut offset = 0;
                for slot in 0..node.inputs.len() {
                    let rows = self.nodes[node.inputs[slot]].value.rows();
                    let data = g.data()[offset * m..(offset + rows) * m].to_vec();
                    adj[node.inputs[slot]] =
                        adj[node.inputs[slot]].add(&Tensor::matrix(rows, m, data)?)?;
                    offset += rows;
                }
            }
        }
        Ok(())
    }
}

pub struct Gradients {
    adjoints: Vec<Tensor>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> &Tensor {
        &self.adjoints[v.0]
    }
}

/// Evaluate a scalar-rooted graph and return its value plus gradients for the
/// given parameter leaves. Leaves that never feed the root get zero gradients.
pub fn evaluate_with_gradients(tape: &Tape, root: Var, wrt: &[Var]) -> Result<(f64, Vec<Tensor>)> {
    let value = tape.value(root);
    if !value.is_scalar() {
        return Err(Error::contract(format!(
            "graph root must evaluate to a scalar, got shape {:?}",
            value.shape()
        )));
    }
    let grads = tape.backward(root)?;
    Ok((value.scalar_value(), wrt.iter().map(|&v| grads.wrt(v).clone()).collect()))
}
