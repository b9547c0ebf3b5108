//! Define-by-run reverse-mode differentiation.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node to the
//! owning [`Tape`]. Node ids are assigned in execution order, so walking the
//! ids downwards from the output replays the computation in exact reverse.
//! A tape is rebuilt for every forward pass and never crosses threads.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    ScaleBy(usize, usize),
    ConcatCols(Vec<usize>),
    SliceCols { x: usize, start: usize },
    SelectRows { x: usize, rows: Vec<usize> },
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Ln(usize),
    Minimum(usize, usize),
    Maximum(usize, usize),
    Sum(usize),
    Mean(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNormRows { x: usize, eps: f64 },
    NormalizeRows { x: usize, eps: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::ScaleBy(..) => "scale_by",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::SelectRows { .. } => "select_rows",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Minimum(..) => "minimum",
            Op::Maximum(..) => "maximum",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LogSoftmaxRows(_) => "log_softmax_rows",
            Op::LayerNormRows { .. } => "layer_norm_rows",
            Op::NormalizeRows { .. } => "normalize_rows",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::ScaleBy(a, b)
            | Op::Minimum(a, b)
            | Op::Maximum(a, b) => vec![*a, *b],
            Op::ConcatCols(xs) => xs.clone(),
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Sigmoid(x)
            | Op::Softplus(x)
            | Op::Exp(x)
            | Op::Ln(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SoftmaxRows(x)
            | Op::LogSoftmaxRows(x)
            | Op::SliceCols { x, .. }
            | Op::SelectRows { x, .. }
            | Op::LayerNormRows { x, .. }
            | Op::NormalizeRows { x, .. } => vec![*x],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// One executed operation, as recorded on the tape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpRecord {
    pub id: usize,
    pub op: &'static str,
    pub inputs: Vec<usize>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
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

    /// Registers a tensor whose gradient is wanted.
    pub fn param(&self, value: &Tensor) -> Var<'_> {
        self.leaf(as_matrix(value.clone()), true)
    }

    pub fn constant(&self, value: &Tensor) -> Var<'_> {
        self.leaf(as_matrix(value.clone()), false)
    }

    pub fn constant_owned(&self, value: Tensor) -> Var<'_> {
        self.leaf(as_matrix(value), false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Executed operations in recording order (leaves excluded).
    pub fn records(&self) -> Vec<OpRecord> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .filter(|(_, n)| !matches!(n.op, Op::Leaf))
            .map(|(id, n)| OpRecord {
                id,
                op: n.op.name(),
                inputs: n.op.inputs(),
            })
            .collect()
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of zero tensors".into()))?;
        let rows = first.rows();
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        for v in &values {
            if v.rows() != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    left: first.shape(),
                    right: v.shape().to_vec(),
                });
            }
        }
        let cols: usize = values.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row_slice(r));
            }
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push(Tensor::matrix(rows, cols, data)?, Op::ConcatCols(ids), rg))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id].value;
        if !out.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[output.id] = Some(vec![1.0]);
        let mut visited = Vec::new();

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            visited.push(id);
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.map(|data| Tensor::new(n.value.shape().to_vec(), data).expect("grad shape")))
            .collect();
        Ok(Gradients { grads, visited })
    }
}

fn as_matrix(t: Tensor) -> Tensor {
    if t.shape().len() == 2 {
        t
    } else {
        let cols = t.len();
        t.reshape(vec![1, cols]).expect("row reshape")
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, delta: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(delta),
    }
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if nodes[*a].requires_grad {
                // dA = dC · Bᵀ
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * bv.data()[p * n + j];
                        }
                        da[i * k + p] = s;
                    }
                }
                accumulate(grads, nodes, *a, da);
            }
            if nodes[*b].requires_grad {
                // dB = Aᵀ · dC
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = av.data()[i * k + p];
                        for j in 0..n {
                            db[p * n + j] += aip * g[i * n + j];
                        }
                    }
                }
                accumulate(grads, nodes, *b, db);
            }
        }
        Op::Transpose(x) => {
            let (r, c) = (out.rows(), out.cols());
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    dx[j * r + i] = g[i * c + j];
                }
            }
            accumulate(grads, nodes, *x, dx);
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let da = g.iter().zip(bv.data()).map(|(g, b)| g * b).collect();
            let db = g.iter().zip(av.data()).map(|(g, a)| g * a).collect();
            accumulate(grads, nodes, *a, da);
            accumulate(grads, nodes, *b, db);
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let da = g.iter().zip(bv.data()).map(|(g, b)| g / b).collect();
            let db = g
                .iter()
                .zip(av.data().iter().zip(bv.data()))
                .map(|(g, (a, b))| -g * a / (b * b))
                .collect();
            accumulate(grads, nodes, *a, da);
            accumulate(grads, nodes, *b, db);
        }
        Op::AddRow(x, bias) => {
            let cols = out.cols();
            let mut db = vec![0.0; cols];
            for row in g.chunks(cols) {
                db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
            }
            accumulate(grads, nodes, *x, g.to_vec());
            accumulate(grads, nodes, *bias, db);
        }
        Op::Scale(x, c) => accumulate(grads, nodes, *x, g.iter().map(|v| v * c).collect()),
        Op::AddScalar(x) => accumulate(grads, nodes, *x, g.to_vec()),
        Op::ScaleBy(x, s) => {
            let (xv, sv) = (val(*x), val(*s).item());
            accumulate(grads, nodes, *x, g.iter().map(|v| v * sv).collect());
            let ds = g.iter().zip(xv.data()).map(|(g, x)| g * x).sum();
            accumulate(grads, nodes, *s, vec![ds]);
        }
        Op::ConcatCols(parts) => {
            let rows = out.rows();
            let total = out.cols();
            let mut offset = 0;
            for &p in parts {
                let c = val(p).cols();
                if nodes[p].requires_grad {
                    let mut dp = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        dp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                    }
                    accumulate(grads, nodes, p, dp);
                }
                offset += c;
            }
        }
        Op::SliceCols { x, start } => {
            let xv = val(*x);
            let (rows, xc, oc) = (xv.rows(), xv.cols(), out.cols());
            let mut dx = vec![0.0; rows * xc];
            for r in 0..rows {
                dx[r * xc + start..r * xc + start + oc].copy_from_slice(&g[r * oc..(r + 1) * oc]);
            }
            accumulate(grads, nodes, *x, dx);
        }
        Op::SelectRows { x, rows } => {
            let xv = val(*x);
            let c = xv.cols();
            let mut dx = vec![0.0; xv.len()];
            for (k, &r) in rows.iter().enumerate() {
                for j in 0..c {
                    dx[r * c + j] += g[k * c + j];
                }
            }
            accumulate(grads, nodes, *x, dx);
        }
        Op::Sigmoid(x) => {
            let dx = g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
            accumulate(grads, nodes, *x, dx);
        }
        Op::Softplus(x) => {
            let dx = g.iter().zip(val(*x).data()).map(|(g, &x)| g * sigmoid(x)).collect();
            accumulate(grads, nodes, *x, dx);
        }
        Op::Exp(x) => {
            let dx = g.iter().zip(out.data()).map(|(g, y)| g * y).collect();
            accumulate(grads, nodes, *x, dx);
        }
        Op::Ln(x) => {
            let dx = g.iter().zip(val(*x).data()).map(|(g, x)| g / x).collect();
            accumulate(grads, nodes, *x, dx);
        }
        Op::Minimum(a, b) | Op::Maximum(a, b) => {
            let take_min = matches!(nodes[id].op, Op::Minimum(..));
            let (av, bv) = (val(*a), val(*b));
            let mut da = vec![0.0; g.len()];
            let mut db = vec![0.0; g.len()];
            for (i, gi) in g.iter().enumerate() {
                let (x, y) = (av.data()[i], bv.data()[i]);
                let pick_a = if take_min { x <= y } else { x >= y };
                if pick_a {
                    da[i] = *gi;
                } else {
                    db[i] = *gi;
                }
            }
            accumulate(grads, nodes, *a, da);
            accumulate(grads, nodes, *b, db);
        }
        Op::Sum(x) => accumulate(grads, nodes, *x, vec![g[0]; val(*x).len()]),
        Op::Mean(x) => {
            let n = val(*x).len();
            accumulate(grads, nodes, *x, vec![g[0] / n as f64; n]);
        }
        Op::SoftmaxRows(x) => {
            let c = out.cols();
            let mut dx = vec![0.0; out.len()];
            for ((dxr, yr), gr) in dx.chunks_mut(c).zip(out.data().chunks(c)).zip(g.chunks(c)) {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for j in 0..c {
                    dxr[j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(grads, nodes, *x, dx);
        }
        Op::LogSoftmaxRows(x) => {
            let c = out.cols();
            let mut dx = vec![0.0; out.len()];
            for ((dxr, yr), gr) in dx.chunks_mut(c).zip(out.data().chunks(c)).zip(g.chunks(c)) {
                let gsum: f64 = gr.iter().sum();
                for j in 0..c {
                    dxr[j] = gr[j] - yr[j].exp() * gsum;
                }
            }
            accumulate(grads, nodes, *x, dx);
        }
        Op::LayerNormRows { x, eps } => {
            let xv = val(*x);
            let c = xv.cols();
            let n = c as f64;
            let mut dx = vec![0.0; xv.len()];
            for ((dxr, xr), gr) in dx.chunks_mut(c).zip(xv.data().chunks(c)).zip(g.chunks(c)) {
                let mean = xr.iter().sum::<f64>() / n;
                let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * inv).collect();
                let gmean = gr.iter().sum::<f64>() / n;
                let gxmean = gr.iter().zip(&xhat).map(|(g, h)| g * h).sum::<f64>() / n;
                for j in 0..c {
                    dxr[j] = inv * (gr[j] - gmean - xhat[j] * gxmean);
                }
            }
            accumulate(grads, nodes, *x, dx);
        }
        Op::NormalizeRows { x, eps } => {
            let xv = val(*x);
            let c = xv.cols();
            let mut dx = vec![0.0; xv.len()];
            for (((dxr, xr), yr), gr) in dx
                .chunks_mut(c)
                .zip(xv.data().chunks(c))
                .zip(out.data().chunks(c))
                .zip(g.chunks(c))
            {
                let norm = (xr.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for j in 0..c {
                    dxr[j] = (gr[j] - yr[j] * dot) / norm;
                }
            }
            accumulate(grads, nodes, *x, dx);
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

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Result of a backward pass: gradient per tape node, plus the order in
/// which operations were visited.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Gradient of the output with respect to `var`, if `var` was reachable.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but yields zeros for unreachable inputs.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }

    /// Ids of the operations processed, in processing order.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::Dimension {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
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

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn zip_with(self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (a, b) = (self.value(), other.value());
        same_shape(name, &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::matrix(a.rows(), a.cols(), data)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        if b.rows() != k {
            return Err(Error::Dimension {
                op: "matmul",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a.data()[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b.data()[p * n..(p + 1) * n];
                row.iter_mut().zip(brow).for_each(|(c, b)| *c += aip * b);
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        Ok(self.binary(other, value, Op::MatMul(self.id, other.id)))
    }

    pub fn t(self) -> Var<'t> {
        let a = self.value();
        let (r, c) = (a.rows(), a.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = a.data()[i * c + j];
            }
        }
        let value = Tensor::matrix(c, r, data).expect("transpose shape");
        self.unary(value, Op::Transpose(self.id))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "add", |a, b| a + b)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "sub", |a, b| a - b)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "mul", |a, b| a * b)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "div", |a, b| a / b)?;
        Ok(self.binary(other, v, Op::Div(self.id, other.id)))
    }

    pub fn minimum(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "minimum", |a, b| if a <= b { a } else { b })?;
        Ok(self.binary(other, v, Op::Minimum(self.id, other.id)))
    }

    pub fn maximum(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "maximum", |a, b| if a >= b { a } else { b })?;
        Ok(self.binary(other, v, Op::Maximum(self.id, other.id)))
    }

    /// Adds a `1 × n` bias to every row of an `m × n` matrix.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        if b.len() != x.cols() {
            return Err(Error::Dimension {
                op: "add_row",
                left: x.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let c = x.cols();
        let data = x.data().iter().enumerate().map(|(i, v)| v + b.data()[i % c]).collect();
        let value = Tensor::matrix(x.rows(), c, data)?;
        Ok(self.binary(bias, value, Op::AddRow(self.id, bias.id)))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let value = as_matrix(self.value().map(|v| v * c));
        self.unary(value, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let value = as_matrix(self.value().map(|v| v + c));
        self.unary(value, Op::AddScalar(self.id))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// Multiplies every element by a `1 × 1` variable.
    pub fn scale_by(self, s: Var<'t>) -> Result<Var<'t>> {
        let sv = s.value();
        if !sv.is_scalar() {
            return Err(Error::Dimension {
                op: "scale_by",
                left: self.shape(),
                right: sv.shape().to_vec(),
            });
        }
        let k = sv.item();
        let value = as_matrix(self.value().map(|v| v * k));
        Ok(self.binary(s, value, Op::ScaleBy(self.id, s.id)))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        if len == 0 || start + len > x.cols() {
            return Err(Error::Contract(format!(
                "slice_cols [{start}, {}) out of range for {:?}",
                start + len,
                x.shape()
            )));
        }
        let mut data = Vec::with_capacity(x.rows() * len);
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row_slice(r)[start..start + len]);
        }
        let value = Tensor::matrix(x.rows(), len, data)?;
        Ok(self.unary(value, Op::SliceCols { x: self.id, start }))
    }

    /// Gathers rows by index; repeated indices are allowed.
    pub fn select_rows(self, rows: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if rows.is_empty() {
            return Err(Error::Contract("select_rows with no indices".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= x.rows()) {
            return Err(Error::Contract(format!("row {bad} out of range for {:?}", x.shape())));
        }
        let mut data = Vec::with_capacity(rows.len() * x.cols());
        for &r in rows {
            data.extend_from_slice(x.row_slice(r));
        }
        let value = Tensor::matrix(rows.len(), x.cols(), data)?;
        Ok(self.unary(
            value,
            Op::SelectRows {
                x: self.id,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let value = as_matrix(self.value().map(sigmoid));
        self.unary(value, Op::Sigmoid(self.id))
    }

    pub fn softplus(self) -> Var<'t> {
        let value = as_matrix(self.value().map(softplus));
        self.unary(value, Op::Softplus(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let value = as_matrix(self.value().map(f64::exp));
        self.unary(value, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        let value = as_matrix(self.value().map(f64::ln));
        self.unary(value, Op::Ln(self.id))
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self).expect("square of self")
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let x = self.value();
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        self.unary(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(self) -> Var<'t> {
        let value = as_matrix(softmax_rows(&self.value()));
        self.unary(value, Op::SoftmaxRows(self.id))
    }

    /// Row-wise `x - logsumexp(x)`.
    pub fn log_softmax_rows(self) -> Var<'t> {
        let x = self.value();
        let c = x.cols();
        let mut data = Vec::with_capacity(x.len());
        for row in x.data().chunks(c) {
            let lse = log_sum_exp(row);
            data.extend(row.iter().map(|v| v - lse));
        }
        let value = Tensor::matrix(x.rows(), c, data).expect("log_softmax shape");
        self.unary(value, Op::LogSoftmaxRows(self.id))
    }

    /// Row-wise standardization without affine parameters.
    pub fn layer_norm_rows(self, eps: f64) -> Var<'t> {
        let x = self.value();
        let c = x.cols();
        let n = c as f64;
        let mut data = Vec::with_capacity(x.len());
        for row in x.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            data.extend(row.iter().map(|v| (v - mean) * inv));
        }
        let value = Tensor::matrix(x.rows(), c, data).expect("layer_norm shape");
        self.unary(value, Op::LayerNormRows { x: self.id, eps })
    }

    /// Scales each row to unit L2 norm (`x / sqrt(|x|² + eps)`).
    pub fn normalize_rows(self, eps: f64) -> Var<'t> {
        let x = self.value();
        let c = x.cols();
        let mut data = Vec::with_capacity(x.len());
        for row in x.data().chunks(c) {
            let norm = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            data.extend(row.iter().map(|v| v / norm));
        }
        let value = Tensor::matrix(x.rows(), c, data).expect("normalize shape");
        self.unary(value, Op::NormalizeRows { x: self.id, eps })
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Value-level row softmax shared by the tape op and inference paths.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut data = Vec::with_capacity(x.len());
    for row in x.data().chunks(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = data.len();
        data.extend(row.iter().map(|v| (v - max).exp()));
        let sum: f64 = data[start..].iter().sum();
        data[start..].iter_mut().for_each(|v| *v /= sum);
    }
    Tensor::new(x.shape().to_vec(), data).expect("softmax shape")
}
