use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geometry::{
    mat_mul, rotation_x, rotation_y, rotation_z, Mat3, MatrixMode, OrientationMode,
};

use super::params::ParamSet;
use super::tensor::{gemm_acc, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Statistics captured by a normalisation node evaluated in batch mode.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const NORM_EPS: f64 = 1e-9;

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    LeakyRelu(Var, f64),
    GatherRows(Var, Vec<usize>),
    /// `out[r] = center[r / group] + other[idx[r]]`.
    EdgeSum { center: Var, other: Var, idx: Vec<usize>, group: usize },
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    /// Max over consecutive groups of rows; argmax cached per output entry.
    GroupMax { x: Var, group: usize, argmax: Vec<usize> },
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    /// Batch statistics over rows; `xhat` and `inv_std` cached.
    Norm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    /// Fixed (running) statistics: an affine map per column.
    NormFixed { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, var: Vec<f64>, inv_std: Vec<f64> },
    BoundedTanh(Var, Vec<f64>),
    Sum(Var),
    /// Euclidean norm of each row, producing a column.
    RowNorm(Var),
    /// Each row divided by its Euclidean norm.
    NormalizeRows(Var),
    Rigid3 { x: Var, pose: Var, mode: OrientationMode },
    Rigid2 { x: Var, pose: Var, mode: MatrixMode },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::GatherRows(..) => "gather_rows",
            Op::EdgeSum { .. } => "edge_sum",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::GroupMax { .. } => "group_max",
            Op::MeanRows(..) => "mean_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::Norm { .. } => "norm",
            Op::NormFixed { .. } => "norm_fixed",
            Op::BoundedTanh(..) => "bounded_tanh",
            Op::Sum(..) => "sum",
            Op::RowNorm(..) => "row_norm",
            Op::NormalizeRows(..) => "normalize_rows",
            Op::Rigid3 { .. } => "rigid3",
            Op::Rigid2 { .. } => "rigid2",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::AddRow(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::LeakyRelu(a, _)
            | Op::GatherRows(a, _)
            | Op::SliceRows(a, ..)
            | Op::SliceCols(a, ..)
            | Op::MeanRows(a)
            | Op::BoundedTanh(a, _)
            | Op::Sum(a)
            | Op::RowNorm(a)
            | Op::NormalizeRows(a) => vec![*a],
            Op::GroupMax { x, .. } => vec![*x],
            Op::EdgeSum { center, other, .. } => vec![*center, *other],
            Op::ConcatCols(v) => v.clone(),
            Op::Norm { x, gamma, beta, .. } | Op::NormFixed { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Rigid3 { x, pose, .. } | Op::Rigid2 { x, pose, .. } => vec![*x, *pose],
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct NodeData {
    pub(crate) op: Op,
    pub(crate) value: Tensor,
    pub(crate) requires_grad: bool,
    pub(crate) name: Option<String>,
}

/// A tape of tensor operations evaluated eagerly, differentiated in reverse.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<NodeData>,
    params: HashMap<String, Var>,
    norm_stats: Vec<NormStats>,
}

/// Gradients of a scalar root with respect to every node that requires one.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn d_rotations(euler: [f64; 3]) -> (Mat3, [Mat3; 3]) {
    let (rx, ry, rz) = (rotation_x(euler[0]), rotation_y(euler[1]), rotation_z(euler[2]));
    let (s0, c0) = euler[0].sin_cos();
    let (s1, c1) = euler[1].sin_cos();
    let (s2, c2) = euler[2].sin_cos();
    let drx = [[-s0, -c0, 0.0], [c0, -s0, 0.0], [0.0, 0.0, 0.0]];
    let dry = [[-s1, 0.0, -c1], [0.0, 0.0, 0.0], [c1, 0.0, -s1]];
    let drz = [[0.0, 0.0, 0.0], [0.0, -s2, -c2], [0.0, c2, -s2]];
    let r = mat_mul(&mat_mul(&rz, &ry), &rx);
    let d0 = mat_mul(&mat_mul(&rz, &ry), &drx);
    let d1 = mat_mul(&mat_mul(&rz, &dry), &rx);
    let d2 = mat_mul(&mat_mul(&drz, &ry), &rx);
    (r, [d0, d1, d2])
}

fn matrix_2d(theta: f64, mode: MatrixMode) -> ([[f64; 2]; 2], [[f64; 2]; 2]) {
    let (s, c) = theta.sin_cos();
    match mode {
        MatrixMode::AsPrinted => ([[-c, s], [s, c]], [[s, c], [c, -s]]),
        MatrixMode::ProperRotation => ([[c, -s], [s, c]], [[-s, -c], [c, -s]]),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn norm_stats(&self) -> &[NormStats] {
        &self.norm_stats
    }

    /// Leaf variables that require gradients, in creation order.
    pub fn grad_leaves(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf) && n.requires_grad)
            .map(|(i, _)| Var(i))
            .collect()
    }

    pub fn leaf_name(&self, v: Var) -> Option<&str> {
        self.nodes[v.0].name.as_deref()
    }

    /// Named parameter leaves created through [`Graph::param`].
    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v))
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        let idx = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("node {idx} ({})", op.name())));
        }
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(NodeData { op, value, requires_grad, name: None });
        Ok(Var(idx))
    }

    fn shape_err(&self, op: &'static str, detail: String) -> Error {
        Error::Shape { node: self.nodes.len(), op, detail }
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(NodeData { op: Op::Leaf, value: t, requires_grad: false, name: None });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor, name: Option<String>) -> Var {
        self.nodes.push(NodeData { op: Op::Leaf, value: t, requires_grad: true, name });
        Var(self.nodes.len() - 1)
    }

    /// Binds a named parameter, reusing the leaf if already bound in this graph.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let t = params.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let v = self.leaf(t.clone(), Some(name.to_string()));
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, k2, n) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        if k != k2 {
            return Err(self.shape_err("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(ta.data(), false, tb.data(), false, &mut out, m, k, n);
        self.push(Op::MatMul(a, b), Tensor::matrix(m, n, out))
    }

    /// Adds a `1×c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        if tb.len() != c {
            return Err(self.shape_err("add_row", format!("bias of {} for {} columns", tb.len(), c)));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let t = Tensor::matrix(tx.rows(), c, out);
        self.push(Op::AddRow(x, bias), t)
    }

    fn binary(&mut self, a: Var, b: Var, sub: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(self.shape_err(
                if sub { "sub" } else { "add" },
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| if sub { x - y } else { x + y })
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        self.push(if sub { Op::Sub(a, b) } else { Op::Add(a, b) }, t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(self.shape_err("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        self.push(Op::Mul(a, b), t)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let t = self.value(x);
        let t = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * s).collect());
        self.push(Op::Scale(x, s), t)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let t = self.value(x);
        let t = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v + s).collect());
        self.push(Op::AddScalar(x, s), t)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let t = self.value(x);
        let t = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| leaky(v, slope)).collect());
        self.push(Op::LeakyRelu(x, slope), t)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.leaky_relu(x, 0.0)
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(self.shape_err("gather_rows", format!("row {bad} of {r}")));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            out.extend_from_slice(t.row_slice(i));
        }
        let t = Tensor::matrix(idx.len(), c, out);
        self.push(Op::GatherRows(x, idx), t)
    }

    /// Row `r` of the result is `center[r / group] + other[idx[r]]`: a gather
    /// of both operands and their sum in one node.
    pub fn edge_sum(&mut self, center: Var, other: Var, idx: Vec<usize>, group: usize) -> Result<Var> {
        let (tc, to) = (self.value(center), self.value(other));
        let c = tc.cols();
        if to.cols() != c {
            return Err(self.shape_err("edge_sum", format!("{c} and {} columns", to.cols())));
        }
        if group == 0 || idx.len() != tc.rows() * group {
            return Err(self.shape_err("edge_sum", format!("{} indices for {} rows in groups of {group}", idx.len(), tc.rows())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= to.rows()) {
            return Err(self.shape_err("edge_sum", format!("row {bad} of {}", to.rows())));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for (r, &i) in idx.iter().enumerate() {
            let (a, b) = (tc.row_slice(r / group), to.row_slice(i));
            out.extend(a.iter().zip(b).map(|(x, y)| x + y));
        }
        let t = Tensor::matrix(idx.len(), c, out);
        self.push(Op::EdgeSum { center, other, idx, group }, t)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if start > end || end > t.rows() {
            return Err(self.shape_err("slice_rows", format!("{start}..{end} of {}", t.rows())));
        }
        let c = t.cols();
        let t = Tensor::matrix(end - start, c, t.data()[start * c..end * c].to_vec());
        self.push(Op::SliceRows(x, start, end), t)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if start > end || end > c {
            return Err(self.shape_err("slice_cols", format!("{start}..{end} of {c}")));
        }
        let mut out = Vec::with_capacity(t.rows() * (end - start));
        for r in 0..t.rows() {
            out.extend_from_slice(&t.row_slice(r)[start..end]);
        }
        let t = Tensor::matrix(t.rows(), end - start, out);
        self.push(Op::SliceCols(x, start, end), t)
    }

    fn group_max_value(t: &Tensor, group: usize) -> (Vec<f64>, Vec<usize>) {
        let c = t.cols();
        let groups = t.rows() / group;
        let mut out = vec![f64::NEG_INFINITY; groups * c];
        let mut arg = vec![0usize; groups * c];
        for g in 0..groups {
            for m in 0..group {
                let r = g * group + m;
                let row = t.row_slice(r);
                for j in 0..c {
                    // strict comparison keeps the lowest index on ties
                    if row[j] > out[g * c + j] {
                        out[g * c + j] = row[j];
                        arg[g * c + j] = r;
                    }
                }
            }
        }
        (out, arg)
    }

    /// Max over consecutive blocks of `group` rows: `(n·group)×c → n×c`.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        let t = self.value(x);
        if group == 0 || t.rows() % group != 0 {
            return Err(self.shape_err("group_max", format!("{} rows in groups of {group}", t.rows())));
        }
        let (out, argmax) = Self::group_max_value(t, group);
        let t = Tensor::matrix(t.rows() / group, t.cols(), out);
        self.push(Op::GroupMax { x, group, argmax }, t)
    }

    /// Column-wise max over all rows.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rows();
        self.group_max(x, r)
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if r == 0 {
            return Err(self.shape_err("mean_rows", "no rows".into()));
        }
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(t.row_slice(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        self.push(Op::MeanRows(x), Tensor::row(out))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = self.value(xs[0]).rows();
        if let Some(bad) = xs.iter().find(|v| self.value(**v).rows() != rows) {
            let detail = format!("{} rows vs {rows}", self.value(*bad).rows());
            return Err(self.shape_err("concat_cols", detail));
        }
        let total: usize = xs.iter().map(|v| self.value(*v).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in xs {
                out.extend_from_slice(self.value(*v).row_slice(r));
            }
        }
        self.push(Op::ConcatCols(xs.to_vec()), Tensor::matrix(rows, total, out))
    }

    fn column_stats(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let (r, c) = (t.rows(), t.cols());
        let mut mean = vec![0.0; c];
        for i in 0..r {
            for (m, v) in mean.iter_mut().zip(t.row_slice(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= r as f64);
        let mut var = vec![0.0; c];
        for i in 0..r {
            for ((s, v), m) in var.iter_mut().zip(t.row_slice(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= r as f64);
        (mean, var)
    }

    /// Per-column normalisation with statistics taken over the rows of `x`.
    /// The statistics are recorded under `name` for running-average updates.
    pub fn norm_batch(&mut self, x: Var, gamma: Var, beta: Var, name: &str) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(self.shape_err("norm", format!("affine parameters for {c} columns")));
        }
        let (mean, var) = Self::column_stats(t);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; r * c];
        let mut out = vec![0.0; r * c];
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for i in 0..r {
            let row = t.row_slice(i);
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        self.norm_stats.push(NormStats { name: name.to_string(), mean, var });
        self.push(Op::Norm { x, gamma, beta, xhat, inv_std }, Tensor::matrix(r, c, out))
    }

    /// Per-column normalisation with fixed statistics.
    pub fn norm_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
    ) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if mean.len() != c || var.len() != c || self.value(gamma).len() != c {
            return Err(self.shape_err("norm_fixed", format!("statistics for {c} columns")));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = t.row_slice(i);
            for j in 0..c {
                out[i * c + j] = g[j] * (row[j] - mean[j]) * inv_std[j] + b[j];
            }
        }
        let op = Op::NormFixed { x, gamma, beta, mean: mean.to_vec(), var: var.to_vec(), inv_std };
        self.push(op, Tensor::matrix(r, c, out))
    }

    /// `bound_j · tanh(x_ij)` per column.
    pub fn bounded_tanh(&mut self, x: Var, bounds: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if bounds.len() != c {
            return Err(self.shape_err("bounded_tanh", format!("{} bounds for {c} columns", bounds.len())));
        }
        let data = t.data().iter().enumerate().map(|(k, v)| bounds[k % c] * v.tanh()).collect();
        let t = Tensor::new(t.shape().to_vec(), data);
        self.push(Op::BoundedTanh(x, bounds), t)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = (0..t.rows())
            .map(|r| t.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect::<Vec<_>>();
        let n = out.len();
        self.push(Op::RowNorm(x), Tensor::matrix(n, 1, out))
    }

    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        let mut out = t.data().to_vec();
        for (r, row) in out.chunks_mut(c).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::NonFinite(format!("zero-norm row {r} in normalize_rows")));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        let t = Tensor::new(t.shape().to_vec(), out);
        self.push(Op::NormalizeRows(x), t)
    }

    /// Applies a 6-dof pose (`t` then Euler angles) to `N×6` minutiae rows.
    pub fn rigid3(&mut self, x: Var, pose: Var, mode: OrientationMode) -> Result<Var> {
        let (tx, tp) = (self.value(x), self.value(pose));
        if tx.cols() != 6 || tp.len() != 6 {
            return Err(self.shape_err("rigid3", format!("x {:?}, pose {:?}", tx.shape(), tp.shape())));
        }
        let p = tp.data();
        let (r, _) = d_rotations([p[3], p[4], p[5]]);
        let t = [p[0], p[1], p[2]];
        let mut out = vec![0.0; tx.len()];
        for (row_in, row_out) in tx.data().chunks(6).zip(out.chunks_mut(6)) {
            for a in 0..3 {
                let pos = r[a][0] * row_in[0] + r[a][1] * row_in[1] + r[a][2] * row_in[2];
                let ori = r[a][0] * row_in[3] + r[a][1] * row_in[4] + r[a][2] * row_in[5];
                row_out[a] = pos + t[a];
                row_out[3 + a] = match mode {
                    OrientationMode::AsPrinted => ori + t[a],
                    OrientationMode::RotateOnly => ori,
                };
            }
        }
        let t = Tensor::matrix(tx.rows(), 6, out);
        self.push(Op::Rigid3 { x, pose, mode }, t)
    }

    /// Applies a 3-dof planar pose `(t_x, t_y, θ)` to `N×3` rows `(x, y, angle)`.
    pub fn rigid2(&mut self, x: Var, pose: Var, mode: MatrixMode) -> Result<Var> {
        let (tx, tp) = (self.value(x), self.value(pose));
        if tx.cols() != 3 || tp.len() != 3 {
            return Err(self.shape_err("rigid2", format!("x {:?}, pose {:?}", tx.shape(), tp.shape())));
        }
        let p = tp.data();
        let (m, _) = matrix_2d(p[2], mode);
        let mut out = vec![0.0; tx.len()];
        for (ri, ro) in tx.data().chunks(3).zip(out.chunks_mut(3)) {
            ro[0] = m[0][0] * ri[0] + m[0][1] * ri[1] + p[0];
            ro[1] = m[1][0] * ri[0] + m[1][1] * ri[1] + p[1];
            ro[2] = crate::geometry::normalize_angle(ri[2] + p[2]);
        }
        let t = Tensor::matrix(tx.rows(), 3, out);
        self.push(Op::Rigid2 { x, pose, mode }, t)
    }

    /// Gradients of the scalar `root` with respect to all upstream nodes.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let t = self.value(root);
        if t.len() != 1 {
            return Err(Error::Shape {
                node: root.0,
                op: self.nodes[root.0].op.name(),
                detail: format!("backward needs a scalar root, got {:?}", t.shape()),
            });
        }
        self.backward_with_seed(&[(root, Tensor::new(t.shape().to_vec(), vec![1.0]))])
    }

    /// Reverse pass seeded with explicit output gradients (vector-Jacobian
    /// products for several outputs at once).
    pub fn backward_with_seed(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            if g.shape() != self.value(*v).shape() {
                return Err(Error::Shape {
                    node: v.0,
                    op: "seed",
                    detail: format!("{:?} vs {:?}", g.shape(), self.value(*v).shape()),
                });
            }
            accumulate(&mut grads, *v, g.clone());
            last = last.max(v.0);
        }
        for idx in (0..=last).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_acc(g.data(), false, tb.data(), true, &mut da, m, n, k);
                    accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_acc(ta.data(), true, g.data(), false, &mut db, k, m, n);
                    accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db));
                }
            }
            Op::AddRow(x, bias) => {
                if self.needs(*x) {
                    accumulate(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), g.data().to_vec()));
                }
                if self.needs(*bias) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *bias, Tensor::new(self.value(*bias).shape().to_vec(), db));
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        accumulate(grads, *v, g.clone());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    let neg = g.data().iter().map(|v| -v).collect();
                    accumulate(grads, *b, Tensor::new(g.shape().to_vec(), neg));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d));
                }
                if self.needs(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, Tensor::new(g.shape().to_vec(), d));
                }
            }
            Op::Scale(x, s) => {
                let d = g.data().iter().map(|v| v * s).collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d));
            }
            Op::AddScalar(x, _) => accumulate(grads, *x, g.clone()),
            Op::LeakyRelu(x, slope) => {
                let xin = self.value(*x).data();
                let d = g
                    .data()
                    .iter()
                    .zip(xin)
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { gv * slope })
                    .collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d));
            }
            Op::GatherRows(x, idx) => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut d = vec![0.0; tx.len()];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += g.data()[k * c + j];
                    }
                }
                accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), d));
            }
            Op::EdgeSum { center, other, idx, group } => {
                let c = g.cols();
                if self.needs(*center) {
                    let tc = self.value(*center);
                    let mut d = vec![0.0; tc.len()];
                    for (r, row) in g.data().chunks(c).enumerate() {
                        let dst = &mut d[(r / group) * c..(r / group + 1) * c];
                        dst.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    accumulate(grads, *center, Tensor::new(tc.shape().to_vec(), d));
                }
                if self.needs(*other) {
                    let to = self.value(*other);
                    let mut d = vec![0.0; to.len()];
                    for (row, &i) in g.data().chunks(c).zip(idx) {
                        let dst = &mut d[i * c..(i + 1) * c];
                        dst.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    accumulate(grads, *other, Tensor::new(to.shape().to_vec(), d));
                }
            }
            Op::SliceRows(x, start, _) => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut d = vec![0.0; tx.len()];
                d[start * c..start * c + g.len()].copy_from_slice(g.data());
                accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), d));
            }
            Op::SliceCols(x, start, end) => {
                let tx = self.value(*x);
                let c = tx.cols();
                let w = end - start;
                let mut d = vec![0.0; tx.len()];
                for r in 0..tx.rows() {
                    d[r * c + start..r * c + end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), d));
            }
            Op::GroupMax { x, argmax, .. } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut d = vec![0.0; tx.len()];
                for (k, &r) in argmax.iter().enumerate() {
                    d[r * c + k % c] += g.data()[k];
                }
                accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), d));
            }
            Op::MeanRows(x) => {
                let tx = self.value(*x);
                let (r, c) = (tx.rows(), tx.cols());
                let mut d = vec![0.0; r * c];
                for row in d.chunks_mut(c) {
                    for (v, gv) in row.iter_mut().zip(g.data()) {
                        *v = gv / r as f64;
                    }
                }
                accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), d));
            }
            Op::ConcatCols(xs) => {
                let rows = out.rows();
                let total = out.cols();
                let mut off = 0;
                for v in xs {
                    let tv = self.value(*v);
                    let c = tv.cols();
                    if self.needs(*v) {
                        let mut d = Vec::with_capacity(tv.len());
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + off..r * total + off + c]);
                        }
                        accumulate(grads, *v, Tensor::new(tv.shape().to_vec(), d));
                    }
                    off += c;
                }
            }
            Op::Norm { x, gamma, beta, xhat, inv_std } => {
                let (r, c) = (out.rows(), out.cols());
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_dh = vec![0.0; c];
                let mut sum_dh_h = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        let gv = g.data()[i * c + j];
                        let h = xhat[i * c + j];
                        dgamma[j] += gv * h;
                        dbeta[j] += gv;
                        let dh = gv * gam[j];
                        sum_dh[j] += dh;
                        sum_dh_h[j] += dh * h;
                    }
                }
                if self.needs(*x) {
                    let n = r as f64;
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            let dh = g.data()[i * c + j] * gam[j];
                            let h = xhat[i * c + j];
                            dx[i * c + j] = inv_std[j] * (dh - sum_dh[j] / n - h * sum_dh_h[j] / n);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx));
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, Tensor::new(self.value(*gamma).shape().to_vec(), dgamma));
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, Tensor::new(self.value(*beta).shape().to_vec(), dbeta));
                }
            }
            Op::NormFixed { x, gamma, beta, mean, inv_std, .. } => {
                let (r, c) = (out.rows(), out.cols());
                let gam = self.value(*gamma).data();
                let tx = self.value(*x);
                let mut dx = vec![0.0; r * c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        let gv = g.data()[i * c + j];
                        dx[i * c + j] = gv * gam[j] * inv_std[j];
                        dgamma[j] += gv * (tx.data()[i * c + j] - mean[j]) * inv_std[j];
                        dbeta[j] += gv;
                    }
                }
                if self.needs(*x) {
                    accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx));
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, Tensor::new(self.value(*gamma).shape().to_vec(), dgamma));
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, Tensor::new(self.value(*beta).shape().to_vec(), dbeta));
                }
            }
            Op::BoundedTanh(x, bounds) => {
                let tx = self.value(*x);
                let c = tx.cols();
                let d = tx
                    .data()
                    .iter()
                    .zip(g.data())
                    .enumerate()
                    .map(|(k, (v, gv))| {
                        let th = v.tanh();
                        gv * bounds[k % c] * (1.0 - th * th)
                    })
                    .collect();
                accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), d));
            }
            Op::Sum(x) => {
                let tx = self.value(*x);
                accumulate(grads, *x, Tensor::filled(tx.shape(), g.data()[0]));
            }
            Op::RowNorm(x) => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut d = vec![0.0; tx.len()];
                for r in 0..tx.rows() {
                    let n = out.data()[r];
                    // subgradient 0 at the origin
                    if n == 0.0 {
                        continue;
                    }
                    for j in 0..c {
                        d[r * c + j] = g.data()[r] * tx.data()[r * c + j] / n;
                    }
                }
                accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), d));
            }
            Op::NormalizeRows(x) => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut d = vec![0.0; tx.len()];
                for r in 0..tx.rows() {
                    let row = tx.row_slice(r);
                    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let y = out.row_slice(r);
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let gy: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[r * c + j] = (gr[j] - y[j] * gy) / n;
                    }
                }
                accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), d));
            }
            Op::Rigid3 { x, pose, mode } => {
                let (tx, tp) = (self.value(*x), self.value(*pose));
                let p = tp.data();
                let (r, dr) = d_rotations([p[3], p[4], p[5]]);
                let mut dx = vec![0.0; tx.len()];
                let mut dt = [0.0; 3];
                // G = Σ g_p pᵀ + g_o oᵀ
                let mut gm = [[0.0; 3]; 3];
                for (k, (row_in, grow)) in tx.data().chunks(6).zip(g.data().chunks(6)).enumerate() {
                    for a in 0..3 {
                        dt[a] += grow[a];
                        if *mode == OrientationMode::AsPrinted {
                            dt[a] += grow[3 + a];
                        }
                        for b in 0..3 {
                            gm[a][b] += grow[a] * row_in[b] + grow[3 + a] * row_in[3 + b];
                            dx[k * 6 + b] += r[a][b] * grow[a];
                            dx[k * 6 + 3 + b] += r[a][b] * grow[3 + a];
                        }
                    }
                }
                if self.needs(*x) {
                    accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx));
                }
                if self.needs(*pose) {
                    let mut dp = vec![dt[0], dt[1], dt[2], 0.0, 0.0, 0.0];
                    for (q, dq) in dr.iter().enumerate() {
                        let mut s = 0.0;
                        for a in 0..3 {
                            for b in 0..3 {
                                s += gm[a][b] * dq[a][b];
                            }
                        }
                        dp[3 + q] = s;
                    }
                    accumulate(grads, *pose, Tensor::new(tp.shape().to_vec(), dp));
                }
            }
            Op::Rigid2 { x, pose, mode } => {
                let (tx, tp) = (self.value(*x), self.value(*pose));
                let p = tp.data();
                let (m, dm) = matrix_2d(p[2], *mode);
                let mut dx = vec![0.0; tx.len()];
                let mut dp = vec![0.0; 3];
                for (k, (ri, gr)) in tx.data().chunks(3).zip(g.data().chunks(3)).enumerate() {
                    dp[0] += gr[0];
                    dp[1] += gr[1];
                    dp[2] += gr[2];
                    for a in 0..2 {
                        dp[2] += gr[a] * (dm[a][0] * ri[0] + dm[a][1] * ri[1]);
                    }
                    dx[k * 3] = m[0][0] * gr[0] + m[1][0] * gr[1];
                    dx[k * 3 + 1] = m[0][1] * gr[0] + m[1][1] * gr[1];
                    dx[k * 3 + 2] = gr[2];
                }
                if self.needs(*x) {
                    accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx));
                }
                if self.needs(*pose) {
                    accumulate(grads, *pose, Tensor::new(tp.shape().to_vec(), dp));
                }
            }
        }
    }

    /// Re-evaluates every non-leaf node from the current leaf values with the
    /// graph structure (gather indices, op kinds) held fixed.
    pub(crate) fn recompute(&mut self) -> Result<()> {
        for idx in 0..self.nodes.len() {
            let op = self.nodes[idx].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let mut scratch = Graph { nodes: Vec::new(), params: HashMap::new(), norm_stats: Vec::new() };
            // evaluate against a view holding just the inputs
            let inputs = op.inputs();
            let mut remap = HashMap::new();
            for v in &inputs {
                if !remap.contains_key(&v.0) {
                    let nv = scratch.constant(self.nodes[v.0].value.clone());
                    remap.insert(v.0, nv);
                }
            }
            let r = |v: &Var| remap[&v.0];
            let out = match &op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => scratch.matmul(r(a), r(b)),
                Op::AddRow(a, b) => scratch.add_row(r(a), r(b)),
                Op::Add(a, b) => scratch.add(r(a), r(b)),
                Op::Sub(a, b) => scratch.sub(r(a), r(b)),
                Op::Mul(a, b) => scratch.mul(r(a), r(b)),
                Op::Scale(a, s) => scratch.scale(r(a), *s),
                Op::AddScalar(a, s) => scratch.add_scalar(r(a), *s),
                Op::LeakyRelu(a, s) => scratch.leaky_relu(r(a), *s),
                Op::GatherRows(a, i) => scratch.gather_rows(r(a), i.clone()),
                Op::EdgeSum { center, other, idx, group } => scratch.edge_sum(r(center), r(other), idx.clone(), *group),
                Op::SliceRows(a, s, e) => scratch.slice_rows(r(a), *s, *e),
                Op::SliceCols(a, s, e) => scratch.slice_cols(r(a), *s, *e),
                Op::GroupMax { x, group, .. } => scratch.group_max(r(x), *group),
                Op::MeanRows(a) => scratch.mean_rows(r(a)),
                Op::ConcatCols(v) => {
                    let vs: Vec<Var> = v.iter().map(r).collect();
                    scratch.concat_cols(&vs)
                }
                Op::Norm { x, gamma, beta, .. } => scratch.norm_batch(r(x), r(gamma), r(beta), ""),
                Op::NormFixed { x, gamma, beta, mean, var, .. } => {
                    scratch.norm_fixed(r(x), r(gamma), r(beta), mean, var)
                }
                Op::BoundedTanh(a, b) => scratch.bounded_tanh(r(a), b.clone()),
                Op::Sum(a) => scratch.sum(r(a)),
                Op::RowNorm(a) => scratch.row_norm(r(a)),
                Op::NormalizeRows(a) => scratch.normalize_rows(r(a)),
                Op::Rigid3 { x, pose, mode } => scratch.rigid3(r(x), r(pose), *mode),
                Op::Rigid2 { x, pose, mode } => scratch.rigid2(r(x), r(pose), *mode),
            }?;
            let new = scratch.nodes.swap_remove(out.0);
            // keep the original input references, refresh caches and value
            self.nodes[idx].value = new.value;
            self.nodes[idx].op = match (op, new.op) {
                (Op::GroupMax { x, group, .. }, Op::GroupMax { argmax, .. }) => {
                    Op::GroupMax { x, group, argmax }
                }
                (Op::Norm { x, gamma, beta, .. }, Op::Norm { xhat, inv_std, .. }) => {
                    Op::Norm { x, gamma, beta, xhat, inv_std }
                }
                (op, _) => op,
            };
        }
        Ok(())
    }

    pub(crate) fn set_leaf_value(&mut self, v: Var, k: usize, value: f64) {
        self.nodes[v.0].value.data_mut()[k] = value;
    }

    /// A fingerprint of all non-smooth decisions in the graph: max-aggregation
    /// winners and rectifier input signs.
    pub(crate) fn kink_signature(&self) -> Vec<u64> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::GroupMax { argmax, .. } => sig.extend(argmax.iter().map(|&a| a as u64)),
                Op::LeakyRelu(x, _) => {
                    sig.extend(self.value(*x).data().iter().map(|&v| u64::from(v > 0.0)))
                }
                _ => {}
            }
        }
        sig
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
