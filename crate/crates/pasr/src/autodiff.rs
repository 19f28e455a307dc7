//! Dense 2-D tensor arithmetic with reverse-mode automatic
//! differentiation.
//!
//! A [`Graph`] is a tape of eagerly evaluated nodes. Trainable
//! parameters live outside the graph in a [`ParamSet`]; a graph
//! references them through [`Graph::param`] (whole tensor) or
//! [`Graph::gather`] (embedding rows) and accumulates their gradients
//! into per-parameter buffers during [`Graph::backward`].
//!
//! Everything is 64-bit; every op checks its output for NaN/Inf.

use std::collections::HashMap;

use crate::error::{PasrError, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`]. Carries the shape for checking.
#[derive(Debug, Clone, Copy)]
pub struct Var {
    id: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param { pid: usize },
    Gather { pid: usize, ids: Vec<usize> },
    Add { a: usize, b: usize },
    AddRow { a: usize, row: usize },
    AddConst { a: usize },
    ConcatCols { parts: Vec<usize> },
    MatMul { a: usize, b: usize },
    MatMulBT { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Mul { a: usize, b: usize },
    MulConst { a: usize, c: Vec<f64> },
    Relu { a: usize },
    Softplus { a: usize },
    SoftmaxRows { a: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize },
    MeanRows { a: usize },
    SumAll { a: usize },
    RowwiseDot { a: usize, b: usize },
    Detach,
    ConcatRows { parts: Vec<usize> },
    GatherRows { a: usize, ids: Vec<usize> },
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    grad: Vec<f64>,
}

/// One named trainable tensor.
#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
}

/// Named collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<ParamTensor>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, value: Vec<f64>) -> usize {
        assert_eq!(value.len(), rows * cols, "param {name} size mismatch");
        assert!(!self.by_name.contains_key(name), "duplicate param {name}");
        let pid = self.params.len();
        self.by_name.insert(name.to_string(), pid);
        self.params.push(ParamTensor { name: name.to_string(), rows, cols, value });
        pid
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, pid: usize) -> &ParamTensor {
        &self.params[pid]
    }

    pub fn get_mut(&mut self, pid: usize) -> &mut ParamTensor {
        &mut self.params[pid]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &ParamTensor)> {
        self.params.iter().enumerate()
    }
}

/// Reverse-mode tape over a [`ParamSet`].
pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    /// Per-parameter gradient buffers, filled by `backward`.
    pub param_grads: Vec<Vec<f64>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        let param_grads = params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self { params, nodes: Vec::new(), param_grads }
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(PasrError::NonFinite(op_name(&op)));
        }
        let id = self.nodes.len();
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node { op, rows, cols, value, grad });
        Ok(Var { id, rows, cols })
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.id].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(v.rows * v.cols, 1);
        self.nodes[v.id].value[0]
    }

    /// Constant input tensor (no gradient).
    pub fn input(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        if value.len() != rows * cols {
            return Err(PasrError::ShapeMismatch(format!("input: {} values for {rows}x{cols}", value.len())));
        }
        self.push(Op::Input, rows, cols, value)
    }

    /// Whole parameter tensor as a node.
    pub fn param(&mut self, pid: usize) -> Result<Var> {
        let p = self.params.get(pid);
        self.push(Op::Param { pid }, p.rows, p.cols, p.value.clone())
    }

    /// Rows `ids` of a parameter table.
    pub fn gather(&mut self, pid: usize, ids: &[usize]) -> Result<Var> {
        let p = self.params.get(pid);
        let cols = p.cols;
        let mut value = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= p.rows {
                return Err(PasrError::Domain(format!("gather: row {i} out of {} in {}", p.rows, p.name)));
            }
            value.extend_from_slice(&p.value[i * cols..(i + 1) * cols]);
        }
        self.push(Op::Gather { pid, ids: ids.to_vec() }, ids.len(), cols, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.rows != b.rows || a.cols != b.cols {
            return Err(PasrError::ShapeMismatch(format!("add: {}x{} vs {}x{}", a.rows, a.cols, b.rows, b.cols)));
        }
        let value = zip_vals(&self.nodes[a.id].value, &self.nodes[b.id].value, |x, y| x + y);
        self.push(Op::Add { a: a.id, b: b.id }, a.rows, a.cols, value)
    }

    /// Matrix plus a broadcast 1 x cols row (bias add).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        if row.rows != 1 || row.cols != a.cols {
            return Err(PasrError::ShapeMismatch(format!("add_row: {}x{} + {}x{}", a.rows, a.cols, row.rows, row.cols)));
        }
        let rv = &self.nodes[row.id].value;
        let mut value = self.nodes[a.id].value.clone();
        for r in 0..a.rows {
            for c in 0..a.cols {
                value[r * a.cols + c] += rv[c];
            }
        }
        self.push(Op::AddRow { a: a.id, row: row.id }, a.rows, a.cols, value)
    }

    /// Add a constant matrix.
    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        if c.len() != a.rows * a.cols {
            return Err(PasrError::ShapeMismatch("add_const size".into()));
        }
        let value = zip_vals(&self.nodes[a.id].value, c, |x, y| x + y);
        self.push(Op::AddConst { a: a.id }, a.rows, a.cols, value)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(PasrError::EmptyInput("concat_cols"));
        }
        let rows = parts[0].rows;
        if parts.iter().any(|p| p.rows != rows) {
            return Err(PasrError::ShapeMismatch("concat_cols: row mismatch".into()));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut value = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let pv = &self.nodes[p.id].value;
                value.extend_from_slice(&pv[r * p.cols..(r + 1) * p.cols]);
            }
        }
        self.push(Op::ConcatCols { parts: parts.iter().map(|p| p.id).collect() }, rows, cols, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.rows {
            return Err(PasrError::ShapeMismatch(format!("matmul: {}x{} * {}x{}", a.rows, a.cols, b.rows, b.cols)));
        }
        let value = matmul_vals(&self.nodes[a.id].value, a.rows, a.cols, &self.nodes[b.id].value, b.cols, false);
        self.push(Op::MatMul { a: a.id, b: b.id }, a.rows, b.cols, value)
    }

    /// a * b^T, with b given as rows of the right factor's transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.cols {
            return Err(PasrError::ShapeMismatch(format!("matmul_bt: {}x{} * ({}x{})^T", a.rows, a.cols, b.rows, b.cols)));
        }
        let value = matmul_vals(&self.nodes[a.id].value, a.rows, a.cols, &self.nodes[b.id].value, b.rows, true);
        self.push(Op::MatMulBT { a: a.id, b: b.id }, a.rows, b.rows, value)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.nodes[a.id].value.iter().map(|v| v * c).collect();
        self.push(Op::Scale { a: a.id, c }, a.rows, a.cols, value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.rows != b.rows || a.cols != b.cols {
            return Err(PasrError::ShapeMismatch("mul".into()));
        }
        let value = zip_vals(&self.nodes[a.id].value, &self.nodes[b.id].value, |x, y| x * y);
        self.push(Op::Mul { a: a.id, b: b.id }, a.rows, a.cols, value)
    }

    /// Elementwise product with a constant matrix (masks, detached weights).
    pub fn mul_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        if c.len() != a.rows * a.cols {
            return Err(PasrError::ShapeMismatch("mul_const size".into()));
        }
        let value = zip_vals(&self.nodes[a.id].value, c, |x, y| x * y);
        self.push(Op::MulConst { a: a.id, c: c.to_vec() }, a.rows, a.cols, value)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.id].value.iter().map(|&v| v.max(0.0)).collect();
        self.push(Op::Relu { a: a.id }, a.rows, a.cols, value)
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.id].value.iter().map(|&v| softplus(v)).collect();
        self.push(Op::Softplus { a: a.id }, a.rows, a.cols, value)
    }

    /// Row softmax. When `allowed` is given, masked-out entries get
    /// probability zero and the softmax normalizes over the rest; this
    /// is the additive 0/-inf mask without materializing infinities.
    pub fn softmax_rows(&mut self, a: Var, allowed: Option<&[bool]>) -> Result<Var> {
        if let Some(m) = allowed {
            if m.len() != a.rows * a.cols {
                return Err(PasrError::ShapeMismatch("softmax mask size".into()));
            }
        }
        let av = &self.nodes[a.id].value;
        let mut value = vec![0.0; av.len()];
        for r in 0..a.rows {
            let slice = &av[r * a.cols..(r + 1) * a.cols];
            let row_allowed = allowed.map(|m| &m[r * a.cols..(r + 1) * a.cols]);
            let mut max = f64::NEG_INFINITY;
            for (i, &v) in slice.iter().enumerate() {
                if row_allowed.map_or(true, |m| m[i]) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(PasrError::Domain("softmax row with no allowed entries".into()));
            }
            let mut sum = 0.0;
            for (i, &v) in slice.iter().enumerate() {
                if row_allowed.map_or(true, |m| m[i]) {
                    let e = (v - max).exp();
                    value[r * a.cols + i] = e;
                    sum += e;
                }
            }
            for i in 0..a.cols {
                value[r * a.cols + i] /= sum;
            }
        }
        self.push(Op::SoftmaxRows { a: a.id }, a.rows, a.cols, value)
    }

    /// Per-row normalization with learned scale/shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        if gamma.rows != 1 || gamma.cols != x.cols || beta.rows != 1 || beta.cols != x.cols {
            return Err(PasrError::ShapeMismatch("layer_norm affine shapes".into()));
        }
        let xv = &self.nodes[x.id].value;
        let gv = self.nodes[gamma.id].value.clone();
        let bv = self.nodes[beta.id].value.clone();
        let c = x.cols as f64;
        let mut value = vec![0.0; xv.len()];
        for r in 0..x.rows {
            let row = &xv[r * x.cols..(r + 1) * x.cols];
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for i in 0..x.cols {
                value[r * x.cols + i] = gv[i] * (row[i] - mean) * inv_std + bv[i];
            }
        }
        self.push(Op::LayerNorm { x: x.id, gamma: gamma.id, beta: beta.id }, x.rows, x.cols, value)
    }

    /// Column means: rows x cols -> 1 x cols.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.id].value;
        let mut value = vec![0.0; a.cols];
        for r in 0..a.rows {
            for c in 0..a.cols {
                value[c] += av[r * a.cols + c];
            }
        }
        let n = a.rows as f64;
        value.iter_mut().for_each(|v| *v /= n);
        self.push(Op::MeanRows { a: a.id }, 1, a.cols, value)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.id].value.iter().sum();
        self.push(Op::SumAll { a: a.id }, 1, 1, vec![s])
    }

    /// Per-row dot product of two equally shaped matrices -> rows x 1.
    pub fn rowwise_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.rows != b.rows || a.cols != b.cols {
            return Err(PasrError::ShapeMismatch("rowwise_dot".into()));
        }
        let av = &self.nodes[a.id].value;
        let bv = &self.nodes[b.id].value;
        let value = (0..a.rows)
            .map(|r| {
                (0..a.cols).map(|c| av[r * a.cols + c] * bv[r * a.cols + c]).sum()
            })
            .collect();
        self.push(Op::RowwiseDot { a: a.id, b: b.id }, a.rows, 1, value)
    }

    /// Stack matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(PasrError::EmptyInput("concat_rows"));
        }
        let cols = parts[0].cols;
        if parts.iter().any(|p| p.cols != cols) {
            return Err(PasrError::ShapeMismatch("concat_rows: col mismatch".into()));
        }
        let rows: usize = parts.iter().map(|p| p.rows).sum();
        let mut value = Vec::with_capacity(rows * cols);
        for p in parts {
            value.extend_from_slice(&self.nodes[p.id].value);
        }
        self.push(Op::ConcatRows { parts: parts.iter().map(|p| p.id).collect() }, rows, cols, value)
    }

    /// Select rows of a node (duplicates allowed).
    pub fn gather_rows(&mut self, a: Var, ids: &[usize]) -> Result<Var> {
        let cols = a.cols;
        let mut value = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= a.rows {
                return Err(PasrError::Domain(format!("gather_rows: row {i} out of {}", a.rows)));
            }
            value.extend_from_slice(&self.nodes[a.id].value[i * cols..(i + 1) * cols]);
        }
        self.push(Op::GatherRows { a: a.id, ids: ids.to_vec() }, ids.len(), cols, value)
    }

    /// Value copy that blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.id].value.clone();
        self.push(Op::Detach, a.rows, a.cols, value)
    }

    /// Scaled dot-product attention with optional boolean key mask
    /// (true = attendable). softmax(q k^T / sqrt(d)) v.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, allowed: Option<&[bool]>) -> Result<Var> {
        if q.cols != k.cols || k.rows != v.rows {
            return Err(PasrError::ShapeMismatch(format!(
                "attention: q {}x{}, k {}x{}, v {}x{}",
                q.rows, q.cols, k.rows, k.cols, v.rows, v.cols
            )));
        }
        let logits = self.matmul_bt(q, k)?;
        let scaled = self.scale(logits, 1.0 / (q.cols as f64).sqrt())?;
        let probs = self.softmax_rows(scaled, allowed)?;
        self.matmul(probs, v)
    }

    /// Backpropagate from a scalar loss; gradients of parameters land
    /// in `param_grads` (accumulating across calls).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.rows * loss.cols != 1 {
            return Err(PasrError::Domain("backward: loss must be scalar".into()));
        }
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[loss.id].grad[0] = 1.0;
        for id in (0..=loss.id).rev() {
            let (rows, cols) = (self.nodes[id].rows, self.nodes[id].cols);
            let grad = std::mem::take(&mut self.nodes[id].grad);
            let op = self.nodes[id].op.clone();
            match op {
                Op::Input | Op::Detach => {}
                Op::Param { pid } => {
                    for (g, o) in self.param_grads[pid].iter_mut().zip(&grad) {
                        *g += o;
                    }
                }
                Op::Gather { pid, ref ids } => {
                    for (r, &row) in ids.iter().enumerate() {
                        for c in 0..cols {
                            self.param_grads[pid][row * cols + c] += grad[r * cols + c];
                        }
                    }
                }
                Op::Add { a, b } => {
                    add_into(&mut self.nodes[a].grad, &grad);
                    add_into(&mut self.nodes[b].grad, &grad);
                }
                Op::AddRow { a, row } => {
                    add_into(&mut self.nodes[a].grad, &grad);
                    for r in 0..rows {
                        for c in 0..cols {
                            self.nodes[row].grad[c] += grad[r * cols + c];
                        }
                    }
                }
                Op::AddConst { a } => add_into(&mut self.nodes[a].grad, &grad),
                Op::ConcatCols { ref parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.nodes[p].cols;
                        for r in 0..rows {
                            for c in 0..pc {
                                self.nodes[p].grad[r * pc + c] += grad[r * cols + offset + c];
                            }
                        }
                        offset += pc;
                    }
                }
                Op::MatMul { a, b } => {
                    // y = a b: da = g b^T, db = a^T g
                    let (ar, ac) = (self.nodes[a].rows, self.nodes[a].cols);
                    let bv = self.nodes[b].value.clone();
                    let av = self.nodes[a].value.clone();
                    let da = matmul_vals(&grad, rows, cols, &bv, ac, true);
                    add_into(&mut self.nodes[a].grad, &da);
                    // db[k][c] = sum_r a[r][k] g[r][c]
                    let mut db = vec![0.0; ac * cols];
                    for r in 0..ar {
                        for k in 0..ac {
                            let aval = av[r * ac + k];
                            if aval != 0.0 {
                                for c in 0..cols {
                                    db[k * cols + c] += aval * grad[r * cols + c];
                                }
                            }
                        }
                    }
                    add_into(&mut self.nodes[b].grad, &db);
                }
                Op::MatMulBT { a, b } => {
                    // y = a b^T (y: rows x b.rows): da = g b, db = g^T a
                    let ac = self.nodes[a].cols;
                    let bv = self.nodes[b].value.clone();
                    let av = self.nodes[a].value.clone();
                    let da = matmul_vals(&grad, rows, cols, &bv, ac, false);
                    add_into(&mut self.nodes[a].grad, &da);
                    let mut db = vec![0.0; cols * ac];
                    for r in 0..rows {
                        for c in 0..cols {
                            let g = grad[r * cols + c];
                            if g != 0.0 {
                                for k in 0..ac {
                                    db[c * ac + k] += g * av[r * ac + k];
                                }
                            }
                        }
                    }
                    add_into(&mut self.nodes[b].grad, &db);
                }
                Op::Scale { a, c } => {
                    let da: Vec<f64> = grad.iter().map(|g| g * c).collect();
                    add_into(&mut self.nodes[a].grad, &da);
                }
                Op::Mul { a, b } => {
                    let av = self.nodes[a].value.clone();
                    let bv = self.nodes[b].value.clone();
                    let da = zip_vals(&grad, &bv, |g, y| g * y);
                    let db = zip_vals(&grad, &av, |g, x| g * x);
                    add_into(&mut self.nodes[a].grad, &da);
                    add_into(&mut self.nodes[b].grad, &db);
                }
                Op::MulConst { a, ref c } => {
                    let da = zip_vals(&grad, c, |g, y| g * y);
                    add_into(&mut self.nodes[a].grad, &da);
                }
                Op::Relu { a } => {
                    let av = &self.nodes[a].value;
                    let da: Vec<f64> = grad.iter().zip(av).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                    add_into(&mut self.nodes[a].grad, &da);
                }
                Op::Softplus { a } => {
                    let av = &self.nodes[a].value;
                    let da: Vec<f64> = grad.iter().zip(av).map(|(g, &x)| g * sigmoid(x)).collect();
                    add_into(&mut self.nodes[a].grad, &da);
                }
                Op::SoftmaxRows { a, .. } => {
                    let p = &self.nodes[id].value;
                    let mut da = vec![0.0; grad.len()];
                    for r in 0..rows {
                        let base = r * cols;
                        let dot: f64 = (0..cols).map(|c| grad[base + c] * p[base + c]).sum();
                        for c in 0..cols {
                            da[base + c] = p[base + c] * (grad[base + c] - dot);
                        }
                    }
                    add_into(&mut self.nodes[a].grad, &da);
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let xv = self.nodes[x].value.clone();
                    let gv = self.nodes[gamma].value.clone();
                    let cf = cols as f64;
                    let mut dx = vec![0.0; xv.len()];
                    let mut dgamma = vec![0.0; cols];
                    let mut dbeta = vec![0.0; cols];
                    for r in 0..rows {
                        let row = &xv[r * cols..(r + 1) * cols];
                        let mean = row.iter().sum::<f64>() / cf;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cf;
                        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let g_row = &grad[r * cols..(r + 1) * cols];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for c in 0..cols {
                            let xhat = (row[c] - mean) * inv_std;
                            let dxhat = g_row[c] * gv[c];
                            dgamma[c] += g_row[c] * xhat;
                            dbeta[c] += g_row[c];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        for c in 0..cols {
                            let xhat = (row[c] - mean) * inv_std;
                            let dxhat = g_row[c] * gv[c];
                            dx[r * cols + c] = inv_std * (dxhat - sum_dxhat / cf - xhat * sum_dxhat_xhat / cf);
                        }
                    }
                    add_into(&mut self.nodes[x].grad, &dx);
                    add_into(&mut self.nodes[gamma].grad, &dgamma);
                    add_into(&mut self.nodes[beta].grad, &dbeta);
                }
                Op::MeanRows { a } => {
                    let ar = self.nodes[a].rows;
                    let n = ar as f64;
                    for r in 0..ar {
                        for c in 0..cols {
                            self.nodes[a].grad[r * cols + c] += grad[c] / n;
                        }
                    }
                }
                Op::SumAll { a } => {
                    let g = grad[0];
                    self.nodes[a].grad.iter_mut().for_each(|d| *d += g);
                }
                Op::ConcatRows { ref parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let pn = self.nodes[p].rows * cols;
                        let dst = &mut self.nodes[p].grad;
                        for i in 0..pn {
                            dst[i] += grad[offset + i];
                        }
                        offset += pn;
                    }
                }
                Op::GatherRows { a, ref ids } => {
                    for (r, &row) in ids.iter().enumerate() {
                        for c in 0..cols {
                            self.nodes[a].grad[row * cols + c] += grad[r * cols + c];
                        }
                    }
                }
                Op::RowwiseDot { a, b } => {
                    let ac = self.nodes[a].cols;
                    let av = self.nodes[a].value.clone();
                    let bv = self.nodes[b].value.clone();
                    for r in 0..rows {
                        let g = grad[r];
                        for c in 0..ac {
                            self.nodes[a].grad[r * ac + c] += g * bv[r * ac + c];
                            self.nodes[b].grad[r * ac + c] += g * av[r * ac + c];
                        }
                    }
                }
            }
            self.nodes[id].grad = grad;
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Param { .. } => "param",
        Op::Gather { .. } => "gather",
        Op::Add { .. } => "add",
        Op::AddRow { .. } => "add_row",
        Op::AddConst { .. } => "add_const",
        Op::ConcatCols { .. } => "concat_cols",
        Op::MatMul { .. } => "matmul",
        Op::MatMulBT { .. } => "matmul_bt",
        Op::Scale { .. } => "scale",
        Op::Mul { .. } => "mul",
        Op::MulConst { .. } => "mul_const",
        Op::Relu { .. } => "relu",
        Op::Softplus { .. } => "softplus",
        Op::SoftmaxRows { .. } => "softmax_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::MeanRows { .. } => "mean_rows",
        Op::SumAll { .. } => "sum_all",
        Op::RowwiseDot { .. } => "rowwise_dot",
        Op::Detach => "detach",
        Op::ConcatRows { .. } => "concat_rows",
        Op::GatherRows { .. } => "gather_rows",
    }
}

/// Adam with L2-folded weight decay (grad += wd * w before the moment
/// updates). beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
pub struct Adam {
    pub learning_rate: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(params: &ParamSet, learning_rate: f64, weight_decay: f64) -> Self {
        let m = params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        let v = params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self { learning_rate, weight_decay, step: 0, m, v }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>]) {
        self.step += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.step as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.step as i32);
        for pid in 0..params.len() {
            let p = params.get_mut(pid);
            for i in 0..p.value.len() {
                let g = grads[pid][i] + self.weight_decay * p.value[i];
                self.m[pid][i] = Self::BETA1 * self.m[pid][i] + (1.0 - Self::BETA1) * g;
                self.v[pid][i] = Self::BETA2 * self.v[pid][i] + (1.0 - Self::BETA2) * g * g;
                let mhat = self.m[pid][i] / bc1;
                let vhat = self.v[pid][i] / bc2;
                p.value[i] -= self.learning_rate * mhat / (vhat.sqrt() + Self::EPS);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn zip_vals(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// a (ar x ac) times b, where b is (ac x bc) row-major, or, when
/// `b_transposed`, b is stored as (bc x ac) and used as its transpose.
fn matmul_vals(a: &[f64], ar: usize, ac: usize, b: &[f64], bc: usize, b_transposed: bool) -> Vec<f64> {
    let mut out = vec![0.0; ar * bc];
    if b_transposed {
        for r in 0..ar {
            for c in 0..bc {
                let mut s = 0.0;
                for k in 0..ac {
                    s += a[r * ac + k] * b[c * ac + k];
                }
                out[r * bc + c] = s;
            }
        }
    } else {
        for r in 0..ar {
            for k in 0..ac {
                let av = a[r * ac + k];
                if av != 0.0 {
                    for c in 0..bc {
                        out[r * bc + c] += av * b[k * bc + c];
                    }
                }
            }
        }
    }
    out
}

/// Causal mask: row i may attend columns <= i. `true` = attendable.
pub fn causal_mask(n: usize) -> Vec<bool> {
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            m[i * n + j] = true;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_vals(rng: &mut StdRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Central finite differences of `f` w.r.t. every entry of param `pid`.
    fn fd_grad(ps: &ParamSet, pid: usize, f: &dyn Fn(&ParamSet) -> f64) -> Vec<f64> {
        let h = 1e-5;
        let mut ps = ps.clone();
        let n = ps.get(pid).value.len();
        let mut out = vec![0.0; n];
        for i in 0..n {
            let orig = ps.get(pid).value[i];
            ps.get_mut(pid).value[i] = orig + h;
            let up = f(&ps);
            ps.get_mut(pid).value[i] = orig - h;
            let down = f(&ps);
            ps.get_mut(pid).value[i] = orig;
            out[i] = (up - down) / (2.0 * h);
        }
        out
    }

    fn assert_grads_close(analytic: &[f64], numeric: &[f64]) {
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let denom = a.abs().max(n.abs()).max(1e-6);
            assert!((a - n).abs() / denom < 1e-4, "grad[{i}]: analytic {a} vs fd {n}");
        }
    }

    #[test]
    fn linear_and_quadratic_grads() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", 2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]);
        // loss = sum(w) -> grad all ones
        let mut g = Graph::new(&ps);
        let wv = g.param(w).unwrap();
        let loss = g.sum_all(wv).unwrap();
        g.backward(loss).unwrap();
        assert!(g.param_grads[w].iter().all(|&v| v == 1.0));
        // loss = ||w||^2 / 2 -> grad w
        let mut g = Graph::new(&ps);
        let wv = g.param(w).unwrap();
        let sq = g.mul(wv, wv).unwrap();
        let half = g.scale(sq, 0.5).unwrap();
        let loss = g.sum_all(half).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.param_grads[w], ps.get(w).value);
    }

    #[test]
    fn non_scalar_backward_is_error() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", 2, 2, vec![1.0; 4]);
        let mut g = Graph::new(&ps);
        let wv = g.param(w).unwrap();
        assert!(g.backward(wv).is_err());
    }

    #[test]
    fn attention_single_key_identity() {
        let ps = ParamSet::new();
        let mut g = Graph::new(&ps);
        let r = g.input(1, 4, vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let out = g.attention(r, r, r, None).unwrap();
        assert_eq!(g.value(out), g.value(r));
    }

    #[test]
    fn attention_identical_values_convex() {
        let ps = ParamSet::new();
        let mut g = Graph::new(&ps);
        let v = vec![1.0, 2.0, 3.0];
        let keys = g.input(2, 3, [v.clone(), v.clone()].concat()).unwrap();
        let q = g.input(1, 3, vec![0.4, -0.1, 0.9]).unwrap();
        let out = g.attention(q, keys, keys, None).unwrap();
        for (o, e) in g.value(out).iter().zip(&v) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_straightline_oracle() {
        let mut rng = StdRng::seed_from_u64(7);
        let (n, d) = (4, 8);
        let qv = rand_vals(&mut rng, n * d);
        let kv = rand_vals(&mut rng, n * d);
        let vv = rand_vals(&mut rng, n * d);
        // straight-line dense evaluation, no graph machinery
        let mut expect = vec![0.0; n * d];
        for i in 0..n {
            let mut logits = vec![0.0; n];
            for j in 0..n {
                logits[j] = (0..d).map(|k| qv[i * d + k] * kv[j * d + k]).sum::<f64>() / (d as f64).sqrt();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..n {
                for k in 0..d {
                    expect[i * d + k] += exps[j] / sum * vv[j * d + k];
                }
            }
        }
        let ps = ParamSet::new();
        let mut g = Graph::new(&ps);
        let q = g.input(n, d, qv).unwrap();
        let k = g.input(n, d, kv).unwrap();
        let v = g.input(n, d, vv).unwrap();
        let out = g.attention(q, k, v, None).unwrap();
        for (a, e) in g.value(out).iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_stochastic() {
        let mut rng = StdRng::seed_from_u64(3);
        let ps = ParamSet::new();
        let mut g = Graph::new(&ps);
        let x = g.input(6, 6, rand_vals(&mut rng, 36)).unwrap();
        let mask = causal_mask(6);
        let p = g.softmax_rows(x, Some(&mask)).unwrap();
        let pv = g.value(p);
        for r in 0..6 {
            let sum: f64 = pv[r * 6..(r + 1) * 6].iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            for c in r + 1..6 {
                assert_eq!(pv[r * 6 + c], 0.0);
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut ps = ParamSet::new();
        let gamma = ps.add("g", 1, 2, vec![1.0, 1.0]);
        let beta = ps.add("b", 1, 2, vec![0.0, 0.0]);
        let mut g = Graph::new(&ps);
        let x = g.input(1, 2, vec![3.0, 3.0]).unwrap();
        let gm = g.param(gamma).unwrap();
        let bt = g.param(beta).unwrap();
        let y = g.layer_norm(x, gm, bt).unwrap();
        assert!(g.value(y).iter().all(|&v| v.abs() < 1e-9));

        let mut g = Graph::new(&ps);
        let x = g.input(1, 2, vec![1.0, -1.0]).unwrap();
        let gm = g.param(gamma).unwrap();
        let bt = g.param(beta).unwrap();
        let y = g.layer_norm(x, gm, bt).unwrap();
        let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((g.value(y)[0] - expect).abs() < 1e-12);
        assert!((g.value(y)[1] + expect).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_row_statistics() {
        let mut rng = StdRng::seed_from_u64(11);
        let mut ps = ParamSet::new();
        let gamma = ps.add("g", 1, 50, vec![1.0; 50]);
        let beta = ps.add("b", 1, 50, vec![0.0; 50]);
        let mut g = Graph::new(&ps);
        let x = g.input(5, 50, rand_vals(&mut rng, 250)).unwrap();
        let gm = g.param(gamma).unwrap();
        let bt = g.param(beta).unwrap();
        let y = g.layer_norm(x, gm, bt).unwrap();
        let yv = g.value(y);
        for r in 0..5 {
            let row = &yv[r * 50..(r + 1) * 50];
            let mean = row.iter().sum::<f64>() / 50.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 50.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn ffn_formula_cases() {
        // zero weights -> constant bias; identity weights on nonneg input -> identity
        let mut rng = StdRng::seed_from_u64(5);
        let mut ps = ParamSet::new();
        let d = 4;
        let w1 = ps.add("w1", d, d, vec![0.0; d * d]);
        let b1 = ps.add("b1", 1, d, vec![0.0; d]);
        let w2 = ps.add("w2", d, d, vec![0.0; d * d]);
        let b2 = ps.add("b2", 1, d, vec![0.7; d]);
        let mut g = Graph::new(&ps);
        let x = g.input(3, d, rand_vals(&mut rng, 3 * d)).unwrap();
        let y = ffn(&mut g, x, w1, b1, w2, b2).unwrap();
        assert!(g.value(y).iter().all(|&v| (v - 0.7).abs() < 1e-12));

        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        let mut ps = ParamSet::new();
        let w1 = ps.add("w1", d, d, eye.clone());
        let b1 = ps.add("b1", 1, d, vec![0.0; d]);
        let w2 = ps.add("w2", d, d, eye);
        let b2 = ps.add("b2", 1, d, vec![0.0; d]);
        let mut g = Graph::new(&ps);
        let xv: Vec<f64> = (0..3 * d).map(|i| i as f64 * 0.1).collect();
        let x = g.input(3, d, xv.clone()).unwrap();
        let y = ffn(&mut g, x, w1, b1, w2, b2).unwrap();
        for (a, e) in g.value(y).iter().zip(&xv) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn ffn_matches_straightline_oracle() {
        let mut rng = StdRng::seed_from_u64(13);
        let (rows, d, dh) = (6, 8, 16);
        let mut ps = ParamSet::new();
        let w1 = ps.add("w1", d, dh, rand_vals(&mut rng, d * dh));
        let b1 = ps.add("b1", 1, dh, rand_vals(&mut rng, dh));
        let w2 = ps.add("w2", dh, d, rand_vals(&mut rng, dh * d));
        let b2 = ps.add("b2", 1, d, rand_vals(&mut rng, d));
        let xv = rand_vals(&mut rng, rows * d);
        // independent dense evaluation
        let mut hidden = vec![0.0; rows * dh];
        for r in 0..rows {
            for h in 0..dh {
                let mut s = ps.get(b1).value[h];
                for k in 0..d {
                    s += xv[r * d + k] * ps.get(w1).value[k * dh + h];
                }
                hidden[r * dh + h] = s.max(0.0);
            }
        }
        let mut expect = vec![0.0; rows * d];
        for r in 0..rows {
            for c in 0..d {
                let mut s = ps.get(b2).value[c];
                for h in 0..dh {
                    s += hidden[r * dh + h] * ps.get(w2).value[h * d + c];
                }
                expect[r * d + c] = s;
            }
        }
        let mut g = Graph::new(&ps);
        let x = g.input(rows, d, xv).unwrap();
        let y = ffn(&mut g, x, w1, b1, w2, b2).unwrap();
        for (a, e) in g.value(y).iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    /// FFN block as the model uses it: max(0, x W1 + b1) W2 + b2.
    fn ffn(g: &mut Graph, x: Var, w1: usize, b1: usize, w2: usize, b2: usize) -> Result<Var> {
        let w1 = g.param(w1)?;
        let b1 = g.param(b1)?;
        let w2 = g.param(w2)?;
        let b2 = g.param(b2)?;
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h)?;
        let o = g.matmul(h, w2)?;
        g.add_row(o, b2)
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        // attention + layernorm + ffn + softplus chained; checks every op's backward
        let mut rng = StdRng::seed_from_u64(23);
        let (n, d) = (5, 6);
        let mut ps = ParamSet::new();
        let wq = ps.add("wq", d, d, rand_vals(&mut rng, d * d));
        let wk = ps.add("wk", d, d, rand_vals(&mut rng, d * d));
        let wv = ps.add("wv", d, d, rand_vals(&mut rng, d * d));
        let gamma = ps.add("gamma", 1, d, rand_vals(&mut rng, d));
        let beta = ps.add("beta", 1, d, rand_vals(&mut rng, d));
        let table = ps.add("table", 8, d, rand_vals(&mut rng, 8 * d));
        let ids = vec![1usize, 3, 3, 0, 7];
        let mask = causal_mask(n);
        let loss_fn = |ps: &ParamSet| -> f64 {
            let mut g = Graph::new(ps);
            let x = g.gather(table, &ids).unwrap();
            let q = g.param(wq).unwrap();
            let k = g.param(wk).unwrap();
            let v = g.param(wv).unwrap();
            let qx = g.matmul(x, q).unwrap();
            let kx = g.matmul(x, k).unwrap();
            let vx = g.matmul(x, v).unwrap();
            let at = g.attention(qx, kx, vx, Some(&mask)).unwrap();
            let res = g.add(x, at).unwrap();
            let gm = g.param(gamma).unwrap();
            let bt = g.param(beta).unwrap();
            let ln = g.layer_norm(res, gm, bt).unwrap();
            let sp = g.softplus(ln).unwrap();
            let pooled = g.mean_rows(sp).unwrap();
            let dotted = g.rowwise_dot(pooled, pooled).unwrap();
            let loss = g.sum_all(dotted).unwrap();
            g.scalar(loss)
        };
        let mut g = Graph::new(&ps);
        let x = g.gather(table, &ids).unwrap();
        let q = g.param(wq).unwrap();
        let k = g.param(wk).unwrap();
        let v = g.param(wv).unwrap();
        let qx = g.matmul(x, q).unwrap();
        let kx = g.matmul(x, k).unwrap();
        let vx = g.matmul(x, v).unwrap();
        let at = g.attention(qx, kx, vx, Some(&mask)).unwrap();
        let res = g.add(x, at).unwrap();
        let gm = g.param(gamma).unwrap();
        let bt = g.param(beta).unwrap();
        let ln = g.layer_norm(res, gm, bt).unwrap();
        let sp = g.softplus(ln).unwrap();
        let pooled = g.mean_rows(sp).unwrap();
        let dotted = g.rowwise_dot(pooled, pooled).unwrap();
        let loss = g.sum_all(dotted).unwrap();
        g.backward(loss).unwrap();
        for pid in [wq, wk, wv, gamma, beta, table] {
            let numeric = fd_grad(&ps, pid, &loss_fn);
            assert_grads_close(&g.param_grads[pid], &numeric);
        }
    }

    #[test]
    fn causal_mask_blocks_future() {
        let mut rng = StdRng::seed_from_u64(31);
        let (n, d) = (6, 4);
        let base = rand_vals(&mut rng, n * d);
        let mask = causal_mask(n);
        let run = |vals: &[f64]| -> Vec<f64> {
            let ps = ParamSet::new();
            let mut g = Graph::new(&ps);
            let x = g.input(n, d, vals.to_vec()).unwrap();
            let y = g.attention(x, x, x, Some(&mask)).unwrap();
            g.value(y).to_vec()
        };
        let out1 = run(&base);
        let mut perturbed = base.clone();
        for c in 0..d {
            perturbed[4 * d + c] += 10.0; // change row 4
        }
        let out2 = run(&perturbed);
        for r in 0..4 {
            for c in 0..d {
                assert_eq!(out1[r * d + c], out2[r * d + c], "row {r} changed");
            }
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", 1, 3, vec![1.0, 2.0, 3.0]);
        let mut g = Graph::new(&ps);
        let wv = g.param(w).unwrap();
        let d = g.detach(wv).unwrap();
        let prod = g.mul(wv, d).unwrap();
        let loss = g.sum_all(prod).unwrap();
        g.backward(loss).unwrap();
        // d(w * stopgrad(w))/dw = stopgrad(w), not 2w
        assert_eq!(g.param_grads[w], ps.get(w).value);
    }
}
