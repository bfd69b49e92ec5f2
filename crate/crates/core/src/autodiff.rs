//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation appends a
//! node holding its forward value and a record of its parents, so creation
//! order is already a topological order and [`Graph::backward`] simply walks
//! the arena in reverse. [`Graph::detach`] produces a node carrying the
//! stop-gradient flag: its forward value is a copy of the input and nothing
//! flows back through it.
//!
//! Broadcasting is limited to scalar scaling ([`Graph::scale`]) and the
//! explicit row-bias add ([`Graph::add_bias`]); any other shape disagreement
//! is an error.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("{op}: axis {axis} invalid for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("backward needs a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("buffer of length {len} does not fit shape {shape:?}")]
    BufferLength { shape: Vec<usize>, len: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(AutodiffError::BufferLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a 2-D tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `r` of a 2-D tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    AddBias(Var, Var),
    GatherRows(Var, Vec<usize>),
    Take(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    Tanh(Var),
    Log(Var),
    Exp(Var),
    ClampMin(Var, f64),
    LogSoftmax(Var, usize),
    Detach,
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    stop: bool,
}

/// Computation graph for one forward/backward pass.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            stop: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf (parameter or input) node.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Scalar value of a single-element node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn is_stopped(&self, v: Var) -> bool {
        self.nodes[v.0].stop
    }

    /// Gradient accumulated by the last [`Graph::backward`]; zeros when the
    /// node was not reached.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor {
                shape: node.value.shape.clone(),
                data: g.clone(),
            },
            None => Tensor::zeros(node.value.shape.clone()),
        }
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref other => Err(AutodiffError::ShapeMismatch {
                op,
                lhs: other.to_vec(),
                rhs: vec![0, 0],
            }),
        }
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let shape = va.shape.clone();
        self.push(Tensor { shape, data }, op)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = &self.nodes[a.0].value;
        let data = va.data.iter().map(|&x| f(x)).collect();
        let shape = va.shape.clone();
        self.push(Tensor { shape, data }, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.map(a, |x| x * factor, Op::Scale(a, factor))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let va = &self.nodes[a.0].value.data;
        let vb = &self.nodes[b.0].value.data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = va[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let row = &vb[p * n..(p + 1) * n];
                for (o, &y) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                    *o += x * y;
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
        ))
    }

    /// Adds a `[1, n]` (or `[n]`) bias to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("add_bias", x)?;
        let bias_shape = self.shape(bias).to_vec();
        if bias_shape.iter().product::<usize>() != n || bias_shape.last() != Some(&n) {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_bias",
                lhs: vec![m, n],
                rhs: bias_shape,
            });
        }
        let vb = self.nodes[bias.0].value.data.clone();
        let vx = &self.nodes[x.0].value.data;
        let data = vx
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb[i % n])
            .collect();
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::AddBias(x, bias),
        ))
    }

    fn gather(&mut self, op: &'static str, table: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims(op, table)?;
        let vt = &self.nodes[table.0].value.data;
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(AutodiffError::IndexOutOfRange {
                    op,
                    index: i,
                    bound: r,
                });
            }
            data.extend_from_slice(&vt[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            Tensor {
                shape: vec![rows.len(), c],
                data,
            },
            Op::GatherRows(table, rows.to_vec()),
        ))
    }

    /// Reads rows `ids` of an embedding table `[vocab, d]` into `[ids.len(), d]`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather("embedding_lookup", table, ids)
    }

    /// Selects rows of a matrix (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.gather("gather_rows", x, rows)
    }

    /// Picks elements by flat row-major index into a vector of `idx.len()`.
    pub fn take(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = &self.nodes[x.0].value.data;
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            let v = *vx.get(i).ok_or(AutodiffError::IndexOutOfRange {
                op: "take",
                index: i,
                bound: vx.len(),
            })?;
            data.push(v);
        }
        Ok(self.push(Tensor::vector(data), Op::Take(x, idx.to_vec())))
    }

    /// Column means of an `[n, d]` matrix, shaped `[1, d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.matrix_dims("mean_rows", x)?;
        if n == 0 {
            return Err(AutodiffError::IndexOutOfRange {
                op: "mean_rows",
                index: 0,
                bound: 0,
            });
        }
        let vx = &self.nodes[x.0].value.data;
        let mut out = vec![0.0; d];
        for row in vx.chunks(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        Ok(self.push(
            Tensor {
                shape: vec![1, d],
                data: out,
            },
            Op::MeanRows(x),
        ))
    }

    /// Sum of all elements, shaped `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.nodes[x.0].value.data.iter().any(|&v| v.is_nan() || v < 0.0) {
            return Err(AutodiffError::NonFinite { op: "log" });
        }
        Ok(self.map(x, f64::ln, Op::Log(x)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp(x))
    }

    /// `max(x, floor)` elementwise; the gradient is zero where the floor binds.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.map(x, |v| v.max(floor), Op::ClampMin(x, floor))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let len = self.nodes[x.0].value.len();
        if shape.iter().product::<usize>() != len {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let data = self.nodes[x.0].value.data.clone();
        Ok(self.push(Tensor { shape, data }, Op::Reshape(x)))
    }

    /// Identity on values; gradients are not propagated to `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        let v = self.push(value, Op::Detach);
        self.nodes[v.0].stop = true;
        v
    }

    /// Log-softmax along `axis`, stabilized by max subtraction.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = &self.nodes[x.0].value;
        let rank = value.shape.len();
        if axis >= rank {
            return Err(AutodiffError::InvalidAxis {
                op: "log_softmax",
                axis,
                rank,
            });
        }
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: "log_softmax" });
        }
        let (outer, len, inner) = axis_layout(&value.shape, axis);
        let mut out = value.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let max = (0..len)
                    .map(|k| out[at(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|k| (out[at(k)] - max).exp()).sum::<f64>().ln();
                for k in 0..len {
                    out[at(k)] -= lse;
                }
            }
        }
        let shape = value.shape.clone();
        Ok(self.push(Tensor { shape, data: out }, Op::LogSoftmax(x, axis)))
    }

    fn accumulate(&mut self, v: Var, contribution: &[f64]) {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contribution) {
                    *a += b;
                }
            }
            None => node.grad = Some(contribution.to_vec()),
        }
    }

    /// Back-propagates from a scalar root, accumulating into every reachable
    /// node's gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.shape(root).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NonScalarRoot { shape });
        }
        self.accumulate(root, &[1.0]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if node.stop {
                continue;
            }
            let Some(g) = node.grad.clone() else { continue };
            let op = node.op.clone();
            self.propagate(Var(idx), &op, &g);
        }
        Ok(())
    }

    fn propagate(&mut self, out: Var, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[b.0].value.data)
                    .map(|(g, y)| g * y)
                    .collect();
                let gb: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[a.0].value.data)
                    .map(|(g, x)| g * x)
                    .collect();
                self.accumulate(a, &ga);
                self.accumulate(b, &gb);
            }
            Op::Scale(a, f) => {
                let ga: Vec<f64> = g.iter().map(|v| v * f).collect();
                self.accumulate(a, &ga);
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let va = &self.nodes[a.0].value.data;
                let vb = &self.nodes[b.0].value.data;
                // dA = G · Bᵀ, dB = Aᵀ · G
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &vb[p * n..(p + 1) * n];
                        ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        let x = va[i * k + p];
                        if x != 0.0 {
                            for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += x * gv;
                            }
                        }
                    }
                }
                self.accumulate(a, &ga);
                self.accumulate(b, &gb);
            }
            Op::AddBias(x, bias) => {
                let n = self.shape(x)[1];
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                self.accumulate(x, g);
                self.accumulate(bias, &gb);
            }
            Op::GatherRows(table, ref rows) => {
                let c = self.shape(table)[1];
                let node = &mut self.nodes[table.0];
                let len = node.value.len();
                let grad = node.grad.get_or_insert_with(|| vec![0.0; len]);
                for (r, &i) in rows.iter().enumerate() {
                    for (o, v) in grad[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                        *o += v;
                    }
                }
            }
            Op::Take(x, ref idx) => {
                let node = &mut self.nodes[x.0];
                let len = node.value.len();
                let grad = node.grad.get_or_insert_with(|| vec![0.0; len]);
                for (&i, v) in idx.iter().zip(g) {
                    grad[i] += v;
                }
            }
            Op::MeanRows(x) => {
                let (n, d) = (self.shape(x)[0], self.shape(x)[1]);
                let mut gx = Vec::with_capacity(n * d);
                for _ in 0..n {
                    gx.extend(g.iter().map(|v| v / n as f64));
                }
                self.accumulate(x, &gx);
            }
            Op::Sum(x) => {
                let gx = vec![g[0]; self.nodes[x.0].value.len()];
                self.accumulate(x, &gx);
            }
            Op::Tanh(x) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[out.0].value.data)
                    .map(|(g, t)| g * (1.0 - t * t))
                    .collect();
                self.accumulate(x, &gx);
            }
            Op::Log(x) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x.0].value.data)
                    .map(|(g, v)| g / v)
                    .collect();
                self.accumulate(x, &gx);
            }
            Op::Exp(x) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[out.0].value.data)
                    .map(|(g, e)| g * e)
                    .collect();
                self.accumulate(x, &gx);
            }
            Op::ClampMin(x, floor) => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x.0].value.data)
                    .map(|(g, &v)| if v > floor { *g } else { 0.0 })
                    .collect();
                self.accumulate(x, &gx);
            }
            Op::LogSoftmax(x, axis) => {
                let y = &self.nodes[out.0].value;
                let (outer, len, inner) = axis_layout(&y.shape, axis);
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let gsum: f64 = (0..len).map(|k| g[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] = g[at(k)] - y.data[at(k)].exp() * gsum;
                        }
                    }
                }
                self.accumulate(x, &gx);
            }
            Op::Detach => {}
            Op::Reshape(x) => self.accumulate(x, g),
        }
    }
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Maximum relative disagreement between analytic gradients and central
/// finite differences, over every element of every parameter.
///
/// The relative error of one element is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(params: &[Tensor], step: f64, loss_fn: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
        let loss = loss_fn(&mut g, &vars)?;
        g.backward(loss)?;
        vars.iter().map(|&v| g.grad(v)).collect::<Vec<_>>()
    };
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone())).collect();
        let loss = loss_fn(&mut g, &vars)?;
        Ok(g.scalar_value(loss))
    };
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        for ei in 0..work[pi].len() {
            let orig = work[pi].data[ei];
            work[pi].data[ei] = orig + step;
            let plus = eval(&work)?;
            work[pi].data[ei] = orig - step;
            let minus = eval(&work)?;
            work[pi].data[ei] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data[ei];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = g.leaf(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 1]);
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_inner_dim_mismatch_names_op() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3]));
        let b = g.leaf(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(matches!(err, AutodiffError::ShapeMismatch { op: "matmul", .. }));
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn embedding_lookup_reads_row() {
        let mut g = Graph::new();
        let e = g.leaf(Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 3.0]]).unwrap());
        let r = g.embedding_lookup(e, &[0]).unwrap();
        assert_eq!(g.value(r).data(), &[0.5, -1.0]);
        assert_eq!(g.value(r).shape(), &[1, 2]);
        assert!(matches!(
            g.embedding_lookup(e, &[2]),
            Err(AutodiffError::IndexOutOfRange { index: 2, bound: 2, .. })
        ));
    }

    #[test]
    fn mean_rows_column_means() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_rows(&[vec![2.0, 4.0], vec![6.0, 8.0]]).unwrap());
        let m = g.mean_rows(x).unwrap();
        assert_eq!(g.value(m).data(), &[4.0, 6.0]);
    }

    #[test]
    fn log_softmax_cases() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.0, 0.0]));
        let y = g.log_softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!(close(v, -std::f64::consts::LN_2, 1e-15));
        }

        let x = g.leaf(Tensor::vector(vec![1000.0, 0.0]));
        let y = g.log_softmax(x, 0).unwrap();
        assert!(g.value(y).is_finite());
        assert!(close(g.value(y).data()[0], 0.0, 1e-12));
        assert!(close(g.value(y).data()[1], -1000.0, 1e-9));

        let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = g.log_softmax(x, 0).unwrap();
        // direct summation oracle
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, &v) in g.value(y).data().iter().enumerate() {
            assert!(close(v, (i as f64 + 1.0) - z.ln(), 1e-12));
        }
        let total: f64 = g.value(y).data().iter().map(|v| v.exp()).sum();
        assert!(close(total, 1.0, 1e-9));
    }

    #[test]
    fn log_softmax_rejects_non_finite_and_bad_axis() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![f64::NAN, 0.0]));
        assert!(matches!(
            g.log_softmax(x, 0),
            Err(AutodiffError::NonFinite { .. })
        ));
        let x = g.leaf(Tensor::vector(vec![f64::INFINITY, 0.0]));
        assert!(g.log_softmax(x, 0).is_err());
        let x = g.leaf(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(
            g.log_softmax(x, 1),
            Err(AutodiffError::InvalidAxis { .. })
        ));
    }

    #[test]
    fn log_softmax_per_axis_on_matrix() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 5.0]]).unwrap());
        for axis in 0..2 {
            let y = g.log_softmax(x, axis).unwrap();
            let v = g.value(y).data().to_vec();
            let sums = if axis == 0 {
                vec![v[0].exp() + v[2].exp(), v[1].exp() + v[3].exp()]
            } else {
                vec![v[0].exp() + v[1].exp(), v[2].exp() + v[3].exp()]
            };
            for s in sums {
                assert!(close(s, 1.0, 1e-12));
            }
        }
    }

    #[test]
    fn detach_is_identity_forward_and_blocks_backward() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.5, -2.0, 0.25]));
        let d = g.detach(x);
        assert_eq!(g.value(d), g.value(x));
        let s = g.sum(d);
        g.backward(s).unwrap();
        assert!(g.grad(x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn detach_product_gradient_is_detached_branch() {
        // loss = sum(x * detach(x)) → d/dx = detach(x) = x
        let x0 = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let d = g.detach(x);
        let p = g.mul(x, d).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), x0.data());
        // finite-difference oracle: perturbing x also perturbs the detached
        // copy's value, so compare against the stop-gradient semantics
        // instead: f(x + h e_i) with the detached factor held at x0.
        let h = 1e-5;
        for i in 0..3 {
            let f = |delta: f64| {
                (0..3)
                    .map(|j| {
                        let xj = x0.data()[j] + if j == i { delta } else { 0.0 };
                        xj * x0.data()[j]
                    })
                    .sum::<f64>()
            };
            let numeric = (f(h) - f(-h)) / (2.0 * h);
            assert!(close(numeric, g.grad(x).data()[i], 1e-8));
        }
    }

    #[test]
    fn backward_simple_cases() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            g.backward(x),
            Err(AutodiffError::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![3.0]));
        let a = g.scale(x, 2.0);
        let b = g.scale(x, 5.0);
        let c = g.add(a, b).unwrap();
        g.backward(c).unwrap();
        assert_eq!(g.grad(x).data(), &[7.0]);
        g.zero_grad();
        assert_eq!(g.grad(x).data(), &[0.0]);
    }

    #[test]
    fn grad_check_quadratic_is_exact() {
        let p = vec![Tensor::vector(vec![0.7, -1.3, 2.2])];
        let err = grad_check(&p, 1e-5, |g, v| {
            let sq = g.mul(v[0], v[0])?;
            let s3 = g.scale(sq, 3.0);
            Ok(g.sum(s3))
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn grad_check_detached_only_loss_is_zero_both_ways() {
        // the loss reads only detached constants, never the parameter
        let p = vec![Tensor::vector(vec![0.7, -1.3])];
        let constant = Tensor::vector(vec![0.2, 0.9]);
        let loss = |g: &mut Graph, _v: &[Var]| -> Result<Var> {
            let c = g.leaf(constant.clone());
            let d = g.detach(c);
            let e = g.exp(d);
            Ok(g.sum(e))
        };
        let mut g = Graph::new();
        let x = g.leaf(p[0].clone());
        let l = loss(&mut g, &[x]).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(x).data().iter().all(|&v| v == 0.0));
        assert_eq!(grad_check(&p, 1e-5, loss).unwrap(), 0.0);
    }
}

#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    fn matrix() -> impl Strategy<Value = Tensor> {
        (1usize..4, 1usize..5).prop_flat_map(|(r, c)| {
            prop::collection::vec(-3.0f64..3.0, r * c).prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn detach_is_a_bitwise_identity(t in matrix()) {
            let mut g = Graph::new();
            let x = g.leaf(t.clone());
            let y = g.tanh(x);
            let d = g.detach(y);
            let bits = |v: &Tensor| v.data().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(g.value(d)), bits(g.value(y)));
            prop_assert_eq!(g.shape(d), g.shape(y));
        }

        #[test]
        fn log_softmax_normalizes_along_its_axis(t in matrix(), axis in 0usize..2) {
            let mut g = Graph::new();
            let x = g.leaf(t.clone());
            let y = g.log_softmax(x, axis).unwrap();
            let (r, c) = (t.shape()[0], t.shape()[1]);
            let v = g.value(y).data();
            let sums: Vec<f64> = if axis == 0 {
                (0..c).map(|j| (0..r).map(|i| v[i * c + j].exp()).sum()).collect()
            } else {
                (0..r).map(|i| (0..c).map(|j| v[i * c + j].exp()).sum()).collect()
            };
            for s in sums {
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn stop_flag_shields_every_ancestor(t in matrix(), scale in -2.0f64..2.0) {
            let shielded = {
                let mut g = Graph::new();
                let x = g.leaf(t.clone());
                let a = g.exp(x);
                let d = g.detach(a);
                let dd = g.mul(d, d).unwrap();
                let side = g.sum(dd);
                let side = g.scale(side, scale);
                let t1 = g.tanh(x);
                let main = g.sum(t1);
                let root = g.add(main, side).unwrap();
                g.backward(root).unwrap();
                prop_assert!(g.grad(a).data().iter().all(|&v| v == 0.0));
                g.grad(x)
            };
            let mut g = Graph::new();
            let x = g.leaf(t);
            let t1 = g.tanh(x);
            let main = g.sum(t1);
            g.backward(main).unwrap();
            let plain = g.grad(x);
            prop_assert_eq!(shielded.data(), plain.data());
        }
    }
}
