use std::sync::Arc;

use super::matrix::{gemm_nt, gemm_tn};
use super::{Matrix, NormAdj, ParamId, ParamStore};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Propagate(Arc<NormAdj>, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxCols(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    MaxPoolRows {
        x: Var,
        argmax: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRow(Var, usize),
    PoolMean {
        x: Var,
        assign: Arc<Vec<usize>>,
        counts: Vec<usize>,
    },
    Unpool {
        x: Var,
        assign: Arc<Vec<usize>>,
    },
    Sum(Var),
    PointLoss {
        x: Var,
        dldx: Vec<f64>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(a: &Matrix, b: &Matrix, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn row_broadcast(a: &Matrix, r: &Matrix, what: &str) -> Result<()> {
    if r.rows() != 1 || r.cols() != a.cols() {
        return Err(Error::dim(format!(
            "{what}: row {:?} against {:?}",
            r.shape(),
            a.shape()
        )));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Constant)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `Â · H` for a normalized adjacency.
    pub fn propagate(&mut self, adj: &Arc<NormAdj>, h: Var) -> Result<Var> {
        let v = adj.propagate(self.value(h))?;
        Ok(self.push(v, Op::Propagate(Arc::clone(adj), h)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "add")?;
        let mut v = x.clone();
        v.add_assign(y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Adds a `1 x C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        row_broadcast(x, r, "add_row")?;
        let mut v = x.clone();
        for i in 0..v.rows() {
            for (o, b) in v.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    /// Multiplies every row of `a` elementwise by a `1 x C` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        row_broadcast(x, r, "mul_row")?;
        let mut v = x.clone();
        for i in 0..v.rows() {
            for (o, b) in v.row_mut(i).iter_mut().zip(r.data()) {
                *o *= b;
            }
        }
        Ok(self.push(v, Op::MulRow(a, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "mul")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let v = Matrix::new(x.rows(), x.cols(), data)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// Softmax down each column.
    pub fn softmax_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.shape();
        let mut v = Matrix::zeros(r, c);
        for j in 0..c {
            let m = (0..r).map(|i| x.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in 0..r {
                let e = (x.get(i, j) - m).exp();
                v.set(i, j, e);
                z += e;
            }
            for i in 0..r {
                v.set(i, j, v.get(i, j) / z);
            }
        }
        self.push(v, Op::SoftmaxCols(a))
    }

    /// Training-mode batch norm with statistics over rows (nodes). Returns
    /// the output and the biased batch statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let xm = self.value(x);
        row_broadcast(xm, self.value(gamma), "batch_norm gamma")?;
        row_broadcast(xm, self.value(beta), "batch_norm beta")?;
        let (n, c) = xm.shape();
        if n == 0 {
            return Err(Error::dim("batch_norm over zero rows"));
        }
        let mut mean = vec![0.0; c];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(xm.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(xm.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + BN_EPS).sqrt()).collect();
        let xhat = Matrix::from_fn(n, c, |i, j| (xm.get(i, j) - mean[j]) * inv_std[j]);
        let (g, b) = (self.value(gamma), self.value(beta));
        let y = Matrix::from_fn(n, c, |i, j| g.data()[j] * xhat.get(i, j) + b.data()[j]);
        let v = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok((v, BatchStats { mean, var }))
    }

    /// Column-wise maximum over rows; ties resolve to the lowest row.
    pub fn max_pool_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (n, c) = x.shape();
        if n == 0 {
            return Err(Error::dim("max pool over zero rows"));
        }
        let mut argmax = vec![0usize; c];
        let mut out = x.row(0).to_vec();
        for i in 1..n {
            for (j, v) in x.row(i).iter().enumerate() {
                if *v > out[j] {
                    out[j] = *v;
                    argmax[j] = i;
                }
            }
        }
        Ok(self.push(Matrix::row_vector(out), Op::MaxPoolRows { x: a, argmax }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of nothing"))?;
        let n = self.value(*first).rows();
        if parts.iter().any(|p| self.value(*p).rows() != n) {
            return Err(Error::dim("concat_cols row mismatch"));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut v = Matrix::zeros(n, total);
        for i in 0..n {
            let mut off = 0;
            for p in parts {
                let src = self.value(*p).row(i);
                v.row_mut(i)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of nothing"))?;
        let c = self.value(*first).cols();
        if parts.iter().any(|p| self.value(*p).cols() != c) {
            return Err(Error::dim("concat_rows column mismatch"));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let v = Matrix::new(data.len() / c.max(1), c, data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_row(&mut self, a: Var, r: usize) -> Result<Var> {
        let x = self.value(a);
        if r >= x.rows() {
            return Err(Error::dim(format!("row {r} of {} rows", x.rows())));
        }
        let v = Matrix::row_vector(x.row(r).to_vec());
        Ok(self.push(v, Op::SliceRow(a, r)))
    }

    /// Parent rows are the means of their children; `assign[i]` is the
    /// parent of row `i`.
    pub fn pool_mean(&mut self, a: Var, assign: &Arc<Vec<usize>>, parents: usize) -> Result<Var> {
        let x = self.value(a);
        if assign.len() != x.rows() {
            return Err(Error::dim(format!(
                "assignment covers {} of {} rows",
                assign.len(),
                x.rows()
            )));
        }
        let mut counts = vec![0usize; parents];
        let mut v = Matrix::zeros(parents, x.cols());
        for (i, &p) in assign.iter().enumerate() {
            if p >= parents {
                return Err(Error::dim(format!("parent {p} out of {parents}")));
            }
            counts[p] += 1;
            for (o, s) in v.row_mut(p).iter_mut().zip(x.row(i)) {
                *o += s;
            }
        }
        if let Some(p) = counts.iter().position(|&c| c == 0) {
            return Err(Error::dim(format!("parent {p} has no children")));
        }
        for (p, &c) in counts.iter().enumerate() {
            v.row_mut(p).iter_mut().for_each(|o| *o /= c as f64);
        }
        Ok(self.push(
            v,
            Op::PoolMean {
                x: a,
                assign: Arc::clone(assign),
                counts,
            },
        ))
    }

    /// Copies each parent row to its children.
    pub fn unpool(&mut self, a: Var, assign: &Arc<Vec<usize>>) -> Result<Var> {
        let x = self.value(a);
        if let Some(&p) = assign.iter().find(|&&p| p >= x.rows()) {
            return Err(Error::dim(format!("parent {p} out of {}", x.rows())));
        }
        let v = Matrix::from_fn(assign.len(), x.cols(), |i, j| x.get(assign[i], j));
        Ok(self.push(
            v,
            Op::Unpool {
                x: a,
                assign: Arc::clone(assign),
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// A scalar whose value and per-entry derivative w.r.t. `x` were computed
    /// outside the tape.
    pub fn point_loss(&mut self, x: Var, value: f64, dldx: Vec<f64>) -> Result<Var> {
        if dldx.len() != self.value(x).data().len() {
            return Err(Error::dim("loss derivative length mismatch"));
        }
        Ok(self.push(Matrix::scalar(value), Op::PointLoss { x, dldx }))
    }

    /// Reverse sweep from a scalar `loss`. Every store entry gets a gradient;
    /// entries not on the loss path get zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut out = Gradients::zeros_like(store);

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.grads[id.0].add_assign(&g),
                Op::MatMul(a, b) => {
                    let da = gemm_nt(&g, self.value(*b));
                    let db = gemm_tn(self.value(*a), &g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Propagate(adj, h) => acc(&mut grads, *h, adj.propagate(&g)?),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddRow(a, r) => {
                    let mut dr = vec![0.0; g.cols()];
                    for i in 0..g.rows() {
                        for (d, v) in dr.iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    acc(&mut grads, *r, Matrix::row_vector(dr));
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, r) => {
                    let (x, rv) = (self.value(*a), self.value(*r));
                    let mut dr = vec![0.0; g.cols()];
                    let mut da = g.clone();
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            dr[j] += g.get(i, j) * x.get(i, j);
                            da.set(i, j, g.get(i, j) * rv.data()[j]);
                        }
                    }
                    acc(&mut grads, *r, Matrix::row_vector(dr));
                    acc(&mut grads, *a, da);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let da = Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * y.get(i, j));
                    let db = Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * x.get(i, j));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.scale(*s)),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let d = Matrix::from_fn(g.rows(), g.cols(), |i, j| if x.get(i, j) > 0.0 { g.get(i, j) } else { 0.0 });
                    acc(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let d = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                        let s = y.get(i, j);
                        g.get(i, j) * s * (1.0 - s)
                    });
                    acc(&mut grads, *a, d);
                }
                Op::SoftmaxCols(a) => {
                    let y = &node.value;
                    let (r, c) = y.shape();
                    let mut d = Matrix::zeros(r, c);
                    for j in 0..c {
                        let dot: f64 = (0..r).map(|i| g.get(i, j) * y.get(i, j)).sum();
                        for i in 0..r {
                            d.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (n, c) = g.shape();
                    let gm = self.value(*gamma);
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut sum_dxhat = vec![0.0; c];
                    let mut sum_dxhat_xhat = vec![0.0; c];
                    for i in 0..n {
                        for j in 0..c {
                            let gij = g.get(i, j);
                            let xh = xhat.get(i, j);
                            dbeta[j] += gij;
                            dgamma[j] += gij * xh;
                            let dxh = gij * gm.data()[j];
                            sum_dxhat[j] += dxh;
                            sum_dxhat_xhat[j] += dxh * xh;
                        }
                    }
                    let nf = n as f64;
                    let dx = Matrix::from_fn(n, c, |i, j| {
                        let dxh = g.get(i, j) * gm.data()[j];
                        inv_std[j] / nf * (nf * dxh - sum_dxhat[j] - xhat.get(i, j) * sum_dxhat_xhat[j])
                    });
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gamma, Matrix::row_vector(dgamma));
                    acc(&mut grads, *beta, Matrix::row_vector(dbeta));
                }
                Op::MaxPoolRows { x, argmax } => {
                    let xs = self.value(*x);
                    let mut d = Matrix::zeros(xs.rows(), xs.cols());
                    for (j, &i) in argmax.iter().enumerate() {
                        d.set(i, j, g.data()[j]);
                    }
                    acc(&mut grads, *x, d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let c = self.value(*p).cols();
                        let d = Matrix::from_fn(g.rows(), c, |i, j| g.get(i, off + j));
                        acc(&mut grads, *p, d);
                        off += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let r = self.value(*p).rows();
                        let d = Matrix::from_fn(r, g.cols(), |i, j| g.get(off + i, j));
                        acc(&mut grads, *p, d);
                        off += r;
                    }
                }
                Op::SliceRow(a, r) => {
                    let x = self.value(*a);
                    let mut d = Matrix::zeros(x.rows(), x.cols());
                    d.row_mut(*r).copy_from_slice(g.data());
                    acc(&mut grads, *a, d);
                }
                Op::PoolMean { x, assign, counts } => {
                    let d = Matrix::from_fn(assign.len(), g.cols(), |i, j| g.get(assign[i], j) / counts[assign[i]] as f64);
                    acc(&mut grads, *x, d);
                }
                Op::Unpool { x, assign } => {
                    let mut d = Matrix::zeros(self.value(*x).rows(), g.cols());
                    for (i, &p) in assign.iter().enumerate() {
                        for (o, v) in d.row_mut(p).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(&mut grads, *a, Matrix::filled(r, c, g.data()[0]));
                }
                Op::PointLoss { x, dldx } => {
                    let (r, c) = self.value(*x).shape();
                    let s = g.data()[0];
                    let d = Matrix::new(r, c, dldx.iter().map(|v| v * s).collect())?;
                    acc(&mut grads, *x, d);
                }
            }
        }
        Ok(out)
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One gradient matrix per store entry, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store
                .ids()
                .map(|id| {
                    let (r, c) = store.value(id).shape();
                    Matrix::zeros(r, c)
                })
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Name of the first parameter whose gradient is not finite.
    pub fn first_non_finite<'a>(&self, store: &'a ParamStore) -> Option<&'a str> {
        store
            .ids()
            .find(|id| !self.grads[id.0].is_finite())
            .map(|id| store.name(id))
    }
}
