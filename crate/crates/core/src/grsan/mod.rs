//! Graph residual split-attention network: normalized graph convolution,
//! split-attention blocks with dense residual shortcuts, and the
//! reverse-mode tape that differentiates them.

mod block;
mod matrix;
mod params;
mod tape;

pub use block::{
    apply_bn_updates, BlockConfig, BlockOutput, BnParams, BnUpdate, Grsan, GrsanConfig, GrsanOutput, Mode, Session, ShortcutKind,
    SplitAttentionBlock, BN_MOMENTUM,
};
pub use matrix::Matrix;
pub use params::{ParamId, ParamStore, CHECKPOINT_MAGIC};
pub use tape::{BatchStats, Gradients, Tape, Var, BN_EPS};

use crate::error::{Error, Result};

/// Symmetrically normalized adjacency with self loops,
/// `Â = D^{-1/2} (A + I) D^{-1/2}`, stored by rows.
#[derive(Clone, Debug, PartialEq)]
pub struct NormAdj {
    rows: Vec<Vec<(usize, f64)>>,
}

impl NormAdj {
    /// Builds `Â` from symmetric neighbour lists without self entries.
    pub fn from_neighbors(neighbors: &[Vec<usize>]) -> Result<Self> {
        let n = neighbors.len();
        let mut sets: Vec<Vec<usize>> = neighbors.to_vec();
        for (i, s) in sets.iter_mut().enumerate() {
            s.sort_unstable();
            s.dedup();
            if s.iter().any(|&j| j >= n) {
                return Err(Error::dim(format!("node {i} has a neighbour outside 0..{n}")));
            }
            if s.binary_search(&i).is_ok() {
                return Err(Error::param(format!("node {i} lists itself as a neighbour")));
            }
        }
        for (i, s) in sets.iter().enumerate() {
            for &j in s {
                if sets[j].binary_search(&i).is_err() {
                    return Err(Error::param(format!("adjacency is not symmetric at ({i}, {j})")));
                }
            }
        }
        let deg: Vec<f64> = sets.iter().map(|s| (s.len() + 1) as f64).collect();
        let rows = sets
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut r: Vec<(usize, f64)> = s.iter().map(|&j| (j, 1.0 / (deg[i] * deg[j]).sqrt())).collect();
                let pos = r.partition_point(|&(j, _)| j < i);
                r.insert(pos, (i, 1.0 / deg[i]));
                r
            })
            .collect();
        Ok(Self { rows })
    }

    pub fn node_count(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn to_dense(&self) -> Matrix {
        let n = self.rows.len();
        let mut m = Matrix::zeros(n, n);
        for (i, r) in self.rows.iter().enumerate() {
            for &(j, w) in r {
                m.set(i, j, w);
            }
        }
        m
    }

    /// `Â · H`.
    pub fn propagate(&self, h: &Matrix) -> Result<Matrix> {
        if h.rows() != self.rows.len() {
            return Err(Error::dim(format!(
                "propagate over {} nodes with {} feature rows",
                self.rows.len(),
                h.rows()
            )));
        }
        let c = h.cols();
        let mut out = Matrix::zeros(h.rows(), c);
        for (i, r) in self.rows.iter().enumerate() {
            let dst = out.row_mut(i);
            for &(j, w) in r {
                for (o, v) in dst.iter_mut().zip(h.row(j)) {
                    *o += w * v;
                }
            }
        }
        Ok(out)
    }

    /// Relabels nodes so that new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<NormAdj> {
        let n = self.rows.len();
        let mut inv = vec![usize::MAX; n];
        for (new, &old) in perm.iter().enumerate() {
            if old >= n || inv[old] != usize::MAX {
                return Err(Error::param("not a permutation"));
            }
            inv[old] = new;
        }
        if perm.len() != n {
            return Err(Error::param("not a permutation"));
        }
        let rows = perm
            .iter()
            .map(|&old| {
                let mut r: Vec<(usize, f64)> = self.rows[old].iter().map(|&(j, w)| (inv[j], w)).collect();
                r.sort_by_key(|e| e.0);
                r
            })
            .collect();
        Ok(NormAdj { rows })
    }
}

/// Normalizes a dense boolean adjacency. The input must be square,
/// symmetric and have an empty diagonal.
pub fn normalize_adjacency(adjacency: &[Vec<bool>]) -> Result<NormAdj> {
    let n = adjacency.len();
    let mut lists = Vec::with_capacity(n);
    for (i, row) in adjacency.iter().enumerate() {
        if row.len() != n {
            return Err(Error::dim(format!("adjacency row {i} has {} entries, expected {n}", row.len())));
        }
        lists.push((0..n).filter(|&j| row[j]).collect::<Vec<_>>());
    }
    NormAdj::from_neighbors(&lists)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
}

/// `act(Â · H · W)` evaluated directly.
pub fn graph_conv(adj: &NormAdj, h: &Matrix, w: &Matrix, activation: Activation) -> Result<Matrix> {
    if h.cols() != w.rows() {
        return Err(Error::dim(format!(
            "features have {} channels, weight expects {}",
            h.cols(),
            w.rows()
        )));
    }
    let out = adj.propagate(h)?.matmul(w)?;
    Ok(match activation {
        Activation::None => out,
        Activation::Relu => out.map(|v| v.max(0.0)),
    })
}
