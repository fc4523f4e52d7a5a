//! Superpixel hierarchy with a factor-4 node schedule and the graph feature
//! pyramid that fuses block outputs top-down across it.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detection::BBox;
use crate::error::{Error, Result};
use crate::grsan::{Matrix, NormAdj, ParamId, ParamStore, Session, Var};
use crate::segmentation::Rag;

pub const DEFAULT_LEVELS: usize = 5;
pub const REDUCTION: usize = 4;

/// `N, max(1, ⌈N/4⌉), ...` for `levels` entries.
pub fn level_counts(n: usize, levels: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(levels);
    let mut cur = n;
    for _ in 0..levels {
        out.push(cur);
        cur = cur.div_ceil(REDUCTION).max(1);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierarchyLevel {
    node_count: usize,
    /// Parent in the next level for every node; empty on the coarsest level.
    parent: Arc<Vec<usize>>,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    adj: Arc<NormAdj>,
    /// Finest-level nodes covered by each node.
    members: Vec<Vec<usize>>,
}

impl HierarchyLevel {
    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn parent(&self) -> &Arc<Vec<usize>> {
        &self.parent
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    pub fn adjacency(&self) -> &Arc<NormAdj> {
        &self.adj
    }

    pub fn members(&self) -> &[Vec<usize>] {
        &self.members
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hierarchy {
    levels: Vec<HierarchyLevel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelDocument {
    pub level: usize,
    pub nodes: usize,
    pub edges: Vec<[usize; 2]>,
    pub parent: Vec<usize>,
}

impl Hierarchy {
    pub fn levels(&self) -> &[HierarchyLevel] {
        &self.levels
    }

    pub fn level(&self, i: usize) -> &HierarchyLevel {
        &self.levels[i]
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.node_count).collect()
    }

    /// Pixel bounding boxes of every node of `level`, from the finest boxes.
    pub fn node_boxes(&self, level: usize, finest: &[BBox]) -> Vec<BBox> {
        self.levels[level]
            .members
            .iter()
            .map(|m| {
                m[1..]
                    .iter()
                    .fold(finest[m[0]], |acc, &k| acc.union(&finest[k]))
            })
            .collect()
    }

    pub fn to_documents(&self) -> Vec<LevelDocument> {
        self.levels
            .iter()
            .enumerate()
            .map(|(i, l)| LevelDocument {
                level: i,
                nodes: l.node_count,
                edges: l.edges.iter().map(|&(a, b)| [a, b]).collect(),
                parent: l.parent.to_vec(),
            })
            .collect()
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.to_documents()).expect("hierarchy serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

pub fn build_hierarchy(rag: &Rag, levels: usize) -> Result<Hierarchy> {
    build_hierarchy_from_graph(rag.neighbor_lists(), rag.features(), levels)
}

/// Greedy agglomeration: at each level the adjacent pair of clusters with the
/// smallest Euclidean distance between mean features merges (ties to the
/// lowest id pair) until the level's target count is reached. Cluster ids are
/// their lowest member, and coarse nodes are numbered in that order. A
/// disconnected graph falls back to merging the closest non-adjacent pair
/// once no adjacent pair is left.
pub fn build_hierarchy_from_graph(neighbors: &[Vec<usize>], features: &[Vec<f64>], levels: usize) -> Result<Hierarchy> {
    let n = neighbors.len();
    if n == 0 {
        return Err(Error::Data("cannot build a hierarchy over an empty graph".into()));
    }
    if levels == 0 {
        return Err(Error::param("at least one pyramid level is required"));
    }
    if features.len() != n {
        return Err(Error::dim(format!("{} feature rows for {n} nodes", features.len())));
    }
    let counts = level_counts(n, levels);
    let mut cur_neighbors: Vec<Vec<usize>> = neighbors.to_vec();
    let mut cur_features = features.to_vec();
    let mut cur_members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut out = Vec::with_capacity(levels);
    for (li, &count) in counts.iter().enumerate() {
        let edges = edge_list(&cur_neighbors);
        let adj = Arc::new(NormAdj::from_neighbors(&cur_neighbors)?);
        let last = li + 1 == levels;
        let (parent, next) = if last {
            (Vec::new(), None)
        } else {
            let parent = agglomerate(&cur_neighbors, &cur_features, counts[li + 1]);
            (parent.clone(), Some(parent))
        };
        out.push(HierarchyLevel {
            node_count: count,
            parent: Arc::new(parent),
            edges: edges.clone(),
            neighbors: cur_neighbors.clone(),
            adj,
            members: cur_members.clone(),
        });
        if let Some(parent) = next {
            let m = counts[li + 1];
            let mut sets = vec![BTreeSet::new(); m];
            for &(a, b) in &edges {
                let (pa, pb) = (parent[a], parent[b]);
                if pa != pb {
                    sets[pa].insert(pb);
                    sets[pb].insert(pa);
                }
            }
            let dim = cur_features.first().map_or(0, Vec::len);
            let mut sums = vec![vec![0.0; dim]; m];
            let mut sizes = vec![0usize; m];
            let mut members = vec![Vec::new(); m];
            for (i, &p) in parent.iter().enumerate() {
                sizes[p] += 1;
                for (s, v) in sums[p].iter_mut().zip(&cur_features[i]) {
                    *s += v;
                }
                members[p].extend_from_slice(&cur_members[i]);
            }
            members.iter_mut().for_each(|v| v.sort_unstable());
            cur_features = sums
                .into_iter()
                .zip(&sizes)
                .map(|(s, &c)| s.into_iter().map(|v| v / c as f64).collect())
                .collect();
            cur_neighbors = sets.into_iter().map(|s| s.into_iter().collect()).collect();
            cur_members = members;
        }
    }
    Ok(Hierarchy { levels: out })
}

fn edge_list(neighbors: &[Vec<usize>]) -> Vec<(usize, usize)> {
    let mut e: Vec<(usize, usize)> = neighbors
        .iter()
        .enumerate()
        .flat_map(|(i, ns)| ns.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
        .collect();
    e.sort_unstable();
    e.dedup();
    e
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Merges clusters down to `target` and returns each node's compact parent.
fn agglomerate(neighbors: &[Vec<usize>], features: &[Vec<f64>], target: usize) -> Vec<usize> {
    let n = neighbors.len();
    let dim = features.first().map_or(0, Vec::len);
    let mut active: BTreeSet<usize> = (0..n).collect();
    let mut sums: Vec<Vec<f64>> = features.to_vec();
    let mut sizes = vec![1usize; n];
    let mut means: Vec<Vec<f64>> = features.to_vec();
    let mut adj: Vec<BTreeSet<usize>> = neighbors.iter().map(|v| v.iter().copied().collect()).collect();
    let mut owner: Vec<usize> = (0..n).collect();

    while active.len() > target {
        let mut best: Option<(f64, usize, usize)> = None;
        for &a in &active {
            for &b in adj[a].range(a + 1..) {
                let d = dist2(&means[a], &means[b]);
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, a, b));
                }
            }
        }
        if best.is_none() {
            for &a in &active {
                for &b in active.range(a + 1..) {
                    let d = dist2(&means[a], &means[b]);
                    if best.is_none_or(|(bd, _, _)| d < bd) {
                        best = Some((d, a, b));
                    }
                }
            }
        }
        let (_, a, b) = best.expect("more than one active cluster");
        active.remove(&b);
        let moved = std::mem::take(&mut adj[b]);
        for &c in &moved {
            adj[c].remove(&b);
            if c != a {
                adj[c].insert(a);
                adj[a].insert(c);
            }
        }
        adj[a].remove(&a);
        let sb = std::mem::take(&mut sums[b]);
        for (s, v) in sums[a].iter_mut().zip(&sb) {
            *s += v;
        }
        sizes[a] += sizes[b];
        means[a] = (0..dim).map(|k| sums[a][k] / sizes[a] as f64).collect();
        for o in owner.iter_mut() {
            if *o == b {
                *o = a;
            }
        }
    }
    let index: std::collections::HashMap<usize, usize> = active.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    owner.iter().map(|o| index[o]).collect()
}

/// Mean of child rows per parent.
pub fn pool_up(features: &Matrix, assignment: &[usize], parents: usize) -> Result<Matrix> {
    if assignment.len() != features.rows() {
        return Err(Error::dim(format!(
            "assignment covers {} of {} rows",
            assignment.len(),
            features.rows()
        )));
    }
    let mut out = Matrix::zeros(parents, features.cols());
    let mut counts = vec![0usize; parents];
    for (i, &p) in assignment.iter().enumerate() {
        if p >= parents {
            return Err(Error::dim(format!("parent {p} out of {parents}")));
        }
        counts[p] += 1;
        for (o, v) in out.row_mut(p).iter_mut().zip(features.row(i)) {
            *o += v;
        }
    }
    for (p, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(Error::dim(format!("parent {p} has no children")));
        }
        out.row_mut(p).iter_mut().for_each(|v| *v /= c as f64);
    }
    Ok(out)
}

/// Copies parent rows to children.
pub fn unpool(features: &Matrix, assignment: &[usize]) -> Result<Matrix> {
    if let Some(&p) = assignment.iter().find(|&&p| p >= features.rows()) {
        return Err(Error::dim(format!("parent {p} out of {}", features.rows())));
    }
    Ok(Matrix::from_fn(assignment.len(), features.cols(), |i, j| {
        features.get(assignment[i], j)
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidConfig {
    pub levels: usize,
    pub width: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            levels: DEFAULT_LEVELS,
            width: 32,
        }
    }
}

impl PyramidConfig {
    /// The first and the last two levels carry an extra graph convolution.
    pub fn is_contextual(&self, level: usize) -> bool {
        level == 0 || level + 2 >= self.levels
    }
}

/// Prior probability encoded in the initial head bias.
pub const HEAD_PRIOR: f64 = 0.01;

pub fn head_bias_init() -> f64 {
    (HEAD_PRIOR / (1.0 - HEAD_PRIOR)).ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    cfg: PyramidConfig,
    lateral: Vec<(ParamId, ParamId)>,
    context: Vec<Option<(ParamId, ParamId)>>,
    heads: Vec<(ParamId, ParamId)>,
}

/// Tape handles of one pyramid evaluation.
#[derive(Clone, Debug)]
pub struct PyramidVars {
    /// Lateral plus top-down sum at every level.
    pub fused: Vec<Var>,
    /// Features seen by the score head.
    pub features: Vec<Var>,
    /// `n_i x 1` sigmoid scores.
    pub scores: Vec<Var>,
}

/// Materialized pyramid outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelFeatures {
    pub fused: Vec<Matrix>,
    pub scores: Vec<Vec<f64>>,
}

impl PyramidVars {
    pub fn collect(&self, s: &Session) -> LevelFeatures {
        LevelFeatures {
            fused: self.fused.iter().map(|&v| s.value(v).clone()).collect(),
            scores: self.scores.iter().map(|&v| s.value(v).data().to_vec()).collect(),
        }
    }
}

impl FeaturePyramid {
    /// `in_widths[i]` is the channel count of the block output tapped for level `i`.
    pub fn register(store: &mut ParamStore, prefix: &str, in_widths: &[usize], cfg: PyramidConfig, rng: &mut impl Rng) -> Result<Self> {
        if in_widths.len() != cfg.levels {
            return Err(Error::Config(format!(
                "{} block outputs for {} pyramid levels",
                in_widths.len(),
                cfg.levels
            )));
        }
        if cfg.width == 0 {
            return Err(Error::Config("pyramid width must be positive".into()));
        }
        let p = cfg.width;
        let mut lateral = Vec::new();
        let mut context = Vec::new();
        let mut heads = Vec::new();
        for (i, &w) in in_widths.iter().enumerate() {
            lateral.push((
                store.add_xavier(format!("{prefix}.level{i}.lateral_w"), w, p, rng)?,
                store.add(format!("{prefix}.level{i}.lateral_b"), Matrix::zeros(1, p), true)?,
            ));
            context.push(if cfg.is_contextual(i) {
                Some((
                    store.add_xavier(format!("{prefix}.level{i}.context_w"), p, p, rng)?,
                    store.add(format!("{prefix}.level{i}.context_b"), Matrix::zeros(1, p), true)?,
                ))
            } else {
                None
            });
            heads.push((
                store.add_xavier(format!("{prefix}.level{i}.head_w"), p, 1, rng)?,
                store.add(format!("{prefix}.level{i}.head_b"), Matrix::scalar(head_bias_init()), true)?,
            ));
        }
        Ok(Self {
            cfg,
            lateral,
            context,
            heads,
        })
    }

    pub fn config(&self) -> &PyramidConfig {
        &self.cfg
    }

    pub fn lateral_params(&self, level: usize) -> (ParamId, ParamId) {
        self.lateral[level]
    }

    pub fn context_params(&self, level: usize) -> Option<(ParamId, ParamId)> {
        self.context[level]
    }

    pub fn head_params(&self, level: usize) -> (ParamId, ParamId) {
        self.heads[level]
    }

    /// Block output `i` (finest-level rows) is mean-pooled up to level `i`,
    /// projected laterally and added to the unpooled fused features of level
    /// `i + 1`.
    pub fn forward(&self, s: &mut Session, block_outputs: &[Var], hierarchy: &Hierarchy) -> Result<PyramidVars> {
        let l = self.cfg.levels;
        if block_outputs.len() != l || hierarchy.depth() != l {
            return Err(Error::dim(format!(
                "{} block outputs and {} hierarchy levels for a {l}-level pyramid",
                block_outputs.len(),
                hierarchy.depth()
            )));
        }
        let mut lateral = Vec::with_capacity(l);
        for (i, &b) in block_outputs.iter().enumerate() {
            let mut x = b;
            if s.value(x).rows() != hierarchy.level(0).node_count() {
                return Err(Error::dim("block output rows differ from the finest level"));
            }
            for k in 0..i {
                let lvl = hierarchy.level(k);
                x = s.tape.pool_mean(x, lvl.parent(), hierarchy.level(k + 1).node_count())?;
            }
            let (w, bias) = self.lateral[i];
            lateral.push(s.linear(x, w, Some(bias))?);
        }
        let mut fused = vec![None; l];
        fused[l - 1] = Some(lateral[l - 1]);
        for i in (0..l - 1).rev() {
            let up = s.tape.unpool(fused[i + 1].expect("set"), hierarchy.level(i).parent())?;
            fused[i] = Some(s.tape.add(lateral[i], up)?);
        }
        let fused: Vec<Var> = fused.into_iter().map(|v| v.expect("set")).collect();
        let mut features = Vec::with_capacity(l);
        let mut scores = Vec::with_capacity(l);
        for (i, &f) in fused.iter().enumerate() {
            let feat = match self.context[i] {
                Some((w, b)) => {
                    let conv = s.graph_conv(hierarchy.level(i).adjacency(), f, w)?;
                    let bv = s.param(b);
                    let biased = s.tape.add_row(conv, bv)?;
                    s.tape.relu(biased)
                }
                None => f,
            };
            let (w, b) = self.heads[i];
            let logits = s.linear(feat, w, Some(b))?;
            features.push(feat);
            scores.push(s.tape.sigmoid(logits));
        }
        Ok(PyramidVars {
            fused,
            features,
            scores,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules() {
        assert_eq!(level_counts(256, 5), vec![256, 64, 16, 4, 1]);
        assert_eq!(level_counts(10, 5), vec![10, 3, 1, 1, 1]);
        assert_eq!(level_counts(1, 5), vec![1; 5]);
    }

    #[test]
    fn chain_hierarchy() {
        let n = 9;
        let neighbors: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let mut v = Vec::new();
                if i > 0 {
                    v.push(i - 1);
                }
                if i + 1 < n {
                    v.push(i + 1);
                }
                v
            })
            .collect();
        let feats: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 * i as f64]).collect();
        let h = build_hierarchy_from_graph(&neighbors, &feats, 5).unwrap();
        assert_eq!(h.counts(), vec![9, 3, 1, 1, 1]);
        // close values merge first: {0,1,2,3} spread least
        let p = h.level(0).parent();
        assert!(p.windows(2).all(|w| w[0] <= w[1]), "{p:?}");
        assert!(build_hierarchy_from_graph(&[], &[], 5).is_err());
    }

    #[test]
    fn pool_and_unpool() {
        let f = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let a = [0, 0, 1];
        let p = pool_up(&f, &a, 2).unwrap();
        assert_eq!(p.data(), &[2.0, 3.0, 5.0, 6.0]);
        let u = unpool(&p, &a).unwrap();
        assert_eq!(pool_up(&u, &a, 2).unwrap(), p);
        assert!(pool_up(&f, &[0, 0], 1).is_err());
        assert!(pool_up(&f, &[0, 0, 0], 2).is_err());
    }
}
