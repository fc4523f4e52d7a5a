use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BatchStats, Matrix, NormAdj, ParamId, ParamStore, Tape, Var, BN_EPS};
use crate::error::{Error, Result};

/// Weight of the previous running statistic in a batch-norm update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm uses per-graph statistics and reports them for the
    /// running-average update.
    Train,
    /// Batch norm uses the stored running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats,
}

/// One forward evaluation: the tape, the parameters it reads, and the
/// batch-norm statistics it produced.
pub struct Session<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    mode: Mode,
    bn_updates: Vec<BnUpdate>,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            store,
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        self.tape.value(v)
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    /// `x · W + b`, with the bias omitted when `None`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
        let wv = self.param(w);
        let y = self.tape.matmul(x, wv)?;
        match b {
            Some(b) => {
                let bv = self.param(b);
                self.tape.add_row(y, bv)
            }
            None => Ok(y),
        }
    }

    /// `Â · x · W`.
    pub fn graph_conv(&mut self, adj: &Arc<NormAdj>, x: Var, w: ParamId) -> Result<Var> {
        let p = self.tape.propagate(adj, x)?;
        let wv = self.param(w);
        self.tape.matmul(p, wv)
    }

    pub fn batch_norm(&mut self, x: Var, bn: &BnParams) -> Result<Var> {
        let gamma = self.param(bn.gamma);
        let beta = self.param(bn.beta);
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm(x, gamma, beta)?;
                self.bn_updates.push(BnUpdate {
                    mean: bn.running_mean,
                    var: bn.running_var,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.store.value(bn.running_mean);
                let var = self.store.value(bn.running_var);
                let shift = Matrix::row_vector(mean.data().iter().map(|m| -m).collect());
                let inv = Matrix::row_vector(var.data().iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect());
                let shift = self.tape.constant(shift);
                let inv = self.tape.constant(inv);
                let centered = self.tape.add_row(x, shift)?;
                let xhat = self.tape.mul_row(centered, inv)?;
                let scaled = self.tape.mul_row(xhat, gamma)?;
                self.tape.add_row(scaled, beta)
            }
        }
    }
}

/// Folds batch statistics into the running averages, in order.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        for (r, b) in store.value_mut(u.mean).data_mut().iter_mut().zip(&u.stats.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, b) in store.value_mut(u.var).data_mut().iter_mut().zip(&u.stats.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BnParams {
    fn register(store: &mut ParamStore, prefix: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{prefix}.gamma"), Matrix::filled(1, c, 1.0), true)?,
            beta: store.add(format!("{prefix}.beta"), Matrix::zeros(1, c), true)?,
            running_mean: store.add(format!("{prefix}.running_mean"), Matrix::zeros(1, c), false)?,
            running_var: store.add(format!("{prefix}.running_var"), Matrix::filled(1, c, 1.0), false)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShortcutKind {
    Identity,
    Projected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub radix: usize,
    pub cardinality: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl BlockConfig {
    pub fn new(radix: usize, cardinality: usize, in_channels: usize, out_channels: usize) -> Result<Self> {
        let cfg = Self {
            radix,
            cardinality,
            in_channels,
            out_channels,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.radix == 0 || self.cardinality == 0 {
            return Err(Error::Config("radix and cardinality must be at least 1".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.out_channels % self.cardinality != 0 {
            return Err(Error::Config(format!(
                "out_channels {} not divisible by cardinality {}",
                self.out_channels, self.cardinality
            )));
        }
        Ok(())
    }

    pub fn group_width(&self) -> usize {
        self.out_channels / self.cardinality
    }

    pub fn shortcut(&self) -> ShortcutKind {
        if self.in_channels == self.out_channels {
            ShortcutKind::Identity
        } else {
            ShortcutKind::Projected
        }
    }
}

/// Residual split-attention block over a graph.
///
/// Every cardinal group owns `R` branches `relu(Â·G·W) + b`. The branch sum
/// is batch-normalized over nodes, rectified and max-pooled to one channel
/// descriptor, which a per-radix linear map turns into logits; a softmax
/// across radix weights the branches. Groups are concatenated and the
/// shortcut of the block input is added.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitAttentionBlock {
    cfg: BlockConfig,
    branches: Vec<Vec<(ParamId, ParamId)>>,
    bn: Vec<BnParams>,
    attention: Vec<Vec<(ParamId, ParamId)>>,
    shortcut: Option<ParamId>,
}

/// Block output plus the `R x c` attention matrix of every group.
pub struct BlockOutput {
    pub out: Var,
    pub attention: Vec<Var>,
}

impl SplitAttentionBlock {
    pub fn register(store: &mut ParamStore, prefix: &str, cfg: BlockConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.group_width();
        let mut branches = Vec::new();
        let mut bn = Vec::new();
        let mut attention = Vec::new();
        for j in 0..cfg.cardinality {
            let mut br = Vec::new();
            for r in 0..cfg.radix {
                let w = store.add_xavier(format!("{prefix}.g{j}.r{r}.agg"), cfg.in_channels, c, rng)?;
                let b = store.add(format!("{prefix}.g{j}.r{r}.update"), Matrix::zeros(1, c), true)?;
                br.push((w, b));
            }
            branches.push(br);
            bn.push(BnParams::register(store, &format!("{prefix}.g{j}.bn"), c)?);
            let mut at = Vec::new();
            for r in 0..cfg.radix {
                let w = store.add_xavier(format!("{prefix}.g{j}.r{r}.attn_w"), c, c, rng)?;
                let b = store.add(format!("{prefix}.g{j}.r{r}.attn_b"), Matrix::zeros(1, c), true)?;
                at.push((w, b));
            }
            attention.push(at);
        }
        let shortcut = match cfg.shortcut() {
            ShortcutKind::Identity => None,
            ShortcutKind::Projected => Some(store.add_xavier(
                format!("{prefix}.tau"),
                cfg.in_channels,
                cfg.out_channels,
                rng,
            )?),
        };
        Ok(Self {
            cfg,
            branches,
            bn,
            attention,
            shortcut,
        })
    }

    pub fn config(&self) -> &BlockConfig {
        &self.cfg
    }

    pub fn shortcut_param(&self) -> Option<ParamId> {
        self.shortcut
    }

    pub fn branch_params(&self, group: usize, radix: usize) -> (ParamId, ParamId) {
        self.branches[group][radix]
    }

    pub fn attention_params(&self, group: usize, radix: usize) -> (ParamId, ParamId) {
        self.attention[group][radix]
    }

    pub fn bn_params(&self, group: usize) -> BnParams {
        self.bn[group]
    }

    pub fn forward(&self, s: &mut Session, adj: &Arc<NormAdj>, x: Var) -> Result<BlockOutput> {
        let (_, d) = s.value(x).shape();
        if d != self.cfg.in_channels {
            return Err(Error::dim(format!(
                "block expects {} input channels, got {d}",
                self.cfg.in_channels
            )));
        }
        let propagated = s.tape.propagate(adj, x)?;
        let mut groups = Vec::with_capacity(self.cfg.cardinality);
        let mut attention = Vec::with_capacity(self.cfg.cardinality);
        for j in 0..self.cfg.cardinality {
            let mut branch_out = Vec::with_capacity(self.cfg.radix);
            for &(w, b) in &self.branches[j] {
                let wv = s.param(w);
                let conv = s.tape.matmul(propagated, wv)?;
                let act = s.tape.relu(conv);
                let bv = s.param(b);
                branch_out.push(s.tape.add_row(act, bv)?);
            }
            let mut total = branch_out[0];
            for &u in &branch_out[1..] {
                total = s.tape.add(total, u)?;
            }
            let normed = s.batch_norm(total, &self.bn[j])?;
            let act = s.tape.relu(normed);
            let pooled = s.tape.max_pool_rows(act)?;
            let mut logits = Vec::with_capacity(self.cfg.radix);
            for &(w, b) in &self.attention[j] {
                logits.push(s.linear(pooled, w, Some(b))?);
            }
            let stacked = s.tape.concat_rows(&logits)?;
            let weights = s.tape.softmax_cols(stacked);
            attention.push(weights);
            let mut group = None;
            for (r, &u) in branch_out.iter().enumerate() {
                let a = s.tape.slice_row(weights, r)?;
                let weighted = s.tape.mul_row(u, a)?;
                group = Some(match group {
                    None => weighted,
                    Some(g) => s.tape.add(g, weighted)?,
                });
            }
            groups.push(group.expect("radix >= 1"));
        }
        let concat = if groups.len() == 1 {
            groups[0]
        } else {
            s.tape.concat_cols(&groups)?
        };
        let short = match self.shortcut {
            None => x,
            Some(t) => s.linear(x, t, None)?,
        };
        let out = s.tape.add(concat, short)?;
        Ok(BlockOutput { out, attention })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrsanConfig {
    pub input_dim: usize,
    pub widths: Vec<usize>,
    pub radix: usize,
    pub cardinality: usize,
}

impl GrsanConfig {
    pub fn with_defaults(input_dim: usize) -> Self {
        Self {
            input_dim,
            widths: vec![32, 64, 64, 64, 64],
            radix: 2,
            cardinality: 2,
        }
    }

    pub fn block_configs(&self) -> Result<Vec<BlockConfig>> {
        if self.widths.is_empty() {
            return Err(Error::Config("at least one block is required".into()));
        }
        let mut prev = self.input_dim;
        self.widths
            .iter()
            .map(|&w| {
                let cfg = BlockConfig::new(self.radix, self.cardinality, prev, w)?;
                prev = w;
                Ok(cfg)
            })
            .collect()
    }
}

/// Chain of split-attention blocks with dense residual shortcuts: block `i`
/// receives the previous output and, on top of its own shortcut, every
/// earlier output (the network input included) mapped to its width.
#[derive(Clone, Debug, PartialEq)]
pub struct Grsan {
    blocks: Vec<SplitAttentionBlock>,
    /// For block `i`: `(m, projection)` for every earlier output `m ≤ i - 1`
    /// in the list `[input, out_1, ...]` that is not the block input.
    skips: Vec<Vec<(usize, Option<ParamId>)>>,
}

pub struct GrsanOutput {
    /// Output of every block, in order.
    pub outputs: Vec<Var>,
    /// Per block, the attention matrix of every group.
    pub attention: Vec<Vec<Var>>,
}

impl Grsan {
    pub fn register(store: &mut ParamStore, prefix: &str, cfg: &GrsanConfig, rng: &mut impl Rng) -> Result<Self> {
        let configs = cfg.block_configs()?;
        let mut widths = vec![cfg.input_dim];
        let mut blocks = Vec::new();
        let mut skips = Vec::new();
        for (i, bc) in configs.iter().enumerate() {
            blocks.push(SplitAttentionBlock::register(store, &format!("{prefix}.block{i}"), *bc, rng)?);
            let mut sk = Vec::new();
            for (m, &wm) in widths.iter().enumerate().take(i) {
                let proj = if wm == bc.out_channels {
                    None
                } else {
                    Some(store.add_xavier(format!("{prefix}.block{i}.tau{m}"), wm, bc.out_channels, rng)?)
                };
                sk.push((m, proj));
            }
            skips.push(sk);
            widths.push(bc.out_channels);
        }
        Ok(Self { blocks, skips })
    }

    pub fn blocks(&self) -> &[SplitAttentionBlock] {
        &self.blocks
    }

    pub fn skips(&self, block: usize) -> &[(usize, Option<ParamId>)] {
        &self.skips[block]
    }

    pub fn output_width(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.config().out_channels)
    }

    pub fn forward(&self, s: &mut Session, adj: &Arc<NormAdj>, x: Var) -> Result<GrsanOutput> {
        let mut history = vec![x];
        let mut attention = Vec::new();
        for (block, skips) in self.blocks.iter().zip(&self.skips) {
            let prev = *history.last().expect("nonempty");
            let bo = block.forward(s, adj, prev)?;
            let mut out = bo.out;
            for &(m, proj) in skips {
                let term = match proj {
                    None => history[m],
                    Some(p) => s.linear(history[m], p, None)?,
                };
                out = s.tape.add(out, term)?;
            }
            attention.push(bo.attention);
            history.push(out);
        }
        Ok(GrsanOutput {
            outputs: history.split_off(1),
            attention,
        })
    }
}
