//! The scoring network: a split-attention graph backbone with either the
//! graph feature pyramid or a single linear head, plus the node-level loss.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::{loss_and_grad, LossConfig, LossKind};
use crate::error::{Error, Result};
use crate::grsan::{Grsan, GrsanConfig, GrsanOutput, Matrix, Mode, ParamId, ParamStore, Session, Var};
use crate::pyramid::{head_bias_init, FeaturePyramid, Hierarchy, PyramidConfig, PyramidVars};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub grsan: GrsanConfig,
    /// `None` scores the last block output with one linear head.
    pub pyramid: Option<PyramidConfig>,
}

impl ModelConfig {
    /// Split attention (R=2, k=2) and the 5-level pyramid.
    pub fn full(input_dim: usize) -> Self {
        Self {
            grsan: GrsanConfig::with_defaults(input_dim),
            pyramid: Some(PyramidConfig::default()),
        }
    }

    /// Plain residual graph network: one branch, one group, no pyramid.
    pub fn resgcn(input_dim: usize) -> Self {
        Self {
            grsan: GrsanConfig {
                radix: 1,
                cardinality: 1,
                ..GrsanConfig::with_defaults(input_dim)
            },
            pyramid: None,
        }
    }

    pub fn levels(&self) -> usize {
        self.pyramid.as_ref().map_or(1, |p| p.levels)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Head {
    Pyramid(FeaturePyramid),
    Linear(ParamId, ParamId),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfGprn {
    cfg: ModelConfig,
    /// Non-trainable per-feature shift and scale applied to the inputs.
    input_mean: ParamId,
    input_scale: ParamId,
    grsan: Grsan,
    head: Head,
}

/// Node features of one graph and its hierarchy (level 0 is the graph).
#[derive(Clone, Debug)]
pub struct GraphInput {
    pub features: Matrix,
    pub hierarchy: Arc<Hierarchy>,
}

pub struct ModelVars {
    pub backbone: GrsanOutput,
    pub pyramid: Option<PyramidVars>,
    /// Per level, `n_l x 1` scores in (0, 1).
    pub scores: Vec<Var>,
}

impl OfGprn {
    /// Registers every parameter in a fresh store, initialized from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.grsan.input_dim;
        let input_mean = store.add("input.mean", Matrix::zeros(1, d), false)?;
        let input_scale = store.add("input.scale", Matrix::filled(1, d, 1.0), false)?;
        let grsan = Grsan::register(&mut store, "grsan", &cfg.grsan, &mut rng)?;
        let head = match &cfg.pyramid {
            Some(p) => {
                let widths = &cfg.grsan.widths;
                if widths.len() < p.levels {
                    return Err(Error::Config(format!(
                        "{} blocks cannot feed {} pyramid levels",
                        widths.len(),
                        p.levels
                    )));
                }
                let taps = &widths[widths.len() - p.levels..];
                Head::Pyramid(FeaturePyramid::register(&mut store, "pyramid", taps, p.clone(), &mut rng)?)
            }
            None => {
                let w = store.add_xavier("head.w", grsan.output_width(), 1, &mut rng)?;
                let b = store.add("head.b", Matrix::scalar(head_bias_init()), true)?;
                Head::Linear(w, b)
            }
        };
        Ok((
            Self {
                cfg,
                input_mean,
                input_scale,
                grsan,
                head,
            },
            store,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn grsan(&self) -> &Grsan {
        &self.grsan
    }

    pub fn pyramid(&self) -> Option<&FeaturePyramid> {
        match &self.head {
            Head::Pyramid(p) => Some(p),
            Head::Linear(..) => None,
        }
    }

    pub fn levels(&self) -> usize {
        self.cfg.levels()
    }

    /// Sets the input shift and scale to the mean and inverse standard
    /// deviation of every feature over all nodes of `inputs`. Constant
    /// features keep scale 1.
    pub fn fit_input_normalization(&self, store: &mut ParamStore, inputs: &[&Matrix]) -> Result<()> {
        let d = self.cfg.grsan.input_dim;
        let mut n = 0usize;
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for m in inputs {
            if m.cols() != d {
                return Err(Error::dim(format!("{} input features, model expects {d}", m.cols())));
            }
            for r in 0..m.rows() {
                for (k, &v) in m.row(r).iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
            }
            n += m.rows();
        }
        if n == 0 {
            return Err(Error::Data("no nodes to fit the input normalization".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let scale: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n as f64 - m * m).max(0.0);
                if var > 1e-12 {
                    1.0 / var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        *store.value_mut(self.input_mean) = Matrix::row_vector(mean);
        *store.value_mut(self.input_scale) = Matrix::row_vector(scale);
        Ok(())
    }

    fn normalize(&self, store: &ParamStore, features: &Matrix) -> Matrix {
        let mean = store.value(self.input_mean).data();
        let scale = store.value(self.input_scale).data();
        Matrix::from_fn(features.rows(), features.cols(), |r, c| (features.get(r, c) - mean[c]) * scale[c])
    }

    pub fn forward(&self, s: &mut Session, input: &GraphInput) -> Result<ModelVars> {
        let level0 = input.hierarchy.level(0);
        if input.features.rows() != level0.node_count() {
            return Err(Error::dim(format!(
                "{} feature rows for {} nodes",
                input.features.rows(),
                level0.node_count()
            )));
        }
        if input.features.cols() != self.cfg.grsan.input_dim {
            return Err(Error::dim(format!(
                "{} input features, model expects {}",
                input.features.cols(),
                self.cfg.grsan.input_dim
            )));
        }
        if input.hierarchy.depth() < self.levels() {
            return Err(Error::dim("hierarchy is shallower than the pyramid"));
        }
        let x = s.tape.constant(self.normalize(s.store(), &input.features));
        let backbone = self.grsan.forward(s, level0.adjacency(), x)?;
        match &self.head {
            Head::Pyramid(p) => {
                let taps = &backbone.outputs[backbone.outputs.len() - p.config().levels..];
                let pv = p.forward(s, taps, &input.hierarchy)?;
                let scores = pv.scores.clone();
                Ok(ModelVars {
                    backbone,
                    pyramid: Some(pv),
                    scores,
                })
            }
            Head::Linear(w, b) => {
                let last = *backbone.outputs.last().expect("at least one block");
                let logits = s.linear(last, *w, Some(*b))?;
                let scores = vec![s.tape.sigmoid(logits)];
                Ok(ModelVars {
                    backbone,
                    pyramid: None,
                    scores,
                })
            }
        }
    }

    /// Eval-mode scores per level.
    pub fn predict(&self, store: &ParamStore, input: &GraphInput) -> Result<Vec<Vec<f64>>> {
        let mut s = Session::new(store, Mode::Eval);
        let vars = self.forward(&mut s, input)?;
        Ok(vars.scores.iter().map(|&v| s.value(v).data().to_vec()).collect())
    }
}

/// Per-node labels (`1` positive, `-1` negative) and box overlaps with the
/// ground truth for one level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelTargets {
    pub labels: Vec<i8>,
    pub overlaps: Vec<f64>,
}

/// Mean over levels of the mean node loss. Levels beyond `scores.len()` are
/// ignored.
pub fn detection_loss(s: &mut Session, scores: &[Var], targets: &[LevelTargets], kind: LossKind, cfg: &LossConfig) -> Result<Var> {
    if targets.len() < scores.len() {
        return Err(Error::dim(format!(
            "{} target levels for {} score levels",
            targets.len(),
            scores.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&sv, t) in scores.iter().zip(targets) {
        let p = s.value(sv).data().to_vec();
        if p.len() != t.labels.len() || p.len() != t.overlaps.len() {
            return Err(Error::dim(format!("{} scores for {} targets", p.len(), t.labels.len())));
        }
        let n = p.len() as f64;
        let mut value = 0.0;
        let mut grad = Vec::with_capacity(p.len());
        for ((&pi, &ti), &oi) in p.iter().zip(&t.labels).zip(&t.overlaps) {
            let (l, g) = loss_and_grad(kind, pi, ti, oi, cfg);
            value += l;
            grad.push(g / n);
        }
        let lv = s.tape.point_loss(sv, value / n, grad)?;
        total = Some(match total {
            None => lv,
            Some(acc) => s.tape.add(acc, lv)?,
        });
    }
    let total = total.ok_or_else(|| Error::dim("no score levels"))?;
    Ok(s.tape.scale(total, 1.0 / scores.len() as f64))
}
