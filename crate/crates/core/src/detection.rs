//! Boxes, detection losses, single-box localization and average precision.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmentation::Rag;

/// Probability clamp applied by every loss.
pub const PROB_EPS: f64 = 1e-12;

/// Axis-aligned box in pixel-edge coordinates: pixel `(x, y)` covers
/// `[x, x+1) x [y, y+1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if !(x_min <= x_max && y_min <= y_max) {
            return Err(Error::param(format!(
                "invalid box ({x_min}, {y_min}, {x_max}, {y_max})"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            x_min: self.x_min.min(other.x_min),
            y_min: self.y_min.min(other.y_min),
            x_max: self.x_max.max(other.x_max),
            y_max: self.y_max.max(other.y_max),
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    /// Whether the center of pixel `(x, y)` lies inside the box.
    pub fn contains_pixel(&self, x: usize, y: usize) -> bool {
        let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
        cx >= self.x_min && cx < self.x_max && cy >= self.y_min && cy < self.y_max
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width as f64 && self.y_max <= height as f64
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> BBox {
        BBox {
            x_min: self.x_min * sx,
            y_min: self.y_min * sy,
            x_max: self.x_max * sx,
            y_max: self.y_max * sy,
        }
    }
}

/// Intersection over union; 0 for disjoint or degenerate pairs.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    ConsistentCe,
    Focal,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::Ce),
            "consistent_ce" | "consistent-ce" => Ok(LossKind::ConsistentCe),
            "focal" => Ok(LossKind::Focal),
            other => Err(Error::Config(format!("unknown loss kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Ce => "ce",
            LossKind::ConsistentCe => "consistent_ce",
            LossKind::Focal => "focal",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub iou_gate: f64,
    pub gamma: f64,
    pub alpha_t: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            iou_gate: 0.5,
            gamma: 2.0,
            alpha_t: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 2]", self.gamma)));
        }
        if !(self.iou_gate > 0.0 && self.iou_gate < 1.0) {
            return Err(Error::Config(format!("iou_gate {} outside (0, 1)", self.iou_gate)));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.alpha_t < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }

    /// Multiplier on `−log p_t` for a candidate whose box overlaps the
    /// ground truth by `o_k`: `λ1 + λ2 (o_k − α)` when `o_k > α`, else `λ1`.
    pub fn consistency_scale(&self, o_k: f64) -> f64 {
        if o_k > self.iou_gate {
            self.lambda1 + self.lambda2 * (o_k - self.iou_gate)
        } else {
            self.lambda1
        }
    }
}

#[inline]
fn clamp_p(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `(p_t, d p_t / d p)`; the derivative vanishes where the clamp is active.
#[inline]
fn prob_of_target(p: f64, t: i8) -> (f64, f64) {
    let active = (PROB_EPS..=1.0 - PROB_EPS).contains(&p);
    let pc = clamp_p(p);
    let d = if active { 1.0 } else { 0.0 };
    if t == 1 {
        (pc, d)
    } else {
        (1.0 - pc, -d)
    }
}

/// Balanced binary cross-entropy. `t == 1` is the positive class; any other
/// value is negative.
pub fn cross_entropy(p: f64, t: i8, lambda1: f64) -> f64 {
    let (pt, _) = prob_of_target(p, t);
    -lambda1 * pt.ln()
}

pub fn cross_entropy_grad(p: f64, t: i8, lambda1: f64) -> f64 {
    let (pt, dpt) = prob_of_target(p, t);
    -lambda1 / pt * dpt
}

/// Cross-entropy scaled up for candidates that overlap the ground truth by
/// more than the gate.
pub fn consistent_cross_entropy(p: f64, t: i8, o_k: f64, cfg: &LossConfig) -> f64 {
    let (pt, _) = prob_of_target(p, t);
    -cfg.consistency_scale(o_k) * pt.ln()
}

pub fn consistent_cross_entropy_grad(p: f64, t: i8, o_k: f64, cfg: &LossConfig) -> f64 {
    let (pt, dpt) = prob_of_target(p, t);
    -cfg.consistency_scale(o_k) / pt * dpt
}

/// `−α_t (1 − p_t)^γ log p_t`.
pub fn focal_loss(p: f64, t: i8, cfg: &LossConfig) -> f64 {
    let (pt, _) = prob_of_target(p, t);
    -cfg.alpha_t * (1.0 - pt).powf(cfg.gamma) * pt.ln()
}

pub fn focal_loss_grad(p: f64, t: i8, cfg: &LossConfig) -> f64 {
    let (pt, dpt) = prob_of_target(p, t);
    let q = 1.0 - pt;
    let g = cfg.gamma;
    let modulating = if g == 0.0 {
        0.0
    } else {
        g * q.powf(g - 1.0) * pt.ln()
    };
    cfg.alpha_t * (modulating - q.powf(g) / pt) * dpt
}

/// Loss value and derivative w.r.t. `p` for one candidate.
pub fn loss_and_grad(kind: LossKind, p: f64, t: i8, o_k: f64, cfg: &LossConfig) -> (f64, f64) {
    match kind {
        LossKind::Ce => (cross_entropy(p, t, cfg.lambda1), cross_entropy_grad(p, t, cfg.lambda1)),
        LossKind::ConsistentCe => (
            consistent_cross_entropy(p, t, o_k, cfg),
            consistent_cross_entropy_grad(p, t, o_k, cfg),
        ),
        LossKind::Focal => (focal_loss(p, t, cfg), focal_loss_grad(p, t, cfg)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

/// Picks the highest-scoring node (lowest id on ties) and grows its box over
/// adjacent nodes scoring at least `expand_threshold` times the maximum.
pub fn localize_scores(scores: &[f64], rag: &Rag, expand_threshold: f64, frame_id: usize) -> Result<Detection> {
    if scores.is_empty() || rag.node_count() == 0 {
        return Err(Error::Data("cannot localize on an empty graph".into()));
    }
    if scores.len() != rag.node_count() {
        return Err(Error::dim(format!(
            "{} scores for {} nodes",
            scores.len(),
            rag.node_count()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            tensor: format!("node score {i}"),
        });
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    let max = scores[best];
    let cut = expand_threshold * max;
    let mut bbox = rag.boxes()[best];
    for &nb in rag.neighbors(best) {
        if scores[nb] >= cut {
            bbox = bbox.union(&rag.boxes()[nb]);
        }
    }
    Ok(Detection {
        frame_id,
        bbox,
        score: max,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub frame_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    pub matched: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApReport {
    pub ap: f64,
    /// `(recall, precision)` after each ranked detection.
    pub curve: Vec<(f64, f64)>,
    pub records: Vec<DetectionRecord>,
}

impl ApReport {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("recall,precision\n");
        for (r, p) in &self.curve {
            writeln!(s, "{r},{p}").unwrap();
        }
        s
    }

    pub fn write_records(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let doc = serde_json::json!({ "ap": self.ap, "detections": self.records });
        let text = serde_json::to_string_pretty(&doc).expect("records serialize");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Single-class AP with all-point interpolation. Detections are ranked by
/// score (descending), then frame id; a detection is a true positive when it
/// overlaps a still-unmatched ground truth of its frame by at least `iou_thr`.
pub fn average_precision(detections: &[Detection], ground_truth: &BTreeMap<usize, BBox>, iou_thr: f64) -> Result<ApReport> {
    if ground_truth.is_empty() {
        return Err(Error::Data("average precision needs at least one ground-truth box".into()));
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (&detections[a], &detections[b]);
        db.score.total_cmp(&da.score).then(da.frame_id.cmp(&db.frame_id))
    });
    let total = ground_truth.len() as f64;
    let mut matched_frames = HashSet::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(order.len());
    let mut records = Vec::with_capacity(order.len());
    for &i in &order {
        let d = &detections[i];
        let hit = match ground_truth.get(&d.frame_id) {
            Some(gt) if !matched_frames.contains(&d.frame_id) => iou(&d.bbox, gt) >= iou_thr,
            _ => false,
        };
        if hit {
            matched_frames.insert(d.frame_id);
            tp += 1;
        } else {
            fp += 1;
        }
        curve.push((tp as f64 / total, tp as f64 / (tp + fp) as f64));
        records.push(DetectionRecord {
            frame_id: d.frame_id,
            bbox: d.bbox,
            score: d.score,
            matched: hit,
        });
    }
    Ok(ApReport {
        ap: interpolated_area(&curve),
        curve,
        records,
    })
}

fn interpolated_area(curve: &[(f64, f64)]) -> f64 {
    let mut rec = vec![0.0];
    let mut prec = vec![0.0];
    for &(r, p) in curve {
        rec.push(r);
        prec.push(p);
    }
    rec.push(1.0);
    prec.push(0.0);
    for i in (0..prec.len() - 1).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    (1..rec.len())
        .filter(|&i| rec[i] != rec[i - 1])
        .map(|i| (rec[i] - rec[i - 1]) * prec[i])
        .sum()
}
