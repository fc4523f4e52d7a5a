//! Dataset generation and ingestion, the optimizer, and the training and
//! evaluation loop with its four ablation arms.

mod adam;
mod ingest;
mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, lr_schedule, AdamConfig, AdamState};
pub use ingest::{ingest_anti_uav, AnnotationFile};
pub use synth::{ir_target_contrast, synth_dataset};

use crate::detection::{average_precision, iou, localize_scores, ApReport, BBox, Detection, LossConfig, LossKind};
use crate::error::{Error, Result};
use crate::flow::{estimate_flow_with, motion_mask, suppress_background, FlowParams};
use crate::fusion::{fuse_frames, FusionParams};
use crate::grsan::{apply_bn_updates, Gradients, Matrix, Mode, ParamStore, Session};
use crate::image::{ImagePlane, RgbFrame};
use crate::model::{detection_loss, GraphInput, LevelTargets, ModelConfig, OfGprn};
use crate::pyramid::{build_hierarchy, Hierarchy, PyramidConfig};
use crate::segmentation::{build_rag, preset, Rag, GEOMETRY_FEATURES};

/// One aligned RGB / IR frame pair with the frames preceding it.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub rgb: RgbFrame,
    pub ir: ImagePlane,
    pub prev_rgb: RgbFrame,
    pub prev_ir: ImagePlane,
    pub gt: BBox,
    pub frame_index: usize,
}

impl SamplePair {
    pub fn width(&self) -> usize {
        self.ir.width()
    }

    pub fn height(&self) -> usize {
        self.ir.height()
    }
}

/// Which stages feed the graph network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PipelineMode {
    /// Superpixels of the visible frame with raw RGB and IR node features,
    /// residual graph network.
    Rgbir,
    /// Fused frame, residual graph network.
    Fusion,
    /// Fused frame with flow-based background suppression, residual graph network.
    FusionFlow,
    /// Fusion, suppression, split attention and the feature pyramid.
    Full,
}

impl PipelineMode {
    pub const ALL: [PipelineMode; 4] = [Self::Rgbir, Self::Fusion, Self::FusionFlow, Self::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Rgbir => "rgbir",
            Self::Fusion => "fusion",
            Self::FusionFlow => "fusion+flow",
            Self::Full => "full",
        }
    }

    pub fn uses_flow(self) -> bool {
        matches!(self, Self::FusionFlow | Self::Full)
    }

    /// Width of the node feature rows this mode produces.
    pub fn node_feature_dim(self) -> usize {
        let planes = match self {
            Self::Rgbir => 4,
            Self::Fusion => 1,
            Self::FusionFlow | Self::Full => 2,
        };
        planes + GEOMETRY_FEATURES
    }
}

impl fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PipelineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgbir" => Ok(Self::Rgbir),
            "fusion" => Ok(Self::Fusion),
            "fusion+flow" | "fusion-flow" => Ok(Self::FusionFlow),
            "full" => Ok(Self::Full),
            other => Err(Error::Config(format!("unknown pipeline mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub adam: AdamConfig,
    pub loss: LossKind,
    pub loss_config: LossConfig,
    pub mode: PipelineMode,
    pub preset: String,
    /// Flow magnitude in pixels above which a pixel counts as moving.
    pub motion_threshold: f64,
    /// Neighbours scoring at least this fraction of the best node join the box.
    pub expand_threshold: f64,
    pub iou_threshold: f64,
    /// Fraction of the data used for training; the rest validates.
    pub train_fraction: f64,
    /// Backbone block widths; `None` keeps the model defaults.
    pub widths: Option<Vec<usize>>,
    pub pyramid_width: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 4,
            epochs: 200,
            lr_start: 1e-4,
            lr_end: 1e-6,
            adam: AdamConfig::default(),
            loss: LossKind::Focal,
            loss_config: LossConfig::default(),
            mode: PipelineMode::Full,
            preset: "paper-quickshift".into(),
            motion_threshold: 0.5,
            expand_threshold: 0.8,
            iou_threshold: 0.5,
            train_fraction: 0.8,
            widths: None,
            pyramid_width: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr_start >= 0.0 && self.lr_end >= 0.0 && self.lr_end <= self.lr_start && self.lr_start.is_finite()) {
            return bad("learning rates must satisfy 0 <= lr_end <= lr_start");
        }
        if self.lr_end == 0.0 && self.lr_start > 0.0 && self.epochs > 1 {
            return bad("geometric decay needs lr_end > 0");
        }
        if !(self.adam.beta1 >= 0.0 && self.adam.beta1 < 1.0 && self.adam.beta2 >= 0.0 && self.adam.beta2 < 1.0) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam.eps > 0.0) {
            return bad("adam eps must be positive");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad("train_fraction must lie in (0, 1]");
        }
        if !(self.motion_threshold >= 0.0) || !(0.0..=1.0).contains(&self.expand_threshold) {
            return bad("thresholds out of range");
        }
        self.loss_config.validate()?;
        preset(&self.preset)?;
        Ok(())
    }

    /// Network shape for this mode and `input_dim` node features.
    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        let mut cfg = match self.mode {
            PipelineMode::Full => ModelConfig::full(input_dim),
            _ => ModelConfig::resgcn(input_dim),
        };
        if let Some(w) = &self.widths {
            cfg.grsan.widths = w.clone();
        }
        if let (Some(p), Some(w)) = (cfg.pyramid.as_mut(), self.pyramid_width) {
            p.width = w;
        }
        cfg
    }

    fn levels(&self) -> usize {
        match self.mode {
            PipelineMode::Full => PyramidConfig::default().levels,
            _ => 1,
        }
    }
}

/// A sample after preprocessing: its graph, hierarchy and node targets.
#[derive(Clone, Debug)]
pub struct GraphSample {
    pub input: GraphInput,
    pub rag: Rag,
    pub targets: Vec<LevelTargets>,
    pub gt: BBox,
    pub frame_id: usize,
}

/// The frame that gets segmented and the planes averaged into node features.
pub fn preprocess_planes(pair: &SamplePair, mode: PipelineMode, motion_threshold: f64) -> Result<(ImagePlane, Vec<ImagePlane>)> {
    if pair.rgb.width() != pair.ir.width() || pair.rgb.height() != pair.ir.height() {
        return Err(Error::dim("RGB and IR frames are not aligned"));
    }
    match mode {
        PipelineMode::Rgbir => {
            // superpixels follow the visible frame; IR only enters as a feature
            let seg = pair.rgb.luminance();
            let planes = vec![pair.rgb.r.clone(), pair.rgb.g.clone(), pair.rgb.b.clone(), pair.ir.clone()];
            Ok((seg, planes))
        }
        PipelineMode::Fusion => {
            let fused = fuse_frames(&pair.rgb, &pair.ir, &FusionParams::default())?;
            Ok((fused.clone(), vec![fused]))
        }
        PipelineMode::FusionFlow | PipelineMode::Full => {
            let params = FusionParams::default();
            let fused = fuse_frames(&pair.rgb, &pair.ir, &params)?;
            let prev = fuse_frames(&pair.prev_rgb, &pair.prev_ir, &params)?;
            let flow = estimate_flow_with(&prev, &fused, &FlowParams::default())?;
            let mask = motion_mask(&flow, motion_threshold)?.dilate3x3();
            let suppressed = suppress_background(&fused, &mask)?;
            let magnitude = flow.magnitude();
            Ok((suppressed.clone(), vec![suppressed, magnitude]))
        }
    }
}

/// Segments, builds the graph and hierarchy, and labels every node.
pub fn prepare_sample(pair: &SamplePair, cfg: &TrainConfig, frame_id: usize) -> Result<GraphSample> {
    let (seg_plane, planes) = preprocess_planes(pair, cfg.mode, cfg.motion_threshold)?;
    let labels = preset(&cfg.preset)?.segment(&seg_plane)?;
    let rag = build_rag(&labels, &planes)?;
    let hierarchy = build_hierarchy(&rag, cfg.levels())?;
    let features = Matrix::from_rows(rag.features())?;
    let targets = node_targets(&rag, &hierarchy, &pair.gt, cfg.iou_threshold)?;
    Ok(GraphSample {
        input: GraphInput {
            features,
            hierarchy: Arc::new(hierarchy),
        },
        rag,
        targets,
        gt: pair.gt,
        frame_id,
    })
}

/// A node is positive when its bounding box overlaps the ground truth with
/// IoU of at least `pos_iou`. A level without such a node marks its best
/// overlapping node instead (lowest id on ties).
pub fn node_targets(rag: &Rag, hierarchy: &Hierarchy, gt: &BBox, pos_iou: f64) -> Result<Vec<LevelTargets>> {
    let finest = rag.boxes();
    let mut out = Vec::with_capacity(hierarchy.depth());
    for l in 0..hierarchy.depth() {
        let overlaps: Vec<f64> = hierarchy.node_boxes(l, finest).iter().map(|b| iou(b, gt)).collect();
        let best = (0..overlaps.len()).fold(0, |b, i| if overlaps[i] > overlaps[b] { i } else { b });
        if overlaps[best] <= 0.0 {
            return Err(Error::Data(format!("ground truth {gt:?} overlaps no superpixel")));
        }
        let labels = overlaps
            .iter()
            .enumerate()
            .map(|(i, &o)| if o >= pos_iou || i == best { 1 } else { -1 })
            .collect();
        out.push(LevelTargets { labels, overlaps });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_map: f64,
    pub lr: f64,
}

/// Per-epoch curve plus wall-clock seconds per stage. Only the curve goes to
/// CSV, so reruns compare byte for byte.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub records: Vec<EpochRecord>,
    pub timings: BTreeMap<String, f64>,
}

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_map,lr\n");
        for r in &self.records {
            s.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.val_map, r.lr));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    fn add_time(&mut self, stage: &str, since: Instant) {
        *self.timings.entry(stage.to_string()).or_default() += since.elapsed().as_secs_f64();
    }
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    pub loss: f64,
    pub map: f64,
    pub report: ApReport,
}

pub struct TrainOutcome {
    pub log: MetricsLog,
    pub model: OfGprn,
    /// Parameters after the last epoch.
    pub store: ParamStore,
    pub best_epoch: usize,
    pub best_map: f64,
    pub best_checkpoint: Vec<u8>,
    pub final_checkpoint: Vec<u8>,
}

/// Preprocesses every pair in parallel; results keep the input order.
pub fn prepare_all(data: &[SamplePair], cfg: &TrainConfig, first_id: usize) -> Result<Vec<GraphSample>> {
    data.par_iter()
        .enumerate()
        .map(|(i, p)| prepare_sample(p, cfg, first_id + i))
        .collect()
}

/// Index split: the first `train_fraction` of the pairs train, the rest
/// validate. A single pair serves both roles.
pub fn split_index(n: usize, train_fraction: f64) -> usize {
    if n <= 1 {
        return n;
    }
    ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1)
}

/// Eval-mode loss, localization and average precision over `samples`.
pub fn evaluate(model: &OfGprn, store: &ParamStore, samples: &[GraphSample], cfg: &TrainConfig) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let mut loss = 0.0;
    let mut detections = Vec::with_capacity(samples.len());
    let mut truth = BTreeMap::new();
    for sample in samples {
        let mut s = Session::new(store, Mode::Eval);
        let vars = model.forward(&mut s, &sample.input)?;
        let l = detection_loss(&mut s, &vars.scores, &sample.targets, cfg.loss, &cfg.loss_config)?;
        loss += s.value(l).data()[0];
        let finest = s.value(vars.scores[0]).data().to_vec();
        detections.push(localize_scores(&finest, &sample.rag, cfg.expand_threshold, sample.frame_id)?);
        truth.insert(sample.frame_id, sample.gt);
    }
    let report = average_precision(&detections, &truth, cfg.iou_threshold)?;
    Ok(EvalResult {
        loss: loss / samples.len() as f64,
        map: report.ap,
        report,
    })
}

/// Scores for one prepared sample with the best node's box.
pub fn detect(model: &OfGprn, store: &ParamStore, sample: &GraphSample, expand_threshold: f64) -> Result<(Vec<Vec<f64>>, Detection)> {
    let scores = model.predict(store, &sample.input)?;
    let det = localize_scores(&scores[0], &sample.rag, expand_threshold, sample.frame_id)?;
    Ok((scores, det))
}

/// Trains on the first part of `data` and validates on the rest.
pub fn run_training(cfg: &TrainConfig, data: &[SamplePair]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training data is empty".into()));
    }
    let mut log = MetricsLog::default();
    let t0 = Instant::now();
    let samples = prepare_all(data, cfg, 0)?;
    log.add_time("preprocess", t0);
    let n_train = split_index(samples.len(), cfg.train_fraction);
    let (train, val) = if n_train == samples.len() {
        (&samples[..], &samples[..])
    } else {
        samples.split_at(n_train)
    };
    train_prepared(cfg, train, val, log)
}

/// The epoch loop over already prepared samples.
pub fn train_prepared(cfg: &TrainConfig, train: &[GraphSample], val: &[GraphSample], mut log: MetricsLog) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation sets must be nonempty".into()));
    }
    let dim = train[0].input.features.cols();
    let (model, mut store) = OfGprn::new(cfg.model_config(dim), cfg.seed)?;
    let feats: Vec<&Matrix> = train.iter().map(|g| &g.input.features).collect();
    model.fit_input_normalization(&mut store, &feats)?;
    let mut adam = AdamState::new(&store);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, Vec<u8>)> = None;

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg.epochs, cfg.lr_start, cfg.lr_end);
        order.shuffle(&mut order_rng);
        let t = Instant::now();
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::zeros_like(&store);
            let mut updates = Vec::new();
            for &i in batch {
                let sample = &train[i];
                let mut s = Session::new(&store, Mode::Train);
                let vars = model.forward(&mut s, &sample.input)?;
                let loss = detection_loss(&mut s, &vars.scores, &sample.targets, cfg.loss, &cfg.loss_config)?;
                let value = s.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::NonFinite {
                        tensor: format!("loss (epoch {epoch}, frame {})", sample.frame_id),
                    });
                }
                epoch_loss += value;
                grads.accumulate(&s.tape.backward(loss, &store)?);
                updates.extend(s.take_bn_updates());
            }
            grads.scale(1.0 / batch.len() as f64);
            if let Some(name) = grads.first_non_finite(&store) {
                return Err(Error::NonFinite {
                    tensor: format!("gradient of {name}"),
                });
            }
            adam_step(&mut store, &grads, &mut adam, lr, &cfg.adam)?;
            apply_bn_updates(&mut store, &updates);
            if let Some(id) = store.ids().find(|&id| !store.value(id).is_finite()) {
                return Err(Error::NonFinite {
                    tensor: store.name(id).to_string(),
                });
            }
        }
        log.add_time("train", t);

        let t = Instant::now();
        let eval = evaluate(&model, &store, val, cfg)?;
        log.add_time("validate", t);
        log.records.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_loss: eval.loss,
            val_map: eval.map,
            lr,
        });
        log::debug!(
            "epoch {epoch}: train {:.5} val {:.5} mAP {:.4}",
            epoch_loss / train.len() as f64,
            eval.loss,
            eval.map
        );
        if best.as_ref().map_or(true, |b| eval.map > b.0) {
            best = Some((eval.map, epoch, store.to_bytes()));
        }
    }
    let (best_map, best_epoch, best_checkpoint) = best.expect("at least one epoch");
    let final_checkpoint = store.to_bytes();
    Ok(TrainOutcome {
        log,
        model,
        store,
        best_epoch,
        best_map,
        best_checkpoint,
        final_checkpoint,
    })
}
