//! Command-line front end: one subcommand per pipeline stage plus training,
//! evaluation and the full per-frame pipeline. Every run writes a JSON
//! manifest next to its outputs.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::detection::{LossConfig, LossKind};
use crate::error::{Error, Result};
use crate::flow::{estimate_flow_with, motion_mask, suppress_background, FlowField, FlowParams};
use crate::fusion::{fuse_frames, FusionParams};
use crate::grsan::ParamStore;
use crate::image::{ImagePlane, RgbFrame};
use crate::model::OfGprn;
use crate::segmentation::{build_rag, preset, LabelMap, Segmenter};
use crate::training::{
    evaluate, ingest_anti_uav, prepare_all, run_training, split_index, synth_dataset, PipelineMode,
    SamplePair, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Exit code for an error: 2 for bad arguments or configuration, 4 for a
/// numerical abort, 3 for everything the data caused.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parameter(_) => EXIT_USAGE,
        Error::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

#[derive(Parser, Debug)]
#[command(name = "ofgprn", version, about = "RGB-IR small moving-target detection on superpixel graphs")]
struct Cli {
    /// Flat `key = value` file overriding defaults; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fuse an RGB frame with its infrared counterpart.
    Fuse(FuseArgs),
    /// Dense optical flow between two frames, with optional background suppression.
    Flow(FlowArgs),
    /// Superpixel segmentation of a grayscale frame.
    Segment(SegmentArgs),
    /// Region adjacency graph of a label map.
    Rag(RagArgs),
    /// Train the detector on synthetic or ingested data.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Run fusion, flow, segmentation, graph building and scoring on one frame pair.
    Pipeline(PipelineArgs),
    /// Write a synthetic paired dataset to disk.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct FuseArgs {
    #[arg(long)]
    rgb: PathBuf,
    #[arg(long)]
    ir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the fused luminance with the RGB chroma re-attached.
    #[arg(long)]
    color_out: Option<PathBuf>,
    #[arg(long)]
    smoother_iters: Option<usize>,
    #[arg(long)]
    gaussian_sigma: Option<f64>,
    #[arg(long)]
    pcnn_iters: Option<usize>,
}

#[derive(Args, Debug)]
struct FlowArgs {
    #[arg(long)]
    prev: PathBuf,
    #[arg(long)]
    next: PathBuf,
    /// Raw flow field output.
    #[arg(long)]
    out: PathBuf,
    /// Background-suppressed copy of `--next`.
    #[arg(long)]
    suppressed: Option<PathBuf>,
    #[arg(long)]
    mask_out: Option<PathBuf>,
    #[arg(long)]
    visual_out: Option<PathBuf>,
    #[arg(long)]
    smoothness: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    presmooth: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    #[arg(long)]
    input: PathBuf,
    /// 16-bit label PNG.
    #[arg(long)]
    out: PathBuf,
    /// slic, felzenszwalb or quickshift.
    #[arg(long)]
    method: Option<String>,
    /// A row of the preset table, or `paper` for the best Quickshift row.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args, Debug)]
struct RagArgs {
    #[arg(long)]
    labels: PathBuf,
    /// Feature plane averaged per node; repeatable.
    #[arg(long = "plane")]
    planes: Vec<PathBuf>,
    /// Adds the flow magnitude as a feature plane.
    #[arg(long)]
    flow: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Directory in the clip layout read by the ingester; synthetic data otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    n_pairs: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// rgbir, fusion, fusion+flow or full.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_start: Option<f64>,
    #[arg(long)]
    lr_end: Option<f64>,
    /// ce, consistent_ce or focal.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    preset: Option<String>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Training configuration; defaults to `config.json` beside the checkpoint.
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// `val` scores the validation split, `all` every pair.
    #[arg(long)]
    split: Option<String>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[arg(long)]
    rgb: PathBuf,
    #[arg(long)]
    ir: PathBuf,
    #[arg(long)]
    prev_rgb: PathBuf,
    #[arg(long)]
    prev_ir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Scores the graph when given.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    train_config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_pairs: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
}

/// Parsed `key = value` lines. Dashes in keys read as underscores; `#`
/// starts a comment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected `key = value`", origin.display(), no + 1))
            })?;
            values.insert(k.trim().replace('-', "_"), v.trim().trim_matches('"').to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Flag value, else the file value, else `default`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.get(key) {
            Some(s) => s
                .parse()
                .map_err(|_| Error::Config(format!("config key `{key}`: cannot parse `{s}`"))),
            None => Ok(default),
        }
    }
}

/// What every command writes beside its outputs.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub version: String,
    /// Wall-clock milliseconds per stage.
    pub timings_ms: BTreeMap<String, f64>,
}

impl RunManifest {
    fn new(command: &str, argv: &[String]) -> Self {
        Self {
            command: command.to_string(),
            argv: argv.to_vec(),
            config: json!({}),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: None,
            version: env!("CARGO_PKG_VERSION").to_string(),
            timings_ms: BTreeMap::new(),
        }
    }

    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f()?;
        let ms = t.elapsed().as_secs_f64() * 1e3;
        println!("{stage}: {ms:.1} ms");
        *self.timings_ms.entry(stage.to_string()).or_default() += ms;
        Ok(out)
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

fn manifest_beside(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn configure_threads() {
    let n = std::env::var("OFGPRN_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    if n > 0 {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code. Errors go to stderr.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli, &argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn run(cli: Cli, argv: &[String]) -> Result<()> {
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::Fuse(a) => cmd_fuse(a, &file, argv),
        Command::Flow(a) => cmd_flow(a, &file, argv),
        Command::Segment(a) => cmd_segment(a, &file, argv),
        Command::Rag(a) => cmd_rag(a, argv),
        Command::Train(a) => cmd_train(a, &file, argv),
        Command::Eval(a) => cmd_eval(a, &file, argv),
        Command::Pipeline(a) => cmd_pipeline(a, &file, argv),
        Command::Synth(a) => cmd_synth(a, &file, argv),
    }
}

fn fusion_params(a: &FuseArgs, file: &ConfigFile) -> Result<FusionParams> {
    let d = FusionParams::default();
    Ok(FusionParams {
        smoother_iters: file.pick(a.smoother_iters, "smoother_iters", d.smoother_iters)?,
        gaussian_sigma: file.pick(a.gaussian_sigma, "gaussian_sigma", d.gaussian_sigma)?,
        pcnn_iters: file.pick(a.pcnn_iters, "pcnn_iters", d.pcnn_iters)?,
        window: d.window,
    })
}

fn stage_fuse(rgb: &Path, ir: &Path, out: &Path, params: &FusionParams, m: &mut RunManifest) -> Result<(RgbFrame, ImagePlane)> {
    let (rgb, ir) = m.time("load", || Ok((RgbFrame::load(rgb)?, ImagePlane::load(ir)?)))?;
    let fused = m.time("fusion", || fuse_frames(&rgb, &ir, params))?;
    fused.save_png8(out)?;
    Ok((rgb, fused))
}

fn cmd_fuse(a: FuseArgs, file: &ConfigFile, argv: &[String]) -> Result<()> {
    let params = fusion_params(&a, file)?;
    let mut m = RunManifest::new("fuse", argv);
    m.config = json!({
        "smoother_iters": params.smoother_iters,
        "gaussian_sigma": params.gaussian_sigma,
        "pcnn_iters": params.pcnn_iters,
    });
    m.inputs = vec![a.rgb.clone(), a.ir.clone()];
    let (rgb, fused) = stage_fuse(&a.rgb, &a.ir, &a.out, &params, &mut m)?;
    m.outputs.push(a.out.clone());
    if let Some(c) = &a.color_out {
        rgb.with_luminance(&fused)?.save_png8(c)?;
        m.outputs.push(c.clone());
    }
    m.write_atomic(&manifest_beside(&a.out))
}

struct FlowOutputs<'a> {
    out: &'a Path,
    suppressed: Option<&'a Path>,
    mask: Option<&'a Path>,
    visual: Option<&'a Path>,
}

fn flow_settings(a_smooth: Option<f64>, a_iters: Option<usize>, a_pre: Option<f64>, a_thr: Option<f64>, file: &ConfigFile) -> Result<(FlowParams, f64)> {
    let d = FlowParams::default();
    let params = FlowParams {
        smoothness: file.pick(a_smooth, "smoothness", d.smoothness)?,
        iterations: file.pick(a_iters, "iterations", d.iterations)?,
        presmooth_sigma: file.pick(a_pre, "presmooth", d.presmooth_sigma)?,
        boundary: d.boundary,
    };
    let thr = file.pick(a_thr, "threshold", TrainConfig::default().motion_threshold)?;
    Ok((params, thr))
}

fn stage_flow(prev: &Path, next: &Path, outs: &FlowOutputs, params: &FlowParams, thr: f64, m: &mut RunManifest) -> Result<()> {
    let prev = ImagePlane::load(prev)?;
    let next = ImagePlane::load(next)?;
    let flow = m.time("flow", || estimate_flow_with(&prev, &next, params))?;
    flow.write_raw(outs.out)?;
    m.outputs.push(outs.out.to_path_buf());
    let mask = m.time("suppression", || Ok(motion_mask(&flow, thr)?.dilate3x3()))?;
    if let Some(p) = outs.suppressed {
        suppress_background(&next, &mask)?.save_png8(p)?;
        m.outputs.push(p.to_path_buf());
    }
    if let Some(p) = outs.mask {
        mask.to_plane().save_png8(p)?;
        m.outputs.push(p.to_path_buf());
    }
    if let Some(p) = outs.visual {
        flow.to_color_wheel().save_png8(p)?;
        m.outputs.push(p.to_path_buf());
    }
    Ok(())
}

fn flow_config(params: &FlowParams, thr: f64) -> Value {
    json!({
        "smoothness": params.smoothness,
        "iterations": params.iterations,
        "presmooth": params.presmooth_sigma,
        "threshold": thr,
    })
}

fn cmd_flow(a: FlowArgs, file: &ConfigFile, argv: &[String]) -> Result<()> {
    let (params, thr) = flow_settings(a.smoothness, a.iterations, a.presmooth, a.threshold, file)?;
    if !(thr >= 0.0) {
        return Err(Error::Config(format!("threshold must be nonnegative, got {thr}")));
    }
    let mut m = RunManifest::new("flow", argv);
    m.config = flow_config(&params, thr);
    m.inputs = vec![a.prev.clone(), a.next.clone()];
    let outs = FlowOutputs {
        out: &a.out,
        suppressed: a.suppressed.as_deref(),
        mask: a.mask_out.as_deref(),
        visual: a.visual_out.as_deref(),
    };
    stage_flow(&a.prev, &a.next, &outs, &params, thr, &mut m)?;
    m.write_atomic(&manifest_beside(&a.out))
}

/// `--preset` wins; a bare `--method` takes that method's paper row. The two
/// must agree when both are given.
fn resolve_segmenter(method: Option<String>, preset_name: Option<String>, file: &ConfigFile) -> Result<Segmenter> {
    let method = method.or_else(|| file.get("method").map(str::to_string));
    let preset_name = preset_name.or_else(|| file.get("preset").map(str::to_string));
    let seg = match (&method, &preset_name) {
        (_, Some(p)) => preset(p)?,
        (Some(m), None) => match m.as_str() {
            "slic" => preset("paper-slic")?,
            "felzenszwalb" | "felz" => preset("paper-felz")?,
            "quickshift" => preset("paper-quickshift")?,
            other => return Err(Error::Config(format!("unknown segmentation method `{other}`"))),
        },
        (None, None) => preset("paper")?,
    };
    if let Some(m) = method {
        let m = if m == "felz" { "felzenszwalb".to_string() } else { m };
        if m != seg.method_name() {
            return Err(Error::Config(format!(
                "preset is a {} row but --method is {m}",
                seg.method_name()
            )));
        }
    }
    Ok(seg)
}

fn stage_segment(input: &Path, out: &Path, seg: &Segmenter, m: &mut RunManifest) -> Result<LabelMap> {
    let img = ImagePlane::load(input)?;
    let labels = m.time("segmentation", || seg.segment(&img))?;
    labels.save_png16(out)?;
    m.outputs.push(out.to_path_buf());
    Ok(labels)
}

fn cmd_segment(a: SegmentArgs, file: &ConfigFile, argv: &[String]) -> Result<()> {
    let seg = resolve_segmenter(a.method, a.preset, file)?;
    let mut m = RunManifest::new("segment", argv);
    m.config = serde_json::to_value(&seg).expect("segmenter serializes");
    m.inputs = vec![a.input.clone()];
    let labels = stage_segment(&a.input, &a.out, &seg, &mut m)?;
    println!("{} segments", labels.segment_count());
    m.write_atomic(&manifest_beside(&a.out))
}

fn stage_rag(labels: &Path, planes: &[PathBuf], flow: Option<&Path>, out: &Path, m: &mut RunManifest) -> Result<crate::segmentation::Rag> {
    let labels = LabelMap::load_png16(labels)?;
    let mut feats = planes.iter().map(ImagePlane::load).collect::<Result<Vec<_>>>()?;
    if let Some(f) = flow {
        feats.push(FlowField::read_raw(f)?.magnitude());
    }
    if feats.is_empty() {
        return Err(Error::Config("at least one --plane or --flow is required".into()));
    }
    let rag = m.time("graph", || build_rag(&labels, &feats))?;
    rag.write_json(out)?;
    m.outputs.push(out.to_path_buf());
    Ok(rag)
}

fn cmd_rag(a: RagArgs, argv: &[String]) -> Result<()> {
    let mut m = RunManifest::new("rag", argv);
    m.inputs = std::iter::once(a.labels.clone())
        .chain(a.planes.iter().cloned())
        .chain(a.flow.iter().cloned())
        .collect();
    let rag = stage_rag(&a.labels, &a.planes, a.flow.as_deref(), &a.out, &mut m)?;
    println!("{} nodes, {} edges", rag.node_count(), rag.edges().len());
    m.write_atomic(&manifest_beside(&a.out))
}

const SYNTH_TARGET_SIZE: (usize, usize) = (4, 8);
const SYNTH_SPEED: (f64, f64) = (2.0, 4.0);

fn load_data(d: &DataArgs, seed: u64, file: &ConfigFile, m: &mut RunManifest) -> Result<Vec<SamplePair>> {
    let data_dir = d.data.clone().or_else(|| file.get("data").map(PathBuf::from));
    match data_dir {
        Some(dir) => {
            m.inputs.push(dir.clone());
            let pairs = m.time("ingest", || ingest_anti_uav(&dir))?;
            if pairs.is_empty() {
                return Err(Error::Data(format!("no annotated frame pairs under {}", dir.display())));
            }
            Ok(pairs)
        }
        None => {
            let n = file.pick(d.n_pairs, "n_pairs", 200)?;
            let w = file.pick(d.width, "width", 64)?;
            let h = file.pick(d.height, "height", 64)?;
            m.config["synthetic"] = json!({
                "n_pairs": n, "width": w, "height": h,
                "target_size": SYNTH_TARGET_SIZE, "speed": SYNTH_SPEED,
            });
            m.time("synth", || synth_dataset(seed, n, w, h, SYNTH_TARGET_SIZE, SYNTH_SPEED))
        }
    }
}

fn train_config(a: &TrainArgs, file: &ConfigFile) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let mode: PipelineMode = file.pick(a.mode.clone(), "mode", d.mode.to_string())?.parse()?;
    let loss: LossKind = file.pick(a.loss.clone(), "loss", d.loss.to_string())?.parse()?;
    let loss_config = LossConfig {
        lambda1: file.pick(None, "lambda1", d.loss_config.lambda1)?,
        lambda2: file.pick(None, "lambda2", d.loss_config.lambda2)?,
        iou_gate: file.pick(None, "iou_gate", d.loss_config.iou_gate)?,
        gamma: file.pick(None, "gamma", d.loss_config.gamma)?,
        alpha_t: file.pick(None, "alpha_t", d.loss_config.alpha_t)?,
    };
    let cfg = TrainConfig {
        seed: file.pick(a.seed, "seed", d.seed)?,
        batch_size: file.pick(a.batch_size, "batch_size", d.batch_size)?,
        epochs: file.pick(a.epochs, "epochs", d.epochs)?,
        lr_start: file.pick(a.lr_start, "lr_start", d.lr_start)?,
        lr_end: file.pick(a.lr_end, "lr_end", d.lr_end)?,
        loss,
        loss_config,
        mode,
        preset: file.pick(a.preset.clone(), "preset", d.preset.clone())?,
        motion_threshold: file.pick(None, "threshold", d.motion_threshold)?,
        expand_threshold: file.pick(None, "expand_threshold", d.expand_threshold)?,
        ..d
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs, file: &ConfigFile, argv: &[String]) -> Result<()> {
    let cfg = train_config(&a, file)?;
    ensure_dir(&a.out)?;
    let mut m = RunManifest::new("train", argv);
    m.seed = Some(cfg.seed);
    m.config = serde_json::to_value(&cfg).expect("config serializes");
    let data = load_data(&a.data, cfg.seed, file, &mut m)?;
    let outcome = run_training(&cfg, &data)?;
    for (stage, secs) in &outcome.log.timings {
        println!("{stage}: {:.1} ms", secs * 1e3);
        m.timings_ms.insert(stage.clone(), secs * 1e3);
    }
    let last = outcome.log.last().expect("at least one epoch");
    println!(
        "final epoch {}: train loss {}, val loss {}, val mAP {}; best mAP {} at epoch {}",
        last.epoch, last.train_loss, last.val_loss, last.val_map, outcome.best_map, outcome.best_epoch
    );
    let write = |name: &str, bytes: &[u8]| -> Result<PathBuf> {
        let p = a.out.join(name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    };
    m.outputs.push(write("metrics.csv", outcome.log.to_csv().as_bytes())?);
    m.outputs.push(write("best.ckpt", &outcome.best_checkpoint)?);
    m.outputs.push(write("final.ckpt", &outcome.final_checkpoint)?);
    let cfg_text = serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n";
    m.outputs.push(write("config.json", cfg_text.as_bytes())?);
    m.write_atomic(&a.out.join("manifest.json"))
}

fn read_train_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn sibling_config(checkpoint: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| checkpoint.with_file_name("config.json"))
}

fn load_model(cfg: &TrainConfig, input_dim: usize, checkpoint: &Path) -> Result<(OfGprn, ParamStore)> {
    let (model, mut store) = OfGprn::new(cfg.model_config(input_dim), cfg.seed)?;
    store.load_values(checkpoint)?;
    Ok((model, store))
}

fn cmd_eval(a: EvalArgs, file: &ConfigFile, argv: &[String]) -> Result<()> {
    let cfg_path = sibling_config(&a.checkpoint, a.train_config.clone());
    let cfg = read_train_config(&cfg_path)?;
    let seed = file.pick(a.seed, "seed", cfg.seed)?;
    let split = file.pick(a.split.clone(), "split", "val".to_string())?;
    if split != "val" && split != "all" {
        return Err(Error::Config(format!("split must be `val` or `all`, got `{split}`")));
    }
    ensure_dir(&a.out)?;
    let mut m = RunManifest::new("eval", argv);
    m.seed = Some(seed);
    m.config = json!({ "train": cfg, "split": split });
    m.inputs = vec![a.checkpoint.clone(), cfg_path];
    let data = load_data(&a.data, seed, file, &mut m)?;
    let first = if split == "val" && data.len() > 1 {
        split_index(data.len(), cfg.train_fraction)
    } else {
        0
    };
    let samples = m.time("preprocess", || prepare_all(&data[first..], &cfg, first))?;
    let dim = samples[0].input.features.cols();
    let (model, store) = load_model(&cfg, dim, &a.checkpoint)?;
    let result = m.time("evaluate", || evaluate(&model, &store, &samples, &cfg))?;
    println!("mAP@{}: {} over {} frames, loss {}", cfg.iou_threshold, result.map, samples.len(), result.loss);
    let ap = a.out.join("ap.json");
    result.report.write_records(&ap)?;
    let curve = a.out.join("curve.csv");
    std::fs::write(&curve, result.report.curve_csv()).map_err(|e| Error::io(&curve, e))?;
    m.outputs = vec![ap, curve];
    m.write_atomic(&a.out.join("manifest.json"))
}

/// The stage commands chained through their on-disk outputs, so each
/// intermediate file equals what the standalone command would write.
fn cmd_pipeline(a: PipelineArgs, file: &ConfigFile, argv: &[String]) -> Result<()> {
    ensure_dir(&a.out)?;
    let mut m = RunManifest::new("pipeline", argv);
    m.inputs = vec![a.rgb.clone(), a.ir.clone(), a.prev_rgb.clone(), a.prev_ir.clone()];
    let fusion = FusionParams::default();
    let (flow_params, thr) = flow_settings(None, None, None, a.threshold, file)?;
    let seg = resolve_segmenter(None, a.preset.clone(), file)?;
    m.config = json!({
        "flow": flow_config(&flow_params, thr),
        "segmenter": seg,
    });

    let p = |name: &str| a.out.join(name);
    stage_fuse(&a.prev_rgb, &a.prev_ir, &p("prev_fused.png"), &fusion, &mut m)?;
    stage_fuse(&a.rgb, &a.ir, &p("fused.png"), &fusion, &mut m)?;
    m.outputs.extend([p("prev_fused.png"), p("fused.png")]);
    let outs = FlowOutputs {
        out: &p("flow.bin"),
        suppressed: Some(&p("suppressed.png")),
        mask: None,
        visual: None,
    };
    stage_flow(&p("prev_fused.png"), &p("fused.png"), &outs, &flow_params, thr, &mut m)?;
    let labels = stage_segment(&p("suppressed.png"), &p("labels.png"), &seg, &mut m)?;
    let rag = stage_rag(
        &p("labels.png"),
        &[p("suppressed.png")],
        Some(&p("flow.bin")),
        &p("rag.json"),
        &mut m,
    )?;
    println!("{} segments, {} edges", labels.segment_count(), rag.edges().len());

    if let Some(ck) = &a.checkpoint {
        let cfg_path = sibling_config(ck, a.train_config.clone());
        let cfg = read_train_config(&cfg_path)?;
        if !cfg.mode.uses_flow() {
            return Err(Error::Config(format!(
                "the pipeline builds flow-suppressed graphs; checkpoint was trained in {} mode",
                cfg.mode
            )));
        }
        m.inputs.extend([ck.clone(), cfg_path]);
        let (model, store) = load_model(&cfg, rag.feature_dim(), ck)?;
        let hierarchy = crate::pyramid::build_hierarchy(&rag, cfg.model_config(rag.feature_dim()).levels())?;
        let input = crate::model::GraphInput {
            features: crate::grsan::Matrix::from_rows(rag.features())?,
            hierarchy: std::sync::Arc::new(hierarchy),
        };
        let scores = m.time("network", || model.predict(&store, &input))?;
        let det = crate::detection::localize_scores(&scores[0], &rag, cfg.expand_threshold, 0)?;
        println!("detection: {:?} score {}", det.bbox, det.score);
        let path = p("detection.json");
        let text = serde_json::to_string_pretty(&json!({ "detection": det, "node_scores": scores[0] }))
            .expect("detection serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        m.outputs.push(path);
    }
    m.write_atomic(&a.out.join("manifest.json"))
}

/// Each pair becomes a two-frame clip in the ingester layout: the previous
/// frame carries no box, the current one carries the ground truth.
fn cmd_synth(a: SynthArgs, file: &ConfigFile, argv: &[String]) -> Result<()> {
    let seed = file.pick(a.seed, "seed", 0u64)?;
    let d = DataArgs {
        data: None,
        n_pairs: a.n_pairs,
        width: a.width,
        height: a.height,
    };
    ensure_dir(&a.out)?;
    let mut m = RunManifest::new("synth", argv);
    m.seed = Some(seed);
    let pairs = load_data(&d, seed, file, &mut m)?;
    m.time("write", || {
        for (i, pair) in pairs.iter().enumerate() {
            let clip = a.out.join(format!("pair_{i:05}"));
            ensure_dir(&clip.join("visible"))?;
            ensure_dir(&clip.join("infrared"))?;
            pair.prev_rgb.save_png8(clip.join("visible/000000.png"))?;
            pair.rgb.save_png8(clip.join("visible/000001.png"))?;
            pair.prev_ir.save_png8(clip.join("infrared/000000.png"))?;
            pair.ir.save_png8(clip.join("infrared/000001.png"))?;
            let g = &pair.gt;
            let ann = json!({
                "exist": [0, 1],
                "gt_rect": [[], [g.x_min, g.y_min, g.width(), g.height()]],
            });
            let path = clip.join("infrared.json");
            std::fs::write(&path, ann.to_string() + "\n").map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    })?;
    println!("{} pairs written to {}", pairs.len(), a.out.display());
    m.outputs.push(a.out.clone());
    m.write_atomic(&a.out.join("manifest.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_parsing() {
        let f = ConfigFile::parse("# c\nepochs = 3\nlr-start=0.5 # x\nmode = \"full\"\n", Path::new("c")).unwrap();
        assert_eq!(f.pick::<usize>(None, "epochs", 9).unwrap(), 3);
        assert_eq!(f.pick::<usize>(Some(4), "epochs", 9).unwrap(), 4);
        assert_eq!(f.pick::<f64>(None, "lr_start", 1.0).unwrap(), 0.5);
        assert_eq!(f.get("mode"), Some("full"));
        assert!(f.pick::<usize>(None, "mode", 1).is_err());
        assert!(ConfigFile::parse("novalue\n", Path::new("c")).is_err());
    }

    #[test]
    fn segmenter_resolution() {
        let f = ConfigFile::default();
        let q = resolve_segmenter(Some("quickshift".into()), Some("paper".into()), &f).unwrap();
        assert_eq!(
            q,
            Segmenter::Quickshift {
                kernel_size: 3.0,
                max_dist: 6.0,
                ratio: 0.5
            }
        );
        assert!(resolve_segmenter(Some("slic".into()), Some("paper".into()), &f).is_err());
        assert!(resolve_segmenter(Some("watershed".into()), None, &f).is_err());
    }

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(dispatch(["ofgprn", "frobnicate"]), EXIT_USAGE);
        assert_eq!(dispatch(["ofgprn"]), EXIT_USAGE);
        assert_eq!(dispatch(["ofgprn", "--help"]), EXIT_OK);
    }
}
