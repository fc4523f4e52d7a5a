use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SamplePair;
use crate::detection::BBox;
use crate::error::{Error, Result};
use crate::image::{ImagePlane, RgbFrame};

/// Per-clip annotation, `infrared.json` next to the frame folders. Boxes are
/// `[x, y, w, h]` in infrared pixel coordinates; an empty array or a zero
/// `exist` flag marks a frame without a visible target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub exist: Vec<u8>,
    pub gt_rect: Vec<Vec<f64>>,
}

fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "png" | "pgm" | "ppm"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn read_annotation(path: &Path) -> Result<AnnotationFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ann: AnnotationFile = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if ann.exist.len() != ann.gt_rect.len() {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            reason: format!("{} exist flags but {} boxes", ann.exist.len(), ann.gt_rect.len()),
        });
    }
    if let Some(r) = ann.gt_rect.iter().find(|r| !r.is_empty() && r.len() != 4) {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            reason: format!("box with {} values", r.len()),
        });
    }
    Ok(ann)
}

/// Loads `root/<clip>/{visible,infrared}/` frame folders with their
/// `infrared.json` boxes. Clips are visited in name order; all frames are
/// resampled to the infrared size of the first usable clip. Frame `i` pairs
/// with frame `i - 1` (itself for the first frame) as its predecessor.
pub fn ingest_anti_uav(root: impl AsRef<Path>) -> Result<Vec<SamplePair>> {
    let root = root.as_ref();
    let mut clips: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    clips.sort();
    if clips.is_empty() {
        log::warn!("no clips under {}", root.display());
    }

    let mut size: Option<(usize, usize)> = None;
    let mut out = Vec::new();
    for clip in clips {
        let (vis_dir, ir_dir, ann_path) = (clip.join("visible"), clip.join("infrared"), clip.join("infrared.json"));
        if !vis_dir.is_dir() || !ir_dir.is_dir() {
            log::warn!("skipping {}: missing visible or infrared stream", clip.display());
            continue;
        }
        if !ann_path.is_file() {
            log::warn!("skipping {}: no infrared.json", clip.display());
            continue;
        }
        let ann = read_annotation(&ann_path)?;
        let vis = frame_files(&vis_dir)?;
        let ir = frame_files(&ir_dir)?;
        let n = vis.len().min(ir.len()).min(ann.gt_rect.len());
        if vis.len() != ir.len() {
            log::warn!("{}: {} visible vs {} infrared frames, using {n}", clip.display(), vis.len(), ir.len());
        }
        if n == 0 {
            log::warn!("skipping {}: no frames", clip.display());
            continue;
        }

        let mut frames = Vec::with_capacity(n);
        for k in 0..n {
            let irf = ImagePlane::load(&ir[k])?;
            let (iw, ih) = (irf.width(), irf.height());
            let (w, h) = *size.get_or_insert((iw, ih));
            let rgb = RgbFrame::load(&vis[k])?.resize_bilinear(w, h);
            let irf = if (iw, ih) == (w, h) { irf } else { irf.resize_bilinear(w, h) };
            frames.push((rgb, irf, (w as f64 / iw as f64, h as f64 / ih as f64)));
        }
        let (w, h) = size.expect("set by the first frame");
        let start = out.len();
        for k in 0..n {
            let r = &ann.gt_rect[k];
            if ann.exist[k] == 0 || r.is_empty() {
                continue;
            }
            let (sx, sy) = frames[k].2;
            let b = BBox {
                x_min: (r[0] * sx).max(0.0),
                y_min: (r[1] * sy).max(0.0),
                x_max: ((r[0] + r[2]) * sx).min(w as f64),
                y_max: ((r[1] + r[3]) * sy).min(h as f64),
            };
            if !(b.width() > 0.0 && b.height() > 0.0) {
                continue;
            }
            let p = k.saturating_sub(1);
            out.push(SamplePair {
                rgb: frames[k].0.clone(),
                ir: frames[k].1.clone(),
                prev_rgb: frames[p].0.clone(),
                prev_ir: frames[p].1.clone(),
                gt: b,
                frame_index: k,
            });
        }
        log::info!("{}: {} annotated frames", clip.display(), out.len() - start);
    }
    Ok(out)
}
