//! Superpixel segmentation and region adjacency graphs.
//!
//! SLIC and Quickshift measure intensity on a 0..100 lightness scale so that
//! their compactness / ratio parameters keep the meaning they have for color
//! images in Lab space. Felzenszwalb works on raw `[0, 1]` intensities.

mod felzenszwalb;
mod quickshift;
mod rag;
mod slic;

use std::path::Path;

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImagePlane;

pub use felzenszwalb::felzenszwalb;
pub use quickshift::{quickshift, quickshift_forest, QuickshiftForest};
pub use rag::{build_rag, Rag, RagDocument, GEOMETRY_FEATURES};
pub use slic::slic;

pub(crate) const LIGHTNESS_SCALE: f64 = 100.0;

/// Dense per-pixel labels using exactly `0..segment_count`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    segment_count: usize,
}

impl LabelMap {
    /// Compacts arbitrary integer labels to `0..K` in order of first
    /// appearance in raster order.
    pub fn from_raw(width: usize, height: usize, raw: &[usize]) -> Result<Self> {
        if raw.len() != width * height {
            return Err(Error::dim("label buffer does not match dimensions"));
        }
        let mut remap = std::collections::HashMap::new();
        let labels = raw
            .iter()
            .map(|&r| {
                let next = remap.len() as u32;
                *remap.entry(r).or_insert(next)
            })
            .collect();
        Ok(Self {
            width,
            height,
            labels,
            segment_count: remap.len(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn segment_count(&self) -> usize {
        self.segment_count
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Pixel count per segment.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.segment_count];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }

    /// Writes the raw label values as a 16-bit grayscale PNG.
    pub fn save_png16(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if self.segment_count > u16::MAX as usize + 1 {
            return Err(Error::Data(format!(
                "{} segments do not fit a 16-bit label image",
                self.segment_count
            )));
        }
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            self.labels.iter().map(|&l| l as u16).collect(),
        )
        .expect("buffer length matches dimensions");
        buf.save(path).map_err(|source| Error::Image {
            path: path.into(),
            source,
        })
    }

    pub fn load_png16(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .decode()
            .map_err(|source| Error::Image {
                path: path.into(),
                source,
            })?
            .into_luma16();
        let raw: Vec<usize> = img.as_raw().iter().map(|&v| v as usize).collect();
        Self::from_raw(img.width() as usize, img.height() as usize, &raw)
    }
}

/// Union-find with path halving; union keeps the smaller root index.
#[derive(Clone, Debug)]
pub(crate) struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    pub(crate) fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub(crate) fn union(&mut self, a: usize, b: usize) -> usize {
        let (ra, rb) = (self.find(a), self.find(b));
        let (keep, drop) = if ra <= rb { (ra, rb) } else { (rb, ra) };
        self.parent[drop] = keep;
        keep
    }
}

/// 4-connected components of a raw labeling, as a compact label map.
pub(crate) fn connected_components(width: usize, height: usize, labels: &[usize]) -> LabelMap {
    let mut ds = DisjointSet::new(width * height);
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if x + 1 < width && labels[i] == labels[i + 1] {
                ds.union(i, i + 1);
            }
            if y + 1 < height && labels[i] == labels[i + width] {
                ds.union(i, i + width);
            }
        }
    }
    let roots: Vec<usize> = (0..width * height).map(|i| ds.find(i)).collect();
    LabelMap::from_raw(width, height, &roots).expect("dimensions match")
}

pub(crate) fn check_nonempty(img: &ImagePlane) -> Result<()> {
    if img.is_empty() {
        Err(Error::dim("cannot segment an empty image"))
    } else {
        Ok(())
    }
}

/// Felzenszwalb minimum component size: values below 1 are a fraction of the
/// image area, values from 1 up are pixel counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinSize(pub f64);

impl MinSize {
    pub fn resolve(self, pixel_count: usize) -> usize {
        if self.0 < 1.0 {
            ((self.0 * pixel_count as f64).ceil() as usize).max(1)
        } else {
            self.0.round() as usize
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum Segmenter {
    Slic {
        n_segments: usize,
        compactness: f64,
        sigma: f64,
    },
    Felzenszwalb {
        scale: f64,
        sigma: f64,
        min_size: MinSize,
    },
    Quickshift {
        kernel_size: f64,
        max_dist: f64,
        ratio: f64,
    },
}

impl Segmenter {
    pub fn segment(&self, img: &ImagePlane) -> Result<LabelMap> {
        match *self {
            Segmenter::Slic {
                n_segments,
                compactness,
                sigma,
            } => slic(img, n_segments, compactness, sigma),
            Segmenter::Felzenszwalb {
                scale,
                sigma,
                min_size,
            } => felzenszwalb(img, scale, sigma, min_size.resolve(img.len())),
            Segmenter::Quickshift {
                kernel_size,
                max_dist,
                ratio,
            } => quickshift(img, kernel_size, max_dist, ratio),
        }
    }

    pub fn method_name(&self) -> &'static str {
        match self {
            Segmenter::Slic { .. } => "slic",
            Segmenter::Felzenszwalb { .. } => "felzenszwalb",
            Segmenter::Quickshift { .. } => "quickshift",
        }
    }
}

/// One row of the published hyperparameter sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct PresetRow {
    pub name: &'static str,
    pub segmenter: Segmenter,
    pub reported_loss: f64,
}

/// Every row of the segmentation hyperparameter sweep, verbatim.
pub fn preset_table() -> Vec<PresetRow> {
    let slic = |n, c, s| Segmenter::Slic {
        n_segments: n,
        compactness: c,
        sigma: s,
    };
    let felz = |k, s, m| Segmenter::Felzenszwalb {
        scale: k,
        sigma: s,
        min_size: MinSize(m),
    };
    let qs = |k, d, r| Segmenter::Quickshift {
        kernel_size: k,
        max_dist: d,
        ratio: r,
    };
    vec![
        PresetRow { name: "slic-100", segmenter: slic(100, 25.0, 0.3), reported_loss: 0.184 },
        PresetRow { name: "slic-1000", segmenter: slic(1000, 10.0, 0.7), reported_loss: 0.235 },
        PresetRow { name: "paper-slic", segmenter: slic(250, 20.0, 0.5), reported_loss: 0.176 },
        PresetRow { name: "felz-40", segmenter: felz(40.0, 8.0, 0.9), reported_loss: 0.322 },
        PresetRow { name: "felz-100", segmenter: felz(100.0, 10.0, 0.7), reported_loss: 0.801 },
        PresetRow { name: "paper-felz", segmenter: felz(50.0, 10.0, 0.5), reported_loss: 0.281 },
        PresetRow { name: "quickshift-24", segmenter: qs(24.0, 8.0, 0.8), reported_loss: 0.158 },
        PresetRow { name: "quickshift-6", segmenter: qs(6.0, 4.0, 0.2), reported_loss: 0.059 },
        PresetRow { name: "paper-quickshift", segmenter: qs(3.0, 6.0, 0.5), reported_loss: 0.026 },
    ]
}

/// Resolves a preset name. `paper` is the lowest-loss row (Quickshift 3/6/0.5).
pub fn preset(name: &str) -> Result<Segmenter> {
    let name = if name == "paper" { "paper-quickshift" } else { name };
    preset_table()
        .into_iter()
        .find(|r| r.name == name)
        .map(|r| r.segmenter)
        .ok_or_else(|| Error::Config(format!("unknown segmentation preset `{name}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_raw_compacts_in_raster_order() {
        let m = LabelMap::from_raw(3, 1, &[7, 2, 7]).unwrap();
        assert_eq!(m.labels(), &[0, 1, 0]);
        assert_eq!(m.segment_count(), 2);
    }

    #[test]
    fn components_split_disconnected_regions() {
        // same raw label on both sides of a separator column
        let raw = [0, 1, 0, 0, 1, 0];
        let cc = connected_components(3, 2, &raw);
        assert_eq!(cc.segment_count(), 3);
    }

    #[test]
    fn min_size_fraction_and_pixels() {
        assert_eq!(MinSize(0.5).resolve(4096), 2048);
        assert_eq!(MinSize(64.0).resolve(4096), 64);
    }

    #[test]
    fn presets_resolve() {
        assert_eq!(
            preset("paper").unwrap(),
            Segmenter::Quickshift {
                kernel_size: 3.0,
                max_dist: 6.0,
                ratio: 0.5
            }
        );
        assert_eq!(preset_table().len(), 9);
        assert!(preset("nope").is_err());
    }

    #[test]
    fn label_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = LabelMap::from_raw(4, 2, &[0, 0, 1, 1, 2, 2, 3, 3]).unwrap();
        let p = dir.path().join("l.png");
        m.save_png16(&p).unwrap();
        assert_eq!(LabelMap::load_png16(&p).unwrap(), m);
    }
}
