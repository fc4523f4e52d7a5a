use std::path::Path;

use serde::{Deserialize, Serialize};

use super::LabelMap;
use crate::detection::BBox;
use crate::error::{Error, Result};
use crate::image::ImagePlane;

/// Region adjacency graph over a label map. Node `i` is segment `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rag {
    node_count: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    features: Vec<Vec<f64>>,
    boxes: Vec<BBox>,
    areas: Vec<usize>,
    labels: LabelMap,
}

/// Serialized form with a fixed key order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RagDocument {
    pub nodes: usize,
    pub edges: Vec<[usize; 2]>,
    pub features: Vec<Vec<f64>>,
    pub boxes: Vec<[f64; 4]>,
}

impl Rag {
    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// Undirected edges `(i, j)` with `i < j`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn neighbor_lists(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn areas(&self) -> &[usize] {
        &self.areas
    }

    pub fn labels(&self) -> &LabelMap {
        &self.labels
    }

    pub fn adjacency_dense(&self) -> Vec<Vec<bool>> {
        let mut a = vec![vec![false; self.node_count]; self.node_count];
        for &(i, j) in &self.edges {
            a[i][j] = true;
            a[j][i] = true;
        }
        a
    }

    /// Number of pixels of each node that fall inside `b`.
    pub fn pixels_inside(&self, b: &BBox) -> Vec<usize> {
        let mut counts = vec![0usize; self.node_count];
        let (w, h) = (self.labels.width(), self.labels.height());
        for y in 0..h {
            for x in 0..w {
                if b.contains_pixel(x, y) {
                    counts[self.labels.get(x, y) as usize] += 1;
                }
            }
        }
        counts
    }

    pub fn to_document(&self) -> RagDocument {
        RagDocument {
            nodes: self.node_count,
            edges: self.edges.iter().map(|&(i, j)| [i, j]).collect(),
            features: self.features.clone(),
            boxes: self
                .boxes
                .iter()
                .map(|b| [b.x_min, b.y_min, b.x_max, b.y_max])
                .collect(),
        }
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.to_document()).expect("rag serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Features appended after the plane means: centroid x, centroid y, area.
pub const GEOMETRY_FEATURES: usize = 3;

/// Builds the 4-adjacency graph of `labels`. Node features are the mean of
/// every feature plane over the segment, then normalized centroid x and y,
/// then the area fraction.
pub fn build_rag(labels: &LabelMap, feature_planes: &[ImagePlane]) -> Result<Rag> {
    let n = labels.segment_count();
    if n == 0 {
        return Err(Error::Data("label map has no segments".into()));
    }
    if feature_planes.is_empty() {
        return Err(Error::param("at least one feature plane is required"));
    }
    let (w, h) = (labels.width(), labels.height());
    for p in feature_planes {
        if p.width() != w || p.height() != h {
            return Err(Error::dim(format!(
                "feature plane {}x{} vs labels {w}x{h}",
                p.width(),
                p.height()
            )));
        }
    }

    let mut pairs = std::collections::BTreeSet::new();
    let mut areas = vec![0usize; n];
    let mut sums = vec![vec![0.0f64; feature_planes.len()]; n];
    let mut cx = vec![0.0f64; n];
    let mut cy = vec![0.0f64; n];
    let mut bounds = vec![(usize::MAX, usize::MAX, 0usize, 0usize); n];
    for y in 0..h {
        for x in 0..w {
            let l = labels.get(x, y) as usize;
            areas[l] += 1;
            for (k, p) in feature_planes.iter().enumerate() {
                sums[l][k] += p.get(x, y);
            }
            cx[l] += x as f64 + 0.5;
            cy[l] += y as f64 + 0.5;
            let b = &mut bounds[l];
            b.0 = b.0.min(x);
            b.1 = b.1.min(y);
            b.2 = b.2.max(x);
            b.3 = b.3.max(y);
            if x + 1 < w {
                let r = labels.get(x + 1, y) as usize;
                if r != l {
                    pairs.insert((l.min(r), l.max(r)));
                }
            }
            if y + 1 < h {
                let d = labels.get(x, y + 1) as usize;
                if d != l {
                    pairs.insert((l.min(d), l.max(d)));
                }
            }
        }
    }
    let edges: Vec<(usize, usize)> = pairs.into_iter().collect();
    let mut neighbors = vec![Vec::new(); n];
    for &(i, j) in &edges {
        neighbors[i].push(j);
        neighbors[j].push(i);
    }
    neighbors.iter_mut().for_each(|v| v.sort_unstable());

    let total = (w * h) as f64;
    let features = (0..n)
        .map(|i| {
            let a = areas[i] as f64;
            let mut f: Vec<f64> = sums[i].iter().map(|s| s / a).collect();
            f.push(cx[i] / a / w as f64);
            f.push(cy[i] / a / h as f64);
            f.push(a / total);
            f
        })
        .collect();
    let boxes = bounds
        .iter()
        .map(|&(x0, y0, x1, y1)| BBox {
            x_min: x0 as f64,
            y_min: y0 as f64,
            x_max: (x1 + 1) as f64,
            y_max: (y1 + 1) as f64,
        })
        .collect();
    Ok(Rag {
        node_count: n,
        edges,
        neighbors,
        features,
        boxes,
        areas,
        labels: labels.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_label_grid() {
        let labels = LabelMap::from_raw(2, 2, &[0, 1, 2, 3]).unwrap();
        let rag = build_rag(&labels, &[ImagePlane::zeros(2, 2)]).unwrap();
        assert_eq!(rag.node_count(), 4);
        assert_eq!(rag.edges(), &[(0, 1), (0, 2), (1, 3), (2, 3)]);
    }

    #[test]
    fn single_segment_has_no_edges() {
        let labels = LabelMap::from_raw(3, 3, &[0; 9]).unwrap();
        let rag = build_rag(&labels, &[ImagePlane::constant(3, 3, 0.5)]).unwrap();
        assert_eq!(rag.node_count(), 1);
        assert!(rag.edges().is_empty());
        assert_eq!(rag.features()[0], vec![0.5, 0.5, 0.5, 1.0]);
    }

    #[test]
    fn vertical_split_centroids() {
        let (w, h) = (8, 6);
        let raw: Vec<usize> = (0..w * h).map(|i| usize::from(i % w >= w / 2)).collect();
        let labels = LabelMap::from_raw(w, h, &raw).unwrap();
        let rag = build_rag(&labels, &[ImagePlane::zeros(w, h)]).unwrap();
        assert_eq!(rag.edges(), &[(0, 1)]);
        let f = rag.features();
        assert!((f[0][1] - 0.25).abs() < 1e-15 && (f[0][2] - 0.5).abs() < 1e-15);
        assert!((f[1][1] - 0.75).abs() < 1e-15 && (f[1][2] - 0.5).abs() < 1e-15);
        assert_eq!(rag.boxes()[1], BBox { x_min: 4.0, y_min: 0.0, x_max: 8.0, y_max: 6.0 });
    }

    #[test]
    fn errors() {
        let labels = LabelMap::from_raw(2, 2, &[0, 1, 2, 3]).unwrap();
        assert!(build_rag(&labels, &[]).is_err());
        assert!(matches!(
            build_rag(&labels, &[ImagePlane::zeros(3, 2)]),
            Err(Error::Dimension(_))
        ));
        let empty = LabelMap::from_raw(0, 0, &[]).unwrap();
        assert!(build_rag(&empty, &[ImagePlane::zeros(0, 0)]).is_err());
    }
}
