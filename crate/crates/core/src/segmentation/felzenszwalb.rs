use super::{check_nonempty, DisjointSet, LabelMap};
use crate::error::{Error, Result};
use crate::fusion::gaussian_blur;
use crate::image::ImagePlane;

/// Efficient graph-based segmentation over the 8-connected pixel grid.
///
/// Edges are processed by ascending weight (ties by edge order) and two
/// components merge when the edge weight does not exceed either component's
/// internal difference plus `scale / |C|`. A final pass merges any component
/// smaller than `min_size` across its cheapest edges.
pub fn felzenszwalb(img: &ImagePlane, scale: f64, sigma: f64, min_size: usize) -> Result<LabelMap> {
    check_nonempty(img)?;
    if !(scale > 0.0) {
        return Err(Error::param("scale must be positive"));
    }
    if !(sigma >= 0.0) {
        return Err(Error::param("sigma must be nonnegative"));
    }
    if min_size == 0 {
        return Err(Error::param("min_size must be at least 1"));
    }
    let (w, h) = (img.width(), img.height());
    let smoothed = if sigma > 0.0 {
        gaussian_blur(img, sigma)
    } else {
        img.clone()
    };
    let px = smoothed.data();

    let mut edges: Vec<(f64, u32, u32)> = Vec::with_capacity(4 * w * h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut push = |j: usize| edges.push(((px[i] - px[j]).abs(), i as u32, j as u32));
            if x + 1 < w {
                push(i + 1);
            }
            if y + 1 < h {
                push(i + w);
                if x + 1 < w {
                    push(i + w + 1);
                }
                if x > 0 {
                    push(i + w - 1);
                }
            }
        }
    }
    // Stable sort keeps construction order among equal weights.
    edges.sort_by(|a, b| a.0.total_cmp(&b.0));

    let n = w * h;
    let mut ds = DisjointSet::new(n);
    let mut size = vec![1usize; n];
    let mut internal = vec![0.0f64; n];
    for &(wt, a, b) in &edges {
        let (ra, rb) = (ds.find(a as usize), ds.find(b as usize));
        if ra == rb {
            continue;
        }
        let ta = internal[ra] + scale / size[ra] as f64;
        let tb = internal[rb] + scale / size[rb] as f64;
        if wt <= ta.min(tb) {
            let merged = size[ra] + size[rb];
            let root = ds.union(ra, rb);
            size[root] = merged;
            // Edges arrive in ascending order, so `wt` is the new maximum of
            // the merged spanning tree.
            internal[root] = wt;
        }
    }
    for &(_, a, b) in &edges {
        let (ra, rb) = (ds.find(a as usize), ds.find(b as usize));
        if ra != rb && (size[ra] < min_size || size[rb] < min_size) {
            let merged = size[ra] + size[rb];
            let root = ds.union(ra, rb);
            size[root] = merged;
        }
    }
    let raw: Vec<usize> = (0..n).map(|i| ds.find(i)).collect();
    LabelMap::from_raw(w, h, &raw)
}
