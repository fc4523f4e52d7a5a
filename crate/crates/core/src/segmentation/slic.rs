use super::{check_nonempty, connected_components, DisjointSet, LabelMap, LIGHTNESS_SCALE};
use crate::error::{Error, Result};
use crate::fusion::gaussian_blur;
use crate::image::ImagePlane;

const ITERATIONS: usize = 10;

#[derive(Clone, Copy, Debug)]
struct Center {
    l: f64,
    x: f64,
    y: f64,
}

/// Simple linear iterative clustering on a grayscale plane.
///
/// Centers start on a regular grid; each iteration assigns pixels within a
/// `2S x 2S` window of a center by `d_l² + (m/S)² d_xy²` and moves centers to
/// the mean of their members. Disconnected fragments of a cluster are merged
/// into the largest adjacent segment afterwards.
pub fn slic(img: &ImagePlane, n_segments: usize, compactness: f64, sigma: f64) -> Result<LabelMap> {
    check_nonempty(img)?;
    if n_segments == 0 {
        return Err(Error::param("n_segments must be at least 1"));
    }
    if n_segments > img.len() {
        return Err(Error::param(format!(
            "n_segments {n_segments} exceeds pixel count {}",
            img.len()
        )));
    }
    if !(compactness > 0.0) {
        return Err(Error::param("compactness must be positive"));
    }
    if !(sigma >= 0.0) {
        return Err(Error::param("sigma must be nonnegative"));
    }
    let (w, h) = (img.width(), img.height());
    let smoothed = if sigma > 0.0 {
        gaussian_blur(img, sigma)
    } else {
        img.clone()
    };
    let light: Vec<f64> = smoothed.data().iter().map(|v| v * LIGHTNESS_SCALE).collect();

    let ny = ((n_segments as f64 * h as f64 / w as f64).sqrt().round() as usize).clamp(1, h);
    let nx = ((n_segments as f64 / ny as f64).round() as usize).clamp(1, w);
    let step = ((w * h) as f64 / (nx * ny) as f64).sqrt();
    let mut centers: Vec<Center> = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let x = (i as f64 + 0.5) * w as f64 / nx as f64;
            let y = (j as f64 + 0.5) * h as f64 / ny as f64;
            let (px, py) = ((x as usize).min(w - 1), (y as usize).min(h - 1));
            centers.push(Center {
                l: light[py * w + px],
                x,
                y,
            });
        }
    }

    let spatial_weight = (compactness / step).powi(2);
    let radius = step.ceil() as isize;
    let mut labels = vec![usize::MAX; w * h];
    let mut dist = vec![f64::INFINITY; w * h];
    for _ in 0..ITERATIONS {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let (cx, cy) = (c.x.floor() as isize, c.y.floor() as isize);
            let y0 = (cy - radius).max(0) as usize;
            let y1 = ((cy + radius) as usize).min(h - 1);
            let x0 = (cx - radius).max(0) as usize;
            let x1 = ((cx + radius) as usize).min(w - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let i = y * w + x;
                    let dl = light[i] - c.l;
                    let dx = x as f64 + 0.5 - c.x;
                    let dy = y as f64 + 0.5 - c.y;
                    let d = dl * dl + spatial_weight * (dx * dx + dy * dy);
                    if d < dist[i] {
                        dist[i] = d;
                        labels[i] = k;
                    }
                }
            }
        }
        // Pixels outside every window go to the spatially nearest center.
        for i in 0..w * h {
            if labels[i] == usize::MAX || dist[i].is_infinite() {
                let (px, py) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
                labels[i] = nearest_center(&centers, px, py);
            }
        }
        let mut acc = vec![(0.0f64, 0.0f64, 0.0f64, 0usize); centers.len()];
        for (i, &k) in labels.iter().enumerate() {
            let a = &mut acc[k];
            a.0 += light[i];
            a.1 += (i % w) as f64 + 0.5;
            a.2 += (i / w) as f64 + 0.5;
            a.3 += 1;
        }
        for (c, a) in centers.iter_mut().zip(&acc) {
            if a.3 > 0 {
                let n = a.3 as f64;
                *c = Center {
                    l: a.0 / n,
                    x: a.1 / n,
                    y: a.2 / n,
                };
            }
        }
    }
    Ok(enforce_connectivity(w, h, &labels))
}

fn nearest_center(centers: &[Center], x: f64, y: f64) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (k, c) in centers.iter().enumerate() {
        let d = (c.x - x).powi(2) + (c.y - y).powi(2);
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

/// Keeps the largest fragment of every cluster and merges each orphan
/// fragment into the adjacent segment with the largest area (ties to the
/// lower segment id).
fn enforce_connectivity(w: usize, h: usize, clusters: &[usize]) -> LabelMap {
    let cc = connected_components(w, h, clusters);
    let k = cc.segment_count();
    let sizes = cc.sizes();
    let mut cluster_of = vec![0usize; k];
    for (i, &c) in cc.labels().iter().enumerate() {
        cluster_of[c as usize] = clusters[i];
    }
    let mut largest: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
    for comp in 0..k {
        let e = largest.entry(cluster_of[comp]).or_insert(comp);
        if sizes[comp] > sizes[*e] {
            *e = comp;
        }
    }
    let mut orphans: Vec<usize> = (0..k).filter(|&c| largest[&cluster_of[c]] != c).collect();
    if orphans.is_empty() {
        return cc;
    }
    orphans.sort_by_key(|&c| (sizes[c], c));

    let mut neighbors = vec![Vec::new(); k];
    for y in 0..h {
        for x in 0..w {
            let a = cc.get(x, y) as usize;
            if x + 1 < w {
                let b = cc.get(x + 1, y) as usize;
                if a != b {
                    neighbors[a].push(b);
                    neighbors[b].push(a);
                }
            }
            if y + 1 < h {
                let b = cc.get(x, y + 1) as usize;
                if a != b {
                    neighbors[a].push(b);
                    neighbors[b].push(a);
                }
            }
        }
    }
    let mut ds = DisjointSet::new(k);
    let mut area = sizes.clone();
    for &o in &orphans {
        let ro = ds.find(o);
        let mut best: Option<(usize, usize)> = None;
        for &nb in &neighbors[o] {
            let rn = ds.find(nb);
            if rn == ro {
                continue;
            }
            let better = match best {
                None => true,
                Some((ba, br)) => area[rn] > ba || (area[rn] == ba && rn < br),
            };
            if better {
                best = Some((area[rn], rn));
            }
        }
        if let Some((_, target)) = best {
            let merged = area[ro] + area[target];
            let root = ds.union(ro, target);
            area[root] = merged;
        }
    }
    let raw: Vec<usize> = cc.labels().iter().map(|&c| ds.find(c as usize)).collect();
    LabelMap::from_raw(w, h, &raw).expect("dimensions match")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_four_quadrants() {
        let img = ImagePlane::constant(32, 32, 0.4);
        let m = slic(&img, 4, 10.0, 0.0).unwrap();
        assert_eq!(m.segment_count(), 4);
        for s in m.sizes() {
            assert!((230..=282).contains(&s), "size {s}");
        }
        // axis-aligned quadrants
        assert_ne!(m.get(0, 0), m.get(31, 0));
        assert_ne!(m.get(0, 0), m.get(0, 31));
        assert_eq!(m.get(0, 0), m.get(15, 15));
    }

    #[test]
    fn single_segment() {
        let img = ImagePlane::from_fn(9, 7, |x, y| ((x * y) % 5) as f64 / 5.0);
        let m = slic(&img, 1, 20.0, 0.5).unwrap();
        assert_eq!(m.segment_count(), 1);
    }

    #[test]
    fn too_many_segments_is_an_error() {
        let img = ImagePlane::zeros(4, 4);
        assert!(matches!(slic(&img, 17, 10.0, 0.0), Err(Error::Parameter(_))));
        assert!(slic(&img, 0, 10.0, 0.0).is_err());
        assert!(slic(&img, 2, 0.0, 0.0).is_err());
    }
}
