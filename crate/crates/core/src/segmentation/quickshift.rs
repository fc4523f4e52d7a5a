use super::{check_nonempty, LabelMap, LIGHTNESS_SCALE};
use crate::error::{Error, Result};
use crate::image::ImagePlane;

/// Density and parent links of a Quickshift run. A root is its own parent.
#[derive(Clone, Debug)]
pub struct QuickshiftForest {
    pub width: usize,
    pub height: usize,
    pub density: Vec<f64>,
    pub parent: Vec<usize>,
    pub parent_dist: Vec<f64>,
}

impl QuickshiftForest {
    /// Strict total order used for linking: higher density first, equal
    /// density broken toward the lower linear index.
    #[inline]
    pub fn ranks_above(&self, q: usize, p: usize) -> bool {
        let (dq, dp) = (self.density[q], self.density[p]);
        dq > dp || (dq == dp && q < p)
    }

    pub fn labels(&self) -> LabelMap {
        let n = self.parent.len();
        let mut root = vec![usize::MAX; n];
        for start in 0..n {
            if root[start] != usize::MAX {
                continue;
            }
            let mut path = vec![start];
            let mut cur = start;
            let r = loop {
                if root[cur] != usize::MAX {
                    break root[cur];
                }
                let p = self.parent[cur];
                if p == cur {
                    break cur;
                }
                path.push(p);
                cur = p;
            };
            for v in path {
                root[v] = r;
            }
        }
        LabelMap::from_raw(self.width, self.height, &root).expect("dimensions match")
    }
}

/// Quickshift mode seeking in the joint `(ratio * lightness, x, y)` space.
pub fn quickshift(img: &ImagePlane, kernel_size: f64, max_dist: f64, ratio: f64) -> Result<LabelMap> {
    Ok(quickshift_forest(img, kernel_size, max_dist, ratio)?.labels())
}

pub fn quickshift_forest(img: &ImagePlane, kernel_size: f64, max_dist: f64, ratio: f64) -> Result<QuickshiftForest> {
    check_nonempty(img)?;
    if !(kernel_size > 0.0) {
        return Err(Error::param("kernel_size must be positive"));
    }
    if !(max_dist > 0.0) {
        return Err(Error::param("max_dist must be positive"));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::param("ratio must lie in (0, 1]"));
    }
    let (w, h) = (img.width() as isize, img.height() as isize);
    let n = img.len();
    let feat: Vec<f64> = img.data().iter().map(|v| v * LIGHTNESS_SCALE * ratio).collect();
    let inv_two_var = 1.0 / (2.0 * kernel_size * kernel_size);
    let window = (3.0 * kernel_size).ceil() as isize;

    let mut density = vec![0.0f64; n];
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            let mut acc = 0.0;
            for dy in -window..=window {
                let ny = y + dy;
                if ny < 0 || ny >= h {
                    continue;
                }
                for dx in -window..=window {
                    let nx = x + dx;
                    if nx < 0 || nx >= w {
                        continue;
                    }
                    let j = (ny * w + nx) as usize;
                    let dc = feat[i] - feat[j];
                    let d2 = dc * dc + (dx * dx + dy * dy) as f64;
                    acc += (-d2 * inv_two_var).exp();
                }
            }
            density[i] = acc;
        }
    }

    let reach = max_dist.floor() as isize;
    let max_d2 = max_dist * max_dist;
    let mut parent: Vec<usize> = (0..n).collect();
    let mut parent_dist = vec![0.0f64; n];
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            let mut best: Option<(f64, usize)> = None;
            for dy in -reach..=reach {
                let ny = y + dy;
                if ny < 0 || ny >= h {
                    continue;
                }
                for dx in -reach..=reach {
                    let nx = x + dx;
                    if nx < 0 || nx >= w || (dx == 0 && dy == 0) {
                        continue;
                    }
                    let j = (ny * w + nx) as usize;
                    let higher = density[j] > density[i] || (density[j] == density[i] && j < i);
                    if !higher {
                        continue;
                    }
                    let dc = feat[i] - feat[j];
                    let d2 = dc * dc + (dx * dx + dy * dy) as f64;
                    if d2 > max_d2 {
                        continue;
                    }
                    let closer = match best {
                        None => true,
                        Some((bd, bj)) => d2 < bd || (d2 == bd && j < bj),
                    };
                    if closer {
                        best = Some((d2, j));
                    }
                }
            }
            if let Some((d2, j)) = best {
                parent[i] = j;
                parent_dist[i] = d2.sqrt();
            }
        }
    }
    Ok(QuickshiftForest {
        width: img.width(),
        height: img.height(),
        density,
        parent,
        parent_dist,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_is_one_tree() {
        let m = quickshift(&ImagePlane::constant(24, 18, 0.3), 3.0, 6.0, 0.5).unwrap();
        assert_eq!(m.segment_count(), 1);
    }

    #[test]
    fn separated_blobs_get_distinct_segments() {
        let blob = |x: f64, y: f64, cx: f64, cy: f64| (-((x - cx).powi(2) + (y - cy).powi(2)) / 8.0).exp();
        let img = ImagePlane::from_fn(40, 20, |x, y| {
            let (x, y) = (x as f64, y as f64);
            blob(x, y, 8.0, 10.0) + blob(x, y, 31.0, 10.0)
        });
        let m = quickshift(&img, 3.0, 6.0, 0.5).unwrap();
        assert!(m.segment_count() >= 2);
        assert_ne!(m.get(8, 10), m.get(31, 10));
    }

    #[test]
    fn parameter_validation() {
        let img = ImagePlane::zeros(4, 4);
        assert!(quickshift(&img, 0.0, 1.0, 0.5).is_err());
        assert!(quickshift(&img, 1.0, 0.0, 0.5).is_err());
        assert!(quickshift(&img, 1.0, 1.0, 0.0).is_err());
        assert!(quickshift(&img, 1.0, 1.0, 1.5).is_err());
    }
}
