//! RGB-IR frame fusion.
//!
//! Each source is split into base, coarse and fine layers by an
//! edge-preserving smoother followed by a Gaussian. Detail layers are fused by
//! a pulse-coupled selection driven by windowed modified-Laplacian activity;
//! base layers are blended with histogram-contrast saliency weights. The fused
//! frame is the sum of the three fused layers.

use crate::error::{Error, Result};
use crate::image::{ImagePlane, RgbFrame};

/// Regularization of the gradient norm inside the curvature smoother. Sets the
/// contrast above which diffusion across an edge is suppressed.
const CURVATURE_EPS: f64 = 0.1;

/// Additive base / coarse / fine split of a frame.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTriple {
    pub base: ImagePlane,
    pub coarse: ImagePlane,
    pub fine: ImagePlane,
}

impl LayerTriple {
    pub fn reconstruct(&self) -> ImagePlane {
        let bc = self.base.zip_map(&self.coarse, |a, b| a + b);
        bc.zip_map(&self.fine, |a, b| a + b)
    }
}

/// Center-weighted square window for the activity sum.
#[derive(Clone, Debug, PartialEq)]
pub struct LaplacianWindow {
    p: usize,
    q: usize,
    weights: Vec<f64>,
}

impl LaplacianWindow {
    /// `weights` is row-major with `2q+1` rows of `2p+1` entries.
    pub fn new(p: usize, q: usize, weights: Vec<f64>) -> Result<Self> {
        let (w, h) = (2 * p + 1, 2 * q + 1);
        if weights.len() != w * h {
            return Err(Error::dim(format!(
                "window {w}x{h} needs {} weights, got {}",
                w * h,
                weights.len()
            )));
        }
        if weights.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::param("window weights must be finite and nonnegative"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::param(format!("window weights sum to {sum}, not 1")));
        }
        let center = weights[q * w + p];
        for j in 0..h {
            for i in 0..w {
                let v = weights[j * w + i];
                let mirrored = weights[(h - 1 - j) * w + (w - 1 - i)];
                if (v - mirrored).abs() > 1e-12 {
                    return Err(Error::param("window weights must be point-symmetric"));
                }
                if v > center + 1e-15 {
                    return Err(Error::param("window center must carry the largest weight"));
                }
            }
        }
        Ok(Self { p, q, weights })
    }

    /// Separable binomial window, `(2p+1) x (2q+1)`.
    pub fn binomial(p: usize, q: usize) -> Self {
        let row = binomial_row(2 * p);
        let col = binomial_row(2 * q);
        let mut weights = Vec::with_capacity(row.len() * col.len());
        for cy in &col {
            for cx in &row {
                weights.push(cy * cx);
            }
        }
        Self { p, q, weights }
    }

    pub fn half_width(&self) -> usize {
        self.p
    }

    pub fn half_height(&self) -> usize {
        self.q
    }

    /// Weight at offset `(dx, dy)`, both within the half extents.
    #[inline]
    pub fn weight(&self, dx: isize, dy: isize) -> f64 {
        let w = 2 * self.p + 1;
        let i = (dx + self.p as isize) as usize;
        let j = (dy + self.q as isize) as usize;
        self.weights[j * w + i]
    }
}

impl Default for LaplacianWindow {
    /// `1/16 [1 2 1] x [1 2 1]`.
    fn default() -> Self {
        Self::binomial(1, 1)
    }
}

fn binomial_row(n: usize) -> Vec<f64> {
    let mut row = vec![1.0f64];
    for _ in 0..n {
        let mut next = vec![1.0; row.len() + 1];
        for i in 1..row.len() {
            next[i] = row[i - 1] + row[i];
        }
        row = next;
    }
    let s: f64 = row.iter().sum();
    row.iter().map(|v| v / s).collect()
}

/// Per-pixel saliency weights in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap(ImagePlane);

impl SaliencyMap {
    pub fn new(values: ImagePlane) -> Result<Self> {
        if values.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::param("saliency values must lie in [0, 1]"));
        }
        Ok(Self(values))
    }

    pub fn plane(&self) -> &ImagePlane {
        &self.0
    }

    pub fn into_plane(self) -> ImagePlane {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub smoother_iters: usize,
    pub gaussian_sigma: f64,
    pub window: LaplacianWindow,
    pub pcnn_iters: usize,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            smoother_iters: 4,
            gaussian_sigma: 2.0,
            window: LaplacianWindow::default(),
            pcnn_iters: 10,
        }
    }
}

/// Edge-preserving smoother: explicit steps of regularized mean-curvature
/// flow, `u_t = (u_xx (e² + u_y²) − 2 u_x u_y u_xy + u_yy (e² + u_x²)) /
/// (e² + |∇u|²)`, central differences on a clamped 3x3 stencil.
///
/// Constants are fixed points. Across a strong edge the normal diffusion is
/// damped by `e² / (e² + |∇u|²)`.
pub fn curvature_smooth(plane: &ImagePlane, iterations: usize, step: f64) -> ImagePlane {
    let e2 = CURVATURE_EPS * CURVATURE_EPS;
    let mut cur = plane.clone();
    let (w, h) = (plane.width(), plane.height());
    for _ in 0..iterations {
        let next = ImagePlane::from_fn(w, h, |x, y| {
            let (xi, yi) = (x as isize, y as isize);
            let c = cur.get(x, y);
            let l = cur.get_clamped(xi - 1, yi);
            let r = cur.get_clamped(xi + 1, yi);
            let u = cur.get_clamped(xi, yi - 1);
            let d = cur.get_clamped(xi, yi + 1);
            let ux = 0.5 * (r - l);
            let uy = 0.5 * (d - u);
            let uxx = r - 2.0 * c + l;
            let uyy = d - 2.0 * c + u;
            let uxy = 0.25
                * (cur.get_clamped(xi + 1, yi + 1) - cur.get_clamped(xi + 1, yi - 1)
                    - cur.get_clamped(xi - 1, yi + 1)
                    + cur.get_clamped(xi - 1, yi - 1));
            let num = uxx * (e2 + uy * uy) - 2.0 * ux * uy * uxy + uyy * (e2 + ux * ux);
            c + step * num / (e2 + ux * ux + uy * uy)
        });
        cur = next;
    }
    cur
}

/// Separable Gaussian blur, radius `ceil(3 sigma)`, clamped borders.
pub fn gaussian_blur(plane: &ImagePlane, sigma: f64) -> ImagePlane {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= s);
    let (w, h) = (plane.width(), plane.height());
    let horiz = ImagePlane::from_fn(w, h, |x, y| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &wk)| wk * plane.get_clamped(x as isize + k as isize - radius, y as isize))
            .sum()
    });
    ImagePlane::from_fn(w, h, |x, y| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &wk)| wk * horiz.get_clamped(x as isize, y as isize + k as isize - radius))
            .sum()
    })
}

/// Splits a frame into base (smoothed then blurred), coarse (smoothed minus
/// base) and fine (frame minus smoothed) layers.
pub fn decompose(frame: &ImagePlane, smoother_iters: usize, gaussian_sigma: f64) -> Result<LayerTriple> {
    if frame.is_empty() {
        return Err(Error::dim("cannot decompose an empty frame"));
    }
    if smoother_iters == 0 {
        return Err(Error::param("smoother_iters must be at least 1"));
    }
    if !(gaussian_sigma > 0.0) {
        return Err(Error::param("gaussian_sigma must be positive"));
    }
    let smooth = curvature_smooth(frame, smoother_iters, 0.1);
    let base = gaussian_blur(&smooth, gaussian_sigma);
    let coarse = smooth.zip_map(&base, |s, b| s - b);
    // fine is computed so that base + coarse + fine reproduces the frame in
    // floating point as closely as the additions allow.
    let fine = ImagePlane::from_fn(frame.width(), frame.height(), |x, y| {
        frame.get(x, y) - (base.get(x, y) + coarse.get(x, y))
    });
    Ok(LayerTriple { base, coarse, fine })
}

/// 5-point discrete Laplacian with clamped borders.
pub fn discrete_laplacian(plane: &ImagePlane) -> ImagePlane {
    ImagePlane::from_fn(plane.width(), plane.height(), |x, y| {
        let (xi, yi) = (x as isize, y as isize);
        plane.get_clamped(xi - 1, yi)
            + plane.get_clamped(xi + 1, yi)
            + plane.get_clamped(xi, yi - 1)
            + plane.get_clamped(xi, yi + 1)
            - 4.0 * plane.get(x, y)
    })
}

/// Window-weighted sum of squared modified Laplacians. Nonnegative.
pub fn modified_laplacian(plane: &ImagePlane, window: &LaplacianWindow) -> Result<ImagePlane> {
    let (p, q) = (window.half_width(), window.half_height());
    if plane.width() < 2 * p + 1 || plane.height() < 2 * q + 1 {
        return Err(Error::dim(format!(
            "window {}x{} exceeds plane {}x{}",
            2 * p + 1,
            2 * q + 1,
            plane.width(),
            plane.height()
        )));
    }
    let lap = discrete_laplacian(plane);
    let ml = ImagePlane::from_fn(plane.width(), plane.height(), |x, y| {
        let (xi, yi) = (x as isize, y as isize);
        let c2 = 2.0 * lap.get(x, y);
        (c2 - lap.get_clamped(xi - 1, yi) - lap.get_clamped(xi + 1, yi)).abs()
            + (c2 - lap.get_clamped(xi, yi - 1) - lap.get_clamped(xi, yi + 1)).abs()
    });
    let (pi, qi) = (p as isize, q as isize);
    Ok(ImagePlane::from_fn(plane.width(), plane.height(), |x, y| {
        let mut acc = 0.0;
        for dy in -qi..=qi {
            for dx in -pi..=pi {
                let v = ml.get_clamped(x as isize + dx, y as isize + dy);
                acc += window.weight(dx, dy) * v * v;
            }
        }
        acc
    }))
}

const PCNN_LINKING: f64 = 0.2;
const PCNN_DECAY: f64 = 0.8;
const PCNN_THRESHOLD_GAIN: f64 = 1.0;

/// Fire counts of a simplified pulse-coupled network whose feeding input is
/// `stimulus`. The threshold starts at zero so any positive stimulus fires on
/// the first step; zero stimulus never fires.
pub fn pcnn_fire_counts(stimulus: &ImagePlane, iterations: usize) -> Vec<u32> {
    let (w, h) = (stimulus.width(), stimulus.height());
    let n = w * h;
    let mut threshold = vec![0.0f64; n];
    let mut fired = vec![0u8; n];
    let mut counts = vec![0u32; n];
    for _ in 0..iterations {
        let mut next_fired = vec![0u8; n];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let mut link = 0.0;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let (nx, ny) = (x as isize + dx, y as isize + dy);
                        if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                            continue;
                        }
                        let wgt = if dx == 0 || dy == 0 { 1.0 } else { 0.5 };
                        link += wgt * fired[ny as usize * w + nx as usize] as f64;
                    }
                }
                let internal = stimulus.data()[i] * (1.0 + PCNN_LINKING * link);
                if internal > threshold[i] {
                    next_fired[i] = 1;
                    counts[i] += 1;
                }
            }
        }
        for i in 0..n {
            threshold[i] = PCNN_DECAY * threshold[i] + PCNN_THRESHOLD_GAIN * next_fired[i] as f64;
        }
        fired = next_fired;
    }
    counts
}

/// Per-pixel selection between two detail layers. The layer whose pulse
/// network fires more often wins; ties go to `a`.
pub fn pcnn_fuse_detail(
    a: &ImagePlane,
    b: &ImagePlane,
    window: &LaplacianWindow,
    pcnn_iters: usize,
) -> Result<ImagePlane> {
    a.check_same_dims(b, "pcnn_fuse_detail")?;
    let act_a = modified_laplacian(a, window)?;
    let act_b = modified_laplacian(b, window)?;
    // Shared normalization keeps the two networks comparable.
    let peak = act_a
        .data()
        .iter()
        .chain(act_b.data())
        .fold(0.0f64, |m, &v| m.max(v));
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    let fire_a = pcnn_fire_counts(&act_a.map(|v| v * scale), pcnn_iters);
    let fire_b = pcnn_fire_counts(&act_b.map(|v| v * scale), pcnn_iters);
    let mut out = a.clone();
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        if fire_b[i] > fire_a[i] {
            *o = b.data()[i];
        }
    }
    Ok(out)
}

/// Histogram global-contrast saliency: each pixel scores the count-weighted
/// distance from its intensity bin to every other bin, then the map is
/// min-max normalized. A constant raw map normalizes to 0.5.
pub fn saliency(base: &ImagePlane) -> Result<SaliencyMap> {
    if base.is_empty() {
        return Err(Error::dim("saliency of an empty plane"));
    }
    let bins = quantize_bins(base);
    let mut hist = [0u64; 256];
    for &b in &bins {
        hist[b as usize] += 1;
    }
    let mut per_bin = [0.0f64; 256];
    for (level, slot) in per_bin.iter_mut().enumerate() {
        let s = level as f64 / 255.0;
        *slot = hist
            .iter()
            .enumerate()
            .map(|(n, &c)| c as f64 * (s - n as f64 / 255.0).abs())
            .sum();
    }
    let raw: Vec<f64> = bins.iter().map(|&b| per_bin[b as usize]).collect();
    let values = ImagePlane::new(base.width(), base.height(), raw)?;
    Ok(SaliencyMap(normalize_min_max(&values)))
}

/// Min-max scale to `[0, 1]` then round to one of 256 levels.
pub(crate) fn quantize_bins(plane: &ImagePlane) -> Vec<u8> {
    let (lo, hi) = plane.min_max();
    let span = hi - lo;
    plane
        .data()
        .iter()
        .map(|&v| {
            if span > 0.0 {
                (((v - lo) / span) * 255.0).round_ties_even().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}

fn normalize_min_max(plane: &ImagePlane) -> ImagePlane {
    let (lo, hi) = plane.min_max();
    if hi > lo {
        plane.map(|v| (v - lo) / (hi - lo))
    } else {
        plane.map(|_| 0.5)
    }
}

/// Saliency-weighted blend of two base layers.
pub fn base_fuse(
    b_rgb: &ImagePlane,
    b_ir: &ImagePlane,
    v_rgb: &SaliencyMap,
    v_ir: &SaliencyMap,
) -> Result<ImagePlane> {
    b_rgb.check_same_dims(b_ir, "base_fuse bases")?;
    b_rgb.check_same_dims(v_rgb.plane(), "base_fuse rgb saliency")?;
    b_rgb.check_same_dims(v_ir.plane(), "base_fuse ir saliency")?;
    let n = b_rgb.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (br, bi) = (b_rgb.data()[i], b_ir.data()[i]);
        let (vr, vi) = (v_rgb.plane().data()[i], v_ir.plane().data()[i]);
        let alpha = vi * bi + (1.0 - vi) * br;
        let beta = vr * br + (1.0 - vr) * bi;
        out.push(0.5 * (alpha + beta));
    }
    ImagePlane::new(b_rgb.width(), b_rgb.height(), out)
}

/// Fuses the luminance of `rgb` with `ir` into one frame in `[0, 1]`.
pub fn fuse_frames(rgb: &RgbFrame, ir: &ImagePlane, params: &FusionParams) -> Result<ImagePlane> {
    rgb.r.check_same_dims(ir, "fuse_frames")?;
    let luma = rgb.luminance();
    let lr = decompose(&luma, params.smoother_iters, params.gaussian_sigma)?;
    let li = decompose(ir, params.smoother_iters, params.gaussian_sigma)?;
    let fine = pcnn_fuse_detail(&lr.fine, &li.fine, &params.window, params.pcnn_iters)?;
    let coarse = pcnn_fuse_detail(&lr.coarse, &li.coarse, &params.window, params.pcnn_iters)?;
    let v_rgb = saliency(&lr.base)?;
    let v_ir = saliency(&li.base)?;
    let base = base_fuse(&lr.base, &li.base, &v_rgb, &v_ir)?;
    let fused = LayerTriple { base, coarse, fine }.reconstruct();
    Ok(fused.clamp01())
}
