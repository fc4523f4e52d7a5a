//! Dense optical flow and motion-based background suppression.
//!
//! Flow is a Horn–Schunck fixed point computed with Jacobi sweeps. Intensities
//! are taken on the 0..255 scale, which is the range the classic smoothness
//! weight (15) is calibrated for.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{ImagePlane, RgbFrame};

const INTENSITY_SCALE: f64 = 255.0;
const EDGE_WEIGHT: f64 = 1.0 / 6.0;
const DIAG_WEIGHT: f64 = 1.0 / 12.0;

pub const FLOW_MAGIC: &[u8; 8] = b"OFGPFLOW";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Boundary {
    /// Replicated borders; stencil weights restricted to in-bounds pixels.
    #[default]
    Clamp,
    /// Periodic borders.
    Wrap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowParams {
    pub smoothness: f64,
    pub iterations: usize,
    pub boundary: Boundary,
    /// Gaussian presmoothing of both frames before differentiation; 0 disables.
    pub presmooth_sigma: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            smoothness: 15.0,
            iterations: 200,
            boundary: Boundary::Clamp,
            presmooth_sigma: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub u: ImagePlane,
    pub v: ImagePlane,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            u: ImagePlane::zeros(width, height),
            v: ImagePlane::zeros(width, height),
        }
    }

    pub fn width(&self) -> usize {
        self.u.width()
    }

    pub fn height(&self) -> usize {
        self.u.height()
    }

    pub fn magnitude(&self) -> ImagePlane {
        self.u.zip_map(&self.v, |a, b| a.hypot(b))
    }

    /// Standard color-wheel rendering: hue encodes direction, saturation the
    /// magnitude relative to the largest vector in the field.
    pub fn to_color_wheel(&self) -> RgbFrame {
        let mag = self.magnitude();
        let (_, max_mag) = mag.min_max();
        let scale = if max_mag > 0.0 { 1.0 / max_mag } else { 0.0 };
        let (w, h) = (self.width(), self.height());
        let mut r = ImagePlane::zeros(w, h);
        let mut g = ImagePlane::zeros(w, h);
        let mut b = ImagePlane::zeros(w, h);
        for i in 0..w * h {
            let (u, v) = (self.u.data()[i], self.v.data()[i]);
            let hue = (v.atan2(u).to_degrees() + 360.0) % 360.0;
            let (cr, cg, cb) = hsv_to_rgb(hue, (mag.data()[i] * scale).min(1.0), 1.0);
            r.data_mut()[i] = cr;
            g.data_mut()[i] = cg;
            b.data_mut()[i] = cb;
        }
        RgbFrame { r, g, b }
    }

    /// Writes `OFGPFLOW`, width and height as little-endian u32, then the u
    /// plane and the v plane as little-endian f32.
    pub fn write_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let n = self.u.len();
        let mut out = Vec::with_capacity(16 + 8 * n);
        out.extend_from_slice(FLOW_MAGIC);
        out.extend_from_slice(&(self.width() as u32).to_le_bytes());
        out.extend_from_slice(&(self.height() as u32).to_le_bytes());
        for plane in [&self.u, &self.v] {
            for &s in plane.data() {
                out.extend_from_slice(&(s as f32).to_le_bytes());
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_raw(path: impl AsRef<Path>) -> Result<FlowField> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |reason: &str| Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        };
        if bytes.len() < 16 || &bytes[..8] != FLOW_MAGIC {
            return Err(bad("missing OFGPFLOW header"));
        }
        let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let n = w * h;
        if bytes.len() != 16 + 8 * n {
            return Err(bad("payload length does not match dimensions"));
        }
        let read_plane = |offset: usize| -> Result<ImagePlane> {
            let data = bytes[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            ImagePlane::new(w, h, data)
        };
        Ok(FlowField {
            u: read_plane(16)?,
            v: read_plane(16 + 4 * n)?,
        })
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

/// Per-pixel boolean motion support.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MotionMask {
    width: usize,
    height: usize,
    mask: Vec<bool>,
}

impl MotionMask {
    pub fn new(width: usize, height: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != width * height {
            return Err(Error::dim("mask length does not match dimensions"));
        }
        Ok(Self {
            width,
            height,
            mask,
        })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            mask: vec![true; width * height],
        }
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            mask: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_subset_of(&self, other: &MotionMask) -> bool {
        self.mask.iter().zip(&other.mask).all(|(&a, &b)| !a || b)
    }

    /// Single 3x3 binary dilation.
    pub fn dilate3x3(&self) -> MotionMask {
        let (w, h) = (self.width as isize, self.height as isize);
        let mut out = vec![false; self.mask.len()];
        for y in 0..h {
            for x in 0..w {
                out[(y * w + x) as usize] = (-1..=1).any(|dy| {
                    (-1..=1).any(|dx| {
                        let (nx, ny) = (x + dx, y + dy);
                        nx >= 0 && ny >= 0 && nx < w && ny < h && self.mask[(ny * w + nx) as usize]
                    })
                });
            }
        }
        MotionMask {
            width: self.width,
            height: self.height,
            mask: out,
        }
    }

    pub fn to_plane(&self) -> ImagePlane {
        ImagePlane::new(
            self.width,
            self.height,
            self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask dimensions are consistent")
    }
}

struct Derivatives {
    ix: Vec<f64>,
    iy: Vec<f64>,
    it: Vec<f64>,
}

fn sample(p: &ImagePlane, x: isize, y: isize, boundary: Boundary) -> f64 {
    match boundary {
        Boundary::Clamp => p.get_clamped(x, y),
        Boundary::Wrap => {
            let (w, h) = (p.width() as isize, p.height() as isize);
            p.get(x.rem_euclid(w) as usize, y.rem_euclid(h) as usize)
        }
    }
}

fn presmooth(p: &ImagePlane, sigma: f64, boundary: Boundary) -> ImagePlane {
    if sigma <= 0.0 {
        return p.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= s);
    let (w, h) = (p.width(), p.height());
    let pass = |src: &ImagePlane, horizontal: bool| {
        ImagePlane::from_fn(w, h, |x, y| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, &wk)| {
                    let o = k as isize - radius;
                    let (sx, sy) = if horizontal { (x as isize + o, y as isize) } else { (x as isize, y as isize + o) };
                    wk * sample(src, sx, sy, boundary)
                })
                .sum()
        })
    };
    pass(&pass(p, true), false)
}

fn derivatives(prev: &ImagePlane, next: &ImagePlane, params: &FlowParams) -> Derivatives {
    let boundary = params.boundary;
    let prev = &presmooth(prev, params.presmooth_sigma, boundary);
    let next = &presmooth(next, params.presmooth_sigma, boundary);
    let (w, h) = (prev.width(), prev.height());
    let n = w * h;
    let mut d = Derivatives {
        ix: Vec::with_capacity(n),
        iy: Vec::with_capacity(n),
        it: Vec::with_capacity(n),
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = |p: &ImagePlane| 0.5 * (sample(p, x + 1, y, boundary) - sample(p, x - 1, y, boundary));
            let gy = |p: &ImagePlane| 0.5 * (sample(p, x, y + 1, boundary) - sample(p, x, y - 1, boundary));
            d.ix.push(0.5 * INTENSITY_SCALE * (gx(prev) + gx(next)));
            d.iy.push(0.5 * INTENSITY_SCALE * (gy(prev) + gy(next)));
            let i = y as usize * w + x as usize;
            d.it.push(INTENSITY_SCALE * (next.data()[i] - prev.data()[i]));
        }
    }
    d
}

/// Neighbor list (index, weight) for every pixel of the 3x3 smoothness
/// stencil, honoring the boundary mode.
fn stencil(w: usize, h: usize, boundary: Boundary) -> Vec<Vec<(usize, f64)>> {
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut nb = Vec::with_capacity(8);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let wgt = if dx == 0 || dy == 0 { EDGE_WEIGHT } else { DIAG_WEIGHT };
                    let (nx, ny) = (x + dx, y + dy);
                    let idx = match boundary {
                        Boundary::Clamp => {
                            if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                                continue;
                            }
                            ny as usize * w + nx as usize
                        }
                        Boundary::Wrap => {
                            ny.rem_euclid(h as isize) as usize * w + nx.rem_euclid(w as isize) as usize
                        }
                    };
                    nb.push((idx, wgt));
                }
            }
            out.push(nb);
        }
    }
    out
}

fn check_inputs(prev: &ImagePlane, next: &ImagePlane, params: &FlowParams) -> Result<()> {
    prev.check_same_dims(next, "estimate_flow")?;
    if prev.is_empty() {
        return Err(Error::dim("flow between empty frames"));
    }
    if !(params.smoothness > 0.0) {
        return Err(Error::param("smoothness must be positive"));
    }
    if params.iterations == 0 {
        return Err(Error::param("iterations must be at least 1"));
    }
    Ok(())
}

/// Horn–Schunck flow from `prev` to `next` with default boundary handling.
pub fn estimate_flow(prev: &ImagePlane, next: &ImagePlane, smoothness: f64, iterations: usize) -> Result<FlowField> {
    estimate_flow_with(
        prev,
        next,
        &FlowParams {
            smoothness,
            iterations,
            ..FlowParams::default()
        },
    )
}

pub fn estimate_flow_with(prev: &ImagePlane, next: &ImagePlane, params: &FlowParams) -> Result<FlowField> {
    solve(prev, next, params, None)
}

/// As [`estimate_flow_with`], invoking `observer(iteration, field)` after
/// every sweep.
pub fn estimate_flow_traced(
    prev: &ImagePlane,
    next: &ImagePlane,
    params: &FlowParams,
    observer: &mut dyn FnMut(usize, &FlowField),
) -> Result<FlowField> {
    solve(prev, next, params, Some(observer))
}

fn solve(
    prev: &ImagePlane,
    next: &ImagePlane,
    params: &FlowParams,
    mut observer: Option<&mut dyn FnMut(usize, &FlowField)>,
) -> Result<FlowField> {
    check_inputs(prev, next, params)?;
    let (w, h) = (prev.width(), prev.height());
    let n = w * h;
    let d = derivatives(prev, next, params);
    let nb = stencil(w, h, params.boundary);
    let a2 = params.smoothness * params.smoothness;
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut u_next = vec![0.0; n];
    let mut v_next = vec![0.0; n];
    for iter in 0..params.iterations {
        for p in 0..n {
            let (mut su, mut sv, mut s) = (0.0, 0.0, 0.0);
            for &(q, wq) in &nb[p] {
                su += wq * u[q];
                sv += wq * v[q];
                s += wq;
            }
            let (ubar, vbar) = (su / s, sv / s);
            let (ix, iy, it) = (d.ix[p], d.iy[p], d.it[p]);
            let r = (ix * ubar + iy * vbar + it) / (a2 * s + ix * ix + iy * iy);
            u_next[p] = ubar - ix * r;
            v_next[p] = vbar - iy * r;
        }
        std::mem::swap(&mut u, &mut u_next);
        std::mem::swap(&mut v, &mut v_next);
        if let Some(obs) = observer.as_mut() {
            let field = FlowField {
                u: ImagePlane::new(w, h, u.clone())?,
                v: ImagePlane::new(w, h, v.clone())?,
            };
            obs(iter + 1, &field);
        }
    }
    Ok(FlowField {
        u: ImagePlane::new(w, h, u)?,
        v: ImagePlane::new(w, h, v)?,
    })
}

/// Discrete energy minimized by the Jacobi sweeps: squared brightness
/// constancy residuals plus `smoothness²` times the stencil-weighted squared
/// differences over every neighbor pair.
pub fn horn_schunck_energy(prev: &ImagePlane, next: &ImagePlane, flow: &FlowField, params: &FlowParams) -> Result<f64> {
    check_inputs(prev, next, params)?;
    prev.check_same_dims(&flow.u, "energy flow")?;
    let d = derivatives(prev, next, params);
    let nb = stencil(prev.width(), prev.height(), params.boundary);
    let a2 = params.smoothness * params.smoothness;
    let (u, v) = (flow.u.data(), flow.v.data());
    let mut data = 0.0;
    let mut smooth = 0.0;
    for p in 0..u.len() {
        let r = d.ix[p] * u[p] + d.iy[p] * v[p] + d.it[p];
        data += r * r;
        for &(q, wq) in &nb[p] {
            smooth += wq * ((u[p] - u[q]).powi(2) + (v[p] - v[q]).powi(2));
        }
    }
    Ok(data + 0.5 * a2 * smooth)
}

pub fn motion_mask(flow: &FlowField, magnitude_threshold: f64) -> Result<MotionMask> {
    if !(magnitude_threshold >= 0.0) {
        return Err(Error::param("magnitude threshold must be nonnegative"));
    }
    let mask = flow
        .u
        .data()
        .iter()
        .zip(flow.v.data())
        .map(|(&u, &v)| u.hypot(v) >= magnitude_threshold)
        .collect();
    MotionMask::new(flow.width(), flow.height(), mask)
}

/// Zeroes every pixel outside the motion mask.
pub fn suppress_background(frame: &ImagePlane, mask: &MotionMask) -> Result<ImagePlane> {
    if frame.width() != mask.width() || frame.height() != mask.height() {
        return Err(Error::dim("suppress_background: frame and mask differ in size"));
    }
    let data = frame
        .data()
        .iter()
        .zip(mask.as_slice())
        .map(|(&v, &m)| if m { v } else { 0.0 })
        .collect();
    ImagePlane::new(frame.width(), frame.height(), data)
}
