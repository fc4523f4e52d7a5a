use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::SamplePair;
use crate::detection::BBox;
use crate::error::{Error, Result};
use crate::image::{ImagePlane, RgbFrame};

const NOISE_SIGMA: f64 = 0.01;
const RGB_TARGET_CONTRAST: f64 = 0.06;

/// Smooth lattice noise in `[0, 1]`: bilinear interpolation with a
/// smoothstep fade between random lattice values, two octaves.
fn value_noise(rng: &mut ChaCha8Rng, width: usize, height: usize, cell: usize) -> ImagePlane {
    let mut octave = |cell: usize| {
        let gw = width / cell + 2;
        let gh = height / cell + 2;
        let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.gen::<f64>()).collect();
        move |x: usize, y: usize| {
            let fx = x as f64 / cell as f64;
            let fy = y as f64 / cell as f64;
            let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
            let fade = |t: f64| t * t * (3.0 - 2.0 * t);
            let (tx, ty) = (fade(fx - ix as f64), fade(fy - iy as f64));
            let at = |i: usize, j: usize| lattice[j * gw + i];
            let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
            let bot = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
            top * (1.0 - ty) + bot * ty
        }
    };
    let coarse = octave(cell);
    let fine = octave((cell / 2).max(1));
    ImagePlane::from_fn(width, height, |x, y| (2.0 * coarse(x, y) + fine(x, y)) / 3.0)
}

/// Pixels of a `w x h` box at `(x0, y0)` with the four corner pixels cut,
/// so the shape is rounded but its tight bounding box is the full box.
fn target_pixels(x0: usize, y0: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..h).flat_map(move |j| {
        (0..w).filter_map(move |i| {
            let corner = (i == 0 || i + 1 == w) && (j == 0 || j + 1 == h);
            (!corner || w < 4 || h < 4).then_some((x0 + i, y0 + j))
        })
    })
}

struct Scene {
    rgb_bg: [ImagePlane; 3],
    ir_bg: ImagePlane,
    rgb_delta: [f64; 3],
    ir_level: f64,
}

impl Scene {
    fn render(&self, objects: &[(usize, usize, usize, usize)], rng: &mut ChaCha8Rng) -> (RgbFrame, ImagePlane) {
        let mut planes = self.rgb_bg.clone();
        let mut ir = self.ir_bg.clone();
        for &(x0, y0, w, h) in objects {
            for (x, y) in target_pixels(x0, y0, w, h) {
                for (p, d) in planes.iter_mut().zip(&self.rgb_delta) {
                    let v = p.get(x, y) + d;
                    p.set(x, y, v);
                }
                ir.set(x, y, self.ir_level);
            }
        }
        let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
        let mut jitter = |p: &ImagePlane| {
            ImagePlane::from_fn(p.width(), p.height(), |x, y| (p.get(x, y) + noise.sample(rng)).clamp(0.0, 1.0))
        };
        let [r, g, b] = &planes;
        let rgb = RgbFrame {
            r: jitter(r),
            g: jitter(g),
            b: jitter(b),
        };
        let ir = jitter(&ir);
        (rgb, ir)
    }
}

fn overlaps(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize), margin: usize) -> bool {
    let (ax, ay, aw, ah) = a;
    let (bx, by, bw, bh) = b;
    ax < bx + bw + margin && bx < ax + aw + margin && ay < by + bh + margin && by < ay + ah + margin
}

/// Paired RGB / IR frames of a static textured scene with one small target
/// moving linearly between the previous and the current frame. The target is
/// bright in IR and barely visible in RGB; static IR hot spots of the same
/// look act as distractors. Pair `i` depends only on `(seed, i)`.
pub fn synth_dataset(
    seed: u64,
    n_pairs: usize,
    width: usize,
    height: usize,
    target_size_range: (usize, usize),
    speed_range: (f64, f64),
) -> Result<Vec<SamplePair>> {
    if width < 16 || height < 16 {
        return Err(Error::param(format!("frames must be at least 16x16, got {width}x{height}")));
    }
    if n_pairs == 0 {
        return Err(Error::param("n_pairs must be at least 1"));
    }
    let (smin, smax) = target_size_range;
    if smin < 2 || smin > smax || smax > width.min(height) / 4 {
        return Err(Error::param(format!(
            "target size range {smin}..={smax} does not fit a {width}x{height} frame"
        )));
    }
    let (vmin, vmax) = speed_range;
    if !(vmin >= 0.0 && vmin <= vmax && vmax.is_finite()) || vmax > (width.min(height) / 4) as f64 {
        return Err(Error::param(format!("invalid speed range {vmin}..={vmax}")));
    }
    (0..n_pairs)
        .map(|i| synth_pair(seed, i, width, height, target_size_range, speed_range))
        .collect()
}

fn synth_pair(seed: u64, index: usize, width: usize, height: usize, size: (usize, usize), speed: (f64, f64)) -> Result<SamplePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);

    let day = rng.gen_range(0.35..=1.0);
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let diag = ((width * width + height * height) as f64).sqrt();
    let cell = (width.min(height) / 8).max(4);
    let tex = value_noise(&mut rng, width, height, cell);
    let tints = [
        rng.gen_range(0.8..=1.0),
        rng.gen_range(0.8..=1.0),
        rng.gen_range(0.8..=1.0),
    ];
    let illum = |x: usize, y: usize| {
        let t = ((x as f64 - width as f64 / 2.0) * theta.cos() + (y as f64 - height as f64 / 2.0) * theta.sin()) / diag;
        day * (0.8 + 0.4 * t)
    };
    let rgb_bg = tints.map(|tint| ImagePlane::from_fn(width, height, |x, y| illum(x, y) * (0.25 + 0.6 * tex.get(x, y)) * tint));
    let ir_tex = value_noise(&mut rng, width, height, cell);
    let ir_bg = ir_tex.map(|v| 0.15 + 0.2 * v);
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let scene = Scene {
        rgb_bg,
        ir_bg,
        rgb_delta: [sign * RGB_TARGET_CONTRAST; 3],
        ir_level: rng.gen_range(0.85..=0.95),
    };

    let tw = rng.gen_range(size.0..=size.1);
    let th = rng.gen_range(size.0..=size.1);
    let v = rng.gen_range(speed.0..=speed.1);
    let heading: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = ((v * heading.cos()).round() as isize, (v * heading.sin()).round() as isize);
    // current position keeps the previous one inside the frame too
    let lo_x = 1 + dx.max(0) as usize;
    let hi_x = width - tw - 1 - (-dx).max(0) as usize;
    let lo_y = 1 + dy.max(0) as usize;
    let hi_y = height - th - 1 - (-dy).max(0) as usize;
    let x0 = rng.gen_range(lo_x..=hi_x);
    let y0 = rng.gen_range(lo_y..=hi_y);
    let px = (x0 as isize - dx) as usize;
    let py = (y0 as isize - dy) as usize;
    let current = (x0, y0, tw, th);
    let previous = (px, py, tw, th);

    let n_distractors = rng.gen_range(1..=2);
    let mut distractors = Vec::new();
    let mut attempts = 0;
    while distractors.len() < n_distractors && attempts < 100 {
        attempts += 1;
        let w = rng.gen_range(size.0..=size.1);
        let h = rng.gen_range(size.0..=size.1);
        let cand = (rng.gen_range(1..=width - w - 1), rng.gen_range(1..=height - h - 1), w, h);
        let clear = !overlaps(cand, current, 3)
            && !overlaps(cand, previous, 3)
            && distractors.iter().all(|&d| !overlaps(cand, d, 3));
        if clear {
            distractors.push(cand);
        }
    }

    let mut prev_objects = distractors.clone();
    prev_objects.push(previous);
    let mut cur_objects = distractors;
    cur_objects.push(current);
    let (prev_rgb, prev_ir) = scene.render(&prev_objects, &mut rng);
    let (rgb, ir) = scene.render(&cur_objects, &mut rng);
    Ok(SamplePair {
        rgb,
        ir,
        prev_rgb,
        prev_ir,
        gt: BBox {
            x_min: x0 as f64,
            y_min: y0 as f64,
            x_max: (x0 + tw) as f64,
            y_max: (y0 + th) as f64,
        },
        frame_index: index,
    })
}

/// Michelson contrast between the mean IR level of the target pixels and of
/// a 3-pixel ring around the target box.
pub fn ir_target_contrast(pair: &SamplePair) -> f64 {
    let b = &pair.gt;
    let (x0, y0, x1, y1) = (b.x_min as usize, b.y_min as usize, b.x_max as usize, b.y_max as usize);
    let inside: Vec<(usize, usize)> = target_pixels(x0, y0, x1 - x0, y1 - y0).collect();
    let t = inside.iter().map(|&(x, y)| pair.ir.get(x, y)).sum::<f64>() / inside.len() as f64;
    let (w, h) = (pair.ir.width(), pair.ir.height());
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in y0.saturating_sub(3)..(y1 + 3).min(h) {
        for x in x0.saturating_sub(3)..(x1 + 3).min(w) {
            if x >= x0 && x < x1 && y >= y0 && y < y1 {
                continue;
            }
            sum += pair.ir.get(x, y);
            n += 1;
        }
    }
    let bg = sum / n.max(1) as f64;
    (t - bg) / (t + bg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_in_bounds() {
        let a = synth_dataset(5, 6, 48, 40, (4, 7), (2.0, 4.0)).unwrap();
        let b = synth_dataset(5, 6, 48, 40, (4, 7), (2.0, 4.0)).unwrap();
        assert_eq!(a, b);
        for p in &a {
            assert!(p.gt.within(48, 40));
            assert!(ir_target_contrast(p) >= 0.3, "{}", ir_target_contrast(p));
        }
    }

    #[test]
    fn rejects_degenerate_sizes() {
        assert!(synth_dataset(1, 1, 15, 64, (4, 6), (1.0, 2.0)).is_err());
        assert!(synth_dataset(1, 0, 64, 64, (4, 6), (1.0, 2.0)).is_err());
        assert!(synth_dataset(1, 1, 64, 64, (6, 4), (1.0, 2.0)).is_err());
    }
}
