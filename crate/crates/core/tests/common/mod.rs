//! Independent reference implementations and fixtures shared by the
//! integration tests. The oracles work on plain nested vectors and never call
//! into the library code they check.
#![allow(dead_code)]

use std::sync::Arc;

use ofgprn::detection::{LossConfig, LossKind};
use ofgprn::grsan::{Gradients, Matrix, Mode, ParamStore, Session};
use ofgprn::image::ImagePlane;
use ofgprn::model::{detection_loss, GraphInput, LevelTargets, OfGprn};
use ofgprn::pyramid::build_hierarchy_from_graph;
use rand::Rng;

pub type Grid = Vec<Vec<f64>>;

pub fn random_plane(rng: &mut impl Rng, w: usize, h: usize) -> ImagePlane {
    ImagePlane::from_fn(w, h, |_, _| rng.gen::<f64>())
}

pub fn to_grid(p: &ImagePlane) -> Grid {
    (0..p.height()).map(|y| (0..p.width()).map(|x| p.get(x, y)).collect()).collect()
}

fn clamped(g: &Grid, x: isize, y: isize) -> f64 {
    let h = g.len() as isize;
    let w = g[0].len() as isize;
    g[y.clamp(0, h - 1) as usize][x.clamp(0, w - 1) as usize]
}

/// Windowed squared modified Laplacian evaluated pixel by pixel, replicated
/// borders at every stage.
pub fn modified_laplacian_oracle(g: &Grid, weights: &Grid) -> Grid {
    let (h, w) = (g.len(), g[0].len());
    let mut lap = vec![vec![0.0; w]; h];
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            lap[y][x] = clamped(g, xi + 1, yi) + clamped(g, xi - 1, yi) + clamped(g, xi, yi + 1)
                + clamped(g, xi, yi - 1)
                - 4.0 * g[y][x];
        }
    }
    let mut ml = vec![vec![0.0; w]; h];
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            let c = lap[y][x];
            let horiz = 2.0 * c - clamped(&lap, xi - 1, yi) - clamped(&lap, xi + 1, yi);
            let vert = 2.0 * c - clamped(&lap, xi, yi - 1) - clamped(&lap, xi, yi + 1);
            ml[y][x] = horiz.abs() + vert.abs();
        }
    }
    let q = (weights.len() / 2) as isize;
    let p = (weights[0].len() / 2) as isize;
    let mut out = vec![vec![0.0; w]; h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -q..=q {
                for dx in -p..=p {
                    let v = clamped(&ml, x as isize + dx, y as isize + dy);
                    acc += weights[(dy + q) as usize][(dx + p) as usize] * v * v;
                }
            }
            out[y][x] = acc;
        }
    }
    out
}

/// Average of the two saliency-weighted blends.
pub fn base_fuse_oracle(b_rgb: &Grid, b_ir: &Grid, v_rgb: &Grid, v_ir: &Grid) -> Grid {
    let mut out = b_rgb.clone();
    for y in 0..out.len() {
        for x in 0..out[0].len() {
            let alpha = v_ir[y][x] * b_ir[y][x] + (1.0 - v_ir[y][x]) * b_rgb[y][x];
            let beta = v_rgb[y][x] * b_rgb[y][x] + (1.0 - v_rgb[y][x]) * b_ir[y][x];
            out[y][x] = (alpha + beta) / 2.0;
        }
    }
    out
}

/// Global contrast summed over all pixel pairs after 256-level quantization,
/// then min-max normalized (0.5 when constant).
pub fn saliency_pairwise_oracle(g: &Grid) -> Grid {
    let flat: Vec<f64> = g.iter().flatten().copied().collect();
    let lo = flat.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = flat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: Vec<f64> = flat
        .iter()
        .map(|&v| {
            if hi > lo {
                ((v - lo) / (hi - lo) * 255.0).round_ties_even() / 255.0
            } else {
                0.0
            }
        })
        .collect();
    let raw: Vec<f64> = s.iter().map(|&a| s.iter().map(|&b| (a - b).abs()).sum()).collect();
    let rlo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let rhi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w = g[0].len();
    let norm: Vec<f64> = raw
        .iter()
        .map(|&r| if rhi > rlo { (r - rlo) / (rhi - rlo) } else { 0.5 })
        .collect();
    norm.chunks(w).map(|r| r.to_vec()).collect()
}

pub fn max_abs_diff(a: &Grid, b: &Grid) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Connected random graph: a random spanning tree plus `extra` chords.
pub fn random_graph(rng: &mut impl Rng, n: usize, extra: usize) -> Vec<Vec<usize>> {
    let mut nb = vec![Vec::new(); n];
    for i in 1..n {
        let j = rng.gen_range(0..i);
        nb[i].push(j);
        nb[j].push(i);
    }
    for _ in 0..extra {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if a != b && !nb[a].contains(&b) {
            nb[a].push(b);
            nb[b].push(a);
        }
    }
    for l in &mut nb {
        l.sort_unstable();
    }
    nb
}

/// A random graph with features, its 5-level hierarchy and mixed targets.
pub fn random_graph_problem(rng: &mut impl Rng, n: usize, dim: usize) -> (GraphInput, Vec<LevelTargets>) {
    let nb = random_graph(rng, n, n / 2);
    let feats: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.gen::<f64>()).collect()).collect();
    let hierarchy = Arc::new(build_hierarchy_from_graph(&nb, &feats, 5).unwrap());
    let targets = hierarchy
        .levels()
        .iter()
        .map(|l| {
            let k = l.node_count();
            LevelTargets {
                labels: (0..k).map(|i| if i % 3 == 0 { 1 } else { -1 }).collect(),
                overlaps: (0..k).map(|_| rng.gen::<f64>()).collect(),
            }
        })
        .collect();
    let input = GraphInput {
        features: Matrix::from_rows(&feats).unwrap(),
        hierarchy,
    };
    (input, targets)
}

pub fn train_loss(model: &OfGprn, store: &ParamStore, input: &GraphInput, targets: &[LevelTargets], kind: LossKind) -> f64 {
    let mut s = Session::new(store, Mode::Train);
    let v = model.forward(&mut s, input).unwrap();
    let l = detection_loss(&mut s, &v.scores, targets, kind, &LossConfig::default()).unwrap();
    s.value(l).get(0, 0)
}

pub fn train_grads(model: &OfGprn, store: &ParamStore, input: &GraphInput, targets: &[LevelTargets], kind: LossKind) -> Gradients {
    let mut s = Session::new(store, Mode::Train);
    let v = model.forward(&mut s, input).unwrap();
    let l = detection_loss(&mut s, &v.scores, targets, kind, &LossConfig::default()).unwrap();
    s.tape.backward(l, store).unwrap()
}

/// Relative error with a small absolute floor, so exact zeros compare
/// absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub struct GradReport {
    pub checked: usize,
    pub worst: f64,
    pub worst_name: String,
}

/// Central differences on every trainable scalar.
pub fn check_every_scalar(model: &OfGprn, store: &ParamStore, input: &GraphInput, targets: &[LevelTargets], kind: LossKind) -> GradReport {
    let h = 1e-5;
    let grads = train_grads(model, store, input, targets, kind);
    let mut probe = store.clone();
    let mut report = GradReport { checked: 0, worst: 0.0, worst_name: String::new() };
    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        for k in 0..store.value(id).data().len() {
            let orig = store.value(id).data()[k];
            probe.value_mut(id).data_mut()[k] = orig + h;
            let up = train_loss(model, &probe, input, targets, kind);
            probe.value_mut(id).data_mut()[k] = orig - h;
            let down = train_loss(model, &probe, input, targets, kind);
            probe.value_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let e = rel_err(grads.get(id).data()[k], numeric);
            report.checked += 1;
            if e > report.worst {
                report.worst = e;
                report.worst_name = format!("{}[{k}] analytic {} numeric {numeric}", store.name(id), grads.get(id).data()[k]);
            }
        }
    }
    report
}

/// Central differences along `dirs` random unit directions per parameter
/// tensor, compared with the analytic directional derivative.
pub fn check_directional(
    model: &OfGprn,
    store: &ParamStore,
    input: &GraphInput,
    targets: &[LevelTargets],
    kind: LossKind,
    rng: &mut impl Rng,
    dirs: usize,
) -> GradReport {
    let h = 1e-5;
    let grads = train_grads(model, store, input, targets, kind);
    let mut probe = store.clone();
    let mut report = GradReport { checked: 0, worst: 0.0, worst_name: String::new() };
    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        let base = store.value(id).clone();
        for _ in 0..dirs {
            let mut d: Vec<f64> = (0..base.data().len()).map(|_| rng.gen::<f64>() - 0.5).collect();
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            d.iter_mut().for_each(|v| *v /= norm);
            let analytic: f64 = grads.get(id).data().iter().zip(&d).map(|(g, v)| g * v).sum();
            let shifted = |s: f64| {
                let mut m = base.clone();
                m.data_mut().iter_mut().zip(&d).for_each(|(x, v)| *x += s * v);
                m
            };
            *probe.value_mut(id) = shifted(h);
            let up = train_loss(model, &probe, input, targets, kind);
            *probe.value_mut(id) = shifted(-h);
            let down = train_loss(model, &probe, input, targets, kind);
            *probe.value_mut(id) = base.clone();
            let e = rel_err(analytic, (up - down) / (2.0 * h));
            report.checked += 1;
            if e > report.worst {
                report.worst = e;
                report.worst_name = store.name(id).to_string();
            }
        }
    }
    report
}

/// Moves every trainable parameter by uniform noise in `±scale`. Fresh
/// models put the batch-norm shifts at exactly zero, which lands constant
/// channels on the kink of the following ReLU.
pub fn jitter(store: &mut ParamStore, rng: &mut impl Rng, scale: f64) {
    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += scale * (2.0 * rng.gen::<f64>() - 1.0);
        }
    }
}

/// Twenty small deterministic images: synthetic infrared frames, noise,
/// ramps, discs and stripes at a few sizes.
pub fn fixture_corpus() -> Vec<ImagePlane> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    let mut out: Vec<ImagePlane> = ofgprn::training::synth_dataset(5, 6, 40, 32, (3, 6), (1.0, 3.0))
        .unwrap()
        .into_iter()
        .map(|p| p.ir)
        .collect();
    for k in 0..4 {
        out.push(random_plane(&mut rng, 24 + 4 * k, 20 + 6 * k));
    }
    for k in 0..3 {
        let (w, h) = (30 + 5 * k, 26);
        out.push(ImagePlane::from_fn(w, h, |x, y| (x as f64 / w as f64 + k as f64 * y as f64 / h as f64) / (1.0 + k as f64)));
    }
    for k in 0..4 {
        let r = 4.0 + 2.0 * k as f64;
        out.push(ImagePlane::from_fn(36, 36, |x, y| {
            let d = ((x as f64 - 17.5).powi(2) + (y as f64 - 15.0).powi(2)).sqrt();
            if d < r { 0.9 } else { 0.1 + 0.02 * k as f64 }
        }));
    }
    for k in 0..3 {
        let period = 3 + 2 * k;
        out.push(ImagePlane::from_fn(32, 28, |x, y| if (x / period + y / (period + 1)) % 2 == 0 { 0.2 } else { 0.7 }));
    }
    assert_eq!(out.len(), 20);
    out
}

pub const SIGMA: f64 = 4.0;

/// A Gaussian blob of width `SIGMA` on faint texture, 128x128.
pub fn blob_frame(cx: f64, cy: f64) -> ImagePlane {
    ImagePlane::from_fn(128, 128, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        let texture = 0.05 * ((xf * 0.31).sin() * (yf * 0.23).cos());
        let r2 = (xf - cx).powi(2) + (yf - cy).powi(2);
        0.3 + texture + 0.6 * (-r2 / (2.0 * SIGMA * SIGMA)).exp()
    })
}

/// Pixels within two standard deviations of the blob in either frame.
pub fn blob_support(centres: &[(f64, f64)]) -> Vec<bool> {
    (0..128 * 128)
        .map(|i| {
            let (x, y) = ((i % 128) as f64, (i / 128) as f64);
            centres
                .iter()
                .any(|&(cx, cy)| (x - cx).powi(2) + (y - cy).powi(2) <= (2.0 * SIGMA).powi(2))
        })
        .collect()
}
