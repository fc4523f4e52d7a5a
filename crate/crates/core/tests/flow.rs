mod common;

use std::time::Instant;

use common::{blob_frame, blob_support, random_plane, SIGMA};
use ofgprn::flow::*;
use ofgprn::image::ImagePlane;
use ofgprn::segmentation::preset;
use ofgprn::training::{preprocess_planes, synth_dataset, PipelineMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn identical_random_frames_give_zero_flow() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = random_plane(&mut rng, 40, 30);
    let flow = estimate_flow_with(&f, &f, &FlowParams::default()).unwrap();
    assert!(flow.magnitude().data().iter().all(|&m| m <= 1e-9));
}

#[test]
fn translated_blob_endpoint_error() {
    let (prev, next) = (blob_frame(60.0, 64.0), blob_frame(62.0, 64.0));
    let t = Instant::now();
    let flow = estimate_flow_with(&prev, &next, &FlowParams::default()).unwrap();
    let elapsed = t.elapsed();
    let support = blob_support(&[(60.0, 64.0), (62.0, 64.0)]);
    let (mut sum, mut n) = (0.0, 0);
    for (i, &inside) in support.iter().enumerate() {
        if inside {
            sum += ((flow.u.data()[i] - 2.0).powi(2) + flow.v.data()[i].powi(2)).sqrt();
            n += 1;
        }
    }
    let epe = sum / n as f64;
    assert!(epe <= 0.5, "mean EPE {epe}");
    assert!(elapsed.as_secs_f64() < 1.0, "{elapsed:?}");

}

// The smoothness term carries the motion well past the blob, so the mask is
// a superset of the support rather than a tight fit.
#[test]
fn motion_mask_covers_translated_blob() {
    let (prev, next) = (blob_frame(60.0, 64.0), blob_frame(62.0, 64.0));
    let flow = estimate_flow_with(&prev, &next, &FlowParams::default()).unwrap();
    let support = blob_support(&[(60.0, 64.0), (62.0, 64.0)]);
    let mask = motion_mask(&flow, 0.5).unwrap();
    let inter = mask.as_slice().iter().zip(&support).filter(|(a, b)| **a && **b).count();
    let inside = support.iter().filter(|&&s| s).count();
    assert!(inter as f64 >= 0.95 * inside as f64, "{inter} of {inside}");
    let far = (0..128 * 128).filter(|&i| {
        let (x, y) = ((i % 128) as f64, (i / 128) as f64);
        mask.as_slice()[i] && (x - 61.0).powi(2) + (y - 64.0).powi(2) > (5.0 * SIGMA).powi(2)
    });
    assert_eq!(far.count(), 0);
}

#[test]
fn mask_is_monotone_in_threshold() {
    let flow = estimate_flow_with(&blob_frame(60.0, 64.0), &blob_frame(62.0, 64.0), &FlowParams::default()).unwrap();
    let mut prev = motion_mask(&flow, 0.0).unwrap();
    for t in [0.1, 0.3, 0.5, 1.0, 2.0] {
        let m = motion_mask(&flow, t).unwrap();
        assert!(m.is_subset_of(&prev));
        prev = m;
    }
}

#[test]
fn energy_never_increases() {
    let (prev, next) = (blob_frame(60.0, 64.0), blob_frame(62.0, 64.0));
    let params = FlowParams { iterations: 100, ..FlowParams::default() };
    let mut energies = Vec::new();
    estimate_flow_traced(&prev, &next, &params, &mut |it, f| {
        if it % 10 == 0 {
            energies.push(horn_schunck_energy(&prev, &next, f, &params).unwrap());
        }
    })
    .unwrap();
    for w in energies.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} -> {}", w[0], w[1]);
    }
}

#[test]
fn periodic_texture_flow_is_shift_equivariant() {
    let tex = |dx: f64, sx: isize, sy: isize| {
        ImagePlane::from_fn(64, 64, move |x, y| {
            let x = ((x as isize - sx).rem_euclid(64)) as f64 - dx;
            let y = ((y as isize - sy).rem_euclid(64)) as f64;
            let k = std::f64::consts::TAU / 64.0;
            0.5 + 0.2 * (k * x).sin() * (2.0 * k * y).cos() + 0.1 * (3.0 * k * (x + y)).sin()
        })
    };
    let params = FlowParams { boundary: Boundary::Wrap, ..FlowParams::default() };
    let base = estimate_flow_with(&tex(0.0, 0, 0), &tex(1.0, 0, 0), &params).unwrap();
    let shifted = estimate_flow_with(&tex(0.0, 5, 3), &tex(1.0, 5, 3), &params).unwrap();
    for y in 0..64 {
        for x in 0..64 {
            let (xs, ys) = ((x + 5) % 64, (y + 3) % 64);
            assert!((shifted.u.get(xs, ys) - base.u.get(x, y)).abs() <= 0.25);
            assert!((shifted.v.get(xs, ys) - base.v.get(x, y)).abs() <= 0.25);
        }
    }
}

#[test]
fn suppression_reduces_superpixels_on_synthetic_movers() {
    let data = synth_dataset(3, 10, 64, 64, (4, 8), (2.0, 4.0)).unwrap();
    let seg = preset("paper-quickshift").unwrap();
    let (mut plain, mut suppressed) = (0, 0);
    for pair in &data {
        let (fused, _) = preprocess_planes(pair, PipelineMode::Fusion, 0.5).unwrap();
        let (masked, _) = preprocess_planes(pair, PipelineMode::FusionFlow, 0.5).unwrap();
        plain += seg.segment(&fused).unwrap().segment_count();
        suppressed += seg.segment(&masked).unwrap().segment_count();
    }
    assert!((suppressed as f64) <= 0.8 * plain as f64, "{suppressed} vs {plain}");
}
