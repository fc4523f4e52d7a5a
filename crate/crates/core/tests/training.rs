use std::path::Path;

use ofgprn::detection::BBox;
use ofgprn::grsan::{Matrix, ParamStore, Tape};
use ofgprn::image::{ImagePlane, RgbFrame};
use ofgprn::model::OfGprn;
use ofgprn::training::*;
use proptest::prelude::*;

#[test]
fn adam_follows_scalar_recurrence() {
    let targets = [0.3, -1.2, 2.5];
    let mut store = ParamStore::new();
    let w = store.add("w", Matrix::row_vector(vec![1.0, 0.5, -0.25]), true).unwrap();
    let cfg = AdamConfig::default();
    let mut state = AdamState::new(&store);

    let mut x = [1.0f64, 0.5, -0.25];
    let (mut m, mut v) = ([0.0f64; 3], [0.0f64; 3]);
    for step in 1..=50 {
        let lr = 0.05;
        // Loss sum((w - c)^2), differentiated on the tape.
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let c = tape.constant(Matrix::row_vector(targets.iter().map(|t| -t).collect()));
        let d = tape.add(wv, c).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss, &store).unwrap();
        adam_step(&mut store, &grads, &mut state, lr, &cfg).unwrap();

        for i in 0..3 {
            let g = 2.0 * (x[i] - targets[i]);
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = m[i] / (1.0 - cfg.beta1.powi(step));
            let vh = v[i] / (1.0 - cfg.beta2.powi(step));
            x[i] -= lr * mh / (vh.sqrt() + cfg.eps);
            assert!((store.value(w).data()[i] - x[i]).abs() <= 1e-12, "step {step}");
        }
    }
    assert_eq!(state.steps(), 50);
}

#[test]
fn frozen_entries_are_not_stepped() {
    let mut store = ParamStore::new();
    let a = store.add("a", Matrix::scalar(1.0), true).unwrap();
    let b = store.add("b", Matrix::scalar(2.0), false).unwrap();
    let mut tape = Tape::new();
    let (av, bv) = (tape.param(&store, a), tape.param(&store, b));
    let p = tape.mul(av, bv).unwrap();
    let grads = tape.backward(p, &store).unwrap();
    let mut state = AdamState::new(&store);
    adam_step(&mut store, &grads, &mut state, 0.1, &AdamConfig::default()).unwrap();
    assert_eq!(store.value(b).data()[0], 2.0);
    assert!(store.value(a).data()[0] < 1.0);
}

proptest! {
    #[test]
    fn schedule_is_geometric(epochs in 1usize..=1000, start_exp in -6.0f64..-1.0, drop in 0.0f64..4.0) {
        let start = 10f64.powf(start_exp);
        let end = start * 10f64.powf(-drop);
        prop_assert_eq!(lr_schedule(0, epochs, start, end), start);
        let last = lr_schedule(epochs - 1, epochs, start, end);
        if epochs > 1 {
            prop_assert!((last - end).abs() <= 1e-12 * start);
        }
        for e in 1..epochs {
            let (a, b) = (lr_schedule(e - 1, epochs, start, end), lr_schedule(e, epochs, start, end));
            prop_assert!(b <= a && b >= end * (1.0 - 1e-12));
        }
    }
}

fn write_clip(root: &Path, name: &str, frames: usize, ir_size: (usize, usize), exist: &[u8], boxes: &[Vec<f64>]) {
    let clip = root.join(name);
    std::fs::create_dir_all(clip.join("visible")).unwrap();
    std::fs::create_dir_all(clip.join("infrared")).unwrap();
    for k in 0..frames {
        let vis = ImagePlane::from_fn(48, 36, |x, y| ((x + y + k) % 7) as f64 / 7.0);
        RgbFrame::gray(&vis).save_png8(clip.join(format!("visible/{k:04}.png"))).unwrap();
        let ir = ImagePlane::from_fn(ir_size.0, ir_size.1, |x, y| ((x * y + k) % 5) as f64 / 5.0);
        ir.save_png8(clip.join(format!("infrared/{k:04}.png"))).unwrap();
    }
    let ann = AnnotationFile { exist: exist.to_vec(), gt_rect: boxes.to_vec() };
    std::fs::write(clip.join("infrared.json"), serde_json::to_string(&ann).unwrap()).unwrap();
}

#[test]
fn ingest_ten_frame_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let mut exist = vec![1u8; 10];
    exist[3] = 0;
    let boxes: Vec<Vec<f64>> = (0..10)
        .map(|k| if k == 3 { vec![] } else { vec![2.0 + k as f64, 4.0, 6.0, 5.0] })
        .collect();
    write_clip(dir.path(), "a", 10, (32, 24), &exist, &boxes);
    // A second clip at twice the size is resampled to the first one.
    write_clip(dir.path(), "b", 2, (64, 48), &[1, 1], &[vec![10.0, 8.0, 12.0, 10.0], vec![60.0, 40.0, 10.0, 10.0]]);
    // Clips missing a stream or the annotation are skipped.
    std::fs::create_dir_all(dir.path().join("c/visible")).unwrap();

    let pairs = ingest_anti_uav(dir.path()).unwrap();
    assert_eq!(pairs.len(), 11);
    for p in &pairs {
        assert_eq!((p.width(), p.height()), (32, 24));
        assert_eq!((p.rgb.width(), p.prev_ir.width()), (32, 32));
    }
    assert_eq!(pairs[0].frame_index, 0);
    assert_eq!(pairs[3].frame_index, 4);
    assert_eq!(pairs[3].gt, BBox::new(6.0, 4.0, 12.0, 9.0).unwrap());
    assert_eq!(pairs[9].gt, BBox::new(5.0, 4.0, 11.0, 9.0).unwrap());
    // Boxes scale with the frames and are clipped to them.
    assert_eq!(pairs[10].gt, BBox::new(30.0, 20.0, 32.0, 24.0).unwrap());
}

#[test]
fn ingest_rejects_length_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    write_clip(dir.path(), "a", 3, (16, 16), &[1, 1], &[vec![1.0, 1.0, 2.0, 2.0]]);
    let err = ingest_anti_uav(dir.path()).unwrap_err();
    assert!(err.to_string().contains("infrared.json"));
}

fn tiny_config(mode: PipelineMode) -> TrainConfig {
    TrainConfig {
        mode,
        epochs: 3,
        lr_start: 1e-3,
        lr_end: 1e-4,
        widths: Some(vec![8, 8, 8, 8, 8]),
        pyramid_width: Some(8),
        ..TrainConfig::default()
    }
}

#[test]
fn reruns_are_byte_identical_and_checkpoints_reload() {
    let data = synth_dataset(1, 10, 32, 32, (3, 5), (2.0, 3.0)).unwrap();
    let cfg = tiny_config(PipelineMode::Full);
    let a = run_training(&cfg, &data).unwrap();
    let b = run_training(&cfg, &data).unwrap();
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    assert_eq!(a.final_checkpoint, b.final_checkpoint);
    assert_eq!(a.best_checkpoint, b.best_checkpoint);
    assert_eq!(a.log.records.len(), 3);

    let samples = prepare_all(&data, &cfg, 0).unwrap();
    let (model, mut store) = OfGprn::new(cfg.model_config(samples[0].input.features.cols()), 99).unwrap();
    store.load_bytes(&a.final_checkpoint, Path::new("memory")).unwrap();
    for s in &samples {
        assert_eq!(model.predict(&store, &s.input).unwrap(), a.model.predict(&a.store, &s.input).unwrap());
    }
    let other = tiny_config(PipelineMode::Fusion);
    let (_, mut wrong) = OfGprn::new(other.model_config(1 + 3), 0).unwrap();
    assert!(wrong.load_bytes(&a.final_checkpoint, Path::new("memory")).is_err());
}

#[test]
fn every_mode_trains_on_a_small_set() {
    let data = synth_dataset(2, 8, 32, 32, (3, 5), (2.0, 3.0)).unwrap();
    for mode in PipelineMode::ALL {
        let out = run_training(&tiny_config(mode), &data).unwrap();
        let last = out.log.last().unwrap();
        assert!(last.train_loss.is_finite() && last.val_loss.is_finite());
        assert!((0.0..=1.0).contains(&last.val_map));
    }
}

#[test]
fn synthetic_data_is_seeded() {
    let a = synth_dataset(7, 4, 32, 32, (3, 5), (1.0, 2.0)).unwrap();
    let b = synth_dataset(7, 4, 32, 32, (3, 5), (1.0, 2.0)).unwrap();
    let c = synth_dataset(8, 4, 32, 32, (3, 5), (1.0, 2.0)).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.ir, y.ir);
        assert_eq!(x.gt, y.gt);
    }
    assert!(a.iter().zip(&c).any(|(x, y)| x.ir != y.ir));
    assert!(a.iter().all(|p| ir_target_contrast(p) > 0.3));
}
