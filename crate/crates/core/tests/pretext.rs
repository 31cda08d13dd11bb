use autodiff::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sketchlab::models::RasterEncoderConfig;
use sketchlab::pretext::*;
use sketchlab::rng;
use sketchlab::sketch::{gen_synthetic_dataset, RasterCanvas, SynthConfig, SyntheticInstance};

fn data(classes: usize, per: usize) -> Vec<SyntheticInstance> {
    gen_synthetic_dataset(&SynthConfig {
        seed: 21,
        n_classes: classes,
        n_instances_per_class: per,
        ..Default::default()
    })
    .unwrap()
}

fn small_cfg(task: PretextTask, epochs: usize) -> PretextConfig {
    PretextConfig {
        task,
        epochs,
        batch: 4,
        max_len: 30,
        hidden: 16,
        encoder: RasterEncoderConfig {
            channels: 8,
            dim: 12,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn vectorization_loss_examples() {
    let target = [[0.3, 0.4, 1.0, 0.0, 0.0], [0.5, 0.6, 0.0, 0.0, 1.0]];
    let sat = |r: &[f64; 5]| {
        let mut p = [r[0], r[1], -60.0, -60.0, -60.0];
        let k = (0..3).find(|&k| r[2 + k] == 1.0).unwrap();
        p[2 + k] = 60.0;
        p
    };
    let perfect: Vec<[f64; 5]> = target.iter().map(sat).collect();
    assert!(vectorization_loss(&perfect, &target).unwrap() < 1e-12);

    let mut off = sat(&target[0]);
    off[0] += 0.1;
    let l = vectorization_loss(&[off], &target[..1]).unwrap();
    assert!((l - 0.01).abs() < 1e-12);

    let uniform: Vec<[f64; 5]> = target.iter().map(|r| [r[0], r[1], 0.0, 0.0, 0.0]).collect();
    assert!((vectorization_loss(&uniform, &target).unwrap() - 3f64.ln()).abs() < 1e-12);
    assert!(vectorization_loss(&perfect[..1], &target).is_err());
}

#[test]
fn rasterization_loss_examples() {
    let zeros = RasterCanvas::new(4, 4);
    let ones = RasterCanvas::from_data(4, 4, vec![1.0; 16]).unwrap();
    assert_eq!(rasterization_loss(&ones, &ones).unwrap(), 0.0);
    assert_eq!(rasterization_loss(&zeros, &ones).unwrap(), 1.0);
    let half = RasterCanvas::from_data(4, 4, (0..16).map(|i| if i < 8 { 0.5 } else { 0.0 }).collect()).unwrap();
    assert!((rasterization_loss(&half, &zeros).unwrap() - 0.125).abs() < 1e-15);
    assert!(rasterization_loss(&RasterCanvas::new(4, 5), &zeros).is_err());
}

#[test]
fn point_rows_end_with_end_of_drawing() {
    let d = data(1, 1);
    let rows = point_rows(&d[0].sketch, 5);
    assert_eq!(rows.len(), 5.min(d[0].sketch.total_points()));
    assert_eq!(rows.last().unwrap()[2..], [0.0, 0.0, 1.0]);
}

#[test]
fn label_free_pretraining_ignores_labels() {
    let d = data(3, 3);
    let mut shuffled = d.clone();
    for (k, inst) in shuffled.iter_mut().enumerate() {
        inst.class_id = (k * 7 + 1) % 5;
    }
    let cfg = small_cfg(PretextTask::Vectorization, 2);
    let a = pretrain(&unlabelled_view(&d, 1).unwrap(), &cfg).unwrap();
    let b = pretrain(&unlabelled_view(&shuffled, 1).unwrap(), &cfg).unwrap();
    assert_eq!(a.losses, b.losses);
    let view = unlabelled_view(&d, 1).unwrap();
    for (u, l) in view.iter().zip(labelled_view(&d, 1).unwrap()) {
        assert_eq!(u.sketch, l.input.sketch);
        assert_eq!(u.canvas, l.input.canvas);
    }
}

#[test]
fn zero_epochs_return_initial_encoder() {
    let view = unlabelled_view(&data(1, 2), 1).unwrap();
    for task in [PretextTask::Vectorization, PretextTask::Rasterization] {
        let cfg = small_cfg(task, 0);
        let out = pretrain(&view, &cfg).unwrap();
        assert!(out.losses.is_empty());
        let fresh = PretextEncoder::new(task, &cfg, &mut rng::stream(cfg.seed, &[60]));
        assert_eq!(out.encoder.features(&view[0], 30).unwrap(), fresh.features(&view[0], 30).unwrap());
        assert_eq!(out.encoder.dim(), 12);
        assert_eq!(out.encoder.features(&view[1], 30).unwrap().len(), 12);
    }
}

fn window_means(losses: &[f64], w: usize) -> Vec<f64> {
    losses.chunks(w).filter(|c| c.len() == w).map(|c| c.iter().sum::<f64>() / w as f64).collect()
}

#[test]
fn pretext_loss_trends_down_over_50_epoch_windows() {
    let view = unlabelled_view(&data(3, 2), 1).unwrap();
    for task in [PretextTask::Vectorization, PretextTask::Rasterization] {
        let out = pretrain(&view, &small_cfg(task, 150)).unwrap();
        let means = window_means(&out.losses, 50);
        assert_eq!(means.len(), 3);
        assert!(means.windows(2).all(|w| w[1] <= w[0]), "{task:?}: {means:?}");
    }
}

#[test]
fn greedy_decoding_terminates() {
    let view = unlabelled_view(&data(1, 2), 1).unwrap();
    let out = pretrain(&view, &small_cfg(PretextTask::Vectorization, 3)).unwrap();
    let PretextDecoder::Vector(dec) = &out.decoder else { panic!("vectorization decoder") };
    let f = out.encoder.features(&view[0], 30).unwrap();
    for max_len in [1, 7, 40] {
        let rows = dec.greedy(&f, max_len);
        assert!(!rows.is_empty() && rows.len() <= max_len);
        let ended = rows.last().unwrap()[4] == 1.0;
        assert!(ended || rows.len() == max_len);
        assert!(rows[..rows.len() - 1].iter().all(|r| r[4] == 0.0));
    }
}

#[test]
fn linear_eval_contracts() {
    let d = data(3, 4);
    let labelled = labelled_view(&d, 1).unwrap();
    let cfg = small_cfg(PretextTask::Vectorization, 0);
    let enc = PretextEncoder::new(PretextTask::Vectorization, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
    let eval = LinearEvalConfig {
        epochs: 30,
        max_len: 30,
        ..Default::default()
    };
    let r = linear_eval(&enc, &labelled[..8], &labelled[8..], &eval).unwrap();
    assert!((0.0..=1.0).contains(&r.top1) && r.top1 <= r.top5);
    let single: Vec<LabelledSketch> = labelled.iter().filter(|x| x.label == 0).cloned().collect();
    let r = linear_eval(&enc, &single[..2], &single[2..], &eval).unwrap();
    assert_eq!(r.top1, 1.0);
    let bad = LinearEvalConfig {
        mode: EvalMode::FinetuneFraction { frac: 0.0 },
        ..eval.clone()
    };
    assert!(linear_eval(&enc, &labelled, &labelled, &bad).is_err());
    let ft = LinearEvalConfig {
        mode: EvalMode::FinetuneFraction { frac: 0.1 },
        epochs: 3,
        ..eval
    };
    let r = linear_eval(&enc, &labelled, &labelled, &ft).unwrap();
    assert!((0.0..=1.0).contains(&r.top1));
}

proptest! {
    #[test]
    fn vectorization_loss_decomposes(seed in 0u64..500, t in 1usize..12) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let pred = Tensor::uniform(t, 5, -2.0, 2.0, &mut r);
        let target: Vec<[f64; 5]> = (0..t)
            .map(|i| {
                let mut row = [pred.get(i, 0) * 0.5, pred.get(i, 1) * 0.25, 0.0, 0.0, 0.0];
                row[2 + (i + seed as usize) % 3] = 1.0;
                row
            })
            .collect();
        let tape = Tape::new();
        let (c, p) = vectorization_loss_parts(&tape, tape.constant(pred.clone()), &target).unwrap();
        let rows: Vec<[f64; 5]> = (0..t).map(|i| pred.row_slice(i).try_into().unwrap()).collect();
        let combined = vectorization_loss(&rows, &target).unwrap();
        let coord: f64 = target.iter().zip(&rows).map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sum::<f64>() / t as f64;
        prop_assert!((c.item() - coord).abs() < 1e-12);
        prop_assert!((c.item() + p.item() - combined).abs() < 1e-12);
    }
}
