use autodiff::{Tape, Tensor};
use proptest::prelude::*;
use sketchlab::models::*;
use sketchlab::rng;
use sketchlab::sketch::{rasterize, RasterCanvas, VectorSketch};
use std::f64::consts::PI;

fn small_cfg() -> RasterEncoderConfig {
    RasterEncoderConfig {
        canvas: 16,
        patch: 4,
        channels: 6,
        dim: 5,
    }
}

fn canvas(seed: u64) -> RasterCanvas {
    let mut r = rng::stream(seed, &[1]);
    RasterCanvas::from_data(16, 16, Tensor::uniform(1, 256, 0.0, 1.0, &mut r).into_data()).unwrap()
}

#[test]
fn every_model_family_passes_grad_check() {
    for f in FAMILIES {
        for seed in 0..20 {
            let e = family_grad_check(f, seed).unwrap();
            assert!(e < 1e-4, "{f} seed {seed}: {e:e}");
        }
    }
    assert!(family_grad_check("nope", 0).is_err());
}

#[test]
fn raster_embedding_contracts() {
    let enc = RasterEncoder::new("e", small_cfg(), &mut rng::stream(0, &[]));
    for s in 0..5 {
        let e = enc.embed_plain(&canvas(s)).unwrap();
        assert_eq!(e.len(), 5);
        assert!((e.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
        assert_eq!(e, enc.embed_plain(&canvas(s)).unwrap());
        let att = enc.attention_plain(&canvas(s)).unwrap();
        assert!((att.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(enc.embed_plain(&RasterCanvas::new(32, 32)).is_err());
}

fn two_strokes() -> VectorSketch {
    VectorSketch::from_polylines(vec![vec![[0.1, 0.1], [0.3, 0.4]], vec![[0.6, 0.2], [0.8, 0.9], [0.5, 0.5]]]).unwrap()
}

#[test]
fn stroke_encoder_contracts() {
    let enc = StrokeHierEncoder::new("s", 8, &mut rng::stream(1, &[]));
    let one = VectorSketch::from_polylines(vec![vec![[0.2, 0.2], [0.4, 0.4]]]).unwrap();
    let tape = Tape::inference();
    let e = enc.encode(&tape, &one).unwrap();
    let p = e.probs.value();
    assert_eq!(p.shape(), [1, 2]);
    assert!((p.sum() - 1.0).abs() < 1e-9);
    assert!(enc.encode(&tape, &VectorSketch::empty()).is_err());

    let s = two_strokes();
    let dup = VectorSketch::from_polylines(vec![s.polylines()[0].clone(), s.polylines()[0].clone()]).unwrap();
    let l = enc.encode(&tape, &dup).unwrap().local.value();
    assert_eq!(l.row_slice(0), l.row_slice(1));

    // Swapping strokes changes the global context.
    let mut sw = s.polylines();
    sw.swap(0, 1);
    let g1 = enc.encode(&tape, &s).unwrap().global.value();
    let g2 = enc.encode(&tape, &VectorSketch::from_polylines(sw).unwrap()).unwrap().global.value();
    assert_ne!(g1.row_slice(1), g2.row_slice(0));
    for r in 0..2 {
        let row = enc.encode(&tape, &s).unwrap().probs.value();
        assert!((row.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn select_probability_rises_with_select_bias() {
    let mut enc = StrokeHierEncoder::new("s", 8, &mut rng::stream(2, &[]));
    let s = two_strokes();
    let mut last = enc.select_probs(&s).unwrap();
    for _ in 0..5 {
        let b = enc.head.b.value.get(0, 0);
        enc.head.b.value.set(0, 0, b + 0.5);
        let p = enc.select_probs(&s).unwrap();
        for (a, b) in p.iter().zip(&last) {
            assert!(a > b);
        }
        last = p;
    }
}

#[test]
fn policy_sample_examples() {
    let mu = [0.3, -0.2];
    let lp = gaussian_log_prob(&mu, &mu, &[1.0, 1.0]);
    assert!((lp + (2.0 * PI).ln()).abs() < 1e-12);
    let (a, lpa) = policy_sample(&mu, &[1.0, 1.0], &mut rng::stream(5, &[]));
    let (b, lpb) = policy_sample(&mu, &[1.0, 1.0], &mut rng::stream(5, &[]));
    assert_eq!(a, b);
    assert_eq!(lpa, lpb);
    // A vanishing scale collapses the sample onto the mean.
    let (c, _) = policy_sample(&mu, &[1e-300, 1e-300], &mut rng::stream(5, &[]));
    assert!((c[0] - mu[0]).abs() < 1e-250 && (c[1] - mu[1]).abs() < 1e-250);

    let head = GaussianPolicyHead::new("p", 3, 2, &mut rng::stream(6, &[]));
    assert_eq!(head.sigma(), vec![1.0, 1.0]);
    let tape = Tape::inference();
    let m = head.mean(&tape, tape.constant(Tensor::row(&[0.1, 0.2, 0.3])));
    let action = Tensor::row(&[0.5, -0.5]);
    let got = head.log_prob(&tape, m, &action).item();
    let want = gaussian_log_prob(action.data(), m.value().data(), &head.sigma());
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn gat_examples() {
    let gat = GatLayer::new("g", 3, &mut rng::stream(7, &[]));
    let w = Tensor::row(&[0.2, -0.4, 0.9]);
    let out = gat.refine_plain(&w);
    let vc = w.matmul(&gat.vc.value).unwrap();
    for j in 0..3 {
        assert!((out.get(0, j) - (w.get(0, j) + vc.get(0, j))).abs() < 1e-12);
    }
    let mut r = rng::stream(8, &[]);
    let w = Tensor::randn(5, 3, 1.0, &mut r);
    let tape = Tape::inference();
    let att = gat.attention(&tape, tape.constant(w.clone())).value();
    for i in 0..5 {
        assert!((att.row_slice(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert_eq!(gat.refine_plain(&w).shape(), [5, 3]);
}

#[test]
fn cosine_classifier_examples() {
    let clf = CosineClassifier::from_weights("c", Tensor::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let p = clf.classify(&[1.0, 0.0]).unwrap();
    let e = 1f64.exp();
    assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
    assert!((p[0] - 0.731).abs() < 1e-3 && (p[1] - 0.269).abs() < 1e-3);
    let f = [0.3, -1.2];
    let a = clf.classify(&f).unwrap();
    let b = clf.classify(&[7.3 * f[0], 7.3 * f[1]]).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(clf.classify(&[0.0, 0.0]).is_err());
}

fn gmm_draw(seed: u64, m: usize) -> GmmParams {
    let mut r = rng::stream(seed, &[9]);
    let mut y = Tensor::randn(1, 6 * m + 3, 1.0, &mut r).into_data();
    // Scales in a range the quadrature grid resolves.
    for v in &mut y[3 * m..5 * m] {
        *v = -1.5 + 0.3 * *v;
    }
    GmmParams::from_raw(&y, m)
}

#[test]
fn gmm_density_integrates_to_one() {
    let (lo, hi, n) = (-8.0, 8.0, 800);
    let h = (hi - lo) / n as f64;
    for seed in 0..20 {
        let g = gmm_draw(seed, 20);
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = lo + (i as f64 + 0.5) * h;
                let y = lo + (j as f64 + 0.5) * h;
                total += g.density(x, y) * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-2, "seed {seed}: {total}");
        assert!((g.pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(g.sigma_x.iter().chain(&g.sigma_y).all(|&s| s > 0.0));
        assert!(g.rho.iter().all(|&r| r.abs() < 1.0));
    }
}

#[test]
fn single_component_nll_at_mean() {
    let mut r = rng::stream(10, &[]);
    for _ in 0..10 {
        let y = Tensor::randn(1, 9, 0.5, &mut r).into_data();
        let g = GmmParams::from_raw(&y, 1);
        let (sx, sy, rho) = (g.sigma_x[0], g.sigma_y[0], g.rho[0]);
        let closed = (2.0 * PI).ln() + (sx * sy * (1.0 - rho * rho).sqrt()).ln();
        let nll = -g.density(g.mu_x[0], g.mu_y[0]).ln();
        assert!((nll - closed).abs() < 1e-9);
        let tape = Tape::inference();
        let (v, _) = gmm_nll_var(&tape, tape.constant(Tensor::row(&y)), 1, g.mu_x[0], g.mu_y[0], 0);
        assert!((v.item() - closed).abs() < 1e-9);
    }
}

#[test]
fn discriminator_outputs_probabilities() {
    let d = Discriminator::new("d", 16, 4, 8, &mut rng::stream(11, &[]));
    let s = rasterize(&two_strokes(), 16, 16, 1).unwrap();
    let p = d.score(&canvas(0), &s).unwrap();
    assert!(p > 0.0 && p < 1.0);
    assert!(d.score(&RasterCanvas::new(32, 32), &s).is_err());
}

#[test]
fn sequence_round_trip() {
    let s = two_strokes();
    let back = from_sequence(&to_sequence(&s));
    for (a, b) in back.points().zip(s.points()) {
        assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9);
    }
}

proptest! {
    #[test]
    fn gat_is_permutation_equivariant(seed in 0u64..1000, n in 2usize..7) {
        let mut r = rng::stream(seed, &[12]);
        let gat = GatLayer::new("g", 4, &mut r);
        let w = Tensor::randn(n, 4, 1.0, &mut r);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.rotate_left(1);
        perm.swap(0, n - 1);
        let pw = Tensor::from_rows(&perm.iter().map(|&i| w.row_slice(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let a = gat.refine_plain(&w);
        let b = gat.refine_plain(&pw);
        for (k, &i) in perm.iter().enumerate() {
            for j in 0..4 {
                prop_assert!((b.get(k, j) - a.get(i, j)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn embeddings_are_unit_norm(seed in 0u64..1000) {
        let enc = RasterEncoder::new("e", small_cfg(), &mut rng::stream(seed, &[13]));
        let e = enc.embed_plain(&canvas(seed)).unwrap();
        prop_assert!((e.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
    }
}
