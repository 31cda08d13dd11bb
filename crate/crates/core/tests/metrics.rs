use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sketchlab::metrics::*;
use sketchlab::models::RasterEncoderConfig;
use sketchlab::retrieval::*;
use sketchlab::sketch::{gen_synthetic_dataset, SynthConfig};

fn random_gallery(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Gallery {
    let emb: Vec<Vec<f64>> = (0..m)
        .map(|_| normalize(&(0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()))
        .collect();
    Gallery::new(emb, (0..m as u64).map(|i| 100 + i).collect()).unwrap()
}

/// Sorts every item by (distance, is-true) and reads off the true position.
fn oracle_rank(query: &[f64], g: &Gallery, true_idx: usize) -> usize {
    let mut items: Vec<(f64, bool)> = (0..g.len())
        .map(|i| (euclidean(query, g.embedding(i)), i == true_idx))
        .collect();
    items.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    1 + items.iter().position(|x| x.1).unwrap()
}

fn brute_kendall(a: &RankList, b: &RankList) -> f64 {
    let pa = a.positions();
    let pb = b.positions();
    let n = a.len();
    let mut disc = 0;
    for i in 0..n {
        for j in i + 1..n {
            if (pa[i] < pa[j]) != (pb[i] < pb[j]) {
                disc += 1;
            }
        }
    }
    disc as f64 / (n * (n - 1) / 2) as f64
}

#[test]
fn rank_of_matches_sort_oracle_on_200_galleries() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..200 {
        let m = rng.random_range(1..=64);
        let g = random_gallery(&mut rng, m, 8);
        let t = rng.random_range(0..m);
        // Every fourth trial queries with a duplicated row to force ties.
        let q = if trial % 4 == 0 {
            g.embedding(rng.random_range(0..m)).to_vec()
        } else {
            normalize(&(0..8).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
        };
        let (rank, list) = g.rank_of(&q, 100 + t as u64).unwrap();
        assert_eq!(rank, oracle_rank(&q, &g, t), "trial {trial}");
        assert!(list.is_permutation());
        let d = g.distances(&q);
        assert!(list.0.windows(2).all(|w| d[w[0]] <= d[w[1]]));
    }
}

#[test]
fn rank_examples() {
    assert_eq!(rank_from_distances(&[0.5, 0.2, 0.9], 0), 2);
    assert_eq!(rank_from_distances(&[0.3; 5], 4), 5);
    assert_eq!(rank_from_distances(&[0.0, 0.4, 0.7], 0), 1);
    let g = Gallery::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![7, 9]).unwrap();
    assert!(g.rank_of(&[1.0, 0.0], 8).is_err());
    assert_eq!(g.rank_of(&[1.0, 0.0], 7).unwrap().0, 1);
}

#[test]
fn gallery_rejects_bad_rows() {
    assert!(Gallery::new(vec![vec![2.0, 0.0]], vec![1]).is_err());
    assert!(Gallery::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![1, 1]).is_err());
}

#[test]
fn acc_examples() {
    assert_eq!(acc_at_q(&[1, 1, 1], 1).unwrap(), 1.0);
    assert!((acc_at_q(&[1, 2, 11], 10).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(acc_at_q(&[3, 7, 2], 7).unwrap(), 1.0);
    assert!(acc_at_q(&[], 1).is_err());
}

#[test]
fn kendall_examples() {
    let id = RankList(vec![0, 1, 2, 3]);
    assert_eq!(kendall_tau_norm(&id, &id).unwrap(), 0.0);
    assert_eq!(kendall_tau_norm(&id, &RankList(vec![3, 2, 1, 0])).unwrap(), 1.0);
    let t = kendall_tau_norm(&RankList(vec![0, 1, 2]), &RankList(vec![1, 0, 2])).unwrap();
    assert!((t - 1.0 / 3.0).abs() < 1e-12);
    assert!(kendall_tau_norm(&RankList(vec![0, 1]), &RankList(vec![0, 2])).is_err());
    assert!(kendall_tau_norm(&RankList(vec![0, 1]), &RankList(vec![0, 1, 2])).is_err());
}

#[test]
fn kendall_matches_pair_enumeration_on_500_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..500 {
        let n = rng.random_range(2..40);
        let mut a: Vec<usize> = (0..n).collect();
        let mut b = a.clone();
        rand::seq::SliceRandom::shuffle(a.as_mut_slice(), &mut rng);
        rand::seq::SliceRandom::shuffle(b.as_mut_slice(), &mut rng);
        let (a, b) = (RankList(a), RankList(b));
        let t = kendall_tau_norm(&a, &b).unwrap();
        assert!((t - brute_kendall(&a, &b)).abs() < 1e-12);
        assert!((t - kendall_tau_norm(&b, &a).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn percentile_endpoints() {
    assert_eq!(ranking_percentile(1, 10), 1.0);
    assert_eq!(ranking_percentile(10, 10), 0.0);
}

#[test]
fn episode_metric_examples() {
    let c = EpisodeCurve::from_ranks(&[1, 1, 1], 20);
    assert_eq!(episode_metrics(&c).unwrap(), (100.0, 1.0));
    let c = EpisodeCurve {
        rp: vec![50.0, 100.0],
        inv_rank: vec![0.5, 1.0],
    };
    assert_eq!(episode_metrics(&c).unwrap().0, 75.0);
    assert!(episode_metrics(&EpisodeCurve::default()).is_err());
}

#[test]
fn backlash_examples() {
    assert_eq!(stroke_backlash(&[0.1, 0.2, 0.2, 0.9]).unwrap(), 0.0);
    assert!((stroke_backlash(&[0.5, 0.4, 0.6]).unwrap() - 0.05).abs() < 1e-12);
    assert!((stroke_backlash(&[0.9, 0.8, 0.7, 0.6, 0.5]).unwrap() - 0.1).abs() < 1e-12);
    assert!(stroke_backlash(&[0.5]).is_err());
}

#[test]
fn triplet_examples() {
    let a = [0.0, 0.0];
    assert_eq!(triplet_loss(&a, &a, &[1.0, 0.0], 0.3), 0.0);
    assert!((triplet_loss(&a, &[0.5, 0.0], &[0.0, 0.5], 0.3) - 0.3).abs() < 1e-12);
    assert!((triplet_loss(&a, &[0.5, 0.0], &[0.0, 0.6], 0.3) - 0.2).abs() < 1e-12);
}

fn small_model(seed: u64) -> RetrievalModel {
    let cfg = RasterEncoderConfig {
        channels: 16,
        dim: 32,
        ..Default::default()
    };
    RetrievalModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn zero_epochs_leave_model_unchanged() {
    let data = gen_synthetic_dataset(&SynthConfig {
        n_classes: 2,
        n_instances_per_class: 2,
        ..Default::default()
    })
    .unwrap();
    let pairs = pairs_from_instances(&data, 1).unwrap();
    let mut model = small_model(3);
    let before = model.clone();
    let cfg = TripletConfig {
        epochs: 0,
        ..Default::default()
    };
    let report = train_triplet(&mut model, &pairs, &cfg).unwrap();
    assert!(report.step_losses.is_empty());
    assert_eq!(model.embed_photo(&pairs[0].photo).unwrap(), before.embed_photo(&pairs[0].photo).unwrap());
    assert!(train_triplet(&mut model, &pairs[..1], &cfg).is_err());
}

#[test]
fn triplet_training_beats_chance_and_is_deterministic() {
    let data = gen_synthetic_dataset(&SynthConfig {
        seed: 5,
        n_classes: 4,
        n_instances_per_class: 4,
        ..Default::default()
    })
    .unwrap();
    let pairs = pairs_from_instances(&data, 1).unwrap();
    let cfg = TripletConfig {
        epochs: 30,
        seed: 1,
        ..Default::default()
    };
    let mut a = small_model(4);
    let mut b = small_model(4);
    let ra = train_triplet(&mut a, &pairs, &cfg).unwrap();
    let rb = train_triplet(&mut b, &pairs, &cfg).unwrap();
    assert_eq!(ra, rb);
    assert!(ra.step_losses.iter().all(|l| *l >= 0.0));
    let photos: Vec<(u64, &_)> = pairs.iter().map(|p| (p.instance_id, &p.photo)).collect();
    let gallery = a.gallery(&photos).unwrap();
    let queries: Vec<(u64, &_)> = pairs.iter().map(|p| (p.instance_id, &p.sketch)).collect();
    let ranks = a.ranks(&queries, &gallery).unwrap();
    assert!(acc_at_q(&ranks, 1).unwrap() > 1.0 / 16.0);
}

proptest! {
    #[test]
    fn kendall_is_bounded_and_zero_on_self(perm in Just((0..12usize).collect::<Vec<_>>()).prop_shuffle(),
                                           other in Just((0..12usize).collect::<Vec<_>>()).prop_shuffle()) {
        let a = RankList(perm);
        let b = RankList(other);
        prop_assert_eq!(kendall_tau_norm(&a, &a).unwrap(), 0.0);
        let t = kendall_tau_norm(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&t));
        prop_assert_eq!(t, kendall_tau_norm(&b, &a).unwrap());
    }

    #[test]
    fn percentile_maps_rank_range_onto_unit_interval(m in 2usize..500, r in 1usize..500) {
        let r = r.min(m);
        let p = ranking_percentile(r, m);
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert_eq!(ranking_percentile(1, m), 1.0);
        prop_assert_eq!(ranking_percentile(m, m), 0.0);
    }

    #[test]
    fn backlash_ignores_non_decreasing_prefix(
        prefix in proptest::collection::vec(0.0f64..1.0, 1..8),
        tail in proptest::collection::vec(0.0f64..1.0, 2..10),
    ) {
        let mut prefix = prefix;
        prefix.sort_by(f64::total_cmp);
        // Bridge the prefix into the tail without a drop.
        let lo = prefix.last().copied().unwrap().min(tail[0]);
        let prefix: Vec<f64> = prefix.iter().map(|v| v * lo / prefix.last().unwrap().max(1e-12)).collect();
        let mut joined = prefix.clone();
        joined.extend_from_slice(&tail);
        let base = stroke_backlash(&tail).unwrap() * (tail.len() - 1) as f64;
        let full = stroke_backlash(&joined).unwrap() * (joined.len() - 1) as f64;
        prop_assert!((base - full).abs() < 1e-9);
    }
}
