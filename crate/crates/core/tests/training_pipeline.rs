//! Pre-training and classifier phases on a small synthetic dataset.

use agglomerator::config::{DatasetId, TrainConfig};
use agglomerator::data::{Dataset, Normalization, Split};
use agglomerator::model::{Agglomerator, BACKBONE};
use agglomerator::numerics::{checkpoint, Graph};
use agglomerator::rng::{RngStreams, Stream};
use agglomerator::training::{self, Metrics, RunOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 8;

fn config() -> TrainConfig {
    TrainConfig {
        d: 8,
        levels: 2,
        steps: 3,
        f1: 16,
        batch_size: 8,
        epochs_pretrain: 1,
        epochs_train: 1,
        workers: 1,
        ..TrainConfig::default()
    }
}

/// Class `c` images brighten quadrant `c % 4` and row `c`.
fn dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * SIDE * SIDE);
    let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
    for &c in &labels {
        for y in 0..SIDE {
            for x in 0..SIDE {
                let q = 2 * (y / (SIDE / 2)) + x / (SIDE / 2);
                let base = if q == c % 4 || y == c % SIDE { 0.7 } else { 0.1 };
                images.push((base + rng.random_range(0.0..0.3f32)).min(1.0));
            }
        }
    }
    Dataset {
        id: DatasetId::Mnist,
        split: Split::Train,
        images,
        labels,
        shape: (SIDE, SIDE, 1),
        classes: 10,
        normalization: None,
    }
}

fn model<T: agglomerator::scalar::Scalar>(cfg: &TrainConfig) -> Agglomerator<T> {
    let mut m = cfg.model();
    (m.in_h, m.in_w) = (SIDE, SIDE);
    Agglomerator::new(&m, &mut RngStreams::new(cfg.seed).stream(Stream::Init)).unwrap()
}

fn quiet() -> RunOptions {
    RunOptions {
        checkpoint_dir: None,
        log_every: 0,
    }
}

/// Brute-force contrastive loss on concrete features.
fn oracle(features: &[f64], f: usize, labels: &[usize], temperature: f64) -> f64 {
    let n = labels.len();
    let row = |i: usize| &features[i * f..(i + 1) * f];
    let cos = |a: usize, b: usize| {
        let dot: f64 = row(a).iter().zip(row(b)).map(|(x, y)| x * y).sum();
        let na: f64 = row(a).iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = row(b).iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb) / temperature
    };
    (0..n)
        .map(|a| {
            let p = (a + n / 2) % n;
            let others: f64 = (0..n).filter(|&j| labels[j] != labels[a]).map(|j| cos(a, j).exp()).sum();
            -cos(a, p) + (cos(a, p).exp() + others).ln()
        })
        .sum::<f64>()
        / n as f64
}

#[test]
fn first_batch_loss_matches_the_brute_force_oracle() {
    let cfg = config();
    let data = dataset(32, 1);
    let m = model::<f64>(&cfg);
    let norm = Normalization::from_config(&cfg).unwrap();
    let idx: Vec<usize> = (0..cfg.batch_size).collect();
    let batch = training::contrastive_batch(&m, &cfg, &data, &norm, &idx, 0, 0).unwrap();
    let mut g = Graph::new();
    let loss = training::contrastive_loss(&m, &cfg, &mut g, &batch).unwrap();
    let x = g.constant(batch.images.clone());
    let f = m.features(&mut g, x, &batch.init, batch.mode).unwrap();
    let expected = oracle(g.value(f).data(), cfg.f1, &batch.labels, cfg.temperature);
    assert!((g.value(loss).data()[0] - expected).abs() < 1e-5);
    let negatives = 2 * cfg.batch_size - 2;
    assert!((expected - ((negatives + 1) as f64).ln()).abs() < 0.5, "{expected}");
}

#[test]
fn checkpoint_round_trip_keeps_the_next_batch_loss() {
    let cfg = config();
    let data = dataset(32, 2);
    let mut m = model::<f32>(&cfg);
    training::pretrain(&mut m, &cfg, &data, &mut Metrics::in_memory(), &quiet()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    training::save_checkpoint(&m, dir.path()).unwrap();
    let mut restored = model::<f32>(&TrainConfig { seed: 99, ..cfg.clone() });
    checkpoint::load(&mut restored.store, dir.path()).unwrap();
    let norm = Normalization::from_config(&cfg).unwrap();
    let idx: Vec<usize> = (8..16).collect();
    let loss = |m: &Agglomerator<f32>| {
        let batch = training::contrastive_batch(m, &cfg, &data, &norm, &idx, 1, 0).unwrap();
        let mut g = Graph::new();
        let l = training::contrastive_loss(m, &cfg, &mut g, &batch).unwrap();
        g.value(l).data()[0]
    };
    assert_eq!(loss(&m).to_bits(), loss(&restored).to_bits());
}

#[test]
fn one_epoch_pretrain_is_reproducible() {
    let cfg = config();
    let data = dataset(32, 3);
    let run = || {
        let mut m = model::<f32>(&cfg);
        let mut metrics = Metrics::in_memory();
        let l = training::pretrain(&mut m, &cfg, &data, &mut metrics, &quiet()).unwrap();
        (l, metrics.rows.iter().map(ToString::to_string).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn pretrain_loss_falls_over_two_epochs() {
    let cfg = TrainConfig {
        epochs_pretrain: 2,
        ..config()
    };
    let data = dataset(64, 4);
    let mut m = model::<f32>(&cfg);
    let l = training::pretrain(&mut m, &cfg, &data, &mut Metrics::in_memory(), &quiet()).unwrap();
    assert!(l[1] < l[0], "{l:?}");
}

#[test]
fn classifier_phase_only_moves_the_head_and_evaluation_is_pure() {
    let cfg = config();
    let data = dataset(32, 5);
    let mut m = model::<f32>(&cfg);
    training::pretrain(&mut m, &cfg, &data, &mut Metrics::in_memory(), &quiet()).unwrap();
    let before = m.store.clone();
    training::train_classifier(&mut m, &cfg, &data, &mut Metrics::in_memory(), &quiet()).unwrap();
    let mut head_moved = false;
    for ((_, a), (_, b)) in before.iter().zip(m.store.iter()) {
        if BACKBONE.iter().any(|p| a.name.starts_with(p)) {
            assert_eq!(a.value, b.value, "{} changed", a.name);
        } else {
            head_moved |= a.value != b.value;
        }
    }
    assert!(head_moved);
    let snapshot = m.store.clone();
    let e1 = training::evaluate(&m, &cfg, &data).unwrap();
    let e2 = training::evaluate(&m, &cfg, &data).unwrap();
    assert_eq!(e1, e2);
    for ((_, a), (_, b)) in snapshot.iter().zip(m.store.iter()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let cfg = config();
    let data = dataset(16, 6);
    let mut m = model::<f32>(&cfg);
    m.select_classifier();
    let norm = Normalization::from_config(&cfg).unwrap();
    let images = data.batch::<f32>(&(0..8).collect::<Vec<_>>(), Some(&norm)).unwrap();
    let init = m.init_state(8, &mut ChaCha8Rng::seed_from_u64(0));
    let mut g = Graph::new();
    let x = g.constant(images);
    let logits = m.logits(&mut g, x, &init, agglomerator::lattice::RunMode::EVAL).unwrap();
    let loss = agglomerator::heads::cross_entropy(&mut g, logits, &data.labels[..8]).unwrap();
    let grads = g.backward(loss).unwrap();
    for (id, p) in m.store.iter() {
        let grad = grads.param(id);
        if p.frozen {
            assert!(grad.is_none_or(|t| t.data().iter().all(|&v| v == 0.0)), "{}", p.name);
        } else {
            assert!(grad.is_some(), "{}", p.name);
        }
    }
}
