//! Invariants of the interpretability measures.

use agglomerator::interpret::{neighbor_agreement, overlap_metric, pca_2d, segment_islands};
use agglomerator::lattice::LatticeState;
use agglomerator::tensor::Tensor;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_state(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize, layers: usize, d: usize) -> LatticeState<f64> {
    let shape = [b, h, w, layers, d];
    let n = shape.iter().product();
    LatticeState {
        levels: Tensor::from_vec(&shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap(),
        t: 0,
    }
}

/// Random orthogonal matrix from the QR factorisation of a Gaussian one.
fn rotation(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.sample(StandardNormal));
    a.qr().q()
}

fn rotate(state: &LatticeState<f64>, q: &DMatrix<f64>) -> LatticeState<f64> {
    let d = q.nrows();
    let mut out = state.clone();
    for chunk in out.levels.data_mut().chunks_mut(d) {
        let v = q * nalgebra::DVector::from_column_slice(chunk);
        chunk.copy_from_slice(v.as_slice());
    }
    out
}

/// Island labels renumbered by first appearance.
fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

/// Flood fill over edges with cosine at least `tau`.
fn islands_oracle(state: &LatticeState<f64>, sample: usize, k: usize, tau: f64) -> Vec<usize> {
    let (h, w) = state.grid();
    let layer = state.layer(k);
    let d = state.d();
    let v = |p: usize| &layer.data()[(sample * h * w + p) * d..(sample * h * w + p + 1) * d];
    let cos = |a: usize, b: usize| {
        let dot: f64 = v(a).iter().zip(v(b)).map(|(x, y)| x * y).sum();
        dot / (v(a).iter().map(|x| x * x).sum::<f64>().sqrt() * v(b).iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let mut label = vec![usize::MAX; h * w];
    let mut next = 0;
    for start in 0..h * w {
        if label[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        label[start] = next;
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            let mut nbrs = Vec::new();
            if y > 0 {
                nbrs.push(p - w);
            }
            if y + 1 < h {
                nbrs.push(p + w);
            }
            if x > 0 {
                nbrs.push(p - 1);
            }
            if x + 1 < w {
                nbrs.push(p + 1);
            }
            for q in nbrs {
                if label[q] == usize::MAX && cos(p, q) >= tau {
                    label[q] = next;
                    stack.push(q);
                }
            }
        }
        next += 1;
    }
    label
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn agreement_ignores_global_rotations(seed in any::<u64>(), h in 1usize..5, w in 1usize..5, d in 2usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = random_state(&mut rng, 2, h, w, 3, d);
        let q = rotation(&mut rng, d);
        let rotated = rotate(&state, &q);
        for k in 0..3 {
            let a = neighbor_agreement(&state, k).unwrap();
            let b = neighbor_agreement(&rotated, k).unwrap();
            prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn islands_match_flood_fill_as_partitions(seed in any::<u64>(), h in 1usize..6, w in 1usize..6, tau in 0.05f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Few distinct directions plus noise so that islands of several sizes appear.
        let mut state = random_state(&mut rng, 1, h, w, 2, 3);
        let anchors: Vec<[f64; 3]> = (0..3).map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)]).collect();
        for cell in state.levels.data_mut().chunks_mut(3) {
            let a = anchors[rng.random_range(0..3)];
            for (c, v) in cell.iter_mut().zip(a) {
                *c = v + 0.2 * *c;
            }
        }
        for k in 0..2 {
            let got = segment_islands(&state, 0, k, tau).unwrap();
            let expected = canonical(&islands_oracle(&state, 0, k, tau));
            prop_assert_eq!(canonical(&got.labels), expected.clone());
            prop_assert_eq!(got.count, expected.iter().max().map_or(0, |m| m + 1));
            let q = rotation(&mut rng, 3);
            prop_assert_eq!(canonical(&segment_islands(&rotate(&state, &q), 0, k, tau).unwrap().labels), expected);
        }
    }

    #[test]
    fn pca_commutes_with_row_order(seed in any::<u64>(), n in 3usize..40, f in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scales: Vec<f64> = (0..f).map(|j| 4.0 / (1.0 + j as f64)).collect();
        let rows: Vec<Vec<f64>> = (0..n).map(|_| scales.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)).collect()).collect();
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let shuffled: Vec<Vec<f64>> = order.iter().map(|&i| rows[i].clone()).collect();
        let (a, pa) = pca_2d(&rows).unwrap();
        let (b, pb) = pca_2d(&shuffled).unwrap();
        // Near-degenerate spectra leave the directions ill-defined.
        let gap = (pa.explained_variance[0] - pa.explained_variance[1]).abs() / pa.explained_variance[0];
        prop_assume!(gap > 1e-3);
        for (j, &i) in order.iter().enumerate() {
            for c in 0..2 {
                prop_assert!((a[i][c] - b[j][c]).abs() < 1e-6 * (1.0 + a[i][c].abs()), "{:?} vs {:?}", a[i], b[j]);
            }
        }
        prop_assert!((pa.explained_variance[0] - pb.explained_variance[0]).abs() < 1e-9 * pa.explained_variance[0].max(1.0));
    }
}

/// Top eigenpairs by power iteration with deflation.
fn power_oracle(cov: &[Vec<f64>], count: usize) -> Vec<(f64, Vec<f64>)> {
    let n = cov.len();
    let mut a = cov.to_vec();
    let mut out = Vec::new();
    for _ in 0..count {
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 * 0.01).collect();
        let mut lambda = 0.0;
        for _ in 0..20_000 {
            let mut next: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[i][j] * v[j]).sum()).collect();
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            next.iter_mut().for_each(|x| *x /= norm);
            lambda = norm;
            let delta: f64 = next.iter().zip(&v).map(|(x, y)| (x - y).abs()).sum();
            v = next;
            if delta < 1e-15 {
                break;
            }
        }
        for i in 0..n {
            for j in 0..n {
                a[i][j] -= lambda * v[i] * v[j];
            }
        }
        out.push((lambda, v));
    }
    out
}

#[test]
fn pca_matches_power_iteration_on_a_ten_by_five_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let scales = [5.0, 3.0, 1.5, 0.7, 0.2];
    let rows: Vec<Vec<f64>> = (0..10).map(|_| scales.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)).collect()).collect();
    let (coords, pca) = pca_2d(&rows).unwrap();
    let mean: Vec<f64> = (0..5).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / 10.0).collect();
    let cov: Vec<Vec<f64>> = (0..5)
        .map(|a| (0..5).map(|b| rows.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / 9.0).collect())
        .collect();
    let eig = power_oracle(&cov, 2);
    for (c, (lambda, v)) in eig.iter().enumerate() {
        assert!((pca.explained_variance[c] - lambda).abs() < 1e-8);
        let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        let sign = lead.signum();
        for (row, p) in rows.iter().zip(&coords) {
            let proj: f64 = row.iter().zip(&mean).zip(v).map(|((x, m), e)| (x - m) * e * sign).sum();
            assert!((proj - p[c]).abs() < 1e-8, "{proj} vs {}", p[c]);
        }
    }
}

#[test]
fn separated_gaussians_barely_overlap() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut coords = Vec::new();
    let mut groups = Vec::new();
    for (g, cx) in [(0usize, -3.0), (1, 3.0)] {
        for _ in 0..1000 {
            coords.push([cx + rng.sample::<f64, _>(StandardNormal), rng.sample(StandardNormal)]);
            groups.push(g);
        }
    }
    let o = overlap_metric(&coords, &groups, 100).unwrap();
    assert!(o < 5.0, "{o}");
}
