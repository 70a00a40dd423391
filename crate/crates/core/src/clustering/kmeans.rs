//! Lloyd's algorithm with k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squares after every assignment step.
    pub wcss_history: Vec<f64>,
    pub iterations: usize,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

pub fn wcss(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| squared_distance(p, &centroids[a]))
        .sum()
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    points.iter().map(|p| nearest(p, centroids)).collect()
}

fn plus_plus_seeds(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // Every point coincides with a seed already; fall back to the
            // first unused index.
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// Partition `points` into `k` clusters.
///
/// Runs until assignments are stable or `max_iters` update steps have been
/// taken. An emptied cluster is reseeded at the point farthest from its own
/// centroid. With fewer points than `k`, each point becomes its own cluster.
pub fn kmeans_fit(points: &[Vec<f64>], k: usize, max_iters: usize, seed: u64) -> KMeansFit {
    assert!(!points.is_empty(), "kmeans_fit needs at least one point");
    assert!(k >= 1, "kmeans_fit needs k >= 1");

    if points.len() < k {
        return KMeansFit {
            centroids: points.to_vec(),
            assignments: (0..points.len()).collect(),
            wcss_history: vec![0.0],
            iterations: 0,
        };
    }

    let dim = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seeds(points, k, &mut rng);
    let mut assignments = assign(points, &centroids);
    let mut wcss_history = vec![wcss(points, &centroids, &assignments)];
    let mut iterations = 0;

    while iterations < max_iters {
        iterations += 1;

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let n = counts[j] as f64;
                centroids[j] = sums[j].iter().map(|s| s / n).collect();
            }
        }

        let mut taken = Vec::new();
        for j in (0..k).filter(|&j| counts[j] == 0) {
            let far = points
                .iter()
                .enumerate()
                .filter(|(i, _)| !taken.contains(i))
                .map(|(i, p)| (i, squared_distance(p, &centroids[assignments[i]])))
                .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                    Some((_, bd)) if bd >= d => best,
                    _ => Some((i, d)),
                });
            if let Some((i, _)) = far {
                taken.push(i);
                centroids[j] = points[i].clone();
            }
        }

        let next = assign(points, &centroids);
        wcss_history.push(wcss(points, &centroids, &next));
        let stable = next == assignments;
        assignments = next;
        if stable {
            break;
        }
    }

    KMeansFit { centroids, assignments, wcss_history, iterations }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pts(raw: &[(f64, f64)]) -> Vec<Vec<f64>> {
        raw.iter().map(|&(x, y)| vec![x, y]).collect()
    }

    #[test]
    fn identical_points() {
        let fit = kmeans_fit(&pts(&[(0.0, 0.0), (0.0, 0.0)]), 1, 100, 1);
        assert_eq!(fit.centroids, vec![vec![0.0, 0.0]]);
        assert_eq!(fit.assignments, vec![0, 0]);

        let fit = kmeans_fit(&pts(&[(0.0, 0.0), (0.0, 0.0)]), 2, 100, 1);
        assert_eq!(fit.centroids.len(), 2);
    }

    #[test]
    fn two_obvious_groups() {
        let points = pts(&[(0.0, 0.0), (0.0, 1.0), (10.0, 10.0), (10.0, 11.0)]);
        for seed in 0..20 {
            let fit = kmeans_fit(&points, 2, 100, seed);
            let a = &fit.assignments;
            assert_eq!(a[0], a[1]);
            assert_eq!(a[2], a[3]);
            assert_ne!(a[0], a[2]);
            assert_eq!(fit.centroids[a[0]], vec![0.0, 0.5]);
            assert_eq!(fit.centroids[a[2]], vec![10.0, 10.5]);
        }
    }

    #[test]
    fn fewer_points_than_k() {
        let points = pts(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        let fit = kmeans_fit(&points, 5, 100, 0);
        assert_eq!(fit.centroids, points);
        assert_eq!(fit.assignments, vec![0, 1, 2]);
    }

    #[test]
    fn nearest_breaks_ties_low() {
        let c = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        assert_eq!(nearest(&[0.0, 0.0], &c), 0);
        assert_eq!(nearest(&[-1.0, 0.0], &c), 1);
    }

    proptest! {
        #[test]
        fn deterministic(raw in prop::collection::vec((0.0f64..5.0, 0.0f64..5.0), 1..30), k in 1usize..5, seed: u64) {
            let points = pts(&raw);
            prop_assert_eq!(kmeans_fit(&points, k, 50, seed), kmeans_fit(&points, k, 50, seed));
        }

        #[test]
        fn wcss_non_increasing(raw in prop::collection::vec((0.0f64..5.0, 0.0f64..5.0), 1..40), k in 1usize..6, seed: u64) {
            let fit = kmeans_fit(&pts(&raw), k, 100, seed);
            for w in fit.wcss_history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9 * (1.0 + w[0]));
            }
        }
    }
}
