//! Lloyd's k-means with k-means++ or uniform seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KmeansInit {
    #[default]
    PlusPlus,
    /// `k` distinct points drawn uniformly.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after each assignment step.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn seed_centroids(points: &[Vec<f64>], k: usize, init: KmeansInit, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    match init {
        KmeansInit::Random => rand::seq::index::sample(rng, n, k).into_iter().map(|i| points[i].clone()).collect(),
        KmeansInit::PlusPlus => {
            let mut centroids = vec![points[rng.random_range(0..n)].clone()];
            let mut d: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
            while centroids.len() < k {
                let total: f64 = d.iter().sum();
                let pick = if total > 0.0 {
                    let mut r = rng.random::<f64>() * total;
                    let mut chosen = n - 1;
                    for (i, &w) in d.iter().enumerate() {
                        if r < w {
                            chosen = i;
                            break;
                        }
                        r -= w;
                    }
                    chosen
                } else {
                    rng.random_range(0..n)
                };
                centroids.push(points[pick].clone());
                for (di, p) in d.iter_mut().zip(points) {
                    *di = di.min(dist2(p, &centroids[centroids.len() - 1]));
                }
            }
            centroids
        }
    }
}

/// Clusters `points` into `k` groups. Stops when assignments no longer
/// change or after `max_iter` rounds. An emptied cluster keeps its centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize, init: KmeansInit) -> Result<KmeansResult> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} needs 1 <= k <= {n} points")));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::invalid("points differ in dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(points, k, init, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut objective = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter.max(1) {
        iterations += 1;
        let mut changed = false;
        let mut obj = 0.0;
        for (a, p) in assignments.iter_mut().zip(points) {
            let (j, d) = nearest(p, &centroids);
            changed |= *a != j;
            *a = j;
            obj += d;
        }
        objective.push(obj);
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignments.iter().zip(points) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    Ok(KmeansResult { assignments, centroids, objective, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = vec![vec![0.0, 0.0], vec![2.0, 4.0], vec![4.0, 2.0]];
        let r = kmeans(&pts, 1, 3, 10, KmeansInit::PlusPlus).unwrap();
        assert_eq!(r.assignments, vec![0, 0, 0]);
        assert_eq!(r.centroids[0], vec![2.0, 2.0]);
    }

    #[test]
    fn too_many_clusters() {
        assert!(kmeans(&[vec![1.0]], 2, 0, 5, KmeansInit::Random).is_err());
    }
}
