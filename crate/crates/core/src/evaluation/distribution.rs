//! Dataset-distribution study: average-hash bit vectors clustered with
//! k-means, plus a 2-D principal-component projection for plotting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::kmeans::{kmeans, KmeansInit, KmeansResult};
use crate::error::{Error, Result};
use crate::imageproc::{average_hash, GrayImage};

/// Hash bits of each image as 0/1 coordinates.
pub fn hash_features(images: &[GrayImage], side: usize) -> Result<Vec<Vec<f64>>> {
    images
        .iter()
        .map(|img| Ok(average_hash(img, side)?.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect()))
        .collect()
}

/// First two principal components of `points` (power iteration with
/// deflation), returned as per-point coordinates.
pub fn pca_2d(points: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let dim = points[0].len();
    let mean: Vec<f64> = (0..dim).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    let centered: Vec<Vec<f64>> = points.iter().map(|p| p.iter().zip(&mean).map(|(a, m)| a - m).collect()).collect();
    let mut cov = vec![0.0; dim * dim];
    for p in &centered {
        for a in 0..dim {
            for b in 0..dim {
                cov[a * dim + b] += p[a] * p[b];
            }
        }
    }
    let mut comps: Vec<Vec<f64>> = Vec::new();
    for c in 0..2 {
        let mut v: Vec<f64> = (0..dim).map(|j| 1.0 + ((j * 7 + c * 3) % 11) as f64 / 11.0).collect();
        for _ in 0..200 {
            let mut w: Vec<f64> = (0..dim).map(|a| (0..dim).map(|b| cov[a * dim + b] * v[b]).sum()).collect();
            for u in &comps {
                let d: f64 = w.iter().zip(u).map(|(x, y)| x * y).sum();
                w.iter_mut().zip(u).for_each(|(x, y)| *x -= d * y);
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            v = w.into_iter().map(|x| x / norm).collect();
        }
        comps.push(v);
    }
    centered
        .iter()
        .map(|p| {
            let proj = |u: &Vec<f64>| p.iter().zip(u).map(|(x, y)| x * y).sum::<f64>();
            [proj(&comps[0]), proj(&comps[1])]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub size: usize,
    /// Members per group label (dataset source or class).
    pub groups: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub k: usize,
    pub hash_side: usize,
    pub clusters: Vec<ClusterSummary>,
    pub objective: Vec<f64>,
    /// Per image: group label, cluster, 2-D projection.
    #[serde(skip)]
    pub points: Vec<(String, usize, [f64; 2])>,
}

impl DistributionReport {
    pub fn points_csv(&self) -> String {
        let mut out = String::from("group,cluster,pc1,pc2\n");
        for (g, c, [x, y]) in &self.points {
            out.push_str(&format!("{g},{c},{x},{y}\n"));
        }
        out
    }
}

/// Hashes `images`, clusters the bit vectors and tabulates each cluster's
/// composition by `groups[i]`.
pub fn analyze_distribution(
    images: &[GrayImage],
    groups: &[String],
    k: usize,
    hash_side: usize,
    seed: u64,
) -> Result<DistributionReport> {
    if images.len() != groups.len() {
        return Err(Error::invalid("one group label per image required"));
    }
    let feats = hash_features(images, hash_side)?;
    let KmeansResult { assignments, objective, .. } = kmeans(&feats, k, seed, 100, KmeansInit::PlusPlus)?;
    let proj = pca_2d(&feats);
    let mut clusters = vec![ClusterSummary { size: 0, groups: BTreeMap::new() }; k];
    for (&a, g) in assignments.iter().zip(groups) {
        clusters[a].size += 1;
        *clusters[a].groups.entry(g.clone()).or_insert(0) += 1;
    }
    let points = groups.iter().zip(&assignments).zip(proj).map(|((g, &a), p)| (g.clone(), a, p)).collect();
    Ok(DistributionReport { k, hash_side, clusters, objective, points })
}
