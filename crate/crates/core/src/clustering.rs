//! Weighted k-means on per-site `(lambda, lat, lon)` features and
//! cluster-stratified site subsampling.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{stream, STREAM_CLUSTERING, STREAM_SUBSAMPLE};
use crate::{Error, Result};

pub const DEFAULT_WEIGHTS: [f64; 3] = [0.98, 0.01, 0.01];
pub const DEFAULT_CLUSTERS: usize = 20;
pub const RESTARTS: usize = 20;
const MAX_LLOYD: usize = 500;
const MAX_RESEEDS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Cluster of each site, numbered by first appearance in site order.
    pub labels: Vec<usize>,
    /// Mean raw feature triple of each cluster.
    pub centers: Vec<[f64; 3]>,
    pub weights: [f64; 3],
    pub k_clusters: usize,
    /// Within-cluster sum of squares in the weighted standardized space.
    pub wcss: f64,
}

impl ClusterAssignment {
    /// Every site in one cluster.
    pub fn single(n: usize) -> Self {
        Self { labels: vec![0; n], centers: vec![[0.0; 3]], weights: DEFAULT_WEIGHTS, k_clusters: 1, wcss: 0.0 }
    }

    /// Assignment from given labels (renumbered by first appearance).
    pub fn from_labels(labels: &[usize]) -> Self {
        let labels = canonical_labels(labels);
        let k = labels.iter().copied().max().map_or(0, |m| m + 1);
        Self { labels, centers: vec![[0.0; 3]; k], weights: DEFAULT_WEIGHTS, k_clusters: k, wcss: f64::NAN }
    }

    pub fn members(&self, c: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == c).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k_clusters];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }
}

fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map: Vec<(usize, usize)> = Vec::new();
    labels
        .iter()
        .map(|&l| match map.iter().find(|m| m.0 == l) {
            Some(m) => m.1,
            None => {
                map.push((l, map.len()));
                map.len() - 1
            }
        })
        .collect()
}

fn sq(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// z-scores each column, then multiplies by `sqrt(weight)`.
fn scaled_features(features: &[[f64; 3]], weights: [f64; 3]) -> Vec<[f64; 3]> {
    let n = features.len() as f64;
    let mut out = features.to_vec();
    for c in 0..3 {
        let mean = features.iter().map(|f| f[c]).sum::<f64>() / n;
        let var = features.iter().map(|f| (f[c] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        let w = weights[c].sqrt();
        for (o, f) in out.iter_mut().zip(features) {
            o[c] = if sd > 0.0 { w * (f[c] - mean) / sd } else { 0.0 };
        }
    }
    out
}

struct Run {
    labels: Vec<usize>,
    wcss: f64,
}

fn nearest(x: &[f64; 3], centers: &[[f64; 3]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, ctr) in centers.iter().enumerate() {
        let d = sq(x, ctr);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd iterations from `centers`. Returns `None` if empty clusters cannot
/// be repaired.
fn lloyd(x: &[[f64; 3]], mut centers: Vec<[f64; 3]>) -> Option<Run> {
    let k = centers.len();
    let mut labels = vec![usize::MAX; x.len()];
    let mut reseeds = 0;
    for _ in 0..MAX_LLOYD {
        let mut changed = false;
        for (i, xi) in x.iter().enumerate() {
            let (c, _) = nearest(xi, &centers);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (xi, &l) in x.iter().zip(&labels) {
            counts[l] += 1;
            for d in 0..3 {
                sums[l][d] += xi[d];
            }
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            reseeds += 1;
            if reseeds > MAX_RESEEDS {
                return None;
            }
            // move the empty centre onto the point farthest from its own centre
            let far = (0..x.len())
                .max_by(|&a, &b| sq(&x[a], &centers[labels[a]]).total_cmp(&sq(&x[b], &centers[labels[b]])).then(b.cmp(&a)))
                .expect("non-empty");
            centers[empty] = x[far];
            labels[far] = empty;
            continue;
        }
        for c in 0..k {
            for d in 0..3 {
                centers[c][d] = sums[c][d] / counts[c] as f64;
            }
        }
        if !changed {
            break;
        }
    }
    let wcss = x.iter().zip(&labels).map(|(xi, &l)| sq(xi, &centers[l])).sum();
    Some(Run { labels, wcss })
}

/// Greedy farthest-point seeding from `first`.
fn farthest_point_seeds(x: &[[f64; 3]], k: usize, first: usize) -> Vec<[f64; 3]> {
    let mut centers = vec![x[first]];
    let mut dmin: Vec<f64> = x.iter().map(|p| sq(p, &x[first])).collect();
    while centers.len() < k {
        let next = (0..x.len()).max_by(|&a, &b| dmin[a].total_cmp(&dmin[b]).then(b.cmp(&a))).expect("non-empty");
        centers.push(x[next]);
        for (d, p) in dmin.iter_mut().zip(x) {
            *d = d.min(sq(p, &x[next]));
        }
    }
    centers
}

/// Weighted k-means with [`RESTARTS`] farthest-point initializations whose
/// first centre is drawn from the clustering stream of `seed`.
pub fn weighted_kmeans(features: &[[f64; 3]], weights: [f64; 3], k: usize, seed: u64) -> Result<ClusterAssignment> {
    let n = features.len();
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!("cannot form {k} clusters from {n} sites")));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("feature weights {weights:?} must be non-negative and sum to 1")));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite clustering feature".into()));
    }
    let x = scaled_features(features, weights);
    let mut rng = stream(seed, STREAM_CLUSTERING, 0);
    let mut best: Option<Run> = None;
    for _ in 0..RESTARTS {
        let first = rng.random_range(0..n);
        if let Some(run) = lloyd(&x, farthest_point_seeds(&x, k, first)) {
            if best.as_ref().is_none_or(|b| run.wcss < b.wcss) {
                best = Some(run);
            }
        }
    }
    let run = best.ok_or_else(|| Error::NonConvergence("empty cluster after re-seeding".into()))?;
    let labels = canonical_labels(&run.labels);
    let mut centers = vec![[0.0; 3]; k];
    let mut counts = vec![0usize; k];
    for (f, &l) in features.iter().zip(&labels) {
        counts[l] += 1;
        for d in 0..3 {
            centers[l][d] += f[d];
        }
    }
    for (c, &m) in centers.iter_mut().zip(&counts) {
        for v in c.iter_mut() {
            *v /= m as f64;
        }
    }
    Ok(ClusterAssignment { labels, centers, weights, k_clusters: k, wcss: run.wcss })
}

/// Simple random sample of `round(fraction * size)` (at least one) sites
/// from every cluster. Returns sorted site indices.
pub fn stratified_subsample(assignment: &ClusterAssignment, fraction: f64, seed: u64, draw: u64) -> Result<Vec<u32>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidInput(format!("sampling fraction {fraction} outside (0, 1]")));
    }
    let mut rng = stream(seed, STREAM_SUBSAMPLE, draw);
    let mut out = Vec::new();
    for c in 0..assignment.k_clusters {
        let members = assignment.members(c);
        if members.is_empty() {
            continue;
        }
        let take = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len());
        let picked = rand::seq::index::sample(&mut rng, members.len(), take);
        out.extend(picked.iter().map(|p| members[p] as u32));
    }
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn same_partition(a: &[usize], b: &[usize]) -> bool {
        canonical_labels(a) == canonical_labels(b)
    }

    #[test]
    fn separated_blobs() {
        let mut f = Vec::new();
        for i in 0..20 {
            let jitter = (i % 5) as f64 * 0.01;
            f.push([if i < 10 { 0.0 } else { 5.0 } + jitter, 10.0 + jitter, 40.0]);
        }
        let a = weighted_kmeans(&f, [1.0, 0.0, 0.0], 2, 1).unwrap();
        let truth: Vec<usize> = (0..20).map(|i| usize::from(i >= 10)).collect();
        assert!(same_partition(&a.labels, &truth));
        // brute force over all 2-partitions of a smaller copy agrees
        let small: Vec<[f64; 3]> = f.iter().step_by(2).copied().collect();
        let a = weighted_kmeans(&small, [1.0, 0.0, 0.0], 2, 1).unwrap();
        let x = scaled_features(&small, [1.0, 0.0, 0.0]);
        let mut best = (f64::INFINITY, 0u32);
        for mask in 1u32..(1 << small.len()) - 1 {
            let mut w = 0.0;
            for g in 0..2 {
                let idx: Vec<usize> = (0..small.len()).filter(|&i| ((mask >> i) & 1) as usize == g).collect();
                let m = idx.iter().map(|&i| x[i][0]).sum::<f64>() / idx.len() as f64;
                w += idx.iter().map(|&i| (x[i][0] - m).powi(2)).sum::<f64>();
            }
            if w < best.0 {
                best = (w, mask);
            }
        }
        let brute: Vec<usize> = (0..small.len()).map(|i| ((best.1 >> i) & 1) as usize).collect();
        assert!(same_partition(&a.labels, &brute));
        assert!((a.wcss - best.0).abs() < 1e-9);
    }

    #[test]
    fn k_equals_n_gives_zero_wcss() {
        let f: Vec<[f64; 3]> = (0..6).map(|i| [i as f64, (i * i) as f64, 1.0]).collect();
        let a = weighted_kmeans(&f, DEFAULT_WEIGHTS, 6, 3).unwrap();
        assert_eq!(a.wcss, 0.0);
        assert_eq!(a.sizes(), vec![1; 6]);
        assert!(weighted_kmeans(&f, DEFAULT_WEIGHTS, 7, 3).is_err());
    }

    #[test]
    fn stratified_sizes() {
        let labels: Vec<usize> = (0..80).map(|i| usize::from(i >= 30)).collect();
        let a = ClusterAssignment::from_labels(&labels);
        let s = stratified_subsample(&a, 0.5, 9, 0).unwrap();
        assert_eq!(s.iter().filter(|&&i| i < 30).count(), 15);
        assert_eq!(s.iter().filter(|&&i| i >= 30).count(), 25);
        assert_eq!(s, stratified_subsample(&a, 0.5, 9, 0).unwrap());
        assert_eq!(stratified_subsample(&a, 1.0, 9, 0).unwrap(), (0..80).collect::<Vec<u32>>());
        assert!(stratified_subsample(&a, 0.0, 9, 0).is_err());
    }
}
