//! Nearest-neighbour Kullback-Leibler divergence estimation.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::field::SpatioTemporalField;
use crate::linalg::{cholesky, cholesky_solve, log_det_from_cholesky, solve_lower, Matrix};
use crate::{Error, Result};

/// Distances below this are replaced by it.
pub const DISTANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CloudLabel {
    Observation,
    Simulation,
}

/// `m` points of dimension `d`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCloud {
    d: usize,
    points: Vec<f64>,
    pub label: CloudLabel,
}

impl SampleCloud {
    pub fn new(d: usize, points: Vec<f64>, label: CloudLabel) -> Result<Self> {
        if d == 0 || points.len() % d != 0 {
            return Err(Error::Shape(format!("{} values do not form points of dimension {d}", points.len())));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite coordinate in sample cloud".into()));
        }
        Ok(Self { d, points, label })
    }

    /// One point per day; the coordinates are the site values of that day.
    pub fn from_field(field: &SpatioTemporalField, label: CloudLabel) -> Self {
        Self::from_site_major(field.values(), field.n_sites(), field.n_days(), label)
    }

    /// Transposes a site-major `n_sites x n_days` block into day points.
    pub fn from_site_major(values: &[f64], n_sites: usize, n_days: usize, label: CloudLabel) -> Self {
        let mut points = Vec::with_capacity(values.len());
        for t in 0..n_days {
            points.extend((0..n_sites).map(|i| values[i * n_days + t]));
        }
        Self { d: n_sites, points, label }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.d..(i + 1) * self.d]
    }

    /// Points `idx` in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut points = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            points.extend_from_slice(self.point(i));
        }
        Self { d: self.d, points, label: self.label }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    /// Nats.
    pub value: f64,
    #[serde(rename = "k")]
    pub k_used: usize,
    pub m: usize,
    pub m_prime: usize,
    pub floored_pairs: usize,
}

/// `round(sqrt(m))`, at least 1.
pub fn default_k(m: usize) -> usize {
    ((m as f64).sqrt().round() as usize).max(1)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-th smallest value of `d2` (1-based `k`), as a distance.
fn kth_distance(d2: &mut [f64], k: usize) -> f64 {
    let (_, kth, _) = d2.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
    kth.sqrt()
}

pub fn check_knn_inputs(obs: &SampleCloud, sim: &SampleCloud, k: usize) -> Result<()> {
    if obs.dim() != sim.dim() {
        return Err(Error::Shape(format!("dimension {} vs {}", obs.dim(), sim.dim())));
    }
    if k == 0 || k >= obs.len() || k > sim.len() {
        return Err(Error::InvalidInput(format!(
            "k = {k} needs more points (m = {}, m' = {})",
            obs.len(),
            sim.len()
        )));
    }
    Ok(())
}

/// Contribution `log(nu_k(i) / rho_k(i))` of observation point `i` and the
/// number of floored distances (0, 1 or 2).
pub fn knn_log_ratio(obs: &SampleCloud, sim: &SampleCloud, k: usize, i: usize) -> (f64, usize) {
    let x = obs.point(i);
    let mut d2: Vec<f64> = (0..obs.len()).filter(|&j| j != i).map(|j| sq_dist(x, obs.point(j))).collect();
    let rho = kth_distance(&mut d2, k);
    let mut d2: Vec<f64> = (0..sim.len()).map(|j| sq_dist(x, sim.point(j))).collect();
    let nu = kth_distance(&mut d2, k);
    let floored = usize::from(rho < DISTANCE_FLOOR) + usize::from(nu < DISTANCE_FLOOR);
    ((nu.max(DISTANCE_FLOOR) / rho.max(DISTANCE_FLOOR)).ln(), floored)
}

/// Combines per-point terms (in point order) into the estimate.
pub fn knn_kl_from_terms(terms: &[(f64, usize)], d: usize, m: usize, m_prime: usize, k: usize) -> KlEstimate {
    let sum: f64 = terms.iter().map(|t| t.0).sum();
    let floored_pairs = terms.iter().map(|t| t.1).sum();
    let value = d as f64 / m as f64 * sum + (m_prime as f64 / (m as f64 - 1.0)).ln();
    KlEstimate { value, k_used: k, m, m_prime, floored_pairs }
}

/// `D(obs || sim) ≈ (d/m) sum_i log(nu_k(i) / rho_k(i)) + log(m' / (m - 1))`
/// with exact Euclidean neighbour search.
pub fn knn_kl(obs: &SampleCloud, sim: &SampleCloud, k: usize) -> Result<KlEstimate> {
    check_knn_inputs(obs, sim, k)?;
    let terms: Vec<(f64, usize)> = (0..obs.len()).map(|i| knn_log_ratio(obs, sim, k, i)).collect();
    Ok(knn_kl_from_terms(&terms, obs.dim(), obs.len(), sim.len(), k))
}

/// Closed-form KL divergence `D(N(mu0, s0) || N(mu1, s1))`.
pub fn gaussian_kl(mu0: &[f64], s0: &Matrix, mu1: &[f64], s1: &Matrix) -> Result<f64> {
    let d = mu0.len();
    if mu1.len() != d || s0.rows() != d || s1.rows() != d || !s0.is_square() || !s1.is_square() {
        return Err(Error::Shape("Gaussian parameters have inconsistent dimensions".into()));
    }
    let l0 = cholesky(s0)?;
    let l1 = cholesky(s1)?;
    // tr(S1^-1 S0) = ||L1^-1 L0||_F^2
    let mut tr = 0.0;
    for c in 0..d {
        let col: Vec<f64> = (0..d).map(|r| l0[(r, c)]).collect();
        tr += solve_lower(&l1, &col).iter().map(|v| v * v).sum::<f64>();
    }
    let diff: Vec<f64> = mu1.iter().zip(mu0).map(|(a, b)| a - b).collect();
    let maha: f64 = diff.iter().zip(cholesky_solve(&l1, &diff)).map(|(a, b)| a * b).sum();
    Ok(0.5 * (tr - d as f64 + maha + log_det_from_cholesky(&l1) - log_det_from_cholesky(&l0)))
}
