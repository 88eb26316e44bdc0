//! Yeo-Johnson power transformation.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::optim::golden_section;
use crate::{stats, Error, Result};

pub const LAMBDA_MIN: f64 = -2.0;
pub const LAMBDA_MAX: f64 = 4.0;
const GRID_STEP: f64 = 0.05;
/// Half the 95% chi-square(1) quantile.
const CI_DROP: f64 = 1.920_729_410_347_062;

/// `g_lambda(x)`.
pub fn yeo_johnson(x: f64, lambda: f64) -> f64 {
    if lambda == 1.0 {
        return x;
    }
    if x >= 0.0 {
        if lambda == 0.0 {
            x.ln_1p()
        } else {
            (lambda * x.ln_1p()).exp_m1() / lambda
        }
    } else {
        let a = 2.0 - lambda;
        if a == 0.0 {
            -(-x).ln_1p()
        } else {
            -(a * (-x).ln_1p()).exp_m1() / a
        }
    }
}

/// Open interval of attainable `g_lambda` values.
pub fn range(lambda: f64) -> (f64, f64) {
    let hi = if lambda < 0.0 { -1.0 / lambda } else { f64::INFINITY };
    let lo = if lambda > 2.0 { -1.0 / (lambda - 2.0) } else { f64::NEG_INFINITY };
    (lo, hi)
}

/// `g_lambda^{-1}(y)`; fails when `y` is outside [`range`].
pub fn yeo_johnson_inverse(y: f64, lambda: f64) -> Result<f64> {
    if lambda == 1.0 {
        return Ok(y);
    }
    let (lo, hi) = range(lambda);
    if !(y < hi) {
        return Err(Error::TransformRange { value: y, lambda, bound: hi });
    }
    if !(y > lo) {
        return Err(Error::TransformRange { value: y, lambda, bound: lo });
    }
    let x = if y >= 0.0 {
        if lambda == 0.0 {
            y.exp_m1()
        } else {
            ((lambda * y).ln_1p() / lambda).exp_m1()
        }
    } else {
        let a = 2.0 - lambda;
        if a == 0.0 {
            -(-y).exp_m1()
        } else {
            -((-a * y).ln_1p() / a).exp_m1()
        }
    };
    if !x.is_finite() {
        let bound = if y >= 0.0 { hi } else { lo };
        return Err(Error::TransformRange { value: y, lambda, bound });
    }
    Ok(x)
}

/// Maximum-likelihood estimate of the transformation parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaEstimate {
    pub lambda_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub loglik: f64,
}

/// Profile log-likelihood of `lambda`: Gaussian likelihood of the
/// transformed sample at its ML mean and variance plus the log-Jacobian.
pub fn profile_loglik(sample: &[f64], lambda: f64) -> f64 {
    profile_loglik_with(sample, lambda, log_jacobian_sum(sample))
}

fn log_jacobian_sum(sample: &[f64]) -> f64 {
    sample.iter().map(|&x| x.signum() * x.abs().ln_1p()).sum()
}

fn profile_loglik_with(sample: &[f64], lambda: f64, jac: f64) -> f64 {
    let n = sample.len() as f64;
    let (mut s, mut s2) = (0.0, 0.0);
    for &x in sample {
        let y = yeo_johnson(x, lambda);
        s += y;
        s2 += y * y;
    }
    let m = s / n;
    let var = (s2 / n - m * m).max(0.0);
    if !(var > 0.0) || !var.is_finite() {
        return f64::NEG_INFINITY;
    }
    -0.5 * n * ((2.0 * core::f64::consts::PI * var).ln() + 1.0) + (lambda - 1.0) * jac
}

/// Grid scan on `[-2, 4]` with step 0.05, golden-section refinement around
/// the best grid point and a profile-likelihood 95% interval.
pub fn fit_lambda_mle(sample: &[f64]) -> Result<LambdaEstimate> {
    if sample.len() < 30 {
        return Err(Error::InsufficientData(format!("lambda fit needs 30 values, got {}", sample.len())));
    }
    if let Some(&x) = sample.iter().find(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite sample value {x}")));
    }
    if sample.iter().all(|&x| x == sample[0]) {
        return Err(Error::InvalidInput("constant sample".into()));
    }
    let jac = log_jacobian_sum(sample);
    let ll = |l: f64| profile_loglik_with(sample, l, jac);
    let steps = ((LAMBDA_MAX - LAMBDA_MIN) / GRID_STEP).round() as usize;
    let mut best = (0, f64::NEG_INFINITY);
    for i in 0..=steps {
        let v = ll(LAMBDA_MIN + i as f64 * GRID_STEP);
        if v > best.1 {
            best = (i, v);
        }
    }
    let centre = LAMBDA_MIN + best.0 as f64 * GRID_STEP;
    let lo = (centre - GRID_STEP).max(LAMBDA_MIN);
    let hi = (centre + GRID_STEP).min(LAMBDA_MAX);
    let refined = golden_section(|l| -ll(l), lo, hi, 1e-7);
    let (lambda_hat, loglik) = if -refined.value >= best.1 { (refined.x, -refined.value) } else { (centre, best.1) };
    if !loglik.is_finite() {
        return Err(Error::NonConvergence("profile likelihood is not finite on the search grid".into()));
    }
    if lambda_hat - LAMBDA_MIN < 1e-3 || LAMBDA_MAX - lambda_hat < 1e-3 {
        return Err(Error::NonConvergence(format!(
            "lambda maximum at the search bound, bracket [{LAMBDA_MIN}, {LAMBDA_MAX}]"
        )));
    }
    let target = loglik - CI_DROP;
    let ci_low = ci_end(&ll, lambda_hat, target, -1.0);
    let ci_high = ci_end(&ll, lambda_hat, target, 1.0);
    Ok(LambdaEstimate { lambda_hat, ci_low, ci_high, loglik })
}

/// Walks outward from the maximum in steps of 0.05 until the profile drops
/// below `target`, then bisects.
fn ci_end(ll: &impl Fn(f64) -> f64, from: f64, target: f64, dir: f64) -> f64 {
    let mut inside = from;
    let mut outside = from;
    let mut found = false;
    for i in 1..=200 {
        let l = from + dir * i as f64 * GRID_STEP;
        if ll(l) < target {
            outside = l;
            found = true;
            break;
        }
        inside = l;
    }
    if !found {
        return inside;
    }
    for _ in 0..60 {
        let mid = 0.5 * (inside + outside);
        if ll(mid) >= target {
            inside = mid;
        } else {
            outside = mid;
        }
    }
    0.5 * (inside + outside)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    PointwiseMle,
    ClusterMle,
    ClusterKl,
}

/// Per-site transformation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub lambda_per_site: Vec<f64>,
    pub provenance: Provenance,
    /// Cluster label of each site for cluster-wise specs.
    pub cluster_of_site: Option<Vec<usize>>,
}

impl TransformSpec {
    /// Identity transformation on `n` sites.
    pub fn identity(n: usize) -> Self {
        Self { lambda_per_site: alloc::vec![1.0; n], provenance: Provenance::PointwiseMle, cluster_of_site: None }
    }

    /// Expands per-cluster parameters to sites.
    pub fn from_clusters(labels: &[usize], lambda_per_cluster: &[f64], provenance: Provenance) -> Self {
        Self {
            lambda_per_site: labels.iter().map(|&c| lambda_per_cluster[c]).collect(),
            provenance,
            cluster_of_site: Some(labels.to_vec()),
        }
    }

    pub fn n_sites(&self) -> usize {
        self.lambda_per_site.len()
    }

    /// Checks the cluster-constancy invariant.
    pub fn validate(&self) -> Result<()> {
        if let Some(&l) = self.lambda_per_site.iter().find(|l| !l.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite lambda {l}")));
        }
        if let Some(labels) = &self.cluster_of_site {
            if labels.len() != self.n_sites() {
                return Err(Error::Shape("cluster labels do not match lambda count".into()));
            }
            for i in 0..labels.len() {
                for j in 0..i {
                    if labels[i] == labels[j] && self.lambda_per_site[i] != self.lambda_per_site[j] {
                        return Err(Error::InvalidInput(format!("lambda differs within cluster {}", labels[i])));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Applies the per-site forward transform to a site-major value block of
/// `n_days` columns.
pub fn forward_site_major(values: &[f64], lambdas: &[f64], n_days: usize) -> Vec<f64> {
    values.iter().enumerate().map(|(k, &x)| yeo_johnson(x, lambdas[k / n_days])).collect()
}

/// Skewness of a sample before and after transformation with its own MLE.
pub fn skewness_reduction(sample: &[f64]) -> Result<(f64, f64, LambdaEstimate)> {
    let est = fit_lambda_mle(sample)?;
    let before = stats::moments(sample)?.0;
    let t: Vec<f64> = sample.iter().map(|&x| yeo_johnson(x, est.lambda_hat)).collect();
    let after = stats::moments(&t)?.0;
    Ok((before, after, est))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normals, stream};
    use approx::assert_abs_diff_eq;
    use core::f64::consts::E;
    use proptest::prelude::*;

    #[test]
    fn branch_examples() {
        assert_eq!(yeo_johnson(0.0, 0.37), 0.0);
        assert_eq!(yeo_johnson(3.0, 1.0), 3.0);
        assert_abs_diff_eq!(yeo_johnson(E - 1.0, 0.0), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(yeo_johnson(-(E - 1.0), 2.0), -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(yeo_johnson_inverse(1.0, 0.0).unwrap(), E - 1.0, epsilon = 1e-15);
    }

    #[test]
    fn lambda_two_negative_branch_is_unbounded() {
        let x = yeo_johnson_inverse(-10.0, 2.0).unwrap();
        assert_abs_diff_eq!(x, 1.0 - 10f64.exp(), epsilon = 1e-9);
    }

    #[test]
    fn out_of_range_inverse_names_bound() {
        let err = yeo_johnson_inverse(0.6, -2.0).unwrap_err();
        assert_eq!(err, Error::TransformRange { value: 0.6, lambda: -2.0, bound: 0.5 });
        let err = yeo_johnson_inverse(-1.0, 3.0).unwrap_err();
        assert_eq!(err, Error::TransformRange { value: -1.0, lambda: 3.0, bound: -1.0 });
        assert!(yeo_johnson_inverse(-0.99, 3.0).is_ok());
    }

    #[test]
    fn round_trip_on_normals() {
        let z = standard_normals(&mut stream(11, 0, 0), 1000);
        for &x in &z {
            let back = yeo_johnson_inverse(yeo_johnson(x, 0.5), 0.5).unwrap();
            assert!((back - x).abs() < 1e-10);
        }
    }

    #[test]
    fn continuity_in_lambda() {
        for &x in &[0.3, 2.0, 17.0] {
            assert!((yeo_johnson(x, 1e-9) - yeo_johnson(x, 0.0)).abs() < 1e-7);
        }
        for &x in &[-0.3, -2.0, -17.0] {
            assert!((yeo_johnson(x, 2.0 - 1e-9) - yeo_johnson(x, 2.0)).abs() < 1e-7);
        }
    }

    #[test]
    fn mle_on_normal_data_is_one() {
        let z = standard_normals(&mut stream(12, 0, 0), 50_000);
        let est = fit_lambda_mle(&z).unwrap();
        assert!((est.lambda_hat - 1.0).abs() < 0.05, "{est:?}");
        assert!(est.ci_low < est.lambda_hat && est.lambda_hat < est.ci_high);
    }

    #[test]
    fn constant_or_short_sample_rejected() {
        assert!(fit_lambda_mle(&[2.0; 40]).is_err());
        assert!(fit_lambda_mle(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn mle_oracle_grid_agrees() {
        let z = standard_normals(&mut stream(13, 0, 0), 2000);
        let x: Vec<f64> = z.iter().map(|&v| yeo_johnson_inverse(v, 0.3).unwrap()).collect();
        let est = fit_lambda_mle(&x).unwrap();
        // fine brute-force scan
        let (mut bl, mut bv) = (0.0, f64::NEG_INFINITY);
        for i in 0..=6000 {
            let l = -2.0 + i as f64 * 0.001;
            let v = profile_loglik(&x, l);
            if v > bv {
                bl = l;
                bv = v;
            }
        }
        assert!((est.lambda_hat - bl).abs() < 2e-3);
        assert!(est.loglik >= bv - 1e-9);
    }

    proptest! {
        #[test]
        fn strictly_increasing(lambda in -2.0f64..4.0, a in -50.0f64..50.0, d in 1e-3f64..5.0) {
            prop_assert!(yeo_johnson(a + d, lambda) > yeo_johnson(a, lambda));
        }

        #[test]
        fn inverse_round_trip(lambda in -2.0f64..4.0, x in -20.0f64..20.0) {
            let y = yeo_johnson(x, lambda);
            let back = yeo_johnson_inverse(y, lambda).unwrap();
            prop_assert!((back - x).abs() <= 1e-10 * (1.0 + x.abs()));
        }
    }
}
