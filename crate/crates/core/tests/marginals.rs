use rand_distr::{Distribution, LogNormal};
use windadj_core::climatology::{detrend, fit_ar, fit_mean, reconstruct, YearTerm};
use windadj_core::rng::{standard_normals, stream};
use windadj_core::stats::{autocorrelation, mean, moments};
use windadj_core::transform::skewness_reduction;
use windadj_core::{Calendar, Site, SpatioTemporalField};

fn start() -> chrono::NaiveDate {
    chrono::NaiveDate::from_ymd_opt(1990, 1, 1).unwrap()
}

fn ar1(phi: f64, n: usize, seed: u64) -> Vec<f64> {
    let z = standard_normals(&mut stream(seed, 0, 0), n + 200);
    let mut x = vec![0.0; z.len()];
    for t in 1..z.len() {
        x[t] = phi * x[t - 1] + z[t];
    }
    x.split_off(200)
}

#[test]
fn filtered_ar1_is_white() {
    let t = 10_000;
    let sites = vec![Site::new(0, 0.0, 0.0), Site::new(1, 1.0, 0.0)];
    let series = vec![ar1(0.6, t, 31), ar1(0.3, t, 32)];
    let f = SpatioTemporalField::from_series(sites, Calendar::new(start(), t), &series).unwrap();
    let mean_fit = fit_mean(&f, 2, false).unwrap();
    let ar = fit_ar(&mean_fit.residuals(&f, YearTerm::Frozen).unwrap(), 1).unwrap();
    let innov = detrend(&f, &mean_fit, &ar, YearTerm::Frozen).unwrap();
    for i in 0..2 {
        assert!(autocorrelation(&innov.series(i)[1..], 1).abs() < 3.0 / (t as f64).sqrt());
    }
}

#[test]
fn zero_innovations_reconstruct_to_mean() {
    let t = 3 * 365;
    let sites = vec![Site::new(0, 0.0, 0.0), Site::new(1, 1.0, 0.0)];
    let series = vec![ar1(0.5, t, 33).iter().map(|v| v + 6.0).collect(), ar1(0.2, t, 34).iter().map(|v| v + 4.0).collect()];
    let f = SpatioTemporalField::from_series(sites, Calendar::new(start(), t), &series).unwrap();
    let mean_fit = fit_mean(&f, 2, true).unwrap();
    let ar = fit_ar(&mean_fit.residuals(&f, YearTerm::Frozen).unwrap(), 1).unwrap();
    let zero = f.with_values(vec![0.0; 2 * t]).unwrap();
    let rebuilt = reconstruct(&zero, &mean_fit, &ar, YearTerm::Frozen).unwrap();
    let mu = mean_fit.evaluate(f.calendar(), YearTerm::Frozen);
    for (a, b) in rebuilt.values().iter().zip(&mu) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn normal_moments_within_clt_bounds() {
    let x = standard_normals(&mut stream(35, 0, 0), 100_000);
    let (s, k) = moments(&x).unwrap();
    assert!(s.abs() < 0.03 && k.abs() < 0.06, "skewness {s}, kurtosis {k}");
}

#[test]
fn lognormal_skewness_near_analytic_value() {
    let d = LogNormal::new(0.0, 1.0).unwrap();
    let mut rng = stream(36, 0, 0);
    let x: Vec<f64> = (0..100_000).map(|_| d.sample(&mut rng)).collect();
    let e = std::f64::consts::E;
    let truth = (e + 2.0) * (e - 1.0).sqrt();
    let (s, _) = moments(&x).unwrap();
    assert!((s - truth).abs() < 0.5, "skewness {s} vs {truth}");
}

#[test]
fn fitted_transform_halves_lognormal_skewness() {
    let d = LogNormal::new(0.0, 0.5).unwrap();
    let mut rng = stream(37, 0, 0);
    let raw: Vec<f64> = (0..20_000).map(|_| d.sample(&mut rng)).collect();
    let m = mean(&raw);
    let x: Vec<f64> = raw.iter().map(|v| v - m).collect();
    let (before, after, _) = skewness_reduction(&x).unwrap();
    assert!(after.abs() <= 0.5 * before.abs(), "{before} -> {after}");
}
