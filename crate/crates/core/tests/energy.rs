use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use windadj_core::covariance::{Distance, MaternParams};
use windadj_core::energy::{
    extrapolate, extrapolate_draw, fit_shear_site, krige_downscale, revenue_delta, FarmSite, KrigingWeights, PowerCurve,
    ProfilePoint, ShearFit, SiteShear,
};
use windadj_core::rng::stream;
use windadj_core::simgen::replicate_calendar;
use windadj_core::{Site, SpatioTemporalField};

const HEIGHTS: [f64; 6] = [10.0, 28.0, 46.0, 64.0, 82.0, 100.0];

fn profiles(alpha: f64, sigma: f64, days: usize, seed: u64) -> Vec<ProfilePoint> {
    let mut rng = stream(seed, 0, 0);
    let mut pts = Vec::new();
    for day in 0..days {
        let w_ref = 4.0 + (day % 7) as f64;
        for &h in &HEIGHTS {
            let noise: f64 = if h == 10.0 { 0.0 } else { sigma * rng.sample::<f64, _>(StandardNormal) };
            pts.push(ProfilePoint { day, height: h, speed: w_ref * (h / 10.0).powf(alpha) * noise.exp() });
        }
    }
    pts
}

#[test]
fn shear_interval_coverage() {
    let alpha = 1.0 / 7.0;
    let covered = (0..1000u64)
        .filter(|&k| {
            let s = fit_shear_site(0, &profiles(alpha, 0.1, 30, k), 10.0).unwrap();
            (s.alpha - alpha).abs() <= 3.0 * s.alpha_se
        })
        .count();
    assert!(covered >= 950, "coverage {covered}/1000");
}

fn one_site(values: Vec<f64>) -> SpatioTemporalField {
    let t = values.len();
    SpatioTemporalField::new(vec![Site::new(0, 0.0, 0.0)], replicate_calendar(t), values).unwrap()
}

fn shear(alpha: f64, se: f64, sigma2: f64) -> ShearFit {
    let mut s = ShearFit::constant([0u32], alpha);
    s.sites[0] = SiteShear { alpha_se: se, sigma2, ..s.sites[0] };
    s
}

#[test]
fn zero_shear_is_identity() {
    let surface = one_site(vec![3.0, 5.5, 7.25]);
    let out = extrapolate(&surface, &ShearFit::constant([0u32], 0.0), 100.0, 3, 1).unwrap();
    assert!(out.iter().all(|f| f.values() == surface.values()));
}

#[test]
fn ensemble_mean_multiplier_matches_lognormal_moments() {
    let (alpha, se, sigma2) = (1.0 / 7.0, 0.05, 0.04);
    let surface = one_site(vec![1.0; 50]);
    let fit = shear(alpha, se, sigma2);
    let draws = 20_000u64;
    let total: f64 = (0..draws)
        .map(|d| extrapolate_draw(&surface, &fit, &[100.0], 5, d).unwrap().values().iter().sum::<f64>())
        .sum();
    let mc = total / (draws as f64 * 50.0);
    let l = 10f64.ln();
    let analytic = (sigma2 / 2.0).exp() * 10f64.powf(alpha) * (se * se * l * l / 2.0).exp();
    assert!((mc / analytic - 1.0).abs() < 0.01, "{mc} vs {analytic}");
}

fn line(xs: &[f64]) -> Vec<Site> {
    xs.iter().enumerate().map(|(i, &x)| Site::new(i as u32, x, 0.0)).collect()
}

fn exponential() -> MaternParams {
    MaternParams { sigma2: 1.0, rho: 1.0, nu: 0.5, nugget: 0.0 }
}

#[test]
fn kriging_matches_direct_solve() {
    let xs = [0.0, 1.0, 3.0];
    let coarse = line(&xs);
    let target = 1.5;
    let mut a = DMatrix::zeros(4, 4);
    let mut b = DVector::zeros(4);
    for i in 0..3 {
        for j in 0..3 {
            a[(i, j)] = (-(xs[i] - xs[j]).abs()).exp();
        }
        a[(i, 3)] = 1.0;
        a[(3, i)] = 1.0;
        b[i] = (-(xs[i] - target).abs()).exp();
    }
    b[3] = 1.0;
    let sol = a.lu().solve(&b).unwrap();
    let w = KrigingWeights::new(&coarse, &line(&[target]), &exponential(), Distance::Planar).unwrap();
    for j in 0..3 {
        assert!((w.weights[(0, j)] - sol[j]).abs() < 1e-12);
    }
    let values = [2.0, 4.0, 7.0];
    let pred = krige_downscale(&values, &coarse, &line(&[target]), &exponential(), Distance::Planar).unwrap();
    let expected: f64 = (0..3).map(|j| sol[j] * values[j]).sum();
    assert!((pred[0] - expected).abs() < 1e-12);
}

#[test]
fn kriging_unbiased_and_exact() {
    let coarse: Vec<Site> = [(0.0, 0.0), (1.0, 0.2), (0.3, 1.1), (1.4, 1.3), (0.7, 0.6)]
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| Site::new(i as u32, x, y))
        .collect();
    let fine: Vec<Site> = vec![Site::new(0, 0.5, 0.5), Site::new(1, 1.0, 0.2), Site::new(2, 2.0, -1.0)];
    let p = MaternParams { sigma2: 2.0, rho: 0.8, nu: 1.5, nugget: 0.1 };
    let w = KrigingWeights::new(&coarse, &fine, &p, Distance::Planar).unwrap();
    for f in 0..fine.len() {
        let sum: f64 = (0..coarse.len()).map(|j| w.weights[(f, j)]).sum();
        assert!((sum - 1.0).abs() < 1e-10);
    }
    assert!(w.apply(&[4.2; 5]).iter().all(|v| (v - 4.2).abs() < 1e-10));
    let values = [1.0, 3.0, 2.0, 5.0, 4.0];
    assert!((w.apply(&values)[1] - 3.0).abs() < 1e-10);
    assert!(w.variances[1].abs() < 1e-10);
    assert!(w.variances[2] > 0.0);
}

fn curve() -> PowerCurve {
    PowerCurve {
        turbine: "t".into(),
        hub_height: 100.0,
        rotor_diameter: 100.0,
        rated_power: 3000.0,
        cut_in: 3.0,
        rated_speed: 12.0,
        cut_out: 25.0,
        table: Vec::new(),
    }
}

fn farm(count: u32, tariff: f64) -> Vec<FarmSite> {
    vec![FarmSite { site_id: 0, turbine: "t".into(), count, tariff }]
}

#[test]
fn revenue_delta_zero_for_identical_and_linear_in_tariff_and_count() {
    let hist: Vec<_> = (0..4).map(|k| one_site(vec![5.0 + k as f64, 7.0, 9.5])).collect();
    let fut: Vec<_> = hist.iter().map(|f| f.map_values(|_, _, v| v * 1.1).unwrap()).collect();
    let same = revenue_delta(&hist, &hist, &farm(3, 0.05), &[curve()]).unwrap();
    assert_eq!(same.total_mean, 0.0);
    assert_eq!(same.sites[0].sd, 0.0);
    let base = revenue_delta(&hist, &fut, &farm(3, 0.05), &[curve()]).unwrap();
    assert!(base.total_mean > 0.0);
    let tariff = revenue_delta(&hist, &fut, &farm(3, 0.10), &[curve()]).unwrap();
    let count = revenue_delta(&hist, &fut, &farm(6, 0.05), &[curve()]).unwrap();
    for d in [&tariff, &count] {
        assert!((d.total_mean - 2.0 * base.total_mean).abs() < 1e-9 * base.total_mean);
        assert!((d.total_sd - 2.0 * base.total_sd).abs() < 1e-9 * base.total_sd.max(1.0));
    }
}
