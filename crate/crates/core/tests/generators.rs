use windadj_core::adjustment::Method;
use windadj_core::rng::stream;
use windadj_core::simgen::{run_validation, simulate_skewt, GlgConfig, GlgGenerator, Layout, SkewTConfig, ValidationConfig};
use windadj_core::stats;
use windadj_core::transform::{fit_lambda_mle, yeo_johnson};

/// Raw moments of `lambda |U| + eta` (U, eta standard normal) times
/// `E[Z^{-k/2}]` for `Z ~ Gamma(4, rate 4)`, i.e. nu = 8.
fn skewt_skewness_nu8(lambda: f64) -> f64 {
    let pi = std::f64::consts::PI;
    let c = (2.0 / pi).sqrt();
    let x1 = lambda * c;
    let x2 = lambda * lambda + 1.0;
    let x3 = 2.0 * c * lambda.powi(3) + 3.0 * lambda * c;
    // Gamma(3.5) = 15 sqrt(pi) / 8, Gamma(2.5) = 3 sqrt(pi) / 4, Gamma(4) = 6.
    let z1 = 15.0 * pi.sqrt() / 8.0 / 6.0 * 2.0;
    let z2 = 2.0 / 6.0 * 4.0;
    let z3 = 3.0 * pi.sqrt() / 4.0 / 6.0 * 8.0;
    let (m1, m2, m3) = (x1 * z1, x2 * z2, x3 * z3);
    (m3 - 3.0 * m1 * m2 + 2.0 * m1.powi(3)) / (m2 - m1 * m1).powf(1.5)
}

#[test]
fn skewt_skewness_matches_moment_formula() {
    let layout = Layout::blocks(1, 1, 1);
    let f = simulate_skewt(SkewTConfig::default(), &layout, 100_000, &mut stream(11, 0, 0)).unwrap();
    let (skew, _) = stats::moments(f.series(0)).unwrap();
    let truth = skewt_skewness_nu8(0.8);
    assert!(truth > 0.0);
    assert!(skew > 0.0);
    assert!((skew - truth).abs() < 0.1 * truth, "sample {skew} vs analytic {truth}");
}

#[test]
fn within_region_neighbours_follow_exponential_correlation() {
    let cfg = SkewTConfig { lambda: 0.0, gaussian_limit: true, ..SkewTConfig::default() };
    let f = simulate_skewt(cfg, &Layout::study(), 20_000, &mut stream(12, 0, 0)).unwrap();
    let (a, b) = (f.series(0), f.series(1));
    let (ma, mb) = (stats::mean(a), stats::mean(b));
    let sxy: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let sxx: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let syy: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    let r = sxy / (sxx * syy).sqrt();
    assert!((r - (-0.25f64).exp()).abs() < 0.015, "correlation {r}");
}

#[test]
fn glg_mixing_field_is_lognormal_with_unit_mean() {
    let sites = Layout::blocks(1, 1, 1).sites;
    let g = GlgGenerator::new(GlgConfig::default(), &sites).unwrap();
    let (w, xi) = g.sample_with_xi(&mut stream(13, 0, 0), 100_000);
    let logs: Vec<f64> = xi.iter().map(|x| x.ln()).collect();
    assert!((stats::mean(&logs) + 4.0).abs() < 0.05);
    assert!((stats::variance(&logs) - 8.0).abs() < 0.3);
    // median of a lognormal is exp(mean of the log)
    assert!((stats::median(&xi) / (-4.0f64).exp() - 1.0).abs() < 0.05);
    let (_, kurt) = stats::moments(&w).unwrap();
    assert!(kurt > 1.0, "excess kurtosis {kurt}");
}

#[test]
fn skewt_sample_not_gaussianized_by_marginal_transform() {
    let layout = Layout::blocks(1, 1, 1);
    let f = simulate_skewt(SkewTConfig::default(), &layout, 100_000, &mut stream(14, 0, 0)).unwrap();
    let x = f.series(0);
    let lam = fit_lambda_mle(x).unwrap().lambda_hat;
    let y: Vec<f64> = x.iter().map(|&v| yeo_johnson(v, lam)).collect();
    let (s, k) = stats::moments(&y).unwrap();
    let jarque_bera = y.len() as f64 / 6.0 * (s * s + k * k / 4.0);
    assert!(jarque_bera > 5.99, "statistic {jarque_bera}");
}

#[test]
fn mv_only_study_has_unit_ratios() {
    let cfg = ValidationConfig {
        regions_x: 2,
        regions_y: 1,
        per_side: 3,
        n_sims: 2,
        n_replicates: 60,
        n_historical: 30,
        methods: vec![Method::MV],
        ..ValidationConfig::default()
    };
    let t = run_validation(cfg).unwrap();
    assert!(t.failures.is_empty());
    assert_eq!(t.rows.len(), 2);
    assert!(t.rows.iter().all(|r| r.kl_ratio_vs_mv == 1.0));
}

#[test]
fn shorter_and_longer_ranges_run_cleanly() {
    for scale in [0.5, 2.0] {
        let base = ValidationConfig::default();
        let skewt = SkewTConfig {
            range_within: base.skewt.range_within * scale,
            range_between: base.skewt.range_between * scale,
            ..base.skewt
        };
        let glg = GlgConfig { range_eta: base.glg.range_eta * scale, range_xi: base.glg.range_xi * scale, ..base.glg };
        let cfg = ValidationConfig {
            skewt,
            glg,
            regions_x: 2,
            regions_y: 2,
            per_side: 4,
            n_sims: 2,
            methods: vec![Method::MV, Method::T1, Method::TC],
            ..base
        };
        let t = run_validation(cfg).unwrap();
        assert!(t.failures.is_empty(), "{:?}", t.failures);
        assert_eq!(t.rows.len(), 6);
        assert!(t.rows.iter().all(|r| r.kl.is_finite()));
    }
}
