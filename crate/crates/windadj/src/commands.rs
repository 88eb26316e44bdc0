//! The five subcommands. Each takes the resolved configuration and writes
//! its artifacts; none of them records wall-clock time in an artifact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use windadj_core::adjustment::{lambda_or_grid_best, AdjustmentPlan, CovChoice, Historical, Method, Mode, ResidualModel};
use windadj_core::climatology::{ClimatologyFit, SiteAr, SiteMean};
use windadj_core::clustering::ClusterAssignment;
use windadj_core::covariance::CovarianceModel;
use windadj_core::divergence::{default_k, CloudLabel, KlEstimate, SampleCloud};
use windadj_core::energy::{fit_shear, ShearFit, DEFAULT_ALPHA};
use windadj_core::simgen::Study;
use windadj_core::transform::{fit_lambda_mle, yeo_johnson, LambdaEstimate};
use windadj_core::{stats, SpatioTemporalField};

use crate::config::{AdjustSection, EnergySection, FitSection, KlSection, ModelSettings, RunConfig, ValidateSection};
use crate::error::{CliError, CliResult, Context};
use crate::io::{load_field_auto, save_field_auto, write_json, write_text, Values};
use crate::{formats, log, parallel};

/// Seed, thread cap and mode after applying command-line overrides.
#[derive(Debug, Clone, Copy)]
pub struct Runtime {
    pub seed: u64,
    pub threads: Option<usize>,
    pub mode: Option<Mode>,
}

impl Runtime {
    pub fn from_config(cfg: &RunConfig, seed: Option<u64>, threads: Option<usize>, mode: Option<Mode>) -> CliResult<Self> {
        let threads = threads.or(cfg.threads);
        if threads == Some(0) {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        Ok(Self { seed: seed.unwrap_or(cfg.seed), threads, mode: mode.or(cfg.mode) })
    }
}

fn with_extension(p: &Path, ext: &str) -> PathBuf {
    p.with_extension(ext)
}

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::AsWritten => "as-written",
        Mode::Anomaly => "anomaly",
    }
}

// ---------------------------------------------------------------- fit

#[derive(Debug, Serialize)]
struct SiteFit {
    mean: SiteMean,
    ar: SiteAr,
    /// Maximum-likelihood estimate; absent when it sits on a search bound
    /// or the residuals are degenerate.
    lambda_mle: Option<LambdaEstimate>,
    lambda_used: f64,
    skewness_before: Option<f64>,
    kurtosis_before: Option<f64>,
    skewness_after: Option<f64>,
    kurtosis_after: Option<f64>,
}

#[derive(Debug, Serialize)]
struct FieldFit {
    n_sites: usize,
    n_days: usize,
    start: String,
    end: String,
    k_harmonics: usize,
    with_trend: bool,
    ref_year: i32,
    last_year: i32,
    ar_order: usize,
    covariance: Option<CovarianceModel>,
    covariance_skipped: Option<String>,
    sites: BTreeMap<u32, SiteFit>,
}

#[derive(Debug, Serialize)]
struct FitBundle {
    schema_version: u32,
    seed: u64,
    mode: &'static str,
    model: ModelSettings,
    fields: BTreeMap<&'static str, FieldFit>,
    clusters: ClusterAssignment,
}

fn fit_field(field: &SpatioTemporalField, mean: &ClimatologyFit, s: &FitSection, name: &str) -> CliResult<FieldFit> {
    use rayon::prelude::*;
    let m = &s.model;
    let e = mean.residuals(field, m.year_term).context(|| format!("{name} residuals"))?;
    let marginal = ResidualModel::fit(&e, m.ar_order, None).context(|| format!("{name} AR fit"))?;
    let degenerate = marginal.ar.sites.iter().position(|a| !(a.innovation_sd > 0.0));
    let (covariance, covariance_skipped) = match (s.covariance, degenerate) {
        (None, _) => (None, None),
        (Some(_), Some(i)) => (None, Some(format!("site {} has zero residual variance", field.sites()[i].id))),
        (Some(c), None) => {
            let r = ResidualModel::fit(&e, m.ar_order, Some((c, m.metric))).context(|| format!("{name} covariance fit"))?;
            (r.corr.map(|c| c.model), None)
        }
    };
    let per_site: Vec<SiteFit> = (0..field.n_sites())
        .into_par_iter()
        .map(|i| {
            let x = e.series(i);
            let lambda_mle = fit_lambda_mle(x).ok();
            let lambda_used = lambda_mle.map_or_else(|| lambda_or_grid_best(x), |l| l.lambda_hat);
            let before = stats::moments(x).ok();
            let t: Vec<f64> = x.iter().map(|&v| yeo_johnson(v, lambda_used)).collect();
            let after = stats::moments(&t).ok();
            SiteFit {
                mean: mean.sites[i].clone(),
                ar: marginal.ar.sites[i].clone(),
                lambda_mle,
                lambda_used,
                skewness_before: before.map(|b| b.0),
                kurtosis_before: before.map(|b| b.1),
                skewness_after: after.map(|a| a.0),
                kurtosis_after: after.map(|a| a.1),
            }
        })
        .collect();
    let cal = field.calendar();
    Ok(FieldFit {
        n_sites: field.n_sites(),
        n_days: field.n_days(),
        start: cal.start().to_string(),
        end: cal.end().to_string(),
        k_harmonics: mean.k,
        with_trend: mean.with_trend,
        ref_year: mean.ref_year,
        last_year: mean.last_year,
        ar_order: m.ar_order,
        covariance,
        covariance_skipped,
        sites: field.sites().iter().map(|s| s.id).zip(per_site).collect(),
    })
}

fn five_numbers(x: &[f64]) -> String {
    if x.is_empty() {
        return "n/a".into();
    }
    let q = |p| stats::quantile(x, p);
    format!("{:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}", q(0.0), q(0.25), q(0.5), q(0.75), q(1.0))
}

fn summary_text(b: &FitBundle) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "windadj fit summary");
    let _ = writeln!(out, "seed: {}", b.seed);
    let _ = writeln!(out, "mode: {}", b.mode);
    for (name, f) in &b.fields {
        let sites: Vec<&SiteFit> = f.sites.values().collect();
        let _ = writeln!(out, "\n[{name}] {} sites, {} days ({} to {})", f.n_sites, f.n_days, f.start, f.end);
        let amps: Vec<f64> = sites.iter().flat_map(|s| s.mean.harmonic_amplitudes()).collect();
        let max_amp = amps.iter().copied().fold(0.0, f64::max);
        let _ = writeln!(out, "harmonics: K = {}, largest amplitude {:.6} m/s", f.k_harmonics, max_amp);
        if f.with_trend {
            let z: Vec<f64> = sites.iter().map(|s| s.mean.omega / s.mean.omega_se).collect();
            let up = z.iter().filter(|&&z| z > 1.96).count();
            let down = z.iter().filter(|&&z| z < -1.96).count();
            let _ = writeln!(
                out,
                "trend: significant at 5% at {} of {} sites ({up} increasing, {down} decreasing)",
                up + down,
                f.n_sites
            );
        } else {
            let _ = writeln!(out, "trend: not fitted");
        }
        if f.ar_order > 0 {
            let phi1: Vec<f64> = sites.iter().map(|s| s.ar.phi[0]).collect();
            let _ = writeln!(out, "AR({}): median phi_1 {:.4}", f.ar_order, stats::median(&phi1));
        }
        let lam: Vec<f64> = sites.iter().map(|s| s.lambda_used).collect();
        let at_bound = sites.iter().filter(|s| s.lambda_mle.is_none()).count();
        let _ = writeln!(out, "transformation: median lambda {:.4} ({at_bound} sites without an interior MLE)", stats::median(&lam));
        let _ = writeln!(out, "{:<22} {:>9} {:>9} {:>9} {:>9} {:>9}", "statistic", "min", "q25", "median", "q75", "max");
        let col = |g: fn(&SiteFit) -> Option<f64>| -> Vec<f64> { sites.iter().filter_map(|s| g(s)).collect() };
        let rows: [(&str, fn(&SiteFit) -> Option<f64>); 4] = [
            ("skewness before", |s| s.skewness_before),
            ("skewness after", |s| s.skewness_after),
            ("kurtosis before", |s| s.kurtosis_before),
            ("kurtosis after", |s| s.kurtosis_after),
        ];
        for (label, g) in rows {
            let _ = writeln!(out, "{label:<22} {}", five_numbers(&col(g)));
        }
        let abs_med = |g: fn(&SiteFit) -> Option<f64>| {
            let v: Vec<f64> = col(g).iter().map(|x| x.abs()).collect();
            if v.is_empty() { f64::NAN } else { stats::median(&v) }
        };
        let _ = writeln!(
            out,
            "median |skewness|: {:.4} before, {:.4} after",
            abs_med(|s| s.skewness_before),
            abs_med(|s| s.skewness_after)
        );
        match (&f.covariance, &f.covariance_skipped) {
            (Some(CovarianceModel::Matern { params, .. }), _) => {
                let _ = writeln!(
                    out,
                    "covariance: Matern nu {} range {:.6} nugget fraction {:.6}",
                    params.nu, params.rho, params.nugget
                );
            }
            (Some(CovarianceModel::Nonstationary { params }), _) => {
                let _ = writeln!(out, "covariance: nonstationary with {} knots", params.n_knots());
            }
            (Some(CovarianceModel::Diagonal { .. }), _) => {
                let _ = writeln!(out, "covariance: diagonal");
            }
            (None, Some(why)) => {
                let _ = writeln!(out, "covariance: skipped ({why})");
            }
            (None, None) => {
                let _ = writeln!(out, "covariance: not requested");
            }
        }
    }
    let c = &b.clusters;
    let _ = writeln!(out, "\nclusters: {} (sizes {:?})", c.k_clusters, c.sizes());
    out
}

pub fn fit(cfg: &RunConfig, rt: Runtime) -> CliResult<()> {
    let s = cfg.section(&cfg.fit, "fit")?;
    let mode = rt.mode.unwrap_or_default();
    let obs = load_field_auto(&s.obs, Values::Speeds)?;
    let sim = s.sim.as_deref().map(|p| load_field_auto(p, Values::Speeds)).transpose()?;
    if let Some(sim) = &sim {
        if sim.sites() != obs.sites() {
            return Err(CliError::data(s.sim.as_ref().unwrap().display().to_string(), "site table differs from the observations"));
        }
    }
    let m = &s.model;
    log::info("fit.start", json!({"seed": rt.seed, "sites": obs.n_sites(), "days": obs.n_days()}));
    let mean_obs = parallel::fit_mean(&obs, m.k_harmonics, m.with_trend).context(|| "observation mean fit".into())?;
    let mut fields = BTreeMap::new();
    fields.insert("obs", fit_field(&obs, &mean_obs, s, "observation")?);
    let (sim_field, mean_sim) = match &sim {
        Some(f) => {
            let ms = parallel::fit_mean(f, m.k_harmonics, m.with_trend).context(|| "simulation mean fit".into())?;
            fields.insert("sim", fit_field(f, &ms, s, "simulation")?);
            (f.clone(), ms)
        }
        None => (obs.clone(), mean_obs.clone()),
    };
    let hist = Historical::with_means(obs.clone(), sim_field, mean_obs, mean_sim, m.plan(mode, rt.seed))
        .context(|| "historical residuals".into())?;
    let clusters = hist.clusters().context(|| "clustering".into())?;
    let bundle = FitBundle {
        schema_version: crate::config::SCHEMA_VERSION,
        seed: rt.seed,
        mode: mode_name(mode),
        model: m.clone(),
        fields,
        clusters,
    };
    let dir = &s.out_dir;
    write_json(&dir.join("fit.json"), &bundle)?;
    write_text(&dir.join("summary.txt"), &summary_text(&bundle))?;
    formats::save_clusters(&dir.join("clusters.csv"), obs.sites(), &bundle.clusters)?;
    write_json(&dir.join("clusters.json"), &json!({"seed": rt.seed, "clusters": bundle.clusters}))?;
    log::info("fit.done", json!({"out_dir": dir.display().to_string(), "clusters": bundle.clusters.k_clusters}));
    Ok(())
}

// ---------------------------------------------------------------- adjust

fn raw_cov(method: Method, transform_cov: CovChoice) -> Option<CovChoice> {
    match method {
        Method::M | Method::MV => None,
        Method::MC => Some(CovChoice::Matern),
        Method::MN => Some(CovChoice::Nonstationary),
        Method::T1 | Method::TC => Some(transform_cov),
    }
}

fn same_sites(a: &SpatioTemporalField, b: &SpatioTemporalField, b_path: &Path) -> CliResult<()> {
    if a.sites() != b.sites() {
        return Err(CliError::data(b_path.display().to_string(), "site table differs from the historical observations"));
    }
    Ok(())
}

/// Fits `method` on the historical pair. Shared by `adjust` and tests.
pub fn fit_adjustment(
    s: &AdjustSection,
    obs: SpatioTemporalField,
    sim: SpatioTemporalField,
    mode: Mode,
    seed: u64,
) -> CliResult<AdjustmentPlan> {
    let m = &s.model;
    let clusters = match (s.method, &s.clusters) {
        (Method::TC, None) => {
            return Err(CliError::Config(
                "method TC requires a cluster file (adjust.clusters, the clusters.csv written by `fit`)".into(),
            ))
        }
        (Method::TC, Some(p)) => {
            if !p.exists() {
                return Err(CliError::data(p.display().to_string(), "cluster file for method TC not found"));
            }
            Some(formats::load_clusters(p, obs.sites())?)
        }
        _ => None,
    };
    let mean_obs = parallel::fit_mean(&obs, m.k_harmonics, m.with_trend).context(|| "observation mean fit".into())?;
    let mean_sim = parallel::fit_mean(&sim, m.k_harmonics, m.with_trend).context(|| "simulation mean fit".into())?;
    let mut hist = Historical::with_means(obs, sim, mean_obs, mean_sim, m.plan(mode, seed))
        .context(|| "historical residuals".into())?;
    parallel::prefit_raw_models(&mut hist, raw_cov(s.method, m.transform_cov)).context(|| "residual models".into())?;
    hist.fit_plan(s.method, clusters.as_ref()).context(|| format!("fitting method {}", s.method.name()))
}

pub fn adjust(cfg: &RunConfig, rt: Runtime) -> CliResult<()> {
    let s = cfg.section(&cfg.adjust, "adjust")?;
    let mode = rt.mode.unwrap_or_default();
    let obs = load_field_auto(&s.obs_hist, Values::Speeds)?;
    let sim = load_field_auto(&s.sim_hist, Values::Speeds)?;
    let future = load_field_auto(&s.sim_future, Values::Speeds)?;
    same_sites(&obs, &sim, &s.sim_hist)?;
    same_sites(&obs, &future, &s.sim_future)?;
    let holdout = s.holdout_obs.as_deref().map(|p| load_field_auto(p, Values::Speeds)).transpose()?;
    if let (Some(h), Some(p)) = (&holdout, &s.holdout_obs) {
        same_sites(&obs, h, p)?;
    }
    log::info("adjust.start", json!({"seed": rt.seed, "method": s.method.name(), "mode": mode_name(mode)}));
    let plan = fit_adjustment(s, obs, sim, mode, rt.seed)?;
    let adjusted = plan.adjust(&future).context(|| "adjusting the future simulation".into())?;
    if adjusted.clamped > 0 {
        log::warn("adjust.clamped", json!({"values": adjusted.clamped}));
    }
    save_field_auto(&s.output, &adjusted.field)?;
    let kl = match &holdout {
        Some(h) => Some(kl_fields(&adjusted.field, h, None)?),
        None => None,
    };
    let transform = plan.transform.as_ref().map(|t| {
        let ids = plan.sites.iter().map(|s| s.id);
        let per_site: BTreeMap<u32, (f64, f64)> =
            ids.zip(t.obs.lambda_per_site.iter().copied().zip(t.sim.lambda_per_site.iter().copied())).collect();
        json!({
            "provenance": t.obs.provenance,
            "lambda_obs_sim_by_site": per_site,
        })
    });
    let report = json!({
        "schema_version": crate::config::SCHEMA_VERSION,
        "seed": rt.seed,
        "method": s.method.name(),
        "mode": mode_name(mode),
        "model": s.model,
        "n_sites": adjusted.field.n_sites(),
        "future_start": future.calendar().start().to_string(),
        "future_days": future.n_days(),
        "clamped": adjusted.clamped,
        "transform": transform,
        "search": plan.search,
        "kl_holdout": kl,
    });
    write_json(&s.report, &report)?;
    log::info("adjust.done", json!({"output": s.output.display().to_string(), "kl_holdout": kl.map(|k| k.value)}));
    Ok(())
}

// ---------------------------------------------------------------- validate

pub fn validate(cfg: &RunConfig, rt: Runtime) -> CliResult<()> {
    let s: &ValidateSection = cfg.section(&cfg.validate, "validate")?;
    let mode = rt.mode.unwrap_or(Mode::Anomaly);
    let study = Study::new(s.study_config(mode, rt.seed)).map_err(|e| CliError::Config(e.to_string()))?;
    log::info(
        "validate.start",
        json!({"seed": rt.seed, "sites": study.layout.n_sites(), "n_sims": s.n_sims, "mode": mode_name(mode)}),
    );
    let table = parallel::validation(&study, |id| log::info("validate.sim", json!({"sim_id": id})));
    for (id, e) in &table.failures {
        log::warn("validate.failed", json!({"sim_id": id, "error": e}));
    }
    formats::save_validation(&s.output, &table)?;
    let medians: BTreeMap<&str, Option<f64>> = s.methods.iter().map(|&m| (m.name(), table.median_ratio(m))).collect();
    let tc_le_t1 = table
        .ratios(Method::TC)
        .iter()
        .zip(table.ratios(Method::T1))
        .filter(|(tc, t1)| **tc <= *t1)
        .count();
    let summary = json!({
        "seed": rt.seed,
        "mode": mode_name(mode),
        "n_sims": s.n_sims,
        "n_sites": study.layout.n_sites(),
        "n_replicates": s.n_replicates,
        "n_historical": s.n_historical,
        "median_ratio_vs_mv": medians,
        "tc_le_t1": tc_le_t1,
        "failures": table.failures,
    });
    let path = s.summary.clone().unwrap_or_else(|| with_extension(&s.output, "json"));
    write_json(&path, &summary)?;
    log::info("validate.done", json!({"rows": table.rows.len(), "failures": table.failures.len()}));
    if table.rows.is_empty() {
        return Err(CliError::Core {
            context: "validation".into(),
            source: windadj_core::Error::NonConvergence("every simulation failed".into()),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------- kl

/// Divergence of `estimate` from `truth` with one point per day.
pub fn kl_fields(estimate: &SpatioTemporalField, truth: &SpatioTemporalField, k: Option<usize>) -> CliResult<KlEstimate> {
    let a = SampleCloud::from_field(estimate, CloudLabel::Simulation);
    let b = SampleCloud::from_field(truth, CloudLabel::Observation);
    let k = k.unwrap_or_else(|| default_k(a.len()));
    parallel::knn_kl(&a, &b, k).context(|| "k-nearest-neighbour divergence".into())
}

pub fn kl(cfg: &RunConfig, rt: Runtime) -> CliResult<()> {
    let s: &KlSection = cfg.section(&cfg.kl, "kl")?;
    let a = load_field_auto(&s.estimate, Values::Any)?;
    let b = load_field_auto(&s.truth, Values::Any)?;
    if a.n_sites() != b.n_sites() {
        return Err(CliError::data(
            s.truth.display().to_string(),
            format!("{} sites, the estimate has {}", b.n_sites(), a.n_sites()),
        ));
    }
    let est = kl_fields(&a, &b, s.k)?;
    let out = json!({
        "value": est.value,
        "k": est.k_used,
        "m": est.m,
        "m_prime": est.m_prime,
        "floored_pairs": est.floored_pairs,
        "seed": rt.seed,
    });
    write_json(&s.output, &out)?;
    log::info("kl.done", json!({"value": est.value, "k": est.k_used}));
    Ok(())
}

// ---------------------------------------------------------------- energy

fn shear_for(s: &EnergySection, field: &SpatioTemporalField) -> CliResult<ShearFit> {
    let sh = &s.shear;
    let mut fit = match (sh.alpha, &sh.profiles) {
        (Some(a), None) => ShearFit::constant(field.sites().iter().map(|s| s.id), a),
        (None, Some(p)) => fit_shear(&formats::load_profiles(p)?, sh.reference_height).context(|| p.display().to_string())?,
        _ => return Err(CliError::Config("energy.shear needs exactly one of \"alpha\" or \"profiles\"".into())),
    };
    fit.reference_height = sh.reference_height;
    Ok(fit)
}

pub fn energy(cfg: &RunConfig, rt: Runtime) -> CliResult<()> {
    let s: &EnergySection = cfg.section(&cfg.energy, "energy")?;
    if s.n_draws == 0 {
        return Err(CliError::Config("energy.n_draws must be at least 1".into()));
    }
    let hist = load_field_auto(&s.hist, Values::Speeds)?;
    let future = load_field_auto(&s.future, Values::Speeds)?;
    same_sites(&hist, &future, &s.future)?;
    let curves = formats::load_power_curves(&s.power_curves)?;
    let farm = formats::load_farm(&s.farm)?;
    let farm_path = s.farm.display().to_string();
    let mut heights = vec![f64::NAN; hist.n_sites()];
    for f in &farm {
        let curve = curves
            .iter()
            .find(|c| c.turbine == f.turbine)
            .ok_or_else(|| CliError::data(&farm_path, format!("turbine {} is not in {}", f.turbine, s.power_curves.display())))?;
        f.validate(curve, s.area_km2).context(|| farm_path.clone())?;
        let i = hist
            .sites()
            .iter()
            .position(|x| x.id == f.site_id)
            .ok_or_else(|| CliError::data(&farm_path, format!("site {} is not in the wind fields", f.site_id)))?;
        if !heights[i].is_nan() {
            return Err(CliError::data(&farm_path, format!("site {} has more than one farm", f.site_id)));
        }
        heights[i] = curve.hub_height;
    }
    let mut shear = shear_for(s, &hist)?;
    for f in &farm {
        if shear.for_site(f.site_id).is_none() {
            return Err(CliError::data(&farm_path, format!("no shear profile for farm site {}", f.site_id)));
        }
    }
    // Sites without a farm are extrapolated too (the draw streams are per
    // field), so they get a placeholder height and exponent.
    let fallback_h = heights.iter().copied().filter(|h| !h.is_nan()).fold(shear.reference_height * 2.0, f64::max);
    for (i, h) in heights.iter_mut().enumerate() {
        if h.is_nan() {
            *h = fallback_h;
            let id = hist.sites()[i].id;
            if shear.for_site(id).is_none() {
                shear.sites.extend(ShearFit::constant([id], DEFAULT_ALPHA).sites);
            }
        }
    }
    log::info("energy.start", json!({"seed": rt.seed, "farms": farm.len(), "n_draws": s.n_draws}));
    let delta = parallel::revenue_delta(&hist, &future, &shear, &heights, &farm, &curves, s.n_draws, rt.seed)
        .context(|| "revenue delta".into())?;
    formats::save_delta(&s.output, &delta)?;
    let farm_ids: Vec<u32> = farm.iter().map(|f| f.site_id).collect();
    shear.sites.retain(|x| farm_ids.contains(&x.site_id));
    let report = json!({
        "seed": rt.seed,
        "n_draws": s.n_draws,
        "reference_height": shear.reference_height,
        "shear": shear.sites,
        "delta": delta,
    });
    write_json(&s.report.clone().unwrap_or_else(|| with_extension(&s.output, "json")), &report)?;
    log::info("energy.done", json!({"total_mean": delta.total_mean, "total_sd": delta.total_sd}));
    Ok(())
}
