//! Rayon drivers around per-site, per-point and per-simulation core
//! functions. Work items are collected in index order, so results do not
//! depend on the number of threads.

use rayon::prelude::*;
use windadj_core::adjustment::{CovChoice, Historical, ResidualModel};
use windadj_core::climatology::{assemble_mean_fit, fit_mean_site, prepare_mean_fit, ClimatologyFit};
use windadj_core::divergence::{check_knn_inputs, knn_kl_from_terms, knn_log_ratio, KlEstimate, SampleCloud};
use windadj_core::energy::{extrapolate_draw, revenue_delta_draw, summarize_deltas, FarmSite, PowerCurve, RevenueDelta, ShearFit};
use windadj_core::simgen::{Study, ValidationTable};
use windadj_core::{Result, SpatioTemporalField};

use crate::error::{CliError, CliResult};

/// Pool with `threads` workers (all cores when `None`).
pub fn pool(threads: Option<usize>) -> CliResult<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| CliError::Config(format!("cannot start thread pool: {e}")))
}

pub fn fit_mean(field: &SpatioTemporalField, k: usize, with_trend: bool) -> Result<ClimatologyFit> {
    let design = prepare_mean_fit(field, k, with_trend)?;
    let sites = (0..field.n_sites())
        .into_par_iter()
        .map(|i| fit_mean_site(&design, field.series(i), k, with_trend, field.sites()[i].id))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble_mean_fit(field, k, with_trend, sites))
}

pub fn knn_kl(obs: &SampleCloud, sim: &SampleCloud, k: usize) -> Result<KlEstimate> {
    check_knn_inputs(obs, sim, k)?;
    let terms: Vec<(f64, usize)> = (0..obs.len()).into_par_iter().map(|i| knn_log_ratio(obs, sim, k, i)).collect();
    Ok(knn_kl_from_terms(&terms, obs.dim(), obs.len(), sim.len(), k))
}

/// Fits both untransformed residual models concurrently and caches them.
pub fn prefit_raw_models(hist: &mut Historical, cov: Option<CovChoice>) -> Result<()> {
    let spec = cov.map(|c| (c, hist.config.metric));
    let p = hist.config.ar_order;
    let (o, s) = rayon::join(|| ResidualModel::fit(&hist.e_obs, p, spec), || ResidualModel::fit(&hist.e_sim, p, spec));
    hist.insert_raw_models(cov, o?, s?);
    Ok(())
}

/// Runs every simulation of `study`; failed simulations are listed in the
/// table rather than aborting the run.
pub fn validation(study: &Study, on_done: impl Fn(u64) + Sync) -> ValidationTable {
    let results = (0..study.config.n_sims as u64)
        .into_par_iter()
        .map(|id| {
            let r = study.run_one(id);
            on_done(id);
            (id, r)
        })
        .collect();
    Study::collect(results)
}

/// Monte Carlo revenue change. Draw `d` extrapolates both periods with the
/// same random stream, so both share the shear exponent of that draw.
pub fn revenue_delta(
    hist: &SpatioTemporalField,
    future: &SpatioTemporalField,
    shear: &ShearFit,
    heights: &[f64],
    farm: &[FarmSite],
    curves: &[PowerCurve],
    n_draws: usize,
    seed: u64,
) -> Result<RevenueDelta> {
    let per_draw = (0..n_draws as u64)
        .into_par_iter()
        .map(|d| {
            let h = extrapolate_draw(hist, shear, heights, seed, d)?;
            let f = extrapolate_draw(future, shear, heights, seed, d)?;
            revenue_delta_draw(&h, &f, farm, curves)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize_deltas(farm, &per_draw))
}
