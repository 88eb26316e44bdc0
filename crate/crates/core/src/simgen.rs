//! Non-Gaussian random-field generators and the simulation-study harness.
//!
//! Observations come from a bi-resolution skew-t field
//! `W_O(s) = (lambda |U_r| + eta_r(s)) / sqrt(Z_r)` where `r` is the region
//! of `s`, `Z_r ~ Gamma(nu/2, rate nu/2)` i.i.d. per region,
//! `U ~ N(0, Sigma_0)` over region centroids and `eta_r` are independent
//! per-region Gaussian fields. Simulations come from a
//! Gaussian-log-Gaussian field `W_S(s) = eta(s) / sqrt(xi(s)) + eps(s)`
//! with `log xi` Gaussian of mean `-nu/2` and covariance `nu C`, so that
//! `E[xi] = 1`. All covariances are exponential with unit variance.
//! Replicates are independent in time.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use chrono::NaiveDate;
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::adjustment::{kl_between, CovChoice, Historical, Method, Mode, PlanConfig};
use crate::climatology::YearTerm;
use crate::covariance::{distance_matrix, Distance};
use crate::field::{Calendar, Site, SpatioTemporalField};
use crate::linalg::{cholesky, lower_mul_vec, Matrix};
use crate::rng::{standard_normals, stream, STREAM_OBSERVATIONS, STREAM_SIMULATIONS};
use crate::{Error, Result};

/// Sites partitioned into rectangular regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub sites: Vec<Site>,
    pub region_of_site: Vec<usize>,
    pub n_regions: usize,
}

impl Layout {
    /// The unit square cut into `nx` by `ny` congruent blocks, each holding a
    /// centred `per_side x per_side` grid. Sites are numbered region by
    /// region, row-major inside each region.
    pub fn blocks(nx: usize, ny: usize, per_side: usize) -> Self {
        let (w, h) = (1.0 / nx as f64, 1.0 / ny as f64);
        let (dx, dy) = (w / per_side as f64, h / per_side as f64);
        let mut sites = Vec::new();
        let mut region_of_site = Vec::new();
        for by in 0..ny {
            for bx in 0..nx {
                for j in 0..per_side {
                    for i in 0..per_side {
                        let id = sites.len() as u32;
                        let x = bx as f64 * w + 0.5 * dx + i as f64 * dx;
                        let y = by as f64 * h + 0.5 * dy + j as f64 * dy;
                        sites.push(Site::new(id, x, y));
                        region_of_site.push(by * nx + bx);
                    }
                }
            }
        }
        Self { sites, region_of_site, n_regions: nx * ny }
    }

    /// 200 sites: two rows of four 5 x 5 blocks.
    pub fn study() -> Self {
        Self::blocks(4, 2, 5)
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn members(&self, r: usize) -> Vec<usize> {
        (0..self.n_sites()).filter(|&i| self.region_of_site[i] == r).collect()
    }

    pub fn centroids(&self) -> Vec<Site> {
        (0..self.n_regions)
            .map(|r| {
                let m = self.members(r);
                let k = m.len() as f64;
                let lon = m.iter().map(|&i| self.sites[i].lon).sum::<f64>() / k;
                let lat = m.iter().map(|&i| self.sites[i].lat).sum::<f64>() / k;
                Site::new(r as u32, lon, lat)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SkewTConfig {
    pub lambda: f64,
    pub nu: f64,
    pub range_within: f64,
    pub range_between: f64,
    /// Replaces `Z_r` by 1.
    pub gaussian_limit: bool,
}

impl Default for SkewTConfig {
    fn default() -> Self {
        Self { lambda: 0.8, nu: 8.0, range_within: 0.2, range_between: 0.5, gaussian_limit: false }
    }
}

impl SkewTConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.range_within > 0.0 && self.range_between > 0.0) {
            return Err(Error::InvalidInput("skew-t ranges must be positive".into()));
        }
        if !self.gaussian_limit && !(self.nu > 4.0) {
            return Err(Error::InvalidInput(format!("skew-t degrees of freedom {} must exceed 4", self.nu)));
        }
        if !self.lambda.is_finite() {
            return Err(Error::InvalidInput("skew-t skewness parameter is not finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlgConfig {
    pub range_eta: f64,
    pub nu: f64,
    pub range_xi: f64,
    pub tau2: f64,
}

impl Default for GlgConfig {
    fn default() -> Self {
        Self { range_eta: 0.2, nu: 8.0, range_xi: 0.7, tau2: 0.1 }
    }
}

impl GlgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.range_eta > 0.0 && self.range_xi > 0.0) || !(self.nu >= 0.0) || !(self.tau2 >= 0.0) {
            return Err(Error::InvalidInput("GLG ranges must be positive and nu, tau2 non-negative".into()));
        }
        Ok(())
    }
}

fn exponential_factor(sites: &[Site], range: f64, scale: f64) -> Result<Matrix> {
    let d = distance_matrix(sites, Distance::Planar);
    let c = Matrix::from_fn(d.rows(), d.cols(), |i, j| scale * (-d[(i, j)] / range).exp());
    cholesky(&c)
}

/// Skew-t generator with its Cholesky factors precomputed.
#[derive(Debug, Clone)]
pub struct SkewTGenerator {
    config: SkewTConfig,
    layout: Layout,
    members: Vec<Vec<usize>>,
    l_between: Matrix,
    l_within: Vec<Matrix>,
}

impl SkewTGenerator {
    pub fn new(config: SkewTConfig, layout: &Layout) -> Result<Self> {
        config.validate()?;
        let members: Vec<Vec<usize>> = (0..layout.n_regions).map(|r| layout.members(r)).collect();
        if members.iter().any(|m| m.is_empty()) {
            return Err(Error::InvalidInput("every region needs at least one site".into()));
        }
        let l_between = exponential_factor(&layout.centroids(), config.range_between, 1.0)?;
        let l_within = members
            .iter()
            .map(|m| {
                let s: Vec<Site> = m.iter().map(|&i| layout.sites[i].clone()).collect();
                exponential_factor(&s, config.range_within, 1.0)
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, layout: layout.clone(), members, l_between, l_within })
    }

    /// Site-major `n_sites x n_replicates` values.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n_replicates: usize) -> Result<Vec<f64>> {
        let n = self.layout.n_sites();
        let nr = self.layout.n_regions;
        let gamma = if self.config.gaussian_limit {
            None
        } else {
            let shape = self.config.nu / 2.0;
            Some(Gamma::new(shape, 1.0 / shape).map_err(|e| Error::InvalidInput(format!("{e}")))?)
        };
        let mut out = vec![0.0; n * n_replicates];
        for t in 0..n_replicates {
            let u = lower_mul_vec(&self.l_between, &standard_normals(rng, nr));
            for r in 0..nr {
                let z = gamma.as_ref().map_or(1.0, |g| g.sample(rng));
                let eta = lower_mul_vec(&self.l_within[r], &standard_normals(rng, self.members[r].len()));
                let scale = z.sqrt().recip();
                for (k, &i) in self.members[r].iter().enumerate() {
                    out[i * n_replicates + t] = (self.config.lambda * u[r].abs() + eta[k]) * scale;
                }
            }
        }
        Ok(out)
    }
}

/// GLG generator with its Cholesky factors precomputed.
#[derive(Debug, Clone)]
pub struct GlgGenerator {
    config: GlgConfig,
    n: usize,
    l_eta: Matrix,
    l_xi: Option<Matrix>,
}

impl GlgGenerator {
    pub fn new(config: GlgConfig, sites: &[Site]) -> Result<Self> {
        config.validate()?;
        let l_eta = exponential_factor(sites, config.range_eta, 1.0)?;
        let l_xi = if config.nu > 0.0 { Some(exponential_factor(sites, config.range_xi, config.nu)?) } else { None };
        Ok(Self { config, n: sites.len(), l_eta, l_xi })
    }

    /// Site-major values together with the mixing field `xi`.
    pub fn sample_with_xi<R: Rng + ?Sized>(&self, rng: &mut R, n_replicates: usize) -> (Vec<f64>, Vec<f64>) {
        let n = self.n;
        let tau = self.config.tau2.sqrt();
        let mut out = vec![0.0; n * n_replicates];
        let mut xis = vec![1.0; n * n_replicates];
        for t in 0..n_replicates {
            let eta = lower_mul_vec(&self.l_eta, &standard_normals(rng, n));
            let log_xi = match &self.l_xi {
                Some(l) => lower_mul_vec(l, &standard_normals(rng, n)).into_iter().map(|v| v - self.config.nu / 2.0).collect(),
                None => vec![0.0; n],
            };
            let eps = if tau > 0.0 { standard_normals(rng, n) } else { vec![0.0; n] };
            for i in 0..n {
                let xi = log_xi[i].exp();
                xis[i * n_replicates + t] = xi;
                out[i * n_replicates + t] = eta[i] / xi.sqrt() + tau * eps[i];
            }
        }
        (out, xis)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n_replicates: usize) -> Vec<f64> {
        self.sample_with_xi(rng, n_replicates).0
    }
}

/// Day-indexed calendar used for replicates.
pub fn replicate_calendar(n: usize) -> Calendar {
    Calendar::new(NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date"), n)
}

pub fn simulate_skewt<R: Rng + ?Sized>(
    config: SkewTConfig,
    layout: &Layout,
    n_replicates: usize,
    rng: &mut R,
) -> Result<SpatioTemporalField> {
    if n_replicates == 0 {
        return Err(Error::InvalidInput("at least one replicate is required".into()));
    }
    let values = SkewTGenerator::new(config, layout)?.sample(rng, n_replicates)?;
    SpatioTemporalField::new(layout.sites.clone(), replicate_calendar(n_replicates), values)
}

pub fn simulate_glg<R: Rng + ?Sized>(
    config: GlgConfig,
    sites: &[Site],
    n_replicates: usize,
    rng: &mut R,
) -> Result<SpatioTemporalField> {
    if n_replicates == 0 {
        return Err(Error::InvalidInput("at least one replicate is required".into()));
    }
    let values = GlgGenerator::new(config, sites)?.sample(rng, n_replicates);
    SpatioTemporalField::new(sites.to_vec(), replicate_calendar(n_replicates), values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationConfig {
    pub skewt: SkewTConfig,
    pub glg: GlgConfig,
    pub regions_x: usize,
    pub regions_y: usize,
    pub per_side: usize,
    pub n_sims: usize,
    pub n_replicates: usize,
    pub n_historical: usize,
    pub methods: Vec<Method>,
    pub plan: PlanConfig,
    pub seed: u64,
}

/// Plan settings of the simulation study: no mean structure, no temporal
/// dependence and anomaly-form operators.
pub fn study_plan_config() -> PlanConfig {
    PlanConfig {
        mode: Mode::Anomaly,
        k_harmonics: 0,
        with_trend: false,
        ar_order: 0,
        year_term: YearTerm::Frozen,
        metric: Distance::Planar,
        transform_cov: CovChoice::Nonstationary,
        n_clusters: 8,
        clamp_negative: false,
        ..PlanConfig::default()
    }
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            skewt: SkewTConfig::default(),
            glg: GlgConfig::default(),
            regions_x: 4,
            regions_y: 2,
            per_side: 5,
            n_sims: 100,
            n_replicates: 100,
            n_historical: 50,
            methods: Method::ALL.to_vec(),
            plan: study_plan_config(),
            seed: 0,
        }
    }
}

impl ValidationConfig {
    pub fn layout(&self) -> Layout {
        Layout::blocks(self.regions_x, self.regions_y, self.per_side)
    }

    pub fn validate(&self) -> Result<()> {
        self.skewt.validate()?;
        self.glg.validate()?;
        if self.regions_x == 0 || self.regions_y == 0 || self.per_side == 0 {
            return Err(Error::InvalidInput("empty layout".into()));
        }
        if self.n_historical == 0 || self.n_historical >= self.n_replicates {
            return Err(Error::InvalidInput(format!(
                "{} historical replicates out of {}",
                self.n_historical, self.n_replicates
            )));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidInput("no methods requested".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub sim_id: u64,
    pub method: Method,
    pub kl: f64,
    pub kl_ratio_vs_mv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationTable {
    pub rows: Vec<SimRow>,
    /// Failed simulations and their errors; excluded from `rows`.
    pub failures: Vec<(u64, String)>,
}

impl ValidationTable {
    pub fn ratios(&self, method: Method) -> Vec<f64> {
        self.rows.iter().filter(|r| r.method == method).map(|r| r.kl_ratio_vs_mv).collect()
    }

    pub fn median_ratio(&self, method: Method) -> Option<f64> {
        let r = self.ratios(method);
        if r.is_empty() {
            None
        } else {
            Some(crate::stats::median(&r))
        }
    }
}

/// Generators shared by all simulations of a study.
#[derive(Debug, Clone)]
pub struct Study {
    pub config: ValidationConfig,
    pub layout: Layout,
    skewt: SkewTGenerator,
    glg: GlgGenerator,
}

impl Study {
    pub fn new(config: ValidationConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let skewt = SkewTGenerator::new(config.skewt, &layout)?;
        let glg = GlgGenerator::new(config.glg, &layout.sites)?;
        Ok(Self { config, layout, skewt, glg })
    }

    /// Observation and simulation fields of simulation `sim_id`.
    pub fn fields(&self, sim_id: u64) -> Result<(SpatioTemporalField, SpatioTemporalField)> {
        let t = self.config.n_replicates;
        let cal = replicate_calendar(t);
        let obs = self.skewt.sample(&mut stream(self.config.seed, STREAM_OBSERVATIONS, sim_id), t)?;
        let sim = self.glg.sample(&mut stream(self.config.seed, STREAM_SIMULATIONS, sim_id), t);
        Ok((
            SpatioTemporalField::new(self.layout.sites.clone(), cal, obs)?,
            SpatioTemporalField::new(self.layout.sites.clone(), cal, sim)?,
        ))
    }

    /// Fits every method on the historical replicates, adjusts the future
    /// simulation and scores it against the future observations.
    pub fn run_one(&self, sim_id: u64) -> Result<Vec<SimRow>> {
        let (obs, sim) = self.fields(sim_id)?;
        let split = obs.calendar().date(self.config.n_historical);
        let (obs_hist, obs_future) = obs.split_by_date(split)?;
        let (sim_hist, sim_future) = sim.split_by_date(split)?;
        let mut plan_config = self.config.plan.clone();
        plan_config.seed = self.config.seed ^ sim_id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut hist = Historical::new(obs_hist, sim_hist, plan_config)?;
        let clusters = if self.config.methods.contains(&Method::TC) { Some(hist.clusters()?) } else { None };
        let mut kls = Vec::with_capacity(self.config.methods.len());
        for &m in &self.config.methods {
            let plan = hist.fit_plan(m, clusters.as_ref())?;
            let adjusted = plan.adjust(&sim_future)?;
            kls.push(kl_between(&adjusted.field, &obs_future, None)?.value);
        }
        let base = self.config.methods.iter().position(|&m| m == Method::MV).unwrap_or(0);
        Ok(self
            .config
            .methods
            .iter()
            .zip(&kls)
            .map(|(&method, &kl)| SimRow { sim_id, method, kl, kl_ratio_vs_mv: kl / kls[base] })
            .collect())
    }

    /// Collects per-simulation results in id order.
    pub fn collect(results: Vec<(u64, Result<Vec<SimRow>>)>) -> ValidationTable {
        let mut rows = Vec::new();
        let mut failures = Vec::new();
        for (id, r) in results {
            match r {
                Ok(mut v) => rows.append(&mut v),
                Err(e) => failures.push((id, format!("{e}"))),
            }
        }
        ValidationTable { rows, failures }
    }
}

/// Sequential study run.
pub fn run_validation(config: ValidationConfig) -> Result<ValidationTable> {
    let study = Study::new(config)?;
    let results = (0..study.config.n_sims as u64).map(|id| (id, study.run_one(id))).collect();
    Ok(Study::collect(results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats;

    #[test]
    fn study_layout() {
        let l = Layout::study();
        assert_eq!(l.n_sites(), 200);
        assert_eq!(l.n_regions, 8);
        assert!((0..8).all(|r| l.members(r).len() == 25));
        assert!(l.sites.iter().all(|s| s.lon > 0.0 && s.lon < 1.0 && s.lat > 0.0 && s.lat < 1.0));
        let (a, b) = (&l.sites[0], &l.sites[1]);
        assert!((a.lon - 0.025).abs() < 1e-15 && (b.lon - a.lon - 0.05).abs() < 1e-15);
        // nearest neighbours at 0.05 give the within-region maximum correlation
        assert!(((-0.05f64 / 0.2).exp() - 0.7788).abs() < 1e-4);
    }

    #[test]
    fn gaussian_limits() {
        let l = Layout::blocks(2, 1, 2);
        let cfg = SkewTConfig { lambda: 0.0, gaussian_limit: true, ..SkewTConfig::default() };
        let f = simulate_skewt(cfg, &l, 4000, &mut stream(1, 0, 0)).unwrap();
        let m = stats::moments(f.series(0)).unwrap();
        assert!(m.0.abs() < 0.15 && m.1.abs() < 0.3);

        let g = GlgGenerator::new(GlgConfig { nu: 0.0, tau2: 0.0, ..GlgConfig::default() }, &l.sites).unwrap();
        let (w, xi) = g.sample_with_xi(&mut stream(1, 0, 1), 50);
        assert!(xi.iter().all(|&x| x == 1.0));
        let eta_only = GlgGenerator::new(GlgConfig { nu: 0.0, tau2: 0.0, ..GlgConfig::default() }, &l.sites)
            .unwrap()
            .sample(&mut stream(1, 0, 1), 50);
        assert_eq!(w, eta_only);
    }

    #[test]
    fn reproducible_per_stream() {
        let l = Layout::blocks(2, 2, 2);
        let a = simulate_skewt(SkewTConfig::default(), &l, 10, &mut stream(3, 1, 7)).unwrap();
        let b = simulate_skewt(SkewTConfig::default(), &l, 10, &mut stream(3, 1, 7)).unwrap();
        assert_eq!(a, b);
        assert!(SkewTConfig { nu: 3.0, ..SkewTConfig::default() }.validate().is_err());
    }
}
