//! Adjustment operators mapping future simulations onto the observational
//! distribution.
//!
//! Notation: `mu_O`, `mu_S` are the fitted mean models, `e = W - mu` the
//! mean residuals and `m`, `D` the per-site residual mean and marginal
//! standard deviation. The transfer matrix is
//! `A = D_O C_O C_S^{-1} D_S^{-1}`, where `C` is the Cholesky factor of the
//! fitted spatial correlation matrix (the identity when no spatial model
//! is used). For the trans-Gaussian methods `m`, `D` and `C` are computed
//! from `g_lambda(e)` and marked with a superscript `g`.
//!
//! | method | as-written | anomaly |
//! |--------|------------|---------|
//! | M      | `W_S + (mu_O - mu_S)` | same |
//! | MV     | `W_S + (D_O / D_S)(mu_O - mu_S)` | `mu_O + m_O + (D_O / D_S)(e_S - m_S)` |
//! | MC, MN | `W_S + A (mu_O - mu_S)` | `mu_O + m_O + A (e_S - m_S)` |
//! | T1, TC | `mu_S + A (mu_O - mu_S) + g_O^{-1}[g_S(e_S) + A^g (m^g_O - m^g_S)]` | `mu_O + g_O^{-1}[m^g_O + A^g (g_S(e_S) - m^g_S)]` |
//!
//! MC uses a Matérn correlation, MN the kernel-convolution nonstationary
//! model. T1 uses one transformation parameter pair for all sites, TC one
//! pair per cluster; both choose the parameters by coordinate descent on
//! the nearest-neighbour KL divergence between the adjusted historical
//! simulation and the historical observations.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::climatology::{fit_ar, filter_site, fit_mean, ArFit, ClimatologyFit, YearTerm};
use crate::clustering::{stratified_subsample, weighted_kmeans, ClusterAssignment, DEFAULT_CLUSTERS, DEFAULT_WEIGHTS};
use crate::covariance::{fit_matern, fit_nonstat, CovFactor, CovarianceModel, Distance};
use crate::divergence::{default_k, knn_kl, CloudLabel, KlEstimate, SampleCloud};
use crate::field::{Site, SpatioTemporalField};
use crate::linalg::{lower_mul_vec, solve_lower};
use crate::optim::golden_section;
use crate::rng::{stream, STREAM_DAY_SUBSAMPLE};
use crate::transform::{self, fit_lambda_mle, Provenance, TransformSpec, LAMBDA_MAX, LAMBDA_MIN};
use crate::{stats, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    M,
    MV,
    MC,
    MN,
    T1,
    TC,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::M, Method::MV, Method::MC, Method::MN, Method::T1, Method::TC];

    pub fn is_transgaussian(self) -> bool {
        matches!(self, Method::T1 | Method::TC)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::M => "M",
            Method::MV => "MV",
            Method::MC => "MC",
            Method::MN => "MN",
            Method::T1 => "T1",
            Method::TC => "TC",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|m| m.name().eq_ignore_ascii_case(s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Scale factors act on the mean difference.
    #[default]
    AsWritten,
    /// Scale factors act on daily anomalies.
    Anomaly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovChoice {
    Matern,
    Nonstationary,
}

/// Settings of the transformation-parameter search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// Each parameter is searched within this distance of its initial value
    /// (intersected with the global bounds).
    pub window: f64,
    pub max_cycles: usize,
    /// Stop when a full cycle lowers the divergence by less than this.
    pub tol: f64,
    /// Bracket width at which a line search stops.
    pub line_tol: f64,
    /// Maximum number of historical days used by the objective.
    pub day_subsample: usize,
    /// Neighbour count; `None` means `round(sqrt(m))`.
    pub k: Option<usize>,
    /// Admissible observation-side parameters. On `[0, 2]` the inverse
    /// transform is defined on the whole real line.
    pub obs_bounds: [f64; 2],
    /// Admissible simulation-side parameters.
    pub sim_bounds: [f64; 2],
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            window: 0.5,
            max_cycles: 10,
            tol: 1e-3,
            line_tol: 1e-3,
            day_subsample: 1000,
            k: None,
            obs_bounds: [0.0, 2.0],
            sim_bounds: [LAMBDA_MIN, LAMBDA_MAX],
        }
    }
}

/// Everything needed to fit a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub mode: Mode,
    pub k_harmonics: usize,
    pub with_trend: bool,
    pub ar_order: usize,
    pub year_term: YearTerm,
    pub metric: Distance,
    /// Spatial model used inside T1 and TC.
    pub transform_cov: CovChoice,
    pub n_clusters: usize,
    pub cluster_weights: [f64; 3],
    pub search: SearchConfig,
    pub clamp_negative: bool,
    pub seed: u64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            mode: Mode::AsWritten,
            k_harmonics: 2,
            with_trend: true,
            ar_order: 1,
            year_term: YearTerm::Frozen,
            metric: Distance::Planar,
            transform_cov: CovChoice::Nonstationary,
            n_clusters: DEFAULT_CLUSTERS,
            cluster_weights: DEFAULT_WEIGHTS,
            search: SearchConfig::default(),
            clamp_negative: true,
            seed: 0,
        }
    }
}

/// Spatial correlation model and the Cholesky factor of its matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationFit {
    pub model: CovarianceModel,
    pub factor: CovFactor,
}

/// Per-site mean, autoregressive model and marginal scale of a residual
/// field, with an optional spatial correlation.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualModel {
    pub mean: Vec<f64>,
    pub ar: ArFit,
    /// Stationary marginal standard deviation implied by `ar`.
    pub sd: Vec<f64>,
    pub corr: Option<CorrelationFit>,
}

impl ResidualModel {
    /// Fits mean and AR scale of `e`, and the spatial correlation of its
    /// standardized innovations when `cov` is given.
    pub fn fit(e: &SpatioTemporalField, p: usize, cov: Option<(CovChoice, Distance)>) -> Result<Self> {
        let (mean, ar, centred) = marginal_fit(e, p)?;
        let sd = ar.marginal_sds();
        let corr = match cov {
            None => None,
            Some((choice, metric)) => Some(fit_correlation(&standardized_innovations(&centred, &ar)?, choice, metric)?),
        };
        Ok(Self { mean, ar, sd, corr })
    }

    /// Refits the marginal part of `e` and reuses `corr`.
    pub fn with_correlation(e: &SpatioTemporalField, p: usize, corr: Option<&CorrelationFit>) -> Result<Self> {
        let (mean, ar, _) = marginal_fit(e, p)?;
        let sd = ar.marginal_sds();
        Ok(Self { mean, ar, sd, corr: corr.cloned() })
    }

    pub fn n_sites(&self) -> usize {
        self.mean.len()
    }
}

fn marginal_fit(e: &SpatioTemporalField, p: usize) -> Result<(Vec<f64>, ArFit, SpatioTemporalField)> {
    let mean: Vec<f64> = (0..e.n_sites()).map(|i| stats::mean(e.series(i))).collect();
    let centred = e.map_values(|i, _, v| v - mean[i])?;
    let ar = fit_ar(&centred, p)?;
    Ok((mean, ar, centred))
}

fn standardized_innovations(centred: &SpatioTemporalField, ar: &ArFit) -> Result<SpatioTemporalField> {
    let mut values = Vec::with_capacity(centred.values().len());
    for i in 0..centred.n_sites() {
        let s = &ar.sites[i];
        if !(s.innovation_sd > 0.0) {
            return Err(Error::InvalidInput(format!("site {} has zero residual variance", centred.sites()[i].id)));
        }
        values.extend(filter_site(centred.series(i), &s.phi).into_iter().map(|u| u / s.innovation_sd));
    }
    centred.with_values(values)
}

/// Fits a spatial model to standardized innovations and factors its
/// correlation matrix.
pub fn fit_correlation(innovations: &SpatioTemporalField, choice: CovChoice, metric: Distance) -> Result<CorrelationFit> {
    let model = match choice {
        CovChoice::Matern => CovarianceModel::Matern { params: fit_matern(innovations, metric)?.params, metric },
        CovChoice::Nonstationary => CovarianceModel::Nonstationary { params: fit_nonstat(innovations, metric, None)?.params },
    };
    let factor = CovFactor::from_matrix(&model.correlation_matrix(innovations.sites()))?;
    Ok(CorrelationFit { model, factor })
}

/// `A v = D_O C_O C_S^{-1} D_S^{-1} v`.
pub fn transfer(obs: &ResidualModel, sim: &ResidualModel, v: &[f64]) -> Vec<f64> {
    let y: Vec<f64> = v.iter().zip(&sim.sd).map(|(a, s)| a / s).collect();
    let w = match (&obs.corr, &sim.corr) {
        (Some(co), Some(cs)) => lower_mul_vec(&co.factor.l, &solve_lower(&cs.factor.l, &y)),
        _ => y,
    };
    w.iter().zip(&obs.sd).map(|(a, s)| a * s).collect()
}

/// Transformation parameters of both fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformPair {
    pub obs: TransformSpec,
    pub sim: TransformSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSearchResult {
    pub lambda_obs: Vec<f64>,
    pub lambda_sim: Vec<f64>,
    pub init_obs: Vec<f64>,
    pub init_sim: Vec<f64>,
    /// Divergence at the start and after every accepted step.
    pub kl_trace: Vec<f64>,
    pub converged: bool,
    pub cycles: usize,
    pub evaluations: usize,
    pub warnings: Vec<String>,
}

/// A fitted adjustment.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjustmentPlan {
    pub method: Method,
    pub mode: Mode,
    pub year_term: YearTerm,
    pub sites: Vec<Site>,
    pub mean_obs: ClimatologyFit,
    pub mean_sim: ClimatologyFit,
    /// Residual models on the working scale (`g(e)` for T1/TC).
    pub obs: ResidualModel,
    pub sim: ResidualModel,
    /// Untransformed residual models for the mean-difference term of the
    /// as-written trans-Gaussian operator.
    pub raw: Option<(ResidualModel, ResidualModel)>,
    pub transform: Option<TransformPair>,
    pub search: Option<LambdaSearchResult>,
    pub clamp_negative: bool,
}

/// Adjusted field and the number of negative values set to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjusted {
    pub field: SpatioTemporalField,
    pub clamped: usize,
}

/// Site-major days to adjust together with both mean models on those days.
struct Block<'a> {
    n_sites: usize,
    n_days: usize,
    w_sim: &'a [f64],
    mu_obs: &'a [f64],
    mu_sim: &'a [f64],
}

struct Operator<'a> {
    method: Method,
    mode: Mode,
    obs: &'a ResidualModel,
    sim: &'a ResidualModel,
    raw: Option<(&'a ResidualModel, &'a ResidualModel)>,
    lambdas: Option<(&'a [f64], &'a [f64])>,
}

impl Operator<'_> {
    fn apply(&self, b: &Block<'_>, site_ids: &[u32]) -> Result<Vec<f64>> {
        let (n, t) = (b.n_sites, b.n_days);
        let mut out = vec![0.0; n * t];
        let col = |v: &[f64], d: usize| -> Vec<f64> { (0..n).map(|i| v[i * t + d]).collect() };
        let diag_only = matches!(self.method, Method::M | Method::MV);
        match (self.method, self.mode) {
            (Method::M, _) => {
                for k in 0..n * t {
                    out[k] = b.w_sim[k] + (b.mu_obs[k] - b.mu_sim[k]);
                }
            }
            (m, Mode::AsWritten) if !m.is_transgaussian() => {
                for d in 0..t {
                    let delta: Vec<f64> = (0..n).map(|i| b.mu_obs[i * t + d] - b.mu_sim[i * t + d]).collect();
                    let shift = if diag_only { self.ratio_apply(&delta) } else { transfer(self.obs, self.sim, &delta) };
                    for i in 0..n {
                        out[i * t + d] = b.w_sim[i * t + d] + shift[i];
                    }
                }
            }
            (_, Mode::Anomaly) => {
                let (lo, ls) = match self.lambdas {
                    Some((o, s)) => (Some(o), Some(s)),
                    None => (None, None),
                };
                for d in 0..t {
                    let v: Vec<f64> = (0..n)
                        .map(|i| {
                            let e = b.w_sim[i * t + d] - b.mu_sim[i * t + d];
                            let g = ls.map_or(e, |l| transform::yeo_johnson(e, l[i]));
                            g - self.sim.mean[i]
                        })
                        .collect();
                    let w = if diag_only { self.ratio_apply(&v) } else { transfer(self.obs, self.sim, &v) };
                    for i in 0..n {
                        let y = self.obs.mean[i] + w[i];
                        let x = match lo {
                            Some(l) => inverse(y, l[i], site_ids[i], d)?,
                            None => y,
                        };
                        out[i * t + d] = b.mu_obs[i * t + d] + x;
                    }
                }
            }
            (_, Mode::AsWritten) => {
                let (lo, ls) = self.lambdas.expect("trans-Gaussian operator has parameters");
                let (raw_o, raw_s) = self.raw.expect("as-written trans-Gaussian operator has raw models");
                let mdiff: Vec<f64> = (0..n).map(|i| self.obs.mean[i] - self.sim.mean[i]).collect();
                let c = transfer(self.obs, self.sim, &mdiff);
                for d in 0..t {
                    let delta: Vec<f64> = (0..n).map(|i| b.mu_obs[i * t + d] - b.mu_sim[i * t + d]).collect();
                    let shift = transfer(raw_o, raw_s, &delta);
                    let e = col(b.w_sim, d);
                    let mu_s = col(b.mu_sim, d);
                    for i in 0..n {
                        let g = transform::yeo_johnson(e[i] - mu_s[i], ls[i]) + c[i];
                        out[i * t + d] = mu_s[i] + shift[i] + inverse(g, lo[i], site_ids[i], d)?;
                    }
                }
            }
        }
        Ok(out)
    }

    fn ratio_apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter().enumerate().map(|(i, x)| self.obs.sd[i] / self.sim.sd[i] * x).collect()
    }
}

fn inverse(y: f64, lambda: f64, site: u32, day: usize) -> Result<f64> {
    transform::yeo_johnson_inverse(y, lambda).map_err(|e| match e {
        Error::TransformRange { value, lambda, bound } => Error::AdjustRange { site, day, value, lambda, bound },
        other => other,
    })
}

impl AdjustmentPlan {
    fn operator(&self) -> Operator<'_> {
        Operator {
            method: self.method,
            mode: self.mode,
            obs: &self.obs,
            sim: &self.sim,
            raw: self.raw.as_ref().map(|(o, s)| (o, s)),
            lambdas: self.transform.as_ref().map(|t| (t.obs.lambda_per_site.as_slice(), t.sim.lambda_per_site.as_slice())),
        }
    }

    /// Applies the plan to a simulated field on any calendar.
    pub fn adjust(&self, sim_future: &SpatioTemporalField) -> Result<Adjusted> {
        if sim_future.sites() != self.sites.as_slice() {
            return Err(Error::Shape("future simulation sites differ from the plan's sites".into()));
        }
        let cal = sim_future.calendar();
        let mu_obs = self.mean_obs.evaluate(cal, self.year_term);
        let mu_sim = self.mean_sim.evaluate(cal, self.year_term);
        let block = Block {
            n_sites: sim_future.n_sites(),
            n_days: sim_future.n_days(),
            w_sim: sim_future.values(),
            mu_obs: &mu_obs,
            mu_sim: &mu_sim,
        };
        let ids: Vec<u32> = self.sites.iter().map(|s| s.id).collect();
        let mut values = self.operator().apply(&block, &ids)?;
        let mut clamped = 0;
        if self.clamp_negative {
            for v in values.iter_mut().filter(|v| **v < 0.0) {
                *v = 0.0;
                clamped += 1;
            }
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            let n = sim_future.n_days();
            return Err(Error::NonFinite { site: ids[k / n], day: k % n });
        }
        Ok(Adjusted { field: sim_future.with_values(values)?, clamped })
    }
}

/// Historical observation/simulation pair with its mean fits and cached
/// untransformed residual models.
#[derive(Debug, Clone)]
pub struct Historical {
    pub config: PlanConfig,
    pub obs: SpatioTemporalField,
    pub sim: SpatioTemporalField,
    pub mean_obs: ClimatologyFit,
    pub mean_sim: ClimatologyFit,
    pub e_obs: SpatioTemporalField,
    pub e_sim: SpatioTemporalField,
    cache: Vec<(Option<CovChoice>, ResidualModel, ResidualModel)>,
}

impl Historical {
    pub fn new(obs: SpatioTemporalField, sim: SpatioTemporalField, config: PlanConfig) -> Result<Self> {
        if obs.sites() != sim.sites() {
            return Err(Error::Shape("observation and simulation site sets differ".into()));
        }
        let mean_obs = fit_mean(&obs, config.k_harmonics, config.with_trend)?;
        let mean_sim = fit_mean(&sim, config.k_harmonics, config.with_trend)?;
        Self::with_means(obs, sim, mean_obs, mean_sim, config)
    }

    /// Uses precomputed mean fits (for example fitted in parallel).
    pub fn with_means(
        obs: SpatioTemporalField,
        sim: SpatioTemporalField,
        mean_obs: ClimatologyFit,
        mean_sim: ClimatologyFit,
        config: PlanConfig,
    ) -> Result<Self> {
        let e_obs = mean_obs.residuals(&obs, config.year_term)?;
        let e_sim = mean_sim.residuals(&sim, config.year_term)?;
        Ok(Self { config, obs, sim, mean_obs, mean_sim, e_obs, e_sim, cache: Vec::new() })
    }

    pub fn sites(&self) -> &[Site] {
        self.obs.sites()
    }

    /// Untransformed residual models (cached per spatial model).
    pub fn raw_models(&mut self, cov: Option<CovChoice>) -> Result<(ResidualModel, ResidualModel)> {
        if let Some((_, o, s)) = self.cache.iter().find(|c| c.0 == cov) {
            return Ok((o.clone(), s.clone()));
        }
        let spec = cov.map(|c| (c, self.config.metric));
        let o = ResidualModel::fit(&self.e_obs, self.config.ar_order, spec)?;
        let s = ResidualModel::fit(&self.e_sim, self.config.ar_order, spec)?;
        self.cache.push((cov, o.clone(), s.clone()));
        Ok((o, s))
    }

    /// Inserts externally fitted residual models into the cache.
    pub fn insert_raw_models(&mut self, cov: Option<CovChoice>, obs: ResidualModel, sim: ResidualModel) {
        self.cache.retain(|c| c.0 != cov);
        self.cache.push((cov, obs, sim));
    }

    /// Pointwise transformation-parameter estimates of the observation
    /// residuals. Sites whose likelihood peaks at a search bound get the
    /// best grid value.
    pub fn pointwise_lambdas(&self) -> Vec<f64> {
        (0..self.e_obs.n_sites()).map(|i| lambda_or_grid_best(self.e_obs.series(i))).collect()
    }

    /// Weighted k-means on `(lambda, lat, lon)`.
    pub fn clusters(&self) -> Result<ClusterAssignment> {
        let lambdas = self.pointwise_lambdas();
        let features: Vec<[f64; 3]> =
            self.sites().iter().zip(&lambdas).map(|(s, &l)| [l, s.lat, s.lon]).collect();
        let k = self.config.n_clusters.min(features.len());
        weighted_kmeans(&features, self.config.cluster_weights, k, self.config.seed)
    }

    fn cov_for(&self, method: Method) -> Option<CovChoice> {
        match method {
            Method::M | Method::MV => None,
            Method::MC => Some(CovChoice::Matern),
            Method::MN => Some(CovChoice::Nonstationary),
            Method::T1 | Method::TC => Some(self.config.transform_cov),
        }
    }

    /// Fits `method`. TC needs `clusters`; T1 ignores them.
    pub fn fit_plan(&mut self, method: Method, clusters: Option<&ClusterAssignment>) -> Result<AdjustmentPlan> {
        if !method.is_transgaussian() {
            let (o, s) = self.raw_models(self.cov_for(method))?;
            return self.assemble(method, o, s, None, None, None);
        }
        let labels = self.labels_for(method, clusters)?;
        let search = self.optimize_lambdas(method, &labels)?;
        let provenance = Provenance::ClusterKl;
        let obs = TransformSpec::from_clusters(&labels, &search.lambda_obs, provenance);
        let sim = TransformSpec::from_clusters(&labels, &search.lambda_sim, provenance);
        self.plan_with_transform(method, TransformPair { obs, sim }, Some(search))
    }

    fn labels_for(&self, method: Method, clusters: Option<&ClusterAssignment>) -> Result<Vec<usize>> {
        let n = self.sites().len();
        match method {
            Method::TC => {
                let c = clusters.ok_or_else(|| Error::InvalidInput("method TC needs a cluster assignment".into()))?;
                if c.labels.len() != n {
                    return Err(Error::Shape(format!("{} cluster labels for {n} sites", c.labels.len())));
                }
                Ok(c.labels.clone())
            }
            _ => Ok(vec![0; n]),
        }
    }

    /// Trans-Gaussian plan with given parameters: residual models are
    /// refitted on the transformed residuals.
    pub fn plan_with_transform(
        &mut self,
        method: Method,
        transform: TransformPair,
        search: Option<LambdaSearchResult>,
    ) -> Result<AdjustmentPlan> {
        let cov = self.cov_for(method).map(|c| (c, self.config.metric));
        let p = self.config.ar_order;
        let g_obs = self.transformed(&self.e_obs, &transform.obs.lambda_per_site)?;
        let g_sim = self.transformed(&self.e_sim, &transform.sim.lambda_per_site)?;
        let o = ResidualModel::fit(&g_obs, p, cov)?;
        let s = ResidualModel::fit(&g_sim, p, cov)?;
        let raw = match self.config.mode {
            Mode::AsWritten => Some(self.raw_models(self.cov_for(method))?),
            Mode::Anomaly => None,
        };
        self.assemble(method, o, s, raw, Some(transform), search)
    }

    fn transformed(&self, e: &SpatioTemporalField, lambdas: &[f64]) -> Result<SpatioTemporalField> {
        e.with_values(transform::forward_site_major(e.values(), lambdas, e.n_days()))
    }

    fn assemble(
        &self,
        method: Method,
        obs: ResidualModel,
        sim: ResidualModel,
        raw: Option<(ResidualModel, ResidualModel)>,
        transform: Option<TransformPair>,
        search: Option<LambdaSearchResult>,
    ) -> Result<AdjustmentPlan> {
        if method != Method::M {
            if let Some(i) = sim.sd.iter().position(|s| !(*s > 0.0)) {
                return Err(Error::InvalidInput(format!("simulation residual sd is zero at site {}", self.sites()[i].id)));
            }
        }
        Ok(AdjustmentPlan {
            method,
            mode: self.config.mode,
            year_term: self.config.year_term,
            sites: self.sites().to_vec(),
            mean_obs: self.mean_obs.clone(),
            mean_sim: self.mean_sim.clone(),
            obs,
            sim,
            raw,
            transform,
            search,
            clamp_negative: self.config.clamp_negative,
        })
    }

    /// Cyclic coordinate descent over per-cluster `(lambda_O, lambda_S)`.
    ///
    /// The objective is `knn_kl(adjusted historical simulation, historical
    /// observations)` on a fixed day subsample. Each step is a golden-section
    /// line search within `window` of the cluster's maximum-likelihood
    /// value and is kept only when it lowers the divergence. While
    /// searching, the spatial correlation of the untransformed residuals is
    /// held fixed and only the marginal models of the transformed residuals
    /// are refitted.
    pub fn optimize_lambdas(&mut self, method: Method, labels: &[usize]) -> Result<LambdaSearchResult> {
        let cfg = self.config.search.clone();
        let n_clusters = labels.iter().copied().max().map_or(0, |m| m + 1);
        let (raw_o, raw_s) = self.raw_models(self.cov_for(method))?;
        let mut warnings = Vec::new();
        let mut init_obs = cluster_mles(&self.e_obs, labels, n_clusters, "observation", &mut warnings);
        let mut init_sim = cluster_mles(&self.e_sim, labels, n_clusters, "simulation", &mut warnings);

        let t_obs = self.obs.n_days();
        let t_sim = self.sim.n_days();
        let days_obs = day_subsample(t_obs, cfg.day_subsample, self.config.seed, 0);
        let days_sim = day_subsample(t_sim, cfg.day_subsample, self.config.seed, 1);
        let obs_cloud = SampleCloud::from_field(&self.obs, CloudLabel::Observation).select(&days_obs);
        let n = self.sites().len();
        let pick = |f: &SpatioTemporalField, v: &[f64]| -> Vec<f64> {
            let t = f.n_days();
            let mut out = Vec::with_capacity(n * days_sim.len());
            for i in 0..n {
                out.extend(days_sim.iter().map(|&d| v[i * t + d]));
            }
            out
        };
        let mu_obs_all = self.mean_obs.evaluate(self.sim.calendar(), self.config.year_term);
        let mu_sim_all = self.mean_sim.evaluate(self.sim.calendar(), self.config.year_term);
        let w_sim = pick(&self.sim, self.sim.values());
        let mu_obs = pick(&self.sim, &mu_obs_all);
        let mu_sim = pick(&self.sim, &mu_sim_all);
        let block = Block { n_sites: n, n_days: days_sim.len(), w_sim: &w_sim, mu_obs: &mu_obs, mu_sim: &mu_sim };
        let k = cfg.k.unwrap_or_else(|| default_k(days_sim.len()));
        let ids: Vec<u32> = self.sites().iter().map(|s| s.id).collect();
        let p = self.config.ar_order;
        let mode = self.config.mode;

        let mut evaluations = 0usize;
        let mut objective = |x: &[f64]| -> f64 {
            evaluations += 1;
            let lo: Vec<f64> = labels.iter().map(|&c| x[c]).collect();
            let ls: Vec<f64> = labels.iter().map(|&c| x[n_clusters + c]).collect();
            let eval = || -> Result<f64> {
                let g_o = self.e_obs.with_values(transform::forward_site_major(self.e_obs.values(), &lo, t_obs))?;
                let g_s = self.e_sim.with_values(transform::forward_site_major(self.e_sim.values(), &ls, t_sim))?;
                let mo = ResidualModel::with_correlation(&g_o, p, raw_o.corr.as_ref())?;
                let ms = ResidualModel::with_correlation(&g_s, p, raw_s.corr.as_ref())?;
                let op = Operator {
                    method,
                    mode,
                    obs: &mo,
                    sim: &ms,
                    raw: Some((&raw_o, &raw_s)),
                    lambdas: Some((&lo, &ls)),
                };
                let adjusted = op.apply(&block, &ids)?;
                if adjusted.iter().any(|v| !v.is_finite() || v.abs() > 1e12) {
                    return Ok(f64::INFINITY);
                }
                let cloud = SampleCloud::from_site_major(&adjusted, n, block.n_days, CloudLabel::Simulation);
                Ok(knn_kl(&cloud, &obs_cloud, k)?.value)
            };
            eval().unwrap_or(f64::INFINITY)
        };

        for (v, b) in init_obs.iter_mut().map(|v| (v, cfg.obs_bounds)).chain(init_sim.iter_mut().map(|v| (v, cfg.sim_bounds))) {
            *v = v.clamp(b[0], b[1]);
        }
        let mut x: Vec<f64> = init_obs.iter().chain(&init_sim).copied().collect();
        let mut fx = objective(&x);
        if !fx.is_finite() {
            let ones = vec![1.0; x.len()];
            let f1 = objective(&ones);
            if !f1.is_finite() {
                return Err(Error::NonFiniteObjective("divergence is not finite at the initial parameters".into()));
            }
            warnings.push("objective not finite at the likelihood estimates; started from lambda = 1".into());
            x = ones;
            fx = f1;
        }
        let start: Vec<f64> = x.clone();
        let bounds: Vec<(f64, f64)> = start
            .iter()
            .enumerate()
            .map(|(j, &s)| {
                let b = if j < n_clusters { cfg.obs_bounds } else { cfg.sim_bounds };
                ((s - cfg.window).max(b[0]), (s + cfg.window).min(b[1]))
            })
            .collect();
        let mut kl_trace = vec![fx];
        let mut converged = false;
        let mut cycles = 0;
        while cycles < cfg.max_cycles {
            cycles += 1;
            let before = fx;
            for j in 0..x.len() {
                let (lo, hi) = bounds[j];
                let mut y = x.clone();
                let r = golden_section(
                    |v| {
                        y[j] = v;
                        objective(&y)
                    },
                    lo,
                    hi,
                    cfg.line_tol,
                );
                if r.value < fx {
                    x[j] = r.x;
                    fx = r.value;
                    kl_trace.push(fx);
                }
            }
            if before - fx < cfg.tol {
                converged = true;
                break;
            }
        }
        for (j, &(lo, hi)) in bounds.iter().enumerate() {
            if (x[j] - lo).abs() < 2.0 * cfg.line_tol || (hi - x[j]).abs() < 2.0 * cfg.line_tol {
                let side = if j < n_clusters { "observation" } else { "simulation" };
                warnings.push(format!("{side} lambda of cluster {} stopped at its search bound", j % n_clusters));
            }
        }
        Ok(LambdaSearchResult {
            lambda_obs: x[..n_clusters].to_vec(),
            lambda_sim: x[n_clusters..].to_vec(),
            init_obs: start[..n_clusters].to_vec(),
            init_sim: start[n_clusters..].to_vec(),
            kl_trace,
            converged,
            cycles,
            evaluations,
            warnings,
        })
    }
}

/// Maximum-likelihood estimate, or the best grid value when the maximum
/// sits on a search bound.
pub fn lambda_or_grid_best(sample: &[f64]) -> f64 {
    match fit_lambda_mle(sample) {
        Ok(e) => e.lambda_hat,
        Err(_) => {
            let steps = ((LAMBDA_MAX - LAMBDA_MIN) / 0.05).round() as usize;
            (0..=steps)
                .map(|i| LAMBDA_MIN + i as f64 * 0.05)
                .map(|l| (l, transform::profile_loglik(sample, l)))
                .fold((1.0, f64::NEG_INFINITY), |b, c| if c.1 > b.1 { c } else { b })
                .0
        }
    }
}

fn cluster_mles(e: &SpatioTemporalField, labels: &[usize], k: usize, side: &str, warnings: &mut Vec<String>) -> Vec<f64> {
    (0..k)
        .map(|c| {
            let pooled: Vec<f64> =
                (0..e.n_sites()).filter(|&i| labels[i] == c).flat_map(|i| e.series(i).iter().copied()).collect();
            match fit_lambda_mle(&pooled) {
                Ok(est) => est.lambda_hat,
                Err(err) => {
                    warnings.push(format!("{side} cluster {c}: {err}; starting from lambda = 1"));
                    1.0
                }
            }
        })
        .collect()
}

/// Sorted random subset of `limit` day indices out of `n` (all days when
/// `n <= limit`).
pub fn day_subsample(n: usize, limit: usize, seed: u64, which: u64) -> Vec<usize> {
    if n <= limit {
        return (0..n).collect();
    }
    let mut rng = stream(seed, STREAM_DAY_SUBSAMPLE, which);
    let mut idx = rand::seq::index::sample(&mut rng, n, limit).into_vec();
    idx.sort_unstable();
    idx
}

/// `knn_kl(estimate, truth)` with one point per day.
pub fn kl_between(estimate: &SpatioTemporalField, truth: &SpatioTemporalField, k: Option<usize>) -> Result<KlEstimate> {
    let a = SampleCloud::from_field(estimate, CloudLabel::Simulation);
    let b = SampleCloud::from_field(truth, CloudLabel::Observation);
    knn_kl(&a, &b, k.unwrap_or_else(|| default_k(a.len())))
}

/// Site subsampling for the ratio experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsampleConfig {
    pub n_subsamples: usize,
    pub n_sites: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: Method,
    pub kl: f64,
    /// `kl` divided by the baseline method's `kl`.
    pub ratio: f64,
    pub clamped: usize,
    pub subsample_ratios: Vec<f64>,
}

/// Fits every method on the period before `split`, adjusts the simulation
/// after it and scores each estimate against the held-out observations.
///
/// The baseline is MV when requested, otherwise the first method.
pub fn kl_ratio_experiment(
    obs: &SpatioTemporalField,
    sim: &SpatioTemporalField,
    split: chrono::NaiveDate,
    methods: &[Method],
    config: &PlanConfig,
    subsample: Option<SubsampleConfig>,
) -> Result<Vec<MethodScore>> {
    if methods.is_empty() {
        return Err(Error::InvalidInput("no methods requested".into()));
    }
    let (obs_train, obs_test) = obs.split_by_date(split)?;
    let (sim_train, sim_test) = sim.split_by_date(split)?;
    let mut hist = Historical::new(obs_train, sim_train, config.clone())?;
    let clusters = if methods.contains(&Method::TC) || subsample.is_some() { Some(hist.clusters()?) } else { None };
    let mut adjusted = Vec::with_capacity(methods.len());
    for &m in methods {
        let plan = hist.fit_plan(m, clusters.as_ref())?;
        adjusted.push(plan.adjust(&sim_test)?);
    }
    let kls: Vec<f64> =
        adjusted.iter().map(|a| kl_between(&a.field, &obs_test, None).map(|e| e.value)).collect::<Result<_>>()?;
    let base = methods.iter().position(|&m| m == Method::MV).unwrap_or(0);
    let mut sub_kls: Vec<Vec<f64>> = vec![Vec::new(); methods.len()];
    if let (Some(cfg), Some(c)) = (subsample, clusters.as_ref()) {
        let fraction = (cfg.n_sites as f64 / obs.n_sites() as f64).min(1.0);
        for draw in 0..cfg.n_subsamples {
            let ids = stratified_subsample(c, fraction, config.seed, draw as u64)?;
            let truth = obs_test.subsample_sites(&ids)?;
            for (j, a) in adjusted.iter().enumerate() {
                sub_kls[j].push(kl_between(&a.field.subsample_sites(&ids)?, &truth, None)?.value);
            }
        }
    }
    Ok(methods
        .iter()
        .enumerate()
        .map(|(j, &method)| MethodScore {
            method,
            kl: kls[j],
            ratio: kls[j] / kls[base],
            clamped: adjusted[j].clamped,
            subsample_ratios: sub_kls[j].iter().zip(&sub_kls[base]).map(|(a, b)| a / b).collect(),
        })
        .collect())
}
