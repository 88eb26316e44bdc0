//! Run configuration: one strict JSON document with a block per command.
//!
//! Relative paths are resolved against the directory holding the config
//! file. Command-line flags override `seed`, `threads` and `mode`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use windadj_core::adjustment::{CovChoice, Method, Mode, PlanConfig, SearchConfig};
use windadj_core::climatology::YearTerm;
use windadj_core::covariance::Distance;
use windadj_core::simgen::{study_plan_config, GlgConfig, SkewTConfig, ValidationConfig};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub threads: Option<usize>,
    /// Operator form; `validate` defaults to anomaly, everything else to
    /// as-written.
    #[serde(default)]
    pub mode: Option<Mode>,
    #[serde(default)]
    pub fit: Option<FitSection>,
    #[serde(default)]
    pub adjust: Option<AdjustSection>,
    #[serde(default)]
    pub validate: Option<ValidateSection>,
    #[serde(default)]
    pub kl: Option<KlSection>,
    #[serde(default)]
    pub energy: Option<EnergySection>,
}

/// Model settings shared by `fit` and `adjust`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub k_harmonics: usize,
    pub with_trend: bool,
    pub ar_order: usize,
    pub year_term: YearTerm,
    pub metric: Distance,
    pub transform_cov: CovChoice,
    pub n_clusters: usize,
    pub cluster_weights: [f64; 3],
    pub search: SearchConfig,
    pub clamp_negative: bool,
}

impl From<PlanConfig> for ModelSettings {
    fn from(p: PlanConfig) -> Self {
        Self {
            k_harmonics: p.k_harmonics,
            with_trend: p.with_trend,
            ar_order: p.ar_order,
            year_term: p.year_term,
            metric: p.metric,
            transform_cov: p.transform_cov,
            n_clusters: p.n_clusters,
            cluster_weights: p.cluster_weights,
            search: p.search,
            clamp_negative: p.clamp_negative,
        }
    }
}

impl Default for ModelSettings {
    fn default() -> Self {
        PlanConfig::default().into()
    }
}

impl ModelSettings {
    pub fn plan(&self, mode: Mode, seed: u64) -> PlanConfig {
        PlanConfig {
            mode,
            k_harmonics: self.k_harmonics,
            with_trend: self.with_trend,
            ar_order: self.ar_order,
            year_term: self.year_term,
            metric: self.metric,
            transform_cov: self.transform_cov,
            n_clusters: self.n_clusters,
            cluster_weights: self.cluster_weights,
            search: self.search.clone(),
            clamp_negative: self.clamp_negative,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub obs: PathBuf,
    #[serde(default)]
    pub sim: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Spatial model fitted to the standardized innovations; `null` skips it.
    #[serde(default = "default_fit_cov")]
    pub covariance: Option<CovChoice>,
    #[serde(default)]
    pub model: ModelSettings,
}

fn default_fit_cov() -> Option<CovChoice> {
    Some(CovChoice::Matern)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdjustSection {
    pub obs_hist: PathBuf,
    pub sim_hist: PathBuf,
    pub sim_future: PathBuf,
    pub method: Method,
    /// `site_id,cluster_id` file, as written by `fit`; required by TC.
    #[serde(default)]
    pub clusters: Option<PathBuf>,
    pub output: PathBuf,
    pub report: PathBuf,
    /// Observations over the future period; enables the report's divergence.
    #[serde(default)]
    pub holdout_obs: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateSection {
    pub output: PathBuf,
    /// JSON summary with medians and failures; defaults to `output` with a
    /// `.json` extension.
    #[serde(default)]
    pub summary: Option<PathBuf>,
    #[serde(default)]
    pub skewt: SkewTConfig,
    #[serde(default)]
    pub glg: GlgConfig,
    #[serde(default = "d_regions_x")]
    pub regions_x: usize,
    #[serde(default = "d_regions_y")]
    pub regions_y: usize,
    #[serde(default = "d_per_side")]
    pub per_side: usize,
    #[serde(default = "d_n_sims")]
    pub n_sims: usize,
    #[serde(default = "d_n_replicates")]
    pub n_replicates: usize,
    #[serde(default = "d_n_historical")]
    pub n_historical: usize,
    #[serde(default = "d_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "d_study_model")]
    pub model: ModelSettings,
}

fn d_regions_x() -> usize {
    ValidationConfig::default().regions_x
}
fn d_regions_y() -> usize {
    ValidationConfig::default().regions_y
}
fn d_per_side() -> usize {
    ValidationConfig::default().per_side
}
fn d_n_sims() -> usize {
    ValidationConfig::default().n_sims
}
fn d_n_replicates() -> usize {
    ValidationConfig::default().n_replicates
}
fn d_n_historical() -> usize {
    ValidationConfig::default().n_historical
}
fn d_methods() -> Vec<Method> {
    ValidationConfig::default().methods
}
fn d_study_model() -> ModelSettings {
    study_plan_config().into()
}

impl ValidateSection {
    pub fn study_config(&self, mode: Mode, seed: u64) -> ValidationConfig {
        ValidationConfig {
            skewt: self.skewt,
            glg: self.glg,
            regions_x: self.regions_x,
            regions_y: self.regions_y,
            per_side: self.per_side,
            n_sims: self.n_sims,
            n_replicates: self.n_replicates,
            n_historical: self.n_historical,
            methods: self.methods.clone(),
            plan: self.model.plan(mode, seed),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KlSection {
    /// First argument of the divergence (one point per day).
    pub estimate: PathBuf,
    pub truth: PathBuf,
    #[serde(default)]
    pub k: Option<usize>,
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShearSection {
    /// Same exponent at every site (no uncertainty).
    #[serde(default)]
    pub alpha: Option<f64>,
    /// `site_id,date,height_m,speed_mps` profiles for per-site fits.
    #[serde(default)]
    pub profiles: Option<PathBuf>,
    #[serde(default = "d_reference_height")]
    pub reference_height: f64,
}

fn d_reference_height() -> f64 {
    windadj_core::energy::REFERENCE_HEIGHT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergySection {
    /// Surface winds of the historical period.
    pub hist: PathBuf,
    /// Surface winds of the future period (typically adjusted).
    pub future: PathBuf,
    pub power_curves: PathBuf,
    pub farm: PathBuf,
    pub shear: ShearSection,
    #[serde(default = "d_draws")]
    pub n_draws: usize,
    /// Site area for the turbine spacing check.
    #[serde(default)]
    pub area_km2: Option<f64>,
    pub output: PathBuf,
    /// JSON report; defaults to `output` with a `.json` extension.
    #[serde(default)]
    pub report: Option<PathBuf>,
}

fn d_draws() -> usize {
    100
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn resolve_opt(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(p) = p {
        resolve(base, p);
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        if cfg.threads == Some(0) {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if let Some(f) = &mut self.fit {
            resolve(base, &mut f.obs);
            resolve_opt(base, &mut f.sim);
            resolve(base, &mut f.out_dir);
        }
        if let Some(a) = &mut self.adjust {
            for p in [&mut a.obs_hist, &mut a.sim_hist, &mut a.sim_future, &mut a.output, &mut a.report] {
                resolve(base, p);
            }
            resolve_opt(base, &mut a.clusters);
            resolve_opt(base, &mut a.holdout_obs);
        }
        if let Some(v) = &mut self.validate {
            resolve(base, &mut v.output);
            resolve_opt(base, &mut v.summary);
        }
        if let Some(k) = &mut self.kl {
            resolve(base, &mut k.estimate);
            resolve(base, &mut k.truth);
            resolve(base, &mut k.output);
        }
        if let Some(e) = &mut self.energy {
            for p in [&mut e.hist, &mut e.future, &mut e.power_curves, &mut e.farm, &mut e.output] {
                resolve(base, p);
            }
            resolve_opt(base, &mut e.shear.profiles);
            resolve_opt(base, &mut e.report);
        }
    }

    pub fn section<'a, T>(&self, s: &'a Option<T>, name: &str) -> CliResult<&'a T> {
        s.as_ref().ok_or_else(|| CliError::Config(format!("config has no \"{name}\" section")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        let e = RunConfig::parse(r#"{"schema_version": 1, "sed": 3}"#).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = RunConfig::parse(r#"{"schema_version": 1, "kl": {"estimate": "a", "truth": "b", "output": "c", "x": 1}}"#)
            .unwrap_err();
        assert!(e.to_string().contains("unknown field"));
    }

    #[test]
    fn wrong_schema_version() {
        assert!(RunConfig::parse(r#"{"schema_version": 2}"#).unwrap_err().to_string().contains("schema_version"));
    }

    #[test]
    fn paths_resolve_against_config_dir() {
        let mut c = RunConfig::parse(
            r#"{"schema_version": 1, "seed": 9, "kl": {"estimate": "a.csv", "truth": "/abs/b.csv", "output": "o.json"}}"#,
        )
        .unwrap();
        c.resolve_paths(Path::new("/cfg"));
        let k = c.kl.unwrap();
        assert_eq!(k.estimate, Path::new("/cfg/a.csv"));
        assert_eq!(k.truth, Path::new("/abs/b.csv"));
    }

    #[test]
    fn validate_defaults_follow_study() {
        let c = RunConfig::parse(r#"{"schema_version": 1, "validate": {"output": "v.csv", "n_sims": 3}}"#).unwrap();
        let v = c.validate.unwrap().study_config(Mode::Anomaly, 5);
        assert_eq!(v.n_sims, 3);
        assert_eq!(v.plan, PlanConfig { seed: 5, ..study_plan_config() });
    }
}
