//! Per-site mean model (intercept, linear annual trend, `K` annual
//! harmonics) and autoregressive residual model.
//!
//! The wind speed at site `i` on day `t` is modelled as
//! `W = mu(t) + e(t)` with
//! `mu(t) = c + omega * yr(t) + sum_k [beta_k sin(2 pi k t / delta) + beta'_k cos(2 pi k t / delta)]`
//! and `e(t) = sum_p phi_p e(t - p) + eps(t)`. Here `t` is the zero-based
//! day of the year, `delta` the length of that year and `yr(t)` the calendar
//! year relative to the first fitted year.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::field::{Calendar, SpatioTemporalField};
use crate::linalg::{least_squares, Matrix};
use crate::{stats, Error, Result};

/// How the trend term is evaluated on days after the last fitted year.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum YearTerm {
    /// `yr(t)` is capped at the last training year.
    #[default]
    Frozen,
    /// The linear trend continues beyond the training period.
    Extrapolated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteMean {
    pub intercept: f64,
    /// Trend slope per year; zero when the trend is disabled.
    pub omega: f64,
    /// Standard error of `omega` (zero when the trend is disabled).
    pub omega_se: f64,
    pub beta: Vec<f64>,
    pub beta_prime: Vec<f64>,
}

impl SiteMean {
    /// Amplitude `sqrt(beta_k^2 + beta'_k^2)` of each harmonic.
    pub fn harmonic_amplitudes(&self) -> Vec<f64> {
        self.beta.iter().zip(&self.beta_prime).map(|(b, c)| (b * b + c * c).sqrt()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClimatologyFit {
    pub k: usize,
    pub with_trend: bool,
    /// Calendar year mapped to `yr = 0`.
    pub ref_year: i32,
    /// Last calendar year of the training data.
    pub last_year: i32,
    pub sites: Vec<SiteMean>,
}

impl ClimatologyFit {
    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    /// `mu` at `site` on day `t` of `calendar`.
    pub fn mean_at(&self, site: usize, calendar: &Calendar, t: usize, year_term: YearTerm) -> f64 {
        let m = &self.sites[site];
        let mut year = calendar.year_of_day(t);
        if year_term == YearTerm::Frozen {
            year = year.min(self.last_year);
        }
        let mut mu = m.intercept + m.omega * f64::from(year - self.ref_year);
        let angle = 2.0 * PI * f64::from(calendar.day_of_year(t)) / f64::from(calendar.period_of_year(t));
        for k in 0..self.k {
            let a = (k + 1) as f64 * angle;
            mu += m.beta[k] * a.sin() + m.beta_prime[k] * a.cos();
        }
        mu
    }

    /// Site-major `mu` values over `calendar`.
    pub fn evaluate(&self, calendar: &Calendar, year_term: YearTerm) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_sites() * calendar.len());
        for i in 0..self.n_sites() {
            out.extend((0..calendar.len()).map(|t| self.mean_at(i, calendar, t, year_term)));
        }
        out
    }

    /// Mean-model residuals `e = W - mu`.
    pub fn residuals(&self, field: &SpatioTemporalField, year_term: YearTerm) -> Result<SpatioTemporalField> {
        self.check_sites(field.n_sites())?;
        let mu = self.evaluate(field.calendar(), year_term);
        field.with_values(field.values().iter().zip(&mu).map(|(w, m)| w - m).collect())
    }

    fn check_sites(&self, n: usize) -> Result<()> {
        if n != self.n_sites() {
            return Err(Error::Shape(format!("mean fit has {} sites, field has {n}", self.n_sites())));
        }
        Ok(())
    }
}

fn design_row(calendar: &Calendar, t: usize, k: usize, with_trend: bool, ref_year: i32, row: &mut Vec<f64>) {
    row.clear();
    row.push(1.0);
    if with_trend {
        row.push(f64::from(calendar.year_of_day(t) - ref_year));
    }
    let angle = 2.0 * PI * f64::from(calendar.day_of_year(t)) / f64::from(calendar.period_of_year(t));
    for h in 1..=k {
        let a = h as f64 * angle;
        row.push(a.sin());
        row.push(a.cos());
    }
}

/// Design matrix of the mean model over `calendar`.
pub fn design_matrix(calendar: &Calendar, k: usize, with_trend: bool) -> Matrix {
    let p = 1 + usize::from(with_trend) + 2 * k;
    let ref_year = calendar.year_of_day(0);
    let mut data = Vec::with_capacity(calendar.len() * p);
    let mut row = Vec::with_capacity(p);
    for t in 0..calendar.len() {
        design_row(calendar, t, k, with_trend, ref_year, &mut row);
        data.extend_from_slice(&row);
    }
    Matrix::from_row_major(calendar.len(), p, data)
}

/// Ordinary least squares fit of one site's series against `design`.
pub fn fit_mean_site(design: &Matrix, series: &[f64], k: usize, with_trend: bool, site_id: u32) -> Result<SiteMean> {
    let coef = least_squares(design, series).ok_or(Error::RankDeficient { site: site_id })?;
    let off = 1 + usize::from(with_trend);
    let beta = (0..k).map(|h| coef[off + 2 * h]).collect();
    let beta_prime = (0..k).map(|h| coef[off + 2 * h + 1]).collect();
    let (omega, omega_se) = if with_trend { (coef[1], trend_se(design, series, &coef)) } else { (0.0, 0.0) };
    Ok(SiteMean { intercept: coef[0], omega, omega_se, beta, beta_prime })
}

/// `se(omega) = s / ||r||` where `r` is the trend column after projecting
/// out the remaining regressors.
fn trend_se(design: &Matrix, series: &[f64], coef: &[f64]) -> f64 {
    let (n, p) = (design.rows(), design.cols());
    let rss: f64 = (0..n)
        .map(|i| {
            let fitted: f64 = design.row(i).iter().zip(coef).map(|(x, b)| x * b).sum();
            (series[i] - fitted).powi(2)
        })
        .sum();
    if n <= p {
        return f64::NAN;
    }
    let s2 = rss / (n - p) as f64;
    let others = Matrix::from_fn(n, p - 1, |i, j| design[(i, if j == 0 { 0 } else { j + 1 })]);
    let trend: Vec<f64> = (0..n).map(|i| design[(i, 1)]).collect();
    match least_squares(&others, &trend) {
        Some(g) => {
            let r2: f64 = (0..n)
                .map(|i| {
                    let fitted: f64 = others.row(i).iter().zip(&g).map(|(x, b)| x * b).sum();
                    (trend[i] - fitted).powi(2)
                })
                .sum();
            (s2 / r2).sqrt()
        }
        None => f64::NAN,
    }
}

fn check_mean_preconditions(calendar: &Calendar, k: usize) -> Result<()> {
    if calendar.len() <= 2 * k + 2 {
        return Err(Error::InsufficientData(format!(
            "{} days cannot support {k} harmonics (need more than {})",
            calendar.len(),
            2 * k + 2
        )));
    }
    Ok(())
}

/// Fits the mean model independently at every site.
pub fn fit_mean(field: &SpatioTemporalField, k: usize, with_trend: bool) -> Result<ClimatologyFit> {
    let design = prepare_mean_fit(field, k, with_trend)?;
    let sites = field
        .sites()
        .iter()
        .enumerate()
        .map(|(i, s)| fit_mean_site(&design, field.series(i), k, with_trend, s.id))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble_mean_fit(field, k, with_trend, sites))
}

/// Validates the request and returns the shared design matrix, so callers
/// can fit sites in parallel with [`fit_mean_site`].
pub fn prepare_mean_fit(field: &SpatioTemporalField, k: usize, with_trend: bool) -> Result<Matrix> {
    check_mean_preconditions(field.calendar(), k)?;
    Ok(design_matrix(field.calendar(), k, with_trend))
}

pub fn assemble_mean_fit(field: &SpatioTemporalField, k: usize, with_trend: bool, sites: Vec<SiteMean>) -> ClimatologyFit {
    let cal = field.calendar();
    ClimatologyFit {
        k,
        with_trend,
        ref_year: cal.year_of_day(0),
        last_year: cal.year_of_day(cal.len() - 1),
        sites,
    }
}

/// Autoregressive coefficients and innovation scale of one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteAr {
    pub phi: Vec<f64>,
    pub innovation_sd: f64,
}

impl SiteAr {
    /// Partial autocorrelations obtained by stepping the AR polynomial down
    /// (inverse Durbin-Levinson). Entry `j` is the lag `j + 1` value.
    pub fn partial_autocorrelations(&self) -> Option<Vec<f64>> {
        let mut a = self.phi.clone();
        let mut kappa = vec![0.0; a.len()];
        for p in (0..a.len()).rev() {
            let k = a[p];
            if !(k.abs() < 1.0) {
                return None;
            }
            kappa[p] = k;
            let denom = 1.0 - k * k;
            let prev: Vec<f64> = (0..p).map(|j| (a[j] + k * a[p - 1 - j]) / denom).collect();
            a.truncate(p);
            a.copy_from_slice(&prev);
        }
        Some(kappa)
    }

    /// True when every root of the AR polynomial lies outside the unit circle.
    pub fn is_stationary(&self) -> bool {
        self.partial_autocorrelations().is_some()
    }

    /// Stationary standard deviation of `e`.
    pub fn marginal_sd(&self) -> f64 {
        let kappa = self.partial_autocorrelations().unwrap_or_default();
        let prod: f64 = kappa.iter().map(|k| 1.0 - k * k).product();
        self.innovation_sd / prod.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArFit {
    pub p: usize,
    pub sites: Vec<SiteAr>,
}

impl ArFit {
    /// AR(0) with the given per-site scales.
    pub fn white(innovation_sd: &[f64]) -> Self {
        Self { p: 0, sites: innovation_sd.iter().map(|&s| SiteAr { phi: Vec::new(), innovation_sd: s }).collect() }
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn marginal_sds(&self) -> Vec<f64> {
        self.sites.iter().map(SiteAr::marginal_sd).collect()
    }
}

/// Conditional maximum likelihood AR(`p`) fit of one series (regression of
/// `e_t` on its `p` lags, no intercept, conditioning on the first `p` values).
///
/// For `p = 0` the innovation scale is the sample standard deviation.
pub fn fit_ar_site(series: &[f64], p: usize, site_id: u32) -> Result<SiteAr> {
    let n = series.len();
    if n <= 10 * p || n < 2 {
        return Err(Error::InsufficientData(format!("site {site_id}: {n} days for AR({p}) (need more than {})", 10 * p)));
    }
    if p == 0 {
        return Ok(SiteAr { phi: Vec::new(), innovation_sd: stats::std_dev(series) });
    }
    // Residuals of an exactly fitted mean carry no dependence to estimate.
    if series.iter().all(|v| v.abs() <= 1e-12) {
        return Ok(SiteAr { phi: vec![0.0; p], innovation_sd: 0.0 });
    }
    let rows = n - p;
    let x = Matrix::from_fn(rows, p, |r, j| series[r + p - 1 - j]);
    let y = &series[p..];
    let phi = least_squares(&x, y).ok_or(Error::RankDeficient { site: site_id })?;
    let rss: f64 = (0..rows)
        .map(|r| {
            let pred: f64 = x.row(r).iter().zip(&phi).map(|(a, b)| a * b).sum();
            (y[r] - pred).powi(2)
        })
        .sum();
    let ar = SiteAr { phi, innovation_sd: (rss / rows as f64).sqrt() };
    if !ar.is_stationary() {
        return Err(Error::NonstationaryAr { site: site_id });
    }
    Ok(ar)
}

/// Fits AR(`p`) at every site of a mean-residual field.
pub fn fit_ar(residuals: &SpatioTemporalField, p: usize) -> Result<ArFit> {
    let sites = residuals
        .sites()
        .iter()
        .enumerate()
        .map(|(i, s)| fit_ar_site(residuals.series(i), p, s.id))
        .collect::<Result<Vec<_>>>()?;
    Ok(ArFit { p, sites })
}

/// Innovations `eps_t = e_t - sum_p phi_p e_{t-p}` of one series, with lags
/// before the first day treated as zero.
pub fn filter_site(e: &[f64], phi: &[f64]) -> Vec<f64> {
    (0..e.len())
        .map(|t| {
            let carry: f64 = phi.iter().enumerate().take(t).map(|(j, f)| f * e[t - 1 - j]).sum();
            e[t] - carry
        })
        .collect()
}

/// Inverse of [`filter_site`].
pub fn unfilter_site(eps: &[f64], phi: &[f64]) -> Vec<f64> {
    let mut e: Vec<f64> = Vec::with_capacity(eps.len());
    for t in 0..eps.len() {
        let carry: f64 = phi.iter().enumerate().take(t).map(|(j, f)| f * e[t - 1 - j]).sum();
        e.push(eps[t] + carry);
    }
    e
}

fn check_fits(n: usize, mean: &ClimatologyFit, ar: &ArFit) -> Result<()> {
    mean.check_sites(n)?;
    if ar.n_sites() != n {
        return Err(Error::Shape(format!("AR fit has {} sites, field has {n}", ar.n_sites())));
    }
    Ok(())
}

/// Removes the mean and the AR carry-over, leaving innovations.
pub fn detrend(
    field: &SpatioTemporalField,
    mean: &ClimatologyFit,
    ar: &ArFit,
    year_term: YearTerm,
) -> Result<SpatioTemporalField> {
    check_fits(field.n_sites(), mean, ar)?;
    let e = mean.residuals(field, year_term)?;
    let mut values = Vec::with_capacity(field.values().len());
    for i in 0..field.n_sites() {
        values.extend(filter_site(e.series(i), &ar.sites[i].phi));
    }
    field.with_values(values)
}

/// Rebuilds wind speeds from innovations on the innovations' calendar.
pub fn reconstruct(
    innovations: &SpatioTemporalField,
    mean: &ClimatologyFit,
    ar: &ArFit,
    year_term: YearTerm,
) -> Result<SpatioTemporalField> {
    check_fits(innovations.n_sites(), mean, ar)?;
    let mu = mean.evaluate(innovations.calendar(), year_term);
    let n = innovations.n_days();
    let mut values = Vec::with_capacity(innovations.values().len());
    for i in 0..innovations.n_sites() {
        let e = unfilter_site(innovations.series(i), &ar.sites[i].phi);
        values.extend(e.iter().zip(&mu[i * n..(i + 1) * n]).map(|(e, m)| m + e));
    }
    innovations.with_values(values)
}
