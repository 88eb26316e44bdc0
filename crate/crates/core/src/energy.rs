//! Hub-height extrapolation, spatial downscaling, turbine power and revenue.
//!
//! Vertical profiles follow the power law
//! `W(h) = W(h_r) (h / h_r)^alpha exp(eta)` with `eta ~ N(0, sigma2)`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::covariance::{distance, matern_corr, Distance, MaternParams};
use crate::field::{Site, SpatioTemporalField};
use crate::linalg::{Lu, Matrix};
use crate::rng::{stream, STREAM_EXTRAPOLATION};
use crate::{stats, Error, Result};

/// Height of the surface winds (m).
pub const REFERENCE_HEIGHT: f64 = 10.0;
/// Shear coefficient used when no profile data are available.
pub const DEFAULT_ALPHA: f64 = 1.0 / 7.0;
pub const HOURS_PER_DAY: f64 = 24.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteShear {
    pub site_id: u32,
    pub alpha: f64,
    pub sigma2: f64,
    pub r2: f64,
    pub alpha_se: f64,
    /// Profile points used in the regression.
    pub n_used: usize,
    /// Profile points dropped for non-positive speed.
    pub n_excluded: usize,
    /// Negative shear with a poor fit.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShearFit {
    pub reference_height: f64,
    pub sites: Vec<SiteShear>,
}

impl ShearFit {
    /// The same deterministic coefficient at every site.
    pub fn constant(site_ids: impl IntoIterator<Item = u32>, alpha: f64) -> Self {
        let sites = site_ids
            .into_iter()
            .map(|site_id| SiteShear {
                site_id,
                alpha,
                sigma2: 0.0,
                r2: 1.0,
                alpha_se: 0.0,
                n_used: 0,
                n_excluded: 0,
                flagged: false,
            })
            .collect();
        Self { reference_height: REFERENCE_HEIGHT, sites }
    }

    pub fn for_site(&self, site_id: u32) -> Option<&SiteShear> {
        self.sites.iter().find(|s| s.site_id == site_id)
    }
}

/// One measurement of a vertical profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub day: usize,
    pub height: f64,
    pub speed: f64,
}

/// Log regression of the speed ratio to the reference height on
/// `log(h / h_r)` without intercept, pooled over days.
///
/// Each day contributes the heights other than `h_r` at which both that
/// height and `h_r` have a positive speed.
pub fn fit_shear_site(site_id: u32, points: &[ProfilePoint], reference_height: f64) -> Result<SiteShear> {
    let n_excluded = points.iter().filter(|p| !(p.speed > 0.0)).count();
    let valid: Vec<&ProfilePoint> = points.iter().filter(|p| p.speed > 0.0 && p.height > 0.0).collect();
    let mut heights: Vec<f64> = valid.iter().map(|p| p.height).collect();
    heights.sort_by(|a, b| a.total_cmp(b));
    heights.dedup();
    if heights.len() < 2 || !heights.iter().any(|&h| h == reference_height) {
        return Err(Error::InsufficientData(format!(
            "site {site_id}: need the reference height and at least one other valid height"
        )));
    }
    let mut days: Vec<usize> = valid.iter().map(|p| p.day).collect();
    days.sort_unstable();
    days.dedup();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &d in &days {
        let day: Vec<&&ProfilePoint> = valid.iter().filter(|p| p.day == d).collect();
        let Some(r) = day.iter().find(|p| p.height == reference_height) else { continue };
        for p in day.iter().filter(|p| p.height != reference_height) {
            xs.push((p.height / reference_height).ln());
            ys.push((p.speed / r.speed).ln());
        }
    }
    let n_days = days.len();
    if n_days < 30 {
        return Err(Error::InsufficientData(format!("site {site_id}: {n_days} profile days (need 30)")));
    }
    if xs.len() < 2 {
        return Err(Error::InsufficientData(format!("site {site_id}: no usable height pairs")));
    }
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
    let alpha = sxy / sxx;
    let rss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - alpha * x).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| y * y).sum();
    let sigma2 = rss / (xs.len() - 1) as f64;
    let r2 = if syy > 0.0 { (1.0 - rss / syy).clamp(0.0, 1.0) } else { 1.0 };
    Ok(SiteShear {
        site_id,
        alpha,
        sigma2,
        r2,
        alpha_se: (sigma2 / sxx).sqrt(),
        n_used: xs.len() + n_days,
        n_excluded,
        flagged: alpha < 0.0 && r2 < 0.2,
    })
}

/// Fits every site; `profiles` pairs a site id with its measurements.
pub fn fit_shear(profiles: &[(u32, Vec<ProfilePoint>)], reference_height: f64) -> Result<ShearFit> {
    let sites = profiles.iter().map(|(id, pts)| fit_shear_site(*id, pts, reference_height)).collect::<Result<_>>()?;
    Ok(ShearFit { reference_height, sites })
}

/// Draw `draw` of the Monte Carlo extrapolation to per-site target
/// heights. `alpha ~ N(alpha_hat, alpha_se^2)` per site and
/// `eta ~ N(0, sigma2)` per site and day.
pub fn extrapolate_draw(
    surface: &SpatioTemporalField,
    shear: &ShearFit,
    target_heights: &[f64],
    seed: u64,
    draw: u64,
) -> Result<SpatioTemporalField> {
    let n = surface.n_sites();
    if target_heights.len() != n {
        return Err(Error::Shape(format!("{} target heights for {n} sites", target_heights.len())));
    }
    if let Some(h) = target_heights.iter().find(|&&h| !(h > shear.reference_height)) {
        return Err(Error::InvalidInput(format!(
            "target height {h} m must exceed the reference height {} m",
            shear.reference_height
        )));
    }
    let params: Vec<&SiteShear> = surface
        .sites()
        .iter()
        .map(|s| shear.for_site(s.id).ok_or(Error::UnknownSite(s.id)))
        .collect::<Result<_>>()?;
    let mut rng = stream(seed, STREAM_EXTRAPOLATION, draw);
    let t = surface.n_days();
    let mut values = Vec::with_capacity(n * t);
    for i in 0..n {
        let p = params[i];
        let z: f64 = rng.sample(StandardNormal);
        let alpha = p.alpha + p.alpha_se * z;
        let ratio = (target_heights[i] / shear.reference_height).powf(alpha);
        let sd = p.sigma2.sqrt();
        for &w in surface.series(i) {
            let eta = if sd > 0.0 { sd * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
            values.push(w * ratio * eta.exp());
        }
    }
    surface.with_values(values)
}

/// `n_draws` extrapolations to a common target height.
pub fn extrapolate(
    surface: &SpatioTemporalField,
    shear: &ShearFit,
    target_height: f64,
    n_draws: usize,
    seed: u64,
) -> Result<Vec<SpatioTemporalField>> {
    if n_draws == 0 {
        return Err(Error::InvalidInput("at least one draw is required".into()));
    }
    let heights = vec![target_height; surface.n_sites()];
    (0..n_draws as u64).map(|d| extrapolate_draw(surface, shear, &heights, seed, d)).collect()
}

/// Ordinary-kriging weights from coarse to fine sites.
#[derive(Debug, Clone, PartialEq)]
pub struct KrigingWeights {
    /// `n_fine x n_coarse`; rows sum to one.
    pub weights: Matrix,
    pub variances: Vec<f64>,
}

fn kriging_cov(h: f64, p: &MaternParams) -> f64 {
    if h == 0.0 {
        p.sigma2
    } else {
        p.sigma2 * (1.0 - p.nugget) * matern_corr(h, p)
    }
}

impl KrigingWeights {
    pub fn new(coarse: &[Site], fine: &[Site], variogram: &MaternParams, metric: Distance) -> Result<Self> {
        variogram.validate()?;
        let n = coarse.len();
        if n < 3 {
            return Err(Error::InsufficientData(format!("kriging needs at least 3 coarse sites, got {n}")));
        }
        let mut a = Matrix::zeros(n + 1, n + 1);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] = kriging_cov(distance(&coarse[i], &coarse[j], metric), variogram);
            }
            a[(i, n)] = 1.0;
            a[(n, i)] = 1.0;
        }
        let lu = Lu::new(&a)?;
        let mut weights = Matrix::zeros(fine.len(), n);
        let mut variances = Vec::with_capacity(fine.len());
        for (f, s) in fine.iter().enumerate() {
            let mut rhs: Vec<f64> = coarse.iter().map(|c| kriging_cov(distance(c, s, metric), variogram)).collect();
            rhs.push(1.0);
            let sol = lu.solve(&rhs);
            for j in 0..n {
                weights[(f, j)] = sol[j];
            }
            let explained: f64 = sol[..n].iter().zip(&rhs[..n]).map(|(w, c)| w * c).sum();
            variances.push((variogram.sigma2 - explained - sol[n]).max(0.0));
        }
        Ok(Self { weights, variances })
    }

    pub fn apply(&self, coarse_values: &[f64]) -> Vec<f64> {
        self.weights.mul_vec(coarse_values)
    }
}

/// Kriging prediction of one day of coarse values at `fine` sites.
pub fn krige_downscale(
    coarse_values: &[f64],
    coarse: &[Site],
    fine: &[Site],
    variogram: &MaternParams,
    metric: Distance,
) -> Result<Vec<f64>> {
    if coarse_values.len() != coarse.len() {
        return Err(Error::Shape(format!("{} values for {} coarse sites", coarse_values.len(), coarse.len())));
    }
    Ok(KrigingWeights::new(coarse, fine, variogram, metric)?.apply(coarse_values))
}

/// Kriges every day of `coarse` onto `fine` (ids renumbered from zero).
pub fn krige_field(
    coarse: &SpatioTemporalField,
    fine: &[Site],
    variogram: &MaternParams,
    metric: Distance,
) -> Result<SpatioTemporalField> {
    let w = KrigingWeights::new(coarse.sites(), fine, variogram, metric)?;
    let t = coarse.n_days();
    let mut values = vec![0.0; fine.len() * t];
    for d in 0..t {
        for (i, v) in w.apply(&coarse.day_vector(d)).into_iter().enumerate() {
            values[i * t + d] = v;
        }
    }
    let sites = fine.iter().enumerate().map(|(i, s)| Site::new(i as u32, s.lon, s.lat)).collect();
    SpatioTemporalField::new(sites, *coarse.calendar(), values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerCurve {
    pub turbine: String,
    pub hub_height: f64,
    pub rotor_diameter: f64,
    /// kW.
    pub rated_power: f64,
    pub cut_in: f64,
    pub rated_speed: f64,
    pub cut_out: f64,
    /// Optional `(speed, kW)` points used between cut-in and rated speed.
    pub table: Vec<(f64, f64)>,
}

impl PowerCurve {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("power curve {}: {m}", self.turbine)));
        if !(0.0 < self.cut_in && self.cut_in < self.rated_speed && self.rated_speed < self.cut_out) {
            return bad("need 0 < cut_in < rated_speed < cut_out");
        }
        if !(self.rated_power > 0.0 && self.hub_height > 0.0 && self.rotor_diameter > 0.0) {
            return bad("rated power, hub height and rotor diameter must be positive");
        }
        let mut prev = (self.cut_in, 0.0);
        for &(v, p) in &self.table {
            if !(v >= prev.0) || !(p >= prev.1) || p > self.rated_power || v > self.rated_speed {
                return bad("table must be nondecreasing within [cut_in, rated_speed] and at most rated power");
            }
            prev = (v, p);
        }
        Ok(())
    }

    /// Interpolation knots from cut-in (0 kW) to rated speed (rated kW).
    fn knots(&self) -> Vec<(f64, f64)> {
        let mut k = vec![(self.cut_in, 0.0)];
        k.extend(self.table.iter().copied().filter(|&(v, _)| v > self.cut_in && v < self.rated_speed));
        k.push((self.rated_speed, self.rated_power));
        k
    }

    /// Power in kW at hub-height speed `v`.
    pub fn power(&self, v: f64) -> f64 {
        if v < self.cut_in || v > self.cut_out {
            return 0.0;
        }
        if v >= self.rated_speed {
            return self.rated_power;
        }
        if self.table.is_empty() {
            let ci3 = self.cut_in.powi(3);
            return self.rated_power * (v.powi(3) - ci3) / (self.rated_speed.powi(3) - ci3);
        }
        let k = self.knots();
        let j = k.partition_point(|&(s, _)| s <= v).clamp(1, k.len() - 1);
        let (a, b) = (k[j - 1], k[j]);
        if b.0 == a.0 {
            b.1
        } else {
            a.1 + (b.1 - a.1) * (v - a.0) / (b.0 - a.0)
        }
    }

    /// Turbines fitting in `area_km2` on a square grid of five rotor
    /// diameters.
    pub fn max_turbines(&self, area_km2: f64) -> u64 {
        let spacing_km = 5.0 * self.rotor_diameter / 1000.0;
        (area_km2 / (spacing_km * spacing_km)).floor() as u64
    }
}

pub fn power_output(speed: f64, curve: &PowerCurve) -> Result<f64> {
    if !(speed >= 0.0) {
        return Err(Error::InvalidInput(format!("wind speed {speed} must be non-negative")));
    }
    curve.validate()?;
    Ok(curve.power(speed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FarmSite {
    pub site_id: u32,
    pub turbine: String,
    pub count: u32,
    /// Currency per kWh.
    pub tariff: f64,
}

impl FarmSite {
    /// Checks the count and, when `area_km2` is given, the spacing rule.
    pub fn validate(&self, curve: &PowerCurve, area_km2: Option<f64>) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidInput(format!("farm at site {} has no turbines", self.site_id)));
        }
        if !(self.tariff >= 0.0) {
            return Err(Error::InvalidInput(format!("farm at site {} has a negative tariff", self.site_id)));
        }
        if let Some(a) = area_km2 {
            let max = curve.max_turbines(a);
            if u64::from(self.count) > max {
                return Err(Error::InvalidInput(format!(
                    "farm at site {}: {} turbines exceed the {max} allowed by five-diameter spacing",
                    self.site_id, self.count
                )));
            }
        }
        Ok(())
    }
}

/// Revenue of one day at hub-height speed `v`.
pub fn daily_revenue(v: f64, curve: &PowerCurve, count: u32, tariff: f64) -> f64 {
    curve.power(v) * HOURS_PER_DAY * f64::from(count) * tariff
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteDelta {
    pub site_id: u32,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevenueDelta {
    pub sites: Vec<SiteDelta>,
    pub total_mean: f64,
    pub total_sd: f64,
    pub n_draws: usize,
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let m = stats::mean(x);
    let sd = if x.len() > 1 { stats::std_dev(x) } else { 0.0 };
    (m, sd)
}

/// Per-draw revenue change `mean_future - mean_hist` (currency per day) at
/// every farm site.
pub fn revenue_delta_draw(
    hist: &SpatioTemporalField,
    future: &SpatioTemporalField,
    farm: &[FarmSite],
    curves: &[PowerCurve],
) -> Result<Vec<f64>> {
    if hist.sites() != future.sites() {
        return Err(Error::Shape("historical and future ensembles have different sites".into()));
    }
    farm.iter()
        .map(|f| {
            let curve = curves
                .iter()
                .find(|c| c.turbine == f.turbine)
                .ok_or_else(|| Error::InvalidInput(format!("unknown turbine {}", f.turbine)))?;
            let i = hist.sites().iter().position(|s| s.id == f.site_id).ok_or(Error::UnknownSite(f.site_id))?;
            let avg = |x: &[f64]| x.iter().map(|&v| daily_revenue(v, curve, f.count, f.tariff)).sum::<f64>() / x.len() as f64;
            Ok(avg(future.series(i)) - avg(hist.series(i)))
        })
        .collect()
}

/// Combines per-draw deltas into mean and standard deviation over draws.
pub fn summarize_deltas(farm: &[FarmSite], per_draw: &[Vec<f64>]) -> RevenueDelta {
    let sites = farm
        .iter()
        .enumerate()
        .map(|(j, f)| {
            let x: Vec<f64> = per_draw.iter().map(|d| d[j]).collect();
            let (mean, sd) = mean_sd(&x);
            SiteDelta { site_id: f.site_id, mean, sd }
        })
        .collect();
    let totals: Vec<f64> = per_draw.iter().map(|d| d.iter().sum()).collect();
    let (total_mean, total_sd) = mean_sd(&totals);
    RevenueDelta { sites, total_mean, total_sd, n_draws: per_draw.len() }
}

pub fn revenue_delta(
    hist: &[SpatioTemporalField],
    future: &[SpatioTemporalField],
    farm: &[FarmSite],
    curves: &[PowerCurve],
) -> Result<RevenueDelta> {
    if hist.len() != future.len() || hist.is_empty() {
        return Err(Error::Shape(format!("{} historical vs {} future draws", hist.len(), future.len())));
    }
    for f in farm {
        let c = curves
            .iter()
            .find(|c| c.turbine == f.turbine)
            .ok_or_else(|| Error::InvalidInput(format!("unknown turbine {}", f.turbine)))?;
        c.validate()?;
        f.validate(c, None)?;
    }
    let per_draw = hist.iter().zip(future).map(|(h, f)| revenue_delta_draw(h, f, farm, curves)).collect::<Result<Vec<_>>>()?;
    Ok(summarize_deltas(farm, &per_draw))
}
