//! Spatial covariance models.
//!
//! * Stationary Matérn with a nugget, fitted by Gaussian maximum likelihood
//!   over temporally independent replicates.
//! * Nonstationary kernel-convolution covariance built from `A` knots. Each
//!   knot carries a standard deviation, a range and a 2x2 anisotropy matrix;
//!   values between knots are blended with normalized Gaussian weights.
//!   Fitting uses a knot-windowed pairwise composite likelihood.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::field::{Site, SpatioTemporalField};
use crate::linalg::{cholesky_jittered, log_det_from_cholesky, solve_lower, Matrix};
use crate::optim::{nelder_mead, numerical_hessian};
use crate::{math, stats, Error, Result};

/// Mean Earth radius in km.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    /// Euclidean distance on `(lon, lat)` treated as plane coordinates.
    #[default]
    Planar,
    /// Great-circle distance in km.
    Spherical,
}

pub fn distance(a: &Site, b: &Site, metric: Distance) -> f64 {
    match metric {
        Distance::Planar => (a.lon - b.lon).hypot(a.lat - b.lat),
        Distance::Spherical => {
            let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
            let dp = p2 - p1;
            let dl = (b.lon - a.lon).to_radians();
            let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
            2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
        }
    }
}

pub fn distance_matrix(sites: &[Site], metric: Distance) -> Matrix {
    Matrix::symmetric_from_fn(sites.len(), |i, j| distance(&sites[i], &sites[j], metric))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaternParams {
    pub sigma2: f64,
    pub rho: f64,
    pub nu: f64,
    /// Fraction of `sigma2` that is spatially uncorrelated.
    pub nugget: f64,
}

impl MaternParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma2 > 0.0 && self.rho > 0.0 && self.nu > 0.0 && (0.0..1.0).contains(&self.nugget);
        if !ok || !self.sigma2.is_finite() || !self.rho.is_finite() {
            return Err(Error::InvalidInput(format!("invalid Matérn parameters {self:?}")));
        }
        Ok(())
    }

    /// Correlation matrix `(1 - nugget) C(d) + nugget I` for a distance matrix.
    pub fn correlation_from_distances(&self, dist: &Matrix) -> Matrix {
        let n = dist.rows();
        Matrix::symmetric_from_fn(n, |i, j| {
            if i == j {
                1.0
            } else {
                (1.0 - self.nugget) * matern_corr(dist[(i, j)], self)
            }
        })
    }
}

/// Matérn correlation at lag `h`. The nugget is not applied here.
pub fn matern_corr(h: f64, params: &MaternParams) -> f64 {
    math::matern(h, params.rho, params.nu)
}

/// Zero-mean replicates reduced to a root `R` with `R Rᵀ = sum_t x_t x_tᵀ`.
///
/// When there are more replicates than sites the root is the Cholesky
/// factor of the scatter matrix; otherwise the replicates themselves.
#[derive(Debug, Clone)]
pub struct Replicates {
    pub n_sites: usize,
    pub n_replicates: usize,
    columns: Vec<Vec<f64>>,
    /// Second moments `sum_t x_i x_j / T`.
    pub second_moments: Matrix,
}

impl Replicates {
    pub fn from_field(field: &SpatioTemporalField) -> Self {
        let (n, t) = (field.n_sites(), field.n_days());
        let scatter = Matrix::symmetric_from_fn(n, |i, j| {
            field.series(i).iter().zip(field.series(j)).map(|(a, b)| a * b).sum::<f64>()
        });
        let second_moments = Matrix::from_fn(n, n, |i, j| scatter[(i, j)] / t as f64);
        let columns = if t > n {
            match crate::linalg::cholesky(&scatter) {
                Ok(l) => (0..n).map(|c| (0..n).map(|r| l[(r, c)]).collect()).collect(),
                Err(_) => (0..t).map(|d| field.day_vector(d)).collect(),
            }
        } else {
            (0..t).map(|d| field.day_vector(d)).collect()
        };
        Self { n_sites: n, n_replicates: t, columns, second_moments }
    }

    /// Gaussian log-likelihood of all replicates under covariance factor `l`.
    pub fn loglik(&self, l: &Matrix) -> f64 {
        let quad: f64 = self
            .columns
            .iter()
            .map(|c| {
                let z = solve_lower(l, c);
                z.iter().map(|v| v * v).sum::<f64>()
            })
            .sum();
        let n = self.n_sites as f64;
        let t = self.n_replicates as f64;
        -0.5 * t * (n * (2.0 * core::f64::consts::PI).ln() + log_det_from_cholesky(l)) - 0.5 * quad
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuProfile {
    pub nu: f64,
    pub loglik: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaternFit {
    pub params: MaternParams,
    pub loglik: f64,
    /// Standard error of `log rho` from the observed information of
    /// `(log sigma2, log rho)`.
    pub log_rho_se: f64,
    /// Set when the nugget absorbs more than 95% of the variance.
    pub range_unidentified: bool,
    pub profile: Vec<NuProfile>,
    pub converged: bool,
}

pub const NU_GRID: [f64; 4] = [0.5, 1.0, 1.5, 2.5];

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn inv_logit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Log-likelihood of `params` for `reps` at distances `dist`
/// (`-inf` when the covariance cannot be factorized).
pub fn matern_loglik(dist: &Matrix, reps: &Replicates, params: &MaternParams) -> f64 {
    LagTable::new(dist).loglik(reps, params)
}

/// Distinct off-diagonal distances of a distance matrix, so the Matérn
/// function is evaluated once per lag.
struct LagTable {
    n: usize,
    lags: Vec<f64>,
    /// Lag index of each strictly lower-triangular entry, row by row.
    index: Vec<u32>,
}

impl LagTable {
    fn new(dist: &Matrix) -> Self {
        let n = dist.rows();
        let mut lags: Vec<f64> = (0..n).flat_map(|i| (0..i).map(move |j| (i, j))).map(|(i, j)| dist[(i, j)]).collect();
        lags.sort_by(|a, b| a.total_cmp(b));
        lags.dedup();
        let index = (0..n)
            .flat_map(|i| (0..i).map(move |j| (i, j)))
            .map(|(i, j)| lags.binary_search_by(|v| v.total_cmp(&dist[(i, j)])).expect("lag present") as u32)
            .collect();
        Self { n, lags, index }
    }

    fn loglik(&self, reps: &Replicates, params: &MaternParams) -> f64 {
        let scale = params.sigma2 * (1.0 - params.nugget);
        let values: Vec<f64> = self.lags.iter().map(|&h| scale * matern_corr(h, params)).collect();
        let mut cov = Matrix::zeros(self.n, self.n);
        let mut k = 0;
        for i in 0..self.n {
            for j in 0..i {
                let v = values[self.index[k] as usize];
                cov[(i, j)] = v;
                cov[(j, i)] = v;
                k += 1;
            }
            cov[(i, i)] = params.sigma2;
        }
        match cholesky_jittered(&cov) {
            Ok((l, _)) => reps.loglik(&l),
            Err(_) => f64::NEG_INFINITY,
        }
    }
}

/// Maximum-likelihood Matérn fit to zero-mean replicates (one per day).
///
/// `nu` is chosen from [`NU_GRID`]; `sigma2`, `rho` and the nugget are
/// optimized with Nelder-Mead on `(log sigma2, log rho, logit nugget)`.
pub fn fit_matern(residuals: &SpatioTemporalField, metric: Distance) -> Result<MaternFit> {
    fit_matern_grid(residuals, metric, &NU_GRID)
}

pub fn fit_matern_grid(residuals: &SpatioTemporalField, metric: Distance, nu_grid: &[f64]) -> Result<MaternFit> {
    let (n, t) = (residuals.n_sites(), residuals.n_days());
    if n < 2 {
        return Err(Error::InsufficientData("Matérn fit needs at least 2 sites".into()));
    }
    if t < 30 {
        return Err(Error::InsufficientData(format!("insufficient replicates: {t} (need 30)")));
    }
    let dist = distance_matrix(residuals.sites(), metric);
    let offdiag: Vec<f64> = (0..n).flat_map(|i| (0..i).map(move |j| (i, j))).map(|(i, j)| dist[(i, j)]).collect();
    let max_d = offdiag.iter().copied().fold(0.0, f64::max);
    if !(max_d > 0.0) {
        return Err(Error::InvalidInput("degenerate distance matrix (all sites coincide)".into()));
    }
    let reps = Replicates::from_field(residuals);
    let lags = LagTable::new(&dist);
    let var0 = reps.second_moments.trace() / n as f64;
    if !(var0 > 0.0) {
        return Err(Error::InvalidInput("zero-variance replicates".into()));
    }
    let rho0 = stats::median(&offdiag).max(1e-6 * max_d) / 2.0;
    let unpack = |x: &[f64], nu: f64| MaternParams { sigma2: x[0].exp(), rho: x[1].exp(), nu, nugget: inv_logit(x[2]) };

    let mut profile = Vec::with_capacity(nu_grid.len());
    let mut best: Option<(f64, Vec<f64>, bool, f64)> = None;
    for &nu in nu_grid {
        let obj = |x: &[f64]| {
            if x[2].abs() > 30.0 || !(x[1].exp() < 1e3 * max_d) || !(x[1].exp() > 1e-6 * max_d) {
                return f64::INFINITY;
            }
            -lags.loglik(&reps, &unpack(x, nu))
        };
        let x0 = [var0.ln(), rho0.ln(), logit(0.1)];
        let mut r = nelder_mead(obj, &x0, &[0.5, 0.7, 1.5], 1e-10, 1500);
        // one restart from the optimum to escape early simplex collapse
        let r2 = nelder_mead(obj, &r.x, &[0.2, 0.3, 0.5], 1e-10, 1500);
        if r2.value <= r.value {
            r = r2;
        }
        let ll = -r.value;
        profile.push(NuProfile { nu, loglik: ll });
        if best.as_ref().is_none_or(|b| ll > b.0) {
            best = Some((ll, r.x, r.converged, nu));
        }
    }
    let (loglik, x, converged, nu) = best.expect("non-empty grid");
    if !loglik.is_finite() {
        return Err(Error::NonConvergence("Matérn likelihood is not finite at any grid smoothness".into()));
    }
    let params = unpack(&x, nu);
    let hess = numerical_hessian(
        |p: &[f64]| -lags.loglik(&reps, &unpack(&[p[0], p[1], x[2]], nu)),
        &x[..2],
        &[1e-3, 1e-3],
    );
    let det = hess[0][0] * hess[1][1] - hess[0][1] * hess[1][0];
    let log_rho_se = if det > 0.0 && hess[0][0] > 0.0 { (hess[0][0] / det).sqrt() } else { f64::NAN };
    Ok(MaternFit {
        params,
        loglik,
        log_rho_se,
        range_unidentified: params.nugget > 0.95,
        profile,
        converged,
    })
}

/// Map from site coordinates to the plane used by the nonstationary model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Projection {
    /// `(lon, lat)` as given.
    Planar,
    /// Equirectangular km about reference latitude `lat0` (degrees).
    Equirectangular { lat0: f64 },
}

impl Projection {
    pub fn for_sites(sites: &[Site], metric: Distance) -> Self {
        match metric {
            Distance::Planar => Projection::Planar,
            Distance::Spherical => {
                let lat0 = sites.iter().map(|s| s.lat).sum::<f64>() / sites.len().max(1) as f64;
                Projection::Equirectangular { lat0 }
            }
        }
    }

    pub fn apply(&self, s: &Site) -> [f64; 2] {
        match *self {
            Projection::Planar => [s.lon, s.lat],
            Projection::Equirectangular { lat0 } => [
                EARTH_RADIUS_KM * s.lon.to_radians() * lat0.to_radians().cos(),
                EARTH_RADIUS_KM * s.lat.to_radians(),
            ],
        }
    }

    pub fn apply_all(&self, sites: &[Site]) -> Vec<[f64; 2]> {
        sites.iter().map(|s| self.apply(s)).collect()
    }
}

/// Symmetric 2x2 matrix stored as `[a, b, c]` = `[[a, b], [b, c]]`.
pub type Sym2 = [f64; 3];

fn det2(m: &Sym2) -> f64 {
    m[0] * m[2] - m[1] * m[1]
}

/// Unit-determinant anisotropy matrix with eigenvalues `e^eta`, `e^-eta`
/// and major axis at angle `phi`.
pub fn anisotropy(eta: f64, phi: f64) -> Sym2 {
    let (s, c) = phi.sin_cos();
    let (l1, l2) = (eta.exp(), (-eta).exp());
    [l1 * c * c + l2 * s * s, (l1 - l2) * s * c, l1 * s * s + l2 * c * c]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonstatParams {
    pub knots: Vec<[f64; 2]>,
    pub sigma_at_knot: Vec<f64>,
    /// Anisotropy matrix at each knot; the kernel matrix there is
    /// `range^2 * kernel_matrix`.
    pub kernel_matrix_at_knot: Vec<Sym2>,
    pub range_at_knot: Vec<f64>,
    pub lambda_sigma: f64,
    pub projection: Projection,
}

/// Normalized knot weights `w_a(s) ∝ exp(-|s - b_a|^2 / (2 lambda_sigma))`.
pub fn weight_at(s: [f64; 2], knots: &[[f64; 2]], lambda_sigma: f64) -> Vec<f64> {
    let logw: Vec<f64> =
        knots.iter().map(|b| -((s[0] - b[0]).powi(2) + (s[1] - b[1]).powi(2)) / (2.0 * lambda_sigma)).collect();
    let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Four knots at the cell centres of a 2x2 split of the bounding box.
pub fn knot_grid(coords: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for c in coords {
        x0 = x0.min(c[0]);
        x1 = x1.max(c[0]);
        y0 = y0.min(c[1]);
        y1 = y1.max(c[1]);
    }
    let xs = [x0 + 0.25 * (x1 - x0), x0 + 0.75 * (x1 - x0)];
    let ys = [y0 + 0.25 * (y1 - y0), y0 + 0.75 * (y1 - y0)];
    let mut knots = Vec::with_capacity(4);
    for y in ys {
        for x in xs {
            knots.push([x, y]);
        }
    }
    knots
}

/// Half the minimum distance between knots.
pub fn default_lambda_sigma(knots: &[[f64; 2]]) -> f64 {
    let mut dmin = f64::INFINITY;
    for i in 0..knots.len() {
        for j in 0..i {
            dmin = dmin.min((knots[i][0] - knots[j][0]).hypot(knots[i][1] - knots[j][1]));
        }
    }
    if dmin.is_finite() {
        0.5 * dmin
    } else {
        1.0
    }
}

/// Blended `(sigma(s), Sigma(s))` for given knot weights.
#[derive(Debug, Clone, Copy)]
struct Local {
    sigma: f64,
    kernel: Sym2,
    sqrt4_det: f64,
}

impl NonstatParams {
    pub fn n_knots(&self) -> usize {
        self.knots.len()
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.n_knots();
        if a == 0
            || self.sigma_at_knot.len() != a
            || self.kernel_matrix_at_knot.len() != a
            || self.range_at_knot.len() != a
        {
            return Err(Error::InvalidInput("inconsistent knot parameter lengths".into()));
        }
        if !(self.lambda_sigma > 0.0) {
            return Err(Error::InvalidInput("lambda_sigma must be positive".into()));
        }
        for k in 0..a {
            let m = &self.kernel_matrix_at_knot[k];
            if !(m[0] > 0.0 && det2(m) > 0.0 && self.range_at_knot[k] > 0.0 && self.sigma_at_knot[k] > 0.0) {
                return Err(Error::InvalidInput(format!("knot {k} parameters are not valid")));
            }
        }
        Ok(())
    }

    /// Stationary anisotropic exponential model expressed with `knots`.
    pub fn uniform(knots: Vec<[f64; 2]>, sigma: f64, range: f64, kernel: Sym2, projection: Projection) -> Self {
        let a = knots.len();
        let lambda_sigma = default_lambda_sigma(&knots);
        Self {
            knots,
            sigma_at_knot: vec![sigma; a],
            kernel_matrix_at_knot: vec![kernel; a],
            range_at_knot: vec![range; a],
            lambda_sigma,
            projection,
        }
    }

    pub fn weights(&self, s: [f64; 2]) -> Vec<f64> {
        weight_at(s, &self.knots, self.lambda_sigma)
    }

    fn local(&self, w: &[f64]) -> Local {
        let mut sigma = 0.0;
        let mut k = [0.0; 3];
        for a in 0..self.n_knots() {
            sigma += w[a] * self.sigma_at_knot[a];
            let r2 = self.range_at_knot[a] * self.range_at_knot[a];
            for (kk, m) in k.iter_mut().zip(&self.kernel_matrix_at_knot[a]) {
                *kk += w[a] * r2 * m;
            }
        }
        Local { sigma, kernel: k, sqrt4_det: det2(&k).sqrt().sqrt() }
    }

    /// `sigma(s)`.
    pub fn sigma_at(&self, s: [f64; 2]) -> f64 {
        self.local(&self.weights(s)).sigma
    }

    /// Kernel matrix `Sigma(s)`.
    pub fn kernel_at(&self, s: [f64; 2]) -> Sym2 {
        self.local(&self.weights(s)).kernel
    }

    /// Covariance between projected points `s` and `t`.
    pub fn cov(&self, s: [f64; 2], t: [f64; 2]) -> f64 {
        let (ls, lt) = (self.local(&self.weights(s)), self.local(&self.weights(t)));
        ls.sigma * lt.sigma * corr_between(&ls, &lt, s, t)
    }

    fn locals(&self, coords: &[[f64; 2]]) -> Vec<Local> {
        coords.iter().map(|&c| self.local(&self.weights(c))).collect()
    }

    pub fn covariance_matrix(&self, sites: &[Site]) -> Matrix {
        let coords = self.projection.apply_all(sites);
        let loc = self.locals(&coords);
        Matrix::symmetric_from_fn(sites.len(), |i, j| {
            loc[i].sigma * loc[j].sigma * corr_between(&loc[i], &loc[j], coords[i], coords[j])
        })
    }

    pub fn correlation_matrix(&self, sites: &[Site]) -> Matrix {
        let coords = self.projection.apply_all(sites);
        let loc = self.locals(&coords);
        Matrix::symmetric_from_fn(sites.len(), |i, j| {
            if i == j {
                1.0
            } else {
                corr_between(&loc[i], &loc[j], coords[i], coords[j])
            }
        })
    }
}

/// Prefactor `|S_s|^{1/4} |S_t|^{1/4} / |(S_s + S_t)/2|^{1/2}` times
/// `exp(-sqrt(Q))`.
fn corr_between(a: &Local, b: &Local, s: [f64; 2], t: [f64; 2]) -> f64 {
    let avg = [0.5 * (a.kernel[0] + b.kernel[0]), 0.5 * (a.kernel[1] + b.kernel[1]), 0.5 * (a.kernel[2] + b.kernel[2])];
    let det = det2(&avg);
    let (dx, dy) = (s[0] - t[0], s[1] - t[1]);
    let q = (avg[2] * dx * dx - 2.0 * avg[1] * dx * dy + avg[0] * dy * dy) / det;
    a.sqrt4_det * b.sqrt4_det / det.sqrt() * (-q.max(0.0).sqrt()).exp()
}

/// Covariance of the kernel-convolution model between two sites.
pub fn nonstat_cov(s: &Site, t: &Site, params: &NonstatParams) -> Result<f64> {
    let (ps, pt) = (params.projection.apply(s), params.projection.apply(t));
    let (ls, lt) = (params.local(&params.weights(ps)), params.local(&params.weights(pt)));
    let avg = [0.5 * (ls.kernel[0] + lt.kernel[0]), 0.5 * (ls.kernel[1] + lt.kernel[1]), 0.5 * (ls.kernel[2] + lt.kernel[2])];
    if !(det2(&avg) > 0.0) {
        return Err(Error::Singular("average kernel matrix".into()));
    }
    Ok(params.cov(ps, pt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonstatFit {
    pub params: NonstatParams,
    /// Unweighted pairwise composite log-likelihood of the final model.
    pub composite_loglik: f64,
    /// Sites with weight at least 0.01 in each knot window.
    pub window_sizes: Vec<usize>,
    pub n_pairs: usize,
}

const WINDOW_MIN_WEIGHT: f64 = 0.01;
const PAIR_NEIGHBOURS: usize = 8;
const BACKFIT_SWEEPS: usize = 2;

struct PairData {
    i: usize,
    j: usize,
    sii: f64,
    sjj: f64,
    sij: f64,
}

fn pair_loglik(p: &PairData, cii: f64, cjj: f64, cij: f64) -> f64 {
    let det = cii * cjj - cij * cij;
    if !(det > 0.0) {
        return f64::NEG_INFINITY;
    }
    -0.5 * (det.ln() + (p.sii * cjj - 2.0 * p.sij * cij + p.sjj * cii) / det)
}

/// Knot parameters `(log sigma, log range, eta, phi)` to model values.
fn knot_from_theta(theta: &[f64]) -> (f64, f64, Sym2) {
    (theta[0].exp(), theta[1].exp(), anisotropy(theta[2], theta[3]))
}

/// Knot-windowed pairwise composite likelihood fit.
///
/// Pairs join each site to its eight nearest neighbours. A stationary
/// anisotropic exponential model fitted to all pairs initializes every
/// knot; then each knot's `(sigma, range, anisotropy)` is re-estimated in
/// turn, maximizing the pair likelihood weighted by `w_a(s_i) w_a(s_j)`
/// over sites whose weight is at least 0.01.
pub fn fit_nonstat(residuals: &SpatioTemporalField, metric: Distance, knots: Option<Vec<[f64; 2]>>) -> Result<NonstatFit> {
    let (n, t) = (residuals.n_sites(), residuals.n_days());
    if t < 30 {
        return Err(Error::InsufficientData(format!("insufficient replicates: {t} (need 30)")));
    }
    let projection = Projection::for_sites(residuals.sites(), metric);
    let coords = projection.apply_all(residuals.sites());
    let knots = knots.unwrap_or_else(|| knot_grid(&coords));
    let lambda_sigma = default_lambda_sigma(&knots);
    let n_knots = knots.len();
    let weights: Vec<Vec<f64>> = coords.iter().map(|&c| weight_at(c, &knots, lambda_sigma)).collect();
    let window_sizes: Vec<usize> =
        (0..n_knots).map(|a| weights.iter().filter(|w| w[a] >= WINDOW_MIN_WEIGHT).count()).collect();
    if let Some(a) = window_sizes.iter().position(|&c| c < 5) {
        return Err(Error::InsufficientData(format!(
            "knot window {a} contains {} sites (need at least 5)",
            window_sizes[a]
        )));
    }

    let reps = Replicates::from_field(residuals);
    let sm = &reps.second_moments;
    let mut pairs = Vec::new();
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| ((coords[i][0] - coords[j][0]).hypot(coords[i][1] - coords[j][1]), j))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in others.iter().take(PAIR_NEIGHBOURS) {
            let (a, b) = (i.min(j), i.max(j));
            pairs.push((a, b));
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    let pairs: Vec<PairData> = pairs
        .into_iter()
        .map(|(i, j)| PairData { i, j, sii: sm[(i, i)], sjj: sm[(j, j)], sij: sm[(i, j)] })
        .collect();
    if pairs.is_empty() {
        return Err(Error::InsufficientData("no site pairs".into()));
    }

    let mut params = {
        let dists: Vec<f64> =
            pairs.iter().map(|p| (coords[p.i][0] - coords[p.j][0]).hypot(coords[p.i][1] - coords[p.j][1])).collect();
        let r0 = stats::median(&dists).max(1e-9);
        let s0 = (sm.trace() / n as f64).sqrt();
        if !(s0 > 0.0) {
            return Err(Error::InvalidInput("zero-variance replicates".into()));
        }
        let stationary = |theta: &[f64]| {
            if theta[2].abs() > 4.0 {
                return f64::INFINITY;
            }
            let (s, r, m) = knot_from_theta(theta);
            let p = NonstatParams::uniform(knots.clone(), s, r, m, projection);
            -composite(&p, &coords, &pairs, None, &weights)
        };
        let fit = nelder_mead(stationary, &[s0.ln(), r0.ln(), 0.0, 0.0], &[0.3, 0.5, 0.3, 0.5], 1e-10, 2000);
        let (s, r, m) = knot_from_theta(&fit.x);
        let mut p = NonstatParams::uniform(knots.clone(), s, r, m, projection);
        p.lambda_sigma = lambda_sigma;
        (p, fit.x)
    };
    let mut thetas = vec![params.1.clone(); n_knots];
    for _ in 0..BACKFIT_SWEEPS {
        for a in 0..n_knots {
            let base = params.0.clone();
            let obj = |theta: &[f64]| {
                if theta[2].abs() > 4.0 {
                    return f64::INFINITY;
                }
                let mut p = base.clone();
                let (s, r, m) = knot_from_theta(theta);
                p.sigma_at_knot[a] = s;
                p.range_at_knot[a] = r;
                p.kernel_matrix_at_knot[a] = m;
                -composite(&p, &coords, &pairs, Some(a), &weights)
            };
            let fit = nelder_mead(obj, &thetas[a], &[0.2, 0.3, 0.3, 0.4], 1e-10, 1500);
            if !fit.value.is_finite() {
                return Err(Error::NonConvergence(format!("local likelihood at knot {a} is not finite")));
            }
            thetas[a] = fit.x.clone();
            let (s, r, m) = knot_from_theta(&fit.x);
            params.0.sigma_at_knot[a] = s;
            params.0.range_at_knot[a] = r;
            params.0.kernel_matrix_at_knot[a] = m;
        }
    }
    let params = params.0;
    let composite_loglik = reps.n_replicates as f64 * composite(&params, &coords, &pairs, None, &weights);
    Ok(NonstatFit { params, composite_loglik, window_sizes, n_pairs: pairs.len() })
}

/// Per-replicate pair likelihood, optionally restricted to knot `window`.
fn composite(p: &NonstatParams, coords: &[[f64; 2]], pairs: &[PairData], window: Option<usize>, weights: &[Vec<f64>]) -> f64 {
    let locals: Vec<Local> = weights.iter().map(|w| p.local(w)).collect();
    let mut total = 0.0;
    for pr in pairs {
        let pw = match window {
            Some(a) => {
                let (wi, wj) = (weights[pr.i][a], weights[pr.j][a]);
                if wi < WINDOW_MIN_WEIGHT || wj < WINDOW_MIN_WEIGHT {
                    continue;
                }
                wi * wj
            }
            None => 1.0,
        };
        let (li, lj) = (&locals[pr.i], &locals[pr.j]);
        let cij = li.sigma * lj.sigma * corr_between(li, lj, coords[pr.i], coords[pr.j]);
        total += pw * pair_loglik(pr, li.sigma * li.sigma, lj.sigma * lj.sigma, cij);
    }
    total
}

/// A fitted spatial model together with the geometry it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "model")]
pub enum CovarianceModel {
    Matern { params: MaternParams, metric: Distance },
    Nonstationary { params: NonstatParams },
    /// Independent sites with unit correlation scale.
    Diagonal { variances: Vec<f64> },
}

impl CovarianceModel {
    pub fn covariance_matrix(&self, sites: &[Site]) -> Matrix {
        match self {
            CovarianceModel::Matern { params, metric } => {
                let mut m = params.correlation_from_distances(&distance_matrix(sites, *metric));
                for i in 0..sites.len() {
                    for j in 0..sites.len() {
                        m[(i, j)] *= params.sigma2;
                    }
                }
                m
            }
            CovarianceModel::Nonstationary { params } => params.covariance_matrix(sites),
            CovarianceModel::Diagonal { variances } => Matrix::diagonal(variances),
        }
    }

    pub fn correlation_matrix(&self, sites: &[Site]) -> Matrix {
        match self {
            CovarianceModel::Matern { params, metric } => params.correlation_from_distances(&distance_matrix(sites, *metric)),
            CovarianceModel::Nonstationary { params } => params.correlation_matrix(sites),
            CovarianceModel::Diagonal { .. } => Matrix::identity(sites.len()),
        }
    }
}

/// Lower Cholesky factor of a covariance matrix over a fixed site order.
#[derive(Debug, Clone, PartialEq)]
pub struct CovFactor {
    pub l: Matrix,
    /// Diagonal jitter that was needed (zero when none).
    pub jitter: f64,
}

impl CovFactor {
    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        let (l, jitter) = cholesky_jittered(m)?;
        Ok(Self { l, jitter })
    }

    pub fn n(&self) -> usize {
        self.l.rows()
    }
}

pub fn build_factor(model: &CovarianceModel, sites: &[Site]) -> Result<CovFactor> {
    CovFactor::from_matrix(&model.covariance_matrix(sites))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::grid_sites;
    use alloc::string::ToString;
    use approx::assert_abs_diff_eq;

    fn mp(rho: f64, nu: f64) -> MaternParams {
        MaternParams { sigma2: 1.0, rho, nu, nugget: 0.0 }
    }

    #[test]
    fn matern_examples() {
        assert_eq!(matern_corr(0.0, &mp(1.0, 0.5)), 1.0);
        assert_abs_diff_eq!(matern_corr(1.0, &mp(1.0, 0.5)), (-1.0f64).exp(), epsilon = 1e-15);
        let s3 = 3f64.sqrt();
        assert_abs_diff_eq!(matern_corr(1.0, &mp(1.0, 1.5)), (1.0 + s3) * (-s3).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(matern_corr(1.0, &mp(1.0, 1.5)), 0.48336, epsilon = 1e-5);
    }

    #[test]
    fn matern_monotone_in_h_and_rho() {
        for &nu in &NU_GRID {
            let mut prev = 1.0;
            for k in 1..50 {
                let c = matern_corr(k as f64 * 0.1, &mp(0.7, nu));
                assert!(c < prev && c > 0.0);
                assert!(matern_corr(k as f64 * 0.1, &mp(0.9, nu)) > c);
                prev = c;
            }
        }
    }

    #[test]
    fn haversine_quarter_meridian() {
        let a = Site::new(0, 0.0, 0.0);
        let b = Site::new(1, 0.0, 90.0);
        assert_abs_diff_eq!(distance(&a, &b, Distance::Spherical), EARTH_RADIUS_KM * core::f64::consts::FRAC_PI_2, epsilon = 1e-9);
    }

    #[test]
    fn weights_normalized_and_symmetric() {
        let knots = [[0.0, 0.0], [1.0, 0.0]];
        let w = weight_at([0.5, 0.3], &knots, 0.5);
        assert_abs_diff_eq!(w[0], 0.5, epsilon = 1e-15);
        let w = weight_at([0.0, 0.0], &[[0.0, 0.0], [10.0, 0.0]], 0.5);
        assert!(w[0] > 1.0 - 1e-12);
        let far = weight_at([1e4, 0.0], &knots, 0.5);
        assert!((far.iter().sum::<f64>() - 1.0).abs() < 1e-15 && far.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn equal_knots_reduce_to_anisotropic_exponential() {
        let m = anisotropy(0.4, 0.3);
        let knots = knot_grid(&[[0.0, 0.0], [1.0, 1.0]]);
        let p = NonstatParams::uniform(knots, 1.7, 0.3, m, Projection::Planar);
        let inv = {
            let d = det2(&m) * 0.09 * 0.09;
            [m[2] * 0.09 / d, -m[1] * 0.09 / d, m[0] * 0.09 / d]
        };
        for (s, t) in [([0.1, 0.2], [0.7, 0.4]), ([0.9, 0.9], [0.0, 0.5]), ([0.3, 0.3], [0.3, 0.3])] {
            let (dx, dy) = (s[0] - t[0], s[1] - t[1]);
            let q = inv[0] * dx * dx + 2.0 * inv[1] * dx * dy + inv[2] * dy * dy;
            let expected = 1.7 * 1.7 * (-q.sqrt()).exp();
            assert!((p.cov(s, t) - expected).abs() <= 1e-12);
            assert_eq!(p.cov(s, t), p.cov(t, s));
        }
    }

    #[test]
    fn nonstat_diagonal_is_sigma_squared() {
        let knots = knot_grid(&[[0.0, 0.0], [1.0, 1.0]]);
        let mut p = NonstatParams::uniform(knots, 1.0, 0.2, anisotropy(0.0, 0.0), Projection::Planar);
        p.sigma_at_knot = vec![1.0, 2.0, 1.5, 0.5];
        p.range_at_knot = vec![0.1, 0.3, 0.2, 0.4];
        p.kernel_matrix_at_knot[1] = anisotropy(0.8, 1.0);
        let s = [0.37, 0.61];
        assert_abs_diff_eq!(p.cov(s, s), p.sigma_at(s).powi(2), epsilon = 1e-14);
        let sites = grid_sites(6, 6, 0.0, 0.0, 0.2, 0.2);
        let c = p.covariance_matrix(&sites);
        let ev = crate::linalg::symmetric_eigenvalues(&c);
        assert!(ev[0] > -1e-8 * c.trace() / 36.0);
    }

    #[test]
    fn hand_factor_two_sites() {
        let m = Matrix::from_row_major(2, 2, vec![1.0, 0.5, 0.5, 1.0]);
        let f = CovFactor::from_matrix(&m).unwrap();
        assert_eq!(f.jitter, 0.0);
        assert_abs_diff_eq!(f.l[(1, 0)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(f.l[(1, 1)], 0.75f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn full_nugget_gives_scaled_identity() {
        let sites = grid_sites(3, 3, 0.0, 0.0, 1.0, 1.0);
        // nugget must stay below one; the limit is checked on the correlation part
        let p = MaternParams { sigma2: 4.0, rho: 1.0, nu: 0.5, nugget: 1.0 - 1e-15 };
        let f = build_factor(&CovarianceModel::Matern { params: p, metric: Distance::Planar }, &sites).unwrap();
        assert!(f.l.max_abs_diff(&Matrix::diagonal(&[2.0; 9])) < 1e-7);
    }

    #[test]
    fn matern_fit_rejects_single_replicate() {
        let sites = grid_sites(3, 1, 0.0, 0.0, 1.0, 1.0);
        let cal = crate::Calendar::new(chrono::NaiveDate::from_ymd_opt(2000, 1, 1).unwrap(), 1);
        let f = SpatioTemporalField::new(sites, cal, vec![0.1, 0.2, 0.3]).unwrap();
        let err = fit_matern(&f, Distance::Planar).unwrap_err();
        assert!(err.to_string().contains("insufficient replicates"));
    }
}
