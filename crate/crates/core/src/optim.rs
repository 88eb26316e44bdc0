//! Derivative-free minimizers used by the likelihood fits and the
//! transformation-parameter search.

use alloc::vec;
use alloc::vec::Vec;

const INV_PHI: f64 = 0.618_033_988_749_894_9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineMin {
    pub x: f64,
    pub value: f64,
    pub evaluations: usize,
}

/// Golden-section minimization of `f` on `[lo, hi]` down to bracket width `tol`.
///
/// Non-finite objective values are treated as `+inf`.
pub fn golden_section(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, tol: f64) -> LineMin {
    let mut eval = |x: f64| {
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = eval(c);
    let mut fd = eval(d);
    let mut evaluations = 2;
    while (b - a) > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = eval(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = eval(d);
        }
        evaluations += 1;
    }
    if fc < fd {
        LineMin { x: c, value: fc, evaluations }
    } else {
        LineMin { x: d, value: fd, evaluations }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexMin {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Nelder-Mead simplex minimization.
///
/// `step` sets the initial simplex edge along each coordinate. Stops when the
/// spread of simplex values falls below `ftol` (absolute) or after `max_iter`
/// iterations.
pub fn nelder_mead(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    step: &[f64],
    ftol: f64,
    max_iter: usize,
) -> SimplexMin {
    let n = x0.len();
    let mut eval = |x: &[f64]| {
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for i in 0..n {
        let mut p = x0.to_vec();
        p[i] += step[i];
        simplex.push(p);
    }
    let mut values: Vec<f64> = simplex.iter().map(|p| eval(p)).collect();
    let mut iterations = 0;
    let mut converged = false;
    let mut centroid = vec![0.0; n];
    while iterations < max_iter {
        iterations += 1;
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();
        let spread = values[n] - values[0];
        if spread.is_finite() && spread.abs() <= ftol * (1.0 + values[0].abs()) {
            converged = true;
            break;
        }
        centroid.iter_mut().for_each(|c| *c = 0.0);
        for p in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v / n as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            centroid.iter().zip(&simplex[n]).map(|(c, w)| c + t * (w - c)).collect()
        };
        let reflected = along(-1.0);
        let fr = eval(&reflected);
        if fr < values[0] {
            let expanded = along(-2.0);
            let fe = eval(&expanded);
            if fe < fr {
                simplex[n] = expanded;
                values[n] = fe;
            } else {
                simplex[n] = reflected;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = reflected;
            values[n] = fr;
        } else {
            let (contracted, fcon) = if fr < values[n] {
                let c = along(-0.5);
                let v = eval(&c);
                (c, v)
            } else {
                let c = along(0.5);
                let v = eval(&c);
                (c, v)
            };
            if fcon < values[n].min(fr) {
                simplex[n] = contracted;
                values[n] = fcon;
            } else {
                let best = simplex[0].clone();
                for i in 1..=n {
                    for (v, b) in simplex[i].iter_mut().zip(&best) {
                        *v = b + 0.5 * (*v - b);
                    }
                    values[i] = eval(&simplex[i]);
                }
            }
        }
    }
    let best = (0..=n).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap_or(0);
    SimplexMin { x: simplex[best].clone(), value: values[best], iterations, converged }
}

/// Central-difference Hessian of `f` at `x` with per-coordinate step `h`.
pub fn numerical_hessian(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: &[f64]) -> Vec<Vec<f64>> {
    let n = x.len();
    let f0 = f(x);
    let mut hess = vec![vec![0.0; n]; n];
    let mut p = x.to_vec();
    for i in 0..n {
        p[i] = x[i] + h[i];
        let fp = f(&p);
        p[i] = x[i] - h[i];
        let fm = f(&p);
        p[i] = x[i];
        hess[i][i] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let mut q = x.to_vec();
            q[i] += h[i];
            q[j] += h[j];
            let fpp = f(&q);
            q[j] -= 2.0 * h[j];
            let fpm = f(&q);
            q[i] -= 2.0 * h[i];
            let fmm = f(&q);
            q[j] += 2.0 * h[j];
            let fmp = f(&q);
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j]);
            hess[i][j] = v;
            hess[j][i] = v;
        }
    }
    hess
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn golden_section_finds_parabola_vertex() {
        let m = golden_section(|x| (x - 1.3) * (x - 1.3) + 2.0, -2.0, 4.0, 1e-8);
        assert_relative_eq!(m.x, 1.3, epsilon = 1e-7);
        assert_relative_eq!(m.value, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn nelder_mead_minimizes_rosenbrock() {
        let r = nelder_mead(
            |p| (1.0 - p[0]).powi(2) + 100.0 * (p[1] - p[0] * p[0]).powi(2),
            &[-1.2, 1.0],
            &[0.5, 0.5],
            1e-14,
            5000,
        );
        assert!(r.converged);
        assert_relative_eq!(r.x[0], 1.0, epsilon = 1e-3);
        assert_relative_eq!(r.x[1], 1.0, epsilon = 1e-3);
    }

    #[test]
    fn hessian_of_quadratic_form() {
        let h = numerical_hessian(|p| 2.0 * p[0] * p[0] + 3.0 * p[0] * p[1] + p[1] * p[1], &[0.4, -0.2], &[1e-4, 1e-4]);
        assert_relative_eq!(h[0][0], 4.0, epsilon = 1e-5);
        assert_relative_eq!(h[0][1], 3.0, epsilon = 1e-5);
        assert_relative_eq!(h[1][1], 2.0, epsilon = 1e-5);
    }
}
