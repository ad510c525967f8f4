//! Frame condition: `Gamma(a0)` diagonal with a common ratio `g~_i / Gamma_ii`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::ensemble::{build_table, fugacity_of_density_with, DensityPoint, EnsembleError};
use crate::rates::{RateFamily, ScalarRate};

pub const DEFAULT_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum FrameError {
    #[error("domain: {0}")]
    Domain(String),
    #[error("frame solve did not converge; residual trace {trace:?}")]
    NonConvergence { trace: Vec<f64> },
    #[error("admissibility violated: y = {y} must exceed -1")]
    Admissibility { y: f64 },
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

#[derive(Debug, Clone, Serialize)]
pub struct FrameCertificate {
    pub a0: Vec<f64>,
    pub lambda: f64,
    pub offdiag_residual: f64,
    pub ratio_residual: f64,
    pub holds: bool,
    pub tol: f64,
}

pub fn check_frame(point: &DensityPoint, tol: f64) -> FrameCertificate {
    let n = point.n_species();
    let ratios: Vec<f64> = (0..n).map(|i| point.tilde_g[i] / point.gamma[(i, i)]).collect();
    let lambda = ratios.iter().sum::<f64>() / n as f64;
    let mut off: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                off = off.max(point.gamma[(i, j)].abs());
            }
        }
    }
    let ratio_res = ratios.iter().map(|r| (r - lambda).abs()).fold(0.0, f64::max);
    FrameCertificate {
        a0: point.a.clone(),
        lambda,
        offdiag_residual: off,
        ratio_residual: ratio_res,
        holds: off < tol && ratio_res < tol,
        tol,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FrameSolution {
    pub certificate: FrameCertificate,
    /// The solution set is locally a manifold; the returned point is the one nearest `a_init`.
    pub manifold: bool,
    pub iterations: usize,
    pub trace: Vec<f64>,
}

fn residual(point: &DensityPoint) -> DVector<f64> {
    let n = point.n_species();
    let mut r = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            r.push(point.gamma[(i, j)]);
        }
    }
    let last = point.tilde_g[n - 1] / point.gamma[(n - 1, n - 1)];
    for i in 0..n - 1 {
        r.push(point.tilde_g[i] / point.gamma[(i, i)] - last);
    }
    DVector::from_vec(r)
}

/// Solves the frame equations over the density by damped Gauss-Newton with a
/// central-difference Jacobian; multi-color families go through the scalar
/// balance root instead.
pub fn solve_frame(family: &Arc<RateFamily>, a_init: &[f64], tol: f64) -> Result<FrameSolution, FrameError> {
    let n = family.n_species();
    if n < 2 {
        return Err(FrameError::Domain("frame solve needs at least two species".into()));
    }
    if a_init.len() != n || a_init.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
        return Err(FrameError::Domain(format!("a_init {a_init:?} is not in (0, inf)^n")));
    }
    let rel_tol = 1e-15;
    let newton_tol = (tol * 1e-3).max(1e-14);
    let point_at = |a: &[f64]| fugacity_of_density_with(family, a, newton_tol, rel_tol);
    let p0 = match point_at(a_init) {
        Ok(p) => p,
        Err(e @ EnsembleError::OutsideDomain { .. })
        | Err(e @ EnsembleError::Domain(_))
        | Err(e @ EnsembleError::Rate(_))
        | Err(e @ EnsembleError::Truncation(_)) => return Err(FrameError::Domain(e.to_string())),
        Err(e) => return Err(e.into()),
    };
    if let Some(g) = family.is_multi_color() {
        return solve_multicolor(family, g, a_init, tol, p0);
    }
    let mut a = DVector::from_column_slice(a_init);
    let mut point = p0;
    let mut r = residual(&point);
    let mut trace = vec![r.amax()];
    let mut manifold = false;
    for it in 0..100 {
        if r.amax() < tol {
            let cert = check_frame(&point, tol);
            return Ok(FrameSolution { certificate: cert, manifold, iterations: it, trace });
        }
        let m = r.len();
        let mut jac = DMatrix::zeros(m, n);
        for j in 0..n {
            let h = 1e-5 * a[j].max(1e-3);
            let mut ap = a.clone();
            ap[j] += h;
            let mut am = a.clone();
            am[j] -= h;
            let rp = residual(&point_at(ap.as_slice())?);
            let rm = residual(&point_at(am.as_slice())?);
            jac.set_column(j, &((rp - rm) / (2.0 * h)));
        }
        let svd = jac.clone().svd(true, true);
        let smax = svd.singular_values.amax();
        let rank = svd.singular_values.iter().filter(|s| **s > 1e-8 * smax).count();
        manifold = rank < n;
        let step = svd
            .solve(&r, 1e-10 * smax)
            .map_err(|_| FrameError::NonConvergence { trace: trace.clone() })?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = &a - &step * t;
            if trial.iter().all(|x| *x > 0.0) {
                if let Ok(p) = point_at(trial.as_slice()) {
                    let rr = residual(&p);
                    if rr.amax() < r.amax() {
                        a = trial;
                        point = p;
                        r = rr;
                        accepted = true;
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        trace.push(r.amax());
        if !accepted {
            break;
        }
    }
    if r.amax() < tol {
        let cert = check_frame(&point, tol);
        let iterations = trace.len() - 1;
        return Ok(FrameSolution { certificate: cert, manifold, iterations, trace });
    }
    Err(FrameError::NonConvergence { trace })
}

fn solve_multicolor(
    family: &Arc<RateFamily>,
    g: &ScalarRate,
    a_init: &[f64],
    tol: f64,
    p0: DensityPoint,
) -> Result<FrameSolution, FrameError> {
    let n = a_init.len();
    let rho_init: f64 = a_init.iter().sum();
    let b0 = multicolor_balance(g, rho_init)?;
    let mut trace = vec![b0.abs()];
    let point = if b0.abs() < tol {
        p0
    } else {
        let rho0 = balance_root_near(g, rho_init, tol, &mut trace)?;
        // nearest point of the hyperplane sum(a) = rho0, falling back to scaling
        let shift = (rho0 - rho_init) / n as f64;
        let mut a: Vec<f64> = a_init.iter().map(|x| x + shift).collect();
        if a.iter().any(|x| *x <= 0.0) {
            a = a_init.iter().map(|x| x * rho0 / rho_init).collect();
        }
        fugacity_of_density_with(family, &a, (tol * 1e-3).max(1e-14), 1e-15)?
    };
    let cert = check_frame(&point, tol);
    if !cert.holds {
        return Err(FrameError::NonConvergence { trace });
    }
    let iterations = trace.len() - 1;
    Ok(FrameSolution { certificate: cert, manifold: true, iterations, trace })
}

fn balance_root_near(g: &ScalarRate, rho: f64, tol: f64, trace: &mut Vec<f64>) -> Result<f64, FrameError> {
    let f = |r: f64| multicolor_balance(g, r);
    let f0 = f(rho)?;
    let mut step = 0.05 * rho;
    let mut bracket = None;
    for _ in 0..60 {
        for cand in [rho - step, rho + step] {
            if cand <= 0.0 {
                continue;
            }
            if let Ok(v) = f(cand) {
                if v.signum() != f0.signum() {
                    bracket = Some(if cand < rho { (cand, rho) } else { (rho, cand) });
                    break;
                }
            }
        }
        if bracket.is_some() {
            break;
        }
        step *= 1.5;
    }
    let (mut lo, mut hi) = bracket.ok_or_else(|| FrameError::NonConvergence { trace: trace.clone() })?;
    let flo = f(lo)?;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid)?;
        trace.push(fm.abs());
        if fm.abs() < tol * 1e-3 || hi - lo < 1e-15 * mid {
            return Ok(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn scalar_table(g: &ScalarRate, rho: f64) -> Result<crate::ensemble::EnsembleTable, FrameError> {
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(FrameError::Domain(format!("density {rho} is not achievable")));
    }
    let fam = Arc::new(RateFamily::multi_color(1, g.clone()).map_err(|e| FrameError::Domain(e.to_string()))?);
    let p = match fugacity_of_density_with(&fam, &[rho], 1e-14, 1e-15) {
        Ok(p) => p,
        Err(e @ EnsembleError::Domain(_)) | Err(e @ EnsembleError::NonConvergence { .. }) => {
            return Err(FrameError::Domain(e.to_string()))
        }
        Err(e) => return Err(e.into()),
    };
    Ok(build_table(&fam, &p.phi, 1e-15)?)
}

/// `sigma^2(rho) - rho` for the color-blind single-species marginal.
pub fn multicolor_balance(g: &ScalarRate, rho: f64) -> Result<f64, FrameError> {
    let t = scalar_table(g, rho)?;
    let m = t.density()[0];
    Ok(t.second_moment(0, 0) - m * m - m)
}

/// Third cumulant minus variance of the color-blind marginal; the multi-color
/// nonlinearity vanishes with it at a balance density.
pub fn multicolor_nonlinearity(g: &ScalarRate, rho: f64) -> Result<f64, FrameError> {
    let t = scalar_table(g, rho)?;
    let m = t.density()[0];
    Ok(t.cumulant3(0, 0, 0) - (t.second_moment(0, 0) - m * m))
}

#[derive(Debug, Clone, Serialize)]
pub struct PerturbedWalkFrame {
    pub phi: [f64; 2],
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// `diag(e phi^1, e phi^2)`, the displayed normalization.
    pub gamma_displayed: [f64; 2],
    /// Covariance of the normalized marginal, `diag(e phi^1, e phi^2) / Z`.
    pub gamma: [f64; 2],
    /// `g~_i / Gamma_ii = Z / e`.
    pub lambda: f64,
}

/// Closed-form frame point of the perturbed two-species walk model with
/// `phi^2 = 1 - phi^1`.
pub fn perturbed_rw_frame(phi1: f64, x: f64) -> Result<PerturbedWalkFrame, FrameError> {
    if !(phi1 > 0.0 && phi1 < 1.0) || !(x > -1.0) {
        return Err(FrameError::Domain(format!("phi1 = {phi1}, x = {x}")));
    }
    let e = std::f64::consts::E;
    let phi2 = 1.0 - phi1;
    let y = x * (phi1 - 1.0) / (phi1 + x / e);
    if !(y > -1.0) {
        return Err(FrameError::Admissibility { y });
    }
    let z = e + x * phi1 + y * phi2;
    Ok(PerturbedWalkFrame {
        phi: [phi1, phi2],
        x,
        y,
        z,
        gamma_displayed: [e * phi1, e * phi2],
        gamma: [e * phi1 / z, e * phi2 / z],
        lambda: z / e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{fugacity_of_density, point_at_fugacity};

    #[test]
    fn independent_frame() {
        let fam = Arc::new(RateFamily::independent(2));
        let p = fugacity_of_density(&fam, &[0.7, 0.3], 1e-12).unwrap();
        let c = check_frame(&p, 1e-9);
        assert!(c.holds && (c.lambda - 1.0).abs() < 1e-9);
    }

    #[test]
    fn poisson_colors_are_a_manifold() {
        let fam = Arc::new(RateFamily::multi_color(2, ScalarRate::Linear { scale: 1.0 }).unwrap());
        let s = solve_frame(&fam, &[0.2, 0.8], 1e-9).unwrap();
        assert!(s.manifold && s.certificate.holds);
        assert_eq!(s.iterations, 0);
        assert!((s.certificate.a0[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn balance_is_rate_scale_invariant() {
        for rho in [0.3, 1.0, 2.5] {
            assert!(multicolor_balance(&ScalarRate::Linear { scale: 1.5 }, rho).unwrap().abs() < 1e-10);
        }
        assert!(multicolor_balance(&ScalarRate::Linear { scale: 1.0 }, -1.0).is_err());
    }

    #[test]
    fn h_example_surface() {
        let c = ScalarRate::h_example_c();
        let g = ScalarRate::h_example(0.5, 0.25, c);
        let fam = Arc::new(RateFamily::multi_color(2, g.clone()).unwrap());
        let rho0 = point_at_fugacity(&Arc::new(RateFamily::multi_color(1, g.clone()).unwrap()), &[1.0], 1e-15)
            .unwrap()
            .a[0];
        assert!(multicolor_balance(&g, rho0).unwrap().abs() < 1e-10);
        let s = solve_frame(&fam, &[0.3, 0.25], 1e-9).unwrap();
        let sum: f64 = s.certificate.a0.iter().sum();
        assert!((sum - rho0).abs() < 1e-8, "{sum} vs {rho0}");
        assert!(s.manifold && s.certificate.holds);
    }

    #[test]
    fn bad_initial_density() {
        let fam = Arc::new(RateFamily::independent(2));
        assert!(matches!(solve_frame(&fam, &[-1.0, 0.5], 1e-9), Err(FrameError::Domain(_))));
        // a tabulated family cannot reach densities far beyond its cap
        let tab = Arc::new(RateFamily::independent(2).tabulate(10).unwrap());
        assert!(matches!(solve_frame(&tab, &[20.0, 20.0], 1e-9), Err(FrameError::Domain(_))));
    }

    #[test]
    fn perturbed_walk_closed_form() {
        let f = perturbed_rw_frame(0.49, 3.0).unwrap();
        assert!((f.y + 0.9601).abs() < 5e-4);
        assert!(perturbed_rw_frame(0.49, 0.0).unwrap().y == 0.0);
        assert!(matches!(perturbed_rw_frame(0.01, 100.0), Err(FrameError::Admissibility { .. })));
    }

    #[test]
    fn perturbed_walk_is_isolated_solution() {
        let f = perturbed_rw_frame(0.49, 3.0).unwrap();
        let fam = Arc::new(RateFamily::perturbed_walks(3.0, f.y).unwrap());
        let exact = point_at_fugacity(&fam, &f.phi, 1e-15).unwrap();
        let start: Vec<f64> = exact.a.iter().map(|x| x * 1.05).collect();
        let s = solve_frame(&fam, &start, 1e-10).unwrap();
        assert!(!s.manifold);
        for i in 0..2 {
            assert!((s.certificate.a0[i] - exact.a[i]).abs() < 1e-8);
        }
        assert!((s.certificate.lambda - f.lambda).abs() < 1e-8);
    }
}
