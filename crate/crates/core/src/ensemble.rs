//! Grand-canonical product measures, the fugacity/density correspondence and
//! the cumulant expansion of the derivatives of `g~`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::rates::{shell, RateError, RateFamily};

pub const DEFAULT_REL_TOL: f64 = 1e-12;
const MAX_SHELLS: u32 = 4000;
const MAX_STATES: usize = 4_000_000;
const DIVERGENCE_RUN: usize = 10;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("fugacity outside Dom_Z: shell sums stopped decreasing at shell {shell}")]
    OutsideDomain { shell: u32 },
    #[error("density {0:?} is not in (0, inf)^n")]
    Domain(Vec<f64>),
    #[error("truncation did not converge within {0} shells")]
    Truncation(u32),
    #[error("newton did not converge: residual {residual:e} at phi {phi:?}")]
    NonConvergence { phi: Vec<f64>, residual: f64 },
    #[error("covariance near singular (condition number {0:e})")]
    Singular(f64),
    #[error(transparent)]
    Rate(#[from] RateError),
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Kahan {
    sum: f64,
    comp: f64,
}

impl Kahan {
    pub fn add(&mut self, x: f64) {
        let y = x - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// Truncated single-site marginal `p(k) = phi^k / (Z g!(k))` with cached
/// moments up to order three.
#[derive(Debug, Clone)]
pub struct EnsembleTable {
    pub family: Arc<RateFamily>,
    pub phi: Vec<f64>,
    pub cap: u32,
    pub log_z: f64,
    pub z: f64,
    pub tail_bound: f64,
    n: usize,
    support: Vec<u32>,
    probs: Vec<f64>,
    cdf: Vec<f64>,
    mean: Vec<f64>,
    m2: Vec<f64>,
    m3: Vec<f64>,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn build_table(family: &Arc<RateFamily>, phi: &[f64], rel_tol: f64) -> Result<EnsembleTable, EnsembleError> {
    let n = family.n_species();
    if phi.len() != n || phi.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
        return Err(EnsembleError::Domain(phi.to_vec()));
    }
    let log_phi: Vec<f64> = phi.iter().map(|p| p.ln()).collect();
    let mut states: Vec<u32> = Vec::new();
    let mut logw: Vec<f64> = Vec::new();
    let mut shell_logs: Vec<f64> = Vec::new();
    let mut rising = 0usize;
    let mut tail_rel = 0.0;
    let mut cap = 0;
    let mut done = false;
    for m in 0..=MAX_SHELLS {
        if let Some(c) = family.cap() {
            if m > c {
                return Err(EnsembleError::Rate(RateError::CapExceeded { k: vec![m], cap: c }));
            }
        }
        let sh = shell(n, m);
        let mut sl = Vec::with_capacity(sh.len());
        for k in &sh {
            let lw: f64 = k.iter().zip(&log_phi).map(|(&ki, lp)| ki as f64 * lp).sum::<f64>() - family.log_g_factorial(k)?;
            states.extend_from_slice(k);
            logw.push(lw);
            sl.push(lw);
        }
        if states.len() / n.max(1) > MAX_STATES {
            return Err(EnsembleError::Truncation(m));
        }
        let s = log_sum_exp(&sl);
        shell_logs.push(s);
        cap = m;
        if m >= 1 {
            let prev = shell_logs[m as usize - 1];
            if s >= prev {
                rising += 1;
            } else {
                rising = 0;
            }
            let log_z = log_sum_exp(&shell_logs);
            let ratio = (s - prev).exp();
            if rising >= DIVERGENCE_RUN {
                // rising shells with non-decreasing ratios signal divergence
                let r_old = shell_logs[m as usize - DIVERGENCE_RUN + 1] - shell_logs[m as usize - DIVERGENCE_RUN];
                if s - prev >= r_old - 1e-12 {
                    return Err(EnsembleError::OutsideDomain { shell: m });
                }
            }
            if ratio < 1.0 {
                let rel = (s - log_z).exp();
                let tail = rel * ratio / (1.0 - ratio);
                if rel < rel_tol && tail < rel_tol {
                    tail_rel = tail;
                    done = true;
                    break;
                }
            }
        }
    }
    if !done {
        return Err(EnsembleError::Truncation(cap));
    }
    let log_z = log_sum_exp(&shell_logs);
    let probs: Vec<f64> = logw.iter().map(|l| (l - log_z).exp()).collect();
    let mut acc = Kahan::default();
    let cdf = probs
        .iter()
        .map(|p| {
            acc.add(*p);
            acc.value()
        })
        .collect();
    let mut mean_k = vec![Kahan::default(); n];
    let mut m2_k = vec![Kahan::default(); n * n];
    let mut m3_k = vec![Kahan::default(); n * n * n];
    for (s, p) in probs.iter().enumerate() {
        let k = &states[s * n..(s + 1) * n];
        for i in 0..n {
            let ki = k[i] as f64;
            mean_k[i].add(p * ki);
            for j in 0..n {
                let kij = ki * k[j] as f64;
                m2_k[i * n + j].add(p * kij);
                for l in 0..n {
                    m3_k[(i * n + j) * n + l].add(p * kij * k[l] as f64);
                }
            }
        }
    }
    Ok(EnsembleTable {
        family: family.clone(),
        phi: phi.to_vec(),
        cap,
        log_z,
        z: log_z.exp(),
        tail_bound: tail_rel,
        n,
        support: states,
        probs,
        cdf,
        mean: mean_k.iter().map(Kahan::value).collect(),
        m2: m2_k.iter().map(Kahan::value).collect(),
        m3: m3_k.iter().map(Kahan::value).collect(),
    })
}

impl EnsembleTable {
    pub fn n_species(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// `(k, p(k))` over the truncated support.
    pub fn iter(&self) -> impl Iterator<Item = (&[u32], f64)> {
        self.support.chunks(self.n.max(1)).zip(self.probs.iter().copied())
    }

    pub fn total_mass(&self) -> f64 {
        *self.cdf.last().unwrap_or(&0.0)
    }

    /// `a^i = sum_k k_i p(k)`.
    pub fn density(&self) -> Vec<f64> {
        self.mean.clone()
    }

    pub fn second_moment(&self, i: usize, j: usize) -> f64 {
        self.m2[i * self.n + j]
    }

    pub fn third_moment(&self, i: usize, j: usize, l: usize) -> f64 {
        self.m3[(i * self.n + j) * self.n + l]
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let n = self.n;
        DMatrix::from_fn(n, n, |i, j| self.m2[i * n + j] - self.mean[i] * self.mean[j])
    }

    pub fn cumulant3(&self, p: usize, q: usize, r: usize) -> f64 {
        let m = &self.mean;
        self.third_moment(p, q, r) - self.second_moment(p, q) * m[r] - self.second_moment(q, r) * m[p]
            - self.second_moment(r, p) * m[q]
            + 2.0 * m[p] * m[q] * m[r]
    }

    /// `E[f(k)]` over the truncated marginal.
    pub fn expect<F: Fn(&[u32]) -> f64>(&self, f: F) -> f64 {
        let mut acc = Kahan::default();
        for (k, p) in self.iter() {
            acc.add(p * f(k));
        }
        acc.value()
    }

    /// Inverse-CDF draw; the truncated mass is renormalized.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &[u32] {
        let u: f64 = rng.random::<f64>() * self.total_mass();
        let idx = self.cdf.partition_point(|c| *c <= u).min(self.probs.len() - 1);
        &self.support[idx * self.n..(idx + 1) * self.n]
    }
}

/// A density together with its fugacity, covariance and third cumulants.
#[derive(Debug, Clone, Serialize)]
pub struct DensityPoint {
    pub a: Vec<f64>,
    pub phi: Vec<f64>,
    #[serde(serialize_with = "ser_matrix")]
    pub gamma: DMatrix<f64>,
    pub tilde_g: Vec<f64>,
    pub chem_potential: Vec<f64>,
    /// Joint third cumulants `kappa(k_p, k_q, k_r)`, flattened.
    pub kappa3: Vec<f64>,
    pub z: f64,
    pub cap: u32,
    pub tail_bound: f64,
    #[serde(skip)]
    pub family: Arc<RateFamily>,
}

pub fn ser_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(m.nrows()))?;
    for i in 0..m.nrows() {
        let row: Vec<f64> = (0..m.ncols()).map(|j| m[(i, j)]).collect();
        seq.serialize_element(&row)?;
    }
    seq.end()
}

impl DensityPoint {
    pub fn from_table(table: &EnsembleTable) -> Self {
        let n = table.n_species();
        let mut kappa3 = vec![0.0; n * n * n];
        for p in 0..n {
            for q in 0..n {
                for r in 0..n {
                    kappa3[(p * n + q) * n + r] = table.cumulant3(p, q, r);
                }
            }
        }
        DensityPoint {
            a: table.density(),
            phi: table.phi.clone(),
            gamma: table.covariance(),
            tilde_g: table.phi.clone(),
            chem_potential: table.phi.iter().map(|p| p.ln()).collect(),
            kappa3,
            z: table.z,
            cap: table.cap,
            tail_bound: table.tail_bound,
            family: table.family.clone(),
        }
    }

    pub fn n_species(&self) -> usize {
        self.a.len()
    }

    pub fn kappa(&self, p: usize, q: usize, r: usize) -> f64 {
        let n = self.n_species();
        self.kappa3[(p * n + q) * n + r]
    }

    pub fn table(&self, rel_tol: f64) -> Result<EnsembleTable, EnsembleError> {
        build_table(&self.family, &self.phi, rel_tol)
    }
}

pub fn point_at_fugacity(family: &Arc<RateFamily>, phi: &[f64], rel_tol: f64) -> Result<DensityPoint, EnsembleError> {
    Ok(DensityPoint::from_table(&build_table(family, phi, rel_tol)?))
}

/// Newton iteration on `R(phi) = a` in the chemical potential `log phi`,
/// where the Jacobian of `a` is `Gamma`.
pub fn fugacity_of_density(family: &Arc<RateFamily>, a: &[f64], tol: f64) -> Result<DensityPoint, EnsembleError> {
    fugacity_of_density_with(family, a, tol, DEFAULT_REL_TOL)
}

pub fn fugacity_of_density_with(
    family: &Arc<RateFamily>,
    a: &[f64],
    tol: f64,
    rel_tol: f64,
) -> Result<DensityPoint, EnsembleError> {
    let n = family.n_species();
    if a.len() != n || a.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
        return Err(EnsembleError::Domain(a.to_vec()));
    }
    let target = DVector::from_column_slice(a);
    let mut lam = DVector::from_iterator(n, a.iter().map(|x| x.ln()));
    let eval = |lam: &DVector<f64>| -> Result<(EnsembleTable, DVector<f64>), EnsembleError> {
        let phi: Vec<f64> = lam.iter().map(|l| l.exp()).collect();
        let t = build_table(family, &phi, rel_tol)?;
        let r = DVector::from_vec(t.density()) - &target;
        Ok((t, r))
    };
    let (mut table, mut res) = match eval(&lam) {
        Ok(v) => v,
        Err(EnsembleError::OutsideDomain { .. }) | Err(EnsembleError::Truncation(_)) => {
            // start from a small fugacity inside the domain
            lam = DVector::from_element(n, -3.0);
            eval(&lam)?
        }
        Err(e) => return Err(e),
    };
    let mut polished = 0;
    for _ in 0..200 {
        let rn = res.amax();
        if rn < tol {
            polished += 1;
            if polished > 1 || rn == 0.0 {
                return Ok(DensityPoint { a: a.to_vec(), ..DensityPoint::from_table(&table) });
            }
        }
        let gamma = table.covariance();
        let step = match gamma.clone().lu().solve(&res) {
            Some(s) => s,
            None => return Err(EnsembleError::Singular(f64::INFINITY)),
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial = &lam - &step * t;
            match eval(&trial) {
                Ok((tt, rr)) if rr.amax() < rn || rn < tol => {
                    lam = trial;
                    table = tt;
                    res = rr;
                    accepted = true;
                    break;
                }
                Ok(_) | Err(EnsembleError::OutsideDomain { .. }) | Err(EnsembleError::Truncation(_)) => t *= 0.5,
                Err(e) => return Err(e),
            }
        }
        if !accepted {
            if res.amax() < tol {
                return Ok(DensityPoint { a: a.to_vec(), ..DensityPoint::from_table(&table) });
            }
            if n == 1 {
                return bisect_single(family, a[0], tol, rel_tol);
            }
            break;
        }
    }
    if res.amax() < tol {
        return Ok(DensityPoint { a: a.to_vec(), ..DensityPoint::from_table(&table) });
    }
    if n == 1 {
        return bisect_single(family, a[0], tol, rel_tol);
    }
    Err(EnsembleError::NonConvergence { phi: table.phi.clone(), residual: res.amax() })
}

fn bisect_single(family: &Arc<RateFamily>, a: f64, tol: f64, rel_tol: f64) -> Result<DensityPoint, EnsembleError> {
    let dens = |l: f64| build_table(family, &[l.exp()], rel_tol).map(|t| t.density()[0]);
    let mut lo = -40.0;
    let mut hi = 0.0;
    while dens(hi).map(|d| d < a).unwrap_or(false) {
        lo = hi;
        hi += 1.0;
        if hi > 50.0 {
            return Err(EnsembleError::Domain(vec![a]));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        match dens(mid) {
            Ok(d) if d < a => lo = mid,
            _ => hi = mid,
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    let table = build_table(family, &[lo.exp()], rel_tol)?;
    let r = (table.density()[0] - a).abs();
    if r < tol {
        Ok(DensityPoint { a: vec![a], ..DensityPoint::from_table(&table) })
    } else {
        Err(EnsembleError::NonConvergence { phi: vec![lo.exp()], residual: r })
    }
}

fn checked_inverse(gamma: &DMatrix<f64>) -> Result<DMatrix<f64>, EnsembleError> {
    let eig = gamma.clone().symmetric_eigen();
    let max = eig.eigenvalues.amax();
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(cond <= 1e12) {
        return Err(EnsembleError::Singular(cond));
    }
    gamma.clone().try_inverse().ok_or(EnsembleError::Singular(cond))
}

/// `grad Phi = diag(g~) Gamma^{-1}`.
pub fn grad_tilde_g(point: &DensityPoint) -> Result<DMatrix<f64>, EnsembleError> {
    let inv = checked_inverse(&point.gamma)?;
    let d = DMatrix::from_diagonal(&DVector::from_column_slice(&point.tilde_g));
    Ok(d * inv)
}

/// Hessian of `g~_i` in the density from the cumulant expansion:
/// `g~_i M_il M_ij - g~_i sum_pqm M_ip kappa_pqm M_qj M_ml` with `M = Gamma^{-1}`.
pub fn hess_tilde_g(point: &DensityPoint, i: usize) -> Result<DMatrix<f64>, EnsembleError> {
    let n = point.n_species();
    let m = checked_inverse(&point.gamma)?;
    let g = point.tilde_g[i];
    let mut h = DMatrix::zeros(n, n);
    for j in 0..n {
        for l in 0..n {
            let mut s = 0.0;
            for p in 0..n {
                for q in 0..n {
                    for r in 0..n {
                        s += m[(i, p)] * point.kappa(p, q, r) * m[(q, j)] * m[(r, l)];
                    }
                }
            }
            h[(j, l)] = g * (m[(i, l)] * m[(i, j)] - s);
        }
    }
    Ok(h)
}

/// Hessians of every `g~_i` by nested five-point differences of `Phi`.
pub fn hess_tilde_g_fd(family: &Arc<RateFamily>, a: &[f64], h: f64) -> Result<Vec<DMatrix<f64>>, EnsembleError> {
    let n = a.len();
    let phi_at = |x: &[f64]| -> Result<Vec<f64>, EnsembleError> {
        Ok(fugacity_of_density_with(family, x, 1e-14, 1e-16)?.phi)
    };
    let w = [(-2.0, 1.0), (-1.0, -8.0), (1.0, 8.0), (2.0, -1.0)];
    let mut out = vec![DMatrix::zeros(n, n); n];
    for j in 0..n {
        for l in j..n {
            let mut acc = vec![0.0; n];
            for &(sj, wj) in &w {
                for &(sl, wl) in &w {
                    let mut x = a.to_vec();
                    x[j] += sj * h;
                    x[l] += sl * h;
                    let p = phi_at(&x)?;
                    for i in 0..n {
                        acc[i] += wj * wl * p[i];
                    }
                }
            }
            for i in 0..n {
                let v = acc[i] / (144.0 * h * h);
                out[i][(j, l)] = v;
                out[i][(l, j)] = v;
            }
        }
    }
    Ok(out)
}
