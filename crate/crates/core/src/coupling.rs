//! Coupling tensor of the limiting Burgers system, rotations and the
//! two-species decoupling scan.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::ensemble::{hess_tilde_g, hess_tilde_g_fd, DensityPoint, EnsembleError};
use crate::frame::{check_frame, DEFAULT_TOL};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum CouplingError {
    #[error("frame condition fails at the point (offdiag {offdiag:e}, ratio {ratio:e})")]
    FrameViolated { offdiag: f64, ratio: f64 },
    #[error("cumulant and finite-difference Hessians disagree by {0:e}")]
    CrossCheck(f64),
    #[error("rotation is not orthogonal (deviation {0:e})")]
    NotOrthogonal(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("grid size {0} is below 16")]
    Grid(usize),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

/// Dense `n x n x n` array indexed as `[i][j][l]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tensor3 {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(n: usize) -> Self {
        Tensor3 { n, data: vec![0.0; n * n * n] }
    }

    pub fn get(&self, i: usize, j: usize, l: usize) -> f64 {
        self.data[(i * self.n + j) * self.n + l]
    }

    pub fn set(&mut self, i: usize, j: usize, l: usize, v: f64) {
        let n = self.n;
        self.data[(i * n + j) * n + l] = v;
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CouplingTensor {
    pub n: usize,
    pub c: f64,
    pub lambda: f64,
    pub q: Vec<f64>,
    /// `d_j d_l g~_i`; absent after a rotation.
    pub gamma_raw: Option<Tensor3>,
    /// `(c / lambda^{3/2}) (q_j q_l / q_i) gamma_raw`.
    pub gamma_norm: Tensor3,
    /// Largest deviation between the cumulant and finite-difference Hessians.
    pub fd_discrepancy: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct BuildOptions {
    pub frame_tol: f64,
    pub fd_check: bool,
    pub fd_step: f64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { frame_tol: 1e-7, fd_check: true, fd_step: 2e-3 }
    }
}

pub fn build_tensor(point: &DensityPoint, c: f64) -> Result<CouplingTensor, CouplingError> {
    build_tensor_with(point, c, BuildOptions::default())
}

pub fn build_tensor_with(point: &DensityPoint, c: f64, opts: BuildOptions) -> Result<CouplingTensor, CouplingError> {
    let n = point.n_species();
    let cert = check_frame(point, opts.frame_tol.max(DEFAULT_TOL));
    if !cert.holds {
        return Err(CouplingError::FrameViolated { offdiag: cert.offdiag_residual, ratio: cert.ratio_residual });
    }
    let hess: Vec<DMatrix<f64>> = (0..n).map(|i| hess_tilde_g(point, i)).collect::<Result<_, _>>()?;
    let mut fd_discrepancy = None;
    if opts.fd_check {
        let fd = hess_tilde_g_fd(&point.family, &point.a, opts.fd_step * point.a.iter().cloned().fold(1.0, f64::min))?;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                for l in 0..n {
                    let v = hess[i][(j, l)];
                    let d = (v - fd[i][(j, l)]).abs();
                    let allowed = 1e-6f64.max(1e-4 * v.abs());
                    worst = worst.max(d);
                    if d > allowed {
                        return Err(CouplingError::CrossCheck(d));
                    }
                }
            }
        }
        fd_discrepancy = Some(worst);
    }
    let q: Vec<f64> = point.tilde_g.iter().map(|g| g.sqrt()).collect();
    let lambda = cert.lambda;
    let mut raw = Tensor3::zeros(n);
    let mut norm = Tensor3::zeros(n);
    let pre = c / lambda.powf(1.5);
    for i in 0..n {
        for j in 0..n {
            for l in 0..n {
                let v = hess[i][(j, l)];
                raw.set(i, j, l, v);
                norm.set(i, j, l, pre * q[j] * q[l] / q[i] * v);
            }
        }
    }
    Ok(CouplingTensor { n, c, lambda, q, gamma_raw: Some(raw), gamma_norm: norm, fd_discrepancy })
}

/// `max |G^i_jl - G^i_lj|, |G^i_jl - G^j_il|` over the normalized tensor.
pub fn trilinear_residual(tensor: &CouplingTensor) -> f64 {
    let t = &tensor.gamma_norm;
    let n = t.n;
    let mut r: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            for l in 0..n {
                let v = t.get(i, j, l);
                r = r.max((v - t.get(i, l, j)).abs()).max((v - t.get(j, i, l)).abs());
            }
        }
    }
    r
}

/// `(sigma o G)^i_jl = sum sigma_ii' G^i'_j'l' sigma_jj' sigma_ll'`.
pub fn rotate_tensor(sigma: &DMatrix<f64>, tensor: &CouplingTensor) -> Result<CouplingTensor, CouplingError> {
    let n = tensor.n;
    if sigma.nrows() != n || sigma.ncols() != n {
        return Err(CouplingError::Dimension(format!("sigma is {}x{}, tensor has n = {n}", sigma.nrows(), sigma.ncols())));
    }
    let dev = (sigma * sigma.transpose() - DMatrix::identity(n, n)).amax();
    if dev > 1e-12 {
        return Err(CouplingError::NotOrthogonal(dev));
    }
    let g = &tensor.gamma_norm;
    let mut out = Tensor3::zeros(n);
    for i in 0..n {
        for j in 0..n {
            for l in 0..n {
                let mut s = 0.0;
                for a in 0..n {
                    for b in 0..n {
                        for d in 0..n {
                            s += sigma[(i, a)] * g.get(a, b, d) * sigma[(j, b)] * sigma[(l, d)];
                        }
                    }
                }
                out.set(i, j, l, s);
            }
        }
    }
    Ok(CouplingTensor {
        n,
        c: tensor.c,
        lambda: tensor.lambda,
        q: tensor.q.clone(),
        gamma_raw: None,
        gamma_norm: out,
        fd_discrepancy: None,
    })
}

pub fn rotation(psi: f64) -> DMatrix<f64> {
    let (s, c) = psi.sin_cos();
    DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Decoupleability {
    Fully { psi: f64 },
    Partially { psi: Vec<f64> },
    NotDecoupleable,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecoupleScan {
    pub psi: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub min_max_margin: f64,
    pub argmin_psi: f64,
    pub f_zeros: Vec<f64>,
    pub classification: Decoupleability,
}

struct Entries {
    g111: f64,
    g222: f64,
    g211: f64,
    g122: f64,
}

fn eval_f(e: &Entries, psi: f64) -> f64 {
    let (s, c) = psi.sin_cos();
    c * c * s * e.g111 + s * s * c * e.g222 + (c * c * c - 2.0 * c * s * s) * e.g211 + (s * s * s - 2.0 * s * c * c) * e.g122
}

fn eval_g(e: &Entries, psi: f64) -> f64 {
    let (s, c) = psi.sin_cos();
    s * s * c * e.g111 - c * c * s * e.g222 + (2.0 * s * c * c - s * s * s) * e.g211 + (c * c * c - 2.0 * c * s * s) * e.g122
}

pub const COMMON_ZERO_TOL: f64 = 1e-9;

pub fn decouple_scan(tensor: &CouplingTensor, grid_size: usize) -> Result<DecoupleScan, CouplingError> {
    if tensor.n != 2 {
        return Err(CouplingError::Dimension(format!("decoupling scan needs n = 2, got {}", tensor.n)));
    }
    if grid_size < 16 {
        return Err(CouplingError::Grid(grid_size));
    }
    let t = &tensor.gamma_norm;
    let e = Entries { g111: t.get(0, 0, 0), g222: t.get(1, 1, 1), g211: t.get(1, 0, 0), g122: t.get(0, 1, 1) };
    let two_pi = 2.0 * std::f64::consts::PI;
    let psi: Vec<f64> = (0..grid_size).map(|j| two_pi * j as f64 / grid_size as f64).collect();
    let f: Vec<f64> = psi.iter().map(|p| eval_f(&e, *p)).collect();
    let g: Vec<f64> = psi.iter().map(|p| eval_g(&e, *p)).collect();
    let margin_at = |p: f64| eval_f(&e, p).abs().max(eval_g(&e, p).abs());

    let (mut best_i, mut best) = (0, f64::INFINITY);
    for j in 0..grid_size {
        let m = f[j].abs().max(g[j].abs());
        if m < best {
            best = m;
            best_i = j;
        }
    }
    // golden-section refinement around the grid minimum
    let h = two_pi / grid_size as f64;
    let (mut lo, mut hi) = (psi[best_i] - h, psi[best_i] + h);
    let gr = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..100 {
        let x1 = hi - gr * (hi - lo);
        let x2 = lo + gr * (hi - lo);
        if margin_at(x1) < margin_at(x2) {
            hi = x2;
        } else {
            lo = x1;
        }
    }
    let refined = 0.5 * (lo + hi);
    let (argmin, margin) = if margin_at(refined) < best { (refined, margin_at(refined)) } else { (psi[best_i], best) };

    let f_zeros = zeros_of(|p| eval_f(&e, p), &psi, &f);
    let fully = if f.iter().all(|v| v.abs() < 1e-14) {
        // F vanishes identically; common zeros are the zeros of G
        zeros_of(|p| eval_g(&e, p), &psi, &g).into_iter().next().or(if g.iter().all(|v| v.abs() < 1e-14) { Some(0.0) } else { None })
    } else {
        f_zeros.iter().copied().find(|p| eval_g(&e, *p).abs() < COMMON_ZERO_TOL)
    };
    let classification = match fully {
        Some(p) => Decoupleability::Fully { psi: p },
        None if !f_zeros.is_empty() => Decoupleability::Partially { psi: f_zeros.clone() },
        None => Decoupleability::NotDecoupleable,
    };
    Ok(DecoupleScan { psi, f, g, min_max_margin: margin, argmin_psi: argmin, f_zeros, classification })
}

fn zeros_of<F: Fn(f64) -> f64>(fun: F, psi: &[f64], vals: &[f64]) -> Vec<f64> {
    let m = psi.len();
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut out = Vec::new();
    for j in 0..m {
        let (a, fa) = (psi[j], vals[j]);
        let (b, fb) = if j + 1 < m { (psi[j + 1], vals[j + 1]) } else { (two_pi, fun(two_pi)) };
        if fa == 0.0 {
            out.push(a);
            continue;
        }
        if fa.signum() == fb.signum() || fb == 0.0 {
            continue;
        }
        let (mut lo, mut hi, flo) = (a, b, fa);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let fm = fun(mid);
            if fm == 0.0 {
                lo = mid;
                hi = mid;
                break;
            }
            if fm.signum() == flo.signum() {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-15 {
                break;
            }
        }
        out.push(0.5 * (lo + hi));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(g111: f64, g222: f64, g211: f64, g122: f64) -> CouplingTensor {
        // fully symmetric 2x2x2 tensor from its four independent entries
        let mut t = Tensor3::zeros(2);
        let val = |a: usize, b: usize, d: usize| match a + b + d {
            0 => g111,
            3 => g222,
            1 => g211,
            _ => g122,
        };
        for a in 0..2 {
            for b in 0..2 {
                for d in 0..2 {
                    t.set(a, b, d, val(a, b, d));
                }
            }
        }
        CouplingTensor { n: 2, c: 1.0, lambda: 1.0, q: vec![1.0, 1.0], gamma_raw: None, gamma_norm: t, fd_discrepancy: None }
    }

    #[test]
    fn f_is_the_rotated_cross_entry() {
        let t = synthetic(0.7, -1.3, 0.4, 0.25);
        let e = Entries { g111: 0.7, g222: -1.3, g211: 0.4, g122: 0.25 };
        for psi in [0.0, 0.3, 1.1, 2.5, 4.0] {
            let r = rotate_tensor(&rotation(psi), &t).unwrap();
            assert!((r.gamma_norm.get(0, 0, 1) - eval_f(&e, psi)).abs() < 1e-14);
            assert!((r.gamma_norm.get(1, 0, 1) - eval_g(&e, psi)).abs() < 1e-14);
        }
        assert_eq!(eval_f(&e, 0.0), 0.4);
        assert!((eval_f(&e, std::f64::consts::PI) + 0.4).abs() < 1e-15);
    }

    #[test]
    fn zero_tensor_is_fully_decoupleable() {
        let s = decouple_scan(&synthetic(0.0, 0.0, 0.0, 0.0), 100).unwrap();
        assert!(matches!(s.classification, Decoupleability::Fully { .. }));
        assert_eq!(s.min_max_margin, 0.0);
    }

    #[test]
    fn diagonal_tensor_decouples_at_zero() {
        let s = decouple_scan(&synthetic(0.8, -0.6, 0.0, 0.0), 1000).unwrap();
        match s.classification {
            Decoupleability::Fully { psi } => assert!(psi.abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rotation_checks() {
        let t = synthetic(0.7, -1.3, 0.4, 0.25);
        let id = rotate_tensor(&DMatrix::identity(2, 2), &t).unwrap();
        assert_eq!(id.gamma_norm, t.gamma_norm);
        assert!(rotate_tensor(&DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]), &t).is_err());
        let a = rotate_tensor(&rotation(0.4), &rotate_tensor(&rotation(1.3), &t).unwrap()).unwrap();
        let b = rotate_tensor(&(rotation(0.4) * rotation(1.3)), &t).unwrap();
        for (x, y) in a.gamma_norm.data.iter().zip(&b.gamma_norm.data) {
            assert!((x - y).abs() < 1e-12);
        }
        // a quarter turn maps species 1 onto species 2 up to sign
        let q = rotate_tensor(&rotation(std::f64::consts::FRAC_PI_2), &t).unwrap();
        assert!((q.gamma_norm.get(0, 0, 0) - 1.3).abs() < 1e-14);
        assert!((q.gamma_norm.get(1, 1, 1) - 0.7).abs() < 1e-14);
        assert!(trilinear_residual(&q) < 1e-14);
    }

    #[test]
    fn residual_detects_perturbation() {
        let mut t = synthetic(0.7, -1.3, 0.4, 0.25);
        assert_eq!(trilinear_residual(&t), 0.0);
        let v = t.gamma_norm.get(0, 0, 1);
        t.gamma_norm.set(0, 0, 1, v + 1e-3);
        assert!(trilinear_residual(&t) >= 1e-3 - 1e-15);
    }

    #[test]
    fn small_grid_rejected() {
        assert!(matches!(decouple_scan(&synthetic(1.0, 1.0, 1.0, 1.0), 8), Err(CouplingError::Grid(8))));
    }
}
