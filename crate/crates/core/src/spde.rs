//! Spectral reference integrators for the limiting equations.
//!
//! Coefficients follow `Y_k = int Y(u) exp(2 pi i k u) du`, so that
//! `Y(cos_k) = Re Y_k` and `Y(sin_k) = Im Y_k`. Modes `0 <= k < K/2` are
//! stored; negative modes are conjugates and the Nyquist mode is zero.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64 as C64;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::{Fft, FftPlanner};
use serde::Serialize;
use thiserror::Error;

use crate::coupling::{CouplingTensor, Tensor3};
use crate::ensemble::DensityPoint;
use crate::fields::{FieldRecord, FieldSeries, FrameSpec, Part};

pub const BLOWUP: f64 = 1e6;

#[derive(Debug, Error)]
pub enum SpdeError {
    #[error("matrix A is not symmetric positive definite: {0}")]
    Spectrum(String),
    #[error("blowup at step {step} (t = {t}): amplitude {amplitude:.3e} at species {species}, mode {mode}")]
    Blowup { step: u64, t: f64, amplitude: f64, species: usize, mode: usize },
    #[error("mollifier width {eps} below the resolution 2 pi / K = {floor}")]
    UnderResolved { eps: f64, floor: f64 },
    #[error("tensor unavailable: {0}")]
    Tensor(String),
    #[error("grid size {0} must be even and at least 8")]
    Grid(usize),
}

fn sym_sqrt(m: &DMatrix<f64>, power: f64) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.powf(power)));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// Matrices of the linear equation at a reference density.
#[derive(Debug, Clone, Serialize)]
pub struct SpectralSetup {
    pub n: usize,
    /// Grid size `K`.
    pub grid: usize,
    pub c: f64,
    /// Include the transport term; off in a co-moving frame.
    pub transport: bool,
    #[serde(skip)]
    pub a: DMatrix<f64>,
    pub mu: Vec<f64>,
    #[serde(skip)]
    pub eig: DMatrix<f64>,
    /// `Gamma^{1/2} E`
    #[serde(skip)]
    pub t: DMatrix<f64>,
    #[serde(skip)]
    pub t_inv: DMatrix<f64>,
    #[serde(skip)]
    pub gamma: DMatrix<f64>,
}

impl SpectralSetup {
    pub fn new(point: &DensityPoint, c: f64, grid: usize, transport: bool) -> Result<Self, SpdeError> {
        if grid < 8 || grid % 2 == 1 {
            return Err(SpdeError::Grid(grid));
        }
        let n = point.n_species();
        let gamma = point.gamma.clone();
        let gh = sym_sqrt(&gamma, 0.5);
        let gih = sym_sqrt(&gamma, -0.5);
        let a = &gih * DMatrix::from_diagonal(&DVector::from_vec(point.tilde_g.clone())) * &gih;
        let asym = (&a - a.transpose()).abs().max();
        if asym > 1e-12 * a.abs().max().max(1.0) {
            return Err(SpdeError::Spectrum(format!("asymmetry {asym:e}")));
        }
        let a = (&a + a.transpose()) * 0.5;
        let e = SymmetricEigen::new(a.clone());
        let mu: Vec<f64> = e.eigenvalues.iter().cloned().collect();
        if mu.iter().any(|m| !(*m > 0.0)) {
            return Err(SpdeError::Spectrum(format!("eigenvalues {mu:?}")));
        }
        let t = &gh * &e.eigenvectors;
        let t_inv = e.eigenvectors.transpose() * &gih;
        Ok(SpectralSetup { n, grid, c, transport, a, mu, eig: e.eigenvectors, t, t_inv, gamma })
    }

    pub fn modes(&self) -> usize {
        self.grid / 2
    }

    /// Decay rate of eigenmode `a` at wavenumber `k`.
    pub fn beta(&self, a: usize, k: usize) -> C64 {
        let w = 2.0 * PI * k as f64;
        let drift = if self.transport { 2.0 * self.c * self.mu[a] * w } else { 0.0 };
        C64::new(0.5 * self.mu[a] * w * w, -drift)
    }
}

#[derive(Debug, Clone)]
pub struct SpectralState {
    pub setup: Arc<SpectralSetup>,
    /// `[species * modes + k]`
    pub coeffs: Vec<C64>,
    pub time: f64,
    pub steps: u64,
}

fn circular<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

impl SpectralState {
    /// Stationary draw: white noise with covariance `Gamma`.
    pub fn white_noise<R: Rng + ?Sized>(setup: Arc<SpectralSetup>, rng: &mut R) -> Self {
        let (n, m) = (setup.n, setup.modes());
        let mut coeffs = vec![C64::new(0.0, 0.0); n * m];
        for k in 0..m {
            let z: Vec<C64> = (0..n)
                .map(|_| if k == 0 { C64::new(rng.sample(StandardNormal), 0.0) } else { circular(rng) })
                .collect();
            for i in 0..n {
                coeffs[i * m + k] = (0..n).map(|a| setup.t[(i, a)] * z[a]).sum();
            }
        }
        SpectralState { setup, coeffs, time: 0.0, steps: 0 }
    }

    pub fn coeff(&self, species: usize, k: usize) -> C64 {
        self.coeffs[species * self.setup.modes() + k]
    }

    /// Field values on the grid `u = m / K`, one vector per species.
    pub fn grid_values(&self) -> Vec<Vec<f64>> {
        let (n, m, kk) = (self.setup.n, self.setup.modes(), self.setup.grid);
        let fft = FftPlanner::new().plan_fft_forward(kk);
        (0..n)
            .map(|i| {
                let mut buf = full_spectrum(&self.coeffs[i * m..(i + 1) * m], kk);
                fft.process(&mut buf);
                buf.iter().map(|v| v.re).collect()
            })
            .collect()
    }

    fn check(&self) -> Result<(), SpdeError> {
        let m = self.setup.modes();
        for (j, c) in self.coeffs.iter().enumerate() {
            let amp = c.norm();
            if !(amp <= BLOWUP) {
                return Err(SpdeError::Blowup { step: self.steps, t: self.time, amplitude: amp, species: j / m, mode: j % m });
            }
        }
        Ok(())
    }
}

fn full_spectrum(half: &[C64], grid: usize) -> Vec<C64> {
    let mut buf = vec![C64::new(0.0, 0.0); grid];
    buf[0] = C64::new(half[0].re, 0.0);
    for k in 1..half.len() {
        buf[k] = half[k];
        buf[grid - k] = half[k].conj();
    }
    buf
}

/// Exact linear update with an optional constant forcing in the original
/// coordinates, integrated by the exponential-Euler rule.
fn linear_update<R: Rng + ?Sized>(state: &mut SpectralState, dt: f64, forcing: Option<&[C64]>, rng: &mut R) {
    let setup = state.setup.clone();
    let (n, m) = (setup.n, setup.modes());
    let mut z = vec![C64::new(0.0, 0.0); n];
    for k in 1..m {
        for a in 0..n {
            z[a] = (0..n).map(|i| setup.t_inv[(a, i)] * state.coeffs[i * m + k]).sum();
        }
        let fz: Option<Vec<C64>> =
            forcing.map(|f| (0..n).map(|a| (0..n).map(|i| setup.t_inv[(a, i)] * f[i * m + k]).sum()).collect());
        let w2 = (2.0 * PI * k as f64).powi(2);
        for a in 0..n {
            let bdt = setup.beta(a, k) * dt;
            let decay = (-bdt).exp();
            let mut next = decay * z[a];
            if let Some(fz) = &fz {
                let phi1 = if bdt.norm() < 1e-8 { C64::new(1.0, 0.0) - bdt * 0.5 } else { (1.0 - decay) / bdt };
                next += phi1 * dt * fz[a];
            }
            let var = -(-setup.mu[a] * w2 * dt).exp_m1();
            z[a] = next + circular(rng) * var.sqrt();
        }
        for i in 0..n {
            state.coeffs[i * m + k] = (0..n).map(|a| setup.t[(i, a)] * z[a]).sum();
        }
    }
    state.time += dt;
    state.steps += 1;
}

/// Exact step of the linear equation.
pub fn ou_exact_step<R: Rng + ?Sized>(state: &mut SpectralState, dt: f64, rng: &mut R) {
    linear_update(state, dt, None, rng);
}

/// Stationary `E[Y^i_t(pa) Y^j_{t+tau}(pb)]` for the test functions `cos_k`, `sin_k`.
#[allow(clippy::too_many_arguments)]
pub fn ou_correlation(setup: &SpectralSetup, k: u32, i: usize, j: usize, tau: f64, pa: Part, pb: Part) -> f64 {
    let n = setup.n;
    let c: C64 = if k == 0 {
        let v = if pa == Part::Cos && pb == Part::Cos { setup.gamma[(j, i)] } else { 0.0 };
        return v;
    } else {
        (0..n).map(|a| setup.t[(j, a)] * (-setup.beta(a, k as usize) * tau).exp() * setup.t[(i, a)]).sum()
    };
    match (pa, pb) {
        (Part::Cos, Part::Cos) | (Part::Sin, Part::Sin) => 0.5 * c.re,
        (Part::Cos, Part::Sin) => 0.5 * c.im,
        (Part::Sin, Part::Cos) => -0.5 * c.im,
    }
}

/// Fourier transform of the mollifier: box of half-width `eps` smoothed by a
/// Gaussian of width `eps / 8`.
pub fn mollifier_hat(eps: f64, k: usize) -> f64 {
    let x = 2.0 * PI * k as f64 * eps;
    let sinc = if x == 0.0 { 1.0 } else { x.sin() / x };
    sinc * (-0.5 * (x / 8.0).powi(2)).exp()
}

/// Exponential-Euler integrator for the mollified quadratic equation
/// `dY^i = linear + c sum_jk H^i_jk G * grad((G * Y^j)(G * Y^k)) + noise`.
pub struct BurgersIntegrator {
    pub eps: f64,
    pub c: f64,
    pub tensor: Tensor3,
    ghat: Vec<f64>,
    mask: Vec<bool>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    grid: usize,
}

impl BurgersIntegrator {
    /// `hessian` holds `d_j d_k g~_i` as `[i][j][k]`.
    pub fn new(setup: &SpectralSetup, hessian: Tensor3, c: f64, eps: f64) -> Result<Self, SpdeError> {
        let floor = 2.0 * PI / setup.grid as f64;
        if eps < floor {
            return Err(SpdeError::UnderResolved { eps, floor });
        }
        let m = setup.modes();
        let cutoff = setup.grid as f64 / 3.0;
        let mut planner = FftPlanner::new();
        Ok(BurgersIntegrator {
            eps,
            c,
            tensor: hessian,
            ghat: (0..m).map(|k| mollifier_hat(eps, k)).collect(),
            mask: (0..m).map(|k| (k as f64) < cutoff).collect(),
            fwd: planner.plan_fft_forward(setup.grid),
            inv: planner.plan_fft_inverse(setup.grid),
            grid: setup.grid,
        })
    }

    pub fn from_tensor(setup: &SpectralSetup, tensor: &CouplingTensor, eps: f64) -> Result<Self, SpdeError> {
        let raw = tensor.gamma_raw.clone().ok_or_else(|| SpdeError::Tensor("rotated tensor has no raw Hessian".into()))?;
        Self::new(setup, raw, tensor.c, eps)
    }

    /// Nonlinear drift in the original coordinates, `[species * modes + k]`.
    pub fn drift(&self, state: &SpectralState) -> Vec<C64> {
        let (n, m, kk) = (state.setup.n, state.setup.modes(), self.grid);
        let smooth: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let half: Vec<C64> = (0..m)
                    .map(|k| if self.mask[k] { state.coeffs[i * m + k] * self.ghat[k] } else { C64::new(0.0, 0.0) })
                    .collect();
                let mut buf = full_spectrum(&half, kk);
                self.fwd.process(&mut buf);
                buf.iter().map(|v| v.re).collect()
            })
            .collect();
        let mut out = vec![C64::new(0.0, 0.0); n * m];
        for i in 0..n {
            let mut prod = vec![C64::new(0.0, 0.0); kk];
            for j in 0..n {
                for l in 0..n {
                    let h = self.tensor.get(i, j, l);
                    if h == 0.0 {
                        continue;
                    }
                    for (p, (a, b)) in prod.iter_mut().zip(smooth[j].iter().zip(&smooth[l])) {
                        p.re += h * a * b;
                    }
                }
            }
            self.inv.process(&mut prod);
            for k in 1..m {
                if self.mask[k] {
                    let hat = prod[k] / kk as f64;
                    out[i * m + k] = C64::new(0.0, 2.0 * PI * k as f64) * self.c * self.ghat[k] * hat;
                }
            }
        }
        out
    }

    pub fn step<R: Rng + ?Sized>(&self, state: &mut SpectralState, dt: f64, rng: &mut R) -> Result<(), SpdeError> {
        if self.tensor.is_zero() || self.c == 0.0 {
            linear_update(state, dt, None, rng);
        } else {
            let f = self.drift(state);
            linear_update(state, dt, Some(&f), rng);
        }
        state.check()
    }
}

/// One step with a freshly built integrator.
pub fn burgers_step<R: Rng + ?Sized>(
    state: &mut SpectralState,
    tensor: &CouplingTensor,
    eps: f64,
    dt: f64,
    rng: &mut R,
) -> Result<(), SpdeError> {
    BurgersIntegrator::from_tensor(&state.setup, tensor, eps)?.step(state, dt, rng)
}

/// Accumulates spectral states at record times into the particle field schema.
pub struct SpectralRecorder {
    series: FieldSeries,
}

impl SpectralRecorder {
    pub fn new(n_species: usize, modes: Vec<u32>, frame: FrameSpec) -> Self {
        SpectralRecorder { series: FieldSeries { n_species, modes, frame, decomposed: false, records: Vec::new() } }
    }

    pub fn record(&mut self, state: &SpectralState) {
        let s = &self.series;
        let y = (0..s.n_species)
            .flat_map(|i| s.modes.iter().map(move |k| (i, *k as usize)))
            .map(|(i, k)| if k < state.setup.modes() { state.coeff(i, k) } else { C64::new(0.0, 0.0) })
            .collect();
        self.series.records.push(FieldRecord {
            t: state.time,
            y,
            i: Vec::new(),
            b: Vec::new(),
            k: Vec::new(),
            m: Vec::new(),
            m_acc: Vec::new(),
            qv: Vec::new(),
            rqv: Vec::new(),
            cross: Vec::new(),
        });
    }

    pub fn into_series(self) -> FieldSeries {
        self.series
    }
}

/// Sum field and pairwise differences `a^j h^i - a^i h^j` for `i < j`.
pub fn decouple_transform(h: &[f64], a0: &[f64]) -> (f64, Vec<((usize, usize), f64)>) {
    let n = h.len();
    let mut diffs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            diffs.push(((i, j), a0[j] * h[i] - a0[i] * h[j]));
        }
    }
    (h.iter().sum(), diffs)
}

/// Complex version for spectral coefficients.
pub fn decouple_transform_c(h: &[C64], a0: &[f64]) -> (C64, Vec<((usize, usize), C64)>) {
    let n = h.len();
    let mut diffs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            diffs.push(((i, j), h[i] * a0[j] - h[j] * a0[i]));
        }
    }
    (h.iter().sum(), diffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::point_at_fugacity;
    use crate::kmc::replica_rng;
    use crate::rates::RateFamily;

    fn setup(c: f64, phi: &[f64]) -> Arc<SpectralSetup> {
        let fam = Arc::new(RateFamily::perturbed_walks(3.0, -0.96).unwrap());
        let p = point_at_fugacity(&fam, phi, 1e-14).unwrap();
        Arc::new(SpectralSetup::new(&p, c, 16, true).unwrap())
    }

    #[test]
    fn a_matrix_properties() {
        let s = setup(1.0, &[0.3, 1.5]);
        assert!((&s.a - s.a.transpose()).abs().max() < 1e-12);
        assert!(s.mu.iter().all(|m| *m > 0.0));
        let back = &s.t * s.t.transpose();
        assert!((back - &s.gamma).abs().max() < 1e-12);
    }

    #[test]
    fn independent_walkers_have_identity_a() {
        let fam = Arc::new(RateFamily::independent(2));
        let p = point_at_fugacity(&fam, &[1.0, 1.0], 1e-14).unwrap();
        let s = SpectralSetup::new(&p, 0.5, 16, true).unwrap();
        assert!((s.a.clone() - DMatrix::identity(2, 2)).abs().max() < 1e-10);
        for (pa, pb) in [(Part::Cos, Part::Cos), (Part::Cos, Part::Sin)] {
            let x = ou_correlation(&s, 2, 0, 0, 0.01, pa, pb);
            let y = ou_correlation(&s, 2, 1, 1, 0.01, pa, pb);
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn lag_zero_is_covariance() {
        let s = setup(1.0, &[0.3, 1.5]);
        for i in 0..2 {
            for j in 0..2 {
                let v = ou_correlation(&s, 3, i, j, 0.0, Part::Cos, Part::Cos);
                assert!((v - 0.5 * s.gamma[(i, j)]).abs() < 1e-12);
                assert!(ou_correlation(&s, 3, i, j, 0.0, Part::Cos, Part::Sin).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scalar_autocorrelation() {
        let fam = Arc::new(RateFamily::independent(1));
        let p = point_at_fugacity(&fam, &[1.0], 1e-14).unwrap();
        let s = SpectralSetup::new(&p, 0.0, 16, true).unwrap();
        for k in 1..4u32 {
            let tau = 0.003;
            let want = 0.5 * (-(2.0 * PI * k as f64).powi(2) * tau / 2.0).exp();
            assert!((ou_correlation(&s, k, 0, 0, tau, Part::Cos, Part::Cos) - want).abs() < 1e-14);
        }
    }

    #[test]
    fn one_step_equals_many_in_mean() {
        let s = setup(0.7, &[0.3, 1.5]);
        let mut a = SpectralState::white_noise(s.clone(), &mut replica_rng(1, 0));
        let mut b = a.clone();
        let det = |st: &mut SpectralState, dt: f64, steps: usize| {
            let setup = st.setup.clone();
            let m = setup.modes();
            for _ in 0..steps {
                for k in 1..m {
                    let y: Vec<C64> = (0..2).map(|i| st.coeffs[i * m + k]).collect();
                    let z: Vec<C64> = (0..2).map(|a| (0..2).map(|i| setup.t_inv[(a, i)] * y[i]).sum()).collect();
                    let z: Vec<C64> = (0..2).map(|a| (-setup.beta(a, k) * dt).exp() * z[a]).collect();
                    for i in 0..2 {
                        st.coeffs[i * m + k] = (0..2).map(|a| setup.t[(i, a)] * z[a]).sum();
                    }
                }
            }
        };
        det(&mut a, 0.01, 1);
        det(&mut b, 0.0001, 100);
        for (x, y) in a.coeffs.iter().zip(&b.coeffs) {
            assert!((x - y).norm() < 1e-12 * x.norm().max(1.0));
        }
    }

    #[test]
    fn zero_mode_is_conserved_and_fields_are_real() {
        let s = setup(0.7, &[0.3, 1.5]);
        let mut rng = replica_rng(4, 0);
        let mut st = SpectralState::white_noise(s.clone(), &mut rng);
        let z0: Vec<C64> = (0..2).map(|i| st.coeff(i, 0)).collect();
        for _ in 0..10 {
            ou_exact_step(&mut st, 1e-3, &mut rng);
        }
        for i in 0..2 {
            assert_eq!(st.coeff(i, 0), z0[i]);
        }
        let grid = st.grid_values();
        // imaginary parts vanish by construction; check the inverse map
        let fft = FftPlanner::new().plan_fft_inverse(16);
        let mut buf: Vec<C64> = grid[0].iter().map(|v| C64::new(*v, 0.0)).collect();
        fft.process(&mut buf);
        for k in 0..8 {
            assert!((buf[k] / 16.0 - st.coeff(0, k)).norm() < 1e-12);
        }
    }

    #[test]
    fn zero_tensor_is_bitwise_linear() {
        let s = setup(0.7, &[0.3, 1.5]);
        let start = SpectralState::white_noise(s.clone(), &mut replica_rng(9, 0));
        let integ = BurgersIntegrator::new(&s, Tensor3::zeros(2), 0.7, 0.5).unwrap();
        let (mut a, mut b) = (start.clone(), start);
        let (mut ra, mut rb) = (replica_rng(9, 1), replica_rng(9, 1));
        for _ in 0..50 {
            ou_exact_step(&mut a, 1e-4, &mut ra);
            integ.step(&mut b, 1e-4, &mut rb).unwrap();
        }
        assert!(a.coeffs.iter().zip(&b.coeffs).all(|(x, y)| x.re.to_bits() == y.re.to_bits() && x.im.to_bits() == y.im.to_bits()));
    }

    #[test]
    fn under_resolved_mollifier() {
        let s = setup(0.7, &[0.3, 1.5]);
        assert!(matches!(BurgersIntegrator::new(&s, Tensor3::zeros(2), 0.7, 0.1), Err(SpdeError::UnderResolved { .. })));
    }

    #[test]
    fn decoupled_noises_are_uncorrelated() {
        let a: [f64; 3] = [0.3, 0.5, 0.9];
        let mut rng = replica_rng(12, 0);
        let m = 200_000;
        let mut acc = vec![0.0; 3];
        let mut var = vec![0.0; 3];
        for _ in 0..m {
            let w: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let s: f64 = (0..3).map(|k| a[k].sqrt() * w[k]).sum();
            let mut p = 0;
            for i in 0..3 {
                for j in i + 1..3 {
                    let d = a[i].sqrt() * a[j] * w[i] - a[j].sqrt() * a[i] * w[j];
                    acc[p] += s * d;
                    var[p] += (s * d).powi(2);
                    p += 1;
                }
            }
        }
        for p in 0..3 {
            let mean = acc[p] / m as f64;
            let se = (var[p] / m as f64 - mean * mean).sqrt() / (m as f64).sqrt();
            assert!(mean.abs() < 4.0 * se);
        }
        let (sum, diffs) = decouple_transform(&[1.0], &[0.4]);
        assert_eq!(sum, 1.0);
        assert!(diffs.is_empty());
    }
}
