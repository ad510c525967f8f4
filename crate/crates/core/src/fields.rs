//! Fluctuation fields of a trajectory, their martingale decomposition and
//! replica estimators.
//!
//! Fourier fields are carried as complex sums: for the mode `e_k(u) = exp(2 pi i k u)`,
//! `Y(cos_k) = Re Y(e_k)` and `Y(sin_k) = Im Y(e_k)`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

use crate::ensemble::DensityPoint;
use crate::kmc::{Jump, LatticeState, Observer};

pub const MIN_REPLICAS: usize = 50;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("mollifier under-resolved: eps = {eps} < 2/N = {floor}")]
    UnderResolved { eps: f64, floor: f64 },
    #[error("invalid test function: {0}")]
    Invalid(String),
    #[error("decomposition requested without event hooks")]
    HooksDisabled,
    #[error("incompatible series: {0}")]
    Schema(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TestKind {
    Cos(u32),
    Sin(u32),
    Constant,
    /// Box kernel of half-width `eps` and height `1/(2 eps)` smoothed by a
    /// Gaussian of width `eps/8`.
    Mollifier(f64),
    /// Values at `x/N`.
    Custom(Vec<f64>),
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn mollifier_value(eps: f64, u: f64) -> f64 {
    let s = eps / 8.0;
    let u = u - u.round();
    (-1..=1)
        .map(|m| {
            let v = u + m as f64;
            std_normal_cdf((v + eps) / s) - std_normal_cdf((v - eps) / s)
        })
        .sum::<f64>()
        / (2.0 * eps)
}

/// A test function tabulated on `T_N` with its discrete derivatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub kind: TestKind,
    pub n: usize,
    pub values: Vec<f64>,
    /// `(N/2) (H(x+1) - H(x-1))`
    pub grad: Vec<f64>,
    /// `N^2 (H(x+1) + H(x-1) - 2 H(x))`
    pub lap: Vec<f64>,
}

impl TestFunction {
    pub fn new(kind: TestKind, n: usize) -> Result<Self, FieldError> {
        if n < 3 {
            return Err(FieldError::Invalid(format!("N = {n} too small")));
        }
        match &kind {
            TestKind::Mollifier(eps) if !(*eps > 0.0 && *eps <= 0.4) => {
                return Err(FieldError::Invalid(format!("mollifier width {eps} outside (0, 0.4]")));
            }
            TestKind::Custom(v) if v.len() != n => {
                return Err(FieldError::Invalid(format!("{} values for N = {n}", v.len())));
            }
            _ => {}
        }
        let mut f = TestFunction { kind, n, values: vec![], grad: vec![], lap: vec![] };
        f.values = (0..n).map(|x| f.eval(x as f64 / n as f64)).collect();
        f.grad = f.discrete_grad(0.0);
        let nn = n as f64;
        f.lap = (0..n)
            .map(|x| nn * nn * (f.values[(x + 1) % n] + f.values[(x + n - 1) % n] - 2.0 * f.values[x]))
            .collect();
        if let TestKind::Mollifier(eps) = f.kind {
            let norm = f.l2_sq();
            if norm > 1.0 / eps {
                return Err(FieldError::Invalid(format!("mollifier norm {norm} exceeds 1/eps")));
            }
        }
        Ok(f)
    }

    pub fn cos(k: u32, n: usize) -> Self {
        Self::new(TestKind::Cos(k), n).unwrap()
    }

    pub fn sin(k: u32, n: usize) -> Self {
        Self::new(TestKind::Sin(k), n).unwrap()
    }

    /// Value at a point of the continuum torus; custom tables interpolate linearly.
    pub fn eval(&self, u: f64) -> f64 {
        match &self.kind {
            TestKind::Cos(k) => (2.0 * PI * *k as f64 * u).cos(),
            TestKind::Sin(k) => (2.0 * PI * *k as f64 * u).sin(),
            TestKind::Constant => 1.0,
            TestKind::Mollifier(eps) => mollifier_value(*eps, u),
            TestKind::Custom(v) => {
                let n = self.n as f64;
                let p = (u - u.floor()) * n;
                let x = p.floor();
                let w = p - x;
                let x = x as usize % self.n;
                (1.0 - w) * v[x] + w * v[(x + 1) % self.n]
            }
        }
    }

    /// `nabla^N_x` of `H(. - s)`.
    pub fn discrete_grad(&self, s: f64) -> Vec<f64> {
        let n = self.n as f64;
        (0..self.n).map(|x| 0.5 * n * (self.eval((x as f64 + 1.0) / n - s) - self.eval((x as f64 - 1.0) / n - s))).collect()
    }

    /// `||H||^2` on the continuum torus.
    pub fn l2_sq(&self) -> f64 {
        match &self.kind {
            TestKind::Cos(0) | TestKind::Constant => 1.0,
            TestKind::Sin(0) => 0.0,
            TestKind::Cos(_) | TestKind::Sin(_) => 0.5,
            TestKind::Mollifier(_) => {
                let m = 64 * self.n.max(256);
                (0..m).map(|z| self.eval(z as f64 / m as f64).powi(2)).sum::<f64>() / m as f64
            }
            TestKind::Custom(v) => v.iter().map(|x| x * x).sum::<f64>() / self.n as f64,
        }
    }

    /// `||grad H||^2` on the continuum torus, or its lattice version for tables.
    pub fn grad_l2_sq(&self) -> f64 {
        match &self.kind {
            TestKind::Cos(k) | TestKind::Sin(k) if *k > 0 => 0.5 * (2.0 * PI * *k as f64).powi(2),
            TestKind::Cos(_) | TestKind::Sin(_) | TestKind::Constant => 0.0,
            _ => self.grad.iter().map(|x| x * x).sum::<f64>() / self.n as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Frame {
    Fixed,
    /// Moving at `2 c lambda N^{2 - gamma}` sites per unit macroscopic time.
    Traveling { lambda: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShiftRule {
    /// Continuum shift.
    Exact,
    /// Shift rounded down to a whole number of sites.
    Floor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub frame: Frame,
    pub rule: ShiftRule,
    pub n: usize,
    pub c: f64,
    pub gamma: f64,
}

impl FrameSpec {
    pub fn fixed(n: usize, c: f64, gamma: f64) -> Self {
        FrameSpec { frame: Frame::Fixed, rule: ShiftRule::Exact, n, c, gamma }
    }

    /// Sites per unit time.
    pub fn velocity(&self) -> f64 {
        match self.frame {
            Frame::Fixed => 0.0,
            Frame::Traveling { lambda } => 2.0 * self.c * lambda * (self.n as f64).powf(2.0 - self.gamma),
        }
    }

    pub fn sites(&self, t: f64, rule: ShiftRule) -> f64 {
        let s = self.velocity() * t;
        match rule {
            ShiftRule::Exact => s,
            ShiftRule::Floor => s.floor(),
        }
    }

    /// Shift of the test function on the unit torus at time `t`.
    pub fn shift(&self, t: f64) -> f64 {
        self.sites(t, self.rule) / self.n as f64
    }
}

/// `N^{-1/2} sum_x H(x/N - shift) (alpha^i(x) - a0^i)` for every species.
pub fn eval_field(state: &LatticeState, h: &TestFunction, a0: &[f64], shift: f64) -> Vec<f64> {
    let n = state.n_species();
    let nn = state.n_sites();
    let mut out = vec![0.0; n];
    let shifted: Vec<f64> = if shift == 0.0 {
        h.values.clone()
    } else {
        (0..nn).map(|x| h.eval(x as f64 / nn as f64 - shift)).collect()
    };
    for (x, hv) in shifted.iter().enumerate() {
        let k = state.occupancy(x);
        for i in 0..n {
            out[i] += hv * (k[i] as f64 - a0[i]);
        }
    }
    let norm = (nn as f64).sqrt();
    out.iter_mut().for_each(|v| *v /= norm);
    out
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// `int_{t0}^{t1} exp(-i omega s) ds`
fn phase_integral(omega: f64, t0: f64, t1: f64) -> C64 {
    let d = t1 - t0;
    C64::from_polar(d * sinc(0.5 * omega * d), -0.5 * omega * (t0 + t1))
}

/// `int_{t0}^{t1} exp(-i w floor(v s)) ds`
fn floor_phase_integral(w: f64, v: f64, t0: f64, t1: f64) -> C64 {
    if v == 0.0 || w == 0.0 {
        return C64::new(t1 - t0, 0.0);
    }
    let mut acc = C64::new(0.0, 0.0);
    let mut t = t0;
    let mut m = (v * t0).floor();
    while t < t1 {
        let edge = if v > 0.0 { (m + 1.0) / v } else { m / v };
        let end = edge.min(t1).max(t);
        acc += C64::from_polar(end - t, -w * m);
        t = end;
        m += v.signum();
        if end >= t1 {
            break;
        }
    }
    acc
}

/// Drift coefficients at the reference density.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub a0: Vec<f64>,
    /// `Q_ij = d g~_i / d a^j`, row-major.
    pub q: Vec<f64>,
    pub tilde_g: Vec<f64>,
}

impl Linearization {
    pub fn from_point(p: &DensityPoint) -> Self {
        let n = p.n_species();
        let inv = p.gamma.clone().try_inverse().expect("covariance is positive definite");
        let mut q = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                q[i * n + j] = p.tilde_g[i] * inv[(i, j)];
            }
        }
        Linearization { a0: p.a.clone(), q, tilde_g: p.tilde_g.clone() }
    }
}

/// Field values and decomposition terms at one record time, indexed
/// `[species * modes + mode]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldRecord {
    pub t: f64,
    pub y: Vec<C64>,
    pub i: Vec<C64>,
    pub b: Vec<C64>,
    pub k: Vec<C64>,
    /// `Y_t - Y_0 - I - B - K`
    pub m: Vec<C64>,
    /// Sum of jumps minus the compensator, accumulated independently.
    pub m_acc: Vec<C64>,
    /// Predictable brackets `[cos, sin]`.
    pub qv: Vec<[f64; 2]>,
    /// Sums of squared jumps `[cos, sin]`.
    pub rqv: Vec<[f64; 2]>,
    /// Sums of products of jumps of distinct species, `[pair * modes + mode]`.
    pub cross: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldSeries {
    pub n_species: usize,
    pub modes: Vec<u32>,
    pub frame: FrameSpec,
    pub decomposed: bool,
    pub records: Vec<FieldRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Part {
    Cos,
    Sin,
}

impl Part {
    pub fn of(self, z: C64) -> f64 {
        match self {
            Part::Cos => z.re,
            Part::Sin => z.im,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Part::Cos => "cos",
            Part::Sin => "sin",
        }
    }
}

impl FieldSeries {
    pub fn idx(&self, species: usize, mode_idx: usize) -> usize {
        species * self.modes.len() + mode_idx
    }

    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.t).collect()
    }

    pub fn y(&self, rec: usize, species: usize, mode_idx: usize, part: Part) -> f64 {
        part.of(self.records[rec].y[self.idx(species, mode_idx)])
    }

    /// Long-format rows `(t, field, species, mode, value)`.
    pub fn rows(&self) -> Vec<(f64, String, String, String, f64)> {
        let n = self.n_species;
        let mut out = Vec::new();
        for r in &self.records {
            for i in 0..n {
                for (mi, k) in self.modes.iter().enumerate() {
                    let j = self.idx(i, mi);
                    for part in [Part::Cos, Part::Sin] {
                        let mode = format!("{}{}", part.name(), k);
                        let mut push = |name: &str, v: f64| out.push((r.t, name.to_string(), i.to_string(), mode.clone(), v));
                        push("Y", part.of(r.y[j]));
                        if self.decomposed {
                            push("I", part.of(r.i[j]));
                            push("B", part.of(r.b[j]));
                            push("K", part.of(r.k[j]));
                            push("M", part.of(r.m[j]));
                            push("M_acc", part.of(r.m_acc[j]));
                            let p = if part == Part::Cos { 0 } else { 1 };
                            push("QV", r.qv[j][p]);
                            push("RQV", r.rqv[j][p]);
                        }
                    }
                }
            }
            if self.decomposed {
                let mut pair = 0;
                for a in 0..n {
                    for b in a + 1..n {
                        for (mi, k) in self.modes.iter().enumerate() {
                            let v = r.cross[pair * self.modes.len() + mi];
                            out.push((r.t, "CROSS".into(), format!("{a}:{b}"), format!("cos{k}"), v[0]));
                            out.push((r.t, "CROSS".into(), format!("{a}:{b}"), format!("sin{k}"), v[1]));
                        }
                        pair += 1;
                    }
                }
            }
        }
        out
    }
}

/// Event-level observer of Fourier fields with exact between-event quadrature.
pub struct FieldObserver {
    n_sites: usize,
    n: usize,
    modes: Vec<u32>,
    lin: Linearization,
    frame: FrameSpec,
    p_right: f64,
    decompose: bool,
    phase: Vec<C64>,
    phase2: Vec<C64>,
    lam: Vec<C64>,
    d1: Vec<C64>,
    d2: Vec<f64>,
    e2: Vec<C64>,
    omega: Vec<f64>,
    s: Vec<C64>,
    g: Vec<C64>,
    g2: Vec<C64>,
    g0: Vec<f64>,
    y0: Vec<C64>,
    acc_i: Vec<C64>,
    acc_b: Vec<C64>,
    acc_k: Vec<C64>,
    acc_l: Vec<C64>,
    acc_j: Vec<C64>,
    qv: Vec<[f64; 2]>,
    rqv: Vec<[f64; 2]>,
    cross: Vec<[f64; 2]>,
    ready: bool,
    series: FieldSeries,
    jumps: Vec<C64>,
}

impl FieldObserver {
    pub fn new(
        n_sites: usize,
        modes: Vec<u32>,
        lin: Linearization,
        frame: FrameSpec,
        p_right: f64,
        decompose: bool,
    ) -> Self {
        let n = lin.a0.len();
        let nm = modes.len();
        let nn = n_sites as f64;
        let mut phase = Vec::with_capacity(nm * n_sites);
        let mut phase2 = Vec::with_capacity(nm * n_sites);
        for &k in &modes {
            for x in 0..n_sites {
                let r1 = (k as usize * x) % n_sites;
                let r2 = (2 * k as usize * x) % n_sites;
                phase.push(C64::from_polar(1.0, 2.0 * PI * r1 as f64 / nn));
                phase2.push(C64::from_polar(1.0, 2.0 * PI * r2 as f64 / nn));
            }
        }
        let (p, q) = (p_right, 1.0 - p_right);
        let mut lam = Vec::new();
        let mut d1 = Vec::new();
        let mut d2 = Vec::new();
        let mut e2 = Vec::new();
        let mut omega = Vec::new();
        for &k in &modes {
            let beta = 2.0 * PI * k as f64 / nn;
            let ep = C64::from_polar(1.0, beta) - 1.0;
            let em = C64::from_polar(1.0, -beta) - 1.0;
            lam.push(p * ep + q * em);
            d1.push(C64::new(0.0, nn * beta.sin()));
            d2.push(nn * nn * (2.0 * beta.cos() - 2.0));
            e2.push(p * ep * ep + q * em * em);
            omega.push(beta * frame.velocity());
        }
        let z = C64::new(0.0, 0.0);
        let pairs = n * (n.saturating_sub(1)) / 2;
        FieldObserver {
            n_sites,
            n,
            lin,
            frame,
            p_right,
            decompose,
            phase,
            phase2,
            lam,
            d1,
            d2,
            e2,
            omega,
            s: vec![z; n * nm],
            g: vec![z; n * nm],
            g2: vec![z; n * nm],
            g0: vec![0.0; n],
            y0: vec![z; n * nm],
            acc_i: vec![z; n * nm],
            acc_b: vec![z; n * nm],
            acc_k: vec![z; n * nm],
            acc_l: vec![z; n * nm],
            acc_j: vec![z; n * nm],
            qv: vec![[0.0; 2]; n * nm],
            rqv: vec![[0.0; 2]; n * nm],
            cross: vec![[0.0; 2]; pairs * nm],
            ready: false,
            series: FieldSeries { n_species: n, modes: modes.clone(), frame, decomposed: decompose, records: vec![] },
            jumps: vec![z; n],
            modes,
        }
    }

    pub fn p_right(&self) -> f64 {
        self.p_right
    }

    pub fn into_series(self) -> FieldSeries {
        self.series
    }

    pub fn series(&self) -> &FieldSeries {
        &self.series
    }

    fn init(&mut self, state: &LatticeState) {
        let nm = self.modes.len();
        let nn = self.n_sites;
        for x in 0..nn {
            let occ = state.occupancy(x);
            let r = state.species_rates(x);
            for i in 0..self.n {
                self.g0[i] += r[i];
                for mi in 0..nm {
                    let e = self.phase[mi * nn + x];
                    let e2 = self.phase2[mi * nn + x];
                    self.s[i * nm + mi] += e * occ[i] as f64;
                    self.g[i * nm + mi] += e * r[i];
                    self.g2[i * nm + mi] += e2 * r[i];
                }
            }
        }
        self.y0 = self.current_y(state.time);
        self.ready = true;
    }

    fn theta(&self, mi: usize, t: f64, rule: ShiftRule) -> f64 {
        2.0 * PI * self.modes[mi] as f64 * self.frame.sites(t, rule) / self.n_sites as f64
    }

    fn centered_s(&self, i: usize, mi: usize) -> C64 {
        let mut s = self.s[i * self.modes.len() + mi];
        if self.modes[mi] as usize % self.n_sites == 0 {
            s -= self.n_sites as f64 * self.lin.a0[i];
        }
        s
    }

    fn current_y(&self, t: f64) -> Vec<C64> {
        let nm = self.modes.len();
        let norm = (self.n_sites as f64).sqrt();
        let mut y = Vec::with_capacity(self.n * nm);
        for i in 0..self.n {
            for mi in 0..nm {
                let rot = C64::from_polar(1.0, -self.theta(mi, t, self.frame.rule));
                y.push(rot * self.centered_s(i, mi) / norm);
            }
        }
        y
    }

    fn integrate(&mut self, t0: f64, t1: f64) {
        if t1 <= t0 {
            return;
        }
        let nm = self.modes.len();
        let nn = self.n_sites as f64;
        let rn = nn.sqrt();
        let v = self.frame.velocity();
        let bscale = 2.0 * self.frame.c * nn.powf(0.5 - self.frame.gamma);
        let exact = self.frame.rule == ShiftRule::Exact;
        for mi in 0..nm {
            let w = 2.0 * PI * self.modes[mi] as f64 / nn;
            let om = self.omega[mi];
            let ef = floor_phase_integral(w, v, t0, t1);
            let (e_f, e_f2) = if exact {
                (phase_integral(om, t0, t1), phase_integral(2.0 * om, t0, t1))
            } else {
                (ef, floor_phase_integral(2.0 * w, v, t0, t1))
            };
            let (sb, sd) = ((w * 0.5).sin(), t1 - t0);
            for i in 0..self.n {
                let j = i * nm + mi;
                let gk = self.g[j];
                let sk = self.centered_s(i, mi);
                let lint = nn.powf(1.5) * self.lam[mi] * gk * e_f;
                let dint = if exact { C64::new(0.0, -om) * sk / rn * e_f } else { C64::new(0.0, 0.0) };
                let ii = 0.5 / rn * self.d2[mi] * gk * ef;
                let mut lin = gk;
                for l in 0..self.n {
                    lin -= self.lin.q[i * self.n + l] * self.centered_s(l, mi);
                }
                let bb = bscale * self.d1[mi] * lin * ef;
                self.acc_l[j] += lint;
                self.acc_i[j] += ii;
                self.acc_b[j] += bb;
                self.acc_k[j] += lint + dint - ii - bb;
                if !exact {
                    let before = C64::from_polar(1.0, -self.theta(mi, t0, ShiftRule::Floor));
                    let after = C64::from_polar(1.0, -self.theta(mi, t1, ShiftRule::Floor));
                    self.acc_k[j] += (after - before) * sk / rn;
                }
                let flat = 2.0 * nn * sb * sb * self.g0[i] * sd;
                let osc = 0.5 * nn * (self.e2[mi] * self.g2[j] * e_f2).re;
                self.qv[j][0] += flat + osc;
                self.qv[j][1] += flat - osc;
            }
        }
    }
}

impl Observer for FieldObserver {
    fn on_interval(&mut self, t0: f64, t1: f64, state: &LatticeState) {
        if !self.ready {
            self.init(state);
        }
        if self.decompose {
            self.integrate(t0, t1);
        }
    }

    fn on_record(&mut self, _idx: usize, t: f64, state: &LatticeState) {
        if !self.ready {
            self.init(state);
        }
        let y = self.current_y(t);
        let rec = if self.decompose {
            let m = (0..y.len()).map(|j| y[j] - self.y0[j] - self.acc_i[j] - self.acc_b[j] - self.acc_k[j]).collect();
            let m_acc = (0..y.len()).map(|j| self.acc_j[j] - self.acc_l[j]).collect();
            FieldRecord {
                t,
                y,
                i: self.acc_i.clone(),
                b: self.acc_b.clone(),
                k: self.acc_k.clone(),
                m,
                m_acc,
                qv: self.qv.clone(),
                rqv: self.rqv.clone(),
                cross: self.cross.clone(),
            }
        } else {
            FieldRecord { t, y, i: vec![], b: vec![], k: vec![], m: vec![], m_acc: vec![], qv: vec![], rqv: vec![], cross: vec![] }
        };
        self.series.records.push(rec);
    }

    fn on_jump(&mut self, t: f64, jump: &Jump, state: &LatticeState) {
        if !self.ready {
            return;
        }
        let nm = self.modes.len();
        let nn = self.n_sites;
        let rn = (nn as f64).sqrt();
        let (x, y, sp) = (jump.from, jump.to, jump.species);
        let new_from = state.species_rates(x);
        let new_to = state.species_rates(y);
        for i in 0..self.n {
            let dgx = new_from[i] - jump.old_from[i];
            let dgy = new_to[i] - jump.old_to[i];
            self.g0[i] += dgx + dgy;
            if dgx == 0.0 && dgy == 0.0 {
                continue;
            }
            for mi in 0..nm {
                let j = i * nm + mi;
                self.g[j] += self.phase[mi * nn + x] * dgx + self.phase[mi * nn + y] * dgy;
                self.g2[j] += self.phase2[mi * nn + x] * dgx + self.phase2[mi * nn + y] * dgy;
            }
        }
        for mi in 0..nm {
            let de = self.phase[mi * nn + y] - self.phase[mi * nn + x];
            self.s[sp * nm + mi] += de;
            if !self.decompose {
                continue;
            }
            let rot = C64::from_polar(1.0, -self.theta(mi, t, self.frame.rule));
            for i in 0..self.n {
                self.jumps[i] = if i == sp { rot * de / rn } else { C64::new(0.0, 0.0) };
            }
            let j = sp * nm + mi;
            self.acc_j[j] += self.jumps[sp];
            self.rqv[j][0] += self.jumps[sp].re.powi(2);
            self.rqv[j][1] += self.jumps[sp].im.powi(2);
            let mut pair = 0;
            for a in 0..self.n {
                for b in a + 1..self.n {
                    let c = &mut self.cross[pair * nm + mi];
                    c[0] += self.jumps[a].re * self.jumps[b].re;
                    c[1] += self.jumps[a].im * self.jumps[b].im;
                    pair += 1;
                }
            }
        }
    }
}

/// Lattice mollifier with its discrete Fourier transform.
pub struct Mollifier {
    pub eps: f64,
    pub n: usize,
    kernel_hat: Vec<C64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Mollifier {
    pub fn new(eps: f64, n: usize) -> Result<Self, FieldError> {
        let floor = 2.0 / n as f64;
        if eps < floor - 1e-12 {
            return Err(FieldError::UnderResolved { eps, floor });
        }
        let g = TestFunction::new(TestKind::Mollifier(eps), n)?;
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let mut kernel_hat: Vec<C64> = g.values.iter().map(|v| C64::new(*v, 0.0)).collect();
        fwd.process(&mut kernel_hat);
        Ok(Mollifier { eps, n, kernel_hat, fwd, inv })
    }

    /// `N^{-1/2} sum_x G((x - z)/N) f(x)` at every lattice point `z`.
    pub fn smooth(&self, f: &[f64]) -> Vec<f64> {
        let mut buf: Vec<C64> = f.iter().map(|v| C64::new(*v, 0.0)).collect();
        self.fwd.process(&mut buf);
        for (b, k) in buf.iter_mut().zip(&self.kernel_hat) {
            *b *= k;
        }
        self.inv.process(&mut buf);
        let s = 1.0 / (self.n as f64 * (self.n as f64).sqrt());
        buf.iter().map(|b| b.re * s).collect()
    }
}

/// Integrand of `A^{i, eps}(H)` at one instant: for each species `i`,
/// `sum_{jk} d_j d_k g~_i (1/N) sum_z nabla^N_z H(. - s) Y^j_z Y^k_z` with `Y^j_z`
/// the mollified field at `z/N`.
pub fn mollified_quadratic_with(
    state: &LatticeState,
    moll: &Mollifier,
    a0: &[f64],
    shift: f64,
    h: &TestFunction,
    hess: &[DMatrix<f64>],
) -> Vec<f64> {
    let n = state.n_species();
    let nn = state.n_sites();
    let smoothed: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let f: Vec<f64> = (0..nn).map(|x| state.occupancy(x)[j] as f64 - a0[j]).collect();
            moll.smooth(&f)
        })
        .collect();
    let grad = h.discrete_grad(shift);
    let mut pairs = vec![0.0; n * n];
    for j in 0..n {
        for k in j..n {
            let v: f64 = (0..nn).map(|z| grad[z] * smoothed[j][z] * smoothed[k][z]).sum::<f64>() / nn as f64;
            pairs[j * n + k] = v;
            pairs[k * n + j] = v;
        }
    }
    (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for j in 0..n {
                for k in 0..n {
                    acc += hess[i][(j, k)] * pairs[j * n + k];
                }
            }
            acc
        })
        .collect()
}

pub fn mollified_quadratic(
    state: &LatticeState,
    eps: f64,
    a0: &[f64],
    shift: f64,
    h: &TestFunction,
    hess: &[DMatrix<f64>],
) -> Result<Vec<f64>, FieldError> {
    let moll = Mollifier::new(eps, state.n_sites())?;
    Ok(mollified_quadratic_with(state, &moll, a0, shift, h, hess))
}

/// `A^{i, eps}_t(H)` for a ladder of widths. The mollified fields are updated at
/// every jump and the time integral is exact between events. `H` must be a
/// single Fourier mode.
pub struct QuadraticObserver {
    pub eps: Vec<f64>,
    pub a0: Vec<f64>,
    pub frame: FrameSpec,
    pub times: Vec<f64>,
    /// `[record][eps * n + species]`
    pub values: Vec<Vec<f64>>,
    n: usize,
    n_sites: usize,
    k: u32,
    /// Integrand is `Re(coef exp(-2 pi i k s) P)`.
    coef: C64,
    hess: Vec<f64>,
    mollifiers: Vec<Mollifier>,
    /// Nonzero `(offset, G(offset / N) / sqrt(N))` per width.
    kernels: Vec<Vec<(usize, f64)>>,
    /// `exp(2 pi i k z / N) / N`
    phase: Vec<C64>,
    /// `[eps * n + species][z]`
    smoothed: Vec<Vec<f64>>,
    /// `[eps * n + species]`
    p: Vec<C64>,
    acc: Vec<f64>,
    ready: bool,
}

impl QuadraticObserver {
    pub fn new(
        eps: &[f64],
        h: TestFunction,
        hess: Vec<DMatrix<f64>>,
        a0: Vec<f64>,
        frame: FrameSpec,
    ) -> Result<Self, FieldError> {
        let nn = frame.n;
        let (k, a) = match h.kind {
            TestKind::Cos(k) => (k, C64::new(1.0, 0.0)),
            TestKind::Sin(k) => (k, C64::new(0.0, -1.0)),
            _ => return Err(FieldError::Invalid("quadratic functional needs a cos or sin test function".into())),
        };
        if h.n != nn {
            return Err(FieldError::Invalid(format!("test function on N = {}, frame on N = {nn}", h.n)));
        }
        let n = a0.len();
        let beta = 2.0 * PI * k as f64 / nn as f64;
        let coef = a * C64::new(0.0, nn as f64 * beta.sin());
        let mollifiers: Vec<Mollifier> = eps.iter().map(|&e| Mollifier::new(e, nn)).collect::<Result<_, _>>()?;
        let root = (nn as f64).sqrt();
        let kernels = eps
            .iter()
            .map(|&e| {
                let g = TestFunction::new(TestKind::Mollifier(e), nn)?;
                Ok(g.values.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(d, v)| (d, v / root)).collect())
            })
            .collect::<Result<_, FieldError>>()?;
        let phase = (0..nn).map(|z| C64::from_polar(1.0 / nn as f64, 2.0 * PI * ((k as usize * z) % nn) as f64 / nn as f64)).collect();
        let mut flat = vec![0.0; n * n * n];
        for i in 0..n {
            for j in 0..n {
                for l in 0..n {
                    flat[(i * n + j) * n + l] = hess[i][(j, l)];
                }
            }
        }
        let w = eps.len() * n;
        Ok(QuadraticObserver {
            eps: eps.to_vec(),
            a0,
            frame,
            times: vec![],
            values: vec![],
            n,
            n_sites: nn,
            k,
            coef,
            hess: flat,
            mollifiers,
            kernels,
            phase,
            smoothed: vec![vec![0.0; nn]; w],
            p: vec![C64::new(0.0, 0.0); w],
            acc: vec![0.0; w],
            ready: false,
        })
    }

    /// `A_t` at every record time, `[record][eps * n + species]`.
    pub fn integrals(&self) -> Vec<Vec<f64>> {
        self.values.clone()
    }

    /// Current integrand at time `t`, `[eps * n + species]`.
    pub fn integrand(&self, t: f64) -> Vec<f64> {
        let rot = C64::from_polar(1.0, -2.0 * PI * self.k as f64 * self.frame.shift(t));
        self.p.iter().map(|p| (self.coef * rot * p).re).collect()
    }

    fn q(&self, e: usize, i: usize, z: usize) -> f64 {
        let n = self.n;
        let mut acc = 0.0;
        for j in 0..n {
            for l in 0..n {
                acc += self.hess[(i * n + j) * n + l] * self.smoothed[e * n + j][z] * self.smoothed[e * n + l][z];
            }
        }
        acc
    }

    fn rebuild(&mut self, state: &LatticeState) {
        let n = self.n;
        for (e, m) in self.mollifiers.iter().enumerate() {
            for j in 0..n {
                let f: Vec<f64> = (0..self.n_sites).map(|x| state.occupancy(x)[j] as f64 - self.a0[j]).collect();
                self.smoothed[e * n + j] = m.smooth(&f);
            }
        }
        for e in 0..self.eps.len() {
            for i in 0..n {
                self.p[e * n + i] = (0..self.n_sites).map(|z| self.phase[z] * self.q(e, i, z)).sum();
            }
        }
        self.ready = true;
    }

    fn add(&mut self, species: usize, site: usize, delta: f64) {
        let n = self.n;
        let m = species;
        for e in 0..self.eps.len() {
            for &(d, g) in &self.kernels[e] {
                let z = (site + d) % self.n_sites;
                let dy = delta * g;
                for i in 0..n {
                    let h = &self.hess[i * n * n..(i + 1) * n * n];
                    let mut dq = h[m * n + m] * (2.0 * self.smoothed[e * n + m][z] + dy);
                    for l in (0..n).filter(|l| *l != m) {
                        dq += 2.0 * h[m * n + l] * self.smoothed[e * n + l][z];
                    }
                    self.p[e * n + i] += self.phase[z] * (dq * dy);
                }
                self.smoothed[e * n + m][z] += dy;
            }
        }
    }

    /// `int_{t0}^{t1} exp(-2 pi i k s(t)) dt`
    fn phase_integral(&self, t0: f64, t1: f64) -> C64 {
        let v = self.frame.velocity();
        let kk = 2.0 * PI * self.k as f64 / self.n_sites as f64;
        if v == 0.0 || self.k == 0 {
            return C64::new(t1 - t0, 0.0);
        }
        match self.frame.rule {
            ShiftRule::Exact => {
                let w = kk * v;
                let x = w * (t1 - t0);
                let h = x / 2.0;
                let dz = C64::new(-2.0 * h.sin().powi(2), -x.sin());
                C64::from_polar(1.0, -w * t0) * dz / C64::new(0.0, -w)
            }
            ShiftRule::Floor => {
                let mut out = C64::new(0.0, 0.0);
                let mut a = t0;
                while a < t1 {
                    let sites = (v * a).floor();
                    let b = ((sites + 1.0) / v).min(t1);
                    let b = if b <= a { t1 } else { b };
                    out += C64::from_polar(b - a, -kk * sites);
                    a = b;
                }
                out
            }
        }
    }
}

impl Observer for QuadraticObserver {
    fn on_interval(&mut self, t0: f64, t1: f64, state: &LatticeState) {
        if !self.ready {
            self.rebuild(state);
        }
        if t1 <= t0 {
            return;
        }
        let ph = self.coef * self.phase_integral(t0, t1);
        for (a, p) in self.acc.iter_mut().zip(&self.p) {
            *a += (ph * p).re;
        }
    }

    fn on_record(&mut self, _idx: usize, t: f64, state: &LatticeState) {
        self.rebuild(state);
        self.times.push(t);
        self.values.push(self.acc.clone());
    }

    fn on_jump(&mut self, _t: f64, jump: &Jump, _state: &LatticeState) {
        if !self.ready {
            return;
        }
        self.add(jump.species, jump.from, -1.0);
        self.add(jump.species, jump.to, 1.0);
    }
}

/// Replica mean with a delete-one jackknife error.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
    pub replicas: usize,
    pub warning: Option<String>,
}

impl Estimate {
    pub fn z(&self, target: f64) -> f64 {
        if self.se == 0.0 {
            if self.value == target { 0.0 } else { f64::INFINITY }
        } else {
            (self.value - target) / self.se
        }
    }
}

pub fn jackknife(stats: &[f64]) -> Estimate {
    let m = stats.len();
    let mean = stats.iter().sum::<f64>() / m.max(1) as f64;
    let se = if m < 2 {
        f64::NAN
    } else {
        let tot: f64 = stats.iter().sum();
        let var: f64 = stats.iter().map(|s| ((tot - s) / (m - 1) as f64 - mean).powi(2)).sum();
        (var * (m - 1) as f64 / m as f64).sqrt()
    };
    let warning = (m < MIN_REPLICAS).then(|| format!("only {m} replicas, below {MIN_REPLICAS}"));
    Estimate { value: mean, se, replicas: m, warning }
}

/// Jackknife for a ratio of replica means.
pub fn jackknife_ratio(num: &[f64], den: &[f64]) -> Estimate {
    let m = num.len();
    let (sn, sd): (f64, f64) = (num.iter().sum(), den.iter().sum());
    let value = sn / sd;
    let loo: Vec<f64> = (0..m).map(|r| (sn - num[r]) / (sd - den[r])).collect();
    let lm = loo.iter().sum::<f64>() / m as f64;
    let se = (loo.iter().map(|v| (v - lm).powi(2)).sum::<f64>() * (m - 1) as f64 / m as f64).sqrt();
    let warning = (m < MIN_REPLICAS).then(|| format!("only {m} replicas, below {MIN_REPLICAS}"));
    Estimate { value, se, replicas: m, warning }
}

fn check_schema(series: &[FieldSeries]) -> Result<(), FieldError> {
    let first = series.first().ok_or_else(|| FieldError::Schema("no series".into()))?;
    for s in series {
        if s.modes != first.modes || s.n_species != first.n_species || s.records.len() != first.records.len() {
            return Err(FieldError::Schema("replicas differ in modes, species or record count".into()));
        }
    }
    Ok(())
}

/// `E[Y^i_t(pa) Y^j_{t+lag}(pb)]` averaged over all start records and replicas.
#[allow(clippy::too_many_arguments)]
pub fn lagged_covariance(
    series: &[FieldSeries],
    i: usize,
    j: usize,
    mode_idx: usize,
    pa: Part,
    pb: Part,
    lag: usize,
    start: usize,
) -> Result<Estimate, FieldError> {
    check_schema(series)?;
    let len = series[0].records.len();
    if start + lag >= len {
        return Err(FieldError::Schema(format!("lag {lag} from {start} exceeds {len} records")));
    }
    let stats: Vec<f64> = series
        .iter()
        .map(|s| {
            let cnt = len - lag - start;
            (start..len - lag).map(|r| s.y(r, i, mode_idx, pa) * s.y(r + lag, j, mode_idx, pb)).sum::<f64>() / cnt as f64
        })
        .collect();
    Ok(jackknife(&stats))
}

#[derive(Debug, Clone, Serialize)]
pub struct StructureRow {
    pub mode: u32,
    pub i: usize,
    pub j: usize,
    pub parts: (Part, Part),
    pub lag: usize,
    pub tau: f64,
    pub estimate: Estimate,
}

/// Lagged covariances for every mode, ordered species pair and part pair.
pub fn structure_factor(series: &[FieldSeries], max_lag: usize) -> Result<Vec<StructureRow>, FieldError> {
    check_schema(series)?;
    let s0 = &series[0];
    let times = s0.times();
    let dt = if times.len() > 1 { times[1] - times[0] } else { 0.0 };
    let mut out = Vec::new();
    for (mi, &k) in s0.modes.iter().enumerate() {
        for i in 0..s0.n_species {
            for j in 0..s0.n_species {
                for parts in [(Part::Cos, Part::Cos), (Part::Sin, Part::Sin), (Part::Cos, Part::Sin)] {
                    for lag in 0..=max_lag.min(times.len().saturating_sub(1)) {
                        let estimate = lagged_covariance(series, i, j, mi, parts.0, parts.1, lag, 0)?;
                        out.push(StructureRow { mode: k, i, j, parts, lag, tau: lag as f64 * dt, estimate });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Kolmogorov-Smirnov distance between samples and `N(0, var)`.
pub fn ks_normal(samples: &[f64], var: f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = xs.len() as f64;
    let sd = var.sqrt();
    xs.iter()
        .enumerate()
        .map(|(r, x)| {
            let f = std_normal_cdf(x / sd);
            (f - r as f64 / m).abs().max(((r + 1) as f64 / m - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic 1% critical value of the one-sample KS distance.
pub fn ks_critical_1pct(m: usize) -> f64 {
    1.6276 / (m as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::point_at_fugacity;
    use crate::kmc::{init_stationary, replica_rng, run, RateCache, SimParams};
    use crate::rates::RateFamily;
    use proptest::prelude::*;

    fn traveling(n: usize, rule: ShiftRule) -> FrameSpec {
        FrameSpec { frame: Frame::Traveling { lambda: 1.3 }, rule, n, c: 1.0, gamma: 0.5 }
    }

    #[test]
    fn incremental_quadratic_matches_direct() {
        let fam = Arc::new(RateFamily::perturbed_walks(3.0, -0.96).unwrap());
        let p = point_at_fugacity(&fam, &[0.49, 0.6], 1e-14).unwrap();
        let hess: Vec<_> = (0..2).map(|i| crate::ensemble::hess_tilde_g(&p, i).unwrap()).collect();
        let n = 64;
        let params = SimParams { n, gamma: 0.5, c: 1.0, t_end: 0.01, seed: 4, record_times: vec![0.0] };
        let frame = traveling(n, ShiftRule::Exact);
        let eps = [0.25, 0.0625];
        let h = TestFunction::sin(2, n);
        let mut q = QuadraticObserver::new(&eps, h.clone(), hess.clone(), p.a.clone(), frame).unwrap();
        let mut rng = replica_rng(4, 0);
        let mut s = init_stationary(&params, &p, &mut rng).unwrap();
        let summary = run(&mut s, &params, &mut [&mut q], &mut rng).unwrap();
        assert!(summary.events > 1000);
        let got = q.integrand(params.t_end);
        for (e, w) in eps.iter().enumerate() {
            let want = mollified_quadratic(&s, *w, &p.a, frame.shift(params.t_end), &h, &hess).unwrap();
            for i in 0..2 {
                assert!((got[e * 2 + i] - want[i]).abs() < 1e-9 * want[i].abs().max(1.0), "{} vs {}", got[e * 2 + i], want[i]);
            }
        }
    }

    #[test]
    fn phase_integral_against_quadrature() {
        let fam = Arc::new(RateFamily::independent(1));
        let p = point_at_fugacity(&fam, &[1.0], 1e-14).unwrap();
        let hess = vec![DMatrix::zeros(1, 1)];
        for rule in [ShiftRule::Exact, ShiftRule::Floor] {
            let q = QuadraticObserver::new(&[0.25], TestFunction::cos(3, 32), hess.clone(), p.a.clone(), traveling(32, rule)).unwrap();
            let (t0, t1) = (0.0013, 0.0071);
            let m = 200_000;
            let dt = (t1 - t0) / m as f64;
            let num: C64 = (0..m)
                .map(|j| C64::from_polar(dt, -2.0 * PI * 3.0 * q.frame.shift(t0 + (j as f64 + 0.5) * dt)))
                .sum();
            let exact = q.phase_integral(t0, t1);
            assert!((num - exact).norm() < 1e-3 * (t1 - t0), "{rule:?}: {num} vs {exact}");
        }
    }

    #[test]
    fn fourier_sums_vanish() {
        for k in 0..6 {
            for f in [TestFunction::cos(k, 64), TestFunction::sin(k, 64)] {
                assert!(f.grad.iter().sum::<f64>().abs() < 1e-10);
                assert!(f.lap.iter().sum::<f64>().abs() < 1e-8);
            }
        }
    }

    #[test]
    fn mollifier_bounds() {
        for eps in [0.05, 0.1, 0.25] {
            let g = TestFunction::new(TestKind::Mollifier(eps), 256).unwrap();
            let mass = g.values.iter().sum::<f64>() / 256.0;
            assert!((mass - 1.0).abs() < 1e-6);
            assert!(g.l2_sq() <= 1.0 / eps);
            assert!(g.l2_sq() > 0.4 / eps);
        }
        assert!(matches!(Mollifier::new(0.01, 64), Err(FieldError::UnderResolved { .. })));
    }

    #[test]
    fn floor_integral_pieces() {
        let (w, v) = (0.3, 7.0);
        let exact = floor_phase_integral(w, v, 0.05, 0.61);
        let m = 200_000;
        let h = 0.56 / m as f64;
        let mut num = C64::new(0.0, 0.0);
        for r in 0..m {
            let s = 0.05 + (r as f64 + 0.5) * h;
            num += C64::from_polar(h, -w * (v * s).floor());
        }
        assert!((exact - num).norm() < 1e-4);
        let back = floor_phase_integral(w, -v, 0.05, 0.61);
        let mut num = C64::new(0.0, 0.0);
        for r in 0..m {
            let s = 0.05 + (r as f64 + 0.5) * h;
            num += C64::from_polar(h, -w * (-v * s).floor());
        }
        assert!((back - num).norm() < 1e-4);
        let p = phase_integral(3.0, 0.2, 0.9);
        let direct = (C64::from_polar(1.0, -0.6) - C64::from_polar(1.0, -2.7)) / C64::new(0.0, 3.0);
        assert!((p - direct).norm() < 1e-14);
    }

    fn small_state(seed: u64) -> LatticeState {
        let fam = Arc::new(RateFamily::independent(2));
        let p = point_at_fugacity(&fam, &[1.0, 0.5], 1e-14).unwrap();
        let params = SimParams { n: 32, gamma: 1.0, c: 0.0, t_end: 0.0, seed, record_times: vec![] };
        init_stationary(&params, &p, &mut replica_rng(seed, 0)).unwrap()
    }

    #[test]
    fn integer_constant_configuration_is_zero() {
        let fam = Arc::new(RateFamily::independent(2));
        let s = LatticeState::from_occupancy(Arc::new(RateCache::new(fam)), 16, vec![2, 1].repeat(16)).unwrap();
        for h in [TestFunction::cos(2, 16), TestFunction::new(TestKind::Mollifier(0.2), 16).unwrap()] {
            assert!(eval_field(&s, &h, &[2.0, 1.0], 0.3).iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn constant_test_function_counts_mass() {
        let s = small_state(3);
        let h = TestFunction::new(TestKind::Constant, 32).unwrap();
        let y = eval_field(&s, &h, &[1.0, 0.5], 0.0);
        for i in 0..2 {
            let want = (s.totals()[i] as f64 - 32.0 * [1.0, 0.5][i]) / 32f64.sqrt();
            assert!((y[i] - want).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn field_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, seed in 0u64..50, shift in 0.0f64..1.0) {
            let s = small_state(seed);
            let u: Vec<f64> = (0..32).map(|x| ((x * 7 + 3) % 11) as f64 - 5.0).collect();
            let v: Vec<f64> = (0..32).map(|x| ((x * x) % 13) as f64 * 0.1).collect();
            let w: Vec<f64> = (0..32).map(|x| a * u[x] + b * v[x]).collect();
            let f = |vals: Vec<f64>| TestFunction::new(TestKind::Custom(vals), 32).unwrap();
            let a0 = [1.0, 0.5];
            let (yu, yv, yw) = (eval_field(&s, &f(u), &a0, shift), eval_field(&s, &f(v), &a0, shift), eval_field(&s, &f(w), &a0, shift));
            for i in 0..2 {
                prop_assert!((yw[i] - a * yu[i] - b * yv[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn observer_matches_direct_evaluation_in_both_frames() {
        let fam = Arc::new(RateFamily::perturbed_walks(3.0, -0.96).unwrap());
        let p = point_at_fugacity(&fam, &[0.49, 0.6], 1e-14).unwrap();
        for (frame, rule) in [(Frame::Fixed, ShiftRule::Exact), (Frame::Traveling { lambda: 1.3 }, ShiftRule::Exact), (Frame::Traveling { lambda: 1.3 }, ShiftRule::Floor)] {
            let params = SimParams { n: 32, gamma: 0.5, c: 0.4, t_end: 0.02, seed: 2, record_times: vec![0.0, 0.01, 0.02] };
            let fs = FrameSpec { frame, rule, n: 32, c: 0.4, gamma: 0.5 };
            let mut rng = replica_rng(2, 0);
            let mut s = init_stationary(&params, &p, &mut rng).unwrap();
            let mut obs = FieldObserver::new(32, vec![0, 1, 3], Linearization::from_point(&p), fs, params.p_right(), true);
            run(&mut s, &params, &mut [&mut obs], &mut rng).unwrap();
            let series = obs.into_series();
            let last = series.records.last().unwrap();
            for (mi, k) in [0u32, 1, 3].iter().enumerate() {
                let shift = fs.shift(0.02);
                let yc = eval_field(&s, &TestFunction::cos(*k, 32), &p.a, shift);
                let ys = eval_field(&s, &TestFunction::sin(*k, 32), &p.a, shift);
                for i in 0..2 {
                    let j = series.idx(i, mi);
                    assert!((last.y[j].re - yc[i]).abs() < 1e-9, "{frame:?} {k}");
                    assert!((last.y[j].im - ys[i]).abs() < 1e-9);
                    assert!((last.m[j] - last.m_acc[j]).norm() < 1e-8, "{frame:?} {rule:?} k={k}: {} vs {}", last.m[j], last.m_acc[j]);
                }
            }
            assert!(last.cross.iter().all(|c| c[0] == 0.0 && c[1] == 0.0));
        }
    }

    #[test]
    fn frames_coincide_without_asymmetry() {
        let fs = FrameSpec { frame: Frame::Traveling { lambda: 2.0 }, rule: ShiftRule::Floor, n: 64, c: 0.0, gamma: 0.5 };
        assert_eq!(fs.shift(3.7), 0.0);
    }

    #[test]
    fn jackknife_of_mean_is_standard_error() {
        let xs = [1.0, 2.0, 4.0, 7.0, 11.0];
        let e = jackknife(&xs);
        let m = 5.0;
        let mean = xs.iter().sum::<f64>() / m;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
        assert!((e.se - sd / m.sqrt()).abs() < 1e-12);
        assert!(e.warning.is_some());
    }
}
