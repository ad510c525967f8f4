//! Desk-scale diagnostics for equivalence of ensembles and the
//! Boltzmann-Gibbs replacement.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::ensemble::{DensityPoint, EnsembleError, EnsembleTable, DEFAULT_REL_TOL};
use crate::fields::{jackknife, Estimate, FrameSpec, ShiftRule};
use crate::kmc::{init_stationary, run, Jump, KmcError, LatticeState, Observer, SimParams};

pub const MIN_BIN_SAMPLES: usize = 200;
pub const MAX_EXACT_STATES: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Kmc(#[from] KmcError),
    #[error("invalid input: {0}")]
    Invalid(String),
}

/// Single-site observable `f(alpha(0))`.
#[derive(Clone)]
pub struct LocalObservable {
    pub name: String,
    pub f: Arc<dyn Fn(&[u32]) -> f64 + Send + Sync>,
}

impl std::fmt::Debug for LocalObservable {
    fn fmt(&self, fm: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(fm, "LocalObservable({})", self.name)
    }
}

impl LocalObservable {
    pub fn new(name: &str, f: impl Fn(&[u32]) -> f64 + Send + Sync + 'static) -> Self {
        LocalObservable { name: name.to_string(), f: Arc::new(f) }
    }

    pub fn zero() -> Self {
        Self::new("0", |_| 0.0)
    }

    /// `k_i^p`
    pub fn power(i: usize, p: i32) -> Self {
        Self::new(&format!("k{}^{}", i + 1, p), move |k| (k[i] as f64).powi(p))
    }

    /// `g_i(k)`, evaluated through the family's rates.
    pub fn rate(point: &DensityPoint, i: usize) -> Self {
        let fam = point.family.clone();
        Self::new(&format!("g{}", i + 1), move |k| fam.rate(i, k).unwrap_or(f64::NAN))
    }

    pub fn eval(&self, k: &[u32]) -> f64 {
        (self.f)(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Order {
    /// Only `f~(a0) = 0` is arranged; linear expansion.
    First,
    /// `f~` and its gradient vanish; quadratic expansion.
    Second,
}

/// `f~(a0)`, its gradient and Hessian in the density.
#[derive(Debug, Clone, Serialize)]
pub struct Linearized {
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<Vec<f64>>,
}

pub fn linearize(table: &EnsembleTable, f: &LocalObservable) -> Linearized {
    let n = table.n_species();
    let a = table.density();
    let mean = table.expect(|k| f.eval(k));
    let cov: Vec<f64> = (0..n).map(|m| table.expect(|k| (f.eval(k) - mean) * (k[m] as f64 - a[m]))).collect();
    let gamma = table.covariance();
    let gi = gamma.clone().try_inverse().unwrap_or_else(|| DMatrix::zeros(n, n));
    let grad = &gi * DVector::from_vec(cov);
    let kf = DMatrix::from_fn(n, n, |m, p| table.expect(|k| (f.eval(k) - mean) * (k[m] as f64 - a[m]) * (k[p] as f64 - a[p])));
    let mut inner = kf;
    for r in 0..n {
        inner -= DMatrix::from_fn(n, n, |m, p| grad[r] * table.cumulant3(r, m, p));
    }
    let hess = &gi * inner * &gi;
    Linearized {
        value: mean,
        grad: grad.iter().cloned().collect(),
        hess: (0..n).map(|j| (0..n).map(|l| hess[(j, l)]).collect()).collect(),
    }
}

impl Linearized {
    /// `f - f~(a0)`, minus the linear part for the quadratic order.
    pub fn centered(&self, f: &LocalObservable, a0: &[f64], order: Order) -> LocalObservable {
        let lin = self.clone();
        let a0 = a0.to_vec();
        let g = f.clone();
        LocalObservable::new(&format!("{}~", f.name), move |k| {
            let mut v = g.eval(k) - lin.value;
            if order == Order::Second {
                for (j, d) in lin.grad.iter().enumerate() {
                    v -= d * (k[j] as f64 - a0[j]);
                }
            }
            v
        })
    }

    /// Block replacement at block average `y` over `2 ell + 1` sites.
    pub fn expansion(&self, y: &[f64], a0: &[f64], gamma: &DMatrix<f64>, block: usize, order: Order) -> f64 {
        let n = a0.len();
        match order {
            Order::First => (0..n).map(|j| self.grad[j] * (y[j] - a0[j])).sum(),
            Order::Second => {
                let mut s = 0.0;
                for j in 0..n {
                    for l in 0..n {
                        s += self.hess[j][l] * ((y[j] - a0[j]) * (y[l] - a0[l]) - gamma[(j, l)] / block as f64);
                    }
                }
                0.5 * s
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BinError {
    pub y: Vec<f64>,
    pub weight: f64,
    pub error: f64,
    pub samples: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleComparison {
    pub ell: usize,
    pub f: String,
    pub order: Order,
    pub exact: bool,
    pub errors_by_y: Vec<BinError>,
    pub l4_error: f64,
    pub warning: Option<String>,
}

/// Dense distribution of block totals on a bounding box.
#[derive(Debug, Clone)]
struct TotalLaw {
    lo: Vec<usize>,
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl TotalLaw {
    fn index(&self, k: &[usize]) -> Option<usize> {
        let mut idx = 0;
        for d in 0..self.dims.len() {
            if k[d] < self.lo[d] || k[d] >= self.lo[d] + self.dims[d] {
                return None;
            }
            idx = idx * self.dims[d] + (k[d] - self.lo[d]);
        }
        Some(idx)
    }

    fn coords(&self, mut idx: usize) -> Vec<usize> {
        let n = self.dims.len();
        let mut k = vec![0; n];
        for d in (0..n).rev() {
            k[d] = self.lo[d] + idx % self.dims[d];
            idx /= self.dims[d];
        }
        k
    }

    fn point(n: usize) -> Self {
        TotalLaw { lo: vec![0; n], dims: vec![1; n], data: vec![1.0] }
    }

    fn convolve(&self, marginal: &[(Vec<usize>, f64)], prune: f64) -> Result<Self, StatsError> {
        let n = self.dims.len();
        let mut hi = vec![0usize; n];
        for (k, _) in marginal {
            for d in 0..n {
                hi[d] = hi[d].max(k[d]);
            }
        }
        let dims: Vec<usize> = (0..n).map(|d| self.dims[d] + hi[d]).collect();
        let size: usize = dims.iter().product();
        if size > 4 * MAX_EXACT_STATES {
            return Err(StatsError::Invalid(format!("block-total support {size} too large")));
        }
        let mut out = TotalLaw { lo: self.lo.clone(), dims, data: vec![0.0; size] };
        for (idx, p) in self.data.iter().enumerate() {
            if *p == 0.0 {
                continue;
            }
            let base = self.coords(idx);
            for (k, q) in marginal {
                let t: Vec<usize> = (0..n).map(|d| base[d] + k[d]).collect();
                let j = out.index(&t).unwrap();
                out.data[j] += p * q;
            }
        }
        Ok(out.pruned(prune))
    }

    fn pruned(self, prune: f64) -> Self {
        let n = self.dims.len();
        let max = self.data.iter().cloned().fold(0.0, f64::max);
        let thr = max * prune;
        let mut lo = vec![usize::MAX; n];
        let mut hi = vec![0; n];
        for (idx, p) in self.data.iter().enumerate() {
            if *p > thr {
                let k = self.coords(idx);
                for d in 0..n {
                    lo[d] = lo[d].min(k[d]);
                    hi[d] = hi[d].max(k[d]);
                }
            }
        }
        let dims: Vec<usize> = (0..n).map(|d| hi[d] - lo[d] + 1).collect();
        let mut out = TotalLaw { lo, dims: dims.clone(), data: vec![0.0; dims.iter().product()] };
        for (idx, p) in self.data.iter().enumerate() {
            if *p > thr {
                let k = self.coords(idx);
                let j = out.index(&k).unwrap();
                out.data[j] = *p;
            }
        }
        out
    }
}

fn marginal_of(table: &EnsembleTable) -> Vec<(Vec<usize>, f64)> {
    let mass = table.total_mass();
    table.iter().map(|(k, p)| (k.iter().map(|v| *v as usize).collect(), p / mass)).collect()
}

fn l4(bins: &[BinError]) -> f64 {
    let w: f64 = bins.iter().map(|b| b.weight).sum();
    (bins.iter().map(|b| b.weight * b.error.powi(4)).sum::<f64>() / w).powf(0.25)
}

/// Exact conditional expectations from block-total convolutions.
fn eoe_exact(
    table: &EnsembleTable,
    point: &DensityPoint,
    lin: &Linearized,
    fc: &LocalObservable,
    ell: usize,
    order: Order,
) -> Result<Vec<BinError>, StatsError> {
    let n = table.n_species();
    let block = 2 * ell + 1;
    let marg = marginal_of(table);
    let mut rest = TotalLaw::point(n);
    for _ in 0..block - 1 {
        rest = rest.convolve(&marg, 1e-22)?;
    }
    let full = rest.convolve(&marg, 1e-22)?;
    let mut num = vec![0.0; full.data.len()];
    for (k, p) in &marg {
        let v = fc.eval(&k.iter().map(|x| *x as u32).collect::<Vec<_>>());
        for (idx, r) in rest.data.iter().enumerate() {
            if *r == 0.0 {
                continue;
            }
            let base = rest.coords(idx);
            let t: Vec<usize> = (0..n).map(|d| base[d] + k[d]).collect();
            if let Some(j) = full.index(&t) {
                num[j] += p * r * v;
            }
        }
    }
    let total: f64 = full.data.iter().sum();
    let mut bins = Vec::new();
    for (idx, w) in full.data.iter().enumerate() {
        if *w <= 0.0 {
            continue;
        }
        let s = full.coords(idx);
        let y: Vec<f64> = s.iter().map(|v| *v as f64 / block as f64).collect();
        let cond = num[idx] / w;
        let err = (cond - lin.expansion(&y, &point.a, &point.gamma, block, order)).abs();
        bins.push(BinError { y, weight: w / total, error: err, samples: None });
    }
    Ok(bins)
}

/// Monte Carlo conditioning: sample blocks, bin by the block total.
fn eoe_mc<R: Rng + ?Sized>(
    table: &EnsembleTable,
    point: &DensityPoint,
    lin: &Linearized,
    fc: &LocalObservable,
    ell: usize,
    order: Order,
    samples: usize,
    rng: &mut R,
) -> (Vec<BinError>, Option<String>) {
    let n = table.n_species();
    let block = 2 * ell + 1;
    let mut acc: HashMap<Vec<u32>, (f64, usize)> = HashMap::new();
    for _ in 0..samples {
        let mut tot = vec![0u32; n];
        let mut v = 0.0;
        for x in 0..block {
            let k = table.sample(rng);
            if x == 0 {
                v = fc.eval(k);
            }
            for d in 0..n {
                tot[d] += k[d];
            }
        }
        let e = acc.entry(tot).or_default();
        e.0 += v;
        e.1 += 1;
    }
    let mut bins = Vec::new();
    let mut thin = 0usize;
    for (s, (sum, cnt)) in acc {
        if cnt < MIN_BIN_SAMPLES {
            thin += cnt;
            continue;
        }
        let y: Vec<f64> = s.iter().map(|v| *v as f64 / block as f64).collect();
        let err = (sum / cnt as f64 - lin.expansion(&y, &point.a, &point.gamma, block, order)).abs();
        bins.push(BinError { y, weight: cnt as f64 / samples as f64, error: err, samples: Some(cnt) });
    }
    let warning = (thin > 0).then(|| {
        format!("{:.1}% of samples fell in bins with fewer than {MIN_BIN_SAMPLES} draws", 100.0 * thin as f64 / samples as f64)
    });
    (bins, warning)
}

/// L4 discrepancy between the block-conditional expectation of the centered
/// observable and its expansion in the block average.
pub fn eoe_check<R: Rng + ?Sized>(
    point: &DensityPoint,
    f: &LocalObservable,
    ells: &[usize],
    order: Order,
    samples: usize,
    rng: &mut R,
) -> Result<Vec<EnsembleComparison>, StatsError> {
    let table = point.table(DEFAULT_REL_TOL)?;
    let lin = linearize(&table, f);
    let fc = lin.centered(f, &point.a, order);
    let mut out = Vec::new();
    for &ell in ells {
        let block = 2 * ell + 1;
        let span: Vec<usize> = (0..point.n_species())
            .map(|d| {
                let sd = point.gamma[(d, d)].sqrt();
                ((point.a[d] + 12.0 * sd) * block as f64) as usize + 1
            })
            .collect();
        let est: usize = span.iter().product();
        let exact = est <= MAX_EXACT_STATES;
        let (bins, warning, exact) = match exact.then(|| eoe_exact(&table, point, &lin, &fc, ell, order)) {
            Some(Ok(b)) => (b, None, true),
            _ => {
                let (b, w) = eoe_mc(&table, point, &lin, &fc, ell, order, samples, rng);
                (b, w, false)
            }
        };
        let l4_error = if bins.is_empty() { f64::NAN } else { l4(&bins) };
        out.push(EnsembleComparison { ell, f: f.name.clone(), order, exact, errors_by_y: bins, l4_error, warning });
    }
    Ok(out)
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let m = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / m, ly.iter().sum::<f64>() / m);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Running `int_0^t sum_x (f - replacement_ell)(x) h(x - shift) ds` for a ladder of `ell`.
pub struct BgObserver {
    n: usize,
    n_species: usize,
    fc: LocalObservable,
    lin: Linearized,
    a0: Vec<f64>,
    gamma: DMatrix<f64>,
    order: Order,
    ells: Vec<usize>,
    h: Vec<f64>,
    frame: FrameSpec,
    occ: Vec<u32>,
    /// Per ell: block totals per site, then per-site weights.
    sums: Vec<Vec<u32>>,
    weights: Vec<Vec<f64>>,
    values: Vec<f64>,
    shift: i64,
    integral: Vec<f64>,
    sup_sq: Vec<f64>,
    started: bool,
}

impl BgObserver {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        point: &DensityPoint,
        f: &LocalObservable,
        order: Order,
        ells: Vec<usize>,
        h: Vec<f64>,
        frame: FrameSpec,
    ) -> Result<Self, StatsError> {
        let table = point.table(DEFAULT_REL_TOL)?;
        let lin = linearize(&table, f);
        let fc = lin.centered(f, &point.a, order);
        let n = h.len();
        if ells.iter().any(|l| 2 * l + 1 > n) {
            return Err(StatsError::Invalid(format!("block larger than the torus of {n} sites")));
        }
        let k = ells.len();
        Ok(BgObserver {
            n,
            n_species: point.n_species(),
            fc,
            lin,
            a0: point.a.clone(),
            gamma: point.gamma.clone(),
            order,
            ells,
            h,
            frame,
            occ: Vec::new(),
            sums: vec![Vec::new(); k],
            weights: vec![vec![0.0; n]; k],
            values: vec![0.0; k],
            shift: 0,
            integral: vec![0.0; k],
            sup_sq: vec![0.0; k],
            started: false,
        })
    }

    fn weight(&self, e: usize, x: usize) -> f64 {
        let ns = self.n_species;
        let block = 2 * self.ells[e] + 1;
        let k = &self.occ[x * ns..(x + 1) * ns];
        let y: Vec<f64> = self.sums[e][x * ns..(x + 1) * ns].iter().map(|v| *v as f64 / block as f64).collect();
        self.fc.eval(k) - self.lin.expansion(&y, &self.a0, &self.gamma, block, self.order)
    }

    fn hbar(&self, x: usize) -> f64 {
        let n = self.n as i64;
        self.h[(x as i64 - self.shift).rem_euclid(n) as usize]
    }

    fn recompute(&mut self, e: usize) {
        self.values[e] = (0..self.n).map(|x| self.weights[e][x] * self.hbar(x)).sum();
    }

    fn init(&mut self, state: &LatticeState) {
        let (n, ns) = (self.n, self.n_species);
        self.occ = (0..n).flat_map(|x| state.occupancy(x).to_vec()).collect();
        for e in 0..self.ells.len() {
            let l = self.ells[e] as i64;
            let mut s = vec![0u32; n * ns];
            for x in 0..n {
                for y in -l..=l {
                    let z = (x as i64 + y).rem_euclid(n as i64) as usize;
                    for d in 0..ns {
                        s[x * ns + d] += self.occ[z * ns + d];
                    }
                }
            }
            self.sums[e] = s;
            for x in 0..n {
                self.weights[e][x] = self.weight(e, x);
            }
            self.recompute(e);
        }
        self.started = true;
    }

    fn advance(&mut self, dt: f64) {
        for e in 0..self.ells.len() {
            self.integral[e] += self.values[e] * dt;
            self.sup_sq[e] = self.sup_sq[e].max(self.integral[e].powi(2));
        }
    }

    pub fn ells(&self) -> &[usize] {
        &self.ells
    }

    /// `sup_t (int_0^t ...)^2` per ell.
    pub fn sup_squares(&self) -> &[f64] {
        &self.sup_sq
    }
}

impl Observer for BgObserver {
    fn on_interval(&mut self, t0: f64, t1: f64, state: &LatticeState) {
        if !self.started {
            self.init(state);
        }
        let mut t = t0;
        while t < t1 {
            let s = self.frame.sites(t, ShiftRule::Floor) as i64;
            if s != self.shift {
                self.shift = s;
                for e in 0..self.ells.len() {
                    self.recompute(e);
                }
            }
            let v = self.frame.velocity();
            let next = if v > 0.0 { ((s + 1) as f64 / v).min(t1) } else { t1 };
            let next = if next <= t { t1 } else { next };
            self.advance(next - t);
            t = next;
        }
    }

    fn on_jump(&mut self, _t: f64, jump: &Jump, _state: &LatticeState) {
        if !self.started {
            return;
        }
        let (n, ns) = (self.n as i64, self.n_species);
        let d = jump.species;
        self.occ[jump.from * ns + d] -= 1;
        self.occ[jump.to * ns + d] += 1;
        for e in 0..self.ells.len() {
            let l = self.ells[e] as i64;
            let mut touched: Vec<usize> = Vec::with_capacity(4 * l as usize + 2);
            for (site, delta) in [(jump.from, -1i64), (jump.to, 1)] {
                for y in -l..=l {
                    let z = (site as i64 + y).rem_euclid(n) as usize;
                    let s = &mut self.sums[e][z * ns + d];
                    *s = (*s as i64 + delta) as u32;
                    touched.push(z);
                }
            }
            touched.sort_unstable();
            touched.dedup();
            for x in touched {
                let w = self.weight(e, x);
                self.values[e] += (w - self.weights[e][x]) * self.hbar(x);
                self.weights[e][x] = w;
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BgRow {
    pub n: usize,
    pub ell: usize,
    pub estimate: Estimate,
    /// `T ell / N |h|_2^2 + T^2 N^2 / ell^3 |h|_1^2`, without constant.
    pub bound_shape: f64,
}

/// Replica estimates of `E[sup_t (int_0^t sum_x (f - replacement) h ds)^2]`.
#[allow(clippy::too_many_arguments)]
pub fn bg_diagnostic(
    point: &DensityPoint,
    f: &LocalObservable,
    order: Order,
    params: &SimParams,
    ells: &[usize],
    h: &[f64],
    frame: FrameSpec,
    replicas: u64,
) -> Result<Vec<BgRow>, StatsError> {
    if h.len() != params.n {
        return Err(StatsError::Invalid(format!("h has {} values for {} sites", h.len(), params.n)));
    }
    let mut per = vec![Vec::with_capacity(replicas as usize); ells.len()];
    for r in 0..replicas {
        let mut rng = crate::kmc::replica_rng(params.seed, r);
        let mut state = init_stationary(params, point, &mut rng)?;
        let mut obs = BgObserver::new(point, f, order, ells.to_vec(), h.to_vec(), frame.clone())?;
        run(&mut state, params, &mut [&mut obs], &mut rng)?;
        for (e, v) in obs.sup_squares().iter().enumerate() {
            per[e].push(*v);
        }
    }
    Ok(bg_rows(params, ells, h, &per))
}

pub fn bg_rows(params: &SimParams, ells: &[usize], h: &[f64], per: &[Vec<f64>]) -> Vec<BgRow> {
    let nf = params.n as f64;
    let h2 = h.iter().map(|v| v * v).sum::<f64>() / nf;
    let h1 = h.iter().map(|v| v.abs()).sum::<f64>() / nf;
    let t = params.t_end;
    ells.iter()
        .zip(per)
        .map(|(&ell, v)| {
            let l = ell as f64;
            let bound_shape =
                if ell == 0 { f64::INFINITY } else { t * l / nf * h2 + t * t * nf * nf / l.powi(3) * h1 * h1 };
            BgRow { n: params.n, ell, estimate: jackknife(v), bound_shape }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::point_at_fugacity;
    use crate::kmc::replica_rng;
    use crate::rates::RateFamily;

    fn poisson(phi: f64) -> DensityPoint {
        point_at_fugacity(&Arc::new(RateFamily::independent(1)), &[phi], 1e-15).unwrap()
    }

    #[test]
    fn linearization_of_powers_is_exact_for_poisson() {
        let p = poisson(1.3);
        let t = p.table(1e-15).unwrap();
        let lin = linearize(&t, &LocalObservable::power(0, 2));
        // E k^2 = a^2 + a
        assert!((lin.value - (1.3 * 1.3 + 1.3)).abs() < 1e-10);
        assert!((lin.grad[0] - (2.0 * 1.3 + 1.0)).abs() < 1e-9);
        assert!((lin.hess[0][0] - 2.0).abs() < 1e-7);
    }

    #[test]
    fn zero_and_linear_observables_have_no_error() {
        let p = poisson(0.8);
        let mut rng = replica_rng(0, 0);
        for f in [LocalObservable::zero(), LocalObservable::power(0, 1)] {
            for c in eoe_check(&p, &f, &[1, 2], Order::Second, 1000, &mut rng).unwrap() {
                assert!(c.exact);
                assert!(c.l4_error < 1e-12, "{} {}", f.name, c.l4_error);
            }
        }
    }

    #[test]
    fn poisson_square_conditional_is_binomial() {
        // given the block total S over L sites, k(0) ~ Bin(S, 1/L)
        let a: f64 = 0.8;
        let p = poisson(a);
        let mut rng = replica_rng(0, 0);
        let ell = 3;
        let big_l = (2 * ell + 1) as f64;
        let c = &eoe_check(&p, &LocalObservable::power(0, 2), &[ell], Order::Second, 0, &mut rng).unwrap()[0];
        // the truncated marginal biases only the far tail of S
        for b in c.errors_by_y.iter().filter(|b| b.weight > 1e-6) {
            let y = b.y[0];
            let s = y * big_l;
            let cond = s / big_l * (1.0 - 1.0 / big_l) + s * s / (big_l * big_l);
            let centered = cond - (a * a + a) - (2.0 * a + 1.0) * (y - a);
            let want = (centered - ((y - a).powi(2) - a / big_l)).abs();
            assert!((b.error - want).abs() < 1e-6 * (1.0 + want), "y {y}: {} vs {want}", b.error);
        }
    }

    #[test]
    fn mc_matches_exact_roughly() {
        let p = poisson(0.8);
        let t = p.table(1e-15).unwrap();
        let f = LocalObservable::power(0, 2);
        let lin = linearize(&t, &f);
        let fc = lin.centered(&f, &p.a, Order::Second);
        let ex = eoe_exact(&t, &p, &lin, &fc, 1, Order::Second).unwrap();
        let (mc, _) = eoe_mc(&t, &p, &lin, &fc, 1, Order::Second, 200_000, &mut replica_rng(5, 0));
        for b in &mc {
            let e = ex.iter().find(|x| x.y == b.y).unwrap();
            assert!((b.error - e.error).abs() < 0.1 * (1.0 + e.error), "{:?} vs {:?}", b, e);
        }
    }

    #[test]
    fn slope_fit() {
        let x = [2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-1.5)).collect();
        assert!((log_slope(&x, &y) + 1.5).abs() < 1e-12);
    }
}
