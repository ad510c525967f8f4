//! Event-driven simulation of the weakly asymmetric zero-range process on
//! the torus, and exact generators of small canonical systems.
//!
//! Time is stored in macroscopic units: a configuration with total site rate
//! `R` waits an exponential time of mean `1 / (N^2 R)`.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::{DensityPoint, EnsembleError, DEFAULT_REL_TOL};
use crate::rates::{RateError, RateFamily};

pub const MAX_SPECIES: usize = 8;
pub const REBUILD_EVERY: u64 = 1_000_000;
pub const MAX_CANONICAL_STATES: u128 = 2_000_000;
pub const MAX_DENSE_STATES: usize = 4000;

#[derive(Debug, Error)]
pub enum KmcError {
    #[error("invalid simulation parameters: {}", .0.join("; "))]
    Params(Vec<String>),
    #[error("state space has {count} configurations, limit {limit}")]
    Size { count: u128, limit: u128 },
    #[error("spectral gap undefined for a single configuration")]
    SingleState,
    #[error(transparent)]
    Rate(#[from] RateError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    /// Torus size `N`.
    pub n: usize,
    pub gamma: f64,
    pub c: f64,
    /// Macroscopic horizon.
    pub t_end: f64,
    pub seed: u64,
    pub record_times: Vec<f64>,
}

impl SimParams {
    pub fn p_right(&self) -> f64 {
        0.5 + self.c / (self.n as f64).powf(self.gamma)
    }

    pub fn validate(&self) -> Result<(), KmcError> {
        let mut bad = Vec::new();
        if self.n < 2 {
            bad.push(format!("N = {} must be at least 2", self.n));
        }
        if !(self.gamma > 0.0) {
            bad.push(format!("gamma = {} must be positive", self.gamma));
        }
        let p = self.p_right();
        if !(0.0..=1.0).contains(&p) {
            bad.push(format!("p(1) = {p} outside [0, 1] for c = {}, N = {}, gamma = {}", self.c, self.n, self.gamma));
        }
        if !(self.t_end >= 0.0) || !self.t_end.is_finite() {
            bad.push(format!("T = {} must be finite and non-negative", self.t_end));
        }
        if self.record_times.windows(2).any(|w| !(w[0] <= w[1])) {
            bad.push("record times must be sorted".into());
        }
        if self.record_times.iter().any(|&r| !(0.0..=self.t_end).contains(&r)) {
            bad.push("record times must lie in [0, T]".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(KmcError::Params(bad))
        }
    }

    /// Evenly spaced record times `0, dt, 2dt, ...` up to `t_end`.
    pub fn grid(t_end: f64, dt: f64) -> Vec<f64> {
        let m = (t_end / dt + 1e-9).floor() as usize;
        (0..=m).map(|k| k as f64 * dt).collect()
    }
}

/// Independent stream `replica` of the generator seeded by `seed`.
pub fn replica_rng(seed: u64, replica: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replica);
    rng
}

/// Binary indexed tree of non-negative weights.
#[derive(Debug, Clone)]
pub struct Fenwick {
    tree: Vec<f64>,
}

impl Fenwick {
    pub fn from_values(v: &[f64]) -> Self {
        let n = v.len();
        let mut tree = vec![0.0; n + 1];
        tree[1..].copy_from_slice(v);
        for i in 1..=n {
            let j = i + (i & i.wrapping_neg());
            if j <= n {
                tree[j] += tree[i];
            }
        }
        Fenwick { tree }
    }

    pub fn len(&self) -> usize {
        self.tree.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn add(&mut self, i: usize, delta: f64) {
        let mut j = i + 1;
        while j < self.tree.len() {
            self.tree[j] += delta;
            j += j & j.wrapping_neg();
        }
    }

    /// Sum of the first `i` weights.
    pub fn prefix(&self, i: usize) -> f64 {
        let mut j = i;
        let mut s = 0.0;
        while j > 0 {
            s += self.tree[j];
            j -= j & j.wrapping_neg();
        }
        s
    }

    pub fn total(&self) -> f64 {
        self.prefix(self.len())
    }

    /// Smallest index `i` with `prefix(i + 1) > u`, clamped to the last index.
    pub fn find(&self, u: f64) -> usize {
        let n = self.len();
        let mut pos = 0;
        let mut rem = u;
        let mut step = if n == 0 { 0 } else { 1usize << (usize::BITS - 1 - n.leading_zeros()) };
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= rem {
                pos = next;
                rem -= self.tree[next];
            }
            step >>= 1;
        }
        pos.min(n.saturating_sub(1))
    }
}

/// Rates `g_i(k)` tabulated on a box `[0, b)^n`, with direct evaluation outside.
#[derive(Debug, Clone)]
pub struct RateCache {
    family: Arc<RateFamily>,
    n: usize,
    b: u32,
    data: Vec<f64>,
}

impl RateCache {
    pub fn new(family: Arc<RateFamily>) -> Self {
        let n = family.n_species();
        let b = ((1u64 << 18) as f64).powf(1.0 / n as f64).floor().clamp(2.0, 64.0) as u32;
        let size = (b as usize).pow(n as u32);
        let mut data = vec![f64::NAN; size * n];
        let mut k = vec![0u32; n];
        for idx in 0..size {
            let mut r = idx;
            for kk in k.iter_mut() {
                *kk = (r % b as usize) as u32;
                r /= b as usize;
            }
            for i in 0..n {
                if let Ok(v) = family.rate(i, &k) {
                    data[idx * n + i] = v;
                }
            }
        }
        RateCache { family, n, b, data }
    }

    pub fn family(&self) -> &Arc<RateFamily> {
        &self.family
    }

    pub fn fill(&self, k: &[u32], out: &mut [f64]) -> Result<(), RateError> {
        if k.iter().all(|&x| x < self.b) {
            let mut idx = 0usize;
            for &x in k.iter().rev() {
                idx = idx * self.b as usize + x as usize;
            }
            let row = &self.data[idx * self.n..(idx + 1) * self.n];
            if row.iter().all(|v| !v.is_nan()) {
                out.copy_from_slice(row);
                return Ok(());
            }
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.family.rate(i, k)?;
        }
        Ok(())
    }
}

/// Occupancies of every site with cached rates.
#[derive(Debug, Clone)]
pub struct LatticeState {
    n_sites: usize,
    n_species: usize,
    occ: Vec<u32>,
    species_rate: Vec<f64>,
    site_rate: Vec<f64>,
    tree: Fenwick,
    totals: Vec<u64>,
    /// Macroscopic time.
    pub time: f64,
    cache: Arc<RateCache>,
}

impl LatticeState {
    /// `occ` is site-major: `occ[x * n + i]` is the count of species `i` at `x`.
    pub fn from_occupancy(cache: Arc<RateCache>, n_sites: usize, occ: Vec<u32>) -> Result<Self, KmcError> {
        let n = cache.n;
        if n > MAX_SPECIES {
            return Err(KmcError::Params(vec![format!("{n} species exceeds the limit {MAX_SPECIES}")]));
        }
        if occ.len() != n_sites * n {
            return Err(KmcError::Params(vec![format!("occupancy length {} != N n = {}", occ.len(), n_sites * n)]));
        }
        let mut species_rate = vec![0.0; n_sites * n];
        let mut site_rate = vec![0.0; n_sites];
        let mut totals = vec![0u64; n];
        for x in 0..n_sites {
            let k = &occ[x * n..(x + 1) * n];
            cache.fill(k, &mut species_rate[x * n..(x + 1) * n])?;
            site_rate[x] = species_rate[x * n..(x + 1) * n].iter().sum();
            for i in 0..n {
                totals[i] += k[i] as u64;
            }
        }
        let tree = Fenwick::from_values(&site_rate);
        Ok(LatticeState { n_sites, n_species: n, occ, species_rate, site_rate, tree, totals, time: 0.0, cache })
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn n_species(&self) -> usize {
        self.n_species
    }

    pub fn occupancy(&self, x: usize) -> &[u32] {
        &self.occ[x * self.n_species..(x + 1) * self.n_species]
    }

    pub fn raw_occupancy(&self) -> &[u32] {
        &self.occ
    }

    pub fn species_rates(&self, x: usize) -> &[f64] {
        &self.species_rate[x * self.n_species..(x + 1) * self.n_species]
    }

    pub fn raw_species_rates(&self) -> &[f64] {
        &self.species_rate
    }

    pub fn site_rate(&self, x: usize) -> f64 {
        self.site_rate[x]
    }

    pub fn totals(&self) -> &[u64] {
        &self.totals
    }

    pub fn total_rate(&self) -> f64 {
        self.tree.total()
    }

    pub fn family(&self) -> &Arc<RateFamily> {
        self.cache.family()
    }

    /// Recounts particles and compares with the conserved totals.
    pub fn conserved(&self) -> bool {
        let n = self.n_species;
        (0..n).all(|i| (0..self.n_sites).map(|x| self.occ[x * n + i] as u64).sum::<u64>() == self.totals[i])
    }

    /// Recomputes the rate tree from scratch and returns the relative
    /// discrepancy of the incremental total.
    pub fn rebuild(&mut self) -> f64 {
        let before = self.tree.total();
        let n = self.n_species;
        for x in 0..self.n_sites {
            self.site_rate[x] = self.species_rate[x * n..(x + 1) * n].iter().sum();
        }
        self.tree = Fenwick::from_values(&self.site_rate);
        let after = self.tree.total();
        if after == 0.0 {
            before.abs()
        } else {
            ((before - after) / after).abs()
        }
    }

    fn refresh(&mut self, x: usize) -> Result<(), RateError> {
        let n = self.n_species;
        let (occ, rates) = (&self.occ[x * n..(x + 1) * n], &mut self.species_rate[x * n..(x + 1) * n]);
        self.cache.fill(occ, rates)?;
        let new: f64 = rates.iter().sum();
        self.tree.add(x, new - self.site_rate[x]);
        self.site_rate[x] = new;
        Ok(())
    }

    /// Moves one particle of species `i` from `from` to `to`.
    pub fn apply(&mut self, i: usize, from: usize, to: usize) -> Result<(), RateError> {
        let n = self.n_species;
        debug_assert!(self.occ[from * n + i] > 0);
        self.occ[from * n + i] -= 1;
        self.occ[to * n + i] += 1;
        self.refresh(from)?;
        self.refresh(to)
    }
}

/// I.i.d. site occupancies from the grand-canonical marginal at `point`.
pub fn init_stationary<R: Rng + ?Sized>(
    params: &SimParams,
    point: &DensityPoint,
    rng: &mut R,
) -> Result<LatticeState, KmcError> {
    let table = point.table(DEFAULT_REL_TOL)?;
    let cache = Arc::new(RateCache::new(point.family.clone()));
    let n = point.n_species();
    let mut occ = Vec::with_capacity(params.n * n);
    for _ in 0..params.n {
        occ.extend_from_slice(table.sample(rng));
    }
    LatticeState::from_occupancy(cache, params.n, occ)
}

/// One particle move, reported after it has been applied.
#[derive(Debug, Clone, Copy)]
pub struct Jump {
    pub species: usize,
    pub from: usize,
    pub to: usize,
    pub dir: i32,
    /// Species rates at `from` and `to` before the move.
    pub old_from: [f64; MAX_SPECIES],
    pub old_to: [f64; MAX_SPECIES],
}

/// Trajectory hooks. Intervals tile `[t0, T]` and are split at record times.
pub trait Observer {
    /// State frozen on `[t0, t1)`.
    fn on_interval(&mut self, _t0: f64, _t1: f64, _state: &LatticeState) {}
    /// Left limit of the path at record time `t`.
    fn on_record(&mut self, _idx: usize, _t: f64, _state: &LatticeState) {}
    fn on_jump(&mut self, _t: f64, _jump: &Jump, _state: &LatticeState) {}
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum StopReason {
    Horizon,
    /// Total rate vanished; the remaining records see the frozen state.
    Empty,
    Overflow,
    Rate(String),
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub events: u64,
    pub stop: StopReason,
    pub end_time: f64,
    pub records_fired: usize,
    pub max_rebuild_discrepancy: f64,
}

/// Gillespie loop from `state.time` to `params.t_end`.
pub fn run<R: Rng + ?Sized>(
    state: &mut LatticeState,
    params: &SimParams,
    observers: &mut [&mut dyn Observer],
    rng: &mut R,
) -> Result<RunSummary, KmcError> {
    params.validate()?;
    if params.n != state.n_sites {
        return Err(KmcError::Params(vec![format!("state has {} sites, params say {}", state.n_sites, params.n)]));
    }
    let n = state.n_species;
    let p = params.p_right();
    let scale = (params.n as f64).powi(2);
    let t_end = params.t_end;
    let recs = &params.record_times;
    let mut ri = recs.partition_point(|&r| r < state.time);
    let mut events = 0u64;
    let mut max_disc = 0.0f64;
    let mut fired = 0;

    let fire_until = |state: &LatticeState, t: &mut f64, until: f64, ri: &mut usize, fired: &mut usize, obs: &mut [&mut dyn Observer]| {
        while *ri < recs.len() && recs[*ri] <= until {
            let r = recs[*ri];
            for o in obs.iter_mut() {
                o.on_interval(*t, r, state);
                o.on_record(*ri, r, state);
            }
            *t = r;
            *ri += 1;
            *fired += 1;
        }
    };

    let stop = loop {
        let total = state.tree.total();
        if !total.is_finite() {
            break StopReason::Overflow;
        }
        let mut t = state.time;
        if total <= 0.0 {
            fire_until(state, &mut t, t_end, &mut ri, &mut fired, observers);
            for o in observers.iter_mut() {
                o.on_interval(t, t_end, state);
            }
            state.time = t_end;
            break StopReason::Empty;
        }
        let e: f64 = rng.sample(Exp1);
        let t_next = state.time + e / (scale * total);
        fire_until(state, &mut t, t_next.min(t_end), &mut ri, &mut fired, observers);
        if t_next > t_end {
            for o in observers.iter_mut() {
                o.on_interval(t, t_end, state);
            }
            state.time = t_end;
            break StopReason::Horizon;
        }
        for o in observers.iter_mut() {
            o.on_interval(t, t_next, state);
        }

        let mut x = state.tree.find(rng.random::<f64>() * total);
        while state.site_rate[x] <= 0.0 && x > 0 {
            x -= 1;
        }
        let rates = &state.species_rate[x * n..(x + 1) * n];
        let mut u = rng.random::<f64>() * state.site_rate[x];
        let mut i = 0;
        while i + 1 < n && (u >= rates[i] || rates[i] <= 0.0) {
            u -= rates[i];
            i += 1;
        }
        while rates[i] <= 0.0 {
            i -= 1;
        }
        let dir = if rng.random::<f64>() < p { 1 } else { -1 };
        let y = (x as i64 + dir as i64).rem_euclid(params.n as i64) as usize;
        let mut jump = Jump { species: i, from: x, to: y, dir, old_from: [0.0; MAX_SPECIES], old_to: [0.0; MAX_SPECIES] };
        jump.old_from[..n].copy_from_slice(state.species_rates(x));
        jump.old_to[..n].copy_from_slice(state.species_rates(y));
        if let Err(err) = state.apply(i, x, y) {
            break StopReason::Rate(err.to_string());
        }
        state.time = t_next;
        events += 1;
        for o in observers.iter_mut() {
            o.on_jump(t_next, &jump, state);
        }
        if events % REBUILD_EVERY == 0 {
            max_disc = max_disc.max(state.rebuild());
        }
    };
    Ok(RunSummary { events, stop, end_time: state.time, records_fired: fired, max_rebuild_discrepancy: max_disc })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Geometry {
    Torus,
    /// Jumps across either end are suppressed.
    Interval,
}

/// Full generator of a small system with fixed particle numbers.
#[derive(Debug, Clone)]
pub struct CanonicalGenerator {
    pub n_sites: usize,
    pub n_species: usize,
    pub totals: Vec<u32>,
    pub geometry: Geometry,
    pub p_right: f64,
    /// Site-major configurations.
    pub states: Vec<Vec<u32>>,
    /// Normalized product weights `prod_x 1 / g!(eta(x))`.
    pub weights: Vec<f64>,
    /// Off-diagonal rates per row, duplicates merged.
    pub rows: Vec<Vec<(usize, f64)>>,
}

fn compositions(total: u32, parts: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut cur = vec![0u32; parts];
    fn rec(pos: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if pos + 1 == cur.len() {
            cur[pos] = left;
            out.push(cur.clone());
            return;
        }
        for v in (0..=left).rev() {
            cur[pos] = v;
            rec(pos + 1, left - v, cur, out);
        }
    }
    if parts > 0 {
        rec(0, total, &mut cur, &mut out);
    }
    out
}

fn binomial(n: u128, k: u128) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) / (i + 1))
}

/// Number of configurations with the given totals on `n_sites` sites.
pub fn canonical_size(n_sites: usize, totals: &[u32]) -> u128 {
    totals
        .iter()
        .map(|&k| binomial(k as u128 + n_sites as u128 - 1, n_sites as u128 - 1))
        .fold(1u128, |a, b| a.saturating_mul(b))
}

pub fn canonical_generator(
    family: &RateFamily,
    n_sites: usize,
    totals: &[u32],
    geometry: Geometry,
    p_right: f64,
) -> Result<CanonicalGenerator, KmcError> {
    let n = family.n_species();
    if totals.len() != n || n_sites == 0 {
        return Err(KmcError::Params(vec!["totals must have one entry per species and N >= 1".into()]));
    }
    let count = canonical_size(n_sites, totals);
    if count > MAX_CANONICAL_STATES {
        return Err(KmcError::Size { count, limit: MAX_CANONICAL_STATES });
    }
    let per: Vec<Vec<Vec<u32>>> = totals.iter().map(|&k| compositions(k, n_sites)).collect();
    let mut states = Vec::with_capacity(count as usize);
    let mut idx = vec![0usize; n];
    'outer: loop {
        let mut s = vec![0u32; n_sites * n];
        for i in 0..n {
            for x in 0..n_sites {
                s[x * n + i] = per[i][idx[i]][x];
            }
        }
        states.push(s);
        for i in 0..n {
            idx[i] += 1;
            if idx[i] < per[i].len() {
                continue 'outer;
            }
            idx[i] = 0;
        }
        break;
    }
    let index: HashMap<&[u32], usize> = states.iter().enumerate().map(|(j, s)| (s.as_slice(), j)).collect();

    let mut logw = Vec::with_capacity(states.len());
    for s in &states {
        let mut lw = 0.0;
        for x in 0..n_sites {
            lw -= family.log_g_factorial(&s[x * n..(x + 1) * n])?;
        }
        logw.push(lw);
    }
    let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = logw.iter().map(|l| (l - m).exp()).collect();
    let zsum: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= zsum);

    let mut rows = Vec::with_capacity(states.len());
    let mut buf = vec![0u32; n_sites * n];
    for s in &states {
        let mut row: Vec<(usize, f64)> = Vec::new();
        for x in 0..n_sites {
            for i in 0..n {
                if s[x * n + i] == 0 {
                    continue;
                }
                let g = family.rate(i, &s[x * n..(x + 1) * n])?;
                for (dir, pd) in [(1i64, p_right), (-1i64, 1.0 - p_right)] {
                    let y = x as i64 + dir;
                    let y = match geometry {
                        Geometry::Torus => y.rem_euclid(n_sites as i64) as usize,
                        Geometry::Interval if (0..n_sites as i64).contains(&y) => y as usize,
                        Geometry::Interval => continue,
                    };
                    if y == x || pd == 0.0 {
                        continue;
                    }
                    buf.copy_from_slice(s);
                    buf[x * n + i] -= 1;
                    buf[y * n + i] += 1;
                    let j = index[buf.as_slice()];
                    match row.iter_mut().find(|(k, _)| *k == j) {
                        Some(e) => e.1 += g * pd,
                        None => row.push((j, g * pd)),
                    }
                }
            }
        }
        rows.push(row);
    }
    Ok(CanonicalGenerator { n_sites, n_species: n, totals: totals.to_vec(), geometry, p_right, states, weights, rows })
}

impl CanonicalGenerator {
    pub fn dim(&self) -> usize {
        self.states.len()
    }

    pub fn exit_rate(&self, a: usize) -> f64 {
        self.rows[a].iter().map(|e| e.1).sum()
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut q = DMatrix::zeros(d, d);
        for (a, row) in self.rows.iter().enumerate() {
            for &(b, r) in row {
                q[(a, b)] += r;
            }
            q[(a, a)] -= self.exit_rate(a);
        }
        q
    }

    /// `max_b |(nu Q)(b)|` for the product weights `nu`.
    pub fn stationarity_residual(&self) -> f64 {
        let mut flow: Vec<f64> = (0..self.dim()).map(|a| -self.weights[a] * self.exit_rate(a)).collect();
        for (a, row) in self.rows.iter().enumerate() {
            for &(b, r) in row {
                flow[b] += self.weights[a] * r;
            }
        }
        flow.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `max |nu(a) Q(a, b) - nu(b) Q(b, a)|`.
    pub fn detailed_balance_residual(&self) -> f64 {
        let rate = |a: usize, b: usize| self.rows[a].iter().find(|e| e.0 == b).map_or(0.0, |e| e.1);
        let mut worst = 0.0f64;
        for (a, row) in self.rows.iter().enumerate() {
            for &(b, r) in row {
                worst = worst.max((self.weights[a] * r - self.weights[b] * rate(b, a)).abs());
            }
        }
        worst
    }

    /// Symmetric part of the generator in `L^2(nu)`, `(Q + Q*) / 2`.
    pub fn symmetric_part(&self) -> CanonicalGenerator {
        let mut acc: Vec<HashMap<usize, f64>> = vec![HashMap::new(); self.dim()];
        for (a, row) in self.rows.iter().enumerate() {
            for &(b, r) in row {
                *acc[a].entry(b).or_default() += 0.5 * r;
                *acc[b].entry(a).or_default() += 0.5 * r * self.weights[a] / self.weights[b];
            }
        }
        let rows = acc
            .into_iter()
            .map(|m| {
                let mut v: Vec<(usize, f64)> = m.into_iter().collect();
                v.sort_by_key(|e| e.0);
                v
            })
            .collect();
        CanonicalGenerator { rows, p_right: 0.5, ..self.clone() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectralGap {
    pub ell: usize,
    pub totals: Vec<u32>,
    pub dim: usize,
    pub gap: f64,
    /// `1 / gap`.
    pub w: f64,
}

/// Gap of the symmetric process on an interval of `2 ell + 1` sites.
pub fn spectral_gap(family: &RateFamily, totals: &[u32], ell: usize) -> Result<SpectralGap, KmcError> {
    let sites = 2 * ell + 1;
    let count = canonical_size(sites, totals);
    if count > MAX_DENSE_STATES as u128 {
        return Err(KmcError::Size { count, limit: MAX_DENSE_STATES as u128 });
    }
    if count <= 1 {
        return Err(KmcError::SingleState);
    }
    let s = canonical_generator(family, sites, totals, Geometry::Interval, 0.5)?.symmetric_part();
    let d = s.dim();
    let root: Vec<f64> = s.weights.iter().map(|w| w.sqrt()).collect();
    let mut a = DMatrix::<f64>::zeros(d, d);
    for (i, row) in s.rows.iter().enumerate() {
        for &(j, r) in row {
            a[(i, j)] -= 0.5 * r * root[i] / root[j];
            a[(j, i)] -= 0.5 * r * root[i] / root[j];
        }
        a[(i, i)] += s.exit_rate(i);
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(a).eigenvalues.iter().cloned().collect();
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let gap = ev[1];
    Ok(SpectralGap { ell, totals: totals.to_vec(), dim: d, gap, w: 1.0 / gap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn fenwick_matches_naive(v in proptest::collection::vec(0.0f64..5.0, 1..40), ops in proptest::collection::vec((0usize..40, 0.0f64..3.0), 0..20), u in 0.0f64..1.0) {
            let mut vals = v.clone();
            let mut f = Fenwick::from_values(&vals);
            for (i, w) in ops {
                let i = i % vals.len();
                f.add(i, w - vals[i]);
                vals[i] = w;
            }
            let mut run = 0.0;
            for (i, x) in vals.iter().enumerate() {
                prop_assert!((f.prefix(i) - run).abs() < 1e-9);
                run += x;
            }
            if run > 0.0 {
                let target = u * run;
                let k = f.find(target);
                let naive = vals.iter().scan(0.0, |s, x| { *s += x; Some(*s) }).position(|s| s > target).unwrap_or(vals.len() - 1);
                prop_assert!(k == naive || (f.prefix(k + 1) - f.prefix(naive + 1)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn asymmetry_bounds() {
        let p = SimParams { n: 4, gamma: 1.0, c: 3.0, t_end: 1.0, seed: 0, record_times: vec![] };
        assert!(p.validate().is_err());
        let p = SimParams { c: 2.0, ..p };
        assert_eq!(p.p_right(), 1.0);
        assert!(p.validate().is_ok());
    }

    #[test]
    fn independent_two_species_three_sites() {
        let fam = RateFamily::independent(2);
        let g = canonical_generator(&fam, 3, &[1, 1], Geometry::Torus, 0.8).unwrap();
        assert_eq!(g.dim(), 9);
        assert!(g.weights.iter().all(|w| (w - 1.0 / 9.0).abs() < 1e-15));
        assert!(g.stationarity_residual() < 1e-12);
        let q = g.dense();
        for a in 0..9 {
            assert!(q.row(a).sum().abs() < 1e-14);
        }
    }

    #[test]
    fn two_site_stationary_measure() {
        let fam = RateFamily::independent(1);
        let g = canonical_generator(&fam, 2, &[2], Geometry::Torus, 0.7).unwrap();
        assert_eq!(g.dim(), 3);
        // solve nu Q = 0 with sum nu = 1 directly
        let mut m = g.dense().transpose();
        for j in 0..3 {
            m[(2, j)] = 1.0;
        }
        let nu = m.lu().solve(&nalgebra::DVector::from_vec(vec![0.0, 0.0, 1.0])).unwrap();
        for (a, s) in g.states.iter().enumerate() {
            let w = 1.0 / (factorial(s[0]) * factorial(s[1]));
            assert!((nu[a] - w / 2.0).abs() < 1e-12, "{a}: {} vs {}", nu[a], w / 2.0);
        }
    }

    fn factorial(k: u32) -> f64 {
        (1..=k).map(|v| v as f64).product()
    }

    #[test]
    fn empty_system() {
        let fam = RateFamily::independent(2);
        let g = canonical_generator(&fam, 3, &[0, 0], Geometry::Torus, 0.6).unwrap();
        assert_eq!(g.dim(), 1);
        assert!(g.dense().iter().all(|v| *v == 0.0));
        assert!(matches!(spectral_gap(&fam, &[0, 0], 1), Err(KmcError::SingleState)));
    }

    #[test]
    fn perturbed_family_is_stationary_and_reversible() {
        let fam = RateFamily::perturbed_walks(3.0, -0.96).unwrap();
        for totals in [[1, 1], [2, 2]] {
            let g = canonical_generator(&fam, 3, &totals, Geometry::Torus, 0.9).unwrap();
            assert!(g.stationarity_residual() < 1e-10);
            let s = canonical_generator(&fam, 3, &totals, Geometry::Torus, 0.5).unwrap();
            assert!(s.detailed_balance_residual() < 1e-12);
            assert!(g.detailed_balance_residual() > 1e-3);
            let sym = g.symmetric_part();
            assert!(sym.detailed_balance_residual() < 1e-12);
        }
    }

    #[test]
    fn single_walker_gap() {
        let fam = RateFamily::independent(1);
        let gap = spectral_gap(&fam, &[1], 1).unwrap();
        assert_eq!(gap.dim, 3);
        assert!((gap.gap - 0.5).abs() < 1e-12);
    }

    #[test]
    fn size_limit() {
        let fam = RateFamily::independent(2);
        assert!(matches!(canonical_generator(&fam, 40, &[10, 10], Geometry::Torus, 0.5), Err(KmcError::Size { .. })));
    }

    #[test]
    fn same_seed_same_path() {
        let fam = Arc::new(RateFamily::independent(2));
        let point = crate::ensemble::point_at_fugacity(&fam, &[1.0, 0.5], 1e-14).unwrap();
        let params = SimParams { n: 32, gamma: 1.0, c: 1.0, t_end: 0.05, seed: 9, record_times: vec![] };
        let mut paths = Vec::new();
        for _ in 0..2 {
            let mut rng = replica_rng(params.seed, 3);
            let mut s = init_stationary(&params, &point, &mut rng).unwrap();
            let sum = run(&mut s, &params, &mut [], &mut rng).unwrap();
            assert!(s.conserved());
            paths.push((s.raw_occupancy().to_vec(), sum.events));
        }
        assert_eq!(paths[0], paths[1]);
        let mut other = replica_rng(params.seed, 4);
        let s = init_stationary(&params, &point, &mut other).unwrap();
        assert_ne!(s.raw_occupancy(), paths[0].0.as_slice());
    }
}
