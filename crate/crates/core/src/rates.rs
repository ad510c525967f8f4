//! Jump-rate families `g_i : Z_+^n -> [0, inf)` and finite checks of the
//! structural conditions (ND), (LG), (INV), (ORI) and (LB).
//!
//! Species are indexed from 0 in code. Every check is bounded by a cap on
//! the total occupancy `|k|`; a condition reported as holding is certified
//! only on `{k : |k| <= cap}`.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

/// Above this total occupancy `g!` is accumulated in log space.
pub const LOG_SPACE_THRESHOLD: u32 = 30;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum RateError {
    #[error("cap exceeded: occupancy {k:?} is beyond the tabulated cap {cap}")]
    CapExceeded { k: Vec<u32>, cap: u32 },
    #[error("species index {i} out of range for {n} species")]
    Species { i: usize, n: usize },
    #[error("occupancy vector has length {got}, expected {n}")]
    Dimension { got: usize, n: usize },
    #[error("invalid rate family: {0}")]
    Invalid(String),
}

/// Scalar rate `g : Z_+ -> [0, inf)` with `g(0) = 0`, used by multi-color families.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ScalarRate {
    /// `g(m) = scale * m`
    Linear { scale: f64 },
    /// `g(m) = m^exponent`
    Power { exponent: f64 },
    /// `g(m) = value` for `m >= 1`
    Constant { value: f64 },
    /// `g(m) = m * factors[m]` for `m < factors.len()`, and `g(m) = m` beyond.
    LinearPerturbed { factors: Vec<f64> },
}

impl ScalarRate {
    pub fn eval(&self, m: u32) -> f64 {
        if m == 0 {
            return 0.0;
        }
        match self {
            ScalarRate::Linear { scale } => scale * m as f64,
            ScalarRate::Power { exponent } => (m as f64).powf(*exponent),
            ScalarRate::Constant { value } => *value,
            ScalarRate::LinearPerturbed { factors } => {
                let f = factors.get(m as usize).copied().unwrap_or(1.0);
                m as f64 * f
            }
        }
    }

    /// Rate whose invariant marginal is proportional to `phi^k H(k) / k!` with
    /// `H(0) = a`, `H(1) = b` and `H(k) = c` for `k >= 2`.
    pub fn h_example(a: f64, b: f64, c: f64) -> Self {
        ScalarRate::LinearPerturbed { factors: vec![1.0, a / b, b / c] }
    }

    /// The smaller root of `(1/4 - c)^2 = c e / 4`.
    pub fn h_example_c() -> f64 {
        let e = std::f64::consts::E;
        let p = 0.5 + e / 4.0;
        (p - (p * p - 0.25).sqrt()) / 2.0
    }

    fn validate(&self) -> Result<(), RateError> {
        let ok = match self {
            ScalarRate::Linear { scale } => *scale > 0.0,
            ScalarRate::Power { exponent } => exponent.is_finite(),
            ScalarRate::Constant { value } => *value > 0.0,
            ScalarRate::LinearPerturbed { factors } => factors.iter().skip(1).all(|f| *f > 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(RateError::Invalid(format!("scalar rate {self:?} is not positive on m >= 1")))
        }
    }
}

/// Explicit rate values `g_i(k)` for `|k| <= cap`.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRates {
    pub cap: u32,
    values: HashMap<Vec<u32>, Vec<f64>>,
}

impl TableRates {
    pub fn new(n: usize, cap: u32, values: HashMap<Vec<u32>, Vec<f64>>) -> Result<Self, RateError> {
        for (k, g) in &values {
            if k.len() != n || g.len() != n {
                return Err(RateError::Dimension { got: k.len().max(g.len()), n });
            }
        }
        for m in 0..=cap {
            for k in shell(n, m) {
                if !values.contains_key(&k) {
                    return Err(RateError::Invalid(format!("table is missing entry {k:?}")));
                }
            }
        }
        Ok(TableRates { cap, values })
    }

    /// Reads rows `k1,..,kn,g1,..,gn` (header required).
    pub fn from_csv<R: std::io::Read>(n: usize, reader: R) -> Result<Self, RateError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut values = HashMap::new();
        let mut cap = 0;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| RateError::Invalid(e.to_string()))?;
            if rec.len() != 2 * n {
                return Err(RateError::Dimension { got: rec.len() / 2, n });
            }
            let parse_err = |e: String| RateError::Invalid(format!("bad table cell: {e}"));
            let k: Vec<u32> = (0..n)
                .map(|j| rec[j].trim().parse::<u32>().map_err(|e| parse_err(e.to_string())))
                .collect::<Result<_, _>>()?;
            let g: Vec<f64> = (n..2 * n)
                .map(|j| rec[j].trim().parse::<f64>().map_err(|e| parse_err(e.to_string())))
                .collect::<Result<_, _>>()?;
            cap = cap.max(k.iter().sum());
            values.insert(k, g);
        }
        // the cap is the largest complete shell
        let mut full = 0;
        for m in 0..=cap {
            if shell(n, m).iter().all(|k| values.contains_key(k)) {
                full = m;
            } else {
                break;
            }
        }
        TableRates::new(n, full, values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RateKind {
    /// `g_i(k) = k_i`
    Independent,
    /// `g_i(k) = k_i!`
    IndependentFactorial,
    /// `g_i(k) = g(|k|) k_i / |k|`
    MultiColor(ScalarRate),
    /// `g_i(k) = lambda(k - e_i) / lambda(k) * base_i(k)`, so that `g!(k) = base!(k) / lambda(k)`.
    Perturbed { base: Arc<RateFamily>, lambda: HashMap<Vec<u32>, f64> },
    Table(TableRates),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateFamily {
    n: usize,
    kind: RateKind,
}

impl RateFamily {
    pub fn independent(n: usize) -> Self {
        RateFamily { n, kind: RateKind::Independent }
    }

    pub fn independent_factorial(n: usize) -> Self {
        RateFamily { n, kind: RateKind::IndependentFactorial }
    }

    pub fn multi_color(n: usize, g: ScalarRate) -> Result<Self, RateError> {
        g.validate()?;
        Ok(RateFamily { n, kind: RateKind::MultiColor(g) })
    }

    pub fn perturbed(base: RateFamily, lambda: HashMap<Vec<u32>, f64>) -> Result<Self, RateError> {
        let n = base.n;
        for (k, v) in &lambda {
            if k.len() != n {
                return Err(RateError::Dimension { got: k.len(), n });
            }
            if !(*v > 0.0) || !v.is_finite() {
                return Err(RateError::Invalid(format!("lambda({k:?}) = {v} must be positive")));
            }
            if k.iter().all(|&x| x == 0) && *v != 1.0 {
                return Err(RateError::Invalid("lambda(0) must equal 1".into()));
            }
        }
        Ok(RateFamily { n, kind: RateKind::Perturbed { base: Arc::new(base), lambda } })
    }

    /// The two-species model with `lambda(1,0) = 1 + x`, `lambda(0,1) = 1 + y`
    /// on top of independent walkers.
    pub fn perturbed_walks(x: f64, y: f64) -> Result<Self, RateError> {
        let mut lambda = HashMap::new();
        lambda.insert(vec![1, 0], 1.0 + x);
        lambda.insert(vec![0, 1], 1.0 + y);
        RateFamily::perturbed(RateFamily::independent(2), lambda)
    }

    pub fn table(n: usize, table: TableRates) -> Self {
        RateFamily { n, kind: RateKind::Table(table) }
    }

    pub fn n_species(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> &RateKind {
        &self.kind
    }

    /// Largest total occupancy at which rates can be evaluated.
    pub fn cap(&self) -> Option<u32> {
        match &self.kind {
            RateKind::Table(t) => Some(t.cap),
            RateKind::Perturbed { base, .. } => base.cap(),
            _ => None,
        }
    }

    pub fn is_multi_color(&self) -> Option<&ScalarRate> {
        match &self.kind {
            RateKind::MultiColor(g) => Some(g),
            _ => None,
        }
    }

    fn lambda_at(lambda: &HashMap<Vec<u32>, f64>, k: &[u32]) -> f64 {
        lambda.get(k).copied().unwrap_or(1.0)
    }

    /// `g_i(k)`.
    pub fn rate(&self, i: usize, k: &[u32]) -> Result<f64, RateError> {
        if i >= self.n {
            return Err(RateError::Species { i, n: self.n });
        }
        if k.len() != self.n {
            return Err(RateError::Dimension { got: k.len(), n: self.n });
        }
        if k[i] == 0 {
            if let RateKind::Table(t) = &self.kind {
                let tot: u32 = k.iter().sum();
                if tot > t.cap {
                    return Err(RateError::CapExceeded { k: k.to_vec(), cap: t.cap });
                }
            }
            return Ok(0.0);
        }
        match &self.kind {
            RateKind::Independent => Ok(k[i] as f64),
            RateKind::IndependentFactorial => Ok(factorial(k[i])),
            RateKind::MultiColor(g) => {
                let m: u32 = k.iter().sum();
                Ok(g.eval(m) * k[i] as f64 / m as f64)
            }
            RateKind::Perturbed { base, lambda } => {
                let b = base.rate(i, k)?;
                let mut km = k.to_vec();
                km[i] -= 1;
                Ok(Self::lambda_at(lambda, &km) / Self::lambda_at(lambda, k) * b)
            }
            RateKind::Table(t) => {
                let tot: u32 = k.iter().sum();
                if tot > t.cap {
                    return Err(RateError::CapExceeded { k: k.to_vec(), cap: t.cap });
                }
                Ok(t.values[k][i])
            }
        }
    }

    /// `log g!(k)` along the species-ordered path (species 0 filled first).
    pub fn log_g_factorial(&self, k: &[u32]) -> Result<f64, RateError> {
        if k.len() != self.n {
            return Err(RateError::Dimension { got: k.len(), n: self.n });
        }
        let mut cur = vec![0u32; self.n];
        let mut acc = 0.0;
        for i in 0..self.n {
            for _ in 0..k[i] {
                cur[i] += 1;
                acc += self.rate(i, &cur)?.ln();
            }
        }
        Ok(acc)
    }

    /// `g!(k)`; direct product up to `|k| = 30`, log space above.
    pub fn g_factorial(&self, k: &[u32]) -> Result<f64, RateError> {
        let tot: u32 = k.iter().sum();
        if tot > LOG_SPACE_THRESHOLD {
            return Ok(self.log_g_factorial(k)?.exp());
        }
        if k.len() != self.n {
            return Err(RateError::Dimension { got: k.len(), n: self.n });
        }
        path_product(self, &canonical_path(k))
    }

    /// Materializes the family as a table on `|k| <= cap`.
    pub fn tabulate(&self, cap: u32) -> Result<RateFamily, RateError> {
        let mut values = HashMap::new();
        for m in 0..=cap {
            for k in shell(self.n, m) {
                let g = (0..self.n).map(|i| self.rate(i, &k)).collect::<Result<Vec<_>, _>>()?;
                values.insert(k, g);
            }
        }
        Ok(RateFamily::table(self.n, TableRates::new(self.n, cap, values)?))
    }
}

fn factorial(m: u32) -> f64 {
    (1..=m).map(|j| j as f64).product()
}

fn canonical_path(k: &[u32]) -> Vec<usize> {
    k.iter().enumerate().flat_map(|(i, &ki)| std::iter::repeat_n(i, ki as usize)).collect()
}

fn path_product(family: &RateFamily, path: &[usize]) -> Result<f64, RateError> {
    let mut cur = vec![0u32; family.n];
    let mut acc = 1.0;
    for &i in path {
        cur[i] += 1;
        acc *= family.rate(i, &cur)?;
    }
    Ok(acc)
}

fn log_path_product(family: &RateFamily, path: &[usize]) -> Result<f64, RateError> {
    let mut cur = vec![0u32; family.n];
    let mut acc = 0.0;
    for &i in path {
        cur[i] += 1;
        acc += family.rate(i, &cur)?.ln();
    }
    Ok(acc)
}

/// All occupancy vectors with `n` entries summing to `m`, in lexicographic order
/// with species 0 varying slowest.
pub fn shell(n: usize, m: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut cur = vec![0u32; n];
    fn rec(pos: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        let n = cur.len();
        if pos + 1 == n {
            cur[pos] = left;
            out.push(cur.clone());
            return;
        }
        for v in (0..=left).rev() {
            cur[pos] = v;
            rec(pos + 1, left - v, cur, out);
        }
    }
    if n == 0 {
        return out;
    }
    rec(0, m, &mut cur, &mut out);
    out
}

/// Maximum relative deviation of `g!(k)` over `trials` random increasing paths
/// from the species-ordered path.
pub fn check_path_independence<R: Rng + ?Sized>(
    family: &RateFamily,
    k: &[u32],
    trials: usize,
    rng: &mut R,
) -> Result<f64, RateError> {
    let reference = canonical_path(k);
    let tot: u32 = k.iter().sum();
    let log_space = tot > LOG_SPACE_THRESHOLD;
    let base = if log_space {
        log_path_product(family, &reference)?
    } else {
        path_product(family, &reference)?
    };
    let mut path = reference;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        path.shuffle(rng);
        let dev = if log_space {
            (log_path_product(family, &path)? - base).exp_m1().abs()
        } else {
            let v = path_product(family, &path)?;
            ((v - base) / base).abs()
        };
        worst = worst.max(dev);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Serialize)]
pub struct NdReport {
    pub holds: bool,
    pub g_star: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LgReport {
    pub holds: bool,
    pub max_increment: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct InvReport {
    pub holds: bool,
    pub worst_violation: f64,
    /// `(i, j, k)` where the worst ratio violation occurs.
    pub worst_at: Option<(usize, usize, Vec<u32>)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OriReport {
    /// Running minimum of `g!(k)^{1/|k|}` over `1 <= |k| <= cap`.
    pub phi_star_estimate: f64,
    /// Set when the per-shell minima are still decreasing at the cap.
    pub decreasing_warning: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct LbReport {
    pub holds: bool,
    pub worst_margin: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionReport {
    pub cap: u32,
    pub nd: NdReport,
    pub lg: LgReport,
    pub inv: InvReport,
    pub ori: OriReport,
    pub lb: LbReport,
}

pub const INV_TOLERANCE: f64 = 1e-12;

/// Exhaustive check of the structural conditions over `|k| <= cap`.
pub fn check_conditions(family: &RateFamily, cap: u32, m0: &[u32], eps0: f64) -> Result<ConditionReport, RateError> {
    let n = family.n;
    if cap < 2 {
        return Err(RateError::Invalid("cap must be at least 2".into()));
    }
    if m0.len() != n {
        return Err(RateError::Dimension { got: m0.len(), n });
    }
    if let Some(c) = family.cap() {
        if cap > c {
            return Err(RateError::CapExceeded { k: vec![cap], cap: c });
        }
    }
    let shells: Vec<Vec<Vec<u32>>> = (0..=cap).map(|m| shell(n, m)).collect();

    let mut nd_holds = true;
    let mut g_star = f64::INFINITY;
    let mut shell_incr = vec![0.0f64; cap as usize + 1];
    let mut inv_worst = 0.0f64;
    let mut inv_at = None;
    let mut shell_min = vec![f64::INFINITY; cap as usize + 1];
    let mut lb_margin = f64::INFINITY;

    for (m, sh) in shells.iter().enumerate() {
        for k in sh {
            for i in 0..n {
                let g = family.rate(i, k)?;
                if (g == 0.0) != (k[i] == 0) {
                    nd_holds = false;
                }
                if k[i] > 0 {
                    g_star = g_star.min(g);
                }
                if (m as u32) < cap {
                    for j in 0..n {
                        let mut kp = k.clone();
                        kp[j] += 1;
                        let d = (family.rate(i, &kp)? - g).abs();
                        shell_incr[m] = shell_incr[m].max(d);
                    }
                }
                for j in 0..n {
                    if j == i || k[i] == 0 || k[j] == 0 {
                        continue;
                    }
                    let mut kj = k.clone();
                    kj[j] -= 1;
                    let mut ki = k.clone();
                    ki[i] -= 1;
                    let r1 = g / family.rate(i, &kj)?;
                    let r2 = family.rate(j, k)? / family.rate(j, &ki)?;
                    let v = (r1 - r2).abs() / r1.abs().max(r2.abs());
                    if v > inv_worst {
                        inv_worst = v;
                        inv_at = Some((i, j, k.clone()));
                    }
                }
                let mut km = k.clone();
                let mut fits = true;
                for j in 0..n {
                    km[j] += m0[j];
                }
                if km.iter().sum::<u32>() > cap {
                    fits = false;
                }
                if fits {
                    let kmi = family.rate(i, &km)?;
                    lb_margin = lb_margin.min(kmi - g - eps0);
                }
            }
            if m > 0 {
                let v = (family.log_g_factorial(k)? / m as f64).exp();
                shell_min[m] = shell_min[m].min(v);
            }
        }
    }

    let max_increment = shell_incr.iter().cloned().fold(0.0, f64::max);
    // bounded increments: the late shells should not outgrow the early ones
    let late = shell_incr[cap as usize - 1];
    let early = shell_incr[..=(cap as usize / 4).max(1)].iter().cloned().fold(0.0, f64::max);
    let lg_holds = max_increment.is_finite() && late <= 2.0 * early + 1e-12;

    let phi_star = shell_min[1..].iter().cloned().fold(f64::INFINITY, f64::min);
    let tail = &shell_min[(cap as usize).saturating_sub(4).max(1)..];
    let decreasing = tail.len() >= 2 && tail.windows(2).all(|w| w[1] < w[0]);

    Ok(ConditionReport {
        cap,
        nd: NdReport { holds: nd_holds && g_star > 0.0, g_star },
        lg: LgReport { holds: lg_holds, max_increment },
        inv: InvReport { holds: inv_worst < INV_TOLERANCE, worst_violation: inv_worst, worst_at: inv_at },
        ori: OriReport { phi_star_estimate: phi_star, decreasing_warning: decreasing },
        lb: LbReport { holds: lb_margin >= -1e-12, worst_margin: lb_margin },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spot_values() {
        let ind = RateFamily::independent(2);
        assert_eq!(ind.rate(0, &[3, 2]).unwrap(), 3.0);
        let mc = RateFamily::multi_color(2, ScalarRate::Linear { scale: 1.0 }).unwrap();
        assert_eq!(mc.rate(1, &[2, 1]).unwrap(), 1.0);
        assert_eq!(mc.rate(0, &[0, 5]).unwrap(), 0.0);
        assert_eq!(mc.g_factorial(&[2, 1]).unwrap(), 2.0);
        assert_eq!(mc.g_factorial(&[0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn shells_have_binomial_size() {
        assert_eq!(shell(2, 5).len(), 6);
        assert_eq!(shell(3, 4).len(), 15);
        assert!(shell(3, 4).iter().all(|k| k.iter().sum::<u32>() == 4));
    }

    #[test]
    fn perturbation_identity() {
        let fam = RateFamily::perturbed_walks(3.0, -0.96).unwrap();
        let base = RateFamily::independent(2);
        for k in [[1u32, 0], [0, 1], [2, 3], [1, 1]] {
            let lam = match &fam.kind {
                RateKind::Perturbed { lambda, .. } => RateFamily::lambda_at(lambda, &k),
                _ => unreachable!(),
            };
            let lhs = fam.g_factorial(&k).unwrap() * lam;
            let rhs = base.g_factorial(&k).unwrap();
            assert!((lhs - rhs).abs() <= 1e-14 * rhs, "{k:?}");
        }
    }

    #[test]
    fn table_cap_error() {
        let t = RateFamily::independent(2).tabulate(4).unwrap();
        assert_eq!(t.rate(0, &[2, 2]).unwrap(), 2.0);
        match t.rate(0, &[3, 2]) {
            Err(RateError::CapExceeded { k, .. }) => assert_eq!(k, vec![3, 2]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn inv_violation_located() {
        let t = RateFamily::independent(2).tabulate(6).unwrap();
        let RateKind::Table(mut tab) = t.kind.clone() else { unreachable!() };
        tab.values.get_mut(&vec![1, 1]).unwrap()[0] *= 2.0;
        let broken = RateFamily::table(2, tab);
        let rep = check_conditions(&broken, 6, &[1, 1], 0.5).unwrap();
        assert!(!rep.inv.holds);
        // g_0(1,1)/g_0(1,0) = 2 against g_1(1,1)/g_1(0,1) = 1
        let (_, _, k) = rep.inv.worst_at.unwrap();
        assert_eq!(k, vec![1, 1]);
        assert!((rep.inv.worst_violation - 0.5).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // the two paths to (1,1) give 1*1 and 2*1
        let dev = check_path_independence(&broken, &[1, 1], 50, &mut rng).unwrap();
        assert!((dev - 1.0).abs() < 1e-15, "{dev}");
    }

    #[test]
    fn conditions_for_linear_multicolor() {
        let mc = RateFamily::multi_color(2, ScalarRate::Linear { scale: 1.0 }).unwrap();
        let rep = check_conditions(&mc, 20, &[1, 1], 0.5).unwrap();
        assert!(rep.nd.holds && rep.lg.holds && rep.inv.holds && rep.lb.holds, "{rep:?}");
        assert!(!rep.ori.decreasing_warning);
        let ind = RateFamily::independent(2);
        assert!(check_conditions(&ind, 30, &[1, 1], 0.5).unwrap().lb.holds);
    }

    #[test]
    fn quadratic_rate_fails_linear_growth() {
        let mc = RateFamily::multi_color(1, ScalarRate::Power { exponent: 2.0 }).unwrap();
        let rep = check_conditions(&mc, 24, &[1], 0.5).unwrap();
        assert!(!rep.lg.holds);
    }

    #[test]
    fn constant_rate_flags_ori_decrease() {
        let mc = RateFamily::multi_color(2, ScalarRate::Constant { value: 1.0 }).unwrap();
        let rep = check_conditions(&mc, 20, &[1, 1], 0.0).unwrap();
        assert!(rep.ori.decreasing_warning);
        assert!(rep.inv.holds);
    }

    #[test]
    fn h_example_constant() {
        let c = ScalarRate::h_example_c();
        let e = std::f64::consts::E;
        assert!(((0.25 - c).powi(2) - c * e / 4.0).abs() < 1e-15);
        assert!((c - 0.0556068).abs() < 5e-7);
        let g = ScalarRate::h_example(0.5, 0.25, c);
        assert!((g.eval(1) - 2.0).abs() < 1e-15);
        assert!((g.eval(2) - 0.5 / c).abs() < 1e-12);
        assert_eq!(g.eval(3), 3.0);
    }

    #[test]
    fn log_space_matches_direct() {
        let mc = RateFamily::multi_color(2, ScalarRate::Power { exponent: 1.5 }).unwrap();
        let k = [18u32, 16];
        let direct = path_product(&mc, &canonical_path(&k)).unwrap();
        let via_log = mc.g_factorial(&k).unwrap();
        assert!(((direct - via_log) / direct).abs() < 1e-12);
    }

    #[test]
    fn table_csv_roundtrip() {
        let mut s = String::from("k1,k2,g1,g2\n");
        for m in 0..=3 {
            for k in shell(2, m) {
                s += &format!("{},{},{},{}\n", k[0], k[1], k[0], k[1]);
            }
        }
        let t = TableRates::from_csv(2, s.as_bytes()).unwrap();
        assert_eq!(t.cap, 3);
        let fam = RateFamily::table(2, t);
        assert_eq!(fam.rate(1, &[1, 2]).unwrap(), 2.0);
    }
}
