//! Experiment configuration: flat `section.key = value` text or a JSON mirror.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const ENV_OUTPUT_DIR: &str = "ZRP_OUTPUT_DIR";
pub const ENV_WORKERS: &str = "ZRP_WORKERS";

/// Raw key-value pairs before resolution.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    pub values: BTreeMap<String, String>,
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, String>) {
    use serde_json::Value;
    let key = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                flatten(&key(k), x, out);
            }
        }
        Value::Array(xs) => {
            let parts: Vec<String> = xs
                .iter()
                .map(|x| match x {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect();
            out.insert(prefix.to_string(), parts.join(","));
        }
        Value::String(s) => {
            out.insert(prefix.to_string(), s.clone());
        }
        Value::Null => {}
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

impl RawConfig {
    pub fn parse_text(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        let mut bad = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) if !k.trim().is_empty() => {
                    values.insert(k.trim().to_string(), v.trim().to_string());
                }
                _ => bad.push(format!("line {}: expected key = value", no + 1)),
            }
        }
        if bad.is_empty() {
            Ok(RawConfig { values })
        } else {
            Err(CliError::Validation(bad))
        }
    }

    pub fn parse_json(text: &str) -> Result<Self, CliError> {
        let v: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CliError::Validation(vec![format!("json: {e}")]))?;
        let mut values = BTreeMap::new();
        flatten("", &v, &mut values);
        Ok(RawConfig { values })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") || text.trim_start().starts_with('{') {
            Self::parse_json(&text)
        } else {
            Self::parse_text(&text)
        }
    }

    pub fn set(&mut self, assignment: &str) -> Result<(), CliError> {
        let more = Self::parse_text(assignment)?;
        self.values.extend(more.values);
        Ok(())
    }
}

struct Reader<'a> {
    raw: &'a RawConfig,
    used: BTreeSet<String>,
    errors: Vec<String>,
}

impl<'a> Reader<'a> {
    fn get<T: FromStr>(&mut self, key: &str, default: T) -> T
    where
        T::Err: std::fmt::Display,
    {
        self.used.insert(key.to_string());
        match self.raw.values.get(key) {
            None => default,
            Some(s) => s.parse().unwrap_or_else(|e| {
                self.errors.push(format!("{key} = {s:?}: {e}"));
                default
            }),
        }
    }

    fn opt<T: FromStr>(&mut self, key: &str) -> Option<T>
    where
        T::Err: std::fmt::Display,
    {
        self.used.insert(key.to_string());
        let s = self.raw.values.get(key)?;
        match s.parse() {
            Ok(v) => Some(v),
            Err(e) => {
                self.errors.push(format!("{key} = {s:?}: {e}"));
                None
            }
        }
    }

    fn list<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Vec<T>
    where
        T::Err: std::fmt::Display,
    {
        self.used.insert(key.to_string());
        match self.raw.values.get(key) {
            None => default,
            Some(s) if s.trim().is_empty() => Vec::new(),
            Some(s) => {
                let mut out = Vec::new();
                for part in s.trim_matches(|c| c == '[' || c == ']').split(',') {
                    match part.trim().parse() {
                        Ok(v) => out.push(v),
                        Err(e) => {
                            self.errors.push(format!("{key}: element {part:?}: {e}"));
                            return default;
                        }
                    }
                }
                out
            }
        }
    }

    fn opt_list<T: FromStr>(&mut self, key: &str) -> Option<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        if self.raw.values.contains_key(key) {
            Some(self.list(key, Vec::new()))
        } else {
            self.used.insert(key.to_string());
            None
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FamilySpec {
    pub kind: String,
    pub n: usize,
    pub x: f64,
    pub y: f64,
    pub g: String,
    pub table: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DensitySpec {
    pub a: Option<Vec<f64>>,
    pub phi: Option<Vec<f64>>,
    pub solve_frame: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimSpec {
    pub n: usize,
    pub gamma: f64,
    pub c: f64,
    pub t_end: f64,
    pub records: usize,
    pub replicas: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FieldSpec {
    pub modes: Vec<u32>,
    /// `auto`, `fixed` or `traveling`
    pub frame: String,
    /// `exact` or `floor`
    pub rule: String,
    pub eps: Vec<f64>,
    pub max_lag: usize,
    pub decompose: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpdeSpec {
    /// `ou` or `burgers`
    pub kind: String,
    pub grid: usize,
    pub dt: f64,
    pub eps: f64,
    pub paths: u64,
    pub t_end: f64,
    pub records: usize,
    /// `auto`, `on` or `off`
    pub transport: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisSpec {
    pub frame: bool,
    pub tensor: bool,
    pub decouple: bool,
    pub fields: bool,
    pub spde: bool,
    pub eoe: bool,
    pub bg: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticSpec {
    pub f: String,
    pub order: String,
    pub ells: Vec<usize>,
    pub samples: usize,
    pub replicas: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareSpec {
    pub tol_se: f64,
    pub rel_tol: f64,
    pub kinds: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub family: FamilySpec,
    pub density: DensitySpec,
    pub sim: SimSpec,
    pub fields: FieldSpec,
    pub spde: SpdeSpec,
    pub analysis: AnalysisSpec,
    pub eoe: DiagnosticSpec,
    pub bg: DiagnosticSpec,
    pub decouple_grid: usize,
    pub compare: CompareSpec,
    pub workers: usize,
    #[serde(skip)]
    pub output_dir: PathBuf,
}

const KINDS: [&str; 5] = ["independent", "independent_factorial", "multi_color", "perturbed_walks", "table"];

impl ExperimentConfig {
    /// Resolves defaults, applies environment overrides and collects every violation.
    pub fn resolve(raw: &RawConfig) -> Result<Self, CliError> {
        let mut r = Reader { raw, used: BTreeSet::new(), errors: Vec::new() };
        let family = FamilySpec {
            kind: r.get("family.kind", "independent".to_string()),
            n: r.get("family.n", 2),
            x: r.get("family.x", 3.0),
            y: r.get("family.y", -0.96),
            g: r.get("family.g", "linear:1".to_string()),
            table: r.opt("family.table"),
        };
        let density = DensitySpec {
            a: r.opt_list("density.a"),
            phi: r.opt_list("density.phi"),
            solve_frame: r.get("density.solve_frame", false),
        };
        let sim = SimSpec {
            n: r.get("sim.N", 128),
            gamma: r.get("sim.gamma", 1.0),
            c: r.get("sim.c", 1.0),
            t_end: r.get("sim.T", 0.1),
            records: r.get("sim.records", 11),
            replicas: r.get("sim.replicas", 8),
            seed: r.get("sim.seed", 1),
        };
        let fields = FieldSpec {
            modes: r.list("fields.modes", vec![1, 2]),
            frame: r.get("fields.frame", "auto".to_string()),
            rule: r.get("fields.rule", "exact".to_string()),
            eps: r.list("fields.eps", Vec::new()),
            max_lag: r.get("fields.max_lag", 4),
            decompose: r.get("fields.decompose", true),
        };
        let spde = SpdeSpec {
            kind: r.get("spde.kind", "ou".to_string()),
            grid: r.get("spde.K", 64),
            dt: r.get("spde.dt", 1e-4),
            eps: r.get("spde.eps", 0.25),
            paths: r.get("spde.paths", 32),
            t_end: r.get("spde.T", 0.1),
            records: r.get("spde.records", 11),
            transport: r.get("spde.transport", "auto".to_string()),
        };
        let analysis = AnalysisSpec {
            frame: r.get("analysis.frame", false),
            tensor: r.get("analysis.tensor", false),
            decouple: r.get("analysis.decouple", false),
            fields: r.get("analysis.fields", true),
            spde: r.get("analysis.spde", false),
            eoe: r.get("analysis.eoe", false),
            bg: r.get("analysis.bg", false),
        };
        let eoe = DiagnosticSpec {
            f: r.get("eoe.f", "k1^2".to_string()),
            order: r.get("eoe.order", "second".to_string()),
            ells: r.list("eoe.ells", vec![2, 4, 8, 16]),
            samples: r.get("eoe.samples", 200_000),
            replicas: 0,
        };
        let bg = DiagnosticSpec {
            f: r.get("bg.f", "k1^2".to_string()),
            order: r.get("bg.order", "second".to_string()),
            ells: r.list("bg.ells", vec![0, 1, 2, 4, 8, 16]),
            samples: 0,
            replicas: r.get("bg.replicas", 16),
        };
        let decouple_grid = r.get("decouple.grid", 10_000);
        let compare = CompareSpec {
            tol_se: r.get("compare.tol_se", 4.0),
            rel_tol: r.get("compare.rel_tol", 0.0),
            kinds: r.list("compare.kinds", vec!["cov".to_string()]),
        };
        let mut workers: usize = r.get("workers", 1);
        let mut output_dir: PathBuf = r.get("output.dir", PathBuf::from("out"));

        let unknown: Vec<String> = raw.values.keys().filter(|k| !r.used.contains(*k)).cloned().collect();
        for k in unknown {
            r.errors.push(format!("unknown key {k}"));
        }
        if let Ok(dir) = std::env::var(ENV_OUTPUT_DIR) {
            output_dir = PathBuf::from(dir);
        }
        if let Ok(w) = std::env::var(ENV_WORKERS) {
            match w.parse() {
                Ok(v) => workers = v,
                Err(e) => r.errors.push(format!("{ENV_WORKERS} = {w:?}: {e}")),
            }
        }
        let cfg = ExperimentConfig {
            family,
            density,
            sim,
            fields,
            spde,
            analysis,
            eoe,
            bg,
            decouple_grid,
            compare,
            workers,
            output_dir,
        };
        let mut errors = r.errors;
        errors.extend(cfg.violations());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(CliError::Validation(errors))
        }
    }

    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let n = self.family.n;
        if !KINDS.contains(&self.family.kind.as_str()) {
            v.push(format!("family.kind = {} is not one of {}", self.family.kind, KINDS.join(", ")));
        }
        if self.family.kind == "perturbed_walks" && n != 2 {
            v.push("family.n must be 2 for perturbed_walks".into());
        }
        if n == 0 || n > zrp_core::kmc::MAX_SPECIES {
            v.push(format!("family.n = {n} must be in 1..={}", zrp_core::kmc::MAX_SPECIES));
        }
        if self.family.kind == "table" && self.family.table.is_none() {
            v.push("family.table is required for a table family".into());
        }
        match (&self.density.a, &self.density.phi) {
            (Some(_), Some(_)) => v.push("give only one of density.a and density.phi".into()),
            (None, None) => v.push("one of density.a or density.phi is required".into()),
            (Some(x), None) | (None, Some(x)) => {
                if x.len() != n {
                    v.push(format!("density has {} entries for {n} species", x.len()));
                }
                if x.iter().any(|t| !(*t > 0.0)) {
                    v.push("density entries must be positive".into());
                }
            }
        }
        if self.density.solve_frame && self.density.a.is_none() {
            v.push("density.solve_frame needs density.a as the starting point".into());
        }
        let p = 0.5 + self.sim.c / (self.sim.n as f64).powf(self.sim.gamma);
        if !(0.0..=1.0).contains(&p) {
            v.push(format!("p(1) = {p} is outside [0, 1]"));
        }
        if self.sim.n < 2 {
            v.push("sim.N must be at least 2".into());
        }
        if !(self.sim.gamma > 0.0) {
            v.push("sim.gamma must be positive".into());
        }
        if !(self.sim.t_end >= 0.0) {
            v.push("sim.T must be non-negative".into());
        }
        if self.sim.records == 0 {
            v.push("sim.records must be at least 1".into());
        }
        if self.sim.replicas == 0 {
            v.push("sim.replicas must be at least 1".into());
        }
        if self.fields.modes.is_empty() {
            v.push("fields.modes is empty".into());
        }
        if !["auto", "fixed", "traveling"].contains(&self.fields.frame.as_str()) {
            v.push(format!("fields.frame = {} is not auto, fixed or traveling", self.fields.frame));
        }
        if !["exact", "floor"].contains(&self.fields.rule.as_str()) {
            v.push(format!("fields.rule = {} is not exact or floor", self.fields.rule));
        }
        if !["ou", "burgers"].contains(&self.spde.kind.as_str()) {
            v.push(format!("spde.kind = {} is not ou or burgers", self.spde.kind));
        }
        if !["auto", "on", "off"].contains(&self.spde.transport.as_str()) {
            v.push(format!("spde.transport = {} is not auto, on or off", self.spde.transport));
        }
        if self.spde.grid < 8 || self.spde.grid % 2 == 1 {
            v.push(format!("spde.K = {} must be even and at least 8", self.spde.grid));
        }
        if !(self.spde.dt > 0.0) {
            v.push("spde.dt must be positive".into());
        }
        if self.spde.kind == "burgers" && self.spde.eps < 2.0 * std::f64::consts::PI / self.spde.grid as f64 {
            v.push(format!("spde.eps = {} is below 2 pi / K", self.spde.eps));
        }
        if self.spde.records == 0 || self.spde.paths == 0 {
            v.push("spde.records and spde.paths must be at least 1".into());
        }
        for (name, d) in [("eoe", &self.eoe), ("bg", &self.bg)] {
            if !["first", "second"].contains(&d.order.as_str()) {
                v.push(format!("{name}.order = {} is not first or second", d.order));
            }
            if d.ells.is_empty() {
                v.push(format!("{name}.ells is empty"));
            }
        }
        if self.workers == 0 {
            v.push("workers must be at least 1".into());
        }
        v
    }

    /// SHA-256 of the resolved configuration, independent of the output directory.
    /// Worker count and output location do not enter the hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.workers = 1;
        let text = serde_json::to_string(&c).expect("config serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }

    pub fn record_times(&self) -> Vec<f64> {
        linspace(self.sim.t_end, self.sim.records)
    }
}

pub fn linspace(t_end: f64, records: usize) -> Vec<f64> {
    if records == 1 {
        return vec![t_end];
    }
    (0..records).map(|i| t_end * i as f64 / (records - 1) as f64).collect()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> RawConfig {
        RawConfig::parse_text("family.kind = independent\ndensity.phi = 1.0, 0.5\n").unwrap()
    }

    #[test]
    fn text_and_json_agree() {
        let t = RawConfig::parse_text("sim.N = 64 # sites\nfields.modes = 1,3\ndensity.a=1,1\n").unwrap();
        let j = RawConfig::parse_json(r#"{"sim": {"N": 64}, "fields": {"modes": [1, 3]}, "density.a": [1, 1]}"#).unwrap();
        let a = ExperimentConfig::resolve(&t).unwrap();
        let b = ExperimentConfig::resolve(&j).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.fields.modes, vec![1, 3]);
    }

    #[test]
    fn every_violation_is_listed() {
        let mut raw = base();
        raw.set("sim.c = 500").unwrap();
        raw.set("sim.N = 4").unwrap();
        raw.set("spde.K = 7").unwrap();
        raw.set("bogus.key = 1").unwrap();
        match ExperimentConfig::resolve(&raw) {
            Err(CliError::Validation(v)) => {
                assert!(v.iter().any(|m| m.contains("p(1)")));
                assert!(v.iter().any(|m| m.contains("spde.K")));
                assert!(v.iter().any(|m| m.contains("bogus.key")));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_values() {
        let mut raw = base();
        raw.set("sim.N = many").unwrap();
        assert!(matches!(ExperimentConfig::resolve(&raw), Err(CliError::Validation(_))));
        assert!(RawConfig::parse_text("no equals sign").is_err());
    }

    #[test]
    fn record_grid() {
        assert_eq!(linspace(1.0, 3), vec![0.0, 0.5, 1.0]);
        assert_eq!(linspace(2.0, 1), vec![2.0]);
    }
}
