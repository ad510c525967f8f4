//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use zrp_core::coupling::{build_tensor, decouple_scan, trilinear_residual, CouplingTensor};
use zrp_core::ensemble::{fugacity_of_density, hess_tilde_g, point_at_fugacity, DensityPoint, DEFAULT_REL_TOL};
use zrp_core::fields::{
    jackknife, structure_factor, FieldObserver, FieldSeries, Frame, FrameSpec, Linearization, Part, QuadraticObserver,
    ShiftRule, TestFunction,
};
use zrp_core::frame::{check_frame, solve_frame, FrameCertificate};
use zrp_core::kmc::{init_stationary, replica_rng, run, KmcError, RunSummary, SimParams};
use zrp_core::rates::{RateFamily, ScalarRate, TableRates};
use zrp_core::spde::{ou_correlation, BurgersIntegrator, SpectralRecorder, SpectralSetup, SpectralState};
use zrp_core::stats::{bg_rows, eoe_check, log_slope, BgObserver, LocalObservable, Order};

use crate::config::{linspace, ExperimentConfig};
use crate::output::{read_csv, Cell, RunDir};
use crate::CliError;

pub const FRAME_TOL: f64 = 1e-7;

fn numerical(e: impl std::fmt::Display) -> CliError {
    CliError::Numerical(e.to_string())
}

fn kmc_error(e: KmcError) -> CliError {
    match e {
        KmcError::Params(v) => CliError::Validation(v),
        other => numerical(other),
    }
}

pub fn parse_scalar(g: &str) -> Result<ScalarRate, CliError> {
    let bad = || CliError::Validation(vec![format!("family.g = {g:?} is not a scalar rate")]);
    let (name, args) = g.split_once(':').unwrap_or((g, ""));
    let nums: Vec<f64> = if args.is_empty() {
        Vec::new()
    } else {
        args.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?
    };
    Ok(match (name.trim(), nums.as_slice()) {
        ("linear", [s]) => ScalarRate::Linear { scale: *s },
        ("linear", []) => ScalarRate::Linear { scale: 1.0 },
        ("power", [e]) => ScalarRate::Power { exponent: *e },
        ("constant", [v]) => ScalarRate::Constant { value: *v },
        ("h_example", [a, b, c]) => ScalarRate::h_example(*a, *b, *c),
        ("h_example", []) => ScalarRate::h_example(0.5, 0.25, ScalarRate::h_example_c()),
        _ => return Err(bad()),
    })
}

pub fn build_family(cfg: &ExperimentConfig) -> Result<Arc<RateFamily>, CliError> {
    let f = &cfg.family;
    let invalid = |e: zrp_core::rates::RateError| CliError::Validation(vec![e.to_string()]);
    let fam = match f.kind.as_str() {
        "independent" => RateFamily::independent(f.n),
        "independent_factorial" => RateFamily::independent_factorial(f.n),
        "multi_color" => RateFamily::multi_color(f.n, parse_scalar(&f.g)?).map_err(invalid)?,
        "perturbed_walks" => RateFamily::perturbed_walks(f.x, f.y).map_err(invalid)?,
        "table" => {
            let path = f.table.as_ref().expect("validated");
            let file = std::fs::File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            RateFamily::table(f.n, TableRates::from_csv(f.n, file).map_err(invalid)?)
        }
        other => return Err(CliError::Validation(vec![format!("unknown family {other}")])),
    };
    Ok(Arc::new(fam))
}

pub fn resolve_point(cfg: &ExperimentConfig, fam: &Arc<RateFamily>) -> Result<DensityPoint, CliError> {
    if let Some(phi) = &cfg.density.phi {
        return point_at_fugacity(fam, phi, DEFAULT_REL_TOL).map_err(numerical);
    }
    let a = cfg.density.a.as_ref().expect("validated");
    if cfg.density.solve_frame {
        let sol = solve_frame(fam, a, 1e-10).map_err(numerical)?;
        return fugacity_of_density(fam, &sol.certificate.a0, 1e-13).map_err(numerical);
    }
    fugacity_of_density(fam, a, 1e-13).map_err(numerical)
}

/// Nonlinear scaling needs the frame condition at the reference density.
pub fn require_frame(cfg: &ExperimentConfig, point: &DensityPoint) -> Result<Option<FrameCertificate>, CliError> {
    if cfg.sim.gamma >= 1.0 {
        return Ok(None);
    }
    let cert = check_frame(point, FRAME_TOL);
    if !cert.holds {
        return Err(CliError::Validation(vec![format!(
            "frame condition fails at a0 = {:?}: off-diagonal residual {:.3e}, ratio residual {:.3e} (tol {:e})",
            cert.a0, cert.offdiag_residual, cert.ratio_residual, cert.tol
        )]));
    }
    Ok(Some(cert))
}

pub fn field_frame(cfg: &ExperimentConfig, point: &DensityPoint) -> FrameSpec {
    let traveling = match cfg.fields.frame.as_str() {
        "fixed" => false,
        "traveling" => true,
        _ => cfg.sim.gamma < 1.0,
    };
    let frame = if traveling { Frame::Traveling { lambda: check_frame(point, FRAME_TOL).lambda } } else { Frame::Fixed };
    let rule = if cfg.fields.rule == "floor" { ShiftRule::Floor } else { ShiftRule::Exact };
    FrameSpec { frame, rule, n: cfg.sim.n, c: cfg.sim.c, gamma: cfg.sim.gamma }
}

pub fn sim_params(cfg: &ExperimentConfig) -> SimParams {
    SimParams {
        n: cfg.sim.n,
        gamma: cfg.sim.gamma,
        c: cfg.sim.c,
        t_end: cfg.sim.t_end,
        seed: cfg.sim.seed,
        record_times: cfg.record_times(),
    }
}

pub fn observable(spec: &str, point: &DensityPoint) -> Result<LocalObservable, CliError> {
    let n = point.n_species();
    let bad = || CliError::Validation(vec![format!("observable {spec:?}: expected 0, k<i>^<p> or g<i>")]);
    let species = |s: &str| -> Result<usize, CliError> {
        let i: usize = s.parse().map_err(|_| bad())?;
        if i == 0 || i > n {
            return Err(bad());
        }
        Ok(i - 1)
    };
    if spec == "0" {
        return Ok(LocalObservable::zero());
    }
    if let Some(rest) = spec.strip_prefix('k') {
        let (i, p) = rest.split_once('^').unwrap_or((rest, "1"));
        return Ok(LocalObservable::power(species(i)?, p.parse().map_err(|_| bad())?));
    }
    if let Some(rest) = spec.strip_prefix('g') {
        return Ok(LocalObservable::rate(point, species(rest)?));
    }
    Err(bad())
}

fn order(s: &str) -> Order {
    if s == "first" {
        Order::First
    } else {
        Order::Second
    }
}

pub fn pool(cfg: &ExperimentConfig) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build().map_err(|e| CliError::Io(e.to_string()))
}

pub struct Context {
    pub family: Arc<RateFamily>,
    pub point: DensityPoint,
}

pub fn context(cfg: &ExperimentConfig) -> Result<Context, CliError> {
    let family = build_family(cfg)?;
    let point = resolve_point(cfg, &family)?;
    Ok(Context { family, point })
}

pub fn ensemble_dump(cfg: &ExperimentConfig, ctx: &Context, out: &mut RunDir) -> Result<(), CliError> {
    let table = ctx.point.table(DEFAULT_REL_TOL).map_err(numerical)?;
    let n = ctx.point.n_species();
    let mut header: Vec<String> = (1..=n).map(|i| format!("k{i}")).collect();
    header.push("p".into());
    let rows: Vec<Vec<Cell>> = table
        .iter()
        .map(|(k, p)| {
            let mut r: Vec<Cell> = k.iter().map(|v| Cell::from(*v)).collect();
            r.push(p.into());
            r
        })
        .collect();
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv("ensemble.csv", &h, &rows)?;
    out.json("density.json", &ctx.point)?;
    let _ = cfg;
    Ok(())
}

pub fn frame_solve(cfg: &ExperimentConfig, ctx: &Context, out: &mut RunDir) -> Result<(), CliError> {
    let a0 = cfg.density.a.clone().unwrap_or_else(|| ctx.point.a.clone());
    let sol = solve_frame(&ctx.family, &a0, 1e-10).map_err(numerical)?;
    out.json("frame.json", &sol)
}

fn tensor(cfg: &ExperimentConfig, ctx: &Context) -> Result<CouplingTensor, CliError> {
    build_tensor(&ctx.point, cfg.sim.c).map_err(|e| match e {
        zrp_core::coupling::CouplingError::FrameViolated { .. } => CliError::Validation(vec![e.to_string()]),
        other => numerical(other),
    })
}

#[derive(Serialize)]
struct TensorSummary<'a> {
    tensor: &'a CouplingTensor,
    trilinear_residual: f64,
}

pub fn coupling_build(cfg: &ExperimentConfig, ctx: &Context, out: &mut RunDir) -> Result<(), CliError> {
    let t = tensor(cfg, ctx)?;
    let n = t.n;
    let mut rows = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for l in 0..n {
                let raw = t.gamma_raw.as_ref().map_or(f64::NAN, |r| r.get(i, j, l));
                rows.push(vec![i.into(), j.into(), l.into(), raw.into(), t.gamma_norm.get(i, j, l).into()]);
            }
        }
    }
    out.csv("tensor.csv", &["i", "j", "l", "raw", "normalized"], &rows)?;
    out.json("tensor.json", &TensorSummary { tensor: &t, trilinear_residual: trilinear_residual(&t) })
}

pub fn decouple(cfg: &ExperimentConfig, ctx: &Context, out: &mut RunDir) -> Result<(), CliError> {
    let t = tensor(cfg, ctx)?;
    let scan = decouple_scan(&t, cfg.decouple_grid).map_err(|e| CliError::Validation(vec![e.to_string()]))?;
    let rows: Vec<Vec<Cell>> =
        (0..scan.psi.len()).map(|k| vec![scan.psi[k].into(), scan.f[k].into(), scan.g[k].into()]).collect();
    out.csv("decouple.csv", &["psi", "F", "G"], &rows)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        min_max_margin: f64,
        argmin_psi: f64,
        f_zeros: &'a [f64],
        classification: &'a zrp_core::coupling::Decoupleability,
    }
    out.json(
        "decouple.json",
        &Summary {
            min_max_margin: scan.min_max_margin,
            argmin_psi: scan.argmin_psi,
            f_zeros: &scan.f_zeros,
            classification: &scan.classification,
        },
    )
}

struct ReplicaOutput {
    series: FieldSeries,
    summary: RunSummary,
    quadratic: Option<(Vec<f64>, Vec<Vec<f64>>)>,
}

fn simulate_replica(
    cfg: &ExperimentConfig,
    ctx: &Context,
    params: &SimParams,
    frame: &FrameSpec,
    r: u64,
) -> Result<ReplicaOutput, CliError> {
    let mut rng = replica_rng(params.seed, r);
    let mut state = init_stationary(params, &ctx.point, &mut rng).map_err(kmc_error)?;
    let mut obs = FieldObserver::new(
        params.n,
        cfg.fields.modes.clone(),
        Linearization::from_point(&ctx.point),
        frame.clone(),
        params.p_right(),
        cfg.fields.decompose,
    );
    let mut quad = if cfg.fields.eps.is_empty() {
        None
    } else {
        let hess = (0..ctx.point.n_species())
            .map(|i| hess_tilde_g(&ctx.point, i))
            .collect::<Result<Vec<_>, _>>()
            .map_err(numerical)?;
        let h = TestFunction::cos(cfg.fields.modes[0], params.n);
        Some(
            QuadraticObserver::new(&cfg.fields.eps, h, hess, ctx.point.a.clone(), frame.clone())
                .map_err(|e| CliError::Validation(vec![e.to_string()]))?,
        )
    };
    let summary = match &mut quad {
        Some(q) => run(&mut state, params, &mut [&mut obs, q], &mut rng),
        None => run(&mut state, params, &mut [&mut obs], &mut rng),
    }
    .map_err(kmc_error)?;
    Ok(ReplicaOutput { series: obs.into_series(), summary, quadratic: quad.map(|q| (q.times.clone(), q.integrals())) })
}

fn estimator_rows(series: &[FieldSeries], max_lag: usize) -> Result<Vec<Vec<Cell>>, CliError> {
    let mut rows = Vec::new();
    for r in structure_factor(series, max_lag).map_err(numerical)? {
        rows.push(vec![
            "cov".into(),
            r.i.into(),
            r.j.into(),
            r.mode.into(),
            r.parts.0.name().into(),
            r.parts.1.name().into(),
            r.lag.into(),
            r.tau.into(),
            r.estimate.value.into(),
            r.estimate.se.into(),
            (r.estimate.replicas as u64).into(),
        ]);
    }
    let s0 = &series[0];
    for (rec, t) in s0.times().iter().enumerate() {
        for i in 0..s0.n_species {
            for (mi, k) in s0.modes.iter().enumerate() {
                for part in [Part::Cos, Part::Sin] {
                    let v: Vec<f64> = series.iter().map(|s| s.y(rec, i, mi, part).powi(2)).collect();
                    let e = jackknife(&v);
                    rows.push(vec![
                        "var".into(),
                        i.into(),
                        i.into(),
                        (*k).into(),
                        part.name().into(),
                        part.name().into(),
                        rec.into(),
                        (*t).into(),
                        e.value.into(),
                        e.se.into(),
                        (e.replicas as u64).into(),
                    ]);
                }
            }
        }
    }
    Ok(rows)
}

pub const ESTIMATOR_HEADER: [&str; 11] = ["kind", "i", "j", "mode", "pa", "pb", "lag", "tau", "value", "se", "replicas"];

pub fn simulate(cfg: &ExperimentConfig, ctx: &Context, out: &mut RunDir, estimators: bool) -> Result<(), CliError> {
    let params = sim_params(cfg);
    params.validate().map_err(kmc_error)?;
    let cert = require_frame(cfg, &ctx.point)?;
    if let Some(c) = &cert {
        out.json("frame_certificate.json", c)?;
    }
    let frame = field_frame(cfg, &ctx.point);
    let results: Vec<Result<ReplicaOutput, CliError>> = pool(cfg)?
        .install(|| (0..cfg.sim.replicas).into_par_iter().map(|r| simulate_replica(cfg, ctx, &params, &frame, r)).collect());
    let results: Vec<ReplicaOutput> = results.into_iter().collect::<Result<_, _>>()?;

    let mut runs = Vec::new();
    let mut fields = Vec::new();
    for (r, res) in results.iter().enumerate() {
        let s = &res.summary;
        runs.push(vec![
            r.into(),
            s.events.into(),
            format!("{:?}", s.stop).into(),
            s.end_time.into(),
            s.records_fired.into(),
            s.max_rebuild_discrepancy.into(),
        ]);
        for (t, field, species, mode, v) in res.series.rows() {
            fields.push(vec![r.into(), t.into(), field.into(), species.into(), mode.into(), v.into()]);
        }
    }
    out.csv("runs.csv", &["replica", "events", "stop", "end_time", "records_fired", "max_rebuild_discrepancy"], &runs)?;
    out.csv("fields.csv", &["replica", "t", "field", "species", "mode", "value"], &fields)?;
    if !estimators {
        return Ok(());
    }
    let series: Vec<FieldSeries> = results.iter().map(|r| r.series.clone()).collect();
    let mut rows = estimator_rows(&series, cfg.fields.max_lag)?;
    if cfg.fields.decompose && cfg.sim.t_end > 0.0 {
        let s0 = &series[0];
        let last = s0.records.len() - 1;
        for i in 0..s0.n_species {
            for (mi, k) in s0.modes.iter().enumerate() {
                for (pi, part) in [Part::Cos, Part::Sin].iter().enumerate() {
                    for (kind, pick) in [("qv_slope", 0usize), ("rqv_slope", 1)] {
                        let v: Vec<f64> = series
                            .iter()
                            .map(|s| {
                                let rec = &s.records[last];
                                let j = s.idx(i, mi);
                                (if pick == 0 { rec.qv[j][pi] } else { rec.rqv[j][pi] }) / cfg.sim.t_end
                            })
                            .collect();
                        let e = jackknife(&v);
                        rows.push(vec![
                            kind.into(),
                            i.into(),
                            i.into(),
                            (*k).into(),
                            part.name().into(),
                            part.name().into(),
                            last.into(),
                            cfg.sim.t_end.into(),
                            e.value.into(),
                            e.se.into(),
                            (e.replicas as u64).into(),
                        ]);
                    }
                }
                let grad = TestFunction::cos(*k, cfg.sim.n).grad_l2_sq();
                out.note(format!("species {i} mode {k}: bracket slope constant g~ |grad H|^2 = {:.6e}", ctx.point.tilde_g[i] * grad));
            }
        }
    }
    out.csv("estimators.csv", &ESTIMATOR_HEADER, &rows)?;
    if !cfg.fields.eps.is_empty() {
        let mut arows = Vec::new();
        let n = ctx.point.n_species();
        for (r, res) in results.iter().enumerate() {
            let (times, ints) = res.quadratic.as_ref().expect("observer attached");
            for (rec, t) in times.iter().enumerate() {
                for (e, eps) in cfg.fields.eps.iter().enumerate() {
                    for i in 0..n {
                        arows.push(vec![r.into(), (*t).into(), (*eps).into(), i.into(), ints[rec][e * n + i].into()]);
                    }
                }
            }
        }
        out.csv("quadratic.csv", &["replica", "t", "eps", "species", "A"], &arows)?;
    }
    Ok(())
}

pub fn spde_run(cfg: &ExperimentConfig, ctx: &Context, out: &mut RunDir) -> Result<(), CliError> {
    let burgers = cfg.spde.kind == "burgers";
    let transport = match cfg.spde.transport.as_str() {
        "on" => true,
        "off" => false,
        _ => !burgers,
    };
    let setup = Arc::new(SpectralSetup::new(&ctx.point, cfg.sim.c, cfg.spde.grid, transport).map_err(numerical)?);
    let integ = if burgers {
        let t = tensor(cfg, ctx)?;
        Some(BurgersIntegrator::from_tensor(&setup, &t, cfg.spde.eps).map_err(|e| CliError::Validation(vec![e.to_string()]))?)
    } else {
        None
    };
    let times = linspace(cfg.spde.t_end, cfg.spde.records);
    let n = ctx.point.n_species();
    let frame = FrameSpec::fixed(cfg.spde.grid, cfg.sim.c, cfg.sim.gamma);
    let one = |p: u64| -> Result<FieldSeries, CliError> {
        let mut rng = replica_rng(cfg.sim.seed, p);
        let mut state = SpectralState::white_noise(setup.clone(), &mut rng);
        let mut rec = SpectralRecorder::new(n, cfg.fields.modes.clone(), frame.clone());
        let mut steps_done = 0u64;
        for &t in &times {
            let target = (t / cfg.spde.dt).round() as u64;
            while steps_done < target {
                match &integ {
                    Some(b) => b.step(&mut state, cfg.spde.dt, &mut rng).map_err(numerical)?,
                    None => zrp_core::spde::ou_exact_step(&mut state, cfg.spde.dt, &mut rng),
                }
                steps_done += 1;
            }
            rec.record(&state);
        }
        Ok(rec.into_series())
    };
    let series: Vec<Result<FieldSeries, CliError>> =
        pool(cfg)?.install(|| (0..cfg.spde.paths).into_par_iter().map(one).collect());
    let series: Vec<FieldSeries> = series.into_iter().collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    for (p, s) in series.iter().enumerate() {
        for (ri, r) in s.records.iter().enumerate() {
            for i in 0..n {
                for (mi, k) in s.modes.iter().enumerate() {
                    rows.push(vec![
                        p.into(),
                        r.t.into(),
                        i.into(),
                        (*k).into(),
                        s.y(ri, i, mi, Part::Cos).into(),
                        s.y(ri, i, mi, Part::Sin).into(),
                    ]);
                }
            }
        }
    }
    out.csv("spde_fields.csv", &["path", "t", "species", "mode", "cos", "sin"], &rows)?;
    out.csv("estimators.csv", &ESTIMATOR_HEADER, &estimator_rows(&series, cfg.fields.max_lag)?)?;
    if !burgers {
        let dt = if times.len() > 1 { times[1] - times[0] } else { 0.0 };
        let mut exact = Vec::new();
        for &k in &cfg.fields.modes {
            for i in 0..n {
                for j in 0..n {
                    for (pa, pb) in [(Part::Cos, Part::Cos), (Part::Sin, Part::Sin), (Part::Cos, Part::Sin)] {
                        for lag in 0..=cfg.fields.max_lag.min(times.len().saturating_sub(1)) {
                            let tau = lag as f64 * dt;
                            exact.push(vec![
                                i.into(),
                                j.into(),
                                k.into(),
                                pa.name().into(),
                                pb.name().into(),
                                lag.into(),
                                tau.into(),
                                ou_correlation(&setup, k, i, j, tau, pa, pb).into(),
                            ]);
                        }
                    }
                }
            }
        }
        out.csv("ou_exact.csv", &["i", "j", "mode", "pa", "pb", "lag", "tau", "value"], &exact)?;
    }
    Ok(())
}

pub fn diagnose_eoe(cfg: &ExperimentConfig, ctx: &Context, out: &mut RunDir) -> Result<(), CliError> {
    let f = observable(&cfg.eoe.f, &ctx.point)?;
    let mut rng = replica_rng(cfg.sim.seed, 0);
    let rows =
        eoe_check(&ctx.point, &f, &cfg.eoe.ells, order(&cfg.eoe.order), cfg.eoe.samples, &mut rng).map_err(numerical)?;
    let n = ctx.point.n_species();
    let mut detail = Vec::new();
    let mut summary = Vec::new();
    for c in &rows {
        for b in &c.errors_by_y {
            let mut r: Vec<Cell> = vec![c.ell.into()];
            r.extend(b.y.iter().map(|v| Cell::from(*v)));
            r.extend([b.weight.into(), b.error.into(), b.samples.map_or(Cell::S(String::new()), |s| s.into())]);
            detail.push(r);
        }
        summary.push(vec![
            c.ell.into(),
            c.l4_error.into(),
            c.exact.to_string().into(),
            c.warning.clone().unwrap_or_default().into(),
        ]);
    }
    let mut header = vec!["ell".to_string()];
    header.extend((1..=n).map(|i| format!("y{i}")));
    header.extend(["weight".into(), "error".into(), "samples".into()]);
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv("eoe.csv", &h, &detail)?;
    out.csv("eoe_summary.csv", &["ell", "l4_error", "exact", "warning"], &summary)?;
    let x: Vec<f64> = rows.iter().map(|c| c.ell as f64).collect();
    let y: Vec<f64> = rows.iter().map(|c| c.l4_error).collect();
    let slope = if rows.len() >= 2 { log_slope(&x, &y) } else { f64::NAN };
    out.json("eoe.json", &BTreeMap::from([("slope", slope)]))
}

pub fn diagnose_bg(cfg: &ExperimentConfig, ctx: &Context, out: &mut RunDir) -> Result<(), CliError> {
    let params = sim_params(cfg);
    params.validate().map_err(kmc_error)?;
    require_frame(cfg, &ctx.point)?;
    let f = observable(&cfg.bg.f, &ctx.point)?;
    let mut frame = field_frame(cfg, &ctx.point);
    frame.rule = ShiftRule::Floor;
    let h = TestFunction::cos(cfg.fields.modes[0], params.n).discrete_grad(0.0);
    let one = |r: u64| -> Result<Vec<f64>, CliError> {
        let mut rng = replica_rng(params.seed, r);
        let mut state = init_stationary(&params, &ctx.point, &mut rng).map_err(kmc_error)?;
        let mut obs = BgObserver::new(&ctx.point, &f, order(&cfg.bg.order), cfg.bg.ells.clone(), h.clone(), frame.clone())
            .map_err(|e| CliError::Validation(vec![e.to_string()]))?;
        run(&mut state, &params, &mut [&mut obs], &mut rng).map_err(kmc_error)?;
        Ok(obs.sup_squares().to_vec())
    };
    let per: Vec<Result<Vec<f64>, CliError>> =
        pool(cfg)?.install(|| (0..cfg.bg.replicas).into_par_iter().map(one).collect());
    let per: Vec<Vec<f64>> = per.into_iter().collect::<Result<_, _>>()?;
    let by_ell: Vec<Vec<f64>> = (0..cfg.bg.ells.len()).map(|e| per.iter().map(|r| r[e]).collect()).collect();
    let rows: Vec<Vec<Cell>> = bg_rows(&params, &cfg.bg.ells, &h, &by_ell)
        .into_iter()
        .map(|r| vec![r.n.into(), r.ell.into(), r.estimate.value.into(), r.estimate.se.into(), r.bound_shape.into()])
        .collect();
    out.csv("bg.csv", &["N", "ell", "estimate", "se", "bound_shape"], &rows)
}

/// Full pipeline driven by the analysis toggles.
pub fn run_experiment(cfg: &ExperimentConfig, out: &mut RunDir) -> Result<(), CliError> {
    let ctx = context(cfg)?;
    ensemble_dump(cfg, &ctx, out)?;
    if cfg.sim.gamma < 1.0 {
        require_frame(cfg, &ctx.point)?;
    }
    if cfg.analysis.frame {
        frame_solve(cfg, &ctx, out)?;
    }
    if cfg.analysis.tensor {
        coupling_build(cfg, &ctx, out)?;
    }
    if cfg.analysis.decouple {
        decouple(cfg, &ctx, out)?;
    }
    if cfg.analysis.fields {
        simulate(cfg, &ctx, out, true)?;
    }
    if cfg.analysis.spde {
        let mut sub = RunDir::create(&with_dir(cfg, &out.dir.join("spde")), "spde run")?;
        spde_run(cfg, &ctx, &mut sub)?;
        sub.finish()?;
        out.note("spde artifacts in spde/");
    }
    if cfg.analysis.eoe {
        diagnose_eoe(cfg, &ctx, out)?;
    }
    if cfg.analysis.bg {
        diagnose_bg(cfg, &ctx, out)?;
    }
    Ok(())
}

fn with_dir(cfg: &ExperimentConfig, dir: &Path) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.output_dir = dir.to_path_buf();
    c
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub key: String,
    pub a: f64,
    pub se_a: f64,
    pub b: f64,
    pub se_b: f64,
    pub z: f64,
    pub pass: bool,
}

fn load_estimators(dir: &Path) -> Result<BTreeMap<String, (f64, f64, f64)>, CliError> {
    let (header, rows) = read_csv(&dir.join("estimators.csv"))?;
    if header != ESTIMATOR_HEADER {
        return Err(CliError::Validation(vec![format!("{}: unexpected estimator schema {header:?}", dir.display())]));
    }
    let mut out = BTreeMap::new();
    for r in rows {
        let num = |s: &str| s.parse::<f64>().map_err(|_| CliError::Validation(vec![format!("bad number {s:?}")]));
        let key = format!("{}|{}|{}|{}|{}|{}|{}", r[0], r[1], r[2], r[3], r[4], r[5], r[6]);
        out.insert(key, (num(&r[7])?, num(&r[8])?, num(&r[9])?));
    }
    Ok(out)
}

/// Aligns estimators of two runs; a row passes when the difference is within
/// `tol_se` combined standard errors or `rel_tol` relative deviation.
pub fn compare(a: &Path, b: &Path, cfg: &ExperimentConfig) -> Result<Vec<CompareRow>, CliError> {
    let ea = load_estimators(a)?;
    let eb = load_estimators(b)?;
    let mut rows = Vec::new();
    let mut mismatch = Vec::new();
    for (key, (tau_a, va, sa)) in &ea {
        let kind = key.split('|').next().unwrap_or("");
        if !cfg.compare.kinds.iter().any(|k| k == kind) {
            continue;
        }
        let Some((tau_b, vb, sb)) = eb.get(key) else { continue };
        if (tau_a - tau_b).abs() > 1e-9 * tau_a.abs().max(1.0) {
            mismatch.push(format!("{key}: lag times {tau_a} and {tau_b} differ"));
            continue;
        }
        let d = (va - vb).abs();
        let se = (sa * sa + sb * sb).sqrt();
        let z = if d == 0.0 { 0.0 } else { d / se };
        let rel = if d == 0.0 { 0.0 } else { d / va.abs().max(vb.abs()) };
        let pass = z <= cfg.compare.tol_se || rel <= cfg.compare.rel_tol;
        rows.push(CompareRow { key: key.clone(), a: *va, se_a: *sa, b: *vb, se_b: *sb, z, pass });
    }
    if !mismatch.is_empty() {
        return Err(CliError::Validation(mismatch));
    }
    if rows.is_empty() {
        return Err(CliError::Validation(vec!["no common estimators between the two runs".into()]));
    }
    Ok(rows)
}
