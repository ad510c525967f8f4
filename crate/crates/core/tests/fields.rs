use std::sync::Arc;

use zrp_core::ensemble::{hess_tilde_g, point_at_fugacity, DensityPoint};
use zrp_core::fields::{
    eval_field, jackknife, ks_critical_1pct, ks_normal, FieldObserver, FieldSeries, FrameSpec, Linearization, Part,
    QuadraticObserver, TestFunction,
};
use zrp_core::kmc::{init_stationary, replica_rng, run, SimParams};
use zrp_core::rates::RateFamily;

fn simulate(point: &DensityPoint, params: &SimParams, modes: Vec<u32>, replica: u64) -> FieldSeries {
    let mut rng = replica_rng(params.seed, replica);
    let mut s = init_stationary(params, point, &mut rng).unwrap();
    let fs = FrameSpec::fixed(params.n, params.c, params.gamma);
    let mut obs = FieldObserver::new(params.n, modes, Linearization::from_point(point), fs, params.p_right(), true);
    run(&mut s, params, &mut [&mut obs], &mut rng).unwrap();
    obs.into_series()
}

#[test]
fn bracket_slope_has_no_half() {
    let fam = Arc::new(RateFamily::independent(2));
    let p = point_at_fugacity(&fam, &[1.0, 1.0], 1e-14).unwrap();
    let params = SimParams { n: 256, gamma: 1.0, c: 1.0, t_end: 0.004, seed: 11, record_times: vec![0.004] };
    let want = p.tilde_g[0] * TestFunction::cos(1, 256).grad_l2_sq();
    let (mut pred, mut real) = (vec![Vec::new(); 4], vec![Vec::new(); 4]);
    for r in 0..24 {
        let series = simulate(&p, &params, vec![1], r);
        let last = series.records.last().unwrap();
        for i in 0..2 {
            for part in 0..2 {
                pred[2 * i + part].push(last.qv[i][part] / params.t_end);
                real[2 * i + part].push(last.rqv[i][part] / params.t_end);
            }
        }
        assert!(last.cross.iter().all(|c| c == &[0.0, 0.0]));
    }
    for c in 0..4 {
        let (e, f) = (jackknife(&pred[c]), jackknife(&real[c]));
        assert!((e.value / want - 1.0).abs() < 0.05, "{e:?} vs {want}");
        assert!((f.value / want - 1.0).abs() < 0.05, "{f:?} vs {want}");
        // half the constant is far outside
        assert!((e.value / (0.5 * want) - 1.0).abs() > 0.5);
    }
}

#[test]
fn symmetric_nonlinear_term_has_mean_zero() {
    let fam = Arc::new(RateFamily::perturbed_walks(3.0, -0.96).unwrap());
    let p = point_at_fugacity(&fam, &[0.49, 0.6], 1e-14).unwrap();
    let params = SimParams { n: 64, gamma: 1.0, c: 0.0, t_end: 0.2, seed: 4, record_times: vec![0.2] };
    let mut stats = vec![Vec::new(); 2];
    for r in 0..60 {
        let s = simulate(&p, &params, vec![1], r);
        let last = s.records.last().unwrap();
        for i in 0..2 {
            stats[i].push(last.b[i].re);
        }
    }
    for st in &stats {
        let e = jackknife(st);
        assert!(e.z(0.0).abs() < 4.0, "{e:?}");
    }
}

#[test]
fn single_time_law_is_gaussian() {
    let fam = Arc::new(RateFamily::perturbed_walks(3.0, -0.96).unwrap());
    let p = point_at_fugacity(&fam, &[0.49, 0.6], 1e-14).unwrap();
    let params = SimParams { n: 32, gamma: 1.0, c: 1.0, t_end: 0.02, seed: 8, record_times: vec![0.0, 0.02] };
    let h = TestFunction::cos(1, 32);
    let mut ys = vec![Vec::new(); 2];
    for r in 0..400 {
        let mut rng = replica_rng(params.seed, r);
        let mut s = init_stationary(&params, &p, &mut rng).unwrap();
        run(&mut s, &params, &mut [], &mut rng).unwrap();
        let y = eval_field(&s, &h, &p.a, 0.0);
        ys[0].push(y[0]);
        ys[1].push(y[1]);
    }
    for i in 0..2 {
        // lattice norm of cos at N = 32 is exactly 1/2
        let var = p.gamma[(i, i)] * 0.5;
        let d = ks_normal(&ys[i], var);
        assert!(d < ks_critical_1pct(400), "species {i}: D = {d}");
    }
}

#[test]
fn quadratic_functional_vanishes_for_walkers() {
    let fam = Arc::new(RateFamily::independent(2));
    let p = point_at_fugacity(&fam, &[1.0, 2.0], 1e-14).unwrap();
    let hess: Vec<_> = (0..2).map(|i| hess_tilde_g(&p, i).unwrap()).collect();
    let params = SimParams { n: 64, gamma: 1.0, c: 0.0, t_end: 0.01, seed: 2, record_times: vec![0.0, 0.005, 0.01] };
    let fs = FrameSpec::fixed(64, 0.0, 1.0);
    let mut q = QuadraticObserver::new(&[0.25, 0.125], TestFunction::cos(1, 64), hess.clone(), p.a.clone(), fs).unwrap();
    let mut rng = replica_rng(2, 0);
    let mut s = init_stationary(&params, &p, &mut rng).unwrap();
    run(&mut s, &params, &mut [&mut q], &mut rng).unwrap();
    assert!(q.integrals().iter().flatten().all(|v| v.abs() < 1e-10));

    let c = TestFunction::new(zrp_core::fields::TestKind::Constant, 64).unwrap();
    let fam = Arc::new(RateFamily::perturbed_walks(3.0, -0.96).unwrap());
    let p = point_at_fugacity(&fam, &[0.49, 0.6], 1e-14).unwrap();
    let hess: Vec<_> = (0..2).map(|i| hess_tilde_g(&p, i).unwrap()).collect();
    let s = init_stationary(&params, &p, &mut replica_rng(3, 0)).unwrap();
    let v = zrp_core::fields::mollified_quadratic(&s, 0.1, &p.a, 0.0, &c, &hess).unwrap();
    assert!(v.iter().all(|x| x.abs() < 1e-12));
}

#[test]
fn cross_covariance_matches_covariance() {
    let fam = Arc::new(RateFamily::perturbed_walks(3.0, -0.96).unwrap());
    let p = point_at_fugacity(&fam, &[0.3, 1.5], 1e-14).unwrap();
    let params = SimParams { n: 32, gamma: 1.0, c: 1.0, t_end: 0.0, seed: 21, record_times: vec![0.0] };
    let series: Vec<_> = (0..300).map(|r| simulate(&p, &params, vec![1, 2], r)).collect();
    let e = zrp_core::fields::lagged_covariance(&series, 0, 1, 0, Part::Cos, Part::Cos, 0, 0).unwrap();
    assert!(e.z(0.5 * p.gamma[(0, 1)]).abs() < 4.0, "{e:?} vs {}", 0.5 * p.gamma[(0, 1)]);
    assert!(p.gamma[(0, 1)].abs() > 0.05);
}
