use std::sync::Arc;

use zrp_core::ensemble::point_at_fugacity;
use zrp_core::fields::{FrameSpec, TestFunction};
use zrp_core::kmc::{replica_rng, SimParams};
use zrp_core::rates::RateFamily;
use zrp_core::stats::{bg_diagnostic, eoe_check, log_slope, LocalObservable, Order};

#[test]
fn eoe_slopes_for_poisson_square() {
    let fam = Arc::new(RateFamily::independent(2));
    let p = point_at_fugacity(&fam, &[1.0, 0.5], 1e-15).unwrap();
    let f = LocalObservable::power(0, 2);
    let ells = [2usize, 4, 8, 16];
    let mut rng = replica_rng(0, 0);
    for (order, lo, hi) in [(Order::Second, -2.0, -1.0), (Order::First, -1.5, -0.5)] {
        let rows = eoe_check(&p, &f, &ells, order, 0, &mut rng).unwrap();
        assert!(rows.iter().all(|r| r.exact));
        let x: Vec<f64> = ells.iter().map(|l| *l as f64).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.l4_error).collect();
        let s = log_slope(&x, &y);
        println!("{order:?}: {y:?} slope {s}");
        assert!(s > lo && s < hi, "{order:?} slope {s}");
    }
}

#[test]
fn eoe_on_interacting_family() {
    let fam = Arc::new(RateFamily::perturbed_walks(3.0, -0.96).unwrap());
    let p = point_at_fugacity(&fam, &[0.49, 0.6], 1e-14).unwrap();
    let f = LocalObservable::rate(&p, 0);
    let mut rng = replica_rng(0, 0);
    let rows = eoe_check(&p, &f, &[2, 4, 8], Order::Second, 0, &mut rng).unwrap();
    for w in rows.windows(2) {
        assert!(w[1].l4_error < w[0].l4_error, "{} then {}", w[0].l4_error, w[1].l4_error);
    }
}

#[test]
fn bg_replacement_of_linear_observable_is_zero() {
    let fam = Arc::new(RateFamily::independent(1));
    let p = point_at_fugacity(&fam, &[1.0], 1e-15).unwrap();
    let params = SimParams { n: 32, gamma: 1.0, c: 0.0, t_end: 0.01, seed: 3, record_times: vec![] };
    let h = TestFunction::cos(1, 32).discrete_grad(0.0);
    let rows = bg_diagnostic(
        &p,
        &LocalObservable::power(0, 1),
        Order::Second,
        &params,
        &[0, 2],
        &h,
        FrameSpec::fixed(32, 0.0, 1.0),
        5,
    )
    .unwrap();
    for r in rows {
        assert!(r.estimate.value < 1e-20, "{r:?}");
    }
}

#[test]
fn bg_has_interior_minimum() {
    let fam = Arc::new(RateFamily::independent(1));
    let p = point_at_fugacity(&fam, &[1.0], 1e-15).unwrap();
    let n = 128;
    let params = SimParams { n, gamma: 1.0, c: 0.0, t_end: 0.02, seed: 9, record_times: vec![] };
    let h = TestFunction::cos(1, n).discrete_grad(0.0);
    let ells = [0usize, 1, 2, 4, 8, 16, 32];
    let rows = bg_diagnostic(
        &p,
        &LocalObservable::power(0, 2),
        Order::Second,
        &params,
        &ells,
        &h,
        FrameSpec::fixed(n, 0.0, 1.0),
        20,
    )
    .unwrap();
    for r in &rows {
        println!("ell {} est {:.4e} se {:.2e} bound {:.3e}", r.ell, r.estimate.value, r.estimate.se, r.bound_shape);
    }
    let best = rows.iter().enumerate().min_by(|a, b| a.1.estimate.value.total_cmp(&b.1.estimate.value)).unwrap().0;
    assert!(best > 0 && best < rows.len() - 1, "minimum at ell {}", rows[best].ell);
}
