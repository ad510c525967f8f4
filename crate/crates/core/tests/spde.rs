use std::sync::Arc;

use zrp_core::coupling::build_tensor;
use zrp_core::ensemble::{fugacity_of_density, point_at_fugacity};
use zrp_core::fields::{jackknife, Part};
use zrp_core::frame::perturbed_rw_frame;
use zrp_core::kmc::replica_rng;
use zrp_core::rates::{RateFamily, ScalarRate};
use zrp_core::spde::{
    decouple_transform_c, ou_correlation, ou_exact_step, BurgersIntegrator, SpdeError, SpectralSetup, SpectralState,
};

#[test]
fn lagged_correlation_matches_closed_form() {
    let fam = Arc::new(RateFamily::perturbed_walks(3.0, -0.96).unwrap());
    let p = point_at_fugacity(&fam, &[0.3, 1.5], 1e-14).unwrap();
    let setup = Arc::new(SpectralSetup::new(&p, 2.0, 16, true).unwrap());
    let tau = 0.02;
    let pairs = [(0, 1, Part::Cos, Part::Sin), (1, 0, Part::Cos, Part::Cos), (0, 0, Part::Sin, Part::Cos)];
    let mut samples = vec![Vec::new(); pairs.len()];
    for r in 0..3000 {
        let mut rng = replica_rng(31, r);
        let mut s = SpectralState::white_noise(setup.clone(), &mut rng);
        let before: Vec<_> = (0..2).map(|i| s.coeff(i, 1)).collect();
        ou_exact_step(&mut s, tau, &mut rng);
        for (q, (i, j, pa, pb)) in pairs.iter().enumerate() {
            let x = if *pa == Part::Cos { before[*i].re } else { before[*i].im };
            let y = if *pb == Part::Cos { s.coeff(*j, 1).re } else { s.coeff(*j, 1).im };
            samples[q].push(x * y);
        }
    }
    for (q, (i, j, pa, pb)) in pairs.iter().enumerate() {
        let want = ou_correlation(&setup, 1, *i, *j, tau, *pa, *pb);
        let e = jackknife(&samples[q]);
        assert!(e.z(want).abs() < 4.0, "pair {q}: {e:?} vs {want}");
    }
    // transport makes the cos/sin cross term visible
    assert!(ou_correlation(&setup, 1, 0, 0, tau, Part::Cos, Part::Sin).abs() > 0.01);
}

#[test]
fn multicolor_differences_follow_the_linear_equation() {
    let c = ScalarRate::h_example_c();
    let g = ScalarRate::h_example(0.5, 0.25, c);
    let single = Arc::new(RateFamily::multi_color(1, g.clone()).unwrap());
    let rho0 = point_at_fugacity(&single, &[1.0], 1e-15).unwrap().a[0];
    let fam = Arc::new(RateFamily::multi_color(2, g).unwrap());
    let p = fugacity_of_density(&fam, &[0.6 * rho0, 0.4 * rho0], 1e-14).unwrap();
    let tensor = build_tensor(&p, 1.0).unwrap();
    let setup = Arc::new(SpectralSetup::new(&p, 1.0, 64, false).unwrap());
    let integ = BurgersIntegrator::from_tensor(&setup, &tensor, 0.2).unwrap();
    let start = SpectralState::white_noise(setup.clone(), &mut replica_rng(3, 0));
    let (mut lin, mut non) = (start.clone(), start);
    let (mut ra, mut rb) = (replica_rng(3, 1), replica_rng(3, 1));
    for _ in 0..200 {
        ou_exact_step(&mut lin, 1e-4, &mut ra);
        integ.step(&mut non, 1e-4, &mut rb).unwrap();
    }
    let mut sum_moved = 0.0;
    for k in 1..setup.modes() {
        let (sl, dl) = decouple_transform_c(&[lin.coeff(0, k), lin.coeff(1, k)], &p.a);
        let (sn, dn) = decouple_transform_c(&[non.coeff(0, k), non.coeff(1, k)], &p.a);
        assert!((dl[0].1 - dn[0].1).norm() < 1e-9, "mode {k}");
        sum_moved += (sl - sn).norm();
    }
    assert!(sum_moved > 1e-3);
}

#[test]
fn burgers_keeps_white_noise_variance_on_short_runs() {
    let fr = perturbed_rw_frame(0.4, 1.0).unwrap();
    let fam = Arc::new(RateFamily::perturbed_walks(fr.x, fr.y).unwrap());
    let p = point_at_fugacity(&fam, &fr.phi, 1e-14).unwrap();
    let tensor = build_tensor(&p, 1.0).unwrap();
    assert!(!tensor.gamma_raw.as_ref().unwrap().is_zero());
    let setup = Arc::new(SpectralSetup::new(&p, 1.0, 64, false).unwrap());
    let integ = BurgersIntegrator::from_tensor(&setup, &tensor, 0.2).unwrap();
    let mut ratios = Vec::new();
    for r in 0..40 {
        let mut rng = replica_rng(8, r);
        let mut s = SpectralState::white_noise(setup.clone(), &mut rng);
        for _ in 0..500 {
            integ.step(&mut s, 1e-4, &mut rng).unwrap();
        }
        let mut acc = 0.0;
        let mut cnt = 0.0;
        for i in 0..2 {
            for k in 1..setup.modes() {
                acc += s.coeff(i, k).norm_sqr() / setup.gamma[(i, i)];
                cnt += 1.0;
            }
        }
        ratios.push(acc / cnt);
    }
    let e = jackknife(&ratios);
    assert!(e.z(1.0).abs() < 4.0 && (e.value - 1.0).abs() < 0.05, "{e:?}");
}

#[test]
fn blowup_is_reported() {
    let fr = perturbed_rw_frame(0.4, 1.0).unwrap();
    let fam = Arc::new(RateFamily::perturbed_walks(fr.x, fr.y).unwrap());
    let p = point_at_fugacity(&fam, &fr.phi, 1e-14).unwrap();
    let tensor = build_tensor(&p, 1.0).unwrap();
    let setup = Arc::new(SpectralSetup::new(&p, 1.0, 32, false).unwrap());
    let integ = BurgersIntegrator::from_tensor(&setup, &tensor, 0.25).unwrap();
    let mut rng = replica_rng(1, 0);
    let mut s = SpectralState::white_noise(setup, &mut rng);
    s.coeffs[3] *= 5e6;
    assert!(matches!(integ.step(&mut s, 1e-4, &mut rng), Err(SpdeError::Blowup { .. })));
}
