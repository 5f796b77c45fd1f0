//! End-to-end pipeline regression on the three benchmark systems: chain
//! discretization → spectrum → SSM → reduced model → limit-cycle roots,
//! checked against independently established reference values, plus a full
//! loop from the reduced-model prediction back to a method-of-steps
//! simulation of the original delay equation.

use delay_ssm::chain::build_chain;
use delay_ssm::delay_model::{
    make_coupled_oscillators, make_duffing, make_hutchinson, HutchinsonConfig, InitialHistory,
};
use delay_ssm::rom_analysis::{limit_cycle_predict, limit_cycle_roots, RootClassification};
use delay_ssm::simulate::{classify_steady_state, integrate_dde, DdeOptions, SteadyState};
use delay_ssm::spectral::{compute_spectrum, select_master};
use delay_ssm::ssm::compute_ssm;
use delay_ssm::Complex64;
use ndarray::Array1;

#[test]
fn duffing_post_hopf_pipeline_matches_reference() {
    // ẍ + 0.2·ẋ(t−1.1) + 2x − 4x³ = 0, just past the Hopf point.
    let sys = make_duffing(0.2, 2.0, -4.0, 1.1, 0.0, 0.0).unwrap();
    let cs = build_chain(&sys, 100).unwrap();
    let spectrum = compute_spectrum(&cs, Some(12)).unwrap();
    let master = select_master(&cs, &spectrum).unwrap();

    // Leading eigenvalue of the delay equation.
    let expected = Complex64::new(0.0102, 1.5160);
    assert!(
        (master.lambda - expected).norm() < 2e-3,
        "master eigenvalue {} vs reference {expected}",
        master.lambda
    );

    let exp = compute_ssm(&cs, &master, 9).unwrap();
    let rom = exp.rom(&cs);
    let report = limit_cycle_roots(&rom);
    let converged: Vec<_> = report
        .roots
        .iter()
        .filter(|r| r.classification == RootClassification::Converged)
        .collect();
    assert_eq!(converged.len(), 1, "expected a single converged root: {report:?}");
    let root = converged[0];
    assert!(root.stable, "the wrapped limit cycle is attracting");
    assert!(
        (root.rho - 4.54457).abs() / 4.54457 < 5e-3,
        "limit-cycle amplitude {} vs reference 4.54457",
        root.rho
    );
    assert!(
        (root.omega - 1.4280).abs() / 1.4280 < 1e-2,
        "limit-cycle frequency {} vs reference 1.4280",
        root.omega
    );
}

#[test]
fn duffing_prediction_matches_delay_simulation() {
    // Close the loop: lift the predicted limit cycle to physical coordinates,
    // hand it to the method-of-steps integrator as an initial history, and
    // check that the delay equation settles on an orbit with the predicted
    // amplitude and period.
    let sys = make_duffing(0.2, 2.0, -4.0, 1.1, 0.0, 0.0).unwrap();
    let cs = build_chain(&sys, 100).unwrap();
    let spectrum = compute_spectrum(&cs, Some(12)).unwrap();
    let master = select_master(&cs, &spectrum).unwrap();
    let exp = compute_ssm(&cs, &master, 9).unwrap();
    let rom = exp.rom(&cs);
    let report = limit_cycle_roots(&rom);
    let root = report
        .roots
        .iter()
        .find(|r| r.classification == RootClassification::Converged)
        .expect("converged root");

    let pred = limit_cycle_predict(&exp, &rom, root.rho, 512);
    let predicted_amplitude = pred.amplitude[0];
    let predicted_period = pred.period;

    // History = the predicted orbit itself, wrapped periodically.
    let (tp, xp, period) = (pred.t.clone(), pred.x.clone(), pred.period);
    let n_phys = xp[0].len();
    let hist = InitialHistory::from_fn(move |s| {
        let tt = s.rem_euclid(period);
        let dt = period / tp.len() as f64;
        let k = ((tt / dt).floor() as usize).min(tp.len() - 1);
        let k1 = (k + 1) % tp.len();
        let w = (tt - tp[k]) / dt;
        Array1::from_iter((0..n_phys).map(|i| (1.0 - w) * xp[k][i] + w * xp[k1][i]))
    });

    let traj = integrate_dde(&sys, &hist, 300.0, &DdeOptions::default()).unwrap();
    match classify_steady_state(&traj, 0).state {
        SteadyState::Periodic { amplitude, period } => {
            assert!(
                (amplitude - predicted_amplitude).abs() / predicted_amplitude < 2e-2,
                "simulated amplitude {amplitude} vs predicted {predicted_amplitude}"
            );
            assert!(
                (period - predicted_period).abs() / predicted_period < 1e-2,
                "simulated period {period} vs predicted {predicted_period}"
            );
        }
        other => panic!("expected a periodic steady state, got {other:?}"),
    }
}

#[test]
fn coupled_oscillators_post_hopf_pipeline_matches_reference() {
    // Two delay-coupled oscillators just past the Hopf point β₁* = −0.146.
    let sys =
        make_coupled_oscillators(0.015, 0.035, 0.3, -0.145, -0.1, 0.5, 0.0, 0.0).unwrap();
    let cs = build_chain(&sys, 20).unwrap();
    let spectrum = compute_spectrum(&cs, Some(12)).unwrap();
    let master = select_master(&cs, &spectrum).unwrap();

    let expected = Complex64::new(0.0010, 1.0590);
    assert!(
        (master.lambda - expected).norm() < 5e-4,
        "master eigenvalue {} vs reference {expected}",
        master.lambda
    );

    let exp = compute_ssm(&cs, &master, 9).unwrap();
    let rom = exp.rom(&cs);
    let report = limit_cycle_roots(&rom);
    let converged: Vec<_> = report
        .roots
        .iter()
        .filter(|r| r.classification == RootClassification::Converged)
        .collect();
    assert_eq!(converged.len(), 1, "expected a single converged root: {report:?}");
    let root = converged[0];
    assert!(root.stable);
    assert!(
        (root.rho - 5.179).abs() / 5.179 < 1.5e-2,
        "limit-cycle amplitude {} vs reference 5.179",
        root.rho
    );
}

#[test]
fn hutchinson_pipeline_matches_reference() {
    // Galerkin-truncated delayed reaction–diffusion model past its Hopf point.
    let sys = make_hutchinson(&HutchinsonConfig {
        m: 4,
        d: 1.0,
        a: std::f64::consts::FRAC_PI_2 + 0.05,
    })
    .unwrap();
    let cs = build_chain(&sys, 100).unwrap();
    let spectrum = compute_spectrum(&cs, Some(12)).unwrap();
    let master = select_master(&cs, &spectrum).unwrap();
    assert!(master.lambda.re > 0.0, "origin is unstable past the Hopf point");

    let exp = compute_ssm(&cs, &master, 9).unwrap();
    let rom = exp.rom(&cs);
    let report = limit_cycle_roots(&rom);
    let converged: Vec<_> = report
        .roots
        .iter()
        .filter(|r| r.classification == RootClassification::Converged)
        .collect();
    assert_eq!(converged.len(), 1, "expected a single converged root: {report:?}");
    let root = converged[0];
    assert!(root.stable);
    assert!(
        (root.rho - 7.0379).abs() / 7.0379 < 5e-3,
        "limit-cycle amplitude {} vs reference 7.0379",
        root.rho
    );
}
