//! Long-run statistics of the triad family against its closed-form
//! equilibrium, and the structural checks on the presets.

use cghybrid::model::check_dissipativity;
use cghybrid::rng::RngPolicy;
use cghybrid::sde::{simulate, Ensemble, SimOptions};
use cghybrid::triad::{triad_energies, triad_invariant_measure, triad_model, TriadParams};

/// Regime I has the Gaussian invariant measure `diag(e1, e2, e3)` with
/// `e1 = 5/7` from the stability formula (the energies, not any printed
/// table value, are the oracle here), verified against a long Monte Carlo
/// run.
#[test]
fn regime_i_equilibrium_matches_invariant_measure() {
    let params = TriadParams::regime_i();
    let model = triad_model(&params).unwrap();
    let spec = triad_invariant_measure(&params).unwrap().unwrap();
    let want = [spec.covariance()[(1, 1)], spec.covariance()[(2, 2)], spec.covariance()[(0, 0)]];
    assert_eq!(want[0], 0.5);
    assert_eq!(want[1], 1.0);
    assert!((want[2] - 5.0 / 7.0).abs() < 1e-15);

    let init = Ensemble::at_origin(30_000, 2, 1).unwrap();
    let opts = SimOptions::new(2e-3).store_stride(1000).store_hidden(true);
    let (store, end) = simulate(&model, init, 30.0, &opts, &RngPolicy::new(11)).unwrap();
    let m = end.moments().unwrap();
    // Coordinates are (u2, u3, u1).
    assert!((m.variance[0] - want[0]).abs() < 0.03 * want[0], "Var(u2) = {}", m.variance[0]);
    assert!((m.variance[1] - want[1]).abs() < 0.03 * want[1], "Var(u3) = {}", m.variance[1]);
    assert!((m.variance[2] - want[2]).abs() < 0.05 * want[2], "Var(u1) = {}", m.variance[2]);

    // Statistical steady state: the variances plateau over the second half.
    let mid = store.n_records() / 2;
    let m_mid = store.moments_at(mid).unwrap();
    for c in 0..3 {
        let rel = (m_mid.variance[c] - m.variance[c]).abs() / m.variance[c];
        assert!(rel < 0.12, "coordinate {c} still drifting: {rel}");
    }
}

/// Regime II has no invariant measure: the hidden-mode variance grows with
/// time while the observed modes plateau.
#[test]
fn regime_ii_hidden_variance_grows_without_bound() {
    let params = TriadParams::regime_ii();
    assert!(triad_invariant_measure(&params).unwrap().is_none());
    let e = triad_energies(&params).unwrap();
    assert!(e.e1 < 0.0);

    let model = triad_model(&params).unwrap();
    let init = Ensemble::at_origin(2000, 2, 1).unwrap();
    let opts = SimOptions::new(2e-3).store_stride(1000).store_hidden(true);
    let (store, _) = simulate(&model, init, 40.0, &opts, &RngPolicy::new(13)).unwrap();
    let at = |t: f64| {
        let k = ((t / 2e-3) / 1000.0).round() as usize;
        store.moments_at(k).unwrap()
    };
    let (early, mid, late) = (at(2.0), at(10.0), at(40.0));
    assert!(late.variance[2] > mid.variance[2] && mid.variance[2] > early.variance[2],
        "Var(u1): {} -> {} -> {}", early.variance[2], mid.variance[2], late.variance[2]);
    assert!(late.variance[2] > 2.0 * early.variance[2]);
    // Observed modes stay near their equilibrium energies.
    assert!((late.variance[0] - 0.5).abs() < 0.1);
    assert!((late.variance[1] - 1.0).abs() < 0.15);
}

/// Dissipativity probe on the presets: the damped variant satisfies the
/// energy inequality with the least-damped rate, the undamped one fails in
/// the hidden direction.
#[test]
fn dissipativity_of_presets() {
    let damped = triad_model(
        &TriadParams::regime_i().with_epsilon(0.1).with_u1_damping(0.1),
    )
    .unwrap();
    let report = check_dissipativity(&damped, 400, 10.0, 3).unwrap();
    assert!(report.satisfied);
    assert!((report.rho_hat - 0.1).abs() < 1e-9, "rho = {}", report.rho_hat);

    let undamped = triad_model(&TriadParams::regime_ii().with_epsilon(0.1)).unwrap();
    let report = check_dissipativity(&undamped, 400, 10.0, 3).unwrap();
    assert!(!report.satisfied, "rho = {}", report.rho_hat);
}

/// Weak-order sanity of the integrator on the OU preset: the equilibrium
/// variance error shrinks when the step is refined.
#[test]
fn ou_variance_error_decreases_with_step() {
    use cghybrid::model::{Coefficients, ConditionalGaussianModel};
    use std::sync::Arc;
    let ou = ConditionalGaussianModel::new(
        1,
        1,
        Coefficients {
            obs_drift: Arc::new(|_t, u, out: &mut [f64]| out[0] = -u[0]),
            obs_coupling: Arc::new(|_t, _u, out: &mut [f64]| out[0] = 0.0),
            hidden_drift: Arc::new(|_t, _u, out: &mut [f64]| out[0] = 0.0),
            hidden_feedback: Arc::new(|_t, _u, out: &mut [f64]| out[0] = -1.0),
            obs_noise: Arc::new(|_t, _u, out: &mut [f64]| out[0] = 1.0),
            hidden_noise: Arc::new(|_t, _u, out: &mut [f64]| out[0] = 1.0),
        },
    )
    .unwrap();
    let var_at = |dt: f64| {
        let init = Ensemble::at_origin(200_000, 1, 1).unwrap();
        let opts = SimOptions::new(dt).store_stride((5.0 / dt).round() as usize);
        let (_, end) = simulate(&ou, init, 5.0, &opts, &RngPolicy::new(17)).unwrap();
        end.moments().unwrap().variance[0]
    };
    let coarse = (var_at(1e-2) - 0.5).abs();
    let fine = (var_at(1e-3) - 0.5).abs();
    assert!(
        fine < coarse,
        "no refinement: coarse err {coarse:.2e}, fine err {fine:.2e}"
    );
    assert!(coarse < 0.01);
}
