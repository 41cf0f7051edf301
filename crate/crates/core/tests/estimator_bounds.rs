//! Bound checks that need a Monte Carlo reference: the leading smoothing
//! bound with its fixed slack, and the controllability Gramian bracket of
//! the damped triad.

use cghybrid::density::{axes_from_stats, Bandwidth, HybridMixture};
use cghybrid::diagnostics::{bias_bound_report, estimate_mise, gramians};
use cghybrid::pipeline::{run_hybrid_pipeline, PipelineConfig};
use cghybrid::reference::{mc_reference, ReferenceConfig, ReferenceGrid};
use cghybrid::rng::RngPolicy;
use cghybrid::sde::{simulate, Ensemble, SimOptions};
use cghybrid::triad::{triad_energy_model, triad_model, TriadParams};

/// Empirical smoothing error of the observed-pair kernel estimator stays
/// under the leading-term bound with its 25 percent slack.
#[test]
fn empirical_bias_within_leading_bound() {
    let params = TriadParams::regime_i().with_epsilon(0.1);
    let model = triad_model(&params).unwrap();
    let policy = RngPolicy::new(77);

    let pilot = mc_reference(
        &model,
        &[1.0],
        &[],
        &ReferenceConfig::new(20_000, 2e-3),
        &policy.derived(1),
    )
    .unwrap();
    let stds: Vec<f64> = pilot.variance[0].iter().map(|v| v.sqrt()).collect();
    let axes = axes_from_stats(&pilot.mean[0][..2], &stds[..2], 4.0, 60);
    let oracle = mc_reference(
        &model,
        &[1.0],
        &[ReferenceGrid {
            coords: vec![0, 1],
            axes,
            smoothing_cells: 1.5,
        }],
        &ReferenceConfig::new(400_000, 2e-3),
        &policy.derived(2),
    )
    .unwrap();
    let reference = &oracle.densities[0][0];

    let l = 300;
    let mut bound = f64::INFINITY;
    let mise = estimate_mise(reference, 10, |rep| {
        let init = Ensemble::at_origin(l, 2, 1)?;
        let cfg = PipelineConfig::new(1e-3, vec![1.0], 1);
        let out = run_hybrid_pipeline(&model, &init, &cfg, &policy.derived(100 + rep))?;
        let snap = &out.snapshots[0];
        let c: Vec<f64> = (0..2)
            .map(|k| {
                let mean = snap.obs.iter().skip(k).step_by(2).sum::<f64>() / l as f64;
                (snap
                    .obs
                    .iter()
                    .skip(k)
                    .step_by(2)
                    .map(|x| (x - mean) * (x - mean))
                    .sum::<f64>()
                    / (l - 1) as f64)
                    .sqrt()
            })
            .collect();
        let bw = Bandwidth::scaling(l, 2, 1.0, c)?;
        bound = bound.min(bias_bound_report(reference, &bw, 2, 0.25)?);
        let mix = HybridMixture::build_hybrid(&snap.obs, 2, &snap.states, &bw, 1e-6)?;
        mix.marginal_observed()?.grid_density(reference.axes().to_vec())
    })
    .unwrap();

    // The measured smoothing part carries the repeat-average residue of the
    // sampling noise (variance / n_repeats) on top of the true bias.
    let residue = mise.variance / mise.n_repeats as f64;
    assert!(
        mise.bias <= 1.25 * bound + 3.0 * residue,
        "bias {:.3e} vs 1.25 x bound {:.3e} (+ residue {:.1e})",
        mise.bias,
        bound,
        residue
    );
    // And the bound is meaningful, not orders of magnitude slack.
    assert!(mise.bias > 1e-2 * bound, "bound vacuously large");
}

/// With a fixed bandwidth (no sample-size scaling), the hybrid sampling
/// error decreases like 1/L across a decade of ensemble sizes.
#[test]
fn hybrid_variance_scales_inversely_with_samples() {
    use cghybrid::diagnostics::mise_from_estimates;
    use cghybrid::density::GridDensity;

    let params = TriadParams::regime_i().with_epsilon(0.1);
    let model = triad_model(&params).unwrap();
    let policy = RngPolicy::new(55);
    let axes = axes_from_stats(&[0.0, 0.0, 0.0], &[0.8, 1.0, 0.8], 4.0, 24);
    let dummy = GridDensity::from_values(
        axes.clone(),
        vec![0.0; axes.iter().map(|a| a.len()).product()],
    )
    .unwrap();
    let variance_at = |l: usize, label: u64| {
        let estimates: Vec<GridDensity> = (0..8u64)
            .map(|rep| {
                let init = Ensemble::at_origin(l, 2, 1).unwrap();
                let cfg = PipelineConfig::new(1e-3, vec![1.0], 1);
                let out =
                    run_hybrid_pipeline(&model, &init, &cfg, &policy.derived(label * 100 + rep))
                        .unwrap();
                let snap = &out.snapshots[0];
                let bw = Bandwidth::new(0.15, vec![0.7, 0.9]).unwrap();
                HybridMixture::build_hybrid(&snap.obs, 2, &snap.states, &bw, 1e-6)
                    .unwrap()
                    .grid_density(axes.clone())
                    .unwrap()
            })
            .collect();
        mise_from_estimates(&estimates, &dummy).unwrap().variance
    };
    let v100 = variance_at(100, 1);
    let v1000 = variance_at(1000, 2);
    let ratio = v100 / v1000;
    assert!(
        (ratio - 10.0).abs() < 4.0,
        "variance ratio across a decade of L: {ratio:.2} (want ~10)"
    );
}

/// The controllability Gramian of the damped modified triad over a unit
/// window lies inside the closed-form bracket derived from the damping
/// spectrum: `s2_hid (1 - e^{-2 l+})/(2 l+) <= C <= s2_hid / (2 l-)`.
#[test]
fn triad_gramian_within_damping_bracket() {
    let params = TriadParams::regime_i()
        .with_epsilon(0.1)
        .with_u1_damping(0.1);
    let model = triad_model(&params).unwrap();
    let em = triad_energy_model(&params).unwrap();
    let constants = em.stability_constants(100, 5);
    let (lm, lp) = (constants.damping_min, constants.damping_max);
    let s2 = constants.hidden_noise_min_sq; // = epsilon^2

    let init = Ensemble::at_origin(1, 2, 1).unwrap();
    let (store, _) = simulate(&model, init, 3.0, &SimOptions::new(1e-3), &RngPolicy::new(3))
        .unwrap();
    for t in [2.0, 3.0] {
        let report = gramians(&model, &store, 0, t - 1.0, t).unwrap();
        let c = report.controllability[(0, 0)];
        let lower = s2 * (1.0 - (-2.0 * lp).exp()) / (2.0 * lp);
        let upper = s2 / (2.0 * lm);
        assert!(
            c >= lower && c <= upper,
            "C = {c:.5e} outside [{lower:.5e}, {upper:.5e}] at t = {t}"
        );
    }
}
