//! Filter behaviour on the triad family: the degenerate-noise pathology,
//! the controllable modified variant, boundedness of the posterior
//! covariance under an unbounded signal, and the contraction of the
//! covariance flow.

use cghybrid::filter::{
    riccati_contraction_experiment, run_filters, FilterInit, FilterOptions,
};
use cghybrid::pipeline::{run_hybrid_pipeline, PipelineConfig};
use cghybrid::rng::RngPolicy;
use cghybrid::sde::{simulate, Ensemble, SimOptions};
use cghybrid::triad::{triad_model, TriadParams};
use nalgebra::DMatrix;

/// With zero hidden noise the posterior variance is identically zero and
/// the posterior means are exactly the simulated hidden paths.
#[test]
fn zero_hidden_noise_collapses_to_monte_carlo_samples() {
    let model = triad_model(&TriadParams::regime_i()).unwrap();
    let dt = 1e-3;
    let init = Ensemble::at_origin(50, 2, 1).unwrap();
    let opts = SimOptions::new(dt).store_hidden(true);
    let (store, _) = simulate(&model, init, 1.0, &opts, &RngPolicy::new(23)).unwrap();
    let run = run_filters(
        &model,
        &store,
        &FilterInit::FromStoredHidden {
            cov0: DMatrix::zeros(1, 1),
        },
        &FilterOptions::default(),
    )
    .unwrap();
    assert_eq!(run.degenerate_count(), 50);
    assert_eq!(run.max_cov_norm(), 0.0);
    let dev = run.max_mean_path_deviation(&store).unwrap();
    assert!(dev <= 10.0 * dt, "paths deviate by {dev}");
}

/// The small hidden noise restores controllability: no sample is
/// degenerate and the posterior means genuinely differ from the samples.
#[test]
fn hidden_noise_restores_controllability() {
    let model = triad_model(&TriadParams::regime_i().with_epsilon(0.1)).unwrap();
    let dt = 1e-3;
    let init = Ensemble::at_origin(500, 2, 1).unwrap();
    let opts = SimOptions::new(dt).store_hidden(true);
    let (store, _) = simulate(&model, init, 1.0, &opts, &RngPolicy::new(29)).unwrap();
    let run = run_filters(
        &model,
        &store,
        &FilterInit::FromStoredHidden {
            cov0: DMatrix::zeros(1, 1),
        },
        &FilterOptions {
            record_stride: 100,
            ..FilterOptions::default()
        },
    )
    .unwrap();
    assert_eq!(run.degenerate_count(), 0);

    let k = run.n_records() - 1;
    let rec = run.store_record(k);
    let mut max_gap: f64 = 0.0;
    let mut mean_var = 0.0;
    for i in 0..run.n_samples() {
        let mean = run.mean_at(k, i)[0];
        let sample = store.hidden_at(rec, i).unwrap()[0];
        max_gap = max_gap.max((mean - sample).abs());
        mean_var += run.cov_at(k, i)[(0, 0)];
    }
    mean_var /= run.n_samples() as f64;
    assert!(max_gap > 0.01, "posterior means track the samples too closely");
    assert!(mean_var > 1e-4, "posterior variance vanished: {mean_var}");
}

/// In the unstable regime the signal variance grows without bound, but the
/// posterior covariance stays bounded: the hidden state never enters its
/// own covariance evolution.
#[test]
fn posterior_covariance_bounded_under_unbounded_signal() {
    let params = TriadParams::regime_ii().with_epsilon(0.1);
    let model = triad_model(&params).unwrap();
    let init = Ensemble::at_origin(400, 2, 1).unwrap();
    let cfg = PipelineConfig::new(2e-3, vec![5.0, 20.0, 60.0], 1);
    let out = run_hybrid_pipeline(&model, &init, &cfg, &RngPolicy::new(31)).unwrap();

    let var_u1 = |snap: &cghybrid::pipeline::Snapshot| {
        let l = snap.states.len() as f64;
        let mean: f64 = snap.hidden.iter().sum::<f64>() / l;
        snap.hidden.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (l - 1.0)
    };
    let max_cov = |snap: &cghybrid::pipeline::Snapshot| {
        snap.states
            .iter()
            .map(|s| s.cov[(0, 0)])
            .fold(0.0_f64, f64::max)
    };
    let (s5, s20, s60) = (&out.snapshots[0], &out.snapshots[1], &out.snapshots[2]);
    assert!(var_u1(s60) > var_u1(s20) && var_u1(s20) > var_u1(s5));
    assert!(var_u1(s60) > 2.0 * var_u1(s5));
    // Posterior variance settles near its stationary scale instead of
    // following the signal.
    assert!(max_cov(s60) < 1.0, "R = {}", max_cov(s60));
    assert!(max_cov(s60) < 3.0 * max_cov(s20));
}

/// Contraction of the covariance flow on a shared modified-triad
/// trajectory: the envelope of the distance decays monotonically.
#[test]
fn riccati_flows_forget_their_initialization() {
    let model = triad_model(&TriadParams::regime_i().with_epsilon(0.1)).unwrap();
    let init = Ensemble::at_origin(1, 2, 1).unwrap();
    let opts = SimOptions::new(1e-3);
    let (store, _) = simulate(&model, init, 10.0, &opts, &RngPolicy::new(37)).unwrap();
    let series = riccati_contraction_experiment(
        &model,
        &store,
        0,
        &DMatrix::from_element(1, 1, 1e-2),
        &DMatrix::from_element(1, 1, 1.0),
        1000,
    )
    .unwrap();
    let at = |t: f64| {
        series
            .iter()
            .find(|(s, _)| (s - t).abs() < 1e-9)
            .map(|(_, d)| *d)
            .unwrap()
    };
    assert!(at(10.0) < at(1.0), "{} vs {}", at(10.0), at(1.0));
    assert!(at(10.0) < 0.1 * at(1.0));
    // Envelope decay across the whole series.
    for w in series.windows(2) {
        assert!(w[1].1 <= w[0].1 * 1.05, "envelope grew: {:?}", w);
    }
}
