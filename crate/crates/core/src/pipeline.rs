//! Fused ensemble simulation and filtering.
//!
//! For long horizons, storing every integration step of every sample is
//! wasteful; the estimator only needs joint states and posterior statistics
//! at a few evaluation times. This driver advances each sample's path and
//! its filter together, step by step, capturing snapshots at the requested
//! times and optionally maintaining the sliding-window path integrals that
//! the posterior covariance bounds consume. Samples are fully independent,
//! so the whole run is one parallel map.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filter::{
    apply_filter_step, prepare_coefficients, prepared_info_min_eig, FilterScratch, FilterState,
    DEFAULT_EIG_FLOOR_REPORT,
};
use crate::model::ConditionalGaussianModel;
use crate::rng::{RngPolicy, StreamKind};
use crate::sde::{step_sample, Ensemble, StepScratch, DEFAULT_BLOWUP_CAP};

/// Sliding-window path integrals accumulated alongside the run, for the
/// posterior covariance bounds: `int_{t-v}^{t} |u_obs(r)|^{2m} dr` and
/// `int_{t-v}^{t} sigma_A^2(r) dr` with `sigma_A^2` the smallest eigenvalue
/// of the observation information matrix.
#[derive(Clone, Copy, Debug)]
pub struct WindowSpec {
    pub v: f64,
    pub m: f64,
}

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub dt: f64,
    /// Snapshot times, strictly increasing, each a multiple of `dt` past
    /// the initial time (rounded to the nearest step).
    pub t_evals: Vec<f64>,
    /// Initial posterior covariance; the mean starts at each sample's
    /// hidden state.
    pub cov0: DMatrix<f64>,
    pub eig_floor_report: f64,
    pub blowup_cap: f64,
    pub window: Option<WindowSpec>,
}

impl PipelineConfig {
    pub fn new(dt: f64, t_evals: Vec<f64>, n_hidden: usize) -> Self {
        PipelineConfig {
            dt,
            t_evals,
            cov0: DMatrix::zeros(n_hidden, n_hidden),
            eig_floor_report: DEFAULT_EIG_FLOOR_REPORT,
            blowup_cap: DEFAULT_BLOWUP_CAP,
            window: None,
        }
    }

    pub fn with_window(mut self, spec: WindowSpec) -> Self {
        self.window = Some(spec);
        self
    }

    pub fn with_cov0(mut self, cov0: DMatrix<f64>) -> Self {
        self.cov0 = cov0;
        self
    }
}

/// Joint ensemble state and posterior statistics at one evaluation time.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub t: f64,
    /// Observed states, `L x n_obs`.
    pub obs: Vec<f64>,
    /// Hidden states, `L x n_hidden`.
    pub hidden: Vec<f64>,
    /// Posterior state per sample.
    pub states: Vec<FilterState>,
    /// Whether the sample's posterior covariance dipped below the floor at
    /// any step so far (the initial condition does not count).
    pub degenerate: Vec<bool>,
    /// Per-sample `int |u_obs|^{2m}` over the trailing window, when asked.
    pub window_obs_integral: Option<Vec<f64>>,
    /// Per-sample `int sigma_A^2` over the trailing window, when asked.
    pub window_info_integral: Option<Vec<f64>>,
}

impl Snapshot {
    /// Joint samples `(obs..., hidden...)`, sample-major, for direct kernel
    /// estimation.
    pub fn joint_flat(&self, n_obs: usize, n_hidden: usize) -> Vec<f64> {
        let l = self.states.len();
        let mut out = Vec::with_capacity(l * (n_obs + n_hidden));
        for i in 0..l {
            out.extend_from_slice(&self.obs[i * n_obs..(i + 1) * n_obs]);
            out.extend_from_slice(&self.hidden[i * n_hidden..(i + 1) * n_hidden]);
        }
        out
    }

    pub fn degenerate_count(&self) -> usize {
        self.degenerate.iter().filter(|d| **d).count()
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub snapshots: Vec<Snapshot>,
    pub worst_pre_floor_eig: f64,
}

/// Trailing-window trapezoid integral over a fixed-size ring of integrand
/// values sampled every `dt`.
struct WindowRing {
    values: Vec<f64>,
    head: usize,
    filled: usize,
}

impl WindowRing {
    fn new(len: usize) -> Self {
        WindowRing {
            values: vec![0.0; len],
            head: 0,
            filled: 0,
        }
    }

    fn push(&mut self, v: f64) {
        self.values[self.head] = v;
        self.head = (self.head + 1) % self.values.len();
        self.filled = (self.filled + 1).min(self.values.len());
    }

    fn trapezoid(&self, dt: f64) -> f64 {
        if self.filled < 2 {
            return 0.0;
        }
        let n = self.filled;
        let mut sum = 0.0;
        for k in 0..n {
            let idx = (self.head + self.values.len() - n + k) % self.values.len();
            let w = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
            sum += w * self.values[idx];
        }
        sum * dt
    }
}

/// Runs simulation and filtering together from `init` through every
/// requested snapshot time. Filters start at the sample's hidden state with
/// covariance `cov0`.
pub fn run_hybrid_pipeline(
    model: &ConditionalGaussianModel,
    init: &Ensemble,
    cfg: &PipelineConfig,
    policy: &RngPolicy,
) -> Result<PipelineOutput> {
    let no = model.n_obs();
    let nh = model.n_hidden();
    if init.n_obs() != no || init.n_hidden() != nh {
        return Err(Error::DimensionMismatch {
            context: "ensemble vs model",
            expected: no,
            got: init.n_obs(),
        });
    }
    if cfg.t_evals.is_empty() {
        return Err(Error::config("pipeline needs at least one snapshot time"));
    }
    if cfg.t_evals.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("snapshot times must be strictly increasing"));
    }
    if !(cfg.dt > 0.0) {
        return Err(Error::config("dt must be positive"));
    }
    let t0 = init.t();
    let snap_steps: Vec<usize> = cfg
        .t_evals
        .iter()
        .map(|&t| ((t - t0) / cfg.dt).round() as usize)
        .collect();
    if snap_steps[0] == 0 {
        return Err(Error::config("snapshot times must lie after the initial time"));
    }
    let n_steps = *snap_steps.last().unwrap();
    let window_len = cfg
        .window
        .map(|w| {
            let steps = (w.v / cfg.dt).round() as usize;
            if steps < 2 {
                return Err(Error::config("window shorter than two steps"));
            }
            for (&ks, &t) in snap_steps.iter().zip(&cfg.t_evals) {
                if (ks as f64) * cfg.dt < w.v - 1e-9 {
                    return Err(Error::config(format!(
                        "snapshot at t = {t} precedes one full window v = {}",
                        w.v
                    )));
                }
            }
            Ok(steps + 1)
        })
        .transpose()?;

    let l = init.n_samples();
    struct SampleTrace {
        obs: Vec<f64>,
        hidden: Vec<f64>,
        states: Vec<FilterState>,
        degenerate: Vec<bool>,
        w_obs: Vec<f64>,
        w_info: Vec<f64>,
        worst_pre_floor: f64,
    }

    let traces: Result<Vec<SampleTrace>> = (0..l)
        .into_par_iter()
        .map_init(
            || {
                (
                    StepScratch::for_model(model),
                    FilterScratch::for_model(model),
                )
            },
            |(step_scratch, filt_scratch), i| -> Result<SampleTrace> {
                let mut uo = init.obs(i).to_vec();
                let mut uh = init.hidden(i).to_vec();
                let mut uo_prev = vec![0.0; no];
                let mut d_obs = vec![0.0; no];
                let mut state = FilterState::new(
                    DVector::from_column_slice(&uh),
                    cfg.cov0.clone(),
                )?;
                let mut rng = policy.stream(StreamKind::Path, init.ids()[i]);
                let mut trace = SampleTrace {
                    obs: Vec::with_capacity(snap_steps.len() * no),
                    hidden: Vec::with_capacity(snap_steps.len() * nh),
                    states: Vec::with_capacity(snap_steps.len()),
                    degenerate: Vec::with_capacity(snap_steps.len()),
                    w_obs: Vec::new(),
                    w_info: Vec::new(),
                    worst_pre_floor: f64::INFINITY,
                };
                let mut ring_obs = window_len.map(WindowRing::new);
                let mut ring_info = window_len.map(WindowRing::new);
                let push_rings = |rings: (&mut Option<WindowRing>, &mut Option<WindowRing>),
                                  uo: &[f64],
                                  info_min: f64,
                                  m: f64| {
                    if let Some(r) = rings.0 {
                        let norm_sq: f64 = uo.iter().map(|x| x * x).sum();
                        r.push(norm_sq.powf(m));
                    }
                    if let Some(r) = rings.1 {
                        r.push(info_min.max(0.0));
                    }
                };
                let mut degenerate = false;
                let mut next_snap = 0usize;
                // Window integrands at the initial time.
                if let Some(w) = cfg.window {
                    prepare_coefficients(model, t0, &uo, filt_scratch)?;
                    let info = prepared_info_min_eig(filt_scratch, nh);
                    push_rings((&mut ring_obs, &mut ring_info), &uo, info, w.m);
                }
                for k in 0..n_steps {
                    let t = t0 + k as f64 * cfg.dt;
                    uo_prev.copy_from_slice(&uo);
                    step_sample(model, t, cfg.dt, &mut uo, &mut uh, &mut rng, step_scratch);
                    for x in uo.iter().chain(uh.iter()) {
                        if !x.is_finite() || x.abs() > cfg.blowup_cap {
                            return Err(Error::BlowUp {
                                sample: i,
                                t: t + cfg.dt,
                                magnitude: x.abs(),
                                cap: cfg.blowup_cap,
                            });
                        }
                    }
                    for (d, (a, b)) in d_obs.iter_mut().zip(uo.iter().zip(&uo_prev)) {
                        *d = a - b;
                    }
                    prepare_coefficients(model, t, &uo_prev, filt_scratch)?;
                    let monitor =
                        apply_filter_step(model, t, &d_obs, &mut state, cfg.dt, filt_scratch)
                            .map_err(|e| match e {
                                Error::FilterDiverged { t, .. } => {
                                    Error::FilterDiverged { sample: i, t }
                                }
                                other => other,
                            })?;
                    trace.worst_pre_floor = trace.worst_pre_floor.min(monitor.pre_floor_min_eig);
                    if state.min_eig() < cfg.eig_floor_report {
                        degenerate = true;
                    }
                    if let Some(w) = cfg.window {
                        // Integrand at the post-step time t + dt.
                        prepare_coefficients(model, t + cfg.dt, &uo, filt_scratch)?;
                        let info = prepared_info_min_eig(filt_scratch, nh);
                        push_rings((&mut ring_obs, &mut ring_info), &uo, info, w.m);
                    }
                    if next_snap < snap_steps.len() && snap_steps[next_snap] == k + 1 {
                        trace.obs.extend_from_slice(&uo);
                        trace.hidden.extend_from_slice(&uh);
                        trace.states.push(state.clone());
                        trace.degenerate.push(degenerate);
                        if let Some(r) = &ring_obs {
                            trace.w_obs.push(r.trapezoid(cfg.dt));
                        }
                        if let Some(r) = &ring_info {
                            trace.w_info.push(r.trapezoid(cfg.dt));
                        }
                        next_snap += 1;
                    }
                }
                Ok(trace)
            },
        )
        .collect();
    let traces = traces?;

    let mut snapshots: Vec<Snapshot> = snap_steps
        .iter()
        .map(|&k| Snapshot {
            t: t0 + k as f64 * cfg.dt,
            obs: Vec::with_capacity(l * no),
            hidden: Vec::with_capacity(l * nh),
            states: Vec::with_capacity(l),
            degenerate: Vec::with_capacity(l),
            window_obs_integral: cfg.window.map(|_| Vec::with_capacity(l)),
            window_info_integral: cfg.window.map(|_| Vec::with_capacity(l)),
        })
        .collect();
    let mut worst = f64::INFINITY;
    for trace in &traces {
        worst = worst.min(trace.worst_pre_floor);
        for (s, snap) in snapshots.iter_mut().enumerate() {
            snap.obs.extend_from_slice(&trace.obs[s * no..(s + 1) * no]);
            snap.hidden
                .extend_from_slice(&trace.hidden[s * nh..(s + 1) * nh]);
            snap.states.push(trace.states[s].clone());
            snap.degenerate.push(trace.degenerate[s]);
            if let Some(w) = snap.window_obs_integral.as_mut() {
                w.push(trace.w_obs[s]);
            }
            if let Some(w) = snap.window_info_integral.as_mut() {
                w.push(trace.w_info[s]);
            }
        }
    }
    Ok(PipelineOutput {
        snapshots,
        worst_pre_floor_eig: worst,
    })
}
