//! Closed-form conditional Gaussian posterior statistics.
//!
//! Given one observed path `u_obs(s <= t)`, the hidden state is Gaussian
//! with mean `m(t)` and covariance `R(t)` obeying
//!
//! ```text
//! dm = (a0 + a1 m) dt + R A1^T (S_obs S_obs^T)^{-1} [du_obs - (A0 + A1 m) dt],
//! dR = [a1 R + R a1^T + S_hid S_hid^T
//!       - R A1^T (S_obs S_obs^T)^{-1} A1 R] dt.
//! ```
//!
//! Both equations are discretized with forward Euler at the simulation step,
//! consuming exactly the increments the simulator produced. After every step
//! the covariance is symmetrized and its spectrum floored at zero; the
//! worst pre-floor eigenvalue is monitored so the `O(dt)` overshoot of the
//! quadratic damping term stays observable.
//!
//! One filter runs per ensemble sample with no cross-sample coupling, so
//! `run_filters` is a parallel map.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::ConditionalGaussianModel;
use crate::sde::TrajectoryStore;

pub const DEFAULT_EIG_FLOOR_REPORT: f64 = 1e-10;

/// Posterior mean and covariance of the hidden block.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FilterState {
    /// Zero mean, zero covariance (deterministic initial data).
    pub fn origin(n_hidden: usize) -> Self {
        FilterState {
            mean: DVector::zeros(n_hidden),
            cov: DMatrix::zeros(n_hidden, n_hidden),
        }
    }

    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::DimensionMismatch {
                context: "FilterState covariance",
                expected: n,
                got: cov.nrows(),
            });
        }
        let scale = cov.amax().max(1.0);
        if (&cov - cov.transpose()).amax() > 1e-12 * scale {
            return Err(Error::NotPositiveDefinite {
                context: "filter covariance not symmetric",
            });
        }
        if min_sym_eig(cov.as_slice(), n) < -1e-12 * scale {
            return Err(Error::NotPositiveDefinite {
                context: "filter covariance has negative eigenvalue",
            });
        }
        if !mean.iter().chain(cov.iter()).all(|x| x.is_finite()) {
            return Err(Error::config("filter state must be finite"));
        }
        Ok(FilterState { mean, cov })
    }

    pub fn min_eig(&self) -> f64 {
        min_sym_eig(self.cov.as_slice(), self.mean.len())
    }
}

fn min_sym_eig(cov: &[f64], n: usize) -> f64 {
    if n == 1 {
        cov[0]
    } else {
        DMatrix::from_column_slice(n, n, cov)
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }
}

fn spectral_norm_sym(m: &DMatrix<f64>) -> f64 {
    m.symmetric_eigenvalues()
        .iter()
        .map(|e| e.abs())
        .fold(0.0, f64::max)
}

/// Workspace for filter steps; none of the hot-path operations allocate
/// when the hidden dimension is 1.
pub struct FilterScratch {
    a0: Vec<f64>,
    a1: Vec<f64>,
    h0: Vec<f64>,
    h1: Vec<f64>,
    s_obs: Vec<f64>,
    s_hid: Vec<f64>,
    s_factor: Vec<f64>,
    sinv_a1: Vec<f64>,
    info: Vec<f64>,
    innov: Vec<f64>,
    w: Vec<f64>,
    tmp_h: Vec<f64>,
    tmp_h2: Vec<f64>,
    dr: Vec<f64>,
    rq: Vec<f64>,
}

impl FilterScratch {
    pub fn for_model(model: &ConditionalGaussianModel) -> Self {
        let no = model.n_obs();
        let nh = model.n_hidden();
        FilterScratch {
            a0: vec![0.0; no],
            a1: vec![0.0; no * nh],
            h0: vec![0.0; nh],
            h1: vec![0.0; nh * nh],
            s_obs: vec![0.0; no * no],
            s_hid: vec![0.0; nh * nh],
            s_factor: vec![0.0; no * no],
            sinv_a1: vec![0.0; no * nh],
            info: vec![0.0; nh * nh],
            innov: vec![0.0; no],
            w: vec![0.0; no],
            tmp_h: vec![0.0; nh],
            tmp_h2: vec![0.0; nh],
            dr: vec![0.0; nh * nh],
            rq: vec![0.0; nh * nh],
        }
    }
}

/// In-place Cholesky of a column-major symmetric matrix; returns false when
/// the matrix is not positive definite.
fn cholesky_in_place(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            let l = a[k * n + j];
            d -= l * l;
        }
        if d <= 0.0 || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut v = a[j * n + i];
            for k in 0..j {
                v -= a[k * n + i] * a[k * n + j];
            }
            a[j * n + i] = v / d;
        }
    }
    true
}

/// Solves `L L^T x = b` in place, with `L` the lower factor stored
/// column-major in the lower triangle.
fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= l[k * n + i] * b[k];
        }
        b[i] = v / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut v = b[i];
        for k in (i + 1)..n {
            v -= l[i * n + k] * b[k];
        }
        b[i] = v / l[i * n + i];
    }
}

/// Per-step health data.
#[derive(Clone, Copy, Debug)]
pub struct StepMonitor {
    /// Smallest covariance eigenvalue before flooring; slightly negative
    /// values of size `O(dt)` are expected from the Euler overshoot.
    pub pre_floor_min_eig: f64,
}

/// Evaluates the coefficient set and the observation information matrix
/// `A1^T (S_obs S_obs^T)^{-1} A1` at `(t, u_obs)`. Returns an error when the
/// observation noise covariance is singular.
pub(crate) fn prepare_coefficients(
    model: &ConditionalGaussianModel,
    t: f64,
    u_obs: &[f64],
    s: &mut FilterScratch,
) -> Result<()> {
    let no = model.n_obs();
    let nh = model.n_hidden();
    model.obs_drift_into(t, u_obs, &mut s.a0);
    model.obs_coupling_into(t, u_obs, &mut s.a1);
    model.hidden_drift_into(t, u_obs, &mut s.h0);
    model.hidden_feedback_into(t, u_obs, &mut s.h1);
    model.obs_noise_into(t, u_obs, &mut s.s_obs);
    model.hidden_noise_into(t, u_obs, &mut s.s_hid);

    // S = S_obs S_obs^T, factored once per step.
    for c in 0..no {
        for r in 0..no {
            let mut acc = 0.0;
            for k in 0..no {
                acc += s.s_obs[k * no + r] * s.s_obs[k * no + c];
            }
            s.s_factor[c * no + r] = acc;
        }
    }
    if !cholesky_in_place(&mut s.s_factor, no) {
        return Err(Error::SingularObservationNoise { t });
    }

    // sinv_a1 = S^{-1} A1, info = A1^T S^{-1} A1.
    s.sinv_a1.copy_from_slice(&s.a1);
    for c in 0..nh {
        cholesky_solve(&s.s_factor, no, &mut s.sinv_a1[c * no..(c + 1) * no]);
    }
    for c in 0..nh {
        for r in 0..nh {
            let mut acc = 0.0;
            for k in 0..no {
                acc += s.a1[r * no + k] * s.sinv_a1[c * no + k];
            }
            s.info[c * nh + r] = acc;
        }
    }
    Ok(())
}

/// Advances the covariance-only Riccati flow by one Euler step, then
/// symmetrizes and floors the spectrum at zero. `prepare_coefficients` must
/// have run for this `(t, u_obs)`. Returns the pre-floor minimum eigenvalue.
fn cov_step(cov: &mut [f64], nh: usize, dt: f64, s: &mut FilterScratch) -> f64 {
    // dr = a1 R + R a1^T + S_hid S_hid^T - R info R
    for c in 0..nh {
        for r in 0..nh {
            let mut acc = 0.0;
            for k in 0..nh {
                acc += s.h1[k * nh + r] * cov[c * nh + k]; // a1 R
                acc += cov[k * nh + r] * s.h1[k * nh + c]; // R a1^T
                acc += s.s_hid[k * nh + r] * s.s_hid[k * nh + c]; // S S^T
            }
            s.dr[c * nh + r] = acc;
        }
    }
    for c in 0..nh {
        for r in 0..nh {
            let mut acc = 0.0;
            for k in 0..nh {
                acc += cov[k * nh + r] * s.info[c * nh + k];
            }
            s.rq[c * nh + r] = acc; // R info
        }
    }
    for c in 0..nh {
        for r in 0..nh {
            let mut acc = 0.0;
            for k in 0..nh {
                acc += s.rq[k * nh + r] * cov[c * nh + k]; // (R info) R
            }
            s.dr[c * nh + r] -= acc;
        }
    }
    for (r, d) in cov.iter_mut().zip(&s.dr) {
        *r += d * dt;
    }
    // Exact symmetrization.
    for c in 0..nh {
        for r in (c + 1)..nh {
            let v = 0.5 * (cov[c * nh + r] + cov[r * nh + c]);
            cov[c * nh + r] = v;
            cov[r * nh + c] = v;
        }
    }
    if nh == 1 {
        let pre = cov[0];
        cov[0] = cov[0].max(0.0);
        pre
    } else {
        let m = DMatrix::from_column_slice(nh, nh, cov);
        let eig = m.symmetric_eigen();
        let pre = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if pre < 0.0 {
            let mut vals = eig.eigenvalues.clone();
            vals.iter_mut().for_each(|v| *v = v.max(0.0));
            let floored =
                &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
            // Re-symmetrize the reconstruction exactly.
            for c in 0..nh {
                cov[c * nh + c] = floored[(c, c)];
                for r in (c + 1)..nh {
                    let v = 0.5 * (floored[(r, c)] + floored[(c, r)]);
                    cov[c * nh + r] = v;
                    cov[r * nh + c] = v;
                }
            }
        }
        pre
    }
}

/// Smallest eigenvalue of the prepared observation information matrix.
pub(crate) fn prepared_info_min_eig(s: &FilterScratch, nh: usize) -> f64 {
    min_sym_eig(&s.info, nh)
}

/// One forward-Euler step of the posterior statistics driven by the
/// observed increment `d_obs` over `[t, t + dt]`.
pub fn filter_step(
    model: &ConditionalGaussianModel,
    t: f64,
    u_obs: &[f64],
    d_obs: &[f64],
    state: &mut FilterState,
    dt: f64,
    scratch: &mut FilterScratch,
) -> Result<StepMonitor> {
    prepare_coefficients(model, t, u_obs, scratch)?;
    apply_filter_step(model, t, d_obs, state, dt, scratch)
}

/// Filter step once `prepare_coefficients` has run for `(t, u_obs)`.
pub(crate) fn apply_filter_step(
    model: &ConditionalGaussianModel,
    t: f64,
    d_obs: &[f64],
    state: &mut FilterState,
    dt: f64,
    scratch: &mut FilterScratch,
) -> Result<StepMonitor> {
    if !(dt > 0.0) {
        return Err(Error::config("dt must be positive"));
    }
    let no = model.n_obs();
    let nh = model.n_hidden();
    let s = scratch;

    // innovation = d_obs - (A0 + A1 m) dt, then w = S^{-1} innovation.
    let mean = state.mean.as_slice();
    let cov = state.cov.as_slice();
    for r in 0..no {
        let mut acc = s.a0[r];
        for c in 0..nh {
            acc += s.a1[c * no + r] * mean[c];
        }
        s.innov[r] = d_obs[r] - acc * dt;
    }
    s.w.copy_from_slice(&s.innov);
    cholesky_solve(&s.s_factor, no, &mut s.w);

    // mean update: (a0 + a1 m) dt + R A1^T w, all at the pre-step state.
    for r in 0..nh {
        let mut acc = 0.0;
        for k in 0..no {
            acc += s.a1[r * no + k] * s.w[k];
        }
        s.tmp_h[r] = acc; // A1^T w
    }
    for r in 0..nh {
        let mut drift = s.h0[r];
        let mut gain = 0.0;
        for c in 0..nh {
            drift += s.h1[c * nh + r] * mean[c];
            gain += cov[c * nh + r] * s.tmp_h[c];
        }
        s.tmp_h2[r] = drift * dt + gain;
    }
    for (m, d) in state.mean.as_mut_slice().iter_mut().zip(&s.tmp_h2) {
        *m += d;
    }

    let pre_floor = cov_step(state.cov.as_mut_slice(), nh, dt, s);

    if !state.mean.iter().chain(state.cov.iter()).all(|x| x.is_finite()) {
        return Err(Error::FilterDiverged { sample: 0, t });
    }
    Ok(StepMonitor {
        pre_floor_min_eig: pre_floor,
    })
}

/// How each sample's filter is initialized.
#[derive(Clone, Debug)]
pub enum FilterInit {
    /// Mean from the sample's stored hidden state at the first record,
    /// covariance `cov0` for every sample. With deterministic initial data
    /// use `cov0 = 0`.
    FromStoredHidden { cov0: DMatrix<f64> },
    /// One state for all samples.
    Fixed(FilterState),
    /// Explicit per-sample states.
    PerSample(Vec<FilterState>),
}

#[derive(Clone, Debug)]
pub struct FilterOptions {
    /// A sample is flagged degenerate when its posterior covariance falls
    /// below this eigenvalue floor at any recorded time.
    pub eig_floor_report: f64,
    /// Recording interval in store records; the final record is always
    /// kept.
    pub record_stride: usize,
}

impl Default for FilterOptions {
    fn default() -> Self {
        FilterOptions {
            eig_floor_report: DEFAULT_EIG_FLOOR_REPORT,
            record_stride: 1,
        }
    }
}

/// Posterior statistics of every sample along the stored trajectories.
#[derive(Clone, Debug)]
pub struct FilterRun {
    times: Vec<f64>,
    store_records: Vec<usize>,
    l: usize,
    n_hidden: usize,
    means: Vec<f64>,
    covs: Vec<f64>,
    degenerate: Vec<bool>,
    worst_pre_floor_eig: f64,
    eig_floor: f64,
}

impl FilterRun {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_records(&self) -> usize {
        self.times.len()
    }

    pub fn n_samples(&self) -> usize {
        self.l
    }

    pub fn n_hidden(&self) -> usize {
        self.n_hidden
    }

    /// Index into the underlying store for recorded time `k`.
    pub fn store_record(&self, k: usize) -> usize {
        self.store_records[k]
    }

    pub fn mean_at(&self, k: usize, i: usize) -> &[f64] {
        let base = (k * self.l + i) * self.n_hidden;
        &self.means[base..base + self.n_hidden]
    }

    pub fn cov_at(&self, k: usize, i: usize) -> DMatrix<f64> {
        let nh = self.n_hidden;
        let base = (k * self.l + i) * nh * nh;
        DMatrix::from_column_slice(nh, nh, &self.covs[base..base + nh * nh])
    }

    pub fn state_at(&self, k: usize, i: usize) -> FilterState {
        FilterState {
            mean: DVector::from_column_slice(self.mean_at(k, i)),
            cov: self.cov_at(k, i),
        }
    }

    /// Final posterior states, one per sample.
    pub fn final_states(&self) -> Vec<FilterState> {
        let k = self.n_records() - 1;
        (0..self.l).map(|i| self.state_at(k, i)).collect()
    }

    pub fn degenerate_flags(&self) -> &[bool] {
        &self.degenerate
    }

    pub fn degenerate_count(&self) -> usize {
        self.degenerate.iter().filter(|d| **d).count()
    }

    /// Worst pre-floor covariance eigenvalue seen over the whole run.
    pub fn worst_pre_floor_eig(&self) -> f64 {
        self.worst_pre_floor_eig
    }

    pub fn eig_floor(&self) -> f64 {
        self.eig_floor
    }

    /// Largest spectral norm of any recorded covariance.
    pub fn max_cov_norm(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..self.n_records() {
            for i in 0..self.l {
                worst = worst.max(spectral_norm_sym(&self.cov_at(k, i)));
            }
        }
        worst
    }

    /// Largest deviation between posterior means and the stored hidden
    /// paths, over all samples and recorded times. This is the degenerate
    /// noise identity check: with zero hidden noise and zero initial
    /// covariance the posterior means are the simulated hidden states.
    pub fn max_mean_path_deviation(&self, store: &TrajectoryStore) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (k, &rec) in self.store_records.iter().enumerate() {
            for i in 0..self.l {
                let hidden = store.hidden_at(rec, i).ok_or_else(|| {
                    Error::config("store has no hidden states to compare against")
                })?;
                for (m, h) in self.mean_at(k, i).iter().zip(hidden) {
                    worst = worst.max((m - h).abs());
                }
            }
        }
        Ok(worst)
    }
}

/// Runs one filter per sample over a full-resolution store, all from the
/// same initialization rule. Sample errors carry the sample index.
pub fn run_filters(
    model: &ConditionalGaussianModel,
    store: &TrajectoryStore,
    init: &FilterInit,
    opts: &FilterOptions,
) -> Result<FilterRun> {
    if !store.is_full_resolution() {
        return Err(Error::config(
            "filtering needs a store recorded at every integration step (store_stride = 1)",
        ));
    }
    if store.n_records() < 2 {
        return Err(Error::config("store has no increments"));
    }
    if opts.record_stride == 0 {
        return Err(Error::config("record_stride must be at least 1"));
    }
    let l = store.n_samples();
    let nh = model.n_hidden();
    let no = model.n_obs();
    if store.n_obs() != no {
        return Err(Error::DimensionMismatch {
            context: "store vs model",
            expected: no,
            got: store.n_obs(),
        });
    }
    let dt = store.sim_dt();
    let n_steps = store.n_records() - 1;

    let mut record_ids: Vec<usize> = (0..store.n_records())
        .step_by(opts.record_stride)
        .collect();
    if *record_ids.last().unwrap() != n_steps {
        record_ids.push(n_steps);
    }

    let init_state = |i: usize| -> Result<FilterState> {
        match init {
            FilterInit::FromStoredHidden { cov0 } => {
                let hidden = store.hidden_at(0, i).ok_or_else(|| {
                    Error::config("FromStoredHidden needs hidden states in the store")
                })?;
                FilterState::new(DVector::from_column_slice(hidden), cov0.clone())
            }
            FilterInit::Fixed(state) => Ok(state.clone()),
            FilterInit::PerSample(states) => states.get(i).cloned().ok_or_else(|| {
                Error::config("PerSample initialization shorter than the ensemble")
            }),
        }
    };

    struct SampleResult {
        records: Vec<f64>,
        cov_records: Vec<f64>,
        degenerate: bool,
        worst_pre_floor: f64,
    }

    let per_sample: Result<Vec<SampleResult>> = (0..l)
        .into_par_iter()
        .map_init(
            || FilterScratch::for_model(model),
            |scratch, i| -> Result<SampleResult> {
                let mut state = init_state(i)?;
                let mut records = Vec::with_capacity(record_ids.len() * nh);
                let mut cov_records = Vec::with_capacity(record_ids.len() * nh * nh);
                let mut degenerate = false;
                let mut worst_pre_floor = f64::INFINITY;
                let mut next_record = 0usize;
                // The initial record never sets the degeneracy flag:
                // deterministic initial data legitimately start at R = 0.
                let maybe_record = |rec: usize, state: &FilterState, next: &mut usize,
                                        records: &mut Vec<f64>, cov_records: &mut Vec<f64>,
                                        degenerate: &mut bool| {
                    if *next < record_ids.len() && record_ids[*next] == rec {
                        records.extend_from_slice(state.mean.as_slice());
                        cov_records.extend_from_slice(state.cov.as_slice());
                        if rec > 0 && state.min_eig() < opts.eig_floor_report {
                            *degenerate = true;
                        }
                        *next += 1;
                    }
                };
                maybe_record(0, &state, &mut next_record, &mut records, &mut cov_records,
                             &mut degenerate);
                let mut d_obs = vec![0.0; no];
                for k in 0..n_steps {
                    let t = store.time(k);
                    let u_now = store.obs_at(k, i);
                    let u_next = store.obs_at(k + 1, i);
                    for (d, (a, b)) in d_obs.iter_mut().zip(u_next.iter().zip(u_now)) {
                        *d = a - b;
                    }
                    let monitor = filter_step(model, t, u_now, &d_obs, &mut state, dt, scratch)
                        .map_err(|e| match e {
                            Error::FilterDiverged { t, .. } => {
                                Error::FilterDiverged { sample: i, t }
                            }
                            other => other,
                        })?;
                    worst_pre_floor = worst_pre_floor.min(monitor.pre_floor_min_eig);
                    maybe_record(k + 1, &state, &mut next_record, &mut records,
                                 &mut cov_records, &mut degenerate);
                }
                Ok(SampleResult {
                    records,
                    cov_records,
                    degenerate,
                    worst_pre_floor,
                })
            },
        )
        .collect();
    let per_sample = per_sample?;

    let n_rec = record_ids.len();
    let mut means = vec![0.0; n_rec * l * nh];
    let mut covs = vec![0.0; n_rec * l * nh * nh];
    let mut degenerate = vec![false; l];
    let mut worst = f64::INFINITY;
    for (i, sr) in per_sample.iter().enumerate() {
        degenerate[i] = sr.degenerate;
        worst = worst.min(sr.worst_pre_floor);
        for k in 0..n_rec {
            let dst = (k * l + i) * nh;
            means[dst..dst + nh].copy_from_slice(&sr.records[k * nh..(k + 1) * nh]);
            let dstc = (k * l + i) * nh * nh;
            covs[dstc..dstc + nh * nh]
                .copy_from_slice(&sr.cov_records[k * nh * nh..(k + 1) * nh * nh]);
        }
    }

    Ok(FilterRun {
        times: record_ids.iter().map(|&k| store.time(k)).collect(),
        store_records: record_ids,
        l,
        n_hidden: nh,
        means,
        covs,
        degenerate,
        worst_pre_floor_eig: worst,
        eig_floor: opts.eig_floor_report,
    })
}

/// Integrates two covariance flows driven by the same observed trajectory
/// and returns the spectral distance over time. The Riccati equation does
/// not involve the posterior mean, so only the covariance is propagated.
pub fn riccati_contraction_experiment(
    model: &ConditionalGaussianModel,
    store: &TrajectoryStore,
    sample: usize,
    r0: &DMatrix<f64>,
    r0_prime: &DMatrix<f64>,
    record_stride: usize,
) -> Result<Vec<(f64, f64)>> {
    if !store.is_full_resolution() {
        return Err(Error::config("contraction experiment needs a full-resolution store"));
    }
    let nh = model.n_hidden();
    for (name, r) in [("r0", r0), ("r0_prime", r0_prime)] {
        if r.nrows() != nh || r.ncols() != nh {
            return Err(Error::DimensionMismatch {
                context: "contraction initial covariance",
                expected: nh,
                got: r.nrows(),
            });
        }
        if !r.clone().cholesky().is_some() {
            return Err(Error::NotPositiveDefinite { context: name });
        }
    }
    let dt = store.sim_dt();
    let mut scratch = FilterScratch::for_model(model);
    let mut a = r0.clone();
    let mut b = r0_prime.clone();
    let mut out = Vec::new();
    let distance = |a: &DMatrix<f64>, b: &DMatrix<f64>| spectral_norm_sym(&(a - b));
    out.push((store.time(0), distance(&a, &b)));
    for k in 0..store.n_records() - 1 {
        let t = store.time(k);
        prepare_coefficients(model, t, store.obs_at(k, sample), &mut scratch)?;
        cov_step(a.as_mut_slice(), nh, dt, &mut scratch);
        // The second flow reuses the same prepared coefficients.
        cov_step(b.as_mut_slice(), nh, dt, &mut scratch);
        if (k + 1) % record_stride == 0 || k + 1 == store.n_records() - 1 {
            out.push((store.time(k + 1), distance(&a, &b)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::constant_model;
    use crate::rng::RngPolicy;
    use crate::sde::{simulate, Ensemble, SimOptions};

    /// Scalar model builder: observed block driftless with unit noise,
    /// hidden block du = (a1 u) dt + s_hid dW, coupling c into the observed
    /// drift.
    fn scalar_model(a1: f64, coupling: f64, s_hid: f64) -> ConditionalGaussianModel {
        constant_model(
            DVector::zeros(1),
            DMatrix::from_element(1, 1, coupling),
            DVector::zeros(1),
            DMatrix::from_element(1, 1, a1),
            DMatrix::identity(1, 1),
            DMatrix::from_element(1, 1, s_hid),
        )
        .unwrap()
    }

    fn drive(model: &ConditionalGaussianModel, t_end: f64, dt: f64, seed: u64) -> TrajectoryStore {
        let init = Ensemble::at_origin(1, model.n_obs(), model.n_hidden()).unwrap();
        let opts = SimOptions::new(dt).store_hidden(true);
        simulate(model, init, t_end, &opts, &RngPolicy::new(seed))
            .unwrap()
            .0
    }

    #[test]
    fn lyapunov_fixed_point_is_stationary() {
        // No coupling: dR = (-2R + 1) dt has fixed point R* = 0.5.
        let model = scalar_model(-1.0, 0.0, 1.0);
        let store = drive(&model, 2.0, 1e-3, 5);
        let init = FilterInit::Fixed(FilterState::new(
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 0.5),
        )
        .unwrap());
        let run = run_filters(&model, &store, &init, &FilterOptions::default()).unwrap();
        let last = run.state_at(run.n_records() - 1, 0);
        assert!((last.cov[(0, 0)] - 0.5).abs() < 1e-2 * 0.5);
    }

    #[test]
    fn scalar_riccati_converges_to_closed_form_root() {
        // a1 = 0, coupling c, hidden noise s: stationary R* solves
        // s^2 = c^2 R^2, so R* = s / |c|.
        let (c, s) = (2.0, 0.3);
        let model = scalar_model(0.0, c, s);
        let store = drive(&model, 10.0, 1e-3, 6);
        let init = FilterInit::Fixed(FilterState::new(
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap());
        let run = run_filters(&model, &store, &init, &FilterOptions::default()).unwrap();
        let last = run.state_at(run.n_records() - 1, 0);
        let want = s / c;
        assert!(
            (last.cov[(0, 0)] - want).abs() < 2e-3,
            "R = {}, want {}",
            last.cov[(0, 0)],
            want
        );
    }

    #[test]
    fn degenerate_noise_reproduces_hidden_path() {
        // S_hid = 0, R(0) = 0: posterior variance stays 0 and the mean is
        // the simulated hidden path.
        let model = constant_model(
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 1.5),
            DVector::from_element(1, 0.3),
            DMatrix::from_element(1, 1, -0.7),
            DMatrix::identity(1, 1),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let store = drive(&model, 1.0, 1e-3, 7);
        let init = FilterInit::FromStoredHidden {
            cov0: DMatrix::zeros(1, 1),
        };
        let run = run_filters(&model, &store, &init, &FilterOptions::default()).unwrap();
        assert_eq!(run.degenerate_count(), 1);
        let k = run.n_records() - 1;
        assert_eq!(run.cov_at(k, 0)[(0, 0)], 0.0);
        let dev = run.max_mean_path_deviation(&store).unwrap();
        assert!(dev <= 10.0 * 1e-3, "deviation {dev}");
    }

    #[test]
    fn identical_trajectories_give_identical_filters() {
        let model = scalar_model(-1.0, 1.0, 0.5);
        let single = drive(&model, 0.5, 1e-3, 8);
        let path: Vec<f64> = (0..single.n_records())
            .map(|k| single.obs_at(k, 0)[0])
            .collect();
        let store = TrajectoryStore::from_obs_paths(
            0.0,
            1e-3,
            1,
            &[path.clone(), path.clone(), path],
            None,
        )
        .unwrap();
        let init = FilterInit::Fixed(FilterState::origin(1));
        let run = run_filters(&model, &store, &init, &FilterOptions::default()).unwrap();
        for k in 0..run.n_records() {
            assert_eq!(run.mean_at(k, 0), run.mean_at(k, 1));
            assert_eq!(run.mean_at(k, 0), run.mean_at(k, 2));
            assert_eq!(run.cov_at(k, 0), run.cov_at(k, 2));
        }
    }

    #[test]
    fn contraction_of_identical_initial_covariances_is_zero() {
        let model = scalar_model(-1.0, 1.0, 1.0);
        let store = drive(&model, 1.0, 1e-3, 9);
        let r0 = DMatrix::from_element(1, 1, 0.3);
        let series =
            riccati_contraction_experiment(&model, &store, 0, &r0, &r0.clone(), 100).unwrap();
        for (_, d) in series {
            assert_eq!(d, 0.0);
        }
    }

    #[test]
    fn constant_coefficient_contraction_reaches_stationary_root() {
        // a1 = -1, coupling 1, both noises 1: 0 = -2R + 1 - R^2 gives
        // R* = sqrt(2) - 1; both flows converge there and the distance
        // decays geometrically.
        let model = scalar_model(-1.0, 1.0, 1.0);
        let store = drive(&model, 10.0, 1e-3, 10);
        let series = riccati_contraction_experiment(
            &model,
            &store,
            0,
            &DMatrix::from_element(1, 1, 1e-2),
            &DMatrix::from_element(1, 1, 1.0),
            1000,
        )
        .unwrap();
        let d0 = series[0].1;
        let dend = series.last().unwrap().1;
        assert!(dend < 1e-6 * d0, "no contraction: {dend} vs {d0}");
        // Fitted decay rate over the tail is strictly positive.
        let (t1, d1) = series[2];
        let (t2, d2) = series[4];
        let rate = (d1.ln() - d2.ln()) / (t2 - t1);
        assert!(rate > 0.0);

        // Both flows end at the stationary root.
        let init = FilterInit::Fixed(FilterState::origin(1));
        let run = run_filters(&model, &store, &init, &FilterOptions::default()).unwrap();
        let want = 2.0_f64.sqrt() - 1.0;
        let last = run.state_at(run.n_records() - 1, 0);
        assert!((last.cov[(0, 0)] - want).abs() < 2e-3);
    }

    #[test]
    fn covariance_stays_symmetric_and_psd_in_two_dims() {
        // 2-hidden-dimensional rotation plus damping; checks the eigenvalue
        // floor path.
        let rot = DMatrix::from_row_slice(2, 2, &[-0.5, 2.0, -2.0, -0.5]);
        let model = constant_model(
            DVector::zeros(1),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.4]),
            DVector::zeros(2),
            rot,
            DMatrix::identity(1, 1),
            DMatrix::from_diagonal(&DVector::from_vec(vec![0.3, 0.05])),
        )
        .unwrap();
        let store = drive(&model, 2.0, 1e-3, 11);
        let init = FilterInit::Fixed(FilterState::new(
            DVector::zeros(2),
            DMatrix::identity(2, 2) * 0.5,
        )
        .unwrap());
        let run = run_filters(&model, &store, &init, &FilterOptions::default()).unwrap();
        for k in 0..run.n_records() {
            let cov = run.cov_at(k, 0);
            assert_eq!(cov[(0, 1)], cov[(1, 0)]);
            let min = cov.symmetric_eigenvalues().min();
            assert!(min >= 0.0, "negative eigenvalue {min}");
        }
        assert!(run.worst_pre_floor_eig() > -10.0 * 1e-3);
    }

    #[test]
    fn singular_observation_noise_is_a_configuration_error() {
        let model = constant_model(
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1), // singular S_obs
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let mut state = FilterState::origin(1);
        let mut scratch = FilterScratch::for_model(&model);
        let err = filter_step(&model, 0.0, &[0.0], &[0.0], &mut state, 1e-3, &mut scratch);
        assert!(matches!(err, Err(Error::SingularObservationNoise { .. })));
    }
}
