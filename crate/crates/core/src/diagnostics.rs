//! Estimator quality metrics and the computable objects behind the error
//! bounds.
//!
//! The mean integrated squared error of a repeated estimator splits exactly
//! into a sampling term and a smoothing term,
//!
//! ```text
//! MISE = mean_j int |p_j - pbar|^2  +  int |pbar - p_ref|^2,
//! ```
//!
//! with `pbar` the pointwise mean over repeats; both parts are quadratures
//! on a shared grid, so the decomposition holds to machine precision by
//! construction. The sampling term of the hybrid estimator is bounded by
//! the plug-in expression `(1/L) E [prod_i (pi H c_i^2) det(pi R)]^{-1/2}`,
//! with the expectation replaced by the empirical mean over the filter
//! covariances of the run.
//!
//! The Gramian section integrates the matrix flow `dE/dt = a1 E` along a
//! stored observed trajectory together with the controllability and
//! observability Gramians, and evaluates the window-integral bounds that
//! sandwich the posterior covariance on the same realization.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::density::{Bandwidth, GridDensity, HybridMixture};
use crate::error::{Error, Result};
use crate::model::{ConditionalGaussianModel, StabilityConstants};
use crate::pipeline::{run_hybrid_pipeline, PipelineConfig};
use crate::rng::RngPolicy;
use crate::sde::{Ensemble, TrajectoryStore};

/// Empirical MISE of a repeated estimator against a fixed reference.
#[derive(Clone, Debug, Serialize)]
pub struct MiseReport {
    pub mise: f64,
    /// Smoothing part: `int |pbar - p_ref|^2`.
    pub bias: f64,
    /// Sampling part: `mean_j int |p_j - pbar|^2`.
    pub variance: f64,
    pub n_repeats: usize,
    /// Points per axis of the shared evaluation grid.
    pub grid_points: Vec<usize>,
    /// `int |p_j - p_ref|^2` per repeat; its mean equals `mise` exactly.
    pub per_repeat_sq_err: Vec<f64>,
    /// Standard error of the variance part over repeats.
    pub variance_se: f64,
}

/// Assembles the report from already-evaluated repeat estimates sharing the
/// reference grid.
pub fn mise_from_estimates(
    estimates: &[GridDensity],
    reference: &GridDensity,
) -> Result<MiseReport> {
    let n = estimates.len();
    if n < 2 {
        return Err(Error::config("MISE estimation needs at least two repeats"));
    }
    for e in estimates {
        if !e.same_grid(reference) {
            return Err(Error::config("estimate grid differs from the reference grid"));
        }
    }
    let n_points = reference.n_points();
    let mut mean_vals = vec![0.0; n_points];
    for e in estimates {
        for (m, v) in mean_vals.iter_mut().zip(e.values()) {
            *m += v;
        }
    }
    mean_vals.iter_mut().for_each(|m| *m /= n as f64);
    let pbar = GridDensity::from_values(reference.axes().to_vec(), mean_vals)?;

    let per_repeat_var: Vec<f64> = estimates
        .iter()
        .map(|e| pbar.l2_distance_sq(e))
        .collect::<Result<_>>()?;
    let variance = per_repeat_var.iter().sum::<f64>() / n as f64;
    let bias = pbar.l2_distance_sq(reference)?;
    let per_repeat_sq_err: Vec<f64> = estimates
        .iter()
        .map(|e| reference.l2_distance_sq(e))
        .collect::<Result<_>>()?;
    let var_mean = variance;
    let variance_se = (per_repeat_var
        .iter()
        .map(|v| (v - var_mean) * (v - var_mean))
        .sum::<f64>()
        / (n as f64 * (n - 1) as f64))
        .sqrt();
    Ok(MiseReport {
        mise: variance + bias,
        bias,
        variance,
        n_repeats: n,
        grid_points: reference.axes().iter().map(|a| a.len()).collect(),
        per_repeat_sq_err,
        variance_se,
    })
}

/// Builds `n_repeats` independent estimates through `factory` (which
/// receives the repeat index and must evaluate on the reference grid) and
/// assembles the MISE report.
pub fn estimate_mise(
    reference: &GridDensity,
    n_repeats: usize,
    mut factory: impl FnMut(u64) -> Result<GridDensity>,
) -> Result<MiseReport> {
    if n_repeats < 2 {
        return Err(Error::config("MISE estimation needs at least two repeats"));
    }
    let estimates: Vec<GridDensity> = (0..n_repeats as u64)
        .map(&mut factory)
        .collect::<Result<_>>()?;
    mise_from_estimates(&estimates, reference)
}

fn logdet_spd(m: &DMatrix<f64>, context: &'static str) -> Result<f64> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { context })?;
    Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Plug-in sampling bound of the hybrid estimator:
/// `(1/L) mean_i [prod_k (pi H c_k^2) det(pi R_i)]^{-1/2}`.
pub fn hybrid_variance_bound(
    hidden_covs: &[DMatrix<f64>],
    bandwidth: &Bandwidth,
) -> Result<f64> {
    if hidden_covs.is_empty() {
        return Err(Error::config("no covariances supplied"));
    }
    let l = hidden_covs.len() as f64;
    let log_kernel: f64 = (0..bandwidth.dim())
        .map(|i| (std::f64::consts::PI * bandwidth.variance(i)).ln())
        .sum();
    let mut mean = 0.0;
    for cov in hidden_covs {
        let nh = cov.nrows() as f64;
        let logdet = logdet_spd(cov, "variance bound needs nonsingular covariances (regularize degenerate posteriors first)")?;
        mean += (-0.5 * (log_kernel + nh * std::f64::consts::PI.ln() + logdet)).exp();
    }
    Ok(mean / l / l)
}

/// Sampling bound of the plain kernel estimator over all of its directions:
/// `(1/L) [prod_k (pi H c_k^2)]^{-1/2}`.
pub fn kde_variance_bound(bandwidth: &Bandwidth, l: usize) -> f64 {
    let log_kernel: f64 = (0..bandwidth.dim())
        .map(|i| (std::f64::consts::PI * bandwidth.variance(i)).ln())
        .sum();
    (-0.5 * log_kernel).exp() / l as f64
}

/// Marginal bound of the kernel-free hidden mixture:
/// `(1/L) mean_i det(pi R_i)^{-1/2}`.
pub fn marginal_hidden_variance_bound(hidden_covs: &[DMatrix<f64>]) -> Result<f64> {
    if hidden_covs.is_empty() {
        return Err(Error::config("no covariances supplied"));
    }
    let l = hidden_covs.len() as f64;
    let mut mean = 0.0;
    for cov in hidden_covs {
        let nh = cov.nrows() as f64;
        let logdet = logdet_spd(cov, "variance bound needs nonsingular covariances (regularize degenerate posteriors first)")?;
        mean += (-0.5 * (nh * std::f64::consts::PI.ln() + logdet)).exp();
    }
    Ok(mean / l / l)
}

/// Closed form of the direct-over-hybrid sampling-bound ratio at a shared
/// bandwidth: `H^{-nh/2} (prod c_hidden)^{-1} / mean_i det(R_i)^{-1/2}`.
/// `bandwidth_joint` covers observed directions first, then hidden.
pub fn variance_bound_ratio(
    bandwidth_joint: &Bandwidth,
    n_obs: usize,
    hidden_covs: &[DMatrix<f64>],
) -> Result<f64> {
    if hidden_covs.is_empty() {
        return Err(Error::config("no covariances supplied"));
    }
    let nh = bandwidth_joint.dim() - n_obs;
    let l = hidden_covs.len() as f64;
    let mut mean_det = 0.0;
    for cov in hidden_covs {
        let logdet = logdet_spd(cov, "variance bound needs nonsingular covariances (regularize degenerate posteriors first)")?;
        mean_det += (-0.5 * logdet).exp();
    }
    mean_det /= l;
    let h = bandwidth_joint.scale();
    let prod_c: f64 = (n_obs..n_obs + nh)
        .map(|i| bandwidth_joint.factors()[i])
        .product();
    Ok(h.powf(-(nh as f64) / 2.0) / prod_c / mean_det)
}

/// Leading smoothing-bound term
/// `(1 + delta)/4 H^2 int [sum_i c_i^2 d^2 p / d x_i^2]^2`, with the second
/// derivatives taken by central differences over the first `n_obs` axes of
/// the reference grid. The third-order remainder of the full bound is not
/// estimated.
pub fn bias_bound_report(
    reference: &GridDensity,
    bandwidth: &Bandwidth,
    n_obs: usize,
    delta: f64,
) -> Result<f64> {
    if n_obs == 0 || n_obs > reference.dims() {
        return Err(Error::config("n_obs out of range"));
    }
    if bandwidth.dim() < n_obs {
        return Err(Error::config("bandwidth has too few directions"));
    }
    if !(delta > 0.0) {
        return Err(Error::config("delta must be strictly positive"));
    }
    let axes = reference.axes();
    let mut spacing = Vec::with_capacity(n_obs);
    for axis in axes.iter().take(n_obs) {
        if axis.len() < 5 {
            return Err(Error::config(
                "grid too coarse for finite differences (need 5 points per axis)",
            ));
        }
        let h0 = axis[1] - axis[0];
        if axis
            .windows(2)
            .any(|w| ((w[1] - w[0]) - h0).abs() > 1e-9 * h0)
        {
            return Err(Error::config("finite differences need uniform axes"));
        }
        spacing.push(h0);
    }
    // Strides of the row-major value layout (last axis fastest).
    let dims = reference.dims();
    let mut strides = vec![1usize; dims];
    for d in (0..dims - 1).rev() {
        strides[d] = strides[d + 1] * axes[d + 1].len();
    }
    let values = reference.values();
    let mut index = vec![0usize; dims];
    let j = reference.quad(|k, _v| {
        // Decode the multi-index of k.
        let mut rem = k;
        for d in (0..dims).rev() {
            index[d] = rem % axes[d].len();
            rem /= axes[d].len();
        }
        let mut g = 0.0;
        for (d, h) in spacing.iter().enumerate() {
            let i = index[d];
            if i == 0 || i == axes[d].len() - 1 {
                continue; // boundary: density is negligible there by grid construction
            }
            let c2 = bandwidth.factors()[d] * bandwidth.factors()[d];
            let second =
                (values[k + strides[d]] - 2.0 * values[k] + values[k - strides[d]]) / (h * h);
            g += c2 * second;
        }
        g * g
    });
    let h = bandwidth.scale();
    Ok((1.0 + delta) / 4.0 * h * h * j)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::DegenerateFit("need matching xs/ys with >= 2 points".into()));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(Error::DegenerateFit("log-log fit needs positive data".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let xm = lx.iter().sum::<f64>() / lx.len() as f64;
    let ym = ly.iter().sum::<f64>() / ly.len() as f64;
    let sxx: f64 = lx.iter().map(|x| (x - xm) * (x - xm)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateFit("xs are all equal".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - xm) * (y - ym)).sum();
    Ok(sxy / sxx)
}

/// Estimators compared by the sample-size scaling experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum EstimatorKind {
    /// Hybrid joint estimator; bandwidth scale `~ L^{-2/(4+n_obs)}`.
    HybridJoint,
    /// Direct kernel estimator over the joint space; bandwidth scale
    /// `~ L^{-2/(4+n_obs+n_hidden)}`.
    DirectKde,
    /// Kernel-free hidden marginal mixture.
    MarginalHidden,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingEntry {
    pub l: usize,
    pub mise: f64,
    pub bias: f64,
    pub variance: f64,
    /// Standard error of the variance part over repeats.
    pub variance_se: f64,
    /// Plug-in sampling bound evaluated on the first repeat of this `L`.
    pub variance_bound: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingReport {
    pub estimator: EstimatorKind,
    pub entries: Vec<ScalingEntry>,
    /// Fitted slope of `ln MISE` vs `ln L`.
    pub slope: f64,
}

#[derive(Clone, Debug)]
pub struct ScalingConfig {
    pub ls: Vec<usize>,
    pub t_eval: f64,
    pub dt: f64,
    pub n_repeats: usize,
    /// Bandwidth prefactor multiplying the scaling rule.
    pub kappa: f64,
    /// Regularization for degenerate posterior covariances.
    pub delta: f64,
}

/// References for the scaling experiment: the joint density over
/// `(obs..., hidden...)` and the hidden marginal, both at `t_eval`.
pub struct ScalingReferences {
    pub joint: GridDensity,
    pub hidden: GridDensity,
}

/// Runs the three estimators across sample sizes with the theory's
/// bandwidth scaling, fitting one log-log slope each. Ensembles start at
/// the origin; each `(L, repeat)` pair draws an independent seed stream
/// from `policy`.
pub fn mise_scaling_experiment(
    model: &ConditionalGaussianModel,
    cfg: &ScalingConfig,
    references: &ScalingReferences,
    policy: &RngPolicy,
) -> Result<Vec<ScalingReport>> {
    if cfg.ls.len() < 4 {
        return Err(Error::DegenerateFit("need at least 4 sample sizes".into()));
    }
    let lmin = *cfg.ls.iter().min().unwrap() as f64;
    let lmax = *cfg.ls.iter().max().unwrap() as f64;
    if lmax / lmin < 10.0 {
        return Err(Error::DegenerateFit(
            "sample sizes must span at least a decade".into(),
        ));
    }
    if cfg.n_repeats < 2 {
        return Err(Error::config("need at least two repeats"));
    }
    let no = model.n_obs();
    let nh = model.n_hidden();
    let n_tot = no + nh;

    let kinds = [
        EstimatorKind::HybridJoint,
        EstimatorKind::DirectKde,
        EstimatorKind::MarginalHidden,
    ];
    let mut per_kind: Vec<Vec<ScalingEntry>> = vec![Vec::new(); kinds.len()];

    for (li, &l) in cfg.ls.iter().enumerate() {
        let mut estimates: Vec<Vec<GridDensity>> = vec![Vec::new(); kinds.len()];
        let mut first_bounds = [0.0f64; 3];
        for rep in 0..cfg.n_repeats {
            let run_policy = policy.derived(((li as u64) << 32) | rep as u64);
            let init = Ensemble::at_origin(l, no, nh)?;
            let pipe_cfg = PipelineConfig::new(cfg.dt, vec![cfg.t_eval], nh);
            let out = run_hybrid_pipeline(model, &init, &pipe_cfg, &run_policy)?;
            let snap = &out.snapshots[0];

            let std_of = |data: &[f64], dim: usize| -> Vec<f64> {
                let n = data.len() / dim;
                (0..dim)
                    .map(|c| {
                        let mean =
                            data.iter().skip(c).step_by(dim).sum::<f64>() / n as f64;
                        let var = data
                            .iter()
                            .skip(c)
                            .step_by(dim)
                            .map(|x| (x - mean) * (x - mean))
                            .sum::<f64>()
                            / (n - 1) as f64;
                        var.sqrt().max(1e-12)
                    })
                    .collect()
            };
            let bw_obs =
                Bandwidth::scaling(l, no, cfg.kappa, std_of(&snap.obs, no))?;
            let hybrid =
                HybridMixture::build_hybrid(&snap.obs, no, &snap.states, &bw_obs, cfg.delta)?;

            let joint = snap.joint_flat(no, nh);
            let bw_joint = Bandwidth::scaling(l, n_tot, cfg.kappa, std_of(&joint, n_tot))?;
            let direct = HybridMixture::build_direct_kde(&joint, n_tot, &bw_joint)?;

            let marginal = hybrid.marginal_hidden()?;

            if rep == 0 {
                let covs = hybrid.hidden_covs();
                first_bounds[0] = hybrid_variance_bound(&covs, &bw_obs)?;
                first_bounds[1] = kde_variance_bound(&bw_joint, l);
                first_bounds[2] = marginal_hidden_variance_bound(&covs)?;
            }
            estimates[0].push(hybrid.grid_density(references.joint.axes().to_vec())?);
            estimates[1].push(direct.grid_density(references.joint.axes().to_vec())?);
            estimates[2].push(marginal.grid_density(references.hidden.axes().to_vec())?);
        }
        for (k, kind_estimates) in estimates.iter().enumerate() {
            let reference = if kinds[k] == EstimatorKind::MarginalHidden {
                &references.hidden
            } else {
                &references.joint
            };
            let report = mise_from_estimates(kind_estimates, reference)?;
            per_kind[k].push(ScalingEntry {
                l,
                mise: report.mise,
                bias: report.bias,
                variance: report.variance,
                variance_se: report.variance_se,
                variance_bound: first_bounds[k],
            });
        }
    }

    kinds
        .iter()
        .zip(per_kind)
        .map(|(&estimator, entries)| {
            let ls: Vec<f64> = entries.iter().map(|e| e.l as f64).collect();
            let mises: Vec<f64> = entries.iter().map(|e| e.mise).collect();
            Ok(ScalingReport {
                estimator,
                entries,
                slope: fit_loglog_slope(&ls, &mises)?,
            })
        })
        .collect()
}

/// Controllability/observability Gramians of the hidden flow along one
/// stored trajectory, with the flow map and its conditioning.
#[derive(Clone, Debug)]
pub struct GramianReport {
    pub s: f64,
    pub t: f64,
    pub sample: usize,
    /// `E_{s,t}`, the flow generated by the hidden feedback matrix.
    pub flow: DMatrix<f64>,
    pub flow_condition_number: f64,
    pub controllability: DMatrix<f64>,
    pub observability: DMatrix<f64>,
}

fn record_index(store: &TrajectoryStore, t: f64, what: &str) -> Result<usize> {
    let dt = store.record_dt();
    let k = ((t - store.time(0)) / dt).round() as isize;
    if k < 0 || k as usize >= store.n_records() {
        return Err(Error::config(format!("{what} = {t} outside the stored range")));
    }
    if (store.time(k as usize) - t).abs() > 1e-9 * dt.max(1.0) {
        return Err(Error::config(format!("{what} = {t} not on the record grid")));
    }
    Ok(k as usize)
}

/// Second-order one-step propagator `I + dt a1 + dt^2/2 a1^2`.
fn step_propagator(a1: &DMatrix<f64>, dt: f64) -> DMatrix<f64> {
    let n = a1.nrows();
    DMatrix::identity(n, n) + a1 * dt + a1 * a1 * (0.5 * dt * dt)
}

/// Integrates the matrix flow `dE/dt = a1(t, u_obs(t)) E` from `s` to `t`
/// along one sample's stored trajectory.
pub fn matrix_flow(
    model: &ConditionalGaussianModel,
    store: &TrajectoryStore,
    sample: usize,
    s: f64,
    t: f64,
) -> Result<DMatrix<f64>> {
    let ks = record_index(store, s, "s")?;
    let kt = record_index(store, t, "t")?;
    if kt < ks {
        return Err(Error::config("t must not precede s"));
    }
    let nh = model.n_hidden();
    let dt = store.record_dt();
    let mut flow = DMatrix::identity(nh, nh);
    for k in ks..kt {
        let a1 = model.hidden_feedback_at(store.time(k), store.obs_at(k, sample));
        flow = step_propagator(&a1, dt) * flow;
    }
    Ok(flow)
}

/// Gramians over `[s, t]` along one sample's trajectory:
///
/// ```text
/// C_{s,t} = int_s^t E_{r,t} S_hid S_hid^T E_{r,t}^T dr,
/// O_{s,t} = int_s^t (E_{r,t}^T)^{-1} A1^T (S S^T)^{-1} A1 E_{r,t}^{-1} dr,
/// ```
///
/// accumulated with the one-step propagators and trapezoidal weights.
pub fn gramians(
    model: &ConditionalGaussianModel,
    store: &TrajectoryStore,
    sample: usize,
    s: f64,
    t: f64,
) -> Result<GramianReport> {
    let ks = record_index(store, s, "s")?;
    let kt = record_index(store, t, "t")?;
    if kt <= ks {
        return Err(Error::config("need t > s"));
    }
    let nh = model.n_hidden();
    let dt = store.record_dt();

    let integrands_at = |k: usize| -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
        let time = store.time(k);
        let u = store.obs_at(k, sample);
        let a1 = model.hidden_feedback_at(time, u);
        let s_hid = model.hidden_noise_at(time, u);
        let q = &s_hid * s_hid.transpose();
        let coupling = model.obs_coupling_at(time, u);
        let s_obs = model.obs_noise_at(time, u);
        let ss = &s_obs * s_obs.transpose();
        let chol = ss
            .cholesky()
            .ok_or(Error::SingularObservationNoise { t: time })?;
        let w = coupling.transpose() * chol.solve(&coupling);
        Ok((a1, q, w))
    };

    let mut flow = DMatrix::identity(nh, nh);
    let mut ctrl = DMatrix::zeros(nh, nh);
    let mut obsv = DMatrix::zeros(nh, nh);
    let (mut a1, mut q, mut w) = integrands_at(ks)?;
    for k in ks..kt {
        let m = step_propagator(&a1, dt);
        let m_inv = m.clone().try_inverse().ok_or(Error::DegenerateFit(
            "one-step propagator not invertible (dt too large for the feedback)".into(),
        ))?;
        let (a1_next, q_next, w_next) = integrands_at(k + 1)?;
        // Trapezoid: transport the left-end integrand through the step and
        // average with the right-end integrand.
        ctrl = &m * ctrl * m.transpose() + (&m * &q * m.transpose() + &q_next) * (0.5 * dt);
        obsv = m_inv.transpose() * obsv * &m_inv
            + (m_inv.transpose() * &w * &m_inv + &w_next) * (0.5 * dt);
        flow = &m * flow;
        a1 = a1_next;
        q = q_next;
        w = w_next;
    }
    let svd = flow.clone().svd(false, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let smin = svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    Ok(GramianReport {
        s,
        t,
        sample,
        flow,
        flow_condition_number: smax / smin,
        controllability: ctrl,
        observability: obsv,
    })
}

/// Window integrals feeding the posterior covariance bounds, computed from
/// a stored trajectory by trapezoid quadrature over `[t - v, t]`.
fn window_integral(
    store: &TrajectoryStore,
    t: f64,
    v: f64,
    f: impl Fn(usize) -> Result<f64>,
) -> Result<f64> {
    let kt = record_index(store, t, "t")?;
    let ks = record_index(store, t - v, "t - v")?;
    if kt <= ks {
        return Err(Error::config("window is empty"));
    }
    let dt = store.record_dt();
    let mut sum = 0.0;
    for k in ks..=kt {
        let weight = if k == ks || k == kt { 0.5 } else { 1.0 };
        sum += weight * f(k)?;
    }
    Ok(sum * dt)
}

/// Lower-bound scalar `h` from an already-computed window integral
/// `int_{t-v}^t |u_obs(r)|^{2m} dr`. The derivation assumes a hidden
/// dimension of at least two; for scalar hidden blocks the same evaluation
/// is reported, outside that stated hypothesis.
///
///
/// ```text
/// h = v^2 s2+_hid / s2-_hid D_c^6 (v + I_1) + D_c / (v s2-_hid),
/// ```
///
/// with `R(t) >= h^{-1} I` on that realization. `None` (bound vacuous) when
/// the hidden noise floor is zero or no finite controllability constant
/// exists.
pub fn lower_bound_from_integral(
    constants: &StabilityConstants,
    path_integral: f64,
) -> Option<f64> {
    let dc = constants.controllability_constant?;
    if constants.hidden_noise_min_sq <= 0.0 {
        return None;
    }
    let v = constants.window;
    Some(
        v * v * constants.hidden_noise_max_sq / constants.hidden_noise_min_sq
            * dc.powi(6)
            * (v + path_integral)
            + dc / (v * constants.hidden_noise_min_sq),
    )
}

/// Lower-bound scalar `h` for the posterior covariance along a stored
/// trajectory (trapezoid quadrature over `[t - v, t]`).
pub fn r2_lower_bound(
    constants: &StabilityConstants,
    store: &TrajectoryStore,
    sample: usize,
    t: f64,
) -> Result<Option<f64>> {
    if constants.controllability_constant.is_none()
        || constants.hidden_noise_min_sq <= 0.0
    {
        return Ok(None);
    }
    let v = constants.window;
    let m = constants.growth_exponent;
    let path_integral = window_integral(store, t, v, |k| {
        let u = store.obs_at(k, sample);
        Ok(u.iter().map(|x| x * x).sum::<f64>().powf(m))
    })?;
    Ok(lower_bound_from_integral(constants, path_integral))
}

/// Upper-bound scalar `g` from the window integrals
/// `I_1 = int |u_obs|^{2m}` and `I_A = int sigma_A^2` (smallest eigenvalue
/// of the observation information matrix). Same hidden-dimension caveat as
/// the lower bound:
///
/// ```text
/// g = D_c^2 (v + I_1) + v D_c^5 s2+_hid (v + I_1)^2 I_A^{-2},
/// ```
///
/// with `|R(t)| <= g` on that realization. `None` when the bound is vacuous
/// (no information over the window, or no finite controllability constant).
pub fn upper_bound_from_integrals(
    constants: &StabilityConstants,
    path_integral: f64,
    info_integral: f64,
) -> Option<f64> {
    let dc = constants.controllability_constant?;
    if info_integral <= 0.0 {
        return None;
    }
    let v = constants.window;
    Some(
        dc * dc * (v + path_integral)
            + v * dc.powi(5) * constants.hidden_noise_max_sq * (v + path_integral).powi(2)
                / (info_integral * info_integral),
    )
}

/// Upper-bound scalar `g` for the posterior covariance norm along a stored
/// trajectory.
pub fn r2_upper_bound(
    model: &ConditionalGaussianModel,
    constants: &StabilityConstants,
    store: &TrajectoryStore,
    sample: usize,
    t: f64,
) -> Result<Option<f64>> {
    if constants.controllability_constant.is_none() {
        return Ok(None);
    }
    let v = constants.window;
    let m = constants.growth_exponent;
    let path_integral = window_integral(store, t, v, |k| {
        let u = store.obs_at(k, sample);
        Ok(u.iter().map(|x| x * x).sum::<f64>().powf(m))
    })?;
    let info_integral = window_integral(store, t, v, |k| {
        model.obs_information_min_eig(store.time(k), store.obs_at(k, sample))
    })?;
    Ok(upper_bound_from_integrals(constants, path_integral, info_integral))
}
