//! Conditional Gaussian system definitions and structural checks.
//!
//! A conditional Gaussian system splits the state into observed variables
//! `u_obs` (dimension `n_obs`) and hidden variables `u_hid` (dimension
//! `n_hidden`) with dynamics
//!
//! ```text
//! du_obs = [A0(t, u_obs) + A1(t, u_obs) u_hid] dt + S_obs(t, u_obs) dW_obs,
//! du_hid = [a0(t, u_obs) + a1(t, u_obs) u_hid] dt + S_hid(t, u_obs) dW_hid,
//! ```
//!
//! i.e. the hidden block is linear in `u_hid` given the observed path, so
//! the conditional law of `u_hid` given `u_obs(s <= t)` is exactly Gaussian.
//! The coefficient evaluators here are named by role: `obs_drift` (A0),
//! `obs_coupling` (A1), `hidden_drift` (a0), `hidden_feedback` (a1),
//! `obs_noise` (S_obs) and `hidden_noise` (S_hid).
//!
//! [`EnergyConservingModel`] is the quadratic turbulence form
//! `du = [-L u + B(u, u) + F] dt + S dW` with `u . B(u, u) = 0`, decomposed
//! into observed/hidden blocks; it converts into a
//! [`ConditionalGaussianModel`] and carries enough structure to compute the
//! stability/controllability constants used by the diagnostics.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{RngPolicy, StreamKind};

/// Coefficient evaluator writing a vector into `out` (length fixed by the
/// model dimensions). Evaluators must be pure: identical `(t, u_obs)` must
/// produce bitwise-identical output, and they must be safe to call from
/// multiple threads at once.
pub type VectorFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// Coefficient evaluator writing a column-major matrix into `out`.
pub type MatrixFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// Coefficient evaluators of a conditional Gaussian system.
pub struct Coefficients {
    /// A0: `(t, u_obs) -> n_obs` vector.
    pub obs_drift: VectorFn,
    /// A1: `(t, u_obs) -> n_obs x n_hidden` matrix (column-major).
    pub obs_coupling: MatrixFn,
    /// a0: `(t, u_obs) -> n_hidden` vector.
    pub hidden_drift: VectorFn,
    /// a1: `(t, u_obs) -> n_hidden x n_hidden` matrix (column-major).
    pub hidden_feedback: MatrixFn,
    /// S_obs: `(t, u_obs) -> n_obs x n_obs` matrix (column-major).
    /// `S_obs S_obs^T` must be invertible wherever it is evaluated.
    pub obs_noise: MatrixFn,
    /// S_hid: `(t, u_obs) -> n_hidden x n_hidden` matrix (column-major).
    pub hidden_noise: MatrixFn,
}

/// A conditional Gaussian system. Immutable after construction and safe to
/// share across threads; the evaluators are re-entrant.
pub struct ConditionalGaussianModel {
    n_obs: usize,
    n_hidden: usize,
    coeff: Coefficients,
    obs_names: Vec<String>,
    hidden_names: Vec<String>,
}

impl ConditionalGaussianModel {
    pub fn new(n_obs: usize, n_hidden: usize, coeff: Coefficients) -> Result<Self> {
        if n_obs == 0 || n_hidden == 0 {
            return Err(Error::config("n_obs and n_hidden must be positive"));
        }
        Ok(ConditionalGaussianModel {
            n_obs,
            n_hidden,
            coeff,
            obs_names: (0..n_obs).map(|i| format!("x{}", i + 1)).collect(),
            hidden_names: (0..n_hidden).map(|i| format!("y{}", i + 1)).collect(),
        })
    }

    pub fn with_names(
        mut self,
        obs_names: Vec<String>,
        hidden_names: Vec<String>,
    ) -> Result<Self> {
        if obs_names.len() != self.n_obs || hidden_names.len() != self.n_hidden {
            return Err(Error::config("variable name lists must match dimensions"));
        }
        self.obs_names = obs_names;
        self.hidden_names = hidden_names;
        Ok(self)
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn n_hidden(&self) -> usize {
        self.n_hidden
    }

    pub fn obs_names(&self) -> &[String] {
        &self.obs_names
    }

    pub fn hidden_names(&self) -> &[String] {
        &self.hidden_names
    }

    // In-place evaluation, used by the integrator and filter hot loops.

    pub fn obs_drift_into(&self, t: f64, u_obs: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n_obs);
        (self.coeff.obs_drift)(t, u_obs, out);
    }

    pub fn obs_coupling_into(&self, t: f64, u_obs: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n_obs * self.n_hidden);
        (self.coeff.obs_coupling)(t, u_obs, out);
    }

    pub fn hidden_drift_into(&self, t: f64, u_obs: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n_hidden);
        (self.coeff.hidden_drift)(t, u_obs, out);
    }

    pub fn hidden_feedback_into(&self, t: f64, u_obs: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n_hidden * self.n_hidden);
        (self.coeff.hidden_feedback)(t, u_obs, out);
    }

    pub fn obs_noise_into(&self, t: f64, u_obs: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n_obs * self.n_obs);
        (self.coeff.obs_noise)(t, u_obs, out);
    }

    pub fn hidden_noise_into(&self, t: f64, u_obs: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n_hidden * self.n_hidden);
        (self.coeff.hidden_noise)(t, u_obs, out);
    }

    // Allocating accessors for diagnostics and tests.

    pub fn obs_drift_at(&self, t: f64, u_obs: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_obs);
        self.obs_drift_into(t, u_obs, out.as_mut_slice());
        out
    }

    pub fn obs_coupling_at(&self, t: f64, u_obs: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_obs, self.n_hidden);
        self.obs_coupling_into(t, u_obs, out.as_mut_slice());
        out
    }

    pub fn hidden_drift_at(&self, t: f64, u_obs: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_hidden);
        self.hidden_drift_into(t, u_obs, out.as_mut_slice());
        out
    }

    pub fn hidden_feedback_at(&self, t: f64, u_obs: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_hidden, self.n_hidden);
        self.hidden_feedback_into(t, u_obs, out.as_mut_slice());
        out
    }

    pub fn obs_noise_at(&self, t: f64, u_obs: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_obs, self.n_obs);
        self.obs_noise_into(t, u_obs, out.as_mut_slice());
        out
    }

    pub fn hidden_noise_at(&self, t: f64, u_obs: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_hidden, self.n_hidden);
        self.hidden_noise_into(t, u_obs, out.as_mut_slice());
        out
    }

    /// Full drift `(du_obs, du_hid)/dt` at a joint state; convenience for
    /// structural checks.
    pub fn drift_at(&self, t: f64, u_obs: &[f64], u_hid: &[f64]) -> (DVector<f64>, DVector<f64>) {
        let a0 = self.obs_drift_at(t, u_obs);
        let a1 = self.obs_coupling_at(t, u_obs);
        let h0 = self.hidden_drift_at(t, u_obs);
        let h1 = self.hidden_feedback_at(t, u_obs);
        let uh = DVector::from_column_slice(u_hid);
        (a0 + a1 * &uh, h0 + h1 * uh)
    }

    /// Smallest eigenvalue of `A1^T (S_obs S_obs^T)^{-1} A1`, the
    /// observation-information rate entering the posterior covariance
    /// bounds. Errors if the observation noise covariance is singular.
    pub fn obs_information_min_eig(&self, t: f64, u_obs: &[f64]) -> Result<f64> {
        let a1 = self.obs_coupling_at(t, u_obs);
        let s = self.obs_noise_at(t, u_obs);
        let ss = &s * s.transpose();
        let chol = ss
            .cholesky()
            .ok_or(Error::SingularObservationNoise { t })?;
        let info = a1.transpose() * chol.solve(&a1);
        let sym = (&info + info.transpose()) * 0.5;
        Ok(sym
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min))
    }
}

/// Constant-coefficient helper used all over the tests: builds a model from
/// fixed matrices.
pub fn constant_model(
    a0: DVector<f64>,
    a1: DMatrix<f64>,
    h0: DVector<f64>,
    h1: DMatrix<f64>,
    s_obs: DMatrix<f64>,
    s_hid: DMatrix<f64>,
) -> Result<ConditionalGaussianModel> {
    let n_obs = a0.len();
    let n_hidden = h0.len();
    if a1.nrows() != n_obs || a1.ncols() != n_hidden {
        return Err(Error::config("obs_coupling shape mismatch"));
    }
    if h1.nrows() != n_hidden || h1.ncols() != n_hidden {
        return Err(Error::config("hidden_feedback shape mismatch"));
    }
    if s_obs.nrows() != n_obs || s_obs.ncols() != n_obs {
        return Err(Error::config("obs_noise shape mismatch"));
    }
    if s_hid.nrows() != n_hidden || s_hid.ncols() != n_hidden {
        return Err(Error::config("hidden_noise shape mismatch"));
    }
    let fill_vec = |v: DVector<f64>| -> VectorFn {
        Arc::new(move |_t, _u, out: &mut [f64]| out.copy_from_slice(v.as_slice()))
    };
    let fill_mat = |m: DMatrix<f64>| -> MatrixFn {
        Arc::new(move |_t, _u, out: &mut [f64]| out.copy_from_slice(m.as_slice()))
    };
    ConditionalGaussianModel::new(
        n_obs,
        n_hidden,
        Coefficients {
            obs_drift: fill_vec(a0),
            obs_coupling: fill_mat(a1),
            hidden_drift: fill_vec(h0),
            hidden_feedback: fill_mat(h1),
            obs_noise: fill_mat(s_obs),
            hidden_noise: fill_mat(s_hid),
        },
    )
}

/// Quadratic form evaluator `u_obs -> B(u_obs, u_obs)` (vector output).
pub type QuadFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Linear-in-hidden quadratic evaluator `u_obs -> B(u_obs)` (matrix output,
/// column-major).
pub type QuadMatFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Turbulence model with energy-conserving quadratic nonlinearity,
/// decomposed into observed/hidden blocks:
///
/// ```text
/// du_obs = (-L_oo u_obs + B_oo(u_obs, u_obs) + F_obs) dt
///        + (-L_oh + B_oh(u_obs)) u_hid dt + S_obs dW_obs,
/// du_hid = (-L_ho u_obs + B_ho(u_obs, u_obs) + F_hid) dt
///        + (-L_hh + B_hh(u_obs)) u_hid dt + S_hid dW_hid.
/// ```
///
/// Energy conservation of the full quadratic term requires
/// `u_obs . B_oo = 0`, `u_hid . B_hh(u_obs) u_hid = 0` and
/// `u_obs . B_oh(u_obs) u_hid + u_hid . B_ho(u_obs, u_obs) = 0`;
/// [`check_energy_conservation`] probes these identities numerically.
#[derive(Clone)]
pub struct EnergyConservingModel {
    pub damping_oo: DMatrix<f64>,
    pub damping_oh: DMatrix<f64>,
    pub damping_ho: DMatrix<f64>,
    pub damping_hh: DMatrix<f64>,
    pub quad_oo: QuadFn,
    pub quad_oh: QuadMatFn,
    pub quad_ho: QuadFn,
    pub quad_hh: QuadMatFn,
    pub forcing_obs: DVector<f64>,
    pub forcing_hidden: DVector<f64>,
    pub obs_noise: DMatrix<f64>,
    pub hidden_noise: DMatrix<f64>,
}

impl EnergyConservingModel {
    pub fn n_obs(&self) -> usize {
        self.damping_oo.nrows()
    }

    pub fn n_hidden(&self) -> usize {
        self.damping_hh.nrows()
    }

    /// Full damping matrix in `(u_obs, u_hid)` block order.
    pub fn damping_matrix(&self) -> DMatrix<f64> {
        let no = self.n_obs();
        let nh = self.n_hidden();
        let mut full = DMatrix::zeros(no + nh, no + nh);
        full.view_mut((0, 0), (no, no)).copy_from(&self.damping_oo);
        full.view_mut((0, no), (no, nh)).copy_from(&self.damping_oh);
        full.view_mut((no, 0), (nh, no)).copy_from(&self.damping_ho);
        full.view_mut((no, no), (nh, nh))
            .copy_from(&self.damping_hh);
        full
    }

    /// Assembles the conditional Gaussian coefficients from the blocks.
    pub fn to_model(&self) -> Result<ConditionalGaussianModel> {
        let no = self.n_obs();
        let nh = self.n_hidden();
        let m = self.clone();
        let obs_drift: VectorFn = {
            let m = m.clone();
            Arc::new(move |_t, u, out: &mut [f64]| {
                (m.quad_oo)(u, out);
                for r in 0..m.n_obs() {
                    let mut acc = out[r] + m.forcing_obs[r];
                    for c in 0..m.n_obs() {
                        acc -= m.damping_oo[(r, c)] * u[c];
                    }
                    out[r] = acc;
                }
            })
        };
        let obs_coupling: MatrixFn = {
            let m = m.clone();
            Arc::new(move |_t, u, out: &mut [f64]| {
                (m.quad_oh)(u, out);
                let (no, nh) = (m.n_obs(), m.n_hidden());
                for c in 0..nh {
                    for r in 0..no {
                        out[c * no + r] -= m.damping_oh[(r, c)];
                    }
                }
            })
        };
        let hidden_drift: VectorFn = {
            let m = m.clone();
            Arc::new(move |_t, u, out: &mut [f64]| {
                (m.quad_ho)(u, out);
                for r in 0..m.n_hidden() {
                    let mut acc = out[r] + m.forcing_hidden[r];
                    for c in 0..m.n_obs() {
                        acc -= m.damping_ho[(r, c)] * u[c];
                    }
                    out[r] = acc;
                }
            })
        };
        let hidden_feedback: MatrixFn = {
            let m = m.clone();
            Arc::new(move |_t, u, out: &mut [f64]| {
                (m.quad_hh)(u, out);
                let nh = m.n_hidden();
                for c in 0..nh {
                    for r in 0..nh {
                        out[c * nh + r] -= m.damping_hh[(r, c)];
                    }
                }
            })
        };
        let obs_noise: MatrixFn = {
            let s = m.obs_noise.clone();
            Arc::new(move |_t, _u, out: &mut [f64]| out.copy_from_slice(s.as_slice()))
        };
        let hidden_noise: MatrixFn = {
            let s = m.hidden_noise.clone();
            Arc::new(move |_t, _u, out: &mut [f64]| out.copy_from_slice(s.as_slice()))
        };
        ConditionalGaussianModel::new(
            no,
            nh,
            Coefficients {
                obs_drift,
                obs_coupling,
                hidden_drift,
                hidden_feedback,
                obs_noise,
                hidden_noise,
            },
        )
    }

    /// Stability and controllability constants of the energy-conserving
    /// form, evaluated numerically from the blocks. The coupling growth
    /// constant (smallest `k` with `|B_hh(u_obs)| <= k |u_obs|`) is
    /// estimated by probing random directions.
    pub fn stability_constants(&self, n_probe: usize, seed: u64) -> StabilityConstants {
        let no = self.n_obs();
        let nh = self.n_hidden();
        let full = self.damping_matrix();
        let sym = (&full + full.transpose()) * 0.5;
        let eigs = sym.symmetric_eigenvalues();
        let damping_min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
        let damping_max = eigs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

        let policy = RngPolicy::new(seed);
        let mut rng = policy.stream(StreamKind::Probe, 0);
        let mut coupling_growth: f64 = 0.0;
        let mut buf = vec![0.0; nh * nh];
        for _ in 0..n_probe.max(1) {
            let u: Vec<f64> = (0..no).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm_u = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm_u == 0.0 {
                continue;
            }
            (self.quad_hh)(&u, &mut buf);
            let b = DMatrix::from_column_slice(nh, nh, &buf);
            let spec = (&b * b.transpose())
                .symmetric_eigenvalues()
                .iter()
                .cloned()
                .fold(0.0_f64, f64::max)
                .sqrt();
            coupling_growth = coupling_growth.max(spec / norm_u);
        }

        let min_max_sq = |s: &DMatrix<f64>| {
            let ss = s * s.transpose();
            let e = ss.symmetric_eigenvalues();
            (
                e.iter().cloned().fold(f64::INFINITY, f64::min),
                e.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            )
        };
        let (obs_noise_min_sq, _) = min_max_sq(&self.obs_noise);
        let (hidden_noise_min_sq, hidden_noise_max_sq) = min_max_sq(&self.hidden_noise);

        let forcing_sq =
            self.forcing_obs.norm_squared() + self.forcing_hidden.norm_squared();
        let (dissipation_rate, dissipation_offset) = if damping_min > 0.0 {
            (0.5 * damping_min, forcing_sq / (2.0 * damping_min))
        } else {
            (0.0, f64::INFINITY)
        };

        // D_c = max{1, 2 l+ / (s2-,hid (1 - e^{-2 l+})), s2+,hid / (2 l-),
        //           2 l+^2 / s2-,obs, 2 kB^2 / s2-,obs, e^{2 l+}}
        let controllability_constant = if damping_min > 0.0
            && hidden_noise_min_sq > 0.0
            && obs_noise_min_sq > 0.0
            && damping_max > 0.0
        {
            let lp = damping_max;
            let candidates = [
                1.0,
                2.0 * lp / (hidden_noise_min_sq * (1.0 - (-2.0 * lp).exp())),
                hidden_noise_max_sq / (2.0 * damping_min),
                2.0 * lp * lp / obs_noise_min_sq,
                2.0 * coupling_growth * coupling_growth / obs_noise_min_sq,
                (2.0 * lp).exp(),
            ];
            Some(candidates.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        } else {
            None
        };

        StabilityConstants {
            damping_min,
            damping_max,
            coupling_growth,
            obs_noise_min_sq,
            hidden_noise_min_sq,
            hidden_noise_max_sq,
            dissipation_rate,
            dissipation_offset,
            controllability_constant,
            window: 1.0,
            growth_exponent: 1.0,
        }
    }
}

/// Constants of the energy-conserving stochastic flow: dissipation rate and
/// offset for the energy inequality, and the controllability constant (with
/// window `v = 1` and growth exponent `m = 1`) entering the posterior
/// covariance bounds. `controllability_constant` is `None` when the
/// hypotheses fail (no uniform damping or degenerate noise).
#[derive(Clone, Debug, Serialize)]
pub struct StabilityConstants {
    pub damping_min: f64,
    pub damping_max: f64,
    pub coupling_growth: f64,
    pub obs_noise_min_sq: f64,
    pub hidden_noise_min_sq: f64,
    pub hidden_noise_max_sq: f64,
    pub dissipation_rate: f64,
    pub dissipation_offset: f64,
    pub controllability_constant: Option<f64>,
    pub window: f64,
    pub growth_exponent: f64,
}

/// Result of probing the three energy-conservation identities at random
/// states.
#[derive(Clone, Debug, Serialize)]
pub struct EnergyReport {
    /// Largest absolute violation over all probes and identities.
    pub max_violation: f64,
    /// Largest violation of each identity separately:
    /// `u_obs . B_oo`, `u_hid . B_hh u_hid`, `u_obs . B_oh u_hid + u_hid . B_ho`.
    pub per_identity: [f64; 3],
    pub n_points: usize,
}

/// Evaluates the energy-conservation identities at `n_points` pseudorandom
/// standard-normal states. Report-only; nothing is rejected.
pub fn check_energy_conservation(
    model: &EnergyConservingModel,
    n_points: usize,
    seed: u64,
) -> Result<EnergyReport> {
    if n_points == 0 {
        return Err(Error::config("n_points must be at least 1"));
    }
    let no = model.n_obs();
    let nh = model.n_hidden();
    let policy = RngPolicy::new(seed);
    let mut rng = policy.stream(StreamKind::Probe, 1);
    let mut per_identity = [0.0_f64; 3];
    let mut vec_o = vec![0.0; no];
    let mut vec_h = vec![0.0; nh];
    let mut mat_oh = vec![0.0; no * nh];
    let mut mat_hh = vec![0.0; nh * nh];
    for _ in 0..n_points {
        let uo: Vec<f64> = (0..no).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let uh: Vec<f64> = (0..nh).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();

        (model.quad_oo)(&uo, &mut vec_o);
        let v1: f64 = uo.iter().zip(&vec_o).map(|(a, b)| a * b).sum();

        (model.quad_hh)(&uo, &mut mat_hh);
        let mut v2 = 0.0;
        for c in 0..nh {
            for r in 0..nh {
                v2 += uh[r] * mat_hh[c * nh + r] * uh[c];
            }
        }

        (model.quad_oh)(&uo, &mut mat_oh);
        let mut v3 = 0.0;
        for c in 0..nh {
            for r in 0..no {
                v3 += uo[r] * mat_oh[c * no + r] * uh[c];
            }
        }
        (model.quad_ho)(&uo, &mut vec_h);
        v3 += uh.iter().zip(&vec_h).map(|(a, b)| a * b).sum::<f64>();

        per_identity[0] = per_identity[0].max(v1.abs());
        per_identity[1] = per_identity[1].max(v2.abs());
        per_identity[2] = per_identity[2].max(v3.abs());
    }
    Ok(EnergyReport {
        max_violation: per_identity.iter().cloned().fold(0.0, f64::max),
        per_identity,
        n_points,
    })
}

/// Empirical dissipativity fit: the tightest `(rho, d_e)` with
/// `drift(u) . u <= -rho |u|^2 + d_e` over the probed states.
#[derive(Clone, Debug, Serialize)]
pub struct DissipativityReport {
    pub rho_hat: f64,
    pub de_hat: f64,
    pub satisfied: bool,
}

/// Samples states on spheres of radii up to `radius` (random directions plus
/// every signed coordinate axis, so the least-damped direction is always
/// probed), takes the per-radius maximum of `drift . u`, and fits a line in
/// `|u|^2` through those maxima. `satisfied` states whether the fitted decay
/// rate is strictly positive.
pub fn check_dissipativity(
    model: &ConditionalGaussianModel,
    n_points: usize,
    radius: f64,
    seed: u64,
) -> Result<DissipativityReport> {
    if n_points == 0 {
        return Err(Error::config("n_points must be at least 1"));
    }
    if !(radius > 0.0) {
        return Err(Error::config("radius must be positive"));
    }
    let n = model.n_obs() + model.n_hidden();
    let policy = RngPolicy::new(seed);
    let mut rng = policy.stream(StreamKind::Probe, 2);

    let mut directions: Vec<Vec<f64>> = Vec::new();
    for i in 0..n {
        for sign in [1.0, -1.0] {
            let mut e = vec![0.0; n];
            e[i] = sign;
            directions.push(e);
        }
    }
    for _ in 0..n_points {
        let mut d: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        d.iter_mut().for_each(|x| *x /= norm);
        directions.push(d);
    }

    const N_RADII: usize = 16;
    let mut xs = Vec::with_capacity(N_RADII);
    let mut ys = Vec::with_capacity(N_RADII);
    for k in 1..=N_RADII {
        let r = radius * k as f64 / N_RADII as f64;
        let mut g_max = f64::NEG_INFINITY;
        for d in &directions {
            let u: Vec<f64> = d.iter().map(|x| x * r).collect();
            let (uo, uh) = u.split_at(model.n_obs());
            let (fo, fh) = model.drift_at(0.0, uo, uh);
            let g = fo
                .iter()
                .zip(uo)
                .chain(fh.iter().zip(uh))
                .map(|(f, x)| f * x)
                .sum::<f64>();
            g_max = g_max.max(g);
        }
        xs.push(r * r);
        ys.push(g_max);
    }

    // Least-squares slope of the per-radius envelope against |u|^2.
    let xm = xs.iter().sum::<f64>() / xs.len() as f64;
    let ym = ys.iter().sum::<f64>() / ys.len() as f64;
    let sxx: f64 = xs.iter().map(|x| (x - xm) * (x - xm)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    let slope = sxy / sxx;
    let rho_hat = -slope;
    let de_hat = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| y + rho_hat * x)
        .fold(f64::NEG_INFINITY, f64::max)
        .max(0.0);
    Ok(DissipativityReport {
        rho_hat,
        de_hat,
        satisfied: rho_hat > 0.0,
    })
}

/// Mean and covariance of a Gaussian law. Used for invariant measures and
/// configurable initial conditions.
#[derive(Clone, Debug, Serialize)]
pub struct GaussianSpec {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
}

impl GaussianSpec {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        if covariance.nrows() != mean.len() || covariance.ncols() != mean.len() {
            return Err(Error::DimensionMismatch {
                context: "GaussianSpec covariance",
                expected: mean.len(),
                got: covariance.nrows(),
            });
        }
        let scale = covariance.amax().max(1.0);
        if (&covariance - covariance.transpose()).amax() > 1e-12 * scale {
            return Err(Error::NotPositiveDefinite {
                context: "GaussianSpec covariance not symmetric",
            });
        }
        let min_eig = covariance
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -1e-12 * scale {
            return Err(Error::NotPositiveDefinite {
                context: "GaussianSpec covariance has negative eigenvalue",
            });
        }
        Ok(GaussianSpec { mean, covariance })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}
