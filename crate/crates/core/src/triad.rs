//! The nonlinear triad test family.
//!
//! Three interacting modes with energy-conserving quadratic coupling,
//!
//! ```text
//! du1 = (a1 u2 u3 - d1 u1) dt + epsilon dW1,
//! du2 = (a2 u3 u1 - d2 u2) dt + sigma2 dW2,
//! du3 = (a3 u1 u2 - d3 u3) dt + sigma3 dW3,
//! ```
//!
//! with `a1 + a2 + a3 = 0`. The conditional Gaussian partition observes
//! `u_obs = (u2, u3)` and hides `u_hid = u1`: the bilinear terms `a2 u3 u1`
//! and `a3 u1 u2` are linear in `u1` and enter through the observed
//! coupling matrix, while `a1 u2 u3` depends on the observed pair only and
//! sits in the hidden base drift.
//!
//! The original model has `d1 = epsilon = 0`. `epsilon > 0` restores
//! controllability of the hidden mode ("modified" variant) and `d1 > 0`
//! additionally makes the linear part uniformly stable ("damped" variant).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    Coefficients, ConditionalGaussianModel, EnergyConservingModel, GaussianSpec, MatrixFn,
    VectorFn,
};

/// Parameters of the triad family. `d1` and `epsilon` default to zero
/// (original model).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TriadParams {
    /// Interaction coefficients; must satisfy `a1 + a2 + a3 = 0` exactly.
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    /// Damping of the hidden mode u1 (zero in the original model).
    #[serde(default)]
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub sigma2: f64,
    pub sigma3: f64,
    /// Noise amplitude of the hidden mode u1 (zero in the original model).
    #[serde(default)]
    pub epsilon: f64,
}

impl TriadParams {
    /// Regime with a Gaussian invariant measure (bounded u1 variance).
    pub fn regime_i() -> Self {
        TriadParams {
            a1: -2.5,
            a2: 1.0,
            a3: 1.5,
            d1: 0.0,
            d2: 1.0,
            d3: 0.5,
            sigma2: 1.0,
            sigma3: 1.0,
            epsilon: 0.0,
        }
    }

    /// Regime without an invariant measure (u1 variance grows without
    /// bound).
    pub fn regime_ii() -> Self {
        TriadParams {
            a1: -0.5,
            a2: -1.0,
            a3: 1.5,
            d1: 0.0,
            d2: 1.0,
            d3: 0.5,
            sigma2: 1.0,
            sigma3: 1.0,
            epsilon: 0.0,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_u1_damping(mut self, d1: f64) -> Self {
        self.d1 = d1;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.a1 + self.a2 + self.a3 != 0.0 {
            return Err(Error::config(format!(
                "interaction coefficients must sum to zero exactly, got {:e}",
                self.a1 + self.a2 + self.a3
            )));
        }
        if !(self.d2 > 0.0) || !(self.d3 > 0.0) {
            return Err(Error::config("d2 and d3 must be positive"));
        }
        if !(self.sigma2 > 0.0) || !(self.sigma3 > 0.0) {
            return Err(Error::config("sigma2 and sigma3 must be positive"));
        }
        if self.d1 < 0.0 || self.epsilon < 0.0 {
            return Err(Error::config("d1 and epsilon must be nonnegative"));
        }
        Ok(())
    }
}

/// Builds the conditional Gaussian form of the triad model, observing
/// `(u2, u3)` and hiding `u1`.
pub fn triad_model(params: &TriadParams) -> Result<ConditionalGaussianModel> {
    params.validate()?;
    let p = *params;
    let obs_drift: VectorFn = Arc::new(move |_t, u, out: &mut [f64]| {
        out[0] = -p.d2 * u[0];
        out[1] = -p.d3 * u[1];
    });
    let obs_coupling: MatrixFn = Arc::new(move |_t, u, out: &mut [f64]| {
        out[0] = p.a2 * u[1];
        out[1] = p.a3 * u[0];
    });
    let hidden_drift: VectorFn =
        Arc::new(move |_t, u, out: &mut [f64]| out[0] = p.a1 * u[0] * u[1]);
    let hidden_feedback: MatrixFn = Arc::new(move |_t, _u, out: &mut [f64]| out[0] = -p.d1);
    let obs_noise: MatrixFn = Arc::new(move |_t, _u, out: &mut [f64]| {
        out[0] = p.sigma2;
        out[1] = 0.0;
        out[2] = 0.0;
        out[3] = p.sigma3;
    });
    let hidden_noise: MatrixFn = Arc::new(move |_t, _u, out: &mut [f64]| out[0] = p.epsilon);
    ConditionalGaussianModel::new(
        2,
        1,
        Coefficients {
            obs_drift,
            obs_coupling,
            hidden_drift,
            hidden_feedback,
            obs_noise,
            hidden_noise,
        },
    )?
    .with_names(
        vec!["u2".to_string(), "u3".to_string()],
        vec!["u1".to_string()],
    )
}

/// The triad model in energy-conserving block form, for the structural
/// checks and the stability constants.
pub fn triad_energy_model(params: &TriadParams) -> Result<EnergyConservingModel> {
    params.validate()?;
    let p = *params;
    Ok(EnergyConservingModel {
        damping_oo: DMatrix::from_diagonal(&DVector::from_vec(vec![p.d2, p.d3])),
        damping_oh: DMatrix::zeros(2, 1),
        damping_ho: DMatrix::zeros(1, 2),
        damping_hh: DMatrix::from_element(1, 1, p.d1),
        quad_oo: Arc::new(|_u, out: &mut [f64]| {
            out[0] = 0.0;
            out[1] = 0.0;
        }),
        quad_oh: Arc::new(move |u, out: &mut [f64]| {
            out[0] = p.a2 * u[1];
            out[1] = p.a3 * u[0];
        }),
        quad_ho: Arc::new(move |u, out: &mut [f64]| out[0] = p.a1 * u[0] * u[1]),
        quad_hh: Arc::new(|_u, out: &mut [f64]| out[0] = 0.0),
        forcing_obs: DVector::zeros(2),
        forcing_hidden: DVector::zeros(1),
        obs_noise: DMatrix::from_diagonal(&DVector::from_vec(vec![p.sigma2, p.sigma3])),
        hidden_noise: DMatrix::from_element(1, 1, p.epsilon),
    })
}

/// Per-mode equilibrium energies of the original triad model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TriadEnergies {
    pub e1: f64,
    pub e2: f64,
    pub e3: f64,
}

/// The Gaussian invariant measure of the original triad model
/// (`d1 = epsilon = 0`), if it exists. Mode energies are
/// `e2 = sigma2^2 / (2 d2)`, `e3 = sigma3^2 / (2 d3)` and
/// `e1 = -a1 e2 e3 / (a2 e3 + a3 e2)`; the measure is
/// `N(0, diag(e1, e2, e3))` in the natural ordering `(u1, u2, u3)` and
/// exists only when `e1 > 0`.
///
/// Calls with `d1 != 0` or `epsilon != 0` are rejected: the closed form is
/// not claimed for the modified variants.
pub fn triad_invariant_measure(params: &TriadParams) -> Result<Option<GaussianSpec>> {
    if params.d1 != 0.0 || params.epsilon != 0.0 {
        return Err(Error::config(
            "invariant measure formula applies to the original triad only (d1 = epsilon = 0)",
        ));
    }
    if !(params.d2 > 0.0) || !(params.d3 > 0.0) {
        return Err(Error::config("d2 and d3 must be positive"));
    }
    let e2 = params.sigma2 * params.sigma2 / (2.0 * params.d2);
    let e3 = params.sigma3 * params.sigma3 / (2.0 * params.d3);
    if e2 == 0.0 || e3 == 0.0 {
        return Ok(None);
    }
    let denom = params.a2 * e3 + params.a3 * e2;
    if denom == 0.0 {
        return Ok(None);
    }
    let e1 = -params.a1 * e2 * e3 / denom;
    if e1 > 0.0 {
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![e1, e2, e3]));
        Ok(Some(GaussianSpec::new(DVector::zeros(3), cov)?))
    } else {
        Ok(None)
    }
}

/// Mode energies regardless of sign, for reporting.
pub fn triad_energies(params: &TriadParams) -> Result<TriadEnergies> {
    let e2 = params.sigma2 * params.sigma2 / (2.0 * params.d2);
    let e3 = params.sigma3 * params.sigma3 / (2.0 * params.d3);
    let denom = params.a2 * e3 + params.a3 * e2;
    if denom == 0.0 {
        return Err(Error::DegenerateFit(
            "a2 e3 + a3 e2 = 0: equilibrium energy of u1 undefined".into(),
        ));
    }
    Ok(TriadEnergies {
        e1: -params.a1 * e2 * e3 / denom,
        e2,
        e3,
    })
}
