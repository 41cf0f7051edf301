//! Density estimators built from ensembles and posterior statistics.
//!
//! All estimators here are equal-weight Gaussian mixtures with a shared
//! structure: a diagonal kernel block over "observed" coordinates (variance
//! `H c_i^2` in direction i) and a per-component full-covariance Gaussian
//! block over "hidden" coordinates. The hybrid estimator uses one component
//! per sample, centered at the sample's observed state with the sample's
//! posterior `(mean, cov)` in the hidden block:
//!
//! ```text
//! p(x, y) = (1/L) sum_i N(x; x_i, H C) N(y; m_i, R_i).
//! ```
//!
//! Direct kernel density estimation is the same object with an empty hidden
//! block over the joint coordinates, and the hidden-marginal mixture is the
//! same object with an empty observed block, so every estimator shares one
//! evaluation path. Evaluation is done in log space with a running
//! max-shift; values that would underflow 1e-300 are returned as exact
//! zeros.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filter::{FilterState, DEFAULT_EIG_FLOOR_REPORT};
use crate::sde::Moments;

pub const DEFAULT_REGULARIZATION: f64 = 1e-6;

const LOG_FLOOR: f64 = -690.775527898214; // ln(1e-300)
const LN_2PI: f64 = 1.8378770664093453;

/// Kernel bandwidth: scalar scale `H` and per-direction factors `c_i`, so
/// the kernel covariance is `H diag(c_1^2, ..., c_n^2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Bandwidth {
    scale: f64,
    factors: Vec<f64>,
}

impl Bandwidth {
    pub fn new(scale: f64, factors: Vec<f64>) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::config("bandwidth scale must be positive"));
        }
        if factors.is_empty() || !factors.iter().all(|c| *c > 0.0 && c.is_finite()) {
            return Err(Error::config("direction factors must be positive"));
        }
        Ok(Bandwidth { scale, factors })
    }

    /// Sample-size scaling rule `H = kappa L^{-2/(4 + n_dims)}`, the choice
    /// that balances the variance and leading bias terms of the kernel
    /// estimator over `n_dims` kernel directions.
    pub fn scaling(l: usize, n_dims: usize, kappa: f64, factors: Vec<f64>) -> Result<Self> {
        if l < 2 {
            return Err(Error::config("bandwidth scaling needs at least two samples"));
        }
        if !(kappa > 0.0) {
            return Err(Error::config("bandwidth prefactor must be positive"));
        }
        let h = kappa * (l as f64).powf(-2.0 / (4.0 + n_dims as f64));
        Bandwidth::new(h, factors)
    }

    /// Silverman-style data-driven rule: per-direction factors are the
    /// sample standard deviations and
    /// `H = (4/(n+2))^{2/(n+4)} L^{-2/(n+4)}`, so `H c_i^2` reproduces the
    /// classic squared bandwidth per direction. `data` is sample-major with
    /// `dim` coordinates per sample.
    pub fn silverman(data: &[f64], dim: usize) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::config("data length must be a multiple of dim"));
        }
        let l = data.len() / dim;
        if l < 2 {
            return Err(Error::config("silverman rule needs at least two samples"));
        }
        let mut factors = Vec::with_capacity(dim);
        for c in 0..dim {
            let mean = data.iter().skip(c).step_by(dim).sum::<f64>() / l as f64;
            let var = data
                .iter()
                .skip(c)
                .step_by(dim)
                .map(|x| (x - mean) * (x - mean))
                .sum::<f64>()
                / (l - 1) as f64;
            if var == 0.0 {
                return Err(Error::config(format!(
                    "direction {c} has zero sample variance; pass explicit direction factors"
                )));
            }
            factors.push(var.sqrt());
        }
        let n = dim as f64;
        let h = (4.0 / (n + 2.0)).powf(2.0 / (n + 4.0)) * (l as f64).powf(-2.0 / (n + 4.0));
        Bandwidth::new(h, factors)
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn factors(&self) -> &[f64] {
        &self.factors
    }

    pub fn dim(&self) -> usize {
        self.factors.len()
    }

    /// Kernel variance `H c_i^2` in direction `i`.
    pub fn variance(&self, i: usize) -> f64 {
        self.scale * self.factors[i] * self.factors[i]
    }

    fn select(&self, keep: &[usize]) -> Result<Option<Bandwidth>> {
        if keep.is_empty() {
            return Ok(None);
        }
        let mut factors = Vec::with_capacity(keep.len());
        for &k in keep {
            if k >= self.factors.len() {
                return Err(Error::config("kept coordinate out of range"));
            }
            factors.push(self.factors[k]);
        }
        Ok(Some(Bandwidth::new(self.scale, factors)?))
    }
}

/// Equal-weight Gaussian mixture with a shared diagonal kernel block and
/// per-component hidden blocks; either block may be empty.
#[derive(Clone, Debug)]
pub struct HybridMixture {
    n_obs: usize,
    n_hidden: usize,
    bandwidth: Option<Bandwidth>,
    obs_centers: Vec<f64>,
    hidden_means: Vec<f64>,
    hidden_covs: Vec<f64>,
    hidden_inv: Vec<f64>,
    /// Per-component `-(1/2)(n_h ln 2 pi + ln det R_i)`.
    hidden_log_norm: Vec<f64>,
    /// Shared `-(1/2) sum_i ln(2 pi H c_i^2)`.
    obs_log_norm: f64,
    inv_obs_var: Vec<f64>,
    degenerate: Vec<bool>,
    n_components: usize,
}

fn inv_and_logdet(cov: &DMatrix<f64>) -> Option<(DMatrix<f64>, f64)> {
    let chol = cov.clone().cholesky()?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Some((chol.inverse(), logdet))
}

impl HybridMixture {
    /// One component per sample: kernel at the sample's observed state,
    /// conditional Gaussian `(mean, cov)` in the hidden block. Posterior
    /// covariances whose smallest eigenvalue falls below the degeneracy
    /// floor are regularized to `cov + delta I` and flagged.
    pub fn build_hybrid(
        obs_snapshot: &[f64],
        n_obs: usize,
        states: &[FilterState],
        bandwidth: &Bandwidth,
        delta: f64,
    ) -> Result<Self> {
        if n_obs == 0 || obs_snapshot.len() % n_obs != 0 {
            return Err(Error::config("observed snapshot layout mismatch"));
        }
        let l = obs_snapshot.len() / n_obs;
        if l == 0 {
            return Err(Error::config("mixture needs at least one component"));
        }
        if states.len() != l {
            return Err(Error::DimensionMismatch {
                context: "filter states vs ensemble",
                expected: l,
                got: states.len(),
            });
        }
        if bandwidth.dim() != n_obs {
            return Err(Error::DimensionMismatch {
                context: "bandwidth vs observed dimension",
                expected: n_obs,
                got: bandwidth.dim(),
            });
        }
        if !(delta >= 0.0) {
            return Err(Error::config("regularization must be nonnegative"));
        }
        let n_hidden = states[0].mean.len();
        let mut hidden_means = Vec::with_capacity(l * n_hidden);
        let mut hidden_covs = Vec::with_capacity(l * n_hidden * n_hidden);
        let mut hidden_inv = Vec::with_capacity(l * n_hidden * n_hidden);
        let mut hidden_log_norm = Vec::with_capacity(l);
        let mut degenerate = Vec::with_capacity(l);
        for st in states {
            if st.mean.len() != n_hidden {
                return Err(Error::config("filter states have mixed dimensions"));
            }
            let is_degenerate = st.min_eig() < DEFAULT_EIG_FLOOR_REPORT;
            let cov = if is_degenerate {
                &st.cov + DMatrix::identity(n_hidden, n_hidden) * delta
            } else {
                st.cov.clone()
            };
            let (inv, logdet) = inv_and_logdet(&cov).ok_or(Error::NotPositiveDefinite {
                context: "posterior covariance (increase the regularization)",
            })?;
            hidden_means.extend_from_slice(st.mean.as_slice());
            hidden_covs.extend_from_slice(cov.as_slice());
            hidden_inv.extend_from_slice(inv.as_slice());
            hidden_log_norm.push(-0.5 * (n_hidden as f64 * LN_2PI + logdet));
            degenerate.push(is_degenerate);
        }
        let obs_log_norm = -0.5
            * (0..n_obs)
                .map(|i| LN_2PI + bandwidth.variance(i).ln())
                .sum::<f64>();
        let inv_obs_var = (0..n_obs).map(|i| 1.0 / bandwidth.variance(i)).collect();
        Ok(HybridMixture {
            n_obs,
            n_hidden,
            bandwidth: Some(bandwidth.clone()),
            obs_centers: obs_snapshot.to_vec(),
            hidden_means,
            hidden_covs,
            hidden_inv,
            hidden_log_norm,
            obs_log_norm,
            inv_obs_var,
            degenerate,
            n_components: l,
        })
    }

    /// Plain kernel density estimator over joint samples: all coordinates
    /// sit in the kernel block.
    pub fn build_direct_kde(samples: &[f64], dim: usize, bandwidth: &Bandwidth) -> Result<Self> {
        if dim == 0 || samples.len() % dim != 0 {
            return Err(Error::config("sample layout mismatch"));
        }
        let l = samples.len() / dim;
        if l == 0 {
            return Err(Error::config("mixture needs at least one component"));
        }
        if bandwidth.dim() != dim {
            return Err(Error::DimensionMismatch {
                context: "bandwidth vs sample dimension",
                expected: dim,
                got: bandwidth.dim(),
            });
        }
        let obs_log_norm = -0.5
            * (0..dim)
                .map(|i| LN_2PI + bandwidth.variance(i).ln())
                .sum::<f64>();
        Ok(HybridMixture {
            n_obs: dim,
            n_hidden: 0,
            bandwidth: Some(bandwidth.clone()),
            obs_centers: samples.to_vec(),
            hidden_means: Vec::new(),
            hidden_covs: Vec::new(),
            hidden_inv: Vec::new(),
            hidden_log_norm: vec![0.0; l],
            obs_log_norm,
            inv_obs_var: (0..dim).map(|i| 1.0 / bandwidth.variance(i)).collect(),
            degenerate: vec![false; l],
            n_components: l,
        })
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn n_hidden(&self) -> usize {
        self.n_hidden
    }

    /// Total point dimension `(obs..., hidden...)`.
    pub fn dim(&self) -> usize {
        self.n_obs + self.n_hidden
    }

    pub fn bandwidth(&self) -> Option<&Bandwidth> {
        self.bandwidth.as_ref()
    }

    pub fn obs_center(&self, i: usize) -> &[f64] {
        &self.obs_centers[i * self.n_obs..(i + 1) * self.n_obs]
    }

    pub fn hidden_mean(&self, i: usize) -> &[f64] {
        &self.hidden_means[i * self.n_hidden..(i + 1) * self.n_hidden]
    }

    pub fn hidden_cov(&self, i: usize) -> DMatrix<f64> {
        let nh = self.n_hidden;
        DMatrix::from_column_slice(nh, nh, &self.hidden_covs[i * nh * nh..(i + 1) * nh * nh])
    }

    /// Hidden covariances of all components (post-regularization).
    pub fn hidden_covs(&self) -> Vec<DMatrix<f64>> {
        (0..self.n_components).map(|i| self.hidden_cov(i)).collect()
    }

    pub fn degenerate_flags(&self) -> &[bool] {
        &self.degenerate
    }

    /// Log density at `point = (obs..., hidden...)`; `-inf` far from every
    /// component.
    pub fn log_density(&self, point: &[f64]) -> f64 {
        debug_assert_eq!(point.len(), self.dim());
        let (x, y) = point.split_at(self.n_obs);
        let no = self.n_obs;
        let nh = self.n_hidden;
        // Online log-sum-exp: track the running maximum and rescale.
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for i in 0..self.n_components {
            let mut q = 0.0;
            let oc = &self.obs_centers[i * no..(i + 1) * no];
            for c in 0..no {
                let d = x[c] - oc[c];
                q += d * d * self.inv_obs_var[c];
            }
            if nh > 0 {
                let m = &self.hidden_means[i * nh..(i + 1) * nh];
                let inv = &self.hidden_inv[i * nh * nh..(i + 1) * nh * nh];
                for c in 0..nh {
                    let dc = y[c] - m[c];
                    for r in 0..nh {
                        q += (y[r] - m[r]) * inv[c * nh + r] * dc;
                    }
                }
            }
            let lp = -0.5 * q + self.obs_log_norm + self.hidden_log_norm[i];
            if lp <= f64::NEG_INFINITY {
                continue;
            }
            if lp > max {
                sum = sum * (max - lp).exp() + 1.0;
                max = lp;
            } else {
                sum += (lp - max).exp();
            }
        }
        if max == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        max + sum.ln() - (self.n_components as f64).ln()
    }

    /// Density at a point; exact zero below the underflow floor.
    pub fn density(&self, point: &[f64]) -> f64 {
        let lp = self.log_density(point);
        if lp < LOG_FLOOR {
            0.0
        } else {
            lp.exp()
        }
    }

    /// Drops the kernel block: the mixture over hidden coordinates only.
    pub fn marginal_hidden(&self) -> Result<Self> {
        if self.n_hidden == 0 {
            return Err(Error::config("mixture has no hidden block"));
        }
        let keep: Vec<usize> = Vec::new();
        let keep_h: Vec<usize> = (0..self.n_hidden).collect();
        self.marginalize(&keep, &keep_h)
    }

    /// Drops the hidden blocks: the kernel estimator over observed
    /// coordinates only.
    pub fn marginal_observed(&self) -> Result<Self> {
        if self.n_obs == 0 {
            return Err(Error::config("mixture has no observed block"));
        }
        let keep: Vec<usize> = (0..self.n_obs).collect();
        self.marginalize(&keep, &[])
    }

    /// Keeps a subset of coordinates from each block. Marginalizing a
    /// Gaussian mixture with block-diagonal components just selects the
    /// matching sub-blocks.
    pub fn marginalize(&self, keep_obs: &[usize], keep_hidden: &[usize]) -> Result<Self> {
        if keep_obs.is_empty() && keep_hidden.is_empty() {
            return Err(Error::config("cannot marginalize away every coordinate"));
        }
        for &k in keep_hidden {
            if k >= self.n_hidden {
                return Err(Error::config("kept hidden coordinate out of range"));
            }
        }
        let bandwidth = match &self.bandwidth {
            Some(bw) => bw.select(keep_obs)?,
            None if keep_obs.is_empty() => None,
            None => return Err(Error::config("mixture has no observed block")),
        };
        let l = self.n_components;
        let no = keep_obs.len();
        let nh = keep_hidden.len();
        let mut obs_centers = Vec::with_capacity(l * no);
        for i in 0..l {
            let full = self.obs_center(i);
            obs_centers.extend(keep_obs.iter().map(|&k| full[k]));
        }
        let mut hidden_means = Vec::with_capacity(l * nh);
        let mut hidden_covs = Vec::with_capacity(l * nh * nh);
        let mut hidden_inv = Vec::with_capacity(l * nh * nh);
        let mut hidden_log_norm = Vec::with_capacity(l);
        for i in 0..l {
            if nh == 0 {
                hidden_log_norm.push(0.0);
                continue;
            }
            let full_mean = self.hidden_mean(i);
            hidden_means.extend(keep_hidden.iter().map(|&k| full_mean[k]));
            let full_cov = self.hidden_cov(i);
            let mut sub = DMatrix::zeros(nh, nh);
            for (r, &kr) in keep_hidden.iter().enumerate() {
                for (c, &kc) in keep_hidden.iter().enumerate() {
                    sub[(r, c)] = full_cov[(kr, kc)];
                }
            }
            let (inv, logdet) = inv_and_logdet(&sub).ok_or(Error::NotPositiveDefinite {
                context: "marginal covariance",
            })?;
            hidden_covs.extend_from_slice(sub.as_slice());
            hidden_inv.extend_from_slice(inv.as_slice());
            hidden_log_norm.push(-0.5 * (nh as f64 * LN_2PI + logdet));
        }
        let (obs_log_norm, inv_obs_var) = match &bandwidth {
            Some(bw) => (
                -0.5 * (0..no).map(|i| LN_2PI + bw.variance(i).ln()).sum::<f64>(),
                (0..no).map(|i| 1.0 / bw.variance(i)).collect(),
            ),
            None => (0.0, Vec::new()),
        };
        Ok(HybridMixture {
            n_obs: no,
            n_hidden: nh,
            bandwidth,
            obs_centers,
            hidden_means,
            hidden_covs,
            hidden_inv,
            hidden_log_norm,
            obs_log_norm,
            inv_obs_var,
            degenerate: self.degenerate.clone(),
            n_components: l,
        })
    }

    /// Maps the hidden block through a full-row-rank projection `P`:
    /// components become `N(P m_i, P R_i P^T)`; the kernel block is kept.
    pub fn project_hidden(&self, p: &DMatrix<f64>) -> Result<Self> {
        if p.ncols() != self.n_hidden {
            return Err(Error::DimensionMismatch {
                context: "projection vs hidden dimension",
                expected: self.n_hidden,
                got: p.ncols(),
            });
        }
        if p.nrows() == 0 || p.nrows() > p.ncols() || p.rank(1e-10) < p.nrows() {
            return Err(Error::config("projection must have full row rank"));
        }
        let l = self.n_components;
        let np = p.nrows();
        let mut hidden_means = Vec::with_capacity(l * np);
        let mut hidden_covs = Vec::with_capacity(l * np * np);
        let mut hidden_inv = Vec::with_capacity(l * np * np);
        let mut hidden_log_norm = Vec::with_capacity(l);
        for i in 0..l {
            let m = DVector::from_column_slice(self.hidden_mean(i));
            let pm = p * m;
            let cov = p * self.hidden_cov(i) * p.transpose();
            let sym = (&cov + cov.transpose()) * 0.5;
            let (inv, logdet) = inv_and_logdet(&sym).ok_or(Error::NotPositiveDefinite {
                context: "projected covariance",
            })?;
            hidden_means.extend_from_slice(pm.as_slice());
            hidden_covs.extend_from_slice(sym.as_slice());
            hidden_inv.extend_from_slice(inv.as_slice());
            hidden_log_norm.push(-0.5 * (np as f64 * LN_2PI + logdet));
        }
        Ok(HybridMixture {
            n_obs: self.n_obs,
            n_hidden: np,
            bandwidth: self.bandwidth.clone(),
            obs_centers: self.obs_centers.clone(),
            hidden_means,
            hidden_covs,
            hidden_inv,
            hidden_log_norm,
            obs_log_norm: self.obs_log_norm,
            inv_obs_var: self.inv_obs_var.clone(),
            degenerate: self.degenerate.clone(),
            n_components: l,
        })
    }

    /// Exact mixture moments per coordinate `(obs..., hidden...)`: kernel
    /// variance plus center spread for the observed block, mean posterior
    /// covariance plus mean spread for the hidden block.
    pub fn moments(&self) -> Moments {
        let l = self.n_components as f64;
        let n = self.dim();
        let mut mean = vec![0.0; n];
        let mut variance = vec![0.0; n];
        for i in 0..self.n_components {
            for (c, x) in self.obs_center(i).iter().enumerate() {
                mean[c] += x;
            }
            for (c, x) in self.hidden_mean(i).iter().enumerate() {
                mean[self.n_obs + c] += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= l);
        for i in 0..self.n_components {
            for (c, x) in self.obs_center(i).iter().enumerate() {
                let d = x - mean[c];
                variance[c] += d * d;
            }
            let cov = &self.hidden_covs[i * self.n_hidden * self.n_hidden..];
            for c in 0..self.n_hidden {
                let d = self.hidden_mean(i)[c] - mean[self.n_obs + c];
                variance[self.n_obs + c] += d * d + cov[c * self.n_hidden + c];
            }
        }
        variance.iter_mut().for_each(|v| *v /= l);
        for c in 0..self.n_obs {
            variance[c] += self.bandwidth.as_ref().map_or(0.0, |bw| bw.variance(c));
        }
        Moments { mean, variance }
    }

    /// Evaluates the mixture on a tensor grid.
    pub fn grid_density(&self, axes: Vec<Vec<f64>>) -> Result<GridDensity> {
        if axes.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "grid vs mixture dimension",
                expected: self.dim(),
                got: axes.len(),
            });
        }
        GridDensity::eval(|p| self.density(p), axes)
    }
}

/// Integral of the squared Gaussian density with covariance `cov`:
/// `int N(x; m, cov)^2 dx = det(4 pi cov)^{-1/2}`.
pub fn gaussian_l2_norm(cov: &DMatrix<f64>) -> Result<f64> {
    let n = cov.nrows();
    if n == 0 || cov.ncols() != n {
        return Err(Error::config("covariance must be square and nonempty"));
    }
    let chol = cov.clone().cholesky().ok_or(Error::NotPositiveDefinite {
        context: "gaussian_l2_norm covariance",
    })?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok((-0.5 * (n as f64 * (4.0 * std::f64::consts::PI).ln() + logdet)).exp())
}

/// Uniformly spaced axis with `n` points covering `[min, max]`.
pub fn linspace(min: f64, max: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2 && max > min);
    let h = (max - min) / (n - 1) as f64;
    (0..n).map(|k| min + k as f64 * h).collect()
}

/// Axes covering `mean_i +/- pad * std_i` with `n` points each.
pub fn axes_from_stats(mean: &[f64], std: &[f64], pad: f64, n: usize) -> Vec<Vec<f64>> {
    mean.iter()
        .zip(std)
        .map(|(m, s)| linspace(m - pad * s, m + pad * s, n))
        .collect()
}

/// Density values on a rectangular tensor grid with trapezoidal quadrature
/// weights, the common evaluation surface for estimates, references and
/// error integrals.
#[derive(Clone, Debug)]
pub struct GridDensity {
    axes: Vec<Vec<f64>>,
    values: Vec<f64>,
    axis_weights: Vec<Vec<f64>>,
}

fn trapezoid_weights(axis: &[f64]) -> Vec<f64> {
    let n = axis.len();
    let mut w = vec![0.0; n];
    for k in 0..n - 1 {
        let h = 0.5 * (axis[k + 1] - axis[k]);
        w[k] += h;
        w[k + 1] += h;
    }
    w
}

impl GridDensity {
    fn validate_axes(axes: &[Vec<f64>]) -> Result<()> {
        if axes.is_empty() {
            return Err(Error::config("grid needs at least one axis"));
        }
        for axis in axes {
            if axis.len() < 2 {
                return Err(Error::config("every axis needs at least two points"));
            }
            if axis.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::config("axes must be strictly increasing"));
            }
        }
        Ok(())
    }

    /// Evaluates `f` at every tensor-grid point, in parallel.
    pub fn eval(f: impl Fn(&[f64]) -> f64 + Sync, axes: Vec<Vec<f64>>) -> Result<Self> {
        Self::validate_axes(&axes)?;
        let n_points: usize = axes.iter().map(|a| a.len()).product();
        let dims = axes.len();
        let values: Vec<f64> = (0..n_points)
            .into_par_iter()
            .with_min_len(64)
            .map_init(
                || vec![0.0; dims],
                |point, flat| {
                    decode_point(&axes, flat, point);
                    f(point)
                },
            )
            .collect();
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::config("density evaluation produced NaN"));
        }
        let axis_weights = axes.iter().map(|a| trapezoid_weights(a)).collect();
        Ok(GridDensity {
            axes,
            values,
            axis_weights,
        })
    }

    pub fn from_values(axes: Vec<Vec<f64>>, values: Vec<f64>) -> Result<Self> {
        Self::validate_axes(&axes)?;
        let n_points: usize = axes.iter().map(|a| a.len()).product();
        if values.len() != n_points {
            return Err(Error::DimensionMismatch {
                context: "grid values",
                expected: n_points,
                got: values.len(),
            });
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::config("grid values contain NaN"));
        }
        let axis_weights = axes.iter().map(|a| trapezoid_weights(a)).collect();
        Ok(GridDensity {
            axes,
            values,
            axis_weights,
        })
    }

    pub fn dims(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_points(&self) -> usize {
        self.values.len()
    }

    /// Coordinates of flat index `k`.
    pub fn point(&self, k: usize, out: &mut [f64]) {
        decode_point(&self.axes, k, out);
    }

    /// Quadrature weight of flat index `k` (product of axis weights).
    pub fn weight(&self, k: usize) -> f64 {
        let mut rem = k;
        let mut w = 1.0;
        for d in (0..self.axes.len()).rev() {
            let n = self.axes[d].len();
            w *= self.axis_weights[d][rem % n];
            rem /= n;
        }
        w
    }

    pub fn same_grid(&self, other: &GridDensity) -> bool {
        self.axes == other.axes
    }

    /// Total quadrature mass of the stored values.
    pub fn mass(&self) -> f64 {
        self.values
            .iter()
            .enumerate()
            .map(|(k, v)| self.weight(k) * v)
            .sum()
    }

    /// Quadrature of an arbitrary pointwise function of the stored value.
    pub fn quad(&self, mut g: impl FnMut(usize, f64) -> f64) -> f64 {
        self.values
            .iter()
            .enumerate()
            .map(|(k, v)| self.weight(k) * g(k, *v))
            .sum()
    }

    /// `int |p - q|^2` over the grid; grids must be identical.
    pub fn l2_distance_sq(&self, other: &GridDensity) -> Result<f64> {
        if !self.same_grid(other) {
            return Err(Error::config("grids differ"));
        }
        Ok(self.quad(|k, v| {
            let d = v - other.values[k];
            d * d
        }))
    }
}

fn decode_point(axes: &[Vec<f64>], flat: usize, out: &mut [f64]) {
    let mut rem = flat;
    for d in (0..axes.len()).rev() {
        let n = axes[d].len();
        out[d] = axes[d][rem % n];
        rem /= n;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn state(mean: &[f64], cov: &[f64]) -> FilterState {
        let n = mean.len();
        FilterState::new(
            DVector::from_column_slice(mean),
            DMatrix::from_column_slice(n, n, cov),
        )
        .unwrap()
    }

    #[test]
    fn scaling_bandwidth_matches_frozen_values() {
        // 500^{-1/3} and 2^{-1/2}, plus the joint-space exponent -2/7.
        let bw = Bandwidth::scaling(500, 2, 1.0, vec![1.0, 1.0]).unwrap();
        assert!((bw.scale() - 0.12599210498948732).abs() < 1e-15);
        let bw = Bandwidth::scaling(2, 0, 1.0, vec![1.0]).unwrap();
        assert!((bw.scale() - 0.5_f64.sqrt()).abs() < 1e-15);
        let bw = Bandwidth::scaling(500, 3, 1.0, vec![1.0, 1.0, 1.0]).unwrap();
        assert!((bw.scale() - 0.16938).abs() < 2e-5, "{}", bw.scale());
        assert!(Bandwidth::scaling(1, 2, 1.0, vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn silverman_reproduces_classic_rule() {
        // 1D: H c^2 must equal ((4/3)^{1/5} sigma L^{-1/5})^2.
        let data: Vec<f64> = (0..50).map(|k| (k as f64 * 0.77).sin() * 2.0).collect();
        let bw = Bandwidth::silverman(&data, 1).unwrap();
        let mean = data.iter().sum::<f64>() / 50.0;
        let sd =
            (data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 49.0).sqrt();
        let h_classic = (4.0_f64 / 3.0).powf(0.2) * sd * 50.0_f64.powf(-0.2);
        assert!((bw.variance(0) - h_classic * h_classic).abs() < 1e-12);

        // Scale equivariance: c scales, H unchanged.
        let scaled: Vec<f64> = data.iter().map(|x| x * 10.0).collect();
        let bws = Bandwidth::silverman(&scaled, 1).unwrap();
        assert!((bws.scale() - bw.scale()).abs() < 1e-15);
        assert!((bws.factors()[0] - 10.0 * bw.factors()[0]).abs() < 1e-10);

        // Zero variance errors.
        assert!(Bandwidth::silverman(&[1.0, 1.0], 1).is_err());
    }

    #[test]
    fn single_component_peak_value() {
        // N_obs = 1 with H c^2 = 1 and N_hid = 1 with cov 1: peak density is
        // (2 pi)^{-1}.
        let bw = Bandwidth::new(1.0, vec![1.0]).unwrap();
        let mix =
            HybridMixture::build_hybrid(&[0.0], 1, &[state(&[0.0], &[1.0])], &bw, 1e-6).unwrap();
        let peak = mix.density(&[0.0, 0.0]);
        assert!((peak - 1.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-12);

        // Far point underflows to exact zero.
        assert_eq!(mix.density(&[50.0, 50.0]), 0.0);
        assert!(mix.density(&[50.0, 50.0]).is_finite());
    }

    #[test]
    fn symmetric_pair_midpoint() {
        let bw = Bandwidth::new(1.0, vec![1.0]).unwrap();
        let states = vec![state(&[0.0], &[1.0]), state(&[0.0], &[1.0])];
        let mix = HybridMixture::build_hybrid(&[-1.0, 1.0], 1, &states, &bw, 1e-6).unwrap();
        let mid = mix.density(&[0.0, 0.0]);
        let single =
            HybridMixture::build_hybrid(&[-1.0], 1, &states[..1].to_vec(), &bw, 1e-6).unwrap();
        // Both components contribute equally at the midpoint.
        assert!((mid - single.density(&[0.0, 0.0])).abs() < 1e-14);
    }

    #[test]
    fn direct_kde_unit_peak() {
        let bw = Bandwidth::new(1.0, vec![1.0, 1.0, 1.0]).unwrap();
        let mix = HybridMixture::build_direct_kde(&[0.0, 0.0, 0.0], 3, &bw).unwrap();
        let want = (2.0 * std::f64::consts::PI).powf(-1.5);
        assert!((mix.density(&[0.0, 0.0, 0.0]) - want).abs() < 1e-12);
    }

    #[test]
    fn direct_kde_matches_standard_normal_peak() {
        use crate::rng::{RngPolicy, StreamKind};
        use rand::Rng;
        use rand_distr::StandardNormal;
        let mut rng = RngPolicy::new(40).stream(StreamKind::Probe, 9);
        let samples: Vec<f64> = (0..10_000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let bw = Bandwidth::silverman(&samples, 1).unwrap();
        let kde = HybridMixture::build_direct_kde(&samples, 1, &bw).unwrap();
        let got = kde.density(&[0.0]);
        let want = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((got - want).abs() < 0.02, "{got} vs {want}");
    }

    #[test]
    fn hybrid_with_kernel_covariances_equals_direct_kde() {
        // When the hidden blocks carry exactly the kernel variance H c^2 and
        // the hidden means are the samples, the hybrid and the direct KDE
        // coincide.
        let joint = [
            [0.3, -0.2, 1.0],
            [-1.0, 0.5, 0.2],
            [2.0, 1.5, -0.7],
            [0.0, 0.0, 0.0],
        ];
        let bw3 = Bandwidth::new(0.2, vec![1.0, 0.7, 1.3]).unwrap();
        let flat: Vec<f64> = joint.iter().flatten().cloned().collect();
        let direct = HybridMixture::build_direct_kde(&flat, 3, &bw3).unwrap();

        let bw2 = Bandwidth::new(0.2, vec![1.0, 0.7]).unwrap();
        let obs: Vec<f64> = joint.iter().flat_map(|p| [p[0], p[1]]).collect();
        let states: Vec<FilterState> = joint
            .iter()
            .map(|p| state(&[p[2]], &[bw3.variance(2)]))
            .collect();
        let hybrid = HybridMixture::build_hybrid(&obs, 2, &states, &bw2, 0.0).unwrap();

        for pt in [
            [0.0, 0.0, 0.0],
            [0.5, -0.5, 0.5],
            [1.0, 1.0, 1.0],
            [-2.0, 0.3, 0.9],
        ] {
            let a = direct.density(&pt);
            let b = hybrid.density(&pt);
            assert!((a - b).abs() <= 1e-12 * a.max(1e-30), "{a} vs {b}");
        }
    }

    #[test]
    fn degenerate_posterior_is_regularized_and_flagged() {
        let bw = Bandwidth::new(0.1, vec![1.0]).unwrap();
        let states = vec![state(&[0.5], &[0.0]), state(&[1.5], &[0.0])];
        let mix = HybridMixture::build_hybrid(&[0.0, 1.0], 1, &states, &bw, 1e-6).unwrap();
        assert!(mix.degenerate_flags().iter().all(|d| *d));
        for i in 0..2 {
            assert!((mix.hidden_cov(i)[(0, 0)] - 1e-6).abs() < 1e-18);
        }
    }

    #[test]
    fn marginals_are_consistent_with_quadrature() {
        // Quadrature-marginalizing the joint over the hidden coordinate
        // reproduces the observed marginal pointwise, and conversely.
        let bw = Bandwidth::new(0.3, vec![0.8]).unwrap();
        let states = vec![
            state(&[0.2], &[0.5]),
            state(&[-0.4], &[0.3]),
            state(&[1.0], &[0.8]),
        ];
        let mix =
            HybridMixture::build_hybrid(&[0.0, 0.7, -0.9], 1, &states, &bw, 1e-6).unwrap();
        let hidden_axis = linspace(-9.0, 9.0, 361);
        let obs_axis = linspace(-9.0, 9.0, 361);

        let m_obs = mix.marginal_observed().unwrap();
        let m_hid = mix.marginal_hidden().unwrap();
        for &x in &[-0.9, 0.0, 0.35, 0.7] {
            let joint_line = GridDensity::eval(|p| mix.density(&[x, p[0]]), vec![hidden_axis.clone()])
                .unwrap();
            let want = m_obs.density(&[x]);
            assert!((joint_line.mass() - want).abs() < 1e-6, "x = {x}");
        }
        for &y in &[-0.5, 0.1, 0.6] {
            let joint_line = GridDensity::eval(|p| mix.density(&[p[0], y]), vec![obs_axis.clone()])
                .unwrap();
            let want = m_hid.density(&[y]);
            assert!((joint_line.mass() - want).abs() < 1e-6, "y = {y}");
        }
    }

    #[test]
    fn marginal_hidden_mass_is_one() {
        let bw = Bandwidth::new(0.3, vec![0.8]).unwrap();
        let states = vec![state(&[0.2], &[0.5]), state(&[-0.7], &[0.2])];
        let mix = HybridMixture::build_hybrid(&[0.0, 0.4], 1, &states, &bw, 1e-6).unwrap();
        let m = mix.marginal_hidden().unwrap();
        let grid = m.grid_density(vec![linspace(-10.0, 10.0, 400)]).unwrap();
        assert!((grid.mass() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn projection_identity_and_selection() {
        let cov = [0.5, 0.1, 0.1, 0.3];
        let states = vec![state(&[0.2, -0.1], &cov), state(&[-0.4, 0.6], &cov)];
        let bw = Bandwidth::new(0.2, vec![1.0]).unwrap();
        let mix = HybridMixture::build_hybrid(&[0.0, 1.0], 1, &states, &bw, 1e-6).unwrap();

        let eye = DMatrix::identity(2, 2);
        let same = mix.project_hidden(&eye).unwrap();
        for pt in [[0.1, 0.0, 0.0], [0.5, -0.3, 0.4]] {
            assert!((same.density(&pt) - mix.density(&pt)).abs() < 1e-14);
        }

        let first = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let proj = mix.project_hidden(&first).unwrap();
        assert_eq!(proj.n_hidden(), 1);
        assert!((proj.hidden_cov(0)[(0, 0)] - 0.5).abs() < 1e-15);

        let rank_deficient = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        assert!(mix.project_hidden(&rank_deficient).is_err());
    }

    #[test]
    fn projection_matches_quadrature_marginalization() {
        // 2 hidden dims with correlated posteriors: projecting onto the
        // first hidden coordinate must equal numerically integrating the
        // joint over the second.
        let states = vec![
            state(&[0.2, -0.1], &[0.5, 0.15, 0.15, 0.3]),
            state(&[-0.4, 0.6], &[0.4, -0.1, -0.1, 0.6]),
        ];
        let bw = Bandwidth::new(0.25, vec![1.0]).unwrap();
        let mix = HybridMixture::build_hybrid(&[0.0, 1.0], 1, &states, &bw, 1e-6).unwrap();
        let proj = mix
            .project_hidden(&DMatrix::from_row_slice(1, 2, &[1.0, 0.0]))
            .unwrap();
        let axis = linspace(-10.0, 10.0, 501);
        for pt in [[0.3, 0.1], [0.8, -0.4], [-0.2, 0.5]] {
            let line =
                GridDensity::eval(|q| mix.density(&[pt[0], pt[1], q[0]]), vec![axis.clone()])
                    .unwrap();
            let want = proj.density(&pt);
            assert!((line.mass() - want).abs() < 1e-6);
        }
    }

    #[test]
    fn gaussian_l2_norm_frozen_and_quadrature() {
        // 1D unit covariance: int N^2 = 1/(2 sqrt(pi)).
        let one = DMatrix::identity(1, 1);
        let got = gaussian_l2_norm(&one).unwrap();
        let want = 1.0 / (2.0 * std::f64::consts::PI.sqrt());
        assert!((got - want).abs() < 1e-15);

        // Quadrature oracle.
        let axis = linspace(-9.0, 9.0, 2001);
        let grid = GridDensity::eval(
            |p| {
                let v = (-0.5 * p[0] * p[0]).exp() / (2.0 * std::f64::consts::PI).sqrt();
                v * v
            },
            vec![axis],
        )
        .unwrap();
        assert!((grid.mass() - got).abs() < 1e-9);

        // 2D diag(1, 4): det(4 pi cov)^{-1/2} = 1/(8 pi).
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]));
        let got2 = gaussian_l2_norm(&cov).unwrap();
        assert!((got2 - 1.0 / (8.0 * std::f64::consts::PI)).abs() < 1e-15);

        // Scaling: cov -> s cov multiplies by s^{-n/2}.
        let s = 3.7;
        let got2s = gaussian_l2_norm(&(cov * s)).unwrap();
        assert!((got2s - got2 / s).abs() < 1e-15);

        // Non-PD covariance is rejected.
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(gaussian_l2_norm(&bad).is_err());
    }

    #[test]
    fn grid_quadrature_basics() {
        // Constant function integrates to the domain volume.
        let grid = GridDensity::eval(
            |_| 1.0,
            vec![linspace(0.0, 2.0, 21), linspace(-1.0, 1.0, 11)],
        )
        .unwrap();
        assert!((grid.mass() - 4.0).abs() < 1e-12);

        // Standard normal on [-8, 8] integrates to 1.
        let grid = GridDensity::eval(
            |p| (-0.5 * p[0] * p[0]).exp() / (2.0 * std::f64::consts::PI).sqrt(),
            vec![linspace(-8.0, 8.0, 400)],
        )
        .unwrap();
        assert!((grid.mass() - 1.0).abs() < 1e-6);

        assert!(GridDensity::eval(|_| 1.0, vec![vec![0.0]]).is_err());
        assert!(GridDensity::eval(|_| 1.0, vec![vec![1.0, 0.5]]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        /// Mixture mass over a +/- 8 sigma box is 1 within quadrature
        /// tolerance, for random small hybrid mixtures.
        #[test]
        fn mixture_mass_is_one(
            centers in proptest::collection::vec(-1.5f64..1.5, 2..5),
            means in proptest::collection::vec(-1.0f64..1.0, 2..5),
            h in 0.05f64..0.8,
            covs in proptest::collection::vec(0.05f64..1.0, 2..5),
        ) {
            let l = centers.len().min(means.len()).min(covs.len());
            let bw = Bandwidth::new(h, vec![1.0]).unwrap();
            let states: Vec<FilterState> = (0..l)
                .map(|i| state(&[means[i]], &[covs[i]]))
                .collect();
            let mix = HybridMixture::build_hybrid(&centers[..l], 1, &states, &bw, 1e-6).unwrap();
            let grid = mix
                .grid_density(vec![linspace(-10.0, 10.0, 220), linspace(-10.0, 10.0, 220)])
                .unwrap();
            prop_assert!((grid.mass() - 1.0).abs() < 1e-4);
        }

        /// Component order never changes evaluated densities.
        #[test]
        fn permutation_invariance(
            centers in proptest::collection::vec(-2.0f64..2.0, 4),
            means in proptest::collection::vec(-2.0f64..2.0, 4),
            point in proptest::collection::vec(-3.0f64..3.0, 2),
        ) {
            let bw = Bandwidth::new(0.2, vec![1.0]).unwrap();
            let states: Vec<FilterState> =
                means.iter().map(|m| state(&[*m], &[0.3])).collect();
            let mix = HybridMixture::build_hybrid(&centers, 1, &states, &bw, 1e-6).unwrap();
            let perm = [2usize, 0, 3, 1];
            let centers_p: Vec<f64> = perm.iter().map(|&i| centers[i]).collect();
            let states_p: Vec<FilterState> = perm.iter().map(|&i| states[i].clone()).collect();
            let mix_p = HybridMixture::build_hybrid(&centers_p, 1, &states_p, &bw, 1e-6).unwrap();
            let a = mix.density(&point);
            let b = mix_p.density(&point);
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
        }
    }
}
