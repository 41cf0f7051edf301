//! Ensemble integration of conditional Gaussian systems.
//!
//! `L` joint sample paths advance independently under a fixed-step
//! Euler-Maruyama scheme. Every sample owns a dedicated noise stream keyed
//! by its id, so the ensemble map is embarrassingly parallel and the result
//! does not depend on scheduling or on the order samples are stored in.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::ConditionalGaussianModel;
use crate::rng::{RngPolicy, StreamKind};

pub const DEFAULT_BLOWUP_CAP: f64 = 1e8;

/// `L` joint samples `(u_obs, u_hid)` at a common time. Sample ids are
/// assigned at construction and travel with the states under permutation;
/// they key the per-sample noise streams.
#[derive(Clone, Debug)]
pub struct Ensemble {
    t: f64,
    n_obs: usize,
    n_hidden: usize,
    ids: Vec<u64>,
    obs: Vec<f64>,
    hidden: Vec<f64>,
}

impl Ensemble {
    /// All samples at the origin.
    pub fn at_origin(l: usize, n_obs: usize, n_hidden: usize) -> Result<Self> {
        if l == 0 {
            return Err(Error::config("ensemble needs at least one sample"));
        }
        Ok(Ensemble {
            t: 0.0,
            n_obs,
            n_hidden,
            ids: (0..l as u64).collect(),
            obs: vec![0.0; l * n_obs],
            hidden: vec![0.0; l * n_hidden],
        })
    }

    pub fn n_samples(&self) -> usize {
        self.ids.len()
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn n_hidden(&self) -> usize {
        self.n_hidden
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn obs(&self, i: usize) -> &[f64] {
        &self.obs[i * self.n_obs..(i + 1) * self.n_obs]
    }

    pub fn hidden(&self, i: usize) -> &[f64] {
        &self.hidden[i * self.n_hidden..(i + 1) * self.n_hidden]
    }

    pub fn obs_flat(&self) -> &[f64] {
        &self.obs
    }

    pub fn hidden_flat(&self) -> &[f64] {
        &self.hidden
    }

    /// Joint state of sample `i` as `(obs..., hidden...)`.
    pub fn joint(&self, i: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_obs + self.n_hidden);
        v.extend_from_slice(self.obs(i));
        v.extend_from_slice(self.hidden(i));
        v
    }

    /// Reorders samples; ids move with their states, so the reordered
    /// ensemble evolves along exactly the permuted set of paths.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n_samples() {
            return Err(Error::config("permutation length mismatch"));
        }
        let mut out = Ensemble {
            t: self.t,
            n_obs: self.n_obs,
            n_hidden: self.n_hidden,
            ids: Vec::with_capacity(perm.len()),
            obs: Vec::with_capacity(self.obs.len()),
            hidden: Vec::with_capacity(self.hidden.len()),
        };
        for &p in perm {
            out.ids.push(self.ids[p]);
            out.obs.extend_from_slice(self.obs(p));
            out.hidden.extend_from_slice(self.hidden(p));
        }
        Ok(out)
    }

    /// Unbiased per-coordinate mean and variance over the samples, observed
    /// coordinates first.
    pub fn moments(&self) -> Result<Moments> {
        let l = self.n_samples();
        if l < 2 {
            return Err(Error::config("moments need at least two samples"));
        }
        let n = self.n_obs + self.n_hidden;
        let mut mean = vec![0.0; n];
        for i in 0..l {
            for (c, x) in self.obs(i).iter().enumerate() {
                mean[c] += x;
            }
            for (c, x) in self.hidden(i).iter().enumerate() {
                mean[self.n_obs + c] += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= l as f64);
        let mut variance = vec![0.0; n];
        for i in 0..l {
            for (c, x) in self.obs(i).iter().enumerate() {
                let d = x - mean[c];
                variance[c] += d * d;
            }
            for (c, x) in self.hidden(i).iter().enumerate() {
                let d = x - mean[self.n_obs + c];
                variance[self.n_obs + c] += d * d;
            }
        }
        variance.iter_mut().for_each(|v| *v /= (l - 1) as f64);
        Ok(Moments { mean, variance })
    }
}

/// Per-coordinate sample mean and unbiased variance.
#[derive(Clone, Debug)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// One noise stream per sample id. Build it for the ensemble the run starts
/// from; streams advance as steps consume draws.
pub struct EnsembleRng {
    rngs: Vec<ChaCha12Rng>,
}

impl EnsembleRng {
    pub fn for_ensemble(policy: &RngPolicy, ensemble: &Ensemble) -> Self {
        EnsembleRng {
            rngs: ensemble
                .ids
                .iter()
                .map(|&id| policy.stream(StreamKind::Path, id))
                .collect(),
        }
    }
}

/// Workspace for one sample step; reused across steps and threads.
#[derive(Clone)]
pub struct StepScratch {
    drift_o: Vec<f64>,
    coupling: Vec<f64>,
    drift_h: Vec<f64>,
    feedback: Vec<f64>,
    noise_o: Vec<f64>,
    noise_h: Vec<f64>,
    du_o: Vec<f64>,
    du_h: Vec<f64>,
    xi: Vec<f64>,
}

impl StepScratch {
    pub fn for_model(model: &ConditionalGaussianModel) -> Self {
        let no = model.n_obs();
        let nh = model.n_hidden();
        StepScratch {
            drift_o: vec![0.0; no],
            coupling: vec![0.0; no * nh],
            drift_h: vec![0.0; nh],
            feedback: vec![0.0; nh * nh],
            noise_o: vec![0.0; no * no],
            noise_h: vec![0.0; nh * nh],
            du_o: vec![0.0; no],
            du_h: vec![0.0; nh],
            xi: vec![0.0; no.max(nh)],
        }
    }
}

/// Advances a single sample by one Euler-Maruyama step in place. Drift and
/// noise coefficients are evaluated at the pre-step state; the observed
/// noise draws come first in the sample's stream, then the hidden ones.
#[inline]
pub fn step_sample(
    model: &ConditionalGaussianModel,
    t: f64,
    dt: f64,
    u_obs: &mut [f64],
    u_hid: &mut [f64],
    rng: &mut ChaCha12Rng,
    scratch: &mut StepScratch,
) {
    let no = model.n_obs();
    let nh = model.n_hidden();
    let sqdt = dt.sqrt();

    model.obs_drift_into(t, u_obs, &mut scratch.drift_o);
    model.obs_coupling_into(t, u_obs, &mut scratch.coupling);
    model.hidden_drift_into(t, u_obs, &mut scratch.drift_h);
    model.hidden_feedback_into(t, u_obs, &mut scratch.feedback);
    model.obs_noise_into(t, u_obs, &mut scratch.noise_o);
    model.hidden_noise_into(t, u_obs, &mut scratch.noise_h);

    for r in 0..no {
        let mut acc = scratch.drift_o[r];
        for c in 0..nh {
            acc += scratch.coupling[c * no + r] * u_hid[c];
        }
        scratch.du_o[r] = acc * dt;
    }
    for x in scratch.xi[..no].iter_mut() {
        *x = rng.sample(StandardNormal);
    }
    for r in 0..no {
        let mut acc = 0.0;
        for c in 0..no {
            acc += scratch.noise_o[c * no + r] * scratch.xi[c];
        }
        scratch.du_o[r] += sqdt * acc;
    }

    for r in 0..nh {
        let mut acc = scratch.drift_h[r];
        for c in 0..nh {
            acc += scratch.feedback[c * nh + r] * u_hid[c];
        }
        scratch.du_h[r] = acc * dt;
    }
    for x in scratch.xi[..nh].iter_mut() {
        *x = rng.sample(StandardNormal);
    }
    for r in 0..nh {
        let mut acc = 0.0;
        for c in 0..nh {
            acc += scratch.noise_h[c * nh + r] * scratch.xi[c];
        }
        scratch.du_h[r] += sqdt * acc;
    }

    for (u, du) in u_obs.iter_mut().zip(&scratch.du_o) {
        *u += du;
    }
    for (u, du) in u_hid.iter_mut().zip(&scratch.du_h) {
        *u += du;
    }
}

fn check_state(u_obs: &[f64], u_hid: &[f64], cap: f64, sample: usize, t: f64) -> Result<()> {
    for x in u_obs.iter().chain(u_hid) {
        if !x.is_finite() || x.abs() > cap {
            return Err(Error::BlowUp {
                sample,
                t,
                magnitude: x.abs(),
                cap,
            });
        }
    }
    Ok(())
}

/// Advances the whole ensemble by `dt`, a parallel map over samples.
pub fn step_euler_maruyama(
    model: &ConditionalGaussianModel,
    ensemble: &mut Ensemble,
    dt: f64,
    rng: &mut EnsembleRng,
    blowup_cap: f64,
) -> Result<()> {
    if !(dt > 0.0) {
        return Err(Error::config("dt must be positive"));
    }
    let t = ensemble.t;
    let no = ensemble.n_obs;
    let nh = ensemble.n_hidden;
    ensemble
        .obs
        .par_chunks_mut(no)
        .zip(ensemble.hidden.par_chunks_mut(nh))
        .zip(rng.rngs.par_iter_mut())
        .enumerate()
        .try_for_each_init(
            || StepScratch::for_model(model),
            |scratch, (i, ((uo, uh), r))| {
                step_sample(model, t, dt, uo, uh, r, scratch);
                check_state(uo, uh, blowup_cap, i, t + dt)
            },
        )?;
    ensemble.t = t + dt;
    Ok(())
}

/// Simulation controls. `store_stride` is the recording interval in steps;
/// use 1 when the stored trajectories will drive the filter.
#[derive(Clone, Debug)]
pub struct SimOptions {
    pub dt: f64,
    pub store_stride: usize,
    pub store_hidden: bool,
    pub blowup_cap: f64,
}

impl SimOptions {
    pub fn new(dt: f64) -> Self {
        SimOptions {
            dt,
            store_stride: 1,
            store_hidden: false,
            blowup_cap: DEFAULT_BLOWUP_CAP,
        }
    }

    pub fn store_stride(mut self, stride: usize) -> Self {
        self.store_stride = stride;
        self
    }

    pub fn store_hidden(mut self, yes: bool) -> Self {
        self.store_hidden = yes;
        self
    }

    pub fn blowup_cap(mut self, cap: f64) -> Self {
        self.blowup_cap = cap;
        self
    }
}

/// Recorded trajectories: strictly increasing times at a uniform stride,
/// observed states always, hidden states on request. Storage is time-major.
#[derive(Clone, Debug)]
pub struct TrajectoryStore {
    sim_dt: f64,
    stride: usize,
    times: Vec<f64>,
    l: usize,
    n_obs: usize,
    n_hidden: usize,
    obs: Vec<f64>,
    hidden: Option<Vec<f64>>,
}

impl TrajectoryStore {
    pub fn n_records(&self) -> usize {
        self.times.len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn time(&self, k: usize) -> f64 {
        self.times[k]
    }

    pub fn n_samples(&self) -> usize {
        self.l
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn n_hidden(&self) -> usize {
        self.n_hidden
    }

    /// Integration step of the run that produced this store.
    pub fn sim_dt(&self) -> f64 {
        self.sim_dt
    }

    /// Time between stored records.
    pub fn record_dt(&self) -> f64 {
        self.sim_dt * self.stride as f64
    }

    /// Whether every integration step was recorded (required to drive the
    /// filter, which consumes the observed increments).
    pub fn is_full_resolution(&self) -> bool {
        self.stride == 1
    }

    pub fn obs_at(&self, k: usize, i: usize) -> &[f64] {
        let base = (k * self.l + i) * self.n_obs;
        &self.obs[base..base + self.n_obs]
    }

    pub fn hidden_at(&self, k: usize, i: usize) -> Option<&[f64]> {
        self.hidden.as_ref().map(|h| {
            let base = (k * self.l + i) * self.n_hidden;
            &h[base..base + self.n_hidden]
        })
    }

    /// Flat `L x n_obs` snapshot of observed states at record `k`.
    pub fn obs_snapshot(&self, k: usize) -> &[f64] {
        &self.obs[k * self.l * self.n_obs..(k + 1) * self.l * self.n_obs]
    }

    pub fn hidden_snapshot(&self, k: usize) -> Option<&[f64]> {
        self.hidden
            .as_ref()
            .map(|h| &h[k * self.l * self.n_hidden..(k + 1) * self.l * self.n_hidden])
    }

    /// Builds a full-resolution store from explicit observed paths on a
    /// uniform time grid. `paths[i]` is sample i's observed trajectory,
    /// time-major with `n_obs` coordinates per record; all paths must have
    /// equal length. Optional hidden paths follow the same layout.
    pub fn from_obs_paths(
        t0: f64,
        dt: f64,
        n_obs: usize,
        paths: &[Vec<f64>],
        hidden: Option<(usize, Vec<Vec<f64>>)>,
    ) -> Result<Self> {
        if paths.is_empty() || n_obs == 0 {
            return Err(Error::config("need at least one path and one coordinate"));
        }
        let n_records = paths[0].len() / n_obs;
        if n_records < 2 || paths.iter().any(|p| p.len() != n_records * n_obs) {
            return Err(Error::config("paths must share a length of >= 2 records"));
        }
        let l = paths.len();
        let mut obs = vec![0.0; n_records * l * n_obs];
        for (i, p) in paths.iter().enumerate() {
            for k in 0..n_records {
                let dst = (k * l + i) * n_obs;
                obs[dst..dst + n_obs].copy_from_slice(&p[k * n_obs..(k + 1) * n_obs]);
            }
        }
        let (n_hidden, hidden) = match hidden {
            Some((nh, hpaths)) => {
                if hpaths.len() != l || hpaths.iter().any(|p| p.len() != n_records * nh) {
                    return Err(Error::config("hidden paths must match the observed layout"));
                }
                let mut h = vec![0.0; n_records * l * nh];
                for (i, p) in hpaths.iter().enumerate() {
                    for k in 0..n_records {
                        let dst = (k * l + i) * nh;
                        h[dst..dst + nh].copy_from_slice(&p[k * nh..(k + 1) * nh]);
                    }
                }
                (nh, Some(h))
            }
            None => (0, None),
        };
        Ok(TrajectoryStore {
            sim_dt: dt,
            stride: 1,
            times: (0..n_records).map(|k| t0 + k as f64 * dt).collect(),
            l,
            n_obs,
            n_hidden,
            obs,
            hidden,
        })
    }

    /// Per-coordinate moments across samples at record `k` (observed
    /// coordinates first, hidden appended when stored).
    pub fn moments_at(&self, k: usize) -> Result<Moments> {
        if self.l < 2 {
            return Err(Error::config("moments need at least two samples"));
        }
        let nh = if self.hidden.is_some() { self.n_hidden } else { 0 };
        let n = self.n_obs + nh;
        let mut mean = vec![0.0; n];
        let mut variance = vec![0.0; n];
        for i in 0..self.l {
            for (c, x) in self.obs_at(k, i).iter().enumerate() {
                mean[c] += x;
            }
            if nh > 0 {
                for (c, x) in self.hidden_at(k, i).unwrap().iter().enumerate() {
                    mean[self.n_obs + c] += x;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= self.l as f64);
        for i in 0..self.l {
            for (c, x) in self.obs_at(k, i).iter().enumerate() {
                let d = x - mean[c];
                variance[c] += d * d;
            }
            if nh > 0 {
                for (c, x) in self.hidden_at(k, i).unwrap().iter().enumerate() {
                    let d = x - mean[self.n_obs + c];
                    variance[self.n_obs + c] += d * d;
                }
            }
        }
        variance.iter_mut().for_each(|v| *v /= (self.l - 1) as f64);
        Ok(Moments { mean, variance })
    }
}

/// Runs the ensemble from `init.t()` to `t_end`, recording every
/// `store_stride`-th state (the initial state is always record 0). Returns
/// the store together with the final ensemble.
pub fn simulate(
    model: &ConditionalGaussianModel,
    init: Ensemble,
    t_end: f64,
    opts: &SimOptions,
    policy: &RngPolicy,
) -> Result<(TrajectoryStore, Ensemble)> {
    if init.n_obs != model.n_obs() {
        return Err(Error::DimensionMismatch {
            context: "ensemble vs model (observed)",
            expected: model.n_obs(),
            got: init.n_obs,
        });
    }
    if init.n_hidden != model.n_hidden() {
        return Err(Error::DimensionMismatch {
            context: "ensemble vs model (hidden)",
            expected: model.n_hidden(),
            got: init.n_hidden,
        });
    }
    if !(t_end > init.t) {
        return Err(Error::config("t_end must exceed the initial time"));
    }
    if opts.store_stride == 0 {
        return Err(Error::config("store_stride must be at least 1"));
    }
    let t0 = init.t;
    let n_steps = ((t_end - t0) / opts.dt).round() as usize;
    if n_steps == 0 {
        return Err(Error::config("horizon shorter than one step"));
    }
    let l = init.n_samples();
    let n_records = n_steps / opts.store_stride + 1;
    let mut store = TrajectoryStore {
        sim_dt: opts.dt,
        stride: opts.store_stride,
        times: Vec::with_capacity(n_records),
        l,
        n_obs: init.n_obs,
        n_hidden: init.n_hidden,
        obs: Vec::with_capacity(n_records * l * init.n_obs),
        hidden: opts
            .store_hidden
            .then(|| Vec::with_capacity(n_records * l * init.n_hidden)),
    };

    let mut ensemble = init;
    let mut rng = EnsembleRng::for_ensemble(policy, &ensemble);
    let record = |ens: &Ensemble, store: &mut TrajectoryStore| {
        store.times.push(ens.t);
        store.obs.extend_from_slice(&ens.obs);
        if let Some(h) = store.hidden.as_mut() {
            h.extend_from_slice(&ens.hidden);
        }
    };
    record(&ensemble, &mut store);
    for k in 0..n_steps {
        ensemble.t = t0 + k as f64 * opts.dt;
        step_euler_maruyama(model, &mut ensemble, opts.dt, &mut rng, opts.blowup_cap)?;
        ensemble.t = t0 + (k + 1) as f64 * opts.dt;
        if (k + 1) % opts.store_stride == 0 {
            record(&ensemble, &mut store);
        }
    }
    Ok((store, ensemble))
}
