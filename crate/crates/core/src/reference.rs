//! Brute-force Monte Carlo reference densities.
//!
//! Transient and long-time densities of the test systems have no closed
//! form, so reference solutions come from large direct simulations binned
//! on the evaluation grid (optionally smoothed with a separable Gaussian,
//! i.e. a binned kernel estimate). The bin counts are accumulated exactly
//! as integers per thread and reduced by summation, so the oracle is
//! deterministic under the usual per-sample streams regardless of thread
//! scheduling.

use rayon::prelude::*;

use crate::density::GridDensity;
use crate::error::{Error, Result};
use crate::model::ConditionalGaussianModel;
use crate::rng::{RngPolicy, StreamKind};
use crate::sde::{step_sample, StepScratch, DEFAULT_BLOWUP_CAP};

/// Which joint coordinates a reference grid covers (indices into
/// `(obs..., hidden...)`).
#[derive(Clone, Debug)]
pub struct ReferenceGrid {
    pub coords: Vec<usize>,
    pub axes: Vec<Vec<f64>>,
    /// Standard deviation of the separable Gaussian smoother, in cells;
    /// zero keeps the raw histogram.
    pub smoothing_cells: f64,
}

#[derive(Clone, Debug)]
pub struct ReferenceConfig {
    pub l_ref: usize,
    pub dt: f64,
    pub blowup_cap: f64,
}

impl ReferenceConfig {
    pub fn new(l_ref: usize, dt: f64) -> Self {
        ReferenceConfig {
            l_ref,
            dt,
            blowup_cap: DEFAULT_BLOWUP_CAP,
        }
    }
}

/// Densities and raw moments produced by one oracle run.
#[derive(Clone, Debug)]
pub struct ReferenceOutput {
    /// `densities[s][g]`: snapshot `s`, grid `g`.
    pub densities: Vec<Vec<GridDensity>>,
    /// Per-coordinate mean over `(obs..., hidden...)` at each snapshot.
    pub mean: Vec<Vec<f64>>,
    /// Per-coordinate unbiased variance at each snapshot.
    pub variance: Vec<Vec<f64>>,
}

struct SnapshotAccumulator {
    counts: Vec<Vec<u64>>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

/// Simulates `l_ref` independent paths from the origin and histograms the
/// requested coordinate subsets at every snapshot time. Axes must be
/// uniform; values are densities at cell centers.
pub fn mc_reference(
    model: &ConditionalGaussianModel,
    snapshot_times: &[f64],
    grids: &[ReferenceGrid],
    cfg: &ReferenceConfig,
    policy: &RngPolicy,
) -> Result<ReferenceOutput> {
    let no = model.n_obs();
    let nh = model.n_hidden();
    let n_tot = no + nh;
    if snapshot_times.is_empty() {
        return Err(Error::config("need at least one snapshot time"));
    }
    if snapshot_times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("snapshot times must be strictly increasing"));
    }
    if cfg.l_ref < 2 {
        return Err(Error::config("reference needs at least two samples"));
    }
    for g in grids {
        if g.coords.is_empty() || g.coords.iter().any(|&c| c >= n_tot) {
            return Err(Error::config("grid coordinates out of range"));
        }
        if g.axes.len() != g.coords.len() {
            return Err(Error::config("grid axes/coords mismatch"));
        }
        for axis in &g.axes {
            if axis.len() < 2 {
                return Err(Error::config("axes need at least two points"));
            }
            let h = axis[1] - axis[0];
            if axis.windows(2).any(|w| ((w[1] - w[0]) - h).abs() > 1e-9 * h) {
                return Err(Error::config("histogram axes must be uniform"));
            }
        }
    }
    let snap_steps: Vec<usize> = snapshot_times
        .iter()
        .map(|&t| (t / cfg.dt).round() as usize)
        .collect();
    if snap_steps[0] == 0 {
        return Err(Error::config("snapshot times must be positive"));
    }
    let n_steps = *snap_steps.last().unwrap();

    let new_acc = || SnapshotAccumulator {
        counts: grids
            .iter()
            .map(|g| vec![0u64; g.axes.iter().map(|a| a.len()).product()])
            .collect(),
        sum: vec![0.0; n_tot],
        sum_sq: vec![0.0; n_tot],
    };

    // Deposit one sample into a histogram: nearest cell center wins.
    let deposit = |acc: &mut SnapshotAccumulator, joint: &[f64]| {
        for (g, grid) in grids.iter().enumerate() {
            let mut flat = 0usize;
            let mut inside = true;
            for (d, &coord) in grid.coords.iter().enumerate() {
                let axis = &grid.axes[d];
                let h = axis[1] - axis[0];
                let pos = (joint[coord] - axis[0]) / h;
                let idx = pos.round();
                if idx < 0.0 || idx >= axis.len() as f64 {
                    inside = false;
                    break;
                }
                flat = flat * axis.len() + idx as usize;
            }
            if inside {
                acc.counts[g][flat] += 1;
            }
        }
        for (c, x) in joint.iter().enumerate() {
            acc.sum[c] += x;
            acc.sum_sq[c] += x * x;
        }
    };

    let n_chunks = (rayon::current_num_threads() * 4).max(1);
    let chunk = cfg.l_ref.div_ceil(n_chunks);
    let partials: Result<Vec<Vec<SnapshotAccumulator>>> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| -> Result<Vec<SnapshotAccumulator>> {
            let lo = ci * chunk;
            let hi = ((ci + 1) * chunk).min(cfg.l_ref);
            let mut accs: Vec<SnapshotAccumulator> =
                snap_steps.iter().map(|_| new_acc()).collect();
            let mut scratch = StepScratch::for_model(model);
            let mut joint = vec![0.0; n_tot];
            for i in lo..hi {
                let mut rng = policy.stream(StreamKind::Path, i as u64);
                let mut uo = vec![0.0; no];
                let mut uh = vec![0.0; nh];
                let mut snap = 0usize;
                for k in 0..n_steps {
                    let t = k as f64 * cfg.dt;
                    step_sample(model, t, cfg.dt, &mut uo, &mut uh, &mut rng, &mut scratch);
                    if k + 1 == snap_steps[snap] {
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
                        joint[..no].copy_from_slice(&uo);
                        joint[no..].copy_from_slice(&uh);
                        deposit(&mut accs[snap], &joint);
                        snap += 1;
                        if snap == snap_steps.len() {
                            break;
                        }
                    }
                }
            }
            Ok(accs)
        })
        .collect();
    let partials = partials?;

    let mut merged: Vec<SnapshotAccumulator> = snap_steps.iter().map(|_| new_acc()).collect();
    for chunk_accs in partials {
        for (dst, src) in merged.iter_mut().zip(chunk_accs) {
            for (dc, sc) in dst.counts.iter_mut().zip(&src.counts) {
                for (d, s) in dc.iter_mut().zip(sc) {
                    *d += s;
                }
            }
            for (d, s) in dst.sum.iter_mut().zip(&src.sum) {
                *d += s;
            }
            for (d, s) in dst.sum_sq.iter_mut().zip(&src.sum_sq) {
                *d += s;
            }
        }
    }

    let l = cfg.l_ref as f64;
    let mut densities = Vec::with_capacity(snap_steps.len());
    let mut means = Vec::with_capacity(snap_steps.len());
    let mut variances = Vec::with_capacity(snap_steps.len());
    for acc in &merged {
        let mut per_grid = Vec::with_capacity(grids.len());
        for (g, grid) in grids.iter().enumerate() {
            let cell_volume: f64 = grid.axes.iter().map(|a| a[1] - a[0]).product();
            let mut values: Vec<f64> = acc.counts[g]
                .iter()
                .map(|&c| c as f64 / (l * cell_volume))
                .collect();
            if grid.smoothing_cells > 0.0 {
                values = smooth_separable(
                    &values,
                    &grid.axes.iter().map(|a| a.len()).collect::<Vec<_>>(),
                    grid.smoothing_cells,
                );
            }
            per_grid.push(GridDensity::from_values(grid.axes.clone(), values)?);
        }
        densities.push(per_grid);
        means.push(acc.sum.iter().map(|s| s / l).collect::<Vec<f64>>());
        variances.push(
            acc.sum
                .iter()
                .zip(&acc.sum_sq)
                .map(|(s, ss)| (ss - s * s / l) / (l - 1.0))
                .collect::<Vec<f64>>(),
        );
    }
    Ok(ReferenceOutput {
        densities,
        mean: means,
        variance: variances,
    })
}

/// Separable Gaussian smoothing on a row-major tensor grid, sigma in cells,
/// kernel truncated at four sigmas and renormalized.
fn smooth_separable(values: &[f64], dims: &[usize], sigma_cells: f64) -> Vec<f64> {
    let radius = (4.0 * sigma_cells).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-0.5 * (k as f64 / sigma_cells).powi(2)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();

    let mut current = values.to_vec();
    let mut strides = vec![1usize; dims.len()];
    for d in (0..dims.len() - 1).rev() {
        strides[d] = strides[d + 1] * dims[d + 1];
    }
    let total = values.len();
    for d in 0..dims.len() {
        let mut next = vec![0.0; total];
        let n = dims[d] as isize;
        let stride = strides[d] as isize;
        for flat in 0..total as isize {
            let idx = (flat / stride) % n;
            let mut acc = 0.0;
            let mut weight = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let off = ki as isize - radius;
                let j = idx + off;
                if j < 0 || j >= n {
                    continue;
                }
                acc += kv * current[(flat + off * stride) as usize];
                weight += kv;
            }
            next[flat as usize] = acc / weight;
        }
        current = next;
    }
    current
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::linspace;
    use crate::model::constant_model;
    use nalgebra::{DMatrix, DVector};

    /// Pure OU in both blocks: at t the law is N(0, (1 - e^{-2t})/2) per
    /// coordinate (continuous time), so the histogram density at 0 should
    /// be close to the Gaussian peak.
    #[test]
    fn ou_reference_matches_gaussian_law() {
        let model = constant_model(
            DVector::zeros(1),
            DMatrix::zeros(1, 1),
            DVector::zeros(1),
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        // Only the hidden coordinate (index 1) is driven toward
        // stationarity; the observed block is Brownian.
        let grid = ReferenceGrid {
            coords: vec![1],
            axes: vec![linspace(-4.0, 4.0, 81)],
            smoothing_cells: 1.0,
        };
        let out = mc_reference(
            &model,
            &[3.0],
            &[grid],
            &ReferenceConfig::new(200_000, 1e-2),
            &RngPolicy::new(21),
        )
        .unwrap();
        let var = out.variance[0][1];
        let want_var = 0.5 * (1.0 - (-6.0_f64).exp());
        assert!((var - want_var).abs() < 0.01, "{var} vs {want_var}");

        let density = &out.densities[0][0];
        let peak = density
            .values()
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let want_peak = 1.0 / (2.0 * std::f64::consts::PI * want_var).sqrt();
        assert!((peak - want_peak).abs() < 0.02 * want_peak);
        assert!((density.mass() - 1.0).abs() < 0.01);
    }

    #[test]
    fn reference_is_deterministic() {
        let model = constant_model(
            DVector::zeros(1),
            DMatrix::zeros(1, 1),
            DVector::zeros(1),
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let grid = ReferenceGrid {
            coords: vec![0, 1],
            axes: vec![linspace(-4.0, 4.0, 21), linspace(-4.0, 4.0, 21)],
            smoothing_cells: 0.0,
        };
        let run = || {
            mc_reference(
                &model,
                &[0.5],
                std::slice::from_ref(&grid),
                &ReferenceConfig::new(5000, 1e-2),
                &RngPolicy::new(9),
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.densities[0][0].values(), b.densities[0][0].values());
        assert_eq!(a.mean[0], b.mean[0]);
    }
}
