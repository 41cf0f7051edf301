//! The four experiment commands: simulate, estimate, compare, diagnose.

use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::Value;

use cghybrid::density::{axes_from_stats, Bandwidth, HybridMixture};
use cghybrid::diagnostics::{
    gramians, mise_scaling_experiment, r2_lower_bound, r2_upper_bound, EstimatorKind,
    ScalingConfig, ScalingReferences,
};
use cghybrid::filter::{riccati_contraction_experiment, run_filters, FilterInit, FilterOptions};
use cghybrid::model::{check_dissipativity, check_energy_conservation};
use cghybrid::pipeline::{run_hybrid_pipeline, PipelineConfig};
use cghybrid::reference::{mc_reference, ReferenceConfig, ReferenceGrid};
use cghybrid::rng::RngPolicy;
use cghybrid::sde::{simulate, Ensemble, SimOptions};
use cghybrid::Error as CoreError;

use crate::artifacts::{time_label, ArtifactWriter};
use crate::config::RunConfig;

pub enum CommandError {
    Config(String),
    Numerical(String),
    CheckFailed(String),
    Io(std::io::Error),
}

impl From<std::io::Error> for CommandError {
    fn from(e: std::io::Error) -> Self {
        CommandError::Io(e)
    }
}

impl From<CoreError> for CommandError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::BlowUp { .. } | CoreError::FilterDiverged { .. } => {
                CommandError::Numerical(e.to_string())
            }
            other => CommandError::Config(other.to_string()),
        }
    }
}

impl From<crate::config::ConfigError> for CommandError {
    fn from(e: crate::config::ConfigError) -> Self {
        CommandError::Config(e.to_string())
    }
}

fn upper_triangle(cov: &DMatrix<f64>) -> Vec<f64> {
    let n = cov.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for r in 0..n {
        for c in r..n {
            out.push(cov[(r, c)]);
        }
    }
    out
}

pub fn cmd_simulate(
    cfg: &RunConfig,
    raw_config: Value,
    mut writer: ArtifactWriter,
) -> Result<(), CommandError> {
    let model = cfg.build_model()?;
    let policy = RngPolicy::new(cfg.sim.seed);
    let init = Ensemble::at_origin(cfg.sim.l_samples, model.n_obs(), model.n_hidden())?;
    let opts = SimOptions::new(cfg.sim.dt)
        .store_stride(cfg.sim.store_stride)
        .store_hidden(true)
        .blowup_cap(cfg.sim.blowup_cap);
    let (store, _) = simulate(&model, init, cfg.sim.t_end, &opts, &policy)?;

    let names: Vec<String> = model
        .obs_names()
        .iter()
        .chain(model.hidden_names())
        .cloned()
        .collect();

    let mut rows = Vec::with_capacity(store.n_records() * store.n_samples());
    for k in 0..store.n_records() {
        for i in 0..store.n_samples() {
            let mut row = vec![i as f64, store.time(k)];
            row.extend_from_slice(store.obs_at(k, i));
            row.extend_from_slice(store.hidden_at(k, i).unwrap());
            rows.push(row);
        }
    }
    writer.write_csv(
        "trajectories.csv",
        &format!("sample,t,{}", names.join(",")),
        &rows,
    )?;

    if store.n_samples() >= 2 {
        let mut rows = Vec::with_capacity(store.n_records());
        for k in 0..store.n_records() {
            let m = store.moments_at(k)?;
            let mut row = vec![store.time(k)];
            row.extend(m.variance);
            rows.push(row);
        }
        let var_cols: Vec<String> = names.iter().map(|n| format!("var_{n}")).collect();
        writer.write_csv("variance.csv", &format!("t,{}", var_cols.join(",")), &rows)?;
    }

    let mut amplitude: f64 = 0.0;
    for k in 0..store.n_records() {
        for i in 0..store.n_samples() {
            for x in store.obs_at(k, i).iter().chain(store.hidden_at(k, i).unwrap()) {
                amplitude = amplitude.max(x.abs());
            }
        }
    }
    if amplitude > 0.01 * cfg.sim.blowup_cap {
        writer.warn(format!(
            "state amplitudes reached {amplitude:.3e} (cap {:.1e}): unbounded growth suspected",
            cfg.sim.blowup_cap
        ));
    }

    writer.finish("simulate", raw_config, cfg.sim.seed, None)?;
    Ok(())
}

fn bandwidth_for(
    cfg: &RunConfig,
    data: &[f64],
    dim: usize,
    l: usize,
) -> Result<Bandwidth, CommandError> {
    let bw = &cfg.estimate.bandwidth;
    match bw.policy.as_str() {
        "silverman" => Ok(Bandwidth::silverman(data, dim)?),
        _ => {
            let factors = match &bw.factors {
                Some(f) if f.len() >= dim => f[..dim].to_vec(),
                Some(_) => {
                    return Err(CommandError::Config(
                        "bandwidth.factors shorter than the kernel dimension".into(),
                    ))
                }
                None => (0..dim)
                    .map(|c| {
                        let mean = data.iter().skip(c).step_by(dim).sum::<f64>() / l as f64;
                        let var = data
                            .iter()
                            .skip(c)
                            .step_by(dim)
                            .map(|x| (x - mean) * (x - mean))
                            .sum::<f64>()
                            / (l - 1) as f64;
                        var.sqrt().max(1e-12)
                    })
                    .collect(),
            };
            Ok(Bandwidth::scaling(l, dim, bw.kappa, factors)?)
        }
    }
}

/// Emits every 1D marginal and, when the total dimension is at most 3,
/// every 2D pair marginal of `mixture` under the given file prefix.
fn emit_panels(
    writer: &mut ArtifactWriter,
    prefix: &str,
    label: &str,
    mixture: &HybridMixture,
    names: &[String],
    grid_cfg: &crate::config::GridConfig,
) -> Result<(), CommandError> {
    let moments = mixture.moments();
    let stds: Vec<f64> = moments.variance.iter().map(|v| v.sqrt().max(1e-6)).collect();
    let axes = axes_from_stats(
        &moments.mean,
        &stds,
        grid_cfg.pad_stds,
        grid_cfg.points_per_axis,
    );
    let dim = mixture.dim();
    let coord_kind = |c: usize| -> (Vec<usize>, Vec<usize>) {
        if c < mixture.n_obs() {
            (vec![c], vec![])
        } else {
            (vec![], vec![c - mixture.n_obs()])
        }
    };
    // 1D marginals.
    for c in 0..dim {
        let (ko, kh) = coord_kind(c);
        let marg = mixture.marginalize(&ko, &kh)?;
        let grid = marg.grid_density(vec![axes[c].clone()])?;
        let mut rows = Vec::with_capacity(grid.n_points());
        for (k, v) in grid.values().iter().enumerate() {
            rows.push(vec![grid.axes()[0][k], *v]);
        }
        writer.write_csv(
            &format!("{prefix}_p_{}_{label}.csv", names[c]),
            &format!("{},density", names[c]),
            &rows,
        )?;
    }
    // 2D pair marginals for small systems.
    if dim <= 3 && dim >= 2 {
        for a in 0..dim {
            for b in (a + 1)..dim {
                let (mut ko, mut kh) = coord_kind(a);
                let (ko2, kh2) = coord_kind(b);
                ko.extend(ko2);
                kh.extend(kh2);
                let marg = mixture.marginalize(&ko, &kh)?;
                let grid = marg.grid_density(vec![axes[a].clone(), axes[b].clone()])?;
                let nb = axes[b].len();
                let mut rows = Vec::with_capacity(grid.n_points());
                for (k, v) in grid.values().iter().enumerate() {
                    rows.push(vec![axes[a][k / nb], axes[b][k % nb], *v]);
                }
                writer.write_csv(
                    &format!("{prefix}_p_{}_{}_{label}.csv", names[a], names[b]),
                    &format!("{},{},density", names[a], names[b]),
                    &rows,
                )?;
            }
        }
    }
    Ok(())
}

pub fn cmd_estimate(
    cfg: &RunConfig,
    raw_config: Value,
    mut writer: ArtifactWriter,
) -> Result<(), CommandError> {
    let model = cfg.build_model()?;
    let policy = RngPolicy::new(cfg.sim.seed);
    let (no, nh) = (model.n_obs(), model.n_hidden());
    let names: Vec<String> = model
        .obs_names()
        .iter()
        .chain(model.hidden_names())
        .cloned()
        .collect();

    let mut t_evals = cfg.estimate.t_eval.clone();
    t_evals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    t_evals.dedup();
    let mut degenerate_total = None;
    if t_evals.is_empty() {
        writer.finish("estimate", raw_config, cfg.sim.seed, None)?;
        return Ok(());
    }

    let init = Ensemble::at_origin(cfg.sim.l_samples, no, nh)?;
    let pipe = PipelineConfig::new(cfg.sim.dt, t_evals.clone(), nh);
    let out = run_hybrid_pipeline(&model, &init, &pipe, &policy)?;

    for snap in &out.snapshots {
        let label = time_label(snap.t);
        let l = snap.states.len();
        let degenerate = snap.degenerate_count();
        degenerate_total = Some(degenerate_total.unwrap_or(0).max(degenerate));

        // Posterior statistics export (mean, covariance upper triangle,
        // degeneracy flag per sample).
        let mut rows = Vec::with_capacity(l);
        for (i, st) in snap.states.iter().enumerate() {
            let mut row = vec![i as f64, snap.t];
            row.extend(st.mean.iter().cloned());
            row.extend(upper_triangle(&st.cov));
            row.push(if snap.degenerate[i] { 1.0 } else { 0.0 });
            rows.push(row);
        }
        let mean_cols: Vec<String> = model.hidden_names().iter().map(|n| format!("mean_{n}")).collect();
        let mut cov_cols = Vec::new();
        for r in 0..nh {
            for c in r..nh {
                cov_cols.push(format!("cov_{}{}", r + 1, c + 1));
            }
        }
        writer.write_csv(
            &format!("posterior_{label}.csv"),
            &format!("sample,t,{},{},degenerate", mean_cols.join(","), cov_cols.join(",")),
            &rows,
        )?;

        let bw_obs = bandwidth_for(cfg, &snap.obs, no, l)?;
        let hybrid = HybridMixture::build_hybrid(
            &snap.obs,
            no,
            &snap.states,
            &bw_obs,
            cfg.estimate.regularization,
        )?;

        // Mixture snapshot: component parameters.
        let mut rows = Vec::with_capacity(l);
        for i in 0..l {
            let mut row = vec![i as f64];
            row.extend_from_slice(hybrid.obs_center(i));
            row.extend_from_slice(hybrid.hidden_mean(i));
            row.extend(upper_triangle(&hybrid.hidden_cov(i)));
            row.push(if hybrid.degenerate_flags()[i] { 1.0 } else { 0.0 });
            rows.push(row);
        }
        let center_cols: Vec<String> =
            model.obs_names().iter().map(|n| format!("center_{n}")).collect();
        writer.write_csv(
            &format!("mixture_{label}.csv"),
            &format!(
                "component,{},{},{},degenerate",
                center_cols.join(","),
                mean_cols.join(","),
                cov_cols.join(",")
            ),
            &rows,
        )?;

        for estimator in &cfg.estimate.estimators {
            match estimator.as_str() {
                "hybrid" => {
                    emit_panels(&mut writer, "hybrid", &label, &hybrid, &names, &cfg.estimate.grid)?
                }
                "direct" => {
                    let joint = snap.joint_flat(no, nh);
                    let bw_joint = bandwidth_for(cfg, &joint, no + nh, l)?;
                    let direct = HybridMixture::build_direct_kde(&joint, no + nh, &bw_joint)?;
                    emit_panels(&mut writer, "direct", &label, &direct, &names, &cfg.estimate.grid)?;
                }
                "marginal_hidden" => {
                    let marg = hybrid.marginal_hidden()?;
                    let hidden_names = &names[no..];
                    emit_panels(
                        &mut writer,
                        "marginal_hidden",
                        &label,
                        &marg,
                        hidden_names,
                        &cfg.estimate.grid,
                    )?;
                }
                "marginal_observed" => {
                    let marg = hybrid.marginal_observed()?;
                    emit_panels(
                        &mut writer,
                        "marginal_observed",
                        &label,
                        &marg,
                        &names[..no],
                        &cfg.estimate.grid,
                    )?;
                }
                other => {
                    return Err(CommandError::Config(format!("unknown estimator '{other}'")))
                }
            }
        }
    }

    if out.worst_pre_floor_eig < -1.0 {
        writer.warn(format!(
            "large covariance floor corrections (worst pre-floor eigenvalue {})",
            out.worst_pre_floor_eig
        ));
    }
    writer.finish("estimate", raw_config, cfg.sim.seed, degenerate_total)?;
    Ok(())
}

#[derive(Serialize)]
struct SlopeEntry {
    estimator: String,
    slope: f64,
    expected: f64,
}

#[derive(Serialize)]
struct BoundCheck {
    estimator: String,
    l: usize,
    variance: f64,
    variance_se: f64,
    bound: f64,
    holds_at_3_sigma: bool,
}

pub fn cmd_compare(
    cfg: &RunConfig,
    raw_config: Value,
    mut writer: ArtifactWriter,
    check: bool,
) -> Result<(), CommandError> {
    let model = cfg.build_model()?;
    let policy = RngPolicy::new(cfg.sim.seed);
    let (no, nh) = (model.n_obs(), model.n_hidden());
    let n_tot = no + nh;
    let cc = &cfg.compare;

    // Reference axes from a pilot run, then the full oracle histogram.
    let ref_policy = policy.derived(0xB0A7);
    let pilot = mc_reference(
        &model,
        &[cc.t_eval],
        &[],
        &ReferenceConfig::new(20_000, cc.reference.dt),
        &ref_policy.derived(1),
    )?;
    let stds: Vec<f64> = pilot.variance[0].iter().map(|v| v.sqrt()).collect();
    let axes = axes_from_stats(
        &pilot.mean[0],
        &stds,
        cc.reference.pad_stds,
        cc.reference.points_per_axis,
    );
    let hidden_axes = axes_from_stats(
        &pilot.mean[0][no..],
        &stds[no..],
        cc.reference.pad_stds,
        cc.reference.hidden_points,
    );
    let grids = vec![
        ReferenceGrid {
            coords: (0..n_tot).collect(),
            axes: axes.clone(),
            smoothing_cells: cc.reference.smoothing_cells,
        },
        ReferenceGrid {
            coords: (no..n_tot).collect(),
            axes: hidden_axes,
            smoothing_cells: cc.reference.smoothing_cells,
        },
    ];
    let oracle = mc_reference(
        &model,
        &[cc.t_eval],
        &grids,
        &ReferenceConfig::new(cc.reference.l_ref, cc.reference.dt),
        &ref_policy,
    )?;
    let references = ScalingReferences {
        joint: oracle.densities[0][0].clone(),
        hidden: oracle.densities[0][1].clone(),
    };

    let scaling_cfg = ScalingConfig {
        ls: cc.l_values.clone(),
        t_eval: cc.t_eval,
        dt: cfg.sim.dt,
        n_repeats: cc.n_repeats,
        kappa: cc.kappa,
        delta: cfg.estimate.regularization,
    };
    let reports = mise_scaling_experiment(&model, &scaling_cfg, &references, &policy)?;

    let mut rows = Vec::new();
    let mut slopes = Vec::new();
    let mut checks = Vec::new();
    for report in &reports {
        let (name, expected) = match report.estimator {
            EstimatorKind::HybridJoint => ("hybrid", -4.0 / (4.0 + no as f64)),
            EstimatorKind::DirectKde => ("direct", -4.0 / (4.0 + n_tot as f64)),
            EstimatorKind::MarginalHidden => ("marginal_hidden", -1.0),
        };
        for e in &report.entries {
            rows.push(vec![
                match report.estimator {
                    EstimatorKind::HybridJoint => 0.0,
                    EstimatorKind::DirectKde => 1.0,
                    EstimatorKind::MarginalHidden => 2.0,
                },
                e.l as f64,
                e.mise,
                e.bias,
                e.variance,
                e.variance_bound,
            ]);
            checks.push(BoundCheck {
                estimator: name.to_string(),
                l: e.l,
                variance: e.variance,
                variance_se: e.variance_se,
                bound: e.variance_bound,
                holds_at_3_sigma: e.variance <= e.variance_bound + 3.0 * e.variance_se,
            });
        }
        slopes.push(SlopeEntry {
            estimator: name.to_string(),
            slope: report.slope,
            expected,
        });
    }
    writer.write_csv(
        "scaling.csv",
        "estimator,l,mise,bias,variance,variance_bound",
        &rows,
    )?;
    writer.write_json("slopes.json", &slopes)?;
    writer.write_json("bound_checks.json", &checks)?;

    let failed: Vec<&BoundCheck> = checks.iter().filter(|c| !c.holds_at_3_sigma).collect();
    let failures = failed
        .iter()
        .map(|c| format!("{} at L = {}", c.estimator, c.l))
        .collect::<Vec<_>>()
        .join("; ");
    writer.finish("compare", raw_config, cfg.sim.seed, None)?;
    if check && !failures.is_empty() {
        return Err(CommandError::CheckFailed(format!(
            "sampling bound violated: {failures}"
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct BoundRow {
    t: f64,
    lower_applicable: bool,
    h: Option<f64>,
    min_eig: f64,
    lower_holds: Option<bool>,
    upper_applicable: bool,
    g: Option<f64>,
    cov_norm: f64,
    upper_holds: Option<bool>,
}

#[derive(Serialize)]
struct MatrixReport {
    rows: Vec<Vec<f64>>,
    min_eig: f64,
    max_eig: f64,
}

fn matrix_report(m: &DMatrix<f64>) -> MatrixReport {
    let sym = (m + m.transpose()) * 0.5;
    let eigs = sym.symmetric_eigenvalues();
    MatrixReport {
        rows: (0..m.nrows())
            .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
            .collect(),
        min_eig: eigs.iter().cloned().fold(f64::INFINITY, f64::min),
        max_eig: eigs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    }
}

#[derive(Serialize)]
struct DiagnoseReport {
    /// The covariance bounds are derived for hidden dimension >= 2; with a
    /// scalar hidden block they are evaluated outside that hypothesis.
    bounds_hypothesis_met: bool,
    energy_max_violation: f64,
    dissipativity_rho: f64,
    dissipativity_offset: f64,
    dissipativity_satisfied: bool,
    stability: cghybrid::model::StabilityConstants,
    gramian_window: (f64, f64),
    flow_condition_number: f64,
    controllability: MatrixReport,
    observability: MatrixReport,
    bounds: Vec<BoundRow>,
    contraction_initial: f64,
    contraction_final: f64,
}

pub fn cmd_diagnose(
    cfg: &RunConfig,
    raw_config: Value,
    mut writer: ArtifactWriter,
    check: bool,
) -> Result<(), CommandError> {
    let model = cfg.build_model()?;
    let energy = cfg.build_energy_model()?;
    let policy = RngPolicy::new(cfg.sim.seed);
    let dc = &cfg.diagnose;

    let energy_report = check_energy_conservation(&energy, 200, cfg.sim.seed)?;
    let dissipativity = check_dissipativity(&model, 400, 10.0, cfg.sim.seed)?;
    let stability = energy.stability_constants(200, cfg.sim.seed);

    let mut horizon: f64 = dc.horizon.max(dc.gramian_t);
    for &t in &dc.t_checks {
        horizon = horizon.max(t);
    }
    let init = Ensemble::at_origin(1, model.n_obs(), model.n_hidden())?;
    let opts = SimOptions::new(cfg.sim.dt)
        .store_hidden(true)
        .blowup_cap(cfg.sim.blowup_cap);
    let (store, _) = simulate(&model, init, horizon, &opts, &policy)?;

    let gramian = gramians(&model, &store, 0, dc.gramian_t - 1.0, dc.gramian_t)?;

    let run = run_filters(
        &model,
        &store,
        &FilterInit::FromStoredHidden {
            cov0: DMatrix::zeros(model.n_hidden(), model.n_hidden()),
        },
        &FilterOptions::default(),
    )?;
    let record_of = |t: f64| ((t - store.time(0)) / store.record_dt()).round() as usize;
    let mut bounds = Vec::new();
    for &t in &dc.t_checks {
        let state = run.state_at(record_of(t), 0);
        let min_eig = state.min_eig();
        let cov_norm = state
            .cov
            .symmetric_eigenvalues()
            .iter()
            .map(|e| e.abs())
            .fold(0.0, f64::max);
        let h = r2_lower_bound(&stability, &store, 0, t)?;
        let g = r2_upper_bound(&model, &stability, &store, 0, t)?;
        bounds.push(BoundRow {
            t,
            lower_applicable: h.is_some(),
            h,
            min_eig,
            lower_holds: h.map(|h| min_eig >= 1.0 / h),
            upper_applicable: g.is_some(),
            g,
            cov_norm,
            upper_holds: g.map(|g| cov_norm <= g),
        });
    }

    let series = riccati_contraction_experiment(
        &model,
        &store,
        0,
        &(DMatrix::identity(model.n_hidden(), model.n_hidden()) * dc.r0),
        &(DMatrix::identity(model.n_hidden(), model.n_hidden()) * dc.r0_prime),
        ((0.1 / cfg.sim.dt).round() as usize).max(1),
    )?;
    let contraction_rows: Vec<Vec<f64>> = series
        .iter()
        .take_while(|(t, _)| *t <= dc.horizon + 1e-9)
        .map(|(t, d)| vec![*t, *d])
        .collect();
    writer.write_csv("contraction.csv", "t,distance", &contraction_rows)?;

    let report = DiagnoseReport {
        bounds_hypothesis_met: model.n_hidden() >= 2,
        energy_max_violation: energy_report.max_violation,
        dissipativity_rho: dissipativity.rho_hat,
        dissipativity_offset: dissipativity.de_hat,
        dissipativity_satisfied: dissipativity.satisfied,
        stability,
        gramian_window: (dc.gramian_t - 1.0, dc.gramian_t),
        flow_condition_number: gramian.flow_condition_number,
        controllability: matrix_report(&gramian.controllability),
        observability: matrix_report(&gramian.observability),
        bounds,
        contraction_initial: contraction_rows.first().map(|r| r[1]).unwrap_or(0.0),
        contraction_final: contraction_rows.last().map(|r| r[1]).unwrap_or(0.0),
    };
    for b in &report.bounds {
        if !b.lower_applicable || !b.upper_applicable {
            writer.warn(format!(
                "covariance bound vacuous at t = {} (degenerate noise or no finite controllability constant)",
                b.t
            ));
        }
    }
    writer.write_json("diagnostics.json", &report)?;
    writer.finish("diagnose", raw_config, cfg.sim.seed, None)?;

    if check {
        let mut failures = Vec::new();
        for b in &report.bounds {
            if b.lower_holds == Some(false) {
                failures.push(format!("lower covariance bound violated at t = {}", b.t));
            }
            if b.upper_holds == Some(false) {
                failures.push(format!("upper covariance bound violated at t = {}", b.t));
            }
        }
        if report.contraction_initial > 0.0
            && report.contraction_final >= report.contraction_initial
        {
            failures.push("covariance flows did not contract".into());
        }
        if !failures.is_empty() {
            return Err(CommandError::CheckFailed(failures.join("; ")));
        }
    }
    Ok(())
}
