//! Run configuration: a strict JSON schema with dotted-key overrides.
//!
//! Unknown keys are rejected everywhere so typos fail loudly instead of
//! silently running a default experiment.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use cghybrid::model::ConditionalGaussianModel;
use cghybrid::triad::{triad_energy_model, triad_model, TriadParams};
use cghybrid::model::EnergyConservingModel;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sim: SimConfig,
    #[serde(default)]
    pub estimate: EstimateConfig,
    #[serde(default)]
    pub compare: CompareConfig,
    #[serde(default)]
    pub diagnose: DiagnoseConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// One of "triad", "triad_modified", "triad_damped".
    pub preset: String,
    pub params: TriadParams,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub l_samples: usize,
    pub dt: f64,
    pub t_end: f64,
    pub seed: u64,
    #[serde(default = "default_stride")]
    pub store_stride: usize,
    #[serde(default = "default_cap")]
    pub blowup_cap: f64,
}

fn default_stride() -> usize {
    1
}

fn default_cap() -> f64 {
    1e8
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateConfig {
    /// Snapshot times for density estimation.
    pub t_eval: Vec<f64>,
    pub bandwidth: BandwidthConfig,
    pub grid: GridConfig,
    /// Any of "hybrid", "direct", "marginal_hidden", "marginal_observed".
    pub estimators: Vec<String>,
    pub regularization: f64,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            t_eval: vec![1.0],
            bandwidth: BandwidthConfig::default(),
            grid: GridConfig::default(),
            estimators: vec![
                "hybrid".into(),
                "marginal_hidden".into(),
                "marginal_observed".into(),
            ],
            regularization: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BandwidthConfig {
    /// "scaling" (sample-size rule with per-direction sample deviations) or
    /// "silverman".
    pub policy: String,
    /// Prefactor of the scaling rule.
    pub kappa: f64,
    /// Explicit per-direction factors; overrides the sample deviations.
    pub factors: Option<Vec<f64>>,
}

impl Default for BandwidthConfig {
    fn default() -> Self {
        BandwidthConfig {
            policy: "scaling".into(),
            kappa: 1.0,
            factors: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub points_per_axis: usize,
    pub pad_stds: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            points_per_axis: 100,
            pad_stds: 5.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub l_values: Vec<usize>,
    pub t_eval: f64,
    pub n_repeats: usize,
    pub kappa: f64,
    pub reference: ReferenceCfg,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            l_values: vec![125, 250, 500, 1000, 2000],
            t_eval: 1.0,
            n_repeats: 20,
            kappa: 1.0,
            reference: ReferenceCfg::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceCfg {
    pub l_ref: usize,
    pub dt: f64,
    pub points_per_axis: usize,
    /// Grid resolution of the one-dimensional hidden-marginal reference.
    pub hidden_points: usize,
    pub pad_stds: f64,
    /// Gaussian smoothing of the histogram, in cells (0 = raw).
    pub smoothing_cells: f64,
}

impl Default for ReferenceCfg {
    fn default() -> Self {
        ReferenceCfg {
            l_ref: 1_000_000,
            dt: 2e-3,
            points_per_axis: 36,
            hidden_points: 160,
            pad_stds: 4.0,
            smoothing_cells: 0.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseConfig {
    /// Times at which the covariance bounds are checked.
    pub t_checks: Vec<f64>,
    /// Horizon of the contraction experiment.
    pub horizon: f64,
    /// Initial covariances of the two contraction flows.
    pub r0: f64,
    pub r0_prime: f64,
    /// Gramian interval `[gramian_t - 1, gramian_t]`.
    pub gramian_t: f64,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        DiagnoseConfig {
            t_checks: vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0, 18.0, 20.0],
            horizon: 10.0,
            r0: 1e-2,
            r0_prime: 1.0,
            gramian_t: 2.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: "out".into() }
    }
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

impl RunConfig {
    #[cfg(test)]
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| ConfigError(format!("invalid JSON: {e}")))?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| ConfigError(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.model.params;
        match self.model.preset.as_str() {
            "triad" => {
                if p.epsilon != 0.0 || p.d1 != 0.0 {
                    return Err(ConfigError(
                        "preset 'triad' requires epsilon = 0 and d1 = 0".into(),
                    ));
                }
            }
            "triad_modified" => {
                if !(p.epsilon > 0.0) || p.d1 != 0.0 {
                    return Err(ConfigError(
                        "preset 'triad_modified' requires epsilon > 0 and d1 = 0".into(),
                    ));
                }
            }
            "triad_damped" => {
                if !(p.epsilon > 0.0) || !(p.d1 > 0.0) {
                    return Err(ConfigError(
                        "preset 'triad_damped' requires epsilon > 0 and d1 > 0".into(),
                    ));
                }
            }
            other => {
                return Err(ConfigError(format!(
                    "unknown model preset '{other}' (expected triad, triad_modified, triad_damped)"
                )))
            }
        }
        p.validate().map_err(|e| ConfigError(e.to_string()))?;
        if !(self.sim.dt > 0.0) || !(self.sim.t_end > 0.0) {
            return Err(ConfigError("sim.dt and sim.t_end must be positive".into()));
        }
        if self.sim.l_samples == 0 {
            return Err(ConfigError("sim.l_samples must be positive".into()));
        }
        for name in &self.estimate.estimators {
            if !matches!(
                name.as_str(),
                "hybrid" | "direct" | "marginal_hidden" | "marginal_observed"
            ) {
                return Err(ConfigError(format!("unknown estimator '{name}'")));
            }
        }
        if !matches!(self.estimate.bandwidth.policy.as_str(), "scaling" | "silverman") {
            return Err(ConfigError(format!(
                "unknown bandwidth policy '{}'",
                self.estimate.bandwidth.policy
            )));
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<ConditionalGaussianModel, ConfigError> {
        triad_model(&self.model.params).map_err(|e| ConfigError(e.to_string()))
    }

    pub fn build_energy_model(&self) -> Result<EnergyConservingModel, ConfigError> {
        triad_energy_model(&self.model.params).map_err(|e| ConfigError(e.to_string()))
    }
}

/// Applies one `--set path.to.key=value` override onto the raw JSON value.
/// The right-hand side is parsed as JSON when possible, else kept a string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), ConfigError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("override '{spec}' is not KEY=VALUE")))?;
    let new: Value = serde_json::from_str(raw).unwrap_or(Value::String(raw.to_string()));
    let mut cursor = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cursor.is_object() {
            return Err(ConfigError(format!(
                "override path '{path}' hits a non-object at '{part}'"
            )));
        }
        let map = cursor.as_object_mut().unwrap();
        if i + 1 == parts.len() {
            map.insert(part.to_string(), new);
            return Ok(());
        }
        cursor = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "model": {"preset": "triad", "params": {
            "a1": -2.5, "a2": 1.0, "a3": 1.5,
            "d2": 1.0, "d3": 0.5, "sigma2": 1.0, "sigma3": 1.0}},
        "sim": {"l_samples": 10, "dt": 0.001, "t_end": 1.0, "seed": 1}
    }"#;

    #[test]
    fn minimal_config_parses() {
        let cfg = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.model.preset, "triad");
        assert_eq!(cfg.sim.store_stride, 1);
        assert_eq!(cfg.output.dir, "out");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = MINIMAL.replace("\"seed\": 1", "\"seed\": 1, \"sede\": 2");
        let err = RunConfig::from_json(&bad).unwrap_err();
        assert!(err.0.contains("sede"), "{err}");
    }

    #[test]
    fn preset_constraints_are_enforced() {
        let mut v: Value = serde_json::from_str(MINIMAL).unwrap();
        apply_override(&mut v, "model.params.epsilon=0.1").unwrap();
        assert!(RunConfig::from_value(v.clone()).is_err());
        apply_override(&mut v, "model.preset=triad_modified").unwrap();
        let cfg = RunConfig::from_value(v.clone()).unwrap();
        assert_eq!(cfg.model.params.epsilon, 0.1);
        apply_override(&mut v, "model.params.d1=0.1").unwrap();
        assert!(RunConfig::from_value(v.clone()).is_err());
        apply_override(&mut v, "model.preset=triad_damped").unwrap();
        assert!(RunConfig::from_value(v).is_ok());
    }

    #[test]
    fn override_parses_json_scalars() {
        let mut v: Value = serde_json::from_str(MINIMAL).unwrap();
        apply_override(&mut v, "sim.l_samples=77").unwrap();
        apply_override(&mut v, "estimate.t_eval=[0.5, 1.0]").unwrap();
        let cfg = RunConfig::from_value(v).unwrap();
        assert_eq!(cfg.sim.l_samples, 77);
        assert_eq!(cfg.estimate.t_eval, vec![0.5, 1.0]);
    }
}
