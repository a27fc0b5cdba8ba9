//! Run configuration: a TOML file, or the `metadata.json` sidecar of an
//! earlier run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use selforder::dynamics::{SolverOptions, SteadyMethod};
use selforder::model::ModelParams;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelParams,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub run: RunSettings,
    #[serde(default)]
    pub observables: ObservableSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan: Option<ScanSpec>,
    /// Output directory; `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub steady_method: SteadyMethod,
    /// Escalate truncation-limited Fock cutoffs up to this value.
    pub max_cutoff: Option<usize>,
    /// Compare the steady photon numbers against a run with every cutoff
    /// lowered by 4.
    pub twin_check: bool,
    /// End of the sampled time grid for `evolve` and `mcwf`.
    pub t_end: f64,
    /// Number of sample times, including `t = 0`.
    pub samples: usize,
    /// Time- and trajectory-average the state from this time on.
    pub average_from: Option<f64>,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            steady_method: SteadyMethod::Both,
            max_cutoff: None,
            twin_check: true,
            t_end: 20.0,
            samples: 101,
            average_from: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservableSet {
    pub q_function: bool,
    pub q_points: usize,
    /// Fixed grid half-width; the grid is chosen from `⟨n⟩` when absent.
    pub q_alpha_max: Option<f64>,
    pub density: bool,
    pub density_points: usize,
    pub pair_density: bool,
    pub joint_photon: bool,
    pub mixture: bool,
    /// Per-sample overlap with the two-branch ansatz (`mcwf`).
    pub ansatz: bool,
    pub ansatz_refine: bool,
    /// Per-trajectory position densities at every sample time (`mcwf`).
    pub snapshots: bool,
}

impl Default for ObservableSet {
    fn default() -> Self {
        Self {
            q_function: true,
            q_points: selforder::observables::DEFAULT_Q_POINTS,
            q_alpha_max: None,
            density: true,
            density_points: 201,
            pair_density: true,
            joint_photon: true,
            mixture: true,
            ansatz: false,
            ansatz_refine: false,
            snapshots: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanKind {
    #[default]
    Steady,
    Mcwf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSpec {
    #[serde(default)]
    pub kind: ScanKind,
    pub axes: Vec<AxisSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisSpec {
    /// Dotted path into the configuration, e.g. `model.modes.0.eta`.
    pub path: String,
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl AxisSpec {
    pub fn values(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.min];
        }
        let last = (self.points - 1) as f64;
        (0..self.points)
            .map(|k| if k + 1 == self.points { self.max } else { self.min + (self.max - self.min) * k as f64 / last })
            .collect()
    }
}

fn config_error(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
        let cfg = if text.trim_start().starts_with('{') {
            let mut v: Value =
                serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
            // A metadata sidecar carries the configuration under `config`.
            if let Some(inner) = v.get_mut("config") {
                v = inner.take();
            }
            serde_json::from_value(v).map_err(|e| config_error(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.solver.validate()?;
        let r = &self.run;
        if !(r.t_end > 0.0) {
            return Err(config_error("run.t_end must be > 0"));
        }
        if r.samples < 2 {
            return Err(config_error("run.samples must be >= 2"));
        }
        if let Some(max) = r.max_cutoff {
            if self.model.modes.iter().any(|m| m.fock_cutoff > max) {
                return Err(config_error("run.max_cutoff is below a configured fock_cutoff"));
            }
        }
        if let Some(scan) = &self.scan {
            if scan.axes.is_empty() || scan.axes.len() > 2 {
                return Err(config_error("a scan needs one or two axes"));
            }
            for axis in &scan.axes {
                if axis.points < 1 || (axis.points == 1 && axis.min != axis.max) {
                    return Err(config_error(format!(
                        "scan axis {}: points must be >= 2, or 1 with min == max",
                        axis.path
                    )));
                }
                if !axis.min.is_finite() || !axis.max.is_finite() {
                    return Err(config_error(format!("scan axis {}: bounds must be finite", axis.path)));
                }
                // Setting the first grid value checks the path and the type.
                self.with_value(&axis.path, axis.min)?;
            }
        }
        Ok(())
    }

    /// A copy with the numeric field at `path` set to `value`.
    pub fn with_value(&self, path: &str, value: f64) -> Result<Self, CliError> {
        let mut root = serde_json::to_value(self).map_err(|e| config_error(e.to_string()))?;
        let mut node = &mut root;
        for part in path.split('.') {
            node = match node {
                Value::Object(map) => map.get_mut(part),
                Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
                _ => None,
            }
            .ok_or_else(|| config_error(format!("scan path {path}: no field {part}")))?;
        }
        *node = match node {
            Value::Number(n) if n.is_f64() => serde_json::json!(value),
            Value::Number(_) if value.fract() == 0.0 && value >= 0.0 => serde_json::json!(value as u64),
            Value::Number(_) => return Err(config_error(format!("scan path {path}: integer field, got {value}"))),
            _ => return Err(config_error(format!("scan path {path}: not a numeric field"))),
        };
        let cfg: Self = serde_json::from_value(root).map_err(|e| config_error(format!("scan path {path}: {e}")))?;
        Ok(cfg)
    }
}
