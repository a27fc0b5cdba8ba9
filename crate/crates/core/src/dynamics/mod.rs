//! Master-equation evolution, steady states and quantum trajectories.

mod master;
mod mcwf;
pub mod ode;

pub use master::{
    cutoff_populations, evolve_master, model_monitors, steady_state, steady_state_direct, steady_state_escalating,
    steady_state_integrate, ConvergenceReport, DirectReport, SteadyMethod, SteadyReport, SteadyResult,
    CUTOFF_ESCALATION_STEP, CUTOFF_POPULATION_TOL, SPARSE_LU_MAX_DIM,
};
pub use mcwf::{mcwf_ensemble, mcwf_trajectory, EnsembleResult, Jump, TrajectoryConfig, TrajectoryRecord};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use ode::OdeTolerances;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Largest integrator step; unbounded when infinite (`null` in JSON).
    #[serde(with = "unbounded")]
    pub max_step: f64,
    /// Relative drift below which an observable counts as stationary.
    pub steady_tol: f64,
    /// Time span over which the drift is measured.
    pub steady_window: f64,
    /// Integration horizon of the steady-state search.
    pub t_max: f64,
    /// Jump-time bisection tolerance, relative to the elapsed time.
    pub jump_tol: f64,
    pub seed: u64,
    pub n_trajectories: usize,
    /// Worker threads for trajectory ensembles; 0 uses all cores.
    pub workers: usize,
    /// Largest superoperator dimension `d²` handed to the direct solver.
    pub max_direct_dim: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-6,
            atol: 1e-8,
            max_step: f64::INFINITY,
            steady_tol: 1e-5,
            steady_window: 5.0,
            t_max: 2000.0,
            jump_tol: 1e-9,
            seed: 0,
            n_trajectories: 100,
            workers: 0,
            max_direct_dim: crate::model::DEFAULT_MAX_SUPEROPERATOR_DIM,
        }
    }
}

/// Infinite values as `null`, since JSON has no representation for them.
mod unbounded {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rtol", self.rtol),
            ("atol", self.atol),
            ("max_step", self.max_step),
            ("steady_tol", self.steady_tol),
            ("steady_window", self.steady_window),
            ("t_max", self.t_max),
            ("jump_tol", self.jump_tol),
        ] {
            if !(v > 0.0) || v.is_nan() {
                return invalid(format!("{name} must be > 0"));
            }
        }
        if self.n_trajectories < 1 {
            return invalid("n_trajectories must be >= 1");
        }
        Ok(())
    }

    pub(crate) fn ode(&self) -> OdeTolerances {
        OdeTolerances { rtol: self.rtol, atol: self.atol, max_step: self.max_step }
    }
}
