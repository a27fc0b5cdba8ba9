use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use super::ode::Dopri5;
use super::SolverOptions;
use crate::error::{invalid, Error, Result};
use crate::hilbert::DensityMatrix;
use crate::linalg::{self, gmres, SparseLu};
use crate::model::{unvec_column_major, Model, ModelParams, OpenSystem};
use crate::sparse::CsrMatrix;
use crate::C64;

/// Largest summed population of the two highest Fock states per mode before
/// a run is flagged as truncation-limited.
pub const CUTOFF_POPULATION_TOL: f64 = 1e-6;

/// Residual bound of the direct solver.
const DIRECT_RESIDUAL_TOL: f64 = 1e-10;
/// `‖M⁻¹r‖/‖r‖` above this marks a (numerically) degenerate null space.
const DEGENERACY_PROBE: f64 = 1e10;
/// Superoperator dimensions up to this use sparse LU, larger ones the
/// preconditioned Krylov solver.
pub const SPARSE_LU_MAX_DIM: usize = 16_384;
/// Damping added to the no-jump generator in the Krylov preconditioner.
const PRECONDITIONER_SHIFT: f64 = 1e-2;
const KRYLOV_RESTART: usize = 150;
const KRYLOV_MAX_ITER: usize = 4000;
/// Relative to `‖I/d‖₂ = 1/√d`, so the absolute residual is already below
/// the final `DIRECT_RESIDUAL_TOL` check.
const KRYLOV_TOL: f64 = 1e-10;
/// Solutions for two different trace sources differing by more than this
/// trace distance reveal a degenerate null space.
const KRYLOV_UNIQUENESS_TOL: f64 = 1e-7;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub converged: bool,
    /// Integration time reached.
    pub elapsed: f64,
    pub final_drift: f64,
    pub steps: usize,
    pub rejected: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DirectReport {
    /// `sparse_lu` or `krylov`.
    pub solver: String,
    /// `‖L(ρ)‖∞` of the returned state.
    pub residual: f64,
    pub inverse_norm_probe: Option<f64>,
    pub iterations: Option<usize>,
}

fn rhs(sys: &OpenSystem) -> impl FnMut(f64, &[C64], &mut [C64]) + '_ {
    let d = sys.dim();
    let mut scratch = Array2::zeros((d, d));
    move |_t, y, dy| {
        let rho = ArrayView2::from_shape((d, d), y).expect("state has d² entries");
        let out = ArrayViewMut2::from_shape((d, d), dy).expect("state has d² entries");
        sys.apply_hermitian_into(rho, out, &mut scratch);
    }
}

fn hermitized(sys: &OpenSystem, y: &[C64]) -> DensityMatrix {
    let d = sys.dim();
    let m = Array2::from_shape_vec((d, d), y.to_vec()).expect("state has d² entries");
    let mut rho = DensityMatrix::new(sys.space().clone(), m).expect("dimension checked");
    rho.hermitize();
    rho
}

fn check_initial(sys: &OpenSystem, rho0: &DensityMatrix) -> Result<()> {
    if rho0.space() != sys.space() {
        return invalid("initial state and model act on different spaces");
    }
    if !rho0.is_physical() {
        return invalid("initial density matrix is not physical (Hermitian, unit trace)");
    }
    Ok(())
}

/// `ρ(t)` at each requested time, starting from `ρ(0) = rho0`.
pub fn evolve_master(sys: &OpenSystem, rho0: &DensityMatrix, times: &[f64], opts: &SolverOptions) -> Result<Vec<DensityMatrix>> {
    opts.validate()?;
    check_initial(sys, rho0)?;
    if times.iter().any(|t| !(*t >= 0.0)) || times.windows(2).any(|w| w[1] < w[0]) {
        return invalid("sample times must be non-negative and non-decreasing");
    }
    let y0 = rho0.matrix().iter().copied().collect();
    let mut ode = Dopri5::new(rhs(sys), 0.0, y0, opts.ode());
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        ode.advance_to(t)?;
        let rho = hermitized(sys, ode.y());
        ode.reset(t, rho.matrix().as_slice().expect("standard layout"));
        out.push(rho);
    }
    Ok(out)
}

fn monitor_values(monitors: &[Vec<f64>], y: &[C64], d: usize) -> Vec<f64> {
    if monitors.is_empty() {
        return (0..d).map(|i| y[i * d + i].re).collect();
    }
    monitors
        .iter()
        .map(|diag| diag.iter().enumerate().map(|(i, w)| w * y[i * d + i].re).sum())
        .collect()
}

fn drift(prev: &[f64], cur: &[f64]) -> f64 {
    prev.iter().zip(cur).fold(0.0, |m, (a, b)| m.max((b - a).abs() / b.abs().max(1.0)))
}

/// Integrates until every monitored observable drifts less than
/// `steady_tol` over `steady_window`.
///
/// Monitors are diagonal observables given by their diagonals; an empty list
/// monitors every basis-state population.
pub fn steady_state_integrate(
    sys: &OpenSystem,
    rho0: &DensityMatrix,
    monitors: &[Vec<f64>],
    opts: &SolverOptions,
) -> Result<(DensityMatrix, ConvergenceReport)> {
    opts.validate()?;
    check_initial(sys, rho0)?;
    let d = sys.dim();
    if monitors.iter().any(|m| m.len() != d) {
        return invalid("monitor diagonals must have the state dimension");
    }
    let y0: Vec<C64> = rho0.matrix().iter().copied().collect();
    let mut prev = monitor_values(monitors, &y0, d);
    let mut ode = Dopri5::new(rhs(sys), 0.0, y0, opts.ode());
    let mut t = 0.0;
    let mut last_drift = f64::INFINITY;
    while t < opts.t_max {
        t = (t + opts.steady_window).min(opts.t_max);
        ode.advance_to(t)?;
        let rho = hermitized(sys, ode.y());
        ode.reset(t, rho.matrix().as_slice().expect("standard layout"));
        let cur = monitor_values(monitors, ode.y(), d);
        last_drift = drift(&prev, &cur);
        prev = cur;
        if last_drift <= opts.steady_tol {
            let mut rho = rho;
            rho.normalize_trace();
            let report = ConvergenceReport {
                converged: true,
                elapsed: t,
                final_drift: last_drift,
                steps: ode.n_accept,
                rejected: ode.n_reject,
            };
            return Ok((rho, report));
        }
    }
    Err(Error::Timeout { t, drift: last_drift })
}

/// Deterministic probe vector for the degeneracy check.
fn probe(n: usize) -> Vec<C64> {
    (0..n).map(|k| C64::new((0.7 * k as f64 + 0.3).sin(), (1.3 * k as f64 + 0.1).cos())).collect()
}

fn inf_norm(v: &[C64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.norm()))
}

fn finish(sys: &OpenSystem, m: Array2<C64>) -> Result<(DensityMatrix, f64)> {
    let mut rho = DensityMatrix::new(sys.space().clone(), m)?;
    rho.hermitize();
    rho.normalize_trace();
    let residual = sys.apply(rho.matrix()).iter().fold(0.0f64, |a, v| a.max(v.norm()));
    if residual > DIRECT_RESIDUAL_TOL {
        return Err(Error::NumericalFailure(format!("direct steady-state residual {residual:e}")));
    }
    Ok((rho, residual))
}

/// Null vector of the vectorized generator with the first equation replaced
/// by the trace condition.
fn direct_lu(sys: &OpenSystem, max_dim: usize) -> Result<(DensityMatrix, DirectReport)> {
    let d = sys.dim();
    let lv = sys.vectorized(max_dim)?;
    let n = d * d;
    let mut trip: Vec<(usize, usize, C64)> = lv.iter().filter(|&(r, _, _)| r != 0).collect();
    trip.extend((0..d).map(|k| (0, k * (d + 1), C64::new(1.0, 0.0))));
    let m = CsrMatrix::from_triplets(n, n, trip);

    let degenerate = |why: String| Error::DegenerateSteadyState(why);
    let lu = SparseLu::new(&m).map_err(|e| degenerate(format!("factorization failed: {e}")))?;
    let mut rhs = vec![C64::new(0.0, 0.0); n];
    rhs[0] = C64::new(1.0, 0.0);
    let mut x = lu.solve(&rhs);
    let r = probe(n);
    let ratio = inf_norm(&lu.solve(&r)) / inf_norm(&r);
    if !ratio.is_finite() || ratio > DEGENERACY_PROBE || !x.iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
        return Err(degenerate(format!("inverse norm probe {ratio:e}")));
    }
    // One step of iterative refinement.
    let mx = m.apply(&x);
    let resid: Vec<C64> = rhs.iter().zip(&mx).map(|(b, a)| b - a).collect();
    for (xi, ci) in x.iter_mut().zip(lu.solve(&resid)) {
        *xi += ci;
    }
    let (rho, residual) = finish(sys, unvec_column_major(&x, d))?;
    let report = DirectReport { solver: "sparse_lu".into(), residual, inverse_norm_probe: Some(ratio), iterations: None };
    Ok((rho, report))
}

/// Solves `L(ρ) + tr(ρ)·σ = σ` by GMRES, right-preconditioned with the
/// exact inverse of the shifted no-jump part `ρ ↦ −i(Hρ − ρH†) − sρ`. With a
/// one-dimensional null space the solution is the stationary state for every
/// unit-trace `σ`; two different `σ` are solved to confirm it.
fn direct_krylov(sys: &OpenSystem) -> Result<(DensityMatrix, DirectReport)> {
    let d = sys.dim();
    let heff = sys.effective_hamiltonian().to_dense();
    let (lam, v) = linalg::eigen(&heff)?;
    let vinv = linalg::inverse(&v);
    let vh = v.t().mapv(|x| x.conj());
    let vinvh = vinv.t().mapv(|x| x.conj());
    let denom = Array2::from_shape_fn((d, d), |(i, j)| {
        C64::new(0.0, -1.0) * (lam[i] - lam[j].conj()) - PRECONDITIONER_SHIFT
    });
    let precondition = |y: &[C64]| -> Array2<C64> {
        let y = Array2::from_shape_vec((d, d), y.to_vec()).expect("d² entries");
        let t = linalg::matmul(&linalg::matmul(&vinv, &y), &vinvh) / &denom;
        linalg::matmul(&linalg::matmul(&v, &t), &vh)
    };
    let solve = |sigma: &[f64]| -> Result<(Array2<C64>, usize)> {
        let op = |y: &[C64], out: &mut [C64]| {
            let x = precondition(y);
            let lx = sys.apply(&x);
            let tr: C64 = x.diag().sum();
            for (o, l) in out.iter_mut().zip(lx.iter()) {
                *o = *l;
            }
            for k in 0..d {
                out[k * (d + 1)] += tr * sigma[k];
            }
        };
        let mut b = vec![C64::new(0.0, 0.0); d * d];
        for k in 0..d {
            b[k * (d + 1)] = C64::new(sigma[k], 0.0);
        }
        let out = gmres(op, &b, KRYLOV_RESTART, KRYLOV_MAX_ITER, KRYLOV_TOL);
        if !out.converged {
            return Err(Error::DegenerateSteadyState(format!(
                "Krylov solve stalled at relative residual {:e} after {} iterations",
                out.residual, out.iterations
            )));
        }
        Ok((precondition(&out.x), out.iterations))
    };

    let flat = vec![1.0 / d as f64; d];
    let (x, it1) = solve(&flat)?;
    let weights: Vec<f64> = (0..d).map(|k| 1.0 + 0.5 * (0.7 * k as f64 + 0.3).sin()).collect();
    let total: f64 = weights.iter().sum();
    let tilted: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let (x2, it2) = solve(&tilted)?;
    let (rho, residual) = finish(sys, x)?;
    let mut other = DensityMatrix::new(sys.space().clone(), x2)?;
    other.hermitize();
    other.normalize_trace();
    let spread = rho.trace_distance(&other)?;
    if spread > KRYLOV_UNIQUENESS_TOL {
        return Err(Error::DegenerateSteadyState(format!(
            "stationary states from two trace sources differ by {spread:e}"
        )));
    }
    let report =
        DirectReport { solver: "krylov".into(), residual, inverse_norm_probe: None, iterations: Some(it1 + it2) };
    Ok((rho, report))
}

/// Stationary state from the generator alone: sparse LU for small systems,
/// preconditioned GMRES above [`SPARSE_LU_MAX_DIM`].
pub fn steady_state_direct(sys: &OpenSystem, max_dim: usize) -> Result<(DensityMatrix, DirectReport)> {
    let n = sys.dim().saturating_mul(sys.dim());
    if n > max_dim {
        return Err(Error::ResourceLimit(format!("superoperator dimension {n} exceeds the limit {max_dim}")));
    }
    if n <= SPARSE_LU_MAX_DIM {
        direct_lu(sys, max_dim)
    } else {
        direct_krylov(sys)
    }
}

/// Diagonals of `⟨aₙ†aₙ⟩`, `⟨(aₙ†aₙ)²⟩` for each mode and `⟨cᵢ†cᵢ⟩` for
/// each trap mode.
pub fn model_monitors(model: &Model) -> Vec<Vec<f64>> {
    let cut = model.cutoffs();
    let nph: usize = cut.iter().product();
    let d = model.dim();
    let mut out = Vec::new();
    for k in 0..cut.len() {
        let stride: usize = cut[k + 1..].iter().product();
        let n: Vec<f64> = (0..d).map(|idx| ((idx % nph) / stride % cut[k]) as f64).collect();
        out.push(n.iter().map(|v| v * v).collect());
        out.push(n);
    }
    for i in 0..model.basis.n_modes() {
        out.push((0..d).map(|idx| model.basis.occupation(idx / nph)[i] as f64).collect());
    }
    out
}

/// Summed population of the two highest Fock states of each mode.
pub fn cutoff_populations(model: &Model, rho: &DensityMatrix) -> Vec<f64> {
    let cut = model.cutoffs();
    let nph: usize = cut.iter().product();
    let diag = rho.matrix().diag();
    cut.iter()
        .enumerate()
        .map(|(k, &c)| {
            let stride: usize = cut[k + 1..].iter().product();
            diag.iter()
                .enumerate()
                .filter(|(idx, _)| (idx % nph) / stride % c + 2 >= c)
                .map(|(_, p)| p.re)
                .sum()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteadyMethod {
    /// Direct solve when it fits, integration otherwise or when degenerate.
    #[default]
    Auto,
    Direct,
    Integrate,
    /// Both solvers, cross-checked.
    Both,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SteadyReport {
    /// The solver whose state is returned.
    pub method: String,
    pub direct: Option<DirectReport>,
    pub integrate: Option<ConvergenceReport>,
    /// The direct solver found more than one stationary state.
    pub degenerate: bool,
    pub cross_trace_distance: Option<f64>,
    pub cutoff_populations: Vec<f64>,
    pub cutoff_adequate: bool,
}

#[derive(Clone, Debug)]
pub struct SteadyResult {
    pub rho: DensityMatrix,
    pub report: SteadyReport,
}

/// Solvers disagreeing by more than this trace distance are an error.
pub const CROSS_CHECK_TOL: f64 = 1e-3;

pub fn steady_state(model: &Model, opts: &SolverOptions, method: SteadyMethod) -> Result<SteadyResult> {
    let sys = &model.system;
    let mut report = SteadyReport::default();
    let fits = model.dim().saturating_mul(model.dim()) <= opts.max_direct_dim;

    let mut direct = None;
    if method == SteadyMethod::Direct || (fits && method != SteadyMethod::Integrate) {
        match steady_state_direct(sys, opts.max_direct_dim) {
            Ok((rho, rep)) => {
                report.direct = Some(rep);
                direct = Some(rho);
            }
            Err(Error::DegenerateSteadyState(_)) if method != SteadyMethod::Direct => report.degenerate = true,
            Err(e) => return Err(e),
        }
    }

    let mut integrated = None;
    if direct.is_none() || method == SteadyMethod::Both {
        let rho0 = model.ground_vacuum().to_density();
        let (rho, rep) = steady_state_integrate(sys, &rho0, &model_monitors(model), opts)?;
        report.integrate = Some(rep);
        integrated = Some(rho);
    }

    let rho = match (direct, integrated) {
        (Some(a), Some(b)) => {
            let dist = a.trace_distance(&b)?;
            report.cross_trace_distance = Some(dist);
            if dist > CROSS_CHECK_TOL {
                return Err(Error::NumericalFailure(format!(
                    "direct and integrated steady states differ by trace distance {dist:e}"
                )));
            }
            report.method = "direct".into();
            a
        }
        (Some(a), None) => {
            report.method = "direct".into();
            a
        }
        (None, Some(b)) => {
            report.method = "integrate".into();
            b
        }
        (None, None) => unreachable!("one solver always runs"),
    };
    report.cutoff_populations = cutoff_populations(model, &rho);
    report.cutoff_adequate = report.cutoff_populations.iter().all(|p| *p <= CUTOFF_POPULATION_TOL);
    Ok(SteadyResult { rho, report })
}

/// Photons added to a truncation-limited mode per escalation round.
pub const CUTOFF_ESCALATION_STEP: usize = 4;

/// [`steady_state`] with automatic cutoff escalation: every mode whose top
/// two Fock populations exceed [`CUTOFF_POPULATION_TOL`] gains
/// [`CUTOFF_ESCALATION_STEP`] photons and the model is rebuilt, until all
/// modes are adequate or a mode would exceed `max_cutoff`. The last
/// attempt is returned either way; check `report.cutoff_adequate`.
pub fn steady_state_escalating(
    params: &ModelParams,
    opts: &SolverOptions,
    method: SteadyMethod,
    max_cutoff: usize,
) -> Result<(Model, SteadyResult)> {
    let mut params = params.clone();
    loop {
        let model = Model::build(&params)?;
        let res = steady_state(&model, opts, method)?;
        if res.report.cutoff_adequate {
            return Ok((model, res));
        }
        let mut grown = false;
        for (mode, &p) in params.modes.iter_mut().zip(&res.report.cutoff_populations) {
            if p > CUTOFF_POPULATION_TOL && mode.fock_cutoff + CUTOFF_ESCALATION_STEP <= max_cutoff {
                mode.fock_cutoff += CUTOFF_ESCALATION_STEP;
                grown = true;
            }
        }
        if !grown {
            return Ok((model, res));
        }
    }
}
