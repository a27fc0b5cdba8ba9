use std::path::Path;

use rayon::prelude::*;
use serde_json::{json, Value};

use selforder::dynamics::{
    evolve_master, mcwf_ensemble, steady_state, steady_state_escalating, SteadyResult, TrajectoryConfig,
    TrajectoryRecord,
};
use selforder::geometry::{
    coupling_closed_form_box, nonzero_fraction, trap_energy, validate_closed_form, CouplingMatrices, TrapKind,
};
use selforder::hilbert::{DensityMatrix, StateVector};
use selforder::model::Model;
use selforder::observables::{
    ansatz_overlap, field_moments, joint_photon_dist, mixture_fidelity, pair_density, pair_density_integral,
    pair_diagonal_dominance, photon_correlation, position_density, qfunction, qfunction_auto, reduced_particle_dm,
    QGrid, QGridSpec,
};
use selforder::sparse::CsrMatrix;

use crate::config::{RunConfig, ScanKind};
use crate::output::{Bundle, Cell, Table};
use crate::CliError;

/// Entries below this count as zero in the reported nonzero fractions.
const NONZERO_THRESHOLD: f64 = 1e-6;
/// Relative photon-number change tolerated between a run and its twin with
/// every cutoff lowered by [`TWIN_STEP`].
const TWIN_TOL: f64 = 0.01;
const TWIN_STEP: usize = 4;
/// Ansatz overlap expected during ordered periods of a trajectory.
const ORDERED_OVERLAP: f64 = 0.8;

/// Whether a finished run met its convergence criteria.
pub struct Outcome {
    pub converged: bool,
    /// Some part of the run (e.g. a scan point) failed numerically.
    pub failed: bool,
    pub notes: Vec<String>,
}

impl Outcome {
    fn ok() -> Self {
        Self { converged: true, failed: false, notes: Vec::new() }
    }
}

fn mode_label(model: &Model, k: usize) -> usize {
    model.params.modes[k].n
}

fn time_grid(cfg: &RunConfig) -> Vec<f64> {
    let m = cfg.run.samples - 1;
    (0..=m).map(|k| if k == m { cfg.run.t_end } else { cfg.run.t_end * k as f64 / m as f64 }).collect()
}

fn density_axis(model: &Model, points: usize) -> Result<Vec<f64>, CliError> {
    let top = model.coupling.trap_modes.iter().max().copied().unwrap_or(0);
    let (lo, hi) = model.params.trap.support(top + 1)?;
    let m = points.max(2) - 1;
    Ok((0..=m).map(|k| if k == m { hi } else { lo + (hi - lo) * k as f64 / m as f64 }).collect())
}

/// Named scalar observables of a state, in a fixed order.
fn scalars(model: &Model, rho: &DensityMatrix, cfg: &RunConfig) -> Result<Vec<(String, Cell)>, CliError> {
    let mut out = Vec::new();
    let cut = selforder::dynamics::cutoff_populations(model, rho);
    for k in 0..model.n_cavity_modes() {
        let n = mode_label(model, k);
        let m = field_moments(rho, k)?;
        out.push((format!("n_{n}"), m.mean_n.into()));
        out.push((format!("var_n_{n}"), m.var_n.into()));
        out.push((format!("re_a_{n}"), m.mean_field.re.into()));
        out.push((format!("im_a_{n}"), m.mean_field.im.into()));
        out.push((format!("top_fock_population_{n}"), cut[k].into()));
    }
    let red = reduced_particle_dm(model, rho)?;
    for (mode, p) in model.coupling.trap_modes.iter().zip(red.populations()) {
        out.push((format!("population_{mode}"), p.into()));
    }
    if cfg.observables.mixture {
        out.push(("mixture_fidelity".into(), mixture_fidelity(rho)?.fidelity.into()));
    }
    if cfg.observables.joint_photon && model.n_cavity_modes() >= 2 {
        out.push(("photon_correlation".into(), photon_correlation(&joint_photon_dist(rho, 0, 1)?).into()));
    }
    if cfg.observables.pair_density && model.params.n_particles == 2 {
        out.push(("pair_diagonal_dominance".into(), pair_diagonal_dominance(model, rho)?.into()));
        out.push(("pair_integral".into(), pair_density_integral(model, rho)?.into()));
    }
    Ok(out)
}

fn single_row(values: Vec<(String, Cell)>) -> Table {
    let (header, row): (Vec<String>, Vec<Cell>) = values.into_iter().unzip();
    let mut t = Table::new(header);
    t.push(row);
    t
}

fn q_grid(rho: &DensityMatrix, k: usize, cfg: &RunConfig) -> Result<QGrid, CliError> {
    Ok(match cfg.observables.q_alpha_max {
        Some(a) => qfunction(rho, k, &QGridSpec::new(a, cfg.observables.q_points)?)?,
        None => qfunction_auto(rho, k)?,
    })
}

/// Writes the field and particle distributions of `rho` and returns a
/// summary for the metadata.
fn write_state_outputs(
    bundle: &mut Bundle,
    model: &Model,
    rho: &DensityMatrix,
    cfg: &RunConfig,
    notes: &mut Vec<String>,
) -> Result<Value, CliError> {
    let obs = &cfg.observables;
    let mut summary = serde_json::Map::new();

    let red = reduced_particle_dm(model, rho)?;
    let mut pops = Table::new(["trap_mode", "energy", "population"]);
    for ((mode, e), p) in model.coupling.trap_modes.iter().zip(&model.coupling.energies).zip(red.populations()) {
        pops.push(vec![(*mode).into(), (*e).into(), p.into()]);
    }
    bundle.write_table("populations.csv", &pops)?;

    if obs.q_function {
        let mut peaks = Vec::new();
        for k in 0..model.n_cavity_modes() {
            let n = mode_label(model, k);
            let q = q_grid(rho, k, cfg)?;
            if let Some(w) = q.warning() {
                notes.push(format!("Q-function of mode {n}: {w}"));
            }
            let mut t = Table::new(["re_alpha", "im_alpha", "q"]);
            for (i, re) in q.re.iter().enumerate() {
                for (j, im) in q.im.iter().enumerate() {
                    t.push(vec![(*re).into(), (*im).into(), q.values[[i, j]].into()]);
                }
            }
            bundle.write_table(&format!("q_mode{n}.csv"), &t)?;
            let centre = q.values[[q.re.len() / 2, q.im.len() / 2]];
            let maxima: Vec<Value> = q
                .local_maxima()
                .iter()
                .map(|p| json!({ "re": p.alpha.re, "im": p.alpha.im, "q": p.value }))
                .collect();
            peaks.push(json!({
                "mode": n,
                "alpha_max": q.re.last().copied().unwrap_or(0.0),
                "step": q.step,
                "local_maxima": maxima,
                "origin_to_max": centre / q.max(),
                "boundary_to_max": q.boundary_max() / q.max(),
            }));
        }
        summary.insert("q_function".into(), Value::Array(peaks));
    }

    if obs.density {
        let xs = density_axis(model, obs.density_points)?;
        let rho_x = position_density(model, rho, &xs)?;
        let mut t = Table::new(["x", "density"]);
        for (x, v) in xs.iter().zip(&rho_x) {
            t.push(vec![(*x).into(), (*v).into()]);
        }
        bundle.write_table("density.csv", &t)?;
    }

    if obs.pair_density && model.params.n_particles == 2 {
        let xs = density_axis(model, obs.density_points.min(101))?;
        let g = pair_density(model, rho, &xs)?;
        let mut t = Table::new(["x1", "x2", "pair_density"]);
        for (i, x1) in xs.iter().enumerate() {
            for (j, x2) in xs.iter().enumerate() {
                t.push(vec![(*x1).into(), (*x2).into(), g[[i, j]].into()]);
            }
        }
        bundle.write_table("pair_density.csv", &t)?;
    }

    if obs.joint_photon && model.n_cavity_modes() >= 2 {
        let p = joint_photon_dist(rho, 0, 1)?;
        let (a, b) = (mode_label(model, 0), mode_label(model, 1));
        let mut t = Table::new([format!("n_{a}"), format!("n_{b}"), "probability".into()]);
        for ((i, j), v) in p.indexed_iter() {
            t.push(vec![i.into(), j.into(), (*v).into()]);
        }
        bundle.write_table("joint_photon.csv", &t)?;
    }
    Ok(Value::Object(summary))
}

pub fn couplings(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    let p = &cfg.model;
    let modes = p.cavity_modes();
    let c = CouplingMatrices::compute(&p.trap, &modes, p.n_modes_trap, p.omega_rec)?;
    let mut bundle = Bundle::create(out)?;

    // The closed form only describes a centered box; its columns are
    // written when the validation selects a convention.
    let verdict = match p.trap.kind {
        TrapKind::Box { half_width } if p.trap.center == 0.0 => {
            Some(validate_closed_form(half_width, &modes, p.n_modes_trap, 1e-8)?)
        }
        _ => None,
    };
    let closed = verdict.as_ref().and_then(|v| v.selected.map(|conv| (v.half_width, conv)));

    let mut header = vec!["n", "i", "j", "A", "B"];
    if closed.is_some() {
        header.extend(["A_closed_form", "B_closed_form"]);
    }
    let mut t = Table::new(header);
    for (k, &n) in modes.iter().enumerate() {
        for i in 0..p.n_modes_trap {
            for j in 0..p.n_modes_trap {
                let mut row: Vec<Cell> = vec![n.into(), i.into(), j.into(), c.a[k][[i, j]].into(), c.b[k][[i, j]].into()];
                if let Some((a, conv)) = closed {
                    let (ca, cb) = coupling_closed_form_box(a, n, i, j, conv);
                    row.extend([ca.into(), cb.into()]);
                }
                t.push(row);
            }
        }
    }
    bundle.write_table("couplings.csv", &t)?;

    let mut e = Table::new(["i", "energy"]);
    for i in 0..p.n_modes_trap {
        e.push(vec![i.into(), trap_energy(&p.trap, i, p.omega_rec).into()]);
    }
    bundle.write_table("energies.csv", &e)?;

    let fractions: Vec<Value> = modes
        .iter()
        .enumerate()
        .map(|(k, n)| {
            json!({
                "n": n,
                "A": nonzero_fraction(&c.a[k], NONZERO_THRESHOLD),
                "B": nonzero_fraction(&c.b[k], NONZERO_THRESHOLD),
            })
        })
        .collect();
    let report = json!({
        "closed_form_validation": verdict,
        "nonzero_threshold": NONZERO_THRESHOLD,
        "nonzero_fraction": fractions,
    });
    bundle.finish("couplings", cfg, report)?;
    Ok(Outcome::ok())
}

fn solve_steady(cfg: &RunConfig) -> Result<(Model, SteadyResult), CliError> {
    Ok(match cfg.run.max_cutoff {
        Some(max) => steady_state_escalating(&cfg.model, &cfg.solver, cfg.run.steady_method, max)?,
        None => {
            let model = Model::build(&cfg.model)?;
            let res = steady_state(&model, &cfg.solver, cfg.run.steady_method)?;
            (model, res)
        }
    })
}

/// Steady photon numbers with every cutoff lowered by [`TWIN_STEP`].
fn twin_check(model: &Model, rho: &DensityMatrix, cfg: &RunConfig) -> Value {
    if model.params.modes.iter().any(|m| m.fock_cutoff <= TWIN_STEP + 1) {
        return json!({ "skipped": "cutoff too small" });
    }
    let mut p = model.params.clone();
    for m in &mut p.modes {
        m.fock_cutoff -= TWIN_STEP;
    }
    let twin = Model::build(&p).and_then(|m| steady_state(&m, &cfg.solver, cfg.run.steady_method));
    match twin {
        Ok(t) => {
            let mut worst: f64 = 0.0;
            let mut pass = true;
            let mut rows = Vec::new();
            for k in 0..model.n_cavity_modes() {
                let (a, b) = (field_moments(rho, k).map(|m| m.mean_n), field_moments(&t.rho, k).map(|m| m.mean_n));
                let (a, b) = match (a, b) {
                    (Ok(a), Ok(b)) => (a, b),
                    _ => return json!({ "error": "moment evaluation failed" }),
                };
                let rel = (a - b).abs() / a.abs().max(f64::MIN_POSITIVE);
                pass &= (a - b).abs() <= TWIN_TOL * a.abs() + 1e-12;
                worst = worst.max(if a == b { 0.0 } else { rel });
                rows.push(json!({ "n": mode_label(model, k), "mean_n": a, "twin_mean_n": b }));
            }
            json!({ "cutoffs": p.modes.iter().map(|m| m.fock_cutoff).collect::<Vec<_>>(), "modes": rows,
                    "max_relative_change": worst, "tolerance": TWIN_TOL, "pass": pass })
        }
        Err(e) => json!({ "error": e.to_string(), "pass": false }),
    }
}

pub fn steady(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    let (model, res) = solve_steady(cfg)?;
    let mut outcome = Outcome::ok();
    let mut bundle = Bundle::create(out)?;
    bundle.write_table("observables.csv", &single_row(scalars(&model, &res.rho, cfg)?))?;
    let summary = write_state_outputs(&mut bundle, &model, &res.rho, cfg, &mut outcome.notes)?;

    if !res.report.cutoff_adequate {
        outcome.converged = false;
        outcome.notes.push(format!(
            "Fock cutoffs {:?} are truncation-limited: top-two populations {:?}",
            model.cutoffs(),
            res.report.cutoff_populations
        ));
    }
    let twin = if cfg.run.twin_check { twin_check(&model, &res.rho, cfg) } else { Value::Null };
    if twin.get("pass") == Some(&Value::Bool(false)) {
        outcome.converged = false;
        outcome.notes.push("photon numbers change by more than 1% when every cutoff is lowered by 4".into());
    }
    let report = json!({
        "converged": outcome.converged,
        "cutoffs": model.cutoffs(),
        "trap_modes": model.coupling.trap_modes,
        "dimension": model.dim(),
        "steady": res.report,
        "cutoff_twin": twin,
        "observables": summary,
        "notes": outcome.notes,
    });
    bundle.finish("steady", cfg, report)?;
    Ok(outcome)
}

pub fn evolve(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    let model = Model::build(&cfg.model)?;
    let times = time_grid(cfg);
    let states = evolve_master(&model.system, &model.ground_vacuum().to_density(), &times, &cfg.solver)?;
    let mut bundle = Bundle::create(out)?;
    let mut table: Option<Table> = None;
    for (t, rho) in times.iter().zip(&states) {
        let mut values = vec![("t".to_string(), Cell::from(*t))];
        values.extend(scalars(&model, rho, cfg)?);
        let (header, row): (Vec<String>, Vec<Cell>) = values.into_iter().unzip();
        table.get_or_insert_with(|| Table::new(header)).push(row);
    }
    bundle.write_table("timeseries.csv", &table.unwrap_or_default())?;
    let mut outcome = Outcome::ok();
    let last = states.last().expect("at least two samples");
    let summary = write_state_outputs(&mut bundle, &model, last, cfg, &mut outcome.notes)?;
    let report = json!({
        "cutoffs": model.cutoffs(),
        "trap_modes": model.coupling.trap_modes,
        "dimension": model.dim(),
        "final_state": summary,
        "notes": outcome.notes,
    });
    bundle.finish("evolve", cfg, report)?;
    Ok(outcome)
}

fn number_operators(model: &Model) -> Result<Vec<CsrMatrix>, CliError> {
    (0..model.n_cavity_modes())
        .map(|k| {
            let a = model.annihilation(k)?;
            Ok(a.adjoint().mul(&a)?.csr().into_owned())
        })
        .collect()
}

/// Samples whose total photon number exceeds half its running median.
fn ordered_samples(totals: &[f64]) -> Vec<bool> {
    let mut seen: Vec<f64> = Vec::new();
    totals
        .iter()
        .map(|&n| {
            let pos = seen.partition_point(|v| *v < n);
            seen.insert(pos, n);
            let h = seen.len() / 2;
            let median = if seen.len() % 2 == 1 { seen[h] } else { 0.5 * (seen[h - 1] + seen[h]) };
            n > 0.0 && n > 0.5 * median
        })
        .collect()
}

/// Ansatz overlap per sample, plus the ordered-period statistics.
fn ansatz_series(rec: &TrajectoryRecord, refine: bool) -> Result<(Vec<f64>, Value), CliError> {
    let f: Vec<f64> = rec
        .states
        .iter()
        .map(|s: &StateVector| ansatz_overlap(s, refine).map(|fit| fit.fidelity))
        .collect::<Result<_, _>>()?;
    let totals: Vec<f64> = rec.values.iter().map(|row| row.iter().sum()).collect();
    let during: Vec<f64> = ordered_samples(&totals).iter().zip(&f).filter(|(o, _)| **o).map(|(_, v)| *v).collect();
    let summary = json!({
        "trajectory": rec.index,
        "ordered_samples": during.len(),
        "ordered_samples_above_threshold": during.iter().filter(|v| **v > ORDERED_OVERLAP).count(),
        "threshold": ORDERED_OVERLAP,
        "min_overlap_when_ordered": during.iter().copied().reduce(f64::min),
    });
    Ok((f, summary))
}

pub fn mcwf(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    let model = Model::build(&cfg.model)?;
    let obs = number_operators(&model)?;
    let times = time_grid(cfg);
    let keep_states = cfg.observables.ansatz || cfg.observables.snapshots;
    let tc = TrajectoryConfig { times: &times, observables: &obs, keep_states, average_from: cfg.run.average_from };
    let ens = mcwf_ensemble(&model.system, &model.ground_vacuum(), &tc, &cfg.solver, true)?;
    let mut bundle = Bundle::create(out)?;
    let labels: Vec<usize> = (0..model.n_cavity_modes()).map(|k| mode_label(&model, k)).collect();

    let mut header = vec!["t".to_string()];
    for n in &labels {
        header.push(format!("mean_n_{n}"));
        header.push(format!("se_n_{n}"));
    }
    let mut t = Table::new(header);
    for (s, time) in ens.times.iter().enumerate() {
        let mut row = vec![Cell::from(*time)];
        for k in 0..labels.len() {
            row.push(ens.mean[s][k].into());
            row.push(ens.std_err[s][k].into());
        }
        t.push(row);
    }
    bundle.write_table("ensemble.csv", &t)?;

    let mut header = vec!["trajectory".to_string(), "seed".into(), "t".into()];
    header.extend(labels.iter().map(|n| format!("n_{n}")));
    if cfg.observables.ansatz {
        header.push("ansatz_overlap".into());
    }
    let mut traj = Table::new(header);
    let mut jumps = Table::new(["trajectory", "time", "channel", "mode"]);
    let mut snaps = Table::new(["trajectory", "t", "x", "density"]);
    let xs = density_axis(&model, cfg.observables.density_points)?;
    let mut ansatz_reports = Vec::new();
    for rec in &ens.records {
        let overlaps = if cfg.observables.ansatz {
            let (f, summary) = ansatz_series(rec, cfg.observables.ansatz_refine)?;
            ansatz_reports.push(summary);
            Some(f)
        } else {
            None
        };
        for (s, time) in rec.times.iter().enumerate() {
            let mut row = vec![Cell::from(rec.index), rec.seed.into(), (*time).into()];
            row.extend(rec.values[s].iter().map(|v| Cell::from(*v)));
            if let Some(f) = &overlaps {
                row.push(f[s].into());
            }
            traj.push(row);
        }
        for j in &rec.jumps {
            jumps.push(vec![rec.index.into(), j.time.into(), j.channel.into(), labels[j.channel].into()]);
        }
        if cfg.observables.snapshots {
            for (time, psi) in rec.times.iter().zip(&rec.states) {
                let d = position_density(&model, &psi.to_density(), &xs)?;
                for (x, v) in xs.iter().zip(d) {
                    snaps.push(vec![rec.index.into(), (*time).into(), (*x).into(), v.into()]);
                }
            }
        }
    }
    bundle.write_table("trajectories.csv", &traj)?;
    bundle.write_table("jumps.csv", &jumps)?;
    if cfg.observables.snapshots {
        bundle.write_table("snapshots.csv", &snaps)?;
    }

    let mut outcome = Outcome::ok();
    let averaged = match &ens.averaged_state {
        Some(rho) => {
            bundle.write_table("averaged_observables.csv", &single_row(scalars(&model, rho, cfg)?))?;
            write_state_outputs(&mut bundle, &model, rho, cfg, &mut outcome.notes)?
        }
        None => Value::Null,
    };
    let report = json!({
        "cutoffs": model.cutoffs(),
        "trap_modes": model.coupling.trap_modes,
        "dimension": model.dim(),
        "n_trajectories": ens.n_trajectories,
        "jumps": ens.records.iter().map(|r| r.jumps.len()).sum::<usize>(),
        "averaged_state": averaged,
        "ansatz": ansatz_reports,
        "notes": outcome.notes,
    });
    bundle.finish("mcwf", cfg, report)?;
    Ok(outcome)
}

/// One scan point: observables, or the error that stopped it.
fn scan_point(cfg: &RunConfig, kind: ScanKind) -> Result<(Vec<(String, Cell)>, bool), CliError> {
    match kind {
        ScanKind::Steady => {
            let (model, res) = solve_steady(cfg)?;
            let mut v = scalars(&model, &res.rho, cfg)?;
            v.push(("solver".into(), res.report.method.clone().into()));
            Ok((v, res.report.cutoff_adequate))
        }
        ScanKind::Mcwf => {
            let model = Model::build(&cfg.model)?;
            let obs = number_operators(&model)?;
            let times = time_grid(cfg);
            let tc = TrajectoryConfig { times: &times, observables: &obs, keep_states: false, average_from: cfg.run.average_from };
            let ens = mcwf_ensemble(&model.system, &model.ground_vacuum(), &tc, &cfg.solver, false)?;
            let last = ens.times.len() - 1;
            let mut v = Vec::new();
            for k in 0..model.n_cavity_modes() {
                let n = mode_label(&model, k);
                v.push((format!("mean_n_{n}"), ens.mean[last][k].into()));
                v.push((format!("se_n_{n}"), ens.std_err[last][k].into()));
            }
            if let Some(rho) = &ens.averaged_state {
                v.extend(scalars(&model, rho, cfg)?.into_iter().map(|(k, c)| (format!("averaged_{k}"), c)));
            }
            Ok((v, true))
        }
    }
}

pub fn scan(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    let spec = cfg.scan.as_ref().ok_or_else(|| CliError::Config("scan needs a [scan] section".into()))?;
    let axes: Vec<Vec<f64>> = spec.axes.iter().map(|a| a.values()).collect();
    let mut points: Vec<Vec<f64>> = vec![vec![]];
    for values in &axes {
        points = points
            .iter()
            .flat_map(|p| values.iter().map(move |v| [p.as_slice(), &[*v]].concat()))
            .collect();
    }
    let configs: Vec<RunConfig> = points
        .iter()
        .map(|p| {
            let mut c = cfg.clone();
            for (axis, v) in spec.axes.iter().zip(p) {
                c = c.with_value(&axis.path, *v)?;
            }
            Ok(c)
        })
        .collect::<Result<_, CliError>>()?;

    let run_point = |c: &RunConfig| match c.validate().and_then(|_| scan_point(c, spec.kind)) {
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    };
    let results: Vec<_> = match spec.kind {
        // Trajectory ensembles already use the worker pool.
        ScanKind::Mcwf => configs.iter().map(run_point).collect(),
        ScanKind::Steady => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.solver.workers)
                .build()
                .map_err(|e| CliError::Io(std::io::Error::other(e)))?;
            pool.install(|| configs.par_iter().map(run_point).collect())
        }
    };

    let mut columns: Vec<String> = Vec::new();
    for (v, _) in results.iter().flatten() {
        for (k, _) in v {
            if !columns.contains(k) {
                columns.push(k.clone());
            }
        }
    }
    let mut header: Vec<String> = spec.axes.iter().map(|a| a.path.clone()).collect();
    header.extend(["status".to_string(), "error".to_string()]);
    header.extend(columns.iter().cloned());
    let mut t = Table::new(header);
    let (mut failed, mut flagged) = (0usize, 0usize);
    for (p, r) in points.iter().zip(&results) {
        let mut row: Vec<Cell> = p.iter().map(|v| Cell::from(*v)).collect();
        match r {
            Ok((values, adequate)) => {
                if !adequate {
                    flagged += 1;
                }
                row.push(if *adequate { "ok" } else { "cutoff_limited" }.into());
                row.push(Cell::Empty);
                for c in &columns {
                    row.push(values.iter().find(|(k, _)| k == c).map_or(Cell::Empty, |(_, v)| v.clone()));
                }
            }
            Err(e) => {
                failed += 1;
                row.push("error".into());
                row.push(e.clone().into());
                row.extend(columns.iter().map(|_| Cell::Empty));
            }
        }
        t.push(row);
    }
    let mut bundle = Bundle::create(out)?;
    bundle.write_table("scan.csv", &t)?;
    let mut outcome = Outcome::ok();
    if failed > 0 {
        outcome.failed = true;
        outcome.notes.push(format!("{failed} of {} scan points failed", points.len()));
    }
    if flagged > 0 {
        outcome.converged = false;
        outcome.notes.push(format!("{flagged} scan points are truncation-limited"));
    }
    let report = json!({
        "points": points.len(),
        "failed": failed,
        "cutoff_limited": flagged,
        "notes": outcome.notes,
    });
    bundle.finish("scan", cfg, report)?;
    Ok(outcome)
}
