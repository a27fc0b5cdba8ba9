use selforder::dynamics::{mcwf_ensemble, mcwf_trajectory, steady_state, SolverOptions, SteadyMethod, TrajectoryConfig};
use selforder::geometry::TrapGeometry;
use selforder::hilbert::{annihilation, expect, number, Operator, SpaceDescriptor, StateVector};
use selforder::model::{Model, ModeParams, ModelParams, OpenSystem, TrapModeSelection};
use selforder::sparse::CsrMatrix;
use selforder::C64;

fn damped_cavity(cutoff: usize) -> OpenSystem {
    let space = SpaceDescriptor::fock(cutoff).unwrap();
    let h = Operator::from_csr(space, CsrMatrix::zeros(cutoff, cutoff)).unwrap();
    let j = annihilation(cutoff).unwrap().scale(C64::new(2f64.sqrt(), 0.0));
    OpenSystem::new(h, vec![j]).unwrap()
}

fn sample_times() -> Vec<f64> {
    (0..=15).map(|k| k as f64 * 0.2).collect()
}

#[test]
fn first_jump_times_are_exponential() {
    let sys = damped_cavity(3);
    let psi0 = StateVector::fock(3, 1).unwrap();
    let times = [10.0];
    let cfg = TrajectoryConfig::new(&times, &[]);
    let opts = SolverOptions::default();
    let n = 500;
    let mut t: Vec<f64> = (0..n)
        .map(|i| {
            let rec = mcwf_trajectory(&sys, &psi0, &cfg, &opts, 17, i).unwrap();
            rec.jumps.first().map_or(f64::INFINITY, |j| j.time)
        })
        .collect();
    t.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut ks: f64 = 0.0;
    for (k, &x) in t.iter().enumerate() {
        let cdf = 1.0 - (-2.0 * x).exp();
        ks = ks.max((cdf - k as f64 / n as f64).abs()).max((cdf - (k + 1) as f64 / n as f64).abs());
    }
    // 1% critical value of the one-sample KS statistic.
    assert!(ks < 1.63 / (n as f64).sqrt(), "KS statistic {ks}");
}

#[test]
fn damped_cavity_ensemble_matches_decay() {
    let sys = damped_cavity(3);
    let psi0 = StateVector::fock(3, 1).unwrap();
    let obs = [number(3).unwrap().csr().into_owned()];
    let times = sample_times();
    let cfg = TrajectoryConfig::new(&times, &obs);
    let opts = SolverOptions { n_trajectories: 500, seed: 2024, ..Default::default() };
    let ens = mcwf_ensemble(&sys, &psi0, &cfg, &opts, false).unwrap();
    for (s, t) in times.iter().enumerate() {
        let exact = (-2.0 * t).exp();
        let (m, se) = (ens.mean[s][0], ens.std_err[s][0]);
        assert!((m - exact).abs() <= 3.0 * se + 1e-12, "t={t}: {m} vs {exact}, SE {se}");
    }
}

#[test]
fn standard_error_scales_as_inverse_root() {
    let sys = damped_cavity(3);
    let psi0 = StateVector::fock(3, 1).unwrap();
    let obs = [number(3).unwrap().csr().into_owned()];
    let times = sample_times();
    let cfg = TrajectoryConfig::new(&times, &obs);
    let small = SolverOptions { n_trajectories: 400, seed: 5, ..Default::default() };
    let large = SolverOptions { n_trajectories: 1600, seed: 6, ..Default::default() };
    let a = mcwf_ensemble(&sys, &psi0, &cfg, &small, false).unwrap();
    let b = mcwf_ensemble(&sys, &psi0, &cfg, &large, false).unwrap();
    let se = |e: &selforder::dynamics::EnsembleResult| -> f64 { e.std_err[1..].iter().map(|r| r[0]).sum() };
    let ratio = se(&a) / se(&b);
    assert!((1.7..=2.3).contains(&ratio), "SE ratio {ratio}");
}

#[test]
fn single_particle_ensemble_matches_master_equation() {
    let params = ModelParams {
        modes: vec![ModeParams { n: 19, kappa: 1.0, delta_c: -3.0, u0: -2.0, eta: 1.5, fock_cutoff: 8 }],
        trap: TrapGeometry::centered_box(0.25).unwrap(),
        n_particles: 1,
        n_modes_trap: 6,
        omega_rec: 0.125,
        trap_modes: TrapModeSelection::Reachable,
    };
    let model = Model::build(&params).unwrap();
    let a = model.annihilation(0).unwrap();
    let n_op = a.adjoint().mul(&a).unwrap();
    let ss = steady_state(&model, &SolverOptions::default(), SteadyMethod::Auto).unwrap();
    let n_ss = expect(&n_op, &ss.rho).unwrap().re;

    let obs = [n_op.csr().into_owned()];
    let times = [0.0, 15.0];
    let cfg = TrajectoryConfig::new(&times, &obs);
    let opts = SolverOptions { n_trajectories: 500, seed: 11, ..Default::default() };
    let ens = mcwf_ensemble(&model.system, &model.ground_vacuum(), &cfg, &opts, false).unwrap();
    let (m, se) = (ens.mean[1][0], ens.std_err[1][0]);
    assert!((m - n_ss).abs() <= 3.0 * se, "{m} vs {n_ss}, SE {se}");
}
