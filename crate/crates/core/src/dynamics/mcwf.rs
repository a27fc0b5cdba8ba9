use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ode::Dopri5;
use super::SolverOptions;
use crate::error::{invalid, Error, Result};
use crate::hilbert::{DensityMatrix, StateVector};
use crate::model::OpenSystem;
use crate::sparse::CsrMatrix;
use crate::C64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jump {
    pub time: f64,
    pub channel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub index: u64,
    pub seed: u64,
    pub times: Vec<f64>,
    /// `values[s][o]` is observable `o` at sample `s`.
    pub values: Vec<Vec<f64>>,
    pub jumps: Vec<Jump>,
    /// Normalized states at the sample times, when requested.
    #[serde(skip)]
    pub states: Vec<StateVector>,
}

/// What a trajectory records.
#[derive(Clone, Copy, Debug)]
pub struct TrajectoryConfig<'a> {
    /// Non-decreasing sample times; the last one is the final time.
    pub times: &'a [f64],
    /// Hermitian observables; the real part of `⟨ψ|O|ψ⟩` is recorded.
    pub observables: &'a [CsrMatrix],
    pub keep_states: bool,
    /// Accumulate `|ψ⟩⟨ψ|` at every sample time `≥` this value.
    pub average_from: Option<f64>,
}

impl<'a> TrajectoryConfig<'a> {
    pub fn new(times: &'a [f64], observables: &'a [CsrMatrix]) -> Self {
        Self { times, observables, keep_states: false, average_from: None }
    }
}

struct Outcome {
    record: TrajectoryRecord,
    average: Option<(Array2<C64>, usize)>,
}

fn norm_sqr(v: &[C64]) -> f64 {
    v.iter().map(|x| x.norm_sqr()).sum()
}

fn uniform_open(rng: &mut ChaCha20Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

fn run(sys: &OpenSystem, psi0: &StateVector, cfg: &TrajectoryConfig, opts: &SolverOptions, seed: u64, index: u64) -> Result<Outcome> {
    let d = sys.dim();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index);

    let heff = sys.effective_hamiltonian();
    let f = |_t: f64, y: &[C64], dy: &mut [C64]| {
        heff.matvec(y, dy);
        for v in dy.iter_mut() {
            *v = C64::new(v.im, -v.re);
        }
    };
    let mut ode = Dopri5::new(f, 0.0, psi0.as_slice().to_vec(), opts.ode());

    let mut record = TrajectoryRecord {
        index,
        seed,
        times: Vec::with_capacity(cfg.times.len()),
        values: Vec::with_capacity(cfg.times.len()),
        jumps: Vec::new(),
        states: Vec::new(),
    };
    let mut average = cfg.average_from.map(|_| (Array2::<C64>::zeros((d, d)), 0usize));
    let mut next_sample = 0;
    let mut buf = vec![C64::new(0.0, 0.0); d];
    let mut tmp = vec![C64::new(0.0, 0.0); d];
    let mut obs_buf = vec![C64::new(0.0, 0.0); d];

    let mut emit = |t: f64, raw: &[C64], record: &mut TrajectoryRecord| -> Result<()> {
        let n = norm_sqr(raw).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::NumericalFailure(format!("state norm {n} at t = {t}")));
        }
        let psi: Vec<C64> = raw.iter().map(|v| v / n).collect();
        let mut row = Vec::with_capacity(cfg.observables.len());
        for o in cfg.observables {
            o.matvec(&psi, &mut obs_buf);
            row.push(psi.iter().zip(&obs_buf).map(|(a, b)| (a.conj() * b).re).sum());
        }
        record.times.push(t);
        record.values.push(row);
        if let (Some(from), Some((acc, count))) = (cfg.average_from, average.as_mut()) {
            if t >= from {
                for r in 0..d {
                    let pr = psi[r];
                    if pr.norm_sqr() == 0.0 {
                        continue;
                    }
                    let mut row = acc.row_mut(r);
                    for (c, v) in row.iter_mut().enumerate() {
                        *v += pr * psi[c].conj();
                    }
                }
                *count += 1;
            }
        }
        if cfg.keep_states {
            let s = StateVector::new(psi0.space().clone(), ndarray::Array1::from(psi))?;
            record.states.push(s);
        }
        Ok(())
    };

    while next_sample < cfg.times.len() && cfg.times[next_sample] <= 0.0 {
        emit(0.0, ode.y(), &mut record)?;
        next_sample += 1;
    }
    let t_end = cfg.times.last().copied().unwrap_or(0.0);
    let mut threshold = uniform_open(&mut rng);

    while ode.t() < t_end {
        let t_old = ode.t();
        ode.step(t_end)?;
        let t_new = ode.t();
        let n2 = norm_sqr(ode.y());
        if !n2.is_finite() {
            return Err(Error::NumericalFailure(format!("non-finite norm at t = {t_new}")));
        }
        if n2 > threshold {
            while next_sample < cfg.times.len() && cfg.times[next_sample] <= t_new {
                let ts = cfg.times[next_sample];
                if ts >= t_new {
                    emit(ts, ode.y(), &mut record)?;
                } else {
                    ode.dense(ts, &mut buf);
                    emit(ts, &buf, &mut record)?;
                }
                next_sample += 1;
            }
            continue;
        }

        // The norm is non-increasing, so the crossing is bracketed.
        let (mut lo, mut hi) = (t_old, t_new);
        let width = opts.jump_tol * t_new.max(1.0);
        while hi - lo > width {
            let mid = 0.5 * (lo + hi);
            ode.dense(mid, &mut buf);
            if norm_sqr(&buf) > threshold {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let tj = 0.5 * (lo + hi);
        while next_sample < cfg.times.len() && cfg.times[next_sample] < tj {
            let ts = cfg.times[next_sample];
            ode.dense(ts, &mut buf);
            emit(ts, &buf, &mut record)?;
            next_sample += 1;
        }
        ode.dense(tj, &mut buf);

        let weights: Vec<f64> = sys
            .jump_norm_matrices()
            .iter()
            .map(|jj| {
                jj.matvec(&buf, &mut tmp);
                buf.iter().zip(&tmp).map(|(a, b)| (a.conj() * b).re).sum::<f64>().max(0.0)
            })
            .collect();
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::NumericalFailure(format!(
                "norm crossed its threshold at t = {tj} with no jump weight"
            )));
        }
        let pick = rng.random::<f64>() * total;
        let mut channel = weights.len() - 1;
        let mut cum = 0.0;
        for (k, w) in weights.iter().enumerate() {
            cum += w;
            if pick < cum {
                channel = k;
                break;
            }
        }
        sys.jump_matrices()[channel].matvec(&buf, &mut tmp);
        let n = norm_sqr(&tmp).sqrt();
        for v in tmp.iter_mut() {
            *v /= n;
        }
        record.jumps.push(Jump { time: tj, channel });
        ode.reset(tj, &tmp);
        threshold = uniform_open(&mut rng);
    }
    while next_sample < cfg.times.len() {
        emit(cfg.times[next_sample], ode.y(), &mut record)?;
        next_sample += 1;
    }
    Ok(Outcome { record, average })
}

fn check(sys: &OpenSystem, psi0: &StateVector, cfg: &TrajectoryConfig, opts: &SolverOptions) -> Result<()> {
    opts.validate()?;
    if psi0.space() != sys.space() {
        return invalid("initial state and model act on different spaces");
    }
    if (psi0.norm() - 1.0).abs() > 1e-9 {
        return invalid("initial state is not normalized");
    }
    if cfg.times.iter().any(|t| !(*t >= 0.0)) || cfg.times.windows(2).any(|w| w[1] < w[0]) {
        return invalid("sample times must be non-negative and non-decreasing");
    }
    let d = sys.dim();
    if cfg.observables.iter().any(|o| o.nrows() != d || o.ncols() != d) {
        return invalid("observable dimension does not match the model");
    }
    Ok(())
}

/// One quantum trajectory. The random stream is fixed by `(seed, index)`.
pub fn mcwf_trajectory(
    sys: &OpenSystem,
    psi0: &StateVector,
    cfg: &TrajectoryConfig,
    opts: &SolverOptions,
    seed: u64,
    index: u64,
) -> Result<TrajectoryRecord> {
    check(sys, psi0, cfg, opts)?;
    Ok(run(sys, psi0, cfg, opts, seed, index)?.record)
}

#[derive(Clone, Debug)]
pub struct EnsembleResult {
    pub times: Vec<f64>,
    /// `mean[s][o]`
    pub mean: Vec<Vec<f64>>,
    /// Sample standard deviation over `√M`.
    pub std_err: Vec<Vec<f64>>,
    pub n_trajectories: usize,
    /// Time- and ensemble-averaged state, when requested.
    pub averaged_state: Option<DensityMatrix>,
    pub records: Vec<TrajectoryRecord>,
}

fn tag(e: Error, index: usize, seed: u64) -> Error {
    let prefix = format!("trajectory {index} (seed {seed})");
    match e {
        Error::NumericalFailure(m) => Error::NumericalFailure(format!("{prefix}: {m}")),
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("{prefix}: {m}")),
        Error::ResourceLimit(m) => Error::ResourceLimit(format!("{prefix}: {m}")),
        other => other,
    }
}

/// Runs `opts.n_trajectories` trajectories on `opts.workers` threads and
/// reduces them in index order, so the result does not depend on the
/// schedule.
pub fn mcwf_ensemble(
    sys: &OpenSystem,
    psi0: &StateVector,
    cfg: &TrajectoryConfig,
    opts: &SolverOptions,
    keep_records: bool,
) -> Result<EnsembleResult> {
    check(sys, psi0, cfg, opts)?;
    let m = opts.n_trajectories;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| Error::ResourceLimit(format!("worker pool: {e}")))?;
    let workers = pool.current_num_threads().max(1);
    let chunk = 4 * workers;

    let n_s = cfg.times.len();
    let n_o = cfg.observables.len();
    let mut mean = vec![vec![0.0; n_o]; n_s];
    let mut m2 = vec![vec![0.0; n_o]; n_s];
    let mut acc: Option<(Array2<C64>, usize)> = None;
    let mut records = Vec::new();
    let mut count = 0usize;

    let mut start = 0;
    while start < m {
        let end = (start + chunk).min(m);
        let batch: Vec<Result<Outcome>> = pool.install(|| {
            (start..end)
                .into_par_iter()
                .map(|i| run(sys, psi0, cfg, opts, opts.seed, i as u64).map_err(|e| tag(e, i, opts.seed)))
                .collect()
        });
        for out in batch {
            let out = out?;
            count += 1;
            // Welford update, in trajectory order.
            for (s, row) in out.record.values.iter().enumerate() {
                for (o, &x) in row.iter().enumerate() {
                    let delta = x - mean[s][o];
                    mean[s][o] += delta / count as f64;
                    m2[s][o] += delta * (x - mean[s][o]);
                }
            }
            if let Some((mat, c)) = out.average {
                match acc.as_mut() {
                    Some((a, total)) => {
                        *a += &mat;
                        *total += c;
                    }
                    None => acc = Some((mat, c)),
                }
            }
            if keep_records {
                records.push(out.record);
            }
        }
        start = end;
    }

    let std_err = m2
        .iter()
        .map(|row| {
            row.iter()
                .map(|v| if count > 1 { (v / (count - 1) as f64).sqrt() / (count as f64).sqrt() } else { 0.0 })
                .collect()
        })
        .collect();
    let averaged_state = match acc {
        Some((mat, c)) if c > 0 => {
            let mut rho = DensityMatrix::new(sys.space().clone(), mat.mapv(|v| v / c as f64))?;
            rho.hermitize();
            Some(rho)
        }
        _ => None,
    };
    Ok(EnsembleResult { times: cfg.times.to_vec(), mean, std_err, n_trajectories: count, averaged_state, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::{annihilation, number, Operator, SpaceDescriptor};
    use crate::model::tests::single_particle;
    use crate::model::Model;

    fn damped_cavity(cutoff: usize) -> OpenSystem {
        let space = SpaceDescriptor::fock(cutoff).unwrap();
        let h = Operator::from_csr(space, CsrMatrix::zeros(cutoff, cutoff)).unwrap();
        let j = annihilation(cutoff).unwrap().scale(C64::new(2f64.sqrt(), 0.0));
        OpenSystem::new(h, vec![j]).unwrap()
    }

    #[test]
    fn dark_state_has_no_jumps() {
        let m = Model::build(&single_particle(0.0, 5, 4)).unwrap();
        let psi0 = m.ground_vacuum();
        let times = [0.0, 5.0, 10.0];
        let mut cfg = TrajectoryConfig::new(&times, &[]);
        cfg.keep_states = true;
        let rec = mcwf_trajectory(&m.system, &psi0, &cfg, &SolverOptions::default(), 3, 0).unwrap();
        assert!(rec.jumps.is_empty());
        // Unchanged up to the global phase e^{−iE₀t}.
        let last = rec.states.last().unwrap();
        assert!((psi0.inner(last).unwrap().norm() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn reruns_are_identical() {
        let sys = damped_cavity(8);
        let psi0 = StateVector::fock(8, 3).unwrap();
        let n = number(8).unwrap().csr().into_owned();
        let times: Vec<f64> = (0..=20).map(|k| k as f64 * 0.25).collect();
        let obs = [n];
        let cfg = TrajectoryConfig::new(&times, &obs);
        let opts = SolverOptions::default();
        let a = mcwf_trajectory(&sys, &psi0, &cfg, &opts, 42, 5).unwrap();
        let b = mcwf_trajectory(&sys, &psi0, &cfg, &opts, 42, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.jumps.len(), 3);
        assert!(a.jumps.windows(2).all(|w| w[0].time < w[1].time));
        let c = mcwf_trajectory(&sys, &psi0, &cfg, &opts, 42, 6).unwrap();
        assert_ne!(a.jumps, c.jumps);
    }

    #[test]
    fn single_member_ensemble_is_the_trajectory() {
        let sys = damped_cavity(6);
        let psi0 = StateVector::fock(6, 2).unwrap();
        let obs = [number(6).unwrap().csr().into_owned()];
        let times = [0.0, 0.5, 1.0, 2.0];
        let cfg = TrajectoryConfig::new(&times, &obs);
        let opts = SolverOptions { n_trajectories: 1, seed: 9, workers: 1, ..Default::default() };
        let ens = mcwf_ensemble(&sys, &psi0, &cfg, &opts, true).unwrap();
        let rec = mcwf_trajectory(&sys, &psi0, &cfg, &opts, 9, 0).unwrap();
        assert_eq!(ens.records[0], rec);
        for (s, row) in rec.values.iter().enumerate() {
            assert_eq!(ens.mean[s][0], row[0]);
        }
    }

    #[test]
    fn ensemble_independent_of_worker_count() {
        let sys = damped_cavity(6);
        let psi0 = StateVector::fock(6, 2).unwrap();
        let obs = [number(6).unwrap().csr().into_owned()];
        let times = [0.0, 0.5, 1.0];
        let mut cfg = TrajectoryConfig::new(&times, &obs);
        cfg.average_from = Some(0.5);
        let one = SolverOptions { n_trajectories: 37, seed: 1, workers: 1, ..Default::default() };
        let three = SolverOptions { workers: 3, ..one.clone() };
        let a = mcwf_ensemble(&sys, &psi0, &cfg, &one, false).unwrap();
        let b = mcwf_ensemble(&sys, &psi0, &cfg, &three, false).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.std_err, b.std_err);
        assert_eq!(a.averaged_state, b.averaged_state);
    }
}
