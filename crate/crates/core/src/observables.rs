//! Quantities extracted from states: photon statistics, Husimi Q-functions,
//! particle densities and correlations, and overlaps with two-branch
//! particle-field states.

use argmin::core::{CostFunction, Executor};
use argmin::solver::neldermead::NelderMead;
use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{invalid, Error, Result};
use crate::geometry::{eigenfunctions_into, trap_nodes, TrapGeometry};
use crate::hilbert::{
    coherent_amplitudes, partial_trace, trace_product, transition_matrix, DensityMatrix, Factor, ParticleBasis,
    SpaceDescriptor, StateVector,
};
use crate::model::Model;
use crate::C64;

pub const DEFAULT_Q_POINTS: usize = 101;
/// Largest boundary value of an adequate Q grid, relative to its maximum.
pub const Q_BOUNDARY_RATIO: f64 = 1e-4;
/// Local Q maxima below this fraction of the global maximum are ignored.
pub const Q_PEAK_FLOOR: f64 = 1e-3;
/// Amplitudes below this are treated as the vacuum in branch fits.
pub const ALPHA_DEGENERATE: f64 = 1e-6;
const MAX_GRID_WIDENINGS: usize = 8;

const ZERO: C64 = C64::new(0.0, 0.0);

/// Factor index of the `mode`-th Fock factor.
pub fn fock_factor(space: &SpaceDescriptor, mode: usize) -> Result<usize> {
    space
        .factors()
        .iter()
        .enumerate()
        .filter(|(_, f)| matches!(f, Factor::Fock { .. }))
        .nth(mode)
        .map(|(k, _)| k)
        .ok_or_else(|| Error::InvalidArgument(format!("no field mode {mode} in this space")))
}

/// State of one field mode with everything else traced out.
pub fn reduced_mode(rho: &DensityMatrix, mode: usize) -> Result<DensityMatrix> {
    partial_trace(rho, &[fock_factor(rho.space(), mode)?])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldMoments {
    pub mean_field: C64,
    pub mean_n: f64,
    pub var_n: f64,
}

fn moments_of(r: &Array2<C64>) -> FieldMoments {
    let c = r.nrows();
    let mut a = ZERO;
    let (mut n1, mut n2) = (0.0, 0.0);
    for n in 0..c {
        let p = r[[n, n]].re;
        n1 += n as f64 * p;
        n2 += (n * n) as f64 * p;
        if n > 0 {
            a += r[[n, n - 1]] * (n as f64).sqrt();
        }
    }
    FieldMoments { mean_field: a, mean_n: n1, var_n: n2 - n1 * n1 }
}

/// `⟨a⟩`, `⟨n⟩` and `Var n` of a field mode.
pub fn field_moments(rho: &DensityMatrix, mode: usize) -> Result<FieldMoments> {
    Ok(moments_of(reduced_mode(rho, mode)?.matrix()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QGridSpec {
    pub alpha_max: f64,
    /// Points per axis.
    pub points: usize,
}

impl QGridSpec {
    pub fn new(alpha_max: f64, points: usize) -> Result<Self> {
        let s = Self { alpha_max, points };
        s.validate()?;
        Ok(s)
    }

    /// Default grid for a mode holding about `mean_n` photons.
    pub fn auto(mean_n: f64) -> Self {
        Self { alpha_max: 2.0 + 2.0 * mean_n.max(0.0).sqrt(), points: DEFAULT_Q_POINTS }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_max > 0.0) || !self.alpha_max.is_finite() {
            return invalid("Q grid alpha_max must be positive");
        }
        if self.points < 3 {
            return invalid("Q grid needs at least 3 points per axis");
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        2.0 * self.alpha_max / (self.points - 1) as f64
    }

    pub fn axis(&self) -> Vec<f64> {
        let h = self.step();
        (0..self.points).map(|k| -self.alpha_max + k as f64 * h).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QPeak {
    /// Grid indices `(re, im)`.
    pub index: (usize, usize),
    pub grid_alpha: C64,
    /// Location after a local quadratic fit.
    pub alpha: C64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QGrid {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub step: f64,
    /// `values[[i, j]] = Q(re[i] + i·im[j])`.
    pub values: Array2<f64>,
}

impl QGrid {
    pub fn max(&self) -> f64 {
        self.values.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().fold(f64::INFINITY, |m, &v| m.min(v))
    }

    pub fn boundary_max(&self) -> f64 {
        let (n, m) = self.values.dim();
        let mut b: f64 = 0.0;
        for i in 0..n {
            b = b.max(self.values[[i, 0]]).max(self.values[[i, m - 1]]);
        }
        for j in 0..m {
            b = b.max(self.values[[0, j]]).max(self.values[[n - 1, j]]);
        }
        b
    }

    /// Whether the grid reaches far enough out for the state.
    pub fn covers_state(&self) -> bool {
        self.boundary_max() <= Q_BOUNDARY_RATIO * self.max()
    }

    pub fn warning(&self) -> Option<String> {
        (!self.covers_state()).then(|| {
            format!(
                "Q grid too small: boundary value {:.3e} exceeds {:.0e} of the maximum {:.3e}",
                self.boundary_max(),
                Q_BOUNDARY_RATIO,
                self.max()
            )
        })
    }

    /// `∫Q d²α` by the rectangle rule.
    pub fn integral(&self) -> f64 {
        self.values.sum() * self.step * self.step
    }

    fn alpha(&self, i: usize, j: usize) -> C64 {
        C64::new(self.re[i], self.im[j])
    }

    fn refine(&self, i: usize, j: usize) -> C64 {
        let (n, m) = self.values.dim();
        let v = &self.values;
        let offset = |lo: f64, mid: f64, hi: f64| {
            let curv = lo - 2.0 * mid + hi;
            if curv < 0.0 {
                (0.5 * (lo - hi) / curv).clamp(-0.5, 0.5)
            } else {
                0.0
            }
        };
        let dx = if i > 0 && i + 1 < n { offset(v[[i - 1, j]], v[[i, j]], v[[i + 1, j]]) } else { 0.0 };
        let dy = if j > 0 && j + 1 < m { offset(v[[i, j - 1]], v[[i, j]], v[[i, j + 1]]) } else { 0.0 };
        C64::new(self.re[i] + dx * self.step, self.im[j] + dy * self.step)
    }

    fn peak(&self, i: usize, j: usize) -> QPeak {
        QPeak { index: (i, j), grid_alpha: self.alpha(i, j), alpha: self.refine(i, j), value: self.values[[i, j]] }
    }

    /// Global maximum. Ties go to the larger `|α|`, then the smallest
    /// row-major grid index.
    pub fn global_max(&self) -> QPeak {
        let top = self.max();
        let tie = 1e-12 * top.abs();
        let (n, m) = self.values.dim();
        let mut best: Option<(usize, usize)> = None;
        for i in 0..n {
            for j in 0..m {
                if self.values[[i, j]] < top - tie {
                    continue;
                }
                match best {
                    Some((bi, bj)) if self.alpha(i, j).norm() <= self.alpha(bi, bj).norm() => {}
                    _ => best = Some((i, j)),
                }
            }
        }
        let (i, j) = best.unwrap_or((0, 0));
        self.peak(i, j)
    }

    /// Local maxima over the 8-neighbourhood, strongest first. Within a
    /// plateau only the first point in row-major order counts.
    pub fn local_maxima(&self) -> Vec<QPeak> {
        let (n, m) = self.values.dim();
        let floor = Q_PEAK_FLOOR * self.max();
        let mut peaks = Vec::new();
        for i in 0..n {
            for j in 0..m {
                let v = self.values[[i, j]];
                if v < floor {
                    continue;
                }
                let mut is_max = true;
                'nb: for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        if di == 0 && dj == 0 {
                            continue;
                        }
                        let (a, b) = (i as i64 + di, j as i64 + dj);
                        if a < 0 || b < 0 || a >= n as i64 || b >= m as i64 {
                            continue;
                        }
                        let w = self.values[[a as usize, b as usize]];
                        let earlier = (di, dj) < (0, 0);
                        if w > v || (earlier && w == v) {
                            is_max = false;
                            break 'nb;
                        }
                    }
                }
                if is_max {
                    peaks.push(self.peak(i, j));
                }
            }
        }
        peaks.sort_by(|a, b| b.value.total_cmp(&a.value));
        peaks
    }
}

fn q_of_matrix(r: &Array2<C64>, spec: &QGridSpec) -> QGrid {
    let axis = spec.axis();
    let c = r.nrows();
    let rows: Vec<Vec<f64>> = axis
        .par_iter()
        .map(|&x| {
            let mut v = vec![ZERO; c];
            let mut rv = vec![ZERO; c];
            axis.iter()
                .map(|&y| {
                    let amps = coherent_amplitudes(C64::new(x, y), c);
                    v.copy_from_slice(&amps);
                    for (k, out) in rv.iter_mut().enumerate() {
                        *out = r.row(k).iter().zip(&v).map(|(a, b)| a * b).sum();
                    }
                    v.iter().zip(&rv).map(|(a, b)| (a.conj() * b).re).sum::<f64>() / PI
                })
                .collect()
        })
        .collect();
    let n = axis.len();
    let values = Array2::from_shape_fn((n, n), |(i, j)| rows[i][j]);
    QGrid { re: axis.clone(), im: axis, step: spec.step(), values }
}

/// Husimi function `Q(α) = ⟨α|ρ_mode|α⟩/π` on a square grid.
pub fn qfunction(rho: &DensityMatrix, mode: usize, spec: &QGridSpec) -> Result<QGrid> {
    spec.validate()?;
    let r = reduced_mode(rho, mode)?;
    Ok(q_of_matrix(r.matrix(), spec))
}

/// Q grid sized from the mode occupation, widened until the boundary
/// criterion holds.
pub fn qfunction_auto(rho: &DensityMatrix, mode: usize) -> Result<QGrid> {
    let r = reduced_mode(rho, mode)?;
    let mut spec = QGridSpec::auto(moments_of(r.matrix()).mean_n);
    let mut q = q_of_matrix(r.matrix(), &spec);
    for _ in 0..MAX_GRID_WIDENINGS {
        if q.covers_state() {
            break;
        }
        spec.alpha_max += 1.0;
        q = q_of_matrix(r.matrix(), &spec);
    }
    Ok(q)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParticleReduction {
    /// Trap eigenmode index of each particle mode.
    pub trap_modes: Vec<usize>,
    /// `one_body[[i, j]] = ⟨cᵢ†cⱼ⟩`.
    pub one_body: Array2<C64>,
    /// Particle-sector state with the field traced out.
    pub sector: DensityMatrix,
}

impl ParticleReduction {
    pub fn populations(&self) -> Vec<f64> {
        self.one_body.diag().iter().map(|v| v.re).collect()
    }
}

fn particle_sector(model: &Model, rho: &DensityMatrix) -> Result<DensityMatrix> {
    if rho.space() != model.space() {
        return invalid("state does not belong to this model");
    }
    partial_trace(rho, &[Model::PARTICLE_FACTOR])
}

fn one_body(basis: &ParticleBasis, sector: &Array2<C64>) -> Result<Array2<C64>> {
    let m = basis.n_modes();
    let mut g = Array2::zeros((m, m));
    for i in 0..m {
        for j in 0..m {
            g[[i, j]] = trace_product(&transition_matrix(basis, i, j)?, sector);
        }
    }
    Ok(g)
}

pub fn reduced_particle_dm(model: &Model, rho: &DensityMatrix) -> Result<ParticleReduction> {
    let sector = particle_sector(model, rho)?;
    let one_body = one_body(&model.basis, sector.matrix())?;
    Ok(ParticleReduction { trap_modes: model.coupling.trap_modes.clone(), one_body, sector })
}

/// Values of the model's particle-mode eigenfunctions at `x`.
fn mode_functions(trap: &TrapGeometry, trap_modes: &[usize], x: f64, buf: &mut Vec<f64>) -> Vec<f64> {
    let top = trap_modes.iter().max().map_or(0, |m| m + 1);
    buf.resize(top, 0.0);
    eigenfunctions_into(trap, x, buf);
    trap_modes.iter().map(|&k| buf[k]).collect()
}

/// `ρ(x) = Σᵢⱼ Ψᵢ(x)Ψⱼ(x)⟨cᵢ†cⱼ⟩` from a one-body matrix.
pub fn density_from_one_body(trap: &TrapGeometry, trap_modes: &[usize], g: &Array2<C64>, xs: &[f64]) -> Vec<f64> {
    let mut buf = Vec::new();
    xs.iter()
        .map(|&x| {
            let psi = mode_functions(trap, trap_modes, x, &mut buf);
            let mut s = 0.0;
            for (i, pi) in psi.iter().enumerate() {
                for (j, pj) in psi.iter().enumerate() {
                    s += pi * pj * g[[i, j]].re;
                }
            }
            s
        })
        .collect()
}

pub fn position_density(model: &Model, rho: &DensityMatrix, xs: &[f64]) -> Result<Vec<f64>> {
    let red = reduced_particle_dm(model, rho)?;
    Ok(density_from_one_body(&model.params.trap, &red.trap_modes, &red.one_body, xs))
}

/// Quadrature nodes and weights over the trap support, fine enough for
/// products of up to four particle-mode eigenfunctions.
pub fn density_nodes(model: &Model) -> Result<Vec<(f64, f64)>> {
    let top = model.coupling.trap_modes.iter().max().map_or(1, |m| m + 1);
    trap_nodes(&model.params.trap, 2 * top, 0.0, 1)
}

/// Two-particle amplitudes `⟨0|Ψ̂(x₂)Ψ̂(x₁)|s⟩` for every basis state `s`.
fn pair_amplitudes(basis: &ParticleBasis, p1: &[f64], p2: &[f64], out: &mut [f64]) {
    for (s, v) in out.iter_mut().enumerate() {
        let occ = basis.occupation(s);
        let mut modes = occ.iter().enumerate().filter(|(_, &n)| n > 0);
        let (k, nk) = modes.next().expect("two particles occupy some mode");
        *v = if *nk == 2 {
            2f64.sqrt() * (p1[k] * p2[k])
        } else {
            let (l, _) = modes.next().expect("second particle");
            p1[k] * p2[l] + p1[l] * p2[k]
        };
    }
}

fn quadratic_form(q: &[f64], m: &Array2<C64>) -> f64 {
    let mut s = 0.0;
    for (a, qa) in q.iter().enumerate() {
        if *qa == 0.0 {
            continue;
        }
        let row = m.row(a);
        let mut t = 0.0;
        for (b, qb) in q.iter().enumerate() {
            t += row[b].re * qb;
        }
        s += qa * t;
    }
    s
}

struct PairContext {
    sector: DensityMatrix,
    trap_modes: Vec<usize>,
}

fn pair_context(model: &Model, rho: &DensityMatrix) -> Result<PairContext> {
    if model.params.n_particles != 2 {
        return invalid(format!("pair density needs 2 particles, the model has {}", model.params.n_particles));
    }
    Ok(PairContext { sector: particle_sector(model, rho)?, trap_modes: model.coupling.trap_modes.clone() })
}

fn pair_values(model: &Model, ctx: &PairContext, x1: &[f64], x2: &[f64]) -> Array2<f64> {
    let trap = &model.params.trap;
    let mut buf = Vec::new();
    let f1: Vec<Vec<f64>> = x1.iter().map(|&x| mode_functions(trap, &ctx.trap_modes, x, &mut buf)).collect();
    let f2: Vec<Vec<f64>> = x2.iter().map(|&x| mode_functions(trap, &ctx.trap_modes, x, &mut buf)).collect();
    let d = model.basis.len();
    let rows: Vec<Vec<f64>> = f1
        .par_iter()
        .map(|p1| {
            let mut q = vec![0.0; d];
            f2.iter()
                .map(|p2| {
                    pair_amplitudes(&model.basis, p1, p2, &mut q);
                    quadratic_form(&q, ctx.sector.matrix())
                })
                .collect()
        })
        .collect();
    Array2::from_shape_fn((x1.len(), x2.len()), |(i, j)| rows[i][j])
}

/// `ρ(x₁,x₂) = ⟨Ψ̂†(x₁)Ψ̂†(x₂)Ψ̂(x₂)Ψ̂(x₁)⟩` on the grid `xs × xs`.
pub fn pair_density(model: &Model, rho: &DensityMatrix, xs: &[f64]) -> Result<Array2<f64>> {
    let ctx = pair_context(model, rho)?;
    Ok(pair_values(model, &ctx, xs, xs))
}

/// `∫∫ρ(x₁,x₂) dx₁dx₂`, which equals `N(N−1)`.
pub fn pair_density_integral(model: &Model, rho: &DensityMatrix) -> Result<f64> {
    let ctx = pair_context(model, rho)?;
    let nodes = density_nodes(model)?;
    let xs: Vec<f64> = nodes.iter().map(|n| n.0).collect();
    let v = pair_values(model, &ctx, &xs, &xs);
    let mut s = 0.0;
    for (i, (_, wi)) in nodes.iter().enumerate() {
        for (j, (_, wj)) in nodes.iter().enumerate() {
            s += wi * wj * v[[i, j]];
        }
    }
    Ok(s)
}

/// `∫ρ(x,x)dx / ∫ρ(x,x̄)dx`, with `x̄` the mirror image of `x` about the trap
/// center. Above 1 the particles prefer the same site.
pub fn pair_diagonal_dominance(model: &Model, rho: &DensityMatrix) -> Result<f64> {
    let ctx = pair_context(model, rho)?;
    let nodes = density_nodes(model)?;
    let x0 = model.params.trap.center;
    let (mut same, mut mirror) = (0.0, 0.0);
    for &(x, w) in &nodes {
        same += w * pair_values(model, &ctx, &[x], &[x])[[0, 0]];
        mirror += w * pair_values(model, &ctx, &[x], &[2.0 * x0 - x])[[0, 0]];
    }
    if !(mirror > 0.0) {
        return Err(Error::NumericalFailure("mirror pair density vanishes".into()));
    }
    Ok(same / mirror)
}

/// Photon-number distribution `p[[n₁, n₂]]` of two field modes.
pub fn joint_photon_dist(rho: &DensityMatrix, mode_a: usize, mode_b: usize) -> Result<Array2<f64>> {
    if mode_a == mode_b {
        return invalid("joint distribution needs two distinct modes");
    }
    let (fa, fb) = (fock_factor(rho.space(), mode_a)?, fock_factor(rho.space(), mode_b)?);
    let r = partial_trace(rho, &[fa, fb])?;
    let dims = r.space().dims();
    let (d_lo, d_hi) = (dims[0], dims[1]);
    let diag = |i: usize, j: usize| r.matrix()[[i * d_hi + j, i * d_hi + j]].re;
    Ok(if fa < fb {
        Array2::from_shape_fn((d_lo, d_hi), |(i, j)| diag(i, j))
    } else {
        Array2::from_shape_fn((d_hi, d_lo), |(j, i)| diag(i, j))
    })
}

/// Pearson correlation coefficient of `n₁` and `n₂` under `p`.
pub fn photon_correlation(p: &Array2<f64>) -> f64 {
    let (mut m1, mut m2, mut m11, mut m22, mut m12) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for ((i, j), &w) in p.indexed_iter() {
        let (a, b) = (i as f64, j as f64);
        m1 += w * a;
        m2 += w * b;
        m11 += w * a * a;
        m22 += w * b * b;
        m12 += w * a * b;
    }
    let cov = m12 - m1 * m2;
    let den = ((m11 - m1 * m1) * (m22 - m2 * m2)).sqrt();
    if den > 0.0 {
        cov / den
    } else {
        0.0
    }
}

/// Particle-sector dimension and field cutoffs of a space laid out as
/// non-field factors followed by field modes.
fn split_layout(space: &SpaceDescriptor) -> Result<(usize, Vec<usize>)> {
    let mut d_p = 1;
    let mut cutoffs = Vec::new();
    for f in space.factors() {
        match f {
            Factor::Fock { cutoff } => cutoffs.push(*cutoff),
            other if cutoffs.is_empty() => d_p *= other.dim(),
            _ => return invalid("field modes must follow the particle factors"),
        }
    }
    if cutoffs.is_empty() {
        return invalid("state has no field modes");
    }
    Ok((d_p, cutoffs))
}

/// `|α₁⟩⊗|α₂⟩⊗…` over the field factors, each normalized after truncation.
fn coherent_product(alphas: &[C64], cutoffs: &[usize]) -> Vec<C64> {
    let mut v = vec![C64::new(1.0, 0.0)];
    for (a, &c) in alphas.iter().zip(cutoffs) {
        let amps = coherent_amplitudes(*a, c);
        let n = amps.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        let mut next = Vec::with_capacity(v.len() * c);
        for x in &v {
            next.extend(amps.iter().map(|y| x * y / n));
        }
        v = next;
    }
    v
}

/// `(⟨v|)ψ`: partial inner product over the field factors.
fn branch(psi: &[C64], v: &[C64], d_p: usize) -> Array1<C64> {
    let d_f = v.len();
    Array1::from_shape_fn(d_p, |p| {
        psi[p * d_f..(p + 1) * d_f].iter().zip(v).map(|(a, b)| b.conj() * a).sum()
    })
}

fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Q-maximum amplitude of every field mode of `rho`.
fn alphas_from_q(rho: &DensityMatrix, n_modes: usize) -> Result<Vec<C64>> {
    (0..n_modes).map(|k| Ok(qfunction_auto(rho, k)?.global_max().alpha)).collect()
}

fn is_degenerate(alphas: &[C64]) -> bool {
    alphas.iter().all(|a| a.norm() <= ALPHA_DEGENERATE)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnsatzFit {
    pub alphas: Vec<C64>,
    /// Normalized particle state on the `+α` branch.
    pub plus: Vec<C64>,
    /// Normalized particle state on the `−α` branch.
    pub minus: Vec<C64>,
    pub fidelity: f64,
    /// All amplitudes vanish, so only one branch was fitted.
    pub degenerate: bool,
}

fn normalized(v: Array1<C64>) -> (Vec<C64>, f64) {
    let n = v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    let out = if n > 0.0 { v.iter().map(|x| x / n).collect() } else { v.to_vec() };
    (out, n)
}

fn fit_at(psi: &[C64], d_p: usize, cutoffs: &[usize], alphas: &[C64]) -> AnsatzFit {
    let vp = coherent_product(alphas, cutoffs);
    let (plus, np) = normalized(branch(psi, &vp, d_p));
    if is_degenerate(alphas) {
        return AnsatzFit { alphas: alphas.to_vec(), minus: plus.clone(), plus, fidelity: (np * np).min(1.0), degenerate: true };
    }
    let neg: Vec<C64> = alphas.iter().map(|a| -a).collect();
    let vm = coherent_product(&neg, cutoffs);
    let (minus, nm) = normalized(branch(psi, &vm, d_p));
    // φ = |x₊⟩|α⟩ + |x₋⟩|−α⟩ with unit branches, so ⟨φ|ψ⟩ = ‖x̃₊‖ + ‖x̃₋‖.
    let wp = if np > 0.0 { 1.0 } else { 0.0 };
    let wm = if nm > 0.0 { 1.0 } else { 0.0 };
    let cross = (dot(&plus, &minus) * dot(&vp, &vm)).re;
    let norm2 = wp + wm + 2.0 * wp * wm * cross;
    let overlap = np + nm;
    let fidelity = if norm2 > 0.0 { (overlap * overlap / norm2).clamp(0.0, 1.0) } else { 0.0 };
    AnsatzFit { alphas: alphas.to_vec(), plus, minus, fidelity, degenerate: false }
}

struct AnsatzCost<'a> {
    psi: &'a [C64],
    d_p: usize,
    cutoffs: &'a [usize],
}

impl CostFunction for AnsatzCost<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        let alphas: Vec<C64> = p.chunks(2).map(|c| C64::new(c[0], c[1])).collect();
        Ok(1.0 - fit_at(self.psi, self.d_p, self.cutoffs, &alphas).fidelity)
    }
}

/// Overlap of a pure state with `(|x₊⟩|α⟩ + |x₋⟩|−α⟩)/√2`.
///
/// The amplitudes come from the per-mode Q maxima; the branch states are the
/// normalized partial inner products `(⟨±α|)ψ`. With `refine`, the amplitudes
/// are then polished by a Nelder–Mead search on the fidelity.
pub fn ansatz_overlap(psi: &StateVector, refine: bool) -> Result<AnsatzFit> {
    let (d_p, cutoffs) = split_layout(psi.space())?;
    let rho = psi.to_density();
    let alphas = alphas_from_q(&rho, cutoffs.len())?;
    let start = fit_at(psi.as_slice(), d_p, &cutoffs, &alphas);
    if !refine {
        return Ok(start);
    }
    let x0: Vec<f64> = alphas.iter().flat_map(|a| [a.re, a.im]).collect();
    let mut simplex = vec![x0.clone()];
    for k in 0..x0.len() {
        let mut v = x0.clone();
        v[k] += 0.05;
        simplex.push(v);
    }
    let solver = NelderMead::new(simplex)
        .with_sd_tolerance(1e-6)
        .map_err(|e| Error::NumericalFailure(format!("ansatz refinement: {e}")))?;
    let cost = AnsatzCost { psi: psi.as_slice(), d_p, cutoffs: &cutoffs };
    let res = Executor::new(cost, solver)
        .configure(|s| s.max_iters(2000))
        .run()
        .map_err(|e| Error::NumericalFailure(format!("ansatz refinement: {e}")))?;
    let best = match res.state().best_param.as_ref() {
        Some(p) => fit_at(
            psi.as_slice(),
            d_p,
            &cutoffs,
            &p.chunks(2).map(|c| C64::new(c[0], c[1])).collect::<Vec<_>>(),
        ),
        None => return Ok(start),
    };
    Ok(if best.fidelity >= start.fidelity { best } else { start })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureFit {
    pub alphas: Vec<C64>,
    pub fidelity: f64,
    pub degenerate: bool,
}

/// `(⟨v|)ρ(|v⟩)` over the field factors, normalized to unit trace.
fn conditioned(rho: &Array2<C64>, v: &[C64], d_p: usize) -> Array2<C64> {
    let d_f = v.len();
    let mut out = Array2::zeros((d_p, d_p));
    for p in 0..d_p {
        for q in 0..d_p {
            let mut s = ZERO;
            for f in 0..d_f {
                let row = rho.row(p * d_f + f);
                let inner: C64 = (0..d_f).map(|g| row[q * d_f + g] * v[g]).sum();
                s += v[f].conj() * inner;
            }
            out[[p, q]] = s;
        }
    }
    let tr: f64 = out.diag().iter().map(|x| x.re).sum();
    if tr > 0.0 {
        out.mapv_inplace(|x| x / tr);
    }
    out
}

fn add_branch(sigma: &mut Array2<C64>, cond: &Array2<C64>, v: &[C64], weight: f64) {
    let d_f = v.len();
    for ((p, q), c) in cond.indexed_iter() {
        if c.norm_sqr() == 0.0 {
            continue;
        }
        for f in 0..d_f {
            for g in 0..d_f {
                sigma[[p * d_f + f, q * d_f + g]] += weight * c * v[f] * v[g].conj();
            }
        }
    }
}

/// Uhlmann fidelity of `ρ` with `½(ρ₊⊗|α⟩⟨α| + ρ₋⊗|−α⟩⟨−α|)`.
pub fn mixture_fidelity(rho: &DensityMatrix) -> Result<MixtureFit> {
    let (d_p, cutoffs) = split_layout(rho.space())?;
    let alphas = alphas_from_q(rho, cutoffs.len())?;
    let m = rho.matrix();
    let vp = coherent_product(&alphas, &cutoffs);
    let mut sigma = Array2::zeros(m.dim());
    let degenerate = is_degenerate(&alphas);
    if degenerate {
        add_branch(&mut sigma, &conditioned(m, &vp, d_p), &vp, 1.0);
    } else {
        let neg: Vec<C64> = alphas.iter().map(|a| -a).collect();
        let vm = coherent_product(&neg, &cutoffs);
        add_branch(&mut sigma, &conditioned(m, &vp, d_p), &vp, 0.5);
        add_branch(&mut sigma, &conditioned(m, &vm, d_p), &vm, 0.5);
    }
    let sigma = DensityMatrix::new(rho.space().clone(), sigma)?;
    Ok(MixtureFit { alphas, fidelity: rho.fidelity(&sigma)?, degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::single_particle;

    fn coherent_rho(cutoff: usize, a: C64) -> DensityMatrix {
        StateVector::coherent(cutoff, a).unwrap().to_density()
    }

    fn cat_mixture(cutoff: usize, a: C64) -> DensityMatrix {
        let p = coherent_rho(cutoff, a);
        let m = coherent_rho(cutoff, -a);
        DensityMatrix::new(p.space().clone(), (p.matrix() + m.matrix()) * C64::new(0.5, 0.0)).unwrap()
    }

    #[test]
    fn moments_of_simple_states() {
        let vac = StateVector::fock(10, 0).unwrap().to_density();
        let m = field_moments(&vac, 0).unwrap();
        assert_eq!((m.mean_field, m.mean_n, m.var_n), (ZERO, 0.0, 0.0));

        let a = C64::new(0.6, -0.8);
        let m = field_moments(&coherent_rho(40, a), 0).unwrap();
        assert!((m.mean_field - a).norm() < 1e-12);
        assert!((m.mean_n - 1.0).abs() < 1e-12 && (m.var_n - 1.0).abs() < 1e-12);

        let m = field_moments(&cat_mixture(40, C64::new(1.5, 0.0)), 0).unwrap();
        assert!(m.mean_field.norm() < 1e-12);
        assert!((m.mean_n - 2.25).abs() < 1e-10 && (m.var_n - 2.25).abs() < 1e-10);
    }

    #[test]
    fn vacuum_q_function() {
        let vac = StateVector::fock(8, 0).unwrap().to_density();
        assert!(qfunction(&vac, 0, &QGridSpec::auto(0.0)).unwrap().warning().is_some());
        let q = qfunction_auto(&vac, 0).unwrap();
        let c = q.re.len() / 2;
        assert!((q.values[[c, c]] - 1.0 / PI).abs() < 1e-14);
        assert!(q.covers_state());
        assert!((q.integral() - 1.0).abs() < 0.02);
        let peaks = q.local_maxima();
        assert_eq!(peaks.len(), 1);
        assert!(peaks[0].alpha.norm() < 1e-12);
    }

    #[test]
    fn coherent_q_peak() {
        let a = C64::new(1.23, -0.71);
        let q = qfunction_auto(&coherent_rho(30, a), 0).unwrap();
        let top = q.global_max();
        assert!((top.grid_alpha.re - a.re).abs() <= q.step && (top.grid_alpha.im - a.im).abs() <= q.step);
        assert!((top.alpha - a).norm() < 0.2 * q.step);
        assert!(q.min() >= -1e-12);
        assert!((q.integral() - 1.0).abs() < 0.02);
    }

    #[test]
    fn cat_mixture_is_bimodal() {
        let a = C64::new(1.2, 1.6);
        let q = qfunction_auto(&cat_mixture(40, a), 0).unwrap();
        let peaks = q.local_maxima();
        assert_eq!(peaks.len(), 2);
        assert!((peaks[0].alpha + peaks[1].alpha).norm() < 1e-9);
        // Ties resolve deterministically to the same point.
        assert_eq!(q.global_max(), q.global_max());
    }

    #[test]
    fn small_grid_is_flagged() {
        let q = qfunction(&coherent_rho(30, C64::new(3.0, 0.0)), 0, &QGridSpec::new(2.0, 41).unwrap()).unwrap();
        assert!(q.warning().is_some());
    }

    #[test]
    fn joint_distribution_of_product() {
        let a = C64::new(1.1, 0.0);
        let s = StateVector::product(&[&StateVector::coherent(20, a).unwrap(), &StateVector::fock(5, 0).unwrap()])
            .unwrap();
        let rho = s.to_density();
        let p = joint_photon_dist(&rho, 0, 1).unwrap();
        assert_eq!(p.dim(), (20, 5));
        assert!((p.sum() - 1.0).abs() < 1e-12);
        let amps = crate::hilbert::coherent_amplitudes(a, 20);
        let norm: f64 = amps.iter().map(|x| x.norm_sqr()).sum();
        for n in 0..20 {
            assert!((p[[n, 0]] - amps[n].norm_sqr() / norm).abs() < 1e-14);
            assert!(p.row(n).iter().skip(1).all(|v| v.abs() < 1e-14));
        }
        let q = joint_photon_dist(&rho, 1, 0).unwrap();
        assert_eq!(q.t(), p);
        assert_eq!(photon_correlation(&p), 0.0);
    }

    #[test]
    fn ground_state_particle_observables() {
        let model = Model::build(&single_particle(0.0, 3, 4)).unwrap();
        let rho = model.ground_vacuum().to_density();
        let red = reduced_particle_dm(&model, &rho).unwrap();
        assert!((red.one_body[[0, 0]].re - 1.0).abs() < 1e-14);
        assert!((red.one_body.sum() - C64::new(1.0, 0.0)).norm() < 1e-14);

        let a = 0.25;
        let xs: Vec<f64> = (0..41).map(|k| -a + 2.0 * a * k as f64 / 40.0).collect();
        let dens = position_density(&model, &rho, &xs).unwrap();
        for (x, d) in xs.iter().zip(&dens) {
            let exact = (PI * (x + a) / (2.0 * a)).sin().powi(2) / a;
            assert!((d - exact).abs() < 1e-12);
        }
        let nodes = density_nodes(&model).unwrap();
        let pts: Vec<f64> = nodes.iter().map(|n| n.0).collect();
        let total: f64 = position_density(&model, &rho, &pts).unwrap().iter().zip(&nodes).map(|(d, n)| d * n.1).sum();
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn two_particle_condensate_factorizes() {
        let mut p = single_particle(0.0, 3, 4);
        p.n_particles = 2;
        let model = Model::build(&p).unwrap();
        let rho = model.ground_vacuum().to_density();
        let xs: Vec<f64> = (0..21).map(|k| -0.25 + 0.5 * k as f64 / 20.0).collect();
        let pair = pair_density(&model, &rho, &xs).unwrap();
        let single = position_density(&model, &rho, &xs).unwrap();
        for i in 0..xs.len() {
            for j in 0..xs.len() {
                // ρ₀ is the one-particle density of the mode, i.e. single / 2.
                let expected = 2.0 * (single[i] / 2.0) * (single[j] / 2.0);
                assert!((pair[[i, j]] - expected).abs() < 1e-12);
                assert_eq!(pair[[i, j]], pair[[j, i]]);
            }
        }
        assert!((pair_density_integral(&model, &rho).unwrap() - 2.0).abs() < 1e-6);
        let one = Model::build(&single_particle(0.0, 3, 4)).unwrap();
        assert!(pair_density(&one, &one.ground_vacuum().to_density(), &xs).is_err());
    }

    fn particle_state(d: usize, k: usize) -> Vec<C64> {
        let mut v = vec![ZERO; d];
        v[k] = C64::new(1.0, 0.0);
        v
    }

    /// `(|x₊⟩|α⟩ + s|x₋⟩|β⟩)/√2` normalized, on one particle factor and one mode.
    fn two_branch(xp: &[C64], a: C64, xm: &[C64], b: C64, cutoff: usize) -> StateVector {
        let space = SpaceDescriptor::new(vec![Factor::Particles { n_modes: xp.len(), n_particles: 1 }, Factor::Fock { cutoff }])
            .unwrap();
        let va = StateVector::coherent(cutoff, a).unwrap();
        let vb = StateVector::coherent(cutoff, b).unwrap();
        let mut amps = Vec::new();
        for p in 0..xp.len() {
            for f in 0..cutoff {
                amps.push(xp[p] * va.as_slice()[f] + xm[p] * vb.as_slice()[f]);
            }
        }
        StateVector::new(space, Array1::from(amps)).unwrap().normalized()
    }

    #[test]
    fn exact_ansatz_is_recovered() {
        let a = C64::new(2f64.sqrt(), 2f64.sqrt());
        let psi = two_branch(&particle_state(3, 0), a, &particle_state(3, 2), -a, 30);
        let fit = ansatz_overlap(&psi, false).unwrap();
        assert!(fit.fidelity >= 1.0 - 1e-6, "{}", fit.fidelity);
        assert!((fit.alphas[0].norm() - 2.0).abs() < 1e-3, "{:?}", fit.alphas);
        let refined = ansatz_overlap(&psi, true).unwrap();
        assert!(refined.fidelity >= fit.fidelity);

        // Global phase leaves the fit unchanged.
        let rotated = psi.scaled(C64::from_polar(1.0, 0.7));
        assert!((ansatz_overlap(&rotated, false).unwrap().fidelity - fit.fidelity).abs() < 1e-12);
    }

    #[test]
    fn ansatz_is_equivariant_under_sign_flip() {
        let a = C64::new(1.5, 0.4);
        let xp = [C64::new(0.6, 0.0), C64::new(0.8, 0.0), ZERO];
        let xm = [ZERO, C64::new(0.6, 0.0), C64::new(0.0, 0.8)];
        let psi = two_branch(&xp, a, &xm, -a, 30);
        let fit = fit_at(psi.as_slice(), 3, &[30], &[a]);
        let flip = fit_at(psi.as_slice(), 3, &[30], &[-a]);
        assert!((fit.fidelity - flip.fidelity).abs() < 1e-12);
        assert_eq!(fit.plus, flip.minus);
        assert_eq!(fit.minus, flip.plus);
    }

    #[test]
    fn same_sign_branches_fit_badly() {
        let a = C64::new(2.0, 0.0);
        let psi = two_branch(&particle_state(2, 0), a, &particle_state(2, 1), a, 30);
        let fit = ansatz_overlap(&psi, false).unwrap();
        // Brute force: build φ from the fitted branches and overlap it with ψ.
        let vp = coherent_product(&fit.alphas, &[30]);
        let vm = coherent_product(&[-fit.alphas[0]], &[30]);
        let phi: Vec<C64> =
            (0..2).flat_map(|p| (0..30).map(move |f| (p, f))).map(|(p, f)| fit.plus[p] * vp[f] + fit.minus[p] * vm[f]).collect();
        let brute = dot(&phi, psi.as_slice()).norm_sqr() / dot(&phi, &phi).re;
        assert!((fit.fidelity - brute).abs() < 1e-12, "{} {}", fit.fidelity, brute);
        // Closed form for branches x₊ = x₋ and exact amplitudes.
        let ov = (-2.0 * a.norm_sqr()).exp();
        assert!((fit.fidelity - (1.0 + ov) / 2.0).abs() < 1e-6);
        assert!(fit.fidelity <= 0.55);
    }

    #[test]
    fn vacuum_is_degenerate() {
        let model = Model::build(&single_particle(0.0, 4, 3)).unwrap();
        let psi = model.ground_vacuum();
        let fit = ansatz_overlap(&psi, false).unwrap();
        assert!(fit.degenerate);
        assert!((fit.fidelity - 1.0).abs() < 1e-12);
        let mix = mixture_fidelity(&psi.to_density()).unwrap();
        assert!(mix.degenerate);
        assert!((mix.fidelity - 1.0).abs() < 1e-8);
    }

    #[test]
    fn exact_mixture_is_recovered() {
        let a = C64::new(0.0, 2.0);
        let p = two_branch(&particle_state(3, 0), a, &particle_state(3, 0), a, 30).to_density();
        let m = two_branch(&particle_state(3, 1), -a, &particle_state(3, 1), -a, 30).to_density();
        let rho = DensityMatrix::new(p.space().clone(), (p.matrix() + m.matrix()) * C64::new(0.5, 0.0)).unwrap();
        let fit = mixture_fidelity(&rho).unwrap();
        assert!(fit.fidelity >= 1.0 - 1e-6, "{}", fit.fidelity);
    }
}
