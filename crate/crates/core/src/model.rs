//! The multimode particle–cavity model and its Lindblad generator.
//!
//! The Hilbert space is `ParticleSector ⊗ Fock(n₁) ⊗ Fock(n₂) ⊗ …`, one Fock
//! factor per configured cavity mode, in configuration order. In the rotating
//! frame
//!
//! ```text
//! H = −Σₙ Δₙ aₙ†aₙ + Σᵢ Eᵢ cᵢ†cᵢ + Σₙᵢⱼ U₀ⁿ Aⁿᵢⱼ cᵢ†cⱼ aₙ†aₙ + Σₙᵢⱼ ηₙ Bⁿᵢⱼ cᵢ†cⱼ (aₙ† + aₙ)
//! ```
//!
//! and each mode decays through `Jₙ = √(2κₙ) aₙ`.

use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{reachable_modes, CouplingMatrices, TrapGeometry};
use crate::hilbert::{
    annihilation, embed_csr, transition_matrix, DensityMatrix, Factor, Operator, ParticleBasis, SpaceDescriptor,
    StateVector,
};
use crate::sparse::CsrMatrix;
use crate::C64;

const I: C64 = C64 { re: 0.0, im: 1.0 };

/// Couplings below this magnitude do not connect trap modes.
pub const REACHABILITY_TOL: f64 = 1e-10;

/// Default cap on the superoperator dimension `d²`.
pub const DEFAULT_MAX_SUPEROPERATOR_DIM: usize = 200_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeParams {
    /// Cavity mode index `n ≥ 1`.
    pub n: usize,
    #[serde(default = "one")]
    pub kappa: f64,
    pub delta_c: f64,
    pub u0: f64,
    pub eta: f64,
    pub fock_cutoff: usize,
}

fn one() -> f64 {
    1.0
}

/// Which trap eigenmodes span the particle basis.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrapModeSelection {
    /// Modes `0..n_modes_trap`.
    Lowest,
    /// The `n_modes_trap` lowest modes reachable from the ground state.
    #[default]
    Reachable,
    Explicit(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub modes: Vec<ModeParams>,
    pub trap: TrapGeometry,
    #[serde(default = "one_usize")]
    pub n_particles: usize,
    pub n_modes_trap: usize,
    #[serde(default = "default_omega_rec")]
    pub omega_rec: f64,
    #[serde(default)]
    pub trap_modes: TrapModeSelection,
}

fn one_usize() -> usize {
    1
}

pub fn default_omega_rec() -> f64 {
    0.125
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        self.trap.validate()?;
        if self.modes.is_empty() {
            return invalid("at least one cavity mode is required");
        }
        for (k, m) in self.modes.iter().enumerate() {
            if m.n < 1 {
                return invalid(format!("mode {k}: cavity index must be >= 1"));
            }
            if !(m.kappa > 0.0 && m.kappa.is_finite()) {
                return invalid(format!("mode {k}: kappa must be > 0"));
            }
            if !(m.eta >= 0.0 && m.eta.is_finite()) {
                return invalid(format!("mode {k}: eta must be >= 0"));
            }
            if !m.delta_c.is_finite() || !m.u0.is_finite() {
                return invalid(format!("mode {k}: delta_c and u0 must be finite"));
            }
            if m.fock_cutoff < 2 {
                return invalid(format!("mode {k}: fock_cutoff must be >= 2"));
            }
            if self.modes[..k].iter().any(|o| o.n == m.n) {
                return invalid(format!("cavity mode {} appears twice", m.n));
            }
        }
        if self.n_particles < 1 {
            return invalid("n_particles must be >= 1");
        }
        if self.n_modes_trap < 1 {
            return invalid("n_modes_trap must be >= 1");
        }
        if self.n_modes_trap < 2 && self.modes.iter().any(|m| m.eta > 0.0) {
            return invalid("n_modes_trap must be >= 2 when any mode is pumped");
        }
        if self.trap.is_box() && !(self.omega_rec > 0.0 && self.omega_rec.is_finite()) {
            return invalid("omega_rec must be > 0");
        }
        if let TrapModeSelection::Explicit(list) = &self.trap_modes {
            if list.len() != self.n_modes_trap {
                return invalid("explicit trap mode list must have n_modes_trap entries");
            }
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return invalid("explicit trap modes must be strictly ascending");
            }
        }
        Ok(())
    }

    pub fn cavity_modes(&self) -> Vec<usize> {
        self.modes.iter().map(|m| m.n).collect()
    }

    /// Resolves the trap-mode selection and computes the couplings over it.
    pub fn couplings(&self) -> Result<CouplingMatrices> {
        self.validate()?;
        let modes = self.cavity_modes();
        let m = self.n_modes_trap;
        match &self.trap_modes {
            TrapModeSelection::Lowest => CouplingMatrices::compute(&self.trap, &modes, m, self.omega_rec),
            TrapModeSelection::Explicit(list) => {
                let top = list.last().copied().unwrap_or(0) + 1;
                CouplingMatrices::compute(&self.trap, &modes, top, self.omega_rec)?.restrict(list)
            }
            TrapModeSelection::Reachable => {
                let pool = (3 * m).max(m + 16);
                let full = CouplingMatrices::compute(&self.trap, &modes, pool, self.omega_rec)?;
                let mut chosen = reachable_modes(&full, REACHABILITY_TOL, m);
                // Pad with the lowest unreachable modes; they stay decoupled.
                let mut next = 0;
                while chosen.len() < m {
                    if !chosen.contains(&next) {
                        chosen.push(next);
                    }
                    next += 1;
                }
                chosen.sort_unstable();
                full.restrict(&chosen)
            }
        }
    }
}

/// A Hamiltonian with a set of jump operators on a common space.
#[derive(Clone, Debug)]
pub struct OpenSystem {
    hamiltonian: Operator,
    jumps: Vec<Operator>,
    heff: CsrMatrix,
    jump_csr: Vec<CsrMatrix>,
    jump_norm_ops: Vec<CsrMatrix>,
}

impl OpenSystem {
    pub fn new(hamiltonian: Operator, jumps: Vec<Operator>) -> Result<Self> {
        if jumps.iter().any(|j| j.space() != hamiltonian.space()) {
            return invalid("jump operators and Hamiltonian act on different spaces");
        }
        let jump_csr: Vec<CsrMatrix> = jumps.iter().map(|j| j.csr().into_owned()).collect();
        let jump_norm_ops: Vec<CsrMatrix> = jump_csr.iter().map(|j| j.adjoint().matmul(j)).collect();
        let mut heff = hamiltonian.csr().into_owned();
        for jj in &jump_norm_ops {
            heff = heff.add_scaled(jj, C64::new(0.0, -0.5));
        }
        Ok(Self { hamiltonian, jumps, heff, jump_csr, jump_norm_ops })
    }

    pub fn space(&self) -> &SpaceDescriptor {
        self.hamiltonian.space()
    }

    pub fn dim(&self) -> usize {
        self.hamiltonian.dim()
    }

    pub fn hamiltonian(&self) -> &Operator {
        &self.hamiltonian
    }

    pub fn jumps(&self) -> &[Operator] {
        &self.jumps
    }

    /// `H − (i/2) Σ J†J`
    pub fn effective_hamiltonian(&self) -> &CsrMatrix {
        &self.heff
    }

    pub(crate) fn jump_matrices(&self) -> &[CsrMatrix] {
        &self.jump_csr
    }

    pub(crate) fn jump_norm_matrices(&self) -> &[CsrMatrix] {
        &self.jump_norm_ops
    }

    /// `L(ρ)` for an arbitrary (not necessarily Hermitian) `ρ`.
    pub fn apply(&self, rho: &Array2<C64>) -> Array2<C64> {
        general_apply(self, rho)
    }

    /// `L(ρ)` for Hermitian `ρ`, written into `out`. `scratch` must have the
    /// shape of `ρ`; all arrays in standard layout.
    pub fn apply_hermitian_into(&self, rho: ArrayView2<C64>, mut out: ArrayViewMut2<C64>, scratch: &mut Array2<C64>) {
        let d = rho.nrows();
        self.heff.mul_dense_into(rho, scratch.view_mut());
        {
            let y = scratch.as_slice().expect("standard layout");
            let o = out.as_slice_mut().expect("standard layout");
            for r in 0..d {
                for c in 0..d {
                    // −iY + (−iY)†
                    o[r * d + c] = -I * y[r * d + c] + I * y[c * d + r].conj();
                }
            }
        }
        if self.jump_csr.is_empty() {
            return;
        }
        let mut zt = Array2::zeros((d, d));
        let mut w = Array2::zeros((d, d));
        for j in &self.jump_csr {
            // JρJ† = J (Jρ)† for Hermitian ρ.
            j.mul_dense_into(rho, scratch.view_mut());
            {
                let z = scratch.as_slice().expect("standard layout");
                let t = zt.as_slice_mut().expect("standard layout");
                for r in 0..d {
                    for c in 0..d {
                        t[r * d + c] = z[c * d + r].conj();
                    }
                }
            }
            j.mul_dense_into(zt.view(), w.view_mut());
            out += &w;
        }
    }

    /// Column-major vectorized generator: `Lᵥ vec(ρ) = vec(L(ρ))`.
    pub fn vectorized(&self, max_dim: usize) -> Result<CsrMatrix> {
        let d = self.dim();
        let dd = d.saturating_mul(d);
        if dd > max_dim {
            return Err(Error::ResourceLimit(format!(
                "superoperator dimension {dd} exceeds {max_dim}; use the integration-based solver"
            )));
        }
        let id = CsrMatrix::identity(d);
        let mut l = id.kron(&self.heff).scale(-I);
        l = l.add(&self.heff.conj().kron(&id).scale(I));
        for j in &self.jump_csr {
            l = l.add(&j.conj().kron(j));
        }
        Ok(l)
    }
}

/// `−i[H,ρ] + Σ (JρJ† − ½{J†J, ρ})`.
pub fn liouvillian_apply(h: &Operator, jumps: &[Operator], rho: &DensityMatrix) -> Result<DensityMatrix> {
    if h.space() != rho.space() {
        return invalid("Hamiltonian and state act on different spaces");
    }
    let sys = OpenSystem::new(h.clone(), jumps.to_vec())?;
    DensityMatrix::new(rho.space().clone(), general_apply(&sys, rho.matrix()))
}

fn general_apply(sys: &OpenSystem, rho: &Array2<C64>) -> Array2<C64> {
    let heff = &sys.heff;
    let mut out = heff.mul_dense(rho).mapv(|v| -I * v);
    out += &heff.adjoint().right_mul_dense(rho).mapv(|v| I * v);
    for j in &sys.jump_csr {
        let rj = j.adjoint().right_mul_dense(rho);
        out += &j.mul_dense(&rj);
    }
    out
}

pub fn vectorized_liouvillian(h: &Operator, jumps: &[Operator], max_dim: usize) -> Result<CsrMatrix> {
    OpenSystem::new(h.clone(), jumps.to_vec())?.vectorized(max_dim)
}

/// Column-major `vec(ρ)`.
pub fn vec_column_major(rho: &Array2<C64>) -> Vec<C64> {
    rho.t().iter().copied().collect()
}

pub fn unvec_column_major(v: &[C64], d: usize) -> Array2<C64> {
    Array2::from_shape_fn((d, d), |(r, c)| v[c * d + r])
}

/// A fully assembled model.
#[derive(Clone, Debug)]
pub struct Model {
    pub params: ModelParams,
    /// Couplings restricted to the trap modes spanning the particle basis.
    pub coupling: CouplingMatrices,
    pub basis: ParticleBasis,
    pub system: OpenSystem,
}

impl Model {
    pub fn build(params: &ModelParams) -> Result<Self> {
        let coupling = params.couplings()?;
        Self::from_coupling(params, coupling)
    }

    pub fn from_coupling(params: &ModelParams, coupling: CouplingMatrices) -> Result<Self> {
        params.validate()?;
        let basis = ParticleBasis::new(coupling.n_modes_trap(), params.n_particles)?;
        let h = build_hamiltonian(params, &coupling, &basis)?;
        let jumps = build_jump_operators(params, &coupling)?;
        let system = OpenSystem::new(h, jumps)?;
        Ok(Self { params: params.clone(), coupling, basis, system })
    }

    pub fn space(&self) -> &SpaceDescriptor {
        self.system.space()
    }

    pub fn dim(&self) -> usize {
        self.system.dim()
    }

    pub fn n_cavity_modes(&self) -> usize {
        self.params.modes.len()
    }

    pub const PARTICLE_FACTOR: usize = 0;

    /// Factor index of the `k`-th configured cavity mode.
    pub fn mode_factor(k: usize) -> usize {
        k + 1
    }

    pub fn cutoffs(&self) -> Vec<usize> {
        self.params.modes.iter().map(|m| m.fock_cutoff).collect()
    }

    /// All particles in the lowest trap mode, every cavity mode empty.
    pub fn ground_vacuum(&self) -> StateVector {
        StateVector::basis(self.space(), 0).expect("non-empty space")
    }

    /// Embedded `aₖ` for the `k`-th configured mode.
    pub fn annihilation(&self, k: usize) -> Result<Operator> {
        let cut = self
            .params
            .modes
            .get(k)
            .ok_or_else(|| Error::InvalidArgument(format!("mode {k} out of range")))?
            .fock_cutoff;
        embed_csr(&annihilation(cut)?.csr(), Self::mode_factor(k), self.space())
    }

    /// Embedded `cᵢ†cⱼ` (positions in the particle basis).
    pub fn transition(&self, i: usize, j: usize) -> Result<Operator> {
        embed_csr(&transition_matrix(&self.basis, i, j)?, Self::PARTICLE_FACTOR, self.space())
    }

    /// The parity operator of a centered trap; see [`symmetry_operator`].
    pub fn symmetry(&self) -> Result<Operator> {
        symmetry_operator(&self.params, &self.coupling, &self.basis)
    }
}

fn space_for(params: &ModelParams, coupling: &CouplingMatrices) -> Result<SpaceDescriptor> {
    let mut factors = vec![Factor::Particles { n_modes: coupling.n_modes_trap(), n_particles: params.n_particles }];
    factors.extend(params.modes.iter().map(|m| Factor::Fock { cutoff: m.fock_cutoff }));
    SpaceDescriptor::new(factors)
}

fn check_coupling(params: &ModelParams, coupling: &CouplingMatrices) -> Result<()> {
    for m in &params.modes {
        if coupling.mode_position(m.n).is_none() {
            return invalid(format!("no coupling data for cavity mode {}", m.n));
        }
    }
    let t = coupling.n_modes_trap();
    if coupling.a.iter().chain(&coupling.b).any(|x| x.dim() != (t, t)) || coupling.energies.len() != t {
        return invalid("coupling matrices do not match the number of trap modes");
    }
    Ok(())
}

/// `Σᵢⱼ Mᵢⱼ cᵢ†cⱼ` on the particle sector.
fn one_body(basis: &ParticleBasis, m: &Array2<f64>) -> Result<CsrMatrix> {
    let n = basis.n_modes();
    let mut acc = CsrMatrix::zeros(basis.len(), basis.len());
    for i in 0..n {
        for j in 0..n {
            if m[[i, j]] != 0.0 {
                acc = acc.add_scaled(&transition_matrix(basis, i, j)?, C64::new(m[[i, j]], 0.0));
            }
        }
    }
    Ok(acc)
}

pub fn build_hamiltonian(params: &ModelParams, coupling: &CouplingMatrices, basis: &ParticleBasis) -> Result<Operator> {
    check_coupling(params, coupling)?;
    if basis.n_modes() != coupling.n_modes_trap() || basis.n_particles() != params.n_particles {
        return invalid("particle basis does not match the model");
    }
    let space = space_for(params, coupling)?;
    let cutoffs: Vec<usize> = params.modes.iter().map(|m| m.fock_cutoff).collect();
    let photon_dim: usize = cutoffs.iter().product();

    let photon_op = |k: usize, op: &CsrMatrix| -> CsrMatrix {
        let left: usize = cutoffs[..k].iter().product();
        let right: usize = cutoffs[k + 1..].iter().product();
        CsrMatrix::identity(left).kron(op).kron(&CsrMatrix::identity(right))
    };

    let energies = Array2::from_diag(&ndarray::Array1::from(coupling.energies.clone()));
    let mut h = one_body(basis, &energies)?.kron(&CsrMatrix::identity(photon_dim));
    let id_p = CsrMatrix::identity(basis.len());
    for (k, m) in params.modes.iter().enumerate() {
        let pos = coupling.mode_position(m.n).expect("checked above");
        let a = annihilation(m.fock_cutoff)?.csr().into_owned();
        let num = photon_op(k, &a.adjoint().matmul(&a));
        let quad = photon_op(k, &a.add(&a.adjoint()));
        h = h.add(&id_p.kron(&num).scale(C64::new(-m.delta_c, 0.0)));
        if m.u0 != 0.0 {
            h = h.add(&one_body(basis, &coupling.a[pos])?.kron(&num).scale(C64::new(m.u0, 0.0)));
        }
        if m.eta != 0.0 {
            h = h.add(&one_body(basis, &coupling.b[pos])?.kron(&quad).scale(C64::new(m.eta, 0.0)));
        }
    }
    Operator::from_csr(space, h)
}

pub fn build_jump_operators(params: &ModelParams, coupling: &CouplingMatrices) -> Result<Vec<Operator>> {
    let space = space_for(params, coupling)?;
    params
        .modes
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let a = annihilation(m.fock_cutoff)?.csr().scale(C64::new((2.0 * m.kappa).sqrt(), 0.0));
            embed_csr(&a, Model::mode_factor(k), &space)
        })
        .collect()
}

/// Parity operator `S` of a centered trap: `(−1)^Σᵢ i·nᵢ` on the particle
/// occupation times `(−1)^{nₐ}` for every cavity mode whose profile is odd
/// about the trap center (even `n`). `S†HS = H` holds for every mode; the
/// jump operators of the flipped modes change sign.
pub fn symmetry_operator(params: &ModelParams, coupling: &CouplingMatrices, basis: &ParticleBasis) -> Result<Operator> {
    if params.trap.center != 0.0 {
        return invalid("the parity symmetry requires a centered trap");
    }
    if coupling.trap_modes.len() != basis.n_modes() {
        return invalid("particle basis does not match the coupling data");
    }
    let space = space_for(params, coupling)?;
    let particle: Vec<f64> = (0..basis.len())
        .map(|s| {
            let odd: usize = basis.occupation(s).iter().zip(&coupling.trap_modes).map(|(n, t)| n * t).sum();
            if odd % 2 == 0 { 1.0 } else { -1.0 }
        })
        .collect();
    let cutoffs: Vec<usize> = params.modes.iter().map(|m| m.fock_cutoff).collect();
    let flipped: Vec<bool> = params.modes.iter().map(|m| m.n % 2 == 0).collect();
    let photon_dim: usize = cutoffs.iter().product();
    let mut diag = Vec::with_capacity(basis.len() * photon_dim);
    for &p in &particle {
        for idx in 0..photon_dim {
            let mut rest = idx;
            let mut sign = p;
            for k in (0..cutoffs.len()).rev() {
                let n = rest % cutoffs[k];
                rest /= cutoffs[k];
                if flipped[k] && n % 2 == 1 {
                    sign = -sign;
                }
            }
            diag.push(C64::new(sign, 0.0));
        }
    }
    Operator::from_csr(space, CsrMatrix::diagonal(&diag))
}

/// Whether the `k`-th configured mode changes sign under [`symmetry_operator`].
pub fn mode_is_flipped(params: &ModelParams, k: usize) -> bool {
    params.modes[k].n % 2 == 0
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::geometry::TrapKind;
    use crate::hilbert::{expect, tensor, StateVector};
    use proptest::prelude::*;

    pub(crate) fn single_particle(eta: f64, cutoff: usize, trap_modes: usize) -> ModelParams {
        ModelParams {
            modes: vec![ModeParams { n: 19, kappa: 1.0, delta_c: -3.0, u0: -2.0, eta, fock_cutoff: cutoff }],
            trap: TrapGeometry::centered_box(0.25).unwrap(),
            n_particles: 1,
            n_modes_trap: trap_modes,
            omega_rec: 0.125,
            trap_modes: TrapModeSelection::Reachable,
        }
    }

    fn max_abs(m: &Array2<C64>) -> f64 {
        m.iter().fold(0.0, |a, v| a.max(v.norm()))
    }

    #[test]
    fn reachable_selection_for_mode_19() {
        let c = single_particle(1.5, 4, 6).couplings().unwrap();
        assert_eq!(c.trap_modes, vec![0, 2, 4, 6, 8, 10]);
    }

    #[test]
    fn decoupled_limit_is_diagonal() {
        let mut p = single_particle(0.0, 4, 4);
        p.modes[0].u0 = 0.0;
        p.n_particles = 2;
        let m = Model::build(&p).unwrap();
        let h = m.system.hamiltonian();
        assert!(h.csr().is_diagonal());
        assert!((h.get(0, 0).re - 2.0 * 0.125).abs() < 1e-15);
    }

    /// Dense Hamiltonian assembled entry by entry from occupation vectors.
    fn naive_hamiltonian(p: &ModelParams, c: &CouplingMatrices) -> Array2<f64> {
        let basis = ParticleBasis::new(c.n_modes_trap(), p.n_particles).unwrap();
        let cut: Vec<usize> = p.modes.iter().map(|m| m.fock_cutoff).collect();
        let nph: usize = cut.iter().product();
        let d = basis.len() * nph;
        let photons = |idx: usize| {
            let mut v = vec![0; cut.len()];
            let mut r = idx;
            for k in (0..cut.len()).rev() {
                v[k] = r % cut[k];
                r /= cut[k];
            }
            v
        };
        let mut h = Array2::zeros((d, d));
        for col in 0..d {
            let (ps, fs) = (col / nph, col % nph);
            let occ = basis.occupation(ps).to_vec();
            let ns = photons(fs);
            for (k, m) in p.modes.iter().enumerate() {
                h[[col, col]] -= m.delta_c * ns[k] as f64;
            }
            for i in 0..occ.len() {
                h[[col, col]] += c.energies[i] * occ[i] as f64;
            }
            for i in 0..occ.len() {
                for j in 0..occ.len() {
                    if occ[j] == 0 {
                        continue;
                    }
                    let mut t = occ.clone();
                    let mut amp = (t[j] as f64).sqrt();
                    t[j] -= 1;
                    amp *= (t[i] as f64 + 1.0).sqrt();
                    t[i] += 1;
                    let prow = basis.index_of(&t).unwrap();
                    for (k, m) in p.modes.iter().enumerate() {
                        let pos = c.mode_position(m.n).unwrap();
                        let row = prow * nph + fs;
                        h[[row, col]] += m.u0 * c.a[pos][[i, j]] * amp * ns[k] as f64;
                        for up in [true, false] {
                            let mut nn = ns.clone();
                            let f = if up {
                                if nn[k] + 1 >= cut[k] {
                                    continue;
                                }
                                nn[k] += 1;
                                (nn[k] as f64).sqrt()
                            } else {
                                if nn[k] == 0 {
                                    continue;
                                }
                                nn[k] -= 1;
                                (ns[k] as f64).sqrt()
                            };
                            let fidx = nn.iter().zip(&cut).fold(0, |acc, (n, c)| acc * c + n);
                            h[[prow * nph + fidx, col]] += m.eta * c.b[pos][[i, j]] * amp * f;
                        }
                    }
                }
            }
        }
        h
    }

    #[test]
    fn hamiltonian_matches_naive_assembly() {
        let p = single_particle(1.5, 5, 6);
        let m = Model::build(&p).unwrap();
        let naive = naive_hamiltonian(&p, &m.coupling);
        let h = m.system.hamiltonian().to_dense();
        let diff = h.iter().zip(naive.iter()).fold(0.0f64, |a, (x, y)| a.max((x - C64::new(*y, 0.0)).norm()));
        assert!(diff < 1e-14, "{diff}");
        // The pump couples ground⊗vacuum to |j, 1⟩ with amplitude ηB₀ⱼ.
        for j in 0..6 {
            let row = j * 5 + 1;
            assert!((h[[row, 0]].re - 1.5 * m.coupling.b[0][[j, 0]]).abs() < 1e-15);
        }

        let mut two = p.clone();
        two.n_particles = 2;
        two.n_modes_trap = 4;
        two.modes.push(ModeParams { n: 11, kappa: 0.7, delta_c: -4.0, u0: -1.0, eta: 2.0, fock_cutoff: 3 });
        let m = Model::build(&two).unwrap();
        let naive = naive_hamiltonian(&two, &m.coupling);
        let h = m.system.hamiltonian().to_dense();
        let diff = h.iter().zip(naive.iter()).fold(0.0f64, |a, (x, y)| a.max((x - C64::new(*y, 0.0)).norm()));
        assert!(diff < 1e-14, "{diff}");
    }

    fn two_mode_model(x0: f64, n_particles: usize) -> Model {
        let p = ModelParams {
            modes: vec![
                ModeParams { n: 11, kappa: 1.0, delta_c: -4.0, u0: -1.0, eta: 2.0, fock_cutoff: 4 },
                ModeParams { n: 8, kappa: 0.5, delta_c: -3.0, u0: -0.5, eta: 1.0, fock_cutoff: 3 },
            ],
            trap: TrapGeometry::new(TrapKind::Box { half_width: 0.25 }, x0).unwrap(),
            n_particles,
            n_modes_trap: 4,
            omega_rec: 0.125,
            trap_modes: TrapModeSelection::Lowest,
        };
        Model::build(&p).unwrap()
    }

    #[test]
    fn structural_invariants() {
        let m = two_mode_model(0.1, 2);
        let h = m.system.hamiltonian();
        assert!(h.hermiticity_error() <= 1e-12);
        let mut total = m.transition(0, 0).unwrap();
        for i in 1..4 {
            total = total.add(&m.transition(i, i).unwrap()).unwrap();
        }
        assert!(h.commutator(&total).unwrap().max_abs() <= 1e-12);

        // Photon-number differences between the modes change only by the
        // pump, one photon in one mode at a time.
        let cut = m.cutoffs();
        let nph: usize = cut.iter().product();
        for (r, c, _) in h.csr().iter() {
            let (fr, fc) = (r % nph, c % nph);
            let (a1, a2) = (fr / cut[1], fr % cut[1]);
            let (b1, b2) = (fc / cut[1], fc % cut[1]);
            let d1 = a1 as i64 - b1 as i64;
            let d2 = a2 as i64 - b2 as i64;
            assert!(d1.abs() + d2.abs() <= 1, "cross-mode term at ({r},{c})");
        }
    }

    #[test]
    fn jump_operators() {
        let m = two_mode_model(0.0, 1);
        let j = &m.system.jumps()[0];
        let n = m.annihilation(0).unwrap();
        let n = n.adjoint().mul(&n).unwrap();
        assert!(j.adjoint().mul(j).unwrap().max_abs_diff(&n.scale(C64::new(2.0, 0.0))).unwrap() < 1e-14);
        let ip = Operator::identity(&SpaceDescriptor::particles(4, 1).unwrap());
        let i1 = Operator::identity(&SpaceDescriptor::fock(4).unwrap());
        let a2 = annihilation(3).unwrap().scale(C64::new(1.0, 0.0));
        let expected = tensor(&[&ip, &i1, &a2]).unwrap();
        assert!(m.system.jumps()[1].max_abs_diff(&expected).unwrap() < 1e-15);
    }

    #[test]
    fn symmetry_of_centered_trap() {
        let m = two_mode_model(0.0, 2);
        let s = m.symmetry().unwrap();
        let h = m.system.hamiltonian();
        let shs = s.adjoint().mul(h).unwrap().mul(&s).unwrap();
        assert!(shs.max_abs_diff(h).unwrap() <= 1e-12);
        for (k, j) in m.system.jumps().iter().enumerate() {
            let sjs = s.adjoint().mul(j).unwrap().mul(&s).unwrap();
            let sign = if mode_is_flipped(&m.params, k) { -1.0 } else { 1.0 };
            assert!(sjs.max_abs_diff(&j.scale(C64::new(sign, 0.0))).unwrap() <= 1e-12);
        }
        assert!(two_mode_model(0.1, 1).symmetry().is_err());
    }

    fn damped_cavity(cutoff: usize) -> OpenSystem {
        let space = SpaceDescriptor::fock(cutoff).unwrap();
        let h = Operator::from_csr(space, CsrMatrix::zeros(cutoff, cutoff)).unwrap();
        let j = annihilation(cutoff).unwrap().scale(C64::new(2f64.sqrt(), 0.0));
        OpenSystem::new(h, vec![j]).unwrap()
    }

    #[test]
    fn damped_cavity_photon_derivative() {
        let sys = damped_cavity(30);
        let rho = StateVector::coherent(30, C64::new(1.0, 0.0)).unwrap().to_density();
        let d = liouvillian_apply(sys.hamiltonian(), sys.jumps(), &rho).unwrap();
        let dn = expect(&crate::hilbert::number(30).unwrap(), &d).unwrap();
        assert!((dn.re + 2.0 * expect(&crate::hilbert::number(30).unwrap(), &rho).unwrap().re).abs() < 1e-12);
        assert!((dn.re + 2.0).abs() < 1e-10);
    }

    #[test]
    fn dark_state_has_zero_derivative() {
        let m = Model::build(&single_particle(0.0, 4, 4)).unwrap();
        let rho = m.ground_vacuum().to_density();
        let d = liouvillian_apply(m.system.hamiltonian(), m.system.jumps(), &rho).unwrap();
        assert!(max_abs(d.matrix()) <= 1e-12);
    }

    fn random_hermitian(d: usize, seed: &[f64]) -> Array2<C64> {
        let mut m = Array2::from_shape_fn((d, d), |(i, j)| {
            C64::new(seed[(i * d + j) % seed.len()], seed[(j * d + i + 7) % seed.len()])
        });
        let t = m.t().mapv(|v| v.conj());
        m = (&m + &t).mapv(|v| v * 0.5);
        m
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        #[test]
        fn generator_consistency(seed in proptest::collection::vec(-1.0..1.0f64, 64)) {
            let m = two_mode_model(0.05, 1);
            let d = m.dim();
            let rho = random_hermitian(d, &seed);
            let general = general_apply(&m.system, &rho);
            let mut fast = Array2::zeros((d, d));
            let mut scratch = Array2::zeros((d, d));
            m.system.apply_hermitian_into(rho.view(), fast.view_mut(), &mut scratch);
            prop_assert!(max_abs(&(&general - &fast)) <= 1e-12);
            prop_assert!(general.diag().sum().norm() <= 1e-12);
            let herm = &general - &general.t().mapv(|v| v.conj());
            prop_assert!(max_abs(&herm) <= 1e-12);

            let lv = m.system.vectorized(DEFAULT_MAX_SUPEROPERATOR_DIM).unwrap();
            let via = unvec_column_major(&lv.apply(&vec_column_major(&rho)), d);
            prop_assert!(max_abs(&(&via - &general)) <= 1e-12);
        }
    }

    #[test]
    fn vectorized_spectrum_small() {
        let p = ModelParams {
            modes: vec![ModeParams { n: 19, kappa: 1.0, delta_c: -3.0, u0: -2.0, eta: 1.5, fock_cutoff: 4 }],
            trap: TrapGeometry::centered_box(0.25).unwrap(),
            n_particles: 1,
            n_modes_trap: 2,
            omega_rec: 0.125,
            trap_modes: TrapModeSelection::Reachable,
        };
        let m = Model::build(&p).unwrap();
        assert_eq!(m.dim(), 8);
        let lv = m.system.vectorized(DEFAULT_MAX_SUPEROPERATOR_DIM).unwrap();
        let ev = crate::linalg::eigenvalues(&lv.to_dense()).unwrap();
        let smallest = ev.iter().map(|v| v.norm()).fold(f64::INFINITY, f64::min);
        assert!(smallest < 1e-10, "{smallest}");
        assert!(ev.iter().all(|v| v.re <= 1e-10));
        assert!(matches!(m.system.vectorized(10), Err(Error::ResourceLimit(_))));
    }
}
