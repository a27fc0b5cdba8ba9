//! Truncated Hilbert spaces and the operator/state algebra on them.
//!
//! A [`SpaceDescriptor`] is an ordered list of factors: photon Fock spaces
//! (states `0..cutoff`) and fixed-number bosonic particle sectors. Composite
//! basis indices are row-major over the factors, so the last factor varies
//! fastest.
//!
//! Particle-sector basis states are occupation vectors `(n_0, …, n_{m-1})`
//! with `Σ n_i = N`, enumerated in lexicographically descending order. Index
//! 0 is therefore always the state with every particle in trap mode 0.

use std::borrow::Cow;
use std::collections::HashMap;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::sparse::CsrMatrix;
use crate::C64;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const ONE: C64 = C64 { re: 1.0, im: 0.0 };

/// Largest total dimension we are willing to enumerate.
pub const MAX_TOTAL_DIM: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Factor {
    Fock { cutoff: usize },
    Particles { n_modes: usize, n_particles: usize },
}

impl Factor {
    pub fn dim(&self) -> usize {
        match *self {
            Factor::Fock { cutoff } => cutoff,
            Factor::Particles { n_modes, n_particles } => {
                binomial(n_particles + n_modes - 1, n_particles)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Factor::Fock { cutoff } if cutoff < 1 => invalid("Fock cutoff must be >= 1"),
            Factor::Particles { n_modes, .. } if n_modes < 1 => {
                invalid("particle sector needs at least one mode")
            }
            Factor::Particles { n_particles, .. } if n_particles < 1 => {
                invalid("particle sector needs at least one particle")
            }
            _ => Ok(()),
        }
    }
}

/// Saturating binomial coefficient.
pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > usize::MAX as u128 {
            return usize::MAX;
        }
    }
    acc as usize
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpaceDescriptor {
    factors: Vec<Factor>,
}

impl SpaceDescriptor {
    pub fn new(factors: Vec<Factor>) -> Result<Self> {
        if factors.is_empty() {
            return invalid("a space needs at least one factor");
        }
        let mut total: usize = 1;
        for f in &factors {
            f.validate()?;
            total = total.saturating_mul(f.dim());
        }
        if total > MAX_TOTAL_DIM {
            return Err(Error::ResourceLimit(format!(
                "total dimension {total} exceeds the limit {MAX_TOTAL_DIM}"
            )));
        }
        Ok(Self { factors })
    }

    pub fn fock(cutoff: usize) -> Result<Self> {
        Self::new(vec![Factor::Fock { cutoff }])
    }

    pub fn particles(n_modes: usize, n_particles: usize) -> Result<Self> {
        Self::new(vec![Factor::Particles { n_modes, n_particles }])
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn n_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.factors.iter().map(Factor::dim).collect()
    }

    pub fn total_dim(&self) -> usize {
        self.factors.iter().map(Factor::dim).product()
    }

    /// Descriptor of the listed factors, in their original order.
    pub fn subspace(&self, keep: &[usize]) -> Result<Self> {
        let keep = sorted_unique(keep, self.n_factors())?;
        Self::new(keep.iter().map(|&k| self.factors[k]).collect())
    }

    /// Concatenation `self ⊗ other`.
    pub fn product(&self, other: &Self) -> Result<Self> {
        Self::new(self.factors.iter().chain(&other.factors).copied().collect())
    }
}

fn sorted_unique(keep: &[usize], n: usize) -> Result<Vec<usize>> {
    if keep.is_empty() {
        return invalid("the set of kept factors is empty");
    }
    let mut k = keep.to_vec();
    k.sort_unstable();
    k.dedup();
    if k.last().is_some_and(|&x| x >= n) {
        return invalid(format!("factor index out of range (space has {n} factors)"));
    }
    Ok(k)
}

/// Enumerated occupation basis of a fixed-number bosonic sector.
#[derive(Clone, Debug)]
pub struct ParticleBasis {
    n_modes: usize,
    n_particles: usize,
    states: Vec<Vec<usize>>,
    lookup: HashMap<Vec<usize>, usize>,
}

impl ParticleBasis {
    pub fn new(n_modes: usize, n_particles: usize) -> Result<Self> {
        Factor::Particles { n_modes, n_particles }.validate()?;
        let dim = binomial(n_particles + n_modes - 1, n_particles);
        if dim > MAX_TOTAL_DIM {
            return Err(Error::ResourceLimit(format!("particle sector of dimension {dim}")));
        }
        let mut states = Vec::with_capacity(dim);
        let mut current = vec![0; n_modes];
        fill_descending(&mut current, 0, n_particles, &mut states);
        let lookup = states.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        Ok(Self { n_modes, n_particles, states, lookup })
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn occupation(&self, index: usize) -> &[usize] {
        &self.states[index]
    }

    pub fn index_of(&self, occupation: &[usize]) -> Option<usize> {
        self.lookup.get(occupation).copied()
    }

    pub fn factor(&self) -> Factor {
        Factor::Particles { n_modes: self.n_modes, n_particles: self.n_particles }
    }
}

fn fill_descending(current: &mut [usize], pos: usize, left: usize, out: &mut Vec<Vec<usize>>) {
    if pos + 1 == current.len() {
        current[pos] = left;
        out.push(current.to_vec());
        return;
    }
    for k in (0..=left).rev() {
        current[pos] = k;
        fill_descending(current, pos + 1, left - k, out);
    }
    current[pos] = 0;
}

/// Storage selection for new operators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoragePolicy {
    pub dense_max_dim: usize,
}

impl Default for StoragePolicy {
    fn default() -> Self {
        Self { dense_max_dim: 1024 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Storage {
    Dense(Array2<C64>),
    Sparse(CsrMatrix),
}

/// A linear operator on a [`SpaceDescriptor`].
#[derive(Clone, Debug, PartialEq)]
pub struct Operator {
    space: SpaceDescriptor,
    storage: Storage,
}

impl Operator {
    pub fn from_csr(space: SpaceDescriptor, m: CsrMatrix) -> Result<Self> {
        Self::from_csr_with(space, m, StoragePolicy::default())
    }

    pub fn from_csr_with(space: SpaceDescriptor, m: CsrMatrix, policy: StoragePolicy) -> Result<Self> {
        let d = space.total_dim();
        if m.nrows() != d || m.ncols() != d {
            return invalid(format!(
                "matrix is {}x{} but the space has dimension {d}",
                m.nrows(),
                m.ncols()
            ));
        }
        let storage = if d <= policy.dense_max_dim {
            Storage::Dense(m.to_dense())
        } else {
            Storage::Sparse(m)
        };
        Ok(Self { space, storage })
    }

    pub fn from_dense(space: SpaceDescriptor, m: Array2<C64>) -> Result<Self> {
        let d = space.total_dim();
        if m.dim() != (d, d) {
            return invalid(format!("matrix is {:?} but the space has dimension {d}", m.dim()));
        }
        Ok(Self { space, storage: Storage::Dense(m) })
    }

    pub fn identity(space: &SpaceDescriptor) -> Self {
        let d = space.total_dim();
        Self::from_csr(space.clone(), CsrMatrix::identity(d)).expect("identity has matching dimension")
    }

    pub fn space(&self) -> &SpaceDescriptor {
        &self.space
    }

    pub fn dim(&self) -> usize {
        self.space.total_dim()
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self.storage, Storage::Sparse(_))
    }

    pub fn csr(&self) -> Cow<'_, CsrMatrix> {
        match &self.storage {
            Storage::Sparse(m) => Cow::Borrowed(m),
            Storage::Dense(m) => Cow::Owned(CsrMatrix::from_dense(m)),
        }
    }

    pub fn to_dense(&self) -> Array2<C64> {
        match &self.storage {
            Storage::Dense(m) => m.clone(),
            Storage::Sparse(m) => m.to_dense(),
        }
    }

    pub fn into_sparse(self) -> Self {
        let m = self.csr().into_owned();
        Self { space: self.space, storage: Storage::Sparse(m) }
    }

    pub fn into_dense(self) -> Self {
        let m = self.to_dense();
        Self { space: self.space, storage: Storage::Dense(m) }
    }

    fn rebuild(&self, m: CsrMatrix) -> Self {
        let storage = match self.storage {
            Storage::Dense(_) => Storage::Dense(m.to_dense()),
            Storage::Sparse(_) => Storage::Sparse(m),
        };
        Self { space: self.space.clone(), storage }
    }

    fn check_space(&self, other: &Self) -> Result<()> {
        if self.space != other.space {
            return invalid("operators act on different spaces");
        }
        Ok(())
    }

    pub fn get(&self, r: usize, c: usize) -> C64 {
        match &self.storage {
            Storage::Dense(m) => m[[r, c]],
            Storage::Sparse(m) => m.get(r, c),
        }
    }

    pub fn adjoint(&self) -> Self {
        self.rebuild(self.csr().adjoint())
    }

    pub fn scale(&self, s: impl Into<C64>) -> Self {
        self.rebuild(self.csr().scale(s.into()))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_space(other)?;
        Ok(self.rebuild(self.csr().add(&other.csr())))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_space(other)?;
        Ok(self.rebuild(self.csr().add_scaled(&other.csr(), -ONE)))
    }

    /// Operator product `self · other`.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.check_space(other)?;
        Ok(self.rebuild(self.csr().matmul(&other.csr())))
    }

    pub fn commutator(&self, other: &Self) -> Result<Self> {
        self.mul(other)?.sub(&other.mul(self)?)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_space(other)?;
        Ok(self.csr().max_abs_diff(&other.csr()))
    }

    pub fn max_abs(&self) -> f64 {
        self.csr().max_abs()
    }

    /// `max |A − A†|`
    pub fn hermiticity_error(&self) -> f64 {
        self.csr().hermiticity_error()
    }

    pub fn apply(&self, x: &[C64]) -> Vec<C64> {
        self.csr().apply(x)
    }
}

/// Truncated annihilation operator on a single Fock space.
pub fn annihilation(cutoff: usize) -> Result<Operator> {
    let space = SpaceDescriptor::fock(cutoff)?;
    let m = CsrMatrix::from_triplets(
        cutoff,
        cutoff,
        (1..cutoff).map(|n| (n - 1, n, C64::new((n as f64).sqrt(), 0.0))),
    );
    Operator::from_csr(space, m)
}

pub fn number(cutoff: usize) -> Result<Operator> {
    let space = SpaceDescriptor::fock(cutoff)?;
    let m = CsrMatrix::diagonal(&(0..cutoff).map(|n| C64::new(n as f64, 0.0)).collect::<Vec<_>>());
    Operator::from_csr(space, m)
}

/// Sparse matrix of `c_i† c_j` on a particle sector.
pub fn transition_matrix(basis: &ParticleBasis, i: usize, j: usize) -> Result<CsrMatrix> {
    let m = basis.n_modes();
    if i >= m || j >= m {
        return invalid(format!("mode index ({i}, {j}) out of range for {m} modes"));
    }
    let mut trip = Vec::with_capacity(basis.len());
    for (col, occ) in basis.states.iter().enumerate() {
        if occ[j] == 0 {
            continue;
        }
        if i == j {
            trip.push((col, col, C64::new(occ[j] as f64, 0.0)));
            continue;
        }
        let mut target = occ.clone();
        let mut amp = (target[j] as f64).sqrt();
        target[j] -= 1;
        amp *= (target[i] as f64 + 1.0).sqrt();
        target[i] += 1;
        let row = basis.index_of(&target).expect("target occupation lies in the sector");
        trip.push((row, col, C64::new(amp, 0.0)));
    }
    Ok(CsrMatrix::from_triplets(basis.len(), basis.len(), trip))
}

/// `c_i† c_j` as an operator on the particle sector.
pub fn transition(basis: &ParticleBasis, i: usize, j: usize) -> Result<Operator> {
    let space = SpaceDescriptor::new(vec![basis.factor()])?;
    Operator::from_csr(space, transition_matrix(basis, i, j)?)
}

/// Kronecker product of the operators in factor order.
pub fn tensor(ops: &[&Operator]) -> Result<Operator> {
    if ops.is_empty() {
        return invalid("tensor of an empty operator list");
    }
    let mut factors = Vec::new();
    for op in ops {
        factors.extend_from_slice(op.space().factors());
    }
    let space = SpaceDescriptor::new(factors)?;
    let mut acc = ops[0].csr().into_owned();
    for op in &ops[1..] {
        acc = acc.kron(&op.csr());
    }
    Operator::from_csr(space, acc)
}

/// Embeds an operator acting on factor `position` of `space` (identity on the
/// others).
pub fn embed(op: &Operator, position: usize, space: &SpaceDescriptor) -> Result<Operator> {
    embed_csr(&op.csr(), position, space)
}

pub(crate) fn embed_csr(op: &CsrMatrix, position: usize, space: &SpaceDescriptor) -> Result<Operator> {
    let dims = space.dims();
    if position >= dims.len() {
        return invalid(format!("factor {position} out of range"));
    }
    if op.nrows() != dims[position] {
        return invalid(format!(
            "operator dimension {} does not match factor {position} of dimension {}",
            op.nrows(),
            dims[position]
        ));
    }
    let left: usize = dims[..position].iter().product();
    let right: usize = dims[position + 1..].iter().product();
    let m = CsrMatrix::identity(left).kron(op).kron(&CsrMatrix::identity(right));
    Operator::from_csr(space.clone(), m)
}

/// Truncated coherent-state amplitudes `e^{-|α|²/2} α^n / √n!`, `n < cutoff`.
/// They are the exact projection of `|α⟩`, so their norm is slightly below 1.
pub fn coherent_amplitudes(alpha: C64, cutoff: usize) -> Vec<C64> {
    let mut out = Vec::with_capacity(cutoff);
    let mut c = C64::new((-alpha.norm_sqr() / 2.0).exp(), 0.0);
    for n in 0..cutoff {
        if n > 0 {
            c = c * alpha / (n as f64).sqrt();
        }
        out.push(c);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    space: SpaceDescriptor,
    amplitudes: Array1<C64>,
}

impl StateVector {
    pub fn new(space: SpaceDescriptor, amplitudes: Array1<C64>) -> Result<Self> {
        if amplitudes.len() != space.total_dim() {
            return invalid(format!(
                "{} amplitudes for a space of dimension {}",
                amplitudes.len(),
                space.total_dim()
            ));
        }
        Ok(Self { space, amplitudes })
    }

    pub fn basis(space: &SpaceDescriptor, index: usize) -> Result<Self> {
        let d = space.total_dim();
        if index >= d {
            return invalid(format!("basis index {index} out of range {d}"));
        }
        let mut a = Array1::zeros(d);
        a[index] = ONE;
        Self::new(space.clone(), a)
    }

    pub fn fock(cutoff: usize, n: usize) -> Result<Self> {
        Self::basis(&SpaceDescriptor::fock(cutoff)?, n)
    }

    /// Normalized truncated coherent state.
    pub fn coherent(cutoff: usize, alpha: C64) -> Result<Self> {
        let a = Array1::from(coherent_amplitudes(alpha, cutoff));
        Ok(Self::new(SpaceDescriptor::fock(cutoff)?, a)?.normalized())
    }

    pub fn product(states: &[&StateVector]) -> Result<Self> {
        if states.is_empty() {
            return invalid("product of no states");
        }
        let mut factors = Vec::new();
        let mut amps = vec![ONE];
        for s in states {
            factors.extend_from_slice(s.space.factors());
            let mut next = Vec::with_capacity(amps.len() * s.amplitudes.len());
            for &a in &amps {
                next.extend(s.amplitudes.iter().map(|&b| a * b));
            }
            amps = next;
        }
        Self::new(SpaceDescriptor::new(factors)?, Array1::from(amps))
    }

    pub fn space(&self) -> &SpaceDescriptor {
        &self.space
    }

    pub fn amplitudes(&self) -> &Array1<C64> {
        &self.amplitudes
    }

    pub fn as_slice(&self) -> &[C64] {
        self.amplitudes.as_slice().expect("contiguous amplitudes")
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn normalized(mut self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            self.amplitudes.mapv_inplace(|a| a / n);
        }
        self
    }

    /// `⟨self|other⟩`
    pub fn inner(&self, other: &Self) -> Result<C64> {
        if self.space != other.space {
            return invalid("states live in different spaces");
        }
        Ok(self.amplitudes.iter().zip(other.amplitudes.iter()).map(|(a, b)| a.conj() * b).sum())
    }

    pub fn to_density(&self) -> DensityMatrix {
        let a = &self.amplitudes;
        let d = a.len();
        let m = Array2::from_shape_fn((d, d), |(i, j)| a[i] * a[j].conj());
        DensityMatrix { space: self.space.clone(), matrix: m }
    }

    pub fn scaled(&self, s: C64) -> Self {
        Self { space: self.space.clone(), amplitudes: self.amplitudes.mapv(|a| a * s) }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.space != other.space {
            return invalid("states live in different spaces");
        }
        Ok(Self { space: self.space.clone(), amplitudes: &self.amplitudes + &other.amplitudes })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    space: SpaceDescriptor,
    matrix: Array2<C64>,
}

impl DensityMatrix {
    pub fn new(space: SpaceDescriptor, matrix: Array2<C64>) -> Result<Self> {
        let d = space.total_dim();
        if matrix.dim() != (d, d) {
            return invalid(format!("density matrix {:?} for a space of dimension {d}", matrix.dim()));
        }
        Ok(Self { space, matrix: matrix.as_standard_layout().into_owned() })
    }

    pub fn product(parts: &[&DensityMatrix]) -> Result<Self> {
        if parts.is_empty() {
            return invalid("product of no density matrices");
        }
        let mut factors = Vec::new();
        let mut acc = CsrMatrix::identity(1);
        for p in parts {
            factors.extend_from_slice(p.space.factors());
            acc = acc.kron(&CsrMatrix::from_dense(&p.matrix));
        }
        Self::new(SpaceDescriptor::new(factors)?, acc.to_dense())
    }

    pub fn space(&self) -> &SpaceDescriptor {
        &self.space
    }

    pub fn matrix(&self) -> &Array2<C64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> Array2<C64> {
        self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> C64 {
        self.matrix.diag().sum()
    }

    pub fn hermiticity_error(&self) -> f64 {
        let d = self.dim();
        let mut worst: f64 = 0.0;
        for i in 0..d {
            for j in i..d {
                worst = worst.max((self.matrix[[i, j]] - self.matrix[[j, i]].conj()).norm());
            }
        }
        worst
    }

    /// `ρ ← (ρ + ρ†)/2`
    pub fn hermitize(&mut self) {
        let d = self.dim();
        for i in 0..d {
            for j in i..d {
                let v = (self.matrix[[i, j]] + self.matrix[[j, i]].conj()) * 0.5;
                self.matrix[[i, j]] = v;
                self.matrix[[j, i]] = v.conj();
            }
        }
    }

    pub fn normalize_trace(&mut self) {
        let t = self.trace();
        if t.norm() > 0.0 {
            self.matrix.mapv_inplace(|v| v / t);
        }
    }

    /// Hermitian to 1e-10 and unit trace to 1e-8.
    pub fn is_physical(&self) -> bool {
        self.hermiticity_error() <= 1e-10 && (self.trace() - ONE).norm() <= 1e-8
    }

    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        linalg::hermitian_eigenvalues(&self.matrix)
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        Ok(self.eigenvalues()?.into_iter().fold(f64::INFINITY, f64::min))
    }

    /// `½ ‖ρ − σ‖₁`
    pub fn trace_distance(&self, other: &Self) -> Result<f64> {
        if self.space != other.space {
            return invalid("density matrices live in different spaces");
        }
        let diff = &self.matrix - &other.matrix;
        let vals = linalg::hermitian_eigenvalues(&diff)?;
        Ok(0.5 * vals.iter().map(|v| v.abs()).sum::<f64>())
    }

    /// Uhlmann fidelity `(tr √(√ρ σ √ρ))²`.
    pub fn fidelity(&self, other: &Self) -> Result<f64> {
        if self.space != other.space {
            return invalid("density matrices live in different spaces");
        }
        let s = linalg::psd_sqrt(&self.matrix)?;
        let inner = s.dot(&other.matrix).dot(&s);
        let vals = linalg::hermitian_eigenvalues(&inner)?;
        let root: f64 = vals.iter().map(|v| v.max(0.0).sqrt()).sum();
        Ok((root * root).min(1.0))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.matrix
            .iter()
            .zip(other.matrix.iter())
            .fold(0.0, |m, (a, b)| m.max((a - b).norm()))
    }
}

impl From<StateVector> for DensityMatrix {
    fn from(s: StateVector) -> Self {
        s.to_density()
    }
}

/// Traces out every factor not listed in `keep`.
pub fn partial_trace(rho: &DensityMatrix, keep: &[usize]) -> Result<DensityMatrix> {
    let dims = rho.space.dims();
    let keep = sorted_unique(keep, dims.len())?;
    let traced: Vec<usize> = (0..dims.len()).filter(|k| !keep.contains(k)).collect();
    let kept_dims: Vec<usize> = keep.iter().map(|&k| dims[k]).collect();
    let traced_dims: Vec<usize> = traced.iter().map(|&k| dims[k]).collect();
    let dk: usize = kept_dims.iter().product();
    let dt: usize = traced_dims.iter().product();

    // Strides of each factor in the composite index.
    let mut strides = vec![1; dims.len()];
    for k in (0..dims.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * dims[k + 1];
    }
    let offsets = |sub_dims: &[usize], which: &[usize]| -> Vec<usize> {
        let total: usize = sub_dims.iter().product();
        (0..total)
            .map(|mut idx| {
                let mut off = 0;
                for (pos, &f) in which.iter().enumerate().rev() {
                    off += (idx % sub_dims[pos]) * strides[f];
                    idx /= sub_dims[pos];
                }
                off
            })
            .collect()
    };
    let kept_off = offsets(&kept_dims, &keep);
    let traced_off = offsets(&traced_dims, &traced);

    let mut out = Array2::zeros((dk, dk));
    for (a, &ka) in kept_off.iter().enumerate() {
        for (b, &kb) in kept_off.iter().enumerate() {
            let mut acc = ZERO;
            for &t in traced_off.iter().take(dt) {
                acc += rho.matrix[[ka + t, kb + t]];
            }
            out[[a, b]] = acc;
        }
    }
    DensityMatrix::new(rho.space.subspace(&keep)?, out)
}

#[derive(Clone, Copy, Debug)]
pub enum StateRef<'a> {
    Pure(&'a StateVector),
    Mixed(&'a DensityMatrix),
}

impl<'a> From<&'a StateVector> for StateRef<'a> {
    fn from(s: &'a StateVector) -> Self {
        StateRef::Pure(s)
    }
}

impl<'a> From<&'a DensityMatrix> for StateRef<'a> {
    fn from(s: &'a DensityMatrix) -> Self {
        StateRef::Mixed(s)
    }
}

/// `⟨ψ|A|ψ⟩` or `tr(A ρ)`.
pub fn expect<'a>(op: &Operator, state: impl Into<StateRef<'a>>) -> Result<C64> {
    match state.into() {
        StateRef::Pure(psi) => {
            if op.space() != psi.space() {
                return invalid("operator and state live in different spaces");
            }
            let a = psi.as_slice();
            let y = op.apply(a);
            Ok(a.iter().zip(&y).map(|(x, y)| x.conj() * y).sum())
        }
        StateRef::Mixed(rho) => {
            if op.space() != rho.space() {
                return invalid("operator and state live in different spaces");
            }
            Ok(trace_product(&op.csr(), rho.matrix()))
        }
    }
}

/// `tr(A ρ)` for sparse `A`.
pub(crate) fn trace_product(a: &CsrMatrix, rho: &Array2<C64>) -> C64 {
    a.iter().map(|(r, c, v)| v * rho[[c, r]]).sum()
}
