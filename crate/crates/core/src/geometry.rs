//! Trap eigenfunctions, cavity mode functions and the coupling matrices
//!
//! ```text
//! Aⁿᵢⱼ = ∫ Ψᵢ Ψⱼ sin²(kₙ(x+L)) dx,   Bⁿᵢⱼ = ∫ Ψᵢ Ψⱼ sin(kₙ(x+L)) dx
//! ```
//!
//! Lengths are in units of the cavity half-length `L = 1`, rates in units of
//! `κ`. Trap modes are indexed from 0 (ground state).

use std::collections::{BTreeSet, VecDeque};
use std::f64::consts::PI;
use std::sync::OnceLock;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const CAVITY_HALF_LENGTH: f64 = 1.0;

/// Entries smaller than this are stored as exact zeros.
pub const ZERO_CLIP: f64 = 1e-12;

/// Absolute accuracy target of the coupling quadrature.
pub const QUADRATURE_TOL: f64 = 1e-10;

const GL_ORDER: usize = 16;
const MAX_REFINEMENTS: u32 = 6;
/// Largest `ω·h` (local angular frequency times panel width) per panel.
const MAX_PHASE_PER_PANEL: f64 = 8.0;
/// Padding of the harmonic support beyond the outermost turning point, in
/// oscillator lengths.
const HARMONIC_PADDING: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrapKind {
    Box { half_width: f64 },
    /// `length` is the oscillator length `√(ħ/μω_t)`, in units of `L`.
    Harmonic { omega: f64, length: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrapGeometry {
    #[serde(flatten)]
    pub kind: TrapKind,
    #[serde(default)]
    pub center: f64,
}

impl TrapGeometry {
    pub fn new(kind: TrapKind, center: f64) -> Result<Self> {
        let t = Self { kind, center };
        t.validate()?;
        Ok(t)
    }

    pub fn centered_box(half_width: f64) -> Result<Self> {
        Self::new(TrapKind::Box { half_width }, 0.0)
    }

    pub fn harmonic(omega: f64, length: f64, center: f64) -> Result<Self> {
        Self::new(TrapKind::Harmonic { omega, length }, center)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.center.is_finite() {
            return invalid("trap center must be finite");
        }
        match self.kind {
            TrapKind::Box { half_width: a } => {
                if !(a > 0.0 && a <= CAVITY_HALF_LENGTH) {
                    return invalid(format!("box half-width {a} outside (0, L]"));
                }
                if self.center.abs() + a > CAVITY_HALF_LENGTH + 1e-12 {
                    return invalid(format!(
                        "box [{}, {}] extends beyond the cavity",
                        self.center - a,
                        self.center + a
                    ));
                }
            }
            TrapKind::Harmonic { omega, length } => {
                if !(omega > 0.0 && omega.is_finite()) {
                    return invalid(format!("harmonic frequency {omega} must be > 0"));
                }
                if !(length > 0.0 && length.is_finite()) {
                    return invalid(format!("oscillator length {length} must be > 0"));
                }
                if self.center.abs() >= CAVITY_HALF_LENGTH {
                    return invalid("harmonic trap center lies outside the cavity");
                }
            }
        }
        Ok(())
    }

    pub fn is_box(&self) -> bool {
        matches!(self.kind, TrapKind::Box { .. })
    }

    /// Integration interval carrying the first `n_modes` eigenfunctions.
    ///
    /// For the harmonic trap the padded support is clipped to the cavity; it
    /// is an error if the highest mode then loses more than
    /// [`QUADRATURE_TOL`] of its norm.
    pub fn support(&self, n_modes: usize) -> Result<(f64, f64)> {
        match self.kind {
            TrapKind::Box { half_width } => Ok((self.center - half_width, self.center + half_width)),
            TrapKind::Harmonic { length, .. } => {
                let top = n_modes.max(1) - 1;
                let r = length * ((2 * top + 1) as f64).sqrt() + HARMONIC_PADDING * length;
                let (lo, hi) = (self.center - r, self.center + r);
                let (clo, chi) = (lo.max(-CAVITY_HALF_LENGTH), hi.min(CAVITY_HALF_LENGTH));
                let max_width = MAX_PHASE_PER_PANEL / (2.0 * self.max_wavenumber(n_modes));
                let mut psi = vec![0.0; top + 1];
                let mut lost = 0.0;
                for (a, b) in [(lo, clo), (chi, hi)] {
                    if b > a {
                        for (x, w) in panel_nodes(a, b, b - a, max_width) {
                            eigenfunctions_into(self, x, &mut psi);
                            lost += w * psi[top] * psi[top];
                        }
                    }
                }
                if lost > QUADRATURE_TOL {
                    return invalid(format!(
                        "harmonic trap mode {top} has weight {lost:e} outside the cavity"
                    ));
                }
                Ok((clo, chi))
            }
        }
    }

    /// Largest local angular frequency among the first `n_modes`
    /// eigenfunctions.
    fn max_wavenumber(&self, n_modes: usize) -> f64 {
        match self.kind {
            TrapKind::Box { half_width } => PI * n_modes as f64 / (2.0 * half_width),
            TrapKind::Harmonic { length, .. } => ((2 * n_modes + 1) as f64).sqrt() / length,
        }
    }
}

/// `uₙ(x) = sin(kₙ(x+L))`, `kₙ = nπ/(2L)`.
pub fn cavity_mode(n: usize, x: f64) -> Result<f64> {
    if n < 1 {
        return invalid("cavity mode index must be >= 1");
    }
    if x.abs() > CAVITY_HALF_LENGTH * (1.0 + 1e-12) {
        return invalid(format!("position {x} outside the cavity"));
    }
    Ok(mode_value(n, x))
}

fn wavenumber(n: usize) -> f64 {
    n as f64 * PI / (2.0 * CAVITY_HALF_LENGTH)
}

fn mode_value(n: usize, x: f64) -> f64 {
    (wavenumber(n) * (x + CAVITY_HALF_LENGTH)).sin()
}

pub fn trap_eigenfunction(trap: &TrapGeometry, i: usize, x: f64) -> f64 {
    let mut out = vec![0.0; i + 1];
    eigenfunctions_into(trap, x, &mut out);
    out[i]
}

/// Writes `Ψ₀(x) … Ψ_{m−1}(x)` into `out`.
pub fn eigenfunctions_into(trap: &TrapGeometry, x: f64, out: &mut [f64]) {
    match trap.kind {
        TrapKind::Box { half_width: a } => {
            let s = x - trap.center + a;
            if !(0.0..=2.0 * a).contains(&s) {
                out.iter_mut().for_each(|v| *v = 0.0);
                return;
            }
            let norm = 1.0 / a.sqrt();
            for (i, v) in out.iter_mut().enumerate() {
                *v = norm * (PI * (i + 1) as f64 / (2.0 * a) * s).sin();
            }
        }
        TrapKind::Harmonic { length, .. } => {
            let y = (x - trap.center) / length;
            let mut prev = 0.0;
            let mut cur = PI.powf(-0.25) * (-0.5 * y * y).exp() / length.sqrt();
            for (n, v) in out.iter_mut().enumerate() {
                *v = cur;
                let next = (2.0 / (n + 1) as f64).sqrt() * y * cur - (n as f64 / (n + 1) as f64).sqrt() * prev;
                prev = cur;
                cur = next;
            }
        }
    }
}

/// Trap energy in units of `κ`. `omega_rec` is the box ground-state energy;
/// it is ignored for the harmonic trap.
pub fn trap_energy(trap: &TrapGeometry, i: usize, omega_rec: f64) -> f64 {
    match trap.kind {
        TrapKind::Box { .. } => omega_rec * ((i + 1) * (i + 1)) as f64,
        TrapKind::Harmonic { omega, .. } => omega * (i as f64 + 0.5),
    }
}

/// Gauss–Legendre nodes and weights of order 16 on `[-1, 1]`.
pub fn gauss_legendre_16() -> &'static [(f64, f64)] {
    static RULE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(GL_ORDER))
}

fn gauss_legendre(order: usize) -> Vec<(f64, f64)> {
    let n = order as f64;
    let mut rule = Vec::with_capacity(order);
    for k in 0..order {
        let mut x = (PI * (k as f64 + 0.75) / (n + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for m in 2..=order {
                let m = m as f64;
                let p2 = ((2.0 * m - 1.0) * x * p1 - (m - 1.0) * p0) / m;
                p0 = p1;
                p1 = p2;
            }
            dp = n * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        rule.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    rule.sort_by(|a, b| a.0.total_cmp(&b.0));
    rule
}

/// Panel Gauss–Legendre nodes `(x, w)` on `[lo, hi]`.
///
/// Panel edges fall on the grid `−L + m·spacing` inside the interval, and
/// panels are further split so none is wider than `max_width`.
pub fn panel_nodes(lo: f64, hi: f64, spacing: f64, max_width: f64) -> Vec<(f64, f64)> {
    let mut edges = vec![lo];
    let first = ((lo + CAVITY_HALF_LENGTH) / spacing).floor() as i64 + 1;
    let mut m = first;
    loop {
        let x = -CAVITY_HALF_LENGTH + m as f64 * spacing;
        if x >= hi - 1e-14 {
            break;
        }
        if x > lo + 1e-14 {
            edges.push(x);
        }
        m += 1;
    }
    edges.push(hi);

    let rule = gauss_legendre_16();
    let mut nodes = Vec::new();
    for w in edges.windows(2) {
        let parts = ((w[1] - w[0]) / max_width).ceil().max(1.0) as usize;
        let h = (w[1] - w[0]) / parts as f64;
        for p in 0..parts {
            let mid = w[0] + (p as f64 + 0.5) * h;
            for &(t, wt) in rule {
                nodes.push((mid + 0.5 * h * t, 0.5 * h * wt));
            }
        }
    }
    nodes
}

/// Quadrature nodes adequate for integrating products of two of the first
/// `n_modes` trap eigenfunctions against smooth weights of wavenumber up to
/// `extra_wavenumber`, refined `2^refine` times.
pub fn trap_nodes(trap: &TrapGeometry, n_modes: usize, extra_wavenumber: f64, refine: u32) -> Result<Vec<(f64, f64)>> {
    trap.validate()?;
    let (lo, hi) = trap.support(n_modes)?;
    let omega = 2.0 * trap.max_wavenumber(n_modes) + extra_wavenumber;
    let spacing = if extra_wavenumber > 0.0 { PI / extra_wavenumber } else { hi - lo };
    let scale = (1u64 << refine) as f64;
    Ok(panel_nodes(lo, hi, spacing / scale, MAX_PHASE_PER_PANEL / omega / scale))
}

/// Gram matrix `∫ΨᵢΨⱼ dx` of the first `n_modes` eigenfunctions.
pub fn trap_overlaps(trap: &TrapGeometry, n_modes: usize) -> Result<Array2<f64>> {
    let nodes = trap_nodes(trap, n_modes, 0.0, 1)?;
    let mut g = Array2::zeros((n_modes, n_modes));
    let mut psi = vec![0.0; n_modes];
    for &(x, w) in &nodes {
        eigenfunctions_into(trap, x, &mut psi);
        for i in 0..n_modes {
            for j in i..n_modes {
                g[[i, j]] += w * psi[i] * psi[j];
            }
        }
    }
    mirror(&mut g);
    Ok(g)
}

fn mirror(m: &mut Array2<f64>) {
    for i in 0..m.nrows() {
        for j in 0..i {
            m[[i, j]] = m[[j, i]];
        }
    }
}

/// `(Aⁿ, Bⁿ)` over the trap modes `0..n_modes_trap`, with panel count scaled by
/// `2^refine` and no convergence check or clipping.
pub fn coupling_quadrature_raw(
    trap: &TrapGeometry,
    n: usize,
    n_modes_trap: usize,
    refine: u32,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if n < 1 {
        return invalid("cavity mode index must be >= 1");
    }
    if n_modes_trap < 1 {
        return invalid("need at least one trap mode");
    }
    let k = wavenumber(n);
    // sin² has nodes every π/(2k), sin every π/k; the finer grid serves both.
    let nodes = trap_nodes(trap, n_modes_trap, 2.0 * k, refine)?;
    let m = n_modes_trap;
    let mut a = Array2::zeros((m, m));
    let mut b = Array2::zeros((m, m));
    let mut psi = vec![0.0; m];
    for &(x, w) in &nodes {
        eigenfunctions_into(trap, x, &mut psi);
        let u = mode_value(n, x);
        let wb = w * u;
        let wa = wb * u;
        for i in 0..m {
            let pi = psi[i];
            if pi == 0.0 {
                continue;
            }
            for j in i..m {
                let p = pi * psi[j];
                a[[i, j]] += wa * p;
                b[[i, j]] += wb * p;
            }
        }
    }
    mirror(&mut a);
    mirror(&mut b);
    Ok((a, b))
}

fn max_abs_diff(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    x.iter().zip(y.iter()).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
}

fn clip(m: &mut Array2<f64>) {
    m.mapv_inplace(|v| if v.abs() < ZERO_CLIP { 0.0 } else { v });
}

/// `(Aⁿ, Bⁿ)` over the trap modes `0..n_modes_trap`, converged to
/// [`QUADRATURE_TOL`] by panel doubling and clipped at [`ZERO_CLIP`].
pub fn coupling_quadrature(trap: &TrapGeometry, n: usize, n_modes_trap: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    let (mut a, mut b) = coupling_quadrature_raw(trap, n, n_modes_trap, 0)?;
    let mut change = f64::INFINITY;
    for refine in 1..=MAX_REFINEMENTS {
        let (a2, b2) = coupling_quadrature_raw(trap, n, n_modes_trap, refine)?;
        change = max_abs_diff(&a, &a2).max(max_abs_diff(&b, &b2));
        a = a2;
        b = b2;
        if change <= QUADRATURE_TOL {
            clip(&mut a);
            clip(&mut b);
            return Ok((a, b));
        }
    }
    Err(Error::NumericalFailure(format!(
        "coupling quadrature for mode {n} did not converge after {MAX_REFINEMENTS} panel doublings \
         (last change {change:e})"
    )))
}

/// Coupling data for a set of pumped cavity modes over a set of trap modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingMatrices {
    /// Cavity mode indices `n`, in configuration order.
    pub modes: Vec<usize>,
    /// Trap eigenmode indices spanning the particle basis, ascending.
    pub trap_modes: Vec<usize>,
    pub a: Vec<Array2<f64>>,
    pub b: Vec<Array2<f64>>,
    /// Trap energies of `trap_modes`, in units of `κ`.
    pub energies: Vec<f64>,
}

impl CouplingMatrices {
    /// Quadrature couplings over trap modes `0..n_modes_trap`.
    pub fn compute(trap: &TrapGeometry, modes: &[usize], n_modes_trap: usize, omega_rec: f64) -> Result<Self> {
        if modes.is_empty() {
            return invalid("no cavity modes given");
        }
        let mut seen = BTreeSet::new();
        if !modes.iter().all(|n| seen.insert(*n)) {
            return invalid("cavity mode indices must be distinct");
        }
        if trap.is_box() && !(omega_rec > 0.0) {
            return invalid("omega_rec must be > 0");
        }
        let mut a = Vec::with_capacity(modes.len());
        let mut b = Vec::with_capacity(modes.len());
        for &n in modes {
            let (an, bn) = coupling_quadrature(trap, n, n_modes_trap)?;
            a.push(an);
            b.push(bn);
        }
        Ok(Self {
            modes: modes.to_vec(),
            trap_modes: (0..n_modes_trap).collect(),
            a,
            b,
            energies: (0..n_modes_trap).map(|i| trap_energy(trap, i, omega_rec)).collect(),
        })
    }

    pub fn n_modes_trap(&self) -> usize {
        self.trap_modes.len()
    }

    pub fn mode_position(&self, n: usize) -> Option<usize> {
        self.modes.iter().position(|&m| m == n)
    }

    /// Sub-matrices over the listed trap eigenmodes (given by trap index).
    pub fn restrict(&self, trap_modes: &[usize]) -> Result<Self> {
        let pos: Vec<usize> = trap_modes
            .iter()
            .map(|t| {
                self.trap_modes
                    .iter()
                    .position(|x| x == t)
                    .ok_or_else(|| Error::InvalidArgument(format!("trap mode {t} not in the coupling data")))
            })
            .collect::<Result<_>>()?;
        let take = |m: &Array2<f64>| Array2::from_shape_fn((pos.len(), pos.len()), |(i, j)| m[[pos[i], pos[j]]]);
        Ok(Self {
            modes: self.modes.clone(),
            trap_modes: trap_modes.to_vec(),
            a: self.a.iter().map(take).collect(),
            b: self.b.iter().map(take).collect(),
            energies: pos.iter().map(|&p| self.energies[p]).collect(),
        })
    }

    /// Restriction to cavity modes (by index `n`).
    pub fn select_modes(&self, modes: &[usize]) -> Result<Self> {
        let pos: Vec<usize> = modes
            .iter()
            .map(|n| {
                self.mode_position(*n)
                    .ok_or_else(|| Error::InvalidArgument(format!("cavity mode {n} not in the coupling data")))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            modes: modes.to_vec(),
            trap_modes: self.trap_modes.clone(),
            a: pos.iter().map(|&p| self.a[p].clone()).collect(),
            b: pos.iter().map(|&p| self.b[p].clone()).collect(),
            energies: self.energies.clone(),
        })
    }
}

/// Index convention inside the printed closed forms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    /// Trap indices inserted as they are (0-based).
    AsPrinted,
    /// Trap indices inserted as `i+1`, `j+1`.
    ShiftedByOne,
}

impl Convention {
    pub const ALL: [Convention; 2] = [Convention::AsPrinted, Convention::ShiftedByOne];

    fn offset(self) -> f64 {
        match self {
            Convention::AsPrinted => 0.0,
            Convention::ShiftedByOne => 1.0,
        }
    }
}

/// `sin(x)/x` with the removable singularity filled in.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// Closed-form `(Aⁿᵢⱼ, Bⁿᵢⱼ)` for a box of half-width `a` centered in the
/// cavity.
pub fn coupling_closed_form_box(a: f64, n: usize, i: usize, j: usize, convention: Convention) -> (f64, f64) {
    let r = a / CAVITY_HALF_LENGTH;
    let h = PI / 2.0;
    let f_cos = |p: f64, q: f64, m: f64| sinc(h * (p + q + 2.0 * r * m)) * (h * (p + q)).cos();
    let f_sin = |p: f64, q: f64, m: f64| sinc(h * (p + q + r * m)) * (h * (p + q + m)).sin();
    let p = i as f64 + convention.offset();
    let q = j as f64 + convention.offset();
    let m = n as f64;
    let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
    let delta = if i == j { 0.5 } else { 0.0 };
    let av = delta + sign / 4.0 * (f_cos(p, q, m) + f_cos(p, q, -m) - f_cos(p, -q, m) - f_cos(p, -q, -m));
    let bv = 0.5 * (-f_sin(p, q, m) + f_sin(-p, q, m) + f_sin(p, -q, m) + f_sin(p, q, -m));
    (av, bv)
}

/// Outcome of comparing both closed-form conventions with quadrature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConventionVerdict {
    pub half_width: f64,
    pub modes: Vec<usize>,
    pub n_modes_trap: usize,
    pub tolerance: f64,
    /// Largest entrywise deviation from quadrature, per convention.
    pub max_error: Vec<(Convention, f64)>,
    /// The first convention within tolerance, if any.
    pub selected: Option<Convention>,
}

pub fn validate_closed_form(half_width: f64, modes: &[usize], n_modes_trap: usize, tolerance: f64) -> Result<ConventionVerdict> {
    let trap = TrapGeometry::centered_box(half_width)?;
    let quad: Vec<_> = modes
        .iter()
        .map(|&n| coupling_quadrature(&trap, n, n_modes_trap))
        .collect::<Result<_>>()?;
    let mut max_error = Vec::new();
    for conv in Convention::ALL {
        let mut worst: f64 = 0.0;
        for (&n, (qa, qb)) in modes.iter().zip(&quad) {
            for i in 0..n_modes_trap {
                for j in 0..n_modes_trap {
                    let (ca, cb) = coupling_closed_form_box(half_width, n, i, j, conv);
                    worst = worst.max((ca - qa[[i, j]]).abs()).max((cb - qb[[i, j]]).abs());
                }
            }
        }
        max_error.push((conv, worst));
    }
    let selected = max_error.iter().find(|(_, e)| *e <= tolerance).map(|(c, _)| *c);
    Ok(ConventionVerdict {
        half_width,
        modes: modes.to_vec(),
        n_modes_trap,
        tolerance,
        max_error,
        selected,
    })
}

/// Trap modes reachable from the ground state through nonzero couplings,
/// keeping the `max_modes` lowest in energy. Returned ascending.
pub fn reachable_modes(coupling: &CouplingMatrices, tol: f64, max_modes: usize) -> Vec<usize> {
    let m = coupling.n_modes_trap();
    if m == 0 || max_modes == 0 {
        return Vec::new();
    }
    let linked = |i: usize, j: usize| {
        coupling
            .a
            .iter()
            .chain(&coupling.b)
            .any(|mat| mat[[i, j]].abs() > tol)
    };
    let mut seen = vec![false; m];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(i) = queue.pop_front() {
        for j in 0..m {
            if !seen[j] && j != i && linked(i, j) {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    let mut found: Vec<usize> = (0..m).filter(|&i| seen[i]).collect();
    found.sort_by(|&x, &y| coupling.energies[x].total_cmp(&coupling.energies[y]).then(x.cmp(&y)));
    found.truncate(max_modes);
    let mut out: Vec<usize> = found.into_iter().map(|p| coupling.trap_modes[p]).collect();
    out.sort_unstable();
    out
}

/// Fraction of entries with magnitude above `threshold`.
pub fn nonzero_fraction(m: &Array2<f64>, threshold: f64) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.iter().filter(|v| v.abs() > threshold).count() as f64 / m.len() as f64
}
