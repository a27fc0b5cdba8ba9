//! Dense and sparse factorizations, delegated to `faer`.

use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};
use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;
use crate::C64;

pub(crate) fn to_faer(m: &Array2<C64>) -> Mat<C64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

fn from_faer(m: faer::MatRef<'_, C64>) -> Array2<C64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Eigen-decomposition of a Hermitian matrix; eigenvalues ascending, the
/// eigenvectors are the columns of the returned matrix.
pub fn hermitian_eigen(m: &Array2<C64>) -> Result<(Array1<f64>, Array2<C64>)> {
    let evd = to_faer(m)
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::NumericalFailure(format!("hermitian eigensolver: {e:?}")))?;
    let vals = evd.S().column_vector().iter().map(|v| v.re).collect();
    Ok((vals, from_faer(evd.U())))
}

pub fn hermitian_eigenvalues(m: &Array2<C64>) -> Result<Vec<f64>> {
    to_faer(m)
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::NumericalFailure(format!("hermitian eigensolver: {e:?}")))
}

/// Eigenvalues of a general complex matrix, in no particular order.
pub fn eigenvalues(m: &Array2<C64>) -> Result<Vec<C64>> {
    to_faer(m)
        .eigenvalues()
        .map_err(|e| Error::NumericalFailure(format!("eigensolver: {e:?}")))
}

/// Eigenvalues and right eigenvectors (columns) of a general complex matrix.
pub fn eigen(m: &Array2<C64>) -> Result<(Vec<C64>, Array2<C64>)> {
    let evd = to_faer(m)
        .eigen()
        .map_err(|e| Error::NumericalFailure(format!("eigensolver: {e:?}")))?;
    let vals = evd.S().column_vector().iter().copied().collect();
    Ok((vals, from_faer(evd.U())))
}

pub fn inverse(m: &Array2<C64>) -> Array2<C64> {
    from_faer(to_faer(m).partial_piv_lu().inverse().as_ref())
}

pub fn matmul(a: &Array2<C64>, b: &Array2<C64>) -> Array2<C64> {
    from_faer((to_faer(a) * to_faer(b)).as_ref())
}

/// Square root of a positive semidefinite Hermitian matrix. Negative
/// eigenvalues from round-off are clipped to zero.
pub fn psd_sqrt(m: &Array2<C64>) -> Result<Array2<C64>> {
    let (vals, vecs) = hermitian_eigen(m)?;
    let n = m.nrows();
    let mut scaled = vecs.clone();
    for j in 0..n {
        let s = vals[j].max(0.0).sqrt();
        scaled.column_mut(j).mapv_inplace(|v| v * s);
    }
    Ok(scaled.dot(&vecs.t().mapv(|v| v.conj())))
}

/// Sparse LU factorization of a square matrix given in CSR form.
pub struct SparseLu {
    lu: faer::sparse::linalg::solvers::Lu<usize, C64>,
    n: usize,
}

impl SparseLu {
    pub fn new(m: &CsrMatrix) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::InvalidArgument("LU of a non-square matrix".into()));
        }
        let n = m.nrows();
        let trip: Vec<Triplet<usize, usize, C64>> =
            m.iter().map(|(r, c, v)| Triplet::new(r, c, v)).collect();
        let csc = SparseColMat::<usize, C64>::try_new_from_triplets(n, n, &trip)
            .map_err(|e| Error::NumericalFailure(format!("sparse assembly: {e:?}")))?;
        let lu = csc
            .sp_lu()
            .map_err(|e| Error::NumericalFailure(format!("sparse LU: {e:?}")))?;
        Ok(Self { lu, n })
    }

    pub fn solve(&self, rhs: &[C64]) -> Vec<C64> {
        let mut b = Mat::from_fn(self.n, 1, |i, _| rhs[i]);
        self.lu.solve_in_place(b.as_mut());
        (0..self.n).map(|i| b[(i, 0)]).collect()
    }
}

#[derive(Clone, Debug)]
pub struct GmresOutcome {
    pub x: Vec<C64>,
    /// Final residual norm relative to `‖b‖`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn norm2(v: &[C64]) -> f64 {
    v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

fn dotc(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Restarted GMRES for `A x = b`, starting from zero.
pub fn gmres(
    mut apply: impl FnMut(&[C64], &mut [C64]),
    b: &[C64],
    restart: usize,
    max_iter: usize,
    tol: f64,
) -> GmresOutcome {
    let n = b.len();
    let bnorm = norm2(b).max(f64::MIN_POSITIVE);
    let mut x = vec![C64::new(0.0, 0.0); n];
    let mut ax = vec![C64::new(0.0, 0.0); n];
    let mut iterations = 0;
    let mut residual;
    while iterations < max_iter {
        apply(&x, &mut ax);
        let r: Vec<C64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let beta = norm2(&r);
        residual = beta / bnorm;
        if residual <= tol {
            return GmresOutcome { x, residual, iterations, converged: true };
        }
        let m = restart.min(max_iter - iterations);
        let mut basis: Vec<Vec<C64>> = vec![r.iter().map(|v| v / beta).collect()];
        let mut h = vec![vec![C64::new(0.0, 0.0); m]; m + 1];
        let (mut cs, mut sn) = (vec![C64::new(0.0, 0.0); m], vec![C64::new(0.0, 0.0); m]);
        let mut g = vec![C64::new(0.0, 0.0); m + 1];
        g[0] = C64::new(beta, 0.0);
        let mut k = 0;
        while k < m {
            let mut w = vec![C64::new(0.0, 0.0); n];
            apply(&basis[k], &mut w);
            iterations += 1;
            // Modified Gram-Schmidt, twice.
            for _ in 0..2 {
                for (j, v) in basis.iter().enumerate() {
                    let c = dotc(v, &w);
                    h[j][k] += c;
                    for (wi, vi) in w.iter_mut().zip(v) {
                        *wi -= c * vi;
                    }
                }
            }
            let hn = norm2(&w);
            h[k + 1][k] = C64::new(hn, 0.0);
            for j in 0..k {
                let t = cs[j].conj() * h[j][k] + sn[j].conj() * h[j + 1][k];
                h[j + 1][k] = -sn[j] * h[j][k] + cs[j] * h[j + 1][k];
                h[j][k] = t;
            }
            let (a, bb) = (h[k][k], h[k + 1][k]);
            let den = (a.norm_sqr() + bb.norm_sqr()).sqrt();
            if den == 0.0 {
                break;
            }
            cs[k] = a / den;
            sn[k] = bb / den;
            h[k][k] = C64::new(den, 0.0);
            h[k + 1][k] = C64::new(0.0, 0.0);
            g[k + 1] = -sn[k] * g[k];
            g[k] = cs[k].conj() * g[k];
            k += 1;
            residual = g[k].norm() / bnorm;
            if residual <= tol || hn == 0.0 {
                break;
            }
            basis.push(w.iter().map(|v| v / hn).collect());
        }
        // Back substitution on the triangular system.
        let mut y = vec![C64::new(0.0, 0.0); k];
        for i in (0..k).rev() {
            let mut s = g[i];
            for j in i + 1..k {
                s -= h[i][j] * y[j];
            }
            y[i] = s / h[i][i];
        }
        for (j, yj) in y.iter().enumerate() {
            for (xi, vi) in x.iter_mut().zip(&basis[j]) {
                *xi += yj * vi;
            }
        }
        if k == 0 {
            break;
        }
    }
    apply(&x, &mut ax);
    residual = norm2(&b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect::<Vec<_>>()) / bnorm;
    GmresOutcome { converged: residual <= tol, x, residual, iterations }
}

/// Dense LU solve, used where the system is small.
pub fn dense_solve(m: &Array2<C64>, rhs: &[C64]) -> Vec<C64> {
    let lu = to_faer(m).partial_piv_lu();
    let mut b = Mat::from_fn(rhs.len(), 1, |i, _| rhs[i]);
    lu.solve_in_place(b.as_mut());
    (0..rhs.len()).map(|i| b[(i, 0)]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrt_squares_back() {
        let m = Array2::from_shape_vec(
            (2, 2),
            vec![C64::new(2.0, 0.0), C64::new(0.5, 0.5), C64::new(0.5, -0.5), C64::new(1.0, 0.0)],
        )
        .unwrap();
        let s = psd_sqrt(&m).unwrap();
        let back = s.dot(&s);
        for (a, b) in back.iter().zip(m.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn sparse_lu_solves() {
        let m = CsrMatrix::from_triplets(
            3,
            3,
            [
                (0, 0, C64::new(2.0, 0.0)),
                (0, 2, C64::new(0.0, 1.0)),
                (1, 1, C64::new(3.0, 0.0)),
                (2, 0, C64::new(1.0, 0.0)),
                (2, 2, C64::new(4.0, -1.0)),
            ],
        );
        let b = vec![C64::new(1.0, 0.0), C64::new(2.0, 0.0), C64::new(0.0, 1.0)];
        let x = SparseLu::new(&m).unwrap().solve(&b);
        let it = gmres(|v, out| out.copy_from_slice(&m.apply(v)), &b, 5, 200, 1e-13);
        assert!(it.converged);
        for (a, b) in it.x.iter().zip(&x) {
            assert!((a - b).norm() < 1e-10);
        }
        let back = m.apply(&x);
        for (a, b) in back.iter().zip(&b) {
            assert!((a - b).norm() < 1e-13);
        }
    }
}
