//! Compressed-row complex matrices.
//!
//! Everything that touches the full Hilbert space (Hamiltonians, jump
//! operators, superoperators) is assembled and applied in this format.
//! Rows are stored with strictly increasing column indices and no explicit
//! zeros.

use ndarray::{Array2, ArrayView2, ArrayViewMut2};

use crate::C64;

#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<C64>,
}

impl CsrMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, indptr: vec![0; nrows + 1], indices: Vec::new(), values: Vec::new() }
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![C64::new(1.0, 0.0); n])
    }

    pub fn diagonal(diag: &[C64]) -> Self {
        Self::from_triplets(
            diag.len(),
            diag.len(),
            diag.iter().enumerate().map(|(i, &v)| (i, i, v)),
        )
    }

    /// Builds a matrix from `(row, col, value)` triplets. Duplicates are
    /// summed; entries that end up exactly zero are dropped.
    ///
    /// *Panics* if an index is out of bounds.
    pub fn from_triplets<I>(nrows: usize, ncols: usize, triplets: I) -> Self
    where
        I: IntoIterator<Item = (usize, usize, C64)>,
    {
        let mut rows: Vec<Vec<(usize, C64)>> = vec![Vec::new(); nrows];
        for (r, c, v) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds for {nrows}x{ncols}");
            rows[r].push((c, v));
        }
        let mut indptr = Vec::with_capacity(nrows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            let mut iter = row.into_iter().peekable();
            while let Some((c, mut v)) = iter.next() {
                while let Some(&(c2, v2)) = iter.peek() {
                    if c2 != c {
                        break;
                    }
                    v += v2;
                    iter.next();
                }
                if v != C64::new(0.0, 0.0) {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self { nrows, ncols, indptr, indices, values }
    }

    pub fn from_dense(m: &Array2<C64>) -> Self {
        let (nr, nc) = m.dim();
        Self::from_triplets(nr, nc, m.indexed_iter().map(|((r, c), &v)| (r, c, v)))
    }

    pub fn to_dense(&self) -> Array2<C64> {
        let mut out = Array2::zeros((self.nrows, self.ncols));
        for (r, c, v) in self.iter() {
            out[[r, c]] = v;
        }
        out
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[C64]) {
        let span = self.indptr[r]..self.indptr[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn get(&self, r: usize, c: usize) -> C64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&c) {
            Ok(k) => vals[k],
            Err(_) => C64::new(0.0, 0.0),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, C64)> + '_ {
        (0..self.nrows).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(move |(&c, &v)| (r, c, v))
        })
    }

    pub fn transpose(&self) -> Self {
        Self::from_triplets(self.ncols, self.nrows, self.iter().map(|(r, c, v)| (c, r, v)))
    }

    pub fn adjoint(&self) -> Self {
        Self::from_triplets(self.ncols, self.nrows, self.iter().map(|(r, c, v)| (c, r, v.conj())))
    }

    pub fn conj(&self) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v = v.conj());
        out
    }

    pub fn scale(&self, s: C64) -> Self {
        Self::from_triplets(self.nrows, self.ncols, self.iter().map(|(r, c, v)| (r, c, v * s)))
    }

    /// `self + s * other`
    pub fn add_scaled(&self, other: &Self, s: C64) -> Self {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols), "shape mismatch in add");
        Self::from_triplets(
            self.nrows,
            self.ncols,
            self.iter().chain(other.iter().map(|(r, c, v)| (r, c, v * s))),
        )
    }

    pub fn add(&self, other: &Self) -> Self {
        self.add_scaled(other, C64::new(1.0, 0.0))
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.ncols, other.nrows, "shape mismatch in matmul");
        let mut trip = Vec::new();
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (&k, &a) in cols.iter().zip(vals) {
                let (cols2, vals2) = other.row(k);
                for (&c, &b) in cols2.iter().zip(vals2) {
                    trip.push((r, c, a * b));
                }
            }
        }
        Self::from_triplets(self.nrows, other.ncols, trip)
    }

    /// Kronecker product `self ⊗ other`.
    pub fn kron(&self, other: &Self) -> Self {
        let mut trip = Vec::with_capacity(self.nnz() * other.nnz());
        for (r1, c1, v1) in self.iter() {
            for (r2, c2, v2) in other.iter() {
                trip.push((r1 * other.nrows + r2, c1 * other.ncols + c2, v1 * v2));
            }
        }
        Self::from_triplets(self.nrows * other.nrows, self.ncols * other.ncols, trip)
    }

    /// `y = A x`
    pub fn matvec(&self, x: &[C64], y: &mut [C64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for (r, yr) in y.iter_mut().enumerate() {
            let (cols, vals) = self.row(r);
            let mut acc = C64::new(0.0, 0.0);
            for (&c, &v) in cols.iter().zip(vals) {
                acc += v * x[c];
            }
            *yr = acc;
        }
    }

    pub fn apply(&self, x: &[C64]) -> Vec<C64> {
        let mut y = vec![C64::new(0.0, 0.0); self.nrows];
        self.matvec(x, &mut y);
        y
    }

    /// `out = A X` for a dense row-major `X`.
    pub fn mul_dense_into(&self, x: ArrayView2<C64>, mut out: ArrayViewMut2<C64>) {
        debug_assert_eq!(x.nrows(), self.ncols);
        let n = x.ncols();
        let xs = x.as_slice().expect("dense operand must be in standard layout");
        let os = out.as_slice_mut().expect("dense output must be in standard layout");
        for r in 0..self.nrows {
            let orow = &mut os[r * n..(r + 1) * n];
            orow.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
            let (cols, vals) = self.row(r);
            for (&k, &a) in cols.iter().zip(vals) {
                let xrow = &xs[k * n..(k + 1) * n];
                for (o, &xv) in orow.iter_mut().zip(xrow) {
                    *o += a * xv;
                }
            }
        }
    }

    pub fn mul_dense(&self, x: &Array2<C64>) -> Array2<C64> {
        let x = x.as_standard_layout();
        let mut out = Array2::zeros((self.nrows, x.ncols()));
        self.mul_dense_into(x.view(), out.view_mut());
        out
    }

    /// `X A` for a dense `X`.
    pub fn right_mul_dense(&self, x: &Array2<C64>) -> Array2<C64> {
        let mut out = Array2::zeros((x.nrows(), self.ncols));
        for (r, c, v) in self.iter() {
            for i in 0..x.nrows() {
                out[[i, c]] += x[[i, r]] * v;
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.add_scaled(other, C64::new(-1.0, 0.0))
            .values
            .iter()
            .fold(0.0, |m, v| m.max(v.norm()))
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.norm()))
    }

    /// Largest entry of `A - A†`.
    pub fn hermiticity_error(&self) -> f64 {
        self.max_abs_diff(&self.adjoint())
    }

    pub fn trace(&self) -> C64 {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).sum()
    }

    pub fn is_diagonal(&self) -> bool {
        self.iter().all(|(r, c, _)| r == c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn triplets_sum_duplicates_and_drop_zeros() {
        let m = CsrMatrix::from_triplets(
            2,
            2,
            [(0, 1, c(1.0, 0.0)), (0, 1, c(2.0, 1.0)), (1, 0, c(1.0, 0.0)), (1, 0, c(-1.0, 0.0))],
        );
        assert_eq!(m.nnz(), 1);
        assert_eq!(m.get(0, 1), c(3.0, 1.0));
        assert_eq!(m.get(1, 0), c(0.0, 0.0));
    }

    #[test]
    fn kron_of_identities_is_identity() {
        let k = CsrMatrix::identity(2).kron(&CsrMatrix::identity(3));
        assert_eq!(k, CsrMatrix::identity(6));
    }

    fn arb_matrix(n: usize) -> impl Strategy<Value = Array2<C64>> {
        proptest::collection::vec((-1.0..1.0f64, -1.0..1.0f64, 0..3u8), n * n).prop_map(move |v| {
            Array2::from_shape_vec(
                (n, n),
                v.into_iter()
                    .map(|(re, im, keep)| if keep == 0 { c(0.0, 0.0) } else { c(re, im) })
                    .collect(),
            )
            .unwrap()
        })
    }

    proptest! {
        #[test]
        fn dense_round_trip_is_exact(m in arb_matrix(5)) {
            prop_assert_eq!(CsrMatrix::from_dense(&m).to_dense(), m);
        }

        #[test]
        fn products_match_dense(a in arb_matrix(4), b in arb_matrix(4)) {
            let sa = CsrMatrix::from_dense(&a);
            let sb = CsrMatrix::from_dense(&b);
            let dense = a.dot(&b);
            let diff = (&sa.matmul(&sb).to_dense() - &dense).mapv(|v| v.norm()).fold(0.0f64, |m, &v| m.max(v));
            prop_assert!(diff < 1e-14);
            let diff = (&sa.mul_dense(&b) - &dense).mapv(|v| v.norm()).fold(0.0f64, |m, &v| m.max(v));
            prop_assert!(diff < 1e-14);
            let diff = (&sb.right_mul_dense(&a) - &dense).mapv(|v| v.norm()).fold(0.0f64, |m, &v| m.max(v));
            prop_assert!(diff < 1e-14);
        }
    }
}
