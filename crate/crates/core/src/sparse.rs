//! Compressed sparse matrices and a fill-reducing sparse Cholesky factorization.
//!
//! Matrices are stored as [`nalgebra_sparse::CsrMatrix`]. The Cholesky factor
//! uses a reverse Cuthill-McKee ordering followed by a row-envelope
//! factorization, which is compact for the banded structure of 2D finite
//! element matrices and gives contiguous inner loops for multi-column solves.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::{CooMatrix, CsrMatrix};
use rayon::prelude::*;

use crate::error::{Error, Result};

pub type SparseMatrix = CsrMatrix<f64>;

/// Assemble a CSR matrix from `(row, col, value)` triplets, summing duplicates.
pub fn from_triplets(
    nrows: usize,
    ncols: usize,
    triplets: impl IntoIterator<Item = (usize, usize, f64)>,
) -> SparseMatrix {
    let mut coo = CooMatrix::new(nrows, ncols);
    for (i, j, v) in triplets {
        coo.push(i, j, v);
    }
    CsrMatrix::from(&coo)
}

/// `pᵀ · a · p`.
pub fn galerkin(a: &SparseMatrix, p: &SparseMatrix) -> SparseMatrix {
    let ap = a * p;
    &p.transpose() * &ap
}

/// Sparse times dense.
pub fn mul_dense(a: &SparseMatrix, x: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.ncols(), x.nrows(), "sparse-dense product shape");
    let mut out = DMatrix::zeros(a.nrows(), x.ncols());
    let (offsets, cols, vals) = a.csr_data();
    for c in 0..x.ncols() {
        let xc = x.column(c);
        let mut oc = out.column_mut(c);
        for i in 0..a.nrows() {
            let mut s = 0.0;
            for idx in offsets[i]..offsets[i + 1] {
                s += vals[idx] * xc[cols[idx]];
            }
            oc[i] = s;
        }
    }
    out
}

/// Sparse transpose times dense, without forming the transpose.
pub fn tr_mul_dense(a: &SparseMatrix, x: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), x.nrows(), "sparse-transpose-dense product shape");
    let mut out = DMatrix::zeros(a.ncols(), x.ncols());
    let (offsets, cols, vals) = a.csr_data();
    for c in 0..x.ncols() {
        let xc = x.column(c);
        let mut oc = out.column_mut(c);
        for i in 0..a.nrows() {
            let xi = xc[i];
            if xi == 0.0 {
                continue;
            }
            for idx in offsets[i]..offsets[i + 1] {
                oc[cols[idx]] += vals[idx] * xi;
            }
        }
    }
    out
}

pub fn mul_vec(a: &SparseMatrix, x: &DVector<f64>) -> DVector<f64> {
    let m = mul_dense(a, &DMatrix::from_column_slice(x.len(), 1, x.as_slice()));
    DVector::from_column_slice(m.as_slice())
}

/// Extract `a[rows, cols]` as a new sparse matrix.
pub fn submatrix(a: &SparseMatrix, rows: &[usize], cols: &[usize]) -> SparseMatrix {
    let mut col_map = vec![usize::MAX; a.ncols()];
    for (local, &c) in cols.iter().enumerate() {
        col_map[c] = local;
    }
    let mut trip = Vec::new();
    for (li, &r) in rows.iter().enumerate() {
        let row = a.row(r);
        for (&c, &v) in row.col_indices().iter().zip(row.values()) {
            let lc = col_map[c];
            if lc != usize::MAX {
                trip.push((li, lc, v));
            }
        }
    }
    from_triplets(rows.len(), cols.len(), trip)
}

pub fn to_dense(a: &SparseMatrix) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(a.nrows(), a.ncols());
    for (i, j, v) in a.triplet_iter() {
        d[(i, j)] += *v;
    }
    d
}

pub fn max_abs(a: &SparseMatrix) -> f64 {
    a.values().iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// `max |a - aᵀ|` over all entries.
pub fn symmetry_defect(a: &SparseMatrix) -> f64 {
    let at = a.transpose();
    let d = a - &at;
    max_abs(&d)
}

/// Reverse Cuthill-McKee ordering of the symmetrized sparsity pattern.
/// Returns `perm` with `perm[new] = old`.
pub fn rcm_ordering(a: &SparseMatrix) -> Vec<usize> {
    let n = a.nrows();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, j, _) in a.triplet_iter() {
        if i != j {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for nb in adj.iter_mut() {
        nb.sort_unstable();
        nb.dedup();
    }
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();

    let bfs_levels = |start: usize, mask: &[bool]| -> (Vec<usize>, usize) {
        // returns (last level nodes, eccentricity)
        let mut level = vec![usize::MAX; n];
        level[start] = 0;
        let mut queue = VecDeque::from([start]);
        let mut last = vec![start];
        let mut depth = 0;
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if !mask[w] && level[w] == usize::MAX {
                    level[w] = level[v] + 1;
                    if level[w] > depth {
                        depth = level[w];
                        last.clear();
                    }
                    if level[w] == depth {
                        last.push(w);
                    }
                    queue.push_back(w);
                }
            }
        }
        (last, depth)
    };

    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    loop {
        // unvisited node of minimum degree starts the next component
        let Some(mut start) = (0..n)
            .filter(|&v| !visited[v])
            .min_by_key(|&v| (degree[v], v))
        else {
            break;
        };
        // pseudo-peripheral node search
        let (mut last, mut ecc) = bfs_levels(start, &visited);
        loop {
            let cand = *last.iter().min_by_key(|&&v| (degree[v], v)).unwrap();
            let (l2, e2) = bfs_levels(cand, &visited);
            if e2 > ecc {
                start = cand;
                last = l2;
                ecc = e2;
            } else {
                break;
            }
        }
        visited[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nbrs: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            nbrs.sort_by_key(|&w| (degree[w], w));
            for w in nbrs {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

/// Cholesky factorization `P·A·Pᵀ = L·Lᵀ` of a sparse symmetric positive
/// definite matrix, with `P` the reverse Cuthill-McKee permutation.
///
/// Equivalently `A = L_A·L_Aᵀ` with the (non-triangular) factor
/// `L_A = Pᵀ·L`; [`SparseCholesky::factor_tr_mul`] and
/// [`SparseCholesky::factor_solve`] apply `L_Aᵀ` and `L_A⁻¹`.
#[derive(Clone, Debug)]
pub struct SparseCholesky {
    n: usize,
    /// `perm[new] = old`
    perm: Vec<usize>,
    /// first stored column of each row of `L`
    first: Vec<usize>,
    /// offset of each row's envelope in `values`
    offset: Vec<usize>,
    values: Vec<f64>,
}

impl SparseCholesky {
    pub fn factor(a: &SparseMatrix) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "Cholesky of a {}x{} matrix",
                a.nrows(),
                a.ncols()
            )));
        }
        let perm = rcm_ordering(a);
        Self::factor_with_ordering(a, perm)
    }

    pub fn factor_with_ordering(a: &SparseMatrix, perm: Vec<usize>) -> Result<Self> {
        let n = a.nrows();
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for (i, j, _) in a.triplet_iter() {
            let (pi, pj) = (inv[i], inv[j]);
            let (r, c) = if pi >= pj { (pi, pj) } else { (pj, pi) };
            first[r] = first[r].min(c);
        }
        let mut offset = Vec::with_capacity(n + 1);
        let mut total = 0usize;
        for i in 0..n {
            offset.push(total);
            total += i - first[i] + 1;
        }
        offset.push(total);
        let mut values = vec![0.0; total];
        // scatter lower triangle of P A Pᵀ (both triangles of A land here)
        for (i, j, v) in a.triplet_iter() {
            let (pi, pj) = (inv[i], inv[j]);
            if pi >= pj {
                values[offset[pi] + pj - first[pi]] += *v;
            }
        }

        for i in 0..n {
            let fi = first[i];
            let oi = offset[i];
            for j in fi..i {
                let fj = first[j];
                let oj = offset[j];
                let k0 = fi.max(fj);
                let mut s = values[oi + j - fi];
                let ri = &values[oi + k0 - fi..oi + j - fi];
                let rj = &values[oj + k0 - fj..oj + j - fj];
                s -= ri.iter().zip(rj).map(|(a, b)| a * b).sum::<f64>();
                let djj = values[oj + j - fj];
                values[oi + j - fi] = s / djj;
            }
            let row = &values[oi..oi + i - fi];
            let d = values[oi + i - fi] - row.iter().map(|x| x * x).sum::<f64>();
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: i, value: d });
            }
            values[oi + i - fi] = d.sqrt();
        }
        Ok(Self {
            n,
            perm,
            first,
            offset,
            values,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.values[self.offset[i]..self.offset[i + 1]]
    }

    fn permute(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, x.ncols(), |i, j| x[(self.perm[i], j)])
    }

    fn unpermute(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, y.ncols());
        for j in 0..y.ncols() {
            for i in 0..self.n {
                out[(self.perm[i], j)] = y[(i, j)];
            }
        }
        out
    }

    fn forward_in_place(&self, col: &mut [f64]) {
        for i in 0..self.n {
            let fi = self.first[i];
            let row = self.row(i);
            let s: f64 = row[..i - fi]
                .iter()
                .zip(&col[fi..i])
                .map(|(a, b)| a * b)
                .sum();
            col[i] = (col[i] - s) / row[i - fi];
        }
    }

    fn backward_in_place(&self, col: &mut [f64]) {
        for i in (0..self.n).rev() {
            let fi = self.first[i];
            let row = self.row(i);
            let xi = col[i] / row[i - fi];
            col[i] = xi;
            if xi != 0.0 {
                for (c, l) in col[fi..i].iter_mut().zip(&row[..i - fi]) {
                    *c -= l * xi;
                }
            }
        }
    }

    fn dims_check(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.nrows() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "right-hand side has {} rows, factor has {}",
                x.nrows(),
                self.n
            )));
        }
        Ok(())
    }

    /// `A⁻¹·b` for a block of right-hand sides.
    pub fn solve(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.dims_check(b)?;
        let mut y = self.permute(b);
        if self.n > 0 {
            y.as_mut_slice().par_chunks_mut(self.n).for_each(|col| {
                self.forward_in_place(col);
                self.backward_in_place(col);
            });
        }
        Ok(self.unpermute(&y))
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let m = self.solve(&DMatrix::from_column_slice(b.len(), 1, b.as_slice()))?;
        Ok(DVector::from_column_slice(m.as_slice()))
    }

    /// `L_Aᵀ·x = Lᵀ·(P·x)`.
    pub fn factor_tr_mul(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.dims_check(x)?;
        let px = self.permute(x);
        let mut out = DMatrix::zeros(self.n, x.ncols());
        for c in 0..x.ncols() {
            let src = px.column(c);
            let mut dst = out.column_mut(c);
            for i in 0..self.n {
                let fi = self.first[i];
                let xi = src[i];
                if xi == 0.0 {
                    continue;
                }
                for (k, l) in self.row(i).iter().enumerate() {
                    dst[fi + k] += l * xi;
                }
            }
        }
        Ok(out)
    }

    /// `L_A⁻¹·x = L⁻¹·(P·x)`.
    pub fn factor_solve(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.dims_check(x)?;
        let mut y = self.permute(x);
        if self.n > 0 {
            y.as_mut_slice()
                .par_chunks_mut(self.n)
                .for_each(|col| self.forward_in_place(col));
        }
        Ok(y)
    }

    /// Dense `L_A = Pᵀ·L` (small problems and tests only).
    pub fn dense_factor(&self) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            let fi = self.first[i];
            for (k, v) in self.row(i).iter().enumerate() {
                l[(i, fi + k)] = *v;
            }
        }
        self.unpermute(&l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_1d(n: usize) -> SparseMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
        }
        from_triplets(n, n, t)
    }

    fn grid_laplacian(m: usize) -> SparseMatrix {
        let idx = |i: usize, j: usize| i * m + j;
        let mut t = Vec::new();
        for i in 0..m {
            for j in 0..m {
                t.push((idx(i, j), idx(i, j), 4.5));
                if i + 1 < m {
                    t.push((idx(i, j), idx(i + 1, j), -1.0));
                    t.push((idx(i + 1, j), idx(i, j), -1.0));
                }
                if j + 1 < m {
                    t.push((idx(i, j), idx(i, j + 1), -1.0));
                    t.push((idx(i, j + 1), idx(i, j), -1.0));
                }
            }
        }
        from_triplets(m * m, m * m, t)
    }

    #[test]
    fn rcm_is_a_permutation() {
        let a = grid_laplacian(7);
        let mut p = rcm_ordering(&a);
        p.sort_unstable();
        assert_eq!(p, (0..49).collect::<Vec<_>>());
    }

    #[test]
    fn solve_matches_dense() {
        let a = grid_laplacian(9);
        let chol = SparseCholesky::factor(&a).unwrap();
        let b = DMatrix::from_fn(81, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        let x = chol.solve(&b).unwrap();
        let r = mul_dense(&a, &x) - &b;
        assert!(r.amax() < 1e-12);
    }

    #[test]
    fn permuted_factor_reproduces_matrix() {
        let a = grid_laplacian(6);
        let chol = SparseCholesky::factor(&a).unwrap();
        let la = chol.dense_factor();
        let diff = &la * la.transpose() - to_dense(&a);
        assert!(diff.amax() < 1e-12);
        let x = DMatrix::from_fn(36, 2, |i, j| (i as f64).sin() + j as f64);
        let y1 = chol.factor_tr_mul(&x).unwrap();
        assert!((y1 - la.transpose() * &x).amax() < 1e-12);
        let y2 = chol.factor_solve(&x).unwrap();
        assert!((&la * y2 - &x).amax() < 1e-12);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let mut a = laplacian_1d(5);
        for (i, j, v) in a.triplet_iter_mut() {
            if i == 3 && j == 3 {
                *v = -1.0;
            }
        }
        assert!(matches!(
            SparseCholesky::factor(&a),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn galerkin_product() {
        let a = laplacian_1d(4);
        let p = from_triplets(4, 2, [(0, 0, 1.0), (1, 0, 0.5), (1, 1, 0.5), (2, 1, 1.0)]);
        let g = to_dense(&galerkin(&a, &p));
        let pd = to_dense(&p);
        let expect = pd.transpose() * to_dense(&a) * &pd;
        assert!((g - expect).amax() < 1e-15);
        let x = DMatrix::from_fn(4, 2, |i, j| (i + 2 * j) as f64);
        assert!((tr_mul_dense(&p, &x) - pd.transpose() * &x).amax() < 1e-15);
    }
}
