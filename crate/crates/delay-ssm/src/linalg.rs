//! Internal dense/sparse linear-algebra helpers shared across the crate.
//!
//! Dense eigendecompositions and LU solves go through LAPACK (via ndarray-linalg);
//! the chain matrix itself is kept in CSR form for cheap right-hand-side and
//! Jacobian evaluation. Everything here is deterministic: eigenpairs are sorted
//! with total-order tie-breaks and eigenvectors get a fixed normalization, so
//! repeated runs produce bit-identical downstream output.

use anyhow::{anyhow, Context, Result};
use ndarray::{Array1, Array2, ArrayView1};
use ndarray_linalg::{Eig, Solve};
use num_complex::Complex64;

/// Compressed sparse row matrix over f64.
///
/// Minimal by design: construction from triplets (duplicates summed), real and
/// complex mat-vec, and densification for LAPACK consumption.
#[derive(Debug, Clone)]
pub(crate) struct Csr {
    pub nrows: usize,
    pub ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl Csr {
    /// Build from (row, col, value) triplets; duplicate entries are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut entries: Vec<(usize, usize, f64)> = triplets.to_vec();
        entries.sort_by_key(|&(r, c, _)| (r, c));
        // Merge duplicates.
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(entries.len());
        for (r, c, v) in entries {
            assert!(r < nrows && c < ncols, "triplet ({r},{c}) out of bounds");
            match merged.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => merged.push((r, c, v)),
            }
        }
        let mut row_ptr = vec![0usize; nrows + 1];
        for &(r, _, _) in &merged {
            row_ptr[r + 1] += 1;
        }
        for i in 0..nrows {
            row_ptr[i + 1] += row_ptr[i];
        }
        let col_idx = merged.iter().map(|&(_, c, _)| c).collect();
        let vals = merged.iter().map(|&(_, _, v)| v).collect();
        Self { nrows, ncols, row_ptr, col_idx, vals }
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// y = A x for real x.
    pub fn matvec(&self, x: ArrayView1<f64>) -> Array1<f64> {
        assert_eq!(x.len(), self.ncols);
        let mut y = Array1::zeros(self.nrows);
        for r in 0..self.nrows {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * x[self.col_idx[k]];
            }
            y[r] = acc;
        }
        y
    }

    /// y = A x for complex x (A is real).
    pub fn matvec_complex(&self, x: ArrayView1<Complex64>) -> Array1<Complex64> {
        assert_eq!(x.len(), self.ncols);
        let mut y = Array1::zeros(self.nrows);
        for r in 0..self.nrows {
            let mut acc = Complex64::new(0.0, 0.0);
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += x[self.col_idx[k]] * self.vals[k];
            }
            y[r] = acc;
        }
        y
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.nrows, self.ncols));
        for r in 0..self.nrows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                a[[r, self.col_idx[k]]] += self.vals[k];
            }
        }
        a
    }

    /// Iterate stored entries as (row, col, value).
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |r| {
            (self.row_ptr[r]..self.row_ptr[r + 1])
                .map(move |k| (r, self.col_idx[k], self.vals[k]))
        })
    }
}

/// Infinity norm (max absolute row sum) of a dense real matrix.
pub(crate) fn inf_norm(a: &Array2<f64>) -> f64 {
    a.rows()
        .into_iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Full eigendecomposition of a dense real matrix, sorted by descending real
/// part with ties broken by descending |Im| then descending Im (deterministic
/// total order). Returns (eigenvalues, right eigenvectors as columns).
///
/// Each eigenvector is normalized to unit Euclidean norm with its
/// largest-magnitude entry rotated to the positive real axis, so the output is
/// independent of LAPACK's internal phase choices.
pub(crate) fn eig_sorted(a: &Array2<f64>) -> Result<(Array1<Complex64>, Array2<Complex64>)> {
    let (vals, vecs) = a.eig().context("dense eigendecomposition failed")?;
    let n = vals.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        vals[j]
            .re
            .total_cmp(&vals[i].re)
            .then(vals[j].im.abs().total_cmp(&vals[i].im.abs()))
            .then(vals[j].im.total_cmp(&vals[i].im))
    });
    let mut sorted_vals = Array1::zeros(n);
    let mut sorted_vecs = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        sorted_vals[dst] = vals[src];
        let v = normalize_eigvec(&vecs.column(src).to_owned());
        sorted_vecs.column_mut(dst).assign(&v);
    }
    Ok((sorted_vals, sorted_vecs))
}

/// Normalize to unit 2-norm with the largest-magnitude entry real and positive.
pub(crate) fn normalize_eigvec(v: &Array1<Complex64>) -> Array1<Complex64> {
    let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    assert!(norm > 0.0, "zero eigenvector");
    let mut idx = 0;
    let mut best = 0.0;
    for (i, z) in v.iter().enumerate() {
        let m = z.norm();
        if m > best {
            best = m;
            idx = i;
        }
    }
    let phase = v[idx] / v[idx].norm();
    v.mapv(|z| z * phase.conj() / norm)
}

/// Solve the bordered system
///   [ B   c ] [x]   [rhs]
///   [ rᵀ  0 ] [μ] = [ s ]
/// where B is dim×dim complex, c a column border, r a row border (applied as a
/// plain dot product — pass conj(u) to impose u*·x = s). Returns (x, μ).
///
/// Used for homological equations at inner resonances and for the
/// non-autonomous correction, where B is singular (or nearly so) exactly in the
/// master direction; the border removes that null direction and keeps the solve
/// well conditioned.
pub(crate) fn bordered_solve(
    b: &Array2<Complex64>,
    col: &Array1<Complex64>,
    row: &Array1<Complex64>,
    rhs: &Array1<Complex64>,
    s: Complex64,
) -> Result<(Array1<Complex64>, Complex64)> {
    let dim = b.nrows();
    assert_eq!(b.ncols(), dim);
    assert_eq!(col.len(), dim);
    assert_eq!(row.len(), dim);
    assert_eq!(rhs.len(), dim);
    let mut m = Array2::zeros((dim + 1, dim + 1));
    m.slice_mut(ndarray::s![..dim, ..dim]).assign(b);
    for i in 0..dim {
        m[[i, dim]] = col[i];
        m[[dim, i]] = row[i];
    }
    let mut full_rhs = Array1::zeros(dim + 1);
    full_rhs.slice_mut(ndarray::s![..dim]).assign(rhs);
    full_rhs[dim] = s;
    let sol = m.solve(&full_rhs).context("bordered solve failed")?;
    let x = sol.slice(ndarray::s![..dim]).to_owned();
    Ok((x, sol[dim]))
}

/// All roots of a real polynomial Σ coeffs[k]·x^k (ascending degree) via the
/// companion matrix. Near-zero leading coefficients (relative to the largest
/// coefficient) are stripped before forming the companion matrix.
pub(crate) fn poly_roots(coeffs: &[f64]) -> Result<Vec<Complex64>> {
    let max_c = coeffs.iter().map(|c| c.abs()).fold(0.0, f64::max);
    if max_c == 0.0 {
        return Err(anyhow!("zero polynomial has no isolated roots"));
    }
    let mut c: Vec<f64> = coeffs.to_vec();
    while let Some(&last) = c.last() {
        if last.abs() <= 1e-14 * max_c && c.len() > 1 {
            c.pop();
        } else {
            break;
        }
    }
    let deg = c.len() - 1;
    if deg == 0 {
        return Ok(Vec::new());
    }
    if deg == 1 {
        return Ok(vec![Complex64::new(-c[0] / c[1], 0.0)]);
    }
    let lead = c[deg];
    let mut comp = Array2::zeros((deg, deg));
    for i in 1..deg {
        comp[[i, i - 1]] = 1.0;
    }
    for i in 0..deg {
        comp[[i, deg - 1]] = -c[i] / lead;
    }
    let (vals, _) = comp.eig().context("companion eigendecomposition failed")?;
    Ok(vals.to_vec())
}

/// Least-squares slope of ln(y) against ln(x).
pub(crate) fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "need at least two points for a slope");
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..lx.len() {
        num += (lx[i] - mx) * (ly[i] - my);
        den += (lx[i] - mx) * (lx[i] - mx);
    }
    num / den
}
