//! Compressed sparse row matrices and Jacobi-preconditioned Krylov solvers.

use crate::error::{Error, Result};

/// Square or rectangular sparse matrix in CSR layout.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from `(row, col, value)` triplets, summing duplicates.
    ///
    /// Triplets are sorted on the full key (row, column, value) before
    /// reduction, so the result is bit-identical for any permutation of the
    /// input.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self> {
        for (k, &(r, c, _)) in triplets.iter().enumerate() {
            if r >= nrows || c >= ncols {
                return Err(Error::InvalidArgument(format!(
                    "triplet {k} at ({r}, {c}) outside {nrows}x{ncols} matrix"
                )));
            }
        }
        let mut sorted = triplets.to_vec();
        sorted.sort_unstable_by(|a, b| {
            (a.0, a.1)
                .cmp(&(b.0, b.1))
                .then_with(|| a.2.total_cmp(&b.2))
        });

        let mut row_offsets = vec![0usize; nrows + 1];
        let mut col_indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for &(r, c, v) in &sorted {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_indices.push(c);
                values.push(v);
                row_offsets[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..nrows {
            row_offsets[r + 1] += row_offsets[r];
        }
        Ok(Self {
            nrows,
            ncols,
            row_offsets,
            col_indices,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: vec![1.0; n],
        }
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

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Iterates `(col, value)` pairs of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_offsets[r]..self.row_offsets[r + 1];
        self.col_indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.row_offsets[r]..self.row_offsets[r + 1];
        match self.col_indices[span.clone()].binary_search(&c) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).collect()
    }

    /// `y = A x`, accumulated sequentially within each row.
    pub fn spmv(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = vec![0.0; self.nrows];
        self.spmv_into(x, &mut y)?;
        Ok(y)
    }

    pub fn spmv_into(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        if x.len() != self.ncols {
            return Err(Error::DimensionMismatch {
                context: "spmv input",
                expected: self.ncols,
                actual: x.len(),
            });
        }
        if y.len() != self.nrows {
            return Err(Error::DimensionMismatch {
                context: "spmv output",
                expected: self.nrows,
                actual: y.len(),
            });
        }
        for (r, out) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_offsets[r]..self.row_offsets[r + 1] {
                acc += self.values[k] * x[self.col_indices[k]];
            }
            *out = acc;
        }
        Ok(())
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut counts = vec![0usize; self.ncols + 1];
        for &c in &self.col_indices {
            counts[c + 1] += 1;
        }
        for c in 0..self.ncols {
            counts[c + 1] += counts[c];
        }
        let row_offsets = counts.clone();
        let mut next = counts;
        let mut col_indices = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for r in 0..self.nrows {
            for k in self.row_offsets[r]..self.row_offsets[r + 1] {
                let c = self.col_indices[k];
                let slot = next[c];
                col_indices[slot] = r;
                values[slot] = self.values[k];
                next[c] += 1;
            }
        }
        CsrMatrix {
            nrows: self.ncols,
            ncols: self.nrows,
            row_offsets,
            col_indices,
            values,
        }
    }

    /// Keeps the listed rows and columns, in the given order.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> CsrMatrix {
        let mut col_map = vec![usize::MAX; self.ncols];
        for (new, &old) in cols.iter().enumerate() {
            col_map[old] = new;
        }
        let mut row_offsets = Vec::with_capacity(rows.len() + 1);
        row_offsets.push(0);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for &r in rows {
            scratch.clear();
            for (c, v) in self.row(r) {
                let nc = col_map[c];
                if nc != usize::MAX {
                    scratch.push((nc, v));
                }
            }
            scratch.sort_unstable_by_key(|e| e.0);
            for &(c, v) in &scratch {
                col_indices.push(c);
                values.push(v);
            }
            row_offsets.push(col_indices.len());
        }
        CsrMatrix {
            nrows: rows.len(),
            ncols: cols.len(),
            row_offsets,
            col_indices,
            values,
        }
    }

    pub fn scaled(&self, s: f64) -> CsrMatrix {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        out
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for (r, row) in d.iter_mut().enumerate() {
            for (c, v) in self.row(r) {
                row[c] = v;
            }
        }
        d
    }

    /// Structural validation of the CSR invariants.
    pub fn check(&self) -> Result<()> {
        if self.row_offsets.len() != self.nrows + 1
            || self.row_offsets[0] != 0
            || *self.row_offsets.last().unwrap() != self.values.len()
            || self.col_indices.len() != self.values.len()
        {
            return Err(Error::InvalidArgument("malformed row offsets".into()));
        }
        for r in 0..self.nrows {
            let span = self.row_offsets[r]..self.row_offsets[r + 1];
            if span.start > span.end {
                return Err(Error::InvalidArgument(format!("row {r} offsets decrease")));
            }
            let cols = &self.col_indices[span];
            if cols.windows(2).any(|w| w[0] >= w[1]) || cols.iter().any(|&c| c >= self.ncols) {
                return Err(Error::InvalidArgument(format!("row {r} columns unsorted or out of range")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverMethod {
    Cg,
    BiCgStab,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Solves `A x = b` to relative residual `tol` with a Jacobi-preconditioned
/// Krylov method, starting from zero.
pub fn solve(
    a: &CsrMatrix,
    b: &[f64],
    method: SolverMethod,
    tol: f64,
    max_iter: usize,
) -> Result<Solution> {
    if a.nrows() != a.ncols() {
        return Err(Error::InvalidArgument(format!(
            "solve needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if b.len() != a.nrows() {
        return Err(Error::DimensionMismatch {
            context: "solve right-hand side",
            expected: a.nrows(),
            actual: b.len(),
        });
    }
    let inv_diag: Vec<f64> = a
        .diagonal()
        .into_iter()
        .map(|d| if d != 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let b_norm = norm(b);
    if b_norm == 0.0 {
        return Ok(Solution {
            x: vec![0.0; b.len()],
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    match method {
        SolverMethod::Cg => pcg(a, b, &inv_diag, b_norm, tol, max_iter),
        SolverMethod::BiCgStab => pbicgstab(a, b, &inv_diag, b_norm, tol, max_iter),
    }
}

fn pcg(
    a: &CsrMatrix,
    b: &[f64],
    inv_diag: &[f64],
    b_norm: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Solution> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut rel = 1.0;
    for it in 1..=max_iter {
        a.spmv_into(&p, &mut ap)?;
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        rel = norm(&r) / b_norm;
        if rel <= tol {
            return Ok(Solution {
                x,
                iterations: it,
                relative_residual: rel,
            });
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::ConvergenceFailure {
        iterations: max_iter,
        residual: rel,
    })
}

const DRIFT_FACTOR: f64 = 1e3;

fn pbicgstab(
    a: &CsrMatrix,
    b: &[f64],
    inv_diag: &[f64],
    b_norm: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Solution> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut rel = 1.0;
    let mut it = 0;
    let mut best_x = x.clone();
    let mut best_rel = 1.0;
    // restarted whenever the recurrence breaks down or the residual drifts
    // far above its running minimum, both of which happen on indefinite
    // (Helmholtz-type) systems; a drift restart resumes from the best iterate
    'restart: while it < max_iter {
        a.spmv_into(&x, &mut t)?;
        for i in 0..n {
            r[i] = b[i] - t[i];
        }
        let r_hat = r.clone();
        let r_hat_norm = norm(&r_hat);
        let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
        v.iter_mut().for_each(|e| *e = 0.0);
        p.iter_mut().for_each(|e| *e = 0.0);
        let mut fresh = true;
        while it < max_iter {
            it += 1;
            let rho_new = dot(&r_hat, &r);
            if rho_new.abs() <= 1e-30 * r_hat_norm * norm(&r) && !fresh {
                continue 'restart;
            }
            fresh = false;
            let beta = (rho_new / rho) * (alpha / omega);
            rho = rho_new;
            for i in 0..n {
                p[i] = r[i] + beta * (p[i] - omega * v[i]);
                y[i] = p[i] * inv_diag[i];
            }
            a.spmv_into(&y, &mut v)?;
            let rv = dot(&r_hat, &v);
            if rv == 0.0 || !rv.is_finite() {
                continue 'restart;
            }
            alpha = rho / rv;
            for i in 0..n {
                s[i] = r[i] - alpha * v[i];
            }
            let s_rel = norm(&s) / b_norm;
            if s_rel <= tol {
                for i in 0..n {
                    x[i] += alpha * y[i];
                }
                return Ok(Solution {
                    x,
                    iterations: it,
                    relative_residual: s_rel,
                });
            }
            for i in 0..n {
                z[i] = s[i] * inv_diag[i];
            }
            a.spmv_into(&z, &mut t)?;
            let tt = dot(&t, &t);
            omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
            for i in 0..n {
                x[i] += alpha * y[i] + omega * z[i];
                r[i] = s[i] - omega * t[i];
            }
            rel = norm(&r) / b_norm;
            if rel < best_rel {
                best_rel = rel;
                best_x.copy_from_slice(&x);
            } else if !rel.is_finite() || rel > DRIFT_FACTOR * best_rel {
                x.copy_from_slice(&best_x);
                rel = best_rel;
                continue 'restart;
            }
            if rel <= tol {
                return Ok(Solution {
                    x,
                    iterations: it,
                    relative_residual: rel,
                });
            }
            if omega == 0.0 {
                continue 'restart;
            }
        }
    }
    Err(Error::ConvergenceFailure {
        iterations: max_iter,
        residual: rel,
    })
}
