//! One-sided (Hestenes) Jacobi SVD for the tiny matrices that appear when a
//! tableau is set up. Not intended for anything larger than 16x16.

use super::{dot, DenseMatrix, LinalgError};

const MAX_SWEEPS: usize = 100;

/// `K = U diag(singular_values) V^T` with square orthonormal `U` (`m x m`)
/// and `V` (`n x n`). Singular values are non-negative and descending.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: DenseMatrix,
    pub v: DenseMatrix,
    pub singular_values: Vec<f64>,
}

impl SvdResult {
    /// `U diag(sigma) V^T`, rebuilt from the factors.
    pub fn reconstruct(&self) -> DenseMatrix {
        let (m, n) = (self.u.rows(), self.v.rows());
        DenseMatrix::from_fn(m, n, |i, j| {
            self.singular_values
                .iter()
                .enumerate()
                .map(|(k, s)| self.u[(i, k)] * s * self.v[(j, k)])
                .sum()
        })
    }
}

/// Full SVD of a small `m x n` matrix.
///
/// Columns are sign-normalized so that the first nonzero entry of every
/// column of `U` is positive (the matching `V` column flips with it), which
/// makes the factors reproducible.
pub fn svd_small(k: &DenseMatrix) -> Result<SvdResult, LinalgError> {
    if !k.is_finite() {
        let pos = k.as_slice().iter().position(|v| !v.is_finite()).unwrap_or(0);
        return Err(LinalgError::NonFinite { row: pos / k.cols().max(1), col: pos % k.cols().max(1) });
    }
    if k.rows() >= k.cols() {
        tall_svd(k)
    } else {
        let t = tall_svd(&k.transpose())?;
        let mut out = SvdResult { u: t.v, v: t.u, singular_values: t.singular_values };
        normalize_signs(&mut out);
        Ok(out)
    }
}

fn tall_svd(k: &DenseMatrix) -> Result<SvdResult, LinalgError> {
    let (m, n) = (k.rows(), k.cols());
    // Work on columns: cols[j] is column j of the iterated matrix.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| k.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let eps = f64::EPSILON;
    let mut converged = n < 2;
    let mut sweeps = 0;
    while !converged {
        if sweeps == MAX_SWEEPS {
            return Err(LinalgError::NoConvergence { sweeps });
        }
        sweeps += 1;
        converged = true;
        for i in 0..n - 1 {
            for j in i + 1..n {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                let gamma = dot(&cols[i], &cols[j]);
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                converged = false;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, i, j, c, s);
                rotate(&mut vcols, i, j, c, s);
            }
        }
    }

    let mut order: Vec<(f64, usize)> = cols.iter().enumerate().map(|(j, c)| (dot(c, c).sqrt(), j)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let scale = order.first().map_or(0.0, |o| o.0);
    let tiny = scale * eps * (m.max(n) as f64);

    let mut u = DenseMatrix::zeros(m, m);
    let mut v = DenseMatrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    for (slot, &(s, j)) in order.iter().enumerate() {
        for r in 0..n {
            v[(r, slot)] = vcols[j][r];
        }
        if s > tiny && s > 0.0 {
            sigma.push(s);
            basis.push(cols[j].iter().map(|x| x / s).collect());
        } else {
            sigma.push(0.0);
        }
    }
    complete_basis(&mut basis, m);
    for (c, col) in basis.iter().enumerate() {
        for r in 0..m {
            u[(r, c)] = col[r];
        }
    }
    let mut out = SvdResult { u, v, singular_values: sigma };
    normalize_signs(&mut out);
    Ok(out)
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(j);
    let (a, b) = (&mut lo[i], &mut hi[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// Extends an orthonormal set to a basis of R^m by Gram-Schmidt over the
/// unit vectors, orthogonalizing twice.
fn complete_basis(basis: &mut Vec<Vec<f64>>, m: usize) {
    let mut e = 0;
    while basis.len() < m && e < m {
        let mut cand: Vec<f64> = (0..m).map(|i| if i == e { 1.0 } else { 0.0 }).collect();
        e += 1;
        for _ in 0..2 {
            for b in basis.iter() {
                let p = dot(b, &cand);
                for (c, bi) in cand.iter_mut().zip(b) {
                    *c -= p * bi;
                }
            }
        }
        let nrm = dot(&cand, &cand).sqrt();
        if nrm > 1e-8 {
            basis.push(cand.into_iter().map(|x| x / nrm).collect());
        }
    }
}

fn first_nonzero_is_negative(col: impl Iterator<Item = f64>) -> bool {
    col.into_iter().find(|x| x.abs() > 1e-14).is_some_and(|x| x < 0.0)
}

fn normalize_signs(r: &mut SvdResult) {
    let (m, n) = (r.u.rows(), r.v.rows());
    let paired = r.singular_values.len();
    for c in 0..m {
        if first_nonzero_is_negative((0..m).map(|i| r.u[(i, c)])) {
            for i in 0..m {
                r.u[(i, c)] = -r.u[(i, c)];
            }
            if c < paired {
                for i in 0..n {
                    r.v[(i, c)] = -r.v[(i, c)];
                }
            }
        }
    }
    // Unpaired V columns only span the null space; normalize them on their own.
    for c in paired..n {
        if first_nonzero_is_negative((0..n).map(|i| r.v[(i, c)])) {
            for i in 0..n {
                r.v[(i, c)] = -r.v[(i, c)];
            }
        }
    }
}
