use std::cell::Cell;

use super::{DenseMatrix, LinalgError};

/// Pivots smaller than this fraction of their original row's magnitude are
/// treated as zero.
const PIVOT_THRESHOLD: f64 = 1e-14;

thread_local! {
    static FACTORIZATIONS: Cell<usize> = const { Cell::new(0) };
}

/// Number of LU factorizations performed on the current thread so far.
///
/// Used to verify how many `d x d` factorizations a structured solve needs;
/// take the difference of two readings around the code of interest.
pub fn lu_factorization_count() -> usize {
    FACTORIZATIONS.with(Cell::get)
}

/// `PA = LU` with partial pivoting. `L` is unit lower triangular and shares
/// storage with `U`.
#[derive(Debug, Clone)]
pub struct LuFactorization {
    lu: DenseMatrix,
    pivots: Vec<usize>,
    sign: f64,
}

/// Factorizes a square matrix with row partial pivoting.
pub fn lu_decompose(m: &DenseMatrix) -> Result<LuFactorization, LinalgError> {
    if !m.is_square() {
        return Err(LinalgError::NotSquare { rows: m.rows(), cols: m.cols() });
    }
    if let Some(pos) = m.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite { row: pos / m.cols(), col: pos % m.cols() });
    }
    FACTORIZATIONS.with(|c| c.set(c.get() + 1));

    let n = m.rows();
    let mut lu = m.clone();
    let mut pivots: Vec<usize> = (0..n).collect();
    let mut scales: Vec<f64> = (0..n).map(|i| lu.row(i).iter().fold(0.0, |a: f64, v| a.max(v.abs()))).collect();
    let mut sign = 1.0;

    for k in 0..n {
        let (p, pmax) = (k..n)
            .map(|i| (i, lu[(i, k)].abs()))
            .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pmax == 0.0 || pmax < PIVOT_THRESHOLD * scales[p] {
            return Err(LinalgError::SingularMatrix { column: k, pivot: pmax });
        }
        if p != k {
            for j in 0..n {
                let tmp = lu[(k, j)];
                lu[(k, j)] = lu[(p, j)];
                lu[(p, j)] = tmp;
            }
            pivots.swap(k, p);
            scales.swap(k, p);
            sign = -sign;
        }
        let pivot = lu[(k, k)];
        for i in k + 1..n {
            let factor = lu[(i, k)] / pivot;
            lu[(i, k)] = factor;
            if factor != 0.0 {
                for j in k + 1..n {
                    lu[(i, j)] = (-factor).mul_add(lu[(k, j)], lu[(i, j)]);
                }
            }
        }
    }
    Ok(LuFactorization { lu, pivots, sign })
}

impl LuFactorization {
    #[inline]
    pub fn dim(&self) -> usize {
        self.lu.rows()
    }

    /// Row permutation: row `i` of `PA` is row `pivots()[i]` of `A`.
    pub fn pivots(&self) -> &[usize] {
        &self.pivots
    }

    /// Parity of the permutation, `+1.0` or `-1.0`.
    pub fn sign(&self) -> f64 {
        self.sign
    }

    /// Combined `L\U` storage.
    pub fn packed(&self) -> &DenseMatrix {
        &self.lu
    }

    pub fn determinant(&self) -> f64 {
        (0..self.dim()).fold(self.sign, |d, i| d * self.lu[(i, i)])
    }

    /// Solves `A x = b` for one right-hand side, overwriting `b` with `x`.
    ///
    /// `scratch` must have the factorization's dimension.
    pub fn solve_in_place(&self, b: &mut [f64], scratch: &mut [f64]) -> Result<(), LinalgError> {
        let n = self.dim();
        if b.len() != n {
            return Err(LinalgError::DimensionMismatch { expected: n, found: b.len() });
        }
        if scratch.len() != n {
            return Err(LinalgError::DimensionMismatch { expected: n, found: scratch.len() });
        }
        for (s, &p) in scratch.iter_mut().zip(&self.pivots) {
            *s = b[p];
        }
        for i in 0..n {
            let row = self.lu.row(i);
            let mut acc = scratch[i];
            for j in 0..i {
                acc = (-row[j]).mul_add(scratch[j], acc);
            }
            scratch[i] = acc;
        }
        for i in (0..n).rev() {
            let row = self.lu.row(i);
            let mut acc = scratch[i];
            for j in i + 1..n {
                acc = (-row[j]).mul_add(scratch[j], acc);
            }
            scratch[i] = acc / row[i];
        }
        b.copy_from_slice(scratch);
        Ok(())
    }

    pub fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        let mut x = b.to_vec();
        let mut scratch = vec![0.0; self.dim()];
        self.solve_in_place(&mut x, &mut scratch)?;
        Ok(x)
    }

    /// Solves `A X = B` column by column.
    pub fn solve_matrix(&self, rhs: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
        let n = self.dim();
        if rhs.rows() != n {
            return Err(LinalgError::DimensionMismatch { expected: n, found: rhs.rows() });
        }
        let mut out = DenseMatrix::zeros(n, rhs.cols());
        let mut col = vec![0.0; n];
        let mut scratch = vec![0.0; n];
        for j in 0..rhs.cols() {
            for i in 0..n {
                col[i] = rhs[(i, j)];
            }
            self.solve_in_place(&mut col, &mut scratch)?;
            for i in 0..n {
                out[(i, j)] = col[i];
            }
        }
        Ok(out)
    }

    pub fn inverse(&self) -> DenseMatrix {
        self.solve_matrix(&DenseMatrix::identity(self.dim()))
            .expect("identity has matching dimension")
    }
}
