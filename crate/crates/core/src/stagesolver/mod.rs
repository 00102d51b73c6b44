//! Structured solution of the simplified-Newton stage system
//!
//! ```text
//! (I_s ⊗ I_d − h · B A B⁻¹ ⊗ J) ΔL = g
//! ```
//!
//! using `floor(s/2) + 1` real `d x d` LU factorizations: one per block
//! `I + h²σᵢ²J²` and one for the coupling matrix
//! `M = I − (h/2)·J·Σ αᵢ² (I + h²σᵢ²J²)⁻¹`.
//! All factorizations happen in [`StageLinearSolver::new`]; solves only
//! apply them.
//!
//! Stage-major layout: an `s x d` stacked vector stores stage `i` in
//! `[i*d, (i+1)*d)`.

mod stopping;
mod summation;

pub use stopping::{continue_iterating, ConvergenceMonitor};
pub use summation::{fl32, fl32_project, kahan_step, CompensatedState};

use thiserror::Error;

use crate::linalg::{lu_decompose, vec_norm_inf, DenseMatrix, LinalgError, LuFactorization};
use crate::tableau::StageDecomposition;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("block {index} (I + h^2 sigma^2 J^2) is singular: {source}")]
    SingularBlock { index: usize, source: LinalgError },
    #[error("coupling matrix M is singular: {0}")]
    SingularM(LinalgError),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("step size must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Per-step factorization state for one common Jacobian `J` and step `h`.
#[derive(Debug, Clone)]
pub struct StageLinearSolver<'a> {
    h: f64,
    j: DenseMatrix,
    jsq: DenseMatrix,
    block_lus: Vec<LuFactorization>,
    m_matrix: DenseMatrix,
    m_lu: LuFactorization,
    decomp: &'a StageDecomposition,
}

/// Scratch buffers for [`StageLinearSolver::solve_into`].
#[derive(Debug, Clone)]
pub struct SolveScratch {
    r: Vec<f64>,
    g2: Vec<f64>,
    w: Vec<f64>,
    acc: Vec<f64>,
    tmp: Vec<f64>,
    dz: Vec<f64>,
    lu: Vec<f64>,
}

impl SolveScratch {
    pub fn new(stages: usize, dim: usize) -> Self {
        let m = stages.div_ceil(2);
        Self {
            r: vec![0.0; m * dim],
            g2: vec![0.0; (stages - m) * dim],
            w: vec![0.0; stages * dim],
            acc: vec![0.0; dim],
            tmp: vec![0.0; dim],
            dz: vec![0.0; dim],
            lu: vec![0.0; dim],
        }
    }
}

/// `y += a * x`
#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = a.mul_add(xi, *yi);
    }
}

impl<'a> StageLinearSolver<'a> {
    /// Factorizes the `floor(s/2)` blocks and `M` for Jacobian `j` and step `h`.
    pub fn new(j: &DenseMatrix, h: f64, decomp: &'a StageDecomposition) -> Result<Self, SolverError> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(SolverError::InvalidStep(h));
        }
        if !j.is_square() {
            return Err(SolverError::DimensionMismatch { expected: j.rows(), found: j.cols() });
        }
        let d = j.rows();
        let jsq = j.matmul(j)?;
        let ident = DenseMatrix::identity(d);

        let mut block_lus = Vec::with_capacity(decomp.sigma.len());
        // sum accumulates Σ αᵢ² (I + h²σᵢ²J²)⁻¹
        let mut sum = DenseMatrix::zeros(d, d);
        for (idx, &sigma) in decomp.sigma.iter().enumerate() {
            let hs = h * sigma;
            let block = ident.add(&jsq.scale(hs * hs))?;
            let lu = lu_decompose(&block).map_err(|source| SolverError::SingularBlock { index: idx, source })?;
            let inv = lu.solve_matrix(&ident)?;
            sum = sum.add(&inv.scale(decomp.alpha[idx] * decomp.alpha[idx]))?;
            block_lus.push(lu);
        }
        if decomp.m > decomp.sigma.len() {
            let a = decomp.alpha[decomp.m - 1];
            sum = sum.add(&ident.scale(a * a))?;
        }
        let m_matrix = ident.sub(&j.matmul(&sum)?.scale(0.5 * h))?;
        let m_lu = lu_decompose(&m_matrix).map_err(SolverError::SingularM)?;

        Ok(Self { h, j: j.clone(), jsq, block_lus, m_matrix, m_lu, decomp })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.j.rows()
    }

    #[inline]
    pub fn stages(&self) -> usize {
        self.decomp.stages()
    }

    #[inline]
    pub fn step(&self) -> f64 {
        self.h
    }

    pub fn jacobian(&self) -> &DenseMatrix {
        &self.j
    }

    pub fn jacobian_squared(&self) -> &DenseMatrix {
        &self.jsq
    }

    pub fn block_factorizations(&self) -> &[LuFactorization] {
        &self.block_lus
    }

    /// The assembled coupling matrix `M`.
    pub fn coupling_matrix(&self) -> &DenseMatrix {
        &self.m_matrix
    }

    pub fn coupling_factorization(&self) -> &LuFactorization {
        &self.m_lu
    }

    pub fn decomposition(&self) -> &StageDecomposition {
        self.decomp
    }

    pub fn scratch(&self) -> SolveScratch {
        SolveScratch::new(self.stages(), self.dim())
    }

    /// Solves for `ΔL` given `g`, both stage-major `s*d` vectors.
    pub fn solve_into(&self, g: &[f64], out: &mut [f64], ws: &mut SolveScratch) -> Result<(), SolverError> {
        let (s, d) = (self.stages(), self.dim());
        let dec = self.decomp;
        let m = dec.m;
        let half = dec.sigma.len();
        if g.len() != s * d {
            return Err(SolverError::DimensionMismatch { expected: s * d, found: g.len() });
        }
        if out.len() != s * d {
            return Err(SolverError::DimensionMismatch { expected: s * d, found: out.len() });
        }
        let h = self.h;

        // R = (Q1ᵀ⊗I) g + h (D Q2ᵀ ⊗ J) g, and G2 = (Q2ᵀ⊗I) g
        for r in 0..m {
            let rr = &mut ws.r[r * d..(r + 1) * d];
            rr.fill(0.0);
            for i in 0..s {
                axpy(dec.q1[(i, r)], &g[i * d..(i + 1) * d], rr);
            }
        }
        for r in 0..half {
            let g2 = &mut ws.g2[r * d..(r + 1) * d];
            g2.fill(0.0);
            for i in 0..s {
                axpy(dec.q2[(i, r)], &g[i * d..(i + 1) * d], g2);
            }
            self.j.matvec_into(g2, &mut ws.tmp);
            axpy(h * dec.sigma[r], &ws.tmp, &mut ws.r[r * d..(r + 1) * d]);
        }

        // d = h J Σ αᵢ (I + h²σᵢ²J²)⁻¹ Rᵢ
        ws.acc.fill(0.0);
        for r in 0..m {
            ws.tmp.copy_from_slice(&ws.r[r * d..(r + 1) * d]);
            if r < half {
                self.block_lus[r].solve_in_place(&mut ws.tmp, &mut ws.lu)?;
            }
            axpy(dec.alpha[r], &ws.tmp, &mut ws.acc);
        }
        self.j.matvec_into(&ws.acc, &mut ws.dz);
        for v in ws.dz.iter_mut() {
            *v *= h;
        }
        self.m_lu.solve_in_place(&mut ws.dz, &mut ws.lu)?;

        // (I + h²σᵢ²J²) Wᵢ = Rᵢ + (αᵢ/2) Δz
        for r in 0..m {
            let wr = &mut ws.w[r * d..(r + 1) * d];
            wr.copy_from_slice(&ws.r[r * d..(r + 1) * d]);
            axpy(0.5 * dec.alpha[r], &ws.dz, wr);
            if r < half {
                self.block_lus[r].solve_in_place(wr, &mut ws.lu)?;
            }
        }
        // W_{m+i} = −hσᵢ J Wᵢ + (Q2ᵀ⊗I) g
        for r in 0..half {
            self.j.matvec_into(&ws.w[r * d..(r + 1) * d], &mut ws.tmp);
            let target = &mut ws.w[(m + r) * d..(m + r + 1) * d];
            target.copy_from_slice(&ws.g2[r * d..(r + 1) * d]);
            axpy(-h * dec.sigma[r], &ws.tmp, target);
        }

        // ΔL = (BQ ⊗ I) W
        for i in 0..s {
            let oi = &mut out[i * d..(i + 1) * d];
            oi.fill(0.0);
            for k in 0..s {
                axpy(dec.bq[(i, k)], &ws.w[k * d..(k + 1) * d], oi);
            }
        }
        Ok(())
    }

    /// Allocating convenience wrapper around [`solve_into`](Self::solve_into).
    pub fn solve(&self, g: &[f64]) -> Result<Vec<f64>, SolverError> {
        let mut out = vec![0.0; g.len()];
        let mut ws = self.scratch();
        self.solve_into(g, &mut out, &mut ws)?;
        Ok(out)
    }

    /// `‖(I − h BAB⁻¹ ⊗ J) ΔL − g‖∞`, where `(BAB⁻¹)ᵢⱼ = bᵢ μᵢⱼ`.
    pub fn residual(&self, mu: &DenseMatrix, hb: &[f64], dl: &[f64], g: &[f64]) -> f64 {
        let (s, d) = (self.stages(), self.dim());
        let mut applied = vec![0.0; s * d];
        let jacs = vec![&self.j; s];
        apply_stage_operator(mu, hb, &jacs, dl, &mut applied, &mut vec![0.0; d], &mut vec![0.0; d]);
        let diff: Vec<f64> = applied.iter().zip(g).map(|(a, b)| a - b).collect();
        vec_norm_inf(&diff)
    }
}

/// Builds the factorization state for one step; see [`StageLinearSolver::new`].
pub fn build_solver<'a>(
    j: &DenseMatrix,
    h: f64,
    decomp: &'a StageDecomposition,
) -> Result<StageLinearSolver<'a>, SolverError> {
    StageLinearSolver::new(j, h, decomp)
}

/// Solves `(I − h BAB⁻¹ ⊗ J) ΔL = g` with a prebuilt solver.
pub fn solve_stage_system(solver: &StageLinearSolver<'_>, g: &[f64]) -> Result<Vec<f64>, SolverError> {
    solver.solve(g)
}

/// `out_i = x_i − hbᵢ · Jᵢ · Σⱼ μᵢⱼ xⱼ` for per-stage Jacobians `jacs`.
pub fn apply_stage_operator(
    mu: &DenseMatrix,
    hb: &[f64],
    jacs: &[&DenseMatrix],
    x: &[f64],
    out: &mut [f64],
    mix: &mut [f64],
    jx: &mut [f64],
) {
    let s = hb.len();
    let d = mix.len();
    for i in 0..s {
        mix.fill(0.0);
        for j in 0..s {
            axpy(mu[(i, j)], &x[j * d..(j + 1) * d], mix);
        }
        jacs[i].matvec_into(mix, jx);
        let oi = &mut out[i * d..(i + 1) * d];
        for ((o, &xi), &v) in oi.iter_mut().zip(&x[i * d..(i + 1) * d]).zip(jx.iter()) {
            *o = (-hb[i]).mul_add(v, xi);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::lu_factorization_count;
    use crate::tableau::cached_method;

    #[test]
    fn zero_jacobian_is_identity() {
        for s in 1..=6 {
            let meth = cached_method(s).unwrap();
            let solver = StageLinearSolver::new(&DenseMatrix::zeros(3, 3), 0.1, &meth.decomposition).unwrap();
            assert_eq!(solver.coupling_matrix(), &DenseMatrix::identity(3));
            let g: Vec<f64> = (0..3 * s).map(|i| (i as f64).cos()).collect();
            let dl = solver.solve(&g).unwrap();
            for (a, b) in dl.iter().zip(&g) {
                assert!((a - b).abs() <= 1e-15, "s={s}");
            }
            assert!(solver.solve(&vec![0.0; 3 * s]).unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn midpoint_coupling_matrix() {
        let meth = cached_method(1).unwrap();
        let j = DenseMatrix::from_rows(&[[0.3, -1.0], [2.0, 0.1]]).unwrap();
        let h = 0.25;
        let solver = StageLinearSolver::new(&j, h, &meth.decomposition).unwrap();
        let expect = DenseMatrix::identity(2).sub(&j.scale(h / 2.0)).unwrap();
        assert!(solver.coupling_matrix().sub(&expect).unwrap().max_abs() <= 1e-15);
        // Stage system for s = 1 is (I − h/2 J) ΔL = g.
        let g = [1.0, -2.0];
        let dl = solver.solve(&g).unwrap();
        let back = expect.matvec(&dl).unwrap();
        assert!((back[0] - g[0]).abs() <= 1e-15 && (back[1] - g[1]).abs() <= 1e-15);
    }

    #[test]
    fn oscillator_block_by_hand() {
        // J² = −ω² I, so the block is (1 − h²σ²ω²) I.
        let meth = cached_method(2).unwrap();
        let omega: f64 = 3.0;
        let j = DenseMatrix::from_rows(&[[0.0, 1.0], [-omega * omega, 0.0]]).unwrap();
        let h = 0.1;
        let solver = StageLinearSolver::new(&j, h, &meth.decomposition).unwrap();
        let sigma = 3f64.sqrt() / 6.0;
        let diag = 1.0 - h * h * sigma * sigma * omega * omega;
        let lu = &solver.block_factorizations()[0];
        let block = lu.solve_matrix(&DenseMatrix::identity(2)).unwrap();
        assert!((block[(0, 0)] - 1.0 / diag).abs() <= 1e-15);
        assert!(block[(0, 1)].abs() <= 1e-15);
        assert!((solver.jacobian_squared()[(0, 0)] + omega * omega).abs() <= 1e-15);
    }

    #[test]
    fn factorization_count_is_half_plus_one() {
        let j = DenseMatrix::from_rows(&[[0.0, 1.0], [-1.0, 0.2]]).unwrap();
        for s in 1..=8 {
            let meth = cached_method(s).unwrap();
            let before = lu_factorization_count();
            let solver = StageLinearSolver::new(&j, 0.1, &meth.decomposition).unwrap();
            assert_eq!(lu_factorization_count() - before, s / 2 + 1);
            let before = lu_factorization_count();
            let _ = solver.solve(&vec![1.0; 2 * s]).unwrap();
            assert_eq!(lu_factorization_count(), before);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let meth = cached_method(2).unwrap();
        let j = DenseMatrix::identity(2);
        assert_eq!(
            StageLinearSolver::new(&j, 0.0, &meth.decomposition).unwrap_err(),
            SolverError::InvalidStep(0.0)
        );
        let solver = StageLinearSolver::new(&j, 0.1, &meth.decomposition).unwrap();
        assert!(matches!(solver.solve(&[1.0; 3]), Err(SolverError::DimensionMismatch { .. })));
    }

    #[test]
    fn singular_block_is_reported() {
        // J0² = diag(−ω², −ω², 1) with hσω = 1 makes the first block rank one;
        // the similarity S keeps its entries at unit scale.
        let meth = cached_method(2).unwrap();
        let sigma = meth.decomposition.sigma[0];
        let h = 0.5;
        let omega = 1.0 / (h * sigma);
        let j0 = DenseMatrix::from_rows(&[[0.0, omega, 0.0], [-omega, 0.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let sm = DenseMatrix::from_rows(&[[1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 0.0]]).unwrap();
        let sinv = lu_decompose(&sm).unwrap().inverse();
        let j = sm.matmul(&j0).unwrap().matmul(&sinv).unwrap();
        let err = StageLinearSolver::new(&j, h, &meth.decomposition).unwrap_err();
        assert!(matches!(err, SolverError::SingularBlock { index: 0, .. }), "{err:?}");
    }
}
