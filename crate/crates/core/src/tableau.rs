//! Gauss collocation coefficients and the precomputed stage basis used by
//! the structured linear solver.
//!
//! Coefficients are built in double-double arithmetic and rounded once. The
//! `mu` matrix (`mu[i][j] ~ a[i][j] / b[j]`) is rounded so that
//! `mu[i][j] + mu[j][i] == 1` and `mu[j][i] == mu[s-1-i][s-1-j]` hold exactly
//! in `f64`, the form in which symplecticity survives rounding.

use std::sync::OnceLock;

use thiserror::Error;

use crate::ddouble::DoubleDouble;
use crate::linalg::{lu_decompose, svd_small, DenseMatrix, LinalgError};

/// Largest stage count `gauss_tableau` accepts.
pub const MAX_STAGES: usize = 16;
/// Stage counts kept in the process-wide cache.
pub const CACHED_STAGES: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TableauError {
    #[error("unsupported stage count {0} (expected 1..={MAX_STAGES})")]
    UnsupportedStageCount(usize),
    #[error("could not round mu[{row}][{col}] so that mu[i][j] + mu[j][i] == 1 exactly")]
    SymplecticRoundingFailure { row: usize, col: usize },
    #[error("stage decomposition check `{check}` failed: residual {residual:e} > {tolerance:e}")]
    DecompositionFailure { check: &'static str, residual: f64, tolerance: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Coefficients before the final rounding to `f64`.
#[derive(Debug, Clone)]
pub struct ExtendedCoefficients {
    pub c: Vec<DoubleDouble>,
    pub b: Vec<DoubleDouble>,
    pub a: Vec<Vec<DoubleDouble>>,
}

impl ExtendedCoefficients {
    /// `max |b_i a_ij + b_j a_ji - b_i b_j|` evaluated in double-double.
    pub fn symplecticity_residual(&self) -> f64 {
        let s = self.b.len();
        let mut worst: f64 = 0.0;
        for i in 0..s {
            for j in 0..s {
                let r = self.b[i] * self.a[i][j] + self.b[j] * self.a[j][i] - self.b[i] * self.b[j];
                worst = worst.max(r.to_f64().abs());
            }
        }
        worst
    }
}

/// An `s`-stage Gauss collocation method.
#[derive(Debug, Clone)]
pub struct GaussTableau {
    stages: usize,
    pub c: Vec<f64>,
    pub b: Vec<f64>,
    pub a: DenseMatrix,
    /// Machine-number `a_ij / b_j`, symplectic and symmetric bit for bit.
    pub mu: DenseMatrix,
    pub extended: ExtendedCoefficients,
}

impl GaussTableau {
    #[inline]
    pub fn stages(&self) -> usize {
        self.stages
    }

    /// Checks the two bitwise identities on `mu`. Returns the first offending
    /// index pair, if any.
    pub fn mu_violation(&self) -> Option<(usize, usize)> {
        let s = self.stages;
        for i in 0..s {
            for j in 0..s {
                let (u, v) = (self.mu[(i, j)], self.mu[(j, i)]);
                if u + v != 1.0 || self.mu[(j, i)] != self.mu[(s - 1 - i, s - 1 - j)] {
                    return Some((i, j));
                }
            }
            if self.mu[(i, i)] != 0.5 {
                return Some((i, i));
            }
        }
        None
    }

    /// `h * b_i` for every stage, mirrored so that `hb[s-1-i] == hb[i]` bitwise.
    pub fn scaled_weights(&self, h: f64) -> Vec<f64> {
        let s = self.stages;
        let mut hb = vec![0.0; s];
        for i in 0..s.div_ceil(2) {
            hb[i] = h * self.b[i];
            hb[s - 1 - i] = hb[i];
        }
        hb
    }
}

/// Legendre polynomial `P_n(x)` and `P_{n-1}(x)` by the three-term recurrence.
fn legendre(n: usize, x: DoubleDouble) -> (DoubleDouble, DoubleDouble) {
    let mut prev = DoubleDouble::ONE;
    let mut cur = x;
    for k in 1..n {
        let kk = DoubleDouble::from_i64(k as i64);
        let next = (DoubleDouble::from_i64(2 * k as i64 + 1) * x * cur - kk * prev)
            / DoubleDouble::from_i64(k as i64 + 1);
        prev = cur;
        cur = next;
    }
    (cur, prev)
}

fn legendre_derivative(n: usize, x: DoubleDouble, pn: DoubleDouble, pn1: DoubleDouble) -> DoubleDouble {
    DoubleDouble::from_i64(n as i64) * (x * pn - pn1) / (x * x - DoubleDouble::ONE)
}

/// Gauss-Legendre nodes and weights on `[0, 1]`, symmetrized, in double-double.
fn gauss_legendre(s: usize) -> (Vec<DoubleDouble>, Vec<DoubleDouble>) {
    let one = DoubleDouble::ONE;
    let mut x = Vec::with_capacity(s);
    let mut w = Vec::with_capacity(s);
    for i in 1..=s {
        let guess = (std::f64::consts::PI * (i as f64 - 0.25) / (s as f64 + 0.5)).cos();
        let mut xi = DoubleDouble::from_f64(guess);
        for _ in 0..12 {
            let (p, p1) = legendre(s, xi);
            if s == 1 {
                xi = DoubleDouble::ZERO;
                break;
            }
            let dp = legendre_derivative(s, xi, p, p1);
            let step = p / dp;
            xi = xi - step;
            if step.to_f64().abs() < 1e-34 {
                break;
            }
        }
        let dp = if s == 1 {
            one
        } else {
            let (p, p1) = legendre(s, xi);
            legendre_derivative(s, xi, p, p1)
        };
        let weight = DoubleDouble::from_f64(2.0) / ((one - xi * xi) * dp * dp);
        x.push(xi);
        w.push(weight);
    }
    // Descending x maps to ascending c.
    let mut c: Vec<DoubleDouble> = x.iter().map(|&xi| (one - xi).half()).collect();
    let mut b: Vec<DoubleDouble> = w.iter().map(|&wi| wi.half()).collect();
    for i in 0..s / 2 {
        let j = s - 1 - i;
        let ci = (c[i] + (one - c[j])).half();
        let bi = (b[i] + b[j]).half();
        c[i] = ci;
        c[j] = one - ci;
        b[i] = bi;
        b[j] = bi;
    }
    if s % 2 == 1 {
        c[s / 2] = DoubleDouble::from_f64(0.5);
    }
    (c, b)
}

/// Collocation coefficients `a_ij = int_0^{c_i} l_j(t) dt`, evaluated with the
/// method's own quadrature rule (exact for the degree `s-1` integrand).
fn collocation_matrix(c: &[DoubleDouble], b: &[DoubleDouble]) -> Vec<Vec<DoubleDouble>> {
    let s = c.len();
    let lagrange = |j: usize, t: DoubleDouble| -> DoubleDouble {
        let mut acc = DoubleDouble::ONE;
        for m in 0..s {
            if m != j {
                acc = acc * (t - c[m]) / (c[j] - c[m]);
            }
        }
        acc
    };
    (0..s)
        .map(|i| {
            (0..s)
                .map(|j| {
                    let mut sum = DoubleDouble::ZERO;
                    for k in 0..s {
                        sum = sum + b[k] * lagrange(j, c[i] * c[k]);
                    }
                    c[i] * sum
                })
                .collect()
        })
        .collect()
}

/// Builds the `s`-stage Gauss collocation tableau.
pub fn gauss_tableau(s: usize) -> Result<GaussTableau, TableauError> {
    if s == 0 || s > MAX_STAGES {
        return Err(TableauError::UnsupportedStageCount(s));
    }
    let (c, b) = gauss_legendre(s);
    let a = collocation_matrix(&c, &b);
    let ratios: Vec<Vec<DoubleDouble>> =
        (0..s).map(|i| (0..s).map(|j| a[i][j] / b[j]).collect()).collect();
    let mu = round_mu(&ratios)?;

    let c64: Vec<f64> = c.iter().map(|v| v.to_f64()).collect();
    let b64: Vec<f64> = b.iter().map(|v| v.to_f64()).collect();
    let a64 = DenseMatrix::from_fn(s, s, |i, j| a[i][j].to_f64());
    Ok(GaussTableau {
        stages: s,
        c: c64,
        b: b64,
        a: a64,
        mu,
        extended: ExtendedCoefficients { c, b, a },
    })
}

/// `fl(1 - v)` is an exact complement of `v`: both bitwise identities hold.
fn complements_exactly(v: f64) -> bool {
    let w = 1.0 - v;
    v + w == 1.0 && w + v == 1.0 && 1.0 - w == v
}

fn next_up(x: f64) -> f64 {
    if x == 0.0 {
        return f64::from_bits(1);
    }
    let bits = x.to_bits();
    f64::from_bits(if x > 0.0 { bits + 1 } else { bits - 1 })
}

fn next_down(x: f64) -> f64 {
    -next_up(-x)
}

/// Rounds the extended-precision ratios `a_ij / b_j` to machine numbers.
///
/// Index pairs fall into orbits `{(i,j), (s-1-j,s-1-i)}` (value `v`) and
/// `{(j,i), (s-1-i,s-1-j)}` (value `1 - v`). One value per orbit pair is
/// rounded to nearest, choosing the member `>= 1/2` so that the complement
/// is exact by Sterbenz's lemma whenever it lies in `[1/2, 2]`; outside that
/// range the rounded value is nudged by ulps until the complement is exact.
/// Diagonal entries are exactly `1/2`.
pub fn round_mu(ratios: &[Vec<DoubleDouble>]) -> Result<DenseMatrix, TableauError> {
    let s = ratios.len();
    let mut mu = DenseMatrix::zeros(s, s);
    let mut assigned = vec![false; s * s];
    let mirror = |i: usize, j: usize| (s - 1 - j, s - 1 - i);

    for i in 0..s {
        for j in 0..s {
            if assigned[i * s + j] {
                continue;
            }
            if i == j {
                mu[(i, i)] = 0.5;
                assigned[i * s + i] = true;
                continue;
            }
            let (mi, mj) = mirror(i, j);
            let (ti, tj) = mirror(j, i);
            let direct = (ratios[i][j] + ratios[mi][mj]).half();
            let partner = (ratios[j][i] + ratios[ti][tj]).half();
            // rep is the representative with the larger value.
            let (rep_value, rep_is_direct) =
                if direct >= partner { (direct, true) } else { (partner, false) };

            let nearest = rep_value.to_f64();
            let mut chosen = None;
            let (mut up, mut down) = (nearest, nearest);
            for _ in 0..64 {
                if complements_exactly(up) {
                    chosen = Some(up);
                    break;
                }
                if complements_exactly(down) {
                    chosen = Some(down);
                    break;
                }
                up = next_up(up);
                down = next_down(down);
            }
            let v = chosen.ok_or(TableauError::SymplecticRoundingFailure { row: i, col: j })?;
            let (dv, pv) = if rep_is_direct { (v, 1.0 - v) } else { (1.0 - v, v) };
            for (r, c, val) in [(i, j, dv), (mi, mj, dv), (j, i, pv), (ti, tj, pv)] {
                mu[(r, c)] = val;
                assigned[r * s + c] = true;
            }
        }
    }
    Ok(mu)
}

/// Real block decomposition of the shifted coefficient matrix
/// `abar = A - e b^T / 2`: `Q^{-1} abar Q = [[0, D], [-D^T, 0]]` with
/// `Q^{-1} = Q^T B`.
#[derive(Debug, Clone)]
pub struct StageDecomposition {
    stages: usize,
    /// `ceil(s/2)`: size of the symmetric half of the stage basis.
    pub m: usize,
    /// Singular values of the coupling block, descending, `floor(s/2)` of them.
    pub sigma: Vec<f64>,
    /// `Q1^T B e`.
    pub alpha: Vec<f64>,
    pub q1: DenseMatrix,
    pub q2: DenseMatrix,
    /// `B Q`, used to map transformed unknowns back to stage increments.
    pub bq: DenseMatrix,
    pub abar: DenseMatrix,
    pub b: Vec<f64>,
}

impl StageDecomposition {
    #[inline]
    pub fn stages(&self) -> usize {
        self.stages
    }

    /// Full `Q = (Q1 Q2)`.
    pub fn q(&self) -> DenseMatrix {
        let s = self.stages;
        DenseMatrix::from_fn(s, s, |i, j| if j < self.m { self.q1[(i, j)] } else { self.q2[(i, j - self.m)] })
    }

    /// `m x (s-m)` diagonal block `D`.
    pub fn d_block(&self) -> DenseMatrix {
        let n = self.stages - self.m;
        DenseMatrix::from_fn(self.m, n, |i, j| if i == j { self.sigma[i] } else { 0.0 })
    }

    /// `max |(B abar) + (B abar)^T|`.
    pub fn antisymmetry_residual(&self) -> f64 {
        let s = self.stages;
        let mut worst: f64 = 0.0;
        for i in 0..s {
            for j in 0..s {
                worst = worst.max((self.b[i] * self.abar[(i, j)] + self.b[j] * self.abar[(j, i)]).abs());
            }
        }
        worst
    }

    /// `max |Q^{-1} abar Q - [[0, D], [-D^T, 0]]|`, with `Q^{-1}` from an LU solve.
    pub fn block_form_residual(&self) -> Result<f64, LinalgError> {
        let s = self.stages;
        let q = self.q();
        let qinv = lu_decompose(&q)?.inverse();
        let t = qinv.matmul(&self.abar)?.matmul(&q)?;
        let d = self.d_block();
        let target = DenseMatrix::from_fn(s, s, |i, j| match (i < self.m, j < self.m) {
            (true, false) => d[(i, j - self.m)],
            (false, true) => -d[(j, i - self.m)],
            _ => 0.0,
        });
        Ok(t.sub(&target)?.max_abs())
    }

    /// `max |Q^{-1} - Q^T B|`.
    pub fn inverse_residual(&self) -> Result<f64, LinalgError> {
        let q = self.q();
        let qinv = lu_decompose(&q)?.inverse();
        let qtb = DenseMatrix::from_fn(self.stages, self.stages, |i, j| q[(j, i)] * self.b[j]);
        Ok(qinv.sub(&qtb)?.max_abs())
    }

    /// `max |e^T B Q2|`.
    pub fn q2_weight_residual(&self) -> f64 {
        (0..self.q2.cols())
            .map(|k| (0..self.stages).map(|i| self.b[i] * self.q2[(i, k)]).sum::<f64>().abs())
            .fold(0.0, f64::max)
    }
}

pub const ANTISYMMETRY_TOL: f64 = 1e-15;
pub const BLOCK_FORM_TOL: f64 = 1e-13;
pub const INVERSE_TOL: f64 = 1e-13;
pub const Q2_WEIGHT_TOL: f64 = 1e-14;

/// Orthogonal `P = (P1 P2)` splitting `R^s` into index-reversal symmetric and
/// antisymmetric vectors.
fn symmetry_basis(s: usize) -> (DenseMatrix, DenseMatrix) {
    let m = s.div_ceil(2);
    let half = s / 2;
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let mut p1 = DenseMatrix::zeros(s, m);
    let mut p2 = DenseMatrix::zeros(s, half);
    for k in 0..half {
        p1[(k, k)] = r;
        p1[(s - 1 - k, k)] = r;
        p2[(s - 1 - k, k)] = r;
        p2[(k, k)] = -r;
    }
    if s % 2 == 1 {
        p1[(half, m - 1)] = 1.0;
    }
    (p1, p2)
}

/// Computes `sigma`, `alpha`, `Q1`, `Q2` and `B Q` for a symmetric
/// symplectic tableau, verifying every structural identity.
pub fn compute_decomposition(t: &GaussTableau) -> Result<StageDecomposition, TableauError> {
    let s = t.stages();
    let m = s.div_ceil(2);
    let ext = &t.extended;

    let sqrt_b: Vec<DoubleDouble> = ext.b.iter().map(|v| v.sqrt()).collect();
    let abar_dd = |i: usize, j: usize| ext.a[i][j] - ext.b[j].half();
    let abar = DenseMatrix::from_fn(s, s, |i, j| abar_dd(i, j).to_f64());
    // B^{1/2} abar B^{-1/2}, antisymmetric.
    let scaled = DenseMatrix::from_fn(s, s, |i, j| (sqrt_b[i] * abar_dd(i, j) / sqrt_b[j]).to_f64());

    let (p1, p2) = symmetry_basis(s);
    let k = p1.transpose().matmul(&scaled)?.matmul(&p2)?;
    let svd = svd_small(&k)?;

    let p1u = p1.matmul(&svd.u)?;
    let p2v = p2.matmul(&svd.v)?;
    let inv_sqrt_b: Vec<f64> = sqrt_b.iter().map(|v| (DoubleDouble::ONE / *v).to_f64()).collect();
    let q1 = DenseMatrix::from_fn(s, m, |i, j| inv_sqrt_b[i] * p1u[(i, j)]);
    let q2 = DenseMatrix::from_fn(s, s - m, |i, j| inv_sqrt_b[i] * p2v[(i, j)]);
    let alpha: Vec<f64> = (0..m).map(|j| (0..s).map(|i| q1[(i, j)] * t.b[i]).sum()).collect();
    let bq = DenseMatrix::from_fn(s, s, |i, j| t.b[i] * if j < m { q1[(i, j)] } else { q2[(i, j - m)] });

    let decomp = StageDecomposition {
        stages: s,
        m,
        sigma: svd.singular_values,
        alpha,
        q1,
        q2,
        bq,
        abar,
        b: t.b.clone(),
    };

    let checks = [
        ("antisymmetry of B*abar", decomp.antisymmetry_residual(), ANTISYMMETRY_TOL),
        ("block form of Q^-1 abar Q", decomp.block_form_residual()?, BLOCK_FORM_TOL),
        ("Q^-1 = Q^T B", decomp.inverse_residual()?, INVERSE_TOL),
        ("e^T B Q2 = 0", decomp.q2_weight_residual(), Q2_WEIGHT_TOL),
    ];
    for (check, residual, tolerance) in checks {
        if !(residual <= tolerance) {
            return Err(TableauError::DecompositionFailure { check, residual, tolerance });
        }
    }
    Ok(decomp)
}

/// A tableau together with its stage decomposition.
#[derive(Debug, Clone)]
pub struct GaussMethod {
    pub tableau: GaussTableau,
    pub decomposition: StageDecomposition,
}

impl GaussMethod {
    pub fn new(s: usize) -> Result<Self, TableauError> {
        let tableau = gauss_tableau(s)?;
        let decomposition = compute_decomposition(&tableau)?;
        Ok(Self { tableau, decomposition })
    }

    pub fn stages(&self) -> usize {
        self.tableau.stages()
    }
}

static CACHE: [OnceLock<Result<GaussMethod, TableauError>>; CACHED_STAGES] =
    [const { OnceLock::new() }; CACHED_STAGES];

/// Process-wide shared method for `1 <= s <= 8`, built on first use.
pub fn cached_method(s: usize) -> Result<&'static GaussMethod, TableauError> {
    if s == 0 || s > CACHED_STAGES {
        return Err(TableauError::UnsupportedStageCount(s));
    }
    CACHE[s - 1].get_or_init(|| GaussMethod::new(s)).as_ref().map_err(Clone::clone)
}
