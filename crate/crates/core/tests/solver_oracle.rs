//! Structured stage solves and step maps checked against dense reference
//! computations done with nalgebra.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sirk::integrator::newton_step;
use sirk::linalg::DenseMatrix;
use sirk::problems::{double_pendulum, initial_state, DoublePendulumParams, OdeSystem, BASE_P, BASE_Q};
use sirk::stagesolver::{CompensatedState, StageLinearSolver};
use sirk::tableau::cached_method;

fn to_na(m: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)])
}

/// `I − h (B A B⁻¹ ⊗ J)` assembled densely.
fn dense_stage_matrix(s: usize, a: &DenseMatrix, b: &[f64], j: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    let d = j.nrows();
    let mut m = DMatrix::<f64>::identity(s * d, s * d);
    for p in 0..s {
        for q in 0..s {
            let c = h * b[p] * a[(p, q)] / b[q];
            for r in 0..d {
                for t in 0..d {
                    m[(p * d + r, q * d + t)] -= c * j[(r, t)];
                }
            }
        }
    }
    m
}

#[test]
fn structured_solve_matches_dense_lu_across_shapes() {
    let h = 2f64.powi(-7);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for s in [1, 2, 3, 4, 5, 6, 7, 8] {
        let method = cached_method(s).unwrap();
        for d in [1, 2, 3, 8] {
            for case in 0..6 {
                let scale = [1.0, 30.0, 300.0][case % 3];
                let j = DenseMatrix::from_fn(d, d, |_, _| scale * rng.gen_range(-1.0..1.0));
                let g: Vec<f64> = (0..s * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let solver = StageLinearSolver::new(&j, h, &method.decomposition).unwrap();
                let got = solver.solve(&g).unwrap();
                let dense = dense_stage_matrix(s, &method.tableau.a, &method.tableau.b, &to_na(&j), h);
                let want = dense.lu().solve(&DVector::from_vec(g)).unwrap();
                let num = got.iter().zip(want.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                let den = want.iter().map(|v| v.abs()).fold(0.0, f64::max);
                let rel = num / den;
                worst = worst.max(rel);
                assert!(rel <= 1e-11, "s={s} d={d} scale={scale}: {rel:e}");
            }
        }
    }
    eprintln!("worst relative difference {worst:e}");
}

#[test]
fn sigma_matches_eigenvalues_of_shifted_tableau() {
    for s in 1..=8 {
        let method = cached_method(s).unwrap();
        let a = to_na(&method.tableau.a);
        let b = &method.tableau.b;
        let abar = DMatrix::from_fn(s, s, |i, j| a[(i, j)] - 0.5 * b[j]);
        let eig = abar.complex_eigenvalues();
        // Purely imaginary spectrum.
        for z in eig.iter() {
            assert!(z.re.abs() <= 1e-12, "s={s}: {z}");
        }
        let mut imag: Vec<f64> = eig.iter().map(|z| z.im).filter(|&v| v > 1e-10).collect();
        imag.sort_by(|x, y| y.partial_cmp(x).unwrap());
        let sigma = &method.decomposition.sigma;
        assert_eq!(imag.len(), s / 2, "s={s}");
        for (u, v) in imag.iter().zip(sigma.iter()) {
            assert!((u - v).abs() <= 1e-12 * v.max(1.0), "s={s}: {u} vs {v}");
        }
    }
}

/// Bisection root of `p` on `[lo, hi]` given a sign change.
fn bisect(p: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let plo = p(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (p(mid) > 0.0) == (plo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn six_stage_sigma_from_characteristic_polynomial() {
    // Ā = A − e bᵀ/2 has eigenvalues ±iσ; the characteristic polynomial is
    // even, so det(xI − Ā) = q(x²) and q(−σ²) = 0.
    let method = cached_method(6).unwrap();
    let a = to_na(&method.tableau.a);
    let b = &method.tableau.b;
    let abar = DMatrix::from_fn(6, 6, |i, j| a[(i, j)] - 0.5 * b[j]);
    // det(λI − Ā) on the imaginary axis: λ = iy gives a real even polynomial in y.
    let det_at = |y: f64| {
        let n = 6;
        let mut m = nalgebra::DMatrix::<nalgebra::Complex<f64>>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let v = -abar[(i, j)];
                m[(i, j)] = nalgebra::Complex::new(v, if i == j { y } else { 0.0 });
            }
        }
        m.determinant().re
    };
    let sigma = &method.decomposition.sigma;
    for &sg in sigma {
        let root = bisect(&det_at, sg * 0.999, sg * 1.001);
        assert!((root - sg).abs() <= 1e-12 * sg, "{root} vs {sg}");
    }
}

/// Dense Newton on `Yᵢ = y + h Σⱼ aᵢⱼ f(Yⱼ)` with the exact stage Jacobians.
fn dense_gauss_step<S: OdeSystem>(sys: &S, s: usize, y: &[f64], h: f64) -> Vec<f64> {
    let method = cached_method(s).unwrap();
    let a = &method.tableau.a;
    let b = &method.tableau.b;
    let d = y.len();
    let mut z = DVector::<f64>::zeros(s * d); // Zᵢ = Yᵢ − y
    let mut f = vec![0.0; d];
    let mut jac = DenseMatrix::zeros(d, d);
    for _ in 0..50 {
        let mut fs = Vec::with_capacity(s);
        let mut js = Vec::with_capacity(s);
        for i in 0..s {
            let yi: Vec<f64> = (0..d).map(|r| y[r] + z[i * d + r]).collect();
            sys.rhs(0.0, &yi, &mut f);
            sys.jacobian(0.0, &yi, &mut jac);
            fs.push(f.clone());
            js.push(to_na(&jac));
        }
        let mut res = DVector::<f64>::zeros(s * d);
        let mut m = DMatrix::<f64>::identity(s * d, s * d);
        for i in 0..s {
            for r in 0..d {
                let mut acc = z[i * d + r];
                for j in 0..s {
                    acc -= h * a[(i, j)] * fs[j][r];
                }
                res[i * d + r] = acc;
            }
            for j in 0..s {
                for r in 0..d {
                    for t in 0..d {
                        m[(i * d + r, j * d + t)] -= h * a[(i, j)] * js[j][(r, t)];
                    }
                }
            }
        }
        let dz = m.lu().solve(&res).unwrap();
        z -= &dz;
        if dz.amax() <= 1e-17 * z.amax().max(1e-300) {
            break;
        }
    }
    let mut out = y.to_vec();
    for i in 0..s {
        let yi: Vec<f64> = (0..d).map(|r| y[r] + z[i * d + r]).collect();
        sys.rhs(0.0, &yi, &mut f);
        for r in 0..d {
            out[r] += h * b[i] * f[r];
        }
    }
    out
}

#[test]
fn newton_step_matches_dense_newton_on_pendulum() {
    for k in [0.0, 64.0, 4096.0] {
        let p = DoublePendulumParams::with_spring(k);
        let sys = double_pendulum(p);
        let y0 = initial_state(&p, BASE_Q, BASE_P);
        let h = 2f64.powi(-7);
        for s in [1, 2, 3, 6] {
            let method = cached_method(s).unwrap();
            let (next, _) = newton_step(&sys, method, &CompensatedState::new(&y0), 0.0, h).unwrap();
            let want = dense_gauss_step(&sys, s, &y0, h);
            for (u, v) in next.value().iter().zip(&want) {
                assert!((u - v).abs() <= 1e-13 * v.abs().max(1.0), "k={k} s={s}: {u} vs {v}");
            }
        }
    }
}
