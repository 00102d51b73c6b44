//! Benchmark systems: the spring-coupled planar double pendulum, a harmonic
//! oscillator and constant-coefficient linear systems.

use crate::ddouble::DoubleDouble;
use crate::linalg::DenseMatrix;

/// Right-hand side `y' = f(t, y)` together with its Jacobian and an optional
/// first integral.
pub trait OdeSystem: Sync {
    fn dim(&self) -> usize;

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]);

    /// `∂f/∂y` at `(t, y)`. Defaults to central finite differences of `rhs`.
    fn jacobian(&self, t: f64, y: &[f64], jac: &mut DenseMatrix) {
        finite_difference_jacobian(self, t, y, jac);
    }

    fn energy(&self, _y: &[f64]) -> Option<f64> {
        None
    }

    /// The first integral at `y + e` in double-double arithmetic, so that
    /// energy errors at the rounding level of `E` are resolved.
    fn energy_extended(&self, _y: &[f64], _e: &[f64]) -> Option<DoubleDouble> {
        None
    }
}

/// Central differences with per-component step `sqrt(eps) * (1 + |y_j|)`.
pub fn finite_difference_jacobian<S: OdeSystem + ?Sized>(sys: &S, t: f64, y: &[f64], jac: &mut DenseMatrix) {
    let d = sys.dim();
    debug_assert_eq!(jac.rows(), d);
    let mut yp = y.to_vec();
    let mut fp = vec![0.0; d];
    let mut fm = vec![0.0; d];
    let root_eps = f64::EPSILON.sqrt();
    for j in 0..d {
        let step = root_eps * (1.0 + y[j].abs());
        yp[j] = y[j] + step;
        sys.rhs(t, &yp, &mut fp);
        yp[j] = y[j] - step;
        sys.rhs(t, &yp, &mut fm);
        yp[j] = y[j];
        let width = 2.0 * step;
        for i in 0..d {
            jac[(i, j)] = (fp[i] - fm[i]) / width;
        }
    }
}

/// Physical parameters of the double pendulum (SI units).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoublePendulumParams {
    pub m1: f64,
    pub m2: f64,
    pub l1: f64,
    pub l2: f64,
    pub g: f64,
    /// Elastic constant of the spring between the rods.
    pub k: f64,
}

impl DoublePendulumParams {
    /// Unit masses and rods, `g = 9.8`, spring constant `k`.
    pub fn with_spring(k: f64) -> Self {
        Self { m1: 1.0, m2: 1.0, l1: 1.0, l2: 1.0, g: 9.8, k }
    }

    pub fn is_valid(&self) -> bool {
        [self.m1, self.m2, self.l1, self.l2, self.g].iter().all(|&v| v > 0.0 && v.is_finite())
            && self.k >= 0.0
            && self.k.is_finite()
    }
}

impl Default for DoublePendulumParams {
    fn default() -> Self {
        Self::with_spring(0.0)
    }
}

/// Planar double pendulum with a torsion spring, state `(φ, θ, p_φ, p_θ)`
/// where `φ` is the first rod's angle and `θ` the relative angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoublePendulum {
    pub params: DoublePendulumParams,
}

pub fn double_pendulum(params: DoublePendulumParams) -> DoublePendulum {
    assert!(params.is_valid(), "invalid double pendulum parameters: {params:?}");
    DoublePendulum { params }
}

pub const BASE_Q: [f64; 2] = [1.1, -1.1];
pub const BASE_P: [f64; 2] = [2.7746, 2.7746];

/// `(φ₀, θ₀/√(1+100k), p_φ, p_θ)`; keeps the energy bounded as `k` grows.
pub fn initial_state(params: &DoublePendulumParams, base_q: [f64; 2], base_p: [f64; 2]) -> [f64; 4] {
    [base_q[0], base_q[1] / (1.0 + 100.0 * params.k).sqrt(), base_p[0], base_p[1]]
}

impl DoublePendulum {
    pub fn hamiltonian(&self, y: &[f64]) -> f64 {
        let DoublePendulumParams { m1, m2, l1, l2, g, k } = self.params;
        let (phi, theta, p_phi, p_theta) = (y[0], y[1], y[2], y[3]);
        let dp = p_theta - p_phi;
        let num = l1 * l1 * (m1 + m2) * p_theta * p_theta
            + l2 * l2 * m2 * dp * dp
            + 2.0 * l1 * l2 * m2 * p_theta * dp * theta.cos();
        let den = l1 * l1 * l2 * l2 * m2 * (-2.0 * m1 - m2 + m2 * (2.0 * theta).cos());
        -num / den - g * phi.cos() * (l1 * (m1 + m2) + l2 * m2 * theta.cos())
            + g * l2 * m2 * theta.sin() * phi.sin()
            + 0.5 * k * theta * theta
    }

    pub fn hamiltonian_extended(&self, y: &[f64], e: &[f64]) -> DoubleDouble {
        let DoublePendulumParams { m1, m2, l1, l2, g, k } = self.params;
        let c = DoubleDouble::from_f64;
        let v = |i: usize| DoubleDouble::from_sum(y[i], e[i]);
        let (phi, theta, p_phi, p_theta) = (v(0), v(1), v(2), v(3));
        let (s_th, c_th) = theta.sin_cos();
        let (s_ph, c_ph) = phi.sin_cos();
        let cos2 = c(1.0) - c(2.0) * s_th * s_th;
        let (l1, l2, m1, m2) = (c(l1), c(l2), c(m1), c(m2));
        let dp = p_theta - p_phi;
        let num = l1 * l1 * (m1 + m2) * p_theta * p_theta
            + l2 * l2 * m2 * dp * dp
            + c(2.0) * l1 * l2 * m2 * p_theta * dp * c_th;
        let den = l1 * l1 * l2 * l2 * m2 * (-(c(2.0) * m1) - m2 + m2 * cos2);
        -(num / den) - c(g) * c_ph * (l1 * (m1 + m2) + l2 * m2 * c_th)
            + c(g) * l2 * m2 * s_th * s_ph
            + (c(k) * theta * theta).half()
    }

    /// `(∂H/∂φ, ∂H/∂θ, ∂H/∂p_φ, ∂H/∂p_θ)`.
    pub fn gradient(&self, y: &[f64]) -> [f64; 4] {
        let DoublePendulumParams { m1, m2, l1, l2, g, k } = self.params;
        let (phi, theta, p_phi, p_theta) = (y[0], y[1], y[2], y[3]);
        let (s_th, c_th) = theta.sin_cos();
        let (s_ph, c_ph) = phi.sin_cos();
        let dp = p_theta - p_phi;

        let num = l1 * l1 * (m1 + m2) * p_theta * p_theta
            + l2 * l2 * m2 * dp * dp
            + 2.0 * l1 * l2 * m2 * p_theta * dp * c_th;
        let den = l1 * l1 * l2 * l2 * m2 * (-2.0 * m1 - m2 + m2 * (2.0 * theta).cos());

        let dnum_dpphi = -2.0 * l2 * l2 * m2 * dp - 2.0 * l1 * l2 * m2 * p_theta * c_th;
        let dnum_dptheta =
            2.0 * l1 * l1 * (m1 + m2) * p_theta + 2.0 * l2 * l2 * m2 * dp + 2.0 * l1 * l2 * m2 * c_th * (2.0 * p_theta - p_phi);
        let dnum_dtheta = -2.0 * l1 * l2 * m2 * p_theta * dp * s_th;
        let dden_dtheta = -2.0 * l1 * l1 * l2 * l2 * m2 * m2 * (2.0 * theta).sin();

        let dh_dphi = g * s_ph * (l1 * (m1 + m2) + l2 * m2 * c_th) + g * l2 * m2 * s_th * c_ph;
        let dh_dtheta = -(dnum_dtheta * den - num * dden_dtheta) / (den * den)
            + g * c_ph * l2 * m2 * s_th
            + g * l2 * m2 * c_th * s_ph
            + k * theta;
        [dh_dphi, dh_dtheta, -dnum_dpphi / den, -dnum_dptheta / den]
    }
}

impl OdeSystem for DoublePendulum {
    fn dim(&self) -> usize {
        4
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        let [h_phi, h_theta, h_pphi, h_ptheta] = self.gradient(y);
        dy[0] = h_pphi;
        dy[1] = h_ptheta;
        dy[2] = -h_phi;
        dy[3] = -h_theta;
    }

    fn energy(&self, y: &[f64]) -> Option<f64> {
        Some(self.hamiltonian(y))
    }

    fn energy_extended(&self, y: &[f64], e: &[f64]) -> Option<DoubleDouble> {
        Some(self.hamiltonian_extended(y, e))
    }
}

/// `q' = p, p' = -ω² q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarmonicOscillator {
    pub omega: f64,
}

pub fn harmonic_oscillator(omega: f64) -> HarmonicOscillator {
    assert!(omega > 0.0 && omega.is_finite(), "omega must be positive, got {omega}");
    HarmonicOscillator { omega }
}

impl HarmonicOscillator {
    /// Exact flow from `(q0, p0)` after time `t`.
    pub fn exact(&self, y0: &[f64], t: f64) -> [f64; 2] {
        let w = self.omega;
        let (s, c) = (w * t).sin_cos();
        [y0[0] * c + y0[1] * s / w, -y0[0] * w * s + y0[1] * c]
    }
}

impl OdeSystem for HarmonicOscillator {
    fn dim(&self) -> usize {
        2
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        dy[0] = y[1];
        dy[1] = -self.omega * self.omega * y[0];
    }

    fn jacobian(&self, _t: f64, _y: &[f64], jac: &mut DenseMatrix) {
        jac[(0, 0)] = 0.0;
        jac[(0, 1)] = 1.0;
        jac[(1, 0)] = -self.omega * self.omega;
        jac[(1, 1)] = 0.0;
    }

    fn energy(&self, y: &[f64]) -> Option<f64> {
        Some(0.5 * (y[1] * y[1] + self.omega * self.omega * y[0] * y[0]))
    }

    fn energy_extended(&self, y: &[f64], e: &[f64]) -> Option<DoubleDouble> {
        let q = DoubleDouble::from_sum(y[0], e[0]);
        let p = DoubleDouble::from_sum(y[1], e[1]);
        let w = DoubleDouble::from_f64(self.omega);
        Some((p * p + w * w * q * q).half())
    }
}

/// `y' = A y` with constant `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub a: DenseMatrix,
}

impl LinearSystem {
    pub fn new(a: DenseMatrix) -> Self {
        assert!(a.is_square());
        Self { a }
    }

    pub fn scalar(lambda: f64) -> Self {
        Self::new(DenseMatrix::from_diagonal(&[lambda]))
    }
}

impl OdeSystem for LinearSystem {
    fn dim(&self) -> usize {
        self.a.rows()
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        self.a.matvec_into(y, dy);
    }

    fn jacobian(&self, _t: f64, _y: &[f64], jac: &mut DenseMatrix) {
        jac.clone_from(&self.a);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(rng: &mut ChaCha8Rng) -> [f64; 4] {
        [rng.gen_range(-3.0..3.0), rng.gen_range(-2.0..2.0), rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)]
    }

    #[test]
    fn table_initial_energies() {
        for (k, e0) in [(0.0, -14.39), (64.0, -5.75), (4096.0, -5.64), (65536.0, -5.64)] {
            let p = DoublePendulumParams::with_spring(k);
            let y0 = initial_state(&p, BASE_Q, BASE_P);
            let e = double_pendulum(p).hamiltonian(&y0);
            // Table values are given to two decimals, neither consistently rounded nor truncated.
            assert!((e - e0).abs() < 0.01, "k={k}: {e}");
        }
    }

    #[test]
    fn initial_state_scaling() {
        let p = DoublePendulumParams::with_spring(0.0);
        assert_eq!(initial_state(&p, BASE_Q, BASE_P), [1.1, -1.1, 2.7746, 2.7746]);
        let p = DoublePendulumParams::with_spring(4096.0);
        let th = initial_state(&p, BASE_Q, BASE_P)[1];
        assert!((th - (-1.1 / 409_601f64.sqrt())).abs() <= 1e-18);
        assert!((th + 1.718_748e-3).abs() < 1e-9);
        let p = DoublePendulumParams::with_spring(1e30);
        assert!(initial_state(&p, BASE_Q, BASE_P)[1].abs() < 1e-14);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &k in &[0.0, 64.0, 4096.0] {
            let sys = double_pendulum(DoublePendulumParams::with_spring(k));
            for _ in 0..20 {
                let y = random_state(&mut rng);
                let grad = sys.gradient(&y);
                for j in 0..4 {
                    let step = 1e-5;
                    let mut yp = y;
                    let mut ym = y;
                    yp[j] += step;
                    ym[j] -= step;
                    let fd = (sys.hamiltonian(&yp) - sys.hamiltonian(&ym)) / (2.0 * step);
                    let scale = 1.0 + k * 1e-3;
                    assert!((fd - grad[j]).abs() <= 1e-7 * scale.max(grad[j].abs()), "k={k} j={j}: {fd} vs {}", grad[j]);
                }
            }
        }
    }

    #[test]
    fn energy_is_conserved_by_the_vector_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sys = double_pendulum(DoublePendulumParams::with_spring(64.0));
        for _ in 0..20 {
            let y = random_state(&mut rng);
            let grad = sys.gradient(&y);
            let mut f = [0.0; 4];
            sys.rhs(0.0, &y, &mut f);
            let ham_rate: f64 = grad.iter().zip(&f).map(|(a, b)| a * b).sum();
            assert!(ham_rate.abs() <= 1e-10);
        }
    }

    #[test]
    fn spring_enters_only_through_quadratic_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = 4096.0;
        let stiff = double_pendulum(DoublePendulumParams::with_spring(k));
        let free = double_pendulum(DoublePendulumParams::with_spring(0.0));
        for _ in 0..20 {
            let y = random_state(&mut rng);
            let diff = stiff.hamiltonian(&y) - free.hamiltonian(&y);
            let expect = 0.5 * k * y[1] * y[1];
            assert!((diff - expect).abs() <= 1e-12 * expect.max(1.0));
        }
    }

    #[test]
    fn extended_energy_agrees_with_double() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &k in &[0.0, 4096.0] {
            let sys = double_pendulum(DoublePendulumParams::with_spring(k));
            for _ in 0..20 {
                let y = random_state(&mut rng);
                let h = sys.hamiltonian(&y);
                let hx = sys.hamiltonian_extended(&y, &[0.0; 4]).to_f64();
                assert!((h - hx).abs() <= 1e-13 * h.abs().max(1.0), "{h} vs {hx}");
            }
        }
        // The low-order part of the state is resolved.
        let sys = double_pendulum(DoublePendulumParams::with_spring(0.0));
        let y = initial_state(&sys.params, BASE_Q, BASE_P);
        let e = [1e-18, -2e-18, 3e-18, 1e-18];
        let grad = sys.gradient(&y);
        let expect: f64 = grad.iter().zip(&e).map(|(g, d)| g * d).sum();
        let diff = (sys.hamiltonian_extended(&y, &e) - sys.hamiltonian_extended(&y, &[0.0; 4])).to_f64();
        assert!((diff - expect).abs() <= 1e-3 * expect.abs(), "{diff:e} vs {expect:e}");
    }

    #[test]
    fn autonomous_right_hand_side() {
        let sys = double_pendulum(DoublePendulumParams::with_spring(64.0));
        let y = [0.3, -0.2, 1.0, 0.5];
        let (mut a, mut b) = ([0.0; 4], [0.0; 4]);
        sys.rhs(0.0, &y, &mut a);
        sys.rhs(123.5, &y, &mut b);
        assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
    }

    #[test]
    fn finite_difference_jacobian_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sys = double_pendulum(DoublePendulumParams::with_spring(64.0));
        for _ in 0..10 {
            let y = random_state(&mut rng);
            let mut fd = DenseMatrix::zeros(4, 4);
            sys.jacobian(0.0, &y, &mut fd);
            // Reference at a different step size: ε^(1/3) is optimal for central differences.
            let mut reference = DenseMatrix::zeros(4, 4);
            for j in 0..4 {
                let step = 6e-6 * (1.0 + y[j].abs());
                let (mut yp, mut ym) = (y, y);
                yp[j] += step;
                ym[j] -= step;
                let (mut fp, mut fm) = ([0.0; 4], [0.0; 4]);
                sys.rhs(0.0, &yp, &mut fp);
                sys.rhs(0.0, &ym, &mut fm);
                for i in 0..4 {
                    reference[(i, j)] = (fp[i] - fm[i]) / (2.0 * step);
                }
            }
            let err = fd.sub(&reference).unwrap().max_abs();
            assert!(err <= 1e-5 * (1.0 + fd.norm_inf()), "{err:e}");
        }
    }

    #[test]
    fn harmonic_basics() {
        let w = 2.0;
        let sys = harmonic_oscillator(w);
        let mut f = [0.0; 2];
        sys.rhs(0.0, &[1.0, 0.0], &mut f);
        assert_eq!(f, [0.0, -w * w]);
        assert_eq!(sys.energy(&[1.0, 0.0]), Some(w * w / 2.0));
        let mut jac = DenseMatrix::zeros(2, 2);
        sys.jacobian(0.0, &[0.0, 0.0], &mut jac);
        let mut fd = DenseMatrix::zeros(2, 2);
        finite_difference_jacobian(&sys, 0.0, &[0.4, -0.3], &mut fd);
        assert!(jac.sub(&fd).unwrap().max_abs() <= 1e-7);
    }
}
