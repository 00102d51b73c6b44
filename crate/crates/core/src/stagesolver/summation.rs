/// A numerical solution carried as the unevaluated sum `y + e` of two
/// machine vectors; `e` holds the low-order digits lost by `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompensatedState {
    pub y: Vec<f64>,
    pub e: Vec<f64>,
}

impl CompensatedState {
    /// `y = fl(y0)`, `e = 0`.
    pub fn new(y0: &[f64]) -> Self {
        Self { y: y0.to_vec(), e: vec![0.0; y0.len()] }
    }

    pub fn from_parts(y: Vec<f64>, e: Vec<f64>) -> Self {
        assert_eq!(y.len(), e.len(), "compensated parts must have equal length");
        Self { y, e }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.y.len()
    }

    /// `fl(y + e)` componentwise.
    pub fn value(&self) -> Vec<f64> {
        self.y.iter().zip(&self.e).map(|(a, b)| a + b).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.y.iter().chain(&self.e).all(|v| v.is_finite())
    }
}

/// Kahan's compensated summation of `addends` onto `state`, in order.
///
/// For each addend `x`: `X = x + e; y' = y + X; e = X - (y' - y)`.
pub fn kahan_step<I>(state: &mut CompensatedState, addends: I)
where
    I: IntoIterator,
    I::Item: AsRef<[f64]>,
{
    for x in addends {
        let x = x.as_ref();
        debug_assert_eq!(x.len(), state.dim());
        for ((y, e), &xi) in state.y.iter_mut().zip(state.e.iter_mut()).zip(x) {
            let big_x = xi + *e;
            let y_new = *y + big_x;
            let applied = y_new - *y;
            *e = big_x - applied;
            *y = y_new;
        }
    }
}

/// Rounds to the nearest binary32 value and widens back. Overflow saturates
/// to infinity.
#[inline]
pub fn fl32(x: f64) -> f64 {
    x as f32 as f64
}

pub fn fl32_project(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| fl32(x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_addend_from_zero() {
        let mut st = CompensatedState::new(&[0.0, 0.0]);
        kahan_step(&mut st, &[[0.1, -3.5]]);
        assert_eq!(st.y, vec![0.1, -3.5]);
        assert_eq!(st.e, vec![0.0, 0.0]);
    }

    #[test]
    fn tenths_sum_beats_naive() {
        let x = 0.1f64;
        let mut st = CompensatedState::new(&[0.0]);
        let mut naive = 0.0f64;
        for _ in 0..1_000_000 {
            kahan_step(&mut st, &[[x]]);
            naive += x;
        }
        let comp_err = ((st.y[0] + st.e[0]) - 1e5).abs() / 1e5;
        let naive_err = (naive - 1e5).abs() / 1e5;
        assert!(comp_err <= 1e-13, "{comp_err:e}");
        assert!(comp_err < naive_err);
    }

    #[test]
    fn cancelling_pair_restores_state() {
        let mut st = CompensatedState::from_parts(vec![1.0, -2.5], vec![1e-17, 0.0]);
        let before = st.clone();
        let x = [0.3, 1e10];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        kahan_step(&mut st, &[x.to_vec(), neg]);
        assert_eq!(st.y, before.y);
        for (e, e0) in st.e.iter().zip(&before.e) {
            assert!((e - e0).abs() <= f64::EPSILON * 1.0);
        }
    }

    #[test]
    fn fl32_examples() {
        assert_eq!(fl32(0.0), 0.0);
        assert_eq!(fl32(1.0 + 2f64.powi(-30)), 1.0);
        assert_eq!(fl32(std::f64::consts::PI), 13_176_795.0 / 4_194_304.0);
        assert_eq!(fl32(1e300), f64::INFINITY);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn fl32_is_idempotent(x in -1e30f64..1e30) {
                prop_assert_eq!(fl32(fl32(x)), fl32(x));
            }

            #[test]
            fn fl32_is_monotone(x in -1e30f64..1e30, y in -1e30f64..1e30) {
                let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
                prop_assert!(fl32(lo) <= fl32(hi));
            }

            #[test]
            fn compensation_stays_within_two_ulps(xs in proptest::collection::vec(-1e3f64..1e3, 1..50)) {
                let mut st = CompensatedState::new(&[1.0]);
                for x in &xs {
                    kahan_step(&mut st, &[[*x]]);
                    let ulp = if st.y[0] == 0.0 { f64::MIN_POSITIVE } else { st.y[0].abs() * f64::EPSILON };
                    prop_assert!(st.e[0].abs() <= 2.0 * ulp);
                }
            }
        }
    }
}
