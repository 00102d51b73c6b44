//! Double-double arithmetic: a value is the unevaluated sum `hi + lo` of two
//! doubles with `|lo| <= ulp(hi)/2`, giving roughly 106 bits of significand.
//!
//! Only what tableau construction and the extended-precision energy
//! diagnostics need is provided.

use std::cmp::Ordering;
use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DoubleDouble {
    pub hi: f64,
    pub lo: f64,
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    (s, err)
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl DoubleDouble {
    pub const ZERO: Self = Self { hi: 0.0, lo: 0.0 };
    pub const ONE: Self = Self { hi: 1.0, lo: 0.0 };

    #[inline]
    pub const fn from_f64(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }

    pub fn from_i64(n: i64) -> Self {
        let hi = n as f64;
        let lo = (n - hi as i64) as f64;
        let (hi, lo) = quick_two_sum(hi, lo);
        Self { hi, lo }
    }

    /// Nearest double.
    #[inline]
    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    #[inline]
    pub fn abs(self) -> Self {
        if self.hi < 0.0 || (self.hi == 0.0 && self.lo < 0.0) {
            -self
        } else {
            self
        }
    }

    pub fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return Self::ZERO;
        }
        // One Newton correction on the double square root.
        let x = self.hi.sqrt();
        let xx = Self::from_f64(x) * Self::from_f64(x);
        let corr = (self - xx).hi / (2.0 * x);
        let (hi, lo) = quick_two_sum(x, corr);
        Self { hi, lo }
    }

    pub fn powi(self, n: u32) -> Self {
        let mut acc = Self::ONE;
        for _ in 0..n {
            acc = acc * self;
        }
        acc
    }

    #[inline]
    pub fn half(self) -> Self {
        Self { hi: self.hi * 0.5, lo: self.lo * 0.5 }
    }

    /// Exact `a + b`.
    #[inline]
    pub fn from_sum(a: f64, b: f64) -> Self {
        let (hi, lo) = two_sum(a, b);
        Self { hi, lo }
    }

    /// `(sin x, cos x)`, accurate to a few units of 2⁻¹⁰⁴ for moderate `|x|`.
    pub fn sin_cos(self) -> (Self, Self) {
        const PIO2: [f64; 3] = [1.570_796_326_794_896_6, 6.123_233_995_736_766e-17, -1.497_384_904_859_169_8e-33];
        let n = (self.hi / PIO2[0]).round();
        let nd = Self::from_f64(n);
        let r = self - nd * Self::from_f64(PIO2[0]) - nd * Self::from_f64(PIO2[1]) - nd * Self::from_f64(PIO2[2]);
        let r2 = r * r;
        // Taylor series on |r| <= π/4.
        let (mut sin, mut cos) = (r, Self::ONE);
        let (mut ts, mut tc) = (r, Self::ONE);
        let mut k = 1.0;
        loop {
            ts = -(ts * r2) / Self::from_f64((2.0 * k) * (2.0 * k + 1.0));
            tc = -(tc * r2) / Self::from_f64((2.0 * k - 1.0) * (2.0 * k));
            sin = sin + ts;
            cos = cos + tc;
            if tc.hi.abs() < 1e-36 && ts.hi.abs() < 1e-36 {
                break;
            }
            k += 1.0;
        }
        match (n as i64).rem_euclid(4) {
            0 => (sin, cos),
            1 => (cos, -sin),
            2 => (-sin, -cos),
            _ => (-cos, sin),
        }
    }
}

impl From<f64> for DoubleDouble {
    fn from(x: f64) -> Self {
        Self::from_f64(x)
    }
}

impl Add for DoubleDouble {
    type Output = Self;

    #[inline]
    fn add(self, rhs: Self) -> Self {
        let (s1, s2) = two_sum(self.hi, rhs.hi);
        let (t1, t2) = two_sum(self.lo, rhs.lo);
        let (s1, s2) = quick_two_sum(s1, s2 + t1);
        let (hi, lo) = quick_two_sum(s1, s2 + t2);
        Self { hi, lo }
    }
}

impl Neg for DoubleDouble {
    type Output = Self;

    #[inline]
    fn neg(self) -> Self {
        Self { hi: -self.hi, lo: -self.lo }
    }
}

impl Sub for DoubleDouble {
    type Output = Self;

    #[inline]
    fn sub(self, rhs: Self) -> Self {
        self + (-rhs)
    }
}

impl Mul for DoubleDouble {
    type Output = Self;

    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let (p1, p2) = two_prod(self.hi, rhs.hi);
        let p2 = p2 + (self.hi * rhs.lo + self.lo * rhs.hi);
        let (hi, lo) = quick_two_sum(p1, p2);
        Self { hi, lo }
    }
}

impl Div for DoubleDouble {
    type Output = Self;

    fn div(self, rhs: Self) -> Self {
        // Long division with three partial quotients.
        let q1 = self.hi / rhs.hi;
        let r = self - rhs * Self::from_f64(q1);
        let q2 = r.hi / rhs.hi;
        let r = r - rhs * Self::from_f64(q2);
        let q3 = r.hi / rhs.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Self { hi, lo } + Self::from_f64(q3)
    }
}

impl PartialOrd for DoubleDouble {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi) {
            Some(Ordering::Equal) => self.lo.partial_cmp(&other.lo),
            ord => ord,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dd(x: f64) -> DoubleDouble {
        DoubleDouble::from_f64(x)
    }

    #[test]
    fn captures_addition_error() {
        let s = dd(1.0) + dd(1e-20);
        assert_eq!(s.hi, 1.0);
        assert_eq!(s.lo, 1e-20);
        assert_eq!((s - dd(1.0)).to_f64(), 1e-20);
    }

    #[test]
    fn third_times_three_is_one() {
        let third = dd(1.0) / dd(3.0);
        let back = third * dd(3.0) - dd(1.0);
        assert!(back.to_f64().abs() < 1e-31);
        assert_eq!(third.hi, 1.0 / 3.0);
    }

    #[test]
    fn sqrt_two_squared() {
        let r = dd(2.0).sqrt();
        let err = (r * r - dd(2.0)).to_f64().abs();
        assert!(err < 1e-31, "{err:e}");
        assert_eq!(r.hi, std::f64::consts::SQRT_2);
    }

    #[test]
    fn sin_cos_reference_values() {
        // (x, sin hi, sin lo, cos hi, cos lo) from a 300-bit evaluation.
        let cases = [
            (1.0, 0.841_470_984_807_896_5, 1.776_845_092_935_536e-18, 0.540_302_305_868_139_8, -4.760_954_612_604_417e-17),
            (0.5, 0.479_425_538_604_203, -5.103_969_860_556_013e-18, 0.877_582_561_890_372_8, -4.262_314_986_428e-17),
            (-2.7746, -0.358_809_969_647_689, -2.570_939_341_810_884_7e-18, -0.933_410_630_795_163_2, -3.149_561_181_982_636e-17),
            (1000.0, 0.826_879_540_532_002_5, 3.867_581_909_641_312e-17, 0.562_379_076_290_702_9, 5.161_142_354_384_820_4e-17),
        ];
        for (x, sh, sl, ch, cl) in cases {
            let (s, c) = dd(x).sin_cos();
            let es = (s - DoubleDouble { hi: sh, lo: sl }).to_f64().abs();
            let ec = (c - DoubleDouble { hi: ch, lo: cl }).to_f64().abs();
            assert!(es < 1e-30 && ec < 1e-30, "x={x}: {es:e} {ec:e}");
        }
    }

    #[test]
    fn sin_cos_identity_and_small_arguments() {
        for i in 0..200 {
            let x = DoubleDouble::from_sum(-20.0 + 0.2 * i as f64, 1e-19 * i as f64);
            let (s, c) = x.sin_cos();
            assert!((s * s + c * c - dd(1.0)).to_f64().abs() < 1e-30);
            assert!((s.to_f64() - x.hi.sin()).abs() <= 1e-15);
        }
        let (s, c) = dd(0.0).sin_cos();
        assert_eq!((s.to_f64(), c.to_f64()), (0.0, 1.0));
    }

    #[test]
    fn ordering_uses_low_part() {
        assert!(dd(1.0) + dd(1e-20) > dd(1.0));
        assert!(dd(-2.0).abs() == dd(2.0));
        assert_eq!(DoubleDouble::from_i64(7).powi(3), dd(343.0));
    }
}
