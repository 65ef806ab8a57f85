//! Double-double scalar for high-precision numeric references.

use std::cmp::Ordering;
use std::fmt;
use std::iter::Sum;
use std::num::FpCategory;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, Sub, SubAssign};

use num_traits::{FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};

use super::float::Float;

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`, about 106 bits of
/// mantissa. Only used to evaluate losses for finite differences, never for
/// training. Functions other than the arithmetic ops, `sqrt`, `exp` and `ln`
/// are evaluated in f64.
#[derive(Clone, Copy, Debug, Default)]
pub struct Dd {
    hi: f64,
    lo: f64,
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    if !s.is_finite() {
        return Dd { hi: s, lo: 0.0 };
    }
    Dd { hi: s, lo: b - (s - a) }
}

impl Dd {
    pub const fn new(hi: f64) -> Dd {
        Dd { hi, lo: 0.0 }
    }

    pub fn hi(self) -> f64 {
        self.hi
    }

    pub fn lo(self) -> f64 {
        self.lo
    }

    #[inline]
    fn mul_f64(self, b: f64) -> Dd {
        let p = self.hi * b;
        if !p.is_finite() {
            return Dd::new(p);
        }
        let e = self.hi.mul_add(b, -p) + self.lo * b;
        quick_two_sum(p, e)
    }

    #[inline]
    fn lift(self, f: impl Fn(f64) -> f64) -> Dd {
        Dd::new(f(self.hi + self.lo))
    }

    fn trunc_dd(self) -> Dd {
        let hi = self.hi.trunc();
        if hi != self.hi {
            Dd::new(hi)
        } else {
            quick_two_sum(hi, self.lo.trunc())
        }
    }
}

impl Add for Dd {
    type Output = Dd;
    #[inline]
    fn add(self, b: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, b.hi);
        if !s.is_finite() {
            return Dd::new(s);
        }
        let (t, f) = two_sum(self.lo, b.lo);
        let r = quick_two_sum(s, e + t);
        quick_two_sum(r.hi, r.lo + f)
    }
}

impl Neg for Dd {
    type Output = Dd;
    #[inline]
    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }
}

impl Sub for Dd {
    type Output = Dd;
    #[inline]
    fn sub(self, b: Dd) -> Dd {
        self + -b
    }
}

impl Mul for Dd {
    type Output = Dd;
    #[inline]
    fn mul(self, b: Dd) -> Dd {
        let p = self.hi * b.hi;
        if !p.is_finite() {
            return Dd::new(p);
        }
        let e = self.hi.mul_add(b.hi, -p) + (self.hi * b.lo + self.lo * b.hi);
        quick_two_sum(p, e)
    }
}

impl Div for Dd {
    type Output = Dd;
    #[inline]
    fn div(self, b: Dd) -> Dd {
        let q1 = self.hi / b.hi;
        if !q1.is_finite() || self.hi == 0.0 {
            return Dd::new(q1);
        }
        let r = self - b.mul_f64(q1);
        let q2 = r.hi / b.hi;
        let r = r - b.mul_f64(q2);
        let q3 = r.hi / b.hi;
        quick_two_sum(q1, q2) + Dd::new(q3)
    }
}

impl Rem for Dd {
    type Output = Dd;
    fn rem(self, b: Dd) -> Dd {
        self - (self / b).trunc_dd() * b
    }
}

macro_rules! assign {
    ($tr:ident, $f:ident, $op:tt) => {
        impl $tr for Dd {
            #[inline]
            fn $f(&mut self, b: Dd) {
                *self = *self $op b;
            }
        }
    };
}

assign!(AddAssign, add_assign, +);
assign!(SubAssign, sub_assign, -);
assign!(MulAssign, mul_assign, *);
assign!(DivAssign, div_assign, /);

impl PartialEq for Dd {
    fn eq(&self, o: &Dd) -> bool {
        self.partial_cmp(o) == Some(Ordering::Equal)
    }
}

impl PartialOrd for Dd {
    fn partial_cmp(&self, o: &Dd) -> Option<Ordering> {
        match self.hi.partial_cmp(&o.hi)? {
            Ordering::Equal if self.hi.is_finite() => self.lo.partial_cmp(&o.lo),
            ord => Some(ord),
        }
    }
}

impl Sum for Dd {
    fn sum<I: Iterator<Item = Dd>>(iter: I) -> Dd {
        iter.fold(Dd::zero(), |a, b| a + b)
    }
}

impl fmt::Display for Dd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.hi, f)
    }
}

impl Zero for Dd {
    fn zero() -> Self {
        Dd::new(0.0)
    }
    fn is_zero(&self) -> bool {
        self.hi == 0.0
    }
}

impl One for Dd {
    fn one() -> Self {
        Dd::new(1.0)
    }
}

impl Num for Dd {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Dd::new)
    }
}

impl ToPrimitive for Dd {
    fn to_i64(&self) -> Option<i64> {
        i64::try_from(self.to_i128()?).ok()
    }
    fn to_u64(&self) -> Option<u64> {
        u64::try_from(self.to_i128()?).ok()
    }
    fn to_i128(&self) -> Option<i128> {
        let t = self.trunc_dd();
        t.hi.to_i128()?.checked_add(t.lo.to_i128()?)
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.hi + self.lo)
    }
}

impl NumCast for Dd {
    fn from<N: ToPrimitive>(n: N) -> Option<Self> {
        n.to_f64().map(Dd::new)
    }
}

impl FromPrimitive for Dd {
    fn from_i64(n: i64) -> Option<Self> {
        let hi = n as f64;
        Some(quick_two_sum(hi, (n as i128 - hi as i128) as f64))
    }
    fn from_u64(n: u64) -> Option<Self> {
        let hi = n as f64;
        Some(quick_two_sum(hi, (n as i128 - hi as i128) as f64))
    }
    fn from_f64(n: f64) -> Option<Self> {
        Some(Dd::new(n))
    }
}

const LN_2: Dd = Dd { hi: std::f64::consts::LN_2, lo: 2.319_046_813_846_299_6e-17 };

/// `exp` by reduction to `r = x - k ln 2`, halving `r` eight times, a Taylor
/// series and repeated squaring.
fn dd_exp(x: Dd) -> Dd {
    if x.hi.is_nan() {
        return x;
    }
    if x.hi > 709.7 {
        return Dd::new(f64::INFINITY);
    }
    if x.hi < -745.0 {
        return Dd::zero();
    }
    let k = (x.hi / std::f64::consts::LN_2).round();
    let r = (x - LN_2.mul_f64(k)).mul_f64(1.0 / 256.0);
    let mut term = Dd::one();
    let mut sum = Dd::one();
    for n in 1..=14 {
        term = (term * r) / Dd::new(n as f64);
        sum += term;
    }
    for _ in 0..8 {
        sum = sum * sum;
    }
    let k = k as i32;
    sum.mul_f64(2f64.powi(k / 2)).mul_f64(2f64.powi(k - k / 2))
}

/// Natural log by Newton steps on `exp` from the f64 estimate.
fn dd_ln(x: Dd) -> Dd {
    if !(x.hi > 0.0) || x.hi.is_infinite() {
        return Dd::new(x.hi.ln());
    }
    let mut y = Dd::new(x.hi.ln());
    for _ in 0..2 {
        y = y + x * dd_exp(-y) - Dd::one();
    }
    y
}

/// One Newton step from the f64 root.
fn dd_sqrt(x: Dd) -> Dd {
    if !(x.hi > 0.0) || x.hi.is_infinite() {
        return Dd::new(x.hi.sqrt());
    }
    let y = Dd::new(x.hi.sqrt());
    y + (x - y * y) / y.mul_f64(2.0)
}

macro_rules! via_f64 {
    ($($f:ident),*) => {
        $(#[inline] fn $f(self) -> Self { self.lift(f64::$f) })*
    };
}

macro_rules! predicate {
    ($($f:ident),*) => {
        $(#[inline] fn $f(self) -> bool { self.hi.$f() })*
    };
}

macro_rules! constant {
    ($($f:ident = $v:expr),*) => {
        $(#[inline] fn $f() -> Self { Dd::new($v) })*
    };
}

impl num_traits::Float for Dd {
    constant!(
        nan = f64::NAN,
        infinity = f64::INFINITY,
        neg_infinity = f64::NEG_INFINITY,
        neg_zero = -0.0,
        min_value = f64::MIN,
        min_positive_value = f64::MIN_POSITIVE,
        max_value = f64::MAX,
        epsilon = 4.930_380_657_631_324e-32
    );
    predicate!(is_nan, is_infinite, is_finite, is_normal, is_sign_positive, is_sign_negative);
    via_f64!(
        floor, ceil, round, fract, signum, exp2, log2, log10, cbrt, sin, cos, tan, asin, acos, atan, exp_m1, ln_1p, sinh, cosh,
        tanh, asinh, acosh, atanh
    );

    fn trunc(self) -> Self {
        self.trunc_dd()
    }
    fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }
    fn recip(self) -> Self {
        Dd::one() / self
    }
    fn sqrt(self) -> Self {
        dd_sqrt(self)
    }
    fn exp(self) -> Self {
        dd_exp(self)
    }
    fn ln(self) -> Self {
        dd_ln(self)
    }
    fn classify(self) -> FpCategory {
        self.hi.classify()
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn powi(self, n: i32) -> Self {
        let mut base = if n < 0 { self.recip() } else { self };
        let mut e = n.unsigned_abs();
        let mut acc = Dd::one();
        while e > 0 {
            if e & 1 == 1 {
                acc *= base;
            }
            base = base * base;
            e >>= 1;
        }
        acc
    }
    fn powf(self, n: Self) -> Self {
        dd_exp(n * dd_ln(self))
    }
    fn log(self, base: Self) -> Self {
        dd_ln(self) / dd_ln(base)
    }
    fn max(self, o: Self) -> Self {
        if self >= o || o.is_nan() {
            self
        } else {
            o
        }
    }
    fn min(self, o: Self) -> Self {
        if self <= o || o.is_nan() {
            self
        } else {
            o
        }
    }
    #[allow(deprecated)]
    fn abs_sub(self, o: Self) -> Self {
        if self > o {
            self - o
        } else {
            Dd::zero()
        }
    }
    fn hypot(self, o: Self) -> Self {
        dd_sqrt(self * self + o * o)
    }
    fn atan2(self, o: Self) -> Self {
        Dd::new((self.hi + self.lo).atan2(o.hi + o.lo))
    }
    fn sin_cos(self) -> (Self, Self) {
        (self.lift(f64::sin), self.lift(f64::cos))
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        num_traits::Float::integer_decode(self.hi)
    }
}

impl Float for Dd {
    const NAME: &'static str = "dd";

    #[inline]
    fn from_f64_lossy(x: f64) -> Self {
        Dd::new(x)
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.hi + self.lo
    }
}
