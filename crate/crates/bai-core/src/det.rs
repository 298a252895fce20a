//! Deterministic scalar math.
//!
//! Every number that ends up in a metrics CSV, a checkpoint or a digest must be
//! a pure function of IEEE-754 add/sub/mul/div/sqrt in a fixed evaluation
//! order. The platform libm's `exp`/`ln` are not that — they differ between
//! hosts — so this module carries its own range-reduced polynomial kernels and
//! the rest of the crate never calls libm for transcendentals. `mul_add` (FMA)
//! is also banned in numeric paths for the same reason.

/// High/low split of ln(2) so `x - k*ln2` keeps full precision for |k| ≲ 1100.
const LN2_HI: f64 = 6.931471803691238e-1;
const LN2_LO: f64 = 1.9082149292705877e-10;
const SQRT_2: f64 = core::f64::consts::SQRT_2;

/// 1/n! for the exp Taylor tail, n = 2..=13.
const INV_FACT: [f64; 12] = [
    5.0e-1,                    // 1/2!
    1.6666666666666666e-1,     // 1/3!
    4.1666666666666664e-2,     // 1/4!
    8.333333333333333e-3,      // 1/5!
    1.3888888888888889e-3,     // 1/6!
    1.984126984126984e-4,      // 1/7!
    2.48015873015873e-5,       // 1/8!
    2.7557319223985893e-6,     // 1/9!
    2.755731922398589e-7,      // 1/10!
    2.505210838544172e-8,      // 1/11!
    2.08767569878681e-9,       // 1/12!
    1.6059043836821613e-10,    // 1/13!
];

/// Exact powers of two for final scaling; k clamped to the representable range.
fn pow2i(k: i64) -> f64 {
    if k >= -1022 && k <= 1023 {
        f64::from_bits(((k + 1023) as u64) << 52)
    } else if k > 1023 {
        f64::INFINITY
    } else {
        // subnormal range: build in two exact steps
        let half = pow2i(-512);
        half * pow2i(k + 512)
    }
}

/// exp(x), accurate to a few ulp, identical bits on every IEEE-754 host.
pub fn exp(x: f64) -> f64 {
    if x.is_nan() {
        return x;
    }
    if x > 709.782712893384 {
        return f64::INFINITY;
    }
    if x < -745.2 {
        return 0.0;
    }
    // x = k*ln2 + r with |r| <= ln2/2; round() (half away from zero) is exact.
    let k = (x * core::f64::consts::LOG2_E).round();
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // exp(r) = 1 + r + sum_{n>=2} r^n/n!, Horner in fixed order.
    let mut p = INV_FACT[11];
    for i in (0..11).rev() {
        p = p * r + INV_FACT[i];
    }
    let er = 1.0 + r + r * r * p;
    er * pow2i(k as i64)
}

/// ln(x), accurate to a few ulp, identical bits on every IEEE-754 host.
/// Domain behaviour matches libm: ln(0) = -inf, ln(neg) = NaN.
pub fn ln(x: f64) -> f64 {
    if x.is_nan() || x < 0.0 {
        return f64::NAN;
    }
    if x == 0.0 {
        return f64::NEG_INFINITY;
    }
    if x == f64::INFINITY {
        return x;
    }
    let mut bits = x.to_bits();
    let mut e = 0i64;
    if bits >> 52 == 0 {
        // subnormal: renormalize by 2^54 (exact)
        bits = (x * 18014398509481984.0).to_bits();
        e -= 54;
    }
    e += ((bits >> 52) & 0x7ff) as i64 - 1023;
    let mut m = f64::from_bits((bits & 0x000f_ffff_ffff_ffff) | (1023u64 << 52));
    if m > SQRT_2 {
        m *= 0.5;
        e += 1;
    }
    // ln m = 2 atanh(r), r = (m-1)/(m+1), |r| <= (sqrt2-1)/(sqrt2+1) ~ 0.1716
    let r = (m - 1.0) / (m + 1.0);
    let r2 = r * r;
    let mut p = 1.0 / 19.0;
    for d in [17.0, 15.0, 13.0, 11.0, 9.0, 7.0, 5.0, 3.0] {
        p = p * r2 + 1.0 / d;
    }
    let lnm = 2.0 * r + 2.0 * r * (r2 * p);
    let ef = e as f64;
    ef * LN2_HI + (ef * LN2_LO + lnm)
}

/// ln(1+x) with the naive 1+x fold; fine for |x| down to ~1e-12, which is all
/// the loss code needs (softplus arguments are never catastrophically tiny).
pub fn ln_1p(x: f64) -> f64 {
    ln(1.0 + x)
}

/// Logistic sigmoid via the deterministic exp.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// softplus(x) = ln(1 + e^x), overflow-safe; -ln sigmoid(x) = softplus(-x).
pub fn softplus(x: f64) -> f64 {
    if x > 36.0 {
        x
    } else if x < -36.0 {
        exp(x)
    } else {
        ln_1p(exp(x))
    }
}

// ---------------------------------------------------------------------------
// Compensated (double-double) arithmetic for the merge engine
// ---------------------------------------------------------------------------

/// Knuth two-sum: s = fl(a+b), e the exact rounding error.
#[inline]
pub fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let e = (a - (s - bb)) + (b - bb);
    (s, e)
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    // requires |a| >= |b|
    let s = a + b;
    (s, b - (s - a))
}

/// Dekker product without FMA: p = fl(a*b), e the exact error.
#[inline]
pub fn two_prod(a: f64, b: f64) -> (f64, f64) {
    const SPLIT: f64 = 134217729.0; // 2^27 + 1
    let p = a * b;
    let ta = SPLIT * a;
    let ah = ta - (ta - a);
    let al = a - ah;
    let tb = SPLIT * b;
    let bh = tb - (tb - b);
    let bl = b - bh;
    let e = ((ah * bh - p) + ah * bl + al * bh) + al * bl;
    (p, e)
}

/// Running double-double accumulator. Accumulating k products this way keeps
/// ~106 bits, so the rounded result is the correctly rounded true sum for any
/// realistic k — which is what makes merge idempotence exact and the result
/// independent of summation order.
#[derive(Clone, Copy, Default)]
pub struct DdAcc {
    hi: f64,
    lo: f64,
}

impl DdAcc {
    pub fn add_prod(&mut self, a: f64, b: f64) {
        let (p, pe) = two_prod(a, b);
        let (s, se) = two_sum(self.hi, p);
        let lo = self.lo + (se + pe);
        let (h, l) = quick_two_sum(s, lo);
        self.hi = h;
        self.lo = l;
    }

    pub fn value(self) -> f64 {
        self.hi + self.lo
    }
}

// ---------------------------------------------------------------------------
// Scalar abstraction: f32 production paths, f64 verification paths
// ---------------------------------------------------------------------------

use core::fmt::Debug;
use core::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// The float the model runs on. f32 for training speed, f64 for the
/// finite-difference test mode. Transcendentals route through this module.
pub trait Real:
    Copy
    + PartialOrd
    + Debug
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maxv(self, o: Self) -> Self;
    fn is_finite(self) -> bool;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        exp(self as f64) as f32
    }
    fn ln(self) -> Self {
        ln(self as f64) as f32
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self) // IEEE-exact
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn maxv(self, o: Self) -> Self {
        if self >= o {
            self
        } else {
            o
        }
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        exp(self)
    }
    fn ln(self) -> Self {
        ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self) // IEEE-exact
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn maxv(self, o: Self) -> Self {
        if self >= o {
            self
        } else {
            o
        }
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

// ---------------------------------------------------------------------------
// Fixed-order dense kernels
// ---------------------------------------------------------------------------

/// Dot product over eight independent lanes combined in a fixed tree.
/// Reproducible (the reduction order never depends on data or thread count)
/// and fast (the lanes vectorize without any float reassociation).
pub fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let c8 = n / 8 * 8;
    let mut l = [R::ZERO; 8];
    let mut i = 0;
    while i < c8 {
        l[0] += a[i] * b[i];
        l[1] += a[i + 1] * b[i + 1];
        l[2] += a[i + 2] * b[i + 2];
        l[3] += a[i + 3] * b[i + 3];
        l[4] += a[i + 4] * b[i + 4];
        l[5] += a[i + 5] * b[i + 5];
        l[6] += a[i + 6] * b[i + 6];
        l[7] += a[i + 7] * b[i + 7];
        i += 8;
    }
    let mut tail = R::ZERO;
    while i < n {
        tail += a[i] * b[i];
        i += 1;
    }
    (((l[0] + l[1]) + (l[2] + l[3])) + ((l[4] + l[5]) + (l[6] + l[7]))) + tail
}

/// y += s * x
pub fn axpy<R: Real>(y: &mut [R], s: R, x: &[R]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += s * *xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_err(a: f64, b: f64) -> f64 {
        if a == b {
            return 0.0;
        }
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn exp_matches_libm_closely() {
        // plain grid plus awkward spots near the reduction boundaries
        let mut xs: Vec<f64> = (-2000..=2000).map(|i| i as f64 * 0.173).collect();
        xs.extend([0.0, 1.0, -1.0, 1e-12, -1e-12, 0.34657, -0.34657, 709.0, -700.0]);
        for x in xs {
            let got = exp(x);
            let want = x.exp();
            assert!(
                rel_err(got, want) < 5e-15,
                "exp({x}): got {got:e}, libm {want:e}"
            );
        }
        assert_eq!(exp(0.0), 1.0);
        assert_eq!(exp(f64::NEG_INFINITY), 0.0);
        assert_eq!(exp(f64::INFINITY), f64::INFINITY);
        assert_eq!(exp(800.0), f64::INFINITY);
        assert_eq!(exp(-800.0), 0.0);
        assert!(exp(f64::NAN).is_nan());
    }

    #[test]
    fn ln_matches_libm_closely() {
        let mut xs: Vec<f64> = (1..=4000).map(|i| i as f64 * 0.37).collect();
        xs.extend([1e-300, 1e-12, 0.1, 0.5, 0.9999999, 1.0000001, 1.0, 2.0, SQRT_2, 1e300]);
        for x in xs {
            let got = ln(x);
            let want = x.ln();
            let tol = 1e-14 * want.abs().max(1.0);
            assert!(
                (got - want).abs() <= tol,
                "ln({x}): got {got:e}, libm {want:e}"
            );
        }
        assert_eq!(ln(1.0), 0.0);
        assert_eq!(ln(0.0), f64::NEG_INFINITY);
        assert!(ln(-1.0).is_nan());
        assert_eq!(ln(f64::INFINITY), f64::INFINITY);
    }

    #[test]
    fn exp_ln_roundtrip() {
        for i in 1..500 {
            let x = i as f64 * 0.13;
            assert!(rel_err(ln(exp(x)), x) < 1e-13, "roundtrip at {x}");
        }
    }

    #[test]
    fn sigmoid_and_softplus_behave() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(5.0) + sigmoid(-5.0) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-1000.0) == 0.0);
        assert!(sigmoid(1000.0) == 1.0);
        // softplus(0) = ln 2
        assert!((softplus(0.0) - core::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(40.0) - 40.0).abs() < 1e-12);
    }

    #[test]
    fn dd_accumulator_is_exact_for_cancelling_products() {
        // sum of w_i * x with identical x and w summing to exactly 1 must give x back
        let x = 0.1_f64;
        let ws = [1.0 / 3.0, 1.0 / 3.0, 1.0 - 2.0 * (1.0 / 3.0)];
        let mut acc = DdAcc::default();
        for w in ws {
            acc.add_prod(w, x);
        }
        assert_eq!(acc.value(), x);
        // order independence on a rounding-hostile mix
        let pairs = [(1e16, 1.0), (1.0, -1e16), (3.0, 0.1), (-1.0, 0.2), (7.5e-9, 2.0)];
        let mut fwd = DdAcc::default();
        for (a, b) in pairs {
            fwd.add_prod(a, b);
        }
        let mut rev = DdAcc::default();
        for (a, b) in pairs.iter().rev() {
            rev.add_prod(*a, *b);
        }
        assert_eq!(fwd.value().to_bits(), rev.value().to_bits());
    }

    #[test]
    fn blocked_dot_matches_naive_in_f64() {
        let a: Vec<f64> = (0..37).map(|i| (i as f64) * 0.1 - 1.7).collect();
        let b: Vec<f64> = (0..37).map(|i| 0.3 - (i as f64) * 0.05).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }
}
