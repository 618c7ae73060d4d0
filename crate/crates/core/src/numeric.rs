//! Scalar abstraction and small numerical helpers shared by every module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point scalar the whole crate is generic over (`f32` or `f64`).
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Converts an `f64` literal. Panics only for values the type cannot hold.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    #[inline]
    fn from_usize_exact(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Unevaluated sum `hi + lo` carried with roughly twice the working precision.
///
/// Used for prefix sums and ball sums so that the fast summed-area route and
/// direct cell enumeration round to the same scalar.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DoubleSum<T> {
    pub hi: T,
    pub lo: T,
}

#[inline]
fn two_sum<T: Real>(a: T, b: T) -> (T, T) {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    (s, err)
}

#[inline]
fn fast_two_sum<T: Real>(a: T, b: T) -> (T, T) {
    let s = a + b;
    let err = b - (s - a);
    (s, err)
}

impl<T: Real> DoubleSum<T> {
    pub fn zero() -> Self {
        Self { hi: T::zero(), lo: T::zero() }
    }

    pub fn from_scalar(x: T) -> Self {
        Self { hi: x, lo: T::zero() }
    }

    #[inline]
    pub fn add_scalar(self, x: T) -> Self {
        let (s, e) = two_sum(self.hi, x);
        let (hi, lo) = fast_two_sum(s, e + self.lo);
        Self { hi, lo }
    }

    #[inline]
    pub fn add(self, other: Self) -> Self {
        let (s, e) = two_sum(self.hi, other.hi);
        let (t, f) = two_sum(self.lo, other.lo);
        let (s, e) = fast_two_sum(s, e + t);
        let (hi, lo) = fast_two_sum(s, e + f);
        Self { hi, lo }
    }

    #[inline]
    pub fn neg(self) -> Self {
        Self { hi: -self.hi, lo: -self.lo }
    }

    #[inline]
    pub fn sub(self, other: Self) -> Self {
        self.add(other.neg())
    }

    /// Rounds to the working precision.
    #[inline]
    pub fn value(self) -> T {
        self.hi + self.lo
    }

    /// `(hi + lo) / n` with one correction step, so that an exact multiple
    /// `n·c` divides back to `c`.
    #[inline]
    pub fn div_count(self, n: usize) -> T {
        let d = T::from_usize_exact(n);
        let q = self.hi / d;
        let r = (-q).mul_add(d, self.hi) + self.lo;
        q + r / d
    }
}

/// Squared ball radius measured in lattice units, snapped to the nearest
/// integer radius when `rho` is an integer multiple of `h` up to rounding.
///
/// A lattice offset `(di, dj)` lies in the open ball iff `di² + dj² < r²`.
pub fn lattice_radius_sq<T: Real>(rho: T, h: T) -> T {
    let r = rho / h;
    let nearest = r.round();
    let snap_tol = T::lit(64.0) * T::epsilon() * nearest.max(T::one());
    let r = if (r - nearest).abs() <= snap_tol { nearest } else { r };
    r * r
}

/// Largest integer `k` with `k² < r2` (`None` when no offset fits, i.e. `r2 <= 0`).
pub fn max_offset_below<T: Real>(r2: T) -> Option<usize> {
    if r2 <= T::zero() {
        return None;
    }
    let mut k = r2.sqrt().floor().to_usize().unwrap_or(0);
    while k > 0 && T::from_usize_exact(k * k) >= r2 {
        k -= 1;
    }
    while T::from_usize_exact((k + 1) * (k + 1)) < r2 {
        k += 1;
    }
    Some(k)
}

/// Half-widths of the discrete open ball `{di² + dj² < r2}` for each row
/// offset `dj = 0..=dm`, together with the total lattice point count.
#[derive(Clone, Debug)]
pub struct BallStencil<T> {
    pub r2: T,
    pub half_widths: Vec<usize>,
    pub count: usize,
}

impl<T: Real> BallStencil<T> {
    pub fn new(r2: T) -> Option<Self> {
        let dm = max_offset_below(r2)?;
        let mut half_widths = Vec::with_capacity(dm + 1);
        let mut count = 0usize;
        for dj in 0..=dm {
            let rest = r2 - T::from_usize_exact(dj * dj);
            let w = max_offset_below(rest).unwrap_or(0);
            half_widths.push(w);
            let row = 2 * w + 1;
            count += if dj == 0 { row } else { 2 * row };
        }
        Some(Self { r2, half_widths, count })
    }

    pub fn reach(&self) -> usize {
        self.half_widths.len() - 1
    }
}

/// `x^e` that maps `0^e` with `e <= 0` to zero instead of infinity.
#[inline]
pub fn pow_or_zero<T: Real>(x: T, e: T) -> T {
    if x == T::zero() {
        if e > T::zero() {
            T::zero()
        } else if e == T::zero() {
            T::one()
        } else {
            T::zero()
        }
    } else {
        x.powf(e)
    }
}

pub(crate) fn norm2<T: Real>(v: (T, T)) -> T {
    (v.0 * v.0 + v.1 * v.1).sqrt()
}
