//! Floating-point element types the engine is instantiated for.

use std::fmt::{Debug, Display};

use num_traits::Float;

/// Element type of bound arrays and evaluation results.
///
/// Implemented for `f32` and `f64`. Every evaluation path (the single-pair
/// evaluator, the tile interpreter and the dense oracle) goes through these
/// methods, so a given input produces the same bits on all of them.
pub trait Scalar: Float + Default + Debug + Display + Send + Sync + 'static {
    /// Short name used in reports (`"f32"` / `"f64"`).
    const NAME: &'static str;

    fn exponential(self) -> Self;

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Sign with `sign(0) = 0` and `sign(NaN) = NaN`.
    #[inline(always)]
    fn sign(self) -> Self {
        if self > Self::zero() {
            Self::one()
        } else if self < Self::zero() {
            -Self::one()
        } else if self == Self::zero() {
            Self::zero()
        } else {
            self
        }
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline(always)]
    fn exponential(self) -> Self {
        self.exp()
    }

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline(always)]
    fn exponential(self) -> Self {
        exp_f32(self)
    }

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

/// Branch-free single precision `exp`, accurate to about 2 ulp.
///
/// libm's `expf` is an opaque call that blocks vectorization of tile loops;
/// this version compiles to straight-line SIMD code. Round-to-nearest
/// reduction `x = n ln2 + r` with a two-constant ln2 split, a degree-6
/// polynomial for `e^r`, and the `2^n` scale applied in two halves so that
/// subnormal results and the top of the range stay representable.
#[inline(always)]
pub fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    const ROUND: f32 = 12_582_912.0; // 1.5 * 2^23
    const HI: f32 = 88.722_84;
    const LO: f32 = -104.0;

    let xc = x.clamp(LO, HI);
    let t = xc * LOG2E + ROUND;
    let n = t - ROUND;
    let r = xc - n * LN2_HI - n * LN2_LO;
    let z = r * r;
    let mut p = 1.987_569_1e-4_f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 0.5;
    let y = p * z + r + 1.0;
    // The rounded integer sits in the low mantissa bits of `t`.
    let ni = (t.to_bits() as i32).wrapping_sub(ROUND.to_bits() as i32);
    let n1 = ni >> 1;
    let n2 = ni.wrapping_sub(n1);
    let s1 = f32::from_bits((n1.wrapping_add(127) as u32) << 23);
    let s2 = f32::from_bits((n2.wrapping_add(127) as u32) << 23);
    let out = y * s1 * s2;
    if x > HI {
        f32::INFINITY
    } else {
        out
    }
}
