//! Stochastic weight sampling, weight clipping, power-of-two quantization
//! and the exponent-adjusting multiply that replaces generic multiplies in
//! the weight-update outer product.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::{Matrix, TernaryMatrix};

/// Widest shift a budget may allow: the float32 significand width.
pub const MAX_SHIFT_BITS: u32 = 24;

/// Bounds on the exponent of a quantized activation: values are clamped to
/// `[2^-max_right_shift, 2^max_left_shift]` in magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShiftBudget {
    pub max_right_shift: u32,
    pub max_left_shift: u32,
}

impl ShiftBudget {
    pub fn new(max_right_shift: u32, max_left_shift: u32) -> Result<Self> {
        if max_right_shift > MAX_SHIFT_BITS || max_left_shift > MAX_SHIFT_BITS {
            return Err(Error::InvalidBudget {
                right: max_right_shift,
                left: max_left_shift,
            });
        }
        Ok(Self {
            max_right_shift,
            max_left_shift,
        })
    }

    pub fn symmetric(bits: u32) -> Result<Self> {
        Self::new(bits, bits)
    }

    /// The widest legal budget, used where quantization should be lossless
    /// for every representable power of two in range.
    pub fn widest() -> Self {
        Self {
            max_right_shift: MAX_SHIFT_BITS,
            max_left_shift: MAX_SHIFT_BITS,
        }
    }

    pub fn min_exponent(&self) -> i32 {
        -(self.max_right_shift as i32)
    }

    pub fn max_exponent(&self) -> i32 {
        self.max_left_shift as i32
    }

    pub fn as_pair(&self) -> (u32, u32) {
        (self.max_right_shift, self.max_left_shift)
    }
}

impl Default for ShiftBudget {
    fn default() -> Self {
        Self {
            max_right_shift: 3,
            max_left_shift: 4,
        }
    }
}

/// `sign · 2^exponent`; `sign == 0` is exact zero and the exponent is then
/// meaningless (kept at 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pow2Value {
    pub sign: i8,
    pub exponent: i8,
}

impl Pow2Value {
    pub const ZERO: Pow2Value = Pow2Value { sign: 0, exponent: 0 };

    pub fn new(sign: i8, exponent: i8) -> Self {
        debug_assert!((-1..=1).contains(&sign));
        if sign == 0 {
            Self::ZERO
        } else {
            Self { sign, exponent }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.sign == 0
    }

    pub fn dequantize(&self) -> f32 {
        if self.sign == 0 {
            0.0
        } else {
            self.sign as f32 * (self.exponent as f32).exp2()
        }
    }
}

/// Sampling rule for turning full-precision weights into sign weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleKind {
    Binary,
    Ternary,
}

fn check_range(wbar: f32) -> Result<()> {
    if !(-1.0..=1.0).contains(&wbar) {
        return Err(Error::Unclipped { value: wbar });
    }
    Ok(())
}

#[inline]
fn binarize_in_range(wbar: f32, prng: &mut Prng) -> i8 {
    if prng.uniform() < (wbar as f64 + 1.0) / 2.0 {
        1
    } else {
        -1
    }
}

#[inline]
fn ternarize_in_range(wbar: f32, prng: &mut Prng) -> i8 {
    let u = prng.uniform();
    if wbar > 0.0 {
        (u < wbar as f64) as i8
    } else {
        -((u < -(wbar as f64)) as i8)
    }
}

/// +1 with probability `(wbar + 1) / 2`, otherwise -1. One uniform draw.
pub fn binarize(wbar: f32, prng: &mut Prng) -> Result<i8> {
    check_range(wbar)?;
    Ok(binarize_in_range(wbar, prng))
}

/// For `wbar > 0`: +1 with probability `wbar`, else 0.
/// For `wbar <= 0`: -1 with probability `-wbar`, else 0. One uniform draw.
pub fn ternarize(wbar: f32, prng: &mut Prng) -> Result<i8> {
    check_range(wbar)?;
    Ok(ternarize_in_range(wbar, prng))
}

pub fn sample(wbar: f32, kind: SampleKind, prng: &mut Prng) -> Result<i8> {
    match kind {
        SampleKind::Binary => binarize(wbar, prng),
        SampleKind::Ternary => ternarize(wbar, prng),
    }
}

/// Samples every entry of `wbar`, row-major, one draw per weight.
pub fn sample_matrix(wbar: &Matrix, kind: SampleKind, prng: &mut Prng) -> Result<TernaryMatrix> {
    if let Some(&w) = wbar.data().iter().find(|w| !(-1.0..=1.0).contains(*w)) {
        return Err(Error::Unclipped { value: w });
    }
    let data = match kind {
        SampleKind::Binary => wbar.data().iter().map(|&w| binarize_in_range(w, prng)).collect(),
        SampleKind::Ternary => wbar.data().iter().map(|&w| ternarize_in_range(w, prng)).collect(),
    };
    TernaryMatrix::from_vec(wbar.rows(), wbar.cols(), data)
}

#[inline]
pub fn clip(w: f32) -> f32 {
    w.clamp(-1.0, 1.0)
}

pub fn clip_matrix(m: &mut Matrix) {
    for w in m.data_mut() {
        *w = clip(*w);
    }
}

/// Nearest integer to `log2|x|` for finite nonzero `x`, without clamping.
///
/// Decomposes `|x| = m · 2^e` with `m ∈ [1, 2)` and rounds up iff
/// `m > √2`. No float32 significand equals √2, so the half-way case of
/// round-half-to-even never arises and this is exactly
/// `round_ties_even(log2|x|)`.
pub fn nearest_log2(x: f32) -> i32 {
    debug_assert!(x.is_finite() && x != 0.0);
    // widening makes float32 subnormals normal
    let bits = (x.abs() as f64).to_bits();
    let e = ((bits >> 52) & 0x7ff) as i32 - 1023;
    let m = f64::from_bits((bits & 0x000f_ffff_ffff_ffff) | 0x3ff0_0000_0000_0000);
    if m > std::f64::consts::SQRT_2 {
        e + 1
    } else {
        e
    }
}

pub fn pow2_quantize(x: f32, budget: ShiftBudget) -> Pow2Value {
    if x == 0.0 {
        return Pow2Value::ZERO;
    }
    let e = nearest_log2(x).clamp(budget.min_exponent(), budget.max_exponent());
    Pow2Value {
        sign: if x > 0.0 { 1 } else { -1 },
        exponent: e as i8,
    }
}

/// Scales `a` by `2^k` by editing its exponent field.
///
/// Subnormal results are rounded to nearest-even exactly as an IEEE
/// multiply would round them. The flag is set when the result would
/// overflow, in which case the value saturates to the largest finite
/// magnitude.
pub fn scale_by_pow2(a: f32, k: i32) -> (f32, bool) {
    let bits = a.to_bits();
    let sign = bits & 0x8000_0000;
    let mag = bits & 0x7fff_ffff;
    if mag == 0 || mag >= 0x7f80_0000 {
        return (a, false);
    }
    let exp_field = (mag >> 23) as i32;
    let (sig, e) = if exp_field == 0 {
        let lz = mag.leading_zeros() as i32 - 8;
        (mag << lz, 1 - lz)
    } else {
        ((mag & 0x007f_ffff) | 0x0080_0000, exp_field)
    };
    let ne = e + k;
    if ne >= 255 {
        return (f32::from_bits(sign | 0x7f7f_ffff), true);
    }
    if ne >= 1 {
        return (f32::from_bits(sign | ((ne as u32) << 23) | (sig & 0x007f_ffff)), false);
    }
    let shift = (1 - ne) as u32;
    if shift > 24 {
        return (f32::from_bits(sign), false);
    }
    let mut q = sig >> shift;
    let rem = sig & ((1u32 << shift) - 1);
    let half = 1u32 << (shift - 1);
    if rem > half || (rem == half && q & 1 == 1) {
        q += 1;
    }
    (f32::from_bits(sign | q), false)
}

/// `a · q.sign · 2^q.exponent` without a generic multiply. Returns the
/// product and whether it saturated.
#[inline]
pub fn shift_mul_flagged(a: f32, q: Pow2Value) -> (f32, bool) {
    if q.sign == 0 {
        // a · (+0) keeps the sign of a
        return (f32::from_bits(a.to_bits() & 0x8000_0000), false);
    }
    let (v, saturated) = scale_by_pow2(a, q.exponent as i32);
    if q.sign < 0 {
        (f32::from_bits(v.to_bits() ^ 0x8000_0000), saturated)
    } else {
        (v, saturated)
    }
}

#[inline]
pub fn shift_mul(a: f32, q: Pow2Value) -> f32 {
    shift_mul_flagged(a, q).0
}

avx2_dispatch! {
    /// `acc[i] += values[i]` with `offset` added to the raw bits of each
    /// nonzero value; zeros contribute `+0`.
    fn add_offset_products(acc: &mut [f32], values: &[f32], offset: u32) {
        for (a, v) in acc.iter_mut().zip(values) {
            let bits = v.to_bits();
            let mask = (((bits & 0x7fff_ffff) != 0) as u32).wrapping_neg();
            *a += f32::from_bits(bits.wrapping_add(offset) & mask);
        }
    }
}

/// A row of multiplicands to be scaled by one power-of-two code at a time.
///
/// When every nonzero value's exponent field leaves room for the whole
/// budget, scaling runs branch-free on raw bits; otherwise each element
/// takes the general path.
#[derive(Debug, Clone, Copy)]
pub struct ShiftRow<'a> {
    values: &'a [f32],
    fast: bool,
}

impl<'a> ShiftRow<'a> {
    pub fn new(values: &'a [f32], budget: ShiftBudget) -> Self {
        let fast = values.iter().all(|v| {
            let e = ((v.to_bits() >> 23) & 0xff) as i32;
            *v == 0.0 || (e + budget.min_exponent() >= 1 && e + budget.max_exponent() <= 254)
        });
        Self { values, fast }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `acc[i] += shift_mul(values[i], q)` for every `i`; returns the number
    /// of saturated products.
    ///
    /// Zero products are added as `+0` whatever their sign, so `acc` must
    /// not hold `-0.0`. An accumulator that starts at `+0` never does.
    pub fn accumulate_into(&self, acc: &mut [f32], q: Pow2Value) -> u64 {
        debug_assert_eq!(acc.len(), self.values.len());
        if q.sign == 0 {
            return 0;
        }
        if self.fast {
            let mut offset = ((q.exponent as i32) << 23) as u32;
            if q.sign < 0 {
                offset = offset.wrapping_add(0x8000_0000);
            }
            add_offset_products(acc, self.values, offset);
            0
        } else {
            let mut saturated = 0;
            for (a, &v) in acc.iter_mut().zip(self.values) {
                let (p, s) = shift_mul_flagged(v, q);
                saturated += s as u64;
                *a += p;
            }
            saturated
        }
    }
}
