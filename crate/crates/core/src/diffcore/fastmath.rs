//! Branch-free `exp`, `expm1` and `tanh` for the hot elementwise loops.
//!
//! The libm versions are accurate but opaque to the vectorizer; these are
//! written so that loops over slices compile to SIMD code. Accuracy is a
//! couple of ulps over the full double range, which is well below what the
//! finite-difference gradient checks can resolve.

const LN2_HI: f64 = 6.931_471_803_691_238e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
const LOG2E: f64 = std::f64::consts::LOG2_E;
// 1.5 * 2^52: adding and subtracting rounds to the nearest integer.
const ROUND_SHIFT: f64 = 6_755_399_441_055_744.0;
const ROUND_SHIFT_BITS: u64 = 0x4338_0000_0000_0000;

const EXP_HI: f64 = 709.0;
const EXP_LO: f64 = -708.3;
const HALF_LN2: f64 = 0.346_573_590_279_972_65;

// 1/k! for k = 2..=13
const INV_FACT: [f64; 12] = [
    1.0 / 2.0,
    1.0 / 6.0,
    1.0 / 24.0,
    1.0 / 120.0,
    1.0 / 720.0,
    1.0 / 5040.0,
    1.0 / 40320.0,
    1.0 / 362_880.0,
    1.0 / 3_628_800.0,
    1.0 / 39_916_800.0,
    1.0 / 479_001_600.0,
    1.0 / 6_227_020_800.0,
];

/// `e^r - 1` for |r| <= ln2/2 without cancellation. The polynomial is
/// evaluated in Estrin form to keep the dependency chain short.
#[inline(always)]
fn expm1_reduced(r: f64) -> f64 {
    let c = &INV_FACT;
    let r2 = r * r;
    let r4 = r2 * r2;
    let r8 = r4 * r4;
    let q0 = (c[0] + c[1] * r) + (c[2] + c[3] * r) * r2;
    let q1 = (c[4] + c[5] * r) + (c[6] + c[7] * r) * r2;
    let q2 = (c[8] + c[9] * r) + (c[10] + c[11] * r) * r2;
    let p = q0 + q1 * r4 + q2 * r8;
    // r + r^2 (1/2 + r/6 + ...)
    r + r2 * p
}

/// `(k, r)` with `x = k ln2 + r`, `|r| <= ln2/2`, for `x` already clamped.
#[inline(always)]
fn reduce(x: f64) -> (f64, f64, u64) {
    let shifted = x * LOG2E + ROUND_SHIFT;
    let k = shifted - ROUND_SHIFT;
    let r = x - k * LN2_HI - k * LN2_LO;
    (k, r, shifted.to_bits())
}

/// `2^k` from the bits of `k + ROUND_SHIFT`, for `-1022 <= k <= 1023`.
#[inline(always)]
fn pow2(shifted_bits: u64) -> f64 {
    let ki = shifted_bits.wrapping_sub(ROUND_SHIFT_BITS) as i64;
    f64::from_bits(((ki + 1023) as u64) << 52)
}

#[inline(always)]
pub fn exp(x: f64) -> f64 {
    let xc = x.clamp(EXP_LO, EXP_HI);
    let (_, r, bits) = reduce(xc);
    let y = (1.0 + expm1_reduced(r)) * pow2(bits);
    let y = if x > EXP_HI { f64::INFINITY } else { y };
    if x < EXP_LO {
        0.0
    } else {
        y
    }
}

#[inline(always)]
pub fn expm1(x: f64) -> f64 {
    let small = expm1_reduced(x);
    let large = exp(x) - 1.0;
    if x.abs() < HALF_LN2 {
        small
    } else {
        large
    }
}

// Below this, e^y is under half an ulp of 1 and tanh has saturated.
const TANH_ARG_LO: f64 = -40.0;

#[inline(always)]
pub fn tanh(x: f64) -> f64 {
    // e = expm1(-2|x|) = 2^k expm1(r) + (2^k - 1), k <= 0
    let y = (-2.0 * x.abs()).max(TANH_ARG_LO);
    let (_, r, bits) = reduce(y);
    let scale = pow2(bits);
    let e = scale * expm1_reduced(r) + (scale - 1.0);
    let t = (-e / (2.0 + e)).copysign(x);
    if x.is_nan() {
        x
    } else {
        t
    }
}

#[inline(always)]
fn exp_slice(xs: &mut [f64]) {
    for x in xs.iter_mut() {
        *x = exp(*x);
    }
}

#[inline(always)]
fn tanh_slice(xs: &mut [f64]) {
    for x in xs.iter_mut() {
        *x = tanh(*x);
    }
}

// The same IEEE operations compiled for wider registers; results are
// bitwise identical to the baseline build.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn exp_slice_avx2(xs: &mut [f64]) {
    exp_slice(xs)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn tanh_slice_avx2(xs: &mut [f64]) {
    tanh_slice(xs)
}

#[cfg(target_arch = "x86_64")]
fn has_avx2() -> bool {
    is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma")
}

pub fn exp_inplace(xs: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { exp_slice_avx2(xs) };
        return;
    }
    exp_slice(xs)
}

pub fn tanh_inplace(xs: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { tanh_slice_avx2(xs) };
        return;
    }
    tanh_slice(xs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        if a == b {
            0.0
        } else {
            (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
        }
    }

    #[test]
    fn exp_matches_libm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut worst = 0.0f64;
        for _ in 0..200_000 {
            let x: f64 = rng.random_range(-700.0..700.0);
            worst = worst.max(rel_err(exp(x), x.exp()));
            let y: f64 = rng.random_range(-2.0..2.0);
            worst = worst.max(rel_err(exp(y), y.exp()));
        }
        assert!(worst < 1e-15, "worst relative error {worst}");
        assert_eq!(exp(0.0), 1.0);
        assert_eq!(exp(-1000.0), 0.0);
        assert_eq!(exp(1000.0), f64::INFINITY);
        assert!(exp(f64::NAN).is_nan());
    }

    #[test]
    fn tanh_matches_libm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut worst = 0.0f64;
        for _ in 0..200_000 {
            let x: f64 = rng.random_range(-20.0..20.0);
            worst = worst.max(rel_err(tanh(x), x.tanh()));
            let y: f64 = rng.random_range(-1e-3..1e-3);
            worst = worst.max(rel_err(tanh(y), y.tanh()));
        }
        assert!(worst < 1e-15, "worst relative error {worst}");
        assert_eq!(tanh(0.0), 0.0);
        assert_eq!(tanh(50.0), 1.0);
        assert_eq!(tanh(-50.0), -1.0);
    }

    #[test]
    fn expm1_small_arguments_keep_precision() {
        for &x in &[1e-12, -3e-9, 1e-5, 0.3, -0.3, 2.0] {
            assert!(rel_err(expm1(x), x.exp_m1()) < 1e-15, "x = {x}");
        }
    }
}
