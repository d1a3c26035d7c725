//! Standard-normal primitives used by the Lloyd-Max solver and the seeded
//! samplers.
//!
//! The CDF is evaluated through `libm`'s double-precision `erfc` (better than
//! 1e-15 relative over the range used here), and the quantile function is
//! Wichura's AS 241 `PPND16` rational approximation (about 1e-15 absolute).
//! Both comfortably exceed the 1e-12 accuracy the distortion table
//! reproduction needs.

use rand_core::RngCore;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Standard normal density.
#[inline]
pub fn pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF, evaluated via `erfc` so both tails keep full
/// relative accuracy.
#[inline]
pub fn cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal quantile function (inverse CDF), AS 241 `PPND16`.
///
/// Returns `-inf`/`inf` at `p = 0`/`p = 1` and NaN outside `[0, 1]`.
pub fn inv_cdf(p: f64) -> f64 {
    if p.is_nan() || !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }

    let q = p - 0.5;
    if q.abs() <= 0.425 {
        // Central region: rational approximation in r = 0.180625 - q^2.
        let r = 0.180_625 - q * q;
        return q * poly(&PPND16_A, r) / poly(&PPND16_B, r);
    }
    // Tails: rational approximation in sqrt(-ln(min(p, 1-p))).
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        let r = r - 1.6;
        poly(&PPND16_C, r) / poly(&PPND16_D, r)
    } else {
        let r = r - 5.0;
        poly(&PPND16_E, r) / poly(&PPND16_F, r)
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

#[inline]
fn poly(coeffs: &[f64; 8], x: f64) -> f64 {
    // Horner, highest coefficient first in storage order below.
    coeffs
        .iter()
        .rev()
        .fold(0.0, |acc, &c| acc * x + c)
}

// AS 241 PPND16 coefficients (Wichura 1988), stored lowest order first.
#[allow(clippy::excessive_precision)]
const PPND16_A: [f64; 8] = [
    3.387_132_872_796_366_5,
    1.331_416_678_917_843_8e2,
    1.971_590_950_306_551_3e3,
    1.373_169_376_550_946_1e4,
    4.592_195_393_154_987e4,
    6.726_577_092_700_87e4,
    3.343_057_558_358_813e4,
    2.509_080_928_730_122_7e3,
];
#[allow(clippy::excessive_precision)]
const PPND16_B: [f64; 8] = [
    1.0,
    4.231_333_070_160_091e1,
    6.871_870_074_920_579e2,
    5.394_196_021_424_751e3,
    2.121_379_430_158_659_7e4,
    3.930_789_580_009_271e4,
    2.872_908_573_572_194_3e4,
    5.226_495_278_852_545_6e3,
];
#[allow(clippy::excessive_precision)]
const PPND16_C: [f64; 8] = [
    1.423_437_110_749_683_5,
    4.630_337_846_156_545,
    5.769_497_221_460_691,
    3.647_848_324_763_204_5,
    1.270_458_252_452_368_4,
    2.417_807_251_774_506e-1,
    2.272_384_498_926_918_4e-2,
    7.745_450_142_783_414e-4,
];
#[allow(clippy::excessive_precision)]
const PPND16_D: [f64; 8] = [
    1.0,
    2.053_191_626_637_759,
    1.676_384_830_183_803_8,
    6.897_673_349_851e-1,
    1.481_039_764_274_800_8e-1,
    1.519_866_656_361_645_7e-2,
    5.475_938_084_995_345e-4,
    1.050_750_071_644_416_9e-9,
];
#[allow(clippy::excessive_precision)]
const PPND16_E: [f64; 8] = [
    6.657_904_643_501_103,
    5.463_784_911_164_114,
    1.784_826_539_917_291_3,
    2.965_605_718_285_048_9e-1,
    2.653_218_952_657_612_4e-2,
    1.242_660_947_388_078_4e-3,
    2.711_555_568_743_487_6e-5,
    2.010_334_399_292_288_1e-7,
];
#[allow(clippy::excessive_precision)]
const PPND16_F: [f64; 8] = [
    1.0,
    5.998_322_065_558_88e-1,
    1.369_298_809_227_358e-1,
    1.487_536_129_085_061_5e-2,
    7.868_691_311_456_133e-4,
    1.846_318_317_510_054_8e-5,
    1.421_511_758_316_446e-7,
    2.044_263_103_389_939_7e-15,
];

/// Uniform draw in the open interval (0, 1) with 53-bit resolution.
///
/// Uses the top 53 bits of one `u64`, offset by half an ulp so 0 and 1 are
/// never returned. This keeps the normal sampler below well defined.
#[inline]
pub fn uniform_open01<R: RngCore>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal draw by inverse-CDF transform of one uniform.
///
/// Chosen over ziggurat-style samplers so the byte stream of seeded synthetic
/// data is a documented pure function of the ChaCha8 stream and survives
/// dependency upgrades.
#[inline]
pub fn standard_normal<R: RngCore>(rng: &mut R) -> f64 {
    inv_cdf(uniform_open01(rng))
}
