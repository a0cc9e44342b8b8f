//! Branch-light `sin`/`cos` pair for the batched activation loops.
//!
//! Reduction by `π/2` in three parts followed by minimax polynomials on
//! `[-π/4, π/4]`. Arguments beyond `2^20` fall back to the standard library.

#![allow(clippy::excessive_precision)]

const FRAC_2_PI: f64 = std::f64::consts::FRAC_2_PI;
const PIO2_1: f64 = 1.570_796_251_296_997_070_31;
const PIO2_2: f64 = 7.549_789_415_861_596_353_36e-8;
const PIO2_3: f64 = 5.390_302_858_158_119_052_9e-15;

const SIN: [f64; 6] = [
    1.589_623_015_765_465_680_60e-10,
    -2.505_074_776_285_780_728_66e-8,
    2.755_731_362_138_572_452_13e-6,
    -1.984_126_982_958_953_859_96e-4,
    8.333_333_333_322_118_588_78e-3,
    -1.666_666_666_666_663_072_95e-1,
];
const COS: [f64; 6] = [
    -1.135_853_652_138_768_173_00e-11,
    2.087_570_084_197_473_167_78e-9,
    -2.755_731_417_929_673_881_12e-7,
    2.480_158_728_885_170_453_48e-5,
    -1.388_888_888_887_305_641_16e-3,
    4.166_666_666_666_659_292_18e-2,
];

const LIMIT: f64 = 1_048_576.0;
/// Adding and subtracting `1.5·2^52` rounds to the nearest integer.
const ROUND: f64 = 6_755_399_441_055_744.0;

#[inline(always)]
fn horner(c: &[f64; 6], z: f64) -> f64 {
    ((((c[0] * z + c[1]) * z + c[2]) * z + c[3]) * z + c[4]) * z + c[5]
}

#[inline(always)]
pub(crate) fn sin_cos(x: f64) -> (f64, f64) {
    if !(x.abs() < LIMIT) {
        return x.sin_cos();
    }
    let n = (x * FRAC_2_PI + ROUND) - ROUND;
    let r = ((x - n * PIO2_1) - n * PIO2_2) - n * PIO2_3;
    let z = r * r;
    let s = r + r * z * horner(&SIN, z);
    let c = 1.0 - 0.5 * z + z * z * horner(&COS, z);
    let q = (n as i64) & 3;
    let (sv, cv) = if q & 1 == 0 { (s, c) } else { (c, s) };
    let sv = if q & 2 == 0 { sv } else { -sv };
    let cv = if (q + 1) & 2 == 0 { cv } else { -cv };
    (sv, cv)
}
