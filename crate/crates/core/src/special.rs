//! Scalar special functions: standard normal, Student-t and beta CDFs with
//! their quantiles.
//!
//! CDFs are built on `libm::erfc` and the `statrs` regularized incomplete
//! beta. Quantiles start from a rational or series approximation and are
//! polished with safeguarded Newton steps, targeting 1e-10 absolute accuracy
//! or better on the probability scale.

#![allow(clippy::excessive_precision, clippy::inconsistent_digit_grouping)]

use statrs::function::beta::{beta_reg, ln_beta};
use statrs::function::gamma::ln_gamma;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Upper tail `1 - Φ(x)` without cancellation.
pub fn norm_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x * FRAC_1_SQRT_2)
}

/// Standard normal quantile (Wichura's AS 241, PPND16) followed by one
/// Newton step.
///
/// Returns `-inf`/`+inf` at 0 and 1 and NaN outside `[0, 1]`.
pub fn norm_quantile(p: f64) -> f64 {
    if !(0.0..=1.0).contains(&p) || p.is_nan() {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    let x = ppnd16(p);
    if !x.is_finite() {
        return x;
    }
    // Residual computed on the tail that keeps precision.
    let resid = if p < 0.5 {
        norm_cdf(x) - p
    } else {
        (1.0 - p) - norm_sf(x)
    };
    let dens = norm_pdf(x);
    if dens > 0.0 {
        x - resid / dens
    } else {
        x
    }
}

fn ppnd16(p: f64) -> f64 {
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((r * 2509.080_928_730_122_7 + 33430.575_583_588_13) * r
            + 67265.770_927_008_7)
            * r
            + 45921.953_931_549_87)
            * r
            + 13731.693_765_509_461)
            * r
            + 1971.590_950_306_551_3)
            * r
            + 133.141_667_891_784_38)
            * r
            + 3.387_132_872_796_366_5;
        let den = ((((((r * 5226.495_278_852_546 + 28729.085_735_721_943) * r
            + 39307.895_800_092_71)
            * r
            + 21213.794_301_586_597)
            * r
            + 5394.196_021_424_751)
            * r
            + 687.187_007_492_057_9)
            * r
            + 42.313_330_701_600_91)
            * r
            + 1.0;
        return q * num / den;
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((r * 7.745_450_142_783_414e-4 + 0.022_723_844_989_269_184) * r
            + 0.241_780_725_177_450_6)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_545)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((r * 1.050_750_071_644_416_9e-9 + 5.475_938_084_995_345e-4) * r
            + 0.015_198_666_563_616_457)
            * r
            + 0.148_103_976_427_480_08)
            * r
            + 0.689_767_334_985_1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_759)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((r * 2.010_334_399_292_288e-7 + 2.711_555_568_743_487_6e-5) * r
            + 0.001_242_660_947_388_078_4)
            * r
            + 0.026_532_189_526_576_124)
            * r
            + 0.296_560_571_828_504_9)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den = ((((((r * 2.044_263_103_389_939_7e-15 + 1.421_511_758_316_445_9e-7) * r
            + 1.846_318_317_510_054_8e-5)
            * r
            + 7.868_691_311_456_133e-4)
            * r
            + 0.014_875_361_290_850_615)
            * r
            + 0.136_929_880_922_735_8)
            * r
            + 0.599_832_206_555_887_9)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// Density of the standard Student-t distribution with `nu` degrees of freedom.
pub fn student_pdf(t: f64, nu: f64) -> f64 {
    let ln_c = ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * PI).ln();
    (ln_c - 0.5 * (nu + 1.0) * (t * t / nu).ln_1p()).exp()
}

/// Lower tail `P(T <= -|t|)` of the standard Student-t distribution.
fn student_lower_tail(t: f64, nu: f64) -> f64 {
    let t2 = t * t;
    let x = nu / (nu + t2);
    if x < 0.5 {
        0.5 * beta_reg(0.5 * nu, 0.5, x)
    } else {
        0.5 * (1.0 - beta_reg(0.5, 0.5 * nu, t2 / (nu + t2)))
    }
}

/// CDF of the standard Student-t distribution.
pub fn student_cdf(t: f64, nu: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t == f64::INFINITY {
        return 1.0;
    }
    if t == f64::NEG_INFINITY {
        return 0.0;
    }
    let tail = student_lower_tail(t, nu);
    if t > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Quantile of the standard Student-t distribution.
pub fn student_quantile(p: f64, nu: f64) -> f64 {
    if !(0.0..=1.0).contains(&p) || p.is_nan() || nu.is_nan() || nu <= 0.0 {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    if p > 0.5 {
        return -student_lower_quantile(1.0 - p, nu);
    }
    student_lower_quantile(p, nu)
}

/// Quantile for `p <= 0.5`; the result is `<= 0`.
fn student_lower_quantile(p: f64, nu: f64) -> f64 {
    if p == 0.5 {
        return 0.0;
    }
    if nu == 1.0 {
        return (PI * (p - 0.5)).tan();
    }
    if nu == 2.0 {
        return (2.0 * p - 1.0) / (2.0 * p * (1.0 - p)).sqrt();
    }
    let guess = student_initial_guess(p, nu);

    // Bracket [lo, hi] with tail(lo) < p < tail(hi), working on t <= 0.
    let mut hi = 0.0_f64;
    let mut lo = guess.min(-1.0);
    while student_lower_tail(lo, nu) > p {
        hi = lo;
        lo *= 2.0;
        if lo < -1e300 {
            return lo;
        }
    }
    let mut x = guess.clamp(lo, hi);
    for _ in 0..200 {
        let f = student_cdf(x, nu) - p;
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let dens = student_pdf(x, nu);
        let mut next = if dens > 0.0 { x - f / dens } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-15 * (1.0 + x.abs()) {
            return next;
        }
        x = next;
    }
    x
}

/// Cornish-Fisher expansion around the normal quantile.
fn student_initial_guess(p: f64, nu: f64) -> f64 {
    let z = norm_quantile(p);
    let z2 = z * z;
    let g1 = z * (z2 + 1.0) / 4.0;
    let g2 = z * ((5.0 * z2 + 16.0) * z2 + 3.0) / 96.0;
    let g3 = z * (((3.0 * z2 + 19.0) * z2 + 17.0) * z2 - 15.0) / 384.0;
    let t = z + g1 / nu + g2 / (nu * nu) + g3 / (nu * nu * nu);
    if t.is_finite() {
        t.min(0.0)
    } else {
        -1.0
    }
}

/// Regularized incomplete beta: CDF of Beta(`a`, `b`) at `x`.
pub fn beta_cdf(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        beta_reg(a, b, x)
    }
}

pub fn beta_pdf(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    ((a - 1.0) * x.ln() + (b - 1.0) * (-x).ln_1p() - ln_beta(a, b)).exp()
}

/// Quantile of Beta(`a`, `b`) by safeguarded Newton iteration on `[0, 1]`.
pub fn beta_quantile(p: f64, a: f64, b: f64) -> f64 {
    if !(0.0..=1.0).contains(&p) || p.is_nan() {
        return f64::NAN;
    }
    if p == 0.0 {
        return 0.0;
    }
    if p == 1.0 {
        return 1.0;
    }
    // Closed forms for the common one-parameter cases.
    if a == 1.0 && b == 1.0 {
        return p;
    }
    if a == 1.0 {
        return -((-p).ln_1p() / b).exp_m1();
    }
    if b == 1.0 {
        return p.powf(1.0 / a);
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let mut x = (a / (a + b)).clamp(1e-6, 1.0 - 1e-6);
    for _ in 0..300 {
        let f = beta_cdf(x, a, b) - p;
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let dens = beta_pdf(x, a, b);
        let mut next = if dens > 0.0 { x - f / dens } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-16 + 1e-15 * x {
            return next;
        }
        x = next;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn normal_reference_values() {
        assert_abs_diff_eq!(norm_cdf(0.0), 0.5, epsilon = 1e-16);
        assert_abs_diff_eq!(norm_quantile(0.975), 1.959_963_984_540_054, epsilon = 1e-14);
        assert_abs_diff_eq!(norm_quantile(0.5), 0.0, epsilon = 1e-16);
        assert_abs_diff_eq!(norm_quantile(1e-10), -6.361_340_902_404_056, epsilon = 1e-11);
        assert!(norm_quantile(0.0).is_infinite());
        assert!(norm_quantile(1.5).is_nan());
    }

    #[test]
    fn normal_round_trip() {
        for k in 1..1000 {
            let p = k as f64 / 1000.0;
            assert_abs_diff_eq!(norm_cdf(norm_quantile(p)), p, epsilon = 1e-15);
        }
    }

    #[test]
    fn student_reference_values() {
        // Standard two-sided 5% critical values.
        assert_abs_diff_eq!(student_quantile(0.975, 5.0), 2.570_581_835_636_314, epsilon = 1e-10);
        assert_abs_diff_eq!(student_quantile(0.975, 10.0), 2.228_138_851_986_273_5, epsilon = 1e-10);
        assert_abs_diff_eq!(student_quantile(0.975, 1.0), 12.706_204_736_174_7, epsilon = 1e-9);
        assert_abs_diff_eq!(student_cdf(0.0, 3.7), 0.5, epsilon = 1e-16);
        assert_abs_diff_eq!(student_cdf(2.0, 2.0), 0.5 + 1.0 / 6.0_f64.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn student_round_trip_across_dof() {
        for &nu in &[0.5, 1.0, 2.0, 3.0, 5.0, 6.0, 7.0, 30.0, 200.0] {
            for k in 1..100 {
                let p = k as f64 / 100.0;
                let t = student_quantile(p, nu);
                assert_abs_diff_eq!(student_cdf(t, nu), p, epsilon = 1e-12);
            }
            let t = student_quantile(1e-8, nu);
            assert!((student_cdf(t, nu) - 1e-8).abs() < 1e-15, "nu={nu}");
        }
    }

    #[test]
    fn beta_closed_forms() {
        // Beta(1,2): F(x) = 1 - (1-x)^2.
        assert_abs_diff_eq!(beta_cdf(0.5, 1.0, 2.0), 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(beta_quantile(0.75, 1.0, 2.0), 0.5, epsilon = 1e-15);
        for k in 1..100 {
            let p = k as f64 / 100.0;
            for &(a, b) in &[(2.0, 3.0), (0.5, 0.5), (5.0, 1.5)] {
                let x = beta_quantile(p, a, b);
                assert_abs_diff_eq!(beta_cdf(x, a, b), p, epsilon = 1e-12);
            }
        }
    }
}
