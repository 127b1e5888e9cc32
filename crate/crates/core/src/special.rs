//! Standard normal helpers and the truncated Gaussian moments behind `d`, `f`, `g`.

use std::f64::consts::{PI, SQRT_2};

/// 1/sqrt(2π)
pub const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Log of the standard normal density.
pub fn normal_log_pdf(x: f64) -> f64 {
    -0.5 * x * x - 0.5 * (2.0 * PI).ln()
}

/// Standard normal distribution function, accurate in both tails.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Scaled one-sided moments `u_k(t) = E[(Z - t)_+^k] / φ(t)` for `k = 0, 1, 2`, `t > 0`.
///
/// They satisfy `t u_k + u_{k+1} = k u_{k-1}` (with the `k = 0` right-hand side
/// equal to one). Forward use of that recurrence cancels catastrophically, so the
/// ratios `r_k = u_k / u_{k-1}` are obtained from the backward continued fraction
/// `r_k = k / (t + r_{k+1})`.
pub(crate) fn scaled_tail_moments(t: f64) -> [f64; 3] {
    debug_assert!(t > 0.0);
    let depth = if t >= 8.0 {
        60
    } else {
        60 + (1200.0 / (t * t)) as usize
    };
    let mut r = 0.0;
    let mut r2 = 0.0;
    for k in (1..=depth).rev() {
        r = k as f64 / (t + r);
        if k == 2 {
            r2 = r;
        }
    }
    let r1 = r;
    let u0 = 1.0 / (t + r1);
    let u1 = r1 * u0;
    let u2 = r2 * u1;
    [u0, u1, u2]
}

/// Numerically stable `log(Σ exp(v_i))`; returns `-∞` for an empty or all `-∞` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Weighted log-sum-exp: `log(Σ w_i exp(v_i))` for nonnegative weights.
pub fn log_sum_exp_weighted(weights: &[f64], values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + weights
        .iter()
        .zip(values)
        .map(|(w, v)| w * (v - max).exp())
        .sum::<f64>()
        .ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_tails() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-16);
        assert!((normal_cdf(1.959963984540054) - 0.975).abs() < 1e-15);
        // Φ(-10) ≈ 7.6198530241605e-24
        assert!((normal_cdf(-10.0) / 7.619_853_024_160_527e-24 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tail_moments_match_direct_formulas_where_stable() {
        // At moderate t the direct expressions lose only a few digits.
        for &t in &[2.0, 3.0, 5.0] {
            let [u0, u1, u2] = scaled_tail_moments(t);
            let q = normal_cdf(-t);
            let p = normal_pdf(t);
            let m0 = q / p;
            let m1 = (p - t * q) / p;
            let m2 = ((1.0 + t * t) * q - t * p) / p;
            assert!((u0 / m0 - 1.0).abs() < 1e-13, "u0 at {t}");
            assert!((u1 / m1 - 1.0).abs() < 1e-11, "u1 at {t}");
            assert!((u2 / m2 - 1.0).abs() < 1e-9, "u2 at {t}");
        }
    }

    #[test]
    fn tail_moments_asymptotics() {
        // u_0 ~ 1/t, u_1 ~ 1/t², u_2 ~ 2/t³
        let t = 1e4;
        let [u0, u1, u2] = scaled_tail_moments(t);
        assert!((u0 * t - 1.0).abs() < 1e-7);
        assert!((u1 * t * t - 1.0).abs() < 1e-7);
        assert!((u2 * t * t * t / 2.0 - 1.0).abs() < 1e-7);
    }

    #[test]
    fn lse_handles_large_values() {
        let v = [1000.0, 1000.0];
        assert!((log_sum_exp(&v) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }
}
