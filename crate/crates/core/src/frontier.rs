//! Large-`n` limit of `λ+max` for the deformed GOE and the realizability frontier.
//!
//! With `Z ~ N(0, 1)`:
//!
//! * `d(x) = E (Z + x)_+²`
//! * `f(x) = E (Z + x)_+ / √d(x)`
//! * `g(x) = E Z (Z + x)_+ / √d(x)`
//!
//! The limit is `λ+(α, κ) = α f(c)² + 2κ g(c)` where `c` is the unique root of
//! `c = (α/κ) f(c)`. Closed forms: `d = (1 + x²)Φ + xφ`, `E(Z + x)_+ = φ + xΦ`
//! and `E Z(Z + x)_+ = Φ`. Below `x = -2` the three moments are evaluated as
//! multiples of `φ(x)` so that `f` and `g` stay accurate far into the left tail.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::optim::bisect;
use crate::special::{normal_cdf, normal_pdf, scaled_tail_moments};

/// Below this argument the moments are computed in `φ`-scaled form.
const SCALED_BRANCH: f64 = -2.0;
const FIXED_POINT_TOL: f64 = 1e-12;
/// Bracket for the frontier inversion in `α`.
pub const FRONTIER_ALPHA_BRACKET: (f64, f64) = (-50.0, 50.0);

/// Deformed-GOE ensemble `κ/√n W + α 11ᵀ/n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleParams {
    pub kappa: f64,
    pub alpha: f64,
}

impl EnsembleParams {
    pub fn new(kappa: f64, alpha: f64) -> Result<Self> {
        if !(kappa > 0.0 && kappa.is_finite()) {
            return invalid(format!("kappa must be positive and finite, got {kappa}"));
        }
        if !alpha.is_finite() {
            return invalid(format!("alpha must be finite, got {alpha}"));
        }
        Ok(Self { kappa, alpha })
    }
}

/// One evaluation of the limit `λ+(α, κ)` together with its fixed point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub alpha: f64,
    pub kappa: f64,
    pub lambda_plus: f64,
    pub c: f64,
}

/// `(E Z(Z+x)_+, E(Z+x)_+, E(Z+x)_+²)` on the direct branch.
fn direct_moments(x: f64) -> (f64, f64, f64) {
    let cdf = normal_cdf(x);
    let pdf = normal_pdf(x);
    (cdf, pdf + x * cdf, (1.0 + x * x) * cdf + x * pdf)
}

/// `E (Z + x)_+²`.
pub fn gauss_d(x: f64) -> f64 {
    if x >= SCALED_BRANCH {
        direct_moments(x).2
    } else {
        normal_pdf(x) * scaled_tail_moments(-x)[2]
    }
}

/// `E (Z + x)_+`.
pub fn gauss_mean_positive_part(x: f64) -> f64 {
    if x >= SCALED_BRANCH {
        direct_moments(x).1
    } else {
        normal_pdf(x) * scaled_tail_moments(-x)[1]
    }
}

/// `E Z (Z + x)_+`, which equals `Φ(x)`.
pub fn gauss_z_positive_part(x: f64) -> f64 {
    normal_cdf(x)
}

/// `√φ(x)` without forming `φ(x)`, which underflows first.
fn sqrt_pdf(x: f64) -> f64 {
    (-0.25 * x * x - 0.25 * (2.0 * std::f64::consts::PI).ln()).exp()
}

/// `f(x) = E(Z + x)_+ / √d(x)`, strictly increasing from 0 to 1.
pub fn gauss_f(x: f64) -> f64 {
    if x >= SCALED_BRANCH {
        let (_, m1, d) = direct_moments(x);
        m1 / d.sqrt()
    } else {
        let [_, u1, u2] = scaled_tail_moments(-x);
        sqrt_pdf(x) * u1 / u2.sqrt()
    }
}

/// `g(x) = E Z(Z + x)_+ / √d(x)`, maximal at 0 with `g(0) = 1/√2`.
pub fn gauss_g(x: f64) -> f64 {
    if x >= SCALED_BRANCH {
        let (m0, _, d) = direct_moments(x);
        m0 / d.sqrt()
    } else {
        let [u0, _, u2] = scaled_tail_moments(-x);
        sqrt_pdf(x) * u0 / u2.sqrt()
    }
}

/// `r_α(x) = α f(x)² + 2 g(x)`, maximized at the fixed point `c` of `x = α f(x)`.
pub fn r_alpha(alpha: f64, x: f64) -> f64 {
    let f = gauss_f(x);
    alpha * f * f + 2.0 * gauss_g(x)
}

/// `q(x) = f(x)/x` on `x ≠ 0`.
pub fn q_ratio(x: f64) -> f64 {
    gauss_f(x) / x
}

/// Unique root of `c = (α/κ) f(c)`, by bisection on `[-|α|/κ - 1, |α|/κ + 1]`.
pub fn solve_c(params: EnsembleParams) -> f64 {
    let ratio = params.alpha / params.kappa;
    if ratio == 0.0 {
        return 0.0;
    }
    let half_width = ratio.abs() + 1.0;
    bisect(
        |x| x - ratio * gauss_f(x),
        -half_width,
        half_width,
        FIXED_POINT_TOL,
    )
    .expect("x - (α/κ) f(x) changes sign on the bracket since 0 < f < 1")
}

/// Limit of `λ+max(Σ_n)` for the ensemble.
pub fn lambda_plus(params: EnsembleParams) -> FrontierPoint {
    let c = solve_c(params);
    let f = gauss_f(c);
    FrontierPoint {
        alpha: params.alpha,
        kappa: params.kappa,
        lambda_plus: params.alpha * f * f + 2.0 * params.kappa * gauss_g(c),
        c,
    }
}

fn lambda_plus_value(alpha: f64, kappa: f64) -> f64 {
    lambda_plus(EnsembleParams { kappa, alpha }).lambda_plus
}

/// For each `κ`, the `α` on the curve `λ+(α, κ) = 1`.
///
/// Monotonicity of `λ+` in `α` is not assumed: a coarse scan of the bracket
/// must show exactly one sign change, otherwise the point is reported as having
/// no well-defined root.
pub fn frontier_curve(kappa_grid: &[f64]) -> Result<Vec<FrontierPoint>> {
    kappa_grid.iter().map(|&kappa| frontier_point(kappa)).collect()
}

fn frontier_point(kappa: f64) -> Result<FrontierPoint> {
    EnsembleParams::new(kappa, 0.0)?;
    let (lo, hi) = FRONTIER_ALPHA_BRACKET;
    let excess = |alpha: f64| lambda_plus_value(alpha, kappa) - 1.0;
    const SCAN: usize = 400;
    let mut changes = 0;
    let mut prev = excess(lo);
    for i in 1..=SCAN {
        let alpha = lo + (hi - lo) * i as f64 / SCAN as f64;
        let cur = excess(alpha);
        if (prev < 0.0) != (cur < 0.0) {
            changes += 1;
        }
        prev = cur;
    }
    if changes != 1 {
        return Err(Error::NoRoot(format!(
            "λ+(α, {kappa}) - 1 has {changes} sign changes on α ∈ [{lo}, {hi}]"
        )));
    }
    let alpha = bisect(excess, lo, hi, 1e-12)
        .ok_or_else(|| Error::NoRoot(format!("no sign change for kappa = {kappa}")))?;
    Ok(lambda_plus(EnsembleParams { kappa, alpha }))
}

/// Root of `f(x) = s` for `s ∈ (0, 1)`.
pub fn f_inverse(s: f64) -> Result<f64> {
    if !(s > 0.0 && s < 1.0) {
        return invalid(format!("f maps onto (0, 1); cannot invert s = {s}"));
    }
    let mut lo = -1.0;
    while gauss_f(lo) > s {
        lo *= 2.0;
        if lo < -1e6 {
            return Err(Error::NoRoot(format!("f(x) = {s} below x = -1e6")));
        }
    }
    let mut hi = 1.0;
    while gauss_f(hi) < s {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::NoRoot(format!("f(x) = {s} beyond x = 1e12")));
        }
    }
    bisect(|x| gauss_f(x) - s, lo, hi, 1e-14 * hi.abs().max(1.0))
        .ok_or_else(|| Error::NoRoot(format!("f(x) = {s}")))
}

/// Gaussian-comparison bound on the slice `⟨u, 1/√n⟩ = s` of the normalized model.
///
/// Returns `α f(c̃)² − 2 c̃ f(c̃) + 2 √d(c̃)` with `f(c̃) = s`, which equals
/// `r_α(c̃)` and therefore never exceeds `λ+(α, 1)`.
pub fn sudakov_bound(s: f64, params: EnsembleParams) -> Result<f64> {
    if (params.kappa - 1.0).abs() > 1e-12 {
        return invalid(format!(
            "the slice bound is stated for kappa = 1, got {}",
            params.kappa
        ));
    }
    let c_tilde = f_inverse(s)?;
    let f = gauss_f(c_tilde);
    Ok(params.alpha * f * f - 2.0 * c_tilde * f + 2.0 * gauss_d(c_tilde).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::integrate;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

    /// Independent oracle: `E h(Z)` by adaptive quadrature over `z ≥ -x`.
    fn gaussian_expectation_above<F: Fn(f64) -> f64>(x: f64, h: F) -> f64 {
        let lo = -x;
        let hi = lo.max(0.0) + 40.0;
        integrate(
            |z| h(z) * (-0.5 * z * z).exp() / (2.0 * PI).sqrt(),
            lo,
            hi,
            1e-300,
            1e-13,
            4000,
        )
        .value
    }

    fn grid() -> impl Iterator<Item = f64> {
        (-5..=5).map(|i| i as f64)
    }

    #[test]
    fn closed_forms_match_quadrature() {
        for x in grid() {
            let d = gaussian_expectation_above(x, |z| (z + x).powi(2));
            let m1 = gaussian_expectation_above(x, |z| z + x);
            let m0 = gaussian_expectation_above(x, |z| z * (z + x));
            assert!((gauss_d(x) - d).abs() < 1e-10, "d({x})");
            assert!((gauss_mean_positive_part(x) - m1).abs() < 1e-10, "m1({x})");
            assert!((gauss_z_positive_part(x) - m0).abs() < 1e-10, "m0({x})");
        }
    }

    #[test]
    fn scaled_branch_is_continuous() {
        let below = SCALED_BRANCH - 1e-9;
        let above = SCALED_BRANCH;
        assert!((gauss_d(below) / gauss_d(above) - 1.0).abs() < 1e-8);
        assert!((gauss_f(below) / gauss_f(above) - 1.0).abs() < 1e-8);
        assert!((gauss_g(below) / gauss_g(above) - 1.0).abs() < 1e-8);
        // relative agreement with quadrature deep in the tail
        for x in [-3.0, -4.5, -6.0, -8.0] {
            let d = gaussian_expectation_above(x, |z| (z + x).powi(2));
            assert!((gauss_d(x) / d - 1.0).abs() < 1e-8, "d({x}) rel");
        }
    }

    #[test]
    fn d_examples() {
        assert!((gauss_d(0.0) - 0.5).abs() < 1e-15);
        assert!((gauss_d(10.0) - 101.0).abs() < 1e-6);
        assert!(gauss_d(-40.0) < 1e-100);
        assert!(gauss_d(-30.0) > 0.0);
    }

    #[test]
    fn f_examples() {
        assert!((gauss_f(0.0) - 1.0 / PI.sqrt()).abs() < 1e-12);
        assert!((gauss_f(1e6) - 1.0).abs() < 1e-9);
        assert!(gauss_f(-40.0) < 1e-100);
        assert!(gauss_f(-40.0) >= 0.0);
    }

    #[test]
    fn g_examples() {
        assert!((gauss_g(0.0) - FRAC_1_SQRT_2).abs() < 1e-14);
        // g decays like 1/x on the right and like a Gaussian on the left.
        assert!((gauss_g(50.0) * 2501f64.sqrt() - 1.0).abs() < 1e-12);
        assert!(gauss_g(1e7) < 1e-6);
        assert!(gauss_g(-50.0) < 1e-6);
        let h = 1e-5;
        assert!(((gauss_g(h) - gauss_g(-h)) / (2.0 * h)).abs() < 1e-8);
    }

    #[test]
    fn sqrt_d_identity_and_derivative_identity() {
        for i in -10..=10 {
            let x = i as f64 * 0.5;
            let lhs = gauss_d(x).sqrt();
            let rhs = x * gauss_f(x) + gauss_g(x);
            assert!((lhs - rhs).abs() < 1e-10, "√d identity at {x}");
            let h = 1e-5;
            let fp = (gauss_f(x + h) - gauss_f(x - h)) / (2.0 * h);
            let gp = (gauss_g(x + h) - gauss_g(x - h)) / (2.0 * h);
            assert!((gp + x * fp).abs() < 1e-6, "g' = -x f' at {x}");
            // (√d)' = f
            let sdp = (gauss_d(x + h).sqrt() - gauss_d(x - h).sqrt()) / (2.0 * h);
            assert!((sdp - gauss_f(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn q_strictly_decreasing_on_each_half_line() {
        let neg: Vec<f64> = (1..=400).map(|i| -20.0 + i as f64 * 0.0499).collect();
        let pos: Vec<f64> = (1..=400).map(|i| i as f64 * 0.05).collect();
        for half in [neg, pos] {
            for w in half.windows(2) {
                assert!(q_ratio(w[1]) < q_ratio(w[0]), "q at {} .. {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn r_alpha_grid_maximum_sits_at_c() {
        for alpha in [-3.0, -1.0, 0.0, 1.0, 3.0] {
            let c = solve_c(EnsembleParams::new(1.0, alpha).unwrap());
            let step = 1e-3;
            let (mut best_x, mut best) = (0.0, f64::NEG_INFINITY);
            for i in -8000..=8000 {
                let x = i as f64 * step;
                let v = r_alpha(alpha, x);
                if v > best {
                    best = v;
                    best_x = x;
                }
            }
            assert!((best_x - c).abs() <= 2.0 * step, "alpha {alpha}: {best_x} vs {c}");
            assert!(r_alpha(alpha, c) >= best - 1e-12);
        }
    }

    #[test]
    fn solve_c_examples() {
        assert_eq!(solve_c(EnsembleParams::new(1.0, 0.0).unwrap()), 0.0);
        assert!(solve_c(EnsembleParams::new(1.0, -2.0).unwrap()) < 0.0);
        // Grid-scan oracle for the unique sign change of x - f(x).
        let step = 1e-5;
        let mut bracket = None;
        for i in 0..200_000 {
            let x0 = -1.0 + i as f64 * step;
            let x1 = x0 + step;
            if (x0 - gauss_f(x0)) <= 0.0 && (x1 - gauss_f(x1)) > 0.0 {
                assert!(bracket.is_none(), "second sign change");
                bracket = Some((x0, x1));
            }
        }
        let (x0, x1) = bracket.expect("sign change");
        let c = solve_c(EnsembleParams::new(1.0, 1.0).unwrap());
        assert!(c >= x0 - 1e-12 && c <= x1 + 1e-12);
        assert!((c - gauss_f(c)).abs() < 1e-12);
        // Frozen from the grid scan above.
        assert!((c - 0.732_338_952_874_215_5).abs() < 1e-10, "{c}");
    }

    #[test]
    fn lambda_plus_anchors() {
        for kappa in [0.1, 0.5, FRAC_1_SQRT_2, 2.0] {
            let p = lambda_plus(EnsembleParams::new(kappa, 0.0).unwrap());
            assert!((p.lambda_plus - kappa * SQRT_2).abs() < 1e-12);
        }
        let small = 1e-4;
        assert!((lambda_plus(EnsembleParams::new(small, 1.0).unwrap()).lambda_plus - 1.0).abs() < 1e-3);
        assert!(lambda_plus(EnsembleParams::new(small, -1.0).unwrap()).lambda_plus.abs() < 1e-3);
    }

    #[test]
    fn lambda_plus_scaling_examples() {
        let a = lambda_plus(EnsembleParams::new(1.0, 2.0).unwrap()).lambda_plus;
        let b = 2.0 * lambda_plus(EnsembleParams::new(0.5, 1.0).unwrap()).lambda_plus;
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn frontier_anchors() {
        let pts = frontier_curve(&[FRAC_1_SQRT_2, 1e-3, 0.4]).unwrap();
        assert!(pts[0].alpha.abs() < 1e-9, "{}", pts[0].alpha);
        assert!((pts[1].alpha - 1.0).abs() < 1e-2, "{}", pts[1].alpha);
        for p in &pts {
            assert!((p.lambda_plus - 1.0).abs() < 1e-9);
        }
        // Regression anchor, frozen from a 1e-12 bisection on the first run.
        assert!((pts[2].alpha - FROZEN_ALPHA_AT_KAPPA_0_4).abs() < 1e-9, "{}", pts[2].alpha);
    }

    const FROZEN_ALPHA_AT_KAPPA_0_4: f64 = 0.803_079_384_955_296_4;

    #[test]
    fn frontier_reports_missing_root() {
        // λ+(α, 100) ≥ 1 for every α in the bracket.
        assert!(matches!(frontier_curve(&[100.0]), Err(Error::NoRoot(_))));
    }

    #[test]
    fn sudakov_examples() {
        let p0 = EnsembleParams::new(1.0, 0.0).unwrap();
        let v = sudakov_bound(1.0 / PI.sqrt(), p0).unwrap();
        assert!((v - SQRT_2).abs() < 1e-10);
        for alpha in [-2.0, 0.5, 2.0] {
            let p = EnsembleParams::new(1.0, alpha).unwrap();
            let lp = lambda_plus(p);
            let at_opt = sudakov_bound(gauss_f(lp.c), p).unwrap();
            assert!((at_opt - lp.lambda_plus).abs() < 1e-10);
        }
        assert!(sudakov_bound(0.0, p0).is_err());
        assert!(sudakov_bound(1.0, p0).is_err());
        assert!(sudakov_bound(0.5, EnsembleParams::new(0.5, 0.0).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn f_in_unit_interval_and_increasing(x in -30.0f64..30.0, dx in 1e-3f64..1.0) {
            let f0 = gauss_f(x);
            prop_assert!(f0 > 0.0 && f0 < 1.0);
            prop_assert!(gauss_f(x + dx) > f0);
        }

        #[test]
        fn scaling_identity(alpha in -5.0f64..5.0, kappa in 0.05f64..3.0) {
            let direct = lambda_plus(EnsembleParams::new(kappa, alpha).unwrap()).lambda_plus;
            let scaled = kappa * lambda_plus(EnsembleParams::new(1.0, alpha / kappa).unwrap()).lambda_plus;
            prop_assert!((direct - scaled).abs() < 1e-10 * (1.0 + direct.abs()));
        }

        #[test]
        fn c_solves_fixed_point(alpha in -20.0f64..20.0, kappa in 0.05f64..3.0) {
            let p = EnsembleParams::new(kappa, alpha).unwrap();
            let c = solve_c(p);
            prop_assert!((c - alpha / kappa * gauss_f(c)).abs() < 1e-10);
            prop_assert_eq!(c.signum() * alpha.signum() >= 0.0, true);
        }

        #[test]
        fn slice_bound_below_lambda_plus(s in 0.01f64..0.99, alpha in -3.0f64..3.0) {
            let p = EnsembleParams::new(1.0, alpha).unwrap();
            prop_assert!(sudakov_bound(s, p).unwrap() <= lambda_plus(p).lambda_plus + 1e-10);
        }
    }
}
