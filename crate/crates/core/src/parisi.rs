//! Finitely supported Parisi measures, the leaf functional `X_{K,a}`, the
//! recursion down to `X_{0,a}`, the Parisi function `P_a` and the saddle search
//! over `(a, D[, h])` and `(ζ, γ[, h])`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::optim::{brent_minimize, nelder_mead};
use crate::quad::{gauss_hermite, integrate_segments, kronrod_nodes, GaussHermite, UniformSpline};
use crate::special::log_sum_exp;

const LEAF_MARGIN: f64 = 60.0;
const LEAF_FIELD_SAMPLES: usize = 17;
const GRID_POINTS: usize = 2001;
/// Levels handled by tensor Gauss–Hermite; deeper measures use the grid recursion.
pub const TENSOR_MAX_LEVELS: usize = 3;

/// Model constants entering the functional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParisiModel {
    pub beta: f64,
    pub kappa: f64,
    pub alpha: f64,
    pub phi: f64,
}

impl ParisiModel {
    pub fn new(beta: f64, kappa: f64, alpha: f64, phi: f64) -> Result<Self> {
        let m = Self {
            beta,
            kappa,
            alpha,
            phi,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.beta, self.kappa, self.alpha, self.phi].iter().all(|v| v.is_finite()) {
            return invalid("model constants must be finite");
        }
        if !(self.beta > 0.0) || self.kappa < 0.0 {
            return invalid(format!("need beta > 0 and kappa >= 0 (beta = {}, kappa = {})", self.beta, self.kappa));
        }
        if !(self.phi * self.beta > 1.0) {
            return invalid(format!("need phi*beta > 1, got {}", self.phi * self.beta));
        }
        Ok(())
    }

    pub fn covariance(&self) -> CovarianceFns {
        CovarianceFns {
            beta: self.beta,
            kappa: self.kappa,
        }
    }
}

/// `ξ(x) = β²κ²x²/2` and `θ(x) = xξ'(x) − ξ(x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceFns {
    pub beta: f64,
    pub kappa: f64,
}

impl CovarianceFns {
    pub fn xi(&self, x: f64) -> f64 {
        0.5 * (self.beta * self.kappa * x).powi(2)
    }
    pub fn xi_prime(&self, x: f64) -> f64 {
        (self.beta * self.kappa).powi(2) * x
    }
    pub fn theta(&self, x: f64) -> f64 {
        x * self.xi_prime(x) - self.xi(x)
    }
}

/// `ζ = Σ_k (λ_k − λ_{k−1}) δ_{b_k}` with `λ_{−1} = 0`, `λ_K = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParisiMeasure {
    lambdas: Vec<f64>,
    atoms: Vec<f64>,
}

impl ParisiMeasure {
    /// `lambdas` strictly increasing in `(0, 1)`; `atoms = (0, b_1, …, b_K)`
    /// nondecreasing with `b_K = D > 0`. Repeated atoms describe degenerate levels.
    pub fn new(lambdas: Vec<f64>, atoms: Vec<f64>) -> Result<Self> {
        let k = lambdas.len();
        if k == 0 {
            return invalid("a Parisi measure needs at least one level");
        }
        if atoms.len() != k + 1 {
            return invalid(format!("expected {} atoms for {k} levels, got {}", k + 1, atoms.len()));
        }
        if lambdas.iter().any(|l| !(*l > 0.0 && *l < 1.0)) || lambdas.windows(2).any(|w| w[1] <= w[0]) {
            return invalid(format!("lambdas must be strictly increasing in (0, 1): {lambdas:?}"));
        }
        if atoms[0] != 0.0 || atoms.iter().any(|b| !b.is_finite()) || atoms.windows(2).any(|w| w[1] < w[0]) {
            return invalid(format!("atoms must start at 0 and be nondecreasing: {atoms:?}"));
        }
        if !(atoms[k] > 0.0) {
            return invalid("largest atom D must be positive");
        }
        Ok(Self { lambdas, atoms })
    }

    /// `b_k = D·t_k` for interior fractions `0 ≤ t_1 ≤ … ≤ t_{K−1} ≤ 1`.
    pub fn from_fractions(lambdas: Vec<f64>, d: f64, fractions: &[f64]) -> Result<Self> {
        let mut atoms = Vec::with_capacity(fractions.len() + 2);
        atoms.push(0.0);
        atoms.extend(fractions.iter().map(|t| t * d));
        atoms.push(d);
        Self::new(lambdas, atoms)
    }

    pub fn levels(&self) -> usize {
        self.lambdas.len()
    }
    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }
    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }
    pub fn d(&self) -> f64 {
        self.atoms[self.levels()]
    }

    /// Masses `ζ({b_k}) = λ_k − λ_{k−1}`, `k = 0..=K`.
    pub fn weights(&self) -> Vec<f64> {
        let k = self.levels();
        (0..=k)
            .map(|i| {
                let hi = if i == k { 1.0 } else { self.lambdas[i] };
                let lo = if i == 0 { 0.0 } else { self.lambdas[i - 1] };
                hi - lo
            })
            .collect()
    }

    /// Gaussian scales `βκ√(b_k − b_{k−1})`, `k = 1..=K`.
    pub fn scales(&self, model: &ParisiModel) -> Vec<f64> {
        self.atoms
            .windows(2)
            .map(|w| model.beta * model.kappa * (w[1] - w[0]).sqrt())
            .collect()
    }
}

/// Arguments of `P_a`: box edge `a`, auxiliary field `h`, multiplier `γ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParisiArgs {
    pub a: f64,
    pub h: f64,
    pub gamma: f64,
    pub model: ParisiModel,
}

impl ParisiArgs {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.a > 0.0 && self.a.is_finite()) {
            return invalid(format!("box edge a must be positive, got {}", self.a));
        }
        if !(self.h >= 0.0 && self.h.is_finite()) {
            return invalid(format!("h must be finite and nonnegative, got {}", self.h));
        }
        if !self.gamma.is_finite() {
            return invalid("gamma must be finite");
        }
        Ok(())
    }
}

/// Fixed quadrature rule for `L(s) = log ∫₀ᵃ exp(xs + βαhx + γx²) μ_β(dx)`
/// valid for field values `s` in a prescribed range.
///
/// The rule is the final partition of an adaptive Gauss–Kronrod run in
/// `y = log x` on the sum of the integrands at several sampled `s`.
#[derive(Debug, Clone)]
pub struct LeafRule {
    x: Vec<f64>,
    base: Vec<f64>,
}

struct LeafShape {
    /// φβ
    shape: f64,
    /// β + βαh (coefficient of x, without the field)
    linear: f64,
    /// γ − β/2
    quadratic: f64,
    log_a: f64,
}

impl LeafShape {
    fn new(args: &ParisiArgs) -> Self {
        let m = &args.model;
        Self {
            shape: m.phi * m.beta,
            linear: m.beta + m.beta * m.alpha * args.h,
            quadratic: args.gamma - 0.5 * m.beta,
            log_a: args.a.ln(),
        }
    }

    fn log_integrand(&self, y: f64, s: f64) -> f64 {
        let x = y.exp();
        self.shape * y + (self.linear + s) * x + self.quadratic * x * x
    }

    /// Stationary points in `y ≤ log a` and the endpoint; returns `(top, candidates)`.
    fn peaks(&self, s: f64) -> (f64, Vec<f64>) {
        let a2 = 2.0 * self.quadratic;
        let b1 = self.linear + s;
        let c0 = self.shape;
        let mut cand = vec![self.log_a];
        let mut push = |x: f64| {
            if x > 0.0 && x.is_finite() && x.ln() < self.log_a {
                cand.push(x.ln());
            }
        };
        if a2.abs() < 1e-300 {
            if b1 < 0.0 {
                push(-c0 / b1);
            }
        } else {
            let disc = b1 * b1 - 4.0 * a2 * c0;
            if disc >= 0.0 {
                let sq = disc.sqrt();
                // stable roots of a2 x² + b1 x + c0
                let q = -0.5 * (b1 + b1.signum() * sq);
                if q != 0.0 {
                    push(q / a2);
                    push(c0 / q);
                }
            }
        }
        let top = cand.iter().map(|y| self.log_integrand(*y, s)).fold(f64::NEG_INFINITY, f64::max);
        (top, cand)
    }

    /// Width scale of the integrand around `y`.
    fn width(&self, y: f64, s: f64) -> f64 {
        let x = y.exp();
        let d1 = self.shape + (self.linear + s) * x + 2.0 * self.quadratic * x * x;
        let d2 = (self.linear + s) * x + 4.0 * self.quadratic * x * x;
        1.0 / (d1.abs() + d2.abs().sqrt() + 1e-3)
    }
}

impl LeafRule {
    /// Rule accurate for field values in `[−s_max, s_max]`.
    pub fn build(args: &ParisiArgs, s_max: f64) -> Result<Self> {
        args.validate()?;
        let fields: Vec<f64> = if s_max > 0.0 {
            (0..LEAF_FIELD_SAMPLES)
                .map(|i| -s_max + 2.0 * s_max * i as f64 / (LEAF_FIELD_SAMPLES - 1) as f64)
                .collect()
        } else {
            vec![0.0]
        };
        Ok(Self::for_fields(args, &fields))
    }

    /// Rule adapted to the listed field values.
    pub fn for_fields(args: &ParisiArgs, fields: &[f64]) -> Self {
        let shape = LeafShape::new(args);
        let info: Vec<(f64, Vec<f64>)> = fields.iter().map(|s| shape.peaks(*s)).collect();
        let min_top = info.iter().map(|i| i.0).fold(f64::INFINITY, f64::min);
        let y_lo = ((min_top - LEAF_MARGIN) / shape.shape).min(shape.log_a - 1.0) - 2.0;
        let mut breaks = vec![y_lo, shape.log_a];
        for (s, (_, cands)) in fields.iter().zip(&info) {
            for &y in cands {
                let w = shape.width(y, *s);
                for m in [0.0, 1.0, 4.0, 16.0, 64.0] {
                    for sign in [-1.0, 1.0] {
                        let b = y + sign * m * w;
                        if b > y_lo && b < shape.log_a {
                            breaks.push(b);
                        }
                    }
                }
            }
        }
        breaks.sort_by(f64::total_cmp);
        breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-14);
        let tops: Vec<f64> = info.iter().map(|i| i.0).collect();
        let (_, segments) = integrate_segments(
            |y| {
                fields
                    .iter()
                    .zip(&tops)
                    .map(|(s, t)| (shape.log_integrand(y, *s) - t).exp())
                    .sum::<f64>()
            },
            &breaks,
            1e-300,
            1e-13,
            4000,
        );
        let mut x = Vec::with_capacity(segments.len() * 15);
        let mut base = Vec::with_capacity(segments.len() * 15);
        for (a, b) in segments {
            for (y, w) in kronrod_nodes(a, b) {
                x.push(y.exp());
                base.push(w.ln() + shape.log_integrand(y, 0.0));
            }
        }
        Self { x, base }
    }

    /// `L(s)`.
    pub fn eval(&self, s: f64) -> f64 {
        let max = self
            .base
            .iter()
            .zip(&self.x)
            .map(|(b, x)| b + x * s)
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = self.base.iter().zip(&self.x).map(|(b, x)| (b + x * s - max).exp()).sum();
        max + sum.ln()
    }

    /// `∂_s L(s)` (the tilted mean of `x`).
    pub fn mean(&self, s: f64) -> f64 {
        let l = self.eval(s);
        self.base.iter().zip(&self.x).map(|(b, x)| x * (b + x * s - l).exp()).sum()
    }
}

/// `X_{K,a}` at the Gaussians `z_1..z_K`.
pub fn x_leaf(args: &ParisiArgs, zeta: &ParisiMeasure, z: &[f64]) -> Result<f64> {
    if z.len() != zeta.levels() {
        return invalid(format!("expected {} Gaussians, got {}", zeta.levels(), z.len()));
    }
    let s: f64 = zeta.scales(&args.model).iter().zip(z).map(|(c, zk)| c * zk).sum();
    args.validate()?;
    Ok(LeafRule::for_fields(args, &[s]).eval(s))
}

/// Evaluation settings of the recursion.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RecursionOptions {
    /// Gauss–Hermite nodes per level.
    pub order: usize,
    /// Recompute with twice the order and report the change.
    pub check_doubling: bool,
}

impl Default for RecursionOptions {
    fn default() -> Self {
        Self {
            order: 40,
            check_doubling: false,
        }
    }
}

/// `X_0` with the optional order-doubling diagnostic.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RecursionValue {
    pub value: f64,
    pub doubling_change: Option<f64>,
    /// Set when the doubling check moved the value by 1e-8 or more.
    pub flagged: bool,
}

fn largest_node(gh: &GaussHermite) -> f64 {
    gh.nodes.iter().fold(0.0_f64, |m, z| m.max(z.abs()))
}

/// `X_0` for an arbitrary leaf `X_K = leaf(Σ_k c_k z_k)`.
///
/// `X_k(s) = λ_k⁻¹ log E exp(λ_k X_{k+1}(s + c_{k+1} Z))`. Up to three levels
/// the expectation is a tensor Gauss–Hermite rule; deeper recursions tabulate
/// each `X_k` on a uniform grid of `s` and interpolate with cubic splines.
/// Levels with `c_k = 0` are skipped exactly.
pub fn recursion_with_leaf(lambdas: &[f64], scales: &[f64], leaf: &dyn Fn(f64) -> f64, order: usize) -> f64 {
    let gh = gauss_hermite(order);
    if lambdas.len() <= TENSOR_MAX_LEVELS {
        tensor_level(0, 0.0, lambdas, scales, leaf, &gh)
    } else {
        grid_recursion(lambdas, scales, leaf, &gh)
    }
}

fn tensor_level(k: usize, s: f64, lambdas: &[f64], scales: &[f64], leaf: &dyn Fn(f64) -> f64, gh: &GaussHermite) -> f64 {
    if k == lambdas.len() {
        return leaf(s);
    }
    let c = scales[k];
    if c == 0.0 {
        return tensor_level(k + 1, s, lambdas, scales, leaf, gh);
    }
    let values: Vec<f64> = gh
        .nodes
        .iter()
        .map(|z| tensor_level(k + 1, s + c * z, lambdas, scales, leaf, gh))
        .collect();
    tilted_log_mean(gh, &values, lambdas[k])
}

/// `λ⁻¹ log Σ w_i exp(λ v_i)`, centred at the mean so that small `λ` does not
/// cancel catastrophically.
fn tilted_log_mean(gh: &GaussHermite, values: &[f64], lam: f64) -> f64 {
    let mean: f64 = gh.weights.iter().zip(values).map(|(w, v)| w * v).sum();
    let spread = values.iter().fold(0.0_f64, |m, v| m.max((v - mean).abs()));
    if lam * spread < 1.0 {
        let t: f64 = gh.weights.iter().zip(values).map(|(w, v)| w * (lam * (v - mean)).exp_m1()).sum();
        mean + t.ln_1p() / lam
    } else {
        let terms: Vec<f64> = gh.log_weights.iter().zip(values).map(|(lw, v)| lw + lam * (v - mean)).collect();
        mean + log_sum_exp(&terms) / lam
    }
}

fn grid_recursion(lambdas: &[f64], scales: &[f64], leaf: &dyn Fn(f64) -> f64, gh: &GaussHermite) -> f64 {
    let zmax = largest_node(gh);
    let k_levels = lambdas.len();
    // |s| ≤ R_k at level k
    let reach: Vec<f64> = (0..=k_levels).map(|k| zmax * scales[..k].iter().sum::<f64>()).collect();
    let grid = |r: f64| -> (f64, f64) {
        let half = r.max(1e-9) * 1.02;
        (-half, 2.0 * half / (GRID_POINTS - 1) as f64)
    };
    let (x0, h) = grid(reach[k_levels]);
    let values: Vec<f64> = (0..GRID_POINTS).map(|i| leaf(x0 + i as f64 * h)).collect();
    let mut spline = UniformSpline::new(x0, h, values);
    for k in (1..k_levels).rev() {
        let (x0, h) = grid(reach[k]);
        let values: Vec<f64> = (0..GRID_POINTS)
            .map(|i| level_expectation(x0 + i as f64 * h, lambdas[k], scales[k], &spline, gh))
            .collect();
        spline = UniformSpline::new(x0, h, values);
    }
    level_expectation(0.0, lambdas[0], scales[0], &spline, gh)
}

fn level_expectation(s: f64, lam: f64, c: f64, next: &UniformSpline, gh: &GaussHermite) -> f64 {
    if c == 0.0 {
        return next.eval(s);
    }
    let values: Vec<f64> = gh.nodes.iter().map(|z| next.eval(s + c * z)).collect();
    tilted_log_mean(gh, &values, lam)
}

/// Field range reached by the Gauss–Hermite nodes of the given order for any
/// `ζ` with largest atom `D` and `K` levels (`Σ√Δb ≤ √(KD)`).
fn field_reach(model: &ParisiModel, d: f64, levels: usize, order: usize) -> f64 {
    model.beta * model.kappa * (levels as f64 * d).sqrt() * largest_node(&gauss_hermite(order)) * 1.01
}

/// `X_{0,a}(ζ, h, γ)`.
pub fn recursion_x0(zeta: &ParisiMeasure, args: &ParisiArgs) -> Result<f64> {
    Ok(recursion_x0_checked(zeta, args, RecursionOptions::default())?.value)
}

pub fn recursion_x0_checked(zeta: &ParisiMeasure, args: &ParisiArgs, options: RecursionOptions) -> Result<RecursionValue> {
    args.validate()?;
    if options.order == 0 {
        return invalid("Gauss-Hermite order must be positive");
    }
    let max_order = if options.check_doubling { 2 * options.order } else { options.order };
    let rule = LeafRule::build(args, field_reach(&args.model, zeta.d(), zeta.levels(), max_order))?;
    let scales = zeta.scales(&args.model);
    let leaf = |s: f64| rule.eval(s);
    let value = recursion_with_leaf(zeta.lambdas(), &scales, &leaf, options.order);
    let doubling_change = options
        .check_doubling
        .then(|| (recursion_with_leaf(zeta.lambdas(), &scales, &leaf, 2 * options.order) - value).abs());
    Ok(RecursionValue {
        value,
        doubling_change,
        flagged: doubling_change.is_some_and(|d| d >= 1e-8),
    })
}

/// `β²κ²/4 Σ_k λ_k (b_{k+1}² − b_k²)`.
pub fn correction_sum(zeta: &ParisiMeasure, cov: &CovarianceFns) -> f64 {
    let c = (cov.beta * cov.kappa).powi(2) / 4.0;
    zeta.lambdas()
        .iter()
        .zip(zeta.atoms().windows(2))
        .map(|(l, w)| l * (w[1] * w[1] - w[0] * w[0]))
        .sum::<f64>()
        * c
}

/// `−½ ∫θ dζ + ½θ(D)`.
pub fn correction_theta(zeta: &ParisiMeasure, cov: &CovarianceFns) -> f64 {
    let integral: f64 = zeta.weights().iter().zip(zeta.atoms()).map(|(w, b)| w * cov.theta(*b)).sum();
    0.5 * (cov.theta(zeta.d()) - integral)
}

/// `P_a = X_0 − β²κ²/4 Σ λ_k (b_{k+1}² − b_k²)`.
pub fn parisi_value(zeta: &ParisiMeasure, args: &ParisiArgs) -> Result<f64> {
    Ok(recursion_x0(zeta, args)? - correction_sum(zeta, &args.model.covariance()))
}

/// `P_a(ζ, h, γ) − γD − βαh²/2`.
pub fn objective(zeta: &ParisiMeasure, args: &ParisiArgs) -> Result<f64> {
    let m = &args.model;
    Ok(parisi_value(zeta, args)? - args.gamma * zeta.d() - 0.5 * m.beta * m.alpha * args.h * args.h)
}

fn objective_with_rule(zeta: &ParisiMeasure, args: &ParisiArgs, rule: &LeafRule, order: usize) -> f64 {
    let m = &args.model;
    let x0 = recursion_with_leaf(zeta.lambdas(), &zeta.scales(m), &|s| rule.eval(s), order);
    x0 - correction_sum(zeta, &m.covariance()) - args.gamma * zeta.d() - 0.5 * m.beta * m.alpha * args.h * args.h
}

/// Search settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SaddleConfig {
    /// Number of levels `K` of `ζ`.
    pub levels: usize,
    pub order: usize,
    pub outer_max_evals: usize,
    pub inner_max_sweeps: usize,
    /// Stationarity tolerance for the reported residuals.
    pub residual_tol: f64,
    /// Optional outer start `(a, D, h)`.
    pub start: Option<(f64, f64, f64)>,
}

impl Default for SaddleConfig {
    fn default() -> Self {
        Self {
            levels: 1,
            order: 40,
            outer_max_evals: 300,
            inner_max_sweeps: 40,
            residual_tol: 1e-4,
            start: None,
        }
    }
}

/// Minimizer of the inner problem at fixed outer variables.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InnerSolution {
    pub zeta: ParisiMeasure,
    pub gamma: f64,
    pub h: f64,
    pub value: f64,
    pub evaluations: usize,
}

/// Saddle value with its arguments and first-order residuals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SaddleResult {
    pub value: f64,
    pub a: f64,
    pub d: f64,
    pub h: f64,
    pub gamma: f64,
    pub zeta: ParisiMeasure,
    /// `(variable, projected derivative)` of the inner objective.
    pub inner_residuals: Vec<(String, f64)>,
    /// `(variable, projected derivative)` of the outer value function.
    pub outer_residuals: Vec<(String, f64)>,
    pub max_residual: f64,
    pub evaluations: usize,
    pub converged: bool,
}

const A_RANGE: (f64, f64) = (0.1, 50.0);
const D_RANGE: (f64, f64) = (0.01, 25.0);
const GAMMA_BRACKET: f64 = 50.0;
const LAMBDA_EPS: f64 = 1e-9;

struct Inner<'a> {
    model: &'a ParisiModel,
    a: f64,
    d: f64,
    levels: usize,
    order: usize,
    /// Outer `h` for `α > 0`; `None` when `h` is an inner variable.
    outer_h: Option<f64>,
    evaluations: std::cell::Cell<usize>,
    rule_cache: std::cell::RefCell<Option<((u64, u64), LeafRule)>>,
}

impl Inner<'_> {
    fn reach(&self) -> f64 {
        field_reach(self.model, self.d, self.levels, self.order)
    }

    fn value(&self, lambdas: &[f64], fractions: &[f64], gamma: f64, h: f64) -> f64 {
        self.evaluations.set(self.evaluations.get() + 1);
        let Ok(zeta) = ParisiMeasure::from_fractions(lambdas.to_vec(), self.d, fractions) else {
            return f64::INFINITY;
        };
        let args = ParisiArgs {
            a: self.a,
            h,
            gamma,
            model: *self.model,
        };
        let key = (gamma.to_bits(), h.to_bits());
        let mut cache = self.rule_cache.borrow_mut();
        if cache.as_ref().is_none_or(|(k, _)| *k != key) {
            match LeafRule::build(&args, self.reach()) {
                Ok(rule) => *cache = Some((key, rule)),
                Err(_) => return f64::INFINITY,
            }
        }
        let rule = &cache.as_ref().expect("rule cached above").1;
        let v = objective_with_rule(&zeta, &args, rule, self.order);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    }

    fn h_inner(&self) -> bool {
        self.outer_h.is_none() && self.model.alpha < 0.0
    }

    fn solve(&self, warm: Option<&InnerSolution>, max_sweeps: usize) -> InnerSolution {
        let k = self.levels;
        let (mut lambdas, mut fractions, mut gamma, mut h) = match warm {
            Some(w) if w.zeta.levels() == k => (
                w.zeta.lambdas().to_vec(),
                w.zeta.atoms()[1..k].iter().map(|b| b / w.zeta.d()).collect::<Vec<_>>(),
                w.gamma,
                w.h,
            ),
            _ => (
                (1..=k).map(|i| i as f64 / (k + 1) as f64).collect(),
                (1..k).map(|i| i as f64 / k as f64).collect(),
                0.0,
                0.0,
            ),
        };
        if let Some(ho) = self.outer_h {
            h = ho;
        } else if !self.h_inner() {
            h = 0.0;
        }
        h = h.min(self.d.sqrt());
        let mut current = self.value(&lambdas, &fractions, gamma, h);
        for _ in 0..max_sweeps {
            let before = current;
            // γ, widening the bracket if the minimizer sits on its edge
            let mut bracket = GAMMA_BRACKET;
            loop {
                let m = brent_minimize(|g| self.value(&lambdas, &fractions, g, h), -bracket, bracket, 1e-10);
                if m.value <= current {
                    gamma = m.x;
                    current = m.value;
                }
                if (bracket - m.x.abs()) > 1e-6 * bracket || bracket >= 1e4 {
                    break;
                }
                bracket *= 4.0;
            }
            for i in 0..k {
                let lo = if i == 0 { 0.0 } else { lambdas[i - 1] } + LAMBDA_EPS;
                let hi = if i + 1 == k { 1.0 } else { lambdas[i + 1] } - LAMBDA_EPS;
                if hi <= lo {
                    continue;
                }
                let m = brent_minimize(
                    |l| {
                        let mut ls = lambdas.clone();
                        ls[i] = l;
                        self.value(&ls, &fractions, gamma, h)
                    },
                    lo,
                    hi,
                    1e-10,
                );
                if m.value <= current {
                    lambdas[i] = m.x;
                    current = m.value;
                }
            }
            for i in 0..fractions.len() {
                let lo = if i == 0 { 0.0 } else { fractions[i - 1] };
                let hi = if i + 1 == fractions.len() { 1.0 } else { fractions[i + 1] };
                let m = brent_minimize(
                    |t| {
                        let mut fs = fractions.clone();
                        fs[i] = t;
                        self.value(&lambdas, &fs, gamma, h)
                    },
                    lo,
                    hi,
                    1e-10,
                );
                if m.value <= current {
                    fractions[i] = m.x;
                    current = m.value;
                }
            }
            if self.h_inner() {
                let m = brent_minimize(|hv| self.value(&lambdas, &fractions, gamma, hv), 0.0, self.d.sqrt(), 1e-10);
                if m.value <= current {
                    h = m.x;
                    current = m.value;
                }
            }
            if before - current <= 1e-12 * (1.0 + current.abs()) {
                break;
            }
        }
        let zeta = ParisiMeasure::from_fractions(lambdas, self.d, &fractions).expect("search keeps ζ valid");
        InnerSolution {
            zeta,
            gamma,
            h,
            value: current,
            evaluations: self.evaluations.get(),
        }
    }

    /// Projected central-difference derivatives of the inner objective.
    fn residuals(&self, sol: &InnerSolution) -> Vec<(String, f64)> {
        let k = self.levels;
        let lambdas = sol.zeta.lambdas().to_vec();
        let fractions: Vec<f64> = sol.zeta.atoms()[1..k].iter().map(|b| b / self.d).collect();
        let mut out = Vec::new();
        let step = 1e-5;
        let g = |f: &dyn Fn(f64) -> f64, x: f64, lo: f64, hi: f64| -> f64 {
            let (xl, xh) = ((x - step).max(lo), (x + step).min(hi));
            let d = (f(xh) - f(xl)) / (xh - xl);
            projected(d, x, lo, hi)
        };
        out.push((
            "gamma".to_string(),
            g(&|v| self.value(&lambdas, &fractions, v, sol.h), sol.gamma, f64::NEG_INFINITY, f64::INFINITY),
        ));
        for i in 0..k {
            let lo = if i == 0 { 0.0 } else { lambdas[i - 1] } + LAMBDA_EPS;
            let hi = if i + 1 == k { 1.0 } else { lambdas[i + 1] } - LAMBDA_EPS;
            let f = |l: f64| {
                let mut ls = lambdas.clone();
                ls[i] = l;
                self.value(&ls, &fractions, sol.gamma, sol.h)
            };
            out.push((format!("lambda_{i}"), g(&f, lambdas[i], lo, hi)));
        }
        for i in 0..fractions.len() {
            let lo = if i == 0 { 0.0 } else { fractions[i - 1] };
            let hi = if i + 1 == fractions.len() { 1.0 } else { fractions[i + 1] };
            let f = |t: f64| {
                let mut fs = fractions.clone();
                fs[i] = t;
                self.value(&lambdas, &fs, sol.gamma, sol.h)
            };
            out.push((format!("atom_fraction_{}", i + 1), g(&f, fractions[i], lo, hi)));
        }
        if self.h_inner() {
            let f = |hv: f64| self.value(&lambdas, &fractions, sol.gamma, hv);
            out.push(("h".to_string(), g(&f, sol.h, 0.0, self.d.sqrt())));
        }
        out
    }
}

/// Derivative of a minimization objective with the components pushing out of
/// an active bound removed.
fn projected(d: f64, x: f64, lo: f64, hi: f64) -> f64 {
    let tol = 1e-7 * (1.0 + x.abs());
    if (x - lo).abs() <= tol && d > 0.0 || (hi - x).abs() <= tol && d < 0.0 {
        0.0
    } else {
        d
    }
}

/// Inner infimum over `ζ ∈ fop_D`, `γ` (and `h ∈ [0, √D]` when `α < 0`) at fixed outer variables.
pub fn inner_minimize(model: &ParisiModel, a: f64, d: f64, outer_h: Option<f64>, config: &SaddleConfig) -> Result<InnerSolution> {
    model.validate()?;
    if config.levels == 0 {
        return invalid("number of levels must be positive");
    }
    if !(a > 0.0 && d > 0.0) {
        return invalid("a and D must be positive");
    }
    let inner = Inner {
        model,
        a,
        d,
        levels: config.levels,
        order: config.order,
        outer_h,
        evaluations: std::cell::Cell::new(0),
        rule_cache: std::cell::RefCell::new(None),
    };
    Ok(inner.solve(None, config.inner_max_sweeps))
}

/// `sup_{a, D[, h]} inf_{ζ, γ[, h]} P_a(ζ, h, γ) − γD − βαh²/2`.
///
/// The outer supremum runs Nelder–Mead over `(log a, D)` (and `h = u√D`,
/// `u ∈ [0, 1]`, when `α > 0`); the inner infimum is coordinate descent with
/// Brent line searches. Returns the result with `converged = false` when the
/// largest residual exceeds the tolerance; see [`saddle_search`].
pub fn saddle_search_report(model: &ParisiModel, config: &SaddleConfig) -> Result<SaddleResult> {
    model.validate()?;
    if config.levels == 0 {
        return invalid("number of levels must be positive");
    }
    let outer_h = model.alpha > 0.0;
    let (a0, d0, h0) = config.start.unwrap_or_else(|| default_start(model));
    let total = std::cell::Cell::new(0usize);
    let warm: std::cell::RefCell<Option<InnerSolution>> = std::cell::RefCell::new(None);
    let solve_at = |p: &[f64]| -> InnerSolution {
        let a = p[0].exp();
        let d = p[1];
        let h = outer_h.then(|| p[2] * d.sqrt());
        let inner = Inner {
            model,
            a,
            d,
            levels: config.levels,
            order: config.order,
            outer_h: h,
            evaluations: std::cell::Cell::new(0),
            rule_cache: std::cell::RefCell::new(None),
        };
        let sol = inner.solve(warm.borrow().as_ref(), config.inner_max_sweeps);
        total.set(total.get() + sol.evaluations);
        sol
    };
    let mut start = vec![a0.clamp(A_RANGE.0, A_RANGE.1).ln(), d0.clamp(D_RANGE.0, D_RANGE.1)];
    let mut lower = vec![A_RANGE.0.ln(), D_RANGE.0];
    let mut upper = vec![A_RANGE.1.ln(), D_RANGE.1];
    let mut step = vec![0.5, 0.25 * start[1]];
    if outer_h {
        start.push((h0 / d0.sqrt()).clamp(0.0, 1.0));
        lower.push(0.0);
        upper.push(1.0);
        step.push(0.1);
    }
    let simplex = nelder_mead(
        |p| {
            let sol = solve_at(p);
            *warm.borrow_mut() = Some(sol.clone());
            -sol.value
        },
        &start,
        &step,
        &lower,
        &upper,
        1e-11,
        config.outer_max_evals,
    );
    let p = simplex.x.clone();
    let a = p[0].exp();
    let d = p[1];
    let h_outer = outer_h.then(|| p[2] * d.sqrt());
    let inner = Inner {
        model,
        a,
        d,
        levels: config.levels,
        order: config.order,
        outer_h: h_outer,
        evaluations: std::cell::Cell::new(0),
        rule_cache: std::cell::RefCell::new(None),
    };
    let sol = inner.solve(warm.borrow().as_ref(), config.inner_max_sweeps);
    let inner_residuals = inner.residuals(&sol);
    total.set(total.get() + inner.evaluations.get());

    // outer value function: maximized, so project the negated derivative
    let names = ["log_a", "D", "h_fraction"];
    let mut outer_residuals = Vec::new();
    let warm_sol = sol.clone();
    *warm.borrow_mut() = Some(warm_sol);
    for i in 0..p.len() {
        let step = 1e-4 * (1.0 + p[i].abs());
        let mut pl = p.clone();
        let mut ph = p.clone();
        pl[i] = (p[i] - step).max(lower[i]);
        ph[i] = (p[i] + step).min(upper[i]);
        let vl = solve_at(&pl).value;
        let vh = solve_at(&ph).value;
        let dv = (vh - vl) / (ph[i] - pl[i]);
        outer_residuals.push((names[i].to_string(), -projected(-dv, p[i], lower[i], upper[i])));
    }
    let max_residual = inner_residuals
        .iter()
        .chain(&outer_residuals)
        .map(|(_, r)| r.abs())
        .fold(0.0, f64::max);
    Ok(SaddleResult {
        value: sol.value,
        a,
        d,
        h: sol.h,
        gamma: sol.gamma,
        zeta: sol.zeta,
        inner_residuals,
        outer_residuals,
        max_residual,
        evaluations: total.get(),
        converged: max_residual <= config.residual_tol,
    })
}

/// As [`saddle_search_report`], but non-convergence is an error.
pub fn saddle_search(model: &ParisiModel, config: &SaddleConfig) -> Result<SaddleResult> {
    let r = saddle_search_report(model, config)?;
    if !r.converged {
        return Err(Error::NonConvergence(format!(
            "saddle residual {:.3e} exceeds {:.1e} (value {})",
            r.max_residual, config.residual_tol, r.value
        )));
    }
    Ok(r)
}

/// Decoupled guess: `a` far in the tail of `μ_β`, `D` its second moment, `h` its mean.
fn default_start(model: &ParisiModel) -> (f64, f64, f64) {
    let mu = crate::gibbs::BaseMeasure {
        beta: model.beta,
        phi: model.phi,
        linear: 1.0,
    };
    let l0 = mu.log_mass(None);
    let moment = |k: i32| -> f64 {
        let r = crate::quad::integrate(|x| x.powi(k) * (mu.log_density(x) - l0).exp(), 0.0, 60.0, 1e-14, 1e-12, 2000);
        r.value
    };
    let d = moment(2);
    (A_RANGE.1, d, moment(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gibbs::BaseMeasure;
    use crate::quad::integrate;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn model() -> ParisiModel {
        ParisiModel::new(2.0, 0.3, 0.0, 1.0).unwrap()
    }

    fn args(a: f64, h: f64, gamma: f64, m: ParisiModel) -> ParisiArgs {
        ParisiArgs { a, h, gamma, model: m }
    }

    /// Direct adaptive quadrature of the leaf in `x`, independent of [`LeafRule`].
    fn leaf_oracle(args: &ParisiArgs, s: f64) -> f64 {
        let m = &args.model;
        let mu = BaseMeasure {
            beta: m.beta,
            phi: m.phi,
            linear: 1.0,
        };
        let f = |x: f64| mu.log_density(x) + x * s + m.beta * m.alpha * args.h * x + args.gamma * x * x;
        let grid_max = (1..=4000).map(|i| f(args.a * i as f64 / 4000.0)).fold(f64::NEG_INFINITY, f64::max);
        let r = integrate(|x| if x <= 0.0 { 0.0 } else { (f(x) - grid_max).exp() }, 0.0, args.a, 1e-300, 1e-13, 5000);
        grid_max + r.value.ln()
    }

    #[test]
    fn measure_validation() {
        assert!(ParisiMeasure::new(vec![0.5], vec![0.0, 1.0]).is_ok());
        assert!(ParisiMeasure::new(vec![0.6, 0.5], vec![0.0, 0.5, 1.0]).is_err());
        assert!(ParisiMeasure::new(vec![1.0], vec![0.0, 1.0]).is_err());
        assert!(ParisiMeasure::new(vec![0.5], vec![0.1, 1.0]).is_err());
        assert!(ParisiMeasure::new(vec![0.3, 0.5], vec![0.0, 0.7, 0.4]).is_err());
        let z = ParisiMeasure::new(vec![0.2, 0.7], vec![0.0, 0.4, 1.5]).unwrap();
        let w = z.weights();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((w[0] - 0.2).abs() < 1e-15 && (w[2] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn covariance_theta_equals_xi() {
        let c = model().covariance();
        for x in [0.0, 0.3, 2.0] {
            assert!((c.theta(x) - c.xi(x)).abs() < 1e-15);
        }
    }

    #[test]
    fn leaf_rule_matches_direct_quadrature() {
        let mut rng = rng_from_seed(3);
        for _ in 0..20 {
            let m = ParisiModel::new(rng.random_range(0.8..3.0), 0.3, rng.random_range(-1.0..1.0), 1.0).unwrap();
            let a = args(rng.random_range(0.5..8.0), rng.random_range(0.0..1.0), rng.random_range(-3.0..1.0), m);
            let rule = LeafRule::build(&a, 6.0).unwrap();
            for s in [-5.5, -1.3, 0.0, 2.2, 5.9] {
                let want = leaf_oracle(&a, s);
                assert!((rule.eval(s) - want).abs() < 1e-10 * want.abs().max(1.0), "{a:?} s={s}: {} vs {want}", rule.eval(s));
            }
        }
    }

    #[test]
    fn leaf_peaked_at_edge() {
        let a = args(4.0, 0.0, 8.0, model());
        let want = leaf_oracle(&a, 1.0);
        let got = LeafRule::for_fields(&a, &[1.0]).eval(1.0);
        assert!((got - want).abs() < 1e-10 * want.abs(), "{got} vs {want}");
    }

    #[test]
    fn leaf_examples() {
        let m = model();
        let z = ParisiMeasure::new(vec![0.5], vec![0.0, 1.0]).unwrap();
        let a = args(5.0, 0.0, 0.0, m);
        let mass = BaseMeasure {
            beta: 2.0,
            phi: 1.0,
            linear: 1.0,
        }
        .log_mass(Some(5.0));
        assert!((x_leaf(&a, &z, &[0.0]).unwrap() - mass).abs() < 1e-12);
        let vals: Vec<f64> = [1.0, 2.0, 4.0]
            .iter()
            .map(|e| x_leaf(&args(*e, 0.2, -0.1, m), &z, &[0.7]).unwrap())
            .collect();
        assert!(vals.windows(2).all(|w| w[1] > w[0]));
        let free = ParisiModel { kappa: 0.0, ..m };
        let l1 = x_leaf(&args(3.0, 0.0, 0.2, free), &z, &[2.0]).unwrap();
        let l2 = x_leaf(&args(3.0, 0.0, 0.2, free), &z, &[-1.0]).unwrap();
        assert_eq!(l1, l2);
    }

    #[test]
    fn linear_leaf_closed_form() {
        for (lams, scales) in [
            (vec![0.4], vec![1.3]),
            (vec![0.2, 0.7], vec![0.8, 1.1]),
            (vec![0.1, 0.5, 0.9], vec![0.5, 0.6, 0.7]),
            (vec![0.1, 0.3, 0.5, 0.8], vec![0.5, 0.2, 0.6, 0.4]),
        ] {
            let m = 0.37;
            let want = m + lams.iter().zip(&scales).map(|(l, c)| 0.5 * l * c * c).sum::<f64>();
            let got = recursion_with_leaf(&lams, &scales, &|s| m + s, 40);
            assert!((got - want).abs() < 1e-9, "{lams:?}: {got} vs {want}");
        }
    }

    #[test]
    fn grid_recursion_matches_tensor() {
        let lams = [0.2, 0.5, 0.8];
        let scales = [0.4, 0.7, 0.5];
        let leaf = |s: f64| (1.0 + (0.8 * s).exp()).ln() - 0.1 * s * s / (1.0 + s * s);
        let gh = gauss_hermite(40);
        let t = tensor_level(0, 0.0, &lams, &scales, &leaf, &gh);
        let g = grid_recursion(&lams, &scales, &leaf, &gh);
        assert!((t - g).abs() < 1e-8, "{t} vs {g}");
    }

    #[test]
    fn free_model_is_leaf_value() {
        let free = ParisiModel { kappa: 0.0, ..model() };
        let a = args(3.0, 0.0, -0.4, free);
        let z = ParisiMeasure::new(vec![0.3, 0.6], vec![0.0, 0.5, 1.2]).unwrap();
        let leaf = x_leaf(&a, &z, &[0.0, 0.0]).unwrap();
        assert!((recursion_x0(&z, &a).unwrap() - leaf).abs() < 1e-12);
        assert!((parisi_value(&z, &a).unwrap() - leaf).abs() < 1e-12);
    }

    #[test]
    fn degenerate_level_invariance() {
        let a = args(4.0, 0.0, -0.3, model());
        let base = ParisiMeasure::new(vec![0.3, 0.7], vec![0.0, 0.6, 1.4]).unwrap();
        let refined = ParisiMeasure::new(vec![0.3, 0.5, 0.7], vec![0.0, 0.6, 0.6, 1.4]).unwrap();
        let x = recursion_x0(&base, &a).unwrap();
        let y = recursion_x0(&refined, &a).unwrap();
        assert!((x - y).abs() < 1e-8, "{x} vs {y}");
        // merging two equal atoms
        let merged = ParisiMeasure::new(vec![0.3], vec![0.0, 1.4]).unwrap();
        let split = ParisiMeasure::new(vec![0.3, 0.6], vec![0.0, 1.4, 1.4]).unwrap();
        assert!((recursion_x0(&merged, &a).unwrap() - recursion_x0(&split, &a).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn doubling_check_is_quiet() {
        let a = args(4.0, 0.1, -0.3, model());
        let z = ParisiMeasure::new(vec![0.3, 0.7], vec![0.0, 0.6, 1.4]).unwrap();
        let r = recursion_x0_checked(&z, &a, RecursionOptions { order: 40, check_doubling: true }).unwrap();
        assert!(!r.flagged, "{r:?}");
    }

    #[test]
    fn x0_nondecreasing_in_lambda() {
        let a = args(4.0, 0.0, -0.3, model());
        let vals: Vec<f64> = [0.1, 0.3, 0.5, 0.7, 0.9]
            .iter()
            .map(|l| recursion_x0(&ParisiMeasure::new(vec![*l], vec![0.0, 1.5]).unwrap(), &a).unwrap())
            .collect();
        assert!(vals.windows(2).all(|w| w[1] >= w[0] - 1e-13), "{vals:?}");
        assert!(vals[4] - vals[0] > 1e-4);
    }

    #[test]
    fn correction_examples() {
        let m = model();
        let cov = m.covariance();
        let d = 1.7;
        let z = ParisiMeasure::new(vec![0.5], vec![0.0, d]).unwrap();
        let expected = (m.beta * m.kappa).powi(2) / 4.0 * 0.5 * d * d;
        assert!((correction_sum(&z, &cov) - expected).abs() < 1e-15);
        assert!((correction_theta(&z, &cov) - expected).abs() < 1e-15);
        let near_one = ParisiMeasure::new(vec![1.0 - 1e-12], vec![0.0, d]).unwrap();
        assert!((correction_sum(&near_one, &cov) - 0.5 * cov.theta(d)).abs() < 1e-11);
        let free = ParisiModel { kappa: 0.0, ..m };
        assert_eq!(correction_sum(&z, &free.covariance()), 0.0);
    }

    #[test]
    fn objective_examples() {
        let m = ParisiModel::new(2.0, 0.3, -0.5, 1.0).unwrap();
        let z = ParisiMeasure::new(vec![0.4], vec![0.0, 1.2]).unwrap();
        let a = args(4.0, 0.0, 0.0, m);
        assert!((objective(&z, &a).unwrap() - parisi_value(&z, &a).unwrap()).abs() < 1e-15);
        let m0 = model();
        let o1 = objective(&z, &args(4.0, 0.0, 0.1, m0)).unwrap();
        let o2 = objective(&z, &args(4.0, 0.8, 0.1, m0)).unwrap();
        assert!((o1 - o2).abs() < 1e-14);
    }

    #[test]
    fn gamma_derivative_is_tilted_second_moment() {
        // K = 1 with κ → 0: ∂_γ objective = ⟨x²⟩ − D under the γ-tilted μ_β on [0, a]
        let m = ParisiModel { kappa: 0.0, ..model() };
        let z = ParisiMeasure::new(vec![0.5], vec![0.0, 0.8]).unwrap();
        let gamma = -0.2;
        let h = 1e-5;
        let fd = (objective(&z, &args(3.0, 0.0, gamma + h, m)).unwrap() - objective(&z, &args(3.0, 0.0, gamma - h, m)).unwrap()) / (2.0 * h);
        let mu = BaseMeasure {
            beta: 2.0,
            phi: 1.0,
            linear: 1.0,
        };
        let w = |x: f64, k: i32| x.powi(k) * (mu.log_density(x) + gamma * x * x).exp();
        let num = integrate(|x| w(x, 2), 0.0, 3.0, 1e-300, 1e-13, 2000).value;
        let den = integrate(|x| w(x, 0), 0.0, 3.0, 1e-300, 1e-13, 2000).value;
        assert!((fd - (num / den - 0.8)).abs() < 1e-7, "{fd} vs {}", num / den - 0.8);
    }

    #[test]
    fn objective_convex_in_gamma() {
        let z = ParisiMeasure::new(vec![0.4, 0.8], vec![0.0, 0.5, 1.2]).unwrap();
        let vals: Vec<f64> = (0..21)
            .map(|i| objective(&z, &args(4.0, 0.3, -2.0 + 0.2 * i as f64, model())).unwrap())
            .collect();
        for w in vals.windows(3) {
            assert!(w[0] - 2.0 * w[1] + w[2] >= -1e-10);
        }
    }

    #[test]
    fn more_levels_do_not_raise_the_infimum() {
        let m = model();
        let cfg1 = SaddleConfig::default();
        let cfg2 = SaddleConfig { levels: 2, ..Default::default() };
        let one = inner_minimize(&m, 6.0, 0.9, None, &cfg1).unwrap();
        let two = inner_minimize(&m, 6.0, 0.9, None, &cfg2).unwrap();
        assert!(two.value <= one.value + 1e-8, "{} vs {}", two.value, one.value);
    }

    #[test]
    fn box_edge_beyond_the_mass_is_inert() {
        let m = model();
        let cfg = SaddleConfig::default();
        let lo = inner_minimize(&m, 20.0, 1.3, None, &cfg).unwrap();
        let hi = inner_minimize(&m, 45.0, 1.3, None, &cfg).unwrap();
        assert!((lo.value - hi.value).abs() < 1e-8, "{} vs {}", lo.value, hi.value);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn correction_two_forms_agree(k in 1usize..6, seed in 0u64..100_000, bk in 0.1f64..3.0) {
            let mut rng = rng_from_seed(seed);
            let mut lambdas: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..0.99)).collect();
            lambdas.sort_by(f64::total_cmp);
            lambdas.dedup();
            let kk = lambdas.len();
            let mut atoms: Vec<f64> = (0..kk).map(|_| rng.random_range(0.0..5.0)).collect();
            atoms.sort_by(f64::total_cmp);
            atoms[0] = 0.0;
            atoms.push(atoms[kk - 1] + rng.random_range(0.01..2.0));
            let z = ParisiMeasure::new(lambdas, atoms).unwrap();
            let cov = CovarianceFns { beta: bk, kappa: 0.7 };
            let a = correction_sum(&z, &cov);
            let b = correction_theta(&z, &cov);
            prop_assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        }
    }
}
