//! The invariant Gibbs measure `G(dx) ∝ exp(βH(x)) dx` of the SDE, with
//! `H(x) = ½xᵀ(Σ − I)x + 1·x + (φ − T)·Σ log x_i`.
//!
//! Every target is handled as a product base measure
//! `ν(dx) = x^{φβ−1} exp(−βx²/2 + βb x) dx` tilted by `exp(β/2 xᵀCx)`:
//! `b = 1, C = Σ` without external field, `b = 1 + αh, C = Σ − α11ᵀ/n` with it.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::frontier::EnsembleParams;
use crate::quad::integrate;
use crate::randmat::{lambda_plus_max, truncate, InteractionMatrix};
use crate::rng::{derive_seed, rng_from_seed};
use crate::sde::{batch_std_error, Estimate, ModelParams};

/// Log-density drop at which quadrature ranges are cut.
const ENVELOPE_MARGIN: f64 = 50.0;
const MAX_SEGMENTS: usize = 2000;

/// `H(x)`; every entry of `x` must be positive.
pub fn hamiltonian(x: &DVector<f64>, params: &ModelParams) -> Result<f64> {
    params.require_gibbs()?;
    if x.len() != params.n() {
        return invalid(format!("x has length {}, expected {}", x.len(), params.n()));
    }
    if x.iter().any(|v| !(*v > 0.0)) {
        return invalid("hamiltonian needs strictly positive x");
    }
    let sx = params.sigma().entries() * x;
    let quad = 0.5 * (x.dot(&sx) - x.norm_squared());
    let logs: f64 = x.iter().map(|v| v.ln()).sum();
    Ok(quad + x.sum() + (params.phi() - params.temperature()) * logs)
}

/// One-dimensional base measure `x^{φβ−1} exp(−βx²/2 + β·linear·x) dx` on `(0, ∞)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseMeasure {
    pub beta: f64,
    pub phi: f64,
    pub linear: f64,
}

impl BaseMeasure {
    fn shape(&self) -> f64 {
        self.phi * self.beta
    }

    pub fn log_density(&self, x: f64) -> f64 {
        (self.shape() - 1.0) * x.ln() - 0.5 * self.beta * x * x + self.beta * self.linear * x
    }

    pub fn density(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        self.log_density(x).exp()
    }

    /// `log ∫₀^upper ν(dx)` by adaptive Gauss–Kronrod in `y = log x`.
    pub fn log_mass(&self, upper: Option<f64>) -> f64 {
        let env = Envelope::new(self.shape(), self.beta, self.linear, 1.0);
        let (lo, hi, top) = env.range(upper.map(f64::ln));
        let r = integrate(|y| (self.log_density(y.exp()) + y - top).exp(), lo, hi, 1e-300, 1e-13, MAX_SEGMENTS);
        top + r.value.ln()
    }
}

/// `μ_β(dx) = x^{φβ−1} exp(−βx²/2 + βx) dx`.
pub fn mu_beta(params: &ModelParams) -> Result<BaseMeasure> {
    if !(params.temperature() > 0.0 && params.phi() * params.beta() > 1.0) {
        return invalid(format!(
            "base measure needs phi*beta > 1 (phi = {}, T = {})",
            params.phi(),
            params.temperature()
        ));
    }
    Ok(BaseMeasure {
        beta: params.beta(),
        phi: params.phi(),
        linear: 1.0,
    })
}

/// Unnormalized `μ_β` density at `x1 > 0`.
pub fn mu_beta_density(x1: f64, params: &ModelParams) -> Result<f64> {
    let mu = mu_beta(params)?;
    if !(x1 > 0.0) {
        return invalid(format!("density argument must be positive, got {x1}"));
    }
    Ok(mu.density(x1))
}

/// `ν_{β,h}(dx) = x^{φβ−1} exp(−βx²/2 + β(1 + αh)x) dx`, `α` taken from the ensemble of `Σ` (0 if none).
pub fn external_field_measure(params: &ModelParams, h: f64) -> Result<BaseMeasure> {
    let alpha = params.sigma().ensemble().map_or(0.0, |e| e.alpha);
    let mut m = mu_beta(params)?;
    m.linear = 1.0 + alpha * h;
    Ok(m)
}

/// Integration domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Domain {
    Orthant,
    /// `{x ≥ 0 : ‖x‖ ≤ A√n}`
    Ball { a: f64 },
    /// `[0, a]ⁿ`
    Box { a: f64 },
}

impl Domain {
    fn contains(&self, x: &DVector<f64>) -> bool {
        match *self {
            Domain::Orthant => true,
            Domain::Ball { a } => x.norm() <= a * (x.len() as f64).sqrt(),
            Domain::Box { a } => x.iter().all(|v| *v <= a),
        }
    }
}

/// A normalizable Gibbs density `exp(β/2 xᵀCx) ν^{⊗n}(dx)` restricted to a domain.
#[derive(Debug, Clone)]
pub struct GibbsTarget {
    params: ModelParams,
    domain: Domain,
    external_field: Option<f64>,
    base: BaseMeasure,
    coupling: DMatrix<f64>,
    lambda_plus_coupling: f64,
}

impl GibbsTarget {
    pub fn new(params: ModelParams, domain: Domain, external_field: Option<f64>) -> Result<Self> {
        params.require_gibbs()?;
        match domain {
            Domain::Ball { a } | Domain::Box { a } if !(a > 0.0 && a.is_finite()) => {
                return invalid(format!("domain size must be positive and finite, got {a}"));
            }
            _ => {}
        }
        let (base, coupling) = match external_field {
            None => (mu_beta(&params)?, params.sigma().entries().clone()),
            Some(h) => {
                if !h.is_finite() {
                    return invalid("external field must be finite");
                }
                (external_field_measure(&params, h)?, params.sigma().fluctuation())
            }
        };
        let lambda_plus_coupling = lambda_plus_max(&coupling)?;
        if domain == Domain::Orthant && lambda_plus_coupling >= 1.0 {
            return Err(Error::Divergent(format!(
                "λ+max of the coupling is {lambda_plus_coupling} >= 1; the Gibbs density is not integrable on the orthant"
            )));
        }
        Ok(Self {
            params,
            domain,
            external_field,
            base,
            coupling,
            lambda_plus_coupling,
        })
    }

    pub fn n(&self) -> usize {
        self.params.n()
    }
    pub fn params(&self) -> &ModelParams {
        &self.params
    }
    pub fn domain(&self) -> Domain {
        self.domain
    }
    pub fn external_field(&self) -> Option<f64> {
        self.external_field
    }
    pub fn base(&self) -> BaseMeasure {
        self.base
    }
    pub fn coupling(&self) -> &DMatrix<f64> {
        &self.coupling
    }

    /// `H_n(x) = β/2 xᵀCx`.
    pub fn interaction_energy(&self, x: &DVector<f64>) -> f64 {
        0.5 * self.base.beta * x.dot(&(&self.coupling * x))
    }

    /// Log of the unnormalized density of the `t`-interpolated target in `y = log x`
    /// coordinates (Jacobian included).
    fn log_density_y(&self, y: &[f64], x: &DVector<f64>, t: f64) -> f64 {
        let b = &self.base;
        let a = b.shape();
        let single: f64 = y
            .iter()
            .zip(x.iter())
            .map(|(yi, xi)| a * yi - 0.5 * b.beta * xi * xi + b.beta * b.linear * xi)
            .sum();
        if t == 0.0 {
            single
        } else {
            single + t * self.interaction_energy(x)
        }
    }

    fn envelope(&self, t: f64) -> Envelope {
        Envelope::new(self.base.shape(), self.base.beta, self.base.linear, 1.0 - t * self.lambda_plus_coupling)
    }

    fn require_normalizable(&self, t: f64) -> Result<()> {
        if self.domain == Domain::Orthant && 1.0 - t * self.lambda_plus_coupling <= 0.0 {
            return Err(Error::Divergent("coupling too strong for the orthant".into()));
        }
        Ok(())
    }
}

/// Per-coordinate bound `e(y) = a y − βc e^{2y}/2 + βb e^y` on the log density in
/// `y = log x`, valid because `xᵀCx ≤ λ+max(C)‖x‖²` on the orthant. For
/// `c ≤ 0` (bounded domains only) the peak is taken at `+∞`.
#[derive(Debug, Clone, Copy)]
struct Envelope {
    a: f64,
    beta: f64,
    b: f64,
    c: f64,
    peak: f64,
}

impl Envelope {
    fn new(a: f64, beta: f64, b: f64, c: f64) -> Self {
        let peak = if c > 0.0 {
            ((beta * b + (beta * beta * b * b + 4.0 * beta * c * a).sqrt()) / (2.0 * beta * c)).ln()
        } else {
            f64::INFINITY
        };
        Self { a, beta, b, c, peak }
    }

    fn eval(&self, y: f64) -> f64 {
        let u = y.exp();
        self.a * y - 0.5 * self.beta * self.c * u * u + self.beta * self.b * u
    }

    /// `(lo, hi, top)`: the `y` interval, capped at `limit`, outside which `e` is
    /// more than the margin below `top`, its maximum on `y ≤ limit`.
    fn range(&self, limit: Option<f64>) -> (f64, f64, f64) {
        let cap = limit.unwrap_or(f64::INFINITY);
        let top_y = self.peak.min(cap);
        let top = self.eval(top_y);
        let target = top - ENVELOPE_MARGIN;
        let find = |dir: f64| {
            let mut step = 1.0;
            while self.eval(top_y + dir * step) > target && step < 1e4 {
                step *= 2.0;
            }
            let (lo, hi) = if dir < 0.0 {
                (top_y - step, top_y)
            } else {
                (top_y, top_y + step)
            };
            crate::optim::bisect(|y| self.eval(y) - target, lo, hi, 1e-10).unwrap_or(top_y + dir * step)
        };
        let lo = find(-1.0);
        let hi = if top_y < cap { find(1.0).min(cap) } else { cap };
        (lo, hi, top)
    }
}

/// `∫ g(x) exp(ℓ_t(x) − shift) dx` over the target domain (intersected with the
/// optional box `window`), by nested adaptive Gauss–Kronrod in log coordinates.
fn nested_integral(
    target: &GibbsTarget,
    t: f64,
    window: Option<&[(f64, f64)]>,
    g: &dyn Fn(&DVector<f64>) -> f64,
    rel_tol: f64,
) -> (f64, f64) {
    nested_integral_tol(target, t, window, g, 1e-300, rel_tol)
}

fn nested_integral_tol(
    target: &GibbsTarget,
    t: f64,
    window: Option<&[(f64, f64)]>,
    g: &dyn Fn(&DVector<f64>) -> f64,
    abs_tol: f64,
    rel_tol: f64,
) -> (f64, f64) {
    let n = target.n();
    let limit = match target.domain {
        Domain::Orthant => None,
        Domain::Box { a } => Some(a.ln()),
        Domain::Ball { a } => Some((a * (n as f64).sqrt()).ln()),
    };
    let (lo, hi, top) = target.envelope(t).range(limit);
    let shift = n as f64 * top;
    let mut x = DVector::zeros(n);
    let mut y = vec![0.0; n];
    let ctx = Nest {
        target,
        t,
        window,
        g,
        shift,
        lo,
        hi,
        abs_tol,
        rel_tol,
    };
    (ctx.level(0, &mut x, &mut y), shift)
}

struct Nest<'a> {
    target: &'a GibbsTarget,
    t: f64,
    window: Option<&'a [(f64, f64)]>,
    g: &'a dyn Fn(&DVector<f64>) -> f64,
    shift: f64,
    lo: f64,
    hi: f64,
    abs_tol: f64,
    rel_tol: f64,
}

impl Nest<'_> {
    fn level(&self, depth: usize, x: &mut DVector<f64>, y: &mut Vec<f64>) -> f64 {
        let n = x.len();
        let mut lo = self.lo;
        let mut hi = self.hi;
        if let Domain::Ball { a } = self.target.domain {
            let r2 = a * a * n as f64 - (0..depth).map(|j| x[j] * x[j]).sum::<f64>();
            if r2 <= 0.0 {
                return 0.0;
            }
            hi = hi.min(0.5 * r2.ln());
        }
        if let Some(w) = self.window {
            let (wl, wh) = w[depth];
            if wl > 0.0 {
                lo = lo.max(wl.ln());
            }
            hi = hi.min(wh.ln());
        }
        if hi <= lo {
            return 0.0;
        }
        let r = integrate(
            |yv| {
                y[depth] = yv;
                x[depth] = yv.exp();
                if depth + 1 == n {
                    let g = (self.g)(x);
                    if g == 0.0 {
                        return 0.0;
                    }
                    g * (self.target.log_density_y(y, x, self.t) - self.shift).exp()
                } else {
                    self.level(depth + 1, x, y)
                }
            },
            lo,
            hi,
            self.abs_tol,
            self.rel_tol,
            MAX_SEGMENTS,
        );
        r.value
    }
}

/// `log ∫ exp(βH) dx` over the target domain for `n ≤ 3`.
pub fn quadrature_log_z(target: &GibbsTarget, rel_tol: f64) -> Result<f64> {
    quadrature_log_z_at(target, 1.0, rel_tol)
}

fn quadrature_log_z_at(target: &GibbsTarget, t: f64, rel_tol: f64) -> Result<f64> {
    if target.n() > 3 {
        return invalid(format!("quadrature supports n <= 3, got {}", target.n()));
    }
    target.require_normalizable(t)?;
    let (value, shift) = nested_integral(target, t, None, &|_| 1.0, rel_tol);
    Ok(shift + value.ln())
}

/// `E_G g(x)` by nested quadrature, `n ≤ 3`.
pub fn quadrature_expectation(target: &GibbsTarget, g: &dyn Fn(&DVector<f64>) -> f64, rel_tol: f64) -> Result<f64> {
    if target.n() > 3 {
        return invalid(format!("quadrature supports n <= 3, got {}", target.n()));
    }
    target.require_normalizable(1.0)?;
    let (num, _) = nested_integral(target, 1.0, None, g, rel_tol);
    let (den, _) = nested_integral(target, 1.0, None, &|_| 1.0, rel_tol);
    Ok(num / den)
}

/// Metropolis chain settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainConfig {
    pub burn_in: usize,
    pub samples: usize,
    pub thin: usize,
    pub batches: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            burn_in: 5_000,
            samples: 40_000,
            thin: 1,
            batches: 40,
        }
    }
}

/// Output of [`mcmc_sample`]; `samples` are the thinned post-burn-in states.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub samples: Vec<DVector<f64>>,
    pub acceptance_rate: f64,
    pub proposal_scale: f64,
    batches: usize,
}

impl SampleSet {
    /// Sample mean of `f` with a batch-means standard error.
    pub fn mean(&self, f: impl Fn(&DVector<f64>) -> f64) -> Estimate {
        let values: Vec<f64> = self.samples.iter().map(f).collect();
        mean_with_batches(&values, self.batches)
    }
}

fn mean_with_batches(values: &[f64], batches: usize) -> Estimate {
    let len = values.len();
    let value = values.iter().sum::<f64>() / len as f64;
    let b = batches.clamp(2, len.max(2));
    let per = len / b;
    let means: Vec<f64> = (0..b)
        .filter(|k| per > 0 && (k + 1) * per <= len)
        .map(|k| values[k * per..(k + 1) * per].iter().sum::<f64>() / per as f64)
        .collect();
    Estimate {
        value,
        std_error: batch_std_error(&means),
    }
}

/// Mode of the base measure in each coordinate; the default chain start.
pub fn default_start(target: &GibbsTarget) -> DVector<f64> {
    let env = Envelope::new(target.base.shape(), target.base.beta, target.base.linear, 1.0);
    let mut x = DVector::from_element(target.n(), env.peak.exp());
    if !target.domain.contains(&x) {
        x *= 0.5;
        while !target.domain.contains(&x) {
            x *= 0.5;
        }
    }
    x
}

/// Random-walk Metropolis in `y = log x` targeting the `t`-interpolated density.
///
/// The proposal scale adapts toward acceptance 0.3 during burn-in and is frozen
/// afterwards. `observe` sees every thinned post-burn-in state.
fn run_chain(
    target: &GibbsTarget,
    t: f64,
    config: &ChainConfig,
    start: &DVector<f64>,
    seed: u64,
    observe: &mut dyn FnMut(&DVector<f64>),
) -> Result<(f64, f64)> {
    let n = target.n();
    if start.len() != n || start.iter().any(|v| !(*v > 0.0 && v.is_finite())) || !target.domain.contains(start) {
        return invalid("chain start must be a positive point inside the domain");
    }
    if config.samples == 0 || config.thin == 0 {
        return invalid("chain needs samples > 0 and thin > 0");
    }
    let mut rng = rng_from_seed(seed);
    let mut y: Vec<f64> = start.iter().map(|v| v.ln()).collect();
    let mut x = start.clone();
    let mut logp = target.log_density_y(&y, &x, t);
    let mut yp = y.clone();
    let mut xp = x.clone();
    let mut log_scale = (1.2 / (n as f64).sqrt()).ln();
    let total = config.burn_in + config.samples * config.thin;
    let mut accepted = 0usize;
    for k in 0..total {
        let scale = log_scale.exp();
        for i in 0..n {
            yp[i] = y[i] + scale * rng.sample::<f64, _>(StandardNormal);
            xp[i] = yp[i].exp();
        }
        let u: f64 = rng.random();
        let mut accept = false;
        if target.domain.contains(&xp) {
            let lp = target.log_density_y(&yp, &xp, t);
            if lp.is_finite() && u.ln() < lp - logp {
                accept = true;
                std::mem::swap(&mut y, &mut yp);
                std::mem::swap(&mut x, &mut xp);
                logp = lp;
            }
        }
        if k < config.burn_in {
            let gain = 1.0 / ((k + 1) as f64).powf(0.6);
            log_scale += gain * (if accept { 1.0 } else { 0.0 } - 0.3);
            log_scale = log_scale.clamp(-12.0, 3.0);
        } else {
            if accept {
                accepted += 1;
            }
            if (k - config.burn_in + 1) % config.thin == 0 {
                observe(&x);
            }
        }
    }
    let rate = accepted as f64 / (config.samples * config.thin) as f64;
    if rate < 0.01 {
        return Err(Error::LowAcceptance(rate));
    }
    Ok((rate, log_scale.exp()))
}

/// Samples the Gibbs target.
pub fn mcmc_sample(target: &GibbsTarget, config: &ChainConfig, start: Option<&DVector<f64>>, seed: u64) -> Result<SampleSet> {
    let start = start.cloned().unwrap_or_else(|| default_start(target));
    let mut samples = Vec::with_capacity(config.samples);
    let (acceptance_rate, proposal_scale) = run_chain(target, 1.0, config, &start, seed, &mut |x| samples.push(x.clone()))?;
    Ok(SampleSet {
        samples,
        acceptance_rate,
        proposal_scale,
        batches: config.batches,
    })
}

/// Potential scale reduction factor of equally long scalar chains.
pub fn gelman_rubin(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len() as f64;
    let len = chains.iter().map(Vec::len).min().unwrap_or(0);
    if chains.len() < 2 || len < 2 {
        return f64::NAN;
    }
    let l = len as f64;
    let means: Vec<f64> = chains.iter().map(|c| c[..len].iter().sum::<f64>() / l).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = l / (m - 1.0) * means.iter().map(|v| (v - grand).powi(2)).sum::<f64>();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c[..len].iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (l - 1.0))
        .sum::<f64>()
        / m;
    let var = (l - 1.0) / l * w + b / l;
    (var / w).sqrt()
}

/// Thermodynamic-integration schedule and chain settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThermoConfig {
    /// Equally spaced points on `[0, 1]`.
    pub points: usize,
    /// Insert midpoints where the integrand changes fastest.
    pub refine: bool,
    pub chain: ChainConfig,
}

impl Default for ThermoConfig {
    fn default() -> Self {
        Self {
            points: 21,
            refine: true,
            chain: ChainConfig::default(),
        }
    }
}

/// Disorder-averaged (or single-disorder) per-site log partition function.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FreeEnergyEstimate {
    pub n: usize,
    /// `n⁻¹ log Z`, averaged over disorder draws.
    pub value: f64,
    pub std_error: f64,
    pub replicas: usize,
    pub schedule: Vec<f64>,
    pub seeds: Vec<u64>,
    pub truncation_frequency: f64,
}

struct ThermoPoint {
    mean: Estimate,
    variance: f64,
}

fn thermo_point(target: &GibbsTarget, t: f64, chain: &ChainConfig, seed: u64) -> Result<ThermoPoint> {
    let start = default_start(target);
    let mut values = Vec::with_capacity(chain.samples);
    run_chain(target, t, chain, &start, seed, &mut |x| values.push(target.interaction_energy(x)))?;
    let mean = mean_with_batches(&values, chain.batches);
    let variance = values.iter().map(|v| (v - mean.value).powi(2)).sum::<f64>() / (values.len().max(2) - 1) as f64;
    Ok(ThermoPoint { mean, variance })
}

/// `n⁻¹ log Z` by thermodynamic integration in the coupling strength `t`.
///
/// `log Z(1) = n·log mass(ν) + ∫₀¹ ⟨H_n⟩_t dt` with `⟨H_n⟩_t` from independent
/// chains. The `t`-integral is the trapezoid rule with the endpoint
/// derivative correction `h²/12·(f'(t_k) − f'(t_{k+1}))`, where
/// `f'(t) = Var_t(H_n)`.
pub fn log_z_thermo(target: &GibbsTarget, config: &ThermoConfig, seed: u64) -> Result<FreeEnergyEstimate> {
    let n = target.n();
    let upper = match target.domain {
        Domain::Orthant => None,
        Domain::Box { a } => Some(a),
        Domain::Ball { .. } => return invalid("thermodynamic integration does not support the ball domain"),
    };
    if config.points < 2 {
        return invalid("thermodynamic integration needs at least 2 grid points");
    }
    target.require_normalizable(1.0)?;
    let log_z0 = n as f64 * target.base.log_mass(upper);

    let mut schedule: Vec<f64> = (0..config.points).map(|k| k as f64 / (config.points - 1) as f64).collect();
    let mut seeds: Vec<u64> = (0..config.points as u64).map(|k| derive_seed(seed, k)).collect();
    let mut points = schedule
        .iter()
        .zip(&seeds)
        .map(|(t, s)| thermo_point(target, *t, &config.chain, *s))
        .collect::<Result<Vec<_>>>()?;

    if config.refine {
        let jumps: Vec<f64> = points.windows(2).map(|w| (w[1].mean.value - w[0].mean.value).abs()).collect();
        let mean_jump = jumps.iter().sum::<f64>() / jumps.len() as f64;
        let mut extra = 0u64;
        let mut merged_t = vec![schedule[0]];
        let mut merged_s = vec![seeds[0]];
        let mut merged_p = vec![points.remove(0)];
        for (k, p) in points.into_iter().enumerate() {
            if mean_jump > 0.0 && jumps[k] > 2.0 * mean_jump {
                let tm = 0.5 * (schedule[k] + schedule[k + 1]);
                let s = derive_seed(seed, 10_000 + extra);
                extra += 1;
                merged_p.push(thermo_point(target, tm, &config.chain, s)?);
                merged_t.push(tm);
                merged_s.push(s);
            }
            merged_t.push(schedule[k + 1]);
            merged_s.push(seeds[k + 1]);
            merged_p.push(p);
        }
        schedule = merged_t;
        seeds = merged_s;
        points = merged_p;
    }

    let mut integral = 0.0;
    let mut var = 0.0;
    let mut weights = vec![0.0; points.len()];
    for k in 0..points.len() - 1 {
        let h = schedule[k + 1] - schedule[k];
        integral += 0.5 * h * (points[k].mean.value + points[k + 1].mean.value);
        integral += h * h / 12.0 * (points[k].variance - points[k + 1].variance);
        weights[k] += 0.5 * h;
        weights[k + 1] += 0.5 * h;
    }
    for (w, p) in weights.iter().zip(&points) {
        let se = if p.mean.std_error.is_finite() { p.mean.std_error } else { 0.0 };
        var += w * w * se * se;
    }
    Ok(FreeEnergyEstimate {
        n,
        value: (log_z0 + integral) / n as f64,
        std_error: var.sqrt() / n as f64,
        replicas: 1,
        schedule,
        seeds,
        truncation_frequency: 0.0,
    })
}

/// Model settings of a disorder average.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DisorderSetup {
    pub n: usize,
    pub ensemble: EnsembleParams,
    pub phi: f64,
    pub temperature: f64,
    pub replicas: usize,
    pub eps_sigma: f64,
}

/// `F̃_n = n⁻¹ E log Z̃` over `replicas` disorder draws (run in parallel, reduced in draw order).
///
/// Draws with `λ+max(Σ) ≥ 1 − ε_Σ` use `Σ̃ = 0`. With one replica the result
/// is the single-draw thermodynamic estimate.
pub fn free_energy_disorder_avg(setup: &DisorderSetup, config: &ThermoConfig, seed: u64) -> Result<FreeEnergyEstimate> {
    use rayon::prelude::*;
    if setup.replicas == 0 {
        return invalid("replicas must be positive");
    }
    let per_draw: Vec<(FreeEnergyEstimate, bool, u64)> = (0..setup.replicas)
        .into_par_iter()
        .map(|r| {
            let s = derive_seed(seed, r as u64);
            let sigma = InteractionMatrix::sample(setup.n, setup.ensemble, s)?;
            let (tilde, kept) = truncate(&sigma, setup.eps_sigma)?;
            let params = ModelParams::new(tilde, setup.phi, setup.temperature)?;
            let target = GibbsTarget::new(params, Domain::Orthant, None)?;
            let est = log_z_thermo(&target, config, derive_seed(s, 0xF1EE))?;
            Ok((est, kept, s))
        })
        .collect::<Result<Vec<_>>>()?;
    let r = per_draw.len();
    let values: Vec<f64> = per_draw.iter().map(|p| p.0.value).collect();
    let value = values.iter().sum::<f64>() / r as f64;
    let std_error = if r == 1 {
        per_draw[0].0.std_error
    } else {
        (values.iter().map(|v| (v - value).powi(2)).sum::<f64>() / ((r - 1) * r) as f64).sqrt()
    };
    let truncated = per_draw.iter().filter(|p| !p.1).count();
    Ok(FreeEnergyEstimate {
        n: setup.n,
        value,
        std_error,
        replicas: r,
        schedule: per_draw[0].0.schedule.clone(),
        seeds: per_draw.iter().map(|p| p.2).collect(),
        truncation_frequency: truncated as f64 / r as f64,
    })
}

/// Radial profile of a compactly supported test function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Profile {
    /// `exp(−1/(1 − ρ²/r²))` for `ρ < r`.
    Bump { radius: f64 },
    /// Equal to 1 for `ρ ≤ inner`, 0 for `ρ ≥ outer`, smooth in between.
    Plateau { inner: f64, outer: f64 },
}

/// `ψ(x) = p(‖x − c‖)` for a radial profile `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialTestFn {
    pub center: Vec<f64>,
    pub profile: Profile,
}

/// Value, gradient and Hessian diagonal of a test function.
pub struct Derivatives {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub hessian_diag: Vec<f64>,
}

fn smooth_h(t: f64) -> [f64; 3] {
    if t <= 0.0 {
        return [0.0; 3];
    }
    let f = (-1.0 / t).exp();
    let t2 = t * t;
    [f, f / t2, f * (1.0 / (t2 * t2) - 2.0 / (t2 * t))]
}

impl Profile {
    fn outer(&self) -> f64 {
        match *self {
            Profile::Bump { radius } => radius,
            Profile::Plateau { outer, .. } => outer,
        }
    }

    /// `(p, p', p'')` at `ρ ≥ 0`.
    fn eval(&self, rho: f64) -> [f64; 3] {
        match *self {
            Profile::Bump { radius } => {
                let r2 = radius * radius;
                let q = 1.0 - rho * rho / r2;
                if q <= 0.0 {
                    return [0.0; 3];
                }
                let p = (-1.0 / q).exp();
                let g = -2.0 * rho / (r2 * q * q);
                let dg = -2.0 / (r2 * q * q) - 8.0 * rho * rho / (r2 * r2 * q * q * q);
                [p, p * g, p * (g * g + dg)]
            }
            Profile::Plateau { inner, outer } => {
                let w = outer - inner;
                let t = ((outer - rho) / w).clamp(0.0, 1.0);
                let [fa, da, dda] = smooth_h(t);
                let [fb, db, ddb] = smooth_h(1.0 - t);
                let d = fa + fb;
                // S(t) = fa/(fa + fb); derivatives in t, then chain rule dt/dρ = −1/w
                let dd = da - db;
                let ddd = dda + ddb;
                let s = fa / d;
                let s1 = (da * d - fa * dd) / (d * d);
                let s2 = (dda * d - fa * ddd) / (d * d) - 2.0 * dd * (da * d - fa * dd) / (d * d * d);
                if t <= 0.0 || t >= 1.0 {
                    return [s, 0.0, 0.0];
                }
                [s, -s1 / w, s2 / (w * w)]
            }
        }
    }
}

impl RadialTestFn {
    pub fn bump(center: Vec<f64>, radius: f64) -> Self {
        Self {
            center,
            profile: Profile::Bump { radius },
        }
    }

    pub fn plateau(center: Vec<f64>, inner: f64, outer: f64) -> Self {
        Self {
            center,
            profile: Profile::Plateau { inner, outer },
        }
    }

    /// Bounding box of the support.
    pub fn support(&self) -> Vec<(f64, f64)> {
        let r = self.profile.outer();
        self.center.iter().map(|c| (c - r, c + r)).collect()
    }

    pub fn derivatives(&self, x: &[f64]) -> Derivatives {
        let d: Vec<f64> = x.iter().zip(&self.center).map(|(a, c)| a - c).collect();
        let rho = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let [p, p1, p2] = self.profile.eval(rho);
        if rho < 1e-12 {
            // p'(0) = 0 for both profiles; ∂ᵢᵢψ → p''(0)
            return Derivatives {
                value: p,
                gradient: vec![0.0; d.len()],
                hessian_diag: vec![p2; d.len()],
            };
        }
        let radial = p1 / rho;
        Derivatives {
            value: p,
            gradient: d.iter().map(|di| radial * di).collect(),
            hessian_diag: d
                .iter()
                .map(|di| {
                    let w = di * di / (rho * rho);
                    p2 * w + radial * (1.0 - w)
                })
                .collect(),
        }
    }
}

/// `Aψ(x) = ∇ψ·(x∘(1 + (Σ − I)x) + φ) + T Σᵢ xᵢ ∂ᵢᵢψ`.
pub fn generator(test_fn: &RadialTestFn, x: &DVector<f64>, params: &ModelParams) -> f64 {
    let der = test_fn.derivatives(x.as_slice());
    let sx = params.sigma().entries() * x;
    (0..x.len())
        .map(|i| {
            let drift = x[i] * (1.0 + sx[i] - x[i]) + params.phi();
            der.gradient[i] * drift + params.temperature() * x[i] * der.hessian_diag[i]
        })
        .sum()
}

/// `∫ Aψ dG` by nested quadrature over the support of `ψ`; zero for an invariant `G`.
pub fn generator_residual(test_fn: &RadialTestFn, target: &GibbsTarget) -> Result<f64> {
    let n = target.n();
    if n > 2 {
        return invalid(format!("generator residual supports n <= 2, got {n}"));
    }
    if target.external_field.is_some() || target.domain != Domain::Orthant {
        return invalid("generator residual needs the plain Gibbs target on the orthant");
    }
    if test_fn.center.len() != n {
        return invalid("test function dimension does not match the target");
    }
    let support = test_fn.support();
    if support.iter().any(|(lo, _)| *lo <= 0.0) {
        return invalid("test function support must lie inside the open orthant");
    }
    let params = target.params().clone();
    // The signed integrand integrates to about zero, so its tolerance is
    // taken relative to the mass of |Aψ| rather than to the result.
    let (scale, _) = nested_integral(target, 1.0, Some(&support), &|x| generator(test_fn, x, &params).abs(), 1e-6);
    let (num, _) = nested_integral_tol(
        target,
        1.0,
        Some(&support),
        &|x| generator(test_fn, x, &params),
        1e-13 * scale,
        1e-11,
    );
    let (den, _) = nested_integral(target, 1.0, None, &|_| 1.0, 1e-11);
    Ok(num / den)
}
