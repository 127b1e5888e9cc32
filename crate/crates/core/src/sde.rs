//! Full-truncation Euler integration of the Lotka-Volterra SDE
//! `dx = x∘(1 + (Σ − I)x) dt + φ dt + √(2T x) dB`.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::randmat::InteractionMatrix;
use crate::rng::rng_from_seed;

/// Parameters of the SDE: interaction matrix, immigration rate and temperature.
#[derive(Debug, Clone)]
pub struct ModelParams {
    sigma: InteractionMatrix,
    phi: f64,
    temperature: f64,
}

impl ModelParams {
    /// `temperature = 0` is allowed for the deterministic flow; Gibbs
    /// computations additionally need `0 < T < φ`.
    pub fn new(sigma: InteractionMatrix, phi: f64, temperature: f64) -> Result<Self> {
        if !(phi.is_finite() && phi >= 0.0) {
            return invalid(format!("phi must be finite and nonnegative, got {phi}"));
        }
        if !(temperature.is_finite() && temperature >= 0.0) {
            return invalid(format!("temperature must be finite and nonnegative, got {temperature}"));
        }
        if sigma.n() == 0 {
            return invalid("interaction matrix is empty");
        }
        Ok(Self {
            sigma,
            phi,
            temperature,
        })
    }

    pub fn n(&self) -> usize {
        self.sigma.n()
    }
    pub fn sigma(&self) -> &InteractionMatrix {
        &self.sigma
    }
    pub fn phi(&self) -> f64 {
        self.phi
    }
    pub fn temperature(&self) -> f64 {
        self.temperature
    }
    pub fn beta(&self) -> f64 {
        1.0 / self.temperature
    }

    /// Errors unless `0 < T < φ` and `φβ > 1`.
    pub fn require_gibbs(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature < self.phi) {
            return invalid(format!(
                "Gibbs measure needs 0 < T < phi (T = {}, phi = {})",
                self.temperature, self.phi
            ));
        }
        Ok(())
    }
}

/// One full-truncation Euler step; `db` holds Brownian increments (already scaled by `√dt`).
///
/// The drift uses the untruncated `x`, the diffusion `√(2T max(x, 0))`, and the
/// result is clipped at zero.
pub fn step(x: &DVector<f64>, dt: f64, db: &DVector<f64>, params: &ModelParams) -> DVector<f64> {
    let mut out = x.clone();
    let mut sx = DVector::zeros(x.len());
    step_into(&mut out, &mut sx, dt, db, params);
    out
}

fn step_into(x: &mut DVector<f64>, sx: &mut DVector<f64>, dt: f64, db: &DVector<f64>, p: &ModelParams) {
    sx.gemv(1.0, p.sigma.entries(), x, 0.0);
    let two_t = 2.0 * p.temperature;
    for i in 0..x.len() {
        let xi = x[i];
        let drift = xi * (1.0 + sx[i] - xi) + p.phi;
        let y = xi + drift * dt + (two_t * xi.max(0.0)).sqrt() * db[i];
        x[i] = y.max(0.0);
    }
}

/// Scalar functions of the state whose time averages are tracked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Observable {
    Constant,
    /// `x_i`
    Mean(usize),
    /// `x_i²`
    SecondMoment(usize),
    /// `log x_i`
    LogMean(usize),
}

impl Observable {
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        match *self {
            Observable::Constant => 1.0,
            Observable::Mean(i) => x[i],
            Observable::SecondMoment(i) => x[i] * x[i],
            Observable::LogMean(i) => x[i].ln(),
        }
    }

    pub fn name(&self) -> String {
        match *self {
            Observable::Constant => "one".into(),
            Observable::Mean(i) => format!("mean_{i}"),
            Observable::SecondMoment(i) => format!("second_moment_{i}"),
            Observable::LogMean(i) => format!("logmean_{i}"),
        }
    }

    fn index(&self) -> Option<usize> {
        match *self {
            Observable::Constant => None,
            Observable::Mean(i) | Observable::SecondMoment(i) | Observable::LogMean(i) => Some(i),
        }
    }
}

/// Integration settings.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub dt: f64,
    pub t_end: f64,
    /// Explosion is declared once `‖x‖ > norm_cap·√n`.
    pub norm_cap: f64,
    /// Store every `record_every`-th state (the final state is always stored).
    pub record_every: usize,
    /// Observables integrated online over `(burn_in, t_end]`.
    pub observables: Vec<Observable>,
    pub burn_in: f64,
    /// Number of equal-length batches for the batch-means error.
    pub batches: usize,
}

impl SimConfig {
    pub fn new(dt: f64, t_end: f64) -> Self {
        Self {
            dt,
            t_end,
            norm_cap: 1e3,
            record_every: 1,
            observables: Vec::new(),
            burn_in: 0.0,
            batches: 50,
        }
    }
}

/// Running time integral of one observable, split into batches.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Accumulator {
    pub observable: Observable,
    pub window: f64,
    pub integral: f64,
    pub batch_integrals: Vec<f64>,
    pub batch_length: f64,
}

/// A time average with its batch-means standard error.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

impl Accumulator {
    pub fn average(&self) -> Estimate {
        let value = self.integral / self.window;
        let means: Vec<f64> = self.batch_integrals.iter().map(|v| v / self.batch_length).collect();
        Estimate {
            value,
            std_error: batch_std_error(&means),
        }
    }
}

/// `sd(batch means)/√B`; infinite with fewer than two batches.
pub fn batch_std_error(means: &[f64]) -> f64 {
    let b = means.len();
    if b < 2 {
        return f64::INFINITY;
    }
    let m = means.iter().sum::<f64>() / b as f64;
    let var = means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (b - 1) as f64;
    (var / b as f64).sqrt()
}

/// Sample path of the SDE.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub exploded: bool,
    pub explosion_time: Option<f64>,
    pub accumulators: Vec<Accumulator>,
}

impl Trajectory {
    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory holds x0")
    }

    /// Online average of a registered observable.
    pub fn average(&self, obs: Observable) -> Result<Estimate> {
        if self.exploded {
            return Err(Error::Exploded {
                time: self.explosion_time.unwrap_or(f64::NAN),
            });
        }
        self.accumulators
            .iter()
            .find(|a| a.observable == obs)
            .map(Accumulator::average)
            .ok_or_else(|| Error::InvalidParameter(format!("observable {} was not registered", obs.name())))
    }
}

/// Integrates from `x0` to `t_end` with a ChaCha8 stream seeded by `seed`.
pub fn simulate(params: &ModelParams, config: &SimConfig, x0: &DVector<f64>, seed: u64) -> Result<Trajectory> {
    let n = params.n();
    if x0.len() != n {
        return invalid(format!("x0 has length {}, expected {n}", x0.len()));
    }
    if x0.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return invalid("x0 must be finite and nonnegative");
    }
    if !(config.dt > 0.0 && config.dt <= 0.1) {
        return invalid(format!("dt must lie in (0, 0.1], got {}", config.dt));
    }
    if !(config.t_end >= 0.0 && config.t_end.is_finite()) {
        return invalid(format!("t_end must be finite and nonnegative, got {}", config.t_end));
    }
    if !(config.norm_cap > 0.0) {
        return invalid("norm_cap must be positive");
    }
    if !(config.burn_in >= 0.0) || (config.t_end > 0.0 && config.burn_in >= config.t_end) {
        return invalid("burn_in must lie in [0, t_end)");
    }
    if config.record_every == 0 {
        return invalid("record_every must be positive");
    }
    if config.observables.iter().filter_map(Observable::index).any(|i| i >= n) {
        return invalid("observable index out of range");
    }
    let steps = (config.t_end / config.dt).round() as usize;
    let dt = if steps == 0 { 0.0 } else { config.t_end / steps as f64 };
    let burn_steps = (config.burn_in / config.t_end.max(f64::MIN_POSITIVE) * steps as f64).round() as usize;
    let window_steps = steps - burn_steps.min(steps);
    let batches = config.batches.max(1).min(window_steps.max(1));
    let steps_per_batch = (window_steps / batches).max(1);

    let cap = config.norm_cap * (n as f64).sqrt();
    let mut rng = rng_from_seed(seed);
    let mut x = x0.clone();
    let mut sx = DVector::zeros(n);
    let mut db = DVector::zeros(n);
    let sqrt_dt = dt.sqrt();
    let mut times = vec![0.0];
    let mut states = vec![x.clone()];
    let mut exploded = false;
    let mut explosion_time = None;

    let m = config.observables.len();
    let mut integrals = vec![0.0; m];
    let mut batch_integrals = vec![vec![0.0; batches]; m];
    let mut prev: Vec<f64> = config.observables.iter().map(|o| o.eval(&x)).collect();

    for k in 1..=steps {
        for v in db.iter_mut() {
            *v = sqrt_dt * rng.sample::<f64, _>(StandardNormal);
        }
        step_into(&mut x, &mut sx, dt, &db, params);
        let t = k as f64 * dt;
        if !x.iter().all(|v| v.is_finite()) || x.norm() > cap {
            exploded = true;
            explosion_time = Some(t);
            times.push(t);
            states.push(x.clone());
            break;
        }
        if k > burn_steps {
            let local = k - burn_steps - 1;
            let batch = (local / steps_per_batch).min(batches - 1);
            for (j, obs) in config.observables.iter().enumerate() {
                let cur = obs.eval(&x);
                let area = 0.5 * (prev[j] + cur) * dt;
                integrals[j] += area;
                batch_integrals[j][batch] += area;
                prev[j] = cur;
            }
        } else {
            for (j, obs) in config.observables.iter().enumerate() {
                prev[j] = obs.eval(&x);
            }
        }
        if k % config.record_every == 0 || k == steps {
            times.push(t);
            states.push(x.clone());
        }
    }

    let window = window_steps as f64 * dt;
    let last_batch_steps = window_steps.saturating_sub(steps_per_batch * (batches - 1));
    let accumulators = config
        .observables
        .iter()
        .enumerate()
        .map(|(j, obs)| {
            // the last batch absorbs the remainder; rescale it to the common length
            let mut b = batch_integrals[j].clone();
            if last_batch_steps > 0 && last_batch_steps != steps_per_batch {
                let l = b.len() - 1;
                b[l] *= steps_per_batch as f64 / last_batch_steps as f64;
            }
            Accumulator {
                observable: *obs,
                window,
                integral: integrals[j],
                batch_integrals: b,
                batch_length: steps_per_batch as f64 * dt,
            }
        })
        .collect();
    Ok(Trajectory {
        times,
        states,
        exploded,
        explosion_time,
        accumulators,
    })
}

/// Trapezoidal time average of `obs` over the stored states in `(burn_in, t_end]`.
pub fn time_average(traj: &Trajectory, obs: Observable, burn_in: f64) -> Result<f64> {
    if traj.exploded {
        return Err(Error::Exploded {
            time: traj.explosion_time.unwrap_or(f64::NAN),
        });
    }
    let t_end = traj.final_time();
    if traj.times.len() == 1 {
        return Ok(obs.eval(&traj.states[0]));
    }
    if burn_in >= t_end {
        return invalid(format!("burn_in {burn_in} must be below the final time {t_end}"));
    }
    let start = traj.times.partition_point(|t| *t < burn_in).max(1) - 1;
    let mut area = 0.0;
    for k in start..traj.times.len() - 1 {
        let (t0, t1) = (traj.times[k].max(burn_in), traj.times[k + 1]);
        area += 0.5 * (obs.eval(&traj.states[k]) + obs.eval(&traj.states[k + 1])) * (t1 - t0);
    }
    Ok(area / (t_end - burn_in))
}

/// Coupling-free model `Σ = s·I` used by scalar tests.
pub fn scalar_model(sigma: f64, phi: f64, temperature: f64, n: usize) -> Result<ModelParams> {
    let m = InteractionMatrix::from_matrix(DMatrix::from_diagonal_element(n, n, sigma))?;
    ModelParams::new(m, phi, temperature)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn step_examples() {
        let p = scalar_model(0.0, 0.0, 0.3, 1).unwrap();
        assert_eq!(step(&v(&[0.0]), 0.05, &v(&[0.7]), &p)[0], 0.0);
        let p = scalar_model(0.0, 0.0, 0.0, 1).unwrap();
        assert_eq!(step(&v(&[1.0]), 0.05, &v(&[0.7]), &p)[0], 1.0);
        let p = scalar_model(0.0, 0.5, 0.0, 1).unwrap();
        let mut x = v(&[1.0]);
        for _ in 0..5000 {
            x = step(&x, 0.01, &v(&[0.0]), &p);
        }
        assert!((x[0] - (1.0 + 3f64.sqrt()) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn step_truncates_at_zero() {
        let p = scalar_model(0.0, 0.0, 1.0, 1).unwrap();
        assert_eq!(step(&v(&[0.01]), 0.01, &v(&[-10.0]), &p)[0], 0.0);
    }

    #[test]
    fn stable_run_does_not_explode() {
        let sigma = InteractionMatrix::from_matrix(DMatrix::from_row_slice(2, 2, &[0.1, 0.1, 0.1, 0.1])).unwrap();
        let p = ModelParams::new(sigma, 0.5, 0.2).unwrap();
        let cfg = SimConfig {
            record_every: 10_000,
            ..SimConfig::new(0.01, 10_000.0)
        };
        let tr = simulate(&p, &cfg, &v(&[1.0, 1.0]), 3).unwrap();
        assert!(!tr.exploded);
        assert!(tr.states.iter().all(|s| s.iter().all(|x| *x >= 0.0)));
    }

    #[test]
    fn supercritical_scalar_explodes() {
        let p = scalar_model(2.0, 0.0, 0.0, 1).unwrap();
        let tr = simulate(&p, &SimConfig::new(0.001, 10.0), &v(&[2.0]), 0).unwrap();
        assert!(tr.exploded);
        assert!(tr.explosion_time.unwrap() < 10.0);
        assert!(time_average(&tr, Observable::Mean(0), 0.0).is_err());
    }

    #[test]
    fn zero_horizon_keeps_x0() {
        let p = scalar_model(0.0, 0.5, 0.1, 1).unwrap();
        let tr = simulate(&p, &SimConfig::new(0.01, 0.0), &v(&[0.3]), 0).unwrap();
        assert_eq!(tr.states.len(), 1);
        assert_eq!(tr.times, vec![0.0]);
    }

    #[test]
    fn rejects_bad_input() {
        let p = scalar_model(0.0, 0.5, 0.1, 1).unwrap();
        assert!(simulate(&p, &SimConfig::new(0.01, 1.0), &v(&[f64::NAN]), 0).is_err());
        assert!(simulate(&p, &SimConfig::new(0.2, 1.0), &v(&[1.0]), 0).is_err());
        assert!(ModelParams::new(InteractionMatrix::zeros(1), -1.0, 0.1).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let p = scalar_model(0.1, 0.5, 0.2, 2).unwrap();
        let cfg = SimConfig::new(0.01, 50.0);
        let a = simulate(&p, &cfg, &v(&[1.0, 0.5]), 9).unwrap();
        let b = simulate(&p, &cfg, &v(&[1.0, 0.5]), 9).unwrap();
        assert_eq!(a.states, b.states);
        let c = simulate(&p, &cfg, &v(&[1.0, 0.5]), 10).unwrap();
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn online_and_stored_averages_agree() {
        let p = scalar_model(0.0, 0.5, 0.1, 1).unwrap();
        let cfg = SimConfig {
            observables: vec![Observable::Constant, Observable::Mean(0)],
            burn_in: 10.0,
            ..SimConfig::new(0.01, 200.0)
        };
        let tr = simulate(&p, &cfg, &v(&[1.0]), 4).unwrap();
        assert!((tr.average(Observable::Constant).unwrap().value - 1.0).abs() < 1e-12);
        assert!((time_average(&tr, Observable::Constant, 10.0).unwrap() - 1.0).abs() < 1e-12);
        let online = tr.average(Observable::Mean(0)).unwrap().value;
        let stored = time_average(&tr, Observable::Mean(0), 10.0).unwrap();
        assert!((online - stored).abs() < 1e-10, "{online} {stored}");
    }

    #[test]
    fn disjoint_windows_agree() {
        let p = scalar_model(0.0, 0.5, 0.1, 1).unwrap();
        let obs = vec![Observable::Mean(0)];
        let run = |seed| {
            let cfg = SimConfig {
                observables: obs.clone(),
                burn_in: 20.0,
                record_every: 1_000_000,
                ..SimConfig::new(0.01, 2_000.0)
            };
            simulate(&p, &cfg, &v(&[1.0]), seed).unwrap().average(obs[0]).unwrap()
        };
        let (a, b) = (run(1), run(2));
        let z = (a.value - b.value) / (a.std_error.hypot(b.std_error));
        assert!(z.abs() < 4.0, "{a:?} {b:?}");
    }
}
