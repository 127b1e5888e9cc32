//! GOE and deformed-GOE sampling and the nonnegative quadratic-form maximum
//! `λ+max(A) = max { uᵀAu : u ≥ 0, ‖u‖ = 1 }`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::frontier::EnsembleParams;
use crate::rng::{derive_seed, rng_from_seed};

/// Largest matrix handled by subset enumeration.
pub const EXACT_MAX_N: usize = 20;
const SYMMETRY_TOL: f64 = 1e-12;
const KKT_TOL: f64 = 1e-10;
const HEURISTIC_TOL: f64 = 1e-10;
const HEURISTIC_MAX_ITER: usize = 100_000;

/// Symmetric interaction matrix, optionally tagged with the ensemble it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionMatrix {
    entries: DMatrix<f64>,
    ensemble: Option<EnsembleParams>,
    seed: Option<u64>,
}

impl InteractionMatrix {
    /// Draws `κ/√n W + α 11ᵀ/n` with `W ~ GOE_n`.
    pub fn sample(n: usize, ensemble: EnsembleParams, seed: u64) -> Result<Self> {
        if n == 0 {
            return invalid("matrix dimension must be positive");
        }
        let w = sample_goe(n, seed);
        let scale = ensemble.kappa / (n as f64).sqrt();
        let shift = ensemble.alpha / n as f64;
        let mut entries = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in 0..=j {
                let v = scale * w[(i, j)] + shift;
                entries[(i, j)] = v;
                entries[(j, i)] = v;
            }
        }
        Ok(Self {
            entries,
            ensemble: Some(ensemble),
            seed: Some(seed),
        })
    }

    /// Wraps an explicit symmetric matrix.
    pub fn from_matrix(entries: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&entries)?;
        Ok(Self {
            entries,
            ensemble: None,
            seed: None,
        })
    }

    /// Tags an explicit matrix with ensemble parameters (used for the mean-field split).
    pub fn with_ensemble(mut self, ensemble: EnsembleParams) -> Self {
        self.ensemble = Some(ensemble);
        self
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            entries: DMatrix::zeros(n, n),
            ensemble: None,
            seed: None,
        }
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn ensemble(&self) -> Option<EnsembleParams> {
        self.ensemble
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// `Σ − α 11ᵀ/n`, the fluctuating part; `Σ` itself when no ensemble is attached.
    pub fn fluctuation(&self) -> DMatrix<f64> {
        let n = self.n();
        match self.ensemble {
            Some(e) => self.entries.map(|v| v - e.alpha / n as f64),
            None => self.entries.clone(),
        }
    }
}

fn check_symmetric(a: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != a.ncols() {
        return invalid(format!("matrix is {}x{}, not square", a.nrows(), a.ncols()));
    }
    let n = a.nrows();
    let mut worst = 0.0_f64;
    for j in 0..n {
        for i in 0..j {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    if worst > SYMMETRY_TOL || a.iter().any(|v| !v.is_finite()) {
        return invalid(format!("matrix is not symmetric and finite (asymmetry {worst:e})"));
    }
    Ok(())
}

/// `W = (M + Mᵀ)/√2` with `M` an `n × n` matrix of independent standard normals.
///
/// `M` is drawn column by column from a ChaCha8 stream seeded by `seed`.
pub fn sample_goe(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng_from_seed(seed);
    let m = DMatrix::<f64>::from_fn(n, n, |_, _| rng.sample(StandardNormal));
    let mut w = DMatrix::zeros(n, n);
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    for j in 0..n {
        for i in 0..=j {
            let v = (m[(i, j)] + m[(j, i)]) * inv_sqrt2;
            w[(i, j)] = v;
            w[(j, i)] = v;
        }
    }
    w
}

/// Value and maximizer of `uᵀAu` over the nonnegative unit sphere.
#[derive(Debug, Clone)]
pub struct PlusMax {
    pub value: f64,
    pub maximizer: DVector<f64>,
    /// False only when the heuristic hit its iteration cap.
    pub converged: bool,
    pub iterations: usize,
}

impl PlusMax {
    /// `max_{i ∉ supp u} (Au)_i`, or `-∞` on full support.
    pub fn kkt_residual(&self, a: &DMatrix<f64>) -> f64 {
        let au = a * &self.maximizer;
        self.maximizer
            .iter()
            .zip(au.iter())
            .filter(|(u, _)| **u == 0.0)
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Exact `λ+max` by enumerating supports (cost `2ⁿ` eigendecompositions).
///
/// For each support `S` every eigenvector of `A_S` that can be signed
/// entrywise nonnegative is a candidate, kept when `(Au)_i ≤ 0` off `S`.
pub fn lambda_plus_max_exact(a: &DMatrix<f64>) -> Result<PlusMax> {
    check_symmetric(a)?;
    let n = a.nrows();
    if n == 0 || n > EXACT_MAX_N {
        return invalid(format!("exact enumeration needs 1 <= n <= {EXACT_MAX_N}, got {n}"));
    }
    let mut best_value = f64::NEG_INFINITY;
    let mut best = DVector::zeros(n);
    let mut idx = Vec::with_capacity(n);
    for mask in 1u32..(1u32 << n) {
        idx.clear();
        idx.extend((0..n).filter(|i| mask & (1 << i) != 0));
        let k = idx.len();
        let sub = DMatrix::from_fn(k, k, |r, c| a[(idx[r], idx[c])]);
        let eig = SymmetricEigen::new(sub);
        for (col, _) in eig.eigenvalues.iter().enumerate() {
            let v = eig.eigenvectors.column(col);
            let pivot = v.iter().copied().fold(0.0_f64, |m, x| if x.abs() > m.abs() { x } else { m });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            if v.iter().any(|x| sign * x < -1e-12) {
                continue;
            }
            let mut u = DVector::zeros(n);
            for (r, &i) in idx.iter().enumerate() {
                u[i] = (sign * v[r]).max(0.0);
            }
            let norm = u.norm();
            if norm == 0.0 {
                continue;
            }
            u /= norm;
            let au = a * &u;
            let feasible = (0..n).all(|i| mask & (1 << i) != 0 || au[i] <= KKT_TOL);
            if !feasible {
                continue;
            }
            let value = u.dot(&au);
            if value > best_value {
                best_value = value;
                best = u;
            }
        }
    }
    Ok(PlusMax {
        value: best_value,
        maximizer: best,
        converged: true,
        iterations: (1usize << n) - 1,
    })
}

/// Largest absolute eigenvalue of a symmetric matrix.
///
/// Dense eigensolver up to `n = 64`, Lanczos with full reorthogonalization above.
pub fn operator_norm(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    if n <= 64 {
        return SymmetricEigen::new(a.clone())
            .eigenvalues
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()));
    }
    lanczos_extremes(a, 1e-10).0
}

/// Extreme Ritz values `(max |θ|, steps)` of a symmetric operator.
fn lanczos_extremes(a: &DMatrix<f64>, tol: f64) -> (f64, usize) {
    let n = a.nrows();
    let max_steps = n.min(400);
    let mut rng = rng_from_seed(0x5EED_1A2C);
    let mut q = DVector::<f64>::from_fn(n, |_, _| rng.sample(StandardNormal));
    q /= q.norm();
    let mut basis: Vec<DVector<f64>> = vec![q];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut estimate = 0.0;
    for step in 0..max_steps {
        let qk = &basis[step];
        let mut w = a * qk;
        let alpha = w.dot(qk);
        alphas.push(alpha);
        // full reorthogonalization, twice
        for _ in 0..2 {
            for b in &basis {
                let proj = w.dot(b);
                w.axpy(-proj, b, 1.0);
            }
        }
        let beta = w.norm();
        let k = alphas.len();
        if k % 10 == 0 || beta < 1e-14 || k == max_steps {
            let t = DMatrix::from_fn(k, k, |i, j| {
                if i == j {
                    alphas[i]
                } else if i + 1 == j || j + 1 == i {
                    betas[i.min(j)]
                } else {
                    0.0
                }
            });
            let eig = SymmetricEigen::new(t);
            let (imax, theta) = eig
                .eigenvalues
                .iter()
                .enumerate()
                .fold((0, 0.0_f64), |acc, (i, v)| if v.abs() > acc.1.abs() { (i, *v) } else { acc });
            let residual = (beta * eig.eigenvectors[(k - 1, imax)]).abs();
            estimate = theta.abs();
            if residual <= tol * estimate.max(1.0) || beta < 1e-14 {
                return (estimate, k);
            }
        }
        if beta < 1e-14 {
            break;
        }
        betas.push(beta);
        basis.push(w / beta);
    }
    (estimate, max_steps)
}

/// Shifted projected power iteration `u ← normalize(((A + σI)u)_+)`, `σ = ‖A‖ + 1`.
///
/// Restart 0 starts from the uniform vector, the others from `|N(0, I)|`
/// draws. The Rayleigh quotient is nondecreasing along each run because
/// `A + σI` is positive definite. Returns the best run.
pub fn lambda_plus_max_heuristic(a: &DMatrix<f64>, restarts: usize, seed: u64) -> PlusMax {
    let n = a.nrows();
    let shift = operator_norm(a) + 1.0;
    let mut best: Option<PlusMax> = None;
    for r in 0..restarts.max(1) {
        let start = if r == 0 {
            DVector::from_element(n, 1.0 / (n as f64).sqrt())
        } else {
            let mut rng = rng_from_seed(derive_seed(seed, r as u64));
            let mut u = DVector::<f64>::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal).abs());
            u /= u.norm();
            u
        };
        let run = projected_power(a, shift, start);
        if best.as_ref().is_none_or(|b| run.value > b.value) {
            best = Some(run);
        }
    }
    best.expect("at least one restart")
}

fn projected_power(a: &DMatrix<f64>, shift: f64, mut u: DVector<f64>) -> PlusMax {
    let mut au = a * &u;
    let mut rq = u.dot(&au);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < HEURISTIC_MAX_ITER {
        iterations += 1;
        let mut v = au.clone();
        v.axpy(shift, &u, 1.0);
        v.apply(|x| *x = x.max(0.0));
        let norm = v.norm();
        if norm == 0.0 {
            break;
        }
        v /= norm;
        let av = a * &v;
        let next = v.dot(&av);
        let gain = next - rq;
        if gain < 0.0 {
            // round-off only; keep the better point
            converged = true;
            break;
        }
        u = v;
        au = av;
        rq = next;
        if gain < HEURISTIC_TOL {
            converged = true;
            break;
        }
    }
    PlusMax {
        value: rq,
        maximizer: u,
        converged,
        iterations,
    }
}

/// `λ+max` by enumeration for `n ≤ 20`, by the heuristic above that.
pub fn lambda_plus_max(a: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() <= EXACT_MAX_N {
        Ok(lambda_plus_max_exact(a)?.value)
    } else {
        check_symmetric(a)?;
        Ok(lambda_plus_max_heuristic(a, 4, 0x0A11_CE00).value)
    }
}

/// Whether `λ+max(A) < 1 − ε`.
pub fn is_realizable(a: &DMatrix<f64>, eps_sigma: f64) -> Result<bool> {
    if !(eps_sigma > 0.0 && eps_sigma < 1.0) {
        return invalid(format!("eps_sigma must lie in (0, 1), got {eps_sigma}"));
    }
    Ok(lambda_plus_max(a)? < 1.0 - eps_sigma)
}

/// `Σ̃ = Σ 1{λ+max(Σ) < 1 − ε}`; the flag reports whether `Σ` was kept.
pub fn truncate(sigma: &InteractionMatrix, eps_sigma: f64) -> Result<(InteractionMatrix, bool)> {
    if is_realizable(sigma.entries(), eps_sigma)? {
        Ok((sigma.clone(), true))
    } else {
        let mut zero = InteractionMatrix::zeros(sigma.n());
        zero.ensemble = sigma.ensemble;
        zero.seed = sigma.seed;
        Ok((zero, false))
    }
}

/// Per-draw record of a `λ+max` simulation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LambdaDraw {
    pub n: usize,
    pub seed: u64,
    pub kappa: f64,
    pub alpha: f64,
    pub lambda_max_heuristic: f64,
    pub realizable: bool,
}

/// Samples `draws` deformed-GOE matrices and records the heuristic `λ+max`.
pub fn lambda_simulation(
    n: usize,
    ensemble: EnsembleParams,
    draws: usize,
    restarts: usize,
    eps_sigma: f64,
    seed: u64,
) -> Result<Vec<LambdaDraw>> {
    if !(eps_sigma > 0.0 && eps_sigma < 1.0) {
        return invalid(format!("eps_sigma must lie in (0, 1), got {eps_sigma}"));
    }
    use rayon::prelude::*;
    (0..draws)
        .into_par_iter()
        .map(|d| {
            let s = derive_seed(seed, d as u64);
            let m = InteractionMatrix::sample(n, ensemble, s)?;
            let value = lambda_plus_max_heuristic(m.entries(), restarts, s).value;
            Ok(LambdaDraw {
                n,
                seed: s,
                kappa: ensemble.kappa,
                alpha: ensemble.alpha,
                lambda_max_heuristic: value,
                realizable: value < 1.0 - eps_sigma,
            })
        })
        .collect()
}
