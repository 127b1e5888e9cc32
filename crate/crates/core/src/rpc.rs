//! Truncated Ruelle probability cascades, the Gaussian tree processes `q_i`
//! and `y_i`, and a Monte-Carlo check of the cascade representation of `X_0`.

use rand::Rng as _;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Result};
use crate::parisi::{recursion_with_leaf, LeafRule, ParisiArgs, ParisiMeasure, ParisiModel, RecursionOptions};
use crate::quad::UniformSpline;
use crate::rng::{derive_seed, rng_from_seed, Rng};

/// Largest number of enumerated leaves `N^K`.
pub const MAX_LEAVES: usize = 1_000_000;
/// Smallest branching cap accepted by [`sample_cascade`].
pub const MIN_BRANCHING: usize = 100;

/// A cascade truncated to the `N` largest atoms per node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CascadeSample {
    levels: usize,
    branching: usize,
    /// Leaf weights in lexicographic order of `(i_1, …, i_K)`.
    weights: Vec<f64>,
    /// Estimated fraction of the untruncated cascade mass that was retained.
    retained_mass_estimate: f64,
}

impl CascadeSample {
    pub fn levels(&self) -> usize {
        self.levels
    }
    pub fn branching(&self) -> usize {
        self.branching
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn retained_mass_estimate(&self) -> f64 {
        self.retained_mass_estimate
    }

    /// Weight of the leaf `(i_1, …, i_K)`.
    pub fn weight(&self, path: &[usize]) -> f64 {
        self.weights[leaf_index(path, self.branching)]
    }
}

fn leaf_index(path: &[usize], branching: usize) -> usize {
    path.iter().fold(0, |acc, i| acc * branching + i)
}

fn check_lambdas(lambdas: &[f64]) -> Result<()> {
    if lambdas.is_empty() {
        return invalid("a cascade needs at least one level");
    }
    if lambdas.iter().any(|l| !(*l > 0.0 && *l < 1.0)) || lambdas.windows(2).any(|w| w[1] <= w[0]) {
        return invalid(format!("cascade parameters must be strictly increasing in (0, 1): {lambdas:?}"));
    }
    Ok(())
}

fn check_size(levels: usize, branching: usize) -> Result<()> {
    if branching < MIN_BRANCHING {
        return invalid(format!("branching cap must be at least {MIN_BRANCHING}, got {branching}"));
    }
    match (branching as u128).checked_pow(levels as u32) {
        Some(n) if n <= MAX_LEAVES as u128 => Ok(()),
        _ => invalid(format!("{branching}^{levels} leaves exceed the cap of {MAX_LEAVES}")),
    }
}

/// The `n` largest atoms of a Poisson process with intensity `λu^{−λ−1}du`,
/// decreasing, and the expected mass of the discarded atoms.
fn ranked_atoms(lambda: f64, n: usize, rng: &mut Rng) -> (Vec<f64>, f64) {
    let mut gamma = 0.0;
    let atoms: Vec<f64> = (0..n)
        .map(|_| {
            gamma += rng.sample::<f64, _>(Exp1);
            gamma.powf(-1.0 / lambda)
        })
        .collect();
    let last = atoms[n - 1];
    (atoms, lambda / (1.0 - lambda) * last.powf(1.0 - lambda))
}

/// Samples `RPC_λ` truncated to the top `branching` atoms at every node.
///
/// Every node draws its children from its own stream, keyed by the path, so
/// the first `N` children of a node do not depend on the branching cap.
pub fn sample_cascade(lambdas: &[f64], branching: usize, seed: u64) -> Result<CascadeSample> {
    check_lambdas(lambdas)?;
    check_size(lambdas.len(), branching)?;
    Ok(grow(lambdas, branching, seed).0)
}

const ATOM_STREAM: u64 = u64::MAX;
const GAUSS_STREAM: u64 = u64::MAX - 1;

/// Node keys of the next level, lexicographic.
fn child_keys(keys: &[u64], branching: usize) -> Vec<u64> {
    keys.iter()
        .flat_map(|k| (0..branching as u64).map(move |j| derive_seed(*k, j)))
        .collect()
}

/// Cascade and tree normals sharing the node keys rooted at `seed`.
fn grow(lambdas: &[f64], branching: usize, seed: u64) -> (CascadeSample, TreeGaussians) {
    // unnormalized products and the estimated untruncated mass below each node
    let mut weights = vec![1.0];
    let mut full = vec![1.0];
    let mut keys = vec![seed];
    let mut normals = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut next_w = Vec::with_capacity(weights.len() * branching);
        let mut next_f = Vec::with_capacity(weights.len() * branching);
        let mut level = Vec::with_capacity(weights.len() * branching);
        for ((w, f), key) in weights.iter().zip(&full).zip(&keys) {
            let (atoms, tail) = ranked_atoms(lambda, branching, &mut rng_from_seed(derive_seed(*key, ATOM_STREAM)));
            let kept: f64 = atoms.iter().sum();
            let inflate = (kept + tail) / kept;
            next_w.extend(atoms.iter().map(|u| w * u));
            next_f.extend(atoms.iter().map(|u| f * u * inflate));
            let mut rng = rng_from_seed(derive_seed(*key, GAUSS_STREAM));
            level.extend((0..branching).map(|_| rng.sample::<f64, _>(StandardNormal)));
        }
        weights = next_w;
        full = next_f;
        normals.push(level);
        keys = child_keys(&keys, branching);
    }
    let kept: f64 = weights.iter().sum();
    let total: f64 = full.iter().sum();
    weights.iter_mut().for_each(|w| *w /= kept);
    let cascade = CascadeSample {
        levels: lambdas.len(),
        branching,
        weights,
        retained_mass_estimate: kept / total,
    };
    (cascade, TreeGaussians { branching, levels: normals })
}

/// One standard normal per tree node `(i_1, …, i_k)`, `k = 1..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeGaussians {
    branching: usize,
    /// `levels[k − 1]` holds the `N^k` level-`k` normals in lexicographic order.
    levels: Vec<Vec<f64>>,
}

impl TreeGaussians {
    pub fn sample(levels: usize, branching: usize, seed: u64) -> Result<Self> {
        check_size(levels, branching)?;
        let mut keys = vec![seed];
        let mut normals = Vec::with_capacity(levels);
        for _ in 0..levels {
            let level = keys
                .iter()
                .flat_map(|key| {
                    let mut rng = rng_from_seed(derive_seed(*key, GAUSS_STREAM));
                    (0..branching).map(move |_| rng.sample::<f64, _>(StandardNormal))
                })
                .collect();
            normals.push(level);
            keys = child_keys(&keys, branching);
        }
        Ok(Self { branching, levels: normals })
    }

    pub fn levels(&self) -> usize {
        self.levels.len()
    }

    /// Normal at the node given by a path prefix of length `k ≥ 1`.
    pub fn node(&self, prefix: &[usize]) -> f64 {
        self.levels[prefix.len() - 1][leaf_index(prefix, self.branching)]
    }

    /// `Σ_k c_k z_{i_1…i_k}` along a full path.
    fn tree_sum(&self, path: &[usize], scales: &[f64]) -> f64 {
        (1..=path.len()).map(|k| scales[k - 1] * self.node(&path[..k])).sum()
    }

    /// Tree sums for every leaf, in lexicographic order.
    fn all_leaves(&self, scales: &[f64]) -> Vec<f64> {
        let mut sums = vec![0.0];
        for (level, c) in self.levels.iter().zip(scales) {
            sums = sums
                .iter()
                .enumerate()
                .flat_map(|(parent, s)| {
                    level[parent * self.branching..(parent + 1) * self.branching]
                        .iter()
                        .map(move |z| s + c * z)
                })
                .collect();
        }
        sums
    }
}

fn q_scales(zeta: &ParisiMeasure, beta: f64, kappa: f64) -> Vec<f64> {
    zeta.atoms().windows(2).map(|w| beta * kappa * (w[1] - w[0]).sqrt()).collect()
}

fn y_scales(zeta: &ParisiMeasure, beta: f64, kappa: f64) -> Vec<f64> {
    zeta.atoms()
        .windows(2)
        .map(|w| beta * kappa / std::f64::consts::SQRT_2 * (w[1] * w[1] - w[0] * w[0]).sqrt())
        .collect()
}

fn check_path(path: &[usize], g: &TreeGaussians, zeta: &ParisiMeasure) -> Result<()> {
    if path.len() != zeta.levels() || g.levels() != zeta.levels() {
        return invalid(format!("path of length {} for {} levels", path.len(), zeta.levels()));
    }
    if path.iter().any(|i| *i >= g.branching) {
        return invalid("path index beyond the branching cap");
    }
    Ok(())
}

/// `q_i = βκ Σ_k z_{i_1…i_k} √(b_k − b_{k−1})`.
pub fn q_leaf(path: &[usize], g: &TreeGaussians, zeta: &ParisiMeasure, beta: f64, kappa: f64) -> Result<f64> {
    check_path(path, g, zeta)?;
    Ok(g.tree_sum(path, &q_scales(zeta, beta, kappa)))
}

/// `y_i = βκ/√2 Σ_k z_{i_1…i_k} √(b_k² − b_{k−1}²)`.
pub fn y_leaf(path: &[usize], g: &TreeGaussians, zeta: &ParisiMeasure, beta: f64, kappa: f64) -> Result<f64> {
    check_path(path, g, zeta)?;
    Ok(g.tree_sum(path, &y_scales(zeta, beta, kappa)))
}

/// Leaf functional `X_K` used in [`verify_prpc`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LeafKind {
    /// `X_K ≡ c`.
    Constant { value: f64 },
    /// `X_K = m + q_i`.
    Linear { offset: f64 },
    /// `X_K = y_i`, whose cascade average is the telescoped correction.
    Telescoped,
    /// The box-restricted `μ_β` leaf at the given `a, h, γ`.
    MuBeta { a: f64, h: f64, gamma: f64 },
}

impl LeafKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Constant { .. } => "constant",
            Self::Linear { .. } => "linear",
            Self::Telescoped => "telescoped",
            Self::MuBeta { .. } => "mu_beta",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrpcConfig {
    pub branching: usize,
    pub replicas: usize,
}

impl Default for PrpcConfig {
    fn default() -> Self {
        Self {
            branching: 1000,
            replicas: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrpcReport {
    pub leaf: LeafKind,
    pub mc_estimate: f64,
    pub recursion_value: f64,
    pub std_error: f64,
    pub z_score: f64,
    #[serde(rename = "N")]
    pub branching: usize,
    pub replicas: usize,
    pub min_retained_mass: f64,
    pub seed: u64,
}

/// Table of a scalar leaf `s ↦ X_K(s)`.
enum LeafTable {
    Affine { offset: f64, slope: f64 },
    Spline(UniformSpline),
}

impl LeafTable {
    fn eval(&self, s: f64) -> f64 {
        match self {
            Self::Affine { offset, slope } => offset + slope * s,
            Self::Spline(sp) => sp.eval(s),
        }
    }
}

const TABLE_POINTS: usize = 8001;
/// Tabulated field range in units of the leaf standard deviation.
const TABLE_SIGMAS: f64 = 9.0;

/// Compares `E log Σ_i v_i exp X_K(i)` over cascades and tree Gaussians with
/// the recursion value `X_0`.
///
/// The standard error is floored at rounding level so that a deterministic
/// identity (a constant leaf) yields a zero score.
pub fn verify_prpc(zeta: &ParisiMeasure, model: &ParisiModel, leaf: LeafKind, config: PrpcConfig, seed: u64) -> Result<PrpcReport> {
    model.validate()?;
    check_lambdas(zeta.lambdas())?;
    check_size(zeta.levels(), config.branching)?;
    if config.replicas < 2 {
        return invalid("need at least two replicas");
    }
    let (beta, kappa) = (model.beta, model.kappa);
    let q = q_scales(zeta, beta, kappa);
    let (scales, table, recursion_value) = match leaf {
        LeafKind::Constant { value } => (q.clone(), LeafTable::Affine { offset: value, slope: 0.0 }, value),
        LeafKind::Linear { offset } => {
            let f = |s: f64| offset + s;
            let rec = recursion_with_leaf(zeta.lambdas(), &q, &f, RecursionOptions::default().order);
            (q.clone(), LeafTable::Affine { offset, slope: 1.0 }, rec)
        }
        LeafKind::Telescoped => {
            let y = y_scales(zeta, beta, kappa);
            let rec = recursion_with_leaf(zeta.lambdas(), &y, &|s| s, RecursionOptions::default().order);
            (y, LeafTable::Affine { offset: 0.0, slope: 1.0 }, rec)
        }
        LeafKind::MuBeta { a, h, gamma } => {
            let args = ParisiArgs {
                a,
                h,
                gamma,
                model: *model,
            };
            let rec = crate::parisi::recursion_x0(zeta, &args)?;
            let sd = q.iter().map(|c| c * c).sum::<f64>().sqrt();
            let reach = (TABLE_SIGMAS * sd).max(1e-6);
            let rule = LeafRule::build(&args, reach)?;
            let h_grid = 2.0 * reach / (TABLE_POINTS - 1) as f64;
            let values = (0..TABLE_POINTS).map(|i| rule.eval(-reach + i as f64 * h_grid)).collect();
            (q.clone(), LeafTable::Spline(UniformSpline::new(-reach, h_grid, values)), rec)
        }
    };
    let samples: Vec<(f64, f64)> = (0..config.replicas)
        .into_par_iter()
        .map(|r| {
            let (cascade, gauss) = grow(zeta.lambdas(), config.branching, derive_seed(seed, r as u64));
            let fields = gauss.all_leaves(&scales);
            let terms: Vec<f64> = cascade
                .weights
                .iter()
                .zip(&fields)
                .map(|(w, s)| w.ln() + table.eval(*s))
                .collect();
            (crate::special::log_sum_exp(&terms), cascade.retained_mass_estimate)
        })
        .collect();
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let var = samples.iter().map(|s| (s.0 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let floor = 1e-12 * (1.0 + recursion_value.abs());
    let std_error = (var / n).sqrt().max(floor);
    Ok(PrpcReport {
        leaf,
        mc_estimate: mean,
        recursion_value,
        std_error,
        z_score: (mean - recursion_value) / std_error,
        branching: config.branching,
        replicas: config.replicas,
        min_retained_mass: samples.iter().map(|s| s.1).fold(1.0, f64::min),
        seed,
    })
}
