//! Numerical integration: adaptive Gauss–Kronrod and Gauss–Hermite rules.

use std::collections::BinaryHeap;
use std::f64::consts::PI;
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

// 15-point Kronrod nodes on [-1, 1] (nonnegative half) with the embedded 7-point Gauss rule.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Result of an adaptive integration.
#[derive(Debug, Clone, Copy)]
pub struct Integral {
    pub value: f64,
    pub error: f64,
    pub evaluations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> Segment {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = half * XGK[j];
        let s = f(center - dx) + f(center + dx);
        kronrod += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    let value = kronrod * half;
    let error = ((kronrod - gauss) * half).abs();
    Segment { a, b, value, error }
}

/// Adaptive 15-point Gauss–Kronrod integration of `f` over `[a, b]`.
///
/// Bisects the segment with the largest error estimate until the total error
/// is below `max(abs_tol, rel_tol·|value|)` or `max_segments` is reached.
pub fn integrate<F: FnMut(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
    max_segments: usize,
) -> Integral {
    integrate_segments(f, &[a, b], abs_tol, rel_tol, max_segments).0
}

/// As [`integrate`], starting from the partition given by the sorted
/// `breaks`; also returns the final segments in increasing order.
pub fn integrate_segments<F: FnMut(f64) -> f64>(
    mut f: F,
    breaks: &[f64],
    abs_tol: f64,
    rel_tol: f64,
    max_segments: usize,
) -> (Integral, Vec<(f64, f64)>) {
    let mut heap = BinaryHeap::new();
    let mut evaluations = 0;
    for w in breaks.windows(2) {
        if w[1] > w[0] {
            heap.push(gk15(&mut f, w[0], w[1]));
            evaluations += 15;
        }
    }
    if heap.is_empty() {
        let empty = Integral {
            value: 0.0,
            error: 0.0,
            evaluations: 0,
            converged: true,
        };
        return (empty, Vec::new());
    }
    let mut total: f64 = heap.iter().map(|s| s.value).sum();
    let mut err: f64 = heap.iter().map(|s| s.error).sum();
    while err > abs_tol.max(rel_tol * total.abs()) && heap.len() < max_segments {
        let worst = heap.pop().expect("heap is never empty");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            heap.push(worst);
            break;
        }
        let left = gk15(&mut f, worst.a, mid);
        let right = gk15(&mut f, mid, worst.b);
        evaluations += 30;
        total += left.value + right.value - worst.value;
        err += left.error + right.error - worst.error;
        heap.push(left);
        heap.push(right);
    }
    let mut segments: Vec<Segment> = heap.into_vec();
    segments.sort_by(|x, y| x.a.total_cmp(&y.a));
    // Recompute sums to shed accumulated cancellation.
    let value: f64 = segments.iter().map(|s| s.value).sum();
    let error: f64 = segments.iter().map(|s| s.error).sum();
    let integral = Integral {
        value,
        error,
        evaluations,
        converged: error <= abs_tol.max(rel_tol * value.abs()),
    };
    (integral, segments.iter().map(|s| (s.a, s.b)).collect())
}

/// Nodes and weights of the 15-point Kronrod rule on `[a, b]`.
pub fn kronrod_nodes(a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    (0..15).map(move |j| {
        if j == 7 {
            (center, WGK[7] * half)
        } else if j < 7 {
            (center - half * XGK[j], WGK[j] * half)
        } else {
            (center + half * XGK[14 - j], WGK[14 - j] * half)
        }
    })
}

/// Natural cubic spline through `(x_i, y_i)` on a uniform grid.
#[derive(Debug, Clone)]
pub struct UniformSpline {
    x0: f64,
    h: f64,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl UniformSpline {
    /// Interpolates `y` sampled at `x0 + i·h`; needs at least two points.
    pub fn new(x0: f64, h: f64, y: Vec<f64>) -> Self {
        let n = y.len();
        assert!(n >= 2 && h > 0.0, "spline needs two points and a positive step");
        // second derivatives by the Thomas algorithm; natural end conditions
        let mut m = vec![0.0; n];
        if n > 2 {
            let k = n - 2;
            let mut c = vec![0.0; k];
            let mut d = vec![0.0; k];
            for i in 0..k {
                let rhs = 6.0 * (y[i + 2] - 2.0 * y[i + 1] + y[i]) / (h * h);
                let (prev_c, prev_d) = if i == 0 { (0.0, 0.0) } else { (c[i - 1], d[i - 1]) };
                let denom = 4.0 - prev_c;
                c[i] = 1.0 / denom;
                d[i] = (rhs - prev_d) / denom;
            }
            for i in (0..k).rev() {
                let next = if i + 1 < k { m[i + 2] } else { 0.0 };
                m[i + 1] = d[i] - c[i] * next;
            }
        }
        Self { x0, h, y, m }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.y.len();
        let t = ((x - self.x0) / self.h).clamp(0.0, (n - 1) as f64);
        let i = (t.floor() as usize).min(n - 2);
        let u = t - i as f64;
        let v = 1.0 - u;
        let h2 = self.h * self.h / 6.0;
        v * self.y[i] + u * self.y[i + 1] + h2 * ((v * v * v - v) * self.m[i] + (u * u * u - u) * self.m[i + 1])
    }
}

/// Probabilists' Gauss–Hermite rule: `E g(Z) ≈ Σ w_i g(z_i)` for `Z ~ N(0, 1)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub log_weights: Vec<f64>,
}

impl GaussHermite {
    /// Builds an `order`-point rule by Newton iteration on the orthonormal
    /// Hermite recurrence.
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "Gauss-Hermite order must be positive");
        let n = order;
        let m = n.div_ceil(2);
        let pim4 = PI.powf(-0.25);
        let nf = n as f64;
        let mut x_phys = vec![0.0; n];
        let mut w_phys = vec![0.0; n];
        let mut z = 0.0_f64;
        for i in 0..m {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x_phys[0],
                3 => 1.91 * z - 0.91 * x_phys[1],
                _ => 2.0 * z - x_phys[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            x_phys[i] = z;
            x_phys[n - 1 - i] = -z;
            w_phys[i] = 2.0 / (pp * pp);
            w_phys[n - 1 - i] = w_phys[i];
        }
        let sqrt_pi = PI.sqrt();
        let mut pairs: Vec<(f64, f64)> = x_phys
            .iter()
            .zip(&w_phys)
            .map(|(x, w)| (std::f64::consts::SQRT_2 * x, w / sqrt_pi))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let nodes: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let weights: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Self {
            nodes,
            weights,
            log_weights,
        }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// `E g(Z)` for a standard normal `Z`.
    pub fn expect<F: FnMut(f64) -> f64>(&self, mut g: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(z, w)| w * g(*z))
            .sum()
    }
}

/// Shared rule of the given order, built once per process.
pub fn gauss_hermite(order: usize) -> Arc<GaussHermite> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<GaussHermite>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = cache.lock().unwrap_or_else(|e| e.into_inner());
    map.entry(order)
        .or_insert_with(|| Arc::new(GaussHermite::new(order)))
        .clone()
}
