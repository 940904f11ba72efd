#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semimnl::{simulate, CovariateLaw, Dataset, DgpSpec, ModelSpec, SmoothFunction};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn standard_normal() -> CovariateLaw {
    CovariateLaw::Normal { mu: 0.0, sd: 1.0 }
}

/// K=2, β=1, m(t) = sin(t), t uniform on [-2, 2].
pub fn sine_dgp(n: usize, seed: u64) -> DgpSpec {
    DgpSpec {
        n_categories: 2,
        beta: vec![vec![1.0]],
        smooth: vec![SmoothFunction::Sine {
            amplitude: 1.0,
            frequency: 1.0,
        }],
        x_laws: vec![standard_normal()],
        t_laws: vec![CovariateLaw::Uniform { lo: -2.0, hi: 2.0 }],
        n,
        seed,
    }
}

/// K=3 with one ridge-interaction surface and one flat category.
pub fn ridge_dgp(n: usize, seed: u64) -> DgpSpec {
    DgpSpec {
        n_categories: 3,
        beta: vec![vec![0.8, -0.5], vec![-0.4, 0.6]],
        smooth: vec![
            SmoothFunction::RidgeInteraction { a: 1.5 },
            SmoothFunction::Linear {
                a: 0.2,
                b: vec![0.0, 0.0],
            },
        ],
        x_laws: vec![standard_normal(), CovariateLaw::Bernoulli { p: 0.5 }],
        t_laws: vec![
            CovariateLaw::Uniform { lo: -1.5, hi: 1.5 },
            CovariateLaw::Uniform { lo: -1.5, hi: 1.5 },
        ],
        n,
        seed,
    }
}

/// Linear-in-`t` truth, so the parametric model with `t` terms is correct.
pub fn linear_dgp(k: usize, n: usize, seed: u64) -> DgpSpec {
    DgpSpec {
        n_categories: k,
        beta: (0..k - 1)
            .map(|j| vec![0.6 - 0.3 * j as f64, 0.25 * j as f64 - 0.2])
            .collect(),
        smooth: (0..k - 1)
            .map(|j| SmoothFunction::Linear {
                a: 0.3 - 0.2 * j as f64,
                b: vec![0.4 - 0.1 * j as f64],
            })
            .collect(),
        x_laws: vec![standard_normal(), CovariateLaw::Uniform { lo: -1.0, hi: 1.0 }],
        t_laws: vec![CovariateLaw::Uniform { lo: -2.0, hi: 2.0 }],
        n,
        seed,
    }
}

/// Correctly specified parametric MNL: intercepts and slopes only.
pub fn parametric_dgp(k: usize, n: usize, seed: u64) -> DgpSpec {
    DgpSpec {
        n_categories: k,
        beta: (0..k - 1)
            .map(|j| vec![0.5 - 0.3 * j as f64, 0.2 * j as f64 - 0.4])
            .collect(),
        smooth: (0..k - 1)
            .map(|j| SmoothFunction::Linear {
                a: 0.2 * j as f64 - 0.1,
                b: vec![],
            })
            .collect(),
        x_laws: vec![standard_normal(), CovariateLaw::Uniform { lo: -1.0, hi: 1.0 }],
        t_laws: vec![],
        n,
        seed,
    }
}

/// Small random semiparametric instance for the local-problem checks, with
/// random coefficients and random smooth values at the observation points.
pub struct LocalInstance {
    pub data: Dataset,
    pub spec: ModelSpec,
    pub beta: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub bandwidths: Vec<f64>,
    pub query: Vec<f64>,
}

pub fn local_instance(seed: u64) -> LocalInstance {
    let mut r = rng(seed);
    let k = r.random_range(2..=4);
    let p = r.random_range(1..=2);
    let q = r.random_range(1..=2);
    let n = r.random_range(30..=60);
    let dgp = DgpSpec {
        n_categories: k,
        beta: (0..k - 1)
            .map(|_| (0..p).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect(),
        smooth: vec![SmoothFunction::Zero; k - 1],
        x_laws: vec![standard_normal(); p],
        t_laws: vec![CovariateLaw::Uniform { lo: -1.0, hi: 1.0 }; q],
        n,
        seed,
    };
    let data = simulate(&dgp).unwrap();
    let spec = dgp.model_spec().unwrap();
    let beta = DMatrix::from_fn(k - 1, p, |_, _| r.random_range(-1.0..1.0));
    let m = DMatrix::from_fn(k - 1, n, |_, _| r.random_range(-0.5..0.5));
    let bandwidths = (0..q).map(|_| r.random_range(0.3..0.8)).collect();
    let query = (0..q).map(|_| r.random_range(-0.8..0.8)).collect();
    LocalInstance {
        data,
        spec,
        beta,
        m,
        bandwidths,
        query,
    }
}

pub fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}

/// Empirical quantile by linear interpolation between order statistics.
pub fn quantile(values: &[f64], prob: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = prob * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

pub fn range(values: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    hi - lo
}

/// Largest drop between consecutive trace entries (0 for an ascending trace).
pub fn worst_decrease(trace: &[f64]) -> f64 {
    trace
        .windows(2)
        .map(|w| w[0] - w[1])
        .fold(0.0, f64::max)
}

/// Upper chi-square tail by quadrature, independent of the library's
/// incomplete-gamma code. Even `df` uses the Poisson closed form; odd `df`
/// starts from `erfc` by adaptive Simpson and climbs the recurrence
/// `Q(a + 1, x) = Q(a, x) + xᵃ e⁻ˣ / Γ(a + 1)`.
pub fn chi_square_tail_oracle(statistic: f64, df: usize) -> f64 {
    let x = statistic / 2.0;
    if df % 2 == 0 {
        let mut term = (-x).exp();
        let mut sum = term;
        for j in 1..df / 2 {
            term *= x / j as f64;
            sum += term;
        }
        return sum;
    }
    let z = x.sqrt();
    let tail = adaptive_simpson(&|u: f64| (-u * u).exp(), z, z + 40.0, 1e-15, 50);
    let mut q = 2.0 / std::f64::consts::PI.sqrt() * tail;
    // x^a e^-x / Γ(a+1) for a = 1/2, 3/2, ...
    let mut term = (x.ln() * 0.5 - x).exp() / (std::f64::consts::PI.sqrt() / 2.0);
    let mut a = 0.5;
    for _ in 0..(df - 1) / 2 {
        q += term;
        a += 1.0;
        term *= x / a;
    }
    q
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
        let c = 0.5 * (a + b);
        let fc = f(c);
        ((b - a) / 6.0 * (f(a) + 4.0 * fc + f(b)), fc)
    }
    fn recurse(f: &dyn Fn(f64) -> f64, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let c = 0.5 * (a + b);
        let (left, _) = simpson(f, a, c);
        let (right, _) = simpson(f, c, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, c, left, tol / 2.0, depth - 1) + recurse(f, c, b, right, tol / 2.0, depth - 1)
    }
    let (whole, _) = simpson(f, a, b);
    recurse(f, a, b, whole, tol, depth)
}
