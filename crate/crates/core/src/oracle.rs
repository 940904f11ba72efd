//! Slow, simple reference solvers for verification.
//!
//! Nothing here calls into the production fitters: likelihoods are
//! re-derived from plain softmax sums, maximisation is derivative-free, and
//! local equations are solved by bisection.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::kernel::KernelConfig;
use crate::model::{CategoryIndex, Dataset, ModelSpec};

const GOLDEN: f64 = 0.618_033_988_749_894_8;

/// Maximise a unimodal `f` on `[lo, hi]` by golden-section search until
/// the bracket is narrower than `tol`.
pub fn golden_section_max(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> (f64, f64) {
    let (mut a, mut b) = (lo, hi);
    let mut c = b - GOLDEN * (b - a);
    let mut d = a + GOLDEN * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - GOLDEN * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + GOLDEN * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

/// Exact MNL log-likelihood with predictors `coef · z_i` for the free
/// categories (slot order) and zero for the reference.
pub fn mnl_log_likelihood(
    design: &DMatrix<f64>,
    y: &[CategoryIndex],
    spec: &ModelSpec,
    coef: &[f64],
) -> f64 {
    let width = design.ncols();
    // Neumaier-compensated sum
    let (mut total, mut carry) = (0.0f64, 0.0f64);
    for (i, yi) in y.iter().enumerate() {
        let mut eta = vec![0.0; spec.n_categories];
        for (slot, k) in spec.free_categories().enumerate() {
            eta[k.0] = (0..width)
                .map(|j| coef[slot * width + j] * design[(i, j)])
                .sum();
        }
        let max = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = eta.iter().map(|e| (e - max).exp()).sum();
        let term = eta[yi.0] - max - denom.ln();
        let next = total + term;
        carry += if total.abs() >= term.abs() {
            (total - next) + term
        } else {
            (term - next) + total
        };
        total = next;
    }
    total + carry
}

#[derive(Debug, Clone, Copy)]
pub struct OracleOptions {
    /// Stop once a full sweep gains less than this in the objective...
    pub objective_tol: f64,
    /// ...and moves no coordinate further than this.
    pub step_tol: f64,
    pub max_sweeps: usize,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            objective_tol: 1e-12,
            step_tol: 1e-10,
            max_sweeps: 50_000,
        }
    }
}

/// Maximise `f` along `x + s·dir` over `s`; returns the best `s`.
fn line_max(f: &dyn Fn(&[f64]) -> f64, x: &[f64], dir: &[f64], initial: f64) -> (f64, f64) {
    let at = |s: f64| {
        let p: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + s * d).collect();
        f(&p)
    };
    let f0 = at(0.0);
    let h = initial.max(1e-7);
    // expand until the maximum is bracketed
    let (mut lo, mut hi);
    let fp = at(h);
    let fm = at(-h);
    if fp <= f0 && fm <= f0 {
        lo = -h;
        hi = h;
    } else {
        let sign = if fp > fm { 1.0 } else { -1.0 };
        let mut prev = 0.0;
        let mut best = (h, fp.max(fm));
        let next = loop {
            let next = 2.0 * best.0;
            let v = at(sign * next);
            if v <= best.1 || next > 1e6 {
                break next;
            }
            prev = best.0;
            best = (next, v);
        };
        lo = sign * prev;
        hi = sign * next;
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
    }
    let (s, fs) = golden_section_max(at, lo, hi, 1e-12 * (1.0 + hi.abs().max(lo.abs())));
    if fs >= f0 {
        (s, fs)
    } else {
        (0.0, f0)
    }
}

/// Derivative-free maximiser of the exact MNL likelihood: cyclic
/// coordinate line searches plus a pattern move along each sweep's net
/// displacement. Returns the slot-major coefficient vector.
pub fn oracle_mle(
    design: &DMatrix<f64>,
    y: &[CategoryIndex],
    spec: &ModelSpec,
    options: &OracleOptions,
) -> Result<Vec<f64>> {
    let dim = spec.n_free() * design.ncols();
    if dim == 0 {
        return Ok(Vec::new());
    }
    if dim > 30 {
        return Err(Error::OracleFailure(format!(
            "{dim} free parameters exceed the oracle budget of 30"
        )));
    }
    let f = |c: &[f64]| mnl_log_likelihood(design, y, spec, c);
    let mut x = vec![0.0; dim];
    let mut fx = f(&x);
    let mut scales = vec![0.1; dim];
    for _ in 0..options.max_sweeps {
        let start = x.clone();
        let f_start = fx;
        let mut max_move: f64 = 0.0;
        for c in 0..dim {
            let mut dir = vec![0.0; dim];
            dir[c] = 1.0;
            let (s, fs) = line_max(&f, &x, &dir, scales[c]);
            x[c] += s;
            fx = fs;
            max_move = max_move.max(s.abs());
            scales[c] = (2.0 * s.abs()).clamp(1e-7, 1.0);
        }
        let pattern: Vec<f64> = x.iter().zip(&start).map(|(a, b)| a - b).collect();
        let norm = pattern.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            let unit: Vec<f64> = pattern.iter().map(|v| v / norm).collect();
            let (s, fs) = line_max(&f, &x, &unit, norm);
            for (xi, u) in x.iter_mut().zip(&unit) {
                *xi += s * u;
            }
            fx = fs;
            max_move = max_move.max(s.abs());
        }
        if fx - f_start < options.objective_tol && max_move < options.step_tol {
            return Ok(x);
        }
    }
    Err(Error::OracleFailure(format!(
        "coordinate search did not settle within {} sweeps",
        options.max_sweeps
    )))
}

/// Local score `Σ_i w_i (I{y_i = k} - P_i(k))` with `η_k = x_iᵗβ_k + m` and
/// the other categories at `x_iᵗβ_j + m_j(t_i)`, evaluated from scratch.
pub fn oracle_local_score(
    data: &Dataset,
    spec: &ModelSpec,
    kernel: &KernelConfig,
    beta: &DMatrix<f64>,
    m_obs: &DMatrix<f64>,
    k: CategoryIndex,
    t: &[f64],
    m: f64,
) -> Result<f64> {
    let slot = spec
        .slot(k)
        .ok_or_else(|| Error::Config("reference category has no local problem".into()))?;
    let mut total = 0.0;
    for i in 0..data.n() {
        let ti: Vec<f64> = data.t().row(i).iter().copied().collect();
        let w = kernel.weight(t, &ti)?;
        let mut eta = vec![0.0; spec.n_categories];
        for (s, j) in spec.free_categories().enumerate() {
            let xb: f64 = (0..data.p()).map(|d| data.x()[(i, d)] * beta[(s, d)]).sum();
            eta[j.0] = xb + if s == slot { m } else { m_obs[(s, i)] };
        }
        let max = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = eta.iter().map(|e| (e - max).exp()).sum();
        let pk = (eta[k.0] - max).exp() / denom;
        let indicator = if data.y()[i] == k { 1.0 } else { 0.0 };
        total += w * (indicator - pk);
    }
    Ok(total)
}

/// Solve the local first-order condition for `m_k(t)` by bisection on
/// `[-50, 50]` to width `1e-12`. The local score is strictly decreasing in
/// `m`, so the root is unique when bracketed.
pub fn oracle_local_solve(
    data: &Dataset,
    spec: &ModelSpec,
    kernel: &KernelConfig,
    beta: &DMatrix<f64>,
    m_obs: &DMatrix<f64>,
    k: CategoryIndex,
    t: &[f64],
) -> Result<f64> {
    let score = |m: f64| oracle_local_score(data, spec, kernel, beta, m_obs, k, t, m);
    let (mut lo, mut hi) = (-50.0, 50.0);
    let (s_lo, s_hi) = (score(lo)?, score(hi)?);
    if s_lo <= 0.0 || s_hi >= 0.0 {
        return Err(Error::Separation(format!(
            "local score has no sign change on [-50, 50] (ends {s_lo:.3e}, {s_hi:.3e})"
        )));
    }
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if score(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Central finite difference of a scalar function.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Central second difference of a scalar function.
pub fn second_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h)
}
