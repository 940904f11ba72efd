//! Fully parametric multinomial logit by joint Newton–Raphson.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{spd_inverse, spd_solve};
use crate::model::{log_sum_exp, CategoryIndex, CoefficientSet, Dataset, ModelSpec};

/// Decrease tolerated when accepting a step: near the optimum the Newton
/// gain drops below the rounding level of the summed likelihood.
const ACCEPT_SLACK: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Convergence threshold on the max-norm of the score.
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            max_halvings: 30,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParametricFitResult {
    pub spec: ModelSpec,
    /// `(K-1) × p'` in slot order; column 0 is the intercept when
    /// `intercept` is set.
    pub coefficients: CoefficientSet,
    pub standard_errors: DMatrix<f64>,
    /// Covariance of the slot-major stacked coefficients.
    pub vcov: DMatrix<f64>,
    pub loglik: f64,
    /// Log-likelihood at the start and after every accepted step.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Max-norm of the score at the returned coefficients.
    pub score_norm: f64,
    pub intercept: bool,
}

/// `[1, x]`, optionally followed by the smooth block `t`.
pub fn parametric_design(data: &Dataset, include_smooth: bool) -> DMatrix<f64> {
    let (n, p, q) = (data.n(), data.p(), data.q());
    let cols = 1 + p + if include_smooth { q } else { 0 };
    DMatrix::from_fn(n, cols, |i, j| {
        if j == 0 {
            1.0
        } else if j <= p {
            data.x()[(i, j - 1)]
        } else {
            data.t()[(i, j - 1 - p)]
        }
    })
}

/// Parametric MNL with category intercepts and linear effects of `x`.
pub fn fit_parametric(
    data: &Dataset,
    spec: &ModelSpec,
    options: &FitOptions,
) -> Result<ParametricFitResult> {
    data.check_spec(spec)?;
    fit_design(&parametric_design(data, false), data.y(), spec, options, true)
}

struct Evaluation {
    loglik: f64,
    score: DVector<f64>,
    information: DMatrix<f64>,
}

fn linear_predictors(design: &DMatrix<f64>, coef: &DMatrix<f64>) -> DMatrix<f64> {
    // (K-1) × n
    coef * design.transpose()
}

/// Log-likelihood of `coef` (slot rows × design columns).
pub fn design_log_likelihood(
    design: &DMatrix<f64>,
    y: &[CategoryIndex],
    spec: &ModelSpec,
    coef: &DMatrix<f64>,
) -> f64 {
    crate::model::total_log_likelihood(&linear_predictors(design, coef), y, spec)
}

fn evaluate(
    design: &DMatrix<f64>,
    y: &[CategoryIndex],
    spec: &ModelSpec,
    coef: &DMatrix<f64>,
    with_information: bool,
) -> Evaluation {
    let n_free = spec.n_free();
    let width = design.ncols();
    let dim = n_free * width;
    let eta_free = linear_predictors(design, coef);
    // same summation as the line search compares against
    let loglik = crate::model::total_log_likelihood(&eta_free, y, spec);
    let mut score = DVector::zeros(dim);
    let mut information = DMatrix::zeros(dim, dim);
    let mut eta = vec![0.0; n_free + 1];
    let mut probs = vec![0.0; n_free];
    for (i, yi) in y.iter().enumerate() {
        for s in 0..n_free {
            eta[s] = eta_free[(s, i)];
        }
        eta[n_free] = 0.0;
        let lse = log_sum_exp(&eta);
        let y_slot = spec.slot(*yi);
        for s in 0..n_free {
            probs[s] = (eta[s] - lse).exp();
        }
        let z = design.row(i);
        for c in 0..n_free {
            let resid = if y_slot == Some(c) { 1.0 } else { 0.0 } - probs[c];
            for j in 0..width {
                score[c * width + j] += resid * z[j];
            }
        }
        if !with_information {
            continue;
        }
        for c in 0..n_free {
            for d in c..n_free {
                let w = if c == d {
                    probs[c] * (1.0 - probs[c])
                } else {
                    -probs[c] * probs[d]
                };
                for j in 0..width {
                    let wz = w * z[j];
                    for l in 0..width {
                        information[(c * width + j, d * width + l)] += wz * z[l];
                    }
                }
            }
        }
    }
    if with_information {
        for c in 0..n_free {
            for d in 0..c {
                for j in 0..width {
                    for l in 0..width {
                        information[(c * width + j, d * width + l)] =
                            information[(d * width + l, c * width + j)];
                    }
                }
            }
        }
    }
    Evaluation {
        loglik,
        score,
        information,
    }
}

fn check_support(y: &[CategoryIndex], spec: &ModelSpec, n_params: usize) -> Result<()> {
    let mut counts = vec![0usize; spec.n_categories];
    for k in y {
        if k.0 >= spec.n_categories {
            return Err(Error::Config(format!("category {} out of range", k.0)));
        }
        counts[k.0] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InsufficientData(format!(
            "category {missing} never occurs in the response"
        )));
    }
    if y.len() <= n_params {
        return Err(Error::InsufficientData(format!(
            "{} observations for {} free coefficients",
            y.len(),
            n_params
        )));
    }
    Ok(())
}

/// Newton–Raphson with step-halving on an arbitrary design matrix.
pub fn fit_design(
    design: &DMatrix<f64>,
    y: &[CategoryIndex],
    spec: &ModelSpec,
    options: &FitOptions,
    intercept: bool,
) -> Result<ParametricFitResult> {
    if design.nrows() != y.len() {
        return Err(Error::Shape(format!(
            "design has {} rows for {} responses",
            design.nrows(),
            y.len()
        )));
    }
    let n_free = spec.n_free();
    let width = design.ncols();
    check_support(y, spec, n_free * width)?;

    let mut coef = DMatrix::zeros(n_free, width);
    let mut current = evaluate(design, y, spec, &coef, true);
    let mut trace = vec![current.loglik];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < options.max_iter {
        if current.score.amax() < options.tol {
            converged = true;
            break;
        }
        iterations += 1;
        let step = spd_solve(&current.information, &current.score, "observed information")?;
        // once the predicted gain is below the rounding level of the sum, a
        // full step may read as a one-ulp loss
        let rounding = 2.0 * f64::EPSILON * current.loglik.abs();
        let slack = if 0.5 * current.score.dot(&step) < rounding {
            ACCEPT_SLACK.max(rounding)
        } else {
            ACCEPT_SLACK
        };
        let step = DMatrix::from_row_slice(n_free, width, step.as_slice());
        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..=options.max_halvings {
            let candidate = &coef + &step * lambda;
            let ll = design_log_likelihood(design, y, spec, &candidate);
            if ll.is_finite() && ll >= current.loglik - slack {
                accepted = Some(candidate);
                break;
            }
            lambda *= 0.5;
        }
        match accepted {
            Some(candidate) => {
                coef = candidate;
                current = evaluate(design, y, spec, &coef, true);
                trace.push(current.loglik);
            }
            None => break,
        }
    }
    if !converged && current.score.amax() < options.tol {
        converged = true;
    }

    let vcov = spd_inverse(&current.information, "observed information")?;
    let standard_errors = standard_errors(&vcov, n_free, width)?;
    Ok(ParametricFitResult {
        spec: *spec,
        coefficients: CoefficientSet { beta: coef },
        standard_errors,
        vcov,
        loglik: current.loglik,
        loglik_trace: trace,
        iterations,
        converged,
        score_norm: current.score.amax(),
        intercept,
    })
}

/// Square roots of the covariance diagonal, reshaped to `rows × cols`
/// (slot-major stacking).
pub fn standard_errors(vcov: &DMatrix<f64>, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if vcov.nrows() != rows * cols || vcov.ncols() != rows * cols {
        return Err(Error::Shape(format!(
            "covariance is {}×{}, expected {}",
            vcov.nrows(),
            vcov.ncols(),
            rows * cols
        )));
    }
    let mut out = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let v = vcov[(r * cols + c, r * cols + c)];
            if v < -1e-10 || v.is_nan() {
                return Err(Error::NumericalFailure(format!(
                    "negative variance {v:e} for coefficient ({r}, {c})"
                )));
            }
            out[(r, c)] = v.max(0.0).sqrt();
        }
    }
    Ok(out)
}

/// Score and observed information of the design likelihood at `coef`;
/// exposed for diagnostics and tests.
pub fn score_and_information(
    design: &DMatrix<f64>,
    y: &[CategoryIndex],
    spec: &ModelSpec,
    coef: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let e = evaluate(design, y, spec, coef, true);
    (e.score, e.information)
}
