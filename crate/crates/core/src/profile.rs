//! Semiparametric MNL by kernel-smoothed profile likelihood.
//!
//! The predictor for non-reference category `k` is `x_iᵗβ_k + m_k(t_i)`
//! with `m_k` an unknown smooth function of the smooth covariates. For fixed
//! coefficients each `m_k(t)` solves a kernel-weighted local likelihood
//! equation in which only `η_k` varies; the other categories' predictors are
//! frozen at the observation points. Coefficients are updated by Newton
//! steps on the profile likelihood, using the derivative of the local
//! solution with respect to `β_k` (the least favourable direction).
//!
//! The outer loop alternates
//!   1. a coefficient step for every category in index order, and
//!   2. a local Newton step for `m_k` at every observation point,
//!
//! until the max-norm change of `(β, m)` drops below `tol`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::{KernelConfig, ScaledPoints};
use crate::linalg::{condition_number, spd_inverse, spd_solve};
use crate::model::{
    log_sum_exp, softmax_into, total_log_likelihood, CategoryIndex, CoefficientSet, Dataset,
    ModelSpec,
};
use crate::parametric::{self, parametric_design, FitOptions, ParametricFitResult};

const ACCEPT_SLACK: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileOptions {
    /// Max-norm change of `(β, m)` that counts as converged.
    pub tol: f64,
    pub max_iter: usize,
    /// Local score per unit kernel mass treated as solved.
    pub inner_tol: f64,
    /// Local Newton steps per point per outer iteration.
    pub inner_max_iter: usize,
    /// Clip on a single local Newton step.
    pub step_cap: f64,
    pub max_halvings: usize,
    /// Sweeps allowed when driving local scores below `inner_tol`, both for
    /// the starting curves and once the outer loop has settled.
    pub polish_max_iter: usize,
    /// Profile-score max-norm required, on top of `tol`, before the fit is
    /// declared converged.
    pub score_tol: f64,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 200,
            inner_tol: 1e-9,
            inner_max_iter: 1,
            step_cap: 5.0,
            max_halvings: 30,
            polish_max_iter: 200,
            score_tol: 1e-6,
        }
    }
}

/// Coefficients and smooth-function values at the observation points.
#[derive(Debug, Clone, PartialEq)]
pub struct FitState {
    /// `(K-1) × p`, slot order.
    pub beta: DMatrix<f64>,
    /// `(K-1) × n`: `m_k(t_i)`.
    pub m: DMatrix<f64>,
}

impl FitState {
    pub fn zeros(n_free: usize, p: usize, n: usize) -> Self {
        Self {
            beta: DMatrix::zeros(n_free, p),
            m: DMatrix::zeros(n_free, n),
        }
    }

    fn max_abs_diff(&self, other: &Self) -> f64 {
        let b = (&self.beta - &other.beta).amax();
        let m = (&self.m - &other.m).amax();
        b.max(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothState {
    pub m: DMatrix<f64>,
    /// One `n × p` matrix per slot: `∂m_k(t_i)/∂β_k`.
    pub m_grad: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalScore {
    pub score: f64,
    pub curvature: f64,
}

#[derive(Debug, Clone)]
pub struct SemiparametricFitResult {
    pub spec: ModelSpec,
    pub beta: CoefficientSet,
    /// Square roots of `diag(-𝓑⁻¹)` per category block.
    pub beta_se: DMatrix<f64>,
    pub smooth: SmoothState,
    /// Log-likelihood at the starting values and after every outer iteration.
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub kernel: KernelConfig,
    pub options: ProfileOptions,
    /// Max-norm over categories of the profile score at the result.
    pub profile_score_norm: f64,
    /// Largest local score magnitude over categories and observation points.
    pub max_local_score: f64,
    pub warnings: Vec<String>,
    pub start: ParametricFitResult,
}

impl SemiparametricFitResult {
    pub fn state(&self) -> FitState {
        FitState {
            beta: self.beta.beta.clone(),
            m: self.smooth.m.clone(),
        }
    }

    /// Fitted category probabilities at observation `i`.
    pub fn fitted_probabilities(&self, data: &Dataset, i: usize) -> Vec<f64> {
        let mut eta = vec![0.0; self.spec.n_categories];
        for (slot, k) in self.spec.free_categories().enumerate() {
            let xb: f64 = (0..data.p())
                .map(|d| data.x()[(i, d)] * self.beta.beta[(slot, d)])
                .sum();
            eta[k.0] = xb + self.smooth.m[(slot, i)];
        }
        let mut probs = vec![0.0; eta.len()];
        softmax_into(&eta, &mut probs);
        probs
    }
}

#[inline]
fn sigmoid_pair(z: f64) -> (f64, f64) {
    // (p, 1 - p) without cancellation
    if z >= 0.0 {
        let e = (-z).exp();
        (1.0 / (1.0 + e), e / (1.0 + e))
    } else {
        let e = z.exp();
        (e / (1.0 + e), 1.0 / (1.0 + e))
    }
}

/// Per-category view of the local likelihood: every observation's
/// predictor for `k` is `offset_i + m`, where the offset folds in `x_iᵗβ_k`
/// and the log-sum-exp of the other categories' frozen predictors.
struct LocalProblem<'a> {
    data: &'a Dataset,
    offsets: Vec<f64>,
    is_k: Vec<bool>,
    m_at_obs: Vec<f64>,
}

fn linear_part(data: &Dataset, beta: &DMatrix<f64>) -> DMatrix<f64> {
    if data.p() == 0 {
        DMatrix::zeros(beta.nrows(), data.n())
    } else {
        beta * data.x().transpose()
    }
}

impl<'a> LocalProblem<'a> {
    fn new(data: &'a Dataset, spec: &ModelSpec, state: &FitState, slot: usize) -> Self {
        let xb = linear_part(data, &state.beta);
        let n_free = spec.n_free();
        let k = spec.category_of_slot(slot);
        let mut others = Vec::with_capacity(n_free);
        let offsets = (0..data.n())
            .map(|i| {
                others.clear();
                others.push(0.0);
                for j in (0..n_free).filter(|&j| j != slot) {
                    others.push(xb[(j, i)] + state.m[(j, i)]);
                }
                xb[(slot, i)] - log_sum_exp(&others)
            })
            .collect();
        Self {
            data,
            offsets,
            is_k: data.y().iter().map(|y| *y == k).collect(),
            m_at_obs: state.m.row(slot).iter().copied().collect(),
        }
    }

    /// Weighted score and curvature at candidate `m`; when `curv_x` is
    /// given it also accumulates `Σ w_i l″_i x_i`.
    fn sums(&self, weights: &[f64], m: f64, mut curv_x: Option<&mut [f64]>) -> LocalScore {
        let mut score = 0.0;
        let mut curvature = 0.0;
        if let Some(cx) = curv_x.as_deref_mut() {
            cx.iter_mut().for_each(|v| *v = 0.0);
        }
        let x = self.data.x();
        for (i, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let (p, q) = sigmoid_pair(self.offsets[i] + m);
            let resid = if self.is_k[i] { q } else { -p };
            score += w * resid;
            let c = w * p * q;
            curvature -= c;
            if let Some(cx) = curv_x.as_deref_mut() {
                for (d, v) in cx.iter_mut().enumerate() {
                    *v -= c * x[(i, d)];
                }
            }
        }
        LocalScore { score, curvature }
    }

    /// Newton iterations on the local likelihood starting from `m`.
    /// Returns the new value and whether any step was clipped.
    fn solve(
        &self,
        weights: &[f64],
        mut m: f64,
        max_iter: usize,
        inner_tol: f64,
        step_cap: f64,
    ) -> Result<(f64, bool)> {
        if weights.iter().all(|&w| w == 0.0) {
            return Err(Error::NoLocalData);
        }
        let mut capped = false;
        let mass: f64 = weights.iter().sum();
        for _ in 0..max_iter {
            let s = self.sums(weights, m, None);
            if s.score.abs() < inner_tol * mass {
                break;
            }
            if !(s.curvature < 0.0) {
                return Err(Error::NumericalFailure(format!(
                    "local curvature {} is not negative",
                    s.curvature
                )));
            }
            let mut step = -s.score / s.curvature;
            if step.abs() > step_cap {
                step = step_cap.copysign(step);
                capped = true;
            }
            m += step;
        }
        Ok((m, capped))
    }
}

/// Shared per-fit context: data, scaled observation points, kernel.
struct Smoother<'a> {
    data: &'a Dataset,
    spec: &'a ModelSpec,
    points: ScaledPoints,
}

impl<'a> Smoother<'a> {
    fn new(data: &'a Dataset, spec: &'a ModelSpec, kernel: &KernelConfig) -> Result<Self> {
        data.check_spec(spec)?;
        if data.q() == 0 {
            return Err(Error::Config(
                "semiparametric model needs at least one smooth covariate".into(),
            ));
        }
        Ok(Self {
            data,
            spec,
            points: ScaledPoints::new(data.t(), kernel)?,
        })
    }

    fn check_state(&self, state: &FitState) -> Result<()> {
        let n_free = self.spec.n_free();
        if state.beta.shape() != (n_free, self.data.p()) || state.m.shape() != (n_free, self.data.n())
        {
            return Err(Error::Shape(format!(
                "state has beta {:?} and m {:?}, expected ({n_free}, {}) and ({n_free}, {})",
                state.beta.shape(),
                state.m.shape(),
                self.data.p(),
                self.data.n()
            )));
        }
        if state.beta.iter().chain(state.m.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidPredictor("non-finite fit state".into()));
        }
        Ok(())
    }

    fn slot(&self, k: CategoryIndex) -> Result<usize> {
        if k.0 >= self.spec.n_categories {
            return Err(Error::Config(format!("category {} out of range", k.0)));
        }
        self.spec.slot(k).ok_or_else(|| {
            Error::Config("the reference category has no smooth function to estimate".into())
        })
    }

    fn query(&self, t: &[f64]) -> Result<Vec<f64>> {
        if t.len() != self.data.q() {
            return Err(Error::Shape(format!(
                "query point has length {}, expected {}",
                t.len(),
                self.data.q()
            )));
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("query point must be finite".into()));
        }
        Ok(self.points.scale(t))
    }

    fn weights_at(&self, u: &[f64]) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.data.n());
        self.points.weights_into(u, &mut w);
        w
    }

    fn loglik(&self, state: &FitState) -> f64 {
        let eta = linear_part(self.data, &state.beta) + &state.m;
        total_log_likelihood(&eta, self.data.y(), self.spec)
    }

    /// `∂m_k(t_i)/∂β_k` at every observation point, evaluated at the
    /// current `m_k(t_i)`.
    fn gradient_pass(&self, problem: &LocalProblem, slot: usize) -> Result<DMatrix<f64>> {
        let n = self.data.n();
        let p = self.data.p();
        let rows: Vec<Result<Vec<f64>>> = (0..n)
            .into_par_iter()
            .map_init(
                || (Vec::with_capacity(n), vec![0.0; p]),
                |(w, cx), i| {
                    self.points.weights_into(self.points.point(i), w);
                    let s = problem.sums(w, problem.m_at_obs[i], Some(cx));
                    if !(s.curvature < 0.0) {
                        return Err(Error::NumericalFailure(format!(
                            "zero curvature sum at observation {i} (slot {slot})"
                        )));
                    }
                    Ok(cx.iter().map(|v| -v / s.curvature).collect())
                },
            )
            .collect();
        let mut grad = DMatrix::zeros(n, p);
        for (i, row) in rows.into_iter().enumerate() {
            for (d, v) in row?.into_iter().enumerate() {
                grad[(i, d)] = v;
            }
        }
        Ok(grad)
    }

    /// Local Newton update of `m_k` at every observation point. Returns
    /// the new row and the number of clipped points.
    fn smooth_pass(
        &self,
        problem: &LocalProblem,
        max_iter: usize,
        inner_tol: f64,
        step_cap: f64,
    ) -> Result<(Vec<f64>, usize)> {
        let n = self.data.n();
        let out: Vec<Result<(f64, bool)>> = (0..n)
            .into_par_iter()
            .map_init(
                || Vec::with_capacity(n),
                |w, i| {
                    self.points.weights_into(self.points.point(i), w);
                    problem.solve(w, problem.m_at_obs[i], max_iter, inner_tol, step_cap)
                },
            )
            .collect();
        let mut row = Vec::with_capacity(n);
        let mut capped = 0;
        for r in out {
            let (m, c) = r?;
            row.push(m);
            capped += c as usize;
        }
        Ok((row, capped))
    }

    /// Largest local score magnitude per unit kernel mass for one category
    /// at the observation points.
    fn max_local_score(&self, problem: &LocalProblem) -> f64 {
        let n = self.data.n();
        (0..n)
            .into_par_iter()
            .map_init(
                || Vec::with_capacity(n),
                |w, i| {
                    self.points.weights_into(self.points.point(i), w);
                    let mass: f64 = w.iter().sum();
                    problem.sums(w, problem.m_at_obs[i], None).score.abs() / mass
                },
            )
            .reduce(|| 0.0, f64::max)
    }

    /// Profile score `Σ l′_ik (x_i + m′_i)` and `𝓑 = Σ l″_ik v_i v_iᵗ`.
    fn profile_score(
        &self,
        problem: &LocalProblem,
        grad: &DMatrix<f64>,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let p = self.data.p();
        let x = self.data.x();
        let mut score = DVector::zeros(p);
        let mut b = DMatrix::zeros(p, p);
        let mut v = DVector::zeros(p);
        for i in 0..self.data.n() {
            let (pk, qk) = sigmoid_pair(problem.offsets[i] + problem.m_at_obs[i]);
            let l1 = if problem.is_k[i] { qk } else { -pk };
            let l2 = -pk * qk;
            for d in 0..p {
                v[d] = x[(i, d)] + grad[(i, d)];
            }
            score.axpy(l1, &v, 1.0);
            b.ger(l2, &v, &v, 1.0);
        }
        (score, b)
    }

    /// One Newton step on the profile likelihood for `slot`, with
    /// step-halving. The smooth row moves along the least favourable
    /// direction together with the coefficients.
    fn beta_step(
        &self,
        state: &FitState,
        slot: usize,
        max_halvings: usize,
    ) -> Result<BetaStep> {
        let problem = LocalProblem::new(self.data, self.spec, state, slot);
        let grad = self.gradient_pass(&problem, slot)?;
        let (score, b) = self.profile_score(&problem, &grad);
        let current = self.loglik(state);
        // steps whose gain is below rounding level are not rejected
        let slack = ACCEPT_SLACK * current.abs().max(1.0);
        let p = self.data.p();
        let mut result = BetaStep {
            beta_row: state.beta.row(slot).iter().copied().collect(),
            m_row: state.m.row(slot).iter().copied().collect(),
            loglik: current,
            halvings: 0,
            accepted: false,
            profile_score: score.clone(),
            m_grad: grad.clone(),
        };
        if p == 0 || score.amax() == 0.0 {
            result.accepted = true;
            return Ok(result);
        }
        let neg_b = -&b;
        let delta = spd_solve(&neg_b, &score, "profile information 𝓑").map_err(|e| match e {
            Error::NonIdentified { condition, .. } => Error::NonIdentified {
                reason: format!(
                    "profile information for category {} is singular",
                    self.spec.category_of_slot(slot)
                ),
                condition,
            },
            other => other,
        })?;
        let m_shift = &grad * &delta;
        let mut candidate = state.clone();
        let mut lambda = 1.0;
        for h in 0..=max_halvings {
            for d in 0..p {
                candidate.beta[(slot, d)] = state.beta[(slot, d)] + lambda * delta[d];
            }
            for i in 0..self.data.n() {
                candidate.m[(slot, i)] = state.m[(slot, i)] + lambda * m_shift[i];
            }
            let ll = self.loglik(&candidate);
            if ll.is_finite() && ll >= current - slack {
                result.beta_row = candidate.beta.row(slot).iter().copied().collect();
                result.m_row = candidate.m.row(slot).iter().copied().collect();
                result.loglik = ll;
                result.halvings = h;
                result.accepted = true;
                return Ok(result);
            }
            lambda *= 0.5;
        }
        Ok(result)
    }

    /// Gauss–Seidel sweeps of fully converged local solves at fixed β.
    fn polish(&self, state: &mut FitState, options: &ProfileOptions) -> Result<f64> {
        let mut worst = f64::INFINITY;
        for _ in 0..options.polish_max_iter {
            for slot in 0..self.spec.n_free() {
                let problem = LocalProblem::new(self.data, self.spec, state, slot);
                let (row, _) = self.smooth_pass(&problem, 100, options.inner_tol, options.step_cap)?;
                for (i, v) in row.into_iter().enumerate() {
                    state.m[(slot, i)] = v;
                }
            }
            worst = self.worst_local_score(state);
            if worst < options.inner_tol {
                break;
            }
        }
        Ok(worst)
    }

    /// Curve gradients, profile-score max-norm and standard errors from
    /// `𝓑⁻¹` at the current state.
    fn summary(&self, state: &FitState) -> Result<ProfileSummary> {
        let (n_free, p) = (self.spec.n_free(), self.data.p());
        let mut beta_se = DMatrix::zeros(n_free, p);
        let mut m_grad = Vec::with_capacity(n_free);
        let mut score_norm: f64 = 0.0;
        for slot in 0..n_free {
            let problem = LocalProblem::new(self.data, self.spec, state, slot);
            let grad = self.gradient_pass(&problem, slot)?;
            let (score, b) = self.profile_score(&problem, &grad);
            score_norm = score_norm.max(score.amax());
            if p > 0 {
                let cov = spd_inverse(&(-&b), "profile information 𝓑").map_err(|_| {
                    Error::NonIdentified {
                        reason: format!(
                            "profile information for category {} is singular",
                            self.spec.category_of_slot(slot)
                        ),
                        condition: condition_number(&b),
                    }
                })?;
                for d in 0..p {
                    beta_se[(slot, d)] = cov[(d, d)].max(0.0).sqrt();
                }
            }
            m_grad.push(grad);
        }
        Ok(ProfileSummary {
            beta_se,
            m_grad,
            score_norm,
        })
    }

    fn worst_local_score(&self, state: &FitState) -> f64 {
        (0..self.spec.n_free())
            .map(|slot| {
                let problem = LocalProblem::new(self.data, self.spec, state, slot);
                self.max_local_score(&problem)
            })
            .fold(0.0, f64::max)
    }
}

struct ProfileSummary {
    beta_se: DMatrix<f64>,
    m_grad: Vec<DMatrix<f64>>,
    score_norm: f64,
}

/// Outcome of one coefficient update.
#[derive(Debug, Clone)]
pub struct BetaStep {
    pub beta_row: Vec<f64>,
    /// Smooth row after the first-order shift along `m′`.
    pub m_row: Vec<f64>,
    pub loglik: f64,
    pub halvings: usize,
    /// False if no halving restored a nondecreasing likelihood; the rows
    /// are then unchanged.
    pub accepted: bool,
    /// Profile score at the state the step started from.
    pub profile_score: DVector<f64>,
    pub m_grad: DMatrix<f64>,
}

/// Kernel-weighted score and curvature of the local likelihood for
/// category `k` at query point `t`, with candidate value `m_at_t`.
pub fn local_smoothed_score(
    data: &Dataset,
    spec: &ModelSpec,
    kernel: &KernelConfig,
    state: &FitState,
    k: CategoryIndex,
    t: &[f64],
    m_at_t: f64,
) -> Result<LocalScore> {
    let sm = Smoother::new(data, spec, kernel)?;
    sm.check_state(state)?;
    let slot = sm.slot(k)?;
    let w = sm.weights_at(&sm.query(t)?);
    if w.iter().all(|&v| v == 0.0) {
        return Err(Error::NoLocalData);
    }
    let problem = LocalProblem::new(data, spec, state, slot);
    Ok(problem.sums(&w, m_at_t, None))
}

/// One Newton step `m - score/curvature` on the local likelihood, clipped
/// to `step_cap`.
pub fn local_m_update(
    data: &Dataset,
    spec: &ModelSpec,
    kernel: &KernelConfig,
    state: &FitState,
    k: CategoryIndex,
    t: &[f64],
    m_at_t: f64,
    step_cap: f64,
) -> Result<f64> {
    let s = local_smoothed_score(data, spec, kernel, state, k, t, m_at_t)?;
    if s.score == 0.0 {
        return Ok(m_at_t);
    }
    if !(s.curvature < 0.0) {
        return Err(Error::NumericalFailure(format!(
            "local curvature {} is not negative",
            s.curvature
        )));
    }
    let step = -s.score / s.curvature;
    Ok(m_at_t + step.clamp(-step_cap, step_cap))
}

/// Derivative of the local solution `m_k(t)` with respect to `β_k`:
/// `-(Σ w_i l″_ik x_i) / (Σ w_i l″_ik)`, evaluated at `m_at_t`.
pub fn m_gradient(
    data: &Dataset,
    spec: &ModelSpec,
    kernel: &KernelConfig,
    state: &FitState,
    k: CategoryIndex,
    t: &[f64],
    m_at_t: f64,
) -> Result<Vec<f64>> {
    let sm = Smoother::new(data, spec, kernel)?;
    sm.check_state(state)?;
    let slot = sm.slot(k)?;
    let w = sm.weights_at(&sm.query(t)?);
    let problem = LocalProblem::new(data, spec, state, slot);
    let mut cx = vec![0.0; data.p()];
    let s = problem.sums(&w, m_at_t, Some(&mut cx));
    if !(s.curvature < 0.0) {
        return Err(Error::NumericalFailure("zero curvature sum".into()));
    }
    Ok(cx.into_iter().map(|v| -v / s.curvature).collect())
}

/// Profile score `Σ_i l′_ik (x_i + m′_k(t_i))` and `𝓑` for category `k`.
pub fn profile_score(
    data: &Dataset,
    spec: &ModelSpec,
    kernel: &KernelConfig,
    state: &FitState,
    k: CategoryIndex,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let sm = Smoother::new(data, spec, kernel)?;
    sm.check_state(state)?;
    let slot = sm.slot(k)?;
    let problem = LocalProblem::new(data, spec, state, slot);
    let grad = sm.gradient_pass(&problem, slot)?;
    Ok(sm.profile_score(&problem, &grad))
}

/// One profile Newton step for category `k`.
pub fn beta_update(
    data: &Dataset,
    spec: &ModelSpec,
    kernel: &KernelConfig,
    state: &FitState,
    k: CategoryIndex,
    max_halvings: usize,
) -> Result<BetaStep> {
    let sm = Smoother::new(data, spec, kernel)?;
    sm.check_state(state)?;
    let slot = sm.slot(k)?;
    sm.beta_step(state, slot, max_halvings)
}

/// Starting values from a parametric MNL with intercepts and linear terms
/// in both covariate blocks: `β` takes the `x` slopes and `m_k(t_i)` the
/// intercept plus the linear `t` part.
pub fn starting_values(
    data: &Dataset,
    spec: &ModelSpec,
) -> Result<(FitState, ParametricFitResult)> {
    let design = parametric_design(data, true);
    let start = parametric::fit_design(&design, data.y(), spec, &FitOptions::default(), true)?;
    let coef = &start.coefficients.beta;
    let (n, p, q) = (data.n(), data.p(), data.q());
    let n_free = spec.n_free();
    let beta = DMatrix::from_fn(n_free, p, |s, d| coef[(s, 1 + d)]);
    let m = DMatrix::from_fn(n_free, n, |s, i| {
        coef[(s, 0)] + (0..q).map(|d| coef[(s, 1 + p + d)] * data.t()[(i, d)]).sum::<f64>()
    });
    Ok((FitState { beta, m }, start))
}

pub fn fit_semiparametric(
    data: &Dataset,
    spec: &ModelSpec,
    kernel: &KernelConfig,
    options: &ProfileOptions,
) -> Result<SemiparametricFitResult> {
    let sm = Smoother::new(data, spec, kernel)?;
    let (mut state, start) = starting_values(data, spec)?;
    fit_from(&sm, &mut state, start, kernel, options)
}

fn fit_from(
    sm: &Smoother,
    state: &mut FitState,
    start: ParametricFitResult,
    kernel: &KernelConfig,
    options: &ProfileOptions,
) -> Result<SemiparametricFitResult> {
    let n_free = sm.spec.n_free();
    let n = sm.data.n();
    // the first trace entry is the profile likelihood at the starting β
    sm.polish(state, options)?;
    let mut trace = vec![sm.loglik(state)];
    let mut converged = false;
    let mut iterations = 0;
    let mut warnings = Vec::new();
    let mut last_capped = 0;
    let mut stalled_beta = false;
    let mut max_local_score = f64::INFINITY;

    while iterations < options.max_iter {
        iterations += 1;
        let previous = state.clone();
        stalled_beta = false;
        for slot in 0..n_free {
            let step = sm.beta_step(state, slot, options.max_halvings)?;
            stalled_beta |= !step.accepted;
            for (d, v) in step.beta_row.iter().enumerate() {
                state.beta[(slot, d)] = *v;
            }
            for (i, v) in step.m_row.iter().enumerate() {
                state.m[(slot, i)] = *v;
            }
        }
        last_capped = 0;
        for slot in 0..n_free {
            let problem = LocalProblem::new(sm.data, sm.spec, state, slot);
            let (row, capped) = sm.smooth_pass(
                &problem,
                options.inner_max_iter,
                options.inner_tol,
                options.step_cap,
            )?;
            last_capped = last_capped.max(capped);
            for (i, v) in row.into_iter().enumerate() {
                state.m[(slot, i)] = v;
            }
        }
        if state.max_abs_diff(&previous) < options.tol {
            max_local_score = sm.polish(state, options)?;
            converged = sm.summary(state)?.score_norm < options.score_tol;
        }
        trace.push(sm.loglik(state));
        if converged {
            break;
        }
    }

    if last_capped * 10 > n {
        warnings.push(format!(
            "ill-conditioned: local step cap hit at {last_capped} of {n} observation points"
        ));
    }
    if stalled_beta {
        warnings.push("coefficient step rejected after all halvings in the last iteration".into());
    }
    if !converged {
        max_local_score = sm.worst_local_score(state);
    } else if max_local_score >= options.inner_tol {
        warnings.push(format!(
            "local scores not below inner_tol after polishing (max {max_local_score:.3e})"
        ));
    }
    let summary = sm.summary(state)?;

    Ok(SemiparametricFitResult {
        spec: *sm.spec,
        beta: CoefficientSet {
            beta: state.beta.clone(),
        },
        beta_se: summary.beta_se,
        smooth: SmoothState {
            m: state.m.clone(),
            m_grad: summary.m_grad,
        },
        loglik_trace: trace,
        converged,
        iterations,
        kernel: kernel.clone(),
        options: *options,
        profile_score_norm: summary.score_norm,
        max_local_score,
        warnings,
        start,
    })
}

/// Evaluates a fitted model at new points. Each smooth value is solved
/// from the local likelihood at the query point with the fitted
/// coefficients, starting from the nearest observation point.
pub struct Predictor<'a> {
    sm: Smoother<'a>,
    beta: DMatrix<f64>,
    m: DMatrix<f64>,
    problems: Vec<LocalProblem<'a>>,
    inner_tol: f64,
    step_cap: f64,
}

impl<'a> Predictor<'a> {
    pub fn new(
        data: &'a Dataset,
        spec: &'a ModelSpec,
        kernel: &KernelConfig,
        state: &FitState,
        options: &ProfileOptions,
    ) -> Result<Self> {
        let sm = Smoother::new(data, spec, kernel)?;
        sm.check_state(state)?;
        let problems = (0..spec.n_free())
            .map(|slot| LocalProblem::new(data, spec, state, slot))
            .collect();
        Ok(Self {
            sm,
            beta: state.beta.clone(),
            m: state.m.clone(),
            problems,
            inner_tol: options.inner_tol,
            step_cap: options.step_cap,
        })
    }

    pub fn from_fit(fit: &'a SemiparametricFitResult, data: &'a Dataset) -> Result<Self> {
        Self::new(data, &fit.spec, &fit.kernel, &fit.state(), &fit.options)
    }

    /// `m_k(t_new)` for every non-reference category, in slot order.
    pub fn smooth(&self, t_new: &[f64]) -> Result<Vec<f64>> {
        let u = self.sm.query(t_new)?;
        let w = self.sm.weights_at(&u);
        let mass: f64 = w.iter().sum();
        let nearest = self.sm.points.nearest(&u);
        self.problems
            .iter()
            .enumerate()
            .map(|(slot, problem)| {
                let (m, _) = problem.solve(
                    &w,
                    self.m[(slot, nearest)],
                    PREDICT_MAX_ITER,
                    self.inner_tol,
                    self.step_cap,
                )?;
                let s = problem.sums(&w, m, None);
                if !(s.score.abs() < self.inner_tol * mass) {
                    return Err(Error::NumericalFailure(format!(
                        "local solve at query point did not converge (score {:.3e})",
                        s.score
                    )));
                }
                Ok(m)
            })
            .collect()
    }

    /// Category probabilities at `(x_new, t_new)`.
    pub fn probabilities(&self, x_new: &[f64], t_new: &[f64]) -> Result<Vec<f64>> {
        let p = self.sm.data.p();
        if x_new.len() != p {
            return Err(Error::Shape(format!(
                "x has length {}, expected {p}",
                x_new.len()
            )));
        }
        if x_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("x must be finite".into()));
        }
        let m = self.smooth(t_new)?;
        let spec = self.sm.spec;
        let mut eta = vec![0.0; spec.n_categories];
        for (slot, k) in spec.free_categories().enumerate() {
            let xb: f64 = x_new
                .iter()
                .enumerate()
                .map(|(d, v)| v * self.beta[(slot, d)])
                .sum();
            eta[k.0] = xb + m[slot];
        }
        let mut probs = vec![0.0; eta.len()];
        softmax_into(&eta, &mut probs);
        Ok(probs)
    }
}

const PREDICT_MAX_ITER: usize = 500;

/// `m_k(t_new)` for every non-reference category; see [`Predictor`].
pub fn predict_smooth(
    fit: &SemiparametricFitResult,
    data: &Dataset,
    t_new: &[f64],
) -> Result<Vec<f64>> {
    Predictor::from_fit(fit, data)?.smooth(t_new)
}

/// Category probabilities at `(x_new, t_new)`; see [`Predictor`].
pub fn predict_probabilities(
    fit: &SemiparametricFitResult,
    data: &Dataset,
    x_new: &[f64],
    t_new: &[f64],
) -> Result<Vec<f64>> {
    Predictor::from_fit(fit, data)?.probabilities(x_new, t_new)
}
