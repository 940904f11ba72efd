//! Multinomial logit probability model.
//!
//! Categories are indexed from zero. One category is the reference: its
//! coefficient row and smooth-function row are identically zero and are
//! never stored, so a model with `K` categories carries `K - 1` free rows.
//! Free rows are laid out in increasing category order with the reference
//! skipped ("slots").

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a response category, `0..K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CategoryIndex(pub usize);

impl CategoryIndex {
    pub fn get(self) -> usize {
        self.0
    }
}

impl std::fmt::Display for CategoryIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Number of categories and which of them is the reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_categories: usize,
    pub reference: CategoryIndex,
}

impl ModelSpec {
    pub fn new(n_categories: usize, reference: usize) -> Result<Self> {
        if n_categories < 2 {
            return Err(Error::Config(format!(
                "need at least 2 categories, got {n_categories}"
            )));
        }
        if reference >= n_categories {
            return Err(Error::Config(format!(
                "reference category {reference} out of range 0..{n_categories}"
            )));
        }
        Ok(Self {
            n_categories,
            reference: CategoryIndex(reference),
        })
    }

    /// Reference category is the last one.
    pub fn with_last_reference(n_categories: usize) -> Result<Self> {
        Self::new(n_categories, n_categories.saturating_sub(1))
    }

    pub fn n_free(&self) -> usize {
        self.n_categories - 1
    }

    /// Non-reference categories in slot order.
    pub fn free_categories(&self) -> impl Iterator<Item = CategoryIndex> + '_ {
        (0..self.n_categories)
            .filter(move |&k| k != self.reference.0)
            .map(CategoryIndex)
    }

    /// Slot of a non-reference category, `None` for the reference.
    pub fn slot(&self, k: CategoryIndex) -> Option<usize> {
        use std::cmp::Ordering::*;
        match k.0.cmp(&self.reference.0) {
            Less => Some(k.0),
            Equal => None,
            Greater => Some(k.0 - 1),
        }
    }

    pub fn category_of_slot(&self, slot: usize) -> CategoryIndex {
        if slot < self.reference.0 {
            CategoryIndex(slot)
        } else {
            CategoryIndex(slot + 1)
        }
    }
}

/// One row of a [`Dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub y: CategoryIndex,
    pub x: Vec<f64>,
    pub t: Vec<f64>,
}

/// `n` observations of (response, parametric covariates `x ∈ ℝ^p`, smooth
/// covariates `t ∈ ℝ^q`). Validated on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<CategoryIndex>,
    x: DMatrix<f64>,
    t: DMatrix<f64>,
    n_categories: usize,
}

impl Dataset {
    pub fn new(
        y: Vec<usize>,
        x: DMatrix<f64>,
        t: DMatrix<f64>,
        n_categories: usize,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if x.nrows() != n || t.nrows() != n {
            return Err(Error::Shape(format!(
                "{} responses but x has {} rows and t has {} rows",
                n,
                x.nrows(),
                t.nrows()
            )));
        }
        if let Some(bad) = y.iter().find(|&&k| k >= n_categories) {
            return Err(Error::Config(format!(
                "response category {bad} out of range 0..{n_categories}"
            )));
        }
        if x.iter().chain(t.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Shape("covariates must be finite".into()));
        }
        Ok(Self {
            y: y.into_iter().map(CategoryIndex).collect(),
            x,
            t,
            n_categories,
        })
    }

    pub fn from_observations(obs: &[Observation], n_categories: usize) -> Result<Self> {
        let n = obs.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let p = obs[0].x.len();
        let q = obs[0].t.len();
        if obs.iter().any(|o| o.x.len() != p || o.t.len() != q) {
            return Err(Error::Shape("ragged observation rows".into()));
        }
        let x = DMatrix::from_fn(n, p, |i, j| obs[i].x[j]);
        let t = DMatrix::from_fn(n, q, |i, j| obs[i].t[j]);
        Self::new(obs.iter().map(|o| o.y.0).collect(), x, t, n_categories)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
    pub fn p(&self) -> usize {
        self.x.ncols()
    }
    pub fn q(&self) -> usize {
        self.t.ncols()
    }
    pub fn n_categories(&self) -> usize {
        self.n_categories
    }
    pub fn y(&self) -> &[CategoryIndex] {
        &self.y
    }
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    pub fn t(&self) -> &DMatrix<f64> {
        &self.t
    }

    pub fn observation(&self, i: usize) -> Observation {
        Observation {
            y: self.y[i],
            x: self.x.row(i).iter().copied().collect(),
            t: self.t.row(i).iter().copied().collect(),
        }
    }

    pub fn category_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_categories];
        for k in &self.y {
            counts[k.0] += 1;
        }
        counts
    }

    /// Rows selected by `keep`, with the same category coding.
    pub fn subset(&self, keep: &[usize]) -> Result<Self> {
        let x = DMatrix::from_fn(keep.len(), self.p(), |i, j| self.x[(keep[i], j)]);
        let t = DMatrix::from_fn(keep.len(), self.q(), |i, j| self.t[(keep[i], j)]);
        Self::new(
            keep.iter().map(|&i| self.y[i].0).collect(),
            x,
            t,
            self.n_categories,
        )
    }

    pub fn check_spec(&self, spec: &ModelSpec) -> Result<()> {
        if spec.n_categories != self.n_categories {
            return Err(Error::Shape(format!(
                "model has {} categories, dataset has {}",
                spec.n_categories, self.n_categories
            )));
        }
        Ok(())
    }
}

/// Log-odds predictor over all `K` categories.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPredictor(Vec<f64>);

impl LinearPredictor {
    pub fn new(eta: Vec<f64>) -> Result<Self> {
        if eta.len() < 2 {
            return Err(Error::InvalidPredictor(format!(
                "need at least 2 entries, got {}",
                eta.len()
            )));
        }
        if eta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPredictor("non-finite entry".into()));
        }
        Ok(Self(eta))
    }

    /// Expand `K - 1` free values into a full predictor with a zero at the
    /// reference position.
    pub fn from_free(free: &[f64], spec: &ModelSpec) -> Result<Self> {
        if free.len() != spec.n_free() {
            return Err(Error::Shape(format!(
                "expected {} free entries, got {}",
                spec.n_free(),
                free.len()
            )));
        }
        let mut eta = vec![0.0; spec.n_categories];
        for (slot, k) in spec.free_categories().enumerate() {
            eta[k.0] = free[slot];
        }
        Self::new(eta)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Coefficient matrix with one row per non-reference category (slot order).
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    pub beta: DMatrix<f64>,
}

impl CoefficientSet {
    pub fn zeros(n_free: usize, p: usize) -> Self {
        Self {
            beta: DMatrix::zeros(n_free, p),
        }
    }

    pub fn n_free(&self) -> usize {
        self.beta.nrows()
    }
    pub fn p(&self) -> usize {
        self.beta.ncols()
    }

    /// Row for category `k`; zero for the reference.
    pub fn row_for(&self, spec: &ModelSpec, k: CategoryIndex) -> Vec<f64> {
        match spec.slot(k) {
            Some(s) => self.beta.row(s).iter().copied().collect(),
            None => vec![0.0; self.p()],
        }
    }
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Max-subtracted softmax, unchecked.
pub(crate) fn softmax_into(eta: &[f64], out: &mut [f64]) {
    let max = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &e) in out.iter_mut().zip(eta) {
        *o = (e - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Category probabilities `exp(η_k) / Σ_j exp(η_j)`.
pub fn softmax_probabilities(eta: &LinearPredictor) -> Vec<f64> {
    let mut out = vec![0.0; eta.len()];
    softmax_into(eta.as_slice(), &mut out);
    out
}

fn check_category(eta: &LinearPredictor, k: CategoryIndex) -> Result<()> {
    if k.0 >= eta.len() {
        return Err(Error::InvalidPredictor(format!(
            "category {} out of range 0..{}",
            k.0,
            eta.len()
        )));
    }
    Ok(())
}

/// `log P(Y = y | η)`.
pub fn log_likelihood_contribution(eta: &LinearPredictor, y: CategoryIndex) -> Result<f64> {
    check_category(eta, y)?;
    let e = eta.as_slice();
    Ok(e[y.0] - log_sum_exp(e))
}

/// First and second derivative of the log-likelihood contribution with
/// respect to `η_k`: `(I{y=k} - p_k, -p_k (1 - p_k))`.
pub fn score_and_curvature(
    eta: &LinearPredictor,
    y: CategoryIndex,
    k: CategoryIndex,
) -> Result<(f64, f64)> {
    check_category(eta, y)?;
    check_category(eta, k)?;
    let probs = softmax_probabilities(eta);
    let pk = probs[k.0];
    // 1 - p_k summed from the other entries keeps precision when p_k ≈ 1.
    let rest: f64 = probs
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != k.0)
        .map(|(_, p)| p)
        .sum();
    let indicator = if y == k { 1.0 } else { 0.0 };
    Ok((indicator - pk, -pk * rest))
}

/// Full-sample log-likelihood for free-slot predictors stored as a
/// `(K-1) × n` matrix.
pub(crate) fn total_log_likelihood(eta_free: &DMatrix<f64>, y: &[CategoryIndex], spec: &ModelSpec) -> f64 {
    let mut eta = vec![0.0; spec.n_categories];
    // Neumaier summation keeps step-halving comparisons meaningful near the
    // optimum, where gains approach the rounding level of a plain sum
    let (mut total, mut carry) = (0.0f64, 0.0f64);
    for (i, yi) in y.iter().enumerate() {
        for (slot, k) in spec.free_categories().enumerate() {
            eta[k.0] = eta_free[(slot, i)];
        }
        eta[spec.reference.0] = 0.0;
        let term = eta[yi.0] - log_sum_exp(&eta);
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

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn uniform_softmax() {
        let eta = LinearPredictor::new(vec![0.0; 5]).unwrap();
        for p in softmax_probabilities(&eta) {
            assert_abs_diff_eq!(p, 0.2, epsilon = 1e-15);
        }
    }

    #[test]
    fn binary_softmax() {
        let eta = LinearPredictor::new(vec![2f64.ln(), 0.0]).unwrap();
        let p = softmax_probabilities(&eta);
        assert_abs_diff_eq!(p[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn extreme_predictor_does_not_overflow() {
        let eta = LinearPredictor::new(vec![700.0, -700.0, 0.0]).unwrap();
        let p = softmax_probabilities(&eta);
        assert!(p.iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            LinearPredictor::new(vec![0.0, f64::NAN]),
            Err(Error::InvalidPredictor(_))
        ));
        assert!(LinearPredictor::new(vec![1.0]).is_err());
    }

    #[test]
    fn loglik_uniform() {
        let eta = LinearPredictor::new(vec![0.0; 5]).unwrap();
        for y in 0..5 {
            let l = log_likelihood_contribution(&eta, CategoryIndex(y)).unwrap();
            assert_abs_diff_eq!(l, -(5f64.ln()), epsilon = 1e-15);
        }
        let eta = LinearPredictor::new(vec![0.0; 2]).unwrap();
        let l = log_likelihood_contribution(&eta, CategoryIndex(0)).unwrap();
        assert_abs_diff_eq!(l, -(2f64.ln()), epsilon = 1e-15);
    }

    #[test]
    fn score_curvature_examples() {
        let eta = LinearPredictor::new(vec![0.0, 0.0]).unwrap();
        let (s, c) = score_and_curvature(&eta, CategoryIndex(0), CategoryIndex(0)).unwrap();
        assert_abs_diff_eq!(s, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(c, -0.25, epsilon = 1e-15);

        let eta = LinearPredictor::new(vec![0.0; 4]).unwrap();
        let (s, c) = score_and_curvature(&eta, CategoryIndex(2), CategoryIndex(0)).unwrap();
        assert_abs_diff_eq!(s, -0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(c, -0.1875, epsilon = 1e-15);
    }

    #[test]
    fn slots_skip_reference() {
        let spec = ModelSpec::new(4, 1).unwrap();
        let cats: Vec<_> = spec.free_categories().map(|c| c.0).collect();
        assert_eq!(cats, vec![0, 2, 3]);
        assert_eq!(spec.slot(CategoryIndex(1)), None);
        assert_eq!(spec.slot(CategoryIndex(3)), Some(2));
        for s in 0..3 {
            assert_eq!(spec.slot(spec.category_of_slot(s)), Some(s));
        }
    }

    #[test]
    fn dataset_validation() {
        let x = DMatrix::zeros(2, 1);
        let t = DMatrix::zeros(2, 1);
        assert!(matches!(
            Dataset::new(vec![0, 3], x.clone(), t.clone(), 2),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            Dataset::new(vec![0], x, t, 2),
            Err(Error::Shape(_))
        ));
    }
}
