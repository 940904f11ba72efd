//! Tests of independence of irrelevant alternatives for the parametric
//! MNL: Hausman–McFadden and Small–Hsiao.
//!
//! Both compare the model fitted on all categories with the model fitted
//! after removing the observations of one category. The restricted model
//! keeps the same reference, so the coefficients of every category other
//! than the dropped one and the reference are shared and estimate the same
//! quantities under the null.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::symmetric_pinv;
use crate::model::{CategoryIndex, Dataset, ModelSpec};
use crate::parametric::{design_log_likelihood, fit_design, parametric_design, FitOptions};
use crate::special::chi_square_sf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IiaMethod {
    #[serde(rename = "hausman-mcfadden")]
    HausmanMcFadden,
    SmallHsiao,
}

impl std::fmt::Display for IiaMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            IiaMethod::HausmanMcFadden => "hausman-mcfadden",
            IiaMethod::SmallHsiao => "small-hsiao",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IiaTestResult {
    /// Reported as computed; a Hausman statistic can be negative when the
    /// covariance difference is indefinite.
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub dropped_category: CategoryIndex,
    pub method: IiaMethod,
    pub note: Option<String>,
}

/// One entry of a batch over dropped categories.
#[derive(Debug)]
pub struct IiaEntry {
    pub dropped_category: CategoryIndex,
    pub outcome: Result<IiaTestResult>,
}

/// The sample without one category, recoded to `K - 1` categories.
struct Restriction {
    data: Dataset,
    spec: ModelSpec,
    /// For each restricted slot, the slot of the same category in the full
    /// model.
    full_slot: Vec<usize>,
}

fn restrict(data: &Dataset, spec: &ModelSpec, drop: CategoryIndex) -> Result<Restriction> {
    let k = spec.n_categories;
    if k < 3 {
        return Err(Error::Config(format!(
            "IIA tests need at least 3 categories, got {k}"
        )));
    }
    if drop.0 >= k {
        return Err(Error::Config(format!(
            "dropped category {} is out of range for {k} categories",
            drop.0
        )));
    }
    if drop == spec.reference {
        return Err(Error::Config(
            "the reference category cannot be dropped".into(),
        ));
    }
    let recode = |c: usize| if c > drop.0 { c - 1 } else { c };
    let keep: Vec<usize> = (0..data.n()).filter(|&i| data.y()[i] != drop).collect();
    let subset = data.subset(&keep)?;
    let y: Vec<usize> = subset.y().iter().map(|c| recode(c.0)).collect();
    let restricted = Dataset::new(y, subset.x().clone(), subset.t().clone(), k - 1)?;
    let r_spec = ModelSpec::new(k - 1, recode(spec.reference.0))?;
    let full_slot = r_spec
        .free_categories()
        .map(|c| {
            let original = if c.0 >= drop.0 { c.0 + 1 } else { c.0 };
            spec.slot(CategoryIndex(original)).expect("not the reference")
        })
        .collect();
    Ok(Restriction {
        data: restricted,
        spec: r_spec,
        full_slot,
    })
}

fn fit(data: &Dataset, spec: &ModelSpec, options: &FitOptions) -> Result<crate::parametric::ParametricFitResult> {
    data.check_spec(spec)?;
    let result = fit_design(&parametric_design(data, false), data.y(), spec, options, true)?;
    if !result.converged {
        return Err(Error::NumericalFailure(format!(
            "parametric fit did not converge (score max-norm {:.3e})",
            result.score_norm
        )));
    }
    Ok(result)
}

/// Hausman–McFadden statistic `dᵗ(V_r − V_f)⁻¹d` over the shared
/// coefficients (intercepts and slopes).
pub fn hausman_mcfadden(
    data: &Dataset,
    spec: &ModelSpec,
    drop: CategoryIndex,
    options: &FitOptions,
) -> Result<IiaTestResult> {
    let r = restrict(data, spec, drop)?;
    let full = fit(data, spec, options)?;
    let restricted = fit(&r.data, &r.spec, options)?;
    let width = data.p() + 1;
    let idx: Vec<(usize, usize)> = r
        .full_slot
        .iter()
        .enumerate()
        .flat_map(|(rs, &fs)| (0..width).map(move |c| (rs * width + c, fs * width + c)))
        .collect();
    let dim = idx.len();
    let d = DVector::from_fn(dim, |a, _| {
        let (ri, fi) = idx[a];
        restricted.coefficients.beta[(ri / width, ri % width)]
            - full.coefficients.beta[(fi / width, fi % width)]
    });
    let diff = DMatrix::from_fn(dim, dim, |a, b| {
        restricted.vcov[(idx[a].0, idx[b].0)] - full.vcov[(idx[a].1, idx[b].1)]
    });
    let (statistic, note) = hausman_statistic(&d, &diff);
    Ok(IiaTestResult {
        statistic,
        df: dim,
        p_value: chi_square_sf(statistic, dim),
        dropped_category: drop,
        method: IiaMethod::HausmanMcFadden,
        note,
    })
}

/// `dᵗV⁻¹d`, falling back to the Moore–Penrose inverse (with a note) when
/// `V` is not positive definite.
pub fn hausman_statistic(d: &DVector<f64>, v: &DMatrix<f64>) -> (f64, Option<String>) {
    match v.clone().cholesky() {
        Some(chol) => (d.dot(&chol.solve(d)), None),
        None => {
            let (pinv, rank, positive) = symmetric_pinv(v);
            let kind = if positive { "singular" } else { "indefinite" };
            (
                d.dot(&(&pinv * d)),
                Some(format!(
                    "covariance difference is {kind}; generalized inverse of rank {rank} of {} used",
                    v.nrows()
                )),
            )
        }
    }
}

/// Indices of the two halves of a seeded random split; half A gets
/// `n / 2` observations.
pub fn half_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut b = idx.split_off(n / 2);
    let mut a = idx;
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

/// Small–Hsiao statistic `−2(L_B(β^{AB}) − L_B(β̂_B^r))` on the restricted
/// half-B sample, with `β^{AB} = β^A/√2 + (1 − 1/√2)β^B`.
pub fn small_hsiao(
    data: &Dataset,
    spec: &ModelSpec,
    drop: CategoryIndex,
    seed: u64,
    options: &FitOptions,
) -> Result<IiaTestResult> {
    restrict(data, spec, drop)?;
    let (a_idx, b_idx) = half_split(data.n(), seed);
    let half_a = data.subset(&a_idx)?;
    let half_b = data.subset(&b_idx)?;
    let fit_a = fit(&half_a, spec, options)?;
    let fit_b = fit(&half_b, spec, options)?;
    let w = std::f64::consts::FRAC_1_SQRT_2;
    let combined = &fit_a.coefficients.beta * w + &fit_b.coefficients.beta * (1.0 - w);

    let r = restrict(&half_b, spec, drop)?;
    let restricted = fit(&r.data, &r.spec, options)?;
    let width = data.p() + 1;
    let shared = DMatrix::from_fn(r.spec.n_free(), width, |rs, c| combined[(r.full_slot[rs], c)]);
    let design = parametric_design(&r.data, false);
    let at_combined = design_log_likelihood(&design, r.data.y(), &r.spec, &shared);
    let statistic = -2.0 * (at_combined - restricted.loglik);
    let df = r.spec.n_free() * width;
    Ok(IiaTestResult {
        statistic,
        df,
        p_value: chi_square_sf(statistic, df),
        dropped_category: drop,
        method: IiaMethod::SmallHsiao,
        note: None,
    })
}

/// Run `method` once for every non-reference category. Failures are kept
/// per entry.
pub fn iia_all_permutations(
    data: &Dataset,
    spec: &ModelSpec,
    method: IiaMethod,
    seed: u64,
    options: &FitOptions,
) -> Result<Vec<IiaEntry>> {
    if spec.n_categories < 3 {
        return Err(Error::Config(format!(
            "IIA tests need at least 3 categories, got {}",
            spec.n_categories
        )));
    }
    data.check_spec(spec)?;
    let drops: Vec<CategoryIndex> = spec.free_categories().collect();
    Ok(drops
        .into_par_iter()
        .map(|drop| IiaEntry {
            dropped_category: drop,
            outcome: match method {
                IiaMethod::HausmanMcFadden => hausman_mcfadden(data, spec, drop, options),
                IiaMethod::SmallHsiao => small_hsiao(data, spec, drop, seed, options),
            },
        })
        .collect())
}
