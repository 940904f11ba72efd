//! Semiparametric multinomial logit estimation.
//!
//! The category predictor combines linear effects of parametric covariates
//! with unknown smooth functions of the remaining ones. The smooth
//! functions are estimated by kernel-weighted local likelihood, and the
//! coefficients by Newton–Raphson on the resulting profile likelihood. A
//! fully parametric fitter, tests of independence of irrelevant
//! alternatives, synthetic data generators and a file-based pipeline
//! complete the crate.

pub mod error;
pub mod iia;
pub mod io;
pub mod kernel;
mod linalg;
pub mod model;
pub mod oracle;
pub mod parametric;
pub mod profile;
pub mod special;
pub mod synth;

pub use error::{Error, Result};
pub use kernel::{bandwidth_from_scale, bandwidth_grid, KernelConfig, KernelFamily};
pub use model::{
    log_likelihood_contribution, score_and_curvature, softmax_probabilities, CategoryIndex,
    CoefficientSet, Dataset, LinearPredictor, ModelSpec, Observation,
};
pub use parametric::{fit_parametric, FitOptions, ParametricFitResult};
pub use profile::{
    fit_semiparametric, predict_probabilities, FitState, Predictor, ProfileOptions,
    SemiparametricFitResult,
};
pub use iia::{hausman_mcfadden, iia_all_permutations, small_hsiao, IiaMethod, IiaTestResult};
pub use synth::{simulate, CovariateLaw, DgpSpec, SmoothFunction};
