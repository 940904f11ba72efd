//! Synthetic data from known parametric and semiparametric MNL processes.
//!
//! Random streams: one ChaCha8 generator per purpose, all seeded from the
//! same `seed`. Parametric covariate column `d` draws from stream `d`,
//! smooth column `d` from stream `1000 + d`, and responses from stream
//! `u32::MAX`. Replication `r` of a study uses [`replication_seed`].

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{softmax_into, Dataset, ModelSpec};

const SMOOTH_STREAM_BASE: u64 = 1000;
const RESPONSE_STREAM: u64 = u32::MAX as u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SmoothFunction {
    Zero,
    /// `a + bᵗt`; missing entries of `b` are zero.
    Linear { a: f64, b: Vec<f64> },
    /// `amplitude · sin(frequency · t₁)`.
    Sine { amplitude: f64, frequency: f64 },
    /// `a · t₁ · t₂`.
    RidgeInteraction { a: f64 },
}

impl SmoothFunction {
    pub fn eval(&self, t: &[f64]) -> f64 {
        match self {
            SmoothFunction::Zero => 0.0,
            SmoothFunction::Linear { a, b } => a + b.iter().zip(t).map(|(b, t)| b * t).sum::<f64>(),
            SmoothFunction::Sine {
                amplitude,
                frequency,
            } => amplitude * (frequency * t[0]).sin(),
            SmoothFunction::RidgeInteraction { a } => a * t[0] * t[1],
        }
    }

    fn validate(&self, q: usize) -> Result<()> {
        let finite = match self {
            SmoothFunction::Zero => true,
            SmoothFunction::Linear { a, b } => {
                if b.len() > q {
                    return Err(Error::Config(format!(
                        "linear smooth function has {} slopes for {q} smooth covariates",
                        b.len()
                    )));
                }
                a.is_finite() && b.iter().all(|v| v.is_finite())
            }
            SmoothFunction::Sine {
                amplitude,
                frequency,
            } => {
                if q < 1 {
                    return Err(Error::Config("sine needs a smooth covariate".into()));
                }
                amplitude.is_finite() && frequency.is_finite()
            }
            SmoothFunction::RidgeInteraction { a } => {
                if q < 2 {
                    return Err(Error::Config(
                        "ridge-interaction needs two smooth covariates".into(),
                    ));
                }
                a.is_finite()
            }
        };
        if finite {
            Ok(())
        } else {
            Err(Error::Config("smooth function parameters must be finite".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "kebab-case")]
pub enum CovariateLaw {
    Uniform { lo: f64, hi: f64 },
    Normal { mu: f64, sd: f64 },
    Bernoulli { p: f64 },
    /// `exp(N(mu, sigma²))`, a right-skewed income-like law.
    Lognormal { mu: f64, sigma: f64 },
}

impl CovariateLaw {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            CovariateLaw::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo < hi,
            CovariateLaw::Normal { mu, sd } => mu.is_finite() && sd.is_finite() && sd > 0.0,
            CovariateLaw::Bernoulli { p } => (0.0..=1.0).contains(&p),
            CovariateLaw::Lognormal { mu, sigma } => {
                mu.is_finite() && sigma.is_finite() && sigma > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid covariate law {self:?}")))
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            CovariateLaw::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            CovariateLaw::Normal { mu, sd } => Normal::new(mu, sd).expect("validated").sample(rng),
            CovariateLaw::Bernoulli { p } => (rng.random::<f64>() < p) as u8 as f64,
            CovariateLaw::Lognormal { mu, sigma } => {
                LogNormal::new(mu, sigma).expect("validated").sample(rng)
            }
        }
    }
}

/// A fully known data-generating process. The last category is the
/// reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub n_categories: usize,
    /// `K - 1` rows of `p` coefficients.
    pub beta: Vec<Vec<f64>>,
    /// `K - 1` smooth functions of `t`.
    pub smooth: Vec<SmoothFunction>,
    pub x_laws: Vec<CovariateLaw>,
    pub t_laws: Vec<CovariateLaw>,
    pub n: usize,
    /// Replaced by the run seed when the spec comes from a run config.
    #[serde(default)]
    pub seed: u64,
}

impl DgpSpec {
    pub fn p(&self) -> usize {
        self.x_laws.len()
    }
    pub fn q(&self) -> usize {
        self.t_laws.len()
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        ModelSpec::with_last_reference(self.n_categories)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_categories < 2 {
            return Err(Error::Config("a DGP needs at least 2 categories".into()));
        }
        if self.n == 0 {
            return Err(Error::Config("a DGP needs n >= 1".into()));
        }
        let n_free = self.n_categories - 1;
        if self.beta.len() != n_free || self.smooth.len() != n_free {
            return Err(Error::Config(format!(
                "need {n_free} coefficient rows and smooth functions, got {} and {}",
                self.beta.len(),
                self.smooth.len()
            )));
        }
        for row in &self.beta {
            if row.len() != self.p() || row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!(
                    "coefficient rows must hold {} finite values",
                    self.p()
                )));
            }
        }
        for f in &self.smooth {
            f.validate(self.q())?;
        }
        for law in self.x_laws.iter().chain(&self.t_laws) {
            law.validate()?;
        }
        Ok(())
    }

    /// Free-slot predictors `x ᵗβ_k + m_k(t)`.
    pub fn predictors(&self, x: &[f64], t: &[f64]) -> Vec<f64> {
        self.beta
            .iter()
            .zip(&self.smooth)
            .map(|(b, f)| b.iter().zip(x).map(|(b, x)| b * x).sum::<f64>() + f.eval(t))
            .collect()
    }

    /// True category probabilities at `(x, t)`.
    pub fn probabilities(&self, x: &[f64], t: &[f64]) -> Vec<f64> {
        let mut eta = self.predictors(x, t);
        eta.push(0.0);
        let mut probs = vec![0.0; eta.len()];
        softmax_into(&eta, &mut probs);
        probs
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Seed for replication `r` of a study seeded with `base` (SplitMix64).
pub fn replication_seed(base: u64, r: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(r.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn simulate(spec: &DgpSpec) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.n;
    let draw_columns = |laws: &[CovariateLaw], base: u64| {
        let mut m = DMatrix::zeros(n, laws.len());
        for (d, law) in laws.iter().enumerate() {
            let mut rng = stream(spec.seed, base + d as u64);
            for i in 0..n {
                m[(i, d)] = law.draw(&mut rng);
            }
        }
        m
    };
    let x = draw_columns(&spec.x_laws, 0);
    let t = draw_columns(&spec.t_laws, SMOOTH_STREAM_BASE);

    let mut rng = stream(spec.seed, RESPONSE_STREAM);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let xi: Vec<f64> = x.row(i).iter().copied().collect();
        let ti: Vec<f64> = t.row(i).iter().copied().collect();
        let probs = spec.probabilities(&xi, &ti);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = probs.len() - 1;
        for (j, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                k = j;
                break;
            }
        }
        y.push(k);
    }
    Dataset::new(y, x, t, spec.n_categories)
}
