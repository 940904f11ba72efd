//! Product kernels with a diagonal bandwidth matrix.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    #[default]
    Gaussian,
}

/// Kernel family plus the diagonal of the bandwidth matrix `H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub family: KernelFamily,
    pub bandwidths: Vec<f64>,
}

impl KernelConfig {
    pub fn gaussian(bandwidths: Vec<f64>) -> Result<Self> {
        let config = Self {
            family: KernelFamily::Gaussian,
            bandwidths,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bandwidths.is_empty() {
            return Err(Error::Config("kernel needs at least one bandwidth".into()));
        }
        if let Some(h) = self
            .bandwidths
            .iter()
            .find(|h| !(h.is_finite() && **h > 0.0))
        {
            return Err(Error::Config(format!(
                "bandwidths must be positive and finite, got {h}"
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.bandwidths.len()
    }

    /// `(det H)^{-1} K(H^{-1}(t - ti))`.
    pub fn weight(&self, t: &[f64], ti: &[f64]) -> Result<f64> {
        self.validate()?;
        if t.len() != self.dim() || ti.len() != self.dim() {
            return Err(Error::Shape(format!(
                "kernel dimension {} but points have length {} and {}",
                self.dim(),
                t.len(),
                ti.len()
            )));
        }
        let sq: f64 = t
            .iter()
            .zip(ti)
            .zip(&self.bandwidths)
            .map(|((a, b), h)| {
                let z = (a - b) / h;
                z * z
            })
            .sum();
        Ok(self.normalizer() * (-0.5 * sq).exp())
    }

    /// `1 / (Π h_d · (2π)^{q/2})`.
    pub fn normalizer(&self) -> f64 {
        match self.family {
            KernelFamily::Gaussian => {
                let det: f64 = self.bandwidths.iter().product();
                let gauss = (2.0 * std::f64::consts::PI).powf(self.dim() as f64 / 2.0);
                1.0 / (det * gauss)
            }
        }
    }
}

/// Observation points pre-scaled by the inverse bandwidths, row-major.
/// Kernel weights between scaled points reduce to a single exponential.
#[derive(Debug, Clone)]
pub(crate) struct ScaledPoints {
    coords: Vec<f64>,
    q: usize,
    inv_h: Vec<f64>,
    norm: f64,
}

impl ScaledPoints {
    pub fn new(t: &DMatrix<f64>, kernel: &KernelConfig) -> Result<Self> {
        kernel.validate()?;
        let q = t.ncols();
        if q != kernel.dim() {
            return Err(Error::Shape(format!(
                "kernel has {} bandwidths but data has {} smooth covariates",
                kernel.dim(),
                q
            )));
        }
        let inv_h: Vec<f64> = kernel.bandwidths.iter().map(|h| 1.0 / h).collect();
        let mut coords = Vec::with_capacity(t.nrows() * q);
        for i in 0..t.nrows() {
            for d in 0..q {
                coords.push(t[(i, d)] * inv_h[d]);
            }
        }
        Ok(Self {
            coords,
            q,
            inv_h,
            norm: kernel.normalizer(),
        })
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.q..(i + 1) * self.q]
    }

    pub fn scale(&self, t: &[f64]) -> Vec<f64> {
        t.iter().zip(&self.inv_h).map(|(v, s)| v * s).collect()
    }

    /// Weights of every observation relative to the scaled query `u`.
    pub fn weights_into(&self, u: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.coords.chunks_exact(self.q).map(|ui| {
            let sq: f64 = ui
                .iter()
                .zip(u)
                .map(|(a, b)| {
                    let z = a - b;
                    z * z
                })
                .sum();
            self.norm * (-0.5 * sq).exp()
        }));
    }

    /// Index of the observation nearest to the scaled query.
    pub fn nearest(&self, u: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, ui) in self.coords.chunks_exact(self.q).enumerate() {
            let d: f64 = ui.iter().zip(u).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }
}

fn sample_sd(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1.0)).sqrt()
}

/// Bandwidths equal to `scale` times each column's sample standard
/// deviation (`n - 1` denominator).
pub fn bandwidth_from_scale(t: &DMatrix<f64>, scale: f64) -> Result<KernelConfig> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Config(format!("scale must be positive, got {scale}")));
    }
    if t.nrows() < 2 {
        return Err(Error::InsufficientData(
            "bandwidth selection needs at least 2 rows".into(),
        ));
    }
    if t.ncols() == 0 {
        return Err(Error::Config("no smooth covariates".into()));
    }
    let mut bandwidths = Vec::with_capacity(t.ncols());
    for (d, col) in t.column_iter().enumerate() {
        let sd = sample_sd(col.iter().copied());
        if !(sd > 0.0) {
            return Err(Error::DegenerateCovariate { column: d });
        }
        bandwidths.push(scale * sd);
    }
    KernelConfig::gaussian(bandwidths)
}

/// Evenly spaced scales on `[lo, hi]`, inclusive.
pub fn grid_scales(lo: f64, hi: f64, steps: usize) -> Result<Vec<f64>> {
    if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) || steps == 0 {
        return Err(Error::Config(format!(
            "invalid bandwidth grid lo={lo} hi={hi} steps={steps}"
        )));
    }
    if steps == 1 {
        return Ok(vec![lo]);
    }
    let width = hi - lo;
    let last = (steps - 1) as f64;
    Ok((0..steps)
        .map(|s| if s == steps - 1 { hi } else { lo + width * s as f64 / last })
        .collect())
}

/// One kernel per grid scale, each built with [`bandwidth_from_scale`].
pub fn bandwidth_grid(
    t: &DMatrix<f64>,
    lo: f64,
    hi: f64,
    steps: usize,
) -> Result<Vec<(f64, KernelConfig)>> {
    grid_scales(lo, hi, steps)?
        .into_iter()
        .map(|s| bandwidth_from_scale(t, s).map(|k| (s, k)))
        .collect()
}
