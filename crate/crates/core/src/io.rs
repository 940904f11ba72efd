//! Run configuration, CSV ingestion and the file artifacts behind each CLI
//! command.
//!
//! Numbers are written with 17 significant digits so every artifact can be
//! read back bit-for-bit. The run manifest is TOML.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iia::{hausman_mcfadden, small_hsiao, IiaMethod, IiaTestResult};
use crate::kernel::{bandwidth_from_scale, grid_scales, KernelConfig};
use crate::model::{CategoryIndex, Dataset, ModelSpec};
use crate::parametric::{fit_parametric, FitOptions, ParametricFitResult};
use crate::profile::{fit_semiparametric, FitState, Predictor, ProfileOptions, SemiparametricFitResult};
use crate::special::normal_two_sided_p;
use crate::synth::{simulate, DgpSpec};

pub const DEFAULT_SCALE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transform {
    None,
    Log,
    DivideBy(f64),
    /// Keep the column and append its square as an extra parametric
    /// covariate.
    SquareAugment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// CSV file, relative to the config file. Without it the `[simulate]`
    /// section supplies the data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(default = "default_response")]
    pub response: String,
    #[serde(default)]
    pub parametric: Vec<String>,
    #[serde(default)]
    pub smooth: Vec<String>,
    /// Category labels in index order; otherwise first appearance decides.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
    /// Reference label; defaults to the last category.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default)]
    pub transforms: BTreeMap<String, Vec<Transform>>,
    /// Value substituted for a missing entry of the named column.
    #[serde(default)]
    pub impute: BTreeMap<String, f64>,
}

fn default_response() -> String {
    "y".into()
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            input: None,
            response: default_response(),
            parametric: Vec::new(),
            smooth: Vec::new(),
            categories: None,
            reference: None,
            transforms: BTreeMap::new(),
            impute: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Parametric,
    #[default]
    Semiparametric,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub kind: ModelKind,
    /// Bandwidth as a multiple of each smooth covariate's sd.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    /// Explicit bandwidths; take precedence over `scale`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidths: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_max_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_cap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_halvings: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_tol: Option<f64>,
}

impl FitConfig {
    pub fn profile_options(&self) -> ProfileOptions {
        let d = ProfileOptions::default();
        ProfileOptions {
            tol: self.tol.unwrap_or(d.tol),
            max_iter: self.max_iter.unwrap_or(d.max_iter),
            inner_tol: self.inner_tol.unwrap_or(d.inner_tol),
            inner_max_iter: self.inner_max_iter.unwrap_or(d.inner_max_iter),
            step_cap: self.step_cap.unwrap_or(d.step_cap),
            max_halvings: self.max_halvings.unwrap_or(d.max_halvings),
            score_tol: self.score_tol.unwrap_or(d.score_tol),
            ..d
        }
    }

    /// Options for the parametric fitter; `tol` there is a score norm, so
    /// only the iteration limits carry over.
    pub fn parametric_options(&self) -> FitOptions {
        let d = FitOptions::default();
        FitOptions {
            max_iter: self.max_iter.unwrap_or(d.max_iter),
            max_halvings: self.max_halvings.unwrap_or(d.max_halvings),
            ..d
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisConfig {
    pub column: String,
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

impl AxisConfig {
    fn values(&self) -> Vec<f64> {
        (0..self.steps)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / (self.steps - 1) as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceConfig {
    pub axes: Vec<AxisConfig>,
    /// Values for every parametric covariate (after transforms, by name)
    /// and for any smooth covariate that is not an axis.
    #[serde(default)]
    pub fixed: BTreeMap<String, f64>,
    /// Labels to export; all categories when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IiaConfig {
    /// Both methods when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<IiaMethod>,
    /// Labels to drop; every non-reference category when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            lo: 0.4,
            hi: 1.0,
            steps: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Output directory, relative to the config file. Not echoed into
    /// manifests so artifacts do not depend on where they were written.
    #[serde(default, skip_serializing)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<DgpSpec>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surface: Option<SurfaceConfig>,
    #[serde(default)]
    pub iia: IiaConfig,
    #[serde(default)]
    pub bandwidth_grid: GridConfig,
    /// Directory relative paths resolve against; set by [`RunConfig::load`].
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        config.base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.input.is_none() && self.simulate.is_none() {
            return Err(Error::Config(
                "config needs either data.input or a [simulate] section".into(),
            ));
        }
        let mut roles: HashMap<&str, &str> = HashMap::new();
        roles.insert(d.response.as_str(), "response");
        for (cols, role) in [(&d.parametric, "parametric"), (&d.smooth, "smooth")] {
            for c in cols {
                if let Some(prev) = roles.insert(c.as_str(), role) {
                    return Err(Error::Config(format!(
                        "column {c} is assigned both {prev} and {role} roles"
                    )));
                }
            }
        }
        for (col, list) in &d.transforms {
            match roles.get(col.as_str()) {
                Some(&"parametric") | Some(&"smooth") => {}
                _ => {
                    return Err(Error::Config(format!(
                        "transform for {col}, which is not a covariate"
                    )))
                }
            }
            for t in list {
                match t {
                    Transform::DivideBy(c) if !(c.is_finite() && *c != 0.0) => {
                        return Err(Error::Config(format!(
                            "divide-by for {col} needs a finite nonzero divisor"
                        )))
                    }
                    Transform::SquareAugment if roles[col.as_str()] != "parametric" => {
                        return Err(Error::Config(format!(
                            "square-augment applies to parametric covariates only ({col})"
                        )))
                    }
                    _ => {}
                }
            }
        }
        if let Some(s) = self.model.scale {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Config(format!("scale must be positive, got {s}")));
            }
        }
        if let Some(surface) = &self.surface {
            if surface.axes.len() != 2 {
                return Err(Error::Config("a surface needs exactly two axes".into()));
            }
            for a in &surface.axes {
                if a.steps < 2 || !(a.lo < a.hi) {
                    return Err(Error::Config(format!(
                        "axis {} needs steps >= 2 and lo < hi",
                        a.column
                    )));
                }
            }
        }
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// `out` from the config, resolved, or `fallback`.
    pub fn out_dir(&self, fallback: &Path) -> PathBuf {
        match &self.out {
            Some(p) => self.resolve(p),
            None => fallback.to_path_buf(),
        }
    }

    fn kernel_for(&self, t: &DMatrix<f64>) -> Result<(KernelConfig, Option<f64>)> {
        match &self.model.bandwidths {
            Some(h) => {
                if h.len() != t.ncols() {
                    return Err(Error::Config(format!(
                        "{} bandwidths for {} smooth covariates",
                        h.len(),
                        t.ncols()
                    )));
                }
                Ok((KernelConfig::gaussian(h.clone())?, None))
            }
            None => {
                let scale = self.model.scale.unwrap_or(DEFAULT_SCALE);
                Ok((bandwidth_from_scale(t, scale)?, Some(scale)))
            }
        }
    }
}

/// Why an input row was left out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum DropReason {
    MissingResponse,
    UnknownCategory,
    MissingValue,
    Unparseable,
    LogNonpositive,
}

impl DropReason {
    pub fn code(self) -> &'static str {
        match self {
            DropReason::MissingResponse => "missing-response",
            DropReason::UnknownCategory => "unknown-category",
            DropReason::MissingValue => "missing-value",
            DropReason::Unparseable => "unparseable",
            DropReason::LogNonpositive => "log-nonpositive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub source: String,
    pub rows_in: usize,
    pub rows_used: usize,
    pub rows_dropped: usize,
    /// Counts by reason code.
    pub dropped: BTreeMap<String, usize>,
}

/// A dataset together with the names and labels needed to report on it.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub dataset: Dataset,
    /// Category labels in index order.
    pub labels: Vec<String>,
    pub parametric_names: Vec<String>,
    pub smooth_names: Vec<String>,
    pub report: IngestReport,
}

impl LoadedData {
    /// Both covariate blocks as linear terms, for the parametric model and
    /// the IIA tests.
    pub fn linear(&self) -> Result<(Dataset, Vec<String>)> {
        let d = &self.dataset;
        let (n, p, q) = (d.n(), d.p(), d.q());
        let x = DMatrix::from_fn(n, p + q, |i, j| {
            if j < p {
                d.x()[(i, j)]
            } else {
                d.t()[(i, j - p)]
            }
        });
        let y = d.y().iter().map(|c| c.0).collect();
        let names = self
            .parametric_names
            .iter()
            .chain(&self.smooth_names)
            .cloned()
            .collect();
        Ok((Dataset::new(y, x, DMatrix::zeros(n, 0), d.n_categories())?, names))
    }

    pub fn label_index(&self, label: &str) -> Result<CategoryIndex> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(CategoryIndex)
            .ok_or_else(|| Error::Config(format!("unknown category label {label:?}")))
    }

    pub fn model_spec(&self, reference: Option<&str>) -> Result<ModelSpec> {
        let k = self.labels.len();
        match reference {
            Some(label) => ModelSpec::new(k, self.label_index(label)?.0),
            None => ModelSpec::with_last_reference(k),
        }
    }
}

fn is_missing(field: &str) -> bool {
    matches!(field, "" | "NA" | "na" | "NaN" | "nan" | ".")
}

/// Read a headed CSV file, apply the configured transforms and map
/// response labels to category indices.
pub fn load_csv(path: &Path, config: &DataConfig) -> Result<LoadedData> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("column {name:?} not found in {}", path.display())))
    };
    let response_col = column(&config.response)?;
    let x_cols = config
        .parametric
        .iter()
        .map(|c| column(c))
        .collect::<Result<Vec<_>>>()?;
    let t_cols = config
        .smooth
        .iter()
        .map(|c| column(c))
        .collect::<Result<Vec<_>>>()?;

    let no_transforms = Vec::new();
    let transforms_of = |name: &str| config.transforms.get(name).unwrap_or(&no_transforms);
    let mut parametric_names = Vec::new();
    for name in &config.parametric {
        parametric_names.push(name.clone());
        if transforms_of(name).contains(&Transform::SquareAugment) {
            parametric_names.push(format!("{name}^2"));
        }
    }

    let mut labels: Vec<String> = config.categories.clone().unwrap_or_default();
    let fixed_labels = config.categories.is_some();
    let mut y = Vec::new();
    let mut xs: Vec<f64> = Vec::new();
    let mut ts: Vec<f64> = Vec::new();
    let mut dropped: BTreeMap<DropReason, usize> = BTreeMap::new();
    let mut rows_in = 0;

    let value = |record: &csv::StringRecord, col: usize, name: &str| -> std::result::Result<f64, DropReason> {
        let field = record.get(col).unwrap_or("");
        let mut v = if is_missing(field) {
            *config.impute.get(name).ok_or(DropReason::MissingValue)?
        } else {
            match field.parse::<f64>() {
                Ok(v) if v.is_finite() => v,
                _ => return Err(DropReason::Unparseable),
            }
        };
        for t in transforms_of(name) {
            match *t {
                Transform::Log => {
                    if v <= 0.0 {
                        return Err(DropReason::LogNonpositive);
                    }
                    v = v.ln();
                }
                Transform::DivideBy(c) => v /= c,
                Transform::None | Transform::SquareAugment => {}
            }
        }
        Ok(v)
    };

    for record in reader.records() {
        rows_in += 1;
        let record = match record {
            Ok(r) => r,
            Err(_) => {
                *dropped.entry(DropReason::Unparseable).or_default() += 1;
                continue;
            }
        };
        let row = (|| {
            let label = record.get(response_col).unwrap_or("");
            if is_missing(label) {
                return Err(DropReason::MissingResponse);
            }
            let known = labels.iter().position(|l| l == label);
            if known.is_none() && fixed_labels {
                return Err(DropReason::UnknownCategory);
            }
            let mut x_row = Vec::with_capacity(parametric_names.len());
            for (name, &col) in config.parametric.iter().zip(&x_cols) {
                let v = value(&record, col, name)?;
                x_row.push(v);
                if transforms_of(name).contains(&Transform::SquareAugment) {
                    x_row.push(v * v);
                }
            }
            let t_row = config
                .smooth
                .iter()
                .zip(&t_cols)
                .map(|(name, &col)| value(&record, col, name))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Ok((label.to_string(), known, x_row, t_row))
        })();
        match row {
            Ok((label, known, x_row, t_row)) => {
                let k = known.unwrap_or_else(|| {
                    labels.push(label);
                    labels.len() - 1
                });
                y.push(k);
                xs.extend(x_row);
                ts.extend(t_row);
            }
            Err(reason) => *dropped.entry(reason).or_default() += 1,
        }
    }

    let n = y.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if labels.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least two categories, found {}",
            labels.len()
        )));
    }
    let x = DMatrix::from_row_slice(n, parametric_names.len(), &xs);
    let t = DMatrix::from_row_slice(n, config.smooth.len(), &ts);
    let dataset = Dataset::new(y, x, t, labels.len())?;
    let rows_dropped = dropped.values().sum();
    Ok(LoadedData {
        dataset,
        labels,
        parametric_names,
        smooth_names: config.smooth.clone(),
        report: IngestReport {
            source: path.display().to_string(),
            rows_in,
            rows_used: n,
            rows_dropped,
            dropped: dropped.into_iter().map(|(r, c)| (r.code().to_string(), c)).collect(),
        },
    })
}

/// Column names used for simulated data.
pub fn simulated_names(p: usize, q: usize) -> (Vec<String>, Vec<String>) {
    (
        (1..=p).map(|d| format!("x{d}")).collect(),
        (1..=q).map(|d| format!("t{d}")).collect(),
    )
}

fn from_simulation(spec: &DgpSpec) -> Result<LoadedData> {
    let dataset = simulate(spec)?;
    let (parametric_names, smooth_names) = simulated_names(spec.p(), spec.q());
    let n = dataset.n();
    Ok(LoadedData {
        dataset,
        labels: (0..spec.n_categories).map(|k| k.to_string()).collect(),
        parametric_names,
        smooth_names,
        report: IngestReport {
            source: "simulate".into(),
            rows_in: n,
            rows_used: n,
            rows_dropped: 0,
            dropped: BTreeMap::new(),
        },
    })
}

/// Data for a run: the CSV input if configured, otherwise a simulation
/// with the run seed.
pub fn load_data(config: &RunConfig) -> Result<LoadedData> {
    match (&config.data.input, &config.simulate) {
        (Some(input), _) => {
            let mut loaded = load_csv(&config.resolve(input), &config.data)?;
            // as written in the config, so manifests do not depend on the
            // working directory
            loaded.report.source = input.display().to_string();
            Ok(loaded)
        }
        (None, Some(dgp)) => {
            let mut dgp = dgp.clone();
            dgp.seed = config.seed;
            from_simulation(&dgp)
        }
        (None, None) => Err(Error::Config("no data source configured".into())),
    }
}

/// 17 significant digits; parses back to the same `f64`.
pub fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_num(field: &str, what: &str) -> Result<f64> {
    field
        .parse()
        .map_err(|_| Error::Parse(format!("{what}: cannot parse {field:?} as a number")))
}

fn write_rows(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Write a dataset as CSV with columns `y`, parametric names, smooth names.
pub fn write_dataset_csv(path: &Path, data: &LoadedData) -> Result<()> {
    let d = &data.dataset;
    let header: Vec<String> = std::iter::once("y".to_string())
        .chain(data.parametric_names.iter().cloned())
        .chain(data.smooth_names.iter().cloned())
        .collect();
    let rows = (0..d.n()).map(|i| {
        std::iter::once(data.labels[d.y()[i].0].clone())
            .chain(d.x().row(i).iter().map(|v| fmt_num(*v)))
            .chain(d.t().row(i).iter().map(|v| fmt_num(*v)))
            .collect()
    });
    write_rows(path, &header, rows)
}

/// `**` at 1%, `*` at 5%, `.` at 10%.
pub fn significance_stars(p_value: f64) -> &'static str {
    if p_value < 0.01 {
        "**"
    } else if p_value < 0.05 {
        "*"
    } else if p_value < 0.10 {
        "."
    } else {
        ""
    }
}

/// One row of a coefficient table.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientRow {
    pub category: String,
    pub term: String,
    pub estimate: f64,
    pub std_error: f64,
}

impl CoefficientRow {
    pub fn z(&self) -> f64 {
        self.estimate / self.std_error
    }
    pub fn p_value(&self) -> f64 {
        normal_two_sided_p(self.z())
    }
}

const COEF_HEADER: [&str; 7] = ["category", "term", "estimate", "std_error", "z", "p_value", "stars"];

pub fn write_coefficients(path: &Path, rows: &[CoefficientRow]) -> Result<()> {
    let header: Vec<String> = COEF_HEADER.iter().map(|s| s.to_string()).collect();
    write_rows(
        path,
        &header,
        rows.iter().map(|r| {
            let p = r.p_value();
            vec![
                r.category.clone(),
                r.term.clone(),
                fmt_num(r.estimate),
                fmt_num(r.std_error),
                fmt_num(r.z()),
                fmt_num(p),
                significance_stars(p).to_string(),
            ]
        }),
    )
}

pub fn read_coefficients(path: &Path) -> Result<Vec<CoefficientRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let r = record?;
        let field = |i: usize| r.get(i).unwrap_or("");
        rows.push(CoefficientRow {
            category: field(0).to_string(),
            term: field(1).to_string(),
            estimate: parse_num(field(2), "estimate")?,
            std_error: parse_num(field(3), "std_error")?,
        });
    }
    Ok(rows)
}

fn write_trace(path: &Path, trace: &[f64]) -> Result<()> {
    write_rows(
        path,
        &["iteration".to_string(), "loglik".to_string()],
        trace
            .iter()
            .enumerate()
            .map(|(i, v)| vec![i.to_string(), fmt_num(*v)]),
    )
}

fn smooth_header(data: &LoadedData, spec: &ModelSpec) -> Vec<String> {
    std::iter::once("row".to_string())
        .chain(data.smooth_names.iter().cloned())
        .chain(spec.free_categories().map(|k| format!("m_{}", data.labels[k.0])))
        .collect()
}

fn write_smooth(path: &Path, data: &LoadedData, spec: &ModelSpec, m: &DMatrix<f64>) -> Result<()> {
    let d = &data.dataset;
    let rows = (0..d.n()).map(|i| {
        std::iter::once(i.to_string())
            .chain(d.t().row(i).iter().map(|v| fmt_num(*v)))
            .chain(m.column(i).iter().map(|v| fmt_num(*v)))
            .collect()
    });
    write_rows(path, &smooth_header(data, spec), rows)
}

fn read_smooth(path: &Path, data: &LoadedData, spec: &ModelSpec) -> Result<DMatrix<f64>> {
    let mut reader = csv::Reader::from_path(path)?;
    let expected = smooth_header(data, spec);
    let found: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if found != expected {
        return Err(Error::Parse(format!(
            "{} has columns {found:?}, expected {expected:?}",
            path.display()
        )));
    }
    let (n, q, n_free) = (data.dataset.n(), data.dataset.q(), spec.n_free());
    let mut m = DMatrix::zeros(n_free, n);
    let mut count = 0;
    for (i, record) in reader.records().enumerate() {
        let r = record?;
        if i >= n {
            return Err(Error::Parse("smooth values have more rows than the data".into()));
        }
        for s in 0..n_free {
            m[(s, i)] = parse_num(r.get(1 + q + s).unwrap_or(""), "smooth value")?;
        }
        count += 1;
    }
    if count != n {
        return Err(Error::Parse(format!(
            "smooth values have {count} rows, data has {n}"
        )));
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub kind: ModelKind,
    pub converged: bool,
    pub iterations: usize,
    pub loglik: f64,
    pub n_categories: usize,
    pub reference: String,
    pub terms: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidths: Option<Vec<f64>>,
    /// Max-norm of the (profile) score at the returned coefficients.
    pub score_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_local_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_cap: Option<f64>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub labels: Vec<String>,
    pub parametric: Vec<String>,
    pub smooth: Vec<String>,
    pub ingest: IngestReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitSummary>,
    pub artifacts: Vec<String>,
    pub config: RunConfig,
}

impl Manifest {
    fn new(command: &str, config: &RunConfig, data: &LoadedData) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: config.seed,
            labels: data.labels.clone(),
            parametric: data.parametric_names.clone(),
            smooth: data.smooth_names.clone(),
            ingest: data.report.clone(),
            fit: None,
            artifacts: Vec::new(),
            config: config.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Parse(format!("manifest: {e}")))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

pub const MANIFEST: &str = "manifest.toml";
pub const COEFFICIENTS: &str = "coefficients.csv";
pub const TRACE: &str = "trace.csv";
pub const SMOOTH: &str = "smooth.csv";
pub const SURFACE: &str = "surface.csv";
pub const DATA: &str = "data.csv";
pub const IIA: &str = "iia.csv";
pub const BANDWIDTHS: &str = "bandwidth_grid.csv";

fn parametric_rows(
    fit: &ParametricFitResult,
    data: &LoadedData,
    terms: &[String],
) -> Vec<CoefficientRow> {
    let mut rows = Vec::new();
    for (slot, k) in fit.spec.free_categories().enumerate() {
        for (c, term) in terms.iter().enumerate() {
            rows.push(CoefficientRow {
                category: data.labels[k.0].clone(),
                term: term.clone(),
                estimate: fit.coefficients.beta[(slot, c)],
                std_error: fit.standard_errors[(slot, c)],
            });
        }
    }
    rows
}

fn semiparametric_rows(fit: &SemiparametricFitResult, data: &LoadedData) -> Vec<CoefficientRow> {
    let mut rows = Vec::new();
    for (slot, k) in fit.spec.free_categories().enumerate() {
        for (d, term) in data.parametric_names.iter().enumerate() {
            rows.push(CoefficientRow {
                category: data.labels[k.0].clone(),
                term: term.clone(),
                estimate: fit.beta.beta[(slot, d)],
                std_error: fit.beta_se[(slot, d)],
            });
        }
    }
    rows
}

/// Outcome of a fit run; artifacts are already on disk.
#[derive(Debug, Clone)]
pub enum FitOutcome {
    Parametric(ParametricFitResult),
    Semiparametric(Box<SemiparametricFitResult>),
}

impl FitOutcome {
    pub fn converged(&self) -> bool {
        match self {
            FitOutcome::Parametric(f) => f.converged,
            FitOutcome::Semiparametric(f) => f.converged,
        }
    }
}

/// Fit the configured model and write the coefficient table, trace,
/// smooth values (semiparametric) and manifest into `out`.
pub fn run_fit(config: &RunConfig, out: &Path) -> Result<FitOutcome> {
    fs::create_dir_all(out)?;
    let data = load_data(config)?;
    let spec = data.model_spec(config.data.reference.as_deref())?;
    let mut manifest = Manifest::new("fit", config, &data);
    let reference = data.labels[spec.reference.0].clone();
    let outcome = match config.model.kind {
        ModelKind::Parametric => {
            let (linear, names) = data.linear()?;
            let fit = fit_parametric(&linear, &spec, &config.fit.parametric_options())?;
            let terms: Vec<String> = std::iter::once("(intercept)".to_string()).chain(names).collect();
            write_coefficients(&out.join(COEFFICIENTS), &parametric_rows(&fit, &data, &terms))?;
            write_trace(&out.join(TRACE), &fit.loglik_trace)?;
            manifest.artifacts = vec![COEFFICIENTS.into(), TRACE.into()];
            manifest.fit = Some(FitSummary {
                kind: ModelKind::Parametric,
                converged: fit.converged,
                iterations: fit.iterations,
                loglik: fit.loglik,
                n_categories: spec.n_categories,
                reference,
                terms,
                scale: None,
                bandwidths: None,
                score_norm: fit.score_norm,
                max_local_score: None,
                inner_tol: None,
                step_cap: None,
                warnings: Vec::new(),
            });
            FitOutcome::Parametric(fit)
        }
        ModelKind::Semiparametric => {
            let (kernel, scale) = config.kernel_for(data.dataset.t())?;
            let options = config.fit.profile_options();
            let fit = fit_semiparametric(&data.dataset, &spec, &kernel, &options)?;
            write_coefficients(&out.join(COEFFICIENTS), &semiparametric_rows(&fit, &data))?;
            write_trace(&out.join(TRACE), &fit.loglik_trace)?;
            write_smooth(&out.join(SMOOTH), &data, &spec, &fit.smooth.m)?;
            manifest.artifacts = vec![COEFFICIENTS.into(), TRACE.into(), SMOOTH.into()];
            manifest.fit = Some(FitSummary {
                kind: ModelKind::Semiparametric,
                converged: fit.converged,
                iterations: fit.iterations,
                loglik: *fit.loglik_trace.last().expect("trace is nonempty"),
                n_categories: spec.n_categories,
                reference,
                terms: data.parametric_names.clone(),
                scale,
                bandwidths: Some(kernel.bandwidths.clone()),
                score_norm: fit.profile_score_norm,
                max_local_score: Some(fit.max_local_score),
                inner_tol: Some(options.inner_tol),
                step_cap: Some(options.step_cap),
                warnings: fit.warnings.clone(),
            });
            FitOutcome::Semiparametric(Box::new(fit))
        }
    };
    manifest.write(&out.join(MANIFEST))?;
    Ok(outcome)
}

/// Simulate from the `[simulate]` section with the run seed and write the
/// data and a manifest.
pub fn run_simulate(config: &RunConfig, out: &Path) -> Result<LoadedData> {
    let dgp = config
        .simulate
        .as_ref()
        .ok_or_else(|| Error::Config("simulate needs a [simulate] section".into()))?;
    let mut dgp = dgp.clone();
    dgp.seed = config.seed;
    let data = from_simulation(&dgp)?;
    fs::create_dir_all(out)?;
    write_dataset_csv(&out.join(DATA), &data)?;
    let mut manifest = Manifest::new("simulate", config, &data);
    manifest.artifacts = vec![DATA.into()];
    manifest.write(&out.join(MANIFEST))?;
    Ok(data)
}

/// Rebuild a semiparametric fit from the artifacts in `fit_dir` and export
/// the configured probability surface into `out`.
pub fn export_surface(config: &RunConfig, fit_dir: &Path, out: &Path) -> Result<usize> {
    let request = config
        .surface
        .as_ref()
        .ok_or_else(|| Error::Config("surface needs a [surface] section".into()))?;
    let manifest = Manifest::read(&fit_dir.join(MANIFEST))?;
    let summary = manifest
        .fit
        .as_ref()
        .filter(|f| f.kind == ModelKind::Semiparametric)
        .ok_or_else(|| Error::Config("surface needs a semiparametric fit".into()))?;
    if !summary.converged {
        return Err(Error::Config("the fit in the artifact directory did not converge".into()));
    }
    let data = load_data(config)?;
    if data.labels != manifest.labels
        || data.parametric_names != manifest.parametric
        || data.smooth_names != manifest.smooth
    {
        return Err(Error::Config(
            "data does not match the fit artifacts (labels or columns differ)".into(),
        ));
    }
    let spec = data.model_spec(Some(&summary.reference))?;
    let kernel = KernelConfig::gaussian(summary.bandwidths.clone().unwrap_or_default())?;

    let coefs = read_coefficients(&fit_dir.join(COEFFICIENTS))?;
    let p = data.dataset.p();
    let mut beta = DMatrix::zeros(spec.n_free(), p);
    let mut seen = 0;
    for row in &coefs {
        let k = data.label_index(&row.category)?;
        let slot = spec
            .slot(k)
            .ok_or_else(|| Error::Parse("coefficient row for the reference category".into()))?;
        let d = data
            .parametric_names
            .iter()
            .position(|n| *n == row.term)
            .ok_or_else(|| Error::Parse(format!("unknown term {:?}", row.term)))?;
        beta[(slot, d)] = row.estimate;
        seen += 1;
    }
    if seen != spec.n_free() * p {
        return Err(Error::Parse(format!(
            "coefficient table has {seen} rows, expected {}",
            spec.n_free() * p
        )));
    }
    let m = read_smooth(&fit_dir.join(SMOOTH), &data, &spec)?;
    let state = FitState { beta, m };
    let options = ProfileOptions {
        inner_tol: summary.inner_tol.unwrap_or(ProfileOptions::default().inner_tol),
        step_cap: summary.step_cap.unwrap_or(ProfileOptions::default().step_cap),
        ..ProfileOptions::default()
    };
    let predictor = Predictor::new(&data.dataset, &spec, &kernel, &state, &options)?;

    let axis_index = |a: &AxisConfig| {
        data.smooth_names
            .iter()
            .position(|n| *n == a.column)
            .ok_or_else(|| Error::Config(format!("surface axis {} is not a smooth covariate", a.column)))
    };
    let (a1, a2) = (&request.axes[0], &request.axes[1]);
    let (i1, i2) = (axis_index(a1)?, axis_index(a2)?);
    if i1 == i2 {
        return Err(Error::Config("surface axes must differ".into()));
    }
    let fixed = |name: &String| {
        request
            .fixed
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("surface needs a fixed value for {name}")))
    };
    let x = data
        .parametric_names
        .iter()
        .map(fixed)
        .collect::<Result<Vec<_>>>()?;
    let mut t = data
        .smooth_names
        .iter()
        .enumerate()
        .map(|(d, name)| if d == i1 || d == i2 { Ok(0.0) } else { fixed(name) })
        .collect::<Result<Vec<_>>>()?;
    let categories: Vec<CategoryIndex> = match &request.categories {
        Some(list) => list.iter().map(|l| data.label_index(l)).collect::<Result<_>>()?,
        None => (0..spec.n_categories).map(CategoryIndex).collect(),
    };

    let mut rows = Vec::new();
    for v1 in a1.values() {
        for v2 in a2.values() {
            t[i1] = v1;
            t[i2] = v2;
            let probs = predictor.probabilities(&x, &t)?;
            for k in &categories {
                rows.push(vec![
                    fmt_num(v1),
                    fmt_num(v2),
                    data.labels[k.0].clone(),
                    fmt_num(probs[k.0]),
                ]);
            }
        }
    }
    let count = rows.len();
    fs::create_dir_all(out)?;
    let header = vec![
        a1.column.clone(),
        a2.column.clone(),
        "category".to_string(),
        "probability".to_string(),
    ];
    write_rows(&out.join(SURFACE), &header, rows)?;
    Ok(count)
}

/// Run the configured IIA tests on the parametric model (both covariate
/// blocks linear) and write one row per test.
pub fn run_iia(config: &RunConfig, out: &Path) -> Result<Vec<(String, Result<IiaTestResult>)>> {
    let data = load_data(config)?;
    let spec = data.model_spec(config.data.reference.as_deref())?;
    let (linear, _) = data.linear()?;
    let drops: Vec<CategoryIndex> = match &config.iia.drop {
        Some(list) => list.iter().map(|l| data.label_index(l)).collect::<Result<_>>()?,
        None => spec.free_categories().collect(),
    };
    let methods = match config.iia.method {
        Some(m) => vec![m],
        None => vec![IiaMethod::HausmanMcFadden, IiaMethod::SmallHsiao],
    };
    let options = config.fit.parametric_options();
    let mut results = Vec::new();
    for method in methods {
        for &drop in &drops {
            let r = match method {
                IiaMethod::HausmanMcFadden => hausman_mcfadden(&linear, &spec, drop, &options),
                IiaMethod::SmallHsiao => small_hsiao(&linear, &spec, drop, config.seed, &options),
            };
            results.push((method, data.labels[drop.0].clone(), r));
        }
    }
    fs::create_dir_all(out)?;
    let header: Vec<String> = ["method", "dropped", "statistic", "df", "p_value", "note"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows = results.iter().map(|(method, label, r)| match r {
        Ok(t) => vec![
            method.to_string(),
            label.clone(),
            fmt_num(t.statistic),
            t.df.to_string(),
            fmt_num(t.p_value),
            t.note.clone().unwrap_or_default(),
        ],
        Err(e) => vec![
            method.to_string(),
            label.clone(),
            String::new(),
            String::new(),
            String::new(),
            format!("error: {e}"),
        ],
    });
    write_rows(&out.join(IIA), &header, rows)?;
    let mut manifest = Manifest::new("iia-test", config, &data);
    manifest.artifacts = vec![IIA.into()];
    manifest.write(&out.join(MANIFEST))?;
    Ok(results.into_iter().map(|(_, l, r)| (l, r)).collect())
}

/// Bandwidths for each scale of the configured grid; with `fit`, also the
/// semiparametric fit summary at each scale.
pub fn run_bandwidth_grid(config: &RunConfig, out: &Path, fit: bool) -> Result<usize> {
    let data = load_data(config)?;
    let grid = &config.bandwidth_grid;
    let scales = grid_scales(grid.lo, grid.hi, grid.steps)?;
    let spec = data.model_spec(config.data.reference.as_deref())?;
    let options = config.fit.profile_options();
    let mut header: Vec<String> = std::iter::once("scale".to_string())
        .chain(data.smooth_names.iter().map(|n| format!("h_{n}")))
        .collect();
    if fit {
        header.extend(["converged", "iterations", "loglik", "m_range"].map(String::from));
        header.extend(
            spec.free_categories()
                .flat_map(|k| data.parametric_names.iter().map(move |t| (k, t)))
                .map(|(k, t)| format!("{}:{t}", data.labels[k.0])),
        );
    }
    let mut rows = Vec::new();
    for &scale in &scales {
        let kernel = bandwidth_from_scale(data.dataset.t(), scale)?;
        let mut row: Vec<String> = std::iter::once(fmt_num(scale))
            .chain(kernel.bandwidths.iter().map(|h| fmt_num(*h)))
            .collect();
        if fit {
            let f = fit_semiparametric(&data.dataset, &spec, &kernel, &options)?;
            let range = f
                .smooth
                .m
                .row_iter()
                .map(|r| r.max() - r.min())
                .fold(0.0, f64::max);
            row.push(f.converged.to_string());
            row.push(f.iterations.to_string());
            row.push(fmt_num(*f.loglik_trace.last().expect("trace is nonempty")));
            row.push(fmt_num(range));
            row.extend(f.beta.beta.row_iter().flat_map(|r| r.iter().map(|v| fmt_num(*v)).collect::<Vec<_>>()));
        }
        rows.push(row);
    }
    fs::create_dir_all(out)?;
    write_rows(&out.join(BANDWIDTHS), &header, rows)?;
    let mut manifest = Manifest::new("bandwidth-grid", config, &data);
    manifest.artifacts = vec![BANDWIDTHS.into()];
    manifest.write(&out.join(MANIFEST))?;
    Ok(scales.len())
}
