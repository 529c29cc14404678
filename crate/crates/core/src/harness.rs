//! Seeded Monte Carlo experiments over the estimator zoo.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{builtin_config, DgpConfig, DgpFile, Sampler};
use crate::error::{Error, Result};
use crate::estimators::{
    fuller_with, optimal_iv_feasible, tsls_map, two_step_gmm_with, unbiased_scalar, EstimatorKind,
    VarianceConvention,
};
use crate::lar::{rb_optimal_iv_with, rb_tsls, DrawCounts, RBConfig};
use crate::linalg::{pairwise_mean, pairwise_sum, to_rows};
use crate::reduced_form::{
    gls_with_covariances, noise_covariance, ols_reduced_form_with, CellMoments, NoiseModel, ReducedFormFit,
};
use crate::rng::Stream;
use crate::types::{Dataset, IdentificationMode, SolveMode};

pub const RESULT_SCHEMA_VERSION: u32 = 1;
pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Seed used by the built-in replication configurations.
pub const REPLICATION_MASTER_SEED: u64 = 20240101;
pub const REPLICATION_ITERATIONS: usize = 5000;
pub const REPLICATION_RB_DRAWS: usize = 100;
pub const REPLICATION_RB_OUTER: usize = 50;
pub const REPLICATION_RB_INNER: usize = 100;

/// An estimator to run in every iteration, with its options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", try_from = "RawSpec")]
pub enum EstimatorSpec {
    Tsls,
    RbTsls {
        draws: usize,
    },
    OptimalIv,
    RbOptimalIv {
        draws: usize,
        inner_draws: usize,
    },
    TwoStepGmm,
    Fuller {
        c: f64,
    },
    Unbiased {
        variance_convention: VarianceConvention,
    },
}

/// Flat form of an estimator entry, so options that do not apply to the
/// chosen estimator are rejected instead of ignored.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    kind: EstimatorKind,
    draws: Option<usize>,
    inner_draws: Option<usize>,
    c: Option<f64>,
    variance_convention: Option<VarianceConvention>,
}

impl TryFrom<RawSpec> for EstimatorSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        let mut unused = Vec::new();
        let mut take = |name: &'static str, present: bool, allowed: bool| {
            if present && !allowed {
                unused.push(name);
            }
        };
        let k = raw.kind;
        take("draws", raw.draws.is_some(), matches!(k, EstimatorKind::RbTsls | EstimatorKind::RbOptimalIv));
        take("inner_draws", raw.inner_draws.is_some(), k == EstimatorKind::RbOptimalIv);
        take("c", raw.c.is_some(), k == EstimatorKind::Fuller);
        take("variance_convention", raw.variance_convention.is_some(), k == EstimatorKind::Unbiased);
        if !unused.is_empty() {
            return Err(Error::Config(format!("options {unused:?} do not apply to estimator {k:?}")));
        }
        Ok(match k {
            EstimatorKind::Tsls => EstimatorSpec::Tsls,
            EstimatorKind::RbTsls => EstimatorSpec::RbTsls { draws: raw.draws.unwrap_or(REPLICATION_RB_DRAWS) },
            EstimatorKind::OptimalIv => EstimatorSpec::OptimalIv,
            EstimatorKind::RbOptimalIv => EstimatorSpec::RbOptimalIv {
                draws: raw.draws.unwrap_or(REPLICATION_RB_OUTER),
                inner_draws: raw.inner_draws.unwrap_or(REPLICATION_RB_INNER),
            },
            EstimatorKind::TwoStepGmm => EstimatorSpec::TwoStepGmm,
            EstimatorKind::Fuller => EstimatorSpec::Fuller {
                c: raw.c.ok_or_else(|| Error::Config("fuller needs a constant 'c'".into()))?,
            },
            EstimatorKind::Unbiased => {
                EstimatorSpec::Unbiased { variance_convention: raw.variance_convention.unwrap_or_default() }
            }
        })
    }
}

impl EstimatorSpec {
    pub fn kind(&self) -> EstimatorKind {
        match self {
            EstimatorSpec::Tsls => EstimatorKind::Tsls,
            EstimatorSpec::RbTsls { .. } => EstimatorKind::RbTsls,
            EstimatorSpec::OptimalIv => EstimatorKind::OptimalIv,
            EstimatorSpec::RbOptimalIv { .. } => EstimatorKind::RbOptimalIv,
            EstimatorSpec::TwoStepGmm => EstimatorKind::TwoStepGmm,
            EstimatorSpec::Fuller { .. } => EstimatorKind::Fuller,
            EstimatorSpec::Unbiased { .. } => EstimatorKind::Unbiased,
        }
    }

    /// Identifier used in result tables; unique within a configuration.
    pub fn tag(&self) -> String {
        match self {
            EstimatorSpec::Fuller { c } => format!("fuller_c{c}"),
            EstimatorSpec::Unbiased { variance_convention: VarianceConvention::AsPrinted } => {
                "unbiased_as_printed".into()
            }
            EstimatorSpec::Unbiased { variance_convention: VarianceConvention::PiVariance } => {
                "unbiased_pi_variance".into()
            }
            other => serde_json::to_value(other.kind())
                .ok()
                .and_then(|v| v.as_str().map(str::to_owned))
                .unwrap_or_default(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            EstimatorSpec::Fuller { c } => format!("Fuller (C={c})"),
            EstimatorSpec::Unbiased { variance_convention } => format!("Unbiased ({variance_convention:?})"),
            other => other.kind().label().to_owned(),
        }
    }

    /// The non-RB estimator an RB variant improves on.
    pub fn baseline_tag(&self) -> Option<&'static str> {
        match self {
            EstimatorSpec::RbTsls { .. } => Some("tsls"),
            EstimatorSpec::RbOptimalIv { .. } => Some("optimal_iv"),
            _ => None,
        }
    }

    fn validate(&self, k: usize, d: usize) -> Result<()> {
        match *self {
            EstimatorSpec::RbTsls { draws: 0 } => Err(Error::Config("rb_tsls needs draws >= 1".into())),
            EstimatorSpec::RbOptimalIv { draws, inner_draws } if draws == 0 || inner_draws == 0 => {
                Err(Error::Config("rb_optimal_iv needs draws and inner_draws >= 1".into()))
            }
            EstimatorSpec::Fuller { c } if !(c >= 0.0 && c.is_finite()) => {
                Err(Error::Config(format!("Fuller constant must be finite and nonnegative, got {c}")))
            }
            EstimatorSpec::Unbiased { .. } if k != 1 || d != 1 => {
                Err(Error::Config(format!("the unbiased estimator needs k = d = 1, the DGP has k={k}, d={d}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    Mse,
    Mae,
}

impl Loss {
    pub fn name(&self) -> &'static str {
        match self {
            Loss::Mse => "MSE",
            Loss::Mae => "MAE",
        }
    }

    fn of(&self, err_norm: f64) -> f64 {
        match self {
            Loss::Mse => err_norm * err_norm,
            Loss::Mae => err_norm,
        }
    }
}

/// Equal-width bins over `[lo, hi)` for the first coordinate of β̂.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramSpec {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        HistogramSpec { lo: -1.0, hi: 3.0, bins: 80 }
    }
}

impl HistogramSpec {
    /// Default window for an identification mode around `β = 1`.
    pub fn for_mode(mode: IdentificationMode) -> Self {
        match mode {
            IdentificationMode::Weak => HistogramSpec::default(),
            IdentificationMode::Strong => HistogramSpec { lo: 0.9, hi: 1.1, bins: 80 },
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi) || self.bins == 0 {
            return Err(Error::Config(format!(
                "histogram needs finite lo < hi and at least one bin, got [{}, {}) with {} bins",
                self.lo, self.hi, self.bins
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
    /// Estimates that were NaN or infinite.
    pub non_finite: u64,
}

impl Histogram {
    pub fn from_values(spec: &HistogramSpec, values: &[f64]) -> Self {
        let mut h = Histogram {
            lo: spec.lo,
            hi: spec.hi,
            counts: vec![0; spec.bins],
            underflow: 0,
            overflow: 0,
            non_finite: 0,
        };
        let width = (spec.hi - spec.lo) / spec.bins as f64;
        for &v in values {
            if !v.is_finite() {
                h.non_finite += 1;
            } else if v < spec.lo {
                h.underflow += 1;
            } else if v >= spec.hi {
                h.overflow += 1;
            } else {
                let b = (((v - spec.lo) / width) as usize).min(spec.bins - 1);
                h.counts[b] += 1;
            }
        }
        h
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.underflow + self.overflow + self.non_finite
    }

    pub fn bin_edges(&self, b: usize) -> (f64, f64) {
        let width = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + b as f64 * width, self.lo + (b + 1) as f64 * width)
    }
}

/// A complete Monte Carlo experiment description.
///
/// Iteration `i` uses `Stream::new(master_seed).split(i)`; the `seed` field of
/// the DGP is not used by the harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ExperimentFile", into = "ExperimentFile")]
pub struct ExperimentConfig {
    pub dgp: DgpConfig,
    pub iterations: usize,
    pub estimators: Vec<EstimatorSpec>,
    pub losses: Vec<Loss>,
    pub histogram: HistogramSpec,
    pub master_seed: u64,
}

/// On-disk form of [`ExperimentConfig`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub version: u32,
    pub dgp: DgpFile,
    pub iterations: usize,
    pub estimators: Vec<EstimatorSpec>,
    #[serde(default = "default_losses")]
    pub losses: Vec<Loss>,
    #[serde(default)]
    pub histogram: Option<HistogramSpec>,
    pub master_seed: u64,
}

fn default_losses() -> Vec<Loss> {
    vec![Loss::Mse, Loss::Mae]
}

impl TryFrom<ExperimentFile> for ExperimentConfig {
    type Error = Error;

    fn try_from(file: ExperimentFile) -> Result<Self> {
        if file.version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported experiment file version {}", file.version)));
        }
        let dgp = DgpConfig::from_file(&file.dgp)?;
        let histogram = file.histogram.unwrap_or_else(|| HistogramSpec::for_mode(dgp.params.mode));
        let cfg = ExperimentConfig {
            dgp,
            iterations: file.iterations,
            estimators: file.estimators,
            losses: file.losses,
            histogram,
            master_seed: file.master_seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<ExperimentConfig> for ExperimentFile {
    fn from(cfg: ExperimentConfig) -> Self {
        ExperimentFile {
            version: CONFIG_SCHEMA_VERSION,
            dgp: cfg.dgp.to_file(),
            iterations: cfg.iterations,
            estimators: cfg.estimators,
            losses: cfg.losses,
            histogram: Some(cfg.histogram),
            master_seed: cfg.master_seed,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        self.histogram.validate()?;
        let dims = self.dgp.dims();
        let mut tags = BTreeSet::new();
        for spec in &self.estimators {
            spec.validate(dims.k, dims.d)?;
            if !tags.insert(spec.tag()) {
                return Err(Error::Config(format!("estimator '{}' listed twice", spec.tag())));
            }
        }
        let losses: BTreeSet<_> = self.losses.iter().collect();
        if losses.len() != self.losses.len() {
            return Err(Error::Config("a loss is listed twice".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Replace RB draw counts on every RB estimator.
    pub fn with_draws(mut self, draws: Option<usize>, inner_draws: Option<usize>) -> Self {
        for spec in &mut self.estimators {
            match spec {
                EstimatorSpec::RbTsls { draws: m } => {
                    if let Some(v) = draws {
                        *m = v;
                    }
                }
                EstimatorSpec::RbOptimalIv { draws: m, inner_draws: mi } => {
                    if let Some(v) = draws {
                        *m = v;
                    }
                    if let Some(v) = inner_draws {
                        *mi = v;
                    }
                }
                _ => {}
            }
        }
        self
    }
}

/// The four-estimator replication design on the Table-1 DGP.
pub fn replication_experiment(mode: IdentificationMode) -> ExperimentConfig {
    ExperimentConfig {
        dgp: builtin_config(mode, 1000, REPLICATION_MASTER_SEED),
        iterations: REPLICATION_ITERATIONS,
        estimators: vec![
            EstimatorSpec::Tsls,
            EstimatorSpec::RbTsls { draws: REPLICATION_RB_DRAWS },
            EstimatorSpec::OptimalIv,
            EstimatorSpec::RbOptimalIv { draws: REPLICATION_RB_OUTER, inner_draws: REPLICATION_RB_INNER },
        ],
        losses: vec![Loss::Mse, Loss::Mae],
        histogram: HistogramSpec::for_mode(mode),
        master_seed: REPLICATION_MASTER_SEED,
    }
}

/// Published `(tag, MSE, MAE)` values for the replication design.
pub fn replication_reference(mode: IdentificationMode) -> [(&'static str, f64, f64); 4] {
    match mode {
        IdentificationMode::Weak => [
            ("tsls", 0.841, 0.633),
            ("rb_tsls", 0.196, 0.428),
            ("optimal_iv", 1.159, 0.604),
            ("rb_optimal_iv", 0.174, 0.394),
        ],
        IdentificationMode::Strong => [
            ("tsls", 0.001, 0.030),
            ("rb_tsls", 0.000, 0.009),
            ("optimal_iv", 0.000, 0.009),
            ("rb_optimal_iv", 0.000, 0.009),
        ],
    }
}

/// MSE and MAE of a list of estimates with Monte Carlo standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossMetrics {
    pub mse: f64,
    pub mse_se: f64,
    pub mae: f64,
    pub mae_se: f64,
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_mean(values);
    if n == 1 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

fn error_norms(estimates: &[DVector<f64>], beta: &DVector<f64>) -> Vec<f64> {
    estimates.iter().map(|b| (b - beta).norm()).collect()
}

/// Squared and plain Euclidean error, averaged, with standard errors from the
/// sample variance of the per-estimate losses.
pub fn loss_metrics(estimates: &[DVector<f64>], beta: &DVector<f64>) -> LossMetrics {
    let norms = error_norms(estimates, beta);
    let sq: Vec<f64> = norms.iter().map(|e| e * e).collect();
    let (mse, mse_se) = mean_and_se(&sq);
    let (mae, mae_se) = mean_and_se(&norms);
    LossMetrics { mse, mse_se, mae, mae_se }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub loss: Loss,
    #[serde(with = "nonfinite")]
    pub value: f64,
    #[serde(with = "nonfinite")]
    pub mc_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub tag: String,
    pub label: String,
    pub spec: EstimatorSpec,
    pub losses: Vec<LossValue>,
    pub histogram: Histogram,
    /// Iterations with a non-finite estimate; they are left out of the losses.
    pub non_finite: usize,
    /// Iterations whose estimate was flagged as numerically extreme.
    pub extreme: usize,
    /// Iterations where the estimator returned an error.
    pub failures: usize,
    /// Monte Carlo draws summed over iterations (RB estimators).
    pub draws: DrawCounts,
}

impl EstimatorSummary {
    pub fn loss(&self, loss: Loss) -> Option<&LossValue> {
        self.losses.iter().find(|l| l.loss == loss)
    }
}

/// Mean of `loss(a) − loss(b)` over iterations with both estimates finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDifference {
    pub estimator: String,
    pub baseline: String,
    pub loss: Loss,
    #[serde(with = "nonfinite")]
    pub mean_difference: f64,
    #[serde(with = "nonfinite")]
    pub mc_se: f64,
    pub iterations: usize,
}

impl PairedDifference {
    /// Number of standard errors by which the estimator beats the baseline.
    pub fn z_improvement(&self) -> f64 {
        -self.mean_difference / self.mc_se
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunMetadata {
    pub wall_time_seconds: f64,
    pub workers: usize,
    pub iterations: usize,
    pub crate_version: String,
}

/// Per-iteration estimates of one estimator, flattened row-major (`iterations × d`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSeries {
    pub tag: String,
    pub d: usize,
    #[serde(with = "nonfinite_vec")]
    pub values: Vec<f64>,
}

impl EstimateSeries {
    pub fn estimate(&self, i: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.values[i * self.d..(i + 1) * self.d])
    }

    pub fn estimates(&self) -> Vec<DVector<f64>> {
        (0..self.values.len() / self.d.max(1)).map(|i| self.estimate(i)).collect()
    }
}

/// Everything computed by [`run_experiment`].
///
/// Equality ignores `metadata`, which carries wall time and the worker count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub beta: Vec<f64>,
    /// Concentration parameter matrix (d×d), rows.
    pub concentration: Vec<Vec<f64>>,
    pub estimators: Vec<EstimatorSummary>,
    pub comparisons: Vec<PairedDifference>,
    pub estimates: Vec<EstimateSeries>,
    /// Iterations in which the dataset or a reduced-form fit failed.
    pub failed_iterations: usize,
    #[serde(default)]
    pub metadata: RunMetadata,
}

impl PartialEq for ExperimentResult {
    fn eq(&self, other: &Self) -> bool {
        self.comparable_json() == other.comparable_json()
    }
}

impl ExperimentResult {
    /// JSON value of every field except `metadata`.
    pub fn comparable_value(&self) -> serde_json::Value {
        let mut value = serde_json::to_value(self).expect("result serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("metadata");
        }
        value
    }

    pub fn comparable_json(&self) -> String {
        self.comparable_value().to_string()
    }

    pub fn summary(&self, tag: &str) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|s| s.tag == tag)
    }

    pub fn series(&self, tag: &str) -> Option<&EstimateSeries> {
        self.estimates.iter().find(|s| s.tag == tag)
    }

    pub fn comparison(&self, tag: &str, loss: Loss) -> Option<&PairedDifference> {
        self.comparisons.iter().find(|c| c.estimator == tag && c.loss == loss)
    }
}

struct IterationOutput {
    estimates: Vec<DVector<f64>>,
    extreme: Vec<bool>,
    failed: Vec<bool>,
    draws: Vec<DrawCounts>,
    setup_failed: bool,
}

struct Shared {
    zz: DMatrix<f64>,
    moments: CellMoments,
    gls: Option<ReducedFormFit>,
    noise: Option<NoiseModel>,
    ols: ReducedFormFit,
}

fn prepare(data: &Dataset, need_gls: bool) -> Result<Shared> {
    let moments = CellMoments::from_data(data);
    let ols = ols_reduced_form_with(data, &moments)?;
    let (gls, noise) = if need_gls {
        let gls = gls_with_covariances(data, &moments, &ols.cell_error_cov)?;
        let noise = noise_covariance(&ols, &gls);
        (Some(gls), Some(noise))
    } else {
        (None, None)
    };
    Ok(Shared { zz: data.zz(), moments, gls, noise, ols })
}

fn run_estimator(
    spec: &EstimatorSpec,
    data: &Dataset,
    shared: &Shared,
    stream: &Stream,
) -> Result<(DVector<f64>, bool, DrawCounts)> {
    let mode = SolveMode::Unchecked;
    let plain = |est: crate::estimators::StructuralEstimate| (est.beta_hat, est.extreme, DrawCounts::default());
    let dims = data.dims();
    Ok(match spec {
        EstimatorSpec::Tsls => {
            let beta = tsls_map(shared.ols.psi.as_slice(), dims.k, dims.d, &shared.zz);
            let extreme = beta.iter().any(|x| !x.is_finite());
            (beta, extreme, DrawCounts::default())
        }
        EstimatorSpec::OptimalIv => plain(optimal_iv_feasible(data, mode)?),
        EstimatorSpec::TwoStepGmm => plain(two_step_gmm_with(data, mode)?),
        EstimatorSpec::Fuller { c } => plain(fuller_with(data, *c, mode)?),
        EstimatorSpec::Unbiased { variance_convention } => plain(unbiased_scalar(&shared.ols, *variance_convention)?),
        EstimatorSpec::RbTsls { draws } => {
            let gls = shared.gls.as_ref().expect("prepared");
            let noise = shared.noise.as_ref().expect("prepared");
            let cfg = RBConfig::new(*draws, 1, stream.split_named(&spec.tag()))?;
            let rb = rb_tsls(gls, noise, &shared.zz, &cfg)?;
            (rb.estimate.beta_hat, rb.estimate.extreme, rb.draws)
        }
        EstimatorSpec::RbOptimalIv { draws, inner_draws } => {
            let gls = shared.gls.as_ref().expect("prepared");
            let noise = shared.noise.as_ref().expect("prepared");
            let cfg = RBConfig::new(*draws, *inner_draws, stream.split_named(&spec.tag()))?;
            let rb = rb_optimal_iv_with(&shared.moments, &shared.zz, gls, noise, &cfg)?;
            (rb.estimate.beta_hat, rb.estimate.extreme, rb.draws)
        }
    })
}

fn run_iteration(cfg: &ExperimentConfig, sampler: &Sampler, master: &Stream, i: usize) -> IterationOutput {
    let d = cfg.dgp.dims().d;
    let count = cfg.estimators.len();
    let nan = DVector::from_element(d, f64::NAN);
    let mut out = IterationOutput {
        estimates: vec![nan.clone(); count],
        extreme: vec![true; count],
        failed: vec![true; count],
        draws: vec![DrawCounts::default(); count],
        setup_failed: false,
    };
    let stream = master.split(i as u64);
    let need_gls = cfg
        .estimators
        .iter()
        .any(|s| matches!(s, EstimatorSpec::RbTsls { .. } | EstimatorSpec::RbOptimalIv { .. }));
    let setup = sampler
        .draw(&stream.split_named("data"))
        .and_then(|draw| prepare(&draw.data, need_gls).map(|shared| (draw.data, shared)));
    let (data, shared) = match setup {
        Ok(v) => v,
        Err(_) => {
            out.setup_failed = true;
            return out;
        }
    };
    for (e, spec) in cfg.estimators.iter().enumerate() {
        if let Ok((beta, extreme, draws)) = run_estimator(spec, &data, &shared, &stream) {
            out.estimates[e] = beta;
            out.extreme[e] = extreme;
            out.failed[e] = false;
            out.draws[e] = draws;
        }
    }
    out
}

/// Run with rayon's default pool size.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    run_experiment_with_workers(cfg, 0)
}

/// Run on `workers` threads (0 means rayon's default). The output apart from
/// metadata does not depend on `workers`.
pub fn run_experiment_with_workers(cfg: &ExperimentConfig, workers: usize) -> Result<ExperimentResult> {
    cfg.validate()?;
    let start = Instant::now();
    let sampler = Sampler::new(&cfg.dgp)?;
    let master = Stream::new(cfg.master_seed);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    let used_workers = pool.current_num_threads();
    let outputs: Vec<IterationOutput> = pool.install(|| {
        (0..cfg.iterations)
            .into_par_iter()
            .map(|i| run_iteration(cfg, &sampler, &master, i))
            .collect()
    });
    let mut result = aggregate(cfg, &outputs)?;
    result.metadata = RunMetadata {
        wall_time_seconds: start.elapsed().as_secs_f64(),
        workers: used_workers,
        iterations: cfg.iterations,
        crate_version: env!("CARGO_PKG_VERSION").to_owned(),
    };
    Ok(result)
}

fn aggregate(cfg: &ExperimentConfig, outputs: &[IterationOutput]) -> Result<ExperimentResult> {
    let beta = cfg.dgp.params.beta.clone();
    let d = beta.len();
    let mut estimators = Vec::new();
    let mut estimates = Vec::new();
    let mut finite_norms: Vec<Vec<Option<f64>>> = Vec::new();
    for (e, spec) in cfg.estimators.iter().enumerate() {
        let series: Vec<DVector<f64>> = outputs.iter().map(|o| o.estimates[e].clone()).collect();
        let norms: Vec<Option<f64>> = series
            .iter()
            .map(|b| if b.iter().all(|x| x.is_finite()) { Some((b - &beta).norm()) } else { None })
            .collect();
        let finite: Vec<f64> = norms.iter().flatten().copied().collect();
        let losses = cfg
            .losses
            .iter()
            .map(|&loss| {
                let vals: Vec<f64> = finite.iter().map(|&x| loss.of(x)).collect();
                let (value, mc_se) = mean_and_se(&vals);
                LossValue { loss, value, mc_se }
            })
            .collect();
        let first: Vec<f64> = series.iter().map(|b| b[0]).collect();
        let draws = outputs.iter().fold(DrawCounts::default(), |acc, o| DrawCounts {
            used: acc.used + o.draws[e].used,
            non_finite: acc.non_finite + o.draws[e].non_finite,
        });
        estimators.push(EstimatorSummary {
            tag: spec.tag(),
            label: spec.label(),
            spec: spec.clone(),
            losses,
            histogram: Histogram::from_values(&cfg.histogram, &first),
            non_finite: norms.iter().filter(|n| n.is_none()).count(),
            extreme: outputs.iter().filter(|o| o.extreme[e]).count(),
            failures: outputs.iter().filter(|o| o.failed[e]).count(),
            draws,
        });
        estimates.push(EstimateSeries {
            tag: spec.tag(),
            d,
            values: series.iter().flat_map(|b| b.iter().copied()).collect(),
        });
        finite_norms.push(norms);
    }

    let mut comparisons = Vec::new();
    for (e, spec) in cfg.estimators.iter().enumerate() {
        let Some(base_tag) = spec.baseline_tag() else { continue };
        let Some(b) = cfg.estimators.iter().position(|s| s.tag() == base_tag) else { continue };
        for &loss in &cfg.losses {
            let diffs: Vec<f64> = finite_norms[e]
                .iter()
                .zip(&finite_norms[b])
                .filter_map(|(x, y)| Some(loss.of((*x)?) - loss.of((*y)?)))
                .collect();
            let (mean_difference, mc_se) = mean_and_se(&diffs);
            comparisons.push(PairedDifference {
                estimator: spec.tag(),
                baseline: base_tag.to_owned(),
                loss,
                mean_difference,
                mc_se,
                iterations: diffs.len(),
            });
        }
    }

    Ok(ExperimentResult {
        schema_version: RESULT_SCHEMA_VERSION,
        config: cfg.clone(),
        beta: beta.iter().copied().collect(),
        concentration: to_rows(&cfg.dgp.concentration()?),
        estimators,
        comparisons,
        estimates,
        failed_iterations: outputs.iter().filter(|o| o.setup_failed).count(),
        metadata: RunMetadata::default(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Json,
    Csv,
}

/// Write `result` to `path`. CSV writes the loss table to `path` and the
/// histograms next to it as `<stem>_histogram.csv`. Returns the files written.
pub fn export_result(result: &ExperimentResult, path: &Path, format: ExportFormat) -> Result<Vec<PathBuf>> {
    match format {
        ExportFormat::Json => {
            let text = serde_json::to_string_pretty(result)?;
            fs::write(path, text)?;
            Ok(vec![path.to_path_buf()])
        }
        ExportFormat::Csv => {
            write_loss_csv(result, path)?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("result");
            let hist_path = path.with_file_name(format!("{stem}_histogram.csv"));
            write_histogram_csv(result, &hist_path)?;
            Ok(vec![path.to_path_buf(), hist_path])
        }
    }
}

pub fn import_result(path: &Path) -> Result<ExperimentResult> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn write_loss_csv(result: &ExperimentResult, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["estimator", "loss", "value", "mc_se"])?;
    for s in &result.estimators {
        for l in &s.losses {
            w.write_record([s.tag.clone(), l.loss.name().to_owned(), l.value.to_string(), l.mc_se.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_histogram_csv(result: &ExperimentResult, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["estimator", "bin_left", "bin_right", "count"])?;
    for s in &result.estimators {
        let h = &s.histogram;
        w.write_record([s.tag.clone(), "-inf".into(), h.lo.to_string(), h.underflow.to_string()])?;
        for (b, count) in h.counts.iter().enumerate() {
            let (lo, hi) = h.bin_edges(b);
            w.write_record([s.tag.clone(), lo.to_string(), hi.to_string(), count.to_string()])?;
        }
        w.write_record([s.tag.clone(), h.hi.to_string(), "inf".into(), h.overflow.to_string()])?;
        w.write_record([s.tag.clone(), "nan".into(), "nan".into(), h.non_finite.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Serde for `f64` that writes NaN and infinities as strings.
mod nonfinite {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    pub(super) enum Repr {
        Num(f64),
        Text(String),
    }

    pub(super) fn to_repr(v: f64) -> Repr {
        if v.is_finite() {
            Repr::Num(v)
        } else if v.is_nan() {
            Repr::Text("NaN".into())
        } else if v > 0.0 {
            Repr::Text("inf".into())
        } else {
            Repr::Text("-inf".into())
        }
    }

    pub(super) fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Text(s) => match s.as_str() {
                "NaN" => Ok(f64::NAN),
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(E::custom(format!("not a number: {other}"))),
            },
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }
}

mod nonfinite_vec {
    use super::nonfinite::{from_repr, to_repr, Repr};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let reprs: Vec<Repr> = v.iter().map(|&x| to_repr(x)).collect();
        reprs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Repr>::deserialize(d)?.into_iter().map(from_repr).collect()
    }
}
