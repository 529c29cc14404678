//! Local asymptotic Rao-Blackwellization: average a regular estimator's map
//! over the noise separating its reduced-form input from the efficient one.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{
    build_optimal_weights_with, structural_moments, tsls_map, EstimatorKind, OptimalIvSystem, OptimalWeights,
    StructuralEstimate,
};
use crate::linalg::{self, pairwise_mean};
use crate::reduced_form::{split_psi, CellMoments, NoiseModel, ReducedFormFit};
use crate::rng::Stream;
use crate::types::{Dataset, SolveMode};

/// Draw counts and randomness for one Rao-Blackwellization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RBConfig {
    pub m: usize,
    /// Inner draws per outer draw; used by the two-level optimal-IV variant only.
    pub m_inner: usize,
    pub stream: Stream,
    /// Fraction trimmed from each tail of the draw average.
    pub trim: f64,
}

impl RBConfig {
    pub fn new(m: usize, m_inner: usize, stream: Stream) -> Result<Self> {
        let cfg = RBConfig { m, m_inner, stream, trim: 0.0 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_trim(mut self, trim: f64) -> Result<Self> {
        self.trim = trim;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.m_inner == 0 {
            return Err(Error::Config("RB draw counts must be at least 1".into()));
        }
        if !(0.0..0.5).contains(&self.trim) {
            return Err(Error::Config(format!("trim must lie in [0, 0.5), got {}", self.trim)));
        }
        Ok(())
    }
}

/// Averaged map value with draw diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct RbOutcome {
    pub value: DVector<f64>,
    /// Sample standard deviation of the draws divided by √used, per coordinate.
    pub mc_se: DVector<f64>,
    pub used: usize,
    pub non_finite: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrawCounts {
    pub used: usize,
    pub non_finite: usize,
}

/// An RB estimate of β with draw diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct RbEstimate {
    pub estimate: StructuralEstimate,
    pub draws: DrawCounts,
}

fn trimmed_mean(values: &mut [f64], trim: f64) -> f64 {
    if trim == 0.0 {
        return pairwise_mean(values);
    }
    values.sort_by(f64::total_cmp);
    let cut = (trim * values.len() as f64).floor() as usize;
    pairwise_mean(&values[cut..values.len() - cut])
}

/// Combine per-draw outputs (rows of length `d`), skipping non-finite rows.
fn summarize(draws: &[DVector<f64>], d: usize, trim: f64) -> RbOutcome {
    let finite: Vec<&DVector<f64>> = draws.iter().filter(|v| v.iter().all(|x| x.is_finite())).collect();
    let used = finite.len();
    let non_finite = draws.len() - used;
    let mut value = DVector::from_element(d, f64::NAN);
    let mut mc_se = DVector::from_element(d, f64::NAN);
    if used > 0 {
        for c in 0..d {
            let mut col: Vec<f64> = finite.iter().map(|v| v[c]).collect();
            let mean = pairwise_mean(&col);
            if used > 1 {
                let dev: Vec<f64> = col.iter().map(|x| (x - mean).powi(2)).collect();
                let var = linalg::pairwise_sum(&dev) / (used - 1) as f64;
                mc_se[c] = (var / used as f64).sqrt();
            }
            value[c] = trimmed_mean(&mut col, trim);
        }
    }
    RbOutcome { value, mc_se, used, non_finite }
}

/// `E_m[T(ψ̂ + e_j)]` with `e_j ~ N(0, noise.cov)`; draw `j` uses `cfg.stream.split(j)`.
///
/// Zero noise returns `T(ψ̂)` without drawing.
pub fn rao_blackwellize<F>(t: F, psi_hat: &DVector<f64>, noise: &NoiseModel, cfg: &RBConfig) -> Result<RbOutcome>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    cfg.validate()?;
    if noise.dim() != psi_hat.len() {
        return Err(Error::Dimension(format!(
            "noise has dimension {}, psi_hat has {}",
            noise.dim(),
            psi_hat.len()
        )));
    }
    if noise.is_zero() {
        let value = t(psi_hat);
        let finite = value.iter().all(|x| x.is_finite());
        let d = value.len();
        return Ok(RbOutcome {
            value,
            mc_se: DVector::zeros(d),
            used: finite as usize,
            non_finite: (!finite) as usize,
        });
    }
    let p = psi_hat.len();
    let mut xi = DVector::zeros(p);
    let mut e = DVector::zeros(p);
    let mut draws = Vec::with_capacity(cfg.m);
    for j in 0..cfg.m {
        let mut rng = cfg.stream.split(j as u64).rng();
        noise.sample_into(&mut rng, &mut xi, &mut e);
        draws.push(t(&(psi_hat + &e)));
    }
    let d = draws[0].len();
    Ok(summarize(&draws, d, cfg.trim))
}

/// RB 2SLS: the 2SLS map with weight `weight` averaged around the FGLS reduced form.
pub fn rb_tsls(gls: &ReducedFormFit, noise: &NoiseModel, weight: &DMatrix<f64>, cfg: &RBConfig) -> Result<RbEstimate> {
    let (k, d) = (gls.dims.k, gls.dims.d);
    if weight.shape() != (k, k) {
        return Err(Error::Dimension("2SLS weight must be k x k".into()));
    }
    let out = rao_blackwellize(|psi| tsls_map(psi.as_slice(), k, d, weight), &gls.psi, noise, cfg)?;
    let extreme = out.used == 0;
    let mut estimate = StructuralEstimate::new(EstimatorKind::RbTsls, out.value, f64::NAN);
    estimate.extreme = extreme || estimate.beta_hat.iter().any(|x| !x.is_finite());
    estimate.weight = Some(weight.clone());
    Ok(RbEstimate { estimate, draws: DrawCounts { used: out.used, non_finite: out.non_finite } })
}

/// Optimal-IV weights built from FGLS-based residuals: `β₀ = T_2SLS(ψ̂_GLS)` and `π̂_GLS`.
pub fn gls_optimal_weights(data: &Dataset, gls: &ReducedFormFit) -> Result<OptimalWeights> {
    let moments = CellMoments::from_data(data);
    let (k, d) = (gls.dims.k, gls.dims.d);
    let beta0 = tsls_map(gls.psi.as_slice(), k, d, &data.zz());
    if beta0.iter().any(|x| !x.is_finite()) {
        return Err(Error::rank("initial 2SLS from the GLS reduced form", f64::INFINITY));
    }
    build_optimal_weights_with(&moments, &beta0, &gls.pi())
}

/// Two-level RB optimal IV.
///
/// Outer draw `j` perturbs the FGLS reduced form, which gives the initial 2SLS
/// and first-stage residuals and hence `Â_j(z)`. Inner draw `l` perturbs the
/// WLS inputs `(γ̂_j, π̂_j)` of the resulting plug-in map. Draw `(j, l)` uses
/// `cfg.stream.split(j).split(l)`; outer noise uses `cfg.stream.split(j)`.
/// Only β is averaged.
pub fn rb_optimal_iv(data: &Dataset, gls: &ReducedFormFit, noise: &NoiseModel, cfg: &RBConfig) -> Result<RbEstimate> {
    let moments = CellMoments::from_data(data);
    rb_optimal_iv_with(&moments, &data.zz(), gls, noise, cfg)
}

pub fn rb_optimal_iv_with(
    moments: &CellMoments,
    zz: &DMatrix<f64>,
    gls: &ReducedFormFit,
    noise: &NoiseModel,
    cfg: &RBConfig,
) -> Result<RbEstimate> {
    cfg.validate()?;
    let (k, d) = (gls.dims.k, gls.dims.d);
    if noise.dim() != gls.psi.len() {
        return Err(Error::Dimension("noise dimension does not match the reduced form".into()));
    }
    let p = 1 + d;
    for (c, &count) in moments.partition.counts().iter().enumerate() {
        if count < p + 1 {
            return Err(Error::Degenerate(format!("instrument cell {c} has {count} observations")));
        }
    }

    if noise.is_zero() {
        let sys = outer_system(moments, zz, gls.psi.as_slice(), k, d)
            .ok_or_else(|| Error::rank("optimal IV weights from the GLS reduced form", f64::INFINITY))?;
        let (theta, condition) = sys.solve(SolveMode::Unchecked)?;
        let beta = theta.rows(0, d).into_owned();
        let finite = beta.iter().all(|x| x.is_finite());
        let mut estimate = StructuralEstimate::new(EstimatorKind::RbOptimalIv, beta, condition);
        estimate.aux_pi = Some(linalg::unvec(&theta.as_slice()[d..], k, d));
        return Ok(RbEstimate {
            estimate,
            draws: DrawCounts { used: finite as usize, non_finite: (!finite) as usize },
        });
    }

    let dim = noise.dim();
    let mut xi = DVector::zeros(dim);
    let mut e = DVector::zeros(dim);
    let mut draws: Vec<DVector<f64>> = Vec::with_capacity(cfg.m * cfg.m_inner);
    let mut skipped_outer = 0usize;
    for j in 0..cfg.m {
        let outer = cfg.stream.split(j as u64);
        let mut rng = outer.rng();
        noise.sample_into(&mut rng, &mut xi, &mut e);
        let psi1 = &gls.psi + &e;
        let Some(sys) = outer_system(moments, zz, psi1.as_slice(), k, d) else {
            skipped_outer += 1;
            continue;
        };
        let map = sys.wls_map();
        let mut centre = DVector::zeros(dim);
        centre.rows_mut(0, k).copy_from(&map.gamma);
        centre.rows_mut(k, k * d).copy_from(&linalg::vec_of(&map.pi));
        for l in 0..cfg.m_inner {
            let mut rng = outer.split(l as u64).rng();
            noise.sample_into(&mut rng, &mut xi, &mut e);
            let psi2 = &centre + &e;
            let beta = if d == 1 {
                scalar_plug_in(&map.weight, &psi2.as_slice()[..k], &psi2.as_slice()[k..])
            } else {
                let (g, pi) = split_psi(psi2.as_slice(), k, d);
                map.beta_at(&g, &pi)
            };
            draws.push(beta);
        }
    }
    let mut out = if draws.is_empty() {
        RbOutcome {
            value: DVector::from_element(d, f64::NAN),
            mc_se: DVector::from_element(d, f64::NAN),
            used: 0,
            non_finite: 0,
        }
    } else {
        summarize(&draws, d, cfg.trim)
    };
    out.non_finite += skipped_outer * cfg.m_inner;
    let mut estimate = StructuralEstimate::new(EstimatorKind::RbOptimalIv, out.value, f64::NAN);
    estimate.extreme = out.used == 0 || estimate.beta_hat.iter().any(|x| !x.is_finite());
    Ok(RbEstimate { estimate, draws: DrawCounts { used: out.used, non_finite: out.non_finite } })
}

/// Optimal-IV moment system with weights from residuals at reduced form `psi`.
fn outer_system(moments: &CellMoments, zz: &DMatrix<f64>, psi: &[f64], k: usize, d: usize) -> Option<OptimalIvSystem> {
    let beta0 = tsls_map(psi, k, d, zz);
    if beta0.iter().any(|x| !x.is_finite()) {
        return None;
    }
    let (_, pi1) = split_psi(psi, k, d);
    let second = structural_moments(moments, &beta0, &pi1);
    let inverses = second
        .iter()
        .map(|m| linalg::inverse_spd(m, "perturbed structural moments").ok())
        .collect::<Option<Vec<_>>>()?;
    Some(OptimalIvSystem::assemble(moments, &inverses, d))
}

/// `π'Hγ / π'Hπ` for a single regressor.
fn scalar_plug_in(h: &DMatrix<f64>, gamma: &[f64], pi: &[f64]) -> DVector<f64> {
    let k = gamma.len();
    let (mut num, mut den) = (0.0, 0.0);
    for a in 0..k {
        let mut hp = 0.0;
        for b in 0..k {
            hp += h[(a, b)] * pi[b];
        }
        num += hp * gamma[a];
        den += hp * pi[a];
    }
    DVector::from_element(1, num / den)
}
