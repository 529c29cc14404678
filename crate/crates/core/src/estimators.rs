//! Structural estimators of β, each available on a dataset and, where it is
//! a function of reduced-form estimates, on a [`ReducedFormFit`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, DEFAULT_CONDITION_CAP};
use crate::normal;
use crate::reduced_form::{ols_coefficient_matrix, split_psi, CellMoments, ReducedFormFit};
use crate::types::{Dataset, SolveMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Tsls,
    RbTsls,
    OptimalIv,
    RbOptimalIv,
    TwoStepGmm,
    Fuller,
    Unbiased,
}

impl EstimatorKind {
    pub fn label(&self) -> &'static str {
        match self {
            EstimatorKind::Tsls => "2SLS",
            EstimatorKind::RbTsls => "RB 2SLS",
            EstimatorKind::OptimalIv => "Optimal IV",
            EstimatorKind::RbOptimalIv => "RB optimal IV",
            EstimatorKind::TwoStepGmm => "Two-step GMM",
            EstimatorKind::Fuller => "Fuller",
            EstimatorKind::Unbiased => "Unbiased",
        }
    }
}

/// An estimate of β with diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralEstimate {
    pub beta_hat: DVector<f64>,
    pub estimator: EstimatorKind,
    /// First-stage coefficients estimated jointly with β (optimal IV only).
    pub aux_pi: Option<DMatrix<f64>>,
    /// Weight matrix used in the final plug-in step, when there is one.
    pub weight: Option<DMatrix<f64>>,
    /// Condition number of the matrix inverted to obtain β.
    pub condition: f64,
    /// Non-finite output, or a condition number beyond the default cap.
    pub extreme: bool,
}

impl StructuralEstimate {
    pub fn new(estimator: EstimatorKind, beta_hat: DVector<f64>, condition: f64) -> Self {
        let extreme = beta_hat.iter().any(|v| !v.is_finite()) || !(condition <= DEFAULT_CONDITION_CAP);
        StructuralEstimate { beta_hat, estimator, aux_pi: None, weight: None, condition, extreme }
    }

    fn with_weight(mut self, w: DMatrix<f64>) -> Self {
        self.weight = Some(w);
        self
    }
}

/// `(π'Mπ)^{-1} π'Mγ` and the condition number of `π'Mπ`.
pub(crate) fn weighted_plug_in(
    gamma: &DVector<f64>,
    pi: &DMatrix<f64>,
    weight: &DMatrix<f64>,
    mode: SolveMode,
) -> Result<(DVector<f64>, f64)> {
    let wpi = weight * pi;
    let lhs = pi.transpose() * &wpi;
    let rhs = wpi.transpose() * gamma;
    let condition = linalg::sym_condition(&lhs);
    if let SolveMode::Checked(cap) = mode {
        if !(condition <= cap) {
            return Err(Error::rank("pi'M pi", condition));
        }
    }
    let sol = linalg::solve_unchecked(&lhs, &DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice()));
    Ok((sol.column(0).into_owned(), condition))
}

/// 2SLS: `(π̂'(Z'Z)π̂)^{-1} π̂'(Z'Z)γ̂` from OLS reduced-form coefficients.
pub fn tsls(data: &Dataset) -> Result<StructuralEstimate> {
    tsls_with(data, SolveMode::default())
}

pub fn tsls_with(data: &Dataset, mode: SolveMode) -> Result<StructuralEstimate> {
    let coef = ols_coefficient_matrix(data)?;
    let d = data.dims().d;
    let gamma = coef.column(0).into_owned();
    let pi = coef.columns(1, d).into_owned();
    let zz = data.zz();
    let (beta, cond) = weighted_plug_in(&gamma, &pi, &zz, mode)?;
    Ok(StructuralEstimate::new(EstimatorKind::Tsls, beta, cond).with_weight(zz))
}

/// 2SLS as a function of any reduced-form fit and weight `M` (k×k).
pub fn tsls_from_fit(fit: &ReducedFormFit, weight: &DMatrix<f64>, mode: SolveMode) -> Result<StructuralEstimate> {
    let (beta, cond) = weighted_plug_in(&fit.gamma(), &fit.pi(), weight, mode)?;
    Ok(StructuralEstimate::new(EstimatorKind::Tsls, beta, cond).with_weight(weight.clone()))
}

/// 2SLS map `T(ψ)` evaluated without any guard; used inside Monte Carlo loops.
pub fn tsls_map(psi: &[f64], k: usize, d: usize, weight: &DMatrix<f64>) -> DVector<f64> {
    let (gamma, pi) = split_psi(psi, k, d);
    let wpi = weight * &pi;
    let lhs = pi.transpose() * &wpi;
    let rhs = wpi.transpose() * gamma;
    linalg::solve_unchecked(&lhs, &DMatrix::from_column_slice(d, 1, rhs.as_slice()))
        .column(0)
        .into_owned()
}

/// Per-cell instrument matrices `Â(z) = (I_{1+d} ⊗ z) Σ̂(z)^{-1}` where
/// `Σ̂(z)` is the second-moment matrix of `(ε̂, v̂)` in the cell.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalWeights {
    pub cells: Vec<DVector<f64>>,
    /// Second moments of `(ε̂, v̂)` per cell.
    pub moments: Vec<DMatrix<f64>>,
    /// `Σ̂(z)^{-1}` per cell.
    pub inverses: Vec<DMatrix<f64>>,
}

impl OptimalWeights {
    pub fn from_moments(cells: Vec<DVector<f64>>, moments: Vec<DMatrix<f64>>) -> Result<Self> {
        if cells.len() != moments.len() {
            return Err(Error::Dimension("one moment matrix per cell".into()));
        }
        let inverses = moments
            .iter()
            .enumerate()
            .map(|(c, m)| linalg::inverse_spd(m, &format!("structural error moments in cell {c}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(OptimalWeights { cells, moments, inverses })
    }

    /// `Â(z)` for cell `c`, of shape `((1+d)k) × (1+d)`.
    pub fn a_hat(&self, c: usize) -> DMatrix<f64> {
        let z = &self.cells[c];
        let inv = &self.inverses[c];
        let (k, p) = (z.len(), inv.nrows());
        DMatrix::from_fn(p * k, p, |r, f| z[r % k] * inv[(r / k, f)])
    }
}

/// Second moments of `(ε̂, v̂)` per cell from cell sufficient statistics, with
/// `ε̂ = y − x'b` and `v̂' = x' − z'π`.
pub(crate) fn structural_moments(
    moments: &CellMoments,
    beta: &DVector<f64>,
    pi: &DMatrix<f64>,
) -> Vec<DMatrix<f64>> {
    let d = beta.len();
    let p = 1 + d;
    let mut transform = DMatrix::identity(p, p);
    for j in 0..d {
        transform[(0, 1 + j)] = -beta[j];
    }
    let pit = pi.transpose();
    let offsets: Vec<DVector<f64>> = moments
        .partition
        .cells()
        .iter()
        .map(|z| {
            let mut o = DVector::zeros(p);
            o.rows_mut(1, d).copy_from(&(&pit * z));
            o
        })
        .collect();
    moments.residual_second_moments(&transform, &offsets)
}

/// Build `Â(z)` from 2SLS-type residuals `ε̂ = y − x'β_initial` and first-stage
/// residuals `v̂' = x' − z'π̂`.
pub fn build_optimal_weights(
    data: &Dataset,
    beta_initial: &DVector<f64>,
    pi_fit: &DMatrix<f64>,
) -> Result<OptimalWeights> {
    let dims = data.dims();
    if beta_initial.len() != dims.d || pi_fit.shape() != (dims.k, dims.d) {
        return Err(Error::Dimension("beta_initial / pi_fit shapes".into()));
    }
    let moments = CellMoments::from_data(data);
    build_optimal_weights_with(&moments, beta_initial, pi_fit)
}

pub(crate) fn build_optimal_weights_with(
    moments: &CellMoments,
    beta_initial: &DVector<f64>,
    pi_fit: &DMatrix<f64>,
) -> Result<OptimalWeights> {
    let p = 1 + beta_initial.len();
    for (c, &m) in moments.partition.counts().iter().enumerate() {
        if m < p + 1 {
            return Err(Error::Degenerate(format!(
                "instrument cell {c} has {m} observations, need at least {}",
                p + 1
            )));
        }
    }
    let second = structural_moments(moments, beta_initial, pi_fit);
    OptimalWeights::from_moments(moments.partition.cells().to_vec(), second)
}

/// Sample moment matrices of the optimal-IV problem (sums over observations):
/// `b = Σ Â(z)(I ⊗ z')`, `ag = Σ Â(z) G_i`, `aw = Σ Â(z)(y_i; x_i)` with
/// `G_i = [[x_i', 0], [0, I_d ⊗ z_i']]`.
#[derive(Debug, Clone)]
pub struct OptimalIvSystem {
    pub k: usize,
    pub d: usize,
    pub b: DMatrix<f64>,
    pub ag: DMatrix<f64>,
    pub aw: DVector<f64>,
}

impl OptimalIvSystem {
    pub(crate) fn assemble(moments: &CellMoments, inverses: &[DMatrix<f64>], d: usize) -> Self {
        let k = moments.partition.cells()[0].len();
        let p = 1 + d;
        let mut b = DMatrix::zeros(p * k, p * k);
        let mut ag = DMatrix::zeros(p * k, d + d * k);
        let mut aw = DVector::zeros(p * k);
        for (c, inv) in inverses.iter().enumerate() {
            let z = &moments.partition.cells()[c];
            let w_sum = &moments.w_sum[c];
            let count = moments.partition.counts()[c] as f64;
            for e in 0..p {
                for f in 0..p {
                    let s = inv[(e, f)];
                    if s == 0.0 {
                        continue;
                    }
                    let mut block = b.view_mut((e * k, f * k), (k, k));
                    block += &moments.zz[c] * s;
                    // Row block e of Â_c is z · inv[e, ·].
                    let mut awe = aw.rows_mut(e * k, k);
                    awe += z * (s * w_sum[f]);
                    if f == 0 {
                        // Σ G_i row 0 = (Σ x_i', 0).
                        for j in 0..d {
                            let mut col = ag.view_mut((e * k, j), (k, 1));
                            col += z * (s * w_sum[1 + j]);
                        }
                    } else {
                        // Σ G_i row f = (0, count · e_{f-1}' ⊗ z').
                        let j = f - 1;
                        let mut block = ag.view_mut((e * k, d + j * k), (k, k));
                        block += z * z.transpose() * (s * count);
                    }
                }
            }
        }
        OptimalIvSystem { k, d, b: linalg::symmetrize(&b), ag, aw }
    }

    /// `(β̂, vec π̂) = ag^→ aw` and the condition number of `ag'ag`.
    pub fn solve(&self, mode: SolveMode) -> Result<(DVector<f64>, f64)> {
        let gram = self.ag.transpose() * &self.ag;
        let condition = linalg::sym_condition(&gram);
        if let SolveMode::Checked(cap) = mode {
            if !(condition <= cap) {
                return Err(Error::rank("optimal IV moment matrix", condition));
            }
        }
        let rhs = self.ag.transpose() * &self.aw;
        let sol = linalg::solve_unchecked(&gram, &DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice()));
        Ok((sol.column(0).into_owned(), condition))
    }

    /// Weighted-least-squares decomposition of the same estimator.
    pub fn wls_map(&self) -> WlsMap {
        let (k, d) = (self.k, self.d);
        let pk = self.b.nrows();
        let psi = linalg::solve_unchecked(&self.b, &DMatrix::from_column_slice(pk, 1, self.aw.as_slice()))
            .column(0)
            .into_owned();
        let pi_block = linalg::solve_unchecked(&self.b, &self.ag.columns(0, d).into_owned());
        // Project out the nuisance columns B[:, k..] (the vec π coordinates).
        let bb = self.b.columns(k, pk - k).into_owned();
        let bt = self.b.columns(0, k).into_owned();
        let gram = bb.transpose() * &bb;
        let proj = &bb * linalg::solve_unchecked(&gram, &bb.transpose());
        let q = DMatrix::<f64>::identity(pk, pk) - proj;
        let h = linalg::symmetrize(&(bt.transpose() * &q * &bt));
        WlsMap {
            gamma: psi.rows(0, k).into_owned(),
            pi: pi_block.rows(0, k).into_owned(),
            psi,
            weight: h,
        }
    }
}

/// Optimal IV written as a plug-in map of WLS reduced-form estimates:
/// `β̂ = (π'Hπ)^{-1} π'Hγ` at `(γ, π) = (gamma, pi)`.
#[derive(Debug, Clone)]
pub struct WlsMap {
    /// WLS estimate of γ (top block of `psi`).
    pub gamma: DVector<f64>,
    /// WLS estimate of π from the regressor columns.
    pub pi: DMatrix<f64>,
    /// Full WLS estimate of `(γ, vec π)`.
    pub psi: DVector<f64>,
    /// k×k weight after profiling out the first-stage coordinates.
    pub weight: DMatrix<f64>,
}

impl WlsMap {
    pub fn beta(&self) -> DVector<f64> {
        self.beta_at(&self.gamma, &self.pi)
    }

    pub fn beta_at(&self, gamma: &DVector<f64>, pi: &DMatrix<f64>) -> DVector<f64> {
        let wpi = &self.weight * pi;
        let lhs = pi.transpose() * &wpi;
        let rhs = wpi.transpose() * gamma;
        linalg::solve_unchecked(&lhs, &DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice()))
            .column(0)
            .into_owned()
    }
}

fn match_weights(moments: &CellMoments, weights: &OptimalWeights) -> Result<Vec<DMatrix<f64>>> {
    moments
        .partition
        .cells()
        .iter()
        .map(|z| {
            weights
                .cells
                .iter()
                .position(|w| w == z)
                .map(|i| weights.inverses[i].clone())
                .ok_or_else(|| Error::Dimension(format!("no optimal weight for instrument cell {z:?}")))
        })
        .collect()
}

/// Optimal IV: `(β̂, vec π̂) = E_n[Â(z) G]^→ E_n[Â(z)(y; x)]`.
pub fn optimal_iv(data: &Dataset, weights: &OptimalWeights) -> Result<StructuralEstimate> {
    optimal_iv_with(data, weights, SolveMode::default())
}

pub fn optimal_iv_with(data: &Dataset, weights: &OptimalWeights, mode: SolveMode) -> Result<StructuralEstimate> {
    let dims = data.dims();
    let moments = CellMoments::from_data(data);
    let inverses = match_weights(&moments, weights)?;
    if inverses.iter().any(|m| m.nrows() != 1 + dims.d) {
        return Err(Error::Dimension("weights built for a different d".into()));
    }
    let system = OptimalIvSystem::assemble(&moments, &inverses, dims.d);
    let (theta, cond) = system.solve(mode)?;
    let beta = theta.rows(0, dims.d).into_owned();
    let pi = linalg::unvec(&theta.as_slice()[dims.d..], dims.k, dims.d);
    let mut est = StructuralEstimate::new(EstimatorKind::OptimalIv, beta, cond);
    est.aux_pi = Some(pi);
    est.weight = Some(system.wls_map().weight);
    Ok(est)
}

/// Feasible optimal IV: weights from OLS-based 2SLS residuals.
pub fn optimal_iv_feasible(data: &Dataset, mode: SolveMode) -> Result<StructuralEstimate> {
    let coef = ols_coefficient_matrix(data)?;
    let d = data.dims().d;
    let pi = coef.columns(1, d).into_owned();
    let initial = tsls_with(data, mode)?;
    let weights = build_optimal_weights(data, &initial.beta_hat, &pi)?;
    optimal_iv_with(data, &weights, mode)
}

/// GMM with moment weight `W` (k×k): minimizes `[Z'(Y − Xb)]' W [Z'(Y − Xb)]`.
pub fn gmm_with_weight(data: &Dataset, w: &DMatrix<f64>, mode: SolveMode) -> Result<StructuralEstimate> {
    let coef = ols_coefficient_matrix(data)?;
    let d = data.dims().d;
    let zz = data.zz();
    let metric = &zz * w * &zz;
    let gamma = coef.column(0).into_owned();
    let pi = coef.columns(1, d).into_owned();
    let (beta, cond) = weighted_plug_in(&gamma, &pi, &metric, mode)?;
    Ok(StructuralEstimate::new(EstimatorKind::TwoStepGmm, beta, cond).with_weight(w.clone()))
}

/// Two-step GMM with `Ŵ = E_n[(y − x'β̂_2SLS)² zz']^{-1}`.
pub fn two_step_gmm(data: &Dataset) -> Result<StructuralEstimate> {
    two_step_gmm_with(data, SolveMode::default())
}

pub fn two_step_gmm_with(data: &Dataset, mode: SolveMode) -> Result<StructuralEstimate> {
    let first = tsls_with(data, mode)?;
    let dims = data.dims();
    let resid = data.y() - data.x() * &first.beta_hat;
    let mut s = DMatrix::zeros(dims.k, dims.k);
    for i in 0..dims.n {
        let z = data.z().row(i).transpose();
        s += &z * z.transpose() * (resid[i] * resid[i]);
    }
    s /= dims.n as f64;
    let w = match mode {
        SolveMode::Checked(_) => linalg::inverse_spd(&s, "two-step GMM moment covariance")?,
        SolveMode::Unchecked => linalg::solve_unchecked(&s, &DMatrix::identity(dims.k, dims.k)),
    };
    gmm_with_weight(data, &w, mode)
}

/// Fuller: `(X'P̂X)^{-1} X'P̂Y` with `P̂ = P + (C/n)(I − P)`.
pub fn fuller(data: &Dataset, c: f64) -> Result<StructuralEstimate> {
    fuller_with(data, c, SolveMode::default())
}

pub fn fuller_with(data: &Dataset, c: f64, mode: SolveMode) -> Result<StructuralEstimate> {
    if !(c >= 0.0) || !c.is_finite() {
        return Err(Error::Config(format!("Fuller constant must be finite and nonnegative, got {c}")));
    }
    let dims = data.dims();
    let coef = ols_coefficient_matrix(data)?;
    let gamma = coef.column(0).into_owned();
    let pi = coef.columns(1, dims.d).into_owned();
    let zz = data.zz();
    // X'PX = π̂'(Z'Z)π̂ and X'PY = π̂'(Z'Z)γ̂, in the same order of operations as 2SLS.
    let wpi = &zz * &pi;
    let mut lhs = pi.transpose() * &wpi;
    let mut rhs = wpi.transpose() * &gamma;
    if c != 0.0 {
        let lam = c / dims.n as f64;
        let xx = data.x().transpose() * data.x();
        let xy = data.x().transpose() * data.y();
        lhs = &lhs + (xx - &lhs) * lam;
        rhs = &rhs + (xy - &rhs) * lam;
    }
    let condition = linalg::sym_condition(&lhs);
    if let SolveMode::Checked(cap) = mode {
        if !(condition <= cap) {
            return Err(Error::rank("X'P_Fuller X", condition));
        }
    }
    let sol = linalg::solve_unchecked(&lhs, &DMatrix::from_column_slice(dims.d, 1, rhs.as_slice()));
    Ok(StructuralEstimate::new(EstimatorKind::Fuller, sol.column(0).into_owned(), condition))
}

/// Which variance enters the slope correction of the unbiased estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceConvention {
    /// `σ̂_γπ / σ̂_γ²`.
    #[default]
    #[serde(alias = "printed")]
    AsPrinted,
    /// `σ̂_γπ / σ̂_π²`; makes the estimator exactly unbiased under normality.
    #[serde(alias = "pi")]
    PiVariance,
}

/// Unbiased estimator for `d = k = 1` with known sign `π > 0`.
///
/// Standard errors are taken from `fit.cond_cov` (finite-sample units), so the
/// statistic `t = π̂ / se(π̂)` is the √n-normalized ratio.
pub fn unbiased_scalar(fit: &ReducedFormFit, convention: VarianceConvention) -> Result<StructuralEstimate> {
    if fit.dims.d != 1 || fit.dims.k != 1 {
        return Err(Error::Dimension(format!(
            "unbiased estimator needs d = k = 1, got d={}, k={}",
            fit.dims.d, fit.dims.k
        )));
    }
    let gamma = fit.psi[0];
    let pi = fit.psi[1];
    let var_g = fit.cond_cov[(0, 0)];
    let var_p = fit.cond_cov[(1, 1)];
    let cov_gp = fit.cond_cov[(0, 1)];
    if !(var_p > 0.0) {
        return Err(Error::non_psd("variance of pi-hat", var_p));
    }
    let sd_p = var_p.sqrt();
    let ratio = match convention {
        VarianceConvention::AsPrinted => cov_gp / var_g,
        VarianceConvention::PiVariance => cov_gp / var_p,
    };
    let t = pi / sd_p;
    let beta = normal::mills_ratio(t) / sd_p * (gamma - ratio * pi) + ratio;
    Ok(StructuralEstimate::new(EstimatorKind::Unbiased, DVector::from_element(1, beta), 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{draw_dataset, builtin_config, DgpConfig, HeteroskedasticitySpec, InstrumentDesign};
    use crate::reduced_form::{ols_reduced_form, FitMethod};
    use crate::rng::{fill_standard_normal, Stream};
    use crate::types::{Dims, IdentificationMode, StructuralParams};

    fn weak_data(n: usize, seed: u64) -> Dataset {
        let cfg = builtin_config(IdentificationMode::Weak, n, 0);
        draw_dataset(&cfg, &Stream::new(seed)).unwrap()
    }

    fn strong_data(n: usize, seed: u64) -> Dataset {
        let cfg = builtin_config(IdentificationMode::Strong, n, 0);
        draw_dataset(&cfg, &Stream::new(seed)).unwrap()
    }

    fn just_identified(n: usize, seed: u64) -> Dataset {
        let cfg = DgpConfig::new(
            n,
            StructuralParams::new(
                DVector::from_element(1, 0.5),
                DMatrix::from_element(1, 1, 1.0),
                IdentificationMode::Strong,
                n,
            )
            .unwrap(),
            InstrumentDesign::uniform_signs(1),
            HeteroskedasticitySpec::new(vec![
                DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 2.0]),
                DMatrix::from_row_slice(2, 2, &[3.0, -0.5, -0.5, 0.5]),
            ])
            .unwrap(),
            0,
        )
        .unwrap();
        draw_dataset(&cfg, &Stream::new(seed)).unwrap()
    }

    /// `(X'P_Z X)^{-1} X'P_Z Y` with an explicit n×n projection matrix.
    fn projection_oracle(data: &Dataset) -> DVector<f64> {
        let z = data.z();
        let p = z * (z.transpose() * z).try_inverse().unwrap() * z.transpose();
        let xpx = data.x().transpose() * &p * data.x();
        let xpy = data.x().transpose() * &p * data.y();
        xpx.try_inverse().unwrap() * xpy
    }

    #[test]
    fn noiseless_just_identified_tsls_is_exact() {
        let z = DMatrix::from_row_slice(4, 2, &[1., 1., 1., -1., -1., 1., -1., -1.]);
        let pi = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.25, 2.0]);
        let beta = DVector::from_vec(vec![1.5, -0.5]);
        let x = &z * &pi;
        let data = Dataset::new(&x * &beta, x, z).unwrap();
        let est = tsls(&data).unwrap();
        assert!((est.beta_hat - beta).amax() < 1e-12);
    }

    #[test]
    fn tsls_matches_projection_oracle() {
        for seed in 0..5 {
            let data = strong_data(300, seed);
            let est = tsls(&data).unwrap();
            assert!((est.beta_hat - projection_oracle(&data)).amax() < 1e-10);
        }
    }

    #[test]
    fn tsls_dataset_and_fit_forms_agree() {
        let data = weak_data(500, 3);
        let fit = ols_reduced_form(&data).unwrap();
        let a = tsls(&data).unwrap();
        let b = tsls_from_fit(&fit, &data.zz(), SolveMode::default()).unwrap();
        assert!((a.beta_hat - b.beta_hat).amax() < 1e-10);
        let c = tsls_map(fit.psi.as_slice(), 3, 1, &data.zz());
        assert!((c - tsls(&data).unwrap().beta_hat).amax() < 1e-10);
    }

    #[test]
    fn estimators_ignore_observation_order() {
        let data = weak_data(400, 5);
        let perm: Vec<usize> = (0..400).rev().collect();
        let shuffled = data.permuted(&perm).unwrap();
        let pairs = [
            (tsls(&data).unwrap(), tsls(&shuffled).unwrap()),
            (two_step_gmm(&data).unwrap(), two_step_gmm(&shuffled).unwrap()),
            (fuller(&data, 1.0).unwrap(), fuller(&shuffled, 1.0).unwrap()),
            (
                optimal_iv_feasible(&data, SolveMode::default()).unwrap(),
                optimal_iv_feasible(&shuffled, SolveMode::default()).unwrap(),
            ),
        ];
        for (a, b) in pairs {
            assert!((a.beta_hat - b.beta_hat).amax() < 1e-9);
        }
    }

    #[test]
    fn single_shot_mode_rejects_degenerate_first_stage() {
        // X orthogonal to every instrument: π̂ = 0 exactly.
        let z = DMatrix::from_row_slice(4, 1, &[1., 1., -1., -1.]);
        let x = DMatrix::from_row_slice(4, 1, &[1., -1., 1., -1.]);
        let data = Dataset::new(DVector::from_vec(vec![1., 2., 3., 4.]), x, z).unwrap();
        assert!(matches!(tsls(&data), Err(Error::RankDeficient { .. })));
        let est = tsls_with(&data, SolveMode::Unchecked).unwrap();
        assert!(est.extreme);
    }

    #[test]
    fn fuller_zero_is_tsls_and_large_c_is_ols() {
        let data = weak_data(1000, 8);
        let n = 1000.0;
        let t = tsls(&data).unwrap().beta_hat;
        assert_eq!(fuller(&data, 0.0).unwrap().beta_hat, t);
        let x = data.x();
        let ols = (x.transpose() * x).try_inverse().unwrap() * x.transpose() * data.y();
        // P̂ = I exactly at C = n.
        assert!((fuller(&data, n).unwrap().beta_hat - &ols).amax() < 1e-10);
        // The exact C → ∞ limit regresses on the instrument-residualized data.
        let z = data.z();
        let m = DMatrix::<f64>::identity(1000, 1000) - z * (z.transpose() * z).try_inverse().unwrap() * z.transpose();
        let limit = (x.transpose() * &m * x).try_inverse().unwrap() * (x.transpose() * &m * data.y());
        let f = fuller(&data, 1e9).unwrap().beta_hat;
        assert!((&f - limit).amax() < 1e-4);
        // Under weak identification X'PX is O(1) against X'X = O(n), so the limit
        // is OLS up to O(1/n).
        println!("fuller(1e9) - ols = {}", (&f - &ols).amax());
        assert!((f - ols).amax() < 10.0 / n);
        assert!(fuller(&data, -1.0).is_err());
    }

    #[test]
    fn fuller_matches_dense_projection_oracle() {
        let data = strong_data(200, 9);
        let n = 200.0;
        let c = 1.0;
        let z = data.z();
        let p = z * (z.transpose() * z).try_inverse().unwrap() * z.transpose();
        let ph = &p + (DMatrix::<f64>::identity(200, 200) - &p) * (c / n);
        let oracle = (data.x().transpose() * &ph * data.x()).try_inverse().unwrap()
            * (data.x().transpose() * &ph * data.y());
        let est = fuller(&data, c).unwrap().beta_hat;
        assert!((est - oracle).amax() < 1e-10);
    }

    #[test]
    fn fuller_continuous_in_c() {
        let data = weak_data(1000, 10);
        for c in [0.5, 1.0, 2.0] {
            let h = 1e-6;
            let lo = fuller(&data, c - h).unwrap().beta_hat[0];
            let hi = fuller(&data, c + h).unwrap().beta_hat[0];
            let mid = fuller(&data, c).unwrap().beta_hat[0];
            assert!((hi - mid).abs() < 1e-4 && (mid - lo).abs() < 1e-4);
        }
    }

    #[test]
    fn gmm_just_identified_and_homoskedastic_reduce_to_tsls() {
        let data = just_identified(300, 1);
        let t = tsls(&data).unwrap().beta_hat;
        assert!((two_step_gmm(&data).unwrap().beta_hat - &t).amax() < 1e-10);

        let data = weak_data(500, 2);
        let t = tsls(&data).unwrap().beta_hat;
        let w = data.zz().try_inverse().unwrap() * 3.7;
        let g = gmm_with_weight(&data, &w, SolveMode::default()).unwrap().beta_hat;
        assert!((g - &t).amax() < 1e-8);
        let g2 = gmm_with_weight(&data, &(&w * 11.0), SolveMode::default()).unwrap().beta_hat;
        assert!((gmm_with_weight(&data, &w, SolveMode::default()).unwrap().beta_hat - g2).amax() < 1e-10);
    }

    #[test]
    fn a_hat_shapes() {
        let w = OptimalWeights::from_moments(
            vec![DVector::from_element(1, 1.0)],
            vec![DMatrix::identity(2, 2)],
        )
        .unwrap();
        assert_eq!(w.a_hat(0), DMatrix::<f64>::identity(2, 2));
        let z = DVector::from_vec(vec![1.0, -1.0, 1.0]);
        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let w = OptimalWeights::from_moments(vec![z.clone()], vec![sigma.clone()]).unwrap();
        let inv = sigma.try_inverse().unwrap();
        let mut kron = DMatrix::zeros(6, 2);
        for e in 0..2 {
            kron.view_mut((e * 3, e), (3, 1)).copy_from(&z);
        }
        assert!((w.a_hat(0) - kron * inv).amax() < 1e-12);
    }

    /// Per-observation oracle for the optimal-IV moment matrices.
    fn optimal_iv_oracle(data: &Dataset, weights: &OptimalWeights) -> DVector<f64> {
        let dims = data.dims();
        let (k, d, p) = (dims.k, dims.d, 1 + dims.d);
        let mut ag = DMatrix::zeros(p * k, d + d * k);
        let mut aw = DVector::zeros(p * k);
        for i in 0..dims.n {
            let z = data.z().row(i).transpose();
            let c = weights.cells.iter().position(|w| *w == z).unwrap();
            let a = weights.a_hat(c);
            let mut g = DMatrix::zeros(p, d + d * k);
            for j in 0..d {
                g[(0, j)] = data.x()[(i, j)];
                for l in 0..k {
                    g[(1 + j, d + j * k + l)] = z[l];
                }
            }
            let mut w = DVector::zeros(p);
            w[0] = data.y()[i];
            for j in 0..d {
                w[1 + j] = data.x()[(i, j)];
            }
            ag += &a * g;
            aw += &a * w;
        }
        let pinv = (ag.transpose() * &ag).try_inverse().unwrap() * ag.transpose();
        pinv * aw
    }

    #[test]
    fn optimal_iv_matches_per_observation_oracle() {
        let data = weak_data(600, 4);
        let b0 = tsls(&data).unwrap().beta_hat;
        let pi0 = ols_reduced_form(&data).unwrap().pi();
        let w = build_optimal_weights(&data, &b0, &pi0).unwrap();
        let est = optimal_iv(&data, &w).unwrap();
        let oracle = optimal_iv_oracle(&data, &w);
        assert!((&est.beta_hat - oracle.rows(0, 1)).amax() < 1e-9);
        let pi = est.aux_pi.unwrap();
        assert_eq!(pi.shape(), (3, 1));
        assert!((linalg::vec_of(&pi) - oracle.rows(1, 3)).amax() < 1e-9);
    }

    #[test]
    fn wls_decomposition_reproduces_optimal_iv() {
        for seed in 0..5 {
            let data = weak_data(1000, 20 + seed);
            let b0 = tsls(&data).unwrap().beta_hat;
            let pi0 = ols_reduced_form(&data).unwrap().pi();
            let w = build_optimal_weights(&data, &b0, &pi0).unwrap();
            let moments = CellMoments::from_data(&data);
            let sys = OptimalIvSystem::assemble(&moments, &w.inverses, 1);
            let (theta, _) = sys.solve(SolveMode::Unchecked).unwrap();
            let map = sys.wls_map();
            let rel = (map.beta()[0] - theta[0]).abs() / (1.0 + theta[0].abs());
            assert!(rel < 1e-8, "seed {seed}: {} vs {}", map.beta()[0], theta[0]);
        }
    }

    #[test]
    fn optimal_iv_just_identified_equals_tsls() {
        let data = just_identified(400, 2);
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.0]);
        let cells = crate::reduced_form::CellPartition::from_instruments(data.z()).cells().to_vec();
        let w = OptimalWeights::from_moments(cells.clone(), vec![sigma; cells.len()]).unwrap();
        let o = optimal_iv(&data, &w).unwrap().beta_hat;
        let t = tsls(&data).unwrap().beta_hat;
        assert!((o - &t).amax() < 1e-8);
        assert!((two_step_gmm(&data).unwrap().beta_hat - t).amax() < 1e-8);
    }

    #[test]
    fn structural_moments_converge_to_truth() {
        let n = 100_000;
        let data = strong_data(n, 6);
        let truth = crate::dgp::builtin_spec();
        let beta = DVector::from_element(1, 1.0);
        let pi = DMatrix::from_element(3, 1, 1.0);
        let w = build_optimal_weights(&data, &beta, &pi).unwrap();
        for (c, z) in w.cells.iter().enumerate() {
            let design = InstrumentDesign::uniform_signs(3);
            let idx = design.cells().iter().position(|x| x == z).unwrap();
            assert!((&w.moments[c] - &truth.covs()[idx]).amax() < 0.1 * truth.covs()[idx].amax().max(1.0));
        }
    }

    #[test]
    fn unbiased_requires_scalar_model() {
        let data = weak_data(200, 1);
        let fit = ols_reduced_form(&data).unwrap();
        assert!(matches!(
            unbiased_scalar(&fit, VarianceConvention::PiVariance),
            Err(Error::Dimension(_))
        ));
    }

    fn scalar_fit(gamma: f64, pi: f64, cov: [[f64; 2]; 2]) -> ReducedFormFit {
        ReducedFormFit {
            dims: Dims { n: 100, k: 1, d: 1 },
            psi: DVector::from_vec(vec![gamma, pi]),
            cond_cov: DMatrix::from_row_slice(2, 2, &[cov[0][0], cov[0][1], cov[1][0], cov[1][1]]),
            method: FitMethod::Ols,
            cell_error_cov: Vec::new(),
        }
    }

    #[test]
    fn unbiased_mills_ratio_asymptotics() {
        // σ_γπ = 0 and t = 8: β̂ ≈ γ̂/π̂ up to O(t^-2).
        let sd = 0.05;
        let fit = scalar_fit(0.3, 8.0 * sd, [[0.01, 0.0], [0.0, sd * sd]]);
        for conv in [VarianceConvention::AsPrinted, VarianceConvention::PiVariance] {
            let b = unbiased_scalar(&fit, conv).unwrap().beta_hat[0];
            let naive = 0.3 / (8.0 * sd);
            assert!((b / naive - 1.0).abs() < 0.02);
            assert_eq!(b, unbiased_scalar(&fit, conv).unwrap().beta_hat[0]);
        }
    }

    #[test]
    fn unbiased_is_unbiased_under_normality() {
        // (γ̂, π̂) ~ N((πβ, π), Σ) with π/σ_π = 3.
        let beta = 0.7;
        let pi = 0.3;
        let cov = [[0.02, 0.006], [0.006, 0.01]];
        let l = DMatrix::from_row_slice(2, 2, &[cov[0][0], cov[0][1], cov[1][0], cov[1][1]])
            .cholesky()
            .unwrap()
            .l();
        let reps = 10_000;
        let stream = Stream::new(77);
        let mut draws = Vec::with_capacity(reps);
        let mut xi = [0.0; 2];
        for r in 0..reps {
            let mut rng = stream.split(r as u64).rng();
            fill_standard_normal(&mut rng, &mut xi);
            let e = &l * DVector::from_column_slice(&xi);
            let fit = scalar_fit(pi * beta + e[0], pi + e[1], cov);
            draws.push(unbiased_scalar(&fit, VarianceConvention::PiVariance).unwrap().beta_hat[0]);
        }
        let mean = draws.iter().sum::<f64>() / reps as f64;
        let sd = (draws.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        let se = sd / (reps as f64).sqrt();
        assert!((mean - beta).abs() < 3.0 * se, "mean {mean}, se {se}");
    }
}
