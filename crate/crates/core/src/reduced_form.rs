//! Reduced-form estimation: equation-by-equation OLS, per-cell conditional
//! covariances, one-step feasible GLS on the stacked system and the noise
//! separating the two.
//!
//! Coefficients are stacked as `ψ = (γ, vec π)` with `vec` column-major, so
//! block `e` of ψ (length `k`) holds the coefficients of equation `e` in the
//! stacked response `(Y, X_1, ..., X_d)`.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, unvec};
use crate::rng::fill_standard_normal;
use crate::types::{Dataset, Dims};

/// Groups observations by identical instrument rows.
///
/// Cells are sorted lexicographically so the grouping does not depend on
/// observation order.
#[derive(Debug, Clone, PartialEq)]
pub struct CellPartition {
    cells: Vec<DVector<f64>>,
    index: Vec<usize>,
    counts: Vec<usize>,
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

impl CellPartition {
    pub fn from_instruments(z: &DMatrix<f64>) -> Self {
        let n = z.nrows();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| z.row(i).iter().copied().collect()).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| lex_cmp(&rows[a], &rows[b]));
        let mut cells: Vec<DVector<f64>> = Vec::new();
        let mut index = vec![0usize; n];
        let mut counts = Vec::new();
        let mut last: Option<&Vec<f64>> = None;
        for &i in &order {
            if last.is_none_or(|l| lex_cmp(l, &rows[i]) != Ordering::Equal) {
                cells.push(DVector::from_vec(rows[i].clone()));
                counts.push(0);
                last = Some(&rows[i]);
            }
            let c = cells.len() - 1;
            index[i] = c;
            counts[c] += 1;
        }
        CellPartition { cells, index, counts }
    }

    pub fn cells(&self) -> &[DVector<f64>] {
        &self.cells
    }

    /// Cell id of each observation.
    pub fn index(&self) -> &[usize] {
        &self.index
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    fn require_occupancy(&self, min: usize) -> Result<()> {
        for (c, &m) in self.counts.iter().enumerate() {
            if m < min {
                return Err(Error::Degenerate(format!(
                    "instrument cell {c} has {m} observations, need at least {min}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-cell sufficient statistics of a dataset with discrete instruments.
///
/// With `w_i = (y_i, x_i')'`: `zz[c] = Σ z z'`, `zw[c] = Σ z w'`,
/// `w_sum[c] = Σ w`, `ww[c] = Σ w w'`, all over observations in cell `c`.
#[derive(Debug, Clone)]
pub struct CellMoments {
    pub partition: CellPartition,
    pub zz: Vec<DMatrix<f64>>,
    pub zw: Vec<DMatrix<f64>>,
    pub w_sum: Vec<DVector<f64>>,
    pub ww: Vec<DMatrix<f64>>,
}

impl CellMoments {
    pub fn from_data(data: &Dataset) -> Self {
        let dims = data.dims();
        let (k, p) = (dims.k, 1 + dims.d);
        let partition = CellPartition::from_instruments(data.z());
        let m = partition.len();
        let mut w_sum = vec![DVector::zeros(p); m];
        let mut ww = vec![DMatrix::zeros(p, p); m];
        let mut w = DVector::zeros(p);
        for i in 0..dims.n {
            let c = partition.index[i];
            w[0] = data.y()[i];
            for j in 0..dims.d {
                w[1 + j] = data.x()[(i, j)];
            }
            w_sum[c] += &w;
            ww[c] += &w * w.transpose();
        }
        let mut zz = Vec::with_capacity(m);
        let mut zw = Vec::with_capacity(m);
        for ((z, &count), ws) in partition.cells.iter().zip(&partition.counts).zip(&w_sum) {
            zz.push(z * z.transpose() * count as f64);
            zw.push(z * ws.transpose());
        }
        debug_assert_eq!(zz.first().map(|m| m.nrows()), Some(k));
        CellMoments { partition, zz, zw, w_sum, ww }
    }

    pub fn len(&self) -> usize {
        self.partition.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partition.is_empty()
    }

    /// Per-cell mean of `r r'` with `r_i = L w_i - offset_c`.
    pub fn residual_second_moments(
        &self,
        transform: &DMatrix<f64>,
        offsets: &[DVector<f64>],
    ) -> Vec<DMatrix<f64>> {
        (0..self.len())
            .map(|c| {
                let count = self.partition.counts[c] as f64;
                let lw = transform * &self.w_sum[c] / count;
                let lwwl = transform * &self.ww[c] * transform.transpose() / count;
                let o = &offsets[c];
                let cross = &lw * o.transpose();
                linalg::symmetrize(&(lwwl - &cross - cross.transpose() + o * o.transpose()))
            })
            .collect()
    }
}

/// The stacked system `(Y, vec X) = [[Z, 0], [0, I_d ⊗ Z]] ψ + Ũ` in dense form.
#[derive(Debug, Clone)]
pub struct StackedSystem {
    pub response: DVector<f64>,
    pub design: DMatrix<f64>,
    pub cell_index: Vec<usize>,
}

impl StackedSystem {
    pub fn from_data(data: &Dataset) -> Self {
        let dims = data.dims();
        let (n, k, p) = (dims.n, dims.k, 1 + dims.d);
        let mut response = DVector::zeros(n * p);
        let mut design = DMatrix::zeros(n * p, k * p);
        for e in 0..p {
            for i in 0..n {
                response[e * n + i] = if e == 0 { data.y()[i] } else { data.x()[(i, e - 1)] };
                for j in 0..k {
                    design[(e * n + i, e * k + j)] = data.z()[(i, j)];
                }
            }
        }
        let cell_index = CellPartition::from_instruments(data.z()).index;
        StackedSystem { response, design, cell_index }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMethod {
    Ols,
    Fgls,
}

/// Reduced-form coefficients with their conditional covariance given `Z`.
#[derive(Debug, Clone)]
pub struct ReducedFormFit {
    pub dims: Dims,
    /// `(γ, vec π)`, length `k(1+d)`.
    pub psi: DVector<f64>,
    /// `Var(ψ̂ | Z)` in finite-sample units.
    pub cond_cov: DMatrix<f64>,
    pub method: FitMethod,
    /// Per-cell covariance of the reduced-form errors `(u, v)` used by the fit.
    pub cell_error_cov: Vec<DMatrix<f64>>,
}

impl ReducedFormFit {
    pub fn gamma(&self) -> DVector<f64> {
        self.psi.rows(0, self.dims.k).into_owned()
    }

    pub fn pi(&self) -> DMatrix<f64> {
        let k = self.dims.k;
        unvec(&self.psi.as_slice()[k..], k, self.dims.d)
    }
}

/// Split `ψ` into `(γ, π)`.
pub fn split_psi(psi: &[f64], k: usize, d: usize) -> (DVector<f64>, DMatrix<f64>) {
    (DVector::from_column_slice(&psi[..k]), unvec(&psi[k..k * (1 + d)], k, d))
}

/// `[γ̂ π̂] = (Z'Z)^{-1} Z'[Y X]` as a k×(1+d) matrix.
pub fn ols_coefficient_matrix(data: &Dataset) -> Result<DMatrix<f64>> {
    let dims = data.dims();
    let mut w = DMatrix::zeros(dims.n, 1 + dims.d);
    w.set_column(0, data.y());
    w.columns_mut(1, dims.d).copy_from(data.x());
    let zz = data.zz();
    let zw = data.z().transpose() * w;
    linalg::solve_spd_checked(&zz, &zw, linalg::DEFAULT_CONDITION_CAP, "Z'Z")
}

/// OLS `ψ̂` without any covariance estimation.
pub fn ols_coefficients(data: &Dataset) -> Result<DVector<f64>> {
    Ok(linalg::vec_of(&ols_coefficient_matrix(data)?))
}

/// Per-cell average of `(û, v̂')'(û, v̂')` with `û = y − z'γ`, `v̂' = x' − z'π`.
pub fn estimate_cell_covariance(data: &Dataset, psi: &DVector<f64>) -> Result<Vec<DMatrix<f64>>> {
    let partition = CellPartition::from_instruments(data.z());
    cell_covariance_on(data, &partition, psi)
}

fn cell_covariance_on(
    data: &Dataset,
    partition: &CellPartition,
    psi: &DVector<f64>,
) -> Result<Vec<DMatrix<f64>>> {
    let dims = data.dims();
    let (k, d, p) = (dims.k, dims.d, 1 + dims.d);
    if psi.len() != dims.psi_len() {
        return Err(Error::Dimension(format!("psi has length {}, expected {}", psi.len(), k * p)));
    }
    partition.require_occupancy(p + 1)?;
    let coef = unvec(psi.as_slice(), k, p);
    let mut sums = vec![DMatrix::zeros(p, p); partition.len()];
    let mut r = DVector::zeros(p);
    for i in 0..dims.n {
        let zi = data.z().row(i);
        let fitted = zi * &coef; // 1×p
        r[0] = data.y()[i] - fitted[0];
        for j in 0..d {
            r[1 + j] = data.x()[(i, j)] - fitted[1 + j];
        }
        sums[partition.index[i]] += &r * r.transpose();
    }
    Ok(sums
        .into_iter()
        .zip(&partition.counts)
        .map(|(s, &m)| s / m as f64)
        .collect())
}

/// Equation-by-equation OLS with a cell-robust sandwich covariance.
pub fn ols_reduced_form(data: &Dataset) -> Result<ReducedFormFit> {
    let moments = CellMoments::from_data(data);
    ols_reduced_form_with(data, &moments)
}

pub fn ols_reduced_form_with(data: &Dataset, moments: &CellMoments) -> Result<ReducedFormFit> {
    let dims = data.dims();
    let (k, p) = (dims.k, 1 + dims.d);
    let psi = ols_coefficients(data)?;
    let omegas = cell_covariance_on(data, &moments.partition, &psi)?;
    let zz_inv = linalg::inverse_spd(&data.zz(), "Z'Z")?;
    let mut cond_cov = DMatrix::zeros(k * p, k * p);
    for e in 0..p {
        for f in 0..p {
            let mut meat = DMatrix::zeros(k, k);
            for (c, om) in omegas.iter().enumerate() {
                meat += &moments.zz[c] * om[(e, f)];
            }
            let block = &zz_inv * meat * &zz_inv;
            cond_cov.view_mut((e * k, f * k), (k, k)).copy_from(&block);
        }
    }
    Ok(ReducedFormFit {
        dims,
        psi,
        cond_cov: linalg::symmetrize(&cond_cov),
        method: FitMethod::Ols,
        cell_error_cov: omegas,
    })
}

/// One-step feasible GLS: cell covariances from the OLS residuals.
pub fn fgls_reduced_form(data: &Dataset) -> Result<ReducedFormFit> {
    let moments = CellMoments::from_data(data);
    let ols = ols_reduced_form_with(data, &moments)?;
    gls_with_covariances(data, &moments, &ols.cell_error_cov)
}

/// GLS on the stacked system given per-cell error covariances (cells in
/// [`CellPartition`] order).
pub fn gls_with_covariances(
    data: &Dataset,
    moments: &CellMoments,
    covs: &[DMatrix<f64>],
) -> Result<ReducedFormFit> {
    let dims = data.dims();
    let (k, p) = (dims.k, 1 + dims.d);
    if covs.len() != moments.len() {
        return Err(Error::Dimension(format!(
            "{} covariances for {} cells",
            covs.len(),
            moments.len()
        )));
    }
    let weights = covs
        .iter()
        .enumerate()
        .map(|(c, om)| linalg::inverse_spd(om, &format!("residual covariance of cell {c}")))
        .collect::<Result<Vec<_>>>()?;
    let mut normal = DMatrix::zeros(k * p, k * p);
    let mut rhs = DVector::zeros(k * p);
    for (c, w) in weights.iter().enumerate() {
        for e in 0..p {
            for f in 0..p {
                let mut block = normal.view_mut((e * k, f * k), (k, k));
                block += &moments.zz[c] * w[(e, f)];
                let mut r = rhs.rows_mut(e * k, k);
                r += moments.zw[c].column(f) * w[(e, f)];
            }
        }
    }
    let normal = linalg::symmetrize(&normal);
    let cond_cov = linalg::inverse_spd(&normal, "GLS normal matrix")?;
    let psi = &cond_cov * rhs;
    Ok(ReducedFormFit {
        dims,
        psi,
        cond_cov,
        method: FitMethod::Fgls,
        cell_error_cov: covs.to_vec(),
    })
}

/// Gaussian noise `N(0, cov)` with a sampling factor.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    pub cov: DMatrix<f64>,
    pub factor: DMatrix<f64>,
    /// Negative eigenvalues removed by the PSD projection.
    pub clipped: Vec<f64>,
}

impl NoiseModel {
    pub fn zero(dim: usize) -> Self {
        NoiseModel { cov: DMatrix::zeros(dim, dim), factor: DMatrix::zeros(dim, dim), clipped: Vec::new() }
    }

    /// Project `cov` onto the PSD cone and factor it.
    pub fn from_cov(cov: &DMatrix<f64>) -> Self {
        let proj = linalg::project_psd(cov);
        NoiseModel { cov: proj.matrix, factor: proj.factor, clipped: proj.clipped }
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn is_zero(&self) -> bool {
        self.factor.iter().all(|&v| v == 0.0)
    }

    /// Sum of |clipped eigenvalues|.
    pub fn clipped_mass(&self) -> f64 {
        self.clipped.iter().map(|v| v.abs()).sum()
    }

    /// One draw `factor · ξ`, `ξ ~ N(0, I)`, written into `out`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, xi: &mut DVector<f64>, out: &mut DVector<f64>) {
        fill_standard_normal(rng, xi.as_mut_slice());
        self.factor.mul_to(xi, out);
    }
}

/// `ProjectPSD(Var(ψ̂_OLS|Z) − Var(ψ̂_GLS|Z))`.
pub fn noise_covariance(ols: &ReducedFormFit, gls: &ReducedFormFit) -> NoiseModel {
    NoiseModel::from_cov(&(&ols.cond_cov - &gls.cond_cov))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{draw_dataset, builtin_config, DgpConfig, HeteroskedasticitySpec, InstrumentDesign};
    use crate::rng::Stream;
    use crate::types::{IdentificationMode, StructuralParams};

    fn sign_instruments(n: usize, k: usize, stream: &Stream) -> DMatrix<f64> {
        let mut rng = stream.rng();
        DMatrix::from_fn(n, k, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 })
    }

    #[test]
    fn noiseless_fit_is_exact() {
        let z = sign_instruments(64, 3, &Stream::new(1));
        let gamma0 = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let pi0 = DMatrix::from_column_slice(3, 1, &[1.0, 0.25, -0.5]);
        let data = Dataset::new(&z * &gamma0, &z * &pi0, z.clone()).unwrap();
        let ols = ols_coefficients(&data).unwrap();
        assert!((ols.rows(0, 3) - &gamma0).amax() < 1e-12);
        assert!((ols.rows(3, 3) - pi0.column(0)).amax() < 1e-12);
    }

    #[test]
    fn two_point_example() {
        let z = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]);
        let x = DMatrix::from_column_slice(2, 1, &[2.0, -2.0]);
        let data = Dataset::new(DVector::from_vec(vec![0.0, 1.0]), x, z).unwrap();
        let psi = ols_coefficients(&data).unwrap();
        assert!((psi[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn scaling_y_scales_gamma_only() {
        let cfg = builtin_config(IdentificationMode::Weak, 200, 0);
        let data = draw_dataset(&cfg, &Stream::new(4)).unwrap();
        let scaled = Dataset::new(data.y() * 3.0, data.x().clone(), data.z().clone()).unwrap();
        let a = ols_coefficients(&data).unwrap();
        let b = ols_coefficients(&scaled).unwrap();
        assert!((b.rows(0, 3) - a.rows(0, 3) * 3.0).amax() < 1e-12);
        assert!((b.rows(3, 3) - a.rows(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn constant_residual_outer_product() {
        // One cell, residuals identically (1, 2).
        let z = DMatrix::from_element(4, 1, 1.0);
        let data = Dataset::new(
            DVector::from_element(4, 1.0),
            DMatrix::from_element(4, 1, 2.0),
            z,
        )
        .unwrap();
        let psi = DVector::from_vec(vec![0.0, 0.0]);
        let covs = estimate_cell_covariance(&data, &psi).unwrap();
        assert_eq!(covs[0], DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]));
    }

    #[test]
    fn empty_or_sparse_cell_is_degenerate() {
        let z = DMatrix::from_row_slice(5, 2, &[1., 1., 1., 1., 1., 1., 1., -1., -1., -1.]);
        let data = Dataset::new(DVector::zeros(5), DMatrix::zeros(5, 1), z).unwrap();
        let psi = DVector::zeros(4);
        assert!(matches!(estimate_cell_covariance(&data, &psi), Err(Error::Degenerate(_))));
        assert!(matches!(fgls_reduced_form(&data), Err(Error::Degenerate(_))));
    }

    #[test]
    fn homoskedastic_cell_covariances_converge() {
        let n = 100_000;
        let truth = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let cfg = DgpConfig::new(
            n,
            StructuralParams::new(
                DVector::from_element(1, 1.0),
                DMatrix::from_element(3, 1, 1.0),
                IdentificationMode::Strong,
                n,
            )
            .unwrap(),
            InstrumentDesign::uniform_signs(3),
            HeteroskedasticitySpec::homoskedastic(truth.clone(), 8).unwrap(),
            0,
        )
        .unwrap();
        let data = draw_dataset(&cfg, &Stream::new(8)).unwrap();
        let psi = ols_coefficients(&data).unwrap();
        // (u, v) = (ε + v β, v) with β = 1.
        let l = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let uv_truth = &l * &truth * l.transpose();
        for cov in estimate_cell_covariance(&data, &psi).unwrap() {
            assert!((cov - &uv_truth).amax() < 0.1);
        }
    }

    #[test]
    fn cell_moment_shortcut_matches_direct_residuals() {
        let cfg = builtin_config(IdentificationMode::Weak, 400, 0);
        let data = draw_dataset(&cfg, &Stream::new(12)).unwrap();
        let moments = CellMoments::from_data(&data);
        let psi = ols_coefficients(&data).unwrap();
        let direct = estimate_cell_covariance(&data, &psi).unwrap();
        let coef = unvec(psi.as_slice(), 3, 2);
        let offsets: Vec<_> = moments.partition.cells().iter().map(|z| coef.transpose() * z).collect();
        let via = moments.residual_second_moments(&DMatrix::identity(2, 2), &offsets);
        for (a, b) in direct.iter().zip(&via) {
            assert!((a - b).amax() < 1e-10);
        }
    }

    #[test]
    fn fgls_matches_dense_stacked_oracle() {
        let cfg = builtin_config(IdentificationMode::Strong, 160, 0);
        let data = draw_dataset(&cfg, &Stream::new(21)).unwrap();
        let fit = fgls_reduced_form(&data).unwrap();
        let sys = StackedSystem::from_data(&data);
        let n = 160;
        // Dense Ω^{-1}: observation i occupies rows {i, n + i}.
        let mut w = DMatrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            let inv = fit.cell_error_cov[sys.cell_index[i]].clone().try_inverse().unwrap();
            for e in 0..2 {
                for f in 0..2 {
                    w[(e * n + i, f * n + i)] = inv[(e, f)];
                }
            }
        }
        let xtw = sys.design.transpose() * &w;
        let normal = &xtw * &sys.design;
        let oracle_cov = normal.clone().try_inverse().unwrap();
        let oracle_psi = &oracle_cov * (&xtw * &sys.response);
        assert!((&fit.psi - oracle_psi).amax() < 1e-10);
        assert!((&fit.cond_cov - oracle_cov).amax() < 1e-10);
    }

    #[test]
    fn fgls_equals_ols_with_common_covariance() {
        let cfg = builtin_config(IdentificationMode::Weak, 400, 0);
        let data = draw_dataset(&cfg, &Stream::new(31)).unwrap();
        let moments = CellMoments::from_data(&data);
        let ols = ols_coefficients(&data).unwrap();
        for common in [
            DMatrix::identity(2, 2) * 2.5,
            DMatrix::from_row_slice(2, 2, &[2.0, -0.7, -0.7, 1.0]),
        ] {
            let covs = vec![common; moments.len()];
            let gls = gls_with_covariances(&data, &moments, &covs).unwrap();
            assert!((&gls.psi - &ols).amax() < 1e-8);
        }
    }

    #[test]
    fn shifting_y_by_instruments_shifts_gamma() {
        let cfg = builtin_config(IdentificationMode::Weak, 300, 0);
        let data = draw_dataset(&cfg, &Stream::new(41)).unwrap();
        let c = DVector::from_vec(vec![0.3, -0.2, 1.5]);
        let shifted = Dataset::new(data.y() + data.z() * &c, data.x().clone(), data.z().clone()).unwrap();
        for f in [ols_reduced_form, fgls_reduced_form] {
            let a = f(&data).unwrap();
            let b = f(&shifted).unwrap();
            assert!((b.gamma() - a.gamma() - &c).amax() < 1e-10);
            assert!((b.pi() - a.pi()).amax() < 1e-10);
        }
    }

    #[test]
    fn fgls_is_no_less_precise_than_ols() {
        for seed in 0..20 {
            let cfg = builtin_config(IdentificationMode::Weak, 1000, 0);
            let data = draw_dataset(&cfg, &Stream::new(seed)).unwrap();
            let ols = ols_reduced_form(&data).unwrap();
            let gls = fgls_reduced_form(&data).unwrap();
            assert!(gls.cond_cov.trace() <= ols.cond_cov.trace());
        }
    }

    #[test]
    fn noise_covariance_arithmetic() {
        let cfg = builtin_config(IdentificationMode::Weak, 300, 0);
        let data = draw_dataset(&cfg, &Stream::new(1)).unwrap();
        let fit = ols_reduced_form(&data).unwrap();
        let same = noise_covariance(&fit, &fit);
        assert_eq!(same.cov.amax(), 0.0);
        assert!(same.is_zero());

        let mut a = fit.clone();
        let mut b = fit.clone();
        a.cond_cov = DMatrix::from_diagonal_element(2, 2, 2.0);
        b.cond_cov = DMatrix::identity(2, 2);
        let nm = noise_covariance(&a, &b);
        assert!((nm.cov - DMatrix::<f64>::identity(2, 2)).amax() < 1e-14);
    }

    #[test]
    fn noise_covariance_is_psd_with_small_clipping() {
        for seed in 0..100 {
            let cfg = builtin_config(IdentificationMode::Weak, 1000, 0);
            let data = draw_dataset(&cfg, &Stream::new(1000 + seed)).unwrap();
            let ols = ols_reduced_form(&data).unwrap();
            let gls = fgls_reduced_form(&data).unwrap();
            let nm = noise_covariance(&ols, &gls);
            let (vals, _) = linalg::sym_eigen(&nm.cov);
            assert!(vals[0] >= -1e-15 * nm.cov.amax());
            assert!(nm.clipped_mass() < 0.01 * nm.cov.trace());
            assert!((&nm.factor * nm.factor.transpose() - &nm.cov).amax() < 1e-10);
        }
    }
}
