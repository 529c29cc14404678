//! Normalization of the first stage by whitening and SVD, and the block
//! representation of 2SLS when π is close to reduced rank.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::reduced_form::ReducedFormFit;
use crate::types::Dataset;

pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankSource {
    Detected,
    Supplied,
}

/// Transforms taking `(E[zz'], π)` to `(I, S)` with `S = U' E[zz']^{1/2} π V` diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedModel {
    /// `E[zz']^{-1/2}`.
    pub whitening: DMatrix<f64>,
    /// `E[zz']^{1/2}`.
    pub root: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    /// Normalized first stage, k×d, diagonal and nonnegative.
    pub s: DMatrix<f64>,
    pub rank: usize,
    /// Number of singular values above `tol · S₁₁`, whatever `rank_source` says.
    pub detected_rank: usize,
    pub rank_source: RankSource,
}

impl NormalizedModel {
    pub fn k(&self) -> usize {
        self.u.nrows()
    }

    pub fn d(&self) -> usize {
        self.v.nrows()
    }

    /// Instrument map `z ↦ U' E[zz']^{-1/2} z`, as a k×k matrix.
    pub fn instrument_map(&self) -> DMatrix<f64> {
        self.u.transpose() * &self.whitening
    }

    /// `Z ↦ Z E[zz']^{-1/2} U`, `X ↦ X V`; `Y` unchanged.
    pub fn transform_dataset(&self, data: &Dataset) -> Result<Dataset> {
        let dims = data.dims();
        if dims.k != self.k() || dims.d != self.d() {
            return Err(Error::Dimension("dataset dimensions differ from the normalized model".into()));
        }
        let z = data.z() * self.instrument_map().transpose();
        let x = data.x() * &self.v;
        Dataset::new(data.y().clone(), x, z)
    }

    /// `β ↦ V'β`.
    pub fn transform_beta(&self, beta: &DVector<f64>) -> DVector<f64> {
        self.v.transpose() * beta
    }

    /// `π ↦ U' E[zz']^{1/2} π V`.
    pub fn transform_pi(&self, pi: &DMatrix<f64>) -> DMatrix<f64> {
        self.u.transpose() * &self.root * pi * &self.v
    }

    /// `γ ↦ U' E[zz']^{1/2} γ`.
    pub fn transform_gamma(&self, gamma: &DVector<f64>) -> DVector<f64> {
        self.u.transpose() * &self.root * gamma
    }
}

/// Extend orthonormal columns to an orthonormal basis of `R^dim` using the
/// standard basis vectors in order.
fn complete_basis(columns: &[DVector<f64>], dim: usize) -> DMatrix<f64> {
    let mut basis: Vec<DVector<f64>> = columns.to_vec();
    let mut e = 0;
    while basis.len() < dim && e < dim {
        let mut w = DVector::zeros(dim);
        w[e] = 1.0;
        for _ in 0..2 {
            for q in &basis {
                let proj = q.dot(&w);
                w -= q * proj;
            }
        }
        let norm = w.norm();
        if norm > 1e-6 {
            basis.push(w / norm);
        }
        e += 1;
    }
    DMatrix::from_columns(&basis)
}

fn first_nonzero_sign(v: &DVector<f64>) -> f64 {
    let scale = v.amax();
    v.iter().find(|x| x.abs() > 1e-12 * scale.max(f64::MIN_POSITIVE)).map_or(1.0, |x| x.signum())
}

/// Normalize `(E[zz'], π)`; `rank` overrides threshold detection when given.
pub fn normalize_model(ezz: &DMatrix<f64>, pi: &DMatrix<f64>, tol: f64, rank: Option<usize>) -> Result<NormalizedModel> {
    let (k, d) = pi.shape();
    if ezz.shape() != (k, k) {
        return Err(Error::Dimension(format!("E[zz'] must be {k}x{k}")));
    }
    if d == 0 || k < d {
        return Err(Error::Dimension(format!("need k >= d >= 1, got k={k}, d={d}")));
    }
    if !(tol >= 0.0) {
        return Err(Error::Config("rank tolerance must be nonnegative".into()));
    }
    let whitening = linalg::inv_sqrt_spd(ezz, "E[zz']")?;
    let root = linalg::sqrt_psd(ezz, "E[zz']")?;
    let tilde = &root * pi;

    let svd = tilde.clone().svd(true, true);
    let u_thin = svd.u.expect("left vectors requested");
    let v_t = svd.v_t.expect("right vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();

    let top = sv[0];
    let detected_rank = if top > 0.0 { sv.iter().filter(|&&s| s > tol * top).count() } else { 0 };
    let (rank, rank_source) = match rank {
        Some(r) if r > d => return Err(Error::Config(format!("rank {r} exceeds d={d}"))),
        Some(r) => (r, RankSource::Supplied),
        None => (detected_rank, RankSource::Detected),
    };

    // Keep singular vectors only where the singular value is resolved; the
    // rest is completed deterministically.
    let mut u_cols = Vec::new();
    let mut v_cols = Vec::new();
    for &i in order.iter().take(detected_rank) {
        let mut uc = u_thin.column(i).into_owned();
        let mut vc = v_t.row(i).transpose();
        if first_nonzero_sign(&uc) < 0.0 {
            uc = -uc;
            vc = -vc;
        }
        u_cols.push(uc);
        v_cols.push(vc);
    }
    let mut u = complete_basis(&u_cols, k);
    let mut v = complete_basis(&v_cols, d);
    for j in detected_rank..k {
        if first_nonzero_sign(&u.column(j).into_owned()) < 0.0 {
            u.column_mut(j).neg_mut();
        }
    }
    for j in detected_rank..d {
        if first_nonzero_sign(&v.column(j).into_owned()) < 0.0 {
            v.column_mut(j).neg_mut();
        }
    }
    let mut s = DMatrix::zeros(k, d);
    for (j, &value) in sv.iter().enumerate().take(detected_rank) {
        s[(j, j)] = value;
    }
    Ok(NormalizedModel { whitening, root, u, v, s, rank, detected_rank, rank_source })
}

/// Reduced-form estimates partitioned at rank `ℓ`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockFit {
    pub rank: usize,
    pub gamma1: DVector<f64>,
    pub gamma2: DVector<f64>,
    pub pi11: DMatrix<f64>,
    pub pi12: DMatrix<f64>,
    pub pi21: DMatrix<f64>,
    pub pi22: DMatrix<f64>,
}

impl BlockFit {
    pub fn new(gamma: &DVector<f64>, pi: &DMatrix<f64>, rank: usize) -> Result<Self> {
        let (k, d) = pi.shape();
        if gamma.len() != k {
            return Err(Error::Dimension("gamma length differs from rows of pi".into()));
        }
        if rank > d || d > k {
            return Err(Error::Dimension(format!("need rank <= d <= k, got {rank}, {d}, {k}")));
        }
        let (l, kl, dl) = (rank, k - rank, d - rank);
        Ok(BlockFit {
            rank,
            gamma1: gamma.rows(0, l).into_owned(),
            gamma2: gamma.rows(l, kl).into_owned(),
            pi11: pi.view((0, 0), (l, l)).into_owned(),
            pi12: pi.view((0, l), (l, dl)).into_owned(),
            pi21: pi.view((l, 0), (kl, l)).into_owned(),
            pi22: pi.view((l, l), (kl, dl)).into_owned(),
        })
    }

    pub fn from_fit(fit: &ReducedFormFit, rank: usize) -> Result<Self> {
        BlockFit::new(&fit.gamma(), &fit.pi(), rank)
    }
}

/// `[π̂₁₁^{-1}γ̂₁; (nπ̂₂₂'π̂₂₂)^{-1} √n π̂₂₂'(√n γ̂₂ − √n π̂₂₁π̂₁₁^{-1}γ̂₁)]`.
pub fn block_tsls(fit: &BlockFit, n: usize) -> Result<DVector<f64>> {
    if n == 0 {
        return Err(Error::Config("sample size must be positive".into()));
    }
    let rn = (n as f64).sqrt();
    let l = fit.rank;
    let d = l + fit.pi22.ncols();
    let upper = if l == 0 {
        DVector::zeros(0)
    } else {
        let lu = fit.pi11.clone().lu();
        let cond = linalg::sym_condition(&(fit.pi11.transpose() * &fit.pi11));
        if !(cond <= linalg::DEFAULT_CONDITION_CAP) {
            return Err(Error::rank("pi_11", cond));
        }
        lu.solve(&fit.gamma1).ok_or_else(|| Error::rank("pi_11", f64::INFINITY))?
    };
    let mut beta = DVector::zeros(d);
    beta.rows_mut(0, l).copy_from(&upper);
    if d > l {
        let p22 = &fit.pi22 * rn;
        let gram = p22.transpose() * &p22;
        let resid = (&fit.gamma2 - &fit.pi21 * &upper) * rn;
        let rhs = p22.transpose() * resid;
        let lower = linalg::solve_spd_checked(
            &gram,
            &DMatrix::from_column_slice(d - l, 1, rhs.as_slice()),
            linalg::DEFAULT_CONDITION_CAP,
            "n pi_22'pi_22",
        )?;
        beta.rows_mut(l, d - l).copy_from(&lower.column(0));
    }
    Ok(beta)
}
