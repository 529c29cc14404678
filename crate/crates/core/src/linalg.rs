//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default cap on the condition number of matrices inverted in single-shot mode.
pub const DEFAULT_CONDITION_CAP: f64 = 1e12;

/// Relative tolerance below which negative eigenvalues are treated as rounding noise.
pub const PSD_TOLERANCE: f64 = 1e-10;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues (ascending) and matching eigenvectors of a symmetric matrix.
pub fn sym_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = symmetrize(m).symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Condition number λ_max/λ_min of a symmetric matrix; infinite when λ_min ≤ 0.
pub fn sym_condition(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let (vals, _) = sym_eigen(m);
    let lo = vals[0];
    let hi = vals[vals.len() - 1];
    if !(lo > 0.0) || !hi.is_finite() {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Result of projecting a symmetric matrix onto the PSD cone.
#[derive(Debug, Clone)]
pub struct PsdProjection {
    pub matrix: DMatrix<f64>,
    /// `factor * factor^T == matrix`.
    pub factor: DMatrix<f64>,
    /// Negative eigenvalues that were set to zero.
    pub clipped: Vec<f64>,
}

/// Clip negative eigenvalues to zero. Always succeeds.
pub fn project_psd(m: &DMatrix<f64>) -> PsdProjection {
    let (vals, vecs) = sym_eigen(m);
    let mut clipped = Vec::new();
    let mut factor = vecs.clone();
    for (j, &lambda) in vals.iter().enumerate() {
        let kept = if lambda < 0.0 {
            clipped.push(lambda);
            0.0
        } else {
            lambda
        };
        let s = kept.sqrt();
        factor.column_mut(j).scale_mut(s);
    }
    let matrix = symmetrize(&(&factor * factor.transpose()));
    PsdProjection { matrix, factor, clipped }
}

/// Symmetric square-root factor of a covariance matrix for sampling.
///
/// Eigenvalues within `PSD_TOLERANCE` (relative to the largest) below zero are
/// clipped; anything more negative is an error.
pub fn psd_factor(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_psd(context, f64::NAN));
    }
    let (vals, vecs) = sym_eigen(m);
    let scale = vals.iter().fold(1.0_f64, |a, &v| a.max(v.abs()));
    let min = vals[0];
    if min < -PSD_TOLERANCE * scale {
        return Err(Error::non_psd(context, min));
    }
    let mut factor = vecs;
    for (j, &lambda) in vals.iter().enumerate() {
        factor.column_mut(j).scale_mut(lambda.max(0.0).sqrt());
    }
    Ok(factor)
}

/// `m^{-1/2}` for a symmetric positive definite matrix.
pub fn inv_sqrt_spd(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let (vals, vecs) = sym_eigen(m);
    if !(vals[0] > 0.0) {
        return Err(Error::non_psd(context, vals[0]));
    }
    let d = DMatrix::from_diagonal(&vals.map(|v| 1.0 / v.sqrt()));
    Ok(symmetrize(&(&vecs * d * vecs.transpose())))
}

/// `m^{1/2}` for a symmetric PSD matrix.
pub fn sqrt_psd(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let (vals, vecs) = sym_eigen(m);
    let scale = vals.iter().fold(1.0_f64, |a, &v| a.max(v.abs()));
    if vals[0] < -PSD_TOLERANCE * scale {
        return Err(Error::non_psd(context, vals[0]));
    }
    let d = DMatrix::from_diagonal(&vals.map(|v| v.max(0.0).sqrt()));
    Ok(symmetrize(&(&vecs * d * vecs.transpose())))
}

/// Solve `a x = b` for symmetric positive definite `a`, enforcing a condition cap.
pub fn solve_spd_checked(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    cap: f64,
    context: &str,
) -> Result<DMatrix<f64>> {
    let cond = sym_condition(a);
    if !(cond <= cap) {
        return Err(Error::rank(context, cond));
    }
    Ok(solve_unchecked(a, b))
}

/// Solve `a x = b` without any conditioning guard.
///
/// Uses Cholesky when it succeeds and LU otherwise. An exactly singular system
/// yields a matrix of NaNs so callers can flag the result instead of failing.
pub fn solve_unchecked(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = a.clone().cholesky() {
        return ch.solve(b);
    }
    match a.clone().lu().solve(b) {
        Some(x) => x,
        None => DMatrix::from_element(b.nrows(), b.ncols(), f64::NAN),
    }
}

/// Inverse of a symmetric positive definite matrix, or an error naming `context`.
pub fn inverse_spd(a: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    match a.clone().cholesky() {
        Some(ch) => Ok(symmetrize(&ch.inverse())),
        None => {
            let (vals, _) = sym_eigen(a);
            Err(Error::non_psd(context, vals[0]))
        }
    }
}

/// Pairwise (cascade) summation. The result depends only on the order of
/// `values`, never on how the slice was produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 8;
    if values.len() <= BLOCK {
        let mut s = 0.0;
        for &v in values {
            s += v;
        }
        return s;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub fn pairwise_mean(values: &[f64]) -> f64 {
    pairwise_sum(values) / values.len() as f64
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Column-major vectorization.
pub fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec_of`].
pub fn unvec(v: &[f64], nrows: usize, ncols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(nrows, ncols, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_clips_negative_part() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        let p = project_psd(&m);
        assert_eq!(p.clipped.len(), 1);
        assert!((p.clipped[0] + 0.5).abs() < 1e-15);
        assert!((p.matrix[(0, 0)] - 1.0).abs() < 1e-14);
        assert!(p.matrix[(1, 1)].abs() < 1e-14);
        let diff = &p.factor * p.factor.transpose() - &p.matrix;
        assert!(diff.amax() < 1e-12);
    }

    #[test]
    fn factor_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(psd_factor(&m, "t"), Err(Error::NonPsd { .. })));
    }

    #[test]
    fn factor_reproduces_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[7.32, -2.91, -2.91, 1.16]);
        let f = psd_factor(&m, "t").unwrap();
        assert!((&f * f.transpose() - &m).amax() < 1e-12);
    }

    #[test]
    fn inv_sqrt_squares_to_inverse() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let r = inv_sqrt_spd(&m, "t").unwrap();
        let inv = m.clone().try_inverse().unwrap();
        assert!((&r * &r - inv).amax() < 1e-12);
        let s = sqrt_psd(&m, "t").unwrap();
        assert!((&s * &s - &m).amax() < 1e-12);
    }

    #[test]
    fn singular_solve_is_nan_not_panic() {
        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::from_element(2, 1, 1.0);
        assert!(solve_unchecked(&a, &b).iter().all(|v| v.is_nan()));
        assert!(matches!(
            solve_spd_checked(&a, &b, DEFAULT_CONDITION_CAP, "t"),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn pairwise_matches_naive_on_integers() {
        let v: Vec<f64> = (1..=1000).map(f64::from).collect();
        assert_eq!(pairwise_sum(&v), 500_500.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    #[test]
    fn vec_is_column_major() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(vec_of(&m).as_slice(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(unvec(&[1.0, 3.0, 2.0, 4.0], 2, 2), m);
    }
}
