//! Shared domain types and the left-inverse primitive.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, DEFAULT_CONDITION_CAP};

/// Sample size `n`, instrument count `k`, endogenous regressor count `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub k: usize,
    pub d: usize,
}

impl Dims {
    pub fn new(n: usize, k: usize, d: usize) -> Result<Self> {
        let dims = Dims { n, k, d };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 1 || self.k < self.d {
            return Err(Error::Dimension(format!(
                "need k >= d >= 1, got k={}, d={}",
                self.k, self.d
            )));
        }
        if self.n < self.k + self.d {
            return Err(Error::Dimension(format!(
                "need n >= k + d, got n={}, k={}, d={}",
                self.n, self.k, self.d
            )));
        }
        Ok(())
    }

    /// Length of the stacked reduced-form vector `(γ, vec π)`.
    pub fn psi_len(&self) -> usize {
        self.k * (1 + self.d)
    }
}

/// How matrix inversions inside an estimator treat near-singularity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolveMode {
    /// Refuse to invert when the condition number exceeds the cap.
    Checked(f64),
    /// Always compute; exactly singular systems produce non-finite output.
    Unchecked,
}

impl Default for SolveMode {
    fn default() -> Self {
        SolveMode::Checked(DEFAULT_CONDITION_CAP)
    }
}

impl SolveMode {
    pub(crate) fn solve_spd(
        &self,
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        context: &str,
    ) -> Result<DMatrix<f64>> {
        match *self {
            SolveMode::Checked(cap) => linalg::solve_spd_checked(a, b, cap, context),
            SolveMode::Unchecked => Ok(linalg::solve_unchecked(a, b)),
        }
    }
}

/// Observed outcome `y` (n), endogenous regressors `X` (n×d) and instruments `Z` (n×k).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DVector<f64>,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
}

impl Dataset {
    /// Validates shapes and that `Z` has full column rank.
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, z: DMatrix<f64>) -> Result<Self> {
        let n = y.len();
        if x.nrows() != n || z.nrows() != n {
            return Err(Error::Dimension(format!(
                "row counts differ: y={}, X={}, Z={}",
                n,
                x.nrows(),
                z.nrows()
            )));
        }
        Dims::new(n, z.ncols(), x.ncols())?;
        if y.iter().chain(x.iter()).chain(z.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Dimension("data contain non-finite values".into()));
        }
        let zz = z.transpose() * &z;
        let cond = linalg::sym_condition(&zz);
        if !(cond <= DEFAULT_CONDITION_CAP) {
            return Err(Error::rank("instrument matrix Z'Z", cond));
        }
        Ok(Dataset { y, x, z })
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn dims(&self) -> Dims {
        Dims { n: self.y.len(), k: self.z.ncols(), d: self.x.ncols() }
    }

    pub fn zz(&self) -> DMatrix<f64> {
        self.z.transpose() * &self.z
    }

    /// Rows reordered by `perm` (`perm[i]` is the source row of row `i`).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.y.len();
        if perm.len() != n {
            return Err(Error::Dimension("permutation length".into()));
        }
        let y = DVector::from_fn(n, |i, _| self.y[perm[i]]);
        let x = DMatrix::from_fn(n, self.x.ncols(), |i, j| self.x[(perm[i], j)]);
        let z = DMatrix::from_fn(n, self.z.ncols(), |i, j| self.z[(perm[i], j)]);
        Dataset::new(y, x, z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IdentificationMode {
    Weak,
    Strong,
}

/// True structural and reduced-form coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralParams {
    pub beta: DVector<f64>,
    /// First-stage coefficients before any sample-size scaling.
    pub pi_base: DMatrix<f64>,
    /// First-stage coefficients in effect: `pi_base / sqrt(n)` when weak.
    pub pi: DMatrix<f64>,
    /// Always exactly `pi * beta`.
    pub gamma: DVector<f64>,
    pub mode: IdentificationMode,
}

impl StructuralParams {
    pub fn new(
        beta: DVector<f64>,
        pi_base: DMatrix<f64>,
        mode: IdentificationMode,
        n: usize,
    ) -> Result<Self> {
        if pi_base.ncols() != beta.len() {
            return Err(Error::Dimension(format!(
                "pi has {} columns but beta has {} entries",
                pi_base.ncols(),
                beta.len()
            )));
        }
        let pi = match mode {
            IdentificationMode::Weak => &pi_base / (n as f64).sqrt(),
            IdentificationMode::Strong => pi_base.clone(),
        };
        let gamma = &pi * &beta;
        Ok(StructuralParams { beta, pi_base, pi, gamma, mode })
    }

    pub fn k(&self) -> usize {
        self.pi.nrows()
    }

    pub fn d(&self) -> usize {
        self.beta.len()
    }
}

/// A k×d matrix with full column rank whose Gram matrix is well conditioned.
#[derive(Debug, Clone, PartialEq)]
pub struct LeftInvertible {
    a: DMatrix<f64>,
    gram_condition: f64,
}

impl LeftInvertible {
    pub fn new(a: DMatrix<f64>, cap: f64) -> Result<Self> {
        if a.ncols() == 0 || a.nrows() < a.ncols() {
            return Err(Error::Dimension(format!(
                "left inverse needs rows >= cols >= 1, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let gram = a.transpose() * &a;
        let gram_condition = linalg::sym_condition(&gram);
        if !(gram_condition <= cap) {
            return Err(Error::rank("A'A in left inverse", gram_condition));
        }
        Ok(LeftInvertible { a, gram_condition })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn gram_condition(&self) -> f64 {
        self.gram_condition
    }

    /// `(A'A)^{-1} A'`.
    pub fn left_inverse(&self) -> DMatrix<f64> {
        let at = self.a.transpose();
        linalg::solve_unchecked(&(&at * &self.a), &at)
    }
}

/// `(A'A)^{-1} A'` with the default condition cap.
pub fn left_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(LeftInvertible::new(a.clone(), DEFAULT_CONDITION_CAP)?.left_inverse())
}

/// `(π'Wπ)^{-1} π'Wγ`: the β that best reconciles `γ = πβ` in the `W` metric.
pub fn plug_in_beta(
    gamma: &DVector<f64>,
    pi: &DMatrix<f64>,
    weight: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    plug_in_beta_with(gamma, pi, weight, SolveMode::default())
}

pub fn plug_in_beta_with(
    gamma: &DVector<f64>,
    pi: &DMatrix<f64>,
    weight: &DMatrix<f64>,
    mode: SolveMode,
) -> Result<DVector<f64>> {
    let k = pi.nrows();
    if gamma.len() != k || weight.nrows() != k || weight.ncols() != k {
        return Err(Error::Dimension(format!(
            "plug-in beta: gamma {} / pi {}x{} / weight {}x{}",
            gamma.len(),
            k,
            pi.ncols(),
            weight.nrows(),
            weight.ncols()
        )));
    }
    let wpi = weight * pi;
    let lhs = pi.transpose() * &wpi;
    let rhs = wpi.transpose() * gamma;
    let sol = mode.solve_spd(&lhs, &DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice()), "pi'W pi")?;
    Ok(sol.column(0).into_owned())
}
