//! Heteroskedastic discrete-instrument data-generating process.
//!
//! Instruments take finitely many values ("cells"); given the cell, the
//! structural error and first-stage error `(ε, v)` are jointly normal with a
//! cell-specific covariance. Data are built as `x' = z'π + v'`, `y = x'β + ε`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, from_rows, to_rows};
use crate::rng::{fill_standard_normal, Stream};
use crate::types::{Dataset, Dims, IdentificationMode, StructuralParams};

const BUILTIN_DESIGN_JSON: &str = include_str!("../data/builtin_design.json");

pub const DGP_FILE_VERSION: u32 = 1;

/// Discrete instrument support with cell probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentDesign {
    cells: Vec<DVector<f64>>,
    probs: Vec<f64>,
}

impl InstrumentDesign {
    pub fn new(cells: Vec<DVector<f64>>, probs: Vec<f64>) -> Result<Self> {
        let k = cells.first().map_or(0, |c| c.len());
        if cells.is_empty() || k == 0 {
            return Err(Error::Config("instrument design needs at least one cell".into()));
        }
        if probs.len() != cells.len() {
            return Err(Error::Config(format!(
                "{} cells but {} probabilities",
                cells.len(),
                probs.len()
            )));
        }
        for (i, c) in cells.iter().enumerate() {
            if c.len() != k {
                return Err(Error::Config(format!("cell {i} has length {} != {k}", c.len())));
            }
            if c.iter().any(|&v| v != 1.0 && v != -1.0) {
                return Err(Error::Config(format!("cell {i} has entries outside {{-1, 1}}")));
            }
            if cells[..i].contains(c) {
                return Err(Error::Config(format!("cell {i} duplicates an earlier cell")));
            }
        }
        if probs.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Config("cell probabilities must be nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("cell probabilities sum to {total}, not 1")));
        }
        let design = InstrumentDesign { cells, probs };
        let ezz = design.second_moment();
        if !(linalg::sym_condition(&ezz) <= linalg::DEFAULT_CONDITION_CAP) {
            return Err(Error::Config("E[zz'] is singular under this design".into()));
        }
        Ok(design)
    }

    /// All `2^k` sign vectors with equal probability; the first coordinate
    /// alternates fastest.
    pub fn uniform_signs(k: usize) -> Self {
        let m = 1usize << k;
        let cells = (0..m)
            .map(|c| DVector::from_fn(k, |j, _| if (c >> j) & 1 == 1 { 1.0 } else { -1.0 }))
            .collect();
        InstrumentDesign { cells, probs: vec![1.0 / m as f64; m] }
    }

    pub fn k(&self) -> usize {
        self.cells[0].len()
    }

    pub fn cells(&self) -> &[DVector<f64>] {
        &self.cells
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// `E[zz']` under the design.
    pub fn second_moment(&self) -> DMatrix<f64> {
        let k = self.k();
        let mut m = DMatrix::zeros(k, k);
        for (z, &p) in self.cells.iter().zip(&self.probs) {
            m += z * z.transpose() * p;
        }
        m
    }
}

/// Per-cell covariance of `(ε, v)`, each `(1+d)×(1+d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroskedasticitySpec {
    covs: Vec<DMatrix<f64>>,
}

impl HeteroskedasticitySpec {
    pub fn new(covs: Vec<DMatrix<f64>>) -> Result<Self> {
        let p = covs.first().map_or(0, |c| c.nrows());
        if p < 2 {
            return Err(Error::Config("cell covariances must be at least 2x2".into()));
        }
        for (i, c) in covs.iter().enumerate() {
            if c.nrows() != p || c.ncols() != p {
                return Err(Error::Config(format!("cell {i} covariance is not {p}x{p}")));
            }
            if (c - c.transpose()).amax() > 1e-12 {
                return Err(Error::Config(format!("cell {i} covariance is not symmetric")));
            }
            linalg::psd_factor(c, &format!("cell {i} covariance"))?;
        }
        Ok(HeteroskedasticitySpec { covs })
    }

    /// Identical covariance in every cell.
    pub fn homoskedastic(cov: DMatrix<f64>, cells: usize) -> Result<Self> {
        Self::new(vec![cov; cells])
    }

    pub fn d(&self) -> usize {
        self.covs[0].nrows() - 1
    }

    pub fn len(&self) -> usize {
        self.covs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.covs.is_empty()
    }

    pub fn covs(&self) -> &[DMatrix<f64>] {
        &self.covs
    }

    /// `Var(v | cell)`.
    pub fn var_v(&self, cell: usize) -> DMatrix<f64> {
        let d = self.d();
        self.covs[cell].view((1, 1), (d, d)).into_owned()
    }

    /// Covariance of `(ε, u, v)` with `u = ε + v'β`; rank at most `1 + d`.
    pub fn expanded(&self, beta: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let d = self.d();
        // (ε, u, v) = L (ε, v)
        let mut l = DMatrix::zeros(2 + d, 1 + d);
        l[(0, 0)] = 1.0;
        l[(1, 0)] = 1.0;
        for j in 0..d {
            l[(1, 1 + j)] = beta[j];
            l[(2 + j, 1 + j)] = 1.0;
        }
        self.covs.iter().map(|c| &l * c * l.transpose()).collect()
    }
}

/// The (ε, v) covariance blocks of the built-in heteroskedastic design.
pub fn builtin_spec() -> HeteroskedasticitySpec {
    builtin_file().to_spec().expect("embedded table is valid")
}

/// The embedded simulation configuration (k = 3, d = 1, β = 1).
pub fn builtin_file() -> DgpFile {
    serde_json::from_str(BUILTIN_DESIGN_JSON).expect("embedded table parses")
}

/// Table-1 DGP with the requested identification strength, sample size and seed.
pub fn builtin_config(mode: IdentificationMode, n: usize, seed: u64) -> DgpConfig {
    let mut file = builtin_file();
    file.mode = mode;
    file.n = n;
    file.seed = seed;
    DgpConfig::from_file(&file).expect("embedded table is valid")
}

/// Full DGP: dimensions, true parameters, design, heteroskedasticity, seed.
#[derive(Debug, Clone, PartialEq)]
pub struct DgpConfig {
    pub n: usize,
    pub params: StructuralParams,
    pub design: InstrumentDesign,
    pub spec: HeteroskedasticitySpec,
    pub seed: u64,
}

impl DgpConfig {
    pub fn new(
        n: usize,
        params: StructuralParams,
        design: InstrumentDesign,
        spec: HeteroskedasticitySpec,
        seed: u64,
    ) -> Result<Self> {
        let cfg = DgpConfig { n, params, design, spec, seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims();
        dims.validate()?;
        if self.design.k() != dims.k {
            return Err(Error::Config(format!(
                "design has k={} but pi has {} rows",
                self.design.k(),
                dims.k
            )));
        }
        if self.spec.len() != self.design.len() {
            return Err(Error::Config(format!(
                "{} covariance blocks for {} cells",
                self.spec.len(),
                self.design.len()
            )));
        }
        if self.spec.d() != dims.d {
            return Err(Error::Config(format!(
                "covariances are for d={} but beta has d={}",
                self.spec.d(),
                dims.d
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        Dims { n: self.n, k: self.params.k(), d: self.params.d() }
    }

    /// Same DGP with a different sample size (π rescaled when weak).
    pub fn with_n(&self, n: usize) -> Result<Self> {
        let params = StructuralParams::new(
            self.params.beta.clone(),
            self.params.pi_base.clone(),
            self.params.mode,
            n,
        )?;
        DgpConfig::new(n, params, self.design.clone(), self.spec.clone(), self.seed)
    }

    pub fn with_mode(&self, mode: IdentificationMode) -> Result<Self> {
        let params = StructuralParams::new(
            self.params.beta.clone(),
            self.params.pi_base.clone(),
            mode,
            self.n,
        )?;
        DgpConfig::new(self.n, params, self.design.clone(), self.spec.clone(), self.seed)
    }

    pub fn from_file(file: &DgpFile) -> Result<Self> {
        if file.version != DGP_FILE_VERSION {
            return Err(Error::Config(format!("unsupported DGP file version {}", file.version)));
        }
        if file.beta.len() != file.d {
            return Err(Error::Config(format!("beta has {} entries, d={}", file.beta.len(), file.d)));
        }
        let pi_base = from_rows(&file.pi_base)?;
        if pi_base.nrows() != file.k || pi_base.ncols() != file.d {
            return Err(Error::Config(format!(
                "pi_base is {}x{}, expected {}x{}",
                pi_base.nrows(),
                pi_base.ncols(),
                file.k,
                file.d
            )));
        }
        let params =
            StructuralParams::new(DVector::from_vec(file.beta.clone()), pi_base, file.mode, file.n)?;
        let design = file.to_design()?;
        let spec = file.to_spec()?;
        DgpConfig::new(file.n, params, design, spec, file.seed)
    }

    pub fn to_file(&self) -> DgpFile {
        let dims = self.dims();
        DgpFile {
            version: DGP_FILE_VERSION,
            n: self.n,
            k: dims.k,
            d: dims.d,
            beta: self.params.beta.iter().copied().collect(),
            pi_base: to_rows(&self.params.pi_base),
            mode: self.params.mode,
            cells: self
                .design
                .cells()
                .iter()
                .zip(self.design.probs())
                .zip(self.spec.covs())
                .map(|((z, &p), cov)| CellFile {
                    z: z.iter().copied().collect(),
                    cov: to_rows(cov),
                    prob: Some(p),
                })
                .collect(),
            seed: self.seed,
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: DgpFile = serde_json::from_str(&text)?;
        Self::from_file(&file)
    }

    /// Heteroskedasticity-adjusted concentration parameter of this DGP.
    pub fn concentration(&self) -> Result<DMatrix<f64>> {
        concentration_parameter(&self.design, &self.spec, &self.params.pi)
    }
}

fn default_version() -> u32 {
    DGP_FILE_VERSION
}

fn default_n() -> usize {
    1000
}

/// On-disk JSON form of a [`DgpConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpFile {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default = "default_n")]
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub beta: Vec<f64>,
    pub pi_base: Vec<Vec<f64>>,
    pub mode: IdentificationMode,
    pub cells: Vec<CellFile>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellFile {
    pub z: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prob: Option<f64>,
}

impl DgpFile {
    fn to_design(&self) -> Result<InstrumentDesign> {
        let cells: Vec<DVector<f64>> =
            self.cells.iter().map(|c| DVector::from_vec(c.z.clone())).collect();
        let given: Vec<Option<f64>> = self.cells.iter().map(|c| c.prob).collect();
        let probs = if given.iter().all(Option::is_none) {
            vec![1.0 / cells.len().max(1) as f64; cells.len()]
        } else if given.iter().all(Option::is_some) {
            given.into_iter().flatten().collect()
        } else {
            return Err(Error::Config("either all cells or none must carry 'prob'".into()));
        };
        InstrumentDesign::new(cells, probs)
    }

    fn to_spec(&self) -> Result<HeteroskedasticitySpec> {
        let covs = self.cells.iter().map(|c| from_rows(&c.cov)).collect::<Result<Vec<_>>>()?;
        HeteroskedasticitySpec::new(covs)
    }
}

/// Precomputed sampling state for a DGP.
#[derive(Debug, Clone)]
pub struct Sampler {
    config: DgpConfig,
    factors: Vec<DMatrix<f64>>,
    cumulative: Vec<f64>,
    /// `π'z` for each cell.
    means: Vec<DVector<f64>>,
}

/// One simulated sample together with the latent draws that produced it.
#[derive(Debug, Clone)]
pub struct Draw {
    pub data: Dataset,
    /// Row `i` is `(ε_i, v_i')`.
    pub errors: DMatrix<f64>,
    pub cells: Vec<usize>,
}

impl Sampler {
    pub fn new(config: &DgpConfig) -> Result<Self> {
        config.validate()?;
        let factors = config
            .spec
            .covs()
            .iter()
            .enumerate()
            .map(|(i, c)| linalg::psd_factor(c, &format!("cell {i} covariance")))
            .collect::<Result<Vec<_>>>()?;
        let mut acc = 0.0;
        let cumulative = config
            .design
            .probs()
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        let pit = config.params.pi.transpose();
        let means = config.design.cells().iter().map(|z| &pit * z).collect();
        Ok(Sampler { config: config.clone(), factors, cumulative, means })
    }

    pub fn config(&self) -> &DgpConfig {
        &self.config
    }

    fn pick_cell(&self, u: f64) -> usize {
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len() - 1)
    }

    /// Observation `i` uses `stream.split(i)` only.
    pub fn draw(&self, stream: &Stream) -> Result<Draw> {
        let dims = self.config.dims();
        let (n, k, d) = (dims.n, dims.k, dims.d);
        let beta = &self.config.params.beta;
        let mut y = DVector::zeros(n);
        let mut x = DMatrix::zeros(n, d);
        let mut z = DMatrix::zeros(n, k);
        let mut errors = DMatrix::zeros(n, 1 + d);
        let mut cells = Vec::with_capacity(n);
        let mut xi = DVector::zeros(1 + d);
        for i in 0..n {
            let mut rng = stream.split(i as u64).rng();
            let c = self.pick_cell(rng.random::<f64>());
            fill_standard_normal(&mut rng, xi.as_mut_slice());
            let e = &self.factors[c] * &xi;
            let zc = &self.config.design.cells()[c];
            let mut xb = 0.0;
            for j in 0..d {
                let xij = self.means[c][j] + e[1 + j];
                x[(i, j)] = xij;
                xb += xij * beta[j];
            }
            y[i] = xb + e[0];
            for j in 0..k {
                z[(i, j)] = zc[j];
            }
            errors.row_mut(i).copy_from(&e.transpose());
            cells.push(c);
        }
        let data = Dataset::new(y, x, z)?;
        Ok(Draw { data, errors, cells })
    }
}

/// Draw one dataset; observation `i` depends only on `stream.split(i)`.
pub fn draw_dataset(config: &DgpConfig, stream: &Stream) -> Result<Dataset> {
    Ok(Sampler::new(config)?.draw(stream)?.data)
}

/// `Σ_cells p · Var(v|z)^{-1/2} π'zz'π Var(v|z)^{-1/2}` (d×d; 1×1 when d = 1).
pub fn concentration_parameter(
    design: &InstrumentDesign,
    spec: &HeteroskedasticitySpec,
    pi: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if spec.len() != design.len() {
        return Err(Error::Dimension("one covariance per design cell required".into()));
    }
    if pi.nrows() != design.k() || pi.ncols() != spec.d() {
        return Err(Error::Dimension(format!(
            "pi is {}x{}, expected {}x{}",
            pi.nrows(),
            pi.ncols(),
            design.k(),
            spec.d()
        )));
    }
    let d = spec.d();
    let mut total = DMatrix::zeros(d, d);
    for (c, (z, &p)) in design.cells().iter().zip(design.probs()).enumerate() {
        let root = linalg::inv_sqrt_spd(&spec.var_v(c), &format!("Var(v|z) in cell {c}"))?;
        let signal = pi.transpose() * z; // d-vector π'z
        let m = &root * &signal;
        total += &m * m.transpose() * p;
    }
    Ok(total)
}
