mod data;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use weakiv::dgp::{builtin_config, DgpConfig, DgpFile};
use weakiv::estimators::{
    fuller_with, optimal_iv_feasible, tsls_with, two_step_gmm_with, unbiased_scalar, StructuralEstimate,
    VarianceConvention,
};
use weakiv::harness::{
    export_result, replication_experiment, run_experiment_with_workers, ExperimentConfig, ExperimentResult, ExportFormat,
};
use weakiv::lar::{rb_optimal_iv, rb_tsls, RBConfig};
use weakiv::linalg::to_rows;
use weakiv::reduced_form::{fgls_reduced_form, noise_covariance, ols_reduced_form};
use weakiv::{Error, IdentificationMode, SolveMode, Stream};

const OUTPUT_SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "weakiv", version, about = "Weak-IV estimation and Rao-Blackwellization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
    Table,
}

#[derive(Clone, Copy, ValueEnum)]
enum Convention {
    Printed,
    Pi,
}

impl From<Convention> for VarianceConvention {
    fn from(c: Convention) -> Self {
        match c {
            Convention::Printed => VarianceConvention::AsPrinted,
            Convention::Pi => VarianceConvention::PiVariance,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Weak,
    Strong,
}

impl From<Mode> for IdentificationMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Weak => IdentificationMode::Weak,
            Mode::Strong => IdentificationMode::Strong,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Tsls,
    OptimalIv,
    TwoStepGmm,
    Fuller,
    Unbiased,
    RbTsls,
    RbOptimalIv,
}

#[derive(clap::Args)]
struct RunOverrides {
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// RB draws (outer draws for RB optimal IV).
    #[arg(long)]
    draws: Option<usize>,
    /// Inner draws per outer draw for RB optimal IV.
    #[arg(long)]
    inner_draws: Option<usize>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

impl RunOverrides {
    fn apply(&self, mut cfg: ExperimentConfig) -> Result<ExperimentConfig, Error> {
        if let Some(seed) = self.seed {
            cfg.master_seed = seed;
        }
        if let Some(it) = self.iterations {
            cfg.iterations = it;
        }
        let cfg = cfg.with_draws(self.draws, self.inner_draws);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo experiment described by a JSON config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        #[command(flatten)]
        overrides: RunOverrides,
    },
    /// Run the built-in replication design and compare with reference values.
    Replicate {
        #[arg(value_enum)]
        mode: Mode,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
        #[command(flatten)]
        overrides: RunOverrides,
    },
    /// Estimate β on a CSV dataset with columns y,x1..xd,z1..zk.
    Estimate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        estimator: EstimatorArg,
        /// Fuller constant.
        #[arg(long, default_value_t = 1.0)]
        fuller_c: f64,
        #[arg(long, value_enum, default_value = "printed")]
        variance_convention: Convention,
        #[arg(long)]
        draws: Option<usize>,
        #[arg(long)]
        inner_draws: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Print the concentration parameter of a DGP.
    Concentration {
        /// DGP or experiment JSON; defaults to the built-in design.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "weak")]
        mode: Mode,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) => 3,
            Error::RankDeficient { .. } | Error::NonPsd { .. } => 4,
            _ => 2,
        };
        Failure { code, message: e.to_string() }
    }
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure { code: 3, message: format!("{}: {e}", path.display()) }
}

fn config_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure { code: 2, message: format!("{}: {e}", path.display()) }
}

fn read_json(path: &Path) -> Result<serde_json::Value, Failure> {
    let text = fs::read_to_string(path).map_err(|e| config_failure(path, e))?;
    serde_json::from_str(&text).map_err(|e| config_failure(path, e))
}

fn load_experiment(path: &Path) -> Result<ExperimentConfig, Failure> {
    serde_json::from_value(read_json(path)?).map_err(|e| config_failure(path, e))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn pretty(value: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// Write result files into `dir`. Run metadata goes to its own file so the
/// remaining files depend only on the configuration.
fn write_result(dir: &Path, result: &ExperimentResult, format: Format) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    write(&dir.join("metadata.json"), &pretty(&result.metadata))?;
    match format {
        Format::Json | Format::Table => write(&dir.join("result.json"), &pretty(&result.comparable_value())),
        Format::Csv => {
            export_result(result, &dir.join("losses.csv"), ExportFormat::Csv)?;
            Ok(())
        }
    }
}

fn losses_csv(result: &ExperimentResult) -> String {
    let mut out = String::from("estimator,loss,value,mc_se\n");
    for s in &result.estimators {
        for l in &s.losses {
            out.push_str(&format!("{},{},{},{}\n", s.tag, l.loss.name(), l.value, l.mc_se));
        }
    }
    out
}

fn cmd_simulate(config: &Path, out: Option<&Path>, format: Format, overrides: &RunOverrides) -> Result<(), Failure> {
    let cfg = overrides.apply(load_experiment(config)?)?;
    let result = run_experiment_with_workers(&cfg, overrides.workers)?;
    if let Some(dir) = out {
        write_result(dir, &result, format)?;
    }
    match format {
        Format::Json if out.is_none() => print!("{}", pretty(&result.comparable_value())),
        Format::Csv if out.is_none() => print!("{}", losses_csv(&result)),
        Format::Table => print!("{}", report::loss_table(&result)),
        _ => {}
    }
    Ok(())
}

fn cmd_replicate(mode: Mode, out: Option<&Path>, format: Format, overrides: &RunOverrides) -> Result<(), Failure> {
    let mode: IdentificationMode = mode.into();
    let cfg = overrides.apply(replication_experiment(mode))?;
    let result = run_experiment_with_workers(&cfg, overrides.workers)?;
    let rep = report::replication(mode, &result);
    if let Some(dir) = out {
        write_result(dir, &result, Format::Json)?;
        write(&dir.join("replication.json"), &pretty(&rep))?;
    }
    match format {
        Format::Table => print!("{}", report::replication_table(&rep)),
        Format::Json => print!("{}", pretty(&rep)),
        Format::Csv => {
            println!("estimator,mse,mse_se,mse_reference,mae,mae_se,mae_reference");
            for r in &rep.rows {
                println!(
                    "{},{},{},{},{},{},{}",
                    r.estimator, r.mse, r.mse_se, r.mse_reference, r.mae, r.mae_se, r.mae_reference
                );
            }
        }
    }
    Ok(())
}

fn estimate_json(est: &StructuralEstimate, extra: serde_json::Value) -> serde_json::Value {
    let finite = |v: f64| if v.is_finite() { json!(v) } else { json!(v.to_string()) };
    let mut out = json!({
        "schema_version": OUTPUT_SCHEMA_VERSION,
        "estimator": est.estimator,
        "beta_hat": est.beta_hat.iter().map(|&v| finite(v)).collect::<Vec<_>>(),
        "condition": finite(est.condition),
        "extreme": est.extreme,
    });
    if let Some(pi) = &est.aux_pi {
        out["aux_pi"] = json!(to_rows(pi));
    }
    if let (Some(map), Some(extra)) = (out.as_object_mut(), extra.as_object()) {
        for (k, v) in extra {
            map.insert(k.clone(), v.clone());
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn cmd_estimate(
    path: &Path,
    estimator: EstimatorArg,
    fuller_c: f64,
    convention: Convention,
    draws: Option<usize>,
    inner_draws: Option<usize>,
    seed: u64,
    format: Format,
) -> Result<(), Failure> {
    let data = data::read_dataset(path)?;
    let dims = data.dims();
    let mode = SolveMode::default();
    let mut extra = json!({ "n": dims.n, "k": dims.k, "d": dims.d });
    let est = match estimator {
        EstimatorArg::Tsls => tsls_with(&data, mode)?,
        EstimatorArg::OptimalIv => optimal_iv_feasible(&data, mode)?,
        EstimatorArg::TwoStepGmm => two_step_gmm_with(&data, mode)?,
        EstimatorArg::Fuller => {
            extra["fuller_c"] = json!(fuller_c);
            fuller_with(&data, fuller_c, mode)?
        }
        EstimatorArg::Unbiased => {
            let convention: VarianceConvention = convention.into();
            extra["variance_convention"] = json!(convention);
            unbiased_scalar(&ols_reduced_form(&data)?, convention)?
        }
        EstimatorArg::RbTsls | EstimatorArg::RbOptimalIv => {
            let ols = ols_reduced_form(&data)?;
            let gls = fgls_reduced_form(&data)?;
            let noise = noise_covariance(&ols, &gls);
            let stream = Stream::new(seed);
            let rb = if let EstimatorArg::RbTsls = estimator {
                let cfg = RBConfig::new(draws.unwrap_or(100), 1, stream)?;
                rb_tsls(&gls, &noise, &data.zz(), &cfg)?
            } else {
                let cfg = RBConfig::new(draws.unwrap_or(50), inner_draws.unwrap_or(100), stream)?;
                rb_optimal_iv(&data, &gls, &noise, &cfg)?
            };
            extra["draws_used"] = json!(rb.draws.used);
            extra["draws_non_finite"] = json!(rb.draws.non_finite);
            extra["seed"] = json!(seed);
            rb.estimate
        }
    };
    let out = estimate_json(&est, extra);
    match format {
        Format::Json => print!("{}", pretty(&out)),
        Format::Csv => {
            println!("coefficient,value");
            for (j, v) in est.beta_hat.iter().enumerate() {
                println!("beta{},{v}", j + 1);
            }
        }
        Format::Table => {
            for (j, v) in est.beta_hat.iter().enumerate() {
                println!("beta{} = {v}", j + 1);
            }
        }
    }
    Ok(())
}

fn load_dgp(path: &Path) -> Result<DgpConfig, Failure> {
    let value = read_json(path)?;
    if value.get("dgp").is_some() {
        return Ok(load_experiment(path)?.dgp);
    }
    let file: DgpFile = serde_json::from_value(value).map_err(|e| config_failure(path, e))?;
    Ok(DgpConfig::from_file(&file)?)
}

fn cmd_concentration(config: Option<&Path>, mode: Mode, format: Format) -> Result<(), Failure> {
    let dgp = match config {
        Some(path) => load_dgp(path)?,
        None => builtin_config(mode.into(), 1000, 0),
    };
    let mu = dgp.concentration()?;
    match format {
        Format::Json => print!(
            "{}",
            pretty(&json!({
                "schema_version": OUTPUT_SCHEMA_VERSION,
                "n": dgp.n,
                "mode": dgp.params.mode,
                "concentration": to_rows(&mu),
            }))
        ),
        Format::Csv | Format::Table => {
            for row in to_rows(&mu) {
                println!("{}", row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate { config, out, format, overrides } => {
            cmd_simulate(&config, out.as_deref(), format, &overrides)
        }
        Command::Replicate { mode, out, format, overrides } => cmd_replicate(mode, out.as_deref(), format, &overrides),
        Command::Estimate { data, estimator, fuller_c, variance_convention, draws, inner_draws, seed, format } => {
            cmd_estimate(&data, estimator, fuller_c, variance_convention, draws, inner_draws, seed, format)
        }
        Command::Concentration { config, mode, format } => cmd_concentration(config.as_deref(), mode, format),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
