use serde::Serialize;
use weakiv::harness::{replication_reference, ExperimentResult, Loss};
use weakiv::IdentificationMode;

pub const REPLICATION_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
pub struct ReplicationRow {
    pub estimator: String,
    pub label: String,
    pub mse: f64,
    pub mse_se: f64,
    pub mse_reference: f64,
    pub mae: f64,
    pub mae_se: f64,
    pub mae_reference: f64,
}

#[derive(Debug, Serialize)]
pub struct Replication {
    pub schema_version: u32,
    pub mode: IdentificationMode,
    pub iterations: usize,
    pub observations: usize,
    pub master_seed: u64,
    pub concentration: f64,
    pub rows: Vec<ReplicationRow>,
}

fn value(r: &ExperimentResult, tag: &str, loss: Loss) -> (f64, f64) {
    r.summary(tag)
        .and_then(|s| s.loss(loss))
        .map_or((f64::NAN, f64::NAN), |l| (l.value, l.mc_se))
}

pub fn replication(mode: IdentificationMode, r: &ExperimentResult) -> Replication {
    let rows = replication_reference(mode)
        .iter()
        .map(|&(tag, mse_ref, mae_ref)| {
            let (mse, mse_se) = value(r, tag, Loss::Mse);
            let (mae, mae_se) = value(r, tag, Loss::Mae);
            ReplicationRow {
                estimator: tag.to_owned(),
                label: r.summary(tag).map_or_else(|| tag.to_owned(), |s| s.label.clone()),
                mse,
                mse_se,
                mse_reference: mse_ref,
                mae,
                mae_se,
                mae_reference: mae_ref,
            }
        })
        .collect();
    Replication {
        schema_version: REPLICATION_SCHEMA_VERSION,
        mode,
        iterations: r.config.iterations,
        observations: r.config.dgp.n,
        master_seed: r.config.master_seed,
        concentration: r.concentration[0][0],
        rows,
    }
}

pub fn replication_table(rep: &Replication) -> String {
    let mut out = format!(
        "{} identification: n = {}, {} iterations, seed {}, concentration {:.4}\n",
        match rep.mode {
            IdentificationMode::Weak => "Weak",
            IdentificationMode::Strong => "Strong",
        },
        rep.observations,
        rep.iterations,
        rep.master_seed,
        rep.concentration
    );
    out.push_str(&format!(
        "{:<16} {:>10} {:>9} {:>10} {:>9}\n",
        "estimator", "MSE", "ref", "MAE", "ref"
    ));
    for row in &rep.rows {
        out.push_str(&format!(
            "{:<16} {:>10.3} {:>9.3} {:>10.3} {:>9.3}\n",
            row.label, row.mse, row.mse_reference, row.mae, row.mae_reference
        ));
    }
    out
}

pub fn loss_table(r: &ExperimentResult) -> String {
    let mut out = format!("{:<28} {:>5} {:>12} {:>10}\n", "estimator", "loss", "value", "mc_se");
    for s in &r.estimators {
        for l in &s.losses {
            out.push_str(&format!("{:<28} {:>5} {:>12.6} {:>10.6}\n", s.label, l.loss.name(), l.value, l.mc_se));
        }
    }
    out.push_str(&format!("concentration {:?}\n", r.concentration));
    out
}
