//! Monte Carlo and bootstrap experiment runners with deterministic seeding,
//! plus report emission.
//!
//! Replication r always uses RngStream(base_seed, r), and results are
//! reduced in replication order, so reports are byte-identical regardless of
//! how the parallel executor schedules the work.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::FederatedDataset;
use crate::error::{Error, Result};
use crate::estimators::EstimatorId;
use crate::federation::{run_protocol, FedAvgConfig, ProtocolOptions};
use crate::numerics::RngStream;
use crate::scenarios::{
    bootstrap_resample, generate, regenerate_outcomes, true_ate, RegenParams, ScenarioConfig,
};

/// A full simulation experiment: scenario, estimator set, replication count
/// and seeding.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub scenario: ScenarioConfig,
    pub estimators: Vec<EstimatorId>,
    pub replications: usize,
    pub base_seed: u64,
    pub fedavg: FedAvgConfig,
    pub rank_tolerance: f64,
    /// Keep every replication's estimates for external plotting.
    pub keep_replicates: bool,
}

impl ExperimentPlan {
    pub fn new(scenario: ScenarioConfig, estimators: Vec<EstimatorId>, replications: usize, base_seed: u64) -> Self {
        ExperimentPlan {
            scenario,
            estimators,
            replications,
            base_seed,
            fedavg: FedAvgConfig::default(),
            rank_tolerance: crate::estimators::DEFAULT_RANK_TOLERANCE,
            keep_replicates: false,
        }
    }
}

/// Aggregated Monte Carlo result for one estimator.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub estimator: String,
    pub mean: f64,
    pub variance: f64,
    pub squared_bias: f64,
    pub rmse: f64,
    pub mean_comm_rounds: f64,
    pub mean_floats_up_per_study: f64,
    pub mean_floats_down_per_study: f64,
    pub failures: usize,
    pub replications: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub rows: Vec<SummaryRow>,
    /// Per-replication estimates, indexed [replication][estimator]; NaN
    /// marks a recorded failure. Present when the plan keeps replicates.
    pub replicates: Option<Vec<Vec<f64>>>,
    pub true_tau: f64,
}

struct RepOutcome {
    taus: Vec<f64>,
    rounds: Vec<f64>,
    up: Vec<f64>,
    down: Vec<f64>,
}

fn run_estimators_once(
    fed: &FederatedDataset,
    estimators: &[EstimatorId],
    options: &ProtocolOptions,
) -> RepOutcome {
    let m = estimators.len();
    let mut out = RepOutcome {
        taus: vec![f64::NAN; m],
        rounds: vec![f64::NAN; m],
        up: vec![f64::NAN; m],
        down: vec![f64::NAN; m],
    };
    for (j, &id) in estimators.iter().enumerate() {
        if let Ok(report) = run_protocol(fed, id, options) {
            out.taus[j] = report.tau_hat;
            if let Some(ledger) = &report.comm {
                out.rounds[j] = ledger.rounds as f64;
                out.up[j] = ledger.floats_up_per_study as f64;
                out.down[j] = ledger.floats_down_per_study as f64;
            }
        }
    }
    out
}

fn summarize(
    estimators: &[EstimatorId],
    outcomes: &[RepOutcome],
    true_tau: f64,
) -> Vec<SummaryRow> {
    let r = outcomes.len();
    estimators
        .iter()
        .enumerate()
        .map(|(j, id)| {
            let taus: Vec<f64> = outcomes.iter().map(|o| o.taus[j]).filter(|t| t.is_finite()).collect();
            let failures = r - taus.len();
            let ok = taus.len().max(1) as f64;
            let mean = taus.iter().sum::<f64>() / ok;
            let variance = taus.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / ok;
            let squared_bias = (mean - true_tau) * (mean - true_tau);
            let avg = |f: &dyn Fn(&RepOutcome) -> f64| -> f64 {
                let vals: Vec<f64> = outcomes.iter().map(f).filter(|v| v.is_finite()).collect();
                if vals.is_empty() {
                    0.0
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                }
            };
            SummaryRow {
                estimator: id.name(),
                mean,
                variance,
                squared_bias,
                rmse: (squared_bias + variance).sqrt(),
                mean_comm_rounds: avg(&|o| o.rounds[j]),
                mean_floats_up_per_study: avg(&|o| o.up[j]),
                mean_floats_down_per_study: avg(&|o| o.down[j]),
                failures,
                replications: r,
            }
        })
        .collect()
}

/// Runs the plan: replication r generates a dataset with RngStream
/// (base_seed, r) and evaluates every requested estimator. Estimator
/// failures are recorded per row, never fatal.
pub fn run_monte_carlo(plan: &ExperimentPlan) -> Result<ExperimentOutput> {
    if plan.replications == 0 {
        return Err(Error::ValueError { line: 0, message: "replications must be >= 1".into() });
    }
    plan.scenario.validate()?;
    let truth = true_ate(&plan.scenario)?;
    let options = ProtocolOptions { rank_tolerance: plan.rank_tolerance, fedavg: plan.fedavg.clone() };
    let outcomes: Vec<RepOutcome> = (0..plan.replications)
        .into_par_iter()
        .map(|r| {
            let mut rng = RngStream::new(plan.base_seed, r as u64);
            match generate(&plan.scenario, &mut rng) {
                Ok(fed) => run_estimators_once(&fed, &plan.estimators, &options),
                Err(_) => RepOutcome {
                    taus: vec![f64::NAN; plan.estimators.len()],
                    rounds: vec![f64::NAN; plan.estimators.len()],
                    up: vec![f64::NAN; plan.estimators.len()],
                    down: vec![f64::NAN; plan.estimators.len()],
                },
            }
        })
        .collect();
    let rows = summarize(&plan.estimators, &outcomes, truth.tau);
    let replicates =
        plan.keep_replicates.then(|| outcomes.iter().map(|o| o.taus.clone()).collect());
    Ok(ExperimentOutput { rows, replicates, true_tau: truth.tau })
}

/// Bootstrap experiment over a fixed dataset: stratified row resampling,
/// optional per-resample treatment/outcome regeneration, then every
/// requested estimator. Bias is measured against `true_tau`.
#[derive(Debug, Clone)]
pub struct BootstrapPlan {
    pub estimators: Vec<EstimatorId>,
    pub resamples: usize,
    pub base_seed: u64,
    pub fedavg: FedAvgConfig,
    pub rank_tolerance: f64,
    /// Regeneration applied to each resample's covariates; when absent the
    /// resampled rows keep their observed treatment and outcome.
    pub regen: Option<RegenParams>,
    pub true_tau: f64,
    pub keep_replicates: bool,
}

pub fn run_bootstrap(fed: &FederatedDataset, plan: &BootstrapPlan) -> Result<ExperimentOutput> {
    if plan.resamples == 0 {
        return Err(Error::ValueError { line: 0, message: "resamples must be >= 1".into() });
    }
    let options = ProtocolOptions { rank_tolerance: plan.rank_tolerance, fedavg: plan.fedavg.clone() };
    let outcomes: Vec<RepOutcome> = (0..plan.resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = RngStream::new(plan.base_seed, r as u64);
            let resampled = bootstrap_resample(fed, &mut rng);
            let ready = match &plan.regen {
                Some(params) => regenerate_outcomes(&resampled, params, &mut rng),
                None => Ok(resampled),
            };
            match ready {
                Ok(data) => run_estimators_once(&data, &plan.estimators, &options),
                Err(_) => RepOutcome {
                    taus: vec![f64::NAN; plan.estimators.len()],
                    rounds: vec![f64::NAN; plan.estimators.len()],
                    up: vec![f64::NAN; plan.estimators.len()],
                    down: vec![f64::NAN; plan.estimators.len()],
                },
            }
        })
        .collect();
    let rows = summarize(&plan.estimators, &outcomes, plan.true_tau);
    let replicates =
        plan.keep_replicates.then(|| outcomes.iter().map(|o| o.taus.clone()).collect());
    Ok(ExperimentOutput { rows, replicates, true_tau: plan.true_tau })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(ReportFormat::Csv),
            Some("json") => Ok(ReportFormat::Json),
            other => Err(Error::ValueError {
                line: 0,
                message: format!("cannot infer report format from extension {other:?}"),
            }),
        }
    }
}

/// Writes summary rows in a schema-stable order. CSV columns mirror
/// [`SummaryRow`] fields.
pub fn emit_report(rows: &[SummaryRow], format: ReportFormat, path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::ValueError { line: 0, message: "no rows to emit".into() });
    }
    use std::io::Write;
    let file = std::fs::File::create(path)?;
    let mut f = std::io::BufWriter::new(file);
    match format {
        ReportFormat::Csv => {
            writeln!(
                f,
                "estimator,mean,variance,squared_bias,rmse,mean_comm_rounds,\
                 mean_floats_up_per_study,mean_floats_down_per_study,failures,replications"
            )?;
            for r in rows {
                writeln!(
                    f,
                    "{},{},{},{},{},{},{},{},{},{}",
                    r.estimator,
                    r.mean,
                    r.variance,
                    r.squared_bias,
                    r.rmse,
                    r.mean_comm_rounds,
                    r.mean_floats_up_per_study,
                    r.mean_floats_down_per_study,
                    r.failures,
                    r.replications
                )?;
            }
        }
        ReportFormat::Json => {
            let text = serde_json::to_string_pretty(rows)
                .map_err(|e| Error::IoError(e.to_string()))?;
            writeln!(f, "{text}")?;
        }
    }
    Ok(())
}

/// Dumps per-replication estimates for external plotting: one row per
/// (replication, estimator), NaN marking recorded failures.
pub fn emit_replicates(
    estimators: &[EstimatorId],
    replicates: &[Vec<f64>],
    path: &Path,
) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path)?;
    let mut f = std::io::BufWriter::new(file);
    writeln!(f, "replication,estimator,tau_hat")?;
    for (r, taus) in replicates.iter().enumerate() {
        for (id, tau) in estimators.iter().zip(taus) {
            writeln!(f, "{},{},{}", r, id.name(), tau)?;
        }
    }
    Ok(())
}
