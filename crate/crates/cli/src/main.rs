//! `fedate` command line: simulate scenarios, estimate from CSV data, ask
//! the decision advisor, and benchmark protocol communication.
//!
//! Exit codes: 0 success, 2 validation error (bad input, bad flags, I/O),
//! 3 numerical failure (rank deficiency, divergence, invalid formula).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedate::data::{load_csv, CsvSchema};
use fedate::error::Error;
use fedate::estimators::EstimatorId;
use fedate::federation::{run_protocol, BatchSize, FedAvgConfig, LearningRate, ProtocolOptions};
use fedate::harness::{emit_replicates, emit_report, run_monte_carlo, ExperimentPlan, ReportFormat};
use fedate::numerics::RngStream;
use fedate::scenarios::{generate, preset, ScenarioConfig, PRESET_NAMES};
use fedate::theory::{recommend, ScenarioFlags};

#[derive(Parser)]
#[command(name = "fedate", version, about = "Federated ATE estimation for multi-study trials")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo simulation of a scenario preset or JSON config.
    Simulate(SimulateArgs),
    /// One estimate from a CSV dataset.
    Estimate(EstimateArgs),
    /// Walk the practitioner decision diagram.
    Advise(AdviseArgs),
    /// Emit the exact communication ledger of one protocol run.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Preset name or path to a scenario JSON file.
    #[arg(long)]
    scenario: String,
    /// `all` or a comma-separated list (dm,pool,meta-sw,meta-ivw,1s-sw,
    /// 1s-ivw,gd,pool-adj,gd-adj,1s-sw-adj,1s-ivw-adj,local:<k>).
    #[arg(long, default_value = "all")]
    estimators: String,
    #[arg(long, default_value_t = 200)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dump per-replication estimates to this CSV.
    #[arg(long)]
    dump_reps: Option<PathBuf>,
    /// Output report path; format follows the extension (.csv or .json).
    #[arg(long)]
    out: PathBuf,
    /// FedAvg settings as `T=..,E=..,B=..|full,eta=..|auto`.
    #[arg(long)]
    fedavg: Option<String>,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Estimator id; see `simulate --estimators`.
    #[arg(long)]
    estimator: String,
    /// Use the study-effect-adjusted variant where one exists.
    #[arg(long)]
    adjusted: bool,
    #[arg(long)]
    fedavg: Option<String>,
    /// Output JSON path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AdviseArgs {
    #[arg(long)]
    local_full_rank: bool,
    #[arg(long)]
    federated_full_rank: bool,
    #[arg(long)]
    same_x_dist: bool,
    #[arg(long)]
    study_effects: bool,
    #[arg(long)]
    same_p: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    estimator: String,
    /// Covariate dimension of the synthetic benchmark dataset.
    #[arg(long, default_value_t = 10)]
    d: usize,
    /// FedAvg round budget (GD estimators).
    #[arg(long, default_value_t = 100)]
    t: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
}

fn parse_fedavg(spec: &str) -> Result<FedAvgConfig, Error> {
    let mut cfg = FedAvgConfig::default();
    for part in spec.split(',').filter(|p| !p.is_empty()) {
        let (key, value) = part.split_once('=').ok_or_else(|| Error::ValueError {
            line: 0,
            message: format!("bad fedavg setting `{part}`, expected key=value"),
        })?;
        let bad = |what: &str| Error::ValueError {
            line: 0,
            message: format!("bad fedavg {what} `{value}`"),
        };
        match key {
            "T" | "t" => cfg.rounds = value.parse().map_err(|_| bad("T"))?,
            "E" | "e" => cfg.local_steps = value.parse().map_err(|_| bad("E"))?,
            "B" | "b" => {
                cfg.batch = if value == "full" {
                    BatchSize::Full
                } else {
                    BatchSize::Size(value.parse().map_err(|_| bad("B"))?)
                }
            }
            "eta" => {
                cfg.eta = if value == "auto" {
                    LearningRate::Auto
                } else {
                    LearningRate::Fixed(value.parse().map_err(|_| bad("eta"))?)
                }
            }
            "tol" => cfg.convergence_tol = value.parse().map_err(|_| bad("tol"))?,
            other => {
                return Err(Error::ValueError {
                    line: 0,
                    message: format!("unknown fedavg key `{other}`"),
                })
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_scenario(name_or_path: &str) -> Result<ScenarioConfig, Error> {
    if PRESET_NAMES.contains(&name_or_path) {
        return preset(name_or_path);
    }
    let text = std::fs::read_to_string(name_or_path)
        .map_err(|e| Error::IoError(format!("{name_or_path}: {e}")))?;
    let cfg: ScenarioConfig =
        serde_json::from_str(&text).map_err(|e| Error::SchemaError(format!("{name_or_path}: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_estimators(spec: &str) -> Result<Vec<EstimatorId>, Error> {
    if spec == "all" {
        return Ok(EstimatorId::all());
    }
    spec.split(',').map(|s| EstimatorId::parse(s.trim())).collect()
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), Error> {
    let scenario = load_scenario(&args.scenario)?;
    let mut plan = ExperimentPlan::new(scenario, parse_estimators(&args.estimators)?, args.reps, args.seed);
    if let Some(spec) = &args.fedavg {
        plan.fedavg = parse_fedavg(spec)?;
    }
    plan.keep_replicates = args.dump_reps.is_some();
    let format = ReportFormat::from_path(&args.out)?;
    let out = run_monte_carlo(&plan)?;
    emit_report(&out.rows, format, &args.out)?;
    if let (Some(path), Some(reps)) = (&args.dump_reps, &out.replicates) {
        emit_replicates(&plan.estimators, reps, path)?;
    }
    eprintln!(
        "simulated {} replications of `{}` (true tau {:.6}) -> {}",
        args.reps,
        args.scenario,
        out.true_tau,
        args.out.display()
    );
    Ok(())
}

fn cmd_estimate(args: &EstimateArgs) -> Result<(), Error> {
    let fed = load_csv(&args.data, &CsvSchema::default())?;
    let mut id = EstimatorId::parse(&args.estimator)?;
    if args.adjusted {
        id = id.adjusted().ok_or_else(|| Error::ValueError {
            line: 0,
            message: format!("estimator `{}` has no adjusted variant", args.estimator),
        })?;
    }
    let mut options = ProtocolOptions::default();
    if let Some(spec) = &args.fedavg {
        options.fedavg = parse_fedavg(spec)?;
    }
    let report = run_protocol(&fed, id, &options)?;
    let payload = serde_json::json!({
        "estimator": report.estimator.name(),
        "tau_hat": report.tau_hat,
        "plugin_variance": report.plugin_variance,
        "comm": report.comm,
    });
    let text = serde_json::to_string_pretty(&payload).expect("serializable");
    match &args.out {
        Some(path) => std::fs::write(path, text + "\n").map_err(Error::from)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_advise(args: &AdviseArgs) -> Result<(), Error> {
    let flags = ScenarioFlags {
        local_full_rank: args.local_full_rank,
        // local full rank implies federated full rank
        federated_full_rank: args.federated_full_rank || args.local_full_rank,
        same_covariate_distribution: args.same_x_dist,
        study_effects: args.study_effects,
        same_treatment_probabilities: args.same_p,
    };
    let rec = recommend(&flags)?;
    println!("{}", serde_json::to_string_pretty(&rec).expect("serializable"));
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<(), Error> {
    let id = EstimatorId::parse(&args.estimator)?;
    let d = args.d;
    let cfg = ScenarioConfig {
        k: args.k,
        d,
        sigma2: 1.0,
        arm1: fedate::scenarios::ArmParams { c: 1.0, beta: vec![0.5; d] },
        arm0: fedate::scenarios::ArmParams { c: 0.0, beta: vec![0.25; d] },
        studies: (0..args.k)
            .map(|_| fedate::scenarios::StudySpec {
                n: 4 * (d + 2),
                p: 0.5,
                mu: vec![0.0; d],
                sigma: fedate::scenarios::CovarianceSpec::ScaledIdentityPlusOnes { a: 1.0, b: 0.0 },
                h: 0.0,
            })
            .collect(),
    };
    let fed = generate(&cfg, &mut RngStream::new(1729, 0))?;
    let options = ProtocolOptions {
        fedavg: FedAvgConfig { rounds: args.t, convergence_tol: 0.0, ..FedAvgConfig::default() },
        ..ProtocolOptions::default()
    };
    let report = run_protocol(&fed, id, &options)?;
    let ledger = report.comm.expect("protocol runs carry a ledger");
    let payload = serde_json::json!({
        "estimator": report.estimator.name(),
        "rounds": ledger.rounds,
        "floats_up_per_study": ledger.floats_up_per_study,
        "floats_down_per_study": ledger.floats_down_per_study,
        "log": ledger.log,
    });
    println!("{}", serde_json::to_string_pretty(&payload).expect("serializable"));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Estimate(args) => cmd_estimate(args),
        Command::Advise(args) => cmd_advise(args),
        Command::Bench(args) => cmd_bench(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
