//! Simulated server/study message exchange: FedAvg for the per-arm OLS
//! problem, learning-rate selection, and exact communication accounting.
//!
//! The "network" is an in-process message log. Only aggregates ever cross
//! the study boundary; raw rows never appear in a message payload.
//!
//! Documented float counts per study (D = design columns, d = covariates):
//!   Meta-SW        1 round;  up 2 (tau_k, n_k)
//!   Meta-IVW       1 round;  up 3 (tau_k, V_k, n_k)
//!   1S-SW          2 rounds; up 2(D+1) + 2, down 2D
//!   1S-IVW         2 rounds; up 2(D+D^2) + 2, down 2D   (Gram[0,0] carries n_k^w)
//!   1S-SW-adj      2 rounds; up 2(d+1) + 2, down 2d
//!   1S-IVW-adj     2 rounds; up 2(d+d^2) + 2, down 2d
//!   GD / GD-adj    T+1 rounds; per arm per round up D down D, plus n_k^w
//!                  (and lambda_max_k under an auto rate) in round 1 and the
//!                  closing (tau_k, n_k) round.

use serde::{Deserialize, Serialize};

use crate::data::{ArmView, FederatedDataset};
use crate::error::{Error, Result};
use crate::estimators::{
    dm, gd_tau, local_tau, meta_ivw, meta_sw, one_shot_tau, plugin_local_variance, pool_tau,
    study_arm_fits, EstimateReport, EstimatorId, FederationMode,
};
use crate::numerics::{max_eigenvalue, norm2, Matrix, RngStream};

const DIVERGENCE_GUARD: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
}

/// Payload kinds that may cross the study/server boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    LocalAte,
    LocalTheta,
    GlobalTheta,
    LocalModel,
    LocalEigen,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MessageRecord {
    pub round: usize,
    pub direction: Direction,
    pub study: usize,
    pub kind: MessageKind,
    pub floats: usize,
}

/// Exact message accounting for one protocol execution.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CommLedger {
    pub rounds: usize,
    /// Total floats uploaded by any single study (uniform across studies for
    /// every shipped protocol; the log carries the per-study breakdown).
    pub floats_up_per_study: usize,
    pub floats_down_per_study: usize,
    pub log: Vec<MessageRecord>,
}

impl CommLedger {
    pub fn record(&mut self, round: usize, direction: Direction, study: usize, kind: MessageKind, floats: usize) {
        self.log.push(MessageRecord { round, direction, study, kind, floats });
        self.rounds = self.rounds.max(round);
    }

    /// Merges another ledger (e.g. the other arm's FedAvg run), remapping its
    /// study indices through `owners`.
    pub fn absorb(&mut self, other: &CommLedger, owners: &[usize]) {
        for r in &other.log {
            self.log.push(MessageRecord { study: owners[r.study], ..r.clone() });
        }
        self.rounds = self.rounds.max(other.rounds);
    }

    /// Recomputes the per-study totals from the log.
    pub fn finalize(&mut self, k: usize) {
        let mut up = vec![0usize; k];
        let mut down = vec![0usize; k];
        for r in &self.log {
            match r.direction {
                Direction::Up => up[r.study] += r.floats,
                Direction::Down => down[r.study] += r.floats,
            }
        }
        self.floats_up_per_study = up.into_iter().max().unwrap_or(0);
        self.floats_down_per_study = down.into_iter().max().unwrap_or(0);
    }

    pub fn total_up(&self) -> usize {
        self.log.iter().filter(|r| r.direction == Direction::Up).map(|r| r.floats).sum()
    }

    pub fn total_down(&self) -> usize {
        self.log.iter().filter(|r| r.direction == Direction::Down).map(|r| r.floats).sum()
    }

    /// Per-study upload total from the log.
    pub fn up_for_study(&self, study: usize) -> usize {
        self.log
            .iter()
            .filter(|r| r.direction == Direction::Up && r.study == study)
            .map(|r| r.floats)
            .sum()
    }

    pub fn down_for_study(&self, study: usize) -> usize {
        self.log
            .iter()
            .filter(|r| r.direction == Direction::Down && r.study == study)
            .map(|r| r.floats)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BatchSize {
    Full,
    Size(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LearningRate {
    /// eta = 0.95 / (size-weighted mean of per-study lambda_max of the
    /// normalized Grams). The weighted mean upper-bounds the pooled
    /// lambda_max, so the step is always stable, without the conservatism
    /// of the sum bound.
    Auto,
    Fixed(f64),
}

/// FedAvg hyperparameters. `batch_seed`/`batch_stream` feed mini-batch
/// sampling only; full-batch runs consume no randomness.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FedAvgConfig {
    pub rounds: usize,
    pub local_steps: usize,
    pub batch: BatchSize,
    pub eta: LearningRate,
    pub convergence_tol: f64,
    pub batch_seed: u64,
    pub batch_stream: u64,
}

impl Default for FedAvgConfig {
    fn default() -> Self {
        FedAvgConfig {
            rounds: 4000,
            local_steps: 1,
            batch: BatchSize::Full,
            eta: LearningRate::Auto,
            convergence_tol: 1e-10,
            batch_seed: 0,
            batch_stream: 0,
        }
    }
}

impl FedAvgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.local_steps == 0 {
            return Err(Error::ValueError { line: 0, message: "T and E must be >= 1".into() });
        }
        if let BatchSize::Size(0) = self.batch {
            return Err(Error::ValueError { line: 0, message: "B must be >= 1".into() });
        }
        if let LearningRate::Fixed(eta) = self.eta {
            if !(eta > 0.0) {
                return Err(Error::ValueError { line: 0, message: "eta must be > 0".into() });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FedAvgRun {
    pub theta: Vec<f64>,
    pub ledger: CommLedger,
    pub rounds_used: usize,
    pub eta: f64,
}

/// Mode for [`select_learning_rate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateMode {
    /// E = 1, global rate toward the pooled solution: (2 / sum_k lambda_max_k) / 10.
    GlobalE1,
    /// T = 1, per-study local rates 2 / lambda_max_k.
    LocalT1,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LearningRates {
    Global(f64),
    PerStudy(Vec<f64>),
}

fn study_lambda_max(views: &[ArmView]) -> Result<Vec<f64>> {
    views
        .iter()
        .map(|v| {
            let g = v.design.gram().scale(1.0 / v.n() as f64);
            max_eigenvalue(&g, 1e-9, 100_000)
        })
        .collect()
}

/// The learning-rate rules stated for the two FedAvg regimes, including the
/// tenfold safety division of the global rule.
pub fn select_learning_rate(views: &[ArmView], mode: RateMode) -> Result<LearningRates> {
    let lambdas = study_lambda_max(views)?;
    match mode {
        RateMode::GlobalE1 => {
            let sum: f64 = lambdas.iter().sum();
            Ok(LearningRates::Global(2.0 / sum / 10.0))
        }
        RateMode::LocalT1 => Ok(LearningRates::PerStudy(lambdas.iter().map(|l| 2.0 / l).collect())),
    }
}

/// Runs FedAvg over one arm's per-study views: T rounds of E local gradient
/// steps followed by size-weighted averaging, with early stopping once the
/// aggregate moves less than `convergence_tol` in L2.
pub fn run_fedavg(views: &[ArmView], cfg: &FedAvgConfig) -> Result<FedAvgRun> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(Error::EmptyArm("no study views".into()));
    }
    let p = views[0].design.cols();
    if views.iter().any(|v| v.design.cols() != p) {
        return Err(Error::DimensionError("views disagree on column count".into()));
    }
    let sizes: Vec<usize> = views.iter().map(|v| v.n()).collect();
    let n_w: usize = sizes.iter().sum();
    let weights: Vec<f64> = sizes.iter().map(|&s| s as f64 / n_w as f64).collect();

    let mut ledger = CommLedger::default();
    let auto = matches!(cfg.eta, LearningRate::Auto);
    let eta = match cfg.eta {
        LearningRate::Fixed(v) => v,
        LearningRate::Auto => {
            let lambdas = study_lambda_max(views)?;
            let lbar: f64 = lambdas.iter().zip(&weights).map(|(l, w)| l * w).sum();
            0.95 / lbar
        }
    };

    // full-batch gradients reduce to Gram form: grad = -(2/n_k)(b_k - G_k theta)
    let grams: Vec<Matrix> = views.iter().map(|v| v.design.gram()).collect();
    let rhs: Vec<Vec<f64>> = views.iter().map(|v| v.design.tr_matvec(&v.response)).collect();
    let mut batch_rng = RngStream::new(cfg.batch_seed, cfg.batch_stream);
    let mut index_pool: Vec<Vec<usize>> = sizes.iter().map(|&n| (0..n).collect()).collect();

    let mut theta = vec![0.0; p];
    let mut rounds_used = 0usize;
    for t in 1..=cfg.rounds {
        let mut next = vec![0.0; p];
        for (k, view) in views.iter().enumerate() {
            ledger.record(t, Direction::Down, k, MessageKind::GlobalTheta, p);
            let mut local = theta.clone();
            for _ in 0..cfg.local_steps {
                match cfg.batch {
                    BatchSize::Full => {
                        let gt = grams[k].matvec(&local);
                        let scale = 2.0 * eta / sizes[k] as f64;
                        for j in 0..p {
                            local[j] += scale * (rhs[k][j] - gt[j]);
                        }
                    }
                    BatchSize::Size(b) => {
                        let b = b.min(sizes[k]);
                        // partial Fisher-Yates for a batch without replacement
                        let pool = &mut index_pool[k];
                        for i in 0..b {
                            let j = i + batch_rng.below(pool.len() - i);
                            pool.swap(i, j);
                        }
                        let mut grad = vec![0.0; p];
                        for &i in pool[..b].iter() {
                            let row = view.design.row(i);
                            let resid = view.response[i] - crate::numerics::dot(row, &local);
                            for j in 0..p {
                                grad[j] += -2.0 * row[j] * resid;
                            }
                        }
                        let scale = eta / b as f64;
                        for j in 0..p {
                            local[j] -= scale * grad[j];
                        }
                    }
                }
            }
            let mut up = p;
            if t == 1 {
                up += 1; // n_k^w announced with the first model upload
                if auto {
                    ledger.record(t, Direction::Up, k, MessageKind::LocalEigen, 1);
                }
            }
            ledger.record(t, Direction::Up, k, MessageKind::LocalModel, up);
            for j in 0..p {
                next[j] += weights[k] * local[j];
            }
        }
        let step: f64 = theta
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        theta = next;
        rounds_used = t;
        let nrm = norm2(&theta);
        if !nrm.is_finite() || nrm > DIVERGENCE_GUARD {
            return Err(Error::Divergence(format!("parameter norm {nrm:.3e} at round {t}")));
        }
        if cfg.convergence_tol > 0.0 && step <= cfg.convergence_tol {
            break;
        }
    }
    ledger.finalize(views.len());
    Ok(FedAvgRun { theta, ledger, rounds_used, eta })
}

/// Options shared by the protocol runner.
#[derive(Debug, Clone)]
pub struct ProtocolOptions {
    pub rank_tolerance: f64,
    pub fedavg: FedAvgConfig,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        ProtocolOptions {
            rank_tolerance: crate::estimators::DEFAULT_RANK_TOLERANCE,
            fedavg: FedAvgConfig::default(),
        }
    }
}

/// Executes an estimator's exact message choreography and returns its report
/// with the communication ledger attached. The tau values are produced by
/// the same estimator functions a direct call would use.
pub fn run_protocol(
    fed: &FederatedDataset,
    estimator: EstimatorId,
    options: &ProtocolOptions,
) -> Result<EstimateReport> {
    let tol = options.rank_tolerance;
    let k = fed.k();
    let d = fed.dim;
    match estimator {
        EstimatorId::Dm => {
            let mut report = dm(fed)?;
            report.comm = Some(CommLedger::default());
            Ok(report)
        }
        EstimatorId::Local(idx) => {
            let pos = idx.checked_sub(1).filter(|&i| i < k).ok_or_else(|| Error::ValueError {
                line: 0,
                message: format!("local:{idx} out of range 1..{k}"),
            })?;
            let ds = &fed.studies[pos];
            let mut report = local_tau(ds, idx, tol)?;
            let (f1, f0) = study_arm_fits(ds, tol)?;
            report.plugin_variance = plugin_local_variance(ds, &f1, &f0).ok();
            report.comm = Some(CommLedger::default());
            Ok(report)
        }
        EstimatorId::Pool | EstimatorId::PoolAdj => {
            let mut report = pool_tau(fed, estimator == EstimatorId::PoolAdj, tol)?;
            report.comm = Some(CommLedger::default());
            Ok(report)
        }
        EstimatorId::MetaSw => {
            let mut ledger = CommLedger::default();
            let mut locals = Vec::with_capacity(k);
            for (pos, s) in fed.studies.iter().enumerate() {
                locals.push(local_tau(s, pos + 1, tol)?);
                ledger.record(1, Direction::Up, pos, MessageKind::LocalAte, 2);
            }
            let mut report = meta_sw(&locals, &fed.sizes())?;
            ledger.finalize(k);
            report.comm = Some(ledger);
            Ok(report)
        }
        EstimatorId::MetaIvw => {
            let mut ledger = CommLedger::default();
            let mut locals = Vec::with_capacity(k);
            let mut variances = Vec::with_capacity(k);
            for (pos, s) in fed.studies.iter().enumerate() {
                let (f1, f0) = study_arm_fits(s, tol)?;
                locals.push(local_tau(s, pos + 1, tol)?);
                variances.push(plugin_local_variance(s, &f1, &f0)?);
                ledger.record(1, Direction::Up, pos, MessageKind::LocalAte, 3);
            }
            let mut report = meta_ivw(&locals, &variances)?;
            report.plugin_variance = Some(1.0 / variances.iter().map(|v| 1.0 / v).sum::<f64>());
            ledger.finalize(k);
            report.comm = Some(ledger);
            Ok(report)
        }
        EstimatorId::OneShotSw | EstimatorId::OneShotIvw => {
            let ivw = estimator == EstimatorId::OneShotIvw;
            let cols = d + 1;
            let up1 = if ivw { 2 * (cols + cols * cols) } else { 2 * (cols + 1) };
            let mut ledger = CommLedger::default();
            for pos in 0..k {
                ledger.record(1, Direction::Up, pos, MessageKind::LocalTheta, up1);
                ledger.record(1, Direction::Down, pos, MessageKind::GlobalTheta, 2 * cols);
                ledger.record(2, Direction::Up, pos, MessageKind::LocalAte, 2);
            }
            let mode = if ivw { FederationMode::Ivw } else { FederationMode::Sw };
            let mut report = one_shot_tau(fed, mode, false, tol)?;
            ledger.finalize(k);
            report.comm = Some(ledger);
            Ok(report)
        }
        EstimatorId::OneShotSwAdj | EstimatorId::OneShotIvwAdj => {
            let ivw = estimator == EstimatorId::OneShotIvwAdj;
            let up1 = if ivw { 2 * (d + d * d) } else { 2 * (d + 1) };
            let mut ledger = CommLedger::default();
            for pos in 0..k {
                ledger.record(1, Direction::Up, pos, MessageKind::LocalTheta, up1);
                ledger.record(1, Direction::Down, pos, MessageKind::GlobalTheta, 2 * d);
                ledger.record(2, Direction::Up, pos, MessageKind::LocalAte, 2);
            }
            let mode = if ivw { FederationMode::Ivw } else { FederationMode::Sw };
            let mut report = one_shot_tau(fed, mode, true, tol)?;
            ledger.finalize(k);
            report.comm = Some(ledger);
            Ok(report)
        }
        EstimatorId::Gd => gd_tau(fed, &options.fedavg, false, tol),
        EstimatorId::GdAdj => gd_tau(fed, &options.fedavg, true, tol),
    }
}
