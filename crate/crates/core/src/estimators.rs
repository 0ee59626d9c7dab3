//! The ATE estimator family: difference-in-means, local and pooled G-formula,
//! meta-analysis (SW/IVW), one-shot federation (SW/IVW), gradient-based
//! federation, and the study-effect-adjusted variants.

use serde::{Deserialize, Serialize};

use crate::data::{augment_dummies, split_by_arm, ArmView, FederatedDataset, StudyDataset};
use crate::error::{Error, Result};
use crate::federation::{run_fedavg, CommLedger, Direction, FedAvgConfig, MessageKind};
use crate::numerics::{dot, solve_least_squares, solve_spd, Matrix};

pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-10;

/// Identity of every estimator in the family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorId {
    Dm,
    Local(usize),
    Pool,
    MetaSw,
    MetaIvw,
    OneShotSw,
    OneShotIvw,
    Gd,
    PoolAdj,
    GdAdj,
    OneShotSwAdj,
    OneShotIvwAdj,
}

impl EstimatorId {
    pub fn name(&self) -> String {
        match self {
            EstimatorId::Dm => "dm".into(),
            EstimatorId::Local(k) => format!("local:{k}"),
            EstimatorId::Pool => "pool".into(),
            EstimatorId::MetaSw => "meta-sw".into(),
            EstimatorId::MetaIvw => "meta-ivw".into(),
            EstimatorId::OneShotSw => "1s-sw".into(),
            EstimatorId::OneShotIvw => "1s-ivw".into(),
            EstimatorId::Gd => "gd".into(),
            EstimatorId::PoolAdj => "pool-adj".into(),
            EstimatorId::GdAdj => "gd-adj".into(),
            EstimatorId::OneShotSwAdj => "1s-sw-adj".into(),
            EstimatorId::OneShotIvwAdj => "1s-ivw-adj".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let id = match s {
            "dm" => EstimatorId::Dm,
            "pool" => EstimatorId::Pool,
            "meta-sw" => EstimatorId::MetaSw,
            "meta-ivw" => EstimatorId::MetaIvw,
            "1s-sw" => EstimatorId::OneShotSw,
            "1s-ivw" => EstimatorId::OneShotIvw,
            "gd" => EstimatorId::Gd,
            "pool-adj" => EstimatorId::PoolAdj,
            "gd-adj" => EstimatorId::GdAdj,
            "1s-sw-adj" => EstimatorId::OneShotSwAdj,
            "1s-ivw-adj" => EstimatorId::OneShotIvwAdj,
            other => {
                if let Some(k) = other.strip_prefix("local:") {
                    let k: usize = k.parse().map_err(|_| Error::ValueError {
                        line: 0,
                        message: format!("bad study index in `{other}`"),
                    })?;
                    return Ok(EstimatorId::Local(k));
                }
                return Err(Error::ValueError { line: 0, message: format!("unknown estimator `{other}`") });
            }
        };
        Ok(id)
    }

    /// The adjusted variant of an estimator, where one exists.
    pub fn adjusted(&self) -> Option<EstimatorId> {
        match self {
            EstimatorId::Pool => Some(EstimatorId::PoolAdj),
            EstimatorId::Gd => Some(EstimatorId::GdAdj),
            EstimatorId::OneShotSw => Some(EstimatorId::OneShotSwAdj),
            EstimatorId::OneShotIvw => Some(EstimatorId::OneShotIvwAdj),
            _ => None,
        }
    }

    /// Every estimator that applies to a multi-study dataset.
    pub fn all() -> Vec<EstimatorId> {
        vec![
            EstimatorId::Dm,
            EstimatorId::Pool,
            EstimatorId::MetaSw,
            EstimatorId::MetaIvw,
            EstimatorId::OneShotSw,
            EstimatorId::OneShotIvw,
            EstimatorId::Gd,
            EstimatorId::PoolAdj,
            EstimatorId::GdAdj,
            EstimatorId::OneShotSwAdj,
            EstimatorId::OneShotIvwAdj,
        ]
    }
}

/// Fitted outcome-model state for one arm: OLS parameters, the Gram matrix
/// the fit was computed from, the arm size and the residual variance with
/// denominator (n_arm - columns), clamped to zero on perfect fits.
#[derive(Debug, Clone)]
pub struct ArmFit {
    pub theta: Vec<f64>,
    pub gram: Matrix,
    pub n_arm: usize,
    pub residual_variance: f64,
}

/// One estimator's result.
#[derive(Debug, Clone)]
pub struct EstimateReport {
    pub estimator: EstimatorId,
    pub tau_hat: f64,
    pub plugin_variance: Option<f64>,
    pub comm: Option<CommLedger>,
}

impl EstimateReport {
    fn bare(estimator: EstimatorId, tau_hat: f64) -> Self {
        EstimateReport { estimator, tau_hat, plugin_variance: None, comm: None }
    }
}

fn fit_one_arm(view: &ArmView, rank_tolerance: f64) -> Result<ArmFit> {
    let theta = solve_least_squares(&view.design, &view.response, rank_tolerance)?;
    let gram = view.design.gram();
    let fitted = view.design.matvec(&theta);
    let rss: f64 = view.response.iter().zip(&fitted).map(|(y, f)| (y - f) * (y - f)).sum();
    let df = view.n() as isize - view.design.cols() as isize;
    let residual_variance = if df > 0 { (rss / df as f64).max(0.0) } else { 0.0 };
    Ok(ArmFit { theta, gram, n_arm: view.n(), residual_variance })
}

/// Per-arm OLS fits for a (treated, control) pair of views.
pub fn fit_arm_models(treated: &ArmView, control: &ArmView, rank_tolerance: f64) -> Result<(ArmFit, ArmFit)> {
    Ok((fit_one_arm(treated, rank_tolerance)?, fit_one_arm(control, rank_tolerance)?))
}

/// Plug-in G-formula: the mean of x'(theta1 - theta0) over the evaluation
/// design.
pub fn g_formula(theta1: &[f64], theta0: &[f64], eval_design: &Matrix) -> f64 {
    let dtheta: Vec<f64> = theta1.iter().zip(theta0).map(|(a, b)| a - b).collect();
    let n = eval_design.rows();
    let mut acc = 0.0;
    for i in 0..n {
        acc += dot(eval_design.row(i), &dtheta);
    }
    acc / n as f64
}

/// Difference-in-means over the pooled data.
pub fn dm(fed: &FederatedDataset) -> Result<EstimateReport> {
    let mut sum = [0.0f64; 2];
    let mut count = [0usize; 2];
    for s in &fed.studies {
        for i in 0..s.n() {
            let w = s.treatment[i] as usize;
            sum[w] += s.outcome[i];
            count[w] += 1;
        }
    }
    if count[0] == 0 || count[1] == 0 {
        return Err(Error::EmptyArm("pooled dataset".into()));
    }
    Ok(EstimateReport::bare(
        EstimatorId::Dm,
        sum[1] / count[1] as f64 - sum[0] / count[0] as f64,
    ))
}

/// Local fits for one study (treated, control).
pub fn study_arm_fits(ds: &StudyDataset, rank_tolerance: f64) -> Result<(ArmFit, ArmFit)> {
    let v1 = split_by_arm(ds, 1)?;
    let v0 = split_by_arm(ds, 0)?;
    fit_arm_models(&v1, &v0, rank_tolerance)
}

/// Local G-formula estimate for one study (position `k` is only used to tag
/// the report).
pub fn local_tau(ds: &StudyDataset, k: usize, rank_tolerance: f64) -> Result<EstimateReport> {
    let (f1, f0) = study_arm_fits(ds, rank_tolerance)?;
    let tau = g_formula(&f1.theta, &f0.theta, &ds.full_design());
    Ok(EstimateReport::bare(EstimatorId::Local(k), tau))
}

fn pooled_arm_view(fed: &FederatedDataset, arm: u8) -> Result<ArmView> {
    let mut rows = Vec::new();
    let mut response = Vec::new();
    for s in &fed.studies {
        if let Ok(v) = split_by_arm(s, arm) {
            for i in 0..v.n() {
                rows.push(v.design.row(i).to_vec());
            }
            response.extend_from_slice(&v.response);
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyArm(format!("pooled arm {arm}")));
    }
    Ok(ArmView { design: Matrix::from_rows(&rows)?, response })
}

fn full_pooled_design(fed: &FederatedDataset) -> Matrix {
    let mut rows = Vec::with_capacity(fed.n());
    for s in &fed.studies {
        let d = s.full_design();
        for i in 0..d.rows() {
            rows.push(d.row(i).to_vec());
        }
    }
    Matrix::from_rows(&rows).expect("uniform width")
}

/// Pooled OLS G-formula; with `adjusted` the design is augmented with K-1
/// study dummies first.
pub fn pool_tau(fed: &FederatedDataset, adjusted: bool, rank_tolerance: f64) -> Result<EstimateReport> {
    let work;
    let fed_ref = if adjusted {
        work = augment_dummies(fed)?;
        &work
    } else {
        fed
    };
    let v1 = pooled_arm_view(fed_ref, 1)?;
    let v0 = pooled_arm_view(fed_ref, 0)?;
    let (f1, f0) = fit_arm_models(&v1, &v0, rank_tolerance)?;
    let tau = g_formula(&f1.theta, &f0.theta, &full_pooled_design(fed_ref));
    Ok(EstimateReport::bare(
        if adjusted { EstimatorId::PoolAdj } else { EstimatorId::Pool },
        tau,
    ))
}

/// Sample-size-weighted meta estimate of local ATEs.
pub fn meta_sw(locals: &[EstimateReport], sizes: &[usize]) -> Result<EstimateReport> {
    if locals.is_empty() || locals.len() != sizes.len() {
        return Err(Error::DimensionError("locals and sizes disagree".into()));
    }
    let n: usize = sizes.iter().sum();
    let tau = locals
        .iter()
        .zip(sizes)
        .map(|(r, &nk)| nk as f64 / n as f64 * r.tau_hat)
        .sum();
    Ok(EstimateReport::bare(EstimatorId::MetaSw, tau))
}

/// Inverse-variance-weighted meta estimate.
pub fn meta_ivw(locals: &[EstimateReport], variances: &[f64]) -> Result<EstimateReport> {
    if locals.is_empty() || locals.len() != variances.len() {
        return Err(Error::DimensionError("locals and variances disagree".into()));
    }
    let mut wsum = 0.0;
    let mut acc = 0.0;
    for (r, &v) in locals.iter().zip(variances) {
        if !(v > 0.0) {
            return Err(Error::ZeroVariance(format!("estimated variance {v}")));
        }
        wsum += 1.0 / v;
        acc += r.tau_hat / v;
    }
    Ok(EstimateReport::bare(EstimatorId::MetaIvw, acc / wsum))
}

/// Closed-form plug-in of the local asymptotic variance:
/// sigma2_hat/(n_k p(1-p)) + |dbeta|^2_Sigma_hat / n_k.
pub fn plugin_variance_from_parts(
    sigma2_hat: f64,
    p_hat: f64,
    n_k: usize,
    dbeta: &[f64],
    sigma_hat: &Matrix,
) -> Result<f64> {
    if !(p_hat > 0.0 && p_hat < 1.0) {
        return Err(Error::DegenerateArm(format!("p_hat = {p_hat}")));
    }
    let quad = dot(&sigma_hat.matvec(dbeta), dbeta);
    Ok(sigma2_hat / (n_k as f64 * p_hat * (1.0 - p_hat)) + quad / n_k as f64)
}

/// Sample covariance (denominator n-1) of a study's covariates.
pub fn sample_covariance(x: &Matrix) -> Result<Matrix> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::DegenerateArm("covariance needs at least 2 rows".into()));
    }
    let means = x.col_means();
    let d = x.cols();
    let mut s = Matrix::zeros(d, d);
    for i in 0..n {
        let r = x.row(i);
        for a in 0..d {
            let da = r[a] - means[a];
            for b in a..d {
                let v = s.get(a, b) + da * (r[b] - means[b]);
                s.set(a, b, v);
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            let v = s.get(b, a);
            s.set(a, b, v);
        }
    }
    Ok(s.scale(1.0 / (n as f64 - 1.0)))
}

/// Plug-in variance of a study's local ATE: pooled-across-arms residual
/// variance with denominator n_k - d - 1, p_hat from the realized arm split,
/// and the sample covariance of the study's covariates.
pub fn plugin_local_variance(ds: &StudyDataset, fit1: &ArmFit, fit0: &ArmFit) -> Result<f64> {
    let n_k = ds.n();
    let d = ds.covariates.cols();
    if n_k <= d + 1 {
        return Err(Error::DegenerateArm(format!("n_k = {n_k} too small for d = {d}")));
    }
    let p_hat = fit1.n_arm as f64 / n_k as f64;
    let design = ds.full_design();
    let mut rss = 0.0;
    for i in 0..n_k {
        let theta = if ds.treatment[i] == 1 { &fit1.theta } else { &fit0.theta };
        let r = ds.outcome[i] - dot(design.row(i), theta);
        rss += r * r;
    }
    let sigma2_hat = rss / (n_k - d - 1) as f64;
    let dbeta: Vec<f64> = fit1.theta[1..].iter().zip(&fit0.theta[1..]).map(|(a, b)| a - b).collect();
    let sigma_hat = sample_covariance(&ds.covariates)?;
    plugin_variance_from_parts(sigma2_hat, p_hat, n_k, &dbeta, &sigma_hat)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FederationMode {
    Sw,
    Ivw,
}

/// Federates per-study outcome parameters for one arm. SW weights by arm
/// sample sizes; IVW weights by the local Gram matrices, which telescopes to
/// the pooled OLS solution whenever the aggregate Gram is invertible.
pub fn one_shot_theta(fits: &[&ArmFit], mode: FederationMode) -> Result<Vec<f64>> {
    if fits.is_empty() {
        return Err(Error::DimensionError("no studies".into()));
    }
    let p = fits[0].theta.len();
    match mode {
        FederationMode::Sw => {
            let n_w: usize = fits.iter().map(|f| f.n_arm).sum();
            let mut theta = vec![0.0; p];
            for f in fits {
                let w = f.n_arm as f64 / n_w as f64;
                for (t, v) in theta.iter_mut().zip(&f.theta) {
                    *t += w * v;
                }
            }
            Ok(theta)
        }
        FederationMode::Ivw => {
            let mut gram_sum = Matrix::zeros(p, p);
            let mut rhs = vec![0.0; p];
            for f in fits {
                gram_sum = gram_sum.add(&f.gram);
                let gt = f.gram.matvec(&f.theta);
                for (r, v) in rhs.iter_mut().zip(&gt) {
                    *r += v;
                }
            }
            solve_spd(&gram_sum, &rhs)
        }
    }
}

/// One-shot federated ATE. Unadjusted: federate full theta per arm, each
/// study evaluates its local ATE with the federated parameters, aggregate
/// with n_k/n. Adjusted: federate only the slopes (SW by arm sizes, IVW by
/// centered Gram matrices) and keep each study's own fitted intercepts.
pub fn one_shot_tau(
    fed: &FederatedDataset,
    mode: FederationMode,
    adjusted: bool,
    rank_tolerance: f64,
) -> Result<EstimateReport> {
    let fits: Vec<(ArmFit, ArmFit)> = fed
        .studies
        .iter()
        .map(|s| study_arm_fits(s, rank_tolerance))
        .collect::<Result<_>>()?;
    let n = fed.n() as f64;
    let estimator = match (mode, adjusted) {
        (FederationMode::Sw, false) => EstimatorId::OneShotSw,
        (FederationMode::Ivw, false) => EstimatorId::OneShotIvw,
        (FederationMode::Sw, true) => EstimatorId::OneShotSwAdj,
        (FederationMode::Ivw, true) => EstimatorId::OneShotIvwAdj,
    };

    if !adjusted {
        let theta1 = one_shot_theta(&fits.iter().map(|f| &f.0).collect::<Vec<_>>(), mode)?;
        let theta0 = one_shot_theta(&fits.iter().map(|f| &f.1).collect::<Vec<_>>(), mode)?;
        let tau = fed
            .studies
            .iter()
            .map(|s| s.n() as f64 / n * g_formula(&theta1, &theta0, &s.full_design()))
            .sum();
        return Ok(EstimateReport::bare(estimator, tau));
    }

    let beta1 = federate_slopes(fed, &fits, 1, mode)?;
    let beta0 = federate_slopes(fed, &fits, 0, mode)?;
    let dbeta: Vec<f64> = beta1.iter().zip(&beta0).map(|(a, b)| a - b).collect();
    let mut tau = 0.0;
    for (s, (f1, f0)) in fed.studies.iter().zip(&fits) {
        let da = f1.theta[0] - f0.theta[0]; // locally fitted intercepts stay local
        let xbar = s.covariates.col_means();
        tau += s.n() as f64 / n * (da + dot(&xbar, &dbeta));
    }
    Ok(EstimateReport::bare(estimator, tau))
}

/// Slope federation for the adjusted one-shot estimators. IVW weights use
/// the intercept-swept (centered) covariate Gram of each study's arm, which
/// is the exact inverse variance of the local slope estimate.
fn federate_slopes(
    fed: &FederatedDataset,
    fits: &[(ArmFit, ArmFit)],
    arm: u8,
    mode: FederationMode,
) -> Result<Vec<f64>> {
    let d = fed.dim;
    match mode {
        FederationMode::Sw => {
            let mut n_w = 0usize;
            let mut beta = vec![0.0; d];
            for (s, f) in fed.studies.iter().zip(fits) {
                let fit = if arm == 1 { &f.0 } else { &f.1 };
                n_w += fit.n_arm;
                for (b, t) in beta.iter_mut().zip(&fit.theta[1..]) {
                    *b += fit.n_arm as f64 * t;
                }
                let _ = s;
            }
            beta.iter_mut().for_each(|b| *b /= n_w as f64);
            Ok(beta)
        }
        FederationMode::Ivw => {
            let mut s_sum = Matrix::zeros(d, d);
            let mut rhs = vec![0.0; d];
            for (s, f) in fed.studies.iter().zip(fits) {
                let fit = if arm == 1 { &f.0 } else { &f.1 };
                let centered = centered_gram(s, arm);
                let sb = centered.matvec(&fit.theta[1..]);
                for (r, v) in rhs.iter_mut().zip(&sb) {
                    *r += v;
                }
                s_sum = s_sum.add(&centered);
            }
            solve_spd(&s_sum, &rhs)
        }
    }
}

/// X^T (I - 11^T/n) X over one study's rows in the given arm.
pub fn centered_gram(ds: &StudyDataset, arm: u8) -> Matrix {
    let d = ds.covariates.cols();
    let mut n_w = 0usize;
    let mut sums = vec![0.0; d];
    let mut g = Matrix::zeros(d, d);
    for i in 0..ds.n() {
        if ds.treatment[i] != arm {
            continue;
        }
        n_w += 1;
        let r = ds.covariates.row(i);
        for a in 0..d {
            sums[a] += r[a];
            for b in a..d {
                let v = g.get(a, b) + r[a] * r[b];
                g.set(a, b, v);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = g.get(a, b) - sums[a] * sums[b] / n_w as f64;
            g.set(a, b, v);
            g.set(b, a, v);
        }
    }
    g
}

/// Gradient-based federated ATE: FedAvg per arm (on dummy-augmented designs
/// when adjusted), per-study local ATEs with the learned parameters, and a
/// final size-weighted aggregation round. The returned ledger covers both
/// arms plus the closing ATE round.
pub fn gd_tau(
    fed: &FederatedDataset,
    cfg: &FedAvgConfig,
    adjusted: bool,
    _rank_tolerance: f64,
) -> Result<EstimateReport> {
    let work;
    let fed_ref = if adjusted {
        work = augment_dummies(fed)?;
        &work
    } else {
        fed
    };
    let mut ledger = CommLedger::default();
    let mut theta = Vec::new();
    let mut max_rounds = 0usize;
    for arm in [1u8, 0u8] {
        let mut views = Vec::new();
        let mut owners = Vec::new();
        for (k, s) in fed_ref.studies.iter().enumerate() {
            match split_by_arm(s, arm) {
                Ok(v) => {
                    views.push(v);
                    owners.push(k);
                }
                Err(Error::EmptyArm(_)) => {} // a study may sit out one arm
                Err(e) => return Err(e),
            }
        }
        if views.is_empty() {
            return Err(Error::EmptyArm(format!("pooled arm {arm}")));
        }
        let run = run_fedavg(&views, cfg)?;
        max_rounds = max_rounds.max(run.rounds_used);
        ledger.absorb(&run.ledger, &owners);
        theta.push(run.theta);
    }
    let n = fed_ref.n() as f64;
    let mut tau = 0.0;
    let final_round = max_rounds + 1;
    for (k, s) in fed_ref.studies.iter().enumerate() {
        tau += s.n() as f64 / n * g_formula(&theta[0], &theta[1], &s.full_design());
        ledger.record(final_round, Direction::Up, k, MessageKind::LocalAte, 2);
    }
    ledger.rounds = final_round;
    let mut report = EstimateReport::bare(if adjusted { EstimatorId::GdAdj } else { EstimatorId::Gd }, tau);
    ledger.finalize(fed_ref.k());
    report.comm = Some(ledger);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use crate::scenarios::{generate, preset, true_ate};

    fn gaussian_study(k: usize, n: usize, d: usize, rng: &mut RngStream) -> StudyDataset {
        let rows: Vec<Vec<f64>> =
            (0..n).map(|_| (0..d).map(|_| rng.standard_normal()).collect()).collect();
        let w: Vec<u8> = (0..n).map(|_| u8::from(rng.bernoulli(0.5))).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let beta = if w[i] == 1 { 1.5 } else { 0.5 };
                2.0 + beta * x.row(i).iter().sum::<f64>() + 0.1 * rng.standard_normal()
            })
            .collect();
        StudyDataset::new(k, x, w, y).unwrap()
    }

    #[test]
    fn noise_free_fit_recovers_parameters() {
        let mut rng = RngStream::new(1, 0);
        let d = 3;
        let rows: Vec<Vec<f64>> =
            (0..20).map(|_| (0..d).map(|_| rng.standard_normal()).collect()).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let theta_true = [0.5, -1.0, 2.0, 0.25];
        let w: Vec<u8> = (0..20).map(|i| (i % 2) as u8).collect();
        let y: Vec<f64> = (0..20)
            .map(|i| theta_true[0] + dot(x.row(i), &theta_true[1..]))
            .collect();
        let ds = StudyDataset::new(1, x, w, y).unwrap();
        let (f1, f0) = study_arm_fits(&ds, 1e-10).unwrap();
        for f in [&f1, &f0] {
            for (a, b) in f.theta.iter().zip(&theta_true) {
                assert!((a - b).abs() < 1e-10);
            }
            assert!(f.residual_variance < 1e-18);
        }
    }

    #[test]
    fn two_point_arm_exact_fit_guards_variance() {
        // arm rows (x=0,y=1),(x=1,y=3): theta = (1,2), df = 0 so variance 0
        let view = ArmView {
            design: Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap(),
            response: vec![1.0, 3.0],
        };
        let fit = fit_one_arm(&view, 1e-10).unwrap();
        assert!((fit.theta[0] - 1.0).abs() < 1e-12 && (fit.theta[1] - 2.0).abs() < 1e-12);
        assert_eq!(fit.residual_variance, 0.0);
    }

    #[test]
    fn undersized_arm_is_rank_deficient() {
        let mut rng = RngStream::new(2, 0);
        let d = 4;
        let rows: Vec<Vec<f64>> =
            (0..6).map(|_| (0..d).map(|_| rng.standard_normal()).collect()).collect();
        // 3 treated rows < d+1 = 5 columns
        let w = vec![1, 1, 1, 0, 0, 0];
        let ds = StudyDataset::new(1, Matrix::from_rows(&rows).unwrap(), w, vec![0.0; 6]).unwrap();
        assert!(matches!(study_arm_fits(&ds, 1e-10), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn g_formula_hand_cases() {
        let eval = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 4.0]]).unwrap();
        assert_eq!(g_formula(&[1.0, 1.0], &[1.0, 1.0], &eval), 0.0);
        // (1+2) and (1+4) against zero: mean(3,5) = 4
        assert!((g_formula(&[1.0, 1.0], &[0.0, 0.0], &eval) - 4.0).abs() < 1e-14);
    }

    #[test]
    fn intercept_only_g_formula_equals_dm() {
        let mut rng = RngStream::new(3, 0);
        let ds = gaussian_study(1, 40, 2, &mut rng);
        let fed = FederatedDataset::new(vec![ds.clone()]).unwrap();
        let dm_est = dm(&fed).unwrap().tau_hat;
        // intercept-only designs: theta = arm means
        let mean = |arm: u8| {
            let v = split_by_arm(&ds, arm).unwrap();
            v.response.iter().sum::<f64>() / v.n() as f64
        };
        let ones = Matrix::from_rows(&vec![vec![1.0]; ds.n()]).unwrap();
        let g = g_formula(&[mean(1)], &[mean(0)], &ones);
        assert!((g - dm_est).abs() <= 1e-12);
    }

    #[test]
    fn dm_hand_case() {
        let x = Matrix::from_rows(&[vec![0.0], vec![0.0], vec![0.0], vec![0.0]]).unwrap();
        let ds = StudyDataset::new(1, x, vec![1, 1, 0, 0], vec![3.0, 5.0, 1.0, 1.0]).unwrap();
        let fed = FederatedDataset::new(vec![ds]).unwrap();
        assert!((dm(&fed).unwrap().tau_hat - 3.0).abs() < 1e-14);
    }

    #[test]
    fn single_study_pool_equals_local() {
        let mut rng = RngStream::new(4, 0);
        let ds = gaussian_study(1, 60, 3, &mut rng);
        let fed = FederatedDataset::new(vec![ds.clone()]).unwrap();
        let lt = local_tau(&ds, 1, 1e-10).unwrap().tau_hat;
        let pt = pool_tau(&fed, false, 1e-10).unwrap().tau_hat;
        assert!((lt - pt).abs() < 1e-12);
    }

    #[test]
    fn meta_sw_weighted_mean() {
        let locals = vec![
            EstimateReport::bare(EstimatorId::Local(1), 1.0),
            EstimateReport::bare(EstimatorId::Local(2), 2.0),
        ];
        let got = meta_sw(&locals, &[10, 30]).unwrap().tau_hat;
        assert!((got - 1.75).abs() < 1e-14);
        let single = meta_sw(&locals[..1], &[10]).unwrap().tau_hat;
        assert_eq!(single, 1.0);
        let constant = vec![
            EstimateReport::bare(EstimatorId::Local(1), 0.7),
            EstimateReport::bare(EstimatorId::Local(2), 0.7),
            EstimateReport::bare(EstimatorId::Local(3), 0.7),
        ];
        assert!((meta_sw(&constant, &[5, 7, 11]).unwrap().tau_hat - 0.7).abs() < 1e-14);
    }

    #[test]
    fn meta_ivw_weighted_mean_and_zero_variance() {
        let locals = vec![
            EstimateReport::bare(EstimatorId::Local(1), 0.0),
            EstimateReport::bare(EstimatorId::Local(2), 5.0),
        ];
        // weights (1, 1/4) normalize to (0.8, 0.2): estimate 1.0
        assert!((meta_ivw(&locals, &[1.0, 4.0]).unwrap().tau_hat - 1.0).abs() < 1e-14);
        // equal variances reduce to the arithmetic mean
        assert!((meta_ivw(&locals, &[2.0, 2.0]).unwrap().tau_hat - 2.5).abs() < 1e-14);
        assert!(matches!(meta_ivw(&locals, &[1.0, 0.0]), Err(Error::ZeroVariance(_))));
    }

    #[test]
    fn meta_ivw_weights_minimize_quadratic_cost() {
        // Sum u_k^2 v_k over the simplex is minimized at u ~ 1/v; compare
        // against SW weights and random simplex draws.
        let mut rng = RngStream::new(8, 0);
        let k = 6;
        let v: Vec<f64> = (0..k).map(|_| 0.1 + rng.uniform() * 3.0).collect();
        let cost = |u: &[f64]| -> f64 { u.iter().zip(&v).map(|(ui, vi)| ui * ui * vi).sum() };
        let wsum: f64 = v.iter().map(|vi| 1.0 / vi).sum();
        let ivw: Vec<f64> = v.iter().map(|vi| (1.0 / vi) / wsum).collect();
        let sizes: Vec<f64> = (0..k).map(|_| 1.0 + rng.uniform() * 9.0).collect();
        let stot: f64 = sizes.iter().sum();
        let sw: Vec<f64> = sizes.iter().map(|s| s / stot).collect();
        assert!(cost(&ivw) <= cost(&sw) + 1e-12);
        for _ in 0..100 {
            let mut u: Vec<f64> = (0..k).map(|_| rng.uniform()).collect();
            let tot: f64 = u.iter().sum();
            u.iter_mut().for_each(|x| *x /= tot);
            assert!(cost(&ivw) <= cost(&u) + 1e-12);
        }
    }

    #[test]
    fn plugin_variance_hand_case() {
        // equal slopes, sigma2 = 1, p = 0.5, n = 100: V = 1/(100*0.25) = 0.04
        let v = plugin_variance_from_parts(1.0, 0.5, 100, &[0.0, 0.0], &Matrix::identity(2)).unwrap();
        assert!((v - 0.04).abs() < 1e-15);
        // zero residual variance and equal slopes: 0
        let z = plugin_variance_from_parts(0.0, 0.5, 100, &[0.0], &Matrix::identity(1)).unwrap();
        assert_eq!(z, 0.0);
        assert!(matches!(
            plugin_variance_from_parts(1.0, 1.0, 100, &[0.0], &Matrix::identity(1)),
            Err(Error::DegenerateArm(_))
        ));
    }

    #[test]
    fn one_shot_theta_sw_hand_case() {
        let mk = |theta: Vec<f64>, n_arm: usize| ArmFit {
            theta,
            gram: Matrix::identity(2),
            n_arm,
            residual_variance: 0.0,
        };
        let a = mk(vec![1.0, 1.0], 25);
        let b = mk(vec![3.0, 3.0], 75);
        let theta = one_shot_theta(&[&a, &b], FederationMode::Sw).unwrap();
        assert!((theta[0] - 2.5).abs() < 1e-14 && (theta[1] - 2.5).abs() < 1e-14);
        // single study: both modes return its theta
        for mode in [FederationMode::Sw, FederationMode::Ivw] {
            let t = one_shot_theta(&[&a], mode).unwrap();
            assert!((t[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_shot_ivw_matches_pooled_ols() {
        let mut rng = RngStream::new(5, 0);
        for rep in 0..20 {
            let k = 2 + (rep % 3);
            let fed = FederatedDataset::new(
                (1..=k).map(|i| gaussian_study(i, 40, 3, &mut rng)).collect(),
            )
            .unwrap();
            let os = one_shot_tau(&fed, FederationMode::Ivw, false, 1e-10).unwrap().tau_hat;
            let pool = pool_tau(&fed, false, 1e-10).unwrap().tau_hat;
            assert!(
                (os - pool).abs() <= 1e-8 * (1.0 + pool.abs()),
                "rep {rep}: {os} vs {pool}"
            );
        }
    }

    #[test]
    fn single_study_adjusted_one_shot_not_defined_but_unadjusted_matches_local() {
        let mut rng = RngStream::new(6, 0);
        let ds = gaussian_study(1, 60, 3, &mut rng);
        let fed = FederatedDataset::new(vec![ds.clone()]).unwrap();
        let lt = local_tau(&ds, 1, 1e-10).unwrap().tau_hat;
        for mode in [FederationMode::Sw, FederationMode::Ivw] {
            let os = one_shot_tau(&fed, mode, false, 1e-10).unwrap().tau_hat;
            assert!((os - lt).abs() < 1e-10);
            // adjusted with K=1: slopes federate to the local slopes and the
            // local intercepts stay, so the estimate equals the local one
            let adj = one_shot_tau(&fed, mode, true, 1e-10).unwrap().tau_hat;
            assert!((adj - lt).abs() < 1e-10);
        }
    }

    #[test]
    fn null_effect_scenario_gives_exact_zero() {
        // sigma2 = 0 and arm1 == arm0: every estimator returns exactly 0
        let mut cfg = preset("homog-small").unwrap();
        cfg.sigma2 = 0.0;
        cfg.arm1 = cfg.arm0.clone();
        for s in cfg.studies.iter_mut() {
            s.h = 0.0;
        }
        assert_eq!(true_ate(&cfg).unwrap().tau, 0.0);
        let fed = generate(&cfg, &mut RngStream::new(77, 0)).unwrap();
        let tol = 1e-9;
        // every model-based estimator interpolates Y = c + X beta exactly;
        // DM keeps finite-sample noise (X-bar difference across arms) and is
        // only asymptotically zero
        assert!(pool_tau(&fed, false, 1e-10).unwrap().tau_hat.abs() < tol);
        assert!(pool_tau(&fed, true, 1e-10).unwrap().tau_hat.abs() < tol);
        let locals: Vec<EstimateReport> = fed
            .studies
            .iter()
            .enumerate()
            .map(|(k, s)| local_tau(s, k + 1, 1e-10).unwrap())
            .collect();
        assert!(meta_sw(&locals, &fed.sizes()).unwrap().tau_hat.abs() < tol);
        for mode in [FederationMode::Sw, FederationMode::Ivw] {
            assert!(one_shot_tau(&fed, mode, false, 1e-10).unwrap().tau_hat.abs() < tol);
            assert!(one_shot_tau(&fed, mode, true, 1e-10).unwrap().tau_hat.abs() < tol);
        }
    }

    #[test]
    fn aggregation_weights_sum_to_one() {
        // SW weights over arbitrary sizes and IVW weights over arbitrary
        // variances both normalize
        let sizes = [13usize, 7, 41];
        let n: usize = sizes.iter().sum();
        let sw: f64 = sizes.iter().map(|&s| s as f64 / n as f64).sum();
        assert!((sw - 1.0).abs() < 1e-12);
        let vars = [0.3, 1.7, 0.9];
        let wsum: f64 = vars.iter().map(|v| 1.0 / v).sum();
        let ivw: f64 = vars.iter().map(|v| (1.0 / v) / wsum).sum();
        assert!((ivw - 1.0).abs() < 1e-12);
    }

    #[test]
    fn per_study_outcome_shift_leaves_shift_robust_estimators_unchanged() {
        let mut rng = RngStream::new(9, 0);
        let fed = FederatedDataset::new(
            (1..=3).map(|i| gaussian_study(i, 50, 2, &mut rng)).collect(),
        )
        .unwrap();
        let shifts = [2.5, -4.0, 17.0];
        let shifted = FederatedDataset::new(
            fed.studies
                .iter()
                .zip(&shifts)
                .map(|(s, &h)| {
                    StudyDataset::new(
                        s.study_id,
                        s.covariates.clone(),
                        s.treatment.clone(),
                        s.outcome.iter().map(|y| y + h).collect(),
                    )
                    .unwrap()
                })
                .collect(),
        )
        .unwrap();
        let locals = |f: &FederatedDataset| -> Vec<EstimateReport> {
            f.studies.iter().enumerate().map(|(k, s)| local_tau(s, k + 1, 1e-10).unwrap()).collect()
        };
        let la = locals(&fed);
        let lb = locals(&shifted);
        for (a, b) in la.iter().zip(&lb) {
            assert!((a.tau_hat - b.tau_hat).abs() < 1e-10);
        }
        let msa = meta_sw(&la, &fed.sizes()).unwrap().tau_hat;
        let msb = meta_sw(&lb, &shifted.sizes()).unwrap().tau_hat;
        assert!((msa - msb).abs() < 1e-10);
        for mode in [FederationMode::Sw, FederationMode::Ivw] {
            let a = one_shot_tau(&fed, mode, true, 1e-10).unwrap().tau_hat;
            let b = one_shot_tau(&shifted, mode, true, 1e-10).unwrap().tau_hat;
            assert!((a - b).abs() < 1e-10);
        }
        let pa = pool_tau(&fed, true, 1e-10).unwrap().tau_hat;
        let pb = pool_tau(&shifted, true, 1e-10).unwrap().tau_hat;
        assert!((pa - pb).abs() < 1e-10);
    }
}
