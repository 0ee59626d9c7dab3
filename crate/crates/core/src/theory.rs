//! Closed-form asymptotic variances, bias verdicts per scenario, and the
//! practitioner decision advisor.
//!
//! Variances are returned as n * V_inf with rho_k = n_k / n, p = sum rho_k p_k
//! and Sigma_bar = sum rho_k Sigma_k. Requesting a formula outside its
//! validity region (e.g. Meta-IVW under covariate shift) is a loud
//! `FormulaInvalid`, never a silent number.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimators::EstimatorId;
use crate::numerics::{dot, Matrix};
use crate::scenarios::ScenarioConfig;

/// Evaluated closed form for one estimator on one scenario.
#[derive(Debug, Clone, Serialize)]
pub struct TheoreticalVariance {
    pub estimator: String,
    /// n * V_inf.
    pub n_times_variance: f64,
    /// Scenario properties the formula relies on.
    pub assumptions: Vec<&'static str>,
}

/// Scenario structure flags driving formula validity, bias verdicts and the
/// decision diagram.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ScenarioFlags {
    pub local_full_rank: bool,
    pub federated_full_rank: bool,
    pub same_covariate_distribution: bool,
    pub study_effects: bool,
    pub same_treatment_probabilities: bool,
}

impl ScenarioFlags {
    pub fn validate(&self) -> Result<()> {
        if self.local_full_rank && !self.federated_full_rank {
            return Err(Error::ValueError {
                line: 0,
                message: "local full rank implies federated full rank".into(),
            });
        }
        Ok(())
    }
}

fn approx_eq(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
}

/// Distributional flags read off a scenario's generative truth. Rank flags
/// use the expected arm sizes against d + 1 parameters.
pub fn flags_from_config(cfg: &ScenarioConfig) -> Result<ScenarioFlags> {
    cfg.validate()?;
    let d = cfg.d;
    let first = &cfg.studies[0];
    let first_cov = first.sigma.materialize(d)?;
    let mut same_x = true;
    for s in &cfg.studies[1..] {
        if !s.mu.iter().zip(&first.mu).all(|(a, b)| approx_eq(*a, *b)) {
            same_x = false;
            break;
        }
        let cov = s.sigma.materialize(d)?;
        if !cov.data().iter().zip(first_cov.data()).all(|(a, b)| approx_eq(*a, *b)) {
            same_x = false;
            break;
        }
    }
    let study_effects = cfg.studies.iter().any(|s| !approx_eq(s.h, first.h));
    let same_p = cfg.studies.iter().all(|s| approx_eq(s.p, first.p));
    let need = (d + 1) as f64;
    let local = cfg
        .studies
        .iter()
        .all(|s| s.n as f64 * s.p >= need && s.n as f64 * (1.0 - s.p) >= need);
    let n1: f64 = cfg.studies.iter().map(|s| s.n as f64 * s.p).sum();
    let n0: f64 = cfg.studies.iter().map(|s| s.n as f64 * (1.0 - s.p)).sum();
    let federated = n1 >= need && n0 >= need;
    Ok(ScenarioFlags {
        local_full_rank: local,
        federated_full_rank: federated || local,
        same_covariate_distribution: same_x,
        study_effects,
        same_treatment_probabilities: same_p,
    })
}

struct Moments {
    rho: Vec<f64>,
    p: Vec<f64>,
    p_pooled: f64,
    /// |beta1 - beta0|^2 under each study's Sigma_k.
    quad_by_study: Vec<f64>,
    /// |beta1 - beta0|^2 under Sigma_bar.
    quad_pooled: f64,
}

fn moments(cfg: &ScenarioConfig) -> Result<Moments> {
    let n = cfg.total_n() as f64;
    let dbeta: Vec<f64> = cfg.arm1.beta.iter().zip(&cfg.arm0.beta).map(|(a, b)| a - b).collect();
    let mut rho = Vec::new();
    let mut p = Vec::new();
    let mut quad_by_study = Vec::new();
    let mut p_pooled = 0.0;
    let mut sigma_bar = Matrix::zeros(cfg.d, cfg.d);
    for s in &cfg.studies {
        let rk = s.n as f64 / n;
        let cov = s.sigma.materialize(cfg.d)?;
        quad_by_study.push(dot(&cov.matvec(&dbeta), &dbeta));
        sigma_bar = sigma_bar.add(&cov.scale(rk));
        p_pooled += rk * s.p;
        rho.push(rk);
        p.push(s.p);
    }
    let quad_pooled = dot(&sigma_bar.matvec(&dbeta), &dbeta);
    Ok(Moments { rho, p, p_pooled, quad_by_study, quad_pooled })
}

/// Evaluates n * V_inf for the requested estimator under the scenario, or
/// fails with `FormulaInvalid` when the formula does not apply to the scenario.
pub fn asymptotic_variance(estimator: EstimatorId, cfg: &ScenarioConfig) -> Result<TheoreticalVariance> {
    let flags = flags_from_config(cfg)?;
    let m = moments(cfg)?;
    let s2 = cfg.sigma2;
    let fail = |why: &str| -> Result<TheoreticalVariance> {
        Err(Error::FormulaInvalid(format!("{}: {why}", estimator.name())))
    };
    let mk = |v: f64, assumptions: Vec<&'static str>| TheoreticalVariance {
        estimator: estimator.name(),
        n_times_variance: v,
        assumptions,
    };
    match estimator {
        EstimatorId::Local(idx) => {
            let k = idx
                .checked_sub(1)
                .filter(|&i| i < cfg.k)
                .ok_or_else(|| Error::ValueError { line: 0, message: format!("local:{idx} out of range") })?;
            let v = (s2 / (m.p[k] * (1.0 - m.p[k])) + m.quad_by_study[k]) / m.rho[k];
            Ok(mk(v, vec!["local full rank in the study"]))
        }
        EstimatorId::Pool | EstimatorId::Gd | EstimatorId::OneShotIvw | EstimatorId::OneShotSw => {
            if flags.study_effects {
                return fail("biased/invalid without study-effect adjustment");
            }
            if estimator == EstimatorId::OneShotSw && !flags.same_covariate_distribution {
                return fail("1S-SW variance is inflated under covariate shift; no closed form in scope");
            }
            let v = s2 / (m.p_pooled * (1.0 - m.p_pooled)) + m.quad_pooled;
            Ok(mk(v, vec!["no study effects"]))
        }
        EstimatorId::PoolAdj | EstimatorId::GdAdj => {
            let v = s2 / (m.p_pooled * (1.0 - m.p_pooled)) + m.quad_pooled;
            Ok(mk(v, vec!["study effects absorbed by membership adjustment"]))
        }
        EstimatorId::MetaSw => {
            let noise: f64 =
                m.rho.iter().zip(&m.p).map(|(r, p)| r / (p * (1.0 - p))).sum::<f64>() * s2;
            Ok(mk(noise + m.quad_pooled, vec!["local full rank", "Sigma_bar = sum rho_k Sigma_k"]))
        }
        EstimatorId::MetaIvw => {
            if !flags.same_covariate_distribution {
                return fail("IVW weights misestimate the study proportions under covariate shift");
            }
            let inv: f64 = m
                .rho
                .iter()
                .zip(m.p.iter().zip(&m.quad_by_study))
                .map(|(r, (p, q))| r / (s2 / (p * (1.0 - p)) + q))
                .sum();
            Ok(mk(1.0 / inv, vec!["local full rank", "same covariate distribution"]))
        }
        EstimatorId::Dm | EstimatorId::OneShotSwAdj | EstimatorId::OneShotIvwAdj => {
            fail("no closed-form asymptotic variance in scope")
        }
    }
}

/// Bias verdict for an estimator under a scenario.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum BiasVerdict {
    Unbiased,
    Biased { reason: String },
}

impl BiasVerdict {
    pub fn is_biased(&self) -> bool {
        matches!(self, BiasVerdict::Biased { .. })
    }
}

/// Bias verdicts per scenario structure: unadjusted pooled-parameter estimators
/// are biased exactly when study effects meet unequal treatment
/// probabilities; Meta-IVW is biased under covariate shift; DM needs an
/// active treatment-probability edge plus any study-to-outcome path.
pub fn predict_bias(estimator: EstimatorId, cfg: &ScenarioConfig) -> Result<BiasVerdict> {
    let flags = flags_from_config(cfg)?;
    let biased = |reason: &str| BiasVerdict::Biased { reason: reason.into() };
    Ok(match estimator {
        EstimatorId::Pool | EstimatorId::Gd | EstimatorId::OneShotSw | EstimatorId::OneShotIvw => {
            if flags.study_effects && !flags.same_treatment_probabilities {
                biased("study effects confound treatment when the p_k differ")
            } else {
                BiasVerdict::Unbiased
            }
        }
        EstimatorId::MetaIvw => {
            if !flags.same_covariate_distribution {
                biased("inverse-variance weights misestimate study proportions under covariate shift")
            } else {
                BiasVerdict::Unbiased
            }
        }
        EstimatorId::Dm => {
            if !flags.same_treatment_probabilities
                && (flags.study_effects || !flags.same_covariate_distribution)
            {
                biased("study membership links treatment and outcomes without adjustment")
            } else {
                BiasVerdict::Unbiased
            }
        }
        EstimatorId::Local(_)
        | EstimatorId::MetaSw
        | EstimatorId::PoolAdj
        | EstimatorId::GdAdj
        | EstimatorId::OneShotSwAdj
        | EstimatorId::OneShotIvwAdj => BiasVerdict::Unbiased,
    })
}

/// Advisor output: recommended estimators in preference order (or the
/// gather-more-data action) and whether the diagram marks DM as biased.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Recommendation {
    pub recommendation: Vec<String>,
    pub dm_biased: bool,
}

/// Walks the practitioner decision diagram. The `dm_biased` flag
/// transcribes the diagram's star markers literally.
pub fn recommend(flags: &ScenarioFlags) -> Result<Recommendation> {
    flags.validate()?;
    let ids = |v: Vec<EstimatorId>| v.into_iter().map(|e| e.name()).collect::<Vec<_>>();
    let rec = if !flags.local_full_rank {
        if !flags.federated_full_rank {
            Recommendation { recommendation: vec!["gather-more-data".into()], dm_biased: false }
        } else if flags.study_effects {
            Recommendation { recommendation: ids(vec![EstimatorId::GdAdj]), dm_biased: true }
        } else {
            Recommendation { recommendation: ids(vec![EstimatorId::Gd]), dm_biased: false }
        }
    } else if flags.same_covariate_distribution {
        if flags.study_effects {
            Recommendation {
                recommendation: ids(vec![EstimatorId::GdAdj, EstimatorId::MetaIvw]),
                dm_biased: true,
            }
        } else if flags.same_treatment_probabilities {
            Recommendation {
                recommendation: ids(vec![EstimatorId::OneShotIvw, EstimatorId::MetaIvw]),
                dm_biased: false,
            }
        } else {
            Recommendation { recommendation: ids(vec![EstimatorId::OneShotIvw]), dm_biased: false }
        }
    } else if flags.study_effects {
        Recommendation {
            recommendation: ids(vec![EstimatorId::GdAdj, EstimatorId::MetaSw]),
            dm_biased: true,
        }
    } else {
        Recommendation { recommendation: ids(vec![EstimatorId::OneShotIvw]), dm_biased: true }
    };
    Ok(rec)
}
