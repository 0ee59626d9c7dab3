//! Generative truth models and data synthesis: the simulation regimes,
//! semi-synthetic outcome regeneration and stratified bootstrap resampling.

use serde::{Deserialize, Serialize};

use crate::data::{FederatedDataset, StudyDataset};
use crate::error::{Error, Result};
use crate::numerics::{sample_mvn, Matrix, RngStream};

/// Linear outcome-model parameters for one arm: intercept c and slope beta.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmParams {
    pub c: f64,
    pub beta: Vec<f64>,
}

/// Covariance specification for one study's covariates.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum CovarianceSpec {
    /// a·I + b·J where J is the all-ones matrix.
    #[serde(rename = "a*I+b*J")]
    ScaledIdentityPlusOnes { a: f64, b: f64 },
    #[serde(rename = "dense")]
    Dense { entries: Vec<Vec<f64>> },
}

impl CovarianceSpec {
    pub fn materialize(&self, d: usize) -> Result<Matrix> {
        match self {
            CovarianceSpec::ScaledIdentityPlusOnes { a, b } => {
                let mut m = Matrix::zeros(d, d);
                for i in 0..d {
                    for j in 0..d {
                        m.set(i, j, if i == j { a + b } else { *b });
                    }
                }
                Ok(m)
            }
            CovarianceSpec::Dense { entries } => {
                let m = Matrix::from_rows(entries)?;
                if m.rows() != d || m.cols() != d {
                    return Err(Error::DimensionError(format!(
                        "dense covariance is {}x{}, expected {d}x{d}",
                        m.rows(),
                        m.cols()
                    )));
                }
                Ok(m)
            }
        }
    }
}

/// Per-study generative parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudySpec {
    pub n: usize,
    pub p: f64,
    pub mu: Vec<f64>,
    pub sigma: CovarianceSpec,
    #[serde(default)]
    pub h: f64,
}

/// Full generative truth for a simulation scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub d: usize,
    pub sigma2: f64,
    pub arm1: ArmParams,
    pub arm0: ArmParams,
    pub studies: Vec<StudySpec>,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.studies.len() != self.k {
            return Err(Error::DimensionError(format!(
                "K={} but {} study specs",
                self.k,
                self.studies.len()
            )));
        }
        if self.arm1.beta.len() != self.d || self.arm0.beta.len() != self.d {
            return Err(Error::DimensionError("beta length != d".into()));
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return Err(Error::ValueError { line: 0, message: "sigma2 must be finite and >= 0".into() });
        }
        for (k, s) in self.studies.iter().enumerate() {
            if !(s.p > 0.0 && s.p < 1.0) {
                return Err(Error::ValueError {
                    line: 0,
                    message: format!("study {}: p={} violates positivity", k + 1, s.p),
                });
            }
            if s.n == 0 {
                return Err(Error::ValueError { line: 0, message: format!("study {} has n=0", k + 1) });
            }
            if s.mu.len() != self.d {
                return Err(Error::DimensionError(format!("study {}: mu length != d", k + 1)));
            }
        }
        Ok(())
    }

    pub fn total_n(&self) -> usize {
        self.studies.iter().map(|s| s.n).sum()
    }
}

/// True effect of a scenario: global tau, per-study taus, study weights and
/// the pooled treatment probability.
#[derive(Debug, Clone, Serialize)]
pub struct TruthSummary {
    pub tau: f64,
    pub tau_by_study: Vec<f64>,
    pub rho: Vec<f64>,
    pub p_pooled: f64,
}

/// Evaluates the scenario's true ATE with rho_k = n_k / n. The per-study
/// shifts h_k cancel in the treated/control difference and never enter.
pub fn true_ate(cfg: &ScenarioConfig) -> Result<TruthSummary> {
    cfg.validate()?;
    let n = cfg.total_n() as f64;
    let dc = cfg.arm1.c - cfg.arm0.c;
    let dbeta: Vec<f64> = cfg.arm1.beta.iter().zip(&cfg.arm0.beta).map(|(a, b)| a - b).collect();
    let mut tau_by_study = Vec::with_capacity(cfg.k);
    let mut rho = Vec::with_capacity(cfg.k);
    let mut tau = 0.0;
    let mut p_pooled = 0.0;
    for s in &cfg.studies {
        let rk = s.n as f64 / n;
        let tk = dc + crate::numerics::dot(&s.mu, &dbeta);
        tau += rk * tk;
        p_pooled += rk * s.p;
        tau_by_study.push(tk);
        rho.push(rk);
    }
    Ok(TruthSummary { tau, tau_by_study, rho, p_pooled })
}

/// Draws a federated dataset from the scenario. Per study the draw order is
/// fixed: the covariate block, then treatments, then noise.
pub fn generate(cfg: &ScenarioConfig, rng: &mut RngStream) -> Result<FederatedDataset> {
    cfg.validate()?;
    let sd = cfg.sigma2.sqrt();
    let mut studies = Vec::with_capacity(cfg.k);
    for (k, spec) in cfg.studies.iter().enumerate() {
        let cov = spec.sigma.materialize(cfg.d)?;
        let x = sample_mvn(&spec.mu, &cov, spec.n, rng)?;
        let w: Vec<u8> = (0..spec.n).map(|_| u8::from(rng.bernoulli(spec.p))).collect();
        let mut y = Vec::with_capacity(spec.n);
        for i in 0..spec.n {
            let arm = if w[i] == 1 { &cfg.arm1 } else { &cfg.arm0 };
            let eps = sd * rng.standard_normal();
            y.push(arm.c + spec.h + crate::numerics::dot(x.row(i), &arm.beta) + eps);
        }
        studies.push(StudyDataset::new(k + 1, x, w, y)?);
    }
    FederatedDataset::new(studies)
}

/// Outcome surface used when regenerating outcomes over fixed covariates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub intercept: f64,
    /// One coefficient per covariate.
    pub coefficients: Vec<f64>,
    /// Coefficients of the interaction features (-x2*x3, x1*x4); only read
    /// in polynomial mode.
    #[serde(default)]
    pub interaction: [f64; 2],
}

impl OutcomeModel {
    /// mu_w(x) in linear mode.
    pub fn linear(&self, x: &[f64]) -> f64 {
        self.intercept + crate::numerics::dot(x, &self.coefficients)
    }

    /// mu_w(x) in polynomial mode: x1, x2^2, x3^3, remaining covariates
    /// linear, plus the two interaction features.
    pub fn polynomial(&self, x: &[f64]) -> f64 {
        let mut v = self.intercept;
        v += self.coefficients[0] * x[0];
        v += self.coefficients[1] * x[1] * x[1];
        v += self.coefficients[2] * x[2] * x[2] * x[2];
        for j in 3..x.len() {
            v += self.coefficients[j] * x[j];
        }
        v += self.interaction[0] * (-x[1] * x[2]);
        v += self.interaction[1] * (x[0] * x[3]);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegenMode {
    Linear,
    Polynomial,
}

/// Parameters for semi-synthetic outcome regeneration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegenParams {
    pub mode: RegenMode,
    pub arm1: OutcomeModel,
    pub arm0: OutcomeModel,
    pub p_by_study: Vec<f64>,
    pub noise_sd: f64,
}

/// Redraws treatment (Bernoulli per study) and rebuilds outcomes over the
/// dataset's covariates, which are carried over bit-identically.
pub fn regenerate_outcomes(
    fed: &FederatedDataset,
    params: &RegenParams,
    rng: &mut RngStream,
) -> Result<FederatedDataset> {
    if params.p_by_study.len() != fed.k() {
        return Err(Error::DimensionError("p_by_study length != K".into()));
    }
    if params.mode == RegenMode::Polynomial && fed.dim < 4 {
        return Err(Error::DimensionError(
            "polynomial mode needs d >= 4 for the interaction features".into(),
        ));
    }
    if params.arm1.coefficients.len() != fed.dim || params.arm0.coefficients.len() != fed.dim {
        return Err(Error::DimensionError("outcome model coefficient length != d".into()));
    }
    let mut studies = Vec::with_capacity(fed.k());
    for (k, s) in fed.studies.iter().enumerate() {
        let p = params.p_by_study[k];
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::ValueError { line: 0, message: format!("p[{k}]={p} violates positivity") });
        }
        let n = s.n();
        let w: Vec<u8> = (0..n).map(|_| u8::from(rng.bernoulli(p))).collect();
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let model = if w[i] == 1 { &params.arm1 } else { &params.arm0 };
            let mean = match params.mode {
                RegenMode::Linear => model.linear(s.covariates.row(i)),
                RegenMode::Polynomial => model.polynomial(s.covariates.row(i)),
            };
            y.push(mean + params.noise_sd * rng.standard_normal());
        }
        studies.push(StudyDataset::new(s.study_id, s.covariates.clone(), w, y)?);
    }
    FederatedDataset::new(studies)
}

/// True ATE of a regeneration over the dataset's fixed covariates: the mean
/// of mu_1(x) - mu_0(x) over all rows (noise and treatment average out).
pub fn regen_true_ate(fed: &FederatedDataset, params: &RegenParams) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for s in &fed.studies {
        for i in 0..s.n() {
            let x = s.covariates.row(i);
            total += match params.mode {
                RegenMode::Linear => params.arm1.linear(x) - params.arm0.linear(x),
                RegenMode::Polynomial => params.arm1.polynomial(x) - params.arm0.polynomial(x),
            };
            n += 1;
        }
    }
    total / n as f64
}

/// Resamples rows with replacement within each study, preserving every n_k.
pub fn bootstrap_resample(fed: &FederatedDataset, rng: &mut RngStream) -> FederatedDataset {
    let studies = fed
        .studies
        .iter()
        .map(|s| {
            let n = s.n();
            let mut rows = Vec::with_capacity(n);
            let mut w = Vec::with_capacity(n);
            let mut y = Vec::with_capacity(n);
            for _ in 0..n {
                let i = rng.below(n);
                rows.push(s.covariates.row(i).to_vec());
                w.push(s.treatment[i]);
                y.push(s.outcome[i]);
            }
            StudyDataset::new(s.study_id, Matrix::from_rows(&rows).expect("same width"), w, y)
                .expect("resample preserves validity")
        })
        .collect();
    FederatedDataset::new(studies).expect("resample preserves structure")
}

// ---------------------------------------------------------------------------
// Named presets
// ---------------------------------------------------------------------------

pub const PRESET_NAMES: &[&str] = &[
    "homog-large",
    "homog-small",
    "homog-small-6d",
    "small-diff-p",
    "large-diff-p",
    "large-diff-pq",
    "imbalanced",
    "covariate-shift",
    "study-effects",
    "study-effects-small",
    "full-hetero",
];

/// Parses a named preset shipped with the crate.
pub fn preset(name: &str) -> Result<ScenarioConfig> {
    let text = match name {
        "homog-large" => include_str!("../presets/homog-large.json"),
        "homog-small" => include_str!("../presets/homog-small.json"),
        "homog-small-6d" => include_str!("../presets/homog-small-6d.json"),
        "small-diff-p" => include_str!("../presets/small-diff-p.json"),
        "large-diff-p" => include_str!("../presets/large-diff-p.json"),
        "large-diff-pq" => include_str!("../presets/large-diff-pq.json"),
        "imbalanced" => include_str!("../presets/imbalanced.json"),
        "covariate-shift" => include_str!("../presets/covariate-shift.json"),
        "study-effects" => include_str!("../presets/study-effects.json"),
        "study-effects-small" => include_str!("../presets/study-effects-small.json"),
        "full-hetero" => include_str!("../presets/full-hetero.json"),
        _ => {
            return Err(Error::ValueError {
                line: 0,
                message: format!("unknown preset `{name}`; known: {}", PRESET_NAMES.join(", ")),
            })
        }
    };
    let cfg: ScenarioConfig = serde_json::from_str(text)
        .map_err(|e| Error::SchemaError(format!("preset `{name}`: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Nonlinear (quadratic) scenario for the DM vs G-formula comparison
// ---------------------------------------------------------------------------

/// Scenario with quadratic potential-outcome surfaces over d = 4 covariates:
///   y1 = 0 x1^2 - 0.5 x2^2 + 0.5 x3^2 + 1.5 x4^2 + x3 x4
///   y0 = -0.35 x1^2 + 0 x2^2 + 0.5 x3^2 + 1.5 x4^2 + x1 x2
/// The fitted models stay linear, so this exercises covariate adjustment
/// under misspecification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadraticScenario {
    #[serde(rename = "K")]
    pub k: usize,
    pub n_per_study: usize,
    pub p: f64,
    pub mu: Vec<f64>,
    pub sigma: CovarianceSpec,
    pub sigma2: f64,
}

impl Default for QuadraticScenario {
    fn default() -> Self {
        QuadraticScenario {
            k: 5,
            n_per_study: 80,
            p: 0.5,
            mu: vec![1.0, 1.0, -1.0, -1.0],
            sigma: CovarianceSpec::ScaledIdentityPlusOnes { a: 0.5, b: 0.5 },
            sigma2: 1.0,
        }
    }
}

const QUAD_DIAG_1: [f64; 4] = [0.0, -0.5, 0.5, 1.5];
const QUAD_DIAG_0: [f64; 4] = [-0.35, 0.0, 0.5, 1.5];

fn quad_surface(x: &[f64], arm: u8) -> f64 {
    let diag = if arm == 1 { &QUAD_DIAG_1 } else { &QUAD_DIAG_0 };
    let mut v = 0.0;
    for j in 0..4 {
        v += diag[j] * x[j] * x[j];
    }
    if arm == 1 {
        v += x[2] * x[3];
    } else {
        v += x[0] * x[1];
    }
    v
}

pub fn generate_quadratic(cfg: &QuadraticScenario, rng: &mut RngStream) -> Result<FederatedDataset> {
    if cfg.mu.len() != 4 {
        return Err(Error::DimensionError("quadratic scenario is fixed at d = 4".into()));
    }
    let cov = cfg.sigma.materialize(4)?;
    let sd = cfg.sigma2.sqrt();
    let mut studies = Vec::with_capacity(cfg.k);
    for k in 0..cfg.k {
        let x = sample_mvn(&cfg.mu, &cov, cfg.n_per_study, rng)?;
        let w: Vec<u8> = (0..cfg.n_per_study).map(|_| u8::from(rng.bernoulli(cfg.p))).collect();
        let y: Vec<f64> = (0..cfg.n_per_study)
            .map(|i| quad_surface(x.row(i), w[i]) + sd * rng.standard_normal())
            .collect();
        studies.push(StudyDataset::new(k + 1, x, w, y)?);
    }
    FederatedDataset::new(studies)
}

/// Exact ATE of the quadratic scenario from Gaussian second moments:
/// tau = sum_ij (Q1 - Q0)_ij E[x_i x_j] with E[x_i x_j] = mu_i mu_j + Sigma_ij.
pub fn quadratic_true_ate(cfg: &QuadraticScenario) -> Result<f64> {
    let cov = cfg.sigma.materialize(4)?;
    let m2 = |i: usize, j: usize| cfg.mu[i] * cfg.mu[j] + cov.get(i, j);
    let mut tau = 0.0;
    for j in 0..4 {
        tau += (QUAD_DIAG_1[j] - QUAD_DIAG_0[j]) * m2(j, j);
    }
    tau += m2(2, 3); // + x3 x4 in arm 1
    tau -= m2(0, 1); // - x1 x2 from arm 0
    Ok(tau)
}

// ---------------------------------------------------------------------------
// Semi-synthetic stand-in: 13 sites, d = 15, heterogeneous sizes and shifts
// ---------------------------------------------------------------------------

/// Fixed covariate base plus regeneration recipes standing in for a private
/// multi-site registry: 13 sites of very different sizes, treatment
/// probabilities in [0.2, 0.8], covariate shift across sites.
#[derive(Debug, Clone)]
pub struct SemiSyntheticStandIn {
    /// Covariates are the permanent part; treatment/outcome placeholders are
    /// overwritten by every regeneration.
    pub base: FederatedDataset,
    pub linear: RegenParams,
    pub polynomial: RegenParams,
}

pub const STAND_IN_SIZES: [usize; 13] =
    [2400, 1100, 230, 230, 230, 230, 230, 230, 230, 230, 230, 230, 230];
pub const STAND_IN_P: [f64; 13] =
    [0.5, 0.5, 0.2, 0.8, 0.2, 0.8, 0.2, 0.8, 0.2, 0.8, 0.2, 0.8, 0.2];
const STAND_IN_D: usize = 15;

/// Builds the stand-in deterministically from a seed. Site means share the
/// first four coordinates (the ones the polynomial surfaces bend) and
/// disperse over the rest with per-site offsets centered to sum zero, so the
/// per-site true effects coincide while the covariate distributions differ.
pub fn semi_synthetic_stand_in(seed: u64) -> Result<SemiSyntheticStandIn> {
    let d = STAND_IN_D;
    let mut rng = RngStream::new(seed, 0);
    let base4 = [0.2, -0.15, 0.25, 0.1];
    let mut studies = Vec::with_capacity(13);
    for (k, &n) in STAND_IN_SIZES.iter().enumerate() {
        let mut mu: Vec<f64> = (0..d).map(|_| 0.8 * rng.uniform_in(-1.0, 1.0)).collect();
        mu[..4].copy_from_slice(&base4);
        let shift_mean = mu[4..].iter().sum::<f64>() / (d - 4) as f64;
        for m in mu[4..].iter_mut() {
            *m -= shift_mean;
        }
        // block covariance: tight common block over x1..x4, heterogeneous
        // equicorrelated-plus-noise block over the remaining coordinates
        let mut cov = Matrix::zeros(d, d);
        for i in 0..4 {
            for j in 0..4 {
                cov.set(i, j, if i == j { 0.30 } else { 0.05 });
            }
        }
        let r = d - 4;
        let shared = 0.3 * rng.uniform_in(0.3, 1.0);
        let mut a = Matrix::zeros(r, r);
        for i in 0..r {
            for j in 0..r {
                a.set(i, j, 0.15 * rng.standard_normal());
            }
        }
        let aat = a.gram(); // A^T A, symmetric PSD
        for i in 0..r {
            for j in 0..r {
                let base = if i == j { 0.4 } else { 0.0 };
                cov.set(4 + i, 4 + j, base + shared + aat.get(i, j));
            }
        }
        let x = sample_mvn(&mu, &cov, n, &mut rng)?;
        studies.push(StudyDataset::new(k + 1, x, vec![0; n], vec![0.0; n])?);
    }
    let base = FederatedDataset::new(studies)?;

    // theta drawn once; each treated coordinate sits 0.05 above control
    let mut theta0 = vec![0.0; d + 1];
    for t in theta0.iter_mut() {
        *t = rng.uniform_in(-1.0, 1.0);
    }
    let int0 = [rng.uniform_in(-1.0, 1.0), rng.uniform_in(-1.0, 1.0)];
    let model = |shift: f64, interaction_shift: f64| OutcomeModel {
        intercept: theta0[0] + shift,
        coefficients: theta0[1..].iter().map(|t| t + shift).collect(),
        interaction: [int0[0] + interaction_shift, int0[1] + interaction_shift],
    };
    let regen = |mode: RegenMode| RegenParams {
        mode,
        arm1: model(0.05, 0.05),
        arm0: model(0.0, 0.0),
        p_by_study: STAND_IN_P.to_vec(),
        noise_sd: 2.0_f64.sqrt(),
    };
    Ok(SemiSyntheticStandIn {
        base,
        linear: regen(RegenMode::Linear),
        polynomial: regen(RegenMode::Polynomial),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_default_truth_is_minus_one_point_one() {
        let cfg = preset("homog-large").unwrap();
        let t = true_ate(&cfg).unwrap();
        assert!((t.tau - (-1.1)).abs() < 1e-12, "tau = {}", t.tau);
        assert!((t.p_pooled - 0.5).abs() < 1e-12);
        for tk in &t.tau_by_study {
            assert!((tk - (-1.1)).abs() < 1e-12);
        }
    }

    #[test]
    fn covariate_shift_truth_is_exactly_0_325() {
        // hand evaluation of the per-study means table: tau_k are
        // (-1.1, 1.4, 0.15, -1.475, 2.65) with equal weights
        let cfg = preset("covariate-shift").unwrap();
        let t = true_ate(&cfg).unwrap();
        let expected = [-1.1, 1.4, 0.15, -1.475, 2.65];
        for (tk, ek) in t.tau_by_study.iter().zip(&expected) {
            assert!((tk - ek).abs() < 1e-12, "{tk} vs {ek}");
        }
        assert!((t.tau - 0.325).abs() < 1e-12, "tau = {}", t.tau);
    }

    #[test]
    fn null_effect_truth_is_zero() {
        let mut cfg = preset("homog-small").unwrap();
        cfg.arm1 = cfg.arm0.clone();
        let t = true_ate(&cfg).unwrap();
        assert_eq!(t.tau, 0.0);
        assert!(t.tau_by_study.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_study_truth_hand_case() {
        // K=2, mu1=0, mu2=1-vector, dbeta=1-vector, dc=0, equal n: tau = d/2
        let d = 6;
        let cfg = ScenarioConfig {
            k: 2,
            d,
            sigma2: 1.0,
            arm1: ArmParams { c: 1.0, beta: vec![1.0; d] },
            arm0: ArmParams { c: 1.0, beta: vec![0.0; d] },
            studies: vec![
                StudySpec {
                    n: 10,
                    p: 0.5,
                    mu: vec![0.0; d],
                    sigma: CovarianceSpec::ScaledIdentityPlusOnes { a: 1.0, b: 0.0 },
                    h: 0.0,
                },
                StudySpec {
                    n: 10,
                    p: 0.5,
                    mu: vec![1.0; d],
                    sigma: CovarianceSpec::ScaledIdentityPlusOnes { a: 1.0, b: 0.0 },
                    h: 0.0,
                },
            ],
        };
        let t = true_ate(&cfg).unwrap();
        assert!((t.tau - d as f64 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn truth_ignores_study_effects() {
        let mut cfg = preset("study-effects").unwrap();
        let with_h = true_ate(&cfg).unwrap().tau;
        for s in cfg.studies.iter_mut() {
            s.h = 0.0;
        }
        let without_h = true_ate(&cfg).unwrap().tau;
        assert_eq!(with_h, without_h);
    }

    #[test]
    fn generation_is_reproducible_and_stream_sensitive() {
        let cfg = preset("homog-small").unwrap();
        let a = generate(&cfg, &mut RngStream::new(5, 1)).unwrap();
        let b = generate(&cfg, &mut RngStream::new(5, 1)).unwrap();
        let c = generate(&cfg, &mut RngStream::new(5, 2)).unwrap();
        for (sa, sb) in a.studies.iter().zip(&b.studies) {
            assert_eq!(sa.covariates.data(), sb.covariates.data());
            assert_eq!(sa.treatment, sb.treatment);
            assert_eq!(sa.outcome, sb.outcome);
        }
        assert_ne!(a.studies[0].outcome, c.studies[0].outcome);
    }

    #[test]
    fn treatment_frequency_tracks_p() {
        let mut cfg = preset("homog-small").unwrap();
        cfg.studies[0].p = 0.3;
        let mut treated = 0usize;
        let mut total = 0usize;
        for rep in 0..200 {
            let fed = generate(&cfg, &mut RngStream::new(101, rep)).unwrap();
            treated += fed.studies[0].n_arm(1);
            total += fed.studies[0].n();
        }
        let phat = treated as f64 / total as f64;
        let se = (0.3 * 0.7 / total as f64).sqrt();
        assert!((phat - 0.3).abs() < 3.0 * se, "phat = {phat}");
    }

    #[test]
    fn all_presets_parse_and_validate() {
        for name in PRESET_NAMES {
            let cfg = preset(name).unwrap();
            assert_eq!(cfg.studies.len(), cfg.k, "{name}");
            true_ate(&cfg).unwrap();
        }
    }

    #[test]
    fn regeneration_keeps_covariates_bitwise() {
        let cfg = preset("homog-small").unwrap();
        let fed = generate(&cfg, &mut RngStream::new(9, 0)).unwrap();
        let params = RegenParams {
            mode: RegenMode::Linear,
            arm1: OutcomeModel { intercept: 1.0, coefficients: vec![0.1; cfg.d], interaction: [0.0; 2] },
            arm0: OutcomeModel { intercept: 0.0, coefficients: vec![0.1; cfg.d], interaction: [0.0; 2] },
            p_by_study: vec![0.5; cfg.k],
            noise_sd: 1.0,
        };
        let regen = regenerate_outcomes(&fed, &params, &mut RngStream::new(9, 1)).unwrap();
        for (a, b) in regen.studies.iter().zip(&fed.studies) {
            assert_eq!(a.covariates.data(), b.covariates.data());
        }
        assert!((regen_true_ate(&fed, &params) - 1.0).abs() < 1e-12); // equal slopes: tau = dc
    }

    #[test]
    fn polynomial_surface_hand_value() {
        // x = (1,1,1,1,0,...): mu = c + t1 + t2 + t3 + interaction . (-1, 1)
        let d = 6;
        let model = OutcomeModel {
            intercept: 0.5,
            coefficients: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            interaction: [2.0, 3.0],
        };
        let mut x = vec![0.0; d];
        x[..4].copy_from_slice(&[1.0, 1.0, 1.0, 1.0]);
        let expected = 0.5 + 0.1 + 0.2 + 0.3 + 0.4 + (2.0 * -1.0 + 3.0 * 1.0);
        assert!((model.polynomial(&x) - expected).abs() < 1e-12);
    }

    #[test]
    fn polynomial_mode_rejects_small_d() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let fed = FederatedDataset::new(vec![StudyDataset::new(
            1,
            Matrix::from_rows(&rows).unwrap(),
            vec![0, 1],
            vec![0.0, 1.0],
        )
        .unwrap()])
        .unwrap();
        let params = RegenParams {
            mode: RegenMode::Polynomial,
            arm1: OutcomeModel { intercept: 0.0, coefficients: vec![0.0; 2], interaction: [0.0; 2] },
            arm0: OutcomeModel { intercept: 0.0, coefficients: vec![0.0; 2], interaction: [0.0; 2] },
            p_by_study: vec![0.5],
            noise_sd: 0.0,
        };
        assert!(matches!(
            regenerate_outcomes(&fed, &params, &mut RngStream::new(0, 0)),
            Err(Error::DimensionError(_))
        ));
    }

    #[test]
    fn bootstrap_preserves_study_sizes_exactly() {
        let cfg = preset("homog-small").unwrap();
        let fed = generate(&cfg, &mut RngStream::new(3, 0)).unwrap();
        let mut rng = RngStream::new(3, 1);
        for _ in 0..50 {
            let b = bootstrap_resample(&fed, &mut rng);
            assert_eq!(b.sizes(), fed.sizes());
        }
    }

    #[test]
    fn singleton_bootstrap_is_identity() {
        let fed = FederatedDataset::new(vec![StudyDataset::new(
            1,
            Matrix::from_rows(&[vec![0.7]]).unwrap(),
            vec![1],
            vec![2.5],
        )
        .unwrap()])
        .unwrap();
        let b = bootstrap_resample(&fed, &mut RngStream::new(0, 0));
        assert_eq!(b.studies[0].outcome, vec![2.5]);
        assert_eq!(b.studies[0].covariates.data(), &[0.7]);
    }

    #[test]
    fn quadratic_truth_from_moments_is_minus_0_3() {
        let cfg = QuadraticScenario::default();
        let tau = quadratic_true_ate(&cfg).unwrap();
        // 0.35 E[x1^2] - 0.5 E[x2^2] + E[x3 x4] - E[x1 x2]
        //   = 0.35*2 - 0.5*2 + 1.5 - 1.5 = -0.3
        assert!((tau - (-0.3)).abs() < 1e-12, "tau = {tau}");
    }

    #[test]
    fn stand_in_sites_have_equal_true_effects() {
        let si = semi_synthetic_stand_in(62).unwrap();
        assert_eq!(si.base.k(), 13);
        assert_eq!(si.base.dim, 15);
        // linear per-site taus coincide by the centered-dispersion design
        let dtheta = 0.05;
        let per_site: Vec<f64> = si
            .base
            .studies
            .iter()
            .map(|s| {
                let mut acc = 0.0;
                for i in 0..s.n() {
                    acc += dtheta * (1.0 + s.covariates.row(i).iter().sum::<f64>());
                }
                acc / s.n() as f64
            })
            .collect();
        // sample means differ, but population construction centers the
        // dispersed coordinates; allow sampling noise only
        let overall = regen_true_ate(&si.base, &si.linear);
        for t in per_site {
            assert!((t - overall).abs() < 0.05, "{t} vs {overall}");
        }
    }
}
