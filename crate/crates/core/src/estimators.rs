//! S-Lasso and TV-CSL estimators of the heterogeneous log hazard ratio.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, FittedBasis};
use crate::coxtv::{dot, newton_fit, NewtonConfig, PartialLikelihoodProblem, RiskTimeCovariates, RiskTimeProblem};
use crate::data::{Dataset, EpisodeRow, FitResult};
use crate::error::{Error, Result};
use crate::penalized::{cv_select_lambda, CvConfig, LassoPath};
use crate::propensity::{fit_propensity, PropensityConfig, PropensityModel};
use crate::simulate::AdoptionCdfTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SLasso,
    TvCsl,
}

/// `τ̂(x) = intercept + βᵀφ(x[covariates])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HteModel {
    pub method: Method,
    pub intercept: f64,
    pub beta: Vec<f64>,
    pub hte_basis: FittedBasis,
    /// Indices of the original covariates the basis is applied to.
    pub covariates: Vec<usize>,
}

impl HteModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let sub: Vec<f64> = self.covariates.iter().map(|&j| x[j]).collect();
        self.intercept + dot(&self.beta, &self.hte_basis.expand(&sub))
    }
}

pub fn predict_hte(model: &HteModel, x: &[f64]) -> f64 {
    model.predict(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub cv: CvConfig,
    pub newton: NewtonConfig,
    pub propensity: PropensityConfig,
    /// Accumulate second-stage objectives on both folds.
    pub symmetric: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            cv: CvConfig::default(),
            newton: NewtonConfig::default(),
            propensity: PropensityConfig::default(),
            symmetric: true,
        }
    }
}

impl EstimatorConfig {
    pub fn with_seed(seed: u64) -> Self {
        let mut c = Self::default();
        c.cv.seed = seed;
        c
    }
}

/// Outcome-model fit `η(x) + W(t)·(ω₀ + ωᵀφ_τ(x))` by cross-validated lasso.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SLassoFit {
    pub eta_basis: FittedBasis,
    pub eta_coef: Vec<f64>,
    pub hte: HteModel,
    pub path: LassoPath,
}

impl SLassoFit {
    pub fn eta0(&self, x: &[f64]) -> f64 {
        let sub: Vec<f64> = self.hte.covariates.iter().map(|&j| x[j]).collect();
        dot(&self.eta_coef, &self.eta_basis.expand(&sub))
    }

    pub fn tau(&self, x: &[f64]) -> f64 {
        self.hte.predict(x)
    }
}

fn covariate_rows(data: &Dataset, cols: &[usize]) -> Vec<Vec<f64>> {
    data.subjects
        .iter()
        .map(|s| cols.iter().map(|&j| s.x[j]).collect())
        .collect()
}

fn s_lasso_on_columns(
    data: &Dataset,
    cols: &[usize],
    eta_basis: BasisSpec,
    hte_basis: BasisSpec,
    config: &EstimatorConfig,
) -> Result<SLassoFit> {
    if data.n_events() == 0 {
        return Err(Error::Degenerate("no events in data".into()));
    }
    if !data.subjects.iter().any(|s| s.adopts_during_followup()) {
        return Err(Error::Degenerate(
            "no subject adopts during follow-up; treated block is identically zero".into(),
        ));
    }
    let xs = covariate_rows(data, cols);
    let eta_fb = FittedBasis::fit(eta_basis, &xs)?;
    let hte_fb = FittedBasis::fit(hte_basis, &xs)?;
    let (de, dt) = (eta_fb.dim(), hte_fb.dim());

    let mut rows: Vec<EpisodeRow> = Vec::with_capacity(data.len() * 2);
    for (s, x) in data.subjects.iter().zip(&xs) {
        let phi_eta = eta_fb.expand(x);
        let phi_tau = hte_fb.expand(x);
        for mut e in crate::data::expand_to_episodes(s) {
            let w = if e.treated { 1.0 } else { 0.0 };
            let mut z = Vec::with_capacity(de + 1 + dt);
            z.extend_from_slice(&phi_eta);
            z.push(w);
            z.extend(phi_tau.iter().map(|v| w * v));
            e.z = z;
            rows.push(e);
        }
    }
    let problem = PartialLikelihoodProblem::from_episodes(&rows)?;
    let mut pf = vec![1.0; de + 1 + dt];
    pf[de] = 0.0;
    let path = cv_select_lambda(&problem, &pf, &config.cv)?;
    let beta = path.selected_beta().to_vec();
    Ok(SLassoFit {
        eta_coef: beta[..de].to_vec(),
        hte: HteModel {
            method: Method::SLasso,
            intercept: beta[de],
            beta: beta[de + 1..].to_vec(),
            hte_basis: hte_fb,
            covariates: cols.to_vec(),
        },
        eta_basis: eta_fb,
        path,
    })
}

pub fn s_lasso_fit(
    data: &Dataset,
    eta_basis: BasisSpec,
    hte_basis: BasisSpec,
    config: &EstimatorConfig,
) -> Result<SLassoFit> {
    let cols: Vec<usize> = (0..data.p).collect();
    s_lasso_on_columns(data, &cols, eta_basis, hte_basis, config)
}

/// Two-fold split of subjects for cross-fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossFitPlan {
    pub n_folds: usize,
    /// `(subject id, fold)` sorted by id.
    pub fold_assignment: Vec<(u64, usize)>,
    pub seed: u64,
    /// Binary covariates too unbalanced within a fold; excluded from the fit.
    pub dropped_covariates: Vec<usize>,
}

const MAX_PLAN_DRAWS: usize = 20;
const MIN_MINORITY: usize = 3;

fn binary_columns(data: &Dataset) -> Vec<usize> {
    (0..data.p)
        .filter(|&j| data.subjects.iter().all(|s| s.x[j] == 0.0 || s.x[j] == 1.0))
        .collect()
}

impl CrossFitPlan {
    /// Random balanced split, redrawn until each fold has an event, an
    /// adoption, and at least three subjects in the minority class of every
    /// binary covariate. After 20 draws the offending covariates are dropped.
    pub fn new(data: &Dataset, seed: u64) -> Result<Self> {
        let binaries = binary_columns(data);
        let mut last_bad: Vec<usize> = Vec::new();
        let mut fallback = None;
        for draw in 0..MAX_PLAN_DRAWS {
            let plan = Self::draw(data, seed, draw as u64);
            let folds = plan.split(data);
            let basic_ok = folds
                .iter()
                .all(|f| f.n_events() > 0 && f.subjects.iter().any(|s| s.adopts_during_followup()));
            if !basic_ok {
                continue;
            }
            let bad: Vec<usize> = binaries
                .iter()
                .copied()
                .filter(|&j| {
                    folds.iter().any(|f| {
                        let ones = f.subjects.iter().filter(|s| s.x[j] == 1.0).count();
                        ones.min(f.len() - ones) < MIN_MINORITY
                    })
                })
                .collect();
            if bad.is_empty() {
                return Ok(plan);
            }
            if fallback.is_none() {
                fallback = Some(plan);
                last_bad = bad;
            }
        }
        match fallback {
            Some(mut plan) => {
                log::warn!("dropping unbalanced binary covariates {last_bad:?} after {MAX_PLAN_DRAWS} fold draws");
                plan.dropped_covariates = last_bad;
                Ok(plan)
            }
            None => Err(Error::Degenerate(format!(
                "no two-fold split with an event and an adoption in each fold after {MAX_PLAN_DRAWS} draws"
            ))),
        }
    }

    fn draw(data: &Dataset, seed: u64, attempt: u64) -> Self {
        let mut ids: Vec<u64> = data.subjects.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt);
        ids.shuffle(&mut rng);
        let mut fold_assignment: Vec<(u64, usize)> =
            ids.into_iter().enumerate().map(|(i, id)| (id, i % 2)).collect();
        fold_assignment.sort_unstable();
        Self {
            n_folds: 2,
            fold_assignment,
            seed,
            dropped_covariates: Vec::new(),
        }
    }

    pub fn fold_of(&self, id: u64) -> Option<usize> {
        self.fold_assignment
            .binary_search_by_key(&id, |&(i, _)| i)
            .ok()
            .map(|k| self.fold_assignment[k].1)
    }

    /// The plan with fold labels exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            fold_assignment: self
                .fold_assignment
                .iter()
                .map(|&(id, f)| (id, self.n_folds - 1 - f))
                .collect(),
            ..self.clone()
        }
    }

    pub fn split(&self, data: &Dataset) -> Vec<Dataset> {
        (0..self.n_folds)
            .map(|k| data.filter(|s| self.fold_of(s.id) == Some(k)))
            .collect()
    }
}

/// A subject's adoption probability curve `t ↦ â_t(x)`.
#[derive(Debug, Clone)]
pub enum PropensityCurve {
    Zero,
    Exponential { rate: f64 },
    Table(Arc<AdoptionCdfTable>),
}

impl PropensityCurve {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            PropensityCurve::Zero => 0.0,
            PropensityCurve::Exponential { rate } => {
                if t <= 0.0 {
                    0.0
                } else {
                    -(-rate * t).exp_m1()
                }
            }
            PropensityCurve::Table(tab) => tab.eval(t),
        }
    }
}

/// Per-subject inputs of the second-stage objective.
#[derive(Debug, Clone)]
pub struct SecondStageSubject {
    pub observed_time: f64,
    pub event: bool,
    pub adoption_time: f64,
    pub phi: Vec<f64>,
    pub eta0: f64,
    pub tau: f64,
    pub propensity: PropensityCurve,
}

struct SecondStageStratum {
    subjects: Vec<SecondStageSubject>,
    dim: usize,
}

impl RiskTimeCovariates for SecondStageStratum {
    fn dim(&self) -> usize {
        self.dim
    }

    fn len(&self) -> usize {
        self.subjects.len()
    }

    fn observed_time(&self, i: usize) -> f64 {
        self.subjects[i].observed_time
    }

    fn event(&self, i: usize) -> bool {
        self.subjects[i].event
    }

    /// `z = (W(t) − â_t)·φ` and offset `ν̂_t = τ̂·â_t + η̂₀`.
    fn at(&self, i: usize, t: f64, z: &mut [f64]) -> f64 {
        let s = &self.subjects[i];
        let a = s.propensity.eval(t);
        let w = if s.adoption_time < t { 1.0 } else { 0.0 };
        let c = w - a;
        for (zj, pj) in z.iter_mut().zip(&s.phi) {
            *zj = c * pj;
        }
        s.tau * a + s.eta0
    }

    fn residual(&self, i: usize, t: f64) -> f64 {
        let s = &self.subjects[i];
        let w = if s.adoption_time < t { 1.0 } else { 0.0 };
        w - s.propensity.eval(t)
    }
}

pub fn second_stage_problem(strata: Vec<Vec<SecondStageSubject>>) -> Result<RiskTimeProblem> {
    let dim = strata
        .iter()
        .flat_map(|s| s.first())
        .map(|s| s.phi.len())
        .next()
        .unwrap_or(0);
    if strata.iter().flatten().any(|s| s.phi.len() != dim) {
        return Err(Error::InvalidInput("second-stage features differ in length".into()));
    }
    let boxed: Vec<Box<dyn RiskTimeCovariates>> = strata
        .into_iter()
        .map(|subjects| Box::new(SecondStageStratum { subjects, dim }) as Box<dyn RiskTimeCovariates>)
        .collect();
    RiskTimeProblem::new(boxed)
}

/// Maximizes the summed second-stage partial likelihood over all strata.
pub fn second_stage_fit(strata: Vec<Vec<SecondStageSubject>>, config: &NewtonConfig) -> Result<FitResult> {
    let problem = second_stage_problem(strata)?;
    let p = crate::coxtv::PartialLikelihood::dim(&problem);
    newton_fit(&problem, &vec![0.0; p], config)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TvCslFit {
    pub hte: HteModel,
    pub second_stage: FitResult,
    pub first_stage: Vec<SLassoFit>,
    pub propensity: Vec<PropensityModel>,
    pub plan: CrossFitPlan,
    /// Mean over event times of the risk-set average of `W(t) − â_t`.
    pub centering: f64,
}

impl TvCslFit {
    /// Average of the fold-specific first-stage `η̂₀`.
    pub fn eta0(&self, x: &[f64]) -> f64 {
        self.first_stage.iter().map(|f| f.eta0(x)).sum::<f64>() / self.first_stage.len() as f64
    }
}

/// Second-stage feature map: the HTE basis, with a leading constant when
/// the basis is standardized (standardization removes the level).
fn second_stage_features(basis: &FittedBasis, x: &[f64]) -> Vec<f64> {
    let mut phi = Vec::with_capacity(basis.dim() + 1);
    if basis.spec.standardize {
        phi.push(1.0);
    }
    phi.extend(basis.expand(x));
    phi
}

pub fn tvcsl_fit(
    data: &Dataset,
    eta_basis: BasisSpec,
    hte_basis: BasisSpec,
    propensity_subset: &[usize],
    plan: &CrossFitPlan,
    config: &EstimatorConfig,
) -> Result<TvCslFit> {
    if plan.n_folds != 2 {
        return Err(Error::InvalidInput("cross-fitting uses exactly two folds".into()));
    }
    if data.subjects.iter().any(|s| plan.fold_of(s.id).is_none()) {
        return Err(Error::InvalidInput("cross-fit plan does not cover every subject".into()));
    }
    let cols: Vec<usize> = (0..data.p).filter(|j| !plan.dropped_covariates.contains(j)).collect();
    let prop_subset: Vec<usize> = propensity_subset
        .iter()
        .filter_map(|j| cols.iter().position(|c| c == j))
        .collect();
    let folds = plan.split(data);
    for (k, f) in folds.iter().enumerate() {
        if f.n_events() == 0 || !f.subjects.iter().any(|s| s.adopts_during_followup()) {
            return Err(Error::Degenerate(format!(
                "fold {k} has {} subjects, {} events and no adoption during follow-up",
                f.len(),
                f.n_events()
            )));
        }
    }

    let train_folds: Vec<usize> = if config.symmetric { vec![0, 1] } else { vec![0] };
    let nuisances: Vec<(PropensityModel, SLassoFit)> = train_folds
        .par_iter()
        .map(|&k| -> Result<_> {
            let train = folds[k].select_columns(&cols)?;
            let prop = fit_propensity(&train, &prop_subset, &config.propensity)?;
            let mut cfg = *config;
            // Keyed on fold content, not its label, so swapping labels is a no-op.
            let key = train.subjects.iter().map(|s| s.id).min().unwrap_or(0);
            cfg.cv.seed = config.cv.seed.wrapping_add(key);
            let all: Vec<usize> = (0..cols.len()).collect();
            let first = s_lasso_on_columns(&train, &all, eta_basis, hte_basis, &cfg)?;
            Ok((prop, first))
        })
        .collect::<Result<_>>()?;

    let xs_all = covariate_rows(data, &cols);
    let hte_fb = FittedBasis::fit(hte_basis, &xs_all)?;

    let mut strata = Vec::with_capacity(train_folds.len());
    for (&k, (prop, first)) in train_folds.iter().zip(&nuisances) {
        let apply = &folds[1 - k];
        let stratum: Vec<SecondStageSubject> = apply
            .subjects
            .iter()
            .map(|s| {
                let x: Vec<f64> = cols.iter().map(|&j| s.x[j]).collect();
                SecondStageSubject {
                    observed_time: s.observed_time,
                    event: s.event,
                    adoption_time: s.adoption_time,
                    phi: second_stage_features(&hte_fb, &x),
                    eta0: first.eta0(&x),
                    tau: first.tau(&x),
                    propensity: PropensityCurve::Exponential { rate: prop.rate(&x) },
                }
            })
            .collect();
        strata.push(stratum);
    }
    let problem = second_stage_problem(strata)?;
    let dim = crate::coxtv::PartialLikelihood::dim(&problem);
    let centering = problem.mean_residual();
    let second = newton_fit(&problem, &vec![0.0; dim], &config.newton)?;
    if !second.converged {
        log::warn!(
            "second stage did not converge after {} iterations (gradient norm {:.3e})",
            second.n_iterations,
            second.gradient_norm
        );
    }
    let (intercept, beta) = if hte_fb.spec.standardize {
        (second.beta[0], second.beta[1..].to_vec())
    } else {
        (0.0, second.beta.clone())
    };
    let (propensity, first_stage) = nuisances.into_iter().unzip();
    Ok(TvCslFit {
        hte: HteModel {
            method: Method::TvCsl,
            intercept,
            beta,
            hte_basis: hte_fb,
            covariates: cols,
        },
        second_stage: second,
        first_stage,
        propensity,
        plan: plan.clone(),
        centering,
    })
}
