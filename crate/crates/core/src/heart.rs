//! Stanford heart transplant data: ingestion, summary statistics, fixed vs
//! time-varying Cox comparison, and a semi-synthetic estimator study.

use std::io::Read;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::basis::{BasisKind, BasisSpec};
use crate::bench::mean_and_mc_se;
use crate::coxtv::{newton_fit, NewtonConfig, PartialLikelihoodProblem};
use crate::data::{expand_to_episodes, Dataset, EpisodeRow, SubjectRecord};
use crate::error::{Error, Result};
use crate::estimators::{s_lasso_fit, tvcsl_fit, CrossFitPlan, EstimatorConfig, HteModel, Method};
use crate::propensity::{fit_propensity, PropensityConfig};
use crate::simulate::{generate_from_covariates, AdoptionLaw, Baseline, CensorLaw, HazardSpec, LogHazard};

/// SHA-256 of `data/stanford_heart.csv` as shipped.
pub const HEART_SHA256: &str = "f2d49fc32d75578f049b20acd9d82ef6efb63e3aca2b6fda1693f17118f9ab57";

pub const HEART_COLUMNS: [&str; 3] = ["age", "surgery", "year"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeartRecord {
    pub id: u64,
    pub age: f64,
    pub year: f64,
    pub surgery: u8,
    pub wait_time: Option<f64>,
    pub futime: f64,
    pub fustat: u8,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn verify_checksum(path: impl AsRef<Path>) -> Result<bool> {
    Ok(sha256_hex(&std::fs::read(path)?) == HEART_SHA256)
}

pub fn read_heart_records<R: Read>(reader: R, path: &Path) -> Result<Vec<HeartRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let expected = ["id", "age", "year", "surgery", "wait_time", "futime", "fustat"];
    let col = |name: &str| -> Result<usize> {
        header.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("missing column `{name}`"),
        })
    };
    let idx: Vec<usize> = expected.iter().map(|c| col(c)).collect::<Result<_>>()?;

    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(k as u64 + 2, |p| p.line());
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let field = |i: usize| rec.get(idx[i]).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            field(i)
                .parse::<f64>()
                .map_err(|_| err(format!("column `{}`: cannot parse {:?}", expected[i], field(i))))
        };
        let flag = |i: usize| -> Result<u8> {
            match field(i) {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(err(format!("column `{}` must be 0 or 1, got {other:?}", expected[i]))),
            }
        };
        let id = field(0)
            .parse::<u64>()
            .map_err(|_| err(format!("invalid id {:?}", field(0))))?;
        let wait_time = if field(4).is_empty() || field(4).eq_ignore_ascii_case("na") {
            None
        } else {
            Some(num(4)?)
        };
        let futime = num(5)?;
        if !(futime > 0.0) {
            return Err(err(format!("futime must be positive, got {futime}")));
        }
        out.push(HeartRecord {
            id,
            age: num(1)?,
            year: num(2)?,
            surgery: flag(3)?,
            wait_time,
            futime,
            fustat: flag(6)?,
        });
    }
    Ok(out)
}

/// Covariates `(age, surgery, year)`; missing or unrealized transplant
/// means never adopted.
pub fn heart_dataset(records: &[HeartRecord]) -> Result<Dataset> {
    let subjects = records
        .iter()
        .map(|r| {
            let adoption_time = match r.wait_time {
                Some(w) if w < r.futime => w,
                Some(w) => {
                    log::warn!("subject {}: transplant at {w} not before end of follow-up {}; treated as never", r.id, r.futime);
                    f64::INFINITY
                }
                None => f64::INFINITY,
            };
            SubjectRecord {
                id: r.id,
                x: vec![r.age, r.surgery as f64, r.year],
                adoption_time,
                observed_time: r.futime,
                event: r.fustat == 1,
            }
        })
        .collect();
    Dataset::new(subjects, HEART_COLUMNS.iter().map(|s| s.to_string()).collect())
}

pub fn ingest_heart(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let records = read_heart_records(std::fs::File::open(path)?, path)?;
    heart_dataset(&records)
}

fn column(data: &Dataset, name: &str) -> Result<usize> {
    data.column_names
        .iter()
        .position(|c| c == name)
        .ok_or_else(|| Error::InvalidInput(format!("dataset has no `{name}` column")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variable: String,
    pub mean: f64,
    pub sd: f64,
}

/// Mean and sample standard deviation of age, surgery, year and the
/// transplant indicator.
pub fn summary_statistics(data: &Dataset) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::new();
    let stat = |name: &str, v: Vec<f64>| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        SummaryRow {
            variable: name.to_string(),
            mean,
            sd,
        }
    };
    for name in HEART_COLUMNS {
        let j = column(data, name)?;
        rows.push(stat(name, data.subjects.iter().map(|s| s.x[j]).collect()));
    }
    rows.push(stat(
        "trt",
        data.subjects
            .iter()
            .map(|s| if s.adoption_time.is_finite() { 1.0 } else { 0.0 })
            .collect(),
    ));
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// Age and year to mean 0, SD 1 over each model's own rows.
    Standardized,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefRow {
    pub term: String,
    pub coef: f64,
    pub se: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxComparison {
    pub fixed: Vec<CoefRow>,
    pub time_varying: Vec<CoefRow>,
}

pub const TABLE3_TERMS: [&str; 7] = ["age", "surgery", "year", "trt", "age:trt", "surgery:trt", "year:trt"];

fn standardize_in_place(rows: &mut [EpisodeRow], cols: &[usize]) {
    let n = rows.len() as f64;
    for &j in cols {
        let mean = rows.iter().map(|r| r.z[j]).sum::<f64>() / n;
        let sd = (rows.iter().map(|r| (r.z[j] - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        for r in rows.iter_mut() {
            r.z[j] = (r.z[j] - mean) / sd;
        }
    }
}

fn with_interactions(mut rows: Vec<EpisodeRow>, trt: impl Fn(&EpisodeRow) -> bool) -> Vec<EpisodeRow> {
    for r in rows.iter_mut() {
        let w = if trt(r) { 1.0 } else { 0.0 };
        let (age, surgery, year) = (r.z[0], r.z[1], r.z[2]);
        r.z = vec![age, surgery, year, w, age * w, surgery * w, year * w];
    }
    rows
}

fn coef_table(rows: &[EpisodeRow]) -> Result<Vec<CoefRow>> {
    let problem = PartialLikelihoodProblem::from_episodes(rows)?;
    let fit = newton_fit(
        &problem,
        &[0.0; 7],
        &NewtonConfig {
            standard_errors: true,
            ..NewtonConfig::default()
        },
    )?;
    if !fit.converged {
        return Err(Error::Numerical("Cox fit did not converge".into()));
    }
    let se = fit.standard_errors.unwrap_or_default();
    let normal = Normal::standard();
    Ok(TABLE3_TERMS
        .iter()
        .zip(fit.beta.iter().zip(&se))
        .map(|(term, (&coef, &se))| CoefRow {
            term: term.to_string(),
            coef,
            se,
            p: 2.0 * normal.cdf(-(coef / se).abs()),
        })
        .collect())
}

/// Ordinary Cox with transplant as a baseline indicator versus the
/// counting-process Cox with transplant switching on at the wait time,
/// both with main effects and treatment interactions.
pub fn compare_fixed_vs_timevarying(data: &Dataset, scaling: Scaling) -> Result<CoxComparison> {
    let cols = [column(data, "age")?, column(data, "surgery")?, column(data, "year")?];
    let project = |s: &SubjectRecord| cols.iter().map(|&j| s.x[j]).collect::<Vec<f64>>();

    let fixed_rows: Vec<EpisodeRow> = data
        .subjects
        .iter()
        .map(|s| EpisodeRow {
            subject_id: s.id,
            start: 0.0,
            stop: s.observed_time,
            event: s.event,
            treated: s.adoption_time.is_finite(),
            z: project(s),
            offset: 0.0,
        })
        .collect();
    let tv_rows: Vec<EpisodeRow> = data
        .subjects
        .iter()
        .flat_map(|s| {
            let x = project(s);
            expand_to_episodes(s).into_iter().map(move |mut e| {
                e.z = x.clone();
                e
            })
        })
        .collect();
    let (mut fixed_rows, mut tv_rows) = (fixed_rows, tv_rows);
    if scaling == Scaling::Standardized {
        standardize_in_place(&mut fixed_rows, &[0, 2]);
        standardize_in_place(&mut tv_rows, &[0, 2]);
    }
    Ok(CoxComparison {
        fixed: coef_table(&with_interactions(fixed_rows, |r| r.treated))?,
        time_varying: coef_table(&with_interactions(tv_rows, |r| r.treated))?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiSyntheticRow {
    pub method: Method,
    pub eta_basis: BasisKind,
    pub mse_mean: f64,
    pub mse_mc_se: f64,
    pub reps_ok: usize,
    pub reps_failed: usize,
    pub per_rep: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiSyntheticReport {
    pub rows: Vec<SemiSyntheticRow>,
    /// Pseudo-true HTE coefficients on (age, year).
    pub tau_coef: Vec<f64>,
    pub adoption_intercept: f64,
    pub adoption_year_coef: f64,
    pub censor_rate: f64,
    pub max_followup: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemiSyntheticConfig {
    pub reps: usize,
    pub seed: u64,
    /// Floor on fitted adoption rates (per day).
    pub rate_floor: f64,
    /// Standardize age and year over subjects before fitting.
    pub standardize: bool,
    /// Cross-fit in both directions (otherwise fold 0 trains, fold 1 applies).
    pub symmetric: bool,
}

impl Default for SemiSyntheticConfig {
    fn default() -> Self {
        Self {
            reps: 25,
            seed: 1,
            rate_floor: 1e-4,
            standardize: false,
            symmetric: true,
        }
    }
}

/// Age and year, optionally standardized over subjects; surgery excluded.
fn semi_synthetic_covariates(data: &Dataset, standardize: bool) -> Result<Dataset> {
    let cols = [column(data, "age")?, column(data, "year")?];
    let mut d = data.select_columns(&cols)?;
    if !standardize {
        return Ok(d);
    }
    let n = d.len() as f64;
    for j in 0..2 {
        let mean = d.subjects.iter().map(|s| s.x[j]).sum::<f64>() / n;
        let sd = (d.subjects.iter().map(|s| (s.x[j] - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        for s in d.subjects.iter_mut() {
            s.x[j] = (s.x[j] - mean) / sd;
        }
    }
    Ok(d)
}

fn estimator_config(seed: u64, rate_floor: f64, symmetric: bool) -> EstimatorConfig {
    let mut c = EstimatorConfig::with_seed(seed);
    c.symmetric = symmetric;
    c.propensity = PropensityConfig {
        rate_floor,
        ..PropensityConfig::default()
    };
    c
}

/// Pseudo-truth from a linear-η TV-CSL fit on the observed data, then
/// repeated regeneration of adoption and event times around it.
pub fn semi_synthetic_study(data: &Dataset, config: &SemiSyntheticConfig) -> Result<SemiSyntheticReport> {
    if config.reps == 0 {
        return Err(Error::InvalidInput("reps must be at least 1".into()));
    }
    let d = semi_synthetic_covariates(data, config.standardize)?;
    let year = 1usize;
    let est = estimator_config(config.seed, config.rate_floor, true);
    let plan = CrossFitPlan::new(&d, config.seed)?;
    let truth = tvcsl_fit(&d, BasisSpec::linear(), BasisSpec::linear(), &[year], &plan, &est)?;
    let tau_coef = truth.hte.beta.clone();
    let eta_first: Vec<Vec<f64>> = truth.first_stage.iter().map(|f| f.eta_coef.clone()).collect();
    let eta_coef: Vec<f64> = (0..2)
        .map(|j| eta_first.iter().map(|c| c[j]).sum::<f64>() / eta_first.len() as f64)
        .collect();

    // Breslow baseline with the pseudo-true linear predictor as offset.
    let rows: Vec<EpisodeRow> = d
        .subjects
        .iter()
        .flat_map(|s| {
            let eta: f64 = s.x.iter().zip(&eta_coef).map(|(a, b)| a * b).sum();
            let tau: f64 = s.x.iter().zip(&tau_coef).map(|(a, b)| a * b).sum();
            expand_to_episodes(s).into_iter().map(move |mut e| {
                e.offset = eta + if e.treated { tau } else { 0.0 };
                e.z = Vec::new();
                e
            })
        })
        .collect();
    let baseline = PartialLikelihoodProblem::from_episodes(&rows)?.breslow_baseline(&[])?;

    let adoption = fit_propensity(
        &d,
        &[year],
        &PropensityConfig {
            rate_floor: config.rate_floor,
            ..PropensityConfig::default()
        },
    )?;
    let n_censored = d.subjects.iter().filter(|s| !s.event).count() as f64;
    let followup: f64 = d.subjects.iter().map(|s| s.observed_time).sum();
    let max_followup = d.subjects.iter().map(|s| s.observed_time).fold(0.0, f64::max);
    let censor_rate = n_censored / followup;

    let spec = HazardSpec {
        baseline: Baseline::Step(baseline),
        eta0: LogHazard::Linear {
            intercept: 0.0,
            coef: eta_coef,
        },
        tau: LogHazard::Linear {
            intercept: 0.0,
            coef: tau_coef.clone(),
        },
        adoption: AdoptionLaw::Exponential {
            intercept: adoption.intercept,
            coef: vec![0.0, adoption.theta[0]],
            rate_floor: config.rate_floor,
        },
        censor: CensorLaw {
            rate: censor_rate,
            admin: max_followup,
        },
    };
    let xs: Vec<Vec<f64>> = d.subjects.iter().map(|s| s.x.clone()).collect();
    let tau_star: Vec<f64> = xs.iter().map(|x| spec.tau.eval(x)).collect();

    let combos = [
        (Method::SLasso, BasisKind::Linear),
        (Method::SLasso, BasisKind::Complex),
        (Method::TvCsl, BasisKind::Linear),
        (Method::TvCsl, BasisKind::Complex),
    ];
    let per_rep: Vec<[Option<f64>; 4]> = (0..config.reps)
        .into_par_iter()
        .map(|r| {
            let seed = config.seed.wrapping_add(1 + r as u64);
            let mut out = [None; 4];
            let sim = match generate_from_covariates(&spec, &xs, d.column_names.clone(), seed) {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("semi-synthetic rep {r}: generation failed: {e}");
                    return out;
                }
            };
            for (slot, &(method, eta)) in combos.iter().enumerate() {
                let fitted = fit_semi(&sim.dataset, method, eta, seed, config);
                match fitted {
                    Ok(m) => {
                        let mse = xs
                            .iter()
                            .zip(&tau_star)
                            .map(|(x, t)| (m.predict(x) - t).powi(2))
                            .sum::<f64>()
                            / xs.len() as f64;
                        out[slot] = Some(mse);
                    }
                    Err(e) => log::warn!("semi-synthetic rep {r} {method:?}/{eta:?} failed: {e}"),
                }
            }
            out
        })
        .collect();

    let rows = combos
        .iter()
        .enumerate()
        .map(|(slot, &(method, eta_basis))| {
            let per: Vec<Option<f64>> = per_rep.iter().map(|r| r[slot]).collect();
            let ok: Vec<f64> = per.iter().flatten().copied().collect();
            let (mse_mean, mse_mc_se) = mean_and_mc_se(&ok);
            SemiSyntheticRow {
                method,
                eta_basis,
                mse_mean,
                mse_mc_se,
                reps_ok: ok.len(),
                reps_failed: per.len() - ok.len(),
                per_rep: per,
            }
        })
        .collect();
    Ok(SemiSyntheticReport {
        rows,
        tau_coef,
        adoption_intercept: adoption.intercept,
        adoption_year_coef: adoption.theta[0],
        censor_rate,
        max_followup,
    })
}

fn fit_semi(data: &Dataset, method: Method, eta: BasisKind, seed: u64, config: &SemiSyntheticConfig) -> Result<HteModel> {
    let cfg = estimator_config(seed, config.rate_floor, config.symmetric);
    let eta_spec = crate::bench::basis_spec(eta);
    match method {
        Method::SLasso => Ok(s_lasso_fit(data, eta_spec, BasisSpec::linear(), &cfg)?.hte),
        Method::TvCsl => {
            let plan = CrossFitPlan::new(data, seed)?;
            Ok(tvcsl_fit(data, eta_spec, BasisSpec::linear(), &[1], &plan, &cfg)?.hte)
        }
    }
}
