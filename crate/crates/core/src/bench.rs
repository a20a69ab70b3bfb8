//! Monte Carlo EMSE benchmark over methods, bases and sample sizes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisKind, BasisSpec};
use crate::estimators::{s_lasso_fit, tvcsl_fit, CrossFitPlan, EstimatorConfig, HteModel, Method};
use crate::error::{Error, Result};
use crate::simulate::{generate, HazardSpec, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensitySpec {
    Correct,
    Misspecified,
}

impl PropensitySpec {
    /// Zero-based covariate indices of the fitted adoption model.
    pub fn subset(self, p: usize) -> Vec<usize> {
        match self {
            PropensitySpec::Correct => (0..p).collect(),
            PropensitySpec::Misspecified => vec![1],
        }
    }
}

pub fn basis_spec(kind: BasisKind) -> BasisSpec {
    match kind {
        BasisKind::Linear => BasisSpec::linear(),
        BasisKind::Complex => BasisSpec::complex(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub method: Method,
    pub eta_basis: BasisKind,
    pub hte_basis: BasisKind,
    /// Ignored by S-Lasso.
    pub propensity: PropensitySpec,
    pub n: usize,
    pub reps: usize,
    pub base_seed: u64,
    pub test_size: usize,
    pub rate_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub cell: BenchCell,
    pub emse_mean: f64,
    pub emse_mc_se: f64,
    /// `None` marks a failed replication.
    pub per_rep_emse: Vec<Option<f64>>,
    pub reps_ok: usize,
    pub reps_failed: usize,
    /// More than 10% of replications failed.
    pub cell_failed: bool,
    pub wall_time: f64,
}

impl BenchResult {
    pub fn ok_values(&self) -> Vec<f64> {
        self.per_rep_emse.iter().flatten().copied().collect()
    }
}

/// Mean over test rows of `(τ̂(x) − τ(x))²`.
pub fn emse(model: &HteModel, test_x: &[Vec<f64>], tau_true: &[f64]) -> Result<f64> {
    if test_x.len() != tau_true.len() || test_x.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} test rows but {} true effects",
            test_x.len(),
            tau_true.len()
        )));
    }
    let sse: f64 = test_x
        .iter()
        .zip(tau_true)
        .map(|(x, t)| (model.predict(x) - t).powi(2))
        .sum();
    Ok(sse / test_x.len() as f64)
}

/// Seed of the independent test set for replication seed `s`.
pub fn test_seed(s: u64) -> u64 {
    s.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xD1B5_4A32_D192_ED03
}

pub fn mean_and_mc_se(values: &[f64]) -> (f64, f64) {
    let k = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / k;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

pub fn fit_once(cell: &BenchCell, data: &crate::data::Dataset, seed: u64) -> Result<HteModel> {
    let config = EstimatorConfig::with_seed(seed);
    let eta = basis_spec(cell.eta_basis);
    let hte = basis_spec(cell.hte_basis);
    match cell.method {
        Method::SLasso => Ok(s_lasso_fit(data, eta, hte, &config)?.hte),
        Method::TvCsl => {
            let plan = CrossFitPlan::new(data, seed)?;
            let subset = cell.propensity.subset(data.p);
            Ok(tvcsl_fit(data, eta, hte, &subset, &plan, &config)?.hte)
        }
    }
}

fn run_rep(cell: &BenchCell, r: usize) -> Result<f64> {
    let seed = cell.base_seed.wrapping_add(r as u64);
    let spec = HazardSpec::with_rate_floor(cell.rate_floor);
    let train = generate(&SimConfig {
        spec: spec.clone(),
        ..SimConfig::new(cell.n, seed)
    })?;
    let test = generate(&SimConfig {
        spec,
        ..SimConfig::new(cell.test_size, test_seed(seed))
    })?;
    let model = fit_once(cell, &train.dataset, seed)?;
    let xs: Vec<Vec<f64>> = test.dataset.subjects.iter().map(|s| s.x.clone()).collect();
    let tau: Vec<f64> = test.truth.iter().map(|t| t.tau_true).collect();
    emse(&model, &xs, &tau)
}

pub fn run_cell(cell: &BenchCell) -> Result<BenchResult> {
    if cell.reps == 0 || cell.n == 0 || cell.test_size == 0 {
        return Err(Error::InvalidInput("reps, n and test_size must be positive".into()));
    }
    let start = Instant::now();
    let per_rep_emse: Vec<Option<f64>> = (0..cell.reps)
        .into_par_iter()
        .map(|r| match run_rep(cell, r) {
            Ok(v) if v.is_finite() => Some(v),
            Ok(_) => None,
            Err(e) => {
                log::warn!("{:?} n={} rep {r} failed: {e}", cell.method, cell.n);
                None
            }
        })
        .collect();
    let ok: Vec<f64> = per_rep_emse.iter().flatten().copied().collect();
    let reps_failed = cell.reps - ok.len();
    let (emse_mean, emse_mc_se) = mean_and_mc_se(&ok);
    Ok(BenchResult {
        cell: *cell,
        emse_mean,
        emse_mc_se,
        reps_ok: ok.len(),
        reps_failed,
        cell_failed: reps_failed * 10 > cell.reps,
        per_rep_emse,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Declarative benchmark grid, typically read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchGrid {
    pub n: Vec<usize>,
    pub reps: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_bases")]
    pub eta_bases: Vec<BasisKind>,
    #[serde(default = "default_bases")]
    pub hte_bases: Vec<BasisKind>,
    #[serde(default = "default_propensities")]
    pub propensities: Vec<PropensitySpec>,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    #[serde(default = "default_rate_floor")]
    pub rate_floor: f64,
}

fn default_methods() -> Vec<Method> {
    vec![Method::SLasso, Method::TvCsl]
}

fn default_bases() -> Vec<BasisKind> {
    vec![BasisKind::Linear, BasisKind::Complex]
}

fn default_propensities() -> Vec<PropensitySpec> {
    vec![PropensitySpec::Correct, PropensitySpec::Misspecified]
}

fn default_test_size() -> usize {
    2000
}

fn default_rate_floor() -> f64 {
    0.05
}

impl BenchGrid {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let grid: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 || self.n.is_empty() || self.n.contains(&0) || self.test_size == 0 {
            return Err(Error::Config("grid needs reps >= 1, test_size >= 1 and positive sizes".into()));
        }
        if self.methods.is_empty() || self.eta_bases.is_empty() || self.hte_bases.is_empty() {
            return Err(Error::Config("grid needs at least one method and basis".into()));
        }
        if self.methods.contains(&Method::TvCsl) && self.propensities.is_empty() {
            return Err(Error::Config("tv_csl cells need at least one propensity setting".into()));
        }
        Ok(())
    }

    /// All cells; S-Lasso appears once per basis pair since it has no
    /// propensity model.
    pub fn cells(&self) -> Vec<BenchCell> {
        let mut out = Vec::new();
        for &method in &self.methods {
            for &eta in &self.eta_bases {
                for &hte in &self.hte_bases {
                    let props = match method {
                        Method::SLasso => vec![PropensitySpec::Correct],
                        Method::TvCsl => self.propensities.clone(),
                    };
                    for prop in props {
                        for &n in &self.n {
                            out.push(BenchCell {
                                method,
                                eta_basis: eta,
                                hte_basis: hte,
                                propensity: prop,
                                n,
                                reps: self.reps,
                                base_seed: self.base_seed,
                                test_size: self.test_size,
                                rate_floor: self.rate_floor,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

pub fn run_grid(grid: &BenchGrid) -> Result<Vec<BenchResult>> {
    grid.validate()?;
    grid.cells()
        .iter()
        .map(|cell| {
            let r = run_cell(cell)?;
            log::info!(
                "{:?} eta={:?} hte={:?} prop={:?} n={}: emse {:.4} ± {:.4} ({} ok, {} failed, {:.1}s)",
                cell.method,
                cell.eta_basis,
                cell.hte_basis,
                cell.propensity,
                cell.n,
                r.emse_mean,
                r.emse_mc_se,
                r.reps_ok,
                r.reps_failed,
                r.wall_time
            );
            Ok(r)
        })
        .collect()
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::SLasso => "s_lasso",
        Method::TvCsl => "tv_csl",
    }
}

fn basis_name(b: BasisKind) -> &'static str {
    match b {
        BasisKind::Linear => "linear",
        BasisKind::Complex => "complex",
    }
}

fn prop_name(p: PropensitySpec) -> &'static str {
    match p {
        PropensitySpec::Correct => "correct",
        PropensitySpec::Misspecified => "misspecified",
    }
}

/// One CSV per (η basis, HTE basis, propensity) panel. S-Lasso rows are
/// repeated in every propensity panel of their basis pair.
pub fn write_panel_csvs(results: &[BenchResult], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut props: Vec<PropensitySpec> = results
        .iter()
        .filter(|r| r.cell.method == Method::TvCsl)
        .map(|r| r.cell.propensity)
        .collect();
    props.sort();
    props.dedup();
    if props.is_empty() {
        props.push(PropensitySpec::Correct);
    }

    let mut panels: BTreeMap<(u8, u8, PropensitySpec), Vec<&BenchResult>> = BTreeMap::new();
    for r in results {
        let key = |p| (r.cell.eta_basis as u8, r.cell.hte_basis as u8, p);
        match r.cell.method {
            Method::SLasso => props.iter().for_each(|&p| panels.entry(key(p)).or_default().push(r)),
            Method::TvCsl => panels.entry(key(r.cell.propensity)).or_default().push(r),
        }
    }

    let mut written = Vec::new();
    for ((_, _, prop), mut rows) in panels {
        rows.sort_by_key(|r| (r.cell.n, r.cell.method as u8));
        let first = rows[0].cell;
        let path = dir.join(format!(
            "panel_eta-{}_hte-{}_prop-{}.csv",
            basis_name(first.eta_basis),
            basis_name(first.hte_basis),
            prop_name(prop)
        ));
        let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
        writeln!(w, "n,method,eta_basis,hte_basis,propensity,emse_mean,emse_mc_se,reps_ok,reps_failed")?;
        for r in rows {
            let c = r.cell;
            let p = match c.method {
                Method::SLasso => "none",
                Method::TvCsl => prop_name(c.propensity),
            };
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                c.n,
                method_name(c.method),
                basis_name(c.eta_basis),
                basis_name(c.hte_basis),
                p,
                r.emse_mean,
                r.emse_mc_se,
                r.reps_ok,
                r.reps_failed
            )?;
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}
