//! Synthetic staggered-adoption survival data.
//!
//! Event times are drawn by exact inversion of the piecewise cumulative
//! hazard `H(t) = Λ(t)e^{η₀}` before adoption and
//! `Λ(a)e^{η₀} + (Λ(t) − Λ(a))e^{η₀+τ}` after it, so the post-adoption
//! hazard is evaluated at calendar time `t`, not at `t − a`.

use std::fmt::Debug;
use std::io::Write;
use std::path::Path;

use rand::distr::{Distribution, Open01};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coxtv::StepFunction;
use crate::data::{format_time, Dataset, SubjectRecord};
use crate::error::{Error, Result};

pub trait CumulativeHazard: Send + Sync + Debug {
    fn value(&self, t: f64) -> f64;
    /// Smallest `t` with `value(t) >= y`; `None` if `y` is never reached.
    fn inverse(&self, y: f64) -> Option<f64>;
}

impl CumulativeHazard for StepFunction {
    fn value(&self, t: f64) -> f64 {
        StepFunction::value(self, t)
    }

    fn inverse(&self, y: f64) -> Option<f64> {
        StepFunction::inverse(self, y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Baseline {
    /// `Λ(t) = t²/2`, i.e. `λ(t) = t`.
    Quadratic,
    Step(StepFunction),
}

impl CumulativeHazard for Baseline {
    fn value(&self, t: f64) -> f64 {
        match self {
            Baseline::Quadratic => 0.5 * t * t,
            Baseline::Step(f) => f.value(t),
        }
    }

    fn inverse(&self, y: f64) -> Option<f64> {
        match self {
            Baseline::Quadratic => Some((2.0 * y.max(0.0)).sqrt()),
            Baseline::Step(f) => f.inverse(y),
        }
    }
}

/// `ς(x) = 2 / (1 + e^{−12(x − ½)})`.
pub fn sigmoid_factor(x: f64) -> f64 {
    2.0 / (1.0 + (-12.0 * (x - 0.5)).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogHazard {
    Zero,
    Linear { intercept: f64, coef: Vec<f64> },
    /// `−½·ς(x_i)·ς(x_j)`.
    SigmoidProduct { i: usize, j: usize },
}

impl LogHazard {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            LogHazard::Zero => 0.0,
            LogHazard::Linear { intercept, coef } => {
                intercept + coef.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
            }
            LogHazard::SigmoidProduct { i, j } => -0.5 * sigmoid_factor(x[*i]) * sigmoid_factor(x[*j]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdoptionLaw {
    Never,
    /// `A ~ Exp(max(intercept + coefᵀx, rate_floor))`.
    Exponential {
        intercept: f64,
        coef: Vec<f64>,
        rate_floor: f64,
    },
}

impl AdoptionLaw {
    pub fn rate(&self, x: &[f64]) -> f64 {
        match self {
            AdoptionLaw::Never => 0.0,
            AdoptionLaw::Exponential {
                intercept,
                coef,
                rate_floor,
            } => (intercept + coef.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()).max(*rate_floor),
        }
    }
}

/// `C = min(admin, Exp(rate))`; `rate = 0` leaves only the administrative cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CensorLaw {
    pub rate: f64,
    pub admin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardSpec {
    pub baseline: Baseline,
    pub eta0: LogHazard,
    pub tau: LogHazard,
    pub adoption: AdoptionLaw,
    pub censor: CensorLaw,
}

impl Default for HazardSpec {
    fn default() -> Self {
        Self::with_rate_floor(0.05)
    }
}

impl HazardSpec {
    pub fn with_rate_floor(rate_floor: f64) -> Self {
        Self {
            baseline: Baseline::Quadratic,
            eta0: LogHazard::SigmoidProduct { i: 0, j: 1 },
            tau: LogHazard::Linear {
                intercept: 0.0,
                coef: vec![1.0, 1.0, 1.0],
            },
            adoption: AdoptionLaw::Exponential {
                intercept: 0.0,
                coef: vec![0.0, 1.0, 1.0],
                rate_floor,
            },
            censor: CensorLaw {
                rate: 0.1,
                admin: 20.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.censor.admin > 0.0) || !(self.censor.rate >= 0.0) {
            return Err(Error::InvalidInput("censoring law needs admin > 0 and rate >= 0".into()));
        }
        if let AdoptionLaw::Exponential { rate_floor, .. } = &self.adoption {
            if !(*rate_floor > 0.0) {
                return Err(Error::InvalidInput("adoption rate floor must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    pub seed: u64,
    pub spec: HazardSpec,
    /// Downstream fits use only the second covariate in the adoption model.
    pub misspecify_propensity: bool,
}

impl SimConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            p: 3,
            seed,
            spec: HazardSpec::default(),
            misspecify_propensity: false,
        }
    }

    /// Zero-based covariate indices entering the fitted adoption model.
    pub fn propensity_subset(&self) -> Vec<usize> {
        if self.misspecify_propensity {
            vec![1]
        } else {
            (0..self.p).collect()
        }
    }
}

/// Solves `H(T) = e` for the piecewise cumulative hazard.
///
/// Returns `+∞` when a bounded baseline never accumulates `e`.
pub fn event_time_for_target(
    baseline: &dyn CumulativeHazard,
    eta0: f64,
    tau: f64,
    a: f64,
    e: f64,
) -> f64 {
    let (e0, e1) = (eta0.exp(), (eta0 + tau).exp());
    let pre = if a.is_finite() { baseline.value(a) } else { f64::INFINITY };
    let target = if pre * e0 >= e {
        e / e0
    } else {
        pre + (e - pre * e0) / e1
    };
    baseline.inverse(target).unwrap_or(f64::INFINITY)
}

/// Inverse-cumulative-hazard draw of an event time from a uniform `u ∈ (0,1)`.
pub fn sample_event_time(x: &[f64], a: f64, spec: &HazardSpec, u: f64) -> f64 {
    event_time_for_target(&spec.baseline, spec.eta0.eval(x), spec.tau.eval(x), a, -u.ln())
}

pub fn adoption_time_from_uniform(rate: f64, u: f64) -> f64 {
    if rate > 0.0 {
        -u.ln() / rate
    } else {
        f64::INFINITY
    }
}

pub fn sample_adoption_time<R: Rng + ?Sized>(x: &[f64], law: &AdoptionLaw, rng: &mut R) -> f64 {
    let u: f64 = Open01.sample(rng);
    adoption_time_from_uniform(law.rate(x), u)
}

pub fn censoring_from_uniform(law: &CensorLaw, u: f64) -> f64 {
    if law.rate > 0.0 {
        (-u.ln() / law.rate).min(law.admin)
    } else {
        law.admin
    }
}

pub fn sample_censoring<R: Rng + ?Sized>(law: &CensorLaw, rng: &mut R) -> f64 {
    let u: f64 = Open01.sample(rng);
    censoring_from_uniform(law, u)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub id: u64,
    pub tau_true: f64,
    pub eta0_true: f64,
}

#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub dataset: Dataset,
    pub truth: Vec<TruthRow>,
}

impl SimulatedData {
    pub fn write_truth_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "id,tau_true,eta0_true")?;
        for t in &self.truth {
            writeln!(w, "{},{},{}", t.id, format_time(t.tau_true), format_time(t.eta0_true))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-subject generator: substream `index` of the seed.
pub fn subject_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn draw_subject(spec: &HazardSpec, id: u64, x: Vec<f64>, rng: &mut ChaCha8Rng) -> (SubjectRecord, TruthRow) {
    let a = sample_adoption_time(&x, &spec.adoption, rng);
    let u_t: f64 = Open01.sample(rng);
    let t = sample_event_time(&x, a, spec, u_t);
    let c = sample_censoring(&spec.censor, rng);
    let truth = TruthRow {
        id,
        tau_true: spec.tau.eval(&x),
        eta0_true: spec.eta0.eval(&x),
    };
    let record = SubjectRecord {
        id,
        x,
        adoption_time: a,
        observed_time: t.min(c),
        event: t <= c,
    };
    (record, truth)
}

fn column_names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("x{j}")).collect()
}

/// Draws `n` i.i.d. subjects with `X ~ N(0, I_p)`.
pub fn generate(config: &SimConfig) -> Result<SimulatedData> {
    if config.n == 0 || config.p == 0 {
        return Err(Error::InvalidInput("n and p must be positive".into()));
    }
    config.spec.validate()?;
    let pairs: Vec<(SubjectRecord, TruthRow)> = (0..config.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = subject_rng(config.seed, i as u64);
            let x: Vec<f64> = (0..config.p).map(|_| rng.sample(StandardNormal)).collect();
            draw_subject(&config.spec, i as u64 + 1, x, &mut rng)
        })
        .collect();
    finish(pairs, column_names(config.p))
}

/// Keeps the given covariates and redraws adoption, event and censoring times.
pub fn generate_from_covariates(
    spec: &HazardSpec,
    covariates: &[Vec<f64>],
    column_names: Vec<String>,
    seed: u64,
) -> Result<SimulatedData> {
    spec.validate()?;
    let pairs: Vec<(SubjectRecord, TruthRow)> = covariates
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut rng = subject_rng(seed, i as u64);
            draw_subject(spec, i as u64 + 1, x.clone(), &mut rng)
        })
        .collect();
    finish(pairs, column_names)
}

fn finish(pairs: Vec<(SubjectRecord, TruthRow)>, names: Vec<String>) -> Result<SimulatedData> {
    let (subjects, truth): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    Ok(SimulatedData {
        dataset: Dataset::new(subjects, names)?,
        truth,
    })
}

/// Covariate draws only, matching the first `p` draws of each subject stream.
pub fn draw_covariates(n: usize, p: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let mut rng = subject_rng(seed, i as u64);
            (0..p).map(|_| rng.sample(StandardNormal)).collect()
        })
        .collect()
}

/// `P(A ≤ t | Δ = 1, X = x)` under a spec, tabulated on `[0, admin]`.
///
/// Computed by quadrature: for each adoption time `a` on the grid the
/// probability that the event is observed is
/// `1 − S_T(c_max | a)·S_C(c_max) − r∫ S_T(s | a) e^{−rs} ds`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdoptionCdfTable {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl AdoptionCdfTable {
    pub fn eval(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let k = self.times.partition_point(|&s| s <= t);
        if k >= self.times.len() {
            return *self.values.last().unwrap_or(&0.0);
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let (v0, v1) = (self.values[k - 1], self.values[k]);
        v0 + (v1 - v0) * (t - t0) / (t1 - t0)
    }
}

pub fn oracle_adoption_cdf(spec: &HazardSpec, x: &[f64], grid_points: usize) -> AdoptionCdfTable {
    let m = grid_points.max(2);
    let horizon = spec.censor.admin;
    let h = horizon / (m - 1) as f64;
    let times: Vec<f64> = (0..m).map(|k| k as f64 * h).collect();
    let lam: Vec<f64> = times.iter().map(|&t| spec.baseline.value(t)).collect();
    let (e0, e1) = (spec.eta0.eval(x).exp(), (spec.eta0.eval(x) + spec.tau.eval(x)).exp());
    let rc = spec.censor.rate;
    let disc: Vec<f64> = times.iter().map(|&t| (-rc * t).exp()).collect();

    // j0[k] = ∫_0^{t_k} exp(−e0 Λ(s)) e^{−rc s} ds
    let mut j0 = vec![0.0; m];
    for k in 1..m {
        let f0 = (-e0 * lam[k - 1]).exp() * disc[k - 1];
        let f1 = (-e0 * lam[k]).exp() * disc[k];
        j0[k] = j0[k - 1] + 0.5 * h * (f0 + f1);
    }
    // tail[k] = ∫_{t_k}^{horizon} exp(−e1 (Λ(s) − Λ(t_k))) e^{−rc s} ds
    let mut tail = vec![0.0; m];
    for k in (0..m - 1).rev() {
        let decay = (-e1 * (lam[k + 1] - lam[k])).exp();
        tail[k] = 0.5 * h * (disc[k] + decay * disc[k + 1]) + decay * tail[k + 1];
    }
    let end_disc = disc[m - 1];
    let observed_given_a: Vec<f64> = (0..m)
        .map(|k| {
            let s_pre = (-e0 * lam[k]).exp();
            let s_end = s_pre * (-e1 * (lam[m - 1] - lam[k])).exp();
            let integral = j0[k] + s_pre * tail[k];
            (1.0 - s_end * end_disc - rc * integral).clamp(0.0, 1.0)
        })
        .collect();
    let observed_never = {
        let s_end = (-e0 * lam[m - 1]).exp();
        (1.0 - s_end * end_disc - rc * j0[m - 1]).clamp(0.0, 1.0)
    };

    let rate = spec.adoption.rate(x);
    let dens: Vec<f64> = times.iter().map(|&t| rate * (-rate * t).exp()).collect();
    let mut joint = vec![0.0; m];
    for k in 1..m {
        joint[k] = joint[k - 1]
            + 0.5 * h * (dens[k - 1] * observed_given_a[k - 1] + dens[k] * observed_given_a[k]);
    }
    let late = (-rate * horizon).exp() * observed_never;
    let total = joint[m - 1] + late;
    let values = if total > 0.0 {
        joint.iter().map(|v| (v / total).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; m]
    };
    AdoptionCdfTable { times, values }
}
