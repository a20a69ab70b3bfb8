//! Time-varying adoption propensity `a_t(x) = P(A ≤ t | Δ = 1, X = x)`.
//!
//! The adoption law is modelled as exponential with a linear, floored rate
//! and fitted by maximum likelihood on the subjects whose event was observed.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityKind {
    #[default]
    ExponentialLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub kind: PropensityKind,
    pub theta: Vec<f64>,
    pub intercept: f64,
    /// Zero-based covariate indices that `theta` applies to.
    pub covariate_subset: Vec<usize>,
    pub rate_floor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropensityConfig {
    pub rate_floor: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub min_adopters: usize,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        Self {
            rate_floor: 0.01,
            tol: 1e-10,
            max_iter: 200,
            min_adopters: 10,
        }
    }
}

impl PropensityModel {
    pub fn constant(rate: f64, rate_floor: f64) -> Self {
        Self {
            kind: PropensityKind::ExponentialLinear,
            theta: Vec::new(),
            intercept: rate,
            covariate_subset: Vec::new(),
            rate_floor,
        }
    }

    fn raw_rate(&self, x: &[f64]) -> f64 {
        self.intercept
            + self
                .covariate_subset
                .iter()
                .zip(&self.theta)
                .map(|(&j, t)| t * x[j])
                .sum::<f64>()
    }

    pub fn rate(&self, x: &[f64]) -> f64 {
        self.raw_rate(x).max(self.rate_floor)
    }

    /// `1 − exp(−rate(x)·t)`.
    pub fn evaluate(&self, x: &[f64], t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        (-(-self.rate(x) * t).exp_m1()).clamp(0.0, 1.0)
    }
}

struct Term {
    features: Vec<f64>,
    /// False when adoption is right-censored at `exposure`.
    adopted: bool,
    exposure: f64,
}

fn log_lik(terms: &[Term], params: &[f64], floor: f64) -> f64 {
    terms
        .iter()
        .map(|t| {
            let r = crate::coxtv::dot(&t.features, params).max(floor);
            if t.adopted {
                r.ln() - r * t.exposure
            } else {
                -r * t.exposure
            }
        })
        .sum()
}

/// Maximum likelihood fit of the floored exponential-linear adoption law.
///
/// Only subjects with `event = true` enter. Those who never adopt contribute
/// an adoption term right-censored at their observed time.
pub fn fit_propensity(data: &Dataset, subset: &[usize], config: &PropensityConfig) -> Result<PropensityModel> {
    if let Some(&j) = subset.iter().find(|&&j| j >= data.p) {
        return Err(Error::InvalidInput(format!(
            "propensity covariate index {j} out of range for p = {}",
            data.p
        )));
    }
    let terms: Vec<Term> = data
        .subjects
        .iter()
        .filter(|s| s.event)
        .map(|s| {
            let mut features = Vec::with_capacity(subset.len() + 1);
            features.push(1.0);
            features.extend(subset.iter().map(|&j| s.x[j]));
            let adopted = s.adoption_time.is_finite();
            Term {
                features,
                adopted,
                exposure: if adopted { s.adoption_time } else { s.observed_time },
            }
        })
        .collect();
    let n_adopted = terms.iter().filter(|t| t.adopted).count();
    if n_adopted == 0 {
        return Err(Error::Degenerate(
            "no observed adoptions among uncensored subjects; use a constant-rate fallback".into(),
        ));
    }
    if n_adopted < config.min_adopters {
        return Err(Error::Degenerate(format!(
            "only {n_adopted} uncensored subjects with a finite adoption time (need {})",
            config.min_adopters
        )));
    }

    let d = subset.len() + 1;
    let exposure: f64 = terms.iter().map(|t| t.exposure).sum();
    let mut params = vec![0.0; d];
    params[0] = (n_adopted as f64 / exposure).max(config.rate_floor);
    let mut cur = log_lik(&terms, &params, config.rate_floor);

    for _ in 0..config.max_iter {
        let mut grad = DVector::<f64>::zeros(d);
        let mut info = DMatrix::<f64>::zeros(d, d);
        for t in &terms {
            let raw = crate::coxtv::dot(&t.features, &params);
            if raw <= config.rate_floor {
                continue;
            }
            let g = if t.adopted { 1.0 / raw - t.exposure } else { -t.exposure };
            for j in 0..d {
                grad[j] += g * t.features[j];
                if t.adopted {
                    for k in 0..d {
                        info[(j, k)] += t.features[j] * t.features[k] / (raw * raw);
                    }
                }
            }
        }
        let scale = terms.len() as f64;
        if grad.norm() / scale < config.tol {
            break;
        }
        let step_dir = match info.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => grad.clone() / scale,
        };
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let cand: Vec<f64> = params.iter().zip(step_dir.iter()).map(|(p, s)| p + step * s).collect();
            let v = log_lik(&terms, &cand, config.rate_floor);
            if v.is_finite() && v >= cur {
                let gain = v - cur;
                params = cand;
                cur = v;
                moved = gain > config.tol * cur.abs().max(1.0);
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    if params.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("propensity fit diverged".into()));
    }
    Ok(PropensityModel {
        kind: PropensityKind::ExponentialLinear,
        intercept: params[0],
        theta: params[1..].to_vec(),
        covariate_subset: subset.to_vec(),
        rate_floor: config.rate_floor,
    })
}
