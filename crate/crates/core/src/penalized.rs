//! Lasso-penalized time-varying Cox regression.
//!
//! Maximizes `(1/n)·logPL(β) − λ Σ_j f_j |β_j|` by proximal Newton: each
//! outer step builds the quadratic model of the partial likelihood from the
//! exact Hessian and solves the penalized quadratic by cyclic coordinate
//! descent with soft thresholding.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coxtv::{Order, PartialLikelihood, PartialLikelihoodProblem};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LassoConfig {
    /// Stop once no coefficient moves by more than this.
    pub tol: f64,
    pub max_outer: usize,
    pub max_sweeps: usize,
}

impl Default for LassoConfig {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_outer: 100,
            max_sweeps: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    pub beta: Vec<f64>,
    pub lambda: f64,
    pub objective: f64,
    pub n_outer: usize,
    pub converged: bool,
}

fn soft(u: f64, k: f64) -> f64 {
    if u > k {
        u - k
    } else if u < -k {
        u + k
    } else {
        0.0
    }
}

fn penalty(beta: &[f64], lambda: f64, pf: &[f64]) -> f64 {
    lambda * beta.iter().zip(pf).map(|(b, f)| f * b.abs()).sum::<f64>()
}

/// Maximizes `gᵀd + ½dᵀHd − λΣf_j|β_j + d_j|` over `b = β + d`.
fn solve_quadratic(
    beta: &[f64],
    g: &[f64],
    h: &DMatrix<f64>,
    lambda: f64,
    pf: &[f64],
    config: &LassoConfig,
) -> Vec<f64> {
    let p = beta.len();
    let mut b = beta.to_vec();
    let mut hd = vec![0.0; p];
    let inner_tol = config.tol * 1e-2;

    let update = |j: usize, b: &mut Vec<f64>, hd: &mut Vec<f64>| -> f64 {
        let c = -h[(j, j)];
        if c <= 1e-14 {
            return 0.0;
        }
        let r = g[j] + hd[j] + c * (b[j] - beta[j]);
        let new = soft(r + c * beta[j], lambda * pf[j]) / c;
        let delta = new - b[j];
        if delta != 0.0 {
            for k in 0..p {
                hd[k] += delta * h[(k, j)];
            }
            b[j] = new;
        }
        delta.abs()
    };

    for _ in 0..config.max_sweeps {
        let mut change = 0.0f64;
        for j in 0..p {
            change = change.max(update(j, &mut b, &mut hd));
        }
        if change < inner_tol {
            break;
        }
        if let Some(exact) = active_set_solution(beta, g, h, lambda, pf, &b) {
            return exact;
        }
        // cycle the active set to convergence before the next full sweep
        let active: Vec<usize> = (0..p).filter(|&j| b[j] != 0.0).collect();
        for _ in 0..config.max_sweeps {
            let mut c = 0.0f64;
            for &j in &active {
                c = c.max(update(j, &mut b, &mut hd));
            }
            if c < inner_tol {
                break;
            }
        }
    }
    b
}

/// Solves the quadratic exactly on the support and signs of `b`, returning
/// the solution only if it keeps those signs and satisfies the optimality
/// conditions off the support.
fn active_set_solution(
    beta: &[f64],
    g: &[f64],
    h: &DMatrix<f64>,
    lambda: f64,
    pf: &[f64],
    b: &[f64],
) -> Option<Vec<f64>> {
    let p = beta.len();
    let active: Vec<usize> = (0..p).filter(|&j| b[j] != 0.0).collect();
    let mut d: Vec<f64> = (0..p).map(|j| if b[j] != 0.0 { 0.0 } else { -beta[j] }).collect();
    if !active.is_empty() {
        let q = active.len();
        let mut neg_h = DMatrix::<f64>::zeros(q, q);
        let mut rhs = nalgebra::DVector::<f64>::zeros(q);
        for (a, &j) in active.iter().enumerate() {
            let mut r = g[j] - lambda * pf[j] * b[j].signum();
            for k in 0..p {
                if b[k] == 0.0 {
                    r += h[(j, k)] * d[k];
                }
            }
            rhs[a] = r;
            for (c, &k) in active.iter().enumerate() {
                neg_h[(a, c)] = -h[(j, k)];
            }
        }
        let sol = neg_h.cholesky()?.solve(&rhs);
        for (a, &j) in active.iter().enumerate() {
            d[j] = sol[a];
        }
    }
    let out: Vec<f64> = (0..p).map(|j| beta[j] + d[j]).collect();
    for j in 0..p {
        if b[j] != 0.0 {
            if out[j].signum() != b[j].signum() || out[j] == 0.0 {
                return None;
            }
        } else {
            let grad = g[j] + (0..p).map(|k| h[(j, k)] * d[k]).sum::<f64>();
            if grad.abs() > lambda * pf[j] * (1.0 + 1e-9) + 1e-12 {
                return None;
            }
        }
    }
    Some(out)
}

/// Lasso fit at a single `λ`; `penalty_factors[j] = 0` leaves `β_j` unpenalized.
pub fn lasso_cox_fit(
    problem: &PartialLikelihoodProblem,
    lambda: f64,
    penalty_factors: &[f64],
    beta0: Option<&[f64]>,
    config: &LassoConfig,
) -> Result<LassoFit> {
    let p = problem.dim();
    if penalty_factors.len() != p {
        return Err(Error::InvalidInput(format!(
            "{} penalty factors for {p} coefficients",
            penalty_factors.len()
        )));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidInput(format!("lambda must be non-negative, got {lambda}")));
    }
    if problem.n_events() == 0 {
        return Err(Error::Degenerate("no events".into()));
    }
    let mut beta = beta0.map_or_else(|| vec![0.0; p], |b| b.to_vec());
    let mut cur = problem.evaluate(&beta, Order::Hessian)?;
    let mut objective = cur.value - penalty(&beta, lambda, penalty_factors);
    let mut converged = false;
    let mut n_outer = 0;

    for outer in 1..=config.max_outer {
        n_outer = outer;
        let target = solve_quadratic(
            &beta,
            cur.gradient.as_slice(),
            &cur.hessian,
            lambda,
            penalty_factors,
            config,
        );
        let dir: Vec<f64> = target.iter().zip(&beta).map(|(t, b)| t - b).collect();
        let max_dir = dir.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        if max_dir < config.tol {
            beta = target;
            converged = true;
            break;
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = beta.iter().zip(&dir).map(|(b, d)| b + step * d).collect();
            if let Ok(v) = problem.evaluate(&cand, Order::Value) {
                let obj = v.value - penalty(&cand, lambda, penalty_factors);
                if obj >= objective - 1e-13 * objective.abs().max(1.0) {
                    accepted = Some((cand, obj));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((cand, obj)) = accepted else {
            return Err(Error::Numerical(format!(
                "lasso line search failed at lambda = {lambda:.3e}"
            )));
        };
        beta = cand;
        objective = obj;
        if max_dir * step < config.tol {
            converged = true;
            break;
        }
        cur = problem.evaluate(&beta, Order::Hessian)?;
        if cur.gradient.iter().any(|g| g.abs() > 1e12) {
            return Err(Error::Numerical("lasso coefficients diverging".into()));
        }
    }
    let objective = problem.evaluate(&beta, Order::Value)?.value - penalty(&beta, lambda, penalty_factors);
    Ok(LassoFit {
        beta,
        lambda,
        objective,
        n_outer,
        converged,
    })
}

/// Smallest `λ` at which every penalized coefficient is zero, together with
/// the fit of the unpenalized coefficients at that point.
pub fn lambda_max(
    problem: &PartialLikelihoodProblem,
    penalty_factors: &[f64],
    config: &LassoConfig,
) -> Result<(f64, Vec<f64>)> {
    // An infinite λ pins the penalized coefficients at zero.
    let null = lasso_cox_fit(problem, f64::MAX, penalty_factors, None, config)?;
    let g = problem.evaluate(&null.beta, Order::Gradient)?.gradient;
    let lmax = g
        .iter()
        .zip(penalty_factors)
        .filter(|(_, &f)| f > 0.0)
        .map(|(g, f)| g.abs() / f)
        .fold(0.0f64, f64::max);
    Ok((lmax, null.beta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub k_folds: usize,
    pub n_lambda: usize,
    pub lambda_min_ratio: f64,
    pub seed: u64,
    pub max_fold_retries: usize,
    pub lasso: LassoConfig,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            k_folds: 10,
            n_lambda: 50,
            lambda_min_ratio: 1e-3,
            seed: 0,
            max_fold_retries: 10,
            lasso: LassoConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoPath {
    pub lambdas: Vec<f64>,
    pub betas: Vec<Vec<f64>>,
    pub cv_deviance: Vec<f64>,
    pub lambda_selected: f64,
    pub selected_index: usize,
}

impl LassoPath {
    pub fn selected_beta(&self) -> &[f64] {
        &self.betas[self.selected_index]
    }
}

pub fn lambda_sequence(lmax: f64, n: usize, min_ratio: f64) -> Vec<f64> {
    if n == 1 {
        return vec![lmax];
    }
    let (hi, lo) = (lmax.ln(), (lmax * min_ratio).ln());
    let mut out: Vec<f64> = (0..n)
        .map(|k| (hi + (lo - hi) * k as f64 / (n - 1) as f64).exp())
        .collect();
    out[0] = lmax;
    out
}

/// Warm-started path fit; stops at the first `λ` whose fit fails.
pub fn fit_path(
    problem: &PartialLikelihoodProblem,
    lambdas: &[f64],
    penalty_factors: &[f64],
    start: &[f64],
    config: &LassoConfig,
) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(lambdas.len());
    let mut warm = start.to_vec();
    for &lam in lambdas {
        match lasso_cox_fit(problem, lam, penalty_factors, Some(&warm), config) {
            Ok(fit) if fit.beta.iter().all(|b| b.is_finite()) => {
                warm = fit.beta.clone();
                out.push(fit.beta);
            }
            _ => {
                log::debug!("lasso path truncated at lambda = {lam:.3e}");
                break;
            }
        }
    }
    out
}

/// Subject-level fold labels from a seeded shuffle of the sorted ids.
pub fn assign_folds(ids: &[u64], k: usize, seed: u64) -> Vec<(u64, usize)> {
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let mut out: Vec<(u64, usize)> = sorted.into_iter().enumerate().map(|(i, id)| (id, i % k)).collect();
    out.sort_unstable();
    out
}

fn fold_of(labels: &[(u64, usize)], id: u64) -> usize {
    let pos = labels.binary_search_by_key(&id, |&(i, _)| i).expect("id present in fold table");
    labels[pos].1
}

/// K-fold cross-validated `λ` by grouped partial-likelihood deviance.
///
/// For fold `k` with training fit `β_{−k}`, the held-out contribution is
/// `logPL(β_{−k}) − logPL_{−k}(β_{−k})` on the unscaled scale; the deviance
/// is `−2` times the sum over folds. Min rule.
pub fn cv_select_lambda(
    problem: &PartialLikelihoodProblem,
    penalty_factors: &[f64],
    config: &CvConfig,
) -> Result<LassoPath> {
    if config.k_folds < 2 {
        return Err(Error::InvalidInput("k_folds must be at least 2".into()));
    }
    let ids = problem.subject_ids();
    let episodes = problem.episodes();
    let mut labels = None;
    for attempt in 0..config.max_fold_retries.max(1) {
        let cand = assign_folds(ids, config.k_folds, config.seed.wrapping_add(attempt as u64));
        let mut has_event = vec![false; config.k_folds];
        for e in episodes.iter().filter(|e| e.event) {
            has_event[fold_of(&cand, e.subject_id)] = true;
        }
        if has_event.iter().all(|&h| h) {
            labels = Some(cand);
            break;
        }
    }
    let labels = labels.ok_or_else(|| {
        Error::Degenerate(format!(
            "could not draw {} folds that each contain an event",
            config.k_folds
        ))
    })?;

    let (lmax, null_beta) = lambda_max(problem, penalty_factors, &config.lasso)?;
    let lmax = if lmax > 0.0 { lmax } else { 1e-8 };
    let lambdas = lambda_sequence(lmax, config.n_lambda, config.lambda_min_ratio);
    let full_betas = fit_path(problem, &lambdas, penalty_factors, &null_beta, &config.lasso);
    if full_betas.is_empty() {
        return Err(Error::Numerical("lasso path failed at lambda_max".into()));
    }

    let n_full = problem.n_subjects() as f64;
    let fold_scores: Vec<Vec<f64>> = (0..config.k_folds)
        .into_par_iter()
        .map(|k| -> Result<Vec<f64>> {
            let train = problem.subset(|id| fold_of(&labels, id) != k)?;
            let start = lambda_max(&train, penalty_factors, &config.lasso)
                .map(|(_, b)| b)
                .unwrap_or_else(|_| null_beta.clone());
            let betas = fit_path(&train, &lambdas, penalty_factors, &start, &config.lasso);
            let n_train = train.n_subjects() as f64;
            betas
                .iter()
                .map(|b| {
                    let full = problem.evaluate(b, Order::Value)?.value * n_full;
                    let inner = train.evaluate(b, Order::Value)?.value * n_train;
                    Ok(full - inner)
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let usable = fold_scores
        .iter()
        .map(Vec::len)
        .chain(std::iter::once(full_betas.len()))
        .min()
        .unwrap_or(0);
    if usable == 0 {
        return Err(Error::Numerical("no lambda fitted on every fold".into()));
    }
    let cv_deviance: Vec<f64> = (0..usable)
        .map(|i| -2.0 * fold_scores.iter().map(|f| f[i]).sum::<f64>())
        .collect();
    let selected_index = cv_deviance
        .iter()
        .enumerate()
        .fold(0, |best, (i, &d)| if d < cv_deviance[best] { i } else { best });
    let lambdas = lambdas[..usable].to_vec();
    let mut betas = full_betas;
    betas.truncate(usable);
    Ok(LassoPath {
        lambda_selected: lambdas[selected_index],
        lambdas,
        betas,
        cv_deviance,
        selected_index,
    })
}
