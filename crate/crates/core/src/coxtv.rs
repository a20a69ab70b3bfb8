//! Time-varying Cox partial likelihood.
//!
//! Two evaluators share the [`PartialLikelihood`] interface:
//!
//! * [`PartialLikelihoodProblem`] works on counting-process episodes whose
//!   covariates are constant within each `(start, stop]` interval. Risk-set
//!   sums are maintained by a single sweep over event times in decreasing
//!   order, adding episodes as `t` drops below their stop time and removing
//!   them once `t` drops to their start time.
//! * [`RiskTimeProblem`] handles covariates and offsets that are arbitrary
//!   functions of the risk time, recomputing every at-risk subject's linear
//!   predictor at each event time.
//!
//! Both return the log partial likelihood scaled by `1/n` (n = subjects) and
//! use Breslow's convention for tied event times.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{EpisodeRow, FitResult};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiePolicy {
    #[default]
    Breslow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Order {
    Value,
    Gradient,
    Hessian,
}

#[derive(Debug, Clone)]
pub struct Derivatives {
    pub value: f64,
    /// Empty unless at least [`Order::Gradient`] was requested.
    pub gradient: DVector<f64>,
    /// Empty unless [`Order::Hessian`] was requested.
    pub hessian: DMatrix<f64>,
}

pub trait PartialLikelihood: Sync {
    fn dim(&self) -> usize;
    fn n_subjects(&self) -> usize;
    fn n_events(&self) -> usize;
    fn evaluate(&self, beta: &[f64], order: Order) -> Result<Derivatives>;
}

pub fn log_partial_likelihood<P: PartialLikelihood + ?Sized>(problem: &P, beta: &[f64]) -> Result<f64> {
    Ok(problem.evaluate(beta, Order::Value)?.value)
}

pub fn gradient<P: PartialLikelihood + ?Sized>(problem: &P, beta: &[f64]) -> Result<Vec<f64>> {
    Ok(problem.evaluate(beta, Order::Gradient)?.gradient.as_slice().to_vec())
}

pub fn hessian<P: PartialLikelihood + ?Sized>(problem: &P, beta: &[f64]) -> Result<DMatrix<f64>> {
    Ok(problem.evaluate(beta, Order::Hessian)?.hessian)
}

/// Running risk-set sums `S0 = sum w`, `S1 = sum w z`, `S2 = sum w z z'`
/// with `w = exp(lp - shift)`.
struct RiskSums {
    p: usize,
    order: Order,
    s0: f64,
    s1: Vec<f64>,
    s2: Vec<f64>,
    shift: f64,
    active: usize,
}

impl RiskSums {
    fn new(p: usize, order: Order) -> Self {
        Self {
            p,
            order,
            s0: 0.0,
            s1: vec![0.0; if order >= Order::Gradient { p } else { 0 }],
            s2: vec![0.0; if order >= Order::Hessian { p * p } else { 0 }],
            shift: f64::NEG_INFINITY,
            active: 0,
        }
    }

    fn clear(&mut self) {
        self.s0 = 0.0;
        self.s1.iter_mut().for_each(|v| *v = 0.0);
        self.s2.iter_mut().for_each(|v| *v = 0.0);
        self.shift = f64::NEG_INFINITY;
        self.active = 0;
    }

    fn rebase(&mut self, shift: f64) {
        if shift <= self.shift {
            return;
        }
        if self.active > 0 {
            let f = (self.shift - shift).exp();
            self.s0 *= f;
            self.s1.iter_mut().for_each(|v| *v *= f);
            self.s2.iter_mut().for_each(|v| *v *= f);
        }
        self.shift = shift;
    }

    fn accumulate(&mut self, lp: f64, z: &[f64], sign: f64) {
        let w = sign * (lp - self.shift).exp();
        self.s0 += w;
        if self.order >= Order::Gradient {
            for (s, zj) in self.s1.iter_mut().zip(z) {
                *s += w * zj;
            }
        }
        if self.order >= Order::Hessian {
            let p = self.p;
            for j in 0..p {
                let wz = w * z[j];
                if wz == 0.0 {
                    continue;
                }
                let row = &mut self.s2[j * p..j * p + p];
                for k in j..p {
                    row[k] += wz * z[k];
                }
            }
        }
    }

    fn add(&mut self, lp: f64, z: &[f64]) {
        self.rebase(lp);
        self.accumulate(lp, z, 1.0);
        self.active += 1;
    }

    fn remove(&mut self, lp: f64, z: &[f64]) {
        self.accumulate(lp, z, -1.0);
        self.active -= 1;
        if self.active == 0 {
            self.clear();
        }
    }

    /// Adds one Breslow event-group contribution (`d` events) to the totals.
    fn contribute(&self, d: f64, out: &mut Derivatives) -> Result<()> {
        if !(self.s0 > 0.0) || !self.s0.is_finite() {
            return Err(Error::Numerical(format!(
                "risk-set weight sum is {} (overflowing linear predictor?)",
                self.s0
            )));
        }
        out.value -= d * (self.s0.ln() + self.shift);
        if self.order >= Order::Gradient {
            for (g, s) in out.gradient.iter_mut().zip(&self.s1) {
                *g -= d * s / self.s0;
            }
        }
        if self.order >= Order::Hessian {
            let p = self.p;
            for j in 0..p {
                let mj = self.s1[j] / self.s0;
                for k in j..p {
                    let mk = self.s1[k] / self.s0;
                    let v = d * (self.s2[j * p + k] / self.s0 - mj * mk);
                    out.hessian[(j, k)] -= v;
                }
            }
        }
        Ok(())
    }
}

fn empty_derivatives(p: usize, order: Order) -> Derivatives {
    Derivatives {
        value: 0.0,
        gradient: DVector::zeros(if order >= Order::Gradient { p } else { 0 }),
        hessian: if order >= Order::Hessian {
            DMatrix::zeros(p, p)
        } else {
            DMatrix::zeros(0, 0)
        },
    }
}

fn finish(mut out: Derivatives, n: usize, order: Order) -> Result<Derivatives> {
    let scale = 1.0 / n as f64;
    out.value *= scale;
    out.gradient *= scale;
    if order >= Order::Hessian {
        let p = out.hessian.nrows();
        for j in 0..p {
            for k in j..p {
                let v = out.hessian[(j, k)] * scale;
                out.hessian[(j, k)] = v;
                out.hessian[(k, j)] = v;
            }
        }
    }
    if !out.value.is_finite() || out.gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical("non-finite partial likelihood".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct EventGroup {
    time: f64,
    rows: Vec<usize>,
}

/// Episodes in counting-process form with a fixed design and offsets.
#[derive(Debug, Clone)]
pub struct PartialLikelihoodProblem {
    subject: Vec<u64>,
    start: Vec<f64>,
    stop: Vec<f64>,
    event: Vec<bool>,
    design: Vec<f64>,
    width: usize,
    offsets: Vec<f64>,
    tie_policy: TiePolicy,
    n_subjects: usize,
    n_events: usize,
    by_stop: Vec<usize>,
    by_start: Vec<usize>,
    groups: Vec<EventGroup>,
}

impl PartialLikelihoodProblem {
    /// Builds a problem from episodes, taking each row's `z` and `offset`.
    pub fn from_episodes(rows: &[EpisodeRow]) -> Result<Self> {
        let width = rows.first().map_or(0, |r| r.z.len());
        let mut design = Vec::with_capacity(rows.len() * width);
        for r in rows {
            if r.z.len() != width {
                return Err(Error::InvalidInput(format!(
                    "episode of subject {} has {} covariates, expected {width}",
                    r.subject_id,
                    r.z.len()
                )));
            }
            design.extend_from_slice(&r.z);
        }
        Self::from_parts(
            rows.iter().map(|r| r.subject_id).collect(),
            rows.iter().map(|r| r.start).collect(),
            rows.iter().map(|r| r.stop).collect(),
            rows.iter().map(|r| r.event).collect(),
            design,
            width,
            rows.iter().map(|r| r.offset).collect(),
        )
    }

    fn from_parts(
        subject: Vec<u64>,
        start: Vec<f64>,
        stop: Vec<f64>,
        event: Vec<bool>,
        design: Vec<f64>,
        width: usize,
        offsets: Vec<f64>,
    ) -> Result<Self> {
        let m = subject.len();
        if design.len() != m * width || offsets.len() != m {
            return Err(Error::InvalidInput("design/offset size mismatch".into()));
        }
        for r in 0..m {
            if !(start[r] < stop[r]) || !stop[r].is_finite() || start[r] < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "episode ({}, {}] of subject {} is not a valid finite interval",
                    start[r], stop[r], subject[r]
                )));
            }
            if !offsets[r].is_finite() {
                return Err(Error::InvalidInput(format!("non-finite offset for subject {}", subject[r])));
            }
        }
        if design.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite design entry".into()));
        }

        let mut by_stop: Vec<usize> = (0..m).collect();
        by_stop.sort_by(|&a, &b| stop[b].total_cmp(&stop[a]).then(subject[a].cmp(&subject[b])));
        let mut by_start: Vec<usize> = (0..m).collect();
        by_start.sort_by(|&a, &b| start[b].total_cmp(&start[a]).then(subject[a].cmp(&subject[b])));

        let mut groups: Vec<EventGroup> = Vec::new();
        for &r in by_stop.iter().filter(|&&r| event[r]) {
            match groups.last_mut() {
                Some(g) if g.time == stop[r] => g.rows.push(r),
                _ => groups.push(EventGroup {
                    time: stop[r],
                    rows: vec![r],
                }),
            }
        }
        let n_events = event.iter().filter(|&&e| e).count();
        let mut ids = subject.clone();
        ids.sort_unstable();
        ids.dedup();

        Ok(Self {
            n_subjects: ids.len(),
            subject,
            start,
            stop,
            event,
            design,
            width,
            offsets,
            tie_policy: TiePolicy::Breslow,
            n_events,
            by_stop,
            by_start,
            groups,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.subject.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn tie_policy(&self) -> TiePolicy {
        self.tie_policy
    }

    pub fn design_row(&self, r: usize) -> &[f64] {
        &self.design[r * self.width..(r + 1) * self.width]
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn subject_ids(&self) -> &[u64] {
        &self.subject
    }

    /// Reassembles the episode rows, design and offsets included.
    pub fn episodes(&self) -> Vec<EpisodeRow> {
        (0..self.n_rows())
            .map(|r| EpisodeRow {
                subject_id: self.subject[r],
                start: self.start[r],
                stop: self.stop[r],
                event: self.event[r],
                treated: false,
                z: self.design_row(r).to_vec(),
                offset: self.offsets[r],
            })
            .collect()
    }

    /// Restriction to the episodes of subjects accepted by `keep`.
    pub fn subset(&self, mut keep: impl FnMut(u64) -> bool) -> Result<Self> {
        let rows: Vec<usize> = (0..self.n_rows()).filter(|&r| keep(self.subject[r])).collect();
        let mut design = Vec::with_capacity(rows.len() * self.width);
        for &r in &rows {
            design.extend_from_slice(self.design_row(r));
        }
        Self::from_parts(
            rows.iter().map(|&r| self.subject[r]).collect(),
            rows.iter().map(|&r| self.start[r]).collect(),
            rows.iter().map(|&r| self.stop[r]).collect(),
            rows.iter().map(|&r| self.event[r]).collect(),
            design,
            self.width,
            rows.iter().map(|&r| self.offsets[r]).collect(),
        )
    }

    pub fn with_offsets(&self, offsets: Vec<f64>) -> Result<Self> {
        if offsets.len() != self.n_rows() || offsets.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidInput("offset vector does not match episodes".into()));
        }
        Ok(Self {
            offsets,
            ..self.clone()
        })
    }

    fn linear_predictor(&self, beta: &[f64]) -> Result<Vec<f64>> {
        if beta.len() != self.width {
            return Err(Error::InvalidInput(format!(
                "beta has length {}, design has {} columns",
                beta.len(),
                self.width
            )));
        }
        let lp: Vec<f64> = (0..self.n_rows())
            .map(|r| self.offsets[r] + dot(self.design_row(r), beta))
            .collect();
        if lp.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite linear predictor".into()));
        }
        Ok(lp)
    }

    /// Sweeps event times in decreasing order, calling `visit` with the
    /// risk-set sums in effect at each event time.
    fn sweep(
        &self,
        lp: &[f64],
        order: Order,
        mut visit: impl FnMut(&EventGroup, &RiskSums) -> Result<()>,
    ) -> Result<()> {
        let m = self.n_rows();
        let mut sums = RiskSums::new(self.width, order);
        let (mut ia, mut ir) = (0, 0);
        for g in &self.groups {
            while ia < m && self.stop[self.by_stop[ia]] >= g.time {
                let r = self.by_stop[ia];
                sums.add(lp[r], self.design_row(r));
                ia += 1;
            }
            while ir < m && self.start[self.by_start[ir]] >= g.time {
                let r = self.by_start[ir];
                sums.remove(lp[r], self.design_row(r));
                ir += 1;
            }
            visit(g, &sums)?;
        }
        Ok(())
    }

    /// Breslow estimate of the baseline cumulative hazard at `beta`, i.e. the
    /// cumulative sum over event times of `d / sum_{at risk} exp(lp)`.
    pub fn breslow_baseline(&self, beta: &[f64]) -> Result<StepFunction> {
        let lp = self.linear_predictor(beta)?;
        let mut steps = Vec::with_capacity(self.groups.len());
        self.sweep(&lp, Order::Value, |g, sums| {
            let denom = sums.s0 * sums.shift.exp();
            if !(denom > 0.0 && denom.is_finite()) {
                return Err(Error::Numerical("baseline hazard denominator not finite".into()));
            }
            steps.push((g.time, g.rows.len() as f64 / denom));
            Ok(())
        })?;
        steps.reverse();
        let mut acc = 0.0;
        let (times, values) = steps
            .into_iter()
            .map(|(t, inc)| {
                acc += inc;
                (t, acc)
            })
            .unzip();
        StepFunction::new(times, values)
    }
}

impl PartialLikelihood for PartialLikelihoodProblem {
    fn dim(&self) -> usize {
        self.width
    }

    fn n_subjects(&self) -> usize {
        self.n_subjects
    }

    fn n_events(&self) -> usize {
        self.n_events
    }

    fn evaluate(&self, beta: &[f64], order: Order) -> Result<Derivatives> {
        let lp = self.linear_predictor(beta)?;
        let mut out = empty_derivatives(self.width, order);
        self.sweep(&lp, order, |g, sums| {
            for &r in &g.rows {
                out.value += lp[r];
                if order >= Order::Gradient {
                    for (gj, zj) in out.gradient.iter_mut().zip(self.design_row(r)) {
                        *gj += zj;
                    }
                }
            }
            sums.contribute(g.rows.len() as f64, &mut out)
        })?;
        finish(out, self.n_subjects.max(1), order)
    }
}

/// Right-continuous non-decreasing step function, zero before the first jump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl StepFunction {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len()
            || times.windows(2).any(|w| !(w[0] < w[1]))
            || values.windows(2).any(|w| w[0] > w[1])
            || values.first().is_some_and(|&v| v < 0.0)
        {
            return Err(Error::InvalidInput(
                "step function needs increasing times and non-decreasing values".into(),
            ));
        }
        Ok(Self { times, values })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            0.0
        } else {
            self.values[k - 1]
        }
    }

    /// Smallest `t` with `value(t) >= y`, or `None` past the last jump.
    pub fn inverse(&self, y: f64) -> Option<f64> {
        if y <= 0.0 {
            return Some(0.0);
        }
        let k = self.values.partition_point(|&v| v < y);
        self.times.get(k).copied()
    }
}

/// A subject-indexed source of risk-time dependent covariates.
pub trait RiskTimeCovariates: Send + Sync {
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn observed_time(&self, i: usize) -> f64;
    fn event(&self, i: usize) -> bool;
    /// Writes subject `i`'s regression covariates at risk time `t` into `z`
    /// and returns its offset at `t`.
    fn at(&self, i: usize, t: f64, z: &mut [f64]) -> f64;
    /// Scalar diagnostic averaged over risk sets by [`RiskTimeProblem::mean_residual`].
    fn residual(&self, _i: usize, _t: f64) -> f64 {
        0.0
    }
}

struct Stratum {
    covariates: Box<dyn RiskTimeCovariates>,
    order: Vec<usize>,
    /// (event time, subjects with an event at that time, risk-set size)
    groups: Vec<(f64, Vec<usize>, usize)>,
}

/// Partial likelihood whose covariates are re-evaluated at every event time.
///
/// Subjects are at risk at `t` iff their observed time is at least `t`.
/// Each stratum has its own risk sets; the objective is the sum over strata,
/// scaled by the total number of subjects.
pub struct RiskTimeProblem {
    strata: Vec<Stratum>,
    dim: usize,
    n_subjects: usize,
    n_events: usize,
}

impl RiskTimeProblem {
    pub fn new(strata: Vec<Box<dyn RiskTimeCovariates>>) -> Result<Self> {
        let dim = strata.first().map_or(0, |s| s.dim());
        let mut built = Vec::with_capacity(strata.len());
        let (mut n_subjects, mut n_events) = (0, 0);
        for covariates in strata {
            if covariates.dim() != dim {
                return Err(Error::InvalidInput("strata disagree on covariate dimension".into()));
            }
            let n = covariates.len();
            for i in 0..n {
                let u = covariates.observed_time(i);
                if !(u > 0.0 && u.is_finite()) {
                    return Err(Error::InvalidInput(format!("observed time {u} is not positive")));
                }
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                covariates
                    .observed_time(b)
                    .total_cmp(&covariates.observed_time(a))
                    .then(a.cmp(&b))
            });
            let mut groups: Vec<(f64, Vec<usize>, usize)> = Vec::new();
            for (pos, &i) in order.iter().enumerate() {
                let u = covariates.observed_time(i);
                // risk set at u: every subject with observed time >= u
                let risk = pos + 1;
                match groups.last_mut() {
                    Some(g) if g.0 == u => {
                        g.2 = risk;
                        if covariates.event(i) {
                            g.1.push(i);
                        }
                    }
                    _ => groups.push((u, if covariates.event(i) { vec![i] } else { vec![] }, risk)),
                }
            }
            groups.retain(|g| !g.1.is_empty());
            n_subjects += n;
            n_events += groups.iter().map(|g| g.1.len()).sum::<usize>();
            built.push(Stratum {
                covariates,
                order,
                groups,
            });
        }
        Ok(Self {
            strata: built,
            dim,
            n_subjects,
            n_events,
        })
    }

    /// Average over event times of the risk-set mean of
    /// [`RiskTimeCovariates::residual`].
    pub fn mean_residual(&self) -> f64 {
        let (mut acc, mut count) = (0.0, 0usize);
        for s in &self.strata {
            for (t, _, k) in &s.groups {
                let sum: f64 = s.order[..*k].iter().map(|&i| s.covariates.residual(i, *t)).sum();
                acc += sum / *k as f64;
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            acc / count as f64
        }
    }
}

impl PartialLikelihood for RiskTimeProblem {
    fn dim(&self) -> usize {
        self.dim
    }

    fn n_subjects(&self) -> usize {
        self.n_subjects
    }

    fn n_events(&self) -> usize {
        self.n_events
    }

    fn evaluate(&self, beta: &[f64], order: Order) -> Result<Derivatives> {
        let p = self.dim;
        if beta.len() != p {
            return Err(Error::InvalidInput(format!(
                "beta has length {}, expected {p}",
                beta.len()
            )));
        }
        let mut out = empty_derivatives(p, order);
        let mut zbuf: Vec<f64> = Vec::new();
        let mut lpbuf: Vec<f64> = Vec::new();
        let mut ev_z = vec![0.0; p];
        for s in &self.strata {
            for (t, events, k) in &s.groups {
                let risk = &s.order[..*k];
                zbuf.resize(risk.len() * p, 0.0);
                lpbuf.clear();
                for (slot, &i) in risk.iter().enumerate() {
                    let z = &mut zbuf[slot * p..(slot + 1) * p];
                    let off = s.covariates.at(i, *t, z);
                    lpbuf.push(off + dot(z, beta));
                }
                let shift = lpbuf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if !shift.is_finite() {
                    return Err(Error::Numerical("non-finite linear predictor".into()));
                }
                let mut sums = RiskSums::new(p, order);
                sums.shift = shift;
                for (slot, &lp) in lpbuf.iter().enumerate() {
                    sums.accumulate(lp, &zbuf[slot * p..(slot + 1) * p], 1.0);
                }
                sums.active = risk.len();
                for &i in events {
                    let off = s.covariates.at(i, *t, &mut ev_z);
                    out.value += off + dot(&ev_z, beta);
                    if order >= Order::Gradient {
                        for (g, zj) in out.gradient.iter_mut().zip(&ev_z) {
                            *g += zj;
                        }
                    }
                }
                sums.contribute(events.len() as f64, &mut out)?;
            }
        }
        finish(out, self.n_subjects.max(1), order)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    pub standard_errors: bool,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            max_halvings: 20,
            standard_errors: false,
        }
    }
}

/// Newton-Raphson maximisation with step halving.
///
/// Converges when the gradient norm and the relative change of the objective
/// both fall below `tol`. A Hessian that is not negative definite triggers a
/// plain gradient-ascent step for that iteration.
pub fn newton_fit<P: PartialLikelihood + ?Sized>(
    problem: &P,
    beta0: &[f64],
    config: &NewtonConfig,
) -> Result<FitResult> {
    if problem.n_events() == 0 {
        return Err(Error::Degenerate("no events; partial likelihood is constant".into()));
    }
    let p = problem.dim();
    if beta0.len() != p {
        return Err(Error::InvalidInput(format!(
            "starting value has length {}, expected {p}",
            beta0.len()
        )));
    }
    let mut beta = DVector::from_column_slice(beta0);
    let mut cur = problem.evaluate(beta.as_slice(), Order::Hessian)?;
    let mut rel_change = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=config.max_iter {
        iterations = iter;
        let gnorm = cur.gradient.norm();
        if gnorm < config.tol && (iter == 1 || rel_change < config.tol) {
            converged = true;
            break;
        }
        let neg_h = -&cur.hessian;
        let direction = match neg_h.clone().cholesky() {
            Some(ch) => ch.solve(&cur.gradient),
            None => cur.gradient.clone(),
        };

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=config.max_halvings {
            let cand = &beta + step * &direction;
            match problem.evaluate(cand.as_slice(), Order::Value) {
                Ok(d) if d.value >= cur.value - 1e-14 * (1.0 + cur.value.abs()) => {
                    accepted = Some(cand);
                    break;
                }
                _ => step *= 0.5,
            }
        }
        let Some(next) = accepted else {
            // no ascent possible at working precision
            converged = gnorm < config.tol.sqrt() * 1e-2;
            break;
        };
        let next_eval = problem.evaluate(next.as_slice(), Order::Hessian)?;
        rel_change = (next_eval.value - cur.value).abs() / cur.value.abs().max(f64::MIN_POSITIVE);
        beta = next;
        cur = next_eval;
    }
    if !converged && iterations == config.max_iter {
        let gnorm = cur.gradient.norm();
        converged = gnorm < config.tol && rel_change < config.tol;
    }

    let standard_errors = if config.standard_errors {
        let info = -&cur.hessian * problem.n_subjects() as f64;
        let inv = info
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .or_else(|| info.try_inverse())
            .ok_or_else(|| Error::Numerical("information matrix is singular".into()))?;
        Some((0..p).map(|j| inv[(j, j)].max(0.0).sqrt()).collect())
    } else {
        None
    };

    Ok(FitResult {
        beta: beta.as_slice().to_vec(),
        log_pl: cur.value,
        n_iterations: iterations,
        converged,
        gradient_norm: cur.gradient.norm(),
        standard_errors,
    })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
