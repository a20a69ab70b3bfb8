//! Covariate bases: identity, or natural cubic splines plus squares and
//! pairwise products, optionally standardized with training constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    Linear,
    Complex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub kind: BasisKind,
    pub spline_df: usize,
    pub include_pairwise: bool,
    pub standardize: bool,
}

impl BasisSpec {
    pub fn linear() -> Self {
        Self {
            kind: BasisKind::Linear,
            spline_df: 3,
            include_pairwise: false,
            standardize: false,
        }
    }

    pub fn complex() -> Self {
        Self {
            kind: BasisKind::Complex,
            spline_df: 3,
            include_pairwise: true,
            standardize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.spline_df < 2 {
            return Err(Error::InvalidInput(format!(
                "spline_df must be at least 2, got {}",
                self.spline_df
            )));
        }
        Ok(())
    }
}

/// Type-7 sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Natural cubic spline in truncated-power form.
///
/// With knots `ξ_1 < … < ξ_K` the basis is `x` followed by `d_k − d_{K−1}`
/// for `k = 1..K−2`, where
/// `d_k(x) = ((x − ξ_k)₊³ − (x − ξ_K)₊³) / (ξ_K − ξ_k)`. Every column is
/// linear beyond the boundary knots.
pub fn natural_spline(x: f64, knots: &[f64], out: &mut Vec<f64>) {
    out.push(x);
    let k = knots.len();
    if k < 3 {
        return;
    }
    let last = knots[k - 1];
    let cube = |v: f64| if v > 0.0 { v * v * v } else { 0.0 };
    let d = |j: usize| (cube(x - knots[j]) - cube(x - last)) / (last - knots[j]);
    let d_ref = d(k - 2);
    for j in 0..k - 2 {
        out.push(d(j) - d_ref);
    }
}

/// A basis whose knots and scaling constants were fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedBasis {
    pub spec: BasisSpec,
    pub p: usize,
    pub knots: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FittedBasis {
    pub fn fit(spec: BasisSpec, xs: &[Vec<f64>]) -> Result<Self> {
        spec.validate()?;
        let p = xs.first().map(|x| x.len()).ok_or_else(|| {
            Error::InvalidInput("cannot fit a basis on zero rows".into())
        })?;
        let mut knots = Vec::new();
        if spec.kind == BasisKind::Complex {
            let k = spec.spline_df + 1;
            for j in 0..p {
                let mut col: Vec<f64> = xs.iter().map(|x| x[j]).collect();
                col.sort_by(f64::total_cmp);
                let mut kj: Vec<f64> = (0..k)
                    .map(|i| quantile_sorted(&col, i as f64 / (k - 1) as f64))
                    .collect();
                kj.dedup();
                knots.push(kj);
            }
        }
        let mut basis = Self {
            spec,
            p,
            knots,
            mean: Vec::new(),
            scale: Vec::new(),
        };
        let dim = basis.raw(&xs[0]).len();
        if spec.standardize {
            let n = xs.len() as f64;
            let mut mean = vec![0.0; dim];
            let mut sq = vec![0.0; dim];
            for x in xs {
                for (j, v) in basis.raw(x).into_iter().enumerate() {
                    mean[j] += v;
                    sq[j] += v * v;
                }
            }
            let scale = (0..dim)
                .map(|j| {
                    let m = mean[j] / n;
                    let var = (sq[j] / n - m * m).max(0.0);
                    if var > 1e-24 {
                        var.sqrt()
                    } else {
                        1.0
                    }
                })
                .collect();
            basis.mean = mean.iter().map(|m| m / n).collect();
            basis.scale = scale;
        } else {
            basis.mean = vec![0.0; dim];
            basis.scale = vec![1.0; dim];
        }
        Ok(basis)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Expansion before standardization.
    pub fn raw(&self, x: &[f64]) -> Vec<f64> {
        match self.spec.kind {
            BasisKind::Linear => x.to_vec(),
            BasisKind::Complex => {
                let p = self.p;
                let mut out = Vec::with_capacity(p * self.spec.spline_df + p + p * (p - 1) / 2);
                for (j, &v) in x.iter().enumerate() {
                    natural_spline(v, &self.knots[j], &mut out);
                }
                out.extend(x.iter().map(|v| v * v));
                if self.spec.include_pairwise {
                    for j in 0..p {
                        for k in j + 1..p {
                            out.push(x[j] * x[k]);
                        }
                    }
                }
                out
            }
        }
    }

    pub fn expand(&self, x: &[f64]) -> Vec<f64> {
        let mut v = self.raw(x);
        for ((vj, m), s) in v.iter_mut().zip(&self.mean).zip(&self.scale) {
            *vj = (*vj - m) / s;
        }
        v
    }

    /// Maps coefficients on the standardized expansion to an intercept and
    /// coefficients on the raw expansion with identical predictions.
    pub fn destandardize(&self, coef: &[f64]) -> (f64, Vec<f64>) {
        let raw: Vec<f64> = coef.iter().zip(&self.scale).map(|(c, s)| c / s).collect();
        let shift = raw.iter().zip(&self.mean).map(|(c, m)| c * m).sum::<f64>();
        (-shift, raw)
    }
}

pub fn expand_basis(x: &[f64], basis: &FittedBasis) -> Vec<f64> {
    basis.expand(x)
}
