//! From an adaptive-Lasso path to a selected set of invalid instruments:
//! Sargan downward testing, cross-validation, post-selection 2SLS, and an
//! exhaustive search used to validate the path-guided procedure.

use itertools::Itertools;
use nalgebra::DVector;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alasso::{
    adaptive_lasso_at, beta_with_model, lars_weighted_path, ztilde_with_model, AdaptiveWeights,
    LarsPath,
};
use crate::data::Dataset;
use crate::error::{IvError, Result};
use crate::iv::{IvModel, SarganResult, TwoSlsFit};
use crate::median::binomial;
use crate::rng::{self, Block};
use crate::stats::std_dev;

pub const DEFAULT_EXHAUSTIVE_CAP: u128 = 100_000;
pub const DEFAULT_FOLDS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    SarganDt,
    CvMin,
    CvOneSe,
    ExhaustiveDt,
}

#[derive(Debug, Clone)]
pub struct SelectionResult {
    pub method: SelectionMethod,
    pub invalid_set: Vec<usize>,
    pub valid_set: Vec<usize>,
    pub post_fit: TwoSlsFit,
    pub sargan: SarganResult,
    pub p_threshold: Option<f64>,
    /// Number of path entries treated as invalid (downward testing) or the
    /// index of the chosen breakpoint (cross-validation).
    pub path_step: Option<usize>,
    /// Chosen penalty (cross-validation only).
    pub lambda: Option<f64>,
    /// β̂ from the adaptive-Lasso α̂ at the chosen penalty (cross-validation only).
    pub alasso_beta: Option<DVector<f64>>,
    pub warnings: Vec<String>,
}

fn complement(k_z: usize, set: &[usize]) -> Vec<usize> {
    (0..k_z).filter(|j| !set.contains(j)).collect()
}

impl SelectionResult {
    fn new(
        method: SelectionMethod,
        model: &IvModel<'_>,
        post_fit: TwoSlsFit,
        p_threshold: Option<f64>,
    ) -> Self {
        let sargan = model.sargan(&post_fit);
        let invalid_set = post_fit.invalid_set.clone();
        SelectionResult {
            method,
            valid_set: complement(post_fit.k_z, &invalid_set),
            invalid_set,
            post_fit,
            sargan,
            p_threshold,
            path_step: None,
            lambda: None,
            alasso_beta: None,
            warnings: Vec::new(),
        }
    }
}

/// p_n = 0.1 / ln(n).
pub fn default_p_threshold(n: usize) -> f64 {
    0.1 / (n as f64).ln()
}

fn check_threshold(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(IvError::Invalid(format!(
            "p-value threshold must lie in (0, 1), got {p}"
        )));
    }
    Ok(())
}

pub fn post_selection_2sls(data: &Dataset, invalid_set: &[usize]) -> Result<TwoSlsFit> {
    crate::iv::fit_2sls(data, invalid_set)
}

pub fn downward_testing(data: &Dataset, path: &LarsPath, p_threshold: f64) -> Result<SelectionResult> {
    downward_testing_with(&IvModel::new(data)?, path, p_threshold)
}

/// Walks k_inv = 0, 1, … treating the first k_inv instruments in entry
/// order as invalid and stops at the first model the Sargan test does not
/// reject.
pub fn downward_testing_with(
    model: &IvModel<'_>,
    path: &LarsPath,
    p_threshold: f64,
) -> Result<SelectionResult> {
    check_threshold(p_threshold)?;
    let d = model.data();
    let max_inv = d.k_z() - d.k_x();
    let last = max_inv.min(path.entry_order.len());
    let mut warnings = Vec::new();
    let mut fallback = None;
    for k_inv in 0..=last {
        let candidate = &path.entry_order[..k_inv];
        let fit = match model.fit(candidate) {
            Ok(f) => f,
            Err(e) if e.is_numerical() => {
                warnings.push(format!("step {k_inv} skipped: {e}"));
                continue;
            }
            Err(e) => return Err(e),
        };
        let s = model.sargan(&fit);
        let accepted = s.p_value > p_threshold;
        if accepted || k_inv == last {
            if s.df == 0 {
                warnings.push(
                    "no overidentified model accepted; returning the just-identified model".into(),
                );
            } else if !accepted {
                warnings.push(format!(
                    "path ended after {} entries without an accepted model; returning the last candidate",
                    path.entry_order.len()
                ));
            }
            let mut r = SelectionResult::new(SelectionMethod::SarganDt, model, fit, Some(p_threshold));
            r.path_step = Some(k_inv);
            r.warnings = warnings;
            return Ok(r);
        }
        fallback = Some(k_inv);
    }
    Err(IvError::RankDeficient {
        what: "every downward-testing candidate".into(),
        ratio: 0.0,
        detail: format!("last attempted step {fallback:?}; {}", warnings.join("; ")),
    })
}

pub fn exhaustive_downward_testing(data: &Dataset, cap: u128, p_threshold: f64) -> Result<SelectionResult> {
    exhaustive_with(&IvModel::new(data)?, cap, p_threshold)
}

/// Tests every invalid set of size 0, 1, …; at the first size with an
/// accepted model returns the accepted one with the largest p-value.
pub fn exhaustive_with(model: &IvModel<'_>, cap: u128, p_threshold: f64) -> Result<SelectionResult> {
    check_threshold(p_threshold)?;
    let d = model.data();
    let (k_z, max_inv) = (d.k_z(), d.k_z() - d.k_x());
    let count: u128 = (0..=max_inv).map(|k| binomial(k_z, k)).sum();
    if count > cap {
        return Err(IvError::CapExceeded { count, cap });
    }
    let mut warnings = Vec::new();
    for k_inv in 0..=max_inv {
        let mut best: Option<(f64, TwoSlsFit)> = None;
        for set in (0..k_z).combinations(k_inv) {
            let fit = match model.fit(&set) {
                Ok(f) => f,
                Err(e) if e.is_numerical() => {
                    warnings.push(format!("set {set:?} skipped: {e}"));
                    continue;
                }
                Err(e) => return Err(e),
            };
            let p = model.sargan(&fit).p_value;
            if p > p_threshold && best.as_ref().is_none_or(|(bp, _)| p > *bp) {
                best = Some((p, fit));
            }
        }
        if let Some((_, fit)) = best {
            let mut r = SelectionResult::new(SelectionMethod::ExhaustiveDt, model, fit, Some(p_threshold));
            r.path_step = Some(k_inv);
            r.warnings = warnings;
            return Ok(r);
        }
    }
    Err(IvError::RankDeficient {
        what: "every exhaustive candidate".into(),
        ratio: 0.0,
        detail: warnings.join("; "),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvRule {
    Min,
    OneSe,
}

/// Mean and standard error of the held-out criterion on the λ grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvCurve {
    pub lambdas: Vec<f64>,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub folds: usize,
}

impl CvCurve {
    /// Index of the chosen λ. Ties go to the larger λ.
    pub fn choose(&self, rule: CvRule) -> usize {
        let mut best = 0;
        for i in 1..self.mean.len() {
            if self.mean[i] < self.mean[best]
                || (self.mean[i] == self.mean[best] && self.lambdas[i] > self.lambdas[best])
            {
                best = i;
            }
        }
        match rule {
            CvRule::Min => best,
            CvRule::OneSe => {
                let bound = self.mean[best] + self.se[best];
                (0..self.mean.len())
                    .filter(|&i| self.mean[i] <= bound)
                    .max_by(|&a, &b| self.lambdas[a].total_cmp(&self.lambdas[b]).then(b.cmp(&a)))
                    .unwrap_or(best)
            }
        }
    }
}

/// Seeded assignment of rows to folds: shuffle, then deal round-robin.
pub fn fold_ids(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, 0, Block::Folds));
    let mut ids = vec![0; n];
    for (i, &row) in perm.iter().enumerate() {
        ids[row] = i % folds;
    }
    ids
}

/// Held-out Sargan-type criterion n_te·(rᵀP_Z r)/(rᵀr) on the breakpoint
/// grid of `path`, refitting the path on each training fold with the same
/// weights. The full-data λ is rescaled by n_train/n on each fold.
pub fn cv_curve_with_folds(
    data: &Dataset,
    weights: &AdaptiveWeights,
    path: &LarsPath,
    ids: &[usize],
) -> Result<CvCurve> {
    let n = data.n();
    let folds = ids.iter().max().map_or(0, |m| m + 1);
    if folds < 2 || ids.len() != n {
        return Err(IvError::Invalid("need at least two folds covering every row".into()));
    }
    let lambdas = path.lambdas();
    let per_fold: Vec<Vec<f64>> = (0..folds)
        .into_par_iter()
        .map(|f| fold_criteria(data, weights, ids, f, &lambdas))
        .collect::<Result<_>>()?;
    let mut mean = Vec::with_capacity(lambdas.len());
    let mut se = Vec::with_capacity(lambdas.len());
    for i in 0..lambdas.len() {
        let vals: Vec<f64> = per_fold.iter().map(|v| v[i]).collect();
        mean.push(vals.iter().sum::<f64>() / folds as f64);
        se.push(std_dev(&vals, 1) / (folds as f64).sqrt());
    }
    Ok(CvCurve {
        lambdas,
        mean,
        se,
        folds,
    })
}

fn fold_criteria(
    data: &Dataset,
    weights: &AdaptiveWeights,
    ids: &[usize],
    fold: usize,
    lambdas: &[f64],
) -> Result<Vec<f64>> {
    let train_rows: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] != fold).collect();
    let test_rows: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] == fold).collect();
    let train = data.select_rows(&train_rows);
    let test = data.select_rows(&test_rows);
    let too_small = |what: &str, e: IvError| {
        IvError::Invalid(format!("fold {fold} too small for a {what} fit: {e}"))
    };
    let model = IvModel::new(&train).map_err(|e| too_small("training", e))?;
    let zt = ztilde_with_model(&model)?;
    let path = lars_weighted_path(&zt, &train.y, weights)?;
    let z_te = crate::linalg::LeastSquares::new(&test.z, "held-out instruments")
        .map_err(|e| too_small("held-out", e))?;
    let scale = train.n() as f64 / data.n() as f64;
    let n_te = test.n() as f64;
    lambdas
        .iter()
        .map(|&lam| {
            let alpha = adaptive_lasso_at(&path, lam * scale);
            let beta = beta_with_model(&model, &alpha)?;
            let r = &test.y - &test.x * &beta - &test.z * &alpha;
            let rr = r.norm_squared();
            Ok(if rr > 0.0 { n_te * z_te.projected_norm_sq(&r) / rr } else { 0.0 })
        })
        .collect()
}

/// Full-data path plus CV curve; shared by both rules.
pub fn cv_curve(
    model: &IvModel<'_>,
    weights: &AdaptiveWeights,
    folds: usize,
    seed: u64,
) -> Result<(LarsPath, CvCurve)> {
    let d = model.data();
    if folds < 2 {
        return Err(IvError::Invalid(format!("folds must be at least 2, got {folds}")));
    }
    if d.n() < 10 * folds {
        return Err(IvError::Invalid(format!(
            "cross-validation needs n ≥ 10·folds ({} < {})",
            d.n(),
            10 * folds
        )));
    }
    let zt = ztilde_with_model(model)?;
    let path = lars_weighted_path(&zt, &d.y, weights)?;
    let ids = fold_ids(d.n(), folds, seed);
    let curve = cv_curve_with_folds(d, weights, &path, &ids)?;
    Ok((path, curve))
}

/// Applies a CV rule: support of the full-data α̂ at the chosen λ, then the
/// post-selection 2SLS fit.
pub fn select_from_curve(
    model: &IvModel<'_>,
    path: &LarsPath,
    curve: &CvCurve,
    rule: CvRule,
) -> Result<SelectionResult> {
    let i = curve.choose(rule);
    let lambda = curve.lambdas[i];
    let alpha = adaptive_lasso_at(path, lambda);
    let support: Vec<usize> = (0..alpha.len()).filter(|&j| alpha[j] != 0.0).collect();
    let fit = model.fit(&support)?;
    let method = match rule {
        CvRule::Min => SelectionMethod::CvMin,
        CvRule::OneSe => SelectionMethod::CvOneSe,
    };
    let mut r = SelectionResult::new(method, model, fit, None);
    r.path_step = Some(i);
    r.lambda = Some(lambda);
    r.alasso_beta = Some(beta_with_model(model, &alpha)?);
    Ok(r)
}

pub fn cv_select(
    data: &Dataset,
    weights: &AdaptiveWeights,
    folds: usize,
    rule: CvRule,
    seed: u64,
) -> Result<SelectionResult> {
    let model = IvModel::new(data)?;
    let (path, curve) = cv_curve(&model, weights, folds, seed)?;
    select_from_curve(&model, &path, &curve, rule)
}
