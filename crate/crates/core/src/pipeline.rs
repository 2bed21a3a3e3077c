//! End-to-end selection on an observed dataset, with a serialisable report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::alasso::{lars_weighted_path, ztilde_with_model, AdaptiveWeights, PathEvent};
use crate::data::{partial_out_covariates, BlockStructure, Dataset};
use crate::error::{IvError, Result};
use crate::iv::{IvModel, SarganResult};
use crate::median::{
    alpha_with_model, block_median_of_medians, enumerate_with_model, median_of_medians,
    JustIdentifiedTable, SkippedSubset, DEFAULT_ENUMERATION_CAP,
};
use crate::selection::{
    cv_curve, default_p_threshold, downward_testing_with, select_from_curve, CvRule,
    SelectionMethod, SelectionResult, DEFAULT_FOLDS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectOptions {
    pub method: SelectionMethod,
    /// Downward-testing threshold; 0.1/ln(n) when `None`.
    pub p_threshold: Option<f64>,
    pub nu: f64,
    pub folds: usize,
    pub seed: u64,
}

impl Default for SelectOptions {
    fn default() -> Self {
        SelectOptions {
            method: SelectionMethod::SarganDt,
            p_threshold: None,
            nu: 1.0,
            folds: DEFAULT_FOLDS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialReport {
    pub estimator: String,
    pub beta: Vec<f64>,
    pub per_instrument: BTreeMap<String, Vec<f64>>,
    pub just_identified_sets: usize,
    pub skipped: Vec<SkippedSubset>,
    pub alpha: BTreeMap<String, f64>,
    /// Adaptive weights; `null` marks a frozen (exactly zero) instrument.
    pub weights: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathStep {
    pub lambda: f64,
    pub event: String,
    pub instrument: Option<String>,
    pub active: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathReport {
    pub entry_order: Vec<String>,
    pub max_active: usize,
    pub breakpoints: Vec<PathStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub method: SelectionMethod,
    pub invalid: Vec<String>,
    pub valid: Vec<String>,
    pub beta: Vec<Estimate>,
    pub alpha: Vec<Estimate>,
    pub sargan: SarganResult,
    pub p_threshold: Option<f64>,
    pub path_step: Option<usize>,
    pub lambda: Option<f64>,
    pub alasso_beta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectReport {
    pub n: usize,
    pub outcome: String,
    pub exposures: Vec<String>,
    pub instruments: Vec<String>,
    pub covariates: Vec<String>,
    pub block_structure: bool,
    pub options: SelectOptions,
    pub initial: InitialReport,
    pub path: PathReport,
    pub selection: SelectionReport,
    pub warnings: Vec<String>,
}

/// Covariates are partialled out first; the block variant of the initial
/// estimator is used when `blocks` is given.
pub fn run_select(
    raw: &Dataset,
    blocks: Option<&BlockStructure>,
    opts: &SelectOptions,
) -> Result<(SelectReport, JustIdentifiedTable)> {
    if let Some(p) = opts.p_threshold {
        if !(p > 0.0 && p < 1.0) {
            return Err(IvError::Invalid(format!("p-threshold must lie in (0, 1), got {p}")));
        }
    }
    if opts.method == SelectionMethod::ExhaustiveDt {
        return Err(IvError::Invalid("exhaustive search is not a pipeline method".into()));
    }
    raw.check_sample_size()?;
    let data = partial_out_covariates(raw)?;
    let model = IvModel::new(&data)?;
    let labels = &data.instrument_labels;
    let mut warnings = Vec::new();

    let table = enumerate_with_model(&model, blocks, DEFAULT_ENUMERATION_CAP)?;
    let (name, tree) = match blocks {
        Some(b) => ("block_median_of_medians", block_median_of_medians(&table, b)?),
        None => ("median_of_medians", median_of_medians(&table)?),
    };
    let alpha0 = alpha_with_model(&model, &tree.beta_mm);
    let weights = AdaptiveWeights::from_initial(&alpha0, opts.nu)?;
    let zt = ztilde_with_model(&model)?;
    let path = lars_weighted_path(&zt, &data.y, &weights)?;
    warnings.extend(path.warnings.iter().cloned());

    let p_threshold = opts.p_threshold.unwrap_or_else(|| default_p_threshold(data.n()));
    let sel: SelectionResult = match opts.method {
        SelectionMethod::SarganDt => downward_testing_with(&model, &path, p_threshold)?,
        SelectionMethod::CvMin | SelectionMethod::CvOneSe => {
            let rule = if opts.method == SelectionMethod::CvMin { CvRule::Min } else { CvRule::OneSe };
            let (full_path, curve) = cv_curve(&model, &weights, opts.folds, opts.seed)?;
            select_from_curve(&model, &full_path, &curve, rule)?
        }
        SelectionMethod::ExhaustiveDt => unreachable!("rejected above"),
    };
    warnings.extend(sel.warnings.iter().cloned());

    let name_of = |j: usize| labels[j].clone();
    let initial = InitialReport {
        estimator: name.into(),
        beta: tree.beta_mm.iter().copied().collect(),
        per_instrument: tree
            .per_instrument
            .iter()
            .map(|(&j, v)| (name_of(j), v.iter().copied().collect()))
            .collect(),
        just_identified_sets: table.len(),
        skipped: table.skipped.clone(),
        alpha: (0..data.k_z()).map(|j| (name_of(j), alpha0[j])).collect(),
        weights: (0..data.k_z())
            .map(|j| {
                let w = weights.weights[j];
                (name_of(j), w.is_finite().then_some(w))
            })
            .collect(),
    };
    let path_report = PathReport {
        entry_order: path.entry_order.iter().map(|&j| name_of(j)).collect(),
        max_active: path.max_active,
        breakpoints: path
            .breakpoints
            .iter()
            .map(|b| {
                let (event, instrument) = match b.event {
                    PathEvent::Enter(j) => ("enter", Some(name_of(j))),
                    PathEvent::Drop(j) => ("drop", Some(name_of(j))),
                    PathEvent::End => ("end", None),
                };
                PathStep {
                    lambda: b.lambda,
                    event: event.into(),
                    instrument,
                    active: b.active_set.iter().map(|&j| name_of(j)).collect(),
                }
            })
            .collect(),
    };
    let fit = &sel.post_fit;
    let beta_se = fit.beta_se();
    let alpha_se = fit.alpha_se();
    let selection = SelectionReport {
        method: sel.method,
        invalid: sel.invalid_set.iter().map(|&j| name_of(j)).collect(),
        valid: sel.valid_set.iter().map(|&j| name_of(j)).collect(),
        beta: (0..data.k_x())
            .map(|q| Estimate {
                name: data.exposure_labels[q].clone(),
                estimate: fit.beta_hat[q],
                se: beta_se[q],
            })
            .collect(),
        alpha: fit
            .invalid_set
            .iter()
            .enumerate()
            .map(|(i, &j)| Estimate {
                name: name_of(j),
                estimate: fit.alpha_hat[i],
                se: alpha_se[i],
            })
            .collect(),
        sargan: sel.sargan,
        p_threshold: sel.p_threshold,
        path_step: sel.path_step,
        lambda: sel.lambda,
        alasso_beta: sel.alasso_beta.as_ref().map(|b| b.iter().copied().collect()),
    };
    let report = SelectReport {
        n: data.n(),
        outcome: raw.outcome_label.clone(),
        exposures: raw.exposure_labels.clone(),
        instruments: raw.instrument_labels.clone(),
        covariates: raw.covariate_labels.clone(),
        block_structure: blocks.is_some(),
        options: SelectOptions {
            p_threshold: Some(p_threshold),
            ..opts.clone()
        },
        initial,
        path: path_report,
        selection,
        warnings,
    };
    Ok((report, table))
}

impl SelectReport {
    /// `parameter,kind,estimate,se,status` rows for β and every α_j.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["parameter", "kind", "estimate", "se", "status"])?;
        for b in &self.selection.beta {
            w.write_record([&b.name, "beta", &b.estimate.to_string(), &b.se.to_string(), ""])?;
        }
        for name in &self.instruments {
            match self.selection.alpha.iter().find(|a| &a.name == name) {
                Some(a) => w.write_record([name, "alpha", &a.estimate.to_string(), &a.se.to_string(), "invalid"])?,
                None => w.write_record([name.as_str(), "alpha", "0", "", "valid"])?,
            }
        }
        let bytes = w.into_inner().map_err(|e| IvError::Invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("utf-8 labels"))
    }

    pub fn summary_table(&self) -> String {
        let s = &self.selection;
        let mut out = format!(
            "n = {}, method = {:?}, p-threshold = {}\n",
            self.n,
            s.method,
            s.p_threshold.map_or("-".into(), |p| format!("{p:.5}"))
        );
        out.push_str(&format!("{:<16}{:>12}{:>12}\n", "exposure", "estimate", "se"));
        for b in &s.beta {
            out.push_str(&format!("{:<16}{:>12.4}{:>12.4}\n", b.name, b.estimate, b.se));
        }
        out.push_str(&format!(
            "invalid ({}): {}\n",
            s.invalid.len(),
            if s.invalid.is_empty() { "-".into() } else { s.invalid.join(", ") }
        ));
        out.push_str(&format!(
            "Sargan = {:.4}, df = {}, p = {:.4}\n",
            s.sargan.statistic, s.sargan.df, s.sargan.p_value
        ));
        out
    }
}
