//! Data model: the observed sample, known instrument relevance, and
//! simulation ground truth.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{IvError, Result};
use crate::linalg::{self, LeastSquares, RANK_TOL};

/// An i.i.d. sample of outcome, exposures, candidate instruments and
/// (optionally) covariates to be partialled out.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub outcome_label: String,
    pub exposure_labels: Vec<String>,
    pub instrument_labels: Vec<String>,
    pub covariate_labels: Vec<String>,
}

impl Dataset {
    /// Builds a dataset without covariates and with generated labels
    /// (`x1..`, `z1..`).
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, z: DMatrix<f64>) -> Result<Self> {
        let n = y.len();
        let exposure_labels = (1..=x.ncols()).map(|i| format!("x{i}")).collect();
        let instrument_labels = (1..=z.ncols()).map(|i| format!("z{i}")).collect();
        Self::with_labels(
            y,
            x,
            z,
            DMatrix::zeros(n, 0),
            "y".into(),
            exposure_labels,
            instrument_labels,
            Vec::new(),
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_labels(
        y: DVector<f64>,
        x: DMatrix<f64>,
        z: DMatrix<f64>,
        w: DMatrix<f64>,
        outcome_label: String,
        exposure_labels: Vec<String>,
        instrument_labels: Vec<String>,
        covariate_labels: Vec<String>,
    ) -> Result<Self> {
        let data = Dataset {
            y,
            x,
            z,
            w,
            outcome_label,
            exposure_labels,
            instrument_labels,
            covariate_labels,
        };
        data.validate()?;
        Ok(data)
    }

    fn validate(&self) -> Result<()> {
        let n = self.y.len();
        for (name, rows) in [("X", self.x.nrows()), ("Z", self.z.nrows()), ("W", self.w.nrows())] {
            if rows != n {
                return Err(IvError::Invalid(format!(
                    "{name} has {rows} rows but y has {n}"
                )));
            }
        }
        if self.k_x() == 0 {
            return Err(IvError::Invalid("at least one exposure is required".into()));
        }
        if self.k_z() < self.k_x() {
            return Err(IvError::Invalid(format!(
                "{} instruments cannot identify {} exposures",
                self.k_z(),
                self.k_x()
            )));
        }
        let finite = self.y.iter().all(|v| v.is_finite())
            && self.x.iter().all(|v| v.is_finite())
            && self.z.iter().all(|v| v.is_finite())
            && self.w.iter().all(|v| v.is_finite());
        if !finite {
            return Err(IvError::Invalid("all entries must be finite".into()));
        }
        if self.exposure_labels.len() != self.k_x()
            || self.instrument_labels.len() != self.k_z()
            || self.covariate_labels.len() != self.k_w()
        {
            return Err(IvError::Invalid("label count does not match column count".into()));
        }
        let mut seen = HashSet::new();
        for l in std::iter::once(&self.outcome_label)
            .chain(&self.exposure_labels)
            .chain(&self.instrument_labels)
            .chain(&self.covariate_labels)
        {
            if !seen.insert(l.as_str()) {
                return Err(IvError::Invalid(format!("duplicate label `{l}`")));
            }
        }
        Ok(())
    }

    /// Estimation needs n > k_x + k_z + k_w. Parsing does not enforce this
    /// so that tiny files can still be loaded and inspected.
    pub fn check_sample_size(&self) -> Result<()> {
        let k = self.k_x() + self.k_z() + self.k_w();
        if self.n() <= k {
            return Err(IvError::Invalid(format!(
                "need more observations ({}) than variables ({k})",
                self.n()
            )));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
    pub fn k_x(&self) -> usize {
        self.x.ncols()
    }
    pub fn k_z(&self) -> usize {
        self.z.ncols()
    }
    pub fn k_w(&self) -> usize {
        self.w.ncols()
    }

    /// Row subset, keeping labels. Used for cross-validation folds.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            y: self.y.select_rows(rows),
            x: self.x.select_rows(rows),
            z: self.z.select_rows(rows),
            w: self.w.select_rows(rows),
            outcome_label: self.outcome_label.clone(),
            exposure_labels: self.exposure_labels.clone(),
            instrument_labels: self.instrument_labels.clone(),
            covariate_labels: self.covariate_labels.clone(),
        }
    }

    pub fn instrument_index(&self, label: &str) -> Option<usize> {
        self.instrument_labels.iter().position(|l| l == label)
    }

    pub fn exposure_index(&self, label: &str) -> Option<usize> {
        self.exposure_labels.iter().position(|l| l == label)
    }
}

/// Which CSV columns play which role.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ColumnRoles {
    pub outcome: Option<String>,
    pub exposures: Vec<String>,
    pub instruments: Vec<String>,
    #[serde(default)]
    pub covariates: Vec<String>,
}

/// Reads a comma-separated file with a header row.
pub fn load_csv(path: impl AsRef<Path>, roles: &ColumnRoles) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| IvError::io(path, e))?;
    read_csv(file, roles)
}

/// Same as [`load_csv`] over any reader.
pub fn read_csv<R: Read>(reader: R, roles: &ColumnRoles) -> Result<Dataset> {
    let outcome = roles.outcome.as_ref().ok_or(IvError::MissingOutcome)?;
    let mut assigned: HashMap<&str, ()> = HashMap::new();
    for c in std::iter::once(outcome)
        .chain(&roles.exposures)
        .chain(&roles.instruments)
        .chain(&roles.covariates)
    {
        if assigned.insert(c.as_str(), ()).is_some() {
            return Err(IvError::DuplicateRole { column: c.clone() });
        }
    }

    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| IvError::MissingColumn(name.to_string()))
    };
    let y_col = find(outcome)?;
    let x_cols = roles.exposures.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let z_cols = roles.instruments.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let w_cols = roles.covariates.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;

    let wanted: Vec<usize> = std::iter::once(y_col)
        .chain(x_cols.iter().copied())
        .chain(z_cols.iter().copied())
        .chain(w_cols.iter().copied())
        .collect();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let mut vals = Vec::with_capacity(wanted.len());
        for &c in &wanted {
            let cell = rec.get(c).unwrap_or("").trim();
            let v: f64 = cell.parse().map_err(|_| IvError::NonNumeric {
                row,
                col: headers[c].to_string(),
            })?;
            if !v.is_finite() {
                return Err(IvError::NonFinite {
                    row,
                    col: headers[c].to_string(),
                });
            }
            vals.push(v);
        }
        rows.push(vals);
    }
    let n = rows.len();
    let column = |k: usize| DVector::from_iterator(n, rows.iter().map(|r| r[k]));
    let block = |offset: usize, width: usize| {
        DMatrix::from_fn(n, width, |i, j| rows[i][offset + j])
    };
    let (kx, kz, kw) = (x_cols.len(), z_cols.len(), w_cols.len());
    Dataset::with_labels(
        column(0),
        block(1, kx),
        block(1 + kx, kz),
        block(1 + kx + kz, kw),
        outcome.clone(),
        roles.exposures.clone(),
        roles.instruments.clone(),
        roles.covariates.clone(),
    )
}

/// Replaces y, X and Z by their residuals from a regression on `[W, 1]`.
/// The covariate block is empty afterwards.
pub fn partial_out_covariates(data: &Dataset) -> Result<Dataset> {
    let n = data.n();
    let basis = linalg::hcat(&[&data.w, &DMatrix::from_element(n, 1, 1.0)]);
    let ls = match LeastSquares::new(&basis, "covariate design [W, intercept]") {
        Ok(ls) => ls,
        Err(IvError::RankDeficient { ratio, .. }) => {
            let names: Vec<String> = data
                .covariate_labels
                .iter()
                .cloned()
                .chain(std::iter::once("(intercept)".to_string()))
                .collect();
            let bad: Vec<&str> = linalg::collinear_columns(&basis)
                .into_iter()
                .map(|j| names[j].as_str())
                .collect();
            return Err(IvError::RankDeficient {
                what: "covariate design [W, intercept]".into(),
                ratio,
                detail: format!("collinear columns: {}", bad.join(", ")),
            });
        }
        Err(e) => return Err(e),
    };
    debug_assert!(ls.condition_ratio() >= RANK_TOL);
    let y = ls.annihilate_vec(&data.y);
    let x = ls.annihilate(&data.x);
    let z = ls.annihilate(&data.z);
    // Partialling removes k_w + 1 degrees of freedom; the caller's n is kept.
    Ok(Dataset {
        y,
        x,
        z,
        w: DMatrix::zeros(n, 0),
        outcome_label: data.outcome_label.clone(),
        exposure_labels: data.exposure_labels.clone(),
        instrument_labels: data.instrument_labels.clone(),
        covariate_labels: Vec::new(),
    })
}

/// Known relevance of each instrument for each exposure. Instruments may be
/// relevant for several exposures (overlap).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockStructure {
    relevance: Vec<BTreeSet<usize>>,
    k_x: usize,
}

impl BlockStructure {
    pub fn new(relevance: Vec<BTreeSet<usize>>, k_x: usize) -> Result<Self> {
        let mut covered = vec![false; k_x];
        for (j, set) in relevance.iter().enumerate() {
            if set.is_empty() {
                return Err(IvError::Invalid(format!(
                    "instrument {j} is relevant for no exposure"
                )));
            }
            for &q in set {
                if q >= k_x {
                    return Err(IvError::Invalid(format!(
                        "instrument {j} lists exposure index {q} out of range"
                    )));
                }
                covered[q] = true;
            }
        }
        if let Some(q) = covered.iter().position(|c| !c) {
            return Err(IvError::Invalid(format!(
                "exposure {q} has no relevant instrument"
            )));
        }
        Ok(BlockStructure { relevance, k_x })
    }

    /// Every instrument relevant for every exposure.
    pub fn dense(k_z: usize, k_x: usize) -> Self {
        BlockStructure {
            relevance: vec![(0..k_x).collect(); k_z],
            k_x,
        }
    }

    /// Builds from disjoint or overlapping per-exposure index sets.
    pub fn from_sets(sets: &[BTreeSet<usize>], k_z: usize) -> Result<Self> {
        let mut relevance = vec![BTreeSet::new(); k_z];
        for (q, set) in sets.iter().enumerate() {
            for &j in set {
                if j >= k_z {
                    return Err(IvError::Invalid(format!("instrument index {j} out of range")));
                }
                relevance[j].insert(q);
            }
        }
        Self::new(relevance, sets.len())
    }

    /// Parses the JSON object `{ "instrument label": ["exposure label", ..] }`.
    /// Instruments absent from the object are an error.
    pub fn from_json(text: &str, data: &Dataset) -> Result<Self> {
        let map: BTreeMap<String, Vec<String>> = serde_json::from_str(text)?;
        let mut relevance = vec![BTreeSet::new(); data.k_z()];
        for (inst, exps) in &map {
            let j = data
                .instrument_index(inst)
                .ok_or_else(|| IvError::Invalid(format!("block file names unknown instrument `{inst}`")))?;
            for e in exps {
                let q = data
                    .exposure_index(e)
                    .ok_or_else(|| IvError::Invalid(format!("block file names unknown exposure `{e}`")))?;
                relevance[j].insert(q);
            }
        }
        if let Some(j) = relevance.iter().position(|s| s.is_empty()) {
            return Err(IvError::Invalid(format!(
                "block file does not assign instrument `{}`",
                data.instrument_labels[j]
            )));
        }
        Self::new(relevance, data.k_x())
    }

    pub fn to_json(&self, data: &Dataset) -> String {
        let map: BTreeMap<&str, Vec<&str>> = self
            .relevance
            .iter()
            .enumerate()
            .map(|(j, set)| {
                (
                    data.instrument_labels[j].as_str(),
                    set.iter().map(|&q| data.exposure_labels[q].as_str()).collect(),
                )
            })
            .collect();
        serde_json::to_string_pretty(&map).expect("string map serialises")
    }

    pub fn k_z(&self) -> usize {
        self.relevance.len()
    }
    pub fn k_x(&self) -> usize {
        self.k_x
    }
    pub fn relevant_for(&self, instrument: usize) -> &BTreeSet<usize> {
        &self.relevance[instrument]
    }

    /// Instruments relevant for exposure `q`.
    pub fn instruments_for(&self, q: usize) -> BTreeSet<usize> {
        (0..self.k_z()).filter(|&j| self.relevance[j].contains(&q)).collect()
    }

    /// True when the members of `subset` jointly cover every exposure.
    pub fn covers_all(&self, subset: &[usize]) -> bool {
        let mut covered = vec![false; self.k_x];
        for &j in subset {
            for &q in &self.relevance[j] {
                covered[q] = true;
            }
        }
        covered.into_iter().all(|c| c)
    }
}

/// Ground truth for a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthInfo {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub valid: BTreeSet<usize>,
    pub invalid: BTreeSet<usize>,
}

impl TruthInfo {
    pub fn new(beta: Vec<f64>, alpha: Vec<f64>) -> Self {
        let (invalid, valid): (BTreeSet<usize>, BTreeSet<usize>) =
            (0..alpha.len()).partition(|&j| alpha[j] != 0.0);
        TruthInfo {
            beta,
            alpha,
            valid,
            invalid,
        }
    }
}
