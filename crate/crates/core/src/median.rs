//! Just-identified IV estimators and the (generalised) median-of-medians
//! initial estimator of β.
//!
//! For a k_x-subset s of instruments treated as the only valid ones, the
//! just-identified 2SLS estimate solves Γ̂_s = Π̂_s β, where Γ̂ and Π̂ are the
//! reduced-form and first-stage coefficients. That identity lets the whole
//! table be built from one factorisation of Z.
//!
//! The median-of-medians recursion walks ordered prefixes of instruments:
//! a prefix of length k_x − 1 takes the median over its completions of the
//! just-identified estimates, and each shorter prefix takes the median over
//! its one-instrument extensions. The value at a prefix depends only on the
//! set of its members, so everything is memoised by sorted subset.

use std::collections::{BTreeMap, HashMap};

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BlockStructure, Dataset};
use crate::error::{IvError, Result};
use crate::iv::IvModel;
use crate::linalg::{singular_value_ratio, RANK_TOL};
use crate::stats::median;

/// Default guard on the number of just-identifying sets.
pub const DEFAULT_ENUMERATION_CAP: u128 = 2_000_000;

const PARALLEL_THRESHOLD: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct JustIdentified {
    pub beta: DVector<f64>,
    /// σ_min/σ_max of Π̂_s.
    pub min_sv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedSubset {
    pub subset: Vec<usize>,
    pub min_sv: f64,
    pub reason: String,
}

/// Whether the table enumerates all k_x-subsets or only those admissible
/// under a block relevance structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TableKind {
    Full,
    Block,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JustIdentifiedTable {
    pub entries: BTreeMap<Vec<usize>, JustIdentified>,
    pub skipped: Vec<SkippedSubset>,
    pub kind: TableKind,
    pub k_x: usize,
    pub k_z: usize,
}

impl JustIdentifiedTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// CSV dump: `subset,beta_1,..,beta_kx,min_sv`, subsets as `z1|z4`.
    pub fn to_csv(&self, labels: &[String]) -> String {
        let mut out = String::from("subset");
        for q in 1..=self.k_x {
            out.push_str(&format!(",beta_{q}"));
        }
        out.push_str(",min_sv\n");
        for (s, e) in &self.entries {
            out.push_str(&s.iter().map(|&j| labels[j].as_str()).join("|"));
            for b in e.beta.iter() {
                out.push_str(&format!(",{b}"));
            }
            out.push_str(&format!(",{}\n", e.min_sv));
        }
        out
    }
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    acc
}

/// Admissible pairs under a block structure: the two members jointly cover
/// both exposures.
pub fn admissible_pairs(blocks: &BlockStructure) -> Vec<Vec<usize>> {
    (0..blocks.k_z())
        .tuple_combinations()
        .filter(|&(a, b)| blocks.covers_all(&[a, b]))
        .map(|(a, b)| vec![a, b])
        .collect()
}

pub fn enumerate_just_identified(
    data: &Dataset,
    blocks: Option<&BlockStructure>,
) -> Result<JustIdentifiedTable> {
    let model = IvModel::new(data)?;
    enumerate_with_model(&model, blocks, DEFAULT_ENUMERATION_CAP)
}

pub fn enumerate_with_model(
    model: &IvModel<'_>,
    blocks: Option<&BlockStructure>,
    cap: u128,
) -> Result<JustIdentifiedTable> {
    let data = model.data();
    let (k_x, k_z) = (data.k_x(), data.k_z());
    let (subsets, kind): (Vec<Vec<usize>>, TableKind) = match blocks {
        None => {
            let count = binomial(k_z, k_x);
            if count > cap {
                return Err(IvError::CapExceeded { count, cap });
            }
            ((0..k_z).combinations(k_x).collect(), TableKind::Full)
        }
        Some(b) => {
            if k_x != 2 {
                return Err(IvError::Unsupported(format!(
                    "block relevance is only supported for two exposures, got {k_x}"
                )));
            }
            if b.k_z() != k_z || b.k_x() != k_x {
                return Err(IvError::Invalid(
                    "block structure dimensions do not match the data".into(),
                ));
            }
            (admissible_pairs(b), TableKind::Block)
        }
    };

    let gamma = model.reduced_form();
    let pi = &model.first_stage().pi_hat;
    let solve = |s: &Vec<usize>| -> (Vec<usize>, std::result::Result<JustIdentified, f64>) {
        let pi_s: DMatrix<f64> = pi.select_rows(s);
        let min_sv = singular_value_ratio(&pi_s);
        if min_sv.is_nan() || min_sv < RANK_TOL {
            return (s.clone(), Err(min_sv));
        }
        let gamma_s = gamma.select_rows(s);
        match pi_s.lu().solve(&gamma_s) {
            Some(beta) => (s.clone(), Ok(JustIdentified { beta, min_sv })),
            None => (s.clone(), Err(min_sv)),
        }
    };
    let solved: Vec<_> = if subsets.len() >= PARALLEL_THRESHOLD {
        subsets.par_iter().map(solve).collect()
    } else {
        subsets.iter().map(solve).collect()
    };

    let mut entries = BTreeMap::new();
    let mut skipped = Vec::new();
    for (s, r) in solved {
        match r {
            Ok(e) => {
                entries.insert(s, e);
            }
            Err(min_sv) => skipped.push(SkippedSubset {
                subset: s,
                min_sv,
                reason: "first-stage block Π̂_s is numerically singular".into(),
            }),
        }
    }
    Ok(JustIdentifiedTable {
        entries,
        skipped,
        kind,
        k_x,
        k_z,
    })
}

fn elementwise_median<'a>(vectors: impl Iterator<Item = &'a DVector<f64>>, k: usize) -> Option<DVector<f64>> {
    let vs: Vec<&DVector<f64>> = vectors.collect();
    if vs.is_empty() {
        return None;
    }
    let mut out = DVector::zeros(k);
    let mut buf = Vec::with_capacity(vs.len());
    for q in 0..k {
        buf.clear();
        buf.extend(vs.iter().map(|v| v[q]));
        out[q] = median(&buf).expect("non-empty");
    }
    Some(out)
}

/// Elementwise median of every stored just-identified estimate.
pub fn median_naive(table: &JustIdentifiedTable) -> Result<DVector<f64>> {
    elementwise_median(table.entries.values().map(|e| &e.beta), table.k_x)
        .ok_or_else(|| IvError::Empty("just-identified table".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MedianTreeEstimate {
    pub beta_mm: DVector<f64>,
    /// β̂ at each single-instrument node of the top layer.
    pub per_instrument: BTreeMap<usize, DVector<f64>>,
    /// Number of median layers above the plain just-identified median.
    pub depth: usize,
}

pub fn median_of_medians(table: &JustIdentifiedTable) -> Result<MedianTreeEstimate> {
    let (k_x, k_z) = (table.k_x, table.k_z);
    if table.kind != TableKind::Full {
        return Err(IvError::Invalid(
            "median-of-medians recursion needs the full just-identified table".into(),
        ));
    }
    if !table.skipped.is_empty() {
        return Err(IvError::MissingSubsets(
            table.skipped.iter().map(|s| s.subset.clone()).collect(),
        ));
    }
    if table.entries.len() as u128 != binomial(k_z, k_x) {
        return Err(IvError::Invalid("just-identified table is incomplete".into()));
    }

    // values[m] maps each sorted m-subset to its node value.
    let mut layer: HashMap<Vec<usize>, DVector<f64>> = table
        .entries
        .iter()
        .map(|(s, e)| (s.clone(), e.beta.clone()))
        .collect();
    for m in (1..k_x).rev() {
        let mut next = HashMap::with_capacity(binomial(k_z, m) as usize);
        for s in (0..k_z).combinations(m) {
            let children: Vec<&DVector<f64>> = (0..k_z)
                .filter(|l| !s.contains(l))
                .map(|l| {
                    let mut key = s.clone();
                    key.push(l);
                    key.sort_unstable();
                    &layer[&key]
                })
                .collect();
            let v = elementwise_median(children.into_iter(), k_x).expect("k_z > m");
            next.insert(s, v);
        }
        layer = next;
    }
    let per_instrument: BTreeMap<usize, DVector<f64>> =
        (0..k_z).map(|j| (j, layer[&vec![j]].clone())).collect();
    let beta_mm = elementwise_median(per_instrument.values(), k_x).expect("k_z ≥ 1");
    Ok(MedianTreeEstimate {
        beta_mm,
        per_instrument,
        depth: k_x - 1,
    })
}

/// Median-of-medians under known block relevance (two exposures): each
/// instrument's median runs over its admissible partners only.
pub fn block_median_of_medians(
    table: &JustIdentifiedTable,
    blocks: &BlockStructure,
) -> Result<MedianTreeEstimate> {
    if table.k_x != 2 || blocks.k_x() != 2 {
        return Err(IvError::Unsupported(
            "block median-of-medians is defined for two exposures".into(),
        ));
    }
    if blocks.k_z() != table.k_z {
        return Err(IvError::Invalid("block structure does not match the table".into()));
    }
    let mut per_instrument = BTreeMap::new();
    for j in 0..table.k_z {
        let partners = table
            .entries
            .iter()
            .filter(|(s, _)| s.contains(&j) && blocks.covers_all(s))
            .map(|(_, e)| &e.beta);
        let v = elementwise_median(partners, 2).ok_or(IvError::NoPartner(j))?;
        per_instrument.insert(j, v);
    }
    let beta_mm = elementwise_median(per_instrument.values(), 2).expect("k_z ≥ 1");
    Ok(MedianTreeEstimate {
        beta_mm,
        per_instrument,
        depth: 1,
    })
}

/// α̂ = (ZᵀZ)⁻¹Zᵀ(y − Xβ̂).
pub fn alpha_from_beta(data: &Dataset, beta: &DVector<f64>) -> Result<DVector<f64>> {
    let model = IvModel::new(data)?;
    Ok(alpha_with_model(&model, beta))
}

pub fn alpha_with_model(model: &IvModel<'_>, beta: &DVector<f64>) -> DVector<f64> {
    let d = model.data();
    model.z_factor().solve_vec(&(&d.y - &d.x * beta))
}

/// Generalised majority rule: k_V > (k_z + k_x − 1)/2.
pub fn generalized_majority_holds(k_valid: usize, k_z: usize, k_x: usize) -> bool {
    2 * k_valid > k_z + k_x - 1
}

/// Smallest number of valid instruments satisfying the generalised rule.
pub fn min_valid_generalized(k_z: usize, k_x: usize) -> usize {
    (0..=k_z)
        .find(|&k| generalized_majority_holds(k, k_z, k_x))
        .unwrap_or(k_z + 1)
}

/// Naive-median requirement: more than half of all just-identifying sets
/// consist of valid instruments only.
pub fn naive_majority_holds(k_valid: usize, k_z: usize, k_x: usize) -> bool {
    2 * binomial(k_valid, k_x) > binomial(k_z, k_x)
}

pub fn min_valid_naive(k_z: usize, k_x: usize) -> usize {
    (0..=k_z)
        .find(|&k| naive_majority_holds(k, k_z, k_x))
        .unwrap_or(k_z + 1)
}
