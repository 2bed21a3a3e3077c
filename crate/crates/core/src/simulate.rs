//! Monte Carlo designs with planted invalid instruments and the study runner
//! that scores each estimator across replications.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::{StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alasso::{lars_weighted_path, ztilde_with_model, AdaptiveWeights};
use crate::data::{BlockStructure, Dataset, TruthInfo};
use crate::error::{IvError, Result};
use crate::iv::IvModel;
use crate::median::{
    alpha_with_model, block_median_of_medians, enumerate_with_model, median_of_medians,
    DEFAULT_ENUMERATION_CAP,
};
use crate::rng::{self, Block};
use crate::selection::{
    cv_curve, default_p_threshold, downward_testing_with, select_from_curve, CvRule, DEFAULT_FOLDS,
};
use crate::stats::{median, std_dev};

/// One uniform block of first-stage coefficients. Block q fills exposure q's
/// column over its own rows; everything else is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiBlock {
    pub length: usize,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PiSpec {
    Dense { lower: f64, upper: f64 },
    Block { blocks: Vec<PiBlock> },
}

fn default_decay() -> f64 {
    0.5
}
fn default_one() -> f64 {
    1.0
}
fn default_ddof() -> usize {
    1
}
fn default_folds() -> usize {
    DEFAULT_FOLDS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub k_z: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    /// corr(U, E_q) per exposure; the E_q are mutually uncorrelated.
    pub rho: Vec<f64>,
    #[serde(default = "default_decay")]
    pub sigma_z_decay: f64,
    pub pi: PiSpec,
    #[serde(default)]
    pub seed: u64,
    /// Draw π once per study instead of once per replication.
    #[serde(default)]
    pub fix_pi: bool,
    /// Multiplies every structural and first-stage error; 0 gives noiseless data.
    #[serde(default = "default_one")]
    pub noise_scale: f64,
    /// Divisor offset for the SD column.
    #[serde(default = "default_ddof")]
    pub sd_ddof: usize,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_one")]
    pub nu: f64,
    /// Downward-testing threshold; 0.1/ln(n) when absent.
    #[serde(default)]
    pub p_threshold: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Table3,
    Table4,
}

impl FromStr for Preset {
    type Err = IvError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table3" => Ok(Preset::Table3),
            "table4" => Ok(Preset::Table4),
            other => Err(IvError::Config(format!(
                "unknown preset `{other}` (expected table3 or table4)"
            ))),
        }
    }
}

impl SimConfig {
    /// 21 instruments relevant for both exposures, the first nine invalid
    /// with α_j = 0.4.
    pub fn table3(n: usize) -> Self {
        let mut alpha = vec![0.4; 9];
        alpha.extend(vec![0.0; 12]);
        SimConfig {
            n,
            k_z: 21,
            beta: vec![0.3, 0.6],
            alpha,
            rho: vec![0.25, 0.3],
            sigma_z_decay: 0.5,
            pi: PiSpec::Dense {
                lower: 1.5,
                upper: 2.5,
            },
            seed: 0,
            fix_pi: false,
            noise_scale: 1.0,
            sd_ddof: 1,
            folds: DEFAULT_FOLDS,
            nu: 1.0,
            p_threshold: None,
        }
    }

    /// Separate instrument sets: 10 for the first exposure (4 invalid), 11
    /// for the second (5 invalid).
    pub fn table4(n: usize) -> Self {
        let mut alpha = vec![1.0; 4];
        alpha.extend(vec![0.0; 6]);
        alpha.extend(vec![1.0; 5]);
        alpha.extend(vec![0.0; 6]);
        let block = |length| PiBlock {
            length,
            lower: 1.5,
            upper: 2.5,
        };
        SimConfig {
            alpha,
            pi: PiSpec::Block {
                blocks: vec![block(10), block(11)],
            },
            ..Self::table3(n)
        }
    }

    pub fn preset(p: Preset, n: usize) -> Self {
        match p {
            Preset::Table3 => Self::table3(n),
            Preset::Table4 => Self::table4(n),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: SimConfig = toml::from_str(text).map_err(|e| IvError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn k_x(&self) -> usize {
        self.beta.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(IvError::Config(m));
        let (k_x, k_z) = (self.k_x(), self.k_z);
        if k_x == 0 {
            return bad("beta must have at least one entry".into());
        }
        if k_z < k_x {
            return bad(format!("k_z = {k_z} is smaller than the number of exposures {k_x}"));
        }
        if self.alpha.len() != k_z {
            return bad(format!("alpha has {} entries, expected k_z = {k_z}", self.alpha.len()));
        }
        if self.rho.len() != k_x {
            return bad(format!("rho has {} entries, expected {k_x}", self.rho.len()));
        }
        if self.n <= k_z + k_x {
            return bad(format!("n = {} must exceed k_z + k_x = {}", self.n, k_z + k_x));
        }
        let all = self.beta.iter().chain(&self.alpha).chain(&self.rho);
        if all.into_iter().any(|v| !v.is_finite()) {
            return bad("beta, alpha and rho must be finite".into());
        }
        if self.rho.iter().any(|r| r.abs() >= 1.0) || self.rho.iter().map(|r| r * r).sum::<f64>() >= 1.0 {
            return bad("error covariance is not positive definite (need Σ ρ_q² < 1)".into());
        }
        if self.sigma_z_decay.is_nan() || self.sigma_z_decay.abs() >= 1.0 {
            return bad("sigma_z_decay must lie in (-1, 1)".into());
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be non-negative".into());
        }
        if self.nu.is_nan() || self.nu <= 0.0 {
            return bad("nu must be positive".into());
        }
        if self.folds < 2 {
            return bad("folds must be at least 2".into());
        }
        if let Some(p) = self.p_threshold {
            if !(p > 0.0 && p < 1.0) {
                return bad("p_threshold must lie in (0, 1)".into());
            }
        }
        match &self.pi {
            PiSpec::Dense { lower, upper } => check_bounds(*lower, *upper)?,
            PiSpec::Block { blocks } => {
                if blocks.len() != k_x {
                    return bad(format!("{} pi blocks for {k_x} exposures", blocks.len()));
                }
                let total: usize = blocks.iter().map(|b| b.length).sum();
                if total != k_z {
                    return bad(format!("pi block lengths sum to {total}, expected k_z = {k_z}"));
                }
                for b in blocks {
                    if b.length == 0 {
                        return bad("pi blocks must be non-empty".into());
                    }
                    check_bounds(b.lower, b.upper)?;
                }
            }
        }
        Ok(())
    }

    /// Relevance pattern implied by a block π spec.
    pub fn block_structure(&self) -> Option<BlockStructure> {
        match &self.pi {
            PiSpec::Dense { .. } => None,
            PiSpec::Block { blocks } => {
                let mut start = 0;
                let sets: Vec<BTreeSet<usize>> = blocks
                    .iter()
                    .map(|b| {
                        let s = (start..start + b.length).collect();
                        start += b.length;
                        s
                    })
                    .collect();
                BlockStructure::from_sets(&sets, self.k_z).ok()
            }
        }
    }

    pub fn truth(&self) -> TruthInfo {
        TruthInfo::new(self.beta.clone(), self.alpha.clone())
    }

    pub fn effective_p_threshold(&self) -> f64 {
        self.p_threshold.unwrap_or_else(|| default_p_threshold(self.n))
    }
}

fn check_bounds(lower: f64, upper: f64) -> Result<()> {
    if !(lower.is_finite() && upper.is_finite() && lower < upper) {
        return Err(IvError::Config(format!(
            "pi bounds must satisfy lower < upper, got [{lower}, {upper}]"
        )));
    }
    Ok(())
}

fn draw_pi(config: &SimConfig, rng: &mut impl Rng) -> DMatrix<f64> {
    let (k_z, k_x) = (config.k_z, config.k_x());
    let mut pi = DMatrix::zeros(k_z, k_x);
    match &config.pi {
        PiSpec::Dense { lower, upper } => {
            let u = Uniform::new(*lower, *upper).expect("validated bounds");
            // Column-major: π₁ first, then π₂.
            for q in 0..k_x {
                for j in 0..k_z {
                    pi[(j, q)] = rng.sample(u);
                }
            }
        }
        PiSpec::Block { blocks } => {
            let mut start = 0;
            for (q, b) in blocks.iter().enumerate() {
                let u = Uniform::new(b.lower, b.upper).expect("validated bounds");
                for j in start..start + b.length {
                    pi[(j, q)] = rng.sample(u);
                }
                start += b.length;
            }
        }
    }
    pi
}

fn toeplitz_cholesky(k: usize, decay: f64) -> DMatrix<f64> {
    let sigma = DMatrix::from_fn(k, k, |i, j| decay.powi((i as i32 - j as i32).abs()));
    sigma.cholesky().expect("|decay| < 1 gives a PD Toeplitz matrix").l()
}

/// Replication `rep` of the design; identical (config, rep) gives
/// bit-identical data.
pub fn generate_dataset(config: &SimConfig, rep: u64) -> Result<(Dataset, TruthInfo)> {
    config.validate()?;
    let (n, k_z, k_x) = (config.n, config.k_z, config.k_x());
    let pi_rep = if config.fix_pi { u64::MAX >> 8 } else { rep };
    let pi = draw_pi(config, &mut rng::stream(config.seed, pi_rep, Block::Pi));

    let mut zr = rng::stream(config.seed, rep, Block::Instruments);
    let raw = DMatrix::from_fn(n, k_z, |_, _| zr.sample::<f64, _>(StandardNormal));
    let z = raw * toeplitz_cholesky(k_z, config.sigma_z_decay).transpose();

    // (U, E_1..E_kx): unit variances, corr(U, E_q) = ρ_q, E's uncorrelated.
    let m = k_x + 1;
    let mut cov = DMatrix::identity(m, m);
    for q in 0..k_x {
        cov[(0, q + 1)] = config.rho[q];
        cov[(q + 1, 0)] = config.rho[q];
    }
    let l = cov
        .cholesky()
        .ok_or_else(|| IvError::Config("error covariance is not positive definite".into()))?
        .l();
    let mut er = rng::stream(config.seed, rep, Block::Errors);
    let raw = DMatrix::from_fn(n, m, |_, _| er.sample::<f64, _>(StandardNormal));
    let errors = raw * l.transpose() * config.noise_scale;
    let u = errors.column(0).into_owned();
    let e = errors.columns(1, k_x).into_owned();

    let x = &z * pi + e;
    let beta = DVector::from_column_slice(&config.beta);
    let alpha = DVector::from_column_slice(&config.alpha);
    let y = &x * beta + &z * alpha + u;
    Ok((Dataset::new(y, x, z)?, config.truth()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    #[serde(rename = "oracle_2sls")]
    Oracle2sls,
    #[serde(rename = "naive_2sls")]
    Naive2sls,
    Mm,
    MmBlock,
    AlassoCv,
    PostAlassoCv,
    AlassoCvse,
    PostAlassoCvse,
    PostAlassoSargan,
    PostAlassoSarganBlock,
}

impl Estimator {
    pub const ALL: [Estimator; 10] = [
        Estimator::Oracle2sls,
        Estimator::Naive2sls,
        Estimator::Mm,
        Estimator::MmBlock,
        Estimator::AlassoCv,
        Estimator::PostAlassoCv,
        Estimator::AlassoCvse,
        Estimator::PostAlassoCvse,
        Estimator::PostAlassoSargan,
        Estimator::PostAlassoSarganBlock,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Estimator::Oracle2sls => "oracle_2sls",
            Estimator::Naive2sls => "naive_2sls",
            Estimator::Mm => "mm",
            Estimator::MmBlock => "mm_block",
            Estimator::AlassoCv => "alasso_cv",
            Estimator::PostAlassoCv => "post_alasso_cv",
            Estimator::AlassoCvse => "alasso_cvse",
            Estimator::PostAlassoCvse => "post_alasso_cvse",
            Estimator::PostAlassoSargan => "post_alasso_sargan",
            Estimator::PostAlassoSarganBlock => "post_alasso_sargan_block",
        }
    }

    /// Row set of the dense-design table.
    pub fn table3_set() -> Vec<Estimator> {
        use Estimator::*;
        vec![
            Oracle2sls,
            Naive2sls,
            Mm,
            AlassoCv,
            PostAlassoCv,
            AlassoCvse,
            PostAlassoCvse,
            PostAlassoSargan,
        ]
    }

    /// Row set of the block-design table.
    pub fn table4_set() -> Vec<Estimator> {
        use Estimator::*;
        vec![Oracle2sls, Naive2sls, Mm, PostAlassoSargan, MmBlock, PostAlassoSarganBlock]
    }

    pub fn default_set(p: Preset) -> Vec<Estimator> {
        match p {
            Preset::Table3 => Self::table3_set(),
            Preset::Table4 => Self::table4_set(),
        }
    }

    fn selects(self) -> bool {
        !matches!(self, Estimator::Mm | Estimator::MmBlock)
    }

    fn needs_blocks(self) -> bool {
        matches!(self, Estimator::MmBlock | Estimator::PostAlassoSarganBlock)
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Estimator {
    type Err = IvError;
    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.tag() == s)
            .ok_or_else(|| IvError::Config(format!("unknown estimator `{s}`")))
    }
}

/// What one estimator produced in one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub beta: Vec<f64>,
    /// Selected invalid set for estimators that select.
    pub invalid: Option<BTreeSet<usize>>,
}

type Cell = std::result::Result<Outcome, String>;

/// Runs every requested estimator on one dataset. Shared stages (initial
/// estimate, path, CV curve) are computed once.
pub fn run_estimators(
    config: &SimConfig,
    data: &Dataset,
    truth: &TruthInfo,
    estimators: &[Estimator],
    cv_seed: u64,
) -> Vec<Cell> {
    let model = match IvModel::new(data) {
        Ok(m) => m,
        Err(e) => return vec![Err(e.to_string()); estimators.len()],
    };
    let p = config.effective_p_threshold();
    let wants = |set: &[Estimator]| estimators.iter().any(|e| set.contains(e));
    use Estimator::*;

    let fit_outcome = |set: &[usize]| -> Cell {
        let f = model.fit(set).map_err(|e| e.to_string())?;
        Ok(Outcome {
            beta: f.beta_hat.iter().copied().collect(),
            invalid: Some(f.invalid_set.iter().copied().collect()),
        })
    };
    let weights_from = |beta: &DVector<f64>| -> std::result::Result<AdaptiveWeights, String> {
        AdaptiveWeights::from_initial(&alpha_with_model(&model, beta), config.nu).map_err(|e| e.to_string())
    };
    let sargan_dt = |w: &AdaptiveWeights| -> Cell {
        let zt = ztilde_with_model(&model).map_err(|e| e.to_string())?;
        let path = lars_weighted_path(&zt, &data.y, w).map_err(|e| e.to_string())?;
        let r = downward_testing_with(&model, &path, p).map_err(|e| e.to_string())?;
        Ok(Outcome {
            beta: r.post_fit.beta_hat.iter().copied().collect(),
            invalid: Some(r.invalid_set.iter().copied().collect()),
        })
    };

    let mm: Option<std::result::Result<DVector<f64>, String>> =
        wants(&[Mm, AlassoCv, PostAlassoCv, AlassoCvse, PostAlassoCvse, PostAlassoSargan]).then(|| {
            let t = enumerate_with_model(&model, None, DEFAULT_ENUMERATION_CAP).map_err(|e| e.to_string())?;
            Ok(median_of_medians(&t).map_err(|e| e.to_string())?.beta_mm)
        });
    let blocks = config.block_structure();
    let mm_block: Option<std::result::Result<DVector<f64>, String>> =
        wants(&[MmBlock, PostAlassoSarganBlock]).then(|| {
            let b = blocks
                .as_ref()
                .ok_or_else(|| "block estimators need a block pi spec".to_string())?;
            let t = enumerate_with_model(&model, Some(b), DEFAULT_ENUMERATION_CAP).map_err(|e| e.to_string())?;
            Ok(block_median_of_medians(&t, b).map_err(|e| e.to_string())?.beta_mm)
        });
    let weights = mm.as_ref().map(|r| r.clone().and_then(|b| weights_from(&b)));
    let cv = wants(&[AlassoCv, PostAlassoCv, AlassoCvse, PostAlassoCvse]).then(|| {
        let w = weights.clone().expect("mm computed")?;
        let (path, curve) = cv_curve(&model, &w, config.folds, cv_seed).map_err(|e| e.to_string())?;
        let pick = |rule| select_from_curve(&model, &path, &curve, rule).map_err(|e| e.to_string());
        Ok::<_, String>((pick(CvRule::Min), pick(CvRule::OneSe)))
    });

    estimators
        .iter()
        .map(|&est| -> Cell {
            let beta_only = |b: &std::result::Result<DVector<f64>, String>| -> Cell {
                Ok(Outcome {
                    beta: b.clone()?.iter().copied().collect(),
                    invalid: None,
                })
            };
            let cv_outcome = |one_se: bool, post: bool| -> Cell {
                let (min, se) = cv.clone().expect("cv computed")?;
                let r = if one_se { se } else { min }?;
                let beta = if post {
                    r.post_fit.beta_hat.clone()
                } else {
                    r.alasso_beta.clone().expect("cv sets alasso beta")
                };
                Ok(Outcome {
                    beta: beta.iter().copied().collect(),
                    invalid: Some(r.invalid_set.iter().copied().collect()),
                })
            };
            match est {
                Oracle2sls => fit_outcome(&truth.invalid.iter().copied().collect::<Vec<_>>()),
                Naive2sls => fit_outcome(&[]),
                Mm => beta_only(mm.as_ref().expect("mm computed")),
                MmBlock => beta_only(mm_block.as_ref().expect("block mm computed")),
                AlassoCv => cv_outcome(false, false),
                PostAlassoCv => cv_outcome(false, true),
                AlassoCvse => cv_outcome(true, false),
                PostAlassoCvse => cv_outcome(true, true),
                PostAlassoSargan => sargan_dt(&weights.clone().expect("mm computed")?),
                PostAlassoSarganBlock => {
                    let b = mm_block.clone().expect("block mm computed")?;
                    sargan_dt(&weights_from(&b)?)
                }
            }
        })
        .collect()
}

/// Per-estimator summary across replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyMetrics {
    pub estimator: Estimator,
    /// Median absolute error per β component, averaged over components.
    pub mae: f64,
    /// Standard deviation per β component, averaged over components.
    pub sd: f64,
    pub mean_invalid: Option<f64>,
    pub freq_all_invalid: Option<f64>,
    pub freq_oracle: Option<f64>,
    /// Successful replications.
    pub reps: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub config: SimConfig,
    pub reps: usize,
    pub estimators: Vec<Estimator>,
    pub metrics: Vec<StudyMetrics>,
    /// First failure message per estimator, if any.
    pub warnings: Vec<String>,
}

/// Runs `reps` replications on a pool of `workers` threads. Results are
/// collected in replication order and aggregated sequentially, so the
/// report does not depend on the worker count.
pub fn run_study(
    config: &SimConfig,
    reps: usize,
    estimators: &[Estimator],
    workers: usize,
) -> Result<StudyReport> {
    config.validate()?;
    if reps == 0 {
        return Err(IvError::Config("reps must be at least 1".into()));
    }
    if estimators.is_empty() {
        return Err(IvError::Config("no estimators requested".into()));
    }
    if config.block_structure().is_none() {
        if let Some(e) = estimators.iter().find(|e| e.needs_blocks()) {
            return Err(IvError::Config(format!("`{e}` needs a block pi spec")));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| IvError::Config(format!("thread pool: {e}")))?;
    let rows: Vec<Vec<Cell>> = pool.install(|| {
        (0..reps as u64)
            .into_par_iter()
            .map(|rep| {
                let cv_seed = rng::stream(config.seed, rep, Block::Folds).next_u64();
                match generate_dataset(config, rep) {
                    Ok((data, truth)) => run_estimators(config, &data, &truth, estimators, cv_seed),
                    Err(e) => vec![Err(e.to_string()); estimators.len()],
                }
            })
            .collect()
    });

    let truth = config.truth();
    let mut metrics = Vec::with_capacity(estimators.len());
    let mut warnings = Vec::new();
    for (i, &est) in estimators.iter().enumerate() {
        let cells: Vec<&Cell> = rows.iter().map(|r| &r[i]).collect();
        let ok: Vec<&Outcome> = cells.iter().filter_map(|c| c.as_ref().ok()).collect();
        let failures = cells.len() - ok.len();
        if let Some(Err(first)) = cells.iter().find(|c| c.is_err()) {
            if failures as f64 >= 0.01 * reps as f64 {
                return Err(IvError::TooManyFailures {
                    estimator: est.tag().into(),
                    failures,
                    reps,
                    first: first.clone(),
                });
            }
            warnings.push(format!("{est}: {failures} failed replications (first: {first})"));
        }
        metrics.push(summarise(est, &ok, &truth, failures, config.sd_ddof));
    }
    Ok(StudyReport {
        config: config.clone(),
        reps,
        estimators: estimators.to_vec(),
        metrics,
        warnings,
    })
}

fn summarise(
    est: Estimator,
    ok: &[&Outcome],
    truth: &TruthInfo,
    failures: usize,
    ddof: usize,
) -> StudyMetrics {
    let k_x = truth.beta.len();
    let mut mae = 0.0;
    let mut sd = 0.0;
    for q in 0..k_x {
        let vals: Vec<f64> = ok.iter().map(|o| o.beta[q]).collect();
        let errs: Vec<f64> = vals.iter().map(|v| (v - truth.beta[q]).abs()).collect();
        mae += median(&errs).unwrap_or(f64::NAN);
        sd += std_dev(&vals, ddof);
    }
    let reps = ok.len();
    let frac = |count: usize| count as f64 / reps as f64;
    let (mean_invalid, freq_all_invalid, freq_oracle) = if est.selects() && reps > 0 {
        let sets: Vec<&BTreeSet<usize>> = ok.iter().filter_map(|o| o.invalid.as_ref()).collect();
        (
            Some(sets.iter().map(|s| s.len()).sum::<usize>() as f64 / reps as f64),
            Some(frac(sets.iter().filter(|s| truth.invalid.is_subset(s)).count())),
            Some(frac(sets.iter().filter(|s| **s == &truth.invalid).count())),
        )
    } else {
        (None, None, None)
    };
    StudyMetrics {
        estimator: est,
        mae: mae / k_x as f64,
        sd: sd / k_x as f64,
        mean_invalid,
        freq_all_invalid,
        freq_oracle,
        reps,
        failures,
    }
}

pub const CSV_HEADER: [&str; 8] = [
    "estimator",
    "mae",
    "sd",
    "mean_invalid",
    "freq_all_invalid",
    "freq_oracle",
    "reps",
    "failures",
];

fn fmt6(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// One row per estimator; floats to six decimals, selection columns empty
/// for estimators that do not select.
pub fn metrics_csv(metrics: &[StudyMetrics]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for m in metrics {
        w.write_record([
            m.estimator.tag().to_string(),
            fmt6(Some(m.mae)),
            fmt6(Some(m.sd)),
            fmt6(m.mean_invalid),
            fmt6(m.freq_all_invalid),
            fmt6(m.freq_oracle),
            m.reps.to_string(),
            m.failures.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| IvError::Invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("ascii output"))
}

/// Fixed-width summary: MAE, SD and the three selection columns.
pub fn metrics_table(metrics: &[StudyMetrics]) -> String {
    let mut out = format!(
        "{:<26}{:>9}{:>9}{:>11}{:>11}{:>10}\n",
        "", "MAE", "SD", "# invalid", "p allinv", "p oracle"
    );
    for m in metrics {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_default();
        out.push_str(&format!(
            "{:<26}{:>9.4}{:>9.4}{:>11}{:>11}{:>10}\n",
            m.estimator.tag(),
            m.mae,
            m.sd,
            opt(m.mean_invalid),
            opt(m.freq_all_invalid),
            opt(m.freq_oracle)
        ));
    }
    out
}
