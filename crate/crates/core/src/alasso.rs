//! Adaptive Lasso for the direct effects α on the projected instruments
//! Z̃ = M_X̂ Z, computed as an exact piecewise-linear path.
//!
//! The weighted problem ½‖y − Z̃α‖² + λ Σ w_j|α_j| is solved by rescaling
//! column j by 1/w_j and running the Lasso variant of LARS on the rescaled
//! columns (a homotopy in λ with drop steps on sign changes).

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{IvError, Result};
use crate::iv::IvModel;
use crate::linalg::{numerical_rank, LeastSquares};

/// Relative tolerance for treating two event λs as simultaneous.
pub const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptiveWeights {
    /// w_j = 1/|α̂_j|^ν; `f64::INFINITY` on frozen columns.
    pub weights: Vec<f64>,
    pub nu: f64,
    /// Instruments with an exactly zero initial estimate. They can never
    /// enter the path.
    pub frozen_valid: BTreeSet<usize>,
}

impl AdaptiveWeights {
    pub fn from_initial(alpha_init: &DVector<f64>, nu: f64) -> Result<Self> {
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(IvError::Invalid(format!("nu must be positive, got {nu}")));
        }
        if alpha_init.iter().any(|a| !a.is_finite()) {
            return Err(IvError::Invalid("initial alpha has non-finite entries".into()));
        }
        let mut frozen_valid = BTreeSet::new();
        let mut weights = Vec::with_capacity(alpha_init.len());
        for (j, &a) in alpha_init.iter().enumerate() {
            let w = 1.0 / a.abs().powf(nu);
            if a == 0.0 || !w.is_finite() {
                frozen_valid.insert(j);
                weights.push(f64::INFINITY);
            } else {
                weights.push(w);
            }
        }
        Ok(AdaptiveWeights {
            weights,
            nu,
            frozen_valid,
        })
    }

    /// Explicit positive weights; infinite entries are frozen.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let mut frozen_valid = BTreeSet::new();
        for (j, &w) in weights.iter().enumerate() {
            if w == f64::INFINITY {
                frozen_valid.insert(j);
            } else if !(w > 0.0 && w.is_finite()) {
                return Err(IvError::Invalid(format!("weight {j} must be positive, got {w}")));
            }
        }
        Ok(AdaptiveWeights {
            weights,
            nu: 1.0,
            frozen_valid,
        })
    }

    pub fn uniform(k: usize) -> Self {
        AdaptiveWeights {
            weights: vec![1.0; k],
            nu: 1.0,
            frozen_valid: BTreeSet::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn scaled(&self, c: f64) -> Self {
        AdaptiveWeights {
            weights: self.weights.iter().map(|w| w * c).collect(),
            nu: self.nu,
            frozen_valid: self.frozen_valid.clone(),
        }
    }
}

/// Z̃ = M_X̂ Z.
pub fn build_ztilde(data: &Dataset) -> Result<DMatrix<f64>> {
    ztilde_with_model(&IvModel::new(data)?)
}

pub fn ztilde_with_model(model: &IvModel<'_>) -> Result<DMatrix<f64>> {
    let x_hat = &model.first_stage().x_hat;
    let ls = LeastSquares::new(x_hat, "first-stage fitted exposures X̂")?;
    Ok(ls.annihilate(&model.data().z))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "instrument", rename_all = "snake_case")]
pub enum PathEvent {
    Enter(usize),
    Drop(usize),
    /// λ reached zero.
    End,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Breakpoint {
    pub lambda: f64,
    pub active_set: Vec<usize>,
    pub alpha: Vec<f64>,
    pub event: PathEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LarsPath {
    pub breakpoints: Vec<Breakpoint>,
    /// Instruments in order of first entry; later re-entries are not repeated.
    pub entry_order: Vec<usize>,
    pub max_active: usize,
    pub warnings: Vec<String>,
}

impl LarsPath {
    pub fn lambda_max(&self) -> f64 {
        self.breakpoints.first().map_or(0.0, |b| b.lambda)
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.breakpoints.iter().map(|b| b.lambda).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Step {
    Enter(usize),
    Drop(usize),
    End,
}

/// Lasso path of ½‖y − Z̃α‖² + λ Σ w_j|α_j| from λ_max down to zero.
pub fn lars_weighted_path(
    ztilde: &DMatrix<f64>,
    y: &DVector<f64>,
    weights: &AdaptiveWeights,
) -> Result<LarsPath> {
    let k = ztilde.ncols();
    if weights.len() != k {
        return Err(IvError::Invalid(format!(
            "{} weights for {k} columns",
            weights.len()
        )));
    }
    if y.len() != ztilde.nrows() {
        return Err(IvError::Invalid("response length does not match Z̃".into()));
    }
    // Free (non-frozen) columns, rescaled.
    let free: Vec<usize> = (0..k).filter(|j| !weights.frozen_valid.contains(j)).collect();
    let p = free.len();
    let mut c = ztilde.select_columns(&free);
    for (col, &j) in free.iter().enumerate() {
        c.column_mut(col).scale_mut(1.0 / weights.weights[j]);
    }
    let max_active = if p == 0 { 0 } else { numerical_rank(&c) };
    let gram = c.transpose() * &c;
    let c0 = c.transpose() * y;

    let mut warnings = Vec::new();
    let mut breakpoints = Vec::new();
    let mut entry_order = Vec::new();
    let mut b = DVector::<f64>::zeros(p);
    let unscale = |b: &DVector<f64>| -> Vec<f64> {
        let mut alpha = vec![0.0; k];
        for (col, &j) in free.iter().enumerate() {
            alpha[j] = b[col] / weights.weights[j];
        }
        alpha
    };
    let active_labels = |active: &[usize]| -> Vec<usize> {
        let mut v: Vec<usize> = active.iter().map(|&col| free[col]).collect();
        v.sort_unstable();
        v
    };

    let lambda0 = c0.amax();
    let scale = y.norm() * gram.diagonal().iter().fold(0.0f64, |m, g| m.max(g.sqrt()));
    if p == 0 || max_active == 0 || lambda0 <= 1e-13 * scale.max(f64::MIN_POSITIVE) {
        breakpoints.push(Breakpoint {
            lambda: 0.0,
            active_set: vec![],
            alpha: vec![0.0; k],
            event: PathEvent::End,
        });
        return Ok(LarsPath {
            breakpoints,
            entry_order,
            max_active,
            warnings,
        });
    }

    let tol = TIE_TOL * lambda0;
    let tied: Vec<usize> = (0..p).filter(|&i| c0[i].abs() >= lambda0 - tol).collect();
    let first = tied[0];
    if tied.len() > 1 {
        warnings.push(format!(
            "tie among entry candidates {:?} at lambda {lambda0:.6e}; lowest index entered",
            tied.iter().map(|&i| free[i]).collect::<Vec<_>>()
        ));
    }
    let mut active: Vec<usize> = vec![first];
    let mut signs: Vec<f64> = vec![c0[first].signum()];
    let mut lambda = lambda0;
    entry_order.push(free[first]);
    breakpoints.push(Breakpoint {
        lambda,
        active_set: active_labels(&active),
        alpha: vec![0.0; k],
        event: PathEvent::Enter(free[first]),
    });
    let mut just_entered = Some(first);
    let mut just_dropped: Option<(usize, f64)> = None;
    let max_steps = 50 * (p + 1) * (p + 1);

    for _ in 0..max_steps {
        let m = active.len();
        let g_aa = DMatrix::from_fn(m, m, |r, s| gram[(active[r], active[s])]);
        let s_a = DVector::from_vec(signs.clone());
        let d_a = match g_aa.clone().cholesky() {
            Some(ch) => ch.solve(&s_a),
            None => {
                return Err(IvError::RankDeficient {
                    what: "active set of the LARS path".into(),
                    ratio: 0.0,
                    detail: format!("active columns {:?} are collinear", active_labels(&active)),
                })
            }
        };
        let corr = &c0 - &gram * &b;
        // a = G_{·A} d_A
        let mut a = DVector::<f64>::zeros(p);
        for (r, &col) in active.iter().enumerate() {
            a.axpy(d_a[r], &gram.column(col).into_owned(), 1.0);
        }

        let mut candidates: Vec<(f64, Step)> = vec![(lambda, Step::End)];
        if active.len() < max_active {
            for j in 0..p {
                if active.contains(&j) {
                    continue;
                }
                for (sign, num, den) in [(1.0, lambda - corr[j], 1.0 - a[j]), (-1.0, lambda + corr[j], 1.0 + a[j])] {
                    // A dropped variable sits on the boundary with its old
                    // sign; that crossing is the drop itself, the other one
                    // is a genuine re-entry.
                    if just_dropped == Some((j, sign)) {
                        continue;
                    }
                    if den > 1e-12 {
                        let g = num.max(0.0) / den;
                        if g <= lambda {
                            candidates.push((g, Step::Enter(j)));
                        }
                    }
                }
            }
        }
        for (r, &col) in active.iter().enumerate() {
            if Some(col) == just_entered || d_a[r] == 0.0 {
                continue;
            }
            let g = -b[col] / d_a[r];
            if g > 0.0 && g <= lambda {
                candidates.push((g, Step::Drop(col)));
            }
        }
        let gamma = candidates.iter().fold(f64::INFINITY, |m, c| m.min(c.0));
        let near: Vec<Step> = candidates
            .iter()
            .filter(|c| c.0 <= gamma + tol)
            .map(|c| c.1)
            .collect();
        let step = pick_step(&near);
        let entering: BTreeSet<usize> = near
            .iter()
            .filter_map(|s| if let Step::Enter(j) = s { Some(*j) } else { None })
            .collect();
        if matches!(step, Step::Enter(_)) && entering.len() > 1 {
            warnings.push(format!(
                "tie among entry candidates {:?} at lambda {:.6e}; lowest index entered",
                entering.iter().map(|&i| free[i]).collect::<Vec<_>>(),
                lambda - gamma
            ));
        }
        let gamma = match step {
            Step::End => lambda,
            _ => gamma,
        };

        for (r, &col) in active.iter().enumerate() {
            b[col] += gamma * d_a[r];
        }
        lambda = (lambda - gamma).max(0.0);
        just_entered = None;
        just_dropped = None;
        let event = match step {
            Step::End => {
                lambda = 0.0;
                PathEvent::End
            }
            Step::Drop(col) => {
                let r = active.iter().position(|&x| x == col).expect("active");
                active.remove(r);
                let sign = signs.remove(r);
                b[col] = 0.0;
                just_dropped = Some((col, sign));
                PathEvent::Drop(free[col])
            }
            Step::Enter(j) => {
                let cj = c0[j] - gram.row(j).dot(&b.transpose());
                active.push(j);
                signs.push(cj.signum());
                just_entered = Some(j);
                if !entry_order.contains(&free[j]) {
                    entry_order.push(free[j]);
                }
                PathEvent::Enter(free[j])
            }
        };
        breakpoints.push(Breakpoint {
            lambda,
            active_set: active_labels(&active),
            alpha: unscale(&b),
            event,
        });
        if event == PathEvent::End {
            return Ok(LarsPath {
                breakpoints,
                entry_order,
                max_active,
                warnings,
            });
        }
    }
    Err(IvError::Invalid(format!(
        "LARS path did not terminate within {max_steps} steps"
    )))
}

/// Drops win ties; otherwise the lowest-index entry, otherwise the end.
fn pick_step(near: &[Step]) -> Step {
    let drop = near
        .iter()
        .filter_map(|s| if let Step::Drop(j) = s { Some(*j) } else { None })
        .min();
    if let Some(j) = drop {
        return Step::Drop(j);
    }
    let enter = near
        .iter()
        .filter_map(|s| if let Step::Enter(j) = s { Some(*j) } else { None })
        .min();
    match enter {
        Some(j) => Step::Enter(j),
        None => Step::End,
    }
}

/// α̂ at an arbitrary λ ≥ 0 by linear interpolation between breakpoints.
pub fn adaptive_lasso_at(path: &LarsPath, lambda: f64) -> DVector<f64> {
    let bps = &path.breakpoints;
    let k = bps[0].alpha.len();
    if lambda >= bps[0].lambda {
        return DVector::zeros(k);
    }
    let i = bps
        .iter()
        .position(|b| b.lambda <= lambda)
        .unwrap_or(bps.len() - 1);
    let hi = &bps[i - 1];
    let lo = &bps[i];
    if lo.lambda == lambda || hi.lambda == lo.lambda {
        return DVector::from_column_slice(&lo.alpha);
    }
    let t = (hi.lambda - lambda) / (hi.lambda - lo.lambda);
    DVector::from_fn(k, |j, _| hi.alpha[j] + t * (lo.alpha[j] - hi.alpha[j]))
}

/// β̂ = (X̂ᵀX̂)⁻¹X̂ᵀ(y − Zα).
pub fn beta_from_alpha(data: &Dataset, alpha: &DVector<f64>) -> Result<DVector<f64>> {
    beta_with_model(&IvModel::new(data)?, alpha)
}

pub fn beta_with_model(model: &IvModel<'_>, alpha: &DVector<f64>) -> Result<DVector<f64>> {
    let d = model.data();
    let ls = LeastSquares::new(&model.first_stage().x_hat, "first-stage fitted exposures X̂")?;
    Ok(ls.solve_vec(&(&d.y - &d.z * alpha)))
}

/// Largest violation of the weighted-Lasso optimality conditions at
/// (λ, α). Frozen columns are ignored.
pub fn kkt_violation(
    ztilde: &DMatrix<f64>,
    y: &DVector<f64>,
    weights: &AdaptiveWeights,
    lambda: f64,
    alpha: &[f64],
) -> f64 {
    let r = y - ztilde * DVector::from_column_slice(alpha);
    let g = ztilde.transpose() * r;
    let mut worst: f64 = 0.0;
    for j in 0..alpha.len() {
        if weights.frozen_valid.contains(&j) {
            continue;
        }
        let bound = lambda * weights.weights[j];
        let v = if alpha[j] != 0.0 {
            (g[j] - bound * alpha[j].signum()).abs()
        } else {
            (g[j].abs() - bound).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}
