//! Two-stage least squares with a designated set of invalid instruments and
//! the Sargan overidentification test.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{IvError, Result};
use crate::linalg::{self, LeastSquares};
use crate::stats;

const EXACT_FIT_TOL: f64 = 1e-24;

/// First-stage regression of X on Z.
#[derive(Debug, Clone)]
pub struct FirstStage {
    pub pi_hat: DMatrix<f64>,
    pub x_hat: DMatrix<f64>,
}

pub fn first_stage(data: &Dataset) -> Result<FirstStage> {
    first_stage_matrices(&data.z, &data.x)
}

pub fn first_stage_matrices(z: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<FirstStage> {
    let ls = LeastSquares::new(z, "instrument matrix Z")?;
    Ok(first_stage_with(&ls, x))
}

fn first_stage_with(z_ls: &LeastSquares, x: &DMatrix<f64>) -> FirstStage {
    let pi_hat = z_ls.solve(x);
    let x_hat = z_ls.project(x);
    FirstStage { pi_hat, x_hat }
}

/// A 2SLS fit of y on [X, Z_A] using all of Z as instruments, where A is the
/// set of instruments treated as invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoSlsFit {
    pub invalid_set: Vec<usize>,
    pub beta_hat: DVector<f64>,
    pub alpha_hat: DVector<f64>,
    pub residuals: DVector<f64>,
    pub rss: f64,
    /// RSS / n.
    pub sigma2_hat: f64,
    /// σ̂²(R̂ᵀR̂)⁻¹ over (β, α_A).
    pub vcov: DMatrix<f64>,
    pub n: usize,
    pub k_x: usize,
    pub k_z: usize,
}

impl TwoSlsFit {
    /// Overidentifying degrees of freedom k_z − k_x − |A|.
    pub fn df(&self) -> usize {
        self.k_z - self.k_x - self.invalid_set.len()
    }

    pub fn beta_se(&self) -> Vec<f64> {
        (0..self.k_x).map(|i| self.vcov[(i, i)].max(0.0).sqrt()).collect()
    }

    pub fn alpha_se(&self) -> Vec<f64> {
        (self.k_x..self.vcov.nrows())
            .map(|i| self.vcov[(i, i)].max(0.0).sqrt())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SarganResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Per-dataset state shared by every 2SLS fit: the factored instrument
/// matrix and the first stage. Building it once lets downward testing and
/// the just-identified enumeration reuse the factorisation.
#[derive(Debug, Clone)]
pub struct IvModel<'a> {
    data: &'a Dataset,
    z_ls: LeastSquares,
    first: FirstStage,
}

impl<'a> IvModel<'a> {
    pub fn new(data: &'a Dataset) -> Result<Self> {
        data.check_sample_size()?;
        let z_ls = LeastSquares::new(&data.z, "instrument matrix Z")?;
        let first = first_stage_with(&z_ls, &data.x);
        Ok(IvModel { data, z_ls, first })
    }

    pub fn data(&self) -> &'a Dataset {
        self.data
    }

    pub fn first_stage(&self) -> &FirstStage {
        &self.first
    }

    pub fn z_factor(&self) -> &LeastSquares {
        &self.z_ls
    }

    /// Reduced-form coefficients (ZᵀZ)⁻¹Zᵀy.
    pub fn reduced_form(&self) -> DVector<f64> {
        self.z_ls.solve_vec(&self.data.y)
    }

    pub fn fit(&self, invalid_set: &[usize]) -> Result<TwoSlsFit> {
        let d = self.data;
        let (n, k_x, k_z) = (d.n(), d.k_x(), d.k_z());
        let mut invalid: Vec<usize> = invalid_set.to_vec();
        invalid.sort_unstable();
        invalid.dedup();
        if let Some(&j) = invalid.iter().find(|&&j| j >= k_z) {
            return Err(IvError::Invalid(format!("instrument index {j} out of range")));
        }
        if k_z - invalid.len() < k_x {
            return Err(IvError::Underidentified {
                valid: k_z - invalid.len(),
                exposures: k_x,
            });
        }
        let z_inv = d.z.select_columns(&invalid);
        let r_hat = linalg::hcat(&[&self.first.x_hat, &z_inv]);
        let ls = LeastSquares::new(&r_hat, "projected design [X̂, Z_A]")?;
        let theta = ls.solve_vec(&d.y);
        let beta_hat = theta.rows(0, k_x).into_owned();
        let alpha_hat = theta.rows(k_x, invalid.len()).into_owned();
        let residuals = &d.y - &d.x * &beta_hat - &z_inv * &alpha_hat;
        let rss = residuals.norm_squared();
        let sigma2_hat = rss / n as f64;
        let vcov = ls.inverse_gram() * sigma2_hat;
        Ok(TwoSlsFit {
            invalid_set: invalid,
            beta_hat,
            alpha_hat,
            residuals,
            rss,
            sigma2_hat,
            vcov,
            n,
            k_x,
            k_z,
        })
    }

    /// n·(rᵀP_Z r)/(rᵀr) for the fit's structural residual r. A residual at
    /// round-off scale relative to y counts as an exact fit (statistic 0).
    pub fn sargan(&self, fit: &TwoSlsFit) -> SarganResult {
        let df = fit.df();
        if df == 0 || fit.rss <= EXACT_FIT_TOL * self.data.y.norm_squared() {
            return SarganResult {
                statistic: 0.0,
                df,
                p_value: 1.0,
            };
        }
        let statistic = fit.n as f64 * self.z_ls.projected_norm_sq(&fit.residuals) / fit.rss;
        SarganResult {
            statistic,
            df,
            p_value: stats::chi2_sf(statistic, df),
        }
    }
}

/// 2SLS treating `invalid_set` as invalid (controls) and the rest as
/// excluded instruments.
pub fn fit_2sls(data: &Dataset, invalid_set: &[usize]) -> Result<TwoSlsFit> {
    IvModel::new(data)?.fit(invalid_set)
}

pub fn sargan(fit: &TwoSlsFit, data: &Dataset) -> Result<SarganResult> {
    Ok(IvModel::new(data)?.sargan(fit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normal(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    /// y = Xβ + Z_Aα_A (+ noise·u), X = ZΠ + E.
    fn design(n: usize, k_z: usize, invalid: &[usize], noise: f64, seed: u64) -> (Dataset, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = normal(&mut rng, n, k_z);
        let pi = DMatrix::from_fn(k_z, 2, |_, _| rng.random_range(1.0..2.0));
        let e = normal(&mut rng, n, 2);
        let x = &z * &pi + e;
        let beta = vec![0.3, 0.6];
        let mut alpha = vec![0.0; k_z];
        for &j in invalid {
            alpha[j] = 0.5 + j as f64 * 0.1;
        }
        let u = normal(&mut rng, n, 1).column(0).into_owned();
        let y = &x * DVector::from_vec(beta.clone()) + &z * DVector::from_vec(alpha.clone()) + u * noise;
        (Dataset::new(y, x, z).unwrap(), beta, alpha)
    }

    #[test]
    fn noiseless_first_stage_recovers_pi() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = normal(&mut rng, 50, 4);
        let pi = DMatrix::from_fn(4, 2, |i, j| (i + 2 * j) as f64 * 0.5 - 1.0);
        let x = &z * &pi;
        let fs = first_stage_matrices(&z, &x).unwrap();
        assert!((&fs.pi_hat - &pi).amax() < 1e-10);
        assert!((&fs.x_hat - &x).amax() < 1e-10);
    }

    #[test]
    fn saturated_first_stage_reproduces_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = normal(&mut rng, 3, 3);
        let x = normal(&mut rng, 3, 3);
        let fs = first_stage_matrices(&z, &x).unwrap();
        assert!((&fs.x_hat - &x).amax() < 1e-10);
    }

    #[test]
    fn noiseless_oracle_fit_is_exact() {
        let (d, beta, alpha) = design(80, 7, &[0, 3], 0.0, 3);
        let fit = fit_2sls(&d, &[3, 0]).unwrap();
        assert_eq!(fit.invalid_set, vec![0, 3]);
        assert!((fit.beta_hat[0] - beta[0]).abs() < 1e-8);
        assert!((fit.beta_hat[1] - beta[1]).abs() < 1e-8);
        assert!((fit.alpha_hat[0] - alpha[0]).abs() < 1e-8);
        assert!((fit.alpha_hat[1] - alpha[3]).abs() < 1e-8);
        assert!(fit.residuals.amax() < 1e-8);
        let s = sargan(&fit, &d).unwrap();
        assert_eq!(s.statistic, 0.0);
        assert_eq!(s.df, 3);
    }

    #[test]
    fn superset_of_invalid_gives_zero_residual() {
        let (d, _, _) = design(80, 7, &[1], 0.0, 4);
        let fit = fit_2sls(&d, &[1, 4]).unwrap();
        assert!(fit.residuals.amax() < 1e-8);
        let s = sargan(&fit, &d).unwrap();
        assert!(s.statistic < 1e-8);
    }

    #[test]
    fn just_identified_matches_moment_equations() {
        let (full, _, _) = design(60, 2, &[], 1.0, 5);
        let fit = fit_2sls(&full, &[]).unwrap();
        // (ZᵀX)⁻¹Zᵀy
        let zx = full.z.transpose() * &full.x;
        let direct = zx.lu().solve(&(full.z.transpose() * &full.y)).unwrap();
        assert!((&fit.beta_hat - direct).amax() < 1e-9);
        let s = sargan(&fit, &full).unwrap();
        assert_eq!((s.statistic, s.df, s.p_value), (0.0, 0, 1.0));
    }

    #[test]
    fn sargan_df_counts_overidentifying_restrictions() {
        let invalid: Vec<usize> = (0..9).collect();
        let (d, _, _) = design(200, 21, &invalid, 1.0, 6);
        let fit = fit_2sls(&d, &invalid).unwrap();
        assert_eq!(fit.df(), 10);
        assert_eq!(sargan(&fit, &d).unwrap().df, 10);
    }

    #[test]
    fn underidentified_is_rejected() {
        let (d, _, _) = design(60, 4, &[], 1.0, 7);
        assert!(matches!(
            fit_2sls(&d, &[0, 1, 2]).unwrap_err(),
            IvError::Underidentified { valid: 1, exposures: 2 }
        ));
    }

    #[test]
    fn joint_solve_agrees_with_partitioned_form() {
        let (d, _, _) = design(150, 6, &[2, 5], 1.0, 8);
        let inv = [2usize, 5];
        let fit = fit_2sls(&d, &inv).unwrap();
        // One-shot 2SLS on R = [X, Z_A] with instruments Z.
        let r = linalg::hcat(&[&d.x, &d.z.select_columns(&inv)]);
        let pz = &d.z * (d.z.transpose() * &d.z).try_inverse().unwrap() * d.z.transpose();
        let lhs = r.transpose() * &pz * &r;
        let theta = lhs.try_inverse().unwrap() * r.transpose() * &pz * &d.y;
        assert!((fit.beta_hat[0] - theta[0]).abs() < 1e-8);
        assert!((fit.beta_hat[1] - theta[1]).abs() < 1e-8);
        assert!((fit.alpha_hat[0] - theta[2]).abs() < 1e-8);
        assert!((fit.alpha_hat[1] - theta[3]).abs() < 1e-8);
        // Partitioned formula for β with M_{Z_A}.
        let za = d.z.select_columns(&inv);
        let xh = first_stage(&d).unwrap().x_hat;
        let mxh = linalg::annihilate(&xh, &za).unwrap();
        let beta = (mxh.transpose() * &mxh).try_inverse().unwrap() * mxh.transpose() * &d.y;
        assert!((&fit.beta_hat - beta).amax() < 1e-8);
    }

    #[test]
    fn scale_equivariance() {
        let (d, _, _) = design(120, 6, &[0], 1.0, 9);
        let mut scaled = d.clone();
        scaled.y *= 3.0;
        let a = fit_2sls(&d, &[0]).unwrap();
        let b = fit_2sls(&scaled, &[0]).unwrap();
        assert!((&a.beta_hat * 3.0 - &b.beta_hat).amax() < 1e-8);
        assert!((&a.alpha_hat * 3.0 - &b.alpha_hat).amax() < 1e-8);
        assert!((&a.residuals * 3.0 - &b.residuals).amax() < 1e-8);
        let sa = sargan(&a, &d).unwrap().statistic;
        let sb = sargan(&b, &scaled).unwrap().statistic;
        assert!((sa - sb).abs() < 1e-8);
    }

    #[test]
    fn reparameterisation_invariance() {
        let (d, _, _) = design(120, 5, &[0, 1], 1.0, 10);
        // C mixes invalid columns among themselves and adds invalid columns
        // into valid ones; the spans of Z and Z_A are preserved.
        let mut c = DMatrix::<f64>::identity(5, 5);
        c[(0, 0)] = 2.0;
        c[(1, 0)] = 1.0;
        c[(0, 1)] = -0.5;
        c[(0, 3)] = 0.7;
        c[(4, 2)] = 0.3;
        let mut d2 = d.clone();
        d2.z = &d.z * c;
        let a = fit_2sls(&d, &[0, 1]).unwrap();
        let b = fit_2sls(&d2, &[0, 1]).unwrap();
        assert!((&a.beta_hat - &b.beta_hat).amax() < 1e-8);
        let sa = sargan(&a, &d).unwrap().statistic;
        let sb = sargan(&b, &d2).unwrap().statistic;
        assert!((sa - sb).abs() < 1e-8);
    }

    #[test]
    fn vcov_is_symmetric_psd() {
        let (d, _, _) = design(100, 6, &[4], 1.0, 11);
        let fit = fit_2sls(&d, &[4]).unwrap();
        assert!((&fit.vcov - fit.vcov.transpose()).amax() < 1e-12);
        let eig = fit.vcov.clone().symmetric_eigenvalues();
        assert!(eig.iter().all(|&e| e > -1e-12));
        assert_eq!(fit.beta_se().len(), 2);
        assert_eq!(fit.alpha_se().len(), 1);
    }
}
