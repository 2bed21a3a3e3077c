mod common;

use common::{kkt, lasso_problem, random_dataset};
use ivselect_core::alasso::{lars_weighted_path, ztilde_with_model, AdaptiveWeights};
use ivselect_core::median::{alpha_with_model, enumerate_with_model, median_of_medians, DEFAULT_ENUMERATION_CAP};
use ivselect_core::selection::downward_testing_with;
use ivselect_core::{Dataset, IvModel};
use proptest::prelude::*;

fn subset(mask: u32, k_z: usize, max: usize) -> Vec<usize> {
    (0..k_z).filter(|j| mask >> j & 1 == 1).take(max).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lars_breakpoints_are_optimal(seed in any::<u64>()) {
        let p = lasso_problem(seed);
        let w = AdaptiveWeights::from_weights(p.w.clone()).unwrap();
        let path = lars_weighted_path(&p.x, &p.y, &w).unwrap();
        prop_assert!(path.breakpoints.windows(2).all(|b| b[0].lambda > b[1].lambda));
        for bp in &path.breakpoints {
            prop_assert!(kkt(&p, bp.lambda, &bp.alpha) <= 1e-8 * p.y.norm());
        }
    }

    #[test]
    fn two_stage_fit_invariants(seed in any::<u64>(), k_z in 4usize..9, mask in any::<u32>()) {
        let d = random_dataset(seed, 80, 2, k_z);
        let model = IvModel::new(&d).unwrap();
        let set = subset(mask, k_z, k_z - 2);
        let fit = model.fit(&set).unwrap();
        // Residuals are orthogonal to the second-stage regressors.
        let xhat = &model.first_stage().x_hat;
        let scale = d.y.norm() * xhat.norm();
        prop_assert!((xhat.transpose() * &fit.residuals).amax() < 1e-8 * scale);
        for &j in &set {
            prop_assert!(d.z.column(j).dot(&fit.residuals).abs() < 1e-8 * d.y.norm() * d.z.column(j).norm());
        }
        let s = model.sargan(&fit);
        prop_assert_eq!(s.df, k_z - 2 - set.len());
        prop_assert!(s.statistic >= 0.0 && (0.0..=1.0).contains(&s.p_value));
    }

    #[test]
    fn outcome_scaling_is_equivariant(seed in any::<u64>(), c in 0.1f64..10.0) {
        let d = random_dataset(seed, 70, 2, 6);
        let scaled = Dataset::new(&d.y * c, d.x.clone(), d.z.clone()).unwrap();
        let mm = |data: &Dataset| {
            let m = IvModel::new(data).unwrap();
            median_of_medians(&enumerate_with_model(&m, None, DEFAULT_ENUMERATION_CAP).unwrap()).unwrap().beta_mm
        };
        let (a, b) = (mm(&d), mm(&scaled));
        prop_assert!((&a * c - &b).amax() < 1e-8 * (1.0 + b.amax()));
        let set = [0usize, 3];
        let fa = IvModel::new(&d).unwrap().fit(&set).unwrap();
        let fb = IvModel::new(&scaled).unwrap().fit(&set).unwrap();
        prop_assert!((&fa.beta_hat * c - &fb.beta_hat).amax() < 1e-8 * (1.0 + fb.beta_hat.amax()));
    }

    #[test]
    fn selection_partitions_instruments(seed in any::<u64>(), k_z in 5usize..9) {
        let d = random_dataset(seed, 120, 2, k_z);
        let model = IvModel::new(&d).unwrap();
        let tree = median_of_medians(&enumerate_with_model(&model, None, DEFAULT_ENUMERATION_CAP).unwrap()).unwrap();
        let w = AdaptiveWeights::from_initial(&alpha_with_model(&model, &tree.beta_mm), 1.0).unwrap();
        let path = lars_weighted_path(&ztilde_with_model(&model).unwrap(), &d.y, &w).unwrap();
        let r = downward_testing_with(&model, &path, 0.05).unwrap();
        let step = r.path_step.unwrap();
        let mut prefix = path.entry_order[..step].to_vec();
        prefix.sort();
        prop_assert_eq!(&r.invalid_set, &prefix);
        let mut all: Vec<usize> = r.invalid_set.iter().chain(&r.valid_set).copied().collect();
        all.sort();
        prop_assert_eq!(all, (0..k_z).collect::<Vec<_>>());
        prop_assert!(r.valid_set.len() >= 2);
    }
}
