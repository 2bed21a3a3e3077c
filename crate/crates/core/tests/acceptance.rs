//! Acceptance run: one PASS/FAIL line per criterion, each at its stated
//! tolerance. Exits non-zero on FAIL only when
//! `IVSELECT_ACCEPTANCE_STRICT=1` is set.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::{
    coordinate_descent, five_instrument_design, kkt, lasso_problem, pipeline_invalid_set, random_dataset,
    tuple_node,
};
use ivselect_core::alasso::{adaptive_lasso_at, lars_weighted_path, AdaptiveWeights};
use ivselect_core::median::{enumerate_just_identified, median_of_medians};
use ivselect_core::selection::{default_p_threshold, exhaustive_downward_testing, DEFAULT_EXHAUSTIVE_CAP};
use ivselect_core::simulate::{generate_dataset, metrics_csv, run_study, Estimator, SimConfig, StudyMetrics};
use ivselect_core::stats::ks_test;
use ivselect_core::IvModel;
use nalgebra::DVector;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const SEED: u64 = 0;
const REPS: usize = 500;

struct Outcome {
    pass: bool,
    detail: String,
}

/// Accumulates named sub-checks of one criterion.
#[derive(Default)]
struct Checks(Vec<(bool, String)>);

impl Checks {
    fn check(&mut self, ok: bool, what: String) {
        self.0.push((ok, what));
    }
    fn within(&mut self, name: &str, got: f64, target: f64, tol: f64) {
        self.check((got - target).abs() <= tol, format!("{name} {got:.4} (target {target} ± {tol})"));
    }
    fn within_rel(&mut self, name: &str, got: f64, target: f64, rel: f64) {
        self.check(
            (got - target).abs() <= rel * target,
            format!("{name} {got:.4} (target {target} ± {:.0}%)", rel * 100.0),
        );
    }
    fn done(self) -> Outcome {
        let pass = self.0.iter().all(|(ok, _)| *ok);
        let detail = self
            .0
            .iter()
            .map(|(ok, s)| format!("{}{s}", if *ok { "" } else { "✗ " }))
            .collect::<Vec<_>>()
            .join("; ");
        Outcome { pass, detail }
    }
}

fn workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn study(mut c: SimConfig, est: &[Estimator]) -> Vec<StudyMetrics> {
    c.seed = SEED;
    run_study(&c, REPS, est, workers()).expect("study runs").metrics
}

fn get(ms: &[StudyMetrics], e: Estimator) -> &StudyMetrics {
    ms.iter().find(|m| m.estimator == e).expect("estimator present")
}

struct Dense {
    n500: Vec<StudyMetrics>,
    n1000: Vec<StudyMetrics>,
    n2000: Vec<StudyMetrics>,
}

fn dense_design_studies() -> Dense {
    use Estimator::*;
    Dense {
        n500: study(SimConfig::table3(500), &[Mm, PostAlassoCv, PostAlassoCvse, PostAlassoSargan]),
        n1000: study(SimConfig::table3(1000), &[Mm]),
        n2000: study(SimConfig::table3(2000), &[Oracle2sls, Naive2sls, Mm, PostAlassoSargan]),
    }
}

fn criterion_1(d: &Dense) -> Outcome {
    let mut c = Checks::default();
    let sar = get(&d.n2000, Estimator::PostAlassoSargan);
    c.within("freq_oracle", sar.freq_oracle.unwrap(), 0.984, 0.05);
    let all = sar.freq_all_invalid.unwrap();
    c.check(all >= 0.99, format!("freq_all_invalid {all:.3} (≥ 0.99)"));
    c.within("mean_invalid", sar.mean_invalid.unwrap(), 9.018, 0.2);
    c.within_rel("oracle MAE", get(&d.n2000, Estimator::Oracle2sls).mae, 0.0305, 0.3);
    let naive = get(&d.n2000, Estimator::Naive2sls).freq_oracle.unwrap();
    c.check(naive == 0.0, format!("naive freq_oracle {naive}"));
    c.done()
}

fn criterion_2(d: &Dense) -> Outcome {
    let mut c = Checks::default();
    let f = |e| get(&d.n500, e).freq_oracle.unwrap();
    let (sar, cv, cvse) = (
        f(Estimator::PostAlassoSargan),
        f(Estimator::PostAlassoCv),
        f(Estimator::PostAlassoCvse),
    );
    c.within("freq_oracle", sar, 0.947, 0.07);
    c.check(sar > cv && sar > cvse, format!("beats cv {cv:.3} and cv-1se {cvse:.3}"));
    c.done()
}

fn criterion_3() -> Outcome {
    use Estimator::*;
    let mut c = Checks::default();
    let n1000 = study(SimConfig::table4(1000), &[Mm, MmBlock, PostAlassoSargan, PostAlassoSarganBlock]);
    c.within("block freq_oracle", get(&n1000, PostAlassoSarganBlock).freq_oracle.unwrap(), 0.987, 0.05);
    let plain = get(&n1000, PostAlassoSargan).freq_oracle.unwrap();
    c.check((0.45..=0.70).contains(&plain), format!("non-block freq_oracle {plain:.3} (in [0.45, 0.70])"));
    for n in [500, 1000, 2000] {
        let ms = if n == 1000 { n1000.clone() } else { study(SimConfig::table4(n), &[Mm, MmBlock]) };
        let (b, m) = (get(&ms, MmBlock).mae, get(&ms, Mm).mae);
        c.check(b < m, format!("n={n} block MAE {b:.4} < MAE {m:.4}"));
    }
    c.done()
}

fn criterion_4(d: &Dense) -> Outcome {
    let mut c = Checks::default();
    let mae: Vec<f64> = [&d.n500, &d.n1000, &d.n2000]
        .iter()
        .map(|ms| get(ms, Estimator::Mm).mae)
        .collect();
    c.check(mae[0] > mae[1] && mae[1] > mae[2], "decreasing in n".into());
    for ((n, got), target) in [500, 1000, 2000].iter().zip(&mae).zip([0.1263, 0.0892, 0.0618]) {
        c.within_rel(&format!("n={n} MAE"), *got, target, 0.3);
    }
    c.done()
}

fn criterion_5() -> Outcome {
    let mut mismatches = 0;
    let mut total = 0;
    for k_x in 1..=3 {
        for k_z in 4..=7 {
            for seed in 0..20 {
                let data = random_dataset(1000 * k_x as u64 + 100 * k_z as u64 + seed, 60, k_x, k_z);
                let table = enumerate_just_identified(&data, None).expect("table");
                let got = median_of_medians(&table).expect("median tree");
                let want = tuple_node(&table, &mut Vec::new());
                total += 1;
                mismatches += usize::from(got.beta_mm.as_slice() != &want[..]);
            }
        }
    }
    Outcome {
        pass: mismatches == 0,
        detail: format!("{mismatches} exact mismatches in {total} datasets"),
    }
}

fn criterion_6() -> Outcome {
    let (mut worst_kkt, mut worst_cd) = (0.0f64, 0.0f64);
    for seed in 0..50 {
        let p = lasso_problem(seed);
        let weights = AdaptiveWeights::from_weights(p.w.clone()).expect("weights");
        let path = lars_weighted_path(&p.x, &p.y, &weights).expect("path");
        let scale = p.y.norm();
        let mut warm = DVector::zeros(p.x.ncols());
        for bp in &path.breakpoints {
            worst_kkt = worst_kkt.max(kkt(&p, bp.lambda, &bp.alpha) / scale);
            let cd = coordinate_descent(&p, bp.lambda, &warm);
            worst_cd = worst_cd.max((adaptive_lasso_at(&path, bp.lambda) - &cd).amax());
            warm = cd;
        }
    }
    Outcome {
        pass: worst_kkt <= 1e-8 && worst_cd <= 1e-6,
        detail: format!("max KKT/‖y‖ {worst_kkt:.2e} (≤ 1e-8); max |LARS − CD| {worst_cd:.2e} (≤ 1e-6)"),
    }
}

fn criterion_7() -> Outcome {
    let mut c = Checks::default();
    let mut config = SimConfig::table3(2000);
    config.seed = SEED;
    let invalid: Vec<usize> = (0..9).collect();
    let stats: Vec<f64> = (0..2000)
        .map(|rep| {
            let (d, _) = generate_dataset(&config, rep).expect("data");
            let model = IvModel::new(&d).expect("model");
            model.sargan(&model.fit(&invalid).expect("fit")).statistic
        })
        .collect();
    let chi2 = ChiSquared::new(10.0).expect("df");
    let ks = ks_test(&stats, |x| chi2.cdf(x));
    c.check(ks.p_value > 0.01, format!("KS D {:.4}, p {:.3} (> 0.01)", ks.statistic, ks.p_value));
    let (d, _) = generate_dataset(&config, 0).expect("data");
    let model = IvModel::new(&d).expect("model");
    let s = model.sargan(&model.fit(&(0..19).collect::<Vec<_>>()).expect("fit"));
    c.check(s.df == 0 && s.statistic == 0.0 && s.p_value == 1.0, format!("df 0 gives ({}, {})", s.statistic, s.p_value));
    c.done()
}

fn criterion_8() -> Outcome {
    let mut config = five_instrument_design(5000);
    config.seed = SEED;
    let p = default_p_threshold(config.n);
    let agree = (0..100)
        .filter(|&rep| {
            let (d, _) = generate_dataset(&config, rep).expect("data");
            let ex = exhaustive_downward_testing(&d, DEFAULT_EXHAUSTIVE_CAP, p).expect("exhaustive");
            pipeline_invalid_set(&d) == ex.invalid_set
        })
        .count();
    Outcome {
        pass: agree >= 95,
        detail: format!("{agree} of 100 identical (≥ 95)"),
    }
}

fn criterion_9() -> Outcome {
    let mut mismatches = Vec::new();
    for (name, mut c, est) in [
        ("dense", SimConfig::table3(500), Estimator::table3_set()),
        ("block", SimConfig::table4(500), Estimator::table4_set()),
    ] {
        c.seed = 42;
        let csv = |w| metrics_csv(&run_study(&c, 40, &est, w).expect("study").metrics).expect("csv");
        let first = csv(1);
        for w in [1, 2, 4, 8] {
            if csv(w) != first {
                mismatches.push(format!("{name} at {w} workers"));
            }
        }
    }
    Outcome {
        pass: mismatches.is_empty(),
        detail: if mismatches.is_empty() {
            "CSV identical across repeats and 1/2/4/8 workers".into()
        } else {
            format!("differs: {}", mismatches.join(", "))
        },
    }
}

fn main() -> ExitCode {
    let strict = std::env::var("IVSELECT_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let start = Instant::now();
    let dense = dense_design_studies();
    let results = [
        ("dense design n=2000 selection and oracle MAE", criterion_1(&dense)),
        ("dense design n=500 Sargan beats cross-validation", criterion_2(&dense)),
        ("block design dominance", criterion_3()),
        ("median-of-medians MAE trend", criterion_4(&dense)),
        ("median tree equals ordered-tuple recursion", criterion_5()),
        ("LARS path KKT and coordinate descent", criterion_6()),
        ("Sargan calibration", criterion_7()),
        ("path versus exhaustive downward testing", criterion_8()),
        ("byte-identical study reports", criterion_9()),
    ];
    let mut failed = 0;
    for (i, (name, o)) in results.iter().enumerate() {
        failed += usize::from(!o.pass);
        println!("{} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    println!(
        "acceptance: {} passed, {failed} failed ({:.1}s, {} workers)",
        results.len() - failed,
        start.elapsed().as_secs_f64(),
        workers()
    );
    if strict && failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
