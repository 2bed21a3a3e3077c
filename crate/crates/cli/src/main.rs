//! `ivselect`: instrument selection on a CSV file, and Monte Carlo studies.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 numerical failure.

use std::collections::hash_map::RandomState;
use std::hash::BuildHasher;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ivselect_core::pipeline::{run_select, SelectOptions, SelectReport};
use ivselect_core::selection::SelectionMethod;
use ivselect_core::simulate::{metrics_csv, metrics_table, run_study, Estimator, Preset, SimConfig, StudyReport};
use ivselect_core::{load_csv, BlockStructure, ColumnRoles, IvError};

#[derive(Parser, Debug)]
#[command(name = "ivselect", version, about = "Select valid instruments with multiple exposures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the selection pipeline on a CSV file.
    Select(SelectArgs),
    /// Run a simulation study.
    Simulate(SimulateArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Method {
    SarganDt,
    CvMin,
    #[value(name = "cv-1se")]
    Cv1se,
}

#[derive(Args, Debug, Serialize)]
struct SelectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    outcome: String,
    #[arg(long, value_delimiter = ',', required = true)]
    exposures: Vec<String>,
    #[arg(long, value_delimiter = ',', required = true)]
    instruments: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    /// JSON object mapping each instrument to the exposures it is relevant for.
    #[arg(long)]
    blocks: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "sargan-dt")]
    #[serde(skip)]
    method: Method,
    /// `auto` for 0.1/ln(n), or a number in (0, 1).
    #[arg(long, default_value = "auto")]
    p_threshold: String,
    #[arg(long, default_value_t = 1.0)]
    nu: f64,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Output prefix; writes <out>.json and <out>.csv.
    #[arg(long, default_value = "ivselect-select")]
    out: PathBuf,
    /// Also write every just-identified estimate to this CSV file.
    #[arg(long)]
    dump_just_identified: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    /// TOML study configuration.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["table3", "table4"])]
    preset: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 500)]
    reps: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated estimator tags; defaults to the preset's row set.
    #[arg(long, value_delimiter = ',')]
    estimators: Vec<String>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Draw π once for the whole study.
    #[arg(long)]
    fix_pi: bool,
    #[arg(long, default_value = "ivselect-simulate")]
    out: PathBuf,
}

#[derive(Serialize)]
struct RunReport<'a, A: Serialize, P: Serialize> {
    command: &'a str,
    version: &'a str,
    args: &'a A,
    seed: u64,
    seed_source: &'a str,
    wall_time_secs: f64,
    result: P,
    warnings: Vec<String>,
}

/// A failure tagged with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<IvError> for Failure {
    fn from(e: IvError) -> Self {
        Failure {
            code: if e.is_numerical() { 3 } else { 2 },
            message: e.to_string(),
        }
    }
}

fn usage(message: String) -> Failure {
    Failure { code: 2, message }
}

fn entropy_seed() -> u64 {
    RandomState::new().hash_one(std::process::id() as u64 ^ 0x9e37_79b9_7f4a_7c15)
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))
}

fn cmd_select(args: &SelectArgs) -> Result<(), Failure> {
    let start = Instant::now();
    let p_threshold = match args.p_threshold.as_str() {
        "auto" => None,
        s => {
            let p: f64 = s
                .parse()
                .map_err(|_| usage(format!("--p-threshold: expected `auto` or a number, got `{s}`")))?;
            if !(p > 0.0 && p < 1.0) {
                return Err(usage(format!("--p-threshold: must lie in (0, 1), got {p}")));
            }
            Some(p)
        }
    };
    if args.nu.is_nan() || args.nu <= 0.0 {
        return Err(usage(format!("--nu: must be positive, got {}", args.nu)));
    }
    let (seed, seed_source) = match args.seed {
        Some(s) => (s, "flag"),
        None => (entropy_seed(), "entropy"),
    };
    let roles = ColumnRoles {
        outcome: Some(args.outcome.clone()),
        exposures: args.exposures.clone(),
        instruments: args.instruments.clone(),
        covariates: args.covariates.clone(),
    };
    let data = load_csv(&args.data, &roles).map_err(|e| match e {
        IvError::MissingColumn(c) => usage(format!("--data: missing column `{c}` named by the column flags")),
        other => other.into(),
    })?;
    let blocks = match &args.blocks {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| usage(format!("--blocks: cannot read {}: {e}", p.display())))?;
            Some(BlockStructure::from_json(&text, &data).map_err(|e| usage(format!("--blocks: {e}")))?)
        }
        None => None,
    };
    let opts = SelectOptions {
        method: match args.method {
            Method::SarganDt => SelectionMethod::SarganDt,
            Method::CvMin => SelectionMethod::CvMin,
            Method::Cv1se => SelectionMethod::CvOneSe,
        },
        p_threshold,
        nu: args.nu,
        folds: args.folds,
        seed,
    };
    let (report, table): (SelectReport, _) = run_select(&data, blocks.as_ref(), &opts)?;
    if let Some(path) = &args.dump_just_identified {
        write(path, &table.to_csv(&data.instrument_labels))?;
    }
    let warnings = report.warnings.clone();
    print!("{}", report.summary_table());
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let csv = report.to_csv()?;
    let run = RunReport {
        command: "select",
        version: env!("CARGO_PKG_VERSION"),
        args,
        seed,
        seed_source,
        wall_time_secs: start.elapsed().as_secs_f64(),
        result: report,
        warnings,
    };
    write(&with_ext(&args.out, "json"), &serde_json::to_string_pretty(&run).expect("report serialises"))?;
    write(&with_ext(&args.out, "csv"), &csv)
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), Failure> {
    let start = Instant::now();
    let (mut config, preset, file_seed) = match (&args.config, &args.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("--config: cannot read {}: {e}", path.display())))?;
            let c = SimConfig::from_toml(&text).map_err(|e| usage(format!("--config: {e}")))?;
            let has_seed = text
                .parse::<toml::Table>()
                .map(|t| t.contains_key("seed"))
                .unwrap_or(false);
            let seed = has_seed.then_some(c.seed);
            (c, None, seed)
        }
        (None, Some(name)) => {
            let p: Preset = name.parse()?;
            (SimConfig::preset(p, args.n.unwrap_or(2000)), Some(p), None)
        }
        (None, None) => return Err(usage("one of --config or --preset is required".into())),
    };
    if let Some(n) = args.n {
        config.n = n;
    }
    if args.fix_pi {
        config.fix_pi = true;
    }
    let (seed, seed_source) = match (args.seed, file_seed) {
        (Some(s), _) => (s, "flag"),
        (None, Some(s)) => (s, "config"),
        (None, None) => (entropy_seed(), "entropy"),
    };
    config.seed = seed;
    config.validate().map_err(|e| usage(e.to_string()))?;
    if args.reps == 0 {
        return Err(usage("--reps: must be at least 1".into()));
    }
    if args.workers == 0 {
        return Err(usage("--workers: must be at least 1".into()));
    }
    let estimators: Vec<Estimator> = if args.estimators.is_empty() {
        match preset {
            Some(p) => Estimator::default_set(p),
            None if config.block_structure().is_some() => Estimator::table4_set(),
            None => Estimator::table3_set(),
        }
    } else {
        args.estimators
            .iter()
            .map(|s| s.trim().parse().map_err(|e: IvError| usage(format!("--estimators: {e}"))))
            .collect::<Result<_, _>>()?
    };
    let report: StudyReport = run_study(&config, args.reps, &estimators, args.workers)?;
    print!("{}", metrics_table(&report.metrics));
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let csv = metrics_csv(&report.metrics)?;
    let warnings = report.warnings.clone();
    let run = RunReport {
        command: "simulate",
        version: env!("CARGO_PKG_VERSION"),
        args,
        seed,
        seed_source,
        wall_time_secs: start.elapsed().as_secs_f64(),
        result: report,
        warnings,
    };
    write(&with_ext(&args.out, "json"), &serde_json::to_string_pretty(&run).expect("report serialises"))?;
    write(&with_ext(&args.out, "csv"), &csv)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Select(a) => cmd_select(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
