//! `imts-forge`: score, optimize, generate, and evaluate ODE-derived IMTS
//! datasets.
//!
//! Exit codes: 0 success, 1 user error, 2 internal error, 3 every
//! configuration rejected.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use imts_forge::baseline::{evaluate, spearman, Baseline, EvalConfig, EvalError, EvalReport};
use imts_forge::dsl::SystemSpec;
use imts_forge::generator::{
    lorenz_dataset, materialize_dataset, optimize_spreads, score_config, DatasetConfig, EvalProtocol,
    GenerateError, GeneratorConfig, InitialLaw, OptimizeOutcome, ScoreOutcome, SpreadConfig, SpreadGrid, Verdict,
    DEFAULT_SIGMA_CONST_GRID, DEFAULT_SIGMA_DUR_GRID, DEFAULT_SIGMA_INITIAL_GRID,
};
use imts_forge::io::{eval_csv, read_bundle, verify_bundle, write_bundle, IoError};
use imts_forge::registry::{Registry, RegistryError};
use imts_forge::solver::SolverOptions;

#[derive(Parser, Debug)]
#[command(name = "imts-forge", version, about = "Difficulty-scored IMTS datasets from parametrized ODE systems")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Directory of extra `*.ode` system files.
    #[arg(long, global = true, env = "IMTS_FORGE_SYSTEMS_DIR")]
    systems_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// List registered systems.
    ListSystems,
    /// Score one spread configuration.
    Score {
        system: String,
        #[command(flatten)]
        spread: SpreadArgs,
        #[command(flatten)]
        protocol: ProtocolArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Grid-search the spreads maximizing aggregated JGD.
    Optimize {
        system: String,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        protocol: ProtocolArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Materialize a dataset bundle (optimizing spreads unless all are given).
    Generate {
        system: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        spread: SpreadArgs,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        protocol: ProtocolArgs,
        #[command(flatten)]
        dataset: DatasetArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overwrite an existing bundle.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate time-constant baselines on a bundle; per-fold CSV to stdout.
    Evaluate {
        bundle: PathBuf,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Generate and evaluate the Lorenz benchmark.
    LorenzBench {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        force: bool,
    },
    /// Regenerate a bundle from its manifest and compare hashes.
    Verify { bundle: PathBuf },
    /// JGD vs best-baseline MSE table over bundles, as CSV.
    Report {
        #[arg(required = true)]
        bundles: Vec<PathBuf>,
        #[command(flatten)]
        eval: EvalArgs,
    },
}

#[derive(Args, Debug)]
struct SpreadArgs {
    #[arg(long)]
    sigma_initial: Option<f64>,
    #[arg(long)]
    sigma_const: Option<f64>,
    /// Absolute duration in the system's time unit.
    #[arg(long)]
    sigma_dur: Option<f64>,
}

impl SpreadArgs {
    fn resolve(&self) -> Result<Option<SpreadConfig>, CliError> {
        match (self.sigma_initial, self.sigma_const, self.sigma_dur) {
            (None, None, None) => Ok(None),
            (Some(i), Some(c), Some(d)) => Ok(Some(SpreadConfig::new(i, c, d)?)),
            _ => Err(CliError::User("--sigma-initial, --sigma-const and --sigma-dur must be given together".into())),
        }
    }
}

#[derive(Args, Debug)]
struct GridArgs {
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SIGMA_INITIAL_GRID)]
    grid_initial: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SIGMA_CONST_GRID)]
    grid_const: Vec<f64>,
    /// Multiples of the system's reference duration.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SIGMA_DUR_GRID)]
    grid_dur: Vec<f64>,
}

impl GridArgs {
    fn grid(&self, spec: &SystemSpec) -> SpreadGrid {
        SpreadGrid {
            sigma_initial: self.grid_initial.clone(),
            sigma_const: self.grid_const.clone(),
            sigma_dur: self.grid_dur.iter().map(|m| m * spec.default_duration).collect(),
        }
    }
}

#[derive(Args, Debug)]
struct ProtocolArgs {
    #[arg(long, default_value_t = EvalProtocol::default().eval_samples)]
    eval_samples: usize,
    #[arg(long, default_value_t = EvalProtocol::default().eval_steps)]
    eval_steps: usize,
    #[arg(long, default_value_t = EvalProtocol::default().score_window)]
    score_window: usize,
}

impl ProtocolArgs {
    fn protocol(&self) -> EvalProtocol {
        EvalProtocol { eval_samples: self.eval_samples, eval_steps: self.eval_steps, score_window: self.score_window }
    }
}

#[derive(Args, Debug)]
struct DatasetArgs {
    #[arg(long, default_value_t = DatasetConfig::default().instances)]
    instances: usize,
    #[arg(long, default_value_t = DatasetConfig::default().grid_steps)]
    grid_steps: usize,
    #[arg(long, default_value_t = DatasetConfig::default().window_steps)]
    window_steps: usize,
    #[arg(long, default_value_t = DatasetConfig::default().onset_range)]
    onset_range: usize,
    #[arg(long, default_value_t = DatasetConfig::default().dropout)]
    dropout: f64,
    /// Observation noise standard deviation [default: 0.05].
    #[arg(long, conflicts_with = "noise_var")]
    noise_std: Option<f64>,
    /// Observation noise variance (alternative to --noise-std).
    #[arg(long)]
    noise_var: Option<f64>,
}

impl DatasetArgs {
    fn config(&self, seed: u64) -> Result<DatasetConfig, CliError> {
        let noise_std = match (self.noise_std, self.noise_var) {
            (_, Some(v)) if v < 0.0 => return Err(CliError::User(format!("--noise-var must be >= 0, got {v}"))),
            (_, Some(v)) => v.sqrt(),
            (Some(s), None) => s,
            (None, None) => DatasetConfig::default().noise_std,
        };
        let cfg = DatasetConfig {
            instances: self.instances,
            grid_steps: self.grid_steps,
            window_steps: self.window_steps,
            onset_range: self.onset_range,
            dropout: self.dropout,
            noise_std,
            master_seed: seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Baselines to run (repeatable; default: all).
    #[arg(long = "baseline")]
    baselines: Vec<String>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Observed fraction of each window [default: the bundle's].
    #[arg(long)]
    split_fraction: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Score against noisy retained values instead of ground truth.
    #[arg(long)]
    noisy_targets: bool,
}

impl EvalArgs {
    fn config(&self, bundle_fraction: f64) -> Result<EvalConfig, CliError> {
        let baselines = if self.baselines.is_empty() {
            Baseline::ALL.to_vec()
        } else {
            self.baselines.iter().map(|b| b.parse()).collect::<Result<Vec<Baseline>, _>>()?
        };
        Ok(EvalConfig {
            baselines,
            folds: self.folds,
            split_fraction: self.split_fraction.unwrap_or(bundle_fraction),
            seed: self.seed,
            noisy_targets: self.noisy_targets,
        })
    }
}

#[derive(Debug)]
enum CliError {
    User(String),
    Internal(String),
    AllRejected(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
            CliError::AllRejected(_) => 3,
        }
    }
}

impl From<RegistryError> for CliError {
    fn from(e: RegistryError) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<GenerateError> for CliError {
    fn from(e: GenerateError) -> Self {
        match e {
            GenerateError::InvalidConfig(_) => CliError::User(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Regenerate(_) => CliError::Internal(e.to_string()),
            _ => CliError::User(e.to_string()),
        }
    }
}

fn json<T: serde::Serialize>(value: &T) -> String {
    // `Value` keeps keys sorted, so output is stable.
    serde_json::to_string_pretty(&serde_json::to_value(value).expect("serializable")).expect("serializable")
}

fn score_json(o: &ScoreOutcome) -> serde_json::Value {
    serde_json::json!({
        "spread": o.spread,
        "verdict": o.verdict,
        "aggregated_jgd": o.aggregated_jgd(),
        "report": o.report,
    })
}

fn optimize_json(system: &str, out: &OptimizeOutcome) -> serde_json::Value {
    serde_json::json!({
        "system": system,
        "best": out.best().map(score_json),
        "rejections": {
            "solver_failure": out.log.solver_failure,
            "explosion": out.log.explosion,
            "degenerate_channel": out.log.degenerate_channel,
        },
        "grid": out.evaluations.iter().map(|o| serde_json::json!({
            "spread": o.spread,
            "verdict": o.verdict,
            "aggregated_jgd": o.aggregated_jgd(),
        })).collect::<Vec<_>>(),
    })
}

fn optimize(
    spec: &SystemSpec,
    grid: &GridArgs,
    protocol: EvalProtocol,
    seed: u64,
) -> Result<(OptimizeOutcome, Option<SpreadConfig>), CliError> {
    let out = optimize_spreads(spec, &grid.grid(spec), protocol, &InitialLaw::Spread, seed, SolverOptions::default())?;
    let best = out.best().map(|b| b.spread);
    Ok((out, best))
}

fn print_summary(name: &str, report: &EvalReport) {
    eprintln!("{name}: {} tasks, {} skipped (empty horizon)", report.tasks, report.skipped);
    for s in &report.summary {
        eprintln!("  {:<18} mse {:.6} ± {:.6}", s.baseline.name(), s.mean, s.std);
    }
}

fn bundle_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::User("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Internal(e.to_string()))?;
    }
    let registry = Registry::with_systems_dir(cli.systems_dir.as_deref())?;
    let get = |name: &str| -> Result<Arc<SystemSpec>, CliError> { Ok(registry.get(name)?) };

    match cli.command {
        Command::ListSystems => {
            println!("name\tchannels\tconstants\tduration\tsource\ttags");
            for s in registry.list() {
                let entry = registry.entry(&s.name)?;
                println!(
                    "{}\t{}\t{}\t{}\t{}\t{}",
                    s.name,
                    s.channels,
                    s.constants,
                    entry.spec.default_duration,
                    s.source,
                    entry.tags.join(",")
                );
            }
        }
        Command::Score { system, spread, protocol, seed } => {
            let spec = get(&system)?;
            let spread = spread
                .resolve()?
                .ok_or_else(|| CliError::User("score needs --sigma-initial, --sigma-const and --sigma-dur".into()))?;
            let cfg = GeneratorConfig {
                system: system.clone(),
                spread,
                initial_law: InitialLaw::Spread,
                protocol: protocol.protocol(),
                master_seed: seed,
            };
            let out = score_config(&spec, &cfg, SolverOptions::default())?;
            println!("{}", json(&score_json(&out)));
            if let Verdict::Rejected(cause) = out.verdict {
                return Err(CliError::AllRejected(format!("configuration rejected: {cause}")));
            }
        }
        Command::Optimize { system, grid, protocol, seed } => {
            let spec = get(&system)?;
            let (out, best) = optimize(&spec, &grid, protocol.protocol(), seed)?;
            println!("{}", json(&optimize_json(&system, &out)));
            if best.is_none() {
                return Err(CliError::AllRejected(format!("every grid point was rejected for `{system}`")));
            }
        }
        Command::Generate { system, out, spread, grid, protocol, dataset, seed, force } => {
            let spec = get(&system)?;
            let ds = dataset.config(seed)?;
            let protocol = protocol.protocol();
            let spread = match spread.resolve()? {
                Some(s) => s,
                None => {
                    let (outcome, best) = optimize(&spec, &grid, protocol, seed)?;
                    let Some(best) = best else {
                        eprintln!("{}", json(&optimize_json(&system, &outcome)));
                        return Err(CliError::AllRejected(format!("every grid point was rejected for `{system}`")));
                    };
                    eprintln!("chosen spreads: {best:?}");
                    best
                }
            };
            let gen = GeneratorConfig { system, spread, initial_law: InitialLaw::Spread, protocol, master_seed: seed };
            let data = materialize_dataset(&spec, &gen, &ds, SolverOptions::default())?;
            let hash = write_bundle(&data, &out, force)?;
            eprintln!(
                "wrote {} instances to {} (aggregated JGD {:.6}, {} regenerated)",
                data.instances.len(),
                out.display(),
                data.metadata.aggregated_jgd,
                data.metadata.regenerated
            );
            println!("{hash}");
        }
        Command::Evaluate { bundle, eval } => {
            let data = read_bundle(&bundle)?;
            let cfg = eval.config(data.metadata.split_fraction)?;
            let report = evaluate(&data, &cfg)?;
            print!("{}", eval_csv(&bundle_name(&bundle), &report, true));
            print_summary(&bundle_name(&bundle), &report);
        }
        Command::LorenzBench { out, seed, force } => {
            let spec = get("lorenz")?;
            let data = lorenz_dataset(&spec, seed, SolverOptions::default())?;
            let hash = write_bundle(&data, &out, force)?;
            let cfg = EvalConfig::new(data.metadata.split_fraction, seed);
            let report = evaluate(&data, &cfg)?;
            print!("{}", eval_csv("lorenz", &report, true));
            print_summary("lorenz", &report);
            eprintln!("bundle {} ({hash})", out.display());
        }
        Command::Verify { bundle } => {
            let v = verify_bundle(&bundle)?;
            println!("recorded    {}", v.recorded);
            println!("regenerated {}", v.regenerated);
            if !v.matches() {
                return Err(CliError::Internal("regenerated bundle differs from the recorded manifest".into()));
            }
            eprintln!("ok");
        }
        Command::Report { bundles, eval } => {
            println!("dataset,system,aggregated_jgd,best_baseline,best_mse,best_mse_std");
            let (mut jgds, mut mses) = (Vec::new(), Vec::new());
            for path in &bundles {
                let data = read_bundle(path)?;
                let report = evaluate(&data, &eval.config(data.metadata.split_fraction)?)?;
                let best = report.best().ok_or_else(|| CliError::User("no baselines selected".into()))?;
                println!(
                    "{},{},{:?},{},{:?},{:?}",
                    bundle_name(path),
                    data.metadata.system,
                    data.metadata.aggregated_jgd,
                    best.baseline,
                    best.mean,
                    best.std
                );
                jgds.push(data.metadata.aggregated_jgd);
                mses.push(best.mean);
            }
            match spearman(&jgds, &mses) {
                Ok(rho) => eprintln!("spearman(jgd, best mse) = {rho:.4}"),
                Err(e) => eprintln!("spearman unavailable: {e}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = match &e {
                CliError::User(m) | CliError::Internal(m) | CliError::AllRejected(m) => m,
            };
            eprintln!("error: {msg}");
            ExitCode::from(e.code())
        }
    }
}
