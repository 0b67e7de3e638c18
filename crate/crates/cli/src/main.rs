//! Command-line harness: data generation, training, scenario sweeps,
//! evaluation, and figure emission.

mod config;
mod data;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use vsr_pinn::trainer::{
    median_quartiles, predict_grid, pointwise_mse, relative_l2, resume, scenario_config,
    scenario_matrix, train, RunRecord, RunStatus, Scenario,
};

use config::AppConfig;

/// Exit codes: 0 success, 2 config error, 3 data error, 4 divergence.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self { code: 3, msg: msg.into() }
    }

    pub fn divergence(msg: impl Into<String>) -> Self {
        Self { code: 4, msg: msg.into() }
    }

    pub fn from_config_err(e: vsr_pinn::Error) -> Self {
        Self::config(e.to_string())
    }

    pub fn from_data_err(e: vsr_pinn::Error) -> Self {
        Self::data(e.to_string())
    }
}

/// Default output root when --out is omitted.
const OUT_ENV: &str = "VSR_PINN_OUT";

#[derive(Parser)]
#[command(
    name = "vsr-pinn",
    about = "Reconstruct entropy solutions of the LWR conservation law from \
             sparse boundary data with a vanishing stacked residual PINN",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutArg {
    /// Output directory (defaults to $VSR_PINN_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl OutArg {
    fn resolve(&self) -> Result<PathBuf, CliError> {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .ok_or_else(|| CliError::config(format!("no output directory: pass --out or set ${OUT_ENV}")))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the reference solution and sample measurements.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        out: OutArg,
        /// Override the measurement-sampling seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one run against a generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory produced by `generate`.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        out: OutArg,
        /// Override the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Validate the configuration and exit without training.
        #[arg(long)]
        dry_run: bool,
        /// Continue a previous run directory for the configured epoch count.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run the scenario matrix.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        out: OutArg,
        /// Seeds per scenario.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Comma-separated substring filter over scenario names.
        #[arg(long)]
        scenarios: Option<String>,
        /// Concurrent worker threads.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Recompute metrics of a saved run against a dataset.
    Evaluate {
        /// Run directory written by `train` or `sweep`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Emit PNG figures from saved results.
    Plot {
        /// Sweep root or single run directory.
        #[arg(long)]
        results: PathBuf,
        /// Dataset directory (needed for heatmaps).
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
        /// Figure kind: all, mse-boxplot, heatmaps.
        #[arg(long, default_value = "all")]
        kind: String,
    },
    /// Print a complete example configuration file.
    PrintDefaultConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Generate { config, out, seed } => cmd_generate(&config, &out.resolve()?, seed),
        Command::Train {
            config,
            data,
            out,
            seed,
            dry_run,
            resume,
        } => cmd_train(&config, &data, &out.resolve()?, seed, dry_run, resume.as_deref()),
        Command::Sweep {
            config,
            data,
            out,
            seeds,
            scenarios,
            workers,
        } => cmd_sweep(&config, &data, &out.resolve()?, seeds, scenarios.as_deref(), workers),
        Command::Evaluate { run, data } => cmd_evaluate(&run, &data),
        Command::Plot {
            results,
            data,
            out,
            kind,
        } => cmd_plot(&results, data.as_deref(), &out.resolve()?, &kind),
        Command::PrintDefaultConfig => {
            let text = serde_yaml::to_string(&AppConfig::example())
                .map_err(|e| CliError::config(e.to_string()))?;
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_generate(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = AppConfig::load(config)?;
    if let Some(s) = seed {
        cfg.solver.measurement_seed = s;
    }
    let (truth, data) = data::generate(&cfg.solver)?;
    data::save(out, &cfg.solver, &truth, &data)?;
    println!(
        "wrote {} ({} x {} grid, {} measurements)",
        out.display(),
        truth.t_axis.len(),
        truth.x_axis.len(),
        data.len()
    );
    Ok(())
}

/// Align the physical domain of the training config with the dataset.
fn align_training(
    cfg: &mut vsr_pinn::trainer::TrainingConfig,
    meta: &vsr_pinn::lwr::GridMeta,
) {
    cfg.t_final = meta.domain.t_final;
    cfg.length = meta.domain.length;
    cfg.free_flow_speed = meta.flux.free_flow_speed();
}

fn cmd_train(
    config: &Path,
    data_dir: &Path,
    out: &Path,
    seed: Option<u64>,
    dry_run: bool,
    resume_dir: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = AppConfig::load(config)?;
    let mut training = cfg.training;
    if let Some(s) = seed {
        training.seed = s;
    }
    if dry_run {
        training.validate().map_err(CliError::from_config_err)?;
        println!("configuration ok");
        return Ok(());
    }
    let (meta, truth, measurements) = data::load(data_dir)?;
    align_training(&mut training, &meta);

    let record = if let Some(prev_dir) = resume_dir {
        let prev = RunRecord::load(prev_dir).map_err(CliError::from_data_err)?;
        resume(&prev, training.n_epoch, &measurements, &truth)
            .map_err(CliError::from_config_err)?
    } else {
        train(&training, &measurements, &truth).map_err(CliError::from_config_err)?
    };
    record
        .save(out, Some(&truth))
        .map_err(CliError::from_data_err)?;
    println!("relative L2: {:.6e}", record.metrics.relative_l2);
    vsr_pinn::dump_gemm_stats();
    if let RunStatus::Diverged { epoch } = record.status {
        return Err(CliError::divergence(format!("training diverged at epoch {epoch}")));
    }
    Ok(())
}

fn scenario_dir_name(s: &Scenario) -> String {
    s.name().replace('/', "-")
}

fn cmd_sweep(
    config: &Path,
    data_dir: &Path,
    out: &Path,
    seeds: usize,
    filter: Option<&str>,
    workers: usize,
) -> Result<(), CliError> {
    if seeds == 0 {
        return Err(CliError::config("--seeds must be >= 1"));
    }
    let cfg = AppConfig::load(config)?;
    let (meta, truth, measurements) = data::load(data_dir)?;
    let mut base = cfg.training;
    align_training(&mut base, &meta);

    let scenarios: Vec<Scenario> = scenario_matrix()
        .into_iter()
        .filter(|s| match filter {
            None => true,
            Some(f) => f
                .split(',')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .any(|t| s.name().contains(t)),
        })
        .collect();
    if scenarios.is_empty() {
        return Err(CliError::config("scenario filter matched nothing"));
    }

    let jobs: Vec<(Scenario, usize)> = scenarios
        .iter()
        .flat_map(|&s| (0..seeds).map(move |i| (s, i)))
        .collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(Scenario, u64, Result<RunRecord, String>)>> =
        Mutex::new(Vec::with_capacity(jobs.len()));
    let n_workers = workers.max(1).min(jobs.len());
    std::thread::scope(|scope| {
        for _ in 0..n_workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let (scenario, seed_index) = jobs[i];
                let run_cfg = scenario_config(&base, scenario, seed_index);
                let seed = run_cfg.seed;
                let outcome = train(&run_cfg, &measurements, &truth).map_err(|e| e.to_string());
                results.lock().unwrap().push((scenario, seed, outcome));
            });
        }
    });
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(s, seed, _)| (scenario_dir_name(s), *seed));

    let mut summary = csv::Writer::from_path(out.join("summary.csv")).map_err(|e| {
        std::fs::create_dir_all(out).ok();
        CliError::data(e.to_string())
    });
    if summary.is_err() {
        std::fs::create_dir_all(out).map_err(|e| CliError::data(e.to_string()))?;
        summary = csv::Writer::from_path(out.join("summary.csv"))
            .map_err(|e| CliError::data(e.to_string()));
    }
    let mut summary = summary?;
    summary
        .write_record([
            "scenario", "runs_ok", "runs_failed", "median_mse", "q1_mse", "q3_mse",
            "median_rel_l2",
        ])
        .map_err(|e| CliError::data(e.to_string()))?;

    for scenario in &scenarios {
        let mut mses = Vec::new();
        let mut l2s = Vec::new();
        let mut failed = 0usize;
        for (s, seed, outcome) in &results {
            if s != scenario {
                continue;
            }
            match outcome {
                Ok(record) => {
                    let dir = out.join(scenario_dir_name(s)).join(format!("seed-{seed}"));
                    record
                        .save(&dir, Some(&truth))
                        .map_err(CliError::from_data_err)?;
                    mses.push(record.metrics.mean_mse);
                    l2s.push(record.metrics.relative_l2);
                }
                Err(msg) => {
                    eprintln!("warning: {} seed {seed} failed: {msg}", s.name());
                    failed += 1;
                }
            }
        }
        let quart = median_quartiles(&mses);
        let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6e}"));
        summary
            .write_record(&[
                scenario.name(),
                mses.len().to_string(),
                failed.to_string(),
                fmt(quart.map(|(_, m, _)| m)),
                fmt(quart.map(|(q1, _, _)| q1)),
                fmt(quart.map(|(_, _, q3)| q3)),
                fmt(median_quartiles(&l2s).map(|(_, m, _)| m)),
            ])
            .map_err(|e| CliError::data(e.to_string()))?;
    }
    summary.flush().map_err(|e| CliError::data(e.to_string()))?;
    println!("sweep complete: {} runs, summary at {}", results.len(), out.join("summary.csv").display());
    Ok(())
}

fn cmd_evaluate(run_dir: &Path, data_dir: &Path) -> Result<(), CliError> {
    let record = RunRecord::load(run_dir).map_err(CliError::from_data_err)?;
    let (_, truth, _) = data::load(data_dir)?;
    let stage = record.model.n_stacks() - 1;
    let pred = predict_grid(&record.model, stage, &truth).map_err(CliError::from_data_err)?;
    let rel = relative_l2(&pred, &truth).map_err(CliError::from_data_err)?;
    let (mean, _) = pointwise_mse(&pred, &truth).map_err(CliError::from_data_err)?;
    println!(
        "{}",
        serde_json::json!({ "relative_l2": rel, "mean_mse": mean })
    );
    Ok(())
}

fn cmd_plot(
    results: &Path,
    data_dir: Option<&Path>,
    out: &Path,
    kind: &str,
) -> Result<(), CliError> {
    plot::init_fonts();
    std::fs::create_dir_all(out).map_err(|e| CliError::data(e.to_string()))?;
    let want = |k: &str| kind == "all" || kind == k;
    let mut drew = false;
    if want("mse-boxplot") {
        match plot::mse_boxplot(results, &out.join("mse_boxplot.png")) {
            Ok(()) => drew = true,
            Err(e) if kind == "all" => eprintln!("warning: skipping mse-boxplot: {}", e.msg),
            Err(e) => return Err(e),
        }
    }
    if want("heatmaps") {
        match data_dir {
            Some(dir) => {
                let (_, truth, _) = data::load(dir)?;
                let runs = plot::find_run_dirs(results);
                let run = runs
                    .first()
                    .ok_or_else(|| CliError::data("no run records found"))?;
                plot::run_figures(run, &truth, out)?;
                drew = true;
            }
            None if kind == "all" => {
                eprintln!("warning: skipping heatmaps: no --data directory given")
            }
            None => return Err(CliError::config("heatmaps need --data")),
        }
    }
    if !drew && kind != "all" {
        return Err(CliError::config(format!("unknown figure kind '{kind}'")));
    }
    println!("figures written to {}", out.display());
    Ok(())
}
