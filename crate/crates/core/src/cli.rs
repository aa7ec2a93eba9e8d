//! Command-line front end.
//!
//! Artifacts of the step-wise commands live in `--out-dir`:
//! `ingest` writes `train_set.json`/`test_set.json`, `estimate` writes
//! `physics/sensor_<id>.json`, `generate` writes `synthetic/`, `train`
//! writes `train/<run>/`, and `evaluate` writes `metrics.csv`. `ablate`
//! runs the whole pipeline from `--data-dir` in one go.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cmapss::{self, TrajectorySet};
use crate::config::{ConfigError, TrainConfig};
use crate::harness::{self, HarnessError};
use crate::neural::{grad_check, Checkpoint, Example, LstmModel};
use crate::physics::{self, SensorPhysics};
use crate::synth;

/// Gradient checks above this fail the `gradcheck` command.
pub const GRADCHECK_LIMIT: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(name = "piml-rul", version, about = "Sensor physics estimation and RUL training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Directory with train_/test_/RUL_<condition>.txt.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Master seed, overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Condition, overrides the config.
    #[arg(long, global = true)]
    pub condition: Option<String>,
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    pub quiet: bool,
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Parse and normalize the raw files.
    Ingest,
    /// Estimate per-sensor physics from the ingested train set.
    Estimate,
    /// Sample synthetic trajectories from estimated physics.
    Generate,
    /// Train one ablation cell for every configured seed.
    Train,
    /// Score trained checkpoints on the test split.
    Evaluate,
    /// Run all four ablation cells and write the report.
    Ablate,
    /// Check backpropagation against finite differences.
    Gradcheck,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Estimate => "estimate",
            Command::Generate => "generate",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Ablate => "ablate",
            Command::Gradcheck => "gradcheck",
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    /// Unreadable or malformed input; exit 1.
    Input(String),
    /// A check or configuration constraint failed; exit 2.
    Validation(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 1,
            CliError::Validation(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) | CliError::Validation(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Invalid(_) => CliError::Validation(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<cmapss::IngestError> for CliError {
    fn from(e: cmapss::IngestError) -> Self {
        CliError::Input(e.to_string())
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::Input(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn in_file<E: std::fmt::Display>(path: &Path) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Input(format!("{}: {e}", path.display()))
}

/// Exclusive claim on an output directory, released on drop.
struct OutDirLock {
    path: PathBuf,
}

impl OutDirLock {
    fn acquire(out_dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(out_dir).map_err(in_file(out_dir))?;
        let path = out_dir.join(".lock");
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                CliError::Input(format!(
                    "{}: {e}; another run is using this directory (delete the file if it is stale)",
                    path.display()
                ))
            })?;
        Ok(Self { path })
    }
}

impl Drop for OutDirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config_hash: String,
    master_seed: u64,
    seeds: &'a [u64],
    data_dir: Option<String>,
    config: &'a TrainConfig,
}

fn write_manifest(cli: &Cli, cfg: &TrainConfig) -> Result<(), CliError> {
    let m = Manifest {
        command: cli.command.name(),
        version: env!("CARGO_PKG_VERSION"),
        config_hash: cfg.hash(),
        master_seed: cfg.master_seed,
        seeds: &cfg.seeds,
        data_dir: cli.data_dir.as_ref().map(|d| d.display().to_string()),
        config: cfg,
    };
    let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::Input(e.to_string()))?;
    write(&cli.out_dir.join(format!("manifest-{}.json", cli.command.name())), &text)
}

fn resolve_config(cli: &Cli) -> Result<TrainConfig, CliError> {
    let mut overrides = cli.overrides.clone();
    if let Some(c) = &cli.condition {
        overrides.push(format!("condition=\"{c}\""));
    }
    if let Some(s) = cli.seed {
        overrides.push(format!("master_seed={s}"));
    }
    Ok(TrainConfig::load(cli.config.as_deref(), &overrides)?)
}

fn data_dir(cli: &Cli) -> Result<&Path, CliError> {
    cli.data_dir
        .as_deref()
        .ok_or_else(|| CliError::Input("--data-dir is required for this command".into()))
}

fn train_set_path(out: &Path) -> PathBuf {
    out.join("train_set.json")
}

fn load_set(path: &Path) -> Result<TrajectorySet, CliError> {
    TrajectorySet::from_json(&read(path)?).map_err(in_file(path))
}

fn physics_dir(out: &Path) -> PathBuf {
    out.join("physics")
}

fn load_physics(out: &Path) -> Result<Vec<SensorPhysics>, CliError> {
    let dir = physics_dir(out);
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(in_file(&dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    files
        .iter()
        .map(|p| SensorPhysics::from_json(&read(p)?).map_err(in_file(p)))
        .collect()
}

fn cmd_ingest(cli: &Cli, cfg: &TrainConfig) -> Result<(), CliError> {
    let dir = data_dir(cli)?;
    let opts = cfg.load_options();
    let train = cmapss::load_train(dir, &cfg.condition, &opts)?;
    write(&train_set_path(&cli.out_dir), &train.to_json()?)?;
    if cmapss::test_path(dir, &cfg.condition).exists() {
        let test = cmapss::load_test(dir, &cfg.condition, &opts, &train.normalization)?;
        write(&cli.out_dir.join("test_set.json"), &test.to_json()?)?;
    } else {
        log::warn!("no test file for {} in {}", cfg.condition, dir.display());
    }
    println!(
        "ingested {} train units with {} sensors",
        train.trajectories.len(),
        train.n_sensors()
    );
    Ok(())
}

fn cmd_estimate(cli: &Cli, cfg: &TrainConfig) -> Result<(), CliError> {
    let train = load_set(&train_set_path(&cli.out_dir))?;
    let all = physics::estimate_all(&train, &cfg.physics_options()).map_err(|e| CliError::Input(e.to_string()))?;
    let dir = physics_dir(&cli.out_dir);
    for ph in &all {
        let text = ph.to_json().map_err(|e| CliError::Input(e.to_string()))?;
        write(&dir.join(format!("sensor_{:02}.json", ph.sensor_id)), &text)?;
        let residual = physics::moment_identity_residual(ph);
        let bimodal = ph.steps.iter().filter(|s| s.modality == 2).count();
        println!(
            "sensor {:2}: {} cycles, {bimodal} bimodal, moment residual {residual:.2e}",
            ph.sensor_id,
            ph.t_max()
        );
    }
    Ok(())
}

fn cmd_generate(cli: &Cli, cfg: &TrainConfig) -> Result<(), CliError> {
    let all = load_physics(&cli.out_dir)?;
    let support = all.iter().map(SensorPhysics::t_max).min().unwrap_or(0);
    let length = if cfg.synth_length == 0 { support } else { cfg.synth_length };
    let data = synth::generate_dataset(&all, cfg.synth_paths, length, cfg.master_seed)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let dir = cli.out_dir.join("synthetic");
    fs::create_dir_all(&dir).map_err(in_file(&dir))?;
    let csv_path = dir.join("synthetic.csv");
    let file = fs::File::create(&csv_path).map_err(in_file(&csv_path))?;
    data.write_csv(std::io::BufWriter::new(file)).map_err(in_file(&csv_path))?;
    let sidecar = serde_json::to_string_pretty(&data.sidecar()).map_err(|e| CliError::Input(e.to_string()))?;
    write(&dir.join("synthetic.json"), &sidecar)?;
    println!("wrote {} paths of {length} cycles to {}", cfg.synth_paths, csv_path.display());
    Ok(())
}

fn cell_physics(cfg: &TrainConfig, out: &Path) -> Result<Vec<SensorPhysics>, CliError> {
    if cfg.use_mu || cfg.use_rho {
        load_physics(out)
    } else {
        Ok(Vec::new())
    }
}

fn run_physics<'a>(cfg: &TrainConfig, set: &TrajectorySet, all: &'a [SensorPhysics]) -> Result<Vec<&'a SensorPhysics>, CliError> {
    if cfg.use_mu || cfg.use_rho {
        Ok(harness::align_physics(&set.retained_sensor_ids, all)?)
    } else {
        Ok(Vec::new())
    }
}

fn cmd_train(cli: &Cli, cfg: &TrainConfig) -> Result<(), CliError> {
    let train = load_set(&train_set_path(&cli.out_dir))?;
    let all = cell_physics(cfg, &cli.out_dir)?;
    let physics = run_physics(cfg, &train, &all)?;
    let windows = cmapss::make_windows(&train, cfg.window_len, harness::window_seed(cfg))?;
    let test = if cfg.paper_protocol {
        let test = load_set(&cli.out_dir.join("test_set.json"))?;
        Some(harness::prepare_test(cfg, &test, &physics)?)
    } else {
        None
    };
    for &seed in &cfg.seeds {
        let outcome = harness::train(cfg, &windows, &physics, seed, test.as_ref())?;
        let dir = cli
            .out_dir
            .join("train")
            .join(harness::run_dir_name(cfg.use_mu, cfg.use_rho, seed));
        write(&dir.join("checkpoint.json"), &outcome.checkpoint.to_json().map_err(|e| CliError::Input(e.to_string()))?)?;
        write(
            &dir.join("history.json"),
            &serde_json::to_string_pretty(&outcome.history).map_err(|e| CliError::Input(e.to_string()))?,
        )?;
        let last = outcome.history.last();
        println!(
            "seed {seed}: best epoch {}, final train loss {}",
            outcome.best_epoch,
            last.map_or("n/a".to_string(), |h| format!("{:.6}", h.train_loss))
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    condition: String,
    mu: bool,
    rho: bool,
    seed: u64,
    test_mse: f64,
    test_l1: f64,
}

fn cmd_evaluate(cli: &Cli, cfg: &TrainConfig) -> Result<(), CliError> {
    let dir = data_dir(cli)?;
    let train = load_set(&train_set_path(&cli.out_dir))?;
    let test = cmapss::load_test(dir, &cfg.condition, &cfg.load_options(), &train.normalization)?;
    let all = cell_physics(cfg, &cli.out_dir)?;
    let physics = run_physics(cfg, &train, &all)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let path = cli
            .out_dir
            .join("train")
            .join(harness::run_dir_name(cfg.use_mu, cfg.use_rho, seed))
            .join("checkpoint.json");
        let cp = Checkpoint::from_json(&read(&path)?).map_err(in_file(&path))?;
        if cp.config_hash != cfg.hash() {
            log::warn!("{} was trained with a different config", path.display());
        }
        let (mse, l1) = harness::evaluate(&cp.model, &test, &physics, cfg)?;
        println!("seed {seed}: test mse {mse:.6}, l1 {l1:.6}");
        let row = EvalRow {
            condition: cfg.condition.clone(),
            mu: cfg.use_mu,
            rho: cfg.use_rho,
            seed,
            test_mse: mse,
            test_l1: l1,
        };
        w.serialize(&row).map_err(|e| CliError::Input(e.to_string()))?;
        rows.push(row);
    }
    let bytes = w.into_inner().map_err(|e| CliError::Input(e.to_string()))?;
    write(&cli.out_dir.join("metrics.csv"), &String::from_utf8_lossy(&bytes))?;
    write(
        &cli.out_dir.join("metrics.json"),
        &serde_json::to_string_pretty(&rows).map_err(|e| CliError::Input(e.to_string()))?,
    )
}

fn cmd_ablate(cli: &Cli, cfg: &TrainConfig) -> Result<(), CliError> {
    let data = harness::Prepared::load(cfg, data_dir(cli)?)?;
    let (report, runs) = harness::run_ablation_suite(cfg, &data)?;
    harness::write_report(&cli.out_dir, &report, &runs)?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn cmd_gradcheck(cfg: &TrainConfig) -> Result<(), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);
    let model = LstmModel::init(cfg.model_shape(14), &mut rng);
    let dim = model.shape.input_dim;
    let windows: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..cfg.window_len * dim).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let targets: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
    let batch: Vec<Example<'_>> = windows
        .iter()
        .zip(&targets)
        .map(|(w, &t)| Example { features: w, target: t })
        .collect();
    let report = grad_check(&model, &batch, 1e-5).map_err(|e| CliError::Validation(e.to_string()))?;
    println!(
        "max relative error {:.3e} over {} parameters (worst index {})",
        report.max_rel_error,
        model.n_params(),
        report.worst_param
    );
    if report.max_rel_error > GRADCHECK_LIMIT {
        return Err(CliError::Validation(format!(
            "gradient check failed: {:.3e} > {GRADCHECK_LIMIT:e}",
            report.max_rel_error
        )));
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve_config(cli)?;
    let _lock = OutDirLock::acquire(&cli.out_dir)?;
    write_manifest(cli, &cfg)?;
    match cli.command {
        Command::Ingest => cmd_ingest(cli, &cfg),
        Command::Estimate => cmd_estimate(cli, &cfg),
        Command::Generate => cmd_generate(cli, &cfg),
        Command::Train => cmd_train(cli, &cfg),
        Command::Evaluate => cmd_evaluate(cli, &cfg),
        Command::Ablate => cmd_ablate(cli, &cfg),
        Command::Gradcheck => cmd_gradcheck(&cfg),
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet {
        log::LevelFilter::Warn
    } else if cli.verbose {
        log::LevelFilter::Debug
    } else {
        log::LevelFilter::Info
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
