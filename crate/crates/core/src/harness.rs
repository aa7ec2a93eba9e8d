//! Feature augmentation, training, evaluation and the four-cell ablation.
//!
//! Every random stream of a run (weight init, validation split, batch
//! order) is derived from `(master_seed, seed, purpose)`, so a run is a
//! pure function of its config and data. Runs of a suite are independent
//! jobs on the rayon pool; results are collected in job order.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cmapss::{self, IngestError, TrajectorySet, Window, WindowBatchSet};
use crate::config::{BimodalFeed, TrainConfig};
use crate::neural::{
    adam_step, backward, AdamState, Checkpoint, Example, LstmModel, NeuralError, CHECKPOINT_VERSION,
};
use crate::physics::{self, PhysicsError, SensorPhysics};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("no physics for sensor {0}")]
    MissingPhysics(usize),
    #[error("no training windows")]
    NoTrainingData,
    #[error("no test unit has a full window")]
    NoEvaluableUnits,
    #[error("paper_protocol selection needs test windows")]
    MissingSelectionSet,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Serialize(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Independent generator for one purpose of one run.
pub fn derived_rng(master: u64, seed: u64, purpose: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Window shuffle seed shared by every run of a config.
pub fn window_seed(cfg: &TrainConfig) -> u64 {
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&Sha256::digest(format!("windows/{}", cfg.master_seed).as_bytes())[..8]);
    u64::from_le_bytes(bytes)
}

/// Physics documents in the column order of `retained`.
pub fn align_physics<'a>(
    retained: &[usize],
    physics: &'a [SensorPhysics],
) -> Result<Vec<&'a SensorPhysics>, HarnessError> {
    retained
        .iter()
        .map(|&id| {
            physics
                .iter()
                .find(|p| p.sensor_id == id)
                .ok_or(HarnessError::MissingPhysics(id))
        })
        .collect()
}

/// Appends μ̂ and/or ρ̂ columns after the raw sensor columns. Cycles past the
/// end of a physics grid use its last point.
pub fn augment_features(
    window: &Window,
    physics: &[&SensorPhysics],
    use_mu: bool,
    use_rho: bool,
    feed: BimodalFeed,
) -> Result<Window, HarnessError> {
    if !use_mu && !use_rho {
        return Ok(window.clone());
    }
    let n = window.feature_dim;
    if physics.len() < n {
        return Err(HarnessError::MissingPhysics(physics.len()));
    }
    let per = match feed {
        BimodalFeed::Nearest => 1,
        BimodalFeed::Both => 2,
    };
    let dim = n * (1 + per * (use_mu as usize + use_rho as usize));
    let mut features = Vec::with_capacity(window.len() * dim);
    let mut mus = Vec::with_capacity(n * per);
    let mut rhos = Vec::with_capacity(n * per);
    for t in 0..window.len() {
        let row = window.row(t);
        let cycle = window.cycle_at(t);
        mus.clear();
        rhos.clear();
        for (s, ph) in physics[..n].iter().enumerate() {
            let step = ph.at_cycle(cycle);
            match feed {
                BimodalFeed::Nearest => {
                    let m = step.nearest_mode(row[s]);
                    mus.push(step.mu[m]);
                    rhos.push(step.rho[m]);
                }
                BimodalFeed::Both => {
                    let hi = step.mu.len() - 1;
                    mus.extend([step.mu[0], step.mu[hi]]);
                    rhos.extend([step.rho[0], step.rho[hi]]);
                }
            }
        }
        features.extend_from_slice(row);
        if use_mu {
            features.extend_from_slice(&mus);
        }
        if use_rho {
            features.extend_from_slice(&rhos);
        }
    }
    Ok(Window {
        features,
        feature_dim: dim,
        ..window.clone()
    })
}

/// Windows in model units: augmented features and scaled targets.
#[derive(Debug, Clone)]
pub struct PreparedWindows {
    pub windows: Vec<Window>,
}

impl PreparedWindows {
    pub fn new(cfg: &TrainConfig, windows: &[Window], physics: &[&SensorPhysics]) -> Result<Self, HarnessError> {
        let windows = windows
            .iter()
            .map(|w| {
                let mut a = augment_features(w, physics, cfg.use_mu, cfg.use_rho, cfg.bimodal_feed)?;
                a.target /= cfg.target_scale;
                Ok(a)
            })
            .collect::<Result<Vec<_>, HarnessError>>()?;
        Ok(Self { windows })
    }

    pub fn examples(&self) -> Vec<Example<'_>> {
        self.windows
            .iter()
            .map(|w| Example {
                features: &w.features,
                target: w.target,
            })
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// `(mse, mean absolute error)`.
pub fn error_metrics(preds: &[f64], targets: &[f64]) -> (f64, f64) {
    let n = preds.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, t) in preds.iter().zip(targets) {
        se += (p - t) * (p - t);
        ae += (p - t).abs();
    }
    (se / n, ae / n)
}

/// `(mse, l1)` of the model over examples; NaN when empty.
pub fn dataset_metrics(model: &LstmModel, examples: &[Example<'_>]) -> Result<(f64, f64), HarnessError> {
    let preds = examples
        .iter()
        .map(|e| model.predict(e.features))
        .collect::<Result<Vec<_>, _>>()?;
    let targets: Vec<f64> = examples.iter().map(|e| e.target).collect();
    Ok(error_metrics(&preds, &targets))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the minibatch losses of the epoch.
    pub train_loss: f64,
    /// MSE on the selection set after the epoch, absent without one.
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub val_units: Vec<u32>,
    /// Epoch of the returned model; 0 is the initialization.
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn model(&self) -> &LstmModel {
        &self.checkpoint.model
    }
}

/// Splits `windows` by unit: roughly `val_fraction` of the units, at least
/// one when there are two or more units, go to validation.
pub fn split_by_unit(windows: &[Window], val_fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<Window>, Vec<Window>, Vec<u32>) {
    let units: BTreeSet<u32> = windows.iter().map(|w| w.unit_id).collect();
    let mut units: Vec<u32> = units.into_iter().collect();
    units.shuffle(rng);
    let n_val = if units.len() < 2 {
        0
    } else {
        ((units.len() as f64 * val_fraction).round() as usize).clamp(1, units.len() - 1)
    };
    let mut val_units = units[..n_val].to_vec();
    val_units.sort_unstable();
    let (val, train): (Vec<Window>, Vec<Window>) = windows
        .iter()
        .cloned()
        .partition(|w| val_units.binary_search(&w.unit_id).is_ok());
    (train, val, val_units)
}

fn clip_gradient(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

/// Trains one model. Selection set: the validation units by default, the
/// given test windows under `paper_protocol`, the training windows when
/// neither exists. With early stopping the model of the best selection
/// epoch (initialization included) is returned, otherwise the last one.
pub fn train(
    cfg: &TrainConfig,
    data: &WindowBatchSet,
    physics: &[&SensorPhysics],
    seed: u64,
    test: Option<&PreparedWindows>,
) -> Result<TrainOutcome, HarnessError> {
    if data.windows.is_empty() {
        return Err(HarnessError::NoTrainingData);
    }
    let mut split_rng = derived_rng(cfg.master_seed, seed, "validation");
    let (train_w, val_w, val_units) = if cfg.paper_protocol {
        (data.windows.clone(), Vec::new(), Vec::new())
    } else {
        split_by_unit(&data.windows, cfg.val_fraction, &mut split_rng)
    };
    let train_set = PreparedWindows::new(cfg, &train_w, physics)?;
    let val_set = PreparedWindows::new(cfg, &val_w, physics)?;
    let train_ex = train_set.examples();
    let selection = if cfg.paper_protocol {
        test.ok_or(HarnessError::MissingSelectionSet)?.examples()
    } else if !val_set.is_empty() {
        val_set.examples()
    } else {
        train_ex.clone()
    };

    let shape = cfg.model_shape(data.windows[0].feature_dim);
    let mut model = LstmModel::init(shape, &mut derived_rng(cfg.master_seed, seed, "init"));
    let mut adam = AdamState::new(model.n_params(), cfg.lr);
    let mut batch_rng = derived_rng(cfg.master_seed, seed, "batches");
    let config_hash = cfg.hash();
    let snapshot = |model: &LstmModel, adam: &AdamState, rng: &ChaCha8Rng, epoch: usize| Checkpoint {
        version: CHECKPOINT_VERSION,
        model: model.clone(),
        adam: adam.clone(),
        config_hash: config_hash.clone(),
        epoch,
        rng: Some(rng.clone()),
    };

    let mut best = snapshot(&model, &adam, &batch_rng, 0);
    let mut best_score = dataset_metrics(&model, &selection)?.0;
    let mut history = Vec::with_capacity(cfg.epochs());
    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 1..=cfg.epochs() {
        order.shuffle(&mut batch_rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train_ex[i]));
            let (loss, mut grad) = backward(&model, &batch)?;
            if let Some(c) = cfg.grad_clip {
                clip_gradient(&mut grad, c);
            }
            adam_step(&mut model, &grad, &mut adam)?;
            loss_sum += loss;
            n_batches += 1;
        }
        let score = dataset_metrics(&model, &selection)?.0;
        let has_val = cfg.paper_protocol || !val_set.is_empty();
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            val_loss: has_val.then_some(score),
        });
        if !cfg.early_stopping || score < best_score {
            best_score = score;
            best = snapshot(&model, &adam, &batch_rng, epoch);
        }
        log::debug!("seed {seed} epoch {epoch}: train {:.6} sel {score:.6}", loss_sum / n_batches as f64);
    }
    Ok(TrainOutcome {
        best_epoch: best.epoch,
        checkpoint: best,
        history,
        val_units,
    })
}

/// Final full window of every test unit with its provided RUL; shorter
/// units are skipped with a warning.
pub fn final_windows(test: &TrajectorySet, window_len: usize) -> Vec<Window> {
    test.trajectories
        .iter()
        .filter_map(|t| {
            if t.len() < window_len {
                log::warn!("test unit {} has only {} cycles; skipped", t.unit_id, t.len());
                None
            } else {
                Some(cmapss::window_at(t, t.len(), window_len))
            }
        })
        .collect()
}

pub fn prepare_test(
    cfg: &TrainConfig,
    test: &TrajectorySet,
    physics: &[&SensorPhysics],
) -> Result<PreparedWindows, HarnessError> {
    let windows = final_windows(test, cfg.window_len);
    if windows.is_empty() {
        return Err(HarnessError::NoEvaluableUnits);
    }
    PreparedWindows::new(cfg, &windows, physics)
}

/// Test `(mse, l1)` from one prediction per unit, in target units.
pub fn evaluate(
    model: &LstmModel,
    test: &TrajectorySet,
    physics: &[&SensorPhysics],
    cfg: &TrainConfig,
) -> Result<(f64, f64), HarnessError> {
    let prepared = prepare_test(cfg, test, physics)?;
    dataset_metrics(model, &prepared.examples())
}

/// Train and test data of one condition with physics estimated on train.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: TrajectorySet,
    pub test: TrajectorySet,
    pub physics: Vec<SensorPhysics>,
    pub windows: WindowBatchSet,
}

impl Prepared {
    pub fn load(cfg: &TrainConfig, data_dir: &Path) -> Result<Self, HarnessError> {
        let opts = cfg.load_options();
        let train = cmapss::load_train(data_dir, &cfg.condition, &opts)?;
        let test = cmapss::load_test(data_dir, &cfg.condition, &opts, &train.normalization)?;
        let physics = physics::estimate_all(&train, &cfg.physics_options())?;
        Self::from_parts(cfg, train, test, physics)
    }

    pub fn from_parts(
        cfg: &TrainConfig,
        train: TrajectorySet,
        test: TrajectorySet,
        physics: Vec<SensorPhysics>,
    ) -> Result<Self, HarnessError> {
        let windows = cmapss::make_windows(&train, cfg.window_len, window_seed(cfg))?;
        Ok(Self {
            train,
            test,
            physics,
            windows,
        })
    }

    pub fn aligned_physics(&self) -> Result<Vec<&SensorPhysics>, HarnessError> {
        align_physics(&self.train.retained_sensor_ids, &self.physics)
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub use_mu: bool,
    pub use_rho: bool,
    pub seed: u64,
    pub test_mse: f64,
    pub test_l1: f64,
    pub outcome: TrainOutcome,
}

/// Trains and evaluates one cell and seed.
pub fn run_cell(cfg: &TrainConfig, data: &Prepared, seed: u64) -> Result<RunResult, HarnessError> {
    let physics = data.aligned_physics()?;
    let test = prepare_test(cfg, &data.test, &physics)?;
    let outcome = train(cfg, &data.windows, &physics, seed, Some(&test))?;
    let (test_mse, test_l1) = dataset_metrics(outcome.model(), &test.examples())?;
    Ok(RunResult {
        use_mu: cfg.use_mu,
        use_rho: cfg.use_rho,
        seed,
        test_mse,
        test_l1,
        outcome,
    })
}

pub const ABLATION_CELLS: [(bool, bool); 4] = [(false, false), (true, false), (false, true), (true, true)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub test_mse: f64,
    pub test_l1: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub use_mu: bool,
    pub use_rho: bool,
    pub per_seed: Vec<SeedMetrics>,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub l1_mean: f64,
    pub l1_std: f64,
}

/// Arithmetic mean and sample standard deviation (0 for one value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub condition: String,
    pub target_scale: f64,
    pub epochs: usize,
    pub config_hash: String,
    pub cells: Vec<CellSummary>,
    pub runtime_secs: f64,
}

impl MetricsReport {
    pub fn from_runs(cfg: &TrainConfig, runs: &[RunResult], runtime_secs: f64) -> Self {
        let mut cells = Vec::new();
        for (mu, rho) in ABLATION_CELLS {
            let per_seed: Vec<SeedMetrics> = runs
                .iter()
                .filter(|r| r.use_mu == mu && r.use_rho == rho)
                .map(|r| SeedMetrics {
                    seed: r.seed,
                    test_mse: r.test_mse,
                    test_l1: r.test_l1,
                    best_epoch: r.outcome.best_epoch,
                })
                .collect();
            if per_seed.is_empty() {
                continue;
            }
            let mses: Vec<f64> = per_seed.iter().map(|s| s.test_mse).collect();
            let l1s: Vec<f64> = per_seed.iter().map(|s| s.test_l1).collect();
            let (mse_mean, mse_std) = mean_std(&mses);
            let (l1_mean, l1_std) = mean_std(&l1s);
            cells.push(CellSummary {
                use_mu: mu,
                use_rho: rho,
                per_seed,
                mse_mean,
                mse_std,
                l1_mean,
                l1_std,
            });
        }
        Self {
            condition: cfg.condition.clone(),
            target_scale: cfg.target_scale,
            epochs: cfg.epochs(),
            config_hash: cfg.hash(),
            cells,
            runtime_secs,
        }
    }

    pub fn cell(&self, use_mu: bool, use_rho: bool) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.use_mu == use_mu && c.use_rho == use_rho)
    }

    /// `condition,mu,rho,seed,test_mse,test_l1`, one row per run.
    pub fn to_csv(&self) -> Result<String, HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let ser = |e: csv::Error| HarnessError::Serialize(e.to_string());
        w.write_record(["condition", "mu", "rho", "seed", "test_mse", "test_l1"]).map_err(ser)?;
        for c in &self.cells {
            for s in &c.per_seed {
                w.write_record([
                    self.condition.clone(),
                    c.use_mu.to_string(),
                    c.use_rho.to_string(),
                    s.seed.to_string(),
                    s.test_mse.to_string(),
                    s.test_l1.to_string(),
                ])
                .map_err(ser)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| HarnessError::Serialize(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| HarnessError::Serialize(e.to_string()))
    }

    /// Markdown table with one row per cell: Mu, Rho, MSE, L1.
    pub fn to_markdown(&self) -> String {
        let mark = |b: bool| if b { "✓" } else { "" };
        let mut s = format!(
            "# {} ablation\n\n{} epochs, {} seed(s), targets in cycles / {}\n\n| Mu | Rho | Test MSE | Test L1 |\n|:--:|:--:|---:|---:|\n",
            self.condition,
            self.epochs,
            self.cells.first().map_or(0, |c| c.per_seed.len()),
            self.target_scale
        );
        for c in &self.cells {
            s.push_str(&format!(
                "| {} | {} | {:.4} ± {:.4} | {:.4} ± {:.4} |\n",
                mark(c.use_mu),
                mark(c.use_rho),
                c.mse_mean,
                c.mse_std,
                c.l1_mean,
                c.l1_std
            ));
        }
        s
    }
}

/// Runs every ablation cell for every configured seed.
pub fn run_ablation_suite(cfg: &TrainConfig, data: &Prepared) -> Result<(MetricsReport, Vec<RunResult>), HarnessError> {
    let start = Instant::now();
    let jobs: Vec<(TrainConfig, u64)> = ABLATION_CELLS
        .iter()
        .flat_map(|&(mu, rho)| cfg.seeds.iter().map(move |&s| (cfg.cell(mu, rho), s)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|(c, s)| {
            let r = run_cell(c, data, *s);
            if let Ok(r) = &r {
                log::info!(
                    "{} mu={} rho={} seed={}: test mse {:.6} (best epoch {})",
                    c.condition,
                    c.use_mu,
                    c.use_rho,
                    s,
                    r.test_mse,
                    r.outcome.best_epoch
                );
            }
            r
        })
        .collect::<Result<Vec<_>, _>>()?;
    let report = MetricsReport::from_runs(cfg, &runs, start.elapsed().as_secs_f64());
    Ok((report, runs))
}

pub fn run_dir_name(use_mu: bool, use_rho: bool, seed: u64) -> String {
    format!("mu{}_rho{}_seed{seed}", use_mu as u8, use_rho as u8)
}

/// Writes `checkpoint.json` and `history.json` of one run under `dir`.
pub fn write_run(dir: &Path, run: &RunResult) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let cp = run.outcome.checkpoint.to_json()?;
    let path = dir.join("checkpoint.json");
    fs::write(&path, cp).map_err(io_err(&path))?;
    let history = serde_json::to_string_pretty(&run.outcome.history).map_err(|e| HarnessError::Serialize(e.to_string()))?;
    let path = dir.join("history.json");
    fs::write(&path, history).map_err(io_err(&path))?;
    Ok(())
}

/// Writes `report.csv`, `report.md`, `report.json` and `runs/*`.
pub fn write_report(out_dir: &Path, report: &MetricsReport, runs: &[RunResult]) -> Result<(), HarnessError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let write = |name: &str, text: String| {
        let p = out_dir.join(name);
        fs::write(&p, text).map_err(io_err(&p))
    };
    write("report.csv", report.to_csv()?)?;
    write("report.md", report.to_markdown())?;
    write(
        "report.json",
        serde_json::to_string_pretty(report).map_err(|e| HarnessError::Serialize(e.to_string()))?,
    )?;
    for r in runs {
        write_run(&out_dir.join("runs").join(run_dir_name(r.use_mu, r.use_rho, r.seed)), r)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmapss::{Split, Trajectory};
    use crate::physics::TimestepPhysics;

    fn step(k: usize, mu: Vec<f64>, rho: Vec<f64>) -> TimestepPhysics {
        let w = 1.0 / mu.len() as f64;
        TimestepPhysics {
            k,
            modality: mu.len(),
            weights: vec![w; mu.len()],
            mu,
            rho,
            r2: 0.0,
            a_bar: 0.0,
            alive: 10,
            pooled_mean: 0.0,
            pooled_var: 0.0,
            carried: false,
        }
    }

    fn linear_physics(sensor_id: usize, t_max: usize) -> SensorPhysics {
        SensorPhysics {
            sensor_id,
            grid: (1..=t_max).collect(),
            steps: (1..=t_max)
                .map(|k| step(k, vec![k as f64 + sensor_id as f64 / 10.0], vec![0.5]))
                .collect(),
        }
    }

    fn window(dim: usize, len: usize, end: usize) -> Window {
        Window {
            features: (0..dim * len).map(|i| i as f64 * 0.01).collect(),
            feature_dim: dim,
            target: 3.0,
            unit_id: 1,
            end_cycle: end,
        }
    }

    #[test]
    fn augmentation_off_is_identity() {
        let w = window(2, 4, 10);
        let ph = [linear_physics(1, 20), linear_physics(2, 20)];
        let refs: Vec<&SensorPhysics> = ph.iter().collect();
        assert_eq!(augment_features(&w, &refs, false, false, BimodalFeed::Nearest).unwrap(), w);
    }

    #[test]
    fn augmentation_layout_and_clamping() {
        let w = window(2, 4, 22);
        let ph = [linear_physics(1, 20), linear_physics(2, 20)];
        let refs: Vec<&SensorPhysics> = ph.iter().collect();
        let a = augment_features(&w, &refs, true, true, BimodalFeed::Nearest).unwrap();
        assert_eq!(a.feature_dim, 6);
        // Row 0 is cycle 19, rows 2 and 3 fall past the grid.
        assert_eq!(&a.row(0)[..2], w.row(0));
        assert_eq!(&a.row(0)[2..], &[19.1, 19.2, 0.5, 0.5]);
        assert_eq!(&a.row(3)[2..4], &[20.1, 20.2]);
        let only_rho = augment_features(&w, &refs, false, true, BimodalFeed::Nearest).unwrap();
        assert_eq!(only_rho.feature_dim, 4);
        assert_eq!(&only_rho.row(1)[2..], &[0.5, 0.5]);
    }

    #[test]
    fn bimodal_uses_nearest_centroid() {
        let ph = SensorPhysics {
            sensor_id: 3,
            grid: vec![1],
            steps: vec![step(1, vec![0.0, 10.0], vec![1.0, 2.0])],
        };
        let w = Window {
            features: vec![9.2],
            feature_dim: 1,
            target: 0.0,
            unit_id: 1,
            end_cycle: 1,
        };
        let a = augment_features(&w, &[&ph], true, true, BimodalFeed::Nearest).unwrap();
        assert_eq!(a.features, vec![9.2, 10.0, 2.0]);
        let both = augment_features(&w, &[&ph], true, false, BimodalFeed::Both).unwrap();
        assert_eq!(both.features, vec![9.2, 0.0, 10.0]);
    }

    #[test]
    fn missing_physics_is_reported() {
        assert!(matches!(
            align_physics(&[2, 3], &[linear_physics(2, 5)]),
            Err(HarnessError::MissingPhysics(3))
        ));
    }

    #[test]
    fn metric_examples() {
        assert_eq!(error_metrics(&[1.0, 2.0], &[1.0, 2.0]), (0.0, 0.0));
        assert_eq!(error_metrics(&[3.0, -4.0], &[0.0, 0.0]), (12.5, 3.5));
        assert_eq!(error_metrics(&[0.0, 0.0], &[10.0, 20.0]), (250.0, 15.0));
        assert_eq!(mean_std(&[1.0, 2.0, 3.0]), (2.0, 1.0));
    }

    fn constant_target_set(units: usize, len: usize, target: f64) -> TrajectorySet {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        use rand::Rng;
        TrajectorySet {
            trajectories: (1..=units as u32)
                .map(|u| Trajectory {
                    unit_id: u,
                    values: (0..len * 3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    n_sensors: 3,
                    labels: vec![target; len],
                })
                .collect(),
            retained_sensor_ids: vec![2, 3, 4],
            normalization: Vec::new(),
            split: Split::Train,
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let set = constant_target_set(3, 40, 1.0);
        let windows = cmapss::make_windows(&set, 20, 1).unwrap();
        let cfg = TrainConfig {
            epochs: Some(0),
            ..TrainConfig::default()
        };
        let out = train(&cfg, &windows, &[], 0, None).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.best_epoch, 0);
        let fresh = LstmModel::init(cfg.model_shape(3), &mut derived_rng(0, 0, "init"));
        assert_eq!(out.model(), &fresh);
    }

    #[test]
    fn training_is_reproducible_and_selects_best() {
        let set = constant_target_set(6, 60, 0.7);
        let windows = cmapss::make_windows(&set, 20, 1).unwrap();
        let cfg = TrainConfig {
            epochs: Some(15),
            batch_size: 4,
            val_fraction: 0.34,
            ..TrainConfig::default()
        };
        let a = train(&cfg, &windows, &[], 1, None).unwrap();
        let b = train(&cfg, &windows, &[], 1, None).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model(), b.model());
        assert_eq!(a.val_units.len(), 2);
        let best = a.history.iter().map(|h| h.val_loss.unwrap()).fold(f64::INFINITY, f64::min);
        assert_eq!(a.history[a.best_epoch - 1].val_loss.unwrap(), best);
    }

    #[test]
    fn constant_target_is_learned() {
        let c = 0.8;
        let set = constant_target_set(1, 120, c);
        let windows = cmapss::make_windows(&set, 20, 1).unwrap();
        let cfg = TrainConfig {
            epochs: Some(200),
            ..TrainConfig::default()
        };
        let out = train(&cfg, &windows, &[], 0, None).unwrap();
        let prepared = PreparedWindows::new(&cfg, &windows.windows, &[]).unwrap();
        let (mse, _) = dataset_metrics(out.model(), &prepared.examples()).unwrap();
        assert!(mse < 0.01 * c * c, "{mse}");
    }

    #[test]
    fn unused_physics_leaves_training_unchanged() {
        let set = constant_target_set(4, 50, 0.3);
        let windows = cmapss::make_windows(&set, 20, 1).unwrap();
        let cfg = TrainConfig {
            epochs: Some(3),
            ..TrainConfig::default()
        };
        let ph: Vec<SensorPhysics> = [2, 3, 4].iter().map(|&s| linear_physics(s, 50)).collect();
        let refs: Vec<&SensorPhysics> = ph.iter().collect();
        let with = train(&cfg, &windows, &refs, 2, None).unwrap();
        let without = train(&cfg, &windows, &[], 2, None).unwrap();
        assert_eq!(with.checkpoint, without.checkpoint);
        assert_eq!(with.history, without.history);
    }

    #[test]
    fn split_is_by_unit() {
        let set = constant_target_set(10, 45, 1.0);
        let windows = cmapss::make_windows(&set, 20, 1).unwrap();
        let (train, val, units) = split_by_unit(&windows.windows, 0.1, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(units.len(), 1);
        assert!(val.iter().all(|w| w.unit_id == units[0]));
        assert!(train.iter().all(|w| w.unit_id != units[0]));
        assert_eq!(train.len() + val.len(), windows.windows.len());
    }

    #[test]
    fn report_aggregates_exactly() {
        let cfg = TrainConfig::default();
        let set = constant_target_set(2, 20, 1.0);
        let windows = cmapss::make_windows(&set, 20, 1).unwrap();
        let outcome = train(&TrainConfig { epochs: Some(0), ..cfg.clone() }, &windows, &[], 0, None).unwrap();
        let runs: Vec<RunResult> = [1.0, 2.0, 3.0]
            .iter()
            .enumerate()
            .map(|(i, &m)| RunResult {
                use_mu: false,
                use_rho: false,
                seed: i as u64,
                test_mse: m,
                test_l1: m / 2.0,
                outcome: outcome.clone(),
            })
            .collect();
        let report = MetricsReport::from_runs(&cfg, &runs, 0.0);
        assert_eq!(report.cells.len(), 1);
        assert_eq!(report.cell(false, false).unwrap().mse_mean, 2.0);
        let csv = report.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(csv.lines().nth(1).unwrap(), "FD001,false,false,0,1,0.5");
        assert!(report.to_markdown().contains("| 2.0000 ± 1.0000 |"));
    }
}
