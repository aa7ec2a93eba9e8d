//! Synthetic sensor trajectories sampled from estimated physics.
//!
//! Every timestep is an independent draw from the mixture defined by the
//! per-mode weights, means and variances of that grid point. Each step
//! consumes exactly one uniform and one standard normal, so a path is a
//! pure function of `(physics, seed)` and a prefix of a longer path equals
//! the shorter path with the same seed.

use std::io::Write;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::physics::{SensorPhysics, PHYSICS_SCHEMA};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("requested {length} cycles but sensor {sensor_id} physics covers only {t_max}")]
    LengthExceedsSupport {
        sensor_id: usize,
        length: usize,
        t_max: usize,
    },
    #[error("at least one path is required")]
    NoPaths,
    #[error("no physics to sample from")]
    NoPhysics,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTrajectory {
    pub sensor_id: usize,
    /// Normalized units, one value per cycle starting at cycle 1.
    pub values: Vec<f64>,
    pub seed: u64,
    /// Sampled mode index per cycle.
    pub mode_trace: Vec<usize>,
}

pub fn sample_path(physics: &SensorPhysics, length: usize, seed: u64) -> Result<SyntheticTrajectory, SynthError> {
    if length > physics.t_max() {
        return Err(SynthError::LengthExceedsSupport {
            sensor_id: physics.sensor_id,
            length,
            t_max: physics.t_max(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(length);
    let mut mode_trace = Vec::with_capacity(length);
    for step in &physics.steps[..length] {
        let u: f64 = rng.random();
        let z: f64 = rng.sample(StandardNormal);
        let m = if step.modality == 2 && u >= step.weights[0] { 1 } else { 0 };
        let rho = step.rho[m];
        values.push(if rho > 0.0 { step.mu[m] + rho.sqrt() * z } else { step.mu[m] });
        mode_trace.push(m);
    }
    Ok(SyntheticTrajectory {
        sensor_id: physics.sensor_id,
        values,
        seed,
        mode_trace,
    })
}

/// Seed of path `path` of sensor `sensor_id` under `master`.
pub fn path_seed(master: u64, sensor_id: usize, path: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(sensor_id as u64);
    rng.set_word_pos(2 * path as u128);
    rng.next_u64()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub master_seed: u64,
    pub length: usize,
    pub sensor_ids: Vec<usize>,
    /// `paths[p][s]` is path `p` of the `s`-th sensor.
    pub paths: Vec<Vec<SyntheticTrajectory>>,
}

pub fn generate_dataset(
    physics: &[SensorPhysics],
    n_paths: usize,
    length: usize,
    master_seed: u64,
) -> Result<SyntheticDataset, SynthError> {
    if n_paths == 0 {
        return Err(SynthError::NoPaths);
    }
    if physics.is_empty() {
        return Err(SynthError::NoPhysics);
    }
    let paths = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            physics
                .iter()
                .map(|ph| sample_path(ph, length, path_seed(master_seed, ph.sensor_id, p)))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SyntheticDataset {
        master_seed,
        length,
        sensor_ids: physics.iter().map(|p| p.sensor_id).collect(),
        paths,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub master_seed: u64,
    pub n_paths: usize,
    pub length: usize,
    pub sensor_ids: Vec<usize>,
    pub physics_schema: String,
}

impl SyntheticDataset {
    /// Rows of `path_id,cycle,s<id>...`, paths in order, cycles ascending.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), SynthError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["path_id".to_string(), "cycle".to_string()];
        header.extend(self.sensor_ids.iter().map(|id| format!("s{id}")));
        w.write_record(&header)?;
        for (p, sensors) in self.paths.iter().enumerate() {
            for t in 0..self.length {
                let mut row = vec![p.to_string(), (t + 1).to_string()];
                row.extend(sensors.iter().map(|s| s.values[t].to_string()));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            master_seed: self.master_seed,
            n_paths: self.paths.len(),
            length: self.length,
            sensor_ids: self.sensor_ids.clone(),
            physics_schema: PHYSICS_SCHEMA.to_string(),
        }
    }
}
