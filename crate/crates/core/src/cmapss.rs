//! C-MAPSS ingestion: parsing, RUL labelling, sensor selection, z-scoring and
//! windowing.
//!
//! Trajectory files hold 26 whitespace separated columns per line: unit id,
//! cycle, three operational settings and 21 sensor readings. RUL files hold
//! one integer per test unit, in unit order.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SENSOR_COLUMNS: usize = 21;
pub const FIELDS_PER_RECORD: usize = 26;
pub const DEFAULT_WINDOW_LEN: usize = 20;

/// Sensors dropped before modelling, 1-based. Index 22 does not exist in the
/// 21-column files and is ignored with a warning.
pub const DEFAULT_DROPPED_SENSORS: [usize; 8] = [1, 5, 6, 10, 16, 18, 19, 22];

/// Standard deviations below this are treated as a constant sensor.
pub const STD_EPSILON: f64 = 1e-12;

const SERIAL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line_no}: {reason}")]
    MalformedLine { line_no: usize, reason: String },
    #[error("unit {0}: cycles are not consecutive from 1")]
    NonContiguousCycles(u32),
    #[error("test split requires the per-unit RUL file")]
    MissingRulFile,
    #[error("RUL file has {found} entries but the test file has {expected} units")]
    RulCountMismatch { expected: usize, found: usize },
    #[error("normalization stats cover {found} sensors, expected {expected}")]
    StatsMismatch { expected: usize, found: usize },
    #[error("no trajectory is at least {window_len} cycles long")]
    TrajectoryTooShort { window_len: usize },
    #[error("window length must be at least 1")]
    ZeroWindow,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("serialized trajectory set: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("unsupported trajectory set version {0}")]
    Version(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub unit_id: u32,
    pub cycle: u32,
    pub op_settings: [f64; 3],
    pub sensor_values: [f64; SENSOR_COLUMNS],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// All records of one unit, in cycle order.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecords {
    pub unit_id: u32,
    pub records: Vec<RawRecord>,
}

impl UnitRecords {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorStats {
    pub mean: f64,
    pub std: f64,
}

impl SensorStats {
    pub fn is_constant(&self) -> bool {
        self.std < STD_EPSILON
    }

    pub fn normalize(&self, raw: f64) -> f64 {
        if self.is_constant() {
            0.0
        } else {
            (raw - self.mean) / self.std
        }
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        if self.is_constant() {
            self.mean
        } else {
            z * self.std + self.mean
        }
    }
}

/// One unit's retained, normalised sensor matrix and RUL labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub unit_id: u32,
    /// Row-major `cycles × sensors`.
    pub values: Vec<f64>,
    pub n_sensors: usize,
    /// RUL in cycles at each cycle, same length as the cycle count.
    pub labels: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Sensor row at a 1-based cycle.
    pub fn row(&self, cycle: usize) -> &[f64] {
        let start = (cycle - 1) * self.n_sensors;
        &self.values[start..start + self.n_sensors]
    }

    pub fn sensor_path(&self, column: usize) -> Vec<f64> {
        self.values
            .chunks_exact(self.n_sensors)
            .map(|row| row[column])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySet {
    pub trajectories: Vec<Trajectory>,
    /// Original 1-based sensor indices, in column order.
    pub retained_sensor_ids: Vec<usize>,
    pub normalization: Vec<SensorStats>,
    pub split: Split,
}

impl TrajectorySet {
    pub fn n_sensors(&self) -> usize {
        self.retained_sensor_ids.len()
    }

    pub fn column_of(&self, sensor_id: usize) -> Option<usize> {
        self.retained_sensor_ids.iter().position(|&s| s == sensor_id)
    }

    pub fn to_json(&self) -> Result<String, IngestError> {
        #[derive(Serialize)]
        struct Versioned<'a> {
            version: u32,
            #[serde(flatten)]
            set: &'a TrajectorySet,
        }
        Ok(serde_json::to_string(&Versioned {
            version: SERIAL_VERSION,
            set: self,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self, IngestError> {
        #[derive(Deserialize)]
        struct Versioned {
            version: u32,
            #[serde(flatten)]
            set: TrajectorySet,
        }
        let v: Versioned = serde_json::from_str(text)?;
        if v.version != SERIAL_VERSION {
            return Err(IngestError::Version(v.version));
        }
        Ok(v.set)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    /// Row-major `window_len × feature_dim`.
    pub features: Vec<f64>,
    pub feature_dim: usize,
    pub target: f64,
    pub unit_id: u32,
    /// 1-based cycle of the last row.
    pub end_cycle: usize,
}

impl Window {
    pub fn len(&self) -> usize {
        self.features.len() / self.feature_dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.features[t * self.feature_dim..(t + 1) * self.feature_dim]
    }

    /// 1-based cycle of row `t`.
    pub fn cycle_at(&self, t: usize) -> usize {
        self.end_cycle + 1 + t - self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowBatchSet {
    pub windows: Vec<Window>,
    pub window_len: usize,
    pub shuffle_seed: u64,
    /// Units shorter than `window_len`.
    pub skipped_units: Vec<u32>,
}

fn malformed(line_no: usize, reason: impl Into<String>) -> IngestError {
    IngestError::MalformedLine {
        line_no,
        reason: reason.into(),
    }
}

fn parse_id(token: &str, line_no: usize, what: &str) -> Result<u32, IngestError> {
    if let Ok(v) = token.parse::<u32>() {
        return Ok(v);
    }
    // Some exports write ids as floats ("1.0").
    match token.parse::<f64>() {
        Ok(v) if v.fract() == 0.0 && v >= 0.0 && v <= u32::MAX as f64 => Ok(v as u32),
        _ => Err(malformed(line_no, format!("{what} {token:?} is not a positive integer"))),
    }
}

/// Parses a trajectory file. Blank lines are skipped, tokens past the 26th
/// are ignored, and cycles must run 1, 2, 3, ... within each unit.
pub fn parse_cmapss_file(text: &str) -> Result<Vec<RawRecord>, IngestError> {
    let mut records = Vec::new();
    let mut last_cycle: std::collections::HashMap<u32, u32> = std::collections::HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() < FIELDS_PER_RECORD {
            return Err(malformed(
                line_no,
                format!("expected {FIELDS_PER_RECORD} fields, found {}", tokens.len()),
            ));
        }
        let unit_id = parse_id(tokens[0], line_no, "unit id")?;
        let cycle = parse_id(tokens[1], line_no, "cycle")?;
        if unit_id == 0 || cycle == 0 {
            return Err(malformed(line_no, "unit id and cycle are 1-based"));
        }
        let mut numbers = [0.0; FIELDS_PER_RECORD - 2];
        for (slot, token) in numbers.iter_mut().zip(&tokens[2..FIELDS_PER_RECORD]) {
            *slot = token
                .parse::<f64>()
                .map_err(|_| malformed(line_no, format!("{token:?} is not a number")))?;
        }
        let expected = last_cycle.get(&unit_id).map_or(1, |c| c + 1);
        if cycle != expected {
            return Err(IngestError::NonContiguousCycles(unit_id));
        }
        last_cycle.insert(unit_id, cycle);
        let mut op_settings = [0.0; 3];
        op_settings.copy_from_slice(&numbers[..3]);
        let mut sensor_values = [0.0; SENSOR_COLUMNS];
        sensor_values.copy_from_slice(&numbers[3..]);
        records.push(RawRecord {
            unit_id,
            cycle,
            op_settings,
            sensor_values,
        });
    }
    Ok(records)
}

/// Parses a RUL file: one non-negative integer per nonempty line.
pub fn parse_rul_file(text: &str) -> Result<Vec<u32>, IngestError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(idx, l)| parse_id(l.trim(), idx + 1, "RUL"))
        .collect()
}

/// Groups records by unit in order of first appearance.
pub fn group_units(records: &[RawRecord]) -> Vec<UnitRecords> {
    let mut units: Vec<UnitRecords> = Vec::new();
    let mut index: std::collections::HashMap<u32, usize> = std::collections::HashMap::new();
    for record in records {
        let slot = *index.entry(record.unit_id).or_insert_with(|| {
            units.push(UnitRecords {
                unit_id: record.unit_id,
                records: Vec::new(),
            });
            units.len() - 1
        });
        units[slot].records.push(record.clone());
    }
    units
}

/// Linear RUL labels. Train units run to failure so the last label is 0;
/// test units are shifted by their provided final RUL. `cap` clips labels
/// from above when set.
pub fn compute_rul_labels(
    units: &[UnitRecords],
    split: Split,
    provided_final_rul: Option<&[u32]>,
    cap: Option<f64>,
) -> Result<Vec<Vec<f64>>, IngestError> {
    let finals: Vec<f64> = match split {
        Split::Train => vec![0.0; units.len()],
        Split::Test => {
            let rul = provided_final_rul.ok_or(IngestError::MissingRulFile)?;
            if rul.len() != units.len() {
                return Err(IngestError::RulCountMismatch {
                    expected: units.len(),
                    found: rul.len(),
                });
            }
            rul.iter().map(|&r| r as f64).collect()
        }
    };
    Ok(units
        .iter()
        .zip(finals)
        .map(|(unit, last)| {
            let len = unit.len();
            (1..=len)
                .map(|t| {
                    let label = last + (len - t) as f64;
                    cap.map_or(label, |c| label.min(c))
                })
                .collect()
        })
        .collect())
}

/// Sensor indices (1-based) kept after dropping `drop_ids`.
pub fn retained_sensors(drop_ids: &[usize]) -> Vec<usize> {
    let drop: BTreeSet<usize> = drop_ids.iter().copied().collect();
    for id in &drop {
        if !(1..=SENSOR_COLUMNS).contains(id) {
            log::warn!("sensor index {id} does not exist in the {SENSOR_COLUMNS}-column layout; ignored");
        }
    }
    (1..=SENSOR_COLUMNS).filter(|s| !drop.contains(s)).collect()
}

/// Mean and population standard deviation of each retained sensor over all
/// cycles of all units.
pub fn sensor_stats(units: &[UnitRecords], retained: &[usize]) -> Vec<SensorStats> {
    retained
        .iter()
        .map(|&sensor| {
            let values = units
                .iter()
                .flat_map(|u| u.records.iter().map(move |r| r.sensor_values[sensor - 1]));
            let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
            if n == 0 {
                return SensorStats { mean: 0.0, std: 0.0 };
            }
            let mean = sum / n as f64;
            let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            SensorStats {
                mean,
                std: var.sqrt(),
            }
        })
        .collect()
}

/// Drops sensors and z-scores the rest. Without `stats` the statistics are
/// computed from these units (train split); test data must pass the train
/// statistics in.
pub fn select_and_normalize(
    units: &[UnitRecords],
    labels: &[Vec<f64>],
    split: Split,
    drop_ids: &[usize],
    stats: Option<&[SensorStats]>,
) -> Result<TrajectorySet, IngestError> {
    let retained = retained_sensors(drop_ids);
    let normalization = match stats {
        Some(s) if s.len() != retained.len() => {
            return Err(IngestError::StatsMismatch {
                expected: retained.len(),
                found: s.len(),
            })
        }
        Some(s) => s.to_vec(),
        None => sensor_stats(units, &retained),
    };
    let n_sensors = retained.len();
    let trajectories = units
        .iter()
        .zip(labels)
        .map(|(unit, labels)| {
            let mut values = Vec::with_capacity(unit.len() * n_sensors);
            for record in &unit.records {
                for (&sensor, st) in retained.iter().zip(&normalization) {
                    values.push(st.normalize(record.sensor_values[sensor - 1]));
                }
            }
            Trajectory {
                unit_id: unit.unit_id,
                values,
                n_sensors,
                labels: labels.clone(),
            }
        })
        .collect();
    Ok(TrajectorySet {
        trajectories,
        retained_sensor_ids: retained,
        normalization,
        split,
    })
}

/// End cycles of the non-overlapping windows of a trajectory, tiled backward
/// from the last cycle, in ascending order.
pub fn window_end_cycles(len: usize, window_len: usize) -> Vec<usize> {
    let count = len / window_len;
    (0..count).rev().map(|i| len - i * window_len).collect()
}

/// Cuts every trajectory into non-overlapping windows anchored at its final
/// cycle and shuffles them with a seeded generator. Units shorter than the
/// window are skipped with a warning.
pub fn make_windows(
    set: &TrajectorySet,
    window_len: usize,
    seed: u64,
) -> Result<WindowBatchSet, IngestError> {
    if window_len == 0 {
        return Err(IngestError::ZeroWindow);
    }
    let mut windows = Vec::new();
    let mut skipped_units = Vec::new();
    for traj in &set.trajectories {
        if traj.len() < window_len {
            log::warn!(
                "unit {} has {} cycles, shorter than the {window_len}-cycle window; skipped",
                traj.unit_id,
                traj.len()
            );
            skipped_units.push(traj.unit_id);
            continue;
        }
        for end in window_end_cycles(traj.len(), window_len) {
            windows.push(window_at(traj, end, window_len));
        }
    }
    if windows.is_empty() && !set.trajectories.is_empty() {
        return Err(IngestError::TrajectoryTooShort { window_len });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    windows.shuffle(&mut rng);
    Ok(WindowBatchSet {
        windows,
        window_len,
        shuffle_seed: seed,
        skipped_units,
    })
}

/// The window of `trajectory` ending at 1-based `end_cycle`.
pub fn window_at(trajectory: &Trajectory, end_cycle: usize, window_len: usize) -> Window {
    let n = trajectory.n_sensors;
    let start = (end_cycle - window_len) * n;
    Window {
        features: trajectory.values[start..end_cycle * n].to_vec(),
        feature_dim: n,
        target: trajectory.labels[end_cycle - 1],
        unit_id: trajectory.unit_id,
        end_cycle,
    }
}

fn read(path: &Path) -> Result<String, IngestError> {
    fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn in_file<T>(path: &Path, r: Result<T, IngestError>) -> Result<T, IngestError> {
    r.map_err(|e| match e {
        e @ (IngestError::MalformedLine { .. }
        | IngestError::NonContiguousCycles(_)
        | IngestError::RulCountMismatch { .. }) => IngestError::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        },
        other => other,
    })
}

/// Options shared by the file loaders.
#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub drop_ids: Vec<usize>,
    pub rul_cap: Option<f64>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            drop_ids: DEFAULT_DROPPED_SENSORS.to_vec(),
            rul_cap: None,
        }
    }
}

pub fn train_path(dir: &Path, condition: &str) -> PathBuf {
    dir.join(format!("train_{condition}.txt"))
}

pub fn test_path(dir: &Path, condition: &str) -> PathBuf {
    dir.join(format!("test_{condition}.txt"))
}

pub fn rul_path(dir: &Path, condition: &str) -> PathBuf {
    dir.join(format!("RUL_{condition}.txt"))
}

/// Loads `train_<condition>.txt` from `dir` and normalises it with its own
/// statistics.
pub fn load_train(dir: &Path, condition: &str, opts: &LoadOptions) -> Result<TrajectorySet, IngestError> {
    let path = train_path(dir, condition);
    let records = in_file(&path, parse_cmapss_file(&read(&path)?))?;
    let units = group_units(&records);
    let labels = compute_rul_labels(&units, Split::Train, None, opts.rul_cap)?;
    select_and_normalize(&units, &labels, Split::Train, &opts.drop_ids, None)
}

/// Loads `test_<condition>.txt` and `RUL_<condition>.txt`, normalised with
/// the train statistics.
pub fn load_test(
    dir: &Path,
    condition: &str,
    opts: &LoadOptions,
    train_stats: &[SensorStats],
) -> Result<TrajectorySet, IngestError> {
    let path = test_path(dir, condition);
    let records = in_file(&path, parse_cmapss_file(&read(&path)?))?;
    let units = group_units(&records);
    let rul_file = rul_path(dir, condition);
    if !rul_file.exists() {
        return Err(IngestError::File {
            path: rul_file,
            message: IngestError::MissingRulFile.to_string(),
        });
    }
    let rul = in_file(&rul_file, parse_rul_file(&read(&rul_file)?))?;
    let labels = in_file(
        &rul_file,
        compute_rul_labels(&units, Split::Test, Some(&rul), opts.rul_cap),
    )?;
    select_and_normalize(&units, &labels, Split::Test, &opts.drop_ids, Some(train_stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(unit: u32, cycle: u32, base: f64) -> String {
        let sensors: Vec<String> = (0..21).map(|j| format!("{}", base + j as f64)).collect();
        format!("{unit} {cycle} 0.0 0.0 100.0 {}", sensors.join(" "))
    }

    fn units_from(lines: &[String]) -> Vec<UnitRecords> {
        group_units(&parse_cmapss_file(&lines.join("\n")).unwrap())
    }

    #[test]
    fn parses_one_record() {
        let text = "1 1 0.0 0.0 100.0 518.67 641.82 1589.70 1400.60 14.62 21.61 554.36 2388.06 \
                    9046.19 1.30 47.47 521.66 2388.02 8138.62 8.4195 0.03 392 2388 100.00 39.06 23.4190  ";
        let records = parse_cmapss_file(text).unwrap();
        assert_eq!(records.len(), 1);
        let r = &records[0];
        assert_eq!((r.unit_id, r.cycle), (1, 1));
        assert_eq!(r.op_settings, [0.0, 0.0, 100.0]);
        assert_eq!(r.sensor_values[0], 518.67);
        assert_eq!(r.sensor_values[20], 23.4190);
    }

    #[test]
    fn empty_file_is_empty() {
        assert!(parse_cmapss_file("").unwrap().is_empty());
        assert!(parse_cmapss_file("\n  \n").unwrap().is_empty());
    }

    #[test]
    fn short_line_is_malformed() {
        let mut tokens: Vec<String> = line(1, 1, 0.0).split(' ').map(String::from).collect();
        tokens.pop();
        assert_eq!(tokens.len(), 25);
        let err = parse_cmapss_file(&tokens.join(" ")).unwrap_err();
        assert!(matches!(err, IngestError::MalformedLine { line_no: 1, .. }));
    }

    #[test]
    fn non_numeric_is_malformed() {
        let text = format!("{}\n{}", line(1, 1, 0.0), line(1, 2, 0.0).replace("100.0", "abc"));
        let err = parse_cmapss_file(&text).unwrap_err();
        assert!(matches!(err, IngestError::MalformedLine { line_no: 2, .. }));
    }

    #[test]
    fn skipped_cycle_is_rejected() {
        let text = format!("{}\n{}", line(3, 1, 0.0), line(3, 3, 0.0));
        assert!(matches!(
            parse_cmapss_file(&text).unwrap_err(),
            IngestError::NonContiguousCycles(3)
        ));
    }

    #[test]
    fn train_labels_run_to_zero() {
        let units = units_from(&(1..=5).map(|c| line(1, c, 0.0)).collect::<Vec<_>>());
        let labels = compute_rul_labels(&units, Split::Train, None, None).unwrap();
        assert_eq!(labels[0], vec![4.0, 3.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn test_labels_shift_by_final_rul() {
        let units = units_from(&(1..=3).map(|c| line(1, c, 0.0)).collect::<Vec<_>>());
        let labels = compute_rul_labels(&units, Split::Test, Some(&[10]), None).unwrap();
        assert_eq!(labels[0], vec![12.0, 11.0, 10.0]);
    }

    #[test]
    fn test_split_without_rul_fails() {
        let units = units_from(&[line(1, 1, 0.0)]);
        assert!(matches!(
            compute_rul_labels(&units, Split::Test, None, None),
            Err(IngestError::MissingRulFile)
        ));
    }

    #[test]
    fn cap_clips_labels() {
        let units = units_from(&(1..=5).map(|c| line(1, c, 0.0)).collect::<Vec<_>>());
        let labels = compute_rul_labels(&units, Split::Train, None, Some(2.0)).unwrap();
        assert_eq!(labels[0], vec![2.0, 2.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn default_drop_keeps_fourteen() {
        let kept = retained_sensors(&DEFAULT_DROPPED_SENSORS);
        assert_eq!(kept, vec![2, 3, 4, 7, 8, 9, 11, 12, 13, 14, 15, 17, 20, 21]);
    }

    #[test]
    fn constant_sensor_normalizes_to_zero() {
        // every sensor column is constant across cycles here
        let units = units_from(&(1..=4).map(|c| line(1, c, 518.67)).collect::<Vec<_>>());
        let labels = compute_rul_labels(&units, Split::Train, None, None).unwrap();
        let set = select_and_normalize(&units, &labels, Split::Train, &[], None).unwrap();
        assert!(set.trajectories[0].values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn test_reuses_train_stats() {
        let train = units_from(&[line(1, 1, 0.0), line(1, 2, 2.0)]);
        let test = units_from(&[line(1, 1, 4.0)]);
        let tl = compute_rul_labels(&train, Split::Train, None, None).unwrap();
        let train_set = select_and_normalize(&train, &tl, Split::Train, &[], None).unwrap();
        // mean 1 + j, std 1 for every sensor
        assert!(train_set.normalization.iter().all(|s| (s.std - 1.0).abs() < 1e-12));
        let el = compute_rul_labels(&test, Split::Test, Some(&[5]), None).unwrap();
        let test_set =
            select_and_normalize(&test, &el, Split::Test, &[], Some(&train_set.normalization)).unwrap();
        assert!(test_set.trajectories[0].values.iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn window_tiling_from_end() {
        assert_eq!(window_end_cycles(45, 20), vec![25, 45]);
        assert_eq!(window_end_cycles(20, 20), vec![20]);
        assert!(window_end_cycles(19, 20).is_empty());
    }

    fn ramp_set(lengths: &[usize]) -> TrajectorySet {
        let lines: Vec<String> = lengths
            .iter()
            .enumerate()
            .flat_map(|(u, &len)| (1..=len).map(move |c| line(u as u32 + 1, c as u32, c as f64)))
            .collect();
        let units = units_from(&lines);
        let labels = compute_rul_labels(&units, Split::Train, None, None).unwrap();
        select_and_normalize(&units, &labels, Split::Train, &DEFAULT_DROPPED_SENSORS, None).unwrap()
    }

    #[test]
    fn windows_skip_short_units() {
        let set = ramp_set(&[45, 20, 19]);
        let w = make_windows(&set, 20, 1).unwrap();
        assert_eq!(w.windows.len(), 3);
        assert_eq!(w.skipped_units, vec![3]);
        let mut ends: Vec<(u32, usize)> = w.windows.iter().map(|w| (w.unit_id, w.end_cycle)).collect();
        ends.sort();
        assert_eq!(ends, vec![(1, 25), (1, 45), (2, 20)]);
        for win in &w.windows {
            assert_eq!(win.len(), 20);
            let len = if win.unit_id == 1 { 45 } else { 20 };
            assert_eq!(win.target, (len - win.end_cycle) as f64);
        }
    }

    #[test]
    fn all_short_is_an_error() {
        let set = ramp_set(&[5, 6]);
        assert!(matches!(
            make_windows(&set, 20, 0),
            Err(IngestError::TrajectoryTooShort { window_len: 20 })
        ));
    }

    #[test]
    fn shuffle_is_seeded() {
        let set = ramp_set(&[200, 180, 160]);
        let a = make_windows(&set, 20, 9).unwrap();
        let b = make_windows(&set, 20, 9).unwrap();
        assert_eq!(a, b);
        let c = make_windows(&set, 20, 10).unwrap();
        assert_ne!(a.windows, c.windows);
    }

    #[test]
    fn window_cycles_and_rows() {
        let set = ramp_set(&[45]);
        let w = window_at(&set.trajectories[0], 45, 20);
        assert_eq!(w.cycle_at(0), 26);
        assert_eq!(w.cycle_at(19), 45);
        assert_eq!(w.row(19), set.trajectories[0].row(45));
    }

    #[test]
    fn serialization_round_trips() {
        let set = ramp_set(&[30, 25]);
        let back = TrajectorySet::from_json(&set.to_json().unwrap()).unwrap();
        assert_eq!(set, back);
    }

    #[test]
    fn rul_file_parsing() {
        assert_eq!(parse_rul_file("112\n98\n\n69\n").unwrap(), vec![112, 98, 69]);
        assert!(parse_rul_file("12\nx\n").is_err());
    }
}
