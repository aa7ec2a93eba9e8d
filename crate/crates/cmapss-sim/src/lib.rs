//! Simulated turbofan run-to-failure data in the C-MAPSS text layout.
//!
//! Each subset mimics the structure of the public dataset: 26 whitespace
//! separated columns (unit, cycle, 3 operational settings, 21 sensors),
//! run-to-failure training units, truncated test units and a matching
//! `RUL_FD00x.txt` with one integer per test unit.
//!
//! Degradation follows a per-unit exponential health curve that is flat for
//! most of the life and accelerates towards failure. Sensors respond with
//! fault-mode dependent gains, operating regimes shift the baselines, and
//! each reading carries Gaussian measurement noise. The numbers are chosen to
//! look like the real files, not to reproduce them.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    Fd001,
    Fd002,
    Fd003,
    Fd004,
}

impl Subset {
    pub fn name(self) -> &'static str {
        match self {
            Subset::Fd001 => "FD001",
            Subset::Fd002 => "FD002",
            Subset::Fd003 => "FD003",
            Subset::Fd004 => "FD004",
        }
    }

    fn regimes(self) -> usize {
        match self {
            Subset::Fd001 | Subset::Fd003 => 1,
            Subset::Fd002 | Subset::Fd004 => 6,
        }
    }

    fn fault_modes(self) -> usize {
        match self {
            Subset::Fd001 | Subset::Fd002 => 1,
            Subset::Fd003 | Subset::Fd004 => 2,
        }
    }

    /// Unit counts of the public subsets (train, test).
    pub fn default_units(self) -> (usize, usize) {
        match self {
            Subset::Fd001 => (100, 100),
            Subset::Fd002 => (260, 259),
            Subset::Fd003 => (100, 100),
            Subset::Fd004 => (248, 249),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub subset: Subset,
    pub train_units: usize,
    pub test_units: usize,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(subset: Subset, seed: u64) -> Self {
        let (train_units, test_units) = subset.default_units();
        Self {
            subset,
            train_units,
            test_units,
            seed,
        }
    }
}

/// File contents of one simulated subset.
#[derive(Debug, Clone)]
pub struct SimulatedSubset {
    pub name: &'static str,
    pub train: String,
    pub test: String,
    pub rul: String,
}

impl SimulatedSubset {
    /// Writes `train_FD00x.txt`, `test_FD00x.txt` and `RUL_FD00x.txt`.
    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("train_{}.txt", self.name)), &self.train)?;
        fs::write(dir.join(format!("test_{}.txt", self.name)), &self.test)?;
        fs::write(dir.join(format!("RUL_{}.txt", self.name)), &self.rul)?;
        Ok(())
    }
}

// Sensor baselines at sea-level static, roughly the first FD001 row.
const BASE: [f64; 21] = [
    518.67, 641.82, 1589.70, 1400.60, 14.62, 21.61, 554.36, 2388.06, 9046.19, 1.30, 47.47, 521.66,
    2388.02, 8138.62, 8.4195, 0.03, 392.0, 2388.0, 100.0, 39.06, 23.419,
];

// Shift at failure for the first fault mode (HPC degradation).
const GAIN: [f64; 21] = [
    0.0, 1.4, 40.0, 45.0, 0.0, 0.0, -3.5, 0.25, 60.0, 0.0, 1.3, -3.0, 0.25, 50.0, 0.12, 0.0, 6.0,
    0.0, 0.0, -0.9, -0.55,
];

const NOISE: [f64; 21] = [
    0.0, 0.5, 6.0, 9.0, 0.0, 0.001, 0.9, 0.07, 20.0, 0.0, 0.27, 0.74, 0.07, 19.0, 0.037, 0.0, 1.5,
    0.0, 0.0, 0.18, 0.11,
];

// The second fault mode (fan degradation) reverses the efficiency-driven
// sensors and damps the rest.
const FAN_FAULT_SCALE: [f64; 21] = [
    1.0, 0.6, 0.7, 0.5, 1.0, 1.0, -1.0, 1.4, 0.3, 1.0, 0.6, -1.0, 1.4, 0.3, 0.8, 1.0, 0.7, 1.0,
    1.0, -1.0, -1.0,
];

const REGIMES: [(f64, f64, f64); 6] = [
    (0.0, 0.0, 100.0),
    (10.0, 0.25, 100.0),
    (20.0, 0.70, 100.0),
    (25.0, 0.62, 60.0),
    (35.0, 0.84, 100.0),
    (42.0, 0.84, 100.0),
];

const REGIME_SCALE: [f64; 6] = [1.0, 0.93, 0.87, 0.79, 0.84, 0.81];

struct Unit {
    life: usize,
    initial_wear: f64,
    tau: f64,
    fault: usize,
}

impl Unit {
    fn draw(rng: &mut ChaCha8Rng, fault_modes: usize) -> Self {
        let gamma = Gamma::<f64>::new(2.5, 32.0).expect("valid gamma");
        let life = (128.0 + gamma.sample(rng)).min(362.0).round() as usize;
        let initial_wear = rng.random_range(0.0..0.15);
        let tau = life as f64 * rng.random_range(0.18..0.32);
        let fault = rng.random_range(0..fault_modes);
        Self {
            life,
            initial_wear,
            tau,
            fault,
        }
    }

    fn health_loss(&self, cycle: usize) -> f64 {
        let t = cycle as f64;
        let l = self.life as f64;
        let ramp = (t / self.tau).exp_m1() / (l / self.tau).exp_m1();
        self.initial_wear + (1.0 - self.initial_wear) * ramp
    }
}

fn write_unit(
    out: &mut String,
    rng: &mut ChaCha8Rng,
    subset: Subset,
    unit_id: usize,
    unit: &Unit,
    cycles: usize,
) {
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    for cycle in 1..=cycles {
        let regime = rng.random_range(0..subset.regimes());
        let (alt, mach, tra) = REGIMES[regime];
        let settings = [
            alt + 0.002 * std_normal.sample(rng),
            mach + 0.0003 * std_normal.sample(rng),
            tra,
        ];
        let wear = unit.health_loss(cycle);
        let _ = write!(out, "{unit_id} {cycle} {:.4} {:.4} {:.1}", settings[0], settings[1], settings[2]);
        for j in 0..21 {
            let base = if subset.regimes() > 1 {
                // Regime shift differs slightly per sensor so that the
                // normalised data keeps a multimodal signature.
                BASE[j] * (REGIME_SCALE[regime] + 0.01 * (j as f64 % 3.0) * regime as f64)
            } else {
                BASE[j]
            };
            let gain = if unit.fault == 1 {
                GAIN[j] * FAN_FAULT_SCALE[j]
            } else {
                GAIN[j]
            };
            let value = base + gain * wear + NOISE[j] * std_normal.sample(rng);
            match j {
                16 | 17 => {
                    let _ = write!(out, " {}", value.round() as i64);
                }
                _ => {
                    let _ = write!(out, " {value:.4}");
                }
            }
        }
        out.push_str("  \n");
    }
}

/// Simulates one subset deterministically from `config.seed`.
pub fn simulate(config: &SimConfig) -> SimulatedSubset {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let subset = config.subset;
    let mut train = String::new();
    for unit_id in 1..=config.train_units {
        let unit = Unit::draw(&mut rng, subset.fault_modes());
        write_unit(&mut train, &mut rng, subset, unit_id, &unit, unit.life);
    }
    let mut test = String::new();
    let mut rul = String::new();
    for unit_id in 1..=config.test_units {
        let unit = Unit::draw(&mut rng, subset.fault_modes());
        let max_rul = 145.min(unit.life - 31);
        let remaining = rng.random_range(7..=max_rul);
        let observed = unit.life - remaining;
        write_unit(&mut test, &mut rng, subset, unit_id, &unit, observed);
        let _ = writeln!(rul, "{remaining}");
    }
    SimulatedSubset {
        name: subset.name(),
        train,
        test,
        rul,
    }
}
