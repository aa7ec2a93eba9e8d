//! Writes simulated C-MAPSS subsets into a directory.
//!
//! Usage: `cmapss-sim <out-dir> [seed] [FD001 FD003 ...]`

use std::path::PathBuf;
use std::process::ExitCode;

use cmapss_sim::{simulate, SimConfig, Subset};

fn main() -> ExitCode {
    let mut args = std::env::args().skip(1);
    let Some(out) = args.next() else {
        eprintln!("usage: cmapss-sim <out-dir> [seed] [FD001 FD002 FD003 FD004]");
        return ExitCode::from(1);
    };
    let out = PathBuf::from(out);
    let rest: Vec<String> = args.collect();
    let (seed, names) = match rest.first().and_then(|s| s.parse::<u64>().ok()) {
        Some(seed) => (seed, &rest[1..]),
        None => (0, &rest[..]),
    };
    let mut subsets = Vec::new();
    for name in names {
        let subset = match name.to_ascii_uppercase().as_str() {
            "FD001" => Subset::Fd001,
            "FD002" => Subset::Fd002,
            "FD003" => Subset::Fd003,
            "FD004" => Subset::Fd004,
            other => {
                eprintln!("unknown subset {other}");
                return ExitCode::from(1);
            }
        };
        subsets.push(subset);
    }
    if subsets.is_empty() {
        subsets = vec![Subset::Fd001, Subset::Fd002, Subset::Fd003, Subset::Fd004];
    }
    for subset in subsets {
        let sim = simulate(&SimConfig::new(subset, seed));
        if let Err(e) = sim.write_to(&out) {
            eprintln!("writing {}: {e}", out.display());
            return ExitCode::from(1);
        }
        println!("wrote {} to {}", sim.name, out.display());
    }
    ExitCode::SUCCESS
}
