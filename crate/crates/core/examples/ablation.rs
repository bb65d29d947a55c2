//! Baseline, CINet and CINet with the contrastive term on the same streams.
//!
//! `cargo run --release --example ablation -- [seeds]`

use clin::cli::{format_table, run_ablation, ExperimentConfig};
use clin::trainer::Variant;

fn main() -> clin::Result<()> {
    let n: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let seeds: Vec<u64> = (0..n).collect();
    let rows = run_ablation(&ExperimentConfig::default(), &Variant::ALL, &seeds)?;
    print!("{}", format_table(&rows));
    Ok(())
}
