//! Final mAP against the number of exemplars kept per class.
//!
//! `cargo run --release --example buffer_sweep -- [seeds]`

use clin::cli::{format_table, run_buffer_sweep, ExperimentConfig};
use clin::trainer::Variant;

fn main() -> clin::Result<()> {
    let n: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let seeds: Vec<u64> = (0..n).collect();
    let cfg = ExperimentConfig::default();
    for variant in [Variant::Cinet, Variant::CinetMc] {
        println!("{}", variant.label());
        print!("{}", format_table(&run_buffer_sweep(&cfg, variant, &[0, 5, 10, 20], &seeds)?));
    }
    Ok(())
}
