//! A full B0-C5 class-incremental run with per-session reports.
//!
//! `cargo run --release --example incremental_run -- [seed]`

use clin::cli::ExperimentConfig;
use clin::dataio::generate_synthetic_stream;
use clin::trainer::{run_stream_with, Variant};

fn main() -> clin::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut cfg = ExperimentConfig::default();
    cfg.train.seed = seed;
    let stream = generate_synthetic_stream(&cfg.stream, seed)?;
    let spec = cfg.session_spec()?;
    let result = run_stream_with(
        cfg.model.clone(),
        Variant::CinetMc.architecture(),
        &spec,
        &stream.train,
        &stream.test,
        &cfg.train,
        |state, r| {
            println!(
                "session {}: {} classes, mAP {:.2}, CF1 {:.2}, OF1 {:.2}, buffer {} exemplars",
                r.session,
                r.classes,
                r.map,
                r.cf1,
                r.of1,
                state.buffer.total()
            );
            Ok(())
        },
    )?;
    println!("average mAP {:.2}, last mAP {:.2}", result.summary.average, result.summary.last);
    Ok(())
}
