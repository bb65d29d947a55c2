//! Average precision, mAP and F1 scores on a small score grid.

use clin::metrics::{average_precision, MetricsReport};

fn main() -> clin::Result<()> {
    let ap = average_precision(&[0.9, 0.8, 0.1], &[false, true, true]).unwrap_or(0.0);
    println!("AP of ranking [-, +, +]: {ap:.10}");

    let scores = [
        0.9, 0.2, 0.7, //
        0.4, 0.8, 0.1, //
        0.6, 0.3, 0.2, //
        0.65, 0.6, 0.4,
    ];
    let labels = [
        true, false, true, //
        false, true, false, //
        true, false, false, //
        false, true, false,
    ];
    let report = MetricsReport::compute(1, &scores, &labels, 4, 3)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}
