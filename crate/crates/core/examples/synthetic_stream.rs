//! Generates a synthetic multi-label stream and summarizes it.

use clin::dataio::{generate_synthetic_stream, SyntheticStreamConfig};

fn main() -> clin::Result<()> {
    let cfg = SyntheticStreamConfig::default();
    let stream = generate_synthetic_stream(&cfg, 0)?;
    println!(
        "{} classes, {} train / {} test samples, {} patches of width {}",
        cfg.total_classes,
        stream.train.len(),
        stream.test.len(),
        stream.train.patches(),
        stream.train.raw_dim()
    );
    println!(
        "mean labels per sample: {:.3} (expected {:.3})",
        stream.train.mean_cardinality(),
        cfg.expected_cardinality()
    );
    let mut counts = vec![0usize; cfg.total_classes];
    for labels in &stream.train.labels {
        for &c in labels {
            counts[c] += 1;
        }
    }
    println!("train positives per class: {counts:?}");
    for (id, labels) in stream.train.ids.iter().zip(&stream.train.labels).take(5) {
        println!("  sample {id}: {labels:?}");
    }
    Ok(())
}
