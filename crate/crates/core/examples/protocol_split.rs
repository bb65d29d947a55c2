//! Session splits, label masking and pseudo-labels.

use clin::dataio::{generate_synthetic_stream, SyntheticStreamConfig};
use clin::numerics::Target;
use clin::protocol::{mask_labels, pseudo_label, session_samples, split_protocol, ProtocolName};

fn main() -> clin::Result<()> {
    for name in ["B0-C5", "B10-C5", "B40-C10"] {
        let p: ProtocolName = name.parse()?;
        let total = if p.base >= 40 { 80 } else { 20 };
        let spec = split_protocol(total, p.base, p.increment)?;
        let sizes: Vec<usize> = (1..=spec.len()).map(|t| spec.classes(t).len()).collect();
        println!("{name} over {total} classes: {} sessions of sizes {sizes:?}", spec.len());
    }

    let spec = split_protocol(20, 0, 5)?;
    let stream = generate_synthetic_stream(&SyntheticStreamConfig::default(), 0)?;
    for t in 1..=spec.len() {
        let shared = session_samples(&stream.train, &spec, t, false, true).len();
        let unique = session_samples(&stream.train, &spec, t, true, true).len();
        println!("session {t}: {shared} samples (shared), {unique} (each sample once)");
    }

    let masked = mask_labels(&[1, 6, 12], 5..10, 10);
    println!("labels {{1, 6, 12}} in session 2 of B0-C5: {masked:?}");
    let mut sup = masked;
    pseudo_label(&mut sup, &[0.95, 0.1, 0.5, 0.05, 0.85], 0.8, 0.2);
    let shown: Vec<&str> = sup
        .iter()
        .map(|t| match t {
            Target::Positive => "+",
            Target::Negative => "-",
            Target::Ignore => "?",
        })
        .collect();
    println!("after pseudo-labelling old classes: {}", shown.join(" "));
    Ok(())
}
