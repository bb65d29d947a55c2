//! Class tokens attending over patch features.
//!
//! Builds a small model, runs one batch and prints, for each class, which
//! patch its first head attends to most.

use clin::cinet::{Architecture, ClinModel, ModelConfig};
use clin::numerics::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> clin::Result<()> {
    let cfg = ModelConfig {
        raw_dim: 6,
        dim: 8,
        heads: 2,
        ..ModelConfig::default()
    };
    let mut model = ClinModel::new(cfg, Architecture::Cinet, 0)?;
    model.expand_classes(3, 1, 1)?;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let features = Tensor::randn(&[2, 5, 6], 1.0, &mut rng);
    let mut g = Graph::new();
    let out = model.forward(&mut g, &features)?;

    let e = g.value(out.embeddings);
    println!("embeddings {:?}, probabilities {:?}", e.shape(), g.value(out.probs).shape());
    let att = g.value(out.attention[0]);
    let [n, h, c, l] = [att.shape()[0], att.shape()[1], att.shape()[2], att.shape()[3]];
    for s in 0..n {
        for k in 0..c {
            let row: Vec<f64> = (0..l).map(|p| att.at(&[s, 0, k, p])).collect();
            let (best, w) = row
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |acc, (p, &w)| if w > acc.1 { (p, w) } else { acc });
            println!("sample {s} class {k}: patch {best} (weight {w:.3}, row sums to {:.6})", row.iter().sum::<f64>());
        }
    }
    println!("{h} heads per block, {} probabilities in [0, 1]", g.value(out.probs).len());
    Ok(())
}
