//! Writes a model and a feature file to disk, reads them back and shows
//! that a damaged header is refused.

use clin::cinet::{Architecture, ClinModel, ModelConfig};
use clin::dataio::{read_checkpoint, read_features, write_checkpoint, write_features, Checkpoint};
use clin::numerics::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> clin::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut model = ClinModel::new(ModelConfig::default(), Architecture::Cinet, 3)?;
    model.expand_classes(4, 1, 5)?;
    let ckpt = Checkpoint { model, session: 1 };
    let path = dir.path().join("session-01.ckpt");
    write_checkpoint(&path, &ckpt)?;
    let back = read_checkpoint(&path)?;
    println!(
        "checkpoint: {} bytes, {} parameters, identical after reload: {}",
        std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0),
        back.model.params.numel(),
        back == ckpt
    );

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let features = Tensor::new(&[3, 4, 5], Tensor::randn(&[60], 1.0, &mut rng).data().iter().map(|&v| v as f32 as f64).collect())?;
    let fpath = dir.path().join("train.clf");
    write_features(&fpath, &features)?;
    println!("features identical after reload: {}", read_features(&fpath)? == features);

    let mut bytes = std::fs::read(&fpath).expect("read back");
    bytes[0] = b'X';
    std::fs::write(&fpath, bytes).expect("write damaged copy");
    match read_features(&fpath) {
        Ok(_) => println!("damaged file unexpectedly accepted"),
        Err(e) => println!("damaged file refused: {e} (data error: {})", e.is_data_error()),
    }
    Ok(())
}
