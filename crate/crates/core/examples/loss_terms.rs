//! The three training losses on hand-made inputs.

use clin::losses::{asl_loss_value, kd_loss_value, mc_loss_value, total_loss, DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_GAMMA_NEG, DEFAULT_GAMMA_POS};
use clin::numerics::{Target, Tensor};

fn main() -> clin::Result<()> {
    let probs = Tensor::new(&[2, 3], vec![0.9, 0.2, 0.6, 0.1, 0.7, 0.5])?;
    let targets = [
        Target::Positive,
        Target::Negative,
        Target::Ignore,
        Target::Negative,
        Target::Positive,
        Target::Negative,
    ];
    let ce = asl_loss_value(&probs, &targets, DEFAULT_GAMMA_POS, DEFAULT_GAMMA_NEG)?;
    println!("asymmetric loss over 5 supervised entries: {ce:.6}");

    let projected = Tensor::new(&[2, 3, 2], vec![1.0, 0.1, 0.0, 1.0, 0.3, 0.3, 0.9, 0.2, 0.1, 1.0, 0.5, 0.5])?;
    let set = clin::losses::build_instance_set(&projected, &targets)?;
    println!("contrastive loss over {} positive instances: {:.6}", set.len(), mc_loss_value(&set)?);

    let before = Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0])?;
    let after = Tensor::new(&[1, 2, 2], vec![1.1, 0.0, 0.0, 0.8])?;
    let kd = kd_loss_value(&after, &before)?;
    println!("distillation loss: {kd:.6}");

    let b = total_loss(ce, mc_loss_value(&set)?, kd, DEFAULT_ALPHA, DEFAULT_BETA);
    println!("total = ce + {} mc + {} kd = {:.6}", b.alpha, b.beta, b.total);
    Ok(())
}
