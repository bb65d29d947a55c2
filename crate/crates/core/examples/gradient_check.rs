//! Central finite-difference check of the full model gradient.
//!
//! `cargo run --release --example gradient_check -- [seed]`

use clin::trainer::{gradcheck_full_model, GradCheckDims};

fn main() -> clin::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let plain = gradcheck_full_model(GradCheckDims::default(), seed)?;
    println!(
        "central h=1e-5:      max rel {:.3e}, max abs {:.3e} (largest gradient {:.3e}), {} coordinates",
        plain.max_rel_error, plain.max_abs_error, plain.max_abs_grad, plain.coordinates
    );
    let rich = gradcheck_full_model(
        GradCheckDims {
            step: 1e-3,
            extrapolate: true,
            ..GradCheckDims::default()
        },
        seed,
    )?;
    println!(
        "Richardson h=1e-3:   max rel {:.3e}, max abs {:.3e}",
        rich.max_rel_error, rich.max_abs_error
    );
    if let Some((name, i)) = plain.worst {
        println!("worst coordinate: {name}[{i}]");
    }
    Ok(())
}
