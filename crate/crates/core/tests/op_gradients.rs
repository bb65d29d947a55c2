//! Every differentiable graph op against central finite differences.

use clin::numerics::{finite_diff_check, Graph, ParamStore, Target, Tensor, Var};
use clin::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOLERANCE: f64 = 1e-7;
const STEP: f64 = 1e-5;

/// Builds one parameter per shape, applies `op` and reduces its output to a
/// scalar through a fixed random weighting.
fn check<F>(name: &str, shapes: &[&[usize]], op: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_scaled(name, shapes, 1.0, op);
}

fn check_scaled<F>(name: &str, shapes: &[&[usize]], std: f64, op: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 31 + shapes.len() as u64);
    let mut store = ParamStore::new();
    for (i, s) in shapes.iter().enumerate() {
        store.insert(format!("p{i}"), Tensor::randn(s, std, &mut rng), true);
    }
    let weight_seed: u64 = rng.random();
    let loss_of = |store: &ParamStore, g: &mut Graph| -> Result<Var> {
        let vars = (0..shapes.len())
            .map(|i| g.param(store, &format!("p{i}")))
            .collect::<Result<Vec<_>>>()?;
        let out = op(g, &vars)?;
        let shape = g.shape(out).to_vec();
        let mut wr = ChaCha8Rng::seed_from_u64(weight_seed);
        let w = g.constant(Tensor::randn(&shape, 1.0, &mut wr));
        let weighted = g.mul(out, w)?;
        Ok(g.sum(weighted))
    };

    let mut g = Graph::new();
    let loss = loss_of(&store, &mut g).unwrap();
    g.backward(loss).unwrap().write_to(&mut store).unwrap();
    let report = finite_diff_check(&store, STEP, |s| {
        let mut g = Graph::new();
        let l = loss_of(s, &mut g)?;
        Ok(g.value(l).item())
    })
    .unwrap();
    assert!(
        report.max_rel_error < TOLERANCE,
        "{name}: max relative error {:.3e} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn matmul() {
    check("matmul", &[&[2, 3, 4], &[4, 5]], |g, v| g.matmul(v[0], v[1]));
}

#[test]
fn bmm_plain_and_transposed() {
    check("bmm", &[&[2, 3, 4], &[2, 4, 5]], |g, v| g.bmm(v[0], v[1], false));
    check("bmm_t", &[&[2, 2, 3, 4], &[2, 2, 5, 4]], |g, v| g.bmm(v[0], v[1], true));
}

#[test]
fn broadcasting_arithmetic() {
    check("add", &[&[3, 4], &[4]], |g, v| g.add(v[0], v[1]));
    check("sub", &[&[4], &[2, 3, 4]], |g, v| g.sub(v[0], v[1]));
    check("mul", &[&[2, 3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1]));
    check("scale", &[&[5]], |g, v| Ok(g.scale(v[0], -2.5)));
}

#[test]
fn pointwise() {
    check("sigmoid", &[&[3, 4]], |g, v| Ok(g.sigmoid(v[0])));
    check("gelu", &[&[3, 4]], |g, v| Ok(g.gelu(v[0])));
    check("square", &[&[3, 4]], |g, v| Ok(g.square(v[0])));
}

#[test]
fn softmax_and_layer_norm() {
    check("softmax", &[&[2, 3, 5]], |g, v| Ok(g.softmax(v[0])));
    check("layer_norm", &[&[2, 3, 6], &[6], &[6]], |g, v| g.layer_norm(v[0], v[1], v[2]));
}

#[test]
fn shape_ops() {
    check("reshape", &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4]));
    check("permute", &[&[2, 3, 4, 5]], |g, v| g.permute(v[0], &[0, 2, 1, 3]));
    check("broadcast", &[&[3, 4]], |g, v| g.broadcast_leading(v[0], 3));
    check("concat", &[&[2, 3], &[1, 3], &[4, 3]], |g, v| g.concat0(v));
    check("narrow", &[&[2, 5, 3]], |g, v| g.narrow(v[0], 1, 1, 3));
    check("gather", &[&[5, 3]], |g, v| g.gather_rows(v[0], &[4, 0, 4, 2]));
}

#[test]
fn reductions() {
    check("sum", &[&[3, 4]], |g, v| Ok(g.sum(v[0])));
    check("mean", &[&[3, 4]], |g, v| Ok(g.mean(v[0])));
    check("mean_axis", &[&[2, 3, 4]], |g, v| g.mean_axis(v[0], 1));
    check("sum_axis", &[&[2, 3, 4]], |g, v| g.sum_axis(v[0], 2));
}

#[test]
fn asymmetric_loss() {
    let targets = vec![
        Target::Positive,
        Target::Negative,
        Target::Ignore,
        Target::Negative,
        Target::Positive,
        Target::Negative,
    ];
    check_scaled("asl", &[&[2, 3]], 0.5, move |g, v| {
        let p = g.sigmoid(v[0]);
        g.asl(p, targets.clone(), 0.0, 4.0)
    });
}

#[test]
fn contrastive() {
    check("contrastive", &[&[6, 4]], |g, v| g.contrastive(v[0], vec![0, 1, 0, 2, 1, 0]));
}
