//! Cross-attention against a loop-by-loop reference.

use clin::cinet::{cross_attention, BlockNames};
use clin::numerics::{Graph, ParamStore, Tensor, LN_EPS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Dims {
    n: usize,
    c: usize,
    l: usize,
    d: usize,
    h: usize,
    hidden: usize,
}

fn random_block(dims: &Dims, rng: &mut ChaCha8Rng) -> ParamStore {
    let names = BlockNames::new(0);
    let mut s = ParamStore::new();
    let (d, hid) = (dims.d, dims.hidden);
    for (gamma, beta) in [&names.norm_q, &names.norm_kv, &names.norm_mlp] {
        let g = Tensor::randn(&[d], 0.3, rng);
        let g = Tensor::new(&[d], g.data().iter().map(|v| 1.0 + v).collect()).unwrap();
        s.insert(gamma.clone(), g, true);
        s.insert(beta.clone(), Tensor::randn(&[d], 0.3, rng), true);
    }
    for w in [&names.wq, &names.wk, &names.wv, &names.wo] {
        s.insert(w.clone(), Tensor::randn(&[d, d], 0.4, rng), true);
    }
    s.insert(names.bo.clone(), Tensor::randn(&[d], 0.2, rng), true);
    s.insert(names.w1.clone(), Tensor::randn(&[d, hid], 0.4, rng), true);
    s.insert(names.b1.clone(), Tensor::randn(&[hid], 0.2, rng), true);
    s.insert(names.w2.clone(), Tensor::randn(&[hid, d], 0.4, rng), true);
    s.insert(names.b2.clone(), Tensor::randn(&[d], 0.2, rng), true);
    s
}

fn get<'a>(s: &'a ParamStore, name: &str) -> &'a [f64] {
    s.get(name).unwrap().data()
}

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) / (var + LN_EPS).sqrt() * gamma[j] + beta[j])
        .collect()
}

/// `x @ w` for a row vector `x` and a row-major `[k, m]` matrix `w`.
fn vecmat(x: &[f64], w: &[f64], m: usize) -> Vec<f64> {
    (0..m).map(|j| x.iter().enumerate().map(|(i, v)| v * w[i * m + j]).sum()).collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// Returns `(embeddings [N, C, D], attention [N, h, C, L])`.
fn reference(dims: &Dims, s: &ParamStore, queries: &[f64], patches: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let nm = BlockNames::new(0);
    let Dims { n, c, l, d, h, hidden } = *dims;
    let dh = d / h;
    let mut emb = vec![0.0; n * c * d];
    let mut att = vec![0.0; n * h * c * l];
    for i in 0..n {
        let kv: Vec<Vec<f64>> = (0..l)
            .map(|p| {
                let x = &patches[(i * l + p) * d..(i * l + p + 1) * d];
                layer_norm(x, get(s, &nm.norm_kv.0), get(s, &nm.norm_kv.1))
            })
            .collect();
        let keys: Vec<Vec<f64>> = kv.iter().map(|x| vecmat(x, get(s, &nm.wk), d)).collect();
        let values: Vec<Vec<f64>> = kv.iter().map(|x| vecmat(x, get(s, &nm.wv), d)).collect();
        for k in 0..c {
            let qin = &queries[(i * c + k) * d..(i * c + k + 1) * d];
            let qn = layer_norm(qin, get(s, &nm.norm_q.0), get(s, &nm.norm_q.1));
            let q = vecmat(&qn, get(s, &nm.wq), d);
            let mut mixed = vec![0.0; d];
            for head in 0..h {
                let range = head * dh..(head + 1) * dh;
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|key| range.clone().map(|j| q[j] * key[j]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|v| (v - max).exp()).sum();
                for (p, sc) in scores.iter().enumerate() {
                    let w = (sc - max).exp() / z;
                    att[((i * h + head) * c + k) * l + p] = w;
                    for j in range.clone() {
                        mixed[j] += w * values[p][j];
                    }
                }
            }
            let proj = vecmat(&mixed, get(s, &nm.wo), d);
            let attended: Vec<f64> = (0..d).map(|j| qin[j] + proj[j] + get(s, &nm.bo)[j]).collect();
            let hn = layer_norm(&attended, get(s, &nm.norm_mlp.0), get(s, &nm.norm_mlp.1));
            let hid: Vec<f64> = vecmat(&hn, get(s, &nm.w1), hidden)
                .iter()
                .zip(get(s, &nm.b1))
                .map(|(a, b)| gelu(a + b))
                .collect();
            let out = vecmat(&hid, get(s, &nm.w2), d);
            for j in 0..d {
                emb[(i * c + k) * d + j] = attended[j] + out[j] + get(s, &nm.b2)[j];
            }
        }
    }
    (emb, att)
}

fn compare(dims: Dims, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = random_block(&dims, &mut rng);
    let queries = Tensor::randn(&[dims.n, dims.c, dims.d], 1.0, &mut rng);
    let patches = Tensor::randn(&[dims.n, dims.l, dims.d], 1.0, &mut rng);
    let mut g = Graph::new();
    let q = g.constant(queries.clone());
    let p = g.constant(patches.clone());
    let out = cross_attention(&mut g, &store, &BlockNames::new(0), dims.h, q, p).unwrap();
    let (emb, att) = reference(&dims, &store, queries.data(), patches.data());
    let ge = g.value(out.embeddings);
    let ga = g.value(out.attention);
    assert_eq!(ge.shape(), [dims.n, dims.c, dims.d]);
    assert_eq!(ga.shape(), [dims.n, dims.h, dims.c, dims.l]);
    let worst = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst(ge.data(), &emb) < 1e-10, "embeddings off by {:e}", worst(ge.data(), &emb));
    assert!(worst(ga.data(), &att) < 1e-10, "attention off by {:e}", worst(ga.data(), &att));
    for row in ga.data().chunks(dims.l) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn single_head_matches_reference() {
    compare(Dims { n: 2, c: 3, l: 4, d: 8, h: 1, hidden: 16 }, 1);
}

#[test]
fn multi_head_matches_reference() {
    compare(Dims { n: 3, c: 5, l: 6, d: 12, h: 3, hidden: 10 }, 2);
}

#[test]
fn single_class_single_patch() {
    compare(Dims { n: 1, c: 1, l: 1, d: 4, h: 2, hidden: 8 }, 3);
}
