use crate::error::Result;
use crate::numerics::{Graph, ParamStore, Var};

/// Parameter names of one cross-attention block.
#[derive(Debug, Clone)]
pub struct BlockNames {
    pub norm_q: (String, String),
    pub norm_kv: (String, String),
    pub wq: String,
    pub wk: String,
    pub wv: String,
    pub wo: String,
    pub bo: String,
    pub norm_mlp: (String, String),
    pub w1: String,
    pub b1: String,
    pub w2: String,
    pub b2: String,
}

impl BlockNames {
    pub fn new(block: usize) -> Self {
        let p = |s: &str| format!("attn{block}.{s}");
        BlockNames {
            norm_q: (p("norm_q.gamma"), p("norm_q.beta")),
            norm_kv: (p("norm_kv.gamma"), p("norm_kv.beta")),
            wq: p("wq"),
            wk: p("wk"),
            wv: p("wv"),
            wo: p("wo"),
            bo: p("bo"),
            norm_mlp: (p("norm_mlp.gamma"), p("norm_mlp.beta")),
            w1: p("mlp.w1"),
            b1: p("mlp.b1"),
            w2: p("mlp.w2"),
            b2: p("mlp.b2"),
        }
    }
}

/// Output of one class-level cross-attention block.
#[derive(Debug, Clone, Copy)]
pub struct BlockOutput {
    /// `[N, C, D]` class-level embeddings.
    pub embeddings: Var,
    /// `[N, h, C, L]` attention weights.
    pub attention: Var,
}

fn norm(g: &mut Graph, store: &ParamStore, x: Var, names: &(String, String)) -> Result<Var> {
    let gamma = g.param(store, &names.0)?;
    let beta = g.param(store, &names.1)?;
    g.layer_norm(x, gamma, beta)
}

fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (n, rows, d) = (s[0], s[1], s[2]);
    let r = g.reshape(x, &[n, rows, heads, d / heads])?;
    g.permute(r, &[0, 2, 1, 3])
}

/// Class-level cross-attention.
///
/// `queries` is `[N, C, D]` (the class tokens broadcast over the batch, or
/// the previous block's embeddings) and `patches` is `[N, L, D]`. Queries and
/// keys/values get independent pre-layer-norms; scores are scaled by
/// `1/sqrt(D/h)` and softmaxed over the `L` patch positions; heads are
/// concatenated and projected with `W_o`, `b_o`. A residual MLP with one
/// hidden layer follows.
pub fn cross_attention(
    g: &mut Graph,
    store: &ParamStore,
    names: &BlockNames,
    heads: usize,
    queries: Var,
    patches: Var,
) -> Result<BlockOutput> {
    let qs = g.shape(queries).to_vec();
    let (n, c, d) = (qs[0], qs[1], qs[2]);

    let qn = norm(g, store, queries, &names.norm_q)?;
    let kvn = norm(g, store, patches, &names.norm_kv)?;

    let wq = g.param(store, &names.wq)?;
    let wk = g.param(store, &names.wk)?;
    let wv = g.param(store, &names.wv)?;
    let q = g.matmul(qn, wq)?;
    let k = g.matmul(kvn, wk)?;
    let v = g.matmul(kvn, wv)?;
    let q = split_heads(g, q, heads)?;
    let k = split_heads(g, k, heads)?;
    let v = split_heads(g, v, heads)?;

    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, 1.0 / ((d / heads) as f64).sqrt());
    let attention = g.softmax(scores);
    let mixed = g.bmm(attention, v, false)?;
    let mixed = g.permute(mixed, &[0, 2, 1, 3])?;
    let mixed = g.reshape(mixed, &[n, c, d])?;

    let wo = g.param(store, &names.wo)?;
    let bo = g.param(store, &names.bo)?;
    let z = g.matmul(mixed, wo)?;
    let z = g.add(z, bo)?;
    let attended = g.add(queries, z)?;

    let hn = norm(g, store, attended, &names.norm_mlp)?;
    let w1 = g.param(store, &names.w1)?;
    let b1 = g.param(store, &names.b1)?;
    let w2 = g.param(store, &names.w2)?;
    let b2 = g.param(store, &names.b2)?;
    let h = g.matmul(hn, w1)?;
    let h = g.add(h, b1)?;
    let h = g.gelu(h);
    let h = g.matmul(h, w2)?;
    let h = g.add(h, b2)?;
    let embeddings = g.add(attended, h)?;

    Ok(BlockOutput { embeddings, attention })
}
