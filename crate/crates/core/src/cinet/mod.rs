//! The class-independent incremental network.
//!
//! A linear adapter lifts raw patch features to the model width `D`. One or
//! more cross-attention blocks turn the per-class query tokens into
//! class-level embeddings `E` (`[N, C, D]`), one row per class. Each class
//! owns an independent binary classifier reading only its own row, and a
//! linear projection head maps `E` into the space used by the contrastive
//! loss.
//!
//! The [`Architecture::Pooled`] variant replaces the token/attention path with
//! a mean-pooled image-level feature and a joint linear classifier. It exists
//! as the ablation baseline.

mod attention;
mod tokens;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

pub use attention::{cross_attention, BlockNames, BlockOutput};
pub use tokens::{head_names, token_name, ClassTokenStore, ClassifierBank};

pub const ADAPTER_W: &str = "adapter.w";
pub const ADAPTER_B: &str = "adapter.b";
pub const PROJ_W: &str = "proj.w";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Class tokens, cross-attention and per-class classifiers.
    Cinet,
    /// Mean-pooled image feature with a joint linear classifier.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Width of the raw patch features fed to the adapter.
    pub raw_dim: usize,
    /// Model width `D` (equal to the attention width `l`).
    pub dim: usize,
    pub heads: usize,
    /// MLP hidden width; `0` means `2 * dim`.
    pub mlp_hidden: usize,
    pub depth: usize,
    pub token_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            raw_dim: 32,
            dim: 16,
            heads: 4,
            mlp_hidden: 0,
            depth: 1,
            token_init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn hidden(&self) -> usize {
        if self.mlp_hidden == 0 {
            2 * self.dim
        } else {
            self.mlp_hidden
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.raw_dim == 0 || self.heads == 0 || self.depth == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if !(self.token_init_std > 0.0) {
            return Err(Error::Config("token_init_std must be positive".into()));
        }
        Ok(())
    }
}

/// `[N, C, D]` class-level embeddings (row `(i, c)` is `e_c` of sample `i`).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassLevelEmbeddings(pub Tensor);

impl ClassLevelEmbeddings {
    pub fn samples(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.0.shape()[1]
    }

    /// `e_c` of sample `i`.
    pub fn row(&self, i: usize, c: usize) -> &[f64] {
        let s = self.0.shape();
        let d = s[2];
        let off = (i * s[1] + c) * d;
        &self.0.data()[off..off + d]
    }
}

/// Graph handles produced by [`ClinModel::forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[N, C, D]` for CINet, `[N, D]` pooled feature for the baseline.
    pub embeddings: Var,
    /// `[N, C]` class probabilities.
    pub probs: Var,
    /// `[N, C, D]` projected embeddings (CINet only).
    pub projected: Option<Var>,
    /// `[N, h, C, L]` attention weights per block.
    pub attention: Vec<Var>,
}

fn gaussian(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, std, rng)
}

/// Appends `n_new` class tokens and classifier heads for `session`, freezing
/// everything introduced earlier.
///
/// New tokens are drawn from `N(0, token_init_std^2)` and new classifier
/// weights from `N(0, 1/D)` with zero bias, all from a generator seeded by
/// `seed`. With `freeze_old = false` (the pooled baseline) prior heads stay
/// trainable.
#[allow(clippy::too_many_arguments)]
pub fn expand_classes(
    params: &mut ParamStore,
    store: &mut ClassTokenStore,
    bank: &mut ClassifierBank,
    config: &ModelConfig,
    with_tokens: bool,
    freeze_old: bool,
    n_new: usize,
    session: usize,
    seed: u64,
) -> Result<()> {
    if n_new == 0 {
        return Err(Error::Config("expand_classes needs at least one new class".into()));
    }
    let d = config.dim;
    if freeze_old {
        for c in 0..bank.len() {
            if with_tokens {
                params.set_trainable(&token_name(c), false)?;
                store.frozen[c] = true;
            }
            let (w, b) = head_names(c);
            params.set_trainable(&w, false)?;
            params.set_trainable(&b, false)?;
            bank.frozen[c] = true;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = bank.len();
    for c in start..start + n_new {
        if with_tokens {
            params.insert(token_name(c), gaussian(&[1, d], config.token_init_std, &mut rng), true);
            store.origin_session.push(session);
            store.frozen.push(false);
        }
    }
    for c in start..start + n_new {
        let (w, b) = head_names(c);
        params.insert(w, gaussian(&[1, d], 1.0 / (d as f64).sqrt(), &mut rng), true);
        params.insert(b, Tensor::zeros(&[1]), true);
        bank.frozen.push(false);
    }
    Ok(())
}

fn stack(g: &mut Graph, params: &ParamStore, names: impl Iterator<Item = String>) -> Result<Var> {
    let vars = names.map(|n| g.param(params, &n)).collect::<Result<Vec<_>>>()?;
    g.concat0(&vars)
}

/// `p(i, c) = sigmoid(w_c . e(i, c) + b_c)` for embeddings `[N, C, D]`.
pub fn classify(g: &mut Graph, params: &ParamStore, embeddings: Var) -> Result<Var> {
    let classes = g.shape(embeddings)[1];
    let w = stack(g, params, (0..classes).map(|c| head_names(c).0))?;
    let b = stack(g, params, (0..classes).map(|c| head_names(c).1))?;
    let prod = g.mul(embeddings, w)?;
    let logits = g.sum_axis(prod, 2)?;
    let logits = g.add(logits, b)?;
    Ok(g.sigmoid(logits))
}

/// Row-wise projection `z = e @ W_proj`.
pub fn project(g: &mut Graph, params: &ParamStore, embeddings: Var) -> Result<Var> {
    let w = g.param(params, PROJ_W)?;
    g.matmul(embeddings, w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClinModel {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub params: ParamStore,
    pub tokens: ClassTokenStore,
    pub bank: ClassifierBank,
}

impl ClinModel {
    /// Fresh model with no classes. Shared weights are seeded by `seed`.
    pub fn new(config: ModelConfig, arch: Architecture, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, d, h) = (config.raw_dim, config.dim, config.hidden());
        let mut params = ParamStore::new();
        params.insert(ADAPTER_W, gaussian(&[r, d], 1.0 / (r as f64).sqrt(), &mut rng), true);
        params.insert(ADAPTER_B, Tensor::zeros(&[d]), true);
        if arch == Architecture::Cinet {
            let std_d = 1.0 / (d as f64).sqrt();
            for block in 0..config.depth {
                let n = BlockNames::new(block);
                for (gamma, beta) in [&n.norm_q, &n.norm_kv, &n.norm_mlp] {
                    params.insert(gamma.clone(), Tensor::full(&[d], 1.0), true);
                    params.insert(beta.clone(), Tensor::zeros(&[d]), true);
                }
                for w in [&n.wq, &n.wk, &n.wv, &n.wo] {
                    params.insert(w.clone(), gaussian(&[d, d], std_d, &mut rng), true);
                }
                params.insert(n.bo.clone(), Tensor::zeros(&[d]), true);
                params.insert(n.w1.clone(), gaussian(&[d, h], std_d, &mut rng), true);
                params.insert(n.b1.clone(), Tensor::zeros(&[h]), true);
                params.insert(n.w2.clone(), gaussian(&[h, d], 1.0 / (h as f64).sqrt(), &mut rng), true);
                params.insert(n.b2.clone(), Tensor::zeros(&[d]), true);
            }
            params.insert(PROJ_W, gaussian(&[d, d], std_d, &mut rng), true);
        }
        Ok(ClinModel {
            config,
            arch,
            params,
            tokens: ClassTokenStore::default(),
            bank: ClassifierBank::default(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.bank.len()
    }

    pub fn expand_classes(&mut self, n_new: usize, session: usize, seed: u64) -> Result<()> {
        let cinet = self.arch == Architecture::Cinet;
        expand_classes(
            &mut self.params,
            &mut self.tokens,
            &mut self.bank,
            &self.config,
            cinet,
            cinet,
            n_new,
            session,
            seed,
        )
    }

    fn adapt(&self, g: &mut Graph, features: &Tensor) -> Result<Var> {
        let fs = features.shape();
        if fs.len() != 3 || fs[2] != self.config.raw_dim {
            return Err(Error::shape(
                "adapter",
                format!("features {fs:?} do not match raw_dim {}", self.config.raw_dim),
            ));
        }
        let x = g.constant(features.clone());
        let w = g.param(&self.params, ADAPTER_W)?;
        let b = g.param(&self.params, ADAPTER_B)?;
        let h = g.matmul(x, w)?;
        g.add(h, b)
    }

    /// Builds the forward pass for `features` (`[N, L, raw_dim]`).
    pub fn forward(&self, g: &mut Graph, features: &Tensor) -> Result<ForwardOutput> {
        if self.num_classes() == 0 {
            return Err(Error::Config("model has no classes yet".into()));
        }
        let patches = self.adapt(g, features)?;
        let n = features.shape()[0];
        match self.arch {
            Architecture::Cinet => {
                let tokens = stack(g, &self.params, (0..self.num_classes()).map(token_name))?;
                let mut queries = g.broadcast_leading(tokens, n)?;
                let mut attention = Vec::with_capacity(self.config.depth);
                for block in 0..self.config.depth {
                    let out = cross_attention(
                        g,
                        &self.params,
                        &BlockNames::new(block),
                        self.config.heads,
                        queries,
                        patches,
                    )?;
                    queries = out.embeddings;
                    attention.push(out.attention);
                }
                let probs = classify(g, &self.params, queries)?;
                let projected = project(g, &self.params, queries)?;
                Ok(ForwardOutput {
                    embeddings: queries,
                    probs,
                    projected: Some(projected),
                    attention,
                })
            }
            Architecture::Pooled => {
                let pooled = g.mean_axis(patches, 1)?;
                let classes = self.num_classes();
                let w = stack(g, &self.params, (0..classes).map(|c| head_names(c).0))?;
                let b = stack(g, &self.params, (0..classes).map(|c| head_names(c).1))?;
                let wt = g.permute(w, &[1, 0])?;
                let logits = g.matmul(pooled, wt)?;
                let logits = g.add(logits, b)?;
                let probs = g.sigmoid(logits);
                Ok(ForwardOutput {
                    embeddings: pooled,
                    probs,
                    projected: None,
                    attention: Vec::new(),
                })
            }
        }
    }

    /// The embedding slice distilled against the previous-session model:
    /// the first `old_classes` rows of `E` for CINet, the pooled feature for
    /// the baseline.
    pub fn distill_view(&self, g: &mut Graph, out: &ForwardOutput, old_classes: usize) -> Result<Var> {
        match self.arch {
            Architecture::Cinet => g.narrow(out.embeddings, 1, 0, old_classes),
            Architecture::Pooled => Ok(out.embeddings),
        }
    }

    /// Class-level embeddings for a batch, outside of training.
    pub fn embed(&self, features: &Tensor) -> Result<ClassLevelEmbeddings> {
        if self.arch != Architecture::Cinet {
            return Err(Error::Config("class-level embeddings need the CINet architecture".into()));
        }
        let mut g = Graph::new();
        let out = self.forward(&mut g, features)?;
        Ok(ClassLevelEmbeddings(g.value(out.embeddings).clone()))
    }

    /// `[N, C]` probabilities.
    pub fn predict(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, features)?;
        Ok(g.value(out.probs).clone())
    }

    /// Value of [`Self::distill_view`] for a batch.
    pub fn distill_features(&self, features: &Tensor, old_classes: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, features)?;
        let v = self.distill_view(&mut g, &out, old_classes)?;
        Ok(g.value(v).clone())
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        let mut model = self.clone();
        model.params.freeze_all();
        model.params.zero_grads();
        ModelSnapshot { model }
    }
}

/// Frozen copy of the model taken at the start of a session.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    model: ClinModel,
}

impl ModelSnapshot {
    pub fn model(&self) -> &ClinModel {
        &self.model
    }

    pub fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    pub fn predict(&self, features: &Tensor) -> Result<Tensor> {
        self.model.predict(features)
    }

    pub fn distill_features(&self, features: &Tensor) -> Result<Tensor> {
        self.model.distill_features(features, self.model.num_classes())
    }
}
