//! Synthetic multi-label patch streams.
//!
//! Every class owns a random unit prototype in `R^raw_dim`. A sample with
//! label set `S` writes `prototype_k + noise` into a distinct random patch
//! slot for each `k in S` and pure noise into the remaining slots. Label
//! sets start from one primary class; with probability `co_occurrence` they
//! gain `U{1..=max_extra_labels}` additional distinct classes.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticStreamConfig {
    pub total_classes: usize,
    pub patches: usize,
    pub raw_dim: usize,
    pub prototype_seed: u64,
    pub co_occurrence: f64,
    pub max_extra_labels: usize,
    pub samples_per_class: usize,
    pub train_fraction: f64,
    pub noise_std: f64,
}

impl Default for SyntheticStreamConfig {
    fn default() -> Self {
        SyntheticStreamConfig {
            total_classes: 20,
            patches: 6,
            raw_dim: 32,
            prototype_seed: 7,
            co_occurrence: 0.5,
            max_extra_labels: 2,
            samples_per_class: 40,
            train_fraction: 0.75,
            noise_std: 0.15,
        }
    }
}

impl SyntheticStreamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.co_occurrence) {
            return Err(Error::Config(format!("co_occurrence {} outside [0, 1]", self.co_occurrence)));
        }
        if self.total_classes == 0 || self.raw_dim == 0 || self.samples_per_class == 0 || self.patches == 0 {
            return Err(Error::Config("stream sizes must be positive".into()));
        }
        if self.patches < 1 + self.max_extra_labels {
            return Err(Error::Config(format!(
                "{} patches cannot hold label sets of up to {} classes",
                self.patches,
                1 + self.max_extra_labels
            )));
        }
        if self.max_extra_labels >= self.total_classes {
            return Err(Error::Config("max_extra_labels must be below total_classes".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        Ok(())
    }

    /// `1 + co_occurrence * E[extra labels]`.
    pub fn expected_cardinality(&self) -> f64 {
        1.0 + self.co_occurrence * (1.0 + self.max_extra_labels as f64) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticStream {
    pub config: SyntheticStreamConfig,
    /// `[total_classes, raw_dim]` unit prototypes.
    pub prototypes: Tensor,
    pub train: Dataset,
    pub test: Dataset,
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

pub fn generate_synthetic_stream(config: &SyntheticStreamConfig, seed: u64) -> Result<SyntheticStream> {
    config.validate()?;
    let (k_total, l, d) = (config.total_classes, config.patches, config.raw_dim);

    let mut proto_rng = ChaCha8Rng::seed_from_u64(config.prototype_seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut prototypes = Vec::with_capacity(k_total * d);
    for _ in 0..k_total {
        let v: Vec<f64> = (0..d).map(|_| std_normal.sample(&mut proto_rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prototypes.extend(v.into_iter().map(|x| x / norm));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, config.noise_std.max(f64::MIN_POSITIVE)).expect("noise std");
    let total = k_total * config.samples_per_class;
    let mut labels = Vec::with_capacity(total);
    let mut data = Vec::with_capacity(total * l * d);
    for primary in 0..k_total {
        for _ in 0..config.samples_per_class {
            let mut set = vec![primary];
            if config.max_extra_labels > 0 && rng.random_bool(config.co_occurrence) {
                let extra = rng.random_range(1..=config.max_extra_labels);
                let others = index::sample(&mut rng, k_total - 1, extra);
                for o in others.iter() {
                    set.push(if o >= primary { o + 1 } else { o });
                }
            }
            let slots = index::sample(&mut rng, l, set.len()).into_vec();
            let mut sample = vec![0.0; l * d];
            for (slot, chunk) in sample.chunks_mut(d).enumerate() {
                let class = slots.iter().position(|&s| s == slot).map(|p| set[p]);
                for (j, v) in chunk.iter_mut().enumerate() {
                    let base = class.map_or(0.0, |c| prototypes[c * d + j]);
                    let eps = if config.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    *v = f32_round(base + eps);
                }
            }
            data.extend(sample);
            set.sort_unstable();
            labels.push(set);
        }
    }

    let order = index::sample(&mut rng, total, total).into_vec();
    let n_train = ((total as f64) * config.train_fraction).round() as usize;
    let n_train = n_train.clamp(1, total - 1);
    let mut train_idx = order[..n_train].to_vec();
    let mut test_idx = order[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    let all = Dataset {
        ids: (0..total as u64).collect(),
        features: Tensor::new(&[total, l, d], data)?,
        labels,
        total_classes: k_total,
    };
    Ok(SyntheticStream {
        config: config.clone(),
        prototypes: Tensor::new(&[k_total, d], prototypes)?,
        train: all.subset(&train_idx),
        test: all.subset(&test_idx),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticStreamConfig {
        SyntheticStreamConfig {
            total_classes: 6,
            patches: 4,
            raw_dim: 8,
            samples_per_class: 10,
            ..SyntheticStreamConfig::default()
        }
    }

    #[test]
    fn no_co_occurrence_is_single_label() {
        let cfg = SyntheticStreamConfig {
            co_occurrence: 0.0,
            ..small()
        };
        let s = generate_synthetic_stream(&cfg, 1).unwrap();
        assert!(s.train.labels.iter().chain(&s.test.labels).all(|l| l.len() == 1));
    }

    #[test]
    fn seeded_and_split() {
        let a = generate_synthetic_stream(&small(), 5).unwrap();
        let b = generate_synthetic_stream(&small(), 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len() + a.test.len(), 60);
        assert_eq!(a.train.len(), 45);
        let c = generate_synthetic_stream(&small(), 6).unwrap();
        assert_ne!(a.train.features, c.train.features);
    }

    #[test]
    fn too_few_patches_rejected() {
        let cfg = SyntheticStreamConfig {
            patches: 2,
            max_extra_labels: 2,
            ..small()
        };
        assert!(matches!(generate_synthetic_stream(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn values_survive_f32_storage() {
        let s = generate_synthetic_stream(&small(), 2).unwrap();
        assert!(s.train.features.data().iter().all(|&v| v == v as f32 as f64));
    }
}
