//! Classification, contrastive and distillation losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Target, Tensor, Var};

pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_BETA: f64 = 80.0;
pub const DEFAULT_GAMMA_POS: f64 = 0.0;
pub const DEFAULT_GAMMA_NEG: f64 = 4.0;

/// Asymmetric focal loss over `[N, C]` probabilities; mean over the
/// non-ignored entries.
pub fn asl_loss(g: &mut Graph, probs: Var, targets: &[Target], gamma_pos: f64, gamma_neg: f64) -> Result<Var> {
    g.asl(probs, targets.to_vec(), gamma_pos, gamma_neg)
}

/// Value-only form of [`asl_loss`].
pub fn asl_loss_value(probs: &Tensor, targets: &[Target], gamma_pos: f64, gamma_neg: f64) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(probs.clone());
    let l = asl_loss(&mut g, p, targets, gamma_pos, gamma_neg)?;
    Ok(g.value(l).item())
}

/// One positive `(sample, class)` pair of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub sample: usize,
    pub class: usize,
}

/// Class-level embeddings with positive supervision, in sample-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSet {
    pub instances: Vec<Instance>,
    pub classes: usize,
    /// Row-major `|A| x D` vectors, empty when built without embeddings.
    pub vectors: Vec<f64>,
    pub dim: usize,
}

impl InstanceSet {
    /// Selects the positive entries of an `N x C` supervision grid.
    pub fn from_targets(targets: &[Target], samples: usize, classes: usize) -> Result<Self> {
        if targets.len() != samples * classes {
            return Err(Error::shape(
                "instance_set",
                format!("{} targets for {samples}x{classes}", targets.len()),
            ));
        }
        let instances = targets
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == Target::Positive)
            .map(|(k, _)| Instance {
                sample: k / classes,
                class: k % classes,
            })
            .collect();
        Ok(InstanceSet {
            instances,
            classes,
            vectors: Vec::new(),
            dim: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.class).collect()
    }

    /// Flat row indices into an `[N * C, D]` view of the embeddings.
    pub fn rows(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.sample * self.classes + i.class).collect()
    }

    pub fn vector(&self, k: usize) -> &[f64] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }
}

/// Builds the instance set from projected embeddings `[N, C, D]` and a
/// supervision grid.
pub fn build_instance_set(projected: &Tensor, targets: &[Target]) -> Result<InstanceSet> {
    let s = projected.shape();
    if s.len() != 3 {
        return Err(Error::shape("instance_set", format!("expected [N, C, D], got {s:?}")));
    }
    let (n, c, d) = (s[0], s[1], s[2]);
    let mut set = InstanceSet::from_targets(targets, n, c)?;
    set.dim = d;
    set.vectors = set
        .rows()
        .iter()
        .flat_map(|&r| projected.data()[r * d..(r + 1) * d].iter().copied())
        .collect();
    Ok(set)
}

/// Multi-label contrastive loss on the instances of `set` gathered from the
/// projected embeddings `[N, C, D]`. Sets with fewer than two instances
/// contribute a constant zero.
pub fn mc_loss(g: &mut Graph, projected: Var, set: &InstanceSet) -> Result<Var> {
    if set.len() < 2 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let s = g.shape(projected).to_vec();
    let flat = g.reshape(projected, &[s[0] * s[1], s[2]])?;
    let rows = g.gather_rows(flat, &set.rows())?;
    g.contrastive(rows, set.labels())
}

/// Value-only contrastive loss over the vectors stored in `set`.
pub fn mc_loss_value(set: &InstanceSet) -> Result<f64> {
    if set.len() < 2 {
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(&[set.len(), set.dim], set.vectors.clone())?);
    let l = g.contrastive(a, set.labels())?;
    Ok(g.value(l).item())
}

/// Mean squared difference between the current old-class embeddings and the
/// previous model's.
pub fn kd_loss(g: &mut Graph, current: Var, previous: &Tensor) -> Result<Var> {
    if g.shape(current) != previous.shape() {
        return Err(Error::shape(
            "kd_loss",
            format!("current {:?} vs previous {:?}", g.shape(current), previous.shape()),
        ));
    }
    let prev = g.constant(previous.clone());
    let diff = g.sub(current, prev)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

pub fn kd_loss_value(current: &Tensor, previous: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let c = g.constant(current.clone());
    let l = kd_loss(&mut g, c, previous)?;
    Ok(g.value(l).item())
}

/// Mean cosine similarity over same-label and different-label pairs of
/// distinct rows of a `[K, D]` grid.
pub fn mean_pair_cosines(vectors: &[f64], dim: usize, labels: &[usize]) -> (f64, f64) {
    let unit: Vec<Vec<f64>> = vectors
        .chunks(dim)
        .map(|v| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| if n > 0.0 { x / n } else { 0.0 }).collect()
        })
        .collect();
    let (mut same, mut ns, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..unit.len() {
        for j in (i + 1)..unit.len() {
            let cos: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
            if labels[i] == labels[j] {
                same += cos;
                ns += 1;
            } else {
                cross += cos;
                nc += 1;
            }
        }
    }
    (same / ns.max(1) as f64, cross / nc.max(1) as f64)
}

/// Plain gradient descent on the contrastive loss of free vectors.
///
/// Starts from `initial` (`[K, D]`) and returns the final vectors.
pub fn contrastive_descent(initial: &Tensor, labels: &[usize], steps: usize, lr: f64) -> Result<Tensor> {
    let mut current = initial.clone();
    for _ in 0..steps {
        let mut g = Graph::new();
        let a = g.input(current.clone());
        let loss = g.contrastive(a, labels.to_vec())?;
        let grads = g.backward(loss)?;
        let grad = grads.get(a).ok_or_else(|| Error::MissingGradient("contrastive input".into()))?;
        for (v, d) in current.data_mut().iter_mut().zip(grad) {
            *v -= lr * d;
        }
    }
    Ok(current)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub mc: f64,
    pub kd: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.ce.is_finite() && self.mc.is_finite() && self.kd.is_finite() && self.total.is_finite()
    }
}

/// `ce + alpha * mc + beta * kd`.
pub fn total_loss(ce: f64, mc: f64, kd: f64, alpha: f64, beta: f64) -> LossBreakdown {
    LossBreakdown {
        ce,
        mc,
        kd,
        total: ce + alpha * mc + beta * kd,
        alpha,
        beta,
    }
}

/// Graph form of [`total_loss`]; returns the scalar to differentiate.
pub fn combine(g: &mut Graph, ce: Var, mc: Var, kd: Var, alpha: f64, beta: f64) -> Result<Var> {
    let mc = g.scale(mc, alpha);
    let kd = g.scale(kd, beta);
    let partial = g.add(ce, mc)?;
    g.add(partial, kd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn asl_reference(p: &[f64], t: &[Target], gp: f64, gn: f64) -> f64 {
        let mut total = 0.0;
        let mut n = 0;
        for (&pv, &tv) in p.iter().zip(t) {
            let q = pv.clamp(1e-8, 1.0 - 1e-8);
            match tv {
                Target::Positive => total += -(1.0 - q).powf(gp) * q.ln(),
                Target::Negative => total += -q.powf(gn) * (1.0 - q).ln(),
                Target::Ignore => continue,
            }
            n += 1;
        }
        total / n as f64
    }

    #[test]
    fn asl_without_focusing_is_bce() {
        let p = Tensor::new(&[1, 2], vec![0.7, 0.2]).unwrap();
        let t = [Target::Positive, Target::Negative];
        let v = asl_loss_value(&p, &t, 0.0, 0.0).unwrap();
        let bce = -(0.7f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((v - bce).abs() < 1e-15);
    }

    #[test]
    fn asl_confident_positive_is_near_zero() {
        let p = Tensor::new(&[1], vec![1.0 - 1e-12]).unwrap();
        let v = asl_loss_value(&p, &[Target::Positive], 0.0, 4.0).unwrap();
        assert!(v < 1.1e-8);
    }

    #[test]
    fn asl_matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p: Vec<f64> = (0..12).map(|_| rng.random_range(0.01..0.99)).collect();
        let t: Vec<Target> = (0..12)
            .map(|i| [Target::Positive, Target::Negative, Target::Ignore][i % 3])
            .collect();
        let v = asl_loss_value(&Tensor::new(&[3, 4], p.clone()).unwrap(), &t, 1.0, 4.0).unwrap();
        assert!((v - asl_reference(&p, &t, 1.0, 4.0)).abs() < 1e-12);
    }

    #[test]
    fn asl_ignores_masked_entries_entirely() {
        let p = Tensor::new(&[2], vec![0.3, 2.0]).unwrap();
        // the out-of-range entry is ignored, so no error
        let v = asl_loss_value(&p, &[Target::Positive, Target::Ignore], 0.0, 4.0).unwrap();
        assert!((v + 0.3f64.ln()).abs() < 1e-15);
        assert!(asl_loss_value(&p, &[Target::Positive, Target::Negative], 0.0, 4.0).is_err());
    }

    #[test]
    fn instance_set_counts() {
        let z = Tensor::zeros(&[2, 4, 3]);
        let none = build_instance_set(&z, &[Target::Negative; 8]).unwrap();
        assert!(none.is_empty());
        let mut t = vec![Target::Negative; 8];
        t[1] = Target::Positive;
        t[4 + 1] = Target::Positive;
        t[4 + 3] = Target::Positive;
        let set = build_instance_set(&z, &t).unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.labels(), vec![1, 1, 3]);
        assert_eq!(set.instances[2], Instance { sample: 1, class: 3 });
    }

    fn set_from(vectors: &[&[f64]], labels: &[usize]) -> InstanceSet {
        InstanceSet {
            instances: labels.iter().map(|&c| Instance { sample: 0, class: c }).collect(),
            classes: labels.iter().max().unwrap() + 1,
            vectors: vectors.iter().flat_map(|v| v.iter().copied()).collect(),
            dim: vectors[0].len(),
        }
    }

    #[test]
    fn mc_identical_same_class_is_zero() {
        let set = set_from(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]], &[0, 0, 0]);
        assert!(mc_loss_value(&set).unwrap().abs() < 1e-15);
    }

    #[test]
    fn mc_orthogonal_different_classes() {
        let set = set_from(&[&[1.0, 0.0], &[0.0, 3.0]], &[0, 1]);
        assert_eq!(mc_loss_value(&set).unwrap(), -1.0);
    }

    #[test]
    fn mc_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = 7;
        let vecs: Vec<Vec<f64>> = (0..k).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let labels: Vec<usize> = (0..k).map(|i| i % 3).collect();
        let refs: Vec<&[f64]> = vecs.iter().map(Vec::as_slice).collect();
        let set = set_from(&refs, &labels);
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let mut expected = 0.0;
        for i in 0..k {
            for j in 0..k {
                let b = if labels[i] == labels[j] { 1.0 } else { -1.0 };
                expected += (1.0 - cos(&vecs[i], &vecs[j])) * b;
            }
        }
        expected /= k as f64;
        assert!((mc_loss_value(&set).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn mc_zero_norm_has_zero_cosine() {
        let set = set_from(&[&[0.0, 0.0], &[1.0, 0.0]], &[0, 0]);
        // self pairs: (1-0) + (1-1); cross pairs: 2 * (1-0)
        assert_eq!(mc_loss_value(&set).unwrap(), 3.0 / 2.0);
    }

    #[test]
    fn kd_cases() {
        let a = Tensor::new(&[2, 3, 2], (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(kd_loss_value(&a, &a).unwrap(), 0.0);
        let b = Tensor::new(&[2, 3, 2], a.data().iter().map(|v| v + 1.0).collect()).unwrap();
        assert_eq!(kd_loss_value(&b, &a).unwrap(), 1.0);
        assert!(kd_loss_value(&a, &Tensor::zeros(&[2, 2, 2])).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let b = total_loss(1.0, 2.0, 0.5, DEFAULT_ALPHA, DEFAULT_BETA);
        assert!((b.total - 41.1).abs() < 1e-12);
        assert_eq!(total_loss(0.7, 3.0, 9.0, 0.0, 0.0).total, 0.7);
    }

    #[test]
    fn descent_separates_two_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let init = Tensor::randn(&[8, 4], 1.0, &mut rng);
        let labels = [0, 0, 0, 0, 1, 1, 1, 1];
        let out = contrastive_descent(&init, &labels, 200, 0.1).unwrap();
        let (same, cross) = mean_pair_cosines(out.data(), 4, &labels);
        assert!(same > 0.9, "same-class cosine {same}");
        assert!(cross < 0.0, "cross-class cosine {cross}");
    }
}
