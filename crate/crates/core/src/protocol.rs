//! Session splits, label masking, pseudo-labels and exemplar replay.
//!
//! Model class indices follow the flattened session order of a
//! [`SessionSpec`]: the classes of session 1 come first, then session 2, and
//! so on. With the default ascending split that is the identity on class ids.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::numerics::Target;

pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_POSITIVE_THRESHOLD: f64 = 0.8;
pub const DEFAULT_NEGATIVE_THRESHOLD: f64 = 0.2;

/// `B<base>-C<increment>` protocol name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolName {
    pub base: usize,
    pub increment: usize,
}

impl FromStr for ProtocolName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("protocol {s:?} is not of the form B<k>-C<n>"));
        let (b, c) = s.split_once('-').ok_or_else(bad)?;
        let base = b.strip_prefix('B').and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let increment = c.strip_prefix('C').and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        Ok(ProtocolName { base, increment })
    }
}

impl std::fmt::Display for ProtocolName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "B{}-C{}", self.base, self.increment)
    }
}

/// Ordered, pairwise-disjoint class sets `C^1..C^T`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub sessions: Vec<Vec<usize>>,
    pub total_classes: usize,
}

/// Splits `total` classes in ascending id order: `base` classes first (or
/// `increment` when `base == 0`), then `increment` per session.
pub fn split_protocol(total: usize, base: usize, increment: usize) -> Result<SessionSpec> {
    if increment == 0 || total == 0 {
        return Err(Error::Protocol("class counts must be positive".into()));
    }
    if base > total {
        return Err(Error::Protocol(format!("base {base} exceeds {total} classes")));
    }
    if (total - base) % increment != 0 {
        return Err(Error::Protocol(format!(
            "{} remaining classes are not divisible into sessions of {increment}",
            total - base
        )));
    }
    let mut sessions = Vec::new();
    let mut next = 0;
    if base > 0 {
        sessions.push((0..base).collect());
        next = base;
    }
    while next < total {
        sessions.push((next..next + increment).collect());
        next += increment;
    }
    SessionSpec::new(sessions, total)
}

impl SessionSpec {
    pub fn new(sessions: Vec<Vec<usize>>, total_classes: usize) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (t, s) in sessions.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Protocol(format!("session {} is empty", t + 1)));
            }
            for &c in s {
                if c >= total_classes {
                    return Err(Error::Protocol(format!("class {c} outside [0, {total_classes})")));
                }
                if !seen.insert(c) {
                    return Err(Error::Protocol(format!("class {c} appears in two sessions")));
                }
            }
        }
        if seen.len() != total_classes {
            return Err(Error::Protocol(format!(
                "sessions cover {} of {total_classes} classes",
                seen.len()
            )));
        }
        Ok(SessionSpec {
            sessions,
            total_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    /// Classes of session `t` (1-based).
    pub fn classes(&self, t: usize) -> &[usize] {
        &self.sessions[t - 1]
    }

    /// Number of classes seen after session `t`.
    pub fn seen_count(&self, t: usize) -> usize {
        self.sessions[..t].iter().map(Vec::len).sum()
    }

    /// Model index range of session `t`.
    pub fn index_range(&self, t: usize) -> std::ops::Range<usize> {
        self.seen_count(t - 1)..self.seen_count(t)
    }

    /// Class id to model index.
    pub fn index_map(&self) -> HashMap<usize, usize> {
        self.sessions
            .iter()
            .flatten()
            .enumerate()
            .map(|(i, &c)| (c, i))
            .collect()
    }

    /// Session of a class id (1-based).
    pub fn session_of(&self, class: usize) -> Option<usize> {
        self.sessions.iter().position(|s| s.contains(&class)).map(|t| t + 1)
    }

    /// One line per session, class ids separated by spaces.
    pub fn to_manifest(&self) -> String {
        let mut out = String::new();
        for s in &self.sessions {
            let ids: Vec<String> = s.iter().map(ToString::to_string).collect();
            writeln!(out, "{}", ids.join(" ")).expect("write to String");
        }
        out
    }

    pub fn from_manifest(text: &str, total_classes: usize) -> Result<Self> {
        let mut sessions = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let ids = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|e| Error::Protocol(format!("manifest line {}: {t:?}: {e}", n + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            sessions.push(ids);
        }
        SessionSpec::new(sessions, total_classes)
    }
}

/// A training sample as seen in one session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiLabelSample {
    pub id: u64,
    /// Row in the backing [`Dataset`].
    pub row: usize,
    /// Full ground truth, as model indices.
    pub labels: Vec<usize>,
    /// Per model index: positive, negative, or ignored.
    pub supervision: Vec<Target>,
}

impl MultiLabelSample {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.supervision
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == Target::Positive)
            .map(|(c, _)| c)
    }

    /// Supervision padded with `Ignore` (or truncated) to `classes` entries.
    pub fn supervision_for(&self, classes: usize) -> Vec<Target> {
        let mut s = self.supervision.clone();
        s.resize(classes, Target::Ignore);
        s
    }
}

/// Restricts supervision to `current` (model indices): those classes become
/// positive or negative from the ground truth; every other index in
/// `0..seen` is ignored.
pub fn mask_labels(labels: &[usize], current: std::ops::Range<usize>, seen: usize) -> Vec<Target> {
    (0..seen)
        .map(|c| {
            if !current.contains(&c) {
                Target::Ignore
            } else if labels.contains(&c) {
                Target::Positive
            } else {
                Target::Negative
            }
        })
        .collect()
}

/// Training samples of session `t` with their masked supervision.
///
/// Under the default protocol a sample joins every session in which it has a
/// positive label. With `unique_sessions` each sample joins only the first
/// such session. Samples with an empty label set join the first session
/// when `keep_empty` is set and are dropped otherwise.
pub fn session_samples(
    data: &Dataset,
    spec: &SessionSpec,
    t: usize,
    unique_sessions: bool,
    keep_empty: bool,
) -> Vec<MultiLabelSample> {
    let map = spec.index_map();
    let current = spec.index_range(t);
    let seen = spec.seen_count(t);
    let mut out = Vec::new();
    for row in 0..data.len() {
        let mut labels: Vec<usize> = data.labels[row].iter().filter_map(|c| map.get(c).copied()).collect();
        labels.sort_unstable();
        let include = match labels.first() {
            None => keep_empty && t == 1,
            Some(&first) if unique_sessions => current.contains(&first),
            Some(_) => labels.iter().any(|c| current.contains(c)),
        };
        if !include {
            continue;
        }
        out.push(MultiLabelSample {
            id: data.ids[row],
            row,
            supervision: mask_labels(&labels, current.clone(), seen),
            labels,
        });
    }
    out
}

/// Rows of the cumulative test set `Z^1 u ... u Z^t`.
pub fn cumulative_test_rows(data: &Dataset, spec: &SessionSpec, t: usize) -> Vec<usize> {
    let seen: BTreeSet<usize> = spec.sessions[..t].iter().flatten().copied().collect();
    (0..data.len())
        .filter(|&r| data.labels[r].iter().any(|c| seen.contains(c)))
        .collect()
}

/// Turns ignored old-class entries into pseudo-labels from the previous
/// model's probabilities: `>= positive` becomes positive, `<= negative`
/// becomes negative, anything between stays ignored.
pub fn pseudo_label(supervision: &mut [Target], old_probs: &[f64], positive: f64, negative: f64) {
    for (s, &p) in supervision.iter_mut().zip(old_probs) {
        if *s != Target::Ignore {
            continue;
        }
        if p >= positive {
            *s = Target::Positive;
        } else if p <= negative {
            *s = Target::Negative;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exemplar {
    pub id: u64,
    pub row: usize,
    pub labels: Vec<usize>,
    pub supervision: Vec<Target>,
}

/// Per-class exemplar lists, each capped at `M_per`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExemplarBuffer {
    pub per_class: BTreeMap<usize, Vec<Exemplar>>,
}

impl ExemplarBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn total(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    /// Distinct exemplars, first occurrence by class order.
    pub fn distinct(&self) -> Vec<&Exemplar> {
        let mut seen = BTreeSet::new();
        self.per_class
            .values()
            .flatten()
            .filter(|e| seen.insert(e.row))
            .collect()
    }
}

/// Stores up to `m_per` uniformly chosen positives for each class in
/// `classes`. Classes already in the buffer are left untouched.
pub fn buffer_update(
    buffer: &mut ExemplarBuffer,
    samples: &[MultiLabelSample],
    classes: std::ops::Range<usize>,
    m_per: usize,
    seed: u64,
) {
    if m_per == 0 {
        return;
    }
    for c in classes {
        if buffer.per_class.contains_key(&c) {
            continue;
        }
        let candidates: Vec<&MultiLabelSample> = samples
            .iter()
            .filter(|s| s.supervision.get(c) == Some(&Target::Positive))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let take = m_per.min(candidates.len());
        let mut picks = index::sample(&mut rng, candidates.len(), take).into_vec();
        picks.sort_unstable();
        let stored = picks
            .into_iter()
            .map(|i| {
                let s = candidates[i];
                Exemplar {
                    id: s.id,
                    row: s.row,
                    labels: s.labels.clone(),
                    supervision: s.supervision.clone(),
                }
            })
            .collect();
        buffer.per_class.insert(c, stored);
    }
}

/// Current-session samples merged with the replayed exemplars.
///
/// An exemplar whose row is already among the current samples contributes
/// its stored old-class supervision to that sample instead of appearing
/// twice.
#[derive(Debug, Clone)]
pub struct SessionPool {
    pub items: Vec<MultiLabelSample>,
    pub replayed: usize,
}

impl SessionPool {
    pub fn new(current: Vec<MultiLabelSample>, buffer: &ExemplarBuffer, seen: usize) -> Self {
        let mut items = current;
        let by_row: HashMap<usize, usize> = items.iter().enumerate().map(|(i, s)| (s.row, i)).collect();
        let mut replayed = 0;
        for ex in buffer.distinct() {
            match by_row.get(&ex.row) {
                Some(&i) => {
                    let item = &mut items[i];
                    for (c, &t) in ex.supervision.iter().enumerate() {
                        if t != Target::Ignore && c < item.supervision.len() {
                            item.supervision[c] = t;
                        }
                    }
                }
                None => {
                    replayed += 1;
                    items.push(MultiLabelSample {
                        id: ex.id,
                        row: ex.row,
                        labels: ex.labels.clone(),
                        supervision: {
                            let mut s = ex.supervision.clone();
                            s.resize(seen, Target::Ignore);
                            s
                        },
                    })
                }
            }
        }
        SessionPool { items, replayed }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Shuffled batches of item indices for one epoch.
    pub fn epoch(&self, batch_size: usize, seed: u64) -> EpochStream {
        session_epoch_stream(self.items.len(), batch_size, seed)
    }
}

/// Iterator over the shuffled batches of one epoch.
#[derive(Debug, Clone)]
pub struct EpochStream {
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for EpochStream {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for EpochStream {}

pub fn session_epoch_stream(items: usize, batch_size: usize, seed: u64) -> EpochStream {
    let mut order: Vec<usize> = (0..items).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    EpochStream {
        order,
        batch_size: batch_size.max(1),
        pos: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn sizes(spec: &SessionSpec) -> Vec<usize> {
        spec.sessions.iter().map(Vec::len).collect()
    }

    #[test]
    fn standard_protocols() {
        assert_eq!(sizes(&split_protocol(80, 0, 10).unwrap()), vec![10; 8]);
        assert_eq!(sizes(&split_protocol(80, 40, 10).unwrap()), vec![40, 10, 10, 10, 10]);
        assert_eq!(sizes(&split_protocol(20, 10, 2).unwrap()), vec![10, 2, 2, 2, 2, 2]);
        assert_eq!(sizes(&split_protocol(20, 0, 4).unwrap()), vec![4; 5]);
        assert!(matches!(split_protocol(20, 0, 3), Err(Error::Protocol(_))));
    }

    #[test]
    fn protocol_names() {
        let p: ProtocolName = "B40-C10".parse().unwrap();
        assert_eq!((p.base, p.increment), (40, 10));
        assert_eq!(p.to_string(), "B40-C10");
        assert!("40-10".parse::<ProtocolName>().is_err());
    }

    #[test]
    fn manifest_roundtrip() {
        let spec = split_protocol(20, 0, 5).unwrap();
        let text = spec.to_manifest();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(SessionSpec::from_manifest(&text, 20).unwrap(), spec);
        assert!(SessionSpec::from_manifest("0 1\n1 2\n", 3).is_err());
    }

    #[test]
    fn masking_intersects_current_session() {
        let spec = split_protocol(80, 40, 10).unwrap();
        let t = 2;
        let s = mask_labels(&[2, 41], spec.index_range(t), spec.seen_count(t));
        assert_eq!(s[41], Target::Positive);
        assert_eq!(s[2], Target::Ignore);
        assert_eq!(s[45], Target::Negative);
        assert!(s[..40].iter().all(|&x| x == Target::Ignore));

        let none = mask_labels(&[3], spec.index_range(t), spec.seen_count(t));
        assert!(none.iter().all(|&x| x != Target::Positive));

        let base = mask_labels(&[1, 5], spec.index_range(1), spec.seen_count(1));
        assert_eq!(base.len(), 40);
        assert!(base.iter().all(|&x| x != Target::Ignore));
    }

    #[test]
    fn pseudo_label_bands() {
        let mut s = vec![Target::Ignore, Target::Ignore, Target::Ignore, Target::Positive];
        pseudo_label(&mut s, &[0.95, 0.5, 0.1, 0.0], 0.8, 0.2);
        assert_eq!(s, vec![Target::Positive, Target::Ignore, Target::Negative, Target::Positive]);
        let mut band = vec![Target::Ignore; 3];
        pseudo_label(&mut band, &[0.3, 0.5, 0.79], 0.8, 0.2);
        assert!(band.iter().all(|&t| t == Target::Ignore));
    }

    fn positives(n: usize, class: usize, seen: usize) -> Vec<MultiLabelSample> {
        (0..n)
            .map(|i| MultiLabelSample {
                id: i as u64,
                row: i,
                labels: vec![class],
                supervision: mask_labels(&[class], 0..seen, seen),
            })
            .collect()
    }

    #[test]
    fn buffer_capacity_and_seed() {
        let samples = positives(100, 0, 2);
        let mut empty = ExemplarBuffer::new();
        buffer_update(&mut empty, &samples, 0..2, 0, 1);
        assert!(empty.is_empty());

        let mut a = ExemplarBuffer::new();
        buffer_update(&mut a, &samples, 0..2, 20, 1);
        assert_eq!(a.per_class[&0].len(), 20);
        assert_eq!(a.per_class[&1].len(), 0);
        let mut b = ExemplarBuffer::new();
        buffer_update(&mut b, &samples, 0..2, 20, 1);
        assert_eq!(a, b);

        let before = a.per_class[&0].clone();
        buffer_update(&mut a, &positives(50, 0, 2), 0..2, 20, 9);
        assert_eq!(a.per_class[&0], before);
    }

    #[test]
    fn epoch_stream_length() {
        let s = session_epoch_stream(130, 64, 3);
        assert_eq!(s.len(), 3);
        let all: Vec<usize> = s.flatten().collect();
        let mut sorted = all.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..130).collect::<Vec<_>>());
        assert_eq!(
            session_epoch_stream(130, 64, 3).collect::<Vec<_>>(),
            session_epoch_stream(130, 64, 3).collect::<Vec<_>>()
        );
    }

    #[test]
    fn pool_merges_buffer() {
        let cur = positives(3, 1, 2);
        let pool = SessionPool::new(cur.clone(), &ExemplarBuffer::new(), 2);
        assert_eq!(pool.len(), 3);

        let mut buffer = ExemplarBuffer::new();
        buffer.per_class.insert(
            0,
            vec![
                Exemplar { id: 1, row: 1, labels: vec![0, 1], supervision: vec![Target::Positive] },
                Exemplar { id: 9, row: 9, labels: vec![0], supervision: vec![Target::Positive] },
            ],
        );
        let pool = SessionPool::new(cur, &buffer, 2);
        assert_eq!(pool.len(), 4);
        assert_eq!(pool.replayed, 1);
        assert_eq!(pool.items[1].supervision[0], Target::Positive);
        assert_eq!(pool.items[3].supervision, vec![Target::Positive, Target::Ignore]);
    }

    #[test]
    fn cumulative_test_union() {
        let data = Dataset {
            ids: vec![0, 1, 2, 3],
            features: Tensor::zeros(&[4, 1, 1]),
            labels: vec![vec![0], vec![2], vec![3, 0], vec![1]],
            total_classes: 4,
        };
        let spec = split_protocol(4, 0, 2).unwrap();
        assert_eq!(cumulative_test_rows(&data, &spec, 1), vec![0, 2, 3]);
        assert_eq!(cumulative_test_rows(&data, &spec, 2), vec![0, 1, 2, 3]);
        let s2 = session_samples(&data, &spec, 2, false, false);
        assert_eq!(s2.iter().map(|s| s.row).collect::<Vec<_>>(), vec![1, 2]);
        let u2 = session_samples(&data, &spec, 2, true, false);
        assert_eq!(u2.iter().map(|s| s.row).collect::<Vec<_>>(), vec![1]);
    }
}
