//! Session-by-session training and evaluation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cinet::{Architecture, ClinModel, ModelConfig, ModelSnapshot};
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::losses::{
    asl_loss, build_instance_set, combine, kd_loss, mc_loss, total_loss, LossBreakdown, DEFAULT_ALPHA, DEFAULT_BETA,
    DEFAULT_GAMMA_NEG, DEFAULT_GAMMA_POS,
};
use crate::metrics::{summarize_run, MetricsReport, RunSummary};
use crate::numerics::{adam_step, AdamConfig, AdamState, Graph, Target, Tensor, Var};
use crate::protocol::{
    buffer_update, cumulative_test_rows, pseudo_label, session_samples, ExemplarBuffer, MultiLabelSample, SessionPool,
    SessionSpec, DEFAULT_BATCH_SIZE, DEFAULT_NEGATIVE_THRESHOLD, DEFAULT_POSITIVE_THRESHOLD,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_base: f64,
    pub lr_incremental: f64,
    /// Fraction of each session's steps spent in linear warmup.
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub m_per: usize,
    pub pseudo_positive: f64,
    pub pseudo_negative: f64,
    /// Master seed; initialization, expansion, shuffling and buffer draws
    /// derive their own streams from it.
    pub seed: u64,
    /// Adds the contrastive term (CINet only).
    pub use_mc: bool,
    /// Lets old-class positives (pseudo-labels and replayed exemplars) enter
    /// the contrastive instance set.
    pub mc_old_positives: bool,
    /// Assigns every sample to exactly one session.
    pub unique_sessions: bool,
    /// Keeps samples whose label set is empty.
    pub keep_empty: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            batch_size: DEFAULT_BATCH_SIZE,
            lr_base: 3e-3,
            lr_incremental: 3e-3,
            warmup_fraction: 0.1,
            weight_decay: 1e-4,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            gamma_pos: DEFAULT_GAMMA_POS,
            gamma_neg: DEFAULT_GAMMA_NEG,
            m_per: 10,
            pseudo_positive: DEFAULT_POSITIVE_THRESHOLD,
            pseudo_negative: DEFAULT_NEGATIVE_THRESHOLD,
            seed: 0,
            use_mc: true,
            mc_old_positives: true,
            unique_sessions: false,
            keep_empty: true,
        }
    }
}

impl TrainConfig {
    /// Full-scale settings: 20 epochs, batch 64, 4e-5 / 1e-4 learning rates.
    pub fn full_scale() -> Self {
        TrainConfig {
            epochs: 20,
            lr_base: 4e-5,
            lr_incremental: 1e-4,
            m_per: 20,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr_base, self.lr_incremental];
        if self.epochs == 0 || self.batch_size == 0 || positive.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Config("epochs, batch size and learning rates must be positive".into()));
        }
        let non_negative = [self.alpha, self.beta, self.gamma_pos, self.gamma_neg, self.weight_decay];
        if non_negative.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("loss weights and decay must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1)".into()));
        }
        if !(0.0 <= self.pseudo_negative
            && self.pseudo_negative < self.pseudo_positive
            && self.pseudo_positive <= 1.0)
        {
            return Err(Error::Config(format!(
                "pseudo thresholds need 0 <= negative < positive <= 1, got {} / {}",
                self.pseudo_negative, self.pseudo_positive
            )));
        }
        Ok(())
    }

    fn stream(&self, tag: u64, a: u64, b: u64) -> u64 {
        let mut x = self.seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        for v in [a, b] {
            x = x.wrapping_add(v).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            x ^= x >> 31;
        }
        x
    }

    pub fn init_seed(&self) -> u64 {
        self.stream(1, 0, 0)
    }

    pub fn expansion_seed(&self, session: usize) -> u64 {
        self.stream(2, session as u64, 0)
    }

    pub fn shuffle_seed(&self, session: usize, epoch: usize) -> u64 {
        self.stream(3, session as u64, epoch as u64)
    }

    pub fn buffer_seed(&self, session: usize) -> u64 {
        self.stream(4, session as u64, 0)
    }
}

/// Linear warmup over the first `warmup` fraction of `total` steps, then
/// cosine decay to zero.
pub fn lr_at(step: usize, total: usize, peak: f64, warmup: f64) -> f64 {
    let total = total.max(1);
    let warm = ((total as f64) * warmup).ceil() as usize;
    if step < warm {
        return peak * (step + 1) as f64 / warm as f64;
    }
    let span = (total - warm).max(1) as f64;
    let progress = (step - warm) as f64 / span;
    0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Mean loss terms of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub session: usize,
    pub epoch: usize,
    pub batches: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: ClinModel,
    pub optimizer: AdamState,
    pub buffer: ExemplarBuffer,
    /// Last completed session, `0` before training.
    pub session: usize,
    pub history: Vec<MetricsReport>,
    pub losses: Vec<EpochLog>,
}

impl TrainState {
    pub fn new(model_config: ModelConfig, arch: Architecture, cfg: &TrainConfig) -> Result<Self> {
        Ok(TrainState {
            model: ClinModel::new(model_config, arch, cfg.init_seed())?,
            optimizer: AdamState::default(),
            buffer: ExemplarBuffer::new(),
            session: 0,
            history: Vec::new(),
            losses: Vec::new(),
        })
    }
}

fn check_inputs(state: &TrainState, spec: &SessionSpec, t: usize, train: &Dataset, test: &Dataset) -> Result<()> {
    if t != state.session + 1 {
        return Err(Error::Protocol(format!(
            "session {t} requested after session {}",
            state.session
        )));
    }
    if t > spec.len() {
        return Err(Error::Protocol(format!("session {t} beyond the {} in the session layout", spec.len())));
    }
    if state.model.num_classes() != spec.seen_count(t - 1) {
        return Err(Error::Protocol(format!(
            "model has {} classes, the session layout expects {} before session {t}",
            state.model.num_classes(),
            spec.seen_count(t - 1)
        )));
    }
    for (name, d) in [("train", train), ("test", test)] {
        if d.total_classes != spec.total_classes {
            return Err(Error::Protocol(format!(
                "{name} data has {} classes, the session layout has {}",
                d.total_classes, spec.total_classes
            )));
        }
        if !d.is_empty() && d.raw_dim() != state.model.config.raw_dim {
            return Err(Error::shape(
                "train_session",
                format!("{name} features have width {}, model expects {}", d.raw_dim(), state.model.config.raw_dim),
            ));
        }
    }
    Ok(())
}

fn predict_rows(model: &ClinModel, data: &Dataset, rows: &[usize], chunk: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rows.len() * model.num_classes());
    for part in rows.chunks(chunk.max(1)) {
        out.extend_from_slice(model.predict(&data.batch_features(part))?.data());
    }
    Ok(out)
}

fn apply_pseudo_labels(
    snapshot: &ModelSnapshot,
    data: &Dataset,
    samples: &mut [MultiLabelSample],
    cfg: &TrainConfig,
) -> Result<()> {
    let rows: Vec<usize> = samples.iter().map(|s| s.row).collect();
    let old = snapshot.num_classes();
    let probs = predict_rows(snapshot.model(), data, &rows, cfg.batch_size)?;
    for (i, s) in samples.iter_mut().enumerate() {
        pseudo_label(
            &mut s.supervision[..old],
            &probs[i * old..(i + 1) * old],
            cfg.pseudo_positive,
            cfg.pseudo_negative,
        );
    }
    Ok(())
}

/// One optimization step on a batch of pool items; returns the loss terms.
fn train_step(
    state: &mut TrainState,
    snapshot: Option<&ModelSnapshot>,
    data: &Dataset,
    items: &[&MultiLabelSample],
    current_start: usize,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let model = &state.model;
    let seen = model.num_classes();
    let rows: Vec<usize> = items.iter().map(|s| s.row).collect();
    let features = data.batch_features(&rows);
    let targets: Vec<Target> = items.iter().flat_map(|s| s.supervision_for(seen)).collect();

    let mut g = Graph::new();
    let out = model.forward(&mut g, &features)?;
    let ce = asl_loss(&mut g, out.probs, &targets, cfg.gamma_pos, cfg.gamma_neg)?;

    let mc = match out.projected {
        Some(projected) if cfg.use_mc && cfg.alpha > 0.0 => {
            let mc_targets: Vec<Target> = if cfg.mc_old_positives {
                targets.clone()
            } else {
                targets
                    .iter()
                    .enumerate()
                    .map(|(k, &t)| if k % seen < current_start { Target::Ignore } else { t })
                    .collect()
            };
            let set = build_instance_set(g.value(projected), &mc_targets)?;
            mc_loss(&mut g, projected, &set)?
        }
        _ => g.constant(Tensor::scalar(0.0)),
    };

    let kd = match snapshot {
        Some(snap) => {
            let previous = snap.distill_features(&features)?;
            let current = model.distill_view(&mut g, &out, snap.num_classes())?;
            kd_loss(&mut g, current, &previous)?
        }
        None => g.constant(Tensor::scalar(0.0)),
    };

    let alpha = if cfg.use_mc { cfg.alpha } else { 0.0 };
    let loss = combine(&mut g, ce, mc, kd, alpha, cfg.beta)?;
    let breakdown = total_loss(
        g.value(ce).item(),
        g.value(mc).item(),
        g.value(kd).item(),
        alpha,
        cfg.beta,
    );
    if !breakdown.is_finite() {
        return Err(Error::Config(format!("non-finite loss {breakdown:?}")));
    }
    let grads = g.backward(loss)?;
    grads.write_to(&mut state.model.params)?;
    let adam = AdamConfig {
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    adam_step(&mut state.model.params, &mut state.optimizer, lr, &adam)?;
    Ok(breakdown)
}

/// Trains session `t` and evaluates on the cumulative test set.
///
/// Inputs are validated before anything in `state` changes.
pub fn train_session(
    state: &mut TrainState,
    spec: &SessionSpec,
    t: usize,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<MetricsReport> {
    cfg.validate()?;
    check_inputs(state, spec, t, train, test)?;

    let snapshot = (t > 1).then(|| state.model.snapshot());
    state
        .model
        .expand_classes(spec.classes(t).len(), t, cfg.expansion_seed(t))?;

    let mut samples = session_samples(train, spec, t, cfg.unique_sessions, cfg.keep_empty);
    if let Some(snap) = &snapshot {
        apply_pseudo_labels(snap, train, &mut samples, cfg)?;
    }
    let seen = spec.seen_count(t);
    let pool = SessionPool::new(samples.clone(), &state.buffer, seen);
    let current_start = spec.index_range(t).start;
    let lr = if t == 1 { cfg.lr_base } else { cfg.lr_incremental };
    let steps_per_epoch = pool.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;

    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut sum = total_loss(0.0, 0.0, 0.0, 0.0, 0.0);
        let mut batches = 0;
        for batch in pool.epoch(cfg.batch_size, cfg.shuffle_seed(t, epoch)) {
            let items: Vec<&MultiLabelSample> = batch.iter().map(|&i| &pool.items[i]).collect();
            let rate = lr_at(step, total_steps, lr, cfg.warmup_fraction);
            let b = train_step(state, snapshot.as_ref(), train, &items, current_start, rate, cfg)?;
            sum.ce += b.ce;
            sum.mc += b.mc;
            sum.kd += b.kd;
            sum.total += b.total;
            sum.alpha = b.alpha;
            sum.beta = b.beta;
            batches += 1;
            step += 1;
        }
        if batches > 0 {
            let n = batches as f64;
            sum.ce /= n;
            sum.mc /= n;
            sum.kd /= n;
            sum.total /= n;
        }
        state.losses.push(EpochLog {
            session: t,
            epoch,
            batches,
            loss: sum,
        });
    }

    buffer_update(&mut state.buffer, &samples, spec.index_range(t), cfg.m_per, cfg.buffer_seed(t));
    state.session = t;
    let report = evaluate(&state.model, spec, t, test, cfg.batch_size)?;
    state.history.push(report.clone());
    Ok(report)
}

/// Scores every seen class on the cumulative test set of session `t`.
pub fn evaluate(model: &ClinModel, spec: &SessionSpec, t: usize, test: &Dataset, chunk: usize) -> Result<MetricsReport> {
    let seen = spec.seen_count(t);
    if model.num_classes() != seen {
        return Err(Error::Protocol(format!(
            "model has {} classes, session {t} has {seen}",
            model.num_classes()
        )));
    }
    let rows = cumulative_test_rows(test, spec, t);
    if rows.is_empty() {
        return Err(Error::Protocol(format!("no test samples for session {t}")));
    }
    let scores = predict_rows(model, test, &rows, chunk)?;
    let map = spec.index_map();
    let mut labels = vec![false; rows.len() * seen];
    for (i, &r) in rows.iter().enumerate() {
        for c in &test.labels[r] {
            if let Some(&k) = map.get(c).filter(|&&k| k < seen) {
                labels[i * seen + k] = true;
            }
        }
    }
    MetricsReport::compute(t, &scores, &labels, rows.len(), seen)
}

/// Mean Euclidean distance between the old-class embeddings of two models on
/// a probe batch, taken over every `(sample, old class)` pair.
pub fn embedding_drift(before: &ClinModel, after: &ClinModel, probe: &Tensor, old_classes: usize) -> Result<f64> {
    let a = before.distill_features(probe, old_classes)?;
    let b = after.distill_features(probe, old_classes)?;
    if a.shape() != b.shape() {
        return Err(Error::shape("embedding_drift", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let dim = *a.shape().last().unwrap_or(&1);
    let rows = a.len() / dim.max(1);
    let total: f64 = a
        .data()
        .chunks(dim)
        .zip(b.data().chunks(dim))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
        .sum();
    Ok(total / rows.max(1) as f64)
}

/// Outcome of a full run over every session of a spec.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub state: TrainState,
    pub summary: RunSummary,
}

impl RunResult {
    pub fn reports(&self) -> &[MetricsReport] {
        &self.state.history
    }
}

pub fn run_stream(
    model_config: ModelConfig,
    arch: Architecture,
    spec: &SessionSpec,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<RunResult> {
    run_stream_with(model_config, arch, spec, train, test, cfg, |_, _| Ok(()))
}

/// [`run_stream`] with a hook called after every session.
pub fn run_stream_with(
    model_config: ModelConfig,
    arch: Architecture,
    spec: &SessionSpec,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    mut after_session: impl FnMut(&TrainState, &MetricsReport) -> Result<()>,
) -> Result<RunResult> {
    cfg.validate()?;
    let mut state = TrainState::new(model_config, arch, cfg)?;
    for t in 1..=spec.len() {
        let report = train_session(&mut state, spec, t, train, test, cfg)?;
        after_session(&state, &report)?;
    }
    let summary = summarize_run(&state.history)?;
    Ok(RunResult { state, summary })
}

pub const REPORTS_FILE: &str = "reports.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const LOSSES_FILE: &str = "losses.jsonl";

fn json_line<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Config(format!("serialize report: {e}")))
}

/// Writes `reports.jsonl`, `losses.jsonl` and `summary.json` into `dir`.
pub fn write_reports(dir: &Path, result: &RunResult) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut reports = String::new();
    for r in result.reports() {
        reports.push_str(&json_line(r)?);
        reports.push('\n');
    }
    let mut losses = String::new();
    for l in &result.state.losses {
        losses.push_str(&json_line(l)?);
        losses.push('\n');
    }
    let summary = serde_json::to_string_pretty(&result.summary)
        .map_err(|e| Error::Config(format!("serialize summary: {e}")))?;
    for (name, body) in [(REPORTS_FILE, reports), (LOSSES_FILE, losses), (SUMMARY_FILE, summary + "\n")] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Rows of the component ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Pooled image-level feature, joint classifier, distillation.
    Baseline,
    /// Class tokens and per-class classifiers, no contrastive term.
    Cinet,
    /// [`Variant::Cinet`] plus the contrastive term.
    CinetMc,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::Cinet, Variant::CinetMc];

    pub fn architecture(self) -> Architecture {
        match self {
            Variant::Baseline => Architecture::Pooled,
            Variant::Cinet | Variant::CinetMc => Architecture::Cinet,
        }
    }

    /// `cfg` with the contrastive switch set for this variant.
    pub fn configure(self, cfg: &TrainConfig) -> TrainConfig {
        TrainConfig {
            use_mc: self == Variant::CinetMc,
            ..cfg.clone()
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Cinet => "+cinet",
            Variant::CinetMc => "+cinet+mc",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().trim_start_matches('+') {
            "baseline" => Ok(Variant::Baseline),
            "cinet" => Ok(Variant::Cinet),
            "cinet+mc" | "mc" => Ok(Variant::CinetMc),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

pub fn run_variant(
    variant: Variant,
    model_config: ModelConfig,
    spec: &SessionSpec,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<RunResult> {
    run_stream(model_config, variant.architecture(), spec, train, test, &variant.configure(cfg))
}

/// Problem size for [`gradcheck_full_model`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckDims {
    pub dim: usize,
    pub patches: usize,
    pub classes: usize,
    pub heads: usize,
    pub batch: usize,
    pub raw_dim: usize,
    pub step: f64,
    /// Standard deviation of the redrawn parameters.
    pub scale: f64,
    /// Perturbation separating the previous-session model from the current one.
    pub drift: f64,
    /// Use the Richardson-extrapolated central difference.
    pub extrapolate: bool,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for GradCheckDims {
    fn default() -> Self {
        GradCheckDims {
            dim: 8,
            patches: 4,
            classes: 3,
            heads: 2,
            batch: 4,
            raw_dim: 6,
            step: 1e-5,
            scale: 0.2,
            drift: 0.05,
            extrapolate: false,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
        }
    }
}

/// Finite-difference check of the complete training loss: adapter, CINet,
/// classification, contrastive and distillation terms together.
///
/// The last class is added in a second session so the distillation term is
/// live. Parameters start from the regular initialization plus
/// `N(0, scale^2)` noise, the previous-session model is a `drift`-sized
/// perturbation of the current one, and every
/// coordinate with a gradient slot is compared, frozen ones included.
pub fn gradcheck_full_model(dims: GradCheckDims, seed: u64) -> Result<crate::numerics::GradCheckReport> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    if dims.classes < 2 || dims.batch == 0 || dims.patches == 0 {
        return Err(Error::Config("gradcheck needs at least 2 classes and a non-empty batch".into()));
    }
    let config = ModelConfig {
        raw_dim: dims.raw_dim,
        dim: dims.dim,
        heads: dims.heads,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ClinModel::new(config, Architecture::Cinet, seed)?;
    model.expand_classes(dims.classes - 1, 1, seed.wrapping_add(1))?;
    for (_, t) in model.params.iter_mut() {
        let noise = Tensor::randn(t.shape(), dims.scale, &mut rng);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += n);
    }
    let mut previous = model.clone();
    for (_, t) in previous.params.iter_mut() {
        let noise = Tensor::randn(t.shape(), dims.drift, &mut rng);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += n);
    }
    let snapshot = previous.snapshot();
    model.expand_classes(1, 2, seed.wrapping_add(2))?;
    let c = dims.classes;
    for name in [crate::cinet::token_name(c - 1), crate::cinet::head_names(c - 1).0] {
        let t = model.params.get_mut(&name)?;
        let noise = Tensor::randn(t.shape(), dims.scale, &mut rng);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += n);
    }

    let features = Tensor::randn(&[dims.batch, dims.patches, dims.raw_dim], 1.0, &mut rng);
    let mut targets: Vec<Target> = (0..dims.batch * c)
        .map(|_| match rng.random_range(0..4) {
            0 | 1 => Target::Positive,
            2 => Target::Negative,
            _ => Target::Ignore,
        })
        .collect();
    targets[0] = Target::Positive;
    targets[c] = Target::Positive;
    targets[1] = Target::Positive;
    let previous_view = snapshot.distill_features(&features)?;
    let old = snapshot.num_classes();

    let build = |m: &ClinModel| -> Result<(Graph, Var)> {
        let mut g = Graph::new();
        let out = m.forward(&mut g, &features)?;
        let ce = asl_loss(&mut g, out.probs, &targets, DEFAULT_GAMMA_POS, DEFAULT_GAMMA_NEG)?;
        let projected = out.projected.expect("cinet projects");
        let set = build_instance_set(g.value(projected), &targets)?;
        let mc = mc_loss(&mut g, projected, &set)?;
        let view = m.distill_view(&mut g, &out, old)?;
        let kd = kd_loss(&mut g, view, &previous_view)?;
        let loss = combine(&mut g, ce, mc, kd, dims.alpha, dims.beta)?;
        Ok((g, loss))
    };

    let (g, loss) = build(&model)?;
    g.backward(loss)?.write_to(&mut model.params)?;
    let mut probe = model.clone();
    let loss_at = |p: &crate::numerics::ParamStore| {
        probe.params = p.clone();
        let (g, loss) = build(&probe)?;
        Ok(g.value(loss).item())
    };
    if dims.extrapolate {
        crate::numerics::finite_diff_check_extrapolated(&model.params, dims.step, loss_at)
    } else {
        crate::numerics::finite_diff_check(&model.params, dims.step, loss_at)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic_stream, SyntheticStreamConfig};
    use crate::protocol::split_protocol;

    fn tiny() -> (ModelConfig, SessionSpec, Dataset, Dataset, TrainConfig) {
        let stream = generate_synthetic_stream(
            &SyntheticStreamConfig {
                total_classes: 6,
                patches: 4,
                raw_dim: 8,
                samples_per_class: 12,
                ..SyntheticStreamConfig::default()
            },
            3,
        )
        .unwrap();
        let model = ModelConfig {
            raw_dim: 8,
            dim: 8,
            heads: 2,
            ..ModelConfig::default()
        };
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            ..TrainConfig::default()
        };
        (model, split_protocol(6, 0, 2).unwrap(), stream.train, stream.test, cfg)
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        let r = gradcheck_full_model(GradCheckDims::default(), 0).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert!(r.max_abs_error < 1e-8 * r.max_abs_grad, "{r:?}");
        assert!(r.coordinates > 500);
    }

    #[test]
    fn schedule_shape() {
        assert!((lr_at(0, 100, 1.0, 0.1) - 0.1).abs() < 1e-12);
        assert!((lr_at(9, 100, 1.0, 0.1) - 1.0).abs() < 1e-12);
        assert!((lr_at(10, 100, 1.0, 0.1) - 1.0).abs() < 1e-12);
        assert!(lr_at(99, 100, 1.0, 0.1) < 0.01);
        assert!((lr_at(0, 5, 2.0, 0.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn first_session_has_no_distillation() {
        let (m, spec, train, test, cfg) = tiny();
        let mut state = TrainState::new(m, Architecture::Cinet, &cfg).unwrap();
        let report = train_session(&mut state, &spec, 1, &train, &test, &cfg).unwrap();
        assert_eq!(report.classes, 2);
        assert!(state.losses.iter().all(|l| l.loss.kd == 0.0));
        assert!(state.model.tokens.frozen.iter().all(|f| !f));
    }

    #[test]
    fn bad_session_leaves_state_untouched() {
        let (m, spec, train, test, cfg) = tiny();
        let mut state = TrainState::new(m, Architecture::Cinet, &cfg).unwrap();
        let before = state.clone();
        assert!(train_session(&mut state, &spec, 2, &train, &test, &cfg).is_err());
        let wrong = Dataset {
            total_classes: 7,
            ..train.clone()
        };
        assert!(train_session(&mut state, &spec, 1, &wrong, &test, &cfg).is_err());
        assert_eq!(state, before);
    }

    #[test]
    fn reports_cover_seen_classes() {
        let (m, spec, train, test, cfg) = tiny();
        let run = run_stream(m, Architecture::Cinet, &spec, &train, &test, &cfg).unwrap();
        let classes: Vec<usize> = run.reports().iter().map(|r| r.classes).collect();
        assert_eq!(classes, vec![2, 4, 6]);
        assert!(run.state.losses.iter().all(|l| l.loss.is_finite()));
        assert!(run.state.losses.iter().filter(|l| l.session > 1).any(|l| l.loss.kd > 0.0));
    }
}
