//! Command-line front end.
//!
//! Exit codes: `0` success, `1` usage or configuration error, `2` data error
//! (unreadable or malformed inputs, mismatched dimensions), `3` a check that
//! ran but failed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cinet::ModelConfig;
use crate::dataio::{generate_synthetic_stream, read_checkpoint, Checkpoint, Dataset, SyntheticStreamConfig};
use crate::error::{Error, Result};
use crate::metrics::RunSummary;
use crate::protocol::{split_protocol, ProtocolName, SessionSpec};
use crate::trainer::{
    evaluate, gradcheck_full_model, run_stream_with, write_reports, GradCheckDims, RunResult, TrainConfig, Variant,
    LOSSES_FILE, REPORTS_FILE, SUMMARY_FILE,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

/// Gradient checks above this relative error fail the `gradcheck` command.
pub const GRADCHECK_FAIL_ABOVE: f64 = 1e-5;

pub const STREAM_FILE: &str = "stream.toml";
pub const MANIFEST_FILE: &str = "sessions.txt";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.toml";

/// Everything a run needs, read from one TOML file. Missing keys take the
/// defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub protocol: String,
    pub stream: SyntheticStreamConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            protocol: "B0-C5".into(),
            stream: SyntheticStreamConfig {
                total_classes: 20,
                patches: 4,
                raw_dim: 16,
                co_occurrence: 0.9,
                ..SyntheticStreamConfig::default()
            },
            model: ModelConfig {
                raw_dim: 16,
                dim: 32,
                heads: 4,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: 30,
                lr_base: 1e-2,
                lr_incremental: 1e-2,
                ..TrainConfig::default()
            },
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }

    pub fn protocol_name(&self) -> Result<ProtocolName> {
        self.protocol.parse()
    }

    pub fn session_spec(&self) -> Result<SessionSpec> {
        let p = self.protocol_name()?;
        split_protocol(self.stream.total_classes, p.base, p.increment)
    }

    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.protocol_name()?;
        if self.model.raw_dim != self.stream.raw_dim {
            return Err(Error::Config(format!(
                "model raw_dim {} differs from stream raw_dim {}",
                self.model.raw_dim, self.stream.raw_dim
            )));
        }
        Ok(())
    }
}

/// Provenance of a training run: enough to repeat it bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub data_dir: String,
    pub sessions: Vec<Vec<usize>>,
    pub output_dir: String,
    /// `(file name, sha256 hex)` of every artifact written.
    pub artifacts: Vec<(String, String)>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        write!(s, "{b:02x}").expect("write to String");
        s
    })
}

#[derive(Debug, Parser)]
#[command(name = "clin", version, about = "Multi-label class-incremental learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// TOML experiment config; defaults apply to absent keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (or file for `split`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct Overrides {
    /// Exemplars stored per class.
    #[arg(long)]
    pub mper: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Session protocol, e.g. `B0-C5`.
    #[arg(long)]
    pub protocol: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic train/test stream.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Write a session manifest for a protocol.
    Split {
        #[command(flatten)]
        common: Common,
        /// Total number of classes (defaults to the config's stream size).
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        protocol: Option<String>,
    },
    /// Train every session and write reports and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: Overrides,
        /// Directory written by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Session manifest; otherwise the protocol is split afresh.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the cumulative test set of its session.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        protocol: Option<String>,
    },
    /// Finite-difference check of the full model gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 4)]
        patches: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
    },
    /// Compare component variants over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: Overrides,
        /// Comma-separated list of `baseline`, `cinet`, `cinet+mc`.
        #[arg(long, default_value = "baseline,cinet,cinet+mc")]
        variants: String,
        /// Number of seeds, starting at `--seed`.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Final mAP as a function of the buffer size.
    SweepBuffer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: Overrides,
        /// Comma-separated buffer sizes.
        #[arg(long, default_value = "0,5,10")]
        mpers: String,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value = "cinet+mc")]
        variant: String,
    },
}

fn load_config(common: &Common, overrides: Option<&Overrides>) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.train.seed = common.seed;
    if let Some(o) = overrides {
        if let Some(m) = o.mper {
            cfg.train.m_per = m;
        }
        if let Some(a) = o.alpha {
            cfg.train.alpha = a;
        }
        if let Some(b) = o.beta {
            cfg.train.beta = b;
        }
        if let Some(p) = &o.protocol {
            cfg.protocol = p.clone();
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, fallback: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(fallback))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Stream metadata stored next to generated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamInfo {
    pub seed: u64,
    pub stream: SyntheticStreamConfig,
}

pub fn cmd_gen(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<StreamInfo> {
    let stream = generate_synthetic_stream(&cfg.stream, seed)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    stream.train.save(dir, "train")?;
    stream.test.save(dir, "test")?;
    let info = StreamInfo {
        seed,
        stream: cfg.stream.clone(),
    };
    let text = toml::to_string(&info).map_err(|e| Error::Config(format!("serialize stream info: {e}")))?;
    write_file(&dir.join(STREAM_FILE), text.as_bytes())?;
    Ok(info)
}

/// Reads the train and test sets written by [`cmd_gen`].
pub fn load_data(dir: &Path) -> Result<(StreamInfo, Dataset, Dataset)> {
    let path = dir.join(STREAM_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let info: StreamInfo = toml::from_str(&text).map_err(|e| Error::Format {
        kind: "stream info",
        path: path.clone(),
        detail: e.to_string(),
    })?;
    let total = info.stream.total_classes;
    let train = Dataset::load(dir, "train", total)?;
    let test = Dataset::load(dir, "test", total)?;
    Ok((info, train, test))
}

pub fn cmd_split(total: usize, protocol: &str, out: &Path) -> Result<SessionSpec> {
    let p: ProtocolName = protocol.parse()?;
    let spec = split_protocol(total, p.base, p.increment)?;
    write_file(out, spec.to_manifest().as_bytes())?;
    Ok(spec)
}

fn resolve_spec(manifest: Option<&Path>, cfg: &ExperimentConfig, total: usize) -> Result<SessionSpec> {
    match manifest {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            SessionSpec::from_manifest(&text, total)
        }
        None => {
            let p = cfg.protocol_name()?;
            split_protocol(total, p.base, p.increment)
        }
    }
}

pub fn checkpoint_path(dir: &Path, session: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("session-{session:02}.ckpt"))
}

pub fn cmd_train(cfg: &ExperimentConfig, data_dir: &Path, manifest: Option<&Path>, out: &Path) -> Result<RunResult> {
    let (_, train, test) = load_data(data_dir)?;
    let spec = resolve_spec(manifest, cfg, train.total_classes)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let result = run_stream_with(
        cfg.model.clone(),
        variant_of(cfg).architecture(),
        &spec,
        &train,
        &test,
        &cfg.train,
        |state, report| {
            let ckpt = Checkpoint {
                model: state.model.clone(),
                session: report.session,
            };
            let bytes = crate::dataio::encode_checkpoint(&ckpt)?;
            write_file(&checkpoint_path(out, report.session), &bytes)
        },
    )?;
    write_reports(out, &result)?;
    write_file(&out.join(MANIFEST_FILE), spec.to_manifest().as_bytes())?;

    let mut artifacts = Vec::new();
    let mut names: Vec<String> = vec![REPORTS_FILE.into(), SUMMARY_FILE.into(), LOSSES_FILE.into(), MANIFEST_FILE.into()];
    names.extend((1..=spec.len()).map(|t| format!("checkpoints/session-{t:02}.ckpt")));
    for name in names {
        let p = out.join(&name);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        artifacts.push((name, sha256_hex(&bytes)));
    }
    let manifest = RunManifest {
        config: cfg.clone(),
        seed: cfg.train.seed,
        data_dir: data_dir.display().to_string(),
        sessions: spec.sessions.clone(),
        output_dir: out.display().to_string(),
        artifacts,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(format!("serialize run manifest: {e}")))?;
    write_file(&out.join(RUN_MANIFEST_FILE), text.as_bytes())?;
    Ok(result)
}

fn variant_of(cfg: &ExperimentConfig) -> Variant {
    if cfg.train.use_mc {
        Variant::CinetMc
    } else {
        Variant::Cinet
    }
}

pub fn cmd_eval(
    checkpoint: &Path,
    data_dir: &Path,
    manifest: Option<&Path>,
    cfg: &ExperimentConfig,
) -> Result<crate::metrics::MetricsReport> {
    let ckpt: Checkpoint = read_checkpoint(checkpoint)?;
    let (_, _, test) = load_data(data_dir)?;
    let spec = resolve_spec(manifest, cfg, test.total_classes)?;
    if ckpt.session == 0 || ckpt.session > spec.len() {
        return Err(Error::Protocol(format!(
            "checkpoint session {} outside the {}-session layout",
            ckpt.session,
            spec.len()
        )));
    }
    if !test.is_empty() && test.raw_dim() != ckpt.model.config.raw_dim {
        return Err(Error::shape(
            "eval",
            format!("features of width {} for a model expecting {}", test.raw_dim(), ckpt.model.config.raw_dim),
        ));
    }
    evaluate(&ckpt.model, &spec, ckpt.session, &test, cfg.train.batch_size)
}

/// One row of an ablation or buffer sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub seeds: Vec<u64>,
    pub summaries: Vec<RunSummary>,
    pub mean_last: f64,
    pub mean_average: f64,
}

impl SweepRow {
    fn new(label: String, seeds: Vec<u64>, summaries: Vec<RunSummary>) -> Self {
        let n = summaries.len().max(1) as f64;
        SweepRow {
            mean_last: summaries.iter().map(|s| s.last).sum::<f64>() / n,
            mean_average: summaries.iter().map(|s| s.average).sum::<f64>() / n,
            label,
            seeds,
            summaries,
        }
    }
}

/// Runs one synthetic stream per seed: stream, initialization and shuffling
/// all use that seed.
pub fn run_seeded(cfg: &ExperimentConfig, variant: Variant, seed: u64) -> Result<RunResult> {
    let stream = generate_synthetic_stream(&cfg.stream, seed)?;
    let spec = cfg.session_spec()?;
    let train = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    crate::trainer::run_variant(variant, cfg.model.clone(), &spec, &stream.train, &stream.test, &train)
}

pub fn run_ablation(cfg: &ExperimentConfig, variants: &[Variant], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    variants
        .iter()
        .map(|&v| {
            let summaries = seeds
                .iter()
                .map(|&s| run_seeded(cfg, v, s).map(|r| r.summary))
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepRow::new(v.label().into(), seeds.to_vec(), summaries))
        })
        .collect()
}

pub fn run_buffer_sweep(cfg: &ExperimentConfig, variant: Variant, mpers: &[usize], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    mpers
        .iter()
        .map(|&m| {
            let mut c = cfg.clone();
            c.train.m_per = m;
            let summaries = seeds
                .iter()
                .map(|&s| run_seeded(&c, variant, s).map(|r| r.summary))
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepRow::new(format!("M_per={m}"), seeds.to_vec(), summaries))
        })
        .collect()
}

/// Fixed-width text table of sweep rows.
pub fn format_table(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    writeln!(out, "{:<14} {:>9} {:>9}  per-seed last mAP", "row", "avg mAP", "last mAP").expect("write");
    for r in rows {
        let per: Vec<String> = r.summaries.iter().map(|s| format!("{:.2}", s.last)).collect();
        writeln!(
            out,
            "{:<14} {:>9.2} {:>9.2}  {}",
            r.label,
            r.mean_average,
            r.mean_last,
            per.join(" ")
        )
        .expect("write");
    }
    out
}

fn write_table(dir: &Path, name: &str, rows: &[SweepRow]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(rows).map_err(|e| Error::Config(format!("serialize table: {e}")))?;
    write_file(&dir.join(format!("{name}.json")), (json + "\n").as_bytes())?;
    write_file(&dir.join(format!("{name}.txt")), format_table(rows).as_bytes())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad {what} entry {t:?}")))
        })
        .collect()
}

fn seed_range(start: u64, n: u64) -> Vec<u64> {
    (start..start + n).collect()
}

/// Executes a parsed command, printing results to stdout.
pub fn execute(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Gen { common } => {
            let cfg = load_config(&common, None)?;
            let dir = out_dir(&common, "data");
            cmd_gen(&cfg, common.seed, &dir)?;
            println!("wrote stream to {}", dir.display());
        }
        Command::Split {
            common,
            classes,
            protocol,
        } => {
            let cfg = load_config(&common, None)?;
            let total = classes.unwrap_or(cfg.stream.total_classes);
            let protocol = protocol.unwrap_or(cfg.protocol);
            let out = out_dir(&common, MANIFEST_FILE);
            let spec = cmd_split(total, &protocol, &out)?;
            println!("{} sessions written to {}", spec.len(), out.display());
        }
        Command::Train {
            common,
            overrides,
            data,
            manifest,
        } => {
            let cfg = load_config(&common, Some(&overrides))?;
            let out = out_dir(&common, "run");
            let result = cmd_train(&cfg, &data, manifest.as_deref(), &out)?;
            let s = &result.summary;
            println!(
                "sessions {} avg mAP {:.2} last mAP {:.2} CF1 {:.2} OF1 {:.2}",
                s.sessions, s.average, s.last, s.last_cf1, s.last_of1
            );
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            manifest,
            protocol,
        } => {
            let mut cfg = load_config(&common, None)?;
            if let Some(p) = protocol {
                cfg.protocol = p;
            }
            let report = cmd_eval(&checkpoint, &data, manifest.as_deref(), &cfg)?;
            let json = serde_json::to_string(&report).map_err(|e| Error::Config(e.to_string()))?;
            if let Some(out) = &common.out {
                write_file(out, (json.clone() + "\n").as_bytes())?;
            }
            println!("{json}");
        }
        Command::Gradcheck {
            common,
            dim,
            patches,
            classes,
            heads,
            batch,
        } => {
            let dims = GradCheckDims {
                dim,
                patches,
                classes,
                heads,
                batch,
                ..GradCheckDims::default()
            };
            let r = gradcheck_full_model(dims, common.seed)?;
            println!(
                "max relative error {:.3e} over {} coordinates (worst {:?})",
                r.max_rel_error, r.coordinates, r.worst
            );
            if r.max_rel_error > GRADCHECK_FAIL_ABOVE {
                return Ok(EXIT_CHECK);
            }
        }
        Command::Ablate {
            common,
            overrides,
            variants,
            seeds,
        } => {
            let cfg = load_config(&common, Some(&overrides))?;
            let variants: Vec<Variant> = parse_list(&variants, "variant")?;
            let rows = run_ablation(&cfg, &variants, &seed_range(common.seed, seeds))?;
            print!("{}", format_table(&rows));
            if let Some(out) = &common.out {
                write_table(out, "ablation", &rows)?;
            }
        }
        Command::SweepBuffer {
            common,
            overrides,
            mpers,
            seeds,
            variant,
        } => {
            let cfg = load_config(&common, Some(&overrides))?;
            let mpers: Vec<usize> = parse_list(&mpers, "buffer size")?;
            let variant: Variant = variant.parse()?;
            let rows = run_buffer_sweep(&cfg, variant, &mpers, &seed_range(common.seed, seeds))?;
            print!("{}", format_table(&rows));
            if let Some(out) = &common.out {
                write_table(out, "buffer_sweep", &rows)?;
            }
        }
    }
    Ok(EXIT_OK)
}

/// Maps an error to its exit code.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_data_error() {
        EXIT_DATA
    } else {
        EXIT_USAGE
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
