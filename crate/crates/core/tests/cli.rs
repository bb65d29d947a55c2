use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use clin::cli::{checkpoint_path, sha256_hex, ExperimentConfig, RunManifest, RUN_MANIFEST_FILE};
use clin::dataio::{generate_synthetic_stream, SyntheticStreamConfig};
use clin::metrics::MetricsReport;
use clin::trainer::REPORTS_FILE;

fn clin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clin")).args(args).output().expect("run clin")
}

fn code(args: &[&str]) -> i32 {
    clin(args).status.code().unwrap_or(-1)
}

fn small_config(dir: &Path) -> String {
    let mut cfg = ExperimentConfig::default();
    cfg.stream.total_classes = 9;
    cfg.stream.samples_per_class = 16;
    cfg.protocol = "B3-C3".into();
    cfg.train.epochs = 2;
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["nonsense"]), 1);
    assert_eq!(code(&["gen", "--seed", "minus-one"]), 1);
    assert_eq!(code(&["split", "--protocol", "B3", "--out", "/dev/null"]), 1);
    assert_eq!(code(&["gen", "--config", "/definitely/not/here.toml"]), 1);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn missing_or_bad_data_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    assert_eq!(code(&["train", "--data", "/no/such/dir", "--out", out.to_str().unwrap()]), 2);

    let config = small_config(tmp.path());
    let data = tmp.path().join("data");
    assert_eq!(code(&["gen", "--config", &config, "--out", data.to_str().unwrap()]), 0);
    let mut wide = ExperimentConfig::default();
    wide.stream.total_classes = 9;
    wide.protocol = "B3-C3".into();
    wide.stream.raw_dim = 20;
    wide.model.raw_dim = 20;
    let wide_path = tmp.path().join("wide.toml");
    fs::write(&wide_path, wide.to_toml().unwrap()).unwrap();
    let c = code(&[
        "train",
        "--config",
        wide_path.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(c, 2);
    assert!(!checkpoint_path(&out, 1).exists());
}

#[test]
fn gradcheck_passes_at_default_dims() {
    let o = clin(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("max relative error"));
}

#[test]
fn split_writes_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sessions.txt");
    assert_eq!(code(&["split", "--classes", "20", "--protocol", "B10-C5", "--out", out.to_str().unwrap()]), 0);
    let text = fs::read_to_string(&out).unwrap();
    let spec = clin::protocol::SessionSpec::from_manifest(&text, 20).unwrap();
    assert_eq!(spec.sessions.iter().map(Vec::len).collect::<Vec<_>>(), vec![10, 5, 5]);
}

#[test]
fn generated_cardinality_is_near_target() {
    let cfg = SyntheticStreamConfig::default();
    for seed in 0..3 {
        let s = generate_synthetic_stream(&cfg, seed).unwrap();
        let target = cfg.expected_cardinality();
        let got = s.train.mean_cardinality();
        assert!((got - target).abs() <= 0.05 * target, "seed {seed}: {got} vs {target}");
    }
}

#[test]
fn train_then_eval_reproduces_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path());
    let data = tmp.path().join("data");
    let data_s = data.to_str().unwrap();
    assert_eq!(code(&["gen", "--config", &config, "--seed", "4", "--out", data_s]), 0);
    let run = tmp.path().join("run");
    let o = clin(&["train", "--config", &config, "--data", data_s, "--out", run.to_str().unwrap(), "--mper", "3", "--beta", "10"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let reports: Vec<MetricsReport> = fs::read_to_string(run.join(REPORTS_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(reports.len(), 3);
    for (t, expected) in reports.iter().enumerate().map(|(i, r)| (i + 1, r)) {
        let ckpt = checkpoint_path(&run, t);
        let o = clin(&["eval", "--config", &config, "--checkpoint", ckpt.to_str().unwrap(), "--data", data_s]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let got: MetricsReport = serde_json::from_str(String::from_utf8_lossy(&o.stdout).trim()).unwrap();
        assert_eq!(&got, expected);
    }

    let manifest: RunManifest = toml::from_str(&fs::read_to_string(run.join(RUN_MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest.config.train.m_per, 3);
    assert_eq!(manifest.config.train.beta, 10.0);
    for (name, hash) in &manifest.artifacts {
        assert_eq!(&sha256_hex(&fs::read(run.join(name)).unwrap()), hash, "{name}");
    }
}
