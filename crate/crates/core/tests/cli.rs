use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use advoffset::corpus::load_corpus;
use advoffset::eval::{read_channel_csv, read_sweep_csv};
use advoffset::model::DEFAULT_HIDDEN_SIZE;
use advoffset::seeds::derive_seed;
use advoffset::{AcousticModel, Alphabet, Frontend, FrontendConfig};
use sha2::{Digest, Sha256};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advoffset")).args(args).output().unwrap()
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Small corpus + briefly trained model shared by several tests.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        run_ok(&["synth-data", "--seed", "4", "--num-utterances", "10", "--out-dir", &s(&root.join("corpus"))]);
        run_ok(&["train", "--seed", "4", "--corpus", &s(&root.join("corpus")), "--epochs", "1", "--out-dir", &s(&root.join("train"))]);
        Fixture { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> String {
        s(&self.root.join(rel))
    }
}

fn stderr_line(out: &Output) -> String {
    let text = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(text.trim_end().lines().count(), 1, "expected one error line, got {text:?}");
    text.trim_end().to_string()
}

#[test]
fn missing_target_is_a_usage_error() {
    let f = Fixture::new();
    let out = run(&["sweep", "--model", &f.path("train/model.ckpt"), "--adversarial", &f.path("corpus/wavs/utt_0000.wav")]);
    assert!(!out.status.success());
    let line = stderr_line(&out);
    assert!(line.starts_with("error kind=usage message="), "{line}");
    assert!(line.contains("--target"), "{line}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["sweep", "--bogus"]);
    assert!(!out.status.success());
    assert!(stderr_line(&out).starts_with("error kind=usage "));
}

#[test]
fn missing_frequency_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "letters = \"abk\"\nnum_utterances = 4\n").unwrap();
    let out = run(&["synth-data", "--config", &s(&cfg), "--out-dir", &s(&dir.path().join("c"))]);
    assert!(!out.status.success());
    let line = stderr_line(&out);
    assert!(line.starts_with("error kind=invalid_config "), "{line}");
    assert!(line.contains("'k'"), "{line}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "num_utterance = 4\n").unwrap();
    let out = run(&["synth-data", "--config", &s(&cfg), "--out-dir", &s(&dir.path().join("c"))]);
    assert!(stderr_line(&out).starts_with("error kind=invalid_config "));
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "num_utterances = 20\nseed = 9\n").unwrap();
    let out_dir = dir.path().join("c");
    let line = run_ok(&["synth-data", "--config", &s(&cfg), "--num-utterances", "10", "--out-dir", &s(&out_dir)]);
    assert_eq!(line.trim(), "utterances=10 train=9 heldout=1");
    let manifest = std::fs::read_to_string(out_dir.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 11);
    assert!(!manifest.contains('\r'));
    let run_manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(run_manifest["root_seed"], 9);
    assert_eq!(run_manifest["seeds"]["corpus"], derive_seed(9, "corpus", 0));
}

#[test]
fn out_dir_defaults_to_env_root() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_advoffset"))
        .args(["synth-data", "--num-utterances", "2"])
        .env("ADVOFFSET_OUT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("synth-data/manifest.csv").is_file());
    assert!(dir.path().join("synth-data/run_manifest.json").is_file());
}

#[test]
fn manifest_checksums_match_outputs() {
    let f = Fixture::new();
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(f.root.join("train/run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    let outputs = manifest["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), 2);
    for o in outputs.iter().chain(manifest["inputs"].as_array().unwrap()) {
        let bytes = std::fs::read(o["path"].as_str().unwrap()).unwrap();
        assert_eq!(o["sha256"].as_str().unwrap(), hex::encode(Sha256::digest(&bytes)));
    }
    assert!(manifest["wall_clock_secs"].as_f64().unwrap() >= 0.0);
}

#[test]
fn metrics_have_one_row_per_epoch() {
    let f = Fixture::new();
    let out = f.path("train3");
    run_ok(&["train", "--seed", "4", "--corpus", &f.path("corpus"), "--epochs", "3", "--out-dir", &out]);
    let text = std::fs::read_to_string(Path::new(&out).join("metrics.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,heldout_exact_match");
    assert_eq!(lines.len(), 4);
}

#[test]
fn zero_epochs_returns_initialization() {
    let f = Fixture::new();
    let out = f.path("train0");
    run_ok(&["train", "--seed", "4", "--corpus", &f.path("corpus"), "--epochs", "0", "--out-dir", &out]);
    let saved = AcousticModel::load(Path::new(&out).join("model.ckpt")).unwrap();

    let corpus = load_corpus(f.path("corpus")).unwrap();
    let cfg = FrontendConfig::default();
    let fe = Frontend::new(cfg).unwrap();
    let mut init = AcousticModel::init(cfg, Alphabet::default(), DEFAULT_HIDDEN_SIZE, derive_seed(4, "init", 0)).unwrap();
    let feats: Vec<_> = corpus.train_set().iter().map(|u| fe.mfcc(&u.audio).unwrap()).collect();
    init.set_normalization(&feats).unwrap();
    assert_eq!(saved, init);
}

#[test]
fn attack_sweep_and_simulate_outputs() {
    let f = Fixture::new();
    let model = f.path("train/model.ckpt");
    let line = run_ok(&[
        "attack", "--model", &model, "--original", &f.path("corpus/wavs/utt_0001.wav"), "--target", "ab",
        "--iterations", "3", "--batch-size", "2", "--out-dir", &f.path("attack"),
    ]);
    assert!(line.starts_with("mode=offset_training "), "{line}");
    for name in ["adversarial.wav", "perturbation.wav", "loss.csv", "summary.json", "run_manifest.json"] {
        assert!(f.root.join("attack").join(name).is_file(), "{name}");
    }
    let loss = std::fs::read_to_string(f.root.join("attack/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 4);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(f.root.join("attack/summary.json")).unwrap()).unwrap();
    assert!(summary["achieved_db"].as_f64().unwrap() <= 66.02);

    let adv = f.path("attack/adversarial.wav");
    let line = run_ok(&["sweep", "--model", &model, "--adversarial", &adv, "--target", "ab", "--out-dir", &f.path("sweep")]);
    assert!(line.starts_with("offsets=801 "), "{line}");
    let sweep = read_sweep_csv(f.root.join("sweep/sweep.csv"), "ab").unwrap();
    assert_eq!(sweep.offsets, (0..=800).collect::<Vec<_>>());

    run_ok(&["sweep", "--model", &model, "--adversarial", &adv, "--target", "ab", "--step", "160", "--out-dir", &f.path("sweep160")]);
    let coarse = read_sweep_csv(f.root.join("sweep160/sweep.csv"), "ab").unwrap();
    assert_eq!(coarse.offsets, vec![0, 160, 320, 480, 640, 800]);

    let line = run_ok(&["simulate", "--model", &model, "--adversarial", &adv, "--target", "ab", "--out-dir", &f.path("sim")]);
    assert!(line.starts_with("mean_edit_distance=") && line.contains(" trials=20 target_len=2"), "{line}");
    assert_eq!(read_channel_csv(f.root.join("sim/channel.csv"), "ab").unwrap().rows.len(), 20);

    let line = run_ok(&[
        "simulate", "--model", &model, "--adversarial", &adv, "--target", "ab", "--snr-db", "inf", "--offset-range", "1",
        "--no-bandpass", "--trials", "2", "--out-dir", &f.path("identity"),
    ]);
    let identity = read_channel_csv(f.root.join("identity/channel.csv"), "ab").unwrap();
    assert!(identity.rows.iter().all(|r| r.edit_distance == sweep.distances[0] && r.offset_drawn == 0));
    assert!(line.starts_with(&format!("mean_edit_distance={:.4} ", sweep.distances[0] as f64)), "{line}");
}

#[test]
fn simulate_is_reproducible() {
    let f = Fixture::new();
    let args = |out: &str| {
        vec![
            "simulate".to_string(), "--trials".into(), "1".into(), "--seed".into(), "7".into(), "--model".into(),
            f.path("train/model.ckpt"), "--adversarial".into(), f.path("corpus/wavs/utt_0002.wav"), "--target".into(),
            "abc".into(), "--out-dir".into(), f.path(out),
        ]
    };
    let a: Vec<String> = args("s1");
    let b: Vec<String> = args("s2");
    run_ok(&a.iter().map(String::as_str).collect::<Vec<_>>());
    run_ok(&b.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(
        std::fs::read(f.root.join("s1/channel.csv")).unwrap(),
        std::fs::read(f.root.join("s2/channel.csv")).unwrap()
    );
}

#[test]
fn synth_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        run_ok(&["synth-data", "--seed", "5", "--num-utterances", "6", "--out-dir", &s(&dir.path().join(name))]);
    }
    let read = |n: &str| {
        let m: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(n).join("run_manifest.json")).unwrap()).unwrap();
        m["outputs"].as_array().unwrap().iter().map(|o| o["sha256"].as_str().unwrap().to_string()).collect::<Vec<_>>()
    };
    assert_eq!(read("a"), read("b"));
}
