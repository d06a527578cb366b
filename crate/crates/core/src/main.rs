//! `advoffset` command-line driver.
//!
//! Every command reads an optional flat TOML file (`--config`), lets flags
//! override it, derives all randomness from `--seed` through named streams
//! and finishes by writing `run_manifest.json` next to its outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use advoffset::attack::{run_attack, summarize, write_bundle, AttackJob, AttackMode};
use advoffset::audio::load_wav;
use advoffset::corpus::{generate_corpus, load_corpus, write_corpus, CorpusSpec};
use advoffset::eval::{channel_evaluation, offset_sweep, write_channel_csv, write_sweep_csv, ChannelConfig};
use advoffset::model::train;
use advoffset::seeds::derive_seed;
use advoffset::{AcousticModel, Alphabet, DistortionBound, Error, Frontend, FrontendConfig, Result, TrainConfig};

/// Environment variable naming the default output root; each command writes
/// to `<root>/<command>` unless `--out-dir` is given.
const OUT_ROOT_ENV: &str = "ADVOFFSET_OUT";
const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Parser, Debug)]
#[command(name = "advoffset", version, about = "Offset-resistant audio adversarial examples on a toy CTC recognizer")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat TOML configuration; flags take precedence over its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; sub-streams are derived per component.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: $ADVOFFSET_OUT/<command>, else ./runs/<command>).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic tone corpus.
    SynthData(SynthArgs),
    /// Train the acoustic model on a corpus directory.
    Train(TrainArgs),
    /// Craft an adversarial example.
    Attack(AttackArgs),
    /// Decode the clip after every leading-silence offset in a range.
    Sweep(SweepArgs),
    /// Pass the clip through the simulated playback channel.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    num_utterances: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden_size: Option<usize>,
}

#[derive(Args, Debug)]
struct AttackArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    original: Option<PathBuf>,
    #[arg(long)]
    target: Option<String>,
    /// `baseline` or `offset_training`.
    #[arg(long)]
    mode: Option<AttackMode>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    max_db: Option<f64>,
    #[arg(long)]
    hop: Option<usize>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    adversarial: Option<PathBuf>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    max_offset: Option<usize>,
    #[arg(long)]
    step: Option<usize>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    adversarial: Option<PathBuf>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    /// Signal-to-noise ratio; `inf` disables the noise.
    #[arg(long)]
    snr_db: Option<f64>,
    /// Offsets are drawn from `0..offset_range`; 1 means no offset.
    #[arg(long)]
    offset_range: Option<usize>,
    #[arg(long)]
    bandpass_low: Option<f64>,
    #[arg(long)]
    bandpass_high: Option<f64>,
    /// Skip the band-pass filter.
    #[arg(long)]
    no_bandpass: bool,
}

/// Keys accepted in the `--config` file. Names shared by several commands
/// (`target`, `model`, …) mean the same thing everywhere; training and
/// attack hyper-parameters carry a prefix to stay unambiguous.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    // synth-data
    num_utterances: Option<usize>,
    min_chars: Option<usize>,
    max_chars: Option<usize>,
    char_duration: Option<usize>,
    noise_level: Option<f64>,
    sample_rate: Option<u32>,
    letters: Option<String>,
    space_probability: Option<f64>,
    char_frequencies: Option<BTreeMap<char, f64>>,
    // train
    corpus: Option<PathBuf>,
    epochs: Option<usize>,
    train_learning_rate: Option<f64>,
    train_batch_size: Option<usize>,
    hidden_size: Option<usize>,
    clip_norm: Option<f64>,
    max_silence_offset: Option<usize>,
    train_noise: Option<bool>,
    train_noise_snr_db_low: Option<f64>,
    train_noise_snr_db_high: Option<f64>,
    // attack / sweep / simulate
    model: Option<PathBuf>,
    original: Option<PathBuf>,
    adversarial: Option<PathBuf>,
    target: Option<String>,
    mode: Option<AttackMode>,
    iterations: Option<usize>,
    attack_batch_size: Option<usize>,
    attack_learning_rate: Option<f64>,
    max_db: Option<f64>,
    hop: Option<usize>,
    max_offset: Option<usize>,
    step: Option<usize>,
    trials: Option<usize>,
    noise_snr_db: Option<f64>,
    random_offset_range: Option<usize>,
    bandpass_low: Option<f64>,
    bandpass_high: Option<f64>,
    bandpass: Option<bool>,
}

fn read_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {}", path.display(), e.message())))
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| Error::Usage(format!("missing --{flag} (or `{}` in the config file)", flag.replace('-', "_"))))
}

#[derive(Serialize)]
struct FileRecord {
    path: PathBuf,
    sha256: String,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn records(paths: &[PathBuf]) -> Result<Vec<FileRecord>> {
    paths.iter().map(|p| Ok(FileRecord { path: p.clone(), sha256: sha256_file(p)? })).collect()
}

/// What a command produced, turned into `run_manifest.json` by [`finish`].
struct Run {
    config: serde_json::Value,
    seeds: BTreeMap<&'static str, u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    summary: Option<String>,
}

fn finish(command: &str, out_dir: &Path, root_seed: u64, run: Run, started: Instant) -> Result<()> {
    let manifest = json!({
        "command": command,
        "root_seed": root_seed,
        "config": run.config,
        "seeds": run.seeds,
        "inputs": records(&run.inputs)?,
        "outputs": records(&run.outputs)?,
        "summary": run.summary,
        "wall_clock_secs": started.elapsed().as_secs_f64(),
    });
    let path = out_dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
    if let Some(line) = run.summary {
        println!("{line}");
    }
    Ok(())
}

fn synth_data(args: SynthArgs, file: &FileConfig, seed: u64, out: &Path) -> Result<Run> {
    let d = CorpusSpec::default();
    let spec = CorpusSpec {
        seed: derive_seed(seed, "corpus", 0),
        num_utterances: args.num_utterances.or(file.num_utterances).unwrap_or(d.num_utterances),
        min_chars: file.min_chars.unwrap_or(d.min_chars),
        max_chars: file.max_chars.unwrap_or(d.max_chars),
        char_duration: file.char_duration.unwrap_or(d.char_duration),
        noise_level: file.noise_level.unwrap_or(d.noise_level),
        sample_rate: file.sample_rate.unwrap_or(d.sample_rate),
        letters: file.letters.clone().unwrap_or(d.letters),
        space_probability: file.space_probability.unwrap_or(d.space_probability),
        char_frequencies: file.char_frequencies.clone().unwrap_or(d.char_frequencies),
    };
    let corpus = generate_corpus(&spec, FrontendConfig::default().hop_size)?;
    let outputs = write_corpus(&corpus, out)?;
    let train = corpus.train_set().len();
    Ok(Run {
        config: json!(spec),
        seeds: BTreeMap::from([("corpus", spec.seed)]),
        inputs: vec![],
        outputs,
        summary: Some(format!("utterances={} train={} heldout={}", corpus.entries.len(), train, corpus.entries.len() - train)),
    })
}

fn write_metrics(path: &Path, log: &[advoffset::model::EpochLog]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record(["epoch", "train_loss", "heldout_exact_match"])?;
    for e in log {
        w.write_record([e.epoch.to_string(), format!("{:.9e}", e.train_loss), format!("{:.6}", e.heldout_exact_match)])?;
    }
    w.flush().map_err(|e| Error::Io { path: path.into(), source: e })
}

fn train_cmd(args: TrainArgs, file: &FileConfig, seed: u64, out: &Path) -> Result<Run> {
    let corpus_dir = required(args.corpus.or(file.corpus.clone()), "corpus")?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        learning_rate: args.learning_rate.or(file.train_learning_rate).unwrap_or(d.learning_rate),
        epochs: args.epochs.or(file.epochs).unwrap_or(d.epochs),
        batch_size: args.batch_size.or(file.train_batch_size).unwrap_or(d.batch_size),
        seed: derive_seed(seed, "init", 1),
        clip_norm: file.clip_norm.unwrap_or(d.clip_norm),
        max_silence_offset: file.max_silence_offset.unwrap_or(d.max_silence_offset),
        noise_snr_db: match (file.train_noise, file.train_noise_snr_db_low, file.train_noise_snr_db_high) {
            (Some(false), _, _) => None,
            (_, Some(lo), Some(hi)) => Some((lo, hi)),
            (_, None, None) => d.noise_snr_db,
            _ => return Err(Error::InvalidConfig("set both train_noise_snr_db_low and _high".into())),
        },
    };
    let hidden = args.hidden_size.or(file.hidden_size).unwrap_or(advoffset::model::DEFAULT_HIDDEN_SIZE);
    let init_seed = derive_seed(seed, "init", 0);

    let corpus = load_corpus(&corpus_dir)?;
    let train_set = corpus.train_set();
    let heldout = corpus.heldout_set();
    let fe_cfg = FrontendConfig::default();
    let frontend = Frontend::new(fe_cfg)?;
    let mut model = AcousticModel::init(fe_cfg, Alphabet::default(), hidden, init_seed)?;
    let feats = train_set.iter().map(|u| frontend.mfcc(&u.audio)).collect::<Result<Vec<_>>>()?;
    model.set_normalization(&feats)?;
    let outcome = train(&model, &train_set, &heldout, &cfg)?;

    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.into(), source: e })?;
    let ckpt = out.join("model.ckpt");
    let metrics = out.join("metrics.csv");
    outcome.model.save(&ckpt)?;
    write_metrics(&metrics, &outcome.log)?;
    let best = outcome.best_epoch.map(|e| outcome.log[e].heldout_exact_match);
    let mut inputs = vec![corpus_dir.join(advoffset::corpus::MANIFEST_FILE)];
    inputs.extend(corpus.entries.iter().map(|e| corpus_dir.join(&e.path)));
    Ok(Run {
        config: json!({ "corpus": corpus_dir, "hidden_size": hidden, "train": cfg, "frontend": fe_cfg }),
        seeds: BTreeMap::from([("init", init_seed), ("train", cfg.seed)]),
        inputs,
        outputs: vec![ckpt, metrics],
        summary: Some(match (outcome.best_epoch, best) {
            (Some(e), Some(acc)) => format!("epochs={} best_epoch={e} heldout_exact_match={acc:.4}", cfg.epochs),
            _ => format!("epochs={}", cfg.epochs),
        }),
    })
}

fn attack_cmd(args: AttackArgs, file: &FileConfig, seed: u64, out: &Path) -> Result<Run> {
    let model_path = required(args.model.or(file.model.clone()), "model")?;
    let original_path = required(args.original.or(file.original.clone()), "original")?;
    let target = required(args.target.or(file.target.clone()), "target")?;
    let mode = args.mode.or(file.mode).unwrap_or(AttackMode::OffsetTraining);
    let model = AcousticModel::load(&model_path)?;
    let mut job = AttackJob::new(load_wav(&original_path)?, target, mode);
    job.iterations = args.iterations.or(file.iterations).unwrap_or(job.iterations);
    job.batch_size = args.batch_size.or(file.attack_batch_size).unwrap_or(job.batch_size);
    job.learning_rate = args.learning_rate.or(file.attack_learning_rate).unwrap_or(job.learning_rate);
    job.hop = args.hop.or(file.hop).unwrap_or(job.hop);
    job.bound = DistortionBound::new(args.max_db.or(file.max_db).unwrap_or(job.bound.max_db))?;
    job.seed = derive_seed(seed, "attack", 0);

    let result = run_attack(&job, &model)?;
    let summary = summarize(&job, &result, &model)?;
    let outputs = write_bundle(out, &result, &summary)?;
    Ok(Run {
        config: json!({
            "model": model_path, "original": original_path, "target": job.target, "mode": job.mode,
            "iterations": job.iterations, "batch_size": job.batch_size, "learning_rate": job.learning_rate,
            "max_db": job.bound.max_db, "hop": job.hop,
        }),
        seeds: BTreeMap::from([("attack", job.seed)]),
        inputs: vec![model_path, original_path],
        outputs,
        summary: Some(format!(
            "mode={} achieved_db={} edit_distance_offset0={} decoded={:?}",
            summary.mode,
            summary.achieved_db.map_or("-inf".to_string(), |v| format!("{v:.4}")),
            summary.edit_distance_offset0,
            summary.final_decode
        )),
    })
}

fn sweep_cmd(args: SweepArgs, file: &FileConfig, out: &Path) -> Result<Run> {
    let model_path = required(args.model.or(file.model.clone()), "model")?;
    let adv_path = required(args.adversarial.or(file.adversarial.clone()), "adversarial")?;
    let target = required(args.target.or(file.target.clone()), "target")?;
    let max_offset = args.max_offset.or(file.max_offset).unwrap_or(800);
    let step = args.step.or(file.step).unwrap_or(1);
    let model = AcousticModel::load(&model_path)?;
    let frontend = Frontend::new(model.frontend)?;
    let report = offset_sweep(&load_wav(&adv_path)?, &model, &frontend, &target, max_offset, step)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.into(), source: e })?;
    let csv_path = out.join("sweep.csv");
    write_sweep_csv(&report, &csv_path)?;
    Ok(Run {
        config: json!({ "model": model_path, "adversarial": adv_path, "target": target, "max_offset": max_offset, "step": step }),
        seeds: BTreeMap::new(),
        inputs: vec![model_path, adv_path],
        outputs: vec![csv_path],
        summary: Some(format!(
            "offsets={} max_edit_distance={} zero_fraction={:.4}",
            report.offsets.len(),
            report.max_distance(),
            report.zero_fraction()
        )),
    })
}

fn simulate_cmd(args: SimulateArgs, file: &FileConfig, seed: u64, out: &Path) -> Result<Run> {
    let model_path = required(args.model.or(file.model.clone()), "model")?;
    let adv_path = required(args.adversarial.or(file.adversarial.clone()), "adversarial")?;
    let target = required(args.target.or(file.target.clone()), "target")?;
    let d = ChannelConfig::default();
    let (dlo, dhi) = d.bandpass.expect("default channel has a band-pass");
    let use_bandpass = !args.no_bandpass && file.bandpass.unwrap_or(true);
    let cfg = ChannelConfig {
        noise_snr_db: args.snr_db.or(file.noise_snr_db).unwrap_or(d.noise_snr_db),
        random_offset_range: args.offset_range.or(file.random_offset_range).unwrap_or(d.random_offset_range),
        bandpass: use_bandpass.then(|| {
            (args.bandpass_low.or(file.bandpass_low).unwrap_or(dlo), args.bandpass_high.or(file.bandpass_high).unwrap_or(dhi))
        }),
        trials: args.trials.or(file.trials).unwrap_or(d.trials),
        seed: derive_seed(seed, "channel", 0),
    };
    let model = AcousticModel::load(&model_path)?;
    let frontend = Frontend::new(model.frontend)?;
    let report = channel_evaluation(&load_wav(&adv_path)?, &model, &frontend, &target, &cfg)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.into(), source: e })?;
    let csv_path = out.join("channel.csv");
    write_channel_csv(&report, &csv_path)?;
    Ok(Run {
        config: json!({ "model": model_path, "adversarial": adv_path, "target": target, "channel": {
            "noise_snr_db": if cfg.noise_snr_db.is_finite() { json!(cfg.noise_snr_db) } else { json!("inf") },
            "random_offset_range": cfg.random_offset_range,
            "bandpass": cfg.bandpass,
            "trials": cfg.trials,
        }}),
        seeds: BTreeMap::from([("channel", cfg.seed)]),
        inputs: vec![model_path, adv_path],
        outputs: vec![csv_path],
        summary: Some(report.summary_line()),
    })
}

fn run(cli: Cli) -> Result<()> {
    let started = Instant::now();
    let file = read_config(cli.common.config.as_deref())?;
    let seed = cli.common.seed.or(file.seed).unwrap_or(0);
    let name = match &cli.command {
        Command::SynthData(_) => "synth-data",
        Command::Train(_) => "train",
        Command::Attack(_) => "attack",
        Command::Sweep(_) => "sweep",
        Command::Simulate(_) => "simulate",
    };
    let out = cli.common.out_dir.clone().unwrap_or_else(|| {
        std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs")).join(name)
    });
    std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
    let mut record = match cli.command {
        Command::SynthData(a) => synth_data(a, &file, seed, &out)?,
        Command::Train(a) => train_cmd(a, &file, seed, &out)?,
        Command::Attack(a) => attack_cmd(a, &file, seed, &out)?,
        Command::Sweep(a) => sweep_cmd(a, &file, &out)?,
        Command::Simulate(a) => simulate_cmd(a, &file, seed, &out)?,
    };
    if let Some(path) = &cli.common.config {
        record.inputs.insert(0, path.clone());
    }
    finish(name, &out, seed, record, started)
}

fn fail(kind: &str, message: &str) -> ExitCode {
    let message = message.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error kind={kind} message={message}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            return fail("usage", first);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}
