//! Targeted perturbation search.
//!
//! Baseline mode descends the CTC loss of `x + δ` directly. Offset-training
//! mode instead pads the current adversarial clip as
//! `zeros(hop − r) ‖ (x + δ) ‖ zeros(r)` with `r` uniform on `1..=hop`,
//! backpropagates through the padded waveform, cuts the gradient back to
//! the `len(x)` samples that belong to δ, and averages over a batch of
//! independent draws. Either way δ moves by a signed step and is projected
//! into the amplitude box implied by the dB bound and then into PCM range.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{distortion_db, pad_with_offset, save_wav, AudioClip, DistortionBound, PCM_FULL_SCALE, PCM_MAX};
use crate::ctc::{ctc_loss_and_grad, greedy_decode, required_frames};
use crate::error::{Error, Result};
use crate::eval::edit_distance;
use crate::frontend::Frontend;
use crate::model::AcousticModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    Baseline,
    OffsetTraining,
}

impl std::str::FromStr for AttackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(AttackMode::Baseline),
            "offset_training" | "offset-training" => Ok(AttackMode::OffsetTraining),
            other => Err(Error::InvalidConfig(format!("unknown attack mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for AttackMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttackMode::Baseline => "baseline",
            AttackMode::OffsetTraining => "offset_training",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackJob {
    pub original: AudioClip,
    pub target: String,
    pub bound: DistortionBound,
    pub iterations: usize,
    pub batch_size: usize,
    pub mode: AttackMode,
    pub learning_rate: f64,
    pub seed: u64,
    /// Total padding per draw; offsets are drawn from `1..=hop`.
    pub hop: usize,
}

impl AttackJob {
    /// Job with the default budgets: 1000 iterations, batch 8, step 10, hop 320, 66.02 dB.
    pub fn new(original: AudioClip, target: impl Into<String>, mode: AttackMode) -> Self {
        AttackJob {
            original,
            target: target.into(),
            bound: DistortionBound::REFERENCE,
            iterations: 1000,
            batch_size: 8,
            mode,
            learning_rate: 10.0,
            seed: 0,
            hop: 320,
        }
    }

    pub fn validate(&self, model: &AcousticModel) -> Result<Vec<usize>> {
        if self.iterations == 0 || self.batch_size == 0 || self.hop == 0 {
            return Err(Error::InvalidConfig("iterations, batch_size and hop must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("invalid learning rate {}", self.learning_rate)));
        }
        if self.original.is_empty() {
            return Err(Error::InvalidConfig("original clip is empty".into()));
        }
        DistortionBound::new(self.bound.max_db)?;
        let target = model.alphabet.encode(&self.target)?;
        if target.is_empty() {
            return Err(Error::EmptyTarget);
        }
        let usable = self.original.len().saturating_sub(self.hop);
        let frames = model.frontend.frame_count(usable);
        let required = required_frames(&target);
        if required > frames {
            return Err(Error::TargetTooLong { required, frames });
        }
        Ok(target)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub perturbation: AudioClip,
    pub adversarial: AudioClip,
    pub loss_history: Vec<f64>,
    pub achieved_db: f64,
    pub iterations_run: usize,
}

/// Waveform gradient of the CTC loss through mfcc → model → CTC.
pub fn waveform_loss_and_grad(
    model: &AcousticModel,
    frontend: &Frontend,
    clip: &AudioClip,
    target: &[usize],
) -> Result<(f64, AudioClip)> {
    let feats = frontend.mfcc(clip)?;
    let logits = model.forward(&feats)?;
    let (loss, g_logits) = ctc_loss_and_grad(&logits, target, &model.alphabet)?;
    let g_feats = model.backward_to_input(&feats, &g_logits)?;
    Ok((loss, frontend.vjp(clip, &g_feats)?))
}

/// Gradient of one padded draw, truncated back to `len(x)`.
#[allow(clippy::too_many_arguments)]
pub fn attack_step_offset(
    x: &AudioClip,
    delta: &AudioClip,
    target: &[usize],
    model: &AcousticModel,
    frontend: &Frontend,
    r: usize,
    hop: usize,
) -> Result<(f64, AudioClip)> {
    let adversarial = x.add(delta)?;
    let padded = pad_with_offset(&adversarial, r, hop)?;
    let (loss, grad) = waveform_loss_and_grad(model, frontend, &padded, target)?;
    let lead = hop - r;
    let samples = grad.samples[lead..lead + x.len()].to_vec();
    Ok((loss, AudioClip::new(samples, x.sample_rate)))
}

/// Mean loss and mean truncated gradient over the given offsets, reduced in order.
#[allow(clippy::too_many_arguments)]
pub fn attack_step_offsets(
    x: &AudioClip,
    delta: &AudioClip,
    target: &[usize],
    model: &AcousticModel,
    frontend: &Frontend,
    offsets: &[usize],
    hop: usize,
) -> Result<(f64, AudioClip)> {
    if offsets.is_empty() {
        return Err(Error::InvalidConfig("batch needs at least one offset".into()));
    }
    let parts: Vec<(f64, AudioClip)> = offsets
        .par_iter()
        .map(|&r| attack_step_offset(x, delta, target, model, frontend, r, hop))
        .collect::<Result<_>>()?;
    let b = offsets.len() as f64;
    let mut mean = vec![0.0; x.len()];
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        for (m, v) in mean.iter_mut().zip(&g.samples) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= b);
    Ok((loss / b, AudioClip::new(mean, x.sample_rate)))
}

/// Draws `batch` offsets uniform on `1..=hop` and averages their truncated gradients.
#[allow(clippy::too_many_arguments)]
pub fn attack_step_batch(
    x: &AudioClip,
    delta: &AudioClip,
    target: &[usize],
    model: &AcousticModel,
    frontend: &Frontend,
    batch: usize,
    hop: usize,
    rng: &mut impl Rng,
) -> Result<(f64, AudioClip, Vec<usize>)> {
    let offsets: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=hop)).collect();
    let (loss, grad) = attack_step_offsets(x, delta, target, model, frontend, &offsets, hop)?;
    Ok((loss, grad, offsets))
}

/// Projects δ into `|δ| ≤ amplitude` and then keeps `x + δ` inside 16-bit PCM.
fn project(delta: &mut [f64], x: &[f64], amplitude: f64) {
    for (d, xv) in delta.iter_mut().zip(x) {
        *d = d.clamp(-amplitude, amplitude);
        *d = (xv + *d).clamp(-PCM_FULL_SCALE, PCM_MAX) - xv;
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Runs the job for exactly `job.iterations` signed-gradient steps.
///
/// δ is rounded to the integer PCM grid at the end (inside `floor` of the box
/// half-width), so `adversarial` round-trips through a WAV file unchanged
/// when the original does.
pub fn run_attack(job: &AttackJob, model: &AcousticModel) -> Result<AttackResult> {
    run_attack_with(job, model, |_, _| {})
}

/// [`run_attack`] with a callback after every iteration receiving `(iteration, δ)`.
pub fn run_attack_with(
    job: &AttackJob,
    model: &AcousticModel,
    mut observe: impl FnMut(usize, &AudioClip),
) -> Result<AttackResult> {
    let target = job.validate(model)?;
    let frontend = Frontend::new(model.frontend)?;
    let x = &job.original;
    let amplitude = job.bound.amplitude();
    let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
    let mut delta = AudioClip::zeros(x.len(), x.sample_rate);
    let mut loss_history = Vec::with_capacity(job.iterations);

    for iteration in 0..job.iterations {
        let (loss, grad) = match job.mode {
            AttackMode::Baseline => waveform_loss_and_grad(model, &frontend, &x.add(&delta)?, &target)?,
            AttackMode::OffsetTraining => {
                let (l, g, _) =
                    attack_step_batch(x, &delta, &target, model, &frontend, job.batch_size, job.hop, &mut rng)?;
                (l, g)
            }
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration });
        }
        loss_history.push(loss);
        for (d, g) in delta.samples.iter_mut().zip(&grad.samples) {
            *d -= job.learning_rate * sign(*g);
        }
        project(&mut delta.samples, &x.samples, amplitude);
        observe(iteration, &delta);
    }

    let grid = amplitude.floor();
    for d in delta.samples.iter_mut() {
        *d = d.round_ties_even().clamp(-grid, grid);
    }
    project(&mut delta.samples, &x.samples, grid);
    let adversarial = x.add(&delta)?;
    Ok(AttackResult {
        achieved_db: distortion_db(&delta),
        perturbation: delta,
        adversarial,
        loss_history,
        iterations_run: job.iterations,
    })
}

/// Expected number of distinct offsets seen after `n` uniform draws from `hop` values.
pub fn expected_offsets(n: u64, hop: u64) -> f64 {
    let hop = hop as f64;
    hop * (1.0 - ((hop - 1.0) / hop).powf(n as f64))
}

// ---------------------------------------------------------------------------
// result bundles

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub mode: AttackMode,
    pub target: String,
    pub max_db: f64,
    /// `None` when δ is all zeros (no defined level).
    pub achieved_db: Option<f64>,
    pub iterations_run: usize,
    pub final_loss: Option<f64>,
    pub final_decode: String,
    pub edit_distance_offset0: usize,
}

pub fn summarize(job: &AttackJob, result: &AttackResult, model: &AcousticModel) -> Result<AttackSummary> {
    let frontend = Frontend::new(model.frontend)?;
    let logits = model.forward(&frontend.mfcc(&result.adversarial)?)?;
    let decoded = greedy_decode(&logits, &model.alphabet);
    Ok(AttackSummary {
        mode: job.mode,
        target: job.target.clone(),
        max_db: job.bound.max_db,
        achieved_db: result.achieved_db.is_finite().then_some(result.achieved_db),
        iterations_run: result.iterations_run,
        final_loss: result.loss_history.last().copied(),
        edit_distance_offset0: edit_distance(&decoded, &job.target),
        final_decode: decoded,
    })
}

pub const ADVERSARIAL_WAV: &str = "adversarial.wav";
pub const PERTURBATION_WAV: &str = "perturbation.wav";
pub const LOSS_CSV: &str = "loss.csv";
pub const SUMMARY_JSON: &str = "summary.json";

/// Writes the result bundle and returns the paths written.
pub fn write_bundle(
    dir: &Path,
    result: &AttackResult,
    summary: &AttackSummary,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let adv = dir.join(ADVERSARIAL_WAV);
    let pert = dir.join(PERTURBATION_WAV);
    let loss = dir.join(LOSS_CSV);
    let summary_path = dir.join(SUMMARY_JSON);
    save_wav(&result.adversarial, &adv)?;
    save_wav(&result.perturbation, &pert)?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(&loss)?;
    w.write_record(["iteration", "ctc_loss"])?;
    for (i, l) in result.loss_history.iter().enumerate() {
        w.write_record([i.to_string(), format!("{l:.9e}")])?;
    }
    w.flush().map_err(|e| Error::io(&loss, e))?;
    let mut text = serde_json::to_string_pretty(summary).expect("summary serializes");
    text.push('\n');
    std::fs::write(&summary_path, text).map_err(|e| Error::io(&summary_path, e))?;
    Ok(vec![adv, pert, loss, summary_path])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::AudioClip;
    use crate::ctc::Alphabet;
    use crate::frontend::FrontendConfig;

    fn toy_model() -> AcousticModel {
        AcousticModel::init(FrontendConfig::default(), Alphabet::default(), 16, 3).unwrap()
    }

    fn noise_clip(len: usize, seed: u64) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioClip::new((0..len).map(|_| rng.random_range(-2000.0f64..2000.0).round()).collect(), 16000)
    }

    #[test]
    fn expected_offset_values() {
        assert!((expected_offsets(1000, 320) - 306.0088).abs() < 0.01);
        assert_eq!(expected_offsets(0, 320), 0.0);
        assert!((expected_offsets(1, 320) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn waveform_gradient_matches_finite_differences() {
        let mut model = toy_model();
        let fe = Frontend::new(model.frontend).unwrap();
        let x = noise_clip(4000, 9);
        model.set_normalization(&[fe.mfcc(&x).unwrap()]).unwrap();
        let target = model.alphabet.encode("cab").unwrap();
        let (_, g) = waveform_loss_and_grad(&model, &fe, &x, &target).unwrap();
        let loss_at = |i: usize, d: f64| {
            let mut moved = x.clone();
            moved.samples[i] += d;
            let logits = model.forward(&fe.mfcc(&moved).unwrap()).unwrap();
            crate::ctc::ctc_loss(&logits, &target, &model.alphabet).unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..3 {
            let i = rng.random_range(0..3840);
            let h = 1e-2;
            let fd = (loss_at(i, h) - loss_at(i, -h)) / (2.0 * h);
            let rel = (g.samples[i] - fd).abs() / g.samples[i].abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-3, "sample {i}: {} vs {fd}", g.samples[i]);
        }
    }

    #[test]
    fn truncated_gradient_has_clip_length() {
        let model = toy_model();
        let fe = Frontend::new(model.frontend).unwrap();
        let x = noise_clip(3200, 1);
        let delta = AudioClip::zeros(3200, 16000);
        let target = model.alphabet.encode("ab").unwrap();
        for r in [1, 2, 160, 319, 320] {
            let (_, g) = attack_step_offset(&x, &delta, &target, &model, &fe, r, 320).unwrap();
            assert_eq!(g.len(), 3200);
        }
        assert!(attack_step_offset(&x, &delta, &target, &model, &fe, 0, 320).is_err());
    }

    #[test]
    fn truncation_discards_padding_region() {
        let model = toy_model();
        let fe = Frontend::new(model.frontend).unwrap();
        let x = noise_clip(3200, 2);
        let delta = noise_clip(3200, 3);
        let target = model.alphabet.encode("ab").unwrap();
        let r = 100;
        let padded = pad_with_offset(&x.add(&delta).unwrap(), r, 320).unwrap();
        let (_, full) = waveform_loss_and_grad(&model, &fe, &padded, &target).unwrap();
        let (_, cut) = attack_step_offset(&x, &delta, &target, &model, &fe, r, 320).unwrap();
        assert_eq!(&cut.samples[..], &full.samples[220..220 + 3200]);
        // the padding carries gradient of its own, which must not be folded in
        assert!(full.samples[..220].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn full_offset_equals_tail_padding() {
        let model = toy_model();
        let fe = Frontend::new(model.frontend).unwrap();
        let x = noise_clip(3000, 4);
        let delta = AudioClip::zeros(3000, 16000);
        let target = model.alphabet.encode("c").unwrap();
        let mut tail = x.samples.clone();
        tail.extend(std::iter::repeat_n(0.0, 320));
        let (_, direct) = waveform_loss_and_grad(&model, &fe, &AudioClip::new(tail, 16000), &target).unwrap();
        let (_, ours) = attack_step_offset(&x, &delta, &target, &model, &fe, 320, 320).unwrap();
        assert_eq!(&ours.samples[..], &direct.samples[..3000]);
    }

    #[test]
    fn batch_of_identical_offsets_equals_single() {
        let model = toy_model();
        let fe = Frontend::new(model.frontend).unwrap();
        let x = noise_clip(3200, 5);
        let delta = noise_clip(3200, 6);
        let target = model.alphabet.encode("ab").unwrap();
        let (l1, single) = attack_step_offset(&x, &delta, &target, &model, &fe, 77, 320).unwrap();
        let (l2, pair) = attack_step_offsets(&x, &delta, &target, &model, &fe, &[77, 77], 320).unwrap();
        assert_eq!(l1, l2);
        for (a, b) in single.samples.iter().zip(&pair.samples) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
        }
    }

    #[test]
    fn batch_is_seed_deterministic() {
        let model = toy_model();
        let fe = Frontend::new(model.frontend).unwrap();
        let x = noise_clip(3200, 7);
        let delta = AudioClip::zeros(3200, 16000);
        let target = model.alphabet.encode("ab").unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            attack_step_batch(&x, &delta, &target, &model, &fe, 4, 320, &mut rng).unwrap()
        };
        let a = run(9);
        let b = run(9);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
        assert!(a.2.iter().all(|r| (1..=320).contains(r)));

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (_, g1, rs) = attack_step_batch(&x, &delta, &target, &model, &fe, 1, 320, &mut rng).unwrap();
        let (_, g2) = attack_step_offset(&x, &delta, &target, &model, &fe, rs[0], 320).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn zero_step_keeps_original() {
        let model = toy_model();
        let x = noise_clip(3200, 8);
        let mut job = AttackJob::new(x.clone(), "ab", AttackMode::Baseline);
        job.iterations = 1;
        job.learning_rate = 0.0;
        let res = run_attack(&job, &model).unwrap();
        assert!(res.perturbation.samples.iter().all(|&d| d == 0.0));
        assert_eq!(res.adversarial, x);
        assert_eq!(res.achieved_db, f64::NEG_INFINITY);
        assert_eq!(res.loss_history.len(), 1);
    }

    #[test]
    fn bound_holds_every_iteration() {
        let model = toy_model();
        let x = noise_clip(3840, 9);
        let mut job = AttackJob::new(x.clone(), "ab", AttackMode::OffsetTraining);
        job.iterations = 30;
        job.batch_size = 2;
        job.learning_rate = 100.0;
        job.bound = DistortionBound::new(50.0).unwrap();
        let mut checked = 0;
        let res = run_attack_with(&job, &model, |_, d| {
            assert!(distortion_db(d) <= 50.0 + 1e-9);
            assert_eq!(d.len(), x.len());
            checked += 1;
        })
        .unwrap();
        assert_eq!(checked, 30);
        assert!(res.achieved_db <= 50.0);
        assert_eq!(res.adversarial, x.add(&res.perturbation).unwrap());
    }

    #[test]
    fn pcm_clamp_applies() {
        let model = toy_model();
        let mut x = noise_clip(3200, 10);
        x.samples[5] = 32767.0;
        x.samples[6] = -32768.0;
        let mut job = AttackJob::new(x, "a", AttackMode::Baseline);
        job.iterations = 20;
        job.learning_rate = 200.0;
        let res = run_attack(&job, &model).unwrap();
        assert!(res.adversarial.samples.iter().all(|&s| (-32768.0..=32767.0).contains(&s)));
    }

    #[test]
    fn hop_one_matches_baseline() {
        let model = toy_model();
        // len multiple of 320: one appended zero never completes a new frame
        let x = noise_clip(3200, 11);
        let mut base = AttackJob::new(x.clone(), "ab", AttackMode::Baseline);
        base.iterations = 5;
        let mut off = base.clone();
        off.mode = AttackMode::OffsetTraining;
        off.hop = 1;
        off.batch_size = 3;
        let a = run_attack(&base, &model).unwrap();
        let b = run_attack(&off, &model).unwrap();
        assert_eq!(a.perturbation, b.perturbation);
        for (la, lb) in a.loss_history.iter().zip(&b.loss_history) {
            assert!((la - lb).abs() < 1e-9 * la.abs());
        }
    }

    #[test]
    fn job_validation() {
        let model = toy_model();
        let x = noise_clip(1000, 12);
        let job = AttackJob::new(x.clone(), "abcdef", AttackMode::Baseline);
        assert!(matches!(job.validate(&model), Err(Error::TargetTooLong { .. })));
        let job = AttackJob::new(x.clone(), "", AttackMode::Baseline);
        assert!(job.validate(&model).is_err());
        let job = AttackJob::new(noise_clip(3200, 1), "xyz", AttackMode::Baseline);
        assert!(matches!(job.validate(&model), Err(Error::UnknownCharacter('x'))));
        assert_eq!("offset_training".parse::<AttackMode>().unwrap(), AttackMode::OffsetTraining);
        assert!("fast".parse::<AttackMode>().is_err());
    }
}
