//! Deterministic tones-as-phonemes corpus.
//!
//! Every letter is a fundamental plus two harmonics (amplitudes 1, 0.5,
//! 0.25) under a Hann envelope; a space is a silent segment. Seeded Gaussian
//! noise covers the whole utterance, the peak is scaled to 8000 and samples
//! are rounded to integers so a rendered clip equals its WAV on disk.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{load_wav, save_wav, AudioClip};
use crate::error::{Error, Result};
use crate::model::Utterance;
use crate::seeds::derive_seed;

pub const PEAK_AMPLITUDE: f64 = 8000.0;
const HARMONIC_AMPLITUDES: [f64; 3] = [1.0, 0.5, 0.25];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub seed: u64,
    pub num_utterances: usize,
    pub min_chars: usize,
    pub max_chars: usize,
    /// Samples per character; must be a multiple of the hop size.
    pub char_duration: usize,
    /// Noise standard deviation relative to a unit-amplitude fundamental.
    pub noise_level: f64,
    pub sample_rate: u32,
    /// Letters drawn for random transcripts (space is added separately).
    pub letters: String,
    /// Probability that a position (not first/last, not after a space) is a space.
    pub space_probability: f64,
    pub char_frequencies: BTreeMap<char, f64>,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        let freqs = [300.0, 400.0, 500.0, 630.0, 760.0, 900.0, 1050.0, 1250.0, 1500.0, 1800.0];
        CorpusSpec {
            seed: 1,
            num_utterances: 500,
            min_chars: 3,
            max_chars: 8,
            char_duration: 3200,
            noise_level: 0.01,
            sample_rate: 16_000,
            letters: "abcdefghij".into(),
            space_probability: 0.15,
            char_frequencies: "abcdefghij".chars().zip(freqs).collect(),
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self, hop_size: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let nyquist = self.sample_rate as f64 / 2.0;
        for c in self.letters.chars() {
            match self.char_frequencies.get(&c) {
                None => return bad(format!("character {c:?} has no entry in char_frequencies")),
                Some(&f) if !(f > 100.0 && f < nyquist) => {
                    return bad(format!("frequency {f} Hz for {c:?} is outside (100, {nyquist})"))
                }
                _ => {}
            }
        }
        let mut freqs: Vec<f64> = self.letters.chars().map(|c| self.char_frequencies[&c]).collect();
        freqs.sort_by(f64::total_cmp);
        if freqs.windows(2).any(|w| w[0] == w[1]) {
            return bad("character frequencies must be distinct".into());
        }
        if self.letters.contains(' ') {
            return bad("letters must not contain space".into());
        }
        if hop_size == 0 || self.char_duration == 0 || self.char_duration % hop_size != 0 {
            return bad(format!("char_duration {} is not a positive multiple of hop {hop_size}", self.char_duration));
        }
        if self.min_chars == 0 || self.min_chars > self.max_chars {
            return bad(format!("invalid length range {}..={}", self.min_chars, self.max_chars));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return bad("noise_level must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&self.space_probability) {
            return bad("space_probability must be in [0, 1)".into());
        }
        Ok(())
    }
}

/// Renders `text` as tones. Deterministic in `(text, spec, seed)`.
pub fn render_utterance(text: &str, spec: &CorpusSpec, seed: u64) -> Result<AudioClip> {
    if text.is_empty() {
        return Err(Error::InvalidConfig("cannot render an empty transcript".into()));
    }
    let d = spec.char_duration;
    let sr = spec.sample_rate as f64;
    let mut samples = Vec::with_capacity(d * text.chars().count());
    for c in text.chars() {
        if c == ' ' {
            samples.extend(std::iter::repeat_n(0.0, d));
            continue;
        }
        let f = *spec.char_frequencies.get(&c).ok_or(Error::UnknownCharacter(c))?;
        samples.extend((0..d).map(|n| {
            let env = 0.5 - 0.5 * (2.0 * PI * n as f64 / (d - 1).max(1) as f64).cos();
            let tone: f64 = HARMONIC_AMPLITUDES
                .iter()
                .enumerate()
                .map(|(h, a)| a * (2.0 * PI * (h + 1) as f64 * f * n as f64 / sr).sin())
                .sum();
            env * tone
        }));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in samples.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *s += spec.noise_level * z;
    }
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let scale = if peak > 0.0 { PEAK_AMPLITUDE / peak } else { 0.0 };
    let samples = samples.into_iter().map(|s| (s * scale).round_ties_even()).collect();
    Ok(AudioClip::new(samples, spec.sample_rate))
}

/// Random transcript: no leading, trailing or doubled spaces.
pub fn random_transcript(rng: &mut impl Rng, spec: &CorpusSpec) -> String {
    let letters: Vec<char> = spec.letters.chars().collect();
    let len = rng.random_range(spec.min_chars..=spec.max_chars);
    let mut out = String::with_capacity(len);
    let mut prev_space = true;
    for i in 0..len {
        let last = i + 1 == len;
        if !prev_space && !last && rng.random_bool(spec.space_probability) {
            out.push(' ');
            prev_space = true;
        } else {
            out.push(letters[rng.random_range(0..letters.len())]);
            prev_space = false;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub transcript: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub entries: Vec<ManifestEntry>,
    pub clips: Vec<AudioClip>,
}

impl Corpus {
    fn select(&self, split: Split) -> Vec<Utterance> {
        self.entries
            .iter()
            .zip(&self.clips)
            .filter(|(e, _)| e.split == split)
            .map(|(e, c)| Utterance { audio: c.clone(), transcript: e.transcript.clone() })
            .collect()
    }

    pub fn train_set(&self) -> Vec<Utterance> {
        self.select(Split::Train)
    }

    pub fn heldout_set(&self) -> Vec<Utterance> {
        self.select(Split::Heldout)
    }
}

pub fn heldout_count(n: usize) -> usize {
    (n as f64 * 0.1).round() as usize
}

pub fn generate_corpus(spec: &CorpusSpec, hop_size: usize) -> Result<Corpus> {
    spec.validate(hop_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "corpus.text", 0));
    let transcripts: Vec<String> = (0..spec.num_utterances).map(|_| random_transcript(&mut rng, spec)).collect();
    let clips: Vec<AudioClip> = transcripts
        .par_iter()
        .enumerate()
        .map(|(i, t)| render_utterance(t, spec, derive_seed(spec.seed, "corpus.noise", i as u64)))
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..spec.num_utterances).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "corpus.split", 0));
    order.shuffle(&mut split_rng);
    let mut splits = vec![Split::Train; spec.num_utterances];
    for &i in &order[..heldout_count(spec.num_utterances)] {
        splits[i] = Split::Heldout;
    }
    let entries = transcripts
        .into_iter()
        .zip(splits)
        .enumerate()
        .map(|(i, (transcript, split))| ManifestEntry { path: format!("wavs/utt_{i:04}.wav"), transcript, split })
        .collect();
    Ok(Corpus { entries, clips })
}

pub const MANIFEST_FILE: &str = "manifest.csv";

/// Writes `wavs/*.wav` and `manifest.csv` (columns `path,transcript,split`).
pub fn write_corpus(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("wavs")).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::with_capacity(corpus.clips.len() + 1);
    for (entry, clip) in corpus.entries.iter().zip(&corpus.clips) {
        let path = dir.join(&entry.path);
        save_wav(clip, &path)?;
        written.push(path);
    }
    let manifest = dir.join(MANIFEST_FILE);
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(&manifest)?;
    for entry in &corpus.entries {
        w.serialize(entry)?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    written.push(manifest);
    Ok(written)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|e| e.map_err(Error::from)).collect()
}

pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let entries = read_manifest(dir.join(MANIFEST_FILE))?;
    let clips = entries.iter().map(|e| load_wav(dir.join(&e.path))).collect::<Result<_>>()?;
    Ok(Corpus { entries, clips })
}
