//! Offset sweeps, Levenshtein distance and a simulated playback channel.
//!
//! The channel stands in for playing a clip over the air: a random leading
//! offset, additive Gaussian noise at a fixed SNR and an optional linear-phase
//! band-pass. Edit distances are reported raw, never normalized by the
//! target length.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{prepend_silence, AudioClip, PCM_FULL_SCALE, PCM_MAX};
use crate::error::{Error, Result};
use crate::frontend::Frontend;
use crate::model::AcousticModel;
use crate::seeds::derive_seed;

/// Unit-cost Levenshtein distance over Unicode scalar values.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub target: String,
    pub offsets: Vec<usize>,
    pub distances: Vec<usize>,
    pub decoded: Vec<String>,
}

impl SweepReport {
    pub fn max_distance(&self) -> usize {
        self.distances.iter().copied().max().unwrap_or(0)
    }

    /// Fraction of swept offsets decoded exactly as the target.
    pub fn zero_fraction(&self) -> f64 {
        if self.distances.is_empty() {
            return 0.0;
        }
        self.distances.iter().filter(|&&d| d == 0).count() as f64 / self.distances.len() as f64
    }

    pub fn distance_at(&self, offset: usize) -> Option<usize> {
        self.offsets.iter().position(|&o| o == offset).map(|i| self.distances[i])
    }
}

/// Transcribes `prepend_silence(adv, r)` for `r = 0, step, …, ≤ max_offset`.
pub fn offset_sweep(
    adv: &AudioClip,
    model: &AcousticModel,
    frontend: &Frontend,
    target: &str,
    max_offset: usize,
    step: usize,
) -> Result<SweepReport> {
    if step == 0 {
        return Err(Error::InvalidConfig("sweep step must be at least 1".into()));
    }
    let offsets: Vec<usize> = (0..=max_offset).step_by(step).collect();
    let decoded: Vec<String> = offsets
        .par_iter()
        .map(|&r| model.transcribe(frontend, &prepend_silence(adv, r)))
        .collect::<Result<_>>()?;
    let distances = decoded.iter().map(|d| edit_distance(d, target)).collect();
    Ok(SweepReport { target: target.to_string(), offsets, distances, decoded })
}

// ---------------------------------------------------------------------------
// channel

pub const FIR_TAPS: usize = 255;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelConfig {
    /// Clip-to-noise power ratio; `+inf` disables the noise.
    pub noise_snr_db: f64,
    /// Offsets are drawn uniformly from `0..random_offset_range`.
    pub random_offset_range: usize,
    /// `(low Hz, high Hz)` pass band.
    pub bandpass: Option<(f64, f64)>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            noise_snr_db: 20.0,
            random_offset_range: 800,
            bandpass: Some((100.0, 7500.0)),
            trials: 20,
            seed: 0,
        }
    }
}

impl ChannelConfig {
    /// No noise, no offset, no filter.
    pub fn identity(trials: usize, seed: u64) -> Self {
        ChannelConfig { noise_snr_db: f64::INFINITY, random_offset_range: 1, bandpass: None, trials, seed }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if self.noise_snr_db.is_nan() || self.noise_snr_db == f64::NEG_INFINITY {
            return Err(Error::InvalidConfig(format!("degenerate SNR {}", self.noise_snr_db)));
        }
        if self.trials == 0 || self.random_offset_range == 0 {
            return Err(Error::InvalidConfig("trials and random_offset_range must be at least 1".into()));
        }
        if let Some((lo, hi)) = self.bandpass {
            let nyquist = sample_rate as f64 / 2.0;
            if !(0.0 < lo && lo < hi && hi < nyquist) {
                return Err(Error::InvalidConfig(format!("band-pass needs 0 < {lo} < {hi} < {nyquist}")));
            }
        }
        Ok(())
    }
}

/// Windowed-sinc (Hamming) linear-phase band-pass with `taps` coefficients.
pub fn design_bandpass(low_hz: f64, high_hz: f64, sample_rate: f64, taps: usize) -> Vec<f64> {
    let m = (taps - 1) as f64 / 2.0;
    let (fl, fh) = (low_hz / sample_rate, high_hz / sample_rate);
    let sinc = |x: f64| if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
    (0..taps)
        .map(|n| {
            let k = n as f64 - m;
            let ideal = 2.0 * fh * sinc(2.0 * fh * k) - 2.0 * fl * sinc(2.0 * fl * k);
            let window = 0.54 - 0.46 * (2.0 * PI * n as f64 / (taps - 1) as f64).cos();
            ideal * window
        })
        .collect()
}

/// Convolution compensated for the group delay, so output aligns with input.
pub fn filter_same(x: &[f64], taps: &[f64]) -> Vec<f64> {
    let delay = (taps.len() - 1) / 2;
    (0..x.len())
        .map(|n| {
            taps.iter()
                .enumerate()
                .filter_map(|(k, h)| (n + delay).checked_sub(k).and_then(|i| x.get(i)).map(|v| h * v))
                .sum()
        })
        .collect()
}

fn mean_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTrial {
    pub offset: usize,
    pub clip: AudioClip,
    /// Power of the shifted input over power of (output − shifted input).
    pub snr_db_measured: f64,
}

pub fn simulate_channel(adv: &AudioClip, cfg: &ChannelConfig) -> Result<Vec<ChannelTrial>> {
    cfg.validate(adv.sample_rate)?;
    let taps = cfg.bandpass.map(|(lo, hi)| design_bandpass(lo, hi, adv.sample_rate as f64, FIR_TAPS));
    (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "channel", trial as u64));
            let offset = rng.random_range(0..cfg.random_offset_range);
            let shifted = prepend_silence(adv, offset);
            let mut out = shifted.samples.clone();
            if cfg.noise_snr_db.is_finite() {
                let sigma = (mean_power(&shifted.samples) / 10f64.powf(cfg.noise_snr_db / 10.0)).sqrt();
                for v in out.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v += sigma * z;
                }
            }
            if let Some(t) = &taps {
                out = filter_same(&out, t);
            }
            for v in out.iter_mut() {
                *v = v.clamp(-PCM_FULL_SCALE, PCM_MAX);
            }
            let residual: Vec<f64> = out.iter().zip(&shifted.samples).map(|(o, s)| o - s).collect();
            let snr_db_measured = 10.0 * (mean_power(&shifted.samples) / mean_power(&residual)).log10();
            Ok(ChannelTrial { offset, clip: AudioClip::new(out, adv.sample_rate), snr_db_measured })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRow {
    pub trial: usize,
    pub offset_drawn: usize,
    pub snr_db_measured: f64,
    pub edit_distance: usize,
    pub decoded: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelReport {
    pub target: String,
    pub rows: Vec<ChannelRow>,
}

impl ChannelReport {
    pub fn mean_edit_distance(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.edit_distance as f64).sum::<f64>() / self.rows.len() as f64
    }

    pub fn target_len(&self) -> usize {
        self.target.chars().count()
    }

    /// `mean_edit_distance=<mean> trials=<n> target_len=<chars>`
    pub fn summary_line(&self) -> String {
        format!(
            "mean_edit_distance={:.4} trials={} target_len={}",
            self.mean_edit_distance(),
            self.rows.len(),
            self.target_len()
        )
    }
}

pub fn channel_evaluation(
    adv: &AudioClip,
    model: &AcousticModel,
    frontend: &Frontend,
    target: &str,
    cfg: &ChannelConfig,
) -> Result<ChannelReport> {
    let trials = simulate_channel(adv, cfg)?;
    let rows = trials
        .par_iter()
        .enumerate()
        .map(|(trial, t)| {
            let decoded = model.transcribe(frontend, &t.clip)?;
            Ok(ChannelRow {
                trial,
                offset_drawn: t.offset,
                snr_db_measured: t.snr_db_measured,
                edit_distance: edit_distance(&decoded, target),
                decoded,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ChannelReport { target: target.to_string(), rows })
}

// ---------------------------------------------------------------------------
// CSV reports

pub const SWEEP_HEADER: &str = "offset,edit_distance,decoded";
pub const CHANNEL_HEADER: &str = "trial,offset_drawn,snr_db_measured,edit_distance,decoded";

fn csv_writer(path: &Path, header: &str) -> Result<csv::Writer<std::fs::File>> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "{header}").map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .has_headers(false)
        .quote_style(csv::QuoteStyle::NonNumeric)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file))
}

/// `offset,edit_distance,decoded` with `decoded` always quoted.
pub fn write_sweep_csv(report: &SweepReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path, SWEEP_HEADER)?;
    for ((o, d), s) in report.offsets.iter().zip(&report.distances).zip(&report.decoded) {
        w.write_record([o.to_string(), d.to_string(), s.clone()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sweep_csv(path: impl AsRef<Path>, target: &str) -> Result<SweepReport> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let mut report = SweepReport { target: target.to_string(), offsets: vec![], distances: vec![], decoded: vec![] };
    for row in r.deserialize() {
        let (o, d, s): (usize, usize, String) = row?;
        report.offsets.push(o);
        report.distances.push(d);
        report.decoded.push(s);
    }
    Ok(report)
}

pub fn write_channel_csv(report: &ChannelReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path, CHANNEL_HEADER)?;
    for r in &report.rows {
        w.write_record([
            r.trial.to_string(),
            r.offset_drawn.to_string(),
            format!("{:.6}", r.snr_db_measured),
            r.edit_distance.to_string(),
            r.decoded.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_channel_csv(path: impl AsRef<Path>, target: &str) -> Result<ChannelReport> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let rows = r.deserialize().collect::<std::result::Result<_, _>>()?;
    Ok(ChannelReport { target: target.to_string(), rows })
}
