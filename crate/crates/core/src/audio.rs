//! Waveforms, 16-bit PCM WAV I/O, silence padding and the peak-to-peak dB metric.
//!
//! Samples are kept at raw PCM integer scale (roughly ±32768) rather than
//! normalized to ±1, so a perturbation spanning ±1000 measures 66.02 dB.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Magnitude of the most negative 16-bit PCM value.
pub const PCM_FULL_SCALE: f64 = 32768.0;
/// Largest storable positive 16-bit PCM value.
pub const PCM_MAX: f64 = 32767.0;
/// Reference sample rate of the whole pipeline.
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

const WAVE_FORMAT_PCM: u16 = 1;
const WAVE_FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// A mono waveform at PCM scale.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        debug_assert!(sample_rate > 0);
        AudioClip { samples, sample_rate }
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        AudioClip::new(vec![0.0; len], sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Elementwise sum of two clips of identical length and rate.
    pub fn add(&self, other: &AudioClip) -> Result<AudioClip> {
        if self.len() != other.len() || self.sample_rate != other.sample_rate {
            return Err(Error::ShapeMismatch {
                expected: format!("{} samples @ {} Hz", self.len(), self.sample_rate),
                got: format!("{} samples @ {} Hz", other.len(), other.sample_rate),
            });
        }
        let samples = self.samples.iter().zip(&other.samples).map(|(a, b)| a + b).collect();
        Ok(AudioClip::new(samples, self.sample_rate))
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }
}

/// Decibel ceiling for a perturbation, measured with [`distortion_db`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistortionBound {
    pub max_db: f64,
}

impl DistortionBound {
    /// The 66.02 dB limit, i.e. a ±1000 PCM range.
    pub const REFERENCE: DistortionBound = DistortionBound { max_db: 66.02 };

    pub fn new(max_db: f64) -> Result<Self> {
        if !max_db.is_finite() {
            return Err(Error::InvalidConfig(format!("max_db must be finite, got {max_db}")));
        }
        Ok(DistortionBound { max_db })
    }

    /// Half-width of the symmetric amplitude box whose peak-to-peak span
    /// measures exactly `max_db`.
    pub fn amplitude(&self) -> f64 {
        10f64.powf(self.max_db / 20.0) / 2.0
    }
}

/// Peak-to-peak level of `delta` in dB: `20·log10(max − min)`.
///
/// An all-zero (or empty) delta has no defined level and yields
/// `f64::NEG_INFINITY`.
pub fn distortion_db(delta: &AudioClip) -> f64 {
    let (lo, hi) = delta
        .samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    let span = hi - lo;
    if delta.is_empty() || span <= 0.0 {
        return f64::NEG_INFINITY;
    }
    20.0 * span.log10()
}

/// `zeros(total − r) ‖ x ‖ zeros(r)`.
pub fn pad_with_offset(x: &AudioClip, r: usize, total: usize) -> Result<AudioClip> {
    if r < 1 || r > total {
        return Err(Error::OffsetOutOfRange { r, total });
    }
    let mut samples = Vec::with_capacity(x.len() + total);
    samples.resize(total - r, 0.0);
    samples.extend_from_slice(&x.samples);
    samples.resize(x.len() + total, 0.0);
    Ok(AudioClip::new(samples, x.sample_rate))
}

/// `zeros(r) ‖ x`.
pub fn prepend_silence(x: &AudioClip, r: usize) -> AudioClip {
    let mut samples = Vec::with_capacity(x.len() + r);
    samples.resize(r, 0.0);
    samples.extend_from_slice(&x.samples);
    AudioClip::new(samples, x.sample_rate)
}

/// Number of samples of propagation delay over `distance_m` metres.
pub fn samples_per_distance(distance_m: f64, sample_rate: f64, speed_of_sound: f64) -> f64 {
    distance_m / (speed_of_sound / sample_rate)
}

/// Reads a mono 16-bit PCM RIFF/WAVE file. Samples keep their integer values.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes)
}

/// Writes a mono 16-bit PCM WAV. Samples are rounded half-to-even and must
/// land in `[-32768, 32767]`; nothing is clipped.
pub fn save_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_wav(clip)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_wav(clip: &AudioClip) -> Result<Vec<u8>> {
    let pcm = to_pcm16(clip)?;
    let data_len = (pcm.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + pcm.len() * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&WAVE_FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in pcm {
        out.extend_from_slice(&s.to_le_bytes());
    }
    Ok(out)
}

fn to_pcm16(clip: &AudioClip) -> Result<Vec<i16>> {
    clip.samples
        .iter()
        .enumerate()
        .map(|(index, &value)| {
            let rounded = value.round_ties_even();
            if !(-PCM_FULL_SCALE..=PCM_MAX).contains(&rounded) {
                return Err(Error::SampleOutOfRange { index, value });
            }
            Ok(rounded as i16)
        })
        .collect()
}

struct FmtChunk {
    format: u16,
    channels: u16,
    sample_rate: u32,
    bits_per_sample: u16,
}

pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::NotWave("missing RIFF/WAVE header".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<FmtChunk> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::NotWave(format!("chunk {:?} overruns file", String::from_utf8_lossy(id))))?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::NotWave("fmt chunk too short".into()));
                }
                let u16_at = |o: usize| u16::from_le_bytes([body[o], body[o + 1]]);
                fmt = Some(FmtChunk {
                    format: u16_at(0),
                    channels: u16_at(2),
                    sample_rate: u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    bits_per_sample: u16_at(14),
                });
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word aligned
        pos = body_end + (size & 1);
    }

    let fmt = fmt.ok_or_else(|| Error::NotWave("no fmt chunk".into()))?;
    match fmt.format {
        WAVE_FORMAT_PCM => {}
        WAVE_FORMAT_EXTENSIBLE => {
            return Err(Error::UnsupportedEncoding("WAVE_FORMAT_EXTENSIBLE header".into()))
        }
        other => return Err(Error::UnsupportedEncoding(format!("format tag {other:#06x}"))),
    }
    if fmt.channels != 1 {
        return Err(Error::UnsupportedChannels(fmt.channels));
    }
    if fmt.bits_per_sample != 16 {
        return Err(Error::UnsupportedBitDepth(fmt.bits_per_sample));
    }
    if fmt.sample_rate == 0 {
        return Err(Error::NotWave("zero sample rate".into()));
    }
    let data = data.ok_or_else(|| Error::NotWave("no data chunk".into()))?;
    let samples = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64)
        .collect();
    Ok(AudioClip::new(samples, fmt.sample_rate))
}
