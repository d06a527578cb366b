//! Differentiable MFCC front-end.
//!
//! Each frame goes through: periodic Hann window, real FFT magnitude,
//! triangular mel filterbank, `ln(energy + log_floor)`, orthonormal DCT-II.
//! The binning into hop-sized buckets is what makes a recognizer sensitive
//! to sub-hop offsets, so `hop_size` is configurable (320 at 16 kHz gives
//! 50 buckets per second).
//!
//! [`Frontend::vjp`] is the exact adjoint of [`Frontend::mfcc`] and carries
//! feature gradients back to raw samples.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub type FeatureMatrix = Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub frame_length: usize,
    pub hop_size: usize,
    pub sample_rate: u32,
    pub num_mel_filters: usize,
    pub num_ceps: usize,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            frame_length: 640,
            hop_size: 320,
            sample_rate: 16_000,
            num_mel_filters: 26,
            num_ceps: 13,
            log_floor: 1e-6,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive".into());
        }
        if self.hop_size == 0 || self.frame_length < self.hop_size {
            return bad(format!(
                "need 0 < hop_size <= frame_length, got hop {} frame {}",
                self.hop_size, self.frame_length
            ));
        }
        if self.num_ceps == 0
            || self.num_ceps > self.num_mel_filters
            || self.num_mel_filters > self.frame_length / 2 + 1
        {
            return bad(format!(
                "need 0 < num_ceps <= num_mel_filters <= frame_length/2+1, got {} / {} / {}",
                self.num_ceps,
                self.num_mel_filters,
                self.frame_length / 2 + 1
            ));
        }
        if !(self.log_floor > 0.0 && self.log_floor.is_finite()) {
            return bad(format!("log_floor must be positive, got {}", self.log_floor));
        }
        Ok(())
    }

    /// Number of complete frames in a clip of `len` samples (0 if shorter than a frame).
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.frame_length {
            0
        } else {
            (len - self.frame_length) / self.hop_size + 1
        }
    }

    fn num_bins(&self) -> usize {
        self.frame_length / 2 + 1
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// One triangular filter stored sparsely from `start_bin`.
#[derive(Debug, Clone)]
struct MelFilter {
    start_bin: usize,
    weights: Vec<f64>,
}

/// Precomputed window, FFT plans, filterbank and DCT for one configuration.
#[derive(Clone)]
pub struct Frontend {
    cfg: FrontendConfig,
    window: Vec<f64>,
    forward_fft: Arc<dyn Fft<f64>>,
    inverse_fft: Arc<dyn Fft<f64>>,
    filters: Vec<MelFilter>,
    /// num_ceps x num_mel_filters, row-major.
    dct: Vec<f64>,
}

impl std::fmt::Debug for Frontend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Frontend").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

/// Intermediate values of one frame kept for the backward pass.
struct FrameTrace {
    spectrum: Vec<Complex64>,
    magnitude: Vec<f64>,
    energies: Vec<f64>,
}

impl Frontend {
    pub fn new(cfg: FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.frame_length;
        let window = (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect();
        let mut planner = FftPlanner::new();
        let forward_fft = planner.plan_fft_forward(n);
        let inverse_fft = planner.plan_fft_inverse(n);
        let filters = build_filterbank(&cfg);
        let dct = build_dct(cfg.num_ceps, cfg.num_mel_filters);
        Ok(Frontend { cfg, window, forward_fft, inverse_fft, filters, dct })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    /// Splits `x` into overlapping frames; the trailing partial frame is dropped.
    pub fn frame_signal<'a>(&self, x: &'a AudioClip) -> Result<Vec<&'a [f64]>> {
        let frames = self.check_len(x.len())?;
        let (fl, hop) = (self.cfg.frame_length, self.cfg.hop_size);
        Ok((0..frames).map(|k| &x.samples[k * hop..k * hop + fl]).collect())
    }

    fn check_len(&self, len: usize) -> Result<usize> {
        match self.cfg.frame_count(len) {
            0 => Err(Error::ClipTooShort { len, frame_length: self.cfg.frame_length }),
            n => Ok(n),
        }
    }

    fn spectrum(&self, frame: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> =
            frame.iter().zip(&self.window).map(|(s, w)| Complex64::new(s * w, 0.0)).collect();
        self.forward_fft.process(&mut buf);
        buf.truncate(self.cfg.num_bins());
        buf
    }

    fn filter_energies(&self, magnitude: &[f64]) -> Vec<f64> {
        self.filters
            .iter()
            .map(|f| {
                f.weights.iter().zip(&magnitude[f.start_bin..]).map(|(w, m)| w * m).sum()
            })
            .collect()
    }

    fn trace_frame(&self, frame: &[f64]) -> FrameTrace {
        let spectrum = self.spectrum(frame);
        let magnitude: Vec<f64> = spectrum.iter().map(|c| c.norm()).collect();
        let energies = self.filter_energies(&magnitude);
        FrameTrace { spectrum, magnitude, energies }
    }

    /// Mel filterbank energies (before the log) of a single frame.
    pub fn mel_energies(&self, frame: &[f64]) -> Vec<f64> {
        self.trace_frame(frame).energies
    }

    fn cepstrum(&self, energies: &[f64], out: &mut [f64]) {
        let m = self.cfg.num_mel_filters;
        let logs: Vec<f64> = energies.iter().map(|e| (e + self.cfg.log_floor).ln()).collect();
        for (q, o) in out.iter_mut().enumerate() {
            *o = self.dct[q * m..(q + 1) * m].iter().zip(&logs).map(|(d, l)| d * l).sum();
        }
    }

    pub fn mfcc(&self, x: &AudioClip) -> Result<FeatureMatrix> {
        let frames = self.frame_signal(x)?;
        let rows: Vec<Vec<f64>> = frames
            .par_iter()
            .map(|frame| {
                let mut row = vec![0.0; self.cfg.num_ceps];
                self.cepstrum(&self.trace_frame(frame).energies, &mut row);
                row
            })
            .collect();
        Matrix::from_rows(&rows)
    }

    /// Vector-Jacobian product `d<upstream, mfcc(x)>/dx`.
    pub fn vjp(&self, x: &AudioClip, upstream: &FeatureMatrix) -> Result<AudioClip> {
        let frames = self.frame_signal(x)?;
        upstream.expect_shape(frames.len(), self.cfg.num_ceps)?;
        let per_frame: Vec<Vec<f64>> = frames
            .par_iter()
            .enumerate()
            .map(|(k, frame)| self.frame_vjp(frame, upstream.row(k)))
            .collect();
        let mut grad = vec![0.0; x.len()];
        let hop = self.cfg.hop_size;
        // fixed frame order keeps overlapping sums deterministic
        for (k, g) in per_frame.iter().enumerate() {
            for (dst, src) in grad[k * hop..].iter_mut().zip(g) {
                *dst += src;
            }
        }
        Ok(AudioClip::new(grad, x.sample_rate))
    }

    fn frame_vjp(&self, frame: &[f64], upstream: &[f64]) -> Vec<f64> {
        let m = self.cfg.num_mel_filters;
        let n = self.cfg.frame_length;
        let trace = self.trace_frame(frame);

        // DCT^T, then d ln(e + floor)
        let mut g_energy = vec![0.0; m];
        for (q, &u) in upstream.iter().enumerate() {
            for (g, d) in g_energy.iter_mut().zip(&self.dct[q * m..(q + 1) * m]) {
                *g += d * u;
            }
        }
        for (g, e) in g_energy.iter_mut().zip(&trace.energies) {
            *g /= e + self.cfg.log_floor;
        }

        let mut g_mag = vec![0.0; self.cfg.num_bins()];
        for (f, filter) in self.filters.iter().enumerate() {
            for (gm, w) in g_mag[filter.start_bin..].iter_mut().zip(&filter.weights) {
                *gm += w * g_energy[f];
            }
        }

        // |X| -> X, using the zero subgradient where |X| = 0
        let mut g_spec = vec![Complex64::new(0.0, 0.0); n];
        for (j, ((gm, mag), spec)) in g_mag.iter().zip(&trace.magnitude).zip(&trace.spectrum).enumerate() {
            if *mag > 0.0 {
                g_spec[j] = spec * (gm / mag);
            }
        }
        // Re X_j = sum s cos, Im X_j = -sum s sin  =>  g_s = Re(sum_j G_j e^{+i theta})
        self.inverse_fft.process(&mut g_spec);
        g_spec.iter().zip(&self.window).map(|(c, w)| c.re * w).collect()
    }

    /// `mfcc(a) − mfcc(b)` over their common leading frames.
    pub fn mfcc_difference(&self, a: &AudioClip, b: &AudioClip) -> Result<FeatureMatrix> {
        let fa = self.mfcc(a)?;
        let fb = self.mfcc(b)?;
        let rows = fa.rows().min(fb.rows());
        let cols = fa.cols();
        let data = fa.as_slice()[..rows * cols]
            .iter()
            .zip(&fb.as_slice()[..rows * cols])
            .map(|(x, y)| x - y)
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}

fn build_filterbank(cfg: &FrontendConfig) -> Vec<MelFilter> {
    let m = cfg.num_mel_filters;
    let nyquist = cfg.sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..m + 2).map(|i| mel_to_hz(mel_max * i as f64 / (m + 1) as f64)).collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.frame_length as f64;
    let num_bins = cfg.num_bins();

    (0..m)
        .map(|f| {
            let (lo, center, hi) = (edges[f], edges[f + 1], edges[f + 2]);
            let mut start_bin = None;
            let mut weights = Vec::new();
            for bin in 0..num_bins {
                let hz = bin as f64 * bin_hz;
                let w = if hz > lo && hz <= center {
                    (hz - lo) / (center - lo)
                } else if hz > center && hz < hi {
                    (hi - hz) / (hi - center)
                } else {
                    0.0
                };
                if w > 0.0 {
                    let start = *start_bin.get_or_insert(bin);
                    weights.resize(bin - start, 0.0);
                    weights.push(w);
                }
            }
            // a filter narrower than one bin still gets its nearest bin
            let start_bin = start_bin.unwrap_or_else(|| {
                weights.push(1.0);
                ((center / bin_hz).round() as usize).min(num_bins - 1)
            });
            MelFilter { start_bin, weights }
        })
        .collect()
}

fn build_dct(num_ceps: usize, m: usize) -> Vec<f64> {
    let mut dct = Vec::with_capacity(num_ceps * m);
    for q in 0..num_ceps {
        let scale = if q == 0 { (1.0 / m as f64).sqrt() } else { (2.0 / m as f64).sqrt() };
        for f in 0..m {
            dct.push(scale * (PI * q as f64 * (2 * f + 1) as f64 / (2 * m) as f64).cos());
        }
    }
    dct
}

/// Center frequencies (Hz) of the mel filters, lowest first.
pub fn mel_center_frequencies(cfg: &FrontendConfig) -> Vec<f64> {
    let m = cfg.num_mel_filters;
    let mel_max = hz_to_mel(cfg.sample_rate as f64 / 2.0);
    (1..=m).map(|i| mel_to_hz(mel_max * i as f64 / (m + 1) as f64)).collect()
}

pub fn frame_signal<'a>(x: &'a AudioClip, cfg: &FrontendConfig) -> Result<Vec<&'a [f64]>> {
    Frontend::new(*cfg)?.frame_signal(x)
}

pub fn mfcc(x: &AudioClip, cfg: &FrontendConfig) -> Result<FeatureMatrix> {
    Frontend::new(*cfg)?.mfcc(x)
}

pub fn mfcc_vjp(x: &AudioClip, cfg: &FrontendConfig, upstream: &FeatureMatrix) -> Result<AudioClip> {
    Frontend::new(*cfg)?.vjp(x, upstream)
}

pub fn mfcc_difference(a: &AudioClip, b: &AudioClip, cfg: &FrontendConfig) -> Result<FeatureMatrix> {
    Frontend::new(*cfg)?.mfcc_difference(a, b)
}

/// Formats `v` with at most 9 significant digits.
pub(crate) fn format_sig9(v: f64) -> String {
    let rounded: f64 = format!("{v:.8e}").parse().unwrap_or(v);
    format!("{rounded}")
}

/// CSV text of a feature grid: one line per frame, 9 significant digits.
pub fn features_to_csv(features: &FeatureMatrix) -> String {
    let mut out = String::new();
    for row in features.iter_rows() {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", format_sig9(*v));
        }
        out.push('\n');
    }
    out
}

pub fn write_features_csv(features: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(features_to_csv(features).as_bytes()).map_err(|e| Error::io(path, e))
}
