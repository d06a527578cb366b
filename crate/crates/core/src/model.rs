//! Small CTC recognizer: normalized MFCC → ReLU dense → tanh recurrence → logits.
//!
//! ```text
//! u_k = relu(W_d · (f_k − μ)/σ + b_d)
//! h_k = tanh(W_ih · u_k + W_hh · h_{k−1} + b_h),  h_{−1} = 0
//! z_k = W_o · h_k + b_o
//! ```
//!
//! μ and σ are per-coefficient normalization constants frozen at training
//! time, so attack-time features see exactly the training normalization.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{prepend_silence, AudioClip};
use crate::ctc::{ctc_loss_and_grad, greedy_decode, Alphabet, LogitMatrix};
use crate::error::{Error, Result};
use crate::frontend::{FeatureMatrix, Frontend, FrontendConfig};
use crate::matrix::Matrix;

pub const DEFAULT_HIDDEN_SIZE: usize = 64;

/// Trainable tensors, flattened row-major. Also used for their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub w_dense: Vec<f64>,
    pub b_dense: Vec<f64>,
    pub w_ih: Vec<f64>,
    pub w_hh: Vec<f64>,
    pub b_h: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
}

impl Params {
    fn zeros(inputs: usize, hidden: usize, classes: usize) -> Self {
        Params {
            w_dense: vec![0.0; hidden * inputs],
            b_dense: vec![0.0; hidden],
            w_ih: vec![0.0; hidden * hidden],
            w_hh: vec![0.0; hidden * hidden],
            b_h: vec![0.0; hidden],
            w_out: vec![0.0; classes * hidden],
            b_out: vec![0.0; classes],
        }
    }

    /// Tensors in checkpoint order.
    pub fn tensors(&self) -> [&Vec<f64>; 7] {
        [&self.w_dense, &self.b_dense, &self.w_ih, &self.w_hh, &self.b_h, &self.w_out, &self.b_out]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 7] {
        [
            &mut self.w_dense,
            &mut self.b_dense,
            &mut self.w_ih,
            &mut self.w_hh,
            &mut self.b_h,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.tensors().into_iter().flat_map(|t| t.iter())
    }

    pub fn get(&self, mut index: usize) -> f64 {
        for t in self.tensors() {
            if index < t.len() {
                return t[index];
            }
            index -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn get_mut(&mut self, mut index: usize) -> &mut f64 {
        for t in self.tensors_mut() {
            if index < t.len() {
                return &mut t[index];
            }
            index -= t.len();
        }
        panic!("parameter index out of range");
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcousticModel {
    pub frontend: FrontendConfig,
    pub alphabet: Alphabet,
    pub hidden_size: usize,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
    pub params: Params,
}

/// Activations kept for backpropagation.
struct Trace {
    normalized: Vec<f64>,
    dense_pre: Vec<f64>,
    dense: Vec<f64>,
    hidden: Vec<f64>,
    logits: Matrix,
}

fn matvec(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += W^T · g`.
fn matvec_t(w: &[f64], g: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (gi, row) in g.iter().zip(w.chunks_exact(cols)) {
        if *gi != 0.0 {
            for (o, a) in out.iter_mut().zip(row) {
                *o += gi * a;
            }
        }
    }
}

/// `W += g ⊗ x`.
fn outer_acc(w: &mut [f64], g: &[f64], x: &[f64]) {
    let cols = x.len();
    for (gi, row) in g.iter().zip(w.chunks_exact_mut(cols)) {
        if *gi != 0.0 {
            for (a, xv) in row.iter_mut().zip(x) {
                *a += gi * xv;
            }
        }
    }
}

impl AcousticModel {
    /// Uniform(−0.1, 0.1) parameters from `seed`, identity normalization.
    pub fn init(frontend: FrontendConfig, alphabet: Alphabet, hidden_size: usize, seed: u64) -> Result<Self> {
        frontend.validate()?;
        if hidden_size == 0 {
            return Err(Error::InvalidConfig("hidden_size must be at least 1".into()));
        }
        let inputs = frontend.num_ceps;
        let mut params = Params::zeros(inputs, hidden_size, alphabet.num_classes());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in params.tensors_mut() {
            for v in t.iter_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
        Ok(AcousticModel {
            frontend,
            alphabet,
            hidden_size,
            norm_mean: vec![0.0; inputs],
            norm_std: vec![1.0; inputs],
            params,
        })
    }

    pub fn num_inputs(&self) -> usize {
        self.frontend.num_ceps
    }

    pub fn num_classes(&self) -> usize {
        self.alphabet.num_classes()
    }

    /// Freezes per-coefficient mean and standard deviation over all frames.
    pub fn set_normalization(&mut self, features: &[FeatureMatrix]) -> Result<()> {
        let c = self.num_inputs();
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut n = 0usize;
        for f in features {
            f.expect_shape(f.rows(), c)?;
            for row in f.iter_rows() {
                for j in 0..c {
                    sum[j] += row[j];
                    sq[j] += row[j] * row[j];
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::InvalidConfig("no frames to normalize over".into()));
        }
        for j in 0..c {
            let mean = sum[j] / n as f64;
            let var = (sq[j] / n as f64 - mean * mean).max(0.0);
            self.norm_mean[j] = mean;
            self.norm_std[j] = var.sqrt().max(1e-6);
        }
        Ok(())
    }

    fn check_features(&self, features: &FeatureMatrix) -> Result<()> {
        features.expect_shape(features.rows(), self.num_inputs())
    }

    fn trace(&self, features: &FeatureMatrix) -> Result<Trace> {
        self.check_features(features)?;
        let (t_len, c, h) = (features.rows(), self.num_inputs(), self.hidden_size);
        let p = &self.params;
        let mut normalized = vec![0.0; t_len * c];
        let mut dense_pre = vec![0.0; t_len * h];
        let mut dense = vec![0.0; t_len * h];
        let mut hidden = vec![0.0; t_len * h];
        let mut logits = Matrix::zeros(t_len, self.num_classes());
        let zero_state = vec![0.0; h];
        for t in 0..t_len {
            let x = &mut normalized[t * c..(t + 1) * c];
            for (j, v) in x.iter_mut().enumerate() {
                *v = (features.get(t, j) - self.norm_mean[j]) / self.norm_std[j];
            }
            let a = &mut dense_pre[t * h..(t + 1) * h];
            a.copy_from_slice(&p.b_dense);
            matvec(&p.w_dense, &normalized[t * c..(t + 1) * c], a);
            let u = &mut dense[t * h..(t + 1) * h];
            for (uv, av) in u.iter_mut().zip(&dense_pre[t * h..(t + 1) * h]) {
                *uv = av.max(0.0);
            }
            let mut pre = p.b_h.clone();
            matvec(&p.w_ih, &dense[t * h..(t + 1) * h], &mut pre);
            let prev = if t == 0 { &zero_state[..] } else { &hidden[(t - 1) * h..t * h] };
            matvec(&p.w_hh, prev, &mut pre);
            for (hv, pv) in hidden[t * h..(t + 1) * h].iter_mut().zip(&pre) {
                *hv = pv.tanh();
            }
            let z = logits.row_mut(t);
            z.copy_from_slice(&p.b_out);
            matvec(&p.w_out, &hidden[t * h..(t + 1) * h], z);
        }
        Ok(Trace { normalized, dense_pre, dense, hidden, logits })
    }

    pub fn forward(&self, features: &FeatureMatrix) -> Result<LogitMatrix> {
        Ok(self.trace(features)?.logits)
    }

    /// Input and parameter gradients of `<upstream, forward(features)>`.
    pub fn backward(&self, features: &FeatureMatrix, upstream: &LogitMatrix) -> Result<(FeatureMatrix, Params)> {
        let trace = self.trace(features)?;
        Ok(self.backward_from_trace(&trace, upstream))
    }

    fn backward_from_trace(&self, trace: &Trace, upstream: &LogitMatrix) -> (FeatureMatrix, Params) {
        let (t_len, c, h) = (trace.logits.rows(), self.num_inputs(), self.hidden_size);
        let p = &self.params;
        let mut grads = Params::zeros(c, h, self.num_classes());
        let mut g_features = Matrix::zeros(t_len, c);
        let mut g_next = vec![0.0; h];
        for t in (0..t_len).rev() {
            let gz = upstream.row(t);
            let h_t = &trace.hidden[t * h..(t + 1) * h];
            outer_acc(&mut grads.w_out, gz, h_t);
            for (b, g) in grads.b_out.iter_mut().zip(gz) {
                *b += g;
            }
            let mut gh = g_next.clone();
            matvec_t(&p.w_out, gz, &mut gh);
            let g_pre: Vec<f64> = gh.iter().zip(h_t).map(|(g, hv)| g * (1.0 - hv * hv)).collect();

            outer_acc(&mut grads.w_ih, &g_pre, &trace.dense[t * h..(t + 1) * h]);
            if t > 0 {
                outer_acc(&mut grads.w_hh, &g_pre, &trace.hidden[(t - 1) * h..t * h]);
            }
            for (b, g) in grads.b_h.iter_mut().zip(&g_pre) {
                *b += g;
            }
            g_next = vec![0.0; h];
            matvec_t(&p.w_hh, &g_pre, &mut g_next);

            let mut gu = vec![0.0; h];
            matvec_t(&p.w_ih, &g_pre, &mut gu);
            for (g, a) in gu.iter_mut().zip(&trace.dense_pre[t * h..(t + 1) * h]) {
                if *a <= 0.0 {
                    *g = 0.0;
                }
            }
            outer_acc(&mut grads.w_dense, &gu, &trace.normalized[t * c..(t + 1) * c]);
            for (b, g) in grads.b_dense.iter_mut().zip(&gu) {
                *b += g;
            }
            let gx = g_features.row_mut(t);
            matvec_t(&p.w_dense, &gu, gx);
            for (g, s) in gx.iter_mut().zip(&self.norm_std) {
                *g /= s;
            }
        }
        (g_features, grads)
    }

    pub fn backward_to_input(&self, features: &FeatureMatrix, upstream: &LogitMatrix) -> Result<FeatureMatrix> {
        let trace = self.trace(features)?;
        upstream.expect_shape(features.rows(), self.num_classes())?;
        Ok(self.backward_from_trace(&trace, upstream).0)
    }

    pub fn backward_to_params(&self, features: &FeatureMatrix, upstream: &LogitMatrix) -> Result<Params> {
        let trace = self.trace(features)?;
        upstream.expect_shape(features.rows(), self.num_classes())?;
        Ok(self.backward_from_trace(&trace, upstream).1)
    }

    /// CTC loss of `target` and its parameter gradient for one feature sequence.
    pub fn loss_and_param_grad(&self, features: &FeatureMatrix, target: &[usize]) -> Result<(f64, Params)> {
        let trace = self.trace(features)?;
        let (loss, g_logits) = ctc_loss_and_grad(&trace.logits, target, &self.alphabet)?;
        Ok((loss, self.backward_from_trace(&trace, &g_logits).1))
    }

    pub fn transcribe(&self, frontend: &Frontend, clip: &AudioClip) -> Result<String> {
        let feats = frontend.mfcc(clip)?;
        Ok(greedy_decode(&self.forward(&feats)?, &self.alphabet))
    }
}

// ---------------------------------------------------------------------------
// checkpoint

const CHECKPOINT_MAGIC: &[u8; 8] = b"ADVOFFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

impl AcousticModel {
    /// Layout (all little-endian):
    ///
    /// ```text
    /// magic "ADVOFFCK" | version u32
    /// frame_length u32 | hop_size u32 | sample_rate u32 | num_mel_filters u32 | num_ceps u32 | log_floor f64
    /// hidden_size u32 | symbol count u32 | symbols as u32 code points
    /// value count u64
    /// f64 values: norm_mean, norm_std, w_dense, b_dense, w_ih, w_hh, b_h, w_out, b_out
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let fe = &self.frontend;
        for v in [fe.frame_length, fe.hop_size, fe.sample_rate as usize, fe.num_mel_filters, fe.num_ceps] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&fe.log_floor.to_le_bytes());
        out.extend_from_slice(&(self.hidden_size as u32).to_le_bytes());
        let symbols = self.alphabet.symbols();
        out.extend_from_slice(&(symbols.len() as u32).to_le_bytes());
        for &c in symbols {
            out.extend_from_slice(&(c as u32).to_le_bytes());
        }
        let count = self.norm_mean.len() + self.norm_std.len() + self.params.len();
        out.extend_from_slice(&(count as u64).to_le_bytes());
        for v in self.norm_mean.iter().chain(&self.norm_std).chain(self.params.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_field = |r: &mut &[u8]| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
            Ok(u32::from_le_bytes(b))
        };
        let version = u32_field(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version mismatch: file has {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let frame_length = u32_field(&mut r)? as usize;
        let hop_size = u32_field(&mut r)? as usize;
        let sample_rate = u32_field(&mut r)?;
        let num_mel_filters = u32_field(&mut r)? as usize;
        let num_ceps = u32_field(&mut r)? as usize;
        let read_f64 = |r: &mut &[u8]| -> Result<f64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| bad("truncated values"))?;
            Ok(f64::from_le_bytes(b))
        };
        let log_floor = read_f64(&mut r)?;
        let frontend = FrontendConfig { frame_length, hop_size, sample_rate, num_mel_filters, num_ceps, log_floor };
        frontend.validate()?;
        let hidden_size = u32_field(&mut r)? as usize;
        let n_symbols = u32_field(&mut r)? as usize;
        let mut symbols = Vec::with_capacity(n_symbols);
        for _ in 0..n_symbols {
            let code = u32_field(&mut r)?;
            symbols.push(char::from_u32(code).ok_or_else(|| bad("invalid symbol"))?);
        }
        let alphabet = Alphabet::new(symbols)?;
        let mut model = AcousticModel::init(frontend, alphabet, hidden_size, 0)?;
        let mut count_bytes = [0u8; 8];
        r.read_exact(&mut count_bytes).map_err(|_| bad("truncated header"))?;
        let expected = 2 * num_ceps + model.params.len();
        if u64::from_le_bytes(count_bytes) != expected as u64 {
            return Err(bad("value count does not match hyperparameters"));
        }
        for v in model.norm_mean.iter_mut().chain(model.norm_std.iter_mut()) {
            *v = read_f64(&mut r)?;
        }
        for t in model.params.tensors_mut() {
            for v in t.iter_mut() {
                *v = read_f64(&mut r)?;
            }
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        if !model.params.is_finite() {
            return Err(bad("non-finite parameter"));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        AcousticModel::from_bytes(&bytes)
    }
}

// ---------------------------------------------------------------------------
// training

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling per step; 0 disables clipping.
    pub clip_norm: f64,
    /// Each epoch every training clip gets `uniform{0..=n}` samples of leading silence.
    pub max_silence_offset: usize,
    /// Each epoch every training clip also gets white noise at an SNR drawn
    /// uniformly from this range; `None` trains on the clean clips.
    pub noise_snr_db: Option<(f64, f64)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            epochs: 40,
            batch_size: 4,
            seed: 42,
            clip_norm: 20.0,
            max_silence_offset: 800,
            noise_snr_db: Some((15.0, 45.0)),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) || self.batch_size == 0 {
            return Err(Error::InvalidConfig(format!(
                "need learning_rate >= 0 and batch_size >= 1, got {} / {}",
                self.learning_rate, self.batch_size
            )));
        }
        if let Some((lo, hi)) = self.noise_snr_db {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidConfig(format!("noise_snr_db range ({lo}, {hi}) is not a finite interval")));
            }
        }
        if self.clip_norm < 0.0 {
            return Err(Error::InvalidConfig("clip_norm must be non-negative".into()));
        }
        Ok(())
    }
}

/// One labelled training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub audio: AudioClip,
    pub transcript: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Summed CTC loss averaged over training utterances.
    pub train_loss: f64,
    pub heldout_exact_match: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: AcousticModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
}

/// Adds white Gaussian noise with `mean power / snr` variance; a no-op for infinite SNR.
fn add_noise(samples: &mut [f64], snr_db: f64, seed: u64) {
    if !snr_db.is_finite() || samples.is_empty() {
        return;
    }
    let power = samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64;
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in samples.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += sigma * z;
    }
}

/// Fraction of `set` transcribed exactly.
pub fn exact_match_rate(model: &AcousticModel, frontend: &Frontend, set: &[Utterance]) -> Result<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let hits: Vec<bool> = set
        .par_iter()
        .map(|u| Ok(model.transcribe(frontend, &u.audio)? == u.transcript))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / set.len() as f64)
}

/// Summed parameter gradient over a batch; per-utterance work may run in
/// parallel but the reduction is in batch order.
pub fn batch_param_grad(model: &AcousticModel, batch: &[(FeatureMatrix, Vec<usize>)]) -> Result<(f64, Params)> {
    let parts: Vec<(f64, Params)> = batch
        .par_iter()
        .map(|(f, t)| model.loss_and_param_grad(f, t))
        .collect::<Result<_>>()?;
    let mut total = Params::zeros(model.num_inputs(), model.hidden_size, model.num_classes());
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add_scaled(g, 1.0);
    }
    Ok((loss, total))
}

/// Plain SGD with a fixed learning rate on the summed CTC loss. Returns the
/// parameters of the epoch with the best held-out exact-match rate (the
/// initial model if `epochs == 0`).
pub fn train(
    model: &AcousticModel,
    train_set: &[Utterance],
    heldout: &[Utterance],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let frontend = Frontend::new(model.frontend)?;
    let targets: Vec<Vec<usize>> =
        train_set.iter().map(|u| model.alphabet.encode(&u.transcript)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut current = model.clone();
    let mut best = model.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut best_epoch = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        let draws: Vec<(usize, f64, u64)> = (0..train_set.len())
            .map(|_| {
                let r = rng.random_range(0..=cfg.max_silence_offset);
                let snr = cfg.noise_snr_db.map_or(f64::INFINITY, |(lo, hi)| rng.random_range(lo..=hi));
                (r, snr, rng.random())
            })
            .collect();
        let features: Vec<FeatureMatrix> = train_set
            .par_iter()
            .zip(&draws)
            .map(|(u, &(r, snr, noise_seed))| {
                let mut clip = prepend_silence(&u.audio, r);
                add_noise(&mut clip.samples, snr, noise_seed);
                frontend.mfcc(&clip)
            })
            .collect::<Result<_>>()?;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(FeatureMatrix, Vec<usize>)> =
                chunk.iter().map(|&i| (features[i].clone(), targets[i].clone())).collect();
            let (loss, mut grad) = batch_param_grad(&current, &batch)?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            epoch_loss += loss;
            let norm = grad.norm();
            if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
                let s = cfg.clip_norm / norm;
                for t in grad.tensors_mut() {
                    t.iter_mut().for_each(|v| *v *= s);
                }
            }
            current.params.add_scaled(&grad, -cfg.learning_rate);
        }
        let score = exact_match_rate(&current, &frontend, heldout)?;
        log.push(EpochLog {
            epoch,
            train_loss: epoch_loss / train_set.len().max(1) as f64,
            heldout_exact_match: score,
        });
        if score >= best_score {
            best_score = score;
            best = current.clone();
            best_epoch = Some(epoch);
        }
    }
    if cfg.epochs == 0 {
        best = current;
    }
    Ok(TrainOutcome { model: best, log, best_epoch })
}
