//! CTC loss via the log-space forward-backward recursion, its gradient with
//! respect to per-frame logits, and greedy best-path decoding.
//!
//! The loss is summed over the utterance, never averaged.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub type LogitMatrix = Matrix;

/// Output symbols plus a trailing blank (`blank_index == symbols.len()`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<char>,
}

impl Default for Alphabet {
    /// `a`..`j` and space.
    fn default() -> Self {
        Alphabet::new("abcdefghij ".chars().collect()).expect("default alphabet is valid")
    }
}

impl Alphabet {
    pub fn new(symbols: Vec<char>) -> Result<Self> {
        for (i, c) in symbols.iter().enumerate() {
            if symbols[..i].contains(c) {
                return Err(Error::InvalidConfig(format!("duplicate alphabet symbol {c:?}")));
            }
        }
        if symbols.is_empty() {
            return Err(Error::InvalidConfig("alphabet needs at least one symbol".into()));
        }
        Ok(Alphabet { symbols })
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn blank_index(&self) -> usize {
        self.symbols.len()
    }

    /// Symbols plus blank.
    pub fn num_classes(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| self.symbols.iter().position(|&s| s == c).ok_or(Error::UnknownCharacter(c)))
            .collect()
    }

    pub fn decode(&self, indices: &[usize]) -> String {
        indices.iter().filter_map(|&i| self.symbols.get(i)).collect()
    }
}

/// Frames needed to emit `target`: one per symbol plus a blank between repeats.
pub fn required_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

struct Lattice {
    /// blank-augmented target, length 2U+1
    labels: Vec<usize>,
    log_probs: Matrix,
    alpha: Matrix,
    log_likelihood: f64,
}

impl Lattice {
    fn can_skip(&self, s: usize) -> bool {
        // transition (s-2) -> s
        s >= 2 && self.labels[s] != self.labels[s - 2]
    }
}

fn validate(logits: &LogitMatrix, target: &[usize], alphabet: &Alphabet) -> Result<()> {
    logits.expect_shape(logits.rows(), alphabet.num_classes())?;
    if logits.rows() == 0 {
        return Err(Error::ShapeMismatch { expected: "at least one frame".into(), got: "0 frames".into() });
    }
    if target.is_empty() {
        return Err(Error::EmptyTarget);
    }
    if let Some(&bad) = target.iter().find(|&&t| t >= alphabet.blank_index()) {
        return Err(Error::InvalidConfig(format!("target index {bad} is not a symbol")));
    }
    let required = required_frames(target);
    if required > logits.rows() {
        return Err(Error::TargetTooLong { required, frames: logits.rows() });
    }
    Ok(())
}

fn forward(logits: &LogitMatrix, target: &[usize], alphabet: &Alphabet) -> Result<Lattice> {
    validate(logits, target, alphabet)?;
    let blank = alphabet.blank_index();
    let mut labels = Vec::with_capacity(2 * target.len() + 1);
    labels.push(blank);
    for &t in target {
        labels.push(t);
        labels.push(blank);
    }
    let frames = logits.rows();
    let s_len = labels.len();
    let rows: Vec<Vec<f64>> = logits.iter_rows().map(log_softmax).collect();
    let log_probs = Matrix::from_rows(&rows)?;

    let mut lattice = Lattice {
        labels,
        log_probs,
        alpha: Matrix::from_vec(frames, s_len, vec![f64::NEG_INFINITY; frames * s_len])?,
        log_likelihood: f64::NEG_INFINITY,
    };
    let lp = |t: usize, s: usize, l: &Lattice| l.log_probs.get(t, l.labels[s]);
    lattice.alpha.set(0, 0, lp(0, 0, &lattice));
    lattice.alpha.set(0, 1, lp(0, 1, &lattice));
    for t in 1..frames {
        for s in 0..s_len {
            let mut acc = lattice.alpha.get(t - 1, s);
            if s >= 1 {
                acc = log_sum_exp(acc, lattice.alpha.get(t - 1, s - 1));
            }
            if lattice.can_skip(s) {
                acc = log_sum_exp(acc, lattice.alpha.get(t - 1, s - 2));
            }
            if acc != f64::NEG_INFINITY {
                let v = acc + lp(t, s, &lattice);
                lattice.alpha.set(t, s, v);
            }
        }
    }
    lattice.log_likelihood =
        log_sum_exp(lattice.alpha.get(frames - 1, s_len - 1), lattice.alpha.get(frames - 1, s_len - 2));
    Ok(lattice)
}

/// `−ln P(target | logits)` summed over every alignment that collapses to `target`.
pub fn ctc_loss(logits: &LogitMatrix, target: &[usize], alphabet: &Alphabet) -> Result<f64> {
    Ok(-forward(logits, target, alphabet)?.log_likelihood)
}

/// Loss and its gradient with respect to the logits.
pub fn ctc_loss_and_grad(
    logits: &LogitMatrix,
    target: &[usize],
    alphabet: &Alphabet,
) -> Result<(f64, LogitMatrix)> {
    let lattice = forward(logits, target, alphabet)?;
    let frames = logits.rows();
    let s_len = lattice.labels.len();
    let log_p = lattice.log_likelihood;

    // beta excludes the emission at its own frame
    let mut beta = vec![f64::NEG_INFINITY; s_len];
    beta[s_len - 1] = 0.0;
    beta[s_len - 2] = 0.0;
    let mut grad = Matrix::zeros(frames, alphabet.num_classes());
    for t in (0..frames).rev() {
        let row = grad.row_mut(t);
        for (g, lp) in row.iter_mut().zip(lattice.log_probs.row(t)) {
            *g = lp.exp();
        }
        for s in 0..s_len {
            let occ = lattice.alpha.get(t, s) + beta[s] - log_p;
            if occ > f64::NEG_INFINITY {
                row[lattice.labels[s]] -= occ.exp();
            }
        }
        if t == 0 {
            break;
        }
        let mut prev = vec![f64::NEG_INFINITY; s_len];
        for (s, p) in prev.iter_mut().enumerate() {
            let emit = |s2: usize| beta[s2] + lattice.log_probs.get(t, lattice.labels[s2]);
            let mut acc = emit(s);
            if s + 1 < s_len {
                acc = log_sum_exp(acc, emit(s + 1));
            }
            if s + 2 < s_len && lattice.can_skip(s + 2) {
                acc = log_sum_exp(acc, emit(s + 2));
            }
            *p = acc;
        }
        beta = prev;
    }
    Ok((-log_p, grad))
}

pub fn ctc_grad(logits: &LogitMatrix, target: &[usize], alphabet: &Alphabet) -> Result<LogitMatrix> {
    Ok(ctc_loss_and_grad(logits, target, alphabet)?.1)
}

/// Per-frame argmax (lowest index wins ties), collapse repeats, drop blanks.
pub fn greedy_decode(logits: &LogitMatrix, alphabet: &Alphabet) -> String {
    let blank = alphabet.blank_index();
    let mut out = Vec::new();
    let mut prev = None;
    for row in logits.iter_rows() {
        let mut best = 0;
        for (k, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = k;
            }
        }
        if Some(best) != prev && best != blank {
            out.push(best);
        }
        prev = Some(best);
    }
    alphabet.decode(&out)
}
