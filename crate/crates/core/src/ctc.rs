//! Connectionist temporal classification.
//!
//! Losses are negative log-likelihoods in nats. Logit rows are normalized
//! with a log-softmax internally, so callers pass raw scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::{log_add, log_softmax_rows};
use crate::tensor::{Segment, Tape, Var};

const ARPABET: [&str; 39] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G", "HH", "IH", "IY", "JH", "K", "L", "M", "N", "NG",
    "OW", "OY", "P", "R", "S", "SH", "T", "TH", "UH", "UW", "V", "W", "Y", "Z", "ZH",
];

/// Output symbols of the decoder: phonemes, then `SIL`, then the CTC blank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeAlphabet {
    symbols: Vec<String>,
}

impl Default for PhonemeAlphabet {
    fn default() -> Self {
        Self::arpabet()
    }
}

impl PhonemeAlphabet {
    /// 39 ARPAbet phonemes plus `SIL`; the blank is index 40, so V = 41.
    pub fn arpabet() -> Self {
        let mut symbols: Vec<String> = ARPABET.iter().map(|s| s.to_string()).collect();
        symbols.push("SIL".into());
        PhonemeAlphabet { symbols }
    }

    /// Alphabet over arbitrary labels. The last label is used as the word
    /// separator and must be `SIL`.
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        if symbols.last().map(String::as_str) != Some("SIL") {
            return Err(Error::invalid("alphabet must end with SIL"));
        }
        let mut seen = symbols.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != symbols.len() {
            return Err(Error::invalid("alphabet symbols must be unique"));
        }
        Ok(PhonemeAlphabet { symbols })
    }

    /// Output vocabulary size including the blank.
    pub fn vocab_size(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn blank(&self) -> usize {
        self.symbols.len()
    }

    pub fn sil(&self) -> usize {
        self.symbols.len() - 1
    }

    /// Labels that may appear in targets (everything but the blank).
    pub fn labels(&self) -> &[String] {
        &self.symbols
    }

    pub fn index(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    pub fn symbol(&self, index: usize) -> &str {
        if index == self.blank() {
            "<b>"
        } else {
            &self.symbols[index]
        }
    }

    pub fn encode(&self, symbols: &[&str]) -> Result<Vec<usize>> {
        symbols
            .iter()
            .map(|s| self.index(s).ok_or_else(|| Error::invalid(format!("unknown phoneme `{s}`"))))
            .collect()
    }

    pub fn render(&self, seq: &[usize]) -> String {
        seq.iter().map(|&i| self.symbol(i)).collect::<Vec<_>>().join(" ")
    }
}

/// Number of adjacent equal pairs in `target`.
pub fn repeats(target: &[usize]) -> usize {
    target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Errors unless `frames` can emit `target`.
pub fn check_feasible(frames: usize, target: &[usize]) -> Result<()> {
    let r = repeats(target);
    if frames < target.len() + r {
        return Err(Error::Infeasible {
            frames,
            target_len: target.len(),
            repeats: r,
        });
    }
    Ok(())
}

fn validate(logits: &[f64], frames: usize, vocab: usize, target: &[usize], blank: usize) -> Result<()> {
    if logits.len() != frames * vocab || vocab == 0 {
        return Err(Error::Shape {
            op: "ctc",
            lhs: vec![frames, vocab],
            rhs: vec![logits.len()],
        });
    }
    if blank >= vocab {
        return Err(Error::invalid(format!("blank {blank} outside vocabulary of {vocab}")));
    }
    if let Some(&bad) = target.iter().find(|&&k| k >= vocab || k == blank) {
        return Err(Error::invalid(format!("target label {bad} is the blank or out of range")));
    }
    Ok(())
}

/// Loss value and its gradient with respect to the raw logits.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// `−log p(target | logits)` with its gradient `softmax − posterior
/// occupancy`, by the forward-backward recursions over the blank-interleaved
/// label sequence.
pub fn ctc_loss(logits: &[f64], frames: usize, vocab: usize, target: &[usize], blank: usize) -> Result<CtcOutput> {
    validate(logits, frames, vocab, target, blank)?;
    check_feasible(frames, target)?;
    if frames == 0 {
        return Ok(CtcOutput { loss: 0.0, grad: vec![] });
    }
    let mut lp = vec![0.0; logits.len()];
    log_softmax_rows(logits, vocab, &mut lp);
    let ext = extend(target, blank);
    let s_n = ext.len();
    let alpha = forward_table(&lp, frames, vocab, &ext, blank);
    let last = &alpha[(frames - 1) * s_n..];
    let log_p = if s_n > 1 { log_add(last[s_n - 1], last[s_n - 2]) } else { last[0] };
    if !log_p.is_finite() {
        return Err(Error::NonFinite(log_p));
    }
    let beta = backward_table(&lp, frames, vocab, &ext, blank);
    let mut grad = vec![0.0; logits.len()];
    for t in 0..frames {
        let row = &mut grad[t * vocab..(t + 1) * vocab];
        let lrow = &lp[t * vocab..(t + 1) * vocab];
        for (g, &l) in row.iter_mut().zip(lrow) {
            *g = l.exp();
        }
        for s in 0..s_n {
            let a = alpha[t * s_n + s] + beta[t * s_n + s];
            if a.is_finite() {
                let k = ext[s];
                row[k] -= (a - lrow[k] - log_p).exp();
            }
        }
    }
    Ok(CtcOutput { loss: -log_p, grad })
}

/// Loss only, from the forward recursion.
pub fn ctc_nll(logits: &[f64], frames: usize, vocab: usize, target: &[usize], blank: usize) -> Result<f64> {
    validate(logits, frames, vocab, target, blank)?;
    check_feasible(frames, target)?;
    let mut lp = vec![0.0; logits.len()];
    log_softmax_rows(logits, vocab, &mut lp);
    Ok(-path_logsum(&lp, frames, vocab, target, blank))
}

/// `log Σ_paths Π_t s[t, path_t]` over frame paths collapsing to `target`,
/// for arbitrary per-frame log-scores `s` (not necessarily normalized).
/// `−∞` when no path exists.
pub fn path_logsum(scores: &[f64], frames: usize, vocab: usize, target: &[usize], blank: usize) -> f64 {
    if frames == 0 {
        return if target.is_empty() { 0.0 } else { f64::NEG_INFINITY };
    }
    let ext = extend(target, blank);
    let s_n = ext.len();
    let alpha = forward_table(scores, frames, vocab, &ext, blank);
    let last = &alpha[(frames - 1) * s_n..];
    if s_n > 1 {
        log_add(last[s_n - 1], last[s_n - 2])
    } else {
        last[0]
    }
}

fn extend(target: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &k in target {
        ext.push(k);
        ext.push(blank);
    }
    ext
}

fn can_skip(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

fn forward_table(lp: &[f64], frames: usize, vocab: usize, ext: &[usize], blank: usize) -> Vec<f64> {
    let s_n = ext.len();
    let mut a = vec![f64::NEG_INFINITY; frames * s_n];
    a[0] = lp[ext[0]];
    if s_n > 1 {
        a[1] = lp[ext[1]];
    }
    for t in 1..frames {
        let (prev, cur) = a.split_at_mut(t * s_n);
        let prev = &prev[(t - 1) * s_n..];
        let cur = &mut cur[..s_n];
        let row = &lp[t * vocab..(t + 1) * vocab];
        for s in 0..s_n {
            let mut v = prev[s];
            if s >= 1 {
                v = log_add(v, prev[s - 1]);
            }
            if can_skip(ext, s, blank) {
                v = log_add(v, prev[s - 2]);
            }
            cur[s] = v + row[ext[s]];
        }
    }
    a
}

fn backward_table(lp: &[f64], frames: usize, vocab: usize, ext: &[usize], blank: usize) -> Vec<f64> {
    let s_n = ext.len();
    let mut b = vec![f64::NEG_INFINITY; frames * s_n];
    let last = (frames - 1) * s_n;
    b[last + s_n - 1] = lp[(frames - 1) * vocab + ext[s_n - 1]];
    if s_n > 1 {
        b[last + s_n - 2] = lp[(frames - 1) * vocab + ext[s_n - 2]];
    }
    for t in (0..frames - 1).rev() {
        let (cur, next) = b.split_at_mut((t + 1) * s_n);
        let cur = &mut cur[t * s_n..];
        let next = &next[..s_n];
        let row = &lp[t * vocab..(t + 1) * vocab];
        for s in 0..s_n {
            let mut v = next[s];
            if s + 1 < s_n {
                v = log_add(v, next[s + 1]);
            }
            if s + 2 < s_n && can_skip(ext, s + 2, blank) {
                v = log_add(v, next[s + 2]);
            }
            cur[s] = v + row[ext[s]];
        }
    }
    b
}

/// Exhaustive oracle: sums the probability of every frame-level path that
/// collapses to `target`. Returns `+∞` when no path does. Limited to
/// `vocab^frames ≤ 10⁶`.
pub fn ctc_brute(logits: &[f64], frames: usize, vocab: usize, target: &[usize], blank: usize) -> Result<f64> {
    validate(logits, frames, vocab, target, blank)?;
    let paths = (vocab as f64).powi(frames as i32);
    if paths > 1e6 {
        return Err(Error::invalid(format!("ctc_brute: {vocab}^{frames} paths exceed 10^6")));
    }
    let mut lp = vec![0.0; logits.len()];
    log_softmax_rows(logits, vocab, &mut lp);
    let mut path = vec![0usize; frames];
    let mut total = f64::NEG_INFINITY;
    let mut collapsed = Vec::with_capacity(frames);
    loop {
        collapsed.clear();
        let mut prev = None;
        for &k in &path {
            if Some(k) != prev && k != blank {
                collapsed.push(k);
            }
            prev = Some(k);
        }
        if collapsed == target {
            let score: f64 = path.iter().enumerate().map(|(t, &k)| lp[t * vocab + k]).sum();
            total = log_add(total, score);
        }
        // Odometer increment.
        let mut i = 0;
        loop {
            if i == frames {
                return Ok(-total);
            }
            path[i] += 1;
            if path[i] < vocab {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Per-frame argmax, collapse adjacent repeats, then drop blanks.
pub fn greedy_decode(logits: &[f64], vocab: usize, blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for row in logits.chunks_exact(vocab) {
        let k = argmax(row);
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean CTC loss over the trials of a packed batch.
///
/// `logits` is `[rows × vocab]` where trial `i` occupies `segments[i]`.
/// Returns the scalar loss node and the individual per-trial losses.
pub fn ctc_batch_loss(
    tape: &mut Tape,
    logits: Var,
    vocab: usize,
    segments: &[Segment],
    targets: &[Vec<usize>],
    blank: usize,
) -> Result<(Var, Vec<f64>)> {
    if segments.len() != targets.len() || segments.is_empty() {
        return Err(Error::invalid("ctc_batch_loss: need one target per segment"));
    }
    let rows = tape.value(logits).len() / vocab;
    let mut grad = vec![0.0; rows * vocab];
    let mut losses = Vec::with_capacity(targets.len());
    let inv = 1.0 / targets.len() as f64;
    for (seg, target) in segments.iter().zip(targets) {
        let range = seg.start * vocab..(seg.start + seg.len) * vocab;
        let out = ctc_loss(&tape.value(logits)[range.clone()], seg.len, vocab, target, blank)?;
        grad[range].iter_mut().zip(&out.grad).for_each(|(g, &d)| *g = d * inv);
        losses.push(out.loss);
    }
    let mean = losses.iter().sum::<f64>() * inv;
    let loss = tape.scalar_with_grad(logits, mean, grad)?;
    Ok((loss, losses))
}
