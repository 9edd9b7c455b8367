//! Reference implementations shared by the integration tests. Each one is
//! written directly from the definition, independent of the library code it
//! checks.
#![allow(dead_code)]

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use speechtx_core::beam::DecodeConfig;
use speechtx_core::ctc::{ctc_batch_loss, PhonemeAlphabet};
use speechtx_core::lm::{Lexicon, NGramModel};
use speechtx_core::model::{DecoderModel, ModelConfig, SequenceInput};
use speechtx_core::tensor::gradcheck::max_relative_error;
use speechtx_core::tensor::{ParamId, Tape};

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Merges repeats, then drops blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Calls `f(path)` for every sequence in `0..vocab` of length `frames`.
fn for_each_path(frames: usize, vocab: usize, mut f: impl FnMut(&[usize])) {
    let mut path = vec![0usize; frames];
    loop {
        f(&path);
        let mut i = 0;
        loop {
            if i == frames {
                return;
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

/// `-log p(target)` by summing the probability of every frame path.
pub fn ctc_enumerate(logits: &[f64], frames: usize, vocab: usize, target: &[usize], blank: usize) -> f64 {
    let lp: Vec<Vec<f64>> = logits.chunks(vocab).map(log_softmax).collect();
    let mut total = f64::NEG_INFINITY;
    for_each_path(frames, vocab, |path| {
        if collapse(path, blank) == target {
            total = log_add(total, path.iter().enumerate().map(|(t, &k)| lp[t][k]).sum());
        }
    });
    -total
}

/// Edit distance by memoized recursion.
pub fn levenshtein(a: &[u8], b: &[u8]) -> usize {
    fn go(a: &[u8], b: &[u8], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            go(a, b, i + 1, j + 1, memo)
        } else {
            1 + go(a, b, i + 1, j + 1, memo)
                .min(go(a, b, i + 1, j, memo))
                .min(go(a, b, i, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

/// All word sequences whose phoneme spelling (optionally followed by one
/// SIL) is `collapsed`.
pub fn parses(collapsed: &[usize], lex: &Lexicon, sil: usize) -> Vec<Vec<String>> {
    if collapsed.is_empty() {
        return vec![vec![]];
    }
    let body = if collapsed.last() == Some(&sil) {
        &collapsed[..collapsed.len() - 1]
    } else {
        collapsed
    };
    if body.is_empty() || body.last() == Some(&sil) {
        return vec![];
    }
    let mut out: Vec<Vec<String>> = vec![vec![]];
    for seg in body.split(|&x| x == sil) {
        let matches: Vec<&str> = lex.entries().filter(|(_, p)| *p == seg).map(|(w, _)| w).collect();
        if matches.is_empty() {
            return vec![];
        }
        out = out
            .into_iter()
            .flat_map(|prefix| {
                matches.iter().map(move |w| {
                    let mut p = prefix.clone();
                    p.push(w.to_string());
                    p
                })
            })
            .collect();
    }
    out
}

/// Exhaustive search over every frame path: returns each hypothesis text
/// with (enc, lm, score).
pub fn exhaustive(
    logits: &[f64],
    frames: usize,
    a: &PhonemeAlphabet,
    lex: &Lexicon,
    lm: &NGramModel,
    cfg: &DecodeConfig,
) -> HashMap<String, (f64, f64, f64)> {
    let v = a.vocab_size();
    let mut lp: Vec<Vec<f64>> = logits.chunks(v).map(log_softmax).collect();
    for row in &mut lp {
        row[a.blank()] -= cfg.blank_penalty;
    }
    let mut enc: HashMap<String, f64> = HashMap::new();
    for_each_path(frames, v, |path| {
        let score: f64 = path.iter().enumerate().map(|(t, &k)| lp[t][k]).sum();
        for words in parses(&collapse(path, a.blank()), lex, a.sil()) {
            let e = enc.entry(words.join(" ")).or_insert(f64::NEG_INFINITY);
            *e = log_add(*e, score);
        }
    });
    enc.into_iter()
        .map(|(text, e)| {
            let words: Vec<&str> = text.split(' ').filter(|w| !w.is_empty()).collect();
            let l = lm.sentence_logprob(&words);
            (text, (e, l, cfg.alpha * e + l))
        })
        .collect()
}

/// Full-model CTC gradient against central differences of every parameter.
pub fn model_gradcheck(seed: u64) -> f64 {
    let cfg = ModelConfig {
        patch_bins: 2,
        channels: 2,
        model_dim: 8,
        n_layers: 2,
        n_heads: 2,
        head_dim: 4,
        ffn_mult: 2,
        vocab_size: 4,
        max_patches: 8,
        max_rel_distance: Some(2),
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = DecoderModel::new(cfg.clone(), seed).unwrap();
    for p in 0..m.params().params().len() {
        m.params_mut()
            .get_mut(ParamId(p))
            .data_mut()
            .iter_mut()
            .for_each(|w| *w += rng.random_range(-0.3..0.3));
    }
    let x: Vec<f64> = (0..4 * cfg.patch_dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mask = [false, true, false, false];
    let target = vec![rng.random_range(0..3), rng.random_range(0..3)];
    let loss_of = |m: &DecoderModel| {
        let mut tape = Tape::new();
        let inputs = [SequenceInput {
            patches: &x,
            mask: Some(&mask),
        }];
        let (logits, segs) = m.forward_batch(&mut tape, &inputs, false, &mut rand::rng()).unwrap();
        let (loss, _) = ctc_batch_loss(&mut tape, logits, cfg.vocab_size, &segs, &[target.clone()], 3).unwrap();
        (tape, loss)
    };
    m.params_mut().set_all_trainable(true);
    m.params_mut().zero_grad();
    let (tape, loss) = loss_of(&m);
    let grads = tape.backward(loss).unwrap();
    m.params_mut().accumulate(&tape, &grads).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let h = 1e-5;
    for p in 0..m.params().params().len() {
        let id = ParamId(p);
        analytic.extend_from_slice(m.params().get(id).grad().unwrap());
        for i in 0..m.params().get(id).numel() {
            let orig = m.params().get(id).data()[i];
            let mut probe = m.clone();
            probe.params_mut().get_mut(id).data_mut()[i] = orig + h;
            let (t1, l1) = loss_of(&probe);
            probe.params_mut().get_mut(id).data_mut()[i] = orig - h;
            let (t2, l2) = loss_of(&probe);
            numeric.push((t1.value(l1)[0] - t2.value(l2)[0]) / (2.0 * h));
        }
    }
    max_relative_error(&analytic, &numeric, 1e-6)
}
