//! Corpus evaluation: beam-search WER, greedy PER and error breakdowns.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::beam::BeamDecoder;
use crate::ctc::{greedy_decode, PhonemeAlphabet};
use crate::data::Trial;
use crate::error::{Error, Result};
use crate::lm::{Lexicon, UNK};
use crate::metrics::{phoneme_errors, word_errors, ConfusionMatrix, CorpusErrors, TrialMetrics};
use crate::model::DecoderModel;
use crate::preprocess::AugmentConfig;
use crate::train::eval_patches;

/// Maps a `SIL`-separated phoneme string to words; unknown spellings
/// become `<unk>`.
pub fn spell_words(phonemes: &[usize], lexicon: &Lexicon, sil: usize) -> Vec<String> {
    let mut by_pron: HashMap<&[usize], &str> = HashMap::new();
    for (w, p) in lexicon.entries() {
        by_pron.entry(p).or_insert(w);
    }
    phonemes
        .split(|&p| p == sil)
        .filter(|s| !s.is_empty())
        .map(|s| by_pron.get(s).copied().unwrap_or(UNK).to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub trials: usize,
    /// Beam-search word errors.
    pub words: CorpusErrors,
    pub wer: f64,
    /// Greedy phoneme errors with `SIL` removed.
    pub phonemes: CorpusErrors,
    pub per: f64,
    /// Word errors of the greedy path spelled through the lexicon.
    pub greedy_wer: f64,
    pub confusion: ConfusionMatrix,
    /// Beam WER per session.
    pub per_session: BTreeMap<usize, f64>,
    pub rows: Vec<TrialMetrics>,
}

pub fn evaluate(
    model: &DecoderModel,
    trials: &[Trial],
    decoder: &BeamDecoder,
    alphabet: &PhonemeAlphabet,
    lexicon: &Lexicon,
    aug: &AugmentConfig,
) -> Result<EvalReport> {
    if trials.is_empty() {
        return Err(Error::invalid("evaluate: no trials"));
    }
    if model.config().vocab_size != alphabet.vocab_size() {
        return Err(Error::invalid(format!(
            "model emits {} labels, alphabet has {}",
            model.config().vocab_size,
            alphabet.vocab_size()
        )));
    }
    let pb = model.config().patch_bins;
    evaluate_with(trials, decoder, alphabet, lexicon, |t| model.logits(&eval_patches(t, pb, aug)?))
}

/// [`evaluate`] over logits from any source, `[L × V]` per trial.
pub fn evaluate_with(
    trials: &[Trial],
    decoder: &BeamDecoder,
    alphabet: &PhonemeAlphabet,
    lexicon: &Lexicon,
    mut logits_of: impl FnMut(&Trial) -> Result<Vec<f64>>,
) -> Result<EvalReport> {
    if trials.is_empty() {
        return Err(Error::invalid("evaluate: no trials"));
    }
    let v = alphabet.vocab_size();
    let sil = alphabet.sil();
    let mut words = CorpusErrors::default();
    let mut phon = CorpusErrors::default();
    let mut greedy_words = CorpusErrors::default();
    let mut confusion = ConfusionMatrix::new(sil);
    let mut sessions: BTreeMap<usize, CorpusErrors> = BTreeMap::new();
    let mut rows = Vec::with_capacity(trials.len());
    for t in trials {
        let logits = logits_of(t)?;
        if logits.len() % v != 0 {
            return Err(Error::Shape {
                op: "evaluate",
                lhs: vec![logits.len()],
                rhs: vec![v],
            });
        }
        let hyp = decoder.decode(&logits)?.into_iter().next();
        let text = hyp.map(|h| h.text).unwrap_or_default();
        let w = word_errors(&t.text, &text);
        let greedy = greedy_decode(&logits, v, alphabet.blank());
        let p = phoneme_errors(&t.phonemes, &greedy, sil);
        let strip = |s: &[usize]| s.iter().copied().filter(|&x| x != sil).collect::<Vec<_>>();
        confusion.add(&strip(&t.phonemes), &strip(&greedy), &p)?;
        greedy_words.add(&word_errors(&t.text, &spell_words(&greedy, lexicon, sil).join(" ")));
        words.add(&w);
        phon.add(&p);
        sessions.entry(t.session).or_default().add(&w);
        rows.push(TrialMetrics {
            trial_id: t.id,
            wer: w.rate().ok(),
            per: p.rate().ok(),
            s: w.substitutions,
            d: w.deletions,
            i: w.insertions,
            n: w.ref_len,
        });
    }
    Ok(EvalReport {
        trials: trials.len(),
        wer: words.rate()?,
        words,
        per: phon.rate()?,
        phonemes: phon,
        greedy_wer: greedy_words.rate()?,
        confusion,
        per_session: sessions.into_iter().map(|(s, e)| (s, e.rate().unwrap_or(0.0))).collect(),
        rows,
    })
}
