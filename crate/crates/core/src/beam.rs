//! Lexicon-constrained CTC prefix beam search with n-gram fusion.
//!
//! A hypothesis is a word sequence spelled as pronunciations separated by
//! `SIL`. Its score is `α·log P_enc + log P_lm`, where `P_enc` sums all
//! frame paths that collapse to the phoneme sequence (with the blank's
//! log-probability lowered by the blank penalty) and `P_lm` includes the
//! sentence-end term once the utterance is finished. A single trailing
//! `SIL` after the last word is accepted and folded into that hypothesis.

use std::collections::HashMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::ctc::PhonemeAlphabet;
use crate::error::{Error, Result};
use crate::lm::{Lexicon, NGramModel};
use crate::tensor::kernels::{log_add, log_softmax_rows};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Encoder weight `α`.
    pub alpha: f64,
    /// Subtracted from the blank log-probability of every frame.
    pub blank_penalty: f64,
    /// Hypotheses kept for second-pass rescoring.
    pub top_k: usize,
    /// First-pass LM weight in rescoring.
    pub beta: f64,
    pub lm_order: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self::online()
    }
}

impl DecodeConfig {
    /// Streaming settings: 3-gram, blank penalty `ln 2`.
    pub fn online() -> Self {
        DecodeConfig {
            beam_size: 18,
            alpha: 0.8,
            blank_penalty: std::f64::consts::LN_2,
            top_k: 100,
            beta: 0.5,
            lm_order: 3,
        }
    }

    /// Second-pass settings: 5-gram, blank penalty `ln 7`.
    pub fn offline() -> Self {
        DecodeConfig {
            blank_penalty: 7f64.ln(),
            lm_order: 5,
            ..Self::online()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size < 1 || self.top_k < 1 {
            return Err(Error::invalid("beam_size and top_k must be at least 1"));
        }
        if !(self.alpha >= 0.0) || !self.blank_penalty.is_finite() || !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid("decode: need alpha ≥ 0, finite blank_penalty and beta in [0, 1]"));
        }
        Ok(())
    }
}

/// One decoded hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub words: Vec<String>,
    pub text: String,
    /// Phoneme labels including the `SIL` separators.
    pub phonemes: Vec<usize>,
    pub enc_logprob: f64,
    pub lm_logprob: f64,
    pub score: f64,
}

impl Hypothesis {
    fn empty() -> Self {
        Hypothesis {
            words: vec![],
            text: String::new(),
            phonemes: vec![],
            enc_logprob: 0.0,
            lm_logprob: 0.0,
            score: 0.0,
        }
    }
}

/// Search counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeStats {
    pub frames: usize,
    /// Label extensions rejected because no pronunciation continues that way.
    pub lexicon_pruned: u64,
    /// Beams dropped by the beam-size cut.
    pub beam_pruned: u64,
}

const ROOT: u32 = 0;
const NO_WORDS: u32 = 0;

#[derive(Debug, Clone)]
struct TrieNode {
    parent: u32,
    label: usize,
    children: Vec<(usize, u32)>,
    /// Lexicon words whose pronunciation ends here.
    words: Vec<u32>,
}

/// Committed word sequences, shared between beams as a parent-pointer tree.
#[derive(Debug, Clone)]
struct SeqNode {
    parent: u32,
    word: u32,
    /// Trie node of the closed pronunciation.
    pron_end: u32,
    /// LM ids of the most recent `order − 1` words.
    history: Vec<u32>,
    /// Sum of LM increments of all words so far.
    lm: f64,
}

#[derive(Debug, Clone, Copy)]
struct Mass {
    blank: f64,
    non_blank: f64,
}

impl Mass {
    const ZERO: Mass = Mass {
        blank: f64::NEG_INFINITY,
        non_blank: f64::NEG_INFINITY,
    };

    fn total(self) -> f64 {
        log_add(self.blank, self.non_blank)
    }
}

type Key = (u32, u32);

/// Decoder over a fixed lexicon and language model.
#[derive(Debug, Clone)]
pub struct BeamDecoder<'a> {
    lm: &'a NGramModel,
    cfg: DecodeConfig,
    vocab: usize,
    blank: usize,
    sil: usize,
    trie: Vec<TrieNode>,
    words: Vec<String>,
    lm_ids: Vec<u32>,
}

impl<'a> BeamDecoder<'a> {
    pub fn new(alphabet: &PhonemeAlphabet, lexicon: &Lexicon, lm: &'a NGramModel, cfg: DecodeConfig) -> Result<Self> {
        cfg.validate()?;
        if lexicon.is_empty() {
            return Err(Error::invalid("decoder needs a non-empty lexicon"));
        }
        let mut trie = vec![TrieNode {
            parent: ROOT,
            label: usize::MAX,
            children: vec![],
            words: vec![],
        }];
        let mut words = Vec::new();
        let mut word_index: HashMap<&str, u32> = HashMap::new();
        for (w, pron) in lexicon.entries() {
            let wid = *word_index.entry(w).or_insert_with(|| {
                words.push(w.to_string());
                (words.len() - 1) as u32
            });
            let mut node = ROOT;
            for &ph in pron {
                node = match trie[node as usize].children.iter().find(|(l, _)| *l == ph) {
                    Some(&(_, n)) => n,
                    None => {
                        let n = trie.len() as u32;
                        trie.push(TrieNode {
                            parent: node,
                            label: ph,
                            children: vec![],
                            words: vec![],
                        });
                        trie[node as usize].children.push((ph, n));
                        n
                    }
                };
            }
            trie[node as usize].words.push(wid);
        }
        for n in &mut trie {
            n.children.sort_unstable();
        }
        let lm_ids = words.iter().map(|w| lm.id(w)).collect();
        Ok(BeamDecoder {
            lm,
            cfg,
            vocab: alphabet.vocab_size(),
            blank: alphabet.blank(),
            sil: alphabet.sil(),
            trie,
            words,
            lm_ids,
        })
    }

    pub fn config(&self) -> &DecodeConfig {
        &self.cfg
    }

    /// Full-utterance search over `[L × V]` logits; best hypothesis first.
    pub fn decode(&self, logits: &[f64]) -> Result<Vec<Hypothesis>> {
        let mut s = self.stream();
        s.push(0, logits)?;
        Ok(s.hypotheses())
    }

    /// Incremental decoder state.
    pub fn stream(&self) -> StreamDecoder<'_, 'a> {
        let mut beams = IndexMap::new();
        beams.insert(
            (NO_WORDS, ROOT),
            Mass {
                blank: 0.0,
                non_blank: f64::NEG_INFINITY,
            },
        );
        StreamDecoder {
            dec: self,
            beams,
            seqs: vec![SeqNode {
                parent: NO_WORDS,
                word: u32::MAX,
                pron_end: ROOT,
                history: vec![],
                lm: 0.0,
            }],
            seq_index: HashMap::new(),
            stats: DecodeStats::default(),
        }
    }

    /// Scaled per-frame scores used by the search: log-softmax with the
    /// blank penalty applied.
    pub fn frame_scores(&self, logits: &[f64]) -> Vec<f64> {
        let mut lp = vec![0.0; logits.len()];
        log_softmax_rows(logits, self.vocab, &mut lp);
        for row in lp.chunks_exact_mut(self.vocab) {
            row[self.blank] -= self.cfg.blank_penalty;
        }
        lp
    }

    fn extend_history(&self, history: &[u32], word: u32) -> Vec<u32> {
        let keep = self.lm.order() - 1;
        let mut h = history.to_vec();
        h.push(self.lm_ids[word as usize]);
        if h.len() > keep {
            h.drain(..h.len() - keep);
        }
        h
    }
}

/// Decoder state after consuming a prefix of the frames.
#[derive(Debug, Clone)]
pub struct StreamDecoder<'d, 'a> {
    dec: &'d BeamDecoder<'a>,
    beams: IndexMap<Key, Mass>,
    seqs: Vec<SeqNode>,
    seq_index: HashMap<(u32, u32, u32), u32>,
    stats: DecodeStats,
}

impl StreamDecoder<'_, '_> {
    pub fn frames(&self) -> usize {
        self.stats.frames
    }

    pub fn stats(&self) -> DecodeStats {
        self.stats
    }

    /// Consumes a chunk of logit rows that starts at frame `start`.
    pub fn push(&mut self, start: usize, chunk: &[f64]) -> Result<()> {
        let v = self.dec.vocab;
        if start != self.stats.frames {
            return Err(Error::invalid(format!(
                "chunk starts at frame {start}, decoder is at frame {}",
                self.stats.frames
            )));
        }
        if chunk.len() % v != 0 {
            return Err(Error::Shape {
                op: "stream_decode",
                lhs: vec![chunk.len()],
                rhs: vec![v],
            });
        }
        let scores = self.dec.frame_scores(chunk);
        for row in scores.chunks_exact(v) {
            self.step(row);
        }
        Ok(())
    }

    fn last_label(&self, key: Key) -> Option<usize> {
        let (seq, node) = key;
        if node != ROOT {
            Some(self.dec.trie[node as usize].label)
        } else if seq != NO_WORDS {
            Some(self.dec.sil)
        } else {
            None
        }
    }

    fn close_word(&mut self, seq: u32, word: u32, pron_end: u32) -> u32 {
        if let Some(&id) = self.seq_index.get(&(seq, word, pron_end)) {
            return id;
        }
        let parent = &self.seqs[seq as usize];
        let lm = parent.lm + self.dec.lm.logprob_ids(&parent.history, self.dec.lm_ids[word as usize]);
        let history = self.dec.extend_history(&parent.history, word);
        let id = self.seqs.len() as u32;
        self.seqs.push(SeqNode {
            parent: seq,
            word,
            pron_end,
            history,
            lm,
        });
        self.seq_index.insert((seq, word, pron_end), id);
        id
    }

    fn step(&mut self, lp: &[f64]) {
        let dec = self.dec;
        let mut next: IndexMap<Key, Mass> = IndexMap::with_capacity(self.beams.len() * 4);
        let beams = std::mem::take(&mut self.beams);
        let phonemes = dec.sil as u64;
        for (&key, &m) in &beams {
            let total = m.total();
            let last = self.last_label(key);
            let e = next.entry(key).or_insert(Mass::ZERO);
            e.blank = log_add(e.blank, total + lp[dec.blank]);
            if let Some(c) = last {
                e.non_blank = log_add(e.non_blank, m.non_blank + lp[c]);
            }
            let (seq, node) = key;
            let tn = &dec.trie[node as usize];
            self.stats.lexicon_pruned += phonemes - tn.children.len() as u64;
            for &(c, child) in &tn.children {
                let src = if Some(c) == last { m.blank } else { total };
                let e = next.entry((seq, child)).or_insert(Mass::ZERO);
                e.non_blank = log_add(e.non_blank, src + lp[c]);
            }
            for &w in &tn.words {
                let closed = self.close_word(seq, w, node);
                let e = next.entry((closed, ROOT)).or_insert(Mass::ZERO);
                e.non_blank = log_add(e.non_blank, total + lp[dec.sil]);
            }
        }
        let mut ranked: Vec<(Key, Mass, f64)> = next
            .into_iter()
            .filter(|(_, m)| m.total() > f64::NEG_INFINITY)
            .map(|(k, m)| (k, m, dec.cfg.alpha * m.total() + self.seqs[k.0 as usize].lm))
            .collect();
        ranked.sort_by(|a, b| b.2.total_cmp(&a.2));
        if ranked.len() > dec.cfg.beam_size {
            self.stats.beam_pruned += (ranked.len() - dec.cfg.beam_size) as u64;
            ranked.truncate(dec.cfg.beam_size);
        }
        self.beams = ranked.into_iter().map(|(k, m, _)| (k, m)).collect();
        self.stats.frames += 1;
    }

    fn words_of(&self, mut seq: u32) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        while seq != NO_WORDS {
            let s = &self.seqs[seq as usize];
            out.push((s.word, s.pron_end));
            seq = s.parent;
        }
        out.reverse();
        out
    }

    fn pron(&self, mut node: u32) -> Vec<usize> {
        let mut out = Vec::new();
        while node != ROOT {
            let n = &self.dec.trie[node as usize];
            out.push(n.label);
            node = n.parent;
        }
        out.reverse();
        out
    }

    fn build(&self, seq: u32, last: Option<(u32, u32)>, enc: f64) -> Hypothesis {
        let dec = self.dec;
        let mut words = self.words_of(seq);
        let base = &self.seqs[seq as usize];
        let mut lm = base.lm;
        let mut history = base.history.clone();
        if let Some((w, node)) = last {
            lm += dec.lm.logprob_ids(&history, dec.lm_ids[w as usize]);
            history = dec.extend_history(&history, w);
            words.push((w, node));
        }
        lm += dec.lm.logprob_ids(&history, dec.lm.eos());
        let mut phonemes = Vec::new();
        for (i, &(_, node)) in words.iter().enumerate() {
            if i > 0 {
                phonemes.push(dec.sil);
            }
            phonemes.extend(self.pron(node));
        }
        let words: Vec<String> = words.iter().map(|&(w, _)| dec.words[w as usize].clone()).collect();
        Hypothesis {
            text: words.join(" "),
            words,
            phonemes,
            enc_logprob: enc,
            lm_logprob: lm,
            score: dec.cfg.alpha * enc + lm,
        }
    }

    /// Completed hypotheses for the frames consumed so far, best first.
    ///
    /// A beam ending inside a complete pronunciation closes that word; a
    /// beam ending right after `SIL` is the same word sequence, so the two
    /// are merged. Beams stopping inside an incomplete pronunciation are
    /// dropped.
    pub fn hypotheses(&self) -> Vec<Hypothesis> {
        if self.stats.frames == 0 {
            return vec![Hypothesis::empty()];
        }
        let mut finals: IndexMap<(u32, Option<(u32, u32)>), f64> = IndexMap::new();
        let mut add = |key, enc: f64| {
            let e = finals.entry(key).or_insert(f64::NEG_INFINITY);
            *e = log_add(*e, enc);
        };
        for (&(seq, node), &m) in &self.beams {
            let enc = m.total();
            if node == ROOT {
                if seq == NO_WORDS {
                    add((NO_WORDS, None), enc);
                } else {
                    let s = &self.seqs[seq as usize];
                    add((s.parent, Some((s.word, s.pron_end))), enc);
                }
                continue;
            }
            for &w in &self.dec.trie[node as usize].words {
                add((seq, Some((w, node))), enc);
            }
        }
        let mut out: Vec<Hypothesis> = finals.into_iter().map(|((seq, last), enc)| self.build(seq, last, enc)).collect();
        out.sort_by(|a, b| b.score.total_cmp(&a.score));
        out.truncate(self.dec.cfg.top_k);
        out
    }

    pub fn best(&self) -> Option<Hypothesis> {
        self.hypotheses().into_iter().next()
    }
}

/// A hypothesis after second-pass rescoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rescored {
    pub hypothesis: Hypothesis,
    pub external_logprob: Option<f64>,
    pub score: f64,
    /// The scorer failed; the first-pass score was kept.
    pub scorer_failed: bool,
}

/// Re-ranks first-pass hypotheses with
/// `α·enc + β·lm + (1 − β)·external(text)`. The sort is stable, so ties keep
/// the first-pass order. A scorer returning `None` or a non-finite value
/// leaves that hypothesis at its first-pass score.
pub fn rescore<F>(hyps: &[Hypothesis], mut scorer: F, cfg: &DecodeConfig) -> Vec<Rescored>
where
    F: FnMut(&Hypothesis) -> Option<f64>,
{
    let mut out: Vec<Rescored> = hyps
        .iter()
        .take(cfg.top_k)
        .map(|h| match scorer(h).filter(|v| v.is_finite()) {
            Some(ext) => Rescored {
                hypothesis: h.clone(),
                external_logprob: Some(ext),
                score: cfg.alpha * h.enc_logprob + cfg.beta * h.lm_logprob + (1.0 - cfg.beta) * ext,
                scorer_failed: false,
            },
            None => Rescored {
                hypothesis: h.clone(),
                external_logprob: None,
                score: h.score,
                scorer_failed: true,
            },
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}
