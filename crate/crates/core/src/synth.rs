//! Synthetic multi-session recordings.
//!
//! Sentences drawn from a small word-level Markov chain are spelled through
//! the lexicon, and every label is rendered as a per-label template held for a
//! random number of bins plus white noise. Session `s` then applies the
//! affine channel transform `x ↦ g_s ⊙ x + o_s` with
//! `g_s = exp(δ_s·u_s)`, `o_s = δ_s·v_s` and `δ_s = δ·s/(S−1)`. The
//! directions `u_s`, `v_s` are Gaussian random walks over sessions rescaled
//! to unit RMS, so each day keeps most of the previous day's shift and adds
//! a fresh component. Session 0 is the reference.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ctc::PhonemeAlphabet;
use crate::data::{Features, Split, Trial};
use crate::error::{Error, Result};
use crate::lm::Lexicon;
use crate::rng::{stream, Domain, StreamRng};

const WORDS: [(&str, &str); 40] = [
    ("the", "DH AH"),
    ("a", "AH"),
    ("cat", "K AE T"),
    ("dog", "D AO G"),
    ("sees", "S IY Z"),
    ("runs", "R AH N Z"),
    ("big", "B IH G"),
    ("small", "S M AO L"),
    ("red", "R EH D"),
    ("blue", "B L UW"),
    ("house", "HH AW S"),
    ("tree", "T R IY"),
    ("near", "N IH R"),
    ("under", "AH N D ER"),
    ("over", "OW V ER"),
    ("jumps", "JH AH M P S"),
    ("walks", "W AO K S"),
    ("bird", "B ER D"),
    ("fish", "F IH SH"),
    ("eats", "IY T S"),
    ("food", "F UW D"),
    ("water", "W AO T ER"),
    ("happy", "HH AE P IY"),
    ("quick", "K W IH K"),
    ("slow", "S L OW"),
    ("man", "M AE N"),
    ("woman", "W UH M AH N"),
    ("child", "CH AY L D"),
    ("book", "B UH K"),
    ("reads", "R IY D Z"),
    ("thing", "TH IH NG"),
    ("good", "G UH D"),
    ("yellow", "Y EH L OW"),
    ("boy", "B OY"),
    ("girl", "G ER L"),
    ("sings", "S IH NG Z"),
    ("plays", "P L EY Z"),
    ("very", "V EH R IY"),
    ("zoo", "Z UW"),
    ("garage", "G ER AA ZH"),
];

pub const DATASET_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"STXDATA\0";

/// Built-in lexicon of `n` words (at most 40) over the ARPAbet alphabet.
pub fn builtin_lexicon(n: usize, alphabet: &PhonemeAlphabet) -> Result<Lexicon> {
    if n == 0 || n > WORDS.len() {
        return Err(Error::invalid(format!("lexicon size must be in 1..={}", WORDS.len())));
    }
    let mut lex = Lexicon::new();
    for (w, p) in &WORDS[..n] {
        let pron: Vec<&str> = p.split(' ').collect();
        lex.insert(w, alphabet.encode(&pron)?, alphabet)?;
    }
    Ok(lex)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub channels: usize,
    pub bin_ms: usize,
    pub sessions: usize,
    pub trials_per_session: usize,
    pub block_min: usize,
    pub block_max: usize,
    pub lexicon_words: usize,
    /// Distinct sentences in the corpus.
    pub corpus_sentences: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Allowed successors per word in the sentence generator.
    pub successors: usize,
    /// Inclusive duration range in bins for phonemes and for `SIL`.
    pub phoneme_bins: (usize, usize),
    pub sil_bins: (usize, usize),
    pub template_sd: f64,
    pub noise_sd: f64,
    /// Drift magnitude `δ` reached by the last session.
    pub drift: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            channels: 64,
            bin_ms: 20,
            sessions: 8,
            trials_per_session: 150,
            block_min: 20,
            block_max: 50,
            lexicon_words: 40,
            corpus_sentences: 1000,
            min_words: 2,
            max_words: 5,
            successors: 16,
            phoneme_bins: (6, 10),
            sil_bins: (5, 8),
            template_sd: 1.0,
            noise_sd: 0.8,
            drift: 0.0,
            val_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("synth: {m}")));
        if self.channels == 0 || self.sessions == 0 || self.bin_ms == 0 {
            return bad("channels, sessions and bin_ms must be positive");
        }
        if self.block_min == 0 || 2 * self.block_min > self.block_max + 1 {
            return bad("need 0 < block_min and 2·block_min ≤ block_max + 1");
        }
        if self.trials_per_session < self.block_min {
            return bad("trials_per_session must be at least block_min");
        }
        if self.min_words == 0 || self.min_words > self.max_words || self.successors == 0 {
            return bad("need 0 < min_words ≤ max_words and successors > 0");
        }
        if self.phoneme_bins.0 == 0
            || self.phoneme_bins.0 > self.phoneme_bins.1
            || self.sil_bins.0 == 0
            || self.sil_bins.0 > self.sil_bins.1
        {
            return bad("duration ranges must be non-empty and positive");
        }
        if self.corpus_sentences == 0 {
            return bad("corpus_sentences must be positive");
        }
        if !(self.noise_sd >= 0.0 && self.template_sd >= 0.0 && self.drift >= 0.0) {
            return bad("noise_sd, template_sd and drift must be non-negative");
        }
        if !(self.val_fraction >= 0.0 && self.test_fraction >= 0.0 && self.val_fraction + self.test_fraction < 1.0) {
            return bad("val_fraction + test_fraction must be in [0, 1)");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }

    /// `δ_s` for session `s`.
    pub fn session_drift(&self, s: usize) -> f64 {
        if self.sessions <= 1 {
            0.0
        } else {
            self.drift * s as f64 / (self.sessions - 1) as f64
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn normal(rng: &mut impl Rng) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

/// Per-label feature means and the per-session drift directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthWorld {
    /// `[labels × channels]`, one row per phoneme and a last row for `SIL`.
    pub templates: Vec<f64>,
    /// `u_s` per session; all zeros for session 0.
    pub gain_dirs: Vec<Vec<f64>>,
    /// `v_s` per session; all zeros for session 0.
    pub offset_dirs: Vec<Vec<f64>>,
}

/// Cumulative sums of i.i.d. `N(0, I)` steps, each rescaled to unit RMS.
fn walk(rng: &mut impl Rng, sessions: usize, channels: usize) -> Vec<Vec<f64>> {
    let mut pos = vec![0.0; channels];
    let mut out = vec![vec![0.0; channels]];
    for _ in 1..sessions {
        pos.iter_mut().for_each(|p| *p += normal(rng));
        let rms = (pos.iter().map(|p| p * p).sum::<f64>() / channels as f64).sqrt();
        out.push(pos.iter().map(|p| p / rms).collect());
    }
    out
}

impl SynthWorld {
    pub fn new(cfg: &SynthConfig, labels: usize) -> Self {
        let c = cfg.channels;
        let mut rng = stream(cfg.seed, Domain::Synth, u64::MAX, 0);
        let templates = (0..labels * c).map(|_| cfg.template_sd * normal(&mut rng)).collect();
        let mut rng = stream(cfg.seed, Domain::Drift, 0, 0);
        let gain_dirs = walk(&mut rng, cfg.sessions, c);
        let mut rng = stream(cfg.seed, Domain::Drift, 1, 0);
        let offset_dirs = walk(&mut rng, cfg.sessions, c);
        SynthWorld {
            templates,
            gain_dirs,
            offset_dirs,
        }
    }

    pub fn template(&self, label: usize, channels: usize) -> &[f64] {
        &self.templates[label * channels..(label + 1) * channels]
    }

    /// `(g_s, o_s)` for session `s` at drift magnitude `delta`.
    pub fn drift(&self, session: usize, delta: f64) -> (Vec<f64>, Vec<f64>) {
        (
            self.gain_dirs[session].iter().map(|u| (delta * u).exp()).collect(),
            self.offset_dirs[session].iter().map(|v| delta * v).collect(),
        )
    }
}

/// Word-level Markov chain: each word has a fixed set of allowed
/// successors and sentences start from a fixed set of first words.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceChain {
    words: Vec<String>,
    next: Vec<Vec<usize>>,
    starts: Vec<usize>,
    lengths: (usize, usize),
}

impl SentenceChain {
    pub fn new(cfg: &SynthConfig, words: &[&str]) -> Self {
        let mut rng = stream(cfg.seed, Domain::Synth, u64::MAX, 1);
        let n = words.len();
        let k = cfg.successors.min(n);
        let next = (0..n).map(|_| rand::seq::index::sample(&mut rng, n, k).into_vec()).collect();
        let starts = rand::seq::index::sample(&mut rng, n, k).into_vec();
        SentenceChain {
            words: words.iter().map(|w| w.to_string()).collect(),
            next,
            starts,
            lengths: (cfg.min_words, cfg.max_words),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<String> {
        let len = rng.random_range(self.lengths.0..=self.lengths.1);
        let mut w = self.starts[rng.random_range(0..self.starts.len())];
        let mut s = vec![self.words[w].clone()];
        for _ in 1..len {
            let succ = &self.next[w];
            w = succ[rng.random_range(0..succ.len())];
            s.push(self.words[w].clone());
        }
        s
    }
}

/// Distinct sentences sampled from the chain; this is the language-model
/// text.
pub fn generate_corpus(cfg: &SynthConfig, words: &[&str]) -> Vec<Vec<String>> {
    let chain = SentenceChain::new(cfg, words);
    let mut rng = stream(cfg.seed, Domain::Synth, u64::MAX, 2);
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    let mut attempts = 0;
    while out.len() < cfg.corpus_sentences && attempts < 100 * cfg.corpus_sentences {
        attempts += 1;
        let s = chain.sample(&mut rng);
        if seen.insert(s.clone()) {
            out.push(s);
        }
    }
    out
}

/// Renders one labelled utterance with no drift: returns features and the
/// label at every bin.
pub fn render(cfg: &SynthConfig, world: &SynthWorld, labels: &[usize], sil: usize, rng: &mut impl Rng) -> (Features, Vec<usize>) {
    let c = cfg.channels;
    let mut per_bin = Vec::new();
    for &l in labels {
        let (lo, hi) = if l == sil { cfg.sil_bins } else { cfg.phoneme_bins };
        let d = rng.random_range(lo..=hi);
        per_bin.extend(std::iter::repeat_n(l, d));
    }
    let mut data = Vec::with_capacity(per_bin.len() * c);
    for &l in &per_bin {
        for &m in world.template(l, c) {
            data.push(m + cfg.noise_sd * normal(rng));
        }
    }
    (Features::new(per_bin.len(), c, data).expect("consistent shape"), per_bin)
}

/// A generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub config: SynthConfig,
    pub config_hash: String,
    pub alphabet: PhonemeAlphabet,
    pub lexicon: Lexicon,
    pub corpus: Vec<Vec<String>>,
    /// Recording order: by session, then block, then position.
    pub trials: Vec<Trial>,
}

impl DatasetBundle {
    pub fn sessions(&self) -> usize {
        self.config.sessions
    }

    pub fn session(&self, s: usize) -> impl Iterator<Item = &Trial> {
        self.trials.iter().filter(move |t| t.session == s)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Trial> {
        self.trials.iter().filter(move |t| t.split == split)
    }
}

/// Generates the full dataset. Trial sentences are fresh draws from the
/// same chain as the language-model corpus, so test sentences need not occur
/// in it. Every trial uses its own random stream, so the result does not
/// depend on generation order.
pub fn generate(cfg: &SynthConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    let alphabet = PhonemeAlphabet::arpabet();
    let lexicon = builtin_lexicon(cfg.lexicon_words, &alphabet)?;
    let words: Vec<&str> = WORDS[..cfg.lexicon_words].iter().map(|(w, _)| *w).collect();
    let corpus = generate_corpus(cfg, &words);
    let chain = SentenceChain::new(cfg, &words);
    let trials = render_sessions(cfg, &alphabet, |rng| {
        let words = chain.sample(rng);
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        Ok((lexicon.sentence_phonemes(&refs, &alphabet)?, words.join(" ")))
    })?;
    Ok(bundle(cfg, alphabet, lexicon, corpus, trials))
}

/// Generates trials whose sentences are drawn uniformly from `corpus`.
pub fn generate_from(cfg: &SynthConfig, alphabet: PhonemeAlphabet, lexicon: Lexicon, corpus: Vec<Vec<String>>) -> Result<DatasetBundle> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("synth: empty corpus"));
    }
    let mut spelled = Vec::with_capacity(corpus.len());
    for s in &corpus {
        let refs: Vec<&str> = s.iter().map(String::as_str).collect();
        spelled.push((lexicon.sentence_phonemes(&refs, &alphabet)?, s.join(" ")));
    }
    let trials = render_sessions(cfg, &alphabet, |rng| Ok(spelled[rng.random_range(0..spelled.len())].clone()))?;
    Ok(bundle(cfg, alphabet, lexicon, corpus, trials))
}

fn bundle(cfg: &SynthConfig, alphabet: PhonemeAlphabet, lexicon: Lexicon, corpus: Vec<Vec<String>>, trials: Vec<Trial>) -> DatasetBundle {
    DatasetBundle {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        alphabet,
        lexicon,
        corpus,
        trials,
    }
}

/// Lays out sessions and blocks and renders each trial from the sentence
/// `pick` draws on that trial's stream.
fn render_sessions(
    cfg: &SynthConfig,
    alphabet: &PhonemeAlphabet,
    mut pick: impl FnMut(&mut StreamRng) -> Result<(Vec<usize>, String)>,
) -> Result<Vec<Trial>> {
    let world = SynthWorld::new(cfg, alphabet.sil() + 1);
    let sil = alphabet.sil();
    let mut trials = Vec::with_capacity(cfg.sessions * cfg.trials_per_session);
    for s in 0..cfg.sessions {
        let (gain, offset) = world.drift(s, cfg.session_drift(s));
        let mut layout = stream(cfg.seed, Domain::Synth, s as u64, u64::MAX);
        let mut blocks = Vec::new();
        let mut left = cfg.trials_per_session;
        while left > 0 {
            let b = if left <= cfg.block_max {
                left
            } else {
                layout.random_range(cfg.block_min..=cfg.block_max.min(left - cfg.block_min))
            };
            blocks.push(b);
            left -= b;
        }
        let mut index = 0usize;
        for (block, &size) in blocks.iter().enumerate() {
            for _ in 0..size {
                let id = (s * cfg.trials_per_session + index) as u64;
                let mut rng = stream(cfg.seed, Domain::Synth, s as u64, index as u64);
                let (phonemes, text) = pick(&mut rng)?;
                let (mut features, _) = render(cfg, &world, &phonemes, sil, &mut rng);
                for t in 0..features.bins() {
                    for (c, x) in features.row_mut(t).iter_mut().enumerate() {
                        *x = gain[c] * *x + offset[c];
                    }
                }
                let u: f64 = rng.random();
                let split = if u < cfg.val_fraction {
                    Split::Val
                } else if u < cfg.val_fraction + cfg.test_fraction {
                    Split::Test
                } else {
                    Split::Train
                };
                trials.push(Trial {
                    id,
                    session: s,
                    block,
                    split,
                    features,
                    phonemes,
                    text,
                });
                index += 1;
            }
        }
    }
    Ok(trials)
}

/// Chronological day split.
#[derive(Debug, Clone, PartialEq)]
pub struct DaySplit {
    /// All trials of the first `train_days` sessions, split labels kept.
    pub train: Vec<Trial>,
    /// All trials of each held-out session in recording order.
    pub heldout: BTreeMap<usize, Vec<Trial>>,
}

pub fn split_days(bundle: &DatasetBundle, train_days: usize, heldout_days: usize) -> Result<DaySplit> {
    if train_days + heldout_days > bundle.sessions() {
        return Err(Error::invalid(format!(
            "{train_days} train + {heldout_days} held-out days exceed {} sessions",
            bundle.sessions()
        )));
    }
    let train = bundle.trials.iter().filter(|t| t.session < train_days).cloned().collect();
    let heldout = (train_days..train_days + heldout_days)
        .map(|s| (s, bundle.session(s).cloned().collect()))
        .collect();
    Ok(DaySplit { train, heldout })
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    config: SynthConfig,
    config_hash: String,
    alphabet: PhonemeAlphabet,
    lexicon: Lexicon,
    corpus: Vec<Vec<String>>,
    trials: usize,
}

/// Serializes a dataset.
///
/// Layout (little-endian): magic `STXDATA\0`, `u32` version, `u64` header
/// length, JSON header (config, hash, alphabet, lexicon, corpus, trial
/// count), then per trial `u64` id, `u32` session, `u32` block, `u8` split,
/// `u32` bins, `u32` channels, `f64` features, `u32` label count, `u32`
/// labels, `u32` text length, UTF-8 text; finally SHA-256 of all preceding
/// bytes.
pub fn encode_dataset(bundle: &DatasetBundle) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&DATASET_FORMAT_VERSION.to_le_bytes());
    let header = serde_json::to_vec(&FileHeader {
        config: bundle.config.clone(),
        config_hash: bundle.config_hash.clone(),
        alphabet: bundle.alphabet.clone(),
        lexicon: bundle.lexicon.clone(),
        corpus: bundle.corpus.clone(),
        trials: bundle.trials.len(),
    })
    .expect("header serializes");
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in &bundle.trials {
        out.extend_from_slice(&t.id.to_le_bytes());
        out.extend_from_slice(&(t.session as u32).to_le_bytes());
        out.extend_from_slice(&(t.block as u32).to_le_bytes());
        out.push(t.split.code());
        out.extend_from_slice(&(t.features.bins() as u32).to_le_bytes());
        out.extend_from_slice(&(t.features.channels() as u32).to_le_bytes());
        for v in t.features.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(t.phonemes.len() as u32).to_le_bytes());
        for &p in &t.phonemes {
            out.extend_from_slice(&(p as u32).to_le_bytes());
        }
        out.extend_from_slice(&(t.text.len() as u32).to_le_bytes());
        out.extend_from_slice(t.text.as_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format("dataset", format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<DatasetBundle> {
    if bytes.len() < MAGIC.len() + 4 + 8 + 32 || &bytes[..8] != MAGIC {
        return Err(Error::format("dataset", "not a dataset file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let mut c = Cursor { buf: body, pos: 8 };
    let version = c.u32()?;
    if version != DATASET_FORMAT_VERSION {
        return Err(Error::format(
            "dataset",
            format!("format version {version}, expected {DATASET_FORMAT_VERSION}"),
        ));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::format("dataset", "checksum mismatch (truncated or corrupt file)"));
    }
    let hlen = c.u64()? as usize;
    let h: FileHeader = serde_json::from_slice(c.take(hlen)?).map_err(|e| Error::format("dataset", format!("header: {e}")))?;
    let mut trials = Vec::with_capacity(h.trials);
    for _ in 0..h.trials {
        let id = c.u64()?;
        let session = c.u32()? as usize;
        let block = c.u32()? as usize;
        let split = Split::from_code(c.u8()?).ok_or_else(|| Error::format("dataset", "bad split code"))?;
        let bins = c.u32()? as usize;
        let channels = c.u32()? as usize;
        let raw = c.take(bins * channels * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let features = Features::new(bins, channels, data)?;
        let n = c.u32()? as usize;
        let phonemes = (0..n).map(|_| c.u32().map(|p| p as usize)).collect::<Result<Vec<_>>>()?;
        let tl = c.u32()? as usize;
        let text = String::from_utf8(c.take(tl)?.to_vec()).map_err(|e| Error::format("dataset", e.to_string()))?;
        trials.push(Trial {
            id,
            session,
            block,
            split,
            features,
            phonemes,
            text,
        });
    }
    if c.pos != body.len() {
        return Err(Error::format("dataset", format!("{} trailing bytes", body.len() - c.pos)));
    }
    Ok(DatasetBundle {
        config: h.config,
        config_hash: h.config_hash,
        alphabet: h.alphabet,
        lexicon: h.lexicon,
        corpus: h.corpus,
        trials,
    })
}

pub fn save_dataset(path: &Path, bundle: &DatasetBundle) -> Result<()> {
    std::fs::File::create(path)?.write_all(&encode_dataset(bundle))?;
    Ok(())
}

/// A loaded dataset plus a warning when it was generated from a config
/// other than the one the caller expects.
#[derive(Debug)]
pub struct LoadedDataset {
    pub bundle: DatasetBundle,
    pub warning: Option<String>,
}

pub fn load_dataset(path: &Path, expected: Option<&SynthConfig>) -> Result<LoadedDataset> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let bundle = decode_dataset(&buf)?;
    let mut warning = None;
    if bundle.config.hash() != bundle.config_hash {
        warning = Some(format!(
            "stored config hash {} does not match its stored config",
            bundle.config_hash
        ));
    } else if let Some(cfg) = expected {
        if cfg.hash() != bundle.config_hash {
            warning = Some(format!(
                "dataset was generated with config {}, current config is {}",
                bundle.config_hash,
                cfg.hash()
            ));
        }
    }
    Ok(LoadedDataset { bundle, warning })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_lexicon_covers_every_phoneme() {
        let a = PhonemeAlphabet::arpabet();
        let lex = builtin_lexicon(40, &a).unwrap();
        let mut used = vec![false; a.sil()];
        for (_, p) in lex.entries() {
            p.iter().for_each(|&x| used[x] = true);
        }
        assert!(used.iter().all(|&u| u));
    }

    #[test]
    fn reference_session_has_identity_drift() {
        let cfg = SynthConfig {
            drift: 0.7,
            ..Default::default()
        };
        let w = SynthWorld::new(&cfg, 40);
        let (g, o) = w.drift(0, cfg.session_drift(0));
        assert!(g.iter().all(|&x| x == 1.0) && o.iter().all(|&x| x == 0.0));
        assert_eq!(cfg.session_drift(cfg.sessions - 1), 0.7);
    }
}
