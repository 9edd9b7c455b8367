//! Word lexicon and n-gram language model.
//!
//! The model is an interpolated absolute-discounting backoff model:
//!
//! ```text
//! p(w | h) = max(c(h,w) − d, 0) / c(h) + d·N₁₊(h·)/c(h) · p(w | h')   if c(h) > 0
//!          = p(w | h')                                                otherwise
//! ```
//!
//! where `h'` drops the oldest word of `h` and the recursion ends in the
//! uniform distribution over the vocabulary. Natural logarithms throughout.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ctc::PhonemeAlphabet;
use crate::error::{Error, Result};

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

/// Word → pronunciation table. Several words may share a pronunciation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<Vec<usize>>>,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a pronunciation. Empty pronunciations and labels outside the
    /// alphabet's phonemes (including `SIL` and the blank) are rejected.
    pub fn insert(&mut self, word: &str, pron: Vec<usize>, alphabet: &PhonemeAlphabet) -> Result<()> {
        if word.is_empty() || word.chars().any(char::is_whitespace) {
            return Err(Error::invalid(format!("invalid lexicon word {word:?}")));
        }
        if pron.is_empty() {
            return Err(Error::invalid(format!("empty pronunciation for `{word}`")));
        }
        if let Some(&bad) = pron.iter().find(|&&p| p >= alphabet.sil()) {
            return Err(Error::invalid(format!(
                "pronunciation of `{word}` uses label {bad}, which is not a phoneme"
            )));
        }
        let prons = self.entries.entry(word.to_string()).or_default();
        if !prons.contains(&pron) {
            prons.push(pron);
        }
        Ok(())
    }

    pub fn pronunciations(&self, word: &str) -> Option<&[Vec<usize>]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains_key(word)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// `(word, pronunciation)` pairs in word order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.entries
            .iter()
            .flat_map(|(w, ps)| ps.iter().map(move |p| (w.as_str(), p.as_slice())))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parses `word<TAB>PH PH ...` lines; blank lines and `#` comments are
    /// skipped.
    pub fn from_tsv(text: &str, alphabet: &PhonemeAlphabet) -> Result<Self> {
        let mut lex = Lexicon::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, phones) = line
                .split_once('\t')
                .ok_or_else(|| Error::format("lexicon", format!("line {}: missing TAB", n + 1)))?;
            let symbols: Vec<&str> = phones.split_whitespace().collect();
            let pron = alphabet
                .encode(&symbols)
                .map_err(|e| Error::format("lexicon", format!("line {}: {e}", n + 1)))?;
            lex.insert(word, pron, alphabet)
                .map_err(|e| Error::format("lexicon", format!("line {}: {e}", n + 1)))?;
        }
        Ok(lex)
    }

    pub fn to_tsv(&self, alphabet: &PhonemeAlphabet) -> String {
        let mut out = String::new();
        for (w, p) in self.entries() {
            let _ = writeln!(out, "{w}\t{}", alphabet.render(p));
        }
        out
    }

    /// Phoneme targets for a sentence: pronunciations (first variant)
    /// separated by `SIL`.
    pub fn sentence_phonemes(&self, words: &[&str], alphabet: &PhonemeAlphabet) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for (i, w) in words.iter().enumerate() {
            let p = self.entries.get(*w).ok_or_else(|| Error::OutOfVocabulary(w.to_string()))?;
            if i > 0 {
                out.push(alphabet.sil());
            }
            out.extend_from_slice(&p[0]);
        }
        Ok(out)
    }
}

/// Word-level n-gram model; immutable after training.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    order: usize,
    discount: f64,
    /// Sorted; includes `<s>`, `</s>` and `<unk>`.
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    bos: u32,
    unk: u32,
    /// `ln(max(c(h,w) − d, 0) / c(h))` keyed by `h ++ [w]`.
    terms: HashMap<Vec<u32>, f64>,
    /// `ln(d·N₁₊(h·)/c(h))` keyed by `h` (possibly empty).
    backoff: HashMap<Vec<u32>, f64>,
}

pub const LM_FORMAT_VERSION: u32 = 1;

impl NGramModel {
    /// Trains on tokenized sentences. Sentences are wrapped with `<s>`
    /// padding and `</s>`; the vocabulary is every corpus word plus `</s>`
    /// and `<unk>`.
    pub fn train<S: AsRef<str>>(corpus: &[Vec<S>], order: usize, discount: f64) -> Result<Self> {
        if order < 1 {
            return Err(Error::invalid("n-gram order must be at least 1"));
        }
        if corpus.is_empty() {
            return Err(Error::invalid("empty LM training corpus"));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::invalid(format!("discount {discount} outside (0, 1)")));
        }
        let mut words: Vec<String> = vec![BOS.into(), EOS.into(), UNK.into()];
        for s in corpus {
            for w in s {
                let w = w.as_ref();
                if w == BOS || w == EOS {
                    return Err(Error::invalid(format!("corpus contains reserved token {w}")));
                }
                words.push(w.to_string());
            }
        }
        words.sort();
        words.dedup();
        let mut model = Self::with_vocab(order, discount, words)?;

        // counts[k] maps (context of length k, word) to its count.
        let mut counts: Vec<BTreeMap<Vec<u32>, u64>> = vec![BTreeMap::new(); order];
        for s in corpus {
            let mut ids = vec![model.bos; order - 1];
            ids.extend(s.iter().map(|w| model.index[w.as_ref()]));
            ids.push(model.index[EOS]);
            for pos in order - 1..ids.len() {
                for (k, table) in counts.iter_mut().enumerate() {
                    *table.entry(ids[pos - k..=pos].to_vec()).or_default() += 1;
                }
            }
        }
        for table in &counts {
            let mut ctx_total: BTreeMap<&[u32], (u64, u64)> = BTreeMap::new();
            for (key, &c) in table {
                let e = ctx_total.entry(&key[..key.len() - 1]).or_default();
                e.0 += c;
                e.1 += 1;
            }
            for (key, &c) in table {
                let (total, _) = ctx_total[&key[..key.len() - 1]];
                model.terms.insert(key.clone(), ((c as f64 - discount) / total as f64).ln());
            }
            for (ctx, (total, types)) in ctx_total {
                model.backoff.insert(ctx.to_vec(), (discount * types as f64 / total as f64).ln());
            }
        }
        Ok(model)
    }

    fn with_vocab(order: usize, discount: f64, vocab: Vec<String>) -> Result<Self> {
        let index: HashMap<String, u32> = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        let (Some(&bos), Some(&unk)) = (index.get(BOS), index.get(UNK)) else {
            return Err(Error::format("lm", "vocabulary lacks <s> or <unk>"));
        };
        if !index.contains_key(EOS) {
            return Err(Error::format("lm", "vocabulary lacks </s>"));
        }
        Ok(NGramModel {
            order,
            discount,
            vocab,
            index,
            bos,
            unk,
            terms: HashMap::new(),
            backoff: HashMap::new(),
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// Predictable words (everything except `<s>`), sorted.
    pub fn vocab(&self) -> impl Iterator<Item = &str> {
        self.vocab.iter().map(String::as_str).filter(|w| *w != BOS)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len() - 1
    }

    /// Word id, with unknown words mapped to `<unk>`.
    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(self.unk)
    }

    pub fn bos(&self) -> u32 {
        self.bos
    }

    pub fn eos(&self) -> u32 {
        self.index[EOS]
    }

    /// `ln p(next | history)` on word ids. Only the last `order − 1`
    /// history entries are used; shorter histories are padded with `<s>`.
    pub fn logprob_ids(&self, history: &[u32], next: u32) -> f64 {
        let n = self.order - 1;
        let mut ctx: Vec<u32> = Vec::with_capacity(n + 1);
        let take = history.len().min(n);
        ctx.extend(std::iter::repeat_n(self.bos, n - take));
        ctx.extend_from_slice(&history[history.len() - take..]);
        let mut p = 1.0 / self.vocab_size() as f64;
        for k in 0..=n {
            let h = &ctx[n - k..];
            if let Some(&bo) = self.backoff.get(h) {
                let mut key = h.to_vec();
                key.push(next);
                let term = self.terms.get(&key).map_or(0.0, |t| t.exp());
                p = term + bo.exp() * p;
            }
        }
        p.ln()
    }

    /// `ln p(next | history)` on words.
    pub fn logprob(&self, history: &[&str], next: &str) -> f64 {
        let h: Vec<u32> = history.iter().map(|w| if *w == BOS { self.bos } else { self.id(w) }).collect();
        self.logprob_ids(&h, self.id(next))
    }

    /// Log-probability of a whole sentence including `</s>`.
    pub fn sentence_logprob(&self, words: &[&str]) -> f64 {
        let ids: Vec<u32> = words.iter().map(|w| self.id(w)).collect();
        let mut total = 0.0;
        for i in 0..ids.len() {
            total += self.logprob_ids(&ids[..i], ids[i]);
        }
        total + self.logprob_ids(&ids, self.eos())
    }

    /// Canonical text form.
    ///
    /// ```text
    /// \speechtx-lm\
    /// version 1
    /// order 3
    /// discount 0.75
    /// \vocab\            one word per line, sorted
    /// \terms\            ln-term TAB context words... next word
    /// \backoff\          ln-weight TAB context words (may be empty)
    /// \end\
    /// ```
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "\\speechtx-lm\\");
        let _ = writeln!(out, "version {LM_FORMAT_VERSION}");
        let _ = writeln!(out, "order {}", self.order);
        let _ = writeln!(out, "discount {}", self.discount);
        let _ = writeln!(out, "\\vocab\\");
        for w in &self.vocab {
            let _ = writeln!(out, "{w}");
        }
        let render = |key: &[u32]| key.iter().map(|&i| self.vocab[i as usize].as_str()).collect::<Vec<_>>().join(" ");
        let mut terms: Vec<(&Vec<u32>, &f64)> = self.terms.iter().collect();
        terms.sort_by(|a, b| (a.0.len(), a.0).cmp(&(b.0.len(), b.0)));
        let _ = writeln!(out, "\\terms\\");
        for (k, v) in terms {
            let _ = writeln!(out, "{v}\t{}", render(k));
        }
        let mut bos: Vec<(&Vec<u32>, &f64)> = self.backoff.iter().collect();
        bos.sort_by(|a, b| (a.0.len(), a.0).cmp(&(b.0.len(), b.0)));
        let _ = writeln!(out, "\\backoff\\");
        for (k, v) in bos {
            let _ = writeln!(out, "{v}\t{}", render(k));
        }
        let _ = writeln!(out, "\\end\\");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |d: String| Error::format("lm", d);
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| {
            lines
                .next()
                .map(|(n, l)| (n + 1, l))
                .ok_or_else(|| bad(format!("unexpected end of file, expected {what}")))
        };
        let (_, magic) = next("header")?;
        if magic != "\\speechtx-lm\\" {
            return Err(bad("missing \\speechtx-lm\\ header".into()));
        }
        let field = |line: (usize, &str), key: &str| -> Result<String> {
            line.1
                .strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("line {}: expected `{key}`", line.0)))
        };
        let version: u32 = field(next("version")?, "version")?
            .parse()
            .map_err(|_| bad("unparsable version".into()))?;
        if version != LM_FORMAT_VERSION {
            return Err(bad(format!("format version {version}, expected {LM_FORMAT_VERSION}")));
        }
        let order: usize = field(next("order")?, "order")?
            .parse()
            .map_err(|_| bad("unparsable order".into()))?;
        let discount: f64 = field(next("discount")?, "discount")?
            .parse()
            .map_err(|_| bad("unparsable discount".into()))?;
        if order < 1 {
            return Err(bad("order must be at least 1".into()));
        }
        if next("\\vocab\\")?.1 != "\\vocab\\" {
            return Err(bad("missing \\vocab\\ section".into()));
        }
        let mut vocab = Vec::new();
        let mut section = loop {
            let (n, l) = next("\\terms\\")?;
            if l == "\\terms\\" {
                break "terms";
            }
            if l.is_empty() || l.contains(char::is_whitespace) {
                return Err(bad(format!("line {n}: invalid vocabulary word")));
            }
            vocab.push(l.to_string());
        };
        if vocab.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("vocabulary not strictly sorted".into()));
        }
        let mut model = Self::with_vocab(order, discount, vocab)?;
        loop {
            let (n, l) = next("\\end\\")?;
            match l {
                "\\backoff\\" if section == "terms" => {
                    section = "backoff";
                    continue;
                }
                "\\end\\" if section == "backoff" => break,
                _ => {}
            }
            let (v, words) = l.split_once('\t').ok_or_else(|| bad(format!("line {n}: missing TAB")))?;
            let v: f64 = v.parse().map_err(|_| bad(format!("line {n}: bad number")))?;
            let key = words
                .split(' ')
                .filter(|w| !w.is_empty())
                .map(|w| {
                    model
                        .index
                        .get(w)
                        .copied()
                        .ok_or_else(|| bad(format!("line {n}: unknown word `{w}`")))
                })
                .collect::<Result<Vec<u32>>>()?;
            let max_len = if section == "terms" { order } else { order - 1 };
            if key.len() > max_len || (section == "terms" && key.is_empty()) {
                return Err(bad(format!("line {n}: n-gram length {} invalid for order {order}", key.len())));
            }
            let table = if section == "terms" { &mut model.terms } else { &mut model.backoff };
            table.insert(key, v);
        }
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn unigram_hand_counts() {
        let lm = NGramModel::train(&[toks("a b a b")], 1, 0.75).unwrap();
        // Tokens: a a b b </s>; 3 types, N = 5, V = 4 (a b </s> <unk>).
        let bo: f64 = 0.75 * 3.0 / 5.0;
        let pa: f64 = (2.0 - 0.75) / 5.0 + bo / 4.0;
        assert!((lm.logprob(&[], "a") - pa.ln()).abs() < 1e-14);
        assert_eq!(lm.logprob(&[], "a"), lm.logprob(&[], "b"));
        assert!((lm.logprob(&[], "zzz") - (bo / 4.0).ln()).abs() < 1e-14);
    }

    #[test]
    fn order_checked() {
        assert!(NGramModel::train(&[toks("a")], 0, 0.75).is_err());
        assert!(NGramModel::train::<String>(&[], 2, 0.75).is_err());
    }

    #[test]
    fn lexicon_tsv_round_trip() {
        let a = PhonemeAlphabet::arpabet();
        let lex = Lexicon::from_tsv("to\tT UW\ntwo\tT UW\n# note\n\nhello\tHH AH L OW\n", &a).unwrap();
        assert_eq!(lex.len(), 3);
        assert_eq!(Lexicon::from_tsv(&lex.to_tsv(&a), &a).unwrap(), lex);
        assert!(Lexicon::from_tsv("bad T UW\n", &a).is_err());
        assert!(Lexicon::from_tsv("x\tSIL\n", &a).is_err());
        assert!(Lexicon::from_tsv("x\t\n", &a).is_err());
    }
}
