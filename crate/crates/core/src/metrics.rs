//! Word and phoneme error rates from minimum-edit alignments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One aligned position of a minimum-cost alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditOp {
    Match { r: usize, h: usize },
    Substitute { r: usize, h: usize },
    Delete { r: usize },
    Insert { h: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
    pub alignment: Vec<EditOp>,
}

impl EditBreakdown {
    pub fn distance(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// `(S + D + I) / N`. Fails on an empty reference.
    pub fn rate(&self) -> Result<f64> {
        if self.ref_len == 0 {
            return Err(Error::EmptyReference);
        }
        Ok(self.distance() as f64 / self.ref_len as f64)
    }
}

/// Levenshtein alignment of `hyp` against `reference`.
///
/// Among minimum-cost alignments the traceback prefers, at each step from
/// the end, match, then substitution, then deletion, then insertion.
pub fn edit_breakdown<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditBreakdown {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        d[i * w] = i;
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i * w + j] = sub.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }

    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    let (mut s, mut del, mut ins) = (0, 0, 0);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let diag = d[(i - 1) * w + j - 1];
            if reference[i - 1] == hyp[j - 1] && here == diag {
                ops.push(EditOp::Match { r: i - 1, h: j - 1 });
                i -= 1;
                j -= 1;
                continue;
            }
            if reference[i - 1] != hyp[j - 1] && here == diag + 1 {
                ops.push(EditOp::Substitute { r: i - 1, h: j - 1 });
                s += 1;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == d[(i - 1) * w + j] + 1 {
            ops.push(EditOp::Delete { r: i - 1 });
            del += 1;
            i -= 1;
        } else {
            ops.push(EditOp::Insert { h: j - 1 });
            ins += 1;
            j -= 1;
        }
    }
    ops.reverse();
    EditBreakdown {
        substitutions: s,
        deletions: del,
        insertions: ins,
        ref_len: n,
        alignment: ops,
    }
}

/// Substitution counts `[true][decoded]` over a corpus of label sequences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub size: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(size: usize) -> Self {
        ConfusionMatrix {
            size,
            counts: vec![0; size * size],
        }
    }

    pub fn get(&self, truth: usize, decoded: usize) -> u64 {
        self.counts[truth * self.size + decoded]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds the substitutions of one aligned pair. Labels must be below `size`.
    pub fn add(&mut self, reference: &[usize], hyp: &[usize], breakdown: &EditBreakdown) -> Result<()> {
        for op in &breakdown.alignment {
            if let EditOp::Substitute { r, h } = *op {
                let (a, b) = (reference[r], hyp[h]);
                if a >= self.size || b >= self.size {
                    return Err(Error::invalid(format!(
                        "label {} outside confusion matrix of size {}",
                        a.max(b),
                        self.size
                    )));
                }
                self.counts[a * self.size + b] += 1;
            }
        }
        Ok(())
    }
}

pub fn confusion_matrix(pairs: &[(Vec<usize>, Vec<usize>)], size: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(size);
    for (r, h) in pairs {
        cm.add(r, h, &edit_breakdown(r, h))?;
    }
    Ok(cm)
}

/// Micro-averaged totals over a corpus.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusErrors {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
}

impl CorpusErrors {
    pub fn add(&mut self, b: &EditBreakdown) {
        self.substitutions += b.substitutions;
        self.deletions += b.deletions;
        self.insertions += b.insertions;
        self.ref_len += b.ref_len;
    }

    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn rate(&self) -> Result<f64> {
        if self.ref_len == 0 {
            return Err(Error::EmptyReference);
        }
        Ok(self.errors() as f64 / self.ref_len as f64)
    }
}

/// Lowercases and splits on whitespace, dropping ASCII punctuation.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.chars().filter(|c| !c.is_ascii_punctuation()).collect::<String>().to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn word_errors(reference: &str, hyp: &str) -> EditBreakdown {
    edit_breakdown(&normalize_words(reference), &normalize_words(hyp))
}

/// Phoneme alignment with `sil` removed from both sides.
pub fn phoneme_errors(reference: &[usize], hyp: &[usize], sil: usize) -> EditBreakdown {
    let strip = |s: &[usize]| s.iter().copied().filter(|&p| p != sil).collect::<Vec<_>>();
    edit_breakdown(&strip(reference), &strip(hyp))
}

/// Per-trial report row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub trial_id: u64,
    pub wer: Option<f64>,
    pub per: Option<f64>,
    pub s: usize,
    pub d: usize,
    pub i: usize,
    pub n: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_substitution() {
        let b = edit_breakdown(&["a", "b", "c"], &["a", "x", "c"]);
        assert_eq!((b.substitutions, b.deletions, b.insertions), (1, 0, 0));
        assert!((b.rate().unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn prefers_substitution_over_indel_pair() {
        let b = edit_breakdown(&[1, 2], &[3, 4]);
        assert_eq!((b.substitutions, b.deletions, b.insertions), (2, 0, 0));
    }

    #[test]
    fn empty_reference_rate_is_an_error() {
        let b = edit_breakdown::<u8>(&[], &[1, 2]);
        assert_eq!(b.distance(), 2);
        assert!(matches!(b.rate(), Err(Error::EmptyReference)));
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_words("Hello, World!  ok"), vec!["hello", "world", "ok"]);
    }
}
