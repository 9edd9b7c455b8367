use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use speechtx_core::beam::{BeamDecoder, DecodeConfig};
use speechtx_core::eval::{evaluate, evaluate_with, spell_words};
use speechtx_core::lm::NGramModel;
use speechtx_core::model::{DecoderModel, ModelConfig};
use speechtx_core::preprocess::AugmentConfig;
use speechtx_core::synth::{generate, DatasetBundle, SynthConfig};
use speechtx_core::Trial;

fn bundle() -> DatasetBundle {
    generate(&SynthConfig {
        sessions: 2,
        trials_per_session: 60,
        ..Default::default()
    })
    .unwrap()
}

/// Two frames per label with a blank after each; `noise` adds N(0, noise)
/// jitter, and with probability `swap` a label frame pair points at a random
/// other phoneme.
fn fixture_logits(t: &Trial, v: usize, noise: f64, swap: f64, rng: &mut impl Rng) -> Vec<f64> {
    let blank = v - 1;
    let mut rows = Vec::new();
    for &p in &t.phonemes {
        let label = if rng.random_bool(swap) { rng.random_range(0..v - 2) } else { p };
        rows.extend([label, label, blank]);
    }
    let mut out = Vec::with_capacity(rows.len() * v);
    for r in rows {
        for k in 0..v {
            let base = if k == r { 8.0 } else { 0.0 };
            out.push(base + noise * (rng.random::<f64>() - 0.5));
        }
    }
    out
}

#[test]
fn perfect_logits_give_zero_error() {
    let b = bundle();
    let lm = NGramModel::train(&b.corpus, 3, 0.75).unwrap();
    let dec = BeamDecoder::new(&b.alphabet, &b.lexicon, &lm, DecodeConfig::online()).unwrap();
    let v = b.alphabet.vocab_size();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = evaluate_with(&b.trials, &dec, &b.alphabet, &b.lexicon, |t| {
        Ok(fixture_logits(t, v, 0.0, 0.0, &mut rng))
    })
    .unwrap();
    assert_eq!((r.wer, r.per, r.greedy_wer), (0.0, 0.0, 0.0));
    assert_eq!(r.confusion.total(), 0);
    assert_eq!(r.trials, b.trials.len());
    assert_eq!(r.per_session.values().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);
}

#[test]
fn lm_fusion_beats_spelling_the_greedy_path() {
    let b = bundle();
    let lm = NGramModel::train(&b.corpus, 3, 0.75).unwrap();
    let dec = BeamDecoder::new(&b.alphabet, &b.lexicon, &lm, DecodeConfig::online()).unwrap();
    let v = b.alphabet.vocab_size();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = evaluate_with(&b.trials, &dec, &b.alphabet, &b.lexicon, |t| {
        Ok(fixture_logits(t, v, 4.0, 0.08, &mut rng))
    })
    .unwrap();
    assert!(r.greedy_wer > 0.0 && r.per > 0.0);
    assert!(r.wer <= r.greedy_wer, "beam {} greedy {}", r.wer, r.greedy_wer);
    assert_eq!(r.confusion.total() as usize, r.phonemes.substitutions);
    let n: usize = r.rows.iter().map(|row| row.n).sum();
    assert_eq!(n, r.words.ref_len);
    assert!((r.wer - r.words.errors() as f64 / n as f64).abs() < 1e-15);
}

#[test]
fn model_evaluation_is_deterministic_and_checks_vocabulary() {
    let b = bundle();
    let lm = NGramModel::train(&b.corpus, 3, 0.75).unwrap();
    let dec = BeamDecoder::new(&b.alphabet, &b.lexicon, &lm, DecodeConfig::online()).unwrap();
    let model = DecoderModel::new(ModelConfig::desk(), 0).unwrap();
    let aug = AugmentConfig::default();
    let trials = &b.trials[..10];
    let a = evaluate(&model, trials, &dec, &b.alphabet, &b.lexicon, &aug).unwrap();
    assert_eq!(a, evaluate(&model, trials, &dec, &b.alphabet, &b.lexicon, &aug).unwrap());
    let wrong = DecoderModel::new(
        ModelConfig {
            vocab_size: 12,
            ..ModelConfig::desk()
        },
        0,
    )
    .unwrap();
    assert!(evaluate(&wrong, trials, &dec, &b.alphabet, &b.lexicon, &aug).is_err());
    assert!(evaluate(&model, &[], &dec, &b.alphabet, &b.lexicon, &aug).is_err());
}

#[test]
fn unknown_spellings_become_unk() {
    let b = bundle();
    let sil = b.alphabet.sil();
    let cat = b.lexicon.pronunciations("cat").unwrap()[0].clone();
    let mut seq = cat.clone();
    seq.push(sil);
    seq.extend([0, 0, 0]);
    seq.push(sil);
    seq.extend(cat);
    assert_eq!(spell_words(&seq, &b.lexicon, sil), vec!["cat", "<unk>", "cat"]);
}
