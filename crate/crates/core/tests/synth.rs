use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use speechtx_core::ctc::{ctc_loss, PhonemeAlphabet};
use speechtx_core::data::Split;
use speechtx_core::model::{DecoderModel, ModelConfig};
use speechtx_core::preprocess::AugmentConfig;
use speechtx_core::synth::{
    builtin_lexicon, decode_dataset, encode_dataset, generate, generate_from, load_dataset, render, save_dataset, split_days,
    DatasetBundle, SynthConfig, SynthWorld,
};
use speechtx_core::train::{eval_patches, train, TrainConfig};
use speechtx_core::Error;

fn small(sessions: usize, per_session: usize) -> SynthConfig {
    SynthConfig {
        sessions,
        trials_per_session: per_session,
        channels: 16,
        ..Default::default()
    }
}

#[test]
fn noiseless_frames_are_recovered_by_nearest_template() {
    let cfg = SynthConfig {
        noise_sd: 0.0,
        ..Default::default()
    };
    let alphabet = PhonemeAlphabet::arpabet();
    let labels = alphabet.sil() + 1;
    let world = SynthWorld::new(&cfg, labels);
    let c = cfg.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let seq: Vec<usize> = (0..alphabet.sil()).flat_map(|p| [p, alphabet.sil()]).collect();
    let (x, per_bin) = render(&cfg, &world, &seq, alphabet.sil(), &mut rng);
    assert_eq!(x.bins(), per_bin.len());
    for t in 0..x.bins() {
        let row = x.row(t);
        let nearest = (0..labels)
            .min_by(|&a, &b| {
                let d = |l: usize| world.template(l, c).iter().zip(row).map(|(m, v)| (m - v).powi(2)).sum::<f64>();
                d(a).total_cmp(&d(b))
            })
            .unwrap();
        assert_eq!(nearest, per_bin[t], "bin {t}");
    }
}

#[test]
fn durations_follow_the_configured_ranges() {
    let cfg = SynthConfig::default();
    let alphabet = PhonemeAlphabet::arpabet();
    let world = SynthWorld::new(&cfg, alphabet.sil() + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let seq = vec![3, alphabet.sil(), 4, 7];
    for _ in 0..50 {
        let (_, per_bin) = render(&cfg, &world, &seq, alphabet.sil(), &mut rng);
        let mut runs: Vec<(usize, usize)> = Vec::new();
        for &l in &per_bin {
            match runs.last_mut() {
                Some((last, n)) if *last == l => *n += 1,
                _ => runs.push((l, 1)),
            }
        }
        assert_eq!(runs.iter().map(|r| r.0).collect::<Vec<_>>(), seq);
        for (l, n) in runs {
            let (lo, hi) = if l == alphabet.sil() { cfg.sil_bins } else { cfg.phoneme_bins };
            assert!((lo..=hi).contains(&n), "label {l} held for {n} bins");
        }
    }
}

fn per_trial_channel_means(bundle: &DatasetBundle, s: usize) -> Vec<Vec<f64>> {
    bundle
        .session(s)
        .map(|t| {
            let f = &t.features;
            (0..f.channels())
                .map(|c| (0..f.bins()).map(|b| f.get(b, c)).sum::<f64>() / f.bins() as f64)
                .collect()
        })
        .collect()
}

fn welch_t(a: &[f64], b: &[f64]) -> f64 {
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v / n)
    };
    let ((ma, va), (mb, vb)) = (stats(a), stats(b));
    (ma - mb) / (va + vb).sqrt()
}

#[test]
fn zero_drift_sessions_share_their_moments() {
    let cfg = small(4, 150);
    let bundle = generate(&cfg).unwrap();
    let reference = per_trial_channel_means(&bundle, 0);
    for s in 1..4 {
        let other = per_trial_channel_means(&bundle, s);
        for c in 0..cfg.channels {
            let a: Vec<f64> = reference.iter().map(|r| r[c]).collect();
            let b: Vec<f64> = other.iter().map(|r| r[c]).collect();
            let t = welch_t(&a, &b);
            assert!(t.abs() < 4.0, "session {s} channel {c}: t = {t}");
        }
    }
}

#[test]
fn drifted_sessions_apply_the_affine_transform() {
    let base = small(4, 30);
    let drifted = SynthConfig {
        drift: 0.8,
        ..base.clone()
    };
    let a = generate(&base).unwrap();
    let b = generate(&drifted).unwrap();
    let world = SynthWorld::new(&drifted, a.alphabet.sil() + 1);
    for (x, y) in a.trials.iter().zip(&b.trials) {
        assert_eq!(x.phonemes, y.phonemes);
        let (g, o) = world.drift(x.session, drifted.session_drift(x.session));
        for (i, (u, v)) in x.features.data().iter().zip(y.features.data()).enumerate() {
            let c = i % base.channels;
            assert!((g[c] * u + o[c] - v).abs() < 1e-12);
        }
    }
}

#[test]
fn drift_grows_with_session_index_and_gains_stay_positive() {
    let cfg = SynthConfig {
        drift: 2.0,
        ..Default::default()
    };
    let world = SynthWorld::new(&cfg, 40);
    let mut last = -1.0;
    for s in 0..cfg.sessions {
        let (g, o) = world.drift(s, cfg.session_drift(s));
        assert!(g.iter().all(|&x| x > 0.0));
        if s > 0 {
            let rms = (world.gain_dirs[s].iter().map(|u| u * u).sum::<f64>() / cfg.channels as f64).sqrt();
            assert!((rms - 1.0).abs() < 1e-12);
        }
        let size = g.iter().map(|x| x.ln().powi(2)).sum::<f64>() + o.iter().map(|x| x * x).sum::<f64>();
        assert!(size > last);
        last = size;
    }
}

#[test]
fn generation_is_deterministic_and_keyed_per_trial() {
    let cfg = small(3, 40);
    let a = generate(&cfg).unwrap();
    assert_eq!(a, generate(&cfg).unwrap());
    let more = generate(&SynthConfig {
        trials_per_session: 60,
        ..cfg.clone()
    })
    .unwrap();
    let first: Vec<_> = more.session(0).take(40).collect();
    for (x, y) in a.session(0).zip(first) {
        assert_eq!(x.features, y.features);
        assert_eq!(x.text, y.text);
    }
    let other = generate(&SynthConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.trials[0].features, other.trials[0].features);
}

#[test]
fn blocks_and_splits_are_well_formed() {
    let cfg = SynthConfig::default();
    let bundle = generate(&cfg).unwrap();
    for s in 0..cfg.sessions {
        let trials: Vec<_> = bundle.session(s).collect();
        assert_eq!(trials.len(), cfg.trials_per_session);
        let blocks = trials.last().unwrap().block + 1;
        for b in 0..blocks {
            let n = trials.iter().filter(|t| t.block == b).count();
            assert!((cfg.block_min..=cfg.block_max).contains(&n), "session {s} block {b} has {n}");
        }
    }
    let ids = |sp| bundle.split(sp).map(|t| t.id).collect::<BTreeSet<_>>();
    let (tr, va, te) = (ids(Split::Train), ids(Split::Val), ids(Split::Test));
    assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
    assert_eq!(tr.len() + va.len() + te.len(), bundle.trials.len());
    assert!(!va.is_empty() && !te.is_empty());
    for t in &bundle.trials {
        let words: Vec<&str> = t.text.split(' ').collect();
        assert_eq!(bundle.lexicon.sentence_phonemes(&words, &bundle.alphabet).unwrap(), t.phonemes);
    }
}

#[test]
fn oov_corpus_word_is_rejected_by_name() {
    let cfg = small(1, 20);
    let alphabet = PhonemeAlphabet::arpabet();
    let lexicon = builtin_lexicon(10, &alphabet).unwrap();
    let corpus = vec![vec!["the".to_string(), "platypus".to_string()]];
    let err = generate_from(&cfg, alphabet, lexicon, corpus).unwrap_err();
    assert!(err.to_string().contains("platypus"), "{err}");
}

#[test]
fn day_splits_partition_sessions_chronologically() {
    let cfg = SynthConfig {
        sessions: 20,
        trials_per_session: 20,
        channels: 4,
        ..Default::default()
    };
    let bundle = generate(&cfg).unwrap();
    for (train_days, heldout_days) in [(15, 5), (12, 8)] {
        let sp = split_days(&bundle, train_days, heldout_days).unwrap();
        assert_eq!(sp.train.len(), train_days * 20);
        assert!(sp.train.iter().all(|t| t.session < train_days));
        assert_eq!(sp.heldout.keys().copied().collect::<Vec<_>>(), (train_days..20).collect::<Vec<_>>());
        for (s, trials) in &sp.heldout {
            assert_eq!(trials.len(), 20);
            assert!(trials.iter().all(|t| t.session == *s));
            assert!(trials.windows(2).all(|w| w[0].id < w[1].id));
        }
    }
    assert!(split_days(&bundle, 20, 0).unwrap().heldout.is_empty());
    assert!(matches!(split_days(&bundle, 15, 6), Err(Error::InvalidArgument(_))));
}

#[test]
fn dataset_files_round_trip() {
    let cfg = small(2, 25);
    let bundle = generate(&cfg).unwrap();
    let bytes = encode_dataset(&bundle);
    assert_eq!(decode_dataset(&bytes).unwrap(), bundle);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    save_dataset(&path, &bundle).unwrap();
    let loaded = load_dataset(&path, Some(&cfg)).unwrap();
    assert_eq!(loaded.bundle, bundle);
    assert!(loaded.warning.is_none());

    let other = SynthConfig { seed: 3, ..cfg };
    let warned = load_dataset(&path, Some(&other)).unwrap();
    assert!(warned.warning.unwrap().contains(&bundle.config_hash));
}

#[test]
fn truncated_or_corrupted_files_are_rejected() {
    let bundle = generate(&small(1, 20)).unwrap();
    let bytes = encode_dataset(&bundle);
    for cut in [0, 4, 12, bytes.len() / 2, bytes.len() - 1] {
        assert!(decode_dataset(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(decode_dataset(&flipped).is_err());
    let mut version = bytes;
    version[8] = 99;
    assert!(decode_dataset(&version).is_err());
}

#[test]
fn frozen_model_loses_more_on_drifted_sessions() {
    let cfg = SynthConfig {
        drift: 1.5,
        sessions: 3,
        trials_per_session: 300,
        ..Default::default()
    };
    let bundle = generate(&cfg).unwrap();
    let train_set: Vec<_> = bundle.session(0).take(100).cloned().collect();
    let tc = TrainConfig {
        epochs: 25,
        lr_drop_epoch: 20,
        eval_every: 25,
        batch_size: 16,
        ..Default::default()
    };
    let aug = AugmentConfig::default();
    let model = DecoderModel::new(ModelConfig::desk(), 0).unwrap();
    let out = train(model, &train_set, &[], &tc, &aug, 0, bundle.alphabet.sil(), |_| {}).unwrap();
    let model = out.last;
    let v = model.config().vocab_size;
    let loss = |trials: Vec<&speechtx_core::data::Trial>| {
        assert!(trials.len() >= 200);
        trials
            .iter()
            .map(|t| {
                let z = model.logits(&eval_patches(t, model.config().patch_bins, &aug).unwrap()).unwrap();
                ctc_loss(&z, z.len() / v, v, &t.phonemes, v - 1).unwrap().loss
            })
            .sum::<f64>()
            / trials.len() as f64
    };
    let reference = loss(bundle.session(0).skip(100).collect());
    let middle = loss(bundle.session(1).take(200).collect());
    let late = loss(bundle.session(2).take(200).collect());
    assert!(reference < middle && middle < late, "{reference} {middle} {late}");
}
