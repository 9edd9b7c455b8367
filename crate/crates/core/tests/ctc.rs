use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use speechtx_core::ctc::*;
use speechtx_core::tensor::gradcheck::{central_difference, max_relative_error};
use speechtx_core::tensor::{Segment, Tape};

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, usize, usize, Vec<usize>) {
    let frames = rng.random_range(1..=5);
    let vocab = rng.random_range(2..=4);
    let blank = vocab - 1;
    let len = rng.random_range(0..=2usize);
    let target: Vec<usize> = (0..len).map(|_| rng.random_range(0..blank)).collect();
    let logits = (0..frames * vocab).map(|_| rng.random_range(-3.0..3.0)).collect();
    (logits, frames, vocab, target)
}

#[test]
fn matches_brute_force_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut checked = 0;
    while checked < 200 {
        let (z, frames, vocab, target) = random_instance(&mut rng);
        let brute = ctc_brute(&z, frames, vocab, &target, vocab - 1).unwrap();
        match ctc_loss(&z, frames, vocab, &target, vocab - 1) {
            Ok(out) => {
                assert!((out.loss - brute).abs() < 1e-10, "{} vs {brute}", out.loss);
                assert!((ctc_nll(&z, frames, vocab, &target, vocab - 1).unwrap() - brute).abs() < 1e-10);
                checked += 1;
            }
            Err(_) => assert!(brute.is_infinite()),
        }
    }
}

#[test]
fn brute_force_edge_cases() {
    let z = vec![0.0; 6];
    assert!(ctc_brute(&z, 2, 3, &[0, 1, 0], 2).unwrap().is_infinite());
    assert!(ctc_brute(&vec![0.0; 4 * 11], 11, 4, &[0], 3).is_err());
    // One-hot path spelling [0, 1] with blanks around it.
    let path = [2usize, 0, 2, 1, 2];
    let mut z = vec![-50.0; 15];
    for (t, &k) in path.iter().enumerate() {
        z[t * 3 + k] = 50.0;
    }
    assert!(ctc_brute(&z, 5, 3, &[0, 1], 2).unwrap() < 1e-12);
    assert!(ctc_loss(&z, 5, 3, &[0, 1], 2).unwrap().loss < 1e-12);
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let frames = rng.random_range(2..=7);
        let vocab = rng.random_range(2..=5);
        let blank = vocab - 1;
        let len = rng.random_range(0..=3usize).min(frames / 2);
        let target: Vec<usize> = (0..len).map(|_| rng.random_range(0..blank)).collect();
        let z: Vec<f64> = (0..frames * vocab).map(|_| rng.random_range(-2.0..2.0)).collect();
        let Ok(out) = ctc_loss(&z, frames, vocab, &target, blank) else {
            continue;
        };
        let fd = central_difference(|x| ctc_loss(x, frames, vocab, &target, blank).unwrap().loss, &z, 1e-5);
        assert!(max_relative_error(&out.grad, &fd, 1e-6) < 1e-4);
    }
}

#[test]
fn vocabulary_permutation_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..50 {
        let (frames, vocab) = (6, 5);
        let z: Vec<f64> = (0..frames * vocab).map(|_| rng.random_range(-2.0..2.0)).collect();
        let target = vec![0, 3, 3, 1];
        let mut perm: Vec<usize> = (0..vocab).collect();
        for i in (1..vocab).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut zp = vec![0.0; z.len()];
        for t in 0..frames {
            for k in 0..vocab {
                zp[t * vocab + perm[k]] = z[t * vocab + k];
            }
        }
        let tp: Vec<usize> = target.iter().map(|&k| perm[k]).collect();
        let a = ctc_loss(&z, frames, vocab, &target, 4).unwrap().loss;
        let b = ctc_loss(&zp, frames, vocab, &tp, perm[4]).unwrap().loss;
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn appended_blank_frame_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..100 {
        let (frames, vocab) = (5, 4);
        let mut z: Vec<f64> = (0..frames * vocab).map(|_| rng.random_range(-2.0..2.0)).collect();
        let target = vec![0, 2];
        let before = ctc_loss(&z, frames, vocab, &target, 3).unwrap().loss;
        let extra: Vec<f64> = (0..vocab).map(|k| if k == 3 { 4.0 } else { rng.random_range(-2.0..2.0) }).collect();
        let lse = extra.iter().map(|v| v.exp()).sum::<f64>().ln();
        let neg_log_blank = lse - extra[3];
        z.extend(&extra);
        let after = ctc_loss(&z, frames + 1, vocab, &target, 3).unwrap().loss;
        assert!(after <= before + neg_log_blank + 1e-9);
    }
}

fn reference_collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut dedup: Vec<usize> = path.to_vec();
    dedup.dedup();
    dedup.retain(|&k| k != blank);
    dedup
}

#[test]
fn greedy_matches_reference_collapse() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..500 {
        let (frames, vocab) = (rng.random_range(0..30), rng.random_range(2..8));
        let z: Vec<f64> = (0..frames * vocab).map(|_| rng.random_range(-2.0..2.0)).collect();
        let path: Vec<usize> = z.chunks(vocab).map(argmax).collect();
        assert_eq!(greedy_decode(&z, vocab, vocab - 1), reference_collapse(&path, vocab - 1));
        // Shifting a frame's scores by a constant changes nothing.
        let mut shifted = z.clone();
        if frames > 0 {
            let t = rng.random_range(0..frames);
            let c = rng.random_range(-10.0..10.0);
            shifted[t * vocab..(t + 1) * vocab].iter_mut().for_each(|v| *v += c);
        }
        assert_eq!(greedy_decode(&shifted, vocab, vocab - 1), greedy_decode(&z, vocab, vocab - 1));
    }
}

#[test]
fn batch_loss_is_mean_of_trials() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let vocab = 4;
    let z: Vec<f64> = (0..9 * vocab).map(|_| rng.random_range(-2.0..2.0)).collect();
    let segs = [Segment { start: 0, len: 4 }, Segment { start: 4, len: 5 }];
    let targets = vec![vec![0, 1], vec![2, 2]];
    let mut tape = Tape::new();
    let x = tape.constant(vec![9, vocab], z.clone()).unwrap();
    let x = tape.scale(x, 1.0);
    let (loss, per) = ctc_batch_loss(&mut tape, x, vocab, &segs, &targets, 3).unwrap();
    let a = ctc_loss(&z[..16], 4, vocab, &targets[0], 3).unwrap().loss;
    let b = ctc_loss(&z[16..], 5, vocab, &targets[1], 3).unwrap().loss;
    assert_eq!(per, vec![a, b]);
    assert!((tape.value(loss)[0] - (a + b) / 2.0).abs() < 1e-15);
}
