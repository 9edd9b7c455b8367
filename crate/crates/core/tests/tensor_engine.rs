use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use speechtx_core::tensor::gradcheck::{central_difference, max_relative_error};
use speechtx_core::tensor::{AttentionLayout, Segment, Tape, Tensor, Var};
use speechtx_core::Error;

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

/// Builds `loss = Σ w ⊙ f(inputs)` on a fresh tape for fixed random weights
/// `w`, then compares analytic input gradients with central differences.
fn check_grad(shapes: &[Vec<usize>], values: &[Vec<f64>], f: &dyn Fn(&mut Tape, &[Var]) -> Var, weights_seed: u64) -> f64 {
    let run = |vals: &[Vec<f64>], need_grad: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = shapes
            .iter()
            .zip(vals)
            .map(|(s, v)| tape.leaf(&Tensor::new(s.clone(), v.clone()).unwrap().with_requires_grad(true)))
            .collect();
        let out = f(&mut tape, &vars);
        let n = tape.value(out).len();
        let mut wr = ChaCha8Rng::seed_from_u64(weights_seed);
        let w: Vec<f64> = (0..n).map(|_| wr.random_range(-1.0..1.0)).collect();
        let wv = tape.constant(tape.shape(out).to_vec(), w).unwrap();
        let prod = tape.mul(out, wv).unwrap();
        let loss = tape.sum(prod);
        let value = tape.value(loss)[0];
        if !need_grad {
            return (value, vec![]);
        }
        let grads = tape.backward(loss).unwrap();
        let g = vars
            .iter()
            .zip(vals)
            .map(|(&v, x)| grads.get(v).map(|g| g.to_vec()).unwrap_or(vec![0.0; x.len()]))
            .collect();
        (value, g)
    };
    let (_, analytic) = run(values, true);
    let mut worst: f64 = 0.0;
    for (idx, x) in values.iter().enumerate() {
        let numeric = central_difference(
            |probe| {
                let mut vals = values.to_vec();
                vals[idx] = probe.to_vec();
                run(&vals, false).0
            },
            x,
            1e-5,
        );
        worst = worst.max(max_relative_error(&analytic[idx], &numeric, 1e-6));
    }
    worst
}

fn gradcheck_cases(name: &str, cases: usize, make: &dyn Fn(&mut ChaCha8Rng) -> Vec<Vec<usize>>, f: &dyn Fn(&mut Tape, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    for case in 0..cases {
        let shapes = make(&mut rng);
        let values: Vec<Vec<f64>> = shapes.iter().map(|s| uniform(&mut rng, s.iter().product())).collect();
        let err = check_grad(&shapes, &values, f, case as u64);
        assert!(err < 1e-4, "{name} case {case}: relative error {err}");
    }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..6))
}

#[test]
fn gradcheck_every_primitive() {
    gradcheck_cases(
        "add",
        100,
        &|r| {
            let (m, n) = dims(r);
            vec![vec![m, n], vec![n]]
        },
        &|t, v| t.add(v[0], v[1]).unwrap(),
    );
    gradcheck_cases(
        "add_same",
        100,
        &|r| {
            let (m, n) = dims(r);
            vec![vec![m, n], vec![m, n]]
        },
        &|t, v| t.add(v[0], v[1]).unwrap(),
    );
    gradcheck_cases(
        "mul",
        100,
        &|r| {
            let (m, n) = dims(r);
            vec![vec![m, n], vec![n]]
        },
        &|t, v| t.mul(v[0], v[1]).unwrap(),
    );
    gradcheck_cases(
        "scale",
        100,
        &|r| {
            let (m, n) = dims(r);
            vec![vec![m, n]]
        },
        &|t, v| t.scale(v[0], -1.7),
    );
    gradcheck_cases(
        "mean",
        100,
        &|r| {
            let (m, n) = dims(r);
            vec![vec![m, n]]
        },
        &|t, v| t.mean(v[0]),
    );
    gradcheck_cases(
        "matmul",
        100,
        &|r| {
            let (m, k) = dims(r);
            vec![vec![m, k], vec![k, r.random_range(1..5)]]
        },
        &|t, v| t.matmul(v[0], v[1]).unwrap(),
    );
    gradcheck_cases(
        "layer_norm",
        100,
        &|r| {
            let m = r.random_range(1..4);
            let n = r.random_range(2..7);
            vec![vec![m, n], vec![n], vec![n]]
        },
        &|t, v| t.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5).unwrap(),
    );
    gradcheck_cases(
        "softmax",
        100,
        &|r| {
            let (m, n) = dims(r);
            vec![vec![m, n]]
        },
        &|t, v| t.softmax(v[0]),
    );
    gradcheck_cases(
        "log_softmax",
        100,
        &|r| {
            let (m, n) = dims(r);
            vec![vec![m, n]]
        },
        &|t, v| t.log_softmax(v[0]),
    );
    gradcheck_cases(
        "gelu",
        100,
        &|r| {
            let (m, n) = dims(r);
            vec![vec![m, n]]
        },
        &|t, v| t.gelu(v[0]),
    );
    gradcheck_cases(
        "dropout",
        100,
        &|r| {
            let (m, n) = dims(r);
            vec![vec![m, n]]
        },
        &|t, v| {
            let n = t.value(v[0]).len();
            let scale = (0..n).map(|i| if i % 3 == 0 { 0.0 } else { 1.5 }).collect();
            t.dropout_with_mask(v[0], scale).unwrap()
        },
    );
    gradcheck_cases(
        "concat",
        100,
        &|r| {
            let (m, n) = dims(r);
            vec![vec![m, n], vec![r.random_range(1..4), n]]
        },
        &|t, v| t.concat(&[v[0], v[1]]).unwrap(),
    );
    gradcheck_cases(
        "slice_rows",
        100,
        &|r| {
            let n = r.random_range(1..5);
            vec![vec![4, n]]
        },
        &|t, v| t.slice_rows(v[0], 1, 3).unwrap(),
    );
    gradcheck_cases(
        "replace_rows",
        100,
        &|r| {
            let n = r.random_range(1..5);
            vec![vec![4, n], vec![n]]
        },
        &|t, v| t.replace_rows(v[0], v[1], vec![true, false, true, false]).unwrap(),
    );
    gradcheck_cases(
        "attention",
        100,
        &|r| {
            let heads = r.random_range(1..3);
            let dh = r.random_range(1..4);
            vec![
                vec![5, heads * dh],
                vec![5, heads * dh],
                vec![5, heads * dh],
                vec![heads, 5],
                vec![heads * dh],
            ]
        },
        &|t, v| {
            let heads = t.shape(v[3])[0];
            let layout = AttentionLayout {
                heads,
                head_dim: t.shape(v[0])[1] / heads,
                max_rel: 2,
                segments: vec![Segment { start: 0, len: 3 }, Segment { start: 3, len: 2 }],
            };
            t.attention(v[0], v[1], v[2], v[3], &layout).unwrap()
        },
    );
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let shapes = vec![vec![4, 3], vec![3, 5], vec![5], vec![5, 4], vec![4], vec![4, 2], vec![2]];
    let values: Vec<Vec<f64>> = shapes.iter().map(|s| uniform(&mut rng, s.iter().product())).collect();
    let mlp = |t: &mut Tape, v: &[Var]| {
        let h = t.matmul(v[0], v[1]).unwrap();
        let h = t.add(h, v[2]).unwrap();
        let h = t.gelu(h);
        let h = t.matmul(h, v[3]).unwrap();
        let h = t.add(h, v[4]).unwrap();
        let h = t.gelu(h);
        let h = t.matmul(h, v[5]).unwrap();
        let h = t.add(h, v[6]).unwrap();
        t.log_softmax(h)
    };
    assert!(check_grad(&shapes, &values, &mlp, 3) < 1e-4);
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let x = t.leaf(&Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap().with_requires_grad(true));
    let s = t.sum(x);
    assert_eq!(t.backward(s).unwrap().get(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut t = Tape::new();
    let x = t.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_requires_grad(true));
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq);
    assert_eq!(t.backward(s).unwrap().get(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn repeated_backward_accumulates_into_tensor() {
    let mut p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_requires_grad(true);
    let mut t = Tape::new();
    let x = t.leaf(&p);
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq);
    for _ in 0..2 {
        let g = t.backward(s).unwrap();
        p.accumulate_grad(g.get(x).unwrap()).unwrap();
    }
    assert_eq!(p.grad().unwrap(), &[4.0, 8.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut t = Tape::new();
    let x = t.leaf(&Tensor::zeros(vec![2, 2]).with_requires_grad(true));
    assert!(matches!(t.backward(x), Err(Error::InvalidArgument(_))));
}

#[test]
fn shape_errors_name_the_operation() {
    let mut t = Tape::new();
    let a = t.leaf(&Tensor::zeros(vec![2, 3]));
    let b = t.leaf(&Tensor::zeros(vec![2, 3]));
    let err = t.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    let c = t.leaf(&Tensor::zeros(vec![2]));
    let err = t.add(a, c).unwrap_err().to_string();
    assert!(err.starts_with("add"), "{err}");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(t.dropout(a, 1.0, true, &mut rng).is_err());
    assert!(t.dropout(a, -0.1, true, &mut rng).is_err());
}

#[test]
fn forward_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut t = Tape::new();
    let a = t.constant(vec![3, 4], uniform(&mut rng, 12)).unwrap();
    let eye = t
        .constant(vec![4, 4], (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect())
        .unwrap();
    let p = t.matmul(a, eye).unwrap();
    assert_eq!(t.value(p), t.value(a));

    let z = t.constant(vec![4], vec![0.0; 4]).unwrap();
    let s = t.softmax(z);
    assert_eq!(t.value(s), &[0.25; 4]);
    let g = t.gelu(z);
    assert_eq!(t.value(g), &[0.0; 4]);
}

#[test]
fn broadcasting_repeats_trailing_suffix() {
    let mut t = Tape::new();
    let a = t.constant(vec![2, 2, 3], (0..12).map(f64::from).collect()).unwrap();
    let row = t.constant(vec![3], vec![10.0, 20.0, 30.0]).unwrap();
    let slab = t.constant(vec![2, 3], vec![1.0; 6]).unwrap();
    let r = t.add(a, row).unwrap();
    assert_eq!(&t.value(r)[..6], &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
    let m = t.mul(a, slab).unwrap();
    assert_eq!(t.value(m), t.value(a));
    assert_eq!(t.shape(r), &[2, 2, 3]);
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let (m, n) = (rng.random_range(1..6), rng.random_range(1..9));
        let mut t = Tape::new();
        let x = t
            .constant(vec![m, n], (0..m * n).map(|_| rng.random_range(-30.0..30.0)).collect())
            .unwrap();
        let s = t.softmax(x);
        for row in t.value(s).chunks(n) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn layer_norm_standardizes_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..100 {
        let (m, n) = (rng.random_range(1..6), rng.random_range(2..40));
        let mut t = Tape::new();
        let x = t.constant(vec![m, n], uniform(&mut rng, m * n)).unwrap();
        // eps far below the row variance so the normalized variance is ~1.
        let y = t.layer_norm(x, None, None, 1e-12).unwrap();
        for row in t.value(y).chunks(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64;
            assert!(mu.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }
}

#[test]
fn dropout_identity_at_eval_and_scaled_at_train() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut t = Tape::new();
    let x = t.constant(vec![1000], vec![1.0; 1000]).unwrap();
    let y = t.dropout(x, 0.35, false, &mut rng).unwrap();
    assert_eq!(t.value(y), t.value(x));
    let y = t.dropout(x, 0.35, true, &mut rng).unwrap();
    let kept: Vec<f64> = t.value(y).iter().copied().filter(|&v| v != 0.0).collect();
    assert!(kept.iter().all(|&v| (v - 1.0 / 0.65).abs() < 1e-12));
    let mean = t.value(y).iter().sum::<f64>() / 1000.0;
    assert!((mean - 1.0).abs() < 0.1);
}

fn naive_attention(q: &[f64], k: &[f64], v: &[f64], bias: &[f64], l: usize, d: usize, max_rel: i64) -> Vec<f64> {
    let mut out = vec![0.0; l * d];
    for i in 0..l {
        let mut w = vec![0.0; l];
        let mut z = 0.0;
        for j in 0..l {
            if j > i {
                continue;
            }
            let mut s = 0.0;
            for c in 0..d {
                s += q[i * d + c] * k[j * d + c];
            }
            let rel = (i as i64 - j as i64).clamp(-max_rel, max_rel) + max_rel;
            s = s / (d as f64).sqrt() + bias[rel as usize];
            w[j] = s.exp();
            z += w[j];
        }
        for j in 0..=i {
            for c in 0..d {
                out[i * d + c] += w[j] / z * v[j * d + c];
            }
        }
    }
    out
}

#[test]
fn attention_matches_naive_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..50 {
        let l = rng.random_range(1..12);
        let d = rng.random_range(1..6);
        let q = uniform(&mut rng, l * d);
        let k = uniform(&mut rng, l * d);
        let v = uniform(&mut rng, l * d);
        let max_rel = rng.random_range(1..8);
        let bias = uniform(&mut rng, 2 * max_rel + 1);
        let mut t = Tape::new();
        let (qv, kv, vv) = (
            t.constant(vec![l, d], q.clone()).unwrap(),
            t.constant(vec![l, d], k.clone()).unwrap(),
            t.constant(vec![l, d], v.clone()).unwrap(),
        );
        let bv = t.constant(vec![1, 2 * max_rel + 1], bias.clone()).unwrap();
        let layout = AttentionLayout {
            heads: 1,
            head_dim: d,
            max_rel,
            segments: vec![Segment { start: 0, len: l }],
        };
        let o = t.attention(qv, kv, vv, bv, &layout).unwrap();
        let reference = naive_attention(&q, &k, &v, &bias, l, d, max_rel as i64);
        for (a, b) in t.value(o).iter().zip(&reference) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn attention_special_cases() {
    let mut t = Tape::new();
    let layout = |l| AttentionLayout {
        heads: 1,
        head_dim: 2,
        max_rel: 3,
        segments: vec![Segment { start: 0, len: l }],
    };
    // L = 1: output is exactly V row 0.
    let q = t.constant(vec![1, 2], vec![0.3, -0.2]).unwrap();
    let v = t.constant(vec![1, 2], vec![1.5, -2.5]).unwrap();
    let b = t.constant(vec![1, 7], vec![0.1; 7]).unwrap();
    let o = t.attention(q, q, v, b, &layout(1)).unwrap();
    assert_eq!(t.value(o), &[1.5, -2.5]);
    // Zero Q, K and bias: row i is the mean of V rows 0..=i.
    let z = t.constant(vec![4, 2], vec![0.0; 8]).unwrap();
    let v = t.constant(vec![4, 2], vec![1.0, 0.0, 3.0, 2.0, 5.0, 4.0, 7.0, 6.0]).unwrap();
    let b = t.constant(vec![1, 7], vec![0.0; 7]).unwrap();
    let o = t.attention(z, z, v, b, &layout(4)).unwrap();
    let expect = [1.0, 0.0, 2.0, 1.0, 3.0, 2.0, 4.0, 3.0];
    for (a, e) in t.value(o).iter().zip(expect) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn clamped_offsets_share_one_bias_gradient() {
    // With max_rel = 1, every pair with i - j >= 1 uses the same slot.
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let l = 5;
    let mut t = Tape::new();
    let q = t.constant(vec![l, 2], uniform(&mut rng, 2 * l)).unwrap();
    let k = t.constant(vec![l, 2], uniform(&mut rng, 2 * l)).unwrap();
    let v = t.constant(vec![l, 2], uniform(&mut rng, 2 * l)).unwrap();
    let bias = t.leaf(&Tensor::zeros(vec![1, 3]).with_requires_grad(true));
    let layout = AttentionLayout {
        heads: 1,
        head_dim: 2,
        max_rel: 1,
        segments: vec![Segment { start: 0, len: l }],
    };
    let o = t.attention(q, k, v, bias, &layout).unwrap();
    let w = t.constant(vec![l, 2], uniform(&mut rng, 2 * l)).unwrap();
    let p = t.mul(o, w).unwrap();
    let loss = t.sum(p);
    let g = t.backward(loss).unwrap();
    let gb = g.get(bias).unwrap();
    // Slot 0 (negative offsets) is masked out entirely.
    assert_eq!(gb[0], 0.0);
    // Compare the shared slot against a finite difference that moves it alone.
    let f = |b: f64| {
        let mut t2 = Tape::new();
        let (q2, k2, v2, w2) = (
            t2.constant(vec![l, 2], t.value(q).to_vec()).unwrap(),
            t2.constant(vec![l, 2], t.value(k).to_vec()).unwrap(),
            t2.constant(vec![l, 2], t.value(v).to_vec()).unwrap(),
            t2.constant(vec![l, 2], t.value(w).to_vec()).unwrap(),
        );
        let b2 = t2.constant(vec![1, 3], vec![0.0, 0.0, b]).unwrap();
        let o2 = t2.attention(q2, k2, v2, b2, &layout).unwrap();
        let p2 = t2.mul(o2, w2).unwrap();
        let s = t2.sum(p2);
        t2.value(s)[0]
    };
    let fd = (f(1e-5) - f(-1e-5)) / 2e-5;
    assert!((gb[2] - fd).abs() < 1e-8, "{} vs {fd}", gb[2]);
    assert!(gb[2].abs() > 1e-6);
}

#[test]
fn forward_backward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::new(vec![6, 4], uniform(&mut rng, 24)).unwrap().with_requires_grad(true));
        let d = t.dropout(x, 0.3, true, &mut rng).unwrap();
        let g = t.gelu(d);
        let s = t.log_softmax(g);
        let loss = t.mean(s);
        let grads = t.backward(loss).unwrap();
        (
            t.value(loss)[0].to_bits(),
            grads.get(x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}
