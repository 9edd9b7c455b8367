use speechtx_core::data::{Features, Split, Trial};
use speechtx_core::model::{DecoderModel, ModelConfig};
use speechtx_core::preprocess::AugmentConfig;
use speechtx_core::synth::{generate, SynthConfig};
use speechtx_core::train::{evaluate_loss, train, usable, TrainConfig};

const SIL: usize = 39;

fn quiet() -> AugmentConfig {
    AugmentConfig {
        white_noise_sd: 0.0,
        offset_sd: 0.0,
        n_masks: 0,
        ..Default::default()
    }
}

fn trials(n: usize) -> Vec<Trial> {
    let cfg = SynthConfig {
        sessions: 1,
        trials_per_session: n.max(20),
        ..Default::default()
    };
    generate(&cfg).unwrap().trials.into_iter().take(n).collect()
}

#[test]
fn twenty_trials_can_be_memorized() {
    let data = trials(20);
    let cfg = ModelConfig {
        dropout: 0.0,
        input_dropout: 0.0,
        ..ModelConfig::desk()
    };
    let tc = TrainConfig {
        epochs: 200,
        lr_drop_epoch: 190,
        batch_size: 2,
        eval_every: 50,
        ..Default::default()
    };
    let out = train(DecoderModel::new(cfg, 1).unwrap(), &data, &data, &tc, &quiet(), 1, SIL, |_| {}).unwrap();
    let last = out.records.last().unwrap();
    assert!(last.train_loss < 0.05, "train loss {}", last.train_loss);
    let refs: Vec<&Trial> = data.iter().collect();
    let e = evaluate_loss(&out.last, &refs, &quiet(), SIL).unwrap();
    assert_eq!(e.per, 0.0);
}

#[test]
fn learning_rate_drops_once_by_the_factor() {
    let data = trials(8);
    let tc = TrainConfig {
        epochs: 6,
        lr_drop_epoch: 4,
        batch_size: 4,
        ..Default::default()
    };
    let out = train(
        DecoderModel::new(ModelConfig::desk(), 0).unwrap(),
        &data,
        &data,
        &tc,
        &AugmentConfig::default(),
        0,
        SIL,
        |_| {},
    )
    .unwrap();
    let lrs: Vec<f64> = out.records.iter().map(|r| r.lr).collect();
    assert_eq!(lrs, vec![1e-3, 1e-3, 1e-3, 1e-3, 1e-4, 1e-4]);
    assert_eq!(out.records[tc.lr_drop_epoch].lr, tc.lr / 10.0);
    assert!(out.records.iter().all(|r| r.batches == 2));
}

#[test]
fn best_checkpoint_has_the_lowest_validation_per() {
    let data = trials(30);
    let (tr, va): (Vec<Trial>, Vec<Trial>) = data.into_iter().partition(|t| t.split == Split::Train);
    let tc = TrainConfig {
        epochs: 12,
        lr_drop_epoch: 10,
        batch_size: 8,
        eval_every: 3,
        ..Default::default()
    };
    let aug = AugmentConfig::default();
    let mut seen = 0;
    let out = train(
        DecoderModel::new(ModelConfig::desk(), 2).unwrap(),
        &tr,
        &va,
        &tc,
        &aug,
        2,
        SIL,
        |_| seen += 1,
    )
    .unwrap();
    assert_eq!(seen, 12);
    let evaluated: Vec<_> = out.records.iter().filter(|r| r.val_per.is_some()).collect();
    assert_eq!(evaluated.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![2, 5, 8, 11]);
    let min = evaluated.iter().map(|r| r.val_per.unwrap()).fold(f64::INFINITY, f64::min);
    assert_eq!(out.best_val_per, min);
    let first_min = evaluated.iter().find(|r| r.val_per == Some(min)).unwrap();
    assert_eq!(out.best_epoch, first_min.epoch);
    let refs: Vec<&Trial> = va.iter().collect();
    assert_eq!(evaluate_loss(&out.best, &refs, &aug, SIL).unwrap().per, min);
}

#[test]
fn training_is_deterministic() {
    let data = trials(12);
    let tc = TrainConfig {
        epochs: 3,
        lr_drop_epoch: 2,
        batch_size: 5,
        ..Default::default()
    };
    let run = || {
        train(
            DecoderModel::new(ModelConfig::desk(), 4).unwrap(),
            &data,
            &data,
            &tc,
            &AugmentConfig::default(),
            4,
            SIL,
            |_| {},
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.records, b.records);
    assert_eq!(a.last.params().group_values("embedding"), b.last.params().group_values("embedding"));
}

#[test]
fn divergence_stops_with_the_last_finite_weights() {
    let data = trials(8);
    let tc = TrainConfig {
        epochs: 20,
        lr: 1e200,
        lr_drop_epoch: 19,
        batch_size: 4,
        ..Default::default()
    };
    let out = train(
        DecoderModel::new(ModelConfig::desk(), 0).unwrap(),
        &data,
        &[],
        &tc,
        &AugmentConfig::default(),
        0,
        SIL,
        |_| {},
    )
    .unwrap();
    let at = out.diverged_at.expect("loss should blow up");
    assert_eq!(out.records.len(), at);
    for p in out.last.params().params() {
        assert!(p.tensor.data().iter().all(|x| x.is_finite()), "{}", p.name);
    }
}

#[test]
fn infeasible_trials_are_dropped() {
    let mut data = trials(4);
    let model = DecoderModel::new(ModelConfig::desk(), 0).unwrap();
    data[1].phonemes = vec![1; 40];
    data[2].features = Features::zeros(3, 64);
    data[3].features = Features::zeros(5 * 65, 64);
    let (ok, dropped) = usable(&data, &model);
    assert_eq!((ok.len(), dropped), (1, 3));
}

#[test]
fn schedule_must_drop_before_the_end() {
    let tc = TrainConfig {
        epochs: 10,
        lr_drop_epoch: 10,
        ..Default::default()
    };
    assert!(tc.validate().is_err());
    assert_eq!(TrainConfig::default().lr_at(399), 1e-3);
    assert!((TrainConfig::default().lr_at(400) - 1e-4).abs() < 1e-20);
}
