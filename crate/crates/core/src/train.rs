//! Supervised CTC training and the shared input pipeline.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::ctc::{check_feasible, ctc_batch_loss, ctc_loss, greedy_decode};
use crate::data::Trial;
use crate::error::{Error, Result};
use crate::metrics::{phoneme_errors, CorpusErrors};
use crate::model::{num_patches, patchify, DecoderModel, SequenceInput};
use crate::preprocess::{causal_smooth, channel_mask, grid_layouts, noise_and_shift, sample_time_mask, AugmentConfig};
use crate::rng::{stream, Domain};
use crate::tensor::{AdamW, AdamWConfig, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Validation is run every this many epochs and at the last epoch.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 600,
            lr: 1e-3,
            lr_drop_epoch: 400,
            lr_drop_factor: 10.0,
            batch_size: 64,
            weight_decay: 1e-5,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::invalid("epochs, batch_size and eval_every must be positive"));
        }
        if self.lr_drop_epoch >= self.epochs {
            return Err(Error::invalid(format!(
                "lr_drop_epoch {} must be below epochs {}",
                self.lr_drop_epoch, self.epochs
            )));
        }
        if !(self.lr >= 0.0 && self.lr_drop_factor > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::invalid("lr, lr_drop_factor and weight_decay out of range"));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.lr / self.lr_drop_factor
        } else {
            self.lr
        }
    }
}

/// Smoothed patches for evaluation (no augmentation).
pub fn eval_patches(trial: &Trial, patch_bins: usize, aug: &AugmentConfig) -> Result<Vec<f64>> {
    patchify(&causal_smooth(&trial.features, aug.gauss_width)?, patch_bins)
}

/// One augmented training view: noise, baseline shift and optional channel
/// masking, then causal smoothing, patching and a time mask.
pub fn augmented_view(
    trial: &Trial,
    patch_bins: usize,
    aug: &AugmentConfig,
    seed: u64,
    domain_key: (u64, u64),
) -> Result<(Vec<f64>, Vec<bool>)> {
    let (a, b) = domain_key;
    let mut rng = stream(seed, Domain::Augment, a, b);
    let mut x = noise_and_shift(&trial.features, aug.white_noise_sd, aug.offset_sd, &mut rng);
    if let Some(cm) = &aug.channel_mask {
        let layouts = grid_layouts(x.channels(), cm.grid_side)?;
        x = channel_mask(&x, &layouts, cm.n_masks, cm.max_frac, &mut rng)?;
    }
    let patches = patchify(&causal_smooth(&x, aug.gauss_width)?, patch_bins)?;
    let len = num_patches(trial.features.bins(), patch_bins);
    let mut mrng = stream(seed, Domain::TimeMask, a, b);
    let mask = sample_time_mask(len, aug.n_masks, aug.max_mask_frac, &mut mrng);
    Ok((patches, mask.rows))
}

/// Trials whose targets fit their patch count and the model's context.
pub fn usable<'t>(trials: impl IntoIterator<Item = &'t Trial>, model: &DecoderModel) -> (Vec<&'t Trial>, usize) {
    let cfg = model.config();
    let mut ok = Vec::new();
    let mut dropped = 0;
    for t in trials {
        let l = num_patches(t.features.bins(), cfg.patch_bins);
        if l >= 1 && l <= cfg.max_patches && check_feasible(l, &t.phonemes).is_ok() {
            ok.push(t);
        } else {
            dropped += 1;
        }
    }
    (ok, dropped)
}

/// Mean CTC loss and greedy PER (`SIL` stripped) in evaluation mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalLoss {
    pub loss: f64,
    pub per: f64,
}

pub fn evaluate_loss(model: &DecoderModel, trials: &[&Trial], aug: &AugmentConfig, sil: usize) -> Result<EvalLoss> {
    if trials.is_empty() {
        return Err(Error::invalid("evaluate_loss: no trials"));
    }
    let cfg = model.config();
    let v = cfg.vocab_size;
    let blank = v - 1;
    let mut total = 0.0;
    let mut errs = CorpusErrors::default();
    for chunk in trials.chunks(64) {
        let patches = chunk
            .iter()
            .map(|t| eval_patches(t, cfg.patch_bins, aug))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[f64]> = patches.iter().map(Vec::as_slice).collect();
        for (t, z) in chunk.iter().zip(model.logits_batch(&refs)?) {
            let frames = z.len() / v;
            total += ctc_loss(&z, frames, v, &t.phonemes, blank)?.loss;
            errs.add(&phoneme_errors(&t.phonemes, &greedy_decode(&z, v, blank), sil));
        }
    }
    Ok(EvalLoss {
        loss: total / trials.len() as f64,
        per: errs.rate().unwrap_or(0.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training-mode CTC loss over the epoch's batches.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_per: Option<f64>,
    pub batches: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation PER.
    pub best: DecoderModel,
    pub best_epoch: usize,
    pub best_val_per: f64,
    /// Parameters after the last completed epoch.
    pub last: DecoderModel,
    pub records: Vec<EpochRecord>,
    pub dropped_trials: usize,
    /// Epoch at which a non-finite loss stopped training.
    pub diverged_at: Option<usize>,
}

/// Trains all parameter groups with AdamW and a single step-down learning
/// rate schedule. `on_epoch` sees every record as it is produced.
pub fn train(
    mut model: DecoderModel,
    train_set: &[Trial],
    val_set: &[Trial],
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    seed: u64,
    sil: usize,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    aug.validate()?;
    model.params_mut().set_all_trainable(true);
    let (train_trials, d1) = usable(train_set, &model);
    let (val_trials, d2) = usable(val_set, &model);
    if train_trials.is_empty() {
        return Err(Error::invalid("no usable training trials"));
    }
    let pb = model.config().patch_bins;
    let v = model.config().vocab_size;
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let mut order: Vec<usize> = (0..train_trials.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best = (model.clone(), 0usize, f64::INFINITY);
    let mut last_good = model.clone();
    let mut diverged_at = None;

    'epochs: for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        opt.set_lr(lr);
        order.shuffle(&mut stream(seed, Domain::Shuffle, epoch as u64, 0));
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let views = idx
                .iter()
                .map(|&i| augmented_view(train_trials[i], pb, aug, seed, (train_trials[i].id, epoch as u64)))
                .collect::<Result<Vec<_>>>()?;
            let inputs: Vec<SequenceInput> = views.iter().map(|(p, m)| SequenceInput { patches: p, mask: Some(m) }).collect();
            let targets: Vec<Vec<usize>> = idx.iter().map(|&i| train_trials[i].phonemes.clone()).collect();
            let mut tape = Tape::new();
            let mut drng = stream(seed, Domain::Dropout, epoch as u64, bi as u64);
            let (logits, segments) = model.forward_batch(&mut tape, &inputs, true, &mut drng)?;
            let loss = match ctc_batch_loss(&mut tape, logits, v, &segments, &targets, v - 1) {
                Ok((loss, _)) => Some(loss),
                Err(Error::NonFinite(_)) => None,
                Err(e) => return Err(e),
            };
            let value = loss.map_or(f64::NAN, |l| tape.value(l)[0]);
            let Some(loss) = loss.filter(|_| value.is_finite()) else {
                diverged_at = Some(epoch);
                model = last_good.clone();
                break 'epochs;
            };
            let grads = tape.backward(loss)?;
            let store = model.params_mut();
            store.zero_grad();
            store.accumulate(&tape, &grads)?;
            opt.step(store)?;
            loss_sum += value;
            batches += 1;
        }
        let mut rec = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            val_loss: None,
            val_per: None,
            batches,
        };
        if !val_trials.is_empty() && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs) {
            let e = evaluate_loss(&model, &val_trials, aug, sil)?;
            rec.val_loss = Some(e.loss);
            rec.val_per = Some(e.per);
            if e.per < best.2 {
                best = (model.clone(), epoch, e.per);
            }
        } else if val_trials.is_empty() {
            best = (model.clone(), epoch, f64::NAN);
        }
        last_good = model.clone();
        on_epoch(&rec);
        records.push(rec);
    }
    Ok(TrainOutcome {
        best: best.0,
        best_epoch: best.1,
        best_val_per: best.2,
        last: model,
        records,
        dropped_trials: d1 + d2,
        diverged_at,
    })
}
