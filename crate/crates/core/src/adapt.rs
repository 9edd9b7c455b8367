//! DietCORP: single-step test-time adaptation.
//!
//! For every incoming trial the current model decodes it (this is the
//! reported output), the top beam becomes a pseudo-label, and one AdamW step
//! is taken on the mean CTC loss over `Z` augmented copies of the trial.
//! Only one parameter group (the patch embedding by default) is updated and
//! the weights carry over to the next trial.

use serde::{Deserialize, Serialize};

use crate::beam::{BeamDecoder, Hypothesis};
use crate::ctc::{check_feasible, ctc_batch_loss};
use crate::data::Trial;
use crate::error::{Error, Result};
use crate::metrics::{word_errors, CorpusErrors};
use crate::model::{num_patches, DecoderModel, SequenceInput, EMBEDDING};
use crate::preprocess::AugmentConfig;
use crate::rng::{stream, Domain};
use crate::tensor::{AdamW, AdamWConfig, Tape};
use crate::train::{augmented_view, eval_patches};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    /// Augmented copies per step.
    pub z: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub trainable_group: String,
    pub augment: AugmentConfig,
    /// Clear the AdamW moments when a new session starts.
    pub reset_optimizer_per_session: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            z: 64,
            lr: 1e-3,
            weight_decay: 1e-5,
            trainable_group: EMBEDDING.into(),
            augment: AugmentConfig::default(),
            reset_optimizer_per_session: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self, model: &DecoderModel) -> Result<()> {
        if self.z == 0 {
            return Err(Error::invalid("adapt: z must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::invalid("adapt: lr and weight_decay must be non-negative"));
        }
        if !model.params().groups().iter().any(|g| g.name == self.trainable_group) {
            return Err(Error::invalid(format!("adapt: no parameter group `{}`", self.trainable_group)));
        }
        self.augment.validate()
    }
}

/// Why a trial did not produce an update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    EmptyDecode,
    Infeasible,
    NonFiniteLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// Mean CTC loss over the copies before the update.
    pub loss: Option<f64>,
    /// L2 norm of the change in the trainable group.
    pub delta_l2: f64,
    /// Peak bytes held by the tape and its gradients.
    pub peak_bytes: usize,
    pub skipped: Option<SkipReason>,
}

/// Evaluation-mode beam decode of one trial.
pub fn decode_trial(model: &DecoderModel, trial: &Trial, decoder: &BeamDecoder, aug: &AugmentConfig) -> Result<Option<Hypothesis>> {
    let patches = eval_patches(trial, model.config().patch_bins, aug)?;
    let logits = model.logits(&patches)?;
    Ok(decoder.decode(&logits)?.into_iter().next())
}

/// Top beam of the LM-fused search, or `None` when it is empty.
pub fn pseudo_label(model: &DecoderModel, trial: &Trial, decoder: &BeamDecoder, aug: &AugmentConfig) -> Result<Option<Hypothesis>> {
    Ok(decode_trial(model, trial, decoder, aug)?.filter(|h| !h.phonemes.is_empty()))
}

/// Holds the optimizer state that persists across trials.
#[derive(Debug, Clone)]
pub struct Adapter {
    pub config: AdaptConfig,
    opt: AdamW,
    seed: u64,
}

impl Adapter {
    pub fn new(config: AdaptConfig, seed: u64) -> Self {
        let opt = AdamW::new(AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..Default::default()
        });
        Adapter { config, opt, seed }
    }

    pub fn steps(&self) -> u64 {
        self.opt.step_count()
    }

    pub fn reset_optimizer(&mut self) {
        self.opt = AdamW::new(self.opt.config);
    }

    /// One update on `Z` augmented copies of `trial` against `label`.
    pub fn step(&mut self, model: &mut DecoderModel, trial: &Trial, label: &[usize]) -> Result<StepReport> {
        self.config.validate(model)?;
        let cfg = model.config().clone();
        let frames = num_patches(trial.features.bins(), cfg.patch_bins);
        let skip = |reason| StepReport {
            loss: None,
            delta_l2: 0.0,
            peak_bytes: 0,
            skipped: Some(reason),
        };
        if label.is_empty() {
            return Ok(skip(SkipReason::EmptyDecode));
        }
        if frames == 0 || frames > cfg.max_patches || check_feasible(frames, label).is_err() {
            return Ok(skip(SkipReason::Infeasible));
        }
        let views = (0..self.config.z)
            .map(|k| {
                augmented_view(
                    trial,
                    cfg.patch_bins,
                    &self.config.augment,
                    self.seed,
                    (trial.id, u64::MAX - k as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let inputs: Vec<SequenceInput> = views.iter().map(|(p, m)| SequenceInput { patches: p, mask: Some(m) }).collect();
        let targets = vec![label.to_vec(); self.config.z];

        let group = self.config.trainable_group.clone();
        model.params_mut().train_only(&group)?;
        let mut tape = Tape::new();
        let mut rng = stream(self.seed, Domain::Adapt, trial.id, self.opt.step_count());
        let (logits, segments) = model.forward_batch(&mut tape, &inputs, true, &mut rng)?;
        let loss = match ctc_batch_loss(&mut tape, logits, cfg.vocab_size, &segments, &targets, cfg.vocab_size - 1) {
            Ok((loss, _)) => loss,
            Err(Error::NonFinite(x)) => {
                return Ok(StepReport {
                    loss: Some(x),
                    ..skip(SkipReason::NonFiniteLoss)
                })
            }
            Err(e) => return Err(e),
        };
        let value = tape.value(loss)[0];
        if !value.is_finite() {
            return Ok(StepReport {
                loss: Some(value),
                ..skip(SkipReason::NonFiniteLoss)
            });
        }
        let grads = tape.backward(loss)?;
        let before = model.params().group_values(&group);
        let store = model.params_mut();
        store.zero_grad();
        store.accumulate(&tape, &grads)?;
        self.opt.set_lr(self.config.lr);
        self.opt.step(store)?;
        store.zero_grad();
        let after = model.params().group_values(&group);
        let delta_l2 = before.iter().zip(&after).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt();
        Ok(StepReport {
            loss: Some(value),
            delta_l2,
            peak_bytes: grads.peak_bytes(),
            skipped: None,
        })
    }

    /// Decodes and then adapts on each trial in recording order.
    pub fn adapt_session(&mut self, model: &mut DecoderModel, trials: &[Trial], decoder: &BeamDecoder) -> Result<SessionReport> {
        if self.config.reset_optimizer_per_session {
            self.reset_optimizer();
        }
        let mut records = Vec::with_capacity(trials.len());
        let mut errors = CorpusErrors::default();
        for trial in trials {
            let hyp = decode_trial(model, trial, decoder, &self.config.augment)?;
            let decoded = hyp.as_ref().map(|h| h.text.clone()).unwrap_or_default();
            errors.add(&word_errors(&trial.text, &decoded));
            let label = hyp.as_ref().map(|h| h.phonemes.clone()).unwrap_or_default();
            let report = self.step(model, trial, &label)?;
            records.push(TrialAdaptRecord {
                trial_id: trial.id,
                session: trial.session,
                reference: trial.text.clone(),
                decoded: decoded.clone(),
                pseudo_label: decoded,
                loss: report.loss,
                delta_l2: report.delta_l2,
                skipped: report.skipped,
            });
        }
        Ok(SessionReport {
            wer: errors.rate().unwrap_or(0.0),
            errors,
            records,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialAdaptRecord {
    pub trial_id: u64,
    pub session: usize,
    pub reference: String,
    /// Output reported for this trial, produced before its own update.
    pub decoded: String,
    pub pseudo_label: String,
    pub loss: Option<f64>,
    pub delta_l2: f64,
    pub skipped: Option<SkipReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub wer: f64,
    pub errors: CorpusErrors,
    pub records: Vec<TrialAdaptRecord>,
}
