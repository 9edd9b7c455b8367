//! Shared fixtures for the criterion benches.

use speechtx_core::ctc::PhonemeAlphabet;
use speechtx_core::model::{patchify, DecoderModel, ModelConfig};
use speechtx_core::synth::{generate, DatasetBundle, SynthConfig};
use speechtx_core::{NGramModel, Result};

pub struct Fixture {
    pub bundle: DatasetBundle,
    pub lm: NGramModel,
    pub model: DecoderModel,
}

impl Fixture {
    /// One short synthetic block and an untrained model of the given shape.
    pub fn new(model: ModelConfig) -> Result<Self> {
        let base = SynthConfig::default();
        let bundle = generate(&SynthConfig {
            channels: model.channels,
            sessions: 1,
            trials_per_session: base.block_min,
            ..base
        })?;
        let lm = NGramModel::train(&bundle.corpus, 3, 0.75)?;
        let model = DecoderModel::new(model, 0)?;
        Ok(Fixture { bundle, lm, model })
    }

    pub fn desk() -> Result<Self> {
        Self::new(ModelConfig::desk())
    }

    pub fn alphabet(&self) -> &PhonemeAlphabet {
        &self.bundle.alphabet
    }

    /// Patch sequence of trial `i`, truncated to the model's context.
    pub fn patches(&self, i: usize) -> Result<Vec<f64>> {
        let cfg = self.model.config();
        let mut p = patchify(&self.bundle.trials[i].features, cfg.patch_bins)?;
        p.truncate(cfg.max_patches * cfg.patch_dim());
        Ok(p)
    }
}
