//! Streaming phoneme decoding with a causal patch Transformer.
//!
//! The crate covers the whole pipeline: a small reverse-mode tensor engine,
//! feature preprocessing and augmentation (including time masking), the
//! causal Transformer, CTC loss and decoding, an n-gram language model with a
//! lexicon-constrained prefix beam search, edit-distance metrics, single-step
//! test-time adaptation, and a synthetic multi-session dataset generator.

pub mod adapt;
pub mod beam;
pub mod config;
pub mod ctc;
pub mod data;
pub mod error;
pub mod eval;
pub mod flops;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use beam::{BeamDecoder, DecodeConfig, Hypothesis};
pub use config::RunConfig;
pub use data::{Features, Split, Trial};
pub use error::{Error, Result};
pub use lm::{Lexicon, NGramModel};
pub use model::{DecoderModel, ModelConfig};
pub use preprocess::AugmentConfig;
pub use synth::{DatasetBundle, SynthConfig};
