//! Analytic compute accounting.
//!
//! Only matrix products and the attention score/value contractions are
//! counted; norms, activations and softmax are ignored. One multiply-add is
//! two floating-point operations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DecoderModel, MacBreakdown, ModelConfig, SequenceInput};
use crate::rng::{stream, Domain};
use crate::tensor::Tape;

/// Multiply-adds of one forward pass over `l` patches.
pub fn analytic_macs(cfg: &ModelConfig, l: usize) -> MacBreakdown {
    let (p, d, a, f, v) = (cfg.patch_dim(), cfg.model_dim, cfg.attn_width(), cfg.ffn_dim(), cfg.vocab_size);
    let (l, layers) = (l as u64, cfg.n_layers as u64);
    // causal scores and weighted values: Σ_{i<l} (i+1) pairs, each head_dim wide, twice
    let pairs = l * (l + 1) / 2;
    let attn_core = 2 * pairs * (cfg.n_heads * cfg.head_dim) as u64;
    MacBreakdown {
        patch_embedding: l * (p * d) as u64,
        attention: layers * (l * (4 * d * a) as u64 + attn_core),
        ffn: layers * l * (2 * d * f) as u64,
        head: l * (d * v) as u64,
    }
}

/// MACs counted by the autodiff tape during an evaluation forward pass.
pub fn instrumented_macs(model: &DecoderModel, l: usize, seed: u64) -> Result<MacBreakdown> {
    let mut rng = stream(seed, Domain::Bench, l as u64, 0);
    let patches: Vec<f64> = (0..l * model.config().patch_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut tape = Tape::new();
    let input = SequenceInput {
        patches: &patches,
        mask: None,
    };
    let (_, _, macs) = model.forward_counted(&mut tape, &[input], false, &mut rng)?;
    Ok(macs)
}

/// FLOPs per second of input for each component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentFlops {
    pub patch_embedding: f64,
    pub attention: f64,
    pub ffn: f64,
    pub head: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub window_seconds: f64,
    pub patches: usize,
    /// MACs over the whole window.
    pub window_macs: MacBreakdown,
    pub per_second: ComponentFlops,
    pub mflops: f64,
    pub parameters: usize,
}

/// Counts a `window_seconds` input and divides by its length in seconds.
pub fn flops_report(cfg: &ModelConfig, bin_ms: usize, window_seconds: f64) -> Result<FlopsReport> {
    cfg.validate()?;
    if bin_ms == 0 || !(window_seconds > 0.0) {
        return Err(Error::invalid("flops: bin_ms and window must be positive"));
    }
    let bins = (window_seconds * 1000.0 / bin_ms as f64).round() as usize;
    let patches = bins / cfg.patch_bins;
    let m = analytic_macs(cfg, patches);
    let rate = |macs: u64| 2.0 * macs as f64 / window_seconds;
    let per_second = ComponentFlops {
        patch_embedding: rate(m.patch_embedding),
        attention: rate(m.attention),
        ffn: rate(m.ffn),
        head: rate(m.head),
        total: rate(m.total()),
    };
    Ok(FlopsReport {
        window_seconds,
        patches,
        window_macs: m,
        mflops: per_second.total / 1e6,
        per_second,
        parameters: cfg.param_count(),
    })
}
