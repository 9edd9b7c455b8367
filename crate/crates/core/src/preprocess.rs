//! Feature preprocessing and training-time augmentation.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Features, Trial};
use crate::error::{Error, Result};

/// Augmentation settings. Defaults are the time-masked training values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub white_noise_sd: f64,
    pub offset_sd: f64,
    /// Causal Gaussian smoothing width (standard deviation, in bins).
    pub gauss_width: f64,
    /// Number of time masks `N`.
    pub n_masks: usize,
    /// Maximum mask length as a fraction of trial length, `M`.
    pub max_mask_frac: f64,
    pub channel_mask: Option<ChannelMaskConfig>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            white_noise_sd: 0.2,
            offset_sd: 0.05,
            gauss_width: 2.0,
            n_masks: 20,
            max_mask_frac: 0.075,
            channel_mask: None,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_mask_frac > 0.0 && self.max_mask_frac <= 1.0) {
            return Err(Error::invalid(format!("max_mask_frac {} outside (0, 1]", self.max_mask_frac)));
        }
        if self.white_noise_sd < 0.0 || self.offset_sd < 0.0 || self.gauss_width <= 0.0 {
            return Err(Error::invalid("noise, offset and smoothing widths must be non-negative"));
        }
        if let Some(cm) = &self.channel_mask {
            if !(0.0..=1.0).contains(&cm.max_frac) {
                return Err(Error::invalid("channel mask max_frac outside [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMaskConfig {
    pub n_masks: usize,
    pub max_frac: f64,
    /// Grid side of each electrode array; channels are split into
    /// consecutive arrays of `side²` channels.
    #[serde(default = "default_grid_side")]
    pub grid_side: usize,
}

fn default_grid_side() -> usize {
    8
}

/// Applies `log1p` and then standardizes every channel over the concatenated
/// block. Zero-variance channels become all zeros.
pub fn log_zscore(block: &[Trial]) -> Result<Vec<Trial>> {
    let first = block.first().ok_or_else(|| Error::invalid("log_zscore: empty block"))?;
    let c = first.features.channels();
    if block.iter().any(|t| t.features.channels() != c) {
        return Err(Error::invalid("log_zscore: trials disagree on channel count"));
    }
    if block.iter().flat_map(|t| t.features.data()).any(|&v| !(v >= 0.0)) {
        return Err(Error::invalid("log_zscore: features must be non-negative before log1p"));
    }
    let mut out: Vec<Trial> = block.to_vec();
    for t in &mut out {
        t.features.data_mut().iter_mut().for_each(|v| *v = v.ln_1p());
    }
    zscore_channels(&mut out);
    Ok(out)
}

/// Per-channel standardization over all bins of all trials in place.
pub fn zscore_channels(trials: &mut [Trial]) {
    let Some(first) = trials.first() else { return };
    let c = first.features.channels();
    let n: usize = trials.iter().map(|t| t.features.bins()).sum();
    if n == 0 {
        return;
    }
    let mut mean = vec![0.0; c];
    for t in trials.iter() {
        for row in t.features.data().chunks_exact(c) {
            mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; c];
    for t in trials.iter() {
        for row in t.features.data().chunks_exact(c) {
            for ch in 0..c {
                var[ch] += (row[ch] - mean[ch]).powi(2);
            }
        }
    }
    let sd: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt()).collect();
    for t in trials.iter_mut() {
        for row in t.features.data_mut().chunks_exact_mut(c) {
            for ch in 0..c {
                row[ch] = if sd[ch] > 0.0 { (row[ch] - mean[ch]) / sd[ch] } else { 0.0 };
            }
        }
    }
}

/// One-sided Gaussian weights `w_k ∝ exp(-k²/2σ²)` for lags `k = 0..=⌈4σ⌉`.
pub fn causal_kernel(width: f64) -> Result<Vec<f64>> {
    if !(width > 0.0) {
        return Err(Error::invalid(format!("smoothing width {width} must be positive")));
    }
    let taps = (4.0 * width).ceil() as usize + 1;
    let mut w: Vec<f64> = (0..taps).map(|k| (-(k as f64).powi(2) / (2.0 * width * width)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    Ok(w)
}

/// Causal Gaussian smoothing along time. Output bin `t` uses bins `t-k` for
/// the kernel lags `k` that exist; near the start the available weights are
/// renormalized so constants are preserved.
pub fn causal_smooth(x: &Features, width: f64) -> Result<Features> {
    let w = causal_kernel(width)?;
    let (t_n, c) = (x.bins(), x.channels());
    let mut out = Features::zeros(t_n, c);
    let full: f64 = w.iter().sum();
    for t in 0..t_n {
        let avail = (t + 1).min(w.len());
        let norm = if avail == w.len() { full } else { w[..avail].iter().sum() };
        let row = out.row_mut(t);
        for (k, &wk) in w[..avail].iter().enumerate() {
            let src = x.row(t - k);
            let a = wk / norm;
            row.iter_mut().zip(src).for_each(|(o, &s)| *o += a * s);
        }
    }
    Ok(out)
}

/// Adds i.i.d. Gaussian white noise to every element and one Gaussian
/// constant offset per channel.
pub fn noise_and_shift<R: Rng + ?Sized>(x: &Features, white_noise_sd: f64, offset_sd: f64, rng: &mut R) -> Features {
    let mut out = x.clone();
    if white_noise_sd > 0.0 {
        for v in out.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += white_noise_sd * z;
        }
    }
    if offset_sd > 0.0 {
        let c = out.channels();
        let offsets: Vec<f64> = (0..c)
            .map(|_| offset_sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        for row in out.data_mut().chunks_exact_mut(c) {
            row.iter_mut().zip(&offsets).for_each(|(v, o)| *v += o);
        }
    }
    out
}

/// Rows selected by one draw of the time-masking procedure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeMask {
    pub rows: Vec<bool>,
    /// `⌊M·L⌋ = 0`, so no mask could have positive length.
    pub degenerate: bool,
}

impl TimeMask {
    pub fn masked_count(&self) -> usize {
        self.rows.iter().filter(|&&m| m).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        if self.rows.is_empty() {
            0.0
        } else {
            self.masked_count() as f64 / self.rows.len() as f64
        }
    }
}

/// Draws `n_masks` intervals over `len` patches: with `F = ⌊M·L⌋`, each mask
/// has start `S ~ U{0..L-F}` and length `D ~ U{0..F}` and covers `S..S+D`.
/// Masks may overlap.
pub fn sample_time_mask<R: Rng + ?Sized>(len: usize, n_masks: usize, max_frac: f64, rng: &mut R) -> TimeMask {
    let f = (max_frac * len as f64).floor() as usize;
    let f = f.min(len);
    let mut rows = vec![false; len];
    if n_masks > 0 && f == 0 {
        return TimeMask { rows, degenerate: true };
    }
    for _ in 0..n_masks {
        let s = rng.random_range(0..=len - f);
        let d = rng.random_range(0..=f);
        rows[s..s + d].iter_mut().for_each(|r| *r = true);
    }
    TimeMask { rows, degenerate: false }
}

/// Replaces masked rows of a `[L × D]` patch sequence with `token`.
pub fn apply_time_mask(patches: &[f64], dim: usize, mask: &TimeMask, token: &[f64]) -> Result<Vec<f64>> {
    if token.len() != dim || patches.len() != mask.rows.len() * dim {
        return Err(Error::Shape {
            op: "time_mask",
            lhs: vec![mask.rows.len(), dim],
            rhs: vec![patches.len(), token.len()],
        });
    }
    let mut out = patches.to_vec();
    for (r, &m) in mask.rows.iter().enumerate() {
        if m {
            out[r * dim..(r + 1) * dim].copy_from_slice(token);
        }
    }
    Ok(out)
}

/// Samples and applies time masking to a `[L × D]` patch sequence.
pub fn time_mask<R: Rng + ?Sized>(
    patches: &[f64],
    dim: usize,
    n_masks: usize,
    max_frac: f64,
    token: &[f64],
    rng: &mut R,
) -> Result<(Vec<f64>, TimeMask)> {
    if dim == 0 || patches.is_empty() || patches.len() % dim != 0 {
        return Err(Error::invalid("time_mask: need at least one patch of positive width"));
    }
    let mask = sample_time_mask(patches.len() / dim, n_masks, max_frac, rng);
    Ok((apply_time_mask(patches, dim, &mask, token)?, mask))
}

/// `1 − (1 − M/2)^N`, the boundary-free approximation of the expected
/// fraction of masked patches.
pub fn expected_mask_fraction(n_masks: usize, max_frac: f64) -> f64 {
    1.0 - (1.0 - max_frac / 2.0).powi(n_masks as i32)
}

/// Channel positions of one electrode array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayLayout {
    pub coords: Vec<(i32, i32)>,
}

impl ArrayLayout {
    /// Row-major `side × side` grid.
    pub fn grid(side: usize) -> Self {
        let coords = (0..side * side).map(|i| ((i / side) as i32, (i % side) as i32)).collect();
        ArrayLayout { coords }
    }

    pub fn new(coords: Vec<(i32, i32)>) -> Result<Self> {
        let mut seen = coords.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != coords.len() || coords.is_empty() {
            return Err(Error::invalid("array layout coordinates must be unique and non-empty"));
        }
        Ok(ArrayLayout { coords })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// The `p` channels nearest to `start` by Euclidean grid distance, ties
    /// broken by channel index.
    pub fn nearest(&self, start: usize, p: usize) -> Vec<usize> {
        let (r0, c0) = self.coords[start];
        let mut order: Vec<(i64, usize)> = self
            .coords
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| {
                let (dr, dc) = ((r - r0) as i64, (c - c0) as i64);
                (dr * dr + dc * dc, i)
            })
            .collect();
        order.sort_unstable();
        order.into_iter().take(p).map(|(_, i)| i).collect()
    }
}

/// Draws which channels to zero: for every array, `n_masks` masks, each
/// picking a start channel and `p ~ U{0..⌊M·n⌋}` nearest channels.
pub fn sample_channel_mask<R: Rng + ?Sized>(
    layouts: &[ArrayLayout],
    channels: usize,
    n_masks: usize,
    max_frac: f64,
    rng: &mut R,
) -> Result<Vec<bool>> {
    let total: usize = layouts.iter().map(ArrayLayout::len).sum();
    if total != channels {
        return Err(Error::invalid(format!(
            "channel layouts cover {total} channels but features have {channels}"
        )));
    }
    let mut masked = vec![false; channels];
    let mut base = 0;
    for layout in layouts {
        let n = layout.len();
        let p_max = (max_frac * n as f64).floor() as usize;
        for _ in 0..n_masks {
            let start = rng.random_range(0..n);
            let p = rng.random_range(0..=p_max.min(n));
            for ch in layout.nearest(start, p) {
                masked[base + ch] = true;
            }
        }
        base += n;
    }
    Ok(masked)
}

/// Zeroes sampled channels across all time bins.
pub fn channel_mask<R: Rng + ?Sized>(
    x: &Features,
    layouts: &[ArrayLayout],
    n_masks: usize,
    max_frac: f64,
    rng: &mut R,
) -> Result<Features> {
    let masked = sample_channel_mask(layouts, x.channels(), n_masks, max_frac, rng)?;
    let mut out = x.clone();
    let c = out.channels();
    for row in out.data_mut().chunks_exact_mut(c) {
        row.iter_mut().zip(&masked).filter(|(_, &m)| m).for_each(|(v, _)| *v = 0.0);
    }
    Ok(out)
}

/// Square-grid layouts covering `channels`, or an error if they do not tile.
pub fn grid_layouts(channels: usize, side: usize) -> Result<Vec<ArrayLayout>> {
    let per = side * side;
    if per == 0 || channels % per != 0 {
        return Err(Error::invalid(format!(
            "{channels} channels do not split into {side}x{side} arrays"
        )));
    }
    Ok((0..channels / per).map(|_| ArrayLayout::grid(side)).collect())
}
