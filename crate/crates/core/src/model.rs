//! Causal patch Transformer: patch embedding, relative-bias attention
//! blocks with pre-norm feed-forward layers, and a linear phoneme head.

use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Features;
use crate::error::{Error, Result};
use crate::rng::{stream, Domain};
use crate::tensor::{AttentionLayout, ParamId, ParamStore, Segment, Tape, Tensor, Var};

pub const EMBEDDING: &str = "embedding";
pub const BACKBONE: &str = "backbone";
pub const HEAD: &str = "head";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Time bins per patch, `T_in`.
    pub patch_bins: usize,
    pub channels: usize,
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub input_dropout: f64,
    pub max_patches: usize,
    /// Relative offsets beyond this share one bias; `None` means
    /// `max_patches − 1`.
    pub max_rel_distance: Option<usize>,
    pub layer_norm_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_bins: 5,
            channels: 256,
            model_dim: 384,
            n_layers: 7,
            n_heads: 6,
            head_dim: 64,
            ffn_mult: 4,
            vocab_size: 41,
            dropout: 0.35,
            input_dropout: 0.2,
            max_patches: 256,
            max_rel_distance: None,
            layer_norm_eps: 1e-5,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// Small model for the 64-channel synthetic dataset.
    pub fn desk() -> Self {
        ModelConfig {
            channels: 64,
            model_dim: 32,
            n_layers: 2,
            n_heads: 2,
            head_dim: 16,
            max_patches: 64,
            dropout: 0.1,
            input_dropout: 0.1,
            ..Self::default()
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_bins
    }

    pub fn attn_width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_mult * self.model_dim
    }

    pub fn max_rel(&self) -> usize {
        self.max_rel_distance.unwrap_or(self.max_patches.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch_bins", self.patch_bins),
            ("channels", self.channels),
            ("model_dim", self.model_dim),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("ffn_mult", self.ffn_mult),
            ("max_patches", self.max_patches),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("model.{name} must be positive")));
        }
        if self.vocab_size < 2 {
            return Err(Error::invalid("model.vocab_size must be at least 2"));
        }
        for (name, r) in [("dropout", self.dropout), ("input_dropout", self.input_dropout)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::invalid(format!("model.{name} {r} outside [0, 1)")));
            }
        }
        if !(self.layer_norm_eps > 0.0) || !(self.init_std >= 0.0) {
            return Err(Error::invalid("model.layer_norm_eps must be positive and init_std non-negative"));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (p, d, a, f, v) = (self.patch_dim(), self.model_dim, self.attn_width(), self.ffn_dim(), self.vocab_size);
        let ln = |n: usize| 2 * n;
        let lin = |i: usize, o: usize| i * o + o;
        let embed = p + ln(p) + lin(p, d) + ln(d);
        let block = ln(d) + 3 * lin(d, a) + lin(a, d) + self.n_heads * (2 * self.max_rel() + 1) + ln(d) + lin(d, f) + lin(f, d);
        embed + self.n_layers * block + ln(d) + lin(d, v)
    }
}

/// Number of whole patches in `bins` time bins.
pub fn num_patches(bins: usize, patch_bins: usize) -> usize {
    bins / patch_bins
}

/// Flattens non-overlapping `[patch_bins × C]` slabs in time-major order into
/// `[L × C·patch_bins]`; trailing bins that do not fill a patch are dropped.
pub fn patchify(x: &Features, patch_bins: usize) -> Result<Vec<f64>> {
    if patch_bins == 0 || x.bins() < patch_bins {
        return Err(Error::invalid(format!(
            "patchify: {} bins cannot fill a patch of {patch_bins}",
            x.bins()
        )));
    }
    let l = num_patches(x.bins(), patch_bins);
    Ok(x.data()[..l * patch_bins * x.channels()].to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Block {
    attn_norm: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    rel_bias: ParamId,
    ffn_norm: Norm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    mask_token: ParamId,
    in_norm: Norm,
    embed: Linear,
    out_norm: Norm,
    blocks: Vec<Block>,
    final_norm: Norm,
    head: Linear,
}

/// Multiply-accumulate counts recorded during one forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacBreakdown {
    pub patch_embedding: u64,
    pub attention: u64,
    pub ffn: u64,
    pub head: u64,
}

impl MacBreakdown {
    pub fn total(&self) -> u64 {
        self.patch_embedding + self.attention + self.ffn + self.head
    }
}

/// Per-sequence inputs to a training forward pass.
#[derive(Debug, Clone, Copy)]
pub struct SequenceInput<'a> {
    /// `[L × patch_dim]` row-major patches.
    pub patches: &'a [f64],
    /// Patches to replace with the mask token, if any.
    pub mask: Option<&'a [bool]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel {
    config: ModelConfig,
    store: ParamStore,
    layout: Layout,
}

impl DecoderModel {
    /// Builds a model with `N(0, init_std)` linear weights, zero biases,
    /// unit LayerNorm gains and a zero mask token.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Domain::Init, 0, 0);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::invalid(e.to_string()))?;
        let mut store = ParamStore::new();
        let (p, d, a, f, v) = (
            config.patch_dim(),
            config.model_dim,
            config.attn_width(),
            config.ffn_dim(),
            config.vocab_size,
        );

        let mut linear = |store: &mut ParamStore, group: &str, name: &str, i: usize, o: usize| -> Linear {
            let w = Tensor::from_fn(vec![i, o], |_| normal.sample(&mut rng));
            Linear {
                w: store.add(group, format!("{name}.w"), w),
                b: store.add(group, format!("{name}.b"), Tensor::zeros(vec![o])),
            }
        };
        let norm = |store: &mut ParamStore, group: &str, name: &str, n: usize| Norm {
            g: store.add(group, format!("{name}.g"), Tensor::from_fn(vec![n], |_| 1.0)),
            b: store.add(group, format!("{name}.b"), Tensor::zeros(vec![n])),
        };

        let mask_token = store.add(EMBEDDING, "mask_token", Tensor::zeros(vec![p]));
        let in_norm = norm(&mut store, EMBEDDING, "embed.norm_in", p);
        let embed = linear(&mut store, EMBEDDING, "embed.linear", p, d);
        let out_norm = norm(&mut store, EMBEDDING, "embed.norm_out", d);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let pre = format!("block{l}");
            let attn_norm = norm(&mut store, BACKBONE, &format!("{pre}.attn_norm"), d);
            let q = linear(&mut store, BACKBONE, &format!("{pre}.attn.q"), d, a);
            let k = linear(&mut store, BACKBONE, &format!("{pre}.attn.k"), d, a);
            let vv = linear(&mut store, BACKBONE, &format!("{pre}.attn.v"), d, a);
            let o = linear(&mut store, BACKBONE, &format!("{pre}.attn.o"), a, d);
            let rel_bias = store.add(
                BACKBONE,
                format!("{pre}.attn.rel_bias"),
                Tensor::zeros(vec![config.n_heads, 2 * config.max_rel() + 1]),
            );
            let ffn_norm = norm(&mut store, BACKBONE, &format!("{pre}.ffn_norm"), d);
            let fc1 = linear(&mut store, BACKBONE, &format!("{pre}.ffn.fc1"), d, f);
            let fc2 = linear(&mut store, BACKBONE, &format!("{pre}.ffn.fc2"), f, d);
            blocks.push(Block {
                attn_norm,
                q,
                k,
                v: vv,
                o,
                rel_bias,
                ffn_norm,
                fc1,
                fc2,
            });
        }
        let final_norm = norm(&mut store, HEAD, "head.norm", d);
        let head = linear(&mut store, HEAD, "head.linear", d, v);
        Ok(DecoderModel {
            config,
            store,
            layout: Layout {
                mask_token,
                in_norm,
                embed,
                out_norm,
                blocks,
                final_norm,
                head,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    pub fn mask_token(&self) -> &[f64] {
        self.store.get(self.layout.mask_token).data()
    }

    fn p(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(id, self.store.get(id), self.store.is_trainable(id))
    }

    fn linear(&self, tape: &mut Tape, x: Var, l: Linear) -> Result<Var> {
        let w = self.p(tape, l.w);
        let b = self.p(tape, l.b);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    fn norm(&self, tape: &mut Tape, x: Var, n: Norm) -> Result<Var> {
        let g = self.p(tape, n.g);
        let b = self.p(tape, n.b);
        tape.layer_norm(x, Some(g), Some(b), self.config.layer_norm_eps)
    }

    fn check_inputs(&self, inputs: &[SequenceInput]) -> Result<Vec<Segment>> {
        if inputs.is_empty() {
            return Err(Error::invalid("forward: empty batch"));
        }
        let pd = self.config.patch_dim();
        let mut segments = Vec::with_capacity(inputs.len());
        let mut start = 0;
        for s in inputs {
            if s.patches.is_empty() || s.patches.len() % pd != 0 {
                return Err(Error::Shape {
                    op: "forward",
                    lhs: vec![s.patches.len()],
                    rhs: vec![pd],
                });
            }
            let len = s.patches.len() / pd;
            if len > self.config.max_patches {
                return Err(Error::invalid(format!(
                    "sequence of {len} patches exceeds max_patches {}",
                    self.config.max_patches
                )));
            }
            if let Some(m) = s.mask {
                if m.len() != len {
                    return Err(Error::Shape {
                        op: "forward mask",
                        lhs: vec![len],
                        rhs: vec![m.len()],
                    });
                }
            }
            segments.push(Segment { start, len });
            start += len;
        }
        Ok(segments)
    }

    fn embed(&self, tape: &mut Tape, inputs: &[SequenceInput], rows: usize, train: bool, rng: &mut dyn rand::RngCore) -> Result<Var> {
        let pd = self.config.patch_dim();
        let mut data = Vec::with_capacity(rows * pd);
        inputs.iter().for_each(|s| data.extend_from_slice(s.patches));
        let mut x = tape.constant(vec![rows, pd], data)?;
        if inputs.iter().any(|s| s.mask.is_some_and(|m| m.iter().any(|&b| b))) {
            let rows_mask: Vec<bool> = inputs
                .iter()
                .flat_map(|s| {
                    let len = s.patches.len() / pd;
                    (0..len).map(move |i| s.mask.is_some_and(|m| m[i]))
                })
                .collect();
            let token = self.p(tape, self.layout.mask_token);
            x = tape.replace_rows(x, token, rows_mask)?;
        }
        x = tape.dropout(x, self.config.input_dropout, train, rng)?;
        let x = self.norm(tape, x, self.layout.in_norm)?;
        let x = self.linear(tape, x, self.layout.embed)?;
        self.norm(tape, x, self.layout.out_norm)
    }

    fn block(
        &self,
        tape: &mut Tape,
        x: Var,
        b: &Block,
        attn: &AttentionLayout,
        train: bool,
        rng: &mut dyn rand::RngCore,
        macs: &mut MacBreakdown,
    ) -> Result<Var> {
        let m0 = tape.macs();
        let h = self.norm(tape, x, b.attn_norm)?;
        let q = self.linear(tape, h, b.q)?;
        let k = self.linear(tape, h, b.k)?;
        let v = self.linear(tape, h, b.v)?;
        let bias = self.p(tape, b.rel_bias);
        let a = tape.attention(q, k, v, bias, attn)?;
        let a = self.linear(tape, a, b.o)?;
        let x = tape.add(x, a)?;
        let m1 = tape.macs();
        macs.attention += m1 - m0;
        let h = self.norm(tape, x, b.ffn_norm)?;
        let h = self.linear(tape, h, b.fc1)?;
        let h = tape.gelu(h);
        let h = tape.dropout(h, self.config.dropout, train, rng)?;
        let h = self.linear(tape, h, b.fc2)?;
        let h = tape.dropout(h, self.config.dropout, train, rng)?;
        macs.ffn += tape.macs() - m1;
        tape.add(x, h)
    }

    fn attention_layout(&self, segments: Vec<Segment>) -> AttentionLayout {
        AttentionLayout {
            heads: self.config.n_heads,
            head_dim: self.config.head_dim,
            max_rel: self.config.max_rel(),
            segments,
        }
    }

    /// Records a packed forward pass on `tape` and returns
    /// `[Σ L_i × V]` logits with the per-sequence segments.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        inputs: &[SequenceInput],
        train: bool,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(Var, Vec<Segment>)> {
        let (logits, segments, _) = self.forward_counted(tape, inputs, train, rng)?;
        Ok((logits, segments))
    }

    /// Like [`forward_batch`](Self::forward_batch), also returning MACs per
    /// component.
    pub fn forward_counted(
        &self,
        tape: &mut Tape,
        inputs: &[SequenceInput],
        train: bool,
        rng: &mut dyn rand::RngCore,
    ) -> Result<(Var, Vec<Segment>, MacBreakdown)> {
        let segments = self.check_inputs(inputs)?;
        let rows = segments.iter().map(|s| s.len).sum();
        let mut macs = MacBreakdown::default();
        let m0 = tape.macs();
        let mut x = self.embed(tape, inputs, rows, train, rng)?;
        macs.patch_embedding = tape.macs() - m0;
        let attn = self.attention_layout(segments.clone());
        for b in &self.layout.blocks {
            x = self.block(tape, x, b, &attn, train, rng, &mut macs)?;
        }
        let m1 = tape.macs();
        let x = self.norm(tape, x, self.layout.final_norm)?;
        let logits = self.linear(tape, x, self.layout.head)?;
        macs.head = tape.macs() - m1;
        Ok((logits, segments, macs))
    }

    /// Evaluation-mode logits `[L × V]` for one patch sequence.
    pub fn logits(&self, patches: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut rng = NoRng;
        let (out, _) = self.forward_batch(&mut tape, &[SequenceInput { patches, mask: None }], false, &mut rng)?;
        Ok(tape.value(out).to_vec())
    }

    /// Evaluation-mode logits for several sequences at once.
    pub fn logits_batch(&self, seqs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let inputs: Vec<SequenceInput> = seqs.iter().map(|p| SequenceInput { patches: p, mask: None }).collect();
        let mut tape = Tape::new();
        let (out, segments) = self.forward_batch(&mut tape, &inputs, false, &mut NoRng)?;
        let v = self.config.vocab_size;
        let all = tape.value(out);
        Ok(segments.iter().map(|s| all[s.start * v..(s.start + s.len) * v].to_vec()).collect())
    }

    /// Pre-softmax attention scores `QKᵀ/√d + B` of block `layer` in
    /// evaluation mode, as `[heads × L × L]` with `−∞` above the diagonal.
    pub fn attention_scores(&self, patches: &[f64], layer: usize) -> Result<Vec<f64>> {
        let b = self
            .layout
            .blocks
            .get(layer)
            .ok_or_else(|| Error::invalid(format!("no block {layer}")))?;
        let inputs = [SequenceInput { patches, mask: None }];
        let segments = self.check_inputs(&inputs)?;
        let l = segments[0].len;
        let mut tape = Tape::new();
        let mut x = self.embed(&mut tape, &inputs, l, false, &mut NoRng)?;
        let attn = self.attention_layout(segments);
        let mut macs = MacBreakdown::default();
        for blk in &self.layout.blocks[..layer] {
            x = self.block(&mut tape, x, blk, &attn, false, &mut NoRng, &mut macs)?;
        }
        let h = self.norm(&mut tape, x, b.attn_norm)?;
        let q = self.linear(&mut tape, h, b.q)?;
        let k = self.linear(&mut tape, h, b.k)?;
        let (q, k) = (tape.value(q), tape.value(k));
        let bias = self.store.get(b.rel_bias).data();
        let (hn, dh, w) = (self.config.n_heads, self.config.head_dim, self.config.attn_width());
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![f64::NEG_INFINITY; hn * l * l];
        for h in 0..hn {
            for i in 0..l {
                for j in 0..=i {
                    let dot: f64 = (0..dh).map(|c| q[i * w + h * dh + c] * k[j * w + h * dh + c]).sum();
                    out[(h * l + i) * l + j] = dot * scale + bias[h * attn.bias_len() + attn.bias_index(i, j)];
                }
            }
        }
        Ok(out)
    }
}

/// Random source for evaluation passes, where dropout is disabled and no
/// randomness may be consumed.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("evaluation forward consumed randomness")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("evaluation forward consumed randomness")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("evaluation forward consumed randomness")
    }
}

const MAGIC: &[u8; 8] = b"STXCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training state stored next to the weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Root seed of the run; all random streams derive from it.
    pub seed: u64,
    /// Completed epochs (the stream position of epoch-keyed generators).
    pub epoch: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: CheckpointMeta,
    params: usize,
}

/// Serializes a model.
///
/// Layout (little-endian): magic `STXCKPT\0`, `u32` version, `u64` header
/// length, JSON header (config, meta, parameter count), then per parameter
/// `u32` name length, name, `u32` group length, group, `u32` rank, `u64`
/// dims, `f64` values; finally the SHA-256 of everything before it.
pub fn save_checkpoint(model: &DecoderModel, meta: CheckpointMeta) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        meta,
        params: model.store.params().len(),
    })
    .expect("header serializes");
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for p in model.store.params() {
        let group = &model.store.groups()[p.group].name;
        for s in [&p.name, group] {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

/// Parses a checkpoint. Nothing is returned unless every byte validates.
pub fn load_checkpoint(bytes: &[u8]) -> Result<(DecoderModel, CheckpointMeta)> {
    if bytes.len() < MAGIC.len() + 4 + 8 + 32 {
        return Err(Error::Checkpoint(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let mut c = Cursor { buf: body, pos: 8 };
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch (truncated or corrupt file)".into()));
    }
    let hlen = c.u64()? as usize;
    let header: Header = serde_json::from_slice(c.take(hlen)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let mut model = DecoderModel::new(header.config, header.meta.seed)?;
    if header.params != model.store.params().len() {
        return Err(Error::Checkpoint(format!(
            "{} parameters stored, config implies {}",
            header.params,
            model.store.params().len()
        )));
    }
    for i in 0..header.params {
        let name = c.string()?;
        let group = c.string()?;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let id = ParamId(i);
        let expect = model.store.param(id);
        let expect_group = &model.store.groups()[expect.group].name;
        if expect.name != name || *expect_group != group || expect.tensor.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {i}: stored {name} ({group}) {shape:?}, expected {} ({expect_group}) {:?}",
                expect.name,
                expect.tensor.shape()
            )));
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n * 8)?;
        let data = model.store.get_mut(id).data_mut();
        for (d, chunk) in data.iter_mut().zip(raw.chunks_exact(8)) {
            *d = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if c.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - c.pos)));
    }
    Ok((model, header.meta))
}

/// Loads a checkpoint and requires its config to equal `expected`.
pub fn load_checkpoint_expecting(bytes: &[u8], expected: &ModelConfig) -> Result<(DecoderModel, CheckpointMeta)> {
    let (model, meta) = load_checkpoint(bytes)?;
    if model.config() != expected {
        let diff = config_diff(model.config(), expected);
        return Err(Error::Checkpoint(format!("config mismatch: {diff}")));
    }
    Ok((model, meta))
}

fn config_diff(a: &ModelConfig, b: &ModelConfig) -> String {
    let (ja, jb) = (
        serde_json::to_value(a).unwrap_or_default(),
        serde_json::to_value(b).unwrap_or_default(),
    );
    match (ja.as_object(), jb.as_object()) {
        (Some(oa), Some(ob)) => oa
            .iter()
            .filter(|(k, v)| ob.get(*k) != Some(*v))
            .map(|(k, v)| format!("{k}: checkpoint {v}, expected {}", ob.get(k).cloned().unwrap_or_default()))
            .collect::<Vec<_>>()
            .join("; "),
        _ => "unknown".into(),
    }
}

pub fn write_checkpoint(path: &Path, model: &DecoderModel, meta: CheckpointMeta) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&save_checkpoint(model, meta))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(DecoderModel, CheckpointMeta)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    load_checkpoint(&buf)
}
