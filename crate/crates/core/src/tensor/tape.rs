use rand::Rng;

use super::kernels;
use super::{ParamId, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous run of rows belonging to one sequence in a packed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

/// Geometry of a packed multi-head causal attention call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionLayout {
    pub heads: usize,
    pub head_dim: usize,
    /// Relative offsets are clamped to `[-max_rel, max_rel]`.
    pub max_rel: usize,
    pub segments: Vec<Segment>,
}

impl AttentionLayout {
    pub fn bias_len(&self) -> usize {
        2 * self.max_rel + 1
    }

    /// Bias slot for query `i` attending to key `j`.
    #[inline]
    pub fn bias_index(&self, i: usize, j: usize) -> usize {
        let r = i as isize - j as isize;
        let m = self.max_rel as isize;
        (r.clamp(-m, m) + m) as usize
    }
}

enum Op {
    Leaf,
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        s: f64,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
    },
    LogSoftmax {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    Dropout {
        x: Var,
        scale: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ReplaceRows {
        x: Var,
        token: Var,
        rows: Vec<bool>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Var,
        layout: AttentionLayout,
        probs: Vec<f64>,
    },
    ScalarWithGrad {
        x: Var,
        grad: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    param: Option<ParamId>,
    op: Op,
}

/// Records a computation for reverse-mode differentiation.
///
/// A tape is built for one forward pass and discarded after `backward`.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bytes: usize,
    macs: u64,
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    peak_bytes: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Tape bytes plus the largest simultaneous gradient footprint seen.
    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let n: usize = shape.iter().product();
    (n / cols.max(1), cols)
}

fn is_suffix(full: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= full.len() && full[full.len() - suffix.len()..] == *suffix
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.clone()).expect("tape values are well formed")
    }

    /// Multiply-accumulates performed by `matmul` and `attention` so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Bytes held by recorded values and saved intermediates.
    pub fn bytes(&self) -> usize {
        self.bytes
    }

    /// Parameter leaves recorded on this tape, with their handles.
    pub fn param_leaves(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| n.param.map(|p| (p, Var(i))))
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let saved = match &op {
            Op::LayerNorm { xhat, rstd, .. } => xhat.len() + rstd.len(),
            Op::Dropout { scale, .. } => scale.len(),
            Op::Attention { probs, .. } => probs.len(),
            Op::ScalarWithGrad { grad, .. } => grad.len(),
            _ => 0,
        };
        self.bytes += (value.len() + saved) * std::mem::size_of::<f64>();
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            param: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records `t` as a leaf; it requires grad iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        Ok(self.push(shape, data, false, Op::Leaf))
    }

    /// Records a model parameter; gradients flow to it only when `trainable`.
    pub fn param(&mut self, id: ParamId, t: &Tensor, trainable: bool) -> Var {
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), trainable, Op::Leaf);
        self.nodes[v.0].param = Some(id);
        v
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sa, sb) {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// Element-wise `a + b` with suffix broadcasting of `b`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("add", a, b)?;
        let bv = self.value(b);
        let m = bv.len();
        let out: Vec<f64> = self.value(a).iter().enumerate().map(|(i, &x)| x + bv[i % m]).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Add { a, b }))
    }

    /// Element-wise `a * b` with suffix broadcasting of `b`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("mul", a, b)?;
        let bv = self.value(b);
        let m = bv.len();
        let out: Vec<f64> = self.value(a).iter().enumerate().map(|(i, &x)| x * bv[i % m]).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, rg, Op::Scale { a, s })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], rg, Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(vec![1], vec![s], rg, Op::Mean { a })
    }

    /// `a[m×k] · b[k×n]`; both operands must be 2-D.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a), self.value(b), m, k, n, &mut out);
        self.macs += (m * k * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b }))
    }

    /// Layer normalization over the last axis, with optional affine terms
    /// of the last axis' length.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = rows_cols(&shape);
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [cols] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm: eps must be positive"));
        }
        let xv = self.value(x);
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for (h, &v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *h = (v - mu) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gamma {
            let gv = self.value(g);
            out.iter_mut().enumerate().for_each(|(i, o)| *o *= gv[i % cols]);
        }
        if let Some(b) = beta {
            let bv = self.value(b);
            out.iter_mut().enumerate().for_each(|(i, o)| *o += bv[i % cols]);
        }
        let rg = self.rg(x) || gamma.is_some_and(|g| self.rg(g)) || beta.is_some_and(|b| self.rg(b));
        Ok(self.push(
            shape,
            out,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let (_, cols) = rows_cols(&shape);
        let mut out = vec![0.0; self.value(x).len()];
        kernels::softmax_rows(self.value(x), cols, &mut out);
        let rg = self.rg(x);
        self.push(shape, out, rg, Op::Softmax { x })
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let (_, cols) = rows_cols(&shape);
        let mut out = vec![0.0; self.value(x).len()];
        kernels::log_softmax_rows(self.value(x), cols, &mut out);
        let rg = self.rg(x);
        self.push(shape, out, rg, Op::LogSoftmax { x })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, rg, Op::Gelu { x })
    }

    /// Inverted dropout: kept elements are scaled by `1/(1-rate)` at train
    /// time; identity when `train` is false or `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let scale: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.dropout_with_mask(x, scale)
    }

    /// Dropout with an explicit per-element multiplier (used by tests).
    pub fn dropout_with_mask(&mut self, x: Var, scale: Vec<f64>) -> Result<Var> {
        if scale.len() != self.value(x).len() {
            return Err(Error::Shape {
                op: "dropout",
                lhs: self.shape(x).to_vec(),
                rhs: vec![scale.len()],
            });
        }
        let out = self.value(x).iter().zip(&scale).map(|(&v, &s)| v * s).collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::Dropout { x, scale }))
    }

    /// Concatenates along axis 0; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != tail.len() + 1 || s[1..] != tail[..] {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(shape, out, rg, Op::Concat { parts: parts.to_vec() }))
    }

    /// Rows `start..end` along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if start >= end || end > shape[0] {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: shape,
                rhs: vec![start, end],
            });
        }
        let stride: usize = shape[1..].iter().product();
        let out = self.value(x)[start * stride..end * stride].to_vec();
        let mut new_shape = shape;
        new_shape[0] = end - start;
        let rg = self.rg(x);
        Ok(self.push(new_shape, out, rg, Op::SliceRows { x, start }))
    }

    /// Replaces every row `r` of a 2-D `x` with `token` where `rows[r]` is set.
    pub fn replace_rows(&mut self, x: Var, token: Var, rows: Vec<bool>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || self.shape(token) != [shape[1]] || rows.len() != shape[0] {
            return Err(Error::Shape {
                op: "replace_rows",
                lhs: shape,
                rhs: self.shape(token).to_vec(),
            });
        }
        let cols = shape[1];
        let mut out = self.value(x).to_vec();
        let tv = self.value(token);
        for (r, &m) in rows.iter().enumerate() {
            if m {
                out[r * cols..(r + 1) * cols].copy_from_slice(tv);
            }
        }
        let rg = self.rg(x) || self.rg(token);
        Ok(self.push(shape, out, rg, Op::ReplaceRows { x, token, rows }))
    }

    /// Packed multi-head causal self-attention with a learned relative bias:
    /// `softmax(QKᵀ/√d + B + M)V` per segment and head, where
    /// `B[i,j] = bias[h, clamp(i-j)]` and `M` masks keys after the query.
    ///
    /// `q`, `k`, `v` are `[rows × heads·head_dim]`; `bias` is
    /// `[heads × (2·max_rel+1)]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, bias: Var, layout: &AttentionLayout) -> Result<Var> {
        let width = layout.heads * layout.head_dim;
        let shape = self.shape(q).to_vec();
        let bad = shape.len() != 2
            || shape[1] != width
            || self.shape(k) != shape.as_slice()
            || self.shape(v) != shape.as_slice()
            || self.shape(bias) != [layout.heads, layout.bias_len()]
            || layout.segments.iter().any(|s| s.start + s.len > shape[0]);
        if bad {
            return Err(Error::Shape {
                op: "attention",
                lhs: shape,
                rhs: self.shape(bias).to_vec(),
            });
        }
        let (out, probs, macs) = attention_forward(self.value(q), self.value(k), self.value(v), self.value(bias), layout, shape[0]);
        self.macs += macs;
        let rg = [q, k, v, bias].iter().any(|&x| self.rg(x));
        Ok(self.push(
            shape,
            out,
            rg,
            Op::Attention {
                q,
                k,
                v,
                bias,
                layout: layout.clone(),
                probs,
            },
        ))
    }

    /// Scalar node with a value and gradient computed outside the tape
    /// (for example by a dynamic program). `grad` is `d value / d x`.
    pub fn scalar_with_grad(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(x).len() {
            return Err(Error::Shape {
                op: "scalar_with_grad",
                lhs: self.shape(x).to_vec(),
                rhs: vec![grad.len()],
            });
        }
        let rg = self.rg(x);
        Ok(self.push(vec![1], vec![value], rg, Op::ScalarWithGrad { x, grad }))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut live = std::mem::size_of::<f64>();
        let mut peak = live;
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let before = live;
            self.backprop_node(node, &g, &mut grads, &mut live);
            peak = peak.max(live.max(before));
            live -= g.len() * std::mem::size_of::<f64>();
        }
        Ok(Gradients {
            grads,
            peak_bytes: self.bytes + peak,
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], live: &mut usize) {
        let mut acc = |var: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[var.0];
            if !n.requires_grad {
                return;
            }
            let slot = &mut grads[var.0];
            if slot.is_none() {
                *live += n.value.len() * std::mem::size_of::<f64>();
                *slot = Some(vec![0.0; n.value.len()]);
            }
            f(slot.as_mut().unwrap());
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                acc(*a, &mut |ga| kernels::axpy(1.0, g, ga));
                acc(*b, &mut |gb| {
                    let m = gb.len();
                    for (i, &x) in g.iter().enumerate() {
                        gb[i % m] += x;
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let m = bv.len();
                acc(*a, &mut |ga| {
                    for (i, (d, &x)) in ga.iter_mut().zip(g).enumerate() {
                        *d += x * bv[i % m];
                    }
                });
                acc(*b, &mut |gb| {
                    for (i, &x) in g.iter().enumerate() {
                        gb[i % m] += x * av[i];
                    }
                });
            }
            Op::Scale { a, s } => acc(*a, &mut |ga| kernels::axpy(*s, g, ga)),
            Op::Sum { a } => acc(*a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean { a } => acc(*a, &mut |ga| {
                let w = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|d| *d += w);
            }),
            Op::MatMul { a, b } => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                acc(*a, &mut |ga| kernels::matmul_grad_lhs(g, bv, m, k, n, ga));
                acc(*b, &mut |gb| kernels::matmul_grad_rhs(av, g, m, k, n, gb));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = *node.shape.last().unwrap();
                if let Some(gm) = gamma {
                    acc(*gm, &mut |gg| {
                        for (i, (&d, &h)) in g.iter().zip(xhat).enumerate() {
                            gg[i % cols] += d * h;
                        }
                    });
                }
                if let Some(bt) = beta {
                    acc(*bt, &mut |gb| {
                        for (i, &d) in g.iter().enumerate() {
                            gb[i % cols] += d;
                        }
                    });
                }
                let gamma_v = gamma.map(|gm| &self.nodes[gm.0].value);
                acc(*x, &mut |gx| {
                    let mut dh = vec![0.0; cols];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let (gr, hr) = (&g[span.clone()], &xhat[span.clone()]);
                        for c in 0..cols {
                            dh[c] = gr[c] * gamma_v.map_or(1.0, |gv| gv[c]);
                        }
                        let mean_dh = dh.iter().sum::<f64>() / cols as f64;
                        let mean_dh_h = kernels::dot(&dh, hr) / cols as f64;
                        for (c, d) in gx[span].iter_mut().enumerate() {
                            *d += rs * (dh[c] - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Softmax { x } => {
                let cols = *node.shape.last().unwrap();
                let y = &node.value;
                acc(*x, &mut |gx| {
                    for ((gr, yr), dr) in g.chunks_exact(cols).zip(y.chunks_exact(cols)).zip(gx.chunks_exact_mut(cols)) {
                        let s = kernels::dot(gr, yr);
                        for c in 0..cols {
                            dr[c] += yr[c] * (gr[c] - s);
                        }
                    }
                });
            }
            Op::LogSoftmax { x } => {
                let cols = *node.shape.last().unwrap();
                let y = &node.value;
                acc(*x, &mut |gx| {
                    for ((gr, yr), dr) in g.chunks_exact(cols).zip(y.chunks_exact(cols)).zip(gx.chunks_exact_mut(cols)) {
                        let s: f64 = gr.iter().sum();
                        for c in 0..cols {
                            dr[c] += gr[c] - yr[c].exp() * s;
                        }
                    }
                });
            }
            Op::Gelu { x } => {
                let xv = &self.nodes[x.0].value;
                acc(*x, &mut |gx| {
                    for ((d, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        *d += gi * kernels::gelu_grad(xi);
                    }
                });
            }
            Op::Dropout { x, scale } => acc(*x, &mut |gx| {
                for ((d, &gi), &s) in gx.iter_mut().zip(g).zip(scale) {
                    *d += gi * s;
                }
            }),
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    acc(p, &mut |gp| kernels::axpy(1.0, &g[off..off + n], gp));
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let stride: usize = node.shape[1..].iter().product();
                let off = start * stride;
                acc(*x, &mut |gx| kernels::axpy(1.0, g, &mut gx[off..off + g.len()]));
            }
            Op::ReplaceRows { x, token, rows } => {
                let cols = node.shape[1];
                acc(*x, &mut |gx| {
                    for (r, &m) in rows.iter().enumerate() {
                        if !m {
                            let span = r * cols..(r + 1) * cols;
                            kernels::axpy(1.0, &g[span.clone()], &mut gx[span]);
                        }
                    }
                });
                acc(*token, &mut |gt| {
                    for (r, &m) in rows.iter().enumerate() {
                        if m {
                            kernels::axpy(1.0, &g[r * cols..(r + 1) * cols], gt);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                layout,
                probs,
            } => {
                let grads_in = attention_backward(
                    g,
                    &self.nodes[q.0].value,
                    &self.nodes[k.0].value,
                    &self.nodes[v.0].value,
                    probs,
                    layout,
                    [self.rg(*q), self.rg(*k), self.rg(*v), self.rg(*bias)],
                );
                let [dq, dk, dv, db] = grads_in;
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv), (*bias, db)] {
                    if let Some(d) = d {
                        acc(var, &mut |gx| kernels::axpy(1.0, &d, gx));
                    }
                }
            }
            Op::ScalarWithGrad { x, grad } => acc(*x, &mut |gx| kernels::axpy(g[0], grad, gx)),
        }
    }
}

/// Forward attention; returns `(output, saved probabilities, MACs)`.
///
/// Probabilities are stored per segment and head as dense `len×len`
/// blocks (zeros above the diagonal).
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    bias: &[f64],
    layout: &AttentionLayout,
    rows: usize,
) -> (Vec<f64>, Vec<f64>, u64) {
    let (h_n, dh) = (layout.heads, layout.head_dim);
    let width = h_n * dh;
    let blen = layout.bias_len();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; rows * width];
    let total: usize = layout.segments.iter().map(|s| s.len * s.len * h_n).sum();
    let mut probs = vec![0.0; total];
    let mut macs = 0u64;
    let mut off = 0;
    let mut scores = Vec::new();
    for seg in &layout.segments {
        let l = seg.len;
        for h in 0..h_n {
            let p = &mut probs[off..off + l * l];
            for i in 0..l {
                let qi = &q[(seg.start + i) * width + h * dh..][..dh];
                scores.clear();
                for j in 0..=i {
                    let kj = &k[(seg.start + j) * width + h * dh..][..dh];
                    scores.push(kernels::dot(qi, kj) * scale + bias[h * blen + layout.bias_index(i, j)]);
                }
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for (j, sc) in scores.iter().enumerate() {
                    let e = (sc - m).exp();
                    p[i * l + j] = e;
                    s += e;
                }
                let o = &mut out[(seg.start + i) * width + h * dh..][..dh];
                for j in 0..=i {
                    p[i * l + j] /= s;
                    kernels::axpy(p[i * l + j], &v[(seg.start + j) * width + h * dh..][..dh], o);
                }
                macs += 2 * ((i + 1) * dh) as u64;
            }
            off += l * l;
        }
    }
    (out, probs, macs)
}

type AttnGrads = [Option<Vec<f64>>; 4];

fn attention_backward(g: &[f64], q: &[f64], k: &[f64], v: &[f64], probs: &[f64], layout: &AttentionLayout, need: [bool; 4]) -> AttnGrads {
    let (h_n, dh) = (layout.heads, layout.head_dim);
    let width = h_n * dh;
    let blen = layout.bias_len();
    let scale = 1.0 / (dh as f64).sqrt();
    let n = q.len();
    let mut dq = vec![0.0; n];
    let mut dk = vec![0.0; n];
    let mut dv = vec![0.0; n];
    let mut db = vec![0.0; h_n * blen];
    let mut off = 0;
    let mut dp = Vec::new();
    for seg in &layout.segments {
        let l = seg.len;
        for h in 0..h_n {
            let p = &probs[off..off + l * l];
            for i in 0..l {
                let gi = &g[(seg.start + i) * width + h * dh..][..dh];
                dp.clear();
                for j in 0..=i {
                    let vj_off = (seg.start + j) * width + h * dh;
                    dp.push(kernels::dot(gi, &v[vj_off..vj_off + dh]));
                    if need[2] {
                        kernels::axpy(p[i * l + j], gi, &mut dv[vj_off..vj_off + dh]);
                    }
                }
                let row_dot: f64 = (0..=i).map(|j| p[i * l + j] * dp[j]).sum();
                let qi_off = (seg.start + i) * width + h * dh;
                for j in 0..=i {
                    let ds = p[i * l + j] * (dp[j] - row_dot);
                    if ds == 0.0 {
                        continue;
                    }
                    let kj_off = (seg.start + j) * width + h * dh;
                    if need[0] {
                        let (kj, dqi) = (&k[kj_off..kj_off + dh], &mut dq[qi_off..qi_off + dh]);
                        kernels::axpy(ds * scale, kj, dqi);
                    }
                    if need[1] {
                        kernels::axpy(ds * scale, &q[qi_off..qi_off + dh], &mut dk[kj_off..kj_off + dh]);
                    }
                    db[h * blen + layout.bias_index(i, j)] += ds;
                }
            }
            off += l * l;
        }
    }
    let keep = |flag: bool, buf: Vec<f64>| flag.then_some(buf);
    [keep(need[0], dq), keep(need[1], dk), keep(need[2], dv), keep(need[3], db)]
}
