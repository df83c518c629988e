use crate::error::{config_err, data_err, usage_err, Error, Result};
use crate::IGNORE_LABEL;

use super::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use super::{ConvSpec, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Scale(Var, f64),
    Concat {
        parts: Vec<Var>,
        channels: Vec<usize>,
    },
    Slice {
        input: Var,
        start: usize,
        channels: usize,
    },
    Softmax(Var),
    Upsample2x(Var),
    Sum(Var),
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<u8>,
        counted: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// A single-shot record of a forward computation.
///
/// Nodes are appended in execution order, so the node list is always a
/// topological order. Operations whose inputs carry no gradient are stored
/// as constants and skipped by [`Tape::backward`].
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    strict: bool,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape in strict mode: any non-finite forward value is an error.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            strict: true,
            consumed: false,
        }
    }

    pub fn with_strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    /// Move a leaf gradient out of the tape. Leaves that received no
    /// gradient (unreachable from the loss) yield zeros.
    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape.clone();
        let data = self
            .grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
        Some(Tensor { shape, data })
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if self.strict && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let rg = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, rg, op))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, spec: ConvSpec) -> Result<Var> {
        let geom = ConvGeom::new(self.value(input), self.value(weight), self.value(bias), spec)?;
        let out = conv2d_forward(&geom, self.value(input), self.value(weight), self.value(bias));
        self.push_checked(
            "conv2d",
            out,
            &[input, weight, bias],
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let out = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        };
        self.push_checked("relu", out, &[input], Op::Relu(input))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let broadcast = if x.shape == y.shape {
            false
        } else if x.shape.len() == y.shape.len() && y.shape[0] == 1 && x.shape[1..] == y.shape[1..] {
            true
        } else {
            return Err(config_err!(
                "elementwise shapes {:?} and {:?} are not broadcastable",
                x.shape,
                y.shape
            ));
        };
        let m = y.data.len();
        let f = match kind {
            Binary::Add => |p: f64, q: f64| p + q,
            Binary::Sub => |p: f64, q: f64| p - q,
            Binary::Mul => |p: f64, q: f64| p * q,
        };
        let data = x
            .data
            .iter()
            .enumerate()
            .map(|(i, &p)| f(p, y.data[if broadcast { i % m } else { i }]))
            .collect();
        let out = Tensor {
            shape: x.shape.clone(),
            data,
        };
        self.push_checked(
            "elementwise",
            out,
            &[a, b],
            Op::Binary {
                kind,
                a,
                b,
                broadcast,
            },
        )
    }

    /// `a + b`; `b` may have leading extent 1 and broadcast over `a`'s batch.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Hadamard product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let x = self.value(input);
        let out = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|v| v * factor).collect(),
        };
        self.push_checked("scale", out, &[input], Op::Scale(input, factor))
    }

    /// Stack `[B, Ci, H, W]` tensors along the channel axis, in argument order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| config_err!("concat_channels needs at least one part"))?;
        let [b, _, h, w] = self.value(*first).dims4()?;
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let [pb, pc, ph, pw] = self.value(p).dims4()?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(config_err!(
                    "concat_channels: part {:?} does not align with batch {b} at {h}x{w}",
                    self.value(p).shape
                ));
            }
            channels.push(pc);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(b * total * plane);
        for bi in 0..b {
            for (&p, &c) in parts.iter().zip(&channels) {
                let src = &self.value(p).data;
                data.extend_from_slice(&src[bi * c * plane..(bi + 1) * c * plane]);
            }
        }
        let out = Tensor {
            shape: vec![b, total, h, w],
            data,
        };
        self.push_checked(
            "concat_channels",
            out,
            parts,
            Op::Concat {
                parts: parts.to_vec(),
                channels,
            },
        )
    }

    /// Channels `start..start + channels` of a `[B, C, H, W]` tensor.
    pub fn slice_channels(&mut self, input: Var, start: usize, channels: usize) -> Result<Var> {
        let [b, c, h, w] = self.value(input).dims4()?;
        if channels == 0 || start + channels > c {
            return Err(config_err!(
                "slice_channels {start}..{} outside 0..{c}",
                start + channels
            ));
        }
        let plane = h * w;
        let src = &self.value(input).data;
        let mut data = Vec::with_capacity(b * channels * plane);
        for bi in 0..b {
            let base = (bi * c + start) * plane;
            data.extend_from_slice(&src[base..base + channels * plane]);
        }
        let out = Tensor {
            shape: vec![b, channels, h, w],
            data,
        };
        self.push_checked(
            "slice_channels",
            out,
            &[input],
            Op::Slice {
                input,
                start,
                channels,
            },
        )
    }

    /// Per-pixel softmax over the channel axis, stabilised by max subtraction.
    pub fn softmax_channels(&mut self, logits: Var) -> Result<Var> {
        let x = self.value(logits);
        let [b, n, h, w] = x.dims4()?;
        if n < 2 {
            return Err(config_err!("softmax_channels needs at least 2 channels, got {n}"));
        }
        let mut data = vec![0.0; x.data.len()];
        softmax_into(&x.data, b, n, h * w, &mut data);
        let out = Tensor {
            shape: x.shape.clone(),
            data,
        };
        self.push_checked("softmax_channels", out, &[logits], Op::Softmax(logits))
    }

    /// Nearest-neighbour upsampling by a factor of two in both spatial axes.
    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [b, c, h, w] = x.dims4()?;
        let (h2, w2) = (2 * h, 2 * w);
        let mut data = vec![0.0; b * c * h2 * w2];
        for (plane, dst) in x.data.chunks_exact(h * w).zip(data.chunks_exact_mut(h2 * w2)) {
            for y in 0..h2 {
                let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
                for (xo, d) in dst[y * w2..(y + 1) * w2].iter_mut().enumerate() {
                    *d = row[xo / 2];
                }
            }
        }
        let out = Tensor {
            shape: vec![b, c, h2, w2],
            data,
        };
        self.push_checked("upsample2x", out, &[input], Op::Upsample2x(input))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).data.iter().sum();
        self.push_checked("sum", Tensor::scalar(s), &[input], Op::Sum(input))
    }

    /// Mean of squared differences over all elements.
    pub fn mse_loss(&mut self, prediction: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(prediction), self.value(target));
        if p.shape != t.shape {
            return Err(config_err!(
                "mse_loss shapes differ: {:?} vs {:?}",
                p.shape,
                t.shape
            ));
        }
        let s: f64 = p.data.iter().zip(&t.data).map(|(a, b)| (a - b) * (a - b)).sum();
        let out = Tensor::scalar(s / p.data.len() as f64);
        self.push_checked("mse_loss", out, &[prediction, target], Op::Mse(prediction, target))
    }

    /// Mean negative log-likelihood of the true class over non-ignored pixels.
    ///
    /// `labels` is `[B, H, W]` flattened; [`IGNORE_LABEL`] pixels contribute
    /// nothing. With every pixel ignored the loss is zero.
    pub fn cross_entropy_loss(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let x = self.value(logits);
        let [b, n, h, w] = x.dims4()?;
        let plane = h * w;
        if labels.len() != b * plane {
            return Err(config_err!(
                "cross_entropy_loss: {} labels for logits {:?}",
                labels.len(),
                x.shape
            ));
        }
        let mut total = 0.0;
        let mut counted = 0usize;
        for bi in 0..b {
            let base = bi * n * plane;
            for px in 0..plane {
                let l = labels[bi * plane + px];
                if l == IGNORE_LABEL {
                    continue;
                }
                if l as usize >= n {
                    return Err(data_err!("label {l} outside 0..{n}"));
                }
                let at = |c: usize| x.data[base + c * plane + px];
                let m = (0..n).map(at).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..n).map(|c| (at(c) - m).exp()).sum::<f64>().ln();
                total += lse - at(l as usize);
                counted += 1;
            }
        }
        let loss = if counted == 0 { 0.0 } else { total / counted as f64 };
        self.push_checked(
            "cross_entropy_loss",
            Tensor::scalar(loss),
            &[logits],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                counted,
            },
        )
    }

    /// Reverse pass from a scalar. A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(usage_err!("backward already ran on this tape; tapes are single-shot"));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(usage_err!(
                "backward needs a scalar, got shape {:?}",
                self.nodes[loss.0].value.shape
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let add_into = |grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>| {
            match &mut grads[v.0] {
                Some(dst) => {
                    for (d, c) in dst.iter_mut().zip(&contrib) {
                        *d += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need = [wants(*input), wants(*weight), wants(*bias)];
                let cg = conv2d_backward(
                    geom,
                    &nodes[input.0].value,
                    &nodes[weight.0].value,
                    g,
                    need,
                );
                if let Some(d) = cg.input {
                    add_into(grads, *input, d);
                }
                if let Some(d) = cg.weight {
                    add_into(grads, *weight, d);
                }
                if let Some(d) = cg.bias {
                    add_into(grads, *bias, d);
                }
            }
            Op::Relu(input) => {
                let x = &nodes[input.0].value.data;
                let d: Vec<f64> = x
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                add_into(grads, *input, d);
            }
            Op::Binary {
                kind,
                a,
                b,
                broadcast,
            } => {
                let xa = &nodes[a.0].value.data;
                let xb = &nodes[b.0].value.data;
                let m = xb.len();
                let bi = |j: usize| if *broadcast { j % m } else { j };
                if wants(*a) {
                    let d: Vec<f64> = match kind {
                        Binary::Add | Binary::Sub => g.to_vec(),
                        Binary::Mul => g.iter().enumerate().map(|(j, gv)| gv * xb[bi(j)]).collect(),
                    };
                    add_into(grads, *a, d);
                }
                if wants(*b) {
                    let mut d = vec![0.0; m];
                    for (j, gv) in g.iter().enumerate() {
                        d[bi(j)] += match kind {
                            Binary::Add => *gv,
                            Binary::Sub => -gv,
                            Binary::Mul => gv * xa[j],
                        };
                    }
                    add_into(grads, *b, d);
                }
            }
            Op::Scale(input, f) => {
                let d: Vec<f64> = g.iter().map(|v| v * f).collect();
                add_into(grads, *input, d);
            }
            Op::Concat { parts, channels } => {
                let [b, total, h, w] = nodes[i].value.dims4().expect("4-d");
                let plane = h * w;
                let mut offset = 0;
                for (&p, &c) in parts.iter().zip(channels) {
                    if wants(p) {
                        let mut d = Vec::with_capacity(b * c * plane);
                        for bi in 0..b {
                            let base = (bi * total + offset) * plane;
                            d.extend_from_slice(&g[base..base + c * plane]);
                        }
                        add_into(grads, p, d);
                    }
                    offset += c;
                }
            }
            Op::Slice {
                input,
                start,
                channels,
            } => {
                let [b, c, h, w] = nodes[input.0].value.dims4().expect("4-d");
                let plane = h * w;
                let mut d = vec![0.0; b * c * plane];
                for bi in 0..b {
                    let dst = (bi * c + start) * plane;
                    let src = bi * channels * plane;
                    d[dst..dst + channels * plane].copy_from_slice(&g[src..src + channels * plane]);
                }
                add_into(grads, *input, d);
            }
            Op::Softmax(input) => {
                let y = &nodes[i].value;
                let [b, n, h, w] = y.dims4().expect("4-d");
                let plane = h * w;
                let mut d = vec![0.0; y.data.len()];
                for bi in 0..b {
                    let base = bi * n * plane;
                    for px in 0..plane {
                        let idx = |c: usize| base + c * plane + px;
                        let dot: f64 = (0..n).map(|c| g[idx(c)] * y.data[idx(c)]).sum();
                        for c in 0..n {
                            d[idx(c)] = y.data[idx(c)] * (g[idx(c)] - dot);
                        }
                    }
                }
                add_into(grads, *input, d);
            }
            Op::Upsample2x(input) => {
                let [b, c, h, w] = nodes[input.0].value.dims4().expect("4-d");
                let w2 = 2 * w;
                let mut d = vec![0.0; b * c * h * w];
                for (dst, src) in d.chunks_exact_mut(h * w).zip(g.chunks_exact(4 * h * w)) {
                    for y in 0..2 * h {
                        for x in 0..w2 {
                            dst[(y / 2) * w + x / 2] += src[y * w2 + x];
                        }
                    }
                }
                add_into(grads, *input, d);
            }
            Op::Sum(input) => {
                let d = vec![g[0]; nodes[input.0].value.data.len()];
                add_into(grads, *input, d);
            }
            Op::Mse(p, t) => {
                let (xp, xt) = (&nodes[p.0].value.data, &nodes[t.0].value.data);
                let scale = 2.0 * g[0] / xp.len() as f64;
                let diff: Vec<f64> = xp.iter().zip(xt).map(|(a, b)| scale * (a - b)).collect();
                if wants(*t) {
                    let neg: Vec<f64> = diff.iter().map(|v| -v).collect();
                    add_into(grads, *t, neg);
                }
                if wants(*p) {
                    add_into(grads, *p, diff);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                counted,
            } => {
                let x = &nodes[logits.0].value;
                let [b, n, h, w] = x.dims4().expect("4-d");
                let plane = h * w;
                let mut d = vec![0.0; x.data.len()];
                if *counted > 0 {
                    softmax_into(&x.data, b, n, plane, &mut d);
                    let scale = g[0] / *counted as f64;
                    for bi in 0..b {
                        let base = bi * n * plane;
                        for px in 0..plane {
                            let l = labels[bi * plane + px];
                            for c in 0..n {
                                let k = base + c * plane + px;
                                d[k] = if l == IGNORE_LABEL {
                                    0.0
                                } else if c == l as usize {
                                    (d[k] - 1.0) * scale
                                } else {
                                    d[k] * scale
                                };
                            }
                        }
                    }
                }
                add_into(grads, *logits, d);
            }
        }
    }
}

pub(crate) fn softmax_into(x: &[f64], b: usize, n: usize, plane: usize, out: &mut [f64]) {
    for bi in 0..b {
        let base = bi * n * plane;
        for px in 0..plane {
            let idx = |c: usize| base + c * plane + px;
            let m = (0..n).map(|c| x[idx(c)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for c in 0..n {
                let e = (x[idx(c)] - m).exp();
                out[idx(c)] = e;
                s += e;
            }
            for c in 0..n {
                out[idx(c)] /= s;
            }
        }
    }
}
