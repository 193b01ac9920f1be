use std::cell::RefCell;

use rayon::prelude::*;

use super::kernels::{self, ConvGeom};
use super::{Tensor, TensorError};

/// Position of a recorded value on its tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Relu,
    Relu6,
    HSigmoid,
    HSwish,
    Exp,
    Square,
    Neg,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, b: NodeId, geom: ConvGeom, batch: usize },
    Depthwise { x: NodeId, w: NodeId, b: NodeId, geom: ConvGeom, batch: usize },
    Dense { x: NodeId, w: NodeId, b: NodeId, rows: usize },
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, p: usize },
    Transpose { x: NodeId, m: usize, k: usize },
    Unary { x: NodeId, kind: Unary },
    Scale { x: NodeId, c: f64 },
    AddScalar { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    ScaleChannels { x: NodeId, g: NodeId, plane: usize },
    ChannelAffine { x: NodeId, gamma: NodeId, beta: NodeId, channels: usize, plane: usize },
    GlobalAvgPool { x: NodeId, plane: usize },
    ChannelMax { x: NodeId, channels: usize, hw: usize, argmax: Vec<usize> },
    ChannelAvg { x: NodeId, channels: usize, hw: usize },
    Sum { x: NodeId },
    Mean { x: NodeId },
    RowNorm { x: NodeId, d: usize },
    RowNormalize { x: NodeId, d: usize },
    BatchStandardize { x: NodeId, n: usize, d: usize, eps: f64 },
    Diag { x: NodeId, d: usize },
    Rows { x: NodeId, offset: usize },
    Reshape { x: NodeId },
    Attention(Box<AttentionRecord>),
}

#[derive(Debug)]
struct AttentionRecord {
    q: NodeId,
    k: NodeId,
    v: NodeId,
    dims: AttnDims,
    /// Softmax weights before the dropout mask, `[N, heads, L, S]`.
    weights: Vec<f64>,
    mask: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug)]
struct AttnDims {
    batch: usize,
    heads: usize,
    l: usize,
    s: usize,
    e: usize,
}

impl AttnDims {
    fn head_width(&self) -> usize {
        self.e / self.heads
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// Values are immutable once recorded. A tape is single-threaded; the
/// kernels it drives parallelise over the batch dimension internally.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id.0, self.shape())
    }
}

/// Gradients of a scalar with respect to every trainable leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.by_id(var.id)
    }

    pub fn by_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

fn par_samples<F>(n: usize, per: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let mut out = vec![0.0; n * per];
    if n > 1 {
        out.par_chunks_mut(per).enumerate().for_each(|(i, c)| f(i, c));
    } else if n == 1 {
        f(0, &mut out);
    }
    out
}

/// Runs `f` once per sample into private buffers, then sums them in sample
/// order so the result is independent of thread scheduling.
fn reduce_samples<F>(n: usize, len: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let partials: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut buf = vec![0.0; len];
            f(i, &mut buf);
            buf
        })
        .collect();
    let mut total = vec![0.0; len];
    for p in &partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

fn relu6(v: f64) -> f64 {
    v.clamp(0.0, 6.0)
}

fn relu6_grad(v: f64) -> f64 {
    if v > 0.0 && v < 6.0 {
        1.0
    } else {
        0.0
    }
}

fn h_sigmoid(v: f64) -> f64 {
    relu6(v + 3.0) / 6.0
}

fn h_sigmoid_grad(v: f64) -> f64 {
    relu6_grad(v + 3.0) / 6.0
}

fn unary_forward(kind: Unary, v: f64) -> f64 {
    match kind {
        Unary::Relu => v.max(0.0),
        Unary::Relu6 => relu6(v),
        Unary::HSigmoid => h_sigmoid(v),
        Unary::HSwish => v * h_sigmoid(v),
        Unary::Exp => v.exp(),
        Unary::Square => v * v,
        Unary::Neg => -v,
    }
}

fn unary_grad(kind: Unary, v: f64, y: f64) -> f64 {
    match kind {
        Unary::Relu => {
            if v > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Relu6 => relu6_grad(v),
        Unary::HSigmoid => h_sigmoid_grad(v),
        Unary::HSwish => h_sigmoid(v) + v * h_sigmoid_grad(v),
        Unary::Exp => y,
        Unary::Square => 2.0 * v,
        Unary::Neg => -1.0,
    }
}

fn mismatch(op: &'static str, left: &Tensor, right: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: left.shape().to_vec(),
        right: right.shape().to_vec(),
    }
}

/// Splits an optionally batched `[N, ...rest]` shape into `(N, rest)`.
fn split_batch(shape: &[usize], unbatched_rank: usize) -> Option<(usize, bool, &[usize])> {
    if shape.len() == unbatched_rank {
        Some((1, false, shape))
    } else if shape.len() == unbatched_rank + 1 {
        Some((shape[0], true, &shape[1..]))
    } else {
        None
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable input; gradients are reported for it.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: NodeId(nodes.len() - 1),
        }
    }

    fn value(&self, id: NodeId) -> Tensor {
        self.nodes.borrow()[id.0].value.clone()
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|id| nodes[id.0].requires_grad)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients, TensorError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id.0];
        if !root.value.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: root.value.shape().to_vec(),
            });
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; loss.id.0 + 1];
        let mut out: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        pending[loss.id.0] = Some(vec![1.0]);

        for idx in (0..=loss.id.0).rev() {
            let Some(grad) = pending[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out[idx] = Some(Tensor::from_parts(node.value.shape().to_vec(), grad));
                continue;
            }
            let mut sink = |id: NodeId, g: Vec<f64>| {
                if !nodes[id.0].requires_grad {
                    return;
                }
                match &mut pending[id.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                    slot @ None => *slot = Some(g),
                }
            };
            backward_node(&nodes, node, &grad, &mut sink);
        }
        Ok(Gradients { grads: out })
    }
}

fn needs(nodes: &[Node], id: NodeId) -> bool {
    nodes[id.0].requires_grad
}

fn backward_node(nodes: &[Node], node: &Node, gout: &[f64], sink: &mut dyn FnMut(NodeId, Vec<f64>)) {
    let val = |id: NodeId| nodes[id.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, geom, batch } | Op::Depthwise { x, w, b, geom, batch } => {
            let depthwise = matches!(node.op, Op::Depthwise { .. });
            let g = *geom;
            let (xs, ws) = (val(*x), val(*w));
            let (in_per, out_per) = (g.c_in * g.in_plane(), g.c_out * g.out_plane());
            if needs(nodes, *x) {
                let gin = par_samples(*batch, in_per, |n, gi| {
                    let go = &gout[n * out_per..(n + 1) * out_per];
                    if depthwise {
                        kernels::depthwise_backward_input(go, ws, &g, gi);
                    } else {
                        kernels::conv_backward_input(go, ws, &g, gi);
                    }
                });
                sink(*x, gin);
            }
            if needs(nodes, *w) || needs(nodes, *b) {
                let wlen = ws.len();
                let combined = reduce_samples(*batch, wlen + g.c_out, |n, buf| {
                    let go = &gout[n * out_per..(n + 1) * out_per];
                    let xi = &xs[n * in_per..(n + 1) * in_per];
                    let (gw, gb) = buf.split_at_mut(wlen);
                    if depthwise {
                        kernels::depthwise_backward_params(go, xi, &g, gw, gb);
                    } else {
                        kernels::conv_backward_params(go, xi, &g, gw, gb);
                    }
                });
                sink(*b, combined[wlen..].to_vec());
                let mut gw = combined;
                gw.truncate(wlen);
                sink(*w, gw);
            }
        }
        Op::Dense { x, w, b, rows } => {
            let (xs, ws) = (val(*x), val(*w));
            let d_out = val(*b).len();
            let d_in = ws.len() / d_out;
            if needs(nodes, *x) {
                let mut gin = vec![0.0; rows * d_in];
                for r in 0..*rows {
                    kernels::dense_backward_input_row(
                        &gout[r * d_out..(r + 1) * d_out],
                        ws,
                        &mut gin[r * d_in..(r + 1) * d_in],
                    );
                }
                sink(*x, gin);
            }
            if needs(nodes, *w) {
                let mut gw = vec![0.0; d_in * d_out];
                for r in 0..*rows {
                    let go = &gout[r * d_out..(r + 1) * d_out];
                    for i in 0..d_in {
                        let xi = xs[r * d_in + i];
                        let row = &mut gw[i * d_out..(i + 1) * d_out];
                        for (g, &o) in row.iter_mut().zip(go) {
                            *g += xi * o;
                        }
                    }
                }
                sink(*w, gw);
            }
            if needs(nodes, *b) {
                let mut gb = vec![0.0; d_out];
                for r in 0..*rows {
                    for (g, &o) in gb.iter_mut().zip(&gout[r * d_out..(r + 1) * d_out]) {
                        *g += o;
                    }
                }
                sink(*b, gb);
            }
        }
        Op::MatMul { a, b, m, k, p } => {
            let (av, bv) = (val(*a), val(*b));
            if needs(nodes, *a) {
                let mut ga = vec![0.0; m * k];
                for i in 0..*m {
                    for j in 0..*k {
                        ga[i * k + j] = (0..*p).map(|c| gout[i * p + c] * bv[j * p + c]).sum();
                    }
                }
                sink(*a, ga);
            }
            if needs(nodes, *b) {
                let mut gb = vec![0.0; k * p];
                for i in 0..*m {
                    for j in 0..*k {
                        let aij = av[i * k + j];
                        for c in 0..*p {
                            gb[j * p + c] += aij * gout[i * p + c];
                        }
                    }
                }
                sink(*b, gb);
            }
        }
        Op::Transpose { x, m, k } => {
            let mut gx = vec![0.0; m * k];
            for i in 0..*m {
                for j in 0..*k {
                    gx[i * k + j] = gout[j * m + i];
                }
            }
            sink(*x, gx);
        }
        Op::Unary { x, kind } => {
            let xs = val(*x);
            let ys = node.value.data();
            let gx = gout
                .iter()
                .zip(xs.iter().zip(ys))
                .map(|(g, (&v, &y))| g * unary_grad(*kind, v, y))
                .collect();
            sink(*x, gx);
        }
        Op::Scale { x, c } => sink(*x, gout.iter().map(|g| g * c).collect()),
        Op::AddScalar { x } => sink(*x, gout.to_vec()),
        Op::Add { a, b } => {
            sink(*a, gout.to_vec());
            sink(*b, gout.to_vec());
        }
        Op::Sub { a, b } => {
            sink(*a, gout.to_vec());
            sink(*b, gout.iter().map(|g| -g).collect());
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            if needs(nodes, *a) {
                sink(*a, gout.iter().zip(bv).map(|(g, y)| g * y).collect());
            }
            if needs(nodes, *b) {
                sink(*b, gout.iter().zip(av).map(|(g, y)| g * y).collect());
            }
        }
        Op::ScaleChannels { x, g, plane } => {
            let (xs, gs) = (val(*x), val(*g));
            if needs(nodes, *x) {
                let gx = gout
                    .iter()
                    .enumerate()
                    .map(|(i, go)| go * gs[i / plane])
                    .collect();
                sink(*x, gx);
            }
            if needs(nodes, *g) {
                let gg = gout
                    .chunks(*plane)
                    .zip(xs.chunks(*plane))
                    .map(|(go, xv)| go.iter().zip(xv).map(|(a, b)| a * b).sum())
                    .collect();
                sink(*g, gg);
            }
        }
        Op::ChannelAffine { x, gamma, beta, channels, plane } => {
            let (xs, gs) = (val(*x), val(*gamma));
            let ch = |i: usize| (i / plane) % channels;
            if needs(nodes, *x) {
                sink(*x, gout.iter().enumerate().map(|(i, g)| g * gs[ch(i)]).collect());
            }
            if needs(nodes, *gamma) {
                let mut gg = vec![0.0; *channels];
                for (i, (g, v)) in gout.iter().zip(xs).enumerate() {
                    gg[ch(i)] += g * v;
                }
                sink(*gamma, gg);
            }
            if needs(nodes, *beta) {
                let mut gb = vec![0.0; *channels];
                for (i, g) in gout.iter().enumerate() {
                    gb[ch(i)] += g;
                }
                sink(*beta, gb);
            }
        }
        Op::GlobalAvgPool { x, plane } => {
            let inv = 1.0 / *plane as f64;
            let gx = gout
                .iter()
                .flat_map(|&g| std::iter::repeat(g * inv).take(*plane))
                .collect();
            sink(*x, gx);
        }
        Op::ChannelMax { x, channels, hw, argmax } => {
            let mut gx = vec![0.0; val(*x).len()];
            let per = channels * hw;
            for (pos, &c) in argmax.iter().enumerate() {
                let (n, p) = (pos / hw, pos % hw);
                gx[n * per + c * hw + p] += gout[pos];
            }
            sink(*x, gx);
        }
        Op::ChannelAvg { x, channels, hw } => {
            let inv = 1.0 / *channels as f64;
            let samples = gout.len() / hw;
            let mut gx = vec![0.0; val(*x).len()];
            for n in 0..samples {
                let go = &gout[n * hw..(n + 1) * hw];
                for c in 0..*channels {
                    let base = (n * channels + c) * hw;
                    for (g, o) in gx[base..base + hw].iter_mut().zip(go) {
                        *g = o * inv;
                    }
                }
            }
            sink(*x, gx);
        }
        Op::Sum { x } => sink(*x, vec![gout[0]; val(*x).len()]),
        Op::Mean { x } => {
            let n = val(*x).len();
            sink(*x, vec![gout[0] / n as f64; n]);
        }
        Op::RowNorm { x, d } => {
            let xs = val(*x);
            let norms = node.value.data();
            let gx = xs
                .chunks(*d)
                .zip(norms.iter().zip(gout))
                .flat_map(|(row, (&nrm, &g))| {
                    row.iter()
                        .map(move |&v| if nrm > 0.0 { g * v / nrm } else { 0.0 })
                })
                .collect();
            sink(*x, gx);
        }
        Op::RowNormalize { x, d } => {
            let xs = val(*x);
            let ys = node.value.data();
            let mut gx = Vec::with_capacity(xs.len());
            for ((row, yrow), grow) in xs.chunks(*d).zip(ys.chunks(*d)).zip(gout.chunks(*d)) {
                let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                gx.extend(yrow.iter().zip(grow).map(|(y, g)| (g - y * dot) / nrm));
            }
            sink(*x, gx);
        }
        Op::BatchStandardize { x, n, d, eps } => {
            let xs = val(*x);
            let (n, d) = (*n, *d);
            let mut gx = vec![0.0; n * d];
            for j in 0..d {
                let mean = (0..n).map(|i| xs[i * d + j]).sum::<f64>() / n as f64;
                let var = (0..n).map(|i| (xs[i * d + j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                let std = var.sqrt();
                let s = std + eps;
                let ds: f64 = -(0..n)
                    .map(|i| gout[i * d + j] * (xs[i * d + j] - mean))
                    .sum::<f64>()
                    / (s * s);
                let dxc: Vec<f64> = (0..n)
                    .map(|i| {
                        let xc = xs[i * d + j] - mean;
                        let via_std = if std > 0.0 {
                            ds * xc / ((n - 1) as f64 * std)
                        } else {
                            0.0
                        };
                        gout[i * d + j] / s + via_std
                    })
                    .collect();
                let dmean = dxc.iter().sum::<f64>() / n as f64;
                for i in 0..n {
                    gx[i * d + j] = dxc[i] - dmean;
                }
            }
            sink(*x, gx);
        }
        Op::Diag { x, d } => {
            let mut gx = vec![0.0; d * d];
            for i in 0..*d {
                gx[i * d + i] = gout[i];
            }
            sink(*x, gx);
        }
        Op::Rows { x, offset } => {
            let mut gx = vec![0.0; val(*x).len()];
            gx[*offset..*offset + gout.len()].copy_from_slice(gout);
            sink(*x, gx);
        }
        Op::Reshape { x } => sink(*x, gout.to_vec()),
        Op::Attention(rec) => attention_backward(nodes, rec, gout, sink),
    }
}

fn attention_backward(
    nodes: &[Node],
    rec: &AttentionRecord,
    gout: &[f64],
    sink: &mut dyn FnMut(NodeId, Vec<f64>),
) {
    let AttnDims { batch, heads, l, s, e } = rec.dims;
    let dh = rec.dims.head_width();
    let scale = 1.0 / (dh as f64).sqrt();
    let (qs, ks, vs) = (
        nodes[rec.q.0].value.data(),
        nodes[rec.k.0].value.data(),
        nodes[rec.v.0].value.data(),
    );
    let mut gq = vec![0.0; qs.len()];
    let mut gk = vec![0.0; ks.len()];
    let mut gv = vec![0.0; vs.len()];
    for n in 0..batch {
        for h in 0..heads {
            let wbase = ((n * heads) + h) * l * s;
            let a = &rec.weights[wbase..wbase + l * s];
            let masked: Vec<f64> = match &rec.mask {
                Some(m) => a.iter().zip(&m[wbase..wbase + l * s]).map(|(x, y)| x * y).collect(),
                None => a.to_vec(),
            };
            for li in 0..l {
                // dA'[li, si] = <gout_li, v_si> over the head's slice
                let mut da = vec![0.0; s];
                for (si, dai) in da.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for c in 0..dh {
                        let col = h * dh + c;
                        acc += gout[(n * l + li) * e + col] * vs[(n * s + si) * e + col];
                        gv[(n * s + si) * e + col] += masked[li * s + si] * gout[(n * l + li) * e + col];
                    }
                    *dai = acc;
                }
                if let Some(m) = &rec.mask {
                    for (si, dai) in da.iter_mut().enumerate() {
                        *dai *= m[wbase + li * s + si];
                    }
                }
                let arow = &a[li * s..(li + 1) * s];
                let inner: f64 = arow.iter().zip(&da).map(|(x, y)| x * y).sum();
                for si in 0..s {
                    let dscore = arow[si] * (da[si] - inner) * scale;
                    for c in 0..dh {
                        let col = h * dh + c;
                        gq[(n * l + li) * e + col] += dscore * ks[(n * s + si) * e + col];
                        gk[(n * s + si) * e + col] += dscore * qs[(n * l + li) * e + col];
                    }
                }
            }
        }
    }
    sink(rec.q, gq);
    sink(rec.k, gk);
    sink(rec.v, gv);
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(&[self.id])
    }

    fn derive(&self, value: Tensor, op: Op, inputs: &[NodeId]) -> Var<'t> {
        let rg = self.tape.requires(inputs);
        self.tape.push(value, op, rg)
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables recorded on different tapes"
        );
    }

    /// 2-D cross-correlation. `self` is `[C_in,H,W]` or `[N,C_in,H,W]`,
    /// `weight` is `[C_out,C_in,k,k]`, `bias` is `[C_out]`.
    pub fn conv2d(&self, weight: &Var<'t>, bias: &Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>, TensorError> {
        self.same_tape(weight);
        self.same_tape(bias);
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let (batch, batched, chw) =
            split_batch(x.shape(), 3).ok_or_else(|| mismatch("conv2d", &x, &w))?;
        if w.rank() != 4 || w.shape()[2] != w.shape()[3] || w.shape()[1] != chw[0] {
            return Err(mismatch("conv2d", &x, &w));
        }
        if b.shape() != [w.shape()[0]] {
            return Err(mismatch("conv2d", &w, &b));
        }
        let geom = geometry("conv2d", chw, w.shape()[0], w.shape()[2], stride, padding, &x, &w)?;
        let out_per = geom.c_out * geom.out_plane();
        let in_per = geom.c_in * geom.in_plane();
        let (xs, ws, bs) = (x.data(), w.data(), b.data());
        let out = par_samples(batch, out_per, |n, o| {
            kernels::conv_forward(&xs[n * in_per..(n + 1) * in_per], ws, bs, &geom, o)
        });
        let shape = batched_shape(batched, batch, &[geom.c_out, geom.ho, geom.wo]);
        Ok(self.derive(
            Tensor::from_parts(shape, out),
            Op::Conv2d { x: self.id, w: weight.id, b: bias.id, geom, batch },
            &[self.id, weight.id, bias.id],
        ))
    }

    /// Per-channel convolution. `weight` is `[C,k,k]`, `bias` is `[C]`.
    pub fn depthwise_conv2d(&self, weight: &Var<'t>, bias: &Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>, TensorError> {
        self.same_tape(weight);
        self.same_tape(bias);
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let (batch, batched, chw) =
            split_batch(x.shape(), 3).ok_or_else(|| mismatch("depthwise_conv2d", &x, &w))?;
        if w.rank() != 3 || w.shape()[1] != w.shape()[2] || w.shape()[0] != chw[0] {
            return Err(mismatch("depthwise_conv2d", &x, &w));
        }
        if b.shape() != [w.shape()[0]] {
            return Err(mismatch("depthwise_conv2d", &w, &b));
        }
        let geom = geometry("depthwise_conv2d", chw, chw[0], w.shape()[1], stride, padding, &x, &w)?;
        let out_per = geom.c_out * geom.out_plane();
        let in_per = geom.c_in * geom.in_plane();
        let (xs, ws, bs) = (x.data(), w.data(), b.data());
        let out = par_samples(batch, out_per, |n, o| {
            kernels::depthwise_forward(&xs[n * in_per..(n + 1) * in_per], ws, bs, &geom, o)
        });
        let shape = batched_shape(batched, batch, &[geom.c_out, geom.ho, geom.wo]);
        Ok(self.derive(
            Tensor::from_parts(shape, out),
            Op::Depthwise { x: self.id, w: weight.id, b: bias.id, geom, batch },
            &[self.id, weight.id, bias.id],
        ))
    }

    /// Affine map `x W + b`; `self` is `[D_in]` or `[N,D_in]`.
    pub fn dense(&self, weight: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(weight);
        self.same_tape(bias);
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let (rows, batched, d) = split_batch(x.shape(), 1).ok_or_else(|| mismatch("dense", &x, &w))?;
        if w.rank() != 2 || w.shape()[0] != d[0] {
            return Err(mismatch("dense", &x, &w));
        }
        if b.shape() != [w.shape()[1]] {
            return Err(mismatch("dense", &w, &b));
        }
        let (d_in, d_out) = (d[0], w.shape()[1]);
        let mut out = vec![0.0; rows * d_out];
        for r in 0..rows {
            kernels::dense_forward_row(
                &x.data()[r * d_in..(r + 1) * d_in],
                w.data(),
                b.data(),
                &mut out[r * d_out..(r + 1) * d_out],
            );
        }
        let shape = batched_shape(batched, rows, &[d_out]);
        Ok(self.derive(
            Tensor::from_parts(shape, out),
            Op::Dense { x: self.id, w: weight.id, b: bias.id, rows },
            &[self.id, weight.id, bias.id],
        ))
    }

    /// `[M,K] x [K,P] -> [M,P]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(mismatch("matmul", &a, &b));
        }
        let (m, k, p) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let (av, bv) = (a.data(), b.data());
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            for j in 0..k {
                let aij = av[i * k + j];
                for c in 0..p {
                    out[i * p + c] += aij * bv[j * p + c];
                }
            }
        }
        Ok(self.derive(
            Tensor::from_parts(vec![m, p], out),
            Op::MatMul { a: self.id, b: other.id, m, k, p },
            &[self.id, other.id],
        ))
    }

    pub fn transpose(&self) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(TensorError::InvalidShape { shape: x.shape().to_vec() });
        }
        let (m, k) = (x.shape()[0], x.shape()[1]);
        let xs = x.data();
        let out = (0..k * m).map(|idx| xs[(idx % m) * k + idx / m]).collect();
        Ok(self.derive(
            Tensor::from_parts(vec![k, m], out),
            Op::Transpose { x: self.id, m, k },
            &[self.id],
        ))
    }

    fn unary(&self, kind: Unary) -> Var<'t> {
        let x = self.value();
        let y = x.map(|v| unary_forward(kind, v));
        self.derive(y, Op::Unary { x: self.id, kind }, &[self.id])
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Unary::Relu)
    }

    /// `min(max(x, 0), 6)`; the subgradient is 0 at both kinks.
    pub fn relu6(&self) -> Var<'t> {
        self.unary(Unary::Relu6)
    }

    /// `relu6(x + 3) / 6`
    pub fn h_sigmoid(&self) -> Var<'t> {
        self.unary(Unary::HSigmoid)
    }

    /// `x * relu6(x + 3) / 6`
    pub fn h_swish(&self) -> Var<'t> {
        self.unary(Unary::HSwish)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Unary::Exp)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Unary::Square)
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(Unary::Neg)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let y = self.value().map(|v| v * c);
        self.derive(y, Op::Scale { x: self.id, c }, &[self.id])
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let y = self.value().map(|v| v + c);
        self.derive(y, Op::AddScalar { x: self.id }, &[self.id])
    }

    fn binary(&self, other: &Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(mismatch(name, &a, &b));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(a.shape().to_vec(), data))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        let y = self.binary(other, "add", |a, b| a + b)?;
        Ok(self.derive(y, Op::Add { a: self.id, b: other.id }, &[self.id, other.id]))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        let y = self.binary(other, "sub", |a, b| a - b)?;
        Ok(self.derive(y, Op::Sub { a: self.id, b: other.id }, &[self.id, other.id]))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        let y = self.binary(other, "mul", |a, b| a * b)?;
        Ok(self.derive(y, Op::Mul { a: self.id, b: other.id }, &[self.id, other.id]))
    }

    /// Multiplies each channel plane of `[C,H,W]` / `[N,C,H,W]` by the
    /// matching entry of `gate` (`[C]` / `[N,C]`).
    pub fn scale_channels(&self, gate: &Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(gate);
        let (x, g) = (self.value(), gate.value());
        let (batch, batched, chw) =
            split_batch(x.shape(), 3).ok_or_else(|| mismatch("scale_channels", &x, &g))?;
        let expected = batched_shape(batched, batch, &[chw[0]]);
        if g.shape() != expected.as_slice() {
            return Err(mismatch("scale_channels", &x, &g));
        }
        let plane = chw[1] * chw[2];
        let gs = g.data();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * gs[i / plane])
            .collect();
        Ok(self.derive(
            Tensor::from_parts(x.shape().to_vec(), data),
            Op::ScaleChannels { x: self.id, g: gate.id, plane },
            &[self.id, gate.id],
        ))
    }

    /// `x * gamma[c] + beta[c]` for every channel plane; `gamma` and `beta`
    /// are `[C]` and shared across the batch.
    pub fn channel_affine(&self, gamma: &Var<'t>, beta: &Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(gamma);
        self.same_tape(beta);
        let (x, g, b) = (self.value(), gamma.value(), beta.value());
        let (_, _, chw) =
            split_batch(x.shape(), 3).ok_or_else(|| mismatch("channel_affine", &x, &g))?;
        let channels = chw[0];
        if g.shape() != [channels] || b.shape() != [channels] {
            return Err(mismatch("channel_affine", &x, &g));
        }
        let plane = chw[1] * chw[2];
        let (gs, bs) = (g.data(), b.data());
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let c = (i / plane) % channels;
                v * gs[c] + bs[c]
            })
            .collect();
        Ok(self.derive(
            Tensor::from_parts(x.shape().to_vec(), data),
            Op::ChannelAffine { x: self.id, gamma: gamma.id, beta: beta.id, channels, plane },
            &[self.id, gamma.id, beta.id],
        ))
    }

    /// Spatial mean per channel: `[C,H,W] -> [C]`, `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&self) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        let (batch, batched, chw) = split_batch(x.shape(), 3)
            .ok_or_else(|| TensorError::InvalidShape { shape: x.shape().to_vec() })?;
        let plane = chw[1] * chw[2];
        let data = x
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let shape = batched_shape(batched, batch, &[chw[0]]);
        Ok(self.derive(
            Tensor::from_parts(shape, data),
            Op::GlobalAvgPool { x: self.id, plane },
            &[self.id],
        ))
    }

    /// Maximum over channels at every spatial location, flattened row-major:
    /// `[C,H,W] -> [H*W]`, `[N,C,H,W] -> [N,H*W]`. Ties go to the lowest channel.
    pub fn spatial_channel_max_pool(&self) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        let (batch, batched, chw) = split_batch(x.shape(), 3)
            .ok_or_else(|| TensorError::InvalidShape { shape: x.shape().to_vec() })?;
        let (c, hw) = (chw[0], chw[1] * chw[2]);
        let xs = x.data();
        let mut out = Vec::with_capacity(batch * hw);
        let mut argmax = Vec::with_capacity(batch * hw);
        for n in 0..batch {
            for p in 0..hw {
                let mut best = 0;
                let mut best_v = xs[n * c * hw + p];
                for ch in 1..c {
                    let v = xs[(n * c + ch) * hw + p];
                    if v > best_v {
                        best = ch;
                        best_v = v;
                    }
                }
                out.push(best_v);
                argmax.push(best);
            }
        }
        let shape = batched_shape(batched, batch, &[hw]);
        Ok(self.derive(
            Tensor::from_parts(shape, out),
            Op::ChannelMax { x: self.id, channels: c, hw, argmax },
            &[self.id],
        ))
    }

    /// Mean over channels at every spatial location; same layout as
    /// [`Var::spatial_channel_max_pool`].
    pub fn spatial_channel_avg_pool(&self) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        let (batch, batched, chw) = split_batch(x.shape(), 3)
            .ok_or_else(|| TensorError::InvalidShape { shape: x.shape().to_vec() })?;
        let (c, hw) = (chw[0], chw[1] * chw[2]);
        let xs = x.data();
        let mut out = vec![0.0; batch * hw];
        for n in 0..batch {
            for ch in 0..c {
                let plane = &xs[(n * c + ch) * hw..(n * c + ch + 1) * hw];
                for (o, v) in out[n * hw..(n + 1) * hw].iter_mut().zip(plane) {
                    *o += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= c as f64);
        let shape = batched_shape(batched, batch, &[hw]);
        Ok(self.derive(
            Tensor::from_parts(shape, out),
            Op::ChannelAvg { x: self.id, channels: c, hw },
            &[self.id],
        ))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.derive(Tensor::scalar(s), Op::Sum { x: self.id }, &[self.id])
    }

    pub fn mean(&self) -> Var<'t> {
        let x = self.value();
        let s = x.data().iter().sum::<f64>() / x.numel() as f64;
        self.derive(Tensor::scalar(s), Op::Mean { x: self.id }, &[self.id])
    }

    /// Euclidean norm of every row: `[N,D] -> [N]`, `[D] -> []`.
    /// The subgradient at the origin is 0.
    pub fn row_norm(&self) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        let (rows, batched, d) = split_batch(x.shape(), 1)
            .ok_or_else(|| TensorError::InvalidShape { shape: x.shape().to_vec() })?;
        let d = d[0];
        let data = x
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let shape = batched_shape(batched, rows, &[]);
        Ok(self.derive(
            Tensor::from_parts(shape, data),
            Op::RowNorm { x: self.id, d },
            &[self.id],
        ))
    }

    /// Scales every row to unit length. Rows with norm below `min_norm`
    /// are rejected.
    pub fn row_normalize(&self, min_norm: f64) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        let (_, _, d) = split_batch(x.shape(), 1)
            .ok_or_else(|| TensorError::InvalidShape { shape: x.shape().to_vec() })?;
        let d = d[0];
        let mut data = Vec::with_capacity(x.numel());
        for row in x.data().chunks(d) {
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(nrm >= min_norm) {
                return Err(TensorError::DegenerateNorm { norm: nrm });
            }
            data.extend(row.iter().map(|v| v / nrm));
        }
        Ok(self.derive(
            Tensor::from_parts(x.shape().to_vec(), data),
            Op::RowNormalize { x: self.id, d },
            &[self.id],
        ))
    }

    /// Column-wise `(x - mean) / (std + eps)` over the batch axis of `[N,D]`,
    /// with the unbiased standard deviation.
    pub fn batch_standardize(&self, eps: f64) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(TensorError::InvalidShape { shape: x.shape().to_vec() });
        }
        let (n, d) = (x.shape()[0], x.shape()[1]);
        if n < 2 {
            return Err(TensorError::BatchTooSmall { n });
        }
        let xs = x.data();
        let mut out = vec![0.0; n * d];
        for j in 0..d {
            let mean = (0..n).map(|i| xs[i * d + j]).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (xs[i * d + j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let s = var.sqrt() + eps;
            for i in 0..n {
                out[i * d + j] = (xs[i * d + j] - mean) / s;
            }
        }
        Ok(self.derive(
            Tensor::from_parts(vec![n, d], out),
            Op::BatchStandardize { x: self.id, n, d, eps },
            &[self.id],
        ))
    }

    pub fn diag(&self) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        if x.rank() != 2 || x.shape()[0] != x.shape()[1] {
            return Err(TensorError::InvalidShape { shape: x.shape().to_vec() });
        }
        let d = x.shape()[0];
        let data = (0..d).map(|i| x.data()[i * d + i]).collect();
        Ok(self.derive(Tensor::from_parts(vec![d], data), Op::Diag { x: self.id, d }, &[self.id]))
    }

    /// Slice `[start, start + len)` along the leading axis.
    pub fn rows(&self, start: usize, len: usize) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        if x.rank() == 0 || len == 0 || start + len > x.shape()[0] {
            return Err(TensorError::InvalidShape { shape: x.shape().to_vec() });
        }
        let per: usize = x.shape()[1..].iter().product();
        let offset = start * per;
        let data = x.data()[offset..offset + len * per].to_vec();
        let mut shape = x.shape().to_vec();
        shape[0] = len;
        Ok(self.derive(Tensor::from_parts(shape, data), Op::Rows { x: self.id, offset }, &[self.id]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>, TensorError> {
        let y = self.value().reshape(shape)?;
        Ok(self.derive(y, Op::Reshape { x: self.id }, &[self.id]))
    }

    /// Scaled dot-product attention split over `heads`.
    ///
    /// `self` holds queries `[N,L,E]`, `keys`/`values` are `[N,S,E]`. The
    /// optional `dropout` multiplier has shape `[N,heads,L,S]` and is applied
    /// to the softmax weights.
    pub fn attention(
        &self,
        keys: &Var<'t>,
        values: &Var<'t>,
        heads: usize,
        dropout: Option<&Tensor>,
    ) -> Result<Var<'t>, TensorError> {
        self.same_tape(keys);
        self.same_tape(values);
        let (q, k, v) = (self.value(), keys.value(), values.value());
        if q.rank() != 3 || k.rank() != 3 || k.shape() != v.shape() {
            return Err(mismatch("attention", &q, &k));
        }
        let (batch, l, e) = (q.shape()[0], q.shape()[1], q.shape()[2]);
        let s = k.shape()[1];
        if k.shape()[0] != batch || k.shape()[2] != e {
            return Err(mismatch("attention", &q, &k));
        }
        if heads == 0 || e % heads != 0 {
            return Err(TensorError::HeadsDoNotDivide { embed: e, heads });
        }
        let dims = AttnDims { batch, heads, l, s, e };
        if let Some(m) = dropout {
            if m.shape() != [batch, heads, l, s] {
                return Err(TensorError::ShapeMismatch {
                    op: "attention",
                    left: vec![batch, heads, l, s],
                    right: m.shape().to_vec(),
                });
            }
        }
        let dh = dims.head_width();
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (q.data(), k.data(), v.data());
        let mut weights = vec![0.0; batch * heads * l * s];
        let mut out = vec![0.0; batch * l * e];
        for n in 0..batch {
            for h in 0..heads {
                let wbase = (n * heads + h) * l * s;
                for li in 0..l {
                    let row = &mut weights[wbase + li * s..wbase + (li + 1) * s];
                    for (si, r) in row.iter_mut().enumerate() {
                        *r = (0..dh)
                            .map(|c| qs[(n * l + li) * e + h * dh + c] * ks[(n * s + si) * e + h * dh + c])
                            .sum::<f64>()
                            * scale;
                    }
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    row.iter_mut().for_each(|r| *r = (*r - max).exp());
                    let z: f64 = row.iter().sum();
                    row.iter_mut().for_each(|r| *r /= z);
                    for si in 0..s {
                        let mut wgt = row[si];
                        if let Some(m) = dropout {
                            wgt *= m.data()[wbase + li * s + si];
                        }
                        for c in 0..dh {
                            out[(n * l + li) * e + h * dh + c] += wgt * vs[(n * s + si) * e + h * dh + c];
                        }
                    }
                }
            }
        }
        let rec = AttentionRecord {
            q: self.id,
            k: keys.id,
            v: values.id,
            dims,
            weights,
            mask: dropout.map(Tensor::to_vec),
        };
        Ok(self.derive(
            Tensor::from_parts(vec![batch, l, e], out),
            Op::Attention(Box::new(rec)),
            &[self.id, keys.id, values.id],
        ))
    }

    /// Reverse sweep from this scalar.
    pub fn backward(&self) -> Result<Gradients, TensorError> {
        self.tape.backward(self)
    }
}

fn batched_shape(batched: bool, n: usize, rest: &[usize]) -> Vec<usize> {
    let mut shape = Vec::with_capacity(rest.len() + 1);
    if batched {
        shape.push(n);
    }
    shape.extend_from_slice(rest);
    shape
}

#[allow(clippy::too_many_arguments)]
fn geometry(
    op: &'static str,
    chw: &[usize],
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    x: &Tensor,
    w: &Tensor,
) -> Result<ConvGeom, TensorError> {
    let (c_in, h, wd) = (chw[0], chw[1], chw[2]);
    let ho = ConvGeom::out_extent(h, k, stride, pad);
    let wo = ConvGeom::out_extent(wd, k, stride, pad);
    match (ho, wo) {
        (Some(ho), Some(wo)) => Ok(ConvGeom { c_in, c_out, h, w: wd, k, stride, pad, ho, wo }),
        _ => Err(TensorError::KernelDoesNotFit {
            op,
            input: x.shape().to_vec(),
            weight: w.shape().to_vec(),
            stride,
            padding: pad,
        }),
    }
}
