//! Define-by-run reverse-mode autodiff.
//!
//! Every op call evaluates eagerly and appends a node; node ids are handed out
//! in insertion order, so the tape is always a topological order of the graph.

use std::collections::BTreeMap;

use super::kernels::{col2im, gemm, im2col, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        Self(i)
    }
}

/// How batch normalisation obtains its statistics.
#[derive(Debug, Clone)]
pub enum NormStats {
    /// Use the statistics of the current batch.
    Batch,
    /// Use fixed running statistics; the op is then a per-channel affine map.
    Running { mean: Vec<f64>, var: Vec<f64> },
}

#[derive(Debug)]
pub(crate) enum Op {
    Input,
    Param(usize),
    MatMul(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddBias {
        x: NodeId,
        b: NodeId,
    },
    Relu(NodeId),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
        batch_stats: bool,
    },
    GlobalAvgPool(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(NodeId),
    Mean(NodeId),
    EmbedCenter {
        w: NodeId,
        kh: usize,
        kw: usize,
    },
}

impl Op {
    /// Nodes this op reads.
    pub(crate) fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Linear { x, w } | Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::AddBias { x, b } => vec![*x, *b],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Scale(a, _) | Op::Relu(a) | Op::GlobalAvgPool(a) | Op::Sum(a) | Op::Mean(a) => vec![*a],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::EmbedCenter { w, .. } => vec![*w],
        }
    }

    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias { .. } => "add_bias",
            Op::Relu(_) => "relu",
            Op::BatchNorm { .. } => "batch_norm",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::EmbedCenter { .. } => "embed_center",
        }
    }
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Tensor,
    requires_grad: bool,
    scope: String,
}

/// Recording of one forward computation; confined to the thread that built it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    scope: String,
}

const BN_EPS: f64 = 1e-5;

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

    /// Names subsequent nodes in error messages (usually the layer id).
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub(crate) fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    /// Gradient of the last `backward` loss with respect to `id`, if it was reached.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Batch mean and (biased) variance recorded by a batch-statistics norm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm {
                mean,
                var,
                batch_stats: true,
                ..
            } => Some((mean, var)),
            _ => None,
        }
    }

    fn describe(&self, op: &str) -> String {
        if self.scope.is_empty() {
            format!("{op} #{}", self.nodes.len())
        } else {
            format!("{op} #{} in `{}`", self.nodes.len(), self.scope)
        }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            scope: self.scope.clone(),
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// A constant leaf. Gradients are still tracked when `track` is set.
    pub fn input(&mut self, value: Tensor, track: bool) -> NodeId {
        self.push(Op::Input, value, track)
    }

    /// A trainable leaf identified by `key`; gradients are gathered per key.
    pub fn param(&mut self, key: usize, value: &Tensor) -> NodeId {
        let mut v = value.clone();
        v.clear_grad();
        self.push(Op::Param(key), v, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(self.describe("matmul"), format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), Tensor::new(&[m, n], out)?, rg))
    }

    /// `x·wᵀ` for `x: [N, in]` and `w: [out, in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::shape(
                self.describe("linear"),
                format!("input {sx:?} vs weight {sw:?}"),
            ));
        }
        let (n, i, o) = (sx[0], sx[1], sw[0]);
        let mut out = vec![0.0; n * o];
        gemm(n, i, o, self.value(x).data(), false, self.value(w).data(), true, 0.0, &mut out);
        let rg = self.rg(&[x, w]);
        Ok(self.push(Op::Linear { x, w }, Tensor::new(&[n, o], out)?, rg))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(Error::shape(
                self.describe("conv2d"),
                format!("input {sx:?} vs kernel {sw:?}, stride {stride}"),
            ));
        }
        let geom = ConvGeometry {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kh: sw[2],
            kw: sw[3],
            stride,
            padding,
        };
        if sx[2] + 2 * padding < sw[2] || sx[3] + 2 * padding < sw[3] {
            return Err(Error::shape(
                self.describe("conv2d"),
                format!("kernel {sw:?} larger than padded input {sx:?}"),
            ));
        }
        let (batch, oc) = (sx[0], sw[0]);
        let (p, l) = (geom.patch_len(), geom.out_len());
        let img = geom.channels * geom.height * geom.width;
        let mut cols = vec![0.0; batch * p * l];
        let mut out = vec![0.0; batch * oc * l];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            for n in 0..batch {
                let c = &mut cols[n * p * l..(n + 1) * p * l];
                im2col(&geom, &xd[n * img..(n + 1) * img], c);
                gemm(oc, p, l, wd, false, c, false, 0.0, &mut out[n * oc * l..(n + 1) * oc * l]);
            }
        }
        let value = Tensor::new(&[batch, oc, geom.out_height(), geom.out_width()], out)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(Op::Conv2d { x, w, geom, cols }, value, rg))
    }

    fn same_shape(&self, op: &str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                self.describe(op),
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let data = self.value(a).data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(self.shape(a), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(Op::Scale(a, factor), value, rg)
    }

    /// Adds a per-channel bias along dimension 1.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || self.shape(b) != [sx[1]] {
            return Err(Error::shape(
                self.describe("add_bias"),
                format!("input {sx:?} vs bias {:?}", self.shape(b)),
            ));
        }
        let (c, inner) = (sx[1], sx[2..].iter().product::<usize>());
        let bd = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[(i / inner) % c])
            .collect();
        let value = Tensor::new(&sx, data)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(Op::AddBias { x, b }, value, rg))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(self.shape(a), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(Op::Relu(a), value, rg)
    }

    /// Per-channel normalisation over every axis except dimension 1.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: &NormStats,
    ) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || self.shape(gamma) != [sx[1]] || self.shape(beta) != [sx[1]] {
            return Err(Error::shape(
                self.describe("batch_norm"),
                format!(
                    "input {sx:?}, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let (n, c, inner) = (sx[0], sx[1], sx[2..].iter().product::<usize>());
        let xd = self.value(x).data();
        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                let m = (n * inner) as f64;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for (i, v) in xd.iter().enumerate() {
                    mean[(i / inner) % c] += v;
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for (i, v) in xd.iter().enumerate() {
                    let ch = (i / inner) % c;
                    var[ch] += (v - mean[ch]).powi(2);
                }
                var.iter_mut().for_each(|v| *v /= m);
                (mean, var, true)
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape(
                        self.describe("batch_norm"),
                        format!("running stats for {} channels, input has {c}", mean.len()),
                    ));
                }
                (mean.clone(), var.clone(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for (i, v) in xd.iter().enumerate() {
            let ch = (i / inner) % c;
            xhat[i] = (v - mean[ch]) * inv_std[ch];
            out[i] = gd[ch] * xhat[i] + bd[ch];
        }
        let value = Tensor::new(&sx, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mean,
                var,
                batch_stats,
            },
            value,
            rg,
        ))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::shape(self.describe("global_avg_pool"), format!("{sx:?}")));
        }
        let inner = sx[2] * sx[3];
        let data = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|c| c.iter().sum::<f64>() / inner as f64)
            .collect();
        let value = Tensor::new(&sx[..2], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::GlobalAvgPool(x), value, rg))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(Error::shape(
                self.describe("softmax_cross_entropy"),
                format!("logits {s:?} vs {} labels", labels.len()),
            ));
        }
        let k = s[1];
        let mut probs = vec![0.0; s[0] * k];
        let mut loss = 0.0;
        for (row, (z, p)) in self
            .value(logits)
            .data()
            .chunks(k)
            .zip(probs.chunks_mut(k))
            .enumerate()
        {
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (pi, zi) in p.iter_mut().zip(z) {
                *pi = (zi - max).exp();
                total += *pi;
            }
            p.iter_mut().for_each(|v| *v /= total);
            loss -= (z[labels[row]] - max) - total.ln();
        }
        let value = Tensor::scalar(loss / s[0] as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            value,
            rg,
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), Tensor::scalar(v), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let v = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Op::Mean(a), Tensor::scalar(v), rg)
    }

    /// Places an `[O, C]` matrix at the centre tap of an `[O, C, kh, kw]` kernel.
    pub fn embed_center(&mut self, w: NodeId, kh: usize, kw: usize) -> Result<NodeId> {
        let s = self.shape(w).to_vec();
        if s.len() != 2 || kh.is_multiple_of(2) || kw.is_multiple_of(2) {
            return Err(Error::shape(
                self.describe("embed_center"),
                format!("{s:?} into odd kernel {kh}x{kw}"),
            ));
        }
        let value = Tensor::new(
            &[s[0], s[1], kh, kw],
            embed_center_data(self.value(w).data(), kh, kw),
        )?;
        let rg = self.rg(&[w]);
        Ok(self.push(Op::EmbedCenter { w, kh, kw }, value, rg))
    }

    /// Reverse sweep from a scalar `loss`. Replaces any previous gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::BackwardBeforeForward);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_seeded(loss, vec![1.0])
    }

    /// Reverse sweep seeded with an arbitrary upstream gradient for `root`.
    pub fn backward_seeded(&mut self, root: NodeId, seed: Vec<f64>) -> Result<()> {
        if self.nodes.is_empty() || root.0 >= self.nodes.len() {
            return Err(Error::BackwardBeforeForward);
        }
        if seed.len() != self.value(root).numel() {
            return Err(Error::shape("backward seed", "length differs from root"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                for (input, contrib) in self.vjp(i, &g) {
                    if !self.nodes[input.0].requires_grad {
                        continue;
                    }
                    match &mut grads[input.0] {
                        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                        slot => *slot = Some(contrib),
                    }
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for each differentiable input.
    fn vjp(&self, i: usize, g: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
        self.vjp_where(i, g, &|id: NodeId| self.nodes[id.0].requires_grad)
    }

    /// Vector-Jacobian products of node `i` for the inputs selected by `need`.
    pub(crate) fn vjp_where(&self, i: usize, g: &[f64], need: &dyn Fn(NodeId) -> bool) -> Vec<(NodeId, Vec<f64>)> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut out = vec![];
                if need(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.value(*b).data(), true, 0.0, &mut ga);
                    out.push((*a, ga));
                }
                if need(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, g, false, 0.0, &mut gb);
                    out.push((*b, gb));
                }
                out
            }
            Op::Linear { x, w } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (n, inp, o) = (sx[0], sx[1], sw[0]);
                let mut out = vec![];
                if need(*x) {
                    let mut gx = vec![0.0; n * inp];
                    gemm(n, o, inp, g, false, self.value(*w).data(), false, 0.0, &mut gx);
                    out.push((*x, gx));
                }
                if need(*w) {
                    let mut gw = vec![0.0; o * inp];
                    gemm(o, n, inp, g, true, self.value(*x).data(), false, 0.0, &mut gw);
                    out.push((*w, gw));
                }
                out
            }
            Op::Conv2d { x, w, geom, cols } => {
                let batch = self.shape(*x)[0];
                let oc = self.shape(*w)[0];
                let (p, l) = (geom.patch_len(), geom.out_len());
                let img = geom.channels * geom.height * geom.width;
                let mut out = vec![];
                if need(*w) {
                    let mut gw = vec![0.0; oc * p];
                    for n in 0..batch {
                        gemm(
                            oc,
                            l,
                            p,
                            &g[n * oc * l..(n + 1) * oc * l],
                            false,
                            &cols[n * p * l..(n + 1) * p * l],
                            true,
                            1.0,
                            &mut gw,
                        );
                    }
                    out.push((*w, gw));
                }
                if need(*x) {
                    let mut gx = vec![0.0; batch * img];
                    let mut gcols = vec![0.0; p * l];
                    let wd = self.value(*w).data();
                    for n in 0..batch {
                        gemm(p, oc, l, wd, true, &g[n * oc * l..(n + 1) * oc * l], false, 0.0, &mut gcols);
                        col2im(geom, &gcols, &mut gx[n * img..(n + 1) * img]);
                    }
                    out.push((*x, gx));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    (*a, zip_map(g, vb, |x, y| x * y)),
                    (*b, zip_map(g, va, |x, y| x * y)),
                ]
            }
            Op::Scale(a, f) => vec![(*a, g.iter().map(|v| v * f).collect())],
            Op::AddBias { x, b } => {
                let c = self.shape(*b)[0];
                let inner: usize = self.shape(*x)[2..].iter().product();
                let mut gb = vec![0.0; c];
                for (idx, v) in g.iter().enumerate() {
                    gb[(idx / inner) % c] += v;
                }
                vec![(*x, g.to_vec()), (*b, gb)]
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                vec![(*a, zip_map(g, va, |gi, x| if x > 0.0 { gi } else { 0.0 }))]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
                ..
            } => {
                let sx = self.shape(*x);
                let (n, c, inner) = (sx[0], sx[1], sx[2..].iter().product::<usize>());
                let gd = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (idx, gi) in g.iter().enumerate() {
                    let ch = (idx / inner) % c;
                    dgamma[ch] += gi * xhat[idx];
                    dbeta[ch] += gi;
                }
                let dx: Vec<f64> = if *batch_stats {
                    let m = (n * inner) as f64;
                    g.iter()
                        .enumerate()
                        .map(|(idx, gi)| {
                            let ch = (idx / inner) % c;
                            gd[ch] * inv_std[ch] / m
                                * (m * gi - dbeta[ch] - xhat[idx] * dgamma[ch])
                        })
                        .collect()
                } else {
                    g.iter()
                        .enumerate()
                        .map(|(idx, gi)| {
                            let ch = (idx / inner) % c;
                            gi * gd[ch] * inv_std[ch]
                        })
                        .collect()
                };
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::GlobalAvgPool(a) => {
                let s = self.shape(*a);
                let inner = s[2] * s[3];
                let mut ga = vec![0.0; self.value(*a).numel()];
                for (idx, v) in ga.iter_mut().enumerate() {
                    *v = g[idx / inner] / inner as f64;
                }
                vec![(*a, ga)]
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / labels.len() as f64;
                let mut gl = probs.clone();
                for (row, &label) in labels.iter().enumerate() {
                    gl[row * k + label] -= 1.0;
                }
                gl.iter_mut().for_each(|v| *v *= scale);
                vec![(*logits, gl)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).numel()])],
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::EmbedCenter { w, kh, kw } => {
                let taps = kh * kw;
                let centre = (kh / 2) * kw + kw / 2;
                let gw = g.chunks(taps).map(|t| t[centre]).collect();
                vec![(*w, gw)]
            }
        }
    }

    /// Gradients of every parameter leaf, summed per key.
    pub fn param_grads(&self) -> BTreeMap<usize, Vec<f64>> {
        let mut out: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(key) = node.op {
                let g = self
                    .grads
                    .get(i)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                match out.get_mut(&key) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        out.insert(key, g);
                    }
                }
            }
        }
        out
    }

    pub(crate) fn scope_of(&self, id: NodeId) -> &str {
        &self.nodes[id.0].scope
    }
}

pub(crate) fn embed_center_data(w: &[f64], kh: usize, kw: usize) -> Vec<f64> {
    let taps = kh * kw;
    let centre = (kh / 2) * kw + kw / 2;
    let mut out = vec![0.0; w.len() * taps];
    for (i, v) in w.iter().enumerate() {
        out[i * taps + centre] = *v;
    }
    out
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

/// Copies tape gradients into each tensor's grad slot; parameters the loss
/// never reached (or that were never recorded) get exact zeros.
pub fn fill_grads<'a>(tape: &Tape, params: impl IntoIterator<Item = (usize, &'a mut Tensor)>) {
    let grads = tape.param_grads();
    for (key, tensor) in params {
        let g = grads
            .get(&key)
            .filter(|g| g.len() == tensor.numel())
            .cloned()
            .unwrap_or_else(|| vec![0.0; tensor.numel()]);
        tensor.set_grad(g).expect("length checked");
    }
}
