use std::sync::Arc;

use crate::adapter::{FactorKeys, LoraLayer, SploraLayer, UP_INIT_RANGE};
use crate::compute::rng::{self, Rng};
use crate::compute::{fill_grads, NodeId, NormStats, OptimizerState, Tape, Tensor};
use crate::error::{Error, Result};
use crate::mask::ChannelMask;

use super::count::layer_rank;
use super::manifest::{ArchitectureManifest, LayerKind, Source, Topology};
use super::masks::ChannelMaskSet;
use super::Mode;

/// Running-statistics momentum for batch-norm layers.
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub enum WeightParam {
    /// Trainable dense weight (fine-tuning); copied on first write if shared.
    Dense(Arc<Tensor>),
    /// Frozen source weight of a non-adaptable layer in adapter mode.
    Frozen(Arc<Tensor>),
    Splora(SploraLayer),
    Lora(LoraLayer),
}

#[derive(Debug, Clone)]
pub struct NormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum LayerParams {
    Weight(WeightParam),
    Head { weight: Tensor, bias: Tensor },
    Norm(NormParams),
    Stateless,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Batch statistics in normalisation layers.
    Train,
    /// Running statistics in normalisation layers.
    Eval,
}

/// Node ids from one recorded forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: NodeId,
    /// Output node of every layer.
    pub outputs: Vec<NodeId>,
    /// Effective (fused, masked) weight node of every linear/conv layer.
    pub weights: Vec<Option<NodeId>>,
}

/// A trainable tensor with its tape key and stable name.
pub struct ParamMut<'a> {
    pub key: usize,
    pub name: String,
    pub tensor: &'a mut Tensor,
}

#[derive(Debug, Clone)]
pub struct Network {
    manifest: ArchitectureManifest,
    topo: Topology,
    mode: Mode,
    layers: Vec<LayerParams>,
    masks: ChannelMaskSet,
}

fn weight_shape(kind: LayerKind, out: usize, inp: usize, kernel: Option<[usize; 2]>) -> Vec<usize> {
    match (kind, kernel) {
        (LayerKind::Conv2d, Some([kh, kw])) => vec![out, inp, kh, kw],
        _ => vec![out, inp],
    }
}

/// Stable tape key for slot `slot` of layer `layer`.
fn key(layer: usize, slot: usize) -> usize {
    layer * 4 + slot
}

impl Network {
    /// Fresh fine-tuning network with He-style fan-in initialisation.
    pub fn build(manifest: &ArchitectureManifest, seed: u64) -> Result<Self> {
        let topo = manifest.validate()?;
        let mut rng = rng::stream(seed, "build");
        let layers = manifest
            .layers
            .iter()
            .map(|l| {
                let he = |rng: &mut Rng, shape: Vec<usize>| {
                    let fan_in: usize = shape[1..].iter().product();
                    let std = (2.0 / fan_in as f64).sqrt();
                    let n = shape.iter().product();
                    Tensor::new(&shape, (0..n).map(|_| rng::normal(rng, std)).collect())
                };
                Ok(match l.kind {
                    LayerKind::Linear | LayerKind::Conv2d => LayerParams::Weight(WeightParam::Dense(Arc::new(he(
                        &mut rng,
                        weight_shape(l.kind, l.out_channels, l.in_channels, l.kernel),
                    )?))),
                    LayerKind::Head => LayerParams::Head {
                        weight: he(&mut rng, vec![l.out_channels, l.in_channels])?,
                        bias: Tensor::zeros(&[l.out_channels]),
                    },
                    LayerKind::Batchnorm => LayerParams::Norm(NormParams {
                        gamma: Tensor::full(&[l.out_channels], 1.0),
                        beta: Tensor::zeros(&[l.out_channels]),
                        running_mean: vec![0.0; l.out_channels],
                        running_var: vec![1.0; l.out_channels],
                    }),
                    _ => LayerParams::Stateless,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let masks = ChannelMaskSet::full(manifest, &topo);
        Ok(Self {
            manifest: manifest.clone(),
            topo,
            mode: Mode::Finetune,
            layers,
            masks,
        })
    }

    /// Assembles a network from explicit parts (used when loading task deltas).
    pub fn from_parts(manifest: &ArchitectureManifest, mode: Mode, layers: Vec<LayerParams>, masks: ChannelMaskSet) -> Result<Self> {
        let topo = manifest.validate()?;
        if layers.len() != manifest.layers.len() {
            return Err(Error::Malformed(format!(
                "{} layer records for {} layers",
                layers.len(),
                manifest.layers.len()
            )));
        }
        ChannelMaskSet::from_masks(manifest, &topo, masks.groups().to_vec())?;
        let mut net = Self {
            manifest: manifest.clone(),
            topo,
            mode,
            layers,
            masks,
        };
        net.enforce_masks();
        Ok(net)
    }

    /// A new network in `mode` whose frozen sources are this network's fused
    /// weights. Masks, normalisation, and head carry over.
    pub fn adapt(&self, mode: Mode, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, "adapter");
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, lp) in self.layers.iter().enumerate() {
            let spec = &self.manifest.layers[i];
            layers.push(match lp {
                LayerParams::Weight(w) => {
                    let source = self.shared_effective_weight(w, i);
                    LayerParams::Weight(match mode {
                        Mode::Finetune => WeightParam::Dense(source),
                        _ if !spec.adaptable => WeightParam::Frozen(source),
                        Mode::Splora { rank } => {
                            let r = layer_rank(rank, spec.out_channels, spec.in_channels);
                            let mut layer = SploraLayer::init(source, r, UP_INIT_RANGE, &mut rng)?;
                            layer.set_masks(self.row_mask(i), self.col_mask(i))?;
                            WeightParam::Splora(layer)
                        }
                        Mode::Lora { rank } => {
                            let r = layer_rank(rank, spec.out_channels, spec.in_channels);
                            WeightParam::Lora(LoraLayer::init(source, r, UP_INIT_RANGE, &mut rng)?)
                        }
                    })
                }
                other => other.clone(),
            });
        }
        let mut net = Self {
            manifest: self.manifest.clone(),
            topo: self.topo.clone(),
            mode,
            layers,
            masks: self.masks.clone(),
        };
        net.enforce_masks();
        Ok(net)
    }

    /// Fine-tuning-mode copy holding fused, masked weights.
    pub fn fused(&self) -> Self {
        self.adapt(Mode::Finetune, 0).expect("fusion needs no rank")
    }

    pub fn manifest(&self) -> &ArchitectureManifest {
        &self.manifest
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &LayerParams {
        &self.layers[i]
    }

    pub fn masks(&self) -> &ChannelMaskSet {
        &self.masks
    }

    pub fn row_mask(&self, i: usize) -> ChannelMask {
        self.masks.row_mask(&self.manifest, &self.topo, i)
    }

    pub fn col_mask(&self, i: usize) -> ChannelMask {
        self.masks.col_mask(&self.manifest, &self.topo, i)
    }

    pub fn set_masks(&mut self, masks: ChannelMaskSet) -> Result<()> {
        ChannelMaskSet::from_masks(&self.manifest, &self.topo, masks.groups().to_vec())?;
        self.masks = masks;
        for i in 0..self.layers.len() {
            let (row, col) = (self.row_mask(i), self.col_mask(i));
            if let LayerParams::Weight(WeightParam::Splora(s)) = &mut self.layers[i] {
                s.set_masks(row, col)?;
            }
        }
        self.enforce_masks();
        Ok(())
    }

    /// Re-zeroes every masked trainable entry (after an optimiser step).
    pub fn enforce_masks(&mut self) {
        for i in 0..self.layers.len() {
            let (row, col) = (self.row_mask(i), self.col_mask(i));
            match &mut self.layers[i] {
                LayerParams::Weight(WeightParam::Dense(w)) => {
                    if row.count() < row.len() || col.count() < col.len() {
                        zero_masked(Arc::make_mut(w), &row, &col)
                    }
                }
                LayerParams::Weight(WeightParam::Splora(s)) => s.enforce_masks(),
                LayerParams::Head { weight, .. } => zero_masked(weight, &row, &col),
                _ => {}
            }
        }
    }

    /// Frozen source weight of layer `i`, if it is an adapter or frozen layer.
    pub fn source(&self, i: usize) -> Option<&Arc<Tensor>> {
        match &self.layers[i] {
            LayerParams::Weight(WeightParam::Frozen(s)) => Some(s),
            LayerParams::Weight(WeightParam::Splora(s)) => Some(s.shared_source()),
            LayerParams::Weight(WeightParam::Lora(l)) => Some(l.shared_source()),
            _ => None,
        }
    }

    /// Fused, masked weight of layer `i`, sharing the stored allocation when
    /// masking and adapters leave it unchanged.
    pub fn shared_weight(&self, i: usize) -> Option<Arc<Tensor>> {
        match &self.layers[i] {
            LayerParams::Weight(w) => Some(self.shared_effective_weight(w, i)),
            _ => None,
        }
    }

    fn shared_effective_weight(&self, w: &WeightParam, i: usize) -> Arc<Tensor> {
        let (row, col) = (self.row_mask(i), self.col_mask(i));
        let full = row.count() == row.len() && col.count() == col.len();
        match w {
            WeightParam::Dense(t) | WeightParam::Frozen(t) if full => Arc::clone(t),
            _ => Arc::new(self.effective_weight_of(w, i)),
        }
    }

    fn effective_weight_of(&self, w: &WeightParam, i: usize) -> Tensor {
        let (row, col) = (self.row_mask(i), self.col_mask(i));
        match w {
            WeightParam::Dense(t) => masked(t, &row, &col),
            WeightParam::Frozen(t) => masked(t, &row, &col),
            WeightParam::Splora(s) => s.effective_weight(),
            WeightParam::Lora(l) => masked(&l.effective_weight(), &row, &col),
        }
    }

    /// Fused, masked weight of linear/conv layer `i`.
    pub fn effective_weight(&self, i: usize) -> Option<Tensor> {
        match &self.layers[i] {
            LayerParams::Weight(w) => Some(self.effective_weight_of(w, i)),
            _ => None,
        }
    }

    /// Records a forward pass. `track_weights` makes even frozen effective
    /// weights differentiable, for gradient-based scoring.
    pub fn forward_with(&self, tape: &mut Tape, x: Tensor, phase: Phase, track_weights: bool) -> Result<Forward> {
        let mut expect = vec![x.shape()[0]];
        expect.extend_from_slice(&self.manifest.input_shape);
        if x.shape() != expect.as_slice() {
            return Err(Error::shape(
                "network input",
                format!("expected {expect:?}, got {:?}", x.shape()),
            ));
        }
        let input = tape.input(x, false);
        let n = self.layers.len();
        let mut outputs: Vec<NodeId> = Vec::with_capacity(n);
        let mut weights = vec![None; n];
        for (i, spec) in self.manifest.layers.iter().enumerate() {
            tape.set_scope(spec.id.as_str());
            let src = |s: &Source| match s {
                Source::Input => input,
                Source::Layer(j) => outputs[*j],
            };
            let x = src(&self.topo.inputs[i][0]);
            let out = match (&self.layers[i], spec.kind) {
                (LayerParams::Weight(w), kind) => {
                    let wn = self.record_weight(tape, w, i, track_weights)?;
                    weights[i] = Some(wn);
                    if kind == LayerKind::Conv2d {
                        tape.conv2d(x, wn, spec.stride, spec.padding)?
                    } else {
                        tape.linear(x, wn)?
                    }
                }
                (LayerParams::Head { weight, bias }, _) => {
                    let mut wn = tape.param(key(i, 0), weight);
                    let col = self.col_mask(i);
                    if col.count() < col.len() {
                        let rows = weight.shape()[0];
                        let mask = Tensor::new(weight.shape(), (0..rows).flat_map(|_| col.to_values()).collect())?;
                        let mask = tape.input(mask, false);
                        wn = tape.mul(wn, mask)?;
                    }
                    let b = tape.param(key(i, 2), bias);
                    let y = tape.linear(x, wn)?;
                    tape.add_bias(y, b)?
                }
                (LayerParams::Norm(p), _) => {
                    let gamma = tape.param(key(i, 2), &p.gamma);
                    let beta = tape.param(key(i, 3), &p.beta);
                    let stats = match phase {
                        Phase::Train => NormStats::Batch,
                        Phase::Eval => NormStats::Running {
                            mean: p.running_mean.clone(),
                            var: p.running_var.clone(),
                        },
                    };
                    tape.batch_norm(x, gamma, beta, &stats)?
                }
                (LayerParams::Stateless, LayerKind::Relu) => tape.relu(x),
                (LayerParams::Stateless, LayerKind::Pool) => tape.global_avg_pool(x)?,
                (LayerParams::Stateless, LayerKind::Add) => {
                    let mut acc = x;
                    for s in &self.topo.inputs[i][1..] {
                        acc = tape.add(acc, src(s))?;
                    }
                    acc
                }
                (_, kind) => {
                    return Err(Error::Malformed(format!(
                        "layer `{}` ({kind:?}) holds parameters of the wrong kind",
                        spec.id
                    )))
                }
            };
            outputs.push(out);
        }
        tape.set_scope("");
        Ok(Forward {
            logits: outputs[n - 1],
            outputs,
            weights,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Tensor, phase: Phase) -> Result<Forward> {
        self.forward_with(tape, x, phase, false)
    }

    fn record_weight(&self, tape: &mut Tape, w: &WeightParam, i: usize, track: bool) -> Result<NodeId> {
        let keys = FactorKeys {
            down: key(i, 0),
            up: key(i, 1),
        };
        let (row, col) = (self.row_mask(i), self.col_mask(i));
        let node = match w {
            WeightParam::Splora(s) => return s.record(tape, keys),
            WeightParam::Dense(t) => tape.param(key(i, 0), t),
            WeightParam::Frozen(t) => tape.input(t.as_ref().clone(), track),
            WeightParam::Lora(l) => l.record(tape, keys)?,
        };
        if row.count() == row.len() && col.count() == col.len() {
            return Ok(node);
        }
        let shape = tape.shape(node).to_vec();
        let ones = Tensor::full(&shape, 1.0);
        let mask = tape.input(masked(&ones, &row, &col), false);
        tape.mul(node, mask)
    }

    /// Blends batch statistics recorded on `tape` into the running estimates.
    pub fn update_running_stats(&mut self, tape: &Tape, fwd: &Forward) {
        for (i, lp) in self.layers.iter_mut().enumerate() {
            let LayerParams::Norm(p) = lp else { continue };
            let node = fwd.outputs[i];
            let Some((mean, var)) = tape.batch_stats(node) else {
                continue;
            };
            let shape = tape.shape(node);
            let count = shape[0] * shape[2..].iter().product::<usize>();
            let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
            for c in 0..mean.len() {
                p.running_mean[c] = (1.0 - NORM_MOMENTUM) * p.running_mean[c] + NORM_MOMENTUM * mean[c];
                p.running_var[c] = (1.0 - NORM_MOMENTUM) * p.running_var[c] + NORM_MOMENTUM * var[c] * unbias;
            }
        }
    }

    /// Every trainable tensor in this mode, in layer order.
    pub fn trainable_mut(&mut self) -> Vec<ParamMut<'_>> {
        fn p<'a>(layer: usize, slot: usize, id: &str, suffix: &str, tensor: &'a mut Tensor) -> ParamMut<'a> {
            ParamMut {
                key: key(layer, slot),
                name: format!("{id}.{suffix}"),
                tensor,
            }
        }
        let mut out = vec![];
        for ((i, lp), spec) in self.layers.iter_mut().enumerate().zip(&self.manifest.layers) {
            let id = spec.id.as_str();
            match lp {
                LayerParams::Weight(WeightParam::Dense(w)) => out.push(p(i, 0, id, "weight", Arc::make_mut(w))),
                LayerParams::Weight(WeightParam::Splora(s)) => {
                    let (d, u) = s.factors_mut();
                    out.push(p(i, 0, id, "down", d));
                    out.push(p(i, 1, id, "up", u));
                }
                LayerParams::Weight(WeightParam::Lora(l)) => {
                    out.push(p(i, 0, id, "down", &mut l.down));
                    out.push(p(i, 1, id, "up", &mut l.up));
                }
                LayerParams::Head { weight, bias } => {
                    out.push(p(i, 0, id, "weight", weight));
                    out.push(p(i, 2, id, "bias", bias));
                }
                LayerParams::Norm(n) => {
                    out.push(p(i, 2, id, "gamma", &mut n.gamma));
                    out.push(p(i, 3, id, "beta", &mut n.beta));
                }
                _ => {}
            }
        }
        out
    }

    /// One optimiser update over every trainable tensor, then mask enforcement.
    /// Gradients must already be collected.
    pub fn sgd_step(&mut self, opt: &mut OptimizerState) -> Result<()> {
        let mut params = self.trainable_mut();
        opt.step(params.iter_mut().map(|p| (p.name.as_str(), &mut *p.tensor)))?;
        self.enforce_masks();
        Ok(())
    }

    /// Names and sizes of trainable tensors.
    pub fn trainable_summary(&mut self) -> Vec<(String, usize)> {
        self.trainable_mut()
            .into_iter()
            .map(|p| (p.name, p.tensor.numel()))
            .collect()
    }

    /// Copies gradients from `tape` into every trainable tensor.
    pub fn collect_grads(&mut self, tape: &Tape) {
        fill_grads(tape, self.trainable_mut().into_iter().map(|p| (p.key, p.tensor)));
    }

    /// Weight entries (linear/conv/head) still alive.
    pub fn surviving_weights(&self) -> usize {
        self.masks.surviving_weights(&self.manifest, &self.topo)
    }

    pub fn weight_density(&self) -> f64 {
        self.masks.weight_density(&self.manifest, &self.topo)
    }
}

fn masked(w: &Tensor, row: &ChannelMask, col: &ChannelMask) -> Tensor {
    let mut out = w.clone();
    zero_masked(&mut out, row, col);
    out
}

fn zero_masked(w: &mut Tensor, row: &ChannelMask, col: &ChannelMask) {
    let s = w.shape().to_vec();
    let (m, t) = (s[1], s[2..].iter().product::<usize>());
    for (ij, chunk) in w.data_mut().chunks_mut(t).enumerate() {
        if !row.get(ij / m) || !col.get(ij % m) {
            chunk.fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::zoo;

    fn batch(m: &ArchitectureManifest, n: usize, seed: u64) -> Tensor {
        let mut shape = vec![n];
        shape.extend_from_slice(&m.input_shape);
        let len = shape.iter().product();
        let mut rng = rng::stream(seed, "test-batch");
        Tensor::new(&shape, (0..len).map(|_| rng::normal(&mut rng, 1.0)).collect()).unwrap()
    }

    fn logits(net: &Network, x: Tensor, phase: Phase) -> Tensor {
        let mut tape = Tape::new();
        let f = net.forward(&mut tape, x, phase).unwrap();
        tape.value(f.logits).clone()
    }

    #[test]
    fn build_is_deterministic() {
        let m = zoo::desk_cnn();
        let a = Network::build(&m, 7).unwrap();
        let b = Network::build(&m, 7).unwrap();
        let x = batch(&m, 2, 1);
        assert_eq!(logits(&a, x.clone(), Phase::Eval).data(), logits(&b, x, Phase::Eval).data());
    }

    #[test]
    fn mlp_has_expected_tensors() {
        let m = zoo::mlp(&[4, 8], 2);
        let mut net = Network::build(&m, 0).unwrap();
        let summary = net.trainable_summary();
        assert_eq!(
            summary,
            vec![
                ("fc1.weight".to_string(), 32),
                ("head.weight".to_string(), 16),
                ("head.bias".to_string(), 2)
            ]
        );
    }

    #[test]
    fn splora_adaptation_starts_near_base_and_shares_sources() {
        let m = zoo::desk_cnn();
        let base = Network::build(&m, 3).unwrap();
        let ad = base.adapt(Mode::Splora { rank: 4 }, 9).unwrap();
        let ad2 = base.adapt(Mode::Splora { rank: 4 }, 10).unwrap();
        let i = m.layer_index("b2.conv1").unwrap();
        assert!(Arc::ptr_eq(ad.source(i).unwrap(), ad2.source(i).unwrap()));
        let x = batch(&m, 3, 2);
        let a = logits(&base, x.clone(), Phase::Eval);
        let b = logits(&ad, x, Phase::Eval);
        assert!(a.max_abs_diff(&b) < 1e-2 * a.l2_norm().max(1.0), "{} vs {}", a.max_abs_diff(&b), a.l2_norm());
    }

    #[test]
    fn frozen_sources_survive_training_steps() {
        let m = zoo::mlp(&[4, 8], 2);
        let base = Network::build(&m, 1).unwrap();
        let mut net = base.adapt(Mode::Splora { rank: 2 }, 1).unwrap();
        let before = net.source(0).unwrap().as_ref().clone();
        let mut opt = crate::compute::OptimizerState::new(0.1, 0.9, 5e-4).unwrap();
        for s in 0..3 {
            let mut tape = Tape::new();
            let f = net.forward(&mut tape, batch(&m, 4, s), Phase::Train).unwrap();
            let loss = tape.softmax_cross_entropy(f.logits, &[0, 1, 0, 1]).unwrap();
            tape.backward(loss).unwrap();
            net.collect_grads(&tape);
            net.sgd_step(&mut opt).unwrap();
        }
        assert_eq!(net.source(0).unwrap().data(), before.data());
    }

    #[test]
    fn masked_channels_do_not_reach_logits() {
        let m = zoo::desk_cnn();
        let mut net = Network::build(&m, 5).unwrap().adapt(Mode::Splora { rank: 4 }, 5).unwrap();
        let mut masks = net.masks().clone();
        let g = net.topology().out_group[m.layer_index("b3.conv2").unwrap()].unwrap();
        masks.prune(g, 0);
        net.set_masks(masks).unwrap();
        let i = m.layer_index("b4.conv1").unwrap();
        let w = net.effective_weight(i).unwrap();
        let t = 9;
        let m_in = w.shape()[1];
        for o in 0..w.shape()[0] {
            assert!(w.data()[(o * m_in) * t..(o * m_in + 1) * t].iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let m = zoo::desk_cnn();
        let mut net = Network::build(&m, 2).unwrap();
        let mut tape = Tape::new();
        let f = net.forward(&mut tape, batch(&m, 4, 3), Phase::Train).unwrap();
        net.update_running_stats(&tape, &f);
        let LayerParams::Norm(p) = net.layer(1) else { panic!() };
        assert!(p.running_mean.iter().any(|v| *v != 0.0));
        assert!(p.running_var.iter().all(|v| *v > 0.0));
    }
}
