//! Channel saliency on fused weights.
//!
//! Each criterion yields one nonnegative score per output channel of every
//! prunable layer. Optional per-layer normalisation is applied to each member
//! layer, and members of a coupled group are summed channel-wise, giving one
//! score per channel group.

use std::fmt;
use std::str::FromStr;

use crate::compute::{Tape, Tensor};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::network::{Network, Phase};

use super::lrp::{lrp_relevance, DEFAULT_EPSILON};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CriterionKind {
    /// L_p norm of a channel's fused weights.
    WeightNorm { p: f64 },
    /// Mean absolute fused weight of a channel.
    Magnitude,
    /// Mean absolute loss gradient on a channel's fused weights.
    Gradient,
    /// |batch mean of activation × activation gradient| per channel.
    Taylor,
    /// Epsilon-rule relevance reaching a channel.
    Lrp { epsilon: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    None,
    L2PerLayer,
    /// Scores of a layer divided by their sum.
    SumPerLayer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Criterion {
    pub kind: CriterionKind,
    pub normalization: Normalization,
}

impl Criterion {
    /// Default settings: weight p=1, Taylor L2-normalised, LRP sum-normalised.
    pub fn of(kind: CriterionKind) -> Self {
        let normalization = match kind {
            CriterionKind::Taylor => Normalization::L2PerLayer,
            CriterionKind::Lrp { .. } => Normalization::SumPerLayer,
            _ => Normalization::None,
        };
        Self { kind, normalization }
    }

    pub fn weight() -> Self {
        Self::of(CriterionKind::WeightNorm { p: 1.0 })
    }

    pub fn magnitude() -> Self {
        Self::of(CriterionKind::Magnitude)
    }

    pub fn gradient() -> Self {
        Self::of(CriterionKind::Gradient)
    }

    pub fn taylor() -> Self {
        Self::of(CriterionKind::Taylor)
    }

    pub fn lrp() -> Self {
        Self::of(CriterionKind::Lrp {
            epsilon: DEFAULT_EPSILON,
        })
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            CriterionKind::WeightNorm { .. } => "weight",
            CriterionKind::Magnitude => "magnitude",
            CriterionKind::Gradient => "gradient",
            CriterionKind::Taylor => "taylor",
            CriterionKind::Lrp { .. } => "lrp",
        }
    }

    /// Identifier stored in task-delta headers.
    pub fn id(&self) -> u8 {
        match self.kind {
            CriterionKind::WeightNorm { .. } => 0,
            CriterionKind::Magnitude => 1,
            CriterionKind::Gradient => 2,
            CriterionKind::Taylor => 3,
            CriterionKind::Lrp { .. } => 4,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Some(match id {
            0 => Self::weight(),
            1 => Self::magnitude(),
            2 => Self::gradient(),
            3 => Self::taylor(),
            4 => Self::lrp(),
            _ => return None,
        })
    }

    pub fn needs_data(&self) -> bool {
        matches!(
            self.kind,
            CriterionKind::Gradient | CriterionKind::Taylor | CriterionKind::Lrp { .. }
        )
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "weight" => Self::weight(),
            "magnitude" => Self::magnitude(),
            "gradient" => Self::gradient(),
            "taylor" => Self::taylor(),
            "lrp" => Self::lrp(),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown criterion `{other}` (expected weight, magnitude, gradient, taylor, or lrp)"
                )))
            }
        })
    }
}

/// One score per channel of every prunable group, indexed `[group][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelScoreTable {
    pub scores: Vec<Vec<f64>>,
}

/// L_p norm of each output row of a weight (all input channels and taps).
pub fn row_norms(w: &Tensor, p: f64) -> Vec<f64> {
    let rows = w.shape()[0];
    let per = w.numel() / rows;
    w.data()
        .chunks(per)
        .map(|row| row.iter().map(|v| v.abs().powf(p)).sum::<f64>().powf(1.0 / p))
        .collect()
}

/// Mean absolute value of each output row.
pub fn row_mean_abs(values: &[f64], rows: usize) -> Vec<f64> {
    let per = values.len() / rows;
    values
        .chunks(per)
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>() / per as f64)
        .collect()
}

/// Per-sample, per-channel spatial mean of `a·g` for activations shaped
/// `[N, C, ...]`, summed over the batch (not yet averaged).
pub fn taylor_sums(a: &[f64], g: &[f64], shape: &[usize]) -> Vec<f64> {
    let (c, inner) = (shape[1], shape[2..].iter().product::<usize>());
    let mut out = vec![0.0; c];
    for (idx, (a, g)) in a.iter().zip(g).enumerate() {
        out[(idx / inner) % c] += a * g / inner as f64;
    }
    out
}

pub fn normalize(scores: &mut [f64], how: Normalization) {
    let denom = match how {
        Normalization::None => return,
        Normalization::L2PerLayer => scores.iter().map(|v| v * v).sum::<f64>().sqrt(),
        Normalization::SumPerLayer => scores.iter().sum::<f64>(),
    };
    if denom > 0.0 && denom.is_finite() {
        scores.iter_mut().for_each(|v| *v /= denom);
    }
}

/// Scores every prunable channel group of `net`. Data-driven criteria use
/// `batches` (normally a fixed, seeded scoring subset). The network is not
/// modified.
pub fn score_channels(net: &Network, criterion: &Criterion, batches: &[Batch]) -> Result<ChannelScoreTable> {
    let manifest = net.manifest();
    let topo = net.topology();
    if criterion.needs_data() && batches.iter().all(|b| b.labels.is_empty()) {
        return Err(Error::EmptyScoringBatch(criterion.name()));
    }
    let n_layers = manifest.layers.len();
    let prunable: Vec<usize> = topo.groups.iter().flatten().copied().collect();
    let mut raw: Vec<Option<Vec<f64>>> = vec![None; n_layers];

    match criterion.kind {
        CriterionKind::WeightNorm { p } => {
            for &i in &prunable {
                raw[i] = Some(row_norms(&net.effective_weight(i).expect("weight layer"), p));
            }
        }
        CriterionKind::Magnitude => {
            for &i in &prunable {
                let w = net.effective_weight(i).expect("weight layer");
                raw[i] = Some(row_mean_abs(w.data(), w.shape()[0]));
            }
        }
        CriterionKind::Gradient | CriterionKind::Taylor => {
            let total: usize = batches.iter().map(|b| b.labels.len()).sum();
            for &i in &prunable {
                raw[i] = Some(vec![0.0; manifest.layers[i].out_channels]);
            }
            for batch in batches.iter().filter(|b| !b.labels.is_empty()) {
                let mut tape = Tape::new();
                let fwd = net.forward_with(&mut tape, batch.x.clone(), Phase::Train, true)?;
                let loss = tape.softmax_cross_entropy(fwd.logits, &batch.labels)?;
                tape.backward(loss)?;
                let share = batch.labels.len() as f64 / total as f64;
                for &i in &prunable {
                    let acc = raw[i].as_mut().expect("initialised");
                    if criterion.kind == CriterionKind::Gradient {
                        let node = fwd.weights[i].expect("weight layer");
                        let zeros;
                        let g = match tape.grad(node) {
                            Some(g) => g,
                            None => {
                                zeros = vec![0.0; tape.value(node).numel()];
                                &zeros
                            }
                        };
                        let rows = acc.len();
                        for (a, v) in acc.iter_mut().zip(row_mean_abs(g, rows)) {
                            *a += share * v;
                        }
                    } else {
                        let node = fwd.outputs[topo.norm_after[i].unwrap_or(i)];
                        let Some(g) = tape.grad(node) else { continue };
                        // The loss is a batch mean, so these sums are already batch averages.
                        let sums = taylor_sums(tape.value(node).data(), g, tape.shape(node));
                        for (a, v) in acc.iter_mut().zip(sums) {
                            *a += share * v;
                        }
                    }
                }
            }
            if criterion.kind == CriterionKind::Taylor {
                for v in raw.iter_mut().flatten() {
                    v.iter_mut().for_each(|s| *s = s.abs());
                }
            }
        }
        CriterionKind::Lrp { epsilon } => {
            let total: usize = batches.iter().map(|b| b.labels.len()).sum();
            for batch in batches.iter().filter(|b| !b.labels.is_empty()) {
                let rel = lrp_relevance(net, batch, epsilon)?;
                let share = batch.labels.len() as f64 / total as f64;
                for &i in &prunable {
                    let r = rel[i].as_ref().expect("weight layer");
                    let acc = raw[i].get_or_insert_with(|| vec![0.0; r.len()]);
                    acc.iter_mut().zip(r).for_each(|(a, v)| *a += share * v);
                }
            }
            for v in raw.iter_mut().flatten() {
                v.iter_mut().for_each(|s| *s = s.abs());
            }
        }
    }

    let masks = net.masks();
    let mut scores: Vec<Vec<f64>> = topo
        .groups
        .iter()
        .enumerate()
        .map(|(g, _)| vec![0.0; masks.group(g).len()])
        .collect();
    for (g, members) in topo.groups.iter().enumerate() {
        let mask = masks.group(g);
        for &i in members {
            let mut s = raw[i].take().expect("scored");
            for (c, v) in s.iter_mut().enumerate() {
                if !mask.get(c) || !v.is_finite() {
                    *v = 0.0;
                }
            }
            normalize(&mut s, criterion.normalization);
            scores[g].iter_mut().zip(&s).for_each(|(a, b)| *a += b);
        }
    }
    Ok(ChannelScoreTable { scores })
}
