//! Epsilon-rule relevance propagation over a recorded tape.
//!
//! Relevance moves only along the data path (nodes that depend on the
//! network input); weights, masks, and adapter factors are constants. For an
//! output `z` with relevance `R`, each data input `x` receives
//! `x ⊙ Jᵀ(R / (z + ε·sign z))`, where `J` is the op's Jacobian in `x`.
//! ReLU passes relevance through unchanged.

use crate::compute::tape::Op;
use crate::compute::{NodeId, Tape, Tensor};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::network::{LayerKind, Network, Phase};

pub const DEFAULT_EPSILON: f64 = 1e-6;

fn stabilise(z: f64, eps: f64) -> f64 {
    z + if z >= 0.0 { eps } else { -eps }
}

/// Relevance of every node on the data path from `input` to `root`, given
/// the relevance `r_root` assigned to `root`'s output.
pub fn propagate(tape: &Tape, input: NodeId, root: NodeId, r_root: Vec<f64>, epsilon: f64) -> Result<Vec<Option<Vec<f64>>>> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} must be positive")));
    }
    if r_root.len() != tape.value(root).numel() {
        return Err(Error::shape("relevance seed", "length differs from root"));
    }
    let n = root.index() + 1;
    let mut on_path = vec![false; n];
    on_path[input.index()] = true;
    for i in input.index() + 1..n {
        on_path[i] = tape.node(NodeId::from_index(i)).op.inputs().iter().any(|j| on_path[j.index()]);
    }
    let mut rel: Vec<Option<Vec<f64>>> = vec![None; n];
    rel[root.index()] = Some(r_root);
    for i in (input.index() + 1..n).rev() {
        let id = NodeId::from_index(i);
        let Some(r) = rel[i].clone() else { continue };
        if !on_path[i] {
            continue;
        }
        let node = tape.node(id);
        let unsupported = || Error::UnsupportedLrpLayer(format!("{} in `{}`", node.op.name(), tape.scope_of(id)));
        let contributions: Vec<(NodeId, Vec<f64>)> = match &node.op {
            Op::Relu(a) => vec![(*a, r)],
            Op::BatchNorm { batch_stats: true, .. } => return Err(unsupported()),
            Op::Linear { .. }
            | Op::Conv2d { .. }
            | Op::MatMul(..)
            | Op::Add(..)
            | Op::Mul(..)
            | Op::Scale(..)
            | Op::AddBias { .. }
            | Op::BatchNorm { .. }
            | Op::GlobalAvgPool(_) => {
                let z = node.value.data();
                let s: Vec<f64> = r.iter().zip(z).map(|(r, z)| r / stabilise(*z, epsilon)).collect();
                tape.vjp_where(i, &s, &|j| j.index() < n && on_path[j.index()])
                    .into_iter()
                    .filter(|(j, _)| on_path[j.index()])
                    .map(|(j, g)| {
                        let x = tape.value(j).data();
                        (j, g.iter().zip(x).map(|(g, x)| g * x).collect())
                    })
                    .collect()
            }
            _ => return Err(unsupported()),
        };
        for (j, c) in contributions {
            match &mut rel[j.index()] {
                Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                slot => *slot = Some(c),
            }
        }
    }
    Ok(rel)
}

/// Per-layer channel relevance for `batch`: relevance starts at each
/// sample's predicted-class logit, is summed over each weight layer's output
/// positions per channel, and averaged over the batch. Normalisation layers
/// use running statistics.
pub fn lrp_relevance(net: &Network, batch: &Batch, epsilon: f64) -> Result<Vec<Option<Vec<f64>>>> {
    let mut tape = Tape::new();
    let input_len = tape.len();
    let fwd = net.forward(&mut tape, batch.x.clone(), Phase::Eval)?;
    let input = NodeId::from_index(input_len);
    let logits = tape.value(fwd.logits);
    let k = logits.shape()[1];
    let mut seed = vec![0.0; logits.numel()];
    for (row, vals) in logits.data().chunks(k).enumerate() {
        let best = (0..k).max_by(|&a, &b| vals[a].total_cmp(&vals[b]).then(b.cmp(&a))).unwrap_or(0);
        seed[row * k + best] = vals[best];
    }
    let rel = propagate(&tape, input, fwd.logits, seed, epsilon)?;
    let manifest = net.manifest();
    let batch_n = batch.labels.len() as f64;
    Ok(manifest
        .layers
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            if !matches!(spec.kind, LayerKind::Linear | LayerKind::Conv2d) {
                return None;
            }
            let node = fwd.outputs[i];
            let shape = tape.shape(node);
            let (c, inner) = (shape[1], shape[2..].iter().product::<usize>());
            let mut out = vec![0.0; c];
            if let Some(r) = &rel[node.index()] {
                for (idx, v) in r.iter().enumerate() {
                    out[(idx / inner) % c] += v;
                }
            }
            Some(out.into_iter().map(|v| v / batch_n).collect())
        })
        .collect())
}

/// Convenience for tests and callers holding a bare tensor.
pub fn relevance_of_input(tape: &Tape, input: NodeId, root: NodeId, r_root: &Tensor, epsilon: f64) -> Result<Vec<f64>> {
    let rel = propagate(tape, input, root, r_root.data().to_vec(), epsilon)?;
    Ok(rel[input.index()].clone().unwrap_or_else(|| vec![0.0; tape.value(input).numel()]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::rng;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn identity_layer_passes_relevance() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[1, 2], vec![1.0, 1.0]), false);
        let w = tape.input(t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]), false);
        let y = tape.linear(x, w).unwrap();
        let r = relevance_of_input(&tape, x, y, &t(&[1, 2], vec![1.0, 1.0]), DEFAULT_EPSILON).unwrap();
        for v in r {
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn conserves_relevance_through_relu_net() {
        let mut g = rng::stream(3, "lrp");
        let mut draw = |n: usize| (0..n).map(|_| rng::normal(&mut g, 1.0)).collect::<Vec<_>>();
        let mut tape = Tape::new();
        let x = tape.input(t(&[1, 5], draw(5)), false);
        let w1 = tape.input(t(&[7, 5], draw(35)), false);
        let w2 = tape.input(t(&[3, 7], draw(21)), false);
        let h = tape.linear(x, w1).unwrap();
        let a = tape.relu(h);
        let y = tape.linear(a, w2).unwrap();
        let r_out = tape.value(y).clone();
        let rel = propagate(&tape, x, y, r_out.data().to_vec(), DEFAULT_EPSILON).unwrap();
        let total = |id: NodeId| rel[id.index()].as_ref().unwrap().iter().sum::<f64>();
        let bound = 1e-6 + DEFAULT_EPSILON * 100.0;
        assert!((total(a) - total(y)).abs() <= bound);
        assert!((total(x) - total(a)).abs() <= bound);
    }

    #[test]
    fn zero_input_has_zero_relevance() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[1, 3]), false);
        let w = tape.input(t(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]), false);
        let y = tape.linear(x, w).unwrap();
        let r = relevance_of_input(&tape, x, y, &t(&[1, 2], vec![1.0, 1.0]), DEFAULT_EPSILON).unwrap();
        assert!(r.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn batch_statistics_are_rejected() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2, 2], vec![1.0, 2.0, 3.0, 5.0]), false);
        let g = tape.input(Tensor::full(&[2], 1.0), false);
        let b = tape.input(Tensor::zeros(&[2]), false);
        tape.set_scope("bn");
        let y = tape.batch_norm(x, g, b, &crate::compute::NormStats::Batch).unwrap();
        let err = propagate(&tape, x, y, vec![1.0; 4], DEFAULT_EPSILON).unwrap_err();
        assert!(err.to_string().contains("bn"), "{err}");
    }
}
