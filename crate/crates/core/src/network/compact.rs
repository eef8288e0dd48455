//! Physically removes pruned channels, yielding a smaller dense network.

use std::sync::Arc;

use crate::adapter::DenseLayer;
use crate::compute::Tensor;
use crate::error::{Error, Result};

use super::model::{LayerParams, Network, NormParams, WeightParam};
use super::{ArchitectureManifest, ChannelMaskSet, LayerKind, Mode};

fn pick(values: &[f64], kept: &[usize]) -> Vec<f64> {
    kept.iter().map(|&i| values[i]).collect()
}

/// Fuses adapters, deletes masked channels, and returns the reduced
/// manifest with a fine-tuning-mode network over it. In evaluation mode the
/// result computes the same logits as `net`.
pub fn compact_network(net: &Network) -> Result<(ArchitectureManifest, Network)> {
    let manifest = net.manifest();
    let mut reduced = manifest.clone();
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, spec) in manifest.layers.iter().enumerate() {
        let (row, col) = (net.row_mask(i), net.col_mask(i));
        if row.count() == 0 || col.count() == 0 {
            return Err(Error::DegenerateLayer(format!("layer `{}` has no surviving channels", spec.id)));
        }
        let out = &mut reduced.layers[i];
        out.in_channels = col.count();
        out.out_channels = if spec.kind == LayerKind::Head { spec.out_channels } else { row.count() };
        if !spec.kind.has_weight() {
            out.in_channels = row.count();
        }
        layers.push(match net.layer(i) {
            LayerParams::Weight(_) => {
                let w = net.effective_weight(i).expect("weight layer");
                LayerParams::Weight(WeightParam::Dense(Arc::new(DenseLayer::compact(&w, &row, &col)?.weight)))
            }
            LayerParams::Head { weight, bias } => LayerParams::Head {
                weight: DenseLayer::compact(weight, &row, &col)?.weight,
                bias: bias.clone(),
            },
            LayerParams::Norm(p) => {
                let kept = row.kept();
                LayerParams::Norm(NormParams {
                    gamma: Tensor::new(&[kept.len()], pick(p.gamma.data(), &kept))?,
                    beta: Tensor::new(&[kept.len()], pick(p.beta.data(), &kept))?,
                    running_mean: pick(&p.running_mean, &kept),
                    running_var: pick(&p.running_var, &kept),
                })
            }
            LayerParams::Stateless => LayerParams::Stateless,
        });
    }
    let reduced = reduced.normalized()?;
    let topo = reduced.validate()?;
    let masks = ChannelMaskSet::full(&reduced, &topo);
    let dense = Network::from_parts(&reduced, Mode::Finetune, layers, masks)?;
    Ok((reduced, dense))
}
