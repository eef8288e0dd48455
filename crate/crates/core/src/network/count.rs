use crate::error::{Error, Result};

use super::manifest::{ArchitectureManifest, LayerKind};
use super::masks::ChannelMaskSet;
use super::Mode;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCount {
    pub id: String,
    pub learned: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub per_layer: Vec<LayerCount>,
    pub total: usize,
}

impl ParamCount {
    pub fn of(&self, id: &str) -> Option<usize> {
        self.per_layer.iter().find(|l| l.id == id).map(|l| l.learned)
    }
}

/// Adapter rank actually used on an n×m layer.
pub fn layer_rank(rank: usize, n: usize, m: usize) -> usize {
    rank.min(n).min(m)
}

/// Learned parameters per layer under `mode`, over surviving channels.
pub fn count_params(manifest: &ArchitectureManifest, mode: Mode, masks: Option<&ChannelMaskSet>) -> Result<ParamCount> {
    let topo = manifest.validate()?;
    let full;
    let masks = match masks {
        Some(m) => {
            ChannelMaskSet::from_masks(manifest, &topo, m.groups().to_vec())?;
            m
        }
        None => {
            full = ChannelMaskSet::full(manifest, &topo);
            &full
        }
    };
    let mut per_layer = vec![];
    for (i, l) in manifest.layers.iter().enumerate() {
        let rows = masks.row_mask(manifest, &topo, i).count();
        let cols = masks.col_mask(manifest, &topo, i).count();
        let learned = match l.kind {
            LayerKind::Head => rows * cols + rows,
            LayerKind::Batchnorm => 2 * rows,
            LayerKind::Linear | LayerKind::Conv2d => match mode {
                Mode::Finetune => rows * cols * l.taps(),
                _ if !l.adaptable => 0,
                Mode::Splora { rank } => layer_rank(rank, l.out_channels, l.in_channels) * (rows + cols),
                Mode::Lora { rank } => {
                    layer_rank(rank, l.out_channels, l.in_channels) * (l.out_channels + l.in_channels)
                }
            },
            _ => continue,
        };
        per_layer.push(LayerCount {
            id: l.id.clone(),
            learned,
        });
    }
    let total = per_layer.iter().map(|l| l.learned).sum();
    Ok(ParamCount { per_layer, total })
}

/// Forward FLOPs for one sample: 2·k²·c_in·c_out·H_out·W_out per conv and
/// 2·n·m per linear layer, over surviving channels.
pub fn count_flops(manifest: &ArchitectureManifest, masks: Option<&ChannelMaskSet>, input_shape: &[usize]) -> Result<u64> {
    let mut sized = manifest.clone();
    if input_shape.first() != manifest.input_shape.first() || input_shape.len() != manifest.input_shape.len() {
        return Err(Error::Manifest(format!(
            "input shape {input_shape:?} is inconsistent with the manifest's {:?}",
            manifest.input_shape
        )));
    }
    sized.input_shape = input_shape.to_vec();
    let topo = sized.validate()?;
    let full;
    let masks = match masks {
        Some(m) => m,
        None => {
            full = ChannelMaskSet::full(manifest, &topo);
            &full
        }
    };
    let mut flops = 0u64;
    for i in topo.weight_layers(&sized) {
        let l = &sized.layers[i];
        let rows = masks.row_mask(&sized, &topo, i).count() as u64;
        let cols = masks.col_mask(&sized, &topo, i).count() as u64;
        let spatial: u64 = topo.shapes[i][1..].iter().map(|&d| d as u64).product();
        flops += 2 * l.taps() as u64 * rows * cols * spatial;
    }
    Ok(flops)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::manifest::{LayerSpec, SCHEMA_VERSION, INPUT};
    use crate::network::zoo;

    fn single(kind: LayerKind, cin: usize, cout: usize, kernel: Option<[usize; 2]>, input_shape: Vec<usize>) -> ArchitectureManifest {
        let mut layers = vec![LayerSpec {
            inputs: vec![INPUT.into()],
            in_channels: cin,
            out_channels: cout,
            kernel,
            padding: kernel.map_or(0, |k| k[0] / 2),
            adaptable: true,
            prunable: true,
            ..LayerSpec::new("l", kind)
        }];
        if kind == LayerKind::Conv2d {
            layers.push(LayerSpec {
                inputs: vec!["l".into()],
                ..LayerSpec::new("pool", LayerKind::Pool)
            });
        }
        let last = layers.last().unwrap().id.clone();
        layers.push(LayerSpec {
            inputs: vec![last],
            in_channels: cout,
            out_channels: 1,
            ..LayerSpec::new("head", LayerKind::Head)
        });
        ArchitectureManifest {
            schema_version: SCHEMA_VERSION,
            name: "single".into(),
            input_shape,
            num_classes: 1,
            residual_groups: vec![],
            layers,
        }
        .normalized()
        .unwrap()
    }

    #[test]
    fn single_linear_counts() {
        let m = single(LayerKind::Linear, 3072, 768, None, vec![3072]);
        let s = count_params(&m, Mode::Splora { rank: 32 }, None).unwrap();
        assert_eq!(s.of("l"), Some(122_880));
        let f = count_params(&m, Mode::Finetune, None).unwrap();
        assert_eq!(f.of("l"), Some(2_359_296));
    }

    #[test]
    fn flops_examples() {
        let m = single(LayerKind::Linear, 4, 8, None, vec![4]);
        let head = 2 * 8;
        assert_eq!(count_flops(&m, None, &[4]).unwrap(), 64 + head);
        let c = single(LayerKind::Conv2d, 2, 4, Some([3, 3]), vec![2, 8, 8]);
        assert_eq!(count_flops(&c, None, &[2, 8, 8]).unwrap(), 9_216 + 2 * 4);
    }

    #[test]
    fn halving_masks_quarters_linear_flops() {
        let m = zoo::mlp(&[8, 8, 8], 2);
        let topo = m.validate().unwrap();
        let mut masks = ChannelMaskSet::full(&m, &topo);
        let before = count_flops(&m, Some(&masks), &[8]).unwrap();
        for c in 0..4 {
            masks.prune(0, c);
            masks.prune(1, c);
        }
        let after = count_flops(&m, Some(&masks), &[8]).unwrap();
        // fc1 halves (rows), fc2 quarters, head halves.
        assert_eq!(before, 2 * (64 + 64 + 16));
        assert_eq!(after, 2 * (32 + 16 + 8));
    }

    #[test]
    fn mlp_counts_by_hand() {
        let m = zoo::mlp(&[4, 8], 2);
        let f = count_params(&m, Mode::Finetune, None).unwrap();
        assert_eq!(f.total, 4 * 8 + 8 * 2 + 2);
    }

    #[test]
    fn resnet50_unpruned_counts() {
        let m = zoo::resnet50(10);
        assert_eq!(count_params(&m, Mode::Finetune, None).unwrap().total, 23_520_842);
        let r8 = count_params(&m, Mode::Splora { rank: 8 }, None).unwrap().total as f64;
        let r32 = count_params(&m, Mode::Splora { rank: 32 }, None).unwrap().total as f64;
        assert!((r8 / 466_300.0 - 1.0).abs() < 0.005, "{r8}");
        assert!((r32 / 1_644_500.0 - 1.0).abs() < 0.005, "{r32}");
    }
}
