use spa_core::adapter::init_splora;
use spa_core::compute::rng::{self, Rng};
use spa_core::compute::Tensor;
use spa_core::mask::ChannelMask;
use spa_core::network::{count_params, zoo, LayerKind, Mode, Network};

fn nonzero_normal(r: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng::normal(r, 1.0);
            v + 0.5 * v.signum()
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn random_mask(r: &mut Rng, len: usize) -> ChannelMask {
    let mut flags: Vec<bool> = (0..len).map(|_| rng::uniform(r, 0.0, 1.0) < 0.6).collect();
    let keep = (rng::uniform(r, 0.0, len as f64) as usize).min(len - 1);
    flags[keep] = true;
    ChannelMask::from_bools(flags)
}

#[test]
fn layer_counts_match_nonzero_oracle_on_random_instances() {
    for inst in 0..100u64 {
        let mut r = rng::stream(inst, "counting");
        let n = 1 + (rng::uniform(&mut r, 0.0, 24.0) as usize);
        let m = 1 + (rng::uniform(&mut r, 0.0, 24.0) as usize);
        let rank = 1 + (rng::uniform(&mut r, 0.0, n.min(m) as f64) as usize).min(n.min(m) - 1);
        let mut layer = init_splora(nonzero_normal(&mut r, &[n, m]), rank, inst).unwrap();
        let (d, u) = layer.factors_mut();
        *d = nonzero_normal(&mut r, &[n, rank]);
        *u = nonzero_normal(&mut r, &[rank, m]);
        let (row, col) = (random_mask(&mut r, n), random_mask(&mut r, m));
        layer.set_masks(row.clone(), col.clone()).unwrap();

        let adapter = layer.down().count_nonzero() + layer.up().count_nonzero();
        assert_eq!(adapter, rank * (row.count() + col.count()), "instance {inst}");
        assert_eq!(layer.learned_params(), adapter, "instance {inst}");
        let fine_pruned = row.count() * col.count();
        assert_eq!(layer.effective_weight().count_nonzero(), fine_pruned, "instance {inst}");
        assert_eq!(layer.compact().unwrap().param_count(), fine_pruned, "instance {inst}");
    }
}

#[test]
fn network_counts_match_nonzero_oracle() {
    for inst in 0..20u64 {
        let mut r = rng::stream(inst, "network-counting");
        let widths: Vec<usize> = (0..3).map(|_| 2 + rng::uniform(&mut r, 0.0, 10.0) as usize).collect();
        let m = zoo::mlp(&[6, widths[0], widths[1], widths[2]], 4);
        let base = Network::build(&m, inst).unwrap();
        for mode in [Mode::Finetune, Mode::Splora { rank: 2 }] {
            let mut net = base.adapt(mode, inst).unwrap();
            for p in net.trainable_mut() {
                let shape = p.tensor.shape().to_vec();
                *p.tensor = nonzero_normal(&mut r, &shape);
            }
            let mut masks = net.masks().clone();
            for g in 0..masks.groups().len() {
                let keep = random_mask(&mut r, masks.group(g).len());
                for c in 0..keep.len() {
                    if !keep.get(c) {
                        masks.prune(g, c);
                    }
                }
            }
            net.set_masks(masks).unwrap();
            let counts = count_params(&m, mode, Some(net.masks())).unwrap();
            let mut oracle = 0;
            for p in net.trainable_mut() {
                let layer = p.name.rsplit_once('.').unwrap().0.to_string();
                let kind = m.layers[m.layer_index(&layer).unwrap()].kind;
                if kind != LayerKind::Batchnorm {
                    oracle += p.tensor.count_nonzero();
                }
            }
            let expected: usize = counts
                .per_layer
                .iter()
                .filter(|l| m.layers[m.layer_index(&l.id).unwrap()].kind != LayerKind::Batchnorm)
                .map(|l| l.learned)
                .sum();
            assert_eq!(oracle, expected, "instance {inst}, {mode}");
        }
    }
}
