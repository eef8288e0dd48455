mod common;

use common::{random_batch, two_block, worst_relative_error};
use spa_core::network::{zoo, LayerParams, Mode, Network, WeightParam};
use spa_core::train::loss_and_grads;

/// Splora factors drawn large enough that the adapter path carries gradient.
fn splora(base: &Network, rank: usize) -> Network {
    let mut net = base.adapt(Mode::Splora { rank }, 5).unwrap();
    for p in net.trainable_mut() {
        if p.name.ends_with(".up") {
            p.tensor.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * ((i % 7) as f64 - 3.0));
        }
    }
    net.enforce_masks();
    net
}

#[test]
fn mlp_finetune_matches_finite_differences() {
    let m = zoo::mlp(&[5, 7, 6], 3);
    let mut net = Network::build(&m, 1).unwrap();
    let (name, err) = worst_relative_error(&mut net, &random_batch(&m, 4, 1));
    assert!(err < 1e-4, "{name}: {err:e}");
}

#[test]
fn mlp_splora_matches_finite_differences() {
    let m = zoo::mlp(&[5, 7, 6], 3);
    let mut net = splora(&Network::build(&m, 1).unwrap(), 2);
    let (name, err) = worst_relative_error(&mut net, &random_batch(&m, 4, 2));
    assert!(err < 1e-4, "{name}: {err:e}");
}

#[test]
fn residual_cnn_splora_matches_finite_differences_with_masks() {
    let m = two_block();
    let topo = m.validate().unwrap();
    let mut net = splora(&Network::build(&m, 3).unwrap(), 2);
    let g_stem = topo.out_group[m.layer_index("b1.conv2").unwrap()].unwrap();
    let g_b2 = topo.out_group[m.layer_index("b2.down").unwrap()].unwrap();
    let mut masks = net.masks().clone();
    masks.prune(g_stem, 1);
    masks.prune(g_b2, 2);
    net.set_masks(masks).unwrap();

    let (name, err) = worst_relative_error(&mut net, &random_batch(&m, 4, 3));
    eprintln!("worst relative error {err:e} in {name}");
    assert!(err < 1e-4, "{name}: {err:e}");

    // Masked adapter rows and columns receive exactly zero gradient.
    for (i, lp) in net.layers().iter().enumerate() {
        let LayerParams::Weight(WeightParam::Splora(s)) = lp else { continue };
        let (row, col) = (net.row_mask(i), net.col_mask(i));
        let r = s.rank();
        let gd = s.down().grad().unwrap();
        let gu = s.up().grad().unwrap();
        for a in 0..s.rows() {
            if !row.get(a) {
                assert!(gd[a * r..(a + 1) * r].iter().all(|g| *g == 0.0), "{}: row {a}", m.layers[i].id);
            }
        }
        for b in 0..s.cols() {
            if !col.get(b) {
                assert!((0..r).all(|k| gu[k * s.cols() + b] == 0.0), "{}: col {b}", m.layers[i].id);
            }
        }
    }
}

#[test]
fn frozen_sources_stay_bit_identical_through_training() {
    let m = two_block();
    let base = Network::build(&m, 4).unwrap();
    let mut net = base.adapt(Mode::Splora { rank: 2 }, 4).unwrap();
    let before: Vec<Vec<f64>> = (0..m.layers.len())
        .filter_map(|i| net.source(i).map(|s| s.data().to_vec()))
        .collect();
    let mut opt = spa_core::compute::OptimizerState::new(0.05, 0.9, 5e-4).unwrap();
    for seed in 0..5 {
        loss_and_grads(&mut net, &random_batch(&m, 4, seed)).unwrap();
        net.sgd_step(&mut opt).unwrap();
    }
    let after: Vec<Vec<f64>> = (0..m.layers.len())
        .filter_map(|i| net.source(i).map(|s| s.data().to_vec()))
        .collect();
    assert_eq!(before.len(), 6);
    for (a, b) in before.iter().zip(&after) {
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
