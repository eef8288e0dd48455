#![allow(dead_code)]

use spa_core::compute::rng::{self, Rng};
use spa_core::compute::{Tape, Tensor};
use spa_core::data::Batch;
use spa_core::network::{ArchitectureManifest, Network, Phase};
use spa_core::train::loss_and_grads;

/// Two residual blocks, the second with a strided projection shortcut.
pub const TWO_BLOCK: &str = r#"
schema_version = 1
name = "two-block"
input_shape = [3, 6, 6]
num_classes = 3
residual_groups = [["stem", "b1.conv2"], ["b2.conv2", "b2.down"]]

[[layers]]
id = "stem"
kind = "conv2d"
inputs = ["input"]
in_channels = 3
out_channels = 4
kernel = [3, 3]
padding = 1
adaptable = true
prunable = true

[[layers]]
id = "stem.bn"
kind = "batchnorm"

[[layers]]
id = "stem.relu"
kind = "relu"

[[layers]]
id = "b1.conv1"
kind = "conv2d"
in_channels = 4
out_channels = 4
kernel = [3, 3]
padding = 1
adaptable = true
prunable = true

[[layers]]
id = "b1.bn1"
kind = "batchnorm"

[[layers]]
id = "b1.relu1"
kind = "relu"

[[layers]]
id = "b1.conv2"
kind = "conv2d"
in_channels = 4
out_channels = 4
kernel = [3, 3]
padding = 1
adaptable = true
prunable = true

[[layers]]
id = "b1.bn2"
kind = "batchnorm"

[[layers]]
id = "b1.add"
kind = "add"
inputs = ["b1.bn2", "stem.relu"]

[[layers]]
id = "b1.out"
kind = "relu"

[[layers]]
id = "b2.conv1"
kind = "conv2d"
in_channels = 4
out_channels = 6
kernel = [3, 3]
stride = 2
padding = 1
adaptable = true
prunable = true

[[layers]]
id = "b2.bn1"
kind = "batchnorm"

[[layers]]
id = "b2.relu1"
kind = "relu"

[[layers]]
id = "b2.conv2"
kind = "conv2d"
in_channels = 6
out_channels = 6
kernel = [3, 3]
padding = 1
adaptable = true
prunable = true

[[layers]]
id = "b2.bn2"
kind = "batchnorm"

[[layers]]
id = "b2.down"
kind = "conv2d"
inputs = ["b1.out"]
in_channels = 4
out_channels = 6
kernel = [1, 1]
stride = 2
adaptable = true
prunable = true

[[layers]]
id = "b2.down_bn"
kind = "batchnorm"

[[layers]]
id = "b2.add"
kind = "add"
inputs = ["b2.bn2", "b2.down_bn"]

[[layers]]
id = "b2.out"
kind = "relu"

[[layers]]
id = "pool"
kind = "pool"

[[layers]]
id = "head"
kind = "head"
in_channels = 6
out_channels = 3
"#;

pub fn two_block() -> ArchitectureManifest {
    ArchitectureManifest::from_toml(TWO_BLOCK).expect("two-block manifest")
}

pub fn normal_tensor(r: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng::normal(r, std)).collect()).unwrap()
}

/// Random batch shaped for `m` with labels below its class count.
pub fn random_batch(m: &ArchitectureManifest, n: usize, seed: u64) -> Batch {
    let mut r = rng::stream(seed, "test-batch");
    let mut shape = vec![n];
    shape.extend(&m.input_shape);
    let x = normal_tensor(&mut r, &shape, 1.0);
    let labels = (0..n).map(|i| i % m.num_classes).collect();
    Batch { x, labels }
}

pub fn loss(net: &Network, batch: &Batch, phase: Phase) -> f64 {
    let mut tape = Tape::new();
    let fwd = net.forward(&mut tape, batch.x.clone(), phase).unwrap();
    let l = tape.softmax_cross_entropy(fwd.logits, &batch.labels).unwrap();
    tape.value(l).item()
}

pub fn logits(net: &Network, x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let fwd = net.forward(&mut tape, x.clone(), Phase::Eval).unwrap();
    tape.value(fwd.logits).clone()
}

const H: f64 = 1e-5;

/// Worst relative error, ‖a − n‖ / (‖a‖ + ‖n‖), over all trainable tensors.
pub fn worst_relative_error(net: &mut Network, batch: &Batch) -> (String, f64) {
    loss_and_grads(net, batch).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = net
        .trainable_mut()
        .into_iter()
        .map(|p| (p.name.clone(), p.tensor.grad().expect("gradient").to_vec()))
        .collect();
    assert!(analytic.iter().any(|(_, g)| g.iter().any(|v| *v != 0.0)));
    let mut worst = (String::new(), 0.0);
    for (k, (name, a)) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let nudge = |net: &mut Network, d: f64| net.trainable_mut()[k].tensor.data_mut()[j] += d;
            nudge(net, H);
            let up = loss(net, batch, Phase::Train);
            nudge(net, -2.0 * H);
            let down = loss(net, batch, Phase::Train);
            nudge(net, H);
            *slot = (up - down) / (2.0 * H);
        }
        let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt() + numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rel = if scale == 0.0 { 0.0 } else { diff / scale };
        if rel > worst.1 {
            worst = (name.clone(), rel);
        }
    }
    worst
}
