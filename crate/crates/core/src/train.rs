//! Minibatch SGD epochs and evaluation for a [`Network`].

use serde::{Deserialize, Serialize};

use crate::compute::rng::{self, Rng};
use crate::compute::{OptimizerState, Tape};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::network::{Network, Phase};

/// Loss and gradients for one batch; returns the mean loss.
pub fn loss_and_grads(net: &mut Network, batch: &Batch) -> Result<f64> {
    let mut tape = Tape::new();
    let fwd = net.forward(&mut tape, batch.x.clone(), Phase::Train)?;
    let loss = tape.softmax_cross_entropy(fwd.logits, &batch.labels)?;
    tape.backward(loss)?;
    net.update_running_stats(&tape, &fwd);
    net.collect_grads(&tape);
    Ok(tape.value(loss).item())
}

/// One shuffled pass over `data`. `lr_at(i)` gives the rate for the i-th
/// update of the pass; `step` counts updates across the whole run.
pub fn train_epoch(
    net: &mut Network,
    opt: &mut OptimizerState,
    data: &Dataset,
    batch_size: usize,
    rng: &mut Rng,
    step: &mut usize,
    lr_at: impl Fn(usize) -> f64,
) -> Result<f64> {
    let order = rng::permutation(rng, data.len());
    let mut total = 0.0;
    let mut seen = 0;
    for (i, idx) in order.chunks(batch_size.max(1)).enumerate() {
        let batch = data.batch(idx);
        let loss = loss_and_grads(net, &batch)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step: *step });
        }
        opt.lr = lr_at(i);
        net.sgd_step(opt).map_err(|e| match e {
            Error::NonFinite(_) => Error::TrainingDiverged { step: *step },
            other => other,
        })?;
        *step += 1;
        total += loss * idx.len() as f64;
        seen += idx.len();
    }
    Ok(total / seen.max(1) as f64)
}

/// Plain training of a fresh network, used to make a source model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Initial rate; epoch `e` uses `lr / (1 + e/2)` with integer division.
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            lr: 0.05,
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Trains every weight of `net` on `data`; returns the last epoch's loss.
pub fn pretrain(net: &mut Network, data: &Dataset, cfg: &PretrainConfig, seed: u64) -> Result<f64> {
    let mut opt = OptimizerState::new(cfg.lr, cfg.momentum, cfg.weight_decay)?;
    let mut order = rng::stream(seed, "pretrain");
    let mut step = 0;
    let mut loss = f64::NAN;
    for e in 0..cfg.epochs {
        let lr = cfg.lr / (1 + e / 2) as f64;
        loss = train_epoch(net, &mut opt, data, cfg.batch_size, &mut order, &mut step, |_| lr)?;
        log::info!("pretrain epoch {e}: loss {loss:.4}");
    }
    Ok(loss)
}

/// Number of minibatches in one pass.
pub fn batches_per_epoch(data: &Dataset, batch_size: usize) -> usize {
    data.len().div_ceil(batch_size.max(1))
}

/// Predicted class per sample, using running normalisation statistics.
pub fn predict(net: &Network, data: &Dataset, batch_size: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    for batch in data.sequential_batches(batch_size) {
        let mut tape = Tape::new();
        let fwd = net.forward(&mut tape, batch.x, Phase::Eval)?;
        let logits = tape.value(fwd.logits);
        let k = logits.shape()[1];
        for row in logits.data().chunks(k) {
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap_or(0);
            out.push(best);
        }
    }
    Ok(out)
}

/// Fraction of correctly classified samples.
pub fn accuracy(net: &Network, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let pred = predict(net, data, batch_size)?;
    let hits = pred.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gaussian_blobs;
    use crate::network::zoo;

    #[test]
    fn blobs_become_separable() {
        let data = gaussian_blobs(120, 4, 3, 0.4, 1);
        let m = zoo::mlp(&[4, 16], 3);
        let mut net = Network::build(&m, 1).unwrap();
        let mut opt = OptimizerState::new(0.05, 0.9, 5e-4).unwrap();
        let mut r = rng::stream(1, "order");
        let mut step = 0;
        for _ in 0..20 {
            train_epoch(&mut net, &mut opt, &data, 16, &mut r, &mut step, |_| 0.05).unwrap();
        }
        assert!(accuracy(&net, &data, 64).unwrap() > 0.95);
        assert_eq!(step, 20 * 8);
    }
}
