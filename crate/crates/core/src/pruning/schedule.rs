//! Iterative prune–train driver.
//!
//! Train `warmup_epochs`, then repeat: score, prune `density_step` of the
//! original channel groups, train `epochs_per_step`. Within every training
//! block the learning rate drops by `lr_decay` at each quarter.

use std::fmt::Write as _;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::compute::rng;
use crate::compute::OptimizerState;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{count_flops, count_params, Network};
use crate::train;

use super::criteria::{score_channels, Criterion};
use super::select::select_global;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub warmup_epochs: usize,
    pub epochs_per_step: usize,
    /// Fraction of the original channel groups removed per prune event.
    pub density_step: f64,
    pub final_density: f64,
    /// Learning rate at `base_batch`; scaled linearly to `batch_size`.
    pub base_lr: f64,
    pub base_batch: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    /// Cap on the seeded scoring subset.
    pub scoring_samples: usize,
    /// Minimum surviving channels per group.
    pub floor: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 4,
            epochs_per_step: 1,
            density_step: 0.05,
            final_density: 0.05,
            base_lr: 0.01,
            base_batch: 256,
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay: 5.0,
            scoring_samples: 512,
            floor: 1,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Schedule(m));
        if !(self.final_density > 0.0 && self.final_density < 1.0) {
            return bad(format!("final_density {} must lie in (0, 1)", self.final_density));
        }
        if !(self.density_step > 0.0 && self.density_step < 1.0) {
            return bad(format!("density_step {} must lie in (0, 1)", self.density_step));
        }
        let steps = (1.0 - self.final_density) / self.density_step;
        if (steps - steps.round()).abs() > 1e-9 {
            return bad(format!(
                "density_step {} does not divide 1 - final_density = {} into whole steps",
                self.density_step,
                1.0 - self.final_density
            ));
        }
        if self.batch_size == 0 || self.base_batch == 0 || self.epochs_per_step == 0 {
            return bad("batch sizes and epochs_per_step must be positive".into());
        }
        if self.lr_decay < 1.0 {
            return bad(format!("lr_decay {} must be at least 1", self.lr_decay));
        }
        OptimizerState::new(self.lr(), self.momentum, self.weight_decay)?;
        Ok(())
    }

    pub fn prune_events(&self) -> usize {
        ((1.0 - self.final_density) / self.density_step).round() as usize
    }

    /// Linearly scaled learning rate for `batch_size`.
    pub fn lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / self.base_batch as f64
    }

    /// Rate at `progress` ∈ [0, 1) through a training block.
    pub fn block_lr(&self, progress: f64) -> f64 {
        let quarter = ((progress * 4.0).floor() as i32).clamp(0, 3);
        self.lr() / self.lr_decay.powi(quarter)
    }

    /// Surviving groups required after prune event `k` (1-based).
    pub fn target_surviving(&self, k: usize, total: usize) -> usize {
        (total as f64 * (1.0 - k as f64 * self.density_step)).round() as usize
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// 0 after warmup, then the prune-event index.
    pub step: usize,
    pub channel_density: f64,
    pub weight_density: f64,
    pub delta_params: usize,
    pub flops: u64,
    pub train_loss: f64,
    pub eval_accuracy: f64,
    pub warnings: Vec<String>,
    pub network: Network,
}

pub const METRICS_HEADER: &str =
    "step\tdensity_channels\tdensity_weights\tdelta_params\tflops\ttrain_loss\teval_accuracy";

impl Checkpoint {
    pub fn metrics_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{}\t{}\t{:.6}\t{:.6}",
            self.step,
            self.channel_density,
            self.weight_density,
            self.delta_params,
            self.flops,
            self.train_loss,
            self.eval_accuracy
        )
    }
}

pub fn metrics_tsv(checkpoints: &[Checkpoint]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for c in checkpoints {
        let _ = writeln!(out, "{}", c.metrics_line());
    }
    out
}

fn train_block(
    net: &mut Network,
    opt: &mut OptimizerState,
    data: &Dataset,
    cfg: &ScheduleConfig,
    epochs: usize,
    order_rng: &mut rng::Rng,
    step: &mut usize,
) -> Result<f64> {
    let per_epoch = train::batches_per_epoch(data, cfg.batch_size);
    let total = (epochs * per_epoch).max(1) as f64;
    let mut loss = f64::NAN;
    for e in 0..epochs {
        let offset = e * per_epoch;
        loss = train::train_epoch(net, opt, data, cfg.batch_size, order_rng, step, |i| {
            cfg.block_lr((offset + i) as f64 / total)
        })?;
    }
    Ok(loss)
}

fn checkpoint(net: &Network, step: usize, train_loss: f64, eval: &Dataset, cfg: &ScheduleConfig, warnings: Vec<String>) -> Result<Checkpoint> {
    let m = net.manifest();
    Ok(Checkpoint {
        step,
        channel_density: net.masks().channel_density(),
        weight_density: net.weight_density(),
        delta_params: count_params(m, net.mode(), Some(net.masks()))?.total,
        flops: count_flops(m, Some(net.masks()), &m.input_shape)?,
        train_loss,
        eval_accuracy: train::accuracy(net, eval, cfg.batch_size.max(64))?,
        warnings,
        network: net.clone(),
    })
}

/// Runs the schedule on `net` in place. `on_checkpoint` sees each checkpoint
/// as soon as it exists.
pub fn run_schedule(
    net: &mut Network,
    criterion: &Criterion,
    cfg: &ScheduleConfig,
    train_data: &Dataset,
    eval_data: &Dataset,
    seed: u64,
    mut on_checkpoint: impl FnMut(&Checkpoint),
) -> Result<Vec<Checkpoint>> {
    cfg.validate()?;
    let mut opt = OptimizerState::new(cfg.lr(), cfg.momentum, cfg.weight_decay)?;
    let mut order = rng::stream(seed, "order");
    let scoring = train_data.subset(cfg.scoring_samples, seed).sequential_batches(cfg.batch_size);
    let mut step = 0usize;
    let mut out = vec![];

    let loss = train_block(net, &mut opt, train_data, cfg, cfg.warmup_epochs, &mut order, &mut step)?;
    let cp = checkpoint(net, 0, loss, eval_data, cfg, vec![])?;
    info!("warmup done: loss {:.4}, accuracy {:.4}", cp.train_loss, cp.eval_accuracy);
    on_checkpoint(&cp);
    out.push(cp);

    let total = net.masks().total();
    for k in 1..=cfg.prune_events() {
        let target = cfg.target_surviving(k, total);
        let surviving = net.masks().surviving();
        let count = surviving.saturating_sub(target);
        let table = score_channels(net, criterion, &scoring)?;
        let available: usize = net
            .masks()
            .groups()
            .iter()
            .map(|m| m.count().saturating_sub(cfg.floor))
            .sum();
        let mut warnings = vec![];
        if count > available {
            warnings.push(format!(
                "event {k}: wanted {count} channels, only {available} above the floor"
            ));
        }
        let selection = select_global(&table, net.masks(), count.min(available), cfg.floor)?;
        warnings.extend(selection.warnings.iter().cloned());
        for w in &warnings {
            warn!("{w}");
        }
        let mut masks = net.masks().clone();
        selection.apply(&mut masks);
        net.set_masks(masks)?;
        let loss = train_block(net, &mut opt, train_data, cfg, cfg.epochs_per_step, &mut order, &mut step)?;
        let cp = checkpoint(net, k, loss, eval_data, cfg, warnings)?;
        info!(
            "event {k}: channels {:.3}, weights {:.3}, accuracy {:.4}",
            cp.channel_density, cp.weight_density, cp.eval_accuracy
        );
        on_checkpoint(&cp);
        out.push(cp);
    }
    Ok(out)
}
