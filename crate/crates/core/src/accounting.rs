//! Learned-fraction curves, ΔParams/FLOPs reports, and the multi-task
//! storage break-even.

use std::fmt::{self, Write as _};

use crate::error::{Error, Result};
use crate::mask::ChannelMask;
use crate::network::{count_flops, count_params, ArchitectureManifest, ChannelMaskSet, Mode, Network, Topology};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TradeoffPoint {
    pub method: Mode,
    /// Retained weight fraction ‖W_t‖₀/‖W_s‖₀.
    pub density: f64,
    /// Trained parameters per task over ‖W_s‖₀.
    pub learned_fraction: f64,
}

/// Point for an n×m weight keeping `rows` and `cols` fractions of its
/// output and input channels.
pub fn tradeoff_point(n: usize, m: usize, method: Mode, rows: f64, cols: f64) -> TradeoffPoint {
    let (nf, mf) = (n as f64, m as f64);
    let density = rows * cols;
    let r = method.rank() as f64;
    let learned_fraction = match method {
        Mode::Finetune => density,
        Mode::Lora { .. } => r * (nf + mf) / (nf * mf),
        Mode::Splora { .. } => r * (rows * nf + cols * mf) / (nf * mf),
    };
    TradeoffPoint {
        method,
        density,
        learned_fraction,
    }
}

/// Analytic curve with √d retention per side.
pub fn tradeoff_curve(n: usize, m: usize, method: Mode, grid: &[f64]) -> Vec<TradeoffPoint> {
    grid.iter()
        .map(|&d| {
            let side = d.sqrt();
            let mut p = tradeoff_point(n, m, method, side, side);
            // √d·√d can miss d by an ulp
            p.density = d;
            if method == Mode::Finetune {
                p.learned_fraction = d;
            }
            p
        })
        .collect()
}

/// 1.00, 0.95, …, 0.05.
pub fn default_grid() -> Vec<f64> {
    (0..20).map(|k| (100 - 5 * k) as f64 / 100.0).collect()
}

pub fn curve_csv(points: &[TradeoffPoint]) -> String {
    let mut out = String::from("method,density,learned_fraction\n");
    for p in points {
        let _ = writeln!(out, "{},{:.5},{:.5}", p.method, p.density, p.learned_fraction);
    }
    out
}

/// Smallest task count T with T > 1/d̄, past which one shared source plus
/// per-task deltas beats storing T separately pruned models.
pub fn storage_breakeven(mean_density: f64) -> Result<u64> {
    if !(mean_density > 0.0 && mean_density <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mean density {mean_density} must lie in (0, 1]"
        )));
    }
    Ok((1.0 / mean_density).floor() as u64 + 1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StorageModel {
    pub tasks: u64,
    pub mean_density: f64,
    pub source_params: u64,
}

impl StorageModel {
    /// T separately fine-pruned models.
    pub fn separate_params(&self) -> f64 {
        self.tasks as f64 * self.mean_density * self.source_params as f64
    }

    /// One dense source plus `delta_params` per task.
    pub fn shared_params(&self, delta_params: u64) -> f64 {
        self.source_params as f64 + (self.tasks * delta_params) as f64
    }

    /// Whether sharing wins when deltas are negligible next to the source.
    pub fn sharing_pays(&self) -> Result<bool> {
        Ok(self.tasks >= storage_breakeven(self.mean_density)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub mode: Mode,
    pub delta_params: usize,
    pub flops: u64,
    pub channel_density: f64,
    pub weight_density: f64,
}

/// Renders a count as thousands with one decimal: 23520842 → "23,520.8K".
pub fn thousands(n: usize) -> String {
    let tenths = (n as f64 / 100.0).round() as u64;
    let (whole, frac) = (tenths / 10, tenths % 10);
    let digits = whole.to_string();
    let mut grouped = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            grouped.push(',');
        }
        grouped.push(ch);
    }
    format!("{grouped}.{frac}K")
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\tΔParams {}\tFLOPs {:.1}M\tdensity {:.4} (channels {:.4})",
            self.mode,
            thousands(self.delta_params),
            self.flops as f64 / 1e6,
            self.weight_density,
            self.channel_density
        )
    }
}

pub fn report_masks(manifest: &ArchitectureManifest, mode: Mode, masks: &ChannelMaskSet) -> Result<Report> {
    let topo = manifest.validate()?;
    Ok(Report {
        mode,
        delta_params: count_params(manifest, mode, Some(masks))?.total,
        flops: count_flops(manifest, Some(masks), &manifest.input_shape)?,
        channel_density: masks.channel_density(),
        weight_density: masks.weight_density(manifest, &topo),
    })
}

pub fn report(net: &Network) -> Result<Report> {
    report_masks(net.manifest(), net.mode(), net.masks())
}

/// Masks keeping the first `round(width · keep)` channels of every group
/// (at least one), for static what-if reports.
pub fn uniform_masks(manifest: &ArchitectureManifest, topo: &Topology, keep: f64) -> Result<ChannelMaskSet> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::InvalidArgument(format!("channel density {keep} must lie in (0, 1]")));
    }
    let masks = (0..topo.groups.len())
        .map(|g| {
            let w = topo.group_width(manifest, g);
            let k = ((w as f64 * keep).round() as usize).clamp(1, w);
            ChannelMask::from_bools((0..w).map(|c| c < k).collect())
        })
        .collect();
    ChannelMaskSet::from_masks(manifest, topo, masks)
}
