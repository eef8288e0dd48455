use crate::error::{Error, Result};
use crate::mask::ChannelMask;

use super::manifest::{ArchitectureManifest, Topology};

/// One output-channel mask per prunable group. Row and column masks of every
/// layer are derived from these, so coupled layers can never disagree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelMaskSet {
    masks: Vec<ChannelMask>,
}

impl ChannelMaskSet {
    pub fn full(manifest: &ArchitectureManifest, topo: &Topology) -> Self {
        Self {
            masks: (0..topo.groups.len())
                .map(|g| ChannelMask::full(topo.group_width(manifest, g)))
                .collect(),
        }
    }

    pub fn from_masks(manifest: &ArchitectureManifest, topo: &Topology, masks: Vec<ChannelMask>) -> Result<Self> {
        if masks.len() != topo.groups.len() {
            return Err(Error::MaskLength {
                expected: topo.groups.len(),
                found: masks.len(),
            });
        }
        for (g, m) in masks.iter().enumerate() {
            m.expect_len(topo.group_width(manifest, g))?;
        }
        Ok(Self { masks })
    }

    pub fn groups(&self) -> &[ChannelMask] {
        &self.masks
    }

    pub fn group(&self, g: usize) -> &ChannelMask {
        &self.masks[g]
    }

    pub fn prune(&mut self, group: usize, channel: usize) {
        self.masks[group].prune(channel);
    }

    /// Channel groups still alive.
    pub fn surviving(&self) -> usize {
        self.masks.iter().map(ChannelMask::count).sum()
    }

    pub fn total(&self) -> usize {
        self.masks.iter().map(ChannelMask::len).sum()
    }

    pub fn channel_density(&self) -> f64 {
        match self.total() {
            0 => 1.0,
            t => self.surviving() as f64 / t as f64,
        }
    }

    /// Output-channel mask of layer `i`.
    pub fn row_mask(&self, manifest: &ArchitectureManifest, topo: &Topology, i: usize) -> ChannelMask {
        match topo.out_group[i] {
            Some(g) => self.masks[g].clone(),
            None => ChannelMask::full(manifest.layers[i].out_channels),
        }
    }

    /// Input-channel mask of layer `i`.
    pub fn col_mask(&self, manifest: &ArchitectureManifest, topo: &Topology, i: usize) -> ChannelMask {
        match topo.in_group[i] {
            Some(g) => self.masks[g].clone(),
            None => ChannelMask::full(manifest.layers[i].in_channels),
        }
    }

    /// Weight entries (linear, conv, head) left by these masks.
    pub fn surviving_weights(&self, manifest: &ArchitectureManifest, topo: &Topology) -> usize {
        topo.weight_layers(manifest)
            .map(|i| {
                self.row_mask(manifest, topo, i).count()
                    * self.col_mask(manifest, topo, i).count()
                    * manifest.layers[i].taps()
            })
            .sum()
    }

    pub fn weight_density(&self, manifest: &ArchitectureManifest, topo: &Topology) -> f64 {
        self.surviving_weights(manifest, topo) as f64 / manifest.weight_entries() as f64
    }
}
