//! Shape-only architecture description and its validation.
//!
//! A manifest is TOML. Layers are listed in topological order; each names its
//! inputs (`"input"` is the network input, an omitted list means the previous
//! layer). See `docs/manifest.md` for the schema.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const INPUT: &str = "input";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Linear,
    Conv2d,
    Batchnorm,
    Relu,
    /// Global average pool over the spatial dimensions.
    Pool,
    /// Final classifier: a linear layer with bias, never adapted or pruned.
    Head,
    /// Residual junction summing two or more inputs.
    Add,
}

impl LayerKind {
    pub fn has_weight(self) -> bool {
        matches!(self, LayerKind::Linear | LayerKind::Conv2d | LayerKind::Head)
    }
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

fn one() -> usize {
    1
}

fn is_false(v: &bool) -> bool {
    !*v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub in_channels: usize,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub out_channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<[usize; 2]>,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub stride: usize,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub padding: usize,
    #[serde(default, skip_serializing_if = "is_false")]
    pub adaptable: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    pub prunable: bool,
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            id: id.into(),
            kind,
            inputs: vec![],
            in_channels: 0,
            out_channels: 0,
            kernel: None,
            stride: 1,
            padding: 0,
            adaptable: false,
            prunable: false,
        }
    }

    pub fn taps(&self) -> usize {
        self.kernel.map_or(1, |[h, w]| h * w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureManifest {
    pub schema_version: u32,
    pub name: String,
    /// `[C, H, W]` for image networks, `[D]` for vector inputs.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub residual_groups: Vec<Vec<String>>,
    pub layers: Vec<LayerSpec>,
}

/// Where a layer reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Input,
    Layer(usize),
}

/// Resolved connectivity, shapes, and channel coupling of a valid manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub inputs: Vec<Vec<Source>>,
    /// Activation shape (without batch) produced by each layer.
    pub shapes: Vec<Vec<usize>>,
    /// Shape of the data each layer consumes.
    pub in_shapes: Vec<Vec<usize>>,
    /// Prunable channel groups, each a list of coupled weight layers, ordered
    /// by their first member.
    pub groups: Vec<Vec<usize>>,
    /// Group whose mask governs each layer's output channels.
    pub out_group: Vec<Option<usize>>,
    /// Group whose mask governs each layer's input channels.
    pub in_group: Vec<Option<usize>>,
    /// For weight layers: the batch-norm that is the layer's sole consumer.
    pub norm_after: Vec<Option<usize>>,
    pub consumers: Vec<Vec<usize>>,
}

impl Topology {
    pub fn group_width(&self, manifest: &ArchitectureManifest, group: usize) -> usize {
        manifest.layers[self.groups[group][0]].out_channels
    }

    /// Layers carrying a weight matrix or kernel.
    pub fn weight_layers<'a>(&'a self, m: &'a ArchitectureManifest) -> impl Iterator<Item = usize> + 'a {
        (0..m.layers.len()).filter(move |&i| m.layers[i].kind.has_weight())
    }
}

impl ArchitectureManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        m.normalized()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serialises")
    }

    /// Canonical text: the normalised manifest serialised with fixed field order.
    pub fn canonical_text(&self) -> String {
        self.to_toml()
    }

    /// SHA-256 of the canonical text.
    pub fn architecture_hash(&self) -> [u8; 32] {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    /// Fills defaulted inputs and pass-through channel counts, then validates.
    pub fn normalized(mut self) -> Result<Self> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Manifest(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let mut channels: HashMap<String, usize> = HashMap::new();
        let input_channels = *self
            .input_shape
            .first()
            .ok_or_else(|| Error::Manifest("input_shape is empty".into()))?;
        channels.insert(INPUT.into(), input_channels);
        let mut prev = INPUT.to_string();
        for layer in &mut self.layers {
            if layer.inputs.is_empty() {
                layer.inputs = vec![prev.clone()];
            }
            let first = layer.inputs[0].clone();
            let produced = *channels.get(&first).ok_or_else(|| {
                Error::Manifest(format!(
                    "layer `{}` reads `{first}`, which is not an earlier layer",
                    layer.id
                ))
            })?;
            if !layer.kind.has_weight() {
                if layer.in_channels == 0 {
                    layer.in_channels = produced;
                }
                if layer.out_channels == 0 {
                    layer.out_channels = layer.in_channels;
                }
            }
            channels.insert(layer.id.clone(), layer.out_channels);
            prev = layer.id.clone();
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<Topology> {
        let err = |msg: String| Err(Error::Manifest(msg));
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return err(format!("input_shape {:?} must be non-empty and positive", self.input_shape));
        }
        if self.layers.is_empty() {
            return err("manifest has no layers".into());
        }
        let n = self.layers.len();
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut inputs = Vec::with_capacity(n);
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(n);
        let mut in_shapes = Vec::with_capacity(n);
        let mut consumers = vec![vec![]; n];

        for (i, l) in self.layers.iter().enumerate() {
            if l.id.is_empty() || l.id == INPUT || index.contains_key(l.id.as_str()) {
                return err(format!("layer id `{}` is empty, reserved, or duplicated", l.id));
            }
            if l.inputs.is_empty() {
                return err(format!("layer `{}` lists no inputs", l.id));
            }
            let arity_ok = match l.kind {
                LayerKind::Add => l.inputs.len() >= 2,
                _ => l.inputs.len() == 1,
            };
            if !arity_ok {
                return err(format!("layer `{}` ({:?}) has {} inputs", l.id, l.kind, l.inputs.len()));
            }
            if (l.adaptable || l.prunable) && !matches!(l.kind, LayerKind::Linear | LayerKind::Conv2d) {
                return err(format!(
                    "layer `{}`: only linear and conv2d layers may be adaptable or prunable",
                    l.id
                ));
            }
            if l.in_channels == 0 || l.out_channels == 0 || l.stride == 0 {
                return err(format!("layer `{}` needs positive channels and stride", l.id));
            }

            let mut srcs = Vec::with_capacity(l.inputs.len());
            for name in &l.inputs {
                let src = if name == INPUT {
                    Source::Input
                } else {
                    match index.get(name.as_str()) {
                        Some(&j) => Source::Layer(j),
                        None => {
                            return err(format!(
                                "layer `{}` reads `{name}`, which is not an earlier layer",
                                l.id
                            ))
                        }
                    }
                };
                let shape = match src {
                    Source::Input => self.input_shape.clone(),
                    Source::Layer(j) => {
                        consumers[j].push(i);
                        shapes[j].clone()
                    }
                };
                if shape[0] != l.in_channels {
                    return Err(Error::ChannelMismatch {
                        edge: format!("{name} -> {}", l.id),
                        produced: shape[0],
                        expected: l.in_channels,
                    });
                }
                srcs.push((src, shape));
            }
            let in_shape = srcs[0].1.clone();
            if srcs.iter().any(|(_, s)| *s != in_shape) {
                return err(format!("residual junction `{}` sums tensors of different shapes", l.id));
            }
            let out_shape = match l.kind {
                LayerKind::Conv2d => {
                    let Some([kh, kw]) = l.kernel else {
                        return err(format!("conv2d `{}` needs a kernel", l.id));
                    };
                    if in_shape.len() != 3 {
                        return err(format!("conv2d `{}` needs [C, H, W] input, got {in_shape:?}", l.id));
                    }
                    if l.adaptable && (kh % 2 == 0 || kw % 2 == 0) {
                        return err(format!("adaptable conv2d `{}` needs an odd kernel", l.id));
                    }
                    let (h, w) = (in_shape[1] + 2 * l.padding, in_shape[2] + 2 * l.padding);
                    if h < kh || w < kw {
                        return err(format!("conv2d `{}` kernel exceeds its padded input", l.id));
                    }
                    vec![l.out_channels, (h - kh) / l.stride + 1, (w - kw) / l.stride + 1]
                }
                LayerKind::Linear | LayerKind::Head => {
                    if in_shape.len() != 1 {
                        return err(format!("{:?} `{}` needs flat input, got {in_shape:?}", l.kind, l.id));
                    }
                    vec![l.out_channels]
                }
                LayerKind::Pool => {
                    if in_shape.len() != 3 {
                        return err(format!("pool `{}` needs [C, H, W] input", l.id));
                    }
                    vec![l.out_channels]
                }
                LayerKind::Batchnorm | LayerKind::Relu | LayerKind::Add => {
                    if l.out_channels != l.in_channels {
                        return err(format!("layer `{}` must preserve its channel count", l.id));
                    }
                    in_shape.clone()
                }
            };
            index.insert(l.id.as_str(), i);
            inputs.push(srcs.iter().map(|(s, _)| *s).collect::<Vec<_>>());
            in_shapes.push(in_shape);
            shapes.push(out_shape);
        }

        let heads: Vec<usize> = (0..n).filter(|&i| self.layers[i].kind == LayerKind::Head).collect();
        if heads != [n - 1] {
            return err("the last layer, and only the last layer, must be the head".into());
        }
        if self.layers[n - 1].out_channels != self.num_classes {
            return err(format!(
                "head has {} outputs but num_classes is {}",
                self.layers[n - 1].out_channels,
                self.num_classes
            ));
        }
        if let Some(i) = (0..n - 1).find(|&i| consumers[i].is_empty()) {
            return err(format!("layer `{}` is not connected to the output", self.layers[i].id));
        }

        // Channel groups: declared residual groups first, then singleton
        // prunable layers, ordered by first member.
        let mut group_of: Vec<Option<usize>> = vec![None; n];
        let mut groups: Vec<Vec<usize>> = vec![];
        let mut seen: HashSet<usize> = HashSet::new();
        for (g, members) in self.residual_groups.iter().enumerate() {
            if members.is_empty() {
                return err(format!("residual group {g} is empty"));
            }
            let mut idx = Vec::with_capacity(members.len());
            for id in members {
                let Some(&i) = index.get(id.as_str()) else {
                    return err(format!("residual group {g} names unknown layer `{id}`"));
                };
                if !matches!(self.layers[i].kind, LayerKind::Linear | LayerKind::Conv2d) {
                    return err(format!("residual group {g} member `{id}` is not a linear or conv2d layer"));
                }
                if !seen.insert(i) {
                    return err(format!("layer `{id}` appears in more than one residual group"));
                }
                idx.push(i);
            }
            let width = self.layers[idx[0]].out_channels;
            if let Some(&bad) = idx.iter().find(|&&i| self.layers[i].out_channels != width) {
                return err(format!(
                    "residual group {g} mixes widths: `{}` has {} channels, `{}` has {}",
                    self.layers[idx[0]].id,
                    width,
                    self.layers[bad].id,
                    self.layers[bad].out_channels
                ));
            }
            let prunable = self.layers[idx[0]].prunable;
            if idx.iter().any(|&i| self.layers[i].prunable != prunable) {
                return err(format!("residual group {g} mixes prunable and fixed layers"));
            }
            if prunable {
                idx.sort_unstable();
                groups.push(idx);
            }
        }
        for i in 0..n {
            if self.layers[i].prunable && !seen.contains(&i) {
                groups.push(vec![i]);
            }
        }
        groups.sort_by_key(|g| g[0]);
        for (g, members) in groups.iter().enumerate() {
            for &i in members {
                group_of[i] = Some(g);
            }
        }

        // Propagate output-channel ownership through pass-through layers and
        // check that every residual junction is mask-coupled.
        let mut out_group: Vec<Option<usize>> = vec![None; n];
        let mut in_group: Vec<Option<usize>> = vec![None; n];
        for i in 0..n {
            let l = &self.layers[i];
            let src_group = |s: &Source| match s {
                Source::Input => None,
                Source::Layer(j) => out_group[*j],
            };
            in_group[i] = inputs[i].first().and_then(src_group);
            match l.kind {
                LayerKind::Linear | LayerKind::Conv2d | LayerKind::Head => {
                    out_group[i] = group_of[i];
                }
                LayerKind::Add => {
                    let gs: Vec<Option<usize>> = inputs[i].iter().map(src_group).collect();
                    if gs.iter().any(|g| *g != gs[0]) {
                        let names: Vec<&str> = l.inputs.iter().map(String::as_str).collect();
                        return err(format!(
                            "residual junction `{}` adds {names:?}, whose producers are not in one residual group",
                            l.id
                        ));
                    }
                    out_group[i] = gs[0];
                }
                _ => out_group[i] = in_group[i],
            }
        }

        let norm_after = (0..n)
            .map(|i| match consumers[i].as_slice() {
                [c] if self.layers[i].kind.has_weight()
                    && self.layers[*c].kind == LayerKind::Batchnorm =>
                {
                    Some(*c)
                }
                _ => None,
            })
            .collect();

        Ok(Topology {
            inputs,
            shapes,
            in_shapes,
            groups,
            out_group,
            in_group,
            norm_after,
            consumers,
        })
    }

    /// Total weight entries over every linear/conv/head layer (no biases).
    pub fn weight_entries(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.kind.has_weight())
            .map(|l| l.in_channels * l.out_channels * l.taps())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MLP: &str = r#"
schema_version = 1
name = "mlp"
input_shape = [4]
num_classes = 2

[[layers]]
id = "fc1"
kind = "linear"
in_channels = 4
out_channels = 8
adaptable = true
prunable = true

[[layers]]
id = "act"
kind = "relu"

[[layers]]
id = "head"
kind = "head"
in_channels = 8
out_channels = 2
"#;

    #[test]
    fn parses_and_fills_defaults() {
        let m = ArchitectureManifest::from_toml(MLP).unwrap();
        assert_eq!(m.layers[1].inputs, vec!["fc1"]);
        assert_eq!(m.layers[1].in_channels, 8);
        let topo = m.validate().unwrap();
        assert_eq!(topo.groups, vec![vec![0]]);
        assert_eq!(topo.in_group[2], Some(0));
        assert_eq!(topo.shapes[2], vec![2]);
    }

    #[test]
    fn canonical_text_round_trips_and_hash_is_stable() {
        let m = ArchitectureManifest::from_toml(MLP).unwrap();
        let again = ArchitectureManifest::from_toml(&m.canonical_text()).unwrap();
        assert_eq!(m, again);
        assert_eq!(m.architecture_hash(), again.architecture_hash());
        let mut other = m.clone();
        other.layers[0].out_channels = 9;
        other.layers[2].in_channels = 9;
        assert_ne!(m.architecture_hash(), other.architecture_hash());
    }

    #[test]
    fn channel_mismatch_names_edge() {
        let text = MLP.replace("in_channels = 8\nout_channels = 2", "in_channels = 7\nout_channels = 2");
        match ArchitectureManifest::from_toml(&text) {
            Err(Error::ChannelMismatch { edge, produced: 8, expected: 7 }) => {
                assert_eq!(edge, "act -> head")
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_wrong_schema_version() {
        let text = MLP.replace("schema_version = 1", "schema_version = 2");
        assert!(matches!(ArchitectureManifest::from_toml(&text), Err(Error::Manifest(_))));
    }

    #[test]
    fn rejects_adaptable_norm() {
        let text = MLP.replace("kind = \"relu\"", "kind = \"batchnorm\"\nadaptable = true");
        assert!(ArchitectureManifest::from_toml(&text).is_err());
    }

    #[test]
    fn rejects_forward_reference() {
        let text = MLP.replace("kind = \"relu\"", "kind = \"relu\"\ninputs = [\"head\"]");
        assert!(ArchitectureManifest::from_toml(&text).is_err());
    }
}
