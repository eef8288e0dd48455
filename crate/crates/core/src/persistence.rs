//! SPAD task-delta files.
//!
//! A delta holds what one task adds to a shared frozen base: adapter factors,
//! channel masks, normalisation and head tensors. Fine-tuning checkpoints and
//! fused models use the same container with dense weight sections. The byte
//! layout is described in `docs/spad-format.md`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::adapter::{LoraLayer, SploraLayer};
use crate::compute::Tensor;
use crate::error::{Error, Result};
use crate::mask::ChannelMask;
use crate::network::{
    ArchitectureManifest, ChannelMaskSet, LayerKind, LayerParams, Mode, Network, NormParams, WeightParam,
};
use crate::pruning::Criterion;

pub const MAGIC: &[u8; 4] = b"SPAD";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 1 + 1 + 32 + 4 + 4;
const NO_CRITERION: u8 = 0xff;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u8)]
pub enum SectionTag {
    Masks = 1,
    Adapter = 2,
    Norm = 3,
    Head = 4,
    Dense = 5,
    Manifest = 6,
}

impl SectionTag {
    fn from_u8(b: u8) -> Result<Self> {
        Ok(match b {
            1 => Self::Masks,
            2 => Self::Adapter,
            3 => Self::Norm,
            4 => Self::Head,
            5 => Self::Dense,
            6 => Self::Manifest,
            _ => return Err(Error::Malformed(format!("unknown section tag {b}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub version: u16,
    pub mode: Mode,
    pub criterion: Option<Criterion>,
    pub architecture_hash: [u8; 32],
    pub density: f32,
}

/// Location of one section inside an encoded file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SectionInfo {
    pub tag: SectionTag,
    pub layer: u32,
    /// Payload bytes, excluding the 9-byte section prefix.
    pub len: usize,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn mode_byte(mode: Mode) -> u8 {
    match mode {
        Mode::Finetune => 0,
        Mode::Splora { .. } => 1,
        Mode::Lora { .. } => 2,
    }
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f32s<'a>(&mut self, vals: impl IntoIterator<Item = &'a f64>) {
        for v in vals {
            self.0.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fn bitset(&mut self, m: &ChannelMask) {
        let mut bytes = vec![0u8; m.len().div_ceil(8)];
        for (i, &b) in m.as_bools().iter().enumerate() {
            if b {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        self.0.extend_from_slice(&bytes);
    }
    fn section(&mut self, tag: SectionTag, layer: usize, payload: Writer) {
        self.u8(tag as u8);
        self.u32(layer);
        self.u32(payload.0.len());
        self.0.extend_from_slice(&payload.0);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Truncated(format!("{what} needs {n} bytes at offset {}, file has {}", self.pos, self.buf.len()))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Malformed(format!("{what}: size overflow")))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
    fn tensor(&mut self, shape: &[usize], what: &str) -> Result<Tensor> {
        let data = self.f32s(shape.iter().product(), what)?;
        Tensor::new(shape, data)
    }
    fn bitset(&mut self, len: usize, what: &str) -> Result<ChannelMask> {
        let bytes = self.take(len.div_ceil(8), what)?;
        Ok(ChannelMask::from_bools((0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()))
    }
    fn done(&self, what: &str) -> Result<()> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            extra => Err(Error::Malformed(format!("{what}: {extra} trailing bytes"))),
        }
    }
}

/// Encodes `net`. Adapter modes store only what the task adds to the base;
/// fine-tuning mode stores every weight densely. `with_manifest` embeds the
/// manifest so the file loads without a base.
pub fn encode(net: &Network, criterion: Option<&Criterion>, with_manifest: bool) -> Result<Vec<u8>> {
    let m = net.manifest();
    let topo = net.topology();
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u16(FORMAT_VERSION);
    w.u8(mode_byte(net.mode()));
    w.u8(criterion.map_or(NO_CRITERION, Criterion::id));
    w.0.extend_from_slice(&m.architecture_hash());
    w.u32(net.mode().rank());
    w.0.extend_from_slice(&(net.weight_density() as f32).to_le_bytes());

    let mut body = Writer::default();
    let mut sections = 0;
    if with_manifest {
        let mut p = Writer::default();
        p.0.extend_from_slice(m.canonical_text().as_bytes());
        body.section(SectionTag::Manifest, 0, p);
        sections += 1;
    }
    let mut p = Writer::default();
    p.u32(topo.groups.len());
    for g in net.masks().groups() {
        p.u32(g.len());
        p.bitset(g);
    }
    body.section(SectionTag::Masks, 0, p);
    sections += 1;

    for (i, lp) in net.layers().iter().enumerate() {
        let mut p = Writer::default();
        let tag = match lp {
            LayerParams::Weight(WeightParam::Splora(s)) => {
                p.u32(s.rows());
                p.u32(s.cols());
                p.u32(s.rank());
                p.bitset(s.row_mask());
                p.bitset(s.col_mask());
                p.f32s(s.down().data());
                p.f32s(s.up().data());
                SectionTag::Adapter
            }
            LayerParams::Weight(WeightParam::Lora(l)) => {
                let (n, m) = (l.down.shape()[0], l.up.shape()[1]);
                p.u32(n);
                p.u32(m);
                p.u32(l.rank());
                p.bitset(&ChannelMask::full(n));
                p.bitset(&ChannelMask::full(m));
                p.f32s(l.down.data());
                p.f32s(l.up.data());
                SectionTag::Adapter
            }
            LayerParams::Weight(WeightParam::Frozen(_)) => continue,
            LayerParams::Weight(WeightParam::Dense(_)) => {
                let t = net.effective_weight(i).expect("weight layer");
                p.u32(t.shape().len());
                for &d in t.shape() {
                    p.u32(d);
                }
                p.f32s(t.data());
                SectionTag::Dense
            }
            LayerParams::Norm(n) => {
                p.u32(n.gamma.numel());
                p.f32s(n.gamma.data());
                p.f32s(n.beta.data());
                p.f32s(&n.running_mean);
                p.f32s(&n.running_var);
                SectionTag::Norm
            }
            LayerParams::Head { weight, bias } => {
                p.u32(weight.shape()[0]);
                p.u32(weight.shape()[1]);
                p.f32s(weight.data());
                p.f32s(bias.data());
                SectionTag::Head
            }
            LayerParams::Stateless => continue,
        };
        body.section(tag, i, p);
        sections += 1;
    }
    w.u32(sections);
    w.0.extend_from_slice(&body.0);
    Ok(w.0)
}

pub fn read_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() >= 4 && &bytes[..4] != MAGIC || bytes.len() < 4 && !MAGIC.starts_with(bytes) {
        return Err(Error::BadMagic);
    }
    let mut r = Reader::new(bytes);
    r.take(4, "magic")?;
    let version = r.u16("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mode = r.u8("mode")?;
    let crit = r.u8("criterion id")?;
    let mut architecture_hash = [0u8; 32];
    architecture_hash.copy_from_slice(r.take(32, "architecture hash")?);
    let rank = r.u32("rank")?;
    let density = f32::from_le_bytes(r.take(4, "density")?.try_into().unwrap());
    let mode = match mode {
        0 => Mode::Finetune,
        1 => Mode::Splora { rank },
        2 => Mode::Lora { rank },
        b => return Err(Error::Malformed(format!("unknown mode byte {b}"))),
    };
    let criterion = match crit {
        NO_CRITERION => None,
        id => Some(Criterion::from_id(id).ok_or_else(|| Error::Malformed(format!("unknown criterion id {id}")))?),
    };
    Ok(Header {
        version,
        mode,
        criterion,
        architecture_hash,
        density,
    })
}

type SectionMap<'a> = BTreeMap<(SectionTag, usize), &'a [u8]>;

fn split_sections(bytes: &[u8]) -> Result<(Header, SectionMap<'_>)> {
    let header = read_header(bytes)?;
    let mut r = Reader::new(bytes);
    r.take(HEADER_LEN, "header")?;
    let count = r.u32("section count")?;
    let mut out = BTreeMap::new();
    for k in 0..count {
        let tag = SectionTag::from_u8(r.u8("section tag")?)?;
        let layer = r.u32("section layer")?;
        let len = r.u32("section length")?;
        let payload = r.take(len, &format!("section {k} ({tag:?}, layer {layer})"))?;
        if out.insert((tag, layer), payload).is_some() {
            return Err(Error::Malformed(format!("duplicate {tag:?} section for layer {layer}")));
        }
    }
    r.done("file")?;
    Ok((header, out))
}

/// Section table of an encoded file, in file order.
pub fn sections(bytes: &[u8]) -> Result<Vec<SectionInfo>> {
    read_header(bytes)?;
    let mut r = Reader::new(bytes);
    r.take(HEADER_LEN, "header")?;
    let count = r.u32("section count")?;
    (0..count)
        .map(|_| {
            let tag = SectionTag::from_u8(r.u8("section tag")?)?;
            let layer = r.u32("section layer")? as u32;
            let len = r.u32("section length")?;
            r.take(len, "section payload")?;
            Ok(SectionInfo { tag, layer, len })
        })
        .collect()
}

fn decode_layers(
    header: &Header,
    secs: &BTreeMap<(SectionTag, usize), &[u8]>,
    manifest: &ArchitectureManifest,
    base: Option<&Network>,
) -> Result<Network> {
    let topo = manifest.validate()?;
    let masks = {
        let payload = secs
            .get(&(SectionTag::Masks, 0))
            .ok_or_else(|| Error::Malformed("missing mask section".into()))?;
        let mut r = Reader::new(payload);
        let groups = r.u32("group count")?;
        let mut ms = Vec::with_capacity(groups.min(topo.groups.len()));
        for g in 0..groups {
            let len = r.u32("group width")?;
            ms.push(r.bitset(len, &format!("group {g} mask"))?);
        }
        r.done("mask section")?;
        ChannelMaskSet::from_masks(manifest, &topo, ms)?
    };
    let mut wanted = vec![];
    let mut take = |tag: SectionTag, i: usize| -> Result<&[u8]> {
        wanted.push((tag, i));
        secs.get(&(tag, i))
            .copied()
            .ok_or_else(|| Error::Malformed(format!("missing {tag:?} section for layer `{}`", manifest.layers[i].id)))
    };

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, spec) in manifest.layers.iter().enumerate() {
        let what = |part: &str| format!("{part} of `{}`", spec.id);
        let lp = match spec.kind {
            LayerKind::Linear | LayerKind::Conv2d => {
                let adapter = header.mode != Mode::Finetune && spec.adaptable;
                let w = if header.mode == Mode::Finetune {
                    let mut r = Reader::new(take(SectionTag::Dense, i)?);
                    let nd = r.u32(&what("rank"))?;
                    let shape = (0..nd).map(|_| r.u32(&what("shape"))).collect::<Result<Vec<_>>>()?;
                    let t = r.tensor(&shape, &what("weight"))?;
                    r.done(&what("dense section"))?;
                    let expected = base_shape(spec);
                    if t.shape() != expected {
                        return Err(Error::Malformed(format!("{}: shape {:?}, expected {expected:?}", what("weight"), t.shape())));
                    }
                    WeightParam::Dense(Arc::new(t))
                } else {
                    let source = base.and_then(|b| b.shared_weight(i)).ok_or_else(|| {
                        Error::InvalidArgument(format!("adapter delta needs a base network for `{}`", spec.id))
                    })?;
                    if !adapter {
                        WeightParam::Frozen(source)
                    } else {
                        let mut r = Reader::new(take(SectionTag::Adapter, i)?);
                        let (n, m, rank) = (r.u32(&what("rows"))?, r.u32(&what("cols"))?, r.u32(&what("rank"))?);
                        if n != spec.out_channels || m != spec.in_channels {
                            return Err(Error::Malformed(format!("{}: {n}×{m} adapter on a {}×{} layer", spec.id, spec.out_channels, spec.in_channels)));
                        }
                        let row = r.bitset(n, &what("row mask"))?;
                        let col = r.bitset(m, &what("column mask"))?;
                        let down = r.tensor(&[n, rank], &what("down factor"))?;
                        let up = r.tensor(&[rank, m], &what("up factor"))?;
                        r.done(&what("adapter section"))?;
                        match header.mode {
                            Mode::Splora { .. } => {
                                if row != masks.row_mask(manifest, &topo, i) || col != masks.col_mask(manifest, &topo, i) {
                                    return Err(Error::Malformed(format!("{}: masks disagree with the group masks", spec.id)));
                                }
                                WeightParam::Splora(SploraLayer::from_parts(source, down, up, row, col)?)
                            }
                            _ => WeightParam::Lora(LoraLayer::from_parts(source, down, up)?),
                        }
                    }
                };
                LayerParams::Weight(w)
            }
            LayerKind::Batchnorm => {
                let mut r = Reader::new(take(SectionTag::Norm, i)?);
                let c = r.u32(&what("channels"))?;
                if c != spec.out_channels {
                    return Err(Error::Malformed(format!("{}: {c} channels, expected {}", spec.id, spec.out_channels)));
                }
                let n = NormParams {
                    gamma: r.tensor(&[c], &what("gamma"))?,
                    beta: r.tensor(&[c], &what("beta"))?,
                    running_mean: r.f32s(c, &what("running mean"))?,
                    running_var: r.f32s(c, &what("running variance"))?,
                };
                r.done(&what("norm section"))?;
                LayerParams::Norm(n)
            }
            LayerKind::Head => {
                let mut r = Reader::new(take(SectionTag::Head, i)?);
                let (n, m) = (r.u32(&what("rows"))?, r.u32(&what("cols"))?);
                if n != spec.out_channels || m != spec.in_channels {
                    return Err(Error::Malformed(format!("{}: {n}×{m} head, expected {}×{}", spec.id, spec.out_channels, spec.in_channels)));
                }
                let weight = r.tensor(&[n, m], &what("weight"))?;
                let bias = r.tensor(&[n], &what("bias"))?;
                r.done(&what("head section"))?;
                LayerParams::Head { weight, bias }
            }
            _ => LayerParams::Stateless,
        };
        layers.push(lp);
    }
    if let Some((tag, i)) = secs
        .keys()
        .find(|k| !matches!(k.0, SectionTag::Masks | SectionTag::Manifest) && !wanted.contains(k))
    {
        return Err(Error::Malformed(format!("stray {tag:?} section for layer {i}")));
    }
    Network::from_parts(manifest, header.mode, layers, masks)
}

fn base_shape(spec: &crate::network::LayerSpec) -> Vec<usize> {
    match spec.kind {
        LayerKind::Conv2d => {
            let [kh, kw] = spec.kernel.unwrap_or([1, 1]);
            vec![spec.out_channels, spec.in_channels, kh, kw]
        }
        _ => vec![spec.out_channels, spec.in_channels],
    }
}

/// Rebuilds a task network on `base`. The base is only read; frozen weights
/// are shared with it.
pub fn decode(base: &Network, bytes: &[u8]) -> Result<Network> {
    let (header, secs) = split_sections(bytes)?;
    let expected = base.manifest().architecture_hash();
    if header.architecture_hash != expected {
        return Err(Error::ArchitectureMismatch {
            file: hex(&header.architecture_hash),
            base: hex(&expected),
        });
    }
    decode_layers(&header, &secs, base.manifest(), Some(base))
}

/// Loads a self-contained fine-tuning or fused model with its embedded manifest.
pub fn decode_model(bytes: &[u8]) -> Result<Network> {
    let (header, secs) = split_sections(bytes)?;
    if header.mode != Mode::Finetune {
        return Err(Error::InvalidArgument(format!("{} file needs a base network", header.mode)));
    }
    let text = secs
        .get(&(SectionTag::Manifest, 0))
        .ok_or_else(|| Error::Malformed("no embedded manifest".into()))?;
    let text = std::str::from_utf8(text).map_err(|e| Error::Malformed(format!("manifest text: {e}")))?;
    let manifest = ArchitectureManifest::from_toml(text)?;
    if manifest.architecture_hash() != header.architecture_hash {
        return Err(Error::ArchitectureMismatch {
            file: hex(&header.architecture_hash),
            base: hex(&manifest.architecture_hash()),
        });
    }
    decode_layers(&header, &secs, &manifest, None)
}

/// Writes `net` to `path`. Fine-tuning networks embed their manifest.
pub fn save_delta(net: &Network, criterion: Option<&Criterion>, path: impl AsRef<Path>) -> Result<usize> {
    let bytes = encode(net, criterion, net.mode() == Mode::Finetune)?;
    std::fs::write(path, &bytes)?;
    Ok(bytes.len())
}

pub fn load_delta(base: &Network, path: impl AsRef<Path>) -> Result<Network> {
    decode(base, &std::fs::read(path)?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    decode_model(&std::fs::read(path)?)
}

/// SHA-256 over every fused weight, normalisation, and head value of `net`.
/// Equal fingerprints mean bit-identical inference.
pub fn fingerprint(net: &Network) -> [u8; 32] {
    let mut h = Sha256::new();
    let mut feed = |vals: &[f64]| {
        for v in vals {
            h.update(v.to_le_bytes());
        }
    };
    for (i, lp) in net.layers().iter().enumerate() {
        match lp {
            LayerParams::Weight(_) => feed(net.effective_weight(i).expect("weight layer").data()),
            LayerParams::Norm(n) => {
                feed(n.gamma.data());
                feed(n.beta.data());
                feed(&n.running_mean);
                feed(&n.running_var);
            }
            LayerParams::Head { weight, bias } => {
                feed(weight.data());
                feed(bias.data());
            }
            LayerParams::Stateless => {}
        }
    }
    h.finalize().into()
}

pub fn fingerprint_hex(net: &Network) -> String {
    hex(&fingerprint(net))
}

/// One shared base with at most one task delta active on top of it.
#[derive(Debug)]
pub struct TaskSwitcher {
    base: Network,
    active: Option<Network>,
}

impl TaskSwitcher {
    pub fn new(base: Network) -> Self {
        Self { base, active: None }
    }

    pub fn base(&self) -> &Network {
        &self.base
    }

    pub fn active(&self) -> Option<&Network> {
        self.active.as_ref()
    }

    /// Replaces the active task with the delta at `path`.
    pub fn switch_task(&mut self, path: impl AsRef<Path>) -> Result<&Network> {
        let net = load_delta(&self.base, path)?;
        Ok(self.active.insert(net))
    }
}
