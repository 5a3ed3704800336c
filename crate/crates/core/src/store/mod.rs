//! The packed on-flash weight store ("AWSP").
//!
//! Layers are packed in groups of `N`. Inside a group the payload is ordered
//! by operator, then channel, then layer, so one channel of one operator for
//! every layer of the group is a single contiguous range:
//!
//! ```text
//! [op Q: ch0 L0 | ch0 L1 | … | ch0 L(N-1) | ch1 L0 | …] [op K: …] … [op DOWN: …]
//! ```
//!
//! File layout (little-endian): `"AWSP"`, `u32` version, `u64` header length,
//! the JSON [`StoreHeader`], then the payload. Payload offsets in the header
//! are relative to the payload start. The embedding and output head are
//! stored first as plain column-major tensors.

mod bandwidth;

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use bandwidth::{simulate_read_time, BandwidthModel, PROFILE_ENV};

use crate::error::{Error, Result};
use crate::model::{Backbone, DType, Model, ModelSpec, OpId, OpType, WeightTensor, BACKBONE_LAYER};

pub const MAGIC: &[u8; 4] = b"AWSP";
pub const VERSION: u32 = 1;

/// Shared, immutable bytes of one per-layer channel slot.
pub type Payload = Arc<[u8]>;

/// Sizes of the I/O requests issued by one read call.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadStats {
    pub requests: Vec<u64>,
}

impl ReadStats {
    pub fn n_requests(&self) -> usize {
        self.requests.len()
    }

    pub fn total_bytes(&self) -> u64 {
        self.requests.iter().sum()
    }

    pub fn merge(&mut self, other: &ReadStats) {
        self.requests.extend_from_slice(&other.requests);
    }
}

/// Maximal runs of consecutive values in a strictly increasing list, as
/// `(first, len)`.
pub fn coalesce_runs(sorted: &[u32]) -> Vec<(u32, u32)> {
    let mut runs: Vec<(u32, u32)> = Vec::new();
    for &v in sorted {
        match runs.last_mut() {
            Some((start, len)) if *start + *len == v => *len += 1,
            _ => runs.push((v, 1)),
        }
    }
    runs
}

/// The requests that reading `channels` (strictly increasing) of one operator
/// would issue when each channel spans `layers` adjacent slots of
/// `channel_bytes`. `layers = 1` models a per-layer layout for one layer.
pub fn channel_read_stats(channels: &[u32], layers: usize, channel_bytes: usize) -> ReadStats {
    let unit = (layers * channel_bytes) as u64;
    ReadStats { requests: coalesce_runs(channels).iter().map(|&(_, n)| u64::from(n) * unit).collect() }
}

/// Placement of one operator's channels inside a group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpLayout {
    pub op: OpType,
    /// Start of this operator's region, relative to the payload start.
    pub offset: u64,
    pub channel_bytes: u64,
    /// Bytes between the starts of channel `c` and `c + 1` (`n_layers × channel_bytes`).
    pub channel_stride: u64,
    pub channels: usize,
}

impl OpLayout {
    pub fn bytes(&self) -> u64 {
        self.channel_stride * self.channels as u64
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupLayout {
    pub group_id: usize,
    pub first_layer: usize,
    /// Layers in this group; the last group may hold fewer than `N`.
    pub n_layers: usize,
    pub ops: Vec<OpLayout>,
}

impl GroupLayout {
    pub fn layers(&self) -> Range<usize> {
        self.first_layer..self.first_layer + self.n_layers
    }

    pub fn op(&self, op: OpType) -> &OpLayout {
        &self.ops[op.index()]
    }

    pub fn bytes(&self) -> u64 {
        self.ops.iter().map(OpLayout::bytes).sum()
    }
}

/// A resident (never swapped) tensor of the backbone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidentEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreHeader {
    pub spec: ModelSpec,
    pub weight_scale: f32,
    pub group_size: usize,
    pub resident: Vec<ResidentEntry>,
    pub groups: Vec<GroupLayout>,
    pub payload_bytes: u64,
}

impl StoreHeader {
    /// Computes the layout of a store for `spec` with groups of `group_size`.
    pub fn layout(spec: &ModelSpec, weight_scale: f32, group_size: usize) -> Result<Self> {
        spec.validate()?;
        if group_size == 0 || group_size > spec.n_layers {
            return Err(Error::input(format!("group size {group_size} outside 1..={}", spec.n_layers)));
        }
        let embed_bytes = (spec.hidden_dim * spec.vocab_size * 4) as u64;
        let resident = vec![
            ResidentEntry {
                name: "embed".into(),
                rows: spec.hidden_dim,
                cols: spec.vocab_size,
                offset: 0,
                nbytes: embed_bytes,
            },
            ResidentEntry {
                name: "lm_head".into(),
                rows: spec.vocab_size,
                cols: spec.hidden_dim,
                offset: embed_bytes,
                nbytes: embed_bytes,
            },
        ];
        let mut offset = 2 * embed_bytes;
        let mut groups = Vec::new();
        for (group_id, first_layer) in (0..spec.n_layers).step_by(group_size).enumerate() {
            let n_layers = group_size.min(spec.n_layers - first_layer);
            let ops = OpType::ALL
                .iter()
                .map(|&op| {
                    let channel_bytes = spec.channel_bytes(op) as u64;
                    let l = OpLayout {
                        op,
                        offset,
                        channel_bytes,
                        channel_stride: channel_bytes * n_layers as u64,
                        channels: op.input_dim(spec),
                    };
                    offset += l.bytes();
                    l
                })
                .collect();
            groups.push(GroupLayout { group_id, first_layer, n_layers, ops });
        }
        Ok(Self { spec: spec.clone(), weight_scale, group_size, resident, groups, payload_bytes: offset })
    }

    /// `(group, position within group)` of `layer`.
    pub fn locate(&self, layer: usize) -> (usize, usize) {
        (layer / self.group_size, layer % self.group_size)
    }
}

fn io_store(context: &str, e: std::io::Error) -> Error {
    Error::store(format!("{context}: {e}"))
}

/// Writes `model` as an AWSP store with groups of `group_size` layers.
pub fn pack(model: &Model, group_size: usize, path: &Path) -> Result<StoreHeader> {
    let header = StoreHeader::layout(model.spec(), model.weight_scale, group_size)?;
    let json = serde_json::to_vec(&header)?;
    let write = |header: &StoreHeader| -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&model.backbone.embed.data)?;
        w.write_all(&model.backbone.lm_head.data)?;
        for g in &header.groups {
            for op in OpType::ALL {
                for c in 0..op.input_dim(&header.spec) {
                    for l in g.layers() {
                        w.write_all(model.tensor(OpId::new(l, op)).channel(c))?;
                    }
                }
            }
        }
        w.into_inner().map_err(|e| e.into_error())?.sync_all()
    };
    write(&header).map_err(|e| io_store(&format!("writing {}", path.display()), e))?;
    Ok(header)
}

/// How [`PackedStore`] serves reads.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IoMode {
    /// Positioned reads against the file for every request.
    Real,
    /// The payload is loaded into memory once; requests copy from it.
    Sim,
}

impl FromStr for IoMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(IoMode::Real),
            "sim" => Ok(IoMode::Sim),
            _ => Err(Error::input(format!("unknown mode {s:?} (expected real or sim)"))),
        }
    }
}

#[derive(Debug)]
enum Backing {
    File(File),
    Memory(Vec<u8>),
}

#[cfg(unix)]
fn read_at(file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    std::os::unix::fs::FileExt::read_exact_at(file, buf, offset)
}

#[cfg(windows)]
fn read_at(file: &File, mut buf: &mut [u8], mut offset: u64) -> std::io::Result<()> {
    use std::os::windows::fs::FileExt;
    while !buf.is_empty() {
        match file.seek_read(buf, offset)? {
            0 => return Err(std::io::ErrorKind::UnexpectedEof.into()),
            n => {
                buf = &mut buf[n..];
                offset += n as u64;
            }
        }
    }
    Ok(())
}

/// Channel data returned by [`PackedStore::read_channels`].
#[derive(Clone, Debug)]
pub struct ChannelData {
    pub channels: Vec<u32>,
    /// `data[i][li]`: channel `channels[i]` of the group's `li`-th layer.
    pub data: Vec<Vec<Payload>>,
    pub stats: ReadStats,
}

/// A read-only handle to an AWSP store. Safe to share between readers.
#[derive(Debug)]
pub struct PackedStore {
    header: StoreHeader,
    payload_start: u64,
    backing: Backing,
    mode: IoMode,
}

impl PackedStore {
    pub fn open(path: &Path, mode: IoMode) -> Result<Self> {
        let ctx = |e| io_store(&format!("opening {}", path.display()), e);
        let mut file = File::open(path).map_err(ctx)?;
        let file_len = file.metadata().map_err(ctx)?.len();
        let mut prefix = [0u8; 16];
        file.read_exact(&mut prefix).map_err(|_| Error::format("file too short for an AWSP header"))?;
        if &prefix[..4] != MAGIC {
            return Err(Error::format("bad magic, not an AWSP store"));
        }
        let version = u32::from_le_bytes(prefix[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::format(format!("unsupported AWSP version {version}")));
        }
        let header_len = u64::from_le_bytes(prefix[8..16].try_into().expect("8 bytes"));
        if header_len > file_len.saturating_sub(16) {
            return Err(Error::format("header length exceeds file length"));
        }
        let mut json = vec![0u8; header_len as usize];
        file.read_exact(&mut json).map_err(ctx)?;
        let header: StoreHeader =
            serde_json::from_slice(&json).map_err(|e| Error::format(format!("AWSP header: {e}")))?;
        let expected = StoreHeader::layout(&header.spec, header.weight_scale, header.group_size)
            .map_err(|e| Error::format(format!("AWSP header: {e}")))?;
        if expected != header {
            return Err(Error::format("AWSP layout table is inconsistent with its spec and group size"));
        }
        let payload_start = 16 + header_len;
        if payload_start + header.payload_bytes != file_len {
            return Err(Error::format(format!(
                "payload is {} bytes, header says {}",
                file_len - payload_start,
                header.payload_bytes
            )));
        }
        let backing = match mode {
            IoMode::Real => Backing::File(file),
            IoMode::Sim => {
                let mut payload = Vec::with_capacity(header.payload_bytes as usize);
                file.read_to_end(&mut payload).map_err(ctx)?;
                Backing::Memory(payload)
            }
        };
        Ok(Self { header, payload_start, backing, mode })
    }

    pub fn header(&self) -> &StoreHeader {
        &self.header
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.header.spec
    }

    pub fn group_size(&self) -> usize {
        self.header.group_size
    }

    pub fn n_groups(&self) -> usize {
        self.header.groups.len()
    }

    pub fn group(&self, g: usize) -> Result<&GroupLayout> {
        self.header
            .groups
            .get(g)
            .ok_or_else(|| Error::input(format!("group {g} out of range ({} groups)", self.n_groups())))
    }

    pub fn mode(&self) -> IoMode {
        self.mode
    }

    fn read_range(&self, offset: u64, len: u64) -> Result<Vec<u8>> {
        let end = offset.checked_add(len).filter(|&e| e <= self.header.payload_bytes);
        if end.is_none() {
            return Err(Error::store(format!("read of {len} bytes at {offset} beyond payload")));
        }
        match &self.backing {
            Backing::Memory(p) => Ok(p[offset as usize..(offset + len) as usize].to_vec()),
            Backing::File(f) => {
                let mut buf = vec![0u8; len as usize];
                read_at(f, &mut buf, self.payload_start + offset)
                    .map_err(|e| io_store(&format!("reading {len} bytes at {offset}"), e))?;
                Ok(buf)
            }
        }
    }

    /// Loads the embedding and output head.
    pub fn backbone(&self) -> Result<Backbone> {
        let spec = self.spec().clone();
        let op = OpId::new(BACKBONE_LAYER, OpType::Q);
        let read = |e: &ResidentEntry| -> Result<WeightTensor> {
            Ok(WeightTensor {
                op,
                rows: e.rows,
                cols: e.cols,
                dtype: DType::F32,
                data: self.read_range(e.offset, e.nbytes)?,
            })
        };
        let embed = read(&self.header.resident[0])?;
        let lm_head = read(&self.header.resident[1])?;
        Ok(Backbone { spec, embed, lm_head })
    }

    /// Reads individual per-layer slots of one operator in one group.
    ///
    /// Slot `c * n_layers + li` is channel `c` of the group's `li`-th layer;
    /// `slots` must be strictly increasing. Byte-adjacent slots are read with
    /// one request.
    pub fn read_slots(&self, group: usize, op: OpType, slots: &[u32]) -> Result<(Vec<Payload>, ReadStats)> {
        let g = self.group(group)?;
        let ol = g.op(op);
        let n_slots = (ol.channels * g.n_layers) as u64;
        if slots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::input("slots must be strictly increasing"));
        }
        if let Some(&s) = slots.last().filter(|&&s| u64::from(s) >= n_slots) {
            return Err(Error::input(format!("slot {s} out of range for {op} in group {group} ({n_slots} slots)")));
        }
        let cb = ol.channel_bytes;
        let mut out = Vec::with_capacity(slots.len());
        let mut stats = ReadStats::default();
        for (start, len) in coalesce_runs(slots) {
            let bytes = u64::from(len) * cb;
            let buf = self.read_range(ol.offset + u64::from(start) * cb, bytes)?;
            stats.requests.push(bytes);
            out.extend(buf.chunks_exact(cb as usize).map(Payload::from));
        }
        Ok((out, stats))
    }

    /// Reads whole channels (every layer of the group) of one operator.
    ///
    /// `channels` must be strictly increasing; adjacent channels share one
    /// request.
    pub fn read_channels(&self, group: usize, op: OpType, channels: &[u32]) -> Result<ChannelData> {
        let g = self.group(group)?;
        let n = g.n_layers as u32;
        if channels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::input("channels must be strictly increasing"));
        }
        if let Some(&c) = channels.last().filter(|&&c| c as usize >= g.op(op).channels) {
            return Err(Error::input(format!("channel {c} out of range for {op} ({})", g.op(op).channels)));
        }
        let slots: Vec<u32> = channels.iter().flat_map(|&c| (0..n).map(move |li| c * n + li)).collect();
        let (payloads, stats) = self.read_slots(group, op, &slots)?;
        let data = payloads.chunks(n as usize).map(<[Payload]>::to_vec).collect();
        Ok(ChannelData { channels: channels.to_vec(), data, stats })
    }

    /// Reconstructs the full model.
    pub fn unpack(&self) -> Result<Model> {
        let spec = self.spec().clone();
        let backbone = self.backbone()?;
        let mut layers: Vec<Vec<WeightTensor>> = Vec::with_capacity(spec.n_layers);
        for g in &self.header.groups {
            let mut per_layer: Vec<Vec<WeightTensor>> = vec![Vec::with_capacity(OpType::ALL.len()); g.n_layers];
            for ol in &g.ops {
                let region = self.read_range(ol.offset, ol.bytes())?;
                let cb = ol.channel_bytes as usize;
                for (li, tensors) in per_layer.iter_mut().enumerate() {
                    let mut data = Vec::with_capacity(cb * ol.channels);
                    for c in 0..ol.channels {
                        let at = (c * g.n_layers + li) * cb;
                        data.extend_from_slice(&region[at..at + cb]);
                    }
                    tensors.push(WeightTensor {
                        op: OpId::new(g.first_layer + li, ol.op),
                        rows: ol.op.output_dim(&spec),
                        cols: ol.channels,
                        dtype: spec.dtype,
                        data,
                    });
                }
            }
            layers.extend(per_layer);
        }
        Ok(Model { backbone, weight_scale: self.header.weight_scale, layers })
    }
}
