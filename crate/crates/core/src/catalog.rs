//! Per-block metadata built once per family and reused by every plan.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! magic "MPCATLG\0" | u32 version | u64 header_len | header JSON
//! u64 record_count | records | 32-byte SHA-256 of everything before it
//! ```
//!
//! A record is `expert u32, tensor u32 (index into the header's tensor
//! table), block u32, byte_cost u64, content_hash [32], flags u8,
//! delta_l2 f64` and records are sorted by `(expert, tensor name, block)`.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{BlockKey, CheckpointHandle};
use crate::costmodel::{AccessUnit, ExpertId};
use crate::delta_source::{DeltaIterator, DeltaSource, SourceKind};
use crate::digest::{Digest, Hasher};
use crate::error::{Error, Result};
use crate::meter::{Channel, ChannelKind, IoMeter};

pub const CATALOG_MAGIC: &[u8; 8] = b"MPCATLG\0";
pub const CATALOG_VERSION: u32 = 1;
const RECORD_BYTES: usize = 4 + 4 + 4 + 8 + 32 + 1 + 8;
const FLAG_HAS_STATS: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    pub byte_cost: u64,
    /// SHA-256 of the block's materialized delta (f32 little-endian).
    pub content_hash: Digest,
    pub delta_l2: Option<f64>,
    pub has_stats: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub expert: ExpertId,
    pub key: BlockKey,
    pub stats: BlockStats,
    pub base: Digest,
}

impl CatalogEntry {
    pub fn unit(&self) -> AccessUnit {
        AccessUnit::new(self.expert, self.key.clone())
    }
}

/// Identity of one expert in a catalog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertRecord {
    pub id: ExpertId,
    pub checkpoint_id: Digest,
    pub kind: SourceKind,
    /// Where the source was found when the catalog was built. Informational;
    /// not part of any digest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<String>,
}

impl ExpertRecord {
    pub fn of(id: ExpertId, source: &DeltaSource) -> Self {
        ExpertRecord {
            id,
            checkpoint_id: source.id(),
            kind: source.kind(),
            location: Some(source.handle().root().display().to_string()),
        }
    }
}

fn account(meter: &IoMeter, scratch: &IoMeter) {
    let spent = scratch.breakdown();
    if meter.in_run() {
        meter.add(ChannelKind::Base, spent.base_bytes);
        meter.add(ChannelKind::Expert, spent.expert_bytes);
    } else {
        meter.add(ChannelKind::Metadata, spent.base_bytes + spent.expert_bytes);
    }
}

/// Reads every block of `source` and records its cost, content hash and
/// delta norm. Reads are charged to the metadata channel, or to the base and
/// expert channels when `meter` is flagged as in-run.
pub fn analyze(
    base: &CheckpointHandle,
    source: &DeltaSource,
    expert: ExpertId,
    meter: &IoMeter,
) -> Result<Vec<CatalogEntry>> {
    let scratch = IoMeter::new();
    let mut entries = Vec::with_capacity(base.num_blocks_total());
    let sources = std::slice::from_ref(source);
    let result = (|| {
        for meta in base.tensors() {
            let iter = DeltaIterator::new(sources, base, &meta.name)?;
            for b in 0..meta.num_blocks() {
                let key = BlockKey::new(meta.name.clone(), b as u32);
                let base_block = base.read_block(&key, &scratch, Channel::Base)?;
                let tuple = iter.pull_masked(&base_block, &[true], &scratch)?;
                let delta = tuple.delta(0).expect("selected");
                let l2 = delta.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
                entries.push(CatalogEntry {
                    expert,
                    key,
                    stats: BlockStats {
                        byte_cost: source.unit_cost(meta, b),
                        content_hash: Digest::of(&crate::digest::f32_le_bytes(delta)),
                        delta_l2: Some(l2),
                        has_stats: true,
                    },
                    base: base.id(),
                });
            }
        }
        Ok(())
    })();
    account(meter, &scratch);
    result.map(|()| entries)
}

/// Header-only entries: byte costs and nothing else. Reads no payload bytes.
pub fn analyze_fallback(base: &CheckpointHandle, source: &DeltaSource, expert: ExpertId) -> Vec<CatalogEntry> {
    let mut entries = Vec::with_capacity(base.num_blocks_total());
    for meta in base.tensors() {
        for b in 0..meta.num_blocks() {
            entries.push(CatalogEntry {
                expert,
                key: BlockKey::new(meta.name.clone(), b as u32),
                stats: BlockStats {
                    byte_cost: source.unit_cost(meta, b),
                    content_hash: Digest([0; 32]),
                    delta_l2: None,
                    has_stats: false,
                },
                base: base.id(),
            });
        }
    }
    entries
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FileHeader {
    base: Digest,
    experts: Vec<ExpertRecord>,
    tensors: Vec<String>,
}

/// In-memory catalog: entries sorted by `(expert, tensor, block)` plus the
/// base id, expert identities and the base tensor order.
#[derive(Debug, Clone)]
pub struct Catalog {
    base: Digest,
    experts: Vec<ExpertRecord>,
    tensors: Vec<String>,
    entries: Vec<CatalogEntry>,
    index: HashMap<AccessUnit, usize>,
    universe: Digest,
}

impl PartialEq for Catalog {
    fn eq(&self, other: &Self) -> bool {
        self.base == other.base
            && self.experts == other.experts
            && self.tensors == other.tensors
            && self.entries == other.entries
    }
}

impl Catalog {
    /// `tensors` is the base checkpoint's tensor order.
    pub fn new(base: Digest, tensors: Vec<String>, experts: Vec<ExpertRecord>, mut entries: Vec<CatalogEntry>) -> Result<Self> {
        for (i, e) in experts.iter().enumerate() {
            if e.id.index() != i {
                return Err(Error::InvalidParameter(format!("expert {} listed at position {i}", e.id)));
            }
        }
        let tensor_set: std::collections::HashSet<&str> = tensors.iter().map(String::as_str).collect();
        if tensor_set.len() != tensors.len() {
            return Err(Error::InvalidParameter("duplicate tensor in catalog tensor table".into()));
        }
        entries.sort_by(|a, b| (a.expert, &a.key).cmp(&(b.expert, &b.key)));
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.base != base {
                return Err(Error::IntegrityMismatch {
                    what: format!("base id of catalog entry {}", e.unit()),
                    expected: base.to_hex(),
                    actual: e.base.to_hex(),
                });
            }
            if e.expert.index() >= experts.len() {
                return Err(Error::InvalidParameter(format!("entry for unknown expert {}", e.expert)));
            }
            if !tensor_set.contains(e.key.tensor.as_str()) {
                return Err(Error::UnknownTensor(e.key.tensor.clone()));
            }
            if let Some(d) = e.stats.delta_l2 {
                if d.is_nan() || d < 0.0 {
                    return Err(Error::InvalidParameter(format!("negative delta norm at {}", e.unit())));
                }
            }
            if index.insert(e.unit(), i).is_some() {
                return Err(Error::InvalidParameter(format!("duplicate catalog entry {}", e.unit())));
            }
        }
        let universe = universe_digest(&base, &experts, &entries);
        Ok(Catalog {
            base,
            experts,
            tensors,
            entries,
            index,
            universe,
        })
    }

    /// Analyzes every source against `base`, experts in parallel.
    pub fn build(base: &CheckpointHandle, sources: &[DeltaSource], meter: &IoMeter) -> Result<Self> {
        let per_expert: Vec<Vec<CatalogEntry>> = sources
            .par_iter()
            .enumerate()
            .map(|(i, s)| analyze(base, s, ExpertId(i as u32), meter))
            .collect::<Result<_>>()?;
        Self::from_parts(base, sources, per_expert.into_iter().flatten().collect())
    }

    /// Byte costs only, no statistics.
    pub fn build_fallback(base: &CheckpointHandle, sources: &[DeltaSource]) -> Result<Self> {
        let entries = sources
            .iter()
            .enumerate()
            .flat_map(|(i, s)| analyze_fallback(base, s, ExpertId(i as u32)))
            .collect();
        Self::from_parts(base, sources, entries)
    }

    fn from_parts(base: &CheckpointHandle, sources: &[DeltaSource], entries: Vec<CatalogEntry>) -> Result<Self> {
        let experts = sources
            .iter()
            .enumerate()
            .map(|(i, s)| ExpertRecord::of(ExpertId(i as u32), s))
            .collect();
        let tensors = base.tensors().iter().map(|t| t.name.clone()).collect();
        Self::new(base.id(), tensors, experts, entries)
    }

    pub fn base_id(&self) -> Digest {
        self.base
    }

    pub fn experts(&self) -> &[ExpertRecord] {
        &self.experts
    }

    pub fn expert_count(&self) -> usize {
        self.experts.len()
    }

    pub fn tensors(&self) -> &[String] {
        &self.tensors
    }

    pub fn entries(&self) -> &[CatalogEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, unit: &AccessUnit) -> Option<&CatalogEntry> {
        self.index.get(unit).map(|&i| &self.entries[i])
    }

    pub fn units(&self) -> impl Iterator<Item = AccessUnit> + '_ {
        self.entries.iter().map(CatalogEntry::unit)
    }

    /// Digest of base id, expert identities and every unit with its cost.
    pub fn universe_digest(&self) -> Digest {
        self.universe
    }

    /// `C_expert(1)`.
    pub fn universe_cost(&self) -> u64 {
        self.entries.iter().map(|e| e.stats.byte_cost).sum()
    }

    pub fn expert_cost(&self, expert: ExpertId) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.expert == expert)
            .map(|e| e.stats.byte_cost)
            .sum()
    }

    /// `C̄`: mean full-read cost per expert.
    pub fn mean_expert_cost(&self) -> f64 {
        if self.experts.is_empty() {
            return 0.0;
        }
        self.universe_cost() as f64 / self.experts.len() as f64
    }

    /// Position of a tensor in base order.
    pub fn tensor_position(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = FileHeader {
            base: self.base,
            experts: self.experts.clone(),
            tensors: self.tensors.clone(),
        };
        let header = crate::digest::canonical_json(&header).expect("catalog header serializes");
        let positions: HashMap<&str, u32> = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i as u32))
            .collect();
        let mut out = Vec::with_capacity(8 + 4 + 8 + header.len() + 8 + self.entries.len() * RECORD_BYTES + 32);
        out.extend_from_slice(CATALOG_MAGIC);
        out.extend_from_slice(&CATALOG_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&e.expert.0.to_le_bytes());
            out.extend_from_slice(&positions[e.key.tensor.as_str()].to_le_bytes());
            out.extend_from_slice(&e.key.block_index.to_le_bytes());
            out.extend_from_slice(&e.stats.byte_cost.to_le_bytes());
            out.extend_from_slice(&e.stats.content_hash.0);
            out.push(if e.stats.has_stats { FLAG_HAS_STATS } else { 0 });
            out.extend_from_slice(&e.stats.delta_l2.unwrap_or(0.0).to_le_bytes());
        }
        let trailer = Digest::of(&out);
        out.extend_from_slice(&trailer.0);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CATALOG_MAGIC.len() || &bytes[..CATALOG_MAGIC.len()] != CATALOG_MAGIC {
            return Err(Error::CatalogDigest("not a catalog file".into()));
        }
        if bytes.len() < CATALOG_MAGIC.len() + 4 + 8 + 8 + 32 {
            return Err(Error::CatalogDigest("file truncated".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        let actual = Digest::of(body);
        if actual.0 != trailer {
            return Err(Error::CatalogDigest(format!(
                "trailer {} does not match contents {}",
                Digest(trailer.try_into().expect("32 bytes")).to_hex(),
                actual.to_hex()
            )));
        }
        let mut r = Reader { buf: body, pos: CATALOG_MAGIC.len() };
        let version = r.u32()?;
        if version != CATALOG_VERSION {
            return Err(Error::CatalogVersion(version));
        }
        let header_len = r.u64()? as usize;
        let header: FileHeader = serde_json::from_slice(r.take(header_len)?)?;
        let count = r.u64()? as usize;
        if body.len() - r.pos != count.saturating_mul(RECORD_BYTES) {
            return Err(Error::CatalogDigest(format!("{count} records do not fit the file length")));
        }
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let expert = ExpertId(r.u32()?);
            let tensor = r.u32()? as usize;
            let block = r.u32()?;
            let byte_cost = r.u64()?;
            let hash = Digest(r.take(32)?.try_into().expect("32 bytes"));
            let flags = r.take(1)?[0];
            let l2 = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            let name = header
                .tensors
                .get(tensor)
                .ok_or_else(|| Error::CatalogDigest(format!("tensor index {tensor} out of range")))?;
            let has_stats = flags & FLAG_HAS_STATS != 0;
            entries.push(CatalogEntry {
                expert,
                key: BlockKey::new(name.clone(), block),
                stats: BlockStats {
                    byte_cost,
                    content_hash: hash,
                    delta_l2: has_stats.then_some(l2),
                    has_stats,
                },
                base: header.base,
            });
        }
        Self::new(header.base, header.tensors, header.experts, entries)
    }

    /// Writes the catalog file and returns its size in bytes.
    pub fn persist(&self, path: impl AsRef<Path>) -> Result<u64> {
        let path = path.as_ref();
        let bytes = self.encode();
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(bytes.len() as u64)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

pub fn persist_catalog(catalog: &Catalog, path: impl AsRef<Path>) -> Result<u64> {
    catalog.persist(path)
}

pub fn load_catalog(path: impl AsRef<Path>) -> Result<Catalog> {
    Catalog::load(path)
}

fn universe_digest(base: &Digest, experts: &[ExpertRecord], entries: &[CatalogEntry]) -> Digest {
    let mut h = Hasher::new();
    h.update(b"universe/v1");
    h.update(&base.0);
    h.update(&(experts.len() as u64).to_le_bytes());
    for e in experts {
        h.update(&e.checkpoint_id.0);
        h.update(e.kind.as_str().as_bytes());
        h.update(&[0]);
    }
    for e in entries {
        h.update(&e.expert.0.to_le_bytes());
        h.update(&(e.key.tensor.len() as u64).to_le_bytes());
        h.update(e.key.tensor.as_bytes());
        h.update(&e.key.block_index.to_le_bytes());
        h.update(&e.stats.byte_cost.to_le_bytes());
    }
    h.finish()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::CatalogDigest("record runs past end of file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
