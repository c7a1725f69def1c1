//! On-disk checkpoint container (format v1) and block addressing.
//!
//! A container is a directory holding `header.json` and `payload.bin`. The
//! header lists tensors in traversal order; the payload is the concatenation
//! of every tensor as little-endian f32, each tensor starting at its declared
//! offset. Tensors are cut into deterministic blocks: rank-2 tensors by whole
//! rows, rank-1 tensors by element ranges.

mod writer;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::digest::{canonical_json, canonical_json_pretty, f32_le_bytes, Digest, Hasher};
use crate::error::{Error, Result};
use crate::meter::{Channel, IoMeter};

pub use writer::{StagedPayload, StagingWriter, WrittenKind};

pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_FILE: &str = "header.json";
pub const PAYLOAD_FILE: &str = "payload.bin";
pub const DEFAULT_BLOCK_BYTES: usize = 256 * 1024;
pub const F32_DTYPE: &str = "f32";
const ELEM_BYTES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Base,
    Expert,
    Delta,
    LoraAdapter,
    Merged,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Rows per block; rank-2 tensors only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_rows: Option<usize>,
    /// Elements per block; rank-1 tensors only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_elems: Option<usize>,
    pub offset: u64,
}

impl TensorMeta {
    /// Lays out a tensor with blocks close to `block_bytes`, rounded down to
    /// whole rows (never below one row).
    pub fn with_block_bytes(name: impl Into<String>, shape: Vec<usize>, block_bytes: usize) -> Self {
        let (block_rows, block_elems) = match shape.as_slice() {
            [_rows, cols] => {
                let row_bytes = cols * ELEM_BYTES;
                (Some((block_bytes / row_bytes.max(1)).max(1)), None)
            }
            _ => (None, Some((block_bytes / ELEM_BYTES).max(1))),
        };
        TensorMeta {
            name: name.into(),
            dtype: F32_DTYPE.to_string(),
            shape,
            block_rows,
            block_elems,
            offset: 0,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        (self.numel() * ELEM_BYTES) as u64
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Elements per row (1 for rank-1 tensors).
    pub fn row_len(&self) -> usize {
        if self.rank() == 2 {
            self.shape[1]
        } else {
            1
        }
    }

    /// Nominal element count of a full block.
    pub fn block_len(&self) -> usize {
        match (self.block_rows, self.block_elems) {
            (Some(rows), _) => rows * self.row_len(),
            (None, Some(elems)) => elems,
            (None, None) => self.numel(),
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.numel().div_ceil(self.block_len())
    }

    /// Element range of block `index` within the tensor.
    pub fn block_range(&self, index: usize) -> Range<usize> {
        let start = index * self.block_len();
        start..(start + self.block_len()).min(self.numel())
    }

    /// Row range of block `index`; rank-2 tensors only.
    pub fn block_rows_range(&self, index: usize) -> Range<usize> {
        let r = self.block_range(index);
        let cols = self.row_len();
        r.start / cols..r.end / cols
    }

    pub fn block_byte_len(&self, index: usize) -> u64 {
        (self.block_range(index).len() * ELEM_BYTES) as u64
    }

    /// Same tensor, shape and blocking; offsets are not compared.
    pub fn same_geometry(&self, other: &TensorMeta) -> bool {
        self.name == other.name
            && self.shape == other.shape
            && self.block_rows == other.block_rows
            && self.block_elems == other.block_elems
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.dtype != F32_DTYPE {
            return Err(format!("dtype:{}", self.dtype));
        }
        if self.name.is_empty() {
            return Err("empty tensor name".into());
        }
        if self.shape.is_empty() || self.shape.len() > 2 {
            return Err(format!("tensor {} has rank {}; only 1 or 2 supported", self.name, self.shape.len()));
        }
        if self.shape.contains(&0) {
            return Err(format!("tensor {} has a zero dimension", self.name));
        }
        match (self.rank(), self.block_rows, self.block_elems) {
            (2, Some(r), None) if r > 0 => Ok(()),
            (1, None, Some(e)) if e > 0 => Ok(()),
            _ => Err(format!(
                "tensor {} must declare a positive block_rows (rank 2) or block_elems (rank 1)",
                self.name
            )),
        }
    }
}

/// Scale applied to a LoRA target's `B·A` product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraTargetMeta {
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub role: Role,
    pub tensors: Vec<TensorMeta>,
    pub payload_sha256: Digest,
    /// LoRA adapters: per-target scale. Factor tensors are named
    /// `<target>.lora_B` and `<target>.lora_A`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub lora: BTreeMap<String, LoraTargetMeta>,
    /// Set when some blocks are stored as references to this base checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_ref: Option<Digest>,
}

impl Header {
    pub fn payload_len(&self) -> u64 {
        self.tensors.iter().map(TensorMeta::byte_len).sum()
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical_json(self).expect("header serializes")
    }

    /// Assigns contiguous offsets in list order.
    pub fn assign_offsets(tensors: &mut [TensorMeta]) {
        let mut offset = 0u64;
        for t in tensors {
            t.offset = offset;
            offset += t.byte_len();
        }
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let malformed = |reason: String| Error::MalformedHeader {
            path: path.to_path_buf(),
            reason,
        };
        if self.format_version != FORMAT_VERSION {
            return Err(malformed(format!("format_version {} (expected {FORMAT_VERSION})", self.format_version)));
        }
        let mut names = BTreeSet::new();
        let mut expected_offset = 0u64;
        for t in &self.tensors {
            if let Err(reason) = t.validate() {
                if let Some(dtype) = reason.strip_prefix("dtype:") {
                    return Err(Error::UnsupportedDtype(dtype.to_string()));
                }
                return Err(malformed(reason));
            }
            if !names.insert(t.name.as_str()) {
                return Err(malformed(format!("duplicate tensor {}", t.name)));
            }
            if t.offset != expected_offset {
                return Err(malformed(format!(
                    "tensor {} at offset {} but payload is contiguous up to {}",
                    t.name, t.offset, expected_offset
                )));
            }
            expected_offset += t.byte_len();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockKey {
    pub tensor: String,
    pub block_index: u32,
}

impl BlockKey {
    pub fn new(tensor: impl Into<String>, block_index: u32) -> Self {
        BlockKey {
            tensor: tensor.into(),
            block_index,
        }
    }
}

impl fmt::Display for BlockKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.tensor, self.block_index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockBuffer {
    pub key: BlockKey,
    pub values: Vec<f32>,
}

impl BlockBuffer {
    pub fn new(key: BlockKey, values: Vec<f32>) -> Self {
        BlockBuffer { key, values }
    }

    pub fn byte_len(&self) -> u64 {
        (self.values.len() * ELEM_BYTES) as u64
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        f32_le_bytes(&self.values)
    }

    /// Bitwise equality; distinguishes `0.0` from `-0.0` and compares NaN payloads.
    pub fn bit_eq(&self, other: &BlockBuffer) -> bool {
        self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug)]
struct Inner {
    root: PathBuf,
    header: Header,
    id: Digest,
    index: HashMap<String, usize>,
    payload: Option<File>,
    overlay: Option<Overlay>,
}

#[derive(Debug)]
struct Overlay {
    references: BTreeSet<BlockKey>,
    base: CheckpointHandle,
}

/// Read-only view of an opened container. Cloning is cheap and clones may be
/// used from several threads at once.
#[derive(Debug, Clone)]
pub struct CheckpointHandle {
    inner: Arc<Inner>,
}

/// Opens a container, parsing only its header.
pub fn open_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointHandle> {
    CheckpointHandle::open(path)
}

impl CheckpointHandle {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let root = path.as_ref().to_path_buf();
        let header_path = root.join(HEADER_FILE);
        let bytes = std::fs::read(&header_path).map_err(|e| Error::MalformedHeader {
            path: header_path.clone(),
            reason: e.to_string(),
        })?;
        let raw: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| Error::MalformedHeader {
            path: header_path.clone(),
            reason: e.to_string(),
        })?;
        // dtype is checked before the typed parse so a foreign dtype surfaces as
        // its own error rather than as a generic schema failure.
        if let Some(tensors) = raw.get("tensors").and_then(|t| t.as_array()) {
            for t in tensors {
                if let Some(dt) = t.get("dtype").and_then(|d| d.as_str()) {
                    if dt != F32_DTYPE {
                        return Err(Error::UnsupportedDtype(dt.to_string()));
                    }
                }
            }
        }
        let header: Header = serde_json::from_value(raw).map_err(|e| Error::MalformedHeader {
            path: header_path.clone(),
            reason: e.to_string(),
        })?;
        header.validate(&header_path)?;

        let payload_path = root.join(PAYLOAD_FILE);
        let payload = if header.tensors.is_empty() {
            None
        } else {
            let file = File::open(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
            let len = file.metadata().map_err(|e| Error::io(&payload_path, e))?.len();
            if len != header.payload_len() {
                return Err(Error::ShortRead {
                    path: payload_path,
                    offset: 0,
                    wanted: header.payload_len() as usize,
                });
            }
            Some(file)
        };

        let id = checkpoint_id(&header);
        let index = header
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (t.name.clone(), i))
            .collect();
        Ok(CheckpointHandle {
            inner: Arc::new(Inner {
                root,
                header,
                id,
                index,
                payload,
                overlay: None,
            }),
        })
    }

    /// Opens and re-hashes the payload against the header digest.
    pub fn open_verified(path: impl AsRef<Path>) -> Result<Self> {
        let handle = Self::open(path)?;
        handle.verify_payload()?;
        Ok(handle)
    }

    /// Attaches the base checkpoint that `references` resolve against. Reads of
    /// referenced blocks are served (and metered) from `base`.
    pub fn with_base_references(&self, base: &CheckpointHandle, references: BTreeSet<BlockKey>) -> Result<Self> {
        match self.inner.header.base_ref {
            Some(id) if id == base.id() => {}
            Some(id) => {
                return Err(Error::IntegrityMismatch {
                    what: "base reference".into(),
                    expected: id.to_hex(),
                    actual: base.id().to_hex(),
                })
            }
            None if references.is_empty() => {}
            None => return Err(Error::GeometryMismatch("checkpoint declares no base reference".into())),
        }
        for key in &references {
            self.meta_for(key)?;
        }
        let payload = match &self.inner.payload {
            Some(f) => Some(f.try_clone().map_err(|e| Error::io(self.payload_path(), e))?),
            None => None,
        };
        Ok(CheckpointHandle {
            inner: Arc::new(Inner {
                root: self.inner.root.clone(),
                header: self.inner.header.clone(),
                id: self.inner.id,
                index: self.inner.index.clone(),
                payload,
                overlay: Some(Overlay {
                    references,
                    base: base.clone(),
                }),
            }),
        })
    }

    pub fn root(&self) -> &Path {
        &self.inner.root
    }

    pub fn header(&self) -> &Header {
        &self.inner.header
    }

    pub fn tensors(&self) -> &[TensorMeta] {
        &self.inner.header.tensors
    }

    pub fn role(&self) -> Role {
        self.inner.header.role
    }

    /// SHA-256 of the canonical header bytes followed by the payload digest.
    pub fn id(&self) -> Digest {
        self.inner.id
    }

    pub fn payload_digest(&self) -> Digest {
        self.inner.header.payload_sha256
    }

    pub fn payload_path(&self) -> PathBuf {
        self.inner.root.join(PAYLOAD_FILE)
    }

    pub fn tensor(&self, name: &str) -> Result<&TensorMeta> {
        self.inner
            .index
            .get(name)
            .map(|&i| &self.inner.header.tensors[i])
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    pub fn tensor_position(&self, name: &str) -> Option<usize> {
        self.inner.index.get(name).copied()
    }

    /// Block keys of every tensor in header (traversal) order.
    pub fn block_keys(&self) -> Vec<BlockKey> {
        self.tensors()
            .iter()
            .flat_map(|t| (0..t.num_blocks()).map(move |b| BlockKey::new(t.name.clone(), b as u32)))
            .collect()
    }

    pub fn num_blocks_total(&self) -> usize {
        self.tensors().iter().map(TensorMeta::num_blocks).sum()
    }

    fn meta_for(&self, key: &BlockKey) -> Result<&TensorMeta> {
        let meta = self.tensor(&key.tensor)?;
        if key.block_index as usize >= meta.num_blocks() {
            return Err(Error::BlockOutOfRange {
                key: key.clone(),
                blocks: meta.num_blocks(),
            });
        }
        Ok(meta)
    }

    pub fn block_byte_len(&self, key: &BlockKey) -> Result<u64> {
        Ok(self.meta_for(key)?.block_byte_len(key.block_index as usize))
    }

    pub fn is_reference(&self, key: &BlockKey) -> bool {
        self.inner
            .overlay
            .as_ref()
            .is_some_and(|o| o.references.contains(key))
    }

    /// Reads one block, charging its stored byte length to `channel`.
    pub fn read_block(&self, key: &BlockKey, meter: &IoMeter, channel: Channel) -> Result<BlockBuffer> {
        let meta = self.meta_for(key)?;
        if let Some(overlay) = &self.inner.overlay {
            if overlay.references.contains(key) {
                return overlay.base.read_block(key, meter, channel);
            }
        }
        if self.inner.header.base_ref.is_some() && self.inner.overlay.is_none() {
            // Without the reference list we cannot tell holes from data.
            return Err(Error::UnresolvedReference(key.clone()));
        }
        let range = meta.block_range(key.block_index as usize);
        let bytes = (range.len() * ELEM_BYTES) as u64;
        meter.charge(&channel, key, bytes)?;
        let values = self.read_elems(meta, range)?;
        Ok(BlockBuffer::new(key.clone(), values))
    }

    /// Reads an arbitrary element range of a tensor without metering. Callers
    /// that need accounting charge the meter themselves.
    pub fn read_elems_unmetered(&self, tensor: &str, range: Range<usize>) -> Result<Vec<f32>> {
        let meta = self.tensor(tensor)?;
        if range.end > meta.numel() || range.start > range.end {
            return Err(Error::LengthMismatch {
                expected: meta.numel(),
                actual: range.end,
            });
        }
        self.read_elems(meta, range)
    }

    /// Reads a whole tensor, charging its byte length to `channel` without a
    /// per-block trace. Intended for whole-file scans such as the reference merge.
    pub fn read_tensor(&self, name: &str, meter: &IoMeter, channel: crate::meter::ChannelKind) -> Result<Vec<f32>> {
        let meta = self.tensor(name)?;
        if self.inner.overlay.is_some() || self.inner.header.base_ref.is_some() {
            let mut out = Vec::with_capacity(meta.numel());
            for b in 0..meta.num_blocks() {
                let key = BlockKey::new(name, b as u32);
                let inner_meter = IoMeter::new();
                let block = self.read_block(&key, &inner_meter, Channel::Metadata)?;
                out.extend_from_slice(&block.values);
            }
            meter.add(channel, meta.byte_len());
            return Ok(out);
        }
        meter.add(channel, meta.byte_len());
        self.read_elems(meta, 0..meta.numel())
    }

    fn read_elems(&self, meta: &TensorMeta, range: Range<usize>) -> Result<Vec<f32>> {
        let len = range.len();
        if len == 0 {
            return Ok(Vec::new());
        }
        let offset = meta.offset + (range.start * ELEM_BYTES) as u64;
        let mut buf = vec![0u8; len * ELEM_BYTES];
        let file = self
            .inner
            .payload
            .as_ref()
            .ok_or_else(|| Error::UnknownTensor(meta.name.clone()))?;
        read_exact_at(file, &mut buf, offset).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::ShortRead {
                    path: self.payload_path(),
                    offset,
                    wanted: buf.len(),
                }
            } else {
                Error::io(self.payload_path(), e)
            }
        })?;
        Ok(buf
            .chunks_exact(ELEM_BYTES)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    /// Re-hashes the logical payload (resolving base references when attached)
    /// and compares it with the header digest.
    pub fn verify_payload(&self) -> Result<()> {
        let meter = IoMeter::new();
        let mut hasher = Hasher::new();
        for key in self.block_keys() {
            let block = self.read_block(&key, &meter, Channel::Metadata)?;
            hasher.update(&block.to_le_bytes());
        }
        let actual = hasher.finish();
        if actual != self.payload_digest() {
            return Err(Error::IntegrityMismatch {
                what: format!("payload of {}", self.root().display()),
                expected: self.payload_digest().to_hex(),
                actual: actual.to_hex(),
            });
        }
        Ok(())
    }

    /// Hints the OS to drop cached pages of the payload so the next reads come
    /// from storage. No-op where unsupported.
    pub fn drop_page_cache(&self) {
        #[cfg(unix)]
        if let Some(file) = &self.inner.payload {
            use std::os::unix::io::AsRawFd;
            // SAFETY: plain advisory syscall on a descriptor we own.
            unsafe {
                libc::posix_fadvise(file.as_raw_fd(), 0, 0, libc::POSIX_FADV_DONTNEED);
            }
        }
    }
}

#[cfg(unix)]
fn read_exact_at(file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    use std::os::unix::fs::FileExt;
    file.read_exact_at(buf, offset)
}

#[cfg(windows)]
fn read_exact_at(file: &File, mut buf: &mut [u8], mut offset: u64) -> std::io::Result<()> {
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

pub fn checkpoint_id(header: &Header) -> Digest {
    let mut h = Hasher::new();
    h.update(&header.canonical_bytes());
    h.update(&header.payload_sha256.0);
    h.finish()
}

/// Writes a complete container in one go. `tensors` supplies values in header
/// order; offsets are assigned here.
pub fn write_checkpoint(
    dir: impl AsRef<Path>,
    role: Role,
    tensors: Vec<(TensorMeta, Vec<f32>)>,
    lora: BTreeMap<String, LoraTargetMeta>,
) -> Result<CheckpointHandle> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (mut metas, values): (Vec<TensorMeta>, Vec<Vec<f32>>) = tensors.into_iter().unzip();
    for (m, v) in metas.iter().zip(&values) {
        if m.numel() != v.len() {
            return Err(Error::LengthMismatch {
                expected: m.numel(),
                actual: v.len(),
            });
        }
    }
    Header::assign_offsets(&mut metas);

    let payload_path = dir.join(PAYLOAD_FILE);
    let mut hasher = Hasher::new();
    {
        let file = File::create(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for v in &values {
            let bytes = f32_le_bytes(v);
            hasher.update(&bytes);
            w.write_all(&bytes).map_err(|e| Error::io(&payload_path, e))?;
        }
        let file = w.into_inner().map_err(|e| Error::io(&payload_path, e.into_error()))?;
        file.sync_all().map_err(|e| Error::io(&payload_path, e))?;
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        role,
        tensors: metas,
        payload_sha256: hasher.finish(),
        lora,
        base_ref: None,
    };
    write_header(dir, &header)?;
    CheckpointHandle::open(dir)
}

pub(crate) fn write_header(dir: &Path, header: &Header) -> Result<()> {
    let path = dir.join(HEADER_FILE);
    let bytes = canonical_json_pretty(header)?;
    let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&path, e))?;
    f.sync_all().map_err(|e| Error::io(&path, e))?;
    Ok(())
}
