//! Delta materialization for the three expert source kinds.
//!
//! A `full` source is an expert checkpoint with the base geometry; its delta
//! is `expert - base` in f32. An `explicit-delta` source stores that delta
//! directly. A `lora` source stores `B` (out × r) and `A` (r × in) factors for
//! a subset of rank-2 tensors and contributes `scale · B·A` there and zero
//! everywhere else.
//!
//! [`DeltaIterator::pull_masked`] only touches storage for selected experts.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::container::{BlockBuffer, CheckpointHandle, TensorMeta};
use crate::costmodel::ExpertId;
use crate::digest::Digest;
use crate::error::{Error, Result};
use crate::meter::{Channel, IoMeter};
use crate::operators::MaskedDeltaTuple;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    Full,
    ExplicitDelta,
    Lora,
}

impl SourceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceKind::Full => "full",
            SourceKind::ExplicitDelta => "explicit-delta",
            SourceKind::Lora => "lora",
        }
    }
}

impl std::str::FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SourceKind::Full),
            "explicit-delta" | "delta" => Ok(SourceKind::ExplicitDelta),
            "lora" => Ok(SourceKind::Lora),
            other => Err(Error::InvalidParameter(format!("unknown source kind {other:?}"))),
        }
    }
}

pub fn lora_b_name(target: &str) -> String {
    format!("{target}.lora_B")
}

pub fn lora_a_name(target: &str) -> String {
    format!("{target}.lora_A")
}

#[derive(Debug, Clone)]
pub struct LoraFactors {
    pub rank: usize,
    pub out_dim: usize,
    pub in_dim: usize,
    pub scale: f64,
    b_name: String,
    a_name: String,
}

impl LoraFactors {
    fn b_row_bytes(&self) -> u64 {
        (self.rank * 4) as u64
    }

    fn a_bytes(&self) -> u64 {
        (self.rank * self.in_dim * 4) as u64
    }
}

/// `scale · B[rows, :] · A`, accumulated in f64 and rounded once to f32.
pub fn lora_rows_delta(b_rows: &[f32], a: &[f32], rank: usize, in_dim: usize, scale: f64) -> Vec<f32> {
    let rows = b_rows.len() / rank.max(1);
    let mut out = vec![0f32; rows * in_dim];
    let mut acc = vec![0f64; in_dim];
    for r in 0..rows {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let b_row = &b_rows[r * rank..(r + 1) * rank];
        for (k, &bk) in b_row.iter().enumerate() {
            let bk = bk as f64;
            let a_row = &a[k * in_dim..(k + 1) * in_dim];
            for (slot, &akc) in acc.iter_mut().zip(a_row) {
                *slot += bk * akc as f64;
            }
        }
        for (o, &v) in out[r * in_dim..(r + 1) * in_dim].iter_mut().zip(&acc) {
            *o = (v * scale) as f32;
        }
    }
    out
}

/// `expert - base` elementwise in f32.
pub fn subtract(expert: &[f32], base: &[f32]) -> Vec<f32> {
    expert.iter().zip(base).map(|(e, b)| e - b).collect()
}

/// One expert's delta provider.
#[derive(Debug, Clone)]
pub struct DeltaSource {
    kind: SourceKind,
    handle: CheckpointHandle,
    lora: BTreeMap<String, LoraFactors>,
}

impl DeltaSource {
    pub fn open(kind: SourceKind, path: impl AsRef<Path>, base: &CheckpointHandle) -> Result<Self> {
        Self::new(kind, CheckpointHandle::open(path)?, base)
    }

    /// Wraps `handle`, checking it is resolvable to the base geometry.
    pub fn new(kind: SourceKind, handle: CheckpointHandle, base: &CheckpointHandle) -> Result<Self> {
        let mut lora = BTreeMap::new();
        match kind {
            SourceKind::Full | SourceKind::ExplicitDelta => {
                let ours = handle.tensors();
                let theirs = base.tensors();
                if ours.len() != theirs.len() {
                    return Err(Error::GeometryMismatch(format!(
                        "{} has {} tensors, base has {}",
                        handle.root().display(),
                        ours.len(),
                        theirs.len()
                    )));
                }
                for (a, b) in ours.iter().zip(theirs) {
                    if !a.same_geometry(b) {
                        return Err(Error::GeometryMismatch(format!(
                            "tensor {} ({:?}) does not match base tensor {} ({:?})",
                            a.name, a.shape, b.name, b.shape
                        )));
                    }
                }
            }
            SourceKind::Lora => {
                for (target, meta) in &handle.header().lora {
                    let base_t = base.tensor(target).map_err(|_| {
                        Error::GeometryMismatch(format!("lora target {target} is not a base tensor"))
                    })?;
                    if base_t.rank() != 2 {
                        return Err(Error::GeometryMismatch(format!("lora target {target} is not rank-2")));
                    }
                    let (out_dim, in_dim) = (base_t.shape[0], base_t.shape[1]);
                    let b = handle.tensor(&lora_b_name(target))?;
                    let a = handle.tensor(&lora_a_name(target))?;
                    let rank = b.shape.get(1).copied().unwrap_or(0);
                    if b.shape != [out_dim, rank] || a.shape != [rank, in_dim] || rank == 0 {
                        return Err(Error::GeometryMismatch(format!(
                            "lora factors for {target} have shapes {:?} and {:?}, target is {:?}",
                            b.shape, a.shape, base_t.shape
                        )));
                    }
                    lora.insert(
                        target.clone(),
                        LoraFactors {
                            rank,
                            out_dim,
                            in_dim,
                            scale: meta.scale,
                            b_name: lora_b_name(target),
                            a_name: lora_a_name(target),
                        },
                    );
                }
            }
        }
        Ok(DeltaSource { kind, handle, lora })
    }

    pub fn kind(&self) -> SourceKind {
        self.kind
    }

    pub fn handle(&self) -> &CheckpointHandle {
        &self.handle
    }

    pub fn id(&self) -> Digest {
        self.handle.id()
    }

    pub fn lora_target(&self, tensor: &str) -> Option<&LoraFactors> {
        self.lora.get(tensor)
    }

    /// Planned byte cost of pulling this source's delta for one base block.
    /// For LoRA this is the B rows of the block plus all of A; A is cached
    /// per tensor during execution, so the realized cost can only be lower.
    pub fn unit_cost(&self, base_meta: &TensorMeta, block_index: usize) -> u64 {
        match self.kind {
            SourceKind::Full | SourceKind::ExplicitDelta => base_meta.block_byte_len(block_index),
            SourceKind::Lora => match self.lora.get(&base_meta.name) {
                Some(f) => {
                    let rows = base_meta.block_rows_range(block_index).len() as u64;
                    rows * f.b_row_bytes() + f.a_bytes()
                }
                None => 0,
            },
        }
    }

    /// Materializes this source's delta for the block held in `base_block`.
    /// Storage reads are charged to `channel`.
    pub(crate) fn read_delta(
        &self,
        base_block: &BlockBuffer,
        base_meta: &TensorMeta,
        channel: Channel,
        meter: &IoMeter,
        a_cache: &Mutex<Option<Arc<Vec<f32>>>>,
    ) -> Result<Vec<f32>> {
        let key = &base_block.key;
        match self.kind {
            SourceKind::Full => {
                let expert = self.handle.read_block(key, meter, channel)?;
                Ok(subtract(&expert.values, &base_block.values))
            }
            SourceKind::ExplicitDelta => Ok(self.handle.read_block(key, meter, channel)?.values),
            SourceKind::Lora => {
                let Some(f) = self.lora.get(&key.tensor) else {
                    meter.charge(&channel, key, 0)?;
                    return Ok(vec![0.0; base_block.values.len()]);
                };
                let rows = base_meta.block_rows_range(key.block_index as usize);
                let mut bytes = rows.len() as u64 * f.b_row_bytes();
                let mut cache = a_cache.lock().expect("lora cache poisoned");
                let a = match cache.as_ref() {
                    Some(a) => a.clone(),
                    None => {
                        bytes += f.a_bytes();
                        let a = Arc::new(self.handle.read_elems_unmetered(&f.a_name, 0..f.rank * f.in_dim)?);
                        *cache = Some(a.clone());
                        a
                    }
                };
                drop(cache);
                // Charge before reading B so a budget violation reads nothing more.
                meter.charge(&channel, key, bytes)?;
                let b_rows = self
                    .handle
                    .read_elems_unmetered(&f.b_name, rows.start * f.rank..rows.end * f.rank)?;
                debug_assert_eq!(f.out_dim * f.in_dim, base_meta.numel());
                Ok(lora_rows_delta(&b_rows, &a, f.rank, f.in_dim, f.scale))
            }
        }
    }
}

/// Per-tensor delta iterator. Holds the LoRA `A` factor cache for the tensor
/// being traversed, so blocks of one tensor may be pulled concurrently.
pub struct DeltaIterator<'a> {
    sources: &'a [DeltaSource],
    meta: TensorMeta,
    a_cache: Vec<Mutex<Option<Arc<Vec<f32>>>>>,
}

impl<'a> DeltaIterator<'a> {
    pub fn new(sources: &'a [DeltaSource], base: &CheckpointHandle, tensor: &str) -> Result<Self> {
        let meta = base.tensor(tensor)?.clone();
        Ok(DeltaIterator {
            sources,
            meta,
            a_cache: sources.iter().map(|_| Mutex::new(None)).collect(),
        })
    }

    /// Builds the masked tuple for one block. Unselected experts are never read.
    pub fn pull_masked(&self, base_block: &BlockBuffer, mask_row: &[bool], meter: &IoMeter) -> Result<MaskedDeltaTuple> {
        if mask_row.len() != self.sources.len() {
            return Err(Error::LengthMismatch {
                expected: self.sources.len(),
                actual: mask_row.len(),
            });
        }
        if base_block.key.tensor != self.meta.name {
            return Err(Error::GeometryMismatch(format!(
                "iterator for {} cannot pull {}",
                self.meta.name, base_block.key
            )));
        }
        let mut deltas = Vec::with_capacity(self.sources.len());
        for (i, (&selected, source)) in mask_row.iter().zip(self.sources).enumerate() {
            if !selected {
                deltas.push(None);
                continue;
            }
            let channel = Channel::Expert(ExpertId(i as u32));
            deltas.push(Some(source.read_delta(base_block, &self.meta, channel, meter, &self.a_cache[i])?));
        }
        MaskedDeltaTuple::new(base_block.values.len(), deltas)
    }
}

/// Convenience wrapper: one-shot pull for a single block.
pub fn pull_masked(
    sources: &[DeltaSource],
    base: &CheckpointHandle,
    base_block: &BlockBuffer,
    mask_row: &[bool],
    meter: &IoMeter,
) -> Result<MaskedDeltaTuple> {
    DeltaIterator::new(sources, base, &base_block.key.tensor)?.pull_masked(base_block, mask_row, meter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::{write_checkpoint, BlockKey, LoraTargetMeta, Role, F32_DTYPE};

    fn meta(name: &str, shape: Vec<usize>, block_rows: usize) -> TensorMeta {
        TensorMeta {
            name: name.into(),
            dtype: F32_DTYPE.into(),
            shape,
            block_rows: Some(block_rows),
            block_elems: None,
            offset: 0,
        }
    }

    fn base_2x4(dir: &Path) -> CheckpointHandle {
        write_checkpoint(
            dir,
            Role::Base,
            vec![(meta("w", vec![2, 4], 2), vec![1.0; 8])],
            BTreeMap::new(),
        )
        .unwrap()
    }

    #[test]
    fn omitted_experts_cost_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let base = base_2x4(&dir.path().join("base"));
        let e = write_checkpoint(
            dir.path().join("d"),
            Role::Delta,
            vec![(meta("w", vec![2, 4], 2), vec![0.5; 8])],
            BTreeMap::new(),
        )
        .unwrap();
        let sources = vec![DeltaSource::new(SourceKind::ExplicitDelta, e, &base).unwrap()];
        let meter = IoMeter::new();
        let key = BlockKey::new("w", 0);
        let base_block = base.read_block(&key, &meter, Channel::Base).unwrap();

        let tuple = pull_masked(&sources, &base, &base_block, &[false], &meter).unwrap();
        assert!(tuple.selected().next().is_none());
        assert_eq!(meter.breakdown().expert_bytes, 0);

        let tuple = pull_masked(&sources, &base, &base_block, &[true], &meter).unwrap();
        assert_eq!(tuple.delta(0).unwrap(), &[0.5; 8][..]);
        assert_eq!(meter.breakdown().expert_bytes, 32);
        assert_eq!(meter.trace().len(), 1);
    }

    #[test]
    fn lora_rank_one_product() {
        let dir = tempfile::tempdir().unwrap();
        let base = write_checkpoint(
            dir.path().join("base"),
            Role::Base,
            vec![(meta("w", vec![2, 2], 2), vec![0.0; 4])],
            BTreeMap::new(),
        )
        .unwrap();
        let mut scales = BTreeMap::new();
        scales.insert("w".to_string(), LoraTargetMeta { scale: 1.0 });
        let adapter = write_checkpoint(
            dir.path().join("lora"),
            Role::LoraAdapter,
            vec![
                (meta("w.lora_B", vec![2, 1], 2), vec![1.0, 0.0]),
                (meta("w.lora_A", vec![1, 2], 1), vec![2.0, 0.0]),
            ],
            scales,
        )
        .unwrap();
        let sources = vec![DeltaSource::new(SourceKind::Lora, adapter, &base).unwrap()];
        let meter = IoMeter::new();
        let key = BlockKey::new("w", 0);
        let base_block = base.read_block(&key, &meter, Channel::Base).unwrap();
        let tuple = pull_masked(&sources, &base, &base_block, &[true], &meter).unwrap();
        assert_eq!(tuple.delta(0).unwrap(), &[2.0, 0.0, 0.0, 0.0][..]);
        // Two B rows of rank 1 plus A (1×2).
        assert_eq!(meter.breakdown().expert_bytes, 8 + 8);
    }

    #[test]
    fn full_source_geometry_must_match() {
        let dir = tempfile::tempdir().unwrap();
        let base = base_2x4(&dir.path().join("base"));
        let other = write_checkpoint(
            dir.path().join("x"),
            Role::Expert,
            vec![(meta("v", vec![2, 4], 2), vec![1.0; 8])],
            BTreeMap::new(),
        )
        .unwrap();
        assert!(matches!(
            DeltaSource::new(SourceKind::Full, other, &base),
            Err(Error::GeometryMismatch(_))
        ));
    }

    #[test]
    fn mask_length_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let base = base_2x4(&dir.path().join("base"));
        let meter = IoMeter::new();
        let b = base.read_block(&BlockKey::new("w", 0), &meter, Channel::Base).unwrap();
        assert!(matches!(
            pull_masked(&[], &base, &b, &[true], &meter),
            Err(Error::LengthMismatch { .. })
        ));
    }
}
