use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BlockBuffer, BlockKey, TensorMeta, ELEM_BYTES, PAYLOAD_FILE};
use crate::digest::{Digest, Hasher};
use crate::error::{Error, Result};
use crate::meter::{Channel, IoMeter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WrittenKind {
    /// Bit-identical to the base block; recorded as a reference, no payload bytes.
    Reference,
    Materialized,
}

struct TeeFile {
    file: File,
    hasher: Hasher,
}

impl Write for TeeFile {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.file.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.file.flush()
    }
}

impl Seek for TeeFile {
    fn seek(&mut self, pos: SeekFrom) -> std::io::Result<u64> {
        self.file.seek(pos)
    }
}

/// Result of a finished, validated staging payload.
#[derive(Debug, Clone)]
pub struct StagedPayload {
    pub dir: PathBuf,
    /// Digest of the logical payload (references resolved to base values).
    pub logical_digest: Digest,
    pub references: Vec<BlockKey>,
    pub materialized_bytes: u64,
}

/// Sequential block writer for one staged output payload.
///
/// Blocks must arrive in traversal order. After [`StagingWriter::finish`] the
/// writer is closed and further writes fail.
pub struct StagingWriter {
    path: PathBuf,
    dir: PathBuf,
    tensors: Vec<TensorMeta>,
    reference_mode: bool,
    out: Option<BufWriter<TeeFile>>,
    pos: u64,
    next: (usize, usize),
    logical: Hasher,
    intended: Hasher,
    references: Vec<BlockKey>,
    materialized_bytes: u64,
}

impl StagingWriter {
    pub fn create(dir: &Path, tensors: Vec<TensorMeta>, reference_mode: bool) -> Result<Self> {
        let path = dir.join(PAYLOAD_FILE);
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(StagingWriter {
            path,
            dir: dir.to_path_buf(),
            tensors,
            reference_mode,
            out: Some(BufWriter::with_capacity(
                1 << 20,
                TeeFile {
                    file,
                    hasher: Hasher::new(),
                },
            )),
            pos: 0,
            next: (0, 0),
            logical: Hasher::new(),
            intended: Hasher::new(),
            references: Vec::new(),
            materialized_bytes: 0,
        })
    }

    pub fn is_closed(&self) -> bool {
        self.out.is_none()
    }

    fn expected_key(&self) -> Option<BlockKey> {
        let t = self.tensors.get(self.next.0)?;
        Some(BlockKey::new(t.name.clone(), self.next.1 as u32))
    }

    fn advance(&mut self) {
        let (ti, bi) = self.next;
        if bi + 1 < self.tensors[ti].num_blocks() {
            self.next = (ti, bi + 1);
        } else {
            self.next = (ti + 1, 0);
        }
    }

    /// Writes `values` unless reference mode is on and they are bit-identical
    /// to `base`, in which case only a reference is recorded.
    pub fn write_block_or_reference(
        &mut self,
        values: &BlockBuffer,
        base: &BlockBuffer,
        meter: &IoMeter,
    ) -> Result<WrittenKind> {
        if self.out.is_none() {
            return Err(Error::WriterClosed);
        }
        let expected = self.expected_key().ok_or(Error::WriterClosed)?;
        if values.key != expected || base.key != expected {
            return Err(Error::OutOfOrderWrite {
                expected: expected.to_string(),
                actual: values.key.to_string(),
            });
        }
        let meta = &self.tensors[self.next.0];
        let range = meta.block_range(self.next.1);
        if values.values.len() != range.len() || base.values.len() != range.len() {
            return Err(Error::LengthMismatch {
                expected: range.len(),
                actual: values.values.len(),
            });
        }
        let offset = meta.offset + (range.start * ELEM_BYTES) as u64;
        let bytes = values.to_le_bytes();
        self.logical.update(&bytes);

        let kind = if self.reference_mode && values.bit_eq(base) {
            self.references.push(expected);
            WrittenKind::Reference
        } else {
            let out = self.out.as_mut().expect("checked open");
            if self.pos != offset {
                out.seek(SeekFrom::Start(offset)).map_err(|e| Error::io(&self.path, e))?;
            }
            out.write_all(&bytes).map_err(|e| Error::io(&self.path, e))?;
            self.pos = offset + bytes.len() as u64;
            self.intended.update(&bytes);
            self.materialized_bytes += bytes.len() as u64;
            meter.charge(&Channel::Output, &values.key, bytes.len() as u64)?;
            WrittenKind::Materialized
        };
        self.advance();
        Ok(kind)
    }

    /// Flushes and fsyncs the payload, then checks that every block was
    /// written, the file has the declared length, and the bytes handed to the
    /// file hash to what the writer meant to write.
    pub fn finish(&mut self) -> Result<StagedPayload> {
        let out = self.out.take().ok_or(Error::WriterClosed)?;
        if let Some(key) = self.expected_key() {
            return Err(Error::OutOfOrderWrite {
                expected: key.to_string(),
                actual: "end of payload".into(),
            });
        }
        let tee = out.into_inner().map_err(|e| Error::io(&self.path, e.into_error()))?;
        let total: u64 = self.tensors.iter().map(TensorMeta::byte_len).sum();
        tee.file.set_len(total).map_err(|e| Error::io(&self.path, e))?;
        tee.file.sync_all().map_err(|e| Error::io(&self.path, e))?;
        let len = tee.file.metadata().map_err(|e| Error::io(&self.path, e))?.len();
        if len != total {
            return Err(Error::IntegrityMismatch {
                what: "staged payload length".into(),
                expected: total.to_string(),
                actual: len.to_string(),
            });
        }
        let written = tee.hasher.finish();
        let intended = std::mem::take(&mut self.intended).finish();
        if written != intended {
            return Err(Error::IntegrityMismatch {
                what: "staged payload bytes".into(),
                expected: intended.to_hex(),
                actual: written.to_hex(),
            });
        }
        let logical = std::mem::take(&mut self.logical).finish();
        if self.references.is_empty() && logical != written {
            return Err(Error::IntegrityMismatch {
                what: "staged payload digest".into(),
                expected: logical.to_hex(),
                actual: written.to_hex(),
            });
        }
        Ok(StagedPayload {
            dir: self.dir.clone(),
            logical_digest: logical,
            references: std::mem::take(&mut self.references),
            materialized_bytes: self.materialized_bytes,
        })
    }
}
