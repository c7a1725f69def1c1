//! Whole-tensor reference merge.
//!
//! Reads every tensor of every expert in one piece and evaluates each operator
//! from its definition. It shares no streaming, tuple or kernel code with
//! the executor; only the scalar rules (f64 accumulation in expert order, the
//! single final rounding, the keep-count rule and the seeded drop draws) are
//! common, because they are part of the operator's definition.

use crate::container::{CheckpointHandle, TensorMeta};
use crate::costmodel::{AccessMask, AccessUnit, ExpertId};
use crate::delta_source::{lora_a_name, lora_b_name, DeltaSource, SourceKind};
use crate::digest::{Digest, Hasher};
use crate::error::{Error, Result};
use crate::meter::{ChannelKind, IoMeter};
use crate::operators::{combine, derive_omega, ties_keep_count, OperatorKind, OperatorParams};
use crate::container::BlockKey;

/// A checkpoint held fully in memory, tensors in header order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseCheckpoint {
    tensors: Vec<(TensorMeta, Vec<f32>)>,
}

impl DenseCheckpoint {
    pub fn new(tensors: Vec<(TensorMeta, Vec<f32>)>) -> Result<Self> {
        for (m, v) in &tensors {
            if m.numel() != v.len() {
                return Err(Error::LengthMismatch {
                    expected: m.numel(),
                    actual: v.len(),
                });
            }
        }
        Ok(DenseCheckpoint { tensors })
    }

    pub fn load(handle: &CheckpointHandle) -> Result<Self> {
        let meter = IoMeter::new();
        let tensors = handle
            .tensors()
            .iter()
            .map(|m| Ok((m.clone(), handle.read_tensor(&m.name, &meter, ChannelKind::Metadata)?)))
            .collect::<Result<_>>()?;
        Ok(DenseCheckpoint { tensors })
    }

    pub fn tensors(&self) -> &[(TensorMeta, Vec<f32>)] {
        &self.tensors
    }

    pub fn values(&self, name: &str) -> Option<&[f32]> {
        self.tensors.iter().find(|(m, _)| m.name == name).map(|(_, v)| v.as_slice())
    }

    /// Digest of the concatenated little-endian payload; equals the container
    /// payload digest of the same values.
    pub fn digest(&self) -> Digest {
        let mut h = Hasher::new();
        for (_, v) in &self.tensors {
            for x in v {
                h.update(&x.to_le_bytes());
            }
        }
        h.finish()
    }

    pub fn bit_eq(&self, other: &DenseCheckpoint) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((ma, a), (mb, b))| {
                ma.same_geometry(mb) && a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn same_geometry(&self, other: &DenseCheckpoint) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((a, _), (b, _))| a.same_geometry(b))
    }
}

/// Full-tensor delta of one source against base values.
pub fn dense_delta(source: &DeltaSource, meta: &TensorMeta, base_values: &[f32]) -> Result<Vec<f32>> {
    let meter = IoMeter::new();
    let h = source.handle();
    match source.kind() {
        SourceKind::Full => {
            let e = h.read_tensor(&meta.name, &meter, ChannelKind::Metadata)?;
            Ok(e.iter().zip(base_values).map(|(&x, &b)| x - b).collect())
        }
        SourceKind::ExplicitDelta => h.read_tensor(&meta.name, &meter, ChannelKind::Metadata),
        SourceKind::Lora => {
            let Some(f) = source.lora_target(&meta.name) else {
                return Ok(vec![0.0; meta.numel()]);
            };
            let b = h.read_tensor(&lora_b_name(&meta.name), &meter, ChannelKind::Metadata)?;
            let a = h.read_tensor(&lora_a_name(&meta.name), &meter, ChannelKind::Metadata)?;
            let (rows, cols, rank) = (f.out_dim, f.in_dim, f.rank);
            let mut out = vec![0f32; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    let mut s = 0f64;
                    for k in 0..rank {
                        s += b[r * rank + k] as f64 * a[k * cols + c] as f64;
                    }
                    out[r * cols + c] = (s * f.scale) as f32;
                }
            }
            Ok(out)
        }
    }
}

/// Per-expert full-tensor deltas for every base tensor.
pub fn dense_deltas(base: &DenseCheckpoint, sources: &[DeltaSource]) -> Result<Vec<Vec<Vec<f32>>>> {
    sources
        .iter()
        .map(|s| {
            base.tensors
                .iter()
                .map(|(m, v)| dense_delta(s, m, v))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

fn phi_linear(deltas: &[Option<&[f32]>], coef: &[f64], n: usize) -> Vec<f64> {
    (0..n)
        .map(|j| {
            let mut s = 0f64;
            for (i, d) in deltas.iter().enumerate() {
                if let Some(d) = d {
                    s += coef[i] * d[j] as f64;
                }
            }
            s
        })
        .collect()
}

fn trim(d: &[f32], keep: usize) -> Vec<f32> {
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.sort_by(|&a, &b| d[b].abs().total_cmp(&d[a].abs()).then(a.cmp(&b)));
    let mut out = vec![0f32; d.len()];
    for &j in idx.iter().take(keep) {
        out[j] = d[j];
    }
    out
}

fn phi_ties(deltas: &[Option<&[f32]>], density: f64, n: usize) -> Vec<f64> {
    let keep = ties_keep_count(density, n);
    let trimmed: Vec<Vec<f32>> = deltas.iter().flatten().map(|d| trim(d, keep)).collect();
    (0..n)
        .map(|j| {
            let mut total = 0f64;
            for t in &trimmed {
                total += t[j] as f64;
            }
            if total == 0.0 {
                return 0.0;
            }
            let mut sum = 0f64;
            let mut count = 0u32;
            for t in &trimmed {
                let v = t[j];
                let agrees = if total > 0.0 { v > 0.0 } else { v < 0.0 };
                if agrees {
                    sum += v as f64;
                    count += 1;
                }
            }
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        })
        .collect()
}

fn phi_dare(deltas: &[Option<&[f32]>], params: &OperatorParams, key: &BlockKey, n: usize) -> Vec<f64> {
    let p = params.dare_drop_p;
    let rescale = 1.0 / (1.0 - p);
    (0..n)
        .map(|j| {
            let mut s = 0f64;
            for (i, d) in deltas.iter().enumerate() {
                if let Some(d) = d {
                    if derive_omega(params.seed, ExpertId(i as u32), key, j as u64, p) {
                        s += params.alphas[i] * (d[j] as f64 * rescale);
                    }
                }
            }
            s
        })
        .collect()
}

/// Evaluates the operator block by block over whole-tensor deltas. With
/// `mask = None` every expert block is used.
pub fn reference_merge(
    base: &CheckpointHandle,
    sources: &[DeltaSource],
    params: &OperatorParams,
    mask: Option<&AccessMask>,
) -> Result<DenseCheckpoint> {
    params.validate(sources.len())?;
    for s in sources {
        if matches!(s.kind(), SourceKind::Full | SourceKind::ExplicitDelta) {
            let theirs = s.handle().tensors();
            if theirs.len() != base.tensors().len()
                || !theirs.iter().zip(base.tensors()).all(|(a, b)| a.same_geometry(b))
            {
                return Err(Error::GeometryMismatch(format!(
                    "{} is not homologous with the base",
                    s.handle().root().display()
                )));
            }
        }
    }
    let dense_base = DenseCheckpoint::load(base)?;
    let deltas = dense_deltas(&dense_base, sources)?;
    let k = sources.len();
    let mut out = Vec::with_capacity(dense_base.tensors.len());
    for (ti, (meta, base_vals)) in dense_base.tensors.iter().enumerate() {
        let mut merged = vec![0f32; meta.numel()];
        for b in 0..meta.num_blocks() {
            let key = BlockKey::new(meta.name.clone(), b as u32);
            let range = meta.block_range(b);
            let n = range.len();
            let selected: Vec<Option<&[f32]>> = (0..k)
                .map(|i| {
                    let on = mask.is_none_or(|m| m.contains(&AccessUnit::new(ExpertId(i as u32), key.clone())));
                    on.then(|| &deltas[i][ti][range.clone()])
                })
                .collect();
            let psi = match params.op {
                OperatorKind::AvgFixed => phi_linear(&selected, &params.alphas, n),
                OperatorKind::AvgRenorm => {
                    let count = selected.iter().filter(|d| d.is_some()).count();
                    let beta = if count == 0 { 0.0 } else { 1.0 / count as f64 };
                    phi_linear(&selected, &vec![beta; k], n)
                }
                OperatorKind::Ties => phi_ties(&selected, params.ties_density, n),
                OperatorKind::Dare => phi_dare(&selected, params, &key, n),
            };
            for (o, (j, &d)) in merged[range.clone()].iter_mut().zip(range.clone().zip(&psi)) {
                *o = combine(base_vals[j], d);
            }
        }
        out.push((meta.clone(), merged));
    }
    DenseCheckpoint::new(out)
}

/// `A = 1` merge.
pub fn full_read_merge(base: &CheckpointHandle, sources: &[DeltaSource], params: &OperatorParams) -> Result<DenseCheckpoint> {
    reference_merge(base, sources, params, None)
}
