//! Deterministic synthetic checkpoint families.
//!
//! A family is a base checkpoint plus `K` expert sources derived from it.
//! Every value is a function of the spec and its seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::{write_checkpoint, CheckpointHandle, LoraTargetMeta, Role, TensorMeta, DEFAULT_BLOCK_BYTES};
use crate::delta_source::{lora_a_name, lora_b_name, DeltaSource, SourceKind};
use crate::digest::{canonical_json_pretty, Digest};
use crate::error::{Error, Result};

pub const FAMILY_FILE: &str = "family.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        TensorSpec { name: name.into(), shape }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FamilySpec {
    pub experts: usize,
    pub tensors: Vec<TensorSpec>,
    /// Standard deviation of base values.
    pub base_scale: f64,
    /// Standard deviation of nonzero delta values before per-expert and
    /// per-block scaling.
    pub delta_scale: f64,
    /// Per-expert scale is `delta_scale · spread^u`, `u ~ U(-1, 1)`.
    pub expert_scale_spread: f64,
    /// Per-block multiplier is `spread^-u`, `u ~ U(0, 1)`.
    pub block_scale_spread: f64,
    /// Probability that a delta coordinate is exactly zero.
    pub sparsity: f64,
    /// Source kinds, cycled over experts.
    pub kinds: Vec<SourceKind>,
    pub lora_rank: usize,
    pub block_bytes: usize,
    pub seed: u64,
}

impl Default for FamilySpec {
    fn default() -> Self {
        FamilySpec {
            experts: 4,
            tensors: vec![
                TensorSpec::new("embed", vec![64, 32]),
                TensorSpec::new("layer0.attn", vec![32, 32]),
                TensorSpec::new("layer0.mlp", vec![64, 32]),
                TensorSpec::new("layer0.norm", vec![32]),
                TensorSpec::new("head", vec![32, 48]),
            ],
            base_scale: 0.5,
            delta_scale: 0.02,
            expert_scale_spread: 2.0,
            block_scale_spread: 8.0,
            sparsity: 0.0,
            kinds: vec![SourceKind::Full],
            lora_rank: 4,
            block_bytes: 1024,
            seed: 0,
        }
    }
}

impl FamilySpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.tensors.is_empty() {
            return bad("family needs at least one tensor".into());
        }
        let mut names = std::collections::BTreeSet::new();
        for t in &self.tensors {
            if !names.insert(&t.name) || t.name.contains(".lora_") {
                return bad(format!("tensor name {:?} is duplicated or reserved", t.name));
            }
            if t.shape.is_empty() || t.shape.len() > 2 || t.shape.contains(&0) {
                return bad(format!("tensor {} must be rank 1 or 2 with nonzero dims", t.name));
            }
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return bad(format!("sparsity must lie in [0, 1), got {}", self.sparsity));
        }
        if !(self.delta_scale >= 0.0 && self.base_scale >= 0.0) {
            return bad("scales must be nonnegative".into());
        }
        if !(self.expert_scale_spread >= 1.0 && self.block_scale_spread >= 1.0) {
            return bad("spreads must be at least 1".into());
        }
        if self.experts > 0 && self.kinds.is_empty() {
            return bad("at least one source kind is required".into());
        }
        if self.kinds.contains(&SourceKind::Lora) && self.lora_rank == 0 {
            return bad("lora rank must be positive".into());
        }
        if self.block_bytes < 4 {
            return bad("block size must hold at least one element".into());
        }
        Ok(())
    }

    pub fn kind_of(&self, expert: usize) -> SourceKind {
        self.kinds[expert % self.kinds.len()]
    }

    fn metas(&self) -> Vec<TensorMeta> {
        let bb = if self.block_bytes == 0 { DEFAULT_BLOCK_BYTES } else { self.block_bytes };
        self.tensors
            .iter()
            .map(|t| TensorMeta::with_block_bytes(t.name.clone(), t.shape.clone(), bb))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRecord {
    pub path: String,
    pub id: Digest,
    pub kind: Option<SourceKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyRecord {
    pub spec: FamilySpec,
    pub base: MemberRecord,
    pub experts: Vec<MemberRecord>,
}

/// An opened family: base handle and one delta source per expert.
#[derive(Debug, Clone)]
pub struct Family {
    pub root: PathBuf,
    pub record: FamilyRecord,
    pub base: CheckpointHandle,
    pub sources: Vec<DeltaSource>,
}

fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn normal(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd).expect("nonnegative standard deviation")
}

type LoraTargets = BTreeMap<String, LoraTargetMeta>;

fn expert_values(
    spec: &FamilySpec,
    metas: &[TensorMeta],
    base: &[Vec<f32>],
    expert: usize,
) -> (Role, Vec<(TensorMeta, Vec<f32>)>, LoraTargets) {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, expert as u64 + 1));
    let scale = spec.delta_scale * spec.expert_scale_spread.powf(rng.random_range(-1.0..=1.0));
    let kind = spec.kind_of(expert);
    if kind == SourceKind::Lora {
        let mut tensors = Vec::new();
        let mut targets = BTreeMap::new();
        let r = spec.lora_rank;
        for m in metas.iter().filter(|m| m.rank() == 2) {
            let (out_dim, in_dim) = (m.shape[0], m.shape[1]);
            let b_dist = normal(scale);
            let a_dist = normal(1.0 / (r as f64).sqrt());
            let b: Vec<f32> = (0..out_dim * r).map(|_| b_dist.sample(&mut rng) as f32).collect();
            let a: Vec<f32> = (0..r * in_dim).map(|_| a_dist.sample(&mut rng) as f32).collect();
            tensors.push((TensorMeta::with_block_bytes(lora_b_name(&m.name), vec![out_dim, r], spec.block_bytes), b));
            tensors.push((TensorMeta::with_block_bytes(lora_a_name(&m.name), vec![r, in_dim], spec.block_bytes), a));
            targets.insert(m.name.clone(), LoraTargetMeta { scale: 1.0 });
        }
        return (Role::LoraAdapter, tensors, targets);
    }
    let mut tensors = Vec::with_capacity(metas.len());
    for (m, base_vals) in metas.iter().zip(base) {
        let mut values = Vec::with_capacity(m.numel());
        for b in 0..m.num_blocks() {
            let block_scale = scale * spec.block_scale_spread.powf(-rng.random_range(0.0..1.0));
            let dist = normal(block_scale);
            for j in m.block_range(b) {
                let d = if rng.random::<f64>() < spec.sparsity {
                    0.0f32
                } else {
                    dist.sample(&mut rng) as f32
                };
                values.push(match kind {
                    SourceKind::Full => base_vals[j] + d,
                    _ => d,
                });
            }
        }
        tensors.push((m.clone(), values));
    }
    let role = if kind == SourceKind::Full { Role::Expert } else { Role::Delta };
    (role, tensors, BTreeMap::new())
}

/// Writes `base/`, `expert-XX/` and `family.json` under `out_dir`.
pub fn generate(spec: &FamilySpec, out_dir: impl AsRef<Path>) -> Result<Family> {
    spec.validate()?;
    let root = out_dir.as_ref().to_path_buf();
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let metas = spec.metas();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, 0));
    let base_dist = normal(spec.base_scale);
    let base_values: Vec<Vec<f32>> = metas
        .iter()
        .map(|m| (0..m.numel()).map(|_| base_dist.sample(&mut rng) as f32).collect())
        .collect();
    let base = write_checkpoint(
        root.join("base"),
        Role::Base,
        metas.iter().cloned().zip(base_values.iter().cloned()).collect(),
        BTreeMap::new(),
    )?;
    let mut experts = Vec::with_capacity(spec.experts);
    for i in 0..spec.experts {
        let (role, tensors, lora) = expert_values(spec, &metas, &base_values, i);
        let name = format!("expert-{i:02}");
        let handle = write_checkpoint(root.join(&name), role, tensors, lora)?;
        experts.push(MemberRecord {
            path: name,
            id: handle.id(),
            kind: Some(spec.kind_of(i)),
        });
    }
    let record = FamilyRecord {
        spec: spec.clone(),
        base: MemberRecord {
            path: "base".into(),
            id: base.id(),
            kind: None,
        },
        experts,
    };
    let path = root.join(FAMILY_FILE);
    std::fs::write(&path, canonical_json_pretty(&record)?).map_err(|e| Error::io(&path, e))?;
    Family::open(&root)
}

impl Family {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        let path = root.join(FAMILY_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let record: FamilyRecord = serde_json::from_slice(&bytes)?;
        let base = CheckpointHandle::open(root.join(&record.base.path))?;
        let sources = record
            .experts
            .iter()
            .map(|e| DeltaSource::open(e.kind.unwrap_or(SourceKind::Full), root.join(&e.path), &base))
            .collect::<Result<Vec<_>>>()?;
        Ok(Family {
            root,
            record,
            base,
            sources,
        })
    }

    pub fn expert_count(&self) -> usize {
        self.sources.len()
    }

    /// Drops every member's payload from the OS page cache where supported.
    pub fn drop_page_cache(&self) {
        self.base.drop_page_cache();
        for s in &self.sources {
            s.handle().drop_page_cache();
        }
    }
}
