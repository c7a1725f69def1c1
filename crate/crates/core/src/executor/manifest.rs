use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{BlockKey, CheckpointHandle};
use crate::costmodel::{AccessUnit, CostBreakdown, ExpertId};
use crate::digest::{canonical_json_pretty, Digest};
use crate::error::{Error, Result};
use crate::meter::IoMeter;
use crate::operators::OperatorParams;
use crate::planner::{MergePlan, PlanExpert};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PLAN_FILE: &str = "plan.json";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputMode {
    #[default]
    Materialized,
    /// Blocks bit-identical to the base are stored as references.
    Reference,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub base: Digest,
    pub experts: Vec<PlanExpert>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TouchedBlock {
    pub tensor: String,
    pub block_index: u32,
    pub experts: Vec<ExpertId>,
}

/// Replayable record of one run. Contains no timestamps so identical runs
/// produce byte-identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub plan_digest: Digest,
    pub params: OperatorParams,
    pub lineage: Lineage,
    pub output_mode: OutputMode,
    /// Blocks with at least one expert read, in traversal order.
    pub touched: Vec<TouchedBlock>,
    pub references: Vec<BlockKey>,
    /// Per tensor, the fraction of its blocks read from each expert.
    pub coverage: BTreeMap<String, Vec<f64>>,
    pub cost: CostBreakdown,
    pub expert_read_bytes: Vec<u64>,
    pub planned_cost: u64,
    pub budget_bytes: u64,
    pub output_digest: Digest,
}

impl Manifest {
    pub fn to_bytes(&self) -> Vec<u8> {
        canonical_json_pretty(self).expect("manifest serializes")
    }

    pub fn digest(&self) -> Digest {
        Digest::of(&self.to_bytes())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<u64> {
        let path = path.as_ref();
        let bytes = self.to_bytes();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        std::io::Write::write_all(&mut f, &bytes).map_err(|e| Error::io(path, e))?;
        f.sync_all().map_err(|e| Error::io(path, e))?;
        Ok(bytes.len() as u64)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_slice(&bytes)?;
        if m.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::PlanMismatch(format!("manifest format_version {}", m.format_version)));
        }
        Ok(m)
    }

    /// Units the run actually read from.
    pub fn read_units(&self) -> impl Iterator<Item = AccessUnit> + '_ {
        self.touched.iter().flat_map(|t| {
            t.experts
                .iter()
                .map(move |&e| AccessUnit::new(e, BlockKey::new(t.tensor.clone(), t.block_index)))
        })
    }
}

pub struct ManifestInputs<'a> {
    pub plan: &'a MergePlan,
    pub base: &'a CheckpointHandle,
    pub meter: &'a IoMeter,
    pub references: Vec<BlockKey>,
    pub output_mode: OutputMode,
    pub output_digest: Digest,
}

/// Assembles the manifest from the plan and the run's meter trace.
pub fn build_manifest(inputs: ManifestInputs<'_>) -> Result<Manifest> {
    let ManifestInputs {
        plan,
        base,
        meter,
        references,
        output_mode,
        output_digest,
    } = inputs;
    let k = plan.experts();
    let trace = meter.trace();
    let mut by_block: BTreeMap<(usize, u32), Vec<ExpertId>> = BTreeMap::new();
    let mut reads: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for unit in trace.keys() {
        let pos = base.tensor_position(&unit.key.tensor).ok_or_else(|| {
            Error::InvalidParameter(format!("trace entry {unit} names no base tensor"))
        })?;
        if unit.expert.index() >= k {
            return Err(Error::InvalidParameter(format!("trace entry {unit} names no plan expert")));
        }
        by_block.entry((pos, unit.key.block_index)).or_default().push(unit.expert);
        reads.entry(unit.key.tensor.clone()).or_insert_with(|| vec![0; k])[unit.expert.index()] += 1;
    }
    let tensors = base.tensors();
    let touched = by_block
        .into_iter()
        .map(|((pos, block_index), experts)| TouchedBlock {
            tensor: tensors[pos].name.clone(),
            block_index,
            experts,
        })
        .collect();
    let coverage = tensors
        .iter()
        .map(|t| {
            let n = t.num_blocks().max(1) as f64;
            let fractions = match reads.get(&t.name) {
                Some(r) => r.iter().map(|&c| c as f64 / n).collect(),
                None => vec![0.0; k],
            };
            (t.name.clone(), fractions)
        })
        .collect();
    let per_expert = meter.per_expert_bytes();
    let expert_read_bytes = (0..k)
        .map(|i| per_expert.get(&ExpertId(i as u32)).copied().unwrap_or(0))
        .collect();
    Ok(Manifest {
        format_version: MANIFEST_FORMAT_VERSION,
        plan_digest: plan.digest,
        params: plan.params().clone(),
        lineage: Lineage {
            base: plan.body.base,
            experts: plan.body.experts.clone(),
        },
        output_mode,
        touched,
        references,
        coverage,
        cost: meter.breakdown(),
        expert_read_bytes,
        planned_cost: plan.estimated_cost(),
        budget_bytes: plan.budget_bytes(),
        output_digest,
    })
}
