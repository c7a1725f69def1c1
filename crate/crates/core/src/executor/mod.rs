//! Budget-enforced streaming execution and atomic publication.
//!
//! Base blocks stream in the plan's tensor order. For each block the selected
//! experts' deltas are pulled, the operator is applied, and the result is
//! written (or referenced) into a staging directory. Once the payload is
//! validated, the header, manifest and plan are written next to it and the
//! directory is renamed into the snapshot namespace.
//!
//! The meter is capped at the plan's estimated cost, so any read outside the
//! plan fails the run before anything becomes visible.

mod manifest;
mod store;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::Catalog;
use crate::container::{
    write_header, BlockBuffer, BlockKey, CheckpointHandle, Header, Role, FORMAT_VERSION,
};
use crate::costmodel::{AccessUnit, CostBreakdown};
use crate::delta_source::{DeltaIterator, DeltaSource};
use crate::digest::canonical_json_pretty;
use crate::error::{Error, Result};
use crate::meter::{Channel, ChannelKind, IoMeter};
pub use crate::operators::apply_budgeted_op;
use crate::planner::MergePlan;

pub use manifest::{
    build_manifest, Lineage, Manifest, ManifestInputs, OutputMode, TouchedBlock, MANIFEST_FILE,
    MANIFEST_FORMAT_VERSION, PLAN_FILE,
};
pub use store::{CommitRecord, Snapshot, Store, Transaction, COMMIT_LOG, SNAPSHOTS_DIR, STAGING_DIR};

/// Stage boundaries at which a run can be made to abort on purpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultPoint {
    AfterBegin,
    AfterBaseRead,
    AfterPull,
    AfterWrite,
    AfterTensor,
    AfterStagingFlush,
    AfterHashValidation,
    AfterManifestBuilt,
    BeforePublish,
    /// After the rename, before the commit record. Produces a post-publish
    /// failure rather than an abort.
    AfterPublish,
}

impl FaultPoint {
    /// Every point before the snapshot becomes visible.
    pub const PRE_PUBLISH: [FaultPoint; 9] = [
        FaultPoint::AfterBegin,
        FaultPoint::AfterBaseRead,
        FaultPoint::AfterPull,
        FaultPoint::AfterWrite,
        FaultPoint::AfterTensor,
        FaultPoint::AfterStagingFlush,
        FaultPoint::AfterHashValidation,
        FaultPoint::AfterManifestBuilt,
        FaultPoint::BeforePublish,
    ];
}

impl std::str::FromStr for FaultPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.into()))
            .map_err(|_| Error::InvalidParameter(format!("unknown fault point {s:?}")))
    }
}

#[derive(Debug, Clone, Default)]
pub struct ExecOptions {
    pub output_mode: OutputMode,
    /// Worker threads for block computation; 0 or 1 runs inline.
    pub jobs: usize,
    pub fault: Option<FaultPoint>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stream: Duration,
    pub finalize: Duration,
    pub publish: Duration,
}

impl Timings {
    pub fn total(&self) -> Duration {
        self.stream + self.finalize + self.publish
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub snapshot: Snapshot,
    pub manifest: Manifest,
    /// False when an identical snapshot already existed.
    pub created: bool,
    pub manifest_bytes: u64,
    /// Realized cost including the manifest write.
    pub cost: CostBreakdown,
    pub timings: Timings,
}

fn fault(opts: &ExecOptions, at: FaultPoint) -> Result<()> {
    if opts.fault == Some(at) {
        return Err(Error::Aborted(format!("injected fault at {at:?}")));
    }
    Ok(())
}

/// Checks the plan against the catalog, base and sources before any read.
pub fn validate_inputs(plan: &MergePlan, base: &CheckpointHandle, sources: &[DeltaSource], catalog: &Catalog) -> Result<()> {
    plan.validate(catalog)?;
    if base.id() != plan.body.base {
        return Err(Error::PlanMismatch(format!(
            "plan base {} but base checkpoint is {}",
            plan.body.base.short(),
            base.id().short()
        )));
    }
    let order: Vec<&str> = base.tensors().iter().map(|t| t.name.as_str()).collect();
    if order != plan.body.order.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::PlanMismatch("plan tensor order differs from base header order".into()));
    }
    if sources.len() != plan.experts() {
        return Err(Error::PlanMismatch(format!(
            "plan has {} experts, {} sources given",
            plan.experts(),
            sources.len()
        )));
    }
    for (src, exp) in sources.iter().zip(&plan.body.experts) {
        if src.id() != exp.checkpoint_id || src.kind() != exp.kind {
            return Err(Error::PlanMismatch(format!(
                "source for expert {} is {} ({}), plan expects {} ({})",
                exp.id,
                src.id().short(),
                src.kind().as_str(),
                exp.checkpoint_id.short(),
                exp.kind.as_str()
            )));
        }
    }
    Ok(())
}

/// Realized expert bytes ≤ Ĉ ≤ B and every traced unit was selected.
pub fn check_run(plan: &MergePlan, meter: &IoMeter) -> Result<()> {
    let realized = meter.breakdown().expert_bytes;
    if realized > plan.estimated_cost() || plan.estimated_cost() > plan.budget_bytes() {
        return Err(Error::Soundness(format!(
            "realized {realized} / planned {} / budget {}",
            plan.estimated_cost(),
            plan.budget_bytes()
        )));
    }
    let selected: HashSet<&AccessUnit> = plan.selected().iter().collect();
    if let Some(unit) = meter.trace().keys().find(|u| !selected.contains(u)) {
        return Err(Error::Soundness(format!("unit {unit} was read but not selected")));
    }
    Ok(())
}

struct BlockCtx<'a> {
    base: &'a CheckpointHandle,
    iter: &'a DeltaIterator<'a>,
    rows: &'a HashMap<BlockKey, Vec<bool>>,
    empty_row: &'a [bool],
    plan: &'a MergePlan,
    meter: &'a IoMeter,
}

impl BlockCtx<'_> {
    fn run(&self, key: &BlockKey) -> Result<(BlockBuffer, BlockBuffer)> {
        let base_block = self.base.read_block(key, self.meter, Channel::Base)?;
        let row = self.rows.get(key).map_or(self.empty_row, Vec::as_slice);
        let tuple = self.iter.pull_masked(&base_block, row, self.meter)?;
        let out = apply_budgeted_op(&base_block, &tuple, self.plan.params())?;
        Ok((base_block, out))
    }
}

/// Runs `plan` and publishes the result into `store`.
pub fn execute(
    plan: &MergePlan,
    base: &CheckpointHandle,
    sources: &[DeltaSource],
    catalog: &Catalog,
    store: &Store,
    opts: &ExecOptions,
) -> Result<RunReport> {
    validate_inputs(plan, base, sources, catalog)?;
    let meter = IoMeter::new();
    meter.set_in_run(true);
    meter.set_expert_limit(Some(plan.estimated_cost()));
    meter.add(ChannelKind::Metadata, catalog.encode().len() as u64);

    let pool = if opts.jobs > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(opts.jobs)
                .build()
                .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };

    let started = Instant::now();
    let txn = store.begin()?;
    fault(opts, FaultPoint::AfterBegin)?;
    let reference_mode = opts.output_mode == OutputMode::Reference;
    let mut writer = crate::container::StagingWriter::create(txn.dir(), base.tensors().to_vec(), reference_mode)?;
    let rows = plan.mask_rows();
    let empty_row = vec![false; plan.experts()];
    let chunk = opts.jobs.max(1) * 4;
    let mut first_block = true;
    let mut first_tensor = true;

    for name in &plan.body.order {
        let meta = base.tensor(name)?;
        let iter = DeltaIterator::new(sources, base, name)?;
        let ctx = BlockCtx {
            base,
            iter: &iter,
            rows: &rows,
            empty_row: &empty_row,
            plan,
            meter: &meter,
        };
        let keys: Vec<BlockKey> = (0..meta.num_blocks()).map(|b| BlockKey::new(name.clone(), b as u32)).collect();
        for group in keys.chunks(chunk) {
            let results: Vec<Result<(BlockBuffer, BlockBuffer)>> = match &pool {
                Some(pool) => pool.install(|| group.par_iter().map(|k| ctx.run(k)).collect()),
                None => group.iter().map(|k| ctx.run(k)).collect(),
            };
            for r in results {
                let (base_block, out) = r?;
                if first_block {
                    fault(opts, FaultPoint::AfterBaseRead)?;
                    fault(opts, FaultPoint::AfterPull)?;
                }
                writer.write_block_or_reference(&out, &base_block, &meter)?;
                if first_block {
                    fault(opts, FaultPoint::AfterWrite)?;
                    first_block = false;
                }
            }
        }
        if first_tensor {
            fault(opts, FaultPoint::AfterTensor)?;
            first_tensor = false;
        }
    }
    let stream = started.elapsed();

    let finalize_start = Instant::now();
    let staged = writer.finish()?;
    fault(opts, FaultPoint::AfterStagingFlush)?;

    let header = Header {
        format_version: FORMAT_VERSION,
        role: Role::Merged,
        tensors: base.tensors().to_vec(),
        payload_sha256: staged.logical_digest,
        lora: BTreeMap::new(),
        base_ref: (!staged.references.is_empty()).then(|| base.id()),
    };
    write_header(txn.dir(), &header)?;
    meter.add(ChannelKind::Metadata, canonical_json_pretty(&header)?.len() as u64);
    let refs = staged.references.iter().cloned().collect();
    let staged_handle = CheckpointHandle::open(txn.dir())?.with_base_references(base, refs)?;
    staged_handle.verify_payload()?;
    fault(opts, FaultPoint::AfterHashValidation)?;

    check_run(plan, &meter)?;
    let plan_bytes = plan.to_bytes();
    meter.add(ChannelKind::Metadata, plan_bytes.len() as u64);
    let manifest = build_manifest(ManifestInputs {
        plan,
        base,
        meter: &meter,
        references: staged.references.clone(),
        output_mode: opts.output_mode,
        output_digest: staged.logical_digest,
    })?;
    fault(opts, FaultPoint::AfterManifestBuilt)?;

    let plan_path = txn.dir().join(PLAN_FILE);
    std::fs::write(&plan_path, &plan_bytes).map_err(|e| Error::io(&plan_path, e))?;
    let manifest_bytes = manifest.save(txn.dir().join(MANIFEST_FILE))?;
    meter.add(ChannelKind::Metadata, manifest_bytes);
    fault(opts, FaultPoint::BeforePublish)?;
    let finalize = finalize_start.elapsed();

    let publish_start = Instant::now();
    let sid = staged.logical_digest;
    let (snapshot, created) = txn.publish(&sid)?;
    let post = |reason: String| Error::PostPublish {
        sid: sid.to_hex(),
        reason,
    };
    fault(opts, FaultPoint::AfterPublish).map_err(|e| post(e.to_string()))?;
    store
        .append_commit(&CommitRecord {
            sid,
            plan_digest: plan.digest,
            manifest_digest: manifest.digest(),
        })
        .map_err(|e| post(e.to_string()))?;
    let publish = publish_start.elapsed();

    Ok(RunReport {
        snapshot,
        manifest,
        created,
        manifest_bytes,
        cost: meter.breakdown(),
        timings: Timings {
            stream,
            finalize,
            publish,
        },
    })
}

/// Re-executes the plan stored with `snapshot` and checks that the snapshot
/// id and manifest come out identical.
pub fn replay(
    snapshot: &Snapshot,
    base: &CheckpointHandle,
    sources: &[DeltaSource],
    catalog: &Catalog,
    store: &Store,
    opts: &ExecOptions,
) -> Result<RunReport> {
    let recorded = snapshot.manifest()?;
    let plan = MergePlan::load(snapshot.plan_path())?;
    if plan.digest != recorded.plan_digest {
        return Err(Error::PlanMismatch(format!(
            "stored plan {} does not match manifest plan digest {}",
            plan.digest.short(),
            recorded.plan_digest.short()
        )));
    }
    let opts = ExecOptions {
        output_mode: recorded.output_mode,
        ..opts.clone()
    };
    let report = execute(&plan, base, sources, catalog, store, &opts)?;
    if report.snapshot.id != snapshot.id {
        return Err(Error::IntegrityMismatch {
            what: "replayed snapshot id".into(),
            expected: snapshot.id.to_hex(),
            actual: report.snapshot.id.to_hex(),
        });
    }
    if report.manifest != recorded {
        return Err(Error::IntegrityMismatch {
            what: "replayed manifest".into(),
            expected: recorded.digest().to_hex(),
            actual: report.manifest.digest().to_hex(),
        });
    }
    Ok(report)
}
