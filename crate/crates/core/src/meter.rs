//! Byte-exact I/O accounting.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Mutex;

use crate::container::BlockKey;
use crate::costmodel::{AccessUnit, CostBreakdown, ExpertId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelKind {
    Base,
    Expert,
    Output,
    Metadata,
}

/// Where a physical read or write is charged. Expert reads carry the expert
/// id so the meter can keep a per-unit trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Base,
    Expert(ExpertId),
    Output,
    Metadata,
}

const NO_LIMIT: u64 = u64::MAX;

/// Per-channel byte counters plus the expert read trace `N_run(i,t,b)`.
///
/// Counters are atomic; totals are exact once all readers have finished.
#[derive(Debug)]
pub struct IoMeter {
    base: AtomicU64,
    expert: AtomicU64,
    output: AtomicU64,
    metadata: AtomicU64,
    expert_limit: AtomicU64,
    in_run: AtomicBool,
    trace: Mutex<Trace>,
}

#[derive(Debug, Default)]
struct Trace {
    counts: BTreeMap<AccessUnit, u32>,
    per_expert: BTreeMap<ExpertId, u64>,
}

impl Default for IoMeter {
    fn default() -> Self {
        Self::new()
    }
}

impl IoMeter {
    pub fn new() -> Self {
        IoMeter {
            base: AtomicU64::new(0),
            expert: AtomicU64::new(0),
            output: AtomicU64::new(0),
            metadata: AtomicU64::new(0),
            expert_limit: AtomicU64::new(NO_LIMIT),
            in_run: AtomicBool::new(false),
            trace: Mutex::new(Trace::default()),
        }
    }

    /// Hard cap on expert bytes; a charge that would cross it fails.
    pub fn set_expert_limit(&self, limit: Option<u64>) {
        self.expert_limit.store(limit.unwrap_or(NO_LIMIT), Ordering::SeqCst);
    }

    /// Marks the meter as belonging to a merge run. Catalog analysis performed
    /// under an in-run meter is charged to the expert channel instead of the
    /// metadata channel.
    pub fn set_in_run(&self, in_run: bool) {
        self.in_run.store(in_run, Ordering::SeqCst);
    }

    pub fn in_run(&self) -> bool {
        self.in_run.load(Ordering::SeqCst)
    }

    pub fn charge(&self, channel: &Channel, key: &BlockKey, bytes: u64) -> Result<()> {
        match channel {
            Channel::Expert(expert) => self.charge_unit(&AccessUnit::new(*expert, key.clone()), bytes),
            Channel::Base => {
                self.add(ChannelKind::Base, bytes);
                Ok(())
            }
            Channel::Output => {
                self.add(ChannelKind::Output, bytes);
                Ok(())
            }
            Channel::Metadata => {
                self.add(ChannelKind::Metadata, bytes);
                Ok(())
            }
        }
    }

    /// Charges an expert read for `unit` and records it in the trace.
    pub fn charge_unit(&self, unit: &AccessUnit, bytes: u64) -> Result<()> {
        let limit = self.expert_limit.load(Ordering::SeqCst);
        let mut current = self.expert.load(Ordering::SeqCst);
        loop {
            let next = current.saturating_add(bytes);
            if next > limit {
                return Err(Error::BudgetViolation {
                    attempted: next,
                    limit,
                });
            }
            match self
                .expert
                .compare_exchange(current, next, Ordering::SeqCst, Ordering::SeqCst)
            {
                Ok(_) => break,
                Err(actual) => current = actual,
            }
        }
        let mut trace = self.trace.lock().expect("meter trace poisoned");
        *trace.counts.entry(unit.clone()).or_insert(0) += 1;
        *trace.per_expert.entry(unit.expert).or_insert(0) += bytes;
        Ok(())
    }

    /// Untraced, unlimited charge.
    pub fn add(&self, kind: ChannelKind, bytes: u64) {
        let counter = match kind {
            ChannelKind::Base => &self.base,
            ChannelKind::Expert => &self.expert,
            ChannelKind::Output => &self.output,
            ChannelKind::Metadata => &self.metadata,
        };
        counter.fetch_add(bytes, Ordering::SeqCst);
    }

    pub fn breakdown(&self) -> CostBreakdown {
        CostBreakdown {
            base_bytes: self.base.load(Ordering::SeqCst),
            expert_bytes: self.expert.load(Ordering::SeqCst),
            output_bytes: self.output.load(Ordering::SeqCst),
            metadata_bytes: self.metadata.load(Ordering::SeqCst),
        }
    }

    /// Read counts per expert unit.
    pub fn trace(&self) -> BTreeMap<AccessUnit, u32> {
        self.trace.lock().expect("meter trace poisoned").counts.clone()
    }

    /// Expert-channel bytes charged per expert.
    pub fn per_expert_bytes(&self) -> BTreeMap<ExpertId, u64> {
        self.trace.lock().expect("meter trace poisoned").per_expert.clone()
    }
}
