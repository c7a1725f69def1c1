//! Greedy budget-aware planning over catalog statistics.
//!
//! Candidates are scored, sorted with a fully specified tie-break, and taken
//! greedily while they fit the budget. A candidate that does not fit is
//! skipped and the scan continues.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::catalog::Catalog;
use crate::container::BlockKey;
use crate::costmodel::{units_cost, AccessMask, AccessUnit, Budget, ExpertId};
use crate::delta_source::SourceKind;
use crate::digest::{canonical_json, canonical_json_pretty, Digest};
use crate::error::{Error, Result};
use crate::operators::{OperatorKind, OperatorParams};

pub const PLAN_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoringRule {
    /// `s = u`
    Utility,
    /// `s = u / byte_cost`
    #[default]
    UtilityPerByte,
}

impl std::str::FromStr for ScoringRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "utility" => Ok(ScoringRule::Utility),
            "utility-per-byte" => Ok(ScoringRule::UtilityPerByte),
            other => Err(Error::InvalidParameter(format!("unknown scoring rule {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScore {
    pub unit: AccessUnit,
    pub utility: f64,
    pub byte_cost: u64,
    pub score: f64,
    pub has_stats: bool,
}

impl ScoringRule {
    pub fn score(self, utility: f64, byte_cost: u64) -> f64 {
        match self {
            ScoringRule::Utility => utility,
            ScoringRule::UtilityPerByte if byte_cost == 0 => {
                if utility > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                }
            }
            ScoringRule::UtilityPerByte => utility / byte_cost as f64,
        }
    }
}

/// Coefficient magnitude used for utility. Fixed-coefficient operators use
/// their own `α`; the others use `1/K`.
fn utility_weight(params: &OperatorParams, expert: ExpertId, experts: usize) -> f64 {
    match params.op {
        OperatorKind::AvgFixed | OperatorKind::Dare => params.alphas.get(expert.index()).map_or(0.0, |a| a.abs()),
        OperatorKind::AvgRenorm | OperatorKind::Ties => 1.0 / experts.max(1) as f64,
    }
}

fn candidate_order(a: &CandidateScore, b: &CandidateScore) -> Ordering {
    b.has_stats
        .cmp(&a.has_stats)
        .then_with(|| b.score.total_cmp(&a.score))
        .then_with(|| a.unit.key.tensor.cmp(&b.unit.key.tensor))
        .then_with(|| a.unit.key.block_index.cmp(&b.unit.key.block_index))
        .then_with(|| a.unit.expert.cmp(&b.unit.expert))
}

/// Scores every catalog unit and sorts by decreasing score. Units without
/// statistics get utility 0 and come last, in tensor/block/expert order.
pub fn score_candidates(catalog: &Catalog, params: &OperatorParams, rule: ScoringRule) -> Vec<CandidateScore> {
    let k = catalog.expert_count();
    let mut out: Vec<CandidateScore> = catalog
        .entries()
        .iter()
        .map(|e| {
            let utility = match (e.stats.has_stats, e.stats.delta_l2) {
                (true, Some(l2)) => utility_weight(params, e.expert, k) * l2,
                _ => 0.0,
            };
            let score = if e.stats.has_stats { rule.score(utility, e.stats.byte_cost) } else { 0.0 };
            CandidateScore {
                unit: e.unit(),
                utility,
                byte_cost: e.stats.byte_cost,
                score,
                has_stats: e.stats.has_stats,
            }
        })
        .collect();
    out.sort_by(candidate_order);
    out
}

/// Skip-and-continue greedy: takes each candidate iff it still fits.
/// Returns the selected units in scan order and their total cost.
pub fn greedy_select(candidates: &[CandidateScore], budget: u64) -> (Vec<AccessUnit>, u64) {
    let mut spent = 0u64;
    let mut selected = Vec::new();
    for c in candidates {
        if let Some(next) = spent.checked_add(c.byte_cost) {
            if next <= budget {
                spent = next;
                selected.push(c.unit.clone());
            }
        }
    }
    (selected, spent)
}

/// What the caller asked for, before resolution against the universe cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetRequest {
    Bytes(u64),
    Fraction(f64),
    Full,
}

impl BudgetRequest {
    pub fn resolve(self, universe_cost: u64) -> Result<Budget> {
        match self {
            BudgetRequest::Bytes(b) => Ok(Budget::Bytes(b)),
            BudgetRequest::Fraction(f) => Budget::fraction(f, universe_cost),
            BudgetRequest::Full => Ok(Budget::Full),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanExpert {
    pub id: ExpertId,
    pub checkpoint_id: Digest,
    pub kind: SourceKind,
}

/// How the plan was produced. Not covered by the digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub scoring: ScoringRule,
    pub requested: BudgetRequest,
    /// Cost basis a fractional budget was normalized against.
    pub basis: String,
    pub universe_cost: u64,
}

/// The digest-covered part of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanBody {
    pub params: OperatorParams,
    pub base: Digest,
    pub experts: Vec<PlanExpert>,
    pub universe: Digest,
    /// Tensor traversal order (base header order).
    pub order: Vec<String>,
    /// Selected units in canonical `(expert, tensor, block)` order.
    pub selected: Vec<AccessUnit>,
    pub budget: Budget,
    pub budget_bytes: u64,
    pub estimated_cost: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergePlan {
    pub format_version: u32,
    #[serde(flatten)]
    pub body: PlanBody,
    pub provenance: Provenance,
    pub digest: Digest,
}

pub fn plan_digest(body: &PlanBody) -> Digest {
    let mut bytes = b"plan/v1\n".to_vec();
    bytes.extend(canonical_json(body).expect("plan body serializes"));
    Digest::of(&bytes)
}

impl MergePlan {
    pub fn from_body(body: PlanBody, provenance: Provenance) -> Self {
        let digest = plan_digest(&body);
        MergePlan {
            format_version: PLAN_FORMAT_VERSION,
            body,
            provenance,
            digest,
        }
    }

    pub fn params(&self) -> &OperatorParams {
        &self.body.params
    }

    pub fn selected(&self) -> &[AccessUnit] {
        &self.body.selected
    }

    pub fn estimated_cost(&self) -> u64 {
        self.body.estimated_cost
    }

    pub fn budget_bytes(&self) -> u64 {
        self.body.budget_bytes
    }

    pub fn experts(&self) -> usize {
        self.body.experts.len()
    }

    pub fn mask(&self, catalog: &Catalog) -> Result<AccessMask> {
        AccessMask::new(catalog, self.body.selected.iter().cloned())
    }

    /// Mask rows keyed by block; blocks absent from the map have empty rows.
    pub fn mask_rows(&self) -> HashMap<BlockKey, Vec<bool>> {
        let k = self.experts();
        let mut rows: HashMap<BlockKey, Vec<bool>> = HashMap::new();
        for u in &self.body.selected {
            rows.entry(u.key.clone()).or_insert_with(|| vec![false; k])[u.expert.index()] = true;
        }
        rows
    }

    /// Recomputes the digest and checks it against the stored one.
    pub fn verify_digest(&self) -> Result<()> {
        if self.format_version != PLAN_FORMAT_VERSION {
            return Err(Error::PlanMismatch(format!("plan format_version {}", self.format_version)));
        }
        let actual = plan_digest(&self.body);
        if actual != self.digest {
            return Err(Error::PlanMismatch(format!(
                "plan digest {} does not match contents {}",
                self.digest.to_hex(),
                actual.to_hex()
            )));
        }
        Ok(())
    }

    /// Checks that the plan is consistent with `catalog` and feasible.
    pub fn validate(&self, catalog: &Catalog) -> Result<()> {
        self.verify_digest()?;
        let b = &self.body;
        if b.base != catalog.base_id() {
            return Err(Error::PlanMismatch(format!(
                "plan base {} differs from catalog base {}",
                b.base.short(),
                catalog.base_id().short()
            )));
        }
        if b.universe != catalog.universe_digest() {
            return Err(Error::PlanMismatch("plan universe differs from catalog".into()));
        }
        if b.order != catalog.tensors() {
            return Err(Error::PlanMismatch("plan traversal order differs from catalog tensor order".into()));
        }
        let experts: Vec<PlanExpert> = catalog.experts().iter().map(plan_expert).collect();
        if b.experts != experts {
            return Err(Error::PlanMismatch("plan experts differ from catalog experts".into()));
        }
        b.params.validate(experts.len())?;
        for w in b.selected.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::PlanMismatch(format!("selected set not canonical at {}", w[1])));
            }
        }
        let cost = units_cost(b.selected.iter(), catalog)?;
        if cost != b.estimated_cost {
            return Err(Error::PlanMismatch(format!(
                "estimated cost {} but selected units cost {cost}",
                b.estimated_cost
            )));
        }
        if b.budget_bytes != b.budget.resolve(catalog.universe_cost()) {
            return Err(Error::PlanMismatch("budget bytes do not match the budget".into()));
        }
        if b.estimated_cost > b.budget_bytes {
            return Err(Error::Soundness(format!(
                "planned cost {} exceeds budget {}",
                b.estimated_cost, b.budget_bytes
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        canonical_json_pretty(self).expect("plan serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let plan: MergePlan = serde_json::from_slice(bytes)?;
        plan.verify_digest()?;
        Ok(plan)
    }

    /// Writes the plan file and returns its size.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<u64> {
        let path = path.as_ref();
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(bytes.len() as u64)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn plan_expert(e: &crate::catalog::ExpertRecord) -> PlanExpert {
    PlanExpert {
        id: e.id,
        checkpoint_id: e.checkpoint_id,
        kind: e.kind,
    }
}

/// Scores, selects and packages a plan. Reads nothing but the catalog.
pub fn plan(catalog: &Catalog, params: &OperatorParams, rule: ScoringRule, request: BudgetRequest) -> Result<MergePlan> {
    params.validate(catalog.expert_count())?;
    let universe_cost = catalog.universe_cost();
    let budget = request.resolve(universe_cost)?;
    let budget_bytes = budget.resolve(universe_cost);
    let candidates = score_candidates(catalog, params, rule);
    let (mut selected, estimated_cost) = greedy_select(&candidates, budget_bytes);
    selected.sort();
    let body = PlanBody {
        params: params.clone(),
        base: catalog.base_id(),
        experts: catalog.experts().iter().map(plan_expert).collect(),
        universe: catalog.universe_digest(),
        order: catalog.tensors().to_vec(),
        selected,
        budget,
        budget_bytes,
        estimated_cost,
    };
    let provenance = Provenance {
        scoring: rule,
        requested: request,
        basis: "universe-cost".into(),
        universe_cost,
    };
    Ok(MergePlan::from_body(body, provenance))
}

/// Plan for an explicit mask with budget equal to its cost.
pub fn plan_from_mask(catalog: &Catalog, params: &OperatorParams, mask: &AccessMask) -> Result<MergePlan> {
    params.validate(catalog.expert_count())?;
    if mask.universe_digest() != catalog.universe_digest() {
        return Err(Error::PlanMismatch("mask was built against a different catalog".into()));
    }
    let estimated_cost = crate::costmodel::mask_cost(mask, catalog)?;
    let body = PlanBody {
        params: params.clone(),
        base: catalog.base_id(),
        experts: catalog.experts().iter().map(plan_expert).collect(),
        universe: catalog.universe_digest(),
        order: catalog.tensors().to_vec(),
        selected: mask.selected().iter().cloned().collect(),
        budget: Budget::Bytes(estimated_cost),
        budget_bytes: estimated_cost,
        estimated_cost,
    };
    let provenance = Provenance {
        scoring: ScoringRule::default(),
        requested: BudgetRequest::Bytes(estimated_cost),
        basis: "explicit-mask".into(),
        universe_cost: catalog.universe_cost(),
    };
    Ok(MergePlan::from_body(body, provenance))
}
