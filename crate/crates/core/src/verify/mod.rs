//! Deviation metrics, bound checkers and the soundness audit.

mod reference;

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::catalog::Catalog;
use crate::container::{BlockKey, CheckpointHandle};
use crate::costmodel::{AccessMask, AccessUnit, ExpertId};
use crate::delta_source::DeltaSource;
use crate::error::{Error, Result};
use crate::executor::{Manifest, Snapshot};
use crate::operators::{ties_keep_count, OperatorKind, OperatorParams};
use crate::planner::MergePlan;

pub use reference::{dense_delta, dense_deltas, full_read_merge, reference_merge, DenseCheckpoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDeviation {
    pub tensor: String,
    pub abs_l2: f64,
    pub rel_l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub rel_l2: f64,
    pub abs_l2: f64,
    pub reference_l2: f64,
    /// Nearest-rank 95th percentile of per-block absolute ℓ2 deviations.
    pub p95_block: f64,
    pub max_block: f64,
    pub blocks: usize,
    pub bit_identical: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub touched_ratio: Option<f64>,
    pub per_tensor: Vec<TensorDeviation>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Nearest-rank percentile of an unsorted sample; 0 for an empty sample.
pub fn nearest_rank(values: &[f64], pct: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

/// `‖M_full − M_A‖₂ / ‖M_full‖₂` and block-level statistics, in f64.
pub fn deviation(merged: &DenseCheckpoint, reference: &DenseCheckpoint) -> Result<DeviationReport> {
    if !merged.same_geometry(reference) {
        return Err(Error::GeometryMismatch("merged and reference checkpoints differ in geometry".into()));
    }
    let mut total_sq = 0f64;
    let mut ref_sq = 0f64;
    let mut per_block = Vec::new();
    let mut per_tensor = Vec::new();
    for ((meta, a), (_, r)) in merged.tensors().iter().zip(reference.tensors()) {
        let mut t_sq = 0f64;
        let mut t_ref = 0f64;
        for b in 0..meta.num_blocks() {
            let mut b_sq = 0f64;
            for j in meta.block_range(b) {
                let d = a[j] as f64 - r[j] as f64;
                b_sq += d * d;
                t_ref += (r[j] as f64) * (r[j] as f64);
            }
            t_sq += b_sq;
            per_block.push(b_sq.sqrt());
        }
        total_sq += t_sq;
        ref_sq += t_ref;
        per_tensor.push(TensorDeviation {
            tensor: meta.name.clone(),
            abs_l2: t_sq.sqrt(),
            rel_l2: ratio(t_sq.sqrt(), t_ref.sqrt()),
        });
    }
    Ok(DeviationReport {
        rel_l2: ratio(total_sq.sqrt(), ref_sq.sqrt()),
        abs_l2: total_sq.sqrt(),
        reference_l2: ref_sq.sqrt(),
        p95_block: nearest_rank(&per_block, 95.0),
        max_block: per_block.iter().copied().fold(0.0, f64::max),
        blocks: per_block.len(),
        bit_identical: merged.bit_eq(reference),
        touched_ratio: None,
        per_tensor,
    })
}

fn delta_norm(catalog: &Catalog, unit: &AccessUnit) -> Result<f64> {
    let entry = catalog.entry(unit).ok_or_else(|| Error::UnitNotInCatalog {
        expert: unit.expert.0,
        key: unit.key.clone(),
    })?;
    match (entry.stats.has_stats, entry.stats.delta_l2) {
        (true, Some(l2)) => Ok(l2),
        _ => Err(Error::MissingStats {
            expert: unit.expert.0,
            key: unit.key.clone(),
        }),
    }
}

fn catalog_blocks(catalog: &Catalog) -> Vec<BlockKey> {
    let mut keys: Vec<BlockKey> = catalog.entries().iter().map(|e| e.key.clone()).collect();
    keys.sort();
    keys.dedup();
    keys
}

/// Additive omission bound for fixed-coefficient averaging: returns
/// `((Σ q²)^½, Σ q)` with `q_{t,b} = Σ_i (1 − A_{i,t,b}) |α_i| ‖Δ_{i,t,b}‖₂`.
pub fn omission_bound(plan: &MergePlan, catalog: &Catalog, alphas: &[f64]) -> Result<(f64, f64)> {
    if plan.params().op != OperatorKind::AvgFixed {
        return Err(Error::UnsupportedOperator(format!(
            "the omission bound applies to avg-fixed, not {}",
            plan.params().op
        )));
    }
    let selected: HashSet<&AccessUnit> = plan.selected().iter().collect();
    let (mut sq, mut l1) = (0f64, 0f64);
    for key in catalog_blocks(catalog) {
        let mut q = 0f64;
        for (i, a) in alphas.iter().enumerate() {
            let unit = AccessUnit::new(ExpertId(i as u32), key.clone());
            if catalog.entry(&unit).is_none() || selected.contains(&unit) {
                continue;
            }
            q += a.abs() * delta_norm(catalog, &unit)?;
        }
        sq += q * q;
        l1 += q;
    }
    Ok((sq.sqrt(), l1))
}

/// Coefficient-drift bound for selected-only averaging against fixed `α`:
/// `(Σ r²)^½` with `r_{t,b} = Σ_i |α_i − β_i(A)| ‖Δ_{i,t,b}‖₂`.
pub fn coefficient_drift_bound(plan: &MergePlan, catalog: &Catalog, alphas: &[f64]) -> Result<f64> {
    if plan.params().op != OperatorKind::AvgRenorm {
        return Err(Error::UnsupportedOperator(format!(
            "the coefficient-drift bound applies to avg-renorm, not {}",
            plan.params().op
        )));
    }
    let selected: HashSet<&AccessUnit> = plan.selected().iter().collect();
    let mut sq = 0f64;
    for key in catalog_blocks(catalog) {
        let units: Vec<AccessUnit> = (0..alphas.len())
            .map(|i| AccessUnit::new(ExpertId(i as u32), key.clone()))
            .filter(|u| catalog.entry(u).is_some())
            .collect();
        let count = units.iter().filter(|u| selected.contains(u)).count();
        let mut r = 0f64;
        for u in &units {
            let beta = if selected.contains(u) { 1.0 / count as f64 } else { 0.0 };
            r += (alphas[u.expert.index()] - beta).abs() * delta_norm(catalog, u)?;
        }
        sq += r * r;
    }
    Ok(sq.sqrt())
}

fn ulp(x: f32) -> f64 {
    let x = x.abs();
    if !x.is_finite() {
        return f64::INFINITY;
    }
    let next = f32::from_bits(x.to_bits() + 1);
    (next as f64) - (x as f64)
}

/// `‖(ulp(a) + ulp(b)) / 2‖₂` over all coordinates: the most two independent
/// f32 roundings can add to a distance measured between `a` and `b`.
pub fn f32_rounding_allowance(a: &DenseCheckpoint, b: &DenseCheckpoint) -> f64 {
    let mut sq = 0f64;
    for ((_, va), (_, vb)) in a.tensors().iter().zip(b.tensors()) {
        for (&x, &y) in va.iter().zip(vb) {
            let h = (ulp(x) + ulp(y)) / 2.0;
            sq += h * h;
        }
    }
    sq.sqrt()
}

/// For fixed coefficients, `M_full − M_A` equals the omitted terms
/// `Σ_{i∉A} α_i Δ_i`. Returns the ℓ2 norm of that sum and the residual of
/// the identity against the direct difference of `full` and `masked`,
/// less the half-ulp rounding of both outputs, relative to that norm.
pub fn exact_difference_residual(
    full: &DenseCheckpoint,
    masked: &DenseCheckpoint,
    base: &CheckpointHandle,
    sources: &[DeltaSource],
    plan: &MergePlan,
) -> Result<(f64, f64)> {
    if plan.params().op != OperatorKind::AvgFixed {
        return Err(Error::UnsupportedOperator("exact difference needs avg-fixed".into()));
    }
    let selected: HashSet<&AccessUnit> = plan.selected().iter().collect();
    let dense_base = DenseCheckpoint::load(base)?;
    let deltas = dense_deltas(&dense_base, sources)?;
    let alphas = &plan.params().alphas;
    let (mut omitted_sq, mut resid_sq, mut allow_sq) = (0f64, 0f64, 0f64);
    for (ti, (meta, f)) in full.tensors().iter().enumerate() {
        let m = &masked.tensors()[ti].1;
        for b in 0..meta.num_blocks() {
            let key = BlockKey::new(meta.name.clone(), b as u32);
            let omitted: Vec<usize> = (0..sources.len())
                .filter(|&i| !selected.contains(&AccessUnit::new(ExpertId(i as u32), key.clone())))
                .collect();
            for j in meta.block_range(b) {
                let predicted: f64 = omitted.iter().map(|&i| alphas[i] * deltas[i][ti][j] as f64).sum();
                let direct = f[j] as f64 - m[j] as f64;
                omitted_sq += predicted * predicted;
                resid_sq += (direct - predicted) * (direct - predicted);
                let h = (ulp(f[j]) + ulp(m[j])) / 2.0;
                allow_sq += h * h;
            }
        }
    }
    let excess = (resid_sq.sqrt() - allow_sq.sqrt()).max(0.0);
    Ok((omitted_sq.sqrt(), ratio(excess, omitted_sq.sqrt())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoundnessReport {
    pub realized_expert_bytes: u64,
    pub planned_cost: u64,
    pub budget_bytes: u64,
    pub trace_within_selection: bool,
    pub pass: bool,
    pub violations: Vec<String>,
}

/// Audits a finished run: realized ≤ Ĉ ≤ B and every read unit was selected.
pub fn check_soundness(manifest: &Manifest, plan: &MergePlan, budget_bytes: u64) -> Result<SoundnessReport> {
    plan.verify_digest()?;
    if manifest.plan_digest != plan.digest {
        return Err(Error::PlanMismatch(format!(
            "manifest plan digest {} differs from plan {}",
            manifest.plan_digest.short(),
            plan.digest.short()
        )));
    }
    let realized = manifest.cost.expert_bytes;
    let planned = plan.estimated_cost();
    let mut violations = Vec::new();
    if realized > planned {
        violations.push(format!("realized expert bytes {realized} exceed planned {planned}"));
    }
    if planned > budget_bytes {
        violations.push(format!("planned {planned} exceeds budget {budget_bytes}"));
    }
    if manifest.expert_read_bytes.iter().sum::<u64>() != realized {
        violations.push("per-expert read bytes do not sum to the expert channel".into());
    }
    let selected: HashSet<&AccessUnit> = plan.selected().iter().collect();
    let stray: Vec<AccessUnit> = manifest.read_units().filter(|u| !selected.contains(u)).collect();
    for u in stray.iter().take(8) {
        violations.push(format!("unit {u} read but not selected"));
    }
    Ok(SoundnessReport {
        realized_expert_bytes: realized,
        planned_cost: planned,
        budget_bytes,
        trace_within_selection: stray.is_empty(),
        pass: violations.is_empty(),
        violations,
    })
}

/// Accessed fraction of expert blocks, normalized two ways.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TouchedRatio {
    /// Selected units over all units.
    pub universe: f64,
    /// Selected units with a nonempty post-trim kept set over all units with
    /// a nonempty post-trim kept set.
    pub post_trim: f64,
    pub basis: String,
}

/// Touched ratio after TIES trimming. A unit counts when its trimmed delta
/// keeps at least one nonzero value.
pub fn ties_touched_ratio(
    base: &CheckpointHandle,
    sources: &[DeltaSource],
    params: &OperatorParams,
    mask: &AccessMask,
) -> Result<TouchedRatio> {
    let dense_base = DenseCheckpoint::load(base)?;
    let deltas = dense_deltas(&dense_base, sources)?;
    let mut total = 0usize;
    let mut nonempty = 0usize;
    let mut selected_nonempty = 0usize;
    for (ti, (meta, _)) in dense_base.tensors().iter().enumerate() {
        for b in 0..meta.num_blocks() {
            let range = meta.block_range(b);
            let keep = ties_keep_count(params.ties_density, range.len());
            let key = BlockKey::new(meta.name.clone(), b as u32);
            for (i, d) in deltas.iter().enumerate() {
                total += 1;
                let mut mags: Vec<f32> = d[ti][range.clone()].iter().map(|v| v.abs()).collect();
                mags.sort_by(|a, b| b.total_cmp(a));
                let kept_nonzero = mags.iter().take(keep).any(|&v| v > 0.0);
                if kept_nonzero {
                    nonempty += 1;
                    if mask.contains(&AccessUnit::new(ExpertId(i as u32), key.clone())) {
                        selected_nonempty += 1;
                    }
                }
            }
        }
    }
    Ok(TouchedRatio {
        universe: ratio(mask.len() as f64, total as f64),
        post_trim: ratio(selected_nonempty as f64, nonempty as f64),
        basis: "universe-cost".into(),
    })
}

/// Everything `verify` reports for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub snapshot: String,
    pub plan_digest: String,
    pub operator: OperatorKind,
    pub deviation: DeviationReport,
    pub soundness: SoundnessReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omission_bound: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ties_touched: Option<TouchedRatio>,
    pub coverage: BTreeMap<String, Vec<f64>>,
}

fn unless_missing_stats<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::MissingStats { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Audits a published snapshot against its stored plan. The reference is the
/// full-read merge when `against_full`, otherwise the oracle evaluated under
/// the plan's own mask.
pub fn verify_snapshot(
    snapshot: &Snapshot,
    base: &CheckpointHandle,
    sources: &[DeltaSource],
    catalog: &Catalog,
    against_full: bool,
) -> Result<VerifyReport> {
    let manifest = snapshot.manifest()?;
    let plan = MergePlan::load(snapshot.plan_path())?;
    plan.validate(catalog)?;
    let params = plan.params();
    let mask = plan.mask(catalog)?;
    let merged = DenseCheckpoint::load(&snapshot.open(base)?)?;
    let reference = if against_full {
        full_read_merge(base, sources, params)?
    } else {
        reference_merge(base, sources, params, Some(&mask))?
    };
    let mut dev = deviation(&merged, &reference)?;
    let soundness = check_soundness(&manifest, &plan, plan.budget_bytes())?;
    let omission = match params.op {
        OperatorKind::AvgFixed => unless_missing_stats(omission_bound(&plan, catalog, &params.alphas))?,
        _ => None,
    };
    let drift = match params.op {
        OperatorKind::AvgRenorm => {
            let k = sources.len();
            unless_missing_stats(coefficient_drift_bound(&plan, catalog, &vec![1.0 / k as f64; k]))?
        }
        _ => None,
    };
    let ties_touched = match params.op {
        OperatorKind::Ties => Some(ties_touched_ratio(base, sources, params, &mask)?),
        _ => None,
    };
    dev.touched_ratio = Some(if catalog.is_empty() { 0.0 } else { mask.len() as f64 / catalog.len() as f64 });
    Ok(VerifyReport {
        snapshot: snapshot.id.to_hex(),
        plan_digest: plan.digest.to_hex(),
        operator: params.op,
        deviation: dev,
        soundness,
        omission_bound: omission,
        drift_bound: drift,
        ties_touched,
        coverage: manifest.coverage,
    })
}
