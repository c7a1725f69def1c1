//! End-to-end acceptance checks. Each check prints one PASS/FAIL line; the
//! process exits nonzero if any check fails.

mod common;

use std::collections::HashSet;
use std::time::Instant;

use common::{random_mask, random_params, random_spec, rng, Fixture};
use mergepipe::catalog::Catalog;
use mergepipe::costmodel::{expert_read_fraction, AccessUnit};
use mergepipe::delta_source::SourceKind;
use mergepipe::executor::{execute, replay, ExecOptions, FaultPoint, OutputMode, MANIFEST_FILE};
use mergepipe::meter::IoMeter;
use mergepipe::operators::{OperatorKind, OperatorParams};
use mergepipe::planner::{plan, plan_from_mask, BudgetRequest, ScoringRule};
use mergepipe::report::{budget_sweep, default_fractions, linear_fit, median, spearman, OverheadReport, SweepConfig};
use mergepipe::synth::{FamilySpec, TensorSpec};
use mergepipe::verify::{
    check_soundness, coefficient_drift_bound, deviation, exact_difference_residual, f32_rounding_allowance,
    full_read_merge, omission_bound,
};
use mergepipe::ErrorClass;
use rand::Rng;

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

/// Relative slack on the bound comparisons for f64 summation order.
const BOUND_SLACK: f64 = 1e-9;

fn full_budget_consistency() -> Outcome {
    let mut r = rng(0xacc1);
    let ks = [1usize, 2, 4, 8];
    let families = 24;
    let mut kinds_seen = HashSet::new();
    for f in 0..families {
        let k = ks[f % ks.len()];
        let spec = random_spec(&mut r, k);
        let fx = Fixture::new(&spec);
        kinds_seen.extend(fx.family.sources.iter().map(|s| s.kind()));
        for op in OperatorKind::ALL {
            let params = random_params(&mut r, op, k);
            let p = plan(&fx.catalog, &params, ScoringRule::UtilityPerByte, BudgetRequest::Full).unwrap();
            let opts = ExecOptions {
                jobs: r.random_range(1..=3),
                ..ExecOptions::default()
            };
            let got = fx.output(&fx.run(&p, &opts));
            let want = full_read_merge(&fx.family.base, &fx.family.sources, &params).unwrap();
            if !got.bit_eq(&want) {
                return Err(format!("family {f} (K={k}) {op}: output differs from the full-read oracle"));
            }
        }
    }
    if kinds_seen.len() < 3 {
        return Err(format!("only {} source kinds exercised", kinds_seen.len()));
    }
    Ok(format!("{families} families x 4 operators bit-identical at FULL budget"))
}

fn budget_soundness() -> Outcome {
    let mut r = rng(0xacc2);
    let mut triples = 0;
    for f in 0..50 {
        let k = r.random_range(1..=6);
        let fx = Fixture::new(&random_spec(&mut r, k));
        for _ in 0..4 {
            let op = OperatorKind::ALL[r.random_range(0..4)];
            let params = random_params(&mut r, op, k);
            let request = match r.random_range(0..10) {
                0 => BudgetRequest::Full,
                1 => BudgetRequest::Bytes(0),
                2..=5 => BudgetRequest::Fraction(r.random_range(0.0..=1.0)),
                _ => BudgetRequest::Bytes(r.random_range(0..=fx.catalog.universe_cost() + 64)),
            };
            let rule = if r.random_bool(0.5) {
                ScoringRule::UtilityPerByte
            } else {
                ScoringRule::Utility
            };
            let p = plan(&fx.catalog, &params, rule, request).unwrap();
            let report = fx.run(&p, &ExecOptions::default());
            let audit = check_soundness(&report.manifest, &p, p.budget_bytes()).unwrap();
            let selected: HashSet<&AccessUnit> = p.selected().iter().collect();
            let independent = report.cost.expert_bytes <= p.estimated_cost()
                && p.estimated_cost() <= p.budget_bytes()
                && report.manifest.read_units().all(|u| selected.contains(&u));
            if !audit.pass || !independent {
                return Err(format!("family {f} {op} {request:?}: {:?}", audit.violations));
            }
            triples += 1;
        }
    }
    Ok(format!("{triples} (family, operator, budget) triples with zero violations"))
}

fn omission_bound_holds() -> Outcome {
    let mut r = rng(0xacc3);
    let (mut trials, mut worst_ratio, mut worst_identity) = (0, 0f64, 0f64);
    for f in 0..25 {
        let k = r.random_range(1..=5);
        let fx = Fixture::new(&random_spec(&mut r, k));
        let params = random_params(&mut r, OperatorKind::AvgFixed, k);
        let full = full_read_merge(&fx.family.base, &fx.family.sources, &params).unwrap();
        for _ in 0..4 {
            let keep = r.random_range(0.0..=1.0);
            let mask = random_mask(&mut r, &fx.catalog, keep);
            let p = plan_from_mask(&fx.catalog, &params, &mask).unwrap();
            let masked = fx.output(&fx.run(&p, &ExecOptions::default()));
            let measured = deviation(&full, &masked).unwrap().abs_l2;
            let (l2, l1) = omission_bound(&p, &fx.catalog, &params.alphas).unwrap();
            let allowance = f32_rounding_allowance(&full, &masked);
            if measured > l2 * (1.0 + BOUND_SLACK) + allowance || l2 > l1 * (1.0 + BOUND_SLACK) {
                return Err(format!("family {f}: measured {measured:e}, l2 {l2:e}, l1 {l1:e}"));
            }
            let (_, residual) =
                exact_difference_residual(&full, &masked, &fx.family.base, &fx.family.sources, &p).unwrap();
            if residual > 1e-6 {
                return Err(format!("family {f}: exact-difference residual {residual:e}"));
            }
            if l2 > 0.0 {
                worst_ratio = worst_ratio.max(measured / l2);
            }
            worst_identity = worst_identity.max(residual);
            trials += 1;
        }
    }
    Ok(format!(
        "{trials} masks, max measured/bound {worst_ratio:.4}, max identity residual {worst_identity:.1e}"
    ))
}

fn drift_bound_holds() -> Outcome {
    let mut r = rng(0xacc4);
    let (mut trials, mut worst) = (0, 0f64);
    for f in 0..25 {
        let k = r.random_range(1..=5);
        let fx = Fixture::new(&random_spec(&mut r, k));
        let fixed = random_params(&mut r, OperatorKind::AvgFixed, k);
        let renorm = OperatorParams {
            op: OperatorKind::AvgRenorm,
            ..fixed.clone()
        };
        let full = full_read_merge(&fx.family.base, &fx.family.sources, &fixed).unwrap();
        for _ in 0..4 {
            let keep = r.random_range(0.0..=1.0);
            let mask = random_mask(&mut r, &fx.catalog, keep);
            let p = plan_from_mask(&fx.catalog, &renorm, &mask).unwrap();
            let masked = fx.output(&fx.run(&p, &ExecOptions::default()));
            let measured = deviation(&full, &masked).unwrap().abs_l2;
            let bound = coefficient_drift_bound(&p, &fx.catalog, &fixed.alphas).unwrap();
            let allowance = f32_rounding_allowance(&full, &masked);
            if measured > bound * (1.0 + BOUND_SLACK) + allowance {
                return Err(format!("family {f}: measured {measured:e} > bound {bound:e}"));
            }
            if bound > 0.0 {
                worst = worst.max(measured / bound);
            }
            trials += 1;
        }
    }
    Ok(format!("{trials} masks, max measured/bound {worst:.4}"))
}

fn equal_size_spec(experts: usize) -> FamilySpec {
    FamilySpec {
        experts,
        tensors: vec![
            TensorSpec::new("w0", vec![64, 64]),
            TensorSpec::new("w1", vec![64, 64]),
            TensorSpec::new("w2", vec![128, 32]),
        ],
        kinds: vec![SourceKind::Full],
        block_bytes: 2048,
        seed: 5,
        ..FamilySpec::default()
    }
}

fn inverse_k_scaling() -> Outcome {
    let ks = [2usize, 4, 8, 16];
    let mut naive = Vec::new();
    let mut lines = Vec::new();
    let mut budget = None;
    for &k in &ks {
        let fx = Fixture::new(&equal_size_spec(k));
        let mean = fx.catalog.mean_expert_cost();
        let b = *budget.get_or_insert(mean.round() as u64);
        let params = OperatorParams::new(OperatorKind::Ties, k);
        let p = plan(&fx.catalog, &params, ScoringRule::UtilityPerByte, BudgetRequest::Bytes(b)).unwrap();
        let run = fx.run(&p, &ExecOptions::default());
        let fraction = expert_read_fraction(run.cost.expert_bytes, k, mean).unwrap();
        let cap = b as f64 / (k as f64 * mean);
        if fraction > cap {
            return Err(format!("K={k}: read fraction {fraction} exceeds {cap}"));
        }
        let full = plan(&fx.catalog, &params, ScoringRule::UtilityPerByte, BudgetRequest::Full).unwrap();
        let full_run = fx.run(&full, &ExecOptions::default());
        naive.push(full_run.cost.expert_bytes as f64);
        lines.push(format!("K={k}: {fraction:.4}<={cap:.4}"));
    }
    let kf: Vec<f64> = ks.iter().map(|&k| k as f64).collect();
    let (_, slope, r2) = linear_fit(&kf, &naive);
    if r2 < 0.99 || slope <= 0.0 {
        return Err(format!("naive reads fit R^2 {r2}, slope {slope}"));
    }
    Ok(format!("{}; naive reads linear in K (R^2 {r2:.6})", lines.join(", ")))
}

fn budget_sweep_behavior() -> Outcome {
    let spec = FamilySpec {
        experts: 8,
        tensors: (0..6).map(|i| TensorSpec::new(format!("layer{i}"), vec![256, 128])).collect(),
        kinds: vec![SourceKind::Full],
        block_bytes: 8192,
        seed: 11,
        ..FamilySpec::default()
    };
    let fx = Fixture::new(&spec);
    let params = OperatorParams::new(OperatorKind::Ties, spec.experts);
    let reference = full_read_merge(&fx.family.base, &fx.family.sources, &params).unwrap();
    let config = SweepConfig {
        fractions: default_fractions(),
        params,
        rule: ScoringRule::UtilityPerByte,
        exec: ExecOptions::default(),
        repeats: 3,
        cold: true,
    };
    let points = budget_sweep(&fx.family, &fx.catalog, &fx.store, &config, Some(&reference)).unwrap();
    let mut strict = 0;
    let (mut prev_bytes, mut prev_ratio) = (0u64, 0f64);
    for p in &points {
        if p.realized_expert_bytes < prev_bytes || p.accessed_ratio < prev_ratio {
            return Err(format!("sweep decreases at fraction {}", p.fraction));
        }
        if p.realized_expert_bytes > prev_bytes && p.accessed_ratio > prev_ratio {
            strict += 1;
        }
        (prev_bytes, prev_ratio) = (p.realized_expert_bytes, p.accessed_ratio);
    }
    if strict < 8 {
        return Err(format!("only {strict} of {} steps strictly increase", points.len()));
    }
    let bytes: Vec<f64> = points.iter().map(|p| p.realized_expert_bytes as f64).collect();
    let walls: Vec<f64> = points.iter().map(|p| p.wall_secs).collect();
    let rho = spearman(&walls, &bytes);
    let last = points.last().unwrap();
    if last.rel_l2 != Some(0.0) {
        return Err(format!("rel_l2 at full budget is {:?}", last.rel_l2));
    }
    if points.iter().any(|p| !p.rel_l2.is_some_and(f64::is_finite)) {
        return Err("non-finite rel_l2 in sweep".into());
    }
    if rho.is_nan() || rho < 0.9 {
        return Err(format!("Spearman(wall, bytes) = {rho:.3}"));
    }
    let rels: Vec<String> = points.iter().map(|p| format!("{:.2e}", p.rel_l2.unwrap())).collect();
    Ok(format!(
        "{strict}/{} strict steps, Spearman {rho:.3}, rel_l2 [{}]",
        points.len(),
        rels.join(" ")
    ))
}

fn has_manifest(dir: &std::path::Path) -> bool {
    std::fs::read_dir(dir).into_iter().flatten().flatten().any(|e| {
        let p = e.path();
        if p.is_dir() {
            has_manifest(&p)
        } else {
            p.file_name().is_some_and(|n| n == MANIFEST_FILE)
        }
    })
}

fn atomicity() -> Outcome {
    let mut r = rng(0xacc7);
    let fx = Fixture::new(&random_spec(&mut r, 3));
    let params = OperatorParams::new(OperatorKind::Dare, 3).with_seed(9);
    let p = plan(&fx.catalog, &params, ScoringRule::UtilityPerByte, BudgetRequest::Fraction(0.6)).unwrap();
    for (i, point) in FaultPoint::PRE_PUBLISH.iter().enumerate() {
        let store = fx.fresh_store(&format!("store-{i}"));
        let opts = ExecOptions {
            fault: Some(*point),
            ..ExecOptions::default()
        };
        match execute(&p, &fx.family.base, &fx.family.sources, &fx.catalog, &store, &opts) {
            Err(e) if e.class() == ErrorClass::Aborted => {}
            other => return Err(format!("{point:?}: expected an abort, got {:?}", other.map(|r| r.snapshot.id))),
        }
        let visible = store.snapshots().unwrap();
        if !visible.is_empty() || has_manifest(store.root()) || !store.commits().unwrap().is_empty() {
            return Err(format!("{point:?}: abort left visible state"));
        }
        if !store.staging_entries().unwrap().is_empty() {
            return Err(format!("{point:?}: staging not cleaned"));
        }
        let rerun = execute(&p, &fx.family.base, &fx.family.sources, &fx.catalog, &store, &ExecOptions::default())
            .map_err(|e| format!("{point:?}: re-run failed: {e}"))?;
        if store.snapshots().unwrap() != vec![rerun.snapshot.id] || !rerun.snapshot.manifest_path.exists() {
            return Err(format!("{point:?}: re-run did not publish"));
        }
    }
    Ok(format!(
        "{} injection points leave no snapshot or manifest; every re-run publishes",
        FaultPoint::PRE_PUBLISH.len()
    ))
}

fn replay_determinism() -> Outcome {
    let mut r = rng(0xacc8);
    let cases = 20;
    for c in 0..cases {
        let k = r.random_range(1..=5);
        let fx = Fixture::new(&random_spec(&mut r, k));
        let op = OperatorKind::ALL[r.random_range(0..4)];
        let params = random_params(&mut r, op, k);
        let p = plan(
            &fx.catalog,
            &params,
            ScoringRule::UtilityPerByte,
            BudgetRequest::Fraction(r.random_range(0.0..=1.0)),
        )
        .unwrap();
        let opts = ExecOptions {
            output_mode: if r.random_bool(0.5) {
                OutputMode::Reference
            } else {
                OutputMode::Materialized
            },
            jobs: r.random_range(1..=4),
            fault: None,
        };
        let first = fx.run(&p, &opts);
        let other = fx.fresh_store("replay");
        let replay_opts = ExecOptions {
            jobs: r.random_range(1..=4),
            ..ExecOptions::default()
        };
        for store in [&fx.store, &other] {
            let again = replay(&first.snapshot, &fx.family.base, &fx.family.sources, &fx.catalog, store, &replay_opts)
                .map_err(|e| format!("case {c}: {e}"))?;
            if again.snapshot.id != first.snapshot.id {
                return Err(format!("case {c}: snapshot id changed"));
            }
        }
    }
    Ok(format!("{cases}/{cases} replays reproduce the snapshot id"))
}

fn overhead_accounting() -> Outcome {
    let spec = FamilySpec {
        experts: 16,
        tensors: (0..4).map(|i| TensorSpec::new(format!("block{i}.w"), vec![256, 256])).collect(),
        kinds: vec![SourceKind::Full],
        block_bytes: 64 * 1024,
        seed: 16,
        ..FamilySpec::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let family = mergepipe::synth::generate(&spec, dir.path().join("family")).unwrap();
    let t = Instant::now();
    let catalog = Catalog::build(&family.base, &family.sources, &IoMeter::new()).unwrap();
    let analyze_secs = t.elapsed().as_secs_f64();
    let catalog_bytes = catalog.persist(dir.path().join("catalog.bin")).unwrap();
    let store = mergepipe::executor::Store::open(dir.path().join("store")).unwrap();
    let params = OperatorParams::new(OperatorKind::Ties, spec.experts);
    let mut plan_times = Vec::new();
    let mut p = None;
    for _ in 0..5 {
        let t = Instant::now();
        p = Some(plan(&catalog, &params, ScoringRule::UtilityPerByte, BudgetRequest::Fraction(0.5)).unwrap());
        plan_times.push(t.elapsed().as_secs_f64());
    }
    let p = p.unwrap();
    let t = Instant::now();
    let run = execute(&p, &family.base, &family.sources, &catalog, &store, &ExecOptions::default()).unwrap();
    let execute_secs = t.elapsed().as_secs_f64();
    let report = OverheadReport {
        experts: spec.experts,
        catalog_bytes,
        analyze_secs,
        plan_secs: median(&mut plan_times),
        execute_secs,
        manifest_bytes: run.manifest_bytes,
        cost: run.cost,
    };
    let table = report.table();
    for channel in ["base", "expert", "output", "metadata"] {
        if !table.contains(channel) {
            return Err(format!("report lacks the {channel} channel"));
        }
    }
    let c = &report.cost;
    if c.base_bytes == 0 || c.expert_bytes == 0 || c.output_bytes == 0 || c.metadata_bytes == 0 {
        return Err(format!("a cost channel is empty: {c:?}"));
    }
    let (plan_share, manifest_share) = (report.planning_share(), report.manifest_share());
    if plan_share >= 0.05 || manifest_share >= 0.001 {
        return Err(format!("planning {plan_share:.4}, manifest {manifest_share:.6}"));
    }
    Ok(format!(
        "planning {:.3}% of execution, manifest {:.5}% of total I/O",
        plan_share * 100.0,
        manifest_share * 100.0
    ))
}

fn main() {
    let checks: [Check; 9] = [
        ("full-budget consistency", full_budget_consistency),
        ("budget soundness", budget_soundness),
        ("omission bound", omission_bound_holds),
        ("coefficient-drift bound", drift_bound_holds),
        ("inverse-K read scaling", inverse_k_scaling),
        ("budget sweep", budget_sweep_behavior),
        ("atomicity", atomicity),
        ("replay determinism", replay_determinism),
        ("overhead accounting", overhead_accounting),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{}/9] {name}: {detail} ({secs:.1}s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}/9] {name}: {detail} ({secs:.1}s)", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
