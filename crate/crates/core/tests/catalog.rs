mod common;

use common::{random_spec, rng, Fixture};
use mergepipe::catalog::Catalog;
use mergepipe::container::CheckpointHandle;
use mergepipe::delta_source::{lora_a_name, lora_b_name, SourceKind};
use mergepipe::meter::{ChannelKind, IoMeter};
use mergepipe::operators::{OperatorKind, OperatorParams};
use mergepipe::planner::{plan, BudgetRequest, ScoringRule};

fn tensor(h: &CheckpointHandle, name: &str) -> Vec<f32> {
    h.read_tensor(name, &IoMeter::new(), ChannelKind::Metadata).unwrap()
}

/// Brute-force per-block delta norms straight from the stored tensors.
fn brute_norms(fx: &Fixture, expert: usize) -> Vec<(String, u32, f64)> {
    let src = &fx.family.sources[expert];
    let h = src.handle();
    let mut out = Vec::new();
    for meta in fx.family.base.tensors() {
        let base = tensor(&fx.family.base, &meta.name);
        let delta: Vec<f64> = match src.kind() {
            SourceKind::Full => tensor(h, &meta.name).iter().zip(&base).map(|(e, b)| (e - b) as f64).collect(),
            SourceKind::ExplicitDelta => tensor(h, &meta.name).iter().map(|&d| d as f64).collect(),
            SourceKind::Lora => match src.lora_target(&meta.name) {
                None => vec![0.0; meta.numel()],
                Some(f) => {
                    let bm = tensor(h, &lora_b_name(&meta.name));
                    let am = tensor(h, &lora_a_name(&meta.name));
                    let mut d = vec![0.0; meta.numel()];
                    for (idx, v) in d.iter_mut().enumerate() {
                        let (row, col) = (idx / f.in_dim, idx % f.in_dim);
                        let s: f64 = (0..f.rank).map(|k| bm[row * f.rank + k] as f64 * am[k * f.in_dim + col] as f64).sum();
                        *v = ((s * f.scale) as f32) as f64;
                    }
                    d
                }
            },
        };
        for b in 0..meta.num_blocks() {
            let n: f64 = delta[meta.block_range(b)].iter().map(|v| v * v).sum::<f64>().sqrt();
            out.push((meta.name.clone(), b as u32, n));
        }
    }
    out
}

#[test]
fn delta_norms_match_brute_force() {
    let mut r = rng(71);
    for _ in 0..12 {
        let k = 3;
        let fx = Fixture::new(&random_spec(&mut r, k));
        for e in 0..k {
            for (name, b, want) in brute_norms(&fx, e) {
                let entry = fx
                    .catalog
                    .entries()
                    .iter()
                    .find(|c| c.expert.index() == e && c.key.tensor == name && c.key.block_index == b);
                let got = entry.and_then(|c| c.stats.delta_l2);
                match got {
                    Some(g) => assert!((g - want).abs() <= 1e-9 * want.max(1e-30), "{name}/{b}: {g} vs {want}"),
                    None => assert_eq!(want, 0.0, "missing stats for a nonzero block {name}/{b}"),
                }
            }
        }
    }
}

#[test]
fn persisted_catalog_round_trips_and_plans_without_experts() {
    let mut r = rng(72);
    let fx = Fixture::new(&random_spec(&mut r, 4));
    let path = fx.dir.path().join("catalog.bin");
    let size = fx.catalog.persist(&path).unwrap();
    assert_eq!(size, std::fs::metadata(&path).unwrap().len());
    let params = OperatorParams::new(OperatorKind::Ties, 4);
    let before = plan(&fx.catalog, &params, ScoringRule::UtilityPerByte, BudgetRequest::Fraction(0.4)).unwrap();

    // With every expert payload gone, planning from the persisted catalog
    // still works and yields the same plan.
    for s in &fx.family.sources {
        std::fs::remove_dir_all(s.handle().root()).unwrap();
    }
    let loaded = Catalog::load(&path).unwrap();
    assert_eq!(loaded, fx.catalog);
    let after = plan(&loaded, &params, ScoringRule::UtilityPerByte, BudgetRequest::Fraction(0.4)).unwrap();
    assert_eq!(after.digest, before.digest);
}

#[test]
fn corrupted_catalog_is_rejected() {
    let mut r = rng(73);
    let fx = Fixture::new(&random_spec(&mut r, 2));
    let mut bytes = fx.catalog.encode();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    assert!(Catalog::decode(&bytes).is_err());
    assert!(Catalog::decode(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn fallback_catalog_plans_in_canonical_order() {
    let mut r = rng(74);
    let fx = Fixture::new(&random_spec(&mut r, 3));
    let fallback = Catalog::build_fallback(&fx.family.base, &fx.family.sources).unwrap();
    assert!(fallback.entries().iter().all(|e| !e.stats.has_stats && e.stats.delta_l2.is_none()));
    let params = OperatorParams::new(OperatorKind::AvgFixed, 3);
    let p = plan(&fallback, &params, ScoringRule::UtilityPerByte, BudgetRequest::Fraction(0.5)).unwrap();
    // canonical (tensor, block, expert) order, skip-and-continue
    let mut canonical: Vec<_> = fallback.entries().iter().collect();
    canonical.sort_by(|a, b| (&a.key.tensor, a.key.block_index, a.expert).cmp(&(&b.key.tensor, b.key.block_index, b.expert)));
    let mut spent = 0;
    let mut want = Vec::new();
    for e in canonical {
        if spent + e.stats.byte_cost <= p.budget_bytes() {
            spent += e.stats.byte_cost;
            want.push(e.unit());
        }
    }
    let mut got = p.selected().to_vec();
    got.sort();
    want.sort();
    assert_eq!(got, want);
    assert_eq!(p.estimated_cost(), spent);
}

#[test]
fn analyze_in_run_charges_expert_channel() {
    let mut r = rng(75);
    let fx = Fixture::new(&random_spec(&mut r, 2));
    let offline = IoMeter::new();
    Catalog::build(&fx.family.base, &fx.family.sources, &offline).unwrap();
    let c = offline.breakdown();
    assert_eq!(c.expert_bytes, 0);
    assert!(c.metadata_bytes > 0);

    let in_run = IoMeter::new();
    in_run.set_in_run(true);
    Catalog::build(&fx.family.base, &fx.family.sources, &in_run).unwrap();
    let c = in_run.breakdown();
    assert!(c.expert_bytes > 0 && c.base_bytes > 0);
}
