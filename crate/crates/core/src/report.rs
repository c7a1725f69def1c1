//! Budget sweeps and overhead summaries rendered as CSV and text tables.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::catalog::Catalog;
use crate::costmodel::CostBreakdown;
use crate::error::Result;
use crate::executor::{execute, ExecOptions, Store};
use crate::operators::OperatorParams;
use crate::planner::{plan, BudgetRequest, ScoringRule};
use crate::synth::Family;
use crate::verify::{deviation, DenseCheckpoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub fraction: f64,
    pub budget_bytes: u64,
    pub planned_bytes: u64,
    pub realized_expert_bytes: u64,
    pub accessed_units: usize,
    pub accessed_ratio: f64,
    /// Median execution wall time over the configured repeats.
    pub wall_secs: f64,
    pub plan_secs: f64,
    pub rel_l2: Option<f64>,
    pub p95_block: Option<f64>,
    pub cost: CostBreakdown,
    pub snapshot: String,
    pub plan_digest: String,
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub fractions: Vec<f64>,
    pub params: OperatorParams,
    pub rule: ScoringRule,
    pub exec: ExecOptions,
    pub repeats: usize,
    /// Evict family payloads from the page cache before every timed run.
    pub cold: bool,
}

/// Fractions `0.1, 0.2, …, 1.0`.
pub fn default_fractions() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Plans and executes every fraction; optionally compares each output with
/// `reference`.
pub fn budget_sweep(
    family: &Family,
    catalog: &Catalog,
    store: &Store,
    config: &SweepConfig,
    reference: Option<&DenseCheckpoint>,
) -> Result<Vec<SweepPoint>> {
    let units = catalog.len().max(1) as f64;
    let mut points = Vec::with_capacity(config.fractions.len());
    for &fraction in &config.fractions {
        let t = Instant::now();
        let p = plan(catalog, &config.params, config.rule, BudgetRequest::Fraction(fraction))?;
        let plan_secs = t.elapsed().as_secs_f64();
        let mut walls = Vec::with_capacity(config.repeats.max(1));
        let mut last = None;
        for _ in 0..config.repeats.max(1) {
            if config.cold {
                family.drop_page_cache();
            }
            let t = Instant::now();
            let report = execute(&p, &family.base, &family.sources, catalog, store, &config.exec)?;
            walls.push(t.elapsed().as_secs_f64());
            last = Some(report);
        }
        let report = last.expect("at least one repeat");
        let (rel_l2, p95) = match reference {
            Some(r) => {
                let merged = DenseCheckpoint::load(&report.snapshot.open(&family.base)?)?;
                let d = deviation(&merged, r)?;
                (Some(d.rel_l2), Some(d.p95_block))
            }
            None => (None, None),
        };
        let accessed: usize = report.manifest.touched.iter().map(|t| t.experts.len()).sum();
        points.push(SweepPoint {
            fraction,
            budget_bytes: p.budget_bytes(),
            planned_bytes: p.estimated_cost(),
            realized_expert_bytes: report.cost.expert_bytes,
            accessed_units: accessed,
            accessed_ratio: accessed as f64 / units,
            wall_secs: median(&mut walls),
            plan_secs,
            rel_l2,
            p95_block: p95,
            cost: report.cost,
            snapshot: report.snapshot.id.to_hex(),
            plan_digest: p.digest.to_hex(),
        });
    }
    Ok(points)
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. `NaN` if either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "samples must pair up");
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Least-squares line `y = a + b·x` and its R².
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    (intercept, slope, r2)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "".into(), |v| format!("{v:.6e}"))
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from(
        "fraction,budget_bytes,planned_bytes,realized_expert_bytes,accessed_units,accessed_ratio,wall_secs,plan_secs,rel_l2,p95_block,base_bytes,output_bytes,metadata_bytes\n",
    );
    for p in points {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.6},{:.6},{:.6},{},{},{},{},{}",
            p.fraction,
            p.budget_bytes,
            p.planned_bytes,
            p.realized_expert_bytes,
            p.accessed_units,
            p.accessed_ratio,
            p.wall_secs,
            p.plan_secs,
            opt(p.rel_l2),
            opt(p.p95_block),
            p.cost.base_bytes,
            p.cost.output_bytes,
            p.cost.metadata_bytes
        );
    }
    s
}

pub fn sweep_table(points: &[SweepPoint]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>8} {:>14} {:>14} {:>9} {:>10} {:>12} {:>12}",
        "fraction", "budget", "expert_read", "accessed", "wall_ms", "rel_l2", "p95_block"
    );
    for p in points {
        let _ = writeln!(
            s,
            "{:>8.2} {:>14} {:>14} {:>9.4} {:>10.2} {:>12} {:>12}",
            p.fraction,
            p.budget_bytes,
            p.realized_expert_bytes,
            p.accessed_ratio,
            p.wall_secs * 1e3,
            p.rel_l2.map_or("-".into(), |v| format!("{v:.3e}")),
            p.p95_block.map_or("-".into(), |v| format!("{v:.3e}")),
        );
    }
    s
}

/// Horizontal bar per cost channel, scaled to `width` characters.
pub fn breakdown_bars(cost: &CostBreakdown, width: usize) -> String {
    let total = cost.total().max(1) as f64;
    let mut s = String::new();
    for (name, v) in [
        ("base", cost.base_bytes),
        ("expert", cost.expert_bytes),
        ("output", cost.output_bytes),
        ("metadata", cost.metadata_bytes),
    ] {
        let share = v as f64 / total;
        let n = (share * width as f64).round() as usize;
        let _ = writeln!(s, "{name:>8} {:<width$} {v:>14} B {:>6.2}%", "#".repeat(n), share * 100.0);
    }
    s
}

/// Where the time and bytes of one catalog–plan–execute cycle went.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub experts: usize,
    pub catalog_bytes: u64,
    pub analyze_secs: f64,
    pub plan_secs: f64,
    pub execute_secs: f64,
    pub manifest_bytes: u64,
    pub cost: CostBreakdown,
}

impl OverheadReport {
    pub fn planning_share(&self) -> f64 {
        self.plan_secs / self.execute_secs
    }

    pub fn manifest_share(&self) -> f64 {
        self.manifest_bytes as f64 / self.cost.total().max(1) as f64
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<28} {:>16}", "component", "value");
        let _ = writeln!(s, "{:<28} {:>16}", "experts", self.experts);
        let _ = writeln!(s, "{:<28} {:>14} B", "catalog size", self.catalog_bytes);
        let _ = writeln!(s, "{:<28} {:>14.3} s", "analyze (amortized)", self.analyze_secs);
        let _ = writeln!(s, "{:<28} {:>14.3} ms", "planning", self.plan_secs * 1e3);
        let _ = writeln!(s, "{:<28} {:>14.3} ms", "execution", self.execute_secs * 1e3);
        let _ = writeln!(s, "{:<28} {:>14.3} %", "planning / execution", self.planning_share() * 100.0);
        let _ = writeln!(s, "{:<28} {:>14} B", "manifest size", self.manifest_bytes);
        let _ = writeln!(s, "{:<28} {:>14.5} %", "manifest / total I/O", self.manifest_share() * 100.0);
        s.push_str(&breakdown_bars(&self.cost, 40));
        s
    }
}

pub fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}
