use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use mergepipe::catalog::Catalog;
use mergepipe::delta_source::SourceKind;
use mergepipe::executor::{execute, replay, ExecOptions, FaultPoint, OutputMode, RunReport, Store, MANIFEST_FILE};
use mergepipe::meter::IoMeter;
use mergepipe::operators::{OperatorKind, OperatorParams};
use mergepipe::planner::{plan, BudgetRequest, MergePlan, ScoringRule};
use mergepipe::report::{breakdown_bars, budget_sweep, sweep_csv, sweep_table, SweepConfig, SweepPoint};
use mergepipe::synth::{generate, Family, FamilySpec};
use mergepipe::verify::{full_read_merge, verify_snapshot, VerifyReport};
use mergepipe::{Error, ErrorClass};

const CATALOG_FILE: &str = "catalog.bin";

#[derive(Parser)]
#[command(name = "mergepipe", version, about = "Budget-aware checkpoint merging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic checkpoint family.
    Gen(GenArgs),
    /// Analyze a family and persist its block catalog.
    Catalog(CatalogArgs),
    /// Produce a budgeted merge plan from a catalog.
    Plan(PlanArgs),
    /// Execute a plan and publish a snapshot.
    Merge(MergeArgs),
    /// Audit a published snapshot.
    Verify(VerifyArgs),
    /// Re-execute a snapshot's plan and check the snapshot id.
    Replay(ReplayArgs),
    /// Plan and merge at a series of budget fractions.
    Sweep(SweepArgs),
    /// Render a sweep or verify report as tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON family spec; flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    experts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sparsity: Option<f64>,
    /// Comma-separated source kinds cycled over experts: full, explicit-delta, lora.
    #[arg(long, value_delimiter = ',')]
    kinds: Option<Vec<SourceKind>>,
    #[arg(long)]
    block_bytes: Option<usize>,
    #[arg(long)]
    lora_rank: Option<usize>,
}

#[derive(Args)]
struct FamilyArg {
    /// Family directory written by `gen`.
    #[arg(long)]
    family: PathBuf,
    /// Catalog path; defaults to `<family>/catalog.bin`.
    #[arg(long)]
    catalog: Option<PathBuf>,
}

impl FamilyArg {
    fn catalog_path(&self) -> PathBuf {
        self.catalog.clone().unwrap_or_else(|| self.family.join(CATALOG_FILE))
    }

    fn open(&self) -> anyhow::Result<(Family, Catalog)> {
        let family = Family::open(&self.family)?;
        let path = self.catalog_path();
        let catalog = Catalog::load(&path).with_context(|| format!("loading catalog {}", path.display()))?;
        Ok((family, catalog))
    }
}

#[derive(Args)]
struct CatalogArgs {
    #[command(flatten)]
    family: FamilyArg,
    /// Record byte costs only, without delta statistics.
    #[arg(long)]
    fallback: bool,
}

#[derive(Args)]
struct OperatorArgs {
    /// avg-fixed, avg-renorm, ties or dare.
    #[arg(long, default_value = "ties")]
    op: OperatorKind,
    /// Comma-separated per-expert coefficients; default 1/K.
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long)]
    density: Option<f64>,
    #[arg(long)]
    drop_p: Option<f64>,
    /// Seed for stochastic operators; falls back to MERGEPIPE_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// utility-per-byte or utility.
    #[arg(long, default_value = "utility-per-byte")]
    scoring: ScoringRule,
}

impl OperatorArgs {
    fn params(&self, experts: usize) -> anyhow::Result<OperatorParams> {
        let mut p = OperatorParams::new(self.op, experts).with_seed(resolve_seed(self.seed, 0)?);
        if let Some(a) = &self.alphas {
            p = p.with_alphas(a.clone());
        }
        if let Some(d) = self.density {
            p = p.with_ties_density(d);
        }
        if let Some(d) = self.drop_p {
            p = p.with_dare_drop(d);
        }
        p.validate(experts)?;
        Ok(p)
    }
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    family: FamilyArg,
    #[command(flatten)]
    operator: OperatorArgs,
    /// Budget as a fraction of the full universe cost.
    #[arg(long, conflicts_with = "budget_bytes")]
    budget_frac: Option<f64>,
    /// Budget in bytes.
    #[arg(long)]
    budget_bytes: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExecArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Store blocks identical to the base as references to it.
    #[arg(long)]
    reference_base: bool,
}

impl ExecArgs {
    fn options(&self, fault: Option<FaultPoint>) -> ExecOptions {
        ExecOptions {
            output_mode: if self.reference_base {
                OutputMode::Reference
            } else {
                OutputMode::Materialized
            },
            jobs: self.jobs,
            fault,
        }
    }
}

#[derive(Args)]
struct MergeArgs {
    #[command(flatten)]
    family: FamilyArg,
    #[arg(long)]
    plan: PathBuf,
    #[command(flatten)]
    exec: ExecArgs,
    /// Abort (or fail after publishing) at the named stage, for testing.
    #[arg(long, hide = true)]
    fault: Option<FaultPoint>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    family: FamilyArg,
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    snapshot: String,
    /// Compare with the full-read merge instead of the masked oracle.
    #[arg(long)]
    against_full: bool,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    #[command(flatten)]
    family: FamilyArg,
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    snapshot: String,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    family: FamilyArg,
    #[command(flatten)]
    operator: OperatorArgs,
    #[command(flatten)]
    exec: ExecArgs,
    /// Comma-separated budget fractions; default 0.1 through 1.0.
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Evict family payloads from the page cache before each timed run.
    #[arg(long)]
    cold: bool,
    /// Measure deviation from the full-read merge at every point.
    #[arg(long)]
    against_full: bool,
    /// JSON sweep output.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// JSON written by `sweep --out`.
    #[arg(long, conflicts_with = "verify")]
    sweep: Option<PathBuf>,
    /// JSON written by `verify --out`.
    #[arg(long)]
    verify: Option<PathBuf>,
    /// Write the sweep as CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn resolve_seed(flag: Option<u64>, fallback: u64) -> anyhow::Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("MERGEPIPE_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| Error::InvalidParameter(format!("MERGEPIPE_SEED={v:?} is not a u64")).into()),
        Err(_) => Ok(fallback),
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn published_line(store: &Store, sid: &str, plan_digest: &str) -> String {
    let manifest = store.root().join(mergepipe::executor::SNAPSHOTS_DIR).join(sid).join(MANIFEST_FILE);
    format!("snapshot={sid} manifest={} plan_digest={plan_digest}", manifest.display())
}

fn print_run(store: &Store, run: &RunReport) {
    println!(
        "{}",
        published_line(store, &run.snapshot.id.to_hex(), &run.manifest.plan_digest.to_hex())
    );
    let c = &run.cost;
    println!(
        "cost base={} expert={} output={} metadata={} planned={} budget={}",
        c.base_bytes, c.expert_bytes, c.output_bytes, c.metadata_bytes, run.manifest.planned_cost, run.manifest.budget_bytes
    );
}

fn gen(a: GenArgs) -> anyhow::Result<()> {
    let mut spec = match &a.spec {
        Some(p) => serde_json::from_slice::<FamilySpec>(&std::fs::read(p).with_context(|| format!("reading {}", p.display()))?)
            .map_err(|e| Error::InvalidParameter(format!("family spec: {e}")))?,
        None => FamilySpec::default(),
    };
    spec.seed = resolve_seed(a.seed, spec.seed)?;
    if let Some(k) = a.experts {
        spec.experts = k;
    }
    if let Some(s) = a.sparsity {
        spec.sparsity = s;
    }
    if let Some(k) = a.kinds {
        spec.kinds = k;
    }
    if let Some(b) = a.block_bytes {
        spec.block_bytes = b;
    }
    if let Some(r) = a.lora_rank {
        spec.lora_rank = r;
    }
    let family = generate(&spec, &a.out)?;
    println!("base={}", family.record.base.id);
    for e in &family.record.experts {
        println!(
            "expert={} kind={} path={}",
            e.id,
            e.kind.unwrap_or(SourceKind::Full).as_str(),
            e.path
        );
    }
    Ok(())
}

fn catalog(a: CatalogArgs) -> anyhow::Result<()> {
    let family = Family::open(&a.family.family)?;
    let meter = IoMeter::new();
    let cat = if a.fallback {
        Catalog::build_fallback(&family.base, &family.sources)?
    } else {
        Catalog::build(&family.base, &family.sources, &meter)?
    };
    let path = a.family.catalog_path();
    let size = cat.persist(&path)?;
    println!(
        "catalog={} entries={} universe_bytes={} size={} analyzed_bytes={}",
        path.display(),
        cat.len(),
        cat.universe_cost(),
        size,
        meter.breakdown().total()
    );
    Ok(())
}

fn plan_cmd(a: PlanArgs) -> anyhow::Result<()> {
    let (_, cat) = a.family.open()?;
    let params = a.operator.params(cat.expert_count())?;
    let request = match (a.budget_frac, a.budget_bytes) {
        (Some(f), None) => BudgetRequest::Fraction(f),
        (None, Some(b)) => BudgetRequest::Bytes(b),
        (None, None) => BudgetRequest::Full,
        (Some(_), Some(_)) => unreachable!("clap rejects both budget flags"),
    };
    let p = plan(&cat, &params, a.operator.scoring, request)?;
    p.save(&a.out)?;
    println!(
        "plan={} plan_digest={} selected={} estimated_cost={} budget={}",
        a.out.display(),
        p.digest,
        p.selected().len(),
        p.estimated_cost(),
        p.budget_bytes()
    );
    Ok(())
}

fn merge(a: MergeArgs) -> anyhow::Result<()> {
    let (family, cat) = a.family.open()?;
    let p = MergePlan::load(&a.plan)?;
    let store = Store::open(&a.exec.store)?;
    let run = execute(&p, &family.base, &family.sources, &cat, &store, &a.exec.options(a.fault))?;
    print_run(&store, &run);
    Ok(())
}

fn snapshot_of(store: &Store, sid: &str) -> anyhow::Result<mergepipe::executor::Snapshot> {
    let sid = sid.parse().map_err(|e: String| Error::InvalidParameter(format!("snapshot id: {e}")))?;
    Ok(store.snapshot(&sid)?)
}

fn verify(a: VerifyArgs) -> anyhow::Result<()> {
    let (family, cat) = a.family.open()?;
    let store = Store::open(&a.store)?;
    let snap = snapshot_of(&store, &a.snapshot)?;
    let report = verify_snapshot(&snap, &family.base, &family.sources, &cat, a.against_full)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &a.out {
        write_file(out, &json)?;
    }
    println!("{json}");
    if !report.soundness.pass {
        return Err(Error::Soundness(report.soundness.violations.join("; ")).into());
    }
    Ok(())
}

fn replay_cmd(a: ReplayArgs) -> anyhow::Result<()> {
    let (family, cat) = a.family.open()?;
    let store = Store::open(&a.store)?;
    let snap = snapshot_of(&store, &a.snapshot)?;
    let opts = ExecOptions {
        jobs: a.jobs,
        ..ExecOptions::default()
    };
    let run = replay(&snap, &family.base, &family.sources, &cat, &store, &opts)?;
    print_run(&store, &run);
    println!("replay=identical");
    Ok(())
}

fn sweep(a: SweepArgs) -> anyhow::Result<()> {
    let (family, cat) = a.family.open()?;
    let params = a.operator.params(cat.expert_count())?;
    let store = Store::open(&a.exec.store)?;
    let reference = if a.against_full {
        Some(full_read_merge(&family.base, &family.sources, &params)?)
    } else {
        None
    };
    let config = SweepConfig {
        fractions: a.fractions.clone().unwrap_or_else(mergepipe::report::default_fractions),
        params,
        rule: a.operator.scoring,
        exec: a.exec.options(None),
        repeats: a.repeats,
        cold: a.cold,
    };
    let points = budget_sweep(&family, &cat, &store, &config, reference.as_ref())?;
    for p in &points {
        println!("{}", published_line(&store, &p.snapshot, &p.plan_digest));
    }
    print!("{}", sweep_table(&points));
    if let Some(out) = &a.out {
        write_file(out, serde_json::to_string_pretty(&points)?)?;
    }
    if let Some(csv) = &a.csv {
        write_file(csv, sweep_csv(&points))?;
    }
    Ok(())
}

fn report(a: ReportArgs) -> anyhow::Result<()> {
    if let Some(path) = &a.sweep {
        let points: Vec<SweepPoint> = serde_json::from_slice(&std::fs::read(path)?)
            .map_err(|e| Error::InvalidParameter(format!("sweep report: {e}")))?;
        println!("realized reads, wall time and accessed-block ratio by budget");
        print!("{}", sweep_table(&points));
        if let Some(last) = points.last() {
            println!("\ncost breakdown at fraction {}", last.fraction);
            print!("{}", breakdown_bars(&last.cost, 40));
        }
        match &a.csv {
            Some(csv) => write_file(csv, sweep_csv(&points))?,
            None => print!("\n{}", sweep_csv(&points)),
        }
        return Ok(());
    }
    let Some(path) = &a.verify else {
        bail!(Error::InvalidParameter("report needs --sweep or --verify".into()));
    };
    let r: VerifyReport = serde_json::from_slice(&std::fs::read(path)?)
        .map_err(|e| Error::InvalidParameter(format!("verify report: {e}")))?;
    println!("snapshot      {}", r.snapshot);
    println!("plan digest   {}", r.plan_digest);
    println!("operator      {}", r.operator);
    println!("rel_l2        {:.6e}", r.deviation.rel_l2);
    println!("p95 block     {:.6e}", r.deviation.p95_block);
    println!("bit identical {}", r.deviation.bit_identical);
    let s = &r.soundness;
    println!(
        "soundness     {} (realized {} <= planned {} <= budget {})",
        if s.pass { "pass" } else { "FAIL" },
        s.realized_expert_bytes,
        s.planned_cost,
        s.budget_bytes
    );
    if let Some((l2, l1)) = r.omission_bound {
        println!("omission      l2 {l2:.6e}  l1 {l1:.6e}");
    }
    if let Some(d) = r.drift_bound {
        println!("drift bound   {d:.6e}");
    }
    if let Some(t) = &r.ties_touched {
        println!("touched       universe {:.4}  post-trim {:.4}  (basis {})", t.universe, t.post_trim, t.basis);
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>().map(Error::class) {
        Some(ErrorClass::Budget) => 3,
        Some(ErrorClass::Aborted) => 4,
        Some(ErrorClass::PostPublish) => 5,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Catalog(a) => catalog(a),
        Command::Plan(a) => plan_cmd(a),
        Command::Merge(a) => merge(a),
        Command::Verify(a) => verify(a),
        Command::Replay(a) => replay_cmd(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_classes_map_to_exit_codes() {
        let code = |e: Error| exit_code(&anyhow::Error::from(e));
        assert_eq!(code(Error::InvalidParameter("x".into())), 2);
        assert_eq!(code(Error::Soundness("x".into())), 3);
        assert_eq!(code(Error::Aborted("x".into())), 4);
        assert_eq!(
            code(Error::PostPublish {
                sid: "s".into(),
                reason: "r".into()
            }),
            5
        );
        assert_eq!(exit_code(&anyhow::anyhow!("plain")), 2);
        let wrapped = anyhow::Error::from(Error::Aborted("x".into())).context("while merging");
        assert_eq!(exit_code(&wrapped), 4);
    }

    #[test]
    fn explicit_seed_flag_wins() {
        assert_eq!(resolve_seed(Some(5), 1).unwrap(), 5);
    }

    #[test]
    fn command_line_parses() {
        let cli = Cli::try_parse_from([
            "mergepipe", "plan", "--family", "f", "--op", "dare", "--budget-frac", "0.5", "--alphas", "0.2,0.8",
            "--out", "p.json",
        ])
        .unwrap();
        let Command::Plan(p) = cli.command else { panic!("not a plan command") };
        assert_eq!(p.operator.op, OperatorKind::Dare);
        assert_eq!(p.operator.alphas, Some(vec![0.2, 0.8]));
        assert!(Cli::try_parse_from(["mergepipe", "plan", "--family", "f", "--budget-frac", "0.5", "--budget-bytes", "9", "--out", "p"]).is_err());
    }
}
