#![allow(dead_code)]

use mergepipe::catalog::Catalog;
use mergepipe::costmodel::{AccessMask, AccessUnit};
use mergepipe::delta_source::SourceKind;
use mergepipe::executor::{ExecOptions, RunReport, Store};
use mergepipe::meter::IoMeter;
use mergepipe::operators::{OperatorKind, OperatorParams};
use mergepipe::synth::{generate, Family, FamilySpec, TensorSpec};
use mergepipe::verify::DenseCheckpoint;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

pub struct Fixture {
    pub dir: TempDir,
    pub family: Family,
    pub catalog: Catalog,
    pub store: Store,
}

impl Fixture {
    pub fn new(spec: &FamilySpec) -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let family = generate(spec, dir.path().join("family")).unwrap();
        let catalog = Catalog::build(&family.base, &family.sources, &IoMeter::new()).unwrap();
        let store = Store::open(dir.path().join("store")).unwrap();
        Fixture {
            dir,
            family,
            catalog,
            store,
        }
    }

    pub fn fresh_store(&self, name: &str) -> Store {
        Store::open(self.dir.path().join(name)).unwrap()
    }

    pub fn run(&self, plan: &mergepipe::planner::MergePlan, opts: &ExecOptions) -> RunReport {
        mergepipe::executor::execute(plan, &self.family.base, &self.family.sources, &self.catalog, &self.store, opts)
            .unwrap()
    }

    pub fn output(&self, report: &RunReport) -> DenseCheckpoint {
        DenseCheckpoint::load(&report.snapshot.open(&self.family.base).unwrap()).unwrap()
    }
}

pub const KINDS: [SourceKind; 3] = [SourceKind::Full, SourceKind::ExplicitDelta, SourceKind::Lora];

/// A small family with random layout, block size and source kinds.
pub fn random_spec(rng: &mut ChaCha8Rng, experts: usize) -> FamilySpec {
    let n_tensors = rng.random_range(1..=4);
    let tensors = (0..n_tensors)
        .map(|t| {
            let shape = if rng.random_bool(0.2) {
                vec![rng.random_range(3..=40)]
            } else {
                vec![rng.random_range(2..=24), rng.random_range(2..=24)]
            };
            TensorSpec::new(format!("t{t}"), shape)
        })
        .collect();
    let mut kinds: Vec<SourceKind> = (0..experts.max(1)).map(|_| KINDS[rng.random_range(0..3)]).collect();
    kinds.shuffle(rng);
    FamilySpec {
        experts,
        tensors,
        sparsity: *[0.0, 0.0, 0.3].choose(rng).unwrap(),
        kinds,
        lora_rank: rng.random_range(1..=3),
        block_bytes: *[32usize, 64, 128, 256].choose(rng).unwrap(),
        seed: rng.random(),
        ..FamilySpec::default()
    }
}

pub fn random_params(rng: &mut ChaCha8Rng, op: OperatorKind, experts: usize) -> OperatorParams {
    let mut p = OperatorParams::new(op, experts).with_seed(rng.random());
    if rng.random_bool(0.5) {
        p = p.with_alphas((0..experts).map(|_| rng.random_range(-1.0..1.0)).collect());
    }
    p.with_ties_density(rng.random_range(0.05..=1.0)).with_dare_drop(rng.random_range(0.0..0.9))
}

/// Each unit is selected independently with probability `keep`.
pub fn random_mask(rng: &mut ChaCha8Rng, catalog: &Catalog, keep: f64) -> AccessMask {
    let units: Vec<AccessUnit> = catalog.units().filter(|_| rng.random_bool(keep)).collect();
    AccessMask::new(catalog, units).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}
