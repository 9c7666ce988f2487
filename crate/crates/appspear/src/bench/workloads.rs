//! Baseline, CRUD and macro workloads against a running deployment.

use appspear_core::{EntityId, OperationId};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::measure::{measure, measure_interleaved, Clock, Summary};
use super::BenchError;
use crate::app::App;

/// Macro-benchmark operations per iteration, in the order
/// create, read, update, delete.
pub const MACRO_MIX: [usize; 4] = [25, 38, 12, 25];
pub const MACRO_BATCH: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MacroOp {
    /// Creates a person, then a patient referring to it.
    Create,
    Read,
    Update,
    Delete,
}

/// One iteration of the macro workload: exactly the mix, shuffled.
pub fn macro_schedule(rng: &mut impl Rng) -> [MacroOp; MACRO_BATCH] {
    let mut ops = [MacroOp::Read; MACRO_BATCH];
    let kinds = [MacroOp::Create, MacroOp::Read, MacroOp::Update, MacroOp::Delete];
    let mut i = 0;
    for (kind, n) in kinds.iter().zip(MACRO_MIX) {
        ops[i..i + n].fill(*kind);
        i += n;
    }
    ops.shuffle(rng);
    ops
}

/// Operation counts of a macro run, side calls included.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MixCounts {
    pub create: u64,
    pub read: u64,
    pub update: u64,
    pub delete: u64,
    pub person_creates: u64,
}

impl MixCounts {
    pub fn total(&self) -> u64 {
        self.create + self.read + self.update + self.delete
    }
}

/// One measured loop body per compared deployment.
type Body<'a> = Box<dyn FnMut(usize) -> Result<(), BenchError> + 'a>;

/// Named per-operation results of one workload run.
pub type OpSummaries = Vec<(&'static str, Summary)>;

/// Mediates `noop` on the benchmark user under the always-allow policy.
pub fn run_baseline(app: &App, clock: &Clock, warmup: usize, iters: usize) -> Result<OpSummaries, BenchError> {
    let mut out = run_baseline_interleaved(&[app], clock, warmup, iters, iters)?;
    Ok(vec![("noop", out.remove(0))])
}

/// The baseline over several deployments at once, alternating blocks of
/// `block` calls between them. One summary per app, in order.
pub fn run_baseline_interleaved(
    apps: &[&App],
    clock: &Clock,
    warmup: usize,
    iters: usize,
    block: usize,
) -> Result<Vec<Summary>, BenchError> {
    let op = OperationId::new("noop", 1);
    let subjects = apps.iter().map(|a| a.login("bench")).collect::<Result<Vec<_>, _>>()?;
    let mut bodies: Vec<Body<'_>> = apps
        .iter()
        .zip(&subjects)
        .map(|(app, subject)| {
            let op = &op;
            Box::new(move |_| app.invoke(*subject, op, &[]).map_err(BenchError::from)) as Box<dyn FnMut(usize) -> _>
        })
        .collect();
    let mut refs: Vec<&mut dyn FnMut(usize) -> Result<(), BenchError>> =
        bodies.iter_mut().map(|b| &mut **b as _).collect();
    measure_interleaved(clock, warmup, iters, block, &mut refs)
}

/// Logs in as the physician and activates the role.
fn physician(app: &App) -> Result<EntityId, BenchError> {
    let user = app.login("alice")?;
    app.activate_role(user, "physician")?;
    Ok(user)
}

/// Creates, reads, updates and destroys patients, one measured phase each.
/// Every create makes a new patient; the destroy phase removes them again.
pub fn run_crud(app: &App, clock: &Clock, warmup: usize, iters: usize) -> Result<OpSummaries, BenchError> {
    let mut out = run_crud_interleaved(&[app], clock, warmup, iters, iters)?;
    Ok(out.remove(0))
}

/// CRUD phases over several deployments, each phase alternating blocks of
/// `block` operations between them. One set of summaries per app.
pub fn run_crud_interleaved(
    apps: &[&App],
    clock: &Clock,
    warmup: usize,
    iters: usize,
    block: usize,
) -> Result<Vec<OpSummaries>, BenchError> {
    let mut subjects = Vec::with_capacity(apps.len());
    let mut persons = Vec::with_capacity(apps.len());
    for app in apps {
        let subject = physician(app)?;
        persons.push(app.create_person(subject, "Bench Person", "Benchweg 1, 00000 Bench")?);
        subjects.push(subject);
    }
    let mut patients: Vec<Vec<EntityId>> = apps.iter().map(|_| Vec::with_capacity(warmup + iters)).collect();

    fn run_phase(
        clock: &Clock,
        warmup: usize,
        iters: usize,
        block: usize,
        mut bodies: Vec<Body<'_>>,
    ) -> Result<Vec<Summary>, BenchError> {
        let mut refs: Vec<&mut dyn FnMut(usize) -> Result<(), BenchError>> =
            bodies.iter_mut().map(|b| &mut **b as _).collect();
        measure_interleaved(clock, warmup, iters, block, &mut refs)
    }

    let create = run_phase(
        clock,
        warmup,
        iters,
        block,
        apps.iter()
            .zip(subjects.iter().zip(&persons))
            .zip(patients.iter_mut())
            .map(|((app, (subject, person)), list)| {
                Box::new(move |_| {
                    list.push(app.create_patient(*subject, *person, "no findings")?);
                    Ok(())
                }) as Body
            })
            .collect(),
    )?;
    let phase = |f: &dyn Fn(&App, EntityId, EntityId) -> Result<(), BenchError>| {
        run_phase(
            clock,
            warmup,
            iters,
            block,
            apps.iter()
                .zip(&subjects)
                .zip(&patients)
                .map(|((app, subject), list)| Box::new(move |i: usize| f(app, *subject, list[i])) as Body)
                .collect(),
        )
    };
    let read = phase(&|app, s, p| app.get_diagnosis(s, p).map(drop).map_err(Into::into))?;
    let update = phase(&|app, s, p| app.set_diagnosis(s, p, "under observation").map(drop).map_err(Into::into))?;
    let destroy = phase(&|app, s, p| app.delete_patient(s, p).map_err(Into::into))?;
    Ok((0..apps.len())
        .map(|k| vec![("create", create[k]), ("read", read[k]), ("update", update[k]), ("destroy", destroy[k])])
        .collect())
}

/// Runs the macro mix over a preloaded population of `dataset` patients.
/// `ops` is rounded up to whole batches; each sample is one batch divided
/// by its size.
pub fn run_macro(
    app: &App,
    clock: &Clock,
    warmup_ops: usize,
    ops: usize,
    seed: u64,
    dataset: usize,
) -> Result<(OpSummaries, MixCounts), BenchError> {
    let subject = physician(app)?;
    let mut pool: Vec<EntityId> = app.load_dataset(subject, seed, dataset)?.into_iter().map(|(_, p)| p).collect();
    // Deletes may precede creates within a batch; reads need a survivor.
    let needed = MACRO_MIX[3] + 1;
    if pool.len() < needed {
        return Err(BenchError::DatasetMissing { needed, loaded: pool.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_6372_6f00);
    let mut counts = MixCounts::default();
    let batches = |n: usize| n.div_ceil(MACRO_BATCH);
    let mut batch = |app: &App| -> Result<(), BenchError> {
        for op in macro_schedule(&mut rng) {
            match op {
                MacroOp::Create => {
                    let person = app.create_person(subject, "Macro Person", "Makroweg 2, 00000 Bench")?;
                    counts.person_creates += 1;
                    pool.push(app.create_patient(subject, person, "influenza")?);
                    counts.create += 1;
                }
                MacroOp::Read => {
                    app.get_diagnosis(subject, pool[rng.gen_range(0..pool.len())])?;
                    counts.read += 1;
                }
                MacroOp::Update => {
                    app.set_diagnosis(subject, pool[rng.gen_range(0..pool.len())], "bronchitis")?;
                    counts.update += 1;
                }
                MacroOp::Delete => {
                    let victim = pool.swap_remove(rng.gen_range(0..pool.len()));
                    app.delete_patient(subject, victim)?;
                    counts.delete += 1;
                }
            }
        }
        Ok(())
    };
    let mut s = measure(clock, batches(warmup_ops), batches(ops).max(1), |_| batch(app))?;
    let per_op = MACRO_BATCH as f64;
    s.median_ns /= per_op;
    s.ci_low_ns /= per_op;
    s.ci_high_ns /= per_op;
    s.median_cycles = s.median_cycles.map(|c| c / per_op);
    Ok((vec![("mix", s)], counts))
}
