//! Benchmark harness: baseline, CRUD and macro workloads over isolation
//! configurations, reported as medians with 95% intervals.

pub mod measure;
pub mod report;
pub mod workloads;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::deploy::{DeployError, DeploySettings, Deployment};
use crate::emr::{BASELINE_POLICY, EMR_POLICY};
use crate::tom::TomError;
use crate::transport::{CallMode, IsolationConfig, TransportError};
use measure::Clock;
pub use report::Row;
pub use workloads::{macro_schedule, MixCounts, MACRO_BATCH, MACRO_MIX};

pub const DEFAULT_WARMUP: usize = 10_000;
pub const DEFAULT_ITERS: usize = 100_000;
pub const DEFAULT_DATASET: usize = 1_000;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("no usable clock: {0}")]
    ClockUnavailable(String),
    #[error("configuration unsupported: {0}")]
    ConfigUnsupported(String),
    #[error("macro workload needs at least {needed} preloaded patients, found {loaded}")]
    DatasetMissing { needed: usize, loaded: usize },
    #[error(transparent)]
    Deploy(DeployError),
    #[error(transparent)]
    Tom(#[from] TomError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
}

impl From<DeployError> for BenchError {
    fn from(e: DeployError) -> Self {
        match e {
            DeployError::Transport(TransportError::ConfigUnsupported(m)) => BenchError::ConfigUnsupported(m),
            e => BenchError::Deploy(e),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Workload {
    Baseline,
    Crud,
    Macro,
}

impl Workload {
    pub fn name(self) -> &'static str {
        match self {
            Workload::Baseline => "baseline",
            Workload::Crud => "crud",
            Workload::Macro => "macro",
        }
    }

    pub fn policy(self) -> &'static str {
        match self {
            Workload::Baseline => BASELINE_POLICY,
            Workload::Crud | Workload::Macro => EMR_POLICY,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BenchSpec {
    pub workload: Workload,
    pub config: IsolationConfig,
    pub warmup: usize,
    pub iters: usize,
    pub seed: u64,
    /// Preloaded patients for the macro workload.
    pub dataset: usize,
}

impl BenchSpec {
    pub fn new(workload: Workload, config: IsolationConfig) -> Self {
        BenchSpec { workload, config, warmup: DEFAULT_WARMUP, iters: DEFAULT_ITERS, seed: 1, dataset: DEFAULT_DATASET }
    }
}

#[derive(Clone, Debug)]
pub struct BenchResult {
    pub spec: BenchSpec,
    pub rows: Vec<Row>,
    pub mix: Option<MixCounts>,
}

/// Writes the workload's policy to `dir` and returns its path.
pub fn write_policy(workload: Workload, dir: &Path) -> Result<PathBuf, BenchError> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}-policy.txt", workload.name()));
    std::fs::write(&path, workload.policy())?;
    Ok(path)
}

/// Deploys `spec.config` with `settings`, whose bootstrap must hold the
/// workload's policy, and runs the workload. Object state goes to a fresh
/// temporary data directory unless `settings` names one.
pub fn run(spec: &BenchSpec, settings: &DeploySettings, clock: &Clock) -> Result<BenchResult, BenchError> {
    let scratch = tempfile::tempdir()?;
    let mut settings = settings.clone();
    if settings.data_dir.is_none() {
        settings.data_dir = Some(scratch.path().to_owned());
    }
    let deployment = Deployment::launch(spec.config, &settings)?;
    let app = deployment.app();
    let (ops, mix) = match spec.workload {
        Workload::Baseline => (workloads::run_baseline(app, clock, spec.warmup, spec.iters)?, None),
        Workload::Crud => (workloads::run_crud(app, clock, spec.warmup, spec.iters)?, None),
        Workload::Macro => {
            let (ops, mix) = workloads::run_macro(app, clock, spec.warmup, spec.iters, spec.seed, spec.dataset)?;
            (ops, Some(mix))
        }
    };
    let samples_per = |s: &measure::Summary| s.samples;
    let rows = ops
        .iter()
        .map(|(op, s)| Row {
            workload: spec.workload.name().into(),
            operation: (*op).into(),
            app_tom: spec.config.app_tom.name().into(),
            tom_tps: spec.config.tom_tps.name().into(),
            cache: on_off(spec.config.cache_enabled),
            switchless: on_off(spec.config.call_mode == CallMode::Queued),
            iters: samples_per(s) as u64,
            warmup: spec.warmup as u64,
            median_ns: s.median_ns,
            median_cycles: s.median_cycles,
            ci_low_ns: s.ci_low_ns,
            ci_high_ns: s.ci_high_ns,
            overhead: None,
        })
        .collect();
    Ok(BenchResult { spec: *spec, rows, mix })
}

fn on_off(b: bool) -> String {
    if b { "on" } else { "off" }.into()
}
