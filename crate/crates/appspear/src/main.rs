use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use appspear::app::App;
use appspear::bench::{self, measure::Clock, report, BenchSpec, Workload};
use appspear::deploy::{self, DeploySettings, Deployment};
use appspear::emr::EMR_POLICY;
use appspear::transport::tee::{measure_files, Measurement};
use appspear::transport::{Boundary, CallMode, IsolationConfig};
use appspear_core::{parse_bootstrap, EntityId, EntityKind};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "appspear", version, about = "Application-specific access control with configurable isolation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

impl Toggle {
    fn on(self) -> bool {
        self == Toggle::On
    }
}

#[derive(Args, Clone)]
struct Placement {
    #[arg(long, value_enum, default_value = "lpc")]
    app_tom: Side,
    #[arg(long, value_enum, default_value = "lpc")]
    tom_tps: Side,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Side {
    Lpc,
    Ipc,
    Tee,
}

impl From<Side> for Boundary {
    fn from(s: Side) -> Self {
        match s {
            Side::Lpc => Boundary::Lpc,
            Side::Ipc => Boundary::Ipc,
            Side::Tee => Boundary::Tee,
        }
    }
}

/// Flags shared by everything that starts trusted components.
#[derive(Args, Clone)]
struct Common {
    /// Directory for state that survives restarts.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Directory for sockets; defaults to a fresh temporary directory.
    #[arg(long, env = "APPSPEAR_RUNTIME_DIR")]
    runtime_dir: Option<PathBuf>,
    /// Measured code image of enclaves; defaults to this executable.
    #[arg(long)]
    enclave_code: Option<PathBuf>,
    /// Refuse to launch enclaves whose measurement differs (hex).
    #[arg(long, value_parser = parse_measurement)]
    expected_measurement: Option<Measurement>,
    #[arg(long, default_value_t = 64)]
    queue_depth: usize,
    #[arg(long)]
    cache_capacity: Option<usize>,
    #[arg(long)]
    audit_log: Option<PathBuf>,
    #[arg(long)]
    file_root: Option<PathBuf>,
    #[arg(long, default_value_t = appspear::store::SNAPSHOT_EVERY)]
    snapshot_every: usize,
}

impl Common {
    fn settings(&self, bootstrap: &Path) -> DeploySettings {
        let mut s = DeploySettings::new(bootstrap);
        s.runtime_dir = self.runtime_dir.clone();
        s.data_dir = self.data_dir.clone();
        s.enclave_code = self.enclave_code.clone();
        s.expected_measurement = self.expected_measurement;
        s.queue_depth = self.queue_depth;
        s.cache_capacity = self.cache_capacity;
        s.audit_log = self.audit_log.clone();
        s.file_root = self.file_root.clone();
        s.snapshot_every = self.snapshot_every;
        s
    }
}

fn parse_measurement(s: &str) -> Result<Measurement, String> {
    Measurement::from_hex(s).ok_or_else(|| "expected 64 hex digits".into())
}

#[derive(Subcommand)]
enum Command {
    /// Run a benchmark and write CSV results.
    Bench {
        #[arg(long, value_enum)]
        workload: Workload,
        #[command(flatten)]
        placement: Placement,
        /// Run all seven placements instead of the one given.
        #[arg(long)]
        all_variants: bool,
        #[arg(long, value_enum, default_value = "off")]
        cache: Toggle,
        #[arg(long, value_enum, default_value = "off")]
        switchless: Toggle,
        #[arg(long, default_value_t = bench::DEFAULT_ITERS)]
        iters: usize,
        #[arg(long, default_value_t = bench::DEFAULT_WARMUP)]
        warmup: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Patients preloaded for the macro workload.
        #[arg(long, default_value_t = bench::DEFAULT_DATASET)]
        dataset: usize,
        /// Pin the driver, and the servers it starts, to this CPU.
        #[arg(long)]
        pin: Option<usize>,
        #[arg(long, default_value = "results.csv")]
        out: PathBuf,
        /// Also write error-bar plot data here.
        #[arg(long)]
        plot: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Interactive EMR session.
    Emr {
        #[command(flatten)]
        placement: Placement,
        #[arg(long, value_enum, default_value = "off")]
        cache: Toggle,
        #[arg(long, value_enum, default_value = "off")]
        switchless: Toggle,
        /// Policy bootstrap; the built-in EMR policy when absent.
        #[arg(long)]
        bootstrap: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Print the enclave measurement for a code image and bootstrap file.
    Measure {
        #[arg(long)]
        bootstrap: PathBuf,
        /// Defaults to this executable.
        #[arg(long)]
        code: Option<PathBuf>,
    },
    /// Parse a policy bootstrap file and summarize it.
    CheckPolicy { path: PathBuf },
    #[command(hide = true)]
    ServeTps {
        #[arg(long)]
        socket: PathBuf,
        #[arg(long)]
        bootstrap: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    #[command(hide = true)]
    ServeTom {
        #[arg(long)]
        socket: PathBuf,
        #[arg(long)]
        bootstrap: PathBuf,
        #[arg(long, value_enum)]
        tom_tps: Side,
        #[arg(long)]
        tps_socket: Option<PathBuf>,
        #[arg(long)]
        switchless: bool,
        #[arg(long)]
        cache: bool,
        #[arg(long)]
        seal: bool,
        #[command(flatten)]
        common: Common,
    },
}

fn mode(switchless: bool) -> CallMode {
    if switchless {
        CallMode::Queued
    } else {
        CallMode::Synchronous
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("appspear: {e}");
            ExitCode::FAILURE
        }
    }
}

type Fallible = Result<(), Box<dyn std::error::Error>>;

fn run(command: Command) -> Fallible {
    match command {
        Command::Bench {
            workload,
            placement,
            all_variants,
            cache,
            switchless,
            iters,
            warmup,
            seed,
            dataset,
            pin,
            out,
            plot,
            common,
        } => {
            let scratch = tempfile::tempdir()?;
            let policy = bench::write_policy(workload, scratch.path())?;
            let settings = common.settings(&policy);
            let configs = if all_variants {
                IsolationConfig::all_variants()
            } else {
                vec![IsolationConfig::new(placement.app_tom.into(), placement.tom_tps.into())]
            };
            let clock = Clock::detect()?;
            if !clock.has_cycles() {
                log::warn!("no cycle counter; reporting wall time only");
            }
            // Before any server starts, so that they inherit the policy.
            if let Err(w) = bench::measure::batch_scheduling() {
                log::warn!("{w}");
            }
            for w in bench::measure::stabilize(pin) {
                log::warn!("{w}");
            }
            let mut rows = Vec::new();
            for config in configs {
                let config = config.with_cache(cache.on()).with_call_mode(mode(switchless.on()));
                let spec = BenchSpec { workload, config, warmup, iters, seed, dataset };
                eprintln!("running {} under {}", workload.name(), config.label());
                let result = bench::run(&spec, &settings, &clock)?;
                if let Some(mix) = result.mix {
                    eprintln!(
                        "  mix create/read/update/delete = {}/{}/{}/{}, person creates {}",
                        mix.create, mix.read, mix.update, mix.delete, mix.person_creates
                    );
                }
                rows.extend(result.rows);
            }
            report::fill_overhead(&mut rows);
            report::write_csv(&rows, std::fs::File::create(&out)?)?;
            if let Some(p) = plot {
                std::fs::write(p, report::plot_data(&rows))?;
            }
            for r in &rows {
                println!(
                    "{:<9} {:<8} {}/{} cache={} switchless={} median={:.0}ns [{:.0}, {:.0}]{}",
                    r.workload,
                    r.operation,
                    r.app_tom,
                    r.tom_tps,
                    r.cache,
                    r.switchless,
                    r.median_ns,
                    r.ci_low_ns,
                    r.ci_high_ns,
                    r.overhead.map(|o| format!(" x{o:.2}")).unwrap_or_default()
                );
            }
            Ok(())
        }
        Command::Emr { placement, cache, switchless, bootstrap, common } => {
            let scratch = tempfile::tempdir()?;
            let bootstrap = match bootstrap {
                Some(b) => b,
                None => {
                    let p = scratch.path().join("emr-policy.txt");
                    std::fs::write(&p, EMR_POLICY)?;
                    p
                }
            };
            let config = IsolationConfig::new(placement.app_tom.into(), placement.tom_tps.into())
                .with_cache(cache.on())
                .with_call_mode(mode(switchless.on()));
            let deployment = Deployment::launch(config, &common.settings(&bootstrap))?;
            if let Some(m) = deployment.measurement() {
                eprintln!("enclave measurement {m}");
            }
            repl(deployment.app(), io::stdin().lock(), io::stdout().lock())
        }
        Command::Measure { bootstrap, code } => {
            let code = match code {
                Some(c) => c,
                None => std::env::current_exe()?,
            };
            println!("{}", measure_files(&code, &bootstrap)?);
            Ok(())
        }
        Command::CheckPolicy { path } => {
            let boot = parse_bootstrap(&std::fs::read_to_string(&path)?)?;
            let s = &boot.state;
            println!(
                "{} operations, {} roles, {} permissions, {} users, epoch {}",
                s.operations().count(),
                s.roles().count(),
                s.permissions().count(),
                boot.users.len(),
                s.epoch()
            );
            for (name, id) in &boot.users {
                let roles: Vec<&str> = s.assigned_roles(*id).map(|r| r.as_str()).collect();
                println!("  {name} ({id}): {}", roles.join(", "));
            }
            Ok(())
        }
        Command::ServeTps { socket, bootstrap, common } => {
            deploy::serve_tps(&socket, &common.settings(&bootstrap))?;
            Ok(())
        }
        Command::ServeTom { socket, bootstrap, tom_tps, tps_socket, switchless, cache, seal, common } => {
            let mut settings = common.settings(&bootstrap);
            settings.seal_state = seal;
            settings.timeout = Duration::from_secs(20);
            deploy::serve_tom(&socket, &settings, tom_tps.into(), tps_socket.as_deref(), mode(switchless), cache)?;
            Ok(())
        }
    }
}

/// Splits a command line on whitespace, keeping double-quoted runs whole.
fn tokenize(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut any = false;
    for c in line.chars() {
        match c {
            '"' => {
                quoted = !quoted;
                any = true;
            }
            c if c.is_whitespace() && !quoted => {
                if any {
                    out.push(std::mem::take(&mut cur));
                    any = false;
                }
            }
            c => {
                cur.push(c);
                any = true;
            }
        }
    }
    if any {
        out.push(cur);
    }
    out
}

/// Accepts `kind#serial` or a bare serial of `default`.
fn parse_id(s: &str, default: EntityKind) -> Result<EntityId, String> {
    let (kind, serial) = match s.split_once('#') {
        Some((k, n)) => (EntityKind::from_name(k).ok_or(format!("unknown kind `{k}`"))?, n),
        None => (default, s),
    };
    let serial: u64 = serial.parse().map_err(|_| format!("bad id `{s}`"))?;
    Ok(EntityId::new(kind, serial))
}

const HELP: &str = "\
login USER | logout | activate ROLE | deactivate ROLE
person NAME ADDRESS | delete-person ID | address ID | set-address ID ADDRESS
patient PERSON DIAGNOSIS | delete-patient ID | diagnosis ID | set-diagnosis ID TEXT
load N [SEED] | stats | help | quit";

fn repl(app: &App, input: impl BufRead, mut out: impl Write) -> Fallible {
    let mut user: Option<EntityId> = None;
    write!(out, "> ")?;
    out.flush()?;
    for line in input.lines() {
        let words = tokenize(&line?);
        let args: Vec<&str> = words.iter().map(String::as_str).collect();
        match step(app, &mut user, &args) {
            Ok(Step::Quit) => break,
            Ok(Step::Print(text)) => writeln!(out, "{text}")?,
            Ok(Step::Quiet) => {}
            Err(e) => writeln!(out, "error: {e}")?,
        }
        write!(out, "> ")?;
        out.flush()?;
    }
    if let Some(u) = user {
        let _ = app.logout(u);
    }
    Ok(())
}

enum Step {
    Quiet,
    Print(String),
    Quit,
}

fn step(app: &App, user: &mut Option<EntityId>, args: &[&str]) -> Result<Step, String> {
    let me = || user.ok_or_else(|| "not logged in".to_string());
    let person = |s: &str| parse_id(s, EntityKind::Person);
    let patient = |s: &str| parse_id(s, EntityKind::Patient);
    let e = |e: appspear::tom::TomError| e.to_string();
    Ok(Step::Print(match args {
        [] => return Ok(Step::Quiet),
        ["help"] => HELP.into(),
        ["quit" | "exit"] => return Ok(Step::Quit),
        ["login", name] => {
            if let Some(u) = user.take() {
                app.logout(u).map_err(e)?;
            }
            let id = app.login(name).map_err(e)?;
            *user = Some(id);
            format!("logged in as {id}")
        }
        ["logout"] => {
            app.logout(me()?).map_err(e)?;
            *user = None;
            "logged out".into()
        }
        ["activate", role] => app.activate_role(me()?, role).map(|_| "ok".into()).map_err(e)?,
        ["deactivate", role] => app.deactivate_role(me()?, role).map(|_| "ok".into()).map_err(e)?,
        ["person", name, address] => app.create_person(me()?, name, address).map_err(e)?.to_string(),
        ["delete-person", id] => app.delete_person(me()?, person(id)?).map(|_| "ok".into()).map_err(e)?,
        ["address", id] => app.get_address(me()?, person(id)?).map_err(e)?,
        ["set-address", id, address] => {
            format!("version {}", app.set_address(me()?, person(id)?, address).map_err(e)?)
        }
        ["patient", p, diagnosis] => app.create_patient(me()?, person(p)?, diagnosis).map_err(e)?.to_string(),
        ["delete-patient", id] => app.delete_patient(me()?, patient(id)?).map(|_| "ok".into()).map_err(e)?,
        ["diagnosis", id] => app.get_diagnosis(me()?, patient(id)?).map_err(e)?,
        ["set-diagnosis", id, text] => {
            format!("version {}", app.set_diagnosis(me()?, patient(id)?, text).map_err(e)?)
        }
        ["load", n, rest @ ..] => {
            let n: usize = n.parse().map_err(|_| "bad count".to_string())?;
            let seed = match rest {
                [] => 1,
                [s] => s.parse().map_err(|_| "bad seed".to_string())?,
                _ => return Err("usage: load N [SEED]".into()),
            };
            format!("loaded {} patients", app.load_dataset(me()?, seed, n).map_err(e)?.len())
        }
        ["stats"] => format!("{:?}", app.stats().map_err(e)?),
        _ => return Err("unknown command; try `help`".into()),
    }))
}
