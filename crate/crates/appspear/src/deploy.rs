//! Assembling the application, the TOMs and the TPS for one isolation
//! configuration.
//!
//! A component behind an IPC boundary runs as a child process of the same
//! executable (hidden `serve-tps` and `serve-tom` subcommands); a component
//! behind a TEE boundary runs in a simulated enclave hosted by the process
//! on the untrusted side of that boundary. The measured code image defaults
//! to that executable and the measured configuration is the policy
//! bootstrap file.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use appspear_core::{parse_bootstrap, BootstrapError};
use tempfile::TempDir;
use thiserror::Error;

use crate::app::App;
use crate::client::{LocalPort, PolicyPort, RemotePort};
use crate::host::{HostOptions, HostResponder, TomHost};
use crate::store::{PolicyStore, Sealer, StoreError, SNAPSHOT_EVERY};
use crate::tep::{AuditLog, TepError};
use crate::tom::TomError;
use crate::tps::{PolicyServer, SharedServer, TpsResponder};
use crate::transport::ipc::{IpcChannel, IpcServer, ServerProcess};
use crate::transport::tee::{Enclave, EnclaveConfig, EnclaveStats, Measurement};
use crate::transport::{socket_path, Boundary, CallMode, Channel, IsolationConfig, TransportError};

/// Provider name under which the co-located event processor pushes context.
pub const TEP_PROVIDER: &str = "tep";

#[derive(Debug, Error)]
pub enum DeployError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Tom(#[from] TomError),
    #[error("policy bootstrap: {0}")]
    Bootstrap(#[from] BootstrapError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Tep(#[from] TepError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug)]
pub struct DeploySettings {
    /// Policy bootstrap file; also the measured enclave configuration.
    pub bootstrap: PathBuf,
    /// Directory for sockets; a fresh temporary directory when absent.
    pub runtime_dir: Option<PathBuf>,
    /// Persistent policy store (`tps/`) and object store (`tom.kv`); all in
    /// memory when absent.
    pub data_dir: Option<PathBuf>,
    /// Executable providing the server subcommands.
    pub server_exe: PathBuf,
    /// Measured code image; `server_exe` when absent.
    pub enclave_code: Option<PathBuf>,
    /// Enclave launches fail unless the measurement equals this.
    pub expected_measurement: Option<Measurement>,
    pub queue_depth: usize,
    pub cache_capacity: Option<usize>,
    pub file_root: Option<PathBuf>,
    pub audit_log: Option<PathBuf>,
    /// Seal the policy store of an enclave-hosted TPS.
    pub seal_state: bool,
    pub snapshot_every: usize,
    pub timeout: Duration,
}

impl DeploySettings {
    /// Defaults, with the server executable taken from
    /// `APPSPEAR_SERVER_BIN` or else the running executable.
    pub fn new(bootstrap: impl Into<PathBuf>) -> Self {
        let server_exe = std::env::var_os("APPSPEAR_SERVER_BIN")
            .map(PathBuf::from)
            .or_else(|| std::env::current_exe().ok())
            .unwrap_or_else(|| PathBuf::from("appspear"));
        DeploySettings {
            bootstrap: bootstrap.into(),
            runtime_dir: None,
            data_dir: None,
            server_exe,
            enclave_code: None,
            expected_measurement: None,
            queue_depth: 64,
            cache_capacity: None,
            file_root: None,
            audit_log: None,
            seal_state: false,
            snapshot_every: SNAPSHOT_EVERY,
            timeout: Duration::from_secs(20),
        }
    }

    pub fn code_image(&self) -> &Path {
        self.enclave_code.as_deref().unwrap_or(&self.server_exe)
    }

    fn tps_dir(&self) -> Option<PathBuf> {
        self.data_dir.as_ref().map(|d| d.join("tps"))
    }

    fn host_options(&self, cache: bool) -> HostOptions {
        HostOptions {
            cache,
            cache_capacity: self.cache_capacity,
            kv_path: self.data_dir.as_ref().map(|d| d.join("tom.kv")),
            file_root: self.file_root.clone(),
        }
    }

    fn enclave_config(&self, mode: CallMode) -> EnclaveConfig {
        EnclaveConfig {
            code: self.code_image().to_owned(),
            config: self.bootstrap.clone(),
            expected: self.expected_measurement,
            call_mode: mode,
            queue_depth: self.queue_depth,
        }
    }

    /// Command-line flags shared by both server subcommands.
    fn common_args(&self, socket: &Path) -> Vec<String> {
        let mut a = vec![
            "--socket".into(),
            socket.display().to_string(),
            "--bootstrap".into(),
            self.bootstrap.display().to_string(),
            "--snapshot-every".into(),
            self.snapshot_every.to_string(),
        ];
        if let Some(d) = &self.data_dir {
            a.extend(["--data-dir".into(), d.display().to_string()]);
        }
        if let Some(l) = &self.audit_log {
            a.extend(["--audit-log".into(), l.display().to_string()]);
        }
        a
    }
}

/// Starts a policy server from bootstrap text, recovering its state from
/// `store_dir` when that holds one.
pub fn start_policy_server(
    bootstrap: &str,
    store_dir: Option<&Path>,
    snapshot_every: usize,
    audit_log: Option<&Path>,
    sealer: Option<Arc<dyn Sealer>>,
) -> Result<SharedServer, DeployError> {
    let boot = parse_bootstrap(bootstrap)?;
    let mut server = match store_dir {
        Some(dir) => {
            let (store, recovery) = PolicyStore::open_or_create(dir, &boot.state, snapshot_every, sealer)?;
            let state = match recovery {
                Some(r) => {
                    log::info!("recovered policy at epoch {} ({} log entries)", r.state.epoch(), r.replayed);
                    r.state
                }
                None => boot.state,
            };
            let mut s = PolicyServer::new(state);
            s.set_store(store);
            s
        }
        None => PolicyServer::new(boot.state),
    };
    if let Some(path) = audit_log {
        server.set_audit(Box::new(AuditLog::open(path)?));
    }
    server.register_provider(TEP_PROVIDER);
    Ok(server.shared())
}

/// The TOMs plus whatever serves their policy decisions.
pub struct TomSide {
    pub host: Arc<TomHost>,
    /// The policy server, when it shares this address space outside an
    /// enclave.
    pub server: Option<SharedServer>,
    pub enclave: Option<Enclave>,
    pub children: Vec<ServerProcess>,
}

/// Builds the TOM host with the TPS placed behind `tom_tps`. An IPC TPS is
/// reached at `tps_socket` when given, else spawned.
pub fn build_tom_side(
    tom_tps: Boundary,
    bootstrap: &str,
    settings: &DeploySettings,
    mode: CallMode,
    cache: bool,
    runtime_dir: &Path,
    tps_socket: Option<&Path>,
) -> Result<TomSide, DeployError> {
    let boot = parse_bootstrap(bootstrap)?;
    let (mut server, mut enclave, mut children) = (None, None, Vec::new());
    let port: Arc<dyn PolicyPort> = match tom_tps {
        Boundary::Lpc => {
            let shared = start_policy_server(
                bootstrap,
                settings.tps_dir().as_deref(),
                settings.snapshot_every,
                settings.audit_log.as_deref(),
                None,
            )?;
            let port = LocalPort::new(shared.clone());
            server = Some(shared);
            Arc::new(port)
        }
        Boundary::Ipc => {
            let socket = match tps_socket {
                Some(s) => s.to_owned(),
                None => {
                    let socket = socket_path(runtime_dir, "tps");
                    let mut args = vec!["serve-tps".to_owned()];
                    args.extend(settings.common_args(&socket));
                    children.push(ServerProcess::spawn(&settings.server_exe, &args, &socket, settings.timeout)?);
                    socket
                }
            };
            Arc::new(RemotePort::new(Arc::new(IpcChannel::connect(&socket, Some(settings.timeout))?)))
        }
        Boundary::Tee => {
            let s = settings.clone();
            let launched = Enclave::launch(&settings.enclave_config(mode), move |env| {
                let text = std::str::from_utf8(&env.config).map_err(|e| e.to_string())?;
                let sealer: Option<Arc<dyn Sealer>> =
                    if s.seal_state { Some(Arc::new(env.sealing_key.clone())) } else { None };
                let server =
                    start_policy_server(text, s.tps_dir().as_deref(), s.snapshot_every, s.audit_log.as_deref(), sealer)
                        .map_err(|e| e.to_string())?;
                Ok(Arc::new(TpsResponder::new(server)))
            })?;
            let channel: Arc<dyn Channel> = Arc::new(launched.channel());
            enclave = Some(launched);
            Arc::new(RemotePort::new(channel))
        }
    };
    let host = Arc::new(TomHost::new(port, &boot, &settings.host_options(cache))?);
    Ok(TomSide { host, server, enclave, children })
}

/// A running instantiation of the architecture.
pub struct Deployment {
    config: IsolationConfig,
    app: App,
    server: Option<SharedServer>,
    enclave: Option<Enclave>,
    measurement: Option<Measurement>,
    // Children die, and sockets are removed, before the runtime directory.
    children: Vec<ServerProcess>,
    _runtime: Option<TempDir>,
}

impl Deployment {
    pub fn launch(config: IsolationConfig, settings: &DeploySettings) -> Result<Self, DeployError> {
        if config.app_tom == Boundary::Tee && config.tom_tps == Boundary::Tee {
            return Err(TransportError::ConfigUnsupported("enclaves cannot be nested (TEE/TEE)".into()).into());
        }
        let bootstrap = std::fs::read_to_string(&settings.bootstrap)?;
        let (runtime_tmp, runtime_dir) = match &settings.runtime_dir {
            Some(d) => {
                std::fs::create_dir_all(d)?;
                (None, d.clone())
            }
            None => {
                let root = crate::transport::default_runtime_root();
                std::fs::create_dir_all(&root)?;
                let t = tempfile::Builder::new().prefix("appspear-").tempdir_in(root)?;
                let p = t.path().to_owned();
                (Some(t), p)
            }
        };
        let mode = config.call_mode;
        let cache = config.cache_enabled;
        let mut d = Deployment {
            config,
            app: App::remote(Arc::new(crate::transport::LpcChannel::new(Arc::new(crate::transport::EchoResponder)))),
            server: None,
            enclave: None,
            measurement: None,
            children: Vec::new(),
            _runtime: runtime_tmp,
        };
        match config.app_tom {
            Boundary::Lpc => {
                let side = build_tom_side(config.tom_tps, &bootstrap, settings, mode, cache, &runtime_dir, None)?;
                d.measurement = side.enclave.as_ref().map(Enclave::measurement);
                d.server = side.server;
                d.enclave = side.enclave;
                d.children = side.children;
                d.app = App::direct(side.host);
            }
            Boundary::Ipc => {
                let mut args = vec!["serve-tom".to_owned()];
                if config.tom_tps == Boundary::Ipc {
                    let tps_socket = socket_path(&runtime_dir, "tps");
                    let mut tps_args = vec!["serve-tps".to_owned()];
                    tps_args.extend(settings.common_args(&tps_socket));
                    d.children.push(ServerProcess::spawn(
                        &settings.server_exe,
                        &tps_args,
                        &tps_socket,
                        settings.timeout,
                    )?);
                    args.extend(["--tps-socket".into(), tps_socket.display().to_string()]);
                }
                let socket = socket_path(&runtime_dir, "tom");
                args.extend(settings.common_args(&socket));
                args.extend(["--tom-tps".into(), config.tom_tps.name().into()]);
                args.extend(["--queue-depth".into(), settings.queue_depth.to_string()]);
                args.extend(["--enclave-code".into(), settings.code_image().display().to_string()]);
                if mode == CallMode::Queued {
                    args.push("--switchless".into());
                }
                if cache {
                    args.push("--cache".into());
                }
                if let Some(n) = settings.cache_capacity {
                    args.extend(["--cache-capacity".into(), n.to_string()]);
                }
                if let Some(m) = settings.expected_measurement {
                    args.extend(["--expected-measurement".into(), m.to_hex()]);
                }
                if let Some(f) = &settings.file_root {
                    args.extend(["--file-root".into(), f.display().to_string()]);
                }
                if settings.seal_state {
                    args.push("--seal".into());
                }
                // The TOM process may itself need longer to come up when it
                // measures an enclave image.
                d.children.push(ServerProcess::spawn(&settings.server_exe, &args, &socket, settings.timeout)?);
                d.app = App::remote(Arc::new(IpcChannel::connect(&socket, Some(settings.timeout))?));
            }
            Boundary::Tee => {
                let s = settings.clone();
                let rt = runtime_dir.clone();
                let tom_tps = config.tom_tps;
                let children = Arc::new(std::sync::Mutex::new(Vec::new()));
                let kept = children.clone();
                let enclave = Enclave::launch(&settings.enclave_config(mode), move |env| {
                    let text = std::str::from_utf8(&env.config).map_err(|e| e.to_string())?;
                    let side = build_tom_side(tom_tps, text, &s, mode, cache, &rt, None).map_err(|e| e.to_string())?;
                    kept.lock().unwrap().extend(side.children);
                    Ok(Arc::new(HostResponder::new(side.host)))
                })?;
                d.children.extend(std::mem::take(&mut *children.lock().unwrap()));
                d.measurement = Some(enclave.measurement());
                d.app = App::remote(Arc::new(enclave.channel()));
                d.enclave = Some(enclave);
            }
        }
        Ok(d)
    }

    pub fn config(&self) -> IsolationConfig {
        self.config
    }

    pub fn app(&self) -> &App {
        &self.app
    }

    /// The policy server, when it runs unenclaved in this process.
    pub fn server(&self) -> Option<&SharedServer> {
        self.server.as_ref()
    }

    /// Measurement of the enclave hosted by this process, if any.
    pub fn measurement(&self) -> Option<Measurement> {
        self.measurement
    }

    pub fn enclave(&self) -> Option<&Enclave> {
        self.enclave.as_ref()
    }

    pub fn enclave_stats(&self) -> Option<EnclaveStats> {
        self.enclave.as_ref().map(Enclave::stats)
    }

    pub fn child_count(&self) -> usize {
        self.children.len()
    }
}

impl Drop for Deployment {
    fn drop(&mut self) {
        // Stop the enclave before the children its TOM may be talking to.
        self.enclave.take();
        self.children.clear();
    }
}

/// Body of the `serve-tps` child: serves a policy server until the parent
/// goes away.
pub fn serve_tps(socket: &Path, settings: &DeploySettings) -> Result<(), DeployError> {
    crate::transport::ipc::exit_with_parent();
    let bootstrap = std::fs::read_to_string(&settings.bootstrap)?;
    let server = start_policy_server(
        &bootstrap,
        settings.tps_dir().as_deref(),
        settings.snapshot_every,
        settings.audit_log.as_deref(),
        None,
    )?;
    IpcServer::bind(socket, Arc::new(TpsResponder::new(server)))?.wait();
    Ok(())
}

/// Body of the `serve-tom` child: serves the TOMs, with the TPS placed
/// behind `tom_tps`, until the parent goes away.
pub fn serve_tom(
    socket: &Path,
    settings: &DeploySettings,
    tom_tps: Boundary,
    tps_socket: Option<&Path>,
    mode: CallMode,
    cache: bool,
) -> Result<(), DeployError> {
    crate::transport::ipc::exit_with_parent();
    let bootstrap = std::fs::read_to_string(&settings.bootstrap)?;
    let runtime = socket.parent().unwrap_or(Path::new("."));
    let side = build_tom_side(tom_tps, &bootstrap, settings, mode, cache, runtime, tps_socket)?;
    let server = IpcServer::bind(socket, Arc::new(HostResponder::new(side.host.clone())))?;
    server.wait();
    drop(side);
    Ok(())
}
