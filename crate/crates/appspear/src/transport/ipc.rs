//! Unix domain socket backend.
//!
//! Frames are the wire codec's length-prefixed messages. A requester keeps a
//! small pool of connections so concurrent callers never interleave on one
//! stream; each connection carries one outstanding request at a time and
//! responses are matched by request id. Invalidation subscribers use a
//! dedicated connection opened with a `Subscribe` message, after which the
//! server pushes notices and waits for each acknowledgement.

use std::io::{self, BufReader, Read, Write};
use std::os::fd::AsRawFd;
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use appspear_core::wire::{frame_len, MAX_FRAME};
use appspear_core::{Ack, Invalidation, Status, WireMessage};

use super::{Channel, Responder, Subscriber, TransportError};

/// A socket with framing on both directions.
pub struct FramedStream {
    reader: BufReader<UnixStream>,
    writer: UnixStream,
    timeout: Option<Duration>,
}

/// Blocks until `stream` is readable. A reader blocked in `read` on a unix
/// socket is also woken whenever its peer frees send-buffer space, which on
/// a loaded CPU costs a pair of context switches per message; `poll` only
/// wakes for the requested events.
fn wait_readable(stream: &UnixStream, timeout: Option<Duration>) -> io::Result<()> {
    let ms = timeout.map_or(-1, |t| t.as_millis().min(i32::MAX as u128) as i32);
    let mut fd = libc::pollfd { fd: stream.as_raw_fd(), events: libc::POLLIN, revents: 0 };
    loop {
        match unsafe { libc::poll(&mut fd, 1, ms) } {
            0 => return Err(io::Error::new(io::ErrorKind::TimedOut, "peer did not answer in time")),
            n if n > 0 => return Ok(()),
            _ => {
                let e = io::Error::last_os_error();
                if e.kind() != io::ErrorKind::Interrupted {
                    return Err(e);
                }
            }
        }
    }
}

impl FramedStream {
    pub fn new(stream: UnixStream) -> io::Result<Self> {
        let writer = stream.try_clone()?;
        Ok(FramedStream { reader: BufReader::with_capacity(64 * 1024, stream), writer, timeout: None })
    }

    pub fn connect(path: &Path) -> io::Result<Self> {
        FramedStream::new(UnixStream::connect(path)?)
    }

    pub fn set_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()> {
        self.timeout = timeout;
        self.writer.set_read_timeout(timeout)?;
        self.writer.set_write_timeout(timeout)
    }

    pub fn send(&mut self, msg: &WireMessage) -> Result<(), TransportError> {
        self.writer.write_all(&msg.encode_frame()).map_err(TransportError::failure)
    }

    pub fn recv(&mut self) -> Result<WireMessage, TransportError> {
        if self.reader.buffer().is_empty() {
            wait_readable(self.reader.get_ref(), self.timeout).map_err(TransportError::failure)?;
        }
        let mut header = [0u8; 4];
        self.reader.read_exact(&mut header).map_err(TransportError::failure)?;
        let len = frame_len(&header).map_err(TransportError::failure)?;
        if len == 0 || len > MAX_FRAME {
            return Err(TransportError::failure(format!("bad frame length {len}")));
        }
        let mut body = vec![0u8; len];
        self.reader.read_exact(&mut body).map_err(TransportError::failure)?;
        WireMessage::decode_payload(body[0], &body[1..]).map_err(TransportError::failure)
    }

    fn into_stream(self) -> UnixStream {
        self.writer
    }
}

/// Requester proxy over a socket path.
pub struct IpcChannel {
    path: PathBuf,
    timeout: Option<Duration>,
    pool: Mutex<Vec<FramedStream>>,
    listeners: Mutex<Vec<JoinHandle<()>>>,
}

impl IpcChannel {
    /// Connects eagerly once so an absent server is reported up front.
    pub fn connect(path: &Path, timeout: Option<Duration>) -> Result<Self, TransportError> {
        let mut first = FramedStream::connect(path)
            .map_err(|e| TransportError::BackendUnavailable(format!("{}: {e}", path.display())))?;
        first.set_timeout(timeout).map_err(TransportError::failure)?;
        Ok(IpcChannel {
            path: path.to_owned(),
            timeout,
            pool: Mutex::new(vec![first]),
            listeners: Mutex::new(Vec::new()),
        })
    }

    fn checkout(&self) -> Result<FramedStream, TransportError> {
        if let Some(c) = self.pool.lock().unwrap().pop() {
            return Ok(c);
        }
        let mut c = FramedStream::connect(&self.path).map_err(TransportError::failure)?;
        c.set_timeout(self.timeout).map_err(TransportError::failure)?;
        Ok(c)
    }
}

impl Channel for IpcChannel {
    fn call(&self, msg: WireMessage) -> Result<WireMessage, TransportError> {
        let id = msg.request_id();
        let mut conn = self.checkout()?;
        conn.send(&msg)?;
        let reply = conn.recv()?;
        if reply.request_id() != id {
            // The stream is out of step; drop it rather than reuse it.
            return Err(TransportError::failure(format!(
                "response id {} does not match request {id}",
                reply.request_id()
            )));
        }
        self.pool.lock().unwrap().push(conn);
        Ok(reply)
    }

    fn subscribe(&self, subscriber: Arc<dyn Subscriber>) -> Result<(), TransportError> {
        let handle = listen(&self.path, subscriber)?;
        self.listeners.lock().unwrap().push(handle);
        Ok(())
    }
}

/// Opens a subscription connection and serves notices on a thread until the
/// server goes away. Returns after the server has registered it.
fn listen(path: &Path, subscriber: Arc<dyn Subscriber>) -> Result<JoinHandle<()>, TransportError> {
    let mut conn = FramedStream::connect(path).map_err(TransportError::failure)?;
    conn.send(&WireMessage::Subscribe { request_id: 0 })?;
    match conn.recv()? {
        WireMessage::Ack(Ack { status: Status::Ok, .. }) => {}
        other => return Err(TransportError::failure(format!("subscription refused: {other:?}"))),
    }
    let handle = thread::Builder::new()
        .name("appspear-invalidation".into())
        .spawn(move || loop {
            let notice = match conn.recv() {
                Ok(WireMessage::Invalidation(n)) => n,
                Ok(other) => {
                    log::warn!("unexpected message on subscription: {other:?}");
                    continue;
                }
                Err(_) => {
                    subscriber.disconnected();
                    return;
                }
            };
            let status = match subscriber.deliver(&notice) {
                Ok(()) => Status::Ok,
                Err(_) => Status::Internal,
            };
            let ack = Ack { request_id: notice.epoch, status, epoch: notice.epoch };
            if conn.send(&WireMessage::Ack(ack)).is_err() {
                subscriber.disconnected();
                return;
            }
        })
        .map_err(TransportError::failure)?;
    Ok(handle)
}

/// Server side of a subscription connection.
struct RemoteSubscriber {
    conn: Mutex<FramedStream>,
}

impl Subscriber for RemoteSubscriber {
    fn deliver(&self, notice: &Invalidation) -> Result<(), TransportError> {
        let mut conn = self.conn.lock().unwrap();
        conn.send(&WireMessage::Invalidation(notice.clone()))?;
        match conn.recv()? {
            WireMessage::Ack(Ack { request_id, status: Status::Ok, .. }) if request_id == notice.epoch => Ok(()),
            other => Err(TransportError::failure(format!("bad invalidation ack: {other:?}"))),
        }
    }
}

/// Accept loop serving a [`Responder`] on a socket path.
pub struct IpcServer {
    path: PathBuf,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl IpcServer {
    /// Binds `path`, replacing a stale socket file.
    pub fn bind(path: &Path, responder: Arc<dyn Responder>) -> Result<Self, TransportError> {
        if path.exists() {
            std::fs::remove_file(path).map_err(|e| TransportError::BackendUnavailable(e.to_string()))?;
        }
        let listener = UnixListener::bind(path)
            .map_err(|e| TransportError::BackendUnavailable(format!("{}: {e}", path.display())))?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let accept = thread::Builder::new()
            .name("appspear-accept".into())
            .spawn(move || {
                for stream in listener.incoming() {
                    if flag.load(Ordering::SeqCst) {
                        return;
                    }
                    let Ok(stream) = stream else { continue };
                    let responder = responder.clone();
                    let spawned = thread::Builder::new()
                        .name("appspear-conn".into())
                        .spawn(move || serve_connection(stream, responder));
                    if let Err(e) = spawned {
                        log::error!("cannot spawn connection thread: {e}");
                    }
                }
            })
            .map_err(|e| TransportError::BackendUnavailable(e.to_string()))?;
        Ok(IpcServer { path: path.to_owned(), stop, accept: Some(accept) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Blocks until the accept loop ends.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for IpcServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept.take() {
            // Wake the blocking accept.
            let _ = UnixStream::connect(&self.path);
            let _ = h.join();
        }
        let _ = std::fs::remove_file(&self.path);
    }
}

fn serve_connection(stream: UnixStream, responder: Arc<dyn Responder>) {
    let Ok(mut conn) = FramedStream::new(stream) else { return };
    loop {
        let msg = match conn.recv() {
            Ok(m) => m,
            Err(_) => return,
        };
        if let WireMessage::Subscribe { request_id } = msg {
            let ack = Ack { request_id, status: Status::Ok, epoch: 0 };
            if conn.send(&WireMessage::Ack(ack)).is_err() {
                return;
            }
            let Ok(stream) = FramedStream::new(conn.into_stream()) else { return };
            let sub = Arc::new(RemoteSubscriber { conn: Mutex::new(stream) });
            if let Err(e) = responder.subscribe(sub) {
                log::warn!("subscription rejected: {e}");
            }
            return;
        }
        let reply = responder.respond(msg);
        if conn.send(&reply).is_err() {
            return;
        }
    }
}

/// A server running in a child process, killed on drop.
pub struct ServerProcess {
    child: Child,
    socket: PathBuf,
}

impl ServerProcess {
    /// Spawns `exe args...` and waits until `socket` accepts connections.
    /// The child's stdin is a pipe it watches to exit with its parent.
    pub fn spawn(exe: &Path, args: &[String], socket: &Path, timeout: Duration) -> Result<Self, TransportError> {
        let child = Command::new(exe)
            .args(args)
            .stdin(Stdio::piped())
            .spawn()
            .map_err(|e| TransportError::BackendUnavailable(format!("{}: {e}", exe.display())))?;
        let mut proc = ServerProcess { child, socket: socket.to_owned() };
        let deadline = Instant::now() + timeout;
        loop {
            if UnixStream::connect(socket).is_ok() {
                return Ok(proc);
            }
            if let Ok(Some(status)) = proc.child.try_wait() {
                return Err(TransportError::BackendUnavailable(format!("server exited early: {status}")));
            }
            if Instant::now() > deadline {
                return Err(TransportError::BackendUnavailable(format!(
                    "server did not open {} in time",
                    socket.display()
                )));
            }
            thread::sleep(Duration::from_millis(2));
        }
    }

    pub fn id(&self) -> u32 {
        self.child.id()
    }

    /// Kills the server abruptly, as a crash would.
    pub fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for ServerProcess {
    fn drop(&mut self) {
        self.kill();
        let _ = std::fs::remove_file(&self.socket);
    }
}

/// For child servers: exits the process once stdin reaches end of file,
/// i.e. when the parent that spawned it is gone.
pub fn exit_with_parent() {
    thread::spawn(|| {
        let mut buf = [0u8; 64];
        let mut stdin = io::stdin();
        while matches!(stdin.read(&mut buf), Ok(n) if n > 0) {}
        std::process::exit(0);
    });
}
