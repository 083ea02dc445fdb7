use std::io::{self, ErrorKind};
use std::net::{SocketAddr, TcpListener, TcpStream, UdpSocket};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use ndf_core::dsp::save_wav;
use ndf_core::{NdfError, Synthesizer};
use tempfile::TempDir;
use thiserror::Error;
use tungstenite::{Message, WebSocket};

use crate::latency::{LatencyHistogram, LatencySummary};
use crate::mailbox::Mailbox;
use crate::protocol::{parse_message, ControlMessage, Reply, Status};

pub const DEFAULT_UDP_PORT: u16 = 7770;
pub const DEFAULT_WS_PORT: u16 = 7771;

/// How often blocked readers wake up to check for shutdown.
const POLL: Duration = Duration::from_millis(20);
/// WebSocket connections poll more often because replies wait on this tick.
const WS_POLL: Duration = Duration::from_millis(2);

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot bind {transport} on {addr}: {source}")]
    Bind {
        transport: &'static str,
        addr: SocketAddr,
        source: io::Error,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Core(#[from] NdfError),
}

/// Anything that turns control values and a class into audio samples.
pub trait Generator: Send + Sync + 'static {
    fn n_classes(&self) -> usize;

    fn generate(&self, controls: [f64; 3], class: usize) -> ndf_core::Result<Vec<f64>>;
}

impl Generator for Synthesizer {
    fn n_classes(&self) -> usize {
        Synthesizer::n_classes(self)
    }

    fn generate(&self, controls: [f64; 3], class: usize) -> ndf_core::Result<Vec<f64>> {
        let z = self.latent_for(&controls)?;
        Ok(Synthesizer::generate(self, &z, class)?.into_samples())
    }
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub udp_addr: SocketAddr,
    pub ws_addr: SocketAddr,
    /// Parent of the per-session output directory; the system default if unset.
    pub temp_root: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            udp_addr: SocketAddr::from(([127, 0, 0, 1], DEFAULT_UDP_PORT)),
            ws_addr: SocketAddr::from(([127, 0, 0, 1], DEFAULT_WS_PORT)),
            temp_root: None,
        }
    }
}

#[derive(Clone)]
enum ReplyTarget {
    Udp { socket: Arc<UdpSocket>, peer: SocketAddr },
    Ws(Sender<Reply>),
}

impl ReplyTarget {
    fn send(&self, reply: Reply) {
        match self {
            ReplyTarget::Udp { socket, peer } => {
                if let Err(e) = socket.send_to(reply.to_json().as_bytes(), peer) {
                    warn!("udp reply to {peer} failed: {e}");
                }
            }
            ReplyTarget::Ws(tx) => {
                if tx.send(reply).is_err() {
                    debug!("websocket client went away before its reply");
                }
            }
        }
    }
}

struct Job {
    msg: ControlMessage,
    target: ReplyTarget,
    received: Instant,
}

struct Shared {
    generator: Arc<dyn Generator>,
    mailbox: Mailbox<Job>,
    latency: LatencyHistogram,
    session_dir: PathBuf,
    stop_readers: AtomicBool,
    stop_connections: AtomicBool,
    files_written: AtomicU64,
}

impl Shared {
    /// Validates a raw message and hands it to the worker, answering anything
    /// that cannot be processed right away.
    fn submit(&self, raw: &[u8], target: ReplyTarget) {
        let received = Instant::now();
        let msg = match parse_message(raw, self.generator.n_classes()) {
            Ok(msg) => msg,
            Err(reply) => {
                info!("request {:?}: {:?} ({})", reply.id, reply.status, reply.error.as_deref().unwrap_or(""));
                target.send(reply);
                return;
            }
        };
        let job = Job {
            msg,
            target,
            received,
        };
        match self.mailbox.post(job) {
            Ok(None) => {}
            Ok(Some(old)) => {
                info!("request {}: superseded by {}", old.msg.id, msg.id);
                old.target.send(Reply::status(Some(old.msg.id), Status::Superseded));
            }
            Err(job) => {
                job.target
                    .send(Reply::error(Some(job.msg.id), Status::InternalError, "server is shutting down"));
            }
        }
    }

    fn process(&self, job: Job) {
        let Job {
            msg,
            target,
            received,
        } = job;
        let reply = match self.generator.generate(msg.controls(), msg.cat as usize) {
            Err(e) => Reply::error(Some(msg.id), Status::InternalError, e.to_string()),
            Ok(samples) => match &target {
                ReplyTarget::Ws(_) => Reply {
                    samples: Some(samples),
                    ..Reply::status(Some(msg.id), Status::Ok)
                },
                ReplyTarget::Udp { .. } => {
                    let seq = self.files_written.fetch_add(1, Ordering::Relaxed);
                    let path = self.session_dir.join(format!("{seq:06}-{}.wav", msg.id));
                    match save_wav(&path, &samples) {
                        Ok(()) => Reply {
                            path: Some(path.to_string_lossy().into_owned()),
                            ..Reply::status(Some(msg.id), Status::Ok)
                        },
                        Err(e) => Reply::error(Some(msg.id), Status::InternalError, e.to_string()),
                    }
                }
            },
        };
        let status = reply.status;
        target.send(reply);
        let elapsed = received.elapsed();
        if status == Status::Ok {
            self.latency.record(elapsed);
        }
        info!(
            "request {}: {:?} in {:.2} ms",
            msg.id,
            status,
            elapsed.as_secs_f64() * 1e3
        );
    }
}

/// A running service. Dropping it shuts it down.
pub struct Server {
    shared: Arc<Shared>,
    udp_addr: SocketAddr,
    ws_addr: SocketAddr,
    session: Option<TempDir>,
    readers: Vec<JoinHandle<()>>,
    connections: Arc<Mutex<Vec<JoinHandle<()>>>>,
    worker: Option<JoinHandle<()>>,
}

impl Server {
    /// Binds both transports and starts the reader and worker threads.
    pub fn start(generator: Arc<dyn Generator>, config: &ServerConfig) -> Result<Server, ServerError> {
        let udp = UdpSocket::bind(config.udp_addr).map_err(|source| ServerError::Bind {
            transport: "UDP",
            addr: config.udp_addr,
            source,
        })?;
        let listener = TcpListener::bind(config.ws_addr).map_err(|source| ServerError::Bind {
            transport: "WebSocket",
            addr: config.ws_addr,
            source,
        })?;
        udp.set_read_timeout(Some(POLL))?;
        listener.set_nonblocking(true)?;
        let udp_addr = udp.local_addr()?;
        let ws_addr = listener.local_addr()?;

        let builder = {
            let mut b = tempfile::Builder::new();
            b.prefix("ndf-session-");
            b
        };
        let session = match &config.temp_root {
            Some(root) => builder.tempdir_in(root)?,
            None => builder.tempdir()?,
        };

        let shared = Arc::new(Shared {
            generator,
            mailbox: Mailbox::new(),
            latency: LatencyHistogram::new(),
            session_dir: session.path().to_path_buf(),
            stop_readers: AtomicBool::new(false),
            stop_connections: AtomicBool::new(false),
            files_written: AtomicU64::new(0),
        });
        let connections = Arc::new(Mutex::new(Vec::new()));

        let worker = {
            let shared = Arc::clone(&shared);
            thread::Builder::new()
                .name("ndf-worker".into())
                .spawn(move || {
                    while let Some(job) = shared.mailbox.wait() {
                        shared.process(job);
                    }
                })?
        };
        let udp_reader = {
            let shared = Arc::clone(&shared);
            let socket = Arc::new(udp);
            thread::Builder::new()
                .name("ndf-udp".into())
                .spawn(move || udp_loop(&shared, socket))?
        };
        let ws_acceptor = {
            let shared = Arc::clone(&shared);
            let connections = Arc::clone(&connections);
            thread::Builder::new()
                .name("ndf-ws-accept".into())
                .spawn(move || accept_loop(&shared, listener, &connections))?
        };
        info!(
            "serving on udp {udp_addr} and websocket {ws_addr}, output in {}",
            session.path().display()
        );
        Ok(Server {
            shared,
            udp_addr,
            ws_addr,
            session: Some(session),
            readers: vec![udp_reader, ws_acceptor],
            connections,
            worker: Some(worker),
        })
    }

    pub fn udp_addr(&self) -> SocketAddr {
        self.udp_addr
    }

    pub fn ws_addr(&self) -> SocketAddr {
        self.ws_addr
    }

    /// Directory holding this session's WAV files; removed at shutdown.
    pub fn session_dir(&self) -> &Path {
        &self.shared.session_dir
    }

    pub fn latency(&self) -> LatencySummary {
        self.shared.latency.summary()
    }

    /// Stops accepting work, finishes the pending generation, closes client
    /// connections and deletes the session directory.
    pub fn shutdown(mut self) -> LatencySummary {
        self.stop();
        self.shared.latency.summary()
    }

    fn stop(&mut self) {
        let Some(worker) = self.worker.take() else {
            return;
        };
        self.shared.stop_readers.store(true, Ordering::SeqCst);
        for h in self.readers.drain(..) {
            let _ = h.join();
        }
        self.shared.mailbox.close();
        let _ = worker.join();
        self.shared.stop_connections.store(true, Ordering::SeqCst);
        let conns: Vec<_> = self.connections.lock().expect("connection list poisoned").drain(..).collect();
        for h in conns {
            let _ = h.join();
        }
        if let Some(dir) = self.session.take() {
            if let Err(e) = dir.close() {
                warn!("could not remove session directory: {e}");
            }
        }
        info!("latency: {}", self.shared.latency.summary());
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop();
    }
}

fn udp_loop(shared: &Shared, socket: Arc<UdpSocket>) {
    // Oversized datagrams must be seen in full to be rejected by length.
    let mut buf = vec![0u8; 65_536];
    while !shared.stop_readers.load(Ordering::SeqCst) {
        match socket.recv_from(&mut buf) {
            Ok((n, peer)) => {
                let target = ReplyTarget::Udp {
                    socket: Arc::clone(&socket),
                    peer,
                };
                shared.submit(&buf[..n], target);
            }
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(e) => warn!("udp receive failed: {e}"),
        }
    }
}

fn accept_loop(shared: &Arc<Shared>, listener: TcpListener, connections: &Mutex<Vec<JoinHandle<()>>>) {
    while !shared.stop_readers.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let shared = Arc::clone(shared);
                let spawned = thread::Builder::new()
                    .name(format!("ndf-ws-{peer}"))
                    .spawn(move || {
                        if let Err(e) = ws_connection(&shared, stream) {
                            debug!("websocket {peer} closed: {e}");
                        }
                    });
                match spawned {
                    Ok(h) => connections.lock().expect("connection list poisoned").push(h),
                    Err(e) => warn!("cannot start websocket handler: {e}"),
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => warn!("websocket accept failed: {e}"),
        }
    }
}

fn flush_replies(ws: &mut WebSocket<TcpStream>, rx: &Receiver<Reply>) -> tungstenite::Result<()> {
    while let Ok(reply) = rx.try_recv() {
        ws.send(Message::text(reply.to_json()))?;
    }
    Ok(())
}

fn ws_connection(shared: &Shared, stream: TcpStream) -> Result<(), Box<dyn std::error::Error>> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let mut ws = tungstenite::accept(stream).map_err(|e| e.to_string())?;
    ws.get_ref().set_read_timeout(Some(WS_POLL))?;
    let (tx, rx) = mpsc::channel();
    loop {
        flush_replies(&mut ws, &rx)?;
        if shared.stop_connections.load(Ordering::SeqCst) {
            let _ = ws.close(None);
            let _ = ws.flush();
            return Ok(());
        }
        match ws.read() {
            Ok(Message::Text(text)) => shared.submit(text.as_bytes(), ReplyTarget::Ws(tx.clone())),
            Ok(Message::Binary(bytes)) => shared.submit(&bytes, ReplyTarget::Ws(tx.clone())),
            Ok(Message::Close(_)) => {
                flush_replies(&mut ws, &rx)?;
                return Ok(());
            }
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed) => return Ok(()),
            Err(e) => return Err(e.into()),
        }
    }
}
