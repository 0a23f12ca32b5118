use std::collections::HashMap;
use std::io::{self, BufReader, BufWriter};
use std::net::{Ipv4Addr, Ipv6Addr, Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use log::{debug, info, warn};

use super::codec::{self, ErrorCode, InferenceRequest, InferenceResponse, Message, MessageKind};
use super::TrafficLedger;
use crate::model::ToyModel;
use crate::optimizer::{serve_inference, serve_stats, ApiError, PromptPayload, PromptShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServerConfig {
    /// Largest batch a single request may carry.
    pub max_batch: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { max_batch: 4096 }
    }
}

struct Shared {
    model: Arc<ToyModel>,
    config: ServerConfig,
    ledger: TrafficLedger,
    control: TrafficLedger,
    stopping: AtomicBool,
    connections: Mutex<HashMap<u64, TcpStream>>,
    next_conn: AtomicU64,
}

/// A running server. Dropping the handle stops it.
pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    acceptor: Option<JoinHandle<()>>,
}

/// Binds `addr` and serves `model` on background threads, one per connection.
pub fn serve(model: Arc<ToyModel>, addr: impl ToSocketAddrs, config: ServerConfig) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let shared = Arc::new(Shared {
        model,
        config,
        ledger: TrafficLedger::new(),
        control: TrafficLedger::new(),
        stopping: AtomicBool::new(false),
        connections: Mutex::new(HashMap::new()),
        next_conn: AtomicU64::new(0),
    });
    let acceptor = {
        let shared = Arc::clone(&shared);
        std::thread::Builder::new()
            .name("bbt-accept".into())
            .spawn(move || accept_loop(listener, shared))?
    };
    info!("serving on {addr}");
    Ok(ServerHandle {
        addr,
        shared,
        acceptor: Some(acceptor),
    })
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Inference traffic.
    pub fn ledger(&self) -> &TrafficLedger {
        &self.shared.ledger
    }

    /// Describe and stats traffic.
    pub fn control_ledger(&self) -> &TrafficLedger {
        &self.shared.control
    }

    /// Blocks until the server stops.
    pub fn wait(mut self) {
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }

    /// Stops accepting, drops every open connection and joins the acceptor.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        let Some(acceptor) = self.acceptor.take() else {
            return;
        };
        self.shared.stopping.store(true, Ordering::SeqCst);
        for (_, conn) in self.shared.connections.lock().expect("connection table").drain() {
            let _ = conn.shutdown(Shutdown::Both);
        }
        let mut wake = self.addr;
        if wake.ip().is_unspecified() {
            wake.set_ip(match wake {
                SocketAddr::V4(_) => Ipv4Addr::LOCALHOST.into(),
                SocketAddr::V6(_) => Ipv6Addr::LOCALHOST.into(),
            });
        }
        let _ = TcpStream::connect(wake);
        let _ = acceptor.join();
        info!("server on {} stopped", self.addr);
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    for stream in listener.incoming() {
        if shared.stopping.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                warn!("accept failed: {e}");
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        let id = shared.next_conn.fetch_add(1, Ordering::SeqCst);
        match stream.try_clone() {
            Ok(c) => {
                shared.connections.lock().expect("connection table").insert(id, c);
            }
            Err(e) => {
                warn!("dropping connection: {e}");
                continue;
            }
        }
        let shared = Arc::clone(&shared);
        let spawned = std::thread::Builder::new()
            .name(format!("bbt-conn-{id}"))
            .spawn(move || {
                if let Err(e) = handle_connection(stream, &shared) {
                    debug!("connection {id} closed: {e}");
                }
                shared.connections.lock().expect("connection table").remove(&id);
            });
        if let Err(e) = spawned {
            warn!("could not spawn connection thread: {e}");
        }
    }
}

fn handle_connection(stream: TcpStream, shared: &Shared) -> io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    loop {
        let body = match codec::read_frame(&mut reader) {
            Ok(Some(body)) => body,
            Ok(None) => return Ok(()),
            Err(e) if e.kind() == io::ErrorKind::InvalidData => {
                // The stream cannot be resynchronized after a bad length prefix.
                let reply = error_message(0, ErrorCode::Malformed, e.to_string());
                codec::write_frame(&mut writer, &codec::encode(&reply).expect("error reply encodes"))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let is_inference = codec::peek_header(&body).is_some_and(|(k, _)| k == MessageKind::InferRequest as u32);
        let reply = respond(shared, &body);
        let bytes = codec::encode(&reply)
            .or_else(|e| codec::encode(&error_message(reply.request_id(), ErrorCode::Rejected, e.to_string())))
            .expect("error reply encodes");
        let ledger = if is_inference { &shared.ledger } else { &shared.control };
        ledger.record(
            codec::FRAME_PREFIX_LEN + body.len(),
            codec::FRAME_PREFIX_LEN + bytes.len(),
        );
        codec::write_frame(&mut writer, &bytes)?;
    }
}

fn error_message(request_id: u64, code: ErrorCode, message: String) -> Message {
    Message::Error {
        request_id,
        code,
        message,
    }
}

fn respond(shared: &Shared, body: &[u8]) -> Message {
    let msg = match codec::decode(body) {
        Ok(m) => m,
        Err(e) => {
            let id = codec::peek_header(body).map_or(0, |(_, id)| id);
            return error_message(id, ErrorCode::Malformed, e.to_string());
        }
    };
    let id = msg.request_id();
    let rejected = |e: ApiError| error_message(id, ErrorCode::Rejected, e.to_string());
    let too_big = |n: usize| n > shared.config.max_batch;
    match msg {
        Message::InferRequest(req) if too_big(req.batch.len()) => rejected(oversized(req.batch.len(), shared)),
        Message::InferRequest(req) if !matches!(req.prompt, PromptPayload::None) && !fits(&req, shared) => {
            rejected(ApiError::Rejected(format!(
                "prompt rows are {} x {}, model expects {} x {}",
                req.prompt_rows,
                req.prompt_cols,
                shared.model.config().prompt_len,
                shared.model.config().hidden
            )))
        }
        Message::InferRequest(req) => match serve_inference(&shared.model, &req.prompt, &req.batch) {
            Ok(logits) => Message::InferResponse(InferenceResponse { request_id: id, logits }),
            Err(e) => rejected(e),
        },
        Message::StatsRequest { batch, .. } if too_big(batch.len()) => rejected(oversized(batch.len(), shared)),
        Message::StatsRequest { batch, .. } => match serve_stats(&shared.model, &batch) {
            Ok(stats) => Message::StatsResponse { request_id: id, stats },
            Err(e) => rejected(e),
        },
        Message::DescribeRequest { .. } => {
            let c = shared.model.config();
            Message::DescribeResponse {
                request_id: id,
                shape: PromptShape {
                    layers: c.layers,
                    prompt_len: c.prompt_len,
                    hidden: c.hidden,
                },
            }
        }
        other => error_message(
            id,
            ErrorCode::Unsupported,
            format!("{:?} is not a request", other.kind()),
        ),
    }
}

fn fits(req: &InferenceRequest, shared: &Shared) -> bool {
    let c = shared.model.config();
    (req.prompt_rows, req.prompt_cols) == (c.prompt_len, c.hidden)
}

fn oversized(n: usize, shared: &Shared) -> ApiError {
    ApiError::Rejected(format!(
        "batch of {n} exceeds the server limit of {}",
        shared.config.max_batch
    ))
}
