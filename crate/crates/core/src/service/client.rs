use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use super::codec::{self, InferenceRequest, Message};
use super::TrafficLedger;
use crate::model::Batch;
use crate::optimizer::{ApiError, EvalApi, PromptPayload, PromptShape};
use crate::projection::LayerStats;

struct Connection {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

/// An [`EvalApi`] whose calls travel to a server over TCP.
///
/// Connections are pooled, so concurrent evaluations each get their own
/// stream. Any I/O failure drops the connection and surfaces as a retryable
/// [`ApiError::Transport`].
pub struct RemoteEvalApi {
    addr: SocketAddr,
    timeout: Option<Duration>,
    pool: Mutex<Vec<Connection>>,
    next_id: AtomicU64,
    calls: AtomicU64,
    shape: OnceLock<PromptShape>,
    ledger: TrafficLedger,
    control: TrafficLedger,
}

fn transport(e: impl std::fmt::Display) -> ApiError {
    ApiError::Transport(e.to_string())
}

impl RemoteEvalApi {
    /// Connects and asks the server for its prompt shape.
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, ApiError> {
        Self::with_timeout(addr, Some(Duration::from_secs(60)))
    }

    /// Like [`connect`](Self::connect), with a per-read/write timeout.
    pub fn with_timeout(addr: impl ToSocketAddrs, timeout: Option<Duration>) -> Result<Self, ApiError> {
        let addr = addr
            .to_socket_addrs()
            .map_err(transport)?
            .next()
            .ok_or_else(|| transport("address resolved to nothing"))?;
        let api = Self {
            addr,
            timeout,
            pool: Mutex::new(Vec::new()),
            next_id: AtomicU64::new(1),
            calls: AtomicU64::new(0),
            shape: OnceLock::new(),
            ledger: TrafficLedger::new(),
            control: TrafficLedger::new(),
        };
        api.shape()?;
        Ok(api)
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Inference traffic sent and received by this client.
    pub fn ledger(&self) -> &TrafficLedger {
        &self.ledger
    }

    /// Describe and stats traffic.
    pub fn control_ledger(&self) -> &TrafficLedger {
        &self.control
    }

    fn open(&self) -> Result<Connection, ApiError> {
        let stream = TcpStream::connect(self.addr).map_err(transport)?;
        stream.set_nodelay(true).map_err(transport)?;
        stream.set_read_timeout(self.timeout).map_err(transport)?;
        stream.set_write_timeout(self.timeout).map_err(transport)?;
        Ok(Connection {
            reader: BufReader::new(stream.try_clone().map_err(transport)?),
            writer: BufWriter::new(stream),
        })
    }

    fn exchange(&self, msg: Message, ledger: &TrafficLedger) -> Result<Message, ApiError> {
        let body = codec::encode(&msg).map_err(|e| ApiError::Rejected(e.to_string()))?;
        let pooled = self.pool.lock().expect("connection pool").pop();
        let mut conn = match pooled {
            Some(c) => c,
            None => self.open()?,
        };
        let sent = codec::write_frame(&mut conn.writer, &body).map_err(transport)?;
        let reply = codec::read_frame(&mut conn.reader)
            .map_err(transport)?
            .ok_or_else(|| transport("server closed the connection"))?;
        ledger.record(sent, codec::FRAME_PREFIX_LEN + reply.len());
        let reply = codec::decode(&reply).map_err(transport)?;
        if reply.request_id() != msg.request_id() {
            return Err(transport(format!(
                "response id {} does not match request {}",
                reply.request_id(),
                msg.request_id()
            )));
        }
        self.pool.lock().expect("connection pool").push(conn);
        match reply {
            Message::Error { code, message, .. } => Err(ApiError::Rejected(format!("{code:?}: {message}"))),
            other => Ok(other),
        }
    }

    fn next_id(&self) -> u64 {
        self.next_id.fetch_add(1, Ordering::SeqCst)
    }
}

fn unexpected(m: &Message) -> ApiError {
    transport(format!("unexpected {:?} reply", m.kind()))
}

impl EvalApi for RemoteEvalApi {
    fn evaluate(&self, prompt: &PromptPayload, batch: &Batch) -> Result<Vec<Vec<f32>>, ApiError> {
        let req = InferenceRequest::new(self.next_id(), batch.clone(), prompt.clone(), self.shape()?);
        let logits = match self.exchange(Message::InferRequest(req), &self.ledger)? {
            Message::InferResponse(r) => r.logits,
            other => return Err(unexpected(&other)),
        };
        if logits.len() != batch.len() || logits.iter().any(|row| row.len() != batch.num_labels) {
            return Err(transport(format!(
                "response has {} rows for a batch of {} with {} labels",
                logits.len(),
                batch.len(),
                batch.num_labels
            )));
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(logits)
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn shape(&self) -> Result<PromptShape, ApiError> {
        if let Some(&s) = self.shape.get() {
            return Ok(s);
        }
        let msg = Message::DescribeRequest {
            request_id: self.next_id(),
        };
        match self.exchange(msg, &self.control)? {
            Message::DescribeResponse { shape, .. } => Ok(*self.shape.get_or_init(|| shape)),
            other => Err(unexpected(&other)),
        }
    }

    fn layer_stats(&self, batch: &Batch) -> Result<Vec<LayerStats>, ApiError> {
        let msg = Message::StatsRequest {
            request_id: self.next_id(),
            batch: batch.clone(),
        };
        match self.exchange(msg, &self.control)? {
            Message::StatsResponse { stats, .. } => Ok(stats),
            other => Err(unexpected(&other)),
        }
    }
}
