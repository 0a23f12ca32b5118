use std::io::{self, Read, Write};

use thiserror::Error;

use crate::model::Batch;
use crate::optimizer::{PromptPayload, PromptShape};
use crate::projection::LayerStats;

pub const MAGIC: [u8; 3] = *b"BBT";
pub const VERSION: u8 = 1;
/// Length prefix in front of every message.
pub const FRAME_PREFIX_LEN: usize = 4;
/// Magic, version, message kind and request id.
pub const MESSAGE_HEADER_LEN: usize = 16;
/// The seven `u32` fields that open an inference request body.
pub const INFER_HEADER_LEN: usize = 28;
/// Batch size and label count in front of the logits.
pub const RESPONSE_HEADER_LEN: usize = 8;
/// Frames longer than this are refused without being read.
pub const MAX_FRAME_LEN: usize = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum MessageKind {
    InferRequest = 1,
    InferResponse = 2,
    StatsRequest = 3,
    StatsResponse = 4,
    Error = 5,
    DescribeRequest = 6,
    DescribeResponse = 7,
}

impl MessageKind {
    fn from_u32(v: u32) -> Option<Self> {
        Some(match v {
            1 => Self::InferRequest,
            2 => Self::InferResponse,
            3 => Self::StatsRequest,
            4 => Self::StatsResponse,
            5 => Self::Error,
            6 => Self::DescribeRequest,
            7 => Self::DescribeResponse,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum PromptKind {
    None = 0,
    Input = 1,
    Deep = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum ErrorCode {
    /// The request decoded but the model refused it.
    Rejected = 1,
    /// The request could not be decoded.
    Malformed = 2,
    /// A well-formed message the server does not accept.
    Unsupported = 3,
}

impl ErrorCode {
    fn from_u32(v: u32) -> Option<Self> {
        Some(match v {
            1 => Self::Rejected,
            2 => Self::Malformed,
            3 => Self::Unsupported,
            _ => return None,
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("truncated message: needed {needed} more bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("bad magic {0:?}")]
    BadMagic([u8; 3]),
    #[error("protocol version {got}, expected {expected}")]
    VersionMismatch { expected: u8, got: u8 },
    #[error("unknown message kind {0}")]
    UnknownKind(u32),
    #[error("token id {0} does not fit in 16 bits")]
    TokenOutOfRange(u32),
    #[error("dimension overflow: {0}")]
    DimensionOverflow(String),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("{0} trailing bytes after message")]
    TrailingBytes(usize),
}

/// One inference call as it travels to the server.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceRequest {
    pub request_id: u64,
    pub batch: Batch,
    pub prompt: PromptPayload,
    /// Shape of each prompt matrix; `(0, 0)` without a prompt.
    pub prompt_rows: usize,
    pub prompt_cols: usize,
}

impl InferenceRequest {
    /// A request whose prompt matrices have the model's `n_p × H` shape.
    pub fn new(request_id: u64, batch: Batch, prompt: PromptPayload, shape: PromptShape) -> Self {
        let (prompt_rows, prompt_cols) = match prompt {
            PromptPayload::None => (0, 0),
            _ => (shape.prompt_len, shape.hidden),
        };
        Self {
            request_id,
            batch,
            prompt,
            prompt_rows,
            prompt_cols,
        }
    }

    pub fn payload_sizes(&self) -> PayloadSizes {
        let cells = self.batch.len() * self.batch.seq_len;
        PayloadSizes {
            input_ids: cells * 2,
            attention_mask: cells,
            mask_positions: self.batch.len() * 2,
            prompt: self.prompt.value_count() * 4,
        }
    }

    /// Bytes on the wire for this request, length prefix included.
    pub fn frame_len(&self) -> usize {
        FRAME_PREFIX_LEN + MESSAGE_HEADER_LEN + INFER_HEADER_LEN + self.payload_sizes().total()
    }
}

/// Byte counts of the variable-length sections of an inference request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PayloadSizes {
    pub input_ids: usize,
    pub attention_mask: usize,
    pub mask_positions: usize,
    pub prompt: usize,
}

impl PayloadSizes {
    pub fn total(&self) -> usize {
        self.input_ids + self.attention_mask + self.mask_positions + self.prompt
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResponse {
    pub request_id: u64,
    /// One row of label-word logits per example.
    pub logits: Vec<Vec<f32>>,
}

impl InferenceResponse {
    pub fn payload_len(&self) -> usize {
        self.logits.iter().map(Vec::len).sum::<usize>() * 4
    }

    pub fn frame_len(&self) -> usize {
        FRAME_PREFIX_LEN + MESSAGE_HEADER_LEN + RESPONSE_HEADER_LEN + self.payload_len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    InferRequest(InferenceRequest),
    InferResponse(InferenceResponse),
    StatsRequest {
        request_id: u64,
        batch: Batch,
    },
    StatsResponse {
        request_id: u64,
        stats: Vec<LayerStats>,
    },
    Error {
        request_id: u64,
        code: ErrorCode,
        message: String,
    },
    DescribeRequest {
        request_id: u64,
    },
    DescribeResponse {
        request_id: u64,
        shape: PromptShape,
    },
}

impl Message {
    pub fn request_id(&self) -> u64 {
        match self {
            Message::InferRequest(r) => r.request_id,
            Message::InferResponse(r) => r.request_id,
            Message::StatsRequest { request_id, .. }
            | Message::StatsResponse { request_id, .. }
            | Message::Error { request_id, .. }
            | Message::DescribeRequest { request_id }
            | Message::DescribeResponse { request_id, .. } => *request_id,
        }
    }

    pub fn kind(&self) -> MessageKind {
        match self {
            Message::InferRequest(_) => MessageKind::InferRequest,
            Message::InferResponse(_) => MessageKind::InferResponse,
            Message::StatsRequest { .. } => MessageKind::StatsRequest,
            Message::StatsResponse { .. } => MessageKind::StatsResponse,
            Message::Error { .. } => MessageKind::Error,
            Message::DescribeRequest { .. } => MessageKind::DescribeRequest,
            Message::DescribeResponse { .. } => MessageKind::DescribeResponse,
        }
    }
}

fn dim(v: usize, what: &str) -> Result<u32, CodecError> {
    u32::try_from(v).map_err(|_| CodecError::DimensionOverflow(format!("{what} = {v} exceeds u32")))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_batch_body(out: &mut Vec<u8>, batch: &Batch) -> Result<(), CodecError> {
    for &id in &batch.input_ids {
        let id16 = u16::try_from(id).map_err(|_| CodecError::TokenOutOfRange(id))?;
        out.extend_from_slice(&id16.to_le_bytes());
    }
    out.extend(batch.attention_mask.iter().map(|&m| m as u8));
    for &p in &batch.mask_positions {
        let p16 =
            u16::try_from(p).map_err(|_| CodecError::DimensionOverflow(format!("mask position {p} exceeds u16")))?;
        out.extend_from_slice(&p16.to_le_bytes());
    }
    Ok(())
}

fn check_batch(batch: &Batch) -> Result<(), CodecError> {
    let cells = batch.len().checked_mul(batch.seq_len);
    if cells != Some(batch.input_ids.len()) || batch.attention_mask.len() != batch.input_ids.len() {
        return Err(CodecError::Malformed(format!(
            "batch of {} x {} carries {} ids and {} mask bytes",
            batch.len(),
            batch.seq_len,
            batch.input_ids.len(),
            batch.attention_mask.len()
        )));
    }
    dim(batch.input_ids.len(), "batch * seqlen")?;
    Ok(())
}

fn encode_infer_request(out: &mut Vec<u8>, req: &InferenceRequest) -> Result<(), CodecError> {
    let batch = &req.batch;
    check_batch(batch)?;
    let (kind, layers): (PromptKind, &[Vec<f32>]) = match &req.prompt {
        PromptPayload::None => (PromptKind::None, &[]),
        PromptPayload::Input(v) => (PromptKind::Input, std::slice::from_ref(v)),
        PromptPayload::Deep(vs) => (PromptKind::Deep, vs.as_slice()),
    };
    let per_layer = req
        .prompt_rows
        .checked_mul(req.prompt_cols)
        .ok_or_else(|| CodecError::DimensionOverflow("prompt rows * cols".into()))?;
    if kind == PromptKind::None && (req.prompt_rows, req.prompt_cols) != (0, 0) {
        return Err(CodecError::Malformed("prompt shape given without a prompt".into()));
    }
    if let Some(v) = layers.iter().find(|v| v.len() != per_layer) {
        return Err(CodecError::Malformed(format!(
            "prompt layer has {} values, shape is {} x {}",
            v.len(),
            req.prompt_rows,
            req.prompt_cols
        )));
    }
    for v in [
        batch.len(),
        batch.seq_len,
        kind as usize,
        layers.len(),
        req.prompt_rows,
        req.prompt_cols,
        batch.num_labels,
    ] {
        put_u32(out, dim(v, "header field")?);
    }
    dim(layers.len() * per_layer, "prompt values")?;
    put_batch_body(out, batch)?;
    for v in layers.iter().flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Encodes a message body without the frame length prefix.
pub fn encode(msg: &Message) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::with_capacity(64);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    put_u32(&mut out, msg.kind() as u32);
    out.extend_from_slice(&msg.request_id().to_le_bytes());
    match msg {
        Message::InferRequest(req) => {
            out.reserve(INFER_HEADER_LEN + req.payload_sizes().total());
            encode_infer_request(&mut out, req)?;
        }
        Message::InferResponse(resp) => {
            let classes = resp.logits.first().map_or(0, Vec::len);
            if resp.logits.iter().any(|row| row.len() != classes) || (classes == 0 && !resp.logits.is_empty()) {
                return Err(CodecError::Malformed("ragged or empty logit rows".into()));
            }
            put_u32(&mut out, dim(resp.logits.len(), "batch")?);
            put_u32(&mut out, dim(classes, "labels")?);
            for v in resp.logits.iter().flatten() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Message::StatsRequest { batch, .. } => {
            check_batch(batch)?;
            for v in [batch.len(), batch.seq_len, batch.num_labels] {
                put_u32(&mut out, dim(v, "header field")?);
            }
            put_batch_body(&mut out, batch)?;
        }
        Message::StatsResponse { stats, .. } => {
            put_u32(&mut out, dim(stats.len(), "stats count")?);
            for s in stats {
                put_u32(&mut out, dim(s.layer, "layer")?);
                put_u32(&mut out, s.clip_rounds);
                out.extend_from_slice(&s.mu_hat.to_le_bytes());
                out.extend_from_slice(&s.sigma_hat.to_le_bytes());
            }
        }
        Message::Error { code, message, .. } => {
            put_u32(&mut out, *code as u32);
            put_u32(&mut out, dim(message.len(), "message length")?);
            out.extend_from_slice(message.as_bytes());
        }
        Message::DescribeRequest { .. } => {}
        Message::DescribeResponse { shape, .. } => {
            for v in [shape.layers, shape.prompt_len, shape.hidden] {
                put_u32(&mut out, dim(v, "shape field")?);
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(CodecError::Truncated { needed: n, available });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    /// Takes `count` items of `width` bytes, refusing before allocating if the
    /// buffer is too short.
    fn take_items(&mut self, count: usize, width: usize) -> Result<&'a [u8], CodecError> {
        let n = count
            .checked_mul(width)
            .ok_or_else(|| CodecError::DimensionOverflow(format!("{count} items of {width} bytes")))?;
        self.take(n)
    }

    fn ensure_items(&self, count: usize, width: usize) -> Result<(), CodecError> {
        let available = self.buf.len() - self.pos;
        match count.checked_mul(width) {
            Some(n) if n <= available => Ok(()),
            Some(n) => Err(CodecError::Truncated { needed: n, available }),
            None => Err(CodecError::DimensionOverflow(format!("{count} items of {width} bytes"))),
        }
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize, CodecError> {
        Ok(self.u32()? as usize)
    }

    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>, CodecError> {
        Ok(self
            .take_items(count, 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<(), CodecError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(CodecError::TrailingBytes(n)),
        }
    }
}

fn read_batch_body(r: &mut Reader, n: usize, seq_len: usize, num_labels: usize) -> Result<Batch, CodecError> {
    let cells = n
        .checked_mul(seq_len)
        .ok_or_else(|| CodecError::DimensionOverflow("batch * seqlen".into()))?;
    let input_ids = r
        .take_items(cells, 2)?
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
        .collect();
    let attention_mask = r
        .take(cells)?
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(CodecError::Malformed(format!("attention mask byte {b}"))),
        })
        .collect::<Result<_, _>>()?;
    let mask_positions = r
        .take_items(n, 2)?
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
        .collect();
    Ok(Batch {
        seq_len,
        input_ids,
        attention_mask,
        mask_positions,
        num_labels,
    })
}

fn decode_infer_request(r: &mut Reader, request_id: u64) -> Result<InferenceRequest, CodecError> {
    let n = r.usize()?;
    let seq_len = r.usize()?;
    let kind = r.u32()?;
    let layers = r.usize()?;
    let rows = r.usize()?;
    let cols = r.usize()?;
    let num_labels = r.usize()?;
    let batch = read_batch_body(r, n, seq_len, num_labels)?;
    let per_layer = rows
        .checked_mul(cols)
        .ok_or_else(|| CodecError::DimensionOverflow("prompt rows * cols".into()))?;
    let prompt = match (kind, layers) {
        (k, 0) if k == PromptKind::None as u32 && per_layer == 0 => PromptPayload::None,
        (k, 1) if k == PromptKind::Input as u32 => PromptPayload::Input(r.f32s(per_layer)?),
        (k, _) if k == PromptKind::Deep as u32 => {
            let mut vs = Vec::with_capacity(layers.min(r.buf.len()));
            for _ in 0..layers {
                vs.push(r.f32s(per_layer)?);
            }
            PromptPayload::Deep(vs)
        }
        _ => {
            return Err(CodecError::Malformed(format!(
                "prompt kind {kind} with {layers} layers of {rows} x {cols}"
            )))
        }
    };
    Ok(InferenceRequest {
        request_id,
        batch,
        prompt,
        prompt_rows: rows,
        prompt_cols: cols,
    })
}

/// Decodes a message body without the frame length prefix.
pub fn decode(buf: &[u8]) -> Result<Message, CodecError> {
    let mut r = Reader { buf, pos: 0 };
    let head = r.take(4)?;
    if head[..3] != MAGIC {
        return Err(CodecError::BadMagic([head[0], head[1], head[2]]));
    }
    if head[3] != VERSION {
        return Err(CodecError::VersionMismatch {
            expected: VERSION,
            got: head[3],
        });
    }
    let raw_kind = r.u32()?;
    let kind = MessageKind::from_u32(raw_kind).ok_or(CodecError::UnknownKind(raw_kind))?;
    let request_id = r.u64()?;
    let msg = match kind {
        MessageKind::InferRequest => Message::InferRequest(decode_infer_request(&mut r, request_id)?),
        MessageKind::InferResponse => {
            let n = r.usize()?;
            let classes = r.usize()?;
            let total = n
                .checked_mul(classes)
                .ok_or_else(|| CodecError::DimensionOverflow("batch * labels".into()))?;
            let flat = r.f32s(total)?;
            if classes == 0 && n > 0 {
                return Err(CodecError::Malformed("response rows without labels".into()));
            }
            let logits = flat.chunks_exact(classes.max(1)).map(<[f32]>::to_vec).collect();
            Message::InferResponse(InferenceResponse { request_id, logits })
        }
        MessageKind::StatsRequest => {
            let n = r.usize()?;
            let seq_len = r.usize()?;
            let num_labels = r.usize()?;
            let batch = read_batch_body(&mut r, n, seq_len, num_labels)?;
            Message::StatsRequest { request_id, batch }
        }
        MessageKind::StatsResponse => {
            let count = r.usize()?;
            r.ensure_items(count, 24)?;
            let mut stats = Vec::with_capacity(count);
            for _ in 0..count {
                let layer = r.usize()?;
                let clip_rounds = r.u32()?;
                let mu_hat = r.f64()?;
                let sigma_hat = r.f64()?;
                stats.push(LayerStats {
                    layer,
                    mu_hat,
                    sigma_hat,
                    clip_rounds,
                });
            }
            Message::StatsResponse { request_id, stats }
        }
        MessageKind::Error => {
            let raw = r.u32()?;
            let code = ErrorCode::from_u32(raw).ok_or_else(|| CodecError::Malformed(format!("error code {raw}")))?;
            let len = r.usize()?;
            let message = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| CodecError::Malformed("error text is not utf-8".into()))?;
            Message::Error {
                request_id,
                code,
                message,
            }
        }
        MessageKind::DescribeRequest => Message::DescribeRequest { request_id },
        MessageKind::DescribeResponse => Message::DescribeResponse {
            request_id,
            shape: PromptShape {
                layers: r.usize()?,
                prompt_len: r.usize()?,
                hidden: r.usize()?,
            },
        },
    };
    r.finish()?;
    Ok(msg)
}

/// Reads the kind and request id of a message whose body may not decode.
pub fn peek_header(buf: &[u8]) -> Option<(u32, u64)> {
    if buf.len() < MESSAGE_HEADER_LEN || buf[..3] != MAGIC {
        return None;
    }
    let kind = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    let id = u64::from_le_bytes(buf[8..16].try_into().unwrap());
    Some((kind, id))
}

pub fn encode_request(req: &InferenceRequest) -> Result<Vec<u8>, CodecError> {
    encode(&Message::InferRequest(req.clone()))
}

pub fn decode_request(buf: &[u8]) -> Result<InferenceRequest, CodecError> {
    match decode(buf)? {
        Message::InferRequest(r) => Ok(r),
        other => Err(CodecError::Malformed(format!(
            "expected an inference request, got {:?}",
            other.kind()
        ))),
    }
}

pub fn encode_response(resp: &InferenceResponse) -> Result<Vec<u8>, CodecError> {
    encode(&Message::InferResponse(resp.clone()))
}

pub fn decode_response(buf: &[u8]) -> Result<InferenceResponse, CodecError> {
    match decode(buf)? {
        Message::InferResponse(r) => Ok(r),
        other => Err(CodecError::Malformed(format!(
            "expected an inference response, got {:?}",
            other.kind()
        ))),
    }
}

/// Writes one length-prefixed frame and returns the bytes written.
pub fn write_frame<W: Write>(w: &mut W, body: &[u8]) -> io::Result<usize> {
    let len = u32::try_from(body.len())
        .ok()
        .filter(|&l| l as usize <= MAX_FRAME_LEN)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "frame too long"))?;
    let mut buf = Vec::with_capacity(FRAME_PREFIX_LEN + body.len());
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(body);
    w.write_all(&buf)?;
    w.flush()?;
    Ok(buf.len())
}

/// Reads one frame body; `None` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut prefix = [0u8; FRAME_PREFIX_LEN];
    let mut got = 0;
    while got < FRAME_PREFIX_LEN {
        match r.read(&mut prefix[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = u32::from_le_bytes(prefix) as usize;
    if len > MAX_FRAME_LEN {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame of {len} bytes exceeds limit"),
        ));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize, seq_len: usize) -> Batch {
        Batch {
            seq_len,
            input_ids: (0..n * seq_len).map(|i| (i * 7 % 300) as u32).collect(),
            attention_mask: (0..n * seq_len).map(|i| i % seq_len < seq_len - 1).collect(),
            mask_positions: (0..n).map(|i| i % (seq_len - 1)).collect(),
            num_labels: 2,
        }
    }

    fn shape(prompt_len: usize, hidden: usize) -> PromptShape {
        PromptShape {
            layers: 1,
            prompt_len,
            hidden,
        }
    }

    #[test]
    fn request_sections_have_closed_form_sizes() {
        let req = InferenceRequest::new(9, batch(32, 47), PromptPayload::Input(vec![0.5; 500]), shape(1, 500));
        let s = req.payload_sizes();
        assert_eq!(
            (s.input_ids, s.attention_mask, s.mask_positions, s.prompt),
            (3008, 1504, 64, 2000)
        );
        let bytes = encode_request(&req).unwrap();
        assert_eq!(bytes.len() + FRAME_PREFIX_LEN, req.frame_len());
        assert_eq!(bytes.len(), MESSAGE_HEADER_LEN + INFER_HEADER_LEN + s.total());
    }

    #[test]
    fn deep_prompt_section() {
        let req = InferenceRequest::new(
            1,
            batch(2, 3),
            PromptPayload::Deep(vec![vec![1.0; 500]; 24]),
            shape(20, 25),
        );
        assert_eq!(req.payload_sizes().prompt, 48_000);
        assert_eq!(decode_request(&encode_request(&req).unwrap()).unwrap(), req);
    }

    #[test]
    fn response_payload_and_round_trip() {
        let resp = InferenceResponse {
            request_id: u64::MAX,
            logits: (0..32).map(|i| vec![i as f32, -(i as f32) * 0.25]).collect(),
        };
        assert_eq!(resp.payload_len(), 256);
        let bytes = encode_response(&resp).unwrap();
        assert_eq!(bytes.len(), MESSAGE_HEADER_LEN + RESPONSE_HEADER_LEN + 256);
        assert_eq!(decode_response(&bytes).unwrap(), resp);
    }

    #[test]
    fn golden_request_bytes() {
        let req = InferenceRequest {
            request_id: 0x0102_0304_0506_0708,
            batch: Batch {
                seq_len: 2,
                input_ids: vec![0x0102, 1],
                attention_mask: vec![true, true],
                mask_positions: vec![1],
                num_labels: 2,
            },
            prompt: PromptPayload::Input(vec![1.0, -2.0]),
            prompt_rows: 1,
            prompt_cols: 2,
        };
        #[rustfmt::skip]
        let expected: Vec<u8> = vec![
            b'B', b'B', b'T', 1,
            1, 0, 0, 0,
            8, 7, 6, 5, 4, 3, 2, 1,
            1, 0, 0, 0,  2, 0, 0, 0,  1, 0, 0, 0,  1, 0, 0, 0,
            1, 0, 0, 0,  2, 0, 0, 0,  2, 0, 0, 0,
            0x02, 0x01,  0x01, 0x00,
            1, 1,
            1, 0,
            0x00, 0x00, 0x80, 0x3f,  0x00, 0x00, 0x00, 0xc0,
        ];
        assert_eq!(encode_request(&req).unwrap(), expected);
        assert_eq!(decode_request(&expected).unwrap(), req);
    }

    #[test]
    fn golden_response_and_error_bytes() {
        let resp = InferenceResponse {
            request_id: 5,
            logits: vec![vec![0.5]],
        };
        #[rustfmt::skip]
        let expected: Vec<u8> = vec![
            b'B', b'B', b'T', 1,  2, 0, 0, 0,  5, 0, 0, 0, 0, 0, 0, 0,
            1, 0, 0, 0,  1, 0, 0, 0,
            0x00, 0x00, 0x00, 0x3f,
        ];
        assert_eq!(encode_response(&resp).unwrap(), expected);

        let err = Message::Error {
            request_id: 0,
            code: ErrorCode::Malformed,
            message: "no".into(),
        };
        #[rustfmt::skip]
        let expected: Vec<u8> = vec![
            b'B', b'B', b'T', 1,  5, 0, 0, 0,  0, 0, 0, 0, 0, 0, 0, 0,
            2, 0, 0, 0,  2, 0, 0, 0,  b'n', b'o',
        ];
        assert_eq!(encode(&err).unwrap(), expected);
        assert_eq!(decode(&expected).unwrap(), err);
    }

    #[test]
    fn control_messages_round_trip() {
        let msgs = [
            Message::StatsRequest {
                request_id: 3,
                batch: batch(4, 5),
            },
            Message::StatsResponse {
                request_id: 3,
                stats: vec![
                    LayerStats {
                        layer: 0,
                        mu_hat: -0.01,
                        sigma_hat: 0.2,
                        clip_rounds: 5,
                    },
                    LayerStats {
                        layer: 1,
                        mu_hat: 1e-300,
                        sigma_hat: f64::MAX,
                        clip_rounds: 5,
                    },
                ],
            },
            Message::DescribeRequest { request_id: 11 },
            Message::DescribeResponse {
                request_id: 11,
                shape: PromptShape {
                    layers: 4,
                    prompt_len: 10,
                    hidden: 64,
                },
            },
            Message::InferRequest(InferenceRequest::new(
                2,
                batch(3, 4),
                PromptPayload::None,
                shape(10, 64),
            )),
        ];
        for m in msgs {
            assert_eq!(decode(&encode(&m).unwrap()).unwrap(), m);
        }
    }

    #[test]
    fn distinct_decode_errors() {
        let req = InferenceRequest::new(1, batch(2, 3), PromptPayload::Input(vec![0.0; 6]), shape(2, 3));
        let good = encode_request(&req).unwrap();

        let short = &good[..good.len() - 1];
        assert!(matches!(decode(short), Err(CodecError::Truncated { .. })));

        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(decode(&bad), Err(CodecError::BadMagic(*b"XBT")));

        let mut bad = good.clone();
        bad[3] = 9;
        assert_eq!(decode(&bad), Err(CodecError::VersionMismatch { expected: 1, got: 9 }));

        let mut bad = good.clone();
        bad[4] = 99;
        assert_eq!(decode(&bad), Err(CodecError::UnknownKind(99)));

        let mut long = good.clone();
        long.push(0);
        assert_eq!(decode(&long), Err(CodecError::TrailingBytes(1)));
    }

    #[test]
    fn every_prefix_of_a_message_is_rejected_cleanly() {
        let req = InferenceRequest::new(1, batch(2, 3), PromptPayload::Deep(vec![vec![0.25; 6]; 3]), shape(2, 3));
        let good = encode_request(&req).unwrap();
        for cut in 0..good.len() {
            assert!(
                matches!(decode(&good[..cut]), Err(CodecError::Truncated { .. })),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn huge_declared_sizes_do_not_allocate() {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"BBT\x01");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&0u64.to_le_bytes());
        for v in [u32::MAX, u32::MAX, 0, 0, 0, 0, 2] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        assert!(decode(&buf).is_err());
    }

    #[test]
    fn encode_rejects_wide_tokens_and_bad_shapes() {
        let mut b = batch(1, 3);
        b.input_ids[0] = 70_000;
        let req = InferenceRequest::new(1, b, PromptPayload::None, shape(1, 1));
        assert_eq!(encode_request(&req), Err(CodecError::TokenOutOfRange(70_000)));

        let req = InferenceRequest::new(1, batch(1, 3), PromptPayload::Input(vec![0.0; 5]), shape(2, 3));
        assert!(matches!(encode_request(&req), Err(CodecError::Malformed(_))));
    }

    #[test]
    fn frames_round_trip_through_a_stream() {
        let mut wire = Vec::new();
        assert_eq!(write_frame(&mut wire, b"abc").unwrap(), 7);
        write_frame(&mut wire, b"").unwrap();
        let mut r = wire.as_slice();
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"abc");
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"");
        assert!(read_frame(&mut r).unwrap().is_none());

        let mut r: &[u8] = &[1, 0];
        assert_eq!(read_frame(&mut r).unwrap_err().kind(), io::ErrorKind::UnexpectedEof);
        let huge = (MAX_FRAME_LEN as u32 + 1).to_le_bytes();
        assert_eq!(
            read_frame(&mut &huge[..]).unwrap_err().kind(),
            io::ErrorKind::InvalidData
        );
    }
}
