//! Length-prefixed binary protocol shared by the model server and the
//! monitor. Everything is little-endian.
//!
//! ```text
//! frame   = length:u32  payload[length]
//! payload = msg_type:u8 correlation_id:u64 body
//! ```
//!
//! Strings are `u16 length + UTF-8`. Tensors are `ndim:u8, dims:u32*ndim,
//! dtype:u8 (0 = f32, 1 = u8), raw data`.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use thiserror::Error;

use crate::executors::Prediction;
use crate::matching::FeatureVector;
use crate::monitor::{ClusterSnapshot, WorkerStatus};
use crate::tensor::{DType, Tensor, TensorData};

pub const DEFAULT_MAX_FRAME_MB: u32 = 64;
pub const MAX_FRAME_ENV: &str = "V2R_MAX_FRAME_MB";
/// msg_type + correlation_id
pub const PAYLOAD_HEADER_LEN: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    InferRequest = 1,
    InferResponse = 2,
    StatusQuery = 3,
    StatusSnapshot = 4,
    Error = 5,
    StatusPublish = 6,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => MsgType::InferRequest,
            2 => MsgType::InferResponse,
            3 => MsgType::StatusQuery,
            4 => MsgType::StatusSnapshot,
            5 => MsgType::Error,
            6 => MsgType::StatusPublish,
            _ => return None,
        })
    }
}

/// Error codes carried in `Error` frames.
pub mod codes {
    pub const MALFORMED_FRAME: u16 = 1;
    pub const UNKNOWN_MSG_TYPE: u16 = 2;
    pub const MALFORMED_BODY: u16 = 3;
    pub const UNKNOWN_MODEL: u16 = 4;
    pub const EXECUTOR_FAILURE: u16 = 5;
    pub const FRAME_TOO_LARGE: u16 = 6;
    pub const MALFORMED_STATUS: u16 = 7;
    pub const UNEXPECTED_MESSAGE: u16 = 8;
    pub const SHUTTING_DOWN: u16 = 9;
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("malformed body at offset {offset}: {reason}")]
pub struct MalformedBody {
    pub offset: usize,
    pub reason: String,
}

/// Frame size limit from `V2R_MAX_FRAME_MB`, defaulting to 64 MiB.
pub fn max_frame_bytes_from_env() -> u32 {
    let mb = std::env::var(MAX_FRAME_ENV)
        .ok()
        .and_then(|v| v.parse::<u32>().ok())
        .filter(|&mb| (1..=4095).contains(&mb))
        .unwrap_or(DEFAULT_MAX_FRAME_MB);
    mb * 1024 * 1024
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: u8,
    pub correlation_id: u64,
    pub body: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MsgType, correlation_id: u64, body: Vec<u8>) -> Self {
        Self {
            msg_type: msg_type as u8,
            correlation_id,
            body,
        }
    }

    /// Serialised frame including the length prefix.
    pub fn to_bytes(&self) -> Vec<u8> {
        let len = (PAYLOAD_HEADER_LEN + self.body.len()) as u32;
        let mut out = Vec::with_capacity(4 + len as usize);
        out.extend_from_slice(&len.to_le_bytes());
        out.push(self.msg_type);
        out.extend_from_slice(&self.correlation_id.to_le_bytes());
        out.extend_from_slice(&self.body);
        out
    }
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> io::Result<()> {
    w.write_all(&frame.to_bytes())
}

/// What [`read_frame`] found on the stream.
#[derive(Debug, PartialEq, Eq)]
pub enum ReadOutcome {
    Frame(Frame),
    /// The declared length exceeded the limit. The payload was consumed and
    /// discarded; the header fields are reported when they were present.
    TooLarge {
        length: u32,
        correlation_id: u64,
    },
    /// Declared length too small to hold msg_type and correlation_id.
    TooShort {
        length: u32,
    },
    /// Clean end of stream before a new frame started.
    Eof,
}

/// Reads one frame, keeping the stream aligned on frame boundaries even
/// when the frame is rejected.
pub fn read_frame(r: &mut impl Read, max_len: u32) -> io::Result<ReadOutcome> {
    let mut len_buf = [0u8; 4];
    match r.read(&mut len_buf[..1])? {
        0 => return Ok(ReadOutcome::Eof),
        _ => r.read_exact(&mut len_buf[1..])?,
    }
    let length = u32::from_le_bytes(len_buf);
    if (length as usize) < PAYLOAD_HEADER_LEN {
        discard(r, length as u64)?;
        return Ok(ReadOutcome::TooShort { length });
    }
    if length > max_len {
        let mut head = [0u8; PAYLOAD_HEADER_LEN];
        r.read_exact(&mut head)?;
        discard(r, length as u64 - PAYLOAD_HEADER_LEN as u64)?;
        return Ok(ReadOutcome::TooLarge {
            length,
            correlation_id: u64::from_le_bytes(head[1..9].try_into().unwrap()),
        });
    }
    let mut payload = vec![0u8; length as usize];
    r.read_exact(&mut payload)?;
    Ok(ReadOutcome::Frame(Frame {
        msg_type: payload[0],
        correlation_id: u64::from_le_bytes(payload[1..9].try_into().unwrap()),
        body: payload.split_off(PAYLOAD_HEADER_LEN),
    }))
}

fn discard(r: &mut impl Read, n: u64) -> io::Result<()> {
    let copied = io::copy(&mut r.take(n), &mut io::sink())?;
    if copied < n {
        return Err(io::Error::new(
            io::ErrorKind::UnexpectedEof,
            "frame cut short",
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Body encoding
// ---------------------------------------------------------------------------

#[derive(Debug, Default)]
pub struct BodyWriter {
    buf: Vec<u8>,
}

impl BodyWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f32(&mut self, v: f32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    /// Strings longer than `u16::MAX` bytes are cut at a char boundary.
    pub fn str(&mut self, s: &str) -> &mut Self {
        let mut end = s.len().min(u16::MAX as usize);
        while !s.is_char_boundary(end) {
            end -= 1;
        }
        self.u16(end as u16);
        self.buf.extend_from_slice(&s.as_bytes()[..end]);
        self
    }

    pub fn tensor(&mut self, t: &Tensor) -> &mut Self {
        self.u8(t.dims.len() as u8);
        for &d in &t.dims {
            self.u32(d);
        }
        self.u8(t.dtype().code());
        match &t.data {
            TensorData::F32(v) => {
                self.buf.reserve(v.len() * 4);
                for x in v {
                    self.buf.extend_from_slice(&x.to_le_bytes());
                }
            }
            TensorData::U8(v) => self.buf.extend_from_slice(v),
        }
        self
    }
}

#[derive(Debug)]
pub struct BodyReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> BodyReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    fn fail<T>(&self, offset: usize, reason: impl Into<String>) -> Result<T, MalformedBody> {
        Err(MalformedBody {
            offset,
            reason: reason.into(),
        })
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], MalformedBody> {
        if self.buf.len() - self.pos < n {
            return self.fail(
                self.buf.len(),
                format!("need {n} bytes at offset {}, body ends", self.pos),
            );
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, MalformedBody> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, MalformedBody> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, MalformedBody> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, MalformedBody> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32, MalformedBody> {
        Ok(f32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub fn str(&mut self) -> Result<String, MalformedBody> {
        let start = self.pos;
        let len = self.u16()? as usize;
        let raw = self.bytes(len)?;
        match std::str::from_utf8(raw) {
            Ok(s) => Ok(s.to_string()),
            Err(e) => self.fail(start, format!("invalid UTF-8: {e}")),
        }
    }

    pub fn tensor(&mut self) -> Result<Tensor, MalformedBody> {
        let start = self.pos;
        let ndim = self.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        let mut count: u64 = 1;
        for _ in 0..ndim {
            let d = self.u32()?;
            count = count.saturating_mul(d as u64);
            dims.push(d);
        }
        let dtype_at = self.pos;
        let dtype = match DType::from_code(self.u8()?) {
            Some(d) => d,
            None => return self.fail(dtype_at, "unknown dtype"),
        };
        let width = match dtype {
            DType::F32 => 4,
            DType::U8 => 1,
        };
        let remaining = (self.buf.len() - self.pos) as u64;
        if count.saturating_mul(width) > remaining {
            return self.fail(
                self.buf.len(),
                format!("tensor at offset {start} needs {count} elements, body ends"),
            );
        }
        let raw = self.bytes((count * width) as usize)?;
        let data = match dtype {
            DType::F32 => TensorData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(raw.to_vec()),
        };
        Ok(Tensor { dims, data })
    }

    pub fn finish(self) -> Result<(), MalformedBody> {
        if self.pos != self.buf.len() {
            return self.fail(
                self.pos,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            );
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Messages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct WireRequest {
    pub request_id: u64,
    pub tensor: Tensor,
}

/// One client-formed batch for a single model.
#[derive(Debug, Clone, PartialEq)]
pub struct InferRequestMsg {
    pub model_id: String,
    pub requests: Vec<WireRequest>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutput {
    pub request_id: u64,
    pub predictions: Vec<Prediction>,
    /// Feature id equals `request_id`.
    pub feature: Option<FeatureVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferResponseMsg {
    pub outputs: Vec<InferenceOutput>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorMsg {
    pub code: u16,
    pub message: String,
    /// Request ids the error applies to, empty for connection-level errors.
    pub request_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    InferRequest(InferRequestMsg),
    InferResponse(InferResponseMsg),
    StatusQuery { ttl_ms: u32 },
    StatusSnapshot(ClusterSnapshot),
    Error(ErrorMsg),
    StatusPublish(WorkerStatus),
}

pub fn encode_infer_request(msg: &InferRequestMsg) -> Vec<u8> {
    let mut w = BodyWriter::new();
    w.str(&msg.model_id).u32(msg.requests.len() as u32);
    for r in &msg.requests {
        w.u64(r.request_id).tensor(&r.tensor);
    }
    w.into_bytes()
}

pub fn decode_infer_request(body: &[u8]) -> Result<InferRequestMsg, MalformedBody> {
    let mut r = BodyReader::new(body);
    let model_id = r.str()?;
    let count = r.u32()?;
    let mut requests = Vec::with_capacity((count as usize).min(4096));
    for _ in 0..count {
        let request_id = r.u64()?;
        let tensor = r.tensor()?;
        requests.push(WireRequest { request_id, tensor });
    }
    r.finish()?;
    Ok(InferRequestMsg { model_id, requests })
}

pub fn encode_infer_response(msg: &InferResponseMsg) -> Vec<u8> {
    let mut w = BodyWriter::new();
    w.u32(msg.outputs.len() as u32);
    for o in &msg.outputs {
        w.u64(o.request_id).u16(o.predictions.len() as u16);
        for p in &o.predictions {
            w.str(&p.label).f32(p.score);
        }
        match &o.feature {
            Some(f) => {
                let t = Tensor {
                    dims: vec![f.dim()],
                    data: TensorData::F32(f.values.clone()),
                };
                w.u8(1).tensor(&t);
            }
            None => {
                w.u8(0);
            }
        }
    }
    w.into_bytes()
}

pub fn decode_infer_response(body: &[u8]) -> Result<InferResponseMsg, MalformedBody> {
    let mut r = BodyReader::new(body);
    let count = r.u32()?;
    let mut outputs = Vec::with_capacity((count as usize).min(4096));
    for _ in 0..count {
        let request_id = r.u64()?;
        let n = r.u16()?;
        let mut predictions = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let label = r.str()?;
            let score = r.f32()?;
            predictions.push(Prediction { label, score });
        }
        let flag_at = r.offset();
        let feature = match r.u8()? {
            0 => None,
            1 => {
                let t_at = r.offset();
                let t = r.tensor()?;
                match (t.dims.len(), t.data) {
                    (1, TensorData::F32(values)) => Some(FeatureVector::new(request_id, values)),
                    _ => {
                        return Err(MalformedBody {
                            offset: t_at,
                            reason: "feature must be a 1-d f32 tensor".into(),
                        })
                    }
                }
            }
            other => {
                return Err(MalformedBody {
                    offset: flag_at,
                    reason: format!("has_feature must be 0 or 1, got {other}"),
                })
            }
        };
        outputs.push(InferenceOutput {
            request_id,
            predictions,
            feature,
        });
    }
    r.finish()?;
    Ok(InferResponseMsg { outputs })
}

pub fn encode_error(msg: &ErrorMsg) -> Vec<u8> {
    let mut w = BodyWriter::new();
    w.u16(msg.code)
        .str(&msg.message)
        .u32(msg.request_ids.len() as u32);
    for &id in &msg.request_ids {
        w.u64(id);
    }
    w.into_bytes()
}

pub fn decode_error(body: &[u8]) -> Result<ErrorMsg, MalformedBody> {
    let mut r = BodyReader::new(body);
    let code = r.u16()?;
    let message = r.str()?;
    let n = r.u32()?;
    let mut request_ids = Vec::with_capacity((n as usize).min(4096));
    for _ in 0..n {
        request_ids.push(r.u64()?);
    }
    r.finish()?;
    Ok(ErrorMsg {
        code,
        message,
        request_ids,
    })
}

fn write_counts(w: &mut BodyWriter, map: &BTreeMap<String, u32>) {
    w.u16(map.len() as u16);
    for (k, v) in map {
        w.str(k).u32(*v);
    }
}

fn read_counts(r: &mut BodyReader<'_>) -> Result<BTreeMap<String, u32>, MalformedBody> {
    let n = r.u16()?;
    let mut map = BTreeMap::new();
    for _ in 0..n {
        let at = r.offset();
        let k = r.str()?;
        let v = r.u32()?;
        if map.insert(k, v).is_some() {
            return Err(MalformedBody {
                offset: at,
                reason: "duplicate model_id".into(),
            });
        }
    }
    Ok(map)
}

pub fn encode_status(s: &WorkerStatus) -> Vec<u8> {
    let mut w = BodyWriter::new();
    w.str(&s.worker_id)
        .u64(s.timestamp)
        .f32(s.cpu_pct)
        .u64(s.mem_bytes);
    write_counts(&mut w, &s.queue_depths);
    write_counts(&mut w, &s.inflight);
    match s.device_util_pct {
        Some(d) => w.u8(1).f32(d),
        None => w.u8(0),
    };
    w.into_bytes()
}

pub fn decode_status(body: &[u8]) -> Result<WorkerStatus, MalformedBody> {
    let mut r = BodyReader::new(body);
    let worker_id = r.str()?;
    let timestamp = r.u64()?;
    let cpu_pct = r.f32()?;
    let mem_bytes = r.u64()?;
    let queue_depths = read_counts(&mut r)?;
    let inflight = read_counts(&mut r)?;
    let flag_at = r.offset();
    let device_util_pct = match r.u8()? {
        0 => None,
        1 => Some(r.f32()?),
        other => {
            return Err(MalformedBody {
                offset: flag_at,
                reason: format!("has_device must be 0 or 1, got {other}"),
            })
        }
    };
    r.finish()?;
    Ok(WorkerStatus {
        worker_id,
        timestamp,
        cpu_pct,
        mem_bytes,
        queue_depths,
        inflight,
        device_util_pct,
    })
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::InferRequest(_) => MsgType::InferRequest,
            Message::InferResponse(_) => MsgType::InferResponse,
            Message::StatusQuery { .. } => MsgType::StatusQuery,
            Message::StatusSnapshot(_) => MsgType::StatusSnapshot,
            Message::Error(_) => MsgType::Error,
            Message::StatusPublish(_) => MsgType::StatusPublish,
        }
    }

    pub fn encode_body(&self) -> Vec<u8> {
        match self {
            Message::InferRequest(m) => encode_infer_request(m),
            Message::InferResponse(m) => encode_infer_response(m),
            Message::StatusQuery { ttl_ms } => ttl_ms.to_le_bytes().to_vec(),
            // The snapshot is a read-side report; JSON keeps it printable.
            Message::StatusSnapshot(s) => serde_json::to_vec(s).expect("snapshot serializes"),
            Message::Error(m) => encode_error(m),
            Message::StatusPublish(s) => encode_status(s),
        }
    }

    pub fn to_frame(&self, correlation_id: u64) -> Frame {
        Frame::new(self.msg_type(), correlation_id, self.encode_body())
    }

    pub fn decode(msg_type: MsgType, body: &[u8]) -> Result<Message, MalformedBody> {
        Ok(match msg_type {
            MsgType::InferRequest => Message::InferRequest(decode_infer_request(body)?),
            MsgType::InferResponse => Message::InferResponse(decode_infer_response(body)?),
            MsgType::StatusQuery => {
                let mut r = BodyReader::new(body);
                let ttl_ms = r.u32()?;
                r.finish()?;
                Message::StatusQuery { ttl_ms }
            }
            MsgType::StatusSnapshot => {
                Message::StatusSnapshot(serde_json::from_slice(body).map_err(|e| {
                    MalformedBody {
                        offset: e.column(),
                        reason: e.to_string(),
                    }
                })?)
            }
            MsgType::Error => Message::Error(decode_error(body)?),
            MsgType::StatusPublish => Message::StatusPublish(decode_status(body)?),
        })
    }

    pub fn from_frame(frame: &Frame) -> Result<Message, MalformedBody> {
        let ty = MsgType::from_u8(frame.msg_type).ok_or_else(|| MalformedBody {
            offset: 0,
            reason: format!("unknown msg_type {}", frame.msg_type),
        })?;
        Message::decode(ty, &frame.body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_request_body_layout() {
        let msg = InferRequestMsg {
            model_id: "abcd".into(),
            requests: vec![],
        };
        let body = encode_infer_request(&msg);
        assert_eq!(body, vec![4, 0, b'a', b'b', b'c', b'd', 0, 0, 0, 0]);
        assert_eq!(decode_infer_request(&body).unwrap(), msg);
    }

    #[test]
    fn request_with_tensor_layout() {
        let msg = InferRequestMsg {
            model_id: "m".into(),
            requests: vec![WireRequest {
                request_id: 7,
                tensor: Tensor::u8(vec![2], vec![9, 8]).unwrap(),
            }],
        };
        let body = encode_infer_request(&msg);
        let expect: Vec<u8> = [
            &[1u8, 0, b'm'][..],
            &[1, 0, 0, 0],
            &[7, 0, 0, 0, 0, 0, 0, 0],
            &[1, 2, 0, 0, 0, 1, 9, 8],
        ]
        .concat();
        assert_eq!(body, expect);
    }

    #[test]
    fn truncated_body_reports_final_offset() {
        let msg = InferRequestMsg {
            model_id: "m".into(),
            requests: vec![WireRequest {
                request_id: 1,
                tensor: Tensor::f32(vec![3], vec![1.0, 2.0, 3.0]).unwrap(),
            }],
        };
        let body = encode_infer_request(&msg);
        let err = decode_infer_request(&body[..body.len() - 1]).unwrap_err();
        assert_eq!(err.offset, body.len() - 1);
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut body = encode_infer_request(&InferRequestMsg {
            model_id: "m".into(),
            requests: vec![],
        });
        body.push(0);
        assert!(decode_infer_request(&body).is_err());
    }

    #[test]
    fn huge_declared_tensor_does_not_allocate() {
        let mut w = BodyWriter::new();
        w.str("m")
            .u32(1)
            .u64(1)
            .u8(2)
            .u32(u32::MAX)
            .u32(u32::MAX)
            .u8(0);
        let err = decode_infer_request(&w.into_bytes()).unwrap_err();
        assert!(err.reason.contains("needs"));
    }

    #[test]
    fn frame_round_trip_and_limits() {
        let f = Frame::new(MsgType::StatusQuery, 42, vec![1, 2, 3, 4]);
        let bytes = f.to_bytes();
        assert_eq!(&bytes[..4], &13u32.to_le_bytes());
        let mut cur = io::Cursor::new(bytes.clone());
        assert_eq!(
            read_frame(&mut cur, 1024).unwrap(),
            ReadOutcome::Frame(f.clone())
        );
        assert_eq!(read_frame(&mut cur, 1024).unwrap(), ReadOutcome::Eof);

        // Oversized frame followed by a good one: the stream stays aligned.
        let mut stream = bytes.clone();
        stream.extend_from_slice(&bytes);
        let mut cur = io::Cursor::new(stream);
        assert_eq!(
            read_frame(&mut cur, 12).unwrap(),
            ReadOutcome::TooLarge {
                length: 13,
                correlation_id: 42
            }
        );
        assert_eq!(read_frame(&mut cur, 13).unwrap(), ReadOutcome::Frame(f));
    }

    #[test]
    fn too_short_frame() {
        let mut bytes = 2u32.to_le_bytes().to_vec();
        bytes.extend_from_slice(&[5, 5]);
        let mut cur = io::Cursor::new(bytes);
        assert_eq!(
            read_frame(&mut cur, 100).unwrap(),
            ReadOutcome::TooShort { length: 2 }
        );
        assert_eq!(read_frame(&mut cur, 100).unwrap(), ReadOutcome::Eof);
    }

    #[test]
    fn status_layout() {
        let mut s = WorkerStatus::new("w1", 100);
        s.cpu_pct = 12.5;
        s.mem_bytes = 1 << 20;
        s.queue_depths.insert("m".into(), 3);
        s.device_util_pct = Some(40.0);
        let body = encode_status(&s);
        let expect: Vec<u8> = [
            &[2u8, 0, b'w', b'1'][..],
            &100u64.to_le_bytes(),
            &12.5f32.to_le_bytes(),
            &(1u64 << 20).to_le_bytes(),
            &[1, 0, 1, 0, b'm', 3, 0, 0, 0],
            &[0, 0],
            &[1],
            &40f32.to_le_bytes(),
        ]
        .concat();
        assert_eq!(body, expect);
        assert_eq!(decode_status(&body).unwrap(), s);
    }

    #[test]
    fn unknown_msg_type_is_reported() {
        let f = Frame {
            msg_type: 99,
            correlation_id: 1,
            body: vec![],
        };
        assert!(Message::from_frame(&f).is_err());
    }
}
