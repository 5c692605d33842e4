//! Threaded TCP runtime for the model server, plus a blocking client.

use std::io::{self, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{bounded, unbounded, Receiver, Sender};
use parking_lot::Mutex;
use thiserror::Error;

use crate::monitor::{ClusterSnapshot, Monitor, ProcessSampler, WorkerStatus};
use crate::server::protocol::{
    codes, max_frame_bytes_from_env, read_frame, write_frame, ErrorMsg, Frame, InferRequestMsg,
    InferResponseMsg, InferenceOutput, MalformedBody, Message, MsgType, ReadOutcome, WireRequest,
};
use crate::server::service::ModelService;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: String, source: io::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub bind: String,
    /// Worker threads running batches; defaults to the number of cores.
    pub workers: usize,
    /// Batches waiting for a worker before readers stop reading.
    pub queue_capacity: usize,
    pub max_frame_bytes: u32,
    pub worker_id: String,
    /// Self-publish interval into the local monitor; `None` disables it.
    pub publish_interval_ms: Option<u64>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:7878".into(),
            workers: std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1),
            queue_capacity: 64,
            max_frame_bytes: max_frame_bytes_from_env(),
            worker_id: "worker-0".into(),
            publish_interval_ms: None,
        }
    }
}

struct Job {
    correlation_id: u64,
    request: InferRequestMsg,
    reply: Sender<Frame>,
}

struct Connection {
    stream: TcpStream,
    reader: JoinHandle<()>,
    writer: JoinHandle<()>,
}

struct Shared {
    service: Arc<ModelService>,
    monitor: Option<Monitor>,
    max_frame: u32,
    shutting_down: AtomicBool,
    served: AtomicU64,
}

/// A running server. Dropping it without [`ServerHandle::shutdown`] also
/// shuts down gracefully.
pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    acceptor: Option<JoinHandle<()>>,
    workers: Vec<JoinHandle<()>>,
    connections: Arc<Mutex<Vec<Connection>>>,
    publisher: Option<(Sender<()>, JoinHandle<()>)>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Requests answered with an InferResponse so far.
    pub fn served(&self) -> u64 {
        self.shared.served.load(Ordering::Relaxed)
    }

    pub fn monitor(&self) -> Option<&Monitor> {
        self.shared.monitor.as_ref()
    }

    /// Stops accepting, lets in-flight batches finish and flushes replies.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if self.shared.shutting_down.swap(true, Ordering::SeqCst) {
            return;
        }
        if let Some((tx, h)) = self.publisher.take() {
            drop(tx);
            let _ = h.join();
        }
        // Wake the acceptor so it sees the flag.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
        let conns: Vec<Connection> = std::mem::take(&mut *self.connections.lock());
        for c in &conns {
            let _ = c.stream.shutdown(Shutdown::Read);
        }
        let mut writers = Vec::new();
        for c in conns {
            let _ = c.reader.join();
            writers.push((c.stream, c.writer));
        }
        // All dispatch senders are gone now; workers drain and exit.
        for h in self.workers.drain(..) {
            let _ = h.join();
        }
        for (stream, h) in writers {
            let _ = h.join();
            let _ = stream.shutdown(Shutdown::Both);
        }
        tracing::info!(addr = %self.addr, "server stopped");
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

pub fn serve(
    config: ServerConfig,
    service: Arc<ModelService>,
    monitor: Option<Monitor>,
) -> Result<ServerHandle, ServerError> {
    let listener = TcpListener::bind(&config.bind).map_err(|source| ServerError::BindFailure {
        addr: config.bind.clone(),
        source,
    })?;
    let addr = listener.local_addr()?;
    let shared = Arc::new(Shared {
        service,
        monitor,
        max_frame: config.max_frame_bytes,
        shutting_down: AtomicBool::new(false),
        served: AtomicU64::new(0),
    });
    let (job_tx, job_rx) = bounded::<Job>(config.queue_capacity.max(1));

    let workers = (0..config.workers.max(1))
        .map(|i| {
            let rx = job_rx.clone();
            let shared = shared.clone();
            std::thread::Builder::new()
                .name(format!("v2r-worker-{i}"))
                .spawn(move || worker_loop(rx, shared))
                .expect("spawn worker")
        })
        .collect();
    drop(job_rx);

    let connections = Arc::new(Mutex::new(Vec::<Connection>::new()));
    let acceptor = {
        let shared = shared.clone();
        let connections = connections.clone();
        std::thread::Builder::new()
            .name("v2r-acceptor".into())
            .spawn(move || accept_loop(listener, shared, job_tx, connections))
            .expect("spawn acceptor")
    };

    let publisher = match (&shared.monitor, config.publish_interval_ms) {
        (Some(_), Some(ms)) => {
            let (tx, rx) = bounded::<()>(0);
            let shared = shared.clone();
            let worker_id = config.worker_id.clone();
            let h = std::thread::Builder::new()
                .name("v2r-publisher".into())
                .spawn(move || publish_loop(rx, shared, worker_id, ms))
                .expect("spawn publisher");
            Some((tx, h))
        }
        _ => None,
    };

    tracing::info!(%addr, workers = config.workers, "server listening");
    Ok(ServerHandle {
        addr,
        shared,
        acceptor: Some(acceptor),
        workers,
        connections,
        publisher,
    })
}

fn accept_loop(
    listener: TcpListener,
    shared: Arc<Shared>,
    jobs: Sender<Job>,
    connections: Arc<Mutex<Vec<Connection>>>,
) {
    for stream in listener.incoming() {
        if shared.shutting_down.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                tracing::warn!(error = %e, "accept failed");
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        let peer = stream.peer_addr().ok();
        let (Ok(read_half), Ok(write_half), Ok(keep)) =
            (stream.try_clone(), stream.try_clone(), stream.try_clone())
        else {
            continue;
        };
        let (out_tx, out_rx) = unbounded::<Frame>();
        let writer = std::thread::spawn(move || writer_loop(write_half, out_rx));
        let reader = {
            let shared = shared.clone();
            let jobs = jobs.clone();
            std::thread::spawn(move || reader_loop(read_half, shared, jobs, out_tx))
        };
        tracing::debug!(?peer, "connection accepted");
        let mut conns = connections.lock();
        conns.retain(|c| !c.reader.is_finished() || !c.writer.is_finished());
        conns.push(Connection {
            stream: keep,
            reader,
            writer,
        });
    }
}

fn error_frame(correlation_id: u64, code: u16, message: impl Into<String>, ids: Vec<u64>) -> Frame {
    Message::Error(ErrorMsg {
        code,
        message: message.into(),
        request_ids: ids,
    })
    .to_frame(correlation_id)
}

fn reader_loop(stream: TcpStream, shared: Arc<Shared>, jobs: Sender<Job>, out: Sender<Frame>) {
    let mut r = BufReader::with_capacity(256 * 1024, stream);
    loop {
        let frame = match read_frame(&mut r, shared.max_frame) {
            Ok(ReadOutcome::Frame(f)) => f,
            Ok(ReadOutcome::Eof) => break,
            Ok(ReadOutcome::TooLarge {
                length,
                correlation_id,
            }) => {
                let _ = out.send(error_frame(
                    correlation_id,
                    codes::FRAME_TOO_LARGE,
                    format!(
                        "frame of {length} bytes exceeds {} byte limit",
                        shared.max_frame
                    ),
                    vec![],
                ));
                continue;
            }
            Ok(ReadOutcome::TooShort { length }) => {
                let _ = out.send(error_frame(
                    0,
                    codes::MALFORMED_FRAME,
                    format!("frame length {length} shorter than header"),
                    vec![],
                ));
                continue;
            }
            Err(e) => {
                if e.kind() != io::ErrorKind::UnexpectedEof {
                    tracing::debug!(error = %e, "connection read failed");
                }
                break;
            }
        };
        let corr = frame.correlation_id;
        let Some(ty) = MsgType::from_u8(frame.msg_type) else {
            let _ = out.send(error_frame(
                corr,
                codes::UNKNOWN_MSG_TYPE,
                format!("unknown msg_type {}", frame.msg_type),
                vec![],
            ));
            continue;
        };
        let msg = match Message::decode(ty, &frame.body) {
            Ok(m) => m,
            Err(e) => {
                let code = if ty == MsgType::StatusPublish {
                    codes::MALFORMED_STATUS
                } else {
                    codes::MALFORMED_BODY
                };
                let _ = out.send(error_frame(corr, code, e.to_string(), vec![]));
                continue;
            }
        };
        match msg {
            Message::InferRequest(request) => {
                let n = request.requests.len() as u32;
                shared.service.note_queued(&request.model_id, n, true);
                // Blocks when the queue is full, which stops reading from the
                // socket and pushes back on the client.
                let job = Job {
                    correlation_id: corr,
                    request,
                    reply: out.clone(),
                };
                if let Err(e) = jobs.send(job) {
                    let job = e.into_inner();
                    shared.service.note_queued(&job.request.model_id, n, false);
                    let ids = job.request.requests.iter().map(|r| r.request_id).collect();
                    let _ = out.send(error_frame(
                        corr,
                        codes::SHUTTING_DOWN,
                        "server shutting down",
                        ids,
                    ));
                }
            }
            Message::StatusPublish(status) => {
                let res = match &shared.monitor {
                    Some(m) => m.publish_status(status).map_err(|e| e.to_string()),
                    None => Err("no monitor on this server".into()),
                };
                if let Err(msg) = res {
                    let _ = out.send(error_frame(corr, codes::MALFORMED_STATUS, msg, vec![]));
                }
            }
            Message::StatusQuery { ttl_ms } => {
                let reply = match &shared.monitor {
                    Some(m) => match m.snapshot(ttl_ms) {
                        Ok(s) => Message::StatusSnapshot(s).to_frame(corr),
                        Err(e) => {
                            error_frame(corr, codes::UNEXPECTED_MESSAGE, e.to_string(), vec![])
                        }
                    },
                    None => error_frame(
                        corr,
                        codes::UNEXPECTED_MESSAGE,
                        "no monitor on this server",
                        vec![],
                    ),
                };
                let _ = out.send(reply);
            }
            other => {
                let _ = out.send(error_frame(
                    corr,
                    codes::UNEXPECTED_MESSAGE,
                    format!("server does not accept {:?}", other.msg_type()),
                    vec![],
                ));
            }
        }
    }
}

fn writer_loop(stream: TcpStream, rx: Receiver<Frame>) {
    let mut w = BufWriter::with_capacity(256 * 1024, stream);
    while let Ok(frame) = rx.recv() {
        if write_frame(&mut w, &frame).is_err() {
            return;
        }
        // Coalesce whatever is already queued, then flush.
        while let Ok(frame) = rx.try_recv() {
            if write_frame(&mut w, &frame).is_err() {
                return;
            }
        }
        if w.flush().is_err() {
            return;
        }
    }
}

fn worker_loop(jobs: Receiver<Job>, shared: Arc<Shared>) {
    while let Ok(job) = jobs.recv() {
        let req = &job.request;
        shared
            .service
            .note_queued(&req.model_id, req.requests.len() as u32, false);
        let batch: Vec<(u64, &Tensor)> = req
            .requests
            .iter()
            .map(|r| (r.request_id, &r.tensor))
            .collect();
        let frame = match shared.service.infer(&req.model_id, &batch) {
            Ok(outputs) => {
                shared
                    .served
                    .fetch_add(outputs.len() as u64, Ordering::Relaxed);
                Message::InferResponse(InferResponseMsg { outputs }).to_frame(job.correlation_id)
            }
            Err(e) => {
                tracing::warn!(model_id = %req.model_id, error = %e, "batch failed");
                let ids = req.requests.iter().map(|r| r.request_id).collect();
                Message::Error(e.to_error_msg(ids)).to_frame(job.correlation_id)
            }
        };
        let _ = job.reply.send(frame);
    }
}

fn publish_loop(stop: Receiver<()>, shared: Arc<Shared>, worker_id: String, interval_ms: u64) {
    let mut sampler = ProcessSampler::new();
    let Some(monitor) = shared.monitor.clone() else {
        return;
    };
    loop {
        let (cpu, mem) = sampler.sample();
        let mut s = WorkerStatus::new(worker_id.clone(), crate::clock::utc_now_ms());
        s.cpu_pct = cpu;
        s.mem_bytes = mem;
        s.queue_depths = shared.service.queue_depths();
        s.inflight = shared.service.inflight();
        if let Err(e) = monitor.publish_status(s) {
            tracing::warn!(error = %e, "self-publish failed");
        }
        match stop.recv_timeout(Duration::from_millis(interval_ms)) {
            Err(crossbeam_channel::RecvTimeoutError::Timeout) => continue,
            _ => return,
        }
    }
}

// ---------------------------------------------------------------------------
// Client
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad reply: {0}")]
    Protocol(#[from] MalformedBody),
    #[error("server error {}: {}", .0.code, .0.message)]
    Remote(ErrorMsg),
    #[error("unexpected reply {0:?}")]
    UnexpectedReply(MsgType),
    #[error("connection closed by server")]
    Closed,
}

/// Blocking client speaking the framed protocol.
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    next_correlation: u64,
    max_frame: u32,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, ClientError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            reader: BufReader::with_capacity(256 * 1024, stream.try_clone()?),
            writer: BufWriter::with_capacity(256 * 1024, stream),
            next_correlation: 1,
            max_frame: u32::MAX,
        })
    }

    /// Sends a raw frame; used by tests to probe malformed input.
    pub fn send_frame(&mut self, frame: &Frame) -> Result<(), ClientError> {
        write_frame(&mut self.writer, frame)?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn send_raw(&mut self, bytes: &[u8]) -> Result<(), ClientError> {
        self.writer.write_all(bytes)?;
        self.writer.flush()?;
        Ok(())
    }

    /// Sends a message and returns the correlation id used.
    pub fn send(&mut self, msg: &Message) -> Result<u64, ClientError> {
        let corr = self.next_correlation;
        self.next_correlation += 1;
        self.send_frame(&msg.to_frame(corr))?;
        Ok(corr)
    }

    /// Next frame from the server, decoded.
    pub fn recv(&mut self) -> Result<(u64, Message), ClientError> {
        match read_frame(&mut self.reader, self.max_frame)? {
            ReadOutcome::Frame(f) => {
                let msg = Message::from_frame(&f)?;
                Ok((f.correlation_id, msg))
            }
            ReadOutcome::Eof => Err(ClientError::Closed),
            ReadOutcome::TooLarge { .. } | ReadOutcome::TooShort { .. } => {
                Err(ClientError::Protocol(MalformedBody {
                    offset: 0,
                    reason: "bad frame length from server".into(),
                }))
            }
        }
    }

    /// Sends and waits for the reply with the same correlation id.
    pub fn call(&mut self, msg: &Message) -> Result<Message, ClientError> {
        let corr = self.send(msg)?;
        loop {
            let (c, reply) = self.recv()?;
            if c == corr {
                return match reply {
                    Message::Error(e) => Err(ClientError::Remote(e)),
                    other => Ok(other),
                };
            }
            tracing::debug!(correlation_id = c, "skipping unrelated reply");
        }
    }

    pub fn infer(
        &mut self,
        model_id: &str,
        requests: Vec<(u64, Tensor)>,
    ) -> Result<Vec<InferenceOutput>, ClientError> {
        let msg = Message::InferRequest(InferRequestMsg {
            model_id: model_id.to_string(),
            requests: requests
                .into_iter()
                .map(|(request_id, tensor)| WireRequest { request_id, tensor })
                .collect(),
        });
        match self.call(&msg)? {
            Message::InferResponse(r) => Ok(r.outputs),
            other => Err(ClientError::UnexpectedReply(other.msg_type())),
        }
    }

    /// Fire-and-forget; the server only replies on error.
    pub fn publish(&mut self, status: &WorkerStatus) -> Result<(), ClientError> {
        self.send(&Message::StatusPublish(status.clone()))?;
        Ok(())
    }

    pub fn status(&mut self, ttl_ms: u32) -> Result<ClusterSnapshot, ClientError> {
        match self.call(&Message::StatusQuery { ttl_ms })? {
            Message::StatusSnapshot(s) => Ok(s),
            other => Err(ClientError::UnexpectedReply(other.msg_type())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executors::HistogramEmbedding;

    fn start(monitor: Option<Monitor>) -> ServerHandle {
        let svc = ModelService::new(None)
            .with_model("emb", Arc::new(HistogramEmbedding::new(1, 128).unwrap()));
        serve(
            ServerConfig {
                bind: "127.0.0.1:0".into(),
                max_frame_bytes: 1024 * 1024,
                ..Default::default()
            },
            Arc::new(svc),
            monitor,
        )
        .unwrap()
    }

    fn img() -> Tensor {
        Tensor::f32(vec![64, 64, 3], vec![0.25; 64 * 64 * 3]).unwrap()
    }

    #[test]
    fn request_reply_echoes_correlation() {
        let server = start(None);
        let mut c = Client::connect(server.local_addr()).unwrap();
        let corr = c
            .send(&Message::InferRequest(InferRequestMsg {
                model_id: "emb".into(),
                requests: vec![WireRequest {
                    request_id: 5,
                    tensor: img(),
                }],
            }))
            .unwrap();
        let (got, msg) = c.recv().unwrap();
        assert_eq!(got, corr);
        match msg {
            Message::InferResponse(r) => assert_eq!(r.outputs[0].request_id, 5),
            other => panic!("{other:?}"),
        }
        server.shutdown();
    }

    #[test]
    fn oversize_frame_then_usable() {
        let server = start(None);
        let mut c = Client::connect(server.local_addr()).unwrap();
        let mut raw = (2u32 * 1024 * 1024).to_le_bytes().to_vec();
        raw.push(1);
        raw.extend_from_slice(&77u64.to_le_bytes());
        raw.resize(4 + 2 * 1024 * 1024, 0);
        c.send_raw(&raw).unwrap();
        let (corr, msg) = c.recv().unwrap();
        assert_eq!(corr, 77);
        assert!(matches!(msg, Message::Error(ref e) if e.code == codes::FRAME_TOO_LARGE));
        assert_eq!(c.infer("emb", vec![(1, img())]).unwrap().len(), 1);
    }

    #[test]
    fn unknown_type_and_unknown_model() {
        let server = start(None);
        let mut c = Client::connect(server.local_addr()).unwrap();
        c.send_frame(&Frame {
            msg_type: 42,
            correlation_id: 9,
            body: vec![],
        })
        .unwrap();
        let (corr, msg) = c.recv().unwrap();
        assert_eq!(corr, 9);
        assert!(matches!(msg, Message::Error(ref e) if e.code == codes::UNKNOWN_MSG_TYPE));
        match c.infer("ghost", vec![(1, img()), (2, img()), (3, img())]) {
            Err(ClientError::Remote(e)) => {
                assert_eq!(e.code, codes::UNKNOWN_MODEL);
                assert_eq!(e.request_ids, vec![1, 2, 3]);
            }
            other => panic!("{other:?}"),
        }
        assert!(c.infer("emb", vec![]).unwrap().is_empty());
    }

    #[test]
    fn status_over_the_wire() {
        let server = start(Some(Monitor::default()));
        let mut c = Client::connect(server.local_addr()).unwrap();
        c.publish(&WorkerStatus::new("w1", crate::clock::utc_now_ms()))
            .unwrap();
        let snap = c.status(3000).unwrap();
        assert!(!snap.workers["w1"].stale);
    }

    #[test]
    fn bind_failure() {
        let server = start(None);
        let err = serve(
            ServerConfig {
                bind: server.local_addr().to_string(),
                ..Default::default()
            },
            Arc::new(ModelService::new(None)),
            None,
        );
        assert!(matches!(err, Err(ServerError::BindFailure { .. })));
    }
}
