//! Model server: wire protocol, executor dispatch and the TCP runtime.

pub mod protocol;
pub mod service;
pub mod tcp;

pub use protocol::{
    ErrorMsg, Frame, InferRequestMsg, InferResponseMsg, InferenceOutput, MalformedBody, Message,
    MsgType, WireRequest,
};
pub use service::{FeatureSink, FileIndexSink, MemorySink, ModelService, ServiceError};
pub use tcp::{serve, Client, ClientError, ServerConfig, ServerError, ServerHandle};
