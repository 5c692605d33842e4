//! Serving kernel for video-to-retail pipelines.
//!
//! The crate is split along the offline/online workflow:
//!
//! * offline: [`registry`] stores model manifests and weight blobs, [`profiler`]
//!   measures executors per batch size and feeds the [`orchestrator`] cache;
//! * online: [`data_engine`] turns raw frame streams and subtitles into
//!   model-ready requests and batches them under the orchestrator's plan,
//!   [`server`] runs the batches through [`executors`] and forwards features
//!   to [`matching`], while [`monitor`] aggregates worker telemetry.
//!
//! [`pipeline`] wires these together for the `v2r` binary.

pub mod clock;
pub mod data_engine;
pub mod error;
pub mod executors;
pub mod matching;
pub mod monitor;
pub mod orchestrator;
pub mod pipeline;
pub mod profiler;
pub mod registry;
pub mod server;
pub mod tensor;

pub use error::{Error, ExitCode};
pub use tensor::{DType, Dim, Tensor, TensorData, TensorSpec};
