//! Data engine: raw frame-stream ingestion, shot detection, image and text
//! preprocessing, and dynamic batching of inference requests.

pub mod batcher;
pub mod hyf;
pub mod preprocess;
pub mod shots;

use std::io;

use thiserror::Error;

pub use batcher::{BatchQueue, BatchRouter, BatchTrigger, InferenceBatch, InferenceRequest};
pub use hyf::{read_stream, write_stream, FrameStream, PixFmt, StreamHeader};
pub use preprocess::{gray_to_rgb, preprocess_image, preprocess_text};
pub use shots::{detect_shots, frame_histogram, histogram_distance, Shot, ShotDetector};

pub const DEFAULT_THRESHOLD: f32 = 0.35;
pub const DEFAULT_MIN_SHOT_LEN: usize = 2;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic {0:?}, expected \"HYFR\"")]
    BadMagic([u8; 4]),
    #[error("unsupported stream version {0}")]
    UnsupportedVersion(u16),
    #[error("stream truncated in frame {frame_index} of {frame_count}")]
    TruncatedStream { frame_index: u32, frame_count: u32 },
    #[error("bad stream header: {0}")]
    BadHeader(String),
    #[error("stream has no frames")]
    EmptyStream,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("bad dimensions: {0}")]
    BadDimensions(String),
    #[error("queue for model {0} is closed")]
    QueueClosed(String),
    #[error("payload mismatch: {0}")]
    PayloadMismatch(String),
    #[error("no batch queue for model {0}")]
    UnknownModelQueue(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}
