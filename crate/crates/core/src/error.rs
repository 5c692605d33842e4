//! Crate-wide error type and the process exit-code table.

use thiserror::Error;

use crate::data_engine::DataError;
use crate::executors::ExecutorError;
use crate::matching::MatchError;
use crate::monitor::MonitorError;
use crate::orchestrator::OrchestratorError;
use crate::profiler::ProfileError;
use crate::registry::RegistryError;
use crate::server::protocol::MalformedBody;
use crate::server::{ClientError, ServerError, ServiceError};

#[derive(Debug, Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Executor(#[from] ExecutorError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Protocol(#[from] MalformedBody),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
}

/// Stable process exit codes, one per error family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ExitCode {
    Ok = 0,
    Usage = 2,
    Io = 3,
    Registry = 4,
    Executor = 5,
    Profiler = 6,
    Orchestrator = 7,
    DataEngine = 8,
    Server = 9,
    Matching = 10,
    Monitor = 11,
}

impl ExitCode {
    pub const ALL: [ExitCode; 11] = [
        ExitCode::Ok,
        ExitCode::Usage,
        ExitCode::Io,
        ExitCode::Registry,
        ExitCode::Executor,
        ExitCode::Profiler,
        ExitCode::Orchestrator,
        ExitCode::DataEngine,
        ExitCode::Server,
        ExitCode::Matching,
        ExitCode::Monitor,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            ExitCode::Ok => "ok",
            ExitCode::Usage => "usage",
            ExitCode::Io => "io",
            ExitCode::Registry => "registry",
            ExitCode::Executor => "executor",
            ExitCode::Profiler => "profiler",
            ExitCode::Orchestrator => "orchestrator",
            ExitCode::DataEngine => "data-engine",
            ExitCode::Server => "server",
            ExitCode::Matching => "matching",
            ExitCode::Monitor => "monitor",
        }
    }
}

impl Error {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            Error::Usage(_) => ExitCode::Usage,
            Error::Io(_) => ExitCode::Io,
            Error::Registry(_) => ExitCode::Registry,
            Error::Executor(_) => ExitCode::Executor,
            Error::Profile(_) => ExitCode::Profiler,
            Error::Orchestrator(_) => ExitCode::Orchestrator,
            Error::Data(DataError::Io(_)) => ExitCode::Io,
            Error::Data(_) => ExitCode::DataEngine,
            Error::Service(ServiceError::ExecutorFailure(_)) => ExitCode::Executor,
            Error::Server(_) | Error::Service(_) | Error::Client(_) | Error::Protocol(_) => {
                ExitCode::Server
            }
            Error::Match(MatchError::Io(_)) => ExitCode::Io,
            Error::Match(_) => ExitCode::Matching,
            Error::Monitor(_) => ExitCode::Monitor,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
