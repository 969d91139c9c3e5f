use thiserror::Error;
use tpinfer_core::comm::CommError;
use tpinfer_core::exec::ExecError;
use tpinfer_core::partition::PartitionError;
use tpinfer_core::ConfigError;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("config: {0}")]
    Config(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("io: {0}")]
    Io(String),
}

impl RuntimeError {
    /// Process exit status for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            RuntimeError::Config(_) => 2,
            RuntimeError::Protocol(_) => 3,
            RuntimeError::Io(_) => 4,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        RuntimeError::Config(msg.into())
    }

    pub fn io_at(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        RuntimeError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<std::io::Error> for RuntimeError {
    fn from(e: std::io::Error) -> Self {
        RuntimeError::Io(e.to_string())
    }
}

impl From<ConfigError> for RuntimeError {
    fn from(e: ConfigError) -> Self {
        RuntimeError::Config(e.to_string())
    }
}

impl From<PartitionError> for RuntimeError {
    fn from(e: PartitionError) -> Self {
        RuntimeError::Config(e.to_string())
    }
}

impl From<CommError> for RuntimeError {
    fn from(e: CommError) -> Self {
        match e {
            CommError::Io(m) => RuntimeError::Io(m),
            other => RuntimeError::Protocol(other.to_string()),
        }
    }
}

impl From<ExecError> for RuntimeError {
    fn from(e: ExecError) -> Self {
        match e {
            ExecError::Comm(c) => c.into(),
            ExecError::Load { .. } | ExecError::NotLoaded(_) => RuntimeError::Io(e.to_string()),
            ExecError::TokenOutOfRange { .. }
            | ExecError::EmptyPrompt
            | ExecError::Partition(_) => RuntimeError::Config(e.to_string()),
            other => RuntimeError::Protocol(other.to_string()),
        }
    }
}

pub type Result<T, E = RuntimeError> = std::result::Result<T, E>;
