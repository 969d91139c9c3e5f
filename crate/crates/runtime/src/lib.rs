//! Runtime for tensor-parallel decoding: shard files, transports, the
//! threaded weight scheduler, node loops and benchmarks.

pub mod bench;
pub mod error;
pub mod metrics;
pub mod node;
pub mod run_config;
pub mod scheduler;
pub mod shard_io;
pub mod transport;

pub use error::{Result, RuntimeError};
