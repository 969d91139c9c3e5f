//! Allocation-only core of the tensor-parallel inference runtime.
//!
//! Everything here is deterministic and free of IO: dense fp32 kernels, the
//! Llama block arithmetic, head/FFN sharding, the wire frame codec, the
//! sliding-window residency model with its steady-state predicates, and the
//! analytical allreduce latency lab. The `tpinfer` crate adds files, sockets,
//! threads and the command line on top.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod comm;
pub mod config;
pub mod exec;
pub mod latency;
pub mod partition;
pub mod schedule;
pub mod tensor;
pub mod weights;
pub mod window;

pub use config::{ConfigError, ModelConfig};
pub use tensor::{Tensor, TensorError};
