//! Server-assisted side-tuning of a frozen transformer.
//!
//! A device runs a frozen decoder forward-only, quantizes the activations at
//! a few block boundaries and streams them one-way to a server. The server
//! trains a small stack of parallel adapters on those activations. See the
//! README for the process layout and CLI.

pub mod backbone;
pub mod cli;
pub mod cost;
pub mod device;
mod binio;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod jsonl;
pub mod quant;
pub mod queue;
pub mod rng;
pub mod server;
pub mod side;
pub mod tensor;
pub mod train;
pub mod transport;
pub mod wire;

pub use error::{Error, Result};
pub use exec::Exec;
pub use tensor::Tensor;
