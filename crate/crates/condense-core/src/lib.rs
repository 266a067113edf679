//! Inference engine for condensation networks: convolution layers whose
//! output channels are expanded by a factor `alpha` and immediately condensed
//! back by cross-channel pooling. The expanded feature-map sets ("virtual"
//! sets) are computed block-by-block and never written to feature-map
//! storage, which is where the bandwidth savings come from.
//!
//! The crate provides:
//!
//! - packed low-bit tensors and the block extraction/insertion primitives
//!   every executor is built on ([`tensor`]),
//! - weight binarization and low-bit activation quantization ([`quant`]),
//! - forward kernels for convolution and the pooling variants ([`layers`]),
//!   plus a double-precision training path with analytic gradients ([`grad`]),
//! - a line-oriented network description format, the built-in network
//!   definitions, and the weight-file format ([`netdef`]),
//! - two executors — a naive reference that materializes every set and a
//!   block-streaming executor that keeps only `alpha + 1` blocks live — with
//!   byte-level traffic and buffer-occupancy logging ([`exec`]),
//! - closed-form memory, bandwidth, and MAC-rate accounting ([`analysis`]),
//! - randomized-case generation and the independent oracles used by the
//!   property suites ([`harness`]).

pub mod analysis;
pub mod error;
pub mod exec;
pub mod grad;
pub mod harness;
pub mod layers;
pub mod netdef;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
