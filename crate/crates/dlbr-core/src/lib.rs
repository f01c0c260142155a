//! Ultra-low-bit CNN inference on CPUs.
//!
//! `dlbr-core` quantizes convolutional networks to 1-3 bit weights and
//! activations and executes them with bitserial kernels: low-bit tensors are
//! split into bitplanes packed into 64-bit words, and dot products become
//! popcounts of bitwise-ANDed words. The crate covers the full pipeline:
//!
//! - [`tensor`]: dense FP32/integer containers shared by every module
//! - [`ops`]: scalar FP32 reference operators (the correctness oracle)
//! - [`quant`]: clip/round quantization, scale fitting, fake quantization
//! - [`bitpack`]: bitplane packing of low-bit code matrices
//! - [`bitserial`]: popcount dot products, GEMM, and im2col convolution
//! - [`graph`]: network descriptions with per-layer precision
//! - [`container`]: the `.dlbr` binary model container
//! - [`sim`]: FP32 / fake-quantized reference simulation of a graph
//! - [`precision`]: sensitivity-based mixed-precision planning
//! - [`runtime`]: graph compilation, execution, and benchmarking
//! - [`netdesc`]: a small text format for building test networks

pub mod bitpack;
pub mod bitserial;
pub mod container;
pub mod error;
pub mod graph;
pub mod netdesc;
pub mod ops;
pub mod precision;
pub mod quant;
pub mod runtime;
pub mod sim;
pub mod tensor;

pub use error::{Error, Result, Violation, ViolationKind};
pub use tensor::{Fill, IntTensor, Layout, Tensor};
