//! Low-precision neural-network inference engine and design-space-exploration
//! toolkit for speech front-ends.
//!
//! The crate quantizes MLP weights and activations to 1-8 bit planes with
//! shared per-plane scales (`quant`), executes the resulting models through
//! packed XNOR/popcount kernels (`bitkernel`), trains them with
//! straight-through gradients (`nn`), synthesizes noisy-speech datasets and
//! features (`dsp`), and sweeps weight/neuron bit-width pairs against
//! accuracy and measured kernel speed (`evalx`).

pub mod bitkernel;
pub mod dsp;
pub mod evalx;
pub mod nn;
pub mod quant;

pub use bitkernel::{gemm_dense, gemm_quantized, xnor_popcount_dot, BitPlane, DenseMatrix};

pub use quant::{quantize_matrix, quantize_residual, QuantizedTensor, QuantizedVector};
