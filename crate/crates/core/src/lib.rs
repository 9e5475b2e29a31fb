//! Int8 post-training quantization toolkit for a compact speaker-verification model.
//!
//! The crate provides the full analysis pipeline:
//!
//! - [`tensor`] / [`kernels`]: a minimal dense tensor plus the float kernels the
//!   reference model needs (dilated 1-D convolution, linear, activations, pooling).
//! - [`quant`]: affine int8 quantization (`x_q = round(x/c - d)`, `x = c(x_q + d)`),
//!   parameter derivation, fake-quant, and true int8 kernels with checked 32-bit
//!   accumulation.
//! - [`calib`]: streaming min/max/mean/std observers (optionally histogram-backed
//!   percentile clipping) and the calibration runner.
//! - [`model`] / [`model_io`]: a deterministic reduced-scale TDNN speaker encoder with
//!   seven named quantizable layers and its binary file format.
//! - [`eval`]: cosine trial scoring and equal-error-rate computation.
//! - [`sensitivity`]: the layer-wise quantization sweep, exact size accounting, and
//!   mixed-precision layer selection policies.
//! - [`data`]: deterministic synthetic speaker features and trial generation.
//!
//! Numeric kernels are generic over the float scalar via [`num::Real`] (`f32`/`f64`);
//! the model pipeline and all file formats are fixed at `f32`, with concrete aliases
//! exported below.

pub mod calib;
pub mod data;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod model;
pub mod model_io;
pub mod num;
pub mod quant;
pub mod report;
pub mod sensitivity;
pub mod tensor;

pub use error::{Error, Result};

/// Scalar type the model pipeline and file formats are fixed to.
pub type Scalar = f32;
/// Dense float tensor as used by the model pipeline.
pub type TensorF = tensor::Tensor<f32>;
/// Dense int8 tensor (quantized payloads).
pub type TensorI8 = tensor::Tensor<i8>;
/// Dense int32 tensor (accumulator payloads).
pub type TensorI32 = tensor::Tensor<i32>;
/// Quantization parameters for the `f32` pipeline.
pub type QuantParamsF = quant::QuantParams<f32>;
/// Quantized tensor for the `f32` pipeline.
pub type QuantizedTensorF = quant::QuantizedTensor<f32>;
