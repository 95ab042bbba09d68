//! Software emulation of FP8 training numerics.
//!
//! Bit-exact 8-bit codecs, tensor quantizers at three granularities,
//! range-expanded optimizer states, a quantized AdamW, a one-layer precision
//! flow simulator and an analytic activation-memory model.

pub mod codec;
pub mod expand;
pub mod flow;
pub mod harness;
pub mod io;
pub mod memory;
pub mod optim;
pub mod par;
pub mod quant;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use codec::{Fp8Code, Fp8Format};
pub use tensor::Tensor;
