//! Precision-flow simulator for one Llama-style decoder layer.
//!
//! ```text
//! x ─ RMSNorm ─ QKV ─ RoPE ─ attention ─ out-proj ─(+x)─ r1
//! r1 ─ RMSNorm ─ gate/up ─ SiLU·mul ─ down ─(+r1)─ y
//! ```
//!
//! Four precision policies share one implementation:
//!
//! * `Reference`: f32 everywhere, f32 saves.
//! * `Bf16`: BF16 compute and saves; RMSNorm inputs saved in f32.
//! * `Te`: linear-layer inputs per-tensor 8-bit, everything else BF16.
//! * `Coat`: linear-layer inputs per-tensor 8-bit, non-linear inputs and
//!   outputs 8-bit at fine granularity (1×G groups by default). Linear
//!   outputs feeding non-linear layers are quantized by the producer.
//!
//! Attention and RoPE always run in BF16 (f32 for `Reference`) with
//! unquantized saves. Matmuls consume dequantized operands and accumulate
//! in f32. Weights stay in f32 and are quantized per tensor on use; their
//! scales are cached for the whole gradient-accumulation cycle.

pub mod checks;
mod layer;
pub mod ops;
mod tape;

pub use layer::{
    backward, emulated_forward, forward, forward_frozen, norm_input_error, FrozenRounding, LayerGrads, LayerWeights,
    WeightCache,
};
pub use tape::{tape_bytes, LayerTape, SavedActivation, Storage};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Fp8Format;
use crate::memory::{Frac, MemPolicy, MemorySpec};
use crate::quant::{QuantError, QuantGeometry, ScalePrecision, DEFAULT_ACTIVATION_GROUP};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid layer spec: {0}")]
    InvalidSpec(String),
    #[error("tape was produced by a different layer spec ({tape} vs {spec})")]
    TapeMismatch { tape: String, spec: String },
    #[error(transparent)]
    Quant(#[from] QuantError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FlowPolicy {
    Reference,
    Bf16,
    Te,
    Coat,
}

impl FlowPolicy {
    pub const ALL: [FlowPolicy; 4] = [FlowPolicy::Reference, FlowPolicy::Bf16, FlowPolicy::Te, FlowPolicy::Coat];

    pub fn memory_policy(self) -> Option<MemPolicy> {
        match self {
            FlowPolicy::Reference => None,
            FlowPolicy::Bf16 => Some(MemPolicy::Bf16),
            FlowPolicy::Te => Some(MemPolicy::Te),
            FlowPolicy::Coat => Some(MemPolicy::Coat),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FlowPolicy::Reference => "FP32",
            FlowPolicy::Bf16 => "BF16",
            FlowPolicy::Te => "TE",
            FlowPolicy::Coat => "COAT",
        }
    }
}

impl fmt::Display for FlowPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FlowPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "FP32" | "REFERENCE" => Ok(FlowPolicy::Reference),
            "BF16" => Ok(FlowPolicy::Bf16),
            "TE" => Ok(FlowPolicy::Te),
            "COAT" => Ok(FlowPolicy::Coat),
            _ => Err(format!("unknown flow policy '{s}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub hidden: usize,
    pub intermediate: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub batch: usize,
    pub policy: FlowPolicy,
    /// Granularity for non-linear inputs under `Coat`.
    pub nonlinear: QuantGeometry,
    pub format: Fp8Format,
    pub scale_precision: ScalePrecision,
    /// Round every gradient passed between operators to BF16.
    pub bf16_grads: bool,
}

impl LayerSpec {
    pub fn new(hidden: usize, intermediate: usize, heads: usize, seq_len: usize, batch: usize, policy: FlowPolicy) -> Self {
        Self {
            hidden,
            intermediate,
            heads,
            seq_len,
            batch,
            policy,
            nonlinear: QuantGeometry::PerGroup(DEFAULT_ACTIVATION_GROUP),
            format: Fp8Format::E4M3,
            scale_precision: ScalePrecision::Bf16,
            bf16_grads: true,
        }
    }

    pub fn with_group_size(mut self, g: usize) -> Self {
        self.nonlinear = QuantGeometry::PerGroup(g);
        self
    }

    pub fn with_block_size(mut self, b: usize) -> Self {
        self.nonlinear = QuantGeometry::PerBlock(b);
        self
    }

    pub fn with_policy(mut self, policy: FlowPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn tokens(&self) -> usize {
        self.batch * self.seq_len
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    /// Elements per scaling factor for non-linear saves.
    pub fn group_elements(&self) -> usize {
        match self.nonlinear {
            QuantGeometry::PerTensor => self.tokens() * self.hidden,
            QuantGeometry::PerGroup(g) => g,
            QuantGeometry::PerBlock(b) => b * b,
        }
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        let bad = |m: String| Err(FlowError::InvalidSpec(m));
        if self.seq_len == 0 || self.batch == 0 {
            return bad("sequence length and batch must be positive".into());
        }
        if self.hidden == 0 || self.intermediate == 0 || self.heads == 0 {
            return bad("hidden, intermediate and heads must be positive".into());
        }
        if self.hidden % self.heads != 0 || self.head_dim() % 2 != 0 {
            return bad(format!("{} heads must split hidden {} into even widths", self.heads, self.hidden));
        }
        let unit = match self.nonlinear {
            QuantGeometry::PerTensor => return bad("non-linear granularity must be per-group or per-block".into()),
            QuantGeometry::PerGroup(g) | QuantGeometry::PerBlock(g) => g,
        };
        if unit == 0 || self.hidden % unit != 0 || self.intermediate % unit != 0 {
            return bad(format!(
                "hidden {} and intermediate {} must be multiples of {unit}",
                self.hidden, self.intermediate
            ));
        }
        Ok(())
    }

    pub(crate) fn fingerprint(&self) -> String {
        format!(
            "{}x{}x{} h{} i{} heads{} {} {} {:?}",
            self.batch, self.seq_len, self.hidden, self.hidden, self.intermediate, self.heads, self.policy,
            self.nonlinear, self.format
        )
    }

    /// Analytic memory spec matching this layer, if the policy has one.
    pub fn memory_spec(&self) -> Option<MemorySpec> {
        let policy = self.policy.memory_policy()?;
        let r = Frac::new(self.intermediate as i64, self.hidden as i64);
        Some(MemorySpec {
            batch: self.batch,
            seq_len: self.seq_len,
            hidden: self.hidden,
            mlp_ratio: (*r.numer(), *r.denom()),
            policy,
            include_scales: false,
            group_size: self.group_elements(),
        })
    }
}
