//! AdamW with 8-bit moment storage.
//!
//! Each step dequantizes the stored moments to f32, runs the update in f32
//! and requantizes. Quantized moments are flattened and zero-padded to a
//! multiple of the group size, so a parameter tensor of any shape maps onto
//! whole groups and groups never straddle two parameters' shards when shards
//! are cut at group boundaries.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Fp8Format;
use crate::expand::{expand_quantize_with, ExpandError, ExpandedQuantState, ExpansionConfig};
use crate::io::{self, Reader};
use crate::quant::{dequantize, QuantError, QuantGeometry, QuantizedTensor, Quantizer, ScalePrecision, DEFAULT_OPTIMIZER_GROUP};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("shape mismatch: params {params:?}, grads {grads:?}, state holds {state} elements")]
    ShapeMismatch {
        params: Vec<usize>,
        grads: Vec<usize>,
        state: usize,
    },
    #[error("non-finite gradient {value} at flat index {index}")]
    NonFiniteGradient { index: usize, value: f32 },
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error(transparent)]
    Expand(#[from] ExpandError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub lr: f32,
    pub weight_decay: f32,
    pub eps: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            lr: 1e-3,
            weight_decay: 0.0,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let unit = |b: f32| b > 0.0 && b < 1.0;
        if !(unit(self.beta1) && unit(self.beta2)) {
            return Err(OptimError::InvalidPolicy(format!(
                "betas ({}, {}) must lie in (0, 1)",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0 && self.lr.is_finite() && self.weight_decay.is_finite()) {
            return Err(OptimError::InvalidPolicy("eps must be positive, lr and weight decay finite".into()));
        }
        Ok(())
    }
}

/// Storage format of one moment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StateFormat {
    Fp32,
    E4M3,
    E5M2,
    DE8,
}

impl StateFormat {
    pub fn fp8(self) -> Option<Fp8Format> {
        match self {
            StateFormat::Fp32 => None,
            StateFormat::E4M3 => Some(Fp8Format::E4M3),
            StateFormat::E5M2 => Some(Fp8Format::E5M2),
            StateFormat::DE8 => Some(Fp8Format::DE8),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentPolicy {
    pub format: StateFormat,
    pub expand: bool,
    pub group_size: usize,
    #[serde(default)]
    pub expansion: ExpansionConfig,
    #[serde(default)]
    pub scale_precision: ScalePrecision,
}

impl MomentPolicy {
    pub const FP32: MomentPolicy = MomentPolicy {
        format: StateFormat::Fp32,
        expand: false,
        group_size: DEFAULT_OPTIMIZER_GROUP,
        expansion: ExpansionConfig {
            target_range: crate::codec::E4M3_DYNAMIC_RANGE,
            k_max: 20.0,
        },
        scale_precision: ScalePrecision::Bf16,
    };

    pub fn new(format: StateFormat, expand: bool) -> Self {
        Self {
            format,
            expand,
            ..Self::FP32
        }
    }

    pub fn with_group_size(mut self, group_size: usize) -> Self {
        self.group_size = group_size;
        self
    }

    pub fn with_scale_precision(mut self, p: ScalePrecision) -> Self {
        self.scale_precision = p;
        self
    }

    pub fn is_lossless(&self) -> bool {
        self.format == StateFormat::Fp32
    }

    fn validate(&self) -> Result<(), OptimError> {
        if self.group_size == 0 {
            return Err(OptimError::InvalidPolicy("group size must be positive".into()));
        }
        if self.expand && self.format == StateFormat::Fp32 {
            return Err(OptimError::InvalidPolicy("expansion needs an 8-bit format".into()));
        }
        Ok(())
    }

    /// Encode `values` under this policy.
    pub fn store(&self, values: &[f32]) -> Result<MomentState, OptimError> {
        self.validate()?;
        let Some(format) = self.format.fp8() else {
            return Ok(MomentState::Full(Tensor::from_vec(values.to_vec())));
        };
        let g = self.group_size;
        let padded_len = values.len().div_ceil(g) * g;
        let mut padded = values.to_vec();
        padded.resize(padded_len, 0.0);
        let x = Tensor::from_vec(padded);
        let quantizer = Quantizer::new(QuantGeometry::PerGroup(g), format).with_scale_precision(self.scale_precision);
        Ok(if self.expand {
            MomentState::Expanded(expand_quantize_with(&x, &quantizer, &self.expansion)?)
        } else {
            MomentState::Quantized(quantizer.quantize(&x)?)
        })
    }

    /// `values` after a store/load round trip.
    pub fn round_trip(&self, values: &[f32]) -> Result<Vec<f32>, OptimError> {
        Ok(self.store(values)?.load(values.len()))
    }
}

impl fmt::Display for MomentPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.format {
            StateFormat::Fp32 => "FP32",
            StateFormat::E4M3 => "E4M3",
            StateFormat::E5M2 => "E5M2",
            StateFormat::DE8 => "DE8",
        };
        if self.expand {
            write!(f, "{name}+Expand")
        } else {
            f.write_str(name)
        }
    }
}

impl FromStr for MomentPolicy {
    type Err = String;

    /// `FP32`, `E4M3`, `E5M2+Expand`, `de8+expand`, ...
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.trim().to_ascii_uppercase();
        let (name, expand) = match upper.strip_suffix("+EXPAND") {
            Some(n) => (n, true),
            None => (upper.as_str(), false),
        };
        let format = match name {
            "FP32" => StateFormat::Fp32,
            "E4M3" => StateFormat::E4M3,
            "E5M2" => StateFormat::E5M2,
            "DE8" => StateFormat::DE8,
            _ => return Err(format!("unknown moment policy '{s}'")),
        };
        if expand && format == StateFormat::Fp32 {
            return Err("FP32 cannot be expanded".into());
        }
        Ok(MomentPolicy::new(format, expand))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotPolicy {
    pub first: MomentPolicy,
    pub second: MomentPolicy,
}

impl SlotPolicy {
    pub const FP32: SlotPolicy = SlotPolicy {
        first: MomentPolicy::FP32,
        second: MomentPolicy::FP32,
    };

    pub fn new(first: MomentPolicy, second: MomentPolicy) -> Self {
        Self { first, second }
    }

    /// Both moments in E4M3 with range expansion and 1×128 groups.
    pub fn e4m3_expand() -> Self {
        let p = MomentPolicy::new(StateFormat::E4M3, true);
        Self::new(p, p)
    }

    pub fn with_group_size(self, g: usize) -> Self {
        Self::new(self.first.with_group_size(g), self.second.with_group_size(g))
    }

    pub fn with_scale_precision(self, p: ScalePrecision) -> Self {
        Self::new(self.first.with_scale_precision(p), self.second.with_scale_precision(p))
    }
}

impl fmt::Display for SlotPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.first, self.second)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MomentState {
    Full(Tensor),
    Quantized(QuantizedTensor),
    Expanded(ExpandedQuantState),
}

impl MomentState {
    /// First `len` elements in f32.
    pub fn load(&self, len: usize) -> Vec<f32> {
        let mut data = match self {
            MomentState::Full(t) => t.data().to_vec(),
            MomentState::Quantized(q) => dequantize(q).into_data(),
            MomentState::Expanded(s) => s.dequantize().into_data(),
        };
        data.truncate(len);
        data
    }

    pub fn byte_size(&self) -> usize {
        match self {
            MomentState::Full(t) => t.numel() * 4,
            MomentState::Quantized(q) => q.byte_size(),
            MomentState::Expanded(s) => s.byte_size(),
        }
    }
}

/// Moments, step counter and policy for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSlot {
    pub m: MomentState,
    pub v: MomentState,
    pub policy: SlotPolicy,
    /// Completed steps.
    pub step: u64,
    len: usize,
}

impl OptimizerSlot {
    pub fn new(len: usize, policy: SlotPolicy) -> Result<Self, OptimError> {
        if len == 0 {
            return Err(OptimError::InvalidPolicy("empty parameter".into()));
        }
        let zeros = vec![0.0f32; len];
        Ok(Self {
            m: policy.first.store(&zeros)?,
            v: policy.second.store(&zeros)?,
            policy,
            step: 0,
            len,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Dequantized `(m, v)`.
    pub fn moments(&self) -> (Vec<f32>, Vec<f32>) {
        (self.m.load(self.len), self.v.load(self.len))
    }

    pub fn byte_size(&self) -> usize {
        self.m.byte_size() + self.v.byte_size()
    }
}

fn check_step_inputs(params: &Tensor, grads: &Tensor, len: usize) -> Result<(), OptimError> {
    if params.shape() != grads.shape() || params.numel() != len {
        return Err(OptimError::ShapeMismatch {
            params: params.shape().to_vec(),
            grads: grads.shape().to_vec(),
            state: len,
        });
    }
    match grads.data().iter().position(|g| !g.is_finite()) {
        Some(index) => Err(OptimError::NonFiniteGradient {
            index,
            value: grads.data()[index],
        }),
        None => Ok(()),
    }
}

/// One AdamW step: dequantize, update in f32, requantize.
pub fn step(
    params: &Tensor,
    grads: &Tensor,
    slot: &OptimizerSlot,
    cfg: &AdamWConfig,
) -> Result<(Tensor, OptimizerSlot), OptimError> {
    cfg.validate()?;
    check_step_inputs(params, grads, slot.len)?;
    let (mut m, mut v) = slot.moments();
    let t = slot.step + 1;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let mut w = params.data().to_vec();
    for i in 0..w.len() {
        let g = grads.data()[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        w[i] = w[i] - cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * w[i]);
    }
    let next = OptimizerSlot {
        m: slot.policy.first.store(&m)?,
        v: slot.policy.second.store(&v)?,
        policy: slot.policy,
        step: t,
        len: slot.len,
    };
    Ok((Tensor::new(params.shape().to_vec(), w)?, next))
}

/// Plain f32 AdamW kept independent of the slot machinery; the ground truth
/// for quantized runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceAdamW {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
}

impl ReferenceAdamW {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, w: &mut [f32], g: &[f32], cfg: &AdamWConfig) -> Result<(), OptimError> {
        if w.len() != g.len() || w.len() != self.m.len() {
            return Err(OptimError::ShapeMismatch {
                params: vec![w.len()],
                grads: vec![g.len()],
                state: self.m.len(),
            });
        }
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (((w, &g), m), v) in w.iter_mut().zip(g).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w = *w - cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *w);
        }
        Ok(())
    }
}

/// MSE between `m/(sqrt(v)+eps)` computed from the exact moments and from
/// their round trips under `policy`.
pub fn update_direction_mse(policy: &SlotPolicy, m: &Tensor, v: &Tensor, eps: f32) -> Result<f64, OptimError> {
    if m.shape() != v.shape() {
        return Err(OptimError::ShapeMismatch {
            params: m.shape().to_vec(),
            grads: v.shape().to_vec(),
            state: m.numel(),
        });
    }
    if v.data().iter().any(|&x| !(x >= 0.0 && x.is_finite())) || !m.is_finite() {
        return Err(OptimError::InvalidPolicy("reference moments must be finite with v >= 0".into()));
    }
    let mq = policy.first.round_trip(m.data())?;
    let vq = policy.second.round_trip(v.data())?;
    Ok(direction_mse(m.data(), v.data(), &mq, &vq, eps))
}

/// MSE between `m/(sqrt(v)+eps)` and `mq/(sqrt(vq)+eps)`, in f64.
pub fn direction_mse(m: &[f32], v: &[f32], mq: &[f32], vq: &[f32], eps: f32) -> f64 {
    let dir = |m: f32, v: f32| m as f64 / ((v as f64).sqrt() + eps as f64);
    let sum: f64 = (0..m.len())
        .map(|i| {
            let d = dir(mq[i], vq[i]) - dir(m[i], v[i]);
            d * d
        })
        .sum();
    sum / m.len().max(1) as f64
}

const SLOT_MAGIC: [u8; 4] = *b"CSLT";

#[derive(Serialize, Deserialize)]
struct SlotHeader {
    beta1: f32,
    beta2: f32,
    lr: f32,
    weight_decay: f32,
    eps: f32,
    step: u64,
    policy: SlotPolicy,
    len: usize,
}

fn encode_moment(state: &MomentState, out: &mut Vec<u8>) {
    match state {
        MomentState::Full(t) => {
            out.push(0);
            io::encode_tensor(t, out);
        }
        MomentState::Quantized(q) => {
            out.push(1);
            io::encode_quantized(q, out);
        }
        MomentState::Expanded(s) => {
            out.push(2);
            io::encode_expanded(s, out);
        }
    }
}

fn decode_moment(r: &mut Reader<'_>) -> Result<MomentState, TensorError> {
    Ok(match r.u8("state tag")? {
        0 => MomentState::Full(io::decode_tensor(r)?),
        1 => MomentState::Quantized(io::decode_quantized(r)?),
        2 => MomentState::Expanded(io::decode_expanded(r)?),
        t => return Err(TensorError::Malformed(format!("unknown state tag {t}"))),
    })
}

/// Checkpoint: `"CSLT" | header length u32 | JSON header | m record | v record`,
/// each record preceded by a tag byte (0 CTEN, 1 CQT8, 2 CQT8 + EXPK).
pub fn save_slot(slot: &OptimizerSlot, cfg: &AdamWConfig, path: impl AsRef<Path>) -> Result<(), TensorError> {
    let header = SlotHeader {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        eps: cfg.eps,
        step: slot.step,
        policy: slot.policy,
        len: slot.len,
    };
    let json = serde_json::to_vec(&header).map_err(|e| TensorError::Malformed(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(&SLOT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    encode_moment(&slot.m, &mut out);
    encode_moment(&slot.v, &mut out);
    io::write_file(path.as_ref(), &out)
}

pub fn load_slot(path: impl AsRef<Path>) -> Result<(OptimizerSlot, AdamWConfig), TensorError> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes);
    r.magic(SLOT_MAGIC)?;
    let n = r.u32("header length")? as usize;
    let header: SlotHeader =
        serde_json::from_slice(r.take(n, "header")?).map_err(|e| TensorError::Malformed(e.to_string()))?;
    let m = decode_moment(&mut r)?;
    let v = decode_moment(&mut r)?;
    if r.remaining() != 0 {
        return Err(TensorError::Malformed("trailing bytes".into()));
    }
    let cfg = AdamWConfig {
        beta1: header.beta1,
        beta2: header.beta2,
        lr: header.lr,
        weight_decay: header.weight_decay,
        eps: header.eps,
    };
    let slot = OptimizerSlot {
        m,
        v,
        policy: header.policy,
        step: header.step,
        len: header.len,
    };
    Ok((slot, cfg))
}
