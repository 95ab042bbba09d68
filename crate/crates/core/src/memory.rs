//! Analytic activation-memory accounting for one Llama-style decoder layer.
//!
//! Sizes are in units of `U = batch * seq_len * hidden * 2` bytes, i.e. one
//! BF16 copy of the residual stream. Every row is an exact rational; `r`
//! denotes the MLP expansion ratio `intermediate / hidden` (8/3 by default).
//!
//! | row       | BF16          | TE                   | COAT                 |
//! |-----------|---------------|----------------------|----------------------|
//! | RMSNorm   | 2 + 2 (fp32)  | 1 + 1                | 0.5 + 0.5            |
//! | Act func  | 3r            | 3r                   | 1.5r                 |
//! | RoPE      | 2             | 2                    | 2                    |
//! | FlashAttn | 3             | 3                    | 3                    |
//! | Linear    | 1 + 1 + 1 + r | 0.5 + 1 + 0.5 + 0.5r | 0.5 + 1 + 0.5 + 0.5r |
//!
//! The attention output is saved once in BF16 and shared with the output
//! projection; it is counted under Linear.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Frac = Ratio<i64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MemoryError {
    #[error("invalid memory spec: {0}")]
    InvalidSpec(String),
    #[error("measured {measured} bytes vs predicted {predicted}: overhead {overhead:.4} exceeds bound {bound:.4}")]
    MismatchBeyondBound {
        measured: u64,
        predicted: u64,
        overhead: f64,
        bound: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Operator {
    RmsNorm,
    ActFunc,
    Rope,
    FlashAttn,
    Linear,
}

impl Operator {
    pub const ALL: [Operator; 5] = [
        Operator::RmsNorm,
        Operator::ActFunc,
        Operator::Rope,
        Operator::FlashAttn,
        Operator::Linear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Operator::RmsNorm => "RMSNorm",
            Operator::ActFunc => "ActFunc",
            Operator::Rope => "RoPE",
            Operator::FlashAttn => "FlashAttn",
            Operator::Linear => "Linear",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MemPolicy {
    Bf16,
    Te,
    Coat,
}

impl MemPolicy {
    pub const ALL: [MemPolicy; 3] = [MemPolicy::Bf16, MemPolicy::Te, MemPolicy::Coat];

    pub fn name(self) -> &'static str {
        match self {
            MemPolicy::Bf16 => "BF16",
            MemPolicy::Te => "TE",
            MemPolicy::Coat => "COAT",
        }
    }
}

impl fmt::Display for MemPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MemPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "BF16" => Ok(MemPolicy::Bf16),
            "TE" => Ok(MemPolicy::Te),
            "COAT" => Ok(MemPolicy::Coat),
            _ => Err(format!("unknown memory policy '{s}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemorySpec {
    pub batch: usize,
    pub seq_len: usize,
    pub hidden: usize,
    /// `intermediate / hidden` as a reduced fraction.
    pub mlp_ratio: (i64, i64),
    pub policy: MemPolicy,
    /// Add analytic scale bytes (BF16, one per group and per tensor).
    pub include_scales: bool,
    pub group_size: usize,
}

impl MemorySpec {
    pub fn new(batch: usize, seq_len: usize, hidden: usize, policy: MemPolicy) -> Self {
        Self {
            batch,
            seq_len,
            hidden,
            mlp_ratio: (8, 3),
            policy,
            include_scales: false,
            group_size: 16,
        }
    }

    fn validate(&self) -> Result<Frac, MemoryError> {
        if self.batch == 0 || self.seq_len == 0 || self.hidden == 0 || self.group_size == 0 {
            return Err(MemoryError::InvalidSpec("dimensions must be positive".into()));
        }
        let (n, d) = self.mlp_ratio;
        if n <= 0 || d <= 0 {
            return Err(MemoryError::InvalidSpec(format!("mlp ratio {n}/{d} must be positive")));
        }
        Ok(Frac::new(n, d))
    }

    pub fn unit_bytes(&self) -> u64 {
        (self.batch * self.seq_len * self.hidden * 2) as u64
    }

    pub fn tokens(&self) -> u64 {
        (self.batch * self.seq_len) as u64
    }
}

/// Per-operator size in `U` for one policy.
pub fn operator_units(policy: MemPolicy, op: Operator, r: Frac) -> Frac {
    let f = |n: i64, d: i64| Frac::new(n, d);
    let one = f(1, 1);
    let half = f(1, 2);
    match (policy, op) {
        (MemPolicy::Bf16, Operator::RmsNorm) => f(4, 1),
        (MemPolicy::Te, Operator::RmsNorm) => f(2, 1),
        (MemPolicy::Coat, Operator::RmsNorm) => one,
        (MemPolicy::Bf16 | MemPolicy::Te, Operator::ActFunc) => r * 3,
        (MemPolicy::Coat, Operator::ActFunc) => r * f(3, 2),
        (_, Operator::Rope) => f(2, 1),
        (_, Operator::FlashAttn) => f(3, 1),
        (MemPolicy::Bf16, Operator::Linear) => one + one + one + r,
        (MemPolicy::Te | MemPolicy::Coat, Operator::Linear) => half + one + half + r * half,
    }
}

/// Analytic scale bytes per operator row.
fn scale_bytes(spec: &MemorySpec, op: Operator, r: Frac) -> u64 {
    let th = spec.tokens() * spec.hidden as u64;
    let ti = (Frac::from_integer(th as i64) * r).to_integer() as u64;
    let g = spec.group_size as u64;
    match (spec.policy, op) {
        (MemPolicy::Coat, Operator::RmsNorm) => 2 * (2 * th / g),
        (MemPolicy::Coat, Operator::ActFunc) => 2 * (3 * ti / g),
        // qkv input, up/gate input, down input, attention-output scale
        (MemPolicy::Te | MemPolicy::Coat, Operator::Linear) => 2 * 4,
        _ => 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryRow {
    pub operator: Operator,
    #[serde(serialize_with = "ser_frac")]
    pub units: Frac,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    pub spec: MemorySpec,
    pub rows: Vec<MemoryRow>,
    #[serde(serialize_with = "ser_frac")]
    pub total_units: Frac,
    pub total_bytes: u64,
    /// BF16 total over this policy's total, exact.
    #[serde(serialize_with = "ser_frac")]
    pub ratio: Frac,
}

fn ser_frac<S: serde::Serializer>(f: &Frac, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{}/{}", f.numer(), f.denom()))
}

impl MemoryReport {
    /// Ratio as rendered in reports: both totals truncated to two decimals,
    /// their quotient truncated again.
    pub fn display_ratio(&self, bf16_total: Frac) -> String {
        let a = trunc2(bf16_total);
        let b = trunc2(self.total_units);
        let q = Frac::new(a.numer() * b.denom(), a.denom() * b.numer());
        render2(q)
    }
}

/// Truncate toward zero to two decimals.
pub fn trunc2(f: Frac) -> Frac {
    Frac::new((f * 100).to_integer(), 100)
}

/// Two-decimal rendering by truncation (22.666… → "22.66").
pub fn render2(f: Frac) -> String {
    let hundredths = (f * 100).to_integer();
    format!("{}.{:02}", hundredths / 100, (hundredths % 100).abs())
}

pub fn predict(spec: &MemorySpec) -> Result<MemoryReport, MemoryError> {
    let r = spec.validate()?;
    let unit = spec.unit_bytes() as i64;
    let rows: Vec<MemoryRow> = Operator::ALL
        .iter()
        .map(|&op| {
            let units = operator_units(spec.policy, op, r);
            let mut bytes = (units * unit).to_integer() as u64;
            if spec.include_scales {
                bytes += scale_bytes(spec, op, r);
            }
            MemoryRow {
                operator: op,
                units,
                bytes,
            }
        })
        .collect();
    let total_units = rows.iter().fold(Frac::from_integer(0), |a, row| a + row.units);
    let bf16_total = Operator::ALL
        .iter()
        .fold(Frac::from_integer(0), |a, &op| a + operator_units(MemPolicy::Bf16, op, r));
    Ok(MemoryReport {
        spec: *spec,
        total_bytes: rows.iter().map(|row| row.bytes).sum(),
        rows,
        total_units,
        ratio: bf16_total / total_units,
    })
}

/// Measured-vs-analytic comparison for one flow tape.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reconciliation {
    pub policy: MemPolicy,
    pub group_size: usize,
    pub predicted_bytes: u64,
    pub measured_bytes: u64,
    /// Bytes of 8-bit payload in the tape.
    pub quantized_payload: u64,
    /// `(measured - predicted) / quantized_payload`, zero without payload.
    pub overhead: f64,
    /// `2 / G`: BF16 scale bytes per 8-bit payload byte.
    pub bound: f64,
}

/// Compare analytic bytes with a tape's measured bytes. The only admissible
/// difference is scale storage, at most `2/G` of the 8-bit payload.
pub fn reconcile(
    spec: &MemorySpec,
    measured_bytes: u64,
    quantized_payload: u64,
) -> Result<Reconciliation, MemoryError> {
    let plain = MemorySpec {
        include_scales: false,
        ..*spec
    };
    let predicted = predict(&plain)?.total_bytes;
    let bound = 2.0 / spec.group_size as f64;
    let overhead = if quantized_payload == 0 {
        if measured_bytes == predicted {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (measured_bytes as f64 - predicted as f64) / quantized_payload as f64
    };
    if measured_bytes < predicted || overhead > bound {
        return Err(MemoryError::MismatchBeyondBound {
            measured: measured_bytes,
            predicted,
            overhead,
            bound,
        });
    }
    Ok(Reconciliation {
        policy: spec.policy,
        group_size: spec.group_size,
        predicted_bytes: predicted,
        measured_bytes,
        quantized_payload,
        overhead,
        bound,
    })
}
