//! Dynamic range expansion for optimizer-state quantization.
//!
//! A group with dynamic range `R` (absmax over smallest nonzero magnitude) is
//! mapped through `f(x) = sign(x) * |x / c|^k` before quantization, with `k`
//! chosen so that `R^k` matches the target range of the storage format and
//! `c = sqrt(absmin * absmax)`. Normalizing by `c` centers the group's
//! magnitudes around one (absmin/c and absmax/c are reciprocals), so raising
//! to a large power neither underflows the small end nor overflows the large
//! end. Absmax scaling in the quantizer absorbs `c^k`, so the code bytes are
//! the same as for the unnormalized transform.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Fp8Format, E4M3_DYNAMIC_RANGE};
use crate::quant::{dequantize, group_stats, GroupMap, QuantError, QuantGeometry, QuantizedTensor, Quantizer};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExpandError {
    #[error("group holds only zeros; dynamic range is undefined")]
    AllZeroGroup,
    #[error("dynamic range {0} <= 1 gives no usable exponent")]
    DegenerateRange(f64),
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f32 },
    #[error("invalid expansion parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpansionConfig {
    /// Range the expanded group should span.
    pub target_range: f64,
    pub k_max: f64,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self {
            target_range: E4M3_DYNAMIC_RANGE,
            k_max: 20.0,
        }
    }
}

impl ExpansionConfig {
    /// Exponent for a measured range, clamped to `[1, k_max]`. Ranges at or
    /// below one yield `k = 1` with the degenerate flag set.
    pub fn k_for(&self, range: f64) -> (f64, bool) {
        if range.is_nan() || range <= 1.0 {
            return (1.0, true);
        }
        let k = self.target_range.ln() / range.ln();
        (k.clamp(1.0, self.k_max), false)
    }
}

/// Per-group transform parameters as stored next to the codes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpansionParams {
    pub k: f32,
    pub c: f32,
}

impl ExpansionParams {
    pub const IDENTITY: ExpansionParams = ExpansionParams { k: 1.0, c: 1.0 };

    fn validate(&self) -> Result<(), ExpandError> {
        if !(self.k.is_finite() && self.k >= 1.0 && self.c.is_finite() && self.c > 0.0) {
            return Err(ExpandError::InvalidParams(format!("k={} c={}", self.k, self.c)));
        }
        Ok(())
    }
}

/// Parameters chosen for one group plus the measurement behind them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupPlan {
    pub params: ExpansionParams,
    /// `NaN` for an all-zero group.
    pub measured_range: f64,
    pub degenerate: bool,
}

/// Ratio of largest to smallest nonzero magnitude.
pub fn dynamic_range(group: &[f32]) -> Result<f64, ExpandError> {
    let (mut max, mut min) = (0.0f64, f64::INFINITY);
    for &v in group {
        let a = (v as f64).abs();
        if a > 0.0 {
            max = max.max(a);
            min = min.min(a);
        }
    }
    if max == 0.0 {
        return Err(ExpandError::AllZeroGroup);
    }
    Ok(max / min)
}

/// Exponent that maps `range` onto the E4M3 range, clamped to `[1, 20]`.
pub fn optimal_k(range: f64) -> Result<f64, ExpandError> {
    match ExpansionConfig::default().k_for(range) {
        (_, true) => Err(ExpandError::DegenerateRange(range)),
        (k, false) => Ok(k),
    }
}

/// Measure each group of `x` and choose its `(k, c)`.
pub fn plan(x: &Tensor, geometry: QuantGeometry, cfg: &ExpansionConfig) -> Result<Vec<GroupPlan>, ExpandError> {
    check_finite(x)?;
    let map = GroupMap::new(geometry, x.shape())?;
    Ok(group_stats(x.data(), &map)
        .into_iter()
        .map(|s| {
            if s.is_zero() {
                return GroupPlan {
                    params: ExpansionParams::IDENTITY,
                    measured_range: f64::NAN,
                    degenerate: true,
                };
            }
            let (max, min) = (s.max as f64, s.min_nonzero as f64);
            let range = max / min;
            let (k, degenerate) = cfg.k_for(range);
            GroupPlan {
                params: ExpansionParams {
                    k: k as f32,
                    c: (min * max).sqrt() as f32,
                },
                measured_range: range,
                degenerate,
            }
        })
        .collect())
}

fn check_finite(x: &Tensor) -> Result<(), ExpandError> {
    match x.data().iter().position(|v| !v.is_finite()) {
        Some(index) => Err(ExpandError::NonFinite {
            index,
            value: x.data()[index],
        }),
        None => Ok(()),
    }
}

fn apply(
    x: &Tensor,
    geometry: QuantGeometry,
    params: &[ExpansionParams],
    f: impl Fn(f64, ExpansionParams) -> f64 + Sync + Send,
) -> Result<Tensor, ExpandError> {
    check_finite(x)?;
    let map = GroupMap::new(geometry, x.shape())?;
    if params.len() != map.groups() {
        return Err(ExpandError::InvalidParams(format!(
            "{} parameter pairs for {} groups",
            params.len(),
            map.groups()
        )));
    }
    for p in params {
        p.validate()?;
    }
    let data: Vec<f32> = map.map(x.data(), |g, v| {
        let mag = f((v as f64).abs(), params[g]) as f32;
        if v.is_sign_negative() {
            -mag
        } else {
            mag
        }
    });
    let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
    check_finite(&out)?;
    Ok(out)
}

/// `sign(x) * |x / c|^k` per group.
pub fn expand(x: &Tensor, geometry: QuantGeometry, params: &[ExpansionParams]) -> Result<Tensor, ExpandError> {
    apply(x, geometry, params, |a, p| (a / p.c as f64).powf(p.k as f64))
}

/// Inverse of [`expand`]: `sign(y) * |y|^(1/k) * c`.
pub fn contract(y: &Tensor, geometry: QuantGeometry, params: &[ExpansionParams]) -> Result<Tensor, ExpandError> {
    apply(y, geometry, params, |a, p| a.powf(1.0 / p.k as f64) * p.c as f64)
}

/// Quantized codes of the expanded tensor plus the per-group `(k, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedQuantState {
    pub quantized: QuantizedTensor,
    pub params: Vec<ExpansionParams>,
}

impl ExpandedQuantState {
    pub fn new(quantized: QuantizedTensor, params: Vec<ExpansionParams>) -> Result<Self, ExpandError> {
        let groups = quantized.group_map().groups();
        if params.len() != groups {
            return Err(ExpandError::InvalidParams(format!(
                "{} parameter pairs for {groups} groups",
                params.len()
            )));
        }
        for p in &params {
            p.validate()?;
        }
        Ok(Self { quantized, params })
    }

    /// Codes and scales plus 8 bytes of `(k, c)` per group.
    pub fn byte_size(&self) -> usize {
        self.quantized.byte_size() + self.params.len() * 8
    }

    pub fn dequantize(&self) -> Tensor {
        dequantize_contract(self).expect("validated state")
    }
}

/// Per-group `Q(f(x))` with `k` and `c` measured from `x` itself.
pub fn expand_quantize(x: &Tensor, group_size: usize, format: Fp8Format) -> Result<ExpandedQuantState, ExpandError> {
    expand_quantize_with(
        x,
        &Quantizer::new(QuantGeometry::PerGroup(group_size), format),
        &ExpansionConfig::default(),
    )
}

pub fn expand_quantize_with(
    x: &Tensor,
    quantizer: &Quantizer,
    cfg: &ExpansionConfig,
) -> Result<ExpandedQuantState, ExpandError> {
    let params: Vec<ExpansionParams> = plan(x, quantizer.geometry, cfg)?
        .into_iter()
        .map(|p| p.params)
        .collect();
    let expanded = expand(x, quantizer.geometry, &params)?;
    let quantized = quantizer.quantize(&expanded)?;
    Ok(ExpandedQuantState { quantized, params })
}

/// `f^-1(DQ(codes, S))`.
pub fn dequantize_contract(state: &ExpandedQuantState) -> Result<Tensor, ExpandError> {
    let y = dequantize(&state.quantized);
    contract(&y, state.quantized.geometry(), &state.params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_group(k: f32, c: f32) -> Vec<ExpansionParams> {
        vec![ExpansionParams { k, c }]
    }

    #[test]
    fn range_examples() {
        assert_eq!(dynamic_range(&[1.0, 2.0, 4.0]).unwrap(), 4.0);
        assert_eq!(dynamic_range(&[1.0, -2.0, 4.0, 8.0]).unwrap(), 8.0);
        assert_eq!(dynamic_range(&[0.0, 3.0, -0.75]).unwrap(), 4.0);
        assert_eq!(dynamic_range(&[0.0, 0.0]), Err(ExpandError::AllZeroGroup));
    }

    #[test]
    fn optimal_k_examples() {
        assert_eq!(optimal_k(E4M3_DYNAMIC_RANGE).unwrap(), 1.0);
        let k = optimal_k(8.0).unwrap();
        assert!((k - 5.9358).abs() < 1e-4);
        assert!((8f64.powf(k) / E4M3_DYNAMIC_RANGE - 1.0).abs() < 1e-3);
        assert_eq!(optimal_k(1e9).unwrap(), 1.0);
        assert_eq!(optimal_k(1.0), Err(ExpandError::DegenerateRange(1.0)));
        // very narrow groups hit the cap
        assert_eq!(optimal_k(1.0001).unwrap(), 20.0);
    }

    #[test]
    fn expand_contract_examples() {
        let x = Tensor::from_vec(vec![-2.0]);
        let y = expand(&x, QuantGeometry::PerTensor, &one_group(3.0, 1.0)).unwrap();
        assert_eq!(y.data(), &[-8.0]);
        let back = contract(&y, QuantGeometry::PerTensor, &one_group(3.0, 1.0)).unwrap();
        assert_eq!(back.data(), &[-2.0]);
        let id = Tensor::from_vec(vec![0.3, -7.0, 0.0]);
        let same = expand(&id, QuantGeometry::PerTensor, &one_group(1.0, 1.0)).unwrap();
        assert!(same.bitwise_eq(&id));
    }

    #[test]
    fn expanded_group_spans_target_range() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 4.0, 8.0]);
        let plans = plan(&x, QuantGeometry::PerTensor, &ExpansionConfig::default()).unwrap();
        let params: Vec<_> = plans.iter().map(|p| p.params).collect();
        assert_eq!(plans[0].measured_range, 8.0);
        let y = expand(&x, QuantGeometry::PerTensor, &params).unwrap();
        let r = dynamic_range(y.data()).unwrap();
        assert!((r / E4M3_DYNAMIC_RANGE - 1.0).abs() < 1e-3, "{r}");
    }

    #[test]
    fn all_zero_group_passes_through() {
        let x = Tensor::from_vec(vec![0.0; 8]);
        let state = expand_quantize(&x, 4, Fp8Format::E4M3).unwrap();
        assert!(state.params.iter().all(|p| *p == ExpansionParams::IDENTITY));
        assert!(state.dequantize().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_params() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        assert!(matches!(
            expand(&x, QuantGeometry::PerTensor, &one_group(0.5, 1.0)),
            Err(ExpandError::InvalidParams(_))
        ));
        assert!(expand(&x, QuantGeometry::PerTensor, &one_group(2.0, 0.0)).is_err());
        assert!(expand(&x, QuantGeometry::PerGroup(1), &one_group(2.0, 1.0)).is_err());
    }
}
