//! Tensor-level quantize/dequantize at per-tensor, per-group (1×G) and
//! per-block (B×B) granularity.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{round_bf16, Fp8Format};
use crate::par;
use crate::tensor::{mse, Tensor};

pub const DEFAULT_ACTIVATION_GROUP: usize = 16;
pub const DEFAULT_OPTIMIZER_GROUP: usize = 128;

// element chunk used when a whole tensor shares one scale
const FLAT_CHUNK: usize = 1 << 14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f32 },
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuantGeometry {
    PerTensor,
    /// Contiguous runs of `G` elements along the last axis.
    PerGroup(usize),
    /// `B×B` tiles over the last two axes.
    PerBlock(usize),
}

impl std::fmt::Display for QuantGeometry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QuantGeometry::PerTensor => write!(f, "per-tensor"),
            QuantGeometry::PerGroup(g) => write!(f, "1x{g}"),
            QuantGeometry::PerBlock(b) => write!(f, "{b}x{b}"),
        }
    }
}

/// How scaling factors are stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum ScalePrecision {
    /// Scales rounded to BF16; codes are computed against the rounded scale.
    #[default]
    Bf16,
    Fp32,
}

impl ScalePrecision {
    pub fn bytes(self) -> usize {
        match self {
            ScalePrecision::Bf16 => 2,
            ScalePrecision::Fp32 => 4,
        }
    }

    fn apply(self, s: f32) -> f32 {
        let s = match self {
            ScalePrecision::Bf16 => round_bf16(s),
            ScalePrecision::Fp32 => s,
        };
        // keep scales strictly positive even for groups of tiny subnormals
        s.max(f32::MIN_POSITIVE)
    }
}

/// Element-to-group assignment for one geometry over one shape.
///
/// The flat index space is cut into equal panels, each owning
/// `groups_per_panel` consecutive groups, so per-group work can be split at
/// panel boundaries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupMap {
    geometry: QuantGeometry,
    numel: usize,
    groups: usize,
    panel_len: usize,
    groups_per_panel: usize,
    cols: usize,
}

impl GroupMap {
    pub fn new(geometry: QuantGeometry, shape: &[usize]) -> Result<Self, QuantError> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel == 0 {
            return Err(QuantError::GeometryMismatch(format!("empty shape {shape:?}")));
        }
        let cols = shape[shape.len() - 1];
        match geometry {
            QuantGeometry::PerTensor => Ok(Self {
                geometry,
                numel,
                groups: 1,
                panel_len: numel,
                groups_per_panel: 1,
                cols,
            }),
            QuantGeometry::PerGroup(g) => {
                if g == 0 || cols % g != 0 {
                    return Err(QuantError::GeometryMismatch(format!(
                        "last dim {cols} not divisible by group size {g}"
                    )));
                }
                Ok(Self {
                    geometry,
                    numel,
                    groups: numel / g,
                    panel_len: g,
                    groups_per_panel: 1,
                    cols,
                })
            }
            QuantGeometry::PerBlock(b) => {
                if shape.len() < 2 {
                    return Err(QuantError::GeometryMismatch(format!(
                        "block quantization needs rank >= 2, got {shape:?}"
                    )));
                }
                let rows = shape[shape.len() - 2];
                if b == 0 || rows % b != 0 || cols % b != 0 {
                    return Err(QuantError::GeometryMismatch(format!(
                        "last two dims {rows}x{cols} not divisible by block size {b}"
                    )));
                }
                Ok(Self {
                    geometry,
                    numel,
                    groups: numel / (b * b),
                    panel_len: b * cols,
                    groups_per_panel: cols / b,
                    cols,
                })
            }
        }
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn group_of(&self, index: usize) -> usize {
        match self.geometry {
            QuantGeometry::PerTensor => 0,
            QuantGeometry::PerGroup(g) => index / g,
            QuantGeometry::PerBlock(b) => {
                (index / self.panel_len) * self.groups_per_panel + (index % self.cols) / b
            }
        }
    }

    /// Per-group fold, evaluated panel by panel and returned in group order.
    /// `merge` combines partial accumulators of a single shared group and
    /// must be associative and commutative (max/min style).
    pub(crate) fn fold<A, F, M>(&self, data: &[f32], init: A, f: F, merge: M) -> Vec<A>
    where
        A: Clone + Send + Sync,
        F: Fn(A, f32) -> A + Sync + Send,
        M: Fn(A, A) -> A,
    {
        debug_assert_eq!(data.len(), self.numel);
        if self.groups == 1 {
            let parts = par::map_chunks(data, FLAT_CHUNK, |_, c| {
                c.iter().fold(init.clone(), |a, &v| f(a, v))
            });
            return vec![parts.into_iter().reduce(merge).unwrap_or(init)];
        }
        par::map_chunks(data, self.panel_len, |p, chunk| {
            let mut acc = vec![init.clone(); self.groups_per_panel];
            for (j, &v) in chunk.iter().enumerate() {
                let local = self.group_of(p * self.panel_len + j) - p * self.groups_per_panel;
                acc[local] = f(acc[local].clone(), v);
            }
            acc
        })
        .into_iter()
        .flatten()
        .collect()
    }

    pub(crate) fn absmax(&self, data: &[f32]) -> Vec<f32> {
        self.fold(data, 0.0f32, |m, v| m.max(v.abs()), f32::max)
    }

    /// `f(group, value)` for every element, in flat order.
    pub(crate) fn map<T, R, F>(&self, data: &[T], f: F) -> Vec<R>
    where
        T: Copy + Sync,
        R: Send,
        F: Fn(usize, T) -> R + Sync + Send,
    {
        let chunk = if self.groups == 1 { FLAT_CHUNK } else { self.panel_len };
        par::map_chunks(data, chunk, |p, c| {
            c.iter()
                .enumerate()
                .map(|(j, &v)| f(self.group_of(p * chunk + j), v))
                .collect::<Vec<_>>()
        })
        .into_iter()
        .flatten()
        .collect()
    }
}

/// Largest and smallest nonzero magnitude of a group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbsStats {
    pub max: f32,
    /// `f32::INFINITY` when the group holds only zeros.
    pub min_nonzero: f32,
}

impl AbsStats {
    pub const EMPTY: AbsStats = AbsStats {
        max: 0.0,
        min_nonzero: f32::INFINITY,
    };

    pub fn push(self, v: f32) -> Self {
        let a = v.abs();
        Self {
            max: self.max.max(a),
            min_nonzero: if a > 0.0 { self.min_nonzero.min(a) } else { self.min_nonzero },
        }
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            max: self.max.max(other.max),
            min_nonzero: self.min_nonzero.min(other.min_nonzero),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.max == 0.0
    }
}

pub fn group_stats(data: &[f32], map: &GroupMap) -> Vec<AbsStats> {
    map.fold(data, AbsStats::EMPTY, AbsStats::push, AbsStats::merge)
}

/// Result of quantizing a tensor: one code byte per element plus one scale
/// per group.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    codes: Vec<u8>,
    scales: Vec<f32>,
    geometry: QuantGeometry,
    format: Fp8Format,
    shape: Vec<usize>,
    scale_precision: ScalePrecision,
}

impl QuantizedTensor {
    /// Reassemble from stored parts, checking every structural invariant.
    pub fn from_parts(
        codes: Vec<u8>,
        scales: Vec<f32>,
        geometry: QuantGeometry,
        format: Fp8Format,
        shape: Vec<usize>,
        scale_precision: ScalePrecision,
    ) -> Result<Self, QuantError> {
        let map = GroupMap::new(geometry, &shape)?;
        if codes.len() != map.numel {
            return Err(QuantError::GeometryMismatch(format!(
                "{} codes for shape {shape:?}",
                codes.len()
            )));
        }
        if scales.len() != map.groups {
            return Err(QuantError::GeometryMismatch(format!(
                "{} scales for {} groups",
                scales.len(),
                map.groups
            )));
        }
        if let Some((index, &value)) = scales
            .iter()
            .enumerate()
            .find(|(_, s)| !(s.is_finite() && **s > 0.0))
        {
            return Err(QuantError::NonFinite { index, value });
        }
        Ok(Self {
            codes,
            scales,
            geometry,
            format,
            shape,
            scale_precision,
        })
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn geometry(&self) -> QuantGeometry {
        self.geometry
    }

    pub fn format(&self) -> Fp8Format {
        self.format
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn scale_precision(&self) -> ScalePrecision {
        self.scale_precision
    }

    pub fn numel(&self) -> usize {
        self.codes.len()
    }

    pub fn group_map(&self) -> GroupMap {
        GroupMap::new(self.geometry, &self.shape).expect("validated at construction")
    }

    /// Storage cost: one byte per code plus the scales at their precision.
    pub fn byte_size(&self) -> usize {
        self.codes.len() + self.scales.len() * self.scale_precision.bytes()
    }

    pub fn payload_bytes(&self) -> usize {
        self.codes.len()
    }

    pub fn scale_bytes(&self) -> usize {
        self.scales.len() * self.scale_precision.bytes()
    }

    /// Column-major copy of a per-tensor 2-D record. Rounding commutes with
    /// transposition, so this equals quantizing the transposed source.
    pub fn transposed(&self) -> Option<QuantizedTensor> {
        if self.geometry != QuantGeometry::PerTensor || self.shape.len() != 2 {
            return None;
        }
        let (rows, cols) = (self.shape[0], self.shape[1]);
        let mut codes = vec![0u8; self.codes.len()];
        for r in 0..rows {
            for c in 0..cols {
                codes[c * rows + r] = self.codes[r * cols + c];
            }
        }
        Some(QuantizedTensor {
            codes,
            scales: self.scales.clone(),
            geometry: self.geometry,
            format: self.format,
            shape: vec![cols, rows],
            scale_precision: self.scale_precision,
        })
    }

    pub fn dequantize(&self) -> Tensor {
        dequantize(self)
    }
}

/// Quantization settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantizer {
    pub geometry: QuantGeometry,
    pub format: Fp8Format,
    pub scale_precision: ScalePrecision,
}

impl Quantizer {
    pub fn new(geometry: QuantGeometry, format: Fp8Format) -> Self {
        Self {
            geometry,
            format,
            scale_precision: ScalePrecision::Bf16,
        }
    }

    pub fn with_scale_precision(mut self, p: ScalePrecision) -> Self {
        self.scale_precision = p;
        self
    }

    /// Scale for a group with the given absmax.
    pub fn scale_for(&self, absmax: f32) -> f32 {
        if absmax == 0.0 {
            self.scale_precision.apply(self.format.delta_min())
        } else {
            self.scale_precision.apply(absmax / self.format.delta_max())
        }
    }

    pub fn quantize(&self, x: &Tensor) -> Result<QuantizedTensor, QuantError> {
        check_finite(x.data())?;
        let map = GroupMap::new(self.geometry, x.shape())?;
        let absmax = map.absmax(x.data());
        let scales: Vec<f32> = absmax.iter().map(|&a| self.scale_for(a)).collect();
        self.quantize_with_scales(x, &map, scales)
    }

    /// Quantize against caller-supplied scales (e.g. a cached weight scale).
    pub fn quantize_with(&self, x: &Tensor, scales: Vec<f32>) -> Result<QuantizedTensor, QuantError> {
        check_finite(x.data())?;
        let map = GroupMap::new(self.geometry, x.shape())?;
        if scales.len() != map.groups {
            return Err(QuantError::GeometryMismatch(format!(
                "{} scales supplied for {} groups",
                scales.len(),
                map.groups
            )));
        }
        self.quantize_with_scales(x, &map, scales)
    }

    fn quantize_with_scales(
        &self,
        x: &Tensor,
        map: &GroupMap,
        scales: Vec<f32>,
    ) -> Result<QuantizedTensor, QuantError> {
        let format = self.format;
        let codes = map.map(x.data(), |g, v| format.encode_saturating(v / scales[g]));
        QuantizedTensor::from_parts(
            codes,
            scales,
            self.geometry,
            format,
            x.shape().to_vec(),
            self.scale_precision,
        )
    }
}

fn check_finite(data: &[f32]) -> Result<(), QuantError> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(QuantError::NonFinite {
            index,
            value: data[index],
        }),
        None => Ok(()),
    }
}

/// Quantize with BF16 scales.
pub fn quantize(x: &Tensor, geometry: QuantGeometry, format: Fp8Format) -> Result<QuantizedTensor, QuantError> {
    Quantizer::new(geometry, format).quantize(x)
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let map = q.group_map();
    let mut table = [0.0f32; 256];
    for (byte, slot) in table.iter_mut().enumerate() {
        *slot = q.format.decode(byte as u8);
    }
    let data = map.map(&q.codes, |g, b| table[b as usize] * q.scales[g]);
    Tensor::new(q.shape.clone(), data).expect("shape validated")
}

/// Two-stage absmax: per-1×G maxima, then the maximum of those.
pub fn group_scale_max(x: &Tensor, group_size: usize) -> Result<(Tensor, f32), QuantError> {
    let map = GroupMap::new(QuantGeometry::PerGroup(group_size), x.shape())?;
    let partial = map.absmax(x.data());
    let global = partial.iter().fold(0.0f32, |m, &v| m.max(v));
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") /= group_size;
    Ok((Tensor::new(shape, partial).expect("group count"), global))
}

/// Round-trip mean squared error.
pub fn quantization_error(x: &Tensor, geometry: QuantGeometry, format: Fp8Format) -> Result<f64, QuantError> {
    let q = quantize(x, geometry, format)?;
    Ok(mse(x.data(), dequantize(&q).data()))
}
