use crate::memory::Operator;
use crate::quant::{dequantize, QuantizedTensor, ScalePrecision};
use crate::tensor::Tensor;

use super::ops::transpose;

/// How a saved activation is held.
#[derive(Debug, Clone, PartialEq)]
pub enum Storage {
    /// 4 bytes per element.
    F32(Tensor),
    /// BF16 values widened to f32, counted at 2 bytes per element.
    Bf16(Tensor),
    /// 8-bit codes. `rows` is the logical row count of the `[rows, cols]`
    /// activation; block-quantized records may carry padding rows beyond it.
    /// Transposed records hold the `[cols, rows]` layout used by weight
    /// gradients.
    Fp8 {
        q: QuantizedTensor,
        rows: usize,
        transposed: bool,
    },
    /// BF16 values plus the per-tensor scale their 8-bit consumer uses, so
    /// the consumer can requantize on the fly instead of storing a copy.
    Bf16Scaled {
        t: Tensor,
        scale: f32,
        precision: ScalePrecision,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SavedActivation {
    pub name: &'static str,
    pub operator: Operator,
    pub storage: Storage,
}

impl SavedActivation {
    pub fn bytes(&self) -> u64 {
        (match &self.storage {
            Storage::F32(t) => t.numel() * 4,
            Storage::Bf16(t) => t.numel() * 2,
            Storage::Fp8 { q, .. } => q.byte_size(),
            Storage::Bf16Scaled { t, precision, .. } => t.numel() * 2 + precision.bytes(),
        }) as u64
    }

    /// 8-bit payload bytes (codes only).
    pub fn quantized_payload(&self) -> u64 {
        match &self.storage {
            Storage::Fp8 { q, .. } => q.payload_bytes() as u64,
            _ => 0,
        }
    }

    pub fn scale_bytes(&self) -> u64 {
        match &self.storage {
            Storage::Fp8 { q, .. } => q.scale_bytes() as u64,
            Storage::Bf16Scaled { precision, .. } => precision.bytes() as u64,
            _ => 0,
        }
    }

    fn cols(&self) -> usize {
        match &self.storage {
            Storage::F32(t) | Storage::Bf16(t) | Storage::Bf16Scaled { t, .. } => t.last_dim(),
            Storage::Fp8 { q, transposed, .. } => {
                if *transposed {
                    q.shape()[0]
                } else {
                    q.shape()[1]
                }
            }
        }
    }

    /// The activation in `[rows, cols]` layout as the backward pass sees it.
    pub fn value(&self) -> Vec<f32> {
        match &self.storage {
            Storage::F32(t) | Storage::Bf16(t) | Storage::Bf16Scaled { t, .. } => t.data().to_vec(),
            Storage::Fp8 { q, rows, transposed } => {
                let d = dequantize(q).into_data();
                if *transposed {
                    transpose(&d, q.shape()[0], q.shape()[1])
                } else {
                    d[..rows * self.cols()].to_vec()
                }
            }
        }
    }

    /// The activation in `[cols, rows]` layout.
    pub fn value_t(&self) -> Vec<f32> {
        match &self.storage {
            Storage::Fp8 {
                q, transposed: true, ..
            } => dequantize(q).into_data(),
            _ => {
                let v = self.value();
                let cols = self.cols();
                transpose(&v, v.len() / cols, cols)
            }
        }
    }
}

/// Everything one forward pass keeps for its backward pass.
///
/// Records are stored once; `uses` maps each operator input or output name
/// to the record that serves it, so a tensor shared by two operators appears
/// in two uses but one record.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTape {
    pub(crate) records: Vec<SavedActivation>,
    pub(crate) uses: Vec<(&'static str, usize)>,
    pub(crate) fingerprint: String,
}

impl LayerTape {
    pub(crate) fn new(fingerprint: String) -> Self {
        Self {
            records: Vec::new(),
            uses: Vec::new(),
            fingerprint,
        }
    }

    pub(crate) fn push(&mut self, use_name: &'static str, record: SavedActivation) -> usize {
        self.records.push(record);
        let idx = self.records.len() - 1;
        self.uses.push((use_name, idx));
        idx
    }

    pub(crate) fn alias(&mut self, use_name: &'static str, idx: usize) {
        self.uses.push((use_name, idx));
    }

    pub fn records(&self) -> &[SavedActivation] {
        &self.records
    }

    /// Index of the record serving `use_name`.
    pub fn record_for(&self, use_name: &str) -> Option<usize> {
        self.uses.iter().find(|(n, _)| *n == use_name).map(|&(_, i)| i)
    }

    pub(crate) fn get(&self, use_name: &str) -> &SavedActivation {
        &self.records[self.record_for(use_name).expect("tape built by forward")]
    }

    pub fn bytes_by_operator(&self) -> Vec<(Operator, u64)> {
        Operator::ALL
            .iter()
            .map(|&op| {
                let b = self.records.iter().filter(|r| r.operator == op).map(|r| r.bytes()).sum();
                (op, b)
            })
            .collect()
    }

    pub fn quantized_payload(&self) -> u64 {
        self.records.iter().map(|r| r.quantized_payload()).sum()
    }

    pub fn scale_bytes(&self) -> u64 {
        self.records.iter().map(|r| r.scale_bytes()).sum()
    }
}

/// Exact bytes held by the tape: codes, scales and higher-precision saves.
pub fn tape_bytes(tape: &LayerTape) -> u64 {
    tape.records.iter().map(|r| r.bytes()).sum()
}
