//! Little-endian binary records.
//!
//! ```text
//! CTEN  "CTEN" | version u16 | rank u16 | dims u64 * rank | f32 * numel
//! CQT8  "CQT8" | version u16 | format u8 | geometry kind u8 | size u32
//!       | scale precision u8 | rank u16 | dims u64 * rank
//!       | scales f32 * groups | codes u8 * numel
//! EXPK  "EXPK" | count u32 | (k f32, c f32) * count
//! ```
//!
//! Geometry kinds: 0 per-tensor (size 0), 1 per-group (size G),
//! 2 per-block (size B). Scale precision: 0 BF16, 1 FP32; scales are always
//! written as f32 so a BF16-rounded scale round-trips exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::codec::Fp8Format;
use crate::expand::{ExpandedQuantState, ExpansionParams};
use crate::quant::{GroupMap, QuantGeometry, QuantizedTensor, ScalePrecision};
use crate::tensor::{checked_numel, Tensor, TensorError};

pub const TENSOR_MAGIC: [u8; 4] = *b"CTEN";
pub const QUANT_MAGIC: [u8; 4] = *b"CQT8";
pub const EXPK_MAGIC: [u8; 4] = *b"EXPK";
pub const VERSION: u16 = 1;

// Cursor over an in-memory record stream.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len()
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], TensorError> {
        if self.buf.len() < n {
            return Err(TensorError::Malformed(format!("truncated {what}")));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8, TensorError> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16, TensorError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32, TensorError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64, TensorError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>, TensorError> {
        let bytes = self.take(n * 4, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<(), TensorError> {
        let found: [u8; 4] = self.take(4, "magic")?.try_into().unwrap();
        if found != expected {
            return Err(TensorError::BadMagic { expected, found });
        }
        Ok(())
    }

    fn version(&mut self) -> Result<(), TensorError> {
        match self.u16("version")? {
            VERSION => Ok(()),
            v => Err(TensorError::UnsupportedVersion(v)),
        }
    }

    fn shape(&mut self) -> Result<Vec<usize>, TensorError> {
        let rank = self.u16("rank")? as usize;
        let shape = (0..rank)
            .map(|_| {
                let d = self.u64("dims")?;
                usize::try_from(d).map_err(|_| TensorError::Malformed(format!("dimension {d} too large")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        checked_numel(&shape)?;
        Ok(shape)
    }
}

fn put_shape(out: &mut Vec<u8>, shape: &[usize]) {
    out.extend_from_slice(&(shape.len() as u16).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_shape(out, t.shape());
    put_f32s(out, t.data());
}

pub(crate) fn decode_tensor(r: &mut Reader<'_>) -> Result<Tensor, TensorError> {
    r.magic(TENSOR_MAGIC)?;
    r.version()?;
    let shape = r.shape()?;
    let expected = checked_numel(&shape)?;
    if r.remaining() < expected * 4 {
        return Err(TensorError::ShapeMismatch {
            shape,
            expected,
            actual: r.remaining() / 4,
        });
    }
    let data = r.f32s(expected, "payload")?;
    Tensor::new(shape, data)
}

fn geometry_fields(g: QuantGeometry) -> (u8, u32) {
    match g {
        QuantGeometry::PerTensor => (0, 0),
        QuantGeometry::PerGroup(n) => (1, n as u32),
        QuantGeometry::PerBlock(n) => (2, n as u32),
    }
}

fn geometry_from(kind: u8, size: u32) -> Result<QuantGeometry, TensorError> {
    match kind {
        0 => Ok(QuantGeometry::PerTensor),
        1 => Ok(QuantGeometry::PerGroup(size as usize)),
        2 => Ok(QuantGeometry::PerBlock(size as usize)),
        k => Err(TensorError::Malformed(format!("unknown geometry kind {k}"))),
    }
}

pub fn encode_quantized(q: &QuantizedTensor, out: &mut Vec<u8>) {
    out.extend_from_slice(&QUANT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(q.format().tag());
    let (kind, size) = geometry_fields(q.geometry());
    out.push(kind);
    out.extend_from_slice(&size.to_le_bytes());
    out.push(match q.scale_precision() {
        ScalePrecision::Bf16 => 0,
        ScalePrecision::Fp32 => 1,
    });
    put_shape(out, q.shape());
    put_f32s(out, q.scales());
    out.extend_from_slice(q.codes());
}

pub(crate) fn decode_quantized(r: &mut Reader<'_>) -> Result<QuantizedTensor, TensorError> {
    r.magic(QUANT_MAGIC)?;
    r.version()?;
    let tag = r.u8("format")?;
    let format = Fp8Format::from_tag(tag).ok_or_else(|| TensorError::Malformed(format!("unknown format tag {tag}")))?;
    let kind = r.u8("geometry")?;
    let size = r.u32("geometry size")?;
    let geometry = geometry_from(kind, size)?;
    let precision = match r.u8("scale precision")? {
        0 => ScalePrecision::Bf16,
        1 => ScalePrecision::Fp32,
        p => return Err(TensorError::Malformed(format!("unknown scale precision {p}"))),
    };
    let shape = r.shape()?;
    let map = GroupMap::new(geometry, &shape).map_err(|e| TensorError::Malformed(e.to_string()))?;
    let numel = checked_numel(&shape)?;
    let need = map.groups() * 4 + numel;
    if r.remaining() < need {
        return Err(TensorError::ShapeMismatch {
            shape,
            expected: need,
            actual: r.remaining(),
        });
    }
    let scales = r.f32s(map.groups(), "scales")?;
    let codes = r.take(numel, "codes")?.to_vec();
    QuantizedTensor::from_parts(codes, scales, geometry, format, shape, precision)
        .map_err(|e| TensorError::Malformed(e.to_string()))
}

pub fn encode_expanded(s: &ExpandedQuantState, out: &mut Vec<u8>) {
    encode_quantized(&s.quantized, out);
    out.extend_from_slice(&EXPK_MAGIC);
    out.extend_from_slice(&(s.params.len() as u32).to_le_bytes());
    for p in &s.params {
        out.extend_from_slice(&p.k.to_le_bytes());
        out.extend_from_slice(&p.c.to_le_bytes());
    }
}

pub(crate) fn decode_expanded(r: &mut Reader<'_>) -> Result<ExpandedQuantState, TensorError> {
    let quantized = decode_quantized(r)?;
    r.magic(EXPK_MAGIC)?;
    let count = r.u32("group count")? as usize;
    let raw = r.f32s(count * 2, "expansion parameters")?;
    let params = raw
        .chunks_exact(2)
        .map(|p| ExpansionParams { k: p[0], c: p[1] })
        .collect();
    ExpandedQuantState::new(quantized, params).map_err(|e| TensorError::Malformed(e.to_string()))
}

fn finish<T>(r: Reader<'_>, value: T) -> Result<T, TensorError> {
    if r.remaining() != 0 {
        return Err(TensorError::Malformed(format!("{} trailing bytes", r.remaining())));
    }
    Ok(value)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), TensorError> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<(), TensorError> {
    let mut out = Vec::with_capacity(16 + t.numel() * 4);
    encode_tensor(t, &mut out);
    write_file(path.as_ref(), &out)
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor, TensorError> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes);
    let t = decode_tensor(&mut r)?;
    if r.remaining() != 0 {
        return Err(TensorError::ShapeMismatch {
            shape: t.shape().to_vec(),
            expected: t.numel(),
            actual: t.numel() + r.remaining() / 4,
        });
    }
    Ok(t)
}

pub fn save_quantized(q: &QuantizedTensor, path: impl AsRef<Path>) -> Result<(), TensorError> {
    let mut out = Vec::new();
    encode_quantized(q, &mut out);
    write_file(path.as_ref(), &out)
}

pub fn load_quantized(path: impl AsRef<Path>) -> Result<QuantizedTensor, TensorError> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes);
    let q = decode_quantized(&mut r)?;
    finish(r, q)
}

pub fn save_expanded(s: &ExpandedQuantState, path: impl AsRef<Path>) -> Result<(), TensorError> {
    let mut out = Vec::new();
    encode_expanded(s, &mut out);
    write_file(path.as_ref(), &out)
}

pub fn load_expanded(path: impl AsRef<Path>) -> Result<ExpandedQuantState, TensorError> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes);
    let s = decode_expanded(&mut r)?;
    finish(r, s)
}
