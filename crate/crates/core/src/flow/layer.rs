use std::collections::HashMap;

use rand_distr::{Distribution, Normal};

use crate::codec::round_bf16;
use crate::memory::Operator;
use crate::quant::{dequantize, QuantGeometry, QuantizedTensor, Quantizer};
use crate::rng;
use crate::tensor::{mse, Tensor};

use super::ops::{self, AttnDims};
use super::tape::{LayerTape, SavedActivation, Storage};
use super::{FlowError, FlowPolicy, LayerSpec};

/// f32 master weights, row-major `[in, out]`, so `y = x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub norm1: Vec<f32>,
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub norm2: Vec<f32>,
    pub wg: Vec<f32>,
    pub wu: Vec<f32>,
    pub wd: Vec<f32>,
}

impl LayerWeights {
    /// Gaussian weights with variance `1 / fan_in`; unit norm weights.
    pub fn random(spec: &LayerSpec, seed: u64) -> Self {
        let mut rng = rng::stream(seed, 10);
        let mut draw = |fan_in: usize, n: usize| {
            let dist = Normal::new(0.0f32, 1.0 / (fan_in as f32).sqrt()).expect("positive std");
            (0..n).map(|_| dist.sample(&mut rng)).collect::<Vec<f32>>()
        };
        let (h, i) = (spec.hidden, spec.intermediate);
        Self {
            norm1: vec![1.0; h],
            wq: draw(h, h * h),
            wk: draw(h, h * h),
            wv: draw(h, h * h),
            wo: draw(h, h * h),
            norm2: vec![1.0; h],
            wg: draw(h, h * i),
            wu: draw(h, h * i),
            wd: draw(i, i * h),
        }
    }

    /// Every projection zero: both residual branches contribute nothing.
    pub fn zero_body(spec: &LayerSpec) -> Self {
        let (h, i) = (spec.hidden, spec.intermediate);
        Self {
            norm1: vec![1.0; h],
            wq: vec![0.0; h * h],
            wk: vec![0.0; h * h],
            wv: vec![0.0; h * h],
            wo: vec![0.0; h * h],
            norm2: vec![1.0; h],
            wg: vec![0.0; h * i],
            wu: vec![0.0; h * i],
            wd: vec![0.0; i * h],
        }
    }

    fn check(&self, spec: &LayerSpec) -> Result<(), FlowError> {
        let (h, i) = (spec.hidden, spec.intermediate);
        let expect = [
            ("norm1", self.norm1.len(), h),
            ("wq", self.wq.len(), h * h),
            ("wk", self.wk.len(), h * h),
            ("wv", self.wv.len(), h * h),
            ("wo", self.wo.len(), h * h),
            ("norm2", self.norm2.len(), h),
            ("wg", self.wg.len(), h * i),
            ("wu", self.wu.len(), h * i),
            ("wd", self.wd.len(), i * h),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(FlowError::ShapeMismatch(format!("{name} holds {got} values, expected {want}")));
            }
        }
        let all = [
            &self.norm1, &self.wq, &self.wk, &self.wv, &self.wo, &self.norm2, &self.wg, &self.wu, &self.wd,
        ];
        if all.iter().any(|w| w.iter().any(|v| !v.is_finite())) {
            return Err(FlowError::NonFinite("weights"));
        }
        Ok(())
    }
}

/// Gradients of a scalar loss with respect to the layer input and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub dx: Tensor,
    pub norm1: Vec<f32>,
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub norm2: Vec<f32>,
    pub wg: Vec<f32>,
    pub wu: Vec<f32>,
    pub wd: Vec<f32>,
}

impl LayerGrads {
    pub fn named(&self) -> [(&'static str, &[f32]); 10] {
        [
            ("dx", self.dx.data()),
            ("norm1", &self.norm1),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("norm2", &self.norm2),
            ("wg", &self.wg),
            ("wu", &self.wu),
            ("wd", &self.wd),
        ]
    }
}

/// Per-tensor weight scales for one gradient-accumulation cycle.
///
/// The first use of a weight computes its scale; later forward and backward
/// passes requantize the f32 master weight against the cached scale. Call
/// [`WeightCache::invalidate`] after the weights change.
#[derive(Debug, Clone, Default)]
pub struct WeightCache {
    scales: HashMap<&'static str, f32>,
    computations: usize,
}

impl WeightCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of weight scales computed so far.
    pub fn computations(&self) -> usize {
        self.computations
    }

    pub fn invalidate(&mut self) {
        self.scales.clear();
    }

    fn weight(
        &mut self,
        name: &'static str,
        w: &[f32],
        rows: usize,
        cols: usize,
        spec: &LayerSpec,
    ) -> Result<Vec<f32>, FlowError> {
        match spec.policy {
            FlowPolicy::Reference => Ok(w.to_vec()),
            FlowPolicy::Bf16 => Ok(w.iter().map(|&v| round_bf16(v)).collect()),
            FlowPolicy::Te | FlowPolicy::Coat => {
                let q = linear_quantizer(spec);
                let scale = match self.scales.get(name) {
                    Some(&s) => s,
                    None => {
                        self.computations += 1;
                        let s = q.scale_for(w.iter().fold(0.0f32, |m, v| m.max(v.abs())));
                        self.scales.insert(name, s);
                        s
                    }
                };
                let t = Tensor::new(vec![rows, cols], w.to_vec()).expect("checked sizes");
                Ok(dequantize(&q.quantize_with(&t, vec![scale])?).into_data())
            }
        }
    }
}

fn linear_quantizer(spec: &LayerSpec) -> Quantizer {
    Quantizer::new(QuantGeometry::PerTensor, spec.format).with_scale_precision(spec.scale_precision)
}

fn nonlinear_quantizer(spec: &LayerSpec) -> Quantizer {
    Quantizer::new(spec.nonlinear, spec.format).with_scale_precision(spec.scale_precision)
}

/// Quantize a `[rows, cols]` activation, padding rows with zeros up to a
/// whole number of blocks when the geometry tiles the token axis.
fn quantize_rows(
    v: &[f32],
    rows: usize,
    cols: usize,
    q: &Quantizer,
    scale: Option<f32>,
) -> Result<(QuantizedTensor, Vec<f32>), FlowError> {
    let padded_rows = match q.geometry {
        QuantGeometry::PerBlock(b) => rows.div_ceil(b) * b,
        _ => rows,
    };
    let mut data = v.to_vec();
    data.resize(padded_rows * cols, 0.0);
    let t = Tensor::new(vec![padded_rows, cols], data).map_err(|e| FlowError::ShapeMismatch(e.to_string()))?;
    let qt = match scale {
        Some(s) => q.quantize_with(&t, vec![s])?,
        None => q.quantize(&t)?,
    };
    let mut back = dequantize(&qt).into_data();
    back.truncate(rows * cols);
    Ok((qt, back))
}

/// Offsets `rounded - exact` at every rounding and quantization site of one
/// forward pass. Replaying them turns the forward into a smooth function
/// whose derivative is what the straight-through backward computes.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenRounding {
    offsets: Vec<Vec<f32>>,
    fingerprint: String,
}

impl FrozenRounding {
    pub fn sites(&self) -> usize {
        self.offsets.len()
    }
}

enum Mode<'a> {
    Record(Vec<Vec<f32>>),
    Replay(&'a [Vec<f32>], usize),
}

struct Fwd<'a, 's> {
    mode: Mode<'a>,
    tape: Option<LayerTape>,
    spec: &'s LayerSpec,
}

impl Fwd<'_, '_> {
    fn recording(&self) -> bool {
        matches!(self.mode, Mode::Record(_))
    }

    fn offset(&mut self, exact: Vec<f32>, rounded: impl FnOnce(&[f32]) -> Vec<f32>) -> Result<Vec<f32>, FlowError> {
        match &mut self.mode {
            Mode::Record(offsets) => {
                let r = rounded(&exact);
                offsets.push(r.iter().zip(&exact).map(|(a, b)| a - b).collect());
                Ok(r)
            }
            Mode::Replay(offsets, cursor) => {
                let d = offsets
                    .get(*cursor)
                    .filter(|d| d.len() == exact.len())
                    .ok_or_else(|| FlowError::ShapeMismatch("frozen rounding does not match this layer".into()))?;
                *cursor += 1;
                Ok(exact.iter().zip(d).map(|(a, b)| a + b).collect())
            }
        }
    }

    /// BF16 rounding site; a no-op under the f32 reference policy.
    fn bf16(&mut self, v: Vec<f32>) -> Result<Vec<f32>, FlowError> {
        if self.spec.policy == FlowPolicy::Reference {
            return Ok(v);
        }
        self.offset(v, |x| x.iter().map(|&a| round_bf16(a)).collect())
    }

    fn bf16_in_place(&mut self, buf: &mut [f32]) -> Result<(), FlowError> {
        if self.spec.policy != FlowPolicy::Reference {
            let r = self.bf16(buf.to_vec())?;
            buf.copy_from_slice(&r);
        }
        Ok(())
    }

    /// 8-bit quantization site; when recording, the codes are saved under
    /// `save` as `[rows, cols]` or, for linear inputs, transposed.
    fn fp8(
        &mut self,
        v: Vec<f32>,
        rows: usize,
        cols: usize,
        q: &Quantizer,
        save: Option<(&'static str, Operator, bool)>,
    ) -> Result<Vec<f32>, FlowError> {
        let mut saved = None;
        let mut err = None;
        let out = self.offset(v, |x| match quantize_rows(x, rows, cols, q, None) {
            Ok((qt, back)) => {
                saved = Some(qt);
                back
            }
            Err(e) => {
                err = Some(e);
                x.to_vec()
            }
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        if let (Some(qt), Some((name, op, transposed))) = (saved, save) {
            let qt = if transposed { qt.transposed().expect("per-tensor 2-D") } else { qt };
            self.keep(name, op, Storage::Fp8 {
                q: qt,
                rows,
                transposed,
            });
        }
        Ok(out)
    }

    fn keep(&mut self, name: &'static str, operator: Operator, storage: Storage) -> Option<usize> {
        let tape = self.tape.as_mut()?;
        Some(tape.push(name, SavedActivation { name, operator, storage }))
    }

    /// Save a BF16- or f32-held activation according to the policy.
    fn keep_dense(&mut self, name: &'static str, operator: Operator, v: &[f32], rows: usize, cols: usize, f32_save: bool) {
        if !self.recording() {
            return;
        }
        let t = Tensor::new(vec![rows, cols], v.to_vec()).expect("activation shape");
        let storage = if f32_save || self.spec.policy == FlowPolicy::Reference {
            Storage::F32(t)
        } else {
            Storage::Bf16(t)
        };
        self.keep(name, operator, storage);
    }
}

fn check_input(x: &Tensor, spec: &LayerSpec) -> Result<(), FlowError> {
    let want = [spec.batch, spec.seq_len, spec.hidden];
    if x.shape() != want {
        return Err(FlowError::ShapeMismatch(format!("input {:?}, layer expects {want:?}", x.shape())));
    }
    if !x.is_finite() {
        return Err(FlowError::NonFinite("layer input"));
    }
    Ok(())
}

fn attn_dims(spec: &LayerSpec) -> AttnDims {
    AttnDims {
        batch: spec.batch,
        seq_len: spec.seq_len,
        heads: spec.heads,
        head_dim: spec.head_dim(),
    }
}

fn run(x: &Tensor, w: &LayerWeights, cache: &mut WeightCache, f: &mut Fwd<'_, '_>) -> Result<Tensor, FlowError> {
    let spec = *f.spec;
    spec.validate()?;
    check_input(x, &spec)?;
    w.check(&spec)?;
    let (t, h, i) = (spec.tokens(), spec.hidden, spec.intermediate);
    let policy = spec.policy;
    let fp8_linear = matches!(policy, FlowPolicy::Te | FlowPolicy::Coat);
    let lin = linear_quantizer(&spec);
    let nl = nonlinear_quantizer(&spec);
    let xd = x.data().to_vec();

    // attention block
    let x_n = match policy {
        FlowPolicy::Coat => f.fp8(xd.clone(), t, h, &nl, Some(("norm1.in", Operator::RmsNorm, false)))?,
        FlowPolicy::Te => {
            let v = f.bf16(xd.clone())?;
            f.keep_dense("norm1.in", Operator::RmsNorm, &v, t, h, false);
            v
        }
        FlowPolicy::Bf16 | FlowPolicy::Reference => {
            f.keep_dense("norm1.in", Operator::RmsNorm, &xd, t, h, true);
            xd.clone()
        }
    };
    let h1 = ops::rmsnorm(&x_n, &w.norm1, h);
    let h1 = linear_input(f, h1, t, h, &lin, "qkv.in")?;
    let wq = cache.weight("wq", &w.wq, h, h, &spec)?;
    let wk = cache.weight("wk", &w.wk, h, h, &spec)?;
    let wv = cache.weight("wv", &w.wv, h, h, &spec)?;
    let q = f.bf16(ops::matmul(&h1, &wq, t, h, h))?;
    let k = f.bf16(ops::matmul(&h1, &wk, t, h, h))?;
    let v = f.bf16(ops::matmul(&h1, &wv, t, h, h))?;
    f.keep_dense("rope.in.q", Operator::Rope, &q, t, h, false);
    f.keep_dense("rope.in.k", Operator::Rope, &k, t, h, false);
    let qr = f.bf16(ops::rope(&q, spec.seq_len, spec.heads, spec.head_dim(), 1.0))?;
    let kr = f.bf16(ops::rope(&k, spec.seq_len, spec.heads, spec.head_dim(), 1.0))?;
    f.keep_dense("attn.q", Operator::FlashAttn, &qr, t, h, false);
    f.keep_dense("attn.k", Operator::FlashAttn, &kr, t, h, false);
    f.keep_dense("attn.v", Operator::FlashAttn, &v, t, h, false);
    let mut site_err = None;
    let o = ops::attention(&qr, &kr, &v, attn_dims(&spec), &mut |buf| {
        if let Err(e) = f.bf16_in_place(buf) {
            site_err.get_or_insert(e);
        }
    });
    if let Some(e) = site_err {
        return Err(e);
    }
    // The attention output is saved once and shared with the output
    // projection; an 8-bit consumer keeps only the scale and requantizes.
    let o_in = if fp8_linear {
        let scale = lin.scale_for(o.iter().fold(0.0f32, |m, v| m.max(v.abs())));
        if f.recording() {
            let t_o = Tensor::new(vec![t, h], o.clone()).expect("shape");
            let idx = f.keep(
                "attn.out",
                Operator::Linear,
                Storage::Bf16Scaled {
                    t: t_o,
                    scale,
                    precision: spec.scale_precision,
                },
            );
            if let (Some(tape), Some(idx)) = (f.tape.as_mut(), idx) {
                tape.alias("attn_proj.in", idx);
            }
        }
        let o_copy = o.clone();
        let mut err = None;
        let r = f.offset(o_copy, |x| match quantize_rows(x, t, h, &lin, Some(scale)) {
            Ok((_, back)) => back,
            Err(e) => {
                err = Some(e);
                x.to_vec()
            }
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        r
    } else {
        f.keep_dense("attn.out", Operator::Linear, &o, t, h, false);
        if let Some(tape) = f.tape.as_mut() {
            let idx = tape.record_for("attn.out").expect("just saved");
            tape.alias("attn_proj.in", idx);
        }
        o
    };
    let wo = cache.weight("wo", &w.wo, h, h, &spec)?;
    let attn_out = f.bf16(ops::matmul(&o_in, &wo, t, h, h))?;
    let r1 = f.bf16(ops::add(&xd, &attn_out))?;

    // MLP block
    let r1_n = match policy {
        FlowPolicy::Coat => f.fp8(r1.clone(), t, h, &nl, Some(("norm2.in", Operator::RmsNorm, false)))?,
        FlowPolicy::Te => {
            f.keep_dense("norm2.in", Operator::RmsNorm, &r1, t, h, false);
            r1.clone()
        }
        FlowPolicy::Bf16 | FlowPolicy::Reference => {
            f.keep_dense("norm2.in", Operator::RmsNorm, &r1, t, h, true);
            r1.clone()
        }
    };
    let h2 = ops::rmsnorm(&r1_n, &w.norm2, h);
    let h2 = linear_input(f, h2, t, h, &lin, "gate_up.in")?;
    let wg = cache.weight("wg", &w.wg, h, i, &spec)?;
    let wu = cache.weight("wu", &w.wu, h, i, &spec)?;
    let g = ops::matmul(&h2, &wg, t, h, i);
    let u = ops::matmul(&h2, &wu, t, h, i);
    let (g, u) = if policy == FlowPolicy::Coat {
        (
            f.fp8(g, t, i, &nl, Some(("silu.in", Operator::ActFunc, false)))?,
            f.fp8(u, t, i, &nl, Some(("mul.in.u", Operator::ActFunc, false)))?,
        )
    } else {
        let g = f.bf16(g)?;
        let u = f.bf16(u)?;
        f.keep_dense("silu.in", Operator::ActFunc, &g, t, i, false);
        f.keep_dense("mul.in.u", Operator::ActFunc, &u, t, i, false);
        (g, u)
    };
    let s: Vec<f32> = g.iter().map(|&v| ops::silu(v)).collect();
    let s = if policy == FlowPolicy::Coat {
        f.fp8(s, t, i, &nl, Some(("mul.in.s", Operator::ActFunc, false)))?
    } else {
        let s = f.bf16(s)?;
        f.keep_dense("mul.in.s", Operator::ActFunc, &s, t, i, false);
        s
    };
    let a: Vec<f32> = s.iter().zip(&u).map(|(a, b)| a * b).collect();
    let a = linear_input(f, a, t, i, &lin, "down.in")?;
    let wd = cache.weight("wd", &w.wd, i, h, &spec)?;
    let down = f.bf16(ops::matmul(&a, &wd, t, i, h))?;
    let y = f.bf16(ops::add(&r1, &down))?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(FlowError::NonFinite("layer output"));
    }
    Ok(Tensor::new(x.shape().to_vec(), y).expect("input shape"))
}

/// Linear-layer input: per-tensor 8-bit (saved transposed) for TE and COAT,
/// BF16 or f32 otherwise.
fn linear_input(
    f: &mut Fwd<'_, '_>,
    v: Vec<f32>,
    rows: usize,
    cols: usize,
    lin: &Quantizer,
    name: &'static str,
) -> Result<Vec<f32>, FlowError> {
    match f.spec.policy {
        FlowPolicy::Te | FlowPolicy::Coat => f.fp8(v, rows, cols, lin, Some((name, Operator::Linear, true))),
        FlowPolicy::Bf16 | FlowPolicy::Reference => {
            let v = f.bf16(v)?;
            f.keep_dense(name, Operator::Linear, &v, rows, cols, false);
            Ok(v)
        }
    }
}

/// Forward pass; the tape holds everything backward needs.
pub fn forward(x: &Tensor, w: &LayerWeights, spec: &LayerSpec, cache: &mut WeightCache) -> Result<(Tensor, LayerTape), FlowError> {
    let (y, tape, _) = forward_frozen(x, w, spec, cache)?;
    Ok((y, tape))
}

/// [`forward`] that also returns the rounding offsets it applied.
pub fn forward_frozen(
    x: &Tensor,
    w: &LayerWeights,
    spec: &LayerSpec,
    cache: &mut WeightCache,
) -> Result<(Tensor, LayerTape, FrozenRounding), FlowError> {
    let mut f = Fwd {
        mode: Mode::Record(Vec::new()),
        tape: Some(LayerTape::new(spec.fingerprint())),
        spec,
    };
    let y = run(x, w, cache, &mut f)?;
    let Mode::Record(offsets) = f.mode else { unreachable!() };
    let tape = f.tape.expect("recording keeps a tape");
    Ok((
        y,
        tape,
        FrozenRounding {
            offsets,
            fingerprint: spec.fingerprint(),
        },
    ))
}

/// The forward with every rounding site replaced by `exact + frozen offset`.
/// At the point where the offsets were recorded this reproduces the
/// quantized forward; elsewhere it is the smooth surrogate that the
/// straight-through backward differentiates.
pub fn emulated_forward(
    x: &Tensor,
    w: &LayerWeights,
    spec: &LayerSpec,
    frozen: &FrozenRounding,
    cache: &mut WeightCache,
) -> Result<Tensor, FlowError> {
    if frozen.fingerprint != spec.fingerprint() {
        return Err(FlowError::TapeMismatch {
            tape: frozen.fingerprint.clone(),
            spec: spec.fingerprint(),
        });
    }
    let mut f = Fwd {
        mode: Mode::Replay(&frozen.offsets, 0),
        tape: None,
        spec,
    };
    let y = run(x, w, cache, &mut f)?;
    match f.mode {
        Mode::Replay(offsets, used) if used == offsets.len() => Ok(y),
        _ => Err(FlowError::ShapeMismatch("frozen rounding does not match this layer".into())),
    }
}

/// Backward pass from `dy` using only what the tape saved. Every gradient
/// handed from one operator to the next is rounded to BF16 unless the policy
/// is the f32 reference or `spec.bf16_grads` is off.
pub fn backward(
    dy: &Tensor,
    tape: &LayerTape,
    w: &LayerWeights,
    spec: &LayerSpec,
    cache: &mut WeightCache,
) -> Result<LayerGrads, FlowError> {
    spec.validate()?;
    if tape.fingerprint != spec.fingerprint() {
        return Err(FlowError::TapeMismatch {
            tape: tape.fingerprint.clone(),
            spec: spec.fingerprint(),
        });
    }
    check_input(dy, spec).map_err(|e| match e {
        FlowError::NonFinite(_) => FlowError::NonFinite("output gradient"),
        other => other,
    })?;
    w.check(spec)?;
    let (t, h, i) = (spec.tokens(), spec.hidden, spec.intermediate);
    let lowp = spec.policy != FlowPolicy::Reference;
    let round = lowp && spec.bf16_grads;
    let gr = |v: Vec<f32>| -> Vec<f32> {
        if round {
            v.into_iter().map(round_bf16).collect()
        } else {
            v
        }
    };
    let mul = |a: &[f32], b: &[f32]| -> Vec<f32> { a.iter().zip(b).map(|(x, y)| x * y).collect() };

    let dy = gr(dy.data().to_vec());

    // down projection and SiLU·mul
    let wd = cache.weight("wd", &w.wd, i, h, spec)?;
    let dwd = gr(ops::matmul(&tape.get("down.in").value_t(), &dy, i, t, h));
    let da = gr(ops::matmul_nt(&dy, &wd, t, h, i));
    let s = tape.get("mul.in.s").value();
    let u = tape.get("mul.in.u").value();
    let ds = gr(mul(&da, &u));
    let du = gr(mul(&da, &s));
    let g = tape.get("silu.in").value();
    let dg = gr(ds.iter().zip(&g).map(|(d, &x)| d * ops::silu_grad(x)).collect());

    // gate/up projections
    let h2_t = tape.get("gate_up.in").value_t();
    let wg = cache.weight("wg", &w.wg, h, i, spec)?;
    let wu = cache.weight("wu", &w.wu, h, i, spec)?;
    let dwg = gr(ops::matmul(&h2_t, &dg, h, t, i));
    let dwu = gr(ops::matmul(&h2_t, &du, h, t, i));
    let dh2 = gr(ops::add(&ops::matmul_nt(&dg, &wg, t, i, h), &ops::matmul_nt(&du, &wu, t, i, h)));
    let (dr1_n, dn2) = ops::rmsnorm_backward(&tape.get("norm2.in").value(), &w.norm2, &dh2, h);
    let dr1 = gr(ops::add(&dy, &gr(dr1_n)));

    // output projection
    let o_rec = tape.get("attn_proj.in");
    let o_t = match &o_rec.storage {
        Storage::Bf16Scaled { t: o, scale, .. } => {
            let (_, back) = quantize_rows(o.data(), t, h, &linear_quantizer(spec), Some(*scale))?;
            ops::transpose(&back, t, h)
        }
        _ => o_rec.value_t(),
    };
    let wo = cache.weight("wo", &w.wo, h, h, spec)?;
    let dwo = gr(ops::matmul(&o_t, &dr1, h, t, h));
    let d_o = gr(ops::matmul_nt(&dr1, &wo, t, h, h));

    // attention and RoPE
    let (qr, kr, v) = (tape.get("attn.q").value(), tape.get("attn.k").value(), tape.get("attn.v").value());
    let (dqr, dkr, dv) = ops::attention_backward(&qr, &kr, &v, &d_o, attn_dims(spec), &mut |buf| {
        if lowp {
            buf.iter_mut().for_each(|x| *x = round_bf16(*x));
        }
    });
    let (dqr, dkr, dv) = (gr(dqr), gr(dkr), gr(dv));
    let dq = gr(ops::rope(&dqr, spec.seq_len, spec.heads, spec.head_dim(), -1.0));
    let dk = gr(ops::rope(&dkr, spec.seq_len, spec.heads, spec.head_dim(), -1.0));

    // QKV projections
    let h1_t = tape.get("qkv.in").value_t();
    let wq = cache.weight("wq", &w.wq, h, h, spec)?;
    let wk = cache.weight("wk", &w.wk, h, h, spec)?;
    let wv = cache.weight("wv", &w.wv, h, h, spec)?;
    let dwq = gr(ops::matmul(&h1_t, &dq, h, t, h));
    let dwk = gr(ops::matmul(&h1_t, &dk, h, t, h));
    let dwv = gr(ops::matmul(&h1_t, &dv, h, t, h));
    let dh1 = ops::add(
        &ops::add(&ops::matmul_nt(&dq, &wq, t, h, h), &ops::matmul_nt(&dk, &wk, t, h, h)),
        &ops::matmul_nt(&dv, &wv, t, h, h),
    );
    let dh1 = gr(dh1);
    let (dx_n, dn1) = ops::rmsnorm_backward(&tape.get("norm1.in").value(), &w.norm1, &dh1, h);
    let dx = gr(ops::add(&dr1, &gr(dx_n)));
    if dx.iter().any(|v| !v.is_finite()) {
        return Err(FlowError::NonFinite("input gradient"));
    }
    Ok(LayerGrads {
        dx: Tensor::new(vec![spec.batch, spec.seq_len, h], dx).expect("input shape"),
        norm1: gr(dn1),
        wq: dwq,
        wk: dwk,
        wv: dwv,
        wo: dwo,
        norm2: gr(dn2),
        wg: dwg,
        wu: dwu,
        wd: dwd,
    })
}

/// Error an RMSNorm sees when its `[tokens, channels]` input is stored at
/// `quantizer`'s granularity: MSE between the unit-weight RMSNorm of `x` and
/// of its quantized round trip.
pub fn norm_input_error(x: &Tensor, quantizer: &Quantizer) -> Result<f64, FlowError> {
    if x.rank() != 2 {
        return Err(FlowError::ShapeMismatch(format!("expected [tokens, channels], got {:?}", x.shape())));
    }
    let (rows, cols) = (x.shape()[0], x.shape()[1]);
    let (_, back) = quantize_rows(x.data(), rows, cols, quantizer, None)?;
    let ones = vec![1.0f32; cols];
    Ok(mse(&ops::rmsnorm(x.data(), &ones, cols), &ops::rmsnorm(&back, &ones, cols)))
}
