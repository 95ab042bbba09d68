//! Reference checks for the layer: finite differences against the emulated
//! forward, and a configuration on which every quantizer is lossless.

use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::codec::round_bf16;
use crate::quant::ScalePrecision;
use crate::rng;
use crate::tensor::Tensor;

use super::layer::{backward, emulated_forward, forward_frozen, LayerWeights, WeightCache};
use super::{FlowError, LayerSpec};

/// Outcome of a directional finite-difference check on `dx`.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    pub directions: usize,
    /// Largest `|analytic - numeric| / |numeric|` over the directions.
    pub max_rel_err: f64,
    pub step: f64,
}

fn normal(n: usize, seed: u64, stream: u64) -> Vec<f32> {
    let mut r = rng::stream(seed, stream);
    (0..n).map(|_| StandardNormal.sample(&mut r)).collect()
}

/// Random input, weights and loss weights `c` for a tiny layer; `c` is
/// BF16-representable so the loss gradient `dy = c` is exact.
pub fn random_case(spec: &LayerSpec, seed: u64) -> (Tensor, LayerWeights, Tensor) {
    let shape = vec![spec.batch, spec.seq_len, spec.hidden];
    let n = spec.tokens() * spec.hidden;
    let x = Tensor::new(shape.clone(), normal(n, seed, 20)).expect("shape");
    let c = normal(n, seed, 21).into_iter().map(round_bf16).collect();
    let c = Tensor::new(shape, c).expect("shape");
    (x, LayerWeights::random(spec, seed), c)
}

/// Compare backward's `dx` with central differences of
/// `L(x) = Σ c ⊙ emulated_forward(x)` along `directions` random directions.
/// Each difference quotient is Richardson-extrapolated from steps `h` and
/// `h/2`.
pub fn gradient_check(spec: &LayerSpec, seed: u64, directions: usize, h: f64) -> Result<GradCheck, FlowError> {
    let (x, w, c) = random_case(spec, seed);
    let mut cache = WeightCache::new();
    let (_, tape, frozen) = forward_frozen(&x, &w, spec, &mut cache)?;
    let grads = backward(&c, &tape, &w, spec, &mut cache)?;
    let mut loss = |xs: &[f32]| -> Result<f64, FlowError> {
        let xt = Tensor::new(x.shape().to_vec(), xs.to_vec()).expect("shape");
        let y = emulated_forward(&xt, &w, spec, &frozen, &mut cache)?;
        Ok(y.data().iter().zip(c.data()).map(|(&a, &b)| a as f64 * b as f64).sum())
    };
    let mut max_rel_err = 0.0f64;
    for d in 0..directions {
        let u = normal(x.numel(), seed, 100 + d as u64);
        let analytic: f64 = grads.dx.data().iter().zip(&u).map(|(&a, &b)| a as f64 * b as f64).sum();
        let mut quotient = |step: f64| -> Result<f64, FlowError> {
            let plus: Vec<f32> = x.data().iter().zip(&u).map(|(&a, &b)| (a as f64 + step * b as f64) as f32).collect();
            let minus: Vec<f32> = x.data().iter().zip(&u).map(|(&a, &b)| (a as f64 - step * b as f64) as f32).collect();
            Ok((loss(&plus)? - loss(&minus)?) / (2.0 * step))
        };
        let (d1, d2) = (quotient(h)?, quotient(h / 2.0)?);
        let numeric = (4.0 * d2 - d1) / 3.0;
        let rel = (analytic - numeric).abs() / numeric.abs().max(1e-12);
        max_rel_err = max_rel_err.max(rel);
    }
    Ok(GradCheck {
        directions,
        max_rel_err,
        step: h,
    })
}

/// A layer on which every 8-bit and BF16 site is exact: identical ±1 token
/// rows, zero query/key projections (uniform attention over identical
/// values), and gate/up/down projections that keep every quantized tensor at
/// a single magnitude. Scales are kept in f32 so `absmax / Δmax` round trips.
pub fn lossless_case(spec: &LayerSpec) -> Result<(LayerSpec, Tensor, LayerWeights), FlowError> {
    let spec = LayerSpec {
        scale_precision: ScalePrecision::Fp32,
        ..*spec
    };
    spec.validate()?;
    let (h, i) = (spec.hidden, spec.intermediate);
    let signs: Vec<f32> = (0..h).map(|j| if (j * 5 + 1) % 3 == 0 { -1.0 } else { 1.0 }).collect();
    let x: Vec<f32> = (0..spec.tokens()).flat_map(|_| signs.iter().copied()).collect();
    let x = Tensor::new(vec![spec.batch, spec.seq_len, h], x).expect("shape");
    let mut w = LayerWeights::zero_body(&spec);
    for j in 0..h {
        w.wv[j * h + j] = 0.5;
        w.wo[j * h + j] = 1.0;
    }
    for r in 0..h {
        for col in 0..i {
            w.wg[r * i + col] = 4.0 * signs[r];
        }
    }
    // signed permutation-like map: column `col` reads channel `col % h`
    for col in 0..i {
        let r = col % h;
        w.wu[r * i + col] = if col % 2 == 0 { 1.0 } else { -1.0 };
    }
    w.wd.iter_mut().for_each(|v| *v = 2f32.powi(-6));
    Ok((spec, x, w))
}
