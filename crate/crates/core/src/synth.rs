//! Deterministic synthetic data shaped like optimizer states and activations.

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::tensor::{checked_numel, Tensor, TensorError};

/// Standard deviation of the bulk of an optimizer-like tensor.
pub const OPTIMIZER_BULK_STD: f32 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SyntheticKind {
    /// Narrow zero-mean Gaussian bulk with a sparse set of scaled-up entries.
    OptimizerLike,
    /// `[tokens, channels]` Gaussian activations where a few whole token rows
    /// are scaled up by `outlier_scale`.
    ActivationWithOutliers,
    /// Magnitudes log-uniform over `[1, dynamic_range]`, random signs.
    UniformLog { dynamic_range: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub shape: Vec<usize>,
    pub outlier_fraction: f64,
    pub outlier_scale: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn optimizer_like(size: usize, outlier_fraction: f64, outlier_scale: f64, seed: u64) -> Self {
        Self {
            kind: SyntheticKind::OptimizerLike,
            shape: vec![size],
            outlier_fraction,
            outlier_scale,
            seed,
        }
    }

    pub fn activation(tokens: usize, channels: usize, outlier_fraction: f64, outlier_scale: f64, seed: u64) -> Self {
        Self {
            kind: SyntheticKind::ActivationWithOutliers,
            shape: vec![tokens, channels],
            outlier_fraction,
            outlier_scale,
            seed,
        }
    }

    pub fn uniform_log(size: usize, dynamic_range: f64, seed: u64) -> Self {
        Self {
            kind: SyntheticKind::UniformLog { dynamic_range },
            shape: vec![size],
            outlier_fraction: 0.0,
            outlier_scale: 1.0,
            seed,
        }
    }

    fn validate(&self) -> Result<usize, TensorError> {
        let n = checked_numel(&self.shape)?;
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(TensorError::InvalidSpec(format!(
                "outlier_fraction {} outside [0, 1)",
                self.outlier_fraction
            )));
        }
        if !(self.outlier_scale.is_finite() && self.outlier_scale > 0.0) {
            return Err(TensorError::InvalidSpec(format!(
                "outlier_scale {} must be positive and finite",
                self.outlier_scale
            )));
        }
        match self.kind {
            SyntheticKind::ActivationWithOutliers if self.shape.len() != 2 => Err(
                TensorError::InvalidSpec("activation generator needs a [tokens, channels] shape".into()),
            ),
            SyntheticKind::UniformLog { dynamic_range } if !(dynamic_range.is_finite() && dynamic_range >= 1.0) => {
                Err(TensorError::InvalidSpec(format!("dynamic range {dynamic_range} must be >= 1")))
            }
            _ => Ok(n),
        }
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<Tensor, TensorError> {
    let n = spec.validate()?;
    let mut rng = rng::stream(spec.seed, 0);
    let data = match spec.kind {
        SyntheticKind::OptimizerLike => {
            let bulk = Normal::new(0.0f32, OPTIMIZER_BULK_STD).expect("valid std");
            let scale = spec.outlier_scale as f32;
            (0..n)
                .map(|_| {
                    let v = bulk.sample(&mut rng);
                    if rng.random_bool(spec.outlier_fraction) {
                        v * scale
                    } else {
                        v
                    }
                })
                .collect()
        }
        SyntheticKind::ActivationWithOutliers => {
            let (tokens, channels) = (spec.shape[0], spec.shape[1]);
            let mut data: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let outliers = outlier_rows(tokens, spec.outlier_fraction);
            for row in sample(&mut rng, tokens, outliers) {
                for v in &mut data[row * channels..(row + 1) * channels] {
                    *v *= spec.outlier_scale as f32;
                }
            }
            data
        }
        SyntheticKind::UniformLog { dynamic_range } => {
            let log_range = dynamic_range.ln();
            (0..n)
                .map(|_| {
                    let magnitude = (rng.random::<f64>() * log_range).exp() as f32;
                    if rng.random_bool(0.5) {
                        -magnitude
                    } else {
                        magnitude
                    }
                })
                .collect()
        }
    };
    Tensor::new(spec.shape.clone(), data)
}

fn outlier_rows(tokens: usize, fraction: f64) -> usize {
    if fraction == 0.0 {
        0
    } else {
        ((fraction * tokens as f64).round() as usize).clamp(1, tokens)
    }
}

/// Paired AdamW moments produced by running the moment recursions over a
/// synthetic gradient stream.
///
/// Each parameter draws a gradient scale `sigma_i = exp(scale_log_std * z_i)`,
/// multiplied by `outlier_scale` for a sparse `outlier_fraction` of
/// parameters. Gradients are `sigma_i * (drift_i + noise)` with a small
/// per-parameter drift. The returned moments are the raw (not bias-corrected)
/// `m` and `v` after `steps` updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerStateSpec {
    pub size: usize,
    pub steps: usize,
    pub beta1: f32,
    pub beta2: f32,
    pub scale_log_std: f64,
    pub drift_std: f64,
    pub outlier_fraction: f64,
    pub outlier_scale: f64,
    pub seed: u64,
}

impl OptimizerStateSpec {
    pub fn new(size: usize, seed: u64) -> Self {
        Self {
            size,
            steps: 200,
            beta1: 0.9,
            beta2: 0.999,
            scale_log_std: 0.2,
            drift_std: 0.05,
            outlier_fraction: 0.002,
            outlier_scale: 3.0,
            seed,
        }
    }
}

pub fn optimizer_states(spec: &OptimizerStateSpec) -> Result<(Tensor, Tensor), TensorError> {
    if spec.size == 0 || spec.steps == 0 {
        return Err(TensorError::InvalidSpec("size and steps must be positive".into()));
    }
    if !(0.0..1.0).contains(&spec.outlier_fraction) {
        return Err(TensorError::InvalidSpec("outlier_fraction outside [0, 1)".into()));
    }
    let mut rng = rng::stream(spec.seed, 1);
    let scales: Vec<f64> = (0..spec.size)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            let s = (spec.scale_log_std * z).exp();
            if rng.random_bool(spec.outlier_fraction) {
                s * spec.outlier_scale
            } else {
                s
            }
        })
        .collect();
    let drifts: Vec<f64> = (0..spec.size)
        .map(|_| spec.drift_std * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect();

    let (b1, b2) = (spec.beta1 as f64, spec.beta2 as f64);
    let mut m = vec![0.0f64; spec.size];
    let mut v = vec![0.0f64; spec.size];
    // gradients are generated step-major from their own stream so the result
    // does not depend on how parameters are partitioned
    let mut grad_rng = rng::stream(spec.seed, 2);
    for _ in 0..spec.steps {
        for i in 0..spec.size {
            let noise: f64 = StandardNormal.sample(&mut grad_rng);
            let g = 1e-3 * scales[i] * (drifts[i] + noise);
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        }
    }
    let to_tensor = |x: Vec<f64>| Tensor::from_vec(x.into_iter().map(|v| v as f32).collect());
    Ok((to_tensor(m), to_tensor(v)))
}
