//! Experiment drivers behind the CLI. Each command takes a typed config and
//! returns a report that serializes to JSON, flattens to CSV rows and
//! carries pass/fail verdicts.

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{encode, Fp8Format};
use crate::expand::ExpandError;
use crate::flow::checks::{gradient_check, random_case};
use crate::flow::{forward, norm_input_error, tape_bytes, FlowError, FlowPolicy, LayerSpec, WeightCache};
use crate::flow::ops;
use crate::memory::{predict, reconcile, render2, Frac, MemPolicy, MemoryError, MemorySpec};
use crate::optim::{self, direction_mse, AdamWConfig, MomentPolicy, OptimError, OptimizerSlot, ReferenceAdamW, SlotPolicy};
use crate::par;
use crate::quant::{dequantize, QuantError, QuantGeometry, Quantizer, ScalePrecision};
use crate::rng;
use crate::synth::{generate, optimizer_states, OptimizerStateSpec, SyntheticSpec};
use crate::tensor::{mse, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Expand(#[from] ExpandError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A named ordering or consistency check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

pub trait Report: Serialize {
    fn columns(&self) -> &'static [&'static str];
    fn rows(&self) -> Vec<Vec<String>>;
    fn verdicts(&self) -> &[Verdict];
    /// The resolved configuration as flat `key = value` pairs.
    fn config(&self) -> Vec<(String, String)>;

    fn passed(&self) -> bool {
        self.verdicts().iter().all(|v| v.passed)
    }
}

fn scalar(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Flatten a config struct into sorted `key = value` pairs; lists become
/// comma-separated values.
pub fn config_pairs(config: &impl Serialize) -> Vec<(String, String)> {
    let value = serde_json::to_value(config).unwrap_or(serde_json::Value::Null);
    let mut out = Vec::new();
    if let serde_json::Value::Object(map) = value {
        for (k, v) in map {
            let s = match v {
                serde_json::Value::Array(items) => items.iter().map(scalar).collect::<Vec<_>>().join(","),
                other => scalar(&other),
            };
            out.push((k, s));
        }
    }
    out
}

// ---------------------------------------------------------------- codec audit

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecAuditConfig {
    pub formats: Vec<Fp8Format>,
}

impl Default for CodecAuditConfig {
    fn default() -> Self {
        Self {
            formats: Fp8Format::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FormatSummary {
    pub format: Fp8Format,
    pub delta_max: f32,
    pub delta_min: f32,
    pub finite_codes: usize,
    pub round_trip_failures: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CodeRow {
    pub format: Fp8Format,
    pub byte: u8,
    pub value: f32,
    /// `None` for NaN and infinity patterns, which are not round-tripped.
    pub round_trip: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CodecAudit {
    pub config: CodecAuditConfig,
    pub summaries: Vec<FormatSummary>,
    pub table: Vec<CodeRow>,
    pub verdicts: Vec<Verdict>,
}

pub fn codec_audit(config: &CodecAuditConfig) -> CodecAudit {
    let mut summaries = Vec::new();
    let mut table = Vec::new();
    let mut verdicts = Vec::new();
    for &format in &config.formats {
        let rows: Vec<CodeRow> = format
            .codes()
            .map(|code| {
                let value = code.decode();
                let round_trip = value
                    .is_finite()
                    .then(|| encode(value, format).map(|c| c.byte == code.byte).unwrap_or(false));
                CodeRow {
                    format,
                    byte: code.byte,
                    value,
                    round_trip,
                }
            })
            .collect();
        let finite_codes = rows.iter().filter(|r| r.round_trip.is_some()).count();
        let failures = rows.iter().filter(|r| r.round_trip == Some(false)).count();
        verdicts.push(Verdict::new(
            format!("{format}-round-trip"),
            failures == 0,
            format!("{finite_codes} finite codes, {failures} failures"),
        ));
        let (delta_max, delta_min) = (format.delta_max(), format.delta_min());
        let expected = match format {
            Fp8Format::E4M3 => Some((448.0, 2f32.powi(-9))),
            Fp8Format::E5M2 => Some((57344.0, 2f32.powi(-16))),
            Fp8Format::DE8 => None,
        };
        match expected {
            Some((max, min)) => {
                verdicts.push(Verdict::new(
                    format!("{format}-constants"),
                    delta_max == max && delta_min == min,
                    format!("delta_max {delta_max}, delta_min {delta_min:e}"),
                ));
                // positive ramp: bytes 0x00..0x7f
                let ramp: Vec<f32> = rows[..128].iter().filter(|r| r.round_trip.is_some()).map(|r| r.value).collect();
                verdicts.push(Verdict::new(
                    format!("{format}-monotone"),
                    ramp.windows(2).all(|w| w[0] <= w[1]),
                    format!("{} positive codes", ramp.len()),
                ));
            }
            None => verdicts.push(Verdict::new(
                format!("{format}-table"),
                rows.len() == 256 && delta_max == 1.0,
                format!("{} rows, delta_max {delta_max}, delta_min {delta_min:e}", rows.len()),
            )),
        }
        summaries.push(FormatSummary {
            format,
            delta_max,
            delta_min,
            finite_codes,
            round_trip_failures: failures,
        });
        table.extend(rows);
    }
    CodecAudit {
        config: config.clone(),
        summaries,
        table,
        verdicts,
    }
}

impl Report for CodecAudit {
    fn columns(&self) -> &'static [&'static str] {
        &["format", "byte", "value", "round_trip"]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.table
            .iter()
            .map(|r| {
                vec![
                    r.format.to_string(),
                    format!("0x{:02x}", r.byte),
                    r.value.to_string(),
                    r.round_trip.map_or("n/a".into(), |b| b.to_string()),
                ]
            })
            .collect()
    }

    fn verdicts(&self) -> &[Verdict] {
        &self.verdicts
    }

    fn config(&self) -> Vec<(String, String)> {
        config_pairs(&self.config)
    }
}

// ------------------------------------------------------------ optimizer ablation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateConfig {
    pub seeds: u64,
    pub first_seed: u64,
    pub size: usize,
    pub group_size: usize,
    pub eps: f32,
    pub outlier_fraction: f64,
    pub outlier_scale: f64,
    /// Tested moment policies; every (first, second) pair is a cell.
    pub policies: Vec<String>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            seeds: 20,
            first_seed: 0,
            size: 16384,
            group_size: crate::quant::DEFAULT_OPTIMIZER_GROUP,
            eps: 1e-8,
            outlier_fraction: 0.002,
            outlier_scale: OptimizerStateSpec::new(1, 0).outlier_scale,
            policies: ["FP32", "E4M3", "E4M3+Expand", "E5M2", "E5M2+Expand", "DE8", "DE8+Expand"]
                .map(String::from)
                .to_vec(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationCell {
    pub first: String,
    pub second: String,
    pub mean_mse: f64,
    pub per_seed: Vec<f64>,
    /// Seeds on which this cell is the smallest non-f32 combination.
    pub best_count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Ablation {
    pub config: AblateConfig,
    pub cells: Vec<AblationCell>,
    pub verdicts: Vec<Verdict>,
}

impl Ablation {
    pub fn cell(&self, first: &str, second: &str) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.first == first && c.second == second)
    }

    fn mean(&self, first: &str, second: &str) -> Option<f64> {
        self.cell(first, second).map(|c| c.mean_mse)
    }
}

pub fn optim_ablate(config: &AblateConfig) -> Result<Ablation, HarnessError> {
    if config.seeds == 0 || config.size == 0 {
        return Err(HarnessError::Config("seeds and size must be positive".into()));
    }
    let policies: Vec<MomentPolicy> = config
        .policies
        .iter()
        .map(|s| s.parse::<MomentPolicy>().map(|p| p.with_group_size(config.group_size)))
        .collect::<Result<_, _>>()
        .map_err(HarnessError::Config)?;
    let names: Vec<String> = policies.iter().map(|p| p.to_string()).collect();
    let n = policies.len();
    // per seed: n×n matrix of direction MSEs, row = first-moment policy
    let per_seed: Vec<Result<Vec<f64>, HarnessError>> = par::map_indices(config.seeds as usize, |s| {
        let spec = OptimizerStateSpec {
            outlier_fraction: config.outlier_fraction,
            outlier_scale: config.outlier_scale,
            ..OptimizerStateSpec::new(config.size, config.first_seed + s as u64)
        };
        let (m, v) = optimizer_states(&spec)?;
        let mq: Vec<Vec<f32>> = policies.iter().map(|p| p.round_trip(m.data())).collect::<Result<_, _>>()?;
        let vq: Vec<Vec<f32>> = policies.iter().map(|p| p.round_trip(v.data())).collect::<Result<_, _>>()?;
        let mut out = Vec::with_capacity(n * n);
        for a in &mq {
            for b in &vq {
                out.push(direction_mse(m.data(), v.data(), a, b, config.eps));
            }
        }
        Ok(out)
    });
    let per_seed: Vec<Vec<f64>> = per_seed.into_iter().collect::<Result<_, _>>()?;
    let lossy = |i: usize| !policies[i].is_lossless();
    let mut best = vec![0usize; n * n];
    for seed in &per_seed {
        let argmin = (0..n * n)
            .filter(|&c| lossy(c / n) && lossy(c % n))
            .min_by(|&a, &b| seed[a].total_cmp(&seed[b]));
        if let Some(c) = argmin {
            best[c] += 1;
        }
    }
    let cells: Vec<AblationCell> = (0..n * n)
        .map(|c| {
            let vals: Vec<f64> = per_seed.iter().map(|s| s[c]).collect();
            AblationCell {
                first: names[c / n].clone(),
                second: names[c % n].clone(),
                mean_mse: vals.iter().sum::<f64>() / vals.len() as f64,
                per_seed: vals,
                best_count: best[c],
            }
        })
        .collect();
    let mut report = Ablation {
        config: config.clone(),
        cells,
        verdicts: Vec::new(),
    };
    report.verdicts = ablation_verdicts(&report, &names);
    Ok(report)
}

fn ablation_verdicts(r: &Ablation, names: &[String]) -> Vec<Verdict> {
    let has = |s: &str| names.iter().any(|n| n == s);
    let mut out = Vec::new();
    // expansion against its plain counterpart, on the E4M3/E5M2 matrix
    let minifloat: Vec<&str> = ["E4M3", "E4M3+Expand", "E5M2", "E5M2+Expand"].into_iter().filter(|s| has(s)).collect();
    let mut checked = 0;
    let mut failures = Vec::new();
    for &a in &minifloat {
        for &b in &minifloat {
            let base = r.mean(a, b).unwrap();
            for (ea, eb) in [(format!("{a}+Expand"), b.to_string()), (a.to_string(), format!("{b}+Expand"))] {
                if let Some(e) = r.mean(&ea, &eb) {
                    checked += 1;
                    if !(e < base) {
                        failures.push(format!("{ea}/{eb} {e:.3e} >= {a}/{b} {base:.3e}"));
                    }
                }
            }
        }
    }
    if checked > 0 {
        out.push(Verdict::new(
            "expand-reduces-MSE",
            failures.is_empty(),
            if failures.is_empty() { format!("{checked} comparisons") } else { failures.join("; ") },
        ));
    }
    let mut checked = 0;
    let mut failures = Vec::new();
    for suffix in ["", "+Expand"] {
        let (e4, e5) = (format!("E4M3{suffix}"), format!("E5M2{suffix}"));
        for second in names {
            if let (Some(a), Some(b)) = (r.mean(&e4, second), r.mean(&e5, second)) {
                if r.cell(&e4, second).is_some() && !(second == "FP32") {
                    checked += 1;
                    if !(a < b) {
                        failures.push(format!("{e4}/{second} {a:.3e} >= {e5}/{second} {b:.3e}"));
                    }
                }
            }
        }
    }
    if checked > 0 {
        out.push(Verdict::new(
            "E4M3-first-beats-E5M2-first",
            failures.is_empty(),
            if failures.is_empty() { format!("{checked} comparisons") } else { failures.join("; ") },
        ));
    }
    if let Some(c) = r.cell("FP32", "FP32") {
        out.push(Verdict::new("fp32-is-exact", c.mean_mse == 0.0, format!("{:e}", c.mean_mse)));
    }
    if let Some(c) = r.cell("DE8+Expand", "E4M3+Expand") {
        let seeds = r.config.seeds as usize;
        let needed = (3 * seeds).div_ceil(4);
        out.push(Verdict::new(
            "DE8+Expand/E4M3+Expand-is-best",
            c.best_count >= needed,
            format!("best on {}/{seeds} seeds (need {needed})", c.best_count),
        ));
    }
    out
}

impl Report for Ablation {
    fn columns(&self) -> &'static [&'static str] {
        &["first", "second", "mean_mse", "best_count"]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.cells
            .iter()
            .map(|c| vec![c.first.clone(), c.second.clone(), format!("{:e}", c.mean_mse), c.best_count.to_string()])
            .collect()
    }

    fn verdicts(&self) -> &[Verdict] {
        &self.verdicts
    }

    fn config(&self) -> Vec<(String, String)> {
        config_pairs(&self.config)
    }
}

// ------------------------------------------------------------ optimizer training

/// `½ Σ a_i (w_i − w*_i)²` with curvatures log-uniform in `[1, 10]` and a
/// start at distance `[0.5, 1.5]` from the optimum in every coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    pub curvature: Vec<f32>,
    pub optimum: Vec<f32>,
    pub start: Vec<f32>,
}

impl Quadratic {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, 30);
        let mut curvature = Vec::with_capacity(dim);
        let mut optimum = Vec::with_capacity(dim);
        let mut start = Vec::with_capacity(dim);
        for _ in 0..dim {
            curvature.push(10f32.powf(r.random::<f32>()));
            let o: f32 = StandardNormal.sample(&mut r);
            let d = r.random_range(0.5f32..1.5);
            let sign = if r.random::<bool>() { 1.0 } else { -1.0 };
            optimum.push(o);
            start.push(o + sign * d);
        }
        Self {
            curvature,
            optimum,
            start,
        }
    }

    pub fn loss(&self, w: &[f32]) -> f64 {
        w.iter()
            .zip(&self.optimum)
            .zip(&self.curvature)
            .map(|((&w, &o), &a)| 0.5 * a as f64 * ((w - o) as f64).powi(2))
            .sum()
    }

    pub fn grad(&self, w: &[f32]) -> Vec<f32> {
        w.iter().zip(&self.optimum).zip(&self.curvature).map(|((&w, &o), &a)| a * (w - o)).collect()
    }
}

/// Full-batch regression of a random teacher by a one-hidden-layer SiLU
/// network of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyRegression {
    pub inputs: usize,
    pub hidden: usize,
    pub x: Vec<f32>,
    pub target: Vec<f32>,
    pub start: Vec<f32>,
}

impl TinyRegression {
    pub const SAMPLES: usize = 128;

    pub fn new(seed: u64) -> Self {
        let (inputs, hidden, n) = (16, 32, Self::SAMPLES);
        let mut r = rng::stream(seed, 40);
        let mut draw = |len: usize, std: f32| -> Vec<f32> {
            let d = Normal::new(0.0, std).expect("positive std");
            (0..len).map(|_| d.sample(&mut r)).collect()
        };
        let x = draw(n * inputs, 1.0);
        let mut teacher = draw(inputs * hidden, 1.0 / (inputs as f32).sqrt());
        teacher.extend(draw(hidden, 1.0 / (hidden as f32).sqrt()));
        let mut start = draw(inputs * hidden, 1.0 / (inputs as f32).sqrt());
        start.extend(draw(hidden, 1.0 / (hidden as f32).sqrt()));
        let mut task = Self {
            inputs,
            hidden,
            x,
            target: Vec::new(),
            start,
        };
        task.target = task.predict(&teacher, None).expect("f32 forward");
        task
    }

    pub fn params(&self) -> usize {
        self.inputs * self.hidden + self.hidden
    }

    fn predict(&self, w: &[f32], act: Option<usize>) -> Result<Vec<f32>, HarnessError> {
        Ok(self.forward(w, act)?.3)
    }

    /// `(x̃, h̃, s̃, y)` with the quantized activations when `act` names a group size.
    #[allow(clippy::type_complexity)]
    fn forward(&self, w: &[f32], act: Option<usize>) -> Result<(Vec<f32>, Vec<f32>, Vec<f32>, Vec<f32>), HarnessError> {
        let (n, i, h) = (Self::SAMPLES, self.inputs, self.hidden);
        let (w1, w2) = w.split_at(i * h);
        let x = activation_round_trip(&self.x, n, i, act.map(|_| QuantGeometry::PerTensor))?;
        let pre = ops::matmul(&x, w1, n, i, h);
        let pre = activation_round_trip(&pre, n, h, act.map(QuantGeometry::PerGroup))?;
        let s: Vec<f32> = pre.iter().map(|&v| ops::silu(v)).collect();
        let s = activation_round_trip(&s, n, h, act.map(|_| QuantGeometry::PerTensor))?;
        let y = ops::matmul(&s, w2, n, h, 1);
        Ok((x, pre, s, y))
    }

    pub fn loss(&self, w: &[f32]) -> f64 {
        let y = self.predict(w, None).expect("f32 forward");
        0.5 * mse(&y, &self.target)
    }

    /// Straight-through gradient of `½ mean (y − t)²`.
    pub fn grad(&self, w: &[f32], act: Option<usize>) -> Result<Vec<f32>, HarnessError> {
        let (n, i, h) = (Self::SAMPLES, self.inputs, self.hidden);
        let (x, pre, s, y) = self.forward(w, act)?;
        let dy: Vec<f32> = y.iter().zip(&self.target).map(|(a, b)| (a - b) / n as f32).collect();
        let w2 = &w[i * h..];
        let dw2 = ops::matmul(&ops::transpose(&s, n, h), &dy, h, n, 1);
        let ds = ops::matmul_nt(&dy, w2, n, 1, h);
        let dpre: Vec<f32> = ds.iter().zip(&pre).map(|(d, &p)| d * ops::silu_grad(p)).collect();
        let mut g = ops::matmul(&ops::transpose(&x, n, i), &dpre, i, n, h);
        g.extend(dw2);
        Ok(g)
    }
}

fn activation_round_trip(v: &[f32], rows: usize, cols: usize, geometry: Option<QuantGeometry>) -> Result<Vec<f32>, HarnessError> {
    match geometry {
        None => Ok(v.to_vec()),
        Some(g) => {
            let t = Tensor::new(vec![rows, cols], v.to_vec())?;
            Ok(dequantize(&Quantizer::new(g, Fp8Format::E4M3).quantize(&t)?).into_data())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainPolicy {
    Fp32,
    OptimizerOnly,
    ActivationOnly,
    Both,
}

impl TrainPolicy {
    pub const ALL: [TrainPolicy; 4] = [TrainPolicy::Fp32, TrainPolicy::OptimizerOnly, TrainPolicy::ActivationOnly, TrainPolicy::Both];

    pub fn name(self) -> &'static str {
        match self {
            TrainPolicy::Fp32 => "fp32",
            TrainPolicy::OptimizerOnly => "fp8-optimizer",
            TrainPolicy::ActivationOnly => "fp8-activation",
            TrainPolicy::Both => "fp8-both",
        }
    }

    fn quantized_optimizer(self) -> bool {
        matches!(self, TrainPolicy::OptimizerOnly | TrainPolicy::Both)
    }

    fn quantized_activations(self) -> bool {
        matches!(self, TrainPolicy::ActivationOnly | TrainPolicy::Both)
    }
}

impl std::str::FromStr for TrainPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TrainPolicy::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s.trim()) || format!("{p:?}").eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown train policy '{s}' (fp32, fp8-optimizer, fp8-activation, fp8-both)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f32,
    pub dim: usize,
    /// Optimizer-state group size.
    pub group_size: usize,
    /// Activation group size for the `fp8-activation` policies.
    pub activation_group: usize,
    /// Storage precision of the optimizer-state scales.
    pub scale_precision: ScalePrecision,
    pub seed: u64,
    pub log_every: usize,
    pub policies: Vec<TrainPolicy>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 1e-3,
            dim: 64,
            group_size: crate::quant::DEFAULT_OPTIMIZER_GROUP,
            activation_group: crate::quant::DEFAULT_ACTIVATION_GROUP,
            scale_precision: ScalePrecision::Bf16,
            seed: 0,
            log_every: 100,
            policies: TrainPolicy::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainRun {
    pub task: &'static str,
    pub policy: TrainPolicy,
    /// Loss before every step, then after the last.
    pub losses: Vec<f64>,
    pub final_loss: f64,
    pub oracle_final_loss: f64,
    /// `|final − oracle| / oracle`.
    pub relative_gap: f64,
    /// Parameters and losses equal the oracle's bit for bit.
    pub matches_oracle: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub runs: Vec<TrainRun>,
    pub verdicts: Vec<Verdict>,
}

struct Trajectory {
    losses: Vec<f64>,
    params: Vec<f32>,
}

fn adamw(cfg: &TrainConfig) -> AdamWConfig {
    AdamWConfig {
        lr: cfg.lr,
        ..AdamWConfig::default()
    }
}

fn run_slot(
    start: &[f32],
    cfg: &TrainConfig,
    policy: SlotPolicy,
    loss: &dyn Fn(&[f32]) -> f64,
    grad: &dyn Fn(&[f32]) -> Result<Vec<f32>, HarnessError>,
) -> Result<Trajectory, HarnessError> {
    let opt = adamw(cfg);
    let mut w = Tensor::from_vec(start.to_vec());
    let mut slot = OptimizerSlot::new(start.len(), policy)?;
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    for _ in 0..cfg.steps {
        losses.push(loss(w.data()));
        let g = Tensor::from_vec(grad(w.data())?);
        (w, slot) = optim::step(&w, &g, &slot, &opt)?;
    }
    losses.push(loss(w.data()));
    Ok(Trajectory {
        losses,
        params: w.into_data(),
    })
}

fn run_oracle(
    start: &[f32],
    cfg: &TrainConfig,
    loss: &dyn Fn(&[f32]) -> f64,
    grad: &dyn Fn(&[f32]) -> Result<Vec<f32>, HarnessError>,
) -> Result<Trajectory, HarnessError> {
    let opt = adamw(cfg);
    let mut w = start.to_vec();
    let mut state = ReferenceAdamW::new(w.len());
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    for _ in 0..cfg.steps {
        losses.push(loss(&w));
        let g = grad(&w)?;
        state.step(&mut w, &g, &opt)?;
    }
    losses.push(loss(&w));
    Ok(Trajectory { losses, params: w })
}

fn summarize(task: &'static str, policy: TrainPolicy, t: Trajectory, oracle: &Trajectory) -> TrainRun {
    let final_loss = *t.losses.last().expect("at least one loss");
    let oracle_final_loss = *oracle.losses.last().expect("at least one loss");
    let same = |a: &[f32], b: &[f32]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
    TrainRun {
        task,
        policy,
        matches_oracle: same(&t.params, &oracle.params)
            && t.losses.iter().zip(&oracle.losses).all(|(a, b)| a.to_bits() == b.to_bits()),
        relative_gap: (final_loss - oracle_final_loss).abs() / oracle_final_loss.abs().max(f64::MIN_POSITIVE),
        final_loss,
        oracle_final_loss,
        losses: t.losses,
    }
}

pub fn optim_train(cfg: &TrainConfig) -> Result<TrainReport, HarnessError> {
    if cfg.steps == 0 || cfg.dim == 0 || cfg.log_every == 0 {
        return Err(HarnessError::Config("steps, dim and log_every must be positive".into()));
    }
    if cfg.group_size == 0 || cfg.activation_group == 0 || cfg.dim % cfg.activation_group != 0 {
        return Err(HarnessError::Config(format!(
            "dim {} must be a multiple of the activation group {}",
            cfg.dim, cfg.activation_group
        )));
    }
    let slot_policy = |p: TrainPolicy| {
        if p.quantized_optimizer() {
            SlotPolicy::e4m3_expand()
                .with_group_size(cfg.group_size)
                .with_scale_precision(cfg.scale_precision)
        } else {
            SlotPolicy::FP32
        }
    };
    let mut runs = Vec::new();

    let quad = Quadratic::new(cfg.dim, cfg.seed);
    let q_loss = |w: &[f32]| quad.loss(w);
    let q_grad = |w: &[f32]| -> Result<Vec<f32>, HarnessError> { Ok(quad.grad(w)) };
    let q_grad_act = |w: &[f32]| -> Result<Vec<f32>, HarnessError> {
        let wq = activation_round_trip(w, 1, w.len(), Some(QuantGeometry::PerGroup(cfg.activation_group)))?;
        Ok(quad.grad(&wq))
    };
    let oracle = run_oracle(&quad.start, cfg, &q_loss, &q_grad)?;
    for &p in &cfg.policies {
        let grad: &dyn Fn(&[f32]) -> Result<Vec<f32>, HarnessError> =
            if p.quantized_activations() { &q_grad_act } else { &q_grad };
        let t = run_slot(&quad.start, cfg, slot_policy(p), &q_loss, grad)?;
        runs.push(summarize("quadratic", p, t, &oracle));
    }

    let reg = TinyRegression::new(cfg.seed);
    if reg.hidden % cfg.activation_group != 0 {
        return Err(HarnessError::Config(format!(
            "activation group {} must divide the regression width {}",
            cfg.activation_group, reg.hidden
        )));
    }
    let r_loss = |w: &[f32]| reg.loss(w);
    let r_grad = |w: &[f32]| reg.grad(w, None);
    let r_grad_act = |w: &[f32]| reg.grad(w, Some(cfg.activation_group));
    let oracle = run_oracle(&reg.start, cfg, &r_loss, &r_grad)?;
    for &p in &cfg.policies {
        let grad: &dyn Fn(&[f32]) -> Result<Vec<f32>, HarnessError> =
            if p.quantized_activations() { &r_grad_act } else { &r_grad };
        let t = run_slot(&reg.start, cfg, slot_policy(p), &r_loss, grad)?;
        runs.push(summarize("regression", p, t, &oracle));
    }

    let mut verdicts = Vec::new();
    let fp32: Vec<&TrainRun> = runs.iter().filter(|r| r.policy == TrainPolicy::Fp32).collect();
    if !fp32.is_empty() {
        verdicts.push(Verdict::new(
            "fp32-matches-oracle",
            fp32.iter().all(|r| r.matches_oracle),
            fp32.iter().map(|r| format!("{}: {}", r.task, r.matches_oracle)).collect::<Vec<_>>().join(", "),
        ));
    }
    if let Some(r) = runs.iter().find(|r| r.task == "quadratic" && r.policy == TrainPolicy::OptimizerOnly) {
        verdicts.push(Verdict::new(
            "fp8-optimizer-within-10%",
            r.relative_gap <= 0.10,
            format!("final {:.4e} vs oracle {:.4e} (gap {:.2}%)", r.final_loss, r.oracle_final_loss, 100.0 * r.relative_gap),
        ));
    }
    verdicts.push(Verdict::new(
        "losses-finite",
        runs.iter().all(|r| r.losses.iter().all(|l| l.is_finite())),
        format!("{} runs", runs.len()),
    ));
    Ok(TrainReport {
        config: cfg.clone(),
        runs,
        verdicts,
    })
}

impl Report for TrainReport {
    fn columns(&self) -> &'static [&'static str] {
        &["task", "policy", "step", "loss"]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        let mut out = Vec::new();
        for r in &self.runs {
            let last = r.losses.len() - 1;
            for (step, l) in r.losses.iter().enumerate() {
                if step % self.config.log_every == 0 || step == last {
                    out.push(vec![r.task.to_string(), r.policy.name().to_string(), step.to_string(), format!("{l:e}")]);
                }
            }
        }
        out
    }

    fn verdicts(&self) -> &[Verdict] {
        &self.verdicts
    }

    fn config(&self) -> Vec<(String, String)> {
        config_pairs(&self.config)
    }
}

// ----------------------------------------------------------------- flow sim

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSimConfig {
    pub hidden: usize,
    pub intermediate: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub batch: usize,
    pub group_size: usize,
    /// Block edge for the granularity comparison; `block_size² = group_size`.
    pub block_size: usize,
    pub format: Fp8Format,
    pub seeds: u64,
    pub first_seed: u64,
    /// Outlier-token activations for the granularity comparison.
    pub tokens: usize,
    pub channels: usize,
    pub outlier_fraction: f64,
    pub outlier_scale: f64,
    pub policies: Vec<FlowPolicy>,
}

impl Default for FlowSimConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            intermediate: 192,
            heads: 4,
            seq_len: 32,
            batch: 1,
            group_size: 16,
            block_size: 4,
            format: Fp8Format::E4M3,
            seeds: 20,
            first_seed: 0,
            tokens: 128,
            channels: 128,
            outlier_fraction: 1.0 / 16.0,
            outlier_scale: 1e3,
            policies: vec![FlowPolicy::Bf16, FlowPolicy::Te, FlowPolicy::Coat],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FlowPolicyResult {
    pub policy: FlowPolicy,
    /// Output MSE against the f32 reference over the reference's mean square.
    pub relative_mse: Vec<f64>,
    pub tape_bytes: u64,
    pub predicted_bytes: u64,
    pub overhead: f64,
    pub bound: f64,
    pub reconciled: bool,
    /// Directional finite-difference error on a tiny layer, BF16 gradients off.
    pub fd_max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GranularityResult {
    pub seed: u64,
    pub per_group: f64,
    pub per_block: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FlowSimReport {
    pub config: FlowSimConfig,
    pub policies: Vec<FlowPolicyResult>,
    pub granularity: Vec<GranularityResult>,
    pub verdicts: Vec<Verdict>,
}

/// Per-group vs per-block error of the RMSNorm input on outlier tokens.
pub fn granularity_comparison(cfg: &FlowSimConfig) -> Result<Vec<GranularityResult>, HarnessError> {
    if cfg.block_size * cfg.block_size != cfg.group_size {
        return Err(HarnessError::Config(format!(
            "block {0}×{0} must hold as many elements as a 1×{1} group",
            cfg.block_size, cfg.group_size
        )));
    }
    let group = Quantizer::new(QuantGeometry::PerGroup(cfg.group_size), cfg.format);
    let block = Quantizer::new(QuantGeometry::PerBlock(cfg.block_size), cfg.format);
    par::map_indices(cfg.seeds as usize, |i| {
        let seed = cfg.first_seed + i as u64;
        let x = generate(&SyntheticSpec::activation(cfg.tokens, cfg.channels, cfg.outlier_fraction, cfg.outlier_scale, seed))?;
        Ok(GranularityResult {
            seed,
            per_group: norm_input_error(&x, &group)?,
            per_block: norm_input_error(&x, &block)?,
        })
    })
    .into_iter()
    .collect()
}

pub fn flow_sim(cfg: &FlowSimConfig) -> Result<FlowSimReport, HarnessError> {
    if cfg.seeds == 0 {
        return Err(HarnessError::Config("seeds must be positive".into()));
    }
    let base = LayerSpec {
        format: cfg.format,
        ..LayerSpec::new(cfg.hidden, cfg.intermediate, cfg.heads, cfg.seq_len, cfg.batch, FlowPolicy::Reference)
            .with_group_size(cfg.group_size)
    };
    base.validate()?;
    let tiny = LayerSpec {
        bf16_grads: false,
        format: cfg.format,
        ..LayerSpec::new(8, 16, 2, 4, 1, FlowPolicy::Reference).with_group_size(4)
    };
    let reference: Vec<Result<(Tensor, Tensor, crate::flow::LayerWeights), HarnessError>> =
        par::map_indices(cfg.seeds as usize, |i| {
            let (x, w, _) = random_case(&base, cfg.first_seed + i as u64);
            let (y, _) = forward(&x, &w, &base, &mut WeightCache::new())?;
            Ok((x, y, w))
        });
    let reference: Vec<_> = reference.into_iter().collect::<Result<_, _>>()?;
    let mut policies = Vec::new();
    for &policy in &cfg.policies {
        let spec = base.with_policy(policy);
        let relative_mse: Vec<f64> = par::map_indices(reference.len(), |i| {
            let (x, yr, w) = &reference[i];
            let (y, _) = forward(x, w, &spec, &mut WeightCache::new())?;
            let power = yr.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / yr.numel() as f64;
            Ok::<f64, HarnessError>(mse(y.data(), yr.data()) / power)
        })
        .into_iter()
        .collect::<Result<_, _>>()?;
        let (x, _, w) = &reference[0];
        let (_, tape) = forward(x, w, &spec, &mut WeightCache::new())?;
        let measured = tape_bytes(&tape);
        let (predicted_bytes, overhead, bound, reconciled) = match spec.memory_spec() {
            Some(ms) => match reconcile(&ms, measured, tape.quantized_payload()) {
                Ok(r) => (r.predicted_bytes, r.overhead, r.bound, true),
                Err(MemoryError::MismatchBeyondBound {
                    predicted, overhead, bound, ..
                }) => (predicted, overhead, bound, false),
                Err(e) => return Err(e.into()),
            },
            None => (measured, 0.0, 0.0, true),
        };
        let fd = gradient_check(&tiny.with_policy(policy), cfg.first_seed, 8, 1e-2)?;
        policies.push(FlowPolicyResult {
            policy,
            relative_mse,
            tape_bytes: measured,
            predicted_bytes,
            overhead,
            bound,
            reconciled,
            fd_max_rel_err: fd.max_rel_err,
        });
    }
    let granularity = granularity_comparison(cfg)?;
    let wins = granularity.iter().filter(|g| g.per_group <= g.per_block).count();
    let needed = (9 * granularity.len()).div_ceil(10);
    let verdicts = vec![
        Verdict::new(
            "per-group<=per-block",
            wins >= needed,
            format!("{wins}/{} seeds (need {needed})", granularity.len()),
        ),
        Verdict::new(
            "tape-reconciles",
            policies.iter().all(|p| p.reconciled),
            policies
                .iter()
                .map(|p| format!("{}: {:.4}% ≤ {:.4}%", p.policy, 100.0 * p.overhead, 100.0 * p.bound))
                .collect::<Vec<_>>()
                .join(", "),
        ),
        Verdict::new(
            "fd-gradient",
            policies.iter().all(|p| p.fd_max_rel_err < 1e-3),
            policies.iter().map(|p| format!("{}: {:.2e}", p.policy, p.fd_max_rel_err)).collect::<Vec<_>>().join(", "),
        ),
    ];
    Ok(FlowSimReport {
        config: cfg.clone(),
        policies,
        granularity,
        verdicts,
    })
}

impl Report for FlowSimReport {
    fn columns(&self) -> &'static [&'static str] {
        &["section", "policy", "seed", "metric", "value"]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        let row = |a: &str, b: String, c: String, d: &str, e: String| vec![a.to_string(), b, c, d.to_string(), e];
        let mut out = Vec::new();
        for p in &self.policies {
            for (i, e) in p.relative_mse.iter().enumerate() {
                let seed = self.config.first_seed + i as u64;
                out.push(row("error", p.policy.to_string(), seed.to_string(), "relative_mse", format!("{e:e}")));
            }
            let name = p.policy.to_string();
            out.push(row("memory", name.clone(), String::new(), "tape_bytes", p.tape_bytes.to_string()));
            out.push(row("memory", name.clone(), String::new(), "predicted_bytes", p.predicted_bytes.to_string()));
            out.push(row("memory", name.clone(), String::new(), "overhead", format!("{:e}", p.overhead)));
            out.push(row("gradient", name, String::new(), "fd_max_rel_err", format!("{:e}", p.fd_max_rel_err)));
        }
        for g in &self.granularity {
            out.push(row("granularity", String::new(), g.seed.to_string(), "per_group", format!("{:e}", g.per_group)));
            out.push(row("granularity", String::new(), g.seed.to_string(), "per_block", format!("{:e}", g.per_block)));
        }
        out
    }

    fn verdicts(&self) -> &[Verdict] {
        &self.verdicts
    }

    fn config(&self) -> Vec<(String, String)> {
        config_pairs(&self.config)
    }
}

// ------------------------------------------------------------------- memory

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub batch: usize,
    pub seq_len: usize,
    pub hidden: usize,
    pub mlp_ratio: (i64, i64),
    pub group_size: usize,
    pub include_scales: bool,
    pub policies: Vec<MemPolicy>,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            batch: 1,
            seq_len: 2048,
            hidden: 4096,
            mlp_ratio: (8, 3),
            group_size: 16,
            include_scales: false,
            policies: MemPolicy::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MemoryTable {
    pub config: MemoryConfig,
    pub reports: Vec<crate::memory::MemoryReport>,
    /// Two-decimal ratio per policy, as rendered.
    pub display_ratios: Vec<(MemPolicy, String)>,
    pub verdicts: Vec<Verdict>,
}

pub fn memory_table(cfg: &MemoryConfig) -> Result<MemoryTable, HarnessError> {
    let spec = |policy| MemorySpec {
        batch: cfg.batch,
        seq_len: cfg.seq_len,
        hidden: cfg.hidden,
        mlp_ratio: cfg.mlp_ratio,
        policy,
        include_scales: cfg.include_scales,
        group_size: cfg.group_size,
    };
    let bf16_total = predict(&spec(MemPolicy::Bf16))?.total_units;
    let reports: Vec<_> = cfg.policies.iter().map(|&p| predict(&spec(p))).collect::<Result<_, _>>()?;
    let display_ratios: Vec<(MemPolicy, String)> =
        reports.iter().map(|r| (r.spec.policy, r.display_ratio(bf16_total))).collect();
    let mut verdicts = Vec::new();
    // dimensionless: the same table at a different size
    let scaled = reports.iter().all(|r| {
        let other = MemorySpec {
            batch: cfg.batch * 2,
            seq_len: cfg.seq_len * 3,
            hidden: cfg.hidden * 5,
            ..r.spec
        };
        predict(&other).map(|o| o.ratio == r.ratio && o.total_units == r.total_units).unwrap_or(false)
    });
    verdicts.push(Verdict::new("ratios-dimensionless", scaled, "batch×2, seq×3, hidden×5"));
    if cfg.mlp_ratio == (8, 3) {
        let expected = [
            (MemPolicy::Bf16, Frac::new(68, 3), "1.00"),
            (MemPolicy::Te, Frac::new(55, 3), "1.23"),
            (MemPolicy::Coat, Frac::new(40, 3), "1.69"),
        ];
        let mut ok = true;
        let mut detail = Vec::new();
        for r in &reports {
            if let Some((_, total, ratio)) = expected.iter().find(|(p, _, _)| *p == r.spec.policy) {
                let shown = r.display_ratio(bf16_total);
                ok &= r.total_units == *total && shown == *ratio;
                detail.push(format!("{}: {}U {}×", r.spec.policy, render2(r.total_units), shown));
            }
        }
        verdicts.push(Verdict::new("llama-totals", ok, detail.join(", ")));
    }
    Ok(MemoryTable {
        config: cfg.clone(),
        reports,
        display_ratios,
        verdicts,
    })
}

impl Report for MemoryTable {
    fn columns(&self) -> &'static [&'static str] {
        &["operator", "policy", "U", "bytes", "ratio"]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        let mut out = Vec::new();
        for (r, (_, ratio)) in self.reports.iter().zip(&self.display_ratios) {
            let policy = r.spec.policy.to_string();
            for row in &r.rows {
                out.push(vec![
                    row.operator.name().to_string(),
                    policy.clone(),
                    render2(row.units),
                    row.bytes.to_string(),
                    String::new(),
                ]);
            }
            out.push(vec![
                "Total".to_string(),
                policy,
                render2(r.total_units),
                r.total_bytes.to_string(),
                ratio.clone(),
            ]);
        }
        out
    }

    fn verdicts(&self) -> &[Verdict] {
        &self.verdicts
    }

    fn config(&self) -> Vec<(String, String)> {
        config_pairs(&self.config)
    }
}
