//! `coatsim` command-line front end.
//!
//! Every command starts from a default config, applies `key = value` lines
//! from `--config`, then `--set KEY=VALUE` pairs, then the dedicated flags.
//! `--print-config` shows the resolved keys without running anything.
//!
//! Exit codes: 0 all verdicts pass, 1 some verdict failed, 2 usage, config
//! or I/O error.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use coatsim::flow::FlowPolicy;
use coatsim::harness::{
    codec_audit, flow_sim, memory_table, optim_ablate, optim_train, AblateConfig, CodecAuditConfig, FlowSimConfig,
    HarnessError, MemoryConfig, Report, TrainConfig, TrainPolicy,
};
use coatsim::memory::MemPolicy;
use coatsim::optim::MomentPolicy;
use coatsim::quant::ScalePrecision;
use coatsim::Fp8Format;

#[derive(Parser)]
#[command(name = "coatsim", version, about = "FP8 training-numerics experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode every byte of each format and check round trips and constants.
    CodecAudit(Args),
    /// Update-direction error for every (first, second) moment policy pair.
    OptimAblate(Args),
    /// Quadratic and regression training under FP32/FP8 policy toggles.
    OptimTrain(Args),
    /// One decoder layer: output error, tape bytes, gradients, granularity.
    FlowSim(Args),
    /// Analytic activation memory per operator and policy.
    Memory(Args),
}

#[derive(clap::Args, Debug, Default)]
struct Args {
    /// Flat `key = value` file; `#` starts a comment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// 8-bit format(s), comma separated.
    #[arg(long, value_delimiter = ',')]
    format: Vec<String>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    seeds: Option<u64>,
    /// Policies, comma separated.
    #[arg(long, value_delimiter = ',')]
    policy: Vec<String>,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Emit::Csv)]
    emit: Emit,
    /// Print the resolved config as `key = value` lines and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
enum Emit {
    #[default]
    Csv,
    Json,
}

/// Marks errors that map to exit code 2.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Which config key a dedicated flag writes, per command.
#[derive(Default)]
struct FlagKeys {
    format: Option<&'static str>,
    group_size: Option<&'static str>,
    seeds: Option<&'static str>,
    policy: Option<&'static str>,
}

/// Canonical JSON value for an enum-valued key, `None` for other keys.
type Canon = fn(&str, &str) -> Option<Result<Value>>;

fn canon_as<T: FromStr<Err = String> + Serialize>(raw: &str) -> Result<Value> {
    let v = T::from_str(raw).map_err(config_err)?;
    Ok(serde_json::to_value(v)?)
}

fn scale_precision(raw: &str) -> Result<Value> {
    let p = match raw.to_ascii_lowercase().as_str() {
        "bf16" => ScalePrecision::Bf16,
        "fp32" | "f32" => ScalePrecision::Fp32,
        _ => return Err(config_err(format!("unknown scale precision '{raw}' (bf16, fp32)"))),
    };
    Ok(serde_json::to_value(p)?)
}

fn canon_codec(key: &str, raw: &str) -> Option<Result<Value>> {
    (key == "formats").then(|| canon_as::<Fp8Format>(raw))
}

fn canon_ablate(key: &str, raw: &str) -> Option<Result<Value>> {
    (key == "policies").then(|| {
        let p = MomentPolicy::from_str(raw).map_err(config_err)?;
        Ok(Value::String(p.to_string()))
    })
}

fn canon_train(key: &str, raw: &str) -> Option<Result<Value>> {
    match key {
        "policies" => Some(canon_as::<TrainPolicy>(raw)),
        "scale_precision" => Some(scale_precision(raw)),
        _ => None,
    }
}

fn canon_flow(key: &str, raw: &str) -> Option<Result<Value>> {
    match key {
        "format" => Some(canon_as::<Fp8Format>(raw)),
        "policies" => Some(canon_as::<FlowPolicy>(raw)),
        _ => None,
    }
}

fn canon_memory(key: &str, raw: &str) -> Option<Result<Value>> {
    (key == "policies").then(|| canon_as::<MemPolicy>(raw))
}

/// Parse one raw string into the JSON shape of the key's default value.
fn convert(key: &str, default: &Value, raw: &str, canon: Canon) -> Result<Value> {
    let raw = raw.trim();
    let scalar = |template: &Value, item: &str| -> Result<Value> {
        if let Some(v) = canon(key, item) {
            return v;
        }
        match template {
            Value::Number(_) => match serde_json::from_str::<Value>(item) {
                Ok(v @ Value::Number(_)) => Ok(v),
                _ => Err(config_err(format!("{key}: expected a number, got '{item}'"))),
            },
            Value::Bool(_) => item
                .parse::<bool>()
                .map(Value::Bool)
                .map_err(|_| config_err(format!("{key}: expected true or false, got '{item}'"))),
            _ => Ok(Value::String(item.to_string())),
        }
    };
    match default {
        Value::Array(items) => {
            let template = items.first().cloned().unwrap_or(Value::String(String::new()));
            raw.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|item| scalar(&template, item))
                .collect::<Result<Vec<_>>>()
                .map(Value::Array)
        }
        other => scalar(other, raw),
    }
}

fn parse_config_file(path: &PathBuf) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err(format!("{}:{}: expected key = value", path.display(), n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn resolve<C: Default + Serialize + DeserializeOwned>(args: &Args, flags: &FlagKeys, canon: Canon) -> Result<C> {
    let mut pairs = match &args.config {
        Some(p) => parse_config_file(p)?,
        None => Vec::new(),
    };
    for s in &args.set {
        let (k, v) = s.split_once('=').ok_or_else(|| config_err(format!("--set expects KEY=VALUE, got '{s}'")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut flag = |name: &str, key: Option<&str>, value: Option<String>| -> Result<()> {
        if let Some(v) = value {
            let key = key.ok_or_else(|| config_err(format!("--{name} is not used by this command")))?;
            pairs.push((key.to_string(), v));
        }
        Ok(())
    };
    let join = |v: &Vec<String>| (!v.is_empty()).then(|| v.join(","));
    flag("format", flags.format, join(&args.format))?;
    flag("group-size", flags.group_size, args.group_size.map(|g| g.to_string()))?;
    flag("seeds", flags.seeds, args.seeds.map(|s| s.to_string()))?;
    flag("policy", flags.policy, join(&args.policy))?;

    let mut value = serde_json::to_value(C::default())?;
    let map = value.as_object_mut().expect("configs are structs");
    for (k, raw) in pairs {
        let Some(slot) = map.get_mut(&k) else {
            let keys: Vec<&str> = map.keys().map(String::as_str).collect();
            bail!(config_err(format!("unknown key '{k}' (known: {})", keys.join(", "))));
        };
        *slot = convert(&k, slot, &raw, canon)?;
    }
    serde_json::from_value(value).map_err(|e| config_err(format!("invalid config: {e}")))
}

fn render_csv(command: &str, report: &impl Report) -> Result<Vec<u8>> {
    let mut head = String::new();
    writeln!(head, "# command = {command}")?;
    for (k, v) in report.config() {
        writeln!(head, "# {k} = {v}")?;
    }
    for v in report.verdicts() {
        let status = if v.passed { "PASS" } else { "FAIL" };
        writeln!(head, "# verdict {} = {status} ({})", v.name, v.detail)?;
    }
    let mut w = csv::Writer::from_writer(head.into_bytes());
    w.write_record(report.columns())?;
    for row in report.rows() {
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| anyhow!("csv: {e}"))
}

fn render_json(command: &str, report: &impl Report) -> Result<Vec<u8>> {
    let doc = serde_json::json!({
        "command": command,
        "passed": report.passed(),
        "report": report,
    });
    let mut out = serde_json::to_vec_pretty(&doc)?;
    out.push(b'\n');
    Ok(out)
}

fn emit<R: Report>(command: &str, args: &Args, report: &R) -> Result<bool> {
    let bytes = match args.emit {
        Emit::Csv => render_csv(command, report)?,
        Emit::Json => render_json(command, report)?,
    };
    match &args.out {
        Some(path) => fs::write(path, &bytes).with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().write_all(&bytes)?,
    }
    for v in report.verdicts() {
        let status = if v.passed { "PASS" } else { "FAIL" };
        eprintln!("{status} {}: {}", v.name, v.detail);
    }
    Ok(report.passed())
}

fn harness(e: HarnessError) -> anyhow::Error {
    match e {
        HarnessError::Config(msg) => config_err(msg),
        other => other.into(),
    }
}

fn execute<C, R>(
    command: &str,
    args: &Args,
    flags: FlagKeys,
    canon: Canon,
    run: impl FnOnce(&C) -> Result<R, HarnessError>,
) -> Result<bool>
where
    C: Default + Serialize + DeserializeOwned,
    R: Report,
{
    let cfg: C = resolve(args, &flags, canon)?;
    if args.print_config {
        for (k, v) in coatsim::harness::config_pairs(&cfg) {
            println!("{k} = {v}");
        }
        return Ok(true);
    }
    let report = run(&cfg).map_err(harness)?;
    emit(command, args, &report)
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("COATSIM_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| config_err(format!("COATSIM_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| anyhow!("thread pool: {e}"))
}

fn dispatch(cli: Cli) -> Result<bool> {
    init_threads()?;
    match &cli.command {
        Command::CodecAudit(a) => execute(
            "codec-audit",
            a,
            FlagKeys {
                format: Some("formats"),
                ..FlagKeys::default()
            },
            canon_codec,
            |c: &CodecAuditConfig| Ok(codec_audit(c)),
        ),
        Command::OptimAblate(a) => execute(
            "optim-ablate",
            a,
            FlagKeys {
                group_size: Some("group_size"),
                seeds: Some("seeds"),
                policy: Some("policies"),
                ..FlagKeys::default()
            },
            canon_ablate,
            |c: &AblateConfig| optim_ablate(c),
        ),
        Command::OptimTrain(a) => execute(
            "optim-train",
            a,
            FlagKeys {
                group_size: Some("group_size"),
                policy: Some("policies"),
                ..FlagKeys::default()
            },
            canon_train,
            |c: &TrainConfig| optim_train(c),
        ),
        Command::FlowSim(a) => execute(
            "flow-sim",
            a,
            FlagKeys {
                format: Some("format"),
                group_size: Some("group_size"),
                seeds: Some("seeds"),
                policy: Some("policies"),
            },
            canon_flow,
            |c: &FlowSimConfig| flow_sim(c),
        ),
        Command::Memory(a) => execute(
            "memory",
            a,
            FlagKeys {
                group_size: Some("group_size"),
                policy: Some("policies"),
                ..FlagKeys::default()
            },
            canon_memory,
            |c: &MemoryConfig| memory_table(c),
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
