//! `hybrid-attn` command-line entry point.
//!
//! Exit codes: 0 on success, 1 when a check or computation fails, 2 for bad
//! configuration or input.

mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use hybrid_attn::bench::{self, ReportFormat, SuiteOptions, SuiteReport};
use hybrid_attn::convert::{convert_model, ConversionReport, ConvertOptions};
use hybrid_attn::memlat::{self, kv_cache_bytes, random_prompt, MemoryBreakdown, SweepOptions};
use hybrid_attn::stack::{self, manifest, LayerKind, Layout, ModelConfig, ModelWeights};
use hybrid_attn::{Dtype, Real};
use serde::Serialize;

use config::CliConfig;

/// An error caused by the caller's configuration or arguments.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "hybrid-attn", version, about = "Hybrid sparse/linear attention toolkit")]
struct Cli {
    /// JSON config file; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set model.n_layers=4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the effective config file and optionally random weights.
    Init(InitArgs),
    /// Run the verification checks.
    Verify(VerifyArgs),
    /// Prefill/decode latency sweep with fitted log-log slopes.
    Bench(BenchArgs),
    /// Cache memory per sequence length, hybrid vs all-full.
    Memory(MemoryArgs),
    /// Convert an all-sparse teacher into a hybrid model.
    Convert(ConvertArgs),
    /// Greedy generation with timings.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct InitArgs {
    /// Where to write the config file.
    #[arg(long, default_value = "config.json")]
    path: PathBuf,
    /// Also write seeded random weights to this directory.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Make every layer sparse, producing a conversion teacher.
    #[arg(long)]
    teacher: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Check names to run; all when omitted.
    #[arg(long, value_delimiter = ',')]
    filter: Vec<String>,
    /// Leave out timing checks.
    #[arg(long)]
    skip_perf: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',')]
    lengths: Option<Vec<usize>>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    n_decode: Option<usize>,
    #[arg(long)]
    byte_budget: Option<u64>,
}

#[derive(Args)]
struct MemoryArgs {
    #[arg(long, value_delimiter = ',')]
    lengths: Option<Vec<u64>>,
    #[arg(long)]
    bytes_per_elem: Option<usize>,
}

#[derive(Args)]
struct ConvertArgs {
    /// Directory holding the teacher weight manifest.
    #[arg(long)]
    teacher: PathBuf,
    /// Directory for the converted weights and report.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Fraction of layers kept sparse. Defaults to the config's ratio, or
    /// the library default when the config is a uniform stack.
    #[arg(long)]
    ratio: Option<f64>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Weight directory; seeded random weights for the config when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Comma-separated token ids.
    #[arg(long, value_delimiter = ',', required = true)]
    prompt: Vec<u32>,
    #[arg(long, default_value_t = 16)]
    n_new: usize,
}

/// Resolved settings shared by every subcommand.
struct Ctx {
    cfg: CliConfig,
    seed: u64,
    out_dir: PathBuf,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let cfg = config::load(cli.config.as_deref(), &cli.overrides)?;
        cfg.validate()?;
        let seed = match cli.seed {
            Some(s) => s,
            None => config::env_seed()?.unwrap_or(cfg.harness.seed),
        };
        let out_dir = cli
            .out_dir
            .clone()
            .or_else(|| std::env::var_os(config::OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| cfg.harness.out_dir.clone());
        Ok(Self { cfg, seed, out_dir })
    }

    fn model(&self) -> &ModelConfig {
        &self.cfg.model
    }

    fn out_file(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir).with_context(|| format!("creating {}", self.out_dir.display()))?;
        Ok(self.out_dir.join(name))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn to_json<S: Serialize>(value: &S) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn cmd_init(ctx: &Ctx, args: &InitArgs) -> Result<ExitCode> {
    let mut cfg = ctx.cfg.clone();
    if args.teacher {
        cfg.model = cfg.model.uniform(LayerKind::Sparse);
    }
    cfg.harness.seed = ctx.seed;
    write_text(&args.path, &to_json(&cfg)?)?;
    println!("wrote {}", args.path.display());
    if let Some(dir) = &args.weights {
        match cfg.model.dtype {
            Dtype::F32 => manifest::write_dir(dir, &cfg.model, &ModelWeights::<f32>::random(&cfg.model, ctx.seed)?)?,
            Dtype::F64 => manifest::write_dir(dir, &cfg.model, &ModelWeights::<f64>::random(&cfg.model, ctx.seed)?)?,
        }
        println!("wrote {} (config {})", dir.display(), cfg.model.config_hash());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(ctx: &Ctx, args: &VerifyArgs) -> Result<ExitCode> {
    let opts = SuiteOptions { seed: ctx.seed, skip_perf: args.skip_perf, ..Default::default() };
    let results = bench::run_suite(ctx.model(), &args.filter, &opts)?;
    let report = SuiteReport { config_hash: ctx.model().config_hash(), seed: ctx.seed, results };
    for r in &report.results {
        println!("{}", bench::summary_line(r));
    }
    if report.results.is_empty() {
        println!("no checks selected");
        return Ok(ExitCode::SUCCESS);
    }
    write_text(&ctx.out_file("verify.json")?, &bench::emit_report(&report, ReportFormat::Json)?)?;
    write_text(&ctx.out_file("verify.csv")?, &bench::emit_report(&report, ReportFormat::Csv)?)?;
    let n_pass = report.results.iter().filter(|r| r.status == bench::Status::Pass).count();
    println!("{n_pass}/{} checks passed (config {})", report.results.len(), report.config_hash);
    Ok(if report.all_pass() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_bench(ctx: &Ctx, args: &BenchArgs) -> Result<ExitCode> {
    let h = &ctx.cfg.harness;
    let opts = SweepOptions {
        lengths: args.lengths.clone().unwrap_or_else(|| h.lengths.clone()),
        n_decode: args.n_decode.unwrap_or(h.n_decode),
        repeats: args.repeats.unwrap_or(h.repeats),
        seed: ctx.seed,
        byte_budget: args.byte_budget.or(h.byte_budget),
    };
    let report = memlat::run_latency_sweep(ctx.model(), &opts)?;
    write_text(&ctx.out_file("latency.csv")?, &report.to_csv())?;
    write_text(&ctx.out_file("latency.json")?, &to_json(&report)?)?;
    for (phase, slope) in &report.slopes {
        println!("{:<10} slope {slope:.3}", phase.name());
    }
    for n in &report.oom {
        println!("oom        N={n} exceeds the byte budget");
    }
    if report.slopes.is_empty() {
        println!("too few completed lengths to fit a slope");
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct MemoryRow {
    n_tokens: u64,
    hybrid: MemoryBreakdown,
    full: MemoryBreakdown,
    ratio: Option<f64>,
}

#[derive(Serialize)]
struct MemoryReport {
    config_hash: String,
    bytes_per_elem: usize,
    rows: Vec<MemoryRow>,
}

fn cmd_memory(ctx: &Ctx, args: &MemoryArgs) -> Result<ExitCode> {
    let h = &ctx.cfg.harness;
    let lengths = args.lengths.clone().unwrap_or_else(|| h.memory_lengths.clone());
    let b = args.bytes_per_elem.or(h.bytes_per_elem).unwrap_or_else(|| ctx.model().dtype.size_bytes());
    if b == 0 {
        return Err(UsageError("bytes per element must be positive".into()).into());
    }
    let full_cfg = ctx.model().clone().uniform(LayerKind::Sparse);
    let rows: Vec<MemoryRow> = lengths
        .iter()
        .map(|&n| {
            let hybrid = kv_cache_bytes(ctx.model(), n, b);
            let full = kv_cache_bytes(&full_cfg, n, b);
            MemoryRow { n_tokens: n, ratio: hybrid.ratio, hybrid, full }
        })
        .collect();
    println!("config {}  bytes/elem {b}", ctx.model().config_hash());
    println!("{:>12} {:>16} {:>16} {:>10}", "n_tokens", "hybrid_bytes", "full_bytes", "ratio");
    for r in &rows {
        let ratio = r.ratio.map(|x| format!("{x:.6}")).unwrap_or_else(|| "n/a".into());
        println!("{:>12} {:>16} {:>16} {:>10}", r.n_tokens, r.hybrid.total_bytes, r.full.total_bytes, ratio);
    }
    let report = MemoryReport { config_hash: ctx.model().config_hash(), bytes_per_elem: b, rows };
    write_text(&ctx.out_file("memory.json")?, &to_json(&report)?)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct ConvertSummary {
    config_hash: String,
    teacher_config_hash: String,
    seed: u64,
    /// Tensors outside the converted attention projections whose bytes changed.
    frozen_changed: Vec<String>,
    report: ConversionReport,
}

fn trainable(name: &str, converted: &[usize]) -> bool {
    converted.iter().any(|l| ["wq", "wk", "wv", "wo"].iter().any(|t| name == format!("layers.{l}.{t}")))
}

fn convert_typed<T: Real>(ctx: &Ctx, args: &ConvertArgs) -> Result<ConvertSummary> {
    let (teacher_cfg, teacher) = manifest::read_dir::<T>(&args.teacher)?;
    let h = &ctx.cfg.harness;
    let calib: Vec<Vec<u32>> =
        (0..h.calib_sequences).map(|i| random_prompt(h.calib_len, teacher_cfg.vocab_size, ctx.seed.wrapping_add(i as u64))).collect();
    let held_out: Vec<Vec<u32>> = (0..h.held_out_sequences)
        .map(|i| random_prompt(h.calib_len, teacher_cfg.vocab_size, ctx.seed.wrapping_add((h.calib_sequences + i) as u64)))
        .collect();
    let opts = ConvertOptions {
        sparse_ratio: args.ratio.unwrap_or(match ctx.model().layout {
            Layout::Hybrid => ctx.model().sparse_ratio,
            Layout::Uniform => stack::DEFAULT_SPARSE_RATIO,
        }),
        steps: args.steps.unwrap_or(h.steps),
        lr: args.lr.unwrap_or(h.lr),
        held_out,
    };
    let out = convert_model(&teacher_cfg, &teacher, &calib, &opts)?;
    let before = teacher.tensor_hashes();
    let after = out.weights.tensor_hashes();
    let frozen_changed = before
        .iter()
        .filter(|(name, hash)| !trainable(name, &out.report.converted_layers) && after.get(*name) != Some(*hash))
        .map(|(name, _)| name.clone())
        .collect();
    manifest::write_dir(&args.out, &out.config, &out.weights)?;
    Ok(ConvertSummary {
        config_hash: out.config.config_hash(),
        teacher_config_hash: teacher_cfg.config_hash(),
        seed: ctx.seed,
        frozen_changed,
        report: out.report,
    })
}

fn cmd_convert(ctx: &Ctx, args: &ConvertArgs) -> Result<ExitCode> {
    let m = manifest::read_manifest(&args.teacher).with_context(|| format!("reading teacher manifest in {}", args.teacher.display()))?;
    let summary = match m.config.dtype {
        Dtype::F32 => convert_typed::<f32>(ctx, args)?,
        Dtype::F64 => convert_typed::<f64>(ctx, args)?,
    };
    write_text(&args.out.join("conversion.json"), &to_json(&summary)?)?;
    for d in &summary.report.layers {
        println!("layer {:>3}  mse {:.4e} -> {:.4e}  grad check {:.2e}", d.layer, d.initial_mse, d.final_mse, d.grad_check_max_rel_err);
    }
    println!("converted layers {:?} (config {})", summary.report.converted_layers, summary.config_hash);
    if !summary.frozen_changed.is_empty() {
        eprintln!("frozen tensors changed: {}", summary.frozen_changed.join(", "));
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct GenerateReport {
    config_hash: String,
    seed: u64,
    prompt_len: usize,
    n_new: usize,
    tokens: Vec<u32>,
    ttft_seconds: f64,
    decode_seconds: f64,
    end_to_end_seconds: f64,
}

fn generate_typed<T: Real>(ctx: &Ctx, args: &GenerateArgs) -> Result<(ModelConfig, stack::Generation)> {
    let (cfg, w) = match &args.weights {
        Some(dir) => manifest::read_dir::<T>(dir)?,
        None => (ctx.model().clone(), ModelWeights::<T>::random(ctx.model(), ctx.seed)?),
    };
    let g = stack::generate(&args.prompt, args.n_new, &cfg, &w)?;
    Ok((cfg, g))
}

fn cmd_generate(ctx: &Ctx, args: &GenerateArgs) -> Result<ExitCode> {
    let max = ctx.cfg.harness.max_prompt_len;
    if args.prompt.len() > max {
        return Err(UsageError(format!("prompt has {} tokens; harness.max_prompt_len is {max}", args.prompt.len())).into());
    }
    let dtype = match &args.weights {
        Some(dir) => manifest::read_manifest(dir).with_context(|| format!("reading weight manifest in {}", dir.display()))?.config.dtype,
        None => ctx.model().dtype,
    };
    let (cfg, g) = match dtype {
        Dtype::F32 => generate_typed::<f32>(ctx, args)?,
        Dtype::F64 => generate_typed::<f64>(ctx, args)?,
    };
    let report = GenerateReport {
        config_hash: cfg.config_hash(),
        seed: ctx.seed,
        prompt_len: args.prompt.len(),
        n_new: args.n_new,
        tokens: g.tokens,
        ttft_seconds: g.ttft_seconds,
        decode_seconds: g.decode_seconds,
        end_to_end_seconds: g.end_to_end_seconds,
    };
    write_text(&ctx.out_file("generate.json")?, &to_json(&report)?)?;
    let shown: Vec<String> = report.tokens.iter().map(u32::to_string).collect();
    println!("{}", shown.join(","));
    println!("ttft {:.6}s  decode {:.6}s  total {:.6}s", report.ttft_seconds, report.decode_seconds, report.end_to_end_seconds);
    Ok(ExitCode::SUCCESS)
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let ctx = Ctx::new(cli)?;
    match &cli.command {
        Command::Init(a) => cmd_init(&ctx, a),
        Command::Verify(a) => cmd_verify(&ctx, a),
        Command::Bench(a) => cmd_bench(&ctx, a),
        Command::Memory(a) => cmd_memory(&ctx, a),
        Command::Convert(a) => cmd_convert(&ctx, a),
        Command::Generate(a) => cmd_generate(&ctx, a),
    }
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<std::io::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<hybrid_attn::Error>() {
            use hybrid_attn::Error::*;
            return match e {
                Config(_) | Input(_) | Json(_) | Shape(_) | Io(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

/// The cause chain joined with `: `, skipping causes already quoted by
/// their parent.
fn error_message(err: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !parts.last().is_some_and(|p| p.contains(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", error_message(&e));
            ExitCode::from(exit_code_for(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trainable_names() {
        assert!(trainable("layers.3.wq", &[1, 3]));
        assert!(!trainable("layers.3.gate", &[3]));
        assert!(!trainable("layers.13.wq", &[1, 3]));
        assert!(!trainable("embed", &[0]));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code_for(&UsageError("x".into()).into()), 2);
        assert_eq!(exit_code_for(&hybrid_attn::Error::Input("x".into()).into()), 2);
        assert_eq!(exit_code_for(&hybrid_attn::Error::Numeric("x".into()).into()), 1);
        assert_eq!(exit_code_for(&anyhow::anyhow!("x")), 1);
    }

}
