//! Command-line front end. Configuration precedence is built-in defaults,
//! then a TOML file (`--config`), then flags.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::analysis;
use crate::engine::{self, EvictionConfig, EvictionLog, Policy, TieBreak};
use crate::error::{Error, Result};
use crate::toy::{ToyModel, ToyModelConfig};
use crate::trace::{self, DecodeTrace};
use crate::train;

pub const WORKERS_ENV: &str = "GKV_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "gkv", version, about = "KV-cache eviction simulator and analysis toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Replay a trace through one eviction policy.
    Simulate(SimulateArgs),
    /// Run a policy × budget grid over one trace.
    Compare(CompareArgs),
    /// Diagnostics over traces and logs.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// KV, score-cache and mask memory estimates.
    Memory(MemoryArgs),
    /// Generate a trace with the toy transformer.
    Toytrace(ToytraceArgs),
    /// Export the sparse attention masks implied by a log.
    Mask(MaskArgs),
    /// GRPO advantages for one group of rewards.
    Advantages(AdvantagesArgs),
    /// Print a trace header as JSON.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct EvictionArgs {
    /// TOML file with eviction settings.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub policy: Option<Policy>,
    #[arg(long)]
    pub tie_break: Option<TieBreak>,
    #[arg(long)]
    pub sink_tokens: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub compress_prompt: Option<bool>,
    #[arg(long)]
    pub pool_kernel: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub global_pool: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub normalize_local: Option<bool>,
    #[arg(long)]
    pub redundancy_threshold: Option<f64>,
    #[arg(long)]
    pub recent_exempt: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
}

impl EvictionArgs {
    pub fn resolve(&self) -> Result<EvictionConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| with_path(path, e))?;
                toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?
            }
            None => EvictionConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field.clone() {
                    cfg.$field = v;
                }
            )*};
        }
        apply!(budget, window, stride, alpha, lambda, policy, tie_break, sink_tokens, compress_prompt, pool_kernel, global_pool, normalize_local, redundancy_threshold, epsilon);
        if self.recent_exempt.is_some() {
            cfg.recent_exempt = self.recent_exempt;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LogFormat {
    Jsonl,
    Binary,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub trace: PathBuf,
    /// Directory for `log.jsonl` (or `log.bin`) and `metrics.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "jsonl")]
    pub log_format: LogFormat,
    /// Record per-compression wall time in the metrics.
    #[arg(long)]
    pub timing: bool,
    #[command(flatten)]
    pub eviction: EvictionArgs,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    pub policies: Vec<Policy>,
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    pub budgets: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Include mean compression time (not reproducible across runs).
    #[arg(long)]
    pub timing: bool,
    #[command(flatten)]
    pub eviction: EvictionArgs,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Top-p overlap between the last window and earlier windows.
    Overlap(OverlapArgs),
    /// Fraction of keys scoring below p × max.
    Sparsity(SparsityArgs),
    /// Histogram of finally-retained positions.
    Density(DensityArgs),
    /// Counts of finally-retained tokens.
    Frequency(FrequencyArgs),
}

#[derive(Debug, Args)]
pub struct OverlapArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub windows: usize,
    #[arg(long, default_value_t = 128)]
    pub window_size: usize,
    /// Defaults to 0.05, 0.10, ..., 1.0.
    #[arg(long, value_delimiter = ',')]
    pub fractions: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SparsityArgs {
    #[arg(long)]
    pub trace: PathBuf,
    /// Score the caches recorded in this log instead of the full cache.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub window: usize,
    #[arg(long, default_value_t = 512)]
    pub tail: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.05")]
    pub thresholds: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DensityArgs {
    #[arg(long)]
    pub log: PathBuf,
    /// Defaults to the log's sequence length.
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long, default_value_t = 50)]
    pub bins: usize,
    #[arg(long, requires = "head")]
    pub layer: Option<usize>,
    #[arg(long, requires = "layer")]
    pub head: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FrequencyArgs {
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, default_value_t = 0)]
    pub head: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MemoryArgs {
    #[arg(long, default_value_t = 28)]
    pub layers: usize,
    #[arg(long, default_value_t = 128)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub kv_heads: usize,
    /// Bytes per element (2 for bf16).
    #[arg(long, default_value_t = 2)]
    pub bytes_per_el: usize,
    #[arg(long, default_value_t = 16384)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, value_delimiter = ',', default_value = "512,1024,2048")]
    pub budgets: Vec<usize>,
    #[arg(long, default_value_t = 128)]
    pub stride: usize,
    #[arg(long, default_value_t = 16)]
    pub window: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ToytraceArgs {
    /// TOML file with toy model settings.
    #[arg(long, value_name = "FILE")]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated prompt token ids.
    #[arg(long, value_delimiter = ',', conflicts_with = "prompt_len")]
    pub prompt: Vec<u32>,
    /// Random prompt of this length drawn from the seed.
    #[arg(long)]
    pub prompt_len: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub n_generate: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MaskFormat {
    Json,
    Bitset,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: MaskFormat,
    /// Layer and kv head for the dense bitset.
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, default_value_t = 0)]
    pub head: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AdvantagesArgs {
    /// JSON `{"rewards": [...], "truncated": [...]}`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub trace: PathBuf,
}

fn with_path(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| with_path(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| with_path(path, e))
}

fn load_trace(path: &Path) -> Result<DecodeTrace> {
    trace::read_trace(open(path)?)
}

/// Reads a log written as JSON lines or in the binary form (by magic).
pub fn load_log(path: &Path) -> Result<EvictionLog> {
    let bytes = std::fs::read(path).map_err(|e| with_path(path, e))?;
    if bytes.starts_with(b"GKVL") {
        EvictionLog::read_binary(&bytes[..])
    } else {
        EvictionLog::read_jsonl(&bytes[..])
    }
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>, stdout: &mut dyn Write) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => std::fs::write(path, text + "\n")?,
        None => writeln!(stdout, "{text}")?,
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct CompareRow {
    policy: String,
    budget: usize,
    retention_ratio: Option<f64>,
    mean_compress_ms: Option<f64>,
    retained_position_mean: Option<f64>,
    n_compressions: Option<usize>,
    error: Option<String>,
}

fn compare_cell(trace: &DecodeTrace, base: &EvictionConfig, policy: Policy, budget: usize, timing: bool) -> CompareRow {
    let result = (|| {
        let cfg = EvictionConfig {
            budget,
            policy,
            ..base.clone()
        };
        let (log, metrics) = engine::run(trace, &cfg)?;
        let density = analysis::position_density(&log, log.seq_len, 1, None)?;
        Ok::<_, Error>((metrics, density.mean))
    })();
    match result {
        Ok((m, mean)) => CompareRow {
            policy: policy.to_string(),
            budget,
            retention_ratio: Some(m.retention_ratio),
            mean_compress_ms: if timing { m.mean_compress_ms() } else { None },
            retained_position_mean: Some(mean),
            n_compressions: Some(m.n_compressions),
            error: None,
        },
        Err(e) => CompareRow {
            policy: policy.to_string(),
            budget,
            retention_ratio: None,
            mean_compress_ms: None,
            retained_position_mean: None,
            n_compressions: None,
            error: Some(e.to_string()),
        },
    }
}

fn default_fractions() -> Vec<f64> {
    (1..=20).map(|i| i as f64 / 20.0).collect()
}

/// Runs a parsed command, writing human-facing output to `stdout`.
pub fn execute(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => {
            let cfg = a.eviction.resolve()?;
            let trace = load_trace(&a.trace)?;
            let (log, mut metrics) = engine::run(&trace, &cfg)?;
            if !a.timing {
                metrics.compress_ms.clear();
            }
            std::fs::create_dir_all(&a.out)?;
            match a.log_format {
                LogFormat::Jsonl => {
                    let mut w = create(&a.out.join("log.jsonl"))?;
                    log.write_jsonl(&mut w)?;
                    w.flush()?;
                }
                LogFormat::Binary => {
                    let mut w = create(&a.out.join("log.bin"))?;
                    log.write_binary(&mut w)?;
                    w.flush()?;
                }
            }
            write_json(&metrics, Some(&a.out.join("metrics.json")), stdout)?;
            writeln!(
                stdout,
                "{}: {} compressions, retention {:.6}",
                cfg.policy, metrics.n_compressions, metrics.retention_ratio
            )?;
        }
        Command::Compare(a) => {
            let base = a.eviction.resolve()?;
            for &b in &a.budgets {
                EvictionConfig {
                    budget: b,
                    ..base.clone()
                }
                .validate()?;
            }
            let trace = load_trace(&a.trace)?;
            let cells: Vec<(Policy, usize)> = a
                .policies
                .iter()
                .flat_map(|&p| a.budgets.iter().map(move |&b| (p, b)))
                .collect();
            let rows: Vec<CompareRow> = cells
                .into_par_iter()
                .map(|(p, b)| compare_cell(&trace, &base, p, b, a.timing))
                .collect();
            let mut w = csv::Writer::from_writer(create(&a.out)?);
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            writeln!(stdout, "{} cells, {failed} failed", rows.len())?;
        }
        Command::Analyze(cmd) => analyze(cmd, stdout)?,
        Command::Memory(a) => {
            let sc = train::MemoryScenario {
                layers: a.layers,
                head_dim: a.head_dim,
                n_kv_heads: a.kv_heads,
                bytes_per_el: a.bytes_per_el,
                seq_len: a.seq_len,
                batch: a.batch,
                stride: a.stride,
                window: a.window,
            };
            let report = train::memory_report(&sc, &a.budgets)?;
            write_json(&report, a.out.as_deref(), stdout)?;
        }
        Command::Toytrace(a) => {
            let mut cfg: ToyModelConfig = match &a.model_config {
                Some(path) => {
                    let text = std::fs::read_to_string(path).map_err(|e| with_path(path, e))?;
                    toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?
                }
                None => ToyModelConfig::default(),
            };
            if let Some(seed) = a.seed {
                cfg.seed = seed;
            }
            let model = ToyModel::init(cfg.clone())?;
            let prompt = if a.prompt.is_empty() {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
                (0..a.prompt_len.unwrap_or(16))
                    .map(|_| rng.random_range(0..cfg.vocab_size as u32))
                    .collect()
            } else {
                a.prompt
            };
            let out = model.decode_full(&prompt, a.n_generate)?;
            let mut w = create(&a.out)?;
            let bytes = trace::write_trace(&out.trace, &mut w)?;
            w.flush()?;
            writeln!(stdout, "{} steps, {bytes} bytes", out.trace.n_steps())?;
        }
        Command::Mask(a) => {
            let log = load_log(&a.log)?;
            let masks = train::build_masks(&log, a.seq_len.unwrap_or(log.seq_len))?;
            match a.format {
                MaskFormat::Json => {
                    let mut w = create(&a.out)?;
                    masks.write_json(&mut w)?;
                    w.flush()?;
                }
                MaskFormat::Bitset => {
                    if a.layer >= masks.n_layers() || a.head >= masks.n_kv_heads() {
                        return Err(Error::OutOfRange(format!("layer {} head {}", a.layer, a.head)));
                    }
                    std::fs::write(&a.out, masks.dense_bitset(a.layer, a.head))?;
                }
            }
            writeln!(stdout, "{} eviction records", masks.n_records())?;
        }
        Command::Advantages(a) => {
            let group: train::GroupSample = serde_json::from_reader(open(&a.input)?)?;
            write_json(&train::grpo_advantages(&group)?, a.out.as_deref(), stdout)?;
        }
        Command::Inspect(a) => {
            let header = trace::read_header(open(&a.trace)?)?;
            writeln!(stdout, "{}", trace::header_json(&header)?)?;
        }
    }
    Ok(())
}

fn analyze(cmd: AnalyzeCommand, stdout: &mut dyn Write) -> Result<()> {
    match cmd {
        AnalyzeCommand::Overlap(a) => {
            let trace = load_trace(&a.trace)?;
            let fractions = if a.fractions.is_empty() { default_fractions() } else { a.fractions };
            let report = analysis::window_overlap(&trace, a.windows, a.window_size, &fractions)?;
            analysis::write_overlap_csv(&report, create(&a.out)?)?;
            #[derive(Serialize)]
            struct Summary {
                window_size: usize,
                n_windows: usize,
                n_keys: usize,
                rows: usize,
            }
            write_json(
                &Summary {
                    window_size: report.window_size,
                    n_windows: report.n_windows,
                    n_keys: report.n_keys,
                    rows: report.rows.len(),
                },
                None,
                stdout,
            )?;
        }
        AnalyzeCommand::Sparsity(a) => {
            let trace = load_trace(&a.trace)?;
            let report = match &a.log {
                Some(path) => analysis::sparsity_compressed(&trace, &load_log(path)?, &a.thresholds)?,
                None => analysis::sparsity_full(&trace, a.window, a.tail, &a.thresholds)?,
            };
            analysis::write_sparsity_csv(&report, create(&a.out)?)?;
            write_json(&report, None, stdout)?;
        }
        AnalyzeCommand::Density(a) => {
            let log = load_log(&a.log)?;
            let only = a.layer.zip(a.head);
            let hist = analysis::position_density(&log, a.seq_len.unwrap_or(log.seq_len), a.bins, only)?;
            analysis::write_density_csv(&hist, create(&a.out)?)?;
            #[derive(Serialize)]
            struct Summary {
                bins: usize,
                total: u64,
                mean: f64,
            }
            write_json(
                &Summary {
                    bins: hist.counts.len(),
                    total: hist.total,
                    mean: hist.mean,
                },
                None,
                stdout,
            )?;
        }
        AnalyzeCommand::Frequency(a) => {
            let log = load_log(&a.log)?;
            let trace = load_trace(&a.trace)?;
            let ranked = analysis::token_frequency(&log, &trace, a.layer, a.head)?;
            analysis::write_frequency_csv(&ranked, create(&a.out)?)?;
            #[derive(Serialize)]
            struct Summary {
                distinct: usize,
                total: u64,
            }
            write_json(
                &Summary {
                    distinct: ranked.len(),
                    total: ranked.iter().map(|r| r.1).sum(),
                },
                None,
                stdout,
            )?;
        }
    }
    Ok(())
}

fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::config(format!("{WORKERS_ENV}={v} is not a positive integer")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::config(e.to_string()))
}

/// Parses `args` (program name first) and runs; returns the process exit code.
pub fn run_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = worker_pool().and_then(|pool| pool.install(|| execute(cli, &mut std::io::stdout().lock())));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("gkv: {e}");
            e.exit_code()
        }
    }
}
