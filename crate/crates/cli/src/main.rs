//! `maskdecode`: single decodes, benchmark sweeps and the exhaustive order
//! oracle, against the planted model or an external worker process.

mod settings;

use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use maskdecode::backend::{
    generate_instance, serve, PlantedBackend, PlantedInstance, PlantedModelParams, StubBackend,
    UniformBackend, WorkerConnection, DEFAULT_TIMEOUT,
};
use maskdecode::harness::{
    bench_prompt, emit_trace, exhaustive_order_oracle, instance_params, run_benchmark, BackendSpec,
    RunSpec, DEFAULT_PROMPT_LEN,
};
use maskdecode::metrics::{average_confidence, global_arness};
use maskdecode::{
    decode, ConfidenceMetric, DecodeConfig, ModelBackend, Strategy, TokenId, Vocabulary,
};

use settings::{parse_spec, Settings};

#[derive(Parser)]
#[command(
    name = "maskdecode",
    version,
    about = "Decoding-order search for masked diffusion language models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode one sequence and print the result.
    Decode(DecodeArgs),
    /// Run a seeded sweep over several strategies and report the aggregates.
    Bench(BenchArgs),
    /// Find the best-scoring decoding order by exhaustive search (short lengths only).
    Oracle(OracleArgs),
    /// Serve a built-in model over stdin/stdout using the worker protocol.
    #[command(hide = true)]
    MockWorker(MockWorkerArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Planted,
    Worker,
}

#[derive(Args)]
struct BackendArgs {
    /// TOML settings file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    /// Worker command line, split on whitespace.
    #[arg(long)]
    worker_cmd: Option<String>,
    /// Seconds to wait for each worker reply.
    #[arg(long)]
    worker_timeout: Option<f64>,
    /// Top-k requested per position.
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    metric: Option<ConfidenceMetric>,
}

#[derive(Args)]
struct StrategyArgs {
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Confidence threshold (adaptive-parallel, soar).
    #[arg(long)]
    tau: Option<f64>,
    /// Beam width K (pbs, soar).
    #[arg(long)]
    beam: Option<usize>,
    /// Positions per step (fixed-parallel, pbs).
    #[arg(long)]
    n: Option<usize>,
    /// Positions per step for greedy.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    strategy: StrategyArgs,
    #[arg(long)]
    max_length: Option<usize>,
    /// Instance seed (planted model and generated prompt).
    #[arg(long)]
    seed: Option<u64>,
    /// Explicit prompt as comma-separated token ids.
    #[arg(long, value_delimiter = ',')]
    prompt: Option<Vec<TokenId>>,
    /// Length of the seeded prompt used when `--prompt` is absent.
    #[arg(long)]
    prompt_len: Option<usize>,
    /// Write the step trace (JSON lines) here.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    backend: BackendArgs,
    /// Strategy spec such as `soar:tau=0.9,K=2`; repeatable.
    #[arg(long = "run")]
    runs: Vec<String>,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    first_seed: Option<u64>,
    /// Generated length per instance.
    #[arg(long)]
    max_length: Option<usize>,
    #[arg(long)]
    prompt_len: Option<usize>,
    /// Window size for the AR-ness diagnostic.
    #[arg(long)]
    arness_k: Option<usize>,
    /// One trace file per instance and strategy under this directory.
    #[arg(long)]
    trace_dir: Option<PathBuf>,
    /// Write the JSON report here.
    #[arg(long)]
    report_out: Option<PathBuf>,
    /// Print the JSON report instead of the table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long)]
    max_length: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    prompt: Option<Vec<TokenId>>,
    #[arg(long)]
    prompt_len: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MockModel {
    Stub,
    Uniform,
    Planted,
}

#[derive(Args)]
struct MockWorkerArgs {
    #[arg(long, value_enum, default_value = "planted")]
    model: MockModel,
    /// Settings file; only its `[planted]` table is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Vocabulary size for the stub and uniform models.
    #[arg(long, default_value_t = 16)]
    vocab_size: u32,
    /// Generated length the planted model expects.
    #[arg(long, default_value_t = 32)]
    length: usize,
    #[arg(long, default_value_t = DEFAULT_PROMPT_LEN)]
    prompt_len: usize,
}

/// The flag if given, else the settings value, else the default.
fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn parse_opt<T: std::str::FromStr>(value: Option<&String>) -> Result<Option<T>>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    value
        .map(|v| v.parse::<T>())
        .transpose()
        .map_err(Into::into)
}

struct Opened {
    backend: Box<dyn ModelBackend>,
    instance: Option<PlantedInstance>,
}

fn backend_spec(args: &BackendArgs, file: &Settings) -> Result<BackendSpec> {
    let file_kind = match file.backend.as_deref() {
        None => None,
        Some("planted") => Some(BackendKind::Planted),
        Some("worker") => Some(BackendKind::Worker),
        Some(other) => bail!("unknown backend {other:?}"),
    };
    let timeout_secs = pick(
        args.worker_timeout,
        file.worker_timeout,
        DEFAULT_TIMEOUT.as_secs_f64(),
    );
    match pick(args.backend, file_kind, BackendKind::Planted) {
        BackendKind::Planted => Ok(BackendSpec::Planted(
            file.planted.clone().unwrap_or_default(),
        )),
        BackendKind::Worker => {
            let command = args
                .worker_cmd
                .clone()
                .or_else(|| file.worker_cmd.clone())
                .context("--backend worker needs --worker-cmd")?;
            Ok(BackendSpec::Worker {
                command,
                timeout_secs,
            })
        }
    }
}

fn open(spec: &BackendSpec, length: usize, seed: u64) -> Result<Opened> {
    match spec {
        BackendSpec::Planted(base) => {
            let params = instance_params(base, length, seed);
            let instance = generate_instance(&params)?;
            let backend = PlantedBackend::with_instance(params, instance.clone())?;
            Ok(Opened {
                backend: Box::new(backend),
                instance: Some(instance),
            })
        }
        BackendSpec::Worker {
            command,
            timeout_secs,
        } => {
            let conn = WorkerConnection::spawn_command_line(
                command,
                Duration::from_secs_f64(*timeout_secs),
            )?;
            Ok(Opened {
                backend: Box::new(conn),
                instance: None,
            })
        }
    }
}

fn prompt_for(
    explicit: Option<Vec<TokenId>>,
    file: &Settings,
    seed: u64,
    prompt_len: usize,
    vocab: Vocabulary,
) -> Vec<TokenId> {
    explicit
        .or_else(|| file.prompt.clone())
        .unwrap_or_else(|| bench_prompt(seed, prompt_len, vocab))
}

fn join_tokens(tokens: &[TokenId]) -> String {
    tokens
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn decode_config(args: &DecodeArgs, file: &Settings) -> Result<DecodeConfig> {
    let s = &args.strategy;
    let strategy = pick(
        s.strategy,
        parse_opt(file.strategy.as_ref())?,
        Strategy::Soar,
    );
    let defaults = DecodeConfig::new(strategy);
    let config = DecodeConfig {
        strategy,
        k_per_step: pick(s.k, file.k, defaults.k_per_step),
        n_parallel: pick(s.n, file.n, defaults.n_parallel),
        tau: pick(s.tau, file.tau, defaults.tau),
        beam: pick(s.beam, file.beam, defaults.beam),
        metric: pick(
            args.backend.metric,
            parse_opt(file.metric.as_ref())?,
            defaults.metric,
        ),
        max_length: pick(
            args.max_length,
            file.max_length,
            PlantedModelParams::default().length,
        ),
        topk: pick(args.backend.topk, file.topk, defaults.topk),
        seed: pick(args.seed, file.seed, defaults.seed),
    };
    config.validate()?;
    Ok(config)
}

fn run_decode(args: DecodeArgs) -> Result<()> {
    let file = Settings::load(args.backend.config.as_deref())?;
    let config = decode_config(&args, &file)?;
    let spec = backend_spec(&args.backend, &file)?;
    let mut opened = open(&spec, config.max_length, config.seed)?;
    let prompt_len = pick(args.prompt_len, file.prompt_len, DEFAULT_PROMPT_LEN);
    let prompt = prompt_for(
        args.prompt,
        &file,
        config.seed,
        prompt_len,
        opened.backend.vocabulary(),
    );

    let (tokens, trace) = decode(&config, &mut opened.backend, &prompt)?;
    let cand = &trace.final_candidate;
    let generated = &tokens[prompt.len()..];

    let mut out = io::stdout().lock();
    writeln!(out, "config: {}", config.label())?;
    writeln!(out, "prompt: {}", join_tokens(&prompt))?;
    writeln!(out, "generated: {}", join_tokens(generated))?;
    writeln!(out, "score: {:.6}", cand.ranking_key())?;
    writeln!(
        out,
        "average confidence: {:.6}",
        average_confidence(&trace, None)?
    )?;
    writeln!(out, "steps: {}", trace.records.len())?;
    writeln!(out, "forward passes: {}", trace.total_forward_passes)?;
    if !trace.records.is_empty() {
        writeln!(out, "ar-ness@5: {:.4}", global_arness(&trace, 5)?)?;
    }
    if let Some(instance) = &opened.instance {
        writeln!(out, "accuracy: {:.4}", instance.accuracy(generated))?;
    }
    if let Some(path) = args.trace_out.or(file.trace_out) {
        emit_trace(&trace, &path)?;
        writeln!(out, "trace: {}", path.display())?;
    }
    Ok(())
}

fn run_bench(args: BenchArgs) -> Result<()> {
    let file = Settings::load(args.backend.config.as_deref())?;
    let specs = if args.runs.is_empty() {
        file.configs.clone().unwrap_or_else(|| {
            [
                "greedy:k=1",
                "pbs:n=1,K=2",
                "soar:tau=0.9,K=2",
                "fixed-parallel:n=2",
            ]
            .map(String::from)
            .to_vec()
        })
    } else {
        args.runs.clone()
    };
    let metric = parse_opt(file.metric.as_ref())?;
    let mut configs = Vec::with_capacity(specs.len());
    for s in &specs {
        let mut config = parse_spec(s)?;
        if let Some(m) = args.backend.metric.or(metric) {
            config.metric = m;
        }
        if let Some(topk) = args.backend.topk.or(file.topk) {
            config.topk = topk;
        }
        configs.push(config);
    }

    let defaults = RunSpec::planted(1, PlantedModelParams::default().length, Vec::new());
    let spec = RunSpec {
        instances: pick(args.instances, file.instances, 200),
        first_seed: pick(args.first_seed, file.first_seed, defaults.first_seed),
        length: pick(
            args.max_length,
            file.length.or(file.max_length),
            defaults.length,
        ),
        prompt_len: pick(args.prompt_len, file.prompt_len, defaults.prompt_len),
        backend: backend_spec(&args.backend, &file)?,
        configs,
        arness_k: pick(args.arness_k, file.arness_k, defaults.arness_k),
        histogram_bins: file.histogram_bins.unwrap_or(defaults.histogram_bins),
        trace_dir: args.trace_dir.or(file.trace_dir),
        report_path: args.report_out.or(file.report_out),
    };
    let report = run_benchmark(&spec)?;
    let mut out = BufWriter::new(io::stdout().lock());
    if args.json {
        writeln!(out, "{}", report.to_json())?;
    } else {
        write!(out, "{}", report.to_table())?;
    }
    out.flush()?;
    Ok(())
}

fn run_oracle(args: OracleArgs) -> Result<()> {
    let file = Settings::load(args.backend.config.as_deref())?;
    let length = pick(args.max_length, file.max_length, 4);
    let seed = pick(args.seed, file.seed, 0);
    let metric = pick(
        args.backend.metric,
        parse_opt(file.metric.as_ref())?,
        ConfidenceMetric::MaxProb,
    );
    let topk = pick(args.backend.topk, file.topk, DecodeConfig::default().topk);
    let spec = backend_spec(&args.backend, &file)?;
    let mut opened = open(&spec, length, seed)?;
    let prompt_len = pick(args.prompt_len, file.prompt_len, DEFAULT_PROMPT_LEN);
    let prompt = prompt_for(
        args.prompt,
        &file,
        seed,
        prompt_len,
        opened.backend.vocabulary(),
    );

    let result = exhaustive_order_oracle(&mut opened.backend, &prompt, length, metric, topk)?;
    let mut out = io::stdout().lock();
    writeln!(out, "prompt: {}", join_tokens(&prompt))?;
    writeln!(
        out,
        "generated: {}",
        join_tokens(&result.tokens[prompt.len()..])
    )?;
    writeln!(out, "best average: {:.9}", result.average)?;
    writeln!(out, "states explored: {}", result.states_explored)?;
    if let Some(instance) = &opened.instance {
        writeln!(
            out,
            "accuracy: {:.4}",
            instance.accuracy(&result.tokens[prompt.len()..])
        )?;
    }
    Ok(())
}

fn run_mock_worker(args: MockWorkerArgs) -> Result<()> {
    let mut backend: Box<dyn ModelBackend> = match args.model {
        MockModel::Stub => Box::new(StubBackend::new(args.vocab_size, args.seed)?),
        MockModel::Uniform => Box::new(UniformBackend {
            vocab: Vocabulary::new(args.vocab_size, args.vocab_size - 1)?,
        }),
        MockModel::Planted => {
            let base = Settings::load(args.config.as_deref())?
                .planted
                .unwrap_or_default();
            Box::new(PlantedBackend::new(instance_params(
                &base,
                args.length,
                args.seed,
            ))?)
        }
    };
    let stdin = io::stdin().lock();
    let stdout = io::stdout().lock();
    serve(&mut backend, args.prompt_len, stdin, stdout)?;
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Decode(args) => run_decode(args),
        Command::Bench(args) => run_bench(args),
        Command::Oracle(args) => run_oracle(args),
        Command::MockWorker(args) => run_mock_worker(args),
    }
}
