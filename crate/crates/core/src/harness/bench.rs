//! Benchmark sweeps over seeded instances.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tracefile::emit_trace;
use crate::backend::{
    generate_instance, ModelBackend, PlantedBackend, PlantedModelParams, WorkerConnection,
};
use crate::error::{Error, Result};
use crate::metrics::{
    average_confidence, global_arness, mode_usage_histogram, ConfidenceMetric, ModeShare,
};
use crate::scheduler::{decode, DecodeConfig, Strategy};
use crate::state::{DecodeTrace, TokenId, Vocabulary};

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendSpec {
    Planted(PlantedModelParams),
    Worker { command: String, timeout_secs: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub instances: usize,
    /// Instance `i` uses seed `first_seed + i`.
    pub first_seed: u64,
    /// Generated length; overrides each config's `max_length`.
    pub length: usize,
    pub prompt_len: usize,
    pub backend: BackendSpec,
    pub configs: Vec<DecodeConfig>,
    pub arness_k: usize,
    pub histogram_bins: usize,
    pub trace_dir: Option<PathBuf>,
    pub report_path: Option<PathBuf>,
}

impl RunSpec {
    /// `instances` planted instances with default model parameters.
    pub fn planted(instances: usize, length: usize, configs: Vec<DecodeConfig>) -> Self {
        Self {
            instances,
            first_seed: 0,
            length,
            prompt_len: DEFAULT_PROMPT_LEN,
            backend: BackendSpec::Planted(PlantedModelParams::default()),
            configs,
            arness_k: 5,
            histogram_bins: 10,
            trace_dir: None,
            report_path: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.configs.is_empty() {
            return bad("at least one decode config is required");
        }
        if self.arness_k == 0 {
            return bad("arness_k must be at least 1");
        }
        if self.instances == 0 || self.length == 0 {
            return bad("need at least one instance of positive length");
        }
        if self.histogram_bins == 0 {
            return bad("histogram needs at least one bin");
        }
        if let BackendSpec::Planted(p) = &self.backend {
            p.validate()?;
        }
        for c in &self.configs {
            c.validate()?;
        }
        Ok(())
    }

    fn config(&self, base: &DecodeConfig, seed: u64) -> DecodeConfig {
        DecodeConfig {
            max_length: self.length,
            seed,
            ..base.clone()
        }
    }
}

pub const DEFAULT_PROMPT_LEN: usize = 0;

/// Prompt tokens for an instance; never the mask id.
pub fn bench_prompt(seed: u64, prompt_len: usize, vocab: Vocabulary) -> Vec<TokenId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    (0..prompt_len)
        .map(|_| {
            let t = rng.gen_range(0..vocab.size - 1);
            if t >= vocab.mask_id {
                t + 1
            } else {
                t
            }
        })
        .collect()
}

/// Planted parameters for one bench instance.
pub fn instance_params(base: &PlantedModelParams, length: usize, seed: u64) -> PlantedModelParams {
    PlantedModelParams {
        length,
        seed,
        ..base.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub strategy: Strategy,
    pub tau: Option<f64>,
    #[serde(rename = "K")]
    pub beam: Option<usize>,
    pub n: Option<usize>,
    pub metric: ConfidenceMetric,
    /// Planted-token accuracy; absent for worker backends.
    pub mean_accuracy: Option<f64>,
    pub mean_average_confidence: f64,
    pub mean_global_arness_at_k: f64,
    pub total_forward_passes: usize,
    pub wall_time: f64,
    pub speedup_vs_greedy: f64,
    pub wall_speedup_vs_greedy: f64,
    /// Parallel/search token shares over decoding progress.
    pub mode_usage: Vec<ModeShare>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub format_version: u32,
    pub instances: usize,
    pub first_seed: u64,
    pub length: usize,
    pub prompt_len: usize,
    pub arness_k: usize,
    pub backend: BackendSpec,
    pub greedy_forward_passes: usize,
    pub greedy_wall_time: f64,
    pub rows: Vec<ReportRow>,
}

/// Everything kept from one decode.
#[derive(Debug, Clone)]
pub struct InstanceOutcome {
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub average_confidence: f64,
    pub arness: f64,
    pub trace: DecodeTrace,
}

fn open_backend(
    spec: &RunSpec,
    seed: u64,
) -> Result<(
    Box<dyn ModelBackend>,
    Option<crate::backend::PlantedInstance>,
)> {
    match &spec.backend {
        BackendSpec::Planted(base) => {
            let params = instance_params(base, spec.length, seed);
            let instance = generate_instance(&params)?;
            let backend = PlantedBackend::with_instance(params, instance.clone())?;
            Ok((Box::new(backend), Some(instance)))
        }
        BackendSpec::Worker {
            command,
            timeout_secs,
        } => {
            let conn = WorkerConnection::spawn_command_line(
                command,
                Duration::from_secs_f64(*timeout_secs),
            )?;
            Ok((Box::new(conn), None))
        }
    }
}

/// Decodes one instance under each config, in order.
pub fn run_instance(
    spec: &RunSpec,
    configs: &[DecodeConfig],
    seed: u64,
) -> Result<Vec<InstanceOutcome>> {
    let (mut backend, instance) = open_backend(spec, seed)?;
    let prompt = bench_prompt(seed, spec.prompt_len, backend.vocabulary());
    configs
        .iter()
        .map(|base| {
            let config = spec.config(base, seed);
            let (tokens, trace) = decode(&config, &mut backend, &prompt)?;
            Ok(InstanceOutcome {
                seed,
                accuracy: instance
                    .as_ref()
                    .map(|i| i.accuracy(&tokens[prompt.len()..])),
                average_confidence: average_confidence(&trace, None)?,
                arness: global_arness(&trace, spec.arness_k)?,
                trace,
            })
        })
        .collect()
}

fn is_baseline(c: &DecodeConfig) -> bool {
    c.strategy == Strategy::Greedy && c.k_per_step == 1
}

fn trace_file_name(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect::<String>()
        .trim_matches('_')
        .to_string()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Runs every config on every instance.
///
/// Instances run in parallel; results are merged in instance order, so the
/// report depends on the spec alone (apart from wall-time fields). A greedy
/// `k = 1` baseline is run silently when the spec does not include one.
pub fn run_benchmark(spec: &RunSpec) -> Result<BenchmarkReport> {
    run_benchmark_detailed(spec).map(|(report, _)| report)
}

/// Like [`run_benchmark`], also returning every decode outcome indexed by
/// instance, then config (the hidden baseline, if any, last).
pub fn run_benchmark_detailed(
    spec: &RunSpec,
) -> Result<(BenchmarkReport, Vec<Vec<InstanceOutcome>>)> {
    spec.validate()?;
    let mut configs = spec.configs.clone();
    let baseline = match configs.iter().position(is_baseline) {
        Some(i) => i,
        None => {
            configs.push(DecodeConfig {
                topk: spec.configs[0].topk,
                ..DecodeConfig::greedy(1)
            });
            configs.len() - 1
        }
    };

    let per_instance: Vec<Vec<InstanceOutcome>> = (0..spec.instances as u64)
        .into_par_iter()
        .map(|i| run_instance(spec, &configs, spec.first_seed + i))
        .collect::<Result<_>>()?;

    if let Some(dir) = &spec.trace_dir {
        for (c, config) in configs.iter().enumerate().take(spec.configs.len()) {
            let sub = dir.join(trace_file_name(&config.label()));
            for outcomes in &per_instance {
                let o = &outcomes[c];
                emit_trace(&o.trace, &sub.join(format!("seed-{}.jsonl", o.seed)))?;
            }
        }
    }

    let column = |c: usize| per_instance.iter().map(move |o| &o[c]);
    let passes = |c: usize| {
        column(c)
            .map(|o| o.trace.total_forward_passes)
            .sum::<usize>()
    };
    let wall = |c: usize| column(c).map(|o| o.trace.wall_time).sum::<f64>();
    let greedy_passes = passes(baseline);
    let greedy_wall = wall(baseline);

    let mut rows = Vec::with_capacity(spec.configs.len());
    for (c, config) in spec.configs.iter().enumerate() {
        let traces: Vec<DecodeTrace> = column(c).map(|o| o.trace.clone()).collect();
        let accuracy = match spec.backend {
            BackendSpec::Planted(_) => Some(mean(column(c).map(|o| o.accuracy.unwrap_or(0.0)))),
            BackendSpec::Worker { .. } => None,
        };
        let total = passes(c);
        let wall_time = wall(c);
        rows.push(ReportRow {
            label: config.label(),
            strategy: config.strategy,
            tau: matches!(config.strategy, Strategy::AdaptiveParallel | Strategy::Soar)
                .then_some(config.tau),
            beam: matches!(config.strategy, Strategy::Pbs | Strategy::Soar).then_some(config.beam),
            n: match config.strategy {
                Strategy::Greedy => Some(config.k_per_step),
                Strategy::FixedParallel | Strategy::Pbs => Some(config.n_parallel),
                Strategy::Soar => Some(1),
                Strategy::AdaptiveParallel => None,
            },
            metric: config.metric,
            mean_accuracy: accuracy,
            mean_average_confidence: mean(column(c).map(|o| o.average_confidence)),
            mean_global_arness_at_k: mean(column(c).map(|o| o.arness)),
            total_forward_passes: total,
            wall_time,
            speedup_vs_greedy: greedy_passes as f64 / total as f64,
            wall_speedup_vs_greedy: if wall_time > 0.0 {
                greedy_wall / wall_time
            } else {
                0.0
            },
            mode_usage: mode_usage_histogram(&traces, spec.histogram_bins)?,
        });
    }

    let report = BenchmarkReport {
        format_version: REPORT_FORMAT_VERSION,
        instances: spec.instances,
        first_seed: spec.first_seed,
        length: spec.length,
        prompt_len: spec.prompt_len,
        arness_k: spec.arness_k,
        backend: spec.backend.clone(),
        greedy_forward_passes: greedy_passes,
        greedy_wall_time: greedy_wall,
        rows,
    };
    if let Some(path) = &spec.report_path {
        report.write_json(path)?;
    }
    Ok((report, per_instance))
}

impl BenchmarkReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::TraceFormat(format!("report: {e}")))
    }

    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Aligned plain-text table, one row per config.
    pub fn to_table(&self) -> String {
        let headers = [
            "config",
            "acc",
            "avg_conf",
            "ar@k",
            "passes",
            "wall_s",
            "speedup",
            "wall_speedup",
        ];
        let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
        let body: Vec<[String; 8]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.label.clone(),
                    opt(r.mean_accuracy),
                    format!("{:.4}", r.mean_average_confidence),
                    format!("{:.4}", r.mean_global_arness_at_k),
                    r.total_forward_passes.to_string(),
                    format!("{:.3}", r.wall_time),
                    format!("{:.3}", r.speedup_vs_greedy),
                    format!("{:.3}", r.wall_speedup_vs_greedy),
                ]
            })
            .collect();
        let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
        for row in &body {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        let mut line = |cells: &mut dyn Iterator<Item = &str>| {
            let parts: Vec<String> = cells
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| {
                    if i == 0 {
                        format!("{c:<w$}")
                    } else {
                        format!("{c:>w$}")
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&mut headers.iter().copied());
        for row in &body {
            line(&mut row.iter().map(String::as_str));
        }
        out
    }
}
