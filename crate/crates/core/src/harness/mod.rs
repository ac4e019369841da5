//! Benchmark runner, order oracle and trace files.

mod bench;
mod oracle;
mod tracefile;

pub use bench::{
    bench_prompt, instance_params, run_benchmark, run_benchmark_detailed, run_instance,
    BackendSpec, BenchmarkReport, InstanceOutcome, ReportRow, RunSpec, DEFAULT_PROMPT_LEN,
    REPORT_FORMAT_VERSION,
};
pub use oracle::{exhaustive_order_oracle, OracleResult, ORACLE_MAX_LENGTH};
pub use tracefile::{
    emit_trace, parse_trace, read_trace, trace_to_string, TraceFile, TraceHeader,
    TRACE_FORMAT_VERSION,
};
