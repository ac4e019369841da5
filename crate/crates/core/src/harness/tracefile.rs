//! Trace files: one JSON header line followed by one line per step.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::{DecodeTrace, StepRecord, TokenId};

pub const TRACE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format_version: u32,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub steps: usize,
    pub total_forward_passes: usize,
    pub final_candidate: u64,
    /// Per-token average confidence of the returned candidate.
    pub final_score: f64,
    /// Sum of per-step mean confidences, and that sum over steps taken.
    pub final_cum_score: f64,
    pub final_step_average: f64,
    pub final_tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub records: Vec<StepRecord>,
}

fn header_of(trace: &DecodeTrace) -> TraceHeader {
    let cand = &trace.final_candidate;
    TraceHeader {
        format_version: TRACE_FORMAT_VERSION,
        prompt_len: cand.state.prompt_len(),
        gen_len: cand.state.gen_len(),
        steps: trace.records.len(),
        total_forward_passes: trace.total_forward_passes,
        final_candidate: cand.id,
        final_score: cand.ranking_key(),
        final_cum_score: cand.cum_score,
        final_step_average: cand.step_average(),
        final_tokens: cand.state.tokens().to_vec(),
    }
}

/// Serializes a trace. Wall time is left out so files are reproducible.
pub fn trace_to_string(trace: &DecodeTrace) -> String {
    let mut out = serde_json::to_string(&header_of(trace)).expect("header serializes");
    out.push('\n');
    for record in &trace.records {
        out.push_str(&serde_json::to_string(record).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn emit_trace(trace: &DecodeTrace, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, trace_to_string(trace))?;
    Ok(())
}

pub fn parse_trace(text: &str) -> Result<TraceFile> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let first = lines
        .next()
        .ok_or_else(|| Error::TraceFormat("missing header".into()))?;
    let header: TraceHeader =
        serde_json::from_str(first).map_err(|e| Error::TraceFormat(format!("header: {e}")))?;
    if header.format_version != TRACE_FORMAT_VERSION {
        return Err(Error::TraceFormat(format!(
            "unsupported format_version {}",
            header.format_version
        )));
    }
    let records = lines
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::TraceFormat(format!("record {}: {e}", i + 1)))
        })
        .collect::<Result<Vec<StepRecord>>>()?;
    if records.len() != header.steps {
        return Err(Error::TraceFormat(format!(
            "header announces {} steps, found {}",
            header.steps,
            records.len()
        )));
    }
    Ok(TraceFile { header, records })
}

pub fn read_trace(path: &Path) -> Result<TraceFile> {
    parse_trace(&fs::read_to_string(path)?)
}
