//! Per-position confidence metrics, the step score and sequence-level
//! diagnostics computed from decode traces.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::{DecodeTrace, Mode, PredictionMatrix, TokenDistribution, TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfidenceMetric {
    /// Top-1 probability.
    #[default]
    #[serde(rename = "prob")]
    MaxProb,
    /// Top-1 minus top-2 probability.
    Margin,
    /// Negative Shannon entropy in nats.
    #[serde(rename = "negentropy")]
    NegEntropy,
}

impl ConfidenceMetric {
    /// Closed range of attainable scores.
    pub fn range(self, vocab: Vocabulary) -> (f64, f64) {
        match self {
            Self::MaxProb | Self::Margin => (0.0, 1.0),
            Self::NegEntropy => (-(vocab.size as f64).ln(), 0.0),
        }
    }
}

impl fmt::Display for ConfidenceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MaxProb => "prob",
            Self::Margin => "margin",
            Self::NegEntropy => "negentropy",
        })
    }
}

impl FromStr for ConfidenceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "prob" | "maxprob" => Ok(Self::MaxProb),
            "margin" => Ok(Self::Margin),
            "negentropy" | "neg-entropy" => Ok(Self::NegEntropy),
            other => Err(Error::InvalidConfig(format!("unknown metric {other:?}"))),
        }
    }
}

/// Scores one position's distribution.
///
/// For `NegEntropy` the unlisted mass is spread uniformly over the
/// `vocab.size - k` unlisted tokens, which is exact when that mass is zero.
pub fn confidence(
    dist: &TokenDistribution,
    metric: ConfidenceMetric,
    vocab: Vocabulary,
) -> Result<f64> {
    let probs = dist.top_probs();
    match metric {
        ConfidenceMetric::MaxProb => Ok(probs[0]),
        ConfidenceMetric::Margin => {
            if probs.len() < 2 {
                return Err(Error::InsufficientTopK);
            }
            Ok(probs[0] - probs[1])
        }
        ConfidenceMetric::NegEntropy => {
            let mut neg = probs.iter().map(|&p| p * p.ln()).sum::<f64>();
            let unlisted = (vocab.size as usize).saturating_sub(probs.len());
            let rest = dist.other_mass();
            if rest > 0.0 && unlisted > 0 {
                neg += rest * (rest / unlisted as f64).ln();
            }
            let (lo, hi) = metric.range(vocab);
            Ok(neg.clamp(lo, hi))
        }
    }
}

/// Mean confidence over the selected positions.
pub fn step_score(
    positions: &[usize],
    preds: &PredictionMatrix,
    metric: ConfidenceMetric,
    vocab: Vocabulary,
) -> Result<f64> {
    if positions.is_empty() {
        return Err(Error::EmptySelection);
    }
    let mut sum = 0.0;
    for &p in positions {
        let dist = preds.get(p).ok_or(Error::MissingPrediction(p))?;
        sum += confidence(dist, metric, vocab)?;
    }
    // the mean of in-range values can round just past a bound
    let (lo, hi) = metric.range(vocab);
    Ok((sum / positions.len() as f64).clamp(lo, hi))
}

fn find_subsequence(haystack: &[TokenId], needle: &[TokenId]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    haystack.windows(needle.len()).position(|w| w == needle)
}

/// Mean top-1 probability of the decoded tokens that precede the first
/// occurrence of `delimiter` in the generated region.
pub fn average_confidence(trace: &DecodeTrace, delimiter: Option<&[TokenId]>) -> Result<f64> {
    let cand = &trace.final_candidate;
    let prompt_len = cand.state.prompt_len();
    let cutoff = delimiter
        .and_then(|d| find_subsequence(cand.state.generated(), d))
        .map_or(usize::MAX, |i| prompt_len + i);
    let (sum, count) = cand
        .ledger
        .iter()
        .filter(|e| e.position < cutoff)
        .fold((0.0, 0usize), |(s, n), e| (s + e.max_prob, n + 1));
    if count == 0 {
        return Err(Error::NoTokensInScope);
    }
    Ok(sum / count as f64)
}

/// Fraction of decoded tokens that were among the `k` left-most masked
/// positions when their step began.
///
/// Every token of a multi-token step is compared against the same
/// step-start snapshot of the mask set.
pub fn global_arness(trace: &DecodeTrace, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidConfig(
            "AR-ness window k must be at least 1".into(),
        ));
    }
    let ledger = &trace.final_candidate.ledger;
    if ledger.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let hits = ledger.iter().filter(|e| e.mask_rank < k).count();
    Ok(hits as f64 / ledger.len() as f64)
}

/// Per-bin share of tokens decoded in parallel vs search mode.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ModeShare {
    pub parallel: f64,
    pub search: f64,
}

/// Buckets every decoded token by `step / steps_of_lineage` into `bins`
/// equal intervals and reports the mode mix per bin.
pub fn mode_usage_histogram(traces: &[DecodeTrace], bins: usize) -> Result<Vec<ModeShare>> {
    if bins == 0 {
        return Err(Error::InvalidConfig(
            "histogram needs at least one bin".into(),
        ));
    }
    let mut counts = vec![(0usize, 0usize); bins];
    for trace in traces {
        let cand = &trace.final_candidate;
        let steps = cand.steps_taken.max(1) as f64;
        for e in &cand.ledger {
            let frac = e.step as f64 / steps;
            let bin = ((frac * bins as f64).ceil() as usize).clamp(1, bins) - 1;
            match e.mode {
                Mode::Parallel => counts[bin].0 += 1,
                Mode::BeamSearch => counts[bin].1 += 1,
                Mode::Init => {}
            }
        }
    }
    Ok(counts
        .into_iter()
        .map(|(p, s)| {
            let total = (p + s) as f64;
            if total == 0.0 {
                ModeShare::default()
            } else {
                ModeShare {
                    parallel: p as f64 / total,
                    search: s as f64 / total,
                }
            }
        })
        .collect())
}
