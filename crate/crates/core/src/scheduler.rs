//! Unmasking schedulers and the outer decode loop.
//!
//! Every strategy is expressed as "expand each live candidate into children,
//! pool, rank, truncate". Greedy and the parallel baselines keep one
//! candidate; position beam search keeps `K`; the confidence-switched
//! strategy picks the width from the origin of the best new child.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backend::ModelBackend;
use crate::error::{Error, Result};
use crate::metrics::{confidence, ConfidenceMetric};
use crate::state::{
    Beam, Candidate, CandidateStep, DecodeState, DecodeTrace, Mode, PredictionMatrix, StepRecord,
    TokenId, UnmaskedToken, Vocabulary,
};
use crate::subset::{min_candidate_count, top_k_subsets};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Greedy,
    FixedParallel,
    AdaptiveParallel,
    Pbs,
    Soar,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Greedy => "greedy",
            Self::FixedParallel => "fixed-parallel",
            Self::AdaptiveParallel => "adaptive-parallel",
            Self::Pbs => "pbs",
            Self::Soar => "soar",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "greedy" => Ok(Self::Greedy),
            "fixed-parallel" | "parallel" => Ok(Self::FixedParallel),
            "adaptive-parallel" | "adaptive" => Ok(Self::AdaptiveParallel),
            "pbs" => Ok(Self::Pbs),
            "soar" => Ok(Self::Soar),
            other => Err(Error::InvalidConfig(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    /// Positions per step for `Greedy`.
    pub k_per_step: usize,
    /// Positions per step for `FixedParallel` and parallel PBS.
    pub n_parallel: usize,
    /// Confidence threshold for `AdaptiveParallel` and `Soar`.
    pub tau: f64,
    /// Maximum beam width.
    pub beam: usize,
    pub metric: ConfidenceMetric,
    pub max_length: usize,
    /// Top-k requested from the backend per position.
    pub topk: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Soar,
            k_per_step: 1,
            n_parallel: 1,
            tau: 0.9,
            beam: 2,
            metric: ConfidenceMetric::MaxProb,
            max_length: 32,
            topk: 8,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn greedy(k: usize) -> Self {
        Self {
            k_per_step: k,
            ..Self::new(Strategy::Greedy)
        }
    }

    pub fn fixed_parallel(n: usize) -> Self {
        Self {
            n_parallel: n,
            ..Self::new(Strategy::FixedParallel)
        }
    }

    pub fn adaptive_parallel(tau: f64) -> Self {
        Self {
            tau,
            ..Self::new(Strategy::AdaptiveParallel)
        }
    }

    pub fn pbs(n: usize, beam: usize) -> Self {
        Self {
            n_parallel: n,
            beam,
            ..Self::new(Strategy::Pbs)
        }
    }

    pub fn soar(tau: f64, beam: usize) -> Self {
        Self {
            tau,
            beam,
            ..Self::new(Strategy::Soar)
        }
    }

    pub fn with_max_length(mut self, max_length: usize) -> Self {
        self.max_length = max_length;
        self
    }

    pub fn with_metric(mut self, metric: ConfidenceMetric) -> Self {
        self.metric = metric;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !self.tau.is_finite() {
            return bad("tau must be finite");
        }
        if self.beam == 0 {
            return bad("beam width must be at least 1");
        }
        if self.k_per_step == 0 {
            return bad("k_per_step must be at least 1");
        }
        if self.n_parallel == 0 {
            return bad("n_parallel must be at least 1");
        }
        if self.topk < 2 {
            return bad("topk must be at least 2");
        }
        Ok(())
    }

    /// Short human label, e.g. `soar(tau=0.9,K=2)`.
    pub fn label(&self) -> String {
        let metric = if self.metric == ConfidenceMetric::MaxProb {
            String::new()
        } else {
            format!(",{}", self.metric)
        };
        match self.strategy {
            Strategy::Greedy => format!("greedy(k={}{metric})", self.k_per_step),
            Strategy::FixedParallel => format!("fixed-parallel(n={}{metric})", self.n_parallel),
            Strategy::AdaptiveParallel => format!("adaptive-parallel(tau={}{metric})", self.tau),
            Strategy::Pbs => format!("pbs(n={},K={}{metric})", self.n_parallel, self.beam),
            Strategy::Soar => format!("soar(tau={},K={}{metric})", self.tau, self.beam),
        }
    }
}

/// A child produced by one expansion, with what is needed to rank it.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedCandidate {
    pub candidate: Candidate,
    /// Step score of this expansion (zero for parked candidates).
    pub step_gain: f64,
    pub origin_mode: Mode,
    /// Rank of the parent in the beam it was expanded from.
    pub parent_rank: usize,
    /// Positions committed by this expansion, ascending.
    pub positions: Vec<usize>,
    /// Already finished before this step; carried over without expansion.
    pub parked: bool,
}

impl ExpandedCandidate {
    pub fn ranking_key(&self) -> f64 {
        self.candidate.ranking_key()
    }

    fn parked(candidate: Candidate, parent_rank: usize) -> Self {
        Self {
            origin_mode: candidate.last_mode,
            candidate,
            step_gain: 0.0,
            parent_rank,
            positions: Vec::new(),
            parked: true,
        }
    }
}

/// Masked positions with their scores, best first; ties go to the lower position.
fn ranked_positions(
    cand: &Candidate,
    preds: &PredictionMatrix,
    metric: ConfidenceMetric,
    vocab: Vocabulary,
) -> Result<Vec<(usize, f64)>> {
    let masked = cand.state.masked();
    if masked.is_empty() {
        return Err(Error::NothingMasked);
    }
    let mut scored = masked
        .iter()
        .map(|&p| {
            let dist = preds.get(p).ok_or(Error::MissingPrediction(p))?;
            Ok((p, confidence(dist, metric, vocab)?))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored)
}

fn mean(scored: &[(usize, f64)]) -> f64 {
    scored.iter().map(|s| s.1).sum::<f64>() / scored.len() as f64
}

fn make_child(
    cand: &Candidate,
    preds: &PredictionMatrix,
    mut selected: Vec<(usize, f64)>,
    gain: f64,
    mode: Mode,
) -> Result<ExpandedCandidate> {
    selected.sort_by_key(|s| s.0);
    let candidate = cand.child(preds, &selected, gain, mode)?;
    Ok(ExpandedCandidate {
        candidate,
        step_gain: gain,
        origin_mode: mode,
        parent_rank: 0,
        positions: selected.iter().map(|s| s.0).collect(),
        parked: false,
    })
}

fn greedy_child(
    cand: &Candidate,
    preds: &PredictionMatrix,
    k: usize,
    metric: ConfidenceMetric,
    vocab: Vocabulary,
) -> Result<ExpandedCandidate> {
    let mut scored = ranked_positions(cand, preds, metric, vocab)?;
    scored.truncate(k.max(1));
    let mode = if k > 1 {
        Mode::Parallel
    } else {
        Mode::BeamSearch
    };
    let gain = mean(&scored);
    make_child(cand, preds, scored, gain, mode)
}

/// Commits the `k` most confident masked positions.
///
/// Recorded as `Parallel` when `k > 1`, otherwise `BeamSearch`.
pub fn greedy_step(
    cand: &Candidate,
    preds: &PredictionMatrix,
    k: usize,
    metric: ConfidenceMetric,
    vocab: Vocabulary,
) -> Result<Candidate> {
    greedy_child(cand, preds, k, metric, vocab).map(|c| c.candidate)
}

fn adaptive_child(
    cand: &Candidate,
    preds: &PredictionMatrix,
    tau: f64,
    metric: ConfidenceMetric,
    vocab: Vocabulary,
) -> Result<ExpandedCandidate> {
    let scored = ranked_positions(cand, preds, metric, vocab)?;
    let confident: Vec<_> = scored.iter().copied().filter(|s| s.1 > tau).collect();
    if confident.is_empty() {
        let best = vec![scored[0]];
        let gain = best[0].1;
        make_child(cand, preds, best, gain, Mode::BeamSearch)
    } else {
        let gain = mean(&confident);
        make_child(cand, preds, confident, gain, Mode::Parallel)
    }
}

/// Commits every position scoring above `tau`, or the single best one when
/// none does.
///
/// The threshold branch is recorded as `Parallel`, the fallback as
/// `BeamSearch`.
pub fn adaptive_parallel_step(
    cand: &Candidate,
    preds: &PredictionMatrix,
    tau: f64,
    metric: ConfidenceMetric,
    vocab: Vocabulary,
) -> Result<Candidate> {
    adaptive_child(cand, preds, tau, metric, vocab).map(|c| c.candidate)
}

/// Position beam search expansion.
///
/// With `n = 1` the children commit the `k` most confident positions one
/// each. With `n > 1` the top `M` positions (smallest `M` giving at least `k`
/// distinct `n`-subsets) are searched best-first for the `k` highest-total
/// subsets. Fewer than `n` masked positions yields one child committing all.
pub fn pbs_expand(
    cand: &Candidate,
    preds: &PredictionMatrix,
    n: usize,
    k: usize,
    metric: ConfidenceMetric,
    vocab: Vocabulary,
) -> Result<Vec<ExpandedCandidate>> {
    let scored = ranked_positions(cand, preds, metric, vocab)?;
    let n = n.max(1);
    if scored.len() < n {
        let gain = mean(&scored);
        return Ok(vec![make_child(
            cand,
            preds,
            scored,
            gain,
            Mode::BeamSearch,
        )?]);
    }
    let m = min_candidate_count(scored.len(), n, k);
    let top = &scored[..m];
    let scores: Vec<f64> = top.iter().map(|s| s.1).collect();
    top_k_subsets(&scores, n, k)?
        .into_iter()
        .map(|subset| {
            let selected: Vec<_> = subset.indices.iter().map(|&i| top[i]).collect();
            let gain = subset.total / n as f64;
            make_child(cand, preds, selected, gain, Mode::BeamSearch)
        })
        .collect()
}

fn soar_children(
    cand: &Candidate,
    preds: &PredictionMatrix,
    tau: f64,
    k: usize,
    metric: ConfidenceMetric,
    vocab: Vocabulary,
) -> Result<Vec<ExpandedCandidate>> {
    let scored = ranked_positions(cand, preds, metric, vocab)?;
    let confident: Vec<_> = scored.into_iter().filter(|s| s.1 > tau).collect();
    if confident.is_empty() {
        pbs_expand(cand, preds, 1, k, metric, vocab)
    } else {
        let gain = mean(&confident);
        Ok(vec![make_child(
            cand,
            preds,
            confident,
            gain,
            Mode::Parallel,
        )?])
    }
}

fn pool_order(a: &ExpandedCandidate, b: &ExpandedCandidate) -> Ordering {
    b.ranking_key()
        .total_cmp(&a.ranking_key())
        .then(a.parent_rank.cmp(&b.parent_rank))
        .then_with(|| a.positions.cmp(&b.positions))
}

/// Sorts the pool best first and drops repeated states, keeping the
/// better-ranked copy.
pub fn rank_pool(mut pool: Vec<ExpandedCandidate>) -> Vec<ExpandedCandidate> {
    pool.sort_by(pool_order);
    let mut seen: HashSet<DecodeState> = HashSet::with_capacity(pool.len());
    pool.retain(|c| seen.insert(c.candidate.state.clone()));
    pool
}

/// Pools, deduplicates, ranks and truncates to `width`.
pub fn beam_update(pool: Vec<ExpandedCandidate>, width: usize) -> Result<Beam> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let width = width.max(1);
    let mut ranked = rank_pool(pool);
    ranked.truncate(width);
    Ok(Beam {
        candidates: ranked.into_iter().map(|c| c.candidate).collect(),
        max_width: width,
        current_width: width,
    })
}

/// Width rule of the confidence-switched strategy: collapse to one after a
/// parallel winner, otherwise keep up to `k`.
fn switched_width(ranked: &[ExpandedCandidate], k: usize) -> usize {
    match ranked.iter().find(|c| !c.parked).map(|c| c.origin_mode) {
        Some(Mode::Parallel) => 1,
        _ => k.min(ranked.len()).max(1),
    }
}

/// One step of the confidence-switched search over a beam of live candidates.
pub fn soar_step(
    beam: &Beam,
    preds_per_candidate: &[PredictionMatrix],
    tau: f64,
    k: usize,
    metric: ConfidenceMetric,
    vocab: Vocabulary,
) -> Result<Beam> {
    if beam.is_empty() {
        return Err(Error::EmptyBeam);
    }
    if preds_per_candidate.len() != beam.len() {
        return Err(Error::InvalidConfig(format!(
            "{} prediction matrices for {} candidates",
            preds_per_candidate.len(),
            beam.len()
        )));
    }
    let mut pool = Vec::new();
    for (rank, (cand, preds)) in beam.candidates.iter().zip(preds_per_candidate).enumerate() {
        for mut child in soar_children(cand, preds, tau, k, metric, vocab)? {
            child.parent_rank = rank;
            pool.push(child);
        }
    }
    let mut ranked = rank_pool(pool);
    let width = switched_width(&ranked, k);
    ranked.truncate(width);
    Ok(Beam {
        candidates: ranked.into_iter().map(|c| c.candidate).collect(),
        max_width: k.max(1),
        current_width: width,
    })
}

fn expand(
    config: &DecodeConfig,
    cand: &Candidate,
    preds: &PredictionMatrix,
    vocab: Vocabulary,
) -> Result<Vec<ExpandedCandidate>> {
    let metric = config.metric;
    match config.strategy {
        Strategy::Greedy => Ok(vec![greedy_child(
            cand,
            preds,
            config.k_per_step,
            metric,
            vocab,
        )?]),
        Strategy::FixedParallel => Ok(vec![greedy_child(
            cand,
            preds,
            config.n_parallel,
            metric,
            vocab,
        )?]),
        Strategy::AdaptiveParallel => Ok(vec![adaptive_child(
            cand, preds, config.tau, metric, vocab,
        )?]),
        Strategy::Pbs => pbs_expand(cand, preds, config.n_parallel, config.beam, metric, vocab),
        Strategy::Soar => soar_children(cand, preds, config.tau, config.beam, metric, vocab),
    }
}

fn step_failure(step: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::BackendFailure {
        step,
        source: Box::new(e),
    }
}

/// Decodes `config.max_length` tokens after `prompt`.
///
/// Returns the best final candidate's full buffer and the step-by-step trace.
/// One forward pass is charged per live candidate per step; finished
/// candidates are parked and keep competing in the ranking without being
/// re-predicted.
pub fn decode<B: ModelBackend + ?Sized>(
    config: &DecodeConfig,
    backend: &mut B,
    prompt: &[TokenId],
) -> Result<(Vec<TokenId>, DecodeTrace)> {
    config.validate()?;
    let started = Instant::now();
    let vocab = backend.vocabulary();
    let init = DecodeState::fully_masked(prompt, config.max_length, vocab)?;

    let mut beam = vec![Candidate::initial(init)];
    let mut records = Vec::new();
    let mut total_passes = 0;
    let mut next_id = 1u64;

    while beam.iter().any(|c| !c.is_finished()) {
        let step = records.len() + 1;
        let live: Vec<usize> = (0..beam.len())
            .filter(|&i| !beam[i].is_finished())
            .collect();
        let states: Vec<DecodeState> = live.iter().map(|&i| beam[i].state.clone()).collect();
        let preds = backend
            .predict_batch(&states, config.topk)
            .map_err(step_failure(step))?;
        if preds.len() != states.len() {
            return Err(step_failure(step)(Error::Protocol(format!(
                "{} predictions for {} states",
                preds.len(),
                states.len()
            ))));
        }
        for (state, matrix) in states.iter().zip(&preds) {
            matrix.check_covers(state).map_err(step_failure(step))?;
        }
        total_passes += states.len();

        let mut pool = Vec::new();
        for (&rank, matrix) in live.iter().zip(&preds) {
            for mut child in expand(config, &beam[rank], matrix, vocab)? {
                child.parent_rank = rank;
                pool.push(child);
            }
        }
        for (rank, cand) in beam.iter().enumerate().filter(|(_, c)| c.is_finished()) {
            pool.push(ExpandedCandidate::parked(cand.clone(), rank));
        }

        let mut ranked = rank_pool(pool);
        let pool_size = ranked.len();
        let top_mode = ranked
            .iter()
            .find(|c| !c.parked)
            .map_or(Mode::Init, |c| c.origin_mode);
        let width = match config.strategy {
            Strategy::Greedy | Strategy::FixedParallel | Strategy::AdaptiveParallel => 1,
            Strategy::Pbs => config.beam,
            Strategy::Soar => switched_width(&ranked, config.beam),
        };
        ranked.truncate(width);

        let mut per_candidate = Vec::new();
        for child in ranked.iter_mut().filter(|c| !c.parked) {
            child.candidate.id = next_id;
            next_id += 1;
            let ledger = &child.candidate.ledger;
            let fresh = &ledger[ledger.len() - child.positions.len()..];
            per_candidate.push(CandidateStep {
                candidate_id: child.candidate.id,
                parent_id: child.candidate.parent,
                mode: child.origin_mode,
                unmasked: fresh
                    .iter()
                    .map(|e| UnmaskedToken {
                        position: e.position,
                        token: e.token,
                        confidence: e.confidence,
                    })
                    .collect(),
            });
        }
        records.push(StepRecord {
            step_index: step,
            per_candidate,
            forward_passes: states.len(),
            pool_size,
            top_mode,
            beam_width_after: ranked.len(),
        });
        beam = ranked.into_iter().map(|c| c.candidate).collect();
    }

    let final_candidate = beam.swap_remove(0);
    let tokens = final_candidate.state.tokens().to_vec();
    Ok((
        tokens,
        DecodeTrace {
            records,
            final_candidate,
            total_forward_passes: total_passes,
            wall_time: started.elapsed().as_secs_f64(),
        },
    ))
}
