//! Exhaustive search over single-token unmasking orders.

use std::collections::HashMap;

use crate::backend::ModelBackend;
use crate::error::{Error, Result};
use crate::metrics::{confidence, ConfidenceMetric};
use crate::state::{apply_unmask, DecodeState, TokenId};

/// Longest generation the oracle accepts (6! = 720 orders).
pub const ORACLE_MAX_LENGTH: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    /// Full buffer, prompt included.
    pub tokens: Vec<TokenId>,
    /// Best per-token average confidence.
    pub average: f64,
    /// Distinct states visited.
    pub states_explored: usize,
}

struct Search<'a, B: ?Sized> {
    backend: &'a mut B,
    metric: ConfidenceMetric,
    topk: usize,
    // best remaining confidence sum and the final buffer reached from a state
    memo: HashMap<DecodeState, (f64, Vec<TokenId>)>,
}

impl<B: ModelBackend + ?Sized> Search<'_, B> {
    fn best_from(&mut self, state: &DecodeState) -> Result<(f64, Vec<TokenId>)> {
        if state.is_complete() {
            return Ok((0.0, state.tokens().to_vec()));
        }
        if let Some(hit) = self.memo.get(state) {
            return Ok(hit.clone());
        }
        let vocab = self.backend.vocabulary();
        let preds = self
            .backend
            .predict_batch(std::slice::from_ref(state), self.topk)?
            .pop()
            .ok_or_else(|| Error::Protocol("backend returned no prediction".into()))?;
        preds.check_covers(state)?;

        let mut best: Option<(f64, Vec<TokenId>)> = None;
        for &p in state.masked() {
            let dist = preds.get(p).ok_or(Error::MissingPrediction(p))?;
            let conf = confidence(dist, self.metric, vocab)?;
            let next = apply_unmask(state, &[p], &preds)?;
            let (rest, tokens) = self.best_from(&next)?;
            let total = conf + rest;
            let better = match &best {
                None => true,
                Some((b, t)) => total > *b || (total == *b && tokens < *t),
            };
            if better {
                best = Some((total, tokens));
            }
        }
        let best = best.expect("at least one masked position");
        self.memo.insert(state.clone(), best.clone());
        Ok(best)
    }
}

/// Tries every order of committing one argmax token per step and returns
/// the final buffer with the highest per-token average confidence.
///
/// Ties go to the lexicographically smallest buffer. Identical intermediate
/// states are searched once.
pub fn exhaustive_order_oracle<B: ModelBackend + ?Sized>(
    backend: &mut B,
    prompt: &[TokenId],
    length: usize,
    metric: ConfidenceMetric,
    topk: usize,
) -> Result<OracleResult> {
    if length > ORACLE_MAX_LENGTH {
        return Err(Error::TooLong(length));
    }
    let init = DecodeState::fully_masked(prompt, length, backend.vocabulary())?;
    let mut search = Search {
        backend,
        metric,
        topk,
        memo: HashMap::new(),
    };
    let (sum, tokens) = search.best_from(&init)?;
    Ok(OracleResult {
        tokens,
        average: if length == 0 {
            0.0
        } else {
            sum / length as f64
        },
        states_explored: search.memo.len(),
    })
}
