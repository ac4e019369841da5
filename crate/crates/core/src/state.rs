//! Sequences, masks, predictions, candidates and traces.
//!
//! Positions always index the full buffer (prompt followed by the generated
//! region). Only generated-region positions may ever be masked.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Tolerance on the total probability mass of a distribution.
pub const MASS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub size: u32,
    pub mask_id: TokenId,
}

impl Vocabulary {
    pub fn new(size: u32, mask_id: TokenId) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidConfig(format!("vocabulary size {size} < 2")));
        }
        if mask_id >= size {
            return Err(Error::InvalidConfig(format!(
                "mask id {mask_id} outside vocabulary of size {size}"
            )));
        }
        Ok(Self { size, mask_id })
    }
}

/// Token buffer plus the ascending list of still-masked positions.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DecodeState {
    prompt_len: usize,
    tokens: Vec<TokenId>,
    masked: Vec<usize>,
}

impl DecodeState {
    /// Prompt followed by `length` mask tokens.
    pub fn fully_masked(prompt: &[TokenId], length: usize, vocab: Vocabulary) -> Result<Self> {
        if prompt.contains(&vocab.mask_id) {
            return Err(Error::InvalidState("prompt contains the mask token".into()));
        }
        if let Some(t) = prompt.iter().find(|&&t| t >= vocab.size) {
            return Err(Error::InvalidState(format!(
                "prompt token {t} outside vocabulary of size {}",
                vocab.size
            )));
        }
        let mut tokens = prompt.to_vec();
        tokens.resize(prompt.len() + length, vocab.mask_id);
        Ok(Self {
            prompt_len: prompt.len(),
            masked: (prompt.len()..prompt.len() + length).collect(),
            tokens,
        })
    }

    /// Builds a state from a raw buffer, deriving the masked set from `mask_id`.
    pub fn from_tokens(tokens: Vec<TokenId>, prompt_len: usize, vocab: Vocabulary) -> Result<Self> {
        if prompt_len > tokens.len() {
            return Err(Error::InvalidState(format!(
                "prompt length {prompt_len} exceeds buffer length {}",
                tokens.len()
            )));
        }
        if tokens[..prompt_len].contains(&vocab.mask_id) {
            return Err(Error::InvalidState("prompt contains the mask token".into()));
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= vocab.size) {
            return Err(Error::InvalidState(format!(
                "token {t} outside vocabulary of size {}",
                vocab.size
            )));
        }
        let masked = (prompt_len..tokens.len())
            .filter(|&p| tokens[p] == vocab.mask_id)
            .collect();
        Ok(Self {
            prompt_len,
            tokens,
            masked,
        })
    }

    /// Builds a state from wire data, checking that `masked` and the mask
    /// tokens agree.
    pub fn from_parts(
        tokens: Vec<TokenId>,
        masked: Vec<usize>,
        prompt_len: usize,
        vocab: Vocabulary,
    ) -> Result<Self> {
        let state = Self::from_tokens(tokens, prompt_len, vocab)?;
        if state.masked != masked {
            return Err(Error::InvalidState(format!(
                "masked list {masked:?} disagrees with mask tokens at {:?}",
                state.masked
            )));
        }
        Ok(state)
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn is_masked(&self, position: usize) -> bool {
        self.masked.binary_search(&position).is_ok()
    }

    /// Length of the generated region.
    pub fn gen_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    pub fn is_complete(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.tokens[self.prompt_len..]
    }
}

/// Top-k compressed categorical distribution for one position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    top_tokens: Vec<TokenId>,
    top_probs: Vec<f64>,
    other_mass: f64,
}

impl TokenDistribution {
    pub fn new(top_tokens: Vec<TokenId>, top_probs: Vec<f64>, other_mass: f64) -> Result<Self> {
        let bad = |msg: String| Err(Error::InvalidDistribution(msg));
        if top_tokens.is_empty() {
            return bad("no tokens listed".into());
        }
        if top_tokens.len() != top_probs.len() {
            return bad(format!(
                "{} tokens but {} probabilities",
                top_tokens.len(),
                top_probs.len()
            ));
        }
        if let Some(p) = top_probs.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return bad(format!("probability {p} outside (0, 1]"));
        }
        if top_probs.windows(2).any(|w| w[1] > w[0]) {
            return bad("probabilities are not non-increasing".into());
        }
        if !(other_mass.is_finite() && other_mass >= 0.0) {
            return bad(format!("other mass {other_mass} is negative or not finite"));
        }
        let total: f64 = top_probs.iter().sum::<f64>() + other_mass;
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return bad(format!("total mass {total} is not 1"));
        }
        Ok(Self {
            top_tokens,
            top_probs,
            other_mass,
        })
    }

    /// Uniform distribution over the first `k` ids of a vocabulary of `size` tokens.
    pub fn uniform(size: u32, k: usize) -> Result<Self> {
        let k = k.min(size as usize).max(1);
        let p = 1.0 / size as f64;
        Self::new(
            (0..k as TokenId).collect(),
            vec![p; k],
            p * (size as usize - k) as f64,
        )
    }

    pub fn top_tokens(&self) -> &[TokenId] {
        &self.top_tokens
    }

    pub fn top_probs(&self) -> &[f64] {
        &self.top_probs
    }

    pub fn other_mass(&self) -> f64 {
        self.other_mass
    }

    pub fn argmax(&self) -> TokenId {
        self.top_tokens[0]
    }

    pub fn max_prob(&self) -> f64 {
        self.top_probs[0]
    }
}

/// Backend output for one state: one distribution per masked position.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionMatrix {
    entries: BTreeMap<usize, TokenDistribution>,
}

impl PredictionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, position: usize, dist: TokenDistribution) {
        self.entries.insert(position, dist);
    }

    pub fn get(&self, position: usize) -> Option<&TokenDistribution> {
        self.entries.get(&position)
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &TokenDistribution)> {
        self.entries.iter().map(|(p, d)| (*p, d))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks that the key set is exactly the state's masked set.
    pub fn check_covers(&self, state: &DecodeState) -> Result<()> {
        if self.entries.len() != state.masked().len()
            || !self.positions().eq(state.masked().iter().copied())
        {
            return Err(Error::Protocol(format!(
                "prediction covers positions {:?}, state has masked {:?}",
                self.positions().collect::<Vec<_>>(),
                state.masked()
            )));
        }
        Ok(())
    }
}

impl FromIterator<(usize, TokenDistribution)> for PredictionMatrix {
    fn from_iter<I: IntoIterator<Item = (usize, TokenDistribution)>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

/// Which decoding mode produced a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Init,
    Parallel,
    BeamSearch,
}

/// One committed token in a candidate's lineage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub position: usize,
    pub token: TokenId,
    /// Score under the decoding metric.
    pub confidence: f64,
    /// Top-1 probability, independent of the decoding metric.
    pub max_prob: f64,
    /// 1-based step of the lineage in which the token was committed.
    pub step: usize,
    pub mode: Mode,
    /// Number of masked positions left of this one when its step started.
    pub mask_rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: u64,
    pub parent: Option<u64>,
    pub state: DecodeState,
    /// Sum of per-step mean confidences.
    pub cum_score: f64,
    pub token_conf_sum: f64,
    pub tokens_decoded: usize,
    pub steps_taken: usize,
    pub last_mode: Mode,
    pub ledger: Vec<LedgerEntry>,
}

impl Candidate {
    pub fn initial(state: DecodeState) -> Self {
        Self {
            id: 0,
            parent: None,
            state,
            cum_score: 0.0,
            token_conf_sum: 0.0,
            tokens_decoded: 0,
            steps_taken: 0,
            last_mode: Mode::Init,
            ledger: Vec::new(),
        }
    }

    /// Per-token average confidence; zero before anything is decoded.
    pub fn ranking_key(&self) -> f64 {
        if self.tokens_decoded == 0 {
            0.0
        } else {
            self.token_conf_sum / self.tokens_decoded as f64
        }
    }

    /// Cumulative step score divided by steps taken.
    pub fn step_average(&self) -> f64 {
        if self.steps_taken == 0 {
            0.0
        } else {
            self.cum_score / self.steps_taken as f64
        }
    }

    pub fn is_finished(&self) -> bool {
        self.state.is_complete()
    }

    /// Child that commits `positions` with the given per-position scores.
    ///
    /// `scored` pairs each position with its metric confidence; `gain` is the
    /// step score added to `cum_score`.
    pub(crate) fn child(
        &self,
        preds: &PredictionMatrix,
        scored: &[(usize, f64)],
        gain: f64,
        mode: Mode,
    ) -> Result<Self> {
        let positions: Vec<usize> = scored.iter().map(|&(p, _)| p).collect();
        let state = apply_unmask(&self.state, &positions, preds)?;
        let step = self.steps_taken + 1;
        let mut ledger = self.ledger.clone();
        let mut conf_sum = self.token_conf_sum;
        for &(position, confidence) in scored {
            let dist = preds
                .get(position)
                .ok_or(Error::MissingPrediction(position))?;
            let mask_rank = self.state.masked().partition_point(|&m| m < position);
            ledger.push(LedgerEntry {
                position,
                token: dist.argmax(),
                confidence,
                max_prob: dist.max_prob(),
                step,
                mode,
                mask_rank,
            });
            conf_sum += confidence;
        }
        Ok(Self {
            id: 0,
            parent: Some(self.id),
            state,
            cum_score: self.cum_score + gain,
            token_conf_sum: conf_sum,
            tokens_decoded: self.tokens_decoded + scored.len(),
            steps_taken: step,
            last_mode: mode,
            ledger,
        })
    }
}

/// Ranked candidates with the current and maximum width.
#[derive(Debug, Clone, PartialEq)]
pub struct Beam {
    pub candidates: Vec<Candidate>,
    pub max_width: usize,
    pub current_width: usize,
}

impl Beam {
    pub fn initial(state: DecodeState, max_width: usize) -> Self {
        Self {
            candidates: vec![Candidate::initial(state)],
            max_width: max_width.max(1),
            current_width: 1,
        }
    }

    pub fn best(&self) -> Option<&Candidate> {
        self.candidates.first()
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnmaskedToken {
    pub position: usize,
    pub token: TokenId,
    pub confidence: f64,
}

/// What one surviving candidate did in a step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateStep {
    pub candidate_id: u64,
    pub parent_id: Option<u64>,
    pub mode: Mode,
    pub unmasked: Vec<UnmaskedToken>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_index: usize,
    /// Newly created survivors in rank order.
    pub per_candidate: Vec<CandidateStep>,
    pub forward_passes: usize,
    /// Distinct candidates ranked this step, parked ones included.
    pub pool_size: usize,
    /// Origin of the best newly created child.
    pub top_mode: Mode,
    pub beam_width_after: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace {
    pub records: Vec<StepRecord>,
    pub final_candidate: Candidate,
    pub total_forward_passes: usize,
    pub wall_time: f64,
}

impl DecodeTrace {
    pub fn final_tokens(&self) -> &[TokenId] {
        self.final_candidate.state.tokens()
    }
}

/// Commits the argmax token at each of `positions`.
pub fn apply_unmask(
    state: &DecodeState,
    positions: &[usize],
    preds: &PredictionMatrix,
) -> Result<DecodeState> {
    let mut next = state.clone();
    for &p in positions {
        let idx = next
            .masked
            .binary_search(&p)
            .map_err(|_| Error::PositionNotMasked(p))?;
        let dist = preds.get(p).ok_or(Error::MissingPrediction(p))?;
        next.masked.remove(idx);
        next.tokens[p] = dist.argmax();
    }
    Ok(next)
}

/// Masks `round(rho * L)` generated positions chosen uniformly by `seed`.
///
/// Rounding is half-up.
pub fn forward_mask(
    tokens: &[TokenId],
    prompt_len: usize,
    rho: f64,
    seed: u64,
    vocab: Vocabulary,
) -> Result<DecodeState> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidConfig(format!(
            "mask ratio {rho} outside [0, 1]"
        )));
    }
    if prompt_len > tokens.len() {
        return Err(Error::InvalidState("prompt longer than buffer".into()));
    }
    if tokens.contains(&vocab.mask_id) {
        return Err(Error::InvalidState(
            "tokens already contain the mask id".into(),
        ));
    }
    let gen_len = tokens.len() - prompt_len;
    let count = ((rho * gen_len as f64) + 0.5).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = tokens.to_vec();
    let mut masked: Vec<usize> = index::sample(&mut rng, gen_len, count.min(gen_len))
        .into_iter()
        .map(|i| prompt_len + i)
        .collect();
    masked.sort_unstable();
    for &p in &masked {
        buf[p] = vocab.mask_id;
    }
    Ok(DecodeState {
        prompt_len,
        tokens: buf,
        masked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(16, 15).unwrap()
    }

    fn dist(top: TokenId) -> TokenDistribution {
        TokenDistribution::new(vec![top, 0], vec![0.6, 0.3], 0.1).unwrap()
    }

    fn state_masking(positions: &[usize]) -> DecodeState {
        let mut tokens = vec![1, 2, 3, 4];
        for &p in positions {
            tokens[p] = 15;
        }
        DecodeState::from_tokens(tokens, 0, vocab()).unwrap()
    }

    #[test]
    fn vocabulary_bounds() {
        assert!(Vocabulary::new(1, 0).is_err());
        assert!(Vocabulary::new(4, 4).is_err());
        assert!(Vocabulary::new(2, 1).is_ok());
    }

    #[test]
    fn unmask_empty_selection_is_identity() {
        let s = state_masking(&[2, 3]);
        let out = apply_unmask(&s, &[], &PredictionMatrix::new()).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn unmask_single_position() {
        let s = state_masking(&[2, 3]);
        let preds: PredictionMatrix = [(2, dist(7)), (3, dist(9))].into_iter().collect();
        let out = apply_unmask(&s, &[2], &preds).unwrap();
        assert_eq!(out.tokens()[2], 7);
        assert_eq!(out.masked(), &[3]);
        // input untouched
        assert_eq!(s.masked(), &[2, 3]);
    }

    #[test]
    fn unmask_rejects_unmasked_position() {
        let s = state_masking(&[3]);
        let preds: PredictionMatrix = [(2, dist(7)), (3, dist(9))].into_iter().collect();
        assert!(matches!(
            apply_unmask(&s, &[2], &preds),
            Err(Error::PositionNotMasked(2))
        ));
    }

    #[test]
    fn unmask_requires_prediction() {
        let s = state_masking(&[2, 3]);
        let preds: PredictionMatrix = [(2, dist(7))].into_iter().collect();
        assert!(matches!(
            apply_unmask(&s, &[3], &preds),
            Err(Error::MissingPrediction(3))
        ));
    }

    #[test]
    fn forward_mask_boundaries() {
        let tokens: Vec<TokenId> = (0..8).collect();
        let none = forward_mask(&tokens, 0, 0.0, 3, vocab()).unwrap();
        assert!(none.masked().is_empty());
        let all = forward_mask(&tokens, 2, 1.0, 3, vocab()).unwrap();
        assert_eq!(all.masked(), &[2, 3, 4, 5, 6, 7]);
        assert!(all.tokens()[..2].iter().all(|&t| t != 15));
    }

    #[test]
    fn forward_mask_is_seeded() {
        let tokens: Vec<TokenId> = (0..8).collect();
        let a = forward_mask(&tokens, 0, 0.5, 0, vocab()).unwrap();
        let b = forward_mask(&tokens, 0, 0.5, 0, vocab()).unwrap();
        assert_eq!(a.masked().len(), 4);
        assert_eq!(a, b);
    }

    #[test]
    fn forward_mask_rounds_half_up() {
        let tokens: Vec<TokenId> = (0..5).collect();
        // 0.5 * 5 = 2.5 -> 3
        let s = forward_mask(&tokens, 0, 0.5, 1, vocab()).unwrap();
        assert_eq!(s.masked().len(), 3);
    }

    #[test]
    fn distribution_validation() {
        assert!(TokenDistribution::new(vec![1, 2], vec![0.3, 0.5], 0.2).is_err());
        assert!(TokenDistribution::new(vec![1, 2], vec![0.5, 0.3], 0.1).is_err());
        assert!(TokenDistribution::new(vec![1, 2], vec![0.5, 0.0], 0.5).is_err());
        assert!(TokenDistribution::new(vec![1, 2], vec![0.5, 0.3], 0.2).is_ok());
    }

    #[test]
    fn child_keeps_ledger_consistent() {
        let s = state_masking(&[1, 2, 3]);
        let preds: PredictionMatrix = [(1, dist(5)), (2, dist(6)), (3, dist(7))]
            .into_iter()
            .collect();
        let root = Candidate::initial(s);
        let c = root
            .child(&preds, &[(3, 0.6), (1, 0.6)], 0.6, Mode::Parallel)
            .unwrap();
        assert_eq!(c.tokens_decoded + c.state.masked().len(), 3);
        assert_eq!(c.ledger[0].mask_rank, 2);
        assert_eq!(c.ledger[1].mask_rank, 0);
        assert_eq!(c.steps_taken, 1);
        assert!((c.ranking_key() - 0.6).abs() < 1e-12);
    }
}
