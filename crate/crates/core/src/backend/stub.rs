//! Deterministic stand-in models for protocol and conformance testing.

use serde::{Deserialize, Serialize};

use super::ModelBackend;
use crate::error::{Error, Result};
use crate::state::{DecodeState, PredictionMatrix, TokenDistribution, TokenId, Vocabulary};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded hash model that depends only on (seed, position, masked count).
///
/// For masked position `p` with `m` masks left, `h = splitmix64(seed ^
/// splitmix64(p) ^ splitmix64(m << 32))`. The argmax token is `h % (V - 1)`
/// with probability `0.3 + 0.69 * (h >> 11) / 2^53`; the remaining mass is
/// spread evenly over the other `V - 2` non-mask ids, listed in ascending id
/// order. The mask id is always `V - 1` and never predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubBackend {
    pub vocab_size: u32,
    pub seed: u64,
}

impl StubBackend {
    pub fn new(vocab_size: u32, seed: u64) -> Result<Self> {
        if vocab_size < 3 {
            return Err(Error::InvalidConfig(format!(
                "stub vocabulary needs at least 3 ids, got {vocab_size}"
            )));
        }
        Ok(Self { vocab_size, seed })
    }

    /// Token values are ignored; only the masked set matters.
    pub fn predict_one(
        &self,
        _tokens: &[TokenId],
        masked: &[usize],
        topk: usize,
    ) -> Result<PredictionMatrix> {
        let content = (self.vocab_size - 1) as u64;
        let others = content as usize - 1;
        let m = masked.len() as u64;
        let mut matrix = PredictionMatrix::new();
        for &p in masked {
            let h = splitmix64(self.seed ^ splitmix64(p as u64) ^ splitmix64(m << 32));
            let top = (h % content) as TokenId;
            let peak = 0.3 + 0.69 * ((h >> 11) as f64 / (1u64 << 53) as f64);
            let each = (1.0 - peak) / others as f64;
            let extra = topk.max(2).min(content as usize) - 1;
            let mut tokens = vec![top];
            let mut probs = vec![peak];
            for t in (0..content as TokenId).filter(|&t| t != top).take(extra) {
                tokens.push(t);
                probs.push(each);
            }
            let other_mass = each * (others - extra) as f64;
            matrix.insert(p, TokenDistribution::new(tokens, probs, other_mass)?);
        }
        Ok(matrix)
    }
}

impl ModelBackend for StubBackend {
    fn vocabulary(&self) -> Vocabulary {
        Vocabulary {
            size: self.vocab_size,
            mask_id: self.vocab_size - 1,
        }
    }

    fn predict_batch(
        &mut self,
        states: &[DecodeState],
        topk: usize,
    ) -> Result<Vec<PredictionMatrix>> {
        states
            .iter()
            .map(|s| self.predict_one(s.tokens(), s.masked(), topk))
            .collect()
    }
}

/// Uniform distribution over the whole vocabulary at every position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UniformBackend {
    pub vocab: Vocabulary,
}

impl ModelBackend for UniformBackend {
    fn vocabulary(&self) -> Vocabulary {
        self.vocab
    }

    fn predict_batch(
        &mut self,
        states: &[DecodeState],
        topk: usize,
    ) -> Result<Vec<PredictionMatrix>> {
        let dist = TokenDistribution::uniform(self.vocab.size, topk)?;
        Ok(states
            .iter()
            .map(|s| s.masked().iter().map(|&p| (p, dist.clone())).collect())
            .collect())
    }
}
