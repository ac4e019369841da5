//! Synthetic planted-sequence model.
//!
//! Each generated position has a hidden target token, a distractor and a
//! difficulty. The target's probability grows with the share of correctly
//! decoded neighbours inside a window and shrinks with difficulty; most of
//! the remaining mass goes to the distractor. Committing a distractor
//! therefore weakens the evidence available to its neighbours, which is
//! what makes the unmasking order matter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelBackend;
use crate::error::{Error, Result};
use crate::state::{DecodeState, PredictionMatrix, TokenDistribution, TokenId, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedModelParams {
    /// Vocabulary size; the last id is the mask token.
    pub vocab_size: u32,
    /// Generated length `L`.
    pub length: usize,
    /// Neighbourhood half-width.
    pub window: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Floor (and `1 - eps` ceiling) on the target probability.
    pub eps: f64,
    /// Share of the non-target mass given to the distractor.
    pub distractor_share: f64,
    /// Probability that a position draws a difficulty from U(0,1); the rest
    /// have difficulty zero.
    pub hard_fraction: f64,
    pub seed: u64,
}

impl Default for PlantedModelParams {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            length: 32,
            window: 4,
            alpha: 0.5,
            beta: 0.48,
            gamma: 1.4,
            eps: 0.02,
            distractor_share: 0.97,
            hard_fraction: 0.6,
            seed: 0,
        }
    }
}

impl PlantedModelParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.vocab_size < 3 {
            return bad(format!(
                "planted vocabulary needs at least 3 ids, got {}",
                self.vocab_size
            ));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return bad(format!("eps {} outside (0, 0.5)", self.eps));
        }
        if self.alpha + self.beta > 1.0 - self.eps + 1e-12 {
            return bad(format!(
                "alpha + beta = {} exceeds 1 - eps = {}",
                self.alpha + self.beta,
                1.0 - self.eps
            ));
        }
        if !(self.distractor_share > 0.0 && self.distractor_share < 1.0) {
            return bad(format!(
                "distractor share {} outside (0, 1)",
                self.distractor_share
            ));
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return bad(format!(
                "hard fraction {} outside [0, 1]",
                self.hard_fraction
            ));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary {
            size: self.vocab_size,
            mask_id: self.vocab_size - 1,
        }
    }

    /// Target probability for a support fraction and difficulty.
    pub fn target_prob(&self, support: f64, difficulty: f64) -> f64 {
        (self.alpha + self.beta * support - self.gamma * difficulty).clamp(self.eps, 1.0 - self.eps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedInstance {
    pub target: Vec<TokenId>,
    pub difficulty: Vec<f64>,
    pub distractor: Vec<TokenId>,
}

impl PlantedInstance {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    /// Fraction of generated positions holding their target.
    pub fn accuracy(&self, generated: &[TokenId]) -> f64 {
        if self.target.is_empty() {
            return 1.0;
        }
        let hits = self
            .target
            .iter()
            .zip(generated)
            .filter(|(t, g)| t == g)
            .count();
        hits as f64 / self.target.len() as f64
    }
}

/// Draws targets, distractors and difficulties from `params.seed`.
pub fn generate_instance(params: &PlantedModelParams) -> Result<PlantedInstance> {
    params.validate()?;
    let content = params.vocab_size - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut inst = PlantedInstance {
        target: Vec::with_capacity(params.length),
        difficulty: Vec::with_capacity(params.length),
        distractor: Vec::with_capacity(params.length),
    };
    for _ in 0..params.length {
        let target = rng.gen_range(0..content);
        let mut distractor = rng.gen_range(0..content - 1);
        if distractor >= target {
            distractor += 1;
        }
        let difficulty = if rng.gen::<f64>() < params.hard_fraction {
            rng.gen::<f64>()
        } else {
            0.0
        };
        inst.target.push(target);
        inst.distractor.push(distractor);
        inst.difficulty.push(difficulty);
    }
    Ok(inst)
}

/// Share of window neighbours that are prompt tokens or correctly decoded.
fn support(instance: &PlantedInstance, state: &DecodeState, position: usize, window: usize) -> f64 {
    let prompt_len = state.prompt_len();
    let tokens = state.tokens();
    let lo = position.saturating_sub(window);
    let hi = (position + window).min(tokens.len() - 1);
    let mut total = 0usize;
    let mut good = 0usize;
    for j in (lo..=hi).filter(|&j| j != position) {
        total += 1;
        if j < prompt_len || tokens[j] == instance.target[j - prompt_len] {
            good += 1;
        }
    }
    if total == 0 {
        1.0
    } else {
        good as f64 / total as f64
    }
}

/// Top-`topk` distribution for every masked position of `state`.
pub fn planted_predict(
    instance: &PlantedInstance,
    params: &PlantedModelParams,
    state: &DecodeState,
    topk: usize,
) -> Result<PredictionMatrix> {
    if state.gen_len() != instance.len() {
        return Err(Error::LengthMismatch {
            state: state.gen_len(),
            instance: instance.len(),
        });
    }
    let mask_id = params.vocab_size - 1;
    // ids other than target, distractor and mask share the leftover mass
    let others = params.vocab_size as usize - 3;
    let topk = topk.max(2);
    let mut matrix = PredictionMatrix::new();
    for &p in state.masked() {
        let i = p - state.prompt_len();
        let s = params.target_prob(
            support(instance, state, p, params.window),
            instance.difficulty[i],
        );
        let rest = 1.0 - s;
        let (target, distractor) = (instance.target[i], instance.distractor[i]);
        let (p_distractor, each) = if others == 0 {
            (rest, 0.0)
        } else {
            (
                rest * params.distractor_share,
                rest * (1.0 - params.distractor_share) / others as f64,
            )
        };

        let extra = topk.min(others);
        let mut listed = vec![(target, s), (distractor, p_distractor)];
        listed.extend(
            (0..mask_id)
                .filter(|&t| t != target && t != distractor)
                .take(extra)
                .map(|t| (t, each)),
        );
        listed.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let dropped: f64 = listed.iter().skip(topk).map(|e| e.1).sum();
        listed.truncate(topk);
        let other_mass = dropped + each * (others - extra) as f64;
        let (tokens, probs) = listed.into_iter().unzip();
        matrix.insert(p, TokenDistribution::new(tokens, probs, other_mass)?);
    }
    Ok(matrix)
}

/// In-process backend for one planted instance.
#[derive(Debug, Clone)]
pub struct PlantedBackend {
    pub params: PlantedModelParams,
    pub instance: PlantedInstance,
}

impl PlantedBackend {
    pub fn new(params: PlantedModelParams) -> Result<Self> {
        let instance = generate_instance(&params)?;
        Ok(Self { params, instance })
    }

    pub fn with_instance(params: PlantedModelParams, instance: PlantedInstance) -> Result<Self> {
        params.validate()?;
        Ok(Self { params, instance })
    }
}

impl ModelBackend for PlantedBackend {
    fn vocabulary(&self) -> Vocabulary {
        self.params.vocabulary()
    }

    fn predict_batch(
        &mut self,
        states: &[DecodeState],
        topk: usize,
    ) -> Result<Vec<PredictionMatrix>> {
        states
            .iter()
            .map(|s| planted_predict(&self.instance, &self.params, s, topk))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_params() -> PlantedModelParams {
        PlantedModelParams {
            alpha: 0.2,
            beta: 0.75,
            gamma: 0.6,
            eps: 0.02,
            distractor_share: 0.9,
            ..PlantedModelParams::default()
        }
    }

    fn single(difficulty: f64, revealed: bool, params: &PlantedModelParams) -> TokenDistribution {
        // three positions, predict the middle one
        let inst = PlantedInstance {
            target: vec![1, 2, 3],
            difficulty: vec![0.0, difficulty, 0.0],
            distractor: vec![4, 5, 6],
        };
        let mask = params.vocab_size - 1;
        let tokens = if revealed {
            vec![1, mask, 3]
        } else {
            vec![mask, mask, mask]
        };
        let state = DecodeState::from_tokens(tokens, 0, params.vocabulary()).unwrap();
        let m = planted_predict(&inst, params, &state, 8).unwrap();
        m.get(1).unwrap().clone()
    }

    #[test]
    fn full_support_easy_position() {
        let d = single(0.0, true, &reference_params());
        assert_eq!(d.argmax(), 2);
        assert!((d.max_prob() - 0.95).abs() < 1e-12);
    }

    #[test]
    fn no_support_hard_position_prefers_distractor() {
        let d = single(1.0, false, &reference_params());
        assert_eq!(d.argmax(), 5);
        assert!((d.max_prob() - 0.882).abs() < 1e-12);
        let target = d.top_tokens().iter().position(|&t| t == 2).unwrap();
        assert!((d.top_probs()[target] - 0.02).abs() < 1e-12);
    }

    #[test]
    fn mass_sums_to_one() {
        let params = reference_params();
        let inst = generate_instance(&params).unwrap();
        let state = DecodeState::fully_masked(&[], params.length, params.vocabulary()).unwrap();
        for topk in [2, 5, 8, 100] {
            let m = planted_predict(&inst, &params, &state, topk).unwrap();
            assert_eq!(m.len(), params.length);
            for (_, d) in m.iter() {
                let total: f64 = d.top_probs().iter().sum::<f64>() + d.other_mass();
                assert!((total - 1.0).abs() < 1e-9);
                assert!(!d.top_tokens().contains(&(params.vocab_size - 1)));
            }
        }
    }

    #[test]
    fn tiny_vocabulary_folds_leftover_into_distractor() {
        let params = PlantedModelParams {
            vocab_size: 3,
            length: 2,
            ..reference_params()
        };
        let inst = generate_instance(&params).unwrap();
        let state = DecodeState::fully_masked(&[], 2, params.vocabulary()).unwrap();
        let m = planted_predict(&inst, &params, &state, 8).unwrap();
        for (_, d) in m.iter() {
            assert_eq!(d.top_tokens().len(), 2);
            assert_eq!(d.other_mass(), 0.0);
        }
    }

    #[test]
    fn instances_are_seeded() {
        let params = PlantedModelParams {
            length: 8,
            ..PlantedModelParams::default()
        };
        let a = generate_instance(&params).unwrap();
        assert_eq!(a, generate_instance(&params).unwrap());
        assert_eq!(a.target.len(), 8);
        assert_eq!(a.distractor.len(), 8);
        assert_eq!(a.difficulty.len(), 8);
        assert!(a.difficulty.iter().all(|d| (0.0..=1.0).contains(d)));
        assert!(a.target.iter().zip(&a.distractor).all(|(t, z)| t != z));
    }

    #[test]
    fn length_mismatch() {
        let params = PlantedModelParams {
            length: 4,
            ..PlantedModelParams::default()
        };
        let inst = generate_instance(&params).unwrap();
        let state = DecodeState::fully_masked(&[], 3, params.vocabulary()).unwrap();
        assert!(matches!(
            planted_predict(&inst, &params, &state, 8),
            Err(Error::LengthMismatch {
                state: 3,
                instance: 4
            })
        ));
    }

    #[test]
    fn target_prob_is_monotone() {
        let params = reference_params();
        let grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        for &d in &grid {
            for w in grid.windows(2) {
                assert!(params.target_prob(w[1], d) >= params.target_prob(w[0], d));
                assert!(params.target_prob(d, w[1]) <= params.target_prob(d, w[0]));
            }
        }
    }

    #[test]
    fn invalid_params() {
        for p in [
            PlantedModelParams {
                eps: 0.6,
                ..Default::default()
            },
            PlantedModelParams {
                alpha: 0.6,
                ..Default::default()
            },
        ] {
            assert!(p.validate().is_err());
        }
    }
}
