use maskdecode::backend::protocol::{decode_response, encode_prediction};
use maskdecode::backend::{PlantedBackend, PlantedModelParams, StubBackend, UniformBackend};
use maskdecode::{
    decode, ConfidenceMetric, DecodeConfig, DecodeState, Mode, ModelBackend, PredictionMatrix,
    TokenDistribution, TokenId, Vocabulary,
};
use proptest::prelude::*;

fn planted(seed: u64, length: usize) -> PlantedBackend {
    PlantedBackend::new(PlantedModelParams {
        length,
        seed,
        ..PlantedModelParams::default()
    })
    .unwrap()
}

#[test]
fn zero_length_returns_prompt() {
    let mut backend = StubBackend::new(16, 1).unwrap();
    for config in [
        DecodeConfig::greedy(1),
        DecodeConfig::pbs(1, 3),
        DecodeConfig::soar(0.5, 2),
    ] {
        let (tokens, trace) = decode(&config.with_max_length(0), &mut backend, &[3, 4]).unwrap();
        assert_eq!(tokens, vec![3, 4]);
        assert!(trace.records.is_empty());
        assert_eq!(trace.total_forward_passes, 0);
    }
}

#[test]
fn forward_pass_counts() {
    let mut backend = planted(3, 16);
    let (_, greedy) = decode(
        &DecodeConfig::greedy(1).with_max_length(16),
        &mut backend,
        &[],
    )
    .unwrap();
    assert_eq!(greedy.total_forward_passes, 16);
    assert_eq!(greedy.records.len(), 16);

    // one live candidate on the first step, two on every later one
    let (_, pbs) = decode(
        &DecodeConfig::pbs(1, 2).with_max_length(16),
        &mut backend,
        &[],
    )
    .unwrap();
    assert_eq!(pbs.total_forward_passes, 31);

    let (_, fixed) = decode(
        &DecodeConfig::fixed_parallel(4).with_max_length(16),
        &mut backend,
        &[],
    )
    .unwrap();
    assert_eq!(fixed.total_forward_passes, 4);

    let (_, one_shot) = decode(
        &DecodeConfig::soar(0.0, 2).with_max_length(16),
        &mut backend,
        &[],
    )
    .unwrap();
    assert_eq!(one_shot.records.len(), 1);
    assert_eq!(one_shot.records[0].top_mode, Mode::Parallel);
}

#[test]
fn uniform_model_decodes_every_position() {
    let mut backend = UniformBackend {
        vocab: Vocabulary::new(10, 9).unwrap(),
    };
    let config = DecodeConfig::pbs(2, 3)
        .with_metric(ConfidenceMetric::NegEntropy)
        .with_max_length(7);
    let (tokens, trace) = decode(&config, &mut backend, &[1]).unwrap();
    assert_eq!(tokens.len(), 8);
    assert!(tokens.iter().all(|&t| t != 9));
    assert!((trace.final_candidate.ranking_key() + 10f64.ln()).abs() < 1e-9);
}

/// Two positions where committing position 1 first makes position 0 easy.
struct OrderMatters;

impl ModelBackend for OrderMatters {
    fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(4, 3).unwrap()
    }

    fn predict_batch(
        &mut self,
        states: &[DecodeState],
        _topk: usize,
    ) -> maskdecode::Result<Vec<PredictionMatrix>> {
        states
            .iter()
            .map(|s| {
                let both = s.masked().len() == 2;
                s.masked()
                    .iter()
                    .map(|&p| {
                        let top = match (p, both) {
                            (0, true) => 0.8,
                            (1, true) => 0.7,
                            (0, false) => 0.95,
                            _ => 0.3,
                        };
                        let second = 0.5 * f64::min(top, 1.0 - top);
                        let d = TokenDistribution::new(
                            vec![p as TokenId, 2],
                            vec![top, second],
                            1.0 - top - second,
                        )?;
                        Ok((p, d))
                    })
                    .collect()
            })
            .collect()
    }
}

#[test]
fn beam_search_beats_greedy_order() {
    let (_, greedy) = decode(
        &DecodeConfig::greedy(1).with_max_length(2),
        &mut OrderMatters,
        &[],
    )
    .unwrap();
    assert!((greedy.final_candidate.ranking_key() - 0.55).abs() < 1e-12);
    let (_, pbs) = decode(
        &DecodeConfig::pbs(1, 2).with_max_length(2),
        &mut OrderMatters,
        &[],
    )
    .unwrap();
    assert!((pbs.final_candidate.ranking_key() - 0.825).abs() < 1e-12);
    let order: Vec<usize> = pbs
        .final_candidate
        .ledger
        .iter()
        .map(|e| e.position)
        .collect();
    assert_eq!(order, vec![1, 0]);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut backend = StubBackend::new(16, 1).unwrap();
    for config in [
        DecodeConfig::pbs(1, 0),
        DecodeConfig::greedy(0),
        DecodeConfig::fixed_parallel(0),
    ] {
        assert!(decode(&config.with_max_length(4), &mut backend, &[1]).is_err());
    }
    // the mask id may not appear in the prompt
    assert!(decode(
        &DecodeConfig::greedy(1).with_max_length(4),
        &mut backend,
        &[15]
    )
    .is_err());
}

fn any_config() -> impl Strategy<Value = DecodeConfig> {
    prop_oneof![
        (1usize..4).prop_map(DecodeConfig::greedy),
        (1usize..4).prop_map(DecodeConfig::fixed_parallel),
        (0.0f64..1.1).prop_map(DecodeConfig::adaptive_parallel),
        (1usize..3, 1usize..4).prop_map(|(n, k)| DecodeConfig::pbs(n, k)),
        (0.0f64..1.1, 1usize..4).prop_map(|(t, k)| DecodeConfig::soar(t, k)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decoding_fills_each_position_once(config in any_config(), seed in 0u64..1000, length in 1usize..12) {
        let mut backend = planted(seed, length);
        let prompt = [5, 6];
        let (tokens, trace) = decode(&config.clone().with_max_length(length), &mut backend, &prompt).unwrap();
        prop_assert_eq!(tokens.len(), prompt.len() + length);
        prop_assert_eq!(&tokens[..2], &prompt[..]);
        prop_assert!(tokens.iter().all(|&t| t != backend.vocabulary().mask_id));

        let cand = &trace.final_candidate;
        let mut positions: Vec<usize> = cand.ledger.iter().map(|e| e.position).collect();
        positions.sort_unstable();
        prop_assert_eq!(positions, (2..2 + length).collect::<Vec<_>>());
        prop_assert_eq!(cand.tokens_decoded, length);
        prop_assert!(cand.cum_score >= 0.0);
        prop_assert!((0.0..=1.0).contains(&cand.ranking_key()));

        let passes: usize = trace.records.iter().map(|r| r.forward_passes).sum();
        prop_assert_eq!(passes, trace.total_forward_passes);
        prop_assert!(trace.records.len() <= length);
    }

    #[test]
    fn decoding_is_deterministic(config in any_config(), seed in 0u64..1000) {
        let config = config.with_max_length(8);
        let (a, ta) = decode(&config, &mut planted(seed, 8), &[]).unwrap();
        let (b, tb) = decode(&config, &mut planted(seed, 8), &[]).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(ta.records, tb.records);
    }

    #[test]
    fn larger_beams_never_rank_lower_on_two_positions(seed in 0u64..500) {
        // with L=2 a beam of 2 already covers every order
        let mut backend = planted(seed, 2);
        let (_, g) = decode(&DecodeConfig::greedy(1).with_max_length(2), &mut backend, &[]).unwrap();
        let (_, p) = decode(&DecodeConfig::pbs(1, 2).with_max_length(2), &mut backend, &[]).unwrap();
        prop_assert!(p.final_candidate.ranking_key() >= g.final_candidate.ranking_key());
    }

    #[test]
    fn prediction_frames_round_trip_floats(
        probs in prop::collection::vec(1e-12f64..1.0, 2..6),
        id in 1u64..u64::MAX,
    ) {
        let total: f64 = probs.iter().sum::<f64>() * 1.25;
        let mut scaled: Vec<f64> = probs.iter().map(|p| p / total).collect();
        scaled.sort_by(|a, b| b.total_cmp(a));
        let other = (1.0 - scaled.iter().sum::<f64>()).max(0.0);
        let vocab = Vocabulary::new(32, 31).unwrap();
        let dist = TokenDistribution::new((0..scaled.len() as TokenId).collect(), scaled, other).unwrap();
        let state = DecodeState::fully_masked(&[1], 1, vocab).unwrap();
        let matrix: PredictionMatrix = [(1, dist)].into_iter().collect();
        let line = encode_prediction(id, std::slice::from_ref(&matrix));
        let back = decode_response(&line, id, &[state]).unwrap();
        prop_assert_eq!(back, vec![matrix]);
    }
}
