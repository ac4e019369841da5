//! Worker wire format: one JSON object per line, UTF-8.
//!
//! ```text
//! worker -> client  {"type":"hello","vocab_size":..,"mask_id":..,"protocol_version":1}
//! client -> worker  {"type":"predict_batch","id":..,"topk":..,"sequences":[{"tokens":[..],"masked":[..]}]}
//! worker -> client  {"type":"prediction","id":..,"results":[{"positions":[..],"top_tokens":[[..]],"top_probs":[[..]],"other_mass":[..]}]}
//! worker -> client  {"type":"error","id":..,"message":".."}
//! ```
//!
//! Floats are written in shortest round-trip form, so every value survives
//! the wire bit-for-bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::{DecodeState, PredictionMatrix, TokenDistribution, TokenId};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRequest {
    pub tokens: Vec<TokenId>,
    pub masked: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SequenceResult {
    pub positions: Vec<usize>,
    pub top_tokens: Vec<Vec<TokenId>>,
    pub top_probs: Vec<Vec<f64>>,
    pub other_mass: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Frame {
    Hello {
        vocab_size: u32,
        mask_id: TokenId,
        protocol_version: u32,
    },
    PredictBatch {
        id: u64,
        topk: usize,
        sequences: Vec<SequenceRequest>,
    },
    Prediction {
        id: u64,
        results: Vec<SequenceResult>,
    },
    Error {
        id: Option<u64>,
        message: String,
    },
}

impl Frame {
    /// Serialized form without the trailing newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("frames always serialize")
    }

    pub fn parse(line: &str) -> Result<Self> {
        serde_json::from_str(line.trim_end_matches(['\r', '\n']))
            .map_err(|e| Error::Protocol(format!("malformed frame: {e}")))
    }
}

pub fn encode_request(id: u64, topk: usize, states: &[DecodeState]) -> String {
    Frame::PredictBatch {
        id,
        topk,
        sequences: states
            .iter()
            .map(|s| SequenceRequest {
                tokens: s.tokens().to_vec(),
                masked: s.masked().to_vec(),
            })
            .collect(),
    }
    .to_line()
}

pub fn result_from_matrix(matrix: &PredictionMatrix) -> SequenceResult {
    let mut out = SequenceResult::default();
    for (p, d) in matrix.iter() {
        out.positions.push(p);
        out.top_tokens.push(d.top_tokens().to_vec());
        out.top_probs.push(d.top_probs().to_vec());
        out.other_mass.push(d.other_mass());
    }
    out
}

pub fn encode_prediction(id: u64, matrices: &[PredictionMatrix]) -> String {
    Frame::Prediction {
        id,
        results: matrices.iter().map(result_from_matrix).collect(),
    }
    .to_line()
}

fn matrix_from_result(result: SequenceResult, state: &DecodeState) -> Result<PredictionMatrix> {
    let n = result.positions.len();
    if result.top_tokens.len() != n || result.top_probs.len() != n || result.other_mass.len() != n {
        return Err(Error::Protocol(
            "result arrays have different lengths".into(),
        ));
    }
    if result.positions != state.masked() {
        return Err(Error::Protocol(format!(
            "result positions {:?} do not match masked {:?}",
            result.positions,
            state.masked()
        )));
    }
    let mut matrix = PredictionMatrix::new();
    let rows = result
        .top_tokens
        .into_iter()
        .zip(result.top_probs)
        .zip(result.other_mass);
    for (&p, ((tokens, probs), other)) in result.positions.iter().zip(rows) {
        let dist = TokenDistribution::new(tokens, probs, other).map_err(|e| match e {
            Error::InvalidDistribution(msg) => Error::Protocol(format!("position {p}: {msg}")),
            other => other,
        })?;
        matrix.insert(p, dist);
    }
    Ok(matrix)
}

/// Parses a worker reply to request `id` over `states`.
pub fn decode_response(
    line: &str,
    id: u64,
    states: &[DecodeState],
) -> Result<Vec<PredictionMatrix>> {
    match Frame::parse(line)? {
        Frame::Prediction { id: got, results } => {
            if got != id {
                return Err(Error::Protocol(format!("response id {got}, expected {id}")));
            }
            if results.len() != states.len() {
                return Err(Error::Protocol(format!(
                    "{} results for {} sequences",
                    results.len(),
                    states.len()
                )));
            }
            results
                .into_iter()
                .zip(states)
                .map(|(r, s)| matrix_from_result(r, s))
                .collect()
        }
        Frame::Error { id: got, message } => {
            if got.is_some_and(|g| g != id) {
                return Err(Error::Protocol(format!(
                    "error frame for id {got:?}, expected {id}"
                )));
            }
            Err(Error::Backend(message))
        }
        other => Err(Error::Protocol(format!(
            "unexpected frame {:?}",
            other.to_line()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::Vocabulary;

    fn state() -> DecodeState {
        let v = Vocabulary::new(4, 3).unwrap();
        DecodeState::from_tokens(vec![1, 3, 3], 1, v).unwrap()
    }

    fn reply(probs: &str) -> String {
        format!(
            r#"{{"type":"prediction","id":5,"results":[{{"positions":[1,2],"top_tokens":[[0,1],[2,0]],"top_probs":[{probs},[0.5,0.5]],"other_mass":[0.0,0.0]}}]}}"#
        )
    }

    #[test]
    fn request_layout() {
        assert_eq!(
            encode_request(5, 2, &[state()]),
            r#"{"type":"predict_batch","id":5,"topk":2,"sequences":[{"tokens":[1,3,3],"masked":[1,2]}]}"#
        );
    }

    #[test]
    fn decodes_valid_reply() {
        let m = decode_response(&reply("[0.75,0.25]"), 5, &[state()]).unwrap();
        assert_eq!(m[0].get(1).unwrap().argmax(), 0);
        assert_eq!(m[0].get(2).unwrap().max_prob(), 0.5);
    }

    #[test]
    fn rejects_bad_mass() {
        let err = decode_response(&reply("[0.25,0.25]"), 5, &[state()]).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)), "{err}");
    }

    #[test]
    fn rejects_id_mismatch_and_garbage() {
        assert!(matches!(
            decode_response(&reply("[0.75,0.25]"), 6, &[state()]),
            Err(Error::Protocol(_))
        ));
        assert!(matches!(
            decode_response("{not json", 5, &[state()]),
            Err(Error::Protocol(_))
        ));
        assert!(matches!(
            decode_response(
                r#"{"type":"hello","vocab_size":4,"mask_id":3,"protocol_version":1}"#,
                5,
                &[state()]
            ),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn worker_error_is_backend_error() {
        let line = r#"{"type":"error","id":5,"message":"out of memory"}"#;
        assert!(matches!(
            decode_response(line, 5, &[state()]),
            Err(Error::Backend(m)) if m == "out of memory"
        ));
    }

    #[test]
    fn prediction_round_trip() {
        let m = decode_response(&reply("[0.75,0.25]"), 5, &[state()]).unwrap();
        assert_eq!(encode_prediction(5, &m), reply("[0.75,0.25]"));
    }
}
