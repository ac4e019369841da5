//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::env;
use std::fs;
use std::io::{self, BufReader, Cursor, Write};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use maskdecode::backend::protocol::{encode_prediction, encode_request, Frame, PROTOCOL_VERSION};
use maskdecode::backend::{serve, ModelBackend, StubBackend, WorkerConnection};
use maskdecode::{DecodeConfig, DecodeState, PredictionMatrix, Result, TokenId, Vocabulary};

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("golden")
}

/// Compares `actual` with a checked-in golden file.
///
/// With `UPDATE_GOLDEN=1` the file is (re)written instead; goldens are
/// recorded once and then frozen.
pub fn check_golden(name: &str, actual: &str) -> std::result::Result<(), String> {
    let path = golden_dir().join(name);
    if env::var_os("UPDATE_GOLDEN").is_some() {
        fs::create_dir_all(golden_dir()).unwrap();
        fs::write(&path, actual).unwrap();
        return Ok(());
    }
    let expected = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if expected == actual {
        return Ok(());
    }
    let line = expected
        .lines()
        .zip(actual.lines())
        .position(|(a, b)| a != b)
        .unwrap_or(expected.lines().count().min(actual.lines().count()));
    Err(format!("{name} differs from golden at line {}", line + 1))
}

pub fn read_golden(name: &str) -> String {
    fs::read_to_string(golden_dir().join(name)).unwrap_or_else(|e| panic!("golden {name}: {e}"))
}

/// Transcript lines are `C <frame>` (client to worker) or `W <frame>`.
pub struct Transcript {
    pub client: Vec<String>,
    pub worker: Vec<String>,
}

pub fn parse_transcript(text: &str) -> Transcript {
    let mut t = Transcript {
        client: Vec::new(),
        worker: Vec::new(),
    };
    for line in text.lines() {
        match line.split_once(' ') {
            Some(("C", frame)) => t.client.push(frame.to_string()),
            Some(("W", frame)) => t.worker.push(frame.to_string()),
            _ => panic!("bad transcript line {line:?}"),
        }
    }
    t
}

pub fn joined(lines: &[String]) -> String {
    lines.iter().map(|l| format!("{l}\n")).collect()
}

/// `Write` handle whose bytes can be inspected after it has been moved away.
#[derive(Clone, Default)]
pub struct SharedBuf(pub Arc<Mutex<Vec<u8>>>);

impl SharedBuf {
    pub fn text(&self) -> String {
        String::from_utf8(self.0.lock().unwrap().clone()).unwrap()
    }
}

impl Write for SharedBuf {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Wraps a backend and writes the session a worker client would produce.
pub struct Recorder<B> {
    pub inner: B,
    pub lines: Vec<String>,
    next_id: u64,
}

impl<B: ModelBackend> Recorder<B> {
    pub fn new(inner: B) -> Self {
        let v = inner.vocabulary();
        let hello = Frame::Hello {
            vocab_size: v.size,
            mask_id: v.mask_id,
            protocol_version: PROTOCOL_VERSION,
        };
        Self {
            inner,
            lines: vec![format!("W {}", hello.to_line())],
            next_id: 1,
        }
    }

    pub fn transcript(&self) -> String {
        self.lines.iter().map(|l| format!("{l}\n")).collect()
    }
}

impl<B: ModelBackend> ModelBackend for Recorder<B> {
    fn vocabulary(&self) -> Vocabulary {
        self.inner.vocabulary()
    }

    fn predict_batch(
        &mut self,
        states: &[DecodeState],
        topk: usize,
    ) -> Result<Vec<PredictionMatrix>> {
        let id = self.next_id;
        self.next_id += 1;
        let out = self.inner.predict_batch(states, topk)?;
        self.lines
            .push(format!("C {}", encode_request(id, topk, states)));
        self.lines
            .push(format!("W {}", encode_prediction(id, &out)));
        Ok(out)
    }
}

/// Stub-model sessions frozen as golden transcripts.
pub struct Session {
    pub name: &'static str,
    pub stub: StubBackend,
    pub config: DecodeConfig,
    pub prompt: Vec<TokenId>,
}

pub fn sessions() -> Vec<Session> {
    vec![
        Session {
            name: "stub_soar_session.transcript",
            stub: StubBackend::new(16, 7).unwrap(),
            config: DecodeConfig {
                topk: 4,
                ..DecodeConfig::soar(0.9, 2).with_max_length(6)
            },
            prompt: vec![1, 2, 3],
        },
        Session {
            name: "stub_pbs_session.transcript",
            stub: StubBackend::new(12, 3).unwrap(),
            config: DecodeConfig {
                topk: 3,
                ..DecodeConfig::pbs(2, 3).with_max_length(5)
            },
            prompt: vec![4, 5],
        },
    ]
}

pub const MALFORMED_REQUESTS: &[&str] = &[
    "this is not json",
    r#"{"type":"predict_batch","id":11,"topk":4}"#,
    r#"{"type":"hello","vocab_size":16,"mask_id":15,"protocol_version":1}"#,
    r#"{"type":"predict_batch","id":12,"topk":4,"sequences":[{"tokens":[1,15,3],"masked":[2]}]}"#,
    r#"{"type":"predict_batch","id":13,"topk":4,"sequences":[{"tokens":[1,99,15],"masked":[2]}]}"#,
    r#"{"type":"predict_batch","id":14,"topk":1,"sequences":[{"tokens":[1,15],"masked":[1]}]}"#,
    r#"{"type":"predict_batch","id":15,"topk":3,"sequences":[{"tokens":[1,15],"masked":[1]}]}"#,
];

/// The requests above with the replies of a live `serve`.
pub fn malformed_transcript() -> String {
    let mut stub = StubBackend::new(16, 7).unwrap();
    let input = joined(
        &MALFORMED_REQUESTS
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>(),
    );
    let mut out = Vec::new();
    serve(&mut stub, 1, input.as_bytes(), &mut out).unwrap();
    let replies = String::from_utf8(out).unwrap();
    let mut replies = replies.lines();
    let mut text = format!("W {}\n", replies.next().unwrap());
    for (req, reply) in MALFORMED_REQUESTS.iter().zip(replies) {
        text.push_str(&format!("C {req}\nW {reply}\n"));
    }
    text
}

pub const HELLO: &str = r#"{"type":"hello","vocab_size":16,"mask_id":15,"protocol_version":1}"#;

/// Valid reply to the single request `client_against` sends.
pub const GOOD_REPLY: &str = r#"{"type":"prediction","id":1,"results":[{"positions":[1,2],"top_tokens":[[3,4],[5,6]],"top_probs":[[0.5,0.25],[0.5,0.25]],"other_mass":[0.25,0.25]}]}"#;

pub fn bad_worker_replies() -> Vec<String> {
    vec![
        "{\"type\":\"prediction\"".to_string(),
        GOOD_REPLY.replace("\"id\":1", "\"id\":2"),
        GOOD_REPLY.replace("[0.5,0.25],[0.5,0.25]", "[0.5,0.25],[0.25,0.5]"),
        GOOD_REPLY.replace("\"other_mass\":[0.25,0.25]", "\"other_mass\":[0.25,0.5]"),
        GOOD_REPLY.replace("\"positions\":[1,2]", "\"positions\":[1,3]"),
        GOOD_REPLY.replace("\"positions\":[1,2]", "\"positions\":[1]"),
        r#"{"type":"prediction","id":1,"results":[]}"#.to_string(),
        HELLO.to_string(),
        r#"{"type":"bogus","id":1}"#.to_string(),
    ]
}

/// Opens a client on scripted worker output and sends one request.
pub fn client_against(worker_lines: &[&str]) -> maskdecode::Result<()> {
    let text: String = worker_lines.iter().map(|l| format!("{l}\n")).collect();
    let reader = BufReader::new(Cursor::new(text.into_bytes()));
    let mut conn =
        WorkerConnection::from_streams(reader, SharedBuf::default(), Duration::from_secs(5))?;
    let state = DecodeState::from_tokens(vec![1, 15, 15], 1, conn.vocabulary())?;
    conn.remote_predict_batch(&[state], 2).map(|_| ())
}
