//! Client and loopback server for out-of-process model workers.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::protocol::{
    decode_response, encode_prediction, encode_request, Frame, PROTOCOL_VERSION,
};
use super::ModelBackend;
use crate::error::{Error, Result};
use crate::state::{DecodeState, PredictionMatrix, Vocabulary};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// One session with a worker. Requests are strictly sequential.
pub struct WorkerConnection {
    writer: Box<dyn Write + Send>,
    lines: Receiver<io::Result<String>>,
    vocab: Vocabulary,
    next_id: u64,
    timeout: Duration,
    child: Option<Child>,
    socket: Option<TcpStream>,
}

fn pump_lines<R: BufRead + Send + 'static>(reader: R) -> Receiver<io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in reader.lines() {
            let failed = line.is_err();
            if tx.send(line).is_err() || failed {
                break;
            }
        }
    });
    rx
}

impl WorkerConnection {
    /// Wraps an already-open duplex stream and performs the handshake.
    pub fn from_streams<R, W>(reader: R, writer: W, timeout: Duration) -> Result<Self>
    where
        R: BufRead + Send + 'static,
        W: Write + Send + 'static,
    {
        let mut conn = Self {
            writer: Box::new(writer),
            lines: pump_lines(reader),
            vocab: Vocabulary {
                size: 2,
                mask_id: 1,
            },
            next_id: 1,
            timeout,
            child: None,
            socket: None,
        };
        conn.vocab = conn.handshake()?;
        Ok(conn)
    }

    /// Spawns `program args..` and talks to it over its standard streams.
    pub fn spawn(program: &str, args: &[String], timeout: Duration) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin: ChildStdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut conn =
            Self::from_streams(BufReader::new(stdout), stdin, timeout).inspect_err(|_| {
                let _ = child.kill();
            });
        if let Ok(c) = conn.as_mut() {
            c.child = Some(child);
        }
        conn
    }

    /// Splits a shell-like command line on whitespace and spawns it.
    pub fn spawn_command_line(command: &str, timeout: Duration) -> Result<Self> {
        let mut parts = command.split_whitespace().map(str::to_owned);
        let program = parts
            .next()
            .ok_or_else(|| Error::InvalidConfig("empty worker command".into()))?;
        let args: Vec<String> = parts.collect();
        Self::spawn(&program, &args, timeout)
    }

    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        let socket = stream.try_clone()?;
        let mut conn = Self::from_streams(reader, stream, timeout)?;
        conn.socket = Some(socket);
        Ok(conn)
    }

    fn read_line(&mut self) -> Result<String> {
        match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(Error::Io(e)),
            Err(RecvTimeoutError::Timeout) => Err(Error::Timeout),
            Err(RecvTimeoutError::Disconnected) => {
                Err(Error::Protocol("worker closed the stream".into()))
            }
        }
    }

    fn handshake(&mut self) -> Result<Vocabulary> {
        let line = self.read_line()?;
        match Frame::parse(&line)? {
            Frame::Hello {
                vocab_size,
                mask_id,
                protocol_version,
            } => {
                if protocol_version != PROTOCOL_VERSION {
                    return Err(Error::Protocol(format!(
                        "worker speaks protocol {protocol_version}, expected {PROTOCOL_VERSION}"
                    )));
                }
                Vocabulary::new(vocab_size, mask_id).map_err(|e| Error::Protocol(e.to_string()))
            }
            other => Err(Error::Protocol(format!(
                "expected hello, got {}",
                other.to_line()
            ))),
        }
    }

    pub fn vocabulary(&self) -> Vocabulary {
        self.vocab
    }

    /// Sends one `predict_batch` frame and waits for its reply.
    pub fn remote_predict_batch(
        &mut self,
        states: &[DecodeState],
        topk: usize,
    ) -> Result<Vec<PredictionMatrix>> {
        if topk < 2 {
            return Err(Error::InvalidConfig("topk must be at least 2".into()));
        }
        let id = self.next_id;
        self.next_id += 1;
        let mut frame = encode_request(id, topk, states);
        frame.push('\n');
        self.writer.write_all(frame.as_bytes())?;
        self.writer.flush()?;
        let line = self.read_line()?;
        decode_response(&line, id, states)
    }
}

impl ModelBackend for WorkerConnection {
    fn vocabulary(&self) -> Vocabulary {
        self.vocab
    }

    fn predict_batch(
        &mut self,
        states: &[DecodeState],
        topk: usize,
    ) -> Result<Vec<PredictionMatrix>> {
        self.remote_predict_batch(states, topk)
    }
}

impl Drop for WorkerConnection {
    fn drop(&mut self) {
        if let Some(socket) = self.socket.take() {
            // the reader thread holds a clone, so dropping is not enough
            let _ = socket.shutdown(std::net::Shutdown::Both);
        }
        if let Some(mut child) = self.child.take() {
            // closing stdin is the shutdown signal
            self.writer = Box::new(io::sink());
            for _ in 0..50 {
                if let Ok(Some(_)) = child.try_wait() {
                    return;
                }
                thread::sleep(Duration::from_millis(10));
            }
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn request_id(line: &str) -> Option<u64> {
    serde_json::from_str::<serde_json::Value>(line)
        .ok()?
        .get("id")?
        .as_u64()
}

/// Answers one request line; `None` for lines that need no reply.
fn answer<B: ModelBackend + ?Sized>(
    backend: &mut B,
    prompt_len: usize,
    line: &str,
) -> Option<String> {
    if line.trim().is_empty() {
        return None;
    }
    let error = |id: Option<u64>, message: String| Some(Frame::Error { id, message }.to_line());
    let (id, topk, sequences) = match Frame::parse(line) {
        Ok(Frame::PredictBatch {
            id,
            topk,
            sequences,
        }) => (id, topk, sequences),
        Ok(other) => {
            return error(
                request_id(line),
                format!("unexpected frame type in {}", other.to_line()),
            )
        }
        Err(e) => return error(request_id(line), e.to_string()),
    };
    if topk < 2 {
        return error(Some(id), format!("topk must be at least 2, got {topk}"));
    }
    let vocab = backend.vocabulary();
    let states: Result<Vec<DecodeState>> = sequences
        .into_iter()
        .map(|s| DecodeState::from_parts(s.tokens, s.masked, prompt_len, vocab))
        .collect();
    match states.and_then(|s| backend.predict_batch(&s, topk)) {
        Ok(matrices) => Some(encode_prediction(id, &matrices)),
        Err(e) => error(Some(id), e.to_string()),
    }
}

/// Serves `backend` over a line stream until end of input.
///
/// Sequences are interpreted with a fixed `prompt_len`. Bad frames are
/// answered with error frames; only I/O failures end the loop early.
pub fn serve<B, R, W>(backend: &mut B, prompt_len: usize, reader: R, mut writer: W) -> Result<()>
where
    B: ModelBackend + ?Sized,
    R: BufRead,
    W: Write,
{
    let vocab = backend.vocabulary();
    let hello = Frame::Hello {
        vocab_size: vocab.size,
        mask_id: vocab.mask_id,
        protocol_version: PROTOCOL_VERSION,
    };
    writeln!(writer, "{}", hello.to_line())?;
    writer.flush()?;
    for line in reader.lines() {
        if let Some(reply) = answer(backend, prompt_len, &line?) {
            writeln!(writer, "{reply}")?;
            writer.flush()?;
        }
    }
    Ok(())
}

/// In-process worker listening on a loopback TCP port for one client.
pub struct LoopbackWorker {
    pub addr: SocketAddr,
    handle: JoinHandle<Result<()>>,
}

impl LoopbackWorker {
    pub fn connect(&self, timeout: Duration) -> Result<WorkerConnection> {
        WorkerConnection::connect(self.addr, timeout)
    }

    /// Waits for the worker thread after its client hung up.
    pub fn join(self) -> Result<()> {
        self.handle
            .join()
            .map_err(|_| Error::Protocol("loopback worker panicked".into()))?
    }
}

/// Starts serving `backend` on `127.0.0.1` at an ephemeral port.
pub fn spawn_loopback<B>(mut backend: B, prompt_len: usize) -> Result<LoopbackWorker>
where
    B: ModelBackend + Send + 'static,
{
    let listener = TcpListener::bind(("127.0.0.1", 0))?;
    let addr = listener.local_addr()?;
    let handle = thread::spawn(move || {
        let (stream, _) = listener.accept()?;
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        serve(&mut backend, prompt_len, reader, stream)
    });
    Ok(LoopbackWorker { addr, handle })
}
