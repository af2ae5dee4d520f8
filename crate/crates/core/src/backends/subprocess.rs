//! Subprocess transport for real models.
//!
//! A reader thread turns the child's stdout into a channel of lines so every
//! wait can be bounded by the request timeout. Requests on one handle are
//! serialized under a mutex regardless of what the child declares; a child
//! that declares `parallel` only changes the descriptor. Once the child exits
//! or a write fails the handle is marked dead and every later request fails
//! fast with `BackendUnavailable`.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use tempfile::TempDir;

use super::protocol::{file_stem_for, Reply, Request, PROTOCOL_VERSION};
use super::{
    BackendDescriptor, BackendError, BackendKind, Classifier, ClassifierOutput, ClassifyRequest, DetectRequest,
    Detector, DetectorOutput, Transport,
};
use crate::imaging::ImageBuffer;
use crate::taxonomy::CropTaxonomy;

enum Event {
    Line(String),
    Closed(Option<String>),
}

struct Connection {
    child: Child,
    stdin: Option<ChildStdin>,
    events: Receiver<Event>,
    dead: Option<String>,
    /// Ids of requests that timed out; late replies to them are discarded.
    abandoned: HashSet<String>,
}

impl Connection {
    fn mark_dead(&mut self, reason: String) -> BackendError {
        self.stdin.take();
        let _ = self.child.kill();
        let _ = self.child.wait();
        self.dead = Some(reason.clone());
        BackendError::BackendUnavailable(reason)
    }

    fn send(&mut self, request: &Request) -> Result<(), BackendError> {
        if let Some(reason) = &self.dead {
            return Err(BackendError::BackendUnavailable(reason.clone()));
        }
        let mut line = serde_json::to_string(request).expect("requests serialize");
        line.push('\n');
        let stdin = self.stdin.as_mut().expect("stdin open while alive");
        if let Err(e) = stdin.write_all(line.as_bytes()).and_then(|_| stdin.flush()) {
            return Err(self.mark_dead(format!("write to backend failed: {e}")));
        }
        Ok(())
    }

    /// Waits for the reply to `expected_id` (or any reply when `None`).
    fn receive(&mut self, expected_id: Option<&str>, timeout: Duration) -> Result<Reply, BackendError> {
        let deadline = Instant::now() + timeout;
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            let event = match self.events.recv_timeout(remaining) {
                Ok(event) => event,
                Err(RecvTimeoutError::Disconnected) => Event::Closed(None),
                Err(RecvTimeoutError::Timeout) => {
                    if let Some(id) = expected_id {
                        self.abandoned.insert(id.to_string());
                    }
                    return Err(BackendError::Timeout(timeout.as_millis() as u64));
                }
            };
            let line = match event {
                Event::Line(line) => line,
                Event::Closed(err) => {
                    let mut reason = match self.child.wait() {
                        Ok(status) => format!("backend process exited ({status})"),
                        Err(_) => "backend process exited".to_string(),
                    };
                    if let Some(e) = err {
                        reason.push_str(&format!(": {e}"));
                    }
                    return Err(self.mark_dead(reason));
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            let reply: Reply = serde_json::from_str(&line)
                .map_err(|e| BackendError::ProtocolViolation(format!("malformed reply: {e}")))?;
            if let Some(id) = reply.id() {
                if self.abandoned.remove(id) {
                    continue;
                }
            }
            if let (Some(want), Some(got)) = (expected_id, reply.id()) {
                if want != got {
                    return Err(BackendError::ProtocolViolation(format!(
                        "reply id `{got}` does not match request id `{want}`"
                    )));
                }
            }
            return Ok(reply);
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if self.dead.is_some() {
            return;
        }
        self.stdin.take();
        let deadline = Instant::now() + Duration::from_secs(2);
        while Instant::now() < deadline {
            if let Ok(Some(_)) = self.child.try_wait() {
                return;
            }
            thread::sleep(Duration::from_millis(10));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A launched child process that passed the handshake.
pub struct SubprocessBackend {
    descriptor: BackendDescriptor,
    class_count: usize,
    timeout: Duration,
    pid: u32,
    next_id: AtomicU64,
    scratch: TempDir,
    conn: Mutex<Connection>,
}

impl std::fmt::Debug for SubprocessBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SubprocessBackend")
            .field("descriptor", &self.descriptor)
            .field("pid", &self.pid)
            .finish_non_exhaustive()
    }
}

impl SubprocessBackend {
    /// Launches `command` and performs the handshake.
    pub fn spawn(
        command: &[String],
        kind: BackendKind,
        taxonomy: &CropTaxonomy,
        timeout: Duration,
    ) -> Result<Self, BackendError> {
        let (program, args) =
            command.split_first().ok_or_else(|| BackendError::BackendUnavailable("empty backend command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BackendError::BackendUnavailable(format!("failed to launch `{program}`: {e}")))?;
        let pid = child.id();
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().expect("stdout is piped");

        let (tx, rx) = mpsc::channel();
        thread::Builder::new()
            .name(format!("backend-{pid}-reader"))
            .spawn(move || {
                let mut reader = BufReader::new(stdout);
                loop {
                    let mut line = String::new();
                    match reader.read_line(&mut line) {
                        Ok(0) => {
                            let _ = tx.send(Event::Closed(None));
                            return;
                        }
                        Ok(_) => {
                            if tx.send(Event::Line(line)).is_err() {
                                return;
                            }
                        }
                        Err(e) => {
                            let _ = tx.send(Event::Closed(Some(e.to_string())));
                            return;
                        }
                    }
                }
            })
            .map_err(|e| BackendError::BackendUnavailable(format!("failed to start reader thread: {e}")))?;

        let mut conn = Connection { child, stdin, events: rx, dead: None, abandoned: HashSet::new() };
        let hello = Request::Hello { protocol: PROTOCOL_VERSION, kind, crop: taxonomy.crop, classes: taxonomy.ids() };
        let handshake = |conn: &mut Connection| -> Result<Reply, BackendError> {
            conn.send(&hello)?;
            conn.receive(None, timeout)
        };
        let concurrency = match handshake(&mut conn) {
            Ok(Reply::Ready { kind: declared, concurrency }) if declared == kind => concurrency,
            Ok(Reply::Ready { kind: declared, .. }) => {
                return Err(conn.mark_dead(format!("kind mismatch: requested {kind}, backend declared {declared}")));
            }
            Ok(other) => {
                return Err(conn.mark_dead(format!("handshake failed: expected ready, got {other:?}")));
            }
            Err(BackendError::BackendUnavailable(reason)) => {
                return Err(BackendError::BackendUnavailable(format!("before handshake: {reason}")));
            }
            Err(e) => return Err(conn.mark_dead(format!("handshake failed: {e}"))),
        };

        let scratch = tempfile::Builder::new()
            .prefix("plantdx-backend-")
            .tempdir()
            .map_err(|e| BackendError::BackendUnavailable(format!("cannot create scratch dir: {e}")))?;

        Ok(Self {
            descriptor: BackendDescriptor {
                kind,
                crop: taxonomy.crop,
                transport: Transport::Subprocess { command: command.to_vec() },
                concurrency,
            },
            class_count: taxonomy.len(),
            timeout,
            pid,
            next_id: AtomicU64::new(1),
            scratch,
            conn: Mutex::new(conn),
        })
    }

    pub fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    pub fn pid(&self) -> u32 {
        self.pid
    }

    fn exchange(&self, image_ref: &str, image: &ImageBuffer, detect: bool) -> Result<Reply, BackendError> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed).to_string();
        let path = self.scratch.path().join(format!("{}.png", file_stem_for(image_ref)));
        image.save_png(&path).map_err(|e| BackendError::Io(e.to_string()))?;
        let image_path = path.to_string_lossy().into_owned();
        let (width, height) = (image.width(), image.height());
        let request = if detect {
            Request::Detect { id: id.clone(), image_path, width, height }
        } else {
            Request::Classify { id: id.clone(), image_path, width, height }
        };
        let result = {
            let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
            conn.send(&request).and_then(|_| conn.receive(Some(&id), self.timeout))
        };
        let _ = std::fs::remove_file(&path);
        match result? {
            Reply::Error { message, .. } => Err(BackendError::Remote(message)),
            reply => Ok(reply),
        }
    }

    fn detect_impl(&self, request: DetectRequest<'_>) -> Result<DetectorOutput, BackendError> {
        match self.exchange(request.image_ref, request.image, true)? {
            Reply::Detections { boxes, .. } => {
                let out = DetectorOutput { boxes };
                out.validate_bounds(request.image.width(), request.image.height())?;
                Ok(out)
            }
            other => Err(BackendError::ProtocolViolation(format!("expected detections, got {other:?}"))),
        }
    }

    fn classify_impl(&self, request: ClassifyRequest<'_>) -> Result<ClassifierOutput, BackendError> {
        match self.exchange(request.image_ref, request.image, false)? {
            Reply::Distribution { probs, .. } => ClassifierOutput::new(probs, self.class_count),
            other => Err(BackendError::ProtocolViolation(format!("expected distribution, got {other:?}"))),
        }
    }
}

#[derive(Debug)]
pub struct SubprocessDetector(SubprocessBackend);

impl SubprocessDetector {
    pub fn spawn(command: &[String], taxonomy: &CropTaxonomy, timeout: Duration) -> Result<Self, BackendError> {
        SubprocessBackend::spawn(command, BackendKind::Detector, taxonomy, timeout).map(Self)
    }

    pub fn pid(&self) -> u32 {
        self.0.pid()
    }
}

impl Detector for SubprocessDetector {
    fn descriptor(&self) -> &BackendDescriptor {
        self.0.descriptor()
    }

    fn detect(&self, request: DetectRequest<'_>) -> Result<DetectorOutput, BackendError> {
        self.0.detect_impl(request)
    }
}

#[derive(Debug)]
pub struct SubprocessClassifier(SubprocessBackend);

impl SubprocessClassifier {
    pub fn spawn(command: &[String], taxonomy: &CropTaxonomy, timeout: Duration) -> Result<Self, BackendError> {
        SubprocessBackend::spawn(command, BackendKind::Classifier, taxonomy, timeout).map(Self)
    }

    pub fn pid(&self) -> u32 {
        self.0.pid()
    }
}

impl Classifier for SubprocessClassifier {
    fn descriptor(&self) -> &BackendDescriptor {
        self.0.descriptor()
    }

    fn classify(&self, request: ClassifyRequest<'_>) -> Result<ClassifierOutput, BackendError> {
        self.0.classify_impl(request)
    }
}
