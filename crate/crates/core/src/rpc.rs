//! `nbproto/1`: the method protocol spoken over a subprocess's standard
//! streams.
//!
//! Every message is one JSON line followed by the binary attachments it
//! declares. A request line is
//! `{"request_id": n, "kind": ..., "payload": {...}, "attachments": [len, ...]}`;
//! a response echoes the id and carries either `"ok": true` with a payload
//! and attachments, or `"ok": false` with
//! `{"error_kind", "message", "traceback"?}`. Request 0 is the handshake:
//! `get_info` with `{"protocol": "nbproto/1"}`, answered with the method's
//! protocol string and [`MethodInfo`].
//!
//! Images travel as a 16-byte little-endian header (width, height, channels,
//! reserved) followed by raw `u8` rows; embeddings as little-endian `f64`s.
//! Method stderr is logged verbatim and never interpreted.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, ExitStatus, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::camera::Camera;
use crate::dataset::{DatasetMetadata, SceneDataset, SceneImage, ScenePoint, Split};
use crate::image::{Image, Pixels};
use crate::imageops::quantize_u8;
use crate::method::{
    ErrorKind, MethodApi, MethodError, MethodInfo, RenderOptions, SetupRequest, TrainMetrics,
};

pub const PROTOCOL_VERSION: &str = "nbproto/1";
pub const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(60);
pub const CALL_TIMEOUT: Duration = Duration::from_secs(300);
pub const IMAGE_HEADER_LEN: usize = 16;
/// Upper bound on one attachment, to fail fast on corrupt length fields.
pub const MAX_ATTACHMENT: u64 = 1 << 32;
const STDERR_TAIL_LINES: usize = 20;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("stream closed mid-message")]
    UnexpectedEof,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Setup,
    TrainIteration,
    Render,
    Save,
    OptimizeEmbedding,
    GetInfo,
    ExportMesh,
    Shutdown,
}

impl Kind {
    pub const ALL: [Kind; 8] = [
        Kind::Setup,
        Kind::TrainIteration,
        Kind::Render,
        Kind::Save,
        Kind::OptimizeEmbedding,
        Kind::GetInfo,
        Kind::ExportMesh,
        Kind::Shutdown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kind::Setup => "setup",
            Kind::TrainIteration => "train_iteration",
            Kind::Render => "render",
            Kind::Save => "save",
            Kind::OptimizeEmbedding => "optimize_embedding",
            Kind::GetInfo => "get_info",
            Kind::ExportMesh => "export_mesh",
            Kind::Shutdown => "shutdown",
        }
    }

    pub fn from_name(s: &str) -> Option<Kind> {
        Kind::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub request_id: u64,
    pub kind: Kind,
    pub payload: Value,
    pub attachments: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub request_id: u64,
    pub result: Result<(Value, Vec<Vec<u8>>), MethodError>,
}

#[derive(Serialize, Deserialize)]
struct RequestLine {
    request_id: u64,
    kind: Kind,
    #[serde(default)]
    payload: Value,
    #[serde(default)]
    attachments: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct ResponseLine {
    request_id: u64,
    ok: bool,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    payload: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<MethodError>,
    #[serde(default)]
    attachments: Vec<u64>,
}

fn write_frame<W: Write>(w: &mut W, line: &impl Serialize, attachments: &[Vec<u8>]) -> Result<(), WireError> {
    let mut text = serde_json::to_vec(line).map_err(|e| WireError::Malformed(e.to_string()))?;
    text.push(b'\n');
    w.write_all(&text)?;
    for a in attachments {
        w.write_all(a)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads one JSON line; `None` on a clean end of stream.
fn read_line<R: BufRead>(r: &mut R) -> Result<Option<Vec<u8>>, WireError> {
    let mut buf = Vec::new();
    let n = r.read_until(b'\n', &mut buf)?;
    if n == 0 {
        return Ok(None);
    }
    if buf.last() != Some(&b'\n') {
        return Err(WireError::UnexpectedEof);
    }
    buf.pop();
    Ok(Some(buf))
}

fn read_attachments<R: Read>(r: &mut R, lens: &[u64]) -> Result<Vec<Vec<u8>>, WireError> {
    lens.iter()
        .map(|&len| {
            if len > MAX_ATTACHMENT {
                return Err(WireError::Malformed(format!("attachment of {len} bytes")));
            }
            let mut buf = vec![0u8; len as usize];
            r.read_exact(&mut buf).map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => WireError::UnexpectedEof,
                _ => WireError::Io(e),
            })?;
            Ok(buf)
        })
        .collect()
}

pub fn write_request<W: Write>(w: &mut W, req: &Request) -> Result<(), WireError> {
    let line = RequestLine {
        request_id: req.request_id,
        kind: req.kind,
        payload: req.payload.clone(),
        attachments: req.attachments.iter().map(|a| a.len() as u64).collect(),
    };
    write_frame(w, &line, &req.attachments)
}

pub fn read_request<R: BufRead>(r: &mut R) -> Result<Option<Request>, WireError> {
    let Some(line) = read_line(r)? else {
        return Ok(None);
    };
    let head: RequestLine =
        serde_json::from_slice(&line).map_err(|e| WireError::Malformed(e.to_string()))?;
    let attachments = read_attachments(r, &head.attachments)?;
    Ok(Some(Request {
        request_id: head.request_id,
        kind: head.kind,
        payload: head.payload,
        attachments,
    }))
}

pub fn write_response<W: Write>(w: &mut W, resp: &Response) -> Result<(), WireError> {
    match &resp.result {
        Ok((payload, attachments)) => {
            let line = ResponseLine {
                request_id: resp.request_id,
                ok: true,
                payload: payload.clone(),
                error: None,
                attachments: attachments.iter().map(|a| a.len() as u64).collect(),
            };
            write_frame(w, &line, attachments)
        }
        Err(e) => {
            let line = ResponseLine {
                request_id: resp.request_id,
                ok: false,
                payload: Value::Null,
                error: Some(e.clone()),
                attachments: vec![],
            };
            write_frame(w, &line, &[])
        }
    }
}

pub fn read_response<R: BufRead>(r: &mut R) -> Result<Option<Response>, WireError> {
    let Some(line) = read_line(r)? else {
        return Ok(None);
    };
    let head: ResponseLine =
        serde_json::from_slice(&line).map_err(|e| WireError::Malformed(e.to_string()))?;
    let attachments = read_attachments(r, &head.attachments)?;
    let result = if head.ok {
        Ok((head.payload, attachments))
    } else {
        Err(head.error.unwrap_or_else(|| {
            MethodError::new(ErrorKind::Protocol, "error response without an error object")
        }))
    };
    Ok(Some(Response {
        request_id: head.request_id,
        result,
    }))
}

fn protocol_error(msg: impl Into<String>) -> MethodError {
    MethodError::new(ErrorKind::Protocol, msg)
}

/// Header plus raw `u8` rows; float images are quantized first.
pub fn encode_image(img: &Image) -> Vec<u8> {
    let quantized;
    let data = match img.pixels() {
        Pixels::U8(d) => d,
        Pixels::Float(_) => {
            quantized = quantize_u8(img);
            quantized.as_u8().expect("quantized image is u8")
        }
    };
    let mut out = Vec::with_capacity(IMAGE_HEADER_LEN + data.len());
    for v in [img.width() as u32, img.height() as u32, img.channels() as u32, 0] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(data);
    out
}

pub fn decode_image(bytes: &[u8]) -> Result<Image, MethodError> {
    if bytes.len() < IMAGE_HEADER_LEN {
        return Err(protocol_error("image attachment shorter than its header"));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (w, h, c) = (field(0), field(1), field(2));
    Image::from_u8(w, h, c, bytes[IMAGE_HEADER_LEN..].to_vec())
        .map_err(|e| protocol_error(format!("image attachment: {e}")))
}

pub fn encode_embedding(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn decode_embedding(bytes: &[u8]) -> Result<Vec<f64>, MethodError> {
    if bytes.len() % 8 != 0 {
        return Err(protocol_error("embedding attachment length is not a multiple of 8"));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct WireImage {
    id: String,
    file_name: String,
    split: Split,
    camera: Option<Camera>,
    /// Index into the message's attachments, when pixels are sent.
    attachment: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct WireDataset {
    name: String,
    images: Vec<WireImage>,
    points3d: Option<Vec<ScenePoint>>,
    #[serde(default)]
    metadata: DatasetMetadata,
}

/// Appends the dataset's pixels to `attachments` and returns its JSON form.
pub fn encode_dataset(ds: &SceneDataset, attachments: &mut Vec<Vec<u8>>) -> Value {
    let images = ds
        .images
        .iter()
        .map(|img| WireImage {
            id: img.id.clone(),
            file_name: img.file_name.clone(),
            split: img.split,
            camera: img.camera.clone(),
            attachment: img.image.as_ref().map(|px| {
                attachments.push(encode_image(px));
                attachments.len() - 1
            }),
        })
        .collect();
    let mut metadata = ds.metadata.clone();
    metadata.root = None;
    serde_json::to_value(WireDataset {
        name: ds.name.clone(),
        images,
        points3d: ds.points3d.clone(),
        metadata,
    })
    .expect("dataset serializes")
}

pub fn decode_dataset(v: &Value, attachments: &[Vec<u8>]) -> Result<SceneDataset, MethodError> {
    let wire: WireDataset = serde_json::from_value(v.clone())
        .map_err(|e| MethodError::new(ErrorKind::InvalidArgument, format!("dataset: {e}")))?;
    let images = wire
        .images
        .into_iter()
        .map(|w| {
            let image = match w.attachment {
                Some(i) => Some(Arc::new(decode_image(attachments.get(i).ok_or_else(|| {
                    protocol_error(format!("image {:?} refers to missing attachment {i}", w.id))
                })?)?)),
                None => None,
            };
            Ok(SceneImage {
                path: PathBuf::from(&w.file_name),
                id: w.id,
                file_name: w.file_name,
                camera: w.camera,
                split: w.split,
                image,
            })
        })
        .collect::<Result<_, MethodError>>()?;
    Ok(SceneDataset {
        name: wire.name,
        images,
        points3d: wire.points3d,
        metadata: wire.metadata,
    })
}

fn arg<T: serde::de::DeserializeOwned>(payload: &Value, key: &str) -> Result<T, MethodError> {
    serde_json::from_value(payload.get(key).cloned().unwrap_or(Value::Null))
        .map_err(|e| MethodError::new(ErrorKind::InvalidArgument, format!("{key}: {e}")))
}

fn panic_message(p: &(dyn std::any::Any + Send)) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

fn dispatch<M: MethodApi>(method: &mut M, req: &Request) -> Result<(Value, Vec<Vec<u8>>), MethodError> {
    let p = &req.payload;
    let a = &req.attachments;
    match req.kind {
        Kind::GetInfo => Ok((
            json!({"protocol": PROTOCOL_VERSION, "info": method.get_info()?}),
            vec![],
        )),
        Kind::Setup => {
            let train_dataset = match p.get("train_dataset") {
                Some(v) if !v.is_null() => Some(decode_dataset(v, a)?),
                _ => None,
            };
            let request = SetupRequest {
                train_dataset,
                checkpoint: arg(p, "checkpoint")?,
                config_overrides: arg::<Option<_>>(p, "config_overrides")?.unwrap_or_default(),
            };
            request.check()?;
            Ok((json!({"info": method.setup(request)?}), vec![]))
        }
        Kind::TrainIteration => {
            let step: u64 = arg(p, "step")?;
            Ok((json!({"metrics": method.train_iteration(step)?}), vec![]))
        }
        Kind::Render => {
            let camera: Camera = arg(p, "camera")?;
            let embedding = match arg::<Option<usize>>(p, "embedding_attachment")? {
                Some(i) => Some(decode_embedding(a.get(i).ok_or_else(|| {
                    protocol_error("render refers to a missing embedding attachment")
                })?)?),
                None => None,
            };
            let options = RenderOptions {
                embedding,
                output_names: arg(p, "output_names")?,
            };
            let img = method.render(&camera, &options)?;
            Ok((json!({"outputs": ["color"]}), vec![encode_image(&img)]))
        }
        Kind::Save => {
            let path: PathBuf = arg(p, "path")?;
            method.save(&path)?;
            Ok((json!({}), vec![]))
        }
        Kind::OptimizeEmbedding => {
            let ds = decode_dataset(p.get("dataset").unwrap_or(&Value::Null), a)?;
            let initial = match arg::<Option<usize>>(p, "initial_attachment")? {
                Some(i) => Some(decode_embedding(a.get(i).ok_or_else(|| {
                    protocol_error("optimize_embedding refers to a missing attachment")
                })?)?),
                None => None,
            };
            let e = method.optimize_embedding(&ds, initial.as_deref())?;
            Ok((json!({"length": e.len()}), vec![encode_embedding(&e)]))
        }
        Kind::ExportMesh => {
            let path: PathBuf = arg(p, "path")?;
            let options = p.get("options").cloned().unwrap_or(Value::Null);
            method.export_mesh(&path, &options)?;
            Ok((json!({}), vec![]))
        }
        Kind::Shutdown => Ok((json!({}), vec![])),
    }
}

/// Serves one method over a pair of streams until `shutdown` or end of input.
///
/// `protocol` is the version this server claims; only tests use anything but
/// [`PROTOCOL_VERSION`].
pub fn serve<M: MethodApi, R: Read, W: Write>(
    method: &mut M,
    input: R,
    output: W,
    protocol: &str,
) -> Result<(), WireError> {
    let mut input = BufReader::new(input);
    let mut output = std::io::BufWriter::new(output);
    let mut first = true;
    while let Some(req) = read_request(&mut input)? {
        if first {
            first = false;
            let host = req.payload.get("protocol").and_then(Value::as_str);
            if req.kind != Kind::GetInfo || host.is_none() {
                let err = protocol_error("first message must be the get_info handshake");
                write_response(&mut output, &Response { request_id: req.request_id, result: Err(err) })?;
                return Ok(());
            }
            if host != Some(protocol) {
                let err = protocol_error(format!(
                    "protocol mismatch: host speaks {}, method speaks {protocol}",
                    host.unwrap_or("?")
                ));
                write_response(&mut output, &Response { request_id: req.request_id, result: Err(err) })?;
                return Ok(());
            }
            let result = method
                .get_info()
                .map(|info| (json!({"protocol": protocol, "info": info}), vec![]));
            write_response(&mut output, &Response { request_id: req.request_id, result })?;
            continue;
        }
        let result = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| dispatch(method, &req))) {
            Ok(r) => r,
            Err(p) => Err(MethodError::new(
                ErrorKind::MethodException,
                format!("{} failed", req.kind.name()),
            )
            .with_traceback(format!("panicked: {}", panic_message(p.as_ref())))),
        };
        write_response(&mut output, &Response { request_id: req.request_id, result })?;
        if req.kind == Kind::Shutdown {
            break;
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub handshake_timeout: Duration,
    pub call_timeout: Duration,
    pub workdir: Option<PathBuf>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            handshake_timeout: HANDSHAKE_TIMEOUT,
            call_timeout: CALL_TIMEOUT,
            workdir: None,
        }
    }
}

type Incoming = Result<Response, String>;

/// Host side of a method subprocess.
pub struct Session {
    child: Child,
    stdin: Option<ChildStdin>,
    incoming: Receiver<Incoming>,
    next_id: u64,
    info: MethodInfo,
    config: SessionConfig,
    dead: Option<String>,
    stderr_tail: Arc<Mutex<VecDeque<String>>>,
}

/// Starts `argv` and performs the handshake.
pub fn spawn_session(argv: &[String], config: SessionConfig) -> Result<Session, MethodError> {
    let (program, args) = argv
        .split_first()
        .ok_or_else(|| MethodError::new(ErrorKind::Spawn, "empty launch command"))?;
    let mut cmd = Command::new(program);
    cmd.args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    if let Some(dir) = &config.workdir {
        cmd.current_dir(dir);
    }
    let mut child = cmd
        .spawn()
        .map_err(|e| MethodError::new(ErrorKind::Spawn, format!("cannot start {program:?}: {e}")))?;

    let stdout = child.stdout.take().expect("stdout is piped");
    let (tx, incoming) = mpsc::channel::<Incoming>();
    std::thread::spawn(move || {
        let mut r = BufReader::new(stdout);
        loop {
            let msg = match read_response(&mut r) {
                Ok(Some(resp)) => Ok(resp),
                Ok(None) => Err("method closed its output".to_string()),
                Err(e) => Err(e.to_string()),
            };
            let stop = msg.is_err();
            if tx.send(msg).is_err() || stop {
                break;
            }
        }
    });

    let stderr_tail = Arc::new(Mutex::new(VecDeque::new()));
    let stderr = child.stderr.take().expect("stderr is piped");
    let tail = Arc::clone(&stderr_tail);
    let name = program.clone();
    std::thread::spawn(move || {
        for line in BufReader::new(stderr).lines() {
            let Ok(line) = line else { break };
            log::info!("[{name}] {line}");
            let mut t = tail.lock().unwrap();
            if t.len() == STDERR_TAIL_LINES {
                t.pop_front();
            }
            t.push_back(line);
        }
    });

    let mut session = Session {
        stdin: child.stdin.take(),
        child,
        incoming,
        next_id: 0,
        info: MethodInfo {
            method_id: String::new(),
            capabilities: Default::default(),
            hyperparameters: Default::default(),
            checkpoint_format_version: 0,
        },
        config,
        dead: None,
        stderr_tail,
    };
    let timeout = session.config.handshake_timeout;
    let (payload, _) = session.call_with_timeout(Kind::GetInfo, json!({"protocol": PROTOCOL_VERSION}), vec![], timeout)?;
    let theirs = payload.get("protocol").and_then(Value::as_str).unwrap_or("");
    if theirs != PROTOCOL_VERSION {
        session.kill(format!("method speaks {theirs:?}, host speaks {PROTOCOL_VERSION}"));
        return Err(protocol_error(format!(
            "protocol mismatch: method speaks {theirs:?}, host speaks {PROTOCOL_VERSION:?}"
        )));
    }
    session.info = serde_json::from_value(payload.get("info").cloned().unwrap_or(Value::Null))
        .map_err(|e| protocol_error(format!("handshake info: {e}")))?;
    Ok(session)
}

impl Session {
    /// Information from the handshake (or the latest `setup`).
    pub fn info(&self) -> &MethodInfo {
        &self.info
    }

    pub fn is_alive(&self) -> bool {
        self.dead.is_none()
    }

    /// Last lines the method wrote to stderr.
    pub fn stderr_tail(&self) -> Vec<String> {
        self.stderr_tail.lock().unwrap().iter().cloned().collect()
    }

    fn kill(&mut self, reason: String) {
        self.stdin = None;
        let _ = self.child.kill();
        let _ = self.child.wait();
        self.dead = Some(reason);
    }

    fn dead_error(&mut self, what: &str) -> MethodError {
        // Give the process a moment to finish exiting so the status is known.
        let deadline = Instant::now() + Duration::from_secs(2);
        let status = loop {
            match self.child.try_wait() {
                Ok(Some(s)) => break Some(s),
                Ok(None) if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(10)),
                _ => break None,
            }
        };
        if status.is_none() {
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
        let reason = format!(
            "{what}; exit status {}",
            status.map(|s| s.to_string()).unwrap_or_else(|| "unknown (killed)".into())
        );
        self.stdin = None;
        self.dead = Some(reason.clone());
        let tail = self.stderr_tail();
        let mut err = MethodError::new(ErrorKind::SessionDead, reason);
        if !tail.is_empty() {
            err = err.with_traceback(tail.join("\n"));
        }
        err
    }

    /// Sends one request and waits for its response.
    pub fn call(
        &mut self,
        kind: Kind,
        payload: Value,
        attachments: Vec<Vec<u8>>,
    ) -> Result<(Value, Vec<Vec<u8>>), MethodError> {
        let timeout = self.config.call_timeout;
        self.call_with_timeout(kind, payload, attachments, timeout)
    }

    fn call_with_timeout(
        &mut self,
        kind: Kind,
        payload: Value,
        attachments: Vec<Vec<u8>>,
        timeout: Duration,
    ) -> Result<(Value, Vec<Vec<u8>>), MethodError> {
        if let Some(reason) = &self.dead {
            return Err(MethodError::new(ErrorKind::SessionDead, reason.clone()));
        }
        let id = self.next_id;
        self.next_id += 1;
        let req = Request {
            request_id: id,
            kind,
            payload,
            attachments,
        };
        let stdin = self.stdin.as_mut().expect("live session has stdin");
        if let Err(e) = write_request(stdin, &req) {
            return Err(self.dead_error(&format!("writing {} failed: {e}", kind.name())));
        }
        match self.incoming.recv_timeout(timeout) {
            Ok(Ok(resp)) => {
                if resp.request_id != id {
                    let msg = format!("response id {} does not echo request id {id}", resp.request_id);
                    self.kill(msg.clone());
                    return Err(protocol_error(msg));
                }
                resp.result
            }
            Ok(Err(msg)) => Err(self.dead_error(&format!("{} got no response: {msg}", kind.name()))),
            Err(RecvTimeoutError::Disconnected) => {
                Err(self.dead_error(&format!("{} got no response", kind.name())))
            }
            Err(RecvTimeoutError::Timeout) => {
                let msg = format!("{} timed out after {:?}", kind.name(), timeout);
                self.kill(msg.clone());
                Err(MethodError::new(ErrorKind::Timeout, msg))
            }
        }
    }

    /// Asks the method to exit and reaps it.
    pub fn shutdown(mut self) -> Result<ExitStatus, MethodError> {
        let result = self.call_with_timeout(Kind::Shutdown, json!({}), vec![], Duration::from_secs(10));
        self.stdin = None;
        let status = self
            .child
            .wait()
            .map_err(|e| MethodError::new(ErrorKind::Io, e.to_string()))?;
        self.dead = Some("shut down".into());
        result.map(|_| status)
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        if self.dead.is_none() {
            let _ = self.call_with_timeout(Kind::Shutdown, json!({}), vec![], Duration::from_secs(5));
            self.stdin = None;
            let deadline = Instant::now() + Duration::from_secs(2);
            while Instant::now() < deadline {
                if let Ok(Some(_)) = self.child.try_wait() {
                    return;
                }
                std::thread::sleep(Duration::from_millis(10));
            }
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn path_arg(path: &Path) -> Value {
    Value::String(path.to_string_lossy().into_owned())
}

impl MethodApi for Session {
    fn get_info(&mut self) -> Result<MethodInfo, MethodError> {
        let (p, _) = self.call(Kind::GetInfo, json!({}), vec![])?;
        let info: MethodInfo = arg(&p, "info")?;
        self.info = info.clone();
        Ok(info)
    }

    fn setup(&mut self, request: SetupRequest) -> Result<MethodInfo, MethodError> {
        let mut attachments = Vec::new();
        let dataset = request
            .train_dataset
            .as_ref()
            .map(|d| encode_dataset(d, &mut attachments))
            .unwrap_or(Value::Null);
        let payload = json!({
            "train_dataset": dataset,
            "checkpoint": request.checkpoint.as_deref().map(path_arg),
            "config_overrides": request.config_overrides,
        });
        let (p, _) = self.call(Kind::Setup, payload, attachments)?;
        let info: MethodInfo = arg(&p, "info")?;
        self.info = info.clone();
        Ok(info)
    }

    fn train_iteration(&mut self, step: u64) -> Result<TrainMetrics, MethodError> {
        let (p, _) = self.call(Kind::TrainIteration, json!({"step": step}), vec![])?;
        let metrics: TrainMetrics = arg(&p, "metrics")?;
        if !metrics.contains_key("loss") {
            return Err(protocol_error("train_iteration result lacks `loss`"));
        }
        Ok(metrics)
    }

    fn render(&mut self, camera: &Camera, options: &RenderOptions) -> Result<Image, MethodError> {
        let mut attachments = Vec::new();
        let mut payload = json!({"camera": camera, "output_names": options.output_names});
        if let Some(e) = &options.embedding {
            attachments.push(encode_embedding(e));
            payload["embedding_attachment"] = json!(0);
        }
        let (_, att) = self.call(Kind::Render, payload, attachments)?;
        let img = decode_image(att.first().ok_or_else(|| protocol_error("render returned no image"))?)?;
        if (img.width(), img.height()) != (camera.width as usize, camera.height as usize) {
            return Err(protocol_error(format!(
                "render returned {}x{} for a {}x{} camera",
                img.width(),
                img.height(),
                camera.width,
                camera.height
            )));
        }
        Ok(img)
    }

    fn save(&mut self, path: &Path) -> Result<(), MethodError> {
        self.call(Kind::Save, json!({"path": path_arg(path)}), vec![])?;
        Ok(())
    }

    fn optimize_embedding(
        &mut self,
        dataset: &SceneDataset,
        initial: Option<&[f64]>,
    ) -> Result<Vec<f64>, MethodError> {
        if !self.info.capabilities.supports_embeddings {
            return Err(MethodError::new(
                ErrorKind::Capability,
                format!("{} does not support appearance embeddings", self.info.method_id),
            ));
        }
        let mut attachments = Vec::new();
        let ds = encode_dataset(dataset, &mut attachments);
        let mut payload = json!({"dataset": ds});
        if let Some(e) = initial {
            attachments.push(encode_embedding(e));
            payload["initial_attachment"] = json!(attachments.len() - 1);
        }
        let (_, att) = self.call(Kind::OptimizeEmbedding, payload, attachments)?;
        decode_embedding(att.first().ok_or_else(|| protocol_error("no embedding returned"))?)
    }

    fn export_mesh(&mut self, path: &Path, options: &Value) -> Result<(), MethodError> {
        self.call(Kind::ExportMesh, json!({"path": path_arg(path), "options": options}), vec![])?;
        if !path.exists() {
            return Err(MethodError::new(
                ErrorKind::MethodException,
                format!("export_mesh reported success but {} does not exist", path.display()),
            ));
        }
        Ok(())
    }
}
