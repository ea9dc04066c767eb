//! Line protocol between the gate pipeline and inference engines.
//!
//! Every message is one JSON object on one line. Requests carry a
//! per-connection id that must strictly increase; each response echoes the
//! id of the request it answers. Images travel as file paths.
//!
//! ```text
//! {"id":1,"op":"detect_vehicle","path":"frames/f1.pgm"}
//! {"id":1,"status":"ok","result":{"detections":[{"class_id":0,"confidence":1.0,"bbox":[0.5,0.5,0.2,0.1]}]}}
//! {"id":2,"op":"ocr","path":"frames/f1.pgm","region":[10,20,90,40]}
//! {"id":2,"status":"ok","result":{"text":"LEA123","confidence":1.0}}
//! {"id":3,"status":"error","code":"missing_sidecar","message":"..."}
//! ```

mod conformance;
mod reference;
mod transport;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::dataset::NormBBox;

pub use conformance::{run_transcript, GoldenExchange, TranscriptMismatch};
pub use reference::{
    read_embedding, render_plate, salt_and_pepper, template_ocr, OracleDetector, ReferenceBackend, PLATE_MARGIN,
};
pub use transport::{serve, serve_tcp, InProcess, StreamEndpoint, DEFAULT_TIMEOUT_MS};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("unknown op {0:?}")]
    UnknownOp(String),
    #[error("unknown status {0:?}")]
    UnknownStatus(String),
    #[error("request id {id} does not follow {last}")]
    NonIncreasingId { id: u64, last: u64 },
    #[error("request path is empty")]
    EmptyPath,
    #[error("no response within {0} ms")]
    Timeout(u64),
    #[error("backend connection closed")]
    Closed,
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("backend error {code}: {message}")]
    Remote { code: String, message: String },
    #[error("endpoint timeout must be positive")]
    ZeroTimeout,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BackendError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    DetectVehicle,
    DetectPlate,
    Ocr,
    FaceEmbed,
}

impl Op {
    pub const ALL: [Op; 4] = [Op::DetectVehicle, Op::DetectPlate, Op::Ocr, Op::FaceEmbed];

    pub fn name(self) -> &'static str {
        match self {
            Op::DetectVehicle => "detect_vehicle",
            Op::DetectPlate => "detect_plate",
            Op::Ocr => "ocr",
            Op::FaceEmbed => "face_embed",
        }
    }

    pub fn parse(s: &str) -> Option<Op> {
        Op::ALL.into_iter().find(|op| op.name() == s)
    }
}

/// Pixel rectangle `[x1, y1, x2, y2)` within the referenced image.
pub type Region = [u32; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct BackendRequest {
    pub id: u64,
    pub op: Op,
    pub path: String,
    /// Only meaningful for `ocr`: the part of the image holding the plate.
    pub region: Option<Region>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: u32,
    pub confidence: f64,
    #[serde(with = "bbox_array")]
    pub bbox: NormBBox,
}

mod bbox_array {
    use super::NormBBox;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &NormBBox, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq([b.cx, b.cy, b.w, b.h])
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NormBBox, D::Error> {
        let [cx, cy, w, h] = <[f64; 4]>::deserialize(d)?;
        NormBBox::new(cx, cy, w, h).map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Detections(Vec<Detection>),
    Text { text: String, confidence: f64 },
    Embedding(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Status {
    Ok(Payload),
    Error { code: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendResponse {
    pub id: u64,
    pub status: Status,
}

impl BackendResponse {
    pub fn error(id: u64, code: &str, message: impl Into<String>) -> Self {
        Self {
            id,
            status: Status::Error {
                code: code.to_string(),
                message: message.into(),
            },
        }
    }
}

fn malformed(msg: impl std::fmt::Display) -> BackendError {
    BackendError::Malformed(msg.to_string())
}

fn parse_object(line: &str) -> Result<Map<String, Value>> {
    match serde_json::from_str::<Value>(line.trim_end_matches(['\n', '\r'])) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(malformed("not a JSON object")),
        Err(e) => Err(malformed(e)),
    }
}

fn field_id(m: &Map<String, Value>) -> Result<u64> {
    m.get("id")
        .and_then(Value::as_u64)
        .ok_or_else(|| malformed("missing or non-integer \"id\""))
}

fn field_str<'a>(m: &'a Map<String, Value>, key: &str) -> Result<&'a str> {
    m.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| malformed(format!("missing string {key:?}")))
}

/// Encodes a request as one newline-terminated line.
pub fn encode_request(req: &BackendRequest) -> Result<String> {
    if req.path.is_empty() {
        return Err(BackendError::EmptyPath);
    }
    let mut v = json!({"id": req.id, "op": req.op.name(), "path": req.path});
    if let Some(r) = req.region {
        v["region"] = json!(r);
    }
    Ok(format!("{v}\n"))
}

pub fn decode_request(line: &str) -> Result<BackendRequest> {
    let m = parse_object(line)?;
    let id = field_id(&m)?;
    let op_name = field_str(&m, "op")?;
    let op = Op::parse(op_name).ok_or_else(|| BackendError::UnknownOp(op_name.to_string()))?;
    let path = field_str(&m, "path")?.to_string();
    if path.is_empty() {
        return Err(BackendError::EmptyPath);
    }
    let region = match m.get("region") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let r: Region = serde_json::from_value(v.clone()).map_err(malformed)?;
            if r[0] >= r[2] || r[1] >= r[3] {
                return Err(malformed(format!("empty region {r:?}")));
            }
            Some(r)
        }
    };
    Ok(BackendRequest { id, op, path, region })
}

pub fn encode_response(resp: &BackendResponse) -> String {
    let v = match &resp.status {
        Status::Ok(p) => {
            let result = match p {
                Payload::Detections(d) => json!({ "detections": d }),
                Payload::Text { text, confidence } => json!({"text": text, "confidence": confidence}),
                Payload::Embedding(e) => json!({ "embedding": e }),
            };
            json!({"id": resp.id, "status": "ok", "result": result})
        }
        Status::Error { code, message } => {
            json!({"id": resp.id, "status": "error", "code": code, "message": message})
        }
    };
    format!("{v}\n")
}

fn decode_payload(v: &Value) -> Result<Payload> {
    let m = v.as_object().ok_or_else(|| malformed("result is not an object"))?;
    if let Some(d) = m.get("detections") {
        return serde_json::from_value(d.clone())
            .map(Payload::Detections)
            .map_err(malformed);
    }
    if let Some(e) = m.get("embedding") {
        return serde_json::from_value(e.clone())
            .map(Payload::Embedding)
            .map_err(malformed);
    }
    if let Some(t) = m.get("text") {
        let text = t.as_str().ok_or_else(|| malformed("text is not a string"))?;
        let confidence = m
            .get("confidence")
            .and_then(Value::as_f64)
            .filter(|c| (0.0..=1.0).contains(c))
            .ok_or_else(|| malformed("text result needs confidence in [0,1]"))?;
        return Ok(Payload::Text {
            text: text.to_string(),
            confidence,
        });
    }
    Err(malformed("result has no detections, text or embedding"))
}

pub fn decode_response(line: &str) -> Result<BackendResponse> {
    let m = parse_object(line)?;
    let id = field_id(&m)?;
    let status = match field_str(&m, "status")? {
        "ok" => Status::Ok(decode_payload(
            m.get("result").ok_or_else(|| malformed("ok response without result"))?,
        )?),
        "error" => Status::Error {
            code: field_str(&m, "code")?.to_string(),
            message: field_str(&m, "message").unwrap_or("").to_string(),
        },
        other => return Err(BackendError::UnknownStatus(other.to_string())),
    };
    Ok(BackendResponse { id, status })
}

/// Server-side view of one connection: decodes requests and enforces the
/// strictly increasing id rule.
#[derive(Debug, Default)]
pub struct RequestStream {
    last: Option<u64>,
}

impl RequestStream {
    pub fn accept(&mut self, line: &str) -> Result<BackendRequest> {
        let req = decode_request(line)?;
        if let Some(last) = self.last {
            if req.id <= last {
                return Err(BackendError::NonIncreasingId { id: req.id, last });
            }
        }
        self.last = Some(req.id);
        Ok(req)
    }
}

/// Something that answers requests: a reference engine, or a test double.
pub trait Handler: Send + Sync {
    fn handle(&self, req: &BackendRequest) -> BackendResponse;
}

impl<H: Handler + ?Sized> Handler for std::sync::Arc<H> {
    fn handle(&self, req: &BackendRequest) -> BackendResponse {
        (**self).handle(req)
    }
}

/// Client side of a backend connection. Implementations assign request ids.
pub trait Backend: Send {
    fn call(&mut self, op: Op, path: &str, region: Option<Region>) -> Result<Payload>;

    fn detect(&mut self, op: Op, path: &str) -> Result<Vec<Detection>> {
        match self.call(op, path, None)? {
            Payload::Detections(d) => Ok(d),
            other => Err(BackendError::Protocol(format!("{} returned {other:?}", op.name()))),
        }
    }

    fn ocr(&mut self, path: &str, region: Option<Region>) -> Result<(String, f64)> {
        match self.call(Op::Ocr, path, region)? {
            Payload::Text { text, confidence } => Ok((text, confidence)),
            other => Err(BackendError::Protocol(format!("ocr returned {other:?}"))),
        }
    }

    fn face_embed(&mut self, path: &str) -> Result<Vec<f64>> {
        match self.call(Op::FaceEmbed, path, None)? {
            Payload::Embedding(e) => Ok(e),
            other => Err(BackendError::Protocol(format!("face_embed returned {other:?}"))),
        }
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn call(&mut self, op: Op, path: &str, region: Option<Region>) -> Result<Payload> {
        (**self).call(op, path, region)
    }
}

/// Turns an error status into [`BackendError::Remote`].
pub(crate) fn into_payload(status: Status) -> Result<Payload> {
    match status {
        Status::Ok(p) => Ok(p),
        Status::Error { code, message } => Err(BackendError::Remote { code, message }),
    }
}
