//! Golden transcripts: recorded request/response pairs that any backend
//! implementation must reproduce.
//!
//! A transcript is a text file of alternating lines, `> ` followed by a
//! request and `< ` followed by the expected response. Lines starting with
//! `#` are comments. Error responses are compared by code only, since
//! messages may mention host paths.

use super::{
    decode_request, decode_response, encode_request, encode_response, Backend, BackendError, BackendRequest,
    BackendResponse, Payload, Result, Status,
};

#[derive(Debug, Clone, PartialEq)]
pub struct GoldenExchange {
    pub request: BackendRequest,
    pub response: BackendResponse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptMismatch {
    pub index: usize,
    pub request: BackendRequest,
    pub expected: Status,
    pub got: String,
}

impl GoldenExchange {
    pub fn parse_transcript(text: &str) -> Result<Vec<GoldenExchange>> {
        let mut out = Vec::new();
        let mut pending: Option<BackendRequest> = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: &str| BackendError::Malformed(format!("transcript line {}: {msg}", n + 1));
            if let Some(req) = line.strip_prefix("> ") {
                if pending.is_some() {
                    return Err(bad("request without response"));
                }
                pending = Some(decode_request(req)?);
            } else if let Some(resp) = line.strip_prefix("< ") {
                let request = pending.take().ok_or_else(|| bad("response without request"))?;
                out.push(GoldenExchange {
                    request,
                    response: decode_response(resp)?,
                });
            } else {
                return Err(bad("expected `> ` or `< `"));
            }
        }
        if pending.is_some() {
            return Err(BackendError::Malformed("transcript ends with a request".into()));
        }
        Ok(out)
    }

    pub fn format_transcript(exchanges: &[GoldenExchange]) -> Result<String> {
        let mut out = String::new();
        for ex in exchanges {
            out.push_str("> ");
            out.push_str(&encode_request(&ex.request)?);
            out.push_str("< ");
            out.push_str(&encode_response(&ex.response));
        }
        Ok(out)
    }

    /// Runs `requests` against `backend` and records what it answered.
    /// Request ids are renumbered from 1.
    pub fn record(backend: &mut dyn Backend, requests: &[BackendRequest]) -> Result<Vec<GoldenExchange>> {
        requests
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let id = i as u64 + 1;
                let status = match backend.call(r.op, &r.path, r.region) {
                    Ok(p) => Status::Ok(p),
                    Err(BackendError::Remote { code, message }) => Status::Error { code, message },
                    Err(e) => return Err(e),
                };
                Ok(GoldenExchange {
                    request: BackendRequest { id, ..r.clone() },
                    response: BackendResponse { id, status },
                })
            })
            .collect()
    }
}

fn agrees(expected: &Status, got: &Result<Payload>) -> bool {
    match (expected, got) {
        (Status::Ok(want), Ok(have)) => want == have,
        (Status::Error { code, .. }, Err(BackendError::Remote { code: have, .. })) => code == have,
        _ => false,
    }
}

/// Replays a transcript and lists every exchange the backend answered
/// differently. An empty result means the backend conforms.
pub fn run_transcript(backend: &mut dyn Backend, exchanges: &[GoldenExchange]) -> Vec<TranscriptMismatch> {
    exchanges
        .iter()
        .enumerate()
        .filter_map(|(index, ex)| {
            let r = &ex.request;
            let got = backend.call(r.op, &r.path, r.region);
            (!agrees(&ex.response.status, &got)).then(|| TranscriptMismatch {
                index,
                request: r.clone(),
                expected: ex.response.status.clone(),
                got: format!("{got:?}"),
            })
        })
        .collect()
}
