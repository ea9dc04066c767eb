use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};

use super::{
    decode_response, encode_request, encode_response, into_payload, Backend, BackendError, BackendRequest,
    BackendResponse, Handler, Op, Payload, Region, RequestStream, Result,
};

pub const DEFAULT_TIMEOUT_MS: u64 = 2000;

/// Calls a handler in the same process, still passing every message
/// through the line codec so behavior matches a remote backend.
pub struct InProcess<H> {
    handler: H,
    stream: RequestStream,
    next_id: u64,
}

impl<H: Handler> InProcess<H> {
    pub fn new(handler: H) -> Self {
        Self {
            handler,
            stream: RequestStream::default(),
            next_id: 1,
        }
    }

    pub fn handler(&self) -> &H {
        &self.handler
    }
}

impl<H: Handler> Backend for InProcess<H> {
    fn call(&mut self, op: Op, path: &str, region: Option<Region>) -> Result<Payload> {
        let id = self.next_id;
        self.next_id += 1;
        let line = encode_request(&BackendRequest {
            id,
            op,
            path: path.to_string(),
            region,
        })?;
        let resp = respond(&self.handler, &mut self.stream, &line);
        let resp = decode_response(&encode_response(&resp))?;
        if resp.id != id {
            return Err(BackendError::Protocol(format!("expected id {id}, got {}", resp.id)));
        }
        into_payload(resp.status)
    }
}

fn error_code(e: &BackendError) -> &'static str {
    match e {
        BackendError::UnknownOp(_) => "unknown_op",
        BackendError::NonIncreasingId { .. } => "bad_id",
        BackendError::EmptyPath => "empty_path",
        _ => "malformed",
    }
}

fn respond<H: Handler + ?Sized>(handler: &H, stream: &mut RequestStream, line: &str) -> BackendResponse {
    match stream.accept(line) {
        Ok(req) => {
            let mut resp = handler.handle(&req);
            resp.id = req.id;
            resp
        }
        Err(e) => {
            // Echo the id when the line carries one so the caller can pair it.
            let id = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("id").and_then(|i| i.as_u64()))
                .unwrap_or(0);
            BackendResponse::error(id, error_code(&e), e.to_string())
        }
    }
}

/// Answers requests read line by line from `reader` until end of input.
/// Returns the number of responses written.
pub fn serve<H, R, W>(handler: &H, reader: R, mut writer: W) -> io::Result<u64>
where
    H: Handler + ?Sized,
    R: BufRead,
    W: Write,
{
    let mut stream = RequestStream::default();
    let mut count = 0;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = respond(handler, &mut stream, &line);
        writer.write_all(encode_response(&resp).as_bytes())?;
        writer.flush()?;
        count += 1;
    }
    Ok(count)
}

/// Accepts connections forever, one thread and one id sequence per
/// connection.
pub fn serve_tcp<H: Handler + 'static>(listener: TcpListener, handler: Arc<H>) -> io::Result<()> {
    for conn in listener.incoming() {
        let conn = conn?;
        let handler = Arc::clone(&handler);
        thread::spawn(move || {
            let peer = conn.peer_addr().ok();
            let result = conn.try_clone().and_then(|r| serve(&*handler, BufReader::new(r), conn));
            match result {
                Ok(n) => debug!("connection {peer:?} closed after {n} requests"),
                Err(e) => warn!("connection {peer:?} failed: {e}"),
            }
        });
    }
    Ok(())
}

/// A backend reached over a byte stream: a child process's standard
/// streams or a TCP connection. One request is in flight at a time.
pub struct StreamEndpoint {
    writer: Box<dyn Write + Send>,
    rx: Receiver<io::Result<String>>,
    timeout: Duration,
    next_id: u64,
    child: Option<Child>,
}

impl StreamEndpoint {
    pub fn new<R, W>(reader: R, writer: W, timeout_ms: u64) -> Result<Self>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        if timeout_ms == 0 {
            return Err(BackendError::ZeroTimeout);
        }
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        Ok(Self {
            writer: Box::new(writer),
            rx,
            timeout: Duration::from_millis(timeout_ms),
            next_id: 1,
            child: None,
        })
    }

    /// Starts `cmd` with piped standard input and output.
    pub fn spawn(cmd: &mut Command, timeout_ms: u64) -> Result<Self> {
        let mut child = cmd.stdin(Stdio::piped()).stdout(Stdio::piped()).spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut ep = Self::new(stdout, stdin, timeout_ms)?;
        ep.child = Some(child);
        Ok(ep)
    }

    pub fn connect(addr: impl ToSocketAddrs, timeout_ms: u64) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Self::new(stream.try_clone()?, stream, timeout_ms)
    }

    pub fn timeout_ms(&self) -> u64 {
        self.timeout.as_millis() as u64
    }
}

impl Backend for StreamEndpoint {
    fn call(&mut self, op: Op, path: &str, region: Option<Region>) -> Result<Payload> {
        let id = self.next_id;
        self.next_id += 1;
        let line = encode_request(&BackendRequest {
            id,
            op,
            path: path.to_string(),
            region,
        })?;
        if let Err(e) = self.writer.write_all(line.as_bytes()).and_then(|_| self.writer.flush()) {
            return Err(match e.kind() {
                io::ErrorKind::BrokenPipe | io::ErrorKind::ConnectionReset => BackendError::Closed,
                _ => BackendError::Io(e),
            });
        }
        let deadline = Instant::now() + self.timeout;
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            match self.rx.recv_timeout(remaining) {
                Ok(Ok(line)) => {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let resp = decode_response(&line)?;
                    if resp.id < id {
                        // Late answer to a request that already timed out.
                        debug!("discarding stale response {} while waiting for {id}", resp.id);
                        continue;
                    }
                    if resp.id > id {
                        return Err(BackendError::Protocol(format!(
                            "response id {} while waiting for {id}",
                            resp.id
                        )));
                    }
                    return into_payload(resp.status);
                }
                Ok(Err(e)) => return Err(BackendError::Io(e)),
                Err(RecvTimeoutError::Timeout) => return Err(BackendError::Timeout(self.timeout_ms())),
                Err(RecvTimeoutError::Disconnected) => return Err(BackendError::Closed),
            }
        }
    }
}

impl Drop for StreamEndpoint {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
