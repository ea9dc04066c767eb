//! Line protocol to the barrier controller, a simulator of the prototype
//! barrier, and a client with timeout, retry and event demultiplexing.
//!
//! Host to device: `OPEN`, `CLOSE`, `STATUS`. Device to host: `ACK OPEN`,
//! `ACK CLOSE`, `STATUS OPEN|CLOSED|MOVING`, `EVT PASSED`, `ERR <CODE>`.
//! Every message is one ASCII line terminated by `\n`.

use std::collections::VecDeque;
use std::fmt;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use thiserror::Error;

use crate::clock::Clock;

pub const TRAVEL_MS: u64 = 1500;
pub const CLIENT_TIMEOUT_MS: u64 = 500;
pub const CLIENT_RETRIES: u32 = 1;

#[derive(Debug, Error)]
pub enum BarrierError {
    #[error("cannot parse {0:?}")]
    Parse(String),
    #[error("no reply to {command} after {attempts} attempts")]
    Timeout { command: BarrierCommand, attempts: u32 },
    #[error("device rejected {command}: ERR {code}")]
    Device { command: BarrierCommand, code: String },
    #[error("link closed")]
    Closed,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = BarrierError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BarrierCommand {
    Open,
    Close,
    Status,
}

impl BarrierCommand {
    pub const ALL: [BarrierCommand; 3] = [Self::Open, Self::Close, Self::Status];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Open => "OPEN",
            Self::Close => "CLOSE",
            Self::Status => "STATUS",
        }
    }

    /// Whether `reply` answers this command (as opposed to an event).
    pub fn accepts(&self, reply: &BarrierReply) -> bool {
        matches!(
            (self, reply),
            (Self::Open, BarrierReply::AckOpen)
                | (Self::Close, BarrierReply::AckClose)
                | (Self::Status, BarrierReply::Status(_))
                | (_, BarrierReply::Err(_))
        )
    }
}

impl fmt::Display for BarrierCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportedPosition {
    Open,
    Closed,
    Moving,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BarrierReply {
    AckOpen,
    AckClose,
    Status(ReportedPosition),
    EvtPassed,
    /// Upper-case code made of `A-Z`, `0-9` and `_`.
    Err(String),
}

impl BarrierReply {
    pub fn is_event(&self) -> bool {
        matches!(self, BarrierReply::EvtPassed)
    }
}

impl fmt::Display for BarrierReply {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::AckOpen => f.write_str("ACK OPEN"),
            Self::AckClose => f.write_str("ACK CLOSE"),
            Self::Status(ReportedPosition::Open) => f.write_str("STATUS OPEN"),
            Self::Status(ReportedPosition::Closed) => f.write_str("STATUS CLOSED"),
            Self::Status(ReportedPosition::Moving) => f.write_str("STATUS MOVING"),
            Self::EvtPassed => f.write_str("EVT PASSED"),
            Self::Err(code) => write!(f, "ERR {code}"),
        }
    }
}

/// The bytes put on the wire for a command.
pub fn format_command(cmd: BarrierCommand) -> String {
    format!("{cmd}\n")
}

pub fn format_reply(reply: &BarrierReply) -> String {
    format!("{reply}\n")
}

/// Strips exactly one trailing `\n`. Anything else that is not part of the
/// grammar, including `\r` or padding spaces, makes the line invalid.
fn body(line: &str) -> &str {
    line.strip_suffix('\n').unwrap_or(line)
}

pub fn parse_command(line: &str) -> Result<BarrierCommand> {
    let b = body(line);
    BarrierCommand::ALL
        .into_iter()
        .find(|c| c.as_str() == b)
        .ok_or_else(|| BarrierError::Parse(line.to_string()))
}

pub fn parse_reply(line: &str) -> Result<BarrierReply> {
    let b = body(line);
    let reply = match b {
        "ACK OPEN" => BarrierReply::AckOpen,
        "ACK CLOSE" => BarrierReply::AckClose,
        "STATUS OPEN" => BarrierReply::Status(ReportedPosition::Open),
        "STATUS CLOSED" => BarrierReply::Status(ReportedPosition::Closed),
        "STATUS MOVING" => BarrierReply::Status(ReportedPosition::Moving),
        "EVT PASSED" => BarrierReply::EvtPassed,
        _ => match b.strip_prefix("ERR ") {
            Some(code)
                if !code.is_empty()
                    && code
                        .bytes()
                        .all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == b'_') =>
            {
                BarrierReply::Err(code.to_string())
            }
            _ => return Err(BarrierError::Parse(line.to_string())),
        },
    };
    Ok(reply)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Position {
    Closed,
    Opening,
    Open,
    Closing,
}

/// Simulated barrier. Time is passed in explicitly; the simulator settles
/// travel lazily whenever it is called.
#[derive(Debug, Clone)]
pub struct BarrierSim {
    position: Position,
    /// Start of the current travel.
    since_ms: u64,
    travel_ms: u64,
    /// Set when an opening completes, cleared when the pass event fires.
    pass_armed: bool,
    /// When set, the simulator starts closing this long after a pass.
    pub auto_close_ms: Option<u64>,
    /// When set, a vehicle passes this long after the barrier is fully open.
    pub auto_pass_ms: Option<u64>,
    close_at: Option<u64>,
    opened_at: Option<u64>,
    outbox: Vec<BarrierReply>,
}

impl Default for BarrierSim {
    fn default() -> Self {
        Self::new(TRAVEL_MS)
    }
}

impl BarrierSim {
    pub fn new(travel_ms: u64) -> Self {
        Self {
            position: Position::Closed,
            since_ms: 0,
            travel_ms,
            pass_armed: false,
            auto_close_ms: None,
            auto_pass_ms: None,
            close_at: None,
            opened_at: None,
            outbox: Vec::new(),
        }
    }

    /// Position at `now_ms`, after settling any finished travel.
    pub fn position(&mut self, now_ms: u64) -> Position {
        self.settle(now_ms);
        self.position
    }

    fn settle(&mut self, now_ms: u64) {
        let done = now_ms >= self.since_ms + self.travel_ms;
        match self.position {
            Position::Opening if done => {
                self.position = Position::Open;
                self.pass_armed = true;
                self.opened_at = Some(self.since_ms + self.travel_ms);
            }
            Position::Closing if done => self.position = Position::Closed,
            _ => {}
        }
        if let Some(t) = self.close_at.filter(|&t| now_ms >= t) {
            self.close_at = None;
            if self.position == Position::Open {
                self.start(Position::Closing, t);
                self.settle(now_ms);
            }
        }
    }

    fn start(&mut self, pos: Position, at_ms: u64) {
        self.position = pos;
        self.since_ms = at_ms;
        if pos == Position::Closing {
            self.pass_armed = false;
            self.opened_at = None;
        }
    }

    /// Handles one received line and returns the replies in order.
    pub fn handle_line(&mut self, line: &str, now_ms: u64) -> Vec<BarrierReply> {
        self.settle(now_ms);
        let Ok(cmd) = parse_command(line) else {
            return vec![BarrierReply::Err("UNKNOWN".into())];
        };
        let reply = match cmd {
            BarrierCommand::Open => {
                if matches!(self.position, Position::Closed | Position::Closing) {
                    self.start(Position::Opening, now_ms);
                }
                BarrierReply::AckOpen
            }
            BarrierCommand::Close => {
                if matches!(self.position, Position::Open | Position::Opening) {
                    self.start(Position::Closing, now_ms);
                }
                self.close_at = None;
                BarrierReply::AckClose
            }
            BarrierCommand::Status => BarrierReply::Status(match self.position {
                Position::Open => ReportedPosition::Open,
                Position::Closed => ReportedPosition::Closed,
                Position::Opening | Position::Closing => ReportedPosition::Moving,
            }),
        };
        vec![reply]
    }

    /// The pass-through sensor fired. Queues `EVT PASSED` once per opening,
    /// and only while the barrier is fully open. Returns whether it did.
    pub fn vehicle_passes(&mut self, now_ms: u64) -> bool {
        self.settle(now_ms);
        if self.position != Position::Open || !self.pass_armed {
            return false;
        }
        self.pass_armed = false;
        if let Some(d) = self.auto_close_ms {
            self.close_at = Some(now_ms + d);
        }
        self.outbox.push(BarrierReply::EvtPassed);
        true
    }

    /// Drains the unsolicited events due by `now_ms`.
    pub fn poll(&mut self, now_ms: u64) -> Vec<BarrierReply> {
        self.settle(now_ms);
        if let (Some(d), Some(t)) = (self.auto_pass_ms, self.opened_at) {
            if self.pass_armed && now_ms >= t + d {
                self.vehicle_passes(now_ms);
            }
        }
        std::mem::take(&mut self.outbox)
    }
}

/// Direction of a transcript line relative to the host.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dir {
    Sent,
    Received,
}

/// One transcript line: `<ms> > OPEN` or `<ms> < ACK OPEN`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptLine {
    pub ms: u64,
    pub dir: Dir,
    pub line: String,
}

impl fmt::Display for TranscriptLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let arrow = match self.dir {
            Dir::Sent => '>',
            Dir::Received => '<',
        };
        write!(f, "{} {arrow} {}", self.ms, self.line)
    }
}

pub type Transcript = Arc<Mutex<Vec<TranscriptLine>>>;

pub fn format_transcript(lines: &[TranscriptLine]) -> String {
    lines.iter().map(|l| format!("{l}\n")).collect()
}

/// Byte transport to a barrier. `recv_line` returns `Ok(None)` when nothing
/// arrives within `timeout_ms`.
pub trait BarrierLink: Send {
    fn send_line(&mut self, line: &str) -> Result<()>;
    fn recv_line(&mut self, timeout_ms: u64) -> Result<Option<String>>;
}

impl<L: BarrierLink + ?Sized> BarrierLink for Box<L> {
    fn send_line(&mut self, line: &str) -> Result<()> {
        (**self).send_line(line)
    }
    fn recv_line(&mut self, timeout_ms: u64) -> Result<Option<String>> {
        (**self).recv_line(timeout_ms)
    }
}

/// In-process link to a shared simulator. Replies are queued instantly, so
/// an empty queue means the simulated timeout elapsed with no answer.
pub struct SimLink {
    sim: Arc<Mutex<BarrierSim>>,
    clock: Arc<dyn Clock>,
    inbox: VecDeque<String>,
    /// A dead link swallows commands and never answers.
    pub dead: bool,
}

impl SimLink {
    pub fn new(sim: Arc<Mutex<BarrierSim>>, clock: Arc<dyn Clock>) -> Self {
        Self {
            sim,
            clock,
            inbox: VecDeque::new(),
            dead: false,
        }
    }

    pub fn sim(&self) -> Arc<Mutex<BarrierSim>> {
        Arc::clone(&self.sim)
    }
}

impl BarrierLink for SimLink {
    fn send_line(&mut self, line: &str) -> Result<()> {
        if self.dead {
            return Ok(());
        }
        let now = self.clock.now_ms();
        let mut sim = self.sim.lock().expect("sim lock");
        self.inbox.extend(sim.poll(now).iter().map(format_reply));
        self.inbox.extend(sim.handle_line(line, now).iter().map(format_reply));
        Ok(())
    }

    fn recv_line(&mut self, _timeout_ms: u64) -> Result<Option<String>> {
        if self.dead {
            return Ok(None);
        }
        if self.inbox.is_empty() {
            let now = self.clock.now_ms();
            let mut sim = self.sim.lock().expect("sim lock");
            self.inbox.extend(sim.poll(now).iter().map(format_reply));
        }
        Ok(self.inbox.pop_front())
    }
}

/// Link over any byte stream; a reader thread feeds a channel so receives
/// can time out.
pub struct StreamLink {
    writer: Box<dyn Write + Send>,
    lines: Receiver<io::Result<String>>,
}

impl StreamLink {
    pub fn new<R: io::Read + Send + 'static>(reader: R, writer: Box<dyn Write + Send>) -> Self {
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let mut reader = BufReader::new(reader);
            loop {
                let mut line = String::new();
                match reader.read_line(&mut line) {
                    Ok(0) => break,
                    Ok(_) => {
                        if tx.send(Ok(line)).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        break;
                    }
                }
            }
        });
        Self { writer, lines: rx }
    }

    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        Ok(Self::new(reader, Box::new(stream)))
    }
}

impl BarrierLink for StreamLink {
    fn send_line(&mut self, line: &str) -> Result<()> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.flush()?;
        Ok(())
    }

    fn recv_line(&mut self, timeout_ms: u64) -> Result<Option<String>> {
        match self.lines.recv_timeout(Duration::from_millis(timeout_ms)) {
            Ok(Ok(line)) => Ok(Some(line)),
            Ok(Err(e)) => Err(e.into()),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(BarrierError::Closed),
        }
    }
}

pub type EventCallback = Box<dyn FnMut(BarrierReply) + Send>;

/// Host side of the link. Events that arrive while waiting for a reply go
/// to the callback, never to the caller.
pub struct BarrierClient<L> {
    link: L,
    clock: Arc<dyn Clock>,
    pub timeout_ms: u64,
    pub retries: u32,
    on_event: Option<EventCallback>,
    transcript: Transcript,
}

impl<L: BarrierLink> BarrierClient<L> {
    pub fn new(link: L, clock: Arc<dyn Clock>) -> Self {
        Self {
            link,
            clock,
            timeout_ms: CLIENT_TIMEOUT_MS,
            retries: CLIENT_RETRIES,
            on_event: None,
            transcript: Arc::default(),
        }
    }

    pub fn on_event(&mut self, f: impl FnMut(BarrierReply) + Send + 'static) {
        self.on_event = Some(Box::new(f));
    }

    pub fn transcript(&self) -> Transcript {
        Arc::clone(&self.transcript)
    }

    pub fn link_mut(&mut self) -> &mut L {
        &mut self.link
    }

    fn record(&self, dir: Dir, line: &str) {
        self.transcript.lock().expect("transcript lock").push(TranscriptLine {
            ms: self.clock.now_ms(),
            dir,
            line: body(line).to_string(),
        });
    }

    fn dispatch_event(&mut self, reply: BarrierReply) {
        match self.on_event.as_mut() {
            Some(cb) => cb(reply),
            None => log::debug!("dropping barrier event {reply}"),
        }
    }

    /// Sends `cmd` and waits for its reply, resending once on timeout.
    /// `ERR` replies come back as [`BarrierError::Device`].
    pub fn send(&mut self, cmd: BarrierCommand) -> Result<BarrierReply> {
        let attempts = self.retries + 1;
        for attempt in 1..=attempts {
            let line = format_command(cmd);
            self.record(Dir::Sent, &line);
            self.link.send_line(&line)?;
            while let Some(raw) = self.link.recv_line(self.timeout_ms)? {
                self.record(Dir::Received, &raw);
                let reply = match parse_reply(&raw) {
                    Ok(r) => r,
                    Err(e) => {
                        log::warn!("barrier: {e}");
                        continue;
                    }
                };
                if reply.is_event() {
                    self.dispatch_event(reply);
                } else if cmd.accepts(&reply) {
                    return match reply {
                        BarrierReply::Err(code) => Err(BarrierError::Device { command: cmd, code }),
                        r => Ok(r),
                    };
                } else {
                    log::warn!("barrier: unexpected {reply} while waiting for {cmd}");
                }
            }
            if attempt < attempts {
                log::warn!("barrier: no reply to {cmd}, retrying");
            }
        }
        Err(BarrierError::Timeout { command: cmd, attempts })
    }

    /// Delivers any events already waiting on the link. Returns how many
    /// lines were read.
    pub fn poll_events(&mut self, timeout_ms: u64) -> Result<usize> {
        let mut n = 0;
        let mut wait = timeout_ms;
        while let Some(raw) = self.link.recv_line(wait)? {
            wait = 0;
            n += 1;
            self.record(Dir::Received, &raw);
            match parse_reply(&raw) {
                Ok(r) if r.is_event() => self.dispatch_event(r),
                Ok(r) => log::warn!("barrier: stray reply {r}"),
                Err(e) => log::warn!("barrier: {e}"),
            }
        }
        Ok(n)
    }
}

/// Serves a simulator over one byte stream until EOF. Between lines the
/// simulator is polled every `poll_ms` so unsolicited events go out.
pub fn serve_sim<R, W>(
    sim: &mut BarrierSim,
    clock: &dyn Clock,
    reader: R,
    mut writer: W,
    poll_ms: u64,
) -> io::Result<()>
where
    R: io::Read + Send + 'static,
    W: Write,
{
    let mut link = StreamLink::new(reader, Box::new(io::sink()));
    loop {
        let line = match link.recv_line(poll_ms) {
            Ok(line) => line,
            Err(BarrierError::Closed) => return Ok(()),
            Err(BarrierError::Io(e)) => return Err(e),
            Err(e) => return Err(io::Error::other(e.to_string())),
        };
        let now = clock.now_ms();
        let mut out: Vec<BarrierReply> = sim.poll(now);
        if let Some(line) = line {
            out.extend(sim.handle_line(&line, now));
        }
        for r in &out {
            writer.write_all(format_reply(r).as_bytes())?;
        }
        writer.flush()?;
    }
}

/// Accepts connections one at a time and serves the shared simulator.
pub fn serve_sim_tcp(listener: TcpListener, sim: Arc<Mutex<BarrierSim>>, clock: Arc<dyn Clock>) -> io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        let mut local = sim.lock().expect("sim lock").clone();
        let res = serve_sim(&mut local, clock.as_ref(), reader, stream, 20);
        *sim.lock().expect("sim lock") = local;
        if let Err(e) = res {
            log::warn!("barrier connection ended: {e}");
        }
    }
    Ok(())
}
