//! Gate session controller: arrival, plate check, driver check, decision,
//! barrier command, slot assignment and audit events, driven by a clock so
//! whole scenarios replay deterministically.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::backend::{render_plate, Backend, BackendError, Op, Payload, Region};
use crate::barrier::{
    format_transcript, BarrierClient, BarrierCommand, BarrierLink, BarrierReply, BarrierSim, SimLink, Transcript,
};
use crate::clock::{Clock, SimClock};
use crate::dataset::{format_label_line, AnnotationRecord, NormBBox};
use crate::face::{Embedding, Gallery, Identity, Source, DEFAULT_DIM, DEFAULT_THRESHOLD};
use crate::imaging::{fill_rect, fill_rounded_rect, read_pnm, write_pnm, Paint, Raster};
use crate::plate::{crop_rect, match_registry, read_plate, RegistryMatch, DEFAULT_CROP_MARGIN};
use crate::store::{Collection, Fields, Store, StoreError, Value};

#[derive(Debug, Error)]
pub enum GateError {
    #[error("invalid gate config: {0}")]
    Config(String),
    #[error("scenario line {line}: {message}")]
    Scenario { line: usize, message: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = GateError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct GateConfig {
    pub max_plate_attempts: u32,
    pub max_face_attempts: u32,
    /// A granted vehicle that has not passed within this long expires.
    pub session_timeout_ms: u64,
    /// Delay between a pass and the CLOSE command.
    pub barrier_auto_close_ms: u64,
    pub face_threshold: f64,
    pub face_dim: usize,
    /// Also require the driver to be listed on the vehicle record.
    pub binding_required: bool,
    pub crop_margin: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            max_plate_attempts: 3,
            max_face_attempts: 3,
            session_timeout_ms: 30_000,
            barrier_auto_close_ms: 10_000,
            face_threshold: DEFAULT_THRESHOLD,
            face_dim: DEFAULT_DIM,
            binding_required: false,
            crop_margin: DEFAULT_CROP_MARGIN,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GateError::Config(m.to_string()));
        if self.max_plate_attempts == 0 || self.max_face_attempts == 0 {
            return bad("attempt limits must be at least 1");
        }
        if self.session_timeout_ms == 0 || self.barrier_auto_close_ms == 0 {
            return bad("timeouts must be positive");
        }
        if !(self.face_threshold >= 0.0 && self.face_threshold <= 2.0) {
            return bad("face threshold must lie in [0, 2]");
        }
        if self.face_dim == 0 {
            return bad("face dimension must be positive");
        }
        if !(self.crop_margin >= 0.0 && self.crop_margin.is_finite()) {
            return bad("crop margin must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DenyReason {
    PlateUnknown,
    DriverUnknown,
    /// Binding is on and the driver is not listed for the vehicle.
    DriverNotBound,
    LotFull,
    /// The plate already holds a slot, so this is a second car with the
    /// same plate or a misread.
    AlreadyParked,
}

impl DenyReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            DenyReason::PlateUnknown => "PlateUnknown",
            DenyReason::DriverUnknown => "DriverUnknown",
            DenyReason::DriverNotBound => "DriverNotBound",
            DenyReason::LotFull => "LotFull",
            DenyReason::AlreadyParked => "AlreadyParked",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SessionState {
    Idle,
    VehicleDetected,
    PlateCapture,
    PlateVerified,
    FaceCapture,
    Granted,
    Denied(DenyReason),
    Passed,
    Expired,
}

impl SessionState {
    /// States after which the session no longer occupies the lane.
    pub fn is_closed(&self) -> bool {
        matches!(
            self,
            SessionState::Denied(_) | SessionState::Passed | SessionState::Expired
        )
    }
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SessionState::Denied(r) => write!(f, "Denied({})", r.as_str()),
            other => fmt::Debug::fmt(other, f),
        }
    }
}

/// One vehicle at the gate. Frames are tried in order, one per attempt;
/// the last frame is reused when attempts outnumber frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arrival {
    pub frames: Vec<String>,
    /// Driver captures; defaults to `frames` when empty.
    pub face_frames: Vec<String>,
}

impl Arrival {
    pub fn new(frame: &str) -> Self {
        Self {
            frames: vec![frame.to_string()],
            face_frames: Vec::new(),
        }
    }

    fn frame(&self, attempt: u32) -> &str {
        pick(&self.frames, attempt)
    }

    fn face_frame(&self, attempt: u32) -> &str {
        if self.face_frames.is_empty() {
            self.frame(attempt)
        } else {
            pick(&self.face_frames, attempt)
        }
    }
}

fn pick(list: &[String], attempt: u32) -> &str {
    &list[(attempt as usize).min(list.len() - 1)]
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateSession {
    pub id: u64,
    pub state: SessionState,
    pub arrival: Arrival,
    pub plate: Option<String>,
    pub employee: Option<String>,
    pub slot: Option<String>,
    pub plate_attempts: u32,
    pub face_attempts: u32,
    /// Every state entered, with the time it was entered.
    pub history: Vec<(u64, SessionState)>,
}

impl GateSession {
    fn granted_at(&self) -> Option<u64> {
        self.history
            .iter()
            .find(|(_, s)| *s == SessionState::Granted)
            .map(|(t, _)| *t)
    }
}

/// One line of the transition trace: `ts session from to detail`. Lane
/// level lines (exits, stray passes) use `-` for the session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceLine {
    pub ts: u64,
    pub session: Option<u64>,
    pub from: String,
    pub to: String,
    pub detail: String,
}

impl fmt::Display for TraceLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.session {
            Some(s) => write!(f, "{} {s} {} {}", self.ts, self.from, self.to)?,
            None => write!(f, "{} - {} {}", self.ts, self.from, self.to)?,
        }
        if self.detail.is_empty() {
            Ok(())
        } else {
            write!(f, " {}", self.detail)
        }
    }
}

pub fn format_trace(lines: &[TraceLine]) -> String {
    lines.iter().map(|l| format!("{l}\n")).collect()
}

/// Backends for the three roles. One backend may serve all of them.
pub struct GateBackends {
    backends: Vec<Box<dyn Backend>>,
    detector: usize,
    ocr: usize,
    face: usize,
}

impl GateBackends {
    pub fn single(b: Box<dyn Backend>) -> Self {
        Self {
            backends: vec![b],
            detector: 0,
            ocr: 0,
            face: 0,
        }
    }

    pub fn split(detector: Box<dyn Backend>, ocr: Box<dyn Backend>, face: Box<dyn Backend>) -> Self {
        Self {
            backends: vec![detector, ocr, face],
            detector: 0,
            ocr: 1,
            face: 2,
        }
    }

    fn detector(&mut self) -> &mut dyn Backend {
        self.backends[self.detector].as_mut()
    }

    fn ocr(&mut self) -> &mut dyn Backend {
        self.backends[self.ocr].as_mut()
    }

    fn face(&mut self) -> &mut dyn Backend {
        self.backends[self.face].as_mut()
    }
}

/// Short failure label for trace details.
fn backend_code(e: &BackendError) -> String {
    match e {
        BackendError::Remote { code, .. } => code.clone(),
        BackendError::Timeout(_) => "timeout".into(),
        BackendError::Closed => "closed".into(),
        _ => "protocol".into(),
    }
}

/// Wraps a backend and fails a seeded fraction of calls with a timeout, as
/// an unreliable network or engine would.
pub struct FlakyBackend<B> {
    inner: B,
    rng: ChaCha8Rng,
    fail_rate: f64,
    pub failures: u64,
}

impl<B: Backend> FlakyBackend<B> {
    pub fn new(inner: B, fail_rate: f64, seed: u64) -> Self {
        Self {
            inner,
            rng: ChaCha8Rng::seed_from_u64(seed),
            fail_rate: fail_rate.clamp(0.0, 1.0),
            failures: 0,
        }
    }
}

impl<B: Backend> Backend for FlakyBackend<B> {
    fn call(&mut self, op: Op, path: &str, region: Option<Region>) -> crate::backend::Result<Payload> {
        if self.rng.random_bool(self.fail_rate) {
            self.failures += 1;
            return Err(BackendError::Timeout(0));
        }
        self.inner.call(op, path, region)
    }
}

/// What an exit read did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExitOutcome {
    Departed { plate: String, slot: String },
    Anomaly(String),
}

enum Attempt<T> {
    Ok(T),
    Retry(String),
}

pub struct GateController {
    config: GateConfig,
    store: Store,
    backends: GateBackends,
    barrier: BarrierClient<Box<dyn BarrierLink>>,
    barrier_events: Arc<Mutex<VecDeque<BarrierReply>>>,
    clock: Arc<dyn Clock>,
    frame_root: PathBuf,
    active: Option<GateSession>,
    queue: VecDeque<Arrival>,
    finished: Vec<GateSession>,
    next_id: u64,
    auto_close_at: Option<u64>,
    trace: Vec<TraceLine>,
}

impl GateController {
    /// `frame_root` resolves frame paths for reading image sizes; backends
    /// receive the paths exactly as given in the arrival.
    pub fn new(
        config: GateConfig,
        store: Store,
        backends: GateBackends,
        link: Box<dyn BarrierLink>,
        clock: Arc<dyn Clock>,
        frame_root: impl Into<PathBuf>,
    ) -> Result<Self> {
        config.validate()?;
        let mut barrier = BarrierClient::new(link, Arc::clone(&clock));
        let barrier_events = Arc::new(Mutex::new(VecDeque::new()));
        let sink = Arc::clone(&barrier_events);
        barrier.on_event(move |e| sink.lock().expect("event queue").push_back(e));
        Ok(Self {
            config,
            store,
            backends,
            barrier,
            barrier_events,
            clock,
            frame_root: frame_root.into(),
            active: None,
            queue: VecDeque::new(),
            finished: Vec::new(),
            next_id: 1,
            auto_close_at: None,
            trace: Vec::new(),
        })
    }

    pub fn config(&self) -> &GateConfig {
        &self.config
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut Store {
        &mut self.store
    }

    pub fn into_store(self) -> Store {
        self.store
    }

    pub fn trace(&self) -> &[TraceLine] {
        &self.trace
    }

    pub fn barrier_transcript(&self) -> Transcript {
        self.barrier.transcript()
    }

    pub fn active(&self) -> Option<&GateSession> {
        self.active.as_ref()
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    /// Closed sessions in the order they closed.
    pub fn finished(&self) -> &[GateSession] {
        &self.finished
    }

    /// Earliest pending timer, if any.
    pub fn next_deadline(&self) -> Option<u64> {
        let expiry = self
            .active
            .as_ref()
            .and_then(|s| s.granted_at())
            .map(|t| t + self.config.session_timeout_ms);
        match (expiry, self.auto_close_at) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// A vehicle reached the gate. Runs immediately when the lane is idle,
    /// otherwise waits its turn.
    pub fn arrive(&mut self, arrival: Arrival) -> Result<()> {
        if arrival.frames.is_empty() {
            return Err(GateError::Config("arrival without frames".into()));
        }
        self.queue.push_back(arrival);
        self.pump()
    }

    /// Starts queued sessions while the lane is free.
    fn pump(&mut self) -> Result<()> {
        while self.active.is_none() {
            let Some(arrival) = self.queue.pop_front() else { break };
            self.run_session(arrival)?;
        }
        Ok(())
    }

    fn log_event(&mut self, kind: &str, pairs: &[(&str, &str)]) -> Result<()> {
        let fields: Fields = pairs.iter().map(|(k, v)| (k.to_string(), Value::from(*v))).collect();
        self.store.append_event(kind, fields)?;
        Ok(())
    }

    fn push_trace(&mut self, session: Option<u64>, from: String, to: String, detail: String) {
        self.trace.push(TraceLine {
            ts: self.clock.now_ms(),
            session,
            from,
            to,
            detail,
        });
    }

    fn transition(&mut self, s: &mut GateSession, to: SessionState, detail: String) {
        let from = s.state;
        s.state = to;
        s.history.push((self.clock.now_ms(), to));
        self.push_trace(Some(s.id), from.to_string(), to.to_string(), detail);
    }

    fn run_session(&mut self, arrival: Arrival) -> Result<()> {
        let id = self.next_id;
        self.next_id += 1;
        let mut s = GateSession {
            id,
            state: SessionState::Idle,
            arrival,
            plate: None,
            employee: None,
            slot: None,
            plate_attempts: 0,
            face_attempts: 0,
            history: vec![(self.clock.now_ms(), SessionState::Idle)],
        };
        let sid = id.to_string();
        let frame = s.arrival.frame(0).to_string();
        self.log_event("arrival", &[("session", &sid), ("frame", &frame)])?;
        self.transition(&mut s, SessionState::VehicleDetected, format!("frame={frame}"));

        // The arrival trigger already says a vehicle is present; the
        // detector's answer is recorded but does not gate the session.
        let vehicles = match self.backends.detector().detect(Op::DetectVehicle, &frame) {
            Ok(d) => format!("vehicles={}", d.len()),
            Err(e) => format!("vehicles=error:{}", backend_code(&e)),
        };
        self.transition(&mut s, SessionState::PlateCapture, vehicles);

        let record = loop {
            let attempt = s.plate_attempts;
            s.plate_attempts += 1;
            match self.plate_attempt(s.arrival.frame(attempt)) {
                Attempt::Ok((plate, record)) => {
                    s.plate = Some(plate.clone());
                    let d = format!("plate={plate} attempt={}", s.plate_attempts);
                    self.transition(&mut s, SessionState::PlateVerified, d);
                    break Some(record);
                }
                Attempt::Retry(why) => {
                    let d = format!("attempt={} {why}", s.plate_attempts);
                    if s.plate_attempts >= self.config.max_plate_attempts {
                        self.transition(&mut s, SessionState::Denied(DenyReason::PlateUnknown), d);
                        break None;
                    }
                    self.transition(&mut s, SessionState::PlateCapture, d);
                }
            }
        };
        let Some(record) = record else {
            return self.deny(s, DenyReason::PlateUnknown);
        };

        self.transition(&mut s, SessionState::FaceCapture, String::new());
        let identified = loop {
            let attempt = s.face_attempts;
            s.face_attempts += 1;
            match self.face_attempt(s.arrival.face_frame(attempt)) {
                Attempt::Ok((employee, distance)) => break Some((employee, distance)),
                Attempt::Retry(why) => {
                    let d = format!("attempt={} {why}", s.face_attempts);
                    if s.face_attempts >= self.config.max_face_attempts {
                        self.transition(&mut s, SessionState::Denied(DenyReason::DriverUnknown), d);
                        break None;
                    }
                    self.transition(&mut s, SessionState::FaceCapture, d);
                }
            }
        };
        let Some((employee, distance)) = identified else {
            return self.deny(s, DenyReason::DriverUnknown);
        };
        s.employee = Some(employee.clone());
        self.decide(s, &record, &employee, distance)
    }

    fn plate_attempt(&mut self, frame: &str) -> Attempt<(String, Fields)> {
        let detections = match self.backends.detector().detect(Op::DetectPlate, frame) {
            Ok(d) => d,
            Err(e) => return Attempt::Retry(format!("detect_plate={}", backend_code(&e))),
        };
        let Some(best) = detections.iter().max_by(|a, b| a.confidence.total_cmp(&b.confidence)) else {
            return Attempt::Retry("detect_plate=none".into());
        };
        let (w, h) = match read_pnm(self.frame_root.join(frame)) {
            Ok(img) => (img.width(), img.height()),
            Err(_) => return Attempt::Retry("frame=unreadable".into()),
        };
        let region = match crop_rect(w, h, &best.bbox, self.config.crop_margin) {
            Ok(r) => r.map(|v| v as u32),
            Err(_) => return Attempt::Retry("crop=empty".into()),
        };
        let text = match self.backends.ocr().ocr(frame, Some(region)) {
            Ok((text, _conf)) => text,
            Err(e) => return Attempt::Retry(format!("ocr={}", backend_code(&e))),
        };
        let plate = match read_plate(&text) {
            Ok(p) => p,
            Err(_) => return Attempt::Retry(format!("unreadable={}", text.replace(' ', "_"))),
        };
        match match_registry(&plate, &self.store) {
            RegistryMatch::Matched { plate, record } => Attempt::Ok((plate, record)),
            RegistryMatch::RetrySuggested(near) => {
                Attempt::Retry(format!("read={} retry_suggested={near}", plate.canonical()))
            }
            RegistryMatch::NoMatch => Attempt::Retry(format!("read={} not_registered", plate.canonical())),
        }
    }

    fn face_attempt(&mut self, frame: &str) -> Attempt<(String, f64)> {
        let values = match self.backends.face().face_embed(frame) {
            Ok(v) => v,
            Err(e) => return Attempt::Retry(format!("face_embed={}", backend_code(&e))),
        };
        let Ok(query) = Embedding::new(values, self.config.face_dim, Source::Capture) else {
            return Attempt::Retry("embedding=invalid".into());
        };
        let gallery = match Gallery::from_store(&self.store, self.config.face_dim) {
            Ok(g) => g,
            Err(e) => {
                log::error!("employee gallery unusable: {e}");
                return Attempt::Retry("gallery=invalid".into());
            }
        };
        match gallery.identify(&query, self.config.face_threshold) {
            Ok(Identity::Match { employee, distance }) => Attempt::Ok((employee, distance)),
            Ok(Identity::NoMatch { nearest: Some((_, d)) }) => Attempt::Retry(format!("no_match nearest={d:.4}")),
            Ok(Identity::NoMatch { nearest: None }) => Attempt::Retry("no_match gallery=empty".into()),
            Err(_) => Attempt::Retry("embedding=invalid".into()),
        }
    }

    fn decide(&mut self, mut s: GateSession, record: &Fields, employee: &str, distance: f64) -> Result<()> {
        let plate = s.plate.clone().expect("plate verified before decision");
        if self.config.binding_required {
            let bound = record
                .get("drivers")
                .and_then(Value::as_list)
                .is_some_and(|l| l.iter().any(|d| d == employee));
            if !bound {
                let d = format!("employee={employee}");
                self.transition(&mut s, SessionState::Denied(DenyReason::DriverNotBound), d);
                return self.deny(s, DenyReason::DriverNotBound);
            }
        }
        if let Some(held) = self.store.slot_of(&plate) {
            let d = format!("employee={employee} held={}", held.as_str());
            self.transition(&mut s, SessionState::Denied(DenyReason::AlreadyParked), d);
            return self.deny(s, DenyReason::AlreadyParked);
        }
        let slot = match self.store.allocate_slot(&plate) {
            Ok(id) => id.as_str().to_string(),
            Err(StoreError::LotFull) => {
                self.transition(
                    &mut s,
                    SessionState::Denied(DenyReason::LotFull),
                    format!("employee={employee}"),
                );
                return self.deny(s, DenyReason::LotFull);
            }
            Err(e) => return Err(e.into()),
        };
        s.slot = Some(slot.clone());
        let d = format!("employee={employee} distance={distance:.4} slot={slot}");
        self.transition(&mut s, SessionState::Granted, d);
        let sid = s.id.to_string();
        self.log_event(
            "grant",
            &[
                ("session", &sid),
                ("plate", &plate),
                ("employee", employee),
                ("slot", &slot),
            ],
        )?;
        self.auto_close_at = None;
        if let Err(e) = self.barrier.send(BarrierCommand::Open) {
            self.log_event("anomaly", &[("session", &sid), ("detail", &format!("barrier: {e}"))])?;
        }
        self.active = Some(s);
        Ok(())
    }

    /// Records the denial event and closes the session. The Denied
    /// transition itself is already in the trace.
    fn deny(&mut self, s: GateSession, reason: DenyReason) -> Result<()> {
        let sid = s.id.to_string();
        let mut pairs = vec![("session", sid.as_str()), ("reason", reason.as_str())];
        if let Some(p) = &s.plate {
            pairs.push(("plate", p));
        }
        if let Some(e) = &s.employee {
            pairs.push(("employee", e));
        }
        let owned: Vec<(String, String)> = pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let refs: Vec<(&str, &str)> = owned.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        self.log_event("deny", &refs)?;
        self.finished.push(s);
        Ok(())
    }

    /// Reads pending barrier events and fires due timers.
    pub fn poll(&mut self) -> Result<()> {
        if let Err(e) = self.barrier.poll_events(0) {
            log::warn!("barrier link: {e}");
        }
        let events: Vec<BarrierReply> = self.barrier_events.lock().expect("event queue").drain(..).collect();
        for e in events {
            if e == BarrierReply::EvtPassed {
                self.on_passed()?;
            }
        }
        let now = self.clock.now_ms();
        if self.auto_close_at.is_some_and(|t| now >= t) {
            self.auto_close_at = None;
            if let Err(e) = self.barrier.send(BarrierCommand::Close) {
                self.log_event("anomaly", &[("detail", &format!("barrier: {e}"))])?;
            }
        }
        let expired = self
            .active
            .as_ref()
            .and_then(|s| s.granted_at())
            .is_some_and(|t| now >= t + self.config.session_timeout_ms);
        if expired {
            self.on_timeout()?;
        }
        self.pump()
    }

    fn on_passed(&mut self) -> Result<()> {
        let Some(mut s) = self.active.take() else {
            self.push_trace(None, "Lane".into(), "Anomaly".into(), "pass_without_grant".into());
            return self.log_event("anomaly", &[("detail", "pass_without_grant")]);
        };
        let slot = s.slot.clone().unwrap_or_default();
        self.transition(&mut s, SessionState::Passed, format!("slot={slot}"));
        let sid = s.id.to_string();
        self.log_event("pass", &[("session", &sid), ("slot", &slot)])?;
        self.auto_close_at = Some(self.clock.now_ms() + self.config.barrier_auto_close_ms);
        self.finished.push(s);
        Ok(())
    }

    fn on_timeout(&mut self) -> Result<()> {
        let Some(mut s) = self.active.take() else { return Ok(()) };
        let slot = s.slot.take();
        if let Some(id) = &slot {
            self.store.release_slot(id)?;
        }
        let released = slot.clone().unwrap_or_default();
        self.transition(&mut s, SessionState::Expired, format!("released={released}"));
        let sid = s.id.to_string();
        self.log_event("expire", &[("session", &sid), ("slot", &released)])?;
        if let Err(e) = self.barrier.send(BarrierCommand::Close) {
            self.log_event("anomaly", &[("session", &sid), ("detail", &format!("barrier: {e}"))])?;
        }
        self.finished.push(s);
        Ok(())
    }

    /// A plate read at the exit lane. Frees the vehicle's slot.
    pub fn exit(&mut self, raw_plate: &str) -> Result<ExitOutcome> {
        let outcome = match read_plate(raw_plate) {
            Err(_) => ExitOutcome::Anomaly(format!("exit_unreadable={}", raw_plate.replace(' ', "_"))),
            Ok(p) => match self.store.slot_of(p.canonical()) {
                // Granted at the entrance but not through it yet, so this
                // read is a clone or a misread. The grant keeps its slot.
                Some(_) if self.active.as_ref().and_then(|s| s.plate.as_deref()) == Some(p.canonical()) => {
                    ExitOutcome::Anomaly(format!("exit_before_entry={}", p.canonical()))
                }
                Some(slot) => {
                    self.store.release_slot(slot.as_str())?;
                    ExitOutcome::Departed {
                        plate: p.canonical().to_string(),
                        slot: slot.as_str().to_string(),
                    }
                }
                None => ExitOutcome::Anomaly(format!("exit_without_entry={}", p.canonical())),
            },
        };
        match &outcome {
            ExitOutcome::Departed { plate, slot } => {
                self.push_trace(
                    None,
                    "Exit".into(),
                    "Departed".into(),
                    format!("plate={plate} slot={slot}"),
                );
                let (plate, slot) = (plate.clone(), slot.clone());
                self.log_event("departure", &[("plate", &plate), ("slot", &slot)])?;
            }
            ExitOutcome::Anomaly(detail) => {
                self.push_trace(None, "Exit".into(), "Anomaly".into(), detail.clone());
                let detail = detail.clone();
                self.log_event("anomaly", &[("detail", &detail)])?;
            }
        }
        Ok(outcome)
    }
}

/// Terminal outcomes per session as recorded in the event log: `grant`,
/// `deny:<reason>` and `expire`, in log order.
pub fn audit_outcomes(store: &Store) -> BTreeMap<u64, Vec<String>> {
    let mut out: BTreeMap<u64, Vec<String>> = BTreeMap::new();
    for (_, f) in store.list(Collection::Events) {
        let kind = f.get("kind").and_then(Value::as_str).unwrap_or_default();
        let Some(sid) = f.get("session").and_then(Value::as_str).and_then(|s| s.parse().ok()) else {
            continue;
        };
        let label = match kind {
            "grant" | "expire" => kind.to_string(),
            "deny" => format!("deny:{}", f.get("reason").and_then(Value::as_str).unwrap_or("?")),
            _ => continue,
        };
        out.entry(sid).or_default().push(label);
    }
    out
}

/// The same outcomes derived from the transition trace.
pub fn trace_outcomes(trace: &[TraceLine]) -> BTreeMap<u64, Vec<String>> {
    let mut out: BTreeMap<u64, Vec<String>> = BTreeMap::new();
    for l in trace {
        let Some(sid) = l.session else { continue };
        let label = if l.to == "Granted" {
            "grant".to_string()
        } else if l.to == "Expired" {
            "expire".to_string()
        } else if let Some(r) = l.to.strip_prefix("Denied(").and_then(|r| r.strip_suffix(')')) {
            format!("deny:{r}")
        } else {
            continue;
        };
        out.entry(sid).or_default().push(label);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScenarioEvent {
    Arrive(Arrival),
    Tick(u64),
    /// The pass-through sensor at the barrier fires.
    Pass,
    Exit(String),
}

/// Scenario text: `arrive <frame>[,<frame>...] [face <frame>[,<frame>...]]`,
/// `tick <ms>`, `pass`, `exit <plate>`. `#` starts a comment.
pub fn parse_scenario(text: &str) -> Result<Vec<ScenarioEvent>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |message: String| GateError::Scenario { line, message };
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let tok: Vec<&str> = content.split_whitespace().collect();
        let list = |s: &str| -> Vec<String> { s.split(',').filter(|f| !f.is_empty()).map(String::from).collect() };
        let ev = match tok.as_slice() {
            ["arrive", frames] => ScenarioEvent::Arrive(Arrival {
                frames: list(frames),
                face_frames: Vec::new(),
            }),
            ["arrive", frames, "face", faces] => ScenarioEvent::Arrive(Arrival {
                frames: list(frames),
                face_frames: list(faces),
            }),
            ["tick", ms] => ScenarioEvent::Tick(ms.parse().map_err(|_| err(format!("bad tick {ms:?}")))?),
            ["pass"] => ScenarioEvent::Pass,
            ["exit", plate] => ScenarioEvent::Exit(plate.to_string()),
            _ => return Err(err(format!("cannot parse {content:?}"))),
        };
        if let ScenarioEvent::Arrive(a) = &ev {
            if a.frames.is_empty() {
                return Err(err("arrive needs at least one frame".into()));
            }
        }
        out.push(ev);
    }
    Ok(out)
}

/// A controller wired to a simulated barrier on a simulated clock.
pub struct SimulatedGate {
    pub controller: GateController,
    pub clock: SimClock,
    pub barrier: Arc<Mutex<BarrierSim>>,
}

impl SimulatedGate {
    /// `store` should share `clock` so event timestamps follow the scenario.
    pub fn new(
        config: GateConfig,
        store: Store,
        backends: GateBackends,
        clock: SimClock,
        frame_root: &Path,
    ) -> Result<Self> {
        let barrier = Arc::new(Mutex::new(BarrierSim::default()));
        let shared: Arc<dyn Clock> = Arc::new(clock.clone());
        let link = SimLink::new(Arc::clone(&barrier), Arc::clone(&shared));
        let controller = GateController::new(config, store, backends, Box::new(link), shared, frame_root)?;
        Ok(Self {
            controller,
            clock,
            barrier,
        })
    }

    /// Advances the clock by `ms`, stopping at every timer on the way.
    pub fn tick(&mut self, ms: u64) -> Result<()> {
        let target = self.clock.now_ms() + ms;
        loop {
            self.controller.poll()?;
            match self.controller.next_deadline() {
                Some(d) if d > self.clock.now_ms() && d <= target => self.clock.set(d),
                _ => break,
            }
        }
        self.clock.set(target);
        self.controller.poll()
    }

    pub fn apply(&mut self, ev: &ScenarioEvent) -> Result<()> {
        match ev {
            ScenarioEvent::Arrive(a) => self.controller.arrive(a.clone()),
            ScenarioEvent::Tick(ms) => self.tick(*ms),
            ScenarioEvent::Pass => {
                let now = self.clock.now_ms();
                if !self.barrier.lock().expect("sim lock").vehicle_passes(now) {
                    self.controller
                        .push_trace(None, "Lane".into(), "Anomaly".into(), "pass_while_closed".into());
                }
                self.controller.poll()
            }
            ScenarioEvent::Exit(p) => self.controller.exit(p).map(|_| ()),
        }
    }

    pub fn run(&mut self, events: &[ScenarioEvent]) -> Result<()> {
        for ev in events {
            self.apply(ev)?;
        }
        self.controller.poll()
    }

    pub fn trace_text(&self) -> String {
        format_trace(self.controller.trace())
    }

    pub fn transcript_text(&self) -> String {
        format_transcript(&self.controller.barrier_transcript().lock().expect("transcript lock"))
    }
}

pub const SCENE_WIDTH: usize = 320;
pub const SCENE_HEIGHT: usize = 240;
const PLATE_SCALE: usize = 2;

/// Renders a gate camera frame for `plate` and writes `<stem>.pgm` plus the
/// detector sidecars the reference backend reads. With `face`, the driver
/// capture `<stem>.emb` is written too.
pub fn write_gate_scene(dir: &Path, stem: &str, plate: &str, face: Option<&[f64]>, seed: u64) -> Result<PathBuf> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..SCENE_WIDTH * SCENE_HEIGHT)
        .map(|_| rng.random_range(90..=110u8))
        .collect();
    let mut frame = Raster::gray(SCENE_WIDTH, SCENE_HEIGHT, data).expect("scene dims");
    // Body tones stay inside the band the plate reader treats as
    // background, so only the plate itself reads as plate pixels.
    let body = rng.random_range(60..=190u8);
    let (cx1, cy1) = (40 + rng.random_range(0..20usize), 30 + rng.random_range(0..15usize));
    let (cx2, cy2) = (SCENE_WIDTH - 40 - rng.random_range(0..20usize), SCENE_HEIGHT - 20);
    fill_rounded_rect(&mut frame, cx1, cy1, cx2, cy2, 24, Paint::Gray(body));
    fill_rect(&mut frame, cx1 + 30, cy1 + 20, cx2 - 30, cy1 + 70, Paint::Gray(70));

    let plate_img = render_plate(plate, PLATE_SCALE).map_err(|e| GateError::Config(e.to_string()))?;
    let (pw, ph) = (plate_img.width(), plate_img.height());
    let px = (cx1 + cx2) / 2 - pw / 2;
    let py = cy2 - ph - 20;
    for y in 0..ph {
        for x in 0..pw {
            frame.pixel_mut(px + x, py + y)[0] = plate_img.pixel(x, y)[0];
        }
    }

    let norm = |x1: usize, y1: usize, x2: usize, y2: usize| {
        let (w, h) = (SCENE_WIDTH as f64, SCENE_HEIGHT as f64);
        NormBBox::new(
            (x1 + x2) as f64 / 2.0 / w,
            (y1 + y2) as f64 / 2.0 / h,
            (x2 - x1) as f64 / w,
            (y2 - y1) as f64 / h,
        )
        .expect("box inside frame")
    };
    std::fs::create_dir_all(dir)?;
    let image = dir.join(format!("{stem}.pgm"));
    write_pnm(&image, &frame).map_err(|e| GateError::Config(e.to_string()))?;
    let vehicle = AnnotationRecord {
        class_id: 0,
        bbox: norm(cx1, cy1, cx2, cy2),
    };
    let plate_box = AnnotationRecord {
        class_id: 1,
        bbox: norm(px, py, px + pw, py + ph),
    };
    std::fs::write(
        dir.join(format!("{stem}.detect_vehicle.txt")),
        format_label_line(&vehicle) + "\n",
    )?;
    std::fs::write(
        dir.join(format!("{stem}.detect_plate.txt")),
        format_label_line(&plate_box) + "\n",
    )?;
    if let Some(v) = face {
        let text: String = v.iter().map(|x| format!("{x}\n")).collect();
        std::fs::write(dir.join(format!("{stem}.emb")), text)?;
    }
    Ok(image)
}

/// Seeded unit-free face vector with standard normal components.
pub fn synthetic_face(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// `v` plus seeded noise of relative size `eps`, as a second capture of the
/// same face would look.
pub fn perturbed_face(v: &[f64], eps: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt() / (v.len() as f64).sqrt();
    v.iter()
        .map(|x| x + eps * norm * rng.sample::<f64, _>(StandardNormal))
        .collect()
}
