//! Flat `key = value` application configuration.
//!
//! One setting per line, `#` starts a comment line, keys are dotted. Every
//! key has a default, so an empty file is a valid configuration. Command
//! line overrides go through [`AppConfig::set`] with the same key names.
//! Relative paths are resolved against the directory of the file they
//! came from.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;

use thiserror::Error;

use crate::backend::{Backend, BackendError, InProcess, OracleDetector, ReferenceBackend, StreamEndpoint};
use crate::gate::{GateBackends, GateConfig};
use crate::occupancy::OccupancyParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown config key {key:?}{}", suggestion.as_ref().map(|s| format!(" (did you mean {s:?}?)")).unwrap_or_default())]
    UnknownKey { key: String, suggestion: Option<String> },
    #[error("bad value {value:?} for {key}: {message}")]
    Value {
        key: String,
        value: String,
        message: String,
    },
    #[error("{key}: path {path} does not exist")]
    MissingPath { key: String, path: PathBuf },
    #[error("{0}")]
    Invalid(String),
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

/// Where a backend role is served from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// The in-process reference backend configured by the `reference.*` keys.
    Reference,
    Tcp(String),
    /// A child process speaking the protocol on its standard streams.
    Exec(Vec<String>),
}

impl Endpoint {
    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if s == "reference" {
            return Ok(Endpoint::Reference);
        }
        if let Some(addr) = s.strip_prefix("tcp:") {
            if addr.rsplit_once(':').is_none_or(|(_, p)| p.parse::<u16>().is_err()) {
                return Err(format!("expected tcp:<host>:<port>, got {s:?}"));
            }
            return Ok(Endpoint::Tcp(addr.to_string()));
        }
        if let Some(cmd) = s.strip_prefix("exec:") {
            let argv: Vec<String> = cmd.split_whitespace().map(String::from).collect();
            if argv.is_empty() {
                return Err("exec: needs a command".into());
            }
            return Ok(Endpoint::Exec(argv));
        }
        Err(format!(
            "expected reference, tcp:<host>:<port> or exec:<command>, got {s:?}"
        ))
    }
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Endpoint::Reference => f.write_str("reference"),
            Endpoint::Tcp(a) => write!(f, "tcp:{a}"),
            Endpoint::Exec(argv) => write!(f, "exec:{}", argv.join(" ")),
        }
    }
}

/// The barrier controller is either the built-in simulator or a device
/// reachable over TCP.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BarrierEndpoint {
    Sim,
    Tcp(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppConfig {
    pub store_dir: PathBuf,
    pub frame_root: PathBuf,
    pub detector: Endpoint,
    pub ocr: Endpoint,
    pub face: Endpoint,
    pub backend_timeout_ms: u64,
    pub reference_root: PathBuf,
    pub reference_sigma: f64,
    pub reference_seed: u64,
    pub barrier: BarrierEndpoint,
    pub gate: GateConfig,
    pub occupancy: OccupancyParams,
    pub slot_map: Option<PathBuf>,
    pub listen_port: u16,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            store_dir: PathBuf::from("store"),
            frame_root: PathBuf::from("."),
            detector: Endpoint::Reference,
            ocr: Endpoint::Reference,
            face: Endpoint::Reference,
            backend_timeout_ms: crate::backend::DEFAULT_TIMEOUT_MS,
            reference_root: PathBuf::from("."),
            reference_sigma: 0.0,
            reference_seed: 0,
            barrier: BarrierEndpoint::Sim,
            gate: GateConfig::default(),
            occupancy: OccupancyParams::default(),
            slot_map: None,
            listen_port: 7070,
        }
    }
}

/// Every accepted key, in the order [`AppConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "store.dir",
    "frames.root",
    "backend.detector",
    "backend.ocr",
    "backend.face",
    "backend.timeout_ms",
    "reference.root",
    "reference.sigma",
    "reference.seed",
    "barrier",
    "gate.max_plate_attempts",
    "gate.max_face_attempts",
    "gate.session_timeout_ms",
    "gate.barrier_auto_close_ms",
    "gate.face_threshold",
    "gate.face_dim",
    "gate.binding_required",
    "gate.crop_margin",
    "occupancy.blur_kernel",
    "occupancy.blur_sigma",
    "occupancy.threshold_block",
    "occupancy.threshold_offset",
    "occupancy.median_kernel",
    "occupancy.dilate_kernel",
    "occupancy.fill_ratio_threshold",
    "lot.slot_map",
    "service.listen_port",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        message: format!("expected a {}", std::any::type_name::<T>()),
    })
}

fn real(key: &str, value: &str) -> Result<f64> {
    let v: f64 = num(key, value)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ConfigError::Value {
            key: key.into(),
            value: value.into(),
            message: "not finite".into(),
        })
    }
}

fn endpoint(key: &str, value: &str) -> Result<Endpoint> {
    Endpoint::parse(value).map_err(|message| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        message,
    })
}

impl AppConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| ConfigError::Parse { line: i + 1, message };
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected key = value".into()))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(err(format!("{key} set twice")));
            }
            cfg.set(key, value.trim()).map_err(|e| err(e.to_string()))?;
        }
        Ok(cfg)
    }

    /// Reads `path` and resolves its relative paths against the file's
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.store_dir, &mut self.frame_root, &mut self.reference_root] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(p) = self.slot_map.as_mut().filter(|p| p.is_relative()) {
            *p = base.join(&*p);
        }
    }

    /// Applies one `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| ConfigError::Value {
            key: pair.into(),
            value: String::new(),
            message: "expected key=value".into(),
        })?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let g = &mut self.gate;
        let o = &mut self.occupancy;
        match key {
            "store.dir" => self.store_dir = value.into(),
            "frames.root" => self.frame_root = value.into(),
            "backend.detector" => self.detector = endpoint(key, value)?,
            "backend.ocr" => self.ocr = endpoint(key, value)?,
            "backend.face" => self.face = endpoint(key, value)?,
            "backend.timeout_ms" => self.backend_timeout_ms = num(key, value)?,
            "reference.root" => self.reference_root = value.into(),
            "reference.sigma" => self.reference_sigma = real(key, value)?,
            "reference.seed" => self.reference_seed = num(key, value)?,
            "barrier" => {
                self.barrier = match value.strip_prefix("tcp:") {
                    _ if value == "sim" => BarrierEndpoint::Sim,
                    Some(addr) if !addr.is_empty() => BarrierEndpoint::Tcp(addr.into()),
                    _ => {
                        return Err(ConfigError::Value {
                            key: key.into(),
                            value: value.into(),
                            message: "expected sim or tcp:<host>:<port>".into(),
                        })
                    }
                }
            }
            "gate.max_plate_attempts" => g.max_plate_attempts = num(key, value)?,
            "gate.max_face_attempts" => g.max_face_attempts = num(key, value)?,
            "gate.session_timeout_ms" => g.session_timeout_ms = num(key, value)?,
            "gate.barrier_auto_close_ms" => g.barrier_auto_close_ms = num(key, value)?,
            "gate.face_threshold" => g.face_threshold = real(key, value)?,
            "gate.face_dim" => g.face_dim = num(key, value)?,
            "gate.binding_required" => g.binding_required = num(key, value)?,
            "gate.crop_margin" => g.crop_margin = real(key, value)?,
            "occupancy.blur_kernel" => o.blur_kernel = num(key, value)?,
            "occupancy.blur_sigma" => o.blur_sigma = real(key, value)?,
            "occupancy.threshold_block" => o.threshold_block = num(key, value)?,
            "occupancy.threshold_offset" => o.threshold_offset = num(key, value)?,
            "occupancy.median_kernel" => o.median_kernel = num(key, value)?,
            "occupancy.dilate_kernel" => o.dilate_kernel = num(key, value)?,
            "occupancy.fill_ratio_threshold" => o.fill_ratio_threshold = real(key, value)?,
            "lot.slot_map" => self.slot_map = (!value.is_empty()).then(|| value.into()),
            "service.listen_port" => self.listen_port = num(key, value)?,
            _ => {
                let suggestion = KEYS
                    .iter()
                    .map(|k| (strsim::levenshtein(k, key), *k))
                    .filter(|(d, _)| *d <= 3)
                    .min()
                    .map(|(_, k)| k.to_string());
                return Err(ConfigError::UnknownKey {
                    key: key.into(),
                    suggestion,
                });
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let g = &self.gate;
        let o = &self.occupancy;
        let path = |p: &Path| p.display().to_string();
        Some(match key {
            "store.dir" => path(&self.store_dir),
            "frames.root" => path(&self.frame_root),
            "backend.detector" => self.detector.to_string(),
            "backend.ocr" => self.ocr.to_string(),
            "backend.face" => self.face.to_string(),
            "backend.timeout_ms" => self.backend_timeout_ms.to_string(),
            "reference.root" => path(&self.reference_root),
            "reference.sigma" => self.reference_sigma.to_string(),
            "reference.seed" => self.reference_seed.to_string(),
            "barrier" => match &self.barrier {
                BarrierEndpoint::Sim => "sim".into(),
                BarrierEndpoint::Tcp(a) => format!("tcp:{a}"),
            },
            "gate.max_plate_attempts" => g.max_plate_attempts.to_string(),
            "gate.max_face_attempts" => g.max_face_attempts.to_string(),
            "gate.session_timeout_ms" => g.session_timeout_ms.to_string(),
            "gate.barrier_auto_close_ms" => g.barrier_auto_close_ms.to_string(),
            "gate.face_threshold" => g.face_threshold.to_string(),
            "gate.face_dim" => g.face_dim.to_string(),
            "gate.binding_required" => g.binding_required.to_string(),
            "gate.crop_margin" => g.crop_margin.to_string(),
            "occupancy.blur_kernel" => o.blur_kernel.to_string(),
            "occupancy.blur_sigma" => o.blur_sigma.to_string(),
            "occupancy.threshold_block" => o.threshold_block.to_string(),
            "occupancy.threshold_offset" => o.threshold_offset.to_string(),
            "occupancy.median_kernel" => o.median_kernel.to_string(),
            "occupancy.dilate_kernel" => o.dilate_kernel.to_string(),
            "occupancy.fill_ratio_threshold" => o.fill_ratio_threshold.to_string(),
            "lot.slot_map" => self.slot_map.as_deref().map(path).unwrap_or_default(),
            "service.listen_port" => self.listen_port.to_string(),
            _ => return None,
        })
    }

    /// Every key with its current value; parses back to the same config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("listed key"));
        }
        out
    }

    fn uses_reference(&self) -> bool {
        [&self.detector, &self.ocr, &self.face].contains(&&Endpoint::Reference)
    }

    /// Startup checks: parameter ranges, referenced paths and the port.
    pub fn validate(&self) -> Result<()> {
        self.gate.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.occupancy
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.backend_timeout_ms == 0 {
            return Err(ConfigError::Invalid("backend.timeout_ms must be positive".into()));
        }
        if self.reference_sigma < 0.0 {
            return Err(ConfigError::Invalid("reference.sigma must be non-negative".into()));
        }
        if self.listen_port == 0 {
            return Err(ConfigError::Invalid("service.listen_port must be in 1..=65535".into()));
        }
        let mut paths = vec![("store.dir", &self.store_dir), ("frames.root", &self.frame_root)];
        if self.uses_reference() {
            paths.push(("reference.root", &self.reference_root));
        }
        if let Some(p) = &self.slot_map {
            paths.push(("lot.slot_map", p));
        }
        for (key, p) in paths {
            if !p.exists() {
                return Err(ConfigError::MissingPath {
                    key: key.into(),
                    path: p.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn reference_backend(&self) -> ReferenceBackend {
        let mut r = ReferenceBackend::new(&self.reference_root);
        r.detector = OracleDetector {
            sigma: self.reference_sigma,
            seed: self.reference_seed,
        };
        r.embed_dim = self.gate.face_dim;
        r
    }

    pub fn connect(&self, ep: &Endpoint) -> Result<Box<dyn Backend>> {
        Ok(match ep {
            Endpoint::Reference => Box::new(InProcess::new(self.reference_backend())),
            Endpoint::Tcp(addr) => Box::new(StreamEndpoint::connect(addr.as_str(), self.backend_timeout_ms)?),
            Endpoint::Exec(argv) => {
                let mut cmd = Command::new(&argv[0]);
                cmd.args(&argv[1..]);
                Box::new(StreamEndpoint::spawn(&mut cmd, self.backend_timeout_ms)?)
            }
        })
    }

    /// One connection per role, even when two roles name the same endpoint,
    /// so a slow engine cannot hold up another role's request.
    pub fn backends(&self) -> Result<GateBackends> {
        Ok(GateBackends::split(
            self.connect(&self.detector)?,
            self.connect(&self.ocr)?,
            self.connect(&self.face)?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_defaults() {
        assert_eq!(AppConfig::parse("# nothing\n\n").unwrap(), AppConfig::default());
    }

    #[test]
    fn text_round_trips() {
        let mut c = AppConfig::default();
        c.set("backend.ocr", "tcp:127.0.0.1:9000").unwrap();
        c.set("backend.face", "exec:python3 -m shim --stub").unwrap();
        c.set("gate.binding_required", "true").unwrap();
        c.set("occupancy.threshold_offset", "-4").unwrap();
        c.set("lot.slot_map", "lot.slots").unwrap();
        c.set("barrier", "tcp:localhost:7000").unwrap();
        assert_eq!(AppConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_key_suggests_neighbour() {
        match AppConfig::default().set("gate.max_plate_atempts", "2") {
            Err(ConfigError::UnknownKey {
                suggestion: Some(s), ..
            }) => assert_eq!(s, "gate.max_plate_attempts"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parse_errors_name_the_line() {
        match AppConfig::parse("store.dir = a\nservice.listen_port = 70000\n") {
            Err(ConfigError::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            AppConfig::parse("store.dir = a\nstore.dir = b\n"),
            Err(ConfigError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            AppConfig::parse("just words\n"),
            Err(ConfigError::Parse { line: 1, .. })
        ));
        assert!(AppConfig::parse("backend.ocr = carrier-pigeon\n").is_err());
    }

    #[test]
    fn validation_checks_paths_and_port() {
        let dir = std::env::temp_dir();
        let mut c = AppConfig::default();
        c.resolve_paths(&dir);
        c.store_dir = dir.clone();
        c.validate().unwrap();
        c.listen_port = 0;
        assert!(matches!(c.validate(), Err(ConfigError::Invalid(_))));
        c.listen_port = 1;
        c.slot_map = Some(dir.join("definitely-not-here.slots"));
        assert!(matches!(c.validate(), Err(ConfigError::MissingPath { .. })));
    }
}
