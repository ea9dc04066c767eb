//! File-backed document store for vehicles, employees, events and slots.
//!
//! Every mutation is appended to `journal.jsonl` (one JSON entry per line,
//! see [`JournalEntry`]) and flushed before the call returns. `compact`
//! writes the whole state to `snapshot.json` and starts an empty journal.
//! Opening a store loads the snapshot, then replays journal entries newer
//! than it.
//!
//! Snapshot format: `{"seq":N,"docs":{"<collection>":{"<id>":{fields}}}}`.

mod journal;

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::warn;
use thiserror::Error;

use crate::clock::Clock;

pub use journal::{replay, Collection, DocId, Fields, JournalEntry, JournalOp, Replay, StoreState, Value};

pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";

pub const SLOT_FREE: &str = "free";
pub const SLOT_ASSIGNED: &str = "assigned";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown collection {0:?}")]
    UnknownCollection(String),
    #[error("{collection} document {id} lacks required field {field:?}")]
    MissingField {
        collection: Collection,
        id: String,
        field: &'static str,
    },
    #[error("invalid field {field:?}: {message}")]
    InvalidField { field: String, message: String },
    #[error("no {collection} document {id}")]
    NotFound { collection: Collection, id: String },
    #[error("lot full: no free slot")]
    LotFull,
    #[error("slot {0} is not assigned")]
    SlotNotAssigned(String),
    #[error("journal line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("journal sequence {seq} does not follow {prev}")]
    OutOfOrder { seq: u64, prev: u64 },
    #[error("bad snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, StoreError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompactStats {
    pub journal_bytes_before: u64,
    pub journal_bytes_after: u64,
}

struct Backing {
    dir: PathBuf,
    journal: File,
}

pub struct Store {
    state: StoreState,
    backing: Option<Backing>,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store")
            .field("dir", &self.backing.as_ref().map(|b| &b.dir))
            .field("seq", &self.state.seq)
            .finish()
    }
}

fn validate(c: Collection, id: &str, fields: &Fields) -> Result<()> {
    if id.is_empty() {
        return Err(StoreError::InvalidField {
            field: "id".into(),
            message: "empty document id".into(),
        });
    }
    for field in c.required() {
        if !fields.contains_key(*field) {
            return Err(StoreError::MissingField {
                collection: c,
                id: id.to_string(),
                field,
            });
        }
    }
    if c == Collection::Slots {
        match fields["status"].as_str() {
            Some(SLOT_FREE | SLOT_ASSIGNED) => {}
            other => {
                return Err(StoreError::InvalidField {
                    field: "status".into(),
                    message: format!("expected free or assigned, got {other:?}"),
                })
            }
        }
    }
    if let Some((k, _)) = fields
        .iter()
        .find(|(_, v)| matches!(v, Value::Num(n) if !n.is_finite()))
    {
        return Err(StoreError::InvalidField {
            field: k.clone(),
            message: "non-finite number".into(),
        });
    }
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

impl Store {
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self {
            state: StoreState::default(),
            backing: None,
            clock,
        }
    }

    /// Opens (or creates) the store in `dir`, recovering from the snapshot
    /// and journal. A torn final journal line is cut off.
    pub fn open(dir: impl AsRef<Path>, clock: Arc<dyn Clock>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let snap_path = dir.join(SNAPSHOT_FILE);
        let base = if snap_path.exists() {
            serde_json::from_str(&fs::read_to_string(&snap_path)?).map_err(|e| StoreError::Snapshot(e.to_string()))?
        } else {
            StoreState::default()
        };
        let journal_path = dir.join(JOURNAL_FILE);
        let text = if journal_path.exists() {
            fs::read_to_string(&journal_path)?
        } else {
            String::new()
        };
        let r = replay(base, &text)?;
        let journal = OpenOptions::new().create(true).append(true).open(&journal_path)?;
        if r.truncated_tail {
            warn!(
                "{}: dropped torn tail after byte {}",
                journal_path.display(),
                r.valid_len
            );
            journal.set_len(r.valid_len as u64)?;
        }
        Ok(Self {
            state: r.state,
            backing: Some(Backing { dir, journal }),
            clock,
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.backing.as_ref().map(|b| b.dir.as_path())
    }

    pub fn state(&self) -> &StoreState {
        &self.state
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn get(&self, c: Collection, id: &str) -> Option<&Fields> {
        self.state.get(c, &DocId::from(id))
    }

    /// Documents of `c` in id order.
    pub fn list(&self, c: Collection) -> Vec<(&DocId, &Fields)> {
        self.state.collection(c).collect()
    }

    /// Documents of `c` whose `field` equals `value`, in id order.
    pub fn query(&self, c: Collection, field: &str, value: &Value) -> Vec<(&DocId, &Fields)> {
        self.state
            .collection(c)
            .filter(|(_, f)| f.get(field) == Some(value))
            .collect()
    }

    fn commit(&mut self, op: JournalOp, c: Collection, id: &str, fields: Option<Fields>) -> Result<u64> {
        let entry = JournalEntry {
            seq: self.state.seq + 1,
            ts: self.clock.now_ms(),
            op,
            collection: c,
            id: id.into(),
            fields,
        };
        if let Some(b) = &mut self.backing {
            b.journal.write_all(entry.to_line().as_bytes())?;
            b.journal.flush()?;
        }
        self.state.apply(&entry)?;
        Ok(entry.seq)
    }

    /// Upserts a document; the journal line is written before returning.
    /// Returns the entry's sequence number.
    pub fn put(&mut self, c: Collection, id: &str, fields: Fields) -> Result<u64> {
        validate(c, id, &fields)?;
        self.commit(JournalOp::Put, c, id, Some(fields))
    }

    /// Removes a document. Returns false (and journals nothing) if absent.
    pub fn delete(&mut self, c: Collection, id: &str) -> Result<bool> {
        if self.get(c, id).is_none() {
            return Ok(false);
        }
        self.commit(JournalOp::Delete, c, id, None)?;
        Ok(true)
    }

    /// Appends an event document. Its id is the journal sequence number.
    pub fn append_event(&mut self, kind: &str, mut fields: Fields) -> Result<DocId> {
        fields.insert("kind".into(), kind.into());
        fields.insert("ts".into(), Value::Num(self.clock.now_ms() as f64));
        let id = (self.state.seq + 1).to_string();
        self.put(Collection::Events, &id, fields)?;
        Ok(DocId(id))
    }

    /// Ensures slots `1..=count` exist; existing slots are left as they are.
    pub fn init_slots(&mut self, count: usize) -> Result<()> {
        for i in 1..=count {
            let id = i.to_string();
            if self.get(Collection::Slots, &id).is_none() {
                self.put(
                    Collection::Slots,
                    &id,
                    Fields::from([("status".into(), SLOT_FREE.into())]),
                )?;
            }
        }
        Ok(())
    }

    /// Marks the lowest-id free slot assigned to `holder`.
    pub fn allocate_slot(&mut self, holder: &str) -> Result<DocId> {
        let id = self
            .state
            .collection(Collection::Slots)
            .find(|(_, f)| f.get("status").and_then(Value::as_str) == Some(SLOT_FREE))
            .map(|(id, _)| id.clone())
            .ok_or(StoreError::LotFull)?;
        let mut fields = self.state.get(Collection::Slots, &id).cloned().unwrap_or_default();
        fields.insert("status".into(), SLOT_ASSIGNED.into());
        fields.insert("holder".into(), holder.into());
        self.put(Collection::Slots, id.as_str(), fields)?;
        Ok(id)
    }

    pub fn release_slot(&mut self, id: &str) -> Result<()> {
        let mut fields = self
            .get(Collection::Slots, id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound {
                collection: Collection::Slots,
                id: id.to_string(),
            })?;
        if fields.get("status").and_then(Value::as_str) != Some(SLOT_ASSIGNED) {
            return Err(StoreError::SlotNotAssigned(id.to_string()));
        }
        fields.insert("status".into(), SLOT_FREE.into());
        fields.remove("holder");
        self.put(Collection::Slots, id, fields)?;
        Ok(())
    }

    /// `(free, assigned)` slot counts.
    pub fn slot_counts(&self) -> (usize, usize) {
        self.state.collection(Collection::Slots).fold((0, 0), |(f, a), (_, d)| {
            match d.get("status").and_then(Value::as_str) {
                Some(SLOT_FREE) => (f + 1, a),
                _ => (f, a + 1),
            }
        })
    }

    /// The slot currently held by `holder`, if any.
    pub fn slot_of(&self, holder: &str) -> Option<DocId> {
        self.state
            .collection(Collection::Slots)
            .find(|(_, f)| f.get("holder").and_then(Value::as_str) == Some(holder))
            .map(|(id, _)| id.clone())
    }

    /// Writes the full state as a snapshot and starts an empty journal.
    /// A crash between the two steps is harmless: replay skips journal
    /// entries the snapshot already covers.
    pub fn compact(&mut self) -> Result<CompactStats> {
        let Some(b) = &mut self.backing else {
            return Ok(CompactStats {
                journal_bytes_before: 0,
                journal_bytes_after: 0,
            });
        };
        let journal_path = b.dir.join(JOURNAL_FILE);
        let before = fs::metadata(&journal_path)?.len();
        let snap = serde_json::to_vec(&self.state).map_err(|e| StoreError::Snapshot(e.to_string()))?;
        write_atomic(&b.dir.join(SNAPSHOT_FILE), &snap)?;
        write_atomic(&journal_path, b"")?;
        b.journal = OpenOptions::new().append(true).open(&journal_path)?;
        Ok(CompactStats {
            journal_bytes_before: before,
            journal_bytes_after: 0,
        })
    }
}
