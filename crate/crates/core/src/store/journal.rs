use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{Result, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Collection {
    Vehicles,
    Employees,
    Events,
    Slots,
}

impl Collection {
    pub const ALL: [Collection; 4] = [
        Collection::Vehicles,
        Collection::Employees,
        Collection::Events,
        Collection::Slots,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Collection::Vehicles => "vehicles",
            Collection::Employees => "employees",
            Collection::Events => "events",
            Collection::Slots => "slots",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Collection::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| StoreError::UnknownCollection(s.to_string()))
    }

    /// Fields every document of the collection must carry.
    pub fn required(self) -> &'static [&'static str] {
        match self {
            Collection::Vehicles => &["plate", "class"],
            Collection::Employees => &["name"],
            Collection::Events => &["kind"],
            Collection::Slots => &["status"],
        }
    }
}

impl fmt::Display for Collection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Str(String),
    Num(f64),
    List(Vec<String>),
}

impl Value {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_num(&self) -> Option<f64> {
        match self {
            Value::Num(n) => Some(*n),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[String]> {
        match self {
            Value::List(l) => Some(l),
            _ => None,
        }
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Str(s.to_string())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::Str(s)
    }
}

impl From<f64> for Value {
    fn from(n: f64) -> Self {
        Value::Num(n)
    }
}

impl From<Vec<String>> for Value {
    fn from(l: Vec<String>) -> Self {
        Value::List(l)
    }
}

pub type Fields = BTreeMap<String, Value>;

/// Document id, ordered so that digit runs compare by numeric value:
/// `"2" < "10"`, `"A9" < "A10"`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DocId(pub String);

impl DocId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<&str> for DocId {
    fn from(s: &str) -> Self {
        DocId(s.to_string())
    }
}

impl fmt::Display for DocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn natural_cmp(a: &str, b: &str) -> Ordering {
    let (mut a, mut b) = (a.as_bytes(), b.as_bytes());
    loop {
        match (a.first(), b.first()) {
            (None, None) => return Ordering::Equal,
            (None, Some(_)) => return Ordering::Less,
            (Some(_), None) => return Ordering::Greater,
            (Some(x), Some(y)) if x.is_ascii_digit() && y.is_ascii_digit() => {
                let da = a.iter().take_while(|c| c.is_ascii_digit()).count();
                let db = b.iter().take_while(|c| c.is_ascii_digit()).count();
                let (na, nb) = (&a[..da], &b[..db]);
                let strip = |s: &'_ [u8]| -> usize { s.iter().take_while(|c| **c == b'0').count() };
                let (ta, tb) = (&na[strip(na)..], &nb[strip(nb)..]);
                let ord = ta
                    .len()
                    .cmp(&tb.len())
                    .then_with(|| ta.cmp(tb))
                    // Equal values: fewer leading zeros first, so distinct
                    // strings never compare equal.
                    .then_with(|| da.cmp(&db));
                if ord != Ordering::Equal {
                    return ord;
                }
                a = &a[da..];
                b = &b[db..];
            }
            (Some(x), Some(y)) => {
                if x != y {
                    return x.cmp(y);
                }
                a = &a[1..];
                b = &b[1..];
            }
        }
    }
}

impl Ord for DocId {
    fn cmp(&self, other: &Self) -> Ordering {
        natural_cmp(&self.0, &other.0)
    }
}

impl PartialOrd for DocId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JournalOp {
    Put,
    Delete,
}

/// One journal line.
///
/// ```text
/// {"seq":3,"ts":1200,"op":"put","collection":"slots","id":"2","fields":{"status":"assigned"}}
/// {"seq":4,"ts":1300,"op":"delete","collection":"vehicles","id":"LEA123"}
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub seq: u64,
    pub ts: u64,
    pub op: JournalOp,
    pub collection: Collection,
    pub id: DocId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fields: Option<Fields>,
}

impl JournalEntry {
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("journal entries serialize");
        s.push('\n');
        s
    }
}

/// Every document, by collection and id, plus the sequence number of the
/// last applied entry.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreState {
    pub seq: u64,
    pub docs: BTreeMap<Collection, BTreeMap<DocId, Fields>>,
}

impl StoreState {
    pub fn get(&self, c: Collection, id: &DocId) -> Option<&Fields> {
        self.docs.get(&c)?.get(id)
    }

    pub fn collection(&self, c: Collection) -> impl Iterator<Item = (&DocId, &Fields)> {
        self.docs.get(&c).into_iter().flatten()
    }

    pub fn apply(&mut self, e: &JournalEntry) -> Result<()> {
        if e.seq <= self.seq {
            return Err(StoreError::OutOfOrder {
                seq: e.seq,
                prev: self.seq,
            });
        }
        match e.op {
            JournalOp::Put => {
                let fields = e.fields.clone().ok_or_else(|| StoreError::Corrupt {
                    line: 0,
                    message: "put without fields".into(),
                })?;
                self.docs.entry(e.collection).or_default().insert(e.id.clone(), fields);
            }
            JournalOp::Delete => {
                if let Some(c) = self.docs.get_mut(&e.collection) {
                    c.remove(&e.id);
                    if c.is_empty() {
                        self.docs.remove(&e.collection);
                    }
                }
            }
        }
        self.seq = e.seq;
        Ok(())
    }
}

/// Outcome of reading a journal.
#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub state: StoreState,
    /// Entries applied on top of the base state.
    pub applied: usize,
    /// Entries skipped because the base snapshot already covers them.
    pub skipped: usize,
    /// Byte length of the well-formed prefix of the journal.
    pub valid_len: usize,
    pub truncated_tail: bool,
}

/// Folds journal lines onto `base` in order. Entries at or below the base
/// sequence number are skipped (they predate the snapshot). An unparsable
/// final line without a newline is a torn write: it is dropped with a
/// warning. Anything else malformed, or a sequence number that does not
/// increase, is an error.
pub fn replay(base: StoreState, journal: &str) -> Result<Replay> {
    let mut state = base;
    let floor = state.seq;
    let (mut applied, mut skipped, mut offset) = (0, 0, 0);
    let mut truncated_tail = false;
    let mut last_seq = 0;
    for (n, raw) in journal.split_inclusive('\n').enumerate() {
        let complete = raw.ends_with('\n');
        let line = raw.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            offset += raw.len();
            continue;
        }
        let entry: JournalEntry = match serde_json::from_str(line) {
            Ok(e) => e,
            Err(_) if !complete => {
                warn!("discarding truncated journal tail at line {}", n + 1);
                truncated_tail = true;
                break;
            }
            Err(e) => {
                return Err(StoreError::Corrupt {
                    line: n + 1,
                    message: e.to_string(),
                })
            }
        };
        if entry.seq <= last_seq {
            return Err(StoreError::OutOfOrder {
                seq: entry.seq,
                prev: last_seq,
            });
        }
        if entry.seq <= floor {
            skipped += 1;
        } else {
            state.apply(&entry)?;
            applied += 1;
        }
        last_seq = entry.seq;
        offset += raw.len();
    }
    Ok(Replay {
        state,
        applied,
        skipped,
        valid_len: offset,
        truncated_tail,
    })
}
