//! Driver verification by cosine distance between face embeddings.
//!
//! Employees carry one or more enrolled embeddings in the store, as fields
//! `embedding.1`, `embedding.2`, ... each holding the values as decimal
//! strings. Identification takes the minimum distance over an employee's
//! enrollments.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, RwLock};

use thiserror::Error;

use crate::store::{Collection, DocId, Store, StoreError, Value};

pub const DEFAULT_DIM: usize = 128;
pub const DEFAULT_THRESHOLD: f64 = 0.4;
const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum FaceError {
    #[error("embedding has {got} values, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("embedding has zero norm")]
    ZeroVector,
    #[error("embedding value {0:?} is not a finite number")]
    BadValue(String),
    #[error("no employee {0}")]
    UnknownEmployee(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FaceError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Enrollment,
    Capture,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
    sq_norm: f64,
    pub source: Source,
}

impl Embedding {
    pub fn new(values: Vec<f64>, dim: usize, source: Source) -> Result<Self> {
        if values.len() != dim {
            return Err(FaceError::Dimension {
                expected: dim,
                got: values.len(),
            });
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(FaceError::BadValue(v.to_string()));
        }
        let sq_norm = values.iter().map(|v| v * v).sum::<f64>();
        if sq_norm == 0.0 {
            return Err(FaceError::ZeroVector);
        }
        Ok(Self {
            values,
            sq_norm,
            source,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Parses an embedding file body: one real per line, blank lines ignored.
pub fn parse_embedding_text(text: &str, dim: usize, source: Source) -> Result<Embedding> {
    let values = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| FaceError::BadValue(l.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    Embedding::new(values, dim, source)
}

pub fn load_embedding(path: impl AsRef<Path>, dim: usize, source: Source) -> Result<Embedding> {
    parse_embedding_text(&std::fs::read_to_string(path)?, dim, source)
}

/// `1 - cos(a, b)`, clamped to `[0, 2]` against rounding.
pub fn cosine_distance(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(FaceError::Dimension {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    // One square root over the product keeps identical vectors at exactly 0.
    Ok((1.0 - dot / (a.sq_norm * b.sq_norm).sqrt()).clamp(0.0, 2.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyDecision {
    pub distance: f64,
    pub verified: bool,
    pub threshold: f64,
}

pub fn verify(query: &Embedding, enrolled: &Embedding, threshold: f64) -> Result<VerifyDecision> {
    let distance = cosine_distance(query, enrolled)?;
    Ok(VerifyDecision {
        distance,
        verified: distance <= threshold,
        threshold,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Identity {
    Match {
        employee: String,
        distance: f64,
    },
    /// Nearest employee, if any, was farther than the threshold.
    NoMatch {
        nearest: Option<(String, f64)>,
    },
}

/// Immutable set of enrolled embeddings keyed by employee id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gallery {
    members: BTreeMap<DocId, Vec<Embedding>>,
}

fn enrollment_key(n: usize) -> String {
    format!("embedding.{n}")
}

impl Gallery {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, employee: &str, e: Embedding) {
        self.members.entry(DocId::from(employee)).or_default().push(e);
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Builds the gallery from every employee's stored enrollments.
    pub fn from_store(store: &Store, dim: usize) -> Result<Self> {
        let mut g = Gallery::new();
        for (id, fields) in store.list(Collection::Employees) {
            for (key, v) in fields.range(enrollment_key(0)..) {
                if !key.starts_with("embedding.") {
                    break;
                }
                let Some(list) = v.as_list() else { continue };
                let values = list
                    .iter()
                    .map(|s| s.parse::<f64>().map_err(|_| FaceError::BadValue(s.clone())))
                    .collect::<Result<Vec<_>>>()?;
                g.add(id.as_str(), Embedding::new(values, dim, Source::Enrollment)?);
            }
        }
        Ok(g)
    }

    /// Nearest employee by minimum distance over their enrollments. Ties
    /// within 1e-12 go to the lower employee id.
    pub fn identify(&self, query: &Embedding, threshold: f64) -> Result<Identity> {
        let mut best: Option<(&DocId, f64)> = None;
        for (id, list) in &self.members {
            let mut d_min = f64::INFINITY;
            for e in list {
                d_min = d_min.min(cosine_distance(query, e)?);
            }
            if best.is_none_or(|(_, b)| d_min < b - TIE_EPS) {
                best = Some((id, d_min));
            }
        }
        Ok(match best {
            Some((id, d)) if d <= threshold => Identity::Match {
                employee: id.0.clone(),
                distance: d,
            },
            other => Identity::NoMatch {
                nearest: other.map(|(id, d)| (id.0.clone(), d)),
            },
        })
    }
}

/// Appends `e` to an existing employee's enrollments. Returns the number
/// of enrollments the employee now has.
pub fn enroll(store: &mut Store, employee: &str, e: &Embedding) -> Result<usize> {
    let mut fields = store
        .get(Collection::Employees, employee)
        .cloned()
        .ok_or_else(|| FaceError::UnknownEmployee(employee.to_string()))?;
    let n = (1..)
        .find(|n| !fields.contains_key(&enrollment_key(*n)))
        .expect("unbounded");
    fields.insert(
        enrollment_key(n),
        Value::List(e.values().iter().map(|v| v.to_string()).collect()),
    );
    store.put(Collection::Employees, employee, fields)?;
    Ok(n)
}

/// Shared handle whose gallery can be swapped while readers hold the
/// previous snapshot.
#[derive(Debug, Default)]
pub struct GalleryHandle {
    current: RwLock<Arc<Gallery>>,
}

impl GalleryHandle {
    pub fn new(g: Gallery) -> Self {
        Self {
            current: RwLock::new(Arc::new(g)),
        }
    }

    pub fn snapshot(&self) -> Arc<Gallery> {
        Arc::clone(&self.current.read().unwrap_or_else(|e| e.into_inner()))
    }

    pub fn replace(&self, g: Gallery) {
        *self.current.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(g);
    }
}
