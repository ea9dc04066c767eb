//! YOLO-format detection datasets: label lines, class maps, directory
//! scanning, validation, seeded train/val/test splits and statistics.
//!
//! Layout on disk is either flat (`images/`, `labels/`) or split
//! (`train/images`, `train/labels`, `val/...`, `test/...`), with the class
//! map in `classes.txt` (one name per line, id = line index). An image and
//! its label share a file stem; labels use the `.txt` extension.

mod label;
mod layout;
mod split;

pub use label::{format_label_line, parse_label_file, parse_label_line, AnnotationRecord, LabelError, NormBBox};
pub use layout::{
    dataset_stats, materialize, scan_dataset, validate_dataset, DatasetStats, Finding, ScannedDataset, SplitCounts,
    ValidationReport,
};
pub use split::{split_dataset, SplitRatios, Splits};

use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}:{line}: {source}")]
    Label {
        path: String,
        line: usize,
        source: LabelError,
    },
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    Ratios([f64; 3]),
    #[error("cannot split an empty item list")]
    Empty,
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|sp| sp.name() == s)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Class id to name mapping; the id is the position in `names`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassMap {
    pub names: Vec<String>,
}

impl ClassMap {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Self {
        Self {
            names: names.into_iter().map(Into::into).collect(),
        }
    }

    /// One name per line; blank lines are skipped.
    pub fn parse(text: &str) -> Self {
        Self::new(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, id: u32) -> bool {
        (id as usize) < self.names.len()
    }
}

/// An image/label pair sharing `stem`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetItem {
    pub stem: String,
    pub image: PathBuf,
    pub label: PathBuf,
}

/// Paired items, their split assignment and the class map.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub items: Vec<DatasetItem>,
    pub splits: Splits,
    pub class_map: ClassMap,
}

impl DatasetManifest {
    /// Shuffle and partition `items` with [`split_dataset`].
    pub fn split(items: Vec<DatasetItem>, class_map: ClassMap, ratios: SplitRatios, seed: u64) -> Result<Self> {
        let splits = split_dataset(&items, ratios, seed)?;
        Ok(Self {
            items,
            splits,
            class_map,
        })
    }

    pub fn item(&self, stem: &str) -> Option<&DatasetItem> {
        self.items.iter().find(|i| i.stem == stem)
    }

    /// Text form: one `<split>\t<stem>` line per item, in split order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for split in Split::ALL {
            for stem in self.splits.get(split) {
                out.push_str(&format!("{split}\t{stem}\n"));
            }
        }
        out
    }

    /// Inverse of [`DatasetManifest::to_text`] against an item list.
    pub fn from_text(text: &str, items: Vec<DatasetItem>, class_map: ClassMap) -> Result<Self> {
        let mut splits = Splits::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| DatasetError::Manifest { line: i + 1, message };
            let (split, stem) = line
                .split_once('\t')
                .ok_or_else(|| err("expected <split>\\t<stem>".into()))?;
            let split = Split::parse(split).ok_or_else(|| err(format!("unknown split {split:?}")))?;
            if !items.iter().any(|it| it.stem == stem) {
                return Err(err(format!("unknown item {stem:?}")));
            }
            splits.get_mut(split).push(stem.to_string());
        }
        Ok(Self {
            items,
            splits,
            class_map,
        })
    }
}
