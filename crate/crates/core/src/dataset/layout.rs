use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{
    io_err, parse_label_file, ClassMap, DatasetError, DatasetItem, DatasetManifest, LabelError, Result, Split, Splits,
};

pub const CLASS_MAP_FILE: &str = "classes.txt";

/// Images and labels found under a dataset root, grouped by split (or a
/// single unsplit group for the flat layout).
#[derive(Debug, Clone, Default)]
pub struct ScannedDataset {
    pub root: PathBuf,
    pub class_map: ClassMap,
    pub groups: Vec<ScannedGroup>,
}

#[derive(Debug, Clone, Default)]
pub struct ScannedGroup {
    pub split: Option<Split>,
    pub images: BTreeMap<String, PathBuf>,
    pub labels: BTreeMap<String, PathBuf>,
}

fn list_stems(dir: &Path, want_label: bool) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        let is_txt = path.extension().is_some_and(|e| e == "txt");
        if is_txt != want_label {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

fn scan_group(dir: &Path, split: Option<Split>) -> Result<ScannedGroup> {
    Ok(ScannedGroup {
        split,
        images: list_stems(&dir.join("images"), false)?,
        labels: list_stems(&dir.join("labels"), true)?,
    })
}

/// Scan `root` in either the split or the flat layout.
pub fn scan_dataset(root: impl AsRef<Path>) -> Result<ScannedDataset> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(io_err(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found"),
        ));
    }
    let cm_path = root.join(CLASS_MAP_FILE);
    let class_map = if cm_path.is_file() {
        ClassMap::parse(&fs::read_to_string(&cm_path).map_err(|e| io_err(&cm_path, e))?)
    } else {
        ClassMap::default()
    };
    let split_dirs: Vec<Split> = Split::ALL
        .into_iter()
        .filter(|s| root.join(s.name()).is_dir())
        .collect();
    let groups = if split_dirs.is_empty() {
        vec![scan_group(root, None)?]
    } else {
        split_dirs
            .into_iter()
            .map(|s| scan_group(&root.join(s.name()), Some(s)))
            .collect::<Result<_>>()?
    };
    Ok(ScannedDataset {
        root: root.to_path_buf(),
        class_map,
        groups,
    })
}

impl ScannedDataset {
    /// Paired items in group order, stems sorted within each group.
    pub fn items(&self) -> Vec<DatasetItem> {
        self.groups
            .iter()
            .flat_map(|g| {
                g.images.iter().filter_map(|(stem, image)| {
                    g.labels.get(stem).map(|label| DatasetItem {
                        stem: stem.clone(),
                        image: image.clone(),
                        label: label.clone(),
                    })
                })
            })
            .collect()
    }

    /// Manifest with the on-disk split assignment. In the flat layout all
    /// items land in `train`.
    pub fn manifest(&self) -> DatasetManifest {
        let mut splits = Splits::default();
        for g in &self.groups {
            let target = splits.get_mut(g.split.unwrap_or(Split::Train));
            target.extend(g.images.keys().filter(|s| g.labels.contains_key(*s)).cloned());
        }
        DatasetManifest {
            items: self.items(),
            splits,
            class_map: self.class_map.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Finding {
    /// Label file with no image of the same stem.
    OrphanLabel(PathBuf),
    /// Image with no label file.
    MissingLabel(PathBuf),
    /// A label line that does not parse or is out of range.
    BadRecord {
        label: PathBuf,
        line: usize,
        error: LabelError,
    },
    UnknownClass {
        label: PathBuf,
        line: usize,
        class_id: u32,
    },
    Unreadable {
        path: PathBuf,
        message: String,
    },
}

impl std::fmt::Display for Finding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Finding::OrphanLabel(p) => write!(f, "orphan label {}", p.display()),
            Finding::MissingLabel(p) => write!(f, "missing label for {}", p.display()),
            Finding::BadRecord { label, line, error } => {
                write!(f, "bad record {}:{line}: {error}", label.display())
            }
            Finding::UnknownClass { label, line, class_id } => {
                write!(f, "unknown class {class_id} at {}:{line}", label.display())
            }
            Finding::Unreadable { path, message } => {
                write!(f, "unreadable {}: {message}", path.display())
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Check pairing, record syntax and class ids. Never fails; everything
/// found goes into the report.
pub fn validate_dataset(scan: &ScannedDataset) -> ValidationReport {
    let mut findings = Vec::new();
    for g in &scan.groups {
        for (stem, label) in &g.labels {
            if !g.images.contains_key(stem) {
                findings.push(Finding::OrphanLabel(label.clone()));
            }
        }
        for (stem, image) in &g.images {
            if !g.labels.contains_key(stem) {
                findings.push(Finding::MissingLabel(image.clone()));
            }
        }
        for label in g.labels.values() {
            let text = match fs::read_to_string(label) {
                Ok(t) => t,
                Err(e) => {
                    findings.push(Finding::Unreadable {
                        path: label.clone(),
                        message: e.to_string(),
                    });
                    continue;
                }
            };
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match super::parse_label_line(line) {
                    Ok(rec) if !scan.class_map.contains(rec.class_id) => findings.push(Finding::UnknownClass {
                        label: label.clone(),
                        line: i + 1,
                        class_id: rec.class_id,
                    }),
                    Ok(_) => {}
                    Err(error) => findings.push(Finding::BadRecord {
                        label: label.clone(),
                        line: i + 1,
                        error,
                    }),
                }
            }
        }
    }
    ValidationReport { findings }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitCounts {
    pub images: usize,
    pub records: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetStats {
    /// Records per class name; ids missing from the class map appear as `#<id>`.
    pub per_class: BTreeMap<String, usize>,
    pub per_split: BTreeMap<Split, SplitCounts>,
    pub total_records: usize,
}

/// Per-class and per-split record counts of a manifest's label files.
pub fn dataset_stats(manifest: &DatasetManifest) -> Result<DatasetStats> {
    let mut stats = DatasetStats::default();
    for name in &manifest.class_map.names {
        stats.per_class.insert(name.clone(), 0);
    }
    for split in Split::ALL {
        stats.per_split.insert(split, SplitCounts::default());
    }
    for item in &manifest.items {
        let text = fs::read_to_string(&item.label).map_err(|e| io_err(&item.label, e))?;
        let records = parse_label_file(&text).map_err(|(line, source)| DatasetError::Label {
            path: item.label.display().to_string(),
            line,
            source,
        })?;
        for rec in &records {
            let key = manifest
                .class_map
                .name(rec.class_id)
                .map(str::to_string)
                .unwrap_or_else(|| format!("#{}", rec.class_id));
            *stats.per_class.entry(key).or_default() += 1;
        }
        stats.total_records += records.len();
        if let Some(split) = manifest.splits.split_of(&item.stem) {
            let c = stats.per_split.entry(split).or_default();
            c.images += 1;
            c.records += records.len();
        }
    }
    Ok(stats)
}

/// Copy a manifest's items into `out/<split>/{images,labels}` and write the
/// class map.
pub fn materialize(manifest: &DatasetManifest, out: impl AsRef<Path>) -> Result<()> {
    let out = out.as_ref();
    for split in Split::ALL {
        for sub in ["images", "labels"] {
            let d = out.join(split.name()).join(sub);
            fs::create_dir_all(&d).map_err(|e| io_err(&d, e))?;
        }
        for stem in manifest.splits.get(split) {
            let item = manifest.item(stem).expect("manifest stems resolve");
            for (src, sub) in [(&item.image, "images"), (&item.label, "labels")] {
                let name = src.file_name().expect("file path");
                let dst = out.join(split.name()).join(sub).join(name);
                fs::copy(src, &dst).map_err(|e| io_err(&dst, e))?;
            }
        }
    }
    let cm = out.join(CLASS_MAP_FILE);
    let mut text = manifest.class_map.names.join("\n");
    text.push('\n');
    fs::write(&cm, text).map_err(|e| io_err(&cm, e))
}
