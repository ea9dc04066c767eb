use std::collections::BTreeMap;
use std::path::Path;

use super::{GroundTruth, MetricsError, PixelBox, Scene, ScoredDetection};
use crate::dataset::{parse_label_file, scan_dataset, DatasetError, NormBBox};

/// One line of a predictions file:
/// `image_id class_id confidence cx cy w h` (box normalized).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionLine {
    pub image_id: String,
    pub class_id: u32,
    pub confidence: f64,
    pub bbox: NormBBox,
}

pub fn parse_predictions(text: &str) -> Result<Vec<PredictionLine>, MetricsError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| MetricsError::PredLine { line: i + 1, message };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", f.len())));
        }
        let class_id = f[1]
            .parse::<u32>()
            .map_err(|_| err(format!("bad class id {:?}", f[1])))?;
        let mut nums = [0.0f64; 5];
        for (n, s) in nums.iter_mut().zip(&f[2..]) {
            *n = s
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("bad number {s:?}")))?;
        }
        if !(0.0..=1.0).contains(&nums[0]) {
            return Err(err(format!("confidence {} outside [0, 1]", nums[0])));
        }
        let bbox = NormBBox::new(nums[1], nums[2], nums[3], nums[4]).map_err(|e| err(e.to_string()))?;
        out.push(PredictionLine {
            image_id: f[0].to_string(),
            class_id,
            confidence: nums[0],
            bbox,
        });
    }
    Ok(out)
}

/// Normalized boxes are compared directly (unit image); IOU is invariant
/// to per-axis scaling so this matches pixel-space evaluation.
fn unit_box(b: &NormBBox) -> Result<PixelBox, MetricsError> {
    PixelBox::from_norm(b, 1.0, 1.0)
}

/// Pair the label files under `truth_root` with predictions, one scene per
/// label file, sorted by image id. Predictions for an unknown image id are
/// an error.
pub fn load_scenes(
    truth_root: impl AsRef<Path>,
    preds: &[PredictionLine],
) -> Result<Vec<(String, Scene)>, MetricsError> {
    let scan = scan_dataset(truth_root)?;
    let mut scenes: BTreeMap<String, Scene> = BTreeMap::new();
    for g in &scan.groups {
        for (stem, path) in &g.labels {
            let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
                path: path.display().to_string(),
                source,
            })?;
            let records = parse_label_file(&text).map_err(|(line, source)| DatasetError::Label {
                path: path.display().to_string(),
                line,
                source,
            })?;
            let truths = records
                .iter()
                .map(|r| {
                    Ok(GroundTruth {
                        bbox: unit_box(&r.bbox)?,
                        class_id: r.class_id,
                    })
                })
                .collect::<Result<_, MetricsError>>()?;
            scenes.insert(
                stem.clone(),
                Scene {
                    truths,
                    preds: Vec::new(),
                },
            );
        }
    }
    for (i, p) in preds.iter().enumerate() {
        let scene = scenes.get_mut(&p.image_id).ok_or_else(|| MetricsError::PredLine {
            line: i + 1,
            message: format!("unknown image id {:?}", p.image_id),
        })?;
        scene
            .preds
            .push(ScoredDetection::new(unit_box(&p.bbox)?, p.class_id, p.confidence)?);
    }
    Ok(scenes.into_iter().collect())
}
