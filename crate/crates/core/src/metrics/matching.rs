use super::{iou, GroundTruth, ScoredDetection};

/// Outcome for one prediction, in input order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredOutcome {
    /// Index into the truth list when the prediction is a true positive.
    pub truth: Option<usize>,
    pub iou: f64,
}

impl PredOutcome {
    pub fn is_tp(&self) -> bool {
        self.truth.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// One entry per prediction, same order as the input.
    pub outcomes: Vec<PredOutcome>,
    /// Whether each truth was claimed, same order as the input.
    pub truth_matched: Vec<bool>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Indices of `preds` by descending confidence; equal confidences keep
/// input order.
pub(crate) fn confidence_order(preds: &[ScoredDetection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence));
    order
}

/// Greedy matching for one image. Predictions are visited by descending
/// confidence; each claims the unclaimed same-class truth with the highest
/// IOU at or above `iou_threshold` (lowest index on ties).
pub fn match_detections(preds: &[ScoredDetection], truths: &[GroundTruth], iou_threshold: f64) -> MatchResult {
    let mut truth_matched = vec![false; truths.len()];
    let mut outcomes = vec![PredOutcome { truth: None, iou: 0.0 }; preds.len()];
    for pi in confidence_order(preds) {
        let p = &preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for (ti, t) in truths.iter().enumerate() {
            if truth_matched[ti] || t.class_id != p.class_id {
                continue;
            }
            let v = iou(&p.bbox, &t.bbox);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((ti, v));
            }
        }
        if let Some((ti, v)) = best {
            truth_matched[ti] = true;
            outcomes[pi] = PredOutcome {
                truth: Some(ti),
                iou: v,
            };
        }
    }
    let tp = outcomes.iter().filter(|o| o.is_tp()).count();
    MatchResult {
        fp: preds.len() - tp,
        fn_: truths.len() - tp,
        tp,
        outcomes,
        truth_matched,
    }
}
