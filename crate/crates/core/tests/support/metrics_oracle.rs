//! Brute-force reference evaluator: explicit IOU matrix, exhaustive
//! re-matching per confidence threshold and an O(n^2) precision envelope.

use gatepark::metrics::{GroundTruth, PixelBox, Scene, ScoredDetection};
use rand::Rng;

pub fn ref_iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let ix1 = if a.x1 > b.x1 { a.x1 } else { b.x1 };
    let iy1 = if a.y1 > b.y1 { a.y1 } else { b.y1 };
    let ix2 = if a.x2 < b.x2 { a.x2 } else { b.x2 };
    let iy2 = if a.y2 < b.y2 { a.y2 } else { b.y2 };
    if ix2 <= ix1 || iy2 <= iy1 {
        return 0.0;
    }
    let inter = (ix2 - ix1) * (iy2 - iy1);
    let area_a = (a.x2 - a.x1) * (a.y2 - a.y1);
    let area_b = (b.x2 - b.x1) * (b.y2 - b.y1);
    inter / (area_a + area_b - inter)
}

/// TP flag and IOU for every prediction (global index order), using only
/// predictions with confidence >= `min_conf`.
fn ref_match(scenes: &[Scene], iou_thr: f64, min_conf: f64) -> Vec<Vec<Option<f64>>> {
    scenes
        .iter()
        .map(|s| {
            let m = s.truths.len();
            let matrix: Vec<Vec<f64>> = s
                .preds
                .iter()
                .map(|p| s.truths.iter().map(|t| ref_iou(&p.bbox, &t.bbox)).collect())
                .collect();
            let mut order: Vec<usize> = (0..s.preds.len())
                .filter(|&i| s.preds[i].confidence >= min_conf)
                .collect();
            // Stable insertion sort, descending confidence.
            for i in 1..order.len() {
                let mut j = i;
                while j > 0 && s.preds[order[j - 1]].confidence < s.preds[order[j]].confidence {
                    order.swap(j - 1, j);
                    j -= 1;
                }
            }
            let mut taken = vec![false; m];
            let mut out = vec![None; s.preds.len()];
            for &pi in &order {
                let mut best: Option<usize> = None;
                for ti in 0..m {
                    if taken[ti] || s.truths[ti].class_id != s.preds[pi].class_id {
                        continue;
                    }
                    if matrix[pi][ti] < iou_thr {
                        continue;
                    }
                    match best {
                        Some(b) if matrix[pi][b] >= matrix[pi][ti] => {}
                        _ => best = Some(ti),
                    }
                }
                if let Some(ti) = best {
                    taken[ti] = true;
                    out[pi] = Some(matrix[pi][ti]);
                }
            }
            out
        })
        .collect()
}

fn ref_ap(flags: &[bool], n: usize) -> f64 {
    if n == 0 {
        return if flags.is_empty() { 1.0 } else { 0.0 };
    }
    let k = flags.len();
    let mut prec = vec![0.0; k];
    let mut rec = vec![0.0; k];
    let mut tp = 0;
    for i in 0..k {
        if flags[i] {
            tp += 1;
        }
        prec[i] = tp as f64 / (i + 1) as f64;
        rec[i] = tp as f64 / n as f64;
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    #[allow(clippy::needless_range_loop)]
    for i in 0..k {
        let mut env = prec[i];
        for j in i..k {
            if prec[j] > env {
                env = prec[j];
            }
        }
        if rec[i] != prev {
            ap += (rec[i] - prev) * env;
            prev = rec[i];
        }
    }
    ap
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefReport {
    pub aps: Vec<(u32, f64)>,
    pub map: f64,
    pub precision: f64,
    pub recall: f64,
    pub mean_iou: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn ref_evaluate(scenes: &[Scene], iou_thr: f64) -> RefReport {
    let full = ref_match(scenes, iou_thr, f64::NEG_INFINITY);
    // (confidence, scene, pred) in global rank order.
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for (si, s) in scenes.iter().enumerate() {
        for (pi, p) in s.preds.iter().enumerate() {
            all.push((p.confidence, si, pi));
        }
    }
    for i in 1..all.len() {
        let mut j = i;
        while j > 0 && all[j - 1].0 < all[j].0 {
            all.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut classes: Vec<u32> = scenes
        .iter()
        .flat_map(|s| {
            s.truths
                .iter()
                .map(|t| t.class_id)
                .chain(s.preds.iter().map(|p| p.class_id))
        })
        .collect();
    classes.sort_unstable();
    classes.dedup();
    let total_truths: usize = scenes.iter().map(|s| s.truths.len()).sum();
    let aps: Vec<(u32, f64)> = classes
        .iter()
        .map(|&c| {
            let flags: Vec<bool> = all
                .iter()
                .filter(|(_, si, pi)| scenes[*si].preds[*pi].class_id == c)
                .map(|(_, si, pi)| full[*si][*pi].is_some())
                .collect();
            let n = scenes
                .iter()
                .flat_map(|s| &s.truths)
                .filter(|t| t.class_id == c)
                .count();
            (c, ref_ap(&flags, n))
        })
        .collect();
    let map = if aps.is_empty() {
        1.0
    } else {
        let mut s = 0.0;
        for (_, a) in &aps {
            s += a;
        }
        s / aps.len() as f64
    };

    let mut thresholds: Vec<f64> = all.iter().map(|a| a.0).collect();
    thresholds.dedup();
    let empty = if total_truths == 0 { 1.0 } else { 0.0 };
    let mut best = (f64::NEG_INFINITY, empty, empty, 0.0, 0, 0, total_truths);
    for &t in &thresholds {
        let m = ref_match(scenes, iou_thr, t);
        let mut tp = 0;
        let mut kept = 0;
        let mut ious = Vec::new();
        for (si, s) in scenes.iter().enumerate() {
            for (pi, p) in s.preds.iter().enumerate() {
                if p.confidence >= t {
                    kept += 1;
                    if let Some(v) = m[si][pi] {
                        tp += 1;
                        ious.push(v);
                    }
                }
            }
        }
        let fp = kept - tp;
        let p = if kept == 0 { 0.0 } else { tp as f64 / kept as f64 };
        let r = if total_truths == 0 {
            1.0
        } else {
            tp as f64 / total_truths as f64
        };
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        if f1 >= best.0 {
            let mean = if ious.is_empty() {
                0.0
            } else {
                ious.iter().sum::<f64>() / ious.len() as f64
            };
            best = (f1, p, r, mean, tp, fp, total_truths - tp);
        }
    }
    RefReport {
        aps,
        map,
        precision: best.1,
        recall: best.2,
        mean_iou: best.3,
        tp: best.4,
        fp: best.5,
        fn_: best.6,
    }
}

fn rand_box(rng: &mut impl Rng) -> PixelBox {
    let x = rng.random_range(0.0..40.0);
    let y = rng.random_range(0.0..40.0);
    let w = rng.random_range(2.0..15.0);
    let h = rng.random_range(2.0..15.0);
    PixelBox::new(x, y, x + w, y + h).unwrap()
}

/// Random scene with at most 6 truths, at most 6 predictions and up to 3
/// classes. Most predictions jitter a truth so matches actually happen;
/// confidences are drawn from a coarse grid now and then to create ties.
pub fn random_scene(rng: &mut impl Rng) -> Scene {
    let classes = rng.random_range(1..=3u32);
    let nt = rng.random_range(0..=6usize);
    let truths: Vec<GroundTruth> = (0..nt)
        .map(|_| GroundTruth {
            bbox: rand_box(rng),
            class_id: rng.random_range(0..classes),
        })
        .collect();
    let np = rng.random_range(0..=6usize);
    let preds = (0..np)
        .map(|_| {
            let (bbox, class_id) = if !truths.is_empty() && rng.random_bool(0.7) {
                let t = truths[rng.random_range(0..truths.len())];
                let j = |rng: &mut dyn rand::RngCore| rng.random_range(-2.0..2.0);
                let (dx1, dy1, dx2, dy2) = (j(rng), j(rng), j(rng), j(rng));
                let b = &t.bbox;
                let x1 = b.x1 + dx1;
                let y1 = b.y1 + dy1;
                let x2 = (b.x2 + dx2).max(x1 + 0.5);
                let y2 = (b.y2 + dy2).max(y1 + 0.5);
                let class = if rng.random_bool(0.9) {
                    t.class_id
                } else {
                    rng.random_range(0..classes)
                };
                (PixelBox::new(x1, y1, x2, y2).unwrap(), class)
            } else {
                (rand_box(rng), rng.random_range(0..classes))
            };
            let confidence = if rng.random_bool(0.2) {
                rng.random_range(0..5u32) as f64 / 4.0
            } else {
                rng.random_range(0.0..=1.0)
            };
            ScoredDetection::new(bbox, class_id, confidence).unwrap()
        })
        .collect();
    Scene { truths, preds }
}
