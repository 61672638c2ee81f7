//! Detection evaluation: box IoU, greedy confidence-ordered matching,
//! precision/recall, AP as the area under the monotone precision-recall
//! envelope, mAP (single threshold and the 0.50:0.05:0.95 sweep),
//! confusion matrix with a background row/column, and a wall-clock FPS
//! harness.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Axis-aligned box in pixel corner coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Result<Self> {
        if !(x2 > x1 && y2 > y1) {
            return Err(Error::InvalidArgument(format!(
                "degenerate box ({x1},{y1},{x2},{y2})"
            )));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn area(&self) -> f32 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: usize,
    pub class_id: usize,
    pub bbox: BBox,
    pub confidence: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: usize,
    pub class_id: usize,
    pub bbox: BBox,
}

/// Per-class true/false positive and false negative tallies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PRPoint {
    pub precision: f64,
    pub recall: f64,
    pub confidence: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_ap: HashMap<usize, f32>,
    pub map50: f32,
    pub map50_95: f32,
    /// (classes+1)^2 row-major; rows = true class, columns = predicted,
    /// last index = background.
    pub confusion: Vec<Vec<usize>>,
    pub fps: Option<f32>,
}

/// Intersection-over-union of two corner boxes.
pub fn iou_xyxy(a: &BBox, b: &BBox) -> f32 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Greedy confidence-ordered matching, one GT per detection. Returns the
/// per-class counts and a per-detection TP flag aligned with the input
/// order. Greedy decisions for higher-confidence detections never depend
/// on lower-confidence ones, so prefixes of the flag vector are valid
/// matchings of the corresponding confidence cut.
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_threshold: f32,
    num_classes: usize,
) -> (Vec<MatchCounts>, Vec<bool>) {
    let mut counts = vec![MatchCounts::default(); num_classes];
    let mut flags = vec![false; dets.len()];
    let mut gt_used = vec![false; gts.len()];

    // group by (image, class); stable confidence-descending order with
    // index tiebreak keeps results deterministic
    let mut det_order: Vec<usize> = (0..dets.len()).collect();
    det_order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .unwrap()
            .then(a.cmp(&b))
    });

    for &di in &det_order {
        let d = &dets[di];
        if d.class_id >= num_classes {
            continue;
        }
        let mut best_gt: Option<(usize, f32)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if gt_used[gi] || g.image_id != d.image_id || g.class_id != d.class_id {
                continue;
            }
            let v = iou_xyxy(&d.bbox, &g.bbox);
            if v >= iou_threshold && best_gt.map_or(true, |(_, bv)| v > bv) {
                best_gt = Some((gi, v));
            }
        }
        match best_gt {
            Some((gi, _)) => {
                gt_used[gi] = true;
                flags[di] = true;
                counts[d.class_id].tp += 1;
            }
            None => counts[d.class_id].fp += 1,
        }
    }
    for (gi, g) in gts.iter().enumerate() {
        if !gt_used[gi] && g.class_id < num_classes {
            counts[g.class_id].fn_ += 1;
        }
    }
    (counts, flags)
}

/// TP/(TP+FP); the empty case returns 1.0 (curve-start convention).
pub fn precision(c: &MatchCounts) -> f32 {
    if c.tp + c.fp == 0 {
        1.0
    } else {
        c.tp as f32 / (c.tp + c.fp) as f32
    }
}

/// TP/(TP+FN); zero ground truth yields 0.0.
pub fn recall(c: &MatchCounts) -> f32 {
    if c.tp + c.fn_ == 0 {
        0.0
    } else {
        c.tp as f32 / (c.tp + c.fn_) as f32
    }
}

/// PR points from confidence-ordered TP flags for one class.
/// `flags` must already be sorted by descending confidence.
pub fn pr_points(flags: &[(f32, bool)], n_gt: usize) -> Vec<PRPoint> {
    let mut out = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (rank, &(conf, is_tp)) in flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        out.push(PRPoint {
            precision: tp as f64 / (rank + 1) as f64,
            recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
            confidence: conf,
        });
    }
    out
}

/// All-point interpolation: the precision envelope is made monotone
/// non-increasing in recall (anchored at recall 0, precision 1) and the
/// exact area of the resulting step function is returned.
pub fn average_precision(points: &[PRPoint]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let n = points.len();
    let mut env = vec![0.0f64; n];
    let mut running = 0.0f64;
    for i in (0..n).rev() {
        running = running.max(points[i].precision);
        env[i] = running;
    }
    let mut ap = 0.0f64;
    let mut prev_recall = 0.0f64;
    for (i, pt) in points.iter().enumerate() {
        ap += (pt.recall - prev_recall) * env[i];
        prev_recall = pt.recall;
    }
    ap
}

/// Arithmetic mean of the per-class APs; classes without ground truth
/// are excluded upstream.
pub fn mean_ap(per_class_ap: &HashMap<usize, f32>) -> Result<f32> {
    if per_class_ap.is_empty() {
        return Err(Error::InvalidArgument("no evaluable class".into()));
    }
    Ok(per_class_ap.values().sum::<f32>() / per_class_ap.len() as f32)
}

/// Per-class confidence-ordered flags for one IoU threshold.
fn class_flags(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_threshold: f32,
    num_classes: usize,
) -> Vec<(Vec<(f32, bool)>, usize)> {
    let (_, flags) = match_detections(dets, gts, iou_threshold, num_classes);
    let mut per_class: Vec<Vec<(f32, bool, usize)>> = vec![Vec::new(); num_classes];
    for (di, d) in dets.iter().enumerate() {
        if d.class_id < num_classes {
            per_class[d.class_id].push((d.confidence, flags[di], di));
        }
    }
    per_class
        .into_iter()
        .enumerate()
        .map(|(c, mut v)| {
            v.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.2.cmp(&b.2)));
            let n_gt = gts.iter().filter(|g| g.class_id == c).count();
            (v.into_iter().map(|(conf, f, _)| (conf, f)).collect(), n_gt)
        })
        .collect()
}

/// Per-class AP at one IoU threshold; classes with zero GT are omitted.
pub fn per_class_ap(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_threshold: f32,
    num_classes: usize,
) -> HashMap<usize, f32> {
    class_flags(dets, gts, iou_threshold, num_classes)
        .into_iter()
        .enumerate()
        .filter(|(_, (_, n_gt))| *n_gt > 0)
        .map(|(c, (flags, n_gt))| (c, average_precision(&pr_points(&flags, n_gt)) as f32))
        .collect()
}

/// Mean AP averaged over the ten IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn map_sweep(dets: &[Detection], gts: &[GroundTruth], num_classes: usize) -> Result<f32> {
    let mut total = 0.0f64;
    for step in 0..10 {
        let thr = 0.5 + 0.05 * step as f32;
        let ap = per_class_ap(dets, gts, thr, num_classes);
        total += mean_ap(&ap)? as f64;
    }
    Ok((total / 10.0) as f32)
}

/// Unnormalized confusion matrix, `(classes+1)` square. Matching is by
/// IoU only, class agreement is recorded rather than required; the last
/// row/column is background (unmatched detections / ground truths).
pub fn confusion_matrix(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_threshold: f32,
    num_classes: usize,
) -> Vec<Vec<usize>> {
    let bg = num_classes;
    let mut m = vec![vec![0usize; num_classes + 1]; num_classes + 1];
    let mut gt_used = vec![false; gts.len()];
    let mut det_matched = vec![false; dets.len()];

    let mut det_order: Vec<usize> = (0..dets.len()).collect();
    det_order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .unwrap()
            .then(a.cmp(&b))
    });
    for &di in &det_order {
        let d = &dets[di];
        let mut best = None;
        for (gi, g) in gts.iter().enumerate() {
            if gt_used[gi] || g.image_id != d.image_id {
                continue;
            }
            let v = iou_xyxy(&d.bbox, &g.bbox);
            if v >= iou_threshold && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            gt_used[gi] = true;
            det_matched[di] = true;
            m[gts[gi].class_id.min(bg)][d.class_id.min(bg)] += 1;
        }
    }
    for (di, d) in dets.iter().enumerate() {
        if !det_matched[di] {
            m[bg][d.class_id.min(bg)] += 1;
        }
    }
    for (gi, g) in gts.iter().enumerate() {
        if !gt_used[gi] {
            m[g.class_id.min(bg)][bg] += 1;
        }
    }
    m
}

/// Row-normalized view of a confusion matrix.
pub fn normalize_confusion(m: &[Vec<usize>]) -> Vec<Vec<f32>> {
    m.iter()
        .map(|row| {
            let s: usize = row.iter().sum();
            row.iter()
                .map(|&v| if s == 0 { 0.0 } else { v as f32 / s as f32 })
                .collect()
        })
        .collect()
}

/// Full evaluation at iou 0.5 plus the 0.50:0.95 sweep.
pub fn evaluate(dets: &[Detection], gts: &[GroundTruth], num_classes: usize) -> Result<EvalReport> {
    let ap50 = per_class_ap(dets, gts, 0.5, num_classes);
    let map50 = mean_ap(&ap50)?;
    let map50_95 = map_sweep(dets, gts, num_classes)?;
    let confusion = confusion_matrix(dets, gts, 0.5, num_classes);
    Ok(EvalReport {
        per_class_ap: ap50,
        map50,
        map50_95,
        confusion,
        fps: None,
    })
}

/// Per-class PR curve (confidence, precision, recall) for CSV emission.
pub fn pr_curves(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_threshold: f32,
    num_classes: usize,
) -> Vec<Vec<PRPoint>> {
    class_flags(dets, gts, iou_threshold, num_classes)
        .into_iter()
        .map(|(flags, n_gt)| pr_points(&flags, n_gt))
        .collect()
}

/// Times repeated invocations of `pass` after a discarded warmup and
/// returns (frames per second, coefficient of variation). The slowest
/// 20% of iterations are discarded before the statistics: on shared or
/// single-core machines the scheduler regularly preempts an iteration
/// mid-flight, and those multi-x spikes say nothing about the workload
/// itself.
pub fn fps_benchmark(mut pass: impl FnMut(), warmup: usize, iters: usize) -> Result<(f32, f32)> {
    if iters < 10 {
        return Err(Error::InvalidArgument("fps benchmark needs iters >= 10".into()));
    }
    for _ in 0..warmup {
        pass();
    }
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        pass();
        times.push(t0.elapsed().as_secs_f64());
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times.truncate(iters - iters / 5);
    let kept = times.len();
    let total: f64 = times.iter().sum();
    let mean = total / kept as f64;
    if mean < 1e-6 {
        return Err(Error::InvalidArgument(
            "timer resolution insufficient: iteration under 1 microsecond".into(),
        ));
    }
    let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / kept as f64;
    let cv = var.sqrt() / mean;
    Ok(((1.0 / mean) as f32, cv as f32))
}
