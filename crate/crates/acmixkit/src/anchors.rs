//! Anchor-box clustering: K-means++ seeding and Lloyd iterations under
//! the 1-IoU distance on co-centered (width, height) pairs, plus the
//! assignment of the nine resulting anchors to the three head strides.

use crate::{Error, Result};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A box reduced to its dimensions, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WhBox {
    pub w: f32,
    pub h: f32,
}

impl WhBox {
    pub fn new(w: f32, h: f32) -> Result<Self> {
        if w <= 0.0 || h <= 0.0 || !w.is_finite() || !h.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "box dimensions must be positive and finite, got {w}x{h}"
            )));
        }
        Ok(WhBox { w, h })
    }

    pub fn area(&self) -> f32 {
        self.w * self.h
    }
}

/// Nine anchors sorted by area, grouped three per detection stride.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnchorSet {
    pub anchors: Vec<WhBox>,
    pub strides: [usize; 3],
}

impl AnchorSet {
    /// The three anchors bound to stride group `g` (0 = finest).
    pub fn group(&self, g: usize) -> &[WhBox] {
        &self.anchors[g * 3..(g + 1) * 3]
    }
}

/// IoU of two co-centered boxes given only their dimensions.
pub fn iou_wh(a: WhBox, b: WhBox) -> f32 {
    let inter = a.w.min(b.w) * a.h.min(b.h);
    inter / (a.area() + b.area() - inter)
}

fn dist(a: WhBox, b: WhBox) -> f32 {
    1.0 - iou_wh(a, b)
}

/// K-means++ seeding: first center uniform, each next drawn with
/// probability proportional to the squared distance to the nearest
/// already-chosen center. Degenerate all-zero distances fall back to a
/// uniform pick among the remaining boxes.
pub fn kmeanspp_init(boxes: &[WhBox], k: usize, seed: u64) -> Result<Vec<WhBox>> {
    if k == 0 || k > boxes.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must be in 1..={}",
            boxes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen_idx: Vec<usize> = vec![rng.gen_range(0..boxes.len())];
    while chosen_idx.len() < k {
        let weights: Vec<f32> = boxes
            .iter()
            .enumerate()
            .map(|(i, b)| {
                if chosen_idx.contains(&i) {
                    0.0
                } else {
                    let d = chosen_idx
                        .iter()
                        .map(|&c| dist(*b, boxes[c]))
                        .fold(f32::INFINITY, f32::min);
                    d * d
                }
            })
            .collect();
        let total: f32 = weights.iter().sum();
        let next = if total > 0.0 {
            let mut draw = rng.gen_range(0.0..total);
            let mut pick = 0;
            for (i, &w) in weights.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                if draw < w {
                    pick = i;
                    break;
                }
                draw -= w;
                pick = i;
            }
            pick
        } else {
            // every remaining box coincides with a chosen center
            let remaining: Vec<usize> =
                (0..boxes.len()).filter(|i| !chosen_idx.contains(i)).collect();
            remaining[rng.gen_range(0..remaining.len())]
        };
        chosen_idx.push(next);
    }
    Ok(chosen_idx.into_iter().map(|i| boxes[i]).collect())
}

/// Clustering outcome: centers, mean best-IoU over the boxes, and the
/// number of Lloyd iterations taken.
#[derive(Debug, Clone)]
pub struct ClusterResult {
    pub centers: Vec<WhBox>,
    pub mean_iou: f32,
    pub iterations: usize,
    /// Mean assignment distance measured after each assignment phase;
    /// non-increasing thanks to the guarded center update.
    pub distance_history: Vec<f32>,
}

fn median(values: &mut [f32]) -> f32 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// One guarded center-update step: each non-empty cluster moves to the
/// per-dimension median of its members only when that lowers the cluster
/// cost (the median is not an exact minimizer of 1-IoU, so an unguarded
/// move can regress); empty clusters reseed to the worst-covered box.
/// The guard makes the mean assignment distance non-increasing.
pub(crate) fn update_centers(boxes: &[WhBox], assignment: &[usize], centers: &mut [WhBox]) {
    for ci in 0..centers.len() {
        let mut ws: Vec<f32> = Vec::new();
        let mut hs: Vec<f32> = Vec::new();
        for (bi, b) in boxes.iter().enumerate() {
            if assignment[bi] == ci {
                ws.push(b.w);
                hs.push(b.h);
            }
        }
        if ws.is_empty() {
            // reseed an empty cluster to the currently worst-covered box
            let far = boxes
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| {
                    let da = centers.iter().map(|c| dist(**a, *c)).fold(f32::INFINITY, f32::min);
                    let db = centers.iter().map(|c| dist(**b, *c)).fold(f32::INFINITY, f32::min);
                    da.partial_cmp(&db).unwrap()
                })
                .map(|(i, _)| i)
                .unwrap();
            centers[ci] = boxes[far];
        } else {
            let candidate = WhBox {
                w: median(&mut ws),
                h: median(&mut hs),
            };
            let cost = |center: WhBox| -> f32 {
                boxes
                    .iter()
                    .zip(assignment)
                    .filter(|(_, &a)| a == ci)
                    .map(|(b, _)| dist(*b, center))
                    .sum()
            };
            if cost(candidate) <= cost(centers[ci]) {
                centers[ci] = candidate;
            }
        }
    }
}

/// Lloyd iterations with the 1-IoU distance and guarded per-dimension
/// median center updates; stops on stable assignments or after 300
/// iterations.
pub fn kmeans_cluster(boxes: &[WhBox], k: usize, seed: u64) -> Result<ClusterResult> {
    let mut centers = kmeanspp_init(boxes, k, seed)?;
    let mut assignment = vec![usize::MAX; boxes.len()];
    let max_iters = 300;
    let mut iterations = 0;
    let mut distance_history = Vec::new();
    for it in 1..=max_iters {
        iterations = it;
        let mut changed = false;
        for (bi, b) in boxes.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f32::INFINITY;
            for (ci, c) in centers.iter().enumerate() {
                let d = dist(*b, *c);
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            if assignment[bi] != best {
                assignment[bi] = best;
                changed = true;
            }
        }
        distance_history.push(mean_assignment_distance(boxes, &centers));
        if !changed {
            break;
        }
        update_centers(boxes, &assignment, &mut centers);
    }
    let mean_iou = boxes
        .iter()
        .map(|b| centers.iter().map(|c| iou_wh(*b, *c)).fold(0.0f32, f32::max))
        .sum::<f32>()
        / boxes.len() as f32;
    Ok(ClusterResult {
        centers,
        mean_iou,
        iterations,
        distance_history,
    })
}

/// Mean distance of every box to its nearest center; exposed so callers
/// can assert Lloyd monotonicity empirically.
pub fn mean_assignment_distance(boxes: &[WhBox], centers: &[WhBox]) -> f32 {
    boxes
        .iter()
        .map(|b| centers.iter().map(|c| dist(*b, *c)).fold(f32::INFINITY, f32::min))
        .sum::<f32>()
        / boxes.len() as f32
}

/// Sorts nine centers by area and binds consecutive triples to strides
/// 8, 16 and 32 (smallest boxes to the finest grid).
pub fn assign_anchors(centers: &[WhBox]) -> Result<AnchorSet> {
    if centers.len() != 9 {
        return Err(Error::InvalidArgument(format!(
            "anchor assignment needs exactly 9 centers, got {}",
            centers.len()
        )));
    }
    let mut idx: Vec<usize> = (0..9).collect();
    idx.sort_by(|&a, &b| {
        centers[a]
            .area()
            .partial_cmp(&centers[b].area())
            .unwrap()
            .then(a.cmp(&b))
    });
    Ok(AnchorSet {
        anchors: idx.into_iter().map(|i| centers[i]).collect(),
        strides: [8, 16, 32],
    })
}
