//! Data association: IoU similarities, gated minimum-cost assignment, and the
//! two-stage confidence-partitioned matching between predicted tracks and
//! detections.
//!
//! Boxes are center-format slices: `[x, y, w, h]` (2D) or `[x, y, z, w, h, l]`
//! (3D, axis-aligned).

use crate::error::{Error, Result};

/// One detector output box with score, class and optional embedding.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Detection {
    pub frame: usize,
    pub class_id: i32,
    pub score: f64,
    /// Center-format box, length 4 (2D) or 6 (3D).
    pub bbox: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        if self.bbox.len() != 4 && self.bbox.len() != 6 {
            return Err(Error::Config(format!("detection box length {}", self.bbox.len())));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Config(format!("detection score {} outside [0,1]", self.score)));
        }
        let sizes = crate::kf::size_indices(self.bbox.len());
        if self.bbox[sizes].iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("detection size components must be > 0".into()));
        }
        Ok(())
    }
}

/// 2D intersection-over-union for center-format boxes.
pub fn iou_2d(a: &[f64], b: &[f64]) -> f64 {
    debug_assert!(a.len() >= 4 && b.len() >= 4);
    let overlap = |ca: f64, sa: f64, cb: f64, sb: f64| -> f64 {
        let lo = (ca - sa / 2.0).max(cb - sb / 2.0);
        let hi = (ca + sa / 2.0).min(cb + sb / 2.0);
        (hi - lo).max(0.0)
    };
    let ix = overlap(a[0], a[2], b[0], b[2]);
    let iy = overlap(a[1], a[3], b[1], b[3]);
    let inter = ix * iy;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Axis-aligned volumetric IoU for center-format 3D boxes
/// `[x, y, z, w, h, l]`, where `l` extends along x (forward), `w` along y
/// (lateral) and `h` along z (up).
pub fn iou_3d(a: &[f64], b: &[f64]) -> f64 {
    debug_assert!(a.len() >= 6 && b.len() >= 6);
    let overlap = |ca: f64, sa: f64, cb: f64, sb: f64| -> f64 {
        let lo = (ca - sa / 2.0).max(cb - sb / 2.0);
        let hi = (ca + sa / 2.0).min(cb + sb / 2.0);
        (hi - lo).max(0.0)
    };
    let ix = overlap(a[0], a[5], b[0], b[5]);
    let iy = overlap(a[1], a[3], b[1], b[3]);
    let iz = overlap(a[2], a[4], b[2], b[4]);
    let inter = ix * iy * iz;
    let union = a[3] * a[4] * a[5] + b[3] * b[4] * b[5] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Dimension-dispatching IoU (length 4 -> 2D, length 6 -> 3D).
pub fn iou(a: &[f64], b: &[f64]) -> f64 {
    if a.len() == 6 {
        iou_3d(a, b)
    } else {
        iou_2d(a, b)
    }
}

/// Dense track-by-detection cost matrix with entries in [0, 1].
#[derive(Debug, Clone)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let c = f(i, j);
                if !c.is_finite() {
                    return Err(Error::Numeric(format!("non-finite cost at ({i},{j})")));
                }
                data.push(c);
            }
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

/// Matching outcome; every input index lands in exactly one field.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AssociationResult {
    /// `(track_idx, det_idx)` pairs, sorted by track index.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

/// Cost used for gated-out and padding cells inside the square solve. Large
/// enough to dominate any sum of real costs, small enough that real-cost
/// differences survive f64 addition against it.
const GATE_COST: f64 = 1e6;

/// Exact minimum-cost perfect matching on a square matrix
/// (shortest-augmenting-path Hungarian, O(n^3)). Returns `row_of_col`.
fn hungarian_square(n: usize, cost: &dyn Fn(usize, usize) -> f64) -> Vec<usize> {
    // Classic potentials formulation, 1-indexed with column 0 as scratch.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row matched to column j
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_of_col = vec![usize::MAX; n];
    for j in 1..=n {
        row_of_col[j - 1] = p[j] - 1;
    }
    row_of_col
}

/// Minimum-cost assignment of `rows x cols` without gating; used by the
/// evaluation metrics. Returns matched `(row, col)` pairs covering
/// `min(rows, cols)` entries.
pub(crate) fn min_cost_assignment(
    rows: usize,
    cols: usize,
    cost: &dyn Fn(usize, usize) -> f64,
) -> Vec<(usize, usize)> {
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let n = rows.max(cols);
    let padded = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            cost(i, j)
        } else {
            0.0
        }
    };
    let row_of_col = hungarian_square(n, &padded);
    let mut out: Vec<(usize, usize)> = (0..n)
        .filter_map(|j| {
            let i = row_of_col[j];
            (i < rows && j < cols).then_some((i, j))
        })
        .collect();
    out.sort_unstable();
    out
}

/// Gated assignment: among matchings restricted to cells with
/// `cost <= max_cost`, maximize cardinality, then minimize total cost.
/// Equal-cost optima are canonicalized toward lexicographically smallest
/// `(track_idx, det_idx)` pairs.
pub fn solve_assignment(cost: &CostMatrix, max_cost: f64) -> AssociationResult {
    let (rows, cols) = (cost.rows(), cost.cols());
    if rows == 0 || cols == 0 {
        return AssociationResult {
            matches: Vec::new(),
            unmatched_tracks: (0..rows).collect(),
            unmatched_detections: (0..cols).collect(),
        };
    }
    let n = rows.max(cols);
    let padded = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            let c = cost.at(i, j);
            if c <= max_cost {
                c
            } else {
                GATE_COST
            }
        } else {
            0.0
        }
    };
    let row_of_col = hungarian_square(n, &padded);
    let mut matches: Vec<(usize, usize)> = (0..n)
        .filter_map(|j| {
            let i = row_of_col[j];
            (i < rows && j < cols && cost.at(i, j) <= max_cost).then_some((i, j))
        })
        .collect();
    matches.sort_unstable();

    // Deterministic tie canonicalization: swap column assignments between two
    // matched rows whenever it keeps the total cost identical and lowers the
    // earlier row's column.
    loop {
        let mut changed = false;
        for a in 0..matches.len() {
            for b in (a + 1)..matches.len() {
                let (i1, j1) = matches[a];
                let (i2, j2) = matches[b];
                if j2 < j1
                    && cost.at(i1, j2) <= max_cost
                    && cost.at(i2, j1) <= max_cost
                    && cost.at(i1, j2) + cost.at(i2, j1) == cost.at(i1, j1) + cost.at(i2, j2)
                {
                    matches[a] = (i1, j2);
                    matches[b] = (i2, j1);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }

    let matched_rows: Vec<bool> = {
        let mut m = vec![false; rows];
        for &(i, _) in &matches {
            m[i] = true;
        }
        m
    };
    let matched_cols: Vec<bool> = {
        let mut m = vec![false; cols];
        for &(_, j) in &matches {
            m[j] = true;
        }
        m
    };
    AssociationResult {
        matches,
        unmatched_tracks: (0..rows).filter(|&i| !matched_rows[i]).collect(),
        unmatched_detections: (0..cols).filter(|&j| !matched_cols[j]).collect(),
    }
}

/// Thresholds for the two-stage association.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TwoStageConfig {
    /// Detections with score >= tau_high enter stage 1.
    pub tau_high: f64,
    /// Detections with tau_low <= score < tau_high enter stage 2.
    pub tau_low: f64,
    /// Max cost accepted in stage 1.
    pub gate_stage1: f64,
    /// Max cost accepted in stage 2.
    pub gate_stage2: f64,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        Self { tau_high: 0.6, tau_low: 0.1, gate_stage1: 0.7, gate_stage2: 0.5 }
    }
}

/// Output of [`two_stage_associate`]; all indices refer to the original
/// track/detection slices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TwoStageOutcome {
    pub stage1: AssociationResult,
    pub stage2: AssociationResult,
    /// Unmatched high-confidence detections, to be spawned as new tracks.
    pub new_track_candidates: Vec<usize>,
    /// Detections below tau_low, dropped entirely.
    pub discarded: Vec<usize>,
}

impl TwoStageOutcome {
    /// Final set of track indices left unmatched after both stages.
    pub fn unmatched_tracks(&self) -> &[usize] {
        &self.stage2.unmatched_tracks
    }
}

fn stage_cost(
    track_boxes: &[Vec<f64>],
    track_classes: &[i32],
    dets: &[Detection],
    track_idx: &[usize],
    det_idx: &[usize],
) -> Result<CostMatrix> {
    CostMatrix::from_fn(track_idx.len(), det_idx.len(), |i, j| {
        let t = track_idx[i];
        let d = det_idx[j];
        if track_classes[t] != dets[d].class_id {
            1.0
        } else {
            1.0 - iou(&track_boxes[t], &dets[d].bbox)
        }
    })
}

fn remap(result: AssociationResult, track_idx: &[usize], det_idx: &[usize]) -> AssociationResult {
    AssociationResult {
        matches: result.matches.iter().map(|&(i, j)| (track_idx[i], det_idx[j])).collect(),
        unmatched_tracks: result.unmatched_tracks.iter().map(|&i| track_idx[i]).collect(),
        unmatched_detections: result.unmatched_detections.iter().map(|&j| det_idx[j]).collect(),
    }
}

/// Two-stage association: stage 1 matches all tracks against high-confidence
/// detections; stage 2 matches the leftover tracks against low-confidence
/// ones. Unmatched high-confidence detections become new-track candidates and
/// detections below `tau_low` are discarded.
pub fn two_stage_associate(
    track_boxes: &[Vec<f64>],
    track_classes: &[i32],
    dets: &[Detection],
    cfg: &TwoStageConfig,
) -> Result<TwoStageOutcome> {
    if cfg.tau_low > cfg.tau_high {
        return Err(Error::Config(format!(
            "tau_low {} exceeds tau_high {}",
            cfg.tau_low, cfg.tau_high
        )));
    }
    if track_boxes.len() != track_classes.len() {
        return Err(Error::Config("track boxes/classes length mismatch".into()));
    }

    let mut high = Vec::new();
    let mut low = Vec::new();
    let mut discarded = Vec::new();
    for (j, d) in dets.iter().enumerate() {
        if d.score >= cfg.tau_high {
            high.push(j);
        } else if d.score >= cfg.tau_low {
            low.push(j);
        } else {
            discarded.push(j);
        }
    }

    let all_tracks: Vec<usize> = (0..track_boxes.len()).collect();
    let c1 = stage_cost(track_boxes, track_classes, dets, &all_tracks, &high)?;
    let stage1 = remap(solve_assignment(&c1, cfg.gate_stage1), &all_tracks, &high);

    let leftover = stage1.unmatched_tracks.clone();
    let c2 = stage_cost(track_boxes, track_classes, dets, &leftover, &low)?;
    let stage2 = remap(solve_assignment(&c2, cfg.gate_stage2), &leftover, &low);

    let new_track_candidates = stage1.unmatched_detections.clone();
    Ok(TwoStageOutcome { stage1, stage2, new_track_candidates, discarded })
}
