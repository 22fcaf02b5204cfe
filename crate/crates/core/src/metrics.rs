//! Tracking evaluation: HOTA and its detection/association decomposition,
//! CLEAR-style MOTA and identity switches, and per-speed-bucket diagnostics.
//!
//! The HOTA path follows the reference evaluation procedure: a first pass
//! accumulates similarity-weighted potential matches per (gt id, pred id),
//! producing a global alignment score; each IoU threshold alpha then runs a
//! per-frame optimal assignment on `alignment * similarity`, keeps matched
//! pairs with similarity >= alpha as TPs, and aggregates
//! `DetA = TP/(TP+FN+FP)`, `AssA = mean_TP A(c)`, `HOTA_a = sqrt(DetA*AssA)`,
//! averaged over the alpha grid.

use std::collections::BTreeMap;

use crate::assoc::{iou, min_cost_assignment};
use crate::error::{Error, Result};

/// One box with identity on either side of the evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalBox {
    pub track_id: i64,
    pub class_id: i32,
    pub bbox: Vec<f64>,
}

/// Ground truth and predictions for one frame.
#[derive(Debug, Clone, Default)]
pub struct EvalFrame {
    pub frame: usize,
    pub ego_speed: f64,
    pub gt: Vec<EvalBox>,
    pub pred: Vec<EvalBox>,
}

/// Aggregated sequence metrics, percentages in [0, 100] (MOTA may go
/// negative on pathological input, per the CLEAR definition).
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EvalReport {
    pub hota: f64,
    pub deta: f64,
    pub assa: f64,
    pub det_re: f64,
    pub det_pr: f64,
    pub ass_re: f64,
    pub ass_pr: f64,
    pub loca: f64,
    pub mota: f64,
    pub idsw: usize,
    /// Set when both GT and predictions were empty and all metrics were
    /// defined as vacuously perfect.
    pub vacuous: bool,
}

/// The standard 19-threshold HOTA grid 0.05..0.95.
pub fn default_alphas() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

fn check_frames(frames: &[EvalFrame]) -> Result<()> {
    for f in frames {
        for (name, boxes) in [("gt", &f.gt), ("pred", &f.pred)] {
            let mut seen = std::collections::BTreeSet::new();
            for b in boxes {
                if !seen.insert(b.track_id) {
                    return Err(Error::Config(format!(
                        "duplicate {name} id {} in frame {}",
                        b.track_id, f.frame
                    )));
                }
            }
        }
    }
    Ok(())
}

fn similarity(a: &EvalBox, b: &EvalBox) -> f64 {
    if a.class_id != b.class_id {
        0.0
    } else {
        iou(&a.bbox, &b.bbox)
    }
}

struct IdSpace {
    gt_ids: BTreeMap<i64, usize>,
    pred_ids: BTreeMap<i64, usize>,
}

fn id_space(frames: &[EvalFrame]) -> IdSpace {
    let mut gt_ids = BTreeMap::new();
    let mut pred_ids = BTreeMap::new();
    for f in frames {
        for b in &f.gt {
            let next = gt_ids.len();
            gt_ids.entry(b.track_id).or_insert(next);
        }
        for b in &f.pred {
            let next = pred_ids.len();
            pred_ids.entry(b.track_id).or_insert(next);
        }
    }
    IdSpace { gt_ids, pred_ids }
}

/// CLEAR-style per-frame matcher at a fixed IoU threshold with carry-over of
/// the previous assignment; reports per-frame matched pairs and switches.
struct ClearAccumulator {
    thresh: f64,
    /// gt id -> last matched pred id (persists across gaps).
    last_match: BTreeMap<i64, i64>,
    pub idsw: usize,
    pub fp: usize,
    pub fn_: usize,
    pub matches: usize,
}

impl ClearAccumulator {
    fn new(thresh: f64) -> Self {
        Self { thresh, last_match: BTreeMap::new(), idsw: 0, fp: 0, fn_: 0, matches: 0 }
    }

    /// Returns the per-frame matched `(gt_idx, pred_idx, iou)` triples and the
    /// number of switches attributed to this frame.
    fn step(&mut self, frame: &EvalFrame) -> (Vec<(usize, usize, f64)>, usize) {
        let mut gt_taken = vec![false; frame.gt.len()];
        let mut pr_taken = vec![false; frame.pred.len()];
        let mut pairs: Vec<(usize, usize, f64)> = Vec::new();

        // Carry over previous matches still valid at this frame.
        for (gi, g) in frame.gt.iter().enumerate() {
            if let Some(&prev_pred) = self.last_match.get(&g.track_id) {
                if let Some(pi) = frame.pred.iter().position(|p| p.track_id == prev_pred) {
                    let s = similarity(g, &frame.pred[pi]);
                    if s >= self.thresh && !pr_taken[pi] {
                        gt_taken[gi] = true;
                        pr_taken[pi] = true;
                        pairs.push((gi, pi, s));
                    }
                }
            }
        }

        // Optimal assignment on the rest, maximizing IoU.
        let free_gt: Vec<usize> = (0..frame.gt.len()).filter(|&i| !gt_taken[i]).collect();
        let free_pr: Vec<usize> = (0..frame.pred.len()).filter(|&j| !pr_taken[j]).collect();
        if !free_gt.is_empty() && !free_pr.is_empty() {
            let cost = |i: usize, j: usize| -similarity(&frame.gt[free_gt[i]], &frame.pred[free_pr[j]]);
            for (i, j) in min_cost_assignment(free_gt.len(), free_pr.len(), &cost) {
                let (gi, pi) = (free_gt[i], free_pr[j]);
                let s = similarity(&frame.gt[gi], &frame.pred[pi]);
                if s >= self.thresh {
                    gt_taken[gi] = true;
                    pr_taken[pi] = true;
                    pairs.push((gi, pi, s));
                }
            }
        }

        let mut switches = 0;
        for &(gi, pi, _) in &pairs {
            let gt_id = frame.gt[gi].track_id;
            let pred_id = frame.pred[pi].track_id;
            if let Some(&prev) = self.last_match.get(&gt_id) {
                if prev != pred_id {
                    switches += 1;
                }
            }
            self.last_match.insert(gt_id, pred_id);
        }

        self.idsw += switches;
        self.matches += pairs.len();
        self.fp += frame.pred.len() - pairs.len();
        self.fn_ += frame.gt.len() - pairs.len();
        (pairs, switches)
    }
}

/// Evaluate a sequence at the given IoU thresholds.
pub fn evaluate(frames: &[EvalFrame], alphas: &[f64]) -> Result<EvalReport> {
    check_frames(frames)?;
    if alphas.is_empty() {
        return Err(Error::Config("alpha set must be nonempty".into()));
    }
    let gt_total: usize = frames.iter().map(|f| f.gt.len()).sum();
    let pred_total: usize = frames.iter().map(|f| f.pred.len()).sum();
    if gt_total == 0 && pred_total == 0 {
        return Ok(EvalReport {
            hota: 100.0,
            deta: 100.0,
            assa: 100.0,
            det_re: 100.0,
            det_pr: 100.0,
            ass_re: 100.0,
            ass_pr: 100.0,
            loca: 100.0,
            mota: 100.0,
            idsw: 0,
            vacuous: true,
        });
    }

    let ids = id_space(frames);
    let (ng, np) = (ids.gt_ids.len(), ids.pred_ids.len());

    // Pass 1: similarity-weighted potential matches and per-id counts.
    let mut potential = vec![vec![0.0; np]; ng];
    let mut gt_count = vec![0usize; ng];
    let mut pred_count = vec![0usize; np];
    let mut per_frame_sims: Vec<Vec<Vec<f64>>> = Vec::with_capacity(frames.len());
    for f in frames {
        let sims: Vec<Vec<f64>> = f
            .gt
            .iter()
            .map(|g| f.pred.iter().map(|p| similarity(g, p)).collect())
            .collect();
        let row_sums: Vec<f64> = sims.iter().map(|r| r.iter().sum()).collect();
        let mut col_sums = vec![0.0; f.pred.len()];
        for r in &sims {
            for (j, v) in r.iter().enumerate() {
                col_sums[j] += v;
            }
        }
        for (i, g) in f.gt.iter().enumerate() {
            gt_count[ids.gt_ids[&g.track_id]] += 1;
            for (j, p) in f.pred.iter().enumerate() {
                let s = sims[i][j];
                let denom = row_sums[i] + col_sums[j] - s;
                if denom > f64::EPSILON {
                    potential[ids.gt_ids[&g.track_id]][ids.pred_ids[&p.track_id]] += s / denom;
                }
            }
        }
        for p in &f.pred {
            pred_count[ids.pred_ids[&p.track_id]] += 1;
        }
        per_frame_sims.push(sims);
    }
    let mut global_align = vec![vec![0.0; np]; ng];
    for gi in 0..ng {
        for pi in 0..np {
            let denom = gt_count[gi] as f64 + pred_count[pi] as f64 - potential[gi][pi];
            global_align[gi][pi] = if denom > 0.0 { potential[gi][pi] / denom } else { 0.0 };
        }
    }

    // Pass 2: per-alpha matching and aggregation.
    let mut hota_sum = 0.0;
    let mut deta_sum = 0.0;
    let mut assa_sum = 0.0;
    let mut detre_sum = 0.0;
    let mut detpr_sum = 0.0;
    let mut assre_sum = 0.0;
    let mut asspr_sum = 0.0;
    let mut loca_sum = 0.0;
    for &alpha in alphas {
        let mut tp = 0usize;
        let mut loc = 0.0;
        let mut matches = vec![vec![0usize; np]; ng];
        for (fi, f) in frames.iter().enumerate() {
            if f.gt.is_empty() || f.pred.is_empty() {
                continue;
            }
            let sims = &per_frame_sims[fi];
            let score = |i: usize, j: usize| -> f64 {
                let gi = ids.gt_ids[&f.gt[i].track_id];
                let pi = ids.pred_ids[&f.pred[j].track_id];
                -(global_align[gi][pi] * sims[i][j])
            };
            for (i, j) in min_cost_assignment(f.gt.len(), f.pred.len(), &score) {
                let s = sims[i][j];
                if s >= alpha - 1e-12 {
                    tp += 1;
                    loc += s;
                    matches[ids.gt_ids[&f.gt[i].track_id]][ids.pred_ids[&f.pred[j].track_id]] += 1;
                }
            }
        }
        let fn_ = gt_total - tp;
        let fp = pred_total - tp;
        let deta = tp as f64 / (tp + fn_ + fp).max(1) as f64;
        let (mut assa, mut assre, mut asspr) = (0.0, 0.0, 0.0);
        for gi in 0..ng {
            for pi in 0..np {
                let m = matches[gi][pi] as f64;
                if m > 0.0 {
                    let union = gt_count[gi] as f64 + pred_count[pi] as f64 - m;
                    assa += m * (m / union);
                    assre += m * (m / gt_count[gi] as f64);
                    asspr += m * (m / pred_count[pi] as f64);
                }
            }
        }
        let tpf = (tp as f64).max(1.0);
        assa /= tpf;
        assre /= tpf;
        asspr /= tpf;
        hota_sum += (deta * assa).sqrt();
        deta_sum += deta;
        assa_sum += assa;
        detre_sum += tp as f64 / (tp + fn_).max(1) as f64;
        detpr_sum += tp as f64 / (tp + fp).max(1) as f64;
        assre_sum += assre;
        asspr_sum += asspr;
        loca_sum += loc / tpf;
    }
    let na = alphas.len() as f64;

    // CLEAR subset at IoU 0.5.
    let mut clear = ClearAccumulator::new(0.5);
    for f in frames {
        clear.step(f);
    }
    let mota = if gt_total > 0 {
        1.0 - (clear.fn_ + clear.fp + clear.idsw) as f64 / gt_total as f64
    } else {
        0.0
    };

    Ok(EvalReport {
        hota: 100.0 * hota_sum / na,
        deta: 100.0 * deta_sum / na,
        assa: 100.0 * assa_sum / na,
        det_re: 100.0 * detre_sum / na,
        det_pr: 100.0 * detpr_sum / na,
        ass_re: 100.0 * assre_sum / na,
        ass_pr: 100.0 * asspr_sum / na,
        loca: 100.0 * loca_sum / na,
        mota: 100.0 * mota,
        idsw: clear.idsw,
        vacuous: false,
    })
}

/// A half-open speed range `[lo, hi)` in km/h.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SpeedBucket {
    pub lo: f64,
    pub hi: f64,
}

/// Buckets centered on the given speeds with +/- `halfwidth`.
pub fn buckets_around(centers: &[f64], halfwidth: f64) -> Vec<SpeedBucket> {
    centers.iter().map(|&c| SpeedBucket { lo: (c - halfwidth).max(0.0), hi: c + halfwidth }).collect()
}

/// Per-bucket matched-IoU and identity-switch statistics.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct BucketStats {
    pub bucket: SpeedBucket,
    pub frames: usize,
    pub matches: usize,
    /// Mean IoU over matched pairs; absent when the bucket saw no matches.
    pub mean_iou: Option<f64>,
    pub idsw: usize,
    /// Switches per matched pair; absent when the bucket saw no matches.
    pub idsw_rate: Option<f64>,
}

/// Partition frames by ego speed and report matched-IoU means and ID-switch
/// rates per bucket. Matching is CLEAR-style at IoU 0.5 over the whole
/// sequence; each frame's statistics land in the first bucket containing its
/// speed.
pub fn speed_bucket_analysis(frames: &[EvalFrame], buckets: &[SpeedBucket]) -> Result<Vec<BucketStats>> {
    check_frames(frames)?;
    if buckets.is_empty() {
        return Err(Error::Config("bucket set must be nonempty".into()));
    }
    let mut frame_count = vec![0usize; buckets.len()];
    let mut match_count = vec![0usize; buckets.len()];
    let mut iou_sum = vec![0.0; buckets.len()];
    let mut idsw = vec![0usize; buckets.len()];

    let mut clear = ClearAccumulator::new(0.5);
    for f in frames {
        let bucket = buckets.iter().position(|b| f.ego_speed >= b.lo && f.ego_speed < b.hi);
        let (pairs, switches) = clear.step(f);
        if let Some(bi) = bucket {
            frame_count[bi] += 1;
            match_count[bi] += pairs.len();
            iou_sum[bi] += pairs.iter().map(|&(_, _, s)| s).sum::<f64>();
            idsw[bi] += switches;
        }
    }

    Ok(buckets
        .iter()
        .enumerate()
        .map(|(bi, &bucket)| BucketStats {
            bucket,
            frames: frame_count[bi],
            matches: match_count[bi],
            mean_iou: (match_count[bi] > 0).then(|| iou_sum[bi] / match_count[bi] as f64),
            idsw: idsw[bi],
            idsw_rate: (match_count[bi] > 0).then(|| idsw[bi] as f64 / match_count[bi] as f64),
        })
        .collect())
}

/// Combine per-sequence bucket statistics (bucket sets must match); means
/// are recomputed from the pooled counts.
pub fn merge_bucket_stats(per_sequence: &[Vec<BucketStats>]) -> Result<Vec<BucketStats>> {
    let first = per_sequence
        .first()
        .ok_or_else(|| Error::Config("no bucket statistics to merge".into()))?;
    let buckets: Vec<SpeedBucket> = first.iter().map(|s| s.bucket).collect();
    let mut frames = vec![0usize; buckets.len()];
    let mut matches = vec![0usize; buckets.len()];
    let mut iou_sum = vec![0.0; buckets.len()];
    let mut idsw = vec![0usize; buckets.len()];
    for stats in per_sequence {
        if stats.len() != buckets.len() || stats.iter().zip(&buckets).any(|(s, b)| s.bucket != *b) {
            return Err(Error::Config("bucket sets differ across sequences".into()));
        }
        for (i, s) in stats.iter().enumerate() {
            frames[i] += s.frames;
            matches[i] += s.matches;
            iou_sum[i] += s.mean_iou.unwrap_or(0.0) * s.matches as f64;
            idsw[i] += s.idsw;
        }
    }
    Ok(buckets
        .iter()
        .enumerate()
        .map(|(i, &bucket)| BucketStats {
            bucket,
            frames: frames[i],
            matches: matches[i],
            mean_iou: (matches[i] > 0).then(|| iou_sum[i] / matches[i] as f64),
            idsw: idsw[i],
            idsw_rate: (matches[i] > 0).then(|| idsw[i] as f64 / matches[i] as f64),
        })
        .collect())
}
