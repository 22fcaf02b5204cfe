//! End-to-end optimization of the network (and the learnable loss weights)
//! by reverse-mode differentiation through teacher-forced filter rollouts.
//!
//! Training-time association is teacher forcing: detections are matched to
//! ground-truth boxes by gated IoU assignment (a parameter-independent,
//! discrete step), one training track runs per ground-truth object, and the
//! update consumes the GT-matched detection. Gradients flow through the
//! network outputs (Q, R, learned posterior P, and birth covariance), the
//! Kalman gain, and the state recursion; backpropagation is truncated into
//! overlapping windows so tape memory stays bounded. Losses attach to every
//! posterior whose box overlaps its ground truth by at least the gate IoU.
//!
//! The optimizer is decoupled-weight-decay Adam with a linear-warmup +
//! cosine-annealing schedule; biases and LayerNorm parameters are excluded
//! from decay.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::RngExt;

use crate::assoc::{iou, min_cost_assignment, Detection};
use crate::error::{Error, Result};
use crate::formats::SequenceBundle;
use crate::kf::{self, size_indices};
use crate::losses::{
    total_loss_with_grad, LossBreakdown, LossWeights, TrajectoryPoint, TrajectorySample,
};
use crate::msnet::{ForwardTape, MsNetConfig, MsNetParams, OutputGrad};
use crate::util::seeded_rng;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Rollout segmentation and teacher-forcing gates.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RolloutConfig {
    /// Truncated-backprop window length in frames.
    pub window: usize,
    /// Warm-up overlap between consecutive windows.
    pub overlap: usize,
    /// Minimum posterior-vs-GT IoU for a frame to contribute loss.
    pub iou_gate: f64,
    /// Minimum detection-vs-GT IoU for teacher-forced matching.
    pub det_match_iou: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self { window: 10, overlap: 2, iou_gate: 0.5, det_match_iou: 0.5 }
    }
}

impl RolloutConfig {
    fn validate(&self) -> Result<()> {
        if self.window < 2 || self.overlap >= self.window {
            return Err(Error::Config(format!(
                "need window >= 2 and overlap < window, got {}/{}",
                self.window, self.overlap
            )));
        }
        Ok(())
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    /// Global-norm gradient clip.
    pub grad_clip: f64,
    pub rollout: RolloutConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 5e-3,
            weight_decay: 1e-2,
            warmup_epochs: 5,
            total_epochs: 100,
            batch_size: 4,
            seed: 0,
            grad_clip: 5.0,
            rollout: RolloutConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) && self.lr0 != 0.0 {
            return Err(Error::Config("lr0 must be >= 0".into()));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be < total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.rollout.validate()
    }
}

/// Linear warm-up to `lr0` over `warmup_epochs`, then cosine annealing to 0
/// at `total_epochs`.
pub fn lr_schedule(epoch: f64, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_epochs as f64;
    let total = cfg.total_epochs as f64;
    if epoch < warm {
        cfg.lr0 * (epoch + 1.0) / warm
    } else {
        let progress = (epoch - warm) / (total - warm);
        cfg.lr0 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// First/second Adam moment accumulators plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

/// One decoupled-weight-decay Adam step over a flat value vector. Decay is
/// applied only where `decay_mask` is true. Non-finite gradients skip the
/// step entirely and return `Ok(false)`.
pub fn optimizer_step(
    values: &mut [f64],
    decay_mask: &[bool],
    grads: &[f64],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<bool> {
    let n = values.len();
    if grads.len() != n || decay_mask.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Config("optimizer_step: shape mismatch".into()));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Ok(false);
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for i in 0..n {
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * grads[i];
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        let wd = if decay_mask[i] { weight_decay * values[i] } else { 0.0 };
        values[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + wd);
    }
    Ok(true)
}

// ── Differentiable rollout ───────────────────────────────────────────────

struct UpdateRec {
    r_tape: ForwardTape,
    s_inv: DMatrix<f64>,
    k: DMatrix<f64>,
    innov: DVector<f64>,
}

enum StepOp {
    /// Track seeded from a detection; covariance from the P head with rate
    /// entries scaled.
    Birth { init_tape: ForwardTape, scale: Vec<f64> },
    /// Predict with learned Q, then update with learned R and posterior P.
    Update { q_tape: ForwardTape, update: UpdateRec },
    /// Predict only (detection missing this frame).
    Coast { q_tape: ForwardTape },
}

struct StepRec {
    op: StepOp,
    x_post: DVector<f64>,
    /// Index into the segment's loss points, when this posterior contributed.
    loss_point: Option<(usize, usize)>,
}

struct SegmentTrack {
    steps: Vec<StepRec>,
}

/// Output of [`rollout_and_grad`].
#[derive(Debug, Clone)]
pub struct RolloutOutput {
    pub loss: f64,
    pub breakdown: LossBreakdown,
    pub grad_params: Vec<f64>,
    pub grad_alpha_raw: f64,
    pub grad_beta_raw: f64,
    /// Posterior/GT pairs that contributed loss; zero means no gradient.
    pub n_loss_points: usize,
}

fn fallback_embedding(dim: usize) -> Vec<f64> {
    let mut e = vec![0.0; dim.max(1)];
    e[0] = 1.0;
    e
}

/// Teacher-forced detection-to-GT matching for one frame: gated max-IoU
/// assignment between same-class pairs. Returns `gt_track_id -> det index`.
fn match_dets_to_gt(
    dets: &[Detection],
    gt: &[crate::formats::GtBox],
    gate: f64,
) -> BTreeMap<i64, usize> {
    let mut out = BTreeMap::new();
    let usable_gt: Vec<usize> = (0..gt.len()).filter(|&i| !gt[i].dont_care).collect();
    if dets.is_empty() || usable_gt.is_empty() {
        return out;
    }
    let cost = |i: usize, j: usize| -> f64 {
        let g = &gt[usable_gt[i]];
        if g.class_id != dets[j].class_id {
            0.0
        } else {
            -iou(&g.bbox, &dets[j].bbox)
        }
    };
    for (i, j) in min_cost_assignment(usable_gt.len(), dets.len(), &cost) {
        let g = &gt[usable_gt[i]];
        if g.class_id == dets[j].class_id && iou(&g.bbox, &dets[j].bbox) >= gate {
            out.insert(g.track_id, j);
        }
    }
    out
}

/// Map a state's observed box to the rectangle used by the position loss:
/// the box itself in 2D, the ground-plane footprint `[x, y, l, w]` in 3D.
fn loss_box(observed: &[f64]) -> (Vec<f64>, [usize; 4]) {
    if observed.len() == 6 {
        (vec![observed[0], observed[1], observed[5], observed[3]], [0, 1, 5, 3])
    } else {
        (observed.to_vec(), [0, 1, 2, 3])
    }
}

/// Run the differentiable teacher-forced pipeline over one sequence and
/// return the loss plus exact gradients w.r.t. every network parameter and
/// the raw loss weights (within the truncation windows).
pub fn rollout_and_grad(
    bundle: &SequenceBundle,
    params: &MsNetParams,
    weights: &LossWeights,
    rcfg: &RolloutConfig,
) -> Result<RolloutOutput> {
    rcfg.validate()?;
    weights.validate()?;
    let gt_frames = bundle
        .gt
        .as_ref()
        .ok_or_else(|| Error::Config(format!("bundle {} has no ground truth", bundle.id)))?;
    let dim = if bundle.dims == 3 { kf::DIM_3D } else { kf::DIM_2D };
    let obs_dim = dim / 2;
    if params.config().q_dim != dim || params.config().r_dim != obs_dim {
        return Err(Error::Config("network head dims do not match the bundle".into()));
    }
    if bundle.frames < 2 {
        return Err(Error::Config("rollout needs at least 2 frames".into()));
    }
    let norm = bundle.center_norm();
    let center_dims = if bundle.dims == 3 { 3 } else { 2 };
    let emb_dim = bundle.embeddings.as_ref().map(|e| e.dim).unwrap_or(8);

    // Parameter-independent teacher matching per frame.
    let matched: Vec<BTreeMap<i64, usize>> = (0..bundle.frames)
        .map(|t| match_dets_to_gt(&bundle.detections[t], &gt_frames[t], rcfg.det_match_iou))
        .collect();
    let gt_box_of = |t: usize, id: i64| -> Option<&crate::formats::GtBox> {
        gt_frames[t].iter().find(|g| g.track_id == id && !g.dont_care)
    };
    let mut all_ids: Vec<i64> = Vec::new();
    for frame in gt_frames {
        for g in frame {
            if !g.dont_care && !all_ids.contains(&g.track_id) {
                all_ids.push(g.track_id);
            }
        }
    }
    all_ids.sort_unstable();

    let f_mat = kf::make_transition(dim, 1.0)?;
    let h_mat = kf::observation_matrix(dim);
    let speeds = &bundle.speeds;

    let stride = rcfg.window - rcfg.overlap;
    let mut segment_starts = Vec::new();
    let mut s0 = 0usize;
    while s0 < bundle.frames {
        segment_starts.push(s0);
        if s0 + rcfg.window >= bundle.frames {
            break;
        }
        s0 += stride;
    }

    let mut grad_params = vec![0.0; params.len()];
    let mut grad_alpha = 0.0;
    let mut grad_beta = 0.0;
    let mut loss_sum = 0.0;
    let mut bd_sum = LossBreakdown { total: 0.0, tcl: 0.0, scl: 0.0, pcl: 0.0, alpha: 0.0, beta: 0.0 };
    let mut n_points_total = 0usize;

    // Posterior (x, P) carried across segment boundaries, detached.
    let mut carried: BTreeMap<i64, (DVector<f64>, DMatrix<f64>)> = BTreeMap::new();

    for (seg_idx, &start) in segment_starts.iter().enumerate() {
        let end = (start + rcfg.window).min(bundle.frames);
        let loss_from = if seg_idx == 0 { start } else { start + rcfg.overlap };
        let snapshot_frame = segment_starts.get(seg_idx + 1).map(|&n| n - 1);

        let mut tracks: Vec<(i64, SegmentTrack)> = Vec::new();
        let mut samples: Vec<TrajectorySample> = Vec::new();
        let mut carried_next: BTreeMap<i64, (DVector<f64>, DMatrix<f64>)> = BTreeMap::new();

        for &gt_id in &all_ids {
            let mut cur: Option<(DVector<f64>, DMatrix<f64>)> = carried.get(&gt_id).cloned();
            let mut steps: Vec<StepRec> = Vec::new();
            let mut run: Vec<TrajectoryPoint> = Vec::new();

            for t in start..end {
                let det_idx = matched[t].get(&gt_id).copied();
                let op: StepOp;

                if cur.is_none() {
                    let Some(dj) = det_idx else { continue };
                    // Birth: state from the detection, covariance from the
                    // P head with inflated rate variances.
                    let det = &bundle.detections[t][dj];
                    let mut init_tape = ForwardTape::new();
                    let det_sizes = &det.bbox[size_indices(obs_dim)];
                    let mut inputs = vec![speeds[t]];
                    inputs.extend_from_slice(det_sizes);
                    let out = params.forward(&inputs, Some(&mut init_tape))?;
                    let mut scale = vec![1.0; dim];
                    for s in scale.iter_mut().skip(dim / 2) {
                        *s = 10.0;
                    }
                    let p0 = DMatrix::from_diagonal(&DVector::from_iterator(
                        dim,
                        out.p_diag.iter().zip(&scale).map(|(p, s)| p * s),
                    ));
                    let mut x0 = DVector::zeros(dim);
                    for (i, v) in det.bbox.iter().enumerate() {
                        x0[i] = *v;
                    }
                    cur = Some((x0, p0));
                    op = StepOp::Birth { init_tape, scale };
                } else {
                    let (x_prev, p_prev) = cur.clone().unwrap();
                    // Q from the previous frame's speed and posterior sizes.
                    let v_prev = speeds[t.saturating_sub(1)];
                    let prev_sizes: Vec<f64> = size_indices(obs_dim)
                        .map(|i| x_prev[i])
                        .collect();
                    let mut q_tape = ForwardTape::new();
                    let mut q_inputs = vec![v_prev];
                    q_inputs.extend_from_slice(&prev_sizes);
                    let q_out = params.forward(&q_inputs, Some(&mut q_tape))?;

                    let x_pred = &f_mat * &x_prev;
                    let mut p_pred = &f_mat * &p_prev * f_mat.transpose();
                    for i in 0..dim {
                        p_pred[(i, i)] += q_out.q_diag[i];
                    }

                    if let Some(dj) = det_idx {
                        let det = &bundle.detections[t][dj];
                        let det_sizes = &det.bbox[size_indices(obs_dim)];
                        let mut r_tape = ForwardTape::new();
                        let mut r_inputs = vec![speeds[t]];
                        r_inputs.extend_from_slice(det_sizes);
                        let r_out = params.forward(&r_inputs, Some(&mut r_tape))?;

                        let mut s = (&h_mat * &p_pred * h_mat.transpose()).clone_owned();
                        for i in 0..obs_dim {
                            s[(i, i)] += r_out.r_diag[i];
                        }
                        let s_inv = s.clone().try_inverse().ok_or_else(|| {
                            Error::Numeric("singular innovation covariance in rollout".into())
                        })?;
                        let k = &p_pred * h_mat.transpose() * &s_inv;
                        let z = DVector::from_row_slice(&bundle.detections[t][dj].bbox);
                        let innov = &z - &h_mat * &x_pred;
                        let x_post = &x_pred + &k * &innov;
                        let p_post = DMatrix::from_diagonal(&DVector::from_row_slice(&r_out.p_diag));
                        cur = Some((x_post, p_post));
                        op = StepOp::Update { q_tape, update: UpdateRec { r_tape, s_inv, k, innov } };
                    } else {
                        cur = Some((x_pred, p_pred));
                        op = StepOp::Coast { q_tape };
                    }
                }

                let (x_post, _) = cur.as_ref().unwrap();
                let mut loss_point = None;
                if t >= loss_from {
                    if let Some(g) = gt_box_of(t, gt_id) {
                        let observed: Vec<f64> = (0..obs_dim).map(|i| x_post[i]).collect();
                        if iou(&observed, &g.bbox) >= rcfg.iou_gate {
                            let (pred_box, _) = loss_box(&observed);
                            let (gt_pos_box, _) = loss_box(&g.bbox);
                            let det_emb = det_idx
                                .and_then(|dj| bundle.detections[t][dj].embedding.clone());
                            let gt_emb = bundle
                                .embeddings
                                .as_ref()
                                .and_then(|e| e.get(t, gt_id).cloned());
                            let embedding = det_emb
                                .or_else(|| gt_emb.clone())
                                .unwrap_or_else(|| fallback_embedding(emb_dim));
                            let gt_embedding =
                                gt_emb.unwrap_or_else(|| embedding.clone());
                            run.push(TrajectoryPoint {
                                frame: t,
                                center: (0..center_dims).map(|i| x_post[i] / norm).collect(),
                                embedding,
                                pred_box,
                                gt_box: gt_pos_box,
                                gt_embedding,
                            });
                            loss_point = Some((samples.len(), run.len() - 1));
                        }
                    }
                }
                if loss_point.is_none() && !run.is_empty() {
                    // Gap in eligibility: close the contiguous run.
                    samples.push(TrajectorySample { points: std::mem::take(&mut run) });
                }

                steps.push(StepRec { op, x_post: x_post.clone(), loss_point });

                if Some(t) == snapshot_frame {
                    if let Some((x, p)) = cur.as_ref() {
                        carried_next.insert(gt_id, (x.clone(), p.clone()));
                    }
                }
            }
            if !run.is_empty() {
                samples.push(TrajectorySample { points: run });
            }
            if !steps.is_empty() {
                tracks.push((gt_id, SegmentTrack { steps }));
            }
        }

        let n_points: usize = samples.iter().map(|s| s.points.len()).sum();
        n_points_total += n_points;
        if std::env::var_os("SPEEDTRACK_DEBUG_ROLLOUT").is_some() {
            for (i, s) in samples.iter().enumerate() {
                let centers: Vec<(f64, f64)> =
                    s.points.iter().map(|p| (p.center[0] * norm, p.center[1] * norm)).collect();
                let spread = centers
                    .iter()
                    .map(|c| {
                        ((c.0 - centers[0].0).powi(2) + (c.1 - centers[0].1).powi(2)).sqrt()
                    })
                    .fold(0.0f64, f64::max);
                eprintln!(
                    "seg {seg_idx} sample {i}: T={} frames {:?}..{:?} max-drift {spread:.1}px first {:?}",
                    s.points.len(),
                    s.points.first().map(|p| p.frame),
                    s.points.last().map(|p| p.frame),
                    centers.first()
                );
            }
        }
        let (seg_loss, seg_bd, seg_grads) = total_loss_with_grad(&samples, weights)?;
        loss_sum += seg_loss;
        bd_sum.total += seg_bd.total;
        bd_sum.tcl += seg_bd.tcl;
        bd_sum.scl += seg_bd.scl;
        bd_sum.pcl += seg_bd.pcl;
        grad_alpha += seg_grads.alpha_raw;
        grad_beta += seg_grads.beta_raw;

        // Reverse pass per track.
        let mut dummy_inputs = vec![0.0; params.config().n_tokens];
        for (_, track) in &tracks {
            let mut x_bar = DVector::zeros(dim);
            let mut p_bar = DMatrix::zeros(dim, dim);
            for step in track.steps.iter().rev() {
                if let Some((si, pi)) = step.loss_point {
                    for d in 0..center_dims {
                        x_bar[d] += seg_grads.centers[si][pi][d] / norm;
                    }
                    let observed: Vec<f64> = (0..obs_dim).map(|i| step.x_post[i]).collect();
                    let (_, coord_map) = loss_box(&observed);
                    for (slot, &coord) in coord_map.iter().enumerate() {
                        x_bar[coord] += seg_grads.pred_boxes[si][pi][slot];
                    }
                }
                match &step.op {
                    StepOp::Birth { init_tape, scale } => {
                        let p_grad: Vec<f64> = (0..dim).map(|i| p_bar[(i, i)] * scale[i]).collect();
                        if p_grad.iter().any(|&g| g != 0.0) {
                            dummy_inputs.iter_mut().for_each(|g| *g = 0.0);
                            params.backward(
                                init_tape,
                                &OutputGrad { q: vec![], r: vec![], p: p_grad },
                                &mut grad_params,
                                &mut dummy_inputs,
                            )?;
                        }
                        x_bar = DVector::zeros(dim);
                        p_bar = DMatrix::zeros(dim, dim);
                    }
                    StepOp::Update { q_tape, update } => {
                        // Posterior covariance is the P head verbatim.
                        let p_grad: Vec<f64> = (0..dim).map(|i| p_bar[(i, i)]).collect();
                        // x_post = x_pred + K (z - H x_pred).
                        let k_bar = &x_bar * update.innov.transpose();
                        let mut x_pred_bar = x_bar.clone();
                        x_pred_bar -= h_mat.transpose() * (update.k.transpose() * &x_bar);
                        // K = A S^-1, A = P_pred H^T, S = H P_pred H^T + R.
                        let a_bar = &k_bar * &update.s_inv;
                        let s_bar = -(update.k.transpose() * &k_bar * &update.s_inv);
                        let r_grad: Vec<f64> = (0..obs_dim).map(|i| s_bar[(i, i)]).collect();
                        let mut p_pred_bar = &a_bar * &h_mat;
                        p_pred_bar += h_mat.transpose() * &s_bar * &h_mat;

                        dummy_inputs.iter_mut().for_each(|g| *g = 0.0);
                        params.backward(
                            &update.r_tape,
                            &OutputGrad { q: vec![], r: r_grad, p: p_grad },
                            &mut grad_params,
                            &mut dummy_inputs,
                        )?;

                        // P_pred = F P_prev F^T + diag(q).
                        let q_grad: Vec<f64> = (0..dim).map(|i| p_pred_bar[(i, i)]).collect();
                        let mut q_in_grads = vec![0.0; params.config().n_tokens];
                        params.backward(
                            q_tape,
                            &OutputGrad { q: q_grad, r: vec![], p: vec![] },
                            &mut grad_params,
                            &mut q_in_grads,
                        )?;
                        let mut x_prev_bar = f_mat.transpose() * &x_pred_bar;
                        for (slot, i) in size_indices(obs_dim).enumerate() {
                            x_prev_bar[i] += q_in_grads[1 + slot];
                        }
                        p_bar = f_mat.transpose() * &p_pred_bar * &f_mat;
                        x_bar = x_prev_bar;
                    }
                    StepOp::Coast { q_tape } => {
                        let q_grad: Vec<f64> = (0..dim).map(|i| p_bar[(i, i)]).collect();
                        let mut q_in_grads = vec![0.0; params.config().n_tokens];
                        params.backward(
                            q_tape,
                            &OutputGrad { q: q_grad, r: vec![], p: vec![] },
                            &mut grad_params,
                            &mut q_in_grads,
                        )?;
                        let mut x_prev_bar = f_mat.transpose() * &x_bar;
                        for (slot, i) in size_indices(obs_dim).enumerate() {
                            x_prev_bar[i] += q_in_grads[1 + slot];
                        }
                        p_bar = f_mat.transpose() * &p_bar * &f_mat;
                        x_bar = x_prev_bar;
                    }
                }
            }
        }

        carried = if snapshot_frame.is_some() {
            carried_next
        } else {
            BTreeMap::new()
        };
    }

    let n_seg = segment_starts.len().max(1) as f64;
    for g in &mut grad_params {
        *g /= n_seg;
    }
    Ok(RolloutOutput {
        loss: loss_sum / n_seg,
        breakdown: LossBreakdown {
            total: bd_sum.total / n_seg,
            tcl: bd_sum.tcl / n_seg,
            scl: bd_sum.scl / n_seg,
            pcl: bd_sum.pcl / n_seg,
            alpha: weights.alpha(),
            beta: weights.beta(),
        },
        grad_params,
        grad_alpha_raw: grad_alpha / n_seg,
        grad_beta_raw: grad_beta / n_seg,
        n_loss_points: n_points_total,
    })
}

/// One row of the per-epoch training curve.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub tcl: f64,
    pub scl: f64,
    pub pcl: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Optimizer steps skipped due to non-finite gradients.
    pub skipped_steps: usize,
}

/// Trained parameters, final loss weights, and the loss curve.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: MsNetParams,
    pub weights: LossWeights,
    pub curve: Vec<EpochMetrics>,
}

/// Full training loop: deterministic given `(seed, dataset, config)`.
pub fn train(
    bundles: &[SequenceBundle],
    net_cfg: &MsNetConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if bundles.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    for b in bundles {
        if b.gt.is_none() {
            return Err(Error::Config(format!("bundle {} has no ground truth", b.id)));
        }
    }

    let mut params = MsNetParams::init(net_cfg.clone(), cfg.seed)?;
    let mut weights = LossWeights::trainable_init(1.0, 1.0);
    let n = params.len();
    let mut opt = OptimizerState::new(n + 2);
    let decay_mask: Vec<bool> = params
        .decay_mask()
        .iter()
        .copied()
        .chain([false, false])
        .collect();

    let mut rng = seeded_rng(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut curve = Vec::with_capacity(cfg.total_epochs);

    for epoch in 0..cfg.total_epochs {
        let lr = lr_schedule(epoch as f64, cfg);
        // Deterministic shuffle per epoch.
        let mut order: Vec<usize> = (0..bundles.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        let mut epoch_bd = [0.0f64; 3];
        let mut n_seqs = 0usize;
        let mut skipped = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            let mut grads = vec![0.0; n + 2];
            for &si in batch {
                let out = rollout_and_grad(&bundles[si], &params, &weights, &cfg.rollout)?;
                for (g, src) in grads[..n].iter_mut().zip(&out.grad_params) {
                    *g += src / batch.len() as f64;
                }
                grads[n] += out.grad_alpha_raw / batch.len() as f64;
                grads[n + 1] += out.grad_beta_raw / batch.len() as f64;
                epoch_loss += out.loss;
                epoch_bd[0] += out.breakdown.tcl;
                epoch_bd[1] += out.breakdown.scl;
                epoch_bd[2] += out.breakdown.pcl;
                n_seqs += 1;
            }
            // Global-norm clip.
            let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > cfg.grad_clip && norm > 0.0 {
                let scale = cfg.grad_clip / norm;
                for g in &mut grads {
                    *g *= scale;
                }
            }
            let mut values: Vec<f64> = Vec::with_capacity(n + 2);
            values.extend_from_slice(params.data());
            values.push(weights.alpha_raw);
            values.push(weights.beta_raw);
            let applied = optimizer_step(&mut values, &decay_mask, &grads, &mut opt, lr, cfg.weight_decay)?;
            if applied {
                params.data_mut().copy_from_slice(&values[..n]);
                weights.alpha_raw = values[n];
                weights.beta_raw = values[n + 1];
            } else {
                skipped += 1;
            }
        }

        let denom = n_seqs.max(1) as f64;
        curve.push(EpochMetrics {
            epoch,
            lr,
            loss: epoch_loss / denom,
            tcl: epoch_bd[0] / denom,
            scl: epoch_bd[1] / denom,
            pcl: epoch_bd[2] / denom,
            alpha: weights.alpha(),
            beta: weights.beta(),
            skipped_steps: skipped,
        });
    }

    Ok(TrainOutput { params, weights, curve })
}
