//! Trajectory, semantic, and position consistency losses plus the
//! learnable-weighted total, all with exact gradients w.r.t. their inputs.
//!
//! - Trajectory consistency compares each frame's predicted center and
//!   embedding against exponentially decayed temporal aggregates of the
//!   earlier frames and sums `gamma^(t-k)`-weighted squared distances.
//! - Semantic consistency is mean `1 - cos` between predicted and matched
//!   ground-truth embeddings.
//! - Position consistency is the Complete-IoU loss between predicted and
//!   ground-truth boxes; its gradient is obtained with forward-mode dual
//!   numbers over the four predicted coordinates, so the analytic gradient
//!   matches finite differences of the exact same formula.
//!
//! The total is `TCL + alpha * SCL + beta * PCL`; when the weights are marked
//! trainable, `alpha`/`beta` are `softplus` of raw parameters and gradients
//! w.r.t. the raws are returned.

use crate::error::{Error, Result};
use crate::util::{sigmoid, softplus, softplus_inv};

/// One frame of one tracked object inside a loss batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub frame: usize,
    /// Predicted center in normalized units (2 or 3 components).
    pub center: Vec<f64>,
    /// Predicted-box embedding.
    pub embedding: Vec<f64>,
    /// Predicted box for the position loss, center format `[x, y, w, h]`.
    pub pred_box: Vec<f64>,
    /// Matched ground-truth box, same format.
    pub gt_box: Vec<f64>,
    /// Matched ground-truth embedding.
    pub gt_embedding: Vec<f64>,
}

/// A contiguous run of frames for one object.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectorySample {
    pub points: Vec<TrajectoryPoint>,
}

impl TrajectorySample {
    fn validate(&self) -> Result<()> {
        for w in self.points.windows(2) {
            if w[1].frame != w[0].frame + 1 {
                return Err(Error::Config(format!(
                    "trajectory frames not contiguous: {} then {}",
                    w[0].frame, w[1].frame
                )));
            }
            if w[1].center.len() != w[0].center.len()
                || w[1].embedding.len() != w[0].embedding.len()
            {
                return Err(Error::Config("trajectory point dimension mismatch".into()));
            }
        }
        for p in &self.points {
            if p.embedding.len() != p.gt_embedding.len() {
                return Err(Error::Config("embedding dimension mismatch".into()));
            }
        }
        Ok(())
    }
}

/// Loss weights; `gamma` decays the trajectory sum, `rho` the temporal
/// aggregate, `lambda` balances centers vs embeddings inside TCL, and
/// `alpha`/`beta` weight SCL/PCL in the total. With `trainable` set, alpha
/// and beta are `softplus(raw)` so they stay nonnegative during joint
/// optimization.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub gamma: f64,
    pub rho: f64,
    pub alpha_raw: f64,
    pub beta_raw: f64,
    pub trainable: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 1.0, gamma: 0.9, rho: 0.5, alpha_raw: 1.0, beta_raw: 1.0, trainable: false }
    }
}

impl LossWeights {
    /// Trainable weights starting at the given effective alpha/beta.
    pub fn trainable_init(alpha: f64, beta: f64) -> Self {
        Self {
            alpha_raw: softplus_inv(alpha),
            beta_raw: softplus_inv(beta),
            trainable: true,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must be in (0,1), got {}", self.gamma)));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho must be in (0,1], got {}", self.rho)));
        }
        if !self.trainable && (self.alpha_raw < 0.0 || self.beta_raw < 0.0) {
            return Err(Error::Config("fixed alpha/beta must be >= 0".into()));
        }
        if ![self.lambda, self.gamma, self.rho, self.alpha_raw, self.beta_raw]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Config("non-finite loss weights".into()));
        }
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        if self.trainable {
            softplus(self.alpha_raw)
        } else {
            self.alpha_raw
        }
    }

    pub fn beta(&self) -> f64 {
        if self.trainable {
            softplus(self.beta_raw)
        } else {
            self.beta_raw
        }
    }
}

/// Exponentially weighted running aggregate:
/// `agg_1 = x_1`, `agg_k = rho * x_k + (1 - rho) * agg_{k-1}`.
pub fn temporal_aggregate(values: &[Vec<f64>], rho: f64) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(values.len());
    for (k, v) in values.iter().enumerate() {
        if k == 0 {
            out.push(v.clone());
        } else {
            let prev = &out[k - 1];
            out.push(v.iter().zip(prev).map(|(x, a)| rho * x + (1.0 - rho) * a).collect());
        }
    }
    out
}

/// Per-sample, per-point gradients produced by [`tcl_with_grad`].
#[derive(Debug, Clone, Default)]
pub struct TclGrads {
    pub centers: Vec<Vec<Vec<f64>>>,
    pub embeddings: Vec<Vec<Vec<f64>>>,
}

/// Trajectory consistency loss over a batch of samples (mean over samples).
pub fn tcl(samples: &[TrajectorySample], w: &LossWeights) -> Result<f64> {
    Ok(tcl_with_grad(samples, w)?.0)
}

pub fn tcl_with_grad(samples: &[TrajectorySample], w: &LossWeights) -> Result<(f64, TclGrads)> {
    w.validate()?;
    let n = samples.len();
    let mut grads = TclGrads::default();
    if n == 0 {
        return Ok((0.0, grads));
    }
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;

    for sample in samples {
        sample.validate()?;
        let t_len = sample.points.len();
        let c_dim = sample.points.first().map_or(0, |p| p.center.len());
        let f_dim = sample.points.first().map_or(0, |p| p.embedding.len());
        let mut g_centers = vec![vec![0.0; c_dim]; t_len];
        let mut g_embeds = vec![vec![0.0; f_dim]; t_len];
        if t_len >= 2 {
            let centers: Vec<Vec<f64>> = sample.points.iter().map(|p| p.center.clone()).collect();
            let embeds: Vec<Vec<f64>> = sample.points.iter().map(|p| p.embedding.clone()).collect();
            let agg_c = temporal_aggregate(&centers, w.rho);
            let agg_f = temporal_aggregate(&embeds, w.rho);

            let mut g_agg_c = vec![vec![0.0; c_dim]; t_len];
            let mut g_agg_f = vec![vec![0.0; f_dim]; t_len];

            for t in 1..t_len {
                for k in 0..t {
                    let wgt = w.gamma.powi((t - k) as i32);
                    for d in 0..f_dim {
                        let diff = embeds[t][d] - agg_f[k][d];
                        total += inv_n * wgt * diff * diff;
                        g_embeds[t][d] += inv_n * wgt * 2.0 * diff;
                        g_agg_f[k][d] -= inv_n * wgt * 2.0 * diff;
                    }
                    for d in 0..c_dim {
                        let diff = centers[t][d] - agg_c[k][d];
                        total += inv_n * w.lambda * wgt * diff * diff;
                        g_centers[t][d] += inv_n * w.lambda * wgt * 2.0 * diff;
                        g_agg_c[k][d] -= inv_n * w.lambda * wgt * 2.0 * diff;
                    }
                }
            }

            // Reverse the aggregate recurrence.
            for k in (1..t_len).rev() {
                for d in 0..c_dim {
                    g_centers[k][d] += w.rho * g_agg_c[k][d];
                    g_agg_c[k - 1][d] += (1.0 - w.rho) * g_agg_c[k][d];
                }
                for d in 0..f_dim {
                    g_embeds[k][d] += w.rho * g_agg_f[k][d];
                    g_agg_f[k - 1][d] += (1.0 - w.rho) * g_agg_f[k][d];
                }
            }
            for d in 0..c_dim {
                g_centers[0][d] += g_agg_c[0][d];
            }
            for d in 0..f_dim {
                g_embeds[0][d] += g_agg_f[0][d];
            }
        }
        grads.centers.push(g_centers);
        grads.embeddings.push(g_embeds);
    }
    Ok((total, grads))
}

/// Semantic consistency: mean over pairs of `1 - cos(pred, gt)`.
pub fn scl(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<f64> {
    Ok(scl_with_grad(pred, gt)?.0)
}

pub fn scl_with_grad(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    if pred.len() != gt.len() {
        return Err(Error::Config("scl: pair count mismatch".into()));
    }
    if pred.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let m = pred.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(pred.len());
    for (f_hat, f) in pred.iter().zip(gt) {
        if f_hat.len() != f.len() {
            return Err(Error::Config("scl: embedding dimension mismatch".into()));
        }
        let np = f_hat.iter().map(|x| x * x).sum::<f64>().sqrt();
        let ng = f.iter().map(|x| x * x).sum::<f64>().sqrt();
        if np == 0.0 || ng == 0.0 {
            return Err(Error::Numeric("scl: zero-norm embedding".into()));
        }
        let dot = f_hat.iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
        let cos = dot / (np * ng);
        total += (1.0 - cos) / m;
        let g: Vec<f64> = f_hat
            .iter()
            .zip(f)
            .map(|(&fh, &fg)| -(fg / (np * ng) - cos * fh / (np * np)) / m)
            .collect();
        grads.push(g);
    }
    Ok((total, grads))
}

// ── Complete IoU via forward-mode duals ──────────────────────────────────

/// Value plus derivatives w.r.t. the four predicted box coordinates.
#[derive(Clone, Copy, Debug)]
struct Dual {
    v: f64,
    d: [f64; 4],
}

impl Dual {
    fn c(v: f64) -> Self {
        Self { v, d: [0.0; 4] }
    }
    fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; 4];
        d[i] = 1.0;
        Self { v, d }
    }
    fn add(self, o: Dual) -> Dual {
        Dual { v: self.v + o.v, d: std::array::from_fn(|i| self.d[i] + o.d[i]) }
    }
    fn sub(self, o: Dual) -> Dual {
        Dual { v: self.v - o.v, d: std::array::from_fn(|i| self.d[i] - o.d[i]) }
    }
    fn mul(self, o: Dual) -> Dual {
        Dual { v: self.v * o.v, d: std::array::from_fn(|i| self.d[i] * o.v + self.v * o.d[i]) }
    }
    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.v;
        Dual { v: self.v * inv, d: std::array::from_fn(|i| (self.d[i] - self.v * inv * o.d[i]) * inv) }
    }
    fn scale(self, s: f64) -> Dual {
        Dual { v: self.v * s, d: std::array::from_fn(|i| self.d[i] * s) }
    }
    fn max(self, o: Dual) -> Dual {
        if self.v >= o.v {
            self
        } else {
            o
        }
    }
    fn min(self, o: Dual) -> Dual {
        if self.v <= o.v {
            self
        } else {
            o
        }
    }
    fn relu(self) -> Dual {
        if self.v > 0.0 {
            self
        } else {
            Dual::c(0.0)
        }
    }
    fn sq(self) -> Dual {
        self.mul(self)
    }
    fn atan(self) -> Dual {
        let g = 1.0 / (1.0 + self.v * self.v);
        Dual { v: self.v.atan(), d: std::array::from_fn(|i| self.d[i] * g) }
    }
}

/// Complete IoU loss: `1 - IoU + rho^2/c^2 + alpha_v * v` with the standard
/// aspect-ratio term `v`; the aspect weight is differentiated through so the
/// gradient is exact for this formula.
pub fn ciou_loss(pred_box: &[f64], gt_box: &[f64]) -> f64 {
    ciou_loss_with_grad(pred_box, gt_box).0
}

/// CIoU and its exact gradient w.r.t. the predicted `[x, y, w, h]`.
pub fn ciou_loss_with_grad(pred_box: &[f64], gt_box: &[f64]) -> (f64, [f64; 4]) {
    debug_assert!(pred_box.len() >= 4 && gt_box.len() >= 4);
    let half = Dual::c(0.5);
    let (px, py) = (Dual::var(pred_box[0], 0), Dual::var(pred_box[1], 1));
    let (pw, ph) = (Dual::var(pred_box[2], 2), Dual::var(pred_box[3], 3));
    let (gx, gy) = (Dual::c(gt_box[0]), Dual::c(gt_box[1]));
    let (gw, gh) = (Dual::c(gt_box[2]), Dual::c(gt_box[3]));

    let (pl, pr) = (px.sub(pw.mul(half)), px.add(pw.mul(half)));
    let (pt, pb) = (py.sub(ph.mul(half)), py.add(ph.mul(half)));
    let (gl, gr) = (gx.sub(gw.mul(half)), gx.add(gw.mul(half)));
    let (gt_, gb) = (gy.sub(gh.mul(half)), gy.add(gh.mul(half)));

    let iw = pr.min(gr).sub(pl.max(gl)).relu();
    let ih = pb.min(gb).sub(pt.max(gt_)).relu();
    let inter = iw.mul(ih);
    let union = pw.mul(ph).add(gw.mul(gh)).sub(inter);
    let iou = inter.div(union);

    let cw = pr.max(gr).sub(pl.min(gl));
    let ch = pb.max(gb).sub(pt.min(gt_));
    let c2 = cw.sq().add(ch.sq());
    let rho2 = px.sub(gx).sq().add(py.sub(gy).sq());

    let four_over_pi2 = 4.0 / (std::f64::consts::PI * std::f64::consts::PI);
    let v = gw.div(gh).atan().sub(pw.div(ph).atan()).sq().scale(four_over_pi2);
    // Tiny guard keeps alpha finite (and exactly 0) for identical boxes.
    let alpha = v.div(Dual::c(1.0).sub(iou).add(v).add(Dual::c(1e-12)));

    let loss = Dual::c(1.0).sub(iou).add(rho2.div(c2)).add(alpha.mul(v));
    (loss.v, loss.d)
}

/// Per-term values for one [`total_loss`] evaluation.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub tcl: f64,
    pub scl: f64,
    pub pcl: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Gradients of the total loss w.r.t. every sample input and the raw
/// trainable weights.
#[derive(Debug, Clone, Default)]
pub struct TotalLossGrads {
    /// Per sample, per point, per center coordinate.
    pub centers: Vec<Vec<Vec<f64>>>,
    /// Per sample, per point, per embedding coordinate.
    pub embeddings: Vec<Vec<Vec<f64>>>,
    /// Per sample, per point, `[x, y, w, h]` of the predicted box.
    pub pred_boxes: Vec<Vec<[f64; 4]>>,
    pub alpha_raw: f64,
    pub beta_raw: f64,
}

/// `TCL + alpha * SCL + beta * PCL` with the per-term breakdown.
pub fn total_loss(samples: &[TrajectorySample], w: &LossWeights) -> Result<(f64, LossBreakdown)> {
    let (v, b, _) = total_loss_with_grad(samples, w)?;
    Ok((v, b))
}

pub fn total_loss_with_grad(
    samples: &[TrajectorySample],
    w: &LossWeights,
) -> Result<(f64, LossBreakdown, TotalLossGrads)> {
    w.validate()?;
    let (tcl_val, tcl_g) = tcl_with_grad(samples, w)?;

    // SCL/PCL run over every point of every sample.
    let mut pred_embeds = Vec::new();
    let mut gt_embeds = Vec::new();
    for s in samples {
        for p in &s.points {
            pred_embeds.push(p.embedding.clone());
            gt_embeds.push(p.gt_embedding.clone());
        }
    }
    let (scl_val, scl_g) = scl_with_grad(&pred_embeds, &gt_embeds)?;

    let n_points: usize = samples.iter().map(|s| s.points.len()).sum();
    let inv_m = if n_points > 0 { 1.0 / n_points as f64 } else { 0.0 };
    let mut pcl_val = 0.0;
    let mut pcl_g: Vec<Vec<[f64; 4]>> = Vec::with_capacity(samples.len());
    for s in samples {
        let mut per_point = Vec::with_capacity(s.points.len());
        for p in &s.points {
            let (v, g) = ciou_loss_with_grad(&p.pred_box, &p.gt_box);
            pcl_val += v * inv_m;
            per_point.push(std::array::from_fn(|i| g[i] * inv_m));
        }
        pcl_g.push(per_point);
    }

    let (alpha, beta) = (w.alpha(), w.beta());
    let total = tcl_val + alpha * scl_val + beta * pcl_val;
    let breakdown = LossBreakdown { total, tcl: tcl_val, scl: scl_val, pcl: pcl_val, alpha, beta };

    let mut grads = TotalLossGrads {
        centers: tcl_g.centers,
        embeddings: tcl_g.embeddings,
        pred_boxes: pcl_g,
        alpha_raw: if w.trainable { sigmoid(w.alpha_raw) * scl_val } else { 0.0 },
        beta_raw: if w.trainable { sigmoid(w.beta_raw) * pcl_val } else { 0.0 },
    };
    // Fold alpha * d(SCL) into the embedding grads and beta into the box grads.
    let mut flat_idx = 0;
    for (si, s) in samples.iter().enumerate() {
        for (pi, _) in s.points.iter().enumerate() {
            for (d, g) in scl_g[flat_idx].iter().enumerate() {
                grads.embeddings[si][pi][d] += alpha * g;
            }
            flat_idx += 1;
        }
    }
    for sample in &mut grads.pred_boxes {
        for point in sample.iter_mut() {
            for g in point.iter_mut() {
                *g *= beta;
            }
        }
    }
    Ok((total, breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;
    use rand::RngExt;

    fn point(frame: usize, center: [f64; 2], emb: &[f64], pb: [f64; 4], gb: [f64; 4]) -> TrajectoryPoint {
        TrajectoryPoint {
            frame,
            center: center.to_vec(),
            embedding: emb.to_vec(),
            pred_box: pb.to_vec(),
            gt_box: gb.to_vec(),
            gt_embedding: emb.to_vec(),
        }
    }

    #[test]
    fn aggregate_examples() {
        let c = vec![vec![3.0, -1.0]; 5];
        for a in temporal_aggregate(&c, 0.5) {
            assert_eq!(a, vec![3.0, -1.0]);
        }
        let seq = vec![vec![0.0], vec![1.0]];
        assert_eq!(temporal_aggregate(&seq, 1.0)[1], vec![1.0]);
        assert_eq!(temporal_aggregate(&seq, 0.5)[1], vec![0.5]);
    }

    #[test]
    fn tcl_zero_on_constant_trajectory() {
        let w = LossWeights::default();
        let emb = vec![0.3, -0.5, 0.8];
        let pts: Vec<TrajectoryPoint> = (0..6)
            .map(|f| point(f, [0.2, 0.4], &emb, [5.0, 5.0, 2.0, 2.0], [5.0, 5.0, 2.0, 2.0]))
            .collect();
        let samples = vec![TrajectorySample { points: pts }];
        assert!(tcl(&samples, &w).unwrap().abs() < 1e-12);
    }

    #[test]
    fn tcl_hand_example_t2() {
        // T=2, gamma=0.9, lambda=1, unit center jump, identical embeddings:
        // the aggregate at k=1 is the frame-1 value, so the sum is 0.9.
        let w = LossWeights { gamma: 0.9, lambda: 1.0, ..Default::default() };
        let emb = vec![1.0, 0.0];
        let pts = vec![
            point(0, [0.0, 0.0], &emb, [0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 1.0]),
            point(1, [1.0, 0.0], &emb, [0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 1.0]),
        ];
        let samples = vec![TrajectorySample { points: pts }];
        assert!((tcl(&samples, &w).unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn tcl_embedding_term_is_quadratic() {
        let w = LossWeights::default();
        let build = |scale: f64| {
            let bx = [0.0, 0.0, 1.0, 1.0];
            let pts = vec![
                point(0, [0.0, 0.0], &[scale, scale * 2.0], bx, bx),
                point(1, [0.0, 0.0], &[-scale, scale * 0.5], bx, bx),
                point(2, [0.0, 0.0], &[scale * 2.0, scale], bx, bx),
            ];
            vec![TrajectorySample { points: pts }]
        };
        let l1 = tcl(&build(1.0), &w).unwrap();
        let l2 = tcl(&build(2.0), &w).unwrap();
        assert!((l2 - 4.0 * l1).abs() < 1e-9 * l2.abs().max(1.0));
    }

    #[test]
    fn tcl_is_permutation_equivariant_and_single_frame_is_zero() {
        let w = LossWeights::default();
        let mut rng = seeded_rng(40);
        let mk = |rng: &mut crate::util::Rng| {
            let bx = [0.0, 0.0, 1.0, 1.0];
            let pts: Vec<TrajectoryPoint> = (0..4)
                .map(|f| {
                    point(
                        f,
                        [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                        &[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                        bx,
                        bx,
                    )
                })
                .collect();
            TrajectorySample { points: pts }
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        let c = mk(&mut rng);
        let fwd = tcl(&[a.clone(), b.clone(), c.clone()], &w).unwrap();
        let rev = tcl(&[c, a, b], &w).unwrap();
        assert!((fwd - rev).abs() < 1e-12);

        let single = TrajectorySample {
            points: vec![point(0, [1.0, 1.0], &[1.0, 0.0], [0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 1.0])],
        };
        assert_eq!(tcl(&[single], &w).unwrap(), 0.0);
    }

    #[test]
    fn tcl_increases_when_one_center_perturbed() {
        let w = LossWeights::default();
        let emb = vec![1.0, 0.0];
        let bx = [0.0, 0.0, 1.0, 1.0];
        let constant: Vec<TrajectoryPoint> =
            (0..5).map(|f| point(f, [0.5, 0.5], &emb, bx, bx)).collect();
        let base = tcl(&[TrajectorySample { points: constant.clone() }], &w).unwrap();
        for t in 0..5 {
            let mut pts = constant.clone();
            pts[t].center[0] += 0.3;
            let v = tcl(&[TrajectorySample { points: pts }], &w).unwrap();
            assert!(v > base + 1e-9, "perturbing frame {t} did not increase TCL");
        }
    }

    #[test]
    fn tcl_rejects_non_contiguous_frames() {
        let w = LossWeights::default();
        let bx = [0.0, 0.0, 1.0, 1.0];
        let pts = vec![point(0, [0.0, 0.0], &[1.0], bx, bx), point(2, [0.0, 0.0], &[1.0], bx, bx)];
        assert!(tcl(&[TrajectorySample { points: pts }], &w).is_err());
    }

    #[test]
    fn scl_examples() {
        let a = vec![vec![1.0, 0.0]];
        assert!(scl(&a, &a).unwrap().abs() < 1e-12);
        let anti = vec![vec![-1.0, 0.0]];
        assert!((scl(&a, &anti).unwrap() - 2.0).abs() < 1e-12);
        let orth = vec![vec![0.0, 1.0]];
        assert!((scl(&a, &orth).unwrap() - 1.0).abs() < 1e-12);
        assert!(scl(&a, &[vec![0.0, 0.0]]).is_err());
    }

    #[test]
    fn ciou_examples() {
        let b = [3.0, 4.0, 2.0, 5.0];
        assert!(ciou_loss(&b, &b).abs() < 1e-12);

        // Same size and aspect, centers offset: aspect term vanishes.
        let a = [0.0, 0.0, 4.0, 4.0];
        let c = [1.0, 0.0, 4.0, 4.0];
        let iou = crate::assoc::iou_2d(&a, &c);
        let c2 = 5.0f64 * 5.0 + 4.0 * 4.0;
        let expect = 1.0 - iou + 1.0 / c2;
        assert!((ciou_loss(&a, &c) - expect).abs() < 1e-9);

        // Hand case: centers (0,0)/(2,0), both 2x2. IoU 0 (touching edges),
        // enclosing box 4x2 -> c2 = 20, center distance^2 = 4, v = 0:
        // loss = 1 - 0 + 4/20 + 0 = 1.2.
        let p = [0.0, 0.0, 2.0, 2.0];
        let g = [2.0, 0.0, 2.0, 2.0];
        assert!((ciou_loss(&p, &g) - 1.2).abs() < 1e-9);
    }

    #[test]
    fn ciou_gradient_matches_finite_difference() {
        let mut rng = seeded_rng(50);
        let eps = 1e-6;
        for _ in 0..200 {
            let pred = [
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(1.0..6.0),
                rng.random_range(1.0..6.0),
            ];
            let gt = [
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(1.0..6.0),
                rng.random_range(1.0..6.0),
            ];
            let (_, g) = ciou_loss_with_grad(&pred, &gt);
            for i in 0..4 {
                let mut hi = pred;
                hi[i] += eps;
                let mut lo = pred;
                lo[i] -= eps;
                let fd = (ciou_loss(&hi, &gt) - ciou_loss(&lo, &gt)) / (2.0 * eps);
                let rel = (g[i] - fd).abs() / fd.abs().max(g[i].abs()).max(1e-6);
                assert!(rel < 1e-4, "coord {i}: analytic {} fd {fd}", g[i]);
            }
        }
    }

    #[test]
    fn total_loss_breakdown_and_degenerate_weights() {
        let mut rng = seeded_rng(60);
        let pts: Vec<TrajectoryPoint> = (0..4)
            .map(|f| {
                let center = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                TrajectoryPoint {
                    frame: f,
                    center: center.to_vec(),
                    embedding: vec![rng.random_range(0.1..1.0), rng.random_range(0.1..1.0)],
                    pred_box: vec![center[0] * 10.0, center[1] * 10.0, 4.0, 4.0],
                    gt_box: vec![center[0] * 10.0 + 0.5, center[1] * 10.0, 4.0, 4.0],
                    gt_embedding: vec![1.0, 0.5],
                }
            })
            .collect();
        let samples = vec![TrajectorySample { points: pts }];

        let zero =
            LossWeights { alpha_raw: 0.0, beta_raw: 0.0, trainable: false, ..Default::default() };
        let (tot, bd) = total_loss(&samples, &zero).unwrap();
        assert!((tot - bd.tcl).abs() < 1e-15);

        let w = LossWeights::default();
        let (tot, bd) = total_loss(&samples, &w).unwrap();
        assert!((tot - (bd.tcl + bd.alpha * bd.scl + bd.beta * bd.pcl)).abs() < 1e-12);
    }

    #[test]
    fn total_loss_zero_on_perfect_constant_input() {
        let emb = vec![0.4, 0.6];
        let pts: Vec<TrajectoryPoint> = (0..3)
            .map(|f| point(f, [0.1, 0.1], &emb, [1.0, 1.0, 3.0, 3.0], [1.0, 1.0, 3.0, 3.0]))
            .collect();
        let (tot, _) =
            total_loss(&[TrajectorySample { points: pts }], &LossWeights::default()).unwrap();
        assert!(tot.abs() < 1e-12);
    }

    #[test]
    fn total_loss_gradients_match_finite_differences() {
        let mut rng = seeded_rng(70);
        let mk = |rng: &mut crate::util::Rng| {
            let pts: Vec<TrajectoryPoint> = (0..3)
                .map(|f| TrajectoryPoint {
                    frame: f,
                    center: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                    embedding: vec![
                        rng.random_range(0.2..1.0),
                        rng.random_range(0.2..1.0),
                        rng.random_range(0.2..1.0),
                    ],
                    pred_box: vec![
                        rng.random_range(-3.0..3.0),
                        rng.random_range(-3.0..3.0),
                        rng.random_range(2.0..5.0),
                        rng.random_range(2.0..5.0),
                    ],
                    gt_box: vec![
                        rng.random_range(-3.0..3.0),
                        rng.random_range(-3.0..3.0),
                        rng.random_range(2.0..5.0),
                        rng.random_range(2.0..5.0),
                    ],
                    gt_embedding: vec![
                        rng.random_range(0.2..1.0),
                        rng.random_range(0.2..1.0),
                        rng.random_range(0.2..1.0),
                    ],
                })
                .collect();
            TrajectorySample { points: pts }
        };
        let mut samples = vec![mk(&mut rng), mk(&mut rng)];
        let w = LossWeights::trainable_init(0.8, 1.2);
        let (_, _, grads) = total_loss_with_grad(&samples, &w).unwrap();
        let eps = 1e-6;
        let mut checked = 0;
        for si in 0..samples.len() {
            for pi in 0..samples[si].points.len() {
                for (field, gvec) in [
                    (0usize, grads.centers[si][pi].clone()),
                    (1usize, grads.embeddings[si][pi].clone()),
                    (2usize, grads.pred_boxes[si][pi].to_vec()),
                ] {
                    for d in 0..gvec.len() {
                        let set = |s: &mut Vec<TrajectorySample>, v: f64| {
                            let p = &mut s[si].points[pi];
                            match field {
                                0 => p.center[d] = v,
                                1 => p.embedding[d] = v,
                                _ => p.pred_box[d] = v,
                            }
                        };
                        let orig = match field {
                            0 => samples[si].points[pi].center[d],
                            1 => samples[si].points[pi].embedding[d],
                            _ => samples[si].points[pi].pred_box[d],
                        };
                        set(&mut samples, orig + eps);
                        let hi = total_loss(&samples, &w).unwrap().0;
                        set(&mut samples, orig - eps);
                        let lo = total_loss(&samples, &w).unwrap().0;
                        set(&mut samples, orig);
                        let fd = (hi - lo) / (2.0 * eps);
                        let g = gvec[d];
                        let rel = (g - fd).abs() / fd.abs().max(g.abs()).max(1e-6);
                        assert!(rel < 1e-4, "field {field} d {d}: {g} vs {fd}");
                        checked += 1;
                    }
                }
            }
        }
        // 2 samples x 3 points x (2 center + 3 embedding + 4 box) coords.
        assert_eq!(checked, 54);

        // Raw weight gradients.
        let base_alpha = w.alpha_raw;
        let base_beta = w.beta_raw;
        for which in 0..2 {
            let mut wp = w.clone();
            if which == 0 {
                wp.alpha_raw = base_alpha + eps;
            } else {
                wp.beta_raw = base_beta + eps;
            }
            let hi = total_loss(&samples, &wp).unwrap().0;
            if which == 0 {
                wp.alpha_raw = base_alpha - eps;
            } else {
                wp.beta_raw = base_beta - eps;
            }
            let lo = total_loss(&samples, &wp).unwrap().0;
            let fd = (hi - lo) / (2.0 * eps);
            let g = if which == 0 { grads.alpha_raw } else { grads.beta_raw };
            assert!((g - fd).abs() / fd.abs().max(1e-6) < 1e-4, "raw {which}: {g} vs {fd}");
        }
    }
}
