//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! (run with `--nocapture` to see them). Criteria 7-9 share one trained
//! model and scenario suite through a lazily built fixture.

use std::sync::OnceLock;
use std::time::Instant;

use rand::RngExt;
use speedtrack::assoc::{solve_assignment, CostMatrix};
use speedtrack::formats::{build_eval_frames, perturb_speed, PerturbMode, ResultRow, SequenceBundle};
use speedtrack::kf::{self, Covariance, Observation, StateVector};
use speedtrack::losses::{ciou_loss, scl, tcl, total_loss, LossWeights, TrajectoryPoint, TrajectorySample};
use speedtrack::metrics::{
    buckets_around, default_alphas, evaluate, merge_bucket_stats, speed_bucket_analysis,
    BucketStats, EvalBox, EvalFrame,
};
use speedtrack::msnet::{param_count, ForwardTape, MsNetConfig, MsNetParams, OutputGrad};
use speedtrack::synth::{generate, ScenarioConfig};
use speedtrack::track::{run_sequence, FixedNoise, MsNetNoise, SpeedSource, TrackerConfig};
use speedtrack::train::{rollout_and_grad, train, RolloutConfig, TrainConfig};
use speedtrack::util::{seeded_rng, Rng};

fn check(criterion: usize, name: &str, ok: bool, detail: &str) {
    println!(
        "acceptance criterion {criterion} ({name}): {} — {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {criterion} ({name}) failed: {detail}");
}

// ── Criterion 1: filter correctness ─────────────────────────────────────

#[test]
fn criterion_1_filter_correctness() {
    let start = Instant::now();
    let mut rng = seeded_rng(101);

    // Scalar Bayes fusion: component 0 of a diagonal 8-dim filter behaves as
    // an independent scalar, compared against the closed form.
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let m = rng.random_range(-50.0..50.0);
        let p = rng.random_range(0.01..25.0);
        let z = rng.random_range(-50.0..50.0);
        let r = rng.random_range(0.01..25.0);
        let state = StateVector::new(vec![m, 0.0, 10.0, 10.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let mut diag = [1.0; 8];
        diag[0] = p;
        let cov = Covariance::from_diag(&diag).unwrap();
        let obs = Observation::new(vec![z, 0.0, 10.0, 10.0]).unwrap();
        let mut r_diag = [1.0; 4];
        r_diag[0] = r;
        let out = kf::update(&state, &cov, &obs, &r_diag, None).unwrap();
        let mean_ref = m + p / (p + r) * (z - m);
        let var_ref = p * r / (p + r);
        worst = worst.max((out.state.as_slice()[0] - mean_ref).abs());
        worst = worst.max((out.cov.matrix()[(0, 0)] - var_ref).abs());
    }

    // Covariance symmetry and PSD over random predict/update cycles,
    // alternating the Joseph and learned-override posterior paths.
    let mut state = StateVector::new(vec![0.0, 0.0, 20.0, 20.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let mut cov = Covariance::from_diag(&[4.0; 8]).unwrap();
    let mut psd_ok = true;
    for cycle in 0..10_000 {
        let q: Vec<f64> = (0..8).map(|_| rng.random_range(1e-3..2.0)).collect();
        let (s, c) = kf::predict(&state, &cov, &q, 1.0).unwrap();
        let z = Observation::new(vec![
            s.as_slice()[0] + rng.random_range(-5.0..5.0),
            s.as_slice()[1] + rng.random_range(-5.0..5.0),
            (s.as_slice()[2] + rng.random_range(-2.0..2.0)).max(1.0),
            (s.as_slice()[3] + rng.random_range(-2.0..2.0)).max(1.0),
        ])
        .unwrap();
        let r: Vec<f64> = (0..4).map(|_| rng.random_range(1e-3..4.0)).collect();
        let over = if cycle % 2 == 0 {
            let diag: Vec<f64> = (0..8).map(|_| rng.random_range(1e-3..4.0)).collect();
            Some(Covariance::from_diag(&diag).unwrap())
        } else {
            None
        };
        let out = kf::update(&s, &c, &z, &r, over.as_ref()).unwrap();
        state = out.state;
        cov = out.cov;
        let m = cov.matrix();
        for i in 0..8 {
            for j in (i + 1)..8 {
                let (a, b) = (m[(i, j)], m[(j, i)]);
                if (a - b).abs() > 1e-9 * (1.0 + a.abs() + b.abs()) {
                    psd_ok = false;
                }
            }
        }
        if cov.min_eigenvalue() < -1e-9 * cov.trace().max(1.0) {
            psd_ok = false;
        }
    }

    let secs = start.elapsed().as_secs_f64();
    check(
        1,
        "filter correctness",
        worst <= 1e-10 && psd_ok && secs < 10.0,
        &format!("scalar-fusion max err {worst:.2e}, PSD over 10k cycles {psd_ok}, {secs:.1}s"),
    );
}

// ── Criterion 2: assignment optimality ──────────────────────────────────

/// Exhaustive matching: maximize cardinality over gated cells, then
/// minimize total cost (independent of the production solver).
fn brute_force_assignment(cost: &CostMatrix, max_cost: f64) -> (usize, f64) {
    fn rec(
        cost: &CostMatrix,
        max_cost: f64,
        row: usize,
        used: &mut Vec<bool>,
        count: usize,
        total: f64,
        best: &mut (usize, f64),
    ) {
        if row == cost.rows() {
            if count > best.0 || (count == best.0 && total < best.1) {
                *best = (count, total);
            }
            return;
        }
        rec(cost, max_cost, row + 1, used, count, total, best);
        for j in 0..cost.cols() {
            if !used[j] && cost.at(row, j) <= max_cost {
                used[j] = true;
                rec(cost, max_cost, row + 1, used, count + 1, total + cost.at(row, j), best);
                used[j] = false;
            }
        }
    }
    let mut best = (0usize, f64::INFINITY);
    let mut used = vec![false; cost.cols()];
    rec(cost, max_cost, 0, &mut used, 0, 0.0, &mut best);
    if best.0 == 0 {
        best.1 = 0.0;
    }
    best
}

#[test]
fn criterion_2_assignment_optimality() {
    let start = Instant::now();
    let mut rng = seeded_rng(202);
    let mut worst = 0.0f64;
    let mut all_ok = true;
    for case in 0..1000 {
        let rows = rng.random_range(1..=7usize);
        let cols = rng.random_range(1..=7usize);
        let c = CostMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>()).unwrap();
        // Ungated half the time, gated otherwise.
        let gate = if case % 2 == 0 { 1.0 } else { rng.random_range(0.3..0.9) };
        let got = solve_assignment(&c, gate);
        let total: f64 = got.matches.iter().map(|&(i, j)| c.at(i, j)).sum();
        let (bc, bt) = brute_force_assignment(&c, gate);
        if got.matches.len() != bc {
            all_ok = false;
        }
        worst = worst.max((total - bt).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        2,
        "assignment optimality",
        all_ok && worst < 1e-12 && secs < 30.0,
        &format!("1000 matrices up to 7x7, max |cost diff| {worst:.2e}, {secs:.1}s"),
    );
}

// ── Criterion 3: gradient fidelity ──────────────────────────────────────

#[test]
fn criterion_3_gradient_fidelity() {
    let start = Instant::now();

    // Network backward vs central finite differences.
    let mut params = MsNetParams::init(MsNetConfig::default_2d(), 31).unwrap();
    let inputs = [45.0, 70.0, 55.0];
    let mut rng = seeded_rng(303);
    let w = OutputGrad {
        q: (0..8).map(|_| rng.random_range(-1.0..1.0)).collect(),
        r: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
        p: (0..8).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let mut tape = ForwardTape::new();
    params.forward(&inputs, Some(&mut tape)).unwrap();
    let mut grad = vec![0.0; params.len()];
    let mut gi = vec![0.0; 3];
    params.backward(&tape, &w, &mut grad, &mut gi).unwrap();
    let objective = |p: &MsNetParams| -> f64 {
        let out = p.forward(&inputs, None).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        dot(&w.q, &out.q_diag) + dot(&w.r, &out.r_diag) + dot(&w.p, &out.p_diag)
    };
    let eps = 1e-4;
    let mut net_worst = 0.0f64;
    for _ in 0..100 {
        let idx = rng.random_range(0..params.len());
        let orig = params.data()[idx];
        params.data_mut()[idx] = orig + eps;
        let hi = objective(&params);
        params.data_mut()[idx] = orig - eps;
        let lo = objective(&params);
        params.data_mut()[idx] = orig;
        let fd = (hi - lo) / (2.0 * eps);
        let rel = (grad[idx] - fd).abs() / fd.abs().max(grad[idx].abs()).max(1e-6);
        net_worst = net_worst.max(rel);
    }

    // Full rollout vs finite differences on a 5-frame toy sequence.
    let scen = ScenarioConfig {
        n_objects: 3,
        frames: 5,
        speed_profile: vec![20.0; 5],
        sigma0: 1.0,
        p0: 0.0,
        k_p: 0.0,
        low_score_frac: 0.0,
        object_speed: (0.2, 0.8),
        seed: 3,
        id: "fd_toy".into(),
        ..Default::default()
    };
    let bundle = generate(&scen).unwrap();
    let mut params = MsNetParams::init(MsNetConfig::default_2d(), 1).unwrap();
    let weights = LossWeights::trainable_init(1.0, 1.0);
    let rcfg = RolloutConfig::default();
    let out = rollout_and_grad(&bundle, &params, &weights, &rcfg).unwrap();
    let mut roll_worst = 0.0f64;
    for _ in 0..50 {
        let idx = rng.random_range(0..params.len());
        let orig = params.data()[idx];
        params.data_mut()[idx] = orig + eps;
        let hi = rollout_and_grad(&bundle, &params, &weights, &rcfg).unwrap().loss;
        params.data_mut()[idx] = orig - eps;
        let lo = rollout_and_grad(&bundle, &params, &weights, &rcfg).unwrap().loss;
        params.data_mut()[idx] = orig;
        let fd = (hi - lo) / (2.0 * eps);
        let g = out.grad_params[idx];
        let rel = (g - fd).abs() / fd.abs().max(g.abs()).max(1e-7);
        roll_worst = roll_worst.max(rel);
    }

    let secs = start.elapsed().as_secs_f64();
    check(
        3,
        "gradient fidelity",
        net_worst < 1e-4 && roll_worst < 1e-3 && secs < 60.0,
        &format!("network rel err {net_worst:.2e} (<1e-4), rollout rel err {roll_worst:.2e} (<1e-3), {secs:.1}s"),
    );
}

// ── Criterion 4: loss semantics ─────────────────────────────────────────

#[test]
fn criterion_4_loss_semantics() {
    let w = LossWeights::default();
    let emb = vec![0.5, -0.25, 0.8];
    let bx = [10.0, 20.0, 8.0, 6.0];
    let constant: Vec<TrajectoryPoint> = (0..5)
        .map(|f| TrajectoryPoint {
            frame: f,
            center: vec![0.3, 0.4],
            embedding: emb.clone(),
            pred_box: bx.to_vec(),
            gt_box: bx.to_vec(),
            gt_embedding: emb.clone(),
        })
        .collect();
    let samples = vec![TrajectorySample { points: constant }];
    let tcl_val = tcl(&samples, &w).unwrap();

    let a = vec![vec![2.0, 0.0, 1.0]];
    let scl_same = scl(&a, &a).unwrap();
    let scl_orth = scl(&a, &[vec![0.0, 1.0, 0.0]]).unwrap();
    let scl_anti = scl(&a, &[vec![-2.0, 0.0, -1.0]]).unwrap();

    let ciou_same = ciou_loss(&bx, &bx);

    let (total, bd) = total_loss(&samples, &LossWeights::trainable_init(0.7, 1.4)).unwrap();
    let recon = bd.tcl + bd.alpha * bd.scl + bd.beta * bd.pcl;

    let ok = tcl_val.abs() <= 1e-12
        && scl_same.abs() <= 1e-12
        && (scl_orth - 1.0).abs() <= 1e-12
        && (scl_anti - 2.0).abs() <= 1e-12
        && ciou_same.abs() <= 1e-12
        && (total - recon).abs() <= 1e-12;
    check(
        4,
        "loss semantics",
        ok,
        &format!(
            "TCL(const) {tcl_val:.1e}, SCL {{{scl_same:.1e}, {scl_orth:.6}, {scl_anti:.6}}}, CIoU(identical) {ciou_same:.1e}, breakdown residual {:.1e}",
            (total - recon).abs()
        ),
    );
}

// ── Criterion 5: metric oracle ──────────────────────────────────────────

/// Independent HOTA evaluator: the same published two-pass definition, with
/// per-frame optimal matching found by exhaustive enumeration instead of the
/// Hungarian solver, and all bookkeeping recomputed from scratch.
mod hota_oracle {
    use super::{EvalBox, EvalFrame};
    use std::collections::BTreeMap;

    fn iou(a: &[f64], b: &[f64]) -> f64 {
        let ov = |ca: f64, sa: f64, cb: f64, sb: f64| {
            ((ca + sa / 2.0).min(cb + sb / 2.0) - (ca - sa / 2.0).max(cb - sb / 2.0)).max(0.0)
        };
        let inter = ov(a[0], a[2], b[0], b[2]) * ov(a[1], a[3], b[1], b[3]);
        let union = a[2] * a[3] + b[2] * b[3] - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    fn sim(a: &EvalBox, b: &EvalBox) -> f64 {
        if a.class_id == b.class_id {
            iou(&a.bbox, &b.bbox)
        } else {
            0.0
        }
    }

    /// All injective partial matchings, maximizing the given score sum.
    fn best_matching(score: &[Vec<f64>]) -> Vec<(usize, usize)> {
        fn rec(
            score: &[Vec<f64>],
            row: usize,
            used: &mut Vec<bool>,
            cur: &mut Vec<(usize, usize)>,
            total: f64,
            best: &mut (f64, Vec<(usize, usize)>),
        ) {
            if row == score.len() {
                if total > best.0 {
                    *best = (total, cur.clone());
                }
                return;
            }
            rec(score, row + 1, used, cur, total, best);
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    cur.push((row, j));
                    rec(score, row + 1, used, cur, total + score[row][j], best);
                    cur.pop();
                    used[j] = false;
                }
            }
        }
        let cols = score.first().map_or(0, |r| r.len());
        let mut best = (f64::NEG_INFINITY, Vec::new());
        rec(score, 0, &mut vec![false; cols], &mut Vec::new(), 0.0, &mut best);
        best.1
    }

    pub fn hota(frames: &[EvalFrame], alphas: &[f64]) -> (f64, f64, f64) {
        let mut gt_ids = BTreeMap::new();
        let mut pr_ids = BTreeMap::new();
        for f in frames {
            for b in &f.gt {
                let n = gt_ids.len();
                gt_ids.entry(b.track_id).or_insert(n);
            }
            for b in &f.pred {
                let n = pr_ids.len();
                pr_ids.entry(b.track_id).or_insert(n);
            }
        }
        let (ng, np) = (gt_ids.len(), pr_ids.len());
        let gt_total: usize = frames.iter().map(|f| f.gt.len()).sum();
        let pr_total: usize = frames.iter().map(|f| f.pred.len()).sum();

        let mut potential = vec![vec![0.0; np]; ng];
        let mut gt_count = vec![0usize; ng];
        let mut pr_count = vec![0usize; np];
        for f in frames {
            let sims: Vec<Vec<f64>> =
                f.gt.iter().map(|g| f.pred.iter().map(|p| sim(g, p)).collect()).collect();
            for (i, g) in f.gt.iter().enumerate() {
                gt_count[gt_ids[&g.track_id]] += 1;
                for (j, p) in f.pred.iter().enumerate() {
                    let s = sims[i][j];
                    let denom = sims[i].iter().sum::<f64>()
                        + sims.iter().map(|r| r[j]).sum::<f64>()
                        - s;
                    if denom > f64::EPSILON {
                        potential[gt_ids[&g.track_id]][pr_ids[&p.track_id]] += s / denom;
                    }
                }
            }
            for p in &f.pred {
                pr_count[pr_ids[&p.track_id]] += 1;
            }
        }
        let align = |gi: usize, pi: usize| -> f64 {
            let denom = gt_count[gi] as f64 + pr_count[pi] as f64 - potential[gi][pi];
            if denom > 0.0 {
                potential[gi][pi] / denom
            } else {
                0.0
            }
        };

        let (mut hota_sum, mut deta_sum, mut assa_sum) = (0.0, 0.0, 0.0);
        for &alpha in alphas {
            let mut tp = 0usize;
            let mut matches = vec![vec![0usize; np]; ng];
            for f in frames {
                if f.gt.is_empty() || f.pred.is_empty() {
                    continue;
                }
                let score: Vec<Vec<f64>> =
                    f.gt.iter()
                        .map(|g| {
                            f.pred
                                .iter()
                                .map(|p| align(gt_ids[&g.track_id], pr_ids[&p.track_id]) * sim(g, p))
                                .collect()
                        })
                        .collect();
                for (i, j) in best_matching(&score) {
                    let s = sim(&f.gt[i], &f.pred[j]);
                    if s >= alpha - 1e-12 {
                        tp += 1;
                        matches[gt_ids[&f.gt[i].track_id]][pr_ids[&f.pred[j].track_id]] += 1;
                    }
                }
            }
            let deta = tp as f64 / (gt_total + pr_total - tp).max(1) as f64;
            let mut assa = 0.0;
            for gi in 0..ng {
                for pi in 0..np {
                    let m = matches[gi][pi] as f64;
                    if m > 0.0 {
                        assa += m * (m / (gt_count[gi] as f64 + pr_count[pi] as f64 - m));
                    }
                }
            }
            assa /= (tp as f64).max(1.0);
            hota_sum += (deta * assa).sqrt();
            deta_sum += deta;
            assa_sum += assa;
        }
        let n = alphas.len() as f64;
        (100.0 * hota_sum / n, 100.0 * deta_sum / n, 100.0 * assa_sum / n)
    }
}

fn random_toy_sequence(rng: &mut Rng) -> Vec<EvalFrame> {
    let n_gt = rng.random_range(1..=3usize);
    let n_pr = rng.random_range(0..=3usize);
    let frames = rng.random_range(1..=6usize);
    let mut out = Vec::new();
    for f in 0..frames {
        let mut frame = EvalFrame { frame: f, ego_speed: 0.0, gt: vec![], pred: vec![] };
        for id in 0..n_gt {
            if rng.random::<f64>() < 0.85 {
                frame.gt.push(EvalBox {
                    track_id: id as i64,
                    class_id: 0,
                    bbox: vec![
                        rng.random_range(0.0..40.0),
                        rng.random_range(0.0..40.0),
                        rng.random_range(4.0..14.0),
                        rng.random_range(4.0..14.0),
                    ],
                });
            }
        }
        for id in 0..n_pr {
            if rng.random::<f64>() < 0.85 {
                // Predictions perturb a ground-truth box when one exists, so
                // matches occur at varied IoU levels.
                let base = frame.gt.get(id % frame.gt.len().max(1)).map(|b| b.bbox.clone());
                let bbox = match base {
                    Some(mut b) => {
                        b[0] += rng.random_range(-4.0..4.0);
                        b[1] += rng.random_range(-4.0..4.0);
                        b[2] = (b[2] + rng.random_range(-2.0..2.0)).max(2.0);
                        b[3] = (b[3] + rng.random_range(-2.0..2.0)).max(2.0);
                        b
                    }
                    None => vec![
                        rng.random_range(0.0..40.0),
                        rng.random_range(0.0..40.0),
                        rng.random_range(4.0..14.0),
                        rng.random_range(4.0..14.0),
                    ],
                };
                frame.pred.push(EvalBox { track_id: 100 + id as i64, class_id: 0, bbox });
            }
        }
        out.push(frame);
    }
    out
}

#[test]
fn criterion_5_metric_oracle() {
    let mut rng = seeded_rng(505);
    let alphas = default_alphas();
    let mut worst = 0.0f64;
    for _ in 0..250 {
        let frames = random_toy_sequence(&mut rng);
        let got = evaluate(&frames, &alphas).unwrap();
        if got.vacuous {
            continue;
        }
        let (hota, deta, assa) = hota_oracle::hota(&frames, &alphas);
        worst = worst.max((got.hota - hota).abs());
        worst = worst.max((got.deta - deta).abs());
        worst = worst.max((got.assa - assa).abs());
    }

    // Perfect tracking scores exactly 100.
    let perfect: Vec<EvalFrame> = (0..4)
        .map(|f| {
            let boxes = vec![
                EvalBox { track_id: 1, class_id: 0, bbox: vec![f as f64, 0.0, 5.0, 5.0] },
                EvalBox { track_id: 2, class_id: 0, bbox: vec![f as f64 + 30.0, 8.0, 7.0, 4.0] },
            ];
            EvalFrame { frame: f, ego_speed: 0.0, gt: boxes.clone(), pred: boxes }
        })
        .collect();
    let p = evaluate(&perfect, &alphas).unwrap();

    let ok = worst < 1e-9 && (p.hota - 100.0).abs() < 1e-9;
    check(
        5,
        "metric oracle",
        ok,
        &format!("max |impl - brute force| {worst:.2e} over toy sequences, perfect HOTA {:.6}", p.hota),
    );
}

// ── Criterion 6: model size ─────────────────────────────────────────────

#[test]
fn criterion_6_model_size() {
    let n = param_count(&MsNetConfig::default_2d()).unwrap();
    let ok = (66_000..=90_000).contains(&n);
    check(6, "model size", ok, &format!("default 2D config has {n} parameters (band 66k-90k, target 78.2k)"));
}

// ── Shared fixture for criteria 7-9 ─────────────────────────────────────

struct Fixture {
    eval_suite: Vec<SequenceBundle>,
    baseline_stats: Vec<BucketStats>,
    trained: MsNetParams,
    trained_stats: Vec<BucketStats>,
    baseline_secs: f64,
    train_secs: f64,
    adapt_secs: f64,
}

fn speed_suite(seed_base: u64, per_speed: usize, frames: usize) -> Vec<SequenceBundle> {
    let mut out = Vec::new();
    for (si, &v) in [0.0, 20.0, 40.0, 60.0].iter().enumerate() {
        for k in 0..per_speed {
            let cfg = ScenarioConfig {
                id: format!("v{:02}_{:02}", v as usize, k),
                frames,
                seed: seed_base + (si * per_speed + k) as u64,
                ..Default::default()
            }
            .constant_speed(v);
            out.push(generate(&cfg).unwrap());
        }
    }
    out
}

fn bucket_stats_for<N: speedtrack::track::NoiseProvider>(
    suite: &[SequenceBundle],
    cfg: &TrackerConfig,
    mut noise_for: impl FnMut() -> N,
) -> (Vec<BucketStats>, Vec<Vec<ResultRow>>) {
    let buckets = buckets_around(&[0.0, 20.0, 40.0, 60.0], 5.0);
    let mut per_seq = Vec::new();
    let mut all_rows = Vec::new();
    for bundle in suite {
        let rows = run_sequence(bundle, cfg, noise_for(), SpeedSource::Synthetic).unwrap();
        let frames = build_eval_frames(bundle, &rows).unwrap();
        per_seq.push(speed_bucket_analysis(&frames, &buckets).unwrap());
        all_rows.push(rows);
    }
    (merge_bucket_stats(&per_seq).unwrap(), all_rows)
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let eval_suite = speed_suite(500, 5, 60);
        let tracker_cfg = TrackerConfig::default();

        let t0 = Instant::now();
        let (baseline_stats, _) =
            bucket_stats_for(&eval_suite, &tracker_cfg, FixedNoise::default);
        let baseline_secs = t0.elapsed().as_secs_f64();

        let train_suite = speed_suite(100, 3, 50);
        let train_cfg = TrainConfig {
            lr0: 0.01,
            total_epochs: 40,
            warmup_epochs: 4,
            batch_size: 4,
            seed: 7,
            ..Default::default()
        };
        let t1 = Instant::now();
        let trained = train(&train_suite, &MsNetConfig::default_2d(), &train_cfg).unwrap();
        let train_secs = t1.elapsed().as_secs_f64();

        let t2 = Instant::now();
        let (trained_stats, _) = bucket_stats_for(&eval_suite, &tracker_cfg, || {
            MsNetNoise::new(trained.params.clone(), 2).unwrap()
        });
        let adapt_secs = t2.elapsed().as_secs_f64();

        Fixture {
            eval_suite,
            baseline_stats,
            trained: trained.params,
            trained_stats,
            baseline_secs,
            train_secs,
            adapt_secs,
        }
    })
}

// ── Criterion 7: fixed-baseline speed degradation trend ─────────────────

#[test]
fn criterion_7_baseline_speed_trend() {
    let fx = fixture();
    let ious: Vec<f64> = fx.baseline_stats.iter().map(|s| s.mean_iou.unwrap_or(0.0)).collect();
    let rates: Vec<f64> = fx.baseline_stats.iter().map(|s| s.idsw_rate.unwrap_or(0.0)).collect();
    let iou_decreasing = ious.windows(2).all(|w| w[1] < w[0]);
    let rate_increasing = rates.windows(2).all(|w| w[1] > w[0]);
    let populated = fx.baseline_stats.iter().all(|s| s.matches > 0);
    let secs = fx.baseline_secs;
    check(
        7,
        "baseline speed trend",
        iou_decreasing && rate_increasing && populated && secs < 120.0,
        &format!(
            "bucket IoU {:?} strictly decreasing: {iou_decreasing}; IDSW rate {:?} strictly increasing: {rate_increasing}; {secs:.0}s",
            ious.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            rates.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    );
}

// ── Criterion 8: speed-adaptation gains ─────────────────────────────────

#[test]
fn criterion_8_speed_adaptation() {
    let fx = fixture();
    let base0 = fx.baseline_stats[0].mean_iou.unwrap();
    let base60 = fx.baseline_stats[3].mean_iou.unwrap();
    let ours0 = fx.trained_stats[0].mean_iou.unwrap();
    let ours60 = fx.trained_stats[3].mean_iou.unwrap();
    let rel60 = (ours60 - base60) / base60;
    let rel0 = (ours0 - base0) / base0;
    let idsw_ok = fx.trained_stats[3].idsw <= fx.baseline_stats[3].idsw;
    let total_secs = fx.train_secs + fx.adapt_secs + fx.baseline_secs;
    // The trained mapping must actually respond to speed.
    let slow = fx.trained.forward(&[0.0, 40.0, 35.0], None).unwrap();
    let fast = fx.trained.forward(&[60.0, 40.0, 35.0], None).unwrap();
    let speed_sensitive = slow
        .q_diag
        .iter()
        .zip(&fast.q_diag)
        .any(|(a, b)| (a - b).abs() > 1e-6 * (a.abs() + b.abs()));
    let ok =
        rel60 >= 0.05 && rel0.abs() <= 0.02 && idsw_ok && speed_sensitive && total_secs < 900.0;
    check(
        8,
        "speed adaptation",
        ok,
        &format!(
            "60 km/h bucket IoU {ours60:.3} vs baseline {base60:.3} ({:+.1}% rel, need >= +5%); 0 km/h {ours0:.3} vs {base0:.3} ({:+.1}% rel, need within 2%); IDSW@60 {} vs {}; train {:.0}s total {:.0}s",
            100.0 * rel60,
            100.0 * rel0,
            fx.trained_stats[3].idsw,
            fx.baseline_stats[3].idsw,
            fx.train_secs,
            total_secs
        ),
    );
}

// ── Criterion 9: speed-noise robustness ─────────────────────────────────

#[test]
fn criterion_9_speed_noise_robustness() {
    let fx = fixture();
    let start = Instant::now();
    let tracker_cfg = TrackerConfig::default();
    let alphas = default_alphas();
    let (mut clean_sum, mut pert_sum) = (0.0, 0.0);
    for bundle in &fx.eval_suite {
        let noise = MsNetNoise::new(fx.trained.clone(), 2).unwrap();
        let rows = run_sequence(bundle, &tracker_cfg, noise, SpeedSource::Synthetic).unwrap();
        clean_sum += evaluate(&build_eval_frames(bundle, &rows).unwrap(), &alphas).unwrap().hota;

        let mut perturbed = bundle.clone();
        perturbed.speeds = perturb_speed(&bundle.speeds, PerturbMode::Relative(0.20), 42).unwrap();
        let noise = MsNetNoise::new(fx.trained.clone(), 2).unwrap();
        let rows = run_sequence(&perturbed, &tracker_cfg, noise, SpeedSource::Perturbed).unwrap();
        pert_sum += evaluate(&build_eval_frames(bundle, &rows).unwrap(), &alphas).unwrap().hota;
    }
    let n = fx.eval_suite.len() as f64;
    let (clean, pert) = (clean_sum / n, pert_sum / n);
    let rel_drop = (clean - pert) / clean;
    let secs = start.elapsed().as_secs_f64();
    check(
        9,
        "speed-noise robustness",
        rel_drop <= 0.01 && secs < 300.0,
        &format!(
            "mean HOTA {clean:.3} clean vs {pert:.3} under 20% speed noise ({:+.2}% rel drop, budget 1%); {secs:.0}s",
            100.0 * rel_drop
        ),
    );
}

// ── Criterion 10: pipeline determinism ──────────────────────────────────

/// Run synth -> train -> track -> eval end to end into `root`, entirely
/// through the public file formats.
fn run_small_pipeline(root: &std::path::Path) {
    use speedtrack::formats::{read_bundle, write_bundle, write_results, ResultFormat};

    let mut bundle_dirs = Vec::new();
    for seed in 0..2u64 {
        let scen = ScenarioConfig {
            id: format!("pipe_{seed}"),
            frames: 20,
            n_objects: 4,
            seed,
            ..Default::default()
        }
        .constant_speed(30.0);
        let bundle = generate(&scen).unwrap();
        let dir = root.join(format!("bundles/pipe_{seed}"));
        write_bundle(&bundle, &dir).unwrap();
        bundle_dirs.push(dir);
    }

    let bundles: Vec<SequenceBundle> = bundle_dirs.iter().map(|d| read_bundle(d).unwrap()).collect();
    let cfg = TrainConfig {
        total_epochs: 3,
        warmup_epochs: 1,
        batch_size: 2,
        seed: 11,
        ..Default::default()
    };
    let trained = train(&bundles, &MsNetConfig::default_2d(), &cfg).unwrap();
    trained.params.save(&root.join("checkpoint.msn")).unwrap();

    let loaded = MsNetParams::load(&root.join("checkpoint.msn")).unwrap();
    let tracker_cfg = TrackerConfig::default();
    std::fs::create_dir_all(root.join("results")).unwrap();
    let mut reports = Vec::new();
    for bundle in &bundles {
        let noise = MsNetNoise::new(loaded.clone(), 2).unwrap();
        let rows = run_sequence(bundle, &tracker_cfg, noise, SpeedSource::File).unwrap();
        write_results(&rows, &root.join(format!("results/{}.jsonl", bundle.id)), ResultFormat::Jsonl)
            .unwrap();
        let frames = build_eval_frames(bundle, &rows).unwrap();
        reports.push((bundle.id.clone(), evaluate(&frames, &default_alphas()).unwrap()));
    }
    let doc = serde_json::json!({
        "sequences": reports
            .iter()
            .map(|(id, r)| (id.clone(), serde_json::to_value(r).unwrap()))
            .collect::<std::collections::BTreeMap<_, _>>(),
    });
    std::fs::write(root.join("report.json"), serde_json::to_vec_pretty(&doc).unwrap()).unwrap();
}

fn collect_files(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_10_pipeline_determinism() {
    let base = std::env::temp_dir().join("speedtrack_acceptance_determinism");
    let _ = std::fs::remove_dir_all(&base);
    let (a, b) = (base.join("run_a"), base.join("run_b"));
    run_small_pipeline(&a);
    run_small_pipeline(&b);
    let fa = collect_files(&a);
    let fb = collect_files(&b);
    let names_match = fa.iter().map(|(n, _)| n).eq(fb.iter().map(|(n, _)| n));
    let mut diff = Vec::new();
    for ((na, ba), (_, bb)) in fa.iter().zip(&fb) {
        if ba != bb {
            diff.push(na.clone());
        }
    }
    let ok = names_match && diff.is_empty() && fa.len() >= 12;
    check(
        10,
        "pipeline determinism",
        ok,
        &format!("{} files compared, differing: {diff:?}", fa.len()),
    );
    let _ = std::fs::remove_dir_all(&base);
}
