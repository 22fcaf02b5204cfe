//! Synthetic ego-motion scenarios: constant-velocity 3D objects observed by
//! a forward-facing pinhole camera on a moving ego vehicle, with
//! speed-dependent detection noise and dropout.
//!
//! World frame: x forward (direction of travel at zero yaw), y left, z up.
//! The camera sits at ego position, height 1.6 m, looking along the heading.
//! Detection center/size noise grows as `sigma(v) = sigma0 + k_v * v` and the
//! dropout probability as `p_drop(v) = p0 + k_p * v`, so a tracker with fixed
//! noise covariances degrades as the speed profile rises while the geometry
//! itself stays exact. Generation is a pure function of the config (seed
//! included), and the emitted [`SequenceBundle`] is byte-compatible with the
//! file layouts in [`crate::formats`].

use crate::assoc::Detection;
use crate::error::{Error, Result};
use crate::formats::{EmbeddingTable, GtBox, SequenceBundle};
use crate::util::{gauss, seeded_rng, Rng};
use rand::RngExt;

/// Pinhole camera with orthonormal world-to-camera rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    /// Rows are the camera axes (right, down, forward) in world coordinates.
    pub rotation: [[f64; 3]; 3],
    /// Camera center in world coordinates (meters).
    pub translation: [f64; 3],
    /// Focal length in pixels.
    pub focal: f64,
    pub principal: (f64, f64),
    pub image_size: (u32, u32),
}

impl CameraPose {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) {
            return Err(Error::Config(format!("focal must be > 0, got {}", self.focal)));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-9 {
                    return Err(Error::Config("camera rotation is not orthonormal".into()));
                }
            }
        }
        Ok(())
    }

    /// Forward-driving pose: camera at `(x, y, 1.6)` looking along the
    /// heading `yaw` (radians, 0 = +x).
    pub fn forward_driving(pos: [f64; 2], yaw: f64, focal: f64, image_size: (u32, u32)) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            // right = -left, down = -up, forward = heading.
            rotation: [[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]],
            translation: [pos[0], pos[1], 1.6],
            focal,
            principal: (image_size.0 as f64 / 2.0, image_size.1 as f64 / 2.0),
            image_size,
        }
    }
}

/// Image-plane box produced by [`project`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub depth: f64,
}

/// Pinhole projection of a world point carrying a physical (width, height).
/// Returns `None` when the point is behind the camera (depth <= 0.1 m),
/// which callers treat as "invisible this frame".
pub fn project(p_world: [f64; 3], size_wh: (f64, f64), cam: &CameraPose) -> Option<ProjectedBox> {
    let d = [
        p_world[0] - cam.translation[0],
        p_world[1] - cam.translation[1],
        p_world[2] - cam.translation[2],
    ];
    let r = &cam.rotation;
    let x = r[0][0] * d[0] + r[0][1] * d[1] + r[0][2] * d[2];
    let y = r[1][0] * d[0] + r[1][1] * d[1] + r[1][2] * d[2];
    let z = r[2][0] * d[0] + r[2][1] * d[1] + r[2][2] * d[2];
    if z <= 0.1 {
        return None;
    }
    Some(ProjectedBox {
        cx: cam.principal.0 + cam.focal * x / z,
        cy: cam.principal.1 + cam.focal * y / z,
        w: cam.focal * size_wh.0 / z,
        h: cam.focal * size_wh.1 / z,
        depth: z,
    })
}

/// Inverse of [`project`] for the center ray: image point plus depth back to
/// the world point.
pub fn unproject(cx: f64, cy: f64, depth: f64, cam: &CameraPose) -> [f64; 3] {
    let xc = (cx - cam.principal.0) / cam.focal * depth;
    let yc = (cy - cam.principal.1) / cam.focal * depth;
    let r = &cam.rotation;
    // R^T * [xc, yc, depth] + t.
    [
        r[0][0] * xc + r[1][0] * yc + r[2][0] * depth + cam.translation[0],
        r[0][1] * xc + r[1][1] * yc + r[2][1] * depth + cam.translation[1],
        r[0][2] * xc + r[1][2] * yc + r[2][2] * depth + cam.translation[2],
    ]
}

/// Full description of one synthetic scenario.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScenarioConfig {
    pub id: String,
    /// 2 emits image-plane boxes, 3 emits ego-frame metric boxes.
    pub dims: usize,
    pub n_objects: usize,
    pub frames: usize,
    pub frame_rate: f64,
    /// Ego speed per frame, km/h (piecewise-constant profiles are typical).
    pub speed_profile: Vec<f64>,
    /// Object speed magnitude range, m/s.
    pub object_speed: (f64, f64),
    /// Physical size ranges, meters.
    pub size_w: (f64, f64),
    pub size_h: (f64, f64),
    pub size_l: (f64, f64),
    /// Detection noise: sigma(v) = sigma0 + k_v * v, pixels (2D).
    pub sigma0: f64,
    pub k_v: f64,
    /// Dropout: p_drop(v) = p0 + k_p * v, clamped to [0, 0.9].
    pub p0: f64,
    pub k_p: f64,
    /// 3D noise: sigma3(v) = sigma3_0 + k3_v * v, meters.
    pub sigma3_0: f64,
    pub k3_v: f64,
    /// Fraction of detections emitted with a low confidence score.
    pub low_score_frac: f64,
    pub embedding_dim: usize,
    pub embed_jitter: f64,
    /// Ego turn rate, degrees per second (0 isolates the pure speed effect).
    pub yaw_rate_deg: f64,
    pub focal: f64,
    pub image_size: (u32, u32),
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            id: "synth".into(),
            dims: 2,
            n_objects: 8,
            frames: 60,
            frame_rate: 10.0,
            speed_profile: vec![0.0; 60],
            object_speed: (0.0, 2.0),
            size_w: (1.6, 2.0),
            size_h: (1.4, 1.8),
            size_l: (3.8, 4.6),
            sigma0: 2.0,
            k_v: 0.15,
            p0: 0.02,
            k_p: 0.002,
            sigma3_0: 0.05,
            k3_v: 0.004,
            low_score_frac: 0.1,
            embedding_dim: 32,
            embed_jitter: 0.02,
            yaw_rate_deg: 0.0,
            focal: 720.0,
            image_size: (1242, 375),
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    /// Constant-speed scenario helper.
    pub fn constant_speed(mut self, v_kmh: f64) -> Self {
        self.speed_profile = vec![v_kmh; self.frames];
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims != 2 && self.dims != 3 {
            return Err(Error::Config("dims must be 2 or 3".into()));
        }
        if self.frames == 0 || self.speed_profile.len() != self.frames {
            return Err(Error::Config(format!(
                "speed profile length {} must equal frames {}",
                self.speed_profile.len(),
                self.frames
            )));
        }
        if self.sigma0 < 0.0 || self.k_v < 0.0 || self.sigma3_0 < 0.0 || self.k3_v < 0.0 {
            return Err(Error::Config("noise coefficients must be >= 0".into()));
        }
        if self.speed_profile.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::Config("speeds must be finite and >= 0".into()));
        }
        if !(self.frame_rate > 0.0) || !(self.focal > 0.0) {
            return Err(Error::Config("frame_rate and focal must be > 0".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn sigma(&self, v: f64) -> f64 {
        self.sigma0 + self.k_v * v
    }

    pub fn sigma3(&self, v: f64) -> f64 {
        self.sigma3_0 + self.k3_v * v
    }

    pub fn p_drop(&self, v: f64) -> f64 {
        (self.p0 + self.k_p * v).clamp(0.0, 0.9)
    }
}

struct WorldObject {
    pos0: [f64; 3],
    vel: [f64; 3],
    size: [f64; 3], // (w lateral, h up, l forward)
    embedding: Vec<f64>,
}

fn intersection_area(a: &[f64], b: &[f64]) -> f64 {
    let overlap = |ca: f64, sa: f64, cb: f64, sb: f64| -> f64 {
        let lo = (ca - sa / 2.0).max(cb - sb / 2.0);
        let hi = (ca + sa / 2.0).min(cb + sb / 2.0);
        (hi - lo).max(0.0)
    };
    overlap(a[0], a[2], b[0], b[2]) * overlap(a[1], a[3], b[1], b[3])
}

fn sample_unit_vector(rng: &mut Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| gauss(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// Generate a full scenario bundle: exact ground truth from projection,
/// noisy detections, per-frame speeds, and per-track embeddings.
pub fn generate(cfg: &ScenarioConfig) -> Result<SequenceBundle> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed);
    let dt = 1.0 / cfg.frame_rate;

    // Ego trajectory (piecewise-constant speed, optional constant yaw rate).
    let yaw_rate = cfg.yaw_rate_deg.to_radians();
    let mut ego_pos = vec![[0.0f64; 2]; cfg.frames];
    let mut ego_yaw = vec![0.0f64; cfg.frames];
    for t in 1..cfg.frames {
        let v_mps = cfg.speed_profile[t - 1] / 3.6;
        let yaw = ego_yaw[t - 1];
        ego_pos[t] = [
            ego_pos[t - 1][0] + v_mps * dt * yaw.cos(),
            ego_pos[t - 1][1] + v_mps * dt * yaw.sin(),
        ];
        ego_yaw[t] = yaw + yaw_rate * dt;
    }
    let travel = cfg.speed_profile.iter().map(|v| v / 3.6 * dt).sum::<f64>();
    let span = travel + 60.0;

    // Objects: placed along the road ahead with a minimum spacing, constant
    // 3D velocity.
    let mut objects: Vec<WorldObject> = Vec::with_capacity(cfg.n_objects);
    for _ in 0..cfg.n_objects {
        let (mut x0, mut y0) = (0.0, 0.0);
        for attempt in 0..32 {
            x0 = 15.0 + rng.random::<f64>() * span;
            y0 = rng.random_range(-9.0..9.0);
            let clear = objects.iter().all(|o: &WorldObject| {
                let dx = o.pos0[0] - x0;
                let dy = o.pos0[1] - y0;
                (dx * dx + dy * dy).sqrt() >= 5.0
            });
            if clear || attempt == 31 {
                break;
            }
        }
        let w = rng.random_range(cfg.size_w.0..=cfg.size_w.1);
        let h = rng.random_range(cfg.size_h.0..=cfg.size_h.1);
        let l = rng.random_range(cfg.size_l.0..=cfg.size_l.1);
        let mag = rng.random_range(cfg.object_speed.0..=cfg.object_speed.1);
        let dir = if rng.random::<f64>() < 0.7 { 1.0 } else { -1.0 };
        let vy = rng.random_range(-0.2..0.2) * mag;
        objects.push(WorldObject {
            pos0: [x0, y0, h / 2.0],
            vel: [dir * mag, vy, 0.0],
            size: [w, h, l],
            embedding: sample_unit_vector(&mut rng, cfg.embedding_dim),
        });
    }

    let mut detections: Vec<Vec<Detection>> = vec![Vec::new(); cfg.frames];
    let mut gt: Vec<Vec<GtBox>> = vec![Vec::new(); cfg.frames];
    let mut embeddings = EmbeddingTable::new(cfg.embedding_dim);

    for t in 0..cfg.frames {
        let v = cfg.speed_profile[t];
        let cam = CameraPose::forward_driving(ego_pos[t], ego_yaw[t], cfg.focal, cfg.image_size);

        // Visibility pass: projection / range checks plus, in 2D, occlusion
        // culling (an object mostly covered by a nearer one is invisible).
        let mut candidates: Vec<Option<(Vec<f64>, f64)>> = Vec::with_capacity(objects.len());
        for obj in &objects {
            let p = [
                obj.pos0[0] + obj.vel[0] * t as f64 * dt,
                obj.pos0[1] + obj.vel[1] * t as f64 * dt,
                obj.pos0[2] + obj.vel[2] * t as f64 * dt,
            ];
            let cand = if cfg.dims == 2 {
                project(p, (obj.size[0], obj.size[1]), &cam).and_then(|pb| {
                    let (iw, ih) = (cfg.image_size.0 as f64, cfg.image_size.1 as f64);
                    let inside = pb.cx >= 0.0
                        && pb.cx <= iw
                        && pb.cy >= 0.0
                        && pb.cy <= ih
                        && pb.w >= 2.0
                        && pb.h >= 2.0;
                    inside.then(|| (vec![pb.cx, pb.cy, pb.w, pb.h], pb.depth))
                })
            } else {
                // Ego frame: x forward along heading, y left, z up.
                let (s, c) = ego_yaw[t].sin_cos();
                let dx = p[0] - ego_pos[t][0];
                let dy = p[1] - ego_pos[t][1];
                let rel = [c * dx + s * dy, -s * dx + c * dy, p[2]];
                (rel[0] > 0.5 && rel[0] <= 90.0 && rel[1].abs() <= 40.0).then(|| {
                    (vec![rel[0], rel[1], rel[2], obj.size[0], obj.size[1], obj.size[2]], rel[0])
                })
            };
            candidates.push(cand);
        }
        if cfg.dims == 2 {
            let snapshot = candidates.clone();
            for (i, cand) in candidates.iter_mut().enumerate() {
                let Some((bbox, depth)) = cand else { continue };
                let covered = snapshot.iter().enumerate().any(|(j, other)| {
                    let Some((ob, od)) = other else { return false };
                    if j == i || *od >= *depth {
                        return false;
                    }
                    let own = bbox[2] * bbox[3];
                    own > 0.0 && intersection_area(bbox, ob) / own > 0.6
                });
                if covered {
                    *cand = None;
                }
            }
        }

        for (i, cand) in candidates.into_iter().enumerate() {
            let Some((bbox, _)) = cand else { continue };
            let obj = &objects[i];
            gt[t].push(GtBox { track_id: i as i64, class_id: 0, bbox: bbox.clone(), dont_care: false });
            embeddings.insert(t, i as i64, obj.embedding.clone())?;

            if rng.random::<f64>() < cfg.p_drop(v) {
                continue;
            }
            let sigma = if cfg.dims == 2 { cfg.sigma(v) } else { cfg.sigma3(v) };
            let size_floor = if cfg.dims == 2 { 1.0 } else { 0.05 };
            let mut noisy = bbox.clone();
            for x in noisy.iter_mut() {
                *x += sigma * gauss(&mut rng);
            }
            for s in crate::kf::size_indices(noisy.len()) {
                if noisy[s] < size_floor {
                    noisy[s] = size_floor;
                }
            }
            let score = if rng.random::<f64>() < cfg.low_score_frac {
                rng.random_range(0.15..0.55)
            } else {
                rng.random_range(0.70..1.0)
            };
            let det_embedding: Vec<f64> =
                obj.embedding.iter().map(|e| e + cfg.embed_jitter * gauss(&mut rng)).collect();
            detections[t].push(Detection {
                frame: t,
                class_id: 0,
                score,
                bbox: noisy,
                embedding: Some(det_embedding),
            });
        }
    }

    Ok(SequenceBundle {
        id: cfg.id.clone(),
        frames: cfg.frames,
        dims: cfg.dims,
        image_size: (cfg.dims == 2).then_some(cfg.image_size),
        scene_bounds: (cfg.dims == 3).then(|| vec![0.0, span, -40.0, 40.0, 0.0, 5.0]),
        detections,
        gt: Some(gt),
        speeds: cfg.speed_profile.clone(),
        speeds_padded: false,
        embeddings: Some(embeddings),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis_cam(focal: f64) -> CameraPose {
        CameraPose {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
            focal,
            principal: (0.0, 0.0),
            image_size: (1000, 1000),
        }
    }

    #[test]
    fn project_hand_cases() {
        let cam = axis_cam(500.0);
        cam.validate().unwrap();
        // Point on the optical axis lands at the principal point.
        let pb = project([0.0, 0.0, 10.0], (1.0, 1.0), &cam).unwrap();
        assert_eq!(pb.cx, 0.0);
        assert_eq!(pb.cy, 0.0);
        // f * X / Z: 500 * 1 / 10 = 50 px.
        let pb = project([1.0, 0.0, 10.0], (1.0, 1.0), &cam).unwrap();
        assert!((pb.cx - 50.0).abs() < 1e-12);
        // Doubling depth halves apparent size.
        let near = project([0.0, 0.0, 10.0], (2.0, 1.0), &cam).unwrap();
        let far = project([0.0, 0.0, 20.0], (2.0, 1.0), &cam).unwrap();
        assert!((near.w / far.w - 2.0).abs() < 1e-12);
        // Behind the camera: invisible.
        assert!(project([0.0, 0.0, -5.0], (1.0, 1.0), &cam).is_none());
    }

    #[test]
    fn unproject_recovers_projected_points() {
        let cam = CameraPose::forward_driving([3.0, -1.0], 0.2, 720.0, (1242, 375));
        cam.validate().unwrap();
        let mut rng = seeded_rng(8);
        for _ in 0..500 {
            let p = [
                rng.random_range(5.0..60.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(0.0..3.0),
            ];
            if let Some(pb) = project(p, (1.0, 1.0), &cam) {
                let back = unproject(pb.cx, pb.cy, pb.depth, &cam);
                for i in 0..3 {
                    assert!((back[i] - p[i]).abs() < 1e-9, "coord {i}: {} vs {}", back[i], p[i]);
                }
            }
        }
    }

    #[test]
    fn bad_rotation_rejected() {
        let mut cam = axis_cam(500.0);
        cam.rotation[0][0] = 1.5;
        assert!(cam.validate().is_err());
    }

    #[test]
    fn noiseless_static_scenario_detections_equal_gt() {
        let cfg = ScenarioConfig {
            sigma0: 0.0,
            k_v: 0.0,
            p0: 0.0,
            k_p: 0.0,
            low_score_frac: 0.0,
            object_speed: (0.0, 0.0),
            seed: 5,
            ..Default::default()
        };
        let bundle = generate(&cfg).unwrap();
        let gt = bundle.gt.as_ref().unwrap();
        for t in 0..bundle.frames {
            assert_eq!(bundle.detections[t].len(), gt[t].len());
            for (d, g) in bundle.detections[t].iter().zip(&gt[t]) {
                assert_eq!(d.bbox, g.bbox);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = ScenarioConfig { seed: 42, ..Default::default() }.constant_speed(40.0);
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
    }

    fn mean_gt_displacement(bundle: &SequenceBundle) -> f64 {
        let gt = bundle.gt.as_ref().unwrap();
        let mut total = 0.0;
        let mut count = 0usize;
        for t in 1..bundle.frames {
            for cur in &gt[t] {
                if let Some(prev) = gt[t - 1].iter().find(|p| p.track_id == cur.track_id) {
                    let dx = cur.bbox[0] - prev.bbox[0];
                    let dy = cur.bbox[1] - prev.bbox[1];
                    total += (dx * dx + dy * dy).sqrt();
                    count += 1;
                }
            }
        }
        total / count.max(1) as f64
    }

    #[test]
    fn higher_speed_means_larger_gt_displacement() {
        let base = ScenarioConfig { seed: 7, n_objects: 10, ..Default::default() };
        let slow = generate(&base.clone().constant_speed(0.0)).unwrap();
        let fast = generate(&base.constant_speed(60.0)).unwrap();
        let d0 = mean_gt_displacement(&slow);
        let d60 = mean_gt_displacement(&fast);
        assert!(d60 > d0, "displacement {d60} at 60 km/h vs {d0} at 0");
    }

    #[test]
    fn noise_calibration_matches_sigma() {
        // Parked ego, no dropout: detections pair positionally with GT, and
        // the empirical center-noise std must land within 2% of sigma(v).
        let frames = 6000;
        let cfg = ScenarioConfig {
            n_objects: 40,
            frames,
            speed_profile: vec![0.0; frames],
            object_speed: (0.0, 0.0),
            p0: 0.0,
            k_p: 0.0,
            seed: 11,
            ..Default::default()
        };
        let sigma = cfg.sigma(0.0);
        let bundle = generate(&cfg).unwrap();
        let gt = bundle.gt.as_ref().unwrap();
        let mut samples = Vec::new();
        for t in 0..bundle.frames {
            assert_eq!(bundle.detections[t].len(), gt[t].len());
            for (d, g) in bundle.detections[t].iter().zip(&gt[t]) {
                samples.push(d.bbox[0] - g.bbox[0]);
                samples.push(d.bbox[1] - g.bbox[1]);
            }
        }
        assert!(samples.len() >= 100_000, "only {} samples", samples.len());
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var =
            samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / samples.len() as f64;
        let std = var.sqrt();
        assert!((std - sigma).abs() / sigma < 0.02, "std {std} vs sigma {sigma}");
    }
}
