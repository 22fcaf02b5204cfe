//! Per-frame tracking orchestration: noise-adaptive predict, two-stage
//! association, noise-adaptive update, and a speed-scaled track lifecycle.
//!
//! The prediction stage queries the noise provider with the previous frame's
//! speed and the track's own posterior sizes; the update stage queries it
//! with the current speed and the matched detection's sizes. Unmatched
//! (Lost) tracks keep coasting on predictions so they can be re-associated
//! until their speed-scaled lifetime runs out.

use std::collections::VecDeque;

use crate::assoc::{two_stage_associate, Detection, TwoStageConfig};
use crate::error::{Error, Result};
use crate::formats::{ResultRow, SequenceBundle};
use crate::kf::{self, Covariance, Observation, StateVector};
use crate::msnet::MsNetParams;

/// Lifecycle stages: Tentative -> {Confirmed, Removed}, Confirmed <-> Lost,
/// Lost -> Removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStage {
    Tentative,
    Confirmed,
    Lost,
    Removed,
}

/// Ego speed sample with provenance; negative inputs clamp to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoSpeed {
    pub v: f64,
    pub source: SpeedSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpeedSource {
    File,
    Synthetic,
    Perturbed,
}

impl EgoSpeed {
    pub fn new(v: f64, source: SpeedSource) -> Self {
        Self { v: v.max(0.0), source }
    }
}

/// Posterior snapshot stored per frame for the consistency losses.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryPoint {
    pub frame: usize,
    pub center: Vec<f64>,
    pub bbox: Vec<f64>,
    pub embedding: Option<Vec<f64>>,
}

/// One tracked object.
#[derive(Debug, Clone)]
pub struct Track {
    pub id: u64,
    pub class_id: i32,
    pub state: StateVector,
    pub cov: Covariance,
    pub stage: TrackStage,
    pub hits: u32,
    pub misses: u32,
    pub history: VecDeque<HistoryPoint>,
}

/// Tracker settings; defaults follow the two-stage tracker lineage.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrackerConfig {
    pub dims: usize,
    pub two_stage: TwoStageConfig,
    /// Base track lifetime A0 in frames (maximum coasting at v = 0).
    pub base_age: u32,
    /// Speed at which the lifetime reaches its floor, km/h.
    pub v_ref: f64,
    /// Lifetime floor as a fraction of base_age.
    pub min_age_frac: f64,
    /// Consecutive hits required to confirm a tentative track.
    pub confirm_hits: u32,
    /// Variance multiplier for the unobserved rate entries at track birth.
    pub rate_var_factor: f64,
    /// History ring-buffer capacity.
    pub history_len: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            dims: 2,
            two_stage: TwoStageConfig::default(),
            base_age: 30,
            v_ref: 120.0,
            min_age_frac: 0.2,
            confirm_hits: 2,
            rate_var_factor: 10.0,
            history_len: 30,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims != 2 && self.dims != 3 {
            return Err(Error::Config("dims must be 2 or 3".into()));
        }
        if self.base_age < 1 {
            return Err(Error::Config("base_age must be >= 1".into()));
        }
        if !(self.min_age_frac > 0.0 && self.min_age_frac <= 1.0) {
            return Err(Error::Config("min_age_frac must be in (0,1]".into()));
        }
        if !(self.v_ref > 0.0) {
            return Err(Error::Config("v_ref must be > 0".into()));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        if self.dims == 3 {
            kf::DIM_3D
        } else {
            kf::DIM_2D
        }
    }
}

/// Speed-scaled track lifetime:
/// `round(base_age * max(1 - v/v_ref, min_age_frac))`; nonincreasing in v.
pub fn max_age(v_kmh: f64, cfg: &TrackerConfig) -> u32 {
    let frac = (1.0 - v_kmh / cfg.v_ref).max(cfg.min_age_frac);
    (cfg.base_age as f64 * frac).round() as u32
}

/// Source of per-step noise diagonals for predict/update and track births.
pub trait NoiseProvider {
    /// Process noise diagonal (full state dim) at the previous frame's speed
    /// and the track's posterior sizes.
    fn process_noise(&self, v_kmh: f64, sizes: &[f64]) -> Result<Vec<f64>>;

    /// Observation noise diagonal (obs dim) and optional learned posterior
    /// diagonal (full state dim) at the current speed and detection sizes.
    fn observation_noise(&self, v_kmh: f64, sizes: &[f64]) -> Result<(Vec<f64>, Option<Vec<f64>>)>;

    /// Base diagonal (full state dim) for new-track covariance; the tracker
    /// scales the rate entries by `rate_var_factor`.
    fn initial_diag(&self, v_kmh: f64, sizes: &[f64]) -> Result<Vec<f64>>;
}

/// Learned provider: every diagonal comes from the network heads.
pub struct MsNetNoise {
    params: MsNetParams,
}

impl MsNetNoise {
    pub fn new(params: MsNetParams, dims: usize) -> Result<Self> {
        let want_tokens = if dims == 3 { 4 } else { 3 };
        if params.config().n_tokens != want_tokens {
            return Err(Error::Config(format!(
                "checkpoint has {} input tokens but tracker dims {dims} needs {want_tokens}",
                params.config().n_tokens
            )));
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &MsNetParams {
        &self.params
    }

    fn inputs(&self, v: f64, sizes: &[f64]) -> Vec<f64> {
        let mut inputs = Vec::with_capacity(1 + sizes.len());
        inputs.push(v);
        inputs.extend_from_slice(sizes);
        inputs
    }
}

impl NoiseProvider for MsNetNoise {
    fn process_noise(&self, v_kmh: f64, sizes: &[f64]) -> Result<Vec<f64>> {
        Ok(self.params.forward(&self.inputs(v_kmh, sizes), None)?.q_diag)
    }

    fn observation_noise(&self, v_kmh: f64, sizes: &[f64]) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let out = self.params.forward(&self.inputs(v_kmh, sizes), None)?;
        Ok((out.r_diag, Some(out.p_diag)))
    }

    fn initial_diag(&self, v_kmh: f64, sizes: &[f64]) -> Result<Vec<f64>> {
        Ok(self.params.forward(&self.inputs(v_kmh, sizes), None)?.p_diag)
    }
}

/// Fixed baseline: size-proportional constant weights, classical Joseph
/// posterior (no learned override), speed ignored. Defaults are tuned so the
/// baseline is genuinely strong on slow scenes.
#[derive(Debug, Clone)]
pub struct FixedNoise {
    /// Observation noise std as a fraction of the size proxy.
    pub r_weight: f64,
    /// Process noise std on position/size components.
    pub q_pos_weight: f64,
    /// Process noise std on rate components.
    pub q_vel_weight: f64,
}

impl Default for FixedNoise {
    fn default() -> Self {
        Self { r_weight: 1.0 / 20.0, q_pos_weight: 1.0 / 240.0, q_vel_weight: 1.0 / 480.0 }
    }
}

impl FixedNoise {
    /// Per-component size proxy: x pairs with the extent along x, etc.
    fn proxies(sizes: &[f64]) -> Vec<f64> {
        match sizes.len() {
            2 => vec![sizes[0], sizes[1], sizes[0], sizes[1]],
            // sizes = [w, h, l]; axes x,y,z pair with l,w,h.
            3 => vec![sizes[2], sizes[0], sizes[1], sizes[0], sizes[1], sizes[2]],
            _ => sizes.to_vec(),
        }
    }
}

impl NoiseProvider for FixedNoise {
    fn process_noise(&self, _v: f64, sizes: &[f64]) -> Result<Vec<f64>> {
        let p = Self::proxies(sizes);
        let mut q: Vec<f64> =
            p.iter().map(|s| (self.q_pos_weight * s).powi(2).max(1e-9)).collect();
        q.extend(p.iter().map(|s| (self.q_vel_weight * s).powi(2).max(1e-9)));
        Ok(q)
    }

    fn observation_noise(&self, _v: f64, sizes: &[f64]) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let p = Self::proxies(sizes);
        Ok((p.iter().map(|s| (self.r_weight * s).powi(2).max(1e-9)).collect(), None))
    }

    fn initial_diag(&self, _v: f64, sizes: &[f64]) -> Result<Vec<f64>> {
        let p = Self::proxies(sizes);
        let mut d: Vec<f64> =
            p.iter().map(|s| (2.0 * self.r_weight * s).powi(2).max(1e-9)).collect();
        d.extend(p.iter().map(|s| (self.q_vel_weight * s).powi(2).max(1e-9)));
        Ok(d)
    }
}

/// Diagonal birth covariance: provider base diagonal with rate entries
/// scaled by `rate_var_factor` (rates are unobserved at birth).
pub fn initial_covariance<N: NoiseProvider>(
    det: &Detection,
    v: EgoSpeed,
    noise: &N,
    cfg: &TrackerConfig,
) -> Result<Covariance> {
    let sizes = &det.bbox[kf::size_indices(det.bbox.len())];
    let mut diag = noise.initial_diag(v.v, sizes)?;
    if diag.len() != cfg.state_dim() {
        return Err(Error::Config(format!(
            "initial diagonal length {} != state dim {}",
            diag.len(),
            cfg.state_dim()
        )));
    }
    let half = diag.len() / 2;
    for d in diag.iter_mut().skip(half) {
        *d *= cfg.rate_var_factor;
    }
    Covariance::from_diag(&diag)
}

/// Emitted per-frame view of a confirmed track.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSnapshot {
    pub id: u64,
    pub class_id: i32,
    pub bbox: Vec<f64>,
    pub score: f64,
}

/// Single-sequence tracker; one instance per sequence.
pub struct Tracker<N: NoiseProvider> {
    cfg: TrackerConfig,
    noise: N,
    tracks: Vec<Track>,
    next_id: u64,
    last_frame: Option<usize>,
}

impl<N: NoiseProvider> Tracker<N> {
    pub fn new(cfg: TrackerConfig, noise: N) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, noise, tracks: Vec::new(), next_id: 0, last_frame: None })
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    /// Advance one frame: predict, associate, update, manage lifecycle.
    /// Returns snapshots of the tracks confirmed at this frame.
    pub fn step(
        &mut self,
        frame: usize,
        dets: &[Detection],
        v_prev: EgoSpeed,
        v_cur: EgoSpeed,
    ) -> Result<Vec<TrackSnapshot>> {
        if let Some(last) = self.last_frame {
            if frame <= last {
                return Err(Error::Sequencing(format!(
                    "frame {frame} not after previous frame {last}"
                )));
            }
        }
        self.last_frame = Some(frame);
        let obs_dim = self.cfg.state_dim() / 2;
        for d in dets {
            d.validate()?;
            if d.bbox.len() != obs_dim {
                return Err(Error::Config(format!(
                    "detection box length {} != obs dim {obs_dim}",
                    d.bbox.len()
                )));
            }
        }

        // Predict every live track with Q from (v_prev, posterior sizes).
        for track in &mut self.tracks {
            let q = self.noise.process_noise(v_prev.v, track.state.sizes())?;
            let (state, cov) = kf::predict(&track.state, &track.cov, &q, 1.0)?;
            track.state = state;
            track.cov = cov;
        }

        let boxes: Vec<Vec<f64>> = self.tracks.iter().map(|t| t.state.observed()).collect();
        let classes: Vec<i32> = self.tracks.iter().map(|t| t.class_id).collect();
        let outcome = two_stage_associate(&boxes, &classes, dets, &self.cfg.two_stage)?;

        let mut emitted = Vec::new();

        // Updates with R and the learned posterior from (v_cur, det sizes).
        for &(ti, dj) in outcome.stage1.matches.iter().chain(&outcome.stage2.matches) {
            let det = &dets[dj];
            let det_sizes = &det.bbox[kf::size_indices(obs_dim)];
            let (r, p_over) = self.noise.observation_noise(v_cur.v, det_sizes)?;
            let override_cov = match p_over {
                Some(diag) => Some(Covariance::from_diag(&diag)?),
                None => None,
            };
            let z = Observation::new(det.bbox.clone())?;
            let track = &mut self.tracks[ti];
            let out = kf::update(&track.state, &track.cov, &z, &r, override_cov.as_ref())?;
            track.state = out.state;
            track.cov = out.cov;
            track.hits += 1;
            track.misses = 0;
            match track.stage {
                TrackStage::Tentative if track.hits >= self.cfg.confirm_hits => {
                    track.stage = TrackStage::Confirmed;
                }
                TrackStage::Lost => track.stage = TrackStage::Confirmed,
                _ => {}
            }
            push_history(track, frame, det.embedding.clone(), self.cfg.history_len);
            if track.stage == TrackStage::Confirmed {
                emitted.push(TrackSnapshot {
                    id: track.id,
                    class_id: track.class_id,
                    bbox: track.state.observed(),
                    score: det.score,
                });
            }
        }

        // Unmatched tracks: age, demote, remove.
        let limit = max_age(v_cur.v, &self.cfg);
        for &ti in outcome.unmatched_tracks() {
            let track = &mut self.tracks[ti];
            track.misses += 1;
            match track.stage {
                TrackStage::Tentative => track.stage = TrackStage::Removed,
                TrackStage::Confirmed | TrackStage::Lost => {
                    track.stage =
                        if track.misses > limit { TrackStage::Removed } else { TrackStage::Lost };
                }
                TrackStage::Removed => {}
            }
        }

        // Unmatched high-confidence detections become new tentative tracks.
        for &dj in &outcome.new_track_candidates {
            let det = &dets[dj];
            let z = Observation::new(det.bbox.clone())?;
            let cov = initial_covariance(det, v_cur, &self.noise, &self.cfg)?;
            let mut track = Track {
                id: self.next_id,
                class_id: det.class_id,
                state: StateVector::from_observation(&z),
                cov,
                stage: TrackStage::Tentative,
                hits: 1,
                misses: 0,
                history: VecDeque::new(),
            };
            self.next_id += 1;
            if track.hits >= self.cfg.confirm_hits {
                track.stage = TrackStage::Confirmed;
                emitted.push(TrackSnapshot {
                    id: track.id,
                    class_id: track.class_id,
                    bbox: track.state.observed(),
                    score: det.score,
                });
            }
            push_history(&mut track, frame, det.embedding.clone(), self.cfg.history_len);
            self.tracks.push(track);
        }

        self.tracks.retain(|t| t.stage != TrackStage::Removed);
        emitted.sort_by_key(|s| s.id);
        Ok(emitted)
    }
}

fn push_history(track: &mut Track, frame: usize, embedding: Option<Vec<f64>>, cap: usize) {
    let observed = track.state.observed();
    let center_dims = if observed.len() == 6 { 3 } else { 2 };
    track.history.push_back(HistoryPoint {
        frame,
        center: observed[..center_dims].to_vec(),
        bbox: observed,
        embedding,
    });
    while track.history.len() > cap {
        track.history.pop_front();
    }
}

/// Run a whole bundle through a fresh tracker, producing result rows.
/// At frame 0 the previous-frame speed is the frame-0 speed.
pub fn run_sequence<N: NoiseProvider>(
    bundle: &SequenceBundle,
    cfg: &TrackerConfig,
    noise: N,
    source: SpeedSource,
) -> Result<Vec<ResultRow>> {
    if bundle.dims != cfg.dims {
        return Err(Error::Config(format!(
            "bundle dims {} != tracker dims {}",
            bundle.dims, cfg.dims
        )));
    }
    let mut tracker = Tracker::new(cfg.clone(), noise)?;
    let mut rows = Vec::new();
    for frame in 0..bundle.frames {
        let v_cur = EgoSpeed::new(bundle.speeds[frame], source);
        let v_prev = EgoSpeed::new(bundle.speeds[frame.saturating_sub(1)], source);
        let snaps = tracker.step(frame, &bundle.detections[frame], v_prev, v_cur)?;
        rows.extend(snaps.into_iter().map(|s| ResultRow {
            frame,
            track_id: s.id,
            class_id: s.class_id,
            bbox: s.bbox,
            score: s.score,
        }));
    }
    Ok(rows)
}
