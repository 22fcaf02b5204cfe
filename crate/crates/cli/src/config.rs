//! Layered run configuration: defaults from the library `Default` impls,
//! overridden by a key-value config file, then `SPEEDTRACK_*` environment
//! variables, then explicit command-line flags.
//!
//! File format: one `key = value` per line, `#` comments, blank lines
//! ignored. Environment variables use the upper-snake key with the
//! `SPEEDTRACK_` prefix (`gate_stage1` -> `SPEEDTRACK_GATE_STAGE1`).

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use speedtrack::assoc::TwoStageConfig;
use speedtrack::losses::LossWeights;
use speedtrack::synth::ScenarioConfig;
use speedtrack::track::{FixedNoise, TrackerConfig};
use speedtrack::train::{RolloutConfig, TrainConfig};

pub const ENV_PREFIX: &str = "SPEEDTRACK_";

#[derive(Debug, Clone)]
pub struct ConfigBag {
    values: BTreeMap<String, String>,
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

impl ConfigBag {
    /// All known keys with their library defaults.
    pub fn defaults() -> Self {
        let tc = TrackerConfig::default();
        let ts = TwoStageConfig::default();
        let fx = FixedNoise::default();
        let tr = TrainConfig::default();
        let ro = RolloutConfig::default();
        let lw = LossWeights::default();
        let sc = ScenarioConfig::default();
        let mut values = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            values.insert(k.to_string(), v);
        };

        // Association / tracker lifecycle.
        put("tau_high", fmt(ts.tau_high));
        put("tau_low", fmt(ts.tau_low));
        put("gate_stage1", fmt(ts.gate_stage1));
        put("gate_stage2", fmt(ts.gate_stage2));
        put("base_age", tc.base_age.to_string());
        put("v_ref", fmt(tc.v_ref));
        put("min_age_frac", fmt(tc.min_age_frac));
        put("confirm_hits", tc.confirm_hits.to_string());
        put("rate_var_factor", fmt(tc.rate_var_factor));
        put("history_len", tc.history_len.to_string());

        // Fixed-KF baseline.
        put("fixed_r_weight", fmt(fx.r_weight));
        put("fixed_q_pos_weight", fmt(fx.q_pos_weight));
        put("fixed_q_vel_weight", fmt(fx.q_vel_weight));

        // Training.
        put("lr0", fmt(tr.lr0));
        put("weight_decay", fmt(tr.weight_decay));
        put("warmup_epochs", tr.warmup_epochs.to_string());
        put("total_epochs", tr.total_epochs.to_string());
        put("batch_size", tr.batch_size.to_string());
        put("grad_clip", fmt(tr.grad_clip));
        put("window", ro.window.to_string());
        put("overlap", ro.overlap.to_string());
        put("iou_gate", fmt(ro.iou_gate));
        put("det_match_iou", fmt(ro.det_match_iou));

        // Loss weights.
        put("lambda", fmt(lw.lambda));
        put("gamma", fmt(lw.gamma));
        put("rho", fmt(lw.rho));

        // Scenario generator.
        put("objects", sc.n_objects.to_string());
        put("frames", sc.frames.to_string());
        put("frame_rate", fmt(sc.frame_rate));
        put("sigma0", fmt(sc.sigma0));
        put("k_v", fmt(sc.k_v));
        put("p_drop0", fmt(sc.p0));
        put("k_p", fmt(sc.k_p));
        put("sigma3_0", fmt(sc.sigma3_0));
        put("k3_v", fmt(sc.k3_v));
        put("low_score_frac", fmt(sc.low_score_frac));
        put("embedding_dim", sc.embedding_dim.to_string());
        put("embed_jitter", fmt(sc.embed_jitter));
        put("yaw_rate", fmt(sc.yaw_rate_deg));
        put("focal", fmt(sc.focal));
        put("image_width", sc.image_size.0.to_string());
        put("image_height", sc.image_size.1.to_string());
        put("object_speed_min", fmt(sc.object_speed.0));
        put("object_speed_max", fmt(sc.object_speed.1));

        Self { values }
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("{}:{}: expected 'key = value'", path.display(), ln + 1);
            };
            let key = key.trim();
            if !self.values.contains_key(key) {
                bail!("{}:{}: unknown config key '{key}'", path.display(), ln + 1);
            }
            self.values.insert(key.to_string(), value.trim().to_string());
        }
        Ok(())
    }

    pub fn apply_env(&mut self) {
        let keys: Vec<String> = self.values.keys().cloned().collect();
        for key in keys {
            let var = format!("{ENV_PREFIX}{}", key.to_uppercase());
            if let Ok(v) = std::env::var(&var) {
                self.values.insert(key, v);
            }
        }
    }

    /// Highest-precedence layer: a flag the user actually passed.
    pub fn set_flag<T: ToString>(&mut self, key: &str, value: &Option<T>) {
        debug_assert!(self.values.contains_key(key), "unknown key {key}");
        if let Some(v) = value {
            self.values.insert(key.to_string(), v.to_string());
        }
    }

    pub fn snapshot(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    fn raw(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(|s| s.as_str())
            .with_context(|| format!("unknown config key '{key}'"))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let raw = self.raw(key)?;
        raw.parse().with_context(|| format!("config key '{key}': bad float '{raw}'"))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        let raw = self.raw(key)?;
        raw.parse().with_context(|| format!("config key '{key}': bad integer '{raw}'"))
    }

    pub fn u32(&self, key: &str) -> Result<u32> {
        let raw = self.raw(key)?;
        raw.parse().with_context(|| format!("config key '{key}': bad integer '{raw}'"))
    }

    pub fn tracker_config(&self, dims: usize) -> Result<TrackerConfig> {
        Ok(TrackerConfig {
            dims,
            two_stage: TwoStageConfig {
                tau_high: self.f64("tau_high")?,
                tau_low: self.f64("tau_low")?,
                gate_stage1: self.f64("gate_stage1")?,
                gate_stage2: self.f64("gate_stage2")?,
            },
            base_age: self.u32("base_age")?,
            v_ref: self.f64("v_ref")?,
            min_age_frac: self.f64("min_age_frac")?,
            confirm_hits: self.u32("confirm_hits")?,
            rate_var_factor: self.f64("rate_var_factor")?,
            history_len: self.usize("history_len")?,
        })
    }

    pub fn fixed_noise(&self) -> Result<FixedNoise> {
        Ok(FixedNoise {
            r_weight: self.f64("fixed_r_weight")?,
            q_pos_weight: self.f64("fixed_q_pos_weight")?,
            q_vel_weight: self.f64("fixed_q_vel_weight")?,
        })
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            lr0: self.f64("lr0")?,
            weight_decay: self.f64("weight_decay")?,
            warmup_epochs: self.usize("warmup_epochs")?,
            total_epochs: self.usize("total_epochs")?,
            batch_size: self.usize("batch_size")?,
            seed,
            grad_clip: self.f64("grad_clip")?,
            rollout: RolloutConfig {
                window: self.usize("window")?,
                overlap: self.usize("overlap")?,
                iou_gate: self.f64("iou_gate")?,
                det_match_iou: self.f64("det_match_iou")?,
            },
        })
    }

    pub fn scenario_config(&self, id: String, seed: u64, dims: usize) -> Result<ScenarioConfig> {
        let frames = self.usize("frames")?;
        Ok(ScenarioConfig {
            id,
            dims,
            n_objects: self.usize("objects")?,
            frames,
            frame_rate: self.f64("frame_rate")?,
            speed_profile: vec![0.0; frames],
            object_speed: (self.f64("object_speed_min")?, self.f64("object_speed_max")?),
            size_w: ScenarioConfig::default().size_w,
            size_h: ScenarioConfig::default().size_h,
            size_l: ScenarioConfig::default().size_l,
            sigma0: self.f64("sigma0")?,
            k_v: self.f64("k_v")?,
            p0: self.f64("p_drop0")?,
            k_p: self.f64("k_p")?,
            sigma3_0: self.f64("sigma3_0")?,
            k3_v: self.f64("k3_v")?,
            low_score_frac: self.f64("low_score_frac")?,
            embedding_dim: self.usize("embedding_dim")?,
            embed_jitter: self.f64("embed_jitter")?,
            yaw_rate_deg: self.f64("yaw_rate")?,
            focal: self.f64("focal")?,
            image_size: (self.u32("image_width")?, self.u32("image_height")?),
            seed,
        })
    }
}
