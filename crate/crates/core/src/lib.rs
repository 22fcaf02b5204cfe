//! Speed-adaptive multi-object tracking on top of a constant-velocity Kalman core.
//!
//! The crate is organized around a tracking-by-detection pipeline whose noise
//! covariances are produced per step by a small token/channel-mixing network
//! conditioned on ego-vehicle speed and object scale:
//!
//! - [`kf`] — constant-velocity Kalman predict/update over 8- or 12-dim states.
//! - [`msnet`] — MotionScaleNet: maps `[v, w, h(, l)]` to positive diagonals
//!   for process noise, observation noise, and posterior covariance, with
//!   hand-written reverse-mode gradients and a binary checkpoint format.
//! - [`assoc`] — IoU costs and two-stage confidence-partitioned assignment.
//! - [`track`] — per-frame tracker orchestration and speed-scaled lifecycle.
//! - [`losses`] — trajectory / semantic / position consistency losses.
//! - [`train`] — AdamW, warmup+cosine schedule, and backprop through rollouts.
//! - [`metrics`] — HOTA-family and CLEAR evaluation plus speed-bucket analysis.
//! - [`formats`] — detection/GT/speed/embedding ingestion and result writers.
//! - [`synth`] — synthetic ego-motion scenario generator used as the oracle
//!   for the speed-adaptation experiments.

pub mod assoc;
pub mod error;
pub mod formats;
pub mod kf;
pub mod losses;
pub mod metrics;
pub mod msnet;
pub mod synth;
pub mod track;
pub mod train;
pub mod util;

pub use error::{Error, Result};
