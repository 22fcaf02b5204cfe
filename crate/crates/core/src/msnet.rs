//! MotionScaleNet: a decoupled token-mixing / channel-mixing MLP that maps
//! `[v, w, h]` (2D) or `[v, w, h, l]` (3D) to positive diagonals for the
//! process noise Q, observation noise R, and posterior covariance P.
//!
//! Each scalar input becomes one token embedded to `channels` dims by a
//! per-token affine map. The backbone is `layers` pre-norm residual blocks
//! alternating token mixing (odd blocks) and channel mixing (even blocks),
//! each `LayerNorm -> two-layer GELU MLP -> residual add`. The flattened
//! token grid feeds three regression heads whose outputs pass through
//! `softplus(x) + 1e-6`, keeping every diagonal strictly positive.
//!
//! Parameters live in one flat `Vec<f64>` described by a [`ParamLayout`];
//! gradients come from a hand-written reverse pass over a [`ForwardTape`] of
//! recorded activations. Forward is a pure function of `(params, inputs)`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::util::{all_finite, gelu, gelu_deriv, seeded_rng, sigmoid, softplus};
use rand::RngExt;

/// Added to every softplus output so covariances stay strictly positive.
pub const SOFTPLUS_EPS: f64 = 1e-6;

const MAGIC: &[u8; 4] = b"MSN1";

/// Architecture and normalization settings.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MsNetConfig {
    /// 3 for 2D (`[v, w, h]`), 4 for 3D (`[v, w, h, l]`).
    pub n_tokens: usize,
    /// Embedding width C.
    pub channels: usize,
    /// Number of mixing blocks L; must be even.
    pub layers: usize,
    pub token_hidden: usize,
    pub channel_hidden: usize,
    pub head_hidden: usize,
    /// Output dims of the Q / R / P heads (state, observation, state).
    pub q_dim: usize,
    pub r_dim: usize,
    pub p_dim: usize,
    /// One backbone feeding all three heads (default) or one per head.
    pub shared_backbone: bool,
    /// Speed is divided by this (km/h) before embedding.
    pub v_scale: f64,
    /// Sizes are divided by this (px for 2D, m for 3D) before embedding.
    pub size_scale: f64,
}

impl MsNetConfig {
    pub fn default_2d() -> Self {
        Self {
            n_tokens: 3,
            channels: 64,
            layers: 6,
            token_hidden: 8,
            channel_hidden: 128,
            head_hidden: 48,
            q_dim: 8,
            r_dim: 4,
            p_dim: 8,
            shared_backbone: true,
            v_scale: 100.0,
            size_scale: 100.0,
        }
    }

    pub fn default_3d() -> Self {
        Self {
            n_tokens: 4,
            channels: 64,
            layers: 6,
            token_hidden: 8,
            channel_hidden: 128,
            head_hidden: 48,
            q_dim: 12,
            r_dim: 6,
            p_dim: 12,
            shared_backbone: true,
            v_scale: 100.0,
            size_scale: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tokens != 3 && self.n_tokens != 4 {
            return Err(Error::Config(format!("n_tokens must be 3 or 4, got {}", self.n_tokens)));
        }
        if self.layers == 0 || self.layers % 2 != 0 {
            return Err(Error::Config(format!("layers must be even and positive, got {}", self.layers)));
        }
        for (name, v) in [
            ("channels", self.channels),
            ("token_hidden", self.token_hidden),
            ("channel_hidden", self.channel_hidden),
            ("head_hidden", self.head_hidden),
            ("q_dim", self.q_dim),
            ("r_dim", self.r_dim),
            ("p_dim", self.p_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.v_scale > 0.0) || !(self.size_scale > 0.0) {
            return Err(Error::Config("normalization scales must be positive".into()));
        }
        Ok(())
    }

    /// Flattened backbone output size.
    pub fn flat_dim(&self) -> usize {
        self.n_tokens * self.channels
    }

    fn n_backbones(&self) -> usize {
        if self.shared_backbone {
            1
        } else {
            3
        }
    }

    fn head_dims(&self) -> [usize; 3] {
        [self.q_dim, self.r_dim, self.p_dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerOffsets {
    ln_scale: usize,
    ln_shift: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    token_mixing: bool,
    hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct BackboneOffsets {
    embed_w: Vec<usize>,
    embed_b: Vec<usize>,
    layers: Vec<LayerOffsets>,
}

#[derive(Debug, Clone, PartialEq)]
struct HeadOffsets {
    wa: usize,
    ba: usize,
    wb: usize,
    bb: usize,
    out_dim: usize,
}

/// Offsets of every tensor inside the flat parameter vector, plus the
/// weight-decay eligibility of each scalar (weights decay, biases and
/// LayerNorm parameters do not).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    backbones: Vec<BackboneOffsets>,
    heads: Vec<HeadOffsets>,
    total: usize,
    decay: Vec<bool>,
}

impl ParamLayout {
    fn build(cfg: &MsNetConfig) -> Self {
        let mut total = 0usize;
        let mut decay = Vec::new();
        let mut alloc = |count: usize, decays: bool| -> usize {
            let off = total;
            total += count;
            decay.extend(std::iter::repeat(decays).take(count));
            off
        };

        let mut backbones = Vec::new();
        for _ in 0..cfg.n_backbones() {
            let mut embed_w = Vec::new();
            let mut embed_b = Vec::new();
            for _ in 0..cfg.n_tokens {
                embed_w.push(alloc(cfg.channels, true));
                embed_b.push(alloc(cfg.channels, false));
            }
            let mut layers = Vec::new();
            for l in 0..cfg.layers {
                let token_mixing = l % 2 == 0;
                let (inp, hid) = if token_mixing {
                    (cfg.n_tokens, cfg.token_hidden)
                } else {
                    (cfg.channels, cfg.channel_hidden)
                };
                layers.push(LayerOffsets {
                    ln_scale: alloc(cfg.channels, false),
                    ln_shift: alloc(cfg.channels, false),
                    w1: alloc(hid * inp, true),
                    b1: alloc(hid, false),
                    w2: alloc(inp * hid, true),
                    b2: alloc(inp, false),
                    token_mixing,
                    hidden: hid,
                });
            }
            backbones.push(BackboneOffsets { embed_w, embed_b, layers });
        }

        let flat = cfg.flat_dim();
        let heads = cfg
            .head_dims()
            .iter()
            .map(|&out| HeadOffsets {
                wa: alloc(cfg.head_hidden * flat, true),
                ba: alloc(cfg.head_hidden, false),
                wb: alloc(out * cfg.head_hidden, true),
                bb: alloc(out, false),
                out_dim: out,
            })
            .collect();

        Self { backbones, heads, total, decay }
    }
}

/// Exact number of scalar parameters for a configuration.
pub fn param_count(cfg: &MsNetConfig) -> Result<usize> {
    cfg.validate()?;
    Ok(ParamLayout::build(cfg).total)
}

/// Positive diagonals produced by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MsNetOutput {
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    pub p_diag: Vec<f64>,
}

/// Upstream gradients for [`MsNetParams::backward`]; any head may be empty
/// (treated as zero).
#[derive(Debug, Clone, Default)]
pub struct OutputGrad {
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub p: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
struct BackboneTape {
    /// Token grids before each block plus the final one (layers+1 entries).
    n_pre: Vec<Vec<f64>>,
    /// Per block: per-token mean and inverse std of the LayerNorm.
    ln_mean: Vec<Vec<f64>>,
    ln_istd: Vec<Vec<f64>>,
    /// Per block: normalized activations (before scale/shift).
    xhat: Vec<Vec<f64>>,
    /// Per block: MLP hidden pre-activations.
    hidden_pre: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
struct HeadTape {
    hidden_pre: Vec<f64>,
    raw_out: Vec<f64>,
}

/// Recorded activations from one forward pass, sufficient for the exact
/// reverse pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardTape {
    norm_inputs: Vec<f64>,
    backbones: Vec<BackboneTape>,
    heads: Vec<HeadTape>,
}

impl ForwardTape {
    pub fn new() -> Self {
        Self::default()
    }

    fn reset(&mut self, n_backbones: usize) {
        self.norm_inputs.clear();
        self.backbones.clear();
        self.backbones.resize_with(n_backbones, BackboneTape::default);
        self.heads.clear();
        self.heads.resize_with(3, HeadTape::default);
    }
}

/// All learnable weights plus their layout and configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct MsNetParams {
    config: MsNetConfig,
    layout: ParamLayout,
    data: Vec<f64>,
}

impl MsNetParams {
    /// Deterministic initialization: weights from a fan-in scaled uniform,
    /// biases zero, LayerNorm scale 1 / shift 0, head output biases 1 so the
    /// fresh network emits moderate positive diagonals.
    pub fn init(config: MsNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::build(&config);
        let mut data = vec![0.0; layout.total];
        let mut rng = seeded_rng(seed);
        let mut fill_uniform = |data: &mut [f64], off: usize, count: usize, fan_in: usize| {
            let a = 1.0 / (fan_in as f64).sqrt();
            for x in &mut data[off..off + count] {
                *x = rng.random_range(-a..a);
            }
        };

        for bb in &layout.backbones {
            for &off in &bb.embed_w {
                fill_uniform(&mut data, off, config.channels, 1);
            }
            for layer in &bb.layers {
                let inp = if layer.token_mixing { config.n_tokens } else { config.channels };
                data[layer.ln_scale..layer.ln_scale + config.channels].fill(1.0);
                fill_uniform(&mut data, layer.w1, layer.hidden * inp, inp);
                fill_uniform(&mut data, layer.w2, inp * layer.hidden, layer.hidden);
            }
        }
        let flat = config.flat_dim();
        for head in &layout.heads {
            fill_uniform(&mut data, head.wa, config.head_hidden * flat, flat);
            fill_uniform(&mut data, head.wb, head.out_dim * config.head_hidden, config.head_hidden);
            data[head.bb..head.bb + head.out_dim].fill(1.0);
        }
        Ok(Self { config, layout, data })
    }

    pub fn config(&self) -> &MsNetConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Per-scalar weight-decay eligibility (false for biases and LayerNorm).
    pub fn decay_mask(&self) -> &[bool] {
        &self.layout.decay
    }

    fn normalize_inputs(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        let cfg = &self.config;
        if inputs.len() != cfg.n_tokens {
            return Err(Error::Config(format!(
                "expected {} inputs, got {}",
                cfg.n_tokens,
                inputs.len()
            )));
        }
        if !all_finite(inputs) {
            return Err(Error::Numeric("non-finite network input".into()));
        }
        if inputs[0] < 0.0 {
            return Err(Error::Numeric(format!("speed must be >= 0, got {}", inputs[0])));
        }
        let mut s = Vec::with_capacity(cfg.n_tokens);
        s.push(inputs[0] / cfg.v_scale);
        for &x in &inputs[1..] {
            s.push(x / cfg.size_scale);
        }
        Ok(s)
    }

    fn run_backbone(&self, b: usize, s: &[f64], tape: Option<&mut BackboneTape>) -> Vec<f64> {
        let cfg = &self.config;
        let bb = &self.layout.backbones[b];
        let (nt, c) = (cfg.n_tokens, cfg.channels);
        let mut n = vec![0.0; nt * c];
        for t in 0..nt {
            let w = &self.data[bb.embed_w[t]..bb.embed_w[t] + c];
            let bias = &self.data[bb.embed_b[t]..bb.embed_b[t] + c];
            for ch in 0..c {
                n[t * c + ch] = w[ch] * s[t] + bias[ch];
            }
        }

        let mut tape = tape;
        if let Some(tp) = tape.as_deref_mut() {
            tp.n_pre.clear();
            tp.ln_mean.clear();
            tp.ln_istd.clear();
            tp.xhat.clear();
            tp.hidden_pre.clear();
            tp.n_pre.push(n.clone());
        }

        let mut y = vec![0.0; nt * c];
        let mut xhat = vec![0.0; nt * c];
        for layer in &bb.layers {
            // Pre-norm over channels, per token.
            let scale = &self.data[layer.ln_scale..layer.ln_scale + c];
            let shift = &self.data[layer.ln_shift..layer.ln_shift + c];
            let mut means = vec![0.0; nt];
            let mut istds = vec![0.0; nt];
            for t in 0..nt {
                let row = &n[t * c..(t + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
                let istd = 1.0 / (var + 1e-6).sqrt();
                means[t] = mean;
                istds[t] = istd;
                for ch in 0..c {
                    let xh = (row[ch] - mean) * istd;
                    xhat[t * c + ch] = xh;
                    y[t * c + ch] = scale[ch] * xh + shift[ch];
                }
            }

            let hid = layer.hidden;
            let mut hidden_pre;
            let mut act = Vec::new();
            if layer.token_mixing {
                // Mix across tokens independently per channel.
                hidden_pre = vec![0.0; c * hid];
                let w1 = &self.data[layer.w1..layer.w1 + hid * nt];
                let b1 = &self.data[layer.b1..layer.b1 + hid];
                let w2 = &self.data[layer.w2..layer.w2 + nt * hid];
                let b2 = &self.data[layer.b2..layer.b2 + nt];
                act.resize(hid, 0.0);
                for ch in 0..c {
                    for k in 0..hid {
                        let mut acc = b1[k];
                        for t in 0..nt {
                            acc += w1[k * nt + t] * y[t * c + ch];
                        }
                        hidden_pre[ch * hid + k] = acc;
                        act[k] = gelu(acc);
                    }
                    for t in 0..nt {
                        let mut acc = b2[t];
                        let row = &w2[t * hid..(t + 1) * hid];
                        for k in 0..hid {
                            acc += row[k] * act[k];
                        }
                        n[t * c + ch] += acc;
                    }
                }
            } else {
                // Mix across channels independently per token.
                hidden_pre = vec![0.0; nt * hid];
                let w1 = &self.data[layer.w1..layer.w1 + hid * c];
                let b1 = &self.data[layer.b1..layer.b1 + hid];
                let w2 = &self.data[layer.w2..layer.w2 + c * hid];
                let b2 = &self.data[layer.b2..layer.b2 + c];
                act.resize(hid, 0.0);
                for t in 0..nt {
                    let yrow = &y[t * c..(t + 1) * c];
                    for k in 0..hid {
                        let mut acc = b1[k];
                        let wrow = &w1[k * c..(k + 1) * c];
                        for ch in 0..c {
                            acc += wrow[ch] * yrow[ch];
                        }
                        hidden_pre[t * hid + k] = acc;
                        act[k] = gelu(acc);
                    }
                    for ch in 0..c {
                        let mut acc = b2[ch];
                        let row = &w2[ch * hid..(ch + 1) * hid];
                        for k in 0..hid {
                            acc += row[k] * act[k];
                        }
                        n[t * c + ch] += acc;
                    }
                }
            }

            if let Some(tp) = tape.as_deref_mut() {
                tp.ln_mean.push(means);
                tp.ln_istd.push(istds);
                tp.xhat.push(xhat.clone());
                tp.hidden_pre.push(hidden_pre);
                tp.n_pre.push(n.clone());
            }
        }
        n
    }

    fn run_head(&self, h: usize, flat: &[f64], tape: Option<&mut HeadTape>) -> Vec<f64> {
        let cfg = &self.config;
        let head = &self.layout.heads[h];
        let hh = cfg.head_hidden;
        let fd = cfg.flat_dim();
        let wa = &self.data[head.wa..head.wa + hh * fd];
        let ba = &self.data[head.ba..head.ba + hh];
        let wb = &self.data[head.wb..head.wb + head.out_dim * hh];
        let bb = &self.data[head.bb..head.bb + head.out_dim];

        let mut hidden_pre = vec![0.0; hh];
        let mut act = vec![0.0; hh];
        for k in 0..hh {
            let mut acc = ba[k];
            let wrow = &wa[k * fd..(k + 1) * fd];
            for f in 0..fd {
                acc += wrow[f] * flat[f];
            }
            hidden_pre[k] = acc;
            act[k] = gelu(acc);
        }
        let mut raw = vec![0.0; head.out_dim];
        for o in 0..head.out_dim {
            let mut acc = bb[o];
            let row = &wb[o * hh..(o + 1) * hh];
            for k in 0..hh {
                acc += row[k] * act[k];
            }
            raw[o] = acc;
        }
        let out = raw.iter().map(|&x| softplus(x) + SOFTPLUS_EPS).collect();
        if let Some(tp) = tape {
            tp.hidden_pre = hidden_pre;
            tp.raw_out = raw;
        }
        out
    }

    /// Forward pass. `inputs` is `[v_kmh, w, h]` or `[v_kmh, w, h, l]` in raw
    /// units; normalization happens internally. Pass a tape to enable
    /// [`Self::backward`].
    pub fn forward(&self, inputs: &[f64], mut tape: Option<&mut ForwardTape>) -> Result<MsNetOutput> {
        let s = self.normalize_inputs(inputs)?;
        let nb = self.config.n_backbones();
        if let Some(tp) = tape.as_deref_mut() {
            tp.reset(nb);
            tp.norm_inputs = s.clone();
        }

        let mut flats: Vec<Vec<f64>> = Vec::with_capacity(nb);
        for b in 0..nb {
            let bt = tape.as_deref_mut().map(|tp| &mut tp.backbones[b]);
            flats.push(self.run_backbone(b, &s, bt));
        }

        let mut outs: Vec<Vec<f64>> = Vec::with_capacity(3);
        for h in 0..3 {
            let b = if self.config.shared_backbone { 0 } else { h };
            let ht = tape.as_deref_mut().map(|tp| &mut tp.heads[h]);
            outs.push(self.run_head(h, &flats[b], ht));
        }
        let p_diag = outs.pop().unwrap();
        let r_diag = outs.pop().unwrap();
        let q_diag = outs.pop().unwrap();
        Ok(MsNetOutput { q_diag, r_diag, p_diag })
    }

    /// Reverse pass: accumulates exact gradients of
    /// `sum(grad.q * q) + sum(grad.r * r) + sum(grad.p * p)` into
    /// `grad_params` (same length as the parameter vector) and
    /// `grad_inputs` (raw input units, length `n_tokens`).
    pub fn backward(
        &self,
        tape: &ForwardTape,
        grad: &OutputGrad,
        grad_params: &mut [f64],
        grad_inputs: &mut [f64],
    ) -> Result<()> {
        let cfg = &self.config;
        let nb = cfg.n_backbones();
        if grad_params.len() != self.data.len() {
            return Err(Error::Config("grad_params length mismatch".into()));
        }
        if grad_inputs.len() != cfg.n_tokens {
            return Err(Error::Config("grad_inputs length mismatch".into()));
        }
        if tape.backbones.len() != nb
            || tape.heads.len() != 3
            || tape.norm_inputs.len() != cfg.n_tokens
            || tape.backbones.iter().any(|b| b.n_pre.len() != cfg.layers + 1)
        {
            return Err(Error::Config("tape does not match this network".into()));
        }
        for (name, g, dim) in [
            ("q", &grad.q, cfg.q_dim),
            ("r", &grad.r, cfg.r_dim),
            ("p", &grad.p, cfg.p_dim),
        ] {
            if !g.is_empty() && g.len() != dim {
                return Err(Error::Config(format!("grad.{name} length {} != {dim}", g.len())));
            }
        }

        let fd = cfg.flat_dim();
        let mut d_flat = vec![vec![0.0; fd]; nb];

        // Heads.
        let head_grads = [&grad.q, &grad.r, &grad.p];
        for h in 0..3 {
            let g = head_grads[h];
            if g.is_empty() || g.iter().all(|&x| x == 0.0) {
                continue;
            }
            let head = &self.layout.heads[h];
            let ht = &tape.heads[h];
            if ht.raw_out.len() != head.out_dim || ht.hidden_pre.len() != cfg.head_hidden {
                return Err(Error::Config("head tape shape mismatch".into()));
            }
            let hh = cfg.head_hidden;
            let wa = &self.data[head.wa..head.wa + hh * fd];
            let wb = &self.data[head.wb..head.wb + head.out_dim * hh];
            let b = if cfg.shared_backbone { 0 } else { h };
            let flat = &tape.backbones[b].n_pre[cfg.layers];

            let act: Vec<f64> = ht.hidden_pre.iter().map(|&x| gelu(x)).collect();
            let mut d_hidden = vec![0.0; hh];
            for o in 0..head.out_dim {
                let d_raw = g[o] * sigmoid(ht.raw_out[o]);
                grad_params[head.bb + o] += d_raw;
                let gw = &mut grad_params[head.wb + o * hh..head.wb + (o + 1) * hh];
                for k in 0..hh {
                    gw[k] += d_raw * act[k];
                    d_hidden[k] += wb[o * hh + k] * d_raw;
                }
            }
            for k in 0..hh {
                let d_pre = d_hidden[k] * gelu_deriv(ht.hidden_pre[k]);
                grad_params[head.ba + k] += d_pre;
                let gw = &mut grad_params[head.wa + k * fd..head.wa + (k + 1) * fd];
                let wrow = &wa[k * fd..(k + 1) * fd];
                let df = &mut d_flat[b];
                for f in 0..fd {
                    gw[f] += d_pre * flat[f];
                    df[f] += wrow[f] * d_pre;
                }
            }
        }

        // Backbones, reverse through the blocks.
        let (nt, c) = (cfg.n_tokens, cfg.channels);
        let mut d_s = vec![0.0; nt];
        for b in 0..nb {
            let bb = &self.layout.backbones[b];
            let bt = &tape.backbones[b];
            let mut d_n = std::mem::take(&mut d_flat[b]);
            if d_n.iter().all(|&x| x == 0.0) {
                continue;
            }
            for (l, layer) in bb.layers.iter().enumerate().rev() {
                let hid = layer.hidden;
                let xhat = &bt.xhat[l];
                let hidden_pre = &bt.hidden_pre[l];
                let means = &bt.ln_mean[l];
                let istds = &bt.ln_istd[l];
                let scale = &self.data[layer.ln_scale..layer.ln_scale + c];
                let shift = &self.data[layer.ln_shift..layer.ln_shift + c];

                // d_n is the adjoint of this block's output; residual passes
                // it straight through, the MLP branch adds to d_y.
                let mut d_y = vec![0.0; nt * c];
                if layer.token_mixing {
                    let w1 = &self.data[layer.w1..layer.w1 + hid * nt];
                    let w2 = &self.data[layer.w2..layer.w2 + nt * hid];
                    let mut act = vec![0.0; hid];
                    let mut dact = vec![0.0; hid];
                    for ch in 0..c {
                        for k in 0..hid {
                            let pre = hidden_pre[ch * hid + k];
                            act[k] = gelu(pre);
                            dact[k] = gelu_deriv(pre);
                        }
                        let mut d_h = vec![0.0; hid];
                        for t in 0..nt {
                            let d_out = d_n[t * c + ch];
                            grad_params[layer.b2 + t] += d_out;
                            let gw = &mut grad_params[layer.w2 + t * hid..layer.w2 + (t + 1) * hid];
                            for k in 0..hid {
                                gw[k] += d_out * act[k];
                                d_h[k] += w2[t * hid + k] * d_out;
                            }
                        }
                        for k in 0..hid {
                            let d_pre = d_h[k] * dact[k];
                            grad_params[layer.b1 + k] += d_pre;
                            for t in 0..nt {
                                let yv = scale[ch] * xhat[t * c + ch] + shift[ch];
                                grad_params[layer.w1 + k * nt + t] += d_pre * yv;
                                d_y[t * c + ch] += w1[k * nt + t] * d_pre;
                            }
                        }
                    }
                } else {
                    let w1 = &self.data[layer.w1..layer.w1 + hid * c];
                    let w2 = &self.data[layer.w2..layer.w2 + c * hid];
                    let mut act = vec![0.0; hid];
                    let mut dact = vec![0.0; hid];
                    let mut yrow = vec![0.0; c];
                    for t in 0..nt {
                        for k in 0..hid {
                            let pre = hidden_pre[t * hid + k];
                            act[k] = gelu(pre);
                            dact[k] = gelu_deriv(pre);
                        }
                        for ch in 0..c {
                            yrow[ch] = scale[ch] * xhat[t * c + ch] + shift[ch];
                        }
                        let mut d_h = vec![0.0; hid];
                        for ch in 0..c {
                            let d_out = d_n[t * c + ch];
                            grad_params[layer.b2 + ch] += d_out;
                            let gw = &mut grad_params[layer.w2 + ch * hid..layer.w2 + (ch + 1) * hid];
                            let wrow = &w2[ch * hid..(ch + 1) * hid];
                            for k in 0..hid {
                                gw[k] += d_out * act[k];
                                d_h[k] += wrow[k] * d_out;
                            }
                        }
                        let dy_row = &mut d_y[t * c..(t + 1) * c];
                        for k in 0..hid {
                            let d_pre = d_h[k] * dact[k];
                            grad_params[layer.b1 + k] += d_pre;
                            let gw = &mut grad_params[layer.w1 + k * c..layer.w1 + (k + 1) * c];
                            let wrow = &w1[k * c..(k + 1) * c];
                            for ch in 0..c {
                                gw[ch] += d_pre * yrow[ch];
                                dy_row[ch] += wrow[ch] * d_pre;
                            }
                        }
                    }
                }

                // LayerNorm backward per token row; residual adjoint adds in.
                for t in 0..nt {
                    let mut d_xhat = vec![0.0; c];
                    for ch in 0..c {
                        let dy = d_y[t * c + ch];
                        grad_params[layer.ln_scale + ch] += dy * xhat[t * c + ch];
                        grad_params[layer.ln_shift + ch] += dy;
                        d_xhat[ch] = dy * scale[ch];
                    }
                    let mean_dx = d_xhat.iter().sum::<f64>() / c as f64;
                    let mean_dxx = d_xhat
                        .iter()
                        .zip(&xhat[t * c..(t + 1) * c])
                        .map(|(dx, xh)| dx * xh)
                        .sum::<f64>()
                        / c as f64;
                    let istd = istds[t];
                    let _ = means;
                    for ch in 0..c {
                        d_n[t * c + ch] +=
                            istd * (d_xhat[ch] - mean_dx - xhat[t * c + ch] * mean_dxx);
                    }
                }
            }

            // Embedding backward.
            for t in 0..nt {
                let w = &self.data[bb.embed_w[t]..bb.embed_w[t] + c];
                for ch in 0..c {
                    let d = d_n[t * c + ch];
                    grad_params[bb.embed_w[t] + ch] += d * tape.norm_inputs[t];
                    grad_params[bb.embed_b[t] + ch] += d;
                    d_s[t] += w[ch] * d;
                }
            }
        }

        // Undo input normalization.
        grad_inputs[0] += d_s[0] / cfg.v_scale;
        for t in 1..nt {
            grad_inputs[t] += d_s[t] / cfg.size_scale;
        }
        Ok(())
    }

    /// Serialize to the binary checkpoint layout (see module docs / README).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        let cfg = &self.config;
        for v in [
            cfg.n_tokens,
            cfg.channels,
            cfg.layers,
            cfg.token_hidden,
            cfg.channel_hidden,
            cfg.head_hidden,
            cfg.q_dim,
            cfg.r_dim,
            cfg.p_dim,
            cfg.shared_backbone as usize,
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&cfg.v_scale.to_le_bytes())?;
        w.write_all(&cfg.size_scale.to_le_bytes())?;
        w.write_all(&(self.data.len() as u64).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Load a checkpoint; shape inconsistencies and truncation are hard errors.
    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("checkpoint shorter than header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("bad checkpoint magic (expected MSN1)".into()));
        }
        let mut u32s = [0u32; 10];
        for v in &mut u32s {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| Error::Format("truncated checkpoint header".into()))?;
            *v = u32::from_le_bytes(b);
        }
        let mut f64_field = || -> Result<f64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| Error::Format("truncated checkpoint header".into()))?;
            Ok(f64::from_le_bytes(b))
        };
        let v_scale = f64_field()?;
        let size_scale = f64_field()?;
        let config = MsNetConfig {
            n_tokens: u32s[0] as usize,
            channels: u32s[1] as usize,
            layers: u32s[2] as usize,
            token_hidden: u32s[3] as usize,
            channel_hidden: u32s[4] as usize,
            head_hidden: u32s[5] as usize,
            q_dim: u32s[6] as usize,
            r_dim: u32s[7] as usize,
            p_dim: u32s[8] as usize,
            shared_backbone: u32s[9] != 0,
            v_scale,
            size_scale,
        };
        config.validate()?;
        let layout = ParamLayout::build(&config);

        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(|_| Error::Format("truncated checkpoint header".into()))?;
        let declared = u64::from_le_bytes(b8) as usize;
        if declared != layout.total {
            return Err(Error::Format(format!(
                "checkpoint declares {declared} parameters but config implies {}",
                layout.total
            )));
        }
        let mut data = vec![0.0; declared];
        for v in &mut data {
            r.read_exact(&mut b8)
                .map_err(|_| Error::Format("checkpoint truncated inside parameter array".into()))?;
            *v = f64::from_le_bytes(b8);
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Format("trailing bytes after parameter array".into()));
        }
        if !all_finite(&data) {
            return Err(Error::Numeric("checkpoint contains non-finite parameters".into()));
        }
        Ok(Self { config, layout, data })
    }
}
