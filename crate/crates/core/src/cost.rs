//! Analytic device-memory, payload and iteration-time estimates.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::quant::{payload_bytes, QuantScheme};
use crate::side::SideConfig;
use crate::tensor::Activation;
use crate::wire::{ACT_BATCH_FIXED_BYTES, CRC_BYTES, HEADER_BYTES};

/// Stored intermediates per token of one post-LN layer, in units of H:
/// LN input, Q, K, V, context, projection, residual, LN, FFN up (4H),
/// GELU (4H), FFN down, residual.
pub const LAYER_HIDDEN_COEFF: f64 = 18.0;
/// Attention maps per head and token, in units of S: scores and softmax.
pub const LAYER_SCORE_COEFF: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSpec {
    pub name: String,
    pub params: f64,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub seq: usize,
    pub batch: usize,
    pub dtype_bytes: usize,
    pub gamma: usize,
    /// Trainable parameters of the side-network.
    pub side_params: f64,
    pub optimizer_bytes_per_param: f64,
}

fn side_params(hidden: usize, blocks: usize) -> f64 {
    SideConfig {
        hidden,
        bottleneck: hidden / 16,
        blocks,
        classes: 2,
        activation: Activation::Gelu,
        init_std: 0.02,
        embedding_tap: false,
    }
    .parameter_count() as f64
}

impl ModelSpec {
    pub fn opt350m() -> Self {
        Self {
            name: "opt350m".into(),
            params: 331e6,
            layers: 24,
            hidden: 1024,
            heads: 16,
            ffn_dim: 4096,
            seq: 256,
            batch: 16,
            dtype_bytes: 2,
            gamma: 24,
            side_params: side_params(1024, 24),
            optimizer_bytes_per_param: 8.0,
        }
    }

    pub fn opt1_3b() -> Self {
        Self {
            name: "opt1.3b".into(),
            params: 1.316e9,
            layers: 24,
            hidden: 2048,
            heads: 32,
            ffn_dim: 8192,
            seq: 256,
            batch: 16,
            dtype_bytes: 2,
            gamma: 24,
            side_params: side_params(2048, 24),
            optimizer_bytes_per_param: 8.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "opt350m" => Ok(Self::opt350m()),
            "opt1.3b" => Ok(Self::opt1_3b()),
            _ => Err(Error::Config(format!("unknown preset {name:?} (opt350m|opt1.3b|custom)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma > self.layers + 1 {
            return Err(Error::Config(format!("gamma {} exceeds layers + 1 = {}", self.gamma, self.layers + 1)));
        }
        if ![2, 4].contains(&self.dtype_bytes) {
            return Err(Error::Config(format!("dtype bytes must be 2 or 4, got {}", self.dtype_bytes)));
        }
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.seq == 0 || self.batch == 0 {
            return Err(Error::Config("layers, hidden, heads, seq and batch must be positive".into()));
        }
        Ok(())
    }

    /// Tokens per step times hidden width: one activation tensor's elements.
    pub fn activation_elements(&self) -> f64 {
        (self.batch * self.seq * self.hidden) as f64
    }

    /// Stored elements of one layer during backpropagation.
    pub fn layer_stored_elements(&self) -> f64 {
        (self.batch * self.seq) as f64
            * (LAYER_HIDDEN_COEFF * self.hidden as f64 + LAYER_SCORE_COEFF * (self.heads * self.seq) as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    FullFt,
    SideLocal,
    /// Forward-only device that streams taps to a trainer elsewhere.
    #[serde(rename = "mobillm")]
    Offload,
    Inference,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_ft" => Ok(Self::FullFt),
            "side_local" => Ok(Self::SideLocal),
            "mobillm" | "offload" => Ok(Self::Offload),
            "inference" => Ok(Self::Inference),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?} (full_ft|side_local|mobillm|inference)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub mode: Mode,
    pub weights_bytes: f64,
    pub activation_bytes: f64,
    pub optimizer_bytes: f64,
    pub total_bytes: f64,
    pub payload_bytes_per_iter: f64,
    pub est_iter_time_s: Option<f64>,
}

/// Device memory in `mode`. Only the offloading mode transmits a payload.
pub fn device_memory_estimate(spec: &ModelSpec, mode: Mode, scheme: QuantScheme) -> Result<CostReport> {
    spec.validate()?;
    let d = spec.dtype_bytes as f64;
    let weights = spec.params * d;
    let taps = spec.gamma as f64 * spec.activation_elements() * d;
    let (weights_bytes, activation_bytes, optimizer_bytes) = match mode {
        Mode::FullFt => (
            weights,
            spec.layers as f64 * spec.layer_stored_elements() * d,
            spec.params * spec.optimizer_bytes_per_param,
        ),
        Mode::SideLocal => {
            // x and LN output (H each), pre- and post-activation (m each)
            let m = (spec.hidden / 16) as f64;
            let side_acts = spec.gamma as f64 * (spec.batch * spec.seq) as f64 * (2.0 * spec.hidden as f64 + 2.0 * m);
            (
                weights + spec.side_params * 4.0,
                taps + side_acts * d,
                spec.side_params * spec.optimizer_bytes_per_param,
            )
        }
        Mode::Offload => (weights, taps, 0.0),
        // current and next layer input
        Mode::Inference => (weights, 2.0 * spec.activation_elements() * d, 0.0),
    };
    let payload = match mode {
        Mode::Offload => payload_per_iteration(spec, scheme) as f64,
        _ => 0.0,
    };
    Ok(CostReport {
        mode,
        weights_bytes,
        activation_bytes,
        optimizer_bytes,
        total_bytes: weights_bytes + activation_bytes + optimizer_bytes,
        payload_bytes_per_iter: payload,
        est_iter_time_s: None,
    })
}

/// Bytes of one activation-batch frame: every tap plus labels and framing.
pub fn payload_per_iteration(spec: &ModelSpec, scheme: QuantScheme) -> usize {
    spec.gamma * payload_bytes([spec.batch, spec.seq, spec.hidden], scheme)
        + 4 * spec.batch
        + ACT_BATCH_FIXED_BYTES
        + HEADER_BYTES
        + CRC_BYTES
}

/// Steady-state pipelined time per iteration: the slowest of device
/// forward, transmission and server step.
pub fn iteration_time_estimate(t_fwd_s: f64, payload_bytes: f64, rate_bps: f64, t_server_s: f64) -> Result<f64> {
    if !(rate_bps > 0.0) {
        return Err(Error::Config(format!("rate must be positive, got {rate_bps}")));
    }
    Ok(t_fwd_s.max(payload_bytes * 8.0 / rate_bps).max(t_server_s))
}
