//! Loss functions, Adam, and the server's per-batch training step.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::dequantize;
use crate::side::{init_side, side_backward, side_forward, SideConfig, SideGrads, SideParams};
use crate::tensor::{Scalar, Tensor};
use crate::wire::{frame_len_act_batch, ActBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    /// Squared error against the label. With one output the label value is
    /// the target; with several the target is the label's one-hot row.
    Mse,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" | "cross_entropy" => Ok(Self::CrossEntropy),
            "mse" => Ok(Self::Mse),
            _ => Err(Error::Config(format!("unknown loss {s:?} (ce|mse)"))),
        }
    }
}

/// Mean loss over the batch and its gradient with respect to the logits.
pub fn loss_and_grad<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u32],
    kind: LossKind,
) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 {
        return Err(Error::Dimension(format!("logits must be [B, C], got {:?}", logits.shape())));
    }
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::Input(format!("{} labels for a batch of {b}", labels.len())));
    }
    let classify = kind == LossKind::CrossEntropy || c > 1;
    if classify {
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= c) {
            return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
        }
    }
    let inv_b = T::one() / T::of(b as f64);
    let mut grad = logits.data().to_vec();
    let mut total = T::zero();
    for (row, &y) in grad.chunks_mut(c).zip(labels) {
        let y = y as usize;
        match kind {
            LossKind::CrossEntropy => {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let z: T = row.iter().map(|&v| (v - m).exp()).sum();
                total = total + (m + z.ln() - row[y]);
                for (j, v) in row.iter_mut().enumerate() {
                    let p = (*v - m).exp() / z;
                    let onehot = if j == y { T::one() } else { T::zero() };
                    *v = (p - onehot) * inv_b;
                }
            }
            LossKind::Mse => {
                for (j, v) in row.iter_mut().enumerate() {
                    let target = if c == 1 {
                        T::of(y as f64)
                    } else if j == y {
                        T::one()
                    } else {
                        T::zero()
                    };
                    let diff = *v - target;
                    total = total + diff * diff;
                    *v = T::of(2.0) * diff * inv_b;
                }
            }
        }
    }
    Ok((total * inv_b, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Fraction of rows whose first maximal logit is the label. A single-output
/// head counts a hit when the rounded prediction equals the label.
pub fn accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[u32]) -> f64 {
    let c = logits.last_dim();
    if labels.is_empty() || c == 0 {
        return 0.0;
    }
    let hits = logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| {
            if c == 1 {
                return row[0].as_f64().round() == y as f64;
            }
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best == y as usize
        })
        .count();
    hits as f64 / labels.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub hyper: AdamConfig,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &SideParams<T>, hyper: AdamConfig) -> Self {
        let n = params.to_flat().len();
        Self { hyper, m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0 }
    }
}

/// One bias-corrected Adam update, elementwise in parameter order.
pub fn adam_step<T: Scalar>(
    params: &mut SideParams<T>,
    grads: &SideGrads<T>,
    state: &mut AdamState<T>,
) -> Result<()> {
    let shapes_agree = params.config() == grads.config()
        && params.slices().iter().zip(grads.slices()).all(|(p, g)| p.len() == g.len());
    let n: usize = params.slices().iter().map(|s| s.len()).sum();
    if !shapes_agree || state.m.len() != n {
        return Err(Error::Shape("parameters, gradients and optimizer state disagree".into()));
    }
    state.t += 1;
    let h = state.hyper;
    let (b1, b2) = (T::of(h.beta1), T::of(h.beta2));
    let bc1 = T::one() - T::of(h.beta1.powi(state.t as i32));
    let bc2 = T::one() - T::of(h.beta2.powi(state.t as i32));
    let (lr, eps) = (T::of(h.lr), T::of(h.eps));

    let flat_grads = grads.to_flat();
    let mut k = 0;
    for p in params.slices_mut() {
        for w in p.iter_mut() {
            let g = flat_grads[k];
            let m = b1 * state.m[k] + (T::one() - b1) * g;
            let v = b2 * state.v[k] + (T::one() - b2) * g * g;
            state.m[k] = m;
            state.v[k] = v;
            *w = *w - lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            k += 1;
        }
    }
    params.bump_version();
    Ok(())
}

/// One JSONL row of the server metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub batch_id: u64,
    pub loss: f64,
    pub acc: f64,
    pub grad_norm: f64,
    pub t_deq_ms: f64,
    pub t_fwd_ms: f64,
    pub t_bwd_ms: f64,
    pub t_opt_ms: f64,
    pub bytes_in: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub side: SideConfig,
    pub adam: AdamConfig,
    pub loss: LossKind,
    pub seed: u64,
}

/// Server training state: parameters, optimizer and batch ordering.
pub struct Trainer {
    params: SideParams<f32>,
    adam: AdamState<f32>,
    loss: LossKind,
    last_batch: Option<u64>,
    iterations: u64,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

impl Trainer {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let params = init_side::<f32>(&config.side, config.seed)?;
        let adam = AdamState::new(&params, config.adam);
        Ok(Self { params, adam, loss: config.loss, last_batch: None, iterations: 0 })
    }

    pub fn params(&self) -> &SideParams<f32> {
        &self.params
    }

    pub fn iterations(&self) -> u64 {
        self.iterations
    }

    fn dequantize_taps(&self, batch: &ActBatch) -> Result<Vec<Tensor<f32>>> {
        let want = self.params.config().taps();
        if batch.taps.len() != want {
            return Err(Error::Protocol(format!(
                "batch {} carries {} taps, session agreed on {want}",
                batch.batch_id,
                batch.taps.len()
            )));
        }
        batch.taps.iter().map(|t| dequantize(&t.act)).collect()
    }

    /// Dequantize, forward, backward and step on one batch. Batches must
    /// arrive with strictly increasing ids; anything else is rejected
    /// without touching the parameters.
    pub fn train_iteration(&mut self, batch: &ActBatch) -> Result<IterationMetrics> {
        if let Some(last) = self.last_batch {
            if batch.batch_id <= last {
                return Err(Error::Protocol(format!(
                    "batch {} received after batch {last}",
                    batch.batch_id
                )));
            }
        }
        let start = Instant::now();
        let taps = self.dequantize_taps(batch)?;
        let t_deq_ms = ms(start);

        let start = Instant::now();
        let (logits, cache) = side_forward(&taps, &self.params, true)?;
        let (loss, d_logits) = loss_and_grad(&logits, &batch.labels, self.loss)?;
        let acc = accuracy(&logits, &batch.labels);
        let t_fwd_ms = ms(start);

        let start = Instant::now();
        let cache = cache.expect("training forward returns a cache");
        let grads = side_backward(&cache, &d_logits, &self.params)?;
        let grad_norm = grads.l2_norm();
        let t_bwd_ms = ms(start);

        let start = Instant::now();
        adam_step(&mut self.params, &grads, &mut self.adam)?;
        let t_opt_ms = ms(start);

        if !loss.is_finite() {
            return Err(Error::State(format!("non-finite loss at batch {}", batch.batch_id)));
        }
        self.last_batch = Some(batch.batch_id);
        self.iterations += 1;
        Ok(IterationMetrics {
            batch_id: batch.batch_id,
            loss: loss as f64,
            acc,
            grad_norm,
            t_deq_ms,
            t_fwd_ms,
            t_bwd_ms,
            t_opt_ms,
            bytes_in: frame_len_act_batch(batch),
        })
    }

    /// Loss and accuracy of the current parameters on a batch, no update.
    pub fn evaluate(&self, batch: &ActBatch) -> Result<(f64, f64)> {
        let taps = self.dequantize_taps(batch)?;
        let (logits, _) = side_forward(&taps, &self.params, false)?;
        let (loss, _) = loss_and_grad(&logits, &batch.labels, self.loss)?;
        Ok((loss as f64, accuracy(&logits, &batch.labels)))
    }
}
